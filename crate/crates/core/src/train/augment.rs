use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Decodes variant `v` in 0..8 into (mirror, quarter turns counter-clockwise).
pub fn decode_variant(v: u8) -> (bool, u8) {
    (v >= 4, v % 4)
}

/// Source coordinate of output pixel `(y, x)` for a square of side `n`
/// after mirroring (left-right) and then rotating by `turns` quarter turns.
fn source(y: usize, x: usize, h: usize, w: usize, mirror: bool, turns: u8) -> (usize, usize) {
    // Undo the rotation.
    let (sy, sx) = match turns {
        0 => (y, x),
        1 => (x, w - 1 - y),
        2 => (h - 1 - y, w - 1 - x),
        _ => (h - 1 - x, y),
    };
    if mirror {
        (sy, w - 1 - sx)
    } else {
        (sy, sx)
    }
}

fn transform<T: Real>(t: &Tensor<T>, mirror: bool, turns: u8) -> Tensor<T> {
    let s = t.shape();
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(plane)
        .zip(t.data().chunks_exact(plane))
    {
        for y in 0..s.h {
            for x in 0..s.w {
                let (sy, sx) = source(y, x, s.h, s.w, mirror, turns);
                dst[y * s.w + x] = src[sy * s.w + sx];
            }
        }
    }
    out
}

/// Applies the same mirror/rotation to an image and its mask.
pub fn augment<T: Real>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    variant: u8,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if variant >= 8 {
        return Err(Error::Config(format!(
            "augmentation variant {variant} is outside 0..8"
        )));
    }
    let (mirror, turns) = decode_variant(variant);
    let (si, sm) = (image.shape(), mask.shape());
    if (si.h, si.w) != (sm.h, sm.w) {
        return Err(Error::geometry(
            "augment",
            format!("image is {}x{} but mask is {}x{}", si.h, si.w, sm.h, sm.w),
        ));
    }
    if turns % 2 == 1 && si.h != si.w {
        return Err(Error::geometry(
            "augment",
            format!("a quarter turn needs a square input, got {}x{}", si.h, si.w),
        ));
    }
    Ok((
        transform(image, mirror, turns),
        transform(mask, mirror, turns),
    ))
}
