//! Seeded synthetic saliency scenes: one or more flat-coloured figures on a
//! flat, gradient or textured background.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::netpbm::Image8;
use super::{write_manifest, ManifestEntry};
use crate::error::{Error, Result};

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.7;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $kw:literal),* $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),*];
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $kw),* })
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($name::$variant),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), s
                    ))),
                }
            }
        }
    };
}

keyword_enum!(ShapeKind {
    Disc => "disc",
    Rectangle => "rectangle",
    Triangle => "triangle",
    Ring => "ring",
    Blob => "blob",
});

keyword_enum!(Background {
    Flat => "flat",
    Gradient => "gradient",
    Noise => "noise-texture",
});

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub shapes: Vec<ShapeKind>,
    /// Range of the colour distance between figure and background.
    pub contrast_range: [f64; 2],
    pub backgrounds: Vec<Background>,
    pub multi_object_prob: f64,
    pub boundary_touch_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 256,
            size: 64,
            shapes: ShapeKind::ALL.to_vec(),
            contrast_range: [0.15, 0.8],
            backgrounds: Background::ALL.to_vec(),
            multi_object_prob: 0.25,
            boundary_touch_prob: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("data: {m}")));
        if self.size < 8 {
            return fail(format!("size must be at least 8, got {}", self.size));
        }
        if self.shapes.is_empty() || self.backgrounds.is_empty() {
            return fail("shapes and backgrounds must be non-empty".into());
        }
        let [lo, hi] = self.contrast_range;
        if !(0.0..=hi).contains(&lo) || hi > 1.0 {
            return fail(format!(
                "contrast range [{lo}, {hi}] must satisfy 0 <= low <= high <= 1"
            ));
        }
        for (k, p) in [
            ("multi_object_prob", self.multi_object_prob),
            ("boundary_touch_prob", self.boundary_touch_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{k} = {p} is not a probability"));
            }
        }
        Ok(())
    }
}

/// A figure in pixel coordinates; pixel `(x, y)` is inside when its centre
/// `(x + 0.5, y + 0.5)` is.
#[derive(Clone, Debug, PartialEq)]
pub enum Figure {
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rectangle {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        angle: f64,
    },
    Triangle {
        pts: [(f64, f64); 3],
    },
    Ring {
        cx: f64,
        cy: f64,
        outer: f64,
        inner: f64,
    },
    /// Star-shaped outline `r(θ) = r · (1 + Σ a_k sin(kθ + φ_k))`.
    Blob {
        cx: f64,
        cy: f64,
        r: f64,
        harmonics: Vec<(f64, f64)>,
    },
}

impl Figure {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Figure::Disc { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Figure::Rectangle {
                cx,
                cy,
                hw,
                hh,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                (c * dx + s * dy).abs() <= *hw && (-s * dx + c * dy).abs() <= *hh
            }
            Figure::Triangle { pts } => {
                let cross = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                };
                let d = [
                    cross(pts[0], pts[1]),
                    cross(pts[1], pts[2]),
                    cross(pts[2], pts[0]),
                ];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
            Figure::Ring {
                cx,
                cy,
                outer,
                inner,
            } => {
                let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            }
            Figure::Blob {
                cx,
                cy,
                r,
                harmonics,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let theta = dy.atan2(dx);
                let scale: f64 = 1.0
                    + harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (a, phase))| a * ((k + 2) as f64 * theta + phase).sin())
                        .sum::<f64>();
                dx * dx + dy * dy <= (r * scale).powi(2)
            }
        }
    }

    /// Row-major mask of a `size × size` raster.
    pub fn rasterize(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                m[y * size + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        m
    }
}

/// Number of 8-connected foreground components.
pub fn connected_components(mask: &[bool], size: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % size) as isize, (i / size) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= size as isize || ny >= size as isize {
                        continue;
                    }
                    let j = ny as usize * size + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

fn touches_border(mask: &[bool], size: usize) -> bool {
    (0..size).any(|i| {
        mask[i] || mask[(size - 1) * size + i] || mask[i * size] || mask[i * size + size - 1]
    })
}

/// True when some pixel of `a` is 8-adjacent to or overlaps a pixel of `b`.
fn adjacent(a: &[bool], b: &[bool], size: usize) -> bool {
    (0..a.len()).filter(|&i| a[i]).any(|i| {
        let (x, y) = ((i % size) as isize, (i / size) as isize);
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (nx, ny) = (x + dx, y + dy);
                nx >= 0
                    && ny >= 0
                    && nx < size as isize
                    && ny < size as isize
                    && b[ny as usize * size + nx as usize]
            })
        })
    })
}

/// One generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image8,
    pub mask: Image8,
}

fn random_figure(
    rng: &mut ChaCha8Rng,
    kind: ShapeKind,
    size: f64,
    scale: f64,
    touch: bool,
) -> Figure {
    let r = size * scale * rng.random_range(0.12..0.3);
    let (cx, cy) = if touch {
        // Centre close enough to an edge that the figure crosses it.
        let along = rng.random_range(0.2 * size..0.8 * size);
        let depth = rng.random_range(0.0..0.5 * r);
        match rng.random_range(0..4) {
            0 => (depth, along),
            1 => (size - depth, along),
            2 => (along, depth),
            _ => (along, size - depth),
        }
    } else {
        let margin = (r * 1.1).min(size / 2.0 - 1.0);
        (
            rng.random_range(margin..size - margin),
            rng.random_range(margin..size - margin),
        )
    };
    match kind {
        ShapeKind::Disc => Figure::Disc { cx, cy, r },
        ShapeKind::Rectangle => Figure::Rectangle {
            cx,
            cy,
            hw: r * rng.random_range(0.6..1.1),
            hh: r * rng.random_range(0.4..0.9),
            angle: rng.random_range(0.0..PI),
        },
        ShapeKind::Triangle => {
            let base = rng.random_range(0.0..2.0 * PI);
            let mut pts = [(0.0, 0.0); 3];
            for (k, p) in pts.iter_mut().enumerate() {
                let a = base + k as f64 * 2.0 * PI / 3.0 + rng.random_range(-0.4..0.4);
                let rr = r * rng.random_range(1.0..1.4);
                *p = (cx + rr * a.cos(), cy + rr * a.sin());
            }
            Figure::Triangle { pts }
        }
        ShapeKind::Ring => Figure::Ring {
            cx,
            cy,
            outer: r * 1.2,
            inner: r * rng.random_range(0.45..0.7),
        },
        ShapeKind::Blob => Figure::Blob {
            cx,
            cy,
            r,
            harmonics: (0..3)
                .map(|_| (rng.random_range(0.0..0.18), rng.random_range(0.0..2.0 * PI)))
                .collect(),
        },
    }
}

fn background(rng: &mut ChaCha8Rng, kind: Background, size: usize) -> Vec<[f64; 3]> {
    let mut color = || {
        [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ]
    };
    match kind {
        Background::Flat => vec![color(); size * size],
        Background::Gradient => {
            let (a, b) = (color(), color());
            let angle = rng.random_range(0.0..2.0 * PI);
            let (s, c) = angle.sin_cos();
            let mut out = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let u = ((x as f64 / size as f64 - 0.5) * c
                        + (y as f64 / size as f64 - 0.5) * s)
                        / 2f64.sqrt()
                        + 0.5;
                    out.push(std::array::from_fn(|k| a[k] + (b[k] - a[k]) * u));
                }
            }
            out
        }
        Background::Noise => {
            // Bilinearly upsampled coarse random grid around a base colour.
            let base = color();
            let cells = 5;
            let grid: Vec<[f64; 3]> = (0..(cells + 1) * (cells + 1))
                .map(|_| {
                    std::array::from_fn(|k| {
                        (base[k] + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0)
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let gx = x as f64 / size as f64 * cells as f64;
                    let gy = y as f64 / size as f64 * cells as f64;
                    let (ix, iy) = (gx as usize, gy as usize);
                    let (fx, fy) = (gx - ix as f64, gy - iy as f64);
                    let at = |i: usize, j: usize| grid[j * (cells + 1) + i];
                    out.push(std::array::from_fn(|k| {
                        let top = at(ix, iy)[k] * (1.0 - fx) + at(ix + 1, iy)[k] * fx;
                        let bot = at(ix, iy + 1)[k] * (1.0 - fx) + at(ix + 1, iy + 1)[k] * fx;
                        top * (1.0 - fy) + bot * fy
                    }));
                }
            }
            out
        }
    }
}

/// Figure colour at Euclidean distance `contrast` (per-channel RMS) from the
/// mean background colour, staying inside the unit cube.
fn figure_color(rng: &mut ChaCha8Rng, mean: [f64; 3], contrast: f64) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut best = mean;
    let mut best_dist = -1.0;
    for _ in 0..16 {
        let d: [f64; 3] = std::array::from_fn(|_| normal.sample(rng));
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let c: [f64; 3] = std::array::from_fn(|k| {
            (mean[k] + d[k] / norm * contrast * 3f64.sqrt()).clamp(0.0, 1.0)
        });
        let dist = ((0..3).map(|k| (c[k] - mean[k]).powi(2)).sum::<f64>() / 3.0).sqrt();
        if (dist - contrast).abs() < 0.02 {
            return c;
        }
        if dist > best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}

/// Generates scene `index` of the stream defined by `cfg.seed`.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.size;
    let n = size * size;
    let multi = rng.random_bool(cfg.multi_object_prob);
    let touch = rng.random_bool(cfg.boundary_touch_prob);

    let mut accepted = None;
    for _ in 0..500 {
        let objects = if multi { rng.random_range(2..=3) } else { 1 };
        let scale = if multi { 0.75 } else { 1.0 };
        let mut mask = vec![false; n];
        let mut placed = 0;
        for k in 0..objects {
            let kind = *cfg.shapes.choose(&mut rng).expect("validated non-empty");
            for _ in 0..20 {
                let fig = random_figure(&mut rng, kind, size as f64, scale, touch && k == 0);
                let m = fig.rasterize(size);
                if m.iter().any(|&b| b) && !adjacent(&m, &mask, size) {
                    mask.iter_mut().zip(&m).for_each(|(a, &b)| *a |= b);
                    placed += 1;
                    break;
                }
            }
        }
        let frac = mask.iter().filter(|&&b| b).count() as f64 / n as f64;
        let ok = (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac)
            && (!multi || (placed >= 2 && connected_components(&mask, size) >= 2))
            && (!touch || touches_border(&mask, size));
        if ok {
            accepted = Some(mask);
            break;
        }
    }
    // Only reachable with extreme settings; fall back to a centred disc.
    let mask = accepted.unwrap_or_else(|| {
        let c = size as f64 / 2.0;
        Figure::Disc {
            cx: c,
            cy: c,
            r: size as f64 * 0.25,
        }
        .rasterize(size)
    });

    let bg_kind = *cfg
        .backgrounds
        .choose(&mut rng)
        .expect("validated non-empty");
    let bg = background(&mut rng, bg_kind, size);
    let mut mean = [0.0; 3];
    for (i, c) in bg.iter().enumerate() {
        if !mask[i] {
            (0..3).for_each(|k| mean[k] += c[k]);
        }
    }
    let bg_count = mask.iter().filter(|&&b| !b).count().max(1) as f64;
    mean.iter_mut().for_each(|v| *v /= bg_count);
    let [lo, hi] = cfg.contrast_range;
    let contrast = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let fg = figure_color(&mut rng, mean, contrast);

    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut image = Vec::with_capacity(n * 3);
    for i in 0..n {
        let base = if mask[i] { fg } else { bg[i] };
        for &b in &base {
            let v = (b + noise.sample(&mut rng)).clamp(0.0, 1.0);
            image.push((v * 255.0).round() as u8);
        }
    }
    Scene {
        image: Image8::new(size, size, 3, image),
        mask: Image8::new(
            size,
            size,
            1,
            mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        ),
    }
}

pub fn sample_id(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Writes `images/`, `masks/` and `manifest.csv` under `out`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    for dir in [out.join("images"), out.join("masks")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let scene = generate_scene(cfg, i);
        let id = sample_id(i);
        let entry = ManifestEntry {
            image_path: format!("images/{id}.ppm").into(),
            mask_path: format!("masks/{id}.pgm").into(),
            id,
        };
        scene.image.write(&out.join(&entry.image_path))?;
        scene.mask.write(&out.join(&entry.mask_path))?;
        entries.push(entry);
    }
    write_manifest(&out.join("manifest.csv"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fraction(mask: &Image8) -> f64 {
        mask.data.iter().filter(|&&v| v == 255).count() as f64 / mask.data.len() as f64
    }

    #[test]
    fn centred_disc_area() {
        for (size, r) in [(64, 10.0), (64, 20.0), (128, 31.5)] {
            let c = size as f64 / 2.0;
            let count = Figure::Disc { cx: c, cy: c, r }
                .rasterize(size)
                .iter()
                .filter(|&&b| b)
                .count() as f64;
            let area = PI * r * r;
            assert!(
                (count - area).abs() <= 0.02 * area,
                "r={r}: {count} vs {area}"
            );
        }
    }

    #[test]
    fn components_count() {
        let size = 8;
        let mut m = vec![false; 64];
        m[0] = true;
        m[9] = true; // diagonal neighbour joins
        m[7] = true;
        assert_eq!(connected_components(&m, size), 2);
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let cfg = SynthConfig {
            count: 40,
            ..SynthConfig::default()
        };
        for i in 0..cfg.count {
            let a = generate_scene(&cfg, i);
            assert_eq!(a, generate_scene(&cfg, i));
            let f = fraction(&a.mask);
            assert!(
                (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f),
                "scene {i}: {f}"
            );
            assert!(a.mask.data.iter().all(|&v| v == 0 || v == 255));
        }
    }

    #[test]
    fn multi_object_scenes_have_two_components() {
        let cfg = SynthConfig {
            multi_object_prob: 1.0,
            ..SynthConfig::default()
        };
        for i in 0..20 {
            let s = generate_scene(&cfg, i);
            let m: Vec<bool> = s.mask.data.iter().map(|&v| v > 0).collect();
            assert!(connected_components(&m, cfg.size) >= 2, "scene {i}");
        }
    }

    #[test]
    fn boundary_touch_scenes_reach_the_edge() {
        let cfg = SynthConfig {
            boundary_touch_prob: 1.0,
            ..SynthConfig::default()
        };
        for i in 0..20 {
            let s = generate_scene(&cfg, i);
            let m: Vec<bool> = s.mask.data.iter().map(|&v| v > 0).collect();
            assert!(touches_border(&m, cfg.size), "scene {i}");
        }
    }

    #[test]
    fn every_shape_kind_generates() {
        for &kind in ShapeKind::ALL {
            let cfg = SynthConfig {
                shapes: vec![kind],
                ..SynthConfig::default()
            };
            let f = fraction(&generate_scene(&cfg, 3).mask);
            assert!(f > 0.0);
        }
        assert_eq!(
            "noise-texture".parse::<Background>().unwrap(),
            Background::Noise
        );
        assert!("star".parse::<ShapeKind>().is_err());
    }

    #[test]
    fn validation() {
        let bad = SynthConfig {
            contrast_range: [0.5, 0.2],
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            shapes: vec![],
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
