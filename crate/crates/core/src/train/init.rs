use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Init, ParamStore, Real};

/// One axis of a bilinear upsampling kernel of even length `k = 2f`.
pub fn bilinear_1d(k: usize) -> Vec<f64> {
    let f = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { f - 1.0 } else { f - 0.5 };
    (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / f)
        .collect()
}

/// Fills every parameter according to its [`Init`] tag, in registration
/// order, from a generator seeded with `seed`.
///
/// `Msra` draws from N(0, 2/fan_in) with fan_in = in·k·k. `Bilinear`
/// (transposed kernels `[in, out, k, k]`) is a bilinear kernel scaled per
/// channel pair by an N(0, 2/in) draw, i.e. a random 1×1 mixing followed by
/// bilinear upsampling. `Zero` leaves zeros.
pub fn init_msra<T: Real>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let s = p.value.shape();
        let data = p.value.data_mut();
        match p.init {
            Init::Zero => data.fill(T::zero()),
            Init::Msra => {
                let fan_in = (s.c * s.h * s.w) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                for v in data.iter_mut() {
                    *v = T::from_f64_lossy(normal.sample(&mut rng));
                }
            }
            Init::Bilinear => {
                let ky = bilinear_1d(s.h);
                let kx = bilinear_1d(s.w);
                let normal = Normal::new(0.0, (2.0 / s.n as f64).sqrt()).expect("positive std");
                for pair in data.chunks_exact_mut(s.h * s.w) {
                    let scale = normal.sample(&mut rng);
                    for (i, v) in pair.iter_mut().enumerate() {
                        *v = T::from_f64_lossy(scale * ky[i / s.w] * kx[i % s.w]);
                    }
                }
            }
        }
        p.momentum.data_mut().fill(T::zero());
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_weights() {
        assert_eq!(bilinear_1d(4), vec![0.25, 0.75, 0.75, 0.25]);
        let k8 = bilinear_1d(8);
        // Taps a stride apart sum to one.
        for i in 0..4 {
            assert!((k8[i] + k8[i + 4] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn msra_std_and_zero_bias() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", [64, 16, 3, 3], Init::Msra);
        let b = store.register("b", [1, 64, 1, 1], Init::Zero);
        store.get_mut(b).value.data_mut().fill(3.0);
        init_msra(&mut store, 5);
        let vals = store.get(w).value.data();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / 144.0).sqrt();
        assert!((expected - 0.1179).abs() < 1e-4);
        assert!((std - expected).abs() < 0.05 * expected, "{std}");
        assert!(mean.abs() < 0.01);
        assert!(store.get(b).value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = |seed| {
            let mut store = ParamStore::<f32>::new();
            store.register("a", [4, 3, 3, 3], Init::Msra);
            store.register("b", [3, 2, 4, 4], Init::Bilinear);
            init_msra(&mut store, seed);
            store
                .iter()
                .flat_map(|p| p.value.data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }
}
