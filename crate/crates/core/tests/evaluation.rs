use std::fs;
use std::path::Path;

use amulet_core::data::netpbm::Image8;
use amulet_core::infer::{infer_fused_only, normalize_per_image, predict, raw_saliency, InferMode};
use amulet_core::metrics::{
    adaptive_threshold, evaluate_dirs, f_measure, pr_curve, score_image, Conventions, EvalReport,
    FAggregation,
};
use amulet_core::model::{AmuletNet, ModelConfig};
use amulet_core::tensor::{ParamStore, Tape, Tensor};
use amulet_core::train::init::init_msra;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force counts of `q/255 ≥ num/den`.
fn counts(q: &[u8], gt: &[bool], num: u64, den: u64) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for i in 0..q.len() {
        let fg = q[i] as u64 * den >= 255 * num;
        if fg && gt[i] {
            tp += 1;
        }
        if fg && !gt[i] {
            fp += 1;
        }
        if !fg && gt[i] {
            fneg += 1;
        }
    }
    (tp, fp, fneg)
}

fn oracle_pr((tp, fp, fneg): (u64, u64, u64)) -> (f64, f64) {
    let p = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    (p, r)
}

fn oracle_f(p: f64, r: f64) -> f64 {
    if 0.3 * p + r == 0.0 {
        0.0
    } else {
        (1.0 + 0.3) * p * r / (0.3 * p + r)
    }
}

#[test]
fn metrics_match_brute_force_oracle_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let conv = Conventions::default();
    for case in 0..100 {
        let n = 64;
        // Mix of smooth, sparse and saturated maps so that clamping and ties occur.
        let q: Vec<u8> = match case % 4 {
            0 => (0..n).map(|_| rng.random()).collect(),
            1 => (0..n)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        rng.random()
                    } else {
                        0
                    }
                })
                .collect(),
            2 => (0..n)
                .map(|_| {
                    if rng.random_bool(0.7) {
                        255
                    } else {
                        rng.random_range(200..=255)
                    }
                })
                .collect(),
            _ => (0..n).map(|_| rng.random_range(0..4) * 64).collect(),
        };
        let gt: Vec<bool> = (0..n)
            .map(|_| rng.random_bool(if case % 10 == 0 { 0.0 } else { 0.35 }))
            .collect();
        let s = score_image("x", &q, &gt, &conv).unwrap();

        let sum: u64 = q.iter().map(|&v| v as u64).sum();
        let den = 255 * n as u64;
        let (p, r) = oracle_pr(counts(&q, &gt, (2 * sum).min(den), den));
        assert_eq!((s.precision, s.recall), (p, r), "case {case}");
        assert_eq!(s.fbeta, oracle_f(p, r), "case {case}");

        let err: u64 = q
            .iter()
            .zip(&gt)
            .map(|(&v, &g)| if g { 255 - v as u64 } else { v as u64 })
            .sum();
        assert_eq!(s.mae, err as f64 / den as f64, "case {case}");

        for k in 0..256u64 {
            assert_eq!(
                s.pr_curve[k as usize],
                oracle_pr(counts(&q, &gt, k, 255)),
                "case {case} k {k}"
            );
        }
    }
}

#[test]
fn hand_examples() {
    assert!((f_measure(0.8, 0.6) - 0.74286).abs() < 1e-5);
    assert!((adaptive_threshold(&[0.1, 0.2, 0.3, 0.4]) - 0.5).abs() < 1e-6);
    let gt = [true, false, true, true];
    let curve = pr_curve(&[0, 0, 0, 0], &gt, &Conventions::default()).unwrap();
    assert_eq!(curve[0].1, 1.0);
    assert_eq!(curve[1], (1.0, 0.0));
}

fn write_maps(dir: &Path, maps: &[(&str, Vec<u8>)]) {
    fs::create_dir_all(dir).unwrap();
    for (id, m) in maps {
        Image8::new(4, 2, 1, m.clone())
            .write(&dir.join(format!("{id}.pgm")))
            .unwrap();
    }
}

#[test]
fn directory_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    let masks = [
        ("a", vec![255, 255, 0, 0, 0, 0, 0, 0]),
        ("b", vec![0, 0, 0, 255, 255, 255, 0, 0]),
    ];
    write_maps(&gt, &masks);

    let same = tmp.path().join("same");
    write_maps(&same, &masks);
    let ev = evaluate_dirs(&same, &gt, &Conventions::default(), FAggregation::default()).unwrap();
    assert!(ev.complete());
    assert_eq!((ev.report.fbeta, ev.report.mae), (1.0, 0.0));

    let inv = tmp.path().join("inv");
    let complement: Vec<(&str, Vec<u8>)> = masks
        .iter()
        .map(|(id, m)| (*id, m.iter().map(|v| 255 - v).collect()))
        .collect();
    write_maps(&inv, &complement);
    let ev = evaluate_dirs(&inv, &gt, &Conventions::default(), FAggregation::default()).unwrap();
    assert_eq!(ev.report.mae, 1.0);

    let partial = tmp.path().join("partial");
    write_maps(&partial, &[("a", vec![128; 8]), ("c", vec![0; 8])]);
    let ev = evaluate_dirs(
        &partial,
        &gt,
        &Conventions::default(),
        FAggregation::default(),
    )
    .unwrap();
    assert_eq!(ev.missing_gt, ["c"]);
    assert_eq!(ev.missing_pred, ["b"]);
    assert_eq!(ev.report.images.len(), 1);

    let out = tmp.path().join("report");
    let mixed = tmp.path().join("mixed");
    write_maps(
        &mixed,
        &[
            ("a", vec![255, 10, 0, 0, 30, 0, 0, 0]),
            ("b", vec![0, 0, 0, 200, 255, 40, 90, 0]),
        ],
    );
    let ev = evaluate_dirs(
        &mixed,
        &gt,
        &Conventions::default(),
        FAggregation::default(),
    )
    .unwrap();
    ev.report.write(&out).unwrap();
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    let mae: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(rows.last().unwrap()[0], "mean");
    assert!((mae[2] - (mae[0] + mae[1]) / 2.0).abs() < 1e-6);
    let pr = fs::read_to_string(out.join("pr_curve.csv")).unwrap();
    assert_eq!(pr.lines().next().unwrap(), "threshold,precision,recall");
    assert_eq!(
        pr.lines().nth(256).unwrap().split(',').next().unwrap(),
        "1.000000"
    );
}

#[test]
fn fused_only_inference_is_the_fused_foreground_channel() {
    let mut store = ParamStore::<f32>::new();
    let net = AmuletNet::new(ModelConfig::default(), &mut store).unwrap();
    init_msra(&mut store, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_vec(
        [2, 3, 64, 64],
        (0..2 * 3 * 4096).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = net.forward(&mut tape, &store, xv).unwrap();
    let expected = infer_fused_only(&tape, &fwd.predictions);
    let fe = tape.value(fwd.predictions.fused_excitation);
    assert_eq!(
        expected.data(),
        &fe.data()[..]
            .chunks_exact(4096)
            .enumerate()
            .filter(|(i, _)| i % 2 == 1)
            .flat_map(|(_, c)| c.to_vec())
            .collect::<Vec<_>>()[..]
    );
    assert_eq!(
        predict(&net, &store, x.clone(), InferMode::FusedOnly).unwrap(),
        expected
    );
    let full = predict(&net, &store, x, InferMode::Full).unwrap();
    assert!(full.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn pair_tensor(fg: &[f64]) -> Tensor<f64> {
    let mut d: Vec<f64> = fg.iter().map(|v| 1.0 - v).collect();
    d.extend_from_slice(fg);
    Tensor::from_f64([1, 2, 1, fg.len()], &d).unwrap()
}

proptest! {
    #[test]
    fn saliency_is_bounded_and_monotone(
        levels in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 6), 1..5),
        fused in proptest::collection::vec(0.0f64..=1.0, 6),
        pixel in 0usize..6,
        bump in 0.0f64..0.5,
    ) {
        let ts: Vec<Tensor<f64>> = levels.iter().map(|l| pair_tensor(l)).collect();
        let refs: Vec<&Tensor<f64>> = ts.iter().collect();
        let raw = raw_saliency(&refs, &pair_tensor(&fused));
        let s = normalize_per_image(&raw);
        prop_assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut up = levels.clone();
        up[0][pixel] = (up[0][pixel] + bump).min(1.0);
        let ts2: Vec<Tensor<f64>> = up.iter().map(|l| pair_tensor(l)).collect();
        let refs2: Vec<&Tensor<f64>> = ts2.iter().collect();
        let raw2 = raw_saliency(&refs2, &pair_tensor(&fused));
        prop_assert!(raw2.data()[pixel] >= raw.data()[pixel]);
    }

    #[test]
    fn f_of_equal_precision_and_recall_is_itself(p in 0.0f64..=1.0) {
        prop_assert!((f_measure(p, p) - p).abs() <= 1e-15);
    }

    #[test]
    fn scores_are_in_unit_range(q in proptest::collection::vec(any::<u8>(), 16), g in proptest::collection::vec(any::<bool>(), 16)) {
        let s = score_image("x", &q, &g, &Conventions::default()).unwrap();
        for v in [s.precision, s.recall, s.fbeta, s.mae] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(s.pr_curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn dataset_means_ignore_image_order(
        maps in proptest::collection::vec((proptest::collection::vec(any::<u8>(), 9), proptest::collection::vec(any::<bool>(), 9)), 1..6),
        rotate in 0usize..6,
    ) {
        let scores: Vec<_> = maps.iter().enumerate()
            .map(|(i, (q, g))| score_image(&format!("img{i}"), q, g, &Conventions::default()).unwrap())
            .collect();
        let mut shuffled = scores.clone();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(
            EvalReport::aggregate(scores, FAggregation::default()),
            EvalReport::aggregate(shuffled, FAggregation::default())
        );
    }
}
