//! Adaptive-threshold F-measure, MAE and PR curves on 8-bit saliency maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::netpbm::Image8;
use crate::data::read_manifest;
use crate::error::{Error, Result};

pub const BETA2: f64 = 0.3;
pub const LEVELS: usize = 256;

/// Values reported when a ratio has an empty denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conventions {
    /// Precision when nothing is predicted foreground.
    pub empty_precision: f64,
    /// Recall when the ground truth has no foreground.
    pub empty_recall: f64,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            empty_precision: 1.0,
            empty_recall: 1.0,
        }
    }
}

/// How the dataset F-measure is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FAggregation {
    /// F of the mean precision and mean recall.
    #[default]
    MeanPrecisionRecall,
    /// Mean of the per-image F values.
    MeanOfImages,
}

impl std::str::FromStr for FAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-pr" => Ok(FAggregation::MeanPrecisionRecall),
            "per-image" => Ok(FAggregation::MeanOfImages),
            _ => Err(Error::Config(format!(
                "unknown F aggregation `{s}` (mean-pr, per-image)"
            ))),
        }
    }
}

impl std::fmt::Display for FAggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FAggregation::MeanPrecisionRecall => "mean-pr",
            FAggregation::MeanOfImages => "per-image",
        })
    }
}

pub fn quantize(s: f64) -> u8 {
    (s.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `min(2·mean, 1)`.
pub fn adaptive_threshold(map: &[f64]) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    (2.0 * map.iter().sum::<f64>() / map.len() as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn precision(&self, conv: &Conventions) -> f64 {
        ratio(self.tp, self.tp + self.fp, conv.empty_precision)
    }

    pub fn recall(&self, conv: &Conventions) -> f64 {
        ratio(self.tp, self.tp + self.fn_, conv.empty_recall)
    }
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn check_len(map: usize, gt: usize) -> Result<()> {
    if map != gt {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            dim: "pixel count",
            expected: gt,
            found: map,
        });
    }
    Ok(())
}

/// Confusion counts of `map ≥ threshold` against `gt`.
pub fn confusion(map: &[f64], gt: &[bool], threshold: f64) -> Result<Confusion> {
    check_len(map.len(), gt.len())?;
    let mut c = Confusion::default();
    for (&s, &g) in map.iter().zip(gt) {
        match (s >= threshold, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

pub fn precision_recall(
    map: &[f64],
    gt: &[bool],
    threshold: f64,
    conv: &Conventions,
) -> Result<(f64, f64)> {
    let c = confusion(map, gt, threshold)?;
    Ok((c.precision(conv), c.recall(conv)))
}

/// `(1+β²)·P·R / (β²·P + R)`, zero when the denominator vanishes.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

pub fn mae(map: &[f64], gt: &[bool]) -> Result<f64> {
    check_len(map.len(), gt.len())?;
    if map.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = map
        .iter()
        .zip(gt)
        .map(|(&s, &g)| (s - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / map.len() as f64)
}

/// Precision/recall at thresholds `k/255`, `k = 0..=255`, of an 8-bit map.
pub fn pr_curve(q: &[u8], gt: &[bool], conv: &Conventions) -> Result<Vec<(f64, f64)>> {
    check_len(q.len(), gt.len())?;
    let mut fg = [0u64; LEVELS];
    let mut bg = [0u64; LEVELS];
    for (&v, &g) in q.iter().zip(gt) {
        if g {
            fg[v as usize] += 1;
        } else {
            bg[v as usize] += 1;
        }
    }
    let positives: u64 = fg.iter().sum();
    let mut curve = vec![(0.0, 0.0); LEVELS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..LEVELS).rev() {
        tp += fg[k];
        fp += bg[k];
        let c = Confusion {
            tp,
            fp,
            fn_: positives - tp,
        };
        curve[k] = (c.precision(conv), c.recall(conv));
    }
    Ok(curve)
}

/// Adaptive-threshold confusion of an 8-bit map, evaluated exactly:
/// `q/255 ≥ min(2·Σq/(255·N), 1)` is `q·N ≥ min(2·Σq, 255·N)`.
pub fn adaptive_confusion(q: &[u8], gt: &[bool]) -> Result<Confusion> {
    check_len(q.len(), gt.len())?;
    let n = q.len() as u64;
    let bound = (2 * q.iter().map(|&v| v as u64).sum::<u64>()).min(255 * n);
    let mut c = Confusion::default();
    for (&v, &g) in q.iter().zip(gt) {
        match (v as u64 * n >= bound, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// MAE of an 8-bit map from the exact integer error sum.
pub fn mae_quantized(q: &[u8], gt: &[bool]) -> Result<f64> {
    check_len(q.len(), gt.len())?;
    if q.is_empty() {
        return Ok(0.0);
    }
    let sum: u64 = q
        .iter()
        .zip(gt)
        .map(|(&v, &g)| (v as i64 - if g { 255 } else { 0 }).unsigned_abs())
        .sum();
    Ok(sum as f64 / (255.0 * q.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
    pub mae: f64,
    pub pr_curve: Vec<(f64, f64)>,
}

pub fn score_image(id: &str, q: &[u8], gt: &[bool], conv: &Conventions) -> Result<ImageScores> {
    let c = adaptive_confusion(q, gt)?;
    let (precision, recall) = (c.precision(conv), c.recall(conv));
    Ok(ImageScores {
        id: id.to_owned(),
        precision,
        recall,
        fbeta: f_measure(precision, recall),
        mae: mae_quantized(q, gt)?,
        pr_curve: pr_curve(q, gt, conv)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScores>,
    pub precision: f64,
    pub recall: f64,
    pub fbeta: f64,
    pub mae: f64,
    pub pr_curve: Vec<(f64, f64)>,
}

impl EvalReport {
    /// Dataset means; image order does not matter beyond summation rounding,
    /// and images are kept sorted by id so the sums are reproducible.
    pub fn aggregate(mut images: Vec<ImageScores>, aggregation: FAggregation) -> Self {
        images.sort_by(|a, b| a.id.cmp(&b.id));
        let n = images.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ImageScores) -> f64| images.iter().map(f).sum::<f64>() / n;
        let precision = mean(&|s| s.precision);
        let recall = mean(&|s| s.recall);
        let fbeta = match aggregation {
            FAggregation::MeanPrecisionRecall => f_measure(precision, recall),
            FAggregation::MeanOfImages => mean(&|s| s.fbeta),
        };
        let mae = mean(&|s| s.mae);
        let pr_curve = (0..LEVELS)
            .map(|k| (mean(&|s| s.pr_curve[k].0), mean(&|s| s.pr_curve[k].1)))
            .collect();
        EvalReport {
            images,
            precision,
            recall,
            fbeta,
            mae,
            pr_curve,
        }
    }

    /// `image,fbeta,mae,precision,recall` rows plus a `mean` row.
    pub fn report_csv(&self) -> String {
        let mut s = String::from("image,fbeta,mae,precision,recall\n");
        for r in &self.images {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.id, r.fbeta, r.mae, r.precision, r.recall
            );
        }
        let _ = writeln!(
            s,
            "mean,{:.6},{:.6},{:.6},{:.6}",
            self.fbeta, self.mae, self.precision, self.recall
        );
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for (k, (p, r)) in self.pr_curve.iter().enumerate() {
            let _ = writeln!(s, "{:.6},{:.6},{:.6}", k as f64 / 255.0, p, r);
        }
        s
    }

    /// Writes `report.csv` and `pr_curve.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.report_csv()),
            ("pr_curve.csv", self.pr_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Ground-truth masks by id: from `manifest.csv` when present, otherwise
/// every `<id>.pgm` in the directory.
pub fn ground_truth_paths(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let manifest = dir.join("manifest.csv");
    if manifest.is_file() {
        return Ok(read_manifest(&manifest)?
            .into_iter()
            .map(|e| (e.id, dir.join(e.mask_path)))
            .collect());
    }
    files_with_extension(dir, "pgm")
}

/// `<stem> → path` for every file in `dir` with the given extension.
pub fn files_with_extension(dir: &Path, ext: &str) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Result of pairing a prediction directory with ground truth.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub missing_gt: Vec<String>,
    pub missing_pred: Vec<String>,
}

impl Evaluation {
    pub fn complete(&self) -> bool {
        self.missing_gt.is_empty() && self.missing_pred.is_empty()
    }
}

/// Scores every id present in both directories.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    conv: &Conventions,
    aggregation: FAggregation,
) -> Result<Evaluation> {
    let preds = files_with_extension(pred_dir, "pgm")?;
    let gts = ground_truth_paths(gt_dir)?;
    let missing_gt = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .cloned()
        .collect();
    let missing_pred = gts
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .cloned()
        .collect();
    let mut images = Vec::new();
    for (id, pred_path) in &preds {
        let Some(gt_path) = gts.get(id) else { continue };
        let p = gray(pred_path)?;
        let g = gray(gt_path)?;
        if (p.width, p.height) != (g.width, g.height) {
            return Err(Error::ExtentMismatch {
                image: pred_path.clone(),
                mask: gt_path.clone(),
                image_dims: (p.width, p.height),
                mask_dims: (g.width, g.height),
            });
        }
        let mask: Vec<bool> = g.data.iter().map(|&v| v >= 128).collect();
        images.push(score_image(id, &p.data, &mask, conv)?);
    }
    Ok(Evaluation {
        report: EvalReport::aggregate(images, aggregation),
        missing_gt,
        missing_pred,
    })
}

fn gray(path: &Path) -> Result<Image8> {
    let img = Image8::read(path)?;
    if img.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "expected a gray (P5) map".into(),
        });
    }
    Ok(img)
}
