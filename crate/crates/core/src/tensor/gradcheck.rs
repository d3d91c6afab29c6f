//! Central-difference gradient checking in `f64`.
//!
//! A sample whose perturbed evaluations change a relu sign or a pooling
//! winner is retried with a smaller step; if it still crosses a kink it is
//! excluded and counted rather than compared.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared in absolute terms.
    pub abs_floor: f64,
    /// Times the step is divided by ten when a perturbation crosses a kink.
    pub kink_retries: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            epsilon: 1e-3,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            kink_retries: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    /// Element index of the worst error.
    pub worst_index: Option<usize>,
}

impl GroupReport {
    fn new(name: impl Into<String>) -> Self {
        GroupReport {
            name: name.into(),
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            worst_index: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_error >= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Evaluates a central difference at one coordinate, shrinking the step when
/// the perturbation leaves the base activation region. `eval` sets the
/// coordinate offset and returns `(loss, activation fingerprint)`.
fn central_difference(
    cfg: &GradcheckConfig,
    base_print: u64,
    mut eval: impl FnMut(f64) -> Result<(f64, u64)>,
) -> Result<Option<f64>> {
    let mut eps = cfg.epsilon;
    for _ in 0..=cfg.kink_retries {
        let (plus, p1) = eval(eps)?;
        let (minus, p2) = eval(-eps)?;
        if p1 == base_print && p2 == base_print {
            return Ok(Some((plus - minus) / (2.0 * eps)));
        }
        eps /= 10.0;
    }
    Ok(None)
}

/// Checks tape gradients of a scalar function of tensor inputs.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss, &mut store)?;
    let base_print = tape.activation_fingerprint();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let run = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.scalar(loss), tape.activation_fingerprint()))
    };

    let mut groups = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut report = GroupReport::new(format!("input{i}"));
        for j in 0..input.len() {
            let orig = input.data()[j];
            let numeric = central_difference(cfg, base_print, |delta| {
                work[i].data_mut()[j] = orig + delta;
                let r = run(&work);
                work[i].data_mut()[j] = orig;
                r
            })?;
            record(&mut report, cfg, j, analytic[i].data()[j], numeric);
        }
        groups.push(report);
    }
    Ok(GradcheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}

/// Coordinates of one parameter to compare.
#[derive(Clone, Debug)]
pub struct ParamSample {
    pub id: ParamId,
    pub indices: Vec<usize>,
}

/// Checks parameter gradients of a scalar function of a parameter store.
/// Samples are reported grouped by `group_of(parameter name)`.
pub fn gradcheck_params<F>(
    f: F,
    store: &ParamStore<f64>,
    samples: &[ParamSample],
    group_of: impl Fn(&str) -> String,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let base_print = tape.activation_fingerprint();
    let analytic: Vec<Tensor<f64>> = work.iter().map(|p| p.grad.clone()).collect();
    work.zero_grad();

    let mut groups: Vec<GroupReport> = Vec::new();
    for sample in samples {
        let name = work.get(sample.id).name.clone();
        let group = group_of(&name);
        let pos = match groups.iter().position(|g| g.name == group) {
            Some(p) => p,
            None => {
                groups.push(GroupReport::new(group));
                groups.len() - 1
            }
        };
        for &j in &sample.indices {
            let orig = work.get(sample.id).value.data()[j];
            let numeric = central_difference(cfg, base_print, |delta| {
                work.get_mut(sample.id).value.data_mut()[j] = orig + delta;
                let mut tape = Tape::new();
                let r = f(&mut tape, &work)
                    .map(|loss| (tape.scalar(loss), tape.activation_fingerprint()));
                work.get_mut(sample.id).value.data_mut()[j] = orig;
                r
            })?;
            record(
                &mut groups[pos],
                cfg,
                j,
                analytic[sample.id.index()].data()[j],
                numeric,
            );
        }
    }
    Ok(GradcheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}

fn record(
    report: &mut GroupReport,
    cfg: &GradcheckConfig,
    index: usize,
    analytic: f64,
    numeric: Option<f64>,
) {
    match numeric {
        Some(n) => {
            let err = relative_error(analytic, n, cfg.abs_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_index = Some(index);
            }
        }
        None => report.excluded += 1,
    }
}
