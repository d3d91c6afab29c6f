//! Joint deeply supervised training with SGD and plateau learning-rate decay.

pub mod augment;
pub mod checkpoint;
pub mod init;
pub mod loss;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::data::{BatchSchedule, Dataset};
use crate::error::{Error, Result};
use crate::model::AmuletNet;
use crate::tensor::{sgd_step, BetaConvention, ParamStore, Tape, Tensor};
use augment::augment;
use checkpoint::Checkpoint;
use init::init_msra;
use loss::joint_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub lr_decay_factor: f64,
    /// Iterations per plateau window.
    pub plateau_window: usize,
    /// Minimum relative improvement of the window mean that avoids a decay.
    pub plateau_threshold: f64,
    /// Training stops once a decay takes the rate below this.
    pub min_lr: f64,
    pub seed: u64,
    pub alpha_f: f64,
    pub alpha_l: f64,
    /// Which class fraction weights the foreground term of each loss.
    pub beta: BetaConvention,
    /// Lower clamp on probabilities inside the loss logarithm.
    pub log_eps: f64,
    pub augment: bool,
    /// Divide the gradient by the number of supervised pixels in a batch.
    /// The logged loss is always the un-normalised sum.
    pub normalize_loss: bool,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            max_iters: 3000,
            lr_decay_factor: 0.1,
            plateau_window: 200,
            plateau_threshold: 0.005,
            min_lr: 1e-5,
            seed: 0,
            alpha_f: 1.0,
            alpha_l: 1.0,
            beta: BetaConvention::default(),
            log_eps: Tape::<f32>::DEFAULT_LOG_EPS,
            augment: true,
            normalize_loss: true,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 1e-8,
            min_lr: 1e-11,
            max_iters: 200_000,
            normalize_loss: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        for (k, v) in [
            ("lr", self.lr),
            ("min_lr", self.min_lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("log_eps", self.log_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{k} must be positive, got {v}"));
            }
        }
        for (k, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("alpha_f", self.alpha_f),
            ("alpha_l", self.alpha_l),
            ("plateau_threshold", self.plateau_threshold),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{k} must be non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 || self.plateau_window == 0 {
            return fail("batch_size and plateau_window must be positive".into());
        }
        Ok(())
    }
}

/// Everything besides parameters that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    pub lr: f64,
    /// Mean loss of the last completed plateau window.
    pub prev_window: Option<f64>,
    /// Total loss of every completed iteration.
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn new(lr: f64) -> Self {
        TrainState {
            iteration: 0,
            lr,
            prev_window: None,
            history: Vec::new(),
        }
    }

    /// Records one loss; at each window boundary decays the rate when the
    /// window mean improved by less than the threshold. Returns true on decay.
    pub fn record(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        self.history.push(loss);
        self.iteration += 1;
        let w = cfg.plateau_window;
        if !self.history.len().is_multiple_of(w) {
            return false;
        }
        let window = &self.history[self.history.len() - w..];
        let mean = window.iter().sum::<f64>() / w as f64;
        let decayed = match self.prev_window {
            Some(prev) if prev > 0.0 => (prev - mean) / prev < cfg.plateau_threshold,
            _ => false,
        };
        if decayed {
            self.lr *= cfg.lr_decay_factor;
        }
        self.prev_window = Some(mean);
        decayed
    }

    pub fn exhausted(&self, cfg: &TrainConfig) -> bool {
        self.lr < cfg.min_lr
    }
}

/// Per-iteration log line.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the iteration just completed.
    pub iteration: u64,
    pub total: f64,
    pub fused: f64,
    /// Zero for inactive levels.
    pub levels: Vec<f64>,
    /// Rate used for this step.
    pub lr: f64,
}

pub struct Trainer {
    pub net: AmuletNet,
    pub store: ParamStore<f32>,
    pub config: TrainConfig,
    pub state: TrainState,
    pub schedule: BatchSchedule,
}

impl Trainer {
    /// Fresh, seeded initialisation.
    pub fn new(
        net: AmuletNet,
        mut store: ParamStore<f32>,
        config: TrainConfig,
        dataset_len: usize,
    ) -> Result<Self> {
        config.validate()?;
        init_msra(&mut store, config.seed);
        let schedule =
            BatchSchedule::new(dataset_len, config.batch_size, config.seed, config.augment)?;
        Ok(Trainer {
            net,
            state: TrainState::new(config.lr),
            store,
            config,
            schedule,
        })
    }

    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.apply(&mut self.store)?;
        self.state = ck.state.clone();
        Ok(())
    }

    /// Batch generator as left after drawing the current epoch.
    fn epoch_rng(&self) -> ChaCha8Rng {
        self.schedule
            .draw_epoch(self.schedule.epoch_of(self.state.iteration))
            .1
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.store, &self.epoch_rng(), &self.state)
    }

    fn assemble(&self, data: &Dataset) -> Result<(Tensor, Tensor)> {
        let batch = self.schedule.batch_at(self.state.iteration);
        let [h, w] = self.net.config.backbone.input_size;
        let mut images = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for &(i, variant) in &batch {
            let s = &data.samples[i];
            if s.extent() != [h, w] {
                return Err(Error::Config(format!(
                    "sample `{}` is {}x{} but the model expects {h}x{w}",
                    s.id,
                    s.extent()[0],
                    s.extent()[1]
                )));
            }
            let (img, mask) = augment(&s.image, &s.mask, variant)?;
            images.push(img);
            masks.push(mask);
        }
        Ok((
            Tensor::stack(&images.iter().collect::<Vec<_>>())?,
            Tensor::stack(&masks.iter().collect::<Vec<_>>())?,
        ))
    }

    /// One forward/backward/update on the scheduled batch.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let (images, masks) = self.assemble(data)?;
        let mut tape = Tape::new()
            .with_beta_convention(self.config.beta)
            .with_log_eps(self.config.log_eps);
        let x = tape.constant(images);
        let fwd = self.net.forward(&mut tape, &self.store, x)?;
        let jl = joint_loss(
            &mut tape,
            &fwd.predictions,
            &masks,
            self.config.alpha_f,
            self.config.alpha_l,
        )?;
        let total = tape.scalar(jl.total);
        let iteration = self.state.iteration + 1;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let (fused, levels) = jl.values(&tape);
        let seed = if self.config.normalize_loss {
            let s = masks.shape();
            tape.scale(jl.total, 1.0 / (s.n * s.h * s.w) as f32)
        } else {
            jl.total
        };
        tape.backward(seed, &mut self.store)?;
        let lr = self.state.lr;
        sgd_step(
            &mut self.store,
            lr as f32,
            self.config.momentum as f32,
            self.config.weight_decay as f32,
        );
        self.state.record(total, &self.config);
        Ok(StepRecord {
            iteration,
            total,
            fused,
            levels: levels.into_iter().map(|l| l.unwrap_or(0.0)).collect(),
            lr,
        })
    }
}

/// CSV `iteration,total_loss,loss_f,loss_0..loss_L,lr`.
pub struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LossLog {
    pub fn create(path: &Path, levels: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = LossLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        let mut header = String::from("iteration,total_loss,loss_f");
        for l in 0..levels {
            header.push_str(&format!(",loss_{l}"));
        }
        header.push_str(",lr");
        log.line(&header)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let mut s = format!("{},{},{}", r.iteration, r.total, r.fused);
        for l in &r.levels {
            s.push_str(&format!(",{l}"));
        }
        s.push_str(&format!(",{}", r.lr));
        self.line(&s)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub stop: StopReason,
    pub iterations: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("checkpoint_{iteration:06}.amlt")
}

/// Runs until `max_iters` total iterations (or the plateau floor), writing
/// `loss.csv`, periodic checkpoints and `final.amlt` into `out`.
pub fn run(
    trainer: &mut Trainer,
    data: &Dataset,
    out: &Path,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = LossLog::create(&out.join("loss.csv"), trainer.net.levels())?;
    let cfg = trainer.config.clone();
    let (mut first, mut last) = (None, None);
    let mut stop = StopReason::MaxIters;
    while trainer.state.iteration < cfg.max_iters {
        if trainer.state.exhausted(&cfg) {
            stop = StopReason::Plateau;
            break;
        }
        let rec = match trainer.step(data) {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        log.append(&rec)?;
        first.get_or_insert(rec.total);
        last = Some(rec.total);
        on_step(&rec);
        if cfg.checkpoint_every > 0 && rec.iteration % cfg.checkpoint_every == 0 {
            trainer
                .checkpoint()
                .save(&out.join(checkpoint_name(rec.iteration)))?;
        }
    }
    if stop == StopReason::MaxIters && trainer.state.exhausted(&cfg) {
        stop = StopReason::Plateau;
    }
    log.flush()?;
    let final_checkpoint = out.join("final.amlt");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        stop,
        iterations: trainer.state.iteration,
        first_loss: first,
        last_loss: last,
        final_checkpoint,
    })
}
