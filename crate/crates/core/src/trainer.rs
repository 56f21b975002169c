//! Training: pixel-loss optimization, optionally alternated with a discriminator
//! under a score window, plus the teacher-forced to predicted-feedback curriculum.
//!
//! Alternation: the discriminator phase runs until the fake score drops below
//! `R - c1`, the generator phase until it rises above `R - c2`, with
//! `c1 = |R|/100` and `c2 = |R|/50` taken from a moving average of real scores.
//! `R` in the exit tests is the batch real score. Each inner iteration consumes
//! one minibatch. An epoch is a budget of `ceil(N / batch_size)` minibatches; a
//! phase that is still running when the budget runs out continues in the next
//! epoch.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
use crate::config::{ExitCheck, ExperimentConfig};
use crate::data::SequenceDataset;
use crate::discriminator::Discriminator;
use crate::error::{input_err, Error, Result};
use crate::metrics::{self, MetricReport, Protocol};
use crate::network::{Mspn, RolloutMode};
use crate::objectives;
use crate::ops;
use crate::optim::Adam;
use crate::params::{ParamInit, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Discriminator,
    Generator,
}

impl Phase {
    fn other(self) -> Self {
        match self {
            Phase::Discriminator => Phase::Generator,
            Phase::Generator => Phase::Discriminator,
        }
    }
}

/// Batch-mean discriminator scores of real and predicted frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub real: f64,
    pub fake: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseExit {
    Condition,
    Guard,
}

/// Tolerances derived from a real score: `(|r|/100, |r|/50)`.
pub fn tolerances(real: f64) -> (f64, f64) {
    (real.abs() / 100.0, real.abs() / 50.0)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlternationState {
    pub phase: Phase,
    pub real_ema: Option<f64>,
    pub c1: f64,
    pub c2: f64,
    /// Iterations (minibatches) spent in the current phase so far.
    pub phase_iterations: usize,
    pub phase_steps: usize,
    pub d_steps: u64,
    pub g_steps: u64,
    pub switches: u64,
    pub guard_trips: u64,
}

impl AlternationState {
    /// Folds a new real score into the moving average and refreshes `c1`, `c2`.
    pub fn observe(&mut self, s: Scores, decay: f64) {
        let ema = match self.real_ema {
            None => s.real,
            Some(prev) => decay * prev + (1.0 - decay) * s.real,
        };
        self.real_ema = Some(ema);
        (self.c1, self.c2) = tolerances(ema);
    }

    pub fn exit_holds(&self, phase: Phase, s: Scores) -> bool {
        match phase {
            Phase::Discriminator => s.fake < s.real - self.c1,
            Phase::Generator => s.fake > s.real - self.c2,
        }
    }

    fn switch(&mut self, exit: PhaseExit) {
        self.phase = self.phase.other();
        self.phase_iterations = 0;
        self.phase_steps = 0;
        self.switches += 1;
        if exit == PhaseExit::Guard {
            self.guard_trips += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseRules {
    pub guard: usize,
    pub score_ema: f64,
    pub exit_check: ExitCheck,
}

/// Supplies scored minibatches and optimizer steps to [`run_phase`].
pub trait PhaseDriver {
    /// Draws the next minibatch and scores it; `None` once the batch budget is spent.
    fn score(&mut self, phase: Phase) -> Result<Option<Scores>>;
    /// Applies one optimizer step for `phase` on the minibatch scored last.
    fn step(&mut self, phase: Phase) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub iterations: usize,
    pub steps: usize,
    /// `None` when the batch budget ran out mid-phase.
    pub exit: Option<PhaseExit>,
    pub last: Option<Scores>,
    pub c1: f64,
    pub c2: f64,
}

/// Runs the current phase of `state` until its exit condition holds, the guard trips, or batches run out.
pub fn run_phase(state: &mut AlternationState, rules: &PhaseRules, driver: &mut dyn PhaseDriver) -> Result<PhaseReport> {
    let phase = state.phase;
    let mut iterations = 0;
    let mut steps = 0;
    let mut last = None;
    loop {
        let Some(s) = driver.score(phase)? else {
            return Ok(PhaseReport {
                phase,
                iterations,
                steps,
                exit: None,
                last,
                c1: state.c1,
                c2: state.c2,
            });
        };
        iterations += 1;
        state.phase_iterations += 1;
        last = Some(s);
        state.observe(s, rules.score_ema);
        let holds = state.exit_holds(phase, s);
        if rules.exit_check == ExitCheck::AfterStep || !holds {
            driver.step(phase)?;
            steps += 1;
            state.phase_steps += 1;
            match phase {
                Phase::Discriminator => state.d_steps += 1,
                Phase::Generator => state.g_steps += 1,
            }
        }
        let exit = if holds {
            Some(PhaseExit::Condition)
        } else if state.phase_iterations >= rules.guard {
            log::warn!(
                "{phase:?} phase stalled: exit condition not met after {} iterations, switching",
                state.phase_iterations
            );
            Some(PhaseExit::Guard)
        } else {
            None
        };
        if let Some(exit) = exit {
            let report = PhaseReport {
                phase,
                iterations,
                steps,
                exit: Some(exit),
                last,
                c1: state.c1,
                c2: state.c2,
            };
            state.switch(exit);
            return Ok(report);
        }
    }
}

/// Minibatch order of one epoch: a permutation depending only on `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub global_step: u64,
    pub mean_ssim: f64,
    pub mean_mse: f64,
    pub ssim_per_step: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct BatchRecord<'a> {
    kind: &'a str,
    global_step: u64,
    epoch: usize,
    phase: Option<Phase>,
    mode: RolloutMode,
    pixel_loss: Option<f64>,
    adv_loss: Option<f64>,
    d_loss: Option<f64>,
    real: Option<f64>,
    fake: Option<f64>,
    /// 1-based steps whose bottom-up pass consumed the model's own prediction.
    fed_back: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub global_step: u64,
    pub switches: u64,
    pub guard_trips: u64,
    pub snapshots: Vec<EvalSnapshot>,
    pub last_checkpoint: Option<PathBuf>,
}

struct Adversary {
    store: ParamStore,
    model: Discriminator,
    frozen: Discriminator,
    opt: Adam,
}

/// What a scored minibatch left behind for the following optimizer step.
enum Pending {
    None,
    Generator(Tensor),
    Discriminator(Tensor),
}

pub struct Trainer {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
    gen_store: ParamStore,
    gen: Mspn,
    gen_frozen: Mspn,
    opt_g: Adam,
    adversary: Option<Adversary>,
    alt: AlternationState,
    epoch: usize,
    global_step: u64,
    batches_per_epoch: usize,
    snapshots: Vec<EvalSnapshot>,
    log: Option<BufWriter<File>>,
    last_fed_back: Vec<bool>,
    last_checkpoint: Option<PathBuf>,
    pending: Pending,
}

const DTYPE: DType = DType::F32;

impl Trainer {
    /// Fresh parameters from `cfg.seed`. Outputs (log, checkpoints) go under `out_dir`.
    pub fn new(cfg: ExperimentConfig, out_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let mut gen_store = ParamStore::new(DTYPE);
        Mspn::new(cfg.network.clone(), &mut ParamInit::new(&mut gen_store, cfg.seed))?;
        let adversary = if cfg.train.adversarial {
            let mut store = ParamStore::new(DTYPE);
            Discriminator::new(
                cfg.discriminator.clone(),
                &mut ParamInit::new(&mut store, cfg.seed.wrapping_add(0x5eed)),
            )?;
            Some(Self::adversary(&cfg, store, Adam::new(cfg.train.lr_discriminator))?)
        } else {
            None
        };
        let opt_g = Adam::new(cfg.train.lr_generator);
        Self::assemble(cfg, out_dir, gen_store, opt_g, adversary, AlternationState::default(), 0, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(path: &Path, out_dir: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let cfg = ck.meta.config.clone();
        if ck.meta.fingerprint != cfg.fingerprint() {
            return Err(Error::Format(format!(
                "{}: config fingerprint {} does not match stored {}",
                path.display(),
                cfg.fingerprint(),
                ck.meta.fingerprint
            )));
        }
        let gen_store = ck.split_params("disc.", true)?;
        let mut opt_g = Adam::new(cfg.train.lr_generator);
        opt_g.import(ck.meta.adam_g_step, &ck.adam_g)?;
        let adversary = if cfg.train.adversarial {
            let mut opt = Adam::new(cfg.train.lr_discriminator);
            opt.import(ck.meta.adam_d_step, &ck.adam_d)?;
            Some(Self::adversary(&cfg, ck.split_params("disc.", false)?, opt)?)
        } else {
            None
        };
        let mut t = Self::assemble(
            cfg,
            out_dir,
            gen_store,
            opt_g,
            adversary,
            ck.meta.alternation.clone(),
            ck.meta.epoch,
            ck.meta.global_step,
        )?;
        t.last_checkpoint = Some(path.to_path_buf());
        Ok(t)
    }

    fn adversary(cfg: &ExperimentConfig, store: ParamStore, opt: Adam) -> Result<Adversary> {
        let model = Discriminator::new(cfg.discriminator.clone(), &mut store.view(false))?;
        let frozen = Discriminator::new(cfg.discriminator.clone(), &mut store.view(true))?;
        Ok(Adversary {
            store,
            model,
            frozen,
            opt,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: ExperimentConfig,
        out_dir: &Path,
        gen_store: ParamStore,
        opt_g: Adam,
        adversary: Option<Adversary>,
        alt: AlternationState,
        epoch: usize,
        global_step: u64,
    ) -> Result<Self> {
        let gen = Mspn::new(cfg.network.clone(), &mut gen_store.view(false))?;
        let gen_frozen = Mspn::new(cfg.network.clone(), &mut gen_store.view(true))?;
        Ok(Self {
            cfg,
            out_dir: out_dir.to_path_buf(),
            gen_store,
            gen,
            gen_frozen,
            opt_g,
            adversary,
            alt,
            epoch,
            global_step,
            batches_per_epoch: 0,
            snapshots: Vec::new(),
            log: None,
            last_fed_back: Vec::new(),
            last_checkpoint: None,
            pending: Pending::None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// The generator, bound to detached parameters (for evaluation and rendering).
    pub fn model(&self) -> &Mspn {
        &self.gen_frozen
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.gen_store
    }

    pub fn discriminator_params(&self) -> Option<&ParamStore> {
        self.adversary.as_ref().map(|a| &a.store)
    }

    pub fn alternation(&self) -> &AlternationState {
        &self.alt
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn snapshots(&self) -> &[EvalSnapshot] {
        &self.snapshots
    }

    /// Feedback flags of the most recent training rollout.
    pub fn last_fed_back(&self) -> &[bool] {
        &self.last_fed_back
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    fn total_batches(&self) -> u64 {
        (self.cfg.train.epochs * self.batches_per_epoch) as u64
    }

    /// Rollout mode for the current global step.
    pub fn current_mode(&self) -> RolloutMode {
        if self.cfg.train.long_term && 2 * self.global_step >= self.total_batches() {
            RolloutMode::PredictedFeedback
        } else {
            RolloutMode::TeacherForced
        }
    }

    fn write_record(&mut self, value: &impl Serialize) -> Result<()> {
        if self.log.is_none() {
            std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
            let p = self.log_path();
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            self.log = Some(BufWriter::new(f));
        }
        let w = self.log.as_mut().expect("log opened");
        let p = self.out_dir.join("train_log.jsonl");
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n").map_err(|e| Error::io(&p, e))
    }

    fn check_data(&self, data: &SequenceDataset) -> Result<()> {
        let (h, w) = data.frame_size();
        if (h, w) != (self.cfg.network.height, self.cfg.network.width) {
            return Err(input_err!(
                "dataset frames are {h}x{w}, network expects {}x{}",
                self.cfg.network.height,
                self.cfg.network.width
            ));
        }
        if data.seq_len() < self.cfg.seq_len() {
            return Err(input_err!(
                "dataset sequences have {} frames, context + horizon needs {}",
                data.seq_len(),
                self.cfg.seq_len()
            ));
        }
        if data.is_empty() {
            return Err(input_err!("dataset is empty"));
        }
        Ok(())
    }

    /// Trains until the configured number of epochs is reached.
    pub fn train(&mut self, train: &SequenceDataset, test: Option<&SequenceDataset>) -> Result<TrainSummary> {
        self.train_epochs(usize::MAX, train, test)
    }

    /// Trains at most `limit` more epochs (never past the configured total).
    pub fn train_epochs(
        &mut self,
        limit: usize,
        train: &SequenceDataset,
        test: Option<&SequenceDataset>,
    ) -> Result<TrainSummary> {
        self.check_data(train)?;
        if let Some(t) = test {
            self.check_data(t)?;
        }
        self.batches_per_epoch = train.len().div_ceil(self.cfg.train.batch_size);
        let end = self.cfg.train.epochs.min(self.epoch.saturating_add(limit));
        while self.epoch < end {
            self.run_epoch(train, test)?;
        }
        if let Some(w) = self.log.as_mut() {
            let p = self.out_dir.join("train_log.jsonl");
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        Ok(TrainSummary {
            epochs: self.epoch,
            global_step: self.global_step,
            switches: self.alt.switches,
            guard_trips: self.alt.guard_trips,
            snapshots: self.snapshots.clone(),
            last_checkpoint: self.last_checkpoint.clone(),
        })
    }

    fn run_epoch(&mut self, train: &SequenceDataset, test: Option<&SequenceDataset>) -> Result<()> {
        let order = epoch_order(self.cfg.seed, self.epoch, train.len());
        let mut stream = EpochStream {
            order,
            next: 0,
            batch_size: self.cfg.train.batch_size,
            batches_left: self.batches_per_epoch,
        };
        if self.adversary.is_some() {
            let rules = PhaseRules {
                guard: self.cfg.train.guard,
                score_ema: self.cfg.train.score_ema,
                exit_check: self.cfg.train.exit_check,
            };
            loop {
                let mut alt = std::mem::take(&mut self.alt);
                let report = {
                    let mut driver = AdversarialDriver {
                        trainer: self,
                        stream: &mut stream,
                        train,
                        test,
                    };
                    run_phase(&mut alt, &rules, &mut driver)
                };
                self.alt = alt;
                let report = report?;
                if report.exit.is_some() {
                    let holds = report.last.map(|s| match report.phase {
                        Phase::Discriminator => s.fake < s.real - report.c1,
                        Phase::Generator => s.fake > s.real - report.c2,
                    });
                    let rec = serde_json::json!({
                        "kind": "switch",
                        "global_step": self.global_step,
                        "epoch": self.epoch,
                        "report": report,
                        "condition_held": holds,
                    });
                    self.write_record(&rec)?;
                } else {
                    break;
                }
            }
        } else {
            while let Some(idx) = stream.next_batch() {
                let batch = train.batch(&idx, DTYPE)?;
                let mode = self.current_mode();
                let (loss, pixel, _) = self.generator_loss(&batch, false)?;
                self.finite_or_abort("pixel loss", pixel)?;
                let grads = loss.backward()?;
                self.opt_g.step(&grads, &self.gen_store, "")?;
                self.global_step += 1;
                let rec = BatchRecord {
                    kind: "batch",
                    global_step: self.global_step,
                    epoch: self.epoch,
                    phase: None,
                    mode,
                    pixel_loss: Some(pixel),
                    adv_loss: None,
                    d_loss: None,
                    real: None,
                    fake: None,
                    fed_back: fed_back_steps(&self.last_fed_back),
                };
                self.write_record(&rec)?;
                self.maybe_snapshot(test, false)?;
            }
        }
        self.epoch += 1;
        self.maybe_snapshot(test, true)?;
        let dir = self.checkpoint_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("epoch-{:04}.safetensors", self.epoch));
        self.checkpoint(&path, None)?;
        std::fs::write(dir.join("latest"), path.file_name().unwrap().to_string_lossy().as_bytes())
            .map_err(|e| Error::io(&dir, e))?;
        self.last_checkpoint = Some(path);
        Ok(())
    }

    /// Generator objective on one batch: `(total, pixel, adversarial)`.
    fn generator_loss(&mut self, batch: &Tensor, adversarial: bool) -> Result<GeneratorLoss> {
        let (ctx, hor) = (self.cfg.data.context, self.cfg.data.horizon);
        let mode = self.current_mode();
        let frames = batch.narrow(1, 0, ctx + hor)?;
        let r = self.gen.rollout(&frames, ctx, hor, mode)?;
        self.last_fed_back = r.fed_back.clone();
        let targets = self.gen.target_pyramids(&frames, ctx + hor)?;
        let weights = self.cfg.loss_weights();
        let pixel = objectives::pixel_loss(&targets, &r.predictions, &weights)?;
        let pixel_v = ops::scalar(&pixel)?;
        if !adversarial {
            return Ok((pixel, pixel_v, None));
        }
        let adv = self.adversary.as_ref().expect("adversarial mode");
        let (real, fake) = real_and_fake(&frames, &r.outputs, ctx, hor)?;
        let p_s = adv.frozen.mean_score(&fake)?;
        let r_s = ops::scalar(&adv.frozen.mean_score(&real)?)?;
        let g_adv = objectives::generator_adv_loss_t(&p_s)?;
        let g_adv_v = ops::scalar(&g_adv)?;
        let total = objectives::total_generator_loss_t(&pixel, &g_adv, &weights)?;
        let scores = Scores {
            real: r_s,
            fake: ops::scalar(&p_s)?,
        };
        Ok((total, pixel_v, Some((g_adv_v, scores))))
    }

    fn discriminator_loss(&mut self, batch: &Tensor) -> Result<(Tensor, Scores)> {
        let (ctx, hor) = (self.cfg.data.context, self.cfg.data.horizon);
        let mode = self.current_mode();
        let frames = batch.narrow(1, 0, ctx + hor)?;
        let r = self.gen_frozen.rollout(&frames, ctx, hor, mode)?;
        self.last_fed_back = r.fed_back.clone();
        let (real, fake) = real_and_fake(&frames, &r.outputs, ctx, hor)?;
        let adv = self.adversary.as_ref().expect("adversarial mode");
        let r_s = adv.model.mean_score(&real)?;
        let p_s = adv.model.mean_score(&fake.detach())?;
        let scores = Scores {
            real: ops::scalar(&r_s)?,
            fake: ops::scalar(&p_s)?,
        };
        Ok((objectives::discriminator_loss_t(&r_s, &p_s)?, scores))
    }

    fn finite_or_abort(&mut self, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            return Ok(());
        }
        let msg = format!("{what} became {v} at global step {}", self.global_step);
        let dir = self.checkpoint_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("diagnostic.safetensors");
        self.checkpoint(&path, Some(msg.clone()))?;
        log::error!("{msg}; diagnostic checkpoint at {}", path.display());
        Err(Error::Numeric(msg))
    }

    fn maybe_snapshot(&mut self, test: Option<&SequenceDataset>, epoch_end: bool) -> Result<()> {
        let Some(test) = test else { return Ok(()) };
        let every = self.cfg.train.eval_every as u64;
        let due = if epoch_end {
            every == 0
        } else {
            every > 0 && self.global_step % every == 0
        };
        if !due {
            return Ok(());
        }
        let report = self.evaluate(test)?;
        let snap = EvalSnapshot {
            epoch: self.epoch,
            global_step: self.global_step,
            mean_ssim: report.mean_ssim(),
            mean_mse: report.mean_mse(),
            ssim_per_step: report.ssim_per_step(),
        };
        log::info!(
            "eval at step {}: ssim {:.4} mse {:.5}",
            snap.global_step,
            snap.mean_ssim,
            snap.mean_mse
        );
        let mut rec = serde_json::to_value(&snap)?;
        rec["kind"] = "eval".into();
        self.write_record(&rec)?;
        self.snapshots.push(snap);
        Ok(())
    }

    /// Predicted-feedback evaluation of the current parameters on (a prefix of) `test`.
    pub fn evaluate(&self, test: &SequenceDataset) -> Result<MetricReport> {
        let cap = self.cfg.train.eval_sequences;
        let subset;
        let data = if cap > 0 && cap < test.len() {
            subset = test.select(&(0..cap).collect::<Vec<_>>())?;
            &subset
        } else {
            test
        };
        metrics::evaluate(
            &self.gen_frozen,
            data,
            Protocol {
                context: self.cfg.data.context,
                horizon: self.cfg.data.horizon,
                batch_size: self.cfg.train.batch_size.max(8),
            },
            &[],
            &format!("{}@{}", self.cfg.fingerprint(), self.global_step),
        )
    }

    /// Writes a resumable checkpoint.
    pub fn checkpoint(&self, path: &Path, diagnostic: Option<String>) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.cfg.clone(),
            fingerprint: self.cfg.fingerprint(),
            epoch: self.epoch,
            global_step: self.global_step,
            alternation: self.alt.clone(),
            adam_g_step: self.opt_g.steps(),
            adam_d_step: self.adversary.as_ref().map_or(0, |a| a.opt.steps()),
            diagnostic,
        };
        let mut stores = vec![&self.gen_store];
        if let Some(a) = &self.adversary {
            stores.push(&a.store);
        }
        Checkpoint::write(path, &meta, &stores, &self.opt_g, self.adversary.as_ref().map(|a| &a.opt))
    }
}

/// The checkpoint named by `dir/latest`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let name = std::fs::read_to_string(dir.join("latest")).ok()?;
    let path = dir.join(name.trim());
    path.is_file().then_some(path)
}

/// Loads only the generator of a checkpoint, for evaluation and rendering.
pub fn load_generator(path: &Path) -> Result<(ExperimentConfig, Mspn, u64)> {
    let ck = Checkpoint::read(path)?;
    let store = ck.split_params("disc.", true)?;
    let model = Mspn::new(ck.meta.config.network.clone(), &mut store.view(true))?;
    // the view shares storage with `store`, which can be dropped
    Ok((ck.meta.config, model, ck.meta.global_step))
}

fn fed_back_steps(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i + 1).collect()
}

/// Ground-truth and predicted frames past the context, flattened to `(B*m, 3, H, W)`.
fn real_and_fake(frames: &Tensor, outputs: &[Tensor], ctx: usize, hor: usize) -> Result<(Tensor, Tensor)> {
    let (b, _, c, h, w) = frames.dims5()?;
    let real = frames.narrow(1, ctx, hor)?.reshape((b * hor, c, h, w))?;
    let fake = Tensor::stack(outputs, 1)?.reshape((b * hor, c, h, w))?;
    Ok((real, fake))
}

struct EpochStream {
    order: Vec<usize>,
    next: usize,
    batch_size: usize,
    batches_left: usize,
}

impl EpochStream {
    fn next_batch(&mut self) -> Option<Vec<usize>> {
        if self.batches_left == 0 {
            return None;
        }
        self.batches_left -= 1;
        let n = self.order.len();
        let end = (self.next + self.batch_size).min(n);
        let idx = self.order[self.next..end].to_vec();
        self.next = if end == n { 0 } else { end };
        Some(idx)
    }
}

/// Total loss, pixel term, and the adversarial term with its scores.
type GeneratorLoss = (Tensor, f64, Option<(f64, Scores)>);

struct AdversarialDriver<'a, 'd> {
    trainer: &'a mut Trainer,
    stream: &'a mut EpochStream,
    train: &'d SequenceDataset,
    test: Option<&'d SequenceDataset>,
}

impl PhaseDriver for AdversarialDriver<'_, '_> {
    fn score(&mut self, phase: Phase) -> Result<Option<Scores>> {
        let Some(idx) = self.stream.next_batch() else {
            return Ok(None);
        };
        let t = &mut *self.trainer;
        let batch = self.train.batch(&idx, DTYPE)?;
        let mut rec = BatchRecord {
            kind: "batch",
            global_step: t.global_step + 1,
            epoch: t.epoch,
            phase: Some(phase),
            mode: t.current_mode(),
            pixel_loss: None,
            adv_loss: None,
            d_loss: None,
            real: None,
            fake: None,
            fed_back: Vec::new(),
        };
        let scores = match phase {
            Phase::Discriminator => {
                let (loss, s) = t.discriminator_loss(&batch)?;
                let v = ops::scalar(&loss)?;
                rec.d_loss = Some(v);
                t.finite_or_abort("discriminator loss", v)?;
                t.pending = Pending::Discriminator(loss);
                s
            }
            Phase::Generator => {
                let (loss, pixel, adv) = t.generator_loss(&batch, true)?;
                let (g_adv, s) = adv.expect("adversarial terms");
                rec.pixel_loss = Some(pixel);
                rec.adv_loss = Some(g_adv);
                t.finite_or_abort("generator loss", ops::scalar(&loss)?)?;
                t.pending = Pending::Generator(loss);
                s
            }
        };
        t.finite_or_abort("real score", scores.real)?;
        t.finite_or_abort("fake score", scores.fake)?;
        t.global_step += 1;
        rec.real = Some(scores.real);
        rec.fake = Some(scores.fake);
        rec.fed_back = fed_back_steps(&t.last_fed_back);
        t.write_record(&rec)?;
        t.maybe_snapshot(self.test, false)?;
        Ok(Some(scores))
    }

    fn step(&mut self, phase: Phase) -> Result<()> {
        let t = &mut *self.trainer;
        match (phase, std::mem::replace(&mut t.pending, Pending::None)) {
            (Phase::Generator, Pending::Generator(loss)) => {
                let grads = loss.backward()?;
                t.opt_g.step(&grads, &t.gen_store, "")
            }
            (Phase::Discriminator, Pending::Discriminator(loss)) => {
                let grads = loss.backward()?;
                let adv = t.adversary.as_mut().expect("adversarial mode");
                adv.opt.step(&grads, &adv.store, "disc.")
            }
            _ => Err(crate::error::contract_err!("{phase:?} step without a scored batch")),
        }
    }
}
