//! Pre-training loop, optimizer, and the linear probe.

pub mod eval;
pub mod optim;
pub mod probe;

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskStrategy;
use crate::model::{AdaMae, ArchConfig, ForwardOptions, Stage};
use crate::synth::{foreground_probability_mass, make_corpus, SpriteConfig, SyntheticVideo};
use crate::tensor::{Grads, Graph, ParamSet, Partition, Precision, TensorError};
pub use eval::{adaptivity_ratio, evaluate_masking, MaskEval};
pub use optim::{adamw_step, lr_schedule, AdamWConfig, AdamWState, Moments, Schedule};
pub use probe::{linear_probe, ProbeConfig, ProbeData, ProbeReport};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ADAMAE_THREADS";

/// Consecutive skipped steps after which training aborts.
pub const MAX_BAD_STEPS: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimHyper {
    pub base_lr: f64,
    pub adamw: AdamWConfig,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub batch_size: usize,
    /// Weight of the sampling loss in `L_R + λ·L_S`.
    pub lambda: f64,
    pub rho: f64,
    pub strategy: MaskStrategy,
    pub seed: u64,
    /// Steps to run; `None` runs the whole schedule.
    pub steps: Option<usize>,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            base_lr: 0.032,
            adamw: AdamWConfig::default(),
            warmup_epochs: 4.0,
            total_epochs: 40.0,
            batch_size: 8,
            lambda: 1e-4,
            rho: 0.9,
            strategy: MaskStrategy::Adaptive,
            seed: 0,
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus_size: usize,
    /// Seed of the training corpus; independent of the run seed.
    pub seed: u64,
    pub sprite: SpriteConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_size: 400,
            seed: 1000,
            sprite: SpriteConfig::default(),
        }
    }
}

/// Full run description; this is what config files hold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub optim: OptimHyper,
    pub data: DataConfig,
    pub precision: Precision,
    /// Keep the autoencoder fixed and train only the sampler.
    pub freeze_mae: bool,
    /// Fill the `ms_per_step` metric. Off by default so metrics files are
    /// reproducible byte for byte.
    pub time_steps: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optim.adamw.validate()?;
        let o = &self.optim;
        if !(o.rho > 0.0 && o.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", o.rho)));
        }
        if o.batch_size == 0 || !(o.base_lr >= 0.0) || !(o.lambda >= 0.0) {
            return Err(Error::Config("batch_size, base_lr and lambda must be positive".into()));
        }
        if !(o.warmup_epochs >= 0.0 && o.total_epochs > o.warmup_epochs) {
            return Err(Error::Config("need 0 <= warmup_epochs < total_epochs".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.data.corpus_size / self.optim.batch_size).max(1)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.optim.base_lr,
            batch_size: self.optim.batch_size,
            warmup_epochs: self.optim.warmup_epochs,
            total_epochs: self.optim.total_epochs,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.optim
            .steps
            .unwrap_or_else(|| (self.optim.total_epochs * self.steps_per_epoch() as f64).round() as usize)
    }

    /// Partitions the optimizer must leave untouched.
    pub fn frozen(&self) -> Vec<Partition> {
        let mut frozen = Vec::new();
        if self.optim.lambda == 0.0 || self.optim.strategy != MaskStrategy::Adaptive {
            frozen.push(Partition::Sampler);
        }
        if self.freeze_mae {
            frozen.push(Partition::Mae);
        }
        frozen
    }
}

/// One row per executed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss_r: f64,
    pub loss_s: f64,
    pub lr: f64,
    pub fg_mass: f64,
    pub ms_per_step: f64,
}

/// Serializable snapshot of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub optimizer: AdamWState,
    pub rng: RngState,
    pub step: u64,
    pub bad_steps: u32,
}

struct ElementOut {
    grads: Grads,
    loss_r: f64,
    loss_s: f64,
    fg_mass: f64,
    trace: Vec<Stage>,
}

/// The generator every seeded component uses.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

pub struct Trainer {
    config: TrainConfig,
    model: AdaMae,
    params: ParamSet,
    optimizer: AdamWState,
    rng: ChaCha8Rng,
    step: usize,
    bad_steps: u32,
    corpus: Vec<SyntheticVideo>,
    metrics: Vec<MetricRow>,
    last_trace: Vec<Stage>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Fresh run on the corpus described by `config.data`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let geom = config.arch.geometry()?;
        let corpus = make_corpus(config.data.corpus_size, &config.data.sprite, &geom, config.data.seed)?;
        Self::with_corpus(config, corpus)
    }

    /// Fresh run on caller-supplied clips.
    pub fn with_corpus(config: TrainConfig, corpus: Vec<SyntheticVideo>) -> Result<Self> {
        config.validate()?;
        let model = AdaMae::new(config.arch.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.optim.seed);
        let params = model.init_params(&mut rng)?;
        Self::assemble(config, model, params, AdamWState::default(), rng, 0, 0, corpus)
    }

    /// Continues a saved run; the corpus is rebuilt from the stored config.
    pub fn resume(state: ModelState) -> Result<Self> {
        let geom = state.config.arch.geometry()?;
        let c = &state.config.data;
        let corpus = make_corpus(c.corpus_size, &c.sprite, &geom, c.seed)?;
        Self::resume_with_corpus(state, corpus)
    }

    pub fn resume_with_corpus(state: ModelState, corpus: Vec<SyntheticVideo>) -> Result<Self> {
        state.config.validate()?;
        let model = AdaMae::new(state.config.arch.clone())?;
        check_param_shapes(&model, &state.params)?;
        let rng = state.rng.restore();
        Self::assemble(
            state.config,
            model,
            state.params,
            state.optimizer,
            rng,
            state.step as usize,
            state.bad_steps,
            corpus,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        model: AdaMae,
        params: ParamSet,
        optimizer: AdamWState,
        rng: ChaCha8Rng,
        step: usize,
        bad_steps: u32,
        corpus: Vec<SyntheticVideo>,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("empty training corpus".into()));
        }
        if let Some(c) = corpus.iter().find(|c| c.video.shape() != config.arch.video) {
            return Err(Error::Geometry(format!(
                "corpus clip shape {:?} does not match the model's {:?}",
                c.video.shape(),
                config.arch.video
            )));
        }
        Ok(Self {
            config,
            model,
            params,
            optimizer,
            rng,
            step,
            bad_steps,
            corpus,
            metrics: Vec::new(),
            last_trace: Vec::new(),
            pool: thread_pool()?,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &AdaMae {
        &self.model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn corpus(&self) -> &[SyntheticVideo] {
        &self.corpus
    }

    /// Stage sequence of the most recent step: each batch element's
    /// forward and backward in index order, then the optimizer update.
    pub fn last_trace(&self) -> &[Stage] {
        &self.last_trace
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step as u64,
            bad_steps: self.bad_steps,
        }
    }

    fn run_element(&self, video: &SyntheticVideo, seed: u64, opts: &ForwardOptions) -> Result<ElementOut> {
        let mut g = Graph::with_precision(self.config.precision);
        let b = self.params.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trace = Vec::with_capacity(Stage::ADAPTIVE_ORDER.len());
        let out = self.model.forward(&mut g, &b, &video.video, opts, &mut rng, &mut trace)?;
        let grads = b.collect(&g.backward(out.loss)?, &self.params);
        trace.push(Stage::Backward);
        let fg_mass = match &out.probs {
            Some(p) => foreground_probability_mass(p, &video.activity)?,
            None => video.activity.fraction(),
        };
        Ok(ElementOut {
            grads,
            loss_r: g.value(out.recon.loss).item(),
            loss_s: g.value(out.sampling_loss).item(),
            fg_mass,
            trace,
        })
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<MetricRow> {
        let start = self.config.time_steps.then(Instant::now);
        let o = &self.config.optim;
        let lr = lr_schedule(self.step, self.config.steps_per_epoch(), &self.config.schedule());
        let opts = ForwardOptions {
            strategy: o.strategy,
            rho: o.rho,
            lambda: o.lambda,
        };
        let batch = o.batch_size;
        let picks: Vec<usize> = if batch <= self.corpus.len() {
            index::sample(&mut self.rng, self.corpus.len(), batch).into_vec()
        } else {
            (0..batch).map(|_| self.rng.random_range(0..self.corpus.len())).collect()
        };
        let seeds: Vec<u64> = (0..batch).map(|_| self.rng.next_u64()).collect();

        let this = &*self;
        let outs: Vec<Result<ElementOut>> = self.pool.install(|| {
            picks
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &seed)| this.run_element(&this.corpus[i], seed, &opts))
                .collect()
        });

        let mut trace = Vec::new();
        let mut elements = Vec::with_capacity(batch);
        let mut bad = None;
        for out in outs {
            match out {
                Ok(e) => elements.push(e),
                Err(Error::Tensor(TensorError::NonFinite { op })) => bad = Some(format!("non-finite value in {op}")),
                Err(e) => return Err(e),
            }
        }

        let scale = 1.0 / batch as f64;
        let mut row = MetricRow {
            step: self.step,
            loss_r: f64::NAN,
            loss_s: f64::NAN,
            lr,
            fg_mass: f64::NAN,
            ms_per_step: 0.0,
        };
        if bad.is_none() {
            let mut grads = self.params.zero_grads();
            for e in &elements {
                for (name, g) in &e.grads {
                    let acc = grads.get_mut(name).expect("same parameter set");
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v * scale;
                    }
                }
                trace.extend_from_slice(&e.trace);
            }
            row.loss_r = elements.iter().map(|e| e.loss_r).sum::<f64>() * scale;
            row.loss_s = elements.iter().map(|e| e.loss_s).sum::<f64>() * scale;
            row.fg_mass = elements.iter().map(|e| e.fg_mass).sum::<f64>() * scale;
            let frozen = self.config.frozen();
            match adamw_step(&mut self.params, &grads, &mut self.optimizer, &self.config.optim.adamw, lr, &frozen) {
                Ok(()) => trace.push(Stage::OptimizerStep),
                Err(Error::Training(msg)) => bad = Some(msg),
                Err(e) => return Err(e),
            }
        }

        self.step += 1;
        if let Some(start) = start {
            row.ms_per_step = start.elapsed().as_secs_f64() * 1e3;
        }
        self.metrics.push(row);
        self.last_trace = trace;
        match bad {
            None => self.bad_steps = 0,
            Some(reason) => {
                self.bad_steps += 1;
                if self.bad_steps >= MAX_BAD_STEPS {
                    return Err(Error::Training(format!(
                        "aborting after {} consecutive skipped steps at step {} (lr {lr:e}, last loss_r {}, loss_s {}): {reason}",
                        self.bad_steps, row.step, row.loss_r, row.loss_s
                    )));
                }
            }
        }
        Ok(row)
    }

    /// Runs `steps` more steps, calling `on_row` after each.
    pub fn run(&mut self, steps: usize, mut on_row: impl FnMut(&MetricRow)) -> Result<()> {
        for _ in 0..steps {
            let row = self.train_step()?;
            on_row(&row);
        }
        Ok(())
    }

    /// Runs until the configured step count is reached.
    pub fn run_to_end(&mut self, on_row: impl FnMut(&MetricRow)) -> Result<()> {
        let remaining = self.config.total_steps().saturating_sub(self.step);
        self.run(remaining, on_row)
    }
}

/// Full pre-training run.
pub fn pretrain(config: TrainConfig) -> Result<(ModelState, Vec<MetricRow>)> {
    let mut t = Trainer::new(config)?;
    t.run_to_end(|_| {})?;
    Ok((t.state(), t.metrics().to_vec()))
}

/// Fails unless `params` has exactly the names and shapes `model` creates.
pub fn check_param_shapes(model: &AdaMae, params: &ParamSet) -> Result<()> {
    let reference = model.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
    let mismatch = reference.len() != params.len()
        || reference.iter().any(|(name, p)| match params.get(name) {
            Ok(q) => q.value.shape() != p.value.shape() || q.partition != p.partition || q.decay != p.decay,
            Err(_) => true,
        });
    if mismatch {
        return Err(Error::Config("parameters do not match the architecture config".into()));
    }
    Ok(())
}
