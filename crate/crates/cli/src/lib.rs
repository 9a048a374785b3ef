//! `adamae` command line. [`run_cli`] parses and runs one subcommand and
//! returns the process exit code: 0 on success, 1 on any failure, 2 on a
//! usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use adamae::io::{self, pgm, MetricsWriter};
use adamae::mask::MaskStrategy;
use adamae::model::check::model_grad_check;
use adamae::model::{AdaMae, ArchConfig, ForwardOptions};
use adamae::synth::make_corpus;
use adamae::tensor::{Graph, Precision};
use adamae::tokenizer::{denormalize, detokenize, extract_cubes};
use adamae::train::{
    evaluate_masking, linear_probe, ProbeConfig, ProbeData, TrainConfig, Trainer, THREADS_ENV,
};
use adamae::{Error, Result};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "adamae", version, about = "Adaptive-masking video autoencoder at toy scale")]
#[command(after_help = format!("Worker threads are capped by the {THREADS_ENV} environment variable."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labelled synthetic corpus (AVID clips, .mask grids, corpus.labels).
    GenData(GenData),
    /// Pre-train a model; writes a checkpoint and a metrics CSV.
    Pretrain(Pretrain),
    /// Linear probe on frozen encoder features, random init vs checkpoint.
    Probe(Probe),
    /// Reconstruction loss and foreground mass per masking strategy.
    CompareMasks(CompareMasks),
    /// Probability-map, mask and reconstruction images for one clip.
    Visualize(Visualize),
    /// Finite-difference check of every gradient of the model.
    Gradcheck(Gradcheck),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

/// Options shared by commands that build a run configuration.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON run configuration; missing fields take the toy defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (parameter init, batch order, masks).
    #[arg(long)]
    seed: Option<u64>,
    /// Masking ratio in (0, 1).
    #[arg(long)]
    rho: Option<f64>,
    /// Masking strategy: adaptive, patch, tube or frame.
    #[arg(long)]
    strategy: Option<MaskStrategy>,
    /// Stop after this many optimizer steps (the schedule is unchanged).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => io::load_config(p)?,
            None => TrainConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.optim.seed = s;
        }
        if let Some(r) = self.rho {
            cfg.optim.rho = r;
        }
        if let Some(s) = self.strategy {
            cfg.optim.strategy = s;
        }
        if self.steps.is_some() {
            cfg.optim.steps = self.steps;
        }
        if let Some(p) = self.precision {
            cfg.precision = p.into();
        }
    }
}

#[derive(Args, Debug)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    count: usize,
    /// Corpus seed; defaults to the configured data seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Pretrain {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint path; the metrics CSV goes next to it with a `.csv` extension.
    #[arg(long, default_value = "out.ckpt")]
    out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train on a corpus written by `gen-data` instead of regenerating it.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Probe {
    #[arg(long)]
    ckpt: PathBuf,
    /// Seed of the held-out probe clips.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the report as CSV here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareMasks {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', default_value = "adaptive,patch,tube,frame")]
    strategies: Vec<MaskStrategy>,
    /// Evaluate this checkpoint under every strategy. Without it, a fresh
    /// model is pre-trained per strategy first.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Held-out clips per strategy.
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// CSV output path; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Visualize {
    #[arg(long)]
    ckpt: PathBuf,
    /// AVID clip to render.
    #[arg(long)]
    video: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "viz")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Masking ratio; defaults to the checkpoint's.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    strategy: Option<MaskStrategy>,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// `toy` is the 8-token, d=16 model; any model preset name also works.
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Weight of the sampling loss in the combined check.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::CompareMasks(a) => compare_masks(a),
        Command::Visualize(a) => visualize(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn gen_data(a: GenData) -> Result<i32> {
    let cfg = match &a.config {
        Some(p) => io::load_config(p)?,
        None => TrainConfig::default(),
    };
    let geom = cfg.arch.geometry()?;
    let clips = make_corpus(a.count, &cfg.data.sprite, &geom, a.seed.unwrap_or(cfg.data.seed))?;
    io::write_corpus(&a.out, &clips)?;
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(0)
}

fn metrics_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("csv")
}

fn pretrain(a: Pretrain) -> Result<i32> {
    let corpus = |cfg: &TrainConfig| -> Result<Option<Vec<_>>> {
        a.data.as_ref().map(|d| io::read_corpus(d, &cfg.arch.geometry()?)).transpose()
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.run.config.is_some() {
                return Err(Error::Config("--resume takes its configuration from the checkpoint".into()));
            }
            let mut state = io::load_checkpoint(path)?;
            a.run.apply(&mut state.config);
            match corpus(&state.config)? {
                Some(c) => Trainer::resume_with_corpus(state, c)?,
                None => Trainer::resume(state)?,
            }
        }
        None => {
            let cfg = a.run.config()?;
            match corpus(&cfg)? {
                Some(c) => Trainer::with_corpus(cfg, c)?,
                None => Trainer::new(cfg)?,
            }
        }
    };
    let mut writer = MetricsWriter::create(&metrics_path(&a.out))?;
    let mut write_err = None;
    let total = trainer.config().total_steps();
    let result = trainer.run_to_end(|row| {
        if let Err(e) = writer.push(row) {
            write_err.get_or_insert(e);
        }
        if (row.step + 1) % 100 == 0 || row.step + 1 == total {
            eprintln!(
                "step {:>5}/{total}  L_R {:.5}  L_S {:.4}  lr {:.3e}  fg_mass {:.3}",
                row.step + 1,
                row.loss_r,
                row.loss_s,
                row.lr,
                row.fg_mass
            );
        }
    });
    writer.finish()?;
    if let Some(e) = write_err {
        return Err(e);
    }
    // keep whatever was reached so a failed run can be inspected
    io::save_checkpoint(&trainer.state(), &a.out)?;
    result?;
    println!(
        "checkpoint {} at step {}, metrics {}",
        a.out.display(),
        trainer.step(),
        metrics_path(&a.out).display()
    );
    Ok(0)
}

fn probe(a: Probe) -> Result<i32> {
    let state = io::load_checkpoint(&a.ckpt)?;
    let cfg = &state.config;
    let model = AdaMae::new(cfg.arch.clone())?;
    let data = ProbeData {
        seed: a.seed.unwrap_or(ProbeData::default().seed),
        ..ProbeData::default()
    };
    let (train, test) = data.generate(&cfg.data.sprite, model.geometry())?;
    let init = Trainer::with_corpus(cfg.clone(), train.clone())?;
    let probe_cfg = ProbeConfig::default();
    let before = linear_probe(&model, init.params(), &train, &test, &probe_cfg)?;
    let after = linear_probe(&model, &state.params, &train, &test, &probe_cfg)?;
    let csv = format!(
        "model,train_accuracy,test_accuracy\ninit,{},{}\ncheckpoint,{},{}\n",
        before.train_accuracy, before.test_accuracy, after.train_accuracy, after.test_accuracy
    );
    print!("{csv}");
    if let Some(out) = &a.out {
        std::fs::write(out, csv)?;
    }
    Ok(0)
}

fn compare_masks(a: CompareMasks) -> Result<i32> {
    let (base, trained) = match &a.ckpt {
        Some(p) => {
            let mut state = io::load_checkpoint(p)?;
            a.run.apply(&mut state.config);
            state.config.validate()?;
            (state.config, Some(state.params))
        }
        None => (a.run.config()?, None),
    };
    let model = AdaMae::new(base.arch.clone())?;
    let held_out_seed = base.data.seed.wrapping_add(1);
    let clips = make_corpus(a.count.max(4), &base.data.sprite, model.geometry(), held_out_seed)?;
    let clips = &clips[..a.count.max(1).min(clips.len())];
    let mut csv = String::from("strategy,L_R,fg_mass,fg_ratio,visible_fg\n");
    for &strategy in &a.strategies {
        let params = match &trained {
            Some(p) => p.clone(),
            None => {
                let mut cfg = base.clone();
                cfg.optim.strategy = strategy;
                let mut t = Trainer::new(cfg)?;
                t.run_to_end(|_| {})?;
                eprintln!("trained {} for {} steps", strategy.name(), t.step());
                t.params().clone()
            }
        };
        let e = evaluate_masking(&model, &params, clips, strategy, base.optim.rho, base.optim.seed)?;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            strategy.name(),
            e.loss_r,
            e.fg_mass,
            e.fg_ratio,
            e.visible_fg
        ));
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        std::fs::write(out, csv)?;
    }
    Ok(0)
}

fn visualize(a: Visualize) -> Result<i32> {
    let state = io::load_checkpoint(&a.ckpt)?;
    let cfg = &state.config;
    let model = AdaMae::new(cfg.arch.clone())?;
    let geom = *model.geometry();
    let video = io::read_avid(&a.video)?;
    let opts = ForwardOptions {
        strategy: a.strategy.unwrap_or(cfg.optim.strategy),
        rho: a.rho.unwrap_or(cfg.optim.rho),
        lambda: 0.0,
    };
    let mut rng = adamae::train::seeded_rng(a.seed);
    let mut g = Graph::new();
    let b = state.params.bind(&mut g);
    let out = model.forward(&mut g, &b, &video, &opts, &mut rng, &mut Vec::new())?;

    // visible cubes keep their pixels, masked cubes show the prediction
    let mut pixels = denormalize(g.value(out.predictions), &out.targets.stats);
    let original = extract_cubes(&video, &geom)?;
    for &i in &out.mask.visible {
        pixels.row_mut(i).copy_from_slice(original.row(i));
    }
    let recon = detokenize(&pixels, &geom, None)?;

    std::fs::create_dir_all(&a.out)?;
    let p = model.probability_map(&state.params, &video)?;
    pgm::export_probability_map(&p, &a.out.join("probability.pgm"))?;
    pgm::export_mask(&out.mask.mask, &geom, &a.out.join("mask.pgm"))?;
    let lo = video.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = video.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    pgm::write_pgm(&a.out.join("input.pgm"), &pgm::video_strip(&video, lo, hi))?;
    pgm::write_pgm(&a.out.join("reconstruction.pgm"), &pgm::video_strip(&recon, lo, hi))?;
    println!(
        "L_R {} with {} of {} tokens visible; images in {}",
        g.value(out.recon.loss).item(),
        out.mask.n_visible,
        geom.num_tokens(),
        a.out.display()
    );
    Ok(0)
}

fn gradcheck(a: Gradcheck) -> Result<i32> {
    let arch = match a.preset.as_str() {
        "toy" => ArchConfig::gradcheck_toy(),
        other => ArchConfig::preset(other)?,
    };
    let r = model_grad_check(&arch, a.seed, a.rho, a.lambda)?;
    for (what, rep) in [
        ("L_R wrt autoencoder", &r.recon),
        ("L_S wrt sampler", &r.sampling),
        ("L wrt all", &r.combined),
    ] {
        println!(
            "{what:<20} max rel err {:.3e} over {} coords (worst {}[{}])",
            rep.max_rel_err, rep.coords_checked, rep.worst_param, rep.worst_index
        );
    }
    let max = r.max_rel_err();
    println!("max rel err {max:.3e}");
    Ok(if max < GRADCHECK_TOLERANCE { 0 } else { 1 })
}
