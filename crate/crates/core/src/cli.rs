//! Command-line front end. Exit codes: 0 success, 1 environment or I/O
//! failure, 2 usage or configuration error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Ablation, RunConfig};
use crate::data::{generate_dataset, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    grid_pgm, gls_report, interpolate, probe_report, report_csv, report_table, sample_prior,
    EstimatorSet,
};
use crate::selfcheck::{self, SelfcheckOptions};
use crate::tensor::Tensor;
use crate::train::{
    load_checkpoint, save_checkpoint, Checkpoint, MetricRow, Trainer, METRIC_HEADER,
};

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const RESOLVED_CONFIG: &str = "resolved.conf";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.cyck";
pub const WEIGHTS: &str = "weights.cycw";

#[derive(Debug, Parser)]
#[command(name = "cycinv", version, about = "Invariant representations from cyclically trained conditional autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural shapes dataset.
    GenData(GenData),
    /// Train encoder, decoder and discriminator into a run directory.
    Train(TrainArgs),
    /// Score a trained run with latent probes and generator label scores.
    Eval(EvalArgs),
    /// Write an interpolation grid or prior samples as a PGM image.
    Synth(SynthArgs),
    /// Run gradient checks and loss oracles.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    #[value(name = "fw")]
    Fw,
    #[value(name = "fw+z")]
    FwZ,
    #[value(name = "fw+x")]
    FwX,
    #[value(name = "full")]
    Full,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Fw => Ablation::ForwardOnly,
            AblationArg::FwZ => Ablation::ForwardZ,
            AblationArg::FwX => Ablation::ForwardX,
            AblationArg::Full => Ablation::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Continue from the checkpoint already in the run directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Which {
    Probes,
    Gls,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub which: Which,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["interpolate", "prior"]))]
pub struct SynthArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Record indices and class codes of the two endpoints.
    #[arg(long, num_args = 4, value_names = ["X0", "X1", "Y0", "Y1"])]
    pub interpolate: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Dataset the interpolation indices refer to.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub prior: bool,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Random points per gradient check.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, hide = true)]
    pub inject_sign_error: bool,
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_usage() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Synth(a) => synth(&a),
        Command::Selfcheck(a) => Ok(run_selfcheck(&a)),
    }
}

fn gen_data(a: &GenData) -> Result<i32> {
    let data = generate_dataset(a.n, a.classes, a.side, a.seed)?;
    data.save(&a.out)?;
    let mut per_class = vec![0usize; a.classes];
    for s in &data.samples {
        per_class[s.shape_class] += 1;
    }
    println!(
        "wrote {}: {} records, side {}, {} classes {:?}, seed {}",
        a.out.display(),
        data.len(),
        data.side,
        data.n_s,
        per_class,
        data.seed
    );
    Ok(0)
}

/// Reads the resolved configuration of a run directory.
pub fn read_run_config(run: &Path) -> Result<RunConfig> {
    RunConfig::parse(&fs::read_to_string(run.join(RESOLVED_CONFIG))?)
}

/// The training split used by `train`, and the held-out split used by `eval`.
pub fn split_for(data: &Dataset, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    data.split(cfg.eval.train_fraction, cfg.eval.split_seed)
}

fn train(a: &TrainArgs) -> Result<i32> {
    let text = fs::read_to_string(&a.config)?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(ab) = a.ablation {
        cfg.train.apply_ablation(ab.into());
    }
    let data = load_dataset(&a.data)?;
    let (train_set, _) = split_for(&data, &cfg)?;
    fs::create_dir_all(&a.out)?;

    let ckpt_path = a.out.join(CHECKPOINT);
    let metrics_path = a.out.join(METRICS);
    let (mut trainer, mut log) = if a.resume && ckpt_path.exists() {
        let state = load_checkpoint(&ckpt_path)?;
        if state.config != cfg.train {
            return Err(Error::invalid(
                "the checkpoint was trained with a different configuration",
            ));
        }
        let log = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        (Trainer::resume(state), BufWriter::new(log))
    } else {
        fs::write(a.out.join(CONFIG_SNAPSHOT), &text)?;
        fs::write(a.out.join(RESOLVED_CONFIG), cfg.to_text())?;
        let mut log = BufWriter::new(File::create(&metrics_path)?);
        writeln!(log, "{METRIC_HEADER}")?;
        (Trainer::new(cfg.train.clone())?, log)
    };

    let mut io_err = None;
    let quiet = a.quiet;
    let mut on_row = |r: &MetricRow| {
        if !quiet {
            println!("{}", r.csv_line());
        }
        // flushed every epoch so an interrupted run keeps its log
        if let Err(e) = writeln!(log, "{}", r.csv_line()).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    };
    let rows = train_epochs(&mut trainer, &train_set, &ckpt_path, &mut on_row)?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_checkpoint(&ckpt_path, &trainer.state)?;
    fs::write(a.out.join(WEIGHTS), trainer.state.models.to_weights_bytes()?)?;
    if !quiet {
        eprintln!(
            "trained {} epochs ({} rows logged) into {}",
            trainer.state.epoch,
            rows,
            a.out.display()
        );
    }
    Ok(0)
}

/// Runs the remaining epochs, checkpointing after each one.
fn train_epochs(
    t: &mut Trainer,
    data: &Dataset,
    ckpt: &Path,
    on_row: &mut dyn FnMut(&MetricRow),
) -> Result<usize> {
    let mut rows = 0;
    if t.state.epoch == 0 {
        on_row(&t.evaluate(data)?);
        rows += 1;
    }
    while t.state.epoch < t.state.config.epochs as u64 {
        let r = t.run_epoch(data)?;
        on_row(&r);
        save_checkpoint(ckpt, &t.state)?;
        rows += 1;
    }
    Ok(rows)
}

fn load_run(run: &Path) -> Result<(RunConfig, Checkpoint)> {
    let ckpt = load_checkpoint(&run.join(CHECKPOINT))?;
    let cfg = read_run_config(run)?;
    Ok((cfg, ckpt))
}

fn eval(a: &EvalArgs) -> Result<i32> {
    let (cfg, ckpt) = load_run(&a.run)?;
    let data = load_dataset(&a.data)?;
    if data.n_s != ckpt.models.dims.n_s || data.side != ckpt.models.dims.side {
        return Err(Error::invalid("dataset does not match the trained model"));
    }
    let (train_set, test_set) = split_for(&data, &cfg)?;
    if matches!(a.which, Which::Probes | Which::Both) {
        let r = probe_report(&ckpt.models, &train_set, &test_set, &cfg.eval)?;
        fs::write(a.run.join("probes.csv"), report_csv(&r.rows))?;
        let table = report_table(&r.rows);
        fs::write(a.run.join("probes.txt"), &table)?;
        println!("latent probes\n{table}");
    }
    if matches!(a.which, Which::Gls | Which::Both) {
        let est = EstimatorSet::train(&train_set, &cfg.eval)?;
        let r = gls_report(&est, &ckpt.models, &test_set, &cfg.eval)?;
        fs::write(a.run.join("gls.csv"), report_csv(&r.rows))?;
        let table = report_table(&r.rows);
        fs::write(a.run.join("gls.txt"), &table)?;
        println!("generator label scores\n{table}");
    }
    Ok(0)
}

fn synth(a: &SynthArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&a.run.join(CHECKPOINT))?;
    let models = &ckpt.models;
    let side = models.dims.side;
    let n_s = models.dims.n_s;
    let pgm = if let Some(v) = &a.interpolate {
        let (x0, x1, y0, y1) = (v[0], v[1], v[2], v[3]);
        let path = a
            .data
            .as_ref()
            .ok_or_else(|| Error::invalid("--interpolate needs --data"))?;
        let data = load_dataset(path)?;
        for i in [x0, x1] {
            if i >= data.len() {
                return Err(Error::Index(format!("record {i} of {}", data.len())));
            }
        }
        for y in [y0, y1] {
            if y >= n_s {
                return Err(Error::Index(format!("class {y} with {n_s} classes")));
            }
        }
        let grid = interpolate(
            models,
            &data.samples[x0].image,
            &data.samples[x1].image,
            y0,
            y1,
            a.steps,
            a.steps,
        )?;
        grid_pgm(&grid, side, a.steps, a.steps)?
    } else {
        let y = a
            .class
            .ok_or_else(|| Error::invalid("--prior needs --class"))?;
        if y >= n_s {
            return Err(Error::Index(format!("class {y} with {n_s} classes")));
        }
        let imgs = sample_prior(models, y, a.n, a.seed)?;
        let cols = (a.n as f64).sqrt().ceil() as usize;
        let rows = a.n.div_ceil(cols);
        let mut data = imgs.into_data();
        data.resize(rows * cols * side * side, 1.0);
        grid_pgm(&Tensor::build(&[rows * cols, side * side], data)?, side, rows, cols)?
    };
    pgm.save(&a.out)?;
    println!("wrote {} ({}x{})", a.out.display(), pgm.width, pgm.height);
    Ok(0)
}

fn run_selfcheck(a: &SelfcheckArgs) -> i32 {
    let opts = SelfcheckOptions {
        points: a.points.max(1),
        inject_sign_error: a.inject_sign_error,
        ..SelfcheckOptions::default()
    };
    let results = selfcheck::run(&opts);
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{}", r.line());
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed == 0 {
        0
    } else {
        1
    }
}
