//! Command-line front end: `train`, `sample`, `eval`, `sweep` and `analyze`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use erg_core::guidance::{GuidanceSpec, Method};

use commands::{AnalysisOutput, AnalyzeRequest, EvalRequest, Grid, SamplePlan, SampleRequest, Study, SweepRequest};
use config::{config_err, CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "erg", version, about = "Train, sample, evaluate and analyze guided flow models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model with conditional flow matching.
    Train(TrainArgs),
    /// Draw guided samples from a checkpoint.
    Sample(SampleArgs),
    /// Score a sample directory against the dataset.
    Eval(EvalArgs),
    /// Sample and score every point of a parameter grid.
    Sweep(SweepArgs),
    /// Diagnostics on a trained model.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg.normalized())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GuidanceArgs {
    /// none, cfg, erg, apg, erg_apg, cads, erg_cads, pag, seg or autoguidance.
    #[arg(long)]
    pub guidance: Option<Method>,
    /// Guidance scale.
    #[arg(long)]
    pub w: Option<f64>,
    /// Image-side attention temperature (ERG).
    #[arg(long)]
    pub tau_i: Option<f64>,
    /// Condition-encoder attention temperature (ERG).
    #[arg(long)]
    pub tau_c: Option<f64>,
    /// Flow time after which image-side rectification starts (ERG).
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub weak_ckpt: Option<PathBuf>,
}

impl GuidanceArgs {
    /// Applies the flags on top of `base`. A new `--guidance` resets the
    /// spec to that method's defaults.
    pub fn apply(&self, base: &GuidanceSpec, depth: usize, enc_depth: usize) -> CliResult<GuidanceSpec> {
        let mut g = match self.guidance {
            Some(m) if m != base.method => GuidanceSpec::defaults(m, base.w, depth, enc_depth),
            _ => base.clone(),
        };
        if let Some(w) = self.w {
            g.w = w;
        }
        let erg_flags = self.tau_i.is_some() || self.tau_c.is_some() || self.kappa.is_some();
        if erg_flags && !g.method.uses_erg() {
            return Err(config_err(format!("--tau-i/--tau-c/--kappa do not apply to method {}", g.method)));
        }
        if let Some(t) = self.tau_i {
            g.erg.rect.tau = t;
        }
        if let Some(t) = self.tau_c {
            g.erg.tau_c = t;
        }
        if let Some(k) = self.kappa {
            g.erg.kappa = k;
        }
        if let Some(p) = &self.weak_ckpt {
            g.weak_ckpt_path = Some(p.to_string_lossy().into_owned());
        }
        if g.method == Method::Autoguidance && g.weak_ckpt_path.is_none() {
            return Err(config_err("autoguidance requires --weak-ckpt"));
        }
        g.validate(depth, enc_depth).map_err(|e| config_err(e.to_string()))?;
        Ok(g)
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    /// Euler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Samples per mode.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Comma-separated mode ids; all modes when omitted.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<usize>>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `sample`.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Size of the reference subset; the full dataset when omitted.
    #[arg(long)]
    pub reference_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON object mapping field paths to value lists.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub weak_ckpt: Option<PathBuf>,
    /// Samples per mode per run.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Runs evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub reference_n: Option<usize>,
    /// Keep each run's images under `runs/`.
    #[arg(long)]
    pub save_images: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub study: Study,
    /// Noise draws per prompt (variance study).
    #[arg(long, default_value_t = 64)]
    pub seeds: usize,
    /// Certainty threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Flow time for the certainty study.
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    /// Samples per mode (decomposition and certainty).
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long)]
    pub steps: Option<usize>,
}

fn plan(cfg: &RunConfig, n: usize, modes: Option<Vec<usize>>) -> SamplePlan {
    match modes {
        Some(modes) => SamplePlan { modes, n_per_mode: n },
        None => SamplePlan::all_modes(&cfg.dataset, n),
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = a.common.load()?;
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            if let Some(b) = a.batch {
                cfg.train.batch = b;
            }
            cfg.train.validate().map_err(|e| config_err(e.to_string()))?;
            let out = commands::train(&cfg)?;
            println!("{}", out.final_checkpoint.display());
        }
        Command::Sample(a) => {
            let mut cfg = a.common.load()?;
            cfg.guidance = a.guidance.apply(&cfg.guidance, cfg.denoiser.depth, cfg.encoder.depth)?;
            if let Some(s) = a.steps {
                cfg.sampler.steps = s;
            }
            cfg.sampler.threads = config::worker_cap(a.jobs);
            let req = SampleRequest {
                ckpt: a.ckpt,
                weak_ckpt: a.guidance.weak_ckpt.clone(),
                plan: plan(&cfg, a.n, a.modes),
            };
            let set = commands::sample(&cfg, &req)?;
            println!("{} samples -> {}", set.modes.len(), cfg.out_dir.display());
        }
        Command::Eval(a) => {
            let cfg = a.common.load()?;
            let out_csv = a.common.out.clone().unwrap_or_else(|| a.samples.clone()).join("metrics.csv");
            let req = EvalRequest {
                samples: a.samples,
                out_csv,
                run_id: a.run_id,
                reference_n: a.reference_n,
            };
            let run = commands::eval(&cfg, &req)?;
            println!("{}: {}", run.run_id, commands::describe(&run.report));
        }
        Command::Sweep(a) => {
            let cfg = a.common.load()?;
            let text = std::fs::read_to_string(&a.grid).map_err(|e| config_err(format!("{}: {e}", a.grid.display())))?;
            let req = SweepRequest {
                grid: Grid::parse(&text)?,
                ckpt: a.ckpt,
                weak_ckpt: a.weak_ckpt,
                plan: SamplePlan::all_modes(&cfg.dataset, a.n),
                jobs: a.jobs,
                reference_n: a.reference_n,
                save_images: a.save_images,
            };
            let out = commands::sweep(&cfg, &req)?;
            for (r, s) in out.runs.iter().zip(&out.rank_scores) {
                println!("{} rank {s:.3}  {}", r.run_id, commands::describe(&r.report));
            }
            let front: Vec<&str> = out.pareto.iter().map(|&i| out.runs[i].run_id.as_str()).collect();
            println!("pareto: {}", front.join(" "));
        }
        Command::Analyze(a) => {
            let mut cfg = a.common.load()?;
            cfg.guidance = a.guidance.apply(&cfg.guidance, cfg.denoiser.depth, cfg.encoder.depth)?;
            if let Some(s) = a.steps {
                cfg.sampler.steps = s;
            }
            let req = AnalyzeRequest {
                ckpt: a.ckpt,
                study: a.study,
                seeds: a.seeds,
                threshold: a.threshold,
                t: a.t,
                n_per_mode: a.n,
            };
            match commands::analyze(&cfg, &req)? {
                AnalysisOutput::Variance(r) => println!("variance: {} locations, {} draws", r.locations, r.draws),
                AnalysisOutput::Decomposition(d) => {
                    println!("decomposition: {} steps, flagged {:?}", d.times.len(), d.flagged)
                }
                AnalysisOutput::Certainty(p) => println!("certainty: {:?}", p.per_block),
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

