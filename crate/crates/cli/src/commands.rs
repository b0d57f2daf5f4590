use std::path::{Path, PathBuf};

use erg_core::analysis::{
    certainty_profile, decomposition_trace, export_certainty, export_decomposition, export_variance, variance_study,
    CertaintyProfile, DecompositionTrace, VarianceReport, VarianceStudyConfig,
};
use erg_core::data::{generate, read_index, DatasetSpec, IndexEntry, PromptTokens};
use erg_core::guidance::{GuidanceSpec, Method};
use erg_core::hopfield::RectificationConfig;
use erg_core::metrics::{
    append_metrics_csv, default_orientations, evaluate, pareto_front, rank_score, write_metrics_csv, ManifoldReference,
    MetricsReport, Orientation, SweepRun,
};
use erg_core::model::{Model, VelocityModel};
use erg_core::rng::{stream, Domain};
use erg_core::sampler::{euler_sample_ids, exported_view, read_pgm, write_pgm, SamplerConfig};
use erg_core::train::{fm_interpolate, load_model, train_with, TrainOutput};
use erg_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{config_err, worker_cap, CliResult, RunConfig};

/// Trains the configured model; writes `config.json`, `model.json`,
/// checkpoints and `loss.csv` into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> CliResult<TrainOutput> {
    let dir = &cfg.out_dir;
    cfg.save(dir)?;
    let data = generate(&cfg.dataset)?;
    let mut model = Model::<f32>::init(cfg.denoiser.clone(), cfg.encoder.clone(), cfg.seed)?;
    let every = (cfg.train.steps / 20).max(1);
    let out = train_with(&mut model, &cfg.train, &data, dir, |step, loss| {
        if step % every == 0 || step + 1 == cfg.train.steps {
            eprintln!("step {step:>6}  loss {loss:.4}");
        }
    })?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.6}\n"));
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    Ok(out)
}

/// Loads a checkpoint together with the `model.json` next to it.
pub fn load_checkpoint_model(ckpt: &Path) -> CliResult<Model<f32>> {
    let dir = ckpt.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !dir.join("model.json").exists() {
        return Err(config_err(format!("{}: no model.json next to the checkpoint", ckpt.display())));
    }
    Ok(load_model(dir, ckpt)?)
}

/// Which samples to draw: `n` per listed mode, mode-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub modes: Vec<usize>,
    pub n_per_mode: usize,
}

impl SamplePlan {
    pub fn all_modes(spec: &DatasetSpec, n_per_mode: usize) -> Self {
        SamplePlan {
            modes: spec.modes.iter().map(|m| m.id).collect(),
            n_per_mode,
        }
    }

    pub fn prompts(&self, spec: &DatasetSpec) -> CliResult<(Vec<PromptTokens>, Vec<usize>, Vec<u64>)> {
        if self.n_per_mode == 0 || self.modes.is_empty() {
            return Err(config_err("nothing to sample: n and modes must be nonempty"));
        }
        let mut prompts = Vec::new();
        let mut modes = Vec::new();
        for &m in &self.modes {
            let p = spec.prompt(m).map_err(|_| config_err(format!("unknown mode {m}")))?;
            for _ in 0..self.n_per_mode {
                prompts.push(p.clone());
                modes.push(m);
            }
        }
        let ids = (0..prompts.len() as u64).collect();
        Ok((prompts, modes, ids))
    }
}

/// Generated images with their conditioning modes.
pub struct SampleSet {
    /// `[n, 1, S, S]`
    pub images: Tensor<f32>,
    pub modes: Vec<usize>,
    pub prompts: Vec<PromptTokens>,
}

pub fn draw_samples(
    model: &Model<f32>,
    weak: Option<&Model<f32>>,
    guidance: &GuidanceSpec,
    sampler: &SamplerConfig,
    spec: &DatasetSpec,
    plan: &SamplePlan,
) -> CliResult<SampleSet> {
    let (prompts, modes, ids) = plan.prompts(spec)?;
    let out = euler_sample_ids(model, weak, guidance, &prompts, &ids, sampler)?;
    Ok(SampleSet {
        images: out.samples,
        modes,
        prompts,
    })
}

/// Writes `sample_NNNNN.pgm` files plus `index.json`.
pub fn write_sample_dir(dir: &Path, set: &SampleSet) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let n = set.modes.len();
    let per = set.images.len() / n.max(1);
    let side = (per as f64).sqrt() as usize;
    let mut index = Vec::with_capacity(n);
    for i in 0..n {
        let file = format!("sample_{i:05}.pgm");
        let img = Tensor::new(vec![1, side, side], set.images.data()[i * per..(i + 1) * per].to_vec())?;
        write_pgm(&dir.join(&file), &img)?;
        index.push(IndexEntry {
            file,
            mode: set.modes[i],
            tokens: set.prompts[i].0.clone(),
        });
    }
    std::fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifest {
    pub checkpoint: PathBuf,
    pub weak_checkpoint: Option<PathBuf>,
    pub guidance: GuidanceSpec,
    pub sampler: SamplerConfig,
    pub plan: SamplePlan,
}

pub struct SampleRequest {
    pub ckpt: PathBuf,
    pub weak_ckpt: Option<PathBuf>,
    pub plan: SamplePlan,
}

/// Samples into `cfg.out_dir` and writes images, `index.json`,
/// `manifest.json` and `config.json`.
pub fn sample(cfg: &RunConfig, req: &SampleRequest) -> CliResult<SampleSet> {
    let model = load_checkpoint_model(&req.ckpt)?;
    let weak_path = req.weak_ckpt.clone().or_else(|| cfg.guidance.weak_ckpt_path.as_ref().map(PathBuf::from));
    if cfg.guidance.method == Method::Autoguidance && weak_path.is_none() {
        return Err(config_err("autoguidance requires --weak-ckpt"));
    }
    let weak = match (&weak_path, cfg.guidance.method) {
        (Some(p), Method::Autoguidance) => Some(load_checkpoint_model(p)?),
        _ => None,
    };
    cfg.guidance.validate(model.depth(), model.encoder_depth()).map_err(|e| config_err(e.to_string()))?;
    let set = draw_samples(&model, weak.as_ref(), &cfg.guidance, &cfg.sampler, &cfg.dataset, &req.plan)?;
    let dir = &cfg.out_dir;
    write_sample_dir(dir, &set)?;
    let manifest = SampleManifest {
        checkpoint: req.ckpt.clone(),
        weak_checkpoint: weak_path,
        guidance: cfg.guidance.clone(),
        sampler: cfg.sampler.clone(),
        plan: req.plan.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    cfg.save(dir)?;
    Ok(set)
}

/// Evenly strided subset of the dataset as a flattened `[n, S²]` reference.
pub fn reference_set(spec: &DatasetSpec, n: Option<usize>) -> CliResult<Tensor<f32>> {
    let data = generate(spec)?;
    let n = n.unwrap_or(data.len()).min(data.len());
    if n < 2 {
        return Err(config_err("reference set needs at least 2 samples"));
    }
    let per = spec.image_side * spec.image_side;
    let mut flat = Vec::with_capacity(n * per);
    for i in 0..n {
        flat.extend_from_slice(data[i * data.len() / n].image.data());
    }
    Ok(Tensor::new(vec![n, per], flat)?)
}

/// Reads a sample directory (`index.json` + PGMs) as `[n, S²]` plus modes.
pub fn read_sample_dir(dir: &Path) -> CliResult<(Tensor<f32>, Vec<usize>)> {
    let index = read_index(dir).map_err(|e| config_err(format!("{}: {e}", dir.display())))?;
    if index.is_empty() {
        return Err(config_err(format!("{}: empty sample dir", dir.display())));
    }
    let mut flat = Vec::new();
    let mut per = 0;
    for e in &index {
        let img: Tensor<f32> = read_pgm(&dir.join(&e.file))?;
        per = img.len();
        flat.extend_from_slice(img.data());
    }
    let modes = index.iter().map(|e| e.mode).collect();
    Ok((Tensor::new(vec![index.len(), per], flat)?, modes))
}

pub struct EvalRequest {
    pub samples: PathBuf,
    pub out_csv: PathBuf,
    pub run_id: Option<String>,
    pub reference_n: Option<usize>,
}

/// Metrics of a sample directory against a fresh reference set; appends one
/// CSV row.
pub fn eval(cfg: &RunConfig, req: &EvalRequest) -> CliResult<SweepRun> {
    let (fake, modes) = read_sample_dir(&req.samples)?;
    let real = reference_set(&cfg.dataset, req.reference_n)?;
    if real.cols() != fake.cols() {
        return Err(config_err("sample size does not match the dataset image size"));
    }
    let reference = ManifoldReference::new(&real, cfg.metrics.k)?;
    let report = evaluate(&reference, &real, &fake, &modes, &cfg.dataset)?;
    let params = std::fs::read(req.samples.join("manifest.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
        .and_then(|m| m.get("guidance").cloned())
        .unwrap_or_else(|| Value::Object(Map::new()));
    let run_id = req.run_id.clone().unwrap_or_else(|| {
        req.samples
            .file_name()
            .map_or_else(|| "samples".into(), |s| s.to_string_lossy().into_owned())
    });
    let run = SweepRun {
        run_id,
        params,
        report,
        orientations: default_orientations(),
    };
    if let Some(parent) = req.out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    append_metrics_csv(&req.out_csv, std::slice::from_ref(&run))?;
    Ok(run)
}

/// Cartesian grid over dotted field paths of the guidance spec
/// (`"w"`, `"erg.kappa"`, `"cads.tau1"`, ...) or the sampler (`"sampler.seed"`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<Value>)>,
}

impl Grid {
    pub fn parse(text: &str) -> CliResult<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| config_err(format!("grid: {e}")))?;
        let obj = v.as_object().ok_or_else(|| config_err("grid must be a JSON object"))?;
        if obj.is_empty() {
            return Err(config_err("grid is empty"));
        }
        let mut axes = Vec::new();
        for (k, vals) in obj {
            let vals = match vals {
                Value::Array(a) if !a.is_empty() => a.clone(),
                Value::Array(_) => return Err(config_err(format!("grid field `{k}` has no values"))),
                scalar => vec![scalar.clone()],
            };
            axes.push((k.clone(), vals));
        }
        Ok(Grid { axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.1.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter record of run `i` (last axis varies fastest).
    pub fn point(&self, mut i: usize) -> Map<String, Value> {
        let mut picks = vec![0; self.axes.len()];
        for (a, (_, vals)) in self.axes.iter().enumerate().rev() {
            picks[a] = i % vals.len();
            i /= vals.len();
        }
        self.axes
            .iter()
            .zip(picks)
            .map(|((k, vals), p)| (k.clone(), vals[p].clone()))
            .collect()
    }

    pub fn points(&self) -> Vec<Map<String, Value>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| format!("grid field `{path}` unknown"))?;
        if !obj.contains_key(*part) && !(i + 1 == parts.len() && part == &"weak_ckpt_path") {
            return Err(format!("grid field `{path}` unknown"));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Err(format!("grid field `{path}` unknown"))
}

/// Applies one grid point to a base guidance spec and sampler config.
pub fn apply_point(
    guidance: &GuidanceSpec,
    sampler: &SamplerConfig,
    point: &Map<String, Value>,
) -> CliResult<(GuidanceSpec, SamplerConfig)> {
    let mut g = serde_json::to_value(guidance)?;
    let mut s = serde_json::to_value(sampler)?;
    for (k, v) in point {
        let r = match k.strip_prefix("sampler.") {
            Some(rest) => set_path(&mut s, rest, v.clone()),
            None => set_path(&mut g, k, v.clone()),
        };
        r.map_err(config_err)?;
    }
    let g = serde_json::from_value(g).map_err(|e| config_err(format!("grid: {e}")))?;
    let s = serde_json::from_value(s).map_err(|e| config_err(format!("grid: {e}")))?;
    Ok((g, s))
}

/// Metrics compared by the sweep's Pareto front.
pub const PARETO_METRICS: [&str; 3] = ["density", "coverage", "consistency"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub rank_scores: Vec<f64>,
    /// Indices into `runs`.
    pub pareto: Vec<usize>,
}

pub struct SweepRequest {
    pub grid: Grid,
    pub ckpt: PathBuf,
    pub weak_ckpt: Option<PathBuf>,
    pub plan: SamplePlan,
    pub jobs: usize,
    pub reference_n: Option<usize>,
    pub save_images: bool,
}

/// Runs every grid point with an already loaded model and writes
/// `metrics.csv`, `ranking.csv` and `pareto.json` into `out`.
pub fn sweep_with_model(
    cfg: &RunConfig,
    model: &Model<f32>,
    weak: Option<&Model<f32>>,
    req: &SweepRequest,
    out: &Path,
) -> CliResult<SweepOutcome> {
    let points = req.grid.points();
    let mut specs = Vec::with_capacity(points.len());
    for p in &points {
        let (g, mut s) = apply_point(&cfg.guidance, &cfg.sampler, p)?;
        g.validate(model.depth(), model.encoder_depth()).map_err(|e| config_err(e.to_string()))?;
        if g.method == Method::Autoguidance && weak.is_none() {
            return Err(config_err("autoguidance in the grid requires --weak-ckpt"));
        }
        s.threads = 1;
        specs.push((g, s));
    }
    std::fs::create_dir_all(out)?;
    let real = reference_set(&cfg.dataset, req.reference_n)?;
    let reference = ManifoldReference::new(&real, cfg.metrics.k)?;

    let run_one = |i: usize| -> CliResult<SweepRun> {
        let (g, s) = &specs[i];
        let set = draw_samples(model, weak, g, s, &cfg.dataset, &req.plan)?;
        let run_id = format!("run{i:03}");
        if req.save_images {
            write_sample_dir(&out.join("runs").join(&run_id), &set)?;
        }
        let n = set.modes.len();
        let fake = exported_view(&set.images).reshape(&[n, set.images.len() / n])?;
        let report = evaluate(&reference, &real, &fake, &set.modes, &cfg.dataset)?;
        eprintln!(
            "{run_id} {}: density {:.4} coverage {:.4} consistency {:.4}",
            Value::Object(points[i].clone()),
            report.density,
            report.coverage,
            report.consistency
        );
        Ok(SweepRun {
            run_id,
            params: Value::Object(points[i].clone()),
            report,
            orientations: default_orientations(),
        })
    };

    let n_runs = points.len();
    let jobs = worker_cap(req.jobs).min(n_runs);
    let results: Vec<CliResult<SweepRun>> = if jobs <= 1 {
        (0..n_runs).map(run_one).collect()
    } else {
        let mut slots: Vec<Option<CliResult<SweepRun>>> = (0..n_runs).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let run_one = &run_one;
                    scope.spawn(move || {
                        (w..n_runs).step_by(jobs).map(|i| (i, run_one(i))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("sweep worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every run finished")).collect()
    };
    let runs = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let outcome = summarize_sweep(runs)?;
    write_sweep_outputs(out, &outcome)?;
    Ok(outcome)
}

pub fn summarize_sweep(runs: Vec<SweepRun>) -> CliResult<SweepOutcome> {
    let rank_scores = rank_score(&runs)?;
    let pts: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| PARETO_METRICS.iter().map(|m| r.report.get(m).expect("known metric")).collect())
        .collect();
    let pareto = pareto_front(&pts, &[Orientation::HigherIsBetter; 3]);
    Ok(SweepOutcome {
        runs,
        rank_scores,
        pareto,
    })
}

pub fn write_sweep_outputs(out: &Path, o: &SweepOutcome) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    write_metrics_csv(std::fs::File::create(out.join("metrics.csv"))?, &o.runs)?;
    let mut rank = String::from("run_id,rank_score,params_json\n");
    for (r, s) in o.runs.iter().zip(&o.rank_scores) {
        let p = serde_json::to_string(&r.params)?.replace('"', "\"\"");
        rank.push_str(&format!("{},{s:.6},\"{p}\"\n", r.run_id));
    }
    std::fs::write(out.join("ranking.csv"), rank)?;
    let front: Vec<Value> = o
        .pareto
        .iter()
        .map(|&i| {
            let r = &o.runs[i];
            serde_json::json!({
                "index": i,
                "run_id": r.run_id,
                "params": r.params,
                "density": r.report.density,
                "coverage": r.report.coverage,
                "consistency": r.report.consistency,
            })
        })
        .collect();
    let doc = serde_json::json!({ "metrics": PARETO_METRICS, "front": front });
    std::fs::write(out.join("pareto.json"), serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig, req: &SweepRequest) -> CliResult<SweepOutcome> {
    let model = load_checkpoint_model(&req.ckpt)?;
    let weak = req.weak_ckpt.as_deref().map(load_checkpoint_model).transpose()?;
    cfg.save(&cfg.out_dir)?;
    sweep_with_model(cfg, &model, weak.as_ref(), req, &cfg.out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    Variance,
    Decomposition,
    Certainty,
}

pub struct AnalyzeRequest {
    pub ckpt: PathBuf,
    pub study: Study,
    pub seeds: usize,
    pub threshold: f64,
    pub t: f64,
    pub n_per_mode: usize,
}

pub enum AnalysisOutput {
    Variance(VarianceReport),
    Decomposition(DecompositionTrace),
    Certainty(CertaintyProfile),
}

pub fn analyze(cfg: &RunConfig, req: &AnalyzeRequest) -> CliResult<AnalysisOutput> {
    let model = load_checkpoint_model(&req.ckpt)?;
    let dir = &cfg.out_dir;
    cfg.save(dir)?;
    let spec = &cfg.dataset;
    let plan = SamplePlan::all_modes(spec, req.n_per_mode);
    match req.study {
        Study::Variance => {
            let prompts: Vec<PromptTokens> = spec.modes.iter().map(|m| spec.prompt(m.id)).collect::<Result<_, _>>()?;
            let vc = VarianceStudyConfig {
                n_seeds: req.seeds,
                seed: cfg.seed,
                tau_c: cfg.guidance.erg.tau_c,
                enc_lo: cfg.guidance.erg.enc_lo,
                enc_hi: cfg.guidance.erg.enc_hi,
            };
            let r = variance_study(&model, &prompts, &vc).map_err(|e| match e {
                erg_core::Error::InvalidArgument { .. } => config_err(e.to_string()),
                other => other.into(),
            })?;
            export_variance(dir, &r)?;
            Ok(AnalysisOutput::Variance(r))
        }
        Study::Decomposition => {
            if cfg.guidance.method == Method::None {
                return Err(config_err("decomposition needs a guidance method with a negative branch"));
            }
            let mut s = cfg.sampler.clone();
            s.record_trajectory = true;
            let (prompts, _, ids) = plan.prompts(spec)?;
            s.chunk = prompts.len();
            let out = euler_sample_ids(&model, None, &cfg.guidance, &prompts, &ids, &s)?;
            let traj = out.trajectories.first().ok_or_else(|| config_err("no trajectory recorded"))?;
            let trace = decomposition_trace(traj)?;
            export_decomposition(dir, &trace)?;
            Ok(AnalysisOutput::Decomposition(trace))
        }
        Study::Certainty => {
            let (x, cond) = certainty_inputs(&model, spec, &plan, req.t, cfg.seed)?;
            let p = certainty_profile(&model, &x, req.t as f32, &cond, &RectificationConfig::off(), req.threshold)
                .map_err(|e| match e {
                    erg_core::Error::InvalidArgument { .. } => config_err(e.to_string()),
                    other => other.into(),
                })?;
            export_certainty(dir, &p)?;
            Ok(AnalysisOutput::Certainty(p))
        }
    }
}

/// Points on the probability path at time `t` between dataset prototypes of
/// each planned mode and seeded noise, with their clean conditions.
pub fn certainty_inputs(
    model: &Model<f32>,
    spec: &DatasetSpec,
    plan: &SamplePlan,
    t: f64,
    seed: u64,
) -> CliResult<(Tensor<f32>, Vec<erg_core::model::ConditionEmbedding<f32>>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(config_err("--t must lie in [0, 1]"));
    }
    let (prompts, modes, ids) = plan.prompts(spec)?;
    let table = erg_core::data::mode_center_table(spec)?;
    let side = spec.image_side;
    let mut data = Vec::with_capacity(ids.len() * side * side);
    for (&m, &id) in modes.iter().zip(&ids) {
        let x1 = Tensor::new(vec![1, side, side], table[&m].clone())?;
        let mut rng = stream(seed, Domain::Analysis, id);
        let x0 = Tensor::<f32>::randn(&[1, side, side], &mut rng);
        data.extend_from_slice(fm_interpolate(&x1, &x0, t as f32)?.0.data());
    }
    let x = Tensor::new(vec![ids.len(), 1, side, side], data)?;
    let cond = model.encode(&prompts, 1.0, 0, 0)?;
    Ok((x, cond))
}

/// Summary line for a metrics report.
pub fn describe(report: &MetricsReport) -> String {
    format!(
        "frechet {:.4}  precision {:.4}  recall {:.4}  density {:.4}  coverage {:.4}  consistency {:.4}",
        report.frechet, report.precision, report.recall, report.density, report.coverage, report.consistency
    )
}
