//! Experiment configuration and the end-to-end pipelines behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::Controls;
use crate::env::{collect_dataset, preset, preset_variants, Dynamics, Preset, Sampling, SystemSpec};
use crate::error::{Error, Result};
use crate::gp::{load_dataset_csv, write_dataset_csv, Dataset, FitOptions, GpModel};
use crate::moments::{mm_rollout, write_rollout_csv, GaussianBelief, MmOptions};
use crate::tube::{bound_trajectory, geometric_grid, write_schedule_csv, BoundSchedule, Predictor, TubeConfig, TubeOutcome};
use crate::validation::{
    per_step_coverage, sample_gp_trajectories, sample_system_trajectories, trajectory_containment, violation_ratio,
    ValidationSummary,
};

/// Candidate radius grid given by its range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Geometric { lo: f64, hi: f64, count: usize },
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Simulate the system; unset fields come from the preset.
    Collect {
        #[serde(default)]
        sampling: Option<Sampling>,
        #[serde(default)]
        size: Option<usize>,
    },
    File { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Collect {
            sampling: None,
            size: None,
        }
    }
}

/// Settings of one experiment, read from JSON. Everything except the preset
/// (or a complete custom system) is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub system: Option<SystemSpec>,
    pub controls: Option<Controls>,
    pub init_mean: Option<Vec<f64>>,
    pub init_variance: Option<Vec<f64>>,
    pub dataset: DatasetSource,
    pub epsilon: Option<f64>,
    pub horizon: Option<usize>,
    pub grid: Option<GridSpec>,
    pub initial_radius: Option<f64>,
    pub seed: u64,
    pub dudley_n: Option<f64>,
    /// Time step override for linear-quadratic systems.
    pub dt: Option<f64>,
    pub predictor: Predictor,
    pub trajectories: usize,
    pub include_noise: bool,
    pub restarts: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            system: None,
            controls: None,
            init_mean: None,
            init_variance: None,
            dataset: DatasetSource::default(),
            epsilon: None,
            horizon: None,
            grid: None,
            initial_radius: None,
            seed: 0,
            dudley_n: None,
            dt: None,
            predictor: Predictor::PosteriorMean,
            trajectories: 1000,
            include_noise: false,
            restarts: FitOptions::default().restarts,
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn for_preset(name: &str) -> Self {
        Self {
            preset: Some(name.to_string()),
            ..Self::default()
        }
    }

    /// Merges the preset with the explicit overrides.
    pub fn resolve(&self) -> Result<Preset> {
        let mut p = match (&self.preset, &self.system) {
            (Some(name), _) => preset(name)?,
            (None, Some(system)) => Preset {
                name: "custom".into(),
                system: system.clone(),
                controls: self.controls.clone().unwrap_or(Controls::None),
                init_mean: self
                    .init_mean
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("custom system needs init_mean".into()))?,
                init_variance: self
                    .init_variance
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("custom system needs init_variance".into()))?,
                epsilon: 0.1,
                horizon: 5,
                sampling: match &self.dataset {
                    DatasetSource::Collect { sampling: Some(s), .. } => s.clone(),
                    DatasetSource::Collect { sampling: None, .. } => {
                        return Err(Error::InvalidArgument("custom system needs a sampling scheme".into()))
                    }
                    DatasetSource::File { .. } => Sampling::UniformStates {
                        states: crate::bounds::IntervalBox::point(&vec![0.0; system.state_dim()])?,
                        controls: None,
                    },
                },
                data_size: 300,
                initial_radius: None,
            },
            (None, None) => return Err(Error::InvalidArgument("config needs a preset or a system".into())),
        };
        if let Some(s) = &self.system {
            p.system = s.clone();
        }
        if let Some(c) = &self.controls {
            p.controls = c.clone();
        }
        if let Some(m) = &self.init_mean {
            p.init_mean = m.clone();
        }
        if let Some(v) = &self.init_variance {
            p.init_variance = v.clone();
        }
        if let Some(e) = self.epsilon {
            p.epsilon = e;
        }
        if let Some(h) = self.horizon {
            p.horizon = h;
        }
        if let Some(k) = self.initial_radius {
            p.initial_radius = Some(k);
        }
        if let Some(new_dt) = self.dt {
            match &mut p.system.dynamics {
                Dynamics::LinearQuadratic { dt, .. } => *dt = new_dt,
                _ => return Err(Error::InvalidArgument("dt applies to linear-quadratic systems only".into())),
            }
        }
        if let DatasetSource::Collect { sampling, size } = &self.dataset {
            if let Some(s) = sampling {
                p.sampling = s.clone();
            }
            if let Some(n) = size {
                p.data_size = *n;
            }
        }
        if !(p.epsilon > 0.0 && p.epsilon <= 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside (0, 1]", p.epsilon)));
        }
        p.system.validate()?;
        Ok(p)
    }

    pub fn tube_config(&self, p: &Preset) -> Result<TubeConfig> {
        let mut cfg = p.tube_config();
        cfg.dudley_n = self.dudley_n;
        cfg.predictor = self.predictor;
        match &self.grid {
            None => {}
            Some(GridSpec::Geometric { lo, hi, count }) => cfg.grid = geometric_grid(*lo, *hi, *count)?,
            Some(GridSpec::Explicit(g)) => cfg.grid = g.clone(),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seeds for data collection, fitting and validation, derived from `seed`.
    fn seeds(&self) -> (u64, u64, u64) {
        (self.seed, self.seed.wrapping_add(1), self.seed.wrapping_add(2))
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            restarts: self.restarts,
            seed: self.seeds().1,
            ..FitOptions::default()
        }
    }
}

/// Lines identifying a run, written as CSV comments.
fn report_header(p: &Preset, cfg: &ExperimentConfig) -> Vec<String> {
    let mut parts = vec![format!("preset={}", p.name), format!("seed={}", cfg.seed)];
    if let Some(dt) = p.dt() {
        parts.push(format!("dt={dt}"));
    }
    parts.push(format!(
        "process_noise={}",
        p.system
            .process_noise
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(";")
    ));
    vec![parts.join(" ")]
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn dataset_for(p: &Preset, cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::File { path } => load_dataset_csv(path),
        DatasetSource::Collect { .. } => collect_dataset(&p.system, &p.sampling, p.data_size, cfg.seeds().0),
    }
}

/// Collects or loads the data, fits the GP and writes `model.json` and `dataset.csv`.
pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<GpModel> {
    let p = cfg.resolve()?;
    let data = dataset_for(&p, cfg)?;
    let (model, report) = GpModel::fit(data, &cfg.fit_options())?;
    if report.any_warning() {
        log::warn!("fit for {} finished without convergence on some outputs", p.name);
    }
    ensure_dir(&cfg.out)?;
    model.save(cfg.out.join("model.json"))?;
    write_dataset_csv(model.dataset(), fs::File::create(cfg.out.join("dataset.csv"))?)?;
    Ok(model)
}

fn fit_in_memory(p: &Preset, cfg: &ExperimentConfig) -> Result<GpModel> {
    let data = dataset_for(p, cfg)?;
    Ok(GpModel::fit(data, &cfg.fit_options())?.0)
}

/// Computes the tube and writes `schedule.json` and `schedule.csv`.
pub fn cmd_bound(cfg: &ExperimentConfig, model: &GpModel) -> Result<TubeOutcome> {
    let p = cfg.resolve()?;
    let outcome = bound_trajectory(model, &p.init_belief()?, &p.controls, p.horizon, &cfg.tube_config(&p)?)?;
    ensure_dir(&cfg.out)?;
    fs::write(cfg.out.join("schedule.json"), serde_json::to_string_pretty(&outcome)?)?;
    write_schedule_csv(
        fs::File::create(cfg.out.join("schedule.csv"))?,
        &outcome.schedule,
        &report_header(&p, cfg),
    )?;
    Ok(outcome)
}

/// Moment-matching rollout, written to `mm.csv`.
pub fn cmd_mm(cfg: &ExperimentConfig, model: &GpModel) -> Result<Vec<GaussianBelief>> {
    let p = cfg.resolve()?;
    let rollout = mm_rollout(model, &p.init_belief()?, &p.controls, p.horizon, &MmOptions::default())?;
    ensure_dir(&cfg.out)?;
    write_rollout_csv(fs::File::create(cfg.out.join("mm.csv"))?, &rollout, 2.0)?;
    Ok(rollout)
}

/// Samples GP trajectories against a schedule and writes `summary.json`.
pub fn cmd_validate(cfg: &ExperimentConfig, model: &GpModel, schedule: &BoundSchedule) -> Result<ValidationSummary> {
    let p = cfg.resolve()?;
    let init = p.init_belief()?;
    let batch = sample_gp_trajectories(
        model,
        &init,
        &p.controls,
        schedule.horizon,
        cfg.trajectories,
        cfg.seeds().2,
        cfg.include_noise,
    )?;
    let rollout = mm_rollout(model, &init, &p.controls, schedule.horizon, &MmOptions::default()).ok();
    let summary = ValidationSummary::new(&p.name, &batch, schedule, rollout.as_deref().map(|r| (r, 2.0)))?;
    ensure_dir(&cfg.out)?;
    fs::write(cfg.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    batch.write_csv(fs::File::create(cfg.out.join("trajectories.csv"))?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Report {
    Table1,
    Table2,
    Fig1,
    Fig3,
}

impl std::str::FromStr for Report {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Report::Table1),
            "table2" => Ok(Report::Table2),
            "fig1" => Ok(Report::Fig1),
            "fig3" => Ok(Report::Fig3),
            other => Err(Error::InvalidArgument(format!("unknown report `{other}`"))),
        }
    }
}

impl Report {
    pub fn name(self) -> &'static str {
        match self {
            Report::Table1 => "table1",
            Report::Table2 => "table2",
            Report::Fig1 => "fig1",
            Report::Fig3 => "fig3",
        }
    }

    fn presets(self) -> &'static [&'static str] {
        match self {
            Report::Table1 => &["mountain-car"],
            Report::Table2 => &["system1", "system2", "system3", "system4", "system5"],
            Report::Fig1 => &["synthetic-1d"],
            Report::Fig3 => &["quartic"],
        }
    }
}

/// Everything computed for one preset variant.
#[derive(Debug, Clone)]
pub struct PresetRun {
    pub preset: Preset,
    pub model: GpModel,
    pub outcome: TubeOutcome,
    /// Moment-matching rollout, when the controls allow one.
    pub mm: Option<Vec<GaussianBelief>>,
    /// Posterior-sampled trajectory statistics; absent when the tube is infeasible.
    pub gp_violation_ratio: Option<f64>,
    pub gp_coverage: Option<Vec<f64>>,
    pub gp_mm_coverage: Option<Vec<f64>>,
    /// Ground-truth trajectory statistics.
    pub system_violation_ratio: Option<f64>,
    pub system_containment: Option<f64>,
}

/// Fits, bounds and validates one preset variant with `cfg`'s seeds and sizes.
pub fn run_preset(p: &Preset, cfg: &ExperimentConfig, gp_samples: usize) -> Result<PresetRun> {
    let model = fit_in_memory(p, cfg)?;
    let init = p.init_belief()?;
    let outcome = bound_trajectory(&model, &init, &p.controls, p.horizon, &cfg.tube_config(p)?)?;
    let mm = match mm_rollout(&model, &init, &p.controls, p.horizon, &MmOptions::default()) {
        Ok(r) => Some(r),
        Err(Error::Unsupported(_)) => None,
        Err(e) => return Err(e),
    };
    let mut run = PresetRun {
        preset: p.clone(),
        model,
        outcome,
        mm,
        gp_violation_ratio: None,
        gp_coverage: None,
        gp_mm_coverage: None,
        system_violation_ratio: None,
        system_containment: None,
    };
    let (_, _, val_seed) = cfg.seeds();
    let gp_batch = sample_gp_trajectories(&run.model, &init, &p.controls, p.horizon, gp_samples, val_seed, cfg.include_noise)?;
    if let Some(r) = &run.mm {
        run.gp_mm_coverage = Some(crate::validation::mm_coverage(&gp_batch, r, 2.0)?);
    }
    if run.outcome.is_feasible() {
        let s = &run.outcome.schedule;
        run.gp_violation_ratio = Some(violation_ratio(&gp_batch, s)?);
        run.gp_coverage = Some(per_step_coverage(&gp_batch, s)?);
        let sys = sample_system_trajectories(&p.system, &init, &p.controls, p.horizon, cfg.trajectories, val_seed)?;
        run.system_violation_ratio = Some(violation_ratio(&sys, s)?);
        run.system_containment = Some(trajectory_containment(&sys, s)?);
    }
    Ok(run)
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Result of a reproduction run: written files and whether every tube was certified.
#[derive(Debug, Clone)]
pub struct ReproduceOutput {
    pub runs: Vec<PresetRun>,
    pub files: Vec<PathBuf>,
    pub feasible: bool,
}

/// Runs the full pipeline behind one of the paper's tables or figures.
pub fn cmd_reproduce(report: Report, cfg: &ExperimentConfig) -> Result<ReproduceOutput> {
    let mut runs = Vec::new();
    for family in report.presets() {
        for mut p in preset_variants(family)? {
            let mut local = cfg.clone();
            local.preset = Some(p.name.clone());
            p = local.resolve()?;
            let samples = match report {
                Report::Fig1 | Report::Fig3 => 100,
                _ => cfg.trajectories,
            };
            runs.push(run_preset(&p, &local, samples)?);
        }
    }
    ensure_dir(&cfg.out)?;
    let header = runs.first().map(|r| report_header(&r.preset, cfg)).unwrap_or_default();
    let mut files = Vec::new();
    let main = cfg.out.join(format!("{}.csv", report.name()));
    let mut w = csv::Writer::from_writer(Vec::new());
    match report {
        Report::Table1 => {
            w.write_record(["t", "u", "xhat_1", "xhat_2", "K", "p"])?;
            for r in &runs {
                for s in &r.outcome.schedule.steps {
                    let u = match &r.preset.controls {
                        Controls::OpenLoop { sequence } => sequence.get(s.t).map(|u| fmt(u[0])).unwrap_or_default(),
                        _ => String::new(),
                    };
                    w.write_record([s.t.to_string(), u, fmt(s.center[0]), fmt(s.center[1]), fmt(s.k), fmt(s.p)])?;
                }
            }
        }
        Report::Table2 => {
            w.write_record(["system", "t", "K", "p"])?;
            for r in &runs {
                for s in &r.outcome.schedule.steps {
                    w.write_record([r.preset.name.clone(), s.t.to_string(), fmt(s.k), fmt(s.p)])?;
                }
            }
        }
        Report::Fig1 | Report::Fig3 => {
            w.write_record([
                "preset",
                "t",
                "xhat",
                "K",
                "p",
                "mm_mean",
                "mm_sd",
                "tube_coverage",
                "mm_coverage",
            ])?;
            for r in &runs {
                for s in &r.outcome.schedule.steps {
                    let (mean, sd) = r
                        .mm
                        .as_ref()
                        .map(|b| (Some(b[s.t].mean[0]), Some(b[s.t].std_devs()[0])))
                        .unwrap_or((None, None));
                    w.write_record([
                        r.preset.name.clone(),
                        s.t.to_string(),
                        fmt(s.center[0]),
                        fmt(s.k),
                        fmt(s.p),
                        opt(mean),
                        opt(sd),
                        opt(r.gp_coverage.as_ref().map(|c| c[s.t])),
                        opt(r.gp_mm_coverage.as_ref().map(|c| c[s.t])),
                    ])?;
                }
            }
        }
    }
    write_with_header(&main, &header, w)?;
    files.push(main);

    let stats = cfg.out.join(format!("{}_validation.csv", report.name()));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "preset",
        "feasible",
        "gp_violation_ratio",
        "system_violation_ratio",
        "system_containment",
    ])?;
    for r in &runs {
        w.write_record([
            r.preset.name.clone(),
            r.outcome.is_feasible().to_string(),
            opt(r.gp_violation_ratio),
            opt(r.system_violation_ratio),
            opt(r.system_containment),
        ])?;
    }
    write_with_header(&stats, &header, w)?;
    files.push(stats);

    let feasible = runs.iter().all(|r| r.outcome.is_feasible());
    Ok(ReproduceOutput { runs, files, feasible })
}

fn write_with_header(path: &Path, header: &[String], w: csv::Writer<Vec<u8>>) -> Result<()> {
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut out = Vec::new();
    for h in header {
        out.extend_from_slice(format!("# {h}\n").as_bytes());
    }
    out.extend_from_slice(&body);
    fs::write(path, out)?;
    Ok(())
}
