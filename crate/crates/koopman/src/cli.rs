//! Experiment harness behind the command-line interface: configuration with
//! dotted-path overrides, data collection, fitting, closed-loop runs, the
//! degree-by-data-volume parameter sweep, and the self-consistency audit.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::edmd::{edmd_fit, KoopmanModel, OnlineAccumulator, SnapshotSet};
use crate::error::{Error, Result};
use crate::io;
use crate::krom::{BilinearModel, LocalizedBilinear, SwitchedBank};
use crate::mpc::{
    closed_loop, trapezoid_window, ClosedLoopRun, MpcConfig, Reference, SolverOptions, Surrogate,
    UpdatePolicy,
};
use crate::plant::{
    generate_snapshots, BurgersConfig, BurgersPlant, CollectionPlan, LinearTestPlant, Plant,
    Schedule, VdpConfig, VdpPlant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearPlantSpec {
    pub dim: usize,
    pub dt_sim: f64,
    pub spectral_radius: f64,
}

impl Default for LinearPlantSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            dt_sim: 0.1,
            spectral_radius: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantSpec {
    Burgers(BurgersConfig),
    Vdp(VdpConfig),
    Linear(LinearPlantSpec),
}

impl PlantSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Plant>> {
        Ok(match self {
            PlantSpec::Burgers(cfg) => Box::new(BurgersPlant::new(cfg.clone())?),
            PlantSpec::Vdp(cfg) => Box::new(VdpPlant::new(cfg.clone())?),
            PlantSpec::Linear(spec) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x11, 0));
                Box::new(LinearTestPlant::random(
                    spec.dim,
                    spec.dt_sim,
                    spec.spectral_radius,
                    &mut rng,
                ))
            }
        })
    }

    /// Initial conditions for the data-collection runs.
    pub fn collection_initial_conditions(&self, seed: u64) -> Result<Vec<DVector<f64>>> {
        Ok(match self {
            PlantSpec::Burgers(cfg) => BurgersPlant::new(cfg.clone())?.default_initial_conditions(),
            PlantSpec::Vdp(cfg) => vec![
                DVector::from_column_slice(&cfg.initial_state),
                DVector::from_vec(vec![-1.0, -1.0]),
                DVector::from_vec(vec![2.0, 0.0]),
            ],
            PlantSpec::Linear(spec) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x12, 0));
                (0..3)
                    .map(|_| DVector::from_fn(spec.dim, |_, _| rng.random_range(-1.0..1.0)))
                    .collect()
            }
        })
    }

    /// Start state for closed-loop runs.
    pub fn run_initial_condition(&self, seed: u64) -> Result<DVector<f64>> {
        Ok(match self {
            PlantSpec::Burgers(cfg) => {
                BurgersPlant::new(cfg.clone())?.state_from_fn(|x| (std::f64::consts::PI * x).sin())
            }
            PlantSpec::Vdp(cfg) => DVector::from_column_slice(&cfg.initial_state),
            PlantSpec::Linear(spec) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x13, 0));
                DVector::from_fn(spec.dim, |_, _| rng.random_range(-1.0..1.0))
            }
        })
    }

    pub fn obs_names(&self) -> Vec<String> {
        match self {
            PlantSpec::Burgers(cfg) => cfg.obs_points.iter().map(|x| format!("y_at_{x}")).collect(),
            PlantSpec::Vdp(_) => vec!["y1".into(), "y2".into()],
            PlantSpec::Linear(spec) => (0..spec.dim).map(|i| format!("z{i}")).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Switched,
    Bilinear,
    Localized,
    /// Full-order baseline: the plant itself predicts.
    Plant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineUpdateSpec {
    pub epsilon: f64,
    pub period_s: f64,
}

impl Default for OnlineUpdateSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.025,
            period_s: 10.0,
        }
    }
}

/// Everything one experiment needs; every field has a default and can be
/// overridden from the command line by its dotted path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSpec,
    /// Constant control anchors, strictly increasing.
    pub anchors: Vec<f64>,
    pub dictionary_degree: usize,
    /// Cap on pairs per control used for fitting (uniform subsample).
    pub data_volume: Option<usize>,
    pub horizon: usize,
    pub surrogate: SurrogateKind,
    /// Closed-loop duration in seconds.
    pub duration: f64,
    /// Length of each data-collection simulation.
    pub collect_duration: f64,
    pub dt_sample: f64,
    pub lag_time_h: f64,
    /// Pair start spacing in samples (1 = overlapping pairs).
    pub stride: usize,
    /// Period of the extra switching run in the collection protocol.
    pub switching_period_s: f64,
    pub reference: Reference,
    pub tracked_indices: Vec<usize>,
    /// Continuous-solver bounds; defaults to the anchor range.
    pub control_bounds: Option<(f64, f64)>,
    pub online_update: Option<OnlineUpdateSpec>,
    pub cost_window_s: f64,
    /// Also run the plant-as-predictor baseline and report the cost gap.
    pub baseline: bool,
    pub solver: SolverOptions,
    pub enumeration_budget: u64,
    pub sweep_degrees: Vec<usize>,
    pub sweep_data_volumes: Vec<usize>,
    /// Optional third sweep axis: number of control anchors, spread evenly
    /// over the base anchor range.
    pub sweep_anchor_counts: Option<Vec<usize>>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: PlantSpec::Burgers(BurgersConfig::default()),
            anchors: vec![-0.075, 0.0, 0.075],
            // order 2 is the robust choice across data volumes; degree-3
            // lifted dynamics fitted on the default protocol tend to be
            // unstable over multi-step rollouts
            dictionary_degree: 2,
            data_volume: None,
            horizon: 3,
            surrogate: SurrogateKind::Switched,
            duration: 60.0,
            collect_duration: 60.0,
            dt_sample: 0.005,
            lag_time_h: 0.5,
            stride: 1,
            switching_period_s: 2.0,
            reference: Reference::PiecewiseConstant {
                times: vec![0.0, 20.0, 40.0],
                values: vec![vec![0.15; 4], vec![-0.15; 4], vec![0.0; 4]],
            },
            tracked_indices: vec![0, 1, 2, 3],
            control_bounds: None,
            online_update: None,
            cost_window_s: 10.0,
            baseline: false,
            solver: SolverOptions::default(),
            enumeration_budget: 1_000_000,
            sweep_degrees: vec![1, 2, 3],
            sweep_data_volumes: vec![500, 2000, 8000],
            sweep_anchor_counts: None,
            seed: 17,
            out_dir: PathBuf::from("out"),
            jobs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.len() < 2 {
            return Err(Error::Config("need at least two control anchors".into()));
        }
        if self.anchors.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "control anchors must be strictly increasing".into(),
            ));
        }
        if self.tracked_indices.is_empty() {
            return Err(Error::Config("tracked_indices must not be empty".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if let Some(v) = self.data_volume {
            if v == 0 {
                return Err(Error::Config("data_volume must be at least 1".into()));
            }
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn control_bounds_or_anchors(&self) -> (f64, f64) {
        self.control_bounds
            .unwrap_or_else(|| (self.anchors[0], self.anchors[self.anchors.len() - 1]))
    }

    pub fn mpc_config(&self) -> MpcConfig {
        let mut solver = self.solver;
        solver.seed = derive_seed(self.seed, 0x50, 0);
        MpcConfig {
            horizon: self.horizon,
            sample_time: self.lag_time_h,
            reference: self.reference.clone(),
            tracked_indices: self.tracked_indices.clone(),
            control_bounds: self.control_bounds_or_anchors(),
            enumeration_budget: self.enumeration_budget,
            solver,
        }
    }

    fn snapshot_csv(&self, j: usize) -> PathBuf {
        self.out_dir.join(format!("snapshots_u{j}.csv"))
    }

    fn model_file(&self, j: usize) -> PathBuf {
        self.out_dir.join(format!("model_u{j}.json"))
    }

    fn ensemble_file(&self) -> PathBuf {
        self.out_dir.join("ensemble.json")
    }
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base)
        .map(PathBuf::from)
        .unwrap_or_else(|_| path.to_path_buf())
}

/// Splitmix-style seed derivation so independent streams never collide.
pub fn derive_seed(base: u64, salt_a: u64, salt_b: u64) -> u64 {
    let mut x = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt_a)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
        .wrapping_add(salt_b);
    x ^= x >> 30;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Loads a config file (or the defaults) and applies `key=value` overrides
/// on dotted paths; values parse as JSON first and fall back to strings.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => serde_json::json!({}),
    };
    if !value.is_object() {
        return Err(Error::Config("config root must be a JSON object".into()));
    }
    for (key, raw) in overrides {
        let parsed = serde_json::from_str::<serde_json::Value>(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        set_dotted(&mut value, key, parsed)?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn set_dotted(root: &mut serde_json::Value, dotted: &str, value: serde_json::Value) -> Result<()> {
    let mut node = root;
    let segments: Vec<&str> = dotted.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("bad override key {dotted:?}")));
    }
    for seg in &segments[..segments.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path {dotted:?} crosses a non-object"))
        })?;
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path {dotted:?} crosses a non-object")))?;
    obj.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// The collection protocol: one constant run per anchor plus one cyclic
/// switching run, each from every initial condition.
fn collection_plan(cfg: &ExperimentConfig, anchors: &[f64]) -> CollectionPlan {
    let mut schedules: Vec<Schedule> = (0..anchors.len())
        .map(|index| Schedule::Constant { index })
        .collect();
    schedules.push(Schedule::Cyclic {
        order: (0..anchors.len()).collect(),
        period_s: cfg.switching_period_s,
    });
    CollectionPlan {
        anchors: anchors.to_vec(),
        schedules,
        duration: cfg.collect_duration,
        dt_sample: cfg.dt_sample,
        lag_time_h: cfg.lag_time_h,
        stride: cfg.stride,
    }
}

fn collect_sets(cfg: &ExperimentConfig, anchors: &[f64]) -> Result<Vec<SnapshotSet>> {
    let plant = cfg.plant.build(cfg.seed)?;
    let ics = cfg.plant.collection_initial_conditions(cfg.seed)?;
    let plan = collection_plan(cfg, anchors);
    if plan.duration == 0.0 {
        return Err(Error::EmptyControlBucket(anchors[0]));
    }
    generate_snapshots(plant.as_ref(), &plan, &ics)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CollectSummary {
    pub anchors: Vec<f64>,
    pub pair_counts: Vec<usize>,
    pub files: Vec<PathBuf>,
    pub lag_time_h: f64,
    pub dt_sample: f64,
}

pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<CollectSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let sets = collect_sets(cfg, &cfg.anchors)?;
    let names = cfg.plant.obs_names();
    let mut files = Vec::new();
    let mut pair_counts = Vec::new();
    for (j, set) in sets.iter().enumerate() {
        let path = cfg.snapshot_csv(j);
        io::write_snapshots(&path, set, &names)?;
        pair_counts.push(set.len());
        // summaries list files relative to the output directory so reruns
        // into different directories produce identical bytes
        files.push(relative_to(&path, &cfg.out_dir));
    }
    let summary = CollectSummary {
        anchors: cfg.anchors.clone(),
        pair_counts,
        files,
        lag_time_h: cfg.lag_time_h,
        dt_sample: cfg.dt_sample,
    };
    fs::write(
        cfg.out_dir.join("collect_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn read_snapshot_sets(cfg: &ExperimentConfig) -> Result<Vec<SnapshotSet>> {
    let mut sets = Vec::with_capacity(cfg.anchors.len());
    for j in 0..cfg.anchors.len() {
        let path = cfg.snapshot_csv(j);
        if !path.exists() {
            return Err(Error::Config(format!(
                "snapshot file {} not found; run `collect` first",
                path.display()
            )));
        }
        let (set, _) = io::read_snapshots(&path)?;
        sets.push(set);
    }
    Ok(sets)
}

fn subsample_sets(
    sets: &[SnapshotSet],
    volume: Option<usize>,
    seed: u64,
) -> Result<Vec<SnapshotSet>> {
    match volume {
        None => Ok(sets.to_vec()),
        Some(v) => sets
            .iter()
            .enumerate()
            .map(|(j, set)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x20, j as u64));
                set.subsample(v, &mut rng)
            })
            .collect(),
    }
}

fn fit_models(sets: &[SnapshotSet], degree: usize) -> Result<(Dictionary, Vec<KoopmanModel>)> {
    let dict = Dictionary::monomials(sets[0].obs_dim(), degree)?;
    let models = sets
        .iter()
        .map(|set| edmd_fit(set, &dict))
        .collect::<Result<Vec<_>>>()?;
    Ok((dict, models))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub degree: usize,
    /// Lifted dimension of every model.
    pub k: usize,
    pub kind: String,
    pub controls: Vec<f64>,
    pub pairs_used: Vec<usize>,
    pub model_files: Vec<PathBuf>,
    pub ensemble_file: PathBuf,
}

pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<FitSummary> {
    cfg.validate()?;
    if cfg.surrogate == SurrogateKind::Plant {
        return Err(Error::Config(
            "surrogate kind `plant` is a baseline; nothing to fit".into(),
        ));
    }
    let sets = read_snapshot_sets(cfg)?;
    let sets = subsample_sets(&sets, cfg.data_volume, cfg.seed)?;
    let (dict, models) = fit_models(&sets, cfg.dictionary_degree)?;
    let mut model_files = Vec::new();
    for (j, model) in models.iter().enumerate() {
        let path = cfg.model_file(j);
        io::write_model(&path, model)?;
        model_files.push(path);
    }
    let relative_model_files: Vec<PathBuf> = model_files
        .iter()
        .map(|p| relative_to(p, &cfg.out_dir))
        .collect();
    let (kind, member_files): (io::EnsembleKind, Vec<PathBuf>) = match cfg.surrogate {
        SurrogateKind::Switched => (io::EnsembleKind::Switched, model_files.clone()),
        // the bilinear interpolant spans the outermost anchors
        SurrogateKind::Bilinear => (
            io::EnsembleKind::Bilinear,
            vec![
                model_files[0].clone(),
                model_files[model_files.len() - 1].clone(),
            ],
        ),
        SurrogateKind::Localized => (io::EnsembleKind::Localized, model_files.clone()),
        SurrogateKind::Plant => unreachable!("rejected above"),
    };
    let ensemble_file = cfg.ensemble_file();
    io::write_ensemble(&ensemble_file, kind, &member_files)?;
    let summary = FitSummary {
        degree: cfg.dictionary_degree,
        k: dict.size(),
        kind: format!("{:?}", cfg.surrogate).to_lowercase(),
        controls: models.iter().map(|m| m.control_value()).collect(),
        pairs_used: sets.iter().map(|s| s.len()).collect(),
        model_files: relative_model_files,
        ensemble_file: relative_to(&ensemble_file, &cfg.out_dir),
    };
    fs::write(
        cfg.out_dir.join("fit_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Everything needed to reproduce a run: the full configuration plus the
/// surrogate files the controller actually loaded.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub ensemble_file: Option<PathBuf>,
    pub model_files: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: String,
    pub steps: usize,
    pub duration: f64,
    pub sample_time: f64,
    pub cost_window_s: f64,
    pub total_cost: f64,
    pub integrated_cost: f64,
    pub final_window_cost: f64,
    pub mean_solve_seconds: f64,
    pub refit_times: Vec<f64>,
    pub baseline_total_cost: Option<f64>,
    /// Integral over time of |stage cost - baseline stage cost|.
    pub delta_j: Option<f64>,
}

fn summarize(kind: &str, cfg: &ExperimentConfig, run: &ClosedLoopRun) -> RunSummary {
    RunSummary {
        kind: kind.into(),
        steps: run.steps.len(),
        duration: cfg.duration,
        sample_time: cfg.lag_time_h,
        cost_window_s: cfg.cost_window_s,
        total_cost: run.total_cost(),
        integrated_cost: run.integrated_cost(),
        final_window_cost: run.window_costs.last().copied().unwrap_or(0.0),
        mean_solve_seconds: run.mean_solve_seconds(),
        refit_times: run.refits.iter().map(|r| r.time).collect(),
        baseline_total_cost: None,
        delta_j: None,
    }
}

/// Time-integrated absolute difference between the stage-cost traces of two
/// runs recorded on the same time grid.
pub fn integrated_cost_gap(a: &ClosedLoopRun, b: &ClosedLoopRun) -> Result<f64> {
    if a.times.len() != b.times.len()
        || a.times
            .iter()
            .zip(&b.times)
            .any(|(x, y)| (x - y).abs() > 1e-9 * x.abs().max(1.0))
    {
        return Err(Error::InvalidArgument(
            "cost gap needs runs on the same time grid".into(),
        ));
    }
    if a.times.len() < 2 {
        return Ok(0.0);
    }
    let gaps: Vec<f64> = a
        .stage_costs
        .iter()
        .zip(&b.stage_costs)
        .map(|(x, y)| (x - y).abs())
        .collect();
    let t_end = *a.times.last().expect("non-empty");
    trapezoid_window(&a.times, &gaps, t_end, t_end - a.times[0])
}

/// Wall-time ratio between one plant step at the lag time and one
/// reduced-model step.
pub fn measure_speedup(plant: &dyn Plant, model: &KoopmanModel, y0: &DVector<f64>) -> Result<f64> {
    let lag = model.lag_time_h();
    let plant_reps = 30;
    let krom_reps = 20_000;

    let mut y = y0.clone();
    y = plant.step(&y, 0.0, lag)?; // warmup
    let started = Instant::now();
    for _ in 0..plant_reps {
        y = plant.step(&y, 0.0, lag)?;
    }
    let plant_per_step = started.elapsed().as_secs_f64() / plant_reps as f64;
    std::hint::black_box(&y);

    let z0 = plant.observe(y0);
    let psi0 = model.dict().lift(&z0)?;
    let mut psi = model.step(&psi0)?; // warmup
    let started = Instant::now();
    for _ in 0..krom_reps {
        psi = model.step(&psi0)?;
    }
    let krom_per_step = started.elapsed().as_secs_f64() / krom_reps as f64;
    std::hint::black_box(&psi);

    if krom_per_step <= 0.0 {
        return Err(Error::Numerical("timer resolution too coarse".into()));
    }
    Ok(plant_per_step / krom_per_step)
}

fn build_surrogate(kind: SurrogateKind, cfg: &ExperimentConfig) -> Result<Surrogate> {
    if kind == SurrogateKind::Plant {
        return Ok(Surrogate::PlantSwitched {
            anchors: cfg.anchors.clone(),
        });
    }
    let path = cfg.ensemble_file();
    if !path.exists() {
        return Err(Error::Config(format!(
            "ensemble file {} not found; run `fit` first",
            path.display()
        )));
    }
    let ensemble = io::read_ensemble(&path)?;
    let surrogate = match (kind, ensemble) {
        (SurrogateKind::Switched, io::Ensemble::Switched(bank)) => Surrogate::Switched(bank),
        (SurrogateKind::Bilinear, io::Ensemble::Bilinear(model)) => Surrogate::Bilinear(model),
        (SurrogateKind::Localized, io::Ensemble::Localized(model)) => Surrogate::Localized(model),
        (want, got) => {
            return Err(Error::Config(format!(
                "ensemble file holds a {:?} surrogate but the config asks for {:?}",
                got.kind(),
                want
            )))
        }
    };
    Ok(surrogate)
}

fn update_policy(cfg: &ExperimentConfig) -> Result<Option<UpdatePolicy>> {
    let Some(spec) = cfg.online_update else {
        return Ok(None);
    };
    if cfg.surrogate != SurrogateKind::Switched {
        return Err(Error::Config(
            "online updates only apply to the switched surrogate".into(),
        ));
    }
    let sets = read_snapshot_sets(cfg)?;
    let sets = subsample_sets(&sets, cfg.data_volume, cfg.seed)?;
    let dict = Dictionary::monomials(sets[0].obs_dim(), cfg.dictionary_degree)?;
    let accumulators = sets
        .iter()
        .map(|set| OnlineAccumulator::from_snapshots(set, &dict))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(UpdatePolicy {
        epsilon: spec.epsilon,
        period_s: spec.period_s,
        accumulators,
    }))
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let plant = cfg.plant.build(cfg.seed)?;
    let y0 = cfg.plant.run_initial_condition(cfg.seed)?;
    let mpc = cfg.mpc_config();
    let mut surrogate = build_surrogate(cfg.surrogate, cfg)?;
    let update = update_policy(cfg)?;
    let run = closed_loop(
        plant.as_ref(),
        &mut surrogate,
        &mpc,
        &y0,
        cfg.duration,
        cfg.cost_window_s,
        update,
    )?;
    let names = cfg.plant.obs_names();
    io::write_trace(&cfg.out_dir.join("trace.csv"), &run, &names)?;
    let mut summary = summarize(surrogate.kind_name(), cfg, &run);

    if cfg.baseline && cfg.surrogate != SurrogateKind::Plant {
        let mut oracle = Surrogate::PlantSwitched {
            anchors: cfg.anchors.clone(),
        };
        let baseline = closed_loop(
            plant.as_ref(),
            &mut oracle,
            &mpc,
            &y0,
            cfg.duration,
            cfg.cost_window_s,
            None,
        )?;
        io::write_trace(&cfg.out_dir.join("baseline_trace.csv"), &baseline, &names)?;
        summary.baseline_total_cost = Some(baseline.total_cost());
        summary.delta_j = Some(integrated_cost_gap(&run, &baseline)?);
    }

    fs::write(
        cfg.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let manifest = RunManifest {
        config: cfg.clone(),
        ensemble_file: (cfg.surrogate != SurrogateKind::Plant)
            .then(|| relative_to(&cfg.ensemble_file(), &cfg.out_dir)),
        model_files: (0..cfg.anchors.len())
            .map(|j| relative_to(&cfg.model_file(j), &cfg.out_dir))
            .filter(|p| cfg.out_dir.join(p).exists())
            .collect(),
    };
    fs::write(
        cfg.out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub cell: usize,
    pub degree: usize,
    pub data_volume: usize,
    pub n_anchors: usize,
    pub k: usize,
    pub pairs_used: usize,
    pub total_cost: Option<f64>,
    pub integrated_cost: Option<f64>,
    pub delta_j: Option<f64>,
    pub speedup: Option<f64>,
    pub mean_solve_seconds: Option<f64>,
    pub status: String,
    pub error: String,
}

fn anchor_sets(cfg: &ExperimentConfig) -> Vec<Vec<f64>> {
    match &cfg.sweep_anchor_counts {
        None => vec![cfg.anchors.clone()],
        Some(counts) => {
            let lo = cfg.anchors[0];
            let hi = cfg.anchors[cfg.anchors.len() - 1];
            counts
                .iter()
                .map(|&n| {
                    let n = n.max(2);
                    (0..n)
                        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                        .collect()
                })
                .collect()
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    plant: &dyn Plant,
    y0: &DVector<f64>,
    sets: &[SnapshotSet],
    anchors: &[f64],
    degree: usize,
    volume: usize,
    cell_index: usize,
    baseline: &ClosedLoopRun,
) -> Result<(ClosedLoopRun, RunSummary, usize, usize, f64)> {
    let sub = sets
        .iter()
        .enumerate()
        .map(|(j, set)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                0x30 + cell_index as u64,
                j as u64,
            ));
            set.subsample(volume, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let (dict, models) = fit_models(&sub, degree)?;
    let k = dict.size();
    let pairs_used = sub.iter().map(|s| s.len()).sum();
    let speedup = measure_speedup(plant, &models[0], y0)?;
    let mut surrogate = match cfg.surrogate {
        SurrogateKind::Switched | SurrogateKind::Plant => {
            Surrogate::Switched(SwitchedBank::new(models)?)
        }
        SurrogateKind::Bilinear => {
            let bank = SwitchedBank::new(models)?;
            let ms = bank.models();
            Surrogate::Bilinear(BilinearModel::from_anchors(&ms[0], &ms[ms.len() - 1])?)
        }
        SurrogateKind::Localized => {
            Surrogate::Localized(LocalizedBilinear::from_bank(&SwitchedBank::new(models)?)?)
        }
    };
    let mut mpc = cfg.mpc_config();
    mpc.control_bounds = (anchors[0], anchors[anchors.len() - 1]);
    let run = closed_loop(
        plant,
        &mut surrogate,
        &mpc,
        y0,
        cfg.duration,
        cfg.cost_window_s,
        None,
    )?;
    let mut summary = summarize(surrogate.kind_name(), cfg, &run);
    summary.baseline_total_cost = Some(baseline.total_cost());
    summary.delta_j = Some(integrated_cost_gap(&run, baseline)?);
    Ok((run, summary, k, pairs_used, speedup))
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let plant = cfg.plant.build(cfg.seed)?;
    let y0 = cfg.plant.run_initial_condition(cfg.seed)?;
    let names = cfg.plant.obs_names();

    // collect data and the full-order baseline once per anchor set
    let sets_per_anchor: Vec<(Vec<f64>, Vec<SnapshotSet>, ClosedLoopRun)> = anchor_sets(cfg)
        .into_iter()
        .map(|anchors| -> Result<_> {
            let sets = collect_sets(cfg, &anchors)?;
            let mut oracle = Surrogate::PlantSwitched {
                anchors: anchors.clone(),
            };
            let mut mpc = cfg.mpc_config();
            mpc.control_bounds = (anchors[0], anchors[anchors.len() - 1]);
            let baseline = closed_loop(
                plant.as_ref(),
                &mut oracle,
                &mpc,
                &y0,
                cfg.duration,
                cfg.cost_window_s,
                None,
            )?;
            Ok((anchors, sets, baseline))
        })
        .collect::<Result<_>>()?;

    struct CellSpec<'a> {
        index: usize,
        degree: usize,
        volume: usize,
        anchors: &'a [f64],
        sets: &'a [SnapshotSet],
        baseline: &'a ClosedLoopRun,
    }
    let mut specs = Vec::new();
    let mut index = 0;
    for (anchors, sets, baseline) in &sets_per_anchor {
        for &degree in &cfg.sweep_degrees {
            for &volume in &cfg.sweep_data_volumes {
                specs.push(CellSpec {
                    index,
                    degree,
                    volume,
                    anchors,
                    sets,
                    baseline,
                });
                index += 1;
            }
        }
    }

    let execute = |spec: &CellSpec| -> SweepCell {
        let mut cell = SweepCell {
            cell: spec.index,
            degree: spec.degree,
            data_volume: spec.volume,
            n_anchors: spec.anchors.len(),
            k: 0,
            pairs_used: 0,
            total_cost: None,
            integrated_cost: None,
            delta_j: None,
            speedup: None,
            mean_solve_seconds: None,
            status: "ok".into(),
            error: String::new(),
        };
        match run_cell(
            cfg,
            plant.as_ref(),
            &y0,
            spec.sets,
            spec.anchors,
            spec.degree,
            spec.volume,
            spec.index,
            spec.baseline,
        ) {
            Ok((run, summary, k, pairs_used, speedup)) => {
                cell.k = k;
                cell.pairs_used = pairs_used;
                cell.total_cost = Some(summary.total_cost);
                cell.integrated_cost = Some(summary.integrated_cost);
                cell.delta_j = summary.delta_j;
                cell.speedup = Some(speedup);
                cell.mean_solve_seconds = Some(summary.mean_solve_seconds);
                let dir = cfg.out_dir.join("cells").join(format!(
                    "deg{}_vol{}_na{}",
                    spec.degree,
                    spec.volume,
                    spec.anchors.len()
                ));
                if let Err(e) = fs::create_dir_all(&dir)
                    .map_err(Error::from)
                    .and_then(|_| io::write_trace(&dir.join("trace.csv"), &run, &names))
                    .and_then(|_| {
                        fs::write(
                            dir.join("summary.json"),
                            serde_json::to_string_pretty(&summary)?,
                        )
                        .map_err(Error::from)
                    })
                {
                    cell.status = "failed".into();
                    cell.error = e.to_string();
                }
            }
            Err(e) => {
                cell.status = "failed".into();
                cell.error = e.to_string();
            }
        }
        cell
    };

    let mut cells: Vec<SweepCell> = if let Some(jobs) = cfg.jobs {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            specs.par_iter().map(execute).collect()
        })
    } else {
        use rayon::prelude::*;
        specs.par_iter().map(execute).collect()
    };
    cells.sort_by_key(|c| c.cell);

    let mut writer = csv::Writer::from_path(cfg.out_dir.join("sweep.csv"))?;
    writer.write_record([
        "cell",
        "degree",
        "data_volume",
        "n_anchors",
        "k",
        "pairs_used",
        "total_cost",
        "integrated_cost",
        "delta_j",
        "speedup",
        "mean_solve_seconds",
        "status",
        "error",
    ])?;
    let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &cells {
        writer.write_record([
            c.cell.to_string(),
            c.degree.to_string(),
            c.data_volume.to_string(),
            c.n_anchors.to_string(),
            c.k.to_string(),
            c.pairs_used.to_string(),
            fmt(&c.total_cost),
            fmt(&c.integrated_cost),
            fmt(&c.delta_j),
            fmt(&c.speedup),
            fmt(&c.mean_solve_seconds),
            c.status.clone(),
            c.error.clone(),
        ])?;
    }
    writer.flush()?;
    Ok(cells)
}

#[derive(Debug, Default, Serialize)]
pub struct AuditReport {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn audit_run_dir(dir: &Path, report: &mut AuditReport) -> Result<()> {
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
    let trace = io::read_trace(&dir.join("trace.csv"))?;
    report.checked += 1;
    let mut mismatches: Vec<String> = Vec::new();
    fn complain_into(mismatches: &mut Vec<String>, dir: &Path, what: &str, expect: f64, got: f64) {
        if !close(expect, got) {
            mismatches.push(format!(
                "{}: {what} is {expect} in the summary but {got} from the trace",
                dir.display()
            ));
        }
    }
    macro_rules! complain {
        ($what:expr, $expect:expr, $got:expr) => {
            complain_into(&mut mismatches, dir, $what, $expect, $got)
        };
    }
    let steps = trace.applied.iter().filter(|a| a.is_some()).count();
    if steps != summary.steps {
        complain!("steps", summary.steps as f64, steps as f64);
    }
    let total: f64 = trace
        .stage_costs
        .iter()
        .zip(&trace.applied)
        .filter(|(_, a)| a.is_some())
        .map(|(c, _)| c)
        .sum();
    complain!("total_cost", summary.total_cost, total);
    if trace.times.len() >= 2 {
        let t_end = *trace.times.last().expect("non-empty");
        let integrated = trapezoid_window(
            &trace.times,
            &trace.stage_costs,
            t_end,
            t_end - trace.times[0],
        )?;
        complain!("integrated_cost", summary.integrated_cost, integrated);
        // window column is recomputable row by row
        for (i, &t) in trace.times.iter().enumerate() {
            let w = summary.cost_window_s.min(t - trace.times[0]);
            let recomputed = trapezoid_window(&trace.times, &trace.stage_costs, t, w)?;
            if !close(trace.window_costs[i], recomputed) {
                mismatches.push(format!(
                    "{}: window_cost at t = {t} is {} in the trace but recomputes to {recomputed}",
                    dir.display(),
                    trace.window_costs[i]
                ));
                break;
            }
        }
        complain!(
            "final_window_cost",
            summary.final_window_cost,
            *trace.window_costs.last().expect("non-empty")
        );
    }
    let solves: Vec<f64> = trace.solve_seconds.iter().flatten().copied().collect();
    if !solves.is_empty() {
        let mean = solves.iter().sum::<f64>() / solves.len() as f64;
        complain!("mean_solve_seconds", summary.mean_solve_seconds, mean);
    }
    if let Some(delta) = summary.delta_j {
        let baseline_path = dir.join("baseline_trace.csv");
        if baseline_path.exists() {
            let baseline = io::read_trace(&baseline_path)?;
            let gaps: Vec<f64> = trace
                .stage_costs
                .iter()
                .zip(&baseline.stage_costs)
                .map(|(a, b)| (a - b).abs())
                .collect();
            let t_end = *trace.times.last().expect("non-empty");
            let recomputed = trapezoid_window(&trace.times, &gaps, t_end, t_end - trace.times[0])?;
            complain!("delta_j", delta, recomputed);
        }
    }
    report.mismatches.extend(mismatches);
    Ok(())
}

fn walk_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            walk_summaries(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json")
            && path.with_file_name("trace.csv").exists()
        {
            found.push(path.parent().expect("file has a parent").to_path_buf());
        }
    }
    Ok(())
}

/// Recomputes every numeric summary field from the exported traces and
/// reports disagreements. Wall-time fields are recomputed from the trace's
/// own solve column, so the audit is self-contained.
pub fn cmd_audit(cfg: &ExperimentConfig) -> Result<AuditReport> {
    let mut dirs = Vec::new();
    walk_summaries(&cfg.out_dir, &mut dirs)?;
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!(
            "no summary/trace pairs found under {}",
            cfg.out_dir.display()
        )));
    }
    let mut report = AuditReport::default();
    for dir in &dirs {
        audit_run_dir(dir, &mut report)?;
    }
    if report.mismatches.is_empty() {
        Ok(report)
    } else {
        Err(Error::AuditMismatch(format!(
            "{} of {} runs disagree with their traces: {}",
            report.mismatches.len(),
            report.checked,
            report.mismatches.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            plant: PlantSpec::Linear(LinearPlantSpec::default()),
            anchors: vec![-0.5, 0.0, 0.5],
            dictionary_degree: 1,
            horizon: 2,
            duration: 2.0,
            collect_duration: 8.0,
            dt_sample: 0.1,
            lag_time_h: 0.1,
            switching_period_s: 0.5,
            reference: Reference::Constant {
                values: vec![0.2, -0.1],
            },
            tracked_indices: vec![0, 1],
            out_dir: dir.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn override_machinery_parses_json_then_strings() {
        let overrides = vec![
            ("seed".to_string(), "99".to_string()),
            ("plant.kind".to_string(), "linear".to_string()),
            ("plant.dim".to_string(), "3".to_string()),
            ("anchors".to_string(), "[-1.0, 1.0]".to_string()),
            ("out_dir".to_string(), "elsewhere".to_string()),
        ];
        let cfg = load_config(None, &overrides).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.anchors, vec![-1.0, 1.0]);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        match cfg.plant {
            PlantSpec::Linear(spec) => assert_eq!(spec.dim, 3),
            other => panic!("unexpected plant {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let overrides = vec![("no_such_field".to_string(), "1".to_string())];
        assert!(load_config(None, &overrides).is_err());
    }

    #[test]
    fn invalid_anchor_order_is_rejected() {
        let overrides = vec![("anchors".to_string(), "[1.0, -1.0]".to_string())];
        assert!(load_config(None, &overrides).is_err());
    }

    #[test]
    fn zero_duration_collect_reports_empty_bucket() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut cfg = linear_config(dir.path());
        cfg.collect_duration = 0.0;
        let err = cmd_collect(&cfg).unwrap_err();
        assert!(matches!(err, Error::EmptyControlBucket(_)));
    }

    #[test]
    fn collect_fit_run_audit_pipeline() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut cfg = linear_config(dir.path());
        cfg.baseline = true;
        let collected = cmd_collect(&cfg).unwrap();
        assert_eq!(collected.pair_counts.len(), 3);
        let fitted = cmd_fit(&cfg).unwrap();
        assert_eq!(fitted.k, 3); // constant + two linear monomials
        let summary = cmd_run(&cfg).unwrap();
        assert_eq!(summary.steps, 20);
        assert!(summary.delta_j.is_some());
        let report = cmd_audit(&cfg).unwrap();
        assert_eq!(report.checked, 1);
        assert!(report.mismatches.is_empty());
    }

    #[test]
    fn fit_reports_table_dimensions_per_degree() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut cfg = linear_config(dir.path());
        cfg.plant = PlantSpec::Linear(LinearPlantSpec {
            dim: 4,
            ..LinearPlantSpec::default()
        });
        cfg.tracked_indices = vec![0, 1, 2, 3];
        cfg.reference = Reference::Constant {
            values: vec![0.0; 4],
        };
        cmd_collect(&cfg).unwrap();
        cfg.dictionary_degree = 3;
        assert_eq!(cmd_fit(&cfg).unwrap().k, 35);
        cfg.dictionary_degree = 1;
        assert_eq!(cmd_fit(&cfg).unwrap().k, 5);
    }

    #[test]
    fn refitting_identical_data_writes_identical_files() {
        let dir = tempfile::TempDir::new().unwrap();
        let cfg = linear_config(dir.path());
        cmd_collect(&cfg).unwrap();
        cmd_fit(&cfg).unwrap();
        let first = fs::read_to_string(cfg.model_file(0)).unwrap();
        cmd_fit(&cfg).unwrap();
        let second = fs::read_to_string(cfg.model_file(0)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn single_cell_sweep_matches_a_plain_run() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut cfg = linear_config(dir.path());
        cfg.sweep_degrees = vec![1];
        cfg.sweep_data_volumes = vec![100_000]; // no subsampling in effect
        cfg.data_volume = None;
        let cells = cmd_sweep(&cfg).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].status, "ok");
        // the same configuration through collect/fit/run
        cmd_collect(&cfg).unwrap();
        cmd_fit(&cfg).unwrap();
        let summary = cmd_run(&cfg).unwrap();
        let cell_cost = cells[0].total_cost.unwrap();
        assert!(
            (cell_cost - summary.total_cost).abs() <= 1e-9 * (1.0 + cell_cost.abs()),
            "cell {cell_cost} vs run {}",
            summary.total_cost
        );
    }

    #[test]
    fn sweep_anchor_axis_collects_per_anchor_set() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut cfg = linear_config(dir.path());
        cfg.sweep_degrees = vec![1];
        cfg.sweep_data_volumes = vec![60];
        cfg.sweep_anchor_counts = Some(vec![2, 3]);
        let cells = cmd_sweep(&cfg).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].n_anchors, 2);
        assert_eq!(cells[1].n_anchors, 3);
        assert!(cells.iter().all(|c| c.status == "ok"));
    }

    #[test]
    fn localized_surrogate_runs_end_to_end() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut cfg = linear_config(dir.path());
        cfg.surrogate = SurrogateKind::Localized;
        cmd_collect(&cfg).unwrap();
        cmd_fit(&cfg).unwrap();
        let summary = cmd_run(&cfg).unwrap();
        assert_eq!(summary.kind, "localized");
        assert!(summary.total_cost.is_finite());
        // the continuous controller reaches comparable quality to switched
        cfg.surrogate = SurrogateKind::Switched;
        cmd_fit(&cfg).unwrap();
        let switched = cmd_run(&cfg).unwrap();
        assert!(summary.total_cost <= 5.0 * switched.total_cost + 1e-9);
    }

    #[test]
    fn sweep_survives_failing_cells() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut cfg = linear_config(dir.path());
        cfg.sweep_degrees = vec![1];
        // a volume of zero cannot subsample; the cell must fail, not the sweep
        cfg.sweep_data_volumes = vec![0, 50];
        let cells = cmd_sweep(&cfg).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].status, "failed");
        assert!(!cells[0].error.is_empty());
        assert_eq!(cells[1].status, "ok");
    }
}
