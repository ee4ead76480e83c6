//! Receding-horizon closed loop: observe the plant, solve the finite-horizon
//! problem on the surrogate, apply the first control for one sample time,
//! and repeat. Optionally feeds every applied step back into per-control
//! accumulators and refits the switched bank on a fixed period.

use std::time::Instant;

use nalgebra::DVector;

use super::{
    solve_continuous, solve_switched, solve_switched_plant, stage_cost, trapezoid_window,
    ControlSequence, MpcConfig, MpcSolution,
};
use crate::edmd::{weight_from_fraction, KoopmanModel, OnlineAccumulator};
use crate::error::{Error, Result};
use crate::krom::{BilinearModel, LocalizedBilinear, SwitchedBank};
use crate::plant::{substep_count, Plant, Trajectory, TrajectoryKind};

/// Predictor driving the controller.
pub enum Surrogate {
    Switched(SwitchedBank),
    Bilinear(BilinearModel),
    Localized(LocalizedBilinear),
    /// Full-order baseline: the plant itself predicts, with enumeration over
    /// the given anchor values.
    PlantSwitched {
        anchors: Vec<f64>,
    },
}

impl Surrogate {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Surrogate::Switched(_) => "switched",
            Surrogate::Bilinear(_) => "bilinear",
            Surrogate::Localized(_) => "localized",
            Surrogate::PlantSwitched { .. } => "plant",
        }
    }

    fn lag_time(&self) -> Option<f64> {
        match self {
            Surrogate::Switched(b) => Some(b.lag_time_h()),
            Surrogate::Bilinear(m) => Some(m.lag_time_h()),
            Surrogate::Localized(m) => Some(m.lag_time_h()),
            Surrogate::PlantSwitched { .. } => None,
        }
    }
}

/// Streaming-update policy for switched surrogates: every applied step feeds
/// the matching control's accumulator, and the bank is refitted on a fixed
/// period with the weight rule `q = floor(m eps / (1 - eps))`.
pub struct UpdatePolicy {
    pub epsilon: f64,
    pub period_s: f64,
    pub accumulators: Vec<OnlineAccumulator>,
}

#[derive(Debug, Clone)]
pub struct RefitEvent {
    pub time: f64,
    pub models: Vec<KoopmanModel>,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopStep {
    pub time: f64,
    pub applied_control: f64,
    pub solve_seconds: f64,
    pub solution: MpcSolution,
}

/// Everything a closed-loop run records. Sample arrays hold `n + 1` entries
/// for `n` steps (the terminal sample has no solve attached).
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub times: Vec<f64>,
    pub observations: Vec<DVector<f64>>,
    /// Squared tracking error of each recorded observation.
    pub stage_costs: Vec<f64>,
    /// Trailing-window integral of the stage cost at each sample, with the
    /// window clamped to the recorded range at the start of the run.
    pub window_costs: Vec<f64>,
    pub steps: Vec<ClosedLoopStep>,
    pub trajectory: Trajectory,
    pub refits: Vec<RefitEvent>,
    pub cost_window_s: f64,
}

impl ClosedLoopRun {
    /// Sum of the per-step stage costs (terminal sample excluded).
    pub fn total_cost(&self) -> f64 {
        self.stage_costs[..self.steps.len()].iter().sum()
    }

    /// Time integral of the stage cost over the whole run (trapezoid).
    pub fn integrated_cost(&self) -> f64 {
        if self.times.len() < 2 {
            return 0.0;
        }
        let t_end = *self.times.last().expect("non-empty");
        trapezoid_window(&self.times, &self.stage_costs, t_end, t_end - self.times[0])
            .expect("window within recorded range")
    }

    pub fn mean_solve_seconds(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.solve_seconds).sum::<f64>() / self.steps.len() as f64
    }

    /// Windowed cost at an arbitrary time; errors when `t - window` precedes
    /// the recorded data.
    pub fn window_cost(&self, t: f64, window: f64) -> Result<f64> {
        trapezoid_window(&self.times, &self.stage_costs, t, window)
    }
}

fn empty_run(cost_window_s: f64) -> ClosedLoopRun {
    ClosedLoopRun {
        times: Vec::new(),
        observations: Vec::new(),
        stage_costs: Vec::new(),
        window_costs: Vec::new(),
        steps: Vec::new(),
        trajectory: Trajectory {
            times: Vec::new(),
            values: Vec::new(),
            controls: Vec::new(),
            kind: TrajectoryKind::State,
        },
        refits: Vec::new(),
        cost_window_s,
    }
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtStep {
        step,
        source: Box::new(e),
    }
}

fn validate_update_policy(policy: &UpdatePolicy, surrogate: &Surrogate, h: f64) -> Result<()> {
    let bank = match surrogate {
        Surrogate::Switched(bank) => bank,
        other => {
            return Err(Error::InvalidArgument(format!(
                "online updates only apply to switched surrogates, got {}",
                other.kind_name()
            )))
        }
    };
    if !(policy.epsilon > 0.0 && policy.epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "update fraction must lie in (0, 1), got {}",
            policy.epsilon
        )));
    }
    substep_count(policy.period_s, h).map_err(|_| {
        Error::InvalidArgument(format!(
            "refit period {} must be a positive integer multiple of the sample time {h}",
            policy.period_s
        ))
    })?;
    if policy.accumulators.len() != bank.len() {
        return Err(Error::Dimension {
            what: "update accumulators",
            expected: bank.len(),
            got: policy.accumulators.len(),
        });
    }
    for (acc, model) in policy.accumulators.iter().zip(bank.models()) {
        if acc.control_value() != model.control_value() {
            return Err(Error::InvalidArgument(format!(
                "accumulator control {} does not match bank control {}",
                acc.control_value(),
                model.control_value()
            )));
        }
        if acc.dict() != model.dict() {
            return Err(Error::InvalidArgument(
                "accumulator dictionary differs from the bank's".into(),
            ));
        }
    }
    Ok(())
}

/// Runs the receding-horizon loop for `duration` seconds (a multiple of the
/// sample time). With an update policy, every applied step contributes its
/// snapshot pair and the bank is refitted on the policy period.
pub fn closed_loop(
    plant: &dyn Plant,
    surrogate: &mut Surrogate,
    cfg: &MpcConfig,
    y0: &DVector<f64>,
    duration: f64,
    cost_window_s: f64,
    mut update: Option<UpdatePolicy>,
) -> Result<ClosedLoopRun> {
    cfg.validate()?;
    if let Some(lag) = surrogate.lag_time() {
        if (lag - cfg.sample_time).abs() > 1e-12 * cfg.sample_time.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "sample time {} differs from the surrogate lag time {lag}",
                cfg.sample_time
            )));
        }
    }
    if let Some(policy) = &update {
        validate_update_policy(policy, surrogate, cfg.sample_time)?;
    }
    if duration == 0.0 {
        return Ok(empty_run(cost_window_s));
    }
    let n_steps = substep_count(duration, cfg.sample_time)?;
    let h = cfg.sample_time;
    let refit_every = update
        .as_ref()
        .map(|p| (p.period_s / h).round() as usize)
        .unwrap_or(usize::MAX);

    let mut y = y0.clone();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut observations = Vec::with_capacity(n_steps + 1);
    let mut applied = Vec::with_capacity(n_steps);
    let mut steps = Vec::with_capacity(n_steps);
    let mut refits = Vec::new();
    let mut u_prev: Option<Vec<f64>> = None;

    times.push(0.0);
    states.push(y.clone());
    observations.push(plant.observe(&y));

    for i in 0..n_steps {
        let t = i as f64 * h;
        let z = observations[i].clone();

        let started = Instant::now();
        let solution = match &*surrogate {
            Surrogate::Switched(bank) => solve_switched(bank, &z, cfg, t),
            Surrogate::Bilinear(model) => {
                let warm = warm_start(&u_prev, cfg);
                solve_continuous(model, &z, cfg, t, &warm)
            }
            Surrogate::Localized(model) => {
                let warm = warm_start(&u_prev, cfg);
                solve_continuous(model, &z, cfg, t, &warm)
            }
            Surrogate::PlantSwitched { anchors } => {
                solve_switched_plant(plant, &y, anchors, cfg, t)
            }
        }
        .map_err(at_step(i))?;
        let solve_seconds = started.elapsed().as_secs_f64();

        let (u_value, applied_index) = match &solution.controls {
            ControlSequence::Indices(seq) => {
                let j = seq[0];
                let value = match &*surrogate {
                    Surrogate::Switched(bank) => bank.control_values()[j],
                    Surrogate::PlantSwitched { anchors } => anchors[j],
                    _ => unreachable!("index sequences only come from switched solvers"),
                };
                (value, Some(j))
            }
            ControlSequence::Values(u) => {
                u_prev = Some(u.clone());
                (u[0], None)
            }
        };

        y = plant.step(&y, u_value, h).map_err(at_step(i))?;
        times.push((i + 1) as f64 * h);
        states.push(y.clone());
        observations.push(plant.observe(&y));
        applied.push(u_value);
        steps.push(ClosedLoopStep {
            time: t,
            applied_control: u_value,
            solve_seconds,
            solution,
        });

        if let (Some(policy), Some(j)) = (update.as_mut(), applied_index) {
            let acc = &mut policy.accumulators[j];
            let q = weight_from_fraction(acc.sample_count(), policy.epsilon).map_err(at_step(i))?;
            acc.update(&z, &observations[i + 1], q)
                .map_err(at_step(i))?;
            if (i + 1) % refit_every == 0 {
                let models: Vec<KoopmanModel> = policy
                    .accumulators
                    .iter()
                    .map(|a| a.refit())
                    .collect::<Result<_>>()
                    .map_err(at_step(i))?;
                refits.push(RefitEvent {
                    time: (i + 1) as f64 * h,
                    models: models.clone(),
                });
                *surrogate = Surrogate::Switched(SwitchedBank::new(models).map_err(at_step(i))?);
            }
        }
    }

    let tracked = &cfg.tracked_indices;
    let mut stage_costs = Vec::with_capacity(n_steps + 1);
    for (t, z) in times.iter().zip(&observations) {
        let target = cfg.reference.eval(*t, tracked.len())?;
        stage_costs.push(stage_cost(z, &target, tracked)?);
    }
    let window_costs: Vec<f64> = times
        .iter()
        .map(|&t| {
            let w = cost_window_s.min(t - times[0]);
            trapezoid_window(&times, &stage_costs, t, w)
        })
        .collect::<Result<_>>()?;

    let trajectory = Trajectory::new(times.clone(), states, applied, TrajectoryKind::State)?;
    Ok(ClosedLoopRun {
        times,
        observations,
        stage_costs,
        window_costs,
        steps,
        trajectory,
        refits,
        cost_window_s,
    })
}

fn warm_start(u_prev: &Option<Vec<f64>>, cfg: &MpcConfig) -> Vec<f64> {
    match u_prev {
        Some(prev) => {
            // previous solution shifted by one step, last entry repeated
            let mut w: Vec<f64> = prev[1..].to_vec();
            w.push(*prev.last().expect("non-empty horizon"));
            w
        }
        None => {
            let mid = 0.5 * (cfg.control_bounds.0 + cfg.control_bounds.1);
            vec![mid; cfg.horizon]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Dictionary;
    use crate::edmd::{edmd_fit, SnapshotSet};
    use crate::mpc::{Reference, SolverOptions};
    use crate::plant::LinearTestPlant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_bank(
        plant: &LinearTestPlant,
        dict: &Dictionary,
        controls: &[f64],
        rng: &mut impl Rng,
    ) -> SwitchedBank {
        let models: Vec<_> = controls
            .iter()
            .map(|&u| {
                let pairs: Vec<_> = (0..4 * dict.size())
                    .map(|_| {
                        let z =
                            DVector::from_fn(plant.state_dim(), |_, _| rng.random_range(-1.0..1.0));
                        let zt = plant.step(&z, u, plant.dt_sim()).unwrap();
                        (z, zt)
                    })
                    .collect();
                let data = SnapshotSet::from_pairs(plant.dt_sim(), u, &pairs).unwrap();
                edmd_fit(&data, dict).unwrap()
            })
            .collect();
        SwitchedBank::new(models).unwrap()
    }

    fn config(horizon: usize, bounds: (f64, f64), target: Vec<f64>, h: f64) -> MpcConfig {
        MpcConfig {
            horizon,
            sample_time: h,
            reference: Reference::Constant { values: target },
            tracked_indices: vec![0, 1],
            control_bounds: bounds,
            enumeration_budget: 1_000_000,
            solver: SolverOptions::default(),
        }
    }

    #[test]
    fn zero_duration_runs_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let plant = LinearTestPlant::random(2, 0.1, 0.8, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let bank = exact_bank(&plant, &dict, &[-0.5, 0.5], &mut rng);
        let cfg = config(2, (-0.5, 0.5), vec![0.0, 0.0], 0.1);
        let mut surrogate = Surrogate::Switched(bank);
        let run = closed_loop(
            &plant,
            &mut surrogate,
            &cfg,
            &DVector::from_vec(vec![0.3, 0.1]),
            0.0,
            10.0,
            None,
        )
        .unwrap();
        assert!(run.trajectory.is_empty());
        assert!(run.steps.is_empty());
        assert_eq!(run.total_cost(), 0.0);
    }

    #[test]
    fn exact_surrogate_tracks_a_reachable_reference_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let plant = LinearTestPlant::random(2, 0.1, 0.7, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        // reachable target: steady state under a constant anchor control
        let u_target = 0.4;
        let mut y_ss = DVector::zeros(2);
        for _ in 0..600 {
            y_ss = plant.step(&y_ss, u_target, 0.1).unwrap();
        }
        let bank = exact_bank(&plant, &dict, &[-0.5, 0.0, 0.4, 0.5], &mut rng);
        let cfg = config(3, (-0.5, 0.5), vec![y_ss[0], y_ss[1]], 0.1);
        let mut surrogate = Surrogate::Switched(bank);
        let run = closed_loop(
            &plant,
            &mut surrogate,
            &cfg,
            &DVector::from_vec(vec![0.8, -0.6]),
            4.0,
            10.0,
            None,
        )
        .unwrap();
        assert!(
            *run.stage_costs.last().unwrap() < 1e-6,
            "final stage cost {}",
            run.stage_costs.last().unwrap()
        );
        // error decays along the run
        assert!(run.stage_costs[40] < run.stage_costs[0] * 1e-3);
    }

    #[test]
    fn stage_and_window_series_have_one_more_entry_than_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let plant = LinearTestPlant::random(2, 0.1, 0.8, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let bank = exact_bank(&plant, &dict, &[-0.5, 0.5], &mut rng);
        let cfg = config(2, (-0.5, 0.5), vec![0.1, 0.0], 0.1);
        let mut surrogate = Surrogate::Switched(bank);
        let run = closed_loop(
            &plant,
            &mut surrogate,
            &cfg,
            &DVector::from_vec(vec![0.3, 0.1]),
            1.0,
            0.5,
            None,
        )
        .unwrap();
        assert_eq!(run.steps.len(), 10);
        assert_eq!(run.times.len(), 11);
        assert_eq!(run.stage_costs.len(), 11);
        assert_eq!(run.window_costs.len(), 11);
        assert_eq!(run.trajectory.controls.len(), 10);
        // window column is the clamped trailing integral
        let w5 = run.window_cost(run.times[5], 0.5).unwrap();
        assert!((run.window_costs[5] - w5).abs() < 1e-14);
        // strict window call fails before enough data is recorded
        assert!(run.window_cost(0.2, 0.5).is_err());
    }

    #[test]
    fn zero_reference_window_cost_decays_after_the_transient() {
        // bank contains u = 0 and the plant is stable, so the loop settles
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let plant = LinearTestPlant::random(2, 0.1, 0.7, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let bank = exact_bank(&plant, &dict, &[-0.5, 0.0, 0.5], &mut rng);
        let cfg = config(3, (-0.5, 0.5), vec![0.0, 0.0], 0.1);
        let mut surrogate = Surrogate::Switched(bank);
        let run = closed_loop(
            &plant,
            &mut surrogate,
            &cfg,
            &DVector::from_vec(vec![0.9, -0.7]),
            6.0,
            1.0,
            None,
        )
        .unwrap();
        // skip the first window-length of transient, then demand decay
        let start = (1.0 / 0.1) as usize;
        for i in start..run.window_costs.len() - 1 {
            assert!(
                run.window_costs[i + 1] <= run.window_costs[i] + 1e-12,
                "window cost rose at step {i}"
            );
        }
        assert!(*run.window_costs.last().unwrap() < run.window_costs[start]);
    }

    #[test]
    fn plant_failures_carry_the_step_index() {
        use crate::plant::{BurgersConfig, BurgersPlant};
        let plant = BurgersPlant::new(BurgersConfig::default()).unwrap();
        let dict = Dictionary::monomials(4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let k = dict.size();
        let models: Vec<_> = [-0.075, 0.075]
            .iter()
            .map(|&u| {
                crate::edmd::KoopmanModel::new(
                    dict.clone(),
                    0.5,
                    u,
                    nalgebra::DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.1..0.1)),
                    1,
                )
                .unwrap()
            })
            .collect();
        let bank = SwitchedBank::new(models).unwrap();
        let cfg = MpcConfig {
            horizon: 2,
            sample_time: 0.5,
            reference: Reference::Constant { values: vec![0.0] },
            tracked_indices: vec![0],
            control_bounds: (-0.075, 0.075),
            enumeration_budget: 1_000_000,
            solver: SolverOptions::default(),
        };
        // an initial state far beyond the advective stability limit
        let y0 = plant.state_from_fn(|x| 80.0 * (std::f64::consts::PI * x).sin());
        let mut surrogate = Surrogate::Switched(bank);
        let err = closed_loop(&plant, &mut surrogate, &cfg, &y0, 2.0, 1.0, None).unwrap_err();
        match err {
            Error::AtStep { step, source } => {
                assert_eq!(step, 0);
                assert!(matches!(*source, Error::BlowUp(_)));
                assert_eq!(
                    Error::AtStep { step, source }.exit_code(),
                    3,
                    "blow-ups are numerical failures"
                );
            }
            other => panic!("expected a step-indexed failure, got {other}"),
        }
    }

    #[test]
    fn update_policy_requires_a_switched_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let plant = LinearTestPlant::random(2, 0.1, 0.8, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let bank = exact_bank(&plant, &dict, &[-0.5, 0.5], &mut rng);
        let localized = LocalizedBilinear::from_bank(&bank).unwrap();
        let cfg = config(2, (-0.5, 0.5), vec![0.0, 0.0], 0.1);
        let mut surrogate = Surrogate::Localized(localized);
        let policy = UpdatePolicy {
            epsilon: 0.025,
            period_s: 1.0,
            accumulators: Vec::new(),
        };
        let err = closed_loop(
            &plant,
            &mut surrogate,
            &cfg,
            &DVector::from_vec(vec![0.3, 0.1]),
            1.0,
            10.0,
            Some(policy),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn online_updates_refit_on_the_period_and_improve_noisy_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let plant = LinearTestPlant::random(2, 0.1, 0.75, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let anchors = [-0.5, 0.0, 0.5];

        // 50 initial pairs per control with sizeable observation noise
        let mut accs = Vec::new();
        let mut noisy_models = Vec::new();
        for &u in &anchors {
            let pairs: Vec<_> = (0..50)
                .map(|_| {
                    let z = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                    let mut zt = plant.step(&z, u, 0.1).unwrap();
                    for v in zt.iter_mut() {
                        *v += rng.random_range(-0.3..0.3);
                    }
                    (z, zt)
                })
                .collect();
            let data = SnapshotSet::from_pairs(0.1, u, &pairs).unwrap();
            accs.push(OnlineAccumulator::from_snapshots(&data, &dict).unwrap());
            noisy_models.push(edmd_fit(&data, &dict).unwrap());
        }
        let bank = SwitchedBank::new(noisy_models).unwrap();
        let cfg = config(2, (-0.5, 0.5), vec![0.2, -0.1], 0.1);
        let mut surrogate = Surrogate::Switched(bank);
        let policy = UpdatePolicy {
            epsilon: 0.025,
            period_s: 1.0,
            accumulators: accs,
        };
        let run = closed_loop(
            &plant,
            &mut surrogate,
            &cfg,
            &DVector::from_vec(vec![0.4, 0.4]),
            5.0,
            1.0,
            Some(policy),
        )
        .unwrap();
        assert_eq!(run.refits.len(), 5);

        // one-step prediction error of the refitted models never increases
        let validation: Vec<(usize, DVector<f64>, DVector<f64>)> = (0..60)
            .map(|i| {
                let j = i % anchors.len();
                let z = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let zt = plant.step(&z, anchors[j], 0.1).unwrap();
                (j, z, zt)
            })
            .collect();
        let prediction_error = |models: &[KoopmanModel]| -> f64 {
            validation
                .iter()
                .map(|(j, z, zt)| {
                    let lifted = dict.lift(z).unwrap();
                    let predicted = dict.project(&models[*j].step(&lifted).unwrap()).unwrap();
                    (predicted - zt).norm_squared()
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = f64::INFINITY;
        for event in &run.refits {
            let err = prediction_error(&event.models);
            assert!(
                err <= prev * (1.0 + 1e-9),
                "prediction error rose from {prev} to {err} at t = {}",
                event.time
            );
            prev = err;
        }
    }
}
