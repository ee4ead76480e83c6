//! Ground-truth dynamical systems, observation maps, and snapshot-data
//! generation.
//!
//! Plants step explicit state vectors with a scalar control held constant
//! over the step, so independent simulations can run in parallel. Snapshot
//! pairs are extracted from simulated (or imported) trajectories at a fixed
//! lag and bucketed per constant control value.

mod burgers;
mod linear;
mod vdp;

pub use burgers::{BurgersConfig, BurgersPlant};
pub use linear::LinearTestPlant;
pub use vdp::{VdpConfig, VdpPlant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::edmd::SnapshotSet;
use crate::error::{Error, Result};

pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Native integrator substep; `step` accepts positive integer multiples.
    fn dt_sim(&self) -> f64;
    /// Advances the state by `dt` under the constant control `u`.
    fn step(&self, state: &DVector<f64>, u: f64, dt: f64) -> Result<DVector<f64>>;
    fn observe(&self, state: &DVector<f64>) -> DVector<f64>;
    fn name(&self) -> &'static str;
}

/// Number of substeps for a macro step, requiring `dt` to be a positive
/// integer multiple of `dt_sim` up to roundoff.
pub(crate) fn substep_count(dt: f64, dt_sim: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive and finite, got {dt}"
        )));
    }
    let ratio = dt / dt_sim;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "step size {dt} is not a positive integer multiple of dt_sim {dt_sim}"
        )));
    }
    Ok(n as usize)
}

/// Classical fourth-order Runge-Kutta step for `y' = f(y)`.
pub(crate) fn rk4_step<F>(f: F, y: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>, &mut DVector<f64>),
{
    let n = y.len();
    let mut k1 = DVector::zeros(n);
    let mut k2 = DVector::zeros(n);
    let mut k3 = DVector::zeros(n);
    let mut k4 = DVector::zeros(n);
    f(y, &mut k1);
    f(&(y + &k1 * (dt / 2.0)), &mut k2);
    f(&(y + &k2 * (dt / 2.0)), &mut k3);
    f(&(y + &k3 * dt), &mut k4);
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    State,
    Observation,
}

/// Time-stamped rollout: values at sample times plus the control applied on
/// each interval (one fewer than the samples).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub controls: Vec<f64>,
    pub kind: TrajectoryKind,
}

impl Trajectory {
    pub fn new(
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
        controls: Vec<f64>,
        kind: TrajectoryKind,
    ) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Dimension {
                what: "trajectory values",
                expected: times.len(),
                got: values.len(),
            });
        }
        if !times.is_empty() && controls.len() + 1 != times.len() {
            return Err(Error::Dimension {
                what: "trajectory controls",
                expected: times.len().saturating_sub(1),
                got: controls.len(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "trajectory times must be strictly increasing".into(),
            ));
        }
        let finite = times.iter().all(|t| t.is_finite())
            && controls.iter().all(|c| c.is_finite())
            && values.iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite("trajectory".into()));
        }
        Ok(Self {
            times,
            values,
            controls,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// The uniform sample spacing, or an error when the grid is not uniform.
    pub fn dt_sample(&self) -> Result<f64> {
        if self.times.len() < 2 {
            return Err(Error::InvalidArgument(
                "trajectory needs at least two samples".into(),
            ));
        }
        let dt = self.times[1] - self.times[0];
        for w in self.times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(Error::InvalidArgument(
                    "trajectory samples are not uniformly spaced".into(),
                ));
            }
        }
        Ok(dt)
    }
}

/// Piecewise-constant control schedule indexing into a bank of anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant {
        index: usize,
    },
    /// Cycles through `order`, holding each entry for `period_s` seconds.
    Cyclic {
        order: Vec<usize>,
        period_s: f64,
    },
}

impl Schedule {
    pub fn validate(&self, n_anchors: usize, dt_sample: f64) -> Result<()> {
        match self {
            Schedule::Constant { index } => {
                if *index >= n_anchors {
                    return Err(Error::InvalidArgument(format!(
                        "schedule index {index} out of range for {n_anchors} anchors"
                    )));
                }
            }
            Schedule::Cyclic { order, period_s } => {
                if order.is_empty() {
                    return Err(Error::InvalidArgument("empty cyclic schedule".into()));
                }
                if order.iter().any(|&j| j >= n_anchors) {
                    return Err(Error::InvalidArgument(format!(
                        "schedule index out of range for {n_anchors} anchors"
                    )));
                }
                let per = period_s / dt_sample;
                if !(per.round() >= 1.0) || (per - per.round()).abs() > 1e-9 * per.max(1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "switching period {period_s} must be a positive integer multiple of dt_sample {dt_sample}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Active anchor index on the sample interval `[i dt, (i+1) dt)`.
    pub fn index_at(&self, interval: usize, dt_sample: f64) -> usize {
        match self {
            Schedule::Constant { index } => *index,
            Schedule::Cyclic { order, period_s } => {
                let per = (period_s / dt_sample).round() as usize;
                order[(interval / per.max(1)) % order.len()]
            }
        }
    }
}

/// Data-collection protocol: every schedule is run from every initial
/// condition, and the eligible pairs land in per-anchor buckets.
#[derive(Debug, Clone)]
pub struct CollectionPlan {
    pub anchors: Vec<f64>,
    pub schedules: Vec<Schedule>,
    pub duration: f64,
    pub dt_sample: f64,
    pub lag_time_h: f64,
    /// Pair start spacing in samples; 1 keeps every (overlapping) pair.
    pub stride: usize,
}

impl CollectionPlan {
    fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::InvalidArgument("no control anchors".into()));
        }
        if self.anchors.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("control anchors".into()));
        }
        if self.schedules.is_empty() {
            return Err(Error::InvalidArgument("no schedules to run".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if !(self.dt_sample > 0.0) {
            return Err(Error::InvalidArgument("dt_sample must be positive".into()));
        }
        lag_offset(self.lag_time_h, self.dt_sample)?;
        for s in &self.schedules {
            s.validate(self.anchors.len(), self.dt_sample)?;
        }
        Ok(())
    }
}

/// Lag expressed in samples; the lag must be a positive integer multiple of
/// the sampling interval.
pub(crate) fn lag_offset(lag_time_h: f64, dt_sample: f64) -> Result<usize> {
    let ratio = lag_time_h / dt_sample;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "lag time {lag_time_h} must be a positive integer multiple of dt_sample {dt_sample}"
        )));
    }
    Ok(n as usize)
}

/// Simulates one schedule, recording the state at every sample time and the
/// active anchor index on every interval.
pub fn simulate_schedule(
    plant: &dyn Plant,
    y0: &DVector<f64>,
    anchors: &[f64],
    schedule: &Schedule,
    duration: f64,
    dt_sample: f64,
) -> Result<(Trajectory, Vec<usize>)> {
    schedule.validate(anchors.len(), dt_sample)?;
    let steps = substep_count(duration, dt_sample)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    let mut labels = Vec::with_capacity(steps);
    let mut y = y0.clone();
    times.push(0.0);
    values.push(y.clone());
    for i in 0..steps {
        let j = schedule.index_at(i, dt_sample);
        y = plant.step(&y, anchors[j], dt_sample)?;
        times.push((i + 1) as f64 * dt_sample);
        values.push(y.clone());
        controls.push(anchors[j]);
        labels.push(j);
    }
    let traj = Trajectory::new(times, values, controls, TrajectoryKind::State)?;
    Ok((traj, labels))
}

/// Maps a state trajectory through the plant's observation function.
pub fn observe_trajectory(plant: &dyn Plant, traj: &Trajectory) -> Result<Trajectory> {
    if traj.kind != TrajectoryKind::State {
        return Err(Error::InvalidArgument(
            "can only observe a state trajectory".into(),
        ));
    }
    Trajectory::new(
        traj.times.clone(),
        traj.values.iter().map(|y| plant.observe(y)).collect(),
        traj.controls.clone(),
        TrajectoryKind::Observation,
    )
}

/// Collects per-anchor pair buckets from labeled observations. A pair
/// starting at sample `i` belongs to anchor `j` only when every interval in
/// `[i, i+offset)` carries label `j`; pairs straddling a switch are dropped.
fn collect_pairs(
    observations: &[DVector<f64>],
    labels: &[Option<usize>],
    offset: usize,
    stride: usize,
    buckets: &mut [Vec<(DVector<f64>, DVector<f64>)>],
) {
    if observations.len() <= offset {
        return;
    }
    let mut start = 0;
    while start + offset < observations.len() {
        if let Some(j) = labels[start] {
            if labels[start..start + offset].iter().all(|&l| l == Some(j)) {
                buckets[j].push((
                    observations[start].clone(),
                    observations[start + offset].clone(),
                ));
            }
        }
        start += stride;
    }
}

/// Runs the full collection protocol and splits the resulting pairs into one
/// snapshot set per control anchor.
pub fn generate_snapshots(
    plant: &dyn Plant,
    plan: &CollectionPlan,
    initial_conditions: &[DVector<f64>],
) -> Result<Vec<SnapshotSet>> {
    plan.validate()?;
    if initial_conditions.is_empty() {
        return Err(Error::InvalidArgument("no initial conditions".into()));
    }
    let offset = lag_offset(plan.lag_time_h, plan.dt_sample)?;
    let mut buckets: Vec<Vec<(DVector<f64>, DVector<f64>)>> = vec![Vec::new(); plan.anchors.len()];
    for y0 in initial_conditions {
        for schedule in &plan.schedules {
            let (traj, labels) = simulate_schedule(
                plant,
                y0,
                &plan.anchors,
                schedule,
                plan.duration,
                plan.dt_sample,
            )?;
            let obs: Vec<DVector<f64>> = traj.values.iter().map(|y| plant.observe(y)).collect();
            let labels: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
            collect_pairs(&obs, &labels, offset, plan.stride, &mut buckets);
        }
    }
    buckets_to_sets(buckets, &plan.anchors, plan.lag_time_h)
}

/// Extracts per-anchor snapshot sets from an observation trajectory whose
/// recorded controls take values from `anchors`. This is the ingestion route
/// for externally computed data.
pub fn snapshots_from_trajectory(
    traj: &Trajectory,
    anchors: &[f64],
    lag_time_h: f64,
    stride: usize,
) -> Result<Vec<SnapshotSet>> {
    if traj.kind != TrajectoryKind::Observation {
        return Err(Error::InvalidArgument(
            "snapshot extraction needs an observation trajectory".into(),
        ));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("no control anchors".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let dt = traj.dt_sample()?;
    let offset = lag_offset(lag_time_h, dt)?;
    let labels: Vec<Option<usize>> = traj
        .controls
        .iter()
        .map(|&c| {
            anchors
                .iter()
                .position(|&a| (c - a).abs() <= 1e-9 * a.abs().max(1.0))
        })
        .collect();
    let mut buckets: Vec<Vec<(DVector<f64>, DVector<f64>)>> = vec![Vec::new(); anchors.len()];
    collect_pairs(&traj.values, &labels, offset, stride, &mut buckets);
    buckets_to_sets(buckets, anchors, lag_time_h)
}

fn buckets_to_sets(
    buckets: Vec<Vec<(DVector<f64>, DVector<f64>)>>,
    anchors: &[f64],
    lag_time_h: f64,
) -> Result<Vec<SnapshotSet>> {
    let mut sets = Vec::with_capacity(buckets.len());
    for (j, bucket) in buckets.into_iter().enumerate() {
        if bucket.is_empty() {
            return Err(Error::EmptyControlBucket(anchors[j]));
        }
        sets.push(SnapshotSet::from_pairs(lag_time_h, anchors[j], &bucket)?);
    }
    Ok(sets)
}
