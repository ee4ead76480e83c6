//! Receding-horizon controllers over surrogate predictors: exhaustive
//! switched-sequence optimization, box-constrained continuous optimization
//! over bilinear models, and the closed-loop driver that applies the first
//! control and re-solves.

mod closed_loop;
mod continuous;
mod switched;

pub use closed_loop::{
    closed_loop, ClosedLoopRun, ClosedLoopStep, RefitEvent, Surrogate, UpdatePolicy,
};
pub use continuous::solve_continuous;
pub use switched::{solve_switched, solve_switched_plant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference signal the controller tracks; evaluates to one target value per
/// tracked observation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    Constant {
        values: Vec<f64>,
    },
    /// Step function: `values[i]` holds on `[times[i], times[i+1])`, the last
    /// entry from its start time onward.
    PiecewiseConstant {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// Scalar `amplitude * sin(t / sin_period) * cos(t / cos_period)`,
    /// broadcast to every tracked index.
    SinCos {
        amplitude: f64,
        sin_period: f64,
        cos_period: f64,
    },
}

impl Reference {
    pub fn validate(&self, tracked: usize) -> Result<()> {
        match self {
            Reference::Constant { values } => {
                if values.len() != tracked {
                    return Err(Error::Dimension {
                        what: "reference values",
                        expected: tracked,
                        got: values.len(),
                    });
                }
            }
            Reference::PiecewiseConstant { times, values } => {
                if times.len() != values.len() || times.is_empty() {
                    return Err(Error::InvalidArgument(
                        "piecewise reference needs matching, non-empty times and values".into(),
                    ));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidArgument(
                        "piecewise reference times must be strictly increasing".into(),
                    ));
                }
                for v in values {
                    if v.len() != tracked {
                        return Err(Error::Dimension {
                            what: "reference values",
                            expected: tracked,
                            got: v.len(),
                        });
                    }
                }
            }
            Reference::SinCos {
                amplitude,
                sin_period,
                cos_period,
            } => {
                if !amplitude.is_finite() || !(sin_period.abs() > 0.0) || !(cos_period.abs() > 0.0)
                {
                    return Err(Error::InvalidArgument(
                        "sin-cos reference needs finite amplitude and non-zero periods".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Target subvector at time `t` for `tracked` indices.
    pub fn eval(&self, t: f64, tracked: usize) -> Result<DVector<f64>> {
        self.validate(tracked)?;
        Ok(match self {
            Reference::Constant { values } => DVector::from_column_slice(values),
            Reference::PiecewiseConstant { times, values } => {
                // before the first breakpoint the first value holds
                let idx = times.iter().rposition(|&t0| t >= t0).unwrap_or(0);
                DVector::from_column_slice(&values[idx])
            }
            Reference::SinCos {
                amplitude,
                sin_period,
                cos_period,
            } => {
                let v = amplitude * (t / sin_period).sin() * (t / cos_period).cos();
                DVector::from_element(tracked, v)
            }
        })
    }
}

/// Solver knobs for the continuous box-constrained optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// First-order stationarity: projected gradient norm below
    /// `grad_tol * (1 + |cost|)` stops the iteration.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Multi-start count; starts are the warm start, constants at up to
    /// three anchor values, and one random point.
    pub multi_starts: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iters: 200,
            multi_starts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    /// Prediction horizon p.
    pub horizon: usize,
    /// Sample time h; must equal the surrogate's lag time.
    pub sample_time: f64,
    pub reference: Reference,
    /// Observation entries entering the cost.
    pub tracked_indices: Vec<usize>,
    /// Box bounds for the continuous solver.
    pub control_bounds: (f64, f64),
    /// Cap on `n_c^p` for exhaustive enumeration.
    pub enumeration_budget: u64,
    pub solver: SolverOptions,
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(self.sample_time > 0.0) || !self.sample_time.is_finite() {
            return Err(Error::InvalidArgument(
                "sample time must be positive".into(),
            ));
        }
        if self.tracked_indices.is_empty() {
            return Err(Error::InvalidArgument(
                "tracked index set must not be empty".into(),
            ));
        }
        if self.control_bounds.0 > self.control_bounds.1 {
            return Err(Error::InvalidArgument(format!(
                "control bounds are inverted: [{}, {}]",
                self.control_bounds.0, self.control_bounds.1
            )));
        }
        self.reference.validate(self.tracked_indices.len())?;
        Ok(())
    }

    /// Reference targets at `t_s + h, ..., t_s + p h`.
    pub(crate) fn reference_horizon(&self, t_s: f64) -> Result<Vec<DVector<f64>>> {
        (1..=self.horizon)
            .map(|n| {
                self.reference.eval(
                    t_s + n as f64 * self.sample_time,
                    self.tracked_indices.len(),
                )
            })
            .collect()
    }
}

/// Sequence of controls returned by a solver: bank indices for switched
/// problems, real values for continuous ones.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSequence {
    Indices(Vec<usize>),
    Values(Vec<f64>),
}

impl ControlSequence {
    pub fn len(&self) -> usize {
        match self {
            ControlSequence::Indices(v) => v.len(),
            ControlSequence::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverStats {
    pub iterations: usize,
    /// Rollout/cost evaluations performed.
    pub evaluations: usize,
    /// Whether the stationarity test was met (continuous) or the enumeration
    /// completed (switched).
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub controls: ControlSequence,
    pub predicted_cost: f64,
    pub predicted_observations: Vec<DVector<f64>>,
    pub stats: SolverStats,
}

/// Squared tracking error over the selected observation entries.
pub fn stage_cost(z: &DVector<f64>, z_opt: &DVector<f64>, tracked: &[usize]) -> Result<f64> {
    if z_opt.len() != tracked.len() {
        return Err(Error::Dimension {
            what: "reference subvector",
            expected: tracked.len(),
            got: z_opt.len(),
        });
    }
    let mut cost = 0.0;
    for (pos, &idx) in tracked.iter().enumerate() {
        if idx >= z.len() {
            return Err(Error::InvalidArgument(format!(
                "tracked index {idx} out of range for observation of length {}",
                z.len()
            )));
        }
        let e = z[idx] - z_opt[pos];
        cost += e * e;
    }
    Ok(cost)
}

/// Trapezoidal integral of a sampled signal over `[t - window, t]`, with
/// linear interpolation at the window ends. Errors when the window starts
/// before the first sample.
pub fn trapezoid_window(times: &[f64], values: &[f64], t: f64, window: f64) -> Result<f64> {
    if times.len() != values.len() {
        return Err(Error::Dimension {
            what: "window samples",
            expected: times.len(),
            got: values.len(),
        });
    }
    if times.len() < 2 {
        return Err(Error::InvalidArgument(
            "windowed integral needs at least two samples".into(),
        ));
    }
    if !(window >= 0.0) || !window.is_finite() {
        return Err(Error::InvalidArgument("window must be non-negative".into()));
    }
    let t0 = times[0];
    let t_end = *times.last().expect("non-empty");
    let tol = 1e-9 * (1.0 + t_end.abs());
    if t > t_end + tol || t < t0 - tol {
        return Err(Error::InvalidArgument(format!(
            "time {t} outside the recorded range [{t0}, {t_end}]"
        )));
    }
    let start = t - window;
    if start < t0 - tol {
        return Err(Error::InvalidArgument(format!(
            "window start {start} precedes recorded data at {t0}"
        )));
    }
    if window == 0.0 {
        return Ok(0.0);
    }
    let interp = |x: f64| -> f64 {
        // times are strictly increasing
        let i = match times.iter().rposition(|&ti| ti <= x) {
            Some(i) => i.min(times.len() - 2),
            None => 0,
        };
        let w = (x - times[i]) / (times[i + 1] - times[i]);
        values[i] * (1.0 - w) + values[i + 1] * w
    };
    let start = start.max(t0);
    let end = t.min(t_end);
    let mut integral = 0.0;
    let mut prev_t = start;
    let mut prev_v = interp(start);
    for (&ti, &vi) in times.iter().zip(values) {
        if ti <= prev_t || ti >= end {
            continue;
        }
        integral += 0.5 * (prev_v + vi) * (ti - prev_t);
        prev_t = ti;
        prev_v = vi;
    }
    integral += 0.5 * (prev_v + interp(end)) * (end - prev_t);
    Ok(integral)
}
