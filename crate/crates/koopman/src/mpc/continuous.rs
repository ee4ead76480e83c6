//! Box-constrained continuous-control optimization over bilinear surrogate
//! dynamics.
//!
//! The rollout cost gradient comes from a backward adjoint recursion through
//! the bilinear steps, so each gradient costs two passes over the horizon.
//! The optimizer is projected gradient descent with an Armijo backtracking
//! line search; localized models make the cost continuous but only piecewise
//! smooth in u, which multi-start (warm start, anchor constants, one random
//! point) is there to cope with.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{stage_cost, ControlSequence, MpcConfig, MpcSolution, SolverStats};
use crate::error::{Error, Result};
use crate::krom::BilinearDynamics;

const ARMIJO_SLOPE: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

struct Rollout {
    cost: f64,
    /// Lifted states `psi_0 .. psi_p`.
    states: Vec<DVector<f64>>,
    observations: Vec<DVector<f64>>,
}

fn rollout(
    model: &dyn BilinearDynamics,
    psi0: &DVector<f64>,
    controls: &[f64],
    refs: &[DVector<f64>],
    cfg: &MpcConfig,
) -> Result<Rollout> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut observations = Vec::with_capacity(controls.len());
    states.push(psi0.clone());
    let mut cost = 0.0;
    for (n, &u) in controls.iter().enumerate() {
        let next = model.step(&states[n], u)?;
        let z = model.dict().project(&next)?;
        cost += stage_cost(&z, &refs[n], &cfg.tracked_indices)?;
        observations.push(z);
        states.push(next);
    }
    if !cost.is_finite() {
        return Err(Error::Numerical("non-finite cost during rollout".into()));
    }
    Ok(Rollout {
        cost,
        states,
        observations,
    })
}

/// dJ/du by the adjoint recursion: lambda_n = dJ/dpsi_n accumulates the
/// stage-cost gradient and the transposed step Jacobian going backward.
fn gradient(
    model: &dyn BilinearDynamics,
    roll: &Rollout,
    controls: &[f64],
    refs: &[DVector<f64>],
    cfg: &MpcConfig,
) -> Result<Vec<f64>> {
    let p = controls.len();
    let k = model.dict().size();
    let cost_grad = |psi: &DVector<f64>, target: &DVector<f64>| -> DVector<f64> {
        // stage cost reads the projected coordinates, which sit at offset 1
        let mut g = DVector::zeros(k);
        for (pos, &idx) in cfg.tracked_indices.iter().enumerate() {
            g[1 + idx] = 2.0 * (psi[1 + idx] - target[pos]);
        }
        g
    };
    let mut grad = vec![0.0; p];
    let mut lambda = cost_grad(&roll.states[p], &refs[p - 1]);
    for n in (0..p).rev() {
        let du = model.step_control_derivative(&roll.states[n], controls[n])?;
        grad[n] = lambda.dot(&du);
        if n > 0 {
            lambda = model.step_adjoint(controls[n], &lambda)?
                + cost_grad(&roll.states[n], &refs[n - 1]);
        }
    }
    Ok(grad)
}

fn project(u: &mut [f64], lo: f64, hi: f64) {
    for v in u.iter_mut() {
        *v = v.clamp(lo, hi);
    }
}

struct StartResult {
    controls: Vec<f64>,
    cost: f64,
    rollout: Rollout,
    iterations: usize,
    evaluations: usize,
    converged: bool,
}

fn descend(
    model: &dyn BilinearDynamics,
    psi0: &DVector<f64>,
    start: &[f64],
    refs: &[DVector<f64>],
    cfg: &MpcConfig,
    lo: f64,
    hi: f64,
) -> Result<StartResult> {
    let mut u = start.to_vec();
    project(&mut u, lo, hi);
    let mut roll = rollout(model, psi0, &u, refs, cfg)?;
    let mut evaluations = 1usize;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut step = 1.0f64;
    for _ in 0..cfg.solver.max_iters {
        iterations += 1;
        let grad = gradient(model, &roll, &u, refs, cfg)?;
        let pg_norm = {
            let mut s = 0.0;
            for (i, g) in grad.iter().enumerate() {
                let moved = (u[i] - g).clamp(lo, hi);
                let d = u[i] - moved;
                s += d * d;
            }
            s.sqrt()
        };
        if pg_norm <= cfg.solver.grad_tol * (1.0 + roll.cost.abs()) {
            converged = true;
            break;
        }
        let mut t = step;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let mut cand: Vec<f64> = u.iter().zip(&grad).map(|(&ui, &gi)| ui - t * gi).collect();
            project(&mut cand, lo, hi);
            let moved: f64 = cand
                .iter()
                .zip(&u)
                .map(|(&c, &ui)| (c - ui) * (c - ui))
                .sum();
            if moved == 0.0 {
                break; // pinned at the box; nothing to try at any scale
            }
            let cand_roll = rollout(model, psi0, &cand, refs, cfg)?;
            evaluations += 1;
            // sufficient decrease along the projection arc
            let pred: f64 = grad
                .iter()
                .zip(u.iter().zip(&cand))
                .map(|(&g, (&ui, &ci))| g * (ui - ci))
                .sum();
            if cand_roll.cost <= roll.cost - ARMIJO_SLOPE * pred.max(0.0)
                && cand_roll.cost < roll.cost
            {
                u = cand;
                roll = cand_roll;
                accepted = true;
                step = (t * 2.0).min(1e6);
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break; // line search stalled (kink or numerically flat)
        }
    }
    Ok(StartResult {
        cost: roll.cost,
        controls: u,
        rollout: roll,
        iterations,
        evaluations,
        converged,
    })
}

/// Minimizes the horizon tracking cost over box-constrained real control
/// sequences. The returned cost never exceeds the warm start's, the controls
/// satisfy the bounds exactly, and `stats.converged` reports whether the
/// winning start met the first-order stationarity test.
pub fn solve_continuous(
    model: &dyn BilinearDynamics,
    z_s: &DVector<f64>,
    cfg: &MpcConfig,
    t_s: f64,
    u_init: &[f64],
) -> Result<MpcSolution> {
    cfg.validate()?;
    if (model.lag_time_h() - cfg.sample_time).abs() > 1e-12 * cfg.sample_time.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "sample time {} differs from the surrogate lag time {}",
            cfg.sample_time,
            model.lag_time_h()
        )));
    }
    let (model_lo, model_hi) = model.control_bounds();
    let (lo, hi) = cfg.control_bounds;
    if lo < model_lo || hi > model_hi {
        return Err(Error::InvalidArgument(format!(
            "control bounds [{lo}, {hi}] exceed the surrogate range [{model_lo}, {model_hi}]"
        )));
    }
    if u_init.len() != cfg.horizon {
        return Err(Error::Dimension {
            what: "warm start",
            expected: cfg.horizon,
            got: u_init.len(),
        });
    }
    for &v in u_init {
        if !v.is_finite() || v < lo || v > hi {
            return Err(Error::ControlOutOfRange { value: v, lo, hi });
        }
    }

    let refs = cfg.reference_horizon(t_s)?;
    let psi0 = model.dict().lift(z_s)?;

    // starts: warm start, constants at up to three anchors inside the
    // bounds (low / middle / high), one random point
    let mut starts: Vec<Vec<f64>> = vec![u_init.to_vec()];
    let anchors: Vec<f64> = model
        .anchor_controls()
        .into_iter()
        .filter(|&a| a >= lo && a <= hi)
        .collect();
    let mut anchor_starts: Vec<f64> = Vec::new();
    match anchors.len() {
        0 => anchor_starts.extend([lo, 0.5 * (lo + hi), hi]),
        1..=3 => {
            anchor_starts.extend(&anchors);
            while anchor_starts.len() < 3 {
                anchor_starts.push(0.5 * (lo + hi));
            }
        }
        n => {
            anchor_starts.push(anchors[0]);
            anchor_starts.push(anchors[n / 2]);
            anchor_starts.push(anchors[n - 1]);
        }
    }
    for a in anchor_starts {
        starts.push(vec![a; cfg.horizon]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.seed ^ (t_s.to_bits().rotate_left(17)));
    starts.push(
        (0..cfg.horizon)
            .map(|_| rng.random_range(lo..=hi))
            .collect(),
    );
    starts.truncate(cfg.solver.multi_starts.max(1));

    let mut best: Option<StartResult> = None;
    let mut total_iterations = 0usize;
    let mut total_evaluations = 0usize;
    for start in &starts {
        let result = descend(model, &psi0, start, &refs, cfg, lo, hi)?;
        total_iterations += result.iterations;
        total_evaluations += result.evaluations;
        let better = match &best {
            None => true,
            Some(b) => result.cost < b.cost,
        };
        if better {
            best = Some(result);
        }
    }
    let best = best.expect("at least one start");
    Ok(MpcSolution {
        controls: ControlSequence::Values(best.controls),
        predicted_cost: best.cost,
        predicted_observations: best.rollout.observations,
        stats: SolverStats {
            iterations: total_iterations,
            evaluations: total_evaluations,
            converged: best.converged,
        },
    })
}
