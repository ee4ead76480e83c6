//! Exhaustive switched-sequence optimization: every one of the n_c^p index
//! sequences is rolled out and costed. A depth-first walk shares rollout
//! prefixes between sequences and visits them in lexicographic order, so
//! strict improvement keeps the lexicographically smallest minimizer on
//! ties.

use nalgebra::DVector;

use super::{stage_cost, ControlSequence, MpcConfig, MpcSolution, SolverStats};
use crate::error::{Error, Result};
use crate::krom::SwitchedBank;
use crate::plant::Plant;

struct Best {
    cost: f64,
    sequence: Vec<usize>,
    observations: Vec<DVector<f64>>,
}

fn check_budget(n_c: usize, p: usize, budget: u64) -> Result<()> {
    let required = (n_c as u128).saturating_pow(p as u32);
    if required > budget as u128 {
        return Err(Error::BudgetExceeded { required, budget });
    }
    Ok(())
}

/// Minimizes the horizon cost over all constant-per-step index sequences of
/// the bank, predicting with the reduced model in lifted space.
pub fn solve_switched(
    bank: &SwitchedBank,
    z_s: &DVector<f64>,
    cfg: &MpcConfig,
    t_s: f64,
) -> Result<MpcSolution> {
    cfg.validate()?;
    if (bank.lag_time_h() - cfg.sample_time).abs() > 1e-12 * cfg.sample_time.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "sample time {} differs from the surrogate lag time {}",
            cfg.sample_time,
            bank.lag_time_h()
        )));
    }
    check_budget(bank.len(), cfg.horizon, cfg.enumeration_budget)?;
    let refs = cfg.reference_horizon(t_s)?;
    let lifted0 = bank.dictionary().lift(z_s)?;

    let mut best = Best {
        cost: f64::INFINITY,
        sequence: Vec::new(),
        observations: Vec::new(),
    };
    let mut evals = 0usize;
    let mut path = Vec::with_capacity(cfg.horizon);
    let mut obs_path: Vec<DVector<f64>> = Vec::with_capacity(cfg.horizon);

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        bank: &SwitchedBank,
        cfg: &MpcConfig,
        refs: &[DVector<f64>],
        lifted: &DVector<f64>,
        cost_so_far: f64,
        path: &mut Vec<usize>,
        obs_path: &mut Vec<DVector<f64>>,
        best: &mut Best,
        evals: &mut usize,
    ) -> Result<()> {
        if path.len() == cfg.horizon {
            *evals += 1;
            if cost_so_far < best.cost {
                best.cost = cost_so_far;
                best.sequence = path.clone();
                best.observations = obs_path.clone();
            }
            return Ok(());
        }
        let depth = path.len();
        for j in 0..bank.len() {
            let next = bank.models()[j].step(lifted)?;
            let z = bank.dictionary().project(&next)?;
            let c = stage_cost(&z, &refs[depth], &cfg.tracked_indices)?;
            if !c.is_finite() {
                return Err(Error::Numerical(
                    "non-finite cost during switched rollout".into(),
                ));
            }
            path.push(j);
            obs_path.push(z);
            dfs(
                bank,
                cfg,
                refs,
                &next,
                cost_so_far + c,
                path,
                obs_path,
                best,
                evals,
            )?;
            path.pop();
            obs_path.pop();
        }
        Ok(())
    }

    dfs(
        bank,
        cfg,
        &refs,
        &lifted0,
        0.0,
        &mut path,
        &mut obs_path,
        &mut best,
        &mut evals,
    )?;

    Ok(MpcSolution {
        controls: ControlSequence::Indices(best.sequence),
        predicted_cost: best.cost,
        predicted_observations: best.observations,
        stats: SolverStats {
            iterations: evals,
            evaluations: evals,
            converged: true,
        },
    })
}

/// Same enumeration, but predicting by stepping the plant itself. This is
/// the full-order baseline the reduced solvers are compared against.
pub fn solve_switched_plant(
    plant: &dyn Plant,
    y_s: &DVector<f64>,
    anchors: &[f64],
    cfg: &MpcConfig,
    t_s: f64,
) -> Result<MpcSolution> {
    cfg.validate()?;
    if anchors.len() < 2 {
        return Err(Error::InvalidArgument(
            "plant enumeration needs at least two anchors".into(),
        ));
    }
    check_budget(anchors.len(), cfg.horizon, cfg.enumeration_budget)?;
    let refs = cfg.reference_horizon(t_s)?;

    let mut best = Best {
        cost: f64::INFINITY,
        sequence: Vec::new(),
        observations: Vec::new(),
    };
    let mut evals = 0usize;
    let mut path = Vec::with_capacity(cfg.horizon);
    let mut obs_path: Vec<DVector<f64>> = Vec::with_capacity(cfg.horizon);

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        plant: &dyn Plant,
        anchors: &[f64],
        cfg: &MpcConfig,
        refs: &[DVector<f64>],
        state: &DVector<f64>,
        cost_so_far: f64,
        path: &mut Vec<usize>,
        obs_path: &mut Vec<DVector<f64>>,
        best: &mut Best,
        evals: &mut usize,
    ) -> Result<()> {
        if path.len() == cfg.horizon {
            *evals += 1;
            if cost_so_far < best.cost {
                best.cost = cost_so_far;
                best.sequence = path.clone();
                best.observations = obs_path.clone();
            }
            return Ok(());
        }
        let depth = path.len();
        for (j, &u) in anchors.iter().enumerate() {
            let next = plant.step(state, u, cfg.sample_time)?;
            let z = plant.observe(&next);
            let c = stage_cost(&z, &refs[depth], &cfg.tracked_indices)?;
            path.push(j);
            obs_path.push(z);
            dfs(
                plant,
                anchors,
                cfg,
                refs,
                &next,
                cost_so_far + c,
                path,
                obs_path,
                best,
                evals,
            )?;
            path.pop();
            obs_path.pop();
        }
        Ok(())
    }

    dfs(
        plant,
        anchors,
        cfg,
        &refs,
        y_s,
        0.0,
        &mut path,
        &mut obs_path,
        &mut best,
        &mut evals,
    )?;

    Ok(MpcSolution {
        controls: ControlSequence::Indices(best.sequence),
        predicted_cost: best.cost,
        predicted_observations: best.observations,
        stats: SolverStats {
            iterations: evals,
            evaluations: evals,
            converged: true,
        },
    })
}
