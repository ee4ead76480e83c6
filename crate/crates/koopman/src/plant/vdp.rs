//! Van der Pol oscillator with an additive scalar control on the second
//! component, integrated by RK4.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{rk4_step, substep_count, Plant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VdpConfig {
    pub dt_sim: f64,
    pub initial_state: [f64; 2],
}

impl Default for VdpConfig {
    fn default() -> Self {
        Self {
            dt_sim: 0.005,
            initial_state: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct VdpPlant {
    cfg: VdpConfig,
}

impl VdpPlant {
    pub fn new(cfg: VdpConfig) -> Result<Self> {
        if !(cfg.dt_sim > 0.0) || !cfg.dt_sim.is_finite() {
            return Err(Error::InvalidArgument("dt_sim must be positive".into()));
        }
        if cfg.initial_state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state".into()));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &VdpConfig {
        &self.cfg
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.cfg.initial_state)
    }

    fn rhs(y: &DVector<f64>, u: f64, out: &mut DVector<f64>) {
        out[0] = y[1];
        out[1] = (1.0 - y[0] * y[0]) * y[1] - y[0] + u;
    }
}

impl Plant for VdpPlant {
    fn state_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn dt_sim(&self) -> f64 {
        self.cfg.dt_sim
    }

    fn step(&self, state: &DVector<f64>, u: f64, dt: f64) -> Result<DVector<f64>> {
        if state.len() != 2 {
            return Err(Error::Dimension {
                what: "Van der Pol state",
                expected: 2,
                got: state.len(),
            });
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Van der Pol state".into()));
        }
        let substeps = substep_count(dt, self.cfg.dt_sim)?;
        let mut y = state.clone();
        for s in 0..substeps {
            y = rk4_step(|state, out| Self::rhs(state, u, out), &y, self.cfg.dt_sim);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp((s + 1) as f64 * self.cfg.dt_sim));
            }
        }
        Ok(y)
    }

    fn observe(&self, state: &DVector<f64>) -> DVector<f64> {
        state.clone()
    }

    fn name(&self) -> &'static str {
        "vdp"
    }
}
