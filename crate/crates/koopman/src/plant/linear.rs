//! Discrete-time control-affine linear test plant `z_next = M z + N u`.
//!
//! The observation map is the identity and the dynamics are linear in the
//! control, so Koopman fits with any monomial dictionary of degree >= 1 are
//! exact given informative data. This is the regime where the switched and
//! bilinear surrogate equivalences hold to numerical precision, which makes
//! the plant the backbone of the property suites.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{substep_count, Plant};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LinearTestPlant {
    m: DMatrix<f64>,
    n: DVector<f64>,
    dt_sim: f64,
}

impl LinearTestPlant {
    pub fn new(m: DMatrix<f64>, n: DVector<f64>, dt_sim: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidArgument("state matrix must be square".into()));
        }
        if n.len() != m.nrows() {
            return Err(Error::Dimension {
                what: "control vector",
                expected: m.nrows(),
                got: n.len(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) || n.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("plant matrices".into()));
        }
        if !(dt_sim > 0.0) || !dt_sim.is_finite() {
            return Err(Error::InvalidArgument("dt_sim must be positive".into()));
        }
        Ok(Self { m, n, dt_sim })
    }

    /// Random instance with the state matrix rescaled to the requested
    /// spectral radius (stable for radius < 1).
    pub fn random(dim: usize, dt_sim: f64, spectral_radius: f64, rng: &mut impl Rng) -> Self {
        loop {
            let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            let rho = m
                .complex_eigenvalues()
                .iter()
                .map(|l| l.norm())
                .fold(0.0, f64::max);
            if rho < 1e-6 {
                continue;
            }
            let m = m * (spectral_radius / rho);
            let n = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            if n.norm() < 1e-3 {
                continue;
            }
            return Self { m, n, dt_sim };
        }
    }

    pub fn dynamics(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.m, &self.n)
    }
}

impl Plant for LinearTestPlant {
    fn state_dim(&self) -> usize {
        self.m.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.m.nrows()
    }

    fn dt_sim(&self) -> f64 {
        self.dt_sim
    }

    fn step(&self, state: &DVector<f64>, u: f64, dt: f64) -> Result<DVector<f64>> {
        if state.len() != self.m.nrows() {
            return Err(Error::Dimension {
                what: "linear plant state",
                expected: self.m.nrows(),
                got: state.len(),
            });
        }
        let substeps = substep_count(dt, self.dt_sim)?;
        let mut z = state.clone();
        for s in 0..substeps {
            z = &self.m * z + &self.n * u;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp((s + 1) as f64 * self.dt_sim));
            }
        }
        Ok(z)
    }

    fn observe(&self, state: &DVector<f64>) -> DVector<f64> {
        state.clone()
    }

    fn name(&self) -> &'static str {
        "linear"
    }
}
