//! 1D viscous Burgers equation with periodic boundary conditions and a
//! distributed scalar control acting through a fixed shape function.
//!
//! The grid stores N nodes x_i = i * dx with dx = L / (N - 1); the last node
//! sits at x = L and duplicates x = 0 by periodicity, so the unique unknowns
//! are the first N - 1 values. Semi-discretization: second-order central
//! differences for the Laplacian and for the conservative convection term
//! (y^2/2)_x, advanced by explicit RK4 substeps.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{rk4_step, substep_count, Plant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BurgersConfig {
    pub viscosity: f64,
    pub grid_points: usize,
    pub domain_length: f64,
    pub dt_sim: f64,
    /// Centers of the Gaussian bumps composing the control shape.
    pub shape_centers: Vec<f64>,
    pub shape_width: f64,
    /// Locations where the state is observed; must sit on grid nodes (values
    /// off by less than half a cell are snapped with a warning).
    pub obs_points: Vec<f64>,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            viscosity: 0.01,
            grid_points: 49,
            domain_length: 2.0,
            dt_sim: 0.005,
            shape_centers: vec![0.25, 1.25],
            shape_width: 0.1,
            obs_points: vec![0.0, 0.5, 1.0, 1.5],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BurgersPlant {
    cfg: BurgersConfig,
    chi: DVector<f64>,
    obs_indices: Vec<usize>,
    dx: f64,
    /// Unique unknowns; the final grid node mirrors node 0.
    n_unique: usize,
}

impl BurgersPlant {
    pub fn new(cfg: BurgersConfig) -> Result<Self> {
        if cfg.grid_points < 8 {
            return Err(Error::InvalidArgument(format!(
                "Burgers grid needs at least 8 points, got {}",
                cfg.grid_points
            )));
        }
        if !(cfg.viscosity > 0.0) {
            return Err(Error::InvalidArgument("viscosity must be positive".into()));
        }
        if !(cfg.domain_length > 0.0) {
            return Err(Error::InvalidArgument(
                "domain length must be positive".into(),
            ));
        }
        if !(cfg.dt_sim > 0.0) {
            return Err(Error::InvalidArgument("dt_sim must be positive".into()));
        }
        let n_unique = cfg.grid_points - 1;
        let dx = cfg.domain_length / n_unique as f64;
        // explicit-scheme diffusion bound; convective stability is
        // state-dependent and caught by the blow-up check at runtime
        let diffusion_number = cfg.viscosity * cfg.dt_sim / (dx * dx);
        if diffusion_number > 0.5 {
            return Err(Error::InvalidArgument(format!(
                "dt_sim {} violates the diffusion stability bound: nu dt / dx^2 = {:.3} > 0.5",
                cfg.dt_sim, diffusion_number
            )));
        }
        let mut obs_indices = Vec::with_capacity(cfg.obs_points.len());
        for &x in &cfg.obs_points {
            if !(0.0..cfg.domain_length).contains(&x) {
                return Err(Error::InvalidArgument(format!(
                    "observation point {x} outside [0, {})",
                    cfg.domain_length
                )));
            }
            let pos = x / dx;
            let idx = pos.round();
            let off = (pos - idx).abs() * dx;
            if off > 0.5 * dx * (1.0 - 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "observation point {x} is half a cell away from any grid node"
                )));
            }
            if off > 1e-9 * dx {
                log::warn!(
                    "observation point {x} snapped to grid node {} (x = {})",
                    idx as usize % n_unique,
                    idx * dx
                );
            }
            obs_indices.push(idx as usize % n_unique);
        }
        let chi = DVector::from_fn(cfg.grid_points, |i, _| {
            let x = (i % n_unique) as f64 * dx;
            cfg.shape_centers
                .iter()
                .map(|&c| (-((x - c) / cfg.shape_width).powi(2)).exp())
                .sum()
        });
        Ok(Self {
            cfg,
            chi,
            obs_indices,
            dx,
            n_unique,
        })
    }

    pub fn config(&self) -> &BurgersConfig {
        &self.cfg
    }

    /// Control shape evaluated on the grid.
    pub fn chi(&self) -> &DVector<f64> {
        &self.chi
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.cfg.grid_points)
            .map(|i| i as f64 * self.dx)
            .collect()
    }

    /// Grid indices the observation points snapped to.
    pub fn obs_indices(&self) -> &[usize] {
        &self.obs_indices
    }

    /// Samples a function of x on the grid; the wrap node copies node 0.
    pub fn state_from_fn(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let mut y = DVector::from_fn(self.cfg.grid_points, |i, _| f(i as f64 * self.dx));
        y[self.n_unique] = y[0];
        y
    }

    /// The three data-collection initial conditions: sin(pi x),
    /// sin(2 pi x) exp(-(x-1)^2), and rest.
    pub fn default_initial_conditions(&self) -> Vec<DVector<f64>> {
        use std::f64::consts::PI;
        vec![
            self.state_from_fn(|x| (PI * x).sin()),
            self.state_from_fn(|x| (2.0 * PI * x).sin() * (-(x - 1.0) * (x - 1.0)).exp()),
            DVector::zeros(self.cfg.grid_points),
        ]
    }

    /// Mean over the periodic cell (trapezoid quadrature divided by the
    /// domain length; exact telescoping makes this conserved at u = 0).
    pub fn discrete_mean(&self, y: &DVector<f64>) -> f64 {
        y.rows(0, self.n_unique).sum() / self.n_unique as f64
    }

    /// Energy 1/2 integral y^2 dx over the periodic cell.
    pub fn discrete_energy(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.rows(0, self.n_unique).iter().map(|v| v * v).sum::<f64>() * self.dx
    }

    fn rhs(&self, y: &DVector<f64>, u: f64, out: &mut DVector<f64>) {
        let n = self.n_unique;
        let dx = self.dx;
        let nu = self.cfg.viscosity;
        for i in 0..n {
            let ip = if i + 1 == n { 0 } else { i + 1 };
            let im = if i == 0 { n - 1 } else { i - 1 };
            let diffusion = (y[ip] - 2.0 * y[i] + y[im]) / (dx * dx);
            // conservative convection: d/dx (y^2 / 2), central
            let convection = (y[ip] * y[ip] - y[im] * y[im]) / (4.0 * dx);
            out[i] = nu * diffusion - convection + u * self.chi[i];
        }
        out[n] = out[0];
    }
}

impl Plant for BurgersPlant {
    fn state_dim(&self) -> usize {
        self.cfg.grid_points
    }

    fn obs_dim(&self) -> usize {
        self.obs_indices.len()
    }

    fn dt_sim(&self) -> f64 {
        self.cfg.dt_sim
    }

    fn step(&self, state: &DVector<f64>, u: f64, dt: f64) -> Result<DVector<f64>> {
        if state.len() != self.cfg.grid_points {
            return Err(Error::Dimension {
                what: "Burgers state",
                expected: self.cfg.grid_points,
                got: state.len(),
            });
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Burgers state".into()));
        }
        let substeps = substep_count(dt, self.cfg.dt_sim)?;
        let mut y = state.clone();
        y[self.n_unique] = y[0];
        for s in 0..substeps {
            y = rk4_step(|state, out| self.rhs(state, u, out), &y, self.cfg.dt_sim);
            y[self.n_unique] = y[0];
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp((s + 1) as f64 * self.cfg.dt_sim));
            }
        }
        Ok(y)
    }

    fn observe(&self, state: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.obs_indices.len(), |i, _| state[self.obs_indices[i]])
    }

    fn name(&self) -> &'static str {
        "burgers"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn plant() -> BurgersPlant {
        BurgersPlant::new(BurgersConfig::default()).unwrap()
    }

    #[test]
    fn default_observation_points_sit_on_nodes() {
        // dx = 2/48, so 0.5, 1.0, 1.5 are exact nodes
        let p = plant();
        assert_eq!(p.obs_indices(), &[0, 12, 24, 36]);
    }

    #[test]
    fn constants_are_steady_states_without_forcing() {
        let p = plant();
        let y0 = DVector::from_element(p.state_dim(), 1.7);
        let y1 = p.step(&y0, 0.0, 1.0).unwrap();
        assert!((y1 - &y0).amax() < 1e-12);
    }

    #[test]
    fn mean_is_conserved_without_forcing() {
        let p = plant();
        let mut y = p.state_from_fn(|x| (PI * x).sin() + 0.3);
        let mean0 = p.discrete_mean(&y);
        for _ in 0..1000 {
            y = p.step(&y, 0.0, p.dt_sim()).unwrap();
        }
        let mean1 = p.discrete_mean(&y);
        assert!((mean1 - mean0).abs() < 1e-10);
    }

    #[test]
    fn energy_dissipates_without_forcing() {
        let p = plant();
        let mut y = p.state_from_fn(|x| 0.5 * (PI * x).sin());
        let mut prev = p.discrete_energy(&y);
        for _ in 0..1000 {
            y = p.step(&y, 0.0, p.dt_sim()).unwrap();
            let e = p.discrete_energy(&y);
            assert!(e <= prev + 1e-10);
            prev = e;
        }
    }

    #[test]
    fn forcing_enters_affinely_to_step_size_squared() {
        let p = plant();
        let y = p.state_from_fn(|x| 0.2 * (PI * x).sin());
        let second_diff_at = |dt: f64| {
            let y_a = p.step(&y, 0.02, dt).unwrap();
            let y_b = p.step(&y, 0.05, dt).unwrap();
            let y_c = p.step(&y, 0.08, dt).unwrap();
            // second difference cancels the base flow and the affine part
            (&y_c - &y_b * 2.0 + &y_a).amax()
        };
        let d = second_diff_at(p.dt_sim());
        assert!(d < 10.0 * p.dt_sim() * p.dt_sim(), "second difference {d}");
    }

    #[test]
    fn observation_picks_grid_nodes_in_order() {
        let p = plant();
        let y = p.state_from_fn(|x| (PI * x).sin());
        let z = p.observe(&y);
        let expect = [0.0, 1.0, 0.0, -1.0];
        for (got, want) in z.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_observation_points_permutes_output() {
        let cfg = BurgersConfig {
            obs_points: vec![1.5, 0.0, 1.0, 0.5],
            ..BurgersConfig::default()
        };
        let p_perm = BurgersPlant::new(cfg).unwrap();
        let p_base = plant();
        let y = p_base.state_from_fn(|x| x.cos());
        let z = p_perm.observe(&y);
        let z_base = p_base.observe(&y);
        assert_eq!(z[0], z_base[3]);
        assert_eq!(z[1], z_base[0]);
        assert_eq!(z[2], z_base[2]);
        assert_eq!(z[3], z_base[1]);
    }

    #[test]
    fn snapping_warns_but_half_cell_errors() {
        // 0.26 is near the node at 0.25 (dx = 0.25 for 9 points): snaps
        let cfg = BurgersConfig {
            grid_points: 9,
            obs_points: vec![0.26],
            ..BurgersConfig::default()
        };
        let p = BurgersPlant::new(cfg).unwrap();
        assert_eq!(p.obs_indices(), &[1]);
        // 0.125 is exactly half a cell from both neighbors: rejected
        let cfg = BurgersConfig {
            grid_points: 9,
            obs_points: vec![0.125],
            ..BurgersConfig::default()
        };
        assert!(BurgersPlant::new(cfg).is_err());
    }

    #[test]
    fn convective_instability_reports_blow_up() {
        // amplitude far beyond the advective stability limit
        let p = plant();
        let y0 = p.state_from_fn(|x| 50.0 * (PI * x).sin());
        let err = p.step(&y0, 0.0, 1.0).unwrap_err();
        match err {
            crate::error::Error::BlowUp(t) => {
                assert!(t > 0.0 && t <= 1.0);
                assert_eq!(crate::error::Error::BlowUp(t).exit_code(), 3);
            }
            other => panic!("expected blow-up, got {other}"),
        }
    }

    #[test]
    fn rejects_unstable_dt() {
        let cfg = BurgersConfig {
            dt_sim: 1.0,
            ..BurgersConfig::default()
        };
        assert!(BurgersPlant::new(cfg).is_err());
    }

    #[test]
    fn spatial_order_is_near_two() {
        // smooth, well-resolved solution on nested grids vs a fine reference
        let horizon = 1.0;
        let u = 0.075;
        let solve = |n: usize| {
            let cfg = BurgersConfig {
                grid_points: n,
                dt_sim: 0.001,
                obs_points: vec![0.0],
                ..BurgersConfig::default()
            };
            let p = BurgersPlant::new(cfg).unwrap();
            let y0 = p.state_from_fn(|x| 0.1 * (PI * x).sin());
            p.step(&y0, u, horizon).unwrap()
        };
        let reference = solve(385); // dx = 2/384
        let error_at = |n: usize| {
            let y = solve(n);
            let ratio = 384 / (n - 1);
            let mut err: f64 = 0.0;
            for i in 0..n - 1 {
                err = err.max((y[i] - reference[i * ratio]).abs());
            }
            err
        };
        let e1 = error_at(49);
        let e2 = error_at(97);
        let order = (e1 / e2).log2();
        assert!(
            (1.7..=2.3).contains(&order),
            "observed order {order}, errors {e1} {e2}"
        );
    }
}
