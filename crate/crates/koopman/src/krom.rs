//! Surrogate predictors built from fitted Koopman models: the linear
//! reduced-order step, switched banks, and (localized) bilinear
//! interpolation between anchor operators.
//!
//! Rollouts stay in lifted space: the observation is lifted once and the
//! operators propagate the lifted vector, with the observation projected out
//! at every step. Re-lifting each projected observation would be a different
//! (nonlinear) predictor; a diagnostic variant computes it for comparison.

use nalgebra::{DMatrix, DVector};

use crate::dictionary::Dictionary;
use crate::edmd::KoopmanModel;
use crate::error::{Error, Result};

impl KoopmanModel {
    /// One reduced-order step in lifted space: `U^T psi`.
    pub fn step(&self, lifted: &DVector<f64>) -> Result<DVector<f64>> {
        if lifted.len() != self.lift_dim() {
            return Err(Error::Dimension {
                what: "lifted vector",
                expected: self.lift_dim(),
                got: lifted.len(),
            });
        }
        if lifted.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lifted vector".into()));
        }
        Ok(self.u_transpose() * lifted)
    }
}

/// Bank of Koopman models for a finite set of constant inputs, sorted by
/// control value.
#[derive(Debug, Clone)]
pub struct SwitchedBank {
    models: Vec<KoopmanModel>,
}

impl SwitchedBank {
    /// Builds a bank from per-input models; the models are sorted by control
    /// value and must share the dictionary and lag time.
    pub fn new(mut models: Vec<KoopmanModel>) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::InvalidArgument(
                "switched bank needs at least two models".into(),
            ));
        }
        models.sort_by(|a, b| a.control_value().total_cmp(&b.control_value()));
        for pair in models.windows(2) {
            if pair[0].control_value() == pair[1].control_value() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate control value {} in switched bank",
                    pair[0].control_value()
                )));
            }
            if pair[0].dict() != pair[1].dict() {
                return Err(Error::InvalidArgument(
                    "switched bank models must share a dictionary".into(),
                ));
            }
            if pair[0].lag_time_h() != pair[1].lag_time_h() {
                return Err(Error::InvalidArgument(
                    "switched bank models must share the lag time".into(),
                ));
            }
        }
        Ok(Self { models })
    }

    /// Number of constant inputs n_c.
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        false // n_c >= 2 by construction
    }

    pub fn models(&self) -> &[KoopmanModel] {
        &self.models
    }

    pub fn control_values(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.control_value()).collect()
    }

    pub fn dictionary(&self) -> &Dictionary {
        self.models[0].dict()
    }

    pub fn lag_time_h(&self) -> f64 {
        self.models[0].lag_time_h()
    }

    /// Rolls the bank out in lifted space under an index sequence, projecting
    /// the observation at every step. Lifting happens once, at `z0`.
    pub fn predict(&self, z0: &DVector<f64>, sequence: &[usize]) -> Result<Vec<DVector<f64>>> {
        self.check_sequence(sequence)?;
        let dict = self.dictionary();
        let mut lifted = dict.lift(z0)?;
        let mut out = Vec::with_capacity(sequence.len());
        for &j in sequence {
            lifted = self.models[j].step(&lifted)?;
            out.push(dict.project(&lifted)?);
        }
        Ok(out)
    }

    /// Diagnostic variant that re-lifts the projected observation before
    /// every step.
    pub fn predict_relifted(
        &self,
        z0: &DVector<f64>,
        sequence: &[usize],
    ) -> Result<Vec<DVector<f64>>> {
        self.check_sequence(sequence)?;
        let dict = self.dictionary();
        let mut z = z0.clone();
        let mut out = Vec::with_capacity(sequence.len());
        for &j in sequence {
            let lifted = dict.lift(&z)?;
            z = dict.project(&self.models[j].step(&lifted)?)?;
            out.push(z.clone());
        }
        Ok(out)
    }

    fn check_sequence(&self, sequence: &[usize]) -> Result<()> {
        if let Some(&j) = sequence.iter().find(|&&j| j >= self.models.len()) {
            return Err(Error::InvalidArgument(format!(
                "control index {j} out of range for a bank of {}",
                self.models.len()
            )));
        }
        Ok(())
    }
}

/// Bilinear surrogate interpolating two anchor operators:
/// `psi_next = (A + alpha B) psi` with `alpha = (u - u_lo)/(u_hi - u_lo)`.
#[derive(Debug, Clone)]
pub struct BilinearModel {
    dict: Dictionary,
    lag_time_h: f64,
    u_lo: f64,
    u_hi: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    /// Exact copy of the upper anchor operator so that predictions at the
    /// anchors reproduce the anchor models bit for bit.
    a_hi: DMatrix<f64>,
}

impl BilinearModel {
    /// Builds the interpolant from two anchor models, normalizing the
    /// orientation so `u_lo < u_hi` regardless of argument order.
    pub fn from_anchors(first: &KoopmanModel, second: &KoopmanModel) -> Result<Self> {
        if first.dict() != second.dict() {
            return Err(Error::InvalidArgument(
                "bilinear anchors must share a dictionary".into(),
            ));
        }
        if first.lag_time_h() != second.lag_time_h() {
            return Err(Error::InvalidArgument(
                "bilinear anchors must share the lag time".into(),
            ));
        }
        if first.control_value() == second.control_value() {
            return Err(Error::InvalidArgument(
                "bilinear anchors need distinct control values".into(),
            ));
        }
        let (lo, hi) = if first.control_value() < second.control_value() {
            (first, second)
        } else {
            (second, first)
        };
        Ok(Self {
            dict: lo.dict().clone(),
            lag_time_h: lo.lag_time_h(),
            u_lo: lo.control_value(),
            u_hi: hi.control_value(),
            a: lo.u_transpose().clone(),
            b: hi.u_transpose() - lo.u_transpose(),
            a_hi: hi.u_transpose().clone(),
        })
    }

    pub fn dict(&self) -> &Dictionary {
        &self.dict
    }

    pub fn lag_time_h(&self) -> f64 {
        self.lag_time_h
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.u_lo, self.u_hi)
    }

    /// Lower anchor operator A.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Difference operator B = U_hi - U_lo.
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Interpolation weight for `u`, rejecting extrapolation.
    pub fn alpha(&self, u: f64) -> Result<f64> {
        if !u.is_finite() || u < self.u_lo || u > self.u_hi {
            return Err(Error::ControlOutOfRange {
                value: u,
                lo: self.u_lo,
                hi: self.u_hi,
            });
        }
        Ok((u - self.u_lo) / (self.u_hi - self.u_lo))
    }

    /// One bilinear step `(A + alpha B) psi`. At the anchors this applies
    /// the anchor operator exactly.
    pub fn step(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        let alpha = self.alpha(u)?;
        if lifted.len() != self.dict.size() {
            return Err(Error::Dimension {
                what: "lifted vector",
                expected: self.dict.size(),
                got: lifted.len(),
            });
        }
        if alpha == 0.0 {
            return Ok(&self.a * lifted);
        }
        if alpha == 1.0 {
            return Ok(&self.a_hi * lifted);
        }
        Ok(&self.a * lifted + (&self.b * lifted) * alpha)
    }

    /// Derivative of the step with respect to the control:
    /// `B psi / (u_hi - u_lo)`.
    pub fn step_control_derivative(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        self.alpha(u)?;
        Ok((&self.b * lifted) / (self.u_hi - self.u_lo))
    }

    /// Transpose-apply of the step matrix: `(A + alpha B)^T lambda`.
    pub fn step_adjoint(&self, u: f64, lambda: &DVector<f64>) -> Result<DVector<f64>> {
        let alpha = self.alpha(u)?;
        if alpha == 0.0 {
            return Ok(self.a.transpose() * lambda);
        }
        if alpha == 1.0 {
            return Ok(self.a_hi.transpose() * lambda);
        }
        Ok(self.a.transpose() * lambda + (self.b.transpose() * lambda) * alpha)
    }
}

/// Piecewise-bilinear family over consecutive anchor intervals. Intervals
/// are half-open with the final one closed; at an interior anchor both
/// neighboring segments apply the same operator, so predictions are
/// continuous across the control range.
#[derive(Debug, Clone)]
pub struct LocalizedBilinear {
    segments: Vec<BilinearModel>,
}

impl LocalizedBilinear {
    /// One bilinear segment per consecutive anchor pair of the bank.
    pub fn from_bank(bank: &SwitchedBank) -> Result<Self> {
        let models = bank.models();
        let segments = models
            .windows(2)
            .map(|w| BilinearModel::from_anchors(&w[0], &w[1]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_segments(segments)
    }

    pub fn from_segments(segments: Vec<BilinearModel>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidArgument(
                "localized model needs at least one segment".into(),
            ));
        }
        for pair in segments.windows(2) {
            if pair[0].dict() != pair[1].dict() || pair[0].lag_time_h() != pair[1].lag_time_h() {
                return Err(Error::InvalidArgument(
                    "localized segments must share dictionary and lag".into(),
                ));
            }
            if pair[0].u_hi != pair[1].u_lo {
                return Err(Error::InvalidArgument(format!(
                    "localized segments must tile the control range, got a gap between {} and {}",
                    pair[0].u_hi, pair[1].u_lo
                )));
            }
            // shared anchor must carry the same operator on both sides
            if (&pair[0].a_hi - &pair[1].a).amax() > 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "localized segments disagree at the shared anchor u = {}",
                    pair[1].u_lo
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[BilinearModel] {
        &self.segments
    }

    pub fn dict(&self) -> &Dictionary {
        self.segments[0].dict()
    }

    pub fn lag_time_h(&self) -> f64 {
        self.segments[0].lag_time_h()
    }

    /// Full control range covered by the segments.
    pub fn bounds(&self) -> (f64, f64) {
        (
            self.segments[0].u_lo,
            self.segments[self.segments.len() - 1].u_hi,
        )
    }

    pub fn anchor_controls(&self) -> Vec<f64> {
        let mut anchors: Vec<f64> = self.segments.iter().map(|s| s.u_lo).collect();
        anchors.push(self.segments[self.segments.len() - 1].u_hi);
        anchors
    }

    /// The segment whose half-open interval contains `u` (the last interval
    /// is closed), together with the local interpolation weight.
    pub fn select(&self, u: f64) -> Result<(&BilinearModel, f64)> {
        let (lo, hi) = self.bounds();
        if !u.is_finite() || u < lo || u > hi {
            return Err(Error::ControlOutOfRange { value: u, lo, hi });
        }
        let idx = self
            .segments
            .iter()
            .position(|s| u < s.u_hi)
            .unwrap_or(self.segments.len() - 1);
        let seg = &self.segments[idx];
        Ok((seg, seg.alpha(u)?))
    }

    /// One step through the segment owning `u`.
    pub fn step(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        let (seg, _) = self.select(u)?;
        seg.step(lifted, u)
    }

    pub fn step_control_derivative(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        let (seg, _) = self.select(u)?;
        seg.step_control_derivative(lifted, u)
    }

    pub fn step_adjoint(&self, u: f64, lambda: &DVector<f64>) -> Result<DVector<f64>> {
        let (seg, _) = self.select(u)?;
        seg.step_adjoint(u, lambda)
    }
}

/// Control-affine lifted dynamics usable by the continuous-control solver:
/// a single bilinear interpolant or a localized family.
pub trait BilinearDynamics: Send + Sync {
    fn dict(&self) -> &Dictionary;
    fn lag_time_h(&self) -> f64;
    fn control_bounds(&self) -> (f64, f64);
    /// Anchor control values, low to high (kink locations of the rollout).
    fn anchor_controls(&self) -> Vec<f64>;
    fn step(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>>;
    fn step_control_derivative(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>>;
    fn step_adjoint(&self, u: f64, lambda: &DVector<f64>) -> Result<DVector<f64>>;
}

impl BilinearDynamics for BilinearModel {
    fn dict(&self) -> &Dictionary {
        self.dict()
    }

    fn lag_time_h(&self) -> f64 {
        self.lag_time_h()
    }

    fn control_bounds(&self) -> (f64, f64) {
        self.bounds()
    }

    fn anchor_controls(&self) -> Vec<f64> {
        vec![self.u_lo, self.u_hi]
    }

    fn step(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        BilinearModel::step(self, lifted, u)
    }

    fn step_control_derivative(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        BilinearModel::step_control_derivative(self, lifted, u)
    }

    fn step_adjoint(&self, u: f64, lambda: &DVector<f64>) -> Result<DVector<f64>> {
        BilinearModel::step_adjoint(self, u, lambda)
    }
}

impl BilinearDynamics for LocalizedBilinear {
    fn dict(&self) -> &Dictionary {
        self.dict()
    }

    fn lag_time_h(&self) -> f64 {
        self.lag_time_h()
    }

    fn control_bounds(&self) -> (f64, f64) {
        self.bounds()
    }

    fn anchor_controls(&self) -> Vec<f64> {
        self.anchor_controls()
    }

    fn step(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        LocalizedBilinear::step(self, lifted, u)
    }

    fn step_control_derivative(&self, lifted: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        LocalizedBilinear::step_control_derivative(self, lifted, u)
    }

    fn step_adjoint(&self, u: f64, lambda: &DVector<f64>) -> Result<DVector<f64>> {
        LocalizedBilinear::step_adjoint(self, u, lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Dictionary;
    use crate::edmd::{edmd_fit, SnapshotSet};
    use crate::plant::{LinearTestPlant, Plant};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_from_matrix(dict: &Dictionary, u: f64, m: DMatrix<f64>) -> KoopmanModel {
        KoopmanModel::new(dict.clone(), 0.5, u, m, 1).unwrap()
    }

    /// Fits one model per control value on informative data from the plant.
    fn exact_bank(
        plant: &LinearTestPlant,
        dict: &Dictionary,
        controls: &[f64],
        rng: &mut impl Rng,
    ) -> SwitchedBank {
        let models: Vec<KoopmanModel> = controls
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

    #[test]
    fn identity_operator_step_returns_input() {
        let dict = Dictionary::monomials(2, 1).unwrap();
        let model = model_from_matrix(&dict, 0.0, DMatrix::identity(3, 3));
        let psi = DVector::from_vec(vec![1.0, 0.3, -0.4]);
        assert_eq!(model.step(&psi).unwrap(), psi);
    }

    #[test]
    fn repeated_steps_match_matrix_power_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.5..0.5));
        let model = model_from_matrix(&dict, 0.0, m.clone());
        let psi0 = DVector::from_vec(vec![1.0, 0.7, -0.2]);
        let mut psi = psi0.clone();
        let mut power = DMatrix::identity(3, 3);
        for n in 1..=20 {
            psi = model.step(&psi).unwrap();
            power = &m * power;
            assert!((&psi - &power * &psi0).norm() < 1e-8, "n = {n}");
        }
    }

    #[test]
    fn scalar_half_plant_prediction() {
        let dict = Dictionary::monomials(1, 1).unwrap();
        let model = model_from_matrix(
            &dict,
            0.0,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]),
        );
        let lifted = dict.lift(&DVector::from_vec(vec![2.0])).unwrap();
        let z = dict.project(&model.step(&lifted).unwrap()).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn empty_sequence_predicts_nothing() {
        let dict = Dictionary::monomials(1, 1).unwrap();
        let bank = SwitchedBank::new(vec![
            model_from_matrix(&dict, 0.0, DMatrix::identity(2, 2)),
            model_from_matrix(&dict, 1.0, DMatrix::identity(2, 2)),
        ])
        .unwrap();
        let out = bank.predict(&DVector::from_vec(vec![0.3]), &[]).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn constant_sequence_equals_repeated_single_model_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let plant = LinearTestPlant::random(2, 0.1, 0.8, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let bank = exact_bank(&plant, &dict, &[-0.5, 0.5], &mut rng);
        let z0 = DVector::from_vec(vec![0.4, -0.6]);
        let predicted = bank.predict(&z0, &[1, 1, 1]).unwrap();
        let mut lifted = dict.lift(&z0).unwrap();
        for expected in &predicted {
            lifted = bank.models()[1].step(&lifted).unwrap();
            let z = dict.project(&lifted).unwrap();
            assert_eq!(*expected, z);
        }
    }

    #[test]
    fn alternating_sequence_matches_plant_rollout_in_exact_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let plant = LinearTestPlant::random(2, 0.1, 0.8, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let bank = exact_bank(&plant, &dict, &[-0.5, 0.5], &mut rng);
        let z0 = DVector::from_vec(vec![0.4, -0.6]);
        let seq = [0usize, 1, 0, 1, 1, 0];
        let predicted = bank.predict(&z0, &seq).unwrap();
        let mut y = z0.clone();
        for (n, &j) in seq.iter().enumerate() {
            y = plant
                .step(&y, bank.control_values()[j], plant.dt_sim())
                .unwrap();
            assert!(
                (&predicted[n] - plant.observe(&y)).norm() < 1e-6,
                "step {n}"
            );
        }
    }

    #[test]
    fn relifted_rollout_is_a_distinct_diagnostic() {
        // an operator whose quadratic row is inconsistent with squaring the
        // linear row separates the two rollout semantics
        let dict = Dictionary::monomials(1, 2).unwrap();
        let op = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.1, 0.0, 0.0, 0.3]);
        let bank = SwitchedBank::new(vec![
            model_from_matrix(&dict, 0.0, op.clone()),
            model_from_matrix(&dict, 1.0, op),
        ])
        .unwrap();
        let z0 = DVector::from_vec(vec![2.0]);
        let lifted = bank.predict(&z0, &[0, 0]).unwrap();
        let relifted = bank.predict_relifted(&z0, &[0, 0]).unwrap();
        // first steps agree (both start from a true lift)...
        assert_eq!(lifted[0], relifted[0]);
        // ...but propagating the lifted state is not the same as re-lifting
        assert!((&lifted[1] - &relifted[1]).norm() > 1e-3);
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let dict = Dictionary::monomials(1, 1).unwrap();
        let bank = SwitchedBank::new(vec![
            model_from_matrix(&dict, 0.0, DMatrix::identity(2, 2)),
            model_from_matrix(&dict, 1.0, DMatrix::identity(2, 2)),
        ])
        .unwrap();
        assert!(bank.predict(&DVector::from_vec(vec![0.3]), &[2]).is_err());
    }

    #[test]
    fn bank_constructor_sorts_and_validates() {
        let dict = Dictionary::monomials(1, 1).unwrap();
        let bank = SwitchedBank::new(vec![
            model_from_matrix(&dict, 1.0, DMatrix::identity(2, 2)),
            model_from_matrix(&dict, -1.0, DMatrix::identity(2, 2)),
        ])
        .unwrap();
        assert_eq!(bank.control_values(), vec![-1.0, 1.0]);
        assert!(
            SwitchedBank::new(vec![model_from_matrix(&dict, 0.0, DMatrix::identity(2, 2))])
                .is_err()
        );
        assert!(SwitchedBank::new(vec![
            model_from_matrix(&dict, 0.5, DMatrix::identity(2, 2)),
            model_from_matrix(&dict, 0.5, DMatrix::identity(2, 2)),
        ])
        .is_err());
    }

    #[test]
    fn bilinear_step_is_exact_at_the_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let op_lo = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let op_hi = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let lo = model_from_matrix(&dict, -1.0, op_lo.clone());
        let hi = model_from_matrix(&dict, 1.0, op_hi.clone());
        let bl = BilinearModel::from_anchors(&lo, &hi).unwrap();
        let psi = DVector::from_vec(vec![1.0, 0.3, -0.8]);
        assert_eq!(bl.step(&psi, -1.0).unwrap(), &op_lo * &psi);
        assert_eq!(bl.step(&psi, 1.0).unwrap(), &op_hi * &psi);
        // midpoint averages the endpoint predictions
        let mid = bl.step(&psi, 0.0).unwrap();
        let avg = (&op_lo * &psi + &op_hi * &psi) * 0.5;
        assert!((mid - avg).amax() < 1e-12);
        assert!(bl.step(&psi, 1.5).is_err());
        assert!(bl.step(&psi, -1.5).is_err());
    }

    #[test]
    fn bilinear_output_is_affine_in_the_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let lo = model_from_matrix(
            &dict,
            0.0,
            DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)),
        );
        let hi = model_from_matrix(
            &dict,
            2.0,
            DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)),
        );
        let bl = BilinearModel::from_anchors(&lo, &hi).unwrap();
        let psi = DVector::from_vec(vec![1.0, -0.4, 0.9]);
        let f = |u: f64| bl.step(&psi, u).unwrap();
        // three-point collinearity: f(1.0) = (f(0.5) + f(1.5)) / 2
        let lhs = f(1.0);
        let rhs = (f(0.5) + f(1.5)) * 0.5;
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn identical_anchor_operators_make_control_irrelevant() {
        let dict = Dictionary::monomials(1, 1).unwrap();
        let op = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 0.7]);
        let lo = model_from_matrix(&dict, -1.0, op.clone());
        let hi = model_from_matrix(&dict, 1.0, op.clone());
        let bl = BilinearModel::from_anchors(&lo, &hi).unwrap();
        assert!(bl.b().amax() == 0.0);
        let psi = DVector::from_vec(vec![1.0, 0.5]);
        let at_m1 = bl.step(&psi, -1.0).unwrap();
        let at_half = bl.step(&psi, 0.5).unwrap();
        assert!((at_m1 - at_half).amax() < 1e-15);
    }

    #[test]
    fn anchor_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let dict = Dictionary::monomials(1, 1).unwrap();
        let lo = model_from_matrix(
            &dict,
            -1.0,
            DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)),
        );
        let hi = model_from_matrix(
            &dict,
            1.0,
            DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)),
        );
        let ab = BilinearModel::from_anchors(&lo, &hi).unwrap();
        let ba = BilinearModel::from_anchors(&hi, &lo).unwrap();
        assert_eq!(ab.bounds(), ba.bounds());
        assert_eq!(ab.a(), ba.a());
        assert_eq!(ab.b(), ba.b());
        assert!(BilinearModel::from_anchors(&lo, &lo).is_err());
    }

    #[test]
    fn bilinear_matches_plant_observation_across_the_range() {
        // Lemma-1 regime: identity observation, dynamics linear in u,
        // anchors fitted to numerical exactness
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let plant = LinearTestPlant::random(2, 0.1, 0.85, &mut rng);
        let dict = Dictionary::monomials(2, 1).unwrap();
        let bank = exact_bank(&plant, &dict, &[-1.0, 1.0], &mut rng);
        let bl = BilinearModel::from_anchors(&bank.models()[0], &bank.models()[1]).unwrap();
        let z0 = DVector::from_vec(vec![0.3, -0.5]);
        let lifted = dict.lift(&z0).unwrap();
        for i in 0..=10 {
            let u = -1.0 + 0.2 * i as f64;
            let predicted = dict.project(&bl.step(&lifted, u).unwrap()).unwrap();
            let actual = plant.observe(&plant.step(&z0, u, plant.dt_sim()).unwrap());
            assert!((predicted - actual).norm() < 1e-6, "u = {u}");
        }
    }

    #[test]
    fn localized_selection_follows_half_open_intervals() {
        let dict = Dictionary::monomials(1, 1).unwrap();
        let ops: Vec<DMatrix<f64>> = (0..3)
            .map(|i| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.1 * i as f64, 0.5]))
            .collect();
        let bank = SwitchedBank::new(vec![
            model_from_matrix(&dict, -2.0, ops[0].clone()),
            model_from_matrix(&dict, 0.0, ops[1].clone()),
            model_from_matrix(&dict, 2.0, ops[2].clone()),
        ])
        .unwrap();
        let local = LocalizedBilinear::from_bank(&bank).unwrap();

        let (seg, alpha) = local.select(-2.0).unwrap();
        assert_eq!(seg.bounds(), (-2.0, 0.0));
        assert_eq!(alpha, 0.0);

        let (seg, alpha) = local.select(0.0).unwrap();
        assert_eq!(seg.bounds(), (0.0, 2.0));
        assert_eq!(alpha, 0.0);

        let (seg, alpha) = local.select(2.0).unwrap();
        assert_eq!(seg.bounds(), (0.0, 2.0));
        assert_eq!(alpha, 1.0);

        assert!(local.select(2.5).is_err());
        assert!(local.select(-2.5).is_err());
    }

    #[test]
    fn localized_prediction_is_continuous_at_interior_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let dict = Dictionary::monomials(1, 1).unwrap();
        let models: Vec<KoopmanModel> = [-2.0, 0.0, 2.0]
            .iter()
            .map(|&u| {
                model_from_matrix(
                    &dict,
                    u,
                    DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let bank = SwitchedBank::new(models).unwrap();
        let local = LocalizedBilinear::from_bank(&bank).unwrap();
        let psi = DVector::from_vec(vec![1.0, 0.7]);
        // left segment at alpha = 1 and right segment at alpha = 0 apply the
        // same stored operator, bit for bit
        let left = local.segments()[0].step(&psi, 0.0).unwrap();
        let right = local.segments()[1].step(&psi, 0.0).unwrap();
        assert_eq!(left, right);
        // and both agree with the plain switched prediction at that anchor
        let z0 = DVector::from_vec(vec![0.7]);
        let switched = bank.predict(&z0, &[1]).unwrap();
        let lifted = dict.lift(&z0).unwrap();
        let continuous = dict.project(&local.step(&lifted, 0.0).unwrap()).unwrap();
        assert_eq!(switched[0], continuous);
    }

    #[test]
    fn bilinear_at_anchors_reproduces_switched_prediction_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let plant = LinearTestPlant::random(2, 0.1, 0.8, &mut rng);
        let dict = Dictionary::monomials(2, 2).unwrap();
        let bank = exact_bank(&plant, &dict, &[-1.0, 0.0, 1.0], &mut rng);
        let local = LocalizedBilinear::from_bank(&bank).unwrap();
        let z0 = DVector::from_vec(vec![0.2, 0.6]);
        for (j, &u) in bank.control_values().iter().enumerate() {
            let switched = bank.predict(&z0, &[j]).unwrap();
            let lifted = dict.lift(&z0).unwrap();
            let continuous = dict.project(&local.step(&lifted, u).unwrap()).unwrap();
            assert_eq!(switched[0], continuous, "anchor {u}");
        }
    }
}
