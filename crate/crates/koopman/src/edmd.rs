//! EDMD fitting of finite-dimensional Koopman operator approximations,
//! plus the running-moment accumulator used for streaming updates.
//!
//! A batch fit solves `U^T = Psi_Ztilde Psi_Z^+` by SVD. The streaming path
//! keeps only the mean outer-product matrices `A` and `G` and recovers the
//! operator on demand through `U^T = A G^+`, so snapshot pairs that have been
//! absorbed never need to be stored.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::linalg;

/// Paired observation matrices recorded at a fixed lag time under one
/// constant control value.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    lag_time_h: f64,
    control_value: f64,
    z: DMatrix<f64>,
    ztilde: DMatrix<f64>,
}

impl SnapshotSet {
    pub fn new(
        lag_time_h: f64,
        control_value: f64,
        z: DMatrix<f64>,
        ztilde: DMatrix<f64>,
    ) -> Result<Self> {
        if !(lag_time_h > 0.0) || !lag_time_h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lag time must be positive and finite, got {lag_time_h}"
            )));
        }
        if !control_value.is_finite() {
            return Err(Error::NonFinite("control value".into()));
        }
        if z.shape() != ztilde.shape() {
            return Err(Error::InvalidArgument(format!(
                "snapshot matrices must share a shape, got {:?} and {:?}",
                z.shape(),
                ztilde.shape()
            )));
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "snapshot set needs at least one pair".into(),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) || ztilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("snapshot data".into()));
        }
        Ok(Self {
            lag_time_h,
            control_value,
            z,
            ztilde,
        })
    }

    pub fn from_pairs(
        lag_time_h: f64,
        control_value: f64,
        pairs: &[(DVector<f64>, DVector<f64>)],
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "snapshot set needs at least one pair".into(),
            ));
        }
        let q = pairs[0].0.len();
        let mut z = DMatrix::zeros(q, pairs.len());
        let mut ztilde = DMatrix::zeros(q, pairs.len());
        for (i, (zi, zt)) in pairs.iter().enumerate() {
            if zi.len() != q || zt.len() != q {
                return Err(Error::Dimension {
                    what: "snapshot pair",
                    expected: q,
                    got: zi.len().max(zt.len()),
                });
            }
            z.set_column(i, zi);
            ztilde.set_column(i, zt);
        }
        Self::new(lag_time_h, control_value, z, ztilde)
    }

    pub fn obs_dim(&self) -> usize {
        self.z.nrows()
    }

    /// Number of snapshot pairs, m.
    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false // m >= 1 by construction
    }

    pub fn lag_time_h(&self) -> f64 {
        self.lag_time_h
    }

    pub fn control_value(&self) -> f64 {
        self.control_value
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn ztilde(&self) -> &DMatrix<f64> {
        &self.ztilde
    }

    /// Uniform subsample without replacement, keeping column order.
    /// Returns a clone when `max_pairs >= len`.
    pub fn subsample(&self, max_pairs: usize, rng: &mut impl Rng) -> Result<Self> {
        if max_pairs == 0 {
            return Err(Error::InvalidArgument(
                "subsample needs max_pairs >= 1".into(),
            ));
        }
        let m = self.len();
        if max_pairs >= m {
            return Ok(self.clone());
        }
        // partial Fisher-Yates over the index set
        let mut idx: Vec<usize> = (0..m).collect();
        for i in 0..max_pairs {
            let j = rng.random_range(i..m);
            idx.swap(i, j);
        }
        let mut keep = idx[..max_pairs].to_vec();
        keep.sort_unstable();
        let mut z = DMatrix::zeros(self.obs_dim(), max_pairs);
        let mut ztilde = DMatrix::zeros(self.obs_dim(), max_pairs);
        for (col, &i) in keep.iter().enumerate() {
            z.set_column(col, &self.z.column(i));
            ztilde.set_column(col, &self.ztilde.column(i));
        }
        Self::new(self.lag_time_h, self.control_value, z, ztilde)
    }
}

/// Finite-dimensional Koopman operator approximation for one constant input.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    dict: Dictionary,
    lag_time_h: f64,
    control_value: f64,
    u_transpose: DMatrix<f64>,
    sample_count_m: usize,
}

impl KoopmanModel {
    pub fn new(
        dict: Dictionary,
        lag_time_h: f64,
        control_value: f64,
        u_transpose: DMatrix<f64>,
        sample_count_m: usize,
    ) -> Result<Self> {
        let k = dict.size();
        if u_transpose.shape() != (k, k) {
            return Err(Error::Dimension {
                what: "operator matrix",
                expected: k,
                got: u_transpose.nrows().max(u_transpose.ncols()),
            });
        }
        if u_transpose.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator matrix".into()));
        }
        if sample_count_m == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be at least 1".into(),
            ));
        }
        Ok(Self {
            dict,
            lag_time_h,
            control_value,
            u_transpose,
            sample_count_m,
        })
    }

    pub fn dict(&self) -> &Dictionary {
        &self.dict
    }

    pub fn lag_time_h(&self) -> f64 {
        self.lag_time_h
    }

    pub fn control_value(&self) -> f64 {
        self.control_value
    }

    /// The fitted matrix acting on lifted vectors: `psi_next = U^T psi`.
    pub fn u_transpose(&self) -> &DMatrix<f64> {
        &self.u_transpose
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count_m
    }

    /// Lifted-space dimension k.
    pub fn lift_dim(&self) -> usize {
        self.dict.size()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Singular values at or below `rank_rtol * sigma_max` are treated as
    /// zero when pseudoinverting.
    pub rank_rtol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rank_rtol: linalg::DEFAULT_RANK_RTOL,
        }
    }
}

/// Lifts every column of an observation matrix.
pub fn lift_columns(dict: &Dictionary, obs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(dict.size(), obs.ncols());
    let mut zbuf = DVector::zeros(obs.nrows());
    let mut lbuf = DVector::zeros(dict.size());
    for j in 0..obs.ncols() {
        zbuf.copy_from(&obs.column(j));
        dict.lift_into(&zbuf, &mut lbuf)?;
        out.set_column(j, &lbuf);
    }
    Ok(out)
}

/// Batch EDMD: the minimizer of `||Psi_Ztilde - M Psi_Z||_F` with minimum
/// norm in the rank-deficient case.
pub fn edmd_fit(data: &SnapshotSet, dict: &Dictionary) -> Result<KoopmanModel> {
    edmd_fit_with(data, dict, FitOptions::default())
}

pub fn edmd_fit_with(
    data: &SnapshotSet,
    dict: &Dictionary,
    opts: FitOptions,
) -> Result<KoopmanModel> {
    if data.obs_dim() != dict.obs_dim() {
        return Err(Error::Dimension {
            what: "snapshot observation",
            expected: dict.obs_dim(),
            got: data.obs_dim(),
        });
    }
    let psi_z = lift_columns(dict, data.z())?;
    let psi_zt = lift_columns(dict, data.ztilde())?;
    let u_t = linalg::lstsq_min_norm(&psi_zt, &psi_z, opts.rank_rtol)?;
    KoopmanModel::new(
        dict.clone(),
        data.lag_time_h(),
        data.control_value(),
        u_t,
        data.len(),
    )
}

/// Running mean outer-product matrices enabling incremental refits:
/// `A = mean(psi(ztilde) psi(z)^T)` and `G = mean(psi(z) psi(z)^T)`.
#[derive(Debug, Clone)]
pub struct OnlineAccumulator {
    dict: Dictionary,
    lag_time_h: f64,
    control_value: f64,
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    m: usize,
}

impl OnlineAccumulator {
    /// Builds the accumulator from a batch of snapshot pairs.
    pub fn from_snapshots(data: &SnapshotSet, dict: &Dictionary) -> Result<Self> {
        if data.obs_dim() != dict.obs_dim() {
            return Err(Error::Dimension {
                what: "snapshot observation",
                expected: dict.obs_dim(),
                got: data.obs_dim(),
            });
        }
        let psi_z = lift_columns(dict, data.z())?;
        let psi_zt = lift_columns(dict, data.ztilde())?;
        let m = data.len() as f64;
        let a = &psi_zt * psi_z.transpose() / m;
        let g = &psi_z * psi_z.transpose() / m;
        Ok(Self {
            dict: dict.clone(),
            lag_time_h: data.lag_time_h(),
            control_value: data.control_value(),
            a,
            g,
            m: data.len(),
        })
    }

    pub fn dict(&self) -> &Dictionary {
        &self.dict
    }

    pub fn lag_time_h(&self) -> f64 {
        self.lag_time_h
    }

    pub fn control_value(&self) -> f64 {
        self.control_value
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Effective sample count m.
    pub fn sample_count(&self) -> usize {
        self.m
    }

    /// Absorbs one new snapshot pair with integer weight `weight_q >= 1`:
    /// `A <- (m A + q psi(ztilde) psi(z)^T) / (m + q)`, same for `G`,
    /// and `m <- m + q`.
    pub fn update(
        &mut self,
        z_new: &DVector<f64>,
        ztilde_new: &DVector<f64>,
        weight_q: usize,
    ) -> Result<()> {
        if weight_q == 0 {
            return Err(Error::InvalidArgument(
                "update weight must be at least 1".into(),
            ));
        }
        let psi_z = self.dict.lift(z_new)?;
        let psi_zt = self.dict.lift(ztilde_new)?;
        let mf = self.m as f64;
        let qf = weight_q as f64;
        let denom = mf + qf;
        self.a = (&self.a * mf + &psi_zt * psi_z.transpose() * qf) / denom;
        self.g = (&self.g * mf + &psi_z * psi_z.transpose() * qf) / denom;
        self.m += weight_q;
        Ok(())
    }

    /// Recovers the operator from the stored moments: `U^T = A G^+`.
    pub fn refit(&self) -> Result<KoopmanModel> {
        self.refit_with(FitOptions::default())
    }

    pub fn refit_with(&self, opts: FitOptions) -> Result<KoopmanModel> {
        if self.a.iter().any(|v| !v.is_finite()) || self.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("accumulator state".into()));
        }
        let g_pinv = linalg::pinv(&self.g, opts.rank_rtol)?;
        KoopmanModel::new(
            self.dict.clone(),
            self.lag_time_h,
            self.control_value,
            &self.a * g_pinv,
            self.m,
        )
    }
}

/// Update weight giving a new sample a prescribed fractional impact:
/// `q = floor(m eps / (1 - eps))`, clamped below at 1.
pub fn weight_from_fraction(m: usize, epsilon: f64) -> Result<usize> {
    if m == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let q = ((m as f64) * epsilon / (1.0 - epsilon)).floor() as usize;
    Ok(q.max(1))
}
