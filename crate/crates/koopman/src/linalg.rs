//! SVD-backed least-squares helpers shared by the fitting routines.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default relative cutoff on singular values when ranking pseudoinverses.
pub const DEFAULT_RANK_RTOL: f64 = 1e-10;

/// Minimum-norm solution `B` of `min ||y - B x||_F`, i.e. `B = y x^+`.
///
/// The pseudoinverse is taken through an SVD of `x`; singular values at or
/// below `rtol * sigma_max` are treated as zero.
pub(crate) fn lstsq_min_norm(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    rtol: f64,
) -> Result<DMatrix<f64>> {
    if y.ncols() != x.ncols() {
        return Err(Error::Dimension {
            what: "least-squares column counts",
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !smax.is_finite() {
        return Err(Error::Numerical(
            "SVD produced non-finite singular values".into(),
        ));
    }
    let cut = rtol * smax;
    // y V diag(1/s) U^T, dropping directions with s <= cut.
    let mut yv = y * v_t.transpose();
    for (j, &s) in svd.singular_values.iter().enumerate() {
        let f = if s > cut && s > 0.0 { 1.0 / s } else { 0.0 };
        yv.column_mut(j).scale_mut(f);
    }
    Ok(yv * u.transpose())
}

/// Moore-Penrose pseudoinverse with the same cutoff convention as
/// [`lstsq_min_norm`].
pub(crate) fn pinv(a: &DMatrix<f64>, rtol: f64) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !smax.is_finite() {
        return Err(Error::Numerical(
            "SVD produced non-finite singular values".into(),
        ));
    }
    let cut = rtol * smax;
    let mut v = v_t.transpose();
    for (j, &s) in svd.singular_values.iter().enumerate() {
        let f = if s > cut && s > 0.0 { 1.0 / s } else { 0.0 };
        v.column_mut(j).scale_mut(f);
    }
    Ok(v * u.transpose())
}
