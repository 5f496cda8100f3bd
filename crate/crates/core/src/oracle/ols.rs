use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An ordinary least squares fit on case-level data.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub xtx_inverse: DMatrix<f64>,
    /// `(X'X)^{-1}` scaled by the MSE.
    pub cov: DMatrix<f64>,
    pub mse: f64,
    pub dfe: usize,
    pub residuals: DVector<f64>,
}

/// Least squares via Householder QR of `x`.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Domain(format!("{n} design rows but {} outcomes", y.len())));
    }
    if n <= p {
        return Err(Error::Singular(format!("{n} cases cannot support {p} coefficients with error df")));
    }
    if p == 0 {
        return Err(Error::Domain("design matrix has no columns".into()));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..p).any(|j| !(r[(j, j)].abs() > 1e-10 * scale)) {
        return Err(Error::Singular("design matrix is rank deficient".into()));
    }
    let qty = qr.q().transpose() * y;
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let xtx_inverse = &r_inv * r_inv.transpose();
    let xtx_inverse = (&xtx_inverse + xtx_inverse.transpose()) * 0.5;
    let residuals = y - x * &coefficients;
    let dfe = n - p;
    let mse = residuals.norm_squared() / dfe as f64;
    Ok(OlsFit {
        cov: &xtx_inverse * mse,
        coefficients,
        xtx_inverse,
        mse,
        dfe,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_data() {
        let x = DMatrix::from_fn(10, 3, |i, j| if j == 0 { 1.0 } else { ((i * (j + 2)) % 7) as f64 + 0.5 * j as f64 });
        let beta = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let y = &x * &beta;
        let fit = ols_fit(&x, &y).unwrap();
        assert!((fit.coefficients - beta).amax() < 1e-10);
        assert!(fit.mse < 1e-20);
    }

    #[test]
    fn intercept_only_is_mean_and_variance() {
        let y = DVector::from_vec(vec![2.0, 4.0, 9.0, 1.0]);
        let fit = ols_fit(&DMatrix::from_element(4, 1, 1.0), &y).unwrap();
        assert!((fit.coefficients[0] - 4.0).abs() < 1e-14);
        // sample variance with n - 1 denominator
        assert!((fit.mse - 38.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency() {
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        assert!(matches!(ols_fit(&x, &DVector::zeros(6)), Err(Error::Singular(_))));
    }
}
