use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Truncated Taylor series `sum_{k=0}^{order} A^k / k!`.
pub fn taylor_matrix_exp(a: &DMatrix<f64>, order: usize) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if order == 0 {
        return Err(Error::InvalidArgument("Taylor order must be at least 1".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix exponential input"));
    }
    let d = a.nrows();
    let mut term = DMatrix::<f64>::identity(d, d);
    let mut sum = term.clone();
    for k in 1..=order {
        term = &term * a / k as f64;
        sum += &term;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Scaling and squaring with a long Taylor tail; test-only reference.
    fn expm_reference(a: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = a.abs().row_sum().max();
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let scaled = a / 2f64.powi(s);
        let mut e = taylor_matrix_exp(&scaled, 24).unwrap();
        for _ in 0..s {
            e = &e * &e;
        }
        e
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let e = taylor_matrix_exp(&DMatrix::zeros(3, 3), 5).unwrap();
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn nilpotent_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = taylor_matrix_exp(&a, 5).unwrap();
        assert_eq!(e, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
    }

    #[test]
    fn diagonal_matches_scalar_exponentials() {
        let diag = [0.1, -0.2, 0.05];
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&diag));
        let e = taylor_matrix_exp(&a, 5).unwrap();
        let reference = expm_reference(&a);
        for (i, d) in diag.iter().enumerate() {
            assert!((reference[(i, i)] - d.exp()).abs() < 1e-14);
            // Lagrange remainder of the order-5 series.
            let bound = d.abs().powi(6) / 720.0 * d.max(0.0).exp();
            assert!((e[(i, i)] - reference[(i, i)]).abs() <= bound);
        }
        assert!((e[(0, 0)] - reference[(0, 0)]).abs() < 1e-8);
        assert!((e[(2, 2)] - reference[(2, 2)]).abs() < 1e-8);
        assert!((e[(1, 1)] - reference[(1, 1)]).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            taylor_matrix_exp(&DMatrix::zeros(2, 3), 5),
            Err(Error::Dimension(_))
        ));
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(taylor_matrix_exp(&a, 5), Err(Error::NonFinite(_))));
        assert!(taylor_matrix_exp(&DMatrix::zeros(2, 2), 0).is_err());
    }
}
