//! Subspace overlap between a specialized `A` and a frozen reference `A`.

use crate::error::{Error, Result};
use crate::numeric::{frobenius_sq, matmul_nt, Matrix, NodeId, Tape};

/// `A_spec · A_refᵀ` (`r x r`): zero exactly when every row of one is
/// orthogonal to every row of the other.
pub fn orthogonality_matrix(a_spec: &Matrix, a_ref: &Matrix) -> Result<Matrix> {
    if a_spec.cols() != a_ref.cols() {
        return Err(Error::Dimension(format!(
            "orthogonality of A {:?} against A {:?}",
            a_spec.shape(),
            a_ref.shape()
        )));
    }
    matmul_nt(a_spec, a_ref)
}

/// Squared Frobenius norm of [`orthogonality_matrix`].
pub fn orthogonality_loss(a_spec: &Matrix, a_ref: &Matrix) -> Result<f64> {
    frobenius_sq(&orthogonality_matrix(a_spec, a_ref)?)
}

/// Records the loss on a tape with `a_ref` as a constant.
pub fn orthogonality_loss_node(tape: &mut Tape, a_spec: NodeId, a_ref: &Matrix) -> Result<NodeId> {
    if tape.value(a_spec).cols() != a_ref.cols() {
        return Err(Error::Dimension(format!(
            "orthogonality of A {:?} against A {:?}",
            tape.value(a_spec).shape(),
            a_ref.shape()
        )));
    }
    let c = tape.constant(a_ref.clone());
    let o = tape.matmul_nt(a_spec, c)?;
    Ok(tape.frobenius_sq(o))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_rows_give_zero() {
        let a = Matrix::from_rows(&[&[1.0, 0.0]]);
        let c = Matrix::from_rows(&[&[0.0, 1.0]]);
        assert!(orthogonality_matrix(&a, &c).unwrap().is_zero());
        assert_eq!(orthogonality_loss(&Matrix::from_rows(&[&[3.0, 4.0]]), &Matrix::zeros(1, 2)).unwrap(), 0.0);
    }

    #[test]
    fn identity_against_itself() {
        let i = Matrix::identity(2);
        assert_eq!(orthogonality_loss(&i, &i).unwrap(), 2.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let a = Matrix::from_rows(&[&[s, s, 0.0], &[0.0, 0.0, 1.0]]);
        let g = orthogonality_matrix(&a, &a).unwrap();
        assert!((g.get(0, 0) - 1.0).abs() < 1e-12 && (g.get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_of_degree_two() {
        let a = Matrix::from_rows(&[&[0.3, -1.0, 2.0], &[0.5, 0.1, 0.0]]);
        let c = Matrix::from_rows(&[&[1.0, 2.0, 0.5]]);
        let base = orthogonality_loss(&a, &c).unwrap();
        assert!((orthogonality_loss(&a.scaled(3.0), &c).unwrap() - 9.0 * base).abs() < 1e-9 * base);
    }

    #[test]
    fn column_mismatch_is_dimension_error() {
        assert!(matches!(orthogonality_loss(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)), Err(Error::Dimension(_))));
    }
}
