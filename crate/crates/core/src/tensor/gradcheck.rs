use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// derivative is zero are judged on absolute error instead of amplified noise.
pub const REL_ERR_FLOOR: Scalar = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: Scalar,
    pub max_abs_err: Scalar,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: Scalar,
    pub pass: bool,
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x+εe) − f(x−εe)) / 2ε` over every coordinate of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: Scalar, tol: Scalar) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    gradcheck_at(f, x, eps, tol, &coords)
}

/// [`gradcheck`] restricted to the given flat coordinates.
pub fn gradcheck_at<F>(f: F, x: &Tensor, eps: Scalar, tol: Scalar, coords: &[usize]) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("gradcheck eps must be > 0, got {eps}")));
    }
    let eval = |point: &Tensor| -> Result<Scalar> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        Ok(value.item())
    };
    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    central_difference_check(eval, x, &analytic, eps, tol, coords)
}

/// Shared comparison loop: `eval` computes the scalar objective at a point,
/// `analytic` is the gradient under test.
pub(crate) fn central_difference_check(
    mut eval: impl FnMut(&Tensor) -> Result<Scalar>,
    x: &Tensor,
    analytic: &Tensor,
    eps: Scalar,
    tol: Scalar,
    coords: &[usize],
) -> Result<GradcheckReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("gradcheck eps must be > 0, got {eps}")));
    }
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        checked: 0,
        tol,
        pass: true,
    };
    let mut point = x.clone();
    for &i in coords {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let plus = eval(&point)?;
        point.data_mut()[i] = orig - eps;
        let minus = eval(&point)?;
        point.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.checked += 1;
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn linear_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let r = gradcheck(|t, v| t.sum(v), &x, 1e-5, 1e-9).unwrap();
        assert!(r.pass, "{r:?}");

        // Dyadic inputs and step: every perturbation and sum is exact.
        let x = Tensor::new(&[4], vec![0.5, -1.25, 3.0, 0.0]).unwrap();
        let r = gradcheck(|t, v| t.sum(v), &x, (2.0 as Scalar).powi(-17), 0.0).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn zero_eps_is_rejected() {
        let x = Tensor::zeros(&[2]);
        assert!(matches!(
            gradcheck(|t, v| t.sum(v), &x, 0.0, 1e-4),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn nondeterministic_function_is_detected() {
        let counter = Cell::new(0.0);
        let x = Tensor::ones(&[2]);
        let r = gradcheck(
            |t, v| {
                counter.set(counter.get() + 1.0);
                let s = t.sum(v)?;
                t.add_scalar(s, counter.get())
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonDeterministic)));
    }

    #[test]
    fn three_op_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let r = gradcheck(
            |t, v| {
                let wv = t.constant(w.clone());
                let h = t.matmul(v, wv)?;
                let s = t.softmax(h)?;
                let g = t.gelu(s)?;
                t.sum(g)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }
}
