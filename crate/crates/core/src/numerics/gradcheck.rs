use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares the tape gradient of a scalar function against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, elementwise. Returns the maximum
/// relative error `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |p: &Tensor| -> Result<f64> {
        let tape = Tape::inference();
        let v = tape.constant(p.clone());
        f(&tape, v)?.item()
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Axis;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap();
        let err = grad_check(|_, v| Ok(v.mul(v)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn log_softmax_pick() {
        let x = Tensor::row(vec![0.1, -0.4, 1.3, 0.0]);
        let err = grad_check(
            |_, v| Ok(v.log_softmax(Axis::Cols)?.pick(&[(0, 2)])?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
