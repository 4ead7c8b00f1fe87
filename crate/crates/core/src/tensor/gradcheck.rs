use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than
/// relatively, so round-off on near-zero entries does not dominate.
const DENOM_FLOOR: f64 = 1e-3;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub tolerance: f64,
    /// Coordinates whose error exceeds the tolerance.
    pub failures: Vec<usize>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_relative_error.is_finite()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Checks the tape gradient of a scalar function `f` at `input` against
/// central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn gradcheck<F>(f: F, input: &Tensor<f64>, epsilon: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y);
        if v.numel() != 1 {
            return Err(Error::invalid("gradcheck", format!("function must be scalar, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };
    compare(eval, analytic, input, epsilon, tolerance)
}

/// Same comparison for an arbitrary value function and a caller-supplied
/// analytic gradient.
pub fn gradcheck_fn<V>(value: V, analytic: Vec<f64>, input: &Tensor<f64>, epsilon: f64, tolerance: f64) -> Result<GradcheckReport>
where
    V: Fn(&Tensor<f64>) -> Result<f64>,
{
    if analytic.len() != input.numel() {
        return Err(Error::shape("gradcheck", &[input.numel()], &[analytic.len()]));
    }
    compare(value, analytic, input, epsilon, tolerance)
}

fn compare<V>(value: V, analytic: Vec<f64>, input: &Tensor<f64>, epsilon: f64, tolerance: f64) -> Result<GradcheckReport>
where
    V: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = input.clone();
    probe.zero_grad();
    let mut numeric = Vec::with_capacity(input.numel());
    for i in 0..input.numel() {
        let orig = input.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * epsilon));
    }
    let mut max_relative_error = 0.0f64;
    let mut worst_index = 0;
    let mut failures = Vec::new();
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > max_relative_error || e.is_nan() {
            max_relative_error = if e.is_nan() { f64::NAN } else { e };
            worst_index = i;
        }
        if !(e < tolerance) {
            failures.push(i);
        }
    }
    Ok(GradcheckReport {
        analytic,
        numeric,
        max_relative_error,
        worst_index,
        tolerance,
        failures,
    })
}
