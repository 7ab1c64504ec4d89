use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Below this magnitude the comparison falls back to absolute error.
const ABS_FLOOR: f64 = 1e-8;

/// Relative difference with an absolute fallback for tiny magnitudes.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Evaluates `f` on a fresh graph with `input` as the only parameter.
fn eval<F>(f: &F, input: &Tensor<f64>) -> Result<(Graph<f64>, Var, Var)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let y = f(&mut g, x)?;
    Ok((g, x, y))
}

/// Compares the reverse-mode gradient of the scalar function `f` at `input`
/// against central differences with step `epsilon`, returning the worst
/// per-coordinate relative error.
pub fn check_gradient<F>(f: F, input: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let (g, x, y) = eval(&f, input)?;
    let grads = g.backward(y)?;
    let analytic = grads.wrt(x).data().to_vec();

    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let (gp, _, yp) = eval(&f, &probe)?;
        let plus = gp.value(yp).item();
        probe.data_mut()[i] = orig - epsilon;
        let (gm, _, ym) = eval(&f, &probe)?;
        let minus = gm.value(ym).item();
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
