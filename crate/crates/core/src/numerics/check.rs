//! Finite-difference gradient checking.

use super::{MlpParams, ParamTensors};

/// Central finite differences of `f` w.r.t. every parameter.
pub fn finite_difference(params: &MlpParams<f64>, f: &dyn Fn(&MlpParams<f64>) -> f64, h: f64) -> MlpParams<f64> {
    let mut out = params.zeros_like();
    let mut p = params.clone();
    let n_tensors = p.tensors().len();
    for ti in 0..n_tensors {
        let len = p.tensors()[ti].len();
        for j in 0..len {
            let orig = p.tensors()[ti][j];
            p.tensors_mut()[ti][j] = orig + h;
            let plus = f(&p);
            p.tensors_mut()[ti][j] = orig - h;
            let minus = f(&p);
            p.tensors_mut()[ti][j] = orig;
            out.tensors_mut()[ti][j] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

/// Max over entries of |a-b| / max(|a|, |b|, floor).
pub fn max_rel_err(a: &MlpParams<f64>, b: &MlpParams<f64>, floor: f64) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(floor)))
        .fold(0.0, f64::max)
}
