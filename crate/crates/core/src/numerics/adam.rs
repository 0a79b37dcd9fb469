use super::{MlpParams, NumericsError, Result, Scalar};

/// Anything that exposes its parameters as a fixed list of flat tensors.
pub trait ParamTensors<T> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;
}

impl<T: Scalar> ParamTensors<T> for MlpParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl<T: Scalar> ParamTensors<T> for Vec<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.as_mut_slice()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamTensors<T>>(params: &P, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar, P: ParamTensors<T>>(params: &mut P, grads: &P, state: &mut AdamState<T>) -> Result<()> {
    let gs = grads.tensors();
    let ps = params.tensors_mut();
    if ps.len() != state.m.len() || gs.len() != ps.len() {
        return Err(NumericsError::Dimension {
            context: "adam tensor count",
            expected: state.m.len(),
            got: ps.len().min(gs.len()),
        });
    }
    for ((p, g), m) in ps.iter().zip(&gs).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(NumericsError::Dimension {
                context: "adam tensor shape",
                expected: m.len(),
                got: p.len(),
            });
        }
    }
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let bc1 = T::one() - T::lit(c.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::lit(c.beta2.powi(state.t as i32));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
