//! Parameter storage, layer builders with seeded Kaiming initialization, and
//! the ADAM optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kern;
use crate::tensor::{Conv2dSpec, NodeId, Tape};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> usize {
        let n: usize = shape.iter().product();
        assert_eq!(values.len(), n);
        self.params.push(Param { name: name.into(), shape, values, grad: vec![0.0; n] });
        self.params.len() - 1
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

/// Kaiming-uniform fan-in initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
fn kaiming_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        d_in: usize,
        d_out: usize,
        name: &str,
    ) -> Self {
        let w = set.push(
            format!("{name}.weight"),
            vec![d_out, d_in],
            kaiming_uniform(rng, d_out * d_in, d_in),
        );
        let b = set.push(format!("{name}.bias"), vec![d_out], vec![0.0; d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: NodeId) -> NodeId {
        self.forward_in(tape, 0, set, x)
    }

    pub fn forward_in(&self, tape: &mut Tape, group: usize, set: &ParamSet, x: NodeId) -> NodeId {
        let w = tape.param_in(group, set, self.w);
        let b = tape.param_in(group, set, self.b);
        tape.linear(x, w, b)
    }

    /// Forward through frozen weights: gradient passes to the input only.
    pub fn forward_frozen(&self, tape: &mut Tape, set: &ParamSet, x: NodeId) -> NodeId {
        let w = tape.frozen_param(set, self.w);
        let b = tape.frozen_param(set, self.b);
        tape.linear(x, w, b)
    }

    /// Tape-free forward for frozen networks: x is [batch, d_in] row-major.
    pub fn forward_plain(&self, set: &ParamSet, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.d_out];
        for row in out.chunks_exact_mut(self.d_out) {
            row.copy_from_slice(&set.params[self.b].values);
        }
        kern::matmul_abt(x, &set.params[self.w].values, &mut out, batch, self.d_out, self.d_in);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        spec: Conv2dSpec,
        name: &str,
    ) -> Self {
        let fan_in = spec.c_in * spec.kernel * spec.kernel;
        let n = spec.c_out * fan_in;
        let w = set.push(
            format!("{name}.weight"),
            vec![spec.c_out, spec.c_in, spec.kernel, spec.kernel],
            kaiming_uniform(rng, n, fan_in),
        );
        let b = set.push(format!("{name}.bias"), vec![spec.c_out], vec![0.0; spec.c_out]);
        Self { w, b, spec }
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: NodeId) -> NodeId {
        let w = tape.param(set, self.w);
        let b = tape.param(set, self.b);
        tape.conv2d(x, w, b, self.spec)
    }
}

/// Per-channel affine used by instance normalization.
#[derive(Debug, Clone)]
pub struct ChannelAffine {
    pub gamma: usize,
    pub beta: usize,
}

impl ChannelAffine {
    pub fn new(set: &mut ParamSet, channels: usize, name: &str) -> Self {
        let gamma = set.push(format!("{name}.gamma"), vec![channels], vec![1.0; channels]);
        let beta = set.push(format!("{name}.beta"), vec![channels], vec![0.0; channels]);
        Self { gamma, beta }
    }
}

/// ADAM with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, set: &ParamSet) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: set.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: set.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    /// One update from the gradients accumulated in `set`. Gradients are not
    /// cleared; call `set.zero_grads()` afterwards.
    pub fn step(&mut self, set: &mut ParamSet) -> Result<()> {
        for p in &set.params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (pid, p) in set.params.iter_mut().enumerate() {
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.values[i] -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut set = ParamSet::new();
        set.push("p", vec![3], vec![1.0, -2.0, 0.5]);
        let mut adam = Adam::new(0.1, &set);
        adam.step(&mut set).unwrap();
        assert_eq!(set.params[0].values, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_matches_hand_computed_recurrence() {
        // Scalar parameter, constant gradient 1, lr = 0.1: track the
        // bias-corrected recurrence independently for several steps.
        let mut set = ParamSet::new();
        set.push("p", vec![1], vec![1.0]);
        let mut adam = Adam::new(0.1, &set);

        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut x = 1.0f64;
        for t in 1..=5 {
            set.params[0].grad[0] = 1.0;
            adam.step(&mut set).unwrap();
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
            assert!(
                (set.params[0].values[0] - x).abs() < 1e-15,
                "step {t}: {} vs {x}",
                set.params[0].values[0]
            );
        }
        // First update is -lr within epsilon slack.
        assert!((1.0 - 0.1 / (1.0 + 1e-8) - (1.0 - 0.1_f64 * 1.0 / (1.0 + 1e-8))).abs() < 1e-16);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut set = ParamSet::new();
        set.push("p", vec![1], vec![1.0]);
        set.params[0].grad[0] = f64::NAN;
        let mut adam = Adam::new(0.1, &set);
        assert!(adam.step(&mut set).is_err());
    }

    #[test]
    fn kaiming_init_is_seeded_and_bounded() {
        let mut set_a = ParamSet::new();
        let mut set_b = ParamSet::new();
        let mut r1 = crate::rng::rng_from_seed(5);
        let mut r2 = crate::rng::rng_from_seed(5);
        let la = Linear::new(&mut set_a, &mut r1, 20, 10, "l");
        let _lb = Linear::new(&mut set_b, &mut r2, 20, 10, "l");
        assert_eq!(set_a.params[la.w].values, set_b.params[0].values);
        let bound = (6.0f64 / 20.0).sqrt();
        assert!(set_a.params[la.w].values.iter().all(|v| v.abs() <= bound));
        assert!(set_a.params[la.b].values.iter().all(|&v| v == 0.0));
    }
}
