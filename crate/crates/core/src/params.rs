//! Named trainable parameters and their initialization.

use crate::tensor::{Element, Gradients, Tape, Tensor, TensorError, Val};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Gradients of the parameters leased on `tape`, keyed by id, lease order.
/// Untouched or frozen parameters are absent.
pub fn param_grads<'a, T: Element>(
    tape: &Tape<T>,
    grads: &'a Gradients<T>,
) -> Vec<(ParamId, &'a [T])> {
    tape.tagged_leaves()
        .iter()
        .filter_map(|&(tag, v)| grads.get(v).map(|g| (ParamId(tag), g)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of model parameters. Order is build order and is the
/// canonical order for checkpoints and gradient accumulation.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }

    /// Mark every parameter frozen (e.g. a distillation teacher).
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Put a parameter on a tape as a leaf; trainable parameters track grads.
    /// Leasing the same id twice on one tape reuses the node.
    pub fn lease(&self, tape: &mut Tape<T>, id: ParamId) -> Val {
        let p = &self.params[id.0];
        tape.leaf_tagged(p.value.clone(), p.trainable, id.0)
    }

    /// Deterministic checksum of all values, for drift tests.
    pub fn value_checksum(&self) -> f64 {
        let mut acc = 0.0f64;
        for p in &self.params {
            for v in p.value.data() {
                acc = acc.mul_add(0.9999999, v.to_f64());
            }
        }
        acc
    }
}

/// Weight and bias ids of one linear projection.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    /// Registers `{name}.w` [fan_in, fan_out] from a truncated normal
    /// (std 0.02) and `{name}.b` zeros.
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        Self::build_init(store, name, fan_in, fan_out, 0.02, 0.0, rng)
    }

    /// `build` with an explicit weight std and bias fill value.
    pub fn build_init<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TensorError> {
        let w = store.add(
            format!("{name}.w"),
            trunc_normal(vec![fan_in, fan_out], std, rng)?,
            true,
        );
        let b = store.add(
            format!("{name}.b"),
            Tensor::full(vec![fan_out], T::from_f64(bias))?,
            true,
        );
        Ok(LinearParams { w, b })
    }

    pub fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
    ) -> Result<Val, TensorError> {
        let w = store.lease(tape, self.w);
        let b = store.lease(tape, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Scale and shift ids of one layer norm.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub g: ParamId,
    pub b: ParamId,
}

impl NormParams {
    /// Registers `{name}.g` as ones and `{name}.b` as zeros.
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
    ) -> Result<Self, TensorError> {
        let g = store.add(format!("{name}.g"), Tensor::full(vec![dim], T::one())?, true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![dim])?, true);
        Ok(NormParams { g, b })
    }

    pub fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Val,
        eps: f64,
    ) -> Result<Val, TensorError> {
        let g = store.lease(tape, self.g);
        let b = store.lease(tape, self.b);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Standard normal draw via Box-Muller; uses two uniforms per call.
fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// He-style init std for a unit with the given fan-in.
pub fn fan_in_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Normal(0, std²) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Element>(
    shape: Vec<usize>,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, TensorError> {
    let n = crate::tensor::numel(&shape);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let z = loop {
            let z = normal_draw(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        data.push(T::from_f64(z * std));
    }
    Tensor::new(shape, data)
}
