//! Differentiable layer primitives and the gradient-verification harness
//! every model module is built on.

pub mod conv;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use conv::ConvSpec;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

/// Handle to a named parameter tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> ParamId {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors. Insertion order is the
/// canonical order for checkpoints and optimizer state, which keeps every
/// serialization and update sequence deterministic.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.clone());
        self.tensors.push(t);
        let id = self.tensors.len() - 1;
        self.index.insert(name, id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Register every parameter as a leaf on `tape`, in insertion order.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Parameter leaves bound to one tape, parallel to the [`ParamSet`] order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().copied()
    }
}

/// Kaiming fan-in initialization: N(0, sqrt(2 / fan_in)). Samples are drawn
/// in f64 and cast, so a model seeded identically reproduces bit-exactly for
/// either scalar type.
pub fn kaiming_init<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Uniform small init used for fully-connected heads where Kaiming's ReLU
/// gain is not appropriate.
pub fn uniform_init<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Strided 2-D convolution layer. With `stride: 2` this is the
/// spatial-halving block the encoders are built from.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let w = ps.insert(
            format!("{name}.w"),
            kaiming_init(rng, &[out_ch, in_ch, k, k], in_ch * k * k),
        );
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Conv2d { w, b, spec }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, x: Var) -> Var {
        tape.conv2d(x, bp.var(self.w), bp.var(self.b), self.spec)
    }
}

/// Transposed convolution layer; kernel 4 / stride 2 / pad 1 doubles the
/// spatial dims exactly.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let w = ps.insert(
            format!("{name}.w"),
            kaiming_init(rng, &[in_ch, out_ch, k, k], in_ch * k * k),
        );
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        ConvTranspose2d { w, b, spec }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, x: Var) -> Var {
        tape.conv_transpose2d(x, bp.var(self.w), bp.var(self.b), self.spec)
    }
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = ps.insert(
            format!("{name}.w"),
            uniform_init(rng, &[out_dim, in_dim], bound),
        );
        let b = ps.insert(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, x: Var) -> Var {
        tape.linear(x, bp.var(self.w), bp.var(self.b))
    }
}

/// Per-channel affine instance normalization.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.insert(
            format!("{name}.gamma"),
            Tensor::filled(&[channels], T::one()),
        );
        let beta = ps.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        InstanceNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, x: Var) -> Var {
        tape.instance_norm(x, bp.var(self.gamma), bp.var(self.beta), T::from_f64(self.eps))
    }
}

/// Residual block: `x + c2(relu(c1(x)))`, with optional instance norms after
/// each conv. Encoder blocks normalize; render blocks must not, so the
/// injected lighting scale survives.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub c1: Conv2d,
    pub n1: Option<InstanceNorm>,
    pub c2: Conv2d,
    pub n2: Option<InstanceNorm>,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        normalized: bool,
    ) -> Self {
        let spec = ConvSpec { stride: 1, pad: 1 };
        let c1 = Conv2d::new(ps, rng, &format!("{name}.c1"), channels, channels, 3, spec);
        let n1 = normalized.then(|| InstanceNorm::new(ps, &format!("{name}.n1"), channels));
        let c2 = Conv2d::new(ps, rng, &format!("{name}.c2"), channels, channels, 3, spec);
        let n2 = normalized.then(|| InstanceNorm::new(ps, &format!("{name}.n2"), channels));
        ResidualBlock { c1, n1, c2, n2 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bp: &BoundParams, x: Var) -> Var {
        let mut h = self.c1.forward(tape, bp, x);
        if let Some(n) = &self.n1 {
            h = n.forward(tape, bp, h);
        }
        h = tape.relu(h);
        h = self.c2.forward(tape, bp, h);
        if let Some(n) = &self.n2 {
            h = n.forward(tape, bp, h);
        }
        tape.add(x, h)
    }
}
