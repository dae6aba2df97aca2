//! Minimal deterministic neural-network core.
//!
//! A [`Network`] is a small DAG of layers evaluated in declaration order.
//! Activation slot 0 holds the network input and slot `i + 1` the output of
//! node `i`; each node names the slots it reads. Shapes are per sample
//! (`[C, H, W]` for spatial tensors, `[F]` for vectors) and are inferred and
//! validated when the network is built.
//!
//! Batches are processed sample by sample and gradients are reduced in
//! sample order, so results are bit-reproducible for a given build.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, ParamRecord};
pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};

/// Floating point element type of a network (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = a·b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`.
    /// `a_t`/`b_t` read the operand as its transpose.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);

    fn from_real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds checked above; strides describe the
                // row-major layouts of the given slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor. Batched tensors carry the batch as axis 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    /// Stacks equally shaped samples into a batch.
    pub fn stack(samples: &[Vec<T>], sample_shape: &[usize]) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return Err(Error::invalid("sample size does not match shape"));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Tensor { shape, data })
    }

    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_real(v.as_f64())).collect(),
        }
    }
}

/// Layer kinds. Channel counts and input widths are inferred from the
/// incoming shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        out: usize,
    },
    /// `y_j = offset + ln(out) − ‖x − c_j‖²` with one learned prototype
    /// `c_j` per output and no bias. Under an exp head a sample sitting on a
    /// single prototype gets evidence `out·e^offset` whatever the class count.
    Prototype {
        out: usize,
        offset: f64,
    },
    Conv2d {
        out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    AvgPool2d {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Bilinear upsampling by an integer factor (half-pixel alignment).
    Upsample {
        factor: usize,
    },
    /// Concatenation along axis 0 of the per-sample shape (channels).
    Concat,
    /// `exp(clamp(x, -clamp, clamp))`, the evidence head.
    ExpHead {
        clamp: f64,
    },
    /// Softmax over axis 0 (channels), per spatial location.
    SoftmaxHead,
}

impl LayerSpec {
    pub fn conv(out: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        LayerSpec::Conv2d {
            out,
            kernel,
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Prototype { .. } => "prototype",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::GlobalAvgPool => "global_avgpool",
            LayerSpec::Upsample { .. } => "upsample",
            LayerSpec::Concat => "concat",
            LayerSpec::ExpHead { .. } => "exp_head",
            LayerSpec::SoftmaxHead => "softmax_head",
        }
    }
}

/// Receptive field (per axis) of a single conv layer.
pub fn receptive_field(kernel: usize, dilation: usize) -> usize {
    kernel + (kernel - 1) * (dilation - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub layer: LayerSpec,
    /// Activation slots read by this node (0 = network input).
    pub inputs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub nodes: Vec<NodeSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>) -> Self {
        NetworkSpec {
            input_shape,
            nodes: Vec::new(),
        }
    }

    /// Appends a node reading the previous slot; returns its output slot.
    pub fn push(&mut self, name: impl Into<String>, layer: LayerSpec) -> usize {
        let prev = self.nodes.len();
        self.push_from(name, layer, vec![prev])
    }

    /// Appends a node reading `inputs`; returns its output slot.
    pub fn push_from(&mut self, name: impl Into<String>, layer: LayerSpec, inputs: Vec<usize>) -> usize {
        self.nodes.push(NodeSpec {
            name: name.into(),
            layer,
            inputs,
        });
        self.nodes.len()
    }

    /// Infers every activation shape, validating the layer chain.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::invalid("network input shape must be non-empty"));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.is_empty() || node.inputs.iter().any(|&s| s > i) {
                return Err(Error::Shape {
                    layer: i,
                    message: format!("node '{}' reads an undefined slot {:?}", node.name, node.inputs),
                });
            }
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&s| &shapes[s]).collect();
            let out = layers::output_shape(&node.layer, &ins).map_err(|message| Error::Shape {
                layer: i,
                message: format!("{} '{}': {message}", node.layer.kind_name(), node.name),
            })?;
            shapes.push(out);
        }
        Ok(shapes)
    }
}

/// A named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Parameter gradients, laid out like [`Network::params`].
pub type Grads<T> = Vec<Vec<T>>;

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    pub params: Vec<Param<T>>,
    /// (weight, bias) parameter indices per node, if any.
    param_slots: Vec<Option<(usize, Option<usize>)>>,
}

/// Activations of one sample retained for the backward pass.
pub struct SampleCache<T> {
    acts: Vec<Vec<T>>,
    aux: Vec<layers::Aux<T>>,
}

impl<T: Real> SampleCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().unwrap()
    }

    /// Activation in slot `s` (0 = network input).
    pub fn slot(&self, s: usize) -> &[T] {
        &self.acts[s]
    }
}

/// Per-sample caches of a batched forward pass.
pub struct BatchCache<T> {
    samples: Vec<SampleCache<T>>,
}

/// Result of a batched backward pass.
pub struct Backward<T> {
    pub params: Grads<T>,
    pub input: Tensor<T>,
}

impl<T: Real> Network<T> {
    /// Builds the network with He-scaled Gaussian weights and zero biases.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut param_slots = Vec::with_capacity(spec.nodes.len());
        for node in spec.nodes.iter() {
            let in_shape = &shapes[node.inputs[0]];
            let (wshape, fan_in) = match node.layer {
                LayerSpec::Dense { out } | LayerSpec::Prototype { out, .. } => {
                    let n_in: usize = in_shape.iter().product();
                    (vec![out, n_in], n_in)
                }
                LayerSpec::Conv2d { out, kernel, .. } => {
                    let c = in_shape[0];
                    (vec![out, c, kernel, kernel], c * kernel * kernel)
                }
                _ => {
                    param_slots.push(None);
                    continue;
                }
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = wshape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::from_real(z * std)
                })
                .collect();
            let out = wshape[0];
            params.push(Param {
                name: format!("{}.weight", node.name),
                shape: wshape,
                data,
            });
            let wi = params.len() - 1;
            if matches!(node.layer, LayerSpec::Prototype { .. }) {
                param_slots.push(Some((wi, None)));
                continue;
            }
            params.push(Param {
                name: format!("{}.bias", node.name),
                shape: vec![out],
                data: vec![T::zero(); out],
            });
            param_slots.push(Some((wi, Some(wi + 1))));
        }
        Ok(Network {
            spec,
            shapes,
            params,
            param_slots,
        })
    }

    /// Reassembles a network from a spec and parameter arrays, checking
    /// names and shapes.
    pub fn from_parts(spec: NetworkSpec, params: Vec<Param<T>>) -> Result<Self> {
        let template = Network::<T>::build(spec, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter arrays, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.shape != p.shape || p.data.len() != t.data.len() {
                return Err(Error::invalid(format!("parameter '{}' does not match the spec", p.name)));
            }
        }
        Ok(Network { params, ..template })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn activation_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_real(v.as_f64())).collect(),
                })
                .collect(),
            param_slots: self.param_slots.clone(),
        }
    }

    /// Forward pass of one sample, retaining what backward needs.
    pub fn forward_sample(&self, input: &[T]) -> Result<SampleCache<T>> {
        let n_in: usize = self.shapes[0].iter().product();
        if input.len() != n_in {
            return Err(Error::Shape {
                layer: 0,
                message: format!("input has {} values, expected shape {:?}", input.len(), self.shapes[0]),
            });
        }
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.spec.nodes.len() + 1);
        acts.push(input.to_vec());
        let mut aux = Vec::with_capacity(self.spec.nodes.len());
        for (i, node) in self.spec.nodes.iter().enumerate() {
            let ins: Vec<&[T]> = node.inputs.iter().map(|&s| acts[s].as_slice()).collect();
            let in_shapes: Vec<&[usize]> = node.inputs.iter().map(|&s| self.shapes[s].as_slice()).collect();
            let (w, b) = match self.param_slots[i] {
                Some((w, b)) => (
                    Some(self.params[w].data.as_slice()),
                    b.map(|b| self.params[b].data.as_slice()),
                ),
                None => (None, None),
            };
            let (out, a) = layers::forward(&node.layer, &ins, &in_shapes, &self.shapes[i + 1], w, b);
            acts.push(out);
            aux.push(a);
        }
        Ok(SampleCache { acts, aux })
    }

    /// Output of one sample without keeping the cache.
    pub fn predict(&self, input: &[T]) -> Result<Vec<T>> {
        let mut cache = self.forward_sample(input)?;
        Ok(cache.acts.pop().unwrap())
    }

    /// Backward pass of one sample. Parameter gradients are added into
    /// `grads`; the input gradient is returned.
    pub fn backward_sample(&self, cache: &SampleCache<T>, upstream: &[T], grads: &mut Grads<T>) -> Result<Vec<T>> {
        let n_out: usize = self.output_shape().iter().product();
        if upstream.len() != n_out {
            return Err(Error::Shape {
                layer: self.spec.nodes.len(),
                message: format!("upstream gradient has {} values, expected {}", upstream.len(), n_out),
            });
        }
        let mut dacts: Vec<Option<Vec<T>>> = vec![None; self.spec.nodes.len() + 1];
        *dacts.last_mut().unwrap() = Some(upstream.to_vec());
        for i in (0..self.spec.nodes.len()).rev() {
            let node = &self.spec.nodes[i];
            let Some(dout) = dacts[i + 1].take() else {
                continue;
            };
            let ins: Vec<&[T]> = node.inputs.iter().map(|&s| cache.acts[s].as_slice()).collect();
            let in_shapes: Vec<&[usize]> = node.inputs.iter().map(|&s| self.shapes[s].as_slice()).collect();
            let mut dins: Vec<Vec<T>> = in_shapes
                .iter()
                .map(|s| vec![T::zero(); s.iter().product()])
                .collect();
            match self.param_slots[i] {
                Some((wi, bi)) => {
                    let mut no_bias = Vec::new();
                    let (dw, db) = match bi {
                        Some(bi) => two_mut(grads, wi, bi),
                        None => (&mut grads[wi], &mut no_bias),
                    };
                    layers::backward(
                        &node.layer,
                        &ins,
                        &in_shapes,
                        &cache.acts[i + 1],
                        &self.shapes[i + 1],
                        &cache.aux[i],
                        &dout,
                        Some(&self.params[wi].data),
                        Some((dw, db)),
                        &mut dins,
                    );
                }
                None => layers::backward(
                    &node.layer,
                    &ins,
                    &in_shapes,
                    &cache.acts[i + 1],
                    &self.shapes[i + 1],
                    &cache.aux[i],
                    &dout,
                    None,
                    None,
                    &mut dins,
                ),
            }
            for (&slot, din) in node.inputs.iter().zip(dins) {
                match &mut dacts[slot] {
                    Some(acc) => acc.iter_mut().zip(&din).for_each(|(a, d)| *a += *d),
                    empty => *empty = Some(din),
                }
            }
        }
        Ok(dacts[0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.shapes[0].iter().product()]))
    }

    /// Batched forward pass; `batch.shape = [N, ...input_shape]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, BatchCache<T>)> {
        if batch.shape.len() != self.shapes[0].len() + 1 || batch.shape[1..] != self.shapes[0][..] {
            return Err(Error::Shape {
                layer: 0,
                message: format!("batch shape {:?} does not match input {:?}", batch.shape, self.shapes[0]),
            });
        }
        let n = batch.batch_len();
        let mut samples = Vec::with_capacity(n);
        let mut out = Vec::new();
        for i in 0..n {
            let cache = self.forward_sample(batch.sample(i))?;
            out.extend_from_slice(cache.output());
            samples.push(cache);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.output_shape());
        Ok((Tensor { shape, data: out }, BatchCache { samples }))
    }

    /// Batched backward pass; gradients are summed over the batch in sample
    /// order.
    pub fn backward(&self, cache: &BatchCache<T>, upstream: &Tensor<T>) -> Result<Backward<T>> {
        if upstream.batch_len() != cache.samples.len() {
            return Err(Error::invalid("upstream batch size does not match the forward cache"));
        }
        let mut grads = self.zero_grads();
        let mut input = Vec::new();
        for (i, sc) in cache.samples.iter().enumerate() {
            input.extend(self.backward_sample(sc, upstream.sample(i), &mut grads)?);
        }
        let mut shape = vec![cache.samples.len()];
        shape.extend_from_slice(self.input_shape());
        Ok(Backward {
            params: grads,
            input: Tensor { shape, data: input },
        })
    }

    /// Flattened copy of all parameters.
    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Replaces the final 1×1 convolution (or dense layer), ignoring any
    /// trailing output heads, with one that has an extra output row, copying existing rows verbatim.
    /// The new row is He-initialized from `seed`, or zero when `zero_init`.
    pub fn append_output_channel(&mut self, seed: u64, zero_init: bool) -> Result<()> {
        // the scoring layer may be followed by parameter-free output heads
        let last = self
            .spec
            .nodes
            .iter()
            .rposition(|n| !matches!(n.layer, LayerSpec::ExpHead { .. } | LayerSpec::SoftmaxHead))
            .ok_or_else(|| Error::invalid("network has no scoring layer"))?;
        let node = &mut self.spec.nodes[last];
        let fan_in = match &mut node.layer {
            LayerSpec::Conv2d { out, kernel: 1, .. } | LayerSpec::Dense { out } | LayerSpec::Prototype { out, .. } => {
                *out += 1;
                self.params[self.param_slots[last].unwrap().0].shape[1..]
                    .iter()
                    .product::<usize>()
            }
            _ => return Err(Error::invalid("final layer is not a 1x1 convolution")),
        };
        let (wi, bi) = self.param_slots[last].unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / fan_in as f64).sqrt();
        let w = &mut self.params[wi];
        w.shape[0] += 1;
        for _ in 0..fan_in {
            let z: f64 = StandardNormal.sample(&mut rng);
            w.data.push(if zero_init { T::zero() } else { T::from_real(z * std) });
        }
        if let Some(bi) = bi {
            let b = &mut self.params[bi];
            b.shape[0] += 1;
            b.data.push(T::zero());
        }
        self.shapes = self.spec.infer_shapes()?;
        Ok(())
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
