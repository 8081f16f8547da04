//! Reusable network blocks: parameter registry, linear / conv / norm layers,
//! multi-head attention, feed-forward nets, and 2D sinusoidal positional
//! embeddings.
//!
//! Parameters live in a [`ParamStore`] as plain buffers; each forward pass
//! binds them to fresh leaf tensors on a tape. The optimizer mutates the
//! store between steps, never a live tensor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::store::RawTensor;
use crate::tensor::{ops, Element, Tape, Tensor};

/// Index of a registered parameter; stable for the life of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore<E: Element> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Registers a parameter. Initial values arrive as `f64` so that 32- and
    /// 64-bit builds of the same model share one init stream.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Vec<f64>) -> ParamId {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), init.len(), "{name}");
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.names.len());
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.data.push(init.into_iter().map(E::from_f64).collect());
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[E] {
        &self.data[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [E] {
        &mut self.data[id.0]
    }

    pub fn iter_data_mut(&mut self) -> impl Iterator<Item = &mut Vec<E>> {
        self.data.iter_mut()
    }

    pub fn iter_data(&self) -> impl Iterator<Item = &Vec<E>> {
        self.data.iter()
    }

    /// Leaf tensors (requires_grad) for one forward/backward pass.
    pub fn bind(&self) -> Bound<E> {
        let tensors = self
            .shapes
            .iter()
            .zip(&self.data)
            .map(|(s, d)| Tensor::leaf(s, d.clone()).expect("store shapes are valid"))
            .collect();
        Bound { tensors }
    }

    /// Constant tensors for inference passes; no gradients accumulate.
    pub fn bind_frozen(&self) -> Bound<E> {
        let tensors = self
            .shapes
            .iter()
            .zip(&self.data)
            .map(|(s, d)| Tensor::from_vec(s, d.clone()).expect("store shapes are valid"))
            .collect();
        Bound { tensors }
    }

    /// Adds uniform noise to every parameter. Gradient checks call this to
    /// move zero-initialized biases off relu kinks; finite differences
    /// straddle the corner otherwise.
    pub fn jitter(&mut self, rng: &mut ChaCha8Rng, amplitude: f64) {
        for buf in &mut self.data {
            for v in buf.iter_mut() {
                *v = *v + E::from_f64(rng.gen_range(-amplitude..amplitude));
            }
        }
    }

    /// Constant tensors mirroring the current parameter values; handy as
    /// gradcheck inputs.
    pub fn param_tensors(&self) -> Vec<Tensor<E>> {
        self.shapes
            .iter()
            .zip(&self.data)
            .map(|(s, d)| Tensor::from_vec(s, d.clone()).expect("store shapes are valid"))
            .collect()
    }

    pub fn to_raw_tensors(&self) -> Vec<RawTensor> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.data)
            .map(|((n, s), d)| RawTensor::from_slice(n.clone(), s, d))
            .collect()
    }

    /// Overwrites parameter values from a checkpoint section. Every stored
    /// parameter must be present with a matching shape and dtype.
    pub fn load_raw_tensors(&mut self, raw: &[RawTensor]) -> Result<()> {
        for i in 0..self.names.len() {
            let name = &self.names[i];
            let t = raw
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::Validation(format!("checkpoint missing parameter {name}")))?;
            if t.shape != self.shapes[i] {
                return Err(Error::Validation(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    t.shape, self.shapes[i]
                )));
            }
            self.data[i] = t.to_vec::<E>()?;
        }
        Ok(())
    }
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters bound to tensors for one pass.
pub struct Bound<E: Element> {
    tensors: Vec<Tensor<E>>,
}

impl<E: Element> Bound<E> {
    /// Binds externally supplied tensors (e.g. gradcheck leaves) in
    /// registration order.
    pub fn from_tensors(tensors: Vec<Tensor<E>>) -> Self {
        Bound { tensors }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    /// Per-parameter gradients in registration order; `None` where no
    /// gradient flowed.
    pub fn grads(&self) -> Vec<Option<Vec<E>>> {
        self.tensors.iter().map(|t| t.grad()).collect()
    }
}

// ---------------------------------------------------------------------------
// initializers

pub fn uniform_init(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Xavier/Glorot uniform for a dense map.
pub fn xavier_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_init(rng, fan_in * fan_out, -a, a)
}

pub fn conv_init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let fan_in = c_in * k * k;
    let fan_out = c_out * k * k;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_init(rng, c_out * c_in * k * k, -a, a)
}

// ---------------------------------------------------------------------------
// layers

/// Dense layer `y = x W^T + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            &[out_dim, in_dim],
            xavier_init(rng, in_dim, out_dim),
        );
        let b = store.register(format!("{name}.b"), &[out_dim], vec![0.0; out_dim]);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let y = ops::matmul_nt(tape, x, p.get(self.w))?;
        ops::add_row_bias(tape, &y, p.get(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        let gain = store.register(format!("{name}.gain"), &[dim], vec![1.0; dim]);
        let bias = store.register(format!("{name}.bias"), &[dim], vec![0.0; dim]);
        LayerNorm {
            gain,
            bias,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        ops::layer_norm(tape, x, p.get(self.gain), p.get(self.bias), E::from_f64(self.eps))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            &[c_out, c_in, k, k],
            conv_init(rng, c_out, c_in, k),
        );
        let b = store.register(format!("{name}.b"), &[c_out], vec![0.0; c_out]);
        Conv2d {
            w,
            b,
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn forward<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        ops::conv2d(tape, x, p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)
    }
}

/// Multi-head attention; `num_heads * head_dim == dim` and all projections
/// are `dim x dim`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
    pub head_dim: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::contract(
                "multi_head_attention",
                format!("num_heads {num_heads} must divide hidden size {dim}"),
            ));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim),
            num_heads,
            head_dim: dim / num_heads,
            dim,
        })
    }

    /// `queries: [n_q, d]`, `keys/values: [n_kv, d]` with matching token
    /// counts between keys and values.
    pub fn forward<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        queries: &Tensor<E>,
        keys: &Tensor<E>,
        values: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        if keys.shape()[0] != values.shape()[0] {
            return Err(Error::shape(
                "multi_head_attention",
                format!(
                    "key count {} != value count {}",
                    keys.shape()[0],
                    values.shape()[0]
                ),
            ));
        }
        if queries.shape()[1] != self.dim || keys.shape()[1] != self.dim {
            return Err(Error::shape(
                "multi_head_attention",
                format!(
                    "token width {} does not match hidden size {}",
                    queries.shape()[1],
                    self.dim
                ),
            ));
        }
        let q = self.wq.forward(tape, p, queries)?;
        let k = self.wk.forward(tape, p, keys)?;
        let v = self.wv.forward(tape, p, values)?;
        let inv_sqrt = E::from_f64(1.0 / (self.head_dim as f64).sqrt());

        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let lo = h * self.head_dim;
            let hi = lo + self.head_dim;
            let qh = ops::slice_cols(tape, &q, lo, hi)?;
            let kh = ops::slice_cols(tape, &k, lo, hi)?;
            let vh = ops::slice_cols(tape, &v, lo, hi)?;
            let scores = ops::scale(tape, &ops::matmul_nt(tape, &qh, &kh)?, inv_sqrt);
            let attn = ops::softmax(tape, &scores, 1)?;
            heads.push(ops::matmul(tape, &attn, &vh)?);
        }
        let concat = ops::concat_cols(tape, &heads)?;
        self.wo.forward(tape, p, &concat)
    }
}

/// Two dense layers with a rectifier in between; the residual is added by
/// the caller.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::contract("ffn", "hidden width must be >= 1"));
        }
        Ok(FeedForward {
            l1: Linear::new(store, rng, &format!("{name}.l1"), dim, hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, dim),
        })
    }

    pub fn forward<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let h = ops::relu(tape, &self.l1.forward(tape, p, x)?);
        self.l2.forward(tape, p, &h)
    }
}

// ---------------------------------------------------------------------------
// positional embeddings

/// Fixed 2D sinusoidal position table for an `h x w` grid, one `[h*w, d]`
/// row per position (row-major over the grid).
#[derive(Debug, Clone)]
pub struct PosEmbedding2D {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    table: Vec<f64>,
}

const POS_TEMPERATURE: f64 = 10000.0;

pub fn pos_embed_2d(h: usize, w: usize, dim: usize) -> Result<PosEmbedding2D> {
    if dim % 4 != 0 {
        return Err(Error::contract(
            "pos_embed_2d",
            format!("embedding dim {dim} must be divisible by 4 (sin/cos per axis)"),
        ));
    }
    let quarter = dim / 4;
    let mut table = vec![0.0f64; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut table[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..quarter {
                let freq = POS_TEMPERATURE.powf(4.0 * i as f64 / dim as f64);
                row[2 * i] = (y as f64 / freq).sin();
                row[2 * i + 1] = (y as f64 / freq).cos();
                row[dim / 2 + 2 * i] = (x as f64 / freq).sin();
                row[dim / 2 + 2 * i + 1] = (x as f64 / freq).cos();
            }
        }
    }
    Ok(PosEmbedding2D { h, w, dim, table })
}

impl PosEmbedding2D {
    /// Constant `[h*w, d]` tensor at the requested precision.
    pub fn tensor<E: Element>(&self) -> Tensor<E> {
        let data: Vec<E> = self.table.iter().map(|&v| E::from_f64(v)).collect();
        Tensor::from_vec(&[self.h * self.w, self.dim], data).expect("table shape is valid")
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.table[idx * self.dim..(idx + 1) * self.dim]
    }
}
