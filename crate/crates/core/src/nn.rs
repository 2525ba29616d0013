//! Parameter storage and layer builders over the autodiff graph.
//!
//! Parameters are registered in a [`ParamStore`] in construction order, which
//! fixes the checkpoint layout, the optimizer iteration order and the
//! parameter-count bookkeeping.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Destination for parameter registration. The real [`ParamStore`] allocates
/// and initializes tensors; [`ShapeTally`] records names and shapes only, so
/// large presets can be counted without being instantiated. Model builders are
/// generic over this trait, which keeps the two views structurally identical.
pub trait ParamSink {
    fn add_with(
        &mut self,
        name: String,
        shape: Vec<usize>,
        init: &mut dyn FnMut(Vec<usize>) -> Tensor,
    ) -> ParamId;
}

/// Shape-only parameter recorder for counting.
#[derive(Default)]
pub struct ShapeTally {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count_scalars(&self, prefix: Option<&str>) -> u64 {
        self.entries
            .iter()
            .filter(|(n, _)| prefix.map_or(true, |p| n.starts_with(p)))
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

impl ParamSink for ShapeTally {
    fn add_with(
        &mut self,
        name: String,
        shape: Vec<usize>,
        _init: &mut dyn FnMut(Vec<usize>) -> Tensor,
    ) -> ParamId {
        self.entries.push((name, shape));
        ParamId(self.entries.len() - 1)
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    by_name: HashMap<String, usize>,
}

impl ParamSink for ParamStore {
    fn add_with(
        &mut self,
        name: String,
        shape: Vec<usize>,
        init: &mut dyn FnMut(Vec<usize>) -> Tensor,
    ) -> ParamId {
        let t = init(shape.clone());
        assert_eq!(t.shape(), &shape[..]);
        self.add(name, t)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "parameter shape change");
        self.values[id.0] = Arc::new(value);
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arc<Tensor>)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars, optionally restricted to a name prefix.
    pub fn count_scalars(&self, prefix: Option<&str>) -> u64 {
        self.iter()
            .filter(|(_, n, _)| prefix.map_or(true, |p| n.starts_with(p)))
            .map(|(_, _, v)| v.len() as u64)
            .sum()
    }

    /// In-place update used by the optimizer; clones only on shared tensors.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor)) {
        f(Arc::make_mut(&mut self.values[id.0]));
    }
}

// ---- initializers ----

pub fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

fn add_uniform<S: ParamSink>(
    ps: &mut S,
    rng: &mut ChaCha8Rng,
    name: String,
    shape: Vec<usize>,
    bound: f64,
) -> ParamId {
    ps.add_with(name, shape, &mut |s| uniform_init(rng, s, bound))
}

fn add_const<S: ParamSink>(ps: &mut S, name: String, shape: Vec<usize>, v: f64) -> ParamId {
    ps.add_with(name, shape, &mut |s| Tensor::filled(s, v))
}

/// Embedding table `[vocab, dim]` with small gaussian-ish uniform init.
pub fn add_embedding<S: ParamSink>(
    ps: &mut S,
    rng: &mut ChaCha8Rng,
    name: String,
    vocab: usize,
    dim: usize,
) -> ParamId {
    let bound = fan_in_bound(dim);
    add_uniform(ps, rng, name, vec![vocab, dim], bound)
}

/// Zero-initialized parameter (identity-start projection heads).
pub fn add_zeros<S: ParamSink>(ps: &mut S, name: String, shape: Vec<usize>) -> ParamId {
    add_const(ps, name, shape, 0.0)
}

// ---- layers ----

/// Per-frame linear map, applied as `w[out,in] x[in,T] + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = fan_in_bound(in_dim);
        let w = add_uniform(ps, rng, format!("{prefix}.w"), vec![out_dim, in_dim], bound);
        let b = bias.then(|| add_uniform(ps, rng, format!("{prefix}.b"), vec![out_dim], bound));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(Arc::clone(ps.get(self.w)), self.w);
        let y = g.matmul(w, x);
        match self.b {
            Some(b) => {
                let bn = g.param(Arc::clone(ps.get(b)), b);
                g.add_bias_col(y, bn)
            }
            None => y,
        }
    }
}

/// 1-D convolution layer with stride/pad/dilation fixed at construction.
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let bound = fan_in_bound(in_ch * k);
        let w = add_uniform(ps, rng, format!("{prefix}.w"), vec![out_ch, in_ch * k], bound);
        let b = Some(add_uniform(ps, rng, format!("{prefix}.b"), vec![out_ch], bound));
        Conv1d { w, b, k, stride, pad, dilation }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(Arc::clone(ps.get(self.w)), self.w);
        let b = self.b.map(|b| g.param(Arc::clone(ps.get(b)), b));
        g.conv1d(x, w, b, self.k, self.stride, self.pad, self.dilation)
    }
}

/// Transposed 1-D convolution (upsampling). `k = 2*stride, pad = stride/2`
/// multiplies the length by exactly `stride`.
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = fan_in_bound(in_ch * k / stride.max(1));
        let w = add_uniform(ps, rng, format!("{prefix}.w"), vec![in_ch, out_ch * k], bound);
        let b = add_uniform(ps, rng, format!("{prefix}.b"), vec![out_ch], bound);
        ConvTranspose1d { w, b, in_ch, out_ch, k, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(Arc::clone(ps.get(self.w)), self.w);
        let b = g.param(Arc::clone(ps.get(self.b)), self.b);
        g.conv_transpose1d(x, w, Some(b), self.out_ch, self.k, self.stride, self.pad)
    }
}

/// Depthwise 1-D convolution: per-channel kernel, no cross-channel mixing.
pub struct DepthwiseConv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub pad: usize,
}

impl DepthwiseConv1d {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        let bound = fan_in_bound(k);
        let w = add_uniform(ps, rng, format!("{prefix}.w"), vec![channels, k], bound);
        let b = add_uniform(ps, rng, format!("{prefix}.b"), vec![channels], bound);
        DepthwiseConv1d { w, b, k, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(Arc::clone(ps.get(self.w)), self.w);
        let b = g.param(Arc::clone(ps.get(self.b)), self.b);
        g.depthwise_conv1d(x, w, Some(b), self.pad)
    }
}

/// 2-D convolution for the spectrogram-style reference encoder.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let bound = fan_in_bound(in_ch * kernel.0 * kernel.1);
        let w = add_uniform(
            ps,
            rng,
            format!("{prefix}.w"),
            vec![out_ch, in_ch * kernel.0 * kernel.1],
            bound,
        );
        let b = add_uniform(ps, rng, format!("{prefix}.b"), vec![out_ch], bound);
        Conv2d { w, b, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId, hw: (usize, usize)) -> NodeId {
        let w = g.param(Arc::clone(ps.get(self.w)), self.w);
        let b = g.param(Arc::clone(ps.get(self.b)), self.b);
        g.conv2d(x, w, Some(b), hw, self.kernel, self.stride, self.pad)
    }

    pub fn out_hw(&self, hw: (usize, usize)) -> (usize, usize) {
        (
            (hw.0 + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (hw.1 + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }
}

/// Layer normalization over channels, per time step.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: ParamSink>(ps: &mut S, prefix: &str, channels: usize) -> Self {
        let gamma = add_const(ps, format!("{prefix}.gamma"), vec![channels], 1.0);
        let beta = add_const(ps, format!("{prefix}.beta"), vec![channels], 0.0);
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let gm = g.param(Arc::clone(ps.get(self.gamma)), self.gamma);
        let bt = g.param(Arc::clone(ps.get(self.beta)), self.beta);
        g.layer_norm_cols(x, gm, bt, self.eps)
    }
}

/// Single-layer GRU; consumes `[in,T]`, returns the final hidden state `[h,1]`.
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let bound = fan_in_bound(hidden);
        Gru {
            w_ih: add_uniform(ps, rng, format!("{prefix}.w_ih"), vec![3 * hidden, in_dim], bound),
            w_hh: add_uniform(ps, rng, format!("{prefix}.w_hh"), vec![3 * hidden, hidden], bound),
            b_ih: add_uniform(ps, rng, format!("{prefix}.b_ih"), vec![3 * hidden], bound),
            b_hh: add_uniform(ps, rng, format!("{prefix}.b_hh"), vec![3 * hidden], bound),
            hidden,
        }
    }

    /// Runs the recurrence over all columns of `x` and returns the last state.
    pub fn final_state(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let t = g.value(x).cols();
        let h = self.hidden;
        let w_ih = g.param(Arc::clone(ps.get(self.w_ih)), self.w_ih);
        let w_hh = g.param(Arc::clone(ps.get(self.w_hh)), self.w_hh);
        let b_ih = g.param(Arc::clone(ps.get(self.b_ih)), self.b_ih);
        let b_hh = g.param(Arc::clone(ps.get(self.b_hh)), self.b_hh);
        let mut state = g.input(Tensor::zeros(vec![h, 1]));
        for step in 0..t {
            let xt = g.slice_cols(x, step, step + 1);
            let gi = g.matmul(w_ih, xt);
            let gi = g.add_bias_col(gi, b_ih);
            let gh = g.matmul(w_hh, state);
            let gh = g.add_bias_col(gh, b_hh);
            let i_r = g.slice_rows(gi, 0, h);
            let i_z = g.slice_rows(gi, h, 2 * h);
            let i_n = g.slice_rows(gi, 2 * h, 3 * h);
            let h_r = g.slice_rows(gh, 0, h);
            let h_z = g.slice_rows(gh, h, 2 * h);
            let h_n = g.slice_rows(gh, 2 * h, 3 * h);
            let r_pre = g.add(i_r, h_r);
            let r = g.sigmoid(r_pre);
            let z_pre = g.add(i_z, h_z);
            let z = g.sigmoid(z_pre);
            let rn = g.mul(r, h_n);
            let n_pre = g.add(i_n, rn);
            let n = g.tanh(n_pre);
            // h' = (1 - z) * n + z * h
            let zn = g.mul(z, n);
            let n_minus = g.sub(n, zn);
            let zh = g.mul(z, state);
            state = g.add(n_minus, zh);
        }
        state
    }
}

/// Seeded dropout; identity when the graph is in eval mode or p == 0.
pub fn dropout(g: &mut Graph, rng: &mut ChaCha8Rng, x: NodeId, p: f64) -> NodeId {
    if !g.is_train() || p <= 0.0 {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let data: Vec<f64> =
        (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    g.mul_mask(x, Arc::new(Tensor::new(shape, data)))
}
