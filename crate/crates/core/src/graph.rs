//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A `Graph` is a per-forward-pass tape. Model parameters live outside the
//! graph in a [`crate::nn::ParamStore`]; each forward pass leases them as leaf
//! nodes and `backward` returns gradients keyed by parameter id. Everything is
//! sequential and allocation-order deterministic, so two runs with the same
//! inputs produce bit-identical losses and gradients.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::nn::ParamId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

pub struct BackArgs<'a> {
    pub parents: Vec<&'a Tensor>,
    pub out: &'a Tensor,
}

type BackFn = Box<dyn Fn(&Tensor, &BackArgs) -> Vec<Tensor>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<NodeId>,
    backward: Option<BackFn>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Tape for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new(train: bool) -> Self {
        Graph { nodes: Vec::with_capacity(256), train }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: Option<BackFn>,
    ) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (inputs, targets, fixed matrices).
    pub fn constant(&mut self, value: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node { value, parents: vec![], backward: None, needs_grad: false, param: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.constant(Arc::new(value))
    }

    /// Leaf bound to a model parameter; `backward` reports its gradient.
    pub fn param(&mut self, value: Arc<Tensor>, id: ParamId) -> NodeId {
        self.nodes.push(Node { value, parents: vec![], backward: None, needs_grad: true, param: Some(id) });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that participates in backward without being a parameter
    /// (used by gradient tests on activations).
    pub fn leaf_with_grad(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: vec![],
            backward: None,
            needs_grad: true,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut by_node: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            // leaves (parameters, gradient probes) keep their accumulated grad
            let Some(back) = &node.backward else { continue };
            let Some(g) = by_node[idx].take() else { continue };
            let parents: Vec<&Tensor> =
                node.parents.iter().map(|p| self.nodes[p.0].value.as_ref()).collect();
            let args = BackArgs { parents, out: node.value.as_ref() };
            let pgrads = back(&g, &args);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(pgrads.into_iter()) {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                match &mut by_node[pid.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { by_node }
    }

    /// Collect parameter gradients after [`Self::backward`].
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.by_node[idx].as_ref()) {
                out.push((pid, g.clone()));
            }
        }
        out
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, vec![a, b], Some(Box::new(|g, _| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, _| vec![g.clone(), g.map(|v| -v)])),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, args| {
                let (pa, pb) = (args.parents[0], args.parents[1]);
                let ga: Vec<f64> = g.data().iter().zip(pb.data()).map(|(gv, y)| gv * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(pa.data()).map(|(gv, x)| gv * x).collect();
                vec![Tensor::new(g.shape().to_vec(), ga), Tensor::new(g.shape().to_vec(), gb)]
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        self.push(out, vec![a], Some(Box::new(move |g, _| vec![g.map(|v| v * s)])))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v + s);
        self.push(out, vec![a], Some(Box::new(|g, _| vec![g.clone()])))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NodeId {
        let out = self.value(a).map(f);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, args| {
                let x = args.parents[0];
                let y = args.out;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(gv, (xv, yv))| gv * dfdx(*xv, *yv))
                    .collect();
                vec![Tensor::new(g.shape().to_vec(), data)]
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, |_, y| y)
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(
            a,
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x, _| {
                let t = (C * (x + A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    /// Multiplies by a fixed 0/1-scaled mask; used for dropout (mask already
    /// includes the 1/(1-p) rescale).
    pub fn mul_mask(&mut self, a: NodeId, mask: Arc<Tensor>) -> NodeId {
        assert_eq!(self.value(a).shape(), mask.shape());
        let data: Vec<f64> =
            self.value(a).data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::new(mask.shape().to_vec(), data);
        let mask_b = Arc::clone(&mask);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _| {
                let data: Vec<f64> =
                    g.data().iter().zip(mask_b.data()).map(|(gv, m)| gv * m).collect();
                vec![Tensor::new(g.shape().to_vec(), data)]
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let out = self.value(a).reshaped(shape);
        let orig = self.value(a).shape().to_vec();
        self.push(out, vec![a], Some(Box::new(move |g, _| vec![g.reshaped(orig.clone())])))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        assert!(r0 < r1 && r1 <= rows);
        let mut out = Tensor::zeros(vec![r1 - r0, cols]);
        out.data_mut().copy_from_slice(&v.data()[r0 * cols..r1 * cols]);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, args| {
                let mut gx = Tensor::zeros(args.parents[0].shape().to_vec());
                gx.data_mut()[r0 * cols..r1 * cols].copy_from_slice(g.data());
                vec![gx]
            })),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        assert!(c0 < c1 && c1 <= cols);
        let w = c1 - c0;
        let mut out = Tensor::zeros(vec![rows, w]);
        for r in 0..rows {
            for c in 0..w {
                out.data_mut()[r * w + c] = v.data()[r * cols + c0 + c];
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, args| {
                let mut gx = Tensor::zeros(args.parents[0].shape().to_vec());
                for r in 0..rows {
                    for c in 0..w {
                        gx.data_mut()[r * cols + c0 + c] = g.data()[r * w + c];
                    }
                }
                vec![gx]
            })),
        )
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "concat_rows col mismatch");
        let (ra, rb, cols) = (va.rows(), vb.rows(), va.cols());
        let mut data = Vec::with_capacity((ra + rb) * cols);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::new(vec![ra + rb, cols], data);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, _| {
                let ga = Tensor::new(vec![ra, cols], g.data()[..ra * cols].to_vec());
                let gb = Tensor::new(vec![rb, cols], g.data()[ra * cols..].to_vec());
                vec![ga, gb]
            })),
        )
    }

    /// Tile a column vector `[C,1]` to `[C,T]`.
    pub fn tile_cols(&mut self, a: NodeId, t: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.cols(), 1, "tile_cols expects a column vector");
        let rows = v.rows();
        let mut out = Tensor::zeros(vec![rows, t]);
        for r in 0..rows {
            let x = v.data()[r];
            for c in 0..t {
                out.data_mut()[r * t + c] = x;
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(vec![rows, 1]);
                for r in 0..rows {
                    gx.data_mut()[r] = g.data()[r * t..(r + 1) * t].iter().sum();
                }
                vec![gx]
            })),
        )
    }

    /// Reverse the row order of a 2-D tensor (exactly invertible permutation).
    pub fn flip_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            out.data_mut()[(rows - 1 - r) * cols..(rows - r) * cols]
                .copy_from_slice(&v.data()[r * cols..(r + 1) * cols]);
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(vec![rows, cols]);
                for r in 0..rows {
                    gx.data_mut()[(rows - 1 - r) * cols..(rows - r) * cols]
                        .copy_from_slice(&g.data()[r * cols..(r + 1) * cols]);
                }
                vec![gx]
            })),
        )
    }

    // ---- broadcast helpers ----

    /// `x[C,T] + b[C]` broadcast over columns.
    pub fn add_bias_col(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(b));
        let (rows, cols) = (vx.rows(), vx.cols());
        assert_eq!(vb.len(), rows, "bias length mismatch");
        let mut out = vx.clone();
        for r in 0..rows {
            let bv = vb.data()[r];
            for c in 0..cols {
                out.data_mut()[r * cols + c] += bv;
            }
        }
        self.push(
            out,
            vec![x, b],
            Some(Box::new(move |g, args| {
                let mut gb = Tensor::zeros(args.parents[1].shape().to_vec());
                for r in 0..rows {
                    gb.data_mut()[r] = g.data()[r * cols..(r + 1) * cols].iter().sum();
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// `x[C,T] * m[T]` broadcast over rows (time masking).
    pub fn mul_row_vec(&mut self, x: NodeId, mask: Arc<Tensor>) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        assert_eq!(mask.len(), cols, "row mask length mismatch");
        let mut out = vx.clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] *= mask.data()[c];
            }
        }
        let mask_b = Arc::clone(&mask);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = g.clone();
                for r in 0..rows {
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] *= mask_b.data()[c];
                    }
                }
                vec![gx]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(
            Tensor::scalar(total),
            vec![a],
            Some(Box::new(|g, args| {
                let gv = g.item();
                vec![Tensor::filled(args.parents[0].shape().to_vec(), gv)]
            })),
        )
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, args| {
                let ga = g.matmul_t(args.parents[1]);
                let gb = args.parents[0].t_matmul(g);
                vec![ga, gb]
            })),
        )
    }

    /// Row gather from `table[V,E]` with constant indices -> `[ids.len(), E]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let v = self.value(table);
        let (vocab, e) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(vec![ids.len(), e]);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "gather index {} out of range {}", id, vocab);
            out.data_mut()[r * e..(r + 1) * e].copy_from_slice(&v.data()[id * e..(id + 1) * e]);
        }
        self.push(
            out,
            vec![table],
            Some(Box::new(move |g, args| {
                let mut gt = Tensor::zeros(args.parents[0].shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..e {
                        gt.data_mut()[id * e + c] += g.data()[r * e + c];
                    }
                }
                vec![gt]
            })),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transposed();
        self.push(out, vec![a], Some(Box::new(|g, _| vec![g.transposed()])))
    }

    // ---- convolutions ----

    /// 1-D convolution: `x[Cin,T] * w[Cout, Cin*k] + b[Cout] -> [Cout, Tout]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> NodeId {
        let vx = self.value(x);
        let cin = vx.rows();
        let t_in = vx.cols();
        let cols = Arc::new(im2col_1d(vx, k, stride, pad, dilation));
        let y = self.value(w).matmul(&cols);
        let cols_b = Arc::clone(&cols);
        let conv = self.push(
            y,
            vec![x, w],
            Some(Box::new(move |g, args| {
                let gw = g.matmul_t(&cols_b).reshaped(args.parents[1].shape().to_vec());
                let gcols = args.parents[1].t_matmul(g);
                let gx = col2im_1d(&gcols, cin, t_in, k, stride, pad, dilation);
                vec![gx, gw]
            })),
        );
        match b {
            Some(bias) => self.add_bias_col(conv, bias),
            None => conv,
        }
    }

    /// Depthwise 1-D convolution: `x[C,T]`, `w[C,k]`, stride 1, symmetric zero
    /// padding `pad`. No cross-channel mixing.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> NodeId {
        let vx = self.value(x);
        let vw = self.value(w);
        let (c, t) = (vx.rows(), vx.cols());
        assert_eq!(vw.rows(), c, "depthwise channel mismatch");
        let k = vw.cols();
        let t_out = t + 2 * pad + 1 - k;
        let mut out = Tensor::zeros(vec![c, t_out]);
        for ch in 0..c {
            for to in 0..t_out {
                let mut acc = 0.0;
                for j in 0..k {
                    let ti = to + j;
                    if ti >= pad && ti - pad < t {
                        acc += vx.data()[ch * t + ti - pad] * vw.data()[ch * k + j];
                    }
                }
                out.data_mut()[ch * t_out + to] = acc;
            }
        }
        let conv = self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g, args| {
                let (px, pw) = (args.parents[0], args.parents[1]);
                let mut gx = Tensor::zeros(vec![c, t]);
                let mut gw = Tensor::zeros(vec![c, k]);
                for ch in 0..c {
                    for to in 0..t_out {
                        let gv = g.data()[ch * t_out + to];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let ti = to + j;
                            if ti >= pad && ti - pad < t {
                                gx.data_mut()[ch * t + ti - pad] += gv * pw.data()[ch * k + j];
                                gw.data_mut()[ch * k + j] += gv * px.data()[ch * t + ti - pad];
                            }
                        }
                    }
                }
                vec![gx, gw]
            })),
        );
        match b {
            Some(bias) => self.add_bias_col(conv, bias),
            None => conv,
        }
    }

    /// Transposed 1-D convolution: `x[Cin,T]`, `w[Cin, Cout*k]`.
    /// Output length `(T-1)*stride + k - 2*pad`.
    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vx = self.value(x);
        let t_in = vx.cols();
        let t_out = (t_in - 1) * stride + k - 2 * pad;
        // cols[co*k + j, t] contributes to out[co, t*stride + j - pad]
        let cols = self.value(w).t_matmul(vx);
        let mut out = Tensor::zeros(vec![cout, t_out]);
        for co in 0..cout {
            for j in 0..k {
                let row = &cols.data()[(co * k + j) * t_in..(co * k + j + 1) * t_in];
                for t in 0..t_in {
                    let to = (t * stride + j) as isize - pad as isize;
                    if to >= 0 && (to as usize) < t_out {
                        out.data_mut()[co * t_out + to as usize] += row[t];
                    }
                }
            }
        }
        let conv = self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g, args| {
                // gcols = im2col of g with same geometry, then
                // gx = w * gcols, gw = x * gcols^T
                let gcols = im2col_1d(g, k, stride, pad, 1);
                debug_assert_eq!(gcols.cols(), t_in);
                let gx = args.parents[1].matmul(&gcols);
                let gw = args.parents[0].matmul_t(&gcols);
                vec![gx, gw]
            })),
        );
        match b {
            Some(bias) => self.add_bias_col(conv, bias),
            None => conv,
        }
    }

    /// 2-D convolution on `x[Cin, H*W]` (logical `[Cin,H,W]`),
    /// `w[Cout, Cin*kh*kw]`, stride 2-tuple, padding 2-tuple.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        hw: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> NodeId {
        let vx = self.value(x);
        let cin = vx.rows();
        let (h, wd) = hw;
        assert_eq!(vx.cols(), h * wd, "conv2d spatial dims mismatch");
        let (kh, kw) = kernel;
        let h_out = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let w_out = (wd + 2 * pad.1 - kw) / stride.1 + 1;
        let cols = Arc::new(im2col_2d(vx, hw, kernel, stride, pad));
        let y = self.value(w).matmul(&cols);
        let cols_b = Arc::clone(&cols);
        let conv = self.push(
            y,
            vec![x, w],
            Some(Box::new(move |g, args| {
                let gw = g.matmul_t(&cols_b).reshaped(args.parents[1].shape().to_vec());
                let gcols = args.parents[1].t_matmul(g);
                let gx = col2im_2d(&gcols, cin, hw, kernel, stride, pad);
                vec![gx, gw]
            })),
        );
        let _ = (h_out, w_out);
        match b {
            Some(bias) => self.add_bias_col(conv, bias),
            None => conv,
        }
    }

    // ---- normalization ----

    /// Layer norm over the channel axis, independently per column.
    pub fn layer_norm_cols(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let (c, t) = (vx.rows(), vx.cols());
        let vg = self.value(gamma);
        let vb = self.value(beta);
        assert_eq!(vg.len(), c);
        assert_eq!(vb.len(), c);
        let mut xhat = Tensor::zeros(vec![c, t]);
        let mut inv_std = vec![0.0f64; t];
        let mut out = Tensor::zeros(vec![c, t]);
        for col in 0..t {
            let mut mean = 0.0;
            for r in 0..c {
                mean += vx.data()[r * t + col];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for r in 0..c {
                let d = vx.data()[r * t + col] - mean;
                var += d * d;
            }
            var /= c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[col] = istd;
            for r in 0..c {
                let xh = (vx.data()[r * t + col] - mean) * istd;
                xhat.data_mut()[r * t + col] = xh;
                out.data_mut()[r * t + col] = xh * vg.data()[r] + vb.data()[r];
            }
        }
        let xhat = Arc::new(xhat);
        let xhat_b = Arc::clone(&xhat);
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g, args| {
                let vg = args.parents[1];
                let mut gx = Tensor::zeros(vec![c, t]);
                let mut ggamma = Tensor::zeros(vec![c]);
                let mut gbeta = Tensor::zeros(vec![c]);
                for col in 0..t {
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xh = 0.0;
                    for r in 0..c {
                        let gv = g.data()[r * t + col];
                        let xh = xhat_b.data()[r * t + col];
                        let gy = gv * vg.data()[r];
                        sum_gy += gy;
                        sum_gy_xh += gy * xh;
                        ggamma.data_mut()[r] += gv * xh;
                        gbeta.data_mut()[r] += gv;
                    }
                    let mean_gy = sum_gy / c as f64;
                    let mean_gy_xh = sum_gy_xh / c as f64;
                    for r in 0..c {
                        let gy = g.data()[r * t + col] * vg.data()[r];
                        let xh = xhat_b.data()[r * t + col];
                        gx.data_mut()[r * t + col] =
                            inv_std[col] * (gy - mean_gy - xh * mean_gy_xh);
                    }
                }
                vec![gx, ggamma, gbeta]
            })),
        )
    }

    // ---- fused STFT magnitude ----

    /// Magnitude STFT as a single differentiable op: `x[N] -> [bins, frames]`
    /// with frame `t` centered at `t*hop` and zero padding at the edges.
    /// `frames = ceil(N / hop)`.
    pub fn stft_magnitude(&mut self, x: NodeId, plan: Arc<StftPlan>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 1, "stft input must be 1-D");
        let n = vx.len();
        let hop = plan.hop;
        let frames = n.div_ceil(hop);
        let nfft = plan.nfft;
        let bins = nfft / 2 + 1;
        let half = nfft / 2;
        let mut mag = Tensor::zeros(vec![bins, frames]);
        let mut spectra: Vec<Complex<f64>> = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        for f in 0..frames {
            let center = (f * hop) as isize;
            for (j, slot) in buf.iter_mut().enumerate() {
                let idx = center - half as isize + j as isize;
                let v = if idx >= 0 && (idx as usize) < n { vx.data()[idx as usize] } else { 0.0 };
                *slot = Complex::new(v * plan.window[j], 0.0);
            }
            plan.fft_fwd.process(&mut buf);
            for b in 0..bins {
                let c = buf[b];
                spectra.push(c);
                mag.data_mut()[b * frames + f] = (c.re * c.re + c.im * c.im + plan.mag_eps).sqrt();
            }
        }
        let plan_b = Arc::clone(&plan);
        let spectra = Arc::new(spectra);
        let mag_arc = Arc::new(mag);
        let mag_for_back = Arc::clone(&mag_arc);
        let out = Tensor::new(vec![bins, frames], mag_arc.data().to_vec());
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _| {
                let mut gx = Tensor::zeros(vec![n]);
                let mut gbuf = vec![Complex::new(0.0, 0.0); nfft];
                for f in 0..frames {
                    for slot in gbuf.iter_mut() {
                        *slot = Complex::new(0.0, 0.0);
                    }
                    for b in 0..bins {
                        let m = mag_for_back.data()[b * frames + f];
                        let gm = g.data()[b * frames + f] / m;
                        let c = spectra[f * bins + b];
                        // dL/d(re,im) packed as a complex sequence
                        gbuf[b] = Complex::new(gm * c.re, gm * c.im);
                    }
                    // dL/dx_j = Re( sum_k G_k e^{+2pi i k j / nfft} ): an
                    // unnormalized inverse FFT of the gradient spectrum.
                    plan_b.fft_inv.process(&mut gbuf);
                    let center = (f * hop) as isize;
                    for (j, gv) in gbuf.iter().enumerate() {
                        let idx = center - half as isize + j as isize;
                        if idx >= 0 && (idx as usize) < n {
                            gx.data_mut()[idx as usize] += gv.re * plan_b.window[j];
                        }
                    }
                }
                vec![gx]
            })),
        )
    }
}

/// Precomputed FFT machinery for [`Graph::stft_magnitude`].
pub struct StftPlan {
    pub nfft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    pub mag_eps: f64,
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(nfft: usize, hop: usize, window: Vec<f64>) -> Arc<Self> {
        assert_eq!(window.len(), nfft);
        let mut planner = FftPlanner::new();
        Arc::new(StftPlan {
            nfft,
            hop,
            window,
            mag_eps: 1e-12,
            fft_fwd: planner.plan_fft_forward(nfft),
            fft_inv: planner.plan_fft_inverse(nfft),
        })
    }

    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }
}

// ---- im2col helpers ----

pub fn im2col_1d(x: &Tensor, k: usize, stride: usize, pad: usize, dilation: usize) -> Tensor {
    let (cin, t) = (x.rows(), x.cols());
    let span = dilation * (k - 1) + 1;
    let t_out = (t + 2 * pad).saturating_sub(span) / stride + 1;
    let mut cols = Tensor::zeros(vec![cin * k, t_out]);
    for c in 0..cin {
        for j in 0..k {
            let row = (c * k + j) * t_out;
            for to in 0..t_out {
                let ti = to * stride + j * dilation;
                if ti >= pad && ti - pad < t {
                    cols.data_mut()[row + to] = x.data()[c * t + ti - pad];
                }
            }
        }
    }
    cols
}

pub fn col2im_1d(
    cols: &Tensor,
    cin: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Tensor {
    let t_out = cols.cols();
    let mut x = Tensor::zeros(vec![cin, t]);
    for c in 0..cin {
        for j in 0..k {
            let row = (c * k + j) * t_out;
            for to in 0..t_out {
                let ti = to * stride + j * dilation;
                if ti >= pad && ti - pad < t {
                    x.data_mut()[c * t + ti - pad] += cols.data()[row + to];
                }
            }
        }
    }
    x
}

fn im2col_2d(
    x: &Tensor,
    hw: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let cin = x.rows();
    let (h, w) = hw;
    let (kh, kw) = kernel;
    let h_out = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let w_out = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut cols = Tensor::zeros(vec![cin * kh * kw, h_out * w_out]);
    for c in 0..cin {
        for jh in 0..kh {
            for jw in 0..kw {
                let row = ((c * kh + jh) * kw + jw) * h_out * w_out;
                for oh in 0..h_out {
                    let ih = oh * stride.0 + jh;
                    if ih < pad.0 || ih - pad.0 >= h {
                        continue;
                    }
                    for ow in 0..w_out {
                        let iw = ow * stride.1 + jw;
                        if iw >= pad.1 && iw - pad.1 < w {
                            cols.data_mut()[row + oh * w_out + ow] =
                                x.data()[c * h * w + (ih - pad.0) * w + (iw - pad.1)];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_2d(
    cols: &Tensor,
    cin: usize,
    hw: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let (h, w) = hw;
    let (kh, kw) = kernel;
    let h_out = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let w_out = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut x = Tensor::zeros(vec![cin, h * w]);
    for c in 0..cin {
        for jh in 0..kh {
            for jw in 0..kw {
                let row = ((c * kh + jh) * kw + jw) * h_out * w_out;
                for oh in 0..h_out {
                    let ih = oh * stride.0 + jh;
                    if ih < pad.0 || ih - pad.0 >= h {
                        continue;
                    }
                    for ow in 0..w_out {
                        let iw = ow * stride.1 + jw;
                        if iw >= pad.1 && iw - pad.1 < w {
                            x.data_mut()[c * h * w + (ih - pad.0) * w + (iw - pad.1)] +=
                                cols.data()[row + oh * w_out + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a leaf tensor against analytic gradients.
    pub fn check_grad(
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
        x0: &Tensor,
        tol: f64,
    ) {
        let mut g = Graph::new(false);
        let x = g.leaf_with_grad(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("leaf gradient").clone();

        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut gp = Graph::new(false);
            let xn = gp.input(xp);
            let lp = build(&mut gp, xn);
            let fp = gp.value(lp).item();

            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let mut gm = Graph::new(false);
            let xn = gm.input(xm);
            let lm = build(&mut gm, xn);
            let fm = gm.value(lm).item();

            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((an - fd) / denom).abs() < tol,
                "grad mismatch at {}: analytic {} vs fd {}",
                i,
                an,
                fd
            );
        }
    }

    fn rnd_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        // small deterministic pseudo-random fill
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let data: Vec<f64> = (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s as f64 / u64::MAX as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn grad_elementwise_chain() {
        let x0 = rnd_tensor(vec![3, 4], 7);
        check_grad(
            |g, x| {
                let a = g.tanh(x);
                let b = g.gelu(a);
                let c = g.square(b);
                let d = g.sigmoid(c);
                g.mean(d)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_and_slice() {
        let x0 = rnd_tensor(vec![4, 5], 3);
        let w = rnd_tensor(vec![3, 4], 4);
        check_grad(
            |g, x| {
                let wn = g.input(w.clone());
                let y = g.matmul(wn, x);
                let s = g.slice_rows(y, 1, 3);
                let s2 = g.slice_cols(s, 0, 2);
                let a = g.abs(s2);
                g.sum(a)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn grad_conv1d() {
        let x0 = rnd_tensor(vec![3, 7], 11);
        let w = rnd_tensor(vec![4, 3 * 3], 12);
        check_grad(
            |g, x| {
                let wn = g.leaf_with_grad(w.clone());
                let y = g.conv1d(x, wn, None, 3, 2, 1, 1);
                let a = g.square(y);
                g.sum(a)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn grad_conv_transpose1d() {
        let x0 = rnd_tensor(vec![3, 5], 21);
        let w = rnd_tensor(vec![3, 2 * 4], 22);
        check_grad(
            |g, x| {
                let wn = g.input(w.clone());
                let y = g.conv_transpose1d(x, wn, None, 2, 4, 2, 1);
                let a = g.abs(y);
                g.sum(a)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn conv_transpose_length() {
        // stride 2, k 4, pad 1 doubles the length exactly
        let mut g = Graph::new(false);
        let x = g.input(Tensor::zeros(vec![3, 5]));
        let w = g.input(Tensor::zeros(vec![3, 2 * 4]));
        let y = g.conv_transpose1d(x, w, None, 2, 4, 2, 1);
        assert_eq!(g.value(y).shape(), &[2, 10]);
    }

    #[test]
    fn grad_layer_norm() {
        let x0 = rnd_tensor(vec![5, 3], 31);
        let gamma = rnd_tensor(vec![5], 32);
        let beta = rnd_tensor(vec![5], 33);
        check_grad(
            |g, x| {
                let gm = g.input(gamma.clone());
                let bt = g.input(beta.clone());
                let y = g.layer_norm_cols(x, gm, bt, 1e-5);
                let a = g.square(y);
                g.mean(a)
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn grad_depthwise_conv() {
        let x0 = rnd_tensor(vec![4, 6], 41);
        let w = rnd_tensor(vec![4, 3], 42);
        check_grad(
            |g, x| {
                let wn = g.input(w.clone());
                let y = g.depthwise_conv1d(x, wn, None, 1);
                g.sum(y)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d() {
        let x0 = rnd_tensor(vec![2, 5 * 6], 51);
        let w = rnd_tensor(vec![3, 2 * 3 * 3], 52);
        check_grad(
            |g, x| {
                let wn = g.input(w.clone());
                let y = g.conv2d(x, wn, None, (5, 6), (3, 3), (2, 2), (1, 1));
                let a = g.square(y);
                g.sum(a)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn grad_stft_magnitude() {
        let x0 = rnd_tensor(vec![40], 61);
        let window: Vec<f64> = (0..16)
            .map(|i| {
                let p = std::f64::consts::PI * (i as f64 + 0.5) / 16.0;
                p.sin() * p.sin()
            })
            .collect();
        let plan = StftPlan::new(16, 8, window);
        check_grad(
            |g, x| {
                let m = g.stft_magnitude(x, Arc::clone(&plan));
                let a = g.square(m);
                g.mean(a)
            },
            &x0,
            1e-4,
        );
    }

    #[test]
    fn grad_gather_tile_concat() {
        let table = rnd_tensor(vec![5, 3], 71);
        check_grad(
            |g, t| {
                let rows = g.gather_rows(t, vec![0, 2, 2, 4]);
                let tr = g.transpose(rows);
                let col = g.slice_cols(tr, 0, 1);
                let tiled = g.tile_cols(col, 4);
                let cat = g.concat_rows(tr, tiled);
                let flipped = g.flip_rows(cat);
                let s = g.square(flipped);
                g.mean(s)
            },
            &table,
            1e-5,
        );
    }

    #[test]
    fn stft_frame_count() {
        let mut g = Graph::new(false);
        let x = g.input(Tensor::zeros(vec![24000]));
        let window = vec![1.0; 1024];
        let plan = StftPlan::new(1024, 256, window);
        let m = g.stft_magnitude(x, plan);
        assert_eq!(g.value(m).shape(), &[513, 94]);
    }
}
