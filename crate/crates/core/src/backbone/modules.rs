//! Neural modules of the synthesizer: text encoder, posterior encoder,
//! coupling flow, stochastic duration predictor, waveform decoder and the
//! optional waveform discriminator.
//!
//! Global conditioning is input concatenation: the conditioning vector is
//! tiled over time, concatenated with the module input and projected back to
//! the module width by the first convolution of each conditioned module.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::nn::{add_embedding, add_zeros, Conv1d, ConvTranspose1d, LayerNorm, ParamId, ParamSink, ParamStore};
use crate::tensor::Tensor;

/// Text encoder: token embeddings, convolution blocks, per-token prior stats.
pub struct TextEncoder {
    pub embed: ParamId,
    blocks: Vec<TextBlock>,
    final_norm: LayerNorm,
    stats: Conv1d,
    pub hidden: usize,
    pub latent: usize,
}

struct TextBlock {
    norm: LayerNorm,
    conv_a: Conv1d,
    conv_b: Conv1d,
}

impl TextEncoder {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        vocab: usize,
        hidden: usize,
        latent: usize,
        num_blocks: usize,
        kernel: usize,
    ) -> Self {
        let embed = add_embedding(ps, rng, "text.embed".into(), vocab, hidden);
        let blocks = (0..num_blocks)
            .map(|i| TextBlock {
                norm: LayerNorm::new(ps, &format!("text.block.{i}.norm"), hidden),
                conv_a: Conv1d::new(
                    ps,
                    rng,
                    &format!("text.block.{i}.conv_a"),
                    hidden,
                    hidden,
                    kernel,
                    1,
                    kernel / 2,
                    1,
                ),
                conv_b: Conv1d::new(ps, rng, &format!("text.block.{i}.conv_b"), hidden, hidden, 1, 1, 0, 1),
            })
            .collect();
        let final_norm = LayerNorm::new(ps, "text.final_norm", hidden);
        let stats = Conv1d::new(ps, rng, "text.stats", hidden, 2 * latent, 1, 1, 0, 1);
        TextEncoder { embed, blocks, final_norm, stats, hidden, latent }
    }

    /// Returns (hidden states `[h,S]`, prior mean `[z,S]`, prior log-std `[z,S]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        tokens: &[usize],
    ) -> (NodeId, NodeId, NodeId) {
        assert!(!tokens.is_empty());
        let table = g.param(Arc::clone(ps.get(self.embed)), self.embed);
        let rows = g.gather_rows(table, tokens.to_vec()); // [S, h]
        let mut x = g.transpose(rows); // [h, S]
        for block in &self.blocks {
            let n = block.norm.forward(g, ps, x);
            let a = block.conv_a.forward(g, ps, n);
            let a = g.gelu(a);
            let b = block.conv_b.forward(g, ps, a);
            x = g.add(x, b);
        }
        let x = self.final_norm.forward(g, ps, x);
        let stats = self.stats.forward(g, ps, x);
        let m = g.slice_rows(stats, 0, self.latent);
        let logs = g.slice_rows(stats, self.latent, 2 * self.latent);
        (x, m, logs)
    }
}

/// Posterior encoder: linear spectrogram + condition -> latent stats + sample.
pub struct PosteriorEncoder {
    pre: Conv1d,
    layers: Vec<Conv1d>,
    stats: Conv1d,
    pub latent: usize,
}

impl PosteriorEncoder {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        spec_bins: usize,
        gdim: usize,
        channels: usize,
        latent: usize,
        num_layers: usize,
        kernel: usize,
    ) -> Self {
        let pre = Conv1d::new(ps, rng, "posterior.pre", spec_bins + gdim, channels, 1, 1, 0, 1);
        let layers = (0..num_layers)
            .map(|i| {
                Conv1d::new(
                    ps,
                    rng,
                    &format!("posterior.layer.{i}"),
                    channels,
                    channels,
                    kernel,
                    1,
                    kernel / 2,
                    1,
                )
            })
            .collect();
        let stats = Conv1d::new(ps, rng, "posterior.stats", channels, 2 * latent, 1, 1, 0, 1);
        PosteriorEncoder { pre, layers, stats, latent }
    }

    /// Returns (m_q `[z,T]`, logs_q `[z,T]`, sample z `[z,T]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        spec: NodeId,
        cond: NodeId,
        noise: &Tensor,
    ) -> (NodeId, NodeId, NodeId) {
        let t = g.value(spec).cols();
        let cond_tiled = g.tile_cols(cond, t);
        let x = g.concat_rows(spec, cond_tiled);
        let mut x = self.pre.forward(g, ps, x);
        x = g.gelu(x);
        for layer in &self.layers {
            let y = layer.forward(g, ps, x);
            let y = g.gelu(y);
            x = g.add(x, y);
        }
        let stats = self.stats.forward(g, ps, x);
        let m = g.slice_rows(stats, 0, self.latent);
        let logs = g.slice_rows(stats, self.latent, 2 * self.latent);
        // z = m + exp(logs) * eps  (reparameterized sample)
        let eps = g.input(noise.clone());
        let std = g.exp(logs);
        let scaled = g.mul(std, eps);
        let z = g.add(m, scaled);
        (m, logs, z)
    }
}

/// Mean-only coupling flow; exactly invertible, zero log-determinant.
pub struct Flow {
    steps: Vec<CouplingStep>,
    pub latent: usize,
}

struct CouplingStep {
    conv_a: Conv1d,
    conv_out_w: ParamId,
    conv_out_b: ParamId,
    half: usize,
}

impl Flow {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        latent: usize,
        gdim: usize,
        channels: usize,
        num_steps: usize,
        kernel: usize,
    ) -> Self {
        assert_eq!(latent % 2, 0, "flow latent width must be even");
        let half = latent / 2;
        let steps = (0..num_steps)
            .map(|i| CouplingStep {
                conv_a: Conv1d::new(
                    ps,
                    rng,
                    &format!("flow.step.{i}.conv_a"),
                    half + gdim,
                    channels,
                    kernel,
                    1,
                    kernel / 2,
                    1,
                ),
                // zero-initialized head: the flow starts as the identity
                conv_out_w: add_zeros(ps, format!("flow.step.{i}.conv_out.w"), vec![half, channels]),
                conv_out_b: add_zeros(ps, format!("flow.step.{i}.conv_out.b"), vec![half]),
                half,
            })
            .collect();
        Flow { steps, latent }
    }

    fn shift(&self, g: &mut Graph, ps: &ParamStore, step: &CouplingStep, z0: NodeId, cond: NodeId) -> NodeId {
        let t = g.value(z0).cols();
        let cond_tiled = g.tile_cols(cond, t);
        let x = g.concat_rows(z0, cond_tiled);
        let hid = step.conv_a.forward(g, ps, x);
        let hid = g.gelu(hid);
        let w = g.param(Arc::clone(ps.get(step.conv_out_w)), step.conv_out_w);
        let b = g.param(Arc::clone(ps.get(step.conv_out_b)), step.conv_out_b);
        let m = g.matmul(w, hid);
        g.add_bias_col(m, b)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, z: NodeId, cond: NodeId) -> NodeId {
        let mut x = z;
        for step in &self.steps {
            let z0 = g.slice_rows(x, 0, step.half);
            let z1 = g.slice_rows(x, step.half, self.latent);
            let m = self.shift(g, ps, step, z0, cond);
            let z1p = g.add(z1, m);
            let joined = g.concat_rows(z0, z1p);
            x = g.flip_rows(joined);
        }
        x
    }

    pub fn inverse(&self, g: &mut Graph, ps: &ParamStore, z: NodeId, cond: NodeId) -> NodeId {
        let mut x = z;
        for step in self.steps.iter().rev() {
            let unflipped = g.flip_rows(x);
            let z0 = g.slice_rows(unflipped, 0, step.half);
            let z1p = g.slice_rows(unflipped, step.half, self.latent);
            let m = self.shift(g, ps, step, z0, cond);
            let z1 = g.sub(z1p, m);
            x = g.concat_rows(z0, z1);
        }
        x
    }
}

/// Stochastic duration predictor: per-token log-duration distribution
/// parameters (mu, log sigma), conditioned on g. Training minimizes the
/// log-normal negative log likelihood of the alignment durations; inference
/// samples `exp(mu + sigma * eps * noise_scale)`.
pub struct DurationPredictor {
    conv_a: Conv1d,
    conv_b: Conv1d,
    head: Conv1d,
    norm: LayerNorm,
}

impl DurationPredictor {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        hidden: usize,
        gdim: usize,
        channels: usize,
        kernel: usize,
    ) -> Self {
        DurationPredictor {
            conv_a: Conv1d::new(
                ps,
                rng,
                "duration.conv_a",
                hidden + gdim,
                channels,
                kernel,
                1,
                kernel / 2,
                1,
            ),
            norm: LayerNorm::new(ps, "duration.norm", channels),
            conv_b: Conv1d::new(ps, rng, "duration.conv_b", channels, channels, kernel, 1, kernel / 2, 1),
            head: Conv1d::new(ps, rng, "duration.head", channels, 2, 1, 1, 0, 1),
        }
    }

    /// Returns (mu `[1,S]`, log_sigma `[1,S]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        text_hidden: NodeId,
        cond: NodeId,
    ) -> (NodeId, NodeId) {
        let s = g.value(text_hidden).cols();
        let cond_tiled = g.tile_cols(cond, s);
        let x = g.concat_rows(text_hidden, cond_tiled);
        let x = self.conv_a.forward(g, ps, x);
        let x = g.gelu(x);
        let x = self.norm.forward(g, ps, x);
        let x = self.conv_b.forward(g, ps, x);
        let x = g.gelu(x);
        let out = self.head.forward(g, ps, x);
        let mu = g.slice_rows(out, 0, 1);
        let log_sigma = g.slice_rows(out, 1, 2);
        (mu, log_sigma)
    }

    /// Log-normal NLL of observed durations (terms independent of the
    /// parameters dropped): mean_j [ log_sigma_j + 0.5 (ln d_j - mu_j)^2 / sigma_j^2 ].
    pub fn nll(
        &self,
        g: &mut Graph,
        mu: NodeId,
        log_sigma: NodeId,
        durations: &[usize],
    ) -> NodeId {
        let s = durations.len();
        let target =
            Tensor::new(vec![1, s], durations.iter().map(|&d| (d as f64).ln()).collect());
        let t = g.input(target);
        let diff = g.sub(t, mu);
        let sq = g.square(diff);
        let inv_var = {
            let neg2 = g.scale(log_sigma, -2.0);
            g.exp(neg2)
        };
        let quad = g.mul(sq, inv_var);
        let half_quad = g.scale(quad, 0.5);
        let total = g.add(log_sigma, half_quad);
        g.mean(total)
    }

    /// Integer durations at a given noise scale (deterministic at 0).
    pub fn sample_durations(
        &self,
        mu: &Tensor,
        log_sigma: &Tensor,
        noise_scale: f64,
        seed: u64,
        max_frames_per_token: usize,
    ) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = mu.cols();
        (0..s)
            .map(|j| {
                let eps: f64 = if noise_scale > 0.0 {
                    // Box-Muller from two uniform draws
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen::<f64>();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                } else {
                    0.0
                };
                let ln_d = mu.at2(0, j) + log_sigma.at2(0, j).exp() * eps * noise_scale;
                (ln_d.exp().round() as usize).clamp(1, max_frames_per_token)
            })
            .collect()
    }
}

/// Upsampling waveform decoder. Strides multiply to the spectrogram hop, so
/// the output is exactly `hop * frames` samples.
pub struct Decoder {
    pre: Conv1d,
    ups: Vec<ConvTranspose1d>,
    res_a: Vec<Conv1d>,
    res_b: Vec<Conv1d>,
    post: Conv1d,
    pub hop: usize,
}

impl Decoder {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        latent: usize,
        gdim: usize,
        initial: usize,
        strides: &[usize],
    ) -> Self {
        let hop: usize = strides.iter().product();
        let pre = Conv1d::new(ps, rng, "decoder.pre", latent + gdim, initial, 7, 1, 3, 1);
        let mut ups = Vec::new();
        let mut res_a = Vec::new();
        let mut res_b = Vec::new();
        let mut ch = initial;
        for (i, &s) in strides.iter().enumerate() {
            let out_ch = (ch / 2).max(4);
            ups.push(ConvTranspose1d::new(
                ps,
                rng,
                &format!("decoder.up.{i}"),
                ch,
                out_ch,
                2 * s,
                s,
                s / 2,
            ));
            res_a.push(Conv1d::new(ps, rng, &format!("decoder.res.{i}.a"), out_ch, out_ch, 3, 1, 1, 1));
            res_b.push(Conv1d::new(ps, rng, &format!("decoder.res.{i}.b"), out_ch, out_ch, 3, 1, 3, 3));
            ch = out_ch;
        }
        let post = Conv1d::new(ps, rng, "decoder.post", ch, 1, 7, 1, 3, 1);
        Decoder { pre, ups, res_a, res_b, post, hop }
    }

    /// `z [latent, T]` -> waveform node `[hop*T]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, z: NodeId, cond: NodeId) -> NodeId {
        let t = g.value(z).cols();
        let cond_tiled = g.tile_cols(cond, t);
        let x = g.concat_rows(z, cond_tiled);
        let mut x = self.pre.forward(g, ps, x);
        for i in 0..self.ups.len() {
            x = g.leaky_relu(x, 0.1);
            x = self.ups[i].forward(g, ps, x);
            let r = g.leaky_relu(x, 0.1);
            let r = self.res_a[i].forward(g, ps, r);
            let r = g.leaky_relu(r, 0.1);
            let r = self.res_b[i].forward(g, ps, r);
            x = g.add(x, r);
        }
        let x = g.leaky_relu(x, 0.1);
        let x = self.post.forward(g, ps, x);
        let x = g.tanh(x);
        let n = g.value(x).cols();
        g.reshape(x, vec![n])
    }
}

/// Two-scale waveform discriminator (least-squares objective); used by the
/// full preset, disabled in the desk preset.
pub struct Discriminator {
    scales: Vec<DiscScale>,
}

struct DiscScale {
    convs: Vec<Conv1d>,
    head: Conv1d,
    pool: usize,
}

impl Discriminator {
    pub fn new<S: ParamSink>(ps: &mut S, rng: &mut ChaCha8Rng, base: usize) -> Self {
        let mut scales = Vec::new();
        for (si, pool) in [1usize, 4].into_iter().enumerate() {
            let widths = [base, base * 2, base * 4, base * 4];
            let mut convs = Vec::new();
            let mut in_ch = 1;
            for (ci, &w) in widths.iter().enumerate() {
                let stride = if ci + 1 == widths.len() { 1 } else { 4 };
                let k = if ci + 1 == widths.len() { 5 } else { 15 };
                convs.push(Conv1d::new(
                    ps,
                    rng,
                    &format!("disc.scale.{si}.conv.{ci}"),
                    in_ch,
                    w,
                    k,
                    stride,
                    k / 2,
                    1,
                ));
                in_ch = w;
            }
            let head = Conv1d::new(ps, rng, &format!("disc.scale.{si}.head"), in_ch, 1, 3, 1, 1, 1);
            scales.push(DiscScale { convs, head, pool });
        }
        Discriminator { scales }
    }

    /// Per-scale (feature maps, logits) for a waveform node `[N]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        wav: NodeId,
    ) -> Vec<(Vec<NodeId>, NodeId)> {
        let n = g.value(wav).len();
        let mut out = Vec::new();
        for scale in &self.scales {
            let mut x = g.reshape(wav, vec![1, n]);
            if scale.pool > 1 {
                // strided average pooling via a fixed box kernel
                let k = scale.pool;
                let kernel = Arc::new(Tensor::filled(vec![1, k], 1.0 / k as f64));
                let kn = g.constant(kernel);
                x = g.conv1d(x, kn, None, k, k, 0, 1);
            }
            let mut feats = Vec::new();
            for conv in &scale.convs {
                x = conv.forward(g, ps, x);
                x = g.leaky_relu(x, 0.1);
                feats.push(x);
            }
            let logits = scale.head.forward(g, ps, x);
            out.push((feats, logits));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn flow_identity_at_init() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = Flow::new(&mut ps, &mut rng, 8, 6, 16, 2, 5);
        let mut g = Graph::new(false);
        let z0 = randn(&mut rng, vec![8, 10]);
        let z = g.input(z0.clone());
        let cond = g.input(randn(&mut rng, vec![6, 1]));
        let out = flow.forward(&mut g, &ps, z, cond);
        // identity up to the deterministic channel flips
        let inv = flow.inverse(&mut g, &ps, out, cond);
        assert_eq!(g.value(inv).data(), z0.data());
        // zero-initialized heads: forward output is just the flips of z
        let mut expect = z0.clone();
        for _ in 0..2 {
            expect = expect_flip(&expect);
        }
        assert_eq!(g.value(out).data(), expect.data());
    }

    fn expect_flip(x: &Tensor) -> Tensor {
        let (r, c) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(vec![r, c]);
        for i in 0..r {
            for j in 0..c {
                out.set2(r - 1 - i, j, x.at2(i, j));
            }
        }
        out
    }

    #[test]
    fn flow_roundtrip_after_random_weights() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow = Flow::new(&mut ps, &mut rng, 8, 4, 16, 2, 5);
        // randomize the zero-initialized heads to simulate a trained flow
        let ids: Vec<_> = ps
            .iter()
            .filter(|(_, n, _)| n.contains("conv_out"))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            let shape = ps.get(id).shape().to_vec();
            ps.set(id, randn(&mut rng, shape));
        }
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let z0 = randn(&mut rng, vec![8, 7]);
            let mut g = Graph::new(false);
            let z = g.input(z0.clone());
            let cond = g.input(randn(&mut rng, vec![4, 1]));
            let f = flow.forward(&mut g, &ps, z, cond);
            let b = flow.inverse(&mut g, &ps, f, cond);
            for (a, b) in z0.data().iter().zip(g.value(b).data()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-8, "flow round-trip max abs error {worst}");
    }

    #[test]
    fn flow_condition_is_live() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flow = Flow::new(&mut ps, &mut rng, 4, 3, 8, 2, 3);
        let ids: Vec<_> =
            ps.iter().filter(|(_, n, _)| n.contains("conv_out")).map(|(id, _, _)| id).collect();
        for id in ids {
            let shape = ps.get(id).shape().to_vec();
            ps.set(id, randn(&mut rng, shape));
        }
        let z0 = randn(&mut rng, vec![4, 5]);
        let c1 = randn(&mut rng, vec![3, 1]);
        let c2 = randn(&mut rng, vec![3, 1]);
        let mut g = Graph::new(false);
        let z = g.input(z0.clone());
        let ca = g.input(c1);
        let cb = g.input(c2);
        let fa = flow.forward(&mut g, &ps, z, ca);
        let fb = flow.forward(&mut g, &ps, z, cb);
        assert_ne!(g.value(fa).data(), g.value(fb).data());
    }

    #[test]
    fn decoder_length_is_hop_times_frames() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = Decoder::new(&mut ps, &mut rng, 8, 4, 16, &[8, 8, 2, 2]);
        assert_eq!(dec.hop, 256);
        for t in [1usize, 3, 32] {
            let mut g = Graph::new(false);
            let z = g.input(randn(&mut rng, vec![8, t]));
            let cond = g.input(randn(&mut rng, vec![4, 1]));
            let wav = dec.forward(&mut g, &ps, z, cond);
            assert_eq!(g.value(wav).shape(), &[256 * t], "frames {t}");
        }
    }

    #[test]
    fn coupling_layer_gradcheck() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flow = Flow::new(&mut ps, &mut rng, 4, 2, 6, 1, 3);
        let ids: Vec<_> =
            ps.iter().filter(|(_, n, _)| n.contains("conv_out")).map(|(id, _, _)| id).collect();
        for id in ids {
            let shape = ps.get(id).shape().to_vec();
            ps.set(id, randn(&mut rng, shape));
        }
        let z0 = randn(&mut rng, vec![4, 5]);
        let cond_v = randn(&mut rng, vec![2, 1]);

        let mut g = Graph::new(false);
        let z = g.leaf_with_grad(z0.clone());
        let cond = g.input(cond_v.clone());
        let f = flow.forward(&mut g, &ps, z, cond);
        let sq = g.square(f);
        let loss = g.mean(sq);
        let grads = g.backward(loss);
        let analytic = grads.get(z).unwrap().clone();

        let eval = |zt: Tensor| {
            let mut g = Graph::new(false);
            let z = g.input(zt);
            let cond = g.input(cond_v.clone());
            let f = flow.forward(&mut g, &ps, z, cond);
            let sq = g.square(f);
            let loss = g.mean(sq);
            g.value(loss).item()
        };
        let h = 1e-6;
        for i in 0..z0.len() {
            let mut zp = z0.clone();
            zp.data_mut()[i] += h;
            let mut zm = z0.clone();
            zm.data_mut()[i] -= h;
            let fd = (eval(zp) - eval(zm)) / (2.0 * h);
            let an = analytic.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-10);
            assert!(((an - fd) / denom).abs() < 1e-4, "rel err at {i}: {an} vs {fd}");
        }
    }

    #[test]
    fn duration_predictor_gradcheck_and_determinism() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dp = DurationPredictor::new(&mut ps, &mut rng, 6, 3, 8, 3);
        let x0 = randn(&mut rng, vec![6, 4]);
        let cond_v = randn(&mut rng, vec![3, 1]);
        let durs = vec![2usize, 1, 3, 1];

        let mut g = Graph::new(false);
        let x = g.leaf_with_grad(x0.clone());
        let cond = g.input(cond_v.clone());
        let (mu, ls) = dp.forward(&mut g, &ps, x, cond);
        let loss = dp.nll(&mut g, mu, ls, &durs);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();

        let eval = |xt: Tensor| {
            let mut g = Graph::new(false);
            let x = g.input(xt);
            let cond = g.input(cond_v.clone());
            let (mu, ls) = dp.forward(&mut g, &ps, x, cond);
            let loss = dp.nll(&mut g, mu, ls, &durs);
            g.value(loss).item()
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(xp) - eval(xm)) / (2.0 * h);
            let an = analytic.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-10);
            assert!(((an - fd) / denom).abs() < 1e-4, "rel err at {i}: {an} vs {fd}");
        }

        // zero noise scale on identical stats -> identical durations
        let mu_t = Tensor::new(vec![1, 3], vec![0.4, 1.1, 0.0]);
        let ls_t = Tensor::new(vec![1, 3], vec![0.0, -0.5, 0.2]);
        let a = dp.sample_durations(&mu_t, &ls_t, 0.0, 1, 100);
        let b = dp.sample_durations(&mu_t, &ls_t, 0.0, 2, 100);
        assert_eq!(a, b);
        assert!(a.iter().all(|&d| d >= 1));
    }

    #[test]
    fn discriminator_runs_and_gets_gradients() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let disc = Discriminator::new(&mut ps, &mut rng, 4);
        let mut g = Graph::new(true);
        let wav = g.input(randn(&mut rng, vec![1024]));
        let outs = disc.forward(&mut g, &ps, wav);
        assert_eq!(outs.len(), 2);
        let mut total: Option<NodeId> = None;
        for (feats, logits) in &outs {
            assert!(!feats.is_empty());
            let sq = g.square(*logits);
            let m = g.mean(sq);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        let loss = total.unwrap();
        let grads = g.backward(loss);
        let pgrads = g.param_grads(&grads);
        assert_eq!(pgrads.len(), ps.len());
    }
}
