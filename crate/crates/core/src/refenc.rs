//! Reference encoder: discrete codes -> utterance-level style embedding.
//!
//! The main path stacks six shape-preserving Mixer blocks (depthwise 1-D
//! convolution over time, then a position-wise feed-forward over channels,
//! both pre-normalized with residual connections) at the input channel width,
//! projects to the model hidden size and pools over time with a single GRU
//! whose final state is the style embedding. A strided-CNN encoder with the
//! same GRU pooling is provided for the architecture ablation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::CodeMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    add_embedding, dropout, Conv2d, DepthwiseConv1d, Gru, LayerNorm, Linear, ParamId, ParamSink,
    ParamStore,
};
use crate::tensor::Tensor;

/// Utterance-level style vector of length `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    pub values: Vec<f64>,
}

impl StyleEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("style embedding contains non-finite values".into()));
        }
        Ok(StyleEmbedding { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How code indices become real-valued channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CodeInputMode {
    /// Affine map of each index to [-1, 1]: channel (i,t) = 2*s/(K-1) - 1.
    Raw,
    /// Sum of learned per-codebook embeddings; channel count becomes `dim`.
    Embed { dim: usize },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct RefEncoderConfig {
    /// Channels entering the Mixer stack (D for raw codes, the embed dim, or
    /// the spectrogram bin count for the spectral-input ablation).
    pub input_channels: usize,
    /// Hidden size of the TTS model; also the GRU state size.
    pub hidden: usize,
    pub num_blocks: usize,
    pub kernel: usize,
    pub expansion: usize,
    pub dropout: f64,
    pub input_mode: CodeInputMode,
    pub num_codebooks: usize,
    pub codebook_size: usize,
}

impl RefEncoderConfig {
    pub fn desk(num_codebooks: usize, codebook_size: usize, hidden: usize) -> Self {
        RefEncoderConfig {
            input_channels: num_codebooks,
            hidden,
            num_blocks: 6,
            kernel: 3,
            expansion: 4,
            dropout: 0.1,
            input_mode: CodeInputMode::Raw,
            num_codebooks,
            codebook_size,
        }
    }
}

/// Normalize raw code indices into real channels.
///
/// A monotone affine bijection of `[0, K)` onto `[-1, 1]` per channel; a
/// single-entry codebook maps to 0. Embed mode is handled inside the encoder
/// because it owns the embedding tables.
pub fn code_to_channels(codes: &CodeMatrix) -> Result<Tensor> {
    codes.validate()?;
    let d = codes.num_codebooks;
    let t = codes.frames();
    let k = codes.codebook_size;
    let mut out = Tensor::zeros(vec![d, t]);
    for ch in 0..d {
        for f in 0..t {
            let idx = codes.at(ch, f) as f64;
            let v = if k > 1 { 2.0 * idx / (k as f64 - 1.0) - 1.0 } else { 0.0 };
            out.data_mut()[ch * t + f] = v;
        }
    }
    Ok(out)
}

/// One shape-preserving Mixer block at channel width `c`.
pub struct MixerBlock {
    norm_time: LayerNorm,
    pub time_mix: DepthwiseConv1d,
    norm_channel: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    dropout_p: f64,
}

impl MixerBlock {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        kernel: usize,
        expansion: usize,
        dropout_p: f64,
    ) -> Self {
        MixerBlock {
            norm_time: LayerNorm::new(ps, &format!("{prefix}.norm_time"), channels),
            time_mix: DepthwiseConv1d::new(ps, rng, &format!("{prefix}.time_mix"), channels, kernel),
            norm_channel: LayerNorm::new(ps, &format!("{prefix}.norm_channel"), channels),
            ff_in: Linear::new(ps, rng, &format!("{prefix}.ff_in"), channels, channels * expansion, true),
            ff_out: Linear::new(ps, rng, &format!("{prefix}.ff_out"), channels * expansion, channels, true),
            dropout_p,
        }
    }

    /// `y = x1 + channel_mix(norm(x1))` where `x1 = x + time_mix(norm(x))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        rng: &mut ChaCha8Rng,
        x: NodeId,
    ) -> NodeId {
        let n1 = self.norm_time.forward(g, ps, x);
        let tm = self.time_mix.forward(g, ps, n1);
        let x1 = g.add(x, tm);
        let n2 = self.norm_channel.forward(g, ps, x1);
        let h = self.ff_in.forward(g, ps, n2);
        let h = g.gelu(h);
        let h = dropout(g, rng, h, self.dropout_p);
        let h = self.ff_out.forward(g, ps, h);
        g.add(x1, h)
    }
}

/// Mixer + GRU reference encoder.
pub struct RefEncoder {
    pub cfg: RefEncoderConfig,
    /// Embed-mode lookup tables, one `[K, dim]` per codebook.
    embeddings: Vec<ParamId>,
    blocks: Vec<MixerBlock>,
    proj: Linear,
    gru: Gru,
}

impl RefEncoder {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: RefEncoderConfig,
    ) -> Self {
        let mut embeddings = Vec::new();
        if let CodeInputMode::Embed { dim } = cfg.input_mode {
            assert_eq!(cfg.input_channels, dim, "embed mode runs the blocks at the embed dim");
            for c in 0..cfg.num_codebooks {
                embeddings.push(add_embedding(
                    ps,
                    rng,
                    format!("{prefix}.embed.{c}"),
                    cfg.codebook_size,
                    dim,
                ));
            }
        }
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                MixerBlock::new(
                    ps,
                    rng,
                    &format!("{prefix}.block.{i}"),
                    cfg.input_channels,
                    cfg.kernel,
                    cfg.expansion,
                    cfg.dropout,
                )
            })
            .collect();
        let proj = Linear::new(ps, rng, &format!("{prefix}.proj"), cfg.input_channels, cfg.hidden, true);
        let gru = Gru::new(ps, rng, &format!("{prefix}.gru"), cfg.hidden, cfg.hidden);
        RefEncoder { cfg, embeddings, blocks, proj, gru }
    }

    /// Turn a code matrix into the block-input feature map on the graph.
    pub fn code_features(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        codes: &CodeMatrix,
    ) -> Result<NodeId> {
        if codes.num_codebooks == 0 || codes.frames() == 0 {
            return Err(Error::InvalidInput("code matrix with zero frames".into()));
        }
        match self.cfg.input_mode {
            CodeInputMode::Raw => {
                let feats = code_to_channels(codes)?;
                Ok(g.input(feats))
            }
            CodeInputMode::Embed { .. } => {
                codes.validate()?;
                let t = codes.frames();
                let mut acc: Option<NodeId> = None;
                for (c, table) in self.embeddings.iter().enumerate() {
                    let ids: Vec<usize> = (0..t).map(|f| codes.at(c, f) as usize).collect();
                    let tbl = g.param(Arc::clone(ps.get(*table)), *table);
                    let rows = g.gather_rows(tbl, ids); // [T, dim]
                    let chan = g.transpose(rows); // [dim, T]
                    acc = Some(match acc {
                        Some(a) => g.add(a, chan),
                        None => chan,
                    });
                }
                Ok(acc.expect("at least one codebook"))
            }
        }
    }

    /// Full forward from an on-graph feature map `[C, T]` to the style vector
    /// `[h, 1]`. Surfaces non-finite activations with the offending block index.
    pub fn forward_features(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        rng: &mut ChaCha8Rng,
        feats: NodeId,
    ) -> Result<NodeId> {
        let mut x = feats;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, ps, rng, x);
            if !g.value(x).all_finite() {
                return Err(Error::Numeric(format!("non-finite activations in mixer block {i}")));
            }
        }
        let projected = self.proj.forward(g, ps, x);
        Ok(self.gru.final_state(g, ps, projected))
    }

    pub fn forward_codes(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        rng: &mut ChaCha8Rng,
        codes: &CodeMatrix,
    ) -> Result<NodeId> {
        let feats = self.code_features(g, ps, codes)?;
        self.forward_features(g, ps, rng, feats)
    }

    /// Evaluation-mode convenience: codes -> StyleEmbedding.
    pub fn encode_style(&self, ps: &ParamStore, codes: &CodeMatrix) -> Result<StyleEmbedding> {
        let mut g = Graph::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_codes(&mut g, ps, &mut rng, codes)?;
        StyleEmbedding::new(g.value(out).data().to_vec())
    }
}

/// Strided-CNN reference encoder (the architecture ablation): a stack of
/// stride-2 2-D convolutions over (channel, time) followed by a GRU.
pub struct GstEncoder {
    pub input_channels: usize,
    pub hidden: usize,
    convs: Vec<Conv2d>,
    norms: Vec<LayerNorm>,
    gru: Gru,
}

impl GstEncoder {
    pub fn new<S: ParamSink>(
        ps: &mut S,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_channels: usize,
        conv_channels: &[usize],
        hidden: usize,
    ) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 1usize;
        let mut freq = input_channels;
        for (i, &out_ch) in conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(
                ps,
                rng,
                &format!("{prefix}.conv.{i}"),
                in_ch,
                out_ch,
                (3, 3),
                (2, 2),
                (1, 1),
            ));
            norms.push(LayerNorm::new(ps, &format!("{prefix}.norm.{i}"), out_ch));
            in_ch = out_ch;
            freq = freq.div_ceil(2);
        }
        let gru_in = in_ch * freq.max(1);
        let gru = Gru::new(ps, rng, &format!("{prefix}.gru"), gru_in, hidden);
        GstEncoder { input_channels, hidden, convs, norms, gru }
    }

    pub fn min_time(&self) -> usize {
        1 << self.convs.len()
    }

    /// `features [C, T]` -> style vector `[h, 1]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, features: NodeId) -> Result<NodeId> {
        let v = g.value(features);
        let (c, t) = (v.rows(), v.cols());
        if c != self.input_channels {
            return Err(Error::InvalidInput(format!(
                "expected {} input channels, got {c}",
                self.input_channels
            )));
        }
        if t < self.min_time() {
            return Err(Error::InvalidInput(format!(
                "input length {t} shorter than the total stride product {}",
                self.min_time()
            )));
        }
        // treat (channel, time) as a 1-channel image
        let mut x = g.reshape(features, vec![1, c * t]);
        let mut hw = (c, t);
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(g, ps, x, hw);
            hw = conv.out_hw(hw);
            x = norm.forward(g, ps, x);
            x = g.gelu(x);
        }
        let (fh, fw) = hw;
        let ch = g.value(x).rows();
        // columns of the folded [ch*fh, fw] map are the GRU inputs
        let seq = gst_fold_time(g, x, ch, fh, fw);
        Ok(self.gru.final_state(g, ps, seq))
    }
}

/// Rearrange `[ch, fh*fw]` into `[ch*fh, fw]`, keeping (c,h) as row blocks.
fn gst_fold_time(g: &mut Graph, x: NodeId, ch: usize, fh: usize, fw: usize) -> NodeId {
    let mut rows: Option<NodeId> = None;
    for c in 0..ch {
        let row = g.slice_rows(x, c, c + 1); // [1, fh*fw]
        let block = g.reshape(row, vec![fh, fw]);
        rows = Some(match rows {
            Some(r) => g.concat_rows(r, block),
            None => block,
        });
    }
    rows.expect("non-empty conv stack")
}
