//! Transformer blocks with interchangeable Q/K/V projections.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::conv::{TemporalConv, DEFAULT_KERNELS};
use super::linear::{LayerNorm, Linear};
use super::lstm::MultiScaleLstm;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// How a block turns its input into query/key/value features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    Linear,
    TemporalConv,
    MultiScaleLstm,
}

/// Block registry: attention with a given projection, or one of the attention-free
/// ablations that keep the residual and layer-norm wrapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Transformer(ProjectionKind),
    ConvOnly,
    LstmOnly,
}

impl BlockKind {
    pub const STANDARD: BlockKind = BlockKind::Transformer(ProjectionKind::Linear);
    pub const LSTM_TRANSFORMER: BlockKind = BlockKind::Transformer(ProjectionKind::MultiScaleLstm);
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BlockKind::Transformer(ProjectionKind::Linear) => "linear",
            BlockKind::Transformer(ProjectionKind::TemporalConv) => "tconv",
            BlockKind::Transformer(ProjectionKind::MultiScaleLstm) => "lstm",
            BlockKind::ConvOnly => "conv-only",
            BlockKind::LstmOnly => "lstm-only",
        };
        f.write_str(s)
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => BlockKind::Transformer(ProjectionKind::Linear),
            "tconv" => BlockKind::Transformer(ProjectionKind::TemporalConv),
            "lstm" => BlockKind::Transformer(ProjectionKind::MultiScaleLstm),
            "conv-only" => BlockKind::ConvOnly,
            "lstm-only" => BlockKind::LstmOnly,
            other => {
                return Err(Error::Config(format!(
                    "unknown block kind `{other}` (expected linear, tconv, lstm, conv-only, lstm-only)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub scales: usize,
    pub ffn_hidden: usize,
    pub per_head_scaling: bool,
    pub bidirectional: bool,
    pub ln_eps: f64,
    pub kind: BlockKind,
}

impl BlockConfig {
    pub fn new(d: usize, heads: usize, scales: usize, kind: BlockKind) -> Self {
        Self {
            d,
            heads,
            scales,
            ffn_hidden: 2 * d,
            per_head_scaling: false,
            bidirectional: false,
            ln_eps: 1e-5,
            kind,
        }
    }
}

#[derive(Clone, Debug)]
enum Projection {
    Linear(Linear),
    Conv(TemporalConv),
    Lstm(MultiScaleLstm),
}

impl Projection {
    fn new(ps: &mut ParamStore, name: &str, kind: ProjectionKind, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        Ok(match kind {
            ProjectionKind::Linear => Projection::Linear(Linear::new(ps, name, d, d, rng)),
            ProjectionKind::TemporalConv => {
                Projection::Conv(TemporalConv::new(ps, name, d, d, &DEFAULT_KERNELS, rng)?)
            }
            ProjectionKind::MultiScaleLstm => Projection::Lstm(MultiScaleLstm::new(
                ps,
                name,
                d,
                d,
                cfg.scales,
                cfg.bidirectional,
                rng,
            )?),
        })
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Projection::Linear(l) => l.forward(g, ps, x),
            Projection::Conv(c) => c.forward(g, ps, x),
            Projection::Lstm(m) => m.forward(g, ps, x),
        }
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Projection,
    k: Projection,
    v: Projection,
    out: Linear,
    heads: usize,
    score_scale: f64,
}

#[derive(Clone, Debug)]
enum Mixer {
    Attention(Attention),
    Direct(Projection),
}

/// Self-attention output together with each head's `T×T` attention weights.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `y = LN(x + mix(x)); out = LN(y + FFN(y))` where `mix` is multi-head self-attention
/// (or, for the attention-free ablations, the projection itself).
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub kind: BlockKind,
    pub d: usize,
    mixer: Mixer,
    ln1: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ln2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        let mixer = match cfg.kind {
            BlockKind::Transformer(proj) => {
                if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
                    return Err(Error::Config(format!(
                        "head count {} must divide width {d}",
                        cfg.heads
                    )));
                }
                let scaled_width = if cfg.per_head_scaling { d / cfg.heads } else { d };
                Mixer::Attention(Attention {
                    q: Projection::new(ps, &format!("{name}.q"), proj, cfg, rng)?,
                    k: Projection::new(ps, &format!("{name}.k"), proj, cfg, rng)?,
                    v: Projection::new(ps, &format!("{name}.v"), proj, cfg, rng)?,
                    out: Linear::new(ps, &format!("{name}.attn_out"), d, d, rng),
                    heads: cfg.heads,
                    score_scale: 1.0 / (scaled_width as f64).sqrt(),
                })
            }
            BlockKind::ConvOnly => Mixer::Direct(Projection::new(
                ps,
                &format!("{name}.mix"),
                ProjectionKind::TemporalConv,
                cfg,
                rng,
            )?),
            BlockKind::LstmOnly => Mixer::Direct(Projection::new(
                ps,
                &format!("{name}.mix"),
                ProjectionKind::MultiScaleLstm,
                cfg,
                rng,
            )?),
        };
        Ok(Self {
            kind: cfg.kind,
            d,
            mixer,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d, cfg.ln_eps),
            ffn_in: Linear::new(ps, &format!("{name}.ffn_in"), d, cfg.ffn_hidden, rng),
            ffn_out: Linear::new(ps, &format!("{name}.ffn_out"), cfg.ffn_hidden, d, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d, cfg.ln_eps),
        })
    }

    /// Multi-head self-attention. `key_mask[t] == false` removes frame `t` as a key.
    pub fn self_attention(&self, g: &mut Graph, ps: &ParamStore, x: Var, key_mask: Option<&[bool]>) -> Result<AttentionOutput> {
        let Mixer::Attention(att) = &self.mixer else {
            return Err(Error::Contract(format!("{} block has no attention", self.kind)));
        };
        let t_len = g.shape(x)[0];
        let q = att.q.forward(g, ps, x)?;
        let k = att.k.forward(g, ps, x)?;
        let v = att.v.forward(g, ps, x)?;
        let mask_bias = match key_mask {
            Some(mask) => {
                if mask.len() != t_len {
                    return Err(Error::dim("self_attention mask", &[t_len], &[mask.len()]));
                }
                let row = mask.iter().map(|&keep| if keep { 0.0 } else { f64::NEG_INFINITY }).collect();
                Some(g.constant(Tensor::from_parts(vec![t_len], row)))
            }
            None => None,
        };
        let width = self.d / att.heads;
        let mut heads = Vec::with_capacity(att.heads);
        let mut weights = Vec::with_capacity(att.heads);
        for h in 0..att.heads {
            let qh = g.slice(q, 1, h * width, width)?;
            let kh = g.slice(k, 1, h * width, width)?;
            let vh = g.slice(v, 1, h * width, width)?;
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let mut scores = g.scale(raw, att.score_scale);
            if let Some(bias) = mask_bias {
                scores = g.add_bias(scores, bias)?;
            }
            let w = g.softmax(scores, 1)?;
            heads.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = g.concat(&heads, 1)?;
        let output = att.out.forward(g, ps, joined)?;
        Ok(AttentionOutput { output, weights })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        self.forward_masked(g, ps, x, None)
    }

    pub fn forward_masked(&self, g: &mut Graph, ps: &ParamStore, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.d {
            return Err(Error::dim("transformer_block", g.shape(x), &[self.d]));
        }
        let mixed = match &self.mixer {
            Mixer::Attention(_) => self.self_attention(g, ps, x, key_mask)?.output,
            Mixer::Direct(p) => p.forward(g, ps, x)?,
        };
        let r1 = g.add(x, mixed)?;
        let y1 = self.ln1.forward(g, ps, r1)?;
        let h = self.ffn_in.forward(g, ps, y1)?;
        let h = g.relu(h);
        let f = self.ffn_out.forward(g, ps, h)?;
        let r2 = g.add(y1, f)?;
        self.ln2.forward(g, ps, r2)
    }
}

/// A stack of identically configured blocks applied in sequence.
#[derive(Clone, Debug)]
pub struct BlockStack {
    pub blocks: Vec<TransformerBlock>,
}

impl BlockStack {
    pub fn new(ps: &mut ParamStore, name: &str, depth: usize, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(ps, &format!("{name}.{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, ps, x)?;
        }
        Ok(x)
    }
}
