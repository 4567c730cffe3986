//! Motion-aware branch: LSTM-Transformer encoding, relevance gating, motion-query
//! fusion, boundary/inner heads, and joint boundary decoding.

use rand::Rng;

use crate::cqa::CqaLayer;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BlockConfig, BlockStack, Linear, ScoreHead};
use crate::params::ParamStore;
use crate::tensor::softmax;

#[derive(Clone, Debug)]
pub struct MotionBranch {
    pub early: BlockStack,
    pub fusion: CqaLayer,
    pub late: BlockStack,
    pub start_head: ScoreHead,
    pub end_head: ScoreHead,
    pub inner_head: ScoreHead,
}

#[derive(Clone, Copy, Debug)]
pub struct MotionOutput {
    /// Frame features after the early stack, before gating, `T×d`.
    pub frames: Var,
    pub gated: Var,
    pub fused: Var,
    pub start_scores: Var,
    pub end_scores: Var,
    /// Per-frame inside-the-action probability, `[T]`.
    pub inner: Var,
}

impl MotionBranch {
    /// `cfg.kind` selects the block used throughout the branch (the multi-scale LSTM
    /// Transformer for the full model; other kinds for ablations).
    pub fn new(ps: &mut ParamStore, cfg: &BlockConfig, early: usize, late: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            early: BlockStack::new(ps, "motion.early", early, cfg, rng)?,
            fusion: CqaLayer::new(ps, "motion.cqa", cfg.d, rng),
            late: BlockStack::new(ps, "motion.late", late, cfg, rng)?,
            start_head: ScoreHead::new(ps, "motion.start", cfg.d, rng),
            end_head: ScoreHead::new(ps, "motion.end", cfg.d, rng),
            inner_head: ScoreHead::new(ps, "motion.inner", cfg.d, rng),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        frame_proj: &Linear,
        video: Var,
        motion_query: Var,
        relevance: Var,
    ) -> Result<MotionOutput> {
        let t_len = g.shape(video)[0];
        if g.value(relevance).numel() != t_len {
            return Err(Error::dim("motion gating", &[t_len], g.shape(relevance)));
        }
        let projected = frame_proj.forward(g, ps, video)?;
        let frames = self.early.forward(g, ps, projected)?;
        let gated = g.mul_rows(frames, relevance)?;
        let fused_in = self.fusion.forward(g, ps, gated, motion_query)?;
        let fused = self.late.forward(g, ps, fused_in)?;
        let start_scores = self.start_head.forward(g, ps, fused)?;
        let end_scores = self.end_head.forward(g, ps, fused)?;
        let inner_scores = self.inner_head.forward(g, ps, fused)?;
        let inner = g.sigmoid(inner_scores);
        Ok(MotionOutput {
            frames,
            gated,
            fused,
            start_scores,
            end_scores,
            inner,
        })
    }
}

/// Decoded span with its boundary distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPrediction {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    pub start: usize,
    pub end: usize,
    /// `start_probs[start] * end_probs[end]`.
    pub score: f64,
}

/// Softmaxes the raw start/end scores and picks the most probable ordered pair.
pub fn decode_boundaries(start_scores: &[f64], end_scores: &[f64], max_span: Option<usize>) -> Result<BoundaryPrediction> {
    if start_scores.len() != end_scores.len() || start_scores.is_empty() {
        return Err(Error::dim("decode_boundaries", &[start_scores.len()], &[end_scores.len()]));
    }
    let start_probs = softmax(start_scores);
    let end_probs = softmax(end_scores);
    let (start, end, score) = match max_span {
        None => best_pair(&start_probs, &end_probs),
        Some(limit) => best_pair_within(&start_probs, &end_probs, limit),
    };
    Ok(BoundaryPrediction {
        start_probs,
        end_probs,
        start,
        end,
        score,
    })
}

/// `argmax_{s <= e} p_s[s]·p_e[e]`, ties broken by smallest `s`, then smallest `e`. O(T).
///
/// Multiplying by a fixed positive factor is monotone in floating point, so the best
/// product for a given `s` is exactly `p_s[s] * max_{e >= s} p_e[e]`.
pub fn best_pair(p_start: &[f64], p_end: &[f64]) -> (usize, usize, f64) {
    let n = p_start.len();
    let mut suffix_max = vec![f64::NEG_INFINITY; n + 1];
    for t in (0..n).rev() {
        suffix_max[t] = suffix_max[t + 1].max(p_end[t]);
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_start = 0;
    for s in 0..n {
        let v = p_start[s] * suffix_max[s];
        if v > best {
            best = v;
            best_start = s;
        }
    }
    let best_end = (best_start..n)
        .find(|&e| p_start[best_start] * p_end[e] == best)
        .unwrap_or(best_start);
    (best_start, best_end, best)
}

fn best_pair_within(p_start: &[f64], p_end: &[f64], max_len: usize) -> (usize, usize, f64) {
    let n = p_start.len();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for s in 0..n {
        for e in s..n.min(s + max_len) {
            let v = p_start[s] * p_end[e];
            if v > best.2 {
                best = (s, e, v);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(p_s: &[f64], p_e: &[f64]) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for s in 0..p_s.len() {
            for e in s..p_e.len() {
                if p_s[s] * p_e[e] > best.2 {
                    best = (s, e, p_s[s] * p_e[e]);
                }
            }
        }
        best
    }

    #[test]
    fn single_frame() {
        let p = decode_boundaries(&[3.7], &[-1.0], None).unwrap();
        assert_eq!((p.start, p.end, p.score), (0, 0, 1.0));
    }

    #[test]
    fn hand_example() {
        let (s, e, v) = best_pair(&[0.1, 0.7, 0.2], &[0.2, 0.1, 0.7]);
        assert_eq!((s, e), (1, 2));
        assert!((v - 0.49).abs() < 1e-12);
        assert_eq!(brute(&[0.1, 0.7, 0.2], &[0.2, 0.1, 0.7]), (s, e, v));
    }

    #[test]
    fn uniform_ties_pick_first_pair() {
        for t in 1..10 {
            let p = decode_boundaries(&vec![0.0; t], &vec![0.0; t], None).unwrap();
            assert_eq!((p.start, p.end), (0, 0));
            assert!((p.score - 1.0 / (t * t) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn tie_break_prefers_smaller_start_over_smaller_end() {
        // (0,2) and (1,1) both score 0.25
        let p_s = [0.5, 0.5, 0.0];
        let p_e = [0.0, 0.5, 0.5];
        assert_eq!(best_pair(&p_s, &p_e), brute(&p_s, &p_e));
        assert_eq!(best_pair(&p_s, &p_e).0, 0);
    }

    #[test]
    fn max_span_limits_length() {
        let p = decode_boundaries(&[5.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 5.0], Some(2)).unwrap();
        assert!(p.end - p.start < 2);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(decode_boundaries(&[0.0, 1.0], &[0.0], None).is_err());
    }
}
