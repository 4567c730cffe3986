//! Boundary cross-entropy, inner-frame binary cross-entropy and their weighted sum.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Probabilities are clamped to `[INNER_CLAMP, 1 - INNER_CLAMP]` inside the BCE.
pub const INNER_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub boundary: f64,
    pub inner: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            boundary: 1.0,
            inner: 10.0,
        }
    }
}

/// Ground-truth span in frame indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetLabels {
    pub start: usize,
    pub end: usize,
    pub frames: usize,
}

impl TargetLabels {
    pub fn new(start: usize, end: usize, frames: usize) -> Result<Self> {
        if start > end || end >= frames {
            return Err(Error::Input(format!(
                "span ({start}, {end}) invalid for {frames} frames"
            )));
        }
        Ok(Self { start, end, frames })
    }

    /// Maps times in seconds onto frame indices: `round(τ / duration · (T − 1))`, clamped.
    pub fn from_seconds(start: f64, end: f64, duration: f64, frames: usize) -> Result<Self> {
        if duration.is_nan() || duration <= 0.0 || frames == 0 {
            return Err(Error::Input(format!("bad duration {duration} or frame count {frames}")));
        }
        let to_index = |tau: f64| {
            let x = (tau / duration * (frames - 1) as f64).round();
            x.clamp(0.0, (frames - 1) as f64) as usize
        };
        let (s, e) = (to_index(start), to_index(end));
        Self::new(s.min(e), s.max(e), frames)
    }

    /// `y_i = 1` iff `start <= i <= end`.
    pub fn inner_targets(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|i| if (self.start..=self.end).contains(&i) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// `−log softmax(S_s)[start] − log softmax(S_e)[end]`.
pub fn boundary_loss(g: &mut Graph, start_scores: Var, end_scores: Var, start: usize, end: usize) -> Result<Var> {
    let ls = g.log_softmax(start_scores, 0)?;
    let le = g.log_softmax(end_scores, 0)?;
    let a = g.pick(ls, start)?;
    let b = g.pick(le, end)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, -1.0))
}

/// Mean binary cross-entropy of per-frame probabilities against 0/1 targets.
pub fn inner_loss(g: &mut Graph, probs: Var, targets: &[f64]) -> Result<Var> {
    g.binary_cross_entropy(probs, targets, INNER_CLAMP, 1.0 - INNER_CLAMP)
}

/// `λ1·boundary + λ2·inner`.
pub fn total_loss(g: &mut Graph, weights: LossWeights, boundary: Var, inner: Var) -> Result<Var> {
    let b = g.scale(boundary, weights.boundary);
    let i = g.scale(inner, weights.inner);
    g.add(b, i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scores(g: &mut Graph, probs: &[f64]) -> Var {
        g.constant(Tensor::vector(probs.iter().map(|p| p.ln()).collect()).unwrap())
    }

    #[test]
    fn boundary_loss_examples() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::vector(vec![0.0, 800.0, 0.0]).unwrap());
        let e = g.constant(Tensor::vector(vec![0.0, 0.0, 800.0]).unwrap());
        let l = boundary_loss(&mut g, s, e, 1, 2).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let t = 7;
        let u = g.constant(Tensor::zeros(&[t]));
        let l = boundary_loss(&mut g, u, u, 0, 6).unwrap();
        assert!((g.value(l).item() - 2.0 * (t as f64).ln()).abs() < 1e-12);

        let s = scores(&mut g, &[0.5, 0.3, 0.2]);
        let e = scores(&mut g, &[0.25, 0.25, 0.5]);
        let l = boundary_loss(&mut g, s, e, 0, 1).unwrap();
        assert!((g.value(l).item() - (2f64.ln() + 4f64.ln())).abs() < 1e-12);
        assert!((g.value(l).item() - 2.0794).abs() < 1e-4);

        assert!(matches!(boundary_loss(&mut g, s, e, 0, 3), Err(Error::Input(_))));
    }

    #[test]
    fn inner_loss_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap());
        let l = inner_loss(&mut g, p, &[1.0, 0.0, 1.0]).unwrap();
        assert!(g.value(l).item() < 1e-6);

        let p = g.constant(Tensor::full(&[5], 0.5));
        let l = inner_loss(&mut g, p, &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let p = g.constant(Tensor::vector(vec![0.9, 0.2]).unwrap());
        let l = inner_loss(&mut g, p, &[1.0, 0.0]).unwrap();
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
        assert!((g.value(l).item() - 0.1643).abs() < 1e-4);

        assert!(inner_loss(&mut g, p, &[1.0]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let b = g.constant(Tensor::scalar(2.0));
        let i = g.constant(Tensor::scalar(3.0));
        let only_b = LossWeights { boundary: 1.0, inner: 0.0 };
        let l = total_loss(&mut g, only_b, b, i).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let ones = LossWeights { boundary: 1.0, inner: 1.0 };
        let l = total_loss(&mut g, ones, b, i).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        let b = g.constant(Tensor::scalar(1.0));
        let i = g.constant(Tensor::scalar(0.3));
        let l = total_loss(&mut g, LossWeights::default(), b, i).unwrap();
        assert!((g.value(l).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn labels() {
        let y = TargetLabels::new(2, 4, 7).unwrap();
        assert_eq!(y.inner_targets(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(TargetLabels::new(3, 2, 7).is_err());
        assert!(TargetLabels::new(0, 7, 7).is_err());
        let s = TargetLabels::from_seconds(2.0, 6.0, 10.0, 11).unwrap();
        assert_eq!((s.start, s.end), (2, 6));
        let s = TargetLabels::from_seconds(-1.0, 12.0, 10.0, 11).unwrap();
        assert_eq!((s.start, s.end), (0, 10));
    }
}
