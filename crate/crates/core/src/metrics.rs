//! Temporal IoU, R@1 at IoU thresholds, mIoU, and the prediction/score dumps.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Model, Prediction};
use crate::synth::GroundedSample;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Environment variable bounding evaluation parallelism.
pub const THREADS_ENV: &str = "EAMAT_THREADS";

/// Inclusive frame span, read as the continuous interval `[start, end + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Input(format!("span start {start} > end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn temporal_iou(a: Span, b: Span) -> Result<f64> {
    if a.start > a.end || b.start > b.end {
        return Err(Error::Input(format!("invalid span in iou: {a:?}, {b:?}")));
    }
    let lo = a.start.max(b.start);
    let hi = (a.end + 1).min(b.end + 1);
    let inter = hi.saturating_sub(lo);
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub thresholds: Vec<f64>,
    /// `recall[i]` is the fraction of samples with IoU strictly above `thresholds[i]`.
    pub recall: Vec<f64>,
    pub miou: f64,
    pub samples: usize,
}

impl MetricReport {
    /// Pure tally over predicted and ground-truth spans.
    pub fn from_spans(predicted: &[Span], truth: &[Span], thresholds: &[f64]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::dim("metric report", &[predicted.len()], &[truth.len()]));
        }
        let ious = predicted
            .iter()
            .zip(truth)
            .map(|(p, t)| temporal_iou(*p, *t))
            .collect::<Result<Vec<_>>>()?;
        Self::from_ious(&ious, thresholds)
    }

    pub fn from_ious(ious: &[f64], thresholds: &[f64]) -> Result<Self> {
        if ious.is_empty() {
            return Err(Error::Input("cannot evaluate an empty dataset".into()));
        }
        let n = ious.len() as f64;
        let recall = thresholds
            .iter()
            .map(|&mu| ious.iter().filter(|&&iou| iou > mu).count() as f64 / n)
            .collect();
        Ok(Self {
            thresholds: thresholds.to_vec(),
            recall,
            miou: ious.iter().sum::<f64>() / n,
            samples: ious.len(),
        })
    }

    pub fn recall_at(&self, mu: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == mu).map(|i| self.recall[i])
    }

    /// `R@1,IoU=0.3  R@1,IoU=0.5  ...  mIoU` header cells.
    pub fn column_names(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.thresholds.iter().map(|t| format!("R@1,IoU={t}")).collect();
        cols.push("mIoU".into());
        cols
    }

    /// Recall values followed by mIoU.
    pub fn values(&self) -> Vec<f64> {
        let mut v = self.recall.clone();
        v.push(self.miou);
        v
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, v) in self.column_names().iter().zip(self.values()) {
            write!(f, "{name}: {:.2}  ", 100.0 * v)?;
        }
        write!(f, "(n = {})", self.samples)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<Prediction>,
    pub ious: Vec<f64>,
}

/// Worker count from `EAMAT_THREADS`; `None` when unset.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Decodes every sample and tallies metrics. Samples are processed in parallel over the
/// read-only model; results are gathered in dataset order so the report does not depend
/// on the worker count.
pub fn evaluate(model: &Model, samples: &[GroundedSample], thresholds: &[f64]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_limit()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let predictions = pool.install(|| samples.par_iter().map(|s| model.predict(s)).collect::<Result<Vec<_>>>())?;
    let ious = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| temporal_iou(Span::new(p.boundary.start, p.boundary.end)?, Span::new(s.start, s.end)?))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_ious(&ious, thresholds)?;
    Ok(Evaluation {
        report,
        predictions,
        ious,
    })
}

/// Uniformly random valid span (`s <= e`) over `frames` frames: each of the
/// `T(T+1)/2` ordered pairs is equally likely.
pub fn random_span(frames: usize, rng: &mut impl Rng) -> Span {
    let pairs = frames * (frames + 1) / 2;
    let mut k = rng.random_range(0..pairs);
    let mut start = 0;
    while k >= frames - start {
        k -= frames - start;
        start += 1;
    }
    Span { start, end: start + k }
}

/// Metrics of a predictor that draws `trials` uniformly random valid spans per sample.
pub fn random_baseline(samples: &[GroundedSample], trials: usize, seed: u64, thresholds: &[f64]) -> Result<MetricReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ious = Vec::with_capacity(samples.len() * trials);
    for s in samples {
        let truth = Span::new(s.start, s.end)?;
        for _ in 0..trials {
            ious.push(temporal_iou(random_span(s.frames(), &mut rng), truth)?);
        }
    }
    MetricReport::from_ious(&ious, thresholds)
}

/// Exact expected IoU of the uniform random predictor on one sample.
pub fn expected_random_iou(frames: usize, truth: Span) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in 0..frames {
        for e in s..frames {
            total += temporal_iou(Span { start: s, end: e }, truth)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One line of `T` comma-separated relevance scores per sample.
pub fn format_relevance_dump(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        let line: Vec<String> = p.relevance.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

/// `index<TAB>start<TAB>end<TAB>score[<TAB>start_probs<TAB>end_probs]` per sample.
pub fn format_prediction_dump(predictions: &[Prediction], with_probs: bool) -> String {
    let mut out = String::from("#index\tstart\tend\tscore");
    out.push_str(if with_probs { "\tstart_probs\tend_probs\n" } else { "\n" });
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
    for (i, p) in predictions.iter().enumerate() {
        let b = &p.boundary;
        let _ = write!(out, "{i}\t{}\t{}\t{:.9}", b.start, b.end, b.score);
        if with_probs {
            let _ = write!(out, "\t{}\t{}", join(&b.start_probs), join(&b.end_probs));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: usize, e: usize) -> Span {
        Span::new(s, e).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(span(3, 7), span(3, 7)).unwrap(), 1.0);
        assert_eq!(temporal_iou(span(0, 2), span(3, 5)).unwrap(), 0.0);
        assert_eq!(temporal_iou(span(2, 5), span(4, 9)).unwrap(), 0.25);
        assert_eq!(temporal_iou(span(4, 4), span(4, 4)).unwrap(), 1.0);
        assert!(Span::new(5, 4).is_err());
        assert!(temporal_iou(Span { start: 5, end: 4 }, span(0, 1)).is_err());
    }

    #[test]
    fn report_examples() {
        let truth = [span(0, 3), span(2, 8)];
        let r = MetricReport::from_spans(&truth, &truth, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.recall, vec![1.0; 3]);
        assert_eq!(r.miou, 1.0);
        let r = MetricReport::from_spans(&[span(2, 5)], &[span(4, 9)], &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.recall_at(0.3), Some(0.0));
        assert_eq!(r.miou, 0.25);
        assert!(MetricReport::from_ious(&[], &DEFAULT_THRESHOLDS).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        // [0, 1) vs [0, 2): IoU exactly 0.5
        let r = MetricReport::from_spans(&[span(0, 0)], &[span(0, 1)], &[0.5]).unwrap();
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.recall, vec![0.0]);
    }

    #[test]
    fn random_span_covers_all_pairs_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [[0usize; 4]; 4];
        for _ in 0..20_000 {
            let s = random_span(4, &mut rng);
            assert!(s.start <= s.end && s.end < 4);
            counts[s.start][s.end] += 1;
        }
        for s in 0..4 {
            for e in s..4 {
                let share = counts[s][e] as f64 / 20_000.0;
                assert!((share - 0.1).abs() < 0.01, "{s},{e}: {share}");
            }
        }
    }

    #[test]
    fn expected_random_iou_single_frame() {
        assert_eq!(expected_random_iou(1, span(0, 0)).unwrap(), 1.0);
        // truth [0, 1): (0,0) -> 1, (0,1) -> 1/2, (1,1) -> 0
        let v = expected_random_iou(2, span(0, 0)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dumps() {
        let p = Prediction {
            boundary: crate::motion::decode_boundaries(&[0.0, 1.0], &[0.0, 2.0], None).unwrap(),
            relevance: vec![0.25, 0.5],
            inner: vec![0.1, 0.9],
        };
        assert_eq!(format_relevance_dump(std::slice::from_ref(&p)), "0.250000,0.500000\n");
        let d = format_prediction_dump(&[p], true);
        let line = d.lines().nth(1).unwrap();
        assert!(line.starts_with("0\t1\t1\t"));
        assert_eq!(line.split('\t').count(), 6);
    }
}
