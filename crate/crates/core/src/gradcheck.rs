//! Finite-difference gradient checks for every kernel and composite block.
//!
//! Each case builds an output `y = f(inputs, params)` and reduces it to the scalar
//! `Σ y ⊙ W` with a fixed random `W` (a plain sum would cancel exactly through layer
//! norm). Analytic gradients from one backward pass are compared against central
//! differences with step [`STEP`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cqa::CqaLayer;
use crate::entity::EntityBranch;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::loss::{boundary_loss, inner_loss, total_loss, LossWeights};
use crate::motion::MotionBranch;
use crate::nn::{BlockConfig, BlockKind, Linear, LstmCell, MultiScaleLstm, ProjectionKind, ScoreHead, TemporalConv, TransformerBlock};
use crate::params::ParamStore;
use crate::query::{Lexicon, QueryEncoder, QuerySample, Vocabulary};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to rounding
/// are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

type BuildFn = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + Send + Sync;

pub struct GradCase {
    pub name: String,
    pub params: ParamStore,
    pub inputs: Vec<Tensor>,
    build: Box<BuildFn>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Where the worst error occurred.
    pub worst: String,
    pub coords: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<34} max rel err {:.2e} over {:>4} coords (worst: {})",
            if self.passed { "ok" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.coords,
            self.worst
        )
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        params: ParamStore,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            params,
            inputs,
            build: Box::new(build),
        }
    }

    fn objective(&self, ps: &ParamStore, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = (self.build)(&mut g, ps, &vars)?;
        Ok(g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    }

    /// Checks at most `max_coords` coordinates per tensor (all of them when smaller).
    pub fn check(&mut self, seed: u64, max_coords: usize) -> Result<GradCheckResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = (self.build)(&mut g, &self.params, &vars)?;
        let shape = g.shape(y).to_vec();
        let weights = random_tensor(&mut rng, &shape, -1.0, 1.0);
        let w = g.constant(weights.clone());
        let weighted = g.mul(y, w)?;
        let loss = g.sum(weighted);
        g.backward(loss)?;
        self.params.zero_grad();
        g.accumulate_param_grads(&mut self.params);
        let input_grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        let mut worst = (0.0f64, String::from("-"));
        let mut coords = 0;
        let mut record = |err: f64, at: String| {
            if err > worst.0 || !err.is_finite() {
                worst = (err, at);
            }
        };
        let ps_snapshot = self.params.clone();
        for (i, grads) in input_grads.iter().enumerate() {
            for j in pick_coords(&mut rng, grads.len(), max_coords) {
                let mut plus = self.inputs.clone();
                plus[i].data_mut()[j] += STEP;
                let mut minus = self.inputs.clone();
                minus[i].data_mut()[j] -= STEP;
                let numeric = (self.objective(&ps_snapshot, &plus, &weights)?
                    - self.objective(&ps_snapshot, &minus, &weights)?)
                    / (2.0 * STEP);
                record(rel_err(grads[j], numeric), format!("input {i}[{j}]: {:.3e} vs {numeric:.3e}", grads[j]));
                coords += 1;
            }
        }
        let mut ps = ps_snapshot;
        for id in self.params.ids().collect::<Vec<_>>() {
            let analytic = self.params.grad(id).data().to_vec();
            for j in pick_coords(&mut rng, analytic.len(), max_coords) {
                let orig = ps.value(id).data()[j];
                ps.value_mut(id).data_mut()[j] = orig + STEP;
                let fp = self.objective(&ps, &self.inputs, &weights)?;
                ps.value_mut(id).data_mut()[j] = orig - STEP;
                let fm = self.objective(&ps, &self.inputs, &weights)?;
                ps.value_mut(id).data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * STEP);
                record(rel_err(analytic[j], numeric), format!("{}[{j}]: {:.3e} vs {numeric:.3e}", ps.name(id), analytic[j]));
                coords += 1;
            }
        }
        Ok(GradCheckResult {
            name: self.name.clone(),
            max_rel_err: worst.0,
            worst: worst.1,
            coords,
            passed: worst.0 < TOLERANCE,
        })
    }
}

fn pick_coords(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive extents")
}

/// Width used by the suite.
pub const D: usize = 8;

/// Every case of the suite, built from `seed`.
pub fn suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = kernel_cases(r);
    let (t, n) = (6, 3);

    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "linear", 5, D, r);
    cases.push(GradCase::new("linear", ps, vec![random_tensor(r, &[t, 5], -1.0, 1.0)], move |g, ps, x| {
        lin.forward(g, ps, x[0])
    }));

    let mut ps = ParamStore::new();
    let cell = LstmCell::new(&mut ps, "cell", 5, 4, r)?;
    cases.push(GradCase::new("lstm cell scan", ps, vec![random_tensor(r, &[t, 5], -1.0, 1.0)], move |g, ps, x| {
        let order: Vec<usize> = (0..g.shape(x[0])[0]).collect();
        let hs = cell.scan_rows(g, ps, x[0], &order)?;
        g.concat(&hs, 0)
    }));

    for s in [1, 2, 4] {
        let mut ps = ParamStore::new();
        let ms = MultiScaleLstm::new(&mut ps, "mslstm", D, D, s, false, r)?;
        cases.push(GradCase::new(
            format!("multi-scale lstm S={s}"),
            ps,
            vec![random_tensor(r, &[8, D], -1.0, 1.0)],
            move |g, ps, x| ms.forward(g, ps, x[0]),
        ));
    }
    let mut ps = ParamStore::new();
    let ms = MultiScaleLstm::new(&mut ps, "bilstm", D, D, 2, true, r)?;
    cases.push(GradCase::new("bidirectional lstm S=2", ps, vec![random_tensor(r, &[7, D], -1.0, 1.0)], move |g, ps, x| {
        ms.forward(g, ps, x[0])
    }));

    let mut ps = ParamStore::new();
    let conv = TemporalConv::new(&mut ps, "tconv", 4, 6, &crate::nn::DEFAULT_KERNELS, r)?;
    cases.push(GradCase::new("temporal conv", ps, vec![random_tensor(r, &[t, 4], -1.0, 1.0)], move |g, ps, x| {
        conv.forward(g, ps, x[0])
    }));

    let blocks: Vec<(String, BlockConfig)> = vec![
        ("standard block".into(), BlockConfig::new(D, 2, 1, BlockKind::STANDARD)),
        ("standard block per-head".into(), BlockConfig {
            per_head_scaling: true,
            ..BlockConfig::new(D, 2, 1, BlockKind::STANDARD)
        }),
        ("lstm transformer S=1".into(), BlockConfig::new(D, 2, 1, BlockKind::LSTM_TRANSFORMER)),
        ("lstm transformer S=2".into(), BlockConfig::new(D, 2, 2, BlockKind::LSTM_TRANSFORMER)),
        ("lstm transformer S=4".into(), BlockConfig::new(D, 2, 4, BlockKind::LSTM_TRANSFORMER)),
        ("tconv transformer".into(), BlockConfig::new(6, 2, 1, BlockKind::Transformer(ProjectionKind::TemporalConv))),
        ("conv-only block".into(), BlockConfig::new(6, 2, 1, BlockKind::ConvOnly)),
        ("lstm-only block S=2".into(), BlockConfig::new(D, 2, 2, BlockKind::LstmOnly)),
    ];
    for (name, cfg) in blocks {
        let mut ps = ParamStore::new();
        let block = TransformerBlock::new(&mut ps, "block", &cfg, r)?;
        cases.push(GradCase::new(name, ps, vec![random_tensor(r, &[t, cfg.d], -1.0, 1.0)], move |g, ps, x| {
            block.forward(g, ps, x[0])
        }));
    }

    let mut ps = ParamStore::new();
    let cqa = CqaLayer::new(&mut ps, "cqa", D, r);
    cases.push(GradCase::new(
        "cqa",
        ps,
        vec![random_tensor(r, &[t, D], -1.0, 1.0), random_tensor(r, &[4, D], -1.0, 1.0)],
        move |g, ps, x| cqa.forward(g, ps, x[0], x[1]),
    ));

    let mut ps = ParamStore::new();
    let head = ScoreHead::new(&mut ps, "head", D, r);
    cases.push(GradCase::new("score head", ps, vec![random_tensor(r, &[t, D], -1.0, 1.0)], move |g, ps, x| {
        head.forward(g, ps, x[0])
    }));

    cases.push(GradCase::new("boundary loss", ParamStore::new(), vec![
        random_tensor(r, &[t], -2.0, 2.0),
        random_tensor(r, &[t], -2.0, 2.0),
    ], |g, _, x| boundary_loss(g, x[0], x[1], 1, 4)));
    let targets = vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    cases.push(GradCase::new("inner loss", ParamStore::new(), vec![random_tensor(r, &[t], 0.05, 0.95)], move |g, _, x| {
        inner_loss(g, x[0], &targets)
    }));

    let vocab = Vocabulary::from_lexicon(Lexicon::shipped());
    let query = QuerySample::tagged("the person opens a door", vocab.lexicon())?;
    let mut ps = ParamStore::new();
    let enc = QueryEncoder::new(&mut ps, vocab.len(), D, &BlockConfig::new(D, 2, 1, BlockKind::STANDARD), r)?;
    let (v2, q2) = (vocab.clone(), query.clone());
    cases.push(GradCase::new("query encoder", ps, vec![], move |g, ps, _| {
        let f = enc.encode(g, ps, &v2, &q2)?;
        g.concat(&[f.entity, f.motion], 0)
    }));

    let d_v = 5;
    let mut ps = ParamStore::new();
    let fc2 = Linear::new(&mut ps, "frame_proj", d_v, D, r);
    let entity = EntityBranch::new(&mut ps, &BlockConfig::new(D, 2, 2, BlockKind::STANDARD), 1, 1, r)?;
    let fc2_e = fc2.clone();
    cases.push(GradCase::new(
        "entity branch",
        ps,
        vec![random_tensor(r, &[t, d_v], -1.0, 1.0), random_tensor(r, &[n, D], -1.0, 1.0)],
        move |g, ps, x| Ok(entity.forward(g, ps, &fc2_e, x[0], x[1])?.relevance),
    ));

    for s in [1, 2, 4] {
        let mut ps = ParamStore::new();
        let fc2 = Linear::new(&mut ps, "frame_proj", d_v, D, r);
        let motion = MotionBranch::new(&mut ps, &BlockConfig::new(D, 2, s, BlockKind::LSTM_TRANSFORMER), 1, 1, r)?;
        let targets: Vec<f64> = (0..8).map(|i| if (2..=5).contains(&i) { 1.0 } else { 0.0 }).collect();
        cases.push(GradCase::new(
            format!("motion branch + losses S={s}"),
            ps,
            vec![
                random_tensor(r, &[8, d_v], -1.0, 1.0),
                random_tensor(r, &[4, D], -1.0, 1.0),
                random_tensor(r, &[8], 0.1, 0.9),
            ],
            move |g, ps, x| {
                let out = motion.forward(g, ps, &fc2, x[0], x[1], x[2])?;
                let b = boundary_loss(g, out.start_scores, out.end_scores, 2, 5)?;
                let i = inner_loss(g, out.inner, &targets)?;
                total_loss(g, LossWeights::default(), b, i)
            },
        ));
    }
    Ok(cases)
}

fn kernel_cases(r: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut unary = |name: &str, shape: &[usize], f: fn(&mut Graph, Var) -> Result<Var>, r: &mut ChaCha8Rng| {
        cases.push(GradCase::new(name, ParamStore::new(), vec![random_tensor(r, shape, -1.5, 1.5)], move |g, _, x| {
            f(g, x[0])
        }));
    };
    unary("transpose", &[3, 4], |g, x| g.transpose(x), r);
    unary("scale", &[2, 3, 4], |g, x| Ok(g.scale(x, -1.7)), r);
    unary("sigmoid", &[2, 3, 4], |g, x| Ok(g.sigmoid(x)), r);
    unary("tanh", &[2, 3, 4], |g, x| Ok(g.tanh(x)), r);
    unary("relu", &[4, 5], |g, x| Ok(g.relu(x)), r);
    unary("softmax rows", &[4, 5], |g, x| g.softmax(x, 1), r);
    unary("softmax columns", &[4, 5], |g, x| g.softmax(x, 0), r);
    unary("softmax rank 3", &[2, 3, 4], |g, x| g.softmax(x, 1), r);
    unary("log-softmax", &[6], |g, x| g.log_softmax(x, 0), r);
    unary("slice", &[4, 6], |g, x| g.slice(x, 1, 2, 3), r);
    unary("reshape", &[4, 6], |g, x| g.reshape(x, &[3, 8]), r);
    unary("sum", &[3, 4], |g, x| Ok(g.sum(x)), r);
    unary("mean", &[3, 4], |g, x| Ok(g.mean(x)), r);
    unary("pick", &[5], |g, x| g.pick(x, 3), r);
    unary("gather rows", &[5, 3], |g, x| g.gather_rows(x, &[4, 0, 4, 2]), r);

    let mut binary = |name: &str, a: &[usize], b: &[usize], f: fn(&mut Graph, Var, Var) -> Result<Var>, r: &mut ChaCha8Rng| {
        cases.push(GradCase::new(
            name,
            ParamStore::new(),
            vec![random_tensor(r, a, -1.5, 1.5), random_tensor(r, b, -1.5, 1.5)],
            move |g, _, x| f(g, x[0], x[1]),
        ));
    };
    binary("matmul", &[3, 4], &[4, 5], |g, a, b| g.matmul(a, b), r);
    binary("add", &[3, 4], &[3, 4], |g, a, b| g.add(a, b), r);
    binary("sub", &[3, 4], &[3, 4], |g, a, b| g.sub(a, b), r);
    binary("mul", &[2, 3, 4], &[2, 3, 4], |g, a, b| g.mul(a, b), r);
    binary("add bias", &[3, 4], &[4], |g, a, b| g.add_bias(a, b), r);
    binary("mul rows", &[3, 4], &[3], |g, a, b| g.mul_rows(a, b), r);
    binary("concat rows", &[2, 4], &[3, 4], |g, a, b| g.concat(&[a, b], 0), r);
    binary("concat columns", &[3, 2], &[3, 5], |g, a, b| g.concat(&[a, b], 1), r);

    cases.push(GradCase::new(
        "layer norm",
        ParamStore::new(),
        vec![
            random_tensor(r, &[4, 6], -1.5, 1.5),
            random_tensor(r, &[6], 0.5, 1.5),
            random_tensor(r, &[6], -0.5, 0.5),
        ],
        |g, _, x| g.layer_norm(x[0], x[1], x[2], 1e-5),
    ));
    cases.push(GradCase::new("binary cross-entropy", ParamStore::new(), vec![random_tensor(r, &[5], 0.05, 0.95)], |g, _, x| {
        g.binary_cross_entropy(x[0], &[1.0, 0.0, 0.0, 1.0, 1.0], 1e-7, 1.0 - 1e-7)
    }));
    cases
}

/// Coordinates checked per tensor by [`run_suite`].
pub const SUITE_COORDS: usize = 24;

pub fn run_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    suite(seed)?
        .iter_mut()
        .enumerate()
        .map(|(i, c)| c.check(seed.wrapping_add(i as u64), SUITE_COORDS))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx relu(x) is 0 for x < 0; pretending it is identity must fail.
        let mut case = GradCase::new("broken", ParamStore::new(), vec![Tensor::vector(vec![-1.0, 2.0]).unwrap()], |g, _, x| {
            let r = g.relu(x[0]);
            let c = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
            let shifted = g.add(x[0], c)?;
            // value of relu, gradient of identity
            let diff = g.sub(r, shifted)?;
            let v = g.value(diff).clone();
            let frozen = g.constant(v);
            g.add(shifted, frozen)
        });
        let res = case.check(0, 8).unwrap();
        assert!(!res.passed);
        assert!(res.worst.starts_with("input 0[0]"), "{}", res.worst);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_err(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn kernels_pass() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for mut c in kernel_cases(&mut r) {
            let res = c.check(1, 64).unwrap();
            assert!(res.passed, "{res}");
        }
    }
}
