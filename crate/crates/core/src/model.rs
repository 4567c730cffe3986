//! The full two-branch localization model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::entity::{EntityBranch, EntityOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{boundary_loss, inner_loss, total_loss, LossWeights, TargetLabels};
use crate::motion::{decode_boundaries, BoundaryPrediction, MotionBranch, MotionOutput};
use crate::nn::{BlockKind, Linear};
use crate::params::ParamStore;
use crate::query::{Lexicon, QueryEncoder, QueryFeatures, QuerySample, Vocabulary};
use crate::synth::GroundedSample;

/// Weight of the optional relevance BCE when `aux_relevance_loss` is on.
pub const AUX_RELEVANCE_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub query: QueryEncoder,
    /// `d_v → d` frame projection shared by both branches.
    pub frame_proj: Linear,
    pub entity: EntityBranch,
    pub motion: MotionBranch,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub query: QueryFeatures,
    pub entity: EntityOutput,
    pub motion: MotionOutput,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub boundary: Var,
    pub inner: Var,
    pub relevance: Option<Var>,
}

/// Inference result for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub boundary: BoundaryPrediction,
    pub relevance: Vec<f64>,
    pub inner: Vec<f64>,
}

pub fn load_lexicon(cfg: &RunConfig) -> Result<Lexicon> {
    if cfg.lexicon.as_os_str().is_empty() {
        Ok(Lexicon::shipped())
    } else {
        Lexicon::load(&cfg.lexicon)
    }
}

impl Model {
    /// Fresh model with parameters drawn from a ChaCha stream keyed by `config.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::from_lexicon(load_lexicon(config)?);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x6d6f64656c);
        let mut ps = ParamStore::new();
        let query_cfg = config.block_config(BlockKind::STANDARD);
        let query = QueryEncoder::new(&mut ps, vocab.len(), config.d_word, &query_cfg, &mut rng)?;
        let frame_proj = Linear::new(&mut ps, "frame_proj", config.d_v, config.d, &mut rng);
        let entity = EntityBranch::new(&mut ps, &query_cfg, config.early_blocks, config.late_blocks, &mut rng)?;
        let motion_cfg = config.block_config(config.motion_block);
        let motion = MotionBranch::new(&mut ps, &motion_cfg, config.early_blocks, config.late_blocks, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            params: ps,
            query,
            frame_proj,
            entity,
            motion,
        })
    }

    pub fn forward(&self, g: &mut Graph, sample: &GroundedSample) -> Result<ForwardOutput> {
        if sample.video.cols() != self.config.d_v {
            return Err(Error::dim("model input", &[sample.frames(), self.config.d_v], sample.video.shape()));
        }
        let ps = &self.params;
        let query = self.query.encode(g, ps, &self.vocab, &sample.query)?;
        let video = g.constant(sample.video.clone());
        let entity = self.entity.forward(g, ps, &self.frame_proj, video, query.entity)?;
        let motion = self.motion.forward(g, ps, &self.frame_proj, video, query.motion, entity.relevance)?;
        Ok(ForwardOutput { query, entity, motion })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            boundary: self.config.lambda1,
            inner: self.config.lambda2,
        }
    }

    pub fn loss(&self, g: &mut Graph, sample: &GroundedSample) -> Result<LossParts> {
        let out = self.forward(g, sample)?;
        let labels = TargetLabels::new(sample.start, sample.end, sample.frames())?;
        let targets = labels.inner_targets();
        let boundary = boundary_loss(g, out.motion.start_scores, out.motion.end_scores, sample.start, sample.end)?;
        let inner = inner_loss(g, out.motion.inner, &targets)?;
        let mut total = total_loss(g, self.loss_weights(), boundary, inner)?;
        let mut relevance = None;
        if self.config.aux_relevance_loss {
            let r = inner_loss(g, out.entity.relevance, &targets)?;
            let weighted = g.scale(r, AUX_RELEVANCE_WEIGHT);
            total = g.add(total, weighted)?;
            relevance = Some(r);
        }
        Ok(LossParts {
            total,
            boundary,
            inner,
            relevance,
        })
    }

    pub fn predict(&self, sample: &GroundedSample) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, sample)?;
        let boundary = decode_boundaries(
            g.value(out.motion.start_scores).data(),
            g.value(out.motion.end_scores).data(),
            self.config.max_span(),
        )?;
        Ok(Prediction {
            boundary,
            relevance: g.value(out.entity.relevance).data().to_vec(),
            inner: g.value(out.motion.inner).data().to_vec(),
        })
    }

    /// Builds the architecture from `config` and overwrites its parameters with `params`.
    pub fn from_parts(config: &RunConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    /// A sample's query with its tokens tagged by this model's lexicon.
    pub fn tag(&self, text: &str) -> Result<QuerySample> {
        QuerySample::tagged(text, self.vocab.lexicon())
    }
}
