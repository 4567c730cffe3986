//! Entity-aware branch: cross-frame attention, entity-query fusion and per-frame
//! action-relevance scores.

use rand::Rng;

use crate::cqa::CqaLayer;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BlockConfig, BlockKind, BlockStack, Linear, ScoreHead};
use crate::params::ParamStore;

/// No positional information enters this branch; every block is a standard
/// (linear-projection) Transformer block.
#[derive(Clone, Debug)]
pub struct EntityBranch {
    pub early: BlockStack,
    pub fusion: CqaLayer,
    pub late: BlockStack,
    pub head: ScoreHead,
}

#[derive(Clone, Copy, Debug)]
pub struct EntityOutput {
    /// Frame features after the early (pre-fusion) stack, `T×d`.
    pub frames: Var,
    /// Entity-aware frame features, `T×d`.
    pub fused: Var,
    /// Action-relevance score per frame, `[T]`, each in (0, 1).
    pub relevance: Var,
}

impl EntityBranch {
    pub fn new(ps: &mut ParamStore, cfg: &BlockConfig, early: usize, late: usize, rng: &mut impl Rng) -> Result<Self> {
        let cfg = BlockConfig {
            kind: BlockKind::STANDARD,
            ..cfg.clone()
        };
        Ok(Self {
            early: BlockStack::new(ps, "entity.early", early, &cfg, rng)?,
            fusion: CqaLayer::new(ps, "entity.cqa", cfg.d, rng),
            late: BlockStack::new(ps, "entity.late", late, &cfg, rng)?,
            head: ScoreHead::new(ps, "entity.head", cfg.d, rng),
        })
    }

    /// `video` is the raw `T×d_v` feature matrix; `frame_proj` is the projection to width d
    /// shared with the motion branch.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, frame_proj: &Linear, video: Var, entity_query: Var) -> Result<EntityOutput> {
        if g.shape(video)[0] == 0 || g.shape(entity_query)[0] == 0 {
            return Err(Error::Input("entity branch needs T >= 1 and N >= 1".into()));
        }
        let projected = frame_proj.forward(g, ps, video)?;
        let frames = self.early.forward(g, ps, projected)?;
        let fused_in = self.fusion.forward(g, ps, frames, entity_query)?;
        let fused = self.late.forward(g, ps, fused_in)?;
        let scores = self.head.forward(g, ps, fused)?;
        let relevance = g.sigmoid(scores);
        Ok(EntityOutput {
            frames,
            fused,
            relevance,
        })
    }
}
