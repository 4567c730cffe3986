//! Context-query attention: fuses query features into every frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CqaLayer {
    pub d: usize,
    pub fuse: Linear,
}

/// Intermediate matrices of one CQA evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CqaParts {
    /// Frame–word similarity `F_v·F_qᵀ`, `T×N`.
    pub similarity: Var,
    /// Softmax over words for each frame.
    pub row_norm: Var,
    /// Softmax over frames for each word.
    pub col_norm: Var,
    pub video_to_query: Var,
    pub query_to_video: Var,
    pub output: Var,
}

impl CqaLayer {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            d,
            fuse: Linear::new(ps, &format!("{name}.fc3"), 4 * d, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, frames: Var, query: Var) -> Result<Var> {
        Ok(self.forward_parts(g, ps, frames, query, None)?.output)
    }

    /// `query_mask[i] == false` marks padded query rows; they get zero weight in the
    /// row softmax.
    pub fn forward_parts(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        frames: Var,
        query: Var,
        query_mask: Option<&[bool]>,
    ) -> Result<CqaParts> {
        let (fs, qs) = (g.shape(frames).to_vec(), g.shape(query).to_vec());
        if fs.len() != 2 || qs.len() != 2 || fs[1] != self.d || qs[1] != self.d {
            return Err(Error::dim("cqa", &fs, &qs));
        }
        let qt = g.transpose(query)?;
        let similarity = g.matmul(frames, qt)?;
        let row_scores = match query_mask {
            Some(mask) => {
                if mask.len() != qs[0] {
                    return Err(Error::dim("cqa mask", &qs, &[mask.len()]));
                }
                let bias = mask.iter().map(|&keep| if keep { 0.0 } else { f64::NEG_INFINITY }).collect();
                let bias = g.constant(Tensor::from_parts(vec![qs[0]], bias));
                g.add_bias(similarity, bias)?
            }
            None => similarity,
        };
        let row_norm = g.softmax(row_scores, 1)?;
        let col_norm = g.softmax(similarity, 0)?;
        let video_to_query = g.matmul(row_norm, query)?;
        let col_t = g.transpose(col_norm)?;
        let word_ctx = g.matmul(col_t, frames)?;
        let query_to_video = g.matmul(row_norm, word_ctx)?;
        let gated_vq = g.mul(frames, video_to_query)?;
        let gated_qv = g.mul(frames, query_to_video)?;
        let joined = g.concat(&[frames, video_to_query, gated_vq, gated_qv], 1)?;
        let output = self.fuse.forward(g, ps, joined)?;
        Ok(CqaParts {
            similarity,
            row_norm,
            col_norm,
            video_to_query,
            query_to_video,
            output,
        })
    }
}
