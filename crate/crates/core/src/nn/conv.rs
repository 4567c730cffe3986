use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Debug)]
struct Conv1d {
    kernel: usize,
    weight: ParamId,
    bias: ParamId,
}

/// Parallel same-padded 1-D convolutions over time with odd kernel sizes; each produces
/// `d_out / kernels` features and the results are concatenated.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub d_in: usize,
    pub d_out: usize,
    convs: Vec<Conv1d>,
}

impl TemporalConv {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, kernels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if kernels.is_empty() || !d_out.is_multiple_of(kernels.len()) {
            return Err(Error::Config(format!(
                "temporal conv: {} kernels must divide width {d_out}",
                kernels.len()
            )));
        }
        if let Some(k) = kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("temporal conv kernel {k} must be odd")));
        }
        let width = d_out / kernels.len();
        let convs = kernels
            .iter()
            .map(|&kernel| {
                let fan_in = kernel * d_in;
                Conv1d {
                    kernel,
                    weight: ps.add_uniform(format!("{name}.k{kernel}.weight"), &[fan_in, width], fan_in, rng),
                    bias: ps.add_full(format!("{name}.k{kernel}.bias"), &[width], 0.0),
                }
            })
            .collect();
        Ok(Self { d_in, d_out, convs })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::dim("temporal_conv", &shape, &[self.d_in]));
        }
        let t_len = shape[0];
        let mut outs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let pad = conv.kernel / 2;
            let zeros = g.constant(Tensor::zeros(&[pad, self.d_in]));
            let padded = g.concat(&[zeros, x, zeros], 0)?;
            // im2col: row t holds frames t-pad ..= t+pad side by side
            let taps = (0..conv.kernel)
                .map(|j| g.slice(padded, 0, j, t_len))
                .collect::<Result<Vec<_>>>()?;
            let cols = g.concat(&taps, 1)?;
            let w = g.param(ps, conv.weight);
            let b = g.param(ps, conv.bias);
            let y = g.matmul(cols, w)?;
            outs.push(g.add_bias(y, b)?);
        }
        g.concat(&outs, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_length_and_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let conv = TemporalConv::new(&mut ps, "tc", 2, 6, &DEFAULT_KERNELS, &mut rng).unwrap();
        let data: Vec<f64> = (0..8).map(|k| (k as f64 * 0.37).sin()).collect();
        let x_t = Tensor::matrix(4, 2, data).unwrap();
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let y = conv.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.shape(y), &[4, 6]);

        // direct sum for the kernel-5 block, output column 0 of that block
        let k5 = &conv.convs[1];
        let w = ps.value(k5.weight);
        for t in 0..4i64 {
            let mut acc = 0.0;
            for j in 0..5i64 {
                let src = t + j - 2;
                if (0..4).contains(&src) {
                    for c in 0..2 {
                        acc += x_t.at(src as usize, c) * w.at((j * 2) as usize + c, 0);
                    }
                }
            }
            assert!((g.value(y).at(t as usize, 2) - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamStore::new();
        assert!(TemporalConv::new(&mut ps, "tc", 2, 8, &DEFAULT_KERNELS, &mut rng).is_err());
        assert!(TemporalConv::new(&mut ps, "tc2", 2, 8, &[2, 4], &mut rng).is_err());
    }
}
