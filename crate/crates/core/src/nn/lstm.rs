//! LSTM cell and the multi-scale strided LSTM used as a Q/K/V projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

const GATES: [&str; 4] = ["input", "forget", "output", "candidate"];

/// A single LSTM cell. Each gate has its own `(d_in + d_h) × d_h` weight and `d_h` bias.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub d_in: usize,
    pub d_h: usize,
    pub weights: [ParamId; 4],
    pub biases: [ParamId; 4],
}

/// Per-graph fused view of a cell: all four gates side by side.
struct FusedCell {
    wx: Var,
    wh: Var,
    bias: Var,
}

impl LstmCell {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Result<Self> {
        if d_h == 0 || d_in == 0 {
            return Err(Error::Config(format!("lstm `{name}` needs positive sizes, got {d_in}->{d_h}")));
        }
        let fan_in = d_in + d_h;
        let weights = GATES.map(|gate| ps.add_uniform(format!("{name}.{gate}.weight"), &[fan_in, d_h], fan_in, rng));
        // forget gate starts open
        let biases = GATES.map(|gate| {
            let init = if gate == "forget" { 1.0 } else { 0.0 };
            ps.add_full(format!("{name}.{gate}.bias"), &[d_h], init)
        });
        Ok(Self {
            d_in,
            d_h,
            weights,
            biases,
        })
    }

    fn fused(&self, g: &mut Graph, ps: &ParamStore) -> Result<FusedCell> {
        let ws: Vec<Var> = self.weights.iter().map(|&w| g.param(ps, w)).collect();
        let bs: Vec<Var> = self.biases.iter().map(|&b| g.param(ps, b)).collect();
        let w = g.concat(&ws, 1)?;
        Ok(FusedCell {
            wx: g.slice(w, 0, 0, self.d_in)?,
            wh: g.slice(w, 0, self.d_in, self.d_h)?,
            bias: g.concat(&bs, 0)?,
        })
    }

    /// Input projection of every row of `x` (`T×d_in`) plus the recurrent weight, ready for
    /// one or more calls to [`LstmCell::scan_projected`].
    pub fn project(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<(Var, Var)> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.d_in {
            return Err(Error::dim("lstm", g.shape(x), &[self.d_in]));
        }
        let cell = self.fused(g, ps)?;
        let xw = g.matmul(x, cell.wx)?;
        let proj = g.add_bias(xw, cell.bias)?;
        Ok((proj, cell.wh))
    }

    /// Runs the recurrence over the rows of `x` (a `T×d_in` matrix) visited in `order`,
    /// starting from zero hidden and cell state. Returns one `1×d_h` hidden row per visited step.
    pub fn scan_rows(&self, g: &mut Graph, ps: &ParamStore, x: Var, order: &[usize]) -> Result<Vec<Var>> {
        let (proj, wh) = self.project(g, ps, x)?;
        self.scan_projected(g, proj, wh, order)
    }

    pub fn scan_projected(&self, g: &mut Graph, proj: Var, wh: Var, order: &[usize]) -> Result<Vec<Var>> {
        let dh = self.d_h;
        let mut state: Option<(Var, Var)> = None;
        let mut out = Vec::with_capacity(order.len());
        for &t in order {
            let mut z = g.slice(proj, 0, t, 1)?;
            if let Some((h, _)) = state {
                let rec = g.matmul(h, wh)?;
                z = g.add(z, rec)?;
            }
            let sig_in = g.slice(z, 1, 0, 3 * dh)?;
            let sig = g.sigmoid(sig_in);
            let cand_in = g.slice(z, 1, 3 * dh, dh)?;
            let cand = g.tanh(cand_in);
            let i = g.slice(sig, 1, 0, dh)?;
            let o = g.slice(sig, 1, 2 * dh, dh)?;
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let f = g.slice(sig, 1, dh, dh)?;
                let kept = g.mul(f, c_prev)?;
                c = g.add(c, kept)?;
            }
            let c_act = g.tanh(c);
            let h = g.mul(o, c_act)?;
            out.push(h);
            state = Some((h, c));
        }
        Ok(out)
    }
}

/// Left-to-right scan of `cell` over `seq`, each element a `[d_in]` (or `1×d_in`) tensor.
/// Returns one `[d_h]` hidden state per step.
pub fn lstm_scan(g: &mut Graph, ps: &ParamStore, cell: &LstmCell, seq: &[Var]) -> Result<Vec<Var>> {
    if seq.is_empty() {
        return Err(Error::Input("lstm_scan needs a nonempty sequence".into()));
    }
    let rows = seq
        .iter()
        .map(|&v| g.reshape(v, &[1, cell.d_in]))
        .collect::<Result<Vec<_>>>()?;
    let x = g.concat(&rows, 0)?;
    let order: Vec<usize> = (0..seq.len()).collect();
    cell.scan_rows(g, ps, x, &order)?
        .into_iter()
        .map(|h| g.reshape(h, &[cell.d_h]))
        .collect()
}

#[derive(Clone, Debug)]
struct ScaleCells {
    forward: LstmCell,
    backward: Option<LstmCell>,
}

/// `S` LSTMs where the `s`-th one scans every `s`-th frame of each residue class;
/// their full-length outputs are concatenated along features to width `d_out`.
#[derive(Clone, Debug)]
pub struct MultiScaleLstm {
    pub d_in: usize,
    pub d_out: usize,
    scales: Vec<ScaleCells>,
}

impl MultiScaleLstm {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        num_scales: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_scales == 0 || !d_out.is_multiple_of(num_scales) {
            return Err(Error::Config(format!(
                "scale count {num_scales} must divide feature width {d_out}"
            )));
        }
        let d_h = d_out / num_scales;
        if bidirectional && !d_h.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "bidirectional lstm needs an even per-scale width, got {d_h}"
            )));
        }
        let dir_h = if bidirectional { d_h / 2 } else { d_h };
        let scales = (1..=num_scales)
            .map(|s| {
                Ok(ScaleCells {
                    forward: LstmCell::new(ps, &format!("{name}.s{s}"), d_in, dir_h, rng)?,
                    backward: if bidirectional {
                        Some(LstmCell::new(ps, &format!("{name}.s{s}.rev"), d_in, dir_h, rng)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { d_in, d_out, scales })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Frame indices visited by scale `stride` for residue `offset`: `offset, offset+stride, …`.
    pub fn residue_class(len: usize, stride: usize, offset: usize) -> Vec<usize> {
        (offset..len).step_by(stride).collect()
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let t_len = g.shape(x)[0];
        let mut per_scale = Vec::with_capacity(self.scales.len());
        for (i, cells) in self.scales.iter().enumerate() {
            let stride = i + 1;
            let fwd = scatter_scan(g, ps, &cells.forward, x, t_len, stride, false)?;
            let out = match &cells.backward {
                Some(rev) => {
                    let bwd = scatter_scan(g, ps, rev, x, t_len, stride, true)?;
                    g.concat(&[fwd, bwd], 1)?
                }
                None => fwd,
            };
            per_scale.push(out);
        }
        g.concat(&per_scale, 1)
    }
}

fn scatter_scan(
    g: &mut Graph,
    ps: &ParamStore,
    cell: &LstmCell,
    x: Var,
    t_len: usize,
    stride: usize,
    reverse: bool,
) -> Result<Var> {
    let mut slots: Vec<Option<Var>> = vec![None; t_len];
    let (proj, wh) = cell.project(g, ps, x)?;
    for offset in 0..stride.min(t_len) {
        let mut order = MultiScaleLstm::residue_class(t_len, stride, offset);
        if reverse {
            order.reverse();
        }
        let hs = cell.scan_projected(g, proj, wh, &order)?;
        for (&t, h) in order.iter().zip(hs) {
            slots[t] = Some(h);
        }
    }
    let rows: Vec<Var> = slots.into_iter().map(|h| h.expect("every frame visited")).collect();
    g.concat(&rows, 0)
}
