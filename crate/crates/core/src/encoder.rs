//! Multi-layer bidirectional LSTM over padded token sequences.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Weights of one direction of one layer. Gate blocks along the `4h` axis
/// are ordered input, forget, output, candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmDirection {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// `[forward, backward]` per layer.
    pub layers: Vec<[LstmDirection; 2]>,
}

impl LstmParams {
    pub fn register(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || num_layers == 0 {
            return Err(Error::Config(format!(
                "encoder dims must be positive (input {input_dim}, hidden {hidden}, layers {num_layers})"
            )));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut layers = Vec::with_capacity(num_layers);
        for layer in 0..num_layers {
            let d_in = if layer == 0 { input_dim } else { 2 * hidden };
            let mut dir = |name: &str| {
                let mut bias = Tensor::zeros(vec![4 * hidden]);
                bias.data_mut()[hidden..2 * hidden]
                    .iter_mut()
                    .for_each(|x| *x = 1.0);
                LstmDirection {
                    w: store.register(
                        format!("lstm{layer}.{name}.w"),
                        Tensor::uniform(vec![d_in, 4 * hidden], bound, rng),
                    ),
                    u: store.register(
                        format!("lstm{layer}.{name}.u"),
                        Tensor::uniform(vec![hidden, 4 * hidden], bound, rng),
                    ),
                    b: store.register(format!("lstm{layer}.{name}.b"), bias),
                }
            };
            let fwd = dir("fwd");
            let bwd = dir("bwd");
            layers.push([fwd, bwd]);
        }
        Ok(Self {
            input_dim,
            hidden,
            layers,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// One LSTM step: `x_t` is `[1, d_in]`, states are `[1, h]`.
pub fn lstm_cell(
    g: &mut Graph<'_>,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    dir: &LstmDirection,
) -> Result<(Var, Var)> {
    let w = g.param(dir.w);
    let xw = g.matmul(x_t, w)?;
    cell_from_projection(g, xw, h_prev, c_prev, dir)
}

fn cell_from_projection(
    g: &mut Graph<'_>,
    xw: Var,
    h_prev: Var,
    c_prev: Var,
    dir: &LstmDirection,
) -> Result<(Var, Var)> {
    let u = g.param(dir.u);
    let b = g.param(dir.b);
    let h = g.shape(u)[0];
    if g.shape(xw) != [1, 4 * h] || g.shape(h_prev) != [1, h] || g.shape(c_prev) != [1, h] {
        return Err(Error::dim("lstm_cell", g.shape(xw), g.shape(h_prev)));
    }
    let hu = g.matmul(h_prev, u)?;
    let z = g.add(xw, hu)?;
    let z = g.add(z, b)?;
    let gates = g.slice(z, 1, 0, 3 * h)?;
    let gates = g.sigmoid(gates)?;
    let i = g.slice(gates, 1, 0, h)?;
    let f = g.slice(gates, 1, h, h)?;
    let o = g.slice(gates, 1, 2 * h, h)?;
    let cand = g.slice(z, 1, 3 * h, h)?;
    let cand = g.tanh(cand)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h_t = g.mul(o, tc)?;
    Ok((h_t, c))
}

/// Runs one direction over the rows `positions` of `x` (`[L, d_in]`), in
/// order or reversed. Returns one `[1, h]` state per entry of `positions`,
/// aligned with `positions`.
pub fn run_direction(
    g: &mut Graph<'_>,
    x: Var,
    positions: &[usize],
    dir: &LstmDirection,
    reverse: bool,
) -> Result<Vec<Var>> {
    let w = g.param(dir.w);
    let u = g.param(dir.u);
    let h = g.shape(u)[0];
    let xw = g.matmul(x, w)?;
    let zeros = g.constant(Tensor::zeros(vec![1, h]));
    let (mut hs, mut cs) = (zeros, zeros);
    let mut out = vec![zeros; positions.len()];
    let order: Vec<usize> = if reverse {
        (0..positions.len()).rev().collect()
    } else {
        (0..positions.len()).collect()
    };
    for k in order {
        let row = g.slice(xw, 0, positions[k], 1)?;
        let (h_t, c_t) = cell_from_projection(g, row, hs, cs, dir)?;
        out[k] = h_t;
        hs = h_t;
        cs = c_t;
    }
    Ok(out)
}

/// Encodes `[L, d_in]` into `[L, 2h]`, running both directions over the
/// unmasked positions only. Masked rows of the output are zero.
pub fn bilstm_encode(g: &mut Graph<'_>, embedded: Var, mask: &[bool], params: &LstmParams) -> Result<Var> {
    let shape = g.shape(embedded).to_vec();
    if shape.len() != 2 || shape[0] != mask.len() || shape[0] == 0 {
        return Err(Error::dim("bilstm_encode", &shape, &[mask.len()]));
    }
    let live: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if live.is_empty() {
        return Err(Error::DegenerateInput("bilstm_encode on a fully masked sequence"));
    }
    let width = params.output_dim();
    let zero_row = g.constant(Tensor::zeros(vec![1, width]));
    let mut x = embedded;
    for [fwd, bwd] in &params.layers {
        let f = run_direction(g, x, &live, fwd, false)?;
        let b = run_direction(g, x, &live, bwd, true)?;
        let mut rows = vec![zero_row; mask.len()];
        for (k, &pos) in live.iter().enumerate() {
            rows[pos] = g.concat(&[f[k], b[k]], 1)?;
        }
        x = g.concat(&rows, 0)?;
    }
    Ok(x)
}
