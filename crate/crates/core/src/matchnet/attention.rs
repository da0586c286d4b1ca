use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Feed-forward stack ending in a single ReLU unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub input_dim: usize,
    /// `(weight, bias)` per layer; the last layer maps to width 1.
    pub layers: Vec<(ParamId, ParamId)>,
}

impl FeedForward {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "feed-forward widths must be positive ({input_dim} -> {hidden:?})"
            )));
        }
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        let widths: Vec<usize> = hidden.iter().copied().chain([1]).collect();
        for (i, &width) in widths.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = store.register(
                format!("{prefix}.{i}.w"),
                Tensor::uniform(vec![fan_in, width], bound, rng),
            );
            // the output unit starts in its active region
            let init = if i + 1 == widths.len() { 1.0 } else { 0.0 };
            let b = store.register(format!("{prefix}.{i}.b"), Tensor::filled(vec![width], init));
            layers.push((w, b));
            fan_in = width;
        }
        Ok(Self { input_dim, layers })
    }
}

/// Cross-attention scoring vector plus the relevance network.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[3 * width, 1]`, absent in the position-wise product variant.
    pub w_a: Option<ParamId>,
    pub ff: FeedForward,
}

/// `S[i][j] = w_a . [u^c_i; u^p_j; u^c_i * u^p_j]` for candidate position
/// `i` and mention position `j`. Masks are applied downstream by the
/// softmaxes, so `S` itself stays finite everywhere.
pub fn similarity_matrix(g: &mut Graph<'_>, u_c: Var, u_p: Var, w_a: Var) -> Result<Var> {
    let (sc, sp) = (g.shape(u_c).to_vec(), g.shape(u_p).to_vec());
    if sc.len() != 2 || sc != sp {
        return Err(Error::dim("similarity_matrix", &sc, &sp));
    }
    let width = sc[1];
    if g.shape(w_a) != [3 * width, 1] {
        return Err(Error::dim("similarity_matrix", g.shape(w_a), &[3 * width, 1]));
    }
    let w_c = g.slice(w_a, 0, 0, width)?;
    let w_p = g.slice(w_a, 0, width, width)?;
    let w_x = g.slice(w_a, 0, 2 * width, width)?;
    let cand_term = g.matmul(u_c, w_c)?; // [L, 1]
    let ment_term = g.matmul(u_p, w_p)?;
    let ment_term = g.transpose(ment_term)?; // [1, L]
    let w_x = g.transpose(w_x)?;
    let weighted = g.mul(u_c, w_x)?;
    let u_p_t = g.transpose(u_p)?;
    let cross = g.matmul(weighted, u_p_t)?; // [L, L]
    let s = g.add(cross, cand_term)?;
    g.add(s, ment_term)
}

/// Intermediate attention matrices, all indexed `[candidate i][mention j]`
/// except `alpha_t`, which is stored transposed.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[L, 8h]` attended vectors `x_j`, zero on masked mention positions.
    pub x: Var,
    /// `S^alpha` transposed: row `j` is a distribution over candidate positions.
    pub alpha_t: Var,
    /// `S-bar^beta`: row `i` is a distribution over mention positions.
    pub beta_bar: Var,
    /// `S^beta = S^alpha . (S-bar^beta)^T`.
    pub beta: Var,
}

/// Bidirectional attention pooling:
/// `a^alpha_j = sum_i S^alpha[i][j] u^c_i`, `a^beta_j = sum_i S^beta[i][j] u^p_i`,
/// `x_j = [u^p_j; a^alpha_j; u^p_j * a^alpha_j; u^c_j * a^beta_j]`.
pub fn bidirectional_attention(
    g: &mut Graph<'_>,
    s: Var,
    u_c: Var,
    u_p: Var,
    mask_c: &[bool],
    mask_p: &[bool],
) -> Result<AttentionOutput> {
    let len = mask_p.len();
    if g.shape(s) != [len, len] || mask_c.len() != len {
        return Err(Error::dim("bidirectional_attention", g.shape(s), &[len, mask_c.len()]));
    }
    // for each mention position j: softmax over candidate positions i
    let s_t = g.transpose(s)?;
    let alpha_t = g.masked_softmax(s_t, mask_c)?;
    // for each candidate position i: softmax over mention positions j
    let beta_bar = g.masked_softmax(s, mask_p)?;
    let alpha = g.transpose(alpha_t)?;
    let beta_bar_t = g.transpose(beta_bar)?;
    let beta = g.matmul(alpha, beta_bar_t)?;
    let a_alpha = g.matmul(alpha_t, u_c)?;
    let beta_t = g.transpose(beta)?;
    let a_beta = g.matmul(beta_t, u_p)?;
    let p_alpha = g.mul(u_p, a_alpha)?;
    let c_beta = g.mul(u_c, a_beta)?;
    let x = g.concat(&[u_p, a_alpha, p_alpha, c_beta], 1)?;
    let x = mask_rows(g, x, mask_p)?;
    Ok(AttentionOutput {
        x,
        alpha_t,
        beta_bar,
        beta,
    })
}

/// Zeroes the rows of `x` whose mask flag is false.
pub fn mask_rows(g: &mut Graph<'_>, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let col = Tensor::matrix(
        mask.len(),
        1,
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )?;
    let col = g.constant(col);
    g.mul(x, col)
}

/// Relevance `f = ReLU(w_f . X + b_f)` through the feed-forward stack;
/// hidden layers use ReLU as well. Returns a `[1, 1]` node.
pub fn attention_relevance(g: &mut Graph<'_>, x: Var, ff: &FeedForward) -> Result<Var> {
    let n = g.value(x).numel();
    if n != ff.input_dim {
        return Err(Error::dim("attention_relevance", g.shape(x), &[ff.input_dim]));
    }
    let mut h = g.reshape(x, &[1, n])?;
    for &(w, b) in &ff.layers {
        let w = g.param(w);
        let b = g.param(b);
        h = g.matmul(h, w)?;
        h = g.add(h, b)?;
        h = g.relu(h)?;
    }
    Ok(h)
}
