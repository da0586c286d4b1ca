//! Helpers shared by the integration tests and the acceptance runner:
//! finite-difference gradient checks, brute-force reference
//! implementations, random small models and the invariant checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use latte_core::data::{synth_generate, CandidateEntity, Dataset, KnowledgeBase, SynthConfig, TfIdfIndex};
use latte_core::encoder::{lstm_cell, LstmDirection};
use latte_core::losses::{
    joint_loss, ranking_loss, InstanceLabels, InstanceOutputs, JointLossConfig, KnownTypeLabel,
};
use latte_core::matchnet::{
    bidirectional_attention, similarity_matrix, ForwardCache, LatteModel, ModelConfig, Variant,
};
use latte_core::train::RunConfig;
use latte_core::metrics::{mean_average_precision, precision_at_1, RankingResult};
use latte_core::text::{build_vocab, EmbeddingConfig, TokenizedSeq};
use latte_core::{Graph, ParamStore, Tensor, Var};
use proptest::test_runner::TestCaseError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;
pub const ORACLE_TOL: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Values at least 0.1 away from zero, for ops with a kink at the origin.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values on a shuffled grid with spacing 0.05, for max pooling.
pub fn well_separated(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_mask(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.7)).collect();
    for r in 0..rows {
        let c = rng.gen_range(0..cols);
        mask[r * cols + c] = true;
    }
    mask
}

/// Prefix mask with `live` leading positions.
pub fn prefix_mask(len: usize, live: usize) -> Vec<bool> {
    (0..len).map(|i| i < live).collect()
}

fn projection(n: usize) -> Tensor {
    let data = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    Tensor::new(vec![1, n], data).unwrap()
}

/// Reduces any output to a scalar with a fixed, non-uniform projection.
pub fn project(g: &mut Graph<'_>, out: Var) -> latte_core::Result<Var> {
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[1, n])?;
    let p = g.constant(projection(n));
    let prod = g.mul(flat, p)?;
    g.sum(prod)
}

/// Largest relative error between backprop and central differences over
/// every input coordinate. `f` builds the output from leaf nodes.
pub fn check_leaves<F>(inputs: &[Tensor], f: F) -> Result<f64, String>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> latte_core::Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> latte_core::Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = project(&mut g, out)?;
        Ok(g.item(loss))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad()))
        .collect();
    let out = f(&mut g, &vars).map_err(|e| e.to_string())?;
    let loss = project(&mut g, out).map_err(|e| e.to_string())?;
    let grads = g.backward(loss).map_err(|e| e.to_string())?;

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .leaf(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[i] += FD_EPS;
            let up = eval(&shifted).map_err(|e| e.to_string())?;
            shifted[k].data_mut()[i] -= 2.0 * FD_EPS;
            let down = eval(&shifted).map_err(|e| e.to_string())?;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Same check against the parameters of `store`, visiting at most
/// `per_tensor` random coordinates of each tensor. Frozen rows are skipped.
pub fn check_params<F>(store: &ParamStore, per_tensor: usize, rng: &mut impl Rng, f: F) -> Result<f64, String>
where
    F: Fn(&mut Graph<'_>) -> latte_core::Result<Var>,
{
    let eval = |s: &ParamStore| -> latte_core::Result<f64> {
        let mut g = Graph::with_params(s);
        let loss = f(&mut g)?;
        Ok(g.item(loss))
    };
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g).map_err(|e| e.to_string())?;
        g.backward(loss).map_err(|e| e.to_string())?
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (id, param) in store.iter() {
        let numel = param.tensor.numel();
        let cols = if param.tensor.shape().len() == 2 {
            param.tensor.shape()[1]
        } else {
            numel.max(1)
        };
        let frozen = |i: usize| param.tensor.shape().len() == 2 && param.frozen_rows.contains(&(i / cols));
        let mut coords: Vec<usize> = (0..numel).filter(|&i| !frozen(i)).collect();
        coords.shuffle(rng);
        coords.truncate(per_tensor);
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        for i in coords {
            let orig = param.tensor.data()[i];
            probe.tensor_mut(id).data_mut()[i] = orig + FD_EPS;
            let up = eval(&probe).map_err(|e| e.to_string())?;
            probe.tensor_mut(id).data_mut()[i] = orig - FD_EPS;
            let down = eval(&probe).map_err(|e| e.to_string())?;
            probe.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let e = rel_err(analytic[i], numeric);
            if e > worst {
                worst = e;
            }
            if e >= FD_TOL {
                return Err(format!(
                    "{}[{i}]: analytic {:.10e} numeric {:.10e} (rel {e:.2e})",
                    param.name, analytic[i], numeric
                ));
            }
        }
    }
    Ok(worst)
}

// ---- op-level gradient cases -------------------------------------------

type OpFn = fn(&mut Graph<'_>, &[Var], &OpCtx) -> latte_core::Result<Var>;

/// Extra non-differentiable arguments of an op case.
#[derive(Debug, Clone, Default)]
pub struct OpCtx {
    pub mask: Vec<bool>,
    pub ids: Vec<usize>,
    pub k: usize,
    pub a: usize,
    pub b: usize,
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub ctx: OpCtx,
    pub f: OpFn,
}

/// One randomised case for every graph op, plus the composite attention
/// and loss blocks built from leaves.
pub fn op_cases(rng: &mut impl Rng) -> Vec<OpCase> {
    let m = rng.gen_range(2..5);
    let n = rng.gen_range(2..5);
    let p = rng.gen_range(2..5);
    let mut cases = Vec::new();
    let mut push = |name, inputs, ctx, f: OpFn| cases.push(OpCase { name, inputs, ctx, f });
    let none = OpCtx::default;

    push("matmul", vec![random_tensor(&[m, n], rng), random_tensor(&[n, p], rng)], none(), |g, v, _| {
        g.matmul(v[0], v[1])
    });
    push("transpose", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.transpose(v[0]));
    push("add", vec![random_tensor(&[m, n], rng), random_tensor(&[m, n], rng)], none(), |g, v, _| {
        g.add(v[0], v[1])
    });
    push("add/broadcast-row", vec![random_tensor(&[m, n], rng), random_tensor(&[n], rng)], none(), |g, v, _| {
        g.add(v[0], v[1])
    });
    push("sub/broadcast-col", vec![random_tensor(&[m, 1], rng), random_tensor(&[m, n], rng)], none(), |g, v, _| {
        g.sub(v[0], v[1])
    });
    push("mul", vec![random_tensor(&[m, n], rng), random_tensor(&[m, n], rng)], none(), |g, v, _| {
        g.mul(v[0], v[1])
    });
    push("mul/broadcast", vec![random_tensor(&[1, n], rng), random_tensor(&[m, n], rng)], none(), |g, v, _| {
        g.mul(v[0], v[1])
    });
    push("mul/scalar", vec![random_tensor(&[], rng), random_tensor(&[], rng)], none(), |g, v, _| {
        g.mul(v[0], v[1])
    });
    push("scale", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.scale(v[0], -1.7));
    push("add_scalar", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.add_scalar(v[0], 0.3));
    push("relu", vec![away_from_zero(&[m, n], rng)], none(), |g, v, _| g.relu(v[0]));
    push("sigmoid", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.sigmoid(v[0]));
    push("tanh", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.tanh(v[0]));
    push("softmax", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.softmax(v[0]));
    push(
        "masked_softmax/per-element",
        vec![random_tensor(&[m, n], rng)],
        OpCtx { mask: random_mask(m, n, rng), ..none() },
        |g, v, c| g.masked_softmax(v[0], &c.mask),
    );
    push(
        "masked_softmax/per-column",
        vec![random_tensor(&[m, n], rng)],
        OpCtx { mask: random_mask(1, n, rng), ..none() },
        |g, v, c| g.masked_softmax(v[0], &c.mask),
    );
    push("log_softmax", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.log_softmax(v[0]));
    push(
        "concat/rank1",
        vec![random_tensor(&[m], rng), random_tensor(&[n], rng), random_tensor(&[p], rng)],
        none(),
        |g, v, _| g.concat(v, 0),
    );
    push(
        "concat/rows",
        vec![random_tensor(&[m, n], rng), random_tensor(&[p, n], rng)],
        none(),
        |g, v, _| g.concat(v, 0),
    );
    push(
        "concat/cols",
        vec![random_tensor(&[m, n], rng), random_tensor(&[m, p], rng), random_tensor(&[m, 1], rng)],
        none(),
        |g, v, _| g.concat(v, 1),
    );
    let start = rng.gen_range(0..m);
    push(
        "slice/rows",
        vec![random_tensor(&[m, n], rng)],
        OpCtx { a: start, b: m - start, ..none() },
        |g, v, c| g.slice(v[0], 0, c.a, c.b),
    );
    let start = rng.gen_range(0..n);
    push(
        "slice/cols",
        vec![random_tensor(&[m, n], rng)],
        OpCtx { a: start, b: n - start, ..none() },
        |g, v, c| g.slice(v[0], 1, c.a, c.b),
    );
    push("slice/rank1", vec![random_tensor(&[m + 2], rng)], OpCtx { a: 1, b: m, ..none() }, |g, v, c| {
        g.slice(v[0], 0, c.a, c.b)
    });
    push("reshape", vec![random_tensor(&[m, n], rng)], OpCtx { a: m * n, ..none() }, |g, v, c| {
        g.reshape(v[0], &[1, c.a])
    });
    push("sum", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.sum(v[0]));
    push("mean", vec![random_tensor(&[m, n], rng)], none(), |g, v, _| g.mean(v[0]));
    push("cosine", vec![random_tensor(&[1, n + 1], rng), random_tensor(&[1, n + 1], rng)], none(), |g, v, _| {
        g.cosine(v[0], v[1])
    });
    let ids: Vec<usize> = (0..p + 2).map(|_| rng.gen_range(0..m)).collect();
    push("gather_rows", vec![random_tensor(&[m, n], rng)], OpCtx { ids, ..none() }, |g, v, c| {
        g.gather_rows(v[0], &c.ids)
    });
    let k = rng.gen_range(1..=m);
    push("unfold", vec![random_tensor(&[m + 1, n], rng)], OpCtx { k, ..none() }, |g, v, c| {
        g.unfold(v[0], c.k)
    });
    push("max_rows", vec![well_separated(&[m, n], rng)], none(), |g, v, _| g.max_rows(v[0]));

    let len = rng.gen_range(2..5);
    let width = rng.gen_range(1..4);
    let live_c = rng.gen_range(1..=len);
    let live_p = rng.gen_range(1..=len);
    let mut mask = prefix_mask(len, live_c);
    mask.extend(prefix_mask(len, live_p));
    push(
        "similarity_matrix",
        vec![
            random_tensor(&[len, width], rng),
            random_tensor(&[len, width], rng),
            random_tensor(&[3 * width, 1], rng),
        ],
        none(),
        |g, v, _| similarity_matrix(g, v[0], v[1], v[2]),
    );
    push(
        "bidirectional_attention",
        vec![
            random_tensor(&[len, len], rng),
            random_tensor(&[len, width], rng),
            random_tensor(&[len, width], rng),
        ],
        OpCtx { mask, k: len, ..none() },
        |g, v, c| {
            let (mc, mp) = c.mask.split_at(c.k);
            Ok(bidirectional_attention(g, v[0], v[1], v[2], mc, mp)?.x)
        },
    );
    let negs = rng.gen_range(1..4);
    let mut rs = vec![Tensor::scalar(rng.gen_range(-0.5..0.5))];
    rs.extend((0..negs).map(|_| Tensor::scalar(rng.gen_range(-0.5..0.5))));
    push("ranking_loss", rs, none(), |g, v, _| ranking_loss(g, v[0], &v[1..], 1.0));
    let kt = rng.gen_range(2..5);
    let gold: BTreeSet<usize> = [rng.gen_range(0..kt), rng.gen_range(0..kt)].into_iter().collect();
    push(
        "type_loss",
        vec![random_tensor(&[1, kt], rng)],
        OpCtx { ids: gold.into_iter().collect(), k: kt, ..none() },
        |g, v, c| {
            let label = KnownTypeLabel::new(&c.ids.iter().copied().collect(), c.k)?;
            latte_core::losses::type_loss(g, &label, v[0])
        },
    );
    cases
}

// ---- random small models ------------------------------------------------

pub const WORDS: &[&str] = &[
    "kinase", "renal", "acute", "failure", "protein", "cell", "type", "ii", "lipid", "syndrome", "chronic",
    "liver", "a", "of", "-", "disease", "factor", "beta",
];

pub fn random_tokens(rng: &mut impl Rng, max: usize) -> Vec<String> {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect()
}

/// A model with tiny random dimensions, for gradient and invariant checks.
pub fn small_model(variant: Variant, rng: &mut impl Rng) -> LatteModel {
    let corpus: Vec<Vec<&str>> = WORDS.iter().map(|w| vec![*w]).collect();
    let vocab = build_vocab(&corpus, 1).unwrap();
    let config = ModelConfig {
        variant,
        max_len: rng.gen_range(3..6),
        embedding: EmbeddingConfig {
            word_dim: rng.gen_range(2..5),
            char_dim: rng.gen_range(2..4),
            char_cnn_dim: rng.gen_range(3..6),
            kernel_widths: vec![1, 2, 3],
            use_chars: true,
        },
        hidden: rng.gen_range(2..4),
        lstm_layers: rng.gen_range(1..3),
        ff_hidden: vec![rng.gen_range(2..6)],
        latent_types: rng.gen_range(2..5),
        known_types: rng.gen_range(2..5),
    };
    let mut model = LatteModel::new(config, vocab, None, rng).unwrap();
    // keep ReLU pre-activations clear of the kink at zero, where central
    // differences straddle two linear pieces
    let mut biases = vec![model.attention.ff.layers[0].1];
    biases.extend(model.types.and_then(|t| t.known).map(|(_, b)| b));
    biases.extend(model.embed.filters.iter().map(|f| f.bias));
    for bias in biases {
        let b = away_from_zero(model.store.tensor(bias).shape(), rng);
        model.store.tensor_mut(bias).data_mut().copy_from_slice(b.data());
    }
    model
}

pub fn random_seq(model: &LatteModel, rng: &mut impl Rng) -> TokenizedSeq {
    let tokens = random_tokens(rng, model.config.max_len);
    model.vocab.encode(&tokens, model.config.max_len)
}

pub fn random_label(k: usize, rng: &mut impl Rng) -> KnownTypeLabel {
    let gold: BTreeSet<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(0..k)).collect();
    KnownTypeLabel::new(&gold, k).unwrap()
}

/// A mention, one positive and a few negatives with their type labels.
pub struct PairInstance {
    pub mention: TokenizedSeq,
    pub candidates: Vec<TokenizedSeq>,
    pub labels: InstanceLabels,
}

pub fn random_instance(model: &LatteModel, rng: &mut impl Rng) -> PairInstance {
    let k = model.config.known_types;
    let n = rng.gen_range(2..4);
    PairInstance {
        mention: random_seq(model, rng),
        candidates: (0..n).map(|_| random_seq(model, rng)).collect(),
        labels: InstanceLabels {
            mention: random_label(k, rng),
            candidates: (0..n).map(|_| random_label(k, rng)).collect(),
        },
    }
}

/// The scoring and joint loss graph of one instance.
pub fn instance_loss(model: &LatteModel, g: &mut Graph<'_>, inst: &PairInstance) -> latte_core::Result<Var> {
    let variant = model.config.variant;
    let config = JointLossConfig {
        enable_latent: variant.latent_in_score(),
        enable_known_type: variant.known_types(),
        ..JointLossConfig::default()
    };
    let mut cache = ForwardCache::default();
    let m = model.encode(g, &inst.mention, &mut cache)?;
    let mut rs = Vec::new();
    let mut types = Vec::new();
    for seq in &inst.candidates {
        let c = model.encode(g, seq, &mut cache)?;
        rs.push(model.pair(g, &m, &c)?.r);
        types.extend(c.known);
    }
    let outputs = InstanceOutputs {
        r_pos: rs[0],
        r_negs: rs[1..].to_vec(),
        mention_types: m.known,
        candidate_types: types,
    };
    Ok(joint_loss(g, &outputs, Some(&inst.labels), &config)?.total)
}

/// Finite-difference check of the whole scoring and joint-loss graph of a
/// random small model. Variants cycle with the seed.
pub fn end_to_end_case(seed: u64) -> Result<(Variant, f64), String> {
    let mut rng = rng(seed);
    let variant = Variant::ALL[seed as usize % Variant::ALL.len()];
    let model = small_model(variant, &mut rng);
    let inst = random_instance(&model, &mut rng);
    let worst = check_params(&model.store, 12, &mut rng, |g| instance_loss(&model, g, &inst))
        .map_err(|e| format!("{variant} seed {seed}: {e}"))?;
    Ok((variant, worst))
}

/// Runs every op case for one seed; returns the worst error per op.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, String> {
    let mut rng = rng(seed);
    op_cases(&mut rng)
        .into_iter()
        .map(|case| {
            let ctx = case.ctx.clone();
            let f = case.f;
            let e = check_leaves(&case.inputs, |g, v| f(g, v, &ctx))
                .map_err(|e| format!("{} seed {seed}: {e}", case.name))?;
            Ok((case.name, e))
        })
        .collect()
}

// ---- brute-force references ---------------------------------------------

pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * p + j];
            }
            out[i * p + j] = s;
        }
    }
    out
}

/// Softmax of the live entries of one row without max-shifting.
pub fn ref_softmax(row: &[f64], mask: &[bool]) -> Vec<f64> {
    let z: f64 = row.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x.exp()).sum();
    row.iter()
        .zip(mask)
        .map(|(x, &m)| if m { x.exp() / z } else { 0.0 })
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step written out per unit. Gate blocks: input, forget, output,
/// candidate.
pub fn ref_lstm_cell(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w: &[f64],
    u: &[f64],
    b: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let cols = 4 * hd;
    let z = |gate: usize, j: usize| {
        let col = gate * hd + j;
        let mut s = b[col];
        for (k, xk) in x.iter().enumerate() {
            s += xk * w[k * cols + col];
        }
        for (k, hk) in h.iter().enumerate() {
            s += hk * u[k * cols + col];
        }
        s
    };
    let mut h_out = vec![0.0; hd];
    let mut c_out = vec![0.0; hd];
    for j in 0..hd {
        let i = sig(z(0, j));
        let f = sig(z(1, j));
        let o = sig(z(2, j));
        let cand = z(3, j).tanh();
        c_out[j] = f * c[j] + i * cand;
        h_out[j] = o * c_out[j].tanh();
    }
    (h_out, c_out)
}

/// Compares `lstm_cell` with the per-unit reference on random weights.
pub fn lstm_oracle_case(rng: &mut impl Rng) -> Result<f64, String> {
    let d = rng.gen_range(1..6);
    let hd = rng.gen_range(1..5);
    let mut store = ParamStore::new();
    let dir = LstmDirection {
        w: store.register("w", random_tensor(&[d, 4 * hd], rng)),
        u: store.register("u", random_tensor(&[hd, 4 * hd], rng)),
        b: store.register("b", random_tensor(&[4 * hd], rng)),
    };
    let x = random_tensor(&[1, d], rng);
    let h = random_tensor(&[1, hd], rng);
    let c = random_tensor(&[1, hd], rng);
    let mut g = Graph::with_params(&store);
    let (xv, hv, cv) = (g.leaf(x.clone()), g.leaf(h.clone()), g.leaf(c.clone()));
    let (h_t, c_t) = lstm_cell(&mut g, xv, hv, cv, &dir).map_err(|e| e.to_string())?;
    let (rh, rc) = ref_lstm_cell(
        x.data(),
        h.data(),
        c.data(),
        store.tensor(dir.w).data(),
        store.tensor(dir.u).data(),
        store.tensor(dir.b).data(),
    );
    let e1 = max_abs_diff(g.value(h_t).data(), &rh);
    let e2 = max_abs_diff(g.value(c_t).data(), &rc);
    Ok(e1.max(e2))
}

/// Bidirectional attention with explicit loops over positions.
pub struct RefAttention {
    pub s: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

pub fn ref_attention(
    uc: &[Vec<f64>],
    up: &[Vec<f64>],
    w_a: &[f64],
    mask_c: &[bool],
    mask_p: &[bool],
) -> RefAttention {
    let len = uc.len();
    let d = uc[0].len();
    let mut s = vec![vec![0.0; len]; len];
    for i in 0..len {
        for j in 0..len {
            let mut v = 0.0;
            for k in 0..d {
                v += w_a[k] * uc[i][k] + w_a[d + k] * up[j][k] + w_a[2 * d + k] * uc[i][k] * up[j][k];
            }
            s[i][j] = v;
        }
    }
    // alpha[i][j]: over candidate positions i for each mention position j
    let mut alpha = vec![vec![0.0; len]; len];
    for j in 0..len {
        let col: Vec<f64> = (0..len).map(|i| s[i][j]).collect();
        let sm = ref_softmax(&col, mask_c);
        for i in 0..len {
            alpha[i][j] = sm[i];
        }
    }
    // beta_bar[i][j]: over mention positions j for each candidate position i
    let beta_bar: Vec<Vec<f64>> = (0..len).map(|i| ref_softmax(&s[i], mask_p)).collect();
    let mut beta = vec![vec![0.0; len]; len];
    for i in 0..len {
        for j in 0..len {
            beta[i][j] = (0..len).map(|k| alpha[i][k] * beta_bar[j][k]).sum();
        }
    }
    let mut x = vec![vec![0.0; 4 * d]; len];
    for j in 0..len {
        if !mask_p[j] {
            continue;
        }
        for k in 0..d {
            let a_alpha: f64 = (0..len).map(|i| alpha[i][j] * uc[i][k]).sum();
            let a_beta: f64 = (0..len).map(|i| beta[i][j] * up[i][k]).sum();
            x[j][k] = up[j][k];
            x[j][d + k] = a_alpha;
            x[j][2 * d + k] = up[j][k] * a_alpha;
            x[j][3 * d + k] = uc[j][k] * a_beta;
        }
    }
    RefAttention { s, x }
}

pub fn attention_oracle_case(rng: &mut impl Rng) -> Result<f64, String> {
    let len = rng.gen_range(1..6);
    let d = rng.gen_range(1..5);
    let uc = random_tensor(&[len, d], rng);
    let up = random_tensor(&[len, d], rng);
    let w_a = random_tensor(&[3 * d, 1], rng);
    let mask_c = prefix_mask(len, rng.gen_range(1..=len));
    let mask_p = prefix_mask(len, rng.gen_range(1..=len));
    let rows = |t: &Tensor| (0..len).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    let reference = ref_attention(&rows(&uc), &rows(&up), w_a.data(), &mask_c, &mask_p);
    let mut g = Graph::new();
    let (c, p, w) = (g.leaf(uc), g.leaf(up), g.leaf(w_a));
    let s = similarity_matrix(&mut g, c, p, w).map_err(|e| e.to_string())?;
    let out = bidirectional_attention(&mut g, s, c, p, &mask_c, &mask_p).map_err(|e| e.to_string())?;
    let e1 = max_abs_diff(g.value(s).data(), &reference.s.concat());
    let e2 = max_abs_diff(g.value(out.x).data(), &reference.x.concat());
    Ok(e1.max(e2))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Character n-gram TF-IDF cosine, counted by scanning every substring.
pub struct RefTfIdf {
    idf: BTreeMap<String, f64>,
    docs: Vec<(String, BTreeMap<String, f64>)>,
}

fn ref_counts(text: &str, lo: usize, hi: usize) -> BTreeMap<String, f64> {
    let chars: Vec<char> = text.trim().to_lowercase().chars().collect();
    let mut out = BTreeMap::new();
    for start in 0..chars.len() {
        for n in lo..=hi {
            if start + n <= chars.len() {
                let gram: String = chars[start..start + n].iter().collect();
                *out.entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }
    out
}

impl RefTfIdf {
    pub fn new(docs: &[(String, String)], lo: usize, hi: usize) -> Self {
        let counts: Vec<BTreeMap<String, f64>> = docs.iter().map(|(_, t)| ref_counts(t, lo, hi)).collect();
        let n = docs.len() as f64;
        let mut idf = BTreeMap::new();
        let vocab: BTreeSet<&String> = counts.iter().flat_map(|c| c.keys()).collect();
        for term in vocab {
            let df = counts.iter().filter(|c| c.contains_key(term)).count() as f64;
            idf.insert(term.clone(), ((1.0 + n) / (1.0 + df)).ln() + 1.0);
        }
        let mut r = Self { idf, docs: Vec::new() };
        r.docs = docs
            .iter()
            .zip(&counts)
            .map(|((id, _), c)| (id.clone(), r.weigh(c)))
            .collect();
        r
    }

    fn weigh(&self, counts: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
        let raw: BTreeMap<String, f64> = counts
            .iter()
            .filter_map(|(t, c)| self.idf.get(t).map(|w| (t.clone(), c * w)))
            .collect();
        let norm = raw.values().map(|v| v * v).sum::<f64>().sqrt();
        raw.into_iter()
            .map(|(t, v)| (t, if norm > 0.0 { v / norm } else { 0.0 }))
            .collect()
    }

    pub fn scores(&self, query: &str, lo: usize, hi: usize) -> Vec<(String, f64)> {
        let q = self.weigh(&ref_counts(query, lo, hi));
        self.docs
            .iter()
            .map(|(id, d)| {
                let dot: f64 = q.iter().map(|(t, w)| w * d.get(t).copied().unwrap_or(0.0)).sum();
                (id.clone(), dot)
            })
            .collect()
    }
}

const ALPHABET: &[char] = &['a', 'b', 'c', 'e', 'k', 'o', 'r', ' ', '-', 'A'];

pub fn random_name(rng: &mut impl Rng) -> String {
    loop {
        let n = rng.gen_range(1..9);
        let s: String = (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect();
        if !s.trim().is_empty() {
            return s;
        }
    }
}

/// Checks scores and ordering of `TfIdfIndex::rank` against the reference.
pub fn tfidf_oracle_case(rng: &mut impl Rng) -> Result<f64, String> {
    let n = rng.gen_range(1..12);
    let docs: Vec<(String, String)> = (0..n).map(|i| (format!("E{i:03}"), random_name(rng))).collect();
    let (lo, hi) = if rng.gen_bool(0.5) { (1, 5) } else { (rng.gen_range(1..3), rng.gen_range(3..5)) };
    let index = TfIdfIndex::from_docs(&docs, (lo, hi)).map_err(|e| e.to_string())?;
    let reference = RefTfIdf::new(&docs, lo, hi);
    let query = random_name(rng);
    let expected: BTreeMap<String, f64> = reference.scores(&query, lo, hi).into_iter().collect();
    let ranked = index.rank(&query).map_err(|e| e.to_string())?;
    if ranked.len() != n {
        return Err(format!("{} ranked of {n}", ranked.len()));
    }
    let mut worst: f64 = 0.0;
    for (id, s) in &ranked {
        let e = expected.get(*id).ok_or_else(|| format!("unknown id {id}"))?;
        worst = worst.max((s - e.clamp(0.0, 1.0)).abs());
    }
    for pair in ranked.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (ea, eb) = (expected[a.0], expected[b.0]);
        if ea < eb - ORACLE_TOL {
            return Err(format!("{} ({ea}) ranked above {} ({eb}) for {query:?}", a.0, b.0));
        }
        if a.1 == b.1 && a.0 > b.0 {
            return Err(format!("tie between {} and {} not broken by id", a.0, b.0));
        }
    }
    Ok(worst)
}

/// Random ranking problem: candidate ids and scores with deliberate ties.
pub fn random_rankings(rng: &mut impl Rng) -> Vec<(String, Vec<(String, f64)>)> {
    let count = rng.gen_range(1..20);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(1..8);
            let mut ids: Vec<String> = (0..n).map(|i| format!("C{i}")).collect();
            ids.shuffle(rng);
            let scores = ids
                .iter()
                .map(|id| (id.clone(), rng.gen_range(0..4) as f64 * 0.5))
                .collect();
            let gold = ids.choose(rng).unwrap().clone();
            (gold, scores)
        })
        .collect()
}

/// Rank of gold counted directly: higher scores plus equal scores with a
/// smaller id.
pub fn ref_rank(gold: &str, scores: &[(String, f64)]) -> usize {
    let gs = scores.iter().find(|(id, _)| id == gold).unwrap().1;
    1 + scores
        .iter()
        .filter(|(id, s)| *s > gs || (*s == gs && id.as_str() < gold))
        .count()
}

pub fn metrics_oracle_case(rng: &mut impl Rng) -> Result<f64, String> {
    let problems = random_rankings(rng);
    let results = problems
        .iter()
        .enumerate()
        .map(|(i, (gold, scores))| RankingResult::new(format!("M{i}"), gold, scores.clone()))
        .collect::<latte_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let ranks: Vec<usize> = problems.iter().map(|(g, s)| ref_rank(g, s)).collect();
    for (r, &expected) in results.iter().zip(&ranks) {
        if r.rank_of_gold != expected {
            return Err(format!("rank {} expected {expected}", r.rank_of_gold));
        }
    }
    let n = ranks.len() as f64;
    let p1 = ranks.iter().filter(|&&r| r == 1).count() as f64 / n;
    let map = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let e1 = (precision_at_1(&results).map_err(|e| e.to_string())? - p1).abs();
    let e2 = (mean_average_precision(&results).map_err(|e| e.to_string())? - map).abs();
    Ok(e1.max(e2))
}

pub fn matmul_oracle_case(rng: &mut impl Rng) -> Result<f64, String> {
    let (m, n, p) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
    let a = random_tensor(&[m, n], rng);
    let b = random_tensor(&[n, p], rng);
    let expected = ref_matmul(a.data(), b.data(), m, n, p);
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(a), g.leaf(b));
    let out = g.matmul(va, vb).map_err(|e| e.to_string())?;
    Ok(max_abs_diff(g.value(out).data(), &expected))
}

pub fn softmax_oracle_case(rng: &mut impl Rng) -> Result<f64, String> {
    let (rows, cols) = (rng.gen_range(1..6), rng.gen_range(1..9));
    let x = Tensor::uniform(vec![rows, cols], 5.0, rng);
    let mask = random_mask(rows, cols, rng);
    let expected: Vec<f64> = (0..rows)
        .flat_map(|r| ref_softmax(x.row(r), &mask[r * cols..(r + 1) * cols]))
        .collect();
    let mut g = Graph::new();
    let v = g.leaf(x);
    let out = g.masked_softmax(v, &mask).map_err(|e| e.to_string())?;
    Ok(max_abs_diff(g.value(out).data(), &expected))
}

// ---- invariant checks ---------------------------------------------------

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

pub fn softmax_normalised(rows: usize, cols: usize, data: &[f64], mask: &[bool]) -> Result<(), TestCaseError> {
    let x = Tensor::new(vec![rows, cols], data.to_vec()).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(x);
    let out = g.masked_softmax(v, mask).map_err(|e| fail(e.to_string()))?;
    let y = g.value(out).data();
    for r in 0..rows {
        let row = &y[r * cols..(r + 1) * cols];
        let m = &mask[r * cols..(r + 1) * cols];
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ORACLE_TOL {
            return Err(fail(format!("row {r} sums to {total}")));
        }
        if row.iter().zip(m).any(|(v, &live)| !live && *v != 0.0) {
            return Err(fail(format!("row {r} has weight on a masked entry")));
        }
        if row.iter().any(|v| *v < 0.0) {
            return Err(fail(format!("row {r} has a negative weight")));
        }
    }
    Ok(())
}

/// `g` of a model's latent head lies in (0, 1] and is 1 for identical texts.
pub fn latent_similarity_bounds(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = rng(seed);
    let variant = if rng.gen_bool(0.5) { Variant::Full } else { Variant::BaseLt };
    let model = small_model(variant, &mut rng);
    let m = random_seq(&model, &mut rng);
    let c = random_seq(&model, &mut rng);
    let mut g = Graph::with_params(&model.store);
    let mut cache = ForwardCache::default();
    let em = model.encode(&mut g, &m, &mut cache).map_err(|e| fail(e.to_string()))?;
    let ec = model.encode(&mut g, &c, &mut cache).map_err(|e| fail(e.to_string()))?;
    let (vm, vc) = (em.latent.unwrap().1, ec.latent.unwrap().1);
    let cross = g.cosine(vm, vc).map_err(|e| fail(e.to_string()))?;
    let own = g.cosine(vm, vm).map_err(|e| fail(e.to_string()))?;
    let (cross, own) = (g.item(cross), g.item(own));
    if !(cross > 0.0 && cross <= 1.0) {
        return Err(fail(format!("g = {cross} outside (0, 1]")));
    }
    if (own - 1.0).abs() > ORACLE_TOL {
        return Err(fail(format!("g(v, v) = {own}")));
    }
    Ok(())
}

/// Relevance `f` is non-negative for every variant.
pub fn relevance_non_negative(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = rng(seed);
    let variant = *Variant::ALL.choose(&mut rng).unwrap();
    let mut model = small_model(variant, &mut rng);
    // push the output bias negative so the output ReLU is exercised
    let ff = model.attention.ff.layers.last().unwrap().1;
    model.store.tensor_mut(ff).data_mut()[0] = rng.gen_range(-2.0..1.0);
    let mention = random_seq(&model, &mut rng);
    let cands: Vec<TokenizedSeq> = (0..3).map(|_| random_seq(&model, &mut rng)).collect();
    let ents: Vec<CandidateEntity> = (0..3)
        .map(|i| CandidateEntity {
            entity_id: format!("E{i}"),
            name: "x".into(),
            known_type_ids: BTreeSet::new(),
        })
        .collect();
    let scored = model
        .score_sequences(&mention, &ents, &cands)
        .map_err(|e| fail(e.to_string()))?;
    for s in scored {
        if s.f < 0.0 {
            return Err(fail(format!("f = {} < 0 for {variant}", s.f)));
        }
    }
    Ok(())
}

/// Rewriting the word ids under the padding mask leaves `r` unchanged.
pub fn padding_invariance(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = rng(seed);
    let variant = *Variant::ALL.choose(&mut rng).unwrap();
    let model = small_model(variant, &mut rng);
    let mention = random_seq(&model, &mut rng);
    let cand = random_seq(&model, &mut rng);
    let scramble = |seq: &TokenizedSeq, rng: &mut ChaCha8Rng| {
        let mut s = seq.clone();
        for (id, &live) in s.word_ids.iter_mut().zip(&seq.mask) {
            if !live {
                *id = rng.gen_range(0..model.vocab.len());
            }
        }
        s
    };
    let ent = [CandidateEntity {
        entity_id: "E0".into(),
        name: "x".into(),
        known_type_ids: BTreeSet::new(),
    }];
    let base = model
        .score_sequences(&mention, &ent, std::slice::from_ref(&cand))
        .map_err(|e| fail(e.to_string()))?;
    let m2 = scramble(&mention, &mut rng);
    let c2 = scramble(&cand, &mut rng);
    let moved = model
        .score_sequences(&m2, &ent, std::slice::from_ref(&c2))
        .map_err(|e| fail(e.to_string()))?;
    let d = (base[0].r - moved[0].r).abs();
    if d >= ORACLE_TOL {
        return Err(fail(format!("r moved by {d} for {variant}")));
    }
    Ok(())
}

/// The ranking loss is zero exactly when every negative trails the
/// positive by at least the margin.
pub fn ranking_loss_zero_iff_margin(r_pos: f64, r_negs: &[f64], margin: f64) -> Result<(), TestCaseError> {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::scalar(r_pos));
    let n: Vec<Var> = r_negs.iter().map(|&r| g.leaf(Tensor::scalar(r))).collect();
    let l = ranking_loss(&mut g, p, &n, margin).map_err(|e| fail(e.to_string()))?;
    let zero = g.item(l) == 0.0;
    let satisfied = r_negs.iter().all(|&r| r_pos - r >= margin);
    if zero != satisfied {
        return Err(fail(format!("loss {} but margin satisfied = {satisfied}", g.item(l))));
    }
    Ok(())
}

pub fn metric_bounds(problems: &[(String, Vec<(String, f64)>)]) -> Result<(), TestCaseError> {
    let results: Vec<RankingResult> = problems
        .iter()
        .map(|(gold, scores)| RankingResult::new("m", gold, scores.clone()).unwrap())
        .collect();
    let p1 = precision_at_1(&results).unwrap();
    let map = mean_average_precision(&results).unwrap();
    if !(0.0..=1.0).contains(&p1) || p1 > map + 1e-12 || map > 1.0 {
        return Err(fail(format!("P@1 {p1} MAP {map}")));
    }
    Ok(())
}

// ---- small datasets -----------------------------------------------------

pub fn entity(id: &str, name: &str, types: &[usize]) -> CandidateEntity {
    CandidateEntity {
        entity_id: id.into(),
        name: name.into(),
        known_type_ids: types.iter().copied().collect(),
    }
}

pub fn toy_kb() -> KnowledgeBase {
    KnowledgeBase::new(vec![
        entity("E1", "acute renal failure", &[0]),
        entity("E2", "chronic renal failure", &[0]),
        entity("E3", "renal cell carcinoma", &[1]),
    ])
    .unwrap()
}

/// A synthetic corpus small enough to train for a few epochs in seconds.
pub fn tiny_dataset(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        seed,
        num_entities: 40,
        num_types: 4,
        train_mentions: 48,
        dev_mentions: 16,
        test_mentions: 16,
        family_size: 3,
        modifiers: 12,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn tiny_config(variant: Variant, seed: u64) -> RunConfig {
    let mut config = RunConfig {
        seed,
        epochs: 2,
        patience: 0,
        negatives: 4,
        batch_size: 8,
        ..RunConfig::default()
    };
    config.optimizer.lr = 1e-3;
    config.model = ModelConfig {
        variant,
        max_len: 8,
        embedding: EmbeddingConfig {
            word_dim: 8,
            char_dim: 4,
            char_cnn_dim: 6,
            ..EmbeddingConfig::default()
        },
        hidden: 6,
        lstm_layers: 1,
        ff_hidden: vec![16],
        latent_types: 8,
        known_types: 4,
    };
    config
}
