use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Latent-type projection and known-type head, shared by the mention and
/// candidate paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeParams {
    pub w_l: ParamId,
    pub b_l: ParamId,
    /// Known-type head; absent when the model has no type supervision.
    pub known: Option<(ParamId, ParamId)>,
    pub latent_types: usize,
    pub known_types: usize,
}

impl TypeParams {
    pub fn register(
        store: &mut ParamStore,
        input_dim: usize,
        latent_types: usize,
        known_types: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || latent_types == 0 || known_types == Some(0) {
            return Err(Error::Config("type head sizes must be positive".into()));
        }
        let bound = 1.0 / (input_dim as f64).sqrt();
        let w_l = store.register(
            "types.latent.w",
            Tensor::uniform(vec![input_dim, latent_types], bound, rng),
        );
        let b_l = store.register("types.latent.b", Tensor::zeros(vec![latent_types]));
        let known = known_types.map(|kt| {
            let bound = 1.0 / (latent_types as f64).sqrt();
            let w = store.register(
                "types.known.w",
                Tensor::uniform(vec![latent_types, kt], bound, rng),
            );
            let b = store.register("types.known.b", Tensor::zeros(vec![kt]));
            (w, b)
        });
        Ok(Self {
            w_l,
            b_l,
            known,
            latent_types,
            known_types: known_types.unwrap_or(0),
        })
    }
}

/// `v = w_l . flatten(U) + b_l` and `v_hat = softmax(v)`, both `[1, k]`.
pub fn latent_type_distribution(g: &mut Graph<'_>, u: Var, params: &TypeParams) -> Result<(Var, Var)> {
    let n = g.value(u).numel();
    let w = g.param(params.w_l);
    if g.shape(w)[0] != n {
        return Err(Error::dim("latent_type_distribution", &[n], g.shape(w)));
    }
    let b = g.param(params.b_l);
    let flat = g.reshape(u, &[1, n])?;
    let v = g.matmul(flat, w)?;
    let v = g.add(v, b)?;
    let v_hat = g.softmax(v)?;
    Ok((v, v_hat))
}

/// Cosine similarity of two latent type distributions.
pub fn latent_type_similarity(g: &mut Graph<'_>, v_hat_p: Var, v_hat_c: Var) -> Result<Var> {
    g.cosine(v_hat_p, v_hat_c)
}

/// `y = ReLU(w_k . v + b_k)` from the pre-softmax latent encoding.
pub fn known_type_scores(g: &mut Graph<'_>, v: Var, params: &TypeParams) -> Result<Var> {
    let (w, b) = params
        .known
        .ok_or_else(|| Error::Contract("model has no known-type head".into()))?;
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(v, w)?;
    let y = g.add(y, b)?;
    g.relu(y)
}

/// The two fusion weights of `r = w_f f + w_g g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub w_f: ParamId,
    /// Absent when the latent similarity takes no part in ranking.
    pub w_g: Option<ParamId>,
}

impl FusionParams {
    pub fn register(store: &mut ParamStore, with_latent: bool) -> Self {
        let w_f = store.register("fusion.w_f", Tensor::scalar(1.0));
        let w_g = with_latent.then(|| store.register("fusion.w_g", Tensor::scalar(1.0)));
        Self { w_f, w_g }
    }
}

/// `r = w_f f + w_g g`; `g` is ignored when the fusion has no `w_g`.
pub fn rank_score(g: &mut Graph<'_>, f: Var, sim: Option<Var>, fusion: &FusionParams) -> Result<Var> {
    let w_f = g.param(fusion.w_f);
    let f = g.reshape(f, &[])?;
    let mut r = g.mul(w_f, f)?;
    if let (Some(w_g), Some(sim)) = (fusion.w_g, sim) {
        let w_g = g.param(w_g);
        let sim = g.reshape(sim, &[])?;
        let term = g.mul(w_g, sim)?;
        r = g.add(r, term)?;
    }
    Ok(r)
}
