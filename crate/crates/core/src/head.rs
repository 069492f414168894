//! Entity-aware attention, shared-space projection, category scoring and
//! the max-margin ranking objective.

use crate::autodiff::{Axis, Bound, ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Dense;

/// Ranking margin.
pub const MARGIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    /// `(d + |E|) × 1`.
    pub w: ParamId,
    /// `1 × 1`.
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionParams {
    /// `(d + |E|) → h`.
    pub sample: Dense,
    /// `d → h`.
    pub prototype: Dense,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadParams {
    pub attention: AttentionParams,
    pub projection: ProjectionParams,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, d: usize, entity_dim: usize, h: usize, rng: &mut Rng) -> Self {
        let fan_in = d + entity_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let attention = AttentionParams {
            w: store.add("head.attention.w", rng.uniform_tensor(fan_in, 1, bound)),
            b: store.add("head.attention.b", Tensor::zeros(1, 1)),
        };
        let projection = ProjectionParams {
            sample: Dense::init(store, "head.sample", fan_in, h, rng),
            prototype: Dense::init(store, "head.prototype", d, h, rng),
        };
        Self { attention, projection }
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams {
                w: store.id("head.attention.w")?,
                b: store.id("head.attention.b")?,
            },
            projection: ProjectionParams {
                sample: Dense::lookup(store, "head.sample")?,
                prototype: Dense::lookup(store, "head.prototype")?,
            },
        })
    }
}

/// Attention weights over the columns of `h`, `1 × n`.
pub fn attention_weights<'t>(
    p: &Bound<'t>,
    params: &AttentionParams,
    h: Var<'t>,
    entity: Var<'t>,
) -> Result<Var<'t>> {
    let w = p.get(params.w);
    if w.rows() != h.rows() + entity.rows() || entity.cols() != 1 {
        return Err(Error::Shape {
            kernel: "attention_fuse".into(),
            lhs: vec![h.rows() + entity.rows(), entity.cols()],
            rhs: w.shape().to_vec(),
        });
    }
    let n = h.cols();
    let features = h.tape().concat_rows(&[h, entity.repeat_cols(n)?])?;
    w.t()?.matmul(features)?.add_bias(p.get(params.b))?.softmax(Axis::Cols)
}

/// `U = Σᵢ αᵢ hᵢ`, `d × 1`.
pub fn attention_fuse<'t>(
    p: &Bound<'t>,
    params: &AttentionParams,
    h: Var<'t>,
    entity: Var<'t>,
) -> Result<Var<'t>> {
    let alpha = attention_weights(p, params, h, entity)?;
    h.matmul(alpha.t()?)
}

/// Maps the fused sample representation and the prototype columns into the shared space.
/// Returns `(Û: h × 1, R̂: h × C)`.
pub fn project_shared<'t>(
    p: &Bound<'t>,
    params: &ProjectionParams,
    u_tilde: Var<'t>,
    prototypes: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        params.sample.forward(p, u_tilde)?,
        params.prototype.forward(p, prototypes)?,
    ))
}

/// `oᵢ = Ûᵀ R̂ᵢ`, `C × 1` in category order.
pub fn score_categories<'t>(u_hat: Var<'t>, r_hat: Var<'t>) -> Result<Var<'t>> {
    if u_hat.rows() != r_hat.rows() {
        return Err(Error::Shape {
            kernel: "score_categories".into(),
            lhs: u_hat.shape().to_vec(),
            rhs: r_hat.shape().to_vec(),
        });
    }
    r_hat.t()?.matmul(u_hat)
}

/// `Σ_{i ≠ gold} max(0, 1 − o⁺ + oᵢ)`.
pub fn ranking_loss<'t>(scores: Var<'t>, gold: usize) -> Result<Var<'t>> {
    let c = scores.rows();
    if gold >= c || scores.cols() != 1 {
        return Err(Error::invalid(format!(
            "gold index {gold} invalid for {c} category scores"
        )));
    }
    let tape = scores.tape();
    let positive = scores.slice_rows(gold, gold + 1)?.repeat_cols(c)?.t()?;
    let mask = tape.constant(Tensor::from_fn(c, 1, |r, _| if r == gold { 0.0 } else { 1.0 }));
    scores
        .sub(positive)?
        .add_scalar(MARGIN)?
        .hinge()?
        .mul(mask)?
        .sum()
}

/// Index of the highest score; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot predict from an empty score vector"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}
