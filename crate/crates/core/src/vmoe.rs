//! Variational mixture of experts over concatenated visual and textual tokens.
//!
//! Each expert is a variational information bottleneck: dense heads give a
//! Gaussian `N(μ, σ²)` per token, sampled with the reparameterization trick
//! during training and collapsed to `μ` at inference. A softmax router
//! weights the experts per token.

use crate::autodiff::{Axis, Bound, ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Dense;

/// Lower bound added to the softplus standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertParams {
    pub mu: Dense,
    pub sigma: Dense,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouterParams {
    /// `d × K`.
    pub w: ParamId,
    /// `K × 1`.
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VmoeParams {
    pub experts: Vec<ExpertParams>,
    pub router: RouterParams,
}

impl VmoeParams {
    pub fn init(store: &mut ParamStore, d: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("at least one expert is required"));
        }
        let experts = (0..k)
            .map(|i| ExpertParams {
                mu: Dense::init(store, &format!("vmoe.expert{i}.mu"), d, d, rng),
                sigma: Dense::init(store, &format!("vmoe.expert{i}.sigma"), d, d, rng),
            })
            .collect();
        let bound = 1.0 / (d as f64).sqrt();
        let router = RouterParams {
            w: store.add("vmoe.router.w", rng.uniform_tensor(d, k, bound)),
            b: store.add("vmoe.router.b", Tensor::zeros(k, 1)),
        };
        Ok(Self { experts, router })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        let router = RouterParams {
            w: store.id("vmoe.router.w")?,
            b: store.id("vmoe.router.b")?,
        };
        let k = store.value(router.w).cols();
        let experts = (0..k)
            .map(|i| {
                Ok(ExpertParams {
                    mu: Dense::lookup(store, &format!("vmoe.expert{i}.mu"))?,
                    sigma: Dense::lookup(store, &format!("vmoe.expert{i}.sigma"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { experts, router })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

/// How token gates are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    /// Softmax router.
    Learned,
    /// One-hot gates selecting a single expert for every token.
    Expert(usize),
    /// Externally supplied `K × tokens` gates.
    Fixed(Tensor),
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertOutput<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
    pub z: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct VmoeOutput<'t> {
    /// Fused tokens, `d × (|V| + |T|)`.
    pub h: Var<'t>,
    pub experts: Vec<ExpertOutput<'t>>,
    /// `K × (|V| + |T|)`.
    pub gates: Var<'t>,
    pub visual_len: usize,
    pub text_len: usize,
}

impl<'t> VmoeOutput<'t> {
    /// Fused visual tokens `Ṽ`.
    pub fn visual(&self) -> Result<Var<'t>> {
        self.h.slice_cols(0, self.visual_len)
    }

    /// Fused textual tokens `T̃`.
    pub fn text(&self) -> Result<Var<'t>> {
        self.h.slice_cols(self.visual_len, self.visual_len + self.text_len)
    }
}

/// `M = [V; T]`: visual columns first.
pub fn concat_modalities<'t>(visual: Var<'t>, text: Var<'t>) -> Result<Var<'t>> {
    if visual.rows() != text.rows() {
        return Err(Error::Shape {
            kernel: "concat_modalities".into(),
            lhs: visual.shape().to_vec(),
            rhs: text.shape().to_vec(),
        });
    }
    visual.tape().concat_cols(&[visual, text])
}

/// One VIB expert. `eps = None` is inference mode (`Z = μ`).
pub fn expert_forward<'t>(
    p: &Bound<'t>,
    params: &ExpertParams,
    m: Var<'t>,
    eps: Option<&Tensor>,
) -> Result<ExpertOutput<'t>> {
    let mu = params.mu.forward(p, m)?;
    let sigma = params.sigma.forward(p, m)?.softplus()?.add_scalar(SIGMA_FLOOR)?;
    let z = match eps {
        None => mu,
        Some(e) => {
            if e.shape() != mu.shape() {
                return Err(Error::Shape {
                    kernel: "expert_forward".into(),
                    lhs: mu.shape().to_vec(),
                    rhs: e.shape().to_vec(),
                });
            }
            let e = m.tape().constant(e.clone());
            mu.add(sigma.mul(e)?)?
        }
    };
    Ok(ExpertOutput { mu, sigma, z })
}

/// Column-wise softmax of `W_gᵀ M + b_g`.
pub fn router_forward<'t>(p: &Bound<'t>, params: &RouterParams, m: Var<'t>) -> Result<Var<'t>> {
    p.get(params.w).t()?.matmul(m)?.add_bias(p.get(params.b))?.softmax(Axis::Rows)
}

/// Standard normal noise for every expert, `d × tokens` each.
pub fn sample_noise(rng: &mut Rng, experts: usize, d: usize, tokens: usize) -> Vec<Tensor> {
    (0..experts).map(|_| rng.gaussian(d, tokens)).collect()
}

/// Full layer: `H = Σᵢ Zᵢ · Gᵢ`. `noise = None` is inference mode.
pub fn vmoe_forward<'t>(
    p: &Bound<'t>,
    params: &VmoeParams,
    visual: Var<'t>,
    text: Var<'t>,
    noise: Option<&[Tensor]>,
    routing: &Routing,
) -> Result<VmoeOutput<'t>> {
    let tape = visual.tape();
    let k = params.num_experts();
    if let Some(n) = noise {
        if n.len() != k {
            return Err(Error::invalid(format!("noise for {} experts, model has {k}", n.len())));
        }
    }
    let m = concat_modalities(visual, text)?;
    let tokens = m.cols();
    let experts = params
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| expert_forward(p, e, m, noise.map(|n| &n[i])))
        .collect::<Result<Vec<_>>>()?;
    let gates = match routing {
        Routing::Learned => router_forward(p, &params.router, m)?,
        Routing::Expert(j) => {
            if *j >= k {
                return Err(Error::invalid(format!("expert {j} out of range for K = {k}")));
            }
            tape.constant(Tensor::from_fn(k, tokens, |r, _| if r == *j { 1.0 } else { 0.0 }))
        }
        Routing::Fixed(g) => {
            if g.shape() != [k, tokens] {
                return Err(Error::Shape {
                    kernel: "vmoe_forward".into(),
                    lhs: vec![k, tokens],
                    rhs: g.shape().to_vec(),
                });
            }
            tape.constant(g.clone())
        }
    };
    let mut h = experts[0].z.mul_row(gates.slice_rows(0, 1)?)?;
    for (i, e) in experts.iter().enumerate().skip(1) {
        h = h.add(e.z.mul_row(gates.slice_rows(i, i + 1)?)?)?;
    }
    Ok(VmoeOutput {
        h,
        experts,
        gates,
        visual_len: visual.cols(),
        text_len: text.cols(),
    })
}

/// Mean per-token routing entropy `−Σᵢ Gᵢⱼ ln Gᵢⱼ`.
pub fn aux_loss<'t>(gates: Var<'t>) -> Result<Var<'t>> {
    let tokens = gates.cols() as f64;
    gates.xlogx()?.sum()?.scale(-1.0 / tokens)
}

/// `Σᵢ KL(N(μᵢ, σᵢ²) ‖ N(0, I))`, summed over every coordinate.
pub fn reg_loss<'t>(experts: &[ExpertOutput<'t>]) -> Result<Var<'t>> {
    if experts.is_empty() {
        return Err(Error::invalid("reg_loss needs at least one expert"));
    }
    let mut total: Option<Var<'t>> = None;
    for e in experts {
        let sigma = e.sigma.value();
        if let Some(bad) = sigma.data().iter().find(|&&s| s <= 0.0) {
            return Err(Error::invalid(format!("standard deviation must be positive, got {bad}")));
        }
        let n = sigma.len() as f64;
        let var = e.sigma.square()?;
        let kl = e
            .mu
            .square()?
            .sum()?
            .add(var.sum()?)?
            .sub(var.ln()?.sum()?)?
            .add_scalar(-n)?
            .scale(0.5)?;
        total = Some(match total {
            Some(t) => t.add(kl)?,
            None => kl,
        });
    }
    Ok(total.expect("at least one expert"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn setup(d: usize, k: usize, seed: u64) -> (ParamStore, VmoeParams) {
        let mut store = ParamStore::new();
        let params = VmoeParams::init(&mut store, d, k, &mut Rng::new(seed)).unwrap();
        (store, params)
    }

    #[test]
    fn concat_puts_visual_first_and_splits_back() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::from_fn(2, 2, |r, c| (10 * r + c) as f64));
        let t = tape.leaf(Tensor::from_fn(2, 3, |r, c| -((10 * r + c) as f64) - 1.0));
        let m = concat_modalities(v, t).unwrap();
        assert_eq!(m.cols(), 5);
        assert_eq!(m.slice_cols(0, 2).unwrap().value(), v.value());
        assert_eq!(m.slice_cols(2, 5).unwrap().value(), t.value());
        let bad = tape.leaf(Tensor::zeros(3, 1));
        assert!(concat_modalities(v, bad).is_err());
        assert!(Tensor::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn expert_modes() {
        let (store, params) = setup(3, 1, 4);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let m = tape.leaf(Rng::new(9).gaussian(3, 4));
        let e = &params.experts[0];
        let infer = expert_forward(&p, e, m, None).unwrap();
        assert_eq!(infer.z.value(), infer.mu.value());
        let zero = expert_forward(&p, e, m, Some(&Tensor::zeros(3, 4))).unwrap();
        assert_eq!(zero.z.value(), zero.mu.value());
        assert!(infer.sigma.value().data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn reparameterization_substitution() {
        // μ = 1 and σ = 1 exactly: zero weights, μ bias 1, σ bias softplus⁻¹(1 − floor).
        let (mut store, params) = setup(2, 1, 5);
        let e = params.experts[0];
        store.get_mut(e.mu.w).value = Tensor::zeros(2, 2);
        store.get_mut(e.mu.b).value = Tensor::column(&[1.0, 1.0]);
        store.get_mut(e.sigma.w).value = Tensor::zeros(2, 2);
        let s = 1.0 - SIGMA_FLOOR;
        let inv = (s.exp() - 1.0).ln();
        store.get_mut(e.sigma.b).value = Tensor::column(&[inv, inv]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let m = tape.leaf(Tensor::ones(2, 3));
        let out = expert_forward(&p, &e, m, Some(&Tensor::full(2, 3, 2.0))).unwrap();
        for &z in out.z.value().data() {
            assert!((z - 3.0).abs() < 1e-12, "{z}");
        }
    }

    #[test]
    fn router_symmetric_and_degenerate_cases() {
        let (mut store, params) = setup(3, 4, 6);
        store.get_mut(params.router.w).value = Tensor::zeros(3, 4);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let m = tape.leaf(Rng::new(1).gaussian(3, 5));
        let g = router_forward(&p, &params.router, m).unwrap().value();
        assert!(g.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let (store1, params1) = setup(3, 1, 6);
        let tape = Tape::new();
        let p = store1.bind(&tape);
        let m = tape.leaf(Rng::new(1).gaussian(3, 5));
        let g = router_forward(&p, &params1.router, m).unwrap().value();
        assert!(g.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn router_closed_form_column() {
        // d = 1 token value 1, W_g = [ln 3, 0] → logits (ln 3, 0).
        let (mut store, params) = setup(1, 2, 7);
        store.get_mut(params.router.w).value = Tensor::new([1, 2], vec![3f64.ln(), 0.0]).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let m = tape.leaf(Tensor::ones(1, 1));
        let g = router_forward(&p, &params.router, m).unwrap().value();
        assert!((g.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((g.get(1, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn single_expert_fuses_to_its_latent() {
        let (store, params) = setup(3, 1, 8);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.leaf(Rng::new(2).gaussian(3, 2));
        let t = tape.leaf(Rng::new(3).gaussian(3, 3));
        let noise = sample_noise(&mut Rng::new(4), 1, 3, 5);
        let out = vmoe_forward(&p, &params, v, t, Some(&noise), &Routing::Learned).unwrap();
        assert_eq!(out.h.value(), out.experts[0].z.value());
    }

    #[test]
    fn identical_experts_ignore_gates_at_inference() {
        let (mut store, params) = setup(3, 3, 9);
        let first = params.experts[0];
        for e in &params.experts[1..] {
            for (src, dst) in [(first.mu.w, e.mu.w), (first.mu.b, e.mu.b), (first.sigma.w, e.sigma.w)] {
                let v = store.value(src).clone();
                store.get_mut(dst).value = v;
            }
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.leaf(Rng::new(2).gaussian(3, 2));
        let t = tape.leaf(Rng::new(3).gaussian(3, 3));
        let out = vmoe_forward(&p, &params, v, t, None, &Routing::Learned).unwrap();
        assert!(out.h.value().max_abs_diff(&out.experts[0].mu.value()) < 1e-14);
    }

    #[test]
    fn weighted_sum_hand_case() {
        // Z₁ col = (1,1), Z₂ col = (2,2), gates (0.25, 0.75) → (1.75, 1.75).
        let (mut store, params) = setup(2, 2, 10);
        for (i, e) in params.experts.iter().enumerate() {
            store.get_mut(e.mu.w).value = Tensor::zeros(2, 2);
            store.get_mut(e.mu.b).value = Tensor::full(2, 1, (i + 1) as f64);
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.leaf(Tensor::ones(2, 1));
        let t = tape.leaf(Tensor::ones(2, 1));
        let gates = Tensor::from_fn(2, 2, |r, _| if r == 0 { 0.25 } else { 0.75 });
        let out = vmoe_forward(&p, &params, v, t, None, &Routing::Fixed(gates)).unwrap();
        assert!(out.h.value().data().iter().all(|&x| (x - 1.75).abs() < 1e-15));
    }

    #[test]
    fn forced_expert_selects_that_latent() {
        let (store, params) = setup(3, 3, 11);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let v = tape.leaf(Rng::new(2).gaussian(3, 2));
        let t = tape.leaf(Rng::new(3).gaussian(3, 2));
        let out = vmoe_forward(&p, &params, v, t, None, &Routing::Expert(2)).unwrap();
        assert_eq!(out.h.value(), out.experts[2].mu.value());
        assert!(vmoe_forward(&p, &params, v, t, None, &Routing::Expert(3)).is_err());
    }

    #[test]
    fn aux_loss_closed_forms() {
        let tape = Tape::new();
        let one_hot = tape.leaf(Tensor::from_fn(3, 4, |r, c| if r == c % 3 { 1.0 } else { 0.0 }));
        assert_eq!(aux_loss(one_hot).unwrap().item(), 0.0);
        let uniform = tape.leaf(Tensor::full(8, 5, 1.0 / 8.0));
        assert!((aux_loss(uniform).unwrap().item() - 8f64.ln()).abs() < 1e-12);
        let single = tape.leaf(Tensor::ones(1, 5));
        assert_eq!(aux_loss(single).unwrap().item(), 0.0);
    }

    #[test]
    fn reg_loss_closed_forms() {
        let tape = Tape::new();
        let prior = ExpertOutput {
            mu: tape.leaf(Tensor::zeros(2, 3)),
            sigma: tape.leaf(Tensor::ones(2, 3)),
            z: tape.leaf(Tensor::zeros(2, 3)),
        };
        assert_eq!(reg_loss(&[prior]).unwrap().item(), 0.0);
        let one = ExpertOutput {
            mu: tape.leaf(Tensor::scalar(1.0)),
            sigma: tape.leaf(Tensor::scalar(1.0)),
            z: tape.leaf(Tensor::scalar(1.0)),
        };
        assert!((reg_loss(&[one]).unwrap().item() - 0.5).abs() < 1e-15);
        let bad = ExpertOutput {
            sigma: tape.leaf(Tensor::scalar(0.0)),
            ..one
        };
        assert!(reg_loss(&[bad]).is_err());
    }
}
