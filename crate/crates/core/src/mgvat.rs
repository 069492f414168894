//! Multimodal graph-based virtual adversarial training.
//!
//! Per-sample fused tokens are mean-pooled into global visual and textual
//! vectors. Those feed a symmetric InfoNCE alignment loss and a cosine
//! correlation graph over the batch. Each sample's affinity to its relevant
//! and irrelevant neighbours becomes a two-way score distribution, and the
//! adversarial loss is the KL divergence between the clean scores and the
//! scores after a shared perturbation of every sample.
//!
//! The graph and the clean target distribution are constants for
//! differentiation purposes.

use crate::autodiff::{forward_kernel, Axis, Kernel, Rng, Tape, Tensor, Var, DELTA};
use crate::error::{Error, Result};

/// Global vectors of one sample.
#[derive(Clone, Copy, Debug)]
pub struct PooledSample<'t> {
    /// Mean of the visual tokens, `d × 1`.
    pub visual: Var<'t>,
    /// Mean of the text tokens, `d × 1`.
    pub text: Var<'t>,
    /// Pooled image and text means stacked, `2d × 1`.
    pub joint: Var<'t>,
}

/// Means of the visual and textual columns of the fused tokens `h`.
pub fn global_pool<'t>(h: Var<'t>, visual_len: usize, text_len: usize) -> Result<PooledSample<'t>> {
    if visual_len == 0 || text_len == 0 || visual_len + text_len != h.cols() {
        return Err(Error::invalid(format!(
            "split {visual_len} + {text_len} does not match {} fused tokens",
            h.cols()
        )));
    }
    let visual = h.slice_cols(0, visual_len)?.row_mean()?;
    let text = h.slice_cols(visual_len, visual_len + text_len)?.row_mean()?;
    let joint = h.tape().concat_rows(&[visual, text])?;
    Ok(PooledSample { visual, text, joint })
}

/// Batch-level matrices assembled from pooled samples.
#[derive(Clone, Copy, Debug)]
pub struct BatchGlobals<'t> {
    /// Text means, `d × N`.
    pub text: Var<'t>,
    /// Visual means, `d × N`.
    pub visual: Var<'t>,
    /// Stacked means, `2d × N`.
    pub joint: Var<'t>,
}

impl<'t> BatchGlobals<'t> {
    pub fn stack(tape: &'t Tape, samples: &[PooledSample<'t>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let col = |f: fn(&PooledSample<'t>) -> Var<'t>| -> Result<Var<'t>> {
            tape.concat_cols(&samples.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            text: col(|s| s.text)?,
            visual: col(|s| s.visual)?,
            joint: col(|s| s.joint)?,
        })
    }

    pub fn len(&self) -> usize {
        self.joint.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Symmetric InfoNCE over raw dot products, summed over the batch.
pub fn contrastive_loss<'t>(text: Var<'t>, visual: Var<'t>) -> Result<Var<'t>> {
    if text.shape() != visual.shape() {
        return Err(Error::Shape {
            kernel: "contrastive_loss".into(),
            lhs: text.shape().to_vec(),
            rhs: visual.shape().to_vec(),
        });
    }
    let n = text.cols();
    let sim = text.t()?.matmul(visual)?;
    let text_to_image = sim.log_softmax(Axis::Cols)?;
    let image_to_text = sim.log_softmax(Axis::Rows)?;
    let eye = text.tape().constant(Tensor::identity(n));
    text_to_image.add(image_to_text)?.mul(eye)?.sum()?.scale(-0.5)
}

/// Symmetric sample correlation matrix `aᵢⱼ = (1 + cos(H̄ᵢ, H̄ⱼ)) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationGraph {
    pub a: Tensor,
}

/// Builds the graph from the columns of `p`. Each unordered pair is
/// computed once and mirrored.
pub fn build_graph(p: &Tensor) -> CorrelationGraph {
    let n = p.cols();
    let cols: Vec<Vec<f64>> = (0..n).map(|c| p.column_vec(c)).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
            let cos = dot / (norms[i] * norms[j] + DELTA);
            let v = ((1.0 + cos) / 2.0).clamp(0.0, 1.0);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    CorrelationGraph { a }
}

/// `(P·A, P·(1 − A))`: relevant and irrelevant aggregates per sample.
pub fn aggregate<'t>(p: Var<'t>, graph: &CorrelationGraph) -> Result<(Var<'t>, Var<'t>)> {
    let n = p.cols();
    if graph.a.shape() != [n, n] {
        return Err(Error::Shape {
            kernel: "aggregate".into(),
            lhs: p.shape().to_vec(),
            rhs: graph.a.shape().to_vec(),
        });
    }
    let tape = p.tape();
    let a = tape.constant(graph.a.clone());
    let complement = tape.constant(graph.a.map(|x| 1.0 - x));
    Ok((p.matmul(a)?, p.matmul(complement)?))
}

/// `2 × N` logits `[H̄ᵢᵀĤᵢ ; H̄ᵢᵀĤᵢ′]`.
fn score_logits<'t>(p: Var<'t>, graph: &CorrelationGraph) -> Result<Var<'t>> {
    let (relevant, irrelevant) = aggregate(p, graph)?;
    let rel = p.mul(relevant)?.col_sum()?;
    let irr = p.mul(irrelevant)?.col_sum()?;
    p.tape().concat_rows(&[rel, irr])
}

/// Per-sample softmax over relevant vs. irrelevant affinity, `2 × N`.
pub fn correlation_scores<'t>(p: Var<'t>, graph: &CorrelationGraph) -> Result<Var<'t>> {
    score_logits(p, graph)?.softmax(Axis::Rows)
}

/// Clean score distribution used as the fixed KL target.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTarget {
    pub probs: Tensor,
    pub log_probs: Tensor,
}

pub fn score_target(p: &Tensor, graph: &CorrelationGraph) -> Result<ScoreTarget> {
    let tape = Tape::new();
    let logits = score_logits(tape.constant(p.clone()), graph)?.value();
    Ok(ScoreTarget {
        probs: forward_kernel(&Kernel::Softmax(Axis::Rows), &[&logits])?,
        log_probs: forward_kernel(&Kernel::LogSoftmax(Axis::Rows), &[&logits])?,
    })
}

/// `Σᵢ KL(sᵢ ‖ s̃ᵢ)` where `s̃` comes from `P + τ` scored on the same graph.
pub fn vat_loss<'t>(
    p: Var<'t>,
    graph: &CorrelationGraph,
    tau: Var<'t>,
    target: &ScoreTarget,
) -> Result<Var<'t>> {
    if tau.shape() != [p.rows(), 1] {
        return Err(Error::Shape {
            kernel: "vat_loss".into(),
            lhs: vec![p.rows(), 1],
            rhs: tau.shape().to_vec(),
        });
    }
    if target.probs.shape() != [2, p.cols()] {
        return Err(Error::invalid("score target does not match batch size"));
    }
    let tape = p.tape();
    let perturbed = p.add_bias(tau)?;
    let log_q = score_logits(perturbed, graph)?.log_softmax(Axis::Rows)?;
    let log_p = tape.constant(target.log_probs.clone());
    let probs = tape.constant(target.probs.clone());
    log_p.sub(log_q)?.mul(probs)?.sum()
}

/// Solver settings for the worst-case perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationConfig {
    /// Target norm `ε`.
    pub eps: f64,
    /// Probe scale `ξ`.
    pub xi: f64,
    /// Normalized-gradient iterations, at least one.
    pub steps: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            xi: 0.01,
            steps: 1,
        }
    }
}

/// Approximates `argmax_τ KL(S ‖ S̃(τ))` on the sphere `‖τ‖ = ε` by
/// normalized gradient steps from a random probe. Falls back to a random
/// direction when the gradient vanishes.
pub fn solve_perturbation(
    p: &Tensor,
    graph: &CorrelationGraph,
    cfg: &PerturbationConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    let dim = p.rows();
    if p.cols() < 2 {
        return Ok(Tensor::zeros(dim, 1));
    }
    let target = score_target(p, graph)?;
    let mut direction = rng.unit_vector(dim);
    for _ in 0..cfg.steps.max(1) {
        let tape = Tape::new();
        let pv = tape.constant(p.clone());
        let r = tape.leaf(direction.map(|x| x * cfg.xi));
        let loss = vat_loss(pv, graph, r, &target)?;
        let g = tape.backward(loss)?.wrt(r);
        let norm = g.norm();
        if !norm.is_finite() || norm <= DELTA {
            direction = rng.unit_vector(dim);
            break;
        }
        direction = g.map(|x| x / (norm + DELTA));
    }
    let norm = direction.norm();
    Ok(direction.map(|x| cfg.eps * x / norm))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    #[test]
    fn pooling_cases() {
        let tape = Tape::new();
        let c = [0.5, -1.5];
        let h = tape.leaf(Tensor::from_fn(2, 4, |r, _| c[r]));
        let g = global_pool(h, 2, 2).unwrap();
        assert_eq!(g.visual.value().data(), &c);
        assert_eq!(g.text.value().data(), &c);

        let h = tape.leaf(Tensor::new([1, 4], vec![1.0, 3.0, 10.0, 20.0]).unwrap());
        let g = global_pool(h, 2, 2).unwrap();
        assert_eq!(g.visual.item(), 2.0);
        assert_eq!(g.text.item(), 15.0);
        assert_eq!(g.joint.value().data(), &[2.0, 15.0]);

        let g = global_pool(h, 1, 3).unwrap();
        assert_eq!(g.visual.item(), 1.0);
        assert!(global_pool(h, 2, 3).is_err());
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        let tape = Tape::new();
        let t = tape.leaf(Tensor::column(&[0.3, -2.0, 1.0]));
        let v = tape.leaf(Tensor::column(&[1.0, 0.5, 4.0]));
        assert_eq!(contrastive_loss(t, v).unwrap().item(), 0.0);
    }

    #[test]
    fn contrastive_orthonormal_pair() {
        let tape = Tape::new();
        let e = tape.leaf(Tensor::identity(2));
        let l = contrastive_loss(e, e).unwrap().item();
        // Brute force over the 2×2 similarity matrix.
        let sim = [[1.0f64, 0.0], [0.0, 1.0]];
        let mut expected = 0.0;
        for i in 0..2 {
            let row: f64 = (0..2).map(|j| sim[i][j].exp()).sum();
            let col: f64 = (0..2).map(|j| sim[j][i].exp()).sum();
            expected -= 0.5 * ((sim[i][i].exp() / row).ln() + (sim[i][i].exp() / col).ln());
        }
        assert!((l - expected).abs() < 1e-14);
        assert!((l - 0.62652).abs() < 1e-4);
    }

    #[test]
    fn graph_cosine_cases() {
        let p = Tensor::from_rows(&[vec![1.0, 1.0, -1.0, 0.0], vec![2.0, 2.0, -2.0, 0.0], vec![0.0, 0.0, 0.0, 3.0]])
            .unwrap();
        let g = build_graph(&p);
        assert!((g.a.get(0, 1) - 1.0).abs() < 1e-12);
        assert!(g.a.get(0, 2).abs() < 1e-12);
        assert!((g.a.get(0, 3) - 0.5).abs() < 1e-12);
        for i in 0..4 {
            assert!((g.a.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert_eq!(g.a.get(i, j).to_bits(), g.a.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn aggregate_cases() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, -1.0]]).unwrap());
        let ones = CorrelationGraph { a: Tensor::ones(2, 2) };
        let (rel, irr) = aggregate(p, &ones).unwrap();
        assert_eq!(rel.value().data(), &[4.0, 4.0, 1.0, 1.0]);
        assert_eq!(irr.value(), Tensor::zeros(2, 2));

        let half = CorrelationGraph {
            a: Tensor::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap(),
        };
        let (rel, irr) = aggregate(p, &half).unwrap();
        // Ĥ₁ = H̄₁ + 0.5·H̄₂, Ĥ₁′ = 0.5·H̄₂.
        assert_eq!(rel.value().column_vec(0), vec![1.0 + 1.5, 2.0 - 0.5]);
        assert_eq!(irr.value().column_vec(0), vec![1.5, -0.5]);

        let single = tape.leaf(Tensor::column(&[2.0, -1.0]));
        let g = build_graph(&single.value());
        let (rel, irr) = aggregate(single, &g).unwrap();
        assert!(rel.value().max_abs_diff(&single.value()) < 1e-12);
        assert!(irr.value().max_abs_diff(&Tensor::zeros(2, 1)) < 1e-12);
    }

    #[test]
    fn scores_hand_case() {
        let tape = Tape::new();
        let pm = Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, -1.0]]).unwrap();
        let p = tape.leaf(pm.clone());
        let graph = CorrelationGraph {
            a: Tensor::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap(),
        };
        let s = correlation_scores(p, &graph).unwrap().value();
        // Sample 1: rel = H̄₁·(H̄₁ + 0.5H̄₂) = 1·2.5 + 2·1.5 = 5.5; irr = H̄₁·0.5H̄₂ = 0.5.
        // Sample 2: rel = H̄₂·(0.5H̄₁ + H̄₂) = 3·3.5 + (−1)·0 = 10.5; irr = H̄₂·0.5H̄₁ = 0.5.
        let two_way = |a: f64, b: f64| (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
        let (s0, s1) = two_way(5.5, 0.5);
        let (t0, t1) = two_way(10.5, 0.5);
        assert!((s.get(0, 0) - s0).abs() < 1e-15 && (s.get(1, 0) - s1).abs() < 1e-15);
        assert!((s.get(0, 1) - t0).abs() < 1e-15 && (s.get(1, 1) - t1).abs() < 1e-15);
    }

    #[test]
    fn duplicated_samples_share_scores() {
        let tape = Tape::new();
        let col = [0.4, -1.2, 0.9];
        let p = tape.leaf(Tensor::from_fn(3, 2, |r, _| col[r]));
        let g = build_graph(&p.value());
        let s = correlation_scores(p, &g).unwrap().value();
        assert_eq!(s.column_vec(0), s.column_vec(1));
    }

    #[test]
    fn vat_zero_perturbation_is_exactly_zero() {
        let tape = Tape::new();
        let pm = Rng::new(3).gaussian(4, 5);
        let p = tape.leaf(pm.clone());
        let g = build_graph(&pm);
        let target = score_target(&pm, &g).unwrap();
        let tau = tape.leaf(Tensor::zeros(4, 1));
        assert_eq!(vat_loss(p, &g, tau, &target).unwrap().item(), 0.0);
    }

    #[test]
    fn vat_hand_case_matches_brute_force() {
        let pm = Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, -1.0]]).unwrap();
        let graph = build_graph(&pm);
        let tau = [0.05, -0.02];
        let tape = Tape::new();
        let target = score_target(&pm, &graph).unwrap();
        let l = vat_loss(tape.leaf(pm.clone()), &graph, tape.leaf(Tensor::column(&tau)), &target)
            .unwrap()
            .item();

        // Independent recomputation with plain loops.
        let a = |i: usize, j: usize| graph.a.get(i, j);
        let scores = |q: &[[f64; 2]; 2]| -> Vec<(f64, f64)> {
            (0..2)
                .map(|i| {
                    let mut rel = 0.0;
                    let mut irr = 0.0;
                    for j in 0..2 {
                        let dot = q[i][0] * q[j][0] + q[i][1] * q[j][1];
                        rel += a(j, i) * dot;
                        irr += (1.0 - a(j, i)) * dot;
                    }
                    let z = rel.exp() + irr.exp();
                    (rel.exp() / z, irr.exp() / z)
                })
                .collect()
        };
        let clean = [[1.0, 2.0], [3.0, -1.0]];
        let adv = [[1.0 + tau[0], 2.0 + tau[1]], [3.0 + tau[0], -1.0 + tau[1]]];
        let (s, st) = (scores(&clean), scores(&adv));
        let expected: f64 = s
            .iter()
            .zip(&st)
            .map(|(p, q)| p.0 * (p.0 / q.0).ln() + p.1 * (p.1 / q.1).ln())
            .sum();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
        assert!(l > 0.0);
    }

    #[test]
    fn perturbation_has_target_norm() {
        let mut rng = Rng::new(8);
        let pm = rng.gaussian(6, 5);
        let g = build_graph(&pm);
        let cfg = PerturbationConfig::default();
        let tau = solve_perturbation(&pm, &g, &cfg, &mut rng).unwrap();
        assert!((tau.norm() - cfg.eps).abs() < 1e-9);
    }

    #[test]
    fn flat_landscape_falls_back_to_random_direction() {
        let mut rng = Rng::new(9);
        let pm = Tensor::zeros(4, 3);
        let g = build_graph(&pm);
        let cfg = PerturbationConfig::default();
        let tau = solve_perturbation(&pm, &g, &cfg, &mut rng).unwrap();
        assert!((tau.norm() - cfg.eps).abs() < 1e-9);
    }

    #[test]
    fn single_sample_perturbation_is_zero() {
        let pm = Tensor::column(&[1.0, 2.0]);
        let tau = solve_perturbation(&pm, &build_graph(&pm), &PerturbationConfig::default(), &mut Rng::new(1))
            .unwrap();
        assert_eq!(tau, Tensor::zeros(2, 1));
    }
}
