//! The assembled network: encoders, fusion layer and task head, plus the
//! batch objective.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autodiff::{Bound, ParamStore, Rng, Tape, Tensor, Var};
use crate::data::{Dataset, Sample};
use crate::encoders::{
    encode_image, encode_prototypes, encode_text, extract_entity_rep, tokenize_with_markers, ImageEncoder,
    TextEncoder, TokenSeq, Vocabulary,
};
use crate::error::{Error, Result};
use crate::head::{attention_fuse, ranking_loss, score_categories, HeadParams};
use crate::mgvat::{
    build_graph, contrastive_loss, global_pool, score_target, solve_perturbation, vat_loss, BatchGlobals,
    CorrelationGraph, PooledSample, ScoreTarget,
};
use crate::vmoe::{aux_loss, concat_modalities, reg_loss, sample_noise, vmoe_forward, Routing, VmoeOutput, VmoeParams};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    /// Absent when the fusion layer is ablated.
    pub vmoe: Option<VmoeParams>,
    pub head: HeadParams,
}

impl Model {
    pub fn init(
        config: &TrainConfig,
        vocab_len: usize,
        lexicon: Option<&[Vec<f64>]>,
        patches: usize,
        d_raw: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut store = ParamStore::new();
        let text = TextEncoder::init(&mut store, vocab_len, d, config.max_len, lexicon, rng)?;
        if lexicon.is_some() && config.freeze_embeddings {
            store.set_trainable(text.embedding, false);
        }
        let image = ImageEncoder::init(&mut store, d_raw, patches, d, rng);
        let vmoe = if config.no_vmoe {
            None
        } else {
            Some(VmoeParams::init(&mut store, d, config.experts, rng)?)
        };
        let head = HeadParams::init(&mut store, d, config.task.entity_dim(d), config.h, rng);
        Ok(Self {
            config: config.clone(),
            store,
            text,
            image,
            vmoe,
            head,
        })
    }

    /// Initialization used by training: parameters drawn from the config seed.
    pub fn for_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        if config.task != dataset.config.task {
            return Err(Error::invalid(format!(
                "config task {} does not match dataset task {}",
                config.task, dataset.config.task
            )));
        }
        let mut rng = Rng::new(config.seed).fork(11);
        Self::init(
            config,
            dataset.vocab.len(),
            Some(&dataset.lexicon),
            dataset.config.patches,
            dataset.config.d_raw,
            &mut rng,
        )
    }

    /// Rebuilds the handles of a stored parameter set.
    pub fn from_store(config: &TrainConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let text = TextEncoder::lookup(&store, config.max_len)?;
        let image = ImageEncoder::lookup(&store)?;
        let vmoe = if config.no_vmoe {
            None
        } else {
            let v = VmoeParams::lookup(&store)?;
            if v.num_experts() != config.experts {
                return Err(Error::invalid(format!(
                    "stored model has {} experts, config says {}",
                    v.num_experts(),
                    config.experts
                )));
            }
            Some(v)
        };
        let head = HeadParams::lookup(&store)?;
        Ok(Self {
            config: config.clone(),
            store,
            text,
            image,
            vmoe,
            head,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.vmoe.as_ref().map_or(0, VmoeParams::num_experts)
    }

    pub fn tokenize(&self, vocab: &Vocabulary, sample: &Sample) -> Result<TokenSeq> {
        if sample.task != self.config.task {
            return Err(Error::invalid(format!(
                "sample {} is {}, model is {}",
                sample.id, sample.task, self.config.task
            )));
        }
        tokenize_with_markers(vocab, &sample.tokens, &sample.spans, sample.task, self.config.max_len, false)
    }

    /// Prototypes of `categories` projected into the scoring space, `h × C`.
    pub fn encode_categories<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        vocab: &Vocabulary,
        categories: &[(usize, Vec<String>)],
    ) -> Result<Var<'t>> {
        let names: Vec<(usize, &[String])> = categories.iter().map(|(id, n)| (*id, n.as_slice())).collect();
        let protos = encode_prototypes(tape, p, &self.text, vocab, &names)?;
        self.head.projection.prototype.forward(p, protos.matrix)
    }

    /// Encodes and fuses one sample into its token and entity representation. `noise = None` is
    /// inference mode.
    pub fn encode_sample<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        vocab: &Vocabulary,
        sample: &Sample,
        noise: Option<&[Tensor]>,
        routing: &Routing,
    ) -> Result<SampleEncoding<'t>> {
        let seq = self.tokenize(vocab, sample)?;
        let text = encode_text(tape, p, &self.text, &seq)?;
        let visual = encode_image(tape, p, &self.image, &sample.grid()?)?;
        let (h, fused) = match &self.vmoe {
            Some(params) => {
                let out = vmoe_forward(p, params, visual, text, noise, routing)?;
                (out.h, Some(out))
            }
            None => (concat_modalities(visual, text)?, None),
        };
        let pooled = global_pool(h, visual.cols(), text.cols())?;
        let entity = extract_entity_rep(text, &seq, self.config.task)?.vector;
        let u = attention_fuse(p, &self.head.attention, h, entity)?;
        let u_tilde = tape.concat_rows(&[u, entity])?;
        Ok(SampleEncoding {
            h,
            fused,
            pooled,
            u_tilde,
        })
    }

    /// Scores one sample against projected prototypes `r_hat`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_sample<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        vocab: &Vocabulary,
        sample: &Sample,
        r_hat: Var<'t>,
        noise: Option<&[Tensor]>,
        routing: &Routing,
    ) -> Result<SampleOutput<'t>> {
        let enc = self.encode_sample(tape, p, vocab, sample, noise, routing)?;
        let u_hat = self.head.projection.sample.forward(p, enc.u_tilde)?;
        let scores = score_categories(u_hat, r_hat)?;
        Ok(SampleOutput { enc, scores })
    }

    /// Number of fused tokens the sample produces.
    pub fn token_count(&self, vocab: &Vocabulary, sample: &Sample) -> Result<usize> {
        Ok(self.tokenize(vocab, sample)?.len() + sample.patches.len())
    }

    pub fn forward_batch<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        vocab: &Vocabulary,
        batch: &[&Sample],
        categories: &[(usize, Vec<String>)],
        noise: Noise<'_>,
    ) -> Result<BatchOutput<'t>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let r_hat = self.encode_categories(tape, p, vocab, categories)?;
        let mut noise = noise;
        let mut samples = Vec::with_capacity(batch.len());
        let mut gold = Vec::with_capacity(batch.len());
        let mut used = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let g = categories
                .iter()
                .position(|(id, _)| *id == s.label)
                .ok_or_else(|| Error::invalid(format!("sample {} label {} not in the category set", s.id, s.label)))?;
            let eps = match &mut noise {
                Noise::Off => None,
                Noise::Sample(rng) => match &self.vmoe {
                    Some(v) => Some(sample_noise(rng, v.num_experts(), self.config.d, self.token_count(vocab, s)?)),
                    None => Some(Vec::new()),
                },
                Noise::Fixed(all) => Some(
                    all.get(i)
                        .ok_or_else(|| Error::invalid("fixed noise shorter than the batch"))?
                        .clone(),
                ),
            };
            let eps_ref = eps.as_deref().filter(|_| self.vmoe.is_some());
            samples.push(self.forward_sample(tape, p, vocab, s, r_hat, eps_ref, &Routing::Learned)?);
            gold.push(g);
            used.push(eps.unwrap_or_default());
        }
        Ok(BatchOutput { samples, gold, noise: used })
    }

    /// Graph, target and worst-case perturbation for the batch's joint
    /// representations. `None` when the batch carries no VAT signal.
    pub fn prepare_vat(&self, out: &BatchOutput<'_>, rng: &mut Rng) -> Result<Option<VatState>> {
        if self.config.no_mgvat || out.samples.len() < 2 {
            return Ok(None);
        }
        let p = out.globals()?.joint.value();
        let graph = build_graph(&p);
        let target = score_target(&p, &graph)?;
        let tau = solve_perturbation(&p, &graph, &self.config.perturbation(), rng)?;
        Ok(Some(VatState { graph, target, tau }))
    }

    /// The weighted objective with every component kept on the tape.
    pub fn losses<'t>(&self, tape: &'t Tape, out: &BatchOutput<'t>, vat: Option<&VatState>) -> Result<LossTerms<'t>> {
        let n = out.samples.len() as f64;
        let zero = || tape.constant(Tensor::scalar(0.0));
        let mean = |terms: Vec<Var<'t>>| -> Result<Var<'t>> {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = acc.add(*t)?;
            }
            acc.scale(1.0 / n)
        };

        let rank = mean(
            out.samples
                .iter()
                .zip(&out.gold)
                .map(|(s, &g)| ranking_loss(s.scores, g))
                .collect::<Result<_>>()?,
        )?;

        let (aux, reg) = if self.vmoe.is_some() {
            let fused: Vec<&VmoeOutput<'t>> = out
                .samples
                .iter()
                .map(|s| s.enc.fused.as_ref().ok_or_else(|| Error::invalid("missing fusion output")))
                .collect::<Result<_>>()?;
            let aux = mean(fused.iter().map(|f| aux_loss(f.gates)).collect::<Result<_>>()?)?;
            // Per-expert KL sums, averaged over token coordinates and samples.
            let reg = mean(
                fused
                    .iter()
                    .map(|f| {
                        let coords = (f.h.rows() * f.h.cols()) as f64;
                        reg_loss(&f.experts)?.scale(1.0 / coords)
                    })
                    .collect::<Result<_>>()?,
            )?;
            (aux, reg)
        } else {
            (zero(), zero())
        };

        let (cl, vat_term) = match vat {
            Some(state) if !self.config.no_mgvat && out.samples.len() >= 2 => {
                let g = out.globals()?;
                let cl = contrastive_loss(g.text, g.visual)?.scale(1.0 / n)?;
                let tau = tape.constant(state.tau.clone());
                (cl, vat_loss(g.joint, &state.graph, tau, &state.target)?)
            }
            _ => (zero(), zero()),
        };

        let extra = aux.add(reg)?.add(cl)?.add(vat_term)?.scale(self.config.beta)?;
        let total = rank.add(extra)?;
        Ok(LossTerms {
            rank,
            aux,
            reg,
            cl,
            vat: vat_term,
            total,
        })
    }
}

/// Source of reparameterization noise for a batch.
pub enum Noise<'a> {
    /// Inference mode, `Z = μ`.
    Off,
    Sample(&'a mut Rng),
    /// One noise set per sample, as recorded in [`BatchOutput::noise`].
    Fixed(&'a [Vec<Tensor>]),
}

pub struct SampleEncoding<'t> {
    /// Fused token matrix, or the plain modality concatenation when ablated.
    pub h: Var<'t>,
    pub fused: Option<VmoeOutput<'t>>,
    pub pooled: PooledSample<'t>,
    /// the fused token and entity representation.
    pub u_tilde: Var<'t>,
}

pub struct SampleOutput<'t> {
    pub enc: SampleEncoding<'t>,
    /// One score per category, in category order.
    pub scores: Var<'t>,
}

pub struct BatchOutput<'t> {
    pub samples: Vec<SampleOutput<'t>>,
    /// Gold positions within the category list.
    pub gold: Vec<usize>,
    pub noise: Vec<Vec<Tensor>>,
}

impl<'t> BatchOutput<'t> {
    pub fn globals(&self) -> Result<BatchGlobals<'t>> {
        let tape = self.samples.first().ok_or_else(|| Error::invalid("empty batch"))?.enc.h.tape();
        let pooled: Vec<PooledSample<'t>> = self.samples.iter().map(|s| s.enc.pooled).collect();
        BatchGlobals::stack(tape, &pooled)
    }
}

/// Everything the VAT term holds fixed within one update.
#[derive(Clone, Debug, PartialEq)]
pub struct VatState {
    pub graph: CorrelationGraph,
    pub target: ScoreTarget,
    pub tau: Tensor,
}

pub struct LossTerms<'t> {
    pub rank: Var<'t>,
    pub aux: Var<'t>,
    pub reg: Var<'t>,
    pub cl: Var<'t>,
    pub vat: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_rank: self.rank.item(),
            l_aux: self.aux.item(),
            l_reg: self.reg.item(),
            l_cl: self.cl.item(),
            l_vat: self.vat.item(),
            total: self.total.item(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rank: f64,
    pub l_aux: f64,
    pub l_reg: f64,
    pub l_cl: f64,
    pub l_vat: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Ranking loss plus `beta` times the sum of the auxiliary terms.
    pub fn combine(&self, beta: f64) -> f64 {
        self.l_rank + beta * (self.l_aux + self.l_reg + self.l_cl + self.l_vat)
    }

    /// First component that is not finite, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("l_rank", self.l_rank),
            ("l_aux", self.l_aux),
            ("l_reg", self.l_reg),
            ("l_cl", self.l_cl),
            ("l_vat", self.l_vat),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}
