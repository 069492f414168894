use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::{compute_metrics, MetricsReport};
use super::model::{LossBreakdown, Model, Noise};
use crate::autodiff::{Optimizer, Rng, Tape, Tensor};
use crate::data::{batch_iter, Dataset, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::head::predict;
use crate::vmoe::Routing;

/// Epoch averages of the batch losses and validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_rank: f64,
    pub l_aux: f64,
    pub l_reg: f64,
    pub l_cl: f64,
    pub l_vat: f64,
    pub total: f64,
    pub val_f1: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation F1; the initialization when no epoch ran.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Every batch in order.
    pub batches: Vec<LossBreakdown>,
}

pub fn train(config: &TrainConfig, dataset: &Dataset, split: &DatasetSplit) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.seen.is_empty() {
        return Err(Error::invalid("training split has no seen-category samples"));
    }
    let mut model = Model::for_dataset(config, dataset)?;
    let mut rng = Rng::new(config.seed).fork(21);
    let optimizer = Optimizer::new(config.optimizer, config.lr);
    let seen = dataset.names(&split.seen)?;

    let snapshot = |model: &Model, rng: &Rng, epoch| Checkpoint {
        model: model.clone(),
        rng: rng.state(),
        epoch,
    };
    let mut best = snapshot(&model, &rng, 0);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(config.epochs);
    let mut batches = Vec::new();

    for epoch in 1..=config.epochs {
        let mut sum = LossBreakdown::default();
        let order = batch_iter(&split.train, config.batch_size, &mut rng, true)?;
        let n_batches = order.len();
        for batch in order {
            let (breakdown, grads) = {
                let tape = Tape::new();
                let p = model.store.bind(&tape);
                let out = model.forward_batch(&tape, &p, &dataset.vocab, &batch, &seen, Noise::Sample(&mut rng))?;
                let vat = model.prepare_vat(&out, &mut rng)?;
                let terms = model.losses(&tape, &out, vat.as_ref())?;
                let b = terms.breakdown();
                if let Some(component) = b.non_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        component: component.to_string(),
                    });
                }
                (b, tape.backward(terms.total)?)
            };
            model.store.zero_grad();
            model.store.accumulate(&grads);
            optimizer.step(&mut model.store);
            sum.l_rank += breakdown.l_rank;
            sum.l_aux += breakdown.l_aux;
            sum.l_reg += breakdown.l_reg;
            sum.l_cl += breakdown.l_cl;
            sum.l_vat += breakdown.l_vat;
            sum.total += breakdown.total;
            batches.push(breakdown);
        }
        let k = n_batches as f64;
        let (val_f1, val_acc) = if split.val.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate(&model, dataset, &split.val, &split.validation)?.report;
            (r.f1, r.accuracy)
        };
        log.push(EpochLog {
            epoch,
            l_rank: sum.l_rank / k,
            l_aux: sum.l_aux / k,
            l_reg: sum.l_reg / k,
            l_cl: sum.l_cl / k,
            l_vat: sum.l_vat / k,
            total: sum.total / k,
            val_f1,
            val_acc,
        });
        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best = snapshot(&model, &rng, epoch);
        }
    }
    let last = snapshot(&model, &rng, config.epochs);
    Ok(TrainOutcome {
        best,
        last,
        log,
        batches,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Predicted category id per sample, in input order.
    pub predictions: Vec<usize>,
    /// How often each category's name was read to build a prototype.
    pub prototype_accesses: BTreeMap<usize, usize>,
}

/// Scores `samples` against the prototypes of `categories` in inference mode.
pub fn evaluate(model: &Model, dataset: &Dataset, samples: &[Sample], categories: &[usize]) -> Result<Evaluation> {
    evaluate_routed(model, dataset, samples, categories, &Routing::Learned)
}

pub fn evaluate_routed(
    model: &Model,
    dataset: &Dataset,
    samples: &[Sample],
    categories: &[usize],
    routing: &Routing,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    if let Some(s) = samples.iter().find(|s| !categories.contains(&s.label)) {
        return Err(Error::invalid(format!(
            "sample {} has label {} outside the evaluated category set",
            s.id, s.label
        )));
    }
    let mut prototype_accesses = BTreeMap::new();
    let mut names = Vec::with_capacity(categories.len());
    for &id in categories {
        let spec = dataset
            .category(id)
            .ok_or_else(|| Error::invalid(format!("unknown category {id}")))?;
        *prototype_accesses.entry(id).or_insert(0) += 1;
        names.push((id, spec.name.clone()));
    }
    let r_hat = {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        model.encode_categories(&tape, &p, &dataset.vocab, &names)?.value()
    };
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let scores = score_sample(model, dataset, s, &r_hat, routing)?;
        predictions.push(categories[predict(&scores)?]);
    }
    let gold: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(Evaluation {
        report: compute_metrics(&gold, &predictions)?,
        predictions,
        prototype_accesses,
    })
}

fn score_sample(model: &Model, dataset: &Dataset, sample: &Sample, r_hat: &Tensor, routing: &Routing) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let r = tape.constant(r_hat.clone());
    let out = model.forward_sample(&tape, &p, &dataset.vocab, sample, r, None, routing)?;
    Ok(out.scores.value().data().to_vec())
}

/// The fused token and entity representation of a sample in inference mode.
pub fn sample_embedding(model: &Model, dataset: &Dataset, sample: &Sample) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let enc = model.encode_sample(&tape, &p, &dataset.vocab, sample, None, &Routing::Learned)?;
    Ok(enc.u_tilde.value().data().to_vec())
}
