use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use super::metrics::MetricsReport;
use super::model::Model;
use super::train::{evaluate, evaluate_routed, sample_embedding, train, Evaluation, TrainOutcome};
use crate::data::{split_zero_shot, Dataset, Sample};
use crate::error::{Error, Result};
use crate::vmoe::Routing;

/// One seed of the zero-shot protocol: re-split, train, score unseen test.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub seen: Vec<usize>,
    pub validation: Vec<usize>,
    pub unseen: Vec<usize>,
    pub outcome: TrainOutcome,
    pub test: Evaluation,
}

pub fn run_seed(config: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<RunResult> {
    let ids: Vec<usize> = dataset.categories.iter().map(|c| c.id).collect();
    let split = split_zero_shot(&ids, &dataset.samples, dataset.config.split, seed)?;
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let outcome = train(&cfg, dataset, &split)?;
    let test = evaluate(&outcome.best.model, dataset, &split.test, &split.unseen)?;
    Ok(RunResult {
        seed,
        seen: split.seen,
        validation: split.validation,
        unseen: split.unseen,
        outcome,
        test,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub sweep: String,
    pub setting: String,
    pub seed: u64,
    pub report: MetricsReport,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "sweep,setting,seed,precision,recall,f1,accuracy";

    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{}",
            self.sweep, self.setting, self.seed, r.precision, r.recall, r.f1, r.accuracy
        )
    }
}

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SweepRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

fn sweep<F>(name: &str, config: &TrainConfig, dataset: &Dataset, settings: &[(String, F)], seeds: &[u64]) -> Result<Vec<SweepRow>>
where
    F: Fn(&TrainConfig) -> TrainConfig,
{
    let mut rows = Vec::with_capacity(settings.len() * seeds.len());
    for &seed in seeds {
        for (label, adjust) in settings {
            let run = run_seed(&adjust(config), dataset, seed)?;
            rows.push(SweepRow {
                sweep: name.to_string(),
                setting: label.clone(),
                seed,
                report: run.test.report,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_experts(config: &TrainConfig, dataset: &Dataset, ks: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let settings: Vec<_> = ks
        .iter()
        .map(|&k| (k.to_string(), move |c: &TrainConfig| TrainConfig { experts: k, ..c.clone() }))
        .collect();
    sweep("experts", config, dataset, &settings, seeds)
}

pub fn sweep_beta(config: &TrainConfig, dataset: &Dataset, betas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let settings: Vec<_> = betas
        .iter()
        .map(|&b| (b.to_string(), move |c: &TrainConfig| TrainConfig { beta: b, ..c.clone() }))
        .collect();
    sweep("beta", config, dataset, &settings, seeds)
}

/// Full model against each single-component ablation.
pub fn ablate(config: &TrainConfig, dataset: &Dataset, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let variant = |no_vmoe: bool, no_mgvat: bool| {
        move |c: &TrainConfig| TrainConfig {
            no_vmoe,
            no_mgvat,
            ..c.clone()
        }
    };
    let settings = vec![
        ("full".to_string(), variant(false, false)),
        ("no_vmoe".to_string(), variant(true, false)),
        ("no_mgvat".to_string(), variant(false, true)),
    ];
    sweep("ablation", config, dataset, &settings, seeds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRow {
    pub expert: usize,
    pub report: MetricsReport,
}

/// Evaluation with every token routed to a single expert, one row per expert.
pub fn expert_report(model: &Model, dataset: &Dataset, samples: &[Sample], categories: &[usize]) -> Result<Vec<ExpertRow>> {
    let k = model.num_experts();
    if k == 0 {
        return Err(Error::invalid("model has no expert layer"));
    }
    (0..k)
        .map(|e| {
            Ok(ExpertRow {
                expert: e,
                report: evaluate_routed(model, dataset, samples, categories, &Routing::Expert(e))?.report,
            })
        })
        .collect()
}

/// Macro rows (`category` = `macro`) followed by per-category rows.
pub fn expert_rows_to_csv(rows: &[ExpertRow]) -> String {
    let mut out = String::from("expert,category,precision,recall,f1,accuracy,support\n");
    for row in rows {
        let r = &row.report;
        let support: usize = r.per_category.iter().map(|c| c.support).sum();
        let _ = writeln!(
            out,
            "{},macro,{},{},{},{},{}",
            row.expert, r.precision, r.recall, r.f1, r.accuracy, support
        );
        for c in &r.per_category {
            let _ = writeln!(
                out,
                "{},{},{},{},{},,{}",
                row.expert, c.category, c.precision, c.recall, c.f1, c.support
            );
        }
    }
    out
}

/// One headerless row per sample: id, label, then the fused token and entity representation.
pub fn export_embeddings(model: &Model, dataset: &Dataset, samples: &[Sample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let u = sample_embedding(model, dataset, s)?;
        let _ = write!(out, "{},{}", s.id, s.label);
        for x in u {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
