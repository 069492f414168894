//! Synthetic multimodal dataset generation, zero-shot category splits and
//! JSONL persistence.
//!
//! Every category owns a cluster of vocabulary tokens. Its name and the
//! entity mentions of its samples are drawn from that cluster, and the
//! lexicon gives each cluster token a feature vector near the category's
//! text concept. Image concepts are one fixed random linear map of the text
//! concepts, so visual evidence also carries over to unseen categories.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Rng, Tensor};
use crate::encoders::{PatchGrid, Span, Task, Vocabulary, RESERVED};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub task: Task,
    pub categories: usize,
    pub samples_per_category: usize,
    /// Tokens shared out over the category clusters.
    pub cluster_tokens: usize,
    /// Category-neutral filler tokens.
    pub context_tokens: usize,
    pub patches: usize,
    pub d_raw: usize,
    /// Standard deviation of per-patch noise.
    pub noise: f64,
    /// Standard deviation of per-token lexicon noise around a cluster concept.
    pub lexicon_noise: f64,
    pub min_context: usize,
    pub max_context: usize,
    /// Seen / validation / unseen category counts.
    pub split: [usize; 3],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            task: Task::Met,
            categories: 12,
            samples_per_category: 40,
            cluster_tokens: 200,
            context_tokens: 50,
            patches: 8,
            d_raw: 16,
            noise: 0.3,
            lexicon_noise: 0.5,
            min_context: 5,
            max_context: 9,
            split: [4, 4, 4],
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Met => Self::default(),
            Task::Mre => Self {
                task,
                categories: 22,
                split: [8, 7, 7],
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needed: usize = self.split.iter().sum();
        if self.categories < needed {
            return Err(Error::invalid(format!(
                "{} categories cannot fill a {}/{}/{} split",
                self.categories, self.split[0], self.split[1], self.split[2]
            )));
        }
        if self.split.contains(&0) {
            return Err(Error::invalid("every split needs at least one category"));
        }
        if self.cluster_tokens < self.categories {
            return Err(Error::invalid(format!(
                "{} cluster tokens cannot cover {} categories",
                self.cluster_tokens, self.categories
            )));
        }
        if self.context_tokens == 0 || self.patches == 0 || self.d_raw == 0 || self.samples_per_category == 0 {
            return Err(Error::invalid("context tokens, patches, d_raw and samples per category must be positive"));
        }
        if self.min_context > self.max_context || self.max_context == 0 {
            return Err(Error::invalid("context length range is empty"));
        }
        if !(self.noise >= 0.0 && self.lexicon_noise >= 0.0) {
            return Err(Error::invalid("noise scales must be non-negative"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: usize,
    pub name: Vec<String>,
    /// Tokens of the cluster that generates names and entity mentions.
    pub cluster: Vec<String>,
    pub text_concept: Vec<f64>,
    pub image_concept: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: usize,
    pub tokens: Vec<String>,
    pub spans: Vec<Span>,
    /// `|V|` rows of `d_raw` features.
    pub patches: Vec<Vec<f64>>,
    pub label: usize,
    pub task: Task,
}

impl Sample {
    pub fn grid(&self) -> Result<PatchGrid> {
        Ok(PatchGrid(Tensor::from_rows(&self.patches)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocab: Vocabulary,
    /// One `d_raw` feature vector per vocabulary id.
    pub lexicon: Vec<Vec<f64>>,
    pub categories: Vec<CategorySpec>,
    pub samples: Vec<Sample>,
}

fn cluster_token(cat: usize, j: usize) -> String {
    format!("c{cat}_{j}")
}

fn context_token(j: usize) -> String {
    format!("w{j}")
}

fn gaussian_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

/// Distinct picks from `0..n`, at most `k`.
fn choose(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.truncate(k.min(n));
    idx
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let c = config.categories;
    let d_raw = config.d_raw;
    let base = Rng::new(config.seed);
    let mut concept_rng = base.fork(1);
    let mut lexicon_rng = base.fork(2);
    let mut sample_rng = base.fork(3);

    // Token j of the cluster pool goes to category j mod C.
    let mut clusters = vec![Vec::new(); c];
    for j in 0..config.cluster_tokens {
        let cat = j % c;
        let n = clusters[cat].len();
        clusters[cat].push(cluster_token(cat, n));
    }
    let context: Vec<String> = (0..config.context_tokens).map(context_token).collect();

    let image_map = concept_rng.gaussian(d_raw, d_raw).map(|x| x / (d_raw as f64).sqrt());
    let mut categories = Vec::with_capacity(c);
    for (id, cluster) in clusters.iter().enumerate() {
        let text_concept = gaussian_vec(&mut concept_rng, d_raw, 1.0);
        let image_concept = (0..d_raw)
            .map(|r| (0..d_raw).map(|k| image_map.get(r, k) * text_concept[k]).sum())
            .collect();
        let name_len = 1 + concept_rng.below(3);
        let name = choose(&mut concept_rng, cluster.len(), name_len)
            .into_iter()
            .map(|j| cluster[j].clone())
            .collect();
        categories.push(CategorySpec {
            id,
            name,
            cluster: cluster.clone(),
            text_concept,
            image_concept,
        });
    }

    let vocab = Vocabulary::new(clusters.iter().flatten().cloned().chain(context.iter().cloned()))?;
    let mut lexicon = vec![vec![0.0; d_raw]; RESERVED.len()];
    for cat in &categories {
        for _ in &cat.cluster {
            let noise = gaussian_vec(&mut lexicon_rng, d_raw, config.lexicon_noise);
            lexicon.push(cat.text_concept.iter().zip(noise).map(|(a, b)| a + b).collect());
        }
    }
    // Vocabulary order is cluster tokens by category, then context tokens.
    for _ in &context {
        lexicon.push(gaussian_vec(&mut lexicon_rng, d_raw, 1.0));
    }

    let mut samples = Vec::with_capacity(c * config.samples_per_category);
    for cat in &categories {
        for _ in 0..config.samples_per_category {
            let id = samples.len();
            samples.push(generate_sample(id, cat, &context, config, &mut sample_rng));
        }
    }
    Ok(Dataset {
        config: config.clone(),
        vocab,
        lexicon,
        categories,
        samples,
    })
}

fn generate_sample(id: usize, cat: &CategorySpec, context: &[String], config: &DatasetConfig, rng: &mut Rng) -> Sample {
    let filler = config.min_context + rng.below(config.max_context - config.min_context + 1);
    let mut tokens: Vec<String> = (0..filler).map(|_| context[rng.below(context.len())].clone()).collect();
    let mut spans = Vec::new();
    for _ in 0..config.task.entity_count() {
        let len = 1 + rng.below(2);
        // Insert after any earlier span so spans stay ordered and disjoint.
        let lo = spans.last().map(|s: &Span| s.1 + 1).unwrap_or(0);
        let at = lo + rng.below(tokens.len() - lo + 1);
        for k in 0..len {
            tokens.insert(at + k, cat.cluster[rng.below(cat.cluster.len())].clone());
        }
        spans.push(Span(at, at + len - 1));
    }
    let patches = (0..config.patches)
        .map(|_| cat.image_concept.iter().map(|&x| x + config.noise * rng.normal()).collect())
        .collect();
    Sample {
        id,
        tokens,
        spans,
        patches,
        label: cat.id,
        task: config.task,
    }
}

impl Dataset {
    /// Checks every sample against the config and category set.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.lexicon.len() != self.vocab.len() {
            return Err(Error::invalid(format!(
                "lexicon has {} rows for {} vocabulary entries",
                self.lexicon.len(),
                self.vocab.len()
            )));
        }
        if let Some(row) = self.lexicon.iter().find(|r| r.len() != self.config.d_raw) {
            return Err(Error::invalid(format!("lexicon row of width {} (d_raw {})", row.len(), self.config.d_raw)));
        }
        let labels: BTreeSet<usize> = self.categories.iter().map(|c| c.id).collect();
        for s in &self.samples {
            validate_sample(s, &self.config, &labels)?;
        }
        Ok(())
    }

    pub fn category(&self, id: usize) -> Option<&CategorySpec> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// `(id, name)` pairs for the given ids, in that order.
    pub fn names(&self, ids: &[usize]) -> Result<Vec<(usize, Vec<String>)>> {
        ids.iter()
            .map(|&id| {
                self.category(id)
                    .map(|c| (id, c.name.clone()))
                    .ok_or_else(|| Error::invalid(format!("unknown category {id}")))
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.config.save(&dir.join("dataset.toml"))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        save_jsonl(&self.lexicon, &dir.join("lexicon.jsonl"))?;
        save_jsonl(&self.categories, &dir.join("categories.jsonl"))?;
        save_jsonl(&self.samples, &dir.join("samples.jsonl"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ds = Self {
            config: DatasetConfig::load(&dir.join("dataset.toml"))?,
            vocab: Vocabulary::load(&dir.join("vocab.txt"))?,
            lexicon: load_jsonl(&dir.join("lexicon.jsonl"))?,
            categories: load_jsonl(&dir.join("categories.jsonl"))?,
            samples: load_jsonl(&dir.join("samples.jsonl"))?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn validate_sample(s: &Sample, config: &DatasetConfig, labels: &BTreeSet<usize>) -> Result<()> {
    let bad = |m: String| Error::invalid(format!("sample {}: {m}", s.id));
    if !labels.contains(&s.label) {
        return Err(bad(format!("label {} not in the category set", s.label)));
    }
    if s.spans.len() != s.task.entity_count() {
        return Err(bad(format!("{} spans for task {}", s.spans.len(), s.task)));
    }
    if s.spans.iter().any(|sp| sp.0 > sp.1 || sp.1 >= s.tokens.len()) {
        return Err(bad("span outside the sentence".into()));
    }
    if s.patches.len() != config.patches || s.patches.iter().any(|r| r.len() != config.d_raw) {
        return Err(bad(format!("patch grid is not {} × {}", config.patches, config.d_raw)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub seen: Vec<usize>,
    pub validation: Vec<usize>,
    pub unseen: Vec<usize>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Randomly assigns disjoint category sets and routes samples by label.
/// Samples whose label falls in no set are dropped.
pub fn split_zero_shot(categories: &[usize], samples: &[Sample], counts: [usize; 3], seed: u64) -> Result<DatasetSplit> {
    let distinct: BTreeSet<usize> = categories.iter().copied().collect();
    if distinct.len() != categories.len() {
        return Err(Error::invalid("duplicate category ids"));
    }
    let needed: usize = counts.iter().sum();
    if needed > categories.len() {
        return Err(Error::invalid(format!(
            "{} categories cannot fill a {}/{}/{} split",
            categories.len(),
            counts[0],
            counts[1],
            counts[2]
        )));
    }
    let mut order = categories.to_vec();
    Rng::new(seed).fork(7).shuffle(&mut order);
    let mut sets = Vec::with_capacity(3);
    let mut at = 0;
    for n in counts {
        let mut set = order[at..at + n].to_vec();
        set.sort_unstable();
        sets.push(set);
        at += n;
    }
    let route = |set: &[usize]| samples.iter().filter(|s| set.contains(&s.label)).cloned().collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: route(&sets[0]),
        val: route(&sets[1]),
        test: route(&sets[2]),
        unseen: sets.pop().unwrap_or_default(),
        validation: sets.pop().unwrap_or_default(),
        seen: sets.pop().unwrap_or_default(),
    })
}

pub fn save_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Blank lines are skipped; a malformed line fails with its 1-based number.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: PathBuf::from(path),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Splits `items` into batches of `n`, keeping the final short batch.
pub fn batch_iter<'a, T>(items: &'a [T], n: usize, rng: &mut Rng, shuffle: bool) -> Result<Vec<Vec<&'a T>>> {
    if n == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(n).map(|c| c.iter().map(|&i| &items[i]).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            samples_per_category: 5,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn noiseless_grids_match_within_category() {
        let ds = generate_dataset(&DatasetConfig { noise: 0.0, ..small() }).unwrap();
        for cat in &ds.categories {
            let grids: Vec<_> = ds.samples.iter().filter(|s| s.label == cat.id).map(|s| &s.patches).collect();
            assert!(grids.windows(2).all(|w| w[0] == w[1]));
            assert!(grids[0].iter().all(|row| row == &cat.image_concept));
        }
    }

    #[test]
    fn spans_index_cluster_tokens() {
        for task in [Task::Met, Task::Mre] {
            let ds = generate_dataset(&DatasetConfig {
                samples_per_category: 5,
                ..DatasetConfig::for_task(task)
            })
            .unwrap();
            ds.validate().unwrap();
            for s in &ds.samples {
                let cluster = &ds.category(s.label).unwrap().cluster;
                for sp in &s.spans {
                    for t in &s.tokens[sp.0..=sp.1] {
                        assert!(cluster.contains(t));
                    }
                }
                let covered: usize = s.spans.iter().map(|sp| sp.1 - sp.0 + 1).sum();
                let in_cluster = s.tokens.iter().filter(|t| t.starts_with('c')).count();
                assert_eq!(covered, in_cluster);
            }
            for cat in &ds.categories {
                assert!(!cat.name.is_empty() && cat.name.len() <= 3);
                assert!(cat.name.iter().all(|t| cat.cluster.contains(t)));
            }
        }
    }

    #[test]
    fn default_sizes() {
        let ds = generate_dataset(&DatasetConfig::default()).unwrap();
        assert_eq!(ds.samples.len(), 12 * 40);
        assert_eq!(ds.vocab.len(), RESERVED.len() + 250);
        assert_eq!(ds.lexicon.len(), ds.vocab.len());
        assert_eq!(ds.samples[0].grid().unwrap().0.shape(), [8, 16]);
    }

    #[test]
    fn too_few_categories() {
        let cfg = DatasetConfig {
            categories: 11,
            ..DatasetConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }

    fn ids(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn split_shapes() {
        for (n, counts) in [(12, [4, 4, 4]), (22, [8, 7, 7])] {
            let s = split_zero_shot(&ids(n), &[], counts, 3).unwrap();
            assert_eq!([s.seen.len(), s.validation.len(), s.unseen.len()], counts);
            let all: BTreeSet<usize> = s.seen.iter().chain(&s.validation).chain(&s.unseen).copied().collect();
            assert_eq!(all.len(), n);
            assert_eq!(s, split_zero_shot(&ids(n), &[], counts, 3).unwrap());
        }
        assert!(split_zero_shot(&ids(5), &[], [2, 2, 2], 0).is_err());
    }

    #[test]
    fn split_routes_samples() {
        let ds = generate_dataset(&small()).unwrap();
        let s = split_zero_shot(&ids(12), &ds.samples, [4, 4, 4], 9).unwrap();
        assert!(s.train.iter().all(|x| s.seen.contains(&x.label)));
        assert!(s.val.iter().all(|x| s.validation.contains(&x.label)));
        assert!(s.test.iter().all(|x| s.unseen.contains(&x.label)));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), ds.samples.len());
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small()).unwrap();
        let path = dir.path().join("s.jsonl");
        save_jsonl(&ds.samples, &path).unwrap();
        let back: Vec<Sample> = load_jsonl(&path).unwrap();
        assert_eq!(back, ds.samples);

        let empty = dir.path().join("e.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_jsonl::<Sample>(&empty).unwrap().is_empty());

        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[2][..lines[2].len() / 2];
        lines[2] = cut;
        let broken = dir.path().join("b.jsonl");
        fs::write(&broken, lines.join("\n")).unwrap();
        match load_jsonl::<Sample>(&broken) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn field_names() {
        let ds = generate_dataset(&small()).unwrap();
        let v = serde_json::to_value(&ds.samples[0]).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["id", "label", "patches", "spans", "task", "tokens"].into_iter().collect());
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&DatasetConfig { seed: 5, ..small() }).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn batches() {
        let items: Vec<usize> = (0..10).collect();
        let mut rng = Rng::new(0);
        let b = batch_iter(&items, 4, &mut rng, false).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b.concat().into_iter().copied().collect::<Vec<_>>(), items);

        let epochs = |seed| {
            let mut rng = Rng::new(seed);
            (0..2)
                .map(|_| batch_iter(&items, 3, &mut rng, true).unwrap().concat().into_iter().copied().collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let a = epochs(4);
        assert_eq!(a, epochs(4));
        for e in &a {
            let mut sorted = e.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, items);
        }
        assert!(batch_iter(&items, 0, &mut rng, false).is_err());
    }
}
