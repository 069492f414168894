//! Toy text and image encoders standing in for pretrained backbones.
//!
//! The text encoder is an embedding lookup plus sinusoidal positions,
//! followed by one dense `tanh` layer that sees each token, its right
//! neighbour, and the sequence mean, so `[CLS]` and `[E1]` columns carry
//! sentence and entity context. The image encoder is a linear projection of
//! raw patch features plus learned patch-position vectors.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_kernel, Bound, Kernel, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Dense;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const E1: usize = 4;
pub const E1_END: usize = 5;
pub const E2: usize = 6;
pub const E2_END: usize = 7;

pub const RESERVED: [&str; 8] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[E1]", "[/E1]", "[E2]", "[/E2]"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Entity typing: one marked entity.
    Met,
    /// Relation extraction: head and tail entities.
    Mre,
}

impl Task {
    pub fn entity_count(self) -> usize {
        match self {
            Task::Met => 1,
            Task::Mre => 2,
        }
    }

    /// Dimension of the entity representation for feature size `d`.
    pub fn entity_dim(self, d: usize) -> usize {
        (1 + self.entity_count()) * d
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Met => "met",
            Task::Mre => "mre",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "met" => Ok(Task::Met),
            "mre" => Ok(Task::Mre),
            _ => Err(Error::invalid(format!("unknown task `{s}` (expected met or mre)"))),
        }
    }
}

/// Token ↔ id map. Reserved tokens always occupy ids `0..8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_tokens(all)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::invalid(format!("vocabulary must start with reserved token {r} at id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps a token, falling back to `[UNK]` when allowed.
    pub fn lookup(&self, token: &str, unk_fallback: bool) -> Result<usize> {
        match self.id(token) {
            Some(id) => Ok(id),
            None if unk_fallback => Ok(UNK),
            None => Err(Error::invalid(format!("token `{token}` not in vocabulary"))),
        }
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let tokens = f.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}

/// Inclusive token index range `[start, end]` in the unmarked sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    fn overlaps(&self, other: &Span) -> bool {
        self.0 <= other.1 && other.0 <= self.1
    }
}

/// Marker-extended token ids with the positions the encoders read back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub cls: usize,
    pub e1: Option<usize>,
    pub e2: Option<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[CLS] tokens [SEP]` with no entity markers.
    pub fn plain(vocab: &Vocabulary, tokens: &[String], unk_fallback: bool) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        let mut ids = vec![CLS];
        for t in tokens {
            ids.push(vocab.lookup(t, unk_fallback)?);
        }
        ids.push(SEP);
        Ok(Self {
            ids,
            cls: 0,
            e1: None,
            e2: None,
        })
    }
}

/// Wraps the sentence in `[CLS]`/`[SEP]` and brackets each span with entity
/// markers. Sequences longer than `max_len` lose trailing sentence tokens,
/// but a sequence whose markers would be cut is rejected.
pub fn tokenize_with_markers(
    vocab: &Vocabulary,
    tokens: &[String],
    spans: &[Span],
    task: Task,
    max_len: usize,
    unk_fallback: bool,
) -> Result<TokenSeq> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty sentence"));
    }
    if spans.len() != task.entity_count() {
        return Err(Error::invalid(format!(
            "{task} needs {} span(s), got {}",
            task.entity_count(),
            spans.len()
        )));
    }
    for s in spans {
        if s.0 > s.1 || s.1 >= tokens.len() {
            return Err(Error::invalid(format!(
                "span [{}, {}] invalid for a {}-token sentence",
                s.0,
                s.1,
                tokens.len()
            )));
        }
    }
    if spans.len() == 2 && spans[0].overlaps(&spans[1]) {
        return Err(Error::invalid("entity spans overlap"));
    }

    const MARKERS: [(usize, usize); 2] = [(E1, E1_END), (E2, E2_END)];
    let mut ids = vec![CLS];
    let mut e1 = None;
    let mut e2 = None;
    // Index in `ids` just past the last closing marker.
    let mut protected = 1;
    for (i, t) in tokens.iter().enumerate() {
        for (k, s) in spans.iter().enumerate() {
            if s.0 == i {
                if k == 0 {
                    e1 = Some(ids.len());
                } else {
                    e2 = Some(ids.len());
                }
                ids.push(MARKERS[k].0);
            }
        }
        ids.push(vocab.lookup(t, unk_fallback)?);
        for (k, s) in spans.iter().enumerate() {
            if s.1 == i {
                ids.push(MARKERS[k].1);
                protected = ids.len();
            }
        }
    }
    if ids.len() + 1 > max_len {
        let keep = max_len.saturating_sub(1);
        if keep < protected {
            return Err(Error::invalid(format!(
                "sequence of {} tokens cannot be truncated to {max_len} without removing entity markers",
                ids.len() + 1
            )));
        }
        ids.truncate(keep);
    }
    ids.push(SEP);
    Ok(TokenSeq {
        ids,
        cls: 0,
        e1,
        e2,
    })
}

/// Raw patch features, `|V| × d_raw`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid(pub Tensor);

/// Fixed sinusoidal position table, `d × max_len`.
pub fn sinusoidal_positions(d: usize, max_len: usize) -> Tensor {
    Tensor::from_fn(d, max_len, |r, pos| {
        let k = (r / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * k / d as f64);
        if r % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub dense: Dense,
    pub positions: Tensor,
}

impl TextEncoder {
    /// `lexicon`, when given, supplies one raw feature vector per vocabulary
    /// entry; embeddings are a fixed random projection of those features.
    pub fn init(
        store: &mut ParamStore,
        vocab_len: usize,
        d: usize,
        max_len: usize,
        lexicon: Option<&[Vec<f64>]>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let table = match lexicon {
            Some(features) => {
                if features.len() != vocab_len {
                    return Err(Error::invalid(format!(
                        "lexicon has {} entries for a vocabulary of {vocab_len}",
                        features.len()
                    )));
                }
                let raw = Tensor::from_rows(features)?;
                let d_raw = raw.cols();
                let proj = rng.gaussian(d, d_raw).map(|x| x / (d_raw as f64).sqrt());
                let raw_t = forward_kernel(&Kernel::Transpose, &[&raw])?;
                forward_kernel(&Kernel::Matmul, &[&proj, &raw_t])?
            }
            None => rng.gaussian(d, vocab_len),
        };
        let embedding = store.add("text.embedding", table);
        let dense = Dense::init(store, "text.dense", 3 * d, d, rng);
        Ok(Self {
            embedding,
            dense,
            positions: sinusoidal_positions(d, max_len),
        })
    }

    pub fn lookup(store: &ParamStore, max_len: usize) -> Result<Self> {
        let embedding = store.id("text.embedding")?;
        let d = store.value(embedding).rows();
        Ok(Self {
            embedding,
            dense: Dense::lookup(store, "text.dense")?,
            positions: sinusoidal_positions(d, max_len),
        })
    }

    pub fn dim(&self) -> usize {
        self.positions.rows()
    }

    pub fn max_len(&self) -> usize {
        self.positions.cols()
    }
}

/// Contextual token features `T`, `d × |T|`.
pub fn encode_text<'t>(
    tape: &'t Tape,
    p: &Bound<'t>,
    enc: &TextEncoder,
    seq: &TokenSeq,
) -> Result<Var<'t>> {
    let emb = p.get(enc.embedding);
    let vocab_len = emb.cols();
    let n = seq.len();
    if n == 0 || n > enc.max_len() {
        return Err(Error::invalid(format!(
            "sequence length {n} outside 1..={}",
            enc.max_len()
        )));
    }
    if let Some(bad) = seq.ids.iter().find(|&&id| id >= vocab_len) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab_len}")));
    }
    let d = enc.dim();
    let pos = tape.constant(Tensor::from_fn(d, n, |r, c| enc.positions.get(r, c)));
    let x = emb.gather_cols(seq.ids.clone())?.add(pos)?;
    let next = if n > 1 {
        tape.concat_cols(&[x.slice_cols(1, n)?, tape.constant(Tensor::zeros(d, 1))])?
    } else {
        tape.constant(Tensor::zeros(d, 1))
    };
    let mean = x.row_mean()?.repeat_cols(n)?;
    let stacked = tape.concat_rows(&[x, next, mean])?;
    enc.dense.forward(p, stacked)?.tanh()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageEncoder {
    pub proj: ParamId,
    pub positions: ParamId,
}

impl ImageEncoder {
    pub fn init(store: &mut ParamStore, d_raw: usize, patches: usize, d: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_raw as f64).sqrt();
        let proj = store.add("image.proj", rng.uniform_tensor(d, d_raw, bound));
        let positions = store.add("image.positions", rng.uniform_tensor(d, patches, 0.1));
        Self { proj, positions }
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            proj: store.id("image.proj")?,
            positions: store.id("image.positions")?,
        })
    }
}

/// Visual token features `V`, `d × |V|`.
pub fn encode_image<'t>(
    tape: &'t Tape,
    p: &Bound<'t>,
    enc: &ImageEncoder,
    grid: &PatchGrid,
) -> Result<Var<'t>> {
    let proj = p.get(enc.proj);
    let pos = p.get(enc.positions);
    let [patches, d_raw] = grid.0.shape();
    if d_raw != proj.cols() || patches != pos.cols() {
        return Err(Error::Shape {
            kernel: "encode_image".into(),
            lhs: vec![patches, d_raw],
            rhs: vec![pos.cols(), proj.cols()],
        });
    }
    let g = tape.constant(grid.0.clone()).t()?;
    proj.matmul(g)?.add(pos)
}

/// CLS state stacked with the entity span state, or both span states for relations.
#[derive(Clone, Copy, Debug)]
pub struct EntityRep<'t> {
    pub vector: Var<'t>,
    pub task: Task,
}

pub fn extract_entity_rep<'t>(text: Var<'t>, seq: &TokenSeq, task: Task) -> Result<EntityRep<'t>> {
    let missing = |m: &str| Error::invalid(format!("{task}: missing {m} marker"));
    let mut cols = vec![seq.cls, seq.e1.ok_or_else(|| missing("[E1]"))?];
    if task == Task::Mre {
        cols.push(seq.e2.ok_or_else(|| missing("[E2]"))?);
    }
    let parts = cols
        .into_iter()
        .map(|c| text.slice_cols(c, c + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(EntityRep {
        vector: text.tape().concat_rows(&parts)?,
        task,
    })
}

/// Category prototypes as columns of a `d × |categories|` matrix.
#[derive(Clone, Debug)]
pub struct PrototypeSet<'t> {
    pub categories: Vec<usize>,
    pub matrix: Var<'t>,
}

/// Encodes each name as a plain sentence and averages all `l + 2` token
/// features, `[CLS]` and `[SEP]` included.
pub fn encode_prototypes<'t>(
    tape: &'t Tape,
    p: &Bound<'t>,
    enc: &TextEncoder,
    vocab: &Vocabulary,
    categories: &[(usize, &[String])],
) -> Result<PrototypeSet<'t>> {
    if categories.is_empty() {
        return Err(Error::invalid("no categories to encode"));
    }
    let mut cols = Vec::with_capacity(categories.len());
    for (id, name) in categories {
        if name.is_empty() {
            return Err(Error::invalid(format!("category {id} has an empty name")));
        }
        let seq = TokenSeq::plain(vocab, name, false)?;
        cols.push(encode_text(tape, p, enc, &seq)?.row_mean()?);
    }
    Ok(PrototypeSet {
        categories: categories.iter().map(|(id, _)| *id).collect(),
        matrix: tape.concat_cols(&cols)?,
    })
}
