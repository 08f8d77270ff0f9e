//! Class vocabularies, semantic embedding tables and seen/unseen splits.
//!
//! Embedding files are UTF-8 text with one `class_name,v1,...,vd` row per
//! class, no header and LF line endings.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BACKGROUND: &str = "background";

/// Ordered class names; index 0 is always `background`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.first().map(String::as_str) != Some(BACKGROUND) {
            return Err(Error::invalid("class 0 must be `background`"));
        }
        if names.len() > u16::MAX as usize {
            return Err(Error::invalid("too many classes for 16-bit masks"));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains([',', '\n', '\r']) || n.trim() != n {
                return Err(Error::invalid(format!("invalid class name {n:?}")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate class name `{n}`")));
            }
        }
        Ok(ClassVocabulary { names, index })
    }

    /// `background` followed by `obj01 .. objNN`.
    pub fn synthetic(n_objects: usize) -> Self {
        let names = std::iter::once(BACKGROUND.to_string())
            .chain((1..=n_objects).map(|i| format!("obj{i:02}")));
        ClassVocabulary::new(names).expect("synthetic names are valid")
    }

    /// The 21-label PASCAL-VOC vocabulary.
    pub fn pascal_voc() -> Self {
        ClassVocabulary::new(PASCAL_VOC).expect("static names are valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

pub const PASCAL_VOC: [&str; 21] = [
    "background",
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Unseen classes of the four PASCAL-5^i folds.
pub fn pascal5_unseen(fold: usize) -> Option<[&'static str; 5]> {
    match fold {
        0 => Some(["aeroplane", "bicycle", "bird", "boat", "bottle"]),
        1 => Some(["bus", "car", "cat", "chair", "cow"]),
        2 => Some(["diningtable", "dog", "horse", "motorbike", "person"]),
        3 => Some(["pottedplant", "sheep", "sofa", "train", "tvmonitor"]),
        _ => None,
    }
}

/// Per-class semantic vectors, stored as an `N x d` matrix in vocabulary order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab: ClassVocabulary,
    matrix: Arc<Tensor>,
}

impl EmbeddingTable {
    pub fn new(vocab: ClassVocabulary, matrix: Tensor) -> Result<Self> {
        let [n, d] = *matrix.shape() else {
            return Err(Error::shape(format!(
                "embedding matrix must be N x d, got {:?}",
                matrix.shape()
            )));
        };
        if n != vocab.len() {
            return Err(Error::shape(format!(
                "{n} embedding rows for {} classes",
                vocab.len()
            )));
        }
        if !matrix.all_finite() {
            return Err(Error::NonFinite("embedding entries must be finite".into()));
        }
        let rows: Vec<&[f64]> = matrix.data().chunks_exact(d).collect();
        for i in 0..n {
            for j in 0..i {
                if rows[i] == rows[j] {
                    return Err(Error::invalid(format!(
                        "classes `{}` and `{}` share an identical embedding",
                        vocab.names[j], vocab.names[i]
                    )));
                }
            }
        }
        Ok(EmbeddingTable {
            vocab,
            matrix: Arc::new(matrix),
        })
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix.data()[class * d..(class + 1) * d]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn shared_matrix(&self) -> Arc<Tensor> {
        Arc::clone(&self.matrix)
    }

    /// Keeps coordinates `start..end` of every vector.
    pub fn select_dims(&self, start: usize, end: usize) -> Result<Self> {
        let d = self.dim();
        if start >= end || end > d {
            return Err(Error::invalid(format!(
                "bad coordinate range {start}..{end} for d={d}"
            )));
        }
        let data = self
            .matrix
            .data()
            .chunks_exact(d)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        EmbeddingTable::new(
            self.vocab.clone(),
            Tensor::new(vec![self.num_classes(), end - start], data)?,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, name) in self.vocab.names.iter().enumerate() {
            out.push_str(name);
            for v in self.vector(c) {
                // Debug formatting is the shortest literal that parses back to the same bits.
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_rows(path: &Path, text: &str) -> Result<Vec<(usize, String, Vec<f64>)>> {
    let mut rows = Vec::new();
    let mut dim = None;
    for (i, line) in text.split('\n').enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| err(format!("non-numeric field {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(err(format!("class `{name}` has no values")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("class `{name}` has a non-finite value")));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(err(format!(
                    "ragged row: {} values, expected {d}",
                    values.len()
                )))
            }
            _ => {}
        }
        rows.push((lineno, name, values));
    }
    Ok(rows)
}

/// Reads an embedding file, arranging rows in `vocab` order.
pub fn load_embedding_table(path: &Path, vocab: &ClassVocabulary) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_rows(path, &text)?;
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (line, name, values) in rows {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let c = vocab
            .index_of(&name)
            .ok_or_else(|| err(format!("unknown class `{name}`")))?;
        if slots[c].replace(values).is_some() {
            return Err(err(format!("duplicate row for class `{name}`")));
        }
    }
    let mut data = Vec::new();
    let mut d = 0;
    for (c, slot) in slots.into_iter().enumerate() {
        let v = slot.ok_or_else(|| {
            Error::invalid(format!(
                "{}: missing embedding for class `{}`",
                path.display(),
                vocab.names[c]
            ))
        })?;
        d = v.len();
        data.extend(v);
    }
    EmbeddingTable::new(vocab.clone(), Tensor::new(vec![vocab.len(), d], data)?)
}

/// Reads an embedding file, taking its row order as the vocabulary.
pub fn load_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_rows(path, &text)?;
    let vocab = ClassVocabulary::new(rows.iter().map(|r| r.1.clone()))
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    load_embedding_table(path, &vocab)
}

/// Unit-length Gaussian vectors from a seeded generator.
pub fn generate_synthetic_embeddings(
    vocab: &ClassVocabulary,
    d: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    if d < 2 || vocab.len() < 2 {
        return Err(Error::invalid(format!(
            "need d >= 2 and at least 2 classes, got d={d}, n={}",
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * d);
    for _ in 0..vocab.len() {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.into_iter().map(|x| x / norm));
    }
    EmbeddingTable::new(vocab.clone(), Tensor::new(vec![vocab.len(), d], data)?)
}

/// Per class, `a`'s vector followed by `b`'s.
pub fn concat_embeddings(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<EmbeddingTable> {
    if a.vocab != b.vocab {
        return Err(Error::invalid(
            "cannot concatenate tables over different vocabularies",
        ));
    }
    let (da, db) = (a.dim(), b.dim());
    let mut data = Vec::with_capacity(a.num_classes() * (da + db));
    for c in 0..a.num_classes() {
        data.extend_from_slice(a.vector(c));
        data.extend_from_slice(b.vector(c));
    }
    EmbeddingTable::new(
        a.vocab.clone(),
        Tensor::new(vec![a.num_classes(), da + db], data)?,
    )
}

/// Disjoint seen/unseen partition of a vocabulary. Background is always seen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    num_classes: usize,
    seen: BTreeSet<usize>,
    unseen: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn from_unseen(
        num_classes: usize,
        unseen: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let unseen: BTreeSet<usize> = unseen.into_iter().collect();
        if unseen.is_empty() {
            return Err(Error::invalid("at least one unseen class is required"));
        }
        if unseen.contains(&0) {
            return Err(Error::invalid("background cannot be unseen"));
        }
        if let Some(&c) = unseen.iter().find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!(
                "class {c} outside vocabulary of {num_classes}"
            )));
        }
        let seen = (0..num_classes).filter(|c| !unseen.contains(c)).collect();
        Ok(SplitSpec {
            num_classes,
            seen,
            unseen,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Seen classes including background.
    pub fn seen(&self) -> &BTreeSet<usize> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<usize> {
        &self.unseen
    }

    /// Seen classes other than background.
    pub fn seen_objects(&self) -> Vec<usize> {
        self.seen.iter().copied().filter(|&c| c != 0).collect()
    }

    pub fn unseen_vec(&self) -> Vec<usize> {
        self.unseen.iter().copied().collect()
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen.contains(&class)
    }
}

/// Builds a split whose unseen classes are `unseen_names`.
pub fn make_split<S: AsRef<str>>(vocab: &ClassVocabulary, unseen_names: &[S]) -> Result<SplitSpec> {
    let mut unseen = BTreeSet::new();
    for name in unseen_names {
        let name = name.as_ref();
        let c = vocab
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("unknown class `{name}`")))?;
        if c == 0 {
            return Err(Error::invalid("background cannot be unseen"));
        }
        if !unseen.insert(c) {
            return Err(Error::invalid(format!("class `{name}` listed twice")));
        }
    }
    SplitSpec::from_unseen(vocab.len(), unseen)
}
