//! TF-IDF corpus index: tokenization, smoothed IDF weights, L2-normalized
//! sparse document vectors, top-k retrieval through inverted postings, and
//! pairwise cosine similarity for the reward engine.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const INDEX_FORMAT: &str = "tfidf-index";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate doc_id {0:?} in corpus")]
    DuplicateDocId(String),
    #[error("empty corpus: index requires at least one document")]
    EmptyCorpus,
    #[error("document {0:?} has empty doc_id")]
    EmptyDocId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("corpus line {line}: {source}")]
    CorpusParse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("unsupported index file: expected {INDEX_FORMAT} v{INDEX_VERSION}, found {found}")]
    UnsupportedFormat { found: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index file parse: {0}")]
    FileParse(#[from] serde_json::Error),
}

/// One corpus document. Serialized with the wire field name `id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "id")]
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Build a document from bare text, deriving the id from a content hash.
    pub fn from_text(title: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            doc_id: format!("sha-{}", fnv1a_hex(text.as_bytes())),
            title: title.into(),
            text,
        }
    }
}

/// FNV-1a 64-bit, used only to mint stable ids for id-less documents.
fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Lowercase and split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// An L2-normalized sparse vector over index term ids.
///
/// Entries are sorted by term id; the empty vector is legal and has
/// similarity 0 to everything.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    fn from_weights(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|&(t, _)| t);
        let norm = entries.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut entries {
                *w /= norm;
            }
        }
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }
}

/// Dot product of two normalized sparse vectors, clamped into [0, 1].
pub fn cosine_similarity(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut dot = 0.0;
    while i < a.entries.len() && j < b.entries.len() {
        match a.entries[i].0.cmp(&b.entries[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a.entries[i].1 * b.entries[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    dot.clamp(0.0, 1.0)
}

/// Immutable TF-IDF index over a document corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfIdfIndex {
    format: String,
    version: u32,
    /// term -> term id, ids assigned in sorted term order
    vocabulary: BTreeMap<String, u32>,
    /// idf per term id
    idf: Vec<f64>,
    /// documents sorted by doc_id
    documents: Vec<Document>,
    /// normalized vector per document, aligned with `documents`
    doc_vectors: Vec<SparseVector>,
    /// term id -> (document position, normalized weight)
    #[serde(skip)]
    postings: Vec<Vec<(usize, f64)>>,
}

impl TfIdfIndex {
    /// Build an index from documents. Term ids are assigned by sorted term
    /// order and documents are stored sorted by doc_id, so the result is
    /// identical regardless of input order.
    pub fn build<I>(corpus: I) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = Document>,
    {
        let mut documents: Vec<Document> = corpus.into_iter().collect();
        if documents.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        for pair in documents.windows(2) {
            if pair[0].doc_id == pair[1].doc_id {
                return Err(IndexError::DuplicateDocId(pair[0].doc_id.clone()));
            }
        }
        for doc in &documents {
            if doc.doc_id.is_empty() {
                return Err(IndexError::EmptyDocId(doc.title.clone()));
            }
            if doc.text.is_empty() {
                return Err(IndexError::EmptyText(doc.doc_id.clone()));
            }
        }

        let tokenized: Vec<Vec<String>> = documents.iter().map(|d| tokenize(&d.text)).collect();

        // Document frequency per term; BTreeMap fixes the id assignment order.
        let mut df: BTreeMap<&str, u32> = BTreeMap::new();
        for toks in &tokenized {
            let mut seen: Vec<&str> = toks.iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let vocabulary: BTreeMap<String, u32> = df
            .keys()
            .enumerate()
            .map(|(i, t)| (t.to_string(), i as u32))
            .collect();
        let n = documents.len() as f64;
        let mut idf = vec![0.0; vocabulary.len()];
        for (term, &id) in &vocabulary {
            let d = f64::from(df[term.as_str()]);
            idf[id as usize] = ((1.0 + n) / (1.0 + d)).ln() + 1.0;
        }

        let mut index = Self {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            vocabulary,
            idf,
            documents,
            doc_vectors: Vec::new(),
            postings: Vec::new(),
        };
        index.doc_vectors = tokenized
            .iter()
            .map(|toks| index.vectorize_tokens(toks))
            .collect();
        index.rebuild_postings();
        Ok(index)
    }

    fn rebuild_postings(&mut self) {
        let mut postings = vec![Vec::new(); self.vocabulary.len()];
        for (pos, vec) in self.doc_vectors.iter().enumerate() {
            for &(term, w) in vec.entries() {
                postings[term as usize].push((pos, w));
            }
        }
        self.postings = postings;
    }

    fn vectorize_tokens(&self, toks: &[String]) -> SparseVector {
        let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
        for t in toks {
            if let Some(&id) = self.vocabulary.get(t) {
                *tf.entry(id).or_insert(0.0) += 1.0;
            }
        }
        SparseVector::from_weights(
            tf.into_iter()
                .map(|(id, count)| (id, count * self.idf[id as usize]))
                .collect(),
        )
    }

    /// Vectorize arbitrary text against the index vocabulary.
    /// Out-of-vocabulary terms are dropped; empty text gives the empty vector.
    pub fn vectorize(&self, text: &str) -> SparseVector {
        self.vectorize_tokens(&tokenize(text))
    }

    /// Top-k retrieval: cosine scores via the inverted postings, sorted by
    /// descending score with ties broken by ascending doc_id. Only documents
    /// with positive score are returned, so the result may be shorter than k.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(&Document, f64)> {
        let qvec = self.vectorize(query);
        if qvec.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut scores = vec![0.0f64; self.documents.len()];
        for &(term, qw) in qvec.entries() {
            for &(pos, dw) in &self.postings[term as usize] {
                scores[pos] += qw * dw;
            }
        }
        let mut hits: Vec<(usize, f64)> = scores
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s > 0.0)
            .map(|(pos, &s)| (pos, s.clamp(0.0, 1.0)))
            .collect();
        hits.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| self.documents[a.0].doc_id.cmp(&self.documents[b.0].doc_id))
        });
        hits.truncate(k);
        hits.into_iter()
            .map(|(pos, s)| (&self.documents[pos], s))
            .collect()
    }

    pub fn doc_count(&self) -> usize {
        self.documents.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn doc_vector(&self, doc_id: &str) -> Option<&SparseVector> {
        self.documents
            .binary_search_by(|d| d.doc_id.as_str().cmp(doc_id))
            .ok()
            .map(|pos| &self.doc_vectors[pos])
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&id| self.idf[id as usize])
    }

    /// Persist as a self-describing versioned JSON file. Serialization is
    /// deterministic, so rebuilding from the same corpus reproduces the
    /// same bytes.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut file = fs::File::create(path)?;
        serde_json::to_writer(&mut file, self)?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut raw = String::new();
        fs::File::open(path)?.read_to_string(&mut raw)?;
        let mut index: TfIdfIndex = serde_json::from_str(&raw)?;
        if index.format != INDEX_FORMAT || index.version != INDEX_VERSION {
            return Err(IndexError::UnsupportedFormat {
                found: format!("{} v{}", index.format, index.version),
            });
        }
        index.rebuild_postings();
        Ok(index)
    }
}

/// Read a JSON Lines corpus: one document object per line with fields
/// `id`, `title`, `text`. Blank lines are skipped.
pub fn read_corpus_jsonl(reader: impl Read) -> Result<Vec<Document>, IndexError> {
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|source| IndexError::CorpusParse {
                line: i + 1,
                source,
            })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>, IndexError> {
    read_corpus_jsonl(fs::File::open(path)?)
}

pub fn write_corpus_jsonl(docs: &[Document], mut writer: impl Write) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut writer, doc)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
