//! Documents, vocabularies, corpus files and the synthetic generator.
//!
//! Corpus files are json-lines records with a `text` and integer `label`,
//! plus optional half-open token-indexed `rationale` spans, explicit
//! `sentences` spans, and a `query` string. Embeddings load from a plain
//! text format, one token followed by its coordinates per line. Three
//! reserved vocabulary rows always exist: padding (id 0, zero vector),
//! unknown (id 1) and separator (id 2).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const RESERVED: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "<sep>";

/// Rationale granularity: masks select tokens or whole sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Token,
    Sentence,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Token => write!(f, "token"),
            Level::Sentence => write!(f, "sentence"),
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Level::Token),
            "sentence" => Ok(Level::Sentence),
            other => Err(Error::invalid(format!("unknown level {:?}", other))),
        }
    }
}

/// A tokenized document with sentence structure and an optional gold
/// rationale mask.
#[derive(Debug, Clone)]
pub struct Document {
    pub tokens: Vec<usize>,
    /// Half-open token spans partitioning [0, len).
    pub bounds: Vec<(usize, usize)>,
    pub label: usize,
    /// Token-level gold rationale, when annotated.
    pub human_mask: Option<Vec<u8>>,
    pub query: Option<Vec<usize>>,
}

impl Document {
    pub fn new(
        tokens: Vec<usize>,
        bounds: Vec<(usize, usize)>,
        label: usize,
        human_mask: Option<Vec<u8>>,
        query: Option<Vec<usize>>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("document with no tokens"));
        }
        validate_bounds(&bounds, tokens.len())?;
        if let Some(m) = &human_mask {
            if m.len() != tokens.len() {
                return Err(Error::invalid(format!(
                    "rationale mask length {} for {} tokens",
                    m.len(),
                    tokens.len()
                )));
            }
        }
        Ok(Document {
            tokens,
            bounds,
            label,
            human_mask,
            query,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentence_count(&self) -> usize {
        self.bounds.len()
    }

    /// Number of rationale units at the given granularity.
    pub fn unit_count(&self, level: Level) -> usize {
        match level {
            Level::Token => self.len(),
            Level::Sentence => self.sentence_count(),
        }
    }

    /// Gold rationale in unit space. At sentence granularity a sentence is
    /// gold-selected when any of its tokens is.
    pub fn unit_human_mask(&self, level: Level) -> Option<Vec<u8>> {
        let m = self.human_mask.as_ref()?;
        match level {
            Level::Token => Some(m.clone()),
            Level::Sentence => Some(
                self.bounds
                    .iter()
                    .map(|&(s, e)| u8::from(m[s..e].iter().any(|&v| v != 0)))
                    .collect(),
            ),
        }
    }
}

pub fn validate_bounds(bounds: &[(usize, usize)], len: usize) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::invalid("empty sentence bounds"));
    }
    let mut cursor = 0usize;
    for &(s, e) in bounds {
        if s != cursor || e <= s {
            return Err(Error::invalid(format!(
                "sentence bounds must partition [0, {}): got ({}, {}) at {}",
                len, s, e, cursor
            )));
        }
        cursor = e;
    }
    if cursor != len {
        return Err(Error::invalid(format!(
            "sentence bounds cover [0, {}) for {} tokens",
            cursor, len
        )));
    }
    Ok(())
}

/// Contiguous runs of ones as half-open spans.
pub fn mask_to_spans(mask: &[u8]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, mask.len()));
    }
    spans
}

const SPLIT_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '(', ')', '"'];
const SENTENCE_END: &[&str] = &[".", "!", "?"];

/// Whitespace tokenization plus leading/trailing punctuation splitting.
/// Joining the result with single spaces reproduces the normalized text,
/// and re-tokenizing that text is a fixed point.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        let mut rest = piece;
        let mut lead = Vec::new();
        loop {
            let mut chars = rest.chars();
            match chars.next() {
                Some(c) if SPLIT_PUNCT.contains(&c) && rest.chars().count() > 1 => {
                    lead.push(c.to_string());
                    rest = &rest[c.len_utf8()..];
                }
                _ => break,
            }
        }
        let mut trail = Vec::new();
        loop {
            let last = rest.chars().last();
            match last {
                Some(c) if SPLIT_PUNCT.contains(&c) && rest.chars().count() > 1 => {
                    trail.push(c.to_string());
                    rest = &rest[..rest.len() - c.len_utf8()];
                }
                _ => break,
            }
        }
        out.extend(lead);
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

/// Sentence bounds inferred from terminal punctuation tokens; a trailing
/// run without a terminator forms the last sentence.
pub fn bounds_from_punctuation(tokens: &[String]) -> Vec<(usize, usize)> {
    let mut bounds = Vec::new();
    let mut start = 0usize;
    for (i, t) in tokens.iter().enumerate() {
        if SENTENCE_END.contains(&t.as_str()) {
            bounds.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        bounds.push((start, tokens.len()));
    }
    if bounds.is_empty() {
        bounds.push((0, tokens.len()));
    }
    bounds
}

/// Vocabulary plus the embedding matrix, with the three reserved rows.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<S> {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Tensor<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    /// Builds a table from non-reserved (token, row) pairs. Reserved rows
    /// are prepended: padding is all zeros, unknown and separator get fixed
    /// small pseudo-random vectors so tables are reproducible.
    pub fn from_rows(entries: Vec<(String, Vec<f64>)>, dim: usize) -> Result<Self> {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        let mut data = vec![0.0f64; dim];
        let mut reserved_rng = crate::rng::rng_from(0x7e5e_11ed, &[dim as u64]);
        for _ in 0..2 {
            for _ in 0..dim {
                let v: f64 = StandardNormal.sample(&mut reserved_rng);
                data.push(0.1 * v);
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        for (token, row) in entries {
            if row.len() != dim {
                return Err(Error::invalid(format!(
                    "embedding row for {:?} has {} dims, expected {}",
                    token,
                    row.len(),
                    dim
                )));
            }
            if index.contains_key(&token) {
                return Err(Error::Vocab(format!("duplicate token {:?}", token)));
            }
            index.insert(token.clone(), tokens.len());
            tokens.push(token);
            data.extend_from_slice(&row);
        }
        let rows = tokens.len();
        Ok(EmbeddingTable {
            tokens,
            index,
            matrix: Tensor::from_f64(vec![rows, dim], &data),
        })
    }

    /// Loads a text embedding file: one token and `dim` reals per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut entries = Vec::new();
        let mut dim: Option<usize> = None;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| perr(lineno + 1, "empty line".into()))?
                .to_string();
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| perr(lineno + 1, format!("bad number {:?}: {}", p, e)))
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(perr(
                        lineno + 1,
                        format!("dimension {} does not match previous {}", values.len(), d),
                    ))
                }
                _ => {}
            }
            entries.push((token, values));
        }
        let dim = dim.ok_or_else(|| perr(0, "no embedding rows".into()))?;
        if dim == 0 {
            return Err(perr(1, "zero-dimensional embeddings".into()));
        }
        Self::from_rows(entries, dim).map_err(|e| match e {
            Error::Vocab(msg) => Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg,
            },
            other => other,
        })
    }

    /// Writes the non-reserved rows in the loadable text format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for id in RESERVED..self.vocab_size() {
            write!(w, "{}", self.tokens[id])?;
            for v in self.matrix.row(id) {
                write!(w, " {}", v.as_f64())?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn is_structural(&self, id: usize) -> bool {
        id < RESERVED
    }

    /// True for rows eligible as trigger candidates or neighbours.
    pub fn allowed_mask(&self) -> Vec<bool> {
        (0..self.vocab_size()).map(|i| i >= RESERVED).collect()
    }

    /// Order-sensitive hash of the vocabulary, used for transfer
    /// compatibility checks.
    pub fn vocab_hash(&self) -> u64 {
        vocab_hash(&self.tokens, self.dim())
    }
}

pub fn vocab_hash(tokens: &[String], dim: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    };
    eat(&(dim as u64).to_le_bytes());
    for t in tokens {
        eat(t.as_bytes());
        eat(&[0xff]);
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonDoc {
    text: String,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentences: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadStats {
    pub docs: usize,
    pub total_tokens: usize,
    pub unknown_tokens: usize,
}

fn ids_for<S: Scalar>(tokens: &[String], table: &EmbeddingTable<S>, unknown: &mut usize) -> Vec<usize> {
    tokens
        .iter()
        .map(|t| match table.id_of(t) {
            Some(id) => id,
            None => {
                *unknown += 1;
                UNK_ID
            }
        })
        .collect()
}

/// Loads a json-lines corpus, mapping tokens through the table's
/// vocabulary; unknown surfaces map to the unknown id and are counted.
pub fn load_corpus<S: Scalar>(
    path: impl AsRef<Path>,
    table: &EmbeddingTable<S>,
) -> Result<(Corpus, LoadStats)> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut stats = LoadStats::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let rec: JsonDoc =
            serde_json::from_str(&line).map_err(|e| perr(format!("bad record: {}", e)))?;
        let surface = tokenize(&rec.text);
        if surface.is_empty() {
            return Err(perr("document with no tokens".into()));
        }
        let ids = ids_for(&surface, table, &mut stats.unknown_tokens);
        stats.total_tokens += ids.len();
        let bounds = match rec.sentences {
            Some(b) => {
                validate_bounds(&b, ids.len()).map_err(|e| perr(e.to_string()))?;
                b
            }
            None => bounds_from_punctuation(&surface),
        };
        let human_mask = match rec.rationale {
            None => None,
            Some(spans) => {
                let mut mask = vec![0u8; ids.len()];
                for (s, e) in spans {
                    if s >= e || e > ids.len() {
                        return Err(perr(format!(
                            "rationale span ({}, {}) outside document of {} tokens",
                            s,
                            e,
                            ids.len()
                        )));
                    }
                    for m in &mut mask[s..e] {
                        *m = 1;
                    }
                }
                Some(mask)
            }
        };
        let query = match rec.query {
            None => None,
            Some(q) => {
                let qs = tokenize(&q);
                if qs.is_empty() {
                    None
                } else {
                    Some(ids_for(&qs, table, &mut stats.unknown_tokens))
                }
            }
        };
        let doc = Document::new(ids, bounds, rec.label, human_mask, query)
            .map_err(|e| perr(e.to_string()))?;
        docs.push(doc);
        stats.docs += 1;
    }
    Ok((Corpus { docs }, stats))
}

/// Writes a corpus back to json-lines using the table's surfaces.
pub fn save_corpus<S: Scalar>(
    path: impl AsRef<Path>,
    corpus: &Corpus,
    table: &EmbeddingTable<S>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in &corpus.docs {
        let text = doc
            .tokens
            .iter()
            .map(|&id| table.token(id))
            .collect::<Vec<_>>()
            .join(" ");
        let rec = JsonDoc {
            text,
            label: doc.label,
            rationale: doc.human_mask.as_ref().map(|m| mask_to_spans(m)),
            sentences: Some(doc.bounds.clone()),
            query: doc.query.as_ref().map(|q| {
                q.iter()
                    .map(|&id| table.token(id))
                    .collect::<Vec<_>>()
                    .join(" ")
            }),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Controls for the synthetic corpus with planted rationales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    /// Total vocabulary size including the reserved rows.
    pub vocab: usize,
    /// Cue tokens per polarity.
    pub cues_per_class: usize,
    pub dim: usize,
    pub sentences_per_doc: usize,
    /// Tokens per sentence including its terminal period.
    pub tokens_per_sentence: usize,
    /// Planted rationale fraction of the document length.
    pub sparsity: f64,
    /// Rate of opposite-polarity cue tokens outside the planted span.
    pub distractor_rate: f64,
    pub level: Level,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_docs: 2000,
            dev_docs: 200,
            test_docs: 200,
            vocab: 2000,
            cues_per_class: 40,
            dim: 32,
            sentences_per_doc: 4,
            tokens_per_sentence: 15,
            sparsity: 0.2,
            distractor_rate: 0.02,
            level: Level::Token,
            seed: 0,
        }
    }
}

pub struct SyntheticData<S> {
    pub table: EmbeddingTable<S>,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl SyntheticSpec {
    fn planted_len(&self) -> usize {
        let total = self.sentences_per_doc * self.tokens_per_sentence;
        ((total as f64 * self.sparsity).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences_per_doc == 0 || self.tokens_per_sentence < 2 {
            return Err(Error::invalid(
                "synthetic documents need at least one sentence of two tokens",
            ));
        }
        if !(0.0 < self.sparsity && self.sparsity < 1.0) {
            return Err(Error::invalid("sparsity must lie in (0, 1)"));
        }
        if self.planted_len() > self.tokens_per_sentence - 1 {
            return Err(Error::invalid(format!(
                "planted span of {} tokens does not fit one sentence of {} content tokens",
                self.planted_len(),
                self.tokens_per_sentence - 1
            )));
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return Err(Error::invalid("distractor rate must lie in [0, 1)"));
        }
        let fixed = RESERVED + 1 + 2 * self.cues_per_class;
        if self.vocab <= fixed {
            return Err(Error::invalid(format!(
                "vocab {} leaves no neutral tokens (need more than {})",
                self.vocab, fixed
            )));
        }
        Ok(())
    }
}

/// Generates the synthetic task. Labels alternate by document index, so
/// class balance is exact up to one document. The planted cue span decides
/// the label and is recorded as the gold rationale; distractor cues of the
/// opposite polarity only ever appear outside it.
pub fn generate_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticData<S>> {
    spec.validate()?;
    let n_cues = spec.cues_per_class;
    let n_neutral = spec.vocab - RESERVED - 1 - 2 * n_cues;

    // Vocabulary layout after the reserved rows: '.', positive cues,
    // negative cues, neutral filler.
    let mut tokens: Vec<String> = vec![".".to_string()];
    for i in 0..n_cues {
        tokens.push(format!("pos{}", i));
    }
    for i in 0..n_cues {
        tokens.push(format!("neg{}", i));
    }
    for i in 0..n_neutral {
        tokens.push(format!("w{}", i));
    }
    let period = RESERVED;
    let pos0 = RESERVED + 1;
    let neg0 = pos0 + n_cues;
    let neutral0 = neg0 + n_cues;

    let mut erng = crate::rng::rng_from(spec.seed, &[1]);
    let gauss = |scale: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..spec.dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                scale * v
            })
            .collect()
    };
    let base_pos = gauss(1.0, &mut erng);
    let base_neg = gauss(1.0, &mut erng);
    let mut rows = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        let id = RESERVED + i;
        let row = if id == period {
            gauss(0.3, &mut erng)
        } else if id < neg0 {
            let noise = gauss(0.5, &mut erng);
            base_pos.iter().zip(&noise).map(|(b, n)| b + n).collect()
        } else if id < neutral0 {
            let noise = gauss(0.5, &mut erng);
            base_neg.iter().zip(&noise).map(|(b, n)| b + n).collect()
        } else {
            gauss(0.8, &mut erng)
        };
        rows.push((t.clone(), row));
    }
    let table = EmbeddingTable::from_rows(rows, spec.dim)?;

    let planted = spec.planted_len();
    let total = spec.train_docs + spec.dev_docs + spec.test_docs;
    let mut all_docs = Vec::with_capacity(total);
    for doc_idx in 0..total {
        let label = doc_idx % 2;
        let mut rng = crate::rng::rng_from(spec.seed, &[2, doc_idx as u64]);
        let n_s = spec.sentences_per_doc;
        let n_t = spec.tokens_per_sentence;
        let len = n_s * n_t;
        let planted_sentence = rng.gen_range(0..n_s);
        let content = n_t - 1;
        let start_in_sentence = rng.gen_range(0..=(content - planted));
        let span_start = planted_sentence * n_t + start_in_sentence;
        let span_end = span_start + planted;

        let (own0, other0) = if label == 1 { (pos0, neg0) } else { (neg0, pos0) };
        let mut ids = Vec::with_capacity(len);
        let mut mask = vec![0u8; len];
        for s in 0..n_s {
            for t in 0..content {
                let pos = s * n_t + t;
                let id = if pos >= span_start && pos < span_end {
                    mask[pos] = 1;
                    own0 + rng.gen_range(0..n_cues)
                } else if rng.gen_range(0.0..1.0) < spec.distractor_rate {
                    other0 + rng.gen_range(0..n_cues)
                } else {
                    neutral0 + rng.gen_range(0..n_neutral)
                };
                ids.push(id);
            }
            ids.push(period);
        }
        if spec.level == Level::Sentence {
            let s = planted_sentence * n_t;
            for m in &mut mask[s..s + n_t] {
                *m = 1;
            }
        }
        let bounds = (0..n_s).map(|s| (s * n_t, (s + 1) * n_t)).collect();
        all_docs.push(Document::new(ids, bounds, label, Some(mask), None)?);
    }

    let dev_start = spec.train_docs;
    let test_start = dev_start + spec.dev_docs;
    let test = Corpus {
        docs: all_docs.split_off(test_start),
    };
    let dev = Corpus {
        docs: all_docs.split_off(dev_start),
    };
    let train = Corpus { docs: all_docs };
    Ok(SyntheticData {
        table,
        train,
        dev,
        test,
    })
}

impl<S: Scalar> SyntheticData<S> {
    /// Writes embeddings.txt and the three corpus splits into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.table.save(dir.join("embeddings.txt"))?;
        save_corpus(dir.join("train.jsonl"), &self.train, &self.table)?;
        save_corpus(dir.join("dev.jsonl"), &self.dev, &self.table)?;
        save_corpus(dir.join("test.jsonl"), &self.test, &self.table)?;
        Ok(())
    }
}
