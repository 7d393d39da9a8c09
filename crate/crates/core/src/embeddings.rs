//! Token embeddings: a word vector concatenated with averaged character
//! trigram vectors.
//!
//! Every token maps to `word(token) ⊕ chars(token)`, a vector of
//! `word_dim + char_dim` components. Out-of-vocabulary words get a zero word
//! part. The character part is the mean of the vectors of all trigrams of
//! `"<" + token + ">"`; trigrams missing from the (optional) trigram table
//! fall back to one of `n_buckets` hashed, trainable bucket vectors, so
//! every token has a nonzero character part.
//!
//! Slot descriptions are embedded by summing the embeddings of their tokens
//! with the same table.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SlotType;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, RowGroups, Tensor, Var};

pub const DEFAULT_BUCKETS: usize = 1 << 16;
pub const NGRAM_LEN: usize = 3;
pub const INIT_SCALE: f64 = 0.1;

/// Character trigrams of `<token>`.
pub fn char_ngrams(token: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    chars.windows(NGRAM_LEN).map(|w| w.iter().collect()).collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Index structures shared by the plain table and the trainable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVocab {
    pub word_dim: usize,
    pub char_dim: usize,
    pub n_buckets: usize,
    words: Vec<String>,
    ngrams: Vec<String>,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
    #[serde(skip)]
    ngram_index: HashMap<String, usize>,
}

impl EmbeddingVocab {
    fn new(word_dim: usize, char_dim: usize, n_buckets: usize, words: Vec<String>, ngrams: Vec<String>) -> Self {
        let mut v = Self {
            word_dim,
            char_dim,
            n_buckets,
            words,
            ngrams,
            word_index: HashMap::new(),
            ngram_index: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Rebuilds lookup maps after deserialization.
    pub fn reindex(&mut self) {
        self.word_index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        self.ngram_index = self.ngrams.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    /// Total per-token dimension, `word_dim + char_dim`.
    pub fn dim(&self) -> usize {
        self.word_dim + self.char_dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn ngrams(&self) -> &[String] {
        &self.ngrams
    }

    pub fn word_row(&self, token: &str) -> Option<usize> {
        self.word_index.get(token).copied()
    }

    pub fn bucket(&self, ngram: &str) -> usize {
        (fnv1a(ngram.as_bytes()) % self.n_buckets as u64) as usize
    }

    /// Row groups for summing the embeddings of each bag of tokens.
    /// Returns (word, known-trigram, bucket) groups.
    fn plan<S: AsRef<str>>(&self, bags: &[&[S]]) -> (RowGroups, RowGroups, RowGroups) {
        let mut word = Vec::with_capacity(bags.len());
        let mut known = Vec::with_capacity(bags.len());
        let mut bucket = Vec::with_capacity(bags.len());
        for bag in bags {
            let (mut wg, mut kg, mut bg) = (Vec::new(), Vec::new(), Vec::new());
            for tok in bag.iter() {
                let tok = tok.as_ref();
                if let Some(r) = self.word_row(tok) {
                    wg.push((r, 1.0));
                }
                let grams = char_ngrams(tok);
                let w = 1.0 / grams.len() as f64;
                for gram in &grams {
                    match self.ngram_index.get(gram) {
                        Some(&r) => kg.push((r, w)),
                        None => bg.push((self.bucket(gram), w)),
                    }
                }
            }
            word.push(wg);
            known.push(kg);
            bucket.push(bg);
        }
        (word, known, bucket)
    }
}

/// Word vectors read from a text file.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub words: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    /// Lines whose token had already been seen; the later line wins.
    pub duplicates: usize,
}

/// Reads `token v1 … vdim` lines. A first line consisting of exactly two
/// integers (`count dim`) is treated as a header and skipped.
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<WordVectors> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = WordVectors {
        dim,
        words: Vec::new(),
        vectors: Vec::new(),
        duplicates: 0,
    };
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok()) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        if fields.len() != dim + 1 {
            return Err(parse_err(format!("expected {dim} components, found {}", fields.len() - 1)));
        }
        let vector = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        match index.get(fields[0]) {
            Some(&row) => {
                out.vectors[row] = vector;
                out.duplicates += 1;
            }
            None => {
                index.insert(fields[0].to_owned(), out.words.len());
                out.words.push(fields[0].to_owned());
                out.vectors.push(vector);
            }
        }
    }
    Ok(out)
}

/// Embedding values plus their index.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: EmbeddingVocab,
    pub word_vectors: Tensor,
    pub char_ngram_vectors: Tensor,
    pub char_buckets: Tensor,
    /// Whether word and known-trigram vectors are updated in training.
    /// Bucket vectors are always trainable.
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Randomly initialized table over `words`, components drawn from
    /// uniform(−0.1, 0.1). Duplicate words are ignored.
    pub fn random<R: Rng + ?Sized>(
        words: impl IntoIterator<Item = String>,
        word_dim: usize,
        char_dim: usize,
        n_buckets: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let words: Vec<String> = words.into_iter().filter(|w| seen.insert(w.clone())).collect();
        let word_vectors = Tensor::uniform(&[words.len(), word_dim], INIT_SCALE, rng);
        let char_buckets = Tensor::uniform(&[n_buckets, char_dim], INIT_SCALE, rng);
        Self::assemble(words, word_vectors, Vec::new(), Tensor::zeros(&[0, char_dim]), char_buckets, true)
    }

    /// Table with pretrained (frozen) word vectors and random buckets.
    pub fn from_word_vectors<R: Rng + ?Sized>(
        wv: WordVectors,
        char_dim: usize,
        n_buckets: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let word_vectors = if wv.words.is_empty() {
            Tensor::zeros(&[0, wv.dim])
        } else {
            Tensor::from_rows(&wv.vectors)?
        };
        let char_buckets = Tensor::uniform(&[n_buckets, char_dim], INIT_SCALE, rng);
        Self::assemble(wv.words, word_vectors, Vec::new(), Tensor::zeros(&[0, char_dim]), char_buckets, false)
    }

    /// Adds pretrained trigram vectors. Rows must have `char_dim` components.
    pub fn with_ngram_vectors(mut self, ngrams: Vec<String>, vectors: Tensor) -> Result<Self> {
        if vectors.rows() != ngrams.len() || (vectors.cols() != self.vocab.char_dim && !ngrams.is_empty()) {
            return Err(Error::Shape {
                op: "ngram_vectors",
                left: vec![ngrams.len(), self.vocab.char_dim],
                right: vectors.shape().to_vec(),
            });
        }
        self.vocab = EmbeddingVocab::new(
            self.vocab.word_dim,
            self.vocab.char_dim,
            self.vocab.n_buckets,
            self.vocab.words.clone(),
            ngrams,
        );
        self.char_ngram_vectors = if self.vocab.ngrams.is_empty() {
            Tensor::zeros(&[0, self.vocab.char_dim])
        } else {
            vectors
        };
        Ok(self)
    }

    fn assemble(
        words: Vec<String>,
        word_vectors: Tensor,
        ngrams: Vec<String>,
        char_ngram_vectors: Tensor,
        char_buckets: Tensor,
        trainable: bool,
    ) -> Result<Self> {
        let word_dim = word_vectors.cols();
        let char_dim = char_buckets.cols();
        let n_buckets = char_buckets.rows();
        if n_buckets == 0 {
            return Err(Error::Config("at least one hash bucket is required".into()));
        }
        Ok(Self {
            vocab: EmbeddingVocab::new(word_dim, char_dim, n_buckets, words, ngrams),
            word_vectors,
            char_ngram_vectors,
            char_buckets,
            trainable,
        })
    }

    pub fn dim(&self) -> usize {
        self.vocab.dim()
    }

    pub fn word_vector(&self, token: &str) -> Vec<f64> {
        match self.vocab.word_row(token) {
            Some(r) => self.word_vectors.row_slice(r).to_vec(),
            None => vec![0.0; self.vocab.word_dim],
        }
    }

    pub fn char_features(&self, token: &str) -> Vec<f64> {
        let (_, known, bucket) = self.vocab.plan(&[&[token][..]]);
        let mut out = vec![0.0; self.vocab.char_dim];
        accumulate(&mut out, &self.char_ngram_vectors, &known[0]);
        accumulate(&mut out, &self.char_buckets, &bucket[0]);
        out
    }

    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        let mut v = self.word_vector(token);
        v.extend(self.char_features(token));
        v
    }

    /// `n × (word_dim + char_dim)` matrix, one row per token.
    pub fn embed_utterance<S: AsRef<str>>(&self, tokens: &[S]) -> Tensor {
        let data = tokens.iter().flat_map(|t| self.embed_token(t.as_ref())).collect();
        Tensor::matrix(tokens.len(), self.dim(), data).expect("row dims")
    }

    /// Sum of the description tokens' embeddings.
    pub fn slot_description_repr(&self, slot: &SlotType) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for t in &slot.description_tokens {
            for (o, x) in out.iter_mut().zip(self.embed_token(t)) {
                *o += x;
            }
        }
        out
    }

    /// One description row per slot, in input order.
    pub fn build_description_matrix(&self, slots: &[SlotType]) -> Result<Tensor> {
        check_slots(slots.iter())?;
        let rows: Vec<Vec<f64>> = slots.iter().map(|s| self.slot_description_repr(s)).collect();
        Tensor::from_rows(&rows)
    }

    /// Moves the values into `store` and returns the graph-facing layer.
    pub fn into_layer(self, store: &mut ParamStore, prefix: &str) -> Result<EmbeddingLayer> {
        let word = store.add(format!("{prefix}.word"), self.word_vectors, self.trainable)?;
        let char_known = store.add(format!("{prefix}.char_ngram"), self.char_ngram_vectors, self.trainable)?;
        let char_bucket = store.add(format!("{prefix}.char_bucket"), self.char_buckets, true)?;
        Ok(EmbeddingLayer {
            vocab: self.vocab,
            word,
            char_known,
            char_bucket,
        })
    }
}

fn accumulate(out: &mut [f64], src: &Tensor, group: &[(usize, f64)]) {
    for &(r, w) in group {
        for (o, x) in out.iter_mut().zip(src.row_slice(r)) {
            *o += w * x;
        }
    }
}

fn check_slots<'a>(slots: impl Iterator<Item = &'a SlotType>) -> Result<()> {
    let mut names = std::collections::HashSet::new();
    let mut any = false;
    for s in slots {
        any = true;
        if s.description_tokens.is_empty() {
            return Err(Error::Registry(format!("slot {:?} has an empty description", s.name)));
        }
        if !names.insert(&s.name) {
            return Err(Error::Registry(format!("duplicate slot name {:?}", s.name)));
        }
    }
    if !any {
        return Err(Error::Registry("no slots given".into()));
    }
    Ok(())
}

/// Embedding parameters living in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingLayer {
    pub vocab: EmbeddingVocab,
    pub word: ParamId,
    pub char_known: ParamId,
    pub char_bucket: ParamId,
}

impl EmbeddingLayer {
    fn bags<S: AsRef<str>>(&self, g: &mut Graph<'_>, bags: &[&[S]]) -> Result<Var> {
        let (wg, kg, bg) = self.vocab.plan(bags);
        let word = g.param(self.word);
        let word = g.combine_rows(word, wg)?;
        let known = g.param(self.char_known);
        let known = g.combine_rows(known, kg)?;
        let bucket = g.param(self.char_bucket);
        let bucket = g.combine_rows(bucket, bg)?;
        let chars = g.add(known, bucket)?;
        g.concat_cols(&[word, chars])
    }

    /// `n × dim` embedding matrix for `tokens`.
    pub fn embed<S: AsRef<str>>(&self, g: &mut Graph<'_>, tokens: &[S]) -> Result<Var> {
        let bags: Vec<&[S]> = tokens.iter().map(std::slice::from_ref).collect();
        self.bags(g, &bags)
    }

    /// `n_s × dim` description matrix, one summed row per slot.
    pub fn describe(&self, g: &mut Graph<'_>, slots: &[&SlotType]) -> Result<Var> {
        check_slots(slots.iter().copied())?;
        let bags: Vec<&[String]> = slots.iter().map(|s| s.description_tokens.as_slice()).collect();
        self.bags(g, &bags)
    }

    /// Reconstructs a plain table from the current parameter values.
    pub fn to_table(&self, store: &ParamStore) -> EmbeddingTable {
        EmbeddingTable {
            vocab: self.vocab.clone(),
            word_vectors: store.value(self.word).clone(),
            char_ngram_vectors: store.value(self.char_known).clone(),
            char_buckets: store.value(self.char_bucket).clone(),
            trainable: store.get(self.word).trainable,
        }
    }
}
