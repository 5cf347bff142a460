//! Deterministic toy text encoder.
//!
//! Prompts are split into lowercase words, hashed into a fixed vocabulary and
//! framed as `BOS w_1 … w_n EOS PAD …` up to the sequence length. Word tokens
//! are content tokens; BOS, EOS and padding are context-aggregating tokens that
//! pick up prompt context only through self-attention.
//!
//! The encoder stacks `num_blocks` multi-head softmax self-attention blocks with
//! residual connections over seeded per-id embeddings plus positional
//! embeddings. Word embeddings share a "salience" direction and every query
//! carries a fixed bias toward keys along it, so attention mass flows toward
//! content tokens the way it does in trained text encoders.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::importance::AttentionMap;
use crate::linalg::{dot, norm_sq, Matrix};
use crate::rng;
use crate::scalar::Scalar;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Content,
    CtxAgg,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Content => "Content",
            TokenKind::CtxAgg => "CtxAgg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderParams {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Attention-logit bonus every query gives to keys of word tokens.
    pub content_salience: f64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            embed_dim: 32,
            num_heads: 4,
            num_blocks: 2,
            seq_len: 16,
            seed: 0,
            content_salience: 2.0,
        }
    }
}

impl EncoderParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be at least 1".into()));
        }
        if self.seq_len < 4 {
            return Err(Error::Config("seq_len must be at least 4".into()));
        }
        if self.vocab_size <= FIRST_WORD_ID as usize {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {FIRST_WORD_ID} reserved ids"
            )));
        }
        if !self.content_salience.is_finite() {
            return Err(Error::Config("content_salience must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Longest prompt, in words, that fits between BOS and EOS.
    pub fn max_words(&self) -> usize {
        self.seq_len - 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub kinds: Vec<TokenKind>,
    /// Human-readable token text (`<bos>`, the word, `<eos>`, `<pad>`).
    pub labels: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn positions_of(&self, kind: TokenKind) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn content_count(&self) -> usize {
        self.kinds.iter().filter(|&&k| k == TokenKind::Content).count()
    }
}

fn split_words(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn word_id(word: &str, vocab_size: usize) -> u32 {
    let span = (vocab_size - FIRST_WORD_ID as usize) as u64;
    FIRST_WORD_ID + (rng::fnv1a(word.as_bytes()) % span) as u32
}

pub fn tokenize(prompt: &str, params: &EncoderParams) -> Result<TokenSequence> {
    params.validate()?;
    let words = split_words(prompt);
    if words.len() > params.max_words() {
        return Err(Error::PromptTooLong {
            words: words.len(),
            max: params.max_words(),
            seq_len: params.seq_len,
        });
    }
    let n = params.seq_len;
    let mut ids = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);

    ids.push(BOS_ID);
    kinds.push(TokenKind::CtxAgg);
    labels.push("<bos>".to_string());
    for w in words {
        ids.push(word_id(&w, params.vocab_size));
        kinds.push(TokenKind::Content);
        labels.push(w);
    }
    ids.push(EOS_ID);
    kinds.push(TokenKind::CtxAgg);
    labels.push("<eos>".to_string());
    while ids.len() < n {
        ids.push(PAD_ID);
        kinds.push(TokenKind::CtxAgg);
        labels.push("<pad>".to_string());
    }
    Ok(TokenSequence { ids, kinds, labels })
}

/// Token embeddings `N × d`: the condition `c`, or `∅` for the empty prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<T> {
    pub embeddings: Matrix<T>,
}

impl<T: Scalar> Condition<T> {
    pub fn new(embeddings: Matrix<T>) -> Result<Self> {
        if !embeddings.is_finite() {
            return Err(invalid("condition embeddings must be finite"));
        }
        Ok(Self { embeddings })
    }

    pub fn seq_len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

struct Block<T> {
    wq: Matrix<T>,
    wk: Matrix<T>,
    wv: Matrix<T>,
    /// Added to every query row; per head it points along the key image of the
    /// salience direction.
    query_bias: Vec<T>,
}

/// Intermediate state of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    /// `hidden[l]` is the input to block `l`; the last entry is the output.
    pub hidden: Vec<Matrix<T>>,
    pub queries: Vec<Matrix<T>>,
    pub keys: Vec<Matrix<T>>,
    /// Scaled pre-softmax logits, per block and head.
    pub logits: Vec<Vec<Matrix<T>>>,
    pub attention: Vec<AttentionMap<T>>,
}

impl<T: Scalar> EncoderTrace<T> {
    pub fn output(&self) -> Condition<T> {
        Condition {
            embeddings: self.hidden.last().expect("trace has at least one entry").clone(),
        }
    }
}

pub struct TextEncoder<T> {
    params: EncoderParams,
    token_table: Matrix<T>,
    positions: Matrix<T>,
    blocks: Vec<Block<T>>,
    null: OnceLock<Condition<T>>,
}

impl<T: Scalar> TextEncoder<T> {
    pub fn new(params: EncoderParams) -> Result<Self> {
        params.validate()?;
        let d = params.embed_dim;
        let dh = params.head_dim();
        let inv_sqrt_d = T::lit(1.0 / (d as f64).sqrt());

        let mut r = rng::stream(params.seed, "encoder/salience", 0);
        let mut salience = rng::normal_vec::<T, _>(&mut r, d, T::one());
        let len = norm_sq(&salience).sqrt();
        salience.iter_mut().for_each(|v| *v /= len);

        let mut r = rng::stream(params.seed, "encoder/tokens", 0);
        let token_table = Matrix::from_fn(params.vocab_size, d, |_, _| rng::normal::<T, _>(&mut r) * inv_sqrt_d);
        let mut token_table = token_table;
        for id in FIRST_WORD_ID as usize..params.vocab_size {
            for (v, &u) in token_table.row_mut(id).iter_mut().zip(&salience) {
                *v += u;
            }
        }

        let mut r = rng::stream(params.seed, "encoder/positions", 0);
        let half = T::lit(0.5);
        let positions = Matrix::from_fn(params.seq_len, d, |_, _| rng::normal::<T, _>(&mut r) * inv_sqrt_d * half);

        let blocks = (0..params.num_blocks)
            .map(|l| {
                let mut r = rng::stream(params.seed, "encoder/block", l as u64);
                let mut weight = || Matrix::from_fn(d, d, |_, _| rng::normal::<T, _>(&mut r) * inv_sqrt_d);
                let wq = weight();
                let wk = weight();
                let wv = weight();
                let mut query_bias = vec![T::zero(); d];
                let scale = T::lit(params.content_salience) * T::lit((dh as f64).sqrt());
                for h in 0..params.num_heads {
                    let cols = h * dh..(h + 1) * dh;
                    // key image of the salience direction for this head
                    let image: Vec<T> = cols.clone().map(|c| (0..d).map(|i| salience[i] * wk[(i, c)]).sum()).collect();
                    let len_sq = norm_sq(&image);
                    for (slot, v) in query_bias[cols].iter_mut().zip(image) {
                        *slot = scale * v / len_sq;
                    }
                }
                Block { wq, wk, wv, query_bias }
            })
            .collect();

        Ok(Self {
            params,
            token_table,
            positions,
            blocks,
            null: OnceLock::new(),
        })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn tokenize(&self, prompt: &str) -> Result<TokenSequence> {
        tokenize(prompt, &self.params)
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() != self.params.seq_len || tokens.kinds.len() != tokens.len() {
            return Err(invalid(format!(
                "token sequence has length {} but the encoder expects {}",
                tokens.len(),
                self.params.seq_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= self.params.vocab_size) {
            return Err(invalid(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    pub fn trace(&self, tokens: &TokenSequence) -> Result<EncoderTrace<T>> {
        self.check_tokens(tokens)?;
        let n = self.params.seq_len;
        let d = self.params.embed_dim;
        let mut h = Matrix::from_fn(n, d, |i, j| {
            self.token_table[(tokens.ids[i] as usize, j)] + self.positions[(i, j)]
        });

        let mut trace = EncoderTrace {
            hidden: Vec::with_capacity(self.blocks.len() + 1),
            queries: Vec::with_capacity(self.blocks.len()),
            keys: Vec::with_capacity(self.blocks.len()),
            logits: Vec::with_capacity(self.blocks.len()),
            attention: Vec::with_capacity(self.blocks.len()),
        };
        for block in &self.blocks {
            let mut q = h.matmul(&block.wq)?;
            for i in 0..n {
                for (v, &b) in q.row_mut(i).iter_mut().zip(&block.query_bias) {
                    *v += b;
                }
            }
            let k = h.matmul(&block.wk)?;
            let v = h.matmul(&block.wv)?;
            let logits = self.head_logits(&q, &k);
            let attn = Self::softmax_heads(&logits, None)?;

            let dh = self.params.head_dim();
            let mut next = h.clone();
            for (head, a) in attn.heads().iter().enumerate() {
                let cols = head * dh..(head + 1) * dh;
                for i in 0..n {
                    for j in 0..n {
                        let w = a[(i, j)];
                        for c in cols.clone() {
                            next[(i, c)] += w * v[(j, c)];
                        }
                    }
                }
            }
            trace.hidden.push(h);
            trace.queries.push(q);
            trace.keys.push(k);
            trace.logits.push(logits);
            trace.attention.push(attn);
            h = next;
        }
        trace.hidden.push(h);
        Ok(trace)
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<Condition<T>> {
        Ok(self.trace(tokens)?.output())
    }

    /// The null condition `∅`: the encoding of the empty prompt, computed once.
    pub fn null_condition(&self) -> &Condition<T> {
        self.null.get_or_init(|| {
            let tokens = tokenize("", &self.params).expect("empty prompt always fits");
            self.encode(&tokens).expect("empty prompt encodes")
        })
    }

    /// Scaled per-head logits `q_i·k_j / √d_h`.
    fn head_logits(&self, q: &Matrix<T>, k: &Matrix<T>) -> Vec<Matrix<T>> {
        let n = q.rows();
        let dh = self.params.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        (0..self.params.num_heads)
            .map(|head| {
                let cols = head * dh..(head + 1) * dh;
                Matrix::from_fn(n, n, |i, j| dot(&q.row(i)[cols.clone()], &k.row(j)[cols.clone()]) * scale)
            })
            .collect()
    }

    /// Shifting every query by `offset` adds `offset·k_j / √d_h` to column `j`
    /// of each head's logits.
    fn key_bias(&self, k: &Matrix<T>, offset: &[T]) -> Result<Vec<Vec<T>>> {
        let d = self.params.embed_dim;
        if offset.len() != d {
            return Err(invalid(format!("query offset has length {} not {d}", offset.len())));
        }
        let dh = self.params.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        Ok((0..self.params.num_heads)
            .map(|head| {
                let cols = head * dh..(head + 1) * dh;
                (0..k.rows()).map(|j| dot(&offset[cols.clone()], &k.row(j)[cols.clone()]) * scale).collect()
            })
            .collect())
    }

    fn softmax_heads(logits: &[Matrix<T>], bias: Option<&[Vec<T>]>) -> Result<AttentionMap<T>> {
        let heads = logits
            .iter()
            .enumerate()
            .map(|(h, l)| {
                let mut a = l.clone();
                for i in 0..a.rows() {
                    let row = a.row_mut(i);
                    if let Some(b) = bias {
                        for (v, &bj) in row.iter_mut().zip(&b[h]) {
                            *v += bj;
                        }
                    }
                    softmax_in_place(row);
                }
                a
            })
            .collect();
        AttentionMap::new(heads)
    }

    /// Per-head softmax attention from queries and keys, optionally shifting
    /// every query row by `query_offset` (length `embed_dim`).
    pub fn attention_from(&self, q: &Matrix<T>, k: &Matrix<T>, query_offset: Option<&[T]>) -> Result<AttentionMap<T>> {
        let n = q.rows();
        let d = self.params.embed_dim;
        if q.cols() != d || k.cols() != d || k.rows() != n {
            return Err(invalid("query/key shapes do not match the encoder"));
        }
        let bias = query_offset.map(|o| self.key_bias(k, o)).transpose()?;
        Self::softmax_heads(&self.head_logits(q, k), bias.as_deref())
    }

    /// Self-attention of block `block` for the given trace, with an optional
    /// additive query offset. Reuses the logits stored in the trace.
    pub fn block_attention(&self, trace: &EncoderTrace<T>, block: usize, query_offset: Option<&[T]>) -> Result<AttentionMap<T>> {
        if block >= self.blocks.len() {
            return Err(invalid(format!(
                "block index {block} out of range (encoder has {} blocks)",
                self.blocks.len()
            )));
        }
        match query_offset {
            None => Ok(trace.attention[block].clone()),
            Some(o) => {
                let bias = self.key_bias(&trace.keys[block], o)?;
                Self::softmax_heads(&trace.logits[block], Some(&bias))
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Mean over token rows followed by a fixed seeded linear map to `d_c`.
pub struct Pooler<T> {
    weight: Matrix<T>,
}

impl<T: Scalar> Pooler<T> {
    pub fn new(embed_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || out_dim == 0 {
            return Err(Error::Config("pooler dimensions must be positive".into()));
        }
        let mut r = rng::stream(seed, "pooler", 0);
        let scale = T::lit(1.0 / (embed_dim as f64).sqrt());
        Ok(Self {
            weight: Matrix::from_fn(out_dim, embed_dim, |_, _| rng::normal::<T, _>(&mut r) * scale),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn pool(&self, c: &Condition<T>) -> Result<Vec<T>> {
        let rows = c.seq_len();
        if rows == 0 {
            return Err(invalid("cannot pool an empty condition"));
        }
        let mut mean = vec![T::zero(); c.dim()];
        for i in 0..rows {
            for (m, &v) in mean.iter_mut().zip(c.embeddings.row(i)) {
                *m += v;
            }
        }
        let inv = T::one() / T::lit(rows as f64);
        mean.iter_mut().for_each(|m| *m *= inv);
        self.weight.matvec(&mean)
    }
}
