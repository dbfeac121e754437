//! Miniature BERT-style encoder: whitespace tokenizer over a corpus-built
//! vocabulary, learned token/position/segment embeddings, and a stack of
//! self-attention blocks with residual layer norm. Sentence pairs are fused
//! into one sequence around separator tokens; classification reads the
//! position-0 embedding.

use crate::autodiff::{Graph, Params, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
/// Ids below this are reserved; file-loaded tokens start here.
pub const RESERVED: usize = 4;

/// Layer-norm variance floor inside encoder blocks.
pub const LN_EPS: f64 = 1e-12;

/// Additive score for masked (pad) attention keys. Large enough that the
/// post-softmax weight underflows to exactly 0.
const MASKED_SCORE: f64 = -1e9;

/// Token to id mapping with four fixed reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from non-reserved tokens; ids are assigned in iteration order
    /// starting at [`RESERVED`]. Duplicates are rejected to keep the map
    /// injective.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, tok) in tokens.into_iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data {
                    row: i,
                    msg: format!("invalid vocabulary token {tok:?}"),
                });
            }
            if v.index.insert(tok.clone(), RESERVED + v.tokens.len()).is_some() {
                return Err(Error::Data {
                    row: i,
                    msg: format!("duplicate vocabulary token {tok:?}"),
                });
            }
            v.tokens.push(tok);
        }
        Ok(v)
    }

    /// Collects the distinct lowercased whitespace tokens of `texts`, sorted
    /// for determinism.
    pub fn build(texts: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut set: Vec<String> = texts
            .into_iter()
            .flat_map(|t| {
                t.as_ref()
                    .split_whitespace()
                    .map(|w| w.to_lowercase())
                    .collect::<Vec<_>>()
            })
            .collect();
        set.sort();
        set.dedup();
        Vocab::from_tokens(set).expect("sorted deduped tokens are valid")
    }

    /// One token per line; line number = id - RESERVED.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut tokens = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            tokens.push(line.map_err(|e| Error::io(path.display().to_string(), e))?);
        }
        Vocab::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for tok in &self.tokens {
            writeln!(file, "{tok}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    /// Total id count including the 4 reserved ids.
    pub fn len(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The id of a (lowercased) word, or UNK.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn words(&self) -> &[String] {
        &self.tokens
    }
}

fn word_ids(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()))
        .collect()
}

/// [CLS] ids [SEP], truncated so [SEP] is always the last token.
pub fn tokenize_single(text: &str, vocab: &Vocab, max_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be >= 3, got {max_len}")));
    }
    let mut ids = word_ids(text, vocab);
    ids.truncate(max_len - 2);
    let mut seq = Vec::with_capacity(ids.len() + 2);
    seq.push(CLS);
    seq.extend(ids);
    seq.push(SEP);
    let segments = vec![0; seq.len()];
    Ok((seq, segments))
}

/// [CLS] ids(a) [SEP] ids(b) [SEP]; segment 0 through the first [SEP], 1
/// afterward. On overflow the longer remaining side loses tokens one at a
/// time (ties take from the first side).
pub fn tokenize_pair(
    a: &str,
    b: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if max_len < 5 {
        return Err(Error::Config(format!("pair max_len must be >= 5, got {max_len}")));
    }
    let mut ia = word_ids(a, vocab);
    let mut ib = word_ids(b, vocab);
    let budget = max_len - 3;
    while ia.len() + ib.len() > budget {
        if ia.len() >= ib.len() {
            ia.pop();
        } else {
            ib.pop();
        }
    }
    let mut seq = Vec::with_capacity(ia.len() + ib.len() + 3);
    let mut segments = Vec::with_capacity(seq.capacity());
    seq.push(CLS);
    seq.extend(&ia);
    seq.push(SEP);
    segments.resize(seq.len(), 0);
    seq.extend(&ib);
    seq.push(SEP);
    segments.resize(seq.len(), 1);
    Ok((seq, segments))
}

/// A padded batch of token sequences.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// [b * t] row-major token ids; pads are [`PAD`].
    pub ids: Vec<usize>,
    /// [b * t] segment ids (0/1).
    pub segments: Vec<usize>,
    /// [b * t]; 1.0 exactly on non-pad positions.
    pub mask: Vec<f64>,
    pub b: usize,
    pub t: usize,
    /// Task labels when the batch carries them (classification targets are
    /// stored as their numeric value).
    pub labels: Option<Vec<f64>>,
}

impl TokenBatch {
    /// Pads sequences to the longest length in the batch.
    pub fn from_sequences(seqs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty token batch".into()));
        }
        let t = seqs.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
        let b = seqs.len();
        let mut ids = vec![PAD; b * t];
        let mut segments = vec![0usize; b * t];
        let mut mask = vec![0.0; b * t];
        for (row, (seq, seg)) in seqs.iter().enumerate() {
            if seq.len() != seg.len() {
                return Err(Error::Data {
                    row,
                    msg: "ids and segments length mismatch".into(),
                });
            }
            for (j, (&id, &s)) in seq.iter().zip(seg).enumerate() {
                ids[row * t + j] = id;
                segments[row * t + j] = s;
                mask[row * t + j] = 1.0;
            }
        }
        Ok(TokenBatch {
            ids,
            segments,
            mask,
            b,
            t,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != self.b {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {}",
                labels.len(),
                self.b
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config(format!(
                "max_seq_len must be >= 3, got {}",
                self.max_seq_len
            )));
        }
        if self.vocab_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {RESERVED} reserved ids"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Standard deviation for weight and embedding init.
pub const INIT_STD: f64 = 0.02;

/// Registers all encoder parameters under the `enc.` prefix. Matrices and
/// embeddings are normal(0, 0.02), biases zero, layer-norm gamma one.
pub fn init_encoder_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Params> {
    cfg.validate()?;
    let h = cfg.hidden;
    let mut p = Params::new();
    p.insert("enc.tok_emb", Tensor::randn(vec![cfg.vocab_size, h], INIT_STD, rng));
    p.insert("enc.pos_emb", Tensor::randn(vec![cfg.max_seq_len, h], INIT_STD, rng));
    p.insert("enc.seg_emb", Tensor::randn(vec![2, h], INIT_STD, rng));
    for l in 0..cfg.layers {
        for mat in ["wq", "wk", "wv", "wo"] {
            p.insert(
                format!("enc.l{l}.attn.{mat}"),
                Tensor::randn(vec![h, h], INIT_STD, rng),
            );
            p.insert(
                format!("enc.l{l}.attn.{}", mat.replace('w', "b")),
                Tensor::zeros(vec![h]),
            );
        }
        p.insert(format!("enc.l{l}.ln1.gamma"), Tensor::full(vec![h], 1.0));
        p.insert(format!("enc.l{l}.ln1.beta"), Tensor::zeros(vec![h]));
        p.insert(
            format!("enc.l{l}.ff.w1"),
            Tensor::randn(vec![h, cfg.ff_dim], INIT_STD, rng),
        );
        p.insert(format!("enc.l{l}.ff.b1"), Tensor::zeros(vec![cfg.ff_dim]));
        p.insert(
            format!("enc.l{l}.ff.w2"),
            Tensor::randn(vec![cfg.ff_dim, h], INIT_STD, rng),
        );
        p.insert(format!("enc.l{l}.ff.b2"), Tensor::zeros(vec![h]));
        p.insert(format!("enc.l{l}.ln2.gamma"), Tensor::full(vec![h], 1.0));
        p.insert(format!("enc.l{l}.ln2.beta"), Tensor::zeros(vec![h]));
    }
    Ok(p)
}

/// Encoder output: hidden states plus the raw attention distributions for
/// inspection (indexed [layer][example * heads + head], each [t x t]).
#[derive(Debug)]
pub struct Encoded {
    /// [b*t x hidden] row-major hidden states.
    pub hidden: Var,
    pub attention: Vec<Vec<Var>>,
}

fn dense(g: &mut Graph, x: Var, params: &Params, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(params, w);
    let bv = g.param(params, b);
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

/// Runs the block stack over a batch. Pure in (params, batch, rng): dropout
/// is the only stochastic element and only in training graphs.
pub fn encode(
    g: &mut Graph,
    params: &Params,
    batch: &TokenBatch,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Encoded> {
    cfg.validate()?;
    let (b, t, h) = (batch.b, batch.t, cfg.hidden);
    if t > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "batch length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    for (row, &id) in batch.ids.iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(Error::Data {
                row: row / t,
                msg: format!("token id {id} out of range {}", cfg.vocab_size),
            });
        }
    }

    let tok_emb = g.param(params, "enc.tok_emb");
    let pos_emb = g.param(params, "enc.pos_emb");
    let seg_emb = g.param(params, "enc.seg_emb");
    let tok = g.embedding(tok_emb, &batch.ids)?;
    let pos_ids: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let pos = g.embedding(pos_emb, &pos_ids)?;
    let seg = g.embedding(seg_emb, &batch.segments)?;
    let te = g.add(tok, pos)?;
    let mut x = g.add(te, seg)?;

    // One additive [t x t] mask per example: every query row sees the same
    // key mask, pads get MASKED_SCORE so their softmax weight is exactly 0.
    let mut key_masks = Vec::with_capacity(b);
    for eb in 0..b {
        let mut m = vec![0.0; t * t];
        for j in 0..t {
            if batch.mask[eb * t + j] == 0.0 {
                for q in 0..t {
                    m[q * t + j] = MASKED_SCORE;
                }
            }
        }
        key_masks.push(g.leaf(Tensor::new(vec![t, t], m)?));
    }

    let dh = h / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(cfg.layers);

    for l in 0..cfg.layers {
        let q_all = dense(g, x, params, &format!("enc.l{l}.attn.wq"), &format!("enc.l{l}.attn.bq"))?;
        let k_all = dense(g, x, params, &format!("enc.l{l}.attn.wk"), &format!("enc.l{l}.attn.bk"))?;
        let v_all = dense(g, x, params, &format!("enc.l{l}.attn.wv"), &format!("enc.l{l}.attn.bv"))?;

        let mut layer_attn = Vec::with_capacity(b * cfg.heads);
        let mut ctx_rows = Vec::with_capacity(b);
        for eb in 0..b {
            let mut head_ctx = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let q = g.block(q_all, eb * t, t, head * dh, dh)?;
                let k = g.block(k_all, eb * t, t, head * dh, dh)?;
                let v = g.block(v_all, eb * t, t, head * dh, dh)?;
                let scores = g.matmul_nt(q, k)?;
                let scaled = g.scale(scores, scale);
                let masked = g.add(scaled, key_masks[eb])?;
                let attn = g.softmax(masked);
                layer_attn.push(attn);
                head_ctx.push(g.matmul(attn, v)?);
            }
            ctx_rows.push(g.concat_cols(&head_ctx)?);
        }
        let ctx = g.concat_rows(&ctx_rows)?;
        let proj = dense(g, ctx, params, &format!("enc.l{l}.attn.wo"), &format!("enc.l{l}.attn.bo"))?;
        let proj = g.dropout(proj, cfg.dropout_p, rng)?;
        let res1 = g.add(x, proj)?;
        let g1 = g.param(params, &format!("enc.l{l}.ln1.gamma"));
        let b1 = g.param(params, &format!("enc.l{l}.ln1.beta"));
        let x1 = g.layer_norm(res1, g1, b1, LN_EPS)?;

        let ff1 = dense(g, x1, params, &format!("enc.l{l}.ff.w1"), &format!("enc.l{l}.ff.b1"))?;
        let act = g.gelu(ff1);
        let ff2 = dense(g, act, params, &format!("enc.l{l}.ff.w2"), &format!("enc.l{l}.ff.b2"))?;
        let ff2 = g.dropout(ff2, cfg.dropout_p, rng)?;
        let res2 = g.add(x1, ff2)?;
        let g2 = g.param(params, &format!("enc.l{l}.ln2.gamma"));
        let b2 = g.param(params, &format!("enc.l{l}.ln2.beta"));
        x = g.layer_norm(res2, g2, b2, LN_EPS)?;
        attention.push(layer_attn);
    }

    Ok(Encoded {
        hidden: x,
        attention,
    })
}

/// Position-0 rows of [b*t x h] hidden states: the classification embedding
/// of each example.
pub fn extract_cls(g: &mut Graph, hidden: Var, b: usize, t: usize) -> Result<Var> {
    let h = g.value(hidden).last_dim();
    if g.value(hidden).shape() != [b * t, h] {
        return Err(Error::Contract(format!(
            "hidden shape {:?} does not match batch {b} x {t}",
            g.value(hidden).shape()
        )));
    }
    let mut rows = Vec::with_capacity(b);
    for eb in 0..b {
        rows.push(g.block(hidden, eb * t, 1, 0, h)?);
    }
    g.concat_rows(&rows)
}
