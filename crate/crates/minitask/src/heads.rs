//! Task heads over the encoder's classification embeddings: 5-way sentiment,
//! binary paraphrase detection over triplet features (U, V, |U-V|), and
//! semantic-similarity regression in two variants (separator-fused pair
//! through the shared block, or a triplet trunk). Sentiment and the fused
//! similarity path consume the same shared block instance, which is what
//! makes gradient pairing across tasks meaningful.

use crate::autodiff::{Graph, Params, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SENTIMENT_CLASSES: usize = 5;
/// Similarity labels live on this closed interval.
pub const STS_MAX: f64 = 5.0;
/// Paraphrase probability threshold for accuracy computation.
pub const PARAPHRASE_THRESHOLD: f64 = 0.5;

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StsMode {
    /// One [SEP]-joined sequence; its [CLS] goes through the shared block.
    SepFused,
    /// Separate encodings; (U, V, |U-V|) goes through a dedicated trunk.
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub shared_dim: usize,
    pub dense_dim: usize,
    pub dropout_p: f64,
    pub sts_mode: StsMode,
    /// Single linear layer per head, bypassing all blocks.
    pub baseline_mode: bool,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_dim == 0 || self.dense_dim == 0 {
            return Err(Error::Config("head dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "head dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Per-example [CLS] embeddings of both sentences plus their elementwise
/// absolute difference.
#[derive(Debug, Clone, Copy)]
pub struct TripletFeatures {
    pub u: Var,
    pub v: Var,
    pub absdiff: Var,
}

impl TripletFeatures {
    /// Builds the triplet from two [b x h] embedding matrices, deriving
    /// absdiff = |u - v| on the graph so the invariant holds by
    /// construction.
    pub fn new(g: &mut Graph, u: Var, v: Var) -> Result<Self> {
        let absdiff = g.abs_diff(u, v)?;
        Ok(TripletFeatures { u, v, absdiff })
    }
}

/// The three task losses of one multitask step.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub l_sst: Var,
    pub l_p: Var,
    pub l_sts: Var,
}

fn dense(g: &mut Graph, params: &Params, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(params, w);
    let bv = g.param(params, b);
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

/// Registers every head parameter under the `head.` prefix. `hidden` is the
/// encoder output width.
pub fn init_head_params(cfg: &HeadConfig, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Params> {
    cfg.validate()?;
    let std = crate::encoder::INIT_STD;
    let (s, d) = (cfg.shared_dim, cfg.dense_dim);
    let mut p = Params::new();
    if cfg.baseline_mode {
        p.insert("head.sent.out.w", Tensor::randn(vec![hidden, SENTIMENT_CLASSES], std, rng));
        p.insert("head.sent.out.b", Tensor::zeros(vec![SENTIMENT_CLASSES]));
        p.insert("head.para.out.w", Tensor::randn(vec![3 * hidden, 1], std, rng));
        p.insert("head.para.out.b", Tensor::zeros(vec![1]));
        match cfg.sts_mode {
            StsMode::SepFused => {
                p.insert("head.sts.out.w", Tensor::randn(vec![hidden, 1], std, rng));
                p.insert("head.sts.out.b", Tensor::zeros(vec![1]));
            }
            StsMode::Triplet => {
                p.insert("head.sts.out.w", Tensor::randn(vec![3 * hidden, 1], std, rng));
                p.insert("head.sts.out.b", Tensor::zeros(vec![1]));
            }
        }
        return Ok(p);
    }

    // Shared block: dense -> ReLU -> layer_norm -> dropout -> dense -> ReLU.
    p.insert("head.shared.w1", Tensor::randn(vec![hidden, s], std, rng));
    p.insert("head.shared.b1", Tensor::zeros(vec![s]));
    p.insert("head.shared.ln.gamma", Tensor::full(vec![s], 1.0));
    p.insert("head.shared.ln.beta", Tensor::zeros(vec![s]));
    p.insert("head.shared.w2", Tensor::randn(vec![s, s], std, rng));
    p.insert("head.shared.b2", Tensor::zeros(vec![s]));

    // Sentiment: a private dense block beside the shared one, then a linear
    // projection of their concatenation.
    p.insert("head.sent.dense.w1", Tensor::randn(vec![hidden, d], std, rng));
    p.insert("head.sent.dense.b1", Tensor::zeros(vec![d]));
    p.insert("head.sent.dense.w2", Tensor::randn(vec![d, d], std, rng));
    p.insert("head.sent.dense.b2", Tensor::zeros(vec![d]));
    p.insert("head.sent.out.w", Tensor::randn(vec![s + d, SENTIMENT_CLASSES], std, rng));
    p.insert("head.sent.out.b", Tensor::zeros(vec![SENTIMENT_CLASSES]));

    // Paraphrase trunk over 3h triplet features.
    p.insert("head.para.w1", Tensor::randn(vec![3 * hidden, d], std, rng));
    p.insert("head.para.b1", Tensor::zeros(vec![d]));
    p.insert("head.para.w2", Tensor::randn(vec![d, d], std, rng));
    p.insert("head.para.b2", Tensor::zeros(vec![d]));
    p.insert("head.para.out.w", Tensor::randn(vec![d, 1], std, rng));
    p.insert("head.para.out.b", Tensor::zeros(vec![1]));

    match cfg.sts_mode {
        StsMode::SepFused => {
            // Consumes the shared block's output.
            p.insert("head.sts.dense.w", Tensor::randn(vec![s, d], std, rng));
            p.insert("head.sts.dense.b", Tensor::zeros(vec![d]));
            p.insert("head.sts.out.w", Tensor::randn(vec![d, 1], std, rng));
            p.insert("head.sts.out.b", Tensor::zeros(vec![1]));
        }
        StsMode::Triplet => {
            p.insert("head.sts3.w1", Tensor::randn(vec![3 * hidden, d], std, rng));
            p.insert("head.sts3.b1", Tensor::zeros(vec![d]));
            p.insert("head.sts3.w2", Tensor::randn(vec![d, d], std, rng));
            p.insert("head.sts3.b2", Tensor::zeros(vec![d]));
            p.insert("head.sts3.out.w", Tensor::randn(vec![d, 1], std, rng));
            p.insert("head.sts3.out.b", Tensor::zeros(vec![1]));
        }
    }
    Ok(p)
}

/// dense -> ReLU -> layer_norm -> dropout -> dense -> ReLU. The single block
/// instance serving both sentiment and fused similarity.
pub fn shared_block(
    g: &mut Graph,
    params: &Params,
    cfg: &HeadConfig,
    cls: Var,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let h1 = dense(g, params, cls, "head.shared.w1", "head.shared.b1")?;
    let a1 = g.relu(h1);
    let gamma = g.param(params, "head.shared.ln.gamma");
    let beta = g.param(params, "head.shared.ln.beta");
    let n1 = g.layer_norm(a1, gamma, beta, LN_EPS)?;
    let d1 = g.dropout(n1, cfg.dropout_p, rng)?;
    let h2 = dense(g, params, d1, "head.shared.w2", "head.shared.b2")?;
    Ok(g.relu(h2))
}

/// Two ReLU dense layers under a name prefix (`{prefix}.w1` etc.).
fn dense_block(g: &mut Graph, params: &Params, prefix: &str, x: Var) -> Result<Var> {
    let h1 = dense(g, params, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let a1 = g.relu(h1);
    let h2 = dense(g, params, a1, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
    Ok(g.relu(h2))
}

/// 5-class sentiment logits from a [b x h] classification embedding.
pub fn sentiment_head(
    g: &mut Graph,
    params: &Params,
    cfg: &HeadConfig,
    cls: Var,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if cfg.baseline_mode {
        return dense(g, params, cls, "head.sent.out.w", "head.sent.out.b");
    }
    let shared = shared_block(g, params, cfg, cls, rng)?;
    let private = dense_block(g, params, "head.sent.dense", cls)?;
    let cat = g.concat_cols(&[shared, private])?;
    dense(g, params, cat, "head.sent.out.w", "head.sent.out.b")
}

/// Paraphrase probability in (0,1) from triplet features, shape [b].
pub fn paraphrase_head(
    g: &mut Graph,
    params: &Params,
    cfg: &HeadConfig,
    t: &TripletFeatures,
) -> Result<Var> {
    let cat = g.concat_cols(&[t.u, t.v, t.absdiff])?;
    let scores = if cfg.baseline_mode {
        dense(g, params, cat, "head.para.out.w", "head.para.out.b")?
    } else {
        let trunk = dense_block(g, params, "head.para", cat)?;
        dense(g, params, trunk, "head.para.out.w", "head.para.out.b")?
    };
    let b = g.value(scores).shape()[0];
    let flat = g.reshape(scores, vec![b])?;
    Ok(g.sigmoid(flat))
}

/// Input to the similarity head, matching the configured mode.
#[derive(Debug, Clone, Copy)]
pub enum StsInput {
    /// [CLS] of the separator-joined pair, [b x h].
    Fused(Var),
    Triplet(TripletFeatures),
}

/// Unbounded similarity scores, shape [b]. Clip to [0, STS_MAX] only when
/// reporting predictions, never inside the loss.
pub fn sts_head(
    g: &mut Graph,
    params: &Params,
    cfg: &HeadConfig,
    input: StsInput,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let scores = match (cfg.sts_mode, input) {
        (StsMode::SepFused, StsInput::Fused(cls)) => {
            if cfg.baseline_mode {
                dense(g, params, cls, "head.sts.out.w", "head.sts.out.b")?
            } else {
                let shared = shared_block(g, params, cfg, cls, rng)?;
                let h = dense(g, params, shared, "head.sts.dense.w", "head.sts.dense.b")?;
                let a = g.relu(h);
                dense(g, params, a, "head.sts.out.w", "head.sts.out.b")?
            }
        }
        (StsMode::Triplet, StsInput::Triplet(t)) => {
            let cat = g.concat_cols(&[t.u, t.v, t.absdiff])?;
            if cfg.baseline_mode {
                dense(g, params, cat, "head.sts.out.w", "head.sts.out.b")?
            } else {
                let trunk = dense_block(g, params, "head.sts3", cat)?;
                dense(g, params, trunk, "head.sts3.out.w", "head.sts3.out.b")?
            }
        }
        (mode, _) => {
            return Err(Error::Contract(format!(
                "similarity input does not match mode {mode:?}"
            )))
        }
    };
    let b = g.value(scores).shape()[0];
    g.reshape(scores, vec![b])
}

/// Clamp a raw similarity score into the label range for reporting.
pub fn clip_sts(score: f64) -> f64 {
    score.clamp(0.0, STS_MAX)
}

/// Mean categorical cross-entropy of 5-class logits against labels in 0..=4.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != SENTIMENT_CLASSES {
        return Err(Error::Contract(format!(
            "cross entropy over {shape:?} with {} labels",
            labels.len()
        )));
    }
    let mut onehot = vec![0.0; labels.len() * SENTIMENT_CLASSES];
    for (row, &y) in labels.iter().enumerate() {
        if y >= SENTIMENT_CLASSES {
            return Err(Error::Data {
                row,
                msg: format!("sentiment label {y} outside 0..{SENTIMENT_CLASSES}"),
            });
        }
        onehot[row * SENTIMENT_CLASSES + y] = 1.0;
    }
    let probs = g.softmax(logits);
    let logp = g.log(probs);
    let mask = g.leaf(Tensor::new(vec![labels.len(), SENTIMENT_CLASSES], onehot)?);
    let picked = g.mul(logp, mask)?;
    let rows = g.sum_last(picked);
    let mean = g.mean_all(rows);
    Ok(g.scale(mean, -1.0))
}

/// Mean binary cross-entropy of probabilities in (0,1) against 0/1 labels.
pub fn binary_cross_entropy_loss(g: &mut Graph, probs: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    if shape != [labels.len()] {
        return Err(Error::Contract(format!(
            "binary cross entropy over {shape:?} with {} labels",
            labels.len()
        )));
    }
    for (row, &y) in labels.iter().enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::Data {
                row,
                msg: format!("paraphrase label {y} is not 0 or 1"),
            });
        }
    }
    let y = g.leaf(Tensor::new(vec![labels.len()], labels.to_vec())?);
    let log_p = g.log(probs);
    let pos = g.mul(y, log_p)?;
    let neg_p = g.scale(probs, -1.0);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let log_1mp = g.log(one_minus_p);
    let neg_y = g.scale(y, -1.0);
    let one_minus_y = g.add_scalar(neg_y, 1.0);
    let neg = g.mul(one_minus_y, log_1mp)?;
    let total = g.add(pos, neg)?;
    let mean = g.mean_all(total);
    Ok(g.scale(mean, -1.0))
}

/// Mean squared error of scores against labels in [0, STS_MAX].
pub fn mse_loss(g: &mut Graph, scores: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.value(scores).shape().to_vec();
    if shape != [labels.len()] {
        return Err(Error::Contract(format!(
            "mse over {shape:?} with {} labels",
            labels.len()
        )));
    }
    for (row, &y) in labels.iter().enumerate() {
        if !(0.0..=STS_MAX).contains(&y) {
            return Err(Error::Data {
                row,
                msg: format!("similarity label {y} outside [0, {STS_MAX}]"),
            });
        }
    }
    let y = g.leaf(Tensor::new(vec![labels.len()], labels.to_vec())?);
    let diff = g.sub(scores, y)?;
    let sq = g.square(diff);
    Ok(g.mean_all(sq))
}
