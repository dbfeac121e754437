//! Adversarial embedding training: a conditional generator that maps noise
//! (plus a class label) to fake sentence embeddings, a (k+1)-class
//! discriminator that must sort real embeddings into their k classes and
//! fakes into class k, and the alternating D-then-G step tying them to the
//! encoder. Unlabeled real rows still push the discriminator to say "not
//! fake", which is what lets label-starved runs keep learning.

use crate::autodiff::{Graph, Params, Var};
use crate::data::{CyclicLoader, Example};
use crate::encoder::{self, tokenize_single, EncoderConfig, TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::rng::{domain, RunRng};
use crate::surgery::{adam_update_where, AdamConfig, AdamState};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    /// Number of real classes; the discriminator emits k+1 logits.
    pub k: usize,
    pub noise_dim: usize,
    /// Hidden layers in BOTH generator and discriminator.
    pub hidden_depth: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    /// Condition the generator on a class label (one-hot concatenated to
    /// the noise). Off reproduces the unconditional baseline.
    pub conditional: bool,
    pub dropout_p: f64,
    pub epochs: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            k: 2,
            noise_dim: 100,
            hidden_depth: 1,
            hidden_dim: 64,
            lr: 5e-5,
            conditional: true,
            dropout_p: 0.1,
            epochs: 5,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.noise_dim == 0 {
            return Err(Error::Config("noise_dim must be >= 1".into()));
        }
        if !(1..=3).contains(&self.hidden_depth) {
            return Err(Error::Config(format!(
                "hidden_depth must be 1..=3, got {}",
                self.hidden_depth
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn generator_in_dim(&self) -> usize {
        self.noise_dim + if self.conditional { self.k } else { 0 }
    }
}

/// Registers generator (`gen.`) and discriminator (`disc.`) parameters.
/// `h` is the embedding width both sides meet at.
///
/// Both stacks are plain ReLU MLPs, so hidden layers use He init and the
/// output projections LeCun init. The tiny transformer-style std used by
/// the encoder would start the generator's label offsets so close together
/// that conditioning could never break symmetry.
pub fn init_gan_params(cfg: &GanConfig, h: usize, run: &RunRng) -> Result<Params> {
    cfg.validate()?;
    let mut rng = run.stream(domain::INIT, 8, 0);
    let mut p = Params::new();
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let lecun = |fan_in: usize| (1.0 / fan_in as f64).sqrt();

    let mut dim = cfg.generator_in_dim();
    for l in 0..cfg.hidden_depth {
        p.insert(
            format!("gen.l{l}.w"),
            Tensor::randn(vec![dim, cfg.hidden_dim], he(dim), &mut rng),
        );
        p.insert(format!("gen.l{l}.b"), Tensor::zeros(vec![cfg.hidden_dim]));
        dim = cfg.hidden_dim;
    }
    p.insert(
        "gen.out.w",
        Tensor::randn(vec![cfg.hidden_dim, h], lecun(cfg.hidden_dim), &mut rng),
    );
    p.insert("gen.out.b", Tensor::zeros(vec![h]));

    let mut dim = h;
    for l in 0..cfg.hidden_depth {
        p.insert(
            format!("disc.l{l}.w"),
            Tensor::randn(vec![dim, cfg.hidden_dim], he(dim), &mut rng),
        );
        p.insert(format!("disc.l{l}.b"), Tensor::zeros(vec![cfg.hidden_dim]));
        dim = cfg.hidden_dim;
    }
    p.insert(
        "disc.out.w",
        Tensor::randn(vec![cfg.hidden_dim, cfg.k + 1], lecun(cfg.hidden_dim), &mut rng),
    );
    p.insert("disc.out.b", Tensor::zeros(vec![cfg.k + 1]));
    Ok(p)
}

/// Brings a stored parameter into the graph either as a trainable leaf or
/// as a constant. Constants are how one network sees the other during the
/// opposite update: values flow, gradients stop.
fn fetch(g: &mut Graph, params: &Params, name: &str, trainable: bool) -> Var {
    if trainable {
        g.param(params, name)
    } else {
        g.leaf(params.value(name).clone())
    }
}

fn dense(g: &mut Graph, params: &Params, x: Var, name: &str, trainable: bool) -> Result<Var> {
    let w = fetch(g, params, &format!("{name}.w"), trainable);
    let b = fetch(g, params, &format!("{name}.b"), trainable);
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Noise (optionally with a one-hot class label) to fake embeddings
/// [B x H]. With `conditional` off, labels are ignored entirely.
pub fn generator_forward(
    g: &mut Graph,
    params: &Params,
    cfg: &GanConfig,
    noise: &Tensor,
    class_labels: &[usize],
    trainable: bool,
) -> Result<Var> {
    let b = noise.shape()[0];
    if noise.shape() != [b, cfg.noise_dim] {
        return Err(Error::Contract(format!(
            "noise shape {:?}, expected [{b}, {}]",
            noise.shape(),
            cfg.noise_dim
        )));
    }
    let mut x = g.leaf(noise.clone());
    if cfg.conditional {
        if class_labels.len() != b {
            return Err(Error::Contract(format!(
                "{} class labels for a batch of {b}",
                class_labels.len()
            )));
        }
        let mut one_hot = vec![0.0; b * cfg.k];
        for (row, &c) in class_labels.iter().enumerate() {
            if c >= cfg.k {
                return Err(Error::Contract(format!(
                    "class label {c} out of range 0..{}",
                    cfg.k
                )));
            }
            one_hot[row * cfg.k + c] = 1.0;
        }
        let labels = g.leaf(Tensor::new(vec![b, cfg.k], one_hot)?);
        x = g.concat_cols(&[x, labels])?;
    }
    for l in 0..cfg.hidden_depth {
        let z = dense(g, params, x, &format!("gen.l{l}"), trainable)?;
        x = g.relu(z);
    }
    dense(g, params, x, "gen.out", trainable)
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    /// [B x (k+1)]; index k is the fake class.
    pub logits: Var,
    /// [B x hidden_dim] activation of the last hidden layer, the f(x) of
    /// the feature-matching loss. Read before dropout so the feature is a
    /// function of the input alone.
    pub feature: Var,
}

/// Embeddings [B x H] to (k+1)-way logits plus the matching feature.
pub fn discriminator_forward(
    g: &mut Graph,
    params: &Params,
    cfg: &GanConfig,
    embeddings: Var,
    trainable: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DiscriminatorOutput> {
    let mut x = embeddings;
    let mut feature = None;
    for l in 0..cfg.hidden_depth {
        let z = dense(g, params, x, &format!("disc.l{l}"), trainable)?;
        let a = g.relu(z);
        feature = Some(a);
        x = g.dropout(a, cfg.dropout_p, rng)?;
    }
    let logits = dense(g, params, x, "disc.out", trainable)?;
    Ok(DiscriminatorOutput {
        logits,
        feature: feature.expect("hidden_depth >= 1 is validated"),
    })
}

/// Scalar loss terms of one step, as plain numbers for the record stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanStepRecord {
    pub step: usize,
    #[serde(rename = "L_D_S")]
    pub l_d_s: f64,
    #[serde(rename = "L_D_U")]
    pub l_d_u: f64,
    #[serde(rename = "L_G_FM")]
    pub l_g_fm: f64,
    #[serde(rename = "L_G_U")]
    pub l_g_u: f64,
    /// True when the batch had no labeled rows and the supervised term was
    /// dropped.
    pub supervised_omitted: bool,
}

pub struct DiscriminatorLoss {
    pub total: Var,
    pub supervised: f64,
    pub unsupervised: f64,
    pub supervised_omitted: bool,
}

/// Column k of the row-softmax of `logits`, as P(fake).
fn fake_prob(g: &mut Graph, logits: Var, k: usize) -> Result<Var> {
    let rows = g.value(logits).shape()[0];
    let p = g.softmax(logits);
    g.block(p, 0, rows, k, 1)
}

/// Supervised + unsupervised discriminator loss.
///
/// Supervised: mean over LABELED real rows of -log p(true class).
/// Unsupervised: mean over ALL real rows of -log(1 - p(fake)) plus mean
/// over fake rows of -log p(fake). Log inputs are clamped at 1e-12. An
/// all-unlabeled batch drops the supervised term; a batch with no fakes
/// drops the second unsupervised term.
pub fn discriminator_loss(
    g: &mut Graph,
    real: &DiscriminatorOutput,
    fake: Option<&DiscriminatorOutput>,
    labels: &[Option<usize>],
    k: usize,
) -> Result<DiscriminatorLoss> {
    let b = g.value(real.logits).shape()[0];
    if g.value(real.logits).shape() != [b, k + 1] {
        return Err(Error::Contract(format!(
            "real logits shape {:?}, expected [{b}, {}]",
            g.value(real.logits).shape(),
            k + 1
        )));
    }
    if labels.len() != b {
        return Err(Error::Contract(format!(
            "{} labels for {b} real rows",
            labels.len()
        )));
    }

    let p_real = g.softmax(real.logits);
    let log_p = g.log(p_real);

    // Supervised term via a one-hot row selector over labeled rows.
    let mut selector = vec![0.0; b * (k + 1)];
    let mut labeled = 0usize;
    for (row, label) in labels.iter().enumerate() {
        if let Some(c) = *label {
            if c >= k {
                return Err(Error::Data {
                    row,
                    msg: format!("class label {c} out of range 0..{k}"),
                });
            }
            selector[row * (k + 1) + c] = 1.0;
            labeled += 1;
        }
    }
    let supervised = if labeled > 0 {
        let sel = g.leaf(Tensor::new(vec![b, k + 1], selector)?);
        let picked = g.mul(sel, log_p)?;
        let total = g.sum_all(picked);
        Some(g.scale(total, -1.0 / labeled as f64))
    } else {
        None
    };

    // -log(1 - p(fake)) over every real row, labeled or not.
    let p_fake_real = fake_prob(g, real.logits, k)?;
    let neg = g.scale(p_fake_real, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_nm = g.log(one_minus);
    let mean_nm = g.mean_all(log_nm);
    let mut unsupervised = g.scale(mean_nm, -1.0);

    if let Some(fake) = fake {
        if g.value(fake.logits).shape()[1] != k + 1 {
            return Err(Error::Contract(format!(
                "fake logits shape {:?}, expected {} columns",
                g.value(fake.logits).shape(),
                k + 1
            )));
        }
        let p_fake = fake_prob(g, fake.logits, k)?;
        let log_f = g.log(p_fake);
        let mean_f = g.mean_all(log_f);
        let term = g.scale(mean_f, -1.0);
        unsupervised = g.add(unsupervised, term)?;
    }

    let total = match supervised {
        Some(s) => g.add(s, unsupervised)?,
        None => unsupervised,
    };
    Ok(DiscriminatorLoss {
        total,
        supervised: supervised.map_or(0.0, |s| g.value(s).data()[0]),
        unsupervised: g.value(unsupervised).data()[0],
        supervised_omitted: labeled == 0,
    })
}

pub struct GeneratorLoss {
    pub total: Var,
    pub feature_matching: f64,
    pub unsupervised: f64,
}

/// Feature matching plus the generator's unsupervised term.
///
/// Feature matching: squared L2 distance between the mean real feature
/// (a constant here) and the mean fake feature. Unsupervised: mean over
/// fake rows of -log(1 - p(fake)), pushing fakes away from the fake class.
pub fn generator_loss(
    g: &mut Graph,
    real_feature_mean: Var,
    fake: &DiscriminatorOutput,
    k: usize,
) -> Result<GeneratorLoss> {
    let fake_mean = g.mean_axis0(fake.feature)?;
    let diff = g.sub(real_feature_mean, fake_mean)?;
    let sq = g.square(diff);
    let fm = g.sum_all(sq);

    let p_fake = fake_prob(g, fake.logits, k)?;
    let neg = g.scale(p_fake, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_nm = g.log(one_minus);
    let mean_nm = g.mean_all(log_nm);
    let unsup = g.scale(mean_nm, -1.0);

    let total = g.add(fm, unsup)?;
    Ok(GeneratorLoss {
        total,
        feature_matching: g.value(fm).data()[0],
        unsupervised: g.value(unsup).data()[0],
    })
}

/// Everything one adversarial step needs besides the parameters.
#[derive(Clone, Copy)]
pub struct GanStepInput<'a> {
    pub step: usize,
    pub batch: &'a TokenBatch,
    /// Per real row; `None` rows count only toward the unsupervised terms.
    pub labels: &'a [Option<usize>],
    pub enc_cfg: &'a EncoderConfig,
    pub cfg: &'a GanConfig,
    pub freeze_encoder: bool,
}

/// One D-then-G update.
///
/// The discriminator phase encodes the real batch (gradients reach the
/// encoder unless frozen), scores reals and constant-generator fakes, and
/// updates encoder + discriminator. The generator phase replays the same
/// noise through the trainable generator against the just-updated,
/// now-constant discriminator. The two phases use separate Adam states.
#[allow(clippy::too_many_arguments)]
pub fn gan_train_step(
    input: &GanStepInput,
    params: &mut Params,
    d_state: &mut AdamState,
    g_state: &mut AdamState,
    noise_rng: &mut ChaCha8Rng,
    label_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<GanStepRecord> {
    let cfg = input.cfg;
    cfg.validate()?;
    let b = input.batch.b;
    let noise = Tensor::randn(vec![b, cfg.noise_dim], 1.0, noise_rng);
    let fake_labels: Vec<usize> = (0..b).map(|_| label_rng.random_range(0..cfg.k)).collect();
    let non_finite = |what: &str| Error::NonFinite {
        what: format!("{what} at step {}", input.step),
    };

    // Discriminator phase: generator constant, encoder + discriminator live.
    params.zero_grad();
    let mut g = Graph::new(true);
    let encoded = encoder::encode(&mut g, params, input.batch, input.enc_cfg, dropout_rng)?;
    let cls = encoder::extract_cls(&mut g, encoded.hidden, b, input.batch.t)?;
    let fake_emb = generator_forward(&mut g, params, cfg, &noise, &fake_labels, false)?;
    let real_out = discriminator_forward(&mut g, params, cfg, cls, true, dropout_rng)?;
    let fake_out = discriminator_forward(&mut g, params, cfg, fake_emb, true, dropout_rng)?;
    let d_loss = discriminator_loss(&mut g, &real_out, Some(&fake_out), input.labels, cfg.k)?;
    let real_cls = g.value(cls).clone();
    if !g.value(d_loss.total).data()[0].is_finite() {
        return Err(non_finite("discriminator loss"));
    }
    g.backward(d_loss.total, params)?;
    let freeze = input.freeze_encoder;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    adam_update_where(params, d_state, &adam, |n| {
        n.starts_with("disc.") || (!freeze && n.starts_with("enc."))
    })?;

    // Generator phase: same noise through the trainable generator, real
    // and fake rows scored by the SAME updated-but-constant discriminator
    // so both feature means come from one forward pass.
    params.zero_grad();
    let mut g = Graph::new(true);
    let fake_emb = generator_forward(&mut g, params, cfg, &noise, &fake_labels, true)?;
    let fake_out = discriminator_forward(&mut g, params, cfg, fake_emb, false, dropout_rng)?;
    let real_emb = g.leaf(real_cls);
    let real_out = discriminator_forward(&mut g, params, cfg, real_emb, false, dropout_rng)?;
    let real_mean = g.mean_axis0(real_out.feature)?;
    let g_loss = generator_loss(&mut g, real_mean, &fake_out, cfg.k)?;
    if !g.value(g_loss.total).data()[0].is_finite() {
        return Err(non_finite("generator loss"));
    }
    g.backward(g_loss.total, params)?;
    adam_update_where(params, g_state, &adam, |n| n.starts_with("gen."))?;

    Ok(GanStepRecord {
        step: input.step,
        l_d_s: d_loss.supervised,
        l_d_u: d_loss.unsupervised,
        l_g_fm: g_loss.feature_matching,
        l_g_u: g_loss.unsupervised,
        supervised_omitted: d_loss.supervised_omitted,
    })
}

/// Draws a batch of fake embeddings with the given labels, eval mode.
pub fn sample_fakes(
    params: &Params,
    cfg: &GanConfig,
    labels: &[usize],
    noise_rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let noise = Tensor::randn(vec![labels.len(), cfg.noise_dim], 1.0, noise_rng);
    let mut g = Graph::new(false);
    let emb = generator_forward(&mut g, params, cfg, &noise, labels, false)?;
    Ok(g.value(emb).clone())
}

/// Mean over dimensions of the per-dimension variance across rows. The
/// mode-collapse check asks this to stay above 1e-6.
pub fn batch_variance(rows: &Tensor) -> f64 {
    let s = rows.shape();
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return 0.0;
    }
    let data = rows.data();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var;
    }
    total / d as f64
}

/// Mean pairwise distance between rows of different classes over mean
/// pairwise distance between rows of the same class. A label-structured
/// cloud scores above 1; an unstructured one sits near 1.
pub fn class_separation_ratio(rows: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = rows.shape();
    let (n, d) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let data = rows.data();
    let dist = |i: usize, j: usize| {
        (0..d)
            .map(|c| (data[i * d + c] - data[j * d + c]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut within, mut wn) = (0.0, 0usize);
    let (mut between, mut bn) = (0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                within += dist(i, j);
                wn += 1;
            } else {
                between += dist(i, j);
                bn += 1;
            }
        }
    }
    if wn == 0 || bn == 0 {
        return Err(Error::Contract(
            "separation ratio needs both same-class and cross-class pairs".into(),
        ));
    }
    let within = within / wn as f64;
    if within == 0.0 {
        return Err(Error::Contract("zero within-class spread".into()));
    }
    Ok(between / bn as f64 / within)
}

// ── run driver ──────────────────────────────────────────────────────

/// [CLS] embeddings of single sentences under the given parameters, eval
/// mode, chunked to bound graph size. [n x hidden].
pub fn encode_examples(
    params: &Params,
    enc_cfg: &EncoderConfig,
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Tensor> {
    if examples.is_empty() {
        return Err(Error::Contract("encoding an empty example list".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(examples.len() * enc_cfg.hidden);
    for chunk in examples.chunks(batch_size) {
        let seqs = chunk
            .iter()
            .map(|e| tokenize_single(&e.text_a, vocab, enc_cfg.max_seq_len))
            .collect::<Result<Vec<_>>>()?;
        let batch = TokenBatch::from_sequences(&seqs)?;
        let mut g = Graph::new(false);
        let mut rng = RunRng::new(0).stream(domain::DROPOUT, u64::MAX, u64::MAX);
        let encoded = encoder::encode(&mut g, params, &batch, enc_cfg, &mut rng)?;
        let cls = encoder::extract_cls(&mut g, encoded.hidden, batch.b, batch.t)?;
        rows.extend_from_slice(g.value(cls).data());
    }
    Tensor::new(vec![examples.len(), enc_cfg.hidden], rows)
}

/// The semi-supervised classifier's predictions: argmax over the k real
/// classes of the discriminator, never the fake class.
pub fn classify_real(params: &Params, cfg: &GanConfig, embeddings: &Tensor) -> Result<Vec<usize>> {
    cfg.validate()?;
    let n = embeddings.shape()[0];
    let mut g = Graph::new(false);
    let mut rng = RunRng::new(0).stream(domain::DROPOUT, u64::MAX, u64::MAX);
    let emb = g.leaf(embeddings.clone());
    let out = discriminator_forward(&mut g, params, cfg, emb, false, &mut rng)?;
    let logits = g.value(out.logits);
    let width = cfg.k + 1;
    let data = logits.data();
    Ok((0..n)
        .map(|i| {
            let row = &data[i * width..i * width + cfg.k];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

fn class_label(e: &Example, row: usize, k: usize) -> Result<Option<usize>> {
    match e.label {
        None => Ok(None),
        Some(l) => {
            if l.fract() != 0.0 || !(0.0..k as f64).contains(&l) {
                return Err(Error::Data {
                    row,
                    msg: format!("label {l} is not a class in 0..{k}"),
                });
            }
            Ok(Some(l as usize))
        }
    }
}

/// A finished adversarial run.
#[derive(Debug)]
pub struct GanTrainOutcome {
    /// Encoder, generator, and discriminator parameters after training.
    pub params: Params,
    pub steps: Vec<GanStepRecord>,
    /// Dev classification accuracy after each epoch.
    pub dev_accuracy: Vec<f64>,
}

/// Full semi-supervised run over single sentences: fresh parameters, one
/// D-then-G update per batch for `cfg.epochs` passes, dev accuracy after
/// each pass. Unlabeled train rows (masked labels) join only the
/// unsupervised terms; dev rows must all be labeled. `on_step` sees every
/// step record as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train_gan(
    train: &[Example],
    dev: &[Example],
    vocab: &Vocab,
    enc_cfg: &EncoderConfig,
    cfg: &GanConfig,
    batch_size: usize,
    freeze_encoder: bool,
    seed: u64,
    mut on_step: impl FnMut(&GanStepRecord) -> Result<()>,
) -> Result<GanTrainOutcome> {
    enc_cfg.validate()?;
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Contract("adversarial run needs a dev split".into()));
    }
    let dev_labels = dev
        .iter()
        .enumerate()
        .map(|(row, e)| {
            class_label(e, row, cfg.k)?.ok_or(Error::Data {
                row,
                msg: "unlabeled example in the dev split".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let run = RunRng::new(seed);
    let mut params = encoder::init_encoder_params(enc_cfg, &mut run.stream(domain::INIT, 0, 0))?;
    params.absorb(init_gan_params(cfg, enc_cfg.hidden, &run)?);
    let mut d_state = AdamState::new(&params);
    let mut g_state = AdamState::new(&params);

    let mut loader = CyclicLoader::new(train.to_vec(), batch_size, &run, 10)?;
    let steps_per_epoch = loader.batches_per_epoch();
    let mut steps = Vec::with_capacity(steps_per_epoch * cfg.epochs);
    let mut dev_accuracy = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let chunk = loader.next_batch();
            let seqs = chunk
                .iter()
                .map(|e| tokenize_single(&e.text_a, vocab, enc_cfg.max_seq_len))
                .collect::<Result<Vec<_>>>()?;
            let batch = TokenBatch::from_sequences(&seqs)?;
            let labels = chunk
                .iter()
                .enumerate()
                .map(|(row, e)| class_label(e, row, cfg.k))
                .collect::<Result<Vec<_>>>()?;
            let input = GanStepInput {
                step,
                batch: &batch,
                labels: &labels,
                enc_cfg,
                cfg,
                freeze_encoder,
            };
            let record = gan_train_step(
                &input,
                &mut params,
                &mut d_state,
                &mut g_state,
                &mut run.stream(domain::NOISE, step as u64, 0),
                &mut run.stream(domain::FAKE_LABELS, step as u64, 0),
                &mut run.stream(domain::DROPOUT, step as u64, 3),
            )?;
            on_step(&record)?;
            steps.push(record);
            step += 1;
        }
        let dev_cls = encode_examples(&params, enc_cfg, dev, vocab, batch_size)?;
        let preds = classify_real(&params, cfg, &dev_cls)?;
        let hits = preds
            .iter()
            .zip(&dev_labels)
            .filter(|(p, l)| p == l)
            .count();
        dev_accuracy.push(hits as f64 / dev.len() as f64);
    }

    Ok(GanTrainOutcome {
        params,
        steps,
        dev_accuracy,
    })
}
