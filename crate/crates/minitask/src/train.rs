//! Multitask fine-tuning loop. Each step draws one batch per task from
//! cyclic loaders, builds the three losses on separate graphs so the
//! per-task gradients can be captured independently, and applies a single
//! optimizer update whose combination rule (plain sum or paired projection)
//! is the experimental variable.

use crate::analysis::{self, EpochRecord, Split};
use crate::autodiff::{Graph, Params, Var};
use crate::data::{
    next_multitask_batch, steps_per_epoch, CyclicLoader, Example, MultitaskBatch, Task,
};
use crate::encoder::{
    self, encode, extract_cls, tokenize_pair, tokenize_single, EncoderConfig, TokenBatch, Vocab,
};
use crate::error::{Error, Result};
use crate::heads::{
    self, HeadConfig, StsInput, StsMode, TripletFeatures, PARAPHRASE_THRESHOLD, SENTIMENT_CLASSES,
};
use crate::rng::{domain, RunRng};
use crate::surgery::{paired_step, AdamConfig, AdamState, CombineMode, SharedLayout, TaskGrads};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which head topology and gradient combination a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// One linear layer per head, losses summed.
    Baseline,
    /// Full heads, losses summed.
    NaiveSum,
    /// Full heads; projection applied to the (sentiment, paraphrase) and
    /// (similarity, paraphrase) gradient pairs.
    PcgradPaired,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Baseline, TrainMode::NaiveSum, TrainMode::PcgradPaired];

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "naive-sum" => Ok(TrainMode::NaiveSum),
            "pcgrad-paired" => Ok(TrainMode::PcgradPaired),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected baseline, naive-sum, or pcgrad-paired"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::NaiveSum => "naive-sum",
            TrainMode::PcgradPaired => "pcgrad-paired",
        }
    }

    /// Baseline runs bypass the dense blocks entirely.
    pub fn baseline_heads(self) -> bool {
        matches!(self, TrainMode::Baseline)
    }

    pub fn combine(self) -> CombineMode {
        match self {
            TrainMode::PcgradPaired => CombineMode::PcgradPaired,
            _ => CombineMode::NaiveSum,
        }
    }
}

/// Train-split thresholds that end a run before `epochs` is exhausted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainTargets {
    pub sentiment_accuracy: f64,
    pub paraphrase_accuracy: f64,
    pub similarity_pearson: f64,
}

impl TrainTargets {
    pub fn met(&self, m: &TaskMetrics) -> bool {
        m.sentiment >= self.sentiment_accuracy
            && m.paraphrase >= self.paraphrase_accuracy
            && m.similarity >= self.similarity_pearson
    }
}

/// One evaluation pass over a split: accuracy for the classification tasks,
/// Pearson correlation for similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub sentiment: f64,
    pub paraphrase: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Scale the paraphrase gradient by 1/2 before pairing so its double
    /// appearance sums to one unit. Off by default: both pairs count it.
    pub halve_paraphrase: bool,
    pub stop_at: Option<TrainTargets>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.optimizer.lr
            )));
        }
        Ok(())
    }
}

/// Parameters plus the configs that shaped them.
#[derive(Debug)]
pub struct Model {
    pub params: Params,
    pub encoder_cfg: EncoderConfig,
    pub head_cfg: HeadConfig,
}

/// Fresh encoder and head parameters in one store.
pub fn init_model(encoder_cfg: EncoderConfig, head_cfg: HeadConfig, run: &RunRng) -> Result<Model> {
    let mut enc_rng = run.stream(domain::INIT, 0, 0);
    let mut params = encoder::init_encoder_params(&encoder_cfg, &mut enc_rng)?;
    let mut head_rng = run.stream(domain::INIT, 1, 0);
    params.absorb(heads::init_head_params(&head_cfg, encoder_cfg.hidden, &mut head_rng)?);
    Ok(Model {
        params,
        encoder_cfg,
        head_cfg,
    })
}

/// The train and dev splits of all three tasks.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub sst_train: Vec<Example>,
    pub sst_dev: Vec<Example>,
    pub para_train: Vec<Example>,
    pub para_dev: Vec<Example>,
    pub sts_train: Vec<Example>,
    pub sts_dev: Vec<Example>,
}

impl TaskData {
    pub fn validate(&self) -> Result<()> {
        let splits: [(&[Example], Task, &str); 6] = [
            (&self.sst_train, Task::Sst, "sst train"),
            (&self.sst_dev, Task::Sst, "sst dev"),
            (&self.para_train, Task::Para, "para train"),
            (&self.para_dev, Task::Para, "para dev"),
            (&self.sts_train, Task::Sts, "sts train"),
            (&self.sts_dev, Task::Sts, "sts dev"),
        ];
        for (examples, task, what) in splits {
            if examples.is_empty() {
                return Err(Error::Contract(format!("{what} split is empty")));
            }
            for (row, e) in examples.iter().enumerate() {
                if e.task != task {
                    return Err(Error::Data {
                        row,
                        msg: format!("{} example in the {what} split", e.task.name()),
                    });
                }
                if e.label.is_none() {
                    return Err(Error::Data {
                        row,
                        msg: format!("unlabeled example in the {what} split"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Every distinct sentence across all splits, for vocabulary building.
    pub fn all_texts(&self) -> Vec<&str> {
        let mut texts = Vec::new();
        for split in [
            &self.sst_train,
            &self.sst_dev,
            &self.para_train,
            &self.para_dev,
            &self.sts_train,
            &self.sts_dev,
        ] {
            for e in split {
                texts.push(e.text_a.as_str());
                if let Some(b) = &e.text_b {
                    texts.push(b.as_str());
                }
            }
        }
        texts
    }
}

fn class_labels(examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .enumerate()
        .map(|(row, e)| {
            let l = e.label.ok_or_else(|| Error::Data {
                row,
                msg: "unlabeled example in a supervised batch".into(),
            })?;
            if l.fract() != 0.0 || !(0.0..SENTIMENT_CLASSES as f64).contains(&l) {
                return Err(Error::Data {
                    row,
                    msg: format!("sentiment label {l} is not a class in 0..{SENTIMENT_CLASSES}"),
                });
            }
            Ok(l as usize)
        })
        .collect()
}

fn float_labels(examples: &[Example]) -> Result<Vec<f64>> {
    examples
        .iter()
        .enumerate()
        .map(|(row, e)| {
            e.label.ok_or_else(|| Error::Data {
                row,
                msg: "unlabeled example in a supervised batch".into(),
            })
        })
        .collect()
}

fn second_text<'e>(e: &'e Example, row: usize) -> Result<&'e str> {
    e.text_b.as_deref().ok_or_else(|| Error::Data {
        row,
        msg: format!("{} example is missing its second sentence", e.task.name()),
    })
}

/// Both sentences of each pair as two aligned single-sentence batches.
fn pair_batches(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<(TokenBatch, TokenBatch)> {
    let mut a = Vec::with_capacity(examples.len());
    let mut b = Vec::with_capacity(examples.len());
    for (row, e) in examples.iter().enumerate() {
        a.push(tokenize_single(&e.text_a, vocab, max_len)?);
        b.push(tokenize_single(second_text(e, row)?, vocab, max_len)?);
    }
    Ok((TokenBatch::from_sequences(&a)?, TokenBatch::from_sequences(&b)?))
}

fn single_batch(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<TokenBatch> {
    let seqs = examples
        .iter()
        .map(|e| tokenize_single(&e.text_a, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    TokenBatch::from_sequences(&seqs)
}

fn fused_batch(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<TokenBatch> {
    let mut seqs = Vec::with_capacity(examples.len());
    for (row, e) in examples.iter().enumerate() {
        seqs.push(tokenize_pair(&e.text_a, second_text(e, row)?, vocab, max_len)?);
    }
    TokenBatch::from_sequences(&seqs)
}

/// Tokenized similarity input matching the head's configured mode.
#[derive(Debug, Clone)]
pub enum StsBatch {
    /// Separator-joined pairs as one sequence each.
    Fused(TokenBatch),
    /// Each side encoded separately.
    Pair(TokenBatch, TokenBatch),
}

/// One step's three task batches, tokenized and labeled.
#[derive(Debug, Clone)]
pub struct StepBatches {
    pub sst: TokenBatch,
    pub sst_labels: Vec<usize>,
    pub para_a: TokenBatch,
    pub para_b: TokenBatch,
    pub para_labels: Vec<f64>,
    pub sts: StsBatch,
    pub sts_labels: Vec<f64>,
}

impl StepBatches {
    pub fn tokenize(
        batch: &MultitaskBatch,
        vocab: &Vocab,
        max_len: usize,
        sts_mode: StsMode,
    ) -> Result<StepBatches> {
        let (para_a, para_b) = pair_batches(&batch.para, vocab, max_len)?;
        let sts = match sts_mode {
            StsMode::SepFused => StsBatch::Fused(fused_batch(&batch.sts, vocab, max_len)?),
            StsMode::Triplet => {
                let (a, b) = pair_batches(&batch.sts, vocab, max_len)?;
                StsBatch::Pair(a, b)
            }
        };
        Ok(StepBatches {
            sst: single_batch(&batch.sst, vocab, max_len)?,
            sst_labels: class_labels(&batch.sst)?,
            para_a,
            para_b,
            para_labels: float_labels(&batch.para)?,
            sts,
            sts_labels: float_labels(&batch.sts)?,
        })
    }
}

fn encode_cls(
    g: &mut Graph,
    model: &Model,
    batch: &TokenBatch,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let enc = encode(g, &model.params, batch, &model.encoder_cfg, rng)?;
    extract_cls(g, enc.hidden, batch.b, batch.t)
}

/// Mean cross-entropy of the sentiment head over one batch.
pub fn sentiment_loss(
    g: &mut Graph,
    model: &Model,
    batch: &TokenBatch,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let cls = encode_cls(g, model, batch, rng)?;
    let logits = heads::sentiment_head(g, &model.params, &model.head_cfg, cls, rng)?;
    heads::cross_entropy_loss(g, logits, labels)
}

/// Mean binary cross-entropy of the paraphrase head over one batch of pairs.
pub fn paraphrase_loss(
    g: &mut Graph,
    model: &Model,
    a: &TokenBatch,
    b: &TokenBatch,
    labels: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let u = encode_cls(g, model, a, rng)?;
    let v = encode_cls(g, model, b, rng)?;
    let t = TripletFeatures::new(g, u, v)?;
    let probs = heads::paraphrase_head(g, &model.params, &model.head_cfg, &t)?;
    heads::binary_cross_entropy_loss(g, probs, labels)
}

/// Mean squared error of the similarity head over one batch of pairs.
pub fn similarity_loss(
    g: &mut Graph,
    model: &Model,
    batch: &StsBatch,
    labels: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let input = match batch {
        StsBatch::Fused(fused) => StsInput::Fused(encode_cls(g, model, fused, rng)?),
        StsBatch::Pair(a, b) => {
            let u = encode_cls(g, model, a, rng)?;
            let v = encode_cls(g, model, b, rng)?;
            StsInput::Triplet(TripletFeatures::new(g, u, v)?)
        }
    };
    let scores = heads::sts_head(g, &model.params, &model.head_cfg, input, rng)?;
    heads::mse_loss(g, scores, labels)
}

/// All three task losses on one graph, summed. The gradient-check entry
/// point; training builds each loss on its own graph instead so they can be
/// captured separately.
pub fn multitask_loss(
    g: &mut Graph,
    model: &Model,
    batches: &StepBatches,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let l_sst = sentiment_loss(g, model, &batches.sst, &batches.sst_labels, rng)?;
    let l_p = paraphrase_loss(
        g,
        model,
        &batches.para_a,
        &batches.para_b,
        &batches.para_labels,
        rng,
    )?;
    let l_sts = similarity_loss(g, model, &batches.sts, &batches.sts_labels, rng)?;
    let partial = g.add(l_sst, l_p)?;
    g.add(partial, l_sts)
}

/// The three loss values of one training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLosses {
    pub sst: f64,
    pub para: f64,
    pub sts: f64,
}

fn grads_for_task(
    model: &mut Model,
    task: Task,
    layout: &SharedLayout,
    rng: &mut ChaCha8Rng,
    build: impl FnOnce(&mut Graph, &Model, &mut ChaCha8Rng) -> Result<Var>,
) -> Result<(TaskGrads, f64)> {
    model.params.zero_grad();
    let mut g = Graph::new(true);
    let loss = build(&mut g, model, rng)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: format!("{} loss", task.name()),
        });
    }
    g.backward(loss, &mut model.params)?;
    Ok((TaskGrads::capture(task, &model.params, layout), value))
}

/// One optimizer step over one multitask batch: three forward/backward
/// passes, then a single combined update.
pub fn multitask_step(
    model: &mut Model,
    batches: &StepBatches,
    cfg: &TrainConfig,
    layout: &SharedLayout,
    state: &mut AdamState,
    run: &RunRng,
    step: u64,
) -> Result<StepLosses> {
    let mut sst_rng = run.stream(domain::DROPOUT, step, 0);
    let (g_sst, l_sst) = grads_for_task(model, Task::Sst, layout, &mut sst_rng, |g, m, r| {
        sentiment_loss(g, m, &batches.sst, &batches.sst_labels, r)
    })?;
    let mut para_rng = run.stream(domain::DROPOUT, step, 1);
    let (g_para, l_para) = grads_for_task(model, Task::Para, layout, &mut para_rng, |g, m, r| {
        paraphrase_loss(g, m, &batches.para_a, &batches.para_b, &batches.para_labels, r)
    })?;
    let mut sts_rng = run.stream(domain::DROPOUT, step, 2);
    let (g_sts, l_sts) = grads_for_task(model, Task::Sts, layout, &mut sts_rng, |g, m, r| {
        similarity_loss(g, m, &batches.sts, &batches.sts_labels, r)
    })?;

    let mut order_rng = run.stream(domain::PCGRAD_ORDER, step, 0);
    paired_step(
        &mut model.params,
        &g_sst,
        &g_para,
        &g_sts,
        cfg.mode.combine(),
        cfg.halve_paraphrase,
        state,
        &cfg.optimizer,
        layout,
        &mut order_rng,
    )?;
    Ok(StepLosses {
        sst: l_sst,
        para: l_para,
        sts: l_sts,
    })
}

/// A dropout stream for evaluation graphs. Eval graphs never sample from it;
/// the encoder takes one by signature.
fn eval_rng() -> ChaCha8Rng {
    RunRng::new(0).stream(domain::DROPOUT, u64::MAX, u64::MAX)
}

fn predict_chunk(model: &Model, chunk: &[Example], vocab: &Vocab) -> Result<Vec<f64>> {
    let max_len = model.encoder_cfg.max_seq_len;
    let mut g = Graph::new(false);
    let mut rng = eval_rng();
    let task = chunk[0].task;
    match task {
        Task::Sst => {
            let batch = single_batch(chunk, vocab, max_len)?;
            let cls = encode_cls(&mut g, model, &batch, &mut rng)?;
            let logits = heads::sentiment_head(&mut g, &model.params, &model.head_cfg, cls, &mut rng)?;
            let data = g.value(logits).data();
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let row = &data[i * SENTIMENT_CLASSES..(i + 1) * SENTIMENT_CLASSES];
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    best as f64
                })
                .collect())
        }
        Task::Para => {
            let (a, b) = pair_batches(chunk, vocab, max_len)?;
            let u = encode_cls(&mut g, model, &a, &mut rng)?;
            let v = encode_cls(&mut g, model, &b, &mut rng)?;
            let t = TripletFeatures::new(&mut g, u, v)?;
            let probs = heads::paraphrase_head(&mut g, &model.params, &model.head_cfg, &t)?;
            Ok(g.value(probs)
                .data()
                .iter()
                .map(|&p| if p >= PARAPHRASE_THRESHOLD { 1.0 } else { 0.0 })
                .collect())
        }
        Task::Sts => {
            let input = match model.head_cfg.sts_mode {
                StsMode::SepFused => {
                    let fused = fused_batch(chunk, vocab, max_len)?;
                    StsInput::Fused(encode_cls(&mut g, model, &fused, &mut rng)?)
                }
                StsMode::Triplet => {
                    let (a, b) = pair_batches(chunk, vocab, max_len)?;
                    let u = encode_cls(&mut g, model, &a, &mut rng)?;
                    let v = encode_cls(&mut g, model, &b, &mut rng)?;
                    StsInput::Triplet(TripletFeatures::new(&mut g, u, v)?)
                }
            };
            let scores = heads::sts_head(&mut g, &model.params, &model.head_cfg, input, &mut rng)?;
            Ok(g.value(scores).data().iter().map(|&s| heads::clip_sts(s)).collect())
        }
    }
}

/// Per-example predictions in label space: the argmax class for sentiment,
/// a hard 0/1 for paraphrase, the clipped score for similarity. Examples
/// must all carry the same task.
pub fn predict(
    model: &Model,
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Contract("prediction over an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let task = examples[0].task;
    if let Some(row) = examples.iter().position(|e| e.task != task) {
        return Err(Error::Data {
            row,
            msg: format!("{} example in a {} split", examples[row].task.name(), task.name()),
        });
    }
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size) {
        preds.extend(predict_chunk(model, chunk, vocab)?);
    }
    Ok(preds)
}

/// The split's headline metric: accuracy for the classification tasks,
/// Pearson correlation for similarity. Constant similarity predictions have
/// no defined correlation and score 0.
pub fn evaluate(
    model: &Model,
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<f64> {
    let preds = predict(model, examples, vocab, batch_size)?;
    let labels = float_labels(examples)?;
    match examples[0].task {
        Task::Sst | Task::Para => analysis::accuracy(&preds, &labels),
        Task::Sts => match analysis::pearson(&preds, &labels) {
            Ok(r) => Ok(r),
            Err(Error::Contract(why)) => {
                log::warn!("similarity correlation undefined ({why}); scoring 0");
                Ok(0.0)
            }
            Err(e) => Err(e),
        },
    }
}

fn split_metrics(
    model: &Model,
    sst: &[Example],
    para: &[Example],
    sts: &[Example],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<TaskMetrics> {
    Ok(TaskMetrics {
        sentiment: evaluate(model, sst, vocab, batch_size)?,
        paraphrase: evaluate(model, para, vocab, batch_size)?,
        similarity: evaluate(model, sts, vocab, batch_size)?,
    })
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Sst | Task::Para => "accuracy",
        Task::Sts => "pearson",
    }
}

fn epoch_records(epoch: usize, train: &TaskMetrics, dev: &TaskMetrics) -> Vec<EpochRecord> {
    let values = [
        (Task::Sst, train.sentiment, dev.sentiment),
        (Task::Para, train.paraphrase, dev.paraphrase),
        (Task::Sts, train.similarity, dev.similarity),
    ];
    let mut records = Vec::with_capacity(6);
    for (task, train_v, dev_v) in values {
        for (split, value) in [(Split::Train, train_v), (Split::Dev, dev_v)] {
            records.push(EpochRecord {
                epoch,
                task: task.name().to_string(),
                split,
                metric: metric_name(task).to_string(),
                value,
            });
        }
    }
    records
}

/// A finished run: every emitted record plus the last epoch's metrics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_train: TaskMetrics,
    pub final_dev: TaskMetrics,
}

/// Runs the full loop. `on_epoch` receives each epoch's six records as they
/// are produced, for streaming to disk.
pub fn train(
    model: &mut Model,
    data: &TaskData,
    vocab: &Vocab,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[EpochRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    if cfg.mode.baseline_heads() != model.head_cfg.baseline_mode {
        return Err(Error::Config(format!(
            "mode {} requires baseline_mode = {}",
            cfg.mode.name(),
            cfg.mode.baseline_heads()
        )));
    }

    let run = RunRng::new(cfg.seed);
    let mut sst = CyclicLoader::new(data.sst_train.clone(), cfg.batch_size, &run, 0)?;
    let mut para = CyclicLoader::new(data.para_train.clone(), cfg.batch_size, &run, 1)?;
    let mut sts = CyclicLoader::new(data.sts_train.clone(), cfg.batch_size, &run, 2)?;
    let steps = steps_per_epoch(&sst, &para, &sts);

    let layout = SharedLayout::of(&model.params);
    let mut state = AdamState::new(&model.params);
    let mut records = Vec::new();
    let mut step: u64 = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    let mut final_train = None;
    let mut final_dev = None;

    for epoch in 1..=cfg.epochs {
        for _ in 0..steps {
            let batch = next_multitask_batch(&mut sst, &mut para, &mut sts);
            let batches =
                StepBatches::tokenize(&batch, vocab, model.encoder_cfg.max_seq_len, model.head_cfg.sts_mode)?;
            multitask_step(model, &batches, cfg, &layout, &mut state, &run, step)?;
            step += 1;
        }

        let train_m = split_metrics(
            model,
            &data.sst_train,
            &data.para_train,
            &data.sts_train,
            vocab,
            cfg.batch_size,
        )?;
        let dev_m = split_metrics(
            model,
            &data.sst_dev,
            &data.para_dev,
            &data.sts_dev,
            vocab,
            cfg.batch_size,
        )?;
        let epoch_recs = epoch_records(epoch, &train_m, &dev_m);
        on_epoch(&epoch_recs)?;
        records.extend(epoch_recs);
        epochs_run = epoch;
        final_train = Some(train_m);
        final_dev = Some(dev_m);

        if let Some(targets) = &cfg.stop_at {
            if targets.met(&train_m) {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        records,
        epochs_run,
        stopped_early,
        final_train: final_train.expect("epochs >= 1"),
        final_dev: final_dev.expect("epochs >= 1"),
    })
}

/// Sentence-level embeddings for a labeled dump: the [CLS] state of each
/// example (pairs are separator-joined). Rows follow input order; [n x h].
pub fn cls_embeddings(
    model: &Model,
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Tensor> {
    if examples.is_empty() {
        return Err(Error::Contract("embedding dump over an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let max_len = model.encoder_cfg.max_seq_len;
    let h = model.encoder_cfg.hidden;
    let mut rows = Vec::with_capacity(examples.len() * h);
    for chunk in examples.chunks(batch_size) {
        let mut seqs = Vec::with_capacity(chunk.len());
        for (row, e) in chunk.iter().enumerate() {
            seqs.push(match &e.text_b {
                Some(b) => tokenize_pair(&e.text_a, b, vocab, max_len)?,
                None => tokenize_single(&e.text_a, vocab, max_len)?,
            });
            let _ = row;
        }
        let batch = TokenBatch::from_sequences(&seqs)?;
        let mut g = Graph::new(false);
        let mut rng = eval_rng();
        let cls = encode_cls(&mut g, model, &batch, &mut rng)?;
        rows.extend_from_slice(g.value(cls).data());
    }
    Tensor::new(vec![examples.len(), h], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check_params;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn tiny_encoder_cfg(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            max_seq_len: 24,
            dropout_p: 0.1,
        }
    }

    fn tiny_head_cfg(baseline: bool) -> HeadConfig {
        HeadConfig {
            shared_dim: 16,
            dense_dim: 16,
            dropout_p: 0.1,
            sts_mode: StsMode::SepFused,
            baseline_mode: baseline,
        }
    }

    fn tiny_data(n: usize, seed: u64) -> (TaskData, Vocab) {
        let gen = |task: Task, seed: u64| {
            generate_synthetic(
                &SyntheticConfig {
                    n_examples: n,
                    seed,
                    vocab_size: 30,
                },
                task,
            )
        };
        let data = TaskData {
            sst_train: gen(Task::Sst, seed),
            sst_dev: gen(Task::Sst, seed + 1),
            para_train: gen(Task::Para, seed),
            para_dev: gen(Task::Para, seed + 1),
            sts_train: gen(Task::Sts, seed),
            sts_dev: gen(Task::Sts, seed + 1),
        };
        let vocab = Vocab::build(data.all_texts());
        (data, vocab)
    }

    fn tiny_model(baseline: bool, seed: u64, vocab: &Vocab) -> Model {
        init_model(
            tiny_encoder_cfg(vocab.len()),
            tiny_head_cfg(baseline),
            &RunRng::new(seed),
        )
        .unwrap()
    }

    fn train_cfg(mode: TrainMode, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            epochs,
            batch_size: 8,
            seed,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            halve_paraphrase: false,
            stop_at: None,
        }
    }

    #[test]
    fn mode_parsing_and_serde() {
        for mode in TrainMode::ALL {
            assert_eq!(TrainMode::parse(mode.name()).unwrap(), mode);
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(json, format!("\"{}\"", mode.name()));
            assert_eq!(serde_json::from_str::<TrainMode>(&json).unwrap(), mode);
        }
        assert!(matches!(TrainMode::parse("adam"), Err(Error::Config(_))));
        assert_eq!(TrainMode::Baseline.combine(), CombineMode::NaiveSum);
        assert_eq!(TrainMode::NaiveSum.combine(), CombineMode::NaiveSum);
        assert_eq!(TrainMode::PcgradPaired.combine(), CombineMode::PcgradPaired);
    }

    #[test]
    fn tokenization_shapes_and_label_errors() {
        let (data, vocab) = tiny_data(12, 3);
        let batch = MultitaskBatch {
            sst: data.sst_train[..5].to_vec(),
            para: data.para_train[..4].to_vec(),
            sts: data.sts_train[..3].to_vec(),
        };
        let step = StepBatches::tokenize(&batch, &vocab, 24, StsMode::SepFused).unwrap();
        assert_eq!(step.sst.b, 5);
        assert_eq!(step.sst_labels.len(), 5);
        assert_eq!(step.para_a.b, 4);
        assert_eq!(step.para_b.b, 4);
        match &step.sts {
            StsBatch::Fused(f) => {
                assert_eq!(f.b, 3);
                // Fused pairs carry both segments.
                assert!(f.segments.iter().any(|&s| s == 1));
            }
            StsBatch::Pair(..) => panic!("fused mode produced a pair"),
        }
        match StepBatches::tokenize(&batch, &vocab, 24, StsMode::Triplet).unwrap().sts {
            StsBatch::Pair(a, b) => assert_eq!((a.b, b.b), (3, 3)),
            StsBatch::Fused(_) => panic!("triplet mode produced a fused batch"),
        }

        // A masked label inside a supervised batch names its row.
        let mut bad = batch;
        bad.sst[2].label = None;
        let err = StepBatches::tokenize(&bad, &vocab, 24, StsMode::SepFused).unwrap_err();
        assert!(matches!(err, Error::Data { row: 2, .. }), "{err}");
    }

    #[test]
    fn data_validation_catches_mixed_tasks_and_missing_labels() {
        let (mut data, _) = tiny_data(6, 4);
        assert!(data.validate().is_ok());
        data.para_dev[1].label = None;
        assert!(matches!(data.validate(), Err(Error::Data { row: 1, .. })));
        let (mut data, _) = tiny_data(6, 4);
        data.sts_train[0] = data.sst_train[0].clone();
        assert!(matches!(data.validate(), Err(Error::Data { row: 0, .. })));
    }

    #[test]
    fn combined_loss_matches_finite_differences() {
        let (data, vocab) = tiny_data(6, 7);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            hidden: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            max_seq_len: 24,
            dropout_p: 0.0,
        };
        let head_cfg = HeadConfig {
            shared_dim: 8,
            dense_dim: 8,
            dropout_p: 0.0,
            sts_mode: StsMode::SepFused,
            baseline_mode: false,
        };
        let mut model = init_model(cfg, head_cfg, &RunRng::new(9)).unwrap();
        let batch = MultitaskBatch {
            sst: data.sst_train[..3].to_vec(),
            para: data.para_train[..3].to_vec(),
            sts: data.sts_train[..3].to_vec(),
        };
        let batches = StepBatches::tokenize(&batch, &vocab, 24, StsMode::SepFused).unwrap();

        // Larger weights move ReLU pre-activations away from their kinks,
        // where central differences cannot see the true derivative. The
        // margin is seed-dependent, so search redraws for a construction
        // that keeps every kink out of the probe step's reach.
        model.params.zero_grad();
        let mut found = false;
        for tag in 60..75 {
            let mut redraw = RunRng::new(9).stream(domain::INIT, tag, 0);
            for (name, value, _) in model.params.iter_mut() {
                if name.contains("ln") || name.contains("gamma") || name.contains("beta") {
                    continue;
                }
                let std = if name.ends_with('b') { 0.1 } else { 0.4 };
                let fresh = Tensor::randn(value.shape().to_vec(), std, &mut redraw);
                value.data_mut().copy_from_slice(fresh.data());
            }
            model.params.zero_grad();
            let mut g = Graph::new(false);
            let mut rng = eval_rng();
            let loss = multitask_loss(&mut g, &model, &batches, &mut rng).unwrap();
            if g.kink_margin() > 2e-3 {
                g.backward(loss, &mut model.params).unwrap();
                found = true;
                break;
            }
        }
        assert!(found, "no redraw kept the kinks clear of the fd step");
        let report = finite_diff_check_params(
            |p| {
                let probe = Model {
                    params: p.clone(),
                    encoder_cfg: model.encoder_cfg.clone(),
                    head_cfg: model.head_cfg.clone(),
                };
                let mut g = Graph::new(false);
                let mut rng = eval_rng();
                let loss = multitask_loss(&mut g, &probe, &batches, &mut rng)?;
                Ok(g.value(loss).data()[0])
            },
            &mut model.params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel < 1e-3, "multitask fd mismatch: {report:?}");
        assert!(report.checked > report.unresolved, "{report:?}");
    }

    #[test]
    fn one_step_moves_every_trainable_parameter_group() {
        let (data, vocab) = tiny_data(8, 11);
        let mut model = tiny_model(false, 11, &vocab);
        let before: Vec<(String, Vec<f64>)> = model
            .params
            .iter()
            .map(|(n, v, _)| (n.to_string(), v.data().to_vec()))
            .collect();

        let cfg = train_cfg(TrainMode::PcgradPaired, 1, 11);
        let layout = SharedLayout::of(&model.params);
        let mut state = AdamState::new(&model.params);
        let run = RunRng::new(11);
        let batch = MultitaskBatch {
            sst: data.sst_train.clone(),
            para: data.para_train.clone(),
            sts: data.sts_train.clone(),
        };
        let batches = StepBatches::tokenize(&batch, &vocab, 24, StsMode::SepFused).unwrap();
        let losses =
            multitask_step(&mut model, &batches, &cfg, &layout, &mut state, &run, 0).unwrap();
        assert!(losses.sst.is_finite() && losses.para.is_finite() && losses.sts.is_finite());
        assert!(losses.sst > 0.0 && losses.para > 0.0 && losses.sts > 0.0);

        let mut moved = 0usize;
        for (name, old) in &before {
            if model.params.value(name).data() != old.as_slice() {
                moved += 1;
            }
        }
        // Every parameter is on some task's path, so nearly all must move;
        // dead ReLU columns can pin a few.
        assert!(
            moved * 10 >= before.len() * 8,
            "only {moved} of {} parameters moved",
            before.len()
        );
    }

    /// Summed task losses of the full train split on an eval graph: the
    /// quantity the optimizer minimizes, unlike the thresholded metrics.
    fn train_split_loss(model: &Model, data: &TaskData, vocab: &Vocab) -> f64 {
        let batch = MultitaskBatch {
            sst: data.sst_train.clone(),
            para: data.para_train.clone(),
            sts: data.sts_train.clone(),
        };
        let batches = StepBatches::tokenize(
            &batch,
            vocab,
            model.encoder_cfg.max_seq_len,
            model.head_cfg.sts_mode,
        )
        .unwrap();
        let mut g = Graph::new(false);
        let mut rng = eval_rng();
        let loss = multitask_loss(&mut g, model, &batches, &mut rng).unwrap();
        g.value(loss).data()[0]
    }

    // A short real run reduces the train objective, streams 6 records per
    // epoch, and never goes non-finite.
    #[test]
    fn short_training_run_improves_and_streams_records() {
        let (data, vocab) = tiny_data(24, 13);
        let mut model = tiny_model(false, 13, &vocab);
        let loss_before = train_split_loss(&model, &data, &vocab);

        let cfg = train_cfg(TrainMode::PcgradPaired, 6, 13);
        let mut streamed = Vec::new();
        let outcome = train(&mut model, &data, &vocab, &cfg, |recs| {
            streamed.extend_from_slice(recs);
            Ok(())
        })
        .unwrap();

        assert_eq!(outcome.epochs_run, 6);
        assert!(!outcome.stopped_early);
        assert_eq!(outcome.records.len(), 6 * 6);
        assert_eq!(streamed, outcome.records);
        for epoch in 1..=6 {
            let of_epoch: Vec<_> = outcome.records.iter().filter(|r| r.epoch == epoch).collect();
            assert_eq!(of_epoch.len(), 6);
            for task in ["sst", "para", "sts"] {
                for split in [Split::Train, Split::Dev] {
                    assert!(
                        of_epoch.iter().any(|r| r.task == task && r.split == split),
                        "missing {task} record at epoch {epoch}"
                    );
                }
            }
        }
        assert!(outcome.records.iter().all(|r| r.value.is_finite()));
        let loss_after = train_split_loss(&model, &data, &vocab);
        assert!(
            loss_after < loss_before,
            "train loss did not fall: {loss_before} -> {loss_after}"
        );
    }

    #[test]
    fn early_stop_fires_on_met_targets() {
        let (data, vocab) = tiny_data(8, 17);
        let mut model = tiny_model(false, 17, &vocab);
        let mut cfg = train_cfg(TrainMode::NaiveSum, 50, 17);
        cfg.stop_at = Some(TrainTargets {
            sentiment_accuracy: 0.0,
            paraphrase_accuracy: 0.0,
            similarity_pearson: -1.0,
        });
        let outcome = train(&mut model, &data, &vocab, &cfg, |_| Ok(())).unwrap();
        assert_eq!(outcome.epochs_run, 1);
        assert!(outcome.stopped_early);
    }

    #[test]
    fn same_seed_reproduces_records_exactly() {
        let (data, vocab) = tiny_data(10, 19);
        let cfg = train_cfg(TrainMode::PcgradPaired, 2, 19);
        let run = |_tag: u64| {
            let mut model = tiny_model(false, 19, &vocab);
            let outcome = train(&mut model, &data, &vocab, &cfg, |_| Ok(())).unwrap();
            serde_json::to_string(&outcome.records).unwrap()
        };
        assert_eq!(run(0), run(1));
    }

    #[test]
    fn mode_and_head_topology_must_agree() {
        let (data, vocab) = tiny_data(6, 23);
        let mut model = tiny_model(false, 23, &vocab);
        let cfg = train_cfg(TrainMode::Baseline, 1, 23);
        let err = train(&mut model, &data, &vocab, &cfg, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        // And the baseline topology trains end to end.
        let mut model = tiny_model(true, 23, &vocab);
        let outcome = train(&mut model, &data, &vocab, &cfg, |_| Ok(())).unwrap();
        assert_eq!(outcome.epochs_run, 1);
    }

    #[test]
    fn predictions_live_in_label_space() {
        let (data, vocab) = tiny_data(10, 29);
        let model = tiny_model(false, 29, &vocab);
        let sst = predict(&model, &data.sst_train, &vocab, 4).unwrap();
        assert_eq!(sst.len(), 10);
        assert!(sst.iter().all(|&p| p.fract() == 0.0 && (0.0..5.0).contains(&p)));
        let para = predict(&model, &data.para_train, &vocab, 4).unwrap();
        assert!(para.iter().all(|&p| p == 0.0 || p == 1.0));
        let sts = predict(&model, &data.sts_train, &vocab, 4).unwrap();
        assert!(sts.iter().all(|&p| (0.0..=5.0).contains(&p)));

        // Chunked and whole-split prediction agree, so batching does not
        // leak across examples.
        let whole = predict(&model, &data.sst_train, &vocab, 100).unwrap();
        assert_eq!(sst, whole);

        // evaluate() is the metric of these same predictions.
        let labels: Vec<f64> = data.sst_train.iter().map(|e| e.label.unwrap()).collect();
        let want = analysis::accuracy(&sst, &labels).unwrap();
        assert_eq!(evaluate(&model, &data.sst_train, &vocab, 4).unwrap(), want);

        let mut mixed = data.sst_train.clone();
        mixed.push(data.para_train[0].clone());
        assert!(matches!(
            predict(&model, &mixed, &vocab, 4),
            Err(Error::Data { row: 10, .. })
        ));
    }

    #[test]
    fn embedding_dump_shape_and_determinism() {
        let (data, vocab) = tiny_data(6, 31);
        let model = tiny_model(false, 31, &vocab);
        let mut all = data.sst_train.clone();
        all.extend(data.sts_train.iter().cloned());
        let a = cls_embeddings(&model, &all, &vocab, 4).unwrap();
        assert_eq!(a.shape(), [12, 16]);
        let b = cls_embeddings(&model, &all, &vocab, 5).unwrap();
        // Identical per-example values regardless of chunking: the encoder
        // pads per batch but masks pads out of attention.
        for i in 0..12 {
            let ra = &a.data()[i * 16..(i + 1) * 16];
            let rb = &b.data()[i * 16..(i + 1) * 16];
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12, "row {i} differs across chunkings");
            }
        }
    }
}
