//! One function per subcommand. Every run writes its resolved config into
//! the run directory first, then streams metrics as JSONL and leaves a
//! checkpoint or CSV behind, so a run can be audited or repeated from its
//! own artifacts.

use crate::config::RunConfig;
use minitask::analysis::{run_sweep, EpochRecord, Split};
use minitask::checkpoint::{load_checkpoint, save_checkpoint, save_gan_checkpoint};
use minitask::data::{
    generate_synthetic, load_tsv, mask_labels, write_tsv, Example, SyntheticConfig, Task,
};
use minitask::encoder::Vocab;
use minitask::gan::{encode_examples, sample_fakes, train_gan};
use minitask::report::{
    read_jsonl, write_embedding_csv, write_jsonl, write_p_matrix_csv, EmbeddingPoint,
    EmbeddingRecord, JsonlWriter,
};
use minitask::rng::domain;
use minitask::train::{cls_embeddings, evaluate, init_model, train, TaskData};
use minitask::{Error, Result, RunRng, Tensor};
use rand::Rng;
use std::path::{Path, PathBuf};

fn split_path(dir: &Path, task: Task, split: &str) -> PathBuf {
    dir.join(format!("{}_{split}.tsv", task.name()))
}

fn load_task_data(dir: &Path) -> Result<TaskData> {
    Ok(TaskData {
        sst_train: load_tsv(&split_path(dir, Task::Sst, "train"), Task::Sst)?,
        sst_dev: load_tsv(&split_path(dir, Task::Sst, "dev"), Task::Sst)?,
        para_train: load_tsv(&split_path(dir, Task::Para, "train"), Task::Para)?,
        para_dev: load_tsv(&split_path(dir, Task::Para, "dev"), Task::Para)?,
        sts_train: load_tsv(&split_path(dir, Task::Sts, "train"), Task::Sts)?,
        sts_dev: load_tsv(&split_path(dir, Task::Sts, "dev"), Task::Sts)?,
    })
}

fn label_string(label: Option<f64>) -> String {
    match label {
        None => "-".to_string(),
        Some(v) if v.fract() == 0.0 => format!("{}", v as i64),
        Some(v) => format!("{v}"),
    }
}

fn embedding_records(
    source: &str,
    labels: impl Iterator<Item = Option<f64>>,
    matrix: &Tensor,
) -> Vec<EmbeddingRecord> {
    let width = matrix.last_dim();
    labels
        .enumerate()
        .map(|(i, label)| EmbeddingRecord {
            source: source.to_string(),
            label: label_string(label),
            values: matrix.data()[i * width..(i + 1) * width].to_vec(),
        })
        .collect()
}

/// Writes the six synthetic TSV splits into the data directory.
pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.write_snapshot()?;
    std::fs::create_dir_all(&cfg.data.dir)
        .map_err(|e| Error::io(cfg.data.dir.display().to_string(), e))?;
    let run = RunRng::new(cfg.seed);
    for (t, task) in Task::ALL.into_iter().enumerate() {
        for (s, (split, n)) in [
            ("train", cfg.data.train_per_task),
            ("dev", cfg.data.dev_per_task),
        ]
        .into_iter()
        .enumerate()
        {
            let synth = SyntheticConfig {
                n_examples: n,
                seed: run.stream(domain::CORPUS, t as u64, s as u64).random(),
                vocab_size: cfg.data.filler_vocab,
            };
            let examples = generate_synthetic(&synth, task);
            let path = split_path(&cfg.data.dir, task, split);
            write_tsv(&path, task, &examples)?;
            println!("wrote {} ({} examples)", path.display(), examples.len());
        }
    }
    Ok(())
}

/// Fine-tunes the encoder and all three heads; leaves per-epoch metrics, a
/// checkpoint, and a sentiment dev-set embedding dump in the run directory.
pub fn train_multitask(cfg: &RunConfig) -> Result<()> {
    cfg.write_snapshot()?;
    let data = load_task_data(&cfg.data.dir)?;
    let vocab = Vocab::build(data.all_texts());
    let mut model = init_model(
        cfg.encoder_cfg(vocab.len()),
        cfg.head_cfg(cfg.train.mode.baseline_heads()),
        &RunRng::new(cfg.seed),
    )?;

    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics = JsonlWriter::create(&metrics_path)?;
    let outcome = train(&mut model, &data, &vocab, &cfg.train_cfg(), |records| {
        for record in records {
            println!(
                "epoch {:>3}  {:<4} {:?} {} = {:.4}",
                record.epoch, record.task, record.split, record.metric, record.value
            );
            metrics.push(record)?;
        }
        Ok(())
    })?;
    metrics.finish()?;

    let ckpt_path = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &model, &vocab)?;

    let emb = cls_embeddings(&model, &data.sst_dev, &vocab, cfg.optimizer.batch_size)?;
    let emb_path = cfg.out_dir.join("embeddings.jsonl");
    let rows = embedding_records("sst", data.sst_dev.iter().map(|e| e.label), &emb);
    write_jsonl(&emb_path, &rows)?;

    println!(
        "done after {} epochs: dev sentiment {:.3}, paraphrase {:.3}, similarity {:.3}",
        outcome.epochs_run,
        outcome.final_dev.sentiment,
        outcome.final_dev.paraphrase,
        outcome.final_dev.similarity,
    );
    println!("metrics -> {}", metrics_path.display());
    println!("checkpoint -> {}", ckpt_path.display());
    println!("embeddings -> {}", emb_path.display());
    Ok(())
}

fn load_sentiment_splits(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>, Vocab)> {
    let train = load_tsv(&split_path(&cfg.data.dir, Task::Sst, "train"), Task::Sst)?;
    let dev = load_tsv(&split_path(&cfg.data.dir, Task::Sst, "dev"), Task::Sst)?;
    let vocab = Vocab::build(train.iter().chain(&dev).map(|e| e.text_a.as_str()));
    Ok((train, dev, vocab))
}

/// Adversarial run on the sentiment data: k real classes plus a fake class,
/// optionally with part of the training labels masked away first.
pub fn train_adversarial(cfg: &RunConfig) -> Result<()> {
    cfg.write_snapshot()?;
    let (mut train_ex, dev, vocab) = load_sentiment_splits(cfg)?;
    if cfg.gan.lambda > 0.0 {
        let masked = mask_labels(&mut train_ex, cfg.gan.lambda, cfg.seed)?;
        println!(
            "masked {masked} of {} training labels (lambda {})",
            train_ex.len(),
            cfg.gan.lambda
        );
    }
    let enc_cfg = cfg.encoder_cfg(vocab.len());
    let gan_cfg = cfg.gan_cfg();

    let steps_path = cfg.out_dir.join("gan_steps.jsonl");
    let mut steps = JsonlWriter::create(&steps_path)?;
    let outcome = train_gan(
        &train_ex,
        &dev,
        &vocab,
        &enc_cfg,
        &gan_cfg,
        cfg.optimizer.batch_size,
        cfg.gan.freeze_encoder,
        cfg.seed,
        |record| steps.push(record),
    )?;
    steps.finish()?;

    let records: Vec<EpochRecord> = outcome
        .dev_accuracy
        .iter()
        .enumerate()
        .map(|(i, &value)| EpochRecord {
            epoch: i + 1,
            task: Task::Sst.name().to_string(),
            split: Split::Dev,
            metric: "accuracy".to_string(),
            value,
        })
        .collect();
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    write_jsonl(&metrics_path, &records)?;

    let ckpt_path = cfg.out_dir.join("gan.ckpt");
    save_gan_checkpoint(&ckpt_path, &outcome.params, &enc_cfg, &gan_cfg, &vocab)?;

    // Real dev embeddings next to an equal batch of generated ones, labeled
    // with the class each fake was conditioned on.
    let real = encode_examples(&outcome.params, &enc_cfg, &dev, &vocab, cfg.optimizer.batch_size)?;
    let mut rows = embedding_records("real", dev.iter().map(|e| e.label), &real);
    let wanted: Vec<usize> = (0..dev.len()).map(|i| i % gan_cfg.k).collect();
    let mut noise_rng = RunRng::new(cfg.seed).stream(domain::NOISE, u64::MAX, 0);
    let fake = sample_fakes(&outcome.params, &gan_cfg, &wanted, &mut noise_rng)?;
    rows.extend(embedding_records(
        "generated",
        wanted.iter().map(|&c| Some(c as f64)),
        &fake,
    ));
    let emb_path = cfg.out_dir.join("embeddings.jsonl");
    write_jsonl(&emb_path, &rows)?;

    for (i, acc) in outcome.dev_accuracy.iter().enumerate() {
        println!("epoch {:>3}  dev accuracy {acc:.4}", i + 1);
    }
    println!("steps -> {}", steps_path.display());
    println!("metrics -> {}", metrics_path.display());
    println!("checkpoint -> {}", ckpt_path.display());
    println!("embeddings -> {}", emb_path.display());
    Ok(())
}

/// Masking-fraction sensitivity sweep: one adversarial run per (lambda,
/// seed), aggregated accuracies, and the significance matrix of the drops.
pub fn sweep(cfg: &RunConfig) -> Result<()> {
    cfg.write_snapshot()?;
    let (train_ex, dev, vocab) = load_sentiment_splits(cfg)?;
    let enc_cfg = cfg.encoder_cfg(vocab.len());
    let gan_cfg = cfg.gan_cfg();
    let batch = cfg.optimizer.batch_size;

    let runner = |lambda: f64, seed: u64| -> Result<Vec<f64>> {
        let mut masked = train_ex.clone();
        mask_labels(&mut masked, lambda, seed)?;
        let outcome = train_gan(
            &masked,
            &dev,
            &vocab,
            &enc_cfg,
            &gan_cfg,
            batch,
            cfg.gan.freeze_encoder,
            seed,
            |_| Ok(()),
        )?;
        Ok(outcome.dev_accuracy)
    };

    let (results, matrix) = if cfg.sweep.jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.sweep.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run_sweep(&cfg.sweep.lambdas, cfg.sweep.seeds, cfg.seed, runner))?
    } else {
        run_sweep(&cfg.sweep.lambdas, cfg.sweep.seeds, cfg.seed, runner)?
    };

    let results_path = cfg.out_dir.join("sweep.jsonl");
    write_jsonl(&results_path, &results)?;
    let matrix_path = cfg.out_dir.join("p_matrix.csv");
    write_p_matrix_csv(&matrix_path, &cfg.sweep.lambdas, &matrix)?;

    for r in &results {
        println!(
            "lambda {:.2}: mean dev accuracy {:.4} (min {:.4}, max {:.4})",
            r.lambda, r.mean, r.min, r.max
        );
    }
    println!("results -> {}", results_path.display());
    println!("p-values -> {}", matrix_path.display());
    Ok(())
}

/// Projects an embedding JSONL dump to 2-D and writes the scatter CSV.
pub fn project(cfg: &RunConfig) -> Result<()> {
    if cfg.tsne.input.as_os_str().is_empty() {
        return Err(Error::Config(
            "no embedding dump given; set --input or tsne.input".into(),
        ));
    }
    cfg.write_snapshot()?;
    let rows: Vec<EmbeddingRecord> = read_jsonl(&cfg.tsne.input)?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::Contract("embedding dump is empty".into()));
    }
    let width = rows[0].values.len();
    let mut flat = Vec::with_capacity(n * width);
    for (i, row) in rows.iter().enumerate() {
        if row.values.len() != width {
            return Err(Error::Data {
                row: i + 1,
                msg: format!("embedding width {} != {width}", row.values.len()),
            });
        }
        flat.extend_from_slice(&row.values);
    }
    let result = minitask::tsne::tsne_embed(
        &Tensor::new(vec![n, width], flat)?,
        &cfg.tsne_cfg(),
        cfg.seed,
    )?;

    let coords = result.coords.data();
    let points: Vec<EmbeddingPoint> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| EmbeddingPoint {
            source: row.source.clone(),
            label: row.label.clone(),
            x: coords[2 * i],
            y: coords[2 * i + 1],
        })
        .collect();
    let points_path = cfg.out_dir.join("points.csv");
    write_embedding_csv(&points_path, &points)?;

    println!(
        "projected {n} points (final divergence {:.4})",
        result.kl_history.last().copied().unwrap_or(f64::NAN)
    );
    println!("points -> {}", points_path.display());
    Ok(())
}

/// Scores a saved multitask checkpoint on every split in the data directory.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    if cfg.eval.checkpoint.as_os_str().is_empty() {
        return Err(Error::Config(
            "no checkpoint given; set --checkpoint or eval.checkpoint".into(),
        ));
    }
    cfg.write_snapshot()?;
    let (model, vocab) = load_checkpoint(&cfg.eval.checkpoint)?.into_model()?;
    let data = load_task_data(&cfg.data.dir)?;

    let splits: [(&str, Split, &[Example], &str); 6] = [
        ("sst", Split::Train, &data.sst_train, "accuracy"),
        ("sst", Split::Dev, &data.sst_dev, "accuracy"),
        ("para", Split::Train, &data.para_train, "accuracy"),
        ("para", Split::Dev, &data.para_dev, "accuracy"),
        ("sts", Split::Train, &data.sts_train, "pearson"),
        ("sts", Split::Dev, &data.sts_dev, "pearson"),
    ];
    let mut records = Vec::new();
    for (task, split, examples, metric) in splits {
        let value = evaluate(&model, examples, &vocab, cfg.optimizer.batch_size)?;
        println!("{task:<4} {split:?} {metric} = {value:.4}");
        records.push(EpochRecord {
            epoch: 0,
            task: task.to_string(),
            split,
            metric: metric.to_string(),
            value,
        });
    }
    let path = cfg.out_dir.join("eval.jsonl");
    write_jsonl(&path, &records)?;
    println!("metrics -> {}", path.display());
    Ok(())
}
