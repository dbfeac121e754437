//! Acceptance gate for the workspace: nine numbered checks covering
//! gradient integrity, surgery invariants, convergence, adversarial loss
//! values, conditioning, masking sensitivity, the statistics oracles, the
//! 2-D projection, and reproducibility. Each check prints one PASS or FAIL
//! line; the process exits nonzero if any fail.
//!
//! Run with `cargo test --test acceptance` (the harness is custom so the
//! lines always print). ACCEPTANCE_ONLY="3,5" runs a subset while tuning.

use minitask::analysis::{accuracy, one_tailed_t_test, pearson, run_sweep};
use minitask::autodiff::{finite_diff_check, finite_diff_check_params};
use minitask::data::{generate_synthetic, mask_labels, MultitaskBatch, SyntheticConfig, Task};
use minitask::encoder::{EncoderConfig, Vocab};
use minitask::gan::{
    batch_variance, class_separation_ratio, discriminator_loss, generator_loss, sample_fakes,
    train_gan, DiscriminatorOutput, GanConfig,
};
use minitask::heads::{HeadConfig, StsMode};
use minitask::report::JsonlWriter;
use minitask::rng::domain;
use minitask::surgery::{pcgrad_project, GradientSet};
use minitask::train::{
    init_model, multitask_loss, train, Model, StepBatches, TaskData, TrainConfig, TrainMode,
    TrainTargets,
};
use minitask::tsne::{best_linear_split, tsne_embed, TsneConfig};
use minitask::{Graph, Params, RunRng, Tensor, Var};
use rand::Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 9] = [
        ("gradient integrity", gradients),
        ("surgery invariants", surgery_invariants),
        ("multitask convergence", convergence),
        ("adversarial loss values", adversarial_losses),
        ("conditional separation", conditional_separation),
        ("masking sensitivity", masking_sensitivity),
        ("statistics oracles", statistics_oracles),
        ("blob projection", blob_projection),
        ("reproducibility", reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| {
        s.split(',')
            .filter_map(|t| t.trim().parse().ok())
            .collect()
    });

    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let number = i + 1;
        if let Some(keep) = &only {
            if !keep.contains(&number) {
                println!("criterion {number} ({name}): SKIPPED");
                continue;
            }
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".to_string());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {number} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {number} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;

fn randn(shape: Vec<usize>, std: f64, tag: u64) -> Tensor {
    let mut rng = RunRng::new(4242).stream(domain::INIT, tag, 0);
    Tensor::randn(shape, std, &mut rng)
}

/// Maps every element at least `margin` away from zero, keeping its sign,
/// so kinked ops stay differentiable across the probe step.
fn off_kink(mut t: Tensor, margin: f64) -> Tensor {
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + margin);
    }
    t
}

// ---------------------------------------------------------------- 1

fn gradients() -> Result<String, String> {
    let start = Instant::now();

    // Weighted-sum reduction gives every output coordinate a distinct
    // gradient so a transposed or mis-sliced backward cannot cancel out.
    fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var, minitask::Error> {
        let wv = g.leaf(w.clone());
        let prod = g.mul(out, wv)?;
        Ok(g.sum_all(prod))
    }

    type Build = Box<dyn FnMut(&mut Graph, Var) -> Result<Var, minitask::Error>>;
    let mut cases: Vec<(&str, Tensor, Build)> = Vec::new();

    {
        let b = randn(vec![4, 2], 1.0, 1);
        let w = randn(vec![3, 2], 1.0, 2);
        cases.push((
            "matmul lhs",
            randn(vec![3, 4], 1.0, 0),
            Box::new(move |g, v| {
                let bv = g.leaf(b.clone());
                let y = g.matmul(v, bv)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let a = randn(vec![3, 4], 1.0, 3);
        let w = randn(vec![3, 2], 1.0, 4);
        cases.push((
            "matmul rhs",
            randn(vec![4, 2], 1.0, 5),
            Box::new(move |g, v| {
                let av = g.leaf(a.clone());
                let y = g.matmul(av, v)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let b = randn(vec![2, 4], 1.0, 6);
        let w = randn(vec![3, 2], 1.0, 7);
        cases.push((
            "matmul_nt lhs",
            randn(vec![3, 4], 1.0, 8),
            Box::new(move |g, v| {
                let bv = g.leaf(b.clone());
                let y = g.matmul_nt(v, bv)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let a = randn(vec![3, 4], 1.0, 9);
        let w = randn(vec![3, 2], 1.0, 10);
        cases.push((
            "matmul_nt rhs",
            randn(vec![2, 4], 1.0, 11),
            Box::new(move |g, v| {
                let av = g.leaf(a.clone());
                let y = g.matmul_nt(av, v)?;
                weighted(g, y, &w)
            }),
        ));
    }
    for (name, flip, tag) in [("add lhs", false, 12u64), ("add rhs", true, 15)] {
        let other = randn(vec![3, 4], 1.0, tag);
        let w = randn(vec![3, 4], 1.0, tag + 1);
        cases.push((
            name,
            randn(vec![3, 4], 1.0, tag + 2),
            Box::new(move |g, v| {
                let o = g.leaf(other.clone());
                let y = if flip { g.add(o, v)? } else { g.add(v, o)? };
                weighted(g, y, &w)
            }),
        ));
    }
    for (name, flip, tag) in [("sub lhs", false, 18u64), ("sub rhs", true, 21)] {
        let other = randn(vec![3, 4], 1.0, tag);
        let w = randn(vec![3, 4], 1.0, tag + 1);
        cases.push((
            name,
            randn(vec![3, 4], 1.0, tag + 2),
            Box::new(move |g, v| {
                let o = g.leaf(other.clone());
                let y = if flip { g.sub(o, v)? } else { g.sub(v, o)? };
                weighted(g, y, &w)
            }),
        ));
    }
    for (name, flip, tag) in [("mul lhs", false, 24u64), ("mul rhs", true, 27)] {
        let other = randn(vec![3, 4], 1.0, tag);
        let w = randn(vec![3, 4], 1.0, tag + 1);
        cases.push((
            name,
            randn(vec![3, 4], 1.0, tag + 2),
            Box::new(move |g, v| {
                let o = g.leaf(other.clone());
                let y = if flip { g.mul(o, v)? } else { g.mul(v, o)? };
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let bias = randn(vec![4], 1.0, 30);
        let w = randn(vec![3, 4], 1.0, 31);
        cases.push((
            "add_row x",
            randn(vec![3, 4], 1.0, 32),
            Box::new(move |g, v| {
                let b = g.leaf(bias.clone());
                let y = g.add_row(v, b)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let a = randn(vec![3, 4], 1.0, 33);
        let w = randn(vec![3, 4], 1.0, 34);
        cases.push((
            "add_row bias",
            randn(vec![4], 1.0, 35),
            Box::new(move |g, v| {
                let av = g.leaf(a.clone());
                let y = g.add_row(av, v)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![3, 4], 1.0, 36);
        cases.push((
            "scale",
            randn(vec![3, 4], 1.0, 37),
            Box::new(move |g, v| {
                let y = g.scale(v, -1.7);
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![3, 4], 1.0, 38);
        cases.push((
            "add_scalar",
            randn(vec![3, 4], 1.0, 39),
            Box::new(move |g, v| {
                let y = g.add_scalar(v, 0.3);
                weighted(g, y, &w)
            }),
        ));
    }
    for (name, second, tag) in [("concat_cols part 0", false, 40u64), ("concat_cols part 1", true, 43)] {
        let other = randn(vec![3, 3], 1.0, tag);
        let w = randn(vec![3, 5], 1.0, tag + 1);
        cases.push((
            name,
            randn(vec![3, 2], 1.0, tag + 2),
            Box::new(move |g, v| {
                let o = g.leaf(other.clone());
                let y = if second {
                    g.concat_cols(&[o, v])?
                } else {
                    g.concat_cols(&[v, o])?
                };
                weighted(g, y, &w)
            }),
        ));
    }
    for (name, second, tag) in [("concat_rows part 0", false, 46u64), ("concat_rows part 1", true, 49)] {
        let other = randn(vec![2, 4], 1.0, tag);
        let w = randn(vec![5, 4], 1.0, tag + 1);
        cases.push((
            name,
            randn(vec![3, 4], 1.0, tag + 2),
            Box::new(move |g, v| {
                let o = g.leaf(other.clone());
                let y = if second {
                    g.concat_rows(&[o, v])?
                } else {
                    g.concat_rows(&[v, o])?
                };
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![2, 3], 1.0, 52);
        cases.push((
            "block",
            randn(vec![4, 6], 1.0, 53),
            Box::new(move |g, v| {
                let y = g.block(v, 1, 2, 2, 3)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![2, 6], 1.0, 54);
        cases.push((
            "reshape",
            randn(vec![3, 4], 1.0, 55),
            Box::new(move |g, v| {
                let y = g.reshape(v, vec![2, 6])?;
                weighted(g, y, &w)
            }),
        ));
    }
    for (name, flip, tag) in [("abs_diff lhs", false, 56u64), ("abs_diff rhs", true, 59)] {
        // The other side sits a fixed distance away so no element pair can
        // meet inside the probe step.
        let base = randn(vec![3, 4], 1.0, tag + 2);
        let mut other = base.clone();
        for (i, v) in other.data_mut().iter_mut().enumerate() {
            *v += if i % 2 == 0 { 0.6 } else { -0.45 };
        }
        let w = randn(vec![3, 4], 1.0, tag + 1);
        cases.push((
            name,
            base,
            Box::new(move |g, v| {
                let o = g.leaf(other.clone());
                let y = if flip {
                    g.abs_diff(o, v)?
                } else {
                    g.abs_diff(v, o)?
                };
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![3, 4], 1.0, 62);
        cases.push((
            "gelu",
            randn(vec![3, 4], 1.0, 63),
            Box::new(move |g, v| {
                let y = g.gelu(v);
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![3, 4], 1.0, 64);
        cases.push((
            "relu",
            off_kink(randn(vec![3, 4], 1.0, 65), 0.3),
            Box::new(move |g, v| {
                let y = g.relu(v);
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![3, 4], 1.0, 66);
        cases.push((
            "sigmoid",
            randn(vec![3, 4], 1.0, 67),
            Box::new(move |g, v| {
                let y = g.sigmoid(v);
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![3, 5], 1.0, 68);
        cases.push((
            "softmax",
            randn(vec![3, 5], 1.0, 69),
            Box::new(move |g, v| {
                let y = g.softmax(v);
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let gamma = off_kink(randn(vec![6], 1.0, 70), 0.2);
        let beta = randn(vec![6], 1.0, 71);
        let w = randn(vec![3, 6], 1.0, 72);
        cases.push((
            "layer_norm x",
            randn(vec![3, 6], 1.0, 73),
            Box::new(move |g, v| {
                let ga = g.leaf(gamma.clone());
                let be = g.leaf(beta.clone());
                let y = g.layer_norm(v, ga, be, 1e-5)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let x = randn(vec![3, 6], 1.0, 74);
        let beta = randn(vec![6], 1.0, 75);
        let w = randn(vec![3, 6], 1.0, 76);
        cases.push((
            "layer_norm gamma",
            randn(vec![6], 1.0, 77),
            Box::new(move |g, v| {
                let xv = g.leaf(x.clone());
                let be = g.leaf(beta.clone());
                let y = g.layer_norm(xv, v, be, 1e-5)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let x = randn(vec![3, 6], 1.0, 78);
        let gamma = randn(vec![6], 1.0, 79);
        let w = randn(vec![3, 6], 1.0, 80);
        cases.push((
            "layer_norm beta",
            randn(vec![6], 1.0, 81),
            Box::new(move |g, v| {
                let xv = g.leaf(x.clone());
                let ga = g.leaf(gamma.clone());
                let y = g.layer_norm(xv, ga, v, 1e-5)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![6, 4], 1.0, 82);
        cases.push((
            "embedding table",
            randn(vec![7, 4], 1.0, 83),
            Box::new(move |g, v| {
                // Repeats exercise gradient accumulation into one row.
                let y = g.embedding(v, &[0, 3, 3, 6, 2, 0])?;
                weighted(g, y, &w)
            }),
        ));
    }
    cases.push((
        "mean_all",
        randn(vec![3, 4], 1.0, 84),
        Box::new(|g, v| Ok(g.mean_all(v))),
    ));
    cases.push((
        "sum_all",
        randn(vec![3, 4], 1.0, 85),
        Box::new(|g, v| Ok(g.sum_all(v))),
    ));
    {
        let w = randn(vec![3], 1.0, 86);
        cases.push((
            "sum_last",
            randn(vec![3, 4], 1.0, 87),
            Box::new(move |g, v| {
                let y = g.sum_last(v);
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![4], 1.0, 88);
        cases.push((
            "mean_axis0",
            randn(vec![3, 4], 1.0, 89),
            Box::new(move |g, v| {
                let y = g.mean_axis0(v)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![3, 4], 1.0, 90);
        cases.push((
            "square",
            randn(vec![3, 4], 1.0, 91),
            Box::new(move |g, v| {
                let y = g.square(v);
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let w = randn(vec![3, 4], 1.0, 92);
        cases.push((
            "log",
            off_kink(randn(vec![3, 4], 1.0, 93), 0.5).map_abs(),
            Box::new(move |g, v| {
                let y = g.log(v);
                weighted(g, y, &w)
            }),
        ));
    }

    let mut primitives = 0;
    for (name, x, mut build) in cases {
        let rel = finite_diff_check(&mut build, &x, FD_STEP)
            .map_err(|e| format!("{name}: {e}"))?;
        if rel > FD_TOL {
            return Err(format!("{name}: relative error {rel:.3e}"));
        }
        primitives += 1;
    }

    // Dropout needs a training-mode graph with the identical mask on every
    // evaluation, which the input-based harness cannot provide.
    {
        let mut params = Params::new();
        params.insert("x", randn(vec![4, 6], 1.0, 94));
        let w = randn(vec![4, 6], 1.0, 95);
        let loss_of = |p: &Params| -> Result<f64, minitask::Error> {
            let mut g = Graph::new(true);
            let v = g.param(p, "x");
            let mut mask_rng = RunRng::new(4242).stream(domain::DROPOUT, 96, 0);
            let y = g.dropout(v, 0.35, &mut mask_rng)?;
            let wv = g.leaf(w.clone());
            let prod = g.mul(y, wv)?;
            let loss = g.sum_all(prod);
            Ok(g.value(loss).data()[0])
        };
        let mut g = Graph::new(true);
        let v = g.param(&params, "x");
        let mut mask_rng = RunRng::new(4242).stream(domain::DROPOUT, 96, 0);
        let y = g.dropout(v, 0.35, &mut mask_rng).map_err(|e| e.to_string())?;
        let wv = g.leaf(w.clone());
        let prod = g.mul(y, wv).map_err(|e| e.to_string())?;
        let loss = g.sum_all(prod);
        g.backward(loss, &mut params).map_err(|e| e.to_string())?;
        let report = finite_diff_check_params(loss_of, &mut params, FD_STEP)
            .map_err(|e| format!("dropout: {e}"))?;
        if report.max_rel > FD_TOL {
            return Err(format!("dropout: relative error {:.3e}", report.max_rel));
        }
        primitives += 1;
    }

    // Full combined loss on a two-layer encoder. Redraws search for weights
    // that keep every ReLU pre-activation clear of the probe step.
    let gen = |task, seed| {
        generate_synthetic(
            &SyntheticConfig {
                n_examples: 6,
                seed,
                vocab_size: 20,
            },
            task,
        )
    };
    let sst = gen(Task::Sst, 7);
    let para = gen(Task::Para, 8);
    let sts = gen(Task::Sts, 9);
    let vocab = Vocab::build(
        sst.iter()
            .chain(&para)
            .chain(&sts)
            .flat_map(|e| [Some(e.text_a.as_str()), e.text_b.as_deref()])
            .flatten(),
    );
    let enc_cfg = EncoderConfig {
        vocab_size: vocab.len(),
        hidden: 8,
        layers: 2,
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
    let mut model =
        init_model(enc_cfg, head_cfg, &RunRng::new(9)).map_err(|e| e.to_string())?;
    let batch = MultitaskBatch {
        sst: sst[..3].to_vec(),
        para: para[..3].to_vec(),
        sts: sts[..3].to_vec(),
    };
    let batches =
        StepBatches::tokenize(&batch, &vocab, 24, StsMode::SepFused).map_err(|e| e.to_string())?;
    let eval_rng = || RunRng::new(0).stream(domain::DROPOUT, u64::MAX, u64::MAX);

    let mut found = false;
    for tag in 100..130 {
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
        let loss = multitask_loss(&mut g, &model, &batches, &mut rng).map_err(|e| e.to_string())?;
        if g.kink_margin() > 2e-3 {
            g.backward(loss, &mut model.params).map_err(|e| e.to_string())?;
            found = true;
            break;
        }
    }
    if !found {
        return Err("no redraw kept the kinks clear of the probe step".into());
    }
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
        FD_STEP,
    )
    .map_err(|e| e.to_string())?;
    if report.max_rel > FD_TOL {
        return Err(format!(
            "combined loss: relative error {:.3e} over {} coordinates",
            report.max_rel, report.checked
        ));
    }
    if report.checked <= report.unresolved {
        return Err(format!("combined loss: too few resolvable coordinates ({report:?})"));
    }

    let elapsed = start.elapsed().as_secs_f64();
    if elapsed > 120.0 {
        return Err(format!("took {elapsed:.0}s, budget is 120s"));
    }
    Ok(format!(
        "{primitives} primitives and a 2-layer combined loss ({} coordinates, worst {:.1e})",
        report.checked + report.unresolved,
        report.max_rel
    ))
}

trait MapAbs {
    fn map_abs(self) -> Self;
}
impl MapAbs for Tensor {
    fn map_abs(mut self) -> Tensor {
        for v in self.data_mut() {
            *v = v.abs();
        }
        self
    }
}

// ---------------------------------------------------------------- 2

fn surgery_invariants() -> Result<String, String> {
    let run = RunRng::new(271);
    let mut draw = run.stream(domain::INIT, 0, 0);
    let mut order_rng = run.stream(domain::PCGRAD_ORDER, 0, 0);

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut conflicting = 0;
    for _ in 0..1000 {
        let a = Tensor::randn(vec![100], 1.0, &mut draw).into_data();
        let b = Tensor::randn(vec![100], 1.0, &mut draw).into_data();
        let sets = [
            GradientSet {
                task: Task::Sst,
                flat: a.clone(),
            },
            GradientSet {
                task: Task::Para,
                flat: b.clone(),
            },
        ];
        let out = pcgrad_project(&sets, &mut order_rng).map_err(|e| e.to_string())?;
        let (ap, bp) = (&out[0].flat, &out[1].flat);
        if dot(&a, &b) >= 0.0 {
            if *ap != a || *bp != b {
                return Err("non-conflicting pair was modified".into());
            }
        } else {
            conflicting += 1;
            if dot(ap, &b) < -1e-9 || dot(bp, &a) < -1e-9 {
                return Err(format!(
                    "projection left a conflict: {:.3e} / {:.3e}",
                    dot(ap, &b),
                    dot(bp, &a)
                ));
            }
            if norm(ap) > norm(&a) || norm(bp) > norm(&b) {
                return Err("projection grew a gradient norm".into());
            }
        }
    }
    if conflicting < 200 {
        return Err(format!("only {conflicting} of 1000 pairs conflicted; draw is broken"));
    }

    // Anti-parallel pair collapses to exactly zero.
    let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() + 0.1).collect();
    let b: Vec<f64> = a.iter().map(|v| -2.0 * v).collect();
    let sets = [
        GradientSet {
            task: Task::Sst,
            flat: a,
        },
        GradientSet {
            task: Task::Para,
            flat: b,
        },
    ];
    let out = pcgrad_project(&sets, &mut order_rng).map_err(|e| e.to_string())?;
    if out[0].flat.iter().any(|&v| v != 0.0) || out[1].flat.iter().any(|&v| v != 0.0) {
        return Err("anti-parallel pair did not cancel to zero".into());
    }

    // Worked two-dimensional example.
    let sets = [
        GradientSet {
            task: Task::Sst,
            flat: vec![1.0, 0.0],
        },
        GradientSet {
            task: Task::Para,
            flat: vec![-1.0, 1.0],
        },
    ];
    let out = pcgrad_project(&sets, &mut order_rng).map_err(|e| e.to_string())?;
    if out[0].flat != [0.5, 0.5] {
        return Err(format!("worked example gave {:?}, expected [0.5, 0.5]", out[0].flat));
    }
    if out[1].flat != [0.0, 1.0] {
        return Err(format!("worked example partner gave {:?}", out[1].flat));
    }

    Ok(format!("1000 pairs ({conflicting} conflicting), cancellation and worked example exact"))
}

// ---------------------------------------------------------------- 3

fn desk_data(n_train: usize, n_dev: usize, seed: u64, filler: usize) -> (TaskData, Vocab) {
    let gen = |task, n, seed| {
        generate_synthetic(
            &SyntheticConfig {
                n_examples: n,
                seed,
                vocab_size: filler,
            },
            task,
        )
    };
    let data = TaskData {
        sst_train: gen(Task::Sst, n_train, seed),
        sst_dev: gen(Task::Sst, n_dev, seed + 1),
        para_train: gen(Task::Para, n_train, seed + 2),
        para_dev: gen(Task::Para, n_dev, seed + 3),
        sts_train: gen(Task::Sts, n_train, seed + 4),
        sts_dev: gen(Task::Sts, n_dev, seed + 5),
    };
    let vocab = Vocab::build(data.all_texts());
    (data, vocab)
}

fn convergence() -> Result<String, String> {
    let start = Instant::now();
    // The wide dev split keeps the mode comparison out of sampling noise.
    let (data, vocab) = desk_data(500, 200, 40, 30);
    let enc_cfg = EncoderConfig {
        vocab_size: vocab.len(),
        hidden: 32,
        layers: 2,
        heads: 4,
        ff_dim: 64,
        max_seq_len: 48,
        dropout_p: 0.1,
    };
    let head_cfg = HeadConfig {
        shared_dim: 32,
        dense_dim: 32,
        dropout_p: 0.1,
        sts_mode: StsMode::SepFused,
        baseline_mode: false,
    };
    let targets = TrainTargets {
        sentiment_accuracy: 0.90,
        paraphrase_accuracy: 0.90,
        similarity_pearson: 0.80,
    };
    let run_mode = |mode: TrainMode| -> Result<minitask::train::TrainOutcome, String> {
        let cfg = TrainConfig {
            mode,
            epochs: 200,
            batch_size: 16,
            seed: 7,
            optimizer: minitask::surgery::AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            halve_paraphrase: false,
            stop_at: Some(targets),
        };
        let mut model = init_model(enc_cfg.clone(), head_cfg.clone(), &RunRng::new(7))
            .map_err(|e| e.to_string())?;
        let outcome =
            train(&mut model, &data, &vocab, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
        for r in &outcome.records {
            if !r.value.is_finite() {
                return Err(format!("{} {:?} {} went non-finite", r.task, r.split, r.metric));
            }
        }
        Ok(outcome)
    };

    let paired = run_mode(TrainMode::PcgradPaired)?;
    if !targets.met(&paired.final_train) {
        return Err(format!(
            "paired mode missed its training targets after {} epochs: {:?}",
            paired.epochs_run, paired.final_train
        ));
    }
    let naive = run_mode(TrainMode::NaiveSum)?;

    let gaps = [
        ("sentiment", paired.final_dev.sentiment, naive.final_dev.sentiment),
        ("paraphrase", paired.final_dev.paraphrase, naive.final_dev.paraphrase),
        ("similarity", paired.final_dev.similarity, naive.final_dev.similarity),
    ];
    for (task, p, n) in gaps {
        if p < n - 0.05 {
            return Err(format!("paired dev {task} {p:.3} trails naive {n:.3} by more than 0.05"));
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    if elapsed > 900.0 {
        return Err(format!("took {elapsed:.0}s, budget is 900s"));
    }
    Ok(format!(
        "targets in {} epochs (naive {}); dev {:.2}/{:.2}/{:.2} vs {:.2}/{:.2}/{:.2}",
        paired.epochs_run,
        naive.epochs_run,
        paired.final_dev.sentiment,
        paired.final_dev.paraphrase,
        paired.final_dev.similarity,
        naive.final_dev.sentiment,
        naive.final_dev.paraphrase,
        naive.final_dev.similarity,
    ))
}

// ---------------------------------------------------------------- 4

fn adversarial_losses() -> Result<String, String> {
    let k = 5;
    // A perfect discriminator: the winning logit towers over the rest, so
    // softmax saturates to exact 1 and the log terms to exact 0.
    {
        let b = 4;
        let mut real = vec![0.0; b * (k + 1)];
        let labels: Vec<Option<usize>> = (0..b).map(|i| Some(i % k)).collect();
        for (i, l) in labels.iter().enumerate() {
            real[i * (k + 1) + l.unwrap()] = 60.0;
        }
        let mut fake = vec![0.0; b * (k + 1)];
        for i in 0..b {
            fake[i * (k + 1) + k] = 60.0;
        }
        let mut g = Graph::new(false);
        let real = DiscriminatorOutput {
            logits: g.leaf(Tensor::new(vec![b, k + 1], real).map_err(|e| e.to_string())?),
            feature: g.leaf(Tensor::zeros(vec![b, 3])),
        };
        let fake = DiscriminatorOutput {
            logits: g.leaf(Tensor::new(vec![b, k + 1], fake).map_err(|e| e.to_string())?),
            feature: g.leaf(Tensor::zeros(vec![b, 3])),
        };
        let loss =
            discriminator_loss(&mut g, &real, Some(&fake), &labels, k).map_err(|e| e.to_string())?;
        let total = g.value(loss.total).data()[0];
        if total != 0.0 {
            return Err(format!("perfect discriminator loss is {total:.3e}, not exactly 0"));
        }
    }

    // Uniform predictive distribution over k+1 = 6 classes.
    let (lds, ldu) = {
        let mut g = Graph::new(false);
        let real = DiscriminatorOutput {
            logits: g.leaf(Tensor::zeros(vec![1, k + 1])),
            feature: g.leaf(Tensor::zeros(vec![1, 3])),
        };
        let fake = DiscriminatorOutput {
            logits: g.leaf(Tensor::zeros(vec![1, k + 1])),
            feature: g.leaf(Tensor::zeros(vec![1, 3])),
        };
        let loss = discriminator_loss(&mut g, &real, Some(&fake), &[Some(2)], k)
            .map_err(|e| e.to_string())?;
        (loss.supervised, loss.unsupervised)
    };
    let want_s = (6.0f64).ln();
    let want_u = -(5.0f64 / 6.0).ln() - (1.0f64 / 6.0).ln();
    if (lds - want_s).abs() > 1e-9 {
        return Err(format!("uniform supervised loss {lds} differs from ln 6 by {:.1e}", (lds - want_s).abs()));
    }
    if (ldu - want_u).abs() > 1e-9 {
        return Err(format!("uniform unsupervised loss {ldu} off by {:.1e}", (ldu - want_u).abs()));
    }

    // Identical feature statistics zero the matching term exactly.
    let fm = {
        let mut g = Graph::new(false);
        let feats = randn(vec![5, 4], 1.0, 200);
        let fake = DiscriminatorOutput {
            logits: g.leaf(Tensor::zeros(vec![5, k + 1])),
            feature: g.leaf(feats.clone()),
        };
        let real_feat = g.leaf(feats);
        let real_mean = g.mean_axis0(real_feat).map_err(|e| e.to_string())?;
        let loss = generator_loss(&mut g, real_mean, &fake, k).map_err(|e| e.to_string())?;
        loss.feature_matching
    };
    if fm != 0.0 {
        return Err(format!("matched features give {fm:.3e}, not exactly 0"));
    }

    Ok(format!(
        "perfect-discriminator 0 exact, uniform terms within 1e-9 (ln 6 = {want_s:.6}), matching 0 exact"
    ))
}

// ---------------------------------------------------------------- 5

fn toy_sentiment(n: usize, seed: u64) -> Vec<minitask::data::Example> {
    generate_synthetic(
        &SyntheticConfig {
            n_examples: n,
            seed,
            vocab_size: 10,
        },
        Task::Sst,
    )
}

fn toy_encoder(vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        hidden: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        max_seq_len: 24,
        dropout_p: 0.1,
    }
}

fn conditional_separation() -> Result<String, String> {
    // Small batches over a biggish corpus give the generator enough steps
    // within the 5 epochs for label conditioning to break symmetry. The
    // one-wide noise keeps label offsets from being swamped by noise spread.
    let train_ex = toy_sentiment(2000, 50);
    let dev = toy_sentiment(40, 51);
    let vocab = Vocab::build(train_ex.iter().chain(&dev).map(|e| e.text_a.as_str()));
    let enc_cfg = toy_encoder(&vocab);

    let mut ratios = Vec::new();
    let mut variances = Vec::new();
    for conditional in [true, false] {
        let cfg = GanConfig {
            k: 5,
            noise_dim: 1,
            hidden_depth: 1,
            hidden_dim: 32,
            lr: 2e-3,
            conditional,
            dropout_p: 0.1,
            epochs: 5,
        };
        let outcome = train_gan(&train_ex, &dev, &vocab, &enc_cfg, &cfg, 4, false, 52, |_| Ok(()))
            .map_err(|e| e.to_string())?;
        let labels: Vec<usize> = (0..100).map(|i| i % cfg.k).collect();
        let mut noise = RunRng::new(52).stream(domain::NOISE, u64::MAX, 0);
        let fakes =
            sample_fakes(&outcome.params, &cfg, &labels, &mut noise).map_err(|e| e.to_string())?;
        ratios.push(class_separation_ratio(&fakes, &labels).map_err(|e| e.to_string())?);
        variances.push(batch_variance(&fakes));
    }

    let (cond, uncond) = (ratios[0], ratios[1]);
    if cond <= 1.2 {
        return Err(format!("conditional separation ratio {cond:.3} <= 1.2"));
    }
    if !(0.8..=1.2).contains(&uncond) {
        return Err(format!("unconditional separation ratio {uncond:.3} outside [0.8, 1.2]"));
    }
    for (v, which) in variances.iter().zip(["conditional", "unconditional"]) {
        if *v <= 1e-6 {
            return Err(format!("{which} generator batch variance {v:.2e} <= 1e-6"));
        }
    }
    Ok(format!(
        "conditional ratio {cond:.2}, unconditional {uncond:.2}, variances {:.2e}/{:.2e}",
        variances[0], variances[1]
    ))
}

// ---------------------------------------------------------------- 6

fn masking_sensitivity() -> Result<String, String> {
    // A heavier filler vocabulary keeps the fully-labeled runs just below
    // saturation so the half-masked runs have somewhere to land strictly
    // in between.
    let gen = |n, seed| {
        generate_synthetic(
            &SyntheticConfig {
                n_examples: n,
                seed,
                vocab_size: 60,
            },
            Task::Sst,
        )
    };
    let train_ex = gen(2000, 60);
    let dev = gen(50, 61);
    let vocab = Vocab::build(train_ex.iter().chain(&dev).map(|e| e.text_a.as_str()));
    let enc_cfg = toy_encoder(&vocab);
    let gan_cfg = GanConfig {
        k: 5,
        noise_dim: 1,
        hidden_depth: 1,
        hidden_dim: 32,
        lr: 1e-3,
        conditional: true,
        dropout_p: 0.1,
        epochs: 5,
    };

    let runner = |lambda: f64, seed: u64| {
        let mut masked = train_ex.clone();
        mask_labels(&mut masked, lambda, seed)?;
        let outcome = train_gan(&masked, &dev, &vocab, &enc_cfg, &gan_cfg, 4, false, seed, |_| {
            Ok(())
        })?;
        // The settled end of the run, averaged to damp epoch-to-epoch noise.
        let tail = &outcome.dev_accuracy[outcome.dev_accuracy.len() - 3..];
        Ok(tail.to_vec())
    };
    let lambdas = [0.0, 0.5, 0.9];
    let (results, matrix) = run_sweep(&lambdas, 3, 600, runner).map_err(|e| e.to_string())?;

    for (i, row) in matrix.iter().enumerate() {
        if row[i] != 0.5 {
            return Err(format!("significance diagonal entry {i} is {}, not exactly 0.5", row[i]));
        }
    }
    let means: Vec<f64> = results.iter().map(|r| r.mean).collect();
    if !(means[0] > means[1] && means[1] > means[2]) {
        return Err(format!(
            "mean dev accuracy not strictly decreasing over masking: {means:?}"
        ));
    }
    Ok(format!(
        "means {:.3} > {:.3} > {:.3}, diagonal exactly 0.5",
        means[0], means[1], means[2]
    ))
}

// ---------------------------------------------------------------- 7

fn statistics_oracles() -> Result<String, String> {
    let run = RunRng::new(331);

    // Brute-force re-computation of both metrics on 20 random cases.
    for case in 0..20u64 {
        let mut rng = run.stream(domain::INIT, case, 0);
        let n = 5 + (case as usize % 7) * 5;
        let preds: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5u32)) as f64).collect();
        let labels: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5u32)) as f64).collect();
        let hits = preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        let oracle = hits as f64 / n as f64;
        let got = accuracy(&preds, &labels).map_err(|e| e.to_string())?;
        if (got - oracle).abs() > 1e-10 {
            return Err(format!("accuracy case {case}: {got} vs oracle {oracle}"));
        }

        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 1.5 * v + rng.random::<f64>() - 0.5)
            .collect();
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        let oracle = cov / (vx * vy).sqrt();
        let got = pearson(&x, &y).map_err(|e| e.to_string())?;
        if (got - oracle).abs() > 1e-10 {
            return Err(format!("pearson case {case}: {got} vs oracle {oracle}"));
        }
    }

    // Identical samples sit exactly on the fence.
    let a = vec![0.41, 0.52, 0.47, 0.55];
    let p = one_tailed_t_test(&a, &a).map_err(|e| e.to_string())?;
    if p != 0.5 {
        return Err(format!("identical samples gave {p}, not exactly 0.5"));
    }

    // Complement identity on random pairs.
    for case in 0..10u64 {
        let mut rng = run.stream(domain::INIT, 100 + case, 0);
        let a: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
        let fwd = one_tailed_t_test(&a, &b).map_err(|e| e.to_string())?;
        let rev = one_tailed_t_test(&b, &a).map_err(|e| e.to_string())?;
        if (fwd + rev - 1.0).abs() > 1e-10 {
            return Err(format!("complement identity violated: {fwd} + {rev}"));
        }
    }

    // A clear one-sided separation has essentially no mass on the far tail.
    let hi: Vec<f64> = (0..8).map(|i| 0.9 + 1e-4 * i as f64).collect();
    let lo: Vec<f64> = (0..8).map(|i| 0.1 + 1e-4 * i as f64).collect();
    let p = one_tailed_t_test(&hi, &lo).map_err(|e| e.to_string())?;
    if p >= 1e-3 {
        return Err(format!("separated samples gave p = {p}"));
    }

    // Permutation oracle: a million random relabelings of the pooled data.
    let mut rng = run.stream(domain::INIT, 300, 0);
    let a: Vec<f64> = Tensor::randn(vec![24], 1.0, &mut rng)
        .into_data()
        .into_iter()
        .map(|v| 0.55 + 0.05 * v)
        .collect();
    let b: Vec<f64> = Tensor::randn(vec![24], 1.0, &mut rng)
        .into_data()
        .into_iter()
        .map(|v| 0.52 + 0.05 * v)
        .collect();
    let p_t = one_tailed_t_test(&a, &b).map_err(|e| e.to_string())?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let d_obs = mean(&a) - mean(&b);
    let mut pool: Vec<f64> = a.iter().chain(&b).copied().collect();
    let total: f64 = pool.iter().sum();
    let mut hits = 0u64;
    let draws = 1_000_000u64;
    let mut perm_rng = run.stream(domain::INIT, 301, 0);
    for _ in 0..draws {
        // Partial Fisher-Yates: the first 24 slots become the resampled a.
        for i in 0..24 {
            let j = perm_rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let sum_a: f64 = pool[..24].iter().sum();
        let d = sum_a / 24.0 - (total - sum_a) / 24.0;
        if d >= d_obs {
            hits += 1;
        }
    }
    let p_perm = hits as f64 / draws as f64;
    if (p_t - p_perm).abs() > 0.02 {
        return Err(format!(
            "t-test {p_t:.4} vs permutation oracle {p_perm:.4} differ by more than 0.02"
        ));
    }

    Ok(format!(
        "20 metric cases exact, identities hold, t {p_t:.4} vs permutation {p_perm:.4}"
    ))
}

// ---------------------------------------------------------------- 8

fn blob_projection() -> Result<String, String> {
    // Two well-separated Gaussian blobs in 10 dimensions.
    let (n_per, h, gap) = (50usize, 10usize, 8.0);
    let mut rng = RunRng::new(77).stream(domain::TSNE, 99, 0);
    let mut data = Vec::with_capacity(2 * n_per * h);
    let mut labels = Vec::with_capacity(2 * n_per);
    for blob in 0..2usize {
        for _ in 0..n_per {
            labels.push(blob);
            for dim in 0..h {
                let center = if blob == 1 && dim == 0 { gap } else { 0.0 };
                data.push(center + rng.random::<f64>() - 0.5);
            }
        }
    }
    let x = Tensor::new(vec![2 * n_per, h], data).map_err(|e| e.to_string())?;

    let cfg = TsneConfig::default();
    let result = tsne_embed(&x, &cfg, 7).map_err(|e| e.to_string())?;

    let worst_perp = result
        .perplexities
        .iter()
        .map(|p| (p - cfg.perplexity).abs())
        .fold(0.0f64, f64::max);
    if worst_perp > 1e-3 {
        return Err(format!("perplexity misses target by {worst_perp:.2e}"));
    }

    let tail = &result.kl_history[cfg.iters - 100..];
    for pair in tail.windows(2) {
        if pair[1] > pair[0] {
            return Err(format!(
                "divergence rose by {:.3e} inside the final 100 iterations",
                pair[1] - pair[0]
            ));
        }
    }

    let split = best_linear_split(&result.coords, &labels).map_err(|e| e.to_string())?;
    if split < 0.95 {
        return Err(format!("best linear split separates only {split:.3}"));
    }
    Ok(format!(
        "perplexity within {worst_perp:.1e}, tail monotone, split {split:.3}, final divergence {:.3}",
        result.kl_history.last().unwrap()
    ))
}

// ---------------------------------------------------------------- 9

fn reproducibility() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // Multitask epoch records, streamed to disk as they are produced.
    let write_train_run = |path: &std::path::Path| -> Result<(), minitask::Error> {
        let (data, vocab) = desk_data(24, 10, 90, 20);
        let enc_cfg = EncoderConfig {
            vocab_size: vocab.len(),
            hidden: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            max_seq_len: 24,
            dropout_p: 0.1,
        };
        let head_cfg = HeadConfig {
            shared_dim: 16,
            dense_dim: 16,
            dropout_p: 0.1,
            sts_mode: StsMode::SepFused,
            baseline_mode: false,
        };
        let cfg = TrainConfig {
            mode: TrainMode::PcgradPaired,
            epochs: 2,
            batch_size: 8,
            seed: 91,
            optimizer: Default::default(),
            halve_paraphrase: false,
            stop_at: None,
        };
        let mut model = init_model(enc_cfg, head_cfg, &RunRng::new(91))?;
        let mut writer = JsonlWriter::create(path)?;
        train(&mut model, &data, &vocab, &cfg, |records| {
            for r in records {
                writer.push(r)?;
            }
            Ok(())
        })?;
        writer.finish()
    };
    let (m1, m2) = (dir.path().join("m1.jsonl"), dir.path().join("m2.jsonl"));
    write_train_run(&m1).map_err(|e| e.to_string())?;
    write_train_run(&m2).map_err(|e| e.to_string())?;
    let b1 = std::fs::read(&m1).map_err(|e| e.to_string())?;
    let b2 = std::fs::read(&m2).map_err(|e| e.to_string())?;
    if b1 != b2 {
        return Err("multitask metric files differ between identical runs".into());
    }

    // Adversarial step records.
    let write_gan_run = |path: &std::path::Path| -> Result<(), minitask::Error> {
        let train_ex = toy_sentiment(24, 92);
        let dev = toy_sentiment(10, 93);
        let vocab = Vocab::build(train_ex.iter().chain(&dev).map(|e| e.text_a.as_str()));
        let enc_cfg = toy_encoder(&vocab);
        let cfg = GanConfig {
            k: 5,
            noise_dim: 8,
            hidden_depth: 1,
            hidden_dim: 32,
            lr: 1e-3,
            conditional: true,
            dropout_p: 0.1,
            epochs: 1,
        };
        let mut writer = JsonlWriter::create(path)?;
        train_gan(&train_ex, &dev, &vocab, &enc_cfg, &cfg, 8, false, 94, |r| writer.push(r))?;
        writer.finish()
    };
    let (g1, g2) = (dir.path().join("g1.jsonl"), dir.path().join("g2.jsonl"));
    write_gan_run(&g1).map_err(|e| e.to_string())?;
    write_gan_run(&g2).map_err(|e| e.to_string())?;
    let c1 = std::fs::read(&g1).map_err(|e| e.to_string())?;
    let c2 = std::fs::read(&g2).map_err(|e| e.to_string())?;
    if c1 != c2 {
        return Err("adversarial metric files differ between identical runs".into());
    }

    Ok(format!(
        "two runs each: {} multitask bytes and {} adversarial bytes identical",
        b1.len(),
        c1.len()
    ))
}
