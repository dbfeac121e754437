//! Gradient surgery for conflicting tasks, paired-loss accumulation, and
//! the AdamW optimizer.
//!
//! Tasks that share parameters can pull them in opposing directions. When
//! two task gradients point away from each other (negative inner product),
//! each is replaced by its projection onto the normal plane of the other,
//! removing the conflicting component. Projection happens over pairs:
//! sentiment is paired with paraphrase, similarity is paired with
//! paraphrase, and both surgered pairs accumulate into one update.

use crate::autodiff::Params;
use crate::data::Task;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Parameters shared across tasks (and therefore subject to surgery) are
/// the encoder and the shared head block; everything else is exclusive to
/// one head.
pub fn is_shared_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("head.shared.")
}

/// Fixed flattening of the shared parameter subset: registration order,
/// name -> (offset, len) into one contiguous vector.
#[derive(Debug, Clone)]
pub struct SharedLayout {
    entries: Vec<(String, usize, usize)>,
    index: HashMap<String, usize>,
    total: usize,
}

impl SharedLayout {
    pub fn of(params: &Params) -> SharedLayout {
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        let mut total = 0;
        for name in params.names() {
            if is_shared_param(name) {
                let len = params.value(name).numel();
                index.insert(name.to_string(), entries.len());
                entries.push((name.to_string(), total, len));
                total += len;
            }
        }
        SharedLayout {
            entries,
            index,
            total,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn span(&self, name: &str) -> Option<(usize, usize)> {
        self.index
            .get(name)
            .map(|&i| (self.entries[i].1, self.entries[i].2))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.entries.iter().map(|(n, o, l)| (n.as_str(), *o, *l))
    }

    /// Copies the current gradients of the shared subset into one vector.
    pub fn flatten_grads(&self, params: &Params) -> Vec<f64> {
        let mut flat = vec![0.0; self.total];
        for (name, offset, len) in self.entries() {
            flat[offset..offset + len].copy_from_slice(&params.grad(name).data()[..len]);
        }
        flat
    }
}

/// The gradient of one task's loss with respect to the shared parameters,
/// flattened per a [`SharedLayout`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub task: Task,
    pub flat: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projects each gradient away from the others' conflicting directions.
///
/// For each set i, the other sets are visited in random order; whenever the
/// current (partially surgered) g_i conflicts with the ORIGINAL g_j
/// (negative inner product), the component along g_j is subtracted:
/// g_i <- g_i - (g_i . g_j / |g_j|^2) g_j. Zero-norm g_j are skipped with a
/// warning. Non-conflicting inputs pass through bitwise unchanged.
pub fn pcgrad_project<R: Rng>(grads: &[GradientSet], rng: &mut R) -> Result<Vec<GradientSet>> {
    for g in grads {
        if g.flat.len() != grads[0].flat.len() {
            return Err(Error::Contract(format!(
                "gradient length mismatch: {} has {}, {} has {}",
                grads[0].task.name(),
                grads[0].flat.len(),
                g.task.name(),
                g.flat.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(grads.len());
    for i in 0..grads.len() {
        let mut gi = grads[i].flat.clone();
        let mut order: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            let gj = &grads[j].flat;
            let d = dot(&gi, gj);
            if d < 0.0 {
                let nj2 = dot(gj, gj);
                if nj2 == 0.0 {
                    log::warn!(
                        "skipping projection against zero-norm {} gradient",
                        grads[j].task.name()
                    );
                    continue;
                }
                let coef = d / nj2;
                for (x, &y) in gi.iter_mut().zip(gj) {
                    *x -= coef * y;
                }
            }
        }
        out.push(GradientSet {
            task: grads[i].task,
            flat: gi,
        });
    }
    Ok(out)
}

/// Per-task gradients of one step: the shared-subset flattening plus raw
/// gradients of the task's exclusive parameters.
#[derive(Debug, Clone)]
pub struct TaskGrads {
    pub shared: GradientSet,
    pub exclusive: Vec<(String, Vec<f64>)>,
}

impl TaskGrads {
    /// Snapshots the gradients currently held in `params` as belonging to
    /// `task`. Call right after a single-loss backward pass.
    pub fn capture(task: Task, params: &Params, layout: &SharedLayout) -> TaskGrads {
        let mut exclusive = Vec::new();
        for name in params.names() {
            if !is_shared_param(name) {
                let g = params.grad(name).data();
                if g.iter().any(|&v| v != 0.0) {
                    exclusive.push((name.to_string(), g.to_vec()));
                }
            }
        }
        TaskGrads {
            shared: GradientSet {
                task,
                flat: layout.flatten_grads(params),
            },
            exclusive,
        }
    }
}

/// How shared-parameter gradients from the three tasks combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    /// Plain sum of the three raw task gradients.
    NaiveSum,
    /// Surgery over (sentiment, paraphrase) and (similarity, paraphrase),
    /// both surgered pairs summed. The paraphrase gradient enters twice,
    /// once per pair.
    PcgradPaired,
}

/// One combined update direction for every parameter.
#[derive(Debug)]
pub struct CombinedGrads {
    pub shared: Vec<f64>,
    pub exclusive: HashMap<String, Vec<f64>>,
}

/// Combines per-task gradients into a single update per `mode`.
///
/// `halve_paraphrase` scales the paraphrase shared gradient by 0.5 before
/// pairing, compensating for its double appearance; projections of the
/// other tasks against it are scale-invariant, so only its own
/// contribution shrinks. Exclusive parameters always take their own task's
/// raw gradient exactly once.
pub fn combine_grads<R: Rng>(
    sst: &TaskGrads,
    para: &TaskGrads,
    sts: &TaskGrads,
    mode: CombineMode,
    halve_paraphrase: bool,
    rng: &mut R,
) -> Result<CombinedGrads> {
    for (grads, task) in [(sst, Task::Sst), (para, Task::Para), (sts, Task::Sts)] {
        if grads.shared.task != task {
            return Err(Error::Contract(format!(
                "expected {} gradients, got {}",
                task.name(),
                grads.shared.task.name()
            )));
        }
    }
    let mut para_shared = para.shared.clone();
    if halve_paraphrase && mode == CombineMode::PcgradPaired {
        for v in &mut para_shared.flat {
            *v *= 0.5;
        }
    }
    let mut shared = vec![0.0; sst.shared.flat.len()];
    let mut add = |flat: &[f64]| {
        for (acc, &v) in shared.iter_mut().zip(flat) {
            *acc += v;
        }
    };
    match mode {
        CombineMode::NaiveSum => {
            add(&sst.shared.flat);
            add(&para.shared.flat);
            add(&sts.shared.flat);
        }
        CombineMode::PcgradPaired => {
            let pair1 = pcgrad_project(&[sst.shared.clone(), para_shared.clone()], rng)?;
            for g in &pair1 {
                add(&g.flat);
            }
            let pair2 = pcgrad_project(&[sts.shared.clone(), para_shared], rng)?;
            for g in &pair2 {
                add(&g.flat);
            }
        }
    }
    let mut exclusive = HashMap::new();
    for task_grads in [sst, para, sts] {
        for (name, g) in &task_grads.exclusive {
            if exclusive.insert(name.clone(), g.clone()).is_some() {
                return Err(Error::Contract(format!(
                    "parameter {name} received exclusive gradients from two tasks"
                )));
            }
        }
    }
    Ok(CombinedGrads { shared, exclusive })
}

// ── optimizer ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates per parameter, in parameter registration
/// order, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params) -> AdamState {
        let sizes: Vec<usize> = params.names().map(|n| params.value(n).numel()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One AdamW step over every parameter.
///
/// Weight decay is decoupled: theta <- theta - lr * wd * theta first, then
/// the bias-corrected Adam delta. Parameters absent from `grads` take a
/// zero gradient (decay still applies). A non-finite gradient aborts the
/// whole step before any parameter moves, naming the offender.
pub fn adam_update(
    params: &mut Params,
    grads: &CombinedGrads,
    layout: &SharedLayout,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state sized for {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    let names: Vec<String> = params.names().map(String::from).collect();
    let grad_of = |name: &str| -> &[f64] {
        if let Some((offset, len)) = layout.span(name) {
            &grads.shared[offset..offset + len]
        } else if let Some(g) = grads.exclusive.get(name) {
            g
        } else {
            &[]
        }
    };
    for name in &names {
        if let Some(&bad) = grad_of(name).iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient for {name} ({bad}); update aborted"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (pi, name) in names.iter().enumerate() {
        let g = grad_of(name).to_vec();
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        let theta = params.value_mut(name).data_mut();
        for k in 0..theta.len() {
            let gk = g.get(k).copied().unwrap_or(0.0);
            theta[k] -= cfg.lr * cfg.weight_decay * theta[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            theta[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One AdamW step over the subset of parameters selected by `include`,
/// reading gradients directly from the store (as left by `backward`).
/// Excluded parameters and their moments stay untouched; the rest follows
/// [`adam_update`], including the abort-before-moving non-finite rule.
pub fn adam_update_where(
    params: &mut Params,
    state: &mut AdamState,
    cfg: &AdamConfig,
    include: impl Fn(&str) -> bool,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state sized for {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (name, _, grad) in params.iter() {
        if !include(name) {
            continue;
        }
        if let Some(&bad) = grad.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient for {name} ({bad}); update aborted"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (pi, (name, value, grad)) in params.iter_mut().enumerate() {
        if !include(name) {
            continue;
        }
        let g = grad.data();
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        let theta = value.data_mut();
        for k in 0..theta.len() {
            let gk = g[k];
            theta[k] -= cfg.lr * cfg.weight_decay * theta[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            theta[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Combines the three tasks' gradients and applies one optimizer step.
pub fn paired_step<R: Rng>(
    params: &mut Params,
    sst: &TaskGrads,
    para: &TaskGrads,
    sts: &TaskGrads,
    mode: CombineMode,
    halve_paraphrase: bool,
    state: &mut AdamState,
    cfg: &AdamConfig,
    layout: &SharedLayout,
    rng: &mut R,
) -> Result<()> {
    let combined = combine_grads(sst, para, sts, mode, halve_paraphrase, rng)?;
    adam_update(params, &combined, layout, state, cfg)
}
