//! Meta-transfer learning and the joint-training baseline.
//!
//! One meta iteration samples a training batch per source task and one
//! validation batch from the target pool, adapts θ with plain SGD on each
//! training batch, and sums the validation-loss gradients of the adapted
//! parameters. First-order mode takes those gradients at θ′ directly;
//! second-order mode differentiates through the inner update on one tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{sample_batch, sample_corpus_batch, Corpus, Role, TaskFilter, TaskSet};
use crate::error::{Error, Result};
use crate::models::{SeqBatch, SeqModel, Split};
use crate::params::{backward, sgd_step, GradMap, ParamSet, VarMap};

use super::state::{apply_update, sum_grads, OuterConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    FirstOrder,
    SecondOrder,
}

impl MetaMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "first_order" => Some(Self::FirstOrder),
            "second_order" => Some(Self::SecondOrder),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FirstOrder => "first_order",
            Self::SecondOrder => "second_order",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaHyper {
    /// Inner SGD step size.
    pub alpha: f64,
    /// Outer step size; the learning rate of the outer optimizer.
    pub beta: f64,
    pub tasks_per_iter: usize,
    pub mode: MetaMode,
    pub inner_steps: usize,
}

impl Default for MetaHyper {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 1e-4,
            tasks_per_iter: 3,
            mode: MetaMode::FirstOrder,
            inner_steps: 1,
        }
    }
}

impl MetaHyper {
    pub fn validate(&self) -> Result<()> {
        let mut bad = vec![];
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bad.push(format!("meta.alpha must be > 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            bad.push(format!("meta.beta must be > 0, got {}", self.beta));
        }
        if self.tasks_per_iter == 0 {
            bad.push("meta.tasks_per_iter must be >= 1".into());
        }
        if self.inner_steps == 0 {
            bad.push("meta.inner_steps must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Which target split feeds the meta validation batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValPool {
    /// The target task's training share; held-out validation stays unseen.
    TargetTrain,
    /// The target task's validation split.
    TargetVal,
}

impl ValPool {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "target_train" => Some(Self::TargetTrain),
            "target_val" => Some(Self::TargetVal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TargetTrain => "target_train",
            Self::TargetVal => "target_val",
        }
    }

    fn split(self) -> Split {
        match self {
            Self::TargetTrain => Split::Train,
            Self::TargetVal => Split::Val,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampling {
    pub batch_size: usize,
    pub with_features: bool,
    pub val_pool: ValPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDiag {
    pub task: String,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDiag {
    pub tasks: Vec<TaskDiag>,
    pub grad_norm: f64,
}

/// Pins a closure to the higher-ranked loss signature used throughout this
/// module, so its lifetimes are inferred correctly.
pub fn loss_fn<B, F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &VarMap<'t>, &B) -> Result<Var<'t>>,
{
    f
}

fn tag_task(task: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{op} (task {task})"),
        },
        e => e,
    }
}

fn check_loss(value: f64, task: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            op: format!("loss (task {task})"),
        })
    }
}

/// Loss value and gradient for every parameter.
pub fn value_and_grad<B, L>(params: &ParamSet, loss: &L, batch: &B) -> Result<(f64, GradMap)>
where
    L: for<'t> Fn(&'t Tape, &VarMap<'t>, &B) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params.to_vars(&tape);
    let l = loss(&tape, &vars, batch)?;
    let v = l.value().item();
    Ok((v, backward(&tape, l, &vars)?))
}

/// `inner_steps` plain SGD steps from `params` on `batch`. `params` is not
/// modified. `alpha` must be strictly positive.
pub fn inner_adapt<B, L>(
    params: &ParamSet,
    loss: &L,
    batch: &B,
    alpha: f64,
    inner_steps: usize,
    task: &str,
) -> Result<ParamSet>
where
    L: for<'t> Fn(&'t Tape, &VarMap<'t>, &B) -> Result<Var<'t>>,
{
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!("inner step size must be > 0, got {alpha}")));
    }
    adapt(params, loss, batch, alpha, inner_steps, task).map(|(p, _)| p)
}

fn adapt<B, L>(
    params: &ParamSet,
    loss: &L,
    batch: &B,
    alpha: f64,
    inner_steps: usize,
    task: &str,
) -> Result<(ParamSet, f64)>
where
    L: for<'t> Fn(&'t Tape, &VarMap<'t>, &B) -> Result<Var<'t>>,
{
    let mut cur = params.clone();
    let mut first_loss = f64::NAN;
    for s in 0..inner_steps.max(1) {
        let (v, g) = value_and_grad(&cur, loss, batch).map_err(tag_task(task))?;
        check_loss(v, task)?;
        if s == 0 {
            first_loss = v;
        }
        if alpha != 0.0 {
            cur = sgd_step(&cur, &g, alpha)?;
        }
    }
    Ok((cur, first_loss))
}

/// Summed outer gradient `Σᵢ ∇_θ L_val(θ′ᵢ)` over the given training batches.
///
/// `alpha = 0` is accepted here and makes every θ′ᵢ equal θ; run-level
/// configuration rejects it through [`MetaHyper::validate`].
pub fn meta_gradient<B, L>(
    params: &ParamSet,
    loss: &L,
    tra: &[(String, B)],
    val: &B,
    hyper: &MetaHyper,
) -> Result<(GradMap, Vec<TaskDiag>)>
where
    L: for<'t> Fn(&'t Tape, &VarMap<'t>, &B) -> Result<Var<'t>>,
{
    if tra.is_empty() {
        return Err(Error::Setup("meta step needs at least one training batch".into()));
    }
    if !(hyper.alpha >= 0.0) {
        return Err(Error::Contract(format!("inner step size must be >= 0, got {}", hyper.alpha)));
    }
    let mut grads = Vec::with_capacity(tra.len());
    let mut diags = Vec::with_capacity(tra.len());
    for (task, batch) in tra {
        let (g, d) = match hyper.mode {
            MetaMode::FirstOrder => {
                let (adapted, train_loss) = adapt(params, loss, batch, hyper.alpha, hyper.inner_steps, task)?;
                let (val_loss, g) = value_and_grad(&adapted, loss, val).map_err(tag_task(task))?;
                check_loss(val_loss, task)?;
                (
                    g,
                    TaskDiag {
                        task: task.clone(),
                        train_loss,
                        val_loss,
                    },
                )
            }
            MetaMode::SecondOrder => second_order(params, loss, batch, val, hyper, task)?,
        };
        grads.push(g);
        diags.push(d);
    }
    Ok((sum_grads(&grads)?, diags))
}

fn second_order<B, L>(
    params: &ParamSet,
    loss: &L,
    batch: &B,
    val: &B,
    hyper: &MetaHyper,
    task: &str,
) -> Result<(GradMap, TaskDiag)>
where
    L: for<'t> Fn(&'t Tape, &VarMap<'t>, &B) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let theta = params.to_vars(&tape);
    let mut cur = theta.clone();
    let mut train_loss = f64::NAN;
    for s in 0..hyper.inner_steps.max(1) {
        let l = loss(&tape, &cur, batch).map_err(tag_task(task))?;
        if s == 0 {
            train_loss = l.value().item();
            check_loss(train_loss, task)?;
        }
        let gs = tape.grad(l, &cur.vars()).map_err(tag_task(task))?;
        let next = cur
            .iter()
            .zip(gs)
            .map(|((n, v), g)| Ok((n.clone(), v.sub(g.scale(hyper.alpha)?)?)))
            .collect::<Result<Vec<_>>>()
            .map_err(tag_task(task))?;
        cur = VarMap::from_pairs(next);
    }
    let lv = loss(&tape, &cur, val).map_err(tag_task(task))?;
    let val_loss = lv.value().item();
    check_loss(val_loss, task)?;
    let g = backward(&tape, lv, &theta).map_err(tag_task(task))?;
    Ok((
        g,
        TaskDiag {
            task: task.to_string(),
            train_loss,
            val_loss,
        },
    ))
}

/// One outer update from pre-sampled batches.
pub fn meta_step_with_batches<B, L>(
    state: &TrainState,
    tra: &[(String, B)],
    val: &B,
    hyper: &MetaHyper,
    outer: &OuterConfig,
    loss: &L,
) -> Result<(TrainState, StepDiag)>
where
    L: for<'t> Fn(&'t Tape, &VarMap<'t>, &B) -> Result<Var<'t>>,
{
    let (g, tasks) = meta_gradient(&state.params, loss, tra, val, hyper)?;
    let (next, grad_norm) = apply_update(state, g, outer)?;
    Ok((next, StepDiag { tasks, grad_norm }))
}

/// Source-role task names whose corpus is in `roster`.
pub fn source_tasks(set: &TaskSet, roster: &[Corpus]) -> Vec<String> {
    set.tasks
        .iter()
        .filter(|t| t.role == Role::Source && roster.contains(&t.corpus) && !t.train.is_empty())
        .map(|t| t.name.clone())
        .collect()
}

/// One meta-transfer iteration: samples `tasks_per_iter` source batches and
/// a fresh target validation batch from the state's RNG, then updates.
pub fn meta_step<M: SeqModel + ?Sized>(
    state: &TrainState,
    set: &TaskSet,
    roster: &[Corpus],
    hyper: &MetaHyper,
    outer: &OuterConfig,
    sampling: &Sampling,
    model: &M,
) -> Result<(TrainState, StepDiag)> {
    hyper.validate()?;
    let sources = source_tasks(set, roster);
    if sources.is_empty() {
        return Err(Error::Setup(format!("no source task in roster {roster:?}")));
    }
    let target = set.target()?;
    if target.split(sampling.val_pool.split()).is_empty() {
        return Err(Error::Setup(format!(
            "target task {} has no {} data for validation batches",
            target.name,
            sampling.val_pool.as_str()
        )));
    }
    let mut rng = state.rng.clone();
    let filter = TaskFilter::Names(sources);
    let mut tra = Vec::with_capacity(hyper.tasks_per_iter);
    for _ in 0..hyper.tasks_per_iter {
        let (t, b) = sample_batch(set, &filter, Split::Train, sampling.batch_size, sampling.with_features, &mut rng)?;
        tra.push((set.tasks[t].name.clone(), b));
    }
    let (_, val) = sample_batch(
        set,
        &TaskFilter::Role(Role::Target),
        sampling.val_pool.split(),
        sampling.batch_size,
        sampling.with_features,
        &mut rng,
    )?;
    let loss = loss_fn(|t, p, b: &SeqBatch| model_loss(model, t, p, b));
    let mut moved = state.clone();
    moved.rng = rng;
    meta_step_with_batches(&moved, &tra, &val, hyper, outer, &loss)
}

fn model_loss<'t, M: SeqModel + ?Sized>(model: &M, tape: &'t Tape, p: &VarMap<'t>, b: &SeqBatch) -> Result<Var<'t>> {
    if b.split == Split::Test {
        return Err(Error::Setup("test data reached a training loss".into()));
    }
    model.loss(tape, p, b)
}

/// One joint-training update on a batch drawn from a uniformly chosen corpus
/// of `roster`.
pub fn joint_step<M: SeqModel + ?Sized>(
    state: &TrainState,
    set: &TaskSet,
    roster: &[Corpus],
    outer: &OuterConfig,
    sampling: &Sampling,
    model: &M,
) -> Result<(TrainState, f64)> {
    let mut rng = state.rng.clone();
    let (corpus, batch) = sample_corpus_batch(set, roster, Split::Train, sampling.batch_size, sampling.with_features, &mut rng)?;
    let mut moved = state.clone();
    moved.rng = rng;
    let loss = loss_fn(|t, p, b: &SeqBatch| model_loss(model, t, p, b));
    joint_step_with_batch(&moved, &batch, outer, &loss, corpus.as_str())
}

pub fn joint_step_with_batch<B, L>(
    state: &TrainState,
    batch: &B,
    outer: &OuterConfig,
    loss: &L,
    label: &str,
) -> Result<(TrainState, f64)>
where
    L: for<'t> Fn(&'t Tape, &VarMap<'t>, &B) -> Result<Var<'t>>,
{
    let (v, g) = value_and_grad(&state.params, loss, batch).map_err(tag_task(label))?;
    check_loss(v, label)?;
    let (next, _) = apply_update(state, g, outer)?;
    Ok((next, v))
}
