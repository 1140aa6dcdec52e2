//! One experiment end to end: data, training under a strategy, optional
//! fine-tuning and rescoring LM, test evaluation, and the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_corpus, Corpus, TaskSet, Utterance};
use crate::decode::{attach_lm_scores, beam_search, rescore, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::{cer, corpus_cer, CurveLogger, CurvePoint, EvalReport, TaskMetrics};
use crate::models::{LmConfig, LstmLm, ModelKind, SeqModel, Split, Transducer, TransducerStepper};
use crate::params::{load_checkpoint, save_checkpoint, ParamSet};
use crate::rng::{derive_seed, stream};
use crate::train::{
    fine_tune, joint_step, mean_nll, meta_step, EpochRecord, OuterConfig, Sampling, Schedule, TrainState,
};
use crate::vocab::{Vocab, BEGIN, PAD};

use super::config::{ExperimentConfig, Strategy};

pub const CONFIG_FILE: &str = "config.txt";
pub const METADATA_FILE: &str = "metadata.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const FINETUNE_FILE: &str = "finetune.json";
const CHECKPOINT_DIR: &str = "checkpoint";
const BEST_CKPT: &str = "best.ckpt";
const FINAL_CKPT: &str = "final.ckpt";
const RESCORE_LM_CKPT: &str = "rescore_lm.ckpt";
const SELECTION_FILE: &str = "best.json";

/// The trained model family of a run.
pub enum BuiltModel {
    Transducer(Transducer),
    Lm(LstmLm),
}

impl BuiltModel {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.model {
            ModelKind::Transducer => BuiltModel::Transducer(Transducer::new(cfg.transducer.clone())?),
            ModelKind::Lm => BuiltModel::Lm(LstmLm::new(cfg.lm.clone())?),
        })
    }

    pub fn as_model(&self) -> &dyn SeqModel {
        match self {
            BuiltModel::Transducer(m) => m,
            BuiltModel::Lm(m) => m,
        }
    }
}

/// Everything needed to reproduce the run besides the config snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub seed: u64,
    pub data_seed: u64,
    /// Derived seeds of the named substreams.
    pub streams: BTreeMap<String, u64>,
    pub roster: Vec<String>,
    pub outer_optimizer: String,
    pub outer_lr: f64,
    pub clip: Option<f64>,
    pub meta_mode: String,
    pub meta_alpha: f64,
    pub tasks_per_iter: usize,
    pub meta_val_pool: String,
    pub finetune_optimizer: String,
    pub finetune_lr: f64,
    pub corpus_source: String,
    /// Split digests keyed `CORPUS/split`.
    pub checksums: BTreeMap<String, String>,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneSummary {
    pub initial_val: f64,
    pub best_val: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub strategy: Strategy,
    pub roster: Vec<String>,
    pub model: ModelKind,
    pub seed: u64,
    pub iterations: u64,
    /// Iteration of the selected (best CS validation) checkpoint.
    pub selected_iteration: u64,
    pub best_val_cs: f64,
    pub finetune: Option<FineTuneSummary>,
    /// Test metrics keyed by corpus; with fine-tuning, the pre-fine-tuning
    /// numbers appear under `pre_ft/<corpus>`.
    pub eval: EvalReport,
    /// Test split digests, used to check comparability between runs.
    pub test_checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub stage: String,
    pub corpus: String,
    pub id: u64,
    pub reference: String,
    pub hypothesis: String,
    pub cer: f64,
    pub rescored: Option<String>,
    pub cer_rescored: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SelectionMeta {
    iteration: u64,
    val_cs: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))
}

/// Loads the corpus named by `run.corpus_dir`, or generates it from `data`.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<TaskSet> {
    if cfg.run.corpus_dir.is_empty() {
        return TaskSet::generate(&cfg.data);
    }
    let (set, data) = load_corpus(Path::new(&cfg.run.corpus_dir))?;
    if data != cfg.data {
        return Err(Error::Config(vec![format!(
            "data: settings differ from the corpus stored in {}",
            cfg.run.corpus_dir
        )]));
    }
    Ok(set)
}

const CORPORA: [Corpus; 3] = [Corpus::En, Corpus::Zh, Corpus::Cs];

fn checksums(set: &TaskSet, splits: &[Split]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for c in CORPORA {
        for &s in splits {
            if !set.corpus_split(c, s).is_empty() {
                out.insert(format!("{}/{}", c.as_str(), s.as_str()), set.split_checksum(c, s));
            }
        }
    }
    out
}

fn stream_names(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    ["init", "sampling", "finetune", "rescore_lm"]
        .iter()
        .map(|n| (n.to_string(), derive_seed(cfg.run.seed, n)))
        .chain([("data".to_string(), cfg.data.seed)])
        .collect()
}

fn limited<'a>(utts: Vec<&'a Utterance>, limit: usize) -> Vec<&'a Utterance> {
    if limit == 0 || utts.len() <= limit {
        utts
    } else {
        utts[..limit].to_vec()
    }
}

fn curve_split(c: Corpus) -> String {
    format!("val_{}", c.as_str().to_lowercase())
}

/// Runs `cfg` into `dir`, generating or loading the corpus first.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, resume: bool) -> Result<RunReport> {
    cfg.validate()?;
    let set = load_or_generate(cfg)?;
    run_experiment_on(cfg, &set, dir, resume)
}

/// Runs `cfg` on an already materialized corpus. With `resume`, training
/// continues from the last checkpoint in `dir`; the stored config snapshot
/// must then match `cfg`.
pub fn run_experiment_on(cfg: &ExperimentConfig, set: &TaskSet, dir: &Path, resume: bool) -> Result<RunReport> {
    cfg.validate()?;
    set.validate()?;
    let model = BuiltModel::new(cfg)?;
    if set.vocab.size != model.as_model().vocab_size() {
        return Err(Error::Config(vec![format!(
            "{}.vocab_size: corpus vocabulary has {} ids",
            if cfg.model == ModelKind::Lm { "lm" } else { "transducer" },
            set.vocab.size
        )]));
    }
    fs::create_dir_all(dir)?;
    let snapshot = cfg.to_text();
    let snap_path = dir.join(CONFIG_FILE);
    if resume && snap_path.exists() {
        if fs::read_to_string(&snap_path)? != snapshot {
            return Err(Error::Config(vec![format!(
                "{}: config differs from the snapshot of the run being resumed",
                snap_path.display()
            )]));
        }
    } else {
        fs::write(&snap_path, &snapshot)?;
    }
    let outer = cfg.outer();
    let meta = RunMetadata {
        run_id: cfg.run.id.clone(),
        seed: cfg.run.seed,
        data_seed: cfg.data.seed,
        streams: stream_names(cfg),
        roster: cfg.effective_roster()?.iter().map(|c| c.as_str().to_string()).collect(),
        outer_optimizer: outer.kind.as_str().into(),
        outer_lr: outer.lr,
        clip: outer.clip,
        meta_mode: cfg.meta.mode.as_str().into(),
        meta_alpha: cfg.meta.alpha,
        tasks_per_iter: cfg.meta.tasks_per_iter,
        meta_val_pool: cfg.meta.val_pool.as_str().into(),
        finetune_optimizer: "sgd".into(),
        finetune_lr: if cfg.model == ModelKind::Lm { Schedule::lm(1, 1).lr } else { cfg.ft.lr },
        corpus_source: if cfg.run.corpus_dir.is_empty() { "generated".into() } else { "loaded".into() },
        checksums: checksums(set, &[Split::Train, Split::Val, Split::Test]),
        param_count: model.as_model().init_params(&mut stream(cfg.run.seed, "init"))?.numel(),
    };
    write_json(&dir.join(METADATA_FILE), &meta)?;

    train_phase(cfg, set, &model, dir, resume)?;
    finetune_phase(cfg, set, &model, dir)?;
    if cfg.rescore {
        rescore_lm_phase(cfg, set, dir)?;
    }
    evaluate_on(cfg, set, dir)
}

fn eval_losses(
    cfg: &ExperimentConfig,
    set: &TaskSet,
    model: &dyn SeqModel,
    params: &ParamSet,
) -> Result<Vec<(Corpus, f64)>> {
    let mut out = vec![];
    for c in cfg.eval_corpora()? {
        let utts = limited(set.corpus_split(c, Split::Val), cfg.run.val_limit);
        if utts.is_empty() {
            continue;
        }
        out.push((c, mean_nll(model, params, &utts, cfg.run.eval_batch_size)?));
    }
    Ok(out)
}

fn train_phase(cfg: &ExperimentConfig, set: &TaskSet, model: &BuiltModel, dir: &Path, resume: bool) -> Result<()> {
    let m = model.as_model();
    let outer = cfg.outer();
    let roster = cfg.effective_roster()?;
    let hyper = cfg.meta_hyper();
    let sampling = Sampling {
        batch_size: cfg.run.batch_size,
        with_features: cfg.model == ModelKind::Transducer,
        val_pool: cfg.meta.val_pool,
    };
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let curves_path = dir.join(CURVES_FILE);
    let clock = Instant::now();
    let wall = |clock: &Instant| if cfg.run.deterministic_clock { 0 } else { clock.elapsed().as_millis() as u64 };

    let resumed = resume && ckpt_dir.join("state.json").exists();
    let (mut state, mut curves) = if resumed {
        let state = TrainState::load(&ckpt_dir)?;
        if state.iteration > cfg.run.iterations {
            return Err(Error::Config(vec![format!(
                "run.iterations: checkpoint is already at iteration {}",
                state.iteration
            )]));
        }
        log::info!("{}: resuming at iteration {}", cfg.run.id, state.iteration);
        let curves = CurveLogger::resume(&curves_path, state.iteration)?;
        (state, curves)
    } else {
        let params = m.init_params(&mut stream(cfg.run.seed, "init"))?;
        let state = TrainState::new(params, &outer, stream(cfg.run.seed, "sampling"));
        (state, CurveLogger::create(&curves_path)?)
    };

    let evaluate = |state: &mut TrainState, curves: &mut CurveLogger, train_loss: Option<f64>| -> Result<()> {
        let it = state.iteration;
        let point = |split: String, loss: f64| CurvePoint {
            run_id: cfg.run.id.clone(),
            split,
            iteration: it,
            loss,
            wall_ms: wall(&clock),
        };
        if let Some(l) = train_loss {
            curves.log(point("train".into(), l))?;
        }
        let mut val_cs = f64::NAN;
        for (c, loss) in eval_losses(cfg, set, m, &state.params)? {
            curves.log(point(curve_split(c), loss))?;
            if c == Corpus::Cs {
                val_cs = loss;
            }
        }
        if state.observe_val(val_cs) {
            save_checkpoint(&state.params, &dir.join(BEST_CKPT))?;
            write_json(&dir.join(SELECTION_FILE), &SelectionMeta { iteration: it, val_cs })?;
        }
        log::info!("{} it {it}: val_cs {val_cs:.4}", cfg.run.id);
        state.save(&ckpt_dir)
    };

    if !resumed {
        evaluate(&mut state, &mut curves, None)?;
    }
    let (mut window, mut steps) = (0.0, 0usize);
    while state.iteration < cfg.run.iterations {
        let (next, loss) = match cfg.strategy {
            Strategy::MetaTransfer => {
                let (next, diag) = meta_step(&state, set, &roster, &hyper, &outer, &sampling, m)?;
                let l = diag.tasks.iter().map(|t| t.val_loss).sum::<f64>() / diag.tasks.len() as f64;
                (next, l)
            }
            Strategy::Joint | Strategy::OnlyCs => joint_step(&state, set, &roster, &outer, &sampling, m)?,
        };
        state = next;
        window += loss;
        steps += 1;
        if state.iteration % cfg.run.eval_every == 0 || state.iteration == cfg.run.iterations {
            evaluate(&mut state, &mut curves, Some(window / steps as f64))?;
            window = 0.0;
            steps = 0;
        }
    }
    Ok(())
}

fn finetune_phase(cfg: &ExperimentConfig, set: &TaskSet, model: &BuiltModel, dir: &Path) -> Result<()> {
    let best = load_checkpoint(&dir.join(BEST_CKPT))?;
    let ft_path = dir.join(FINETUNE_FILE);
    if !cfg.finetune {
        if ft_path.exists() {
            fs::remove_file(&ft_path)?;
        }
        return save_checkpoint(&best, &dir.join(FINAL_CKPT));
    }
    let schedule = match cfg.model {
        ModelKind::Lm => Schedule::lm(cfg.ft.max_epochs, cfg.ft.batch_size),
        ModelKind::Transducer => cfg.ft_schedule(),
    };
    let start = TrainState::new(best, &OuterConfig::sgd(schedule.lr), stream(cfg.run.seed, "finetune"));
    let outcome = fine_tune(&start, set, &schedule, model.as_model())?;
    save_checkpoint(&outcome.state.params, &dir.join(FINAL_CKPT))?;
    write_json(
        &ft_path,
        &FineTuneSummary {
            initial_val: outcome.initial_val,
            best_val: outcome.state.best_val.unwrap_or(outcome.initial_val),
            epochs: outcome.history,
        },
    )
}

fn rescore_lm_config(cfg: &ExperimentConfig) -> LmConfig {
    LmConfig {
        vocab_size: cfg.data.vocab_size(),
        ..cfg.lm.clone()
    }
}

/// Trains the external rescoring LM on code-switched training transcripts.
fn rescore_lm_phase(cfg: &ExperimentConfig, set: &TaskSet, dir: &Path) -> Result<()> {
    let lm = LstmLm::new(rescore_lm_config(cfg))?;
    let mut rng = stream(cfg.run.seed, "rescore_lm");
    let params = lm.init_params(&mut rng)?;
    let outer = OuterConfig {
        lr: cfg.rescore_lm.lr,
        ..OuterConfig::default()
    };
    let mut state = TrainState::new(params, &outer, rng);
    let sampling = Sampling {
        batch_size: cfg.rescore_lm.batch_size,
        with_features: false,
        val_pool: cfg.meta.val_pool,
    };
    for _ in 0..cfg.rescore_lm.iterations {
        state = joint_step(&state, set, &[Corpus::Cs], &outer, &sampling, &lm)?.0;
    }
    let val: Vec<&Utterance> = set.corpus_split(Corpus::Cs, Split::Val);
    if !val.is_empty() {
        log::info!("{}: rescoring LM val loss {:.4}", cfg.run.id, mean_nll(&lm, &state.params, &val, 50)?);
    }
    save_checkpoint(&state.params, &dir.join(RESCORE_LM_CKPT))
}

/// Every non-sentinel token plus `END`.
pub fn decode_candidates(vocab_size: usize) -> Vec<u32> {
    (0..vocab_size as u32).filter(|&t| t != PAD && t != BEGIN).collect()
}

/// Beam-decodes one utterance and returns the best hypothesis before and,
/// when an LM is given, after rescoring.
pub fn decode_utterance(
    model: &Transducer,
    params: &ParamSet,
    utt: &Utterance,
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    lm: Option<(&LstmLm, &ParamSet)>,
) -> Result<(Hypothesis, Option<Hypothesis>)> {
    let feats = utt
        .features
        .as_ref()
        .ok_or_else(|| Error::Setup(format!("utterance {} has no features to decode", utt.id)))?;
    let mut stepper = TransducerStepper::new(model, params, feats)?;
    let mut hyps = beam_search(
        &mut stepper,
        cfg.decode.width,
        cfg.decode.max_len,
        &decode_candidates(model.cfg.vocab_size),
        vocab,
    )?;
    let best = hyps[0].clone();
    let rescored = match lm {
        Some((lm, lp)) => {
            attach_lm_scores(&mut hyps, |seq| lm.score(lp, seq))?;
            let (i, _) = rescore(&hyps, &cfg.weights())?;
            Some(hyps[i].clone())
        }
        None => None,
    };
    Ok((best, rescored))
}

fn reference(u: &Utterance) -> &[u32] {
    &u.tokens
}

fn strip(h: &Hypothesis) -> Vec<u32> {
    h.content().to_vec()
}

fn transcript_line(
    stage: &str,
    corpus: Corpus,
    u: &Utterance,
    hyp: &[u32],
    rescored: Option<&[u32]>,
    vocab: &Vocab,
) -> Result<TranscriptLine> {
    Ok(TranscriptLine {
        stage: stage.into(),
        corpus: corpus.as_str().into(),
        id: u.id,
        reference: vocab.detokenize(reference(u)),
        hypothesis: vocab.detokenize(hyp),
        cer: cer(reference(u), hyp)?,
        rescored: rescored.map(|x| vocab.detokenize(x)),
        cer_rescored: rescored.map(|x| cer(reference(u), x)).transpose()?,
    })
}

fn eval_stage(
    cfg: &ExperimentConfig,
    set: &TaskSet,
    model: &BuiltModel,
    params: &ParamSet,
    stage: &str,
    lm: Option<(&LstmLm, &ParamSet)>,
    transcripts: &mut Vec<TranscriptLine>,
) -> Result<BTreeMap<String, TaskMetrics>> {
    let mut out = BTreeMap::new();
    for c in CORPORA {
        let test = set.corpus_split(c, Split::Test);
        if test.is_empty() {
            continue;
        }
        let loss = mean_nll(model.as_model(), params, &test, cfg.run.eval_batch_size)?;
        let mut tm = TaskMetrics {
            utterances: test.len(),
            loss: Some(loss),
            ..TaskMetrics::default()
        };
        match model {
            BuiltModel::Lm(_) => tm.perplexity = Some(loss.exp()),
            BuiltModel::Transducer(t) => {
                let subset = limited(test, cfg.decode.test_limit);
                tm.utterances = subset.len();
                let (mut plain, mut resc) = (vec![], vec![]);
                for u in &subset {
                    let (best, rescored) = decode_utterance(t, params, u, cfg, &set.vocab, lm)?;
                    let hyp = strip(&best);
                    let r = rescored.as_ref().map(strip);
                    transcripts.push(transcript_line(stage, c, u, &hyp, r.as_deref(), &set.vocab)?);
                    plain.push(hyp);
                    if let Some(r) = r {
                        resc.push(r);
                    }
                }
                tm.cer = Some(corpus_cer(subset.iter().map(|u| reference(u)).zip(plain.iter().map(Vec::as_slice)))?);
                if lm.is_some() {
                    tm.cer_rescored =
                        Some(corpus_cer(subset.iter().map(|u| reference(u)).zip(resc.iter().map(Vec::as_slice)))?);
                }
            }
        }
        out.insert(c.as_str().to_string(), tm);
    }
    Ok(out)
}

/// Re-evaluates a finished run directory from its snapshot and checkpoints,
/// rewriting `report.json` and the transcripts.
pub fn evaluate_run(dir: &Path) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let set = load_or_generate(&cfg)?;
    evaluate_on(&cfg, &set, dir)
}

fn evaluate_on(cfg: &ExperimentConfig, set: &TaskSet, dir: &Path) -> Result<RunReport> {
    let model = BuiltModel::new(cfg)?;
    let best = load_checkpoint(&dir.join(BEST_CKPT))?;
    let fin = load_checkpoint(&dir.join(FINAL_CKPT))?;
    let selection: SelectionMeta = read_json(&dir.join(SELECTION_FILE))?;
    let lm_model = if cfg.rescore { Some(LstmLm::new(rescore_lm_config(cfg))?) } else { None };
    let lm_params = if cfg.rescore { Some(load_checkpoint(&dir.join(RESCORE_LM_CKPT))?) } else { None };
    let lm = lm_model.as_ref().zip(lm_params.as_ref());
    let finetune: Option<FineTuneSummary> = if cfg.finetune { Some(read_json(&dir.join(FINETUNE_FILE))?) } else { None };

    let mut transcripts = vec![];
    let mut tasks = BTreeMap::new();
    if cfg.finetune {
        for (k, v) in eval_stage(cfg, set, &model, &best, "pre_ft", lm, &mut transcripts)? {
            tasks.insert(format!("pre_ft/{k}"), v);
        }
    }
    tasks.extend(eval_stage(cfg, set, &model, &fin, "final", lm, &mut transcripts)?);

    let mut f = fs::File::create(dir.join(TRANSCRIPTS_FILE))?;
    for t in &transcripts {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    let test_checksums = checksums(set, &[Split::Test])
        .into_iter()
        .map(|(k, v)| (k.trim_end_matches("/test").to_string(), v))
        .collect();
    let report = RunReport {
        run_id: cfg.run.id.clone(),
        strategy: cfg.strategy,
        roster: cfg.effective_roster()?.iter().map(|c| c.as_str().to_string()).collect(),
        model: cfg.model,
        seed: cfg.run.seed,
        iterations: cfg.run.iterations,
        selected_iteration: selection.iteration,
        best_val_cs: selection.val_cs,
        finetune,
        eval: EvalReport {
            run_id: cfg.run.id.clone(),
            tasks,
            baseline: None,
            deltas: BTreeMap::new(),
        },
        test_checksums,
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    read_json(&dir.join(REPORT_FILE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHyp {
    pub tokens: Vec<u32>,
    pub text: String,
    pub dec_logp: f64,
    pub lm_logp: Option<f64>,
    pub word_count: usize,
    /// Combined rescoring score; `None` without a rescoring LM.
    pub score: Option<f64>,
}

/// One decoded utterance with the whole final beam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub corpus: String,
    pub id: u64,
    pub reference: Vec<u32>,
    pub reference_text: String,
    /// Beam order, best decoder score first.
    pub hypotheses: Vec<ScoredHyp>,
    /// Index into `hypotheses` picked by rescoring (0 without an LM).
    pub chosen: usize,
    pub cer: f64,
}

/// Decodes up to `limit` utterances (0 = all) of `corpus`/`split` with the
/// run's final parameters, or the pre-fine-tuning ones when `pre_ft` is set.
pub fn decode_run(dir: &Path, corpus: Corpus, split: Split, limit: usize, pre_ft: bool) -> Result<Vec<DecodeRecord>> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let set = load_or_generate(&cfg)?;
    let BuiltModel::Transducer(model) = BuiltModel::new(&cfg)? else {
        return Err(Error::Setup("decoding needs a transducer run".into()));
    };
    let params = load_checkpoint(&dir.join(if pre_ft { BEST_CKPT } else { FINAL_CKPT }))?;
    let lm_model = if cfg.rescore { Some(LstmLm::new(rescore_lm_config(&cfg))?) } else { None };
    let lm_params = if cfg.rescore { Some(load_checkpoint(&dir.join(RESCORE_LM_CKPT))?) } else { None };
    let candidates = decode_candidates(model.cfg.vocab_size);
    let mut out = vec![];
    for u in limited(set.corpus_split(corpus, split), limit) {
        let feats = u
            .features
            .as_ref()
            .ok_or_else(|| Error::Setup(format!("utterance {} has no features to decode", u.id)))?;
        let mut stepper = TransducerStepper::new(&model, &params, feats)?;
        let mut hyps = beam_search(&mut stepper, cfg.decode.width, cfg.decode.max_len, &candidates, &set.vocab)?;
        let (chosen, scores) = match (&lm_model, &lm_params) {
            (Some(lm), Some(lp)) => {
                attach_lm_scores(&mut hyps, |seq| lm.score(lp, seq))?;
                let (i, scored) = rescore(&hyps, &cfg.weights())?;
                (i, scored.iter().map(|s| Some(s.score)).collect())
            }
            _ => (0, vec![None; hyps.len()]),
        };
        let hypotheses = hyps
            .iter()
            .zip(scores)
            .map(|(h, score)| ScoredHyp {
                tokens: h.tokens.clone(),
                text: set.vocab.detokenize(h.content()),
                dec_logp: h.dec_logp,
                lm_logp: h.lm_logp,
                word_count: h.word_count,
                score,
            })
            .collect();
        out.push(DecodeRecord {
            corpus: corpus.as_str().into(),
            id: u.id,
            reference: u.tokens.clone(),
            reference_text: set.vocab.detokenize(&u.tokens),
            cer: cer(&u.tokens, hyps[chosen].content())?,
            hypotheses,
            chosen,
        });
    }
    Ok(out)
}
