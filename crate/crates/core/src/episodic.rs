//! Episode sampling, meta-training with validation early stopping, and
//! meta-test evaluation.

use std::ops::Range;

use log::{debug, info, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{AdamConfig, AdamState, ComputeError, Gradients, Tape, Tensor, Var};
use crate::encoder::{encode_on_tape, EncoderVars};
use crate::graph::{AttributedGraph, Split, DEFAULT_CENTRALITY_EPS};
use crate::metrics::{self, MetricReport, RepeatMetrics, SimilarityMatrix};
use crate::model::{embed, GraphContext, ModelParams};
use crate::protonet::{self, ClassProbabilities, PrototypeStrategy, ProtoError};
use crate::valuator::{value_nodes_on_tape, ScoreVector, ValuatorVars};
use crate::Real;

/// Environment variable capping meta-test parallelism.
pub const THREADS_ENV: &str = "GPN_THREADS";

// rng streams derived from one seed
const STREAM_INIT: u64 = 0;
const STREAM_TASKS: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_VAL: u64 = 3;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("split has {available} eligible classes but {needed} are required")]
    SplitTooSmall { available: usize, needed: usize },
    #[error("class {class} has {size} nodes but {needed} are required")]
    ClassTooSmall {
        class: usize,
        size: usize,
        needed: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("training diverged at episode {episode}: loss {loss}")]
    Diverged { episode: usize, loss: f64 },
    #[error("no spare node of another class to mislabel into class {0}")]
    NoDonor(usize),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
}

/// One N-way K-shot task. Support nodes are stored class by class, so
/// class `i` of [`EpisodeTask::classes`] owns
/// `support[i * k_shot..(i + 1) * k_shot]`. Labels are global class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTask {
    pub classes: Vec<usize>,
    pub k_shot: usize,
    pub m_query: usize,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl EpisodeTask {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_groups(&self) -> Vec<Range<usize>> {
        (0..self.n_way())
            .map(|c| c * self.k_shot..(c + 1) * self.k_shot)
            .collect()
    }

    pub fn support_by_class(&self) -> Vec<Vec<usize>> {
        self.support_groups()
            .into_iter()
            .map(|r| self.support[r].iter().map(|&(n, _)| n).collect())
            .collect()
    }

    pub fn support_nodes(&self) -> Vec<usize> {
        self.support.iter().map(|&(n, _)| n).collect()
    }

    pub fn query_nodes(&self) -> Vec<usize> {
        self.query.iter().map(|&(n, _)| n).collect()
    }

    /// Query labels as indices into [`EpisodeTask::classes`].
    pub fn query_local_labels(&self) -> Vec<usize> {
        self.query
            .iter()
            .map(|&(_, y)| {
                self.classes
                    .iter()
                    .position(|&c| c == y)
                    .expect("query labels belong to the episode classes")
            })
            .collect()
    }
}

/// Samples `n_way` classes from `split` and `k_shot + m_query` nodes per
/// class, the first `k_shot` of which form the support set.
pub fn sample_task<R: Rng + ?Sized>(
    g: &AttributedGraph,
    split: &[usize],
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    rng: &mut R,
) -> Result<EpisodeTask, EpisodeError> {
    if split.len() < n_way {
        return Err(EpisodeError::SplitTooSmall {
            available: split.len(),
            needed: n_way,
        });
    }
    let needed = k_shot + m_query;
    for &c in split {
        let size = g.class_members(c).len();
        if size < needed {
            return Err(EpisodeError::ClassTooSmall {
                class: c,
                size,
                needed,
            });
        }
    }
    let classes: Vec<usize> = index::sample(rng, split.len(), n_way)
        .into_iter()
        .map(|i| split[i])
        .collect();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * m_query);
    for &c in &classes {
        let members = g.class_members(c);
        let picked = index::sample(rng, members.len(), needed).into_vec();
        support.extend(picked[..k_shot].iter().map(|&i| (members[i], c)));
        query.extend(picked[k_shot..].iter().map(|&i| (members[i], c)));
    }
    Ok(EpisodeTask {
        classes,
        k_shot,
        m_query,
        support,
        query,
    })
}

/// Classes of `split` with at least `needed` nodes; the rest are skipped
/// with a warning.
pub fn eligible_classes(g: &AttributedGraph, split: &[usize], needed: usize) -> Vec<usize> {
    let (keep, drop): (Vec<usize>, Vec<usize>) = split
        .iter()
        .partition(|&&c| g.class_members(c).len() >= needed);
    if !drop.is_empty() {
        warn!("skipping classes {drop:?}: fewer than {needed} nodes");
    }
    keep
}

/// Number of ways usable on a split: `requested`, or fewer when the split
/// has fewer eligible classes (never below 2).
pub fn resolve_ways(eligible: usize, requested: usize, which: &str) -> Result<usize, EpisodeError> {
    if eligible < 2 {
        return Err(EpisodeError::SplitTooSmall {
            available: eligible,
            needed: 2,
        });
    }
    if eligible < requested {
        warn!("{which} split has only {eligible} eligible classes; using {eligible}-way tasks instead of {requested}-way");
    }
    Ok(requested.min(eligible))
}

/// Replaces the last `per_class` support nodes of every class with nodes
/// drawn from the other episode classes, keeping the (now wrong) support
/// label.
pub fn mislabel_support<R: Rng + ?Sized>(
    g: &AttributedGraph,
    task: &mut EpisodeTask,
    per_class: usize,
    rng: &mut R,
) -> Result<(), EpisodeError> {
    if per_class == 0 {
        return Ok(());
    }
    if per_class > task.k_shot {
        return Err(EpisodeError::InvalidConfig(format!(
            "cannot mislabel {per_class} of {} support nodes",
            task.k_shot
        )));
    }
    let mut used: std::collections::HashSet<usize> = task
        .support
        .iter()
        .chain(&task.query)
        .map(|&(n, _)| n)
        .collect();
    for (ci, group) in task.support_groups().into_iter().enumerate() {
        let class = task.classes[ci];
        for slot in group.end - per_class..group.end {
            let pool: Vec<usize> = task
                .classes
                .iter()
                .filter(|&&c| c != class)
                .flat_map(|&c| g.class_members(c).iter().copied())
                .filter(|n| !used.contains(n))
                .collect();
            if pool.is_empty() {
                return Err(EpisodeError::NoDonor(class));
            }
            let donor = pool[rng.random_range(0..pool.len())];
            used.insert(donor);
            task.support[slot] = (donor, class);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub centrality_eps: f64,
    /// Validate every this many episodes.
    pub eval_every: usize,
    /// Stop after this many validations without improvement.
    pub patience: usize,
    pub val_tasks: usize,
    pub seed: u64,
    pub strategy: PrototypeStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 3,
            m_query: 3,
            episodes: 300,
            adam: AdamConfig::default(),
            dropout: 0.5,
            centrality_eps: DEFAULT_CENTRALITY_EPS,
            eval_every: 10,
            patience: 10,
            val_tasks: 20,
            seed: 0,
            strategy: PrototypeStrategy::Weighted,
        }
    }
}

impl TrainConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let bad = |m: String| Err(EpisodeError::InvalidConfig(m));
        if self.n_way < 2 {
            return bad(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.k_shot == 0 || self.m_query == 0 {
            return bad("k_shot and m_query must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.centrality_eps > 0.0) {
            return bad(format!("centrality eps must be positive, got {}", self.centrality_eps));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad(format!("invalid optimizer settings {a:?}"));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }
}

/// Tape handles of one episode's forward pass.
struct EpisodeGraph {
    loss: Var,
    encoder: EncoderVars,
    valuator: Option<ValuatorVars>,
}

#[allow(clippy::too_many_arguments)]
fn record_episode<'a, T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'a, T>,
    ctx: &'a GraphContext<T>,
    params: &ModelParams<T>,
    task: &EpisodeTask,
    strategy: PrototypeStrategy,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<EpisodeGraph, EpisodeError> {
    let x = tape.constant(ctx.features.clone());
    let enc = EncoderVars::record(tape, &params.encoder);
    let z = encode_on_tape(tape, x, &ctx.a_hat, &enc, dropout, training, rng)?;

    let groups = task.support_groups();
    let z_support = tape.gather_rows(z, task.support_nodes())?;
    let (weights, valuator) = match strategy {
        PrototypeStrategy::Weighted => {
            let vars = ValuatorVars::record(tape, &params.valuator);
            let scores = value_nodes_on_tape(tape, x, &ctx.a_hat, &ctx.centrality, &vars)?;
            let support_scores = tape.gather_rows(scores, task.support_nodes())?;
            (tape.segment_softmax(support_scores, groups.clone())?, Some(vars))
        }
        PrototypeStrategy::Mean => {
            let w: Vec<T> = groups
                .iter()
                .flat_map(|g| std::iter::repeat_n(T::one() / T::lit(g.len() as f64), g.len()))
                .collect();
            (tape.constant(Tensor::column(w)), None)
        }
    };
    let protos = tape.group_weighted_sum(z_support, weights, groups)?;
    let z_query = tape.gather_rows(z, task.query_nodes())?;
    let dist = tape.sq_dist(z_query, protos)?;
    let loss = tape.softmax_nll(dist, task.query_local_labels())?;
    Ok(EpisodeGraph {
        loss,
        encoder: enc,
        valuator,
    })
}

fn collect_grads<T: Real>(
    grads: &Gradients<T>,
    graph: &EpisodeGraph,
    params: &ModelParams<T>,
) -> ModelParams<T> {
    let mut out = params.zeros_like();
    let e = &graph.encoder;
    out.encoder.w0 = grads.wrt(e.w0, params.encoder.w0.shape());
    out.encoder.b0 = grads.wrt(e.b0, params.encoder.b0.shape());
    out.encoder.w1 = grads.wrt(e.w1, params.encoder.w1.shape());
    out.encoder.b1 = grads.wrt(e.b1, params.encoder.b1.shape());
    if let Some(v) = &graph.valuator {
        out.valuator.w_s = grads.wrt(v.w_s, params.valuator.w_s.shape());
        out.valuator.b_s = grads.wrt(v.b_s, params.valuator.b_s.shape());
        out.valuator.a1 = grads.wrt(v.a1, params.valuator.a1.shape());
        out.valuator.a2 = grads.wrt(v.a2, params.valuator.a2.shape());
    }
    out
}

/// Loss, class probabilities and (optionally) parameter gradients of one
/// episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutput<T> {
    pub loss: T,
    pub probs: ClassProbabilities<T>,
    pub grads: Option<ModelParams<T>>,
}

/// Forward (and, if `with_grads`, backward) pass of one episode through
/// the tape.
#[allow(clippy::too_many_arguments)]
pub fn episode_pass<T: Real, R: Rng + ?Sized>(
    ctx: &GraphContext<T>,
    params: &ModelParams<T>,
    task: &EpisodeTask,
    strategy: PrototypeStrategy,
    dropout: f64,
    training: bool,
    with_grads: bool,
    rng: &mut R,
) -> Result<EpisodeOutput<T>, EpisodeError> {
    let mut tape = Tape::new();
    let graph = record_episode(&mut tape, ctx, params, task, strategy, dropout, training, rng)?;
    let loss = tape.value(graph.loss).item();
    let probs = tape.nll_probs(graph.loss).expect("loss is an nll node").clone();
    let grads = if with_grads {
        let g = tape.backward(graph.loss)?;
        Some(collect_grads(&g, &graph, params))
    } else {
        None
    };
    Ok(EpisodeOutput { loss, probs, grads })
}

/// Runs one episode. With an optimizer state this is a training step:
/// dropout is active and the parameters receive one Adam update.
pub fn run_episode<T: Real, R: Rng + ?Sized>(
    ctx: &GraphContext<T>,
    params: &mut ModelParams<T>,
    task: &EpisodeTask,
    config: &TrainConfig,
    optimizer: Option<&mut AdamState<T>>,
    rng: &mut R,
) -> Result<(T, ClassProbabilities<T>), EpisodeError> {
    let training = optimizer.is_some();
    let out = episode_pass(ctx, params, task, config.strategy, config.dropout, training, training, rng)?;
    if !out.loss.is_finite() {
        return Err(EpisodeError::NonFiniteLoss(out.loss.as_f64()));
    }
    if let (Some(state), Some(grads)) = (optimizer, out.grads) {
        let grads: Vec<Tensor<T>> = grads.tensors().into_iter().cloned().collect();
        state.step(&mut params.tensors_mut(), &grads, &config.adam)?;
    }
    Ok((out.loss, out.probs))
}

/// Classifies a task's queries from precomputed eval-mode embeddings and
/// scores (the plain, tape-free route).
pub fn classify_task<T: Real>(
    embeddings: &Tensor<T>,
    scores: &ScoreVector<T>,
    task: &EpisodeTask,
    strategy: PrototypeStrategy,
) -> Result<(protonet::PrototypeSet<T>, ClassProbabilities<T>), EpisodeError> {
    let support = task.support_by_class();
    let weights = match strategy {
        PrototypeStrategy::Weighted => Some(protonet::support_weights(&scores.values, &support)?),
        PrototypeStrategy::Mean => None,
    };
    let protos = protonet::prototypes(embeddings, weights.as_deref(), &support, strategy)?;
    let probs = protonet::classify_all(embeddings, &task.query_nodes(), &protos)?;
    Ok((protos, probs))
}

pub fn task_metrics<T: Real>(
    probs: &ClassProbabilities<T>,
    task: &EpisodeTask,
) -> Result<RepeatMetrics, EpisodeError> {
    let preds = protonet::predict(probs);
    let labels = task.query_local_labels();
    let classes: Vec<usize> = (0..task.n_way()).collect();
    let f1 = metrics::f1_scores(&preds, &labels, &classes)?;
    Ok(RepeatMetrics {
        accuracy: metrics::accuracy(&preds, &labels)?,
        micro_f1: f1.micro,
        macro_f1: f1.macro_,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub episode: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
}

/// Line-delimited JSON, one record per episode.
pub fn history_to_jsonl(history: &[HistoryRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Best-validation snapshot, or the final parameters when validation
    /// never ran.
    pub params: ModelParams<T>,
    pub history: Vec<HistoryRecord>,
    pub best_val_accuracy: Option<f64>,
    pub stopped_early: bool,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mean_accuracy<T: Real>(
    ctx: &GraphContext<T>,
    params: &ModelParams<T>,
    tasks: &[EpisodeTask],
    strategy: PrototypeStrategy,
) -> Result<f64, EpisodeError> {
    let (z, s) = embed(ctx, params)?;
    let mut total = 0.0;
    for task in tasks {
        let (_, probs) = classify_task(&z, &s, task, strategy)?;
        total += task_metrics(&probs, task)?.accuracy;
    }
    Ok(total / tasks.len() as f64)
}

/// Episodic meta-training on the train split with periodic validation and
/// early stopping.
pub fn train<T: Real>(g: &AttributedGraph, config: &TrainConfig) -> Result<TrainOutcome<T>, EpisodeError> {
    config.validate()?;
    let ctx = GraphContext::<T>::new(g, config.centrality_eps);
    let mut params = ModelParams::init(g.feature_dim(), &mut seeded(config.seed, STREAM_INIT));
    if config.episodes == 0 {
        return Ok(TrainOutcome {
            params,
            history: Vec::new(),
            best_val_accuracy: None,
            stopped_early: false,
        });
    }

    let needed = config.k_shot + config.m_query;
    let train_classes = eligible_classes(g, g.split(Split::Train), needed);
    let train_ways = resolve_ways(train_classes.len(), config.n_way, "train")?;

    let val_classes = eligible_classes(g, g.split(Split::Val), needed);
    let val_tasks = match resolve_ways(val_classes.len(), config.n_way, "validation") {
        Ok(ways) if config.val_tasks > 0 => {
            let mut rng = seeded(config.seed, STREAM_VAL);
            (0..config.val_tasks)
                .map(|_| sample_task(g, &val_classes, ways, config.k_shot, config.m_query, &mut rng))
                .collect::<Result<Vec<_>, _>>()?
        }
        _ => {
            warn!("validation disabled; returning the final parameters");
            Vec::new()
        }
    };

    let mut task_rng = seeded(config.seed, STREAM_TASKS);
    let mut dropout_rng = seeded(config.seed, STREAM_DROPOUT);
    let mut adam = AdamState::new(&params.tensors());
    let mut history = Vec::with_capacity(config.episodes);
    let mut best: Option<(f64, ModelParams<T>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for episode in 0..config.episodes {
        let task = sample_task(g, &train_classes, train_ways, config.k_shot, config.m_query, &mut task_rng)?;
        let (loss, _) = run_episode(&ctx, &mut params, &task, config, Some(&mut adam), &mut dropout_rng)
            .map_err(|e| match e {
                EpisodeError::NonFiniteLoss(loss) => EpisodeError::Diverged { episode, loss },
                other => other,
            })?;

        let mut val_accuracy = None;
        if !val_tasks.is_empty() && (episode + 1) % config.eval_every == 0 {
            let acc = mean_accuracy(&ctx, &params, &val_tasks, config.strategy)?;
            debug!("episode {episode}: loss {loss} val acc {acc:.4}");
            val_accuracy = Some(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        history.push(HistoryRecord {
            episode,
            train_loss: loss.as_f64(),
            val_accuracy,
        });
        if since_best >= config.patience && best.is_some() {
            info!("early stopping after episode {episode}");
            stopped_early = true;
            break;
        }
    }

    let (best_val_accuracy, params) = match best {
        Some((acc, p)) => (Some(acc), p),
        None => (None, params),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_val_accuracy,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTestConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub num_tasks: usize,
    pub repeats: usize,
    pub seed: u64,
    pub strategy: PrototypeStrategy,
    pub centrality_eps: f64,
    /// Support nodes per class replaced by nodes of another class.
    pub mislabeled_per_class: usize,
    /// Worker threads for task evaluation; `None` uses the rayon default.
    pub threads: Option<usize>,
}

impl Default for MetaTestConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            m_query: 5,
            num_tasks: 50,
            repeats: 10,
            seed: 0,
            strategy: PrototypeStrategy::Weighted,
            centrality_eps: DEFAULT_CENTRALITY_EPS,
            mislabeled_per_class: 0,
            threads: None,
        }
    }
}

/// Reads [`THREADS_ENV`]; unset, empty or invalid values mean no cap.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Test-split classes large enough for `k_shot + m_query` nodes, and the
/// number of ways actually used.
fn test_classes(g: &AttributedGraph, cfg: &MetaTestConfig) -> Result<(Vec<usize>, usize), EpisodeError> {
    let classes = eligible_classes(g, g.split(Split::Test), cfg.k_shot + cfg.m_query);
    let ways = resolve_ways(classes.len(), cfg.n_way, "test")?;
    Ok((classes, ways))
}

fn sample_repeat(
    g: &AttributedGraph,
    cfg: &MetaTestConfig,
    classes: &[usize],
    ways: usize,
    repeat: usize,
) -> Result<Vec<EpisodeTask>, EpisodeError> {
    let mut rng = seeded(cfg.seed, repeat as u64);
    (0..cfg.num_tasks)
        .map(|_| {
            let mut task = sample_task(g, classes, ways, cfg.k_shot, cfg.m_query, &mut rng)?;
            mislabel_support(g, &mut task, cfg.mislabeled_per_class, &mut rng)?;
            Ok(task)
        })
        .collect()
}

/// Samples the tasks of one meta-test repeat.
pub fn meta_test_tasks(
    g: &AttributedGraph,
    cfg: &MetaTestConfig,
    repeat: usize,
) -> Result<Vec<EpisodeTask>, EpisodeError> {
    let (classes, ways) = test_classes(g, cfg)?;
    sample_repeat(g, cfg, &classes, ways, repeat)
}

/// Frozen-parameter evaluation on test-split tasks: `repeats` rounds of
/// `num_tasks` tasks each, summarised as mean and standard deviation.
pub fn meta_test<T: Real>(
    g: &AttributedGraph,
    params: &ModelParams<T>,
    cfg: &MetaTestConfig,
) -> Result<MetricReport, EpisodeError> {
    if cfg.num_tasks == 0 || cfg.repeats == 0 {
        return Err(EpisodeError::InvalidConfig("num_tasks and repeats must be positive".into()));
    }
    let ctx = GraphContext::<T>::new(g, cfg.centrality_eps);
    let (z, s) = embed(&ctx, params)?;
    let pool = match cfg.threads {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| EpisodeError::InvalidConfig(e.to_string()))?,
        ),
        None => None,
    };

    let (classes, ways) = test_classes(g, cfg)?;
    let mut per_repeat = Vec::with_capacity(cfg.repeats);
    for repeat in 0..cfg.repeats {
        let tasks = sample_repeat(g, cfg, &classes, ways, repeat)?;
        let score = |task: &EpisodeTask| {
            let (_, probs) = classify_task(&z, &s, task, cfg.strategy)?;
            task_metrics(&probs, task)
        };
        let results: Result<Vec<RepeatMetrics>, EpisodeError> = match &pool {
            Some(p) => p.install(|| tasks.par_iter().map(score).collect()),
            None => tasks.par_iter().map(score).collect(),
        };
        per_repeat.push(RepeatMetrics::mean_of(&results?));
    }
    Ok(MetricReport::from_repeats(
        ways,
        cfg.k_shot,
        cfg.m_query,
        cfg.num_tasks,
        cfg.strategy,
        per_repeat,
    ))
}

/// Support-versus-query similarity for one task. Support embeddings are
/// scaled by `K·β_i` and both axes are ordered by (class id, member).
pub fn similarity_for_task<T: Real>(
    ctx: &GraphContext<T>,
    params: &ModelParams<T>,
    task: &EpisodeTask,
    strategy: PrototypeStrategy,
) -> Result<SimilarityMatrix, EpisodeError> {
    let (z, s) = embed(ctx, params)?;
    let (protos, _) = classify_task(&z, &s, task, strategy)?;
    let k = T::lit(task.k_shot as f64);

    let mut order: Vec<usize> = (0..task.n_way()).collect();
    order.sort_by_key(|&c| task.classes[c]);
    let by_class = task.support_by_class();

    let mut row_labels = Vec::new();
    let mut u_rows = Vec::new();
    for &c in &order {
        for (member, (&node, &beta)) in by_class[c].iter().zip(&protos.weights[c]).enumerate() {
            row_labels.push((task.classes[c], member));
            u_rows.push(z.row(node).iter().map(|&x| (x * beta * k).as_f64()).collect::<Vec<f64>>());
        }
    }
    let mut col_labels = Vec::new();
    let mut v_rows = Vec::new();
    for &c in &order {
        let class = task.classes[c];
        for (member, &(node, _)) in task.query.iter().filter(|&&(_, y)| y == class).enumerate() {
            col_labels.push((class, member));
            v_rows.push(z.row(node).iter().map(|x| x.as_f64()).collect::<Vec<f64>>());
        }
    }
    let u = Tensor::from_rows(&u_rows)?;
    let v = Tensor::from_rows(&v_rows)?;
    let values = metrics::similarity_matrix(&u, &v)?;
    Ok(SimilarityMatrix::new(row_labels, col_labels, values)?)
}
