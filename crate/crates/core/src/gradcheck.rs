//! Central finite-difference checks of the analytic gradients.
//!
//! The numeric side evaluates the loss through the tape-free forward route
//! (eval mode) or, when dropout is enabled, replays the tape forward with
//! an identically seeded rng so both sides see the same masks.
//!
//! ReLU and LeakyReLU are not differentiable at zero, and a central
//! difference whose interval straddles a kink measures a chord rather than
//! a derivative. Random parameters are therefore redrawn until every
//! rectifier input is at least [`GradcheckConfig::kink_margin`] away from
//! zero.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compute::ops::{self, Activation};
use crate::compute::{ComputeError, Tape, Tensor, Var};
use crate::episodic::{classify_task, episode_pass, sample_task, EpisodeError, EpisodeTask};
use crate::graph::{AttributedGraph, ClassSplits, GraphError, DEFAULT_CENTRALITY_EPS};
use crate::model::{embed, GraphContext, ModelParams, PARAM_NAMES};
use crate::protonet::{self, PrototypeStrategy};
use crate::valuator::{self, ATTENTION_SLOPE};

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub nodes: usize,
    pub edges: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub dropout: f64,
    pub strategy: PrototypeStrategy,
    /// Minimum distance of every rectifier input from zero.
    pub kink_margin: f64,
    pub max_redraws: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            nodes: 30,
            edges: 80,
            feature_dim: 8,
            classes: 3,
            n_way: 3,
            k_shot: 2,
            m_query: 3,
            step: 1e-5,
            floor: 1e-6,
            dropout: 0.0,
            strategy: PrototypeStrategy::Weighted,
            kink_margin: 1e-4,
            max_redraws: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamError {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude seen for this tensor.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Parameter draws rejected for lying too close to a kink.
    pub redraws: usize,
    pub loss: f64,
    pub params: Vec<ParamError>,
}

impl SeedReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Uniform random graph with `edges` distinct undirected edges, features in
/// `[-1, 1]` and labels assigned round-robin. Every class sits in the train
/// split.
pub fn random_graph<R: Rng + ?Sized>(
    nodes: usize,
    edges: usize,
    feature_dim: usize,
    classes: usize,
    rng: &mut R,
) -> Result<AttributedGraph, GraphError> {
    let pairs = nodes * nodes.saturating_sub(1) / 2;
    let picked = index::sample(rng, pairs, edges.min(pairs));
    let mut edge_list: Vec<(usize, usize)> = picked.into_iter().map(|k| unrank_pair(k, nodes)).collect();
    edge_list.sort_unstable();
    let data = (0..nodes * feature_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let features = Tensor::from_vec(nodes, feature_dim, data).expect("sized");
    let labels = (0..nodes).map(|i| i % classes).collect();
    AttributedGraph::build(&edge_list, features, labels, ClassSplits::new((0..classes).collect(), vec![], vec![]))
}

/// Maps `k` to the `k`-th pair `(u, v)`, `u < v`, in row-major order.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut u = 0;
    while k >= n - u - 1 {
        k -= n - u - 1;
        u += 1;
    }
    (u, u + 1 + k)
}

/// Random parameters with non-zero biases so every gradient is exercised.
pub fn random_params<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> ModelParams<f64> {
    let mut p = ModelParams::init(feature_dim, rng);
    for b in [&mut p.encoder.b0, &mut p.encoder.b1, &mut p.valuator.b_s] {
        for x in b.as_mut_slice() {
            *x = rng.random_range(-0.1..=0.1);
        }
    }
    p
}

fn numeric_loss(
    ctx: &GraphContext<f64>,
    params: &ModelParams<f64>,
    task: &EpisodeTask,
    cfg: &GradcheckConfig,
    dropout_seed: u64,
) -> Result<f64, EpisodeError> {
    if cfg.dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let out = episode_pass(ctx, params, task, cfg.strategy, cfg.dropout, true, false, &mut rng)?;
        return Ok(out.loss);
    }
    let (z, scores) = embed(ctx, params)?;
    let (_, probs) = classify_task(&z, &scores, task, cfg.strategy)?;
    Ok(protonet::episode_loss(&probs, &task.query_local_labels())?)
}

/// Compares analytic and numeric gradients of one episode loss for every
/// parameter scalar.
pub fn check_episode(
    ctx: &GraphContext<f64>,
    params: &ModelParams<f64>,
    task: &EpisodeTask,
    cfg: &GradcheckConfig,
    dropout_seed: u64,
) -> Result<(f64, Vec<ParamError>), EpisodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let training = cfg.dropout > 0.0;
    let out = episode_pass(ctx, params, task, cfg.strategy, cfg.dropout, training, true, &mut rng)?;
    let grads = out.grads.expect("requested gradients");

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(PARAM_NAMES.len());
    for (t, name) in PARAM_NAMES.iter().enumerate() {
        let analytic = grads.tensors()[t].clone();
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = probe.tensors()[t].as_slice()[i];
            probe.tensors_mut()[t].as_mut_slice()[i] = orig + cfg.step;
            let plus = numeric_loss(ctx, &probe, task, cfg, dropout_seed)?;
            probe.tensors_mut()[t].as_mut_slice()[i] = orig - cfg.step;
            let minus = numeric_loss(ctx, &probe, task, cfg, dropout_seed)?;
            probe.tensors_mut()[t].as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic.as_slice()[i], numeric, cfg.floor));
        }
        report.push(ParamError {
            name,
            max_rel_error: worst,
            max_abs_grad: analytic.as_slice().iter().fold(0.0, |m, x| m.max(x.abs())),
        });
    }
    Ok((out.loss, report))
}

/// Smallest absolute input to any ReLU of the encoder or LeakyReLU of the
/// valuator attention, replaying the dropout masks drawn from
/// `dropout_seed` when `dropout > 0`.
pub fn kink_distance(
    ctx: &GraphContext<f64>,
    params: &ModelParams<f64>,
    dropout: f64,
    dropout_seed: u64,
) -> Result<f64, ComputeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let training = dropout > 0.0;
    let mut nearest = f64::INFINITY;
    let mut h = ctx.features.clone();
    let enc = &params.encoder;
    for (w, b) in [(&enc.w0, &enc.b0), (&enc.w1, &enc.b1)] {
        let dropped = ops::dropout(&h, dropout, training, &mut rng)?;
        let mut pre = ops::spmm(&ctx.a_hat, &dropped.matmul(w)?)?;
        ops::add_row_bias(&mut pre, b)?;
        nearest = pre.as_slice().iter().fold(nearest, |m, x| m.min(x.abs()));
        h = ops::activation(Activation::Relu, &pre);
    }

    let v = &params.valuator;
    let mut s = valuator::initial_scores(&ctx.features, &v.w_s, &v.b_s)?.values;
    for a in [&v.a1, &v.a2] {
        let (out, pre, _) = ops::neighbor_attention(&s, a.as_slice(), &ctx.a_hat, ATTENTION_SLOPE)?;
        nearest = pre.iter().fold(nearest, |m, x| m.min(x.abs()));
        s = out;
    }
    Ok(nearest)
}

/// Builds a random graph, parameters and task from `seed` and checks every
/// parameter gradient.
pub fn check_seed(cfg: &GradcheckConfig, seed: u64) -> Result<SeedReport, EpisodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(cfg.nodes, cfg.edges, cfg.feature_dim, cfg.classes, &mut rng)
        .map_err(|e| EpisodeError::InvalidConfig(e.to_string()))?;
    let ctx = GraphContext::new(&g, DEFAULT_CENTRALITY_EPS);
    let classes: Vec<usize> = (0..cfg.classes).collect();
    let task = sample_task(&g, &classes, cfg.n_way, cfg.k_shot, cfg.m_query, &mut rng)?;
    let dropout_seed: u64 = rng.random();

    let mut redraws = 0;
    let params = loop {
        let p = random_params(cfg.feature_dim, &mut rng);
        if kink_distance(&ctx, &p, cfg.dropout, dropout_seed)? >= cfg.kink_margin {
            break p;
        }
        redraws += 1;
        if redraws > cfg.max_redraws {
            return Err(EpisodeError::InvalidConfig(format!(
                "no parameter draw keeps rectifier inputs {} away from zero",
                cfg.kink_margin
            )));
        }
    };
    let (loss, params) = check_episode(&ctx, &params, &task, cfg, dropout_seed)?;
    Ok(SeedReport {
        seed,
        redraws,
        loss,
        params,
    })
}

/// Runs [`check_seed`] for every seed in `seeds`.
pub fn run(cfg: &GradcheckConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<SeedReport>, EpisodeError> {
    seeds.into_iter().map(|s| check_seed(cfg, s)).collect()
}

/// Checks the gradient of a scalar function of one input tensor recorded
/// on a tape. Returns the largest relative error over all input entries.
pub fn check_function<'a, F>(input: &Tensor<f64>, step: f64, floor: f64, f: F) -> Result<f64, ComputeError>
where
    F: Fn(&mut Tape<'a, f64>, Var) -> Result<Var, ComputeError>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64, ComputeError> {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let v = tape.param(input.clone());
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.wrt(v, input.shape());

    let mut probe = input.clone();
    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let orig = input.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.as_mut_slice()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic.as_slice()[i], numeric, floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_unrank_in_order() {
        let n = 5;
        let all: Vec<_> = (0..10).map(|k| unrank_pair(k, n)).collect();
        let mut expected = vec![];
        for u in 0..n {
            for v in u + 1..n {
                expected.push((u, v));
            }
        }
        assert_eq!(all, expected);
    }

    #[test]
    fn random_graph_has_requested_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(30, 80, 4, 3, &mut rng).unwrap();
        assert_eq!((g.num_nodes(), g.num_edges(), g.feature_dim()), (30, 80, 4));
        assert_eq!(g.class_members(2).len(), 10);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn single_seed_passes_in_eval_mode() {
        let r = check_seed(&GradcheckConfig::default(), 1).unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn single_seed_passes_with_dropout() {
        let cfg = GradcheckConfig {
            dropout: 0.5,
            ..Default::default()
        };
        let r = check_seed(&cfg, 2).unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn kink_guard_is_what_separates_chords_from_derivatives() {
        // this seed's first draw puts a first-layer ReLU input within one step of zero
        let unguarded = GradcheckConfig {
            kink_margin: 0.0,
            ..Default::default()
        };
        let r = check_seed(&unguarded, 7).unwrap();
        assert!(r.max_rel_error() > 1e-2, "{r:?}");
        let guarded = check_seed(&GradcheckConfig::default(), 7).unwrap();
        assert!(guarded.redraws > 0);
        assert!(guarded.max_rel_error() < 1e-4);
    }

    #[test]
    fn function_check_on_square_norm() {
        let x = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let e = check_function(&x, 1e-5, 1e-6, |t, v| t.sum_squares(v)).unwrap();
        assert!(e < 1e-8);
    }
}
