//! Synthetic ranking tasks and a small trainer for the graph module.
//!
//! The synthetic recipe builds features where every graph carries a cue
//! the others cannot see:
//!
//! | cue      | visible through   | latent term                            |
//! |----------|-------------------|----------------------------------------|
//! | base     | `f_i`             | `a . x_i + |b . x_i|`                  |
//! | local    | `f_i`, `f_i^l`    | `||f_i - f_i^l||`                      |
//! | global   | `f_i`, `f^g`      | `|f_i[c] - mean_j f_j^g[c]|`           |
//! | person   | `f_i^p`           | bonus when the person flag is set      |
//!
//! plus unobserved annotation noise. Ground-truth rank 1 goes to the largest
//! latent value.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::correlation::{ordinal_ranks, pearson};
use crate::error::{Error, Result};
use crate::graphnet::{self, Checkpoint, FeatureBundle, GraphParams, GraphSet, TensorRecord};
use crate::metrics::rank_orders_from_scores;
use crate::rankloss::{self, LossConfig, RankedScores};

/// Constant 1 in every feature type, so attention and messages can carry a bias.
pub const BIAS_COORD: usize = 0;
/// Appearance block read by the base term.
pub const APPEARANCE: std::ops::Range<usize> = 1..9;
/// Coordinate where the local context differs from the instance.
pub const LOCAL_COORD: usize = 9;
/// Coordinate compared against the scene mean.
pub const GLOBAL_COORD: usize = 10;
/// Person flag inside `f_person`.
pub const PERSON_COORD: usize = 11;
/// Smallest feature dimension that holds every cue.
pub const MIN_DIM: usize = 12;
/// Rank classes used by the classification baseline.
pub const RANK_CLASSES: usize = 8;

/// Term weights of the latent saliency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub base_linear: f64,
    pub base_abs: f64,
    pub local: f64,
    pub global: f64,
    pub person: f64,
    /// Standard deviation of the annotation noise.
    pub noise: f64,
    /// Probability that an instance carries the person flag.
    pub person_rate: f64,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            base_linear: 1.0,
            base_abs: 1.0,
            local: 1.0,
            global: 1.0,
            person: 1.5,
            noise: 0.3,
            person_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub samples: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    pub grid: usize,
    pub recipe: Recipe,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 3000,
            min_instances: 2,
            max_instances: 8,
            dim: 32,
            grid: 3,
            recipe: Recipe::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub bundle: FeatureBundle,
    /// Descending rank orders, 1 = most salient.
    pub gt_ranks: Vec<u32>,
    pub latent: Vec<f64>,
}

/// Directions of the base term, fixed per task.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDirections {
    pub linear: Array1<f64>,
    pub abs: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: SyntheticTask,
    pub directions: BaseDirections,
    pub samples: Vec<Sample>,
}

fn unit_vector(len: usize, rng: &mut impl Rng) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_simple_fn(len, || StandardNormal.sample(rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

impl Recipe {
    /// Latent saliency of instance `i` without the annotation noise.
    pub fn latent(&self, dirs: &BaseDirections, bundle: &FeatureBundle, i: usize) -> f64 {
        let f = bundle.f.row(i);
        let x = f.slice(ndarray::s![APPEARANCE]);
        let base = self.base_linear * dirs.linear.dot(&x) + self.base_abs * dirs.abs.dot(&x).abs();
        let diff = &f - &bundle.f_local.row(i);
        let local = diff.dot(&diff).sqrt();
        let scene = bundle.f_global.column(GLOBAL_COORD).mean().unwrap_or(0.0);
        let global = (f[GLOBAL_COORD] - scene).abs();
        let flag = bundle.f_person[[i, PERSON_COORD]];
        base + self.local * local + self.global * global + self.person * flag
    }
}

impl SyntheticTask {
    fn validate(&self) -> Result<()> {
        if self.dim < MIN_DIM {
            return Err(Error::InvalidInput(format!(
                "synthetic features need at least {MIN_DIM} dimensions"
            )));
        }
        if self.min_instances < 2 || self.max_instances < self.min_instances {
            return Err(Error::InvalidInput(format!(
                "instance range {}..={} must start at 2 or more",
                self.min_instances, self.max_instances
            )));
        }
        if self.max_instances > RANK_CLASSES {
            return Err(Error::InvalidInput(format!(
                "at most {RANK_CLASSES} instances per image"
            )));
        }
        if self.grid == 0 {
            return Err(Error::InvalidInput("grid size must be positive".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_sample(
    task: &SyntheticTask,
    dirs: &BaseDirections,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let d = task.dim;
    let n = rng.gen_range(task.min_instances..=task.max_instances);
    let m2 = task.grid * task.grid;
    let mut noise_matrix = |rows: usize| Array2::from_shape_simple_fn((rows, d), || normal(rng));

    let mut f = noise_matrix(n);
    let mut f_person = noise_matrix(n);
    let mut f_global = noise_matrix(m2);
    f.column_mut(BIAS_COORD).fill(1.0);
    f_person.column_mut(BIAS_COORD).fill(1.0);
    f_global.column_mut(BIAS_COORD).fill(1.0);

    // scene value plus small per-node jitter; instances spread around it
    let scene = rng.gen_range(-1.0..1.0);
    for j in 0..m2 {
        f_global[[j, GLOBAL_COORD]] = scene + 0.1 * normal(rng);
    }
    for i in 0..n {
        f[[i, GLOBAL_COORD]] = rng.gen_range(-2.0..2.0);
        f[[i, LOCAL_COORD]] = rng.gen_range(-1.0..1.0);
        f_person[[i, PERSON_COORD]] = if rng.gen_bool(task.recipe.person_rate) { 1.0 } else { 0.0 };
    }
    // local context: the instance itself, shifted along one coordinate
    let mut f_local = f.clone();
    for i in 0..n {
        f_local[[i, LOCAL_COORD]] += rng.gen_range(-1.5..1.5);
    }

    let bundle = FeatureBundle {
        f,
        f_local,
        f_global,
        f_person,
    };
    let mut latent: Vec<f64> = (0..n)
        .map(|i| task.recipe.latent(dirs, &bundle, i) + task.recipe.noise * normal(rng))
        .collect();
    // separate exact ties deterministically
    for i in 0..n {
        for j in 0..i {
            if latent[i] == latent[j] {
                latent[i] += 1e-9 * (i + 1) as f64;
            }
        }
    }
    let gt_ranks = rank_orders_from_scores(&latent);
    Sample {
        bundle,
        gt_ranks,
        latent,
    }
}

/// Deterministic dataset for `task.seed`.
pub fn generate_synthetic(task: &SyntheticTask) -> Result<Dataset> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let width = APPEARANCE.len();
    let directions = BaseDirections {
        linear: unit_vector(width, &mut rng),
        abs: unit_vector(width, &mut rng),
    };
    let samples = (0..task.samples)
        .map(|_| draw_sample(task, &directions, &mut rng))
        .collect();
    Ok(Dataset {
        task: task.clone(),
        directions,
        samples,
    })
}

/// The Table-3-style model ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    NoGraph,
    RelationOnly,
    RelationLocal,
    RelationLocalGlobal,
    FullGraphs,
}

impl ModelKind {
    pub const LADDER: [ModelKind; 5] = [
        ModelKind::NoGraph,
        ModelKind::RelationOnly,
        ModelKind::RelationLocal,
        ModelKind::RelationLocalGlobal,
        ModelKind::FullGraphs,
    ];

    pub fn graphs(self) -> GraphSet {
        let level = Self::LADDER.iter().position(|&m| m == self).unwrap();
        GraphSet {
            relation: level >= 1,
            local: level >= 2,
            global: level >= 3,
            person: level >= 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::NoGraph => "no-graph",
            ModelKind::RelationOnly => "relation-only",
            ModelKind::RelationLocal => "relation+local",
            ModelKind::RelationLocalGlobal => "relation+local+global",
            ModelKind::FullGraphs => "full-graphs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Pairwise ranking loss with rank-difference weights `|dr|^gamma`.
    WeightedRanking,
    /// Pairwise ranking loss with equal pair weights.
    UniformRanking,
    /// Softmax cross-entropy over rank classes.
    RankClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    GradientDescent,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub steps: usize,
    pub gamma: f64,
    pub loss: LossKind,
    pub model: ModelKind,
    /// Subgraph count `K`.
    pub subgraphs: usize,
    /// Seeds parameter initialization and sample order.
    pub seed: u64,
    /// Steps between metric log records; 0 logs only the final step.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 2e-3,
            steps: 12000,
            gamma: 1.0,
            loss: LossKind::WeightedRanking,
            model: ModelKind::FullGraphs,
            subgraphs: 4,
            seed: 0,
            log_every: 200,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidInput(format!("gamma {} < 0", self.gamma)));
        }
        Ok(())
    }

    /// Learning rate at `step`: divided by 10 after 75% and again after 90%
    /// of the run.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps.max(1) as f64;
        if frac >= 0.9 {
            self.learning_rate / 100.0
        } else if frac >= 0.75 {
            self.learning_rate / 10.0
        } else {
            self.learning_rate
        }
    }
}

/// Linear softmax head over `f^u` for the rank-classification baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `RANK_CLASSES x D`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            weights: Array2::from_shape_simple_fn((RANK_CLASSES, dim), || {
                rng.gen_range(-bound..bound)
            }),
            bias: Array1::zeros(RANK_CLASSES),
        }
    }

    fn probabilities(&self, f_updated: &Array2<f64>) -> Array2<f64> {
        let mut logits = f_updated.dot(&self.weights.t()) + &self.bias;
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        logits
    }

    /// Expected "inverse rank" `sum_c p_c (8 - c)`: class 0 (rank 1) counts most.
    fn scores(probs: &Array2<f64>) -> Vec<f64> {
        probs
            .rows()
            .into_iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(c, &pc)| pc * (RANK_CLASSES - c) as f64)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub graph: GraphParams,
    pub classifier: Option<ClassifierHead>,
}

impl Model {
    pub fn init(dim: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let graph = GraphParams::init(dim, cfg.subgraphs, cfg.model.graphs(), &mut rng)?;
        let classifier = (cfg.loss == LossKind::RankClassification)
            .then(|| ClassifierHead::init(dim, &mut rng));
        Ok(Self { graph, classifier })
    }

    /// Saliency scores; higher = more salient.
    pub fn scores(&self, bundle: &FeatureBundle) -> Result<Vec<f64>> {
        let out = graphnet::forward(bundle, &self.graph)?;
        Ok(match &self.classifier {
            Some(head) => ClassifierHead::scores(&head.probabilities(&out.f_updated)),
            None => out.scores.to_vec(),
        })
    }

    /// Graph parameters plus, for the classification baseline, the head as
    /// extra tensors `W_cls` and `b_cls`.
    pub fn checkpoint(&self, grid: usize) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(&self.graph, grid);
        if let Some(head) = &self.classifier {
            ckpt.extra = vec![
                TensorRecord {
                    name: "W_cls".into(),
                    shape: vec![RANK_CLASSES, self.graph.dim()],
                    data: head.weights.iter().copied().collect(),
                },
                TensorRecord {
                    name: "b_cls".into(),
                    shape: vec![RANK_CLASSES],
                    data: head.bias.to_vec(),
                },
            ];
        }
        ckpt
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.graph.slices_mut();
        if let Some(head) = &mut self.classifier {
            out.push(head.weights.as_slice_mut().unwrap());
            out.push(head.bias.as_slice_mut().unwrap());
        }
        out
    }
}

/// Loss of one sample and the gradient for every model slice, in
/// [`Model::slices_mut`] order.
fn loss_and_grad(model: &Model, sample: &Sample, cfg: &TrainConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    let bundle = &sample.bundle;
    let (out, cache) = graphnet::forward_with_cache(bundle, &model.graph)?;
    match (&model.classifier, cfg.loss) {
        (Some(head), LossKind::RankClassification) => {
            let probs = head.probabilities(&out.f_updated);
            let n = bundle.num_instances();
            let mut d_logits = probs.clone();
            let mut loss = 0.0;
            for (i, &r) in sample.gt_ranks.iter().enumerate() {
                let class = r as usize - 1;
                loss -= probs[[i, class]].max(f64::MIN_POSITIVE).ln();
                d_logits[[i, class]] -= 1.0;
            }
            loss /= n as f64;
            d_logits /= n as f64;
            let d_w = d_logits.t().dot(&out.f_updated);
            let d_b = d_logits.sum_axis(Axis(0));
            let d_updated = d_logits.dot(&head.weights);
            let grads = graphnet::backward_features(bundle, &model.graph, &cache, &d_updated)?;
            let mut flat: Vec<Vec<f64>> =
                grads.params.tensors().iter().map(|t| t.data.to_vec()).collect();
            flat.push(d_w.into_raw_vec_and_offset().0);
            flat.push(d_b.to_vec());
            Ok((loss, flat))
        }
        _ => {
            let gamma = match cfg.loss {
                LossKind::UniformRanking => 0.0,
                _ => cfg.gamma,
            };
            let rs = RankedScores::new(out.scores.to_vec(), sample.gt_ranks.clone())?;
            let (loss, d_scores) = rankloss::ranking_loss_with_grad(&rs, &LossConfig { gamma })?;
            let grads = graphnet::backward(bundle, &model.graph, &out, &cache, &d_scores)?;
            let flat = grads.params.tensors().iter().map(|t| t.data.to_vec()).collect();
            Ok((loss, flat))
        }
    }
}

/// Mean loss of `model` over the dataset.
pub fn dataset_loss(model: &Model, data: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        total += loss_and_grad(model, s, cfg)?.0;
    }
    Ok(total / data.len().max(1) as f64)
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub loss: f64,
    /// Mean rank correlation on the evaluation set, when one was given.
    pub eval: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Per-step training loss.
    pub losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

/// Batch-size-1 training. Samples are visited in a fresh shuffled order
/// every epoch.
pub fn train(
    model: Model,
    train_set: &[Sample],
    eval_set: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() && cfg.steps > 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_5a_1e_u64);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = AdamState {
        m: model.slices_mut().iter().map(|s| vec![0.0; s.len()]).collect(),
        v: model.slices_mut().iter().map(|s| vec![0.0; s.len()]).collect(),
        t: 0,
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0usize;

    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
        }
        let sample = &train_set[order.pop().unwrap()];
        let (loss, grads) = loss_and_grad(&model, sample, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        window += loss;
        window_len += 1;

        let lr = cfg.learning_rate_at(step);
        adam.t += 1;
        let bias1 = 1.0 - BETA1.powi(adam.t);
        let bias2 = 1.0 - BETA2.powi(adam.t);
        for (t, slice) in model.slices_mut().into_iter().enumerate() {
            for (e, w) in slice.iter_mut().enumerate() {
                let g = grads[t][e];
                match cfg.optimizer {
                    Optimizer::GradientDescent => *w -= lr * g,
                    Optimizer::Adam => {
                        let m = &mut adam.m[t][e];
                        let v = &mut adam.v[t][e];
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        if !model.graph.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }

        let last = step + 1 == cfg.steps;
        if last || (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
            let eval = eval_set.map(|e| evaluate_ranking(&model, e)).transpose()?;
            log.push(LogRecord {
                step: step + 1,
                loss: window / window_len as f64,
                eval,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome { model, losses, log })
}

/// Pearson correlation of ascending predicted ranks with ascending GT ranks.
pub fn rank_correlation(scores: &[f64], gt_ranks: &[u32]) -> f64 {
    let n = gt_ranks.len();
    let pred: Vec<f64> = ordinal_ranks(scores).into_iter().map(|r| r as f64).collect();
    let gt: Vec<f64> = gt_ranks.iter().map(|&r| (n as u32 - r + 1) as f64).collect();
    pearson(&pred, &gt).unwrap_or(0.0)
}

/// Mean rank correlation over the samples. Every instance counts as
/// matched since no masks are simulated.
pub fn evaluate_ranking(model: &Model, data: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        total += rank_correlation(&model.scores(&s.bundle)?, &s.gt_ranks);
    }
    Ok(total / data.len().max(1) as f64)
}

/// Sizes of one synthetic train/evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub task: SyntheticTask,
    pub eval_samples: usize,
    pub train: TrainConfig,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            task: SyntheticTask::default(),
            eval_samples: 300,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub eval_score: f64,
}

/// Generates train and held-out sets from `seed`, trains, and evaluates.
/// Both sets share the base directions of the training task.
pub fn run_experiment(exp: &Experiment, seed: u64) -> Result<ExperimentResult> {
    let task = SyntheticTask {
        seed,
        ..exp.task.clone()
    };
    let data = generate_synthetic(&SyntheticTask {
        samples: task.samples + exp.eval_samples,
        ..task
    })?;
    let (train_set, eval_set) = data.samples.split_at(exp.task.samples);
    let cfg = TrainConfig {
        seed,
        ..exp.train.clone()
    };
    let model = Model::init(exp.task.dim, &cfg)?;
    let outcome = train(model, train_set, Some(eval_set), &cfg)?;
    let eval_score = evaluate_ranking(&outcome.model, eval_set)?;
    Ok(ExperimentResult {
        outcome,
        eval_score,
    })
}
