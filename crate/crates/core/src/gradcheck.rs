//! Central finite-difference checks of the graph + ranking-loss gradients.
//!
//! The numeric side only ever calls [`graphnet::forward`] and
//! [`rankloss::ranking_loss`]; the analytic side goes through
//! [`graphnet::backward`].

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::graphnet::{self, FeatureBundle, GraphParams, GraphSet};
use crate::rankloss::{self, LossConfig, RankedScores};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Relative error `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// One image worth of inputs for the loss pipeline.
#[derive(Debug, Clone)]
pub struct Case {
    pub bundle: FeatureBundle,
    pub params: GraphParams,
    pub gt_ranks: Vec<u32>,
    pub loss: LossConfig,
}

impl Case {
    pub fn loss(&self) -> Result<f64> {
        pipeline_loss(&self.bundle, &self.params, &self.gt_ranks, &self.loss)
    }
}

pub fn pipeline_loss(
    bundle: &FeatureBundle,
    params: &GraphParams,
    gt_ranks: &[u32],
    cfg: &LossConfig,
) -> Result<f64> {
    let out = graphnet::forward(bundle, params)?;
    let rs = RankedScores::new(out.scores.to_vec(), gt_ranks.to_vec())?;
    rankloss::ranking_loss(&rs, cfg)
}

/// Analytic gradients of the pipeline loss.
pub fn pipeline_gradients(case: &Case) -> Result<(f64, graphnet::Gradients)> {
    let (out, cache) = graphnet::forward_with_cache(&case.bundle, &case.params)?;
    let rs = RankedScores::new(out.scores.to_vec(), case.gt_ranks.clone())?;
    let (loss, d_scores) = rankloss::ranking_loss_with_grad(&rs, &case.loss)?;
    let grads = graphnet::backward(&case.bundle, &case.params, &out, &cache, &d_scores)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Name of the entry with the largest error, e.g. `U_r_k0[3]` or `f_local[1,2]`.
    pub worst: String,
}

impl Report {
    fn record(&mut self, name: impl FnOnce() -> String, err: f64) {
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = name();
        }
    }

    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

impl Default for Report {
    fn default() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        }
    }
}

/// Compares every parameter and every input-feature gradient against
/// central differences with step `h`.
pub fn check_case(case: &Case, h: f64) -> Result<Report> {
    let (_, grads) = pipeline_gradients(case)?;
    let mut report = Report::default();

    let mut params = case.params.clone();
    let analytic = grads.params.tensors();
    for (t, tensor) in analytic.iter().enumerate() {
        for (e, &a) in tensor.data.iter().enumerate() {
            let original = params.slices_mut()[t][e];
            params.slices_mut()[t][e] = original + h;
            let plus = pipeline_loss(&case.bundle, &params, &case.gt_ranks, &case.loss)?;
            params.slices_mut()[t][e] = original - h;
            let minus = pipeline_loss(&case.bundle, &params, &case.gt_ranks, &case.loss)?;
            params.slices_mut()[t][e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(|| format!("{}[{e}]", tensor.name), relative_error(a, numeric));
        }
    }

    let mut bundle = case.bundle.clone();
    for (name, which) in [("f", 0), ("f_local", 1), ("f_global", 2), ("f_person", 3)] {
        let analytic = feature(&grads.bundle, which).clone();
        for ((i, j), &a) in analytic.indexed_iter() {
            let original = feature(&bundle, which)[[i, j]];
            feature_mut(&mut bundle, which)[[i, j]] = original + h;
            let plus = pipeline_loss(&bundle, &case.params, &case.gt_ranks, &case.loss)?;
            feature_mut(&mut bundle, which)[[i, j]] = original - h;
            let minus = pipeline_loss(&bundle, &case.params, &case.gt_ranks, &case.loss)?;
            feature_mut(&mut bundle, which)[[i, j]] = original;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(|| format!("{name}[{i},{j}]"), relative_error(a, numeric));
        }
    }
    Ok(report)
}

fn feature(b: &FeatureBundle, which: usize) -> &Array2<f64> {
    match which {
        0 => &b.f,
        1 => &b.f_local,
        2 => &b.f_global,
        _ => &b.f_person,
    }
}

fn feature_mut(b: &mut FeatureBundle, which: usize) -> &mut Array2<f64> {
    match which {
        0 => &mut b.f,
        1 => &mut b.f_local,
        2 => &mut b.f_global,
        _ => &mut b.f_person,
    }
}

/// Smallest `|logit|` over every attention edge. Finite differences are
/// only meaningful away from the ReLU kink.
pub fn min_abs_logit(case: &Case) -> Result<f64> {
    let (_, cache) = graphnet::forward_with_cache(&case.bundle, &case.params)?;
    Ok(cache
        .subgraphs
        .iter()
        .flat_map(|sg| [&sg.relation, &sg.local, &sg.global])
        .flatten()
        .flat_map(|c| c.logits().iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min))
}

/// Logit margin required of [`random_case`] draws.
pub const KINK_MARGIN: f64 = 1e-3;

/// Random case with `N` in 2..=5, `D` in {16, 32}, `K` in {1, 2, 4} and
/// `M` in 1..=3. Draws with an attention logit closer than [`KINK_MARGIN`]
/// to zero are redrawn.
pub fn random_case(rng: &mut impl Rng) -> Result<Case> {
    loop {
        let n = rng.gen_range(2..=5);
        let dim = *[16, 32].choose(rng).unwrap();
        let k = *[1, 2, 4].choose(rng).unwrap();
        let m = rng.gen_range(1..=3);
        let mut params = GraphParams::init(dim, k, GraphSet::ALL, rng)?;
        params.b_s = rng.gen_range(-0.5..0.5);
        for sg in &mut params.subgraphs {
            sg.person.alpha = rng.gen_range(-1.5..1.5);
        }
        let mut feats = |rows: usize| {
            Array2::from_shape_simple_fn((rows, dim), || rng.gen_range(-1.0..1.0))
        };
        let bundle = FeatureBundle {
            f: feats(n),
            f_local: feats(n),
            f_global: feats(m * m),
            f_person: feats(n),
        };
        let mut gt_ranks: Vec<u32> = (1..=n as u32).collect();
        gt_ranks.shuffle(rng);
        let gamma = *[0.0, 0.5, 1.0, 1.5].choose(rng).unwrap();
        let case = Case {
            bundle,
            params,
            gt_ranks,
            loss: LossConfig { gamma },
        };
        if min_abs_logit(&case)? >= KINK_MARGIN {
            return Ok(case);
        }
    }
}
