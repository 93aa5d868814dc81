//! Four-graph attention reasoning over salient instances.
//!
//! Each of `K` subgraphs aggregates messages for every instance node from
//!
//! - the relation graph: all instances, including itself, with attention
//!   `ReLU(w_alpha . [U f_i ; V f_j]) / N`;
//! - the local contrast graph: the instance's own enlarged-box context,
//!   with attention `ReLU(w_alpha . [U f_i ; V f_i^l])`;
//! - the global contrast graph: all `M x M` pooled scene nodes, with
//!   attention `ReLU(w_alpha . [U f_i ; V f_j^g]) / M^2`;
//! - the person prior: `alpha_p * W_a^p f_i^p`, a static weight.
//!
//! Subgraph `k` produces `W_u^r h^r + W_u^l h^l + W_u^g h^g + h^p`, the `K`
//! outputs are concatenated and added to `f_i`, and a linear head scores
//! the updated feature.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-image graph inputs. Rows are instances (or global nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Instance features, `N x D`.
    pub f: Array2<f64>,
    /// Local-context features, `N x D`.
    pub f_local: Array2<f64>,
    /// Global-context grid flattened row-major, `M^2 x D`.
    pub f_global: Array2<f64>,
    /// Person-prior features, `N x D`.
    pub f_person: Array2<f64>,
}

impl FeatureBundle {
    pub fn num_instances(&self) -> usize {
        self.f.nrows()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    /// Side `M` of the global grid.
    pub fn grid_size(&self) -> usize {
        (self.f_global.nrows() as f64).sqrt().round() as usize
    }

    pub fn zeros(n: usize, dim: usize, grid: usize) -> Self {
        Self {
            f: Array2::zeros((n, dim)),
            f_local: Array2::zeros((n, dim)),
            f_global: Array2::zeros((grid * grid, dim)),
            f_person: Array2::zeros((n, dim)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.f.dim();
        if n == 0 {
            return Err(Error::InvalidInput("feature bundle has no instances".into()));
        }
        let m = self.grid_size();
        if m == 0 || m * m != self.f_global.nrows() {
            return Err(Error::InvalidInput(format!(
                "global features have {} rows, not a square grid",
                self.f_global.nrows()
            )));
        }
        for (name, arr, rows) in [
            ("f_local", &self.f_local, n),
            ("f_global", &self.f_global, m * m),
            ("f_person", &self.f_person, n),
        ] {
            if arr.dim() != (rows, d) {
                return Err(Error::DimensionMismatch {
                    expected: format!("{name} {rows}x{d}"),
                    actual: format!("{}x{}", arr.nrows(), arr.ncols()),
                });
            }
        }
        let all = [&self.f, &self.f_local, &self.f_global, &self.f_person];
        if all.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// Which graphs contribute to the update. All disabled gives direct
/// regression from `f_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSet {
    pub relation: bool,
    pub local: bool,
    pub global: bool,
    pub person: bool,
}

impl GraphSet {
    pub const ALL: Self = Self {
        relation: true,
        local: true,
        global: true,
        person: true,
    };
    pub const NONE: Self = Self {
        relation: false,
        local: false,
        global: false,
        person: false,
    };
}

impl Default for GraphSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// Weights of one attention graph inside one subgraph. `C = D / K`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Target embedding, `C x D`.
    pub u: Array2<f64>,
    /// Source embedding, `C x D`.
    pub v: Array2<f64>,
    /// Attention projection over `[U f ; V f']`, length `2C`.
    pub w_alpha: Array1<f64>,
    /// Message projection, `C x D`.
    pub w_a: Array2<f64>,
    /// Update projection, `C x C`.
    pub w_u: Array2<f64>,
}

impl AttentionParams {
    fn zeros(c: usize, d: usize) -> Self {
        Self {
            u: Array2::zeros((c, d)),
            v: Array2::zeros((c, d)),
            w_alpha: Array1::zeros(2 * c),
            w_a: Array2::zeros((c, d)),
            w_u: Array2::zeros((c, c)),
        }
    }

    fn random(c: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            u: uniform((c, d), d, rng),
            v: uniform((c, d), d, rng),
            w_alpha: uniform((1, 2 * c), 2 * c, rng).into_shape_with_order(2 * c).unwrap(),
            w_a: uniform((c, d), d, rng),
            w_u: uniform((c, c), c, rng),
        }
    }

    fn target_weights(&self) -> ArrayView1<'_, f64> {
        let c = self.u.nrows();
        self.w_alpha.slice(s![..c])
    }

    fn source_weights(&self) -> ArrayView1<'_, f64> {
        let c = self.u.nrows();
        self.w_alpha.slice(s![c..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonParams {
    /// `C x D`.
    pub w_a: Array2<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub relation: AttentionParams,
    pub local: AttentionParams,
    pub global: AttentionParams,
    pub person: PersonParams,
}

/// All learnable weights. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams {
    pub graphs: GraphSet,
    pub subgraphs: Vec<Subgraph>,
    /// Scoring head weights, length `D`.
    pub w_s: Array1<f64>,
    pub b_s: f64,
}

fn uniform(shape: (usize, usize), fan_in: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

fn check_split(dim: usize, k: usize) -> Result<usize> {
    if k == 0 || dim == 0 || dim % k != 0 {
        return Err(Error::InvalidInput(format!(
            "feature dimension {dim} is not divisible by {k} subgraphs"
        )));
    }
    Ok(dim / k)
}

impl GraphParams {
    pub fn zeros(dim: usize, k: usize, graphs: GraphSet) -> Result<Self> {
        let c = check_split(dim, k)?;
        Ok(Self {
            graphs,
            subgraphs: (0..k)
                .map(|_| Subgraph {
                    relation: AttentionParams::zeros(c, dim),
                    local: AttentionParams::zeros(c, dim),
                    global: AttentionParams::zeros(c, dim),
                    person: PersonParams {
                        w_a: Array2::zeros((c, dim)),
                        alpha: 0.0,
                    },
                })
                .collect(),
            w_s: Array1::zeros(dim),
            b_s: 0.0,
        })
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, `alpha_p = 1`, zero head bias.
    pub fn init(dim: usize, k: usize, graphs: GraphSet, rng: &mut impl Rng) -> Result<Self> {
        let c = check_split(dim, k)?;
        let subgraphs = (0..k)
            .map(|_| Subgraph {
                relation: AttentionParams::random(c, dim, rng),
                local: AttentionParams::random(c, dim, rng),
                global: AttentionParams::random(c, dim, rng),
                person: PersonParams {
                    w_a: uniform((c, dim), dim, rng),
                    alpha: 1.0,
                },
            })
            .collect();
        let w_s = uniform((1, dim), dim, rng).into_shape_with_order(dim).unwrap();
        Ok(Self {
            graphs,
            subgraphs,
            w_s,
            b_s: 0.0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.num_subgraphs(), self.graphs).expect("shape already valid")
    }

    pub fn dim(&self) -> usize {
        self.w_s.len()
    }

    pub fn num_subgraphs(&self) -> usize {
        self.subgraphs.len()
    }

    /// Per-subgraph channel count `C = D / K`.
    pub fn channels(&self) -> usize {
        self.dim() / self.num_subgraphs().max(1)
    }

    /// Named views of every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (k, sg) in self.subgraphs.iter().enumerate() {
            for (tag, p) in [("r", &sg.relation), ("l", &sg.local), ("g", &sg.global)] {
                for (name, (shape, data)) in [
                    ("U", mat(&p.u)),
                    ("V", mat(&p.v)),
                    ("Walpha", (vec![p.w_alpha.len()], p.w_alpha.as_slice().unwrap())),
                    ("Wa", mat(&p.w_a)),
                    ("Wu", mat(&p.w_u)),
                ] {
                    out.push(NamedTensor {
                        name: format!("{name}_{tag}_k{k}"),
                        shape,
                        data,
                    });
                }
            }
            let (shape, data) = mat(&sg.person.w_a);
            out.push(NamedTensor {
                name: format!("Wa_p_k{k}"),
                shape,
                data,
            });
            out.push(NamedTensor {
                name: format!("alpha_p_k{k}"),
                shape: vec![],
                data: std::slice::from_ref(&sg.person.alpha),
            });
        }
        out.push(NamedTensor {
            name: "w_s".into(),
            shape: vec![self.w_s.len()],
            data: self.w_s.as_slice().unwrap(),
        });
        out.push(NamedTensor {
            name: "b_s".into(),
            shape: vec![],
            data: std::slice::from_ref(&self.b_s),
        });
        out
    }

    /// Mutable slices in the same order as [`GraphParams::tensors`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for sg in &mut self.subgraphs {
            for p in [&mut sg.relation, &mut sg.local, &mut sg.global] {
                out.push(p.u.as_slice_mut().unwrap());
                out.push(p.v.as_slice_mut().unwrap());
                out.push(p.w_alpha.as_slice_mut().unwrap());
                out.push(p.w_a.as_slice_mut().unwrap());
                out.push(p.w_u.as_slice_mut().unwrap());
            }
            out.push(sg.person.w_a.as_slice_mut().unwrap());
            out.push(std::slice::from_mut(&mut sg.person.alpha));
        }
        out.push(self.w_s.as_slice_mut().unwrap());
        out.push(std::slice::from_mut(&mut self.b_s));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn mat(a: &Array2<f64>) -> (Vec<usize>, &[f64]) {
    (vec![a.nrows(), a.ncols()], a.as_slice().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Tag identifying checkpoint documents.
pub const CHECKPOINT_FORMAT: &str = "salrank-graphnet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing parameter dump. Tensor names follow
/// [`GraphParams::tensors`]: `U_r_k0`, `V_r_k0`, `Walpha_r_k0`, `Wa_r_k0`,
/// `Wu_r_k0`, the same for `l` and `g`, then `Wa_p_k0`, `alpha_p_k0`, ...,
/// and finally `w_s`, `b_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub subgraphs: usize,
    /// Global grid side `M` the parameters were trained with.
    pub grid: usize,
    pub graphs: GraphSet,
    pub tensors: Vec<TensorRecord>,
    /// Tensors of heads outside the graph module, e.g. a classifier.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_params(params: &GraphParams, grid: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dim: params.dim(),
            subgraphs: params.num_subgraphs(),
            grid,
            graphs: params.graphs,
            tensors: params
                .tensors()
                .into_iter()
                .map(|t| TensorRecord {
                    name: t.name,
                    shape: t.shape,
                    data: t.data.to_vec(),
                })
                .collect(),
            extra: Vec::new(),
        }
    }

    /// Rebuilds the parameters, checking every tensor name and shape.
    pub fn to_params(&self) -> Result<GraphParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut params = GraphParams::zeros(self.dim, self.subgraphs, self.graphs)?;
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} tensors, expected {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (slot, record)) in expected
            .iter()
            .zip(params.slices_mut().into_iter().zip(&self.tensors))
        {
            if &record.name != name || &record.shape != shape || record.data.len() != slot.len() {
                return Err(Error::InvalidInput(format!(
                    "checkpoint tensor `{}` {:?} does not match `{name}` {shape:?}",
                    record.name, record.shape
                )));
            }
            slot.copy_from_slice(&record.data);
        }
        Ok(params)
    }
}

/// How sources connect to targets.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Edges {
    /// Every source feeds every target; attention is scaled by `norm`.
    Dense { norm: f64 },
    /// Source `i` feeds target `i` only.
    Paired,
}

/// Intermediates of one attention aggregation.
#[derive(Debug, Clone)]
pub struct AggregateCache {
    edges: Edges,
    /// `U f_i`, targets x C.
    target_embed: Array2<f64>,
    /// `V f_j`, sources x C.
    source_embed: Array2<f64>,
    /// `W_a f_j`, sources x C.
    messages: Array2<f64>,
    /// Pre-ReLU attention logits, targets x sources (targets x 1 when paired).
    logits: Array2<f64>,
    /// Attention weights after ReLU and normalization, same shape as `logits`.
    pub alphas: Array2<f64>,
    /// Aggregated messages, targets x C.
    pub h: Array2<f64>,
}

impl AggregateCache {
    /// Pre-ReLU attention logits.
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }
}

fn aggregate(
    p: &AttentionParams,
    targets: ArrayView2<f64>,
    sources: ArrayView2<f64>,
    edges: Edges,
) -> AggregateCache {
    let target_embed = targets.dot(&p.u.t());
    let source_embed = sources.dot(&p.v.t());
    let messages = sources.dot(&p.w_a.t());
    let t_logit = target_embed.dot(&p.target_weights());
    let s_logit = source_embed.dot(&p.source_weights());
    let (logits, alphas, h) = match edges {
        Edges::Dense { norm } => {
            let logits = Array2::from_shape_fn((targets.nrows(), sources.nrows()), |(i, j)| {
                t_logit[i] + s_logit[j]
            });
            let alphas = logits.mapv(|e| e.max(0.0) * norm);
            let h = alphas.dot(&messages);
            (logits, alphas, h)
        }
        Edges::Paired => {
            let logits = (&t_logit + &s_logit).insert_axis(Axis(1));
            let alphas = logits.mapv(|e| e.max(0.0));
            let h = &messages * &alphas;
            (logits, alphas, h)
        }
    };
    AggregateCache {
        edges,
        target_embed,
        source_embed,
        messages,
        logits,
        alphas,
        h,
    }
}

/// Accumulates gradients of one aggregation given `dh = dL/dh`.
fn aggregate_backward(
    p: &AttentionParams,
    cache: &AggregateCache,
    targets: ArrayView2<f64>,
    sources: ArrayView2<f64>,
    dh: &Array2<f64>,
    grad: &mut AttentionParams,
    d_targets: &mut Array2<f64>,
    d_sources: &mut Array2<f64>,
) {
    let (d_logits, d_messages) = match cache.edges {
        Edges::Dense { norm } => {
            let d_alpha = dh.dot(&cache.messages.t());
            let d_messages = cache.alphas.t().dot(dh);
            let mut d_logits = d_alpha;
            d_logits.zip_mut_with(&cache.logits, |d, &e| {
                *d = if e > 0.0 { *d * norm } else { 0.0 }
            });
            (d_logits, d_messages)
        }
        Edges::Paired => {
            let d_alpha = (dh * &cache.messages).sum_axis(Axis(1));
            let d_messages = dh * &cache.alphas;
            let d_logits = Array2::from_shape_fn(cache.logits.dim(), |(i, _)| {
                if cache.logits[[i, 0]] > 0.0 {
                    d_alpha[i]
                } else {
                    0.0
                }
            });
            (d_logits, d_messages)
        }
    };
    let (d_t_logit, d_s_logit) = match cache.edges {
        Edges::Dense { .. } => (d_logits.sum_axis(Axis(1)), d_logits.sum_axis(Axis(0))),
        Edges::Paired => {
            let col = d_logits.column(0).to_owned();
            (col.clone(), col)
        }
    };
    let c = p.u.nrows();
    {
        let mut dw = grad.w_alpha.slice_mut(s![..c]);
        dw += &cache.target_embed.t().dot(&d_t_logit);
    }
    {
        let mut dw = grad.w_alpha.slice_mut(s![c..]);
        dw += &cache.source_embed.t().dot(&d_s_logit);
    }
    let d_target_embed = outer(&d_t_logit, &p.target_weights());
    let d_source_embed = outer(&d_s_logit, &p.source_weights());

    grad.u += &d_target_embed.t().dot(&targets);
    *d_targets += &d_target_embed.dot(&p.u);
    grad.v += &d_source_embed.t().dot(&sources);
    *d_sources += &d_source_embed.dot(&p.v);
    grad.w_a += &d_messages.t().dot(&sources);
    *d_sources += &d_messages.dot(&p.w_a);
}

fn outer(a: &Array1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn check_compat(bundle: &FeatureBundle, params: &GraphParams) -> Result<()> {
    bundle.validate()?;
    check_split(params.dim(), params.num_subgraphs())?;
    if bundle.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("feature dimension {}", params.dim()),
            actual: format!("{}", bundle.dim()),
        });
    }
    Ok(())
}

fn subgraph(params: &GraphParams, k: usize) -> Result<&Subgraph> {
    params.subgraphs.get(k).ok_or_else(|| {
        Error::InvalidInput(format!(
            "subgraph {k} out of range for K = {}",
            params.num_subgraphs()
        ))
    })
}

fn relation_cache(bundle: &FeatureBundle, p: &AttentionParams) -> AggregateCache {
    let norm = 1.0 / bundle.num_instances() as f64;
    aggregate(p, bundle.f.view(), bundle.f.view(), Edges::Dense { norm })
}

fn local_cache(bundle: &FeatureBundle, p: &AttentionParams) -> AggregateCache {
    aggregate(p, bundle.f.view(), bundle.f_local.view(), Edges::Paired)
}

fn global_cache(bundle: &FeatureBundle, p: &AttentionParams) -> AggregateCache {
    let norm = 1.0 / bundle.f_global.nrows() as f64;
    aggregate(p, bundle.f.view(), bundle.f_global.view(), Edges::Dense { norm })
}

/// Relation-graph messages `h_i = sum_j alpha_ij W_a f_j` for subgraph `k`.
pub fn relation_aggregate(
    bundle: &FeatureBundle,
    params: &GraphParams,
    k: usize,
) -> Result<Array2<f64>> {
    check_compat(bundle, params)?;
    Ok(relation_cache(bundle, &subgraph(params, k)?.relation).h)
}

/// Local-contrast messages `h_i = alpha_i W_a f_i^l` for subgraph `k`.
pub fn local_aggregate(
    bundle: &FeatureBundle,
    params: &GraphParams,
    k: usize,
) -> Result<Array2<f64>> {
    check_compat(bundle, params)?;
    Ok(local_cache(bundle, &subgraph(params, k)?.local).h)
}

/// Global-contrast messages `h_i = sum_j alpha_ji W_a f_j^g` for subgraph `k`.
pub fn global_aggregate(
    bundle: &FeatureBundle,
    params: &GraphParams,
    k: usize,
) -> Result<Array2<f64>> {
    check_compat(bundle, params)?;
    Ok(global_cache(bundle, &subgraph(params, k)?.global).h)
}

/// Person-prior messages `h_i = alpha_p W_a^p f_i^p` for subgraph `k`.
pub fn person_aggregate(
    bundle: &FeatureBundle,
    params: &GraphParams,
    k: usize,
) -> Result<Array2<f64>> {
    check_compat(bundle, params)?;
    let p = &subgraph(params, k)?.person;
    Ok(bundle.f_person.dot(&p.w_a.t()) * p.alpha)
}

/// Messages and attention weights of one subgraph.
#[derive(Debug, Clone)]
pub struct AggregateOutputs {
    pub relation: Option<AggregateCache>,
    pub local: Option<AggregateCache>,
    pub global: Option<AggregateCache>,
    /// `W_a^p f_i^p` before the `alpha_p` scale.
    pub person_proj: Option<Array2<f64>>,
}

impl AggregateOutputs {
    /// Every attention weight this subgraph produced.
    pub fn alphas(&self) -> impl Iterator<Item = f64> + '_ {
        [&self.relation, &self.local, &self.global]
            .into_iter()
            .flatten()
            .flat_map(|c| c.alphas.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleOutput {
    /// Updated features `f^u`, `N x D`.
    pub f_updated: Array2<f64>,
    /// Saliency scores, length `N`.
    pub scores: Array1<f64>,
}

/// Forward intermediates needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub subgraphs: Vec<AggregateOutputs>,
}

pub fn forward(bundle: &FeatureBundle, params: &GraphParams) -> Result<ModuleOutput> {
    forward_with_cache(bundle, params).map(|(out, _)| out)
}

pub fn forward_with_cache(
    bundle: &FeatureBundle,
    params: &GraphParams,
) -> Result<(ModuleOutput, ForwardCache)> {
    check_compat(bundle, params)?;
    let c = params.channels();
    let g = params.graphs;
    let mut f_updated = bundle.f.clone();
    let mut caches = Vec::with_capacity(params.num_subgraphs());
    for (k, sg) in params.subgraphs.iter().enumerate() {
        let out = AggregateOutputs {
            relation: g.relation.then(|| relation_cache(bundle, &sg.relation)),
            local: g.local.then(|| local_cache(bundle, &sg.local)),
            global: g.global.then(|| global_cache(bundle, &sg.global)),
            person_proj: g.person.then(|| bundle.f_person.dot(&sg.person.w_a.t())),
        };
        let mut block = f_updated.slice_mut(s![.., k * c..(k + 1) * c]);
        for (cache, p) in [
            (&out.relation, &sg.relation),
            (&out.local, &sg.local),
            (&out.global, &sg.global),
        ] {
            if let Some(cache) = cache {
                block += &cache.h.dot(&p.w_u.t());
            }
        }
        if let Some(proj) = &out.person_proj {
            block.scaled_add(sg.person.alpha, proj);
        }
        caches.push(out);
    }
    let scores = f_updated.dot(&params.w_s) + params.b_s;
    Ok((
        ModuleOutput { f_updated, scores },
        ForwardCache { subgraphs: caches },
    ))
}

/// Gradients for every parameter and every input feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: GraphParams,
    pub bundle: FeatureBundle,
}

/// Gradients of `sum_i score_grads[i] * s_i`.
pub fn backward(
    bundle: &FeatureBundle,
    params: &GraphParams,
    output: &ModuleOutput,
    cache: &ForwardCache,
    score_grads: &[f64],
) -> Result<Gradients> {
    let n = bundle.num_instances();
    if score_grads.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} score gradients"),
            actual: format!("{}", score_grads.len()),
        });
    }
    let g = ArrayView1::from(score_grads);
    let d_updated = outer(&g.to_owned(), &params.w_s.view());
    let mut grads = backward_features(bundle, params, cache, &d_updated)?;
    grads.params.w_s = output.f_updated.t().dot(&g);
    grads.params.b_s = g.sum();
    Ok(grads)
}

/// Gradients given `dL/df^u` directly, for heads other than the linear
/// scorer. The scoring-head gradients are left at zero.
pub fn backward_features(
    bundle: &FeatureBundle,
    params: &GraphParams,
    cache: &ForwardCache,
    d_updated: &Array2<f64>,
) -> Result<Gradients> {
    check_compat(bundle, params)?;
    if d_updated.dim() != bundle.f.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", bundle.f.dim()),
            actual: format!("{:?}", d_updated.dim()),
        });
    }
    let c = params.channels();
    let mut gp = params.zeros_like();
    let (n, d) = bundle.f.dim();
    let mut gb = FeatureBundle::zeros(n, d, bundle.grid_size());
    // residual path
    gb.f.assign(d_updated);

    for (k, (sg, out)) in params.subgraphs.iter().zip(&cache.subgraphs).enumerate() {
        let du = d_updated.slice(s![.., k * c..(k + 1) * c]).to_owned();
        let gsg = &mut gp.subgraphs[k];

        if let Some(rc) = &out.relation {
            gsg.relation.w_u += &du.t().dot(&rc.h);
            let dh = du.dot(&sg.relation.w_u);
            // targets and sources are both `f`
            let mut d_src = Array2::zeros((n, d));
            aggregate_backward(
                &sg.relation,
                rc,
                bundle.f.view(),
                bundle.f.view(),
                &dh,
                &mut gsg.relation,
                &mut gb.f,
                &mut d_src,
            );
            gb.f += &d_src;
        }
        if let Some(lc) = &out.local {
            gsg.local.w_u += &du.t().dot(&lc.h);
            let dh = du.dot(&sg.local.w_u);
            aggregate_backward(
                &sg.local,
                lc,
                bundle.f.view(),
                bundle.f_local.view(),
                &dh,
                &mut gsg.local,
                &mut gb.f,
                &mut gb.f_local,
            );
        }
        if let Some(gc) = &out.global {
            gsg.global.w_u += &du.t().dot(&gc.h);
            let dh = du.dot(&sg.global.w_u);
            aggregate_backward(
                &sg.global,
                gc,
                bundle.f.view(),
                bundle.f_global.view(),
                &dh,
                &mut gsg.global,
                &mut gb.f,
                &mut gb.f_global,
            );
        }
        if let Some(proj) = &out.person_proj {
            gsg.person.alpha = (&du * proj).sum();
            let d_proj = &du * sg.person.alpha;
            gsg.person.w_a += &d_proj.t().dot(&bundle.f_person);
            gb.f_person += &d_proj.dot(&sg.person.w_a);
        }
    }
    Ok(Gradients {
        params: gp,
        bundle: gb,
    })
}

/// Non-overlapping average pooling of an `H x W x D` map onto an `M x M`
/// grid, flattened row-major to `M^2 x D`. Cell edges sit at
/// `round(H * m / M)` and `round(W * m / M)`.
pub fn pool_global_grid(feature_map: &Array3<f64>, m: usize) -> Result<Array2<f64>> {
    let (h, w, d) = feature_map.dim();
    if m == 0 || h < m || w < m {
        return Err(Error::InvalidInput(format!(
            "cannot pool a {h}x{w} map onto a {m}x{m} grid"
        )));
    }
    let edge = |len: usize, i: usize| ((len * i) as f64 / m as f64).round() as usize;
    let mut out = Array2::zeros((m * m, d));
    for gy in 0..m {
        for gx in 0..m {
            let cell = feature_map.slice(s![edge(h, gy)..edge(h, gy + 1), edge(w, gx)..edge(w, gx + 1), ..]);
            let count = (cell.len_of(Axis(0)) * cell.len_of(Axis(1))) as f64;
            let sum = cell.sum_axis(Axis(0)).sum_axis(Axis(0));
            out.row_mut(gy * m + gx).assign(&(sum / count));
        }
    }
    Ok(out)
}
