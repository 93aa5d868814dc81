use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use salrank::dataio::{self, AnnotationFile, AnnotationKind, ImageAnnotation};
use salrank::gradcheck;
use salrank::metrics::{self, Aggregate, MetricConfig};
use salrank::retarget::{self, RetargetConfig};
use salrank::train::{self, Experiment, LossKind, ModelKind, SyntheticTask, TrainConfig};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_INTERNAL: u8 = 2;
pub const EXIT_GRADCHECK: u8 = 3;

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "salrank", version, about = "Instance-level saliency ranking tools")]
pub struct Cli {
    /// Worker threads for per-image work; 1 gives the reference mode.
    /// Defaults to all available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Instance-count distribution and category scores of a GT file.
    Stats(StatsArgs),
    /// Write one rank-map PNG per image.
    Render(RenderArgs),
    /// Shrink an image's width with rank-guided seam carving.
    Retarget(RetargetArgs),
    /// Train the graph model on a synthetic ranking task.
    TrainToy(TrainToyArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    SaSor,
    Sor,
    Ssor,
    Mae,
    All,
}

impl Metric {
    const EACH: [Metric; 4] = [Metric::SaSor, Metric::Sor, Metric::Ssor, Metric::Mae];

    fn key(self) -> &'static str {
        match self {
            Metric::SaSor => "sa-sor",
            Metric::Sor => "sor",
            Metric::Ssor => "ssor",
            Metric::Mae => "mae",
            Metric::All => "all",
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::All)]
    metric: Metric,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    /// Machine-readable JSON summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    gt: PathBuf,
    /// Write the count table as CSV here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Ground-truth file; ranks come from `rank_order`.
    #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
    gt: Option<PathBuf>,
    /// Prediction file; ranks come from `saliency_score`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct RetargetArgs {
    #[arg(long)]
    image: PathBuf,
    /// 8-bit rank map with the same size as the image.
    #[arg(long)]
    rank_map: PathBuf,
    #[arg(long, conflicts_with = "target_width", required_unless_present = "target_width")]
    target_frac: Option<f64>,
    #[arg(long)]
    target_width: Option<usize>,
    #[arg(long, default_value_t = RetargetConfig::default().epsilon)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the carved rank map.
    #[arg(long)]
    out_rank_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    NoGraph,
    RelationOnly,
    RelationLocal,
    RelationLocalGlobal,
    FullGraphs,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::NoGraph => ModelKind::NoGraph,
            ModelArg::RelationOnly => ModelKind::RelationOnly,
            ModelArg::RelationLocal => ModelKind::RelationLocal,
            ModelArg::RelationLocalGlobal => ModelKind::RelationLocalGlobal,
            ModelArg::FullGraphs => ModelKind::FullGraphs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    WeightedRanking,
    UniformRanking,
    RankClassification,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::WeightedRanking => LossKind::WeightedRanking,
            LossArg::UniformRanking => LossKind::UniformRanking,
            LossArg::RankClassification => LossKind::RankClassification,
        }
    }
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = ModelArg::FullGraphs)]
    model: ModelArg,
    #[arg(long, value_enum, default_value_t = LossArg::WeightedRanking)]
    loss: LossArg,
    #[arg(long, default_value_t = TrainConfig::default().gamma)]
    gamma: f64,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().subgraphs)]
    subgraphs: usize,
    #[arg(long, default_value_t = SyntheticTask::default().samples)]
    samples: usize,
    #[arg(long, default_value_t = Experiment::default().eval_samples)]
    eval_samples: usize,
    #[arg(long, default_value_t = TrainConfig::default().log_every)]
    log_every: usize,
    /// Metrics log (JSON lines). Defaults to standard output.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Parameter checkpoint (JSON).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations to check.
    #[arg(long, default_value_t = 1)]
    cases: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
}

/// Validation problems exit with 1, anything unexpected with 2.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    use salrank::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<salrank::Error>() {
            return match e {
                E::Diverged { .. } | E::NothingToAggregate { .. } => EXIT_INTERNAL,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_INTERNAL
}

pub fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(salrank::Error::InvalidInput("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Stats(a) => stats(a),
        Command::Render(a) => render(a),
        Command::Retarget(a) => retarget_cmd(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn load(path: &Path, kind: AnnotationKind) -> Result<AnnotationFile> {
    dataio::load_annotations(path, kind).with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Serialize)]
struct ImageScores {
    image_id: String,
    /// Metric key to score; `None` marks an undefined score.
    scores: BTreeMap<&'static str, Option<f64>>,
}

#[derive(Debug, Serialize)]
struct AggregateReport {
    mean: Option<f64>,
    counted: usize,
    skipped: usize,
}

#[derive(Debug, Serialize)]
struct EvaluationSummary {
    iou_threshold: f64,
    metrics: Vec<&'static str>,
    images: Vec<ImageScores>,
    aggregate: BTreeMap<&'static str, AggregateReport>,
}

fn score_image(
    gt: &ImageAnnotation,
    pred: Option<&ImageAnnotation>,
    metrics_wanted: &[Metric],
    cfg: &MetricConfig,
) -> salrank::Result<ImageScores> {
    let gts = gt.gt_instances()?;
    let preds = match pred {
        Some(p) => {
            if (p.width, p.height) != (gt.width, gt.height) {
                return Err(salrank::Error::Validation {
                    image_id: gt.image_id.clone(),
                    field: "width/height".into(),
                    reason: format!(
                        "prediction is {}x{}, ground truth {}x{}",
                        p.width, p.height, gt.width, gt.height
                    ),
                });
            }
            p.pred_instances()?
        }
        None => Vec::new(),
    };
    let pred_map = || -> salrank::Result<_> {
        Ok(metrics::to_gray(&metrics::render_pred_rank_map(&preds, gt.width, gt.height)?))
    };
    let mut scores = BTreeMap::new();
    for &m in metrics_wanted {
        let value = match m {
            Metric::SaSor => metrics::sa_sor_image(&preds, &gts, cfg)?,
            Metric::Sor => metrics::sor_pixelwise_image(&pred_map()?, &gts)?,
            Metric::Ssor => metrics::ssor_image(&preds, &gts)?,
            Metric::Mae => {
                let gt_map = metrics::to_gray(&metrics::render_gt_rank_map(&gts, gt.width, gt.height)?);
                Some(metrics::mae_image(&pred_map()?, &gt_map)?)
            }
            Metric::All => unreachable!("expanded before scoring"),
        };
        scores.insert(m.key(), value);
    }
    Ok(ImageScores {
        image_id: gt.image_id.clone(),
        scores,
    })
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.6}"))
}

fn evaluate(a: EvaluateArgs) -> Result<u8> {
    let cfg = MetricConfig {
        iou_threshold: a.iou_threshold,
    };
    cfg.validate()?;
    let gt = load(&a.gt, AnnotationKind::GroundTruth)?;
    let pred = load(&a.pred, AnnotationKind::Prediction)?;
    for p in &pred.images {
        if gt.get(&p.image_id).is_none() {
            return Err(salrank::Error::Validation {
                image_id: p.image_id.clone(),
                field: "image_id".into(),
                reason: "prediction has no ground-truth image".into(),
            }
            .into());
        }
    }
    let wanted: Vec<Metric> = match a.metric {
        Metric::All => Metric::EACH.to_vec(),
        m => vec![m],
    };
    let per_image: Vec<ImageScores> = gt
        .images
        .par_iter()
        .map(|g| score_image(g, pred.get(&g.image_id), &wanted, &cfg))
        .collect::<salrank::Result<_>>()?;

    let mut aggregate = BTreeMap::new();
    for &m in &wanted {
        let values: Vec<Option<f64>> = per_image.iter().map(|s| s.scores[m.key()]).collect();
        let report = match metrics::dataset_aggregate(&values) {
            Ok(Aggregate { mean, counted, skipped }) => AggregateReport {
                mean: Some(mean),
                counted,
                skipped,
            },
            Err(salrank::Error::NothingToAggregate { skipped }) => AggregateReport {
                mean: None,
                counted: 0,
                skipped,
            },
            Err(e) => return Err(e.into()),
        };
        aggregate.insert(m.key(), report);
    }

    let mut table = String::new();
    let _ = write!(table, "{:<24}", "image_id");
    for m in &wanted {
        let _ = write!(table, " {:>12}", m.key());
    }
    table.push('\n');
    for s in &per_image {
        let _ = write!(table, "{:<24}", s.image_id);
        for m in &wanted {
            let _ = write!(table, " {:>12}", fmt_score(s.scores[m.key()]));
        }
        table.push('\n');
    }
    let _ = write!(table, "{:<24}", "mean");
    for m in &wanted {
        let _ = write!(table, " {:>12}", fmt_score(aggregate[m.key()].mean));
    }
    table.push('\n');
    let _ = write!(table, "{:<24}", "undefined");
    for m in &wanted {
        let _ = write!(table, " {:>12}", aggregate[m.key()].skipped);
    }
    table.push('\n');
    print!("{table}");

    if let Some(out) = a.out {
        let summary = EvaluationSummary {
            iou_threshold: cfg.iou_threshold,
            metrics: wanted.iter().map(|m| m.key()).collect(),
            images: per_image,
            aggregate,
        };
        write_json(&out, &summary)?;
    }
    Ok(0)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn stats(a: StatsArgs) -> Result<u8> {
    // statistics describe raw annotations, so the 2..=8 rule is not enforced
    let text = fs::read_to_string(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let file = AnnotationFile::from_json(&text)?;
    for image in &file.images {
        image.masks()?;
    }
    let counts = dataio::dataset_stats(&file)?;
    let csv = counts.to_csv();
    print!("{csv}");
    let cats = dataio::category_scores(&file);
    if !cats.categories.is_empty() {
        println!("\ncategory,score,log1p_score");
        for (name, c) in &cats.categories {
            println!("{name},{:.4},{:.4}", c.score, c.log_score);
        }
    }
    if let Some(out) = a.out {
        fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(0)
}

fn render(a: RenderArgs) -> Result<u8> {
    let (path, kind) = match (&a.gt, &a.pred) {
        (Some(p), _) => (p, AnnotationKind::GroundTruth),
        (None, Some(p)) => (p, AnnotationKind::Prediction),
        (None, None) => bail!("one of --gt or --pred is required"),
    };
    let file = load(path, kind)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    file.images.par_iter().try_for_each(|image| -> Result<()> {
        let map = match kind {
            AnnotationKind::GroundTruth => {
                metrics::render_gt_rank_map(&image.gt_instances()?, image.width, image.height)?
            }
            AnnotationKind::Prediction => {
                metrics::render_pred_rank_map(&image.pred_instances()?, image.width, image.height)?
            }
        };
        let out = a.out_dir.join(format!("{}.png", sanitize(&image.image_id)));
        dataio::save_luma8(&out, &map).with_context(|| format!("writing {}", out.display()))
    })?;
    println!("rendered {} rank maps into {}", file.images.len(), a.out_dir.display());
    Ok(0)
}

/// Keeps image ids usable as file names.
fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn retarget_cmd(a: RetargetArgs) -> Result<u8> {
    let image = dataio::load_rgb8(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let rank = dataio::load_gray_map(&a.rank_map)
        .with_context(|| format!("reading {}", a.rank_map.display()))?;
    let target = match (a.target_frac, a.target_width) {
        (Some(f), _) => retarget::target_from_fraction(image.width(), f)?,
        (None, Some(w)) => w,
        (None, None) => bail!("one of --target-frac or --target-width is required"),
    };
    let cfg = RetargetConfig { epsilon: a.epsilon };
    let out = retarget::retarget_width(&image, &rank, target, &cfg)?;
    dataio::save_rgb8(&a.out, &out.image).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = a.out_rank_map {
        let map = out.rank_map.map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        dataio::save_luma8(&path, &map).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "retargeted {}x{} -> {}x{}",
        image.width(),
        image.height(),
        out.image.width(),
        out.image.height()
    );
    Ok(0)
}

fn train_toy(a: TrainToyArgs) -> Result<u8> {
    let exp = Experiment {
        task: SyntheticTask {
            samples: a.samples,
            ..SyntheticTask::default()
        },
        eval_samples: a.eval_samples,
        train: TrainConfig {
            learning_rate: a.lr,
            steps: a.steps,
            gamma: a.gamma,
            loss: a.loss.into(),
            model: a.model.into(),
            subgraphs: a.subgraphs,
            log_every: a.log_every,
            ..TrainConfig::default()
        },
    };
    if exp.train.steps == 0 || !(exp.train.learning_rate > 0.0) {
        return Err(salrank::Error::InvalidInput("train-toy needs positive --steps and --lr".into()).into());
    }
    if exp.eval_samples == 0 {
        return Err(salrank::Error::InvalidInput("--eval-samples must be positive".into()).into());
    }
    let result = train::run_experiment(&exp, a.seed)?;

    let mut log = String::new();
    for record in &result.outcome.log {
        log.push_str(&serde_json::to_string(record)?);
        log.push('\n');
    }
    match &a.log {
        Some(path) => fs::write(path, &log).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(log.as_bytes())?,
    }
    if let Some(path) = &a.checkpoint {
        write_json(path, &result.outcome.model.checkpoint(exp.task.grid))?;
    }
    eprintln!(
        "{} ({:?}, gamma {}): eval rank correlation {:.4}",
        exp.train.model.name(),
        exp.train.loss,
        exp.train.gamma,
        result.eval_score
    );
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<u8> {
    if a.cases == 0 || !(a.step > 0.0) {
        return Err(salrank::Error::InvalidInput("need at least one case and a positive --step".into()).into());
    }
    let reports: Vec<gradcheck::Report> = (0..a.cases)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(i as u64));
            gradcheck::check_case(&gradcheck::random_case(&mut rng)?, a.step)
        })
        .collect::<salrank::Result<_>>()?;
    let mut total = gradcheck::Report::default();
    for r in reports {
        total.merge(r);
    }
    let pass = total.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "gradcheck seed {} cases {}: {} entries, max relative error {:.3e} at {} -> {}",
        a.seed,
        a.cases,
        total.checked,
        total.max_rel_error,
        total.worst,
        if pass { "pass" } else { "FAIL" }
    );
    Ok(if pass { 0 } else { EXIT_GRADCHECK })
}
