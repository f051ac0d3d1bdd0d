//! Class-balanced self-training.
//!
//! Every target pixel is scored by its class probabilities, optionally
//! multiplied by a spatial prior estimated from source labels. For each
//! class `c`, the pixels whose best-scoring class is `c` form a pool; the
//! reference confidence `λ_c` is the score at rank `⌈p·N_c⌉ − 1` of that
//! pool sorted in descending order. A pixel receives pseudo-label
//! `argmax_c score_c / λ_c` when that normalized score is strictly above 1,
//! otherwise it is ignored. Rounds alternate pseudo-labeling with
//! retraining while the selected portion `p` grows on a schedule.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::ConfusionMatrix;
use crate::fusion::FeatureConfig;
use crate::imagecore::{gaussian_kernel, separable_convolve_f64, Image, LabelMap, ProbMap, IGNORE};
use crate::segmodel::{predict_probmap, train, Dataset, Model, TrainConfig};

/// Per-class reference confidences. `f64::INFINITY` marks a class with no
/// candidate pixels; such a class is never selected.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassThresholds {
    pub lambda: Vec<f64>,
}

impl ClassThresholds {
    pub fn classes(&self) -> usize {
        self.lambda.len()
    }
}

/// Per-location class frequencies of the source labels, smoothed and
/// normalized to sum to 1 wherever any source pixel contributed.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialPrior {
    width: usize,
    height: usize,
    classes: usize,
    sigma: f64,
    grid: Vec<f32>,
}

impl SpatialPrior {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Prior vector of the pixel at linear index `i`.
    #[inline]
    pub fn at(&self, i: usize) -> &[f32] {
        &self.grid[i * self.classes..(i + 1) * self.classes]
    }

    pub fn grid(&self) -> &[f32] {
        &self.grid
    }
}

/// Accumulates per-class indicator counts of the source labels (resampled
/// nearest-neighbour to `dims`), smooths them with a Gaussian of `sigma`
/// (none when `sigma == 0`) and normalizes per pixel.
pub fn compute_spatial_prior(
    labels: &[LabelMap],
    dims: (usize, usize),
    classes: usize,
    sigma: f64,
) -> Result<SpatialPrior> {
    if labels.is_empty() {
        return invalid("spatial prior needs at least one label map");
    }
    if classes == 0 {
        return invalid("spatial prior needs at least one class");
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid(format!(
            "prior sigma must be finite and non-negative, got {sigma}"
        ));
    }
    let (w, h) = dims;
    let mut counts = vec![0f64; w * h * classes];
    for lm in labels {
        lm.validate(classes)?;
        let lm = if lm.dims() == dims {
            lm.clone()
        } else {
            lm.resize_nearest(w, h)?
        };
        for (i, &l) in lm.data().iter().enumerate() {
            if l != IGNORE {
                counts[i * classes + l as usize] += 1.0;
            }
        }
    }
    let smoothed = if sigma > 0.0 {
        let radius = ((3.0 * sigma).ceil() as usize).max(1);
        separable_convolve_f64(&counts, w, h, classes, &gaussian_kernel(sigma, radius)?)?
    } else {
        counts
    };
    let mut grid = vec![0f32; w * h * classes];
    for (dst, src) in grid
        .chunks_exact_mut(classes)
        .zip(smoothed.chunks_exact(classes))
    {
        let total: f64 = src.iter().sum();
        if total > 0.0 {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s / total) as f32;
            }
        }
    }
    Ok(SpatialPrior {
        width: w,
        height: h,
        classes,
        sigma,
        grid,
    })
}

fn check_prior(pm: &ProbMap, prior: Option<&SpatialPrior>) -> Result<()> {
    if let Some(pr) = prior {
        if pr.dims() != pm.dims() || pr.classes() != pm.classes() {
            return invalid(format!(
                "prior {:?}x{} does not match probability map {:?}x{}",
                pr.dims(),
                pr.classes(),
                pm.dims(),
                pm.classes()
            ));
        }
    }
    Ok(())
}

/// Class scores of pixel `i`: probabilities, times the prior when given.
#[inline]
fn scores(pm: &ProbMap, prior: Option<&SpatialPrior>, i: usize, out: &mut [f64]) {
    let p = pm.probs(i);
    match prior {
        Some(pr) => {
            for ((o, &pc), &qc) in out.iter_mut().zip(p).zip(pr.at(i)) {
                *o = pc as f64 * qc as f64;
            }
        }
        None => {
            for (o, &pc) in out.iter_mut().zip(p) {
                *o = pc as f64;
            }
        }
    }
}

#[inline]
fn best(s: &[f64]) -> (usize, f64) {
    let mut k = 0;
    for c in 1..s.len() {
        if s[c] > s[k] {
            k = c;
        }
    }
    (k, s[k])
}

/// Per-class pools of best scores across all maps. Pixels whose best score
/// is zero cannot be selected and join no pool.
fn class_pools(probmaps: &[ProbMap], prior: Option<&SpatialPrior>) -> Result<Vec<Vec<f64>>> {
    let Some(first) = probmaps.first() else {
        return invalid("no probability maps given");
    };
    let k = first.classes();
    let mut pools = vec![Vec::new(); k];
    let mut s = vec![0f64; k];
    for pm in probmaps {
        if pm.classes() != k {
            return invalid("probability maps disagree on class count");
        }
        check_prior(pm, prior)?;
        for i in 0..pm.width() * pm.height() {
            scores(pm, prior, i, &mut s);
            let (c, v) = best(&s);
            if v > 0.0 {
                pools[c].push(v);
            }
        }
    }
    Ok(pools)
}

/// Reference confidence per class for selected portion `p`.
pub fn determine_thresholds(
    probmaps: &[ProbMap],
    p: f64,
    prior: Option<&SpatialPrior>,
) -> Result<ClassThresholds> {
    if !(p > 0.0 && p <= 1.0) {
        return invalid(format!("selected portion must lie in (0, 1], got {p}"));
    }
    let pools = class_pools(probmaps, prior)?;
    let lambda = pools
        .into_iter()
        .map(|mut pool| {
            if pool.is_empty() {
                return f64::INFINITY;
            }
            pool.sort_unstable_by(|a, b| b.total_cmp(a));
            let rank = ((p * pool.len() as f64).ceil() as usize).clamp(1, pool.len()) - 1;
            pool[rank]
        })
        .collect();
    Ok(ClassThresholds { lambda })
}

/// Label of `argmax_c score_c / λ_c` when that ratio is strictly above 1,
/// else [`IGNORE`]. Ties go to the lowest class index.
pub fn generate_pseudolabels(
    probmap: &ProbMap,
    thresholds: &ClassThresholds,
    prior: Option<&SpatialPrior>,
) -> Result<LabelMap> {
    let k = probmap.classes();
    if thresholds.classes() != k {
        return invalid(format!(
            "{} thresholds for {k} classes",
            thresholds.classes()
        ));
    }
    check_prior(probmap, prior)?;
    let mut s = vec![0f64; k];
    let mut out = Vec::with_capacity(probmap.width() * probmap.height());
    for i in 0..probmap.width() * probmap.height() {
        scores(probmap, prior, i, &mut s);
        for (v, &l) in s.iter_mut().zip(&thresholds.lambda) {
            *v /= l;
        }
        let (c, v) = best(&s);
        out.push(if v > 1.0 { c as u8 } else { IGNORE });
    }
    LabelMap::from_vec(probmap.width(), probmap.height(), out)
}

/// Audit counts for one class pool (pixels whose best score is the class).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub pool: usize,
    /// Pool members whose own normalized score exceeds 1, i.e. the pixels
    /// the class's reference confidence admits.
    pub passed: usize,
    /// Pool members that received any pseudo-label. This can exceed
    /// `passed` when a pixel clears another class's lower threshold.
    pub selected: usize,
}

impl ClassSelection {
    /// Selected share of the pool; `None` for an empty pool.
    pub fn fraction(&self) -> Option<f64> {
        (self.pool > 0).then(|| self.selected as f64 / self.pool as f64)
    }

    /// Admitted share of the pool; `None` for an empty pool.
    pub fn passed_fraction(&self) -> Option<f64> {
        (self.pool > 0).then(|| self.passed as f64 / self.pool as f64)
    }

    pub fn add(&mut self, other: &ClassSelection) {
        self.pool += other.pool;
        self.passed += other.passed;
        self.selected += other.selected;
    }
}

/// Per class pool of `probmap`: its size, how many members clear their own
/// class threshold, and how many carry a pseudo-label in `labels`.
pub fn selection_audit(
    probmap: &ProbMap,
    thresholds: &ClassThresholds,
    labels: &LabelMap,
    prior: Option<&SpatialPrior>,
) -> Result<Vec<ClassSelection>> {
    let k = probmap.classes();
    if probmap.dims() != labels.dims() || thresholds.classes() != k {
        return invalid("audit inputs disagree on shape");
    }
    check_prior(probmap, prior)?;
    let mut out = vec![ClassSelection::default(); k];
    let mut s = vec![0f64; k];
    for i in 0..probmap.width() * probmap.height() {
        scores(probmap, prior, i, &mut s);
        let (c, v) = best(&s);
        if v > 0.0 {
            out[c].pool += 1;
            if v / thresholds.lambda[c] > 1.0 {
                out[c].passed += 1;
            }
            if labels.data()[i] != IGNORE {
                out[c].selected += 1;
            }
        }
    }
    Ok(out)
}

/// Selected-portion schedule: `p_r = min(p0 + (r − 1)·delta_p, p_max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundSchedule {
    pub p0: f64,
    pub delta_p: f64,
    pub p_max: f64,
    pub rounds: usize,
}

impl Default for RoundSchedule {
    fn default() -> Self {
        Self {
            p0: 0.2,
            delta_p: 0.05,
            p_max: 0.5,
            rounds: 3,
        }
    }
}

impl RoundSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 <= self.p_max && self.p_max <= 1.0) {
            return invalid("schedule needs 0 < p0 <= p_max <= 1");
        }
        if !(self.delta_p >= 0.0) {
            return invalid("schedule needs delta_p >= 0");
        }
        Ok(())
    }

    /// Portion for 1-based round `r`.
    pub fn portion(&self, round: usize) -> f64 {
        (self.p0 + (round.max(1) - 1) as f64 * self.delta_p).min(self.p_max)
    }
}

/// Whether reference confidences are pooled over all target images or
/// computed image by image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    #[default]
    Dataset,
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    pub schedule: RoundSchedule,
    pub spatial_prior: bool,
    pub prior_sigma: f64,
    pub scope: ThresholdScope,
    /// Source pixels sampled per source image and round.
    pub source_pixels_per_image: usize,
    /// Target pseudo-labeled pixels sampled per source pixel.
    pub target_ratio: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            schedule: RoundSchedule::default(),
            spatial_prior: true,
            prior_sigma: 4.0,
            scope: ThresholdScope::Dataset,
            source_pixels_per_image: 1000,
            target_ratio: 1.0,
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

/// Source images with labels, target images, and target labels kept aside
/// for scoring only.
pub struct SelfTrainData<'a> {
    pub source: &'a [Image],
    pub source_labels: &'a [LabelMap],
    pub target: &'a [Image],
    pub target_eval: Option<&'a [LabelMap]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRound {
    pub lambda: f64,
    pub selection: ClassSelection,
    /// IoU of the retrained model on target eval labels.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub portion: f64,
    pub classes: Vec<ClassRound>,
    pub miou: Option<f64>,
    pub pseudo_labels: Vec<LabelMap>,
}

/// Writes `round,p,class,lambda,selected_fraction,iou` rows.
pub fn write_rounds_csv(reports: &[RoundReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["round", "p", "class", "lambda", "selected_fraction", "iou"])
        .map_err(err)?;
    for r in reports {
        for (c, cr) in r.classes.iter().enumerate() {
            let lambda = if cr.lambda.is_finite() {
                format!("{:.6}", cr.lambda)
            } else {
                "inf".into()
            };
            w.write_record([
                r.round.to_string(),
                format!("{:.4}", r.portion),
                c.to_string(),
                lambda,
                cr.selection
                    .fraction()
                    .map(|f| format!("{f:.6}"))
                    .unwrap_or_default(),
                cr.iou
                    .map(|v| format!("{:.2}", 100.0 * v))
                    .unwrap_or_default(),
            ])
            .map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn eval_model(
    model: &Model,
    images: &[Image],
    labels: &[LabelMap],
    features: &FeatureConfig,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.classes());
    for (img, gt) in images.iter().zip(labels) {
        let pred = predict_probmap(model, img, features)?.argmax();
        cm.accumulate(&pred, gt)?;
    }
    Ok(cm)
}

/// Alternates pseudo-labeling and retraining for `schedule.rounds` rounds,
/// starting from a source-trained `model0`.
pub fn self_train(
    data: &SelfTrainData<'_>,
    model0: &Model,
    features: &FeatureConfig,
    cfg: &SelfTrainConfig,
) -> Result<(Model, Vec<RoundReport>)> {
    cfg.schedule.validate()?;
    if data.target.is_empty() {
        return invalid("self-training needs target images");
    }
    if data.source.len() != data.source_labels.len() {
        return invalid("every source image needs a label map");
    }
    if let Some(ev) = data.target_eval {
        if ev.len() != data.target.len() {
            return invalid("every target image needs an eval label map");
        }
    }
    if cfg.schedule.rounds == 0 {
        return Ok((model0.clone(), Vec::new()));
    }
    if !(cfg.target_ratio >= 0.0) {
        return invalid("target ratio must be non-negative");
    }
    let k = model0.classes();
    let dims = data.target[0].dims();
    if data.target.iter().any(|t| t.dims() != dims) {
        return invalid("target images must share one size");
    }
    let prior = if cfg.spatial_prior {
        Some(compute_spatial_prior(
            data.source_labels,
            dims,
            k,
            cfg.prior_sigma,
        )?)
    } else {
        None
    };
    let prior = prior.as_ref();

    let dim = features.len(data.target[0].channels());
    let mut model = model0.clone();
    let mut reports = Vec::with_capacity(cfg.schedule.rounds);
    for round in 1..=cfg.schedule.rounds {
        let p = cfg.schedule.portion(round);
        let probmaps: Vec<ProbMap> = data
            .target
            .iter()
            .map(|img| predict_probmap(&model, img, features))
            .collect::<Result<_>>()?;

        let mut audit = vec![ClassSelection::default(); k];
        let mut tally = |pm: &ProbMap, th: &ClassThresholds, lm: &LabelMap| -> Result<()> {
            for (acc, c) in audit.iter_mut().zip(selection_audit(pm, th, lm, prior)?) {
                acc.add(&c);
            }
            Ok(())
        };
        let (lambdas, pseudo) = match cfg.scope {
            ThresholdScope::Dataset => {
                let th = determine_thresholds(&probmaps, p, prior)?;
                let pseudo = probmaps
                    .par_iter()
                    .map(|pm| generate_pseudolabels(pm, &th, prior))
                    .collect::<Result<Vec<_>>>()?;
                for (pm, lm) in probmaps.iter().zip(&pseudo) {
                    tally(pm, &th, lm)?;
                }
                (th.lambda, pseudo)
            }
            ThresholdScope::PerImage => {
                // reported lambda: mean of the finite per-image values
                let mut sums = vec![(0f64, 0usize); k];
                let mut pseudo = Vec::with_capacity(probmaps.len());
                for pm in &probmaps {
                    let th = determine_thresholds(std::slice::from_ref(pm), p, prior)?;
                    for (acc, &l) in sums.iter_mut().zip(&th.lambda) {
                        if l.is_finite() {
                            acc.0 += l;
                            acc.1 += 1;
                        }
                    }
                    let lm = generate_pseudolabels(pm, &th, prior)?;
                    tally(pm, &th, &lm)?;
                    pseudo.push(lm);
                }
                let lambdas = sums
                    .into_iter()
                    .map(|(s, n)| if n > 0 { s / n as f64 } else { f64::INFINITY })
                    .collect();
                (lambdas, pseudo)
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(round as u64));
        let mut set = Dataset::new(dim);
        for (img, lm) in data.source.iter().zip(data.source_labels) {
            set.sample_pixels(img, lm, cfg.source_pixels_per_image, features, &mut rng)?;
        }
        let per_target =
            (cfg.target_ratio * cfg.source_pixels_per_image as f64 * data.source.len() as f64
                / data.target.len() as f64)
                .round() as usize;
        for (img, lm) in data.target.iter().zip(&pseudo) {
            set.sample_pixels(img, lm, per_target, features, &mut rng)?;
        }
        if !set.is_empty() {
            let train_cfg = TrainConfig {
                seed: cfg.train.seed.wrapping_add(round as u64),
                ..cfg.train.clone()
            };
            model = train(&model, &set, &train_cfg)?.0;
        }

        let (ious, miou) = match data.target_eval {
            Some(ev) => {
                let cm = eval_model(&model, data.target, ev, features)?;
                (cm.iou_per_class(), cm.miou().ok())
            }
            None => (vec![None; k], None),
        };
        let classes = (0..k)
            .map(|c| ClassRound {
                lambda: lambdas[c],
                selection: audit[c],
                iou: ious[c],
            })
            .collect();
        reports.push(RoundReport {
            round,
            portion: p,
            classes,
            miou,
            pseudo_labels: pseudo,
        });
    }
    Ok((model, reports))
}
