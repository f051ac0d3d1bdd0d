//! The six pipeline commands. Every read goes through [`Files`].

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use flowadapt_core::cbst::{self, SelfTrainData};
use flowadapt_core::eval::{compare_runs, ConfusionMatrix, EvalReport, RunComparison};
use flowadapt_core::fusion::{compute_stats, concat_rgbf, standardize};
use flowadapt_core::optflow::{encode_flow, farneback, MaxMag};
use flowadapt_core::segmodel::{init_model, predict_probmap, train, Dataset};
use flowadapt_core::synthgen::{gen_dataset, pair_paths, Domain, Manifest, MANIFEST_VERSION};
use flowadapt_core::{ChannelStats, FlowField, Image, LabelMap, Model};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{seed_offset, FlowSource, PipelineConfig};
use crate::fsio::Files;

pub const MODEL_FILE: &str = "model.famd";
pub const STATS_FILE: &str = "stats.json";

/// Locations of pipeline artifacts under the output directory.
pub struct Layout<'a> {
    cfg: &'a PipelineConfig,
}

impl<'a> Layout<'a> {
    pub fn new(cfg: &'a PipelineConfig) -> Self {
        Self { cfg }
    }

    pub fn manifest(&self) -> PathBuf {
        self.cfg.data_dir.join("manifest.json")
    }

    pub fn flow_dir(&self, domain: Domain) -> PathBuf {
        self.cfg.out_dir.join("flow").join(domain.dir())
    }

    pub fn train_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("train")
    }

    pub fn adapt_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("adapt")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("eval")
    }

    /// Flow field fused for pair `i`, estimated or ground truth per config.
    fn flow_for(&self, domain: Domain, i: usize) -> PathBuf {
        match self.cfg.flow.source {
            FlowSource::Estimated => self.flow_dir(domain).join(format!("{i}.flo")),
            FlowSource::GroundTruth => pair_paths(&self.cfg.data_dir, domain, i).flow_gt,
        }
    }
}

/// Standardization statistics saved next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub encoding: String,
    pub stats: ChannelStats,
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> anyhow::Error + '_ {
    move |e| anyhow::anyhow!("parsing {}: {e}", path.display())
}

pub fn load_manifest(files: &Files, cfg: &PipelineConfig) -> Result<Manifest> {
    let path = Layout::new(cfg).manifest();
    if !path.exists() {
        bail!(
            "no dataset at {} (run `flowadapt synth` first)",
            cfg.data_dir.display()
        );
    }
    let m: Manifest = serde_json::from_str(&files.read_string(&path)?).map_err(json_err(&path))?;
    ensure!(
        m.version == MANIFEST_VERSION,
        "unsupported manifest version {}",
        m.version
    );
    Ok(m)
}

fn domain_count(m: &Manifest, domain: Domain) -> usize {
    match domain {
        Domain::Source => m.source.count,
        Domain::Target => m.target.count,
    }
}

pub fn cmd_synth(cfg: &PipelineConfig) -> Result<Manifest> {
    let s = &cfg.synth;
    gen_dataset(
        &s.spec,
        &s.source_shift,
        &s.target_shift,
        s.n_source,
        s.n_target,
        cfg.seed,
        &cfg.data_dir,
    )
    .with_context(|| format!("generating dataset in {}", cfg.data_dir.display()))
}

/// 2-channel encodings are stored as PPM with a zero third channel.
fn encoded_to_file(files: &Files, stem: &Path, img: &Image) -> Result<()> {
    match img.channels() {
        1 => files.write_pgm(&stem.with_extension("pgm"), img),
        3 => files.write_ppm(&stem.with_extension("ppm"), img),
        2 => {
            let padded = Image::from_fn(img.width(), img.height(), 3, |x, y, c| {
                if c < 2 {
                    img.get(x, y, c)
                } else {
                    0.0
                }
            })?;
            files.write_ppm(&stem.with_extension("ppm"), &padded)
        }
        n => bail!("cannot store a {n}-channel flow image"),
    }
}

pub fn cmd_flow(files: &Files, cfg: &PipelineConfig) -> Result<usize> {
    let manifest = load_manifest(files, cfg)?;
    let layout = Layout::new(cfg);
    let mut jobs = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        jobs.extend((0..domain_count(&manifest, domain)).map(|i| (domain, i)));
    }
    jobs.par_iter().try_for_each(|&(domain, i)| -> Result<()> {
        let p = pair_paths(&cfg.data_dir, domain, i);
        let f0 = files.read_ppm(&p.frame_t)?.to_gray()?;
        let f1 = files.read_ppm(&p.frame_t1)?.to_gray()?;
        let flow = farneback(&f0, &f1, &cfg.flow.params)
            .with_context(|| format!("estimating flow for {}", p.frame_t.display()))?;
        let dir = layout.flow_dir(domain);
        files.write_flo(&dir.join(format!("{i}.flo")), &flow)?;
        if let Some(enc) = cfg.flow.encoding.encoding() {
            let img = encode_flow(&flow, enc, MaxMag::Fixed(cfg.flow.max_mag))?;
            encoded_to_file(files, &dir.join(format!("{i}_{}", enc.name())), &img)?;
        }
        Ok(())
    })?;
    Ok(jobs.len())
}

/// RGB of the first frame of every pair, with the encoded flow appended
/// unless the config asks for the RGB-only baseline.
fn load_inputs(
    files: &Files,
    cfg: &PipelineConfig,
    domain: Domain,
    n: usize,
) -> Result<Vec<Image>> {
    let layout = Layout::new(cfg);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let rgb = files.read_ppm(&pair_paths(&cfg.data_dir, domain, i).frame_t)?;
            let Some(enc) = cfg.flow.encoding.encoding() else {
                return Ok(rgb);
            };
            let path = layout.flow_for(domain, i);
            if !path.exists() {
                bail!(
                    "missing flow {} (run `flowadapt flow` first)",
                    path.display()
                );
            }
            let flow: FlowField = files.read_flo(&path)?;
            let img = encode_flow(&flow, enc, MaxMag::Fixed(cfg.flow.max_mag))?;
            Ok(concat_rgbf(&rgb, &img)?)
        })
        .collect()
}

fn load_labels(
    files: &Files,
    cfg: &PipelineConfig,
    domain: Domain,
    n: usize,
) -> Result<Vec<LabelMap>> {
    (0..n)
        .into_par_iter()
        .map(|i| files.read_labels(&pair_paths(&cfg.data_dir, domain, i).labels))
        .collect()
}

fn encoding_name(cfg: &PipelineConfig) -> String {
    cfg.flow
        .encoding
        .encoding()
        .map(|e| e.name().to_string())
        .unwrap_or_else(|| "none".into())
}

fn standardize_all(images: &[Image], stats: &ChannelStats) -> Result<Vec<Image>> {
    Ok(images
        .par_iter()
        .map(|img| standardize(img, stats))
        .collect::<flowadapt_core::Result<_>>()?)
}

fn save_checkpoint(files: &Files, dir: &Path, model: &Model, stats: &FeatureStats) -> Result<()> {
    files.write(&dir.join(MODEL_FILE), &model.to_bytes())?;
    files.write(
        &dir.join(STATS_FILE),
        (serde_json::to_string_pretty(stats)? + "\n").as_bytes(),
    )
}

/// Loads a checkpoint and the statistics stored beside it, checking both
/// against the inputs the config produces.
pub fn load_checkpoint(
    files: &Files,
    cfg: &PipelineConfig,
    path: &Path,
) -> Result<(Model, FeatureStats)> {
    let model = Model::from_bytes(&files.read(path)?)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let stats_path = path.with_file_name(STATS_FILE);
    let stats: FeatureStats =
        serde_json::from_str(&files.read_string(&stats_path)?).map_err(json_err(&stats_path))?;
    let channels = 3 + cfg.flow.encoding.encoding().map_or(0, |e| e.channels());
    let expected = cfg.model.features.len(channels);
    ensure!(
        model.in_dim() == expected,
        "checkpoint {} takes {} features but flow.encoding={} yields {expected}",
        path.display(),
        model.in_dim(),
        encoding_name(cfg)
    );
    ensure!(
        stats.stats.channels() == channels,
        "statistics beside {} cover {} channels, expected {channels}",
        path.display(),
        stats.stats.channels()
    );
    Ok((model, stats))
}

fn evaluate(
    model: &Model,
    images: &[Image],
    labels: &[LabelMap],
    cfg: &PipelineConfig,
    names: &[String],
) -> Result<EvalReport> {
    let preds: Vec<LabelMap> = images
        .iter()
        .map(|img| Ok(predict_probmap(model, img, &cfg.model.features)?.argmax()))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(model.classes());
    for (p, gt) in preds.iter().zip(labels) {
        cm.accumulate(p, gt)?;
    }
    Ok(EvalReport::from_confusion(&cm, names)?)
}

fn write_report(files: &Files, path: &Path, report: &EvalReport) -> Result<()> {
    files.write(path, report.to_csv_string()?.as_bytes())
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub source_report: EvalReport,
}

pub fn cmd_train(files: &Files, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let manifest = load_manifest(files, cfg)?;
    let n = manifest.source.count;
    let raw = load_inputs(files, cfg, Domain::Source, n)?;
    let labels = load_labels(files, cfg, Domain::Source, n)?;
    let stats = compute_stats(&raw)?;
    let inputs = standardize_all(&raw, &stats)?;
    let feats = &cfg.model.features;
    let set = Dataset::sample_images(
        &inputs,
        &labels,
        cfg.model.pixels_per_image,
        feats,
        cfg.stage_seed(seed_offset::SAMPLE),
    )?;
    let model0 = init_model(
        set.dim(),
        cfg.model.hidden,
        manifest.classes,
        cfg.stage_seed(seed_offset::INIT),
    )?;
    let (model, trace) = train(&model0, &set, &cfg.model.train)?;

    let dir = Layout::new(cfg).train_dir();
    let fstats = FeatureStats {
        encoding: encoding_name(cfg),
        stats,
    };
    save_checkpoint(files, &dir, &model, &fstats)?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        loss.push_str(&format!("{},{l:.6}\n", e + 1));
    }
    files.write(&dir.join("loss.csv"), loss.as_bytes())?;
    let report = evaluate(&model, &inputs, &labels, cfg, &manifest.class_names)?;
    write_report(files, &dir.join("source_eval.csv"), &report)?;
    Ok(TrainOutcome {
        checkpoint: dir.join(MODEL_FILE),
        source_report: report,
    })
}

pub struct AdaptOutcome {
    pub checkpoint: PathBuf,
    pub rounds: Vec<cbst::RoundReport>,
}

pub fn cmd_adapt(files: &Files, cfg: &PipelineConfig) -> Result<AdaptOutcome> {
    let manifest = load_manifest(files, cfg)?;
    let layout = Layout::new(cfg);
    let start = layout.train_dir().join(MODEL_FILE);
    if !start.exists() {
        bail!(
            "no source model at {} (run `flowadapt train` first)",
            start.display()
        );
    }
    let (model0, fstats) = load_checkpoint(files, cfg, &start)?;
    let ns = manifest.source.count;
    let nt = manifest.target.count;
    let source = standardize_all(&load_inputs(files, cfg, Domain::Source, ns)?, &fstats.stats)?;
    let source_labels = load_labels(files, cfg, Domain::Source, ns)?;
    let target = standardize_all(&load_inputs(files, cfg, Domain::Target, nt)?, &fstats.stats)?;
    let data = SelfTrainData {
        source: &source,
        source_labels: &source_labels,
        target: &target,
        target_eval: None,
    };
    let (model, rounds) = cbst::self_train(&data, &model0, &cfg.model.features, &cfg.adapt)?;

    let dir = layout.adapt_dir();
    save_checkpoint(files, &dir, &model, &fstats)?;
    let mut csv = Vec::new();
    cbst::write_rounds_csv(&rounds, &mut csv)?;
    files.write(&dir.join("rounds.csv"), &csv)?;
    for r in &rounds {
        for (i, lm) in r.pseudo_labels.iter().enumerate() {
            files.write_labels(
                &dir.join("pseudo")
                    .join(format!("r{}", r.round))
                    .join(format!("{i}.pgm")),
                lm,
            )?;
        }
    }
    Ok(AdaptOutcome {
        checkpoint: dir.join(MODEL_FILE),
        rounds,
    })
}

/// Scores `checkpoint` on the held-out target labels. The report goes to
/// `out`, or to `eval/<checkpoint directory name>.csv`.
pub fn cmd_eval(
    files: &Files,
    cfg: &PipelineConfig,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<(PathBuf, EvalReport)> {
    let manifest = load_manifest(files, cfg)?;
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    let (model, fstats) = load_checkpoint(files, cfg, checkpoint)?;
    ensure!(
        model.classes() == manifest.classes,
        "checkpoint predicts {} classes, dataset has {}",
        model.classes(),
        manifest.classes
    );
    let n = manifest.target.count;
    let target = standardize_all(&load_inputs(files, cfg, Domain::Target, n)?, &fstats.stats)?;
    let labels = load_labels(files, cfg, Domain::Target, n)?;
    let report = evaluate(&model, &target, &labels, cfg, &manifest.class_names)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = checkpoint
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            Layout::new(cfg).eval_dir().join(format!("{stem}.csv"))
        }
    };
    write_report(files, &path, &report)?;
    Ok((path, report))
}

/// Per-class deltas of `b` relative to `a`, moving classes taken from the
/// dataset manifest.
pub fn cmd_compare(
    files: &Files,
    cfg: &PipelineConfig,
    a: &Path,
    b: &Path,
    out: Option<&Path>,
) -> Result<(PathBuf, RunComparison)> {
    let manifest = load_manifest(files, cfg)?;
    let ra = EvalReport::read_csv(files.read(a)?.as_slice())
        .with_context(|| format!("reading {}", a.display()))?;
    let rb = EvalReport::read_csv(files.read(b)?.as_slice())
        .with_context(|| format!("reading {}", b.display()))?;
    let cmp = compare_runs(&ra, &rb, &manifest.moving)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Layout::new(cfg).eval_dir().join("compare.csv"));
    let mut bytes = Vec::new();
    cmp.write_csv(&mut bytes)?;
    files.write(&path, &bytes)?;
    Ok((path, cmp))
}
