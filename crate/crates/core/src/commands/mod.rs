//! The `curate`, `train`, `fix`, `analyze` and `eval` pipelines behind the
//! command-line front end.

mod config;
pub mod plot;

pub use config::{derive_seed, AnalyzeSection, RunConfig, TrainSection, WarpSection};

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{
    centroid, cluster_summaries, degradation_embedding, embed_image, project_2d, ClusterSummary,
    DegradationEmbedding, FeatureExtractor, ProjectionMethod, ToyExtractor,
};
use crate::checkpoint::load_model;
use crate::dataset::{load_scene, parse_poses, read_manifest, read_samples, scene_transforms, write_samples, WarpMode};
use crate::error::{Error, Result};
use crate::fixer::FixerModel;
use crate::image::Image;
use crate::io::{list_pngs, read_flo, read_pfm, read_png, write_png};
use crate::metrics::{evaluate_pairs, matching_names, Evaluation, MetricPlugin};
use crate::training::{
    curate_pairs, history_csv, train_state, DegraderKind, LossRecord, NamedDegrader, TrainState, TrainingSample,
};
use crate::warp::{estimate_flow, pre_align, CameraPose, DepthMap, DisparityMap, FlowEstimator, ViewTransform};

use plot::{color, Marker, Scatter};

/// `prefix` with `suffix` appended to its final component.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurateReport {
    pub scenes: usize,
    pub samples: usize,
    /// Scene path and reason, for every scene that was skipped.
    pub skipped: Vec<(PathBuf, String)>,
}

fn curate_scene(
    dir: &Path,
    kind: &DegraderKind,
    cfg: &RunConfig,
    estimator: Option<&dyn FlowEstimator>,
) -> Result<Vec<TrainingSample>> {
    let scene = load_scene(dir)?;
    let transforms = scene_transforms(&scene, cfg.warp.mode, estimator)?;
    let degrader = NamedDegrader::new(kind.clone(), derive_seed(cfg.curation_seed(), &scene.name));
    curate_pairs(&scene.frames, &transforms, &degrader, &scene.name, cfg.warp.temperature)
}

/// Curates every scene in `manifest` with `degrader` and writes the sample
/// archive to `out_dir`. Malformed scenes are skipped with a logged reason.
pub fn cmd_curate(
    manifest: &Path,
    degrader: &str,
    out_dir: &Path,
    cfg: &RunConfig,
    estimator: Option<&dyn FlowEstimator>,
) -> Result<CurateReport> {
    let kind: DegraderKind = degrader.parse()?;
    let dirs = read_manifest(manifest)?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = BTreeSet::new();
    let mut scenes = 0;
    for dir in &dirs {
        let result = curate_scene(dir, &kind, cfg, estimator).and_then(|s| {
            let id = s.first().map(|x| x.scene_id.clone()).unwrap_or_default();
            if seen.insert(id.clone()) {
                Ok(s)
            } else {
                Err(Error::InvalidInput(format!("scene name '{id}' is used twice")))
            }
        });
        match result {
            Ok(s) => {
                log::info!("{}: {} samples", dir.display(), s.len());
                scenes += 1;
                samples.extend(s);
            }
            Err(e) => {
                log::warn!("skipping scene {}: {e}", dir.display());
                skipped.push((dir.clone(), e.to_string()));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no scene in {} could be curated ({} skipped)",
            manifest.display(),
            skipped.len()
        )));
    }
    write_samples(out_dir, &samples)?;
    Ok(CurateReport {
        scenes,
        samples: samples.len(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub start_step: usize,
    pub end_step: usize,
    pub history: Vec<LossRecord>,
    pub loss_csv: PathBuf,
}

/// Loss CSV written next to a checkpoint.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

/// Trains on the archive in `samples_dir` and writes `out` plus its loss
/// CSV. With `resume`, training continues from that checkpoint's state and
/// the loss CSV is appended to. On divergence the state before the failing
/// step is saved as `<out>.diverged.ufix`.
pub fn cmd_train(cfg: &RunConfig, samples_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    let samples = read_samples(samples_dir)?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            let mut ck_cfg = s.model.config().clone();
            ck_cfg.seed = cfg.init_seed();
            if ck_cfg != cfg.fixer_config() {
                log::warn!("model settings in the config differ from {}; the checkpoint's are used", p.display());
            }
            s
        }
        None => TrainState::new(FixerModel::new(cfg.fixer_config())?),
    };
    let start_step = state.step();
    let diagnostic = out.with_extension("diverged.ufix");
    ensure_parent(out)?;
    let total = cfg.train.steps;
    let history = train_state(&mut state, &samples, &cfg.loss(), &cfg.optim(), Some(diagnostic.as_path()), |_, r| {
        if r.step % 100 == 0 || r.step == total {
            log::info!("step {}/{}: loss {:.6}", r.step, total, r.loss);
        }
        Ok(())
    })?;
    state.save(out)?;
    let csv_path = loss_csv_path(out);
    let csv = history_csv(&history);
    if resume.is_some() && csv_path.is_file() {
        let mut old = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        old.push_str(csv.split_once('\n').map(|(_, rows)| rows).unwrap_or(""));
        write_text(&csv_path, &old)?;
    } else {
        write_text(&csv_path, &csv)?;
    }
    Ok(TrainReport {
        start_step,
        end_step: state.step(),
        history,
        loss_csv: csv_path,
    })
}

#[derive(Clone, Default)]
pub struct FixOptions<'a> {
    pub checkpoint: PathBuf,
    /// A PNG, or a directory of PNG frames.
    pub degraded: PathBuf,
    /// A single reference PNG, or a directory holding one reference per
    /// degraded frame under the same file name.
    pub reference: PathBuf,
    /// A file, or a directory of per-frame files named `<stem>.<ext>`:
    /// `.flo` (flow), `.pfm` (disparity) or `.txt` (camera file) depending
    /// on the warp mode.
    pub transform: Option<PathBuf>,
    /// Reference depth (`.pfm`) for geometry mode: a file or a directory of
    /// `<stem>.pfm`.
    pub depth: Option<PathBuf>,
    /// Estimate flow from reference to degraded when a transform is missing.
    pub flow_fallback: bool,
    pub estimator: Option<&'a dyn FlowEstimator>,
    /// Output PNG, or output directory in directory mode.
    pub out: PathBuf,
}

fn per_frame(path: &Path, stem: &str, ext: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{stem}.{ext}"))
    } else {
        path.to_path_buf()
    }
}

/// Camera file: intrinsics, then reference and target world-to-camera
/// extrinsics, in the scene pose format.
fn camera_transform(camera: &Path, depth: &Path) -> Result<ViewTransform> {
    let text = fs::read_to_string(camera).map_err(|e| Error::io(camera, e))?;
    let (k, ext) = parse_poses(&text, camera)?;
    if ext.len() != 2 {
        return Err(Error::format(camera, "expected reference and target extrinsics"));
    }
    let g = read_pfm(depth)?;
    let valid = g.data.iter().map(|&d| d.is_finite() && d > 0.0).collect();
    let data = g.data.iter().map(|&d| if d.is_finite() && d > 0.0 { d } else { 1.0 }).collect();
    Ok(ViewTransform::DepthPose {
        depth: DepthMap::with_mask(g.height, g.width, data, valid)?,
        intrinsics: k,
        relative_pose: CameraPose::relative((&ext[0].0, &ext[0].1), (&ext[1].0, &ext[1].1))?,
    })
}

fn frame_transform(
    opts: &FixOptions,
    mode: WarpMode,
    stem: &str,
    reference: &Image,
    degraded: &Image,
) -> Result<ViewTransform> {
    let ext = match mode {
        WarpMode::Flow => "flo",
        WarpMode::Disparity => "pfm",
        WarpMode::Geometry => "txt",
    };
    let path = opts.transform.as_deref().map(|t| per_frame(t, stem, ext)).filter(|p| p.is_file());
    match path {
        Some(p) => match mode {
            WarpMode::Flow => Ok(ViewTransform::Flow(read_flo(&p)?)),
            WarpMode::Disparity => {
                let g = read_pfm(&p)?;
                Ok(ViewTransform::Disparity(DisparityMap::new(g.height, g.width, g.data)?))
            }
            WarpMode::Geometry => {
                let d = opts
                    .depth
                    .as_deref()
                    .ok_or_else(|| Error::Config("geometry mode needs --depth".into()))?;
                camera_transform(&p, &per_frame(d, stem, "pfm"))
            }
        },
        None if opts.flow_fallback => Ok(ViewTransform::Flow(estimate_flow(reference, degraded, opts.estimator)?)),
        None => Err(Error::Config(format!(
            "no {mode} transform for '{stem}'; supply one or pass --flow-fallback"
        ))),
    }
}

fn stem_of(name: &str) -> &str {
    name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name)
}

/// Pre-aligns the reference and fixes each degraded frame. Directory mode
/// keeps file names; frames are processed in parallel and written in name
/// order. Returns the written paths.
pub fn cmd_fix(opts: &FixOptions, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = load_model(&opts.checkpoint)?;
    let dir_mode = opts.degraded.is_dir();
    let names = if dir_mode {
        let n = list_pngs(&opts.degraded)?;
        if n.is_empty() {
            return Err(Error::InvalidInput(format!("no PNG frames in {}", opts.degraded.display())));
        }
        n
    } else {
        let n = opts
            .degraded
            .file_name()
            .ok_or_else(|| Error::InvalidInput("degraded path has no file name".into()))?;
        vec![n.to_string_lossy().into_owned()]
    };
    let shared_ref = if opts.reference.is_dir() { None } else { Some(read_png(&opts.reference)?) };
    let fixed = names
        .par_iter()
        .map(|name| {
            let deg_path = if dir_mode { opts.degraded.join(name) } else { opts.degraded.clone() };
            let degraded = read_png(&deg_path)?;
            let reference = match &shared_ref {
                Some(r) => r.clone(),
                None => read_png(opts.reference.join(name))?,
            };
            if !reference.same_dims(&degraded) {
                return Err(Error::Shape(format!(
                    "{name}: reference {:?}x{} and degraded {:?}x{} differ",
                    reference.dims(),
                    reference.channels(),
                    degraded.dims(),
                    degraded.channels()
                )));
            }
            let t = frame_transform(opts, cfg.warp.mode, stem_of(name), &reference, &degraded)?;
            let warped = pre_align(&reference, &t, Some(&degraded), cfg.warp.temperature)?;
            model.fix(&degraded, &warped)
        })
        .collect::<Result<Vec<Image>>>()?;
    let mut written = Vec::with_capacity(names.len());
    if dir_mode {
        fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    } else {
        ensure_parent(&opts.out)?;
    }
    for (name, img) in names.iter().zip(&fixed) {
        let p = if dir_mode { opts.out.join(name) } else { opts.out.clone() };
        write_png(&p, img)?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    pub gt: PathBuf,
    /// `(label, directory)` per degradation variant.
    pub variants: Vec<(String, PathBuf)>,
    /// `(variant label, directory)` of fixed outputs for that variant.
    pub fixed: Vec<(String, PathBuf)>,
    /// Extractor checkpoint; the built-in toy extractor when `None`.
    pub extractor: Option<PathBuf>,
    /// Writes `<prefix>.csv`, `<prefix>_summary.txt` and `<prefix>.png`.
    pub out_prefix: PathBuf,
}

/// Statistics of one labelled group in the full embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub label: String,
    /// Norm of the group's mean embedding (distance from ground truth).
    pub centroid_norm: f64,
    /// Mean of the per-image embedding norms.
    pub mean_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub names: Vec<String>,
    pub labels: Vec<String>,
    pub points: Vec<[f64; 2]>,
    pub clusters: Vec<ClusterSummary>,
    pub groups: Vec<GroupStats>,
    /// Variant label, group index of the variant and of its fixed outputs.
    pub shifts: Vec<(String, usize, usize)>,
}

/// Label of the group holding fixed outputs for `variant`.
pub fn fixed_label(variant: &str) -> String {
    format!("{variant}:fixed")
}

fn check_label(l: &str) -> Result<()> {
    if l.is_empty() || l.contains([',', '\n', '=']) {
        return Err(Error::Config(format!("label '{l}' must be non-empty without ',', '=' or newlines")));
    }
    Ok(())
}

/// Parses `label=dir`.
pub fn parse_labelled(spec: &str) -> Result<(String, PathBuf)> {
    let (l, d) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected label=dir, got '{spec}'")))?;
    check_label(l)?;
    Ok((l.to_string(), PathBuf::from(d)))
}

fn subsample(names: Vec<String>, k: Option<usize>, seed: u64) -> Vec<String> {
    match k {
        Some(k) if k < names.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, names.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| names[i].clone()).collect()
        }
        _ => names,
    }
}

fn group_embeddings(
    dir: &Path,
    names: &[String],
    gt: &[crate::analysis::PooledEmbedding],
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<DegradationEmbedding>> {
    names
        .par_iter()
        .zip(gt)
        .map(|(n, g)| degradation_embedding(&embed_image(&read_png(dir.join(n))?, extractor)?, g))
        .collect()
}

/// Embeds every variant (and fixed output) relative to the ground truth,
/// projects all embeddings to 2-D, summarises each cluster and writes the
/// CSV, summary and scatter plot.
pub fn cmd_analyze(opts: &AnalyzeOptions, cfg: &RunConfig) -> Result<AnalysisReport> {
    if opts.variants.is_empty() {
        return Err(Error::Config("at least one variant directory is required".into()));
    }
    let mut labels_seen = BTreeSet::new();
    for (l, _) in &opts.variants {
        check_label(l)?;
        if !labels_seen.insert(l.clone()) {
            return Err(Error::Config(format!("variant label '{l}' is repeated")));
        }
    }
    for (l, _) in &opts.fixed {
        if !labels_seen.contains(l) {
            return Err(Error::Config(format!("fixed outputs given for unknown variant '{l}'")));
        }
        if !labels_seen.insert(fixed_label(l)) {
            return Err(Error::Config(format!("fixed outputs for '{l}' given twice")));
        }
    }
    let extractor = match &opts.extractor {
        Some(p) => ToyExtractor::load(p)?,
        None => ToyExtractor::standard(),
    };
    let mut names = None;
    for (_, d) in opts.variants.iter().chain(&opts.fixed) {
        names = Some(matching_names(d, &opts.gt)?);
    }
    let names = subsample(names.expect("variants are non-empty"), cfg.analyze.samples, cfg.analysis_seed());
    let gt: Vec<_> = names
        .par_iter()
        .map(|n| embed_image(&read_png(opts.gt.join(n))?, &extractor))
        .collect::<Result<_>>()?;

    let mut groups: Vec<(String, Vec<DegradationEmbedding>)> = Vec::new();
    for (l, d) in &opts.variants {
        groups.push((l.clone(), group_embeddings(d, &names, &gt, &extractor)?));
    }
    for (l, d) in &opts.fixed {
        groups.push((fixed_label(l), group_embeddings(d, &names, &gt, &extractor)?));
    }
    let all: Vec<&DegradationEmbedding> = groups.iter().flat_map(|(_, e)| e).collect();
    let labels: Vec<String> = groups.iter().flat_map(|(l, e)| vec![l.clone(); e.len()]).collect();
    let points = project_2d(&all, cfg.analyze.method, cfg.analysis_seed(), cfg.analyze.perplexity)?;
    let clusters = cluster_summaries(&points, &labels)?;
    let stats = groups
        .iter()
        .map(|(l, e)| {
            Ok(GroupStats {
                label: l.clone(),
                centroid_norm: centroid(e)?.iter().map(|v| v * v).sum::<f64>().sqrt(),
                mean_norm: e.iter().map(DegradationEmbedding::norm).sum::<f64>() / e.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let shifts = opts
        .fixed
        .iter()
        .enumerate()
        .map(|(i, (l, _))| {
            let v = opts.variants.iter().position(|(vl, _)| vl == l).expect("checked above");
            (l.clone(), v, opts.variants.len() + i)
        })
        .collect();
    let report = AnalysisReport {
        names,
        labels,
        points,
        clusters,
        groups: stats,
        shifts,
    };
    write_analysis(&report, cfg, &opts.out_prefix)?;
    Ok(report)
}

fn write_analysis(r: &AnalysisReport, cfg: &RunConfig, prefix: &Path) -> Result<()> {
    let kept: Vec<bool> = r.clusters.iter().flat_map(|c| c.kept.iter().copied()).collect();
    let mut csv = String::from("label,x,y,kept\n");
    for ((l, p), k) in r.labels.iter().zip(&r.points).zip(&kept) {
        let _ = writeln!(csv, "{l},{:.6},{:.6},{k}", p[0], p[1]);
    }
    write_text(&with_suffix(prefix, ".csv"), &csv)?;

    let method = match cfg.analyze.method {
        ProjectionMethod::Tsne => "tsne",
        ProjectionMethod::Pca => "pca",
    };
    let mut s = format!("method: {method}\nimages_per_group: {}\n", r.names.len());
    for (c, g) in r.clusters.iter().zip(&r.groups) {
        let _ = writeln!(
            s,
            "cluster {}: {{ mean: [{:.6}, {:.6}], kept: {}, dropped: {}, centroid_norm: {:.6}, mean_norm: {:.6} }}",
            c.label, c.mean[0], c.mean[1], c.count_kept, c.count_dropped, g.centroid_norm, g.mean_norm
        );
    }
    for (l, a, b) in &r.shifts {
        let (ga, gb) = (&r.groups[*a], &r.groups[*b]);
        let _ = writeln!(
            s,
            "shift {l}: {{ centroid_norm: {:.6} -> {:.6}, mean_norm: {:.6} -> {:.6} }}",
            ga.centroid_norm, gb.centroid_norm, ga.mean_norm, gb.mean_norm
        );
    }
    write_text(&with_suffix(prefix, "_summary.txt"), &s)?;

    let color_of = |label: &str| {
        let base = label.strip_suffix(":fixed").unwrap_or(label);
        let i = r.groups.iter().position(|g| g.label == base).unwrap_or(0);
        color(i)
    };
    let means: Vec<[f64; 2]> = r.clusters.iter().map(|c| c.mean).collect();
    let extent: Vec<[f64; 2]> = r.points.iter().chain(&means).copied().collect();
    let mut plot = Scatter::new(512, &extent);
    for ((l, p), k) in r.labels.iter().zip(&r.points).zip(&kept) {
        plot.marker(*p, if *k { Marker::Dot } else { Marker::Faint }, color_of(l));
    }
    for (l, a, b) in &r.shifts {
        plot.arrow(r.clusters[*a].mean, r.clusters[*b].mean, color_of(l));
    }
    for c in &r.clusters {
        let m = if c.label.ends_with(":fixed") { Marker::Ring } else { Marker::Cross };
        plot.marker(c.mean, m, color_of(&c.label));
    }
    let png = with_suffix(prefix, ".png");
    ensure_parent(&png)?;
    plot.save(&png)
}

/// Evaluates matching PNGs; with `out_prefix`, writes `<prefix>.csv` and
/// `<prefix>_summary.txt`.
pub fn cmd_eval(pred: &Path, gt: &Path, plugins: &[String], out_prefix: Option<&Path>) -> Result<Evaluation> {
    let plugins = plugins.iter().map(|p| MetricPlugin::parse(p)).collect::<Result<Vec<_>>>()?;
    let eval = evaluate_pairs(pred, gt, &plugins)?;
    for p in &plugins {
        if !eval.summary.contains_key(&p.name) {
            log::warn!("metric plugin '{}' produced no values; column omitted", p.name);
        }
    }
    if let Some(prefix) = out_prefix {
        write_text(&with_suffix(prefix, ".csv"), &eval.to_csv())?;
        write_text(&with_suffix(prefix, "_summary.txt"), &eval.summary_text())?;
    }
    Ok(eval)
}

#[cfg(test)]
mod tests;
