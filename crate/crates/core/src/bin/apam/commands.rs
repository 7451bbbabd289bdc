use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use apam_core::data::{load_bbox_index, load_image, write_synth_dataset, ClassList, Dataset, DatasetFiles, RoiSource, Split, SplitSpec, SynthConfig};
use apam_core::eval::{boxed_indices, render::render_overlays, EvalReport, Evaluator};
use apam_core::model::{load_checkpoint, read_checkpoint_config, AttentionMode, FpnMode, Model, ModelConfig};
use apam_core::priors::{build_prior_set, load_class_mapping, load_prior_set, save_prior_set, PriorMapSet};
use apam_core::roi::{
    generate_dataset_masks, generate_roi_mask, mask_file_name, save_mask, ExternalMasks, OtsuSegmenter, RoiParams,
    Segmenter,
};
use apam_core::training::{train, TrainConfig, TrainData, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};
use clap::Parser;
use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cli::*;
use crate::manifest::RunManifest;

/// Bad invocation or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<apam_core::Error>() {
        Some(apam_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(usage(format!("{what} {} does not exist or is not a file", p.display())));
    }
    Ok(())
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(usage(format!("{what} {} does not exist or is not a directory", p.display())));
    }
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// TOML unless the extension is `.json`.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    require_file(path, "config")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn config_err(e: apam_core::Error) -> anyhow::Error {
    usage(e.to_string())
}

fn label<T: Serialize>(v: T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Everything `train` reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub files: DatasetFiles,
    /// Used when ROI masks are computed on the fly.
    pub roi: RoiParams,
    /// `target,source` CSV mapping dataset classes onto prior classes.
    pub prior_class_map: Option<PathBuf>,
}

/// Provenance stored in checkpoints so `eval` and `render` rebuild the same
/// dataset view.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct CkptMeta {
    data: Option<PathBuf>,
    files: DatasetFiles,
    split: SplitSpec,
    classes: Vec<String>,
    priors: Option<PathBuf>,
    roi: Option<PathBuf>,
    roi_params: RoiParams,
    prior_class_map: Option<PathBuf>,
}

pub fn run(cmd: &Command, args: &[String]) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, args),
        Command::GenPriors(a) => gen_priors(a, args),
        Command::GenRoi(a) => gen_roi(a, args),
        Command::Train(a) => train_cmd(a, args),
        Command::Eval(a) => eval_cmd(a, args),
        Command::Render(a) => render_cmd(a, args),
        Command::Rerun(a) => rerun(a),
    }
}

fn synth(a: &SynthArgs, args: &[String]) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.n_images {
        cfg.n_images = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(config_err)?;
    let mut m = RunManifest::start("synth", args);
    write_synth_dataset(&a.out, &cfg)?;
    info!("wrote {} images to {}", cfg.n_images, a.out.display());
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.seed);
    m.inputs = a.config.iter().cloned().collect();
    m.outputs = vec![a.out.clone()];
    m.finish(&a.out)?;
    Ok(())
}

fn gen_priors(a: &GenPriorsArgs, args: &[String]) -> Result<()> {
    require_file(&a.bbox, "bbox CSV")?;
    if a.classes.as_os_str() != "nih" {
        require_file(&a.classes, "class list")?;
    }
    if a.resolution == 0 {
        return Err(usage("--resolution must be positive"));
    }
    let classes = ClassList::from_file(&a.classes)?;
    let anns = load_bbox_index(&a.bbox, &classes)?;
    if anns.is_empty() {
        warn!("{} has no boxes; every prior map is all ones", a.bbox.display());
    }
    let set = build_prior_set(&anns, &classes, (a.resolution, a.resolution))?;
    let mut m = RunManifest::start("gen-priors", args);
    save_prior_set(&set, &a.out)?;
    for pm in &set.maps {
        info!("{}: {} boxes", classes.name(pm.class_id), pm.n_images);
    }
    m.config = serde_json::json!({ "resolution": a.resolution, "classes": classes.names() });
    m.inputs = vec![a.bbox.clone(), a.classes.clone()];
    m.outputs = vec![a.out.clone()];
    m.finish(&a.out)?;
    Ok(())
}

fn parse_segmenter(spec: &str) -> Result<Box<dyn Segmenter>> {
    match spec.split_once(':') {
        None if spec == "otsu" => Ok(Box::new(OtsuSegmenter)),
        Some(("external", dir)) => {
            require_dir(Path::new(dir), "external mask directory")?;
            Ok(Box::new(ExternalMasks { dir: dir.into() }))
        }
        _ => Err(usage(format!("unknown segmenter {spec:?}; expected `otsu` or `external:DIR`"))),
    }
}

fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

fn gen_roi(a: &GenRoiArgs, args: &[String]) -> Result<()> {
    require_dir(&a.images, "image directory")?;
    let segmenter = parse_segmenter(&a.segmenter)?;
    if !(0.0..=1.0).contains(&a.threshold) || a.islands == 0 {
        return Err(usage("--threshold must be in [0, 1] and --islands positive"));
    }
    let ids = list_images(&a.images)?;
    if ids.is_empty() {
        return Err(usage(format!("no PNG or JPEG images in {}", a.images.display())));
    }
    let params = RoiParams {
        threshold: a.threshold,
        islands: a.islands,
        radius: a.radius,
        working_edge: a.working_edge,
    };
    let mut m = RunManifest::start("gen-roi", args);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let provenance: Vec<(String, String)> = ids
        .par_iter()
        .map(|id| -> Result<(String, String)> {
            let image = load_image(&a.images.join(id))?;
            let mask = generate_roi_mask(id, &image, segmenter.as_ref(), &params)?;
            save_mask(&mask.mask, &a.out.join(mask_file_name(id)))?;
            Ok((id.clone(), label(mask.provenance)))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("image_id,provenance\n");
    for (id, p) in &provenance {
        csv.push_str(&format!("{id},{p}\n"));
    }
    fs::write(a.out.join("provenance.csv"), csv)?;
    info!("wrote {} masks to {}", ids.len(), a.out.display());
    m.config = serde_json::json!({ "params": params, "segmenter": a.segmenter });
    m.inputs = vec![a.images.clone()];
    m.outputs = vec![a.out.clone()];
    m.finish(&a.out)?;
    Ok(())
}

/// Prior maps aligned to the dataset classes, when the model uses them.
fn resolve_priors(
    mode: AttentionMode,
    dir: Option<&Path>,
    classes: &ClassList,
    class_map: Option<&Path>,
) -> Result<Option<PriorMapSet>> {
    match (mode.uses_priors(), dir) {
        (true, None) => Err(usage(format!("attention mode {} needs --priors", label(mode)))),
        (false, Some(d)) => {
            warn!("attention mode {} does not use prior maps; ignoring {}", label(mode), d.display());
            Ok(None)
        }
        (false, None) => Ok(None),
        (true, Some(d)) => {
            require_dir(d, "prior directory")?;
            let mapping = class_map.map(load_class_mapping).transpose()?;
            Ok(Some(load_prior_set(d)?.align_to(classes, mapping.as_ref())))
        }
    }
}

/// ROI source for `indices`; masks are computed in memory when no
/// directory is given.
fn resolve_roi(mode: AttentionMode, dir: Option<&Path>, ds: &Dataset, indices: &[usize], params: &RoiParams) -> Result<RoiSource> {
    if !mode.uses_roi() {
        if let Some(d) = dir {
            warn!("attention mode {} does not use ROI masks; ignoring {}", label(mode), d.display());
        }
        return Ok(RoiSource::None);
    }
    match dir {
        Some(d) => {
            require_dir(d, "ROI directory")?;
            if let Some(&i) = indices
                .iter()
                .find(|&&i| !d.join(mask_file_name(&ds.records[i].image_id)).is_file())
            {
                return Err(usage(format!(
                    "ROI directory {} has no mask for {}",
                    d.display(),
                    ds.records[i].image_id
                )));
            }
            Ok(RoiSource::Dir(d.to_path_buf()))
        }
        None => {
            warn!("no ROI directory given; computing masks with the built-in Otsu segmenter");
            let masks: HashMap<String, _> = if indices.len() == ds.records.len() {
                generate_dataset_masks(ds, &OtsuSegmenter, params)?
            } else {
                indices
                    .par_iter()
                    .map(|&i| {
                        let r = &ds.records[i];
                        let img = load_image(&ds.image_path(r))?;
                        let m = generate_roi_mask(&r.image_id, &img, &OtsuSegmenter, params)?;
                        Ok((r.image_id.clone(), m.mask))
                    })
                    .collect::<apam_core::Result<_>>()?
            };
            Ok(RoiSource::Memory(Arc::new(masks)))
        }
    }
}

fn split_csv(ds: &Dataset) -> String {
    let mut s = String::from("image_id,split\n");
    for r in &ds.records {
        let split = match r.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        s.push_str(&format!("{},{split}\n", r.image_id));
    }
    s
}

fn train_cmd(a: &TrainArgs, args: &[String]) -> Result<()> {
    let mut cfg: RunConfig = read_config(&a.config)?;
    cfg.train.validate().map_err(config_err)?;
    cfg.split.validate().map_err(config_err)?;
    require_dir(&a.data, "data directory")?;
    let mut ds = Dataset::open(&a.data, &cfg.files, None)?;
    ds.assign_splits(&cfg.split);
    if cfg.model.n_classes != ds.classes.len() {
        if cfg.model.n_classes != ModelConfig::default().n_classes {
            warn!(
                "config says {} classes, dataset has {}; using the dataset",
                cfg.model.n_classes,
                ds.classes.len()
            );
        }
        cfg.model.n_classes = ds.classes.len();
    }
    cfg.model.validate().map_err(config_err)?;
    let mode = cfg.model.attention;
    let priors = resolve_priors(mode, a.priors.as_deref(), &ds.classes, cfg.prior_class_map.as_deref())?;
    let n_train = ds.indices(Split::Train).len();
    if cfg.train.batch_size > n_train {
        return Err(usage(format!(
            "batch_size {} exceeds the {n_train} training images",
            cfg.train.batch_size
        )));
    }
    let all: Vec<usize> = (0..ds.records.len()).collect();
    let roi = resolve_roi(mode, a.roi.as_deref(), &ds, &all, &cfg.roi)?;

    let mut m = RunManifest::start("train", args);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let meta = CkptMeta {
        data: Some(absolute(&a.data)),
        files: cfg.files.clone(),
        split: cfg.split.clone(),
        classes: ds.classes.names().to_vec(),
        priors: a.priors.as_deref().filter(|_| mode.uses_priors()).map(absolute),
        roi: a.roi.as_deref().filter(|_| mode.uses_roi()).map(absolute),
        roi_params: cfg.roi.clone(),
        prior_class_map: cfg.prior_class_map.as_deref().map(absolute),
    };
    let mut model = Model::new(&cfg.model)?;
    info!(
        "training {} weights on {n_train} images ({} / fpn {})",
        model.store.num_weights(),
        label(mode),
        label(cfg.model.fpn)
    );
    let data = TrainData {
        dataset: &ds,
        priors: priors.as_ref(),
        roi,
    };
    let outcome = train(&mut model, &data, &cfg.train, Some(&a.out), &serde_json::to_value(&meta)?)?;
    fs::write(a.out.join("splits.csv"), split_csv(&ds))?;
    match outcome.best_val_auc {
        Some(auc) => info!("best validation mean AUC {auc:.4} at epoch {}", outcome.best_epoch),
        None => info!("no validation AUC; kept the final epoch"),
    }
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.train.seed);
    m.inputs = [Some(&a.config), Some(&a.data), a.priors.as_ref(), a.roi.as_ref()]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    m.outputs = [LOG_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT, "splits.csv"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    m.finish(&a.out)?;
    Ok(())
}

/// Checkpoint model plus the dataset view it was trained on.
struct Loaded {
    model: Model,
    meta: CkptMeta,
    ds: Dataset,
}

fn load_for_inference(checkpoint: &Path, data: Option<&Path>) -> Result<Loaded> {
    require_file(checkpoint, "checkpoint")?;
    let header = read_checkpoint_config(checkpoint)?;
    let meta: CkptMeta = serde_json::from_value(header.meta.clone()).unwrap_or_default();
    let data = data
        .map(Path::to_path_buf)
        .or_else(|| meta.data.clone())
        .ok_or_else(|| usage("the checkpoint records no dataset; pass --data"))?;
    require_dir(&data, "data directory")?;
    let mut ds = Dataset::open(&data, &meta.files, None)?;
    if !meta.classes.is_empty() && meta.classes != ds.classes.names() {
        return Err(usage(format!(
            "checkpoint was trained on classes {:?}, dataset has {:?}",
            meta.classes,
            ds.classes.names()
        )));
    }
    if header.model.n_classes != ds.classes.len() {
        return Err(usage(format!(
            "checkpoint has {} classes, dataset has {}",
            header.model.n_classes,
            ds.classes.len()
        )));
    }
    ds.assign_splits(&meta.split);
    let (model, _) = load_checkpoint(checkpoint, Some(&header.model))?;
    Ok(Loaded { model, meta, ds })
}

fn model_label(cfg: &ModelConfig) -> String {
    match cfg.fpn {
        FpnMode::None => label(cfg.attention),
        f => format!("{}+fpn_{}", label(cfg.attention), label(f)),
    }
}

fn eval_cmd(a: &EvalArgs, args: &[String]) -> Result<()> {
    if a.iou_thresholds.is_empty() || a.iou_thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
        return Err(usage("IoU thresholds must lie in [0, 1)"));
    }
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be positive"));
    }
    let Loaded { model, meta, ds } = load_for_inference(&a.checkpoint, Some(&a.data))?;
    let indices = match a.split {
        SplitArg::Train => ds.indices(Split::Train),
        SplitArg::Val => ds.indices(Split::Val),
        SplitArg::Test => ds.indices(Split::Test),
        SplitArg::All => (0..ds.records.len()).collect(),
    };
    if indices.is_empty() {
        bail!("the {} split is empty", label_split(a.split));
    }
    let loc_indices = if a.include_negatives { indices.clone() } else { boxed_indices(&ds, &indices) };
    if a.mode == EvalMode::Loc && loc_indices.is_empty() {
        bail!("no image in the {} split has localizable boxes", label_split(a.split));
    }
    let mode = model.config.attention;
    let priors = resolve_priors(
        mode,
        a.priors.as_deref().or(meta.priors.as_deref()),
        &ds.classes,
        meta.prior_class_map.as_deref(),
    )?;
    let roi = resolve_roi(mode, a.roi.as_deref().or(meta.roi.as_deref()), &ds, &indices, &meta.roi_params)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());

    let mut m = RunManifest::start("eval", args);
    let ev = Evaluator::new(&model, &ds, priors.as_ref(), roi, a.batch_size)?;
    let preds = ev.classify(&indices)?;
    let (cases, localization) = match a.mode {
        EvalMode::Cls => (Vec::new(), Vec::new()),
        EvalMode::Loc => ev.localize(&loc_indices, &a.iou_thresholds, a.include_negatives)?,
    };
    let report = EvalReport {
        model_label: model_label(&model.config),
        classes: ds.classes.names().to_vec(),
        n_images: indices.len(),
        positives: (0..ds.classes.len())
            .map(|c| preds.labels.column(c).iter().filter(|&&v| v >= 0.5).count())
            .collect(),
        auc: preds.auc,
        mean_auc: preds.mean_auc,
        localization,
        include_negatives: a.include_negatives,
    };
    if !out.as_os_str().is_empty() {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    }
    let stem = match a.mode {
        EvalMode::Cls => "eval_cls",
        EvalMode::Loc => "eval_loc",
    };
    let text = report.to_text();
    fs::write(out.join(format!("{stem}.json")), report.to_json())?;
    fs::write(out.join(format!("{stem}.txt")), &text)?;
    let mut outputs = vec![out.join(format!("{stem}.json")), out.join(format!("{stem}.txt"))];
    if a.mode == EvalMode::Loc {
        let p = out.join("loc_cases.json");
        fs::write(&p, serde_json::to_string_pretty(&cases)?)?;
        outputs.push(p);
    }
    println!("{text}");
    m.config = serde_json::json!({
        "mode": stem,
        "split": label_split(a.split),
        "iou_thresholds": a.iou_thresholds,
        "include_negatives": a.include_negatives,
        "model": model.config,
    });
    m.inputs = vec![a.checkpoint.clone(), a.data.clone()];
    m.outputs = outputs;
    m.finish(&out)?;
    Ok(())
}

fn label_split(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

fn parse_image_list(spec: &str) -> Result<Vec<String>> {
    let ids: Vec<String> = match spec.strip_prefix('@') {
        Some(file) => {
            require_file(Path::new(file), "image list")?;
            fs::read_to_string(file)?.lines().map(str::trim).map(String::from).collect()
        }
        None => spec.split(',').map(str::trim).map(String::from).collect(),
    };
    let ids: Vec<String> = ids.into_iter().filter(|s| !s.is_empty()).collect();
    if ids.is_empty() {
        return Err(usage("--images lists no images"));
    }
    Ok(ids)
}

fn render_cmd(a: &RenderArgs, args: &[String]) -> Result<()> {
    let ids = parse_image_list(&a.images)?;
    let Loaded { model, meta, ds } = load_for_inference(&a.checkpoint, a.data.as_deref())?;
    let by_id: HashMap<&str, usize> = ds.records.iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect();
    let mut indices = Vec::new();
    for id in &ids {
        match by_id.get(id.as_str()) {
            Some(&i) if ds.image_path(&ds.records[i]).is_file() => indices.push(i),
            Some(_) => warn!("image file for {id} is missing; skipped"),
            None => warn!("{id} is not in the dataset; skipped"),
        }
    }
    if indices.is_empty() {
        bail!("none of the {} requested images could be found", ids.len());
    }
    let mode = model.config.attention;
    let priors = resolve_priors(
        mode,
        a.priors.as_deref().or(meta.priors.as_deref()),
        &ds.classes,
        meta.prior_class_map.as_deref(),
    )?;
    let roi = resolve_roi(mode, a.roi.as_deref().or(meta.roi.as_deref()), &ds, &indices, &meta.roi_params)?;
    let mut m = RunManifest::start("render", args);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ev = Evaluator::new(&model, &ds, priors.as_ref(), roi, 8)?;
    let written = render_overlays(&ev, &indices, &a.out)?;
    info!("wrote {} overlays to {}", written.len(), a.out.display());
    m.config = serde_json::json!({ "images": ids, "model": model.config });
    m.inputs = vec![a.checkpoint.clone()];
    m.outputs = written;
    m.finish(&a.out)?;
    Ok(())
}

fn rerun(a: &RerunArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let manifest = RunManifest::read(&a.manifest)?;
    if manifest.subcommand == "rerun" {
        bail!("a rerun manifest cannot be replayed");
    }
    let cli = crate::cli::Cli::try_parse_from(std::iter::once("apam".to_string()).chain(manifest.args.iter().cloned()))
        .map_err(|e| usage(format!("manifest arguments no longer parse: {e}")))?;
    if let Some(dir) = &manifest.working_dir {
        std::env::set_current_dir(dir).map_err(|e| anyhow!("entering {}: {e}", dir.display()))?;
    }
    info!("replaying `apam {}`", manifest.args.join(" "));
    run(&cli.command, &manifest.args)
}
