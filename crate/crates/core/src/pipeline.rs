//! End-to-end stages behind the command-line tool. Each stage reads its
//! inputs from disk, writes its outputs plus the resolved `config.json`, and
//! is a pure function of configuration and inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::backbone::{build_backbone, insert_caim_with_mode, ModelAssembly};
use crate::block::{BlockMode, Gate};
use crate::config::RunConfig;
use crate::data::{load_dataset, make_dataset, save_dataset, DatasetBundle, Modality, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, scores_csv, Evaluation, MetricsReport, FAR_TARGETS};
use crate::par;
use crate::trainer::{pretrain_source, train_caim, History};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generates the dataset and writes it to `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<DatasetBundle> {
    let data = make_dataset(&cfg.dataset)?;
    save_dataset(&data, out)?;
    cfg.persist(out)?;
    Ok(data)
}

pub fn dataset_summary(data: &DatasetBundle) -> String {
    let count = |s: Split| data.samples.iter().filter(|x| x.split == s).count();
    format!(
        "identities: {} train, {} eval, {} pretrain-only\nimages: {} train, {} eval, {} pretrain\n",
        data.train_ids.len(),
        data.eval_ids.len(),
        data.pretrain_ids.len(),
        count(Split::Train),
        count(Split::Eval),
        count(Split::Pretrain),
    )
}

/// Trains the backbone on source images and saves it frozen, with its
/// per-epoch history (`holdout_eer` is the held-out source-source EER).
pub fn cmd_pretrain(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(ModelAssembly, History)> {
    let data = load_dataset(data_dir)?;
    let init = build_backbone(&cfg.backbone, cfg.backbone_seed())?;
    let (model, history) = pretrain_source(&init, &data, &cfg.pretrain)?;
    ensure_dir(out)?;
    model.save(out)?;
    write(&out.join("history.csv"), &history.to_csv())?;
    cfg.persist(out)?;
    Ok((model, history))
}

fn load_frozen_backbone(dir: &Path) -> Result<ModelAssembly> {
    let mut model = ModelAssembly::load(dir)?;
    model.caim.clear();
    model.mode = BlockMode::Conditional;
    model.freeze();
    Ok(model)
}

fn train_variant(cfg: &RunConfig, backbone: &ModelAssembly, data: &DatasetBundle, blocks: usize, mode: BlockMode) -> Result<(ModelAssembly, History)> {
    let model = insert_caim_with_mode(backbone, blocks, cfg.caim_seed(), mode)?;
    train_caim(&model, data, &cfg.train)
}

/// Inserts `caim.blocks` blocks into a pretrained backbone and trains them.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, backbone_dir: &Path, out: &Path) -> Result<(ModelAssembly, History)> {
    let data = load_dataset(data_dir)?;
    let backbone = load_frozen_backbone(backbone_dir)?;
    let (model, history) = train_variant(cfg, &backbone, &data, cfg.caim.blocks, cfg.caim.mode)?;
    ensure_dir(out)?;
    model.save(out)?;
    write(&out.join("history.csv"), &history.to_csv())?;
    cfg.persist(out)?;
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Spread {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Spread { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldSummary {
    pub count: usize,
    pub auc: Spread,
    pub eer: Spread,
    pub rank1: Spread,
    pub vr_at_far: BTreeMap<String, Spread>,
    pub per_fold: Vec<MetricsReport>,
}

impl FoldSummary {
    pub fn from_reports(reports: Vec<MetricsReport>) -> FoldSummary {
        let pick = |f: &dyn Fn(&MetricsReport) -> f64| Spread::of(&reports.iter().map(f).collect::<Vec<_>>());
        let vr_at_far = FAR_TARGETS
            .iter()
            .map(|&far| (metrics::far_key(far), pick(&|r: &MetricsReport| r.vr(far))))
            .collect();
        FoldSummary {
            count: reports.len(),
            auc: pick(&|r| r.auc),
            eer: pick(&|r| r.eer),
            rank1: pick(&|r| r.rank1),
            vr_at_far,
            per_fold: reports,
        }
    }
}

/// Contents of `metrics.json`: the cross-modal report at the top level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsFile {
    pub baseline: bool,
    #[serde(flatten)]
    pub cross: MetricsReport,
    pub source: Option<MetricsReport>,
    pub folds: Option<FoldSummary>,
}

/// Splits the eval identities (in sorted order) into `folds` contiguous
/// groups and reports each group separately.
pub fn fold_reports(model: &ModelAssembly, data: &DatasetBundle, folds: usize) -> Result<Vec<MetricsReport>> {
    let mut ids = data.eval_ids.clone();
    ids.sort_unstable();
    let n = ids.len();
    if folds < 2 || n / folds < 2 {
        return Err(Error::Config(format!("{n} eval identities cannot form {folds} folds of at least 2")));
    }
    let gallery = data.select(Split::Eval, Modality::Source);
    let probes = data.select(Split::Eval, Modality::Target);
    (0..folds)
        .map(|f| {
            let group = &ids[f * n / folds..(f + 1) * n / folds];
            let in_group = |r: &&SampleRecord| group.binary_search(&r.identity).is_ok();
            let g: Vec<&SampleRecord> = gallery.iter().copied().filter(in_group).collect();
            let p: Vec<&SampleRecord> = probes.iter().copied().filter(in_group).collect();
            metrics::protocol_report(model, &g, Gate::Source, &p, Gate::Target).map(|(r, _)| r)
        })
        .collect()
}

/// Evaluates a checkpoint on the eval split, writing `metrics.json` and
/// `scores.csv`. With `baseline`, inserted blocks are dropped first.
pub fn cmd_eval(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, out: &Path, baseline: bool) -> Result<MetricsFile> {
    let data = load_dataset(data_dir)?;
    let mut model = ModelAssembly::load(checkpoint)?;
    if baseline {
        model.caim.clear();
    }
    let Evaluation { cross, source, scores } = metrics::evaluate(&model, &data)?;
    let folds = if cfg.eval.folds > 1 { Some(FoldSummary::from_reports(fold_reports(&model, &data, cfg.eval.folds)?)) } else { None };
    let file = MetricsFile { baseline, cross, source, folds };
    ensure_dir(out)?;
    let mut json = serde_json::to_string_pretty(&file).expect("metrics serialize");
    json.push('\n');
    write(&out.join("metrics.json"), &json)?;
    write(&out.join("scores.csv"), &scores_csv(&scores))?;
    cfg.persist(out)?;
    Ok(file)
}

/// Whether every source image of `data` embeds bit-identically (gate 0)
/// under `model` and under its bare backbone.
pub fn source_embeddings_preserved(model: &ModelAssembly, data: &DatasetBundle) -> Result<bool> {
    let mut bare = model.clone();
    bare.caim.clear();
    let images: Vec<_> = data.samples.iter().filter(|s| s.record.modality == Modality::Source).map(|s| &s.record.image).collect();
    Ok(model.embed_images(&images, Gate::Source)?.bit_eq(&bare.embed_images(&images, Gate::Source)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub blocks: usize,
    pub mode: BlockMode,
    pub report: MetricsReport,
    pub source_eer: Option<f64>,
    pub source_preserved: bool,
}

impl AblationRow {
    /// Conditional rows must preserve source embeddings; unconditional rows
    /// are expected not to.
    pub fn status(&self) -> &'static str {
        match (self.mode == BlockMode::Conditional, self.source_preserved) {
            (true, true) => "pass",
            (false, false) => "expected_violation",
            (true, false) => "fail",
            (false, true) => "unexpected_pass",
        }
    }
}

pub fn ablation_variants(cfg: &RunConfig, num_blocks: usize) -> Vec<(String, usize, BlockMode)> {
    let mut v: Vec<_> = (1..=num_blocks).map(|k| (format!("caim_1-{k}"), k, BlockMode::Conditional)).collect();
    v.push(("unconditional_aim".into(), cfg.caim.blocks, BlockMode::UnconditionalAim));
    v.push(("unconditional_in".into(), cfg.caim.blocks, BlockMode::UnconditionalIn));
    v
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,blocks,mode,auc,eer,rank1");
    for far in FAR_TARGETS {
        let _ = write!(out, ",vr@{}", metrics::far_key(far));
    }
    out.push_str(",source_eer,source_preserved,status\n");
    for r in rows {
        let mode = serde_json::to_value(r.mode).expect("mode serializes");
        let _ = write!(out, "{},{},{},{:e},{:e},{:e}", r.variant, r.blocks, mode.as_str().unwrap_or(""), r.report.auc, r.report.eer, r.report.rank1);
        for far in FAR_TARGETS {
            let _ = write!(out, ",{:e}", r.report.vr(far));
        }
        let se = r.source_eer.map(|e| format!("{e:e}")).unwrap_or_default();
        let _ = writeln!(out, ",{se},{},{}", r.source_preserved, r.status());
    }
    out
}

/// Trains and evaluates blocks after `1..=k` for every backbone depth `k`,
/// plus the two unconditional variants, writing `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, backbone_dir: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    let data = load_dataset(data_dir)?;
    let backbone = load_frozen_backbone(backbone_dir)?;
    let variants = ablation_variants(cfg, backbone.config.num_blocks());
    let rows = par::map_slice(&variants, |(name, blocks, mode)| -> Result<AblationRow> {
        let (model, _) = train_variant(cfg, &backbone, &data, *blocks, *mode)?;
        let ev = metrics::evaluate(&model, &data)?;
        Ok(AblationRow {
            variant: name.clone(),
            blocks: *blocks,
            mode: *mode,
            report: ev.cross,
            source_eer: ev.source.map(|s| s.eer),
            source_preserved: source_embeddings_preserved(&model, &data)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    ensure_dir(out)?;
    write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    cfg.persist(out)?;
    Ok(rows)
}
