//! Command implementations behind the `jetdistill` binary. Each `cmd_*`
//! reads a [`RunConfig`], does its work and writes CSV/JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::anomaly::{evaluate_anomaly, AnomalyError, ReferenceSet, ScoreMetric, SignalAuc};
use crate::augment::{make_view_pair, AugmentError};
use crate::config::{synthetic_class, ConfigError, RunConfig};
use crate::distill::{pretrain, DistillError, StepMetrics};
use crate::downstream::{
    classification_metrics, embed_dataset, embed_jets, grid_search, knn_probe, linear_probe,
    one_vs_rest_roc, pca_2d, predict, scratch_baseline, ClassificationMetrics, DownstreamError,
    GridPoint, GridResult, LrGroup, Matrix,
};
use crate::jetdata::{
    generate_synthetic, save_dataset, DataError, DatasetManifest, Jet, JetDataset, SyntheticSpec,
};
use crate::network::{
    extract_cls_attention, load_checkpoint, save_checkpoint, Checkpoint, ModelParams,
    NetworkConfig, NetworkError,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::npy::{write_i64, write_tensor};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(
        "checkpoint does not match config\n  checkpoint: {checkpoint}\n  config:     {config}"
    )]
    Mismatch { checkpoint: String, config: String },
    #[error("{0}")]
    Input(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Synthetic dataset of `classes` (preset names) written as a dataset dir.
pub fn cmd_generate(
    classes: &[String],
    jets_per_class: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    let spec = SyntheticSpec {
        classes: classes
            .iter()
            .map(|c| {
                synthetic_class(c)
                    .ok_or_else(|| PipelineError::Input(format!("unknown synthetic class {c:?}")))
            })
            .collect::<Result<_>>()?,
        capacity: crate::jetdata::DEFAULT_CAPACITY,
    };
    let d = generate_synthetic(&spec, jets_per_class, seed)?;
    Ok(save_dataset(&d, out, Some(seed))?)
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub train_jets: usize,
    pub steps: u64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub min_teacher_entropy: f64,
}

/// Pre-trains on the training split. The dataset is resolved before
/// anything is written, so a bad data path leaves no run directory.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    run_dir: &Path,
    progress: Option<&mut dyn FnMut(&StepMetrics)>,
) -> Result<PretrainSummary> {
    cfg.validate()?;
    let splits = cfg.splits()?;
    create_dir(run_dir)?;
    let mut snapshot = cfg.clone();
    snapshot.output_dir = run_dir.to_path_buf();
    write_text(&run_dir.join("config.toml"), &snapshot.to_toml())?;
    let out = pretrain(
        &splits.train,
        &cfg.network(),
        &cfg.distill,
        &cfg.augment,
        cfg.seed,
        Some(run_dir),
        progress,
    )?;
    let m = &out.metrics;
    let summary = PretrainSummary {
        run_dir: run_dir.to_path_buf(),
        seed: cfg.seed,
        train_jets: splits.train.len(),
        steps: out.state.step,
        first_loss: m.first().map_or(f64::NAN, |r| r.total),
        last_loss: m.last().map_or(f64::NAN, |r| r.total),
        min_teacher_entropy: m
            .iter()
            .map(|r| r.teacher_cls_entropy)
            .fold(f64::INFINITY, f64::min),
    };
    write_json(&run_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// `n` runs under `<run_dir>/rep_<i>` with seeds `seed + i`. The split
/// stays keyed by the original seed so every repeat sees the same data.
pub fn cmd_pretrain_repeat(
    cfg: &RunConfig,
    run_dir: &Path,
    n: usize,
    mut progress: Option<&mut dyn FnMut(usize, &StepMetrics)>,
) -> Result<Vec<PretrainSummary>> {
    cfg.validate()?;
    cfg.splits()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = cfg.clone();
        c.data.split_seed = Some(cfg.data.split_seed.unwrap_or(cfg.seed));
        c.seed = cfg.seed + i as u64;
        let mut cb = |m: &StepMetrics| {
            if let Some(p) = progress.as_mut() {
                p(i, m)
            }
        };
        out.push(cmd_pretrain(
            &c,
            &run_dir.join(format!("rep_{i}")),
            Some(&mut cb),
        )?);
    }
    Ok(out)
}

/// A checkpoint dir, or a run dir holding `student/`.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if !path.join("manifest.json").exists() && path.join("student").join("manifest.json").exists() {
        path.join("student")
    } else {
        path.to_path_buf()
    }
}

fn shape_list(names: &[String], shapes: &[Vec<usize>]) -> String {
    names
        .iter()
        .zip(shapes)
        .map(|(n, s)| format!("{n}{s:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Loads a checkpoint and checks its encoder against the config's network.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Checkpoint<f32>> {
    let ck = load_checkpoint::<f32>(&resolve_checkpoint(path))?;
    check_compatible(&ck.params, &cfg.network())?;
    Ok(ck)
}

/// Error naming both shape sets when the encoder parameters differ.
pub fn check_compatible(params: &ModelParams<f32>, net: &NetworkConfig) -> Result<()> {
    let want = ModelParams::<f32>::init(net, params.num_classes, 0)?;
    let names = |p: &ModelParams<f32>| -> (Vec<String>, Vec<Vec<usize>>) {
        (
            p.info.iter().map(|i| i.name.clone()).collect(),
            p.info.iter().map(|i| i.shape.clone()).collect(),
        )
    };
    let (hn, hs) = names(params);
    let (wn, ws) = names(&want);
    if hn != wn || hs != ws {
        return Err(PipelineError::Mismatch {
            checkpoint: shape_list(&hn, &hs),
            config: shape_list(&wn, &ws),
        });
    }
    Ok(())
}

fn write_rocs(dir: &Path, scores: &Matrix, labels: &[usize], class_names: &[String]) -> Result<()> {
    for (c, name) in class_names.iter().enumerate() {
        if labels.contains(&c) && labels.iter().any(|&l| l != c) {
            let roc = one_vs_rest_roc(scores, labels, c)?;
            write_text(&dir.join(format!("roc_{name}.csv")), &roc.to_csv())?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMethod {
    Knn,
    Linear,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub method: ProbeMethod,
    pub k: Option<usize>,
    pub class_names: Vec<String>,
    pub train_jets: usize,
    pub test_jets: usize,
    pub metrics: ClassificationMetrics,
}

/// Frozen-embedding probe: train split as reference, test split scored.
/// Also exports the test embeddings and labels as `.npy`.
pub fn cmd_probe(
    cfg: &RunConfig,
    checkpoint: &Path,
    method: ProbeMethod,
    out: &Path,
) -> Result<ProbeReport> {
    let ck = load_model(cfg, checkpoint)?;
    let splits = cfg.splits()?;
    let train = embed_dataset(&splits.train, &ck.params)?;
    let test = embed_dataset(&splits.test, &ck.params)?;
    let c = splits.train.num_classes();
    let res = match method {
        ProbeMethod::Knn => knn_probe(&train, &test.vectors, cfg.probe.k, c, cfg.probe.normalize)?,
        ProbeMethod::Linear => linear_probe(&train, &test.vectors, c, &cfg.probe.linear)?,
    };
    let metrics = classification_metrics(&res.scores, &test.labels)?;
    create_dir(out)?;
    write_rocs(out, &res.scores, &test.labels, &splits.test.class_names)?;
    let emb = Tensor::new(
        vec![test.vectors.rows, test.vectors.cols],
        test.vectors.data.clone(),
    )?;
    write_tensor(&out.join("embeddings.npy"), &emb)?;
    let labels: Vec<i64> = test.labels.iter().map(|&l| l as i64).collect();
    write_i64(&out.join("labels.npy"), &[labels.len()], &labels)?;
    let report = ProbeReport {
        method,
        k: (method == ProbeMethod::Knn).then_some(cfg.probe.k),
        class_names: splits.test.class_names.clone(),
        train_jets: train.len(),
        test_jets: test.len(),
        metrics,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Per-class subsample of `fraction` of the jets, at least one per class.
pub fn label_subset(d: &JetDataset, fraction: f64, seed: u64) -> JetDataset {
    if fraction >= 1.0 {
        return d.clone();
    }
    let mut keep = Vec::new();
    for c in 0..d.num_classes() {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.jets[i].label == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut stream_rng(seed, Stream::Split, &[1, c as u64]));
        let n = ((idx.len() as f64 * fraction).round() as usize).max(1);
        keep.extend_from_slice(&idx[..n]);
    }
    keep.sort_unstable();
    d.subset(&keep)
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneReport {
    /// `finetune` or `scratch`.
    pub mode: String,
    pub label_fraction: f64,
    pub train_jets: usize,
    pub grid: Vec<GridPoint>,
    pub best: GridPoint,
    pub lr_groups: Vec<LrGroup>,
    pub epoch_losses: Vec<f64>,
    pub class_names: Vec<String>,
    pub test: ClassificationMetrics,
}

/// Grid search on the labelled subset, model selection on the validation
/// split, metrics on the test split. Without a checkpoint the encoder
/// starts from random init with a uniform LR (the scratch baseline).
pub fn cmd_finetune(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<FinetuneReport> {
    let pretrained = checkpoint.map(|p| load_model(cfg, p)).transpose()?;
    let splits = cfg.splits()?;
    let train = label_subset(&splits.train, cfg.finetune.label_fraction, cfg.seed);
    let c = splits.train.num_classes();
    let run = cfg.finetune.run(cfg.seed);
    let mut grid = cfg.finetune.grid.clone();
    if grid.decays.is_empty() {
        grid.decays = vec![cfg.finetune.llrd_decay];
    }
    if grid.base_lrs.is_empty() {
        grid.base_lrs = vec![cfg.finetune.base_lr];
    }
    let (mode, res): (&str, GridResult) = match &pretrained {
        Some(ck) => (
            "finetune",
            grid_search(&ck.params, c, &train, &splits.val, &grid, &run)?,
        ),
        None => (
            "scratch",
            scratch_baseline(&cfg.network(), c, &train, &splits.val, &grid, &run)?,
        ),
    };
    let jets: Vec<&Jet> = splits.test.jets.iter().collect();
    let scores = predict(&res.best.params, &jets)?;
    let labels = splits.test.labels();
    let test = classification_metrics(&scores, &labels)?;
    create_dir(out)?;
    write_rocs(out, &scores, &labels, &splits.test.class_names)?;
    save_checkpoint(
        &out.join("finetuned"),
        &res.best.params,
        "finetuned",
        0,
        &splits.train.class_names,
    )?;
    let report = FinetuneReport {
        mode: mode.into(),
        label_fraction: cfg.finetune.label_fraction,
        train_jets: train.len(),
        grid: res.points.clone(),
        best: res.best_point.clone(),
        lr_groups: res.best.lr_groups.clone(),
        epoch_losses: res.best.epoch_losses.clone(),
        class_names: splits.test.class_names.clone(),
        test,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Test-split metrics of a model with a classifier head.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<ClassificationMetrics> {
    let ck = load_model(cfg, checkpoint)?;
    let splits = cfg.splits()?;
    if ck.params.num_classes != Some(splits.test.num_classes()) {
        return Err(PipelineError::Input(format!(
            "checkpoint has {:?} output classes, dataset has {}",
            ck.params.num_classes,
            splits.test.num_classes()
        )));
    }
    let jets: Vec<&Jet> = splits.test.jets.iter().collect();
    let scores = predict(&ck.params, &jets)?;
    let labels = splits.test.labels();
    let m = classification_metrics(&scores, &labels)?;
    create_dir(out)?;
    write_rocs(out, &scores, &labels, &splits.test.class_names)?;
    write_json(&out.join("metrics.json"), &m)?;
    Ok(m)
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricAuc {
    pub metric: String,
    pub per_signal: Vec<SignalAuc>,
    pub combined: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScoreReport {
    pub checkpoint: PathBuf,
    pub background: Vec<String>,
    pub reference_jets: usize,
    pub metrics: Vec<MetricAuc>,
}

impl ScoreReport {
    pub fn mean_combined(&self) -> f64 {
        self.metrics.iter().map(|m| m.combined).sum::<f64>() / self.metrics.len().max(1) as f64
    }
}

struct Scored {
    report: ScoreReport,
    scores: Vec<Vec<f64>>,
}

fn score_one(
    cfg: &RunConfig,
    checkpoint: &Path,
    metrics: &[ScoreMetric],
    test: &JetDataset,
    reference: &JetDataset,
) -> Result<Scored> {
    let ck = load_model(cfg, checkpoint)?;
    let acfg = cfg.anomaly.scoring();
    let refset = ReferenceSet::fit(&embed_dataset(reference, &ck.params)?, &acfg)?;
    let jets: Vec<&Jet> = test.jets.iter().collect();
    let z = embed_jets(&jets, &ck.params)?;
    let bg: Vec<usize> = cfg
        .anomaly
        .background
        .iter()
        .filter_map(|b| test.class_index(b))
        .collect();
    let mut out = Vec::new();
    let mut all = Vec::new();
    for &metric in metrics {
        let s = refset.score_all(&z, metric, &acfg)?;
        let pick = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
            s.iter()
                .zip(&test.jets)
                .filter(|(_, j)| keep(j.label))
                .map(|(v, _)| *v)
                .collect()
        };
        let background = pick(&|l| bg.contains(&l));
        let signals: Vec<(String, Vec<f64>)> = (0..test.num_classes())
            .filter(|c| !bg.contains(c))
            .map(|c| (test.class_names[c].clone(), pick(&|l| l == c)))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        let ev = evaluate_anomaly(&background, &signals)?;
        out.push(MetricAuc {
            metric: metric.name().into(),
            per_signal: ev.per_signal,
            combined: ev.combined,
        });
        all.push(s);
    }
    Ok(Scored {
        report: ScoreReport {
            checkpoint: checkpoint.to_path_buf(),
            background: cfg.anomaly.background.clone(),
            reference_jets: refset.len(),
            metrics: out,
        },
        scores: all,
    })
}

/// Anomaly scores of the test split against the background classes of the
/// training split. With several checkpoints, the one with the highest mean
/// combined AUC is kept and the ranking goes to `selection.json`.
pub fn cmd_score(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    metrics: &[ScoreMetric],
    out: &Path,
) -> Result<ScoreReport> {
    if checkpoints.is_empty() || metrics.is_empty() {
        return Err(PipelineError::Input(
            "need at least one checkpoint and one metric".into(),
        ));
    }
    let splits = cfg.splits()?;
    for b in &cfg.anomaly.background {
        if splits.train.class_index(b).is_none() {
            return Err(PipelineError::Input(format!(
                "background class {b:?} not in dataset"
            )));
        }
    }
    let reference = splits.train.filter_classes(&cfg.anomaly.background)?;
    let mut best: Option<Scored> = None;
    let mut ranking = Vec::new();
    for ck in checkpoints {
        let s = score_one(cfg, ck, metrics, &splits.test, &reference)?;
        ranking.push(serde_json::json!({
            "checkpoint": ck,
            "mean_combined_auc": s.report.mean_combined(),
        }));
        if best
            .as_ref()
            .is_none_or(|b| s.report.mean_combined() > b.report.mean_combined())
        {
            best = Some(s);
        }
    }
    let best = best.expect("at least one checkpoint");
    create_dir(out)?;
    for (metric, s) in metrics.iter().zip(&best.scores) {
        let mut csv = String::from("jet_id,label,score\n");
        for (i, (v, j)) in s.iter().zip(&splits.test.jets).enumerate() {
            csv.push_str(&format!("{i},{},{v}\n", splits.test.class_names[j.label]));
        }
        write_text(&out.join(format!("scores_{}.csv", metric.name())), &csv)?;
    }
    write_json(&out.join("anomaly_auc.json"), &best.report)?;
    if checkpoints.len() > 1 {
        write_json(
            &out.join("selection.json"),
            &serde_json::json!({ "selected": best.report.checkpoint, "candidates": ranking }),
        )?;
    }
    Ok(best.report)
}

fn jet_rows(csv: &mut String, view: &str, j: &Jet, mask: Option<&[bool]>) {
    for (s, p) in j.particles.iter().enumerate() {
        let m = mask.is_some_and(|m| m[s]);
        csv.push_str(&format!(
            "{view},{s},{},{},{},{},{}\n",
            p.eta, p.phi, p.pt, p.valid as u8, m as u8
        ));
    }
}

fn pick_jets<'a>(d: &'a JetDataset, ids: &[usize]) -> Result<Vec<&'a Jet>> {
    ids.iter()
        .map(|&i| {
            d.jets.get(i).ok_or_else(|| {
                PipelineError::Input(format!("jet {i} out of range ({} jets)", d.len()))
            })
        })
        .collect()
}

/// Original jet and both augmented views, one CSV per jet
/// (`augment_jet<i>.csv`). The student's masked slots are flagged.
pub fn cmd_inspect_augment(cfg: &RunConfig, ids: &[usize], out: &Path) -> Result<Vec<PathBuf>> {
    let d = cfg.dataset()?;
    let jets = pick_jets(&d, ids)?;
    let mut files = Vec::new();
    for (&i, j) in ids.iter().zip(jets) {
        let pair = make_view_pair(j, &cfg.augment, cfg.seed, 0, i as u64)?;
        let mut csv = String::from("view,slot,eta,phi,pt,valid,masked\n");
        jet_rows(&mut csv, "original", j, None);
        jet_rows(&mut csv, "u", &pair.view_u, Some(&pair.mask_u));
        jet_rows(&mut csv, "v", &pair.view_v, Some(&pair.mask_v));
        let path = out.join(format!("augment_jet{i}.csv"));
        write_text(&path, &csv)?;
        files.push(path);
    }
    Ok(files)
}

/// `[CLS]` attention of the last block over the particles of test-split
/// jets, one CSV per jet with one column per head.
pub fn cmd_inspect_attention(
    cfg: &RunConfig,
    checkpoint: &Path,
    ids: &[usize],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let ck = load_model(cfg, checkpoint)?;
    let test = cfg.splits()?.test;
    let jets = pick_jets(&test, ids)?;
    let h = ck.params.config.n_heads;
    let mut files = Vec::new();
    for (&i, j) in ids.iter().zip(jets) {
        let att = extract_cls_attention(j, &ck.params)?;
        let n = j.capacity();
        let heads: Vec<String> = (0..h).map(|k| format!("head_{k}")).collect();
        let mut csv = format!("slot,eta,phi,pt,valid,{}\n", heads.join(","));
        for (s, p) in j.particles.iter().enumerate() {
            let w: Vec<String> = (0..h).map(|k| att.data()[k * n + s].to_string()).collect();
            csv.push_str(&format!(
                "{s},{},{},{},{},{}\n",
                p.eta,
                p.phi,
                p.pt,
                p.valid as u8,
                w.join(",")
            ));
        }
        let path = out.join(format!("attention_jet{i}.csv"));
        write_text(&path, &csv)?;
        files.push(path);
    }
    Ok(files)
}

/// PCA of the test-split embeddings to 2-D. Returns the explained variances.
pub fn cmd_inspect_project2d(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<[f64; 2]> {
    let ck = load_model(cfg, checkpoint)?;
    let test = cfg.splits()?.test;
    let emb = embed_dataset(&test, &ck.params)?;
    let p = pca_2d(&emb.vectors)?;
    let mut csv = String::from("jet_id,label,pc1,pc2\n");
    for (i, &l) in emb.labels.iter().enumerate() {
        let r = p.coords.row(i);
        csv.push_str(&format!("{i},{},{},{}\n", test.class_names[l], r[0], r[1]));
    }
    write_text(out, &csv)?;
    Ok([p.explained_variance[0], p.explained_variance[1]])
}
