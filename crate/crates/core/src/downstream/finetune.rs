// Supervised fine-tuning with layer-wise LR decay, grid search over
// (decay, base LR) by validation accuracy, and the from-scratch baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{accuracy, DownstreamError, Matrix};
use crate::distill::student_log_probs;
use crate::jetdata::{Jet, JetDataset};
use crate::network::{
    bind, classify, encode, encoder_cls, Batch, ForwardMode, ModelParams, NetworkConfig,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Float, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub llrd_decay: f64,
    /// Classifier-head LR; constant over training.
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Seeds the classifier-head init, shuffling and dropout.
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            llrd_decay: 0.75,
            base_lr: 2e-4,
            epochs: 100,
            batch_size: 1024,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneGrid {
    pub decays: Vec<f64>,
    pub base_lrs: Vec<f64>,
}

impl Default for FinetuneGrid {
    fn default() -> Self {
        Self {
            decays: vec![0.6, 0.65, 0.7, 0.75, 0.8],
            base_lrs: vec![4e-5, 8e-5, 2e-4, 4e-4, 8e-4, 2e-3],
        }
    }
}

/// Parameters sharing one learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrGroup {
    pub depth: usize,
    pub lr: f64,
    pub names: Vec<String>,
}

/// Depth groups from the classifier head (0) down to the tokenizer, each
/// with `base_lr * decay^depth`. Projection-head parameters are omitted;
/// they take no part in fine-tuning.
pub fn lr_groups<T: Float>(params: &ModelParams<T>, base_lr: f64, decay: f64) -> Vec<LrGroup> {
    let mut groups: Vec<LrGroup> = Vec::new();
    for p in params.info.iter().filter(|p| !p.name.starts_with("proj.")) {
        match groups.iter_mut().find(|g| g.depth == p.depth) {
            Some(g) => g.names.push(p.name.clone()),
            None => groups.push(LrGroup {
                depth: p.depth,
                lr: base_lr * decay.powi(p.depth as i32),
                names: vec![p.name.clone()],
            }),
        }
    }
    groups.sort_by_key(|g| g.depth);
    groups
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub params: ModelParams<f32>,
    pub lr_groups: Vec<LrGroup>,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

fn check_labels(d: &JetDataset, num_classes: usize) -> Result<(), DownstreamError> {
    if d.is_empty() {
        return Err(DownstreamError::Input("empty training set".into()));
    }
    if let Some(j) = d.jets.iter().find(|j| j.label >= num_classes) {
        return Err(DownstreamError::Input(format!(
            "label {} but the classifier has {num_classes} outputs",
            j.label
        )));
    }
    Ok(())
}

/// Cross-entropy fine-tuning of a model with a classifier head attached.
pub fn finetune(
    params: &ModelParams<f32>,
    train: &JetDataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutput, DownstreamError> {
    let c = params
        .num_classes
        .ok_or_else(|| DownstreamError::Input("model has no classifier head".into()))?;
    check_labels(train, c)?;
    if !(cfg.llrd_decay >= 0.0 && cfg.llrd_decay <= 1.0) || cfg.batch_size == 0 || cfg.base_lr < 0.0
    {
        return Err(DownstreamError::Input(format!(
            "need decay in [0, 1], batch_size > 0, base_lr >= 0; got {cfg:?}"
        )));
    }
    let mut params = params.clone();
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    )
    .with_layer_decay(&params, cfg.llrd_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(
            cfg.seed,
            Stream::Finetune,
            &[0, epoch as u64],
        ));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let jets: Vec<&Jet> = chunk.iter().map(|&i| &train.jets[i]).collect();
            let mut g = Graph::new();
            let p = bind(&mut g, &params, true);
            let batch = Batch::unmasked(&jets)?;
            let mut drng = stream_rng(cfg.seed, Stream::Finetune, &[1, step]);
            let enc = encode(
                &mut g,
                &p,
                &params,
                &batch,
                ForwardMode::Train(&mut drng),
                false,
            )?;
            let cls = encoder_cls(&mut g, enc.out)?;
            let logits = classify(&mut g, &p, &params, cls)?;
            let logp = student_log_probs(&mut g, logits, 1.0)?;
            let idx: Vec<usize> = jets
                .iter()
                .enumerate()
                .map(|(i, j)| i * c + j.label)
                .collect();
            let picked = g.gather(logp, &idx)?;
            let mean = g.mean(picked);
            let loss = g.neg(mean);
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(DownstreamError::NonFinite { epoch, step });
            }
            sum += value * jets.len() as f64;
            let grads = g.backward(loss)?;
            let refs: Vec<Option<&Tensor<f32>>> = p.vars.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut params, &refs, cfg.base_lr);
            step += 1;
        }
        epoch_losses.push(sum / train.len() as f64);
    }
    Ok(FinetuneOutput {
        lr_groups: lr_groups(&params, cfg.base_lr, cfg.llrd_decay),
        params,
        epoch_losses,
    })
}

/// Softmax class probabilities, eval mode.
pub fn predict<T: Float>(
    params: &ModelParams<T>,
    jets: &[&Jet],
) -> Result<Matrix, DownstreamError> {
    let c = params
        .num_classes
        .ok_or_else(|| DownstreamError::Input("model has no classifier head".into()))?;
    let mut data = Vec::with_capacity(jets.len() * c);
    for chunk in jets.chunks(super::EMBED_BATCH) {
        let mut g = Graph::new();
        let p = bind(&mut g, params, false);
        let batch = Batch::unmasked(chunk)?;
        let enc = encode(&mut g, &p, params, &batch, ForwardMode::Eval, false)?;
        let cls = encoder_cls(&mut g, enc.out)?;
        let logits = classify(&mut g, &p, params, cls)?;
        let probs = g.softmax(logits, T::one())?;
        data.extend(g.value(probs).data().iter().map(|x| x.as_f64()));
    }
    Matrix::new(jets.len(), c, data)
}

fn dataset_accuracy(params: &ModelParams<f32>, d: &JetDataset) -> Result<f64, DownstreamError> {
    let jets: Vec<&Jet> = d.jets.iter().collect();
    let scores = predict(params, &jets)?;
    Ok(accuracy(&scores.argmax_rows(), &d.labels()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub llrd_decay: f64,
    pub base_lr: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: FinetuneOutput,
    pub best_point: GridPoint,
    /// Every grid point in scan order (decay outer, LR inner).
    pub points: Vec<GridPoint>,
}

fn scan(
    start: &ModelParams<f32>,
    train: &JetDataset,
    val: &JetDataset,
    decays: &[f64],
    lrs: &[f64],
    cfg: &FinetuneConfig,
) -> Result<GridResult, DownstreamError> {
    if decays.is_empty() || lrs.is_empty() {
        return Err(DownstreamError::Input("empty fine-tuning grid".into()));
    }
    let mut best: Option<(FinetuneOutput, GridPoint)> = None;
    let mut points = Vec::new();
    for &decay in decays {
        for &lr in lrs {
            let run_cfg = FinetuneConfig {
                llrd_decay: decay,
                base_lr: lr,
                ..cfg.clone()
            };
            let out = finetune(start, train, &run_cfg)?;
            let point = GridPoint {
                llrd_decay: decay,
                base_lr: lr,
                val_accuracy: dataset_accuracy(&out.params, val)?,
            };
            points.push(point.clone());
            if best
                .as_ref()
                .is_none_or(|(_, b)| point.val_accuracy > b.val_accuracy)
            {
                best = Some((out, point));
            }
        }
    }
    let (best, best_point) = best.expect("grid is non-empty");
    Ok(GridResult {
        best,
        best_point,
        points,
    })
}

/// Fine-tunes the pre-trained encoder at every grid point (fresh classifier
/// head seeded by `cfg.seed`) and keeps the best by validation accuracy;
/// ties keep the earlier point.
pub fn grid_search(
    pretrained: &ModelParams<f32>,
    num_classes: usize,
    train: &JetDataset,
    val: &JetDataset,
    grid: &FinetuneGrid,
    cfg: &FinetuneConfig,
) -> Result<GridResult, DownstreamError> {
    let start = pretrained.with_classifier(num_classes, cfg.seed)?;
    scan(&start, train, val, &grid.decays, &grid.base_lrs, cfg)
}

/// Same architecture from random init, uniform LR (decay 1) over the grid's
/// base LRs.
pub fn scratch_baseline(
    config: &NetworkConfig,
    num_classes: usize,
    train: &JetDataset,
    val: &JetDataset,
    grid: &FinetuneGrid,
    cfg: &FinetuneConfig,
) -> Result<GridResult, DownstreamError> {
    let start = ModelParams::<f32>::init(config, Some(num_classes), cfg.seed)?;
    scan(&start, train, val, &[1.0], &grid.base_lrs, cfg)
}
