// One optimizer step and the epoch loop.
//
// Each step stacks the two views of every jet into a single batch
// `[u_1..u_B, v_1..v_B]`. The teacher runs on its own tape with all
// parameters bound as constants, so no teacher gradient ever exists.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use super::loss::{
    center_and_sharpen, loss_cls, loss_koleo, loss_particle, mean_entropy, row_mean,
    student_log_probs, total_loss, update_center,
};
use super::{
    ema_momentum_at, ema_update, lr_at, DistillConfig, DistillError, EmaSchedule, TrainState,
};
use crate::augment::{make_view_pair, AugmentConfig};
use crate::jetdata::{Jet, JetDataset};
use crate::network::{
    bind, encode, encoder_cls, project, save_checkpoint, Batch, Bound, ForwardMode, ModelParams,
    NetworkConfig,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Float, Graph, Tensor, Var};

pub const METRICS_HEADER: &str =
    "step,epoch,lr,tau_ema,total,l_part,l_cls,l_koleo,teacher_cls_entropy,center_cls_norm,center_part_norm";

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub tau_ema: f64,
    pub total: f64,
    pub l_part: f64,
    pub l_cls: f64,
    pub l_koleo: f64,
    /// Mean per-jet entropy of the teacher `[CLS]` distribution.
    pub teacher_cls_entropy: f64,
    pub center_cls_norm: f64,
    pub center_part_norm: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.epoch,
            self.lr,
            self.tau_ema,
            self.total,
            self.l_part,
            self.l_cls,
            self.l_koleo,
            self.teacher_cls_entropy,
            self.center_cls_norm,
            self.center_part_norm
        )
    }
}

fn norm<T: Float>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Raw teacher projections of full views. Particle rows are the masked
/// slots of each view, `counts[v]` of them for view `v`.
pub struct TeacherOutput<T: Float> {
    pub cls_logits: Tensor<T>,
    pub part_logits: Option<Tensor<T>>,
    pub rows: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
}

/// Teacher pass: unmasked views, eval mode, parameters as constants.
pub fn teacher_forward<T: Float>(
    teacher: &ModelParams<T>,
    views: &[&Jet],
    masks: &[&[bool]],
) -> Result<TeacherOutput<T>, DistillError> {
    let mut rows = Vec::new();
    let mut counts = Vec::with_capacity(views.len());
    for (r, m) in masks.iter().enumerate() {
        let before = rows.len();
        rows.extend(
            m.iter()
                .enumerate()
                .filter(|(_, &x)| x)
                .map(|(s, _)| (r, s + 1)),
        );
        counts.push(rows.len() - before);
    }
    let cls_rows: Vec<(usize, usize)> = (0..views.len()).map(|r| (r, 0)).collect();
    let mut g = Graph::new();
    let p = bind(&mut g, teacher, false);
    let batch = Batch::unmasked(views)?;
    let enc = encode(&mut g, &p, teacher, &batch, ForwardMode::Eval, false)?;
    let c = project(&mut g, &p, teacher, enc.out, &cls_rows)?;
    let cls_logits = g.value(c).clone();
    let part_logits = if rows.is_empty() {
        None
    } else {
        let v = project(&mut g, &p, teacher, enc.out, &rows)?;
        Some(g.value(v).clone())
    };
    Ok(TeacherOutput {
        cls_logits,
        part_logits,
        rows,
        counts,
    })
}

/// Centered and sharpened teacher distributions for one step.
pub struct DistillTargets<T: Float> {
    pub rows: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
    pub p_cls: Tensor<T>,
    pub p_part: Option<Tensor<T>>,
}

pub struct LossTerms {
    pub total: Var,
    pub part: Var,
    pub cls: Var,
    pub koleo: Var,
}

/// Student loss graph on a masked batch of `2B` views ordered
/// `[u_1..u_B, v_1..v_B]`. KoLeo acts on the encoder `[CLS]` of the u-views.
#[allow(clippy::too_many_arguments)]
pub fn student_loss<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    student: &ModelParams<T>,
    batch: &Batch,
    mode: ForwardMode,
    targets: &DistillTargets<T>,
    tau_student: f64,
    koleo_lambda: f64,
) -> Result<LossTerms, DistillError> {
    let n = batch.size;
    let b = n / 2;
    let cls_rows: Vec<(usize, usize)> = (0..n).map(|r| (r, 0)).collect();
    let enc = encode(g, p, student, batch, mode, false)?;
    let s_cls = project(g, p, student, enc.out, &cls_rows)?;
    let s_cls = student_log_probs(g, s_cls, tau_student)?;
    let cls = loss_cls(g, s_cls, &targets.p_cls)?;
    let part = match &targets.p_part {
        Some(pt) => {
            let s = project(g, p, student, enc.out, &targets.rows)?;
            let s = student_log_probs(g, s, tau_student)?;
            loss_particle(g, s, pt, &targets.counts)?
        }
        None => g.constant(Tensor::scalar(T::zero())),
    };
    let cls_emb = encoder_cls(g, enc.out)?;
    let cls_u = g.slice(cls_emb, 0, 0, b)?;
    let koleo = loss_koleo(g, cls_u)?;
    let total = total_loss(g, part, cls, koleo, koleo_lambda)?;
    Ok(LossTerms {
        total,
        part,
        cls,
        koleo,
    })
}

/// One distillation step on `jets` (global dataset indices `ids`, used to
/// key the augmentation streams). Updates student, teacher and centers.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Float>(
    state: &mut TrainState<T>,
    jets: &[&Jet],
    ids: &[u64],
    cfg: &DistillConfig,
    aug: &AugmentConfig,
    lr: f64,
    tau_ema: f64,
) -> Result<StepMetrics, DistillError> {
    let b = jets.len();
    if b < 2 || ids.len() != b {
        return Err(DistillError::Config(format!(
            "train_step needs >= 2 jets with ids, got {b}"
        )));
    }
    let mut pairs = Vec::with_capacity(b);
    for (j, &id) in jets.iter().zip(ids) {
        pairs.push(make_view_pair(j, aug, state.seed, state.epoch, id)?);
    }
    let views: Vec<&Jet> = pairs
        .iter()
        .map(|p| &p.view_u)
        .chain(pairs.iter().map(|p| &p.view_v))
        .collect();
    let masks: Vec<&[bool]> = pairs
        .iter()
        .map(|p| p.mask_u.as_slice())
        .chain(pairs.iter().map(|p| p.mask_v.as_slice()))
        .collect();
    let t = teacher_forward(&state.teacher, &views, &masks)?;
    let targets = DistillTargets {
        rows: t.rows.clone(),
        counts: t.counts.clone(),
        p_cls: center_and_sharpen(&t.cls_logits, &state.center_cls, cfg.tau_teacher),
        p_part: t
            .part_logits
            .as_ref()
            .map(|l| center_and_sharpen(l, &state.center_part, cfg.tau_teacher)),
    };

    // Student: masked views, dropout on.
    let mut g = Graph::new();
    let p = bind(&mut g, &state.student, true);
    let batch = Batch::masked(&views, &masks)?;
    let mut drng = stream_rng(state.seed, Stream::Dropout, &[state.step]);
    let terms = student_loss(
        &mut g,
        &p,
        &state.student,
        &batch,
        ForwardMode::Train(&mut drng),
        &targets,
        cfg.tau_student,
        cfg.koleo_lambda,
    )?;
    let LossTerms {
        total,
        part: l_part,
        cls: l_cls,
        koleo: l_koleo,
    } = terms;
    let (t_cls, t_part, p_cls) = (t.cls_logits, t.part_logits, targets.p_cls);

    let value = |v| g.value(v).item().as_f64();
    let (tv, pv, cv, kv) = (value(total), value(l_part), value(l_cls), value(l_koleo));
    if !tv.is_finite() {
        return Err(DistillError::NonFinite {
            step: state.step,
            detail: format!("L_Part={pv} L_CLS={cv} L_KoLeo={kv}, jets {ids:?}"),
        });
    }
    let grads = g.backward(total)?;
    let grad_refs: Vec<Option<&Tensor<T>>> = p.vars.iter().map(|&v| grads.get(v)).collect();
    state.optimizer.step(&mut state.student, &grad_refs, lr);
    ema_update(&mut state.teacher, &state.student, tau_ema);

    let cls_mean = row_mean(&t_cls).expect("2B >= 4 rows");
    update_center(&mut state.center_cls, &cls_mean, cfg.tau_center);
    if let Some(mean) = t_part.as_ref().and_then(row_mean) {
        update_center(&mut state.center_part, &mean, cfg.tau_center);
    }
    let metrics = StepMetrics {
        step: state.step,
        epoch: state.epoch,
        lr,
        tau_ema,
        total: tv,
        l_part: pv,
        l_cls: cv,
        l_koleo: kv,
        teacher_cls_entropy: mean_entropy(&p_cls),
        center_cls_norm: norm(&state.center_cls),
        center_part_norm: norm(&state.center_part),
    };
    state.step += 1;
    Ok(metrics)
}

pub struct PretrainOutput<T: Float> {
    pub state: TrainState<T>,
    /// Logged rows, also written to `metrics.csv` when an output directory is given.
    pub metrics: Vec<StepMetrics>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DistillError {
    DistillError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn dump_batch(dir: &Path, step: u64, jets: &[&Jet], ids: &[u64]) -> Result<(), DistillError> {
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let body = serde_json::json!({
        "step": step,
        "jet_ids": ids,
        "features": jets.iter().map(|j| j.particles.iter().map(|p| p.features().to_vec()).collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    std::fs::write(&path, body.to_string()).map_err(|e| io_err(&path, e))
}

/// Full pre-training run. With `out_dir`, writes `metrics.csv`, periodic
/// `checkpoints/epoch_N/{student,teacher}` and final `student/`, `teacher/`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    data: &JetDataset,
    net: &NetworkConfig,
    cfg: &DistillConfig,
    aug: &AugmentConfig,
    seed: u64,
    out_dir: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&StepMetrics)>,
) -> Result<PretrainOutput<f32>, DistillError> {
    cfg.validate()?;
    aug.validate()?;
    if data.len() < 2 {
        return Err(DistillError::Config(format!(
            "need at least 2 jets, got {}",
            data.len()
        )));
    }
    let batch = cfg.batch_size.min(data.len());
    let steps_per_epoch = (data.len() / batch) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let student = ModelParams::<f32>::init(net, None, seed)?;
    let mut state = TrainState::new(student, cfg, seed);

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| io_err(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs as u64 {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, &[epoch]));
        for k in 0..steps_per_epoch as usize {
            let idx = &order[k * batch..(k + 1) * batch];
            let jets: Vec<&Jet> = idx.iter().map(|&i| &data.jets[i]).collect();
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let lr = lr_at(state.step + 1, cfg, steps_per_epoch);
            let tau = match cfg.ema_schedule {
                EmaSchedule::PerStep => {
                    ema_momentum_at(state.step, total_steps, cfg.ema_start, cfg.ema_end)
                }
                EmaSchedule::PerEpoch => {
                    ema_momentum_at(epoch, cfg.epochs as u64, cfg.ema_start, cfg.ema_end)
                }
            };
            let m = match train_step(&mut state, &jets, &ids, cfg, aug, lr, tau) {
                Ok(m) => m,
                Err(e @ DistillError::NonFinite { step, .. }) => {
                    if let Some(dir) = out_dir {
                        dump_batch(dir, step, &jets, &ids)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if m.step % cfg.log_every == 0 || m.step + 1 == total_steps {
                if let Some((w, path)) = csv.as_mut() {
                    writeln!(w, "{}", m.csv_row()).map_err(|e| io_err(path, e))?;
                }
                if let Some(cb) = progress.as_mut() {
                    cb(&m);
                }
                metrics.push(m);
            }
        }
        if let Some((w, path)) = csv.as_mut() {
            w.flush().map_err(|e| io_err(path, e))?;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every as u64 == 0 {
                let ck = dir.join("checkpoints").join(format!("epoch_{}", epoch + 1));
                save_checkpoint(
                    &ck.join("student"),
                    &state.student,
                    "student",
                    state.step,
                    &data.class_names,
                )?;
                save_checkpoint(
                    &ck.join("teacher"),
                    &state.teacher,
                    "teacher",
                    state.step,
                    &data.class_names,
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(
            &dir.join("student"),
            &state.student,
            "student",
            state.step,
            &data.class_names,
        )?;
        save_checkpoint(
            &dir.join("teacher"),
            &state.teacher,
            "teacher",
            state.step,
            &data.class_names,
        )?;
    }
    Ok(PretrainOutput { state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jetdata::{generate_synthetic, SyntheticSpec};
    use crate::network::NetworkConfig;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            dropout: 0.1,
            ..NetworkConfig::with_dims(8, 1, 2)
        }
    }

    fn setup() -> (JetDataset, DistillConfig) {
        let d = generate_synthetic(&SyntheticSpec::three_class(), 4, 1).unwrap();
        let cfg = DistillConfig {
            batch_size: 4,
            epochs: 2,
            warmup_epochs: 0.0,
            base_lr: 0.05,
            ..Default::default()
        };
        (d, cfg)
    }

    #[test]
    fn step_moves_teacher_toward_student() {
        let (d, cfg) = setup();
        let p = ModelParams::<f64>::init(&tiny_net(), None, 1).unwrap();
        let mut st = TrainState::new(p, &cfg, 3);
        assert_eq!(st.teacher, st.student);
        let init = st.teacher.clone();
        let jets: Vec<&Jet> = d.jets[..4].iter().collect();
        let m = train_step(
            &mut st,
            &jets,
            &[0, 1, 2, 3],
            &cfg,
            &AugmentConfig::default(),
            1e-3,
            0.996,
        )
        .unwrap();
        assert!(m.total.is_finite());
        assert_ne!(st.teacher, st.student);
        assert_ne!(st.teacher, init);
        assert!(st.teacher.distance(&st.student) < init.distance(&st.student));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn step_is_bit_reproducible() {
        let (d, cfg) = setup();
        let run = || {
            let p = ModelParams::<f32>::init(&tiny_net(), None, 1).unwrap();
            let mut st = TrainState::new(p, &cfg, 3);
            let jets: Vec<&Jet> = d.jets[..4].iter().collect();
            let m = train_step(
                &mut st,
                &jets,
                &[0, 1, 2, 3],
                &cfg,
                &AugmentConfig::default(),
                1e-3,
                0.996,
            )
            .unwrap();
            (m, st.student, st.teacher, st.center_cls)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.3, b.3);
    }

    #[test]
    fn teacher_replays_closed_form_ema() {
        let (d, cfg) = setup();
        let p = ModelParams::<f64>::init(&tiny_net(), None, 1).unwrap();
        let mut st = TrainState::new(p, &cfg, 3);
        let mut replay = st.teacher.clone();
        let jets: Vec<&Jet> = d.jets[..4].iter().collect();
        for s in 0..6u64 {
            let tau = ema_momentum_at(s, 6, 0.9, 1.0);
            train_step(
                &mut st,
                &jets,
                &[0, 1, 2, 3],
                &cfg,
                &AugmentConfig::default(),
                1e-2,
                tau,
            )
            .unwrap();
            for (r, x) in replay.tensors.iter_mut().zip(&st.student.tensors) {
                for (a, &b) in r.data_mut().iter_mut().zip(x.data()) {
                    *a = tau * *a + (1.0 - tau) * b;
                }
            }
        }
        assert!(st.teacher.distance(&replay) < 1e-6);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let (d, cfg) = setup();
        let p = ModelParams::<f32>::init(&tiny_net(), None, 1).unwrap();
        let mut st = TrainState::new(p, &cfg, 3);
        assert!(train_step(
            &mut st,
            &[&d.jets[0]],
            &[0],
            &cfg,
            &AugmentConfig::default(),
            1e-3,
            0.996
        )
        .is_err());
    }

    #[test]
    fn pretrain_writes_outputs() {
        let (d, mut cfg) = setup();
        cfg.checkpoint_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(
            &d,
            &tiny_net(),
            &cfg,
            &AugmentConfig::default(),
            5,
            Some(dir.path()),
            None,
        )
        .unwrap();
        assert_eq!(out.metrics.len(), 6);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.count(), 6);
        for sub in [
            "student",
            "teacher",
            "checkpoints/epoch_1/student",
            "checkpoints/epoch_2/teacher",
        ] {
            assert!(dir.path().join(sub).join("manifest.json").exists(), "{sub}");
        }
        let t = crate::network::load_checkpoint::<f32>(&dir.path().join("teacher")).unwrap();
        assert_eq!(t.params, out.state.teacher);
        assert_eq!(t.manifest.tag, "teacher");
    }
}
