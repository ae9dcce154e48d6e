//! Masked student/teacher pre-training of paired video and audio encoders.
//!
//! Each modality has a student (frontend + encoder) and a teacher with the
//! same layout, updated only as a moving average of the student. Teachers
//! see unmasked inputs and produce targets from their block outputs;
//! students see masked inputs, and small predictors map student outputs to
//! targets:
//!
//! * video student -> audio targets (`v2a`),
//! * audio student -> video targets (`a2v`) and audio targets (`a2a`).
//!
//! The video loss is the `v2a` term; the audio loss is
//! `w_a2v * a2v + w_a2a * a2a`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{cosine, Graph, Var};
use crate::config::{ExperimentConfig, LossSupport, ModelConfig, TargetMode};
use crate::data::{
    augment_video, pack_indices, split_long, AVSample, Batch, FRAME_SIZE, MAX_SPLIT_SECONDS,
};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, sample_mask, MaskSpec};
use crate::nets::{
    accumulate, save_checkpoint, Backbone, Binder, CheckpointMeta, Modality, ParamStore, Predictor,
};
use crate::optim::{lr_at, mu_at, AdamW};
use crate::rng::{streams, substream};
use crate::tensor::Tensor;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub a2v: f64,
    pub a2a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { a2v: 1.0, a2a: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub v2a: f64,
    pub a2v: f64,
    pub a2a: f64,
    /// Video student objective, equal to `v2a`.
    pub video: f64,
    /// Audio student objective, `w.a2v * a2v + w.a2a * a2a`.
    pub audio: f64,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.video + self.audio
    }
}

pub fn combine_losses(v2a: f64, a2v: f64, a2a: f64, w: LossWeights) -> LossReport {
    LossReport {
        v2a,
        a2v,
        a2a,
        video: v2a,
        audio: w.a2v * a2v + w.a2a * a2a,
    }
}

/// Per-channel standardization over time: `(x - mean) / sqrt(var + eps)`.
pub fn instance_normalize(x: &Tensor, eps: f64) -> Tensor {
    let (t, d) = (x.dim(0), x.dim(1));
    let mut out = x.clone();
    for c in 0..d {
        let mean = (0..t).map(|r| x.data()[r * d + c]).sum::<f64>() / t as f64;
        let var = (0..t)
            .map(|r| (x.data()[r * d + c] - mean).powi(2))
            .sum::<f64>()
            / t as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for r in 0..t {
            out.data_mut()[r * d + c] = (x.data()[r * d + c] - mean) * inv;
        }
    }
    out
}

/// Teacher activations for one sample.
#[derive(Clone, Debug)]
pub struct TeacherActivations {
    /// Residual stream after each block.
    pub per_block: Vec<Tensor>,
    /// Encoder output after the final layer norm.
    pub output: Tensor,
}

/// Regression targets from teacher activations.
///
/// `AllBlocks` and `LastK` average block outputs (optionally normalizing
/// each block first) and instance-normalize the mean. `LastBlock` uses the
/// layer-normalized encoder output as is.
pub fn compute_targets(
    acts: &TeacherActivations,
    mode: TargetMode,
    normalize_each_block: bool,
) -> Result<Tensor> {
    let blocks = &acts.per_block;
    if blocks.is_empty() {
        return Err(Error::ShapeMismatch(
            "no block outputs to build targets from".into(),
        ));
    }
    if let Some(b) = blocks.iter().find(|b| b.shape() != blocks[0].shape()) {
        return Err(Error::ShapeMismatch(format!(
            "block outputs differ in shape: {:?} vs {:?}",
            blocks[0].shape(),
            b.shape()
        )));
    }
    let used = match mode {
        TargetMode::LastBlock => return Ok(acts.output.clone()),
        TargetMode::AllBlocks => blocks.as_slice(),
        TargetMode::LastK(k) => &blocks[blocks.len().saturating_sub(k.max(1))..],
    };
    let mut mean = Tensor::zeros(used[0].shape());
    for b in used {
        if normalize_each_block {
            mean.add_assign(&instance_normalize(b, INSTANCE_NORM_EPS));
        } else {
            mean.add_assign(b);
        }
    }
    let mean = mean.map(|v| v / used.len() as f64);
    Ok(instance_normalize(&mean, INSTANCE_NORM_EPS))
}

/// Mean of `1 - cos(pred[t], target[t])` over masked positions.
pub fn cosine_pred_loss(pred: &Tensor, target: &Tensor, mask: &MaskSpec) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if mask.len() != pred.dim(0) {
        return Err(Error::LengthMismatch(format!(
            "mask {} vs {} rows",
            mask.len(),
            pred.dim(0)
        )));
    }
    let rows = mask.masked_indices();
    if rows.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    Ok(rows
        .iter()
        .map(|&r| 1.0 - cosine(pred.row(r), target.row(r)))
        .sum::<f64>()
        / rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// Std of each target channel over all frames of all samples.
    pub target_channel_std: Vec<f64>,
    /// Mean cosine between student feature vectors of different samples at
    /// the same time step. `None` with fewer than 2 samples.
    pub mean_pairwise_cosine: Option<f64>,
}

impl CollapseMetrics {
    pub fn mean_target_std(&self) -> f64 {
        self.target_channel_std.iter().sum::<f64>() / self.target_channel_std.len().max(1) as f64
    }
}

pub fn collapse_metrics(targets: &[&Tensor], features: &[&Tensor]) -> CollapseMetrics {
    let d = targets.first().map_or(0, |t| t.dim(1));
    let n: usize = targets.iter().map(|t| t.dim(0)).sum();
    let mut std = vec![0.0; d];
    for (c, s) in std.iter_mut().enumerate() {
        let vals = targets
            .iter()
            .flat_map(|t| (0..t.dim(0)).map(move |r| t.data()[r * d + c]));
        let mean = vals.clone().sum::<f64>() / n as f64;
        *s = (vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    }
    let mean_pairwise_cosine = (features.len() >= 2).then(|| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..features.len() {
            for j in i + 1..features.len() {
                for r in 0..features[i].dim(0).min(features[j].dim(0)) {
                    sum += cosine(features[i].row(r), features[j].row(r));
                    count += 1;
                }
            }
        }
        sum / count as f64
    });
    CollapseMetrics {
        target_channel_std: std,
        mean_pairwise_cosine,
    }
}

/// Per-step knobs normally taken from the schedules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    pub lr: f64,
    pub mu: f64,
}

/// Masks for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMasks {
    pub video: MaskSpec,
    pub audio: MaskSpec,
}

/// Everything one evaluation of the objective produces.
pub struct LossEval {
    pub report: LossReport,
    /// `(video, audio)` targets per sample.
    pub targets: Vec<(Tensor, Tensor)>,
    /// `(video, audio)` student encoder outputs per sample.
    pub features: Vec<(Tensor, Tensor)>,
    pub student_grads: BTreeMap<String, Tensor>,
    pub predictor_grads: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub mu: f64,
    pub losses: LossReport,
    pub video_target_std: f64,
    pub audio_target_std: f64,
    pub video_pairwise_cosine: Option<f64>,
    pub audio_pairwise_cosine: Option<f64>,
}

pub const PRED_V2A: &str = "v2a";
pub const PRED_A2V: &str = "a2v";
pub const PRED_A2A: &str = "a2a";

/// Students, predictors, teachers and optimizer state.
pub struct PretrainState {
    pub config: ExperimentConfig,
    video: Backbone,
    audio: Backbone,
    pred_v2a: Predictor,
    pred_a2x: Predictor,
    /// `video.*` and `audio.*` backbones.
    pub students: ParamStore,
    /// `v2a.*`, `a2v.*`, `a2a.*`.
    pub predictors: ParamStore,
    /// Same layout as `students`.
    pub teachers: ParamStore,
    pub optimizer: AdamW,
    pub step: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

fn key(step: usize, index: usize) -> u64 {
    ((step as u64) << 24) | index as u64
}

impl PretrainState {
    pub fn new(config: ExperimentConfig, total_steps: usize, warmup_steps: usize) -> Result<Self> {
        config.validate().into_result()?;
        let m = &config.model;
        let video = Backbone::new(m, Modality::Video);
        let audio = Backbone::new(m, Modality::Audio);
        let pred_v2a = Predictor::new(m, m.video_predictor_blocks);
        let pred_a2x = Predictor::new(m, m.audio_predictor_blocks);
        let mut rng = substream(config.pretrain.seed, streams::INIT, 0);
        let mut students = ParamStore::new();
        video.init(&mut students, "video", &mut rng);
        audio.init(&mut students, "audio", &mut rng);
        let mut predictors = ParamStore::new();
        pred_v2a.init(&mut predictors, PRED_V2A, &mut rng);
        pred_a2x.init(&mut predictors, PRED_A2V, &mut rng);
        pred_a2x.init(&mut predictors, PRED_A2A, &mut rng);
        let teachers = students.clone();
        let optimizer = AdamW::new(config.pretrain.weight_decay);
        Ok(Self {
            config,
            video,
            audio,
            pred_v2a,
            pred_a2x,
            students,
            predictors,
            teachers,
            optimizer,
            step: 0,
            total_steps,
            warmup_steps,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.config.model
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            a2v: self.config.pretrain.loss_weight_a2v,
            a2a: self.config.pretrain.loss_weight_a2a,
        }
    }

    /// Scheduled learning rate and momentum for the current step.
    pub fn scheduled_control(&self) -> Result<StepControl> {
        let p = &self.config.pretrain;
        Ok(StepControl {
            lr: lr_at(self.step, self.total_steps, self.warmup_steps, p.peak_lr),
            mu: mu_at(p.ema_start, p.ema_end, self.step, self.total_steps)?,
        })
    }

    /// Training views of a batch for `step`: a random 88x88 crop and flip
    /// of 96x96 video, shared by student and teacher. Other frame sizes pass
    /// through unchanged.
    pub fn training_views(&self, batch: &Batch, step: usize) -> Result<Vec<AVSample>> {
        (0..batch.len())
            .map(|i| {
                let mut s = batch.sample(i);
                if s.video.height == FRAME_SIZE && s.video.width == FRAME_SIZE {
                    let mut rng =
                        substream(self.config.pretrain.seed, streams::AUGMENT, key(step, i));
                    s.video = augment_video(&s.video, &mut rng)?;
                }
                Ok(s)
            })
            .collect()
    }

    /// Independent video and audio masks per sample for `step`.
    pub fn sample_masks(&self, views: &[AVSample], step: usize) -> Vec<SampleMasks> {
        let p = &self.config.pretrain;
        views
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut vr = substream(p.seed, streams::VIDEO_MASK, key(step, i));
                let mut ar = substream(p.seed, streams::AUDIO_MASK, key(step, i));
                SampleMasks {
                    video: sample_mask(
                        s.frames(),
                        p.mask_start_prob_video,
                        p.mask_span_frames,
                        &mut vr,
                    ),
                    audio: sample_mask(
                        s.frames(),
                        p.mask_start_prob_audio,
                        p.mask_span_frames,
                        &mut ar,
                    ),
                }
            })
            .collect()
    }

    /// Teacher activations for both modalities on an unmasked view.
    pub fn teacher_activations(
        &self,
        sample: &AVSample,
    ) -> Result<(TeacherActivations, TeacherActivations)> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.teachers);
        let mut run = |net: &Backbone, prefix: &str, g: &mut Graph| -> Result<TeacherActivations> {
            let out = net.forward(g, &mut b, prefix, sample, true, None)?;
            Ok(TeacherActivations {
                per_block: out.per_block.iter().map(|&v| g.value(v).clone()).collect(),
                output: g.value(out.output).clone(),
            })
        };
        let v = run(&self.video, "video", &mut g)?;
        let a = run(&self.audio, "audio", &mut g)?;
        Ok((v, a))
    }

    pub fn teacher_targets(&self, sample: &AVSample) -> Result<(Tensor, Tensor)> {
        let p = &self.config.pretrain;
        let (v, a) = self.teacher_activations(sample)?;
        Ok((
            compute_targets(&v, p.target_mode, p.normalize_each_block)?,
            compute_targets(&a, p.target_mode, p.normalize_each_block)?,
        ))
    }

    fn loss_rows(&self, mask: &MaskSpec) -> Vec<usize> {
        match self.config.pretrain.loss_support {
            LossSupport::Masked => mask.masked_indices(),
            LossSupport::All => (0..mask.len()).collect(),
        }
    }

    /// Objective over `views` under `masks`, with gradients for students and
    /// predictors. `drop_path_step` turns on drop path with streams keyed by
    /// that step; `None` evaluates deterministically without it.
    pub fn evaluate(
        &self,
        views: &[AVSample],
        masks: &[SampleMasks],
        drop_path_step: Option<usize>,
    ) -> Result<LossEval> {
        assert_eq!(views.len(), masks.len());
        let v_rows: Vec<Vec<usize>> = masks.iter().map(|m| self.loss_rows(&m.video)).collect();
        let a_rows: Vec<Vec<usize>> = masks.iter().map(|m| self.loss_rows(&m.audio)).collect();
        let nv: usize = v_rows.iter().map(Vec::len).sum();
        let na: usize = a_rows.iter().map(Vec::len).sum();
        if nv == 0 || na == 0 {
            return Err(Error::NoMaskedPositions);
        }
        let w = self.weights();
        let (mut sum_v2a, mut sum_a2v, mut sum_a2a) = (0.0, 0.0, 0.0);
        let mut targets = Vec::with_capacity(views.len());
        let mut features = Vec::with_capacity(views.len());
        let mut student_grads = BTreeMap::new();
        let mut predictor_grads = BTreeMap::new();
        for (i, (view, m)) in views.iter().zip(masks).enumerate() {
            let (tv, ta) = self.teacher_targets(view)?;
            let masked = apply_mask(view, &m.video, &m.audio)?;
            let mut g = Graph::new();
            let mut sb = Binder::new(&self.students, true);
            let mut pb = Binder::new(&self.predictors, true);
            let mut drop_rng = drop_path_step
                .map(|s| substream(self.config.pretrain.seed, streams::DROP_PATH, key(s, i)));
            let ev = self.video.forward(
                &mut g,
                &mut sb,
                "video",
                &masked,
                false,
                drop_rng.as_mut().map(|r| r as &mut (dyn RngCore + 'static)),
            )?;
            let ea = self.audio.forward(
                &mut g,
                &mut sb,
                "audio",
                &masked,
                false,
                drop_rng.as_mut().map(|r| r as &mut (dyn RngCore + 'static)),
            )?;
            let p_v2a =
                self.pred_v2a
                    .forward(&mut g, &mut pb, PRED_V2A, ev.output, &m.video.frame_mask)?;
            let p_a2v =
                self.pred_a2x
                    .forward(&mut g, &mut pb, PRED_A2V, ea.output, &m.audio.frame_mask)?;
            let p_a2a =
                self.pred_a2x
                    .forward(&mut g, &mut pb, PRED_A2A, ea.output, &m.audio.frame_mask)?;
            let l_v2a = g.cosine_loss_sum(p_v2a, &ta, &v_rows[i]);
            let l_a2v = g.cosine_loss_sum(p_a2v, &tv, &a_rows[i]);
            let l_a2a = g.cosine_loss_sum(p_a2a, &ta, &a_rows[i]);
            sum_v2a += g.value(l_v2a).item();
            sum_a2v += g.value(l_a2v).item();
            sum_a2a += g.value(l_a2a).item();
            let terms: Vec<(Var, f64)> = vec![
                (l_v2a, 1.0 / nv as f64),
                (l_a2v, w.a2v / na as f64),
                (l_a2a, w.a2a / na as f64),
            ];
            let root = g.weighted_sum(&terms);
            let mut grads = g.backward(root);
            accumulate(&mut student_grads, sb.gradients(&mut grads));
            accumulate(&mut predictor_grads, pb.gradients(&mut grads));
            features.push((g.value(ev.output).clone(), g.value(ea.output).clone()));
            targets.push((tv, ta));
        }
        let report = combine_losses(
            sum_v2a / nv as f64,
            sum_a2v / na as f64,
            sum_a2a / na as f64,
            w,
        );
        Ok(LossEval {
            report,
            targets,
            features,
            student_grads,
            predictor_grads,
        })
    }

    /// One update with explicit masks and learning rate / momentum.
    pub fn step_with(
        &mut self,
        views: &[AVSample],
        masks: &[SampleMasks],
        control: StepControl,
    ) -> Result<(LossEval, StepRecord)> {
        let eval = self.evaluate(views, masks, Some(self.step))?;
        self.optimizer.step(
            "students",
            &mut self.students,
            &eval.student_grads,
            control.lr,
        );
        self.optimizer.step(
            "predictors",
            &mut self.predictors,
            &eval.predictor_grads,
            control.lr,
        );
        self.teachers.ema_from(&self.students, control.mu)?;
        let tv: Vec<&Tensor> = eval.targets.iter().map(|t| &t.0).collect();
        let ta: Vec<&Tensor> = eval.targets.iter().map(|t| &t.1).collect();
        let fv: Vec<&Tensor> = eval.features.iter().map(|f| &f.0).collect();
        let fa: Vec<&Tensor> = eval.features.iter().map(|f| &f.1).collect();
        let cv = collapse_metrics(&tv, &fv);
        let ca = collapse_metrics(&ta, &fa);
        let record = StepRecord {
            step: self.step,
            lr: control.lr,
            mu: control.mu,
            losses: eval.report,
            video_target_std: cv.mean_target_std(),
            audio_target_std: ca.mean_target_std(),
            video_pairwise_cosine: cv.mean_pairwise_cosine,
            audio_pairwise_cosine: ca.mean_pairwise_cosine,
        };
        self.step += 1;
        Ok((eval, record))
    }

    /// One scheduled update. If no position of some modality was masked,
    /// masks are redrawn (on a shifted stream) until one is.
    pub fn step(&mut self, batch: &Batch) -> Result<(LossEval, StepRecord)> {
        let control = self.scheduled_control()?;
        let views = self.training_views(batch, self.step)?;
        let mut masks = self.sample_masks(&views, self.step);
        let mut attempt = 1;
        while !self.has_loss_rows(&masks) {
            if attempt > 64 {
                return Err(Error::NoMaskedPositions);
            }
            masks = self.sample_masks(&views, self.step + (attempt << 20));
            attempt += 1;
        }
        self.step_with(&views, &masks, control)
    }

    fn has_loss_rows(&self, masks: &[SampleMasks]) -> bool {
        masks.iter().any(|m| !self.loss_rows(&m.video).is_empty())
            && masks.iter().any(|m| !self.loss_rows(&m.audio).is_empty())
    }

    /// Students, predictors and teachers under `student.`, `predictor.` and
    /// `teacher.` prefixes.
    pub fn checkpoint_params(&self) -> ParamStore {
        let mut all = self.students.clone().with_prefix("student");
        all.merge(self.predictors.clone().with_prefix("predictor"));
        all.merge(self.teachers.clone().with_prefix("teacher"));
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.config.pretrain;
        let mu = mu_at(
            p.ema_start,
            p.ema_end,
            self.step.min(self.total_steps),
            self.total_steps,
        )?;
        let meta = CheckpointMeta {
            config_hash: self.config.hash(),
            step: self.step,
            mu,
            kind: "pretrain".into(),
            config: self.config.clone(),
        };
        save_checkpoint(path, &meta, &self.checkpoint_params())
    }
}

pub struct PretrainRun {
    pub state: PretrainState,
    pub log: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Full pre-training: split long samples, pack batches under the frame
/// budget, shuffle batch order per epoch, schedule learning rate and teacher
/// momentum, checkpoint every `checkpoint_every_epochs` epochs and at the
/// end. With `out_dir`, checkpoints and a JSON-lines step log are written
/// there.
pub fn run_pretraining(
    config: &ExperimentConfig,
    dataset: &[AVSample],
    out_dir: Option<&Path>,
) -> Result<PretrainRun> {
    let p = &config.pretrain;
    let samples: Vec<AVSample> = dataset
        .iter()
        .flat_map(|s| split_long(s, MAX_SPLIT_SECONDS))
        .collect();
    let groups = pack_indices(&samples, p.max_frames_per_batch)?;
    let steps_per_epoch = groups.len();
    let mut state = PretrainState::new(
        config.clone(),
        p.epochs * steps_per_epoch,
        p.warmup_epochs * steps_per_epoch,
    )?;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("pretrain_log.jsonl");
            Some((
                fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 0..p.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut substream(p.seed, streams::SHUFFLE, epoch as u64));
        for &gi in &order {
            let batch =
                Batch::from_samples(&groups[gi].iter().map(|&i| &samples[i]).collect::<Vec<_>>());
            let (_, record) = state.step(&batch)?;
            log::debug!(
                "step {} lr {:.2e} mu {:.6} v2a {:.4} a2v {:.4} a2a {:.4}",
                record.step,
                record.lr,
                record.mu,
                record.losses.v2a,
                record.losses.a2v,
                record.losses.a2a
            );
            if let Some((f, path)) = log_file.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(record);
        }
        let last = epoch + 1 == p.epochs;
        if let Some(dir) = out_dir {
            if last || (epoch + 1) % p.checkpoint_every_epochs == 0 {
                let path = dir.join(format!("pretrain-epoch{:04}.ckpt", epoch + 1));
                state.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(PretrainRun {
        state,
        log,
        checkpoints,
    })
}
