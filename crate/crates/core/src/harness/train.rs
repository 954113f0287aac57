//! Task-by-task training.
//!
//! Task 1 trains its prompts, its heads and the video context decoder. From
//! task 2 on the decoder is frozen; the new frame prompt starts as a copy of
//! the previous one and is updated only along the complement of the previous
//! task's feature space, while the video prompt and heads take plain Adam
//! steps. After each task the feature space of that task is built and
//! replaces the previous one.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, FrameContext, FrameFeatures, PrototypeBank, SyntheticVideo};
use crate::error::{HvplError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::loss::{set_prediction_loss, targets_for, Target};
use crate::harness::store::RunStore;
use crate::harness::tasks::{generate_tasks, TaskSequence, VideoSpec};
use crate::ogc::{apply_projected_update, build_feature_space, project_gradient, sample_covering, OrthoSpace};
use crate::optim::{OptimState, OptimizerKind};
use crate::rng::{gaussian_matrix, stream};
use crate::tensor::{GradTape, Gradients, Matrix, Tensor3};
use crate::video::{forward_video, TaskHeads, TaskPrompts, VideoDecoder};

/// Everything fixed by the configuration: frozen detector, task sequence
/// and class prototypes.
pub struct Experiment {
    pub cfg: TrainConfig,
    pub det: Detector,
    pub seq: TaskSequence,
    pub bank: PrototypeBank,
}

impl Experiment {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let det = Detector::new(cfg.detector(), cfg.seed)?;
        let seq = generate_tasks(&cfg)?;
        let bank = seq.prototypes(cfg.d);
        Ok(Experiment { cfg, det, seq, bank })
    }

    /// Renders a video and precomputes the frozen decoder's keys and values.
    pub fn load_video(&self, spec: &VideoSpec) -> Result<VideoData> {
        let (video, feats) = self.seq.materialize(&self.det, &self.bank, spec)?;
        self.video_data(video, feats.f_out, &feats.scales[0])
    }

    pub fn video_data(&self, video: SyntheticVideo, f_out: Tensor3, first_scale: &Tensor3) -> Result<VideoData> {
        let feats = FrameFeatures {
            scales: vec![first_scale.clone()],
            f_out,
        };
        let ctx = self.det.context(&feats)?;
        Ok(VideoData {
            video,
            ctx,
            f_out: feats.f_out,
        })
    }

    /// Global class id → task that introduces it.
    pub fn class_tasks(&self) -> Vec<usize> {
        let mut out = vec![0; self.cfg.total_classes()];
        for t in &self.seq.tasks {
            for c in t.labels.clone() {
                out[c] = t.task;
            }
        }
        out
    }
}

/// A rendered video ready for the decoders.
pub struct VideoData {
    pub video: SyntheticVideo,
    pub ctx: FrameContext,
    pub f_out: Tensor3,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    /// Calls to the gradient projection.
    pub projections: u64,
    /// Optimizer steps applied to frame prompts.
    pub frame_updates: u64,
    /// Largest `‖ΔP*·V̂₁‖_F` seen across projected updates.
    pub max_protected_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    /// Mean loss over the training videos before the first step.
    pub initial_loss: f64,
    /// Mean per-step loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the training videos after the last step.
    pub final_loss: f64,
    /// Videos used to build this task's feature space.
    pub space_videos: Vec<String>,
}

/// Learned parameters and bookkeeping of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub completed: usize,
    pub decoder: VideoDecoder,
    pub prompts: Vec<TaskPrompts>,
    pub heads: Vec<TaskHeads>,
    /// Feature space of the last completed task.
    pub space: Option<OrthoSpace>,
    pub counters: Counters,
    pub logs: Vec<TaskLog>,
}

impl RunState {
    pub fn new(cfg: &TrainConfig) -> Self {
        RunState {
            completed: 0,
            decoder: VideoDecoder::init(&mut stream(cfg.seed, "decoder.init"), &cfg.video()),
            prompts: Vec::new(),
            heads: Vec::new(),
            space: None,
            counters: Counters::default(),
            logs: Vec::new(),
        }
    }

    pub fn prompts_of(&self, task: usize) -> Result<&TaskPrompts> {
        self.prompts
            .iter()
            .find(|p| p.task == task)
            .ok_or_else(|| HvplError::State(format!("no prompts for task {task}")))
    }

    pub fn heads_of(&self, task: usize) -> Result<&TaskHeads> {
        self.heads
            .iter()
            .find(|h| h.task == task)
            .ok_or_else(|| HvplError::State(format!("no heads for task {task}")))
    }
}

/// Parameters being learned for the current task.
pub struct TaskParams {
    pub task: usize,
    pub prompts: TaskPrompts,
    pub heads: TaskHeads,
}

impl TaskParams {
    /// Fresh parameters for task `t`. The frame prompt copies the previous
    /// task's frame prompt (first rows; extra rows are drawn fresh).
    pub fn init(exp: &Experiment, state: &RunState, t: usize) -> Result<Self> {
        let cfg = &exp.cfg;
        let spec = exp.seq.task(t)?;
        let (lf, lv) = cfg.prompt_lens(t);
        let mut rng = stream(cfg.seed, &format!("prompts.t{t}"));
        let mut frm = gaussian_matrix(&mut rng, lf, cfg.d, 1.0);
        let vid = gaussian_matrix(&mut rng, lv, cfg.d, 1.0);
        if t >= 2 {
            let prev = &state.prompts_of(t - 1)?.frm;
            for r in 0..lf.min(prev.rows()) {
                frm.row_mut(r).copy_from_slice(prev.row(r));
            }
        }
        let heads = TaskHeads::init(
            &mut stream(cfg.seed, &format!("heads.t{t}")),
            t,
            spec.labels.start,
            spec.num_classes(),
            cfg.d,
        );
        Ok(TaskParams {
            task: t,
            prompts: TaskPrompts { task: t, frm, vid },
            heads,
        })
    }
}

/// Loss of one video under task `t`'s own prompts and heads; with
/// `grads`, also the gradients of every trainable parameter.
pub fn video_loss(
    exp: &Experiment,
    decoder: &VideoDecoder,
    params: &TaskParams,
    data: &VideoData,
    train_decoder: bool,
    grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    let cfg = exp.cfg.video();
    let tape = GradTape::new();
    let p_frm = tape.leaf("p_frm", &params.prompts.frm, grads)?;
    let p_vid = tape.leaf("p_vid", &params.prompts.vid, grads)?;
    let dec = decoder.bind(&tape, grads && train_decoder)?;
    let hv = params.heads.bind(&tape, "head", grads)?;
    let rows = if cfg.disable_video_prompt {
        params.prompts.frm.rows()
    } else {
        params.prompts.vid.rows()
    };
    let outs = forward_video(&exp.det, &data.ctx, &data.f_out, p_frm, p_vid, &dec, &[(hv, 0..rows)], &cfg)?;
    let (cls, masks) = outs[0];
    let targets: Vec<Target> = targets_for(&data.video, params.heads.class_offset);
    let (loss, _) = set_prediction_loss(cls, masks, &targets)?;
    let value = loss.scalar();
    let g = if grads { Some(tape.backward(loss)?) } else { None };
    Ok((value, g))
}

fn mean_loss(exp: &Experiment, decoder: &VideoDecoder, params: &TaskParams, data: &[VideoData]) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|d| video_loss(exp, decoder, params, d, false, false).map(|(l, _)| l))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

struct Optimizers {
    kind: OptimizerKind,
    states: BTreeMap<String, OptimState>,
}

impl Optimizers {
    fn new(lr: f64) -> Self {
        Optimizers {
            kind: OptimizerKind::adam(lr),
            states: BTreeMap::new(),
        }
    }

    fn state(&mut self, name: &str) -> &mut OptimState {
        let kind = self.kind;
        self.states.entry(name.to_string()).or_insert_with(|| OptimState::new(kind))
    }

    fn step(&mut self, name: &str, param: &mut Matrix, grads: &Gradients) -> Result<()> {
        match grads.get(name) {
            Some(g) => self.state(name).step(param, g),
            None => Ok(()),
        }
    }
}

/// Trains task `t` and builds its feature space. When a store is given,
/// the new space replaces the old one on disk and training features are
/// cached there if the configuration asks for it.
pub fn train_task(exp: &Experiment, state: &mut RunState, t: usize, store: Option<&RunStore>) -> Result<()> {
    let cfg = &exp.cfg;
    if t != state.completed + 1 {
        return Err(HvplError::State(format!(
            "task {t} requested after {} completed task(s)",
            state.completed
        )));
    }
    let spec = exp.seq.task(t)?;
    let project = t >= 2 && !cfg.disable_ogc;
    if project && state.space.as_ref().map(|s| s.task) != Some(t - 1) {
        return Err(HvplError::State(format!("feature space of task {} is missing", t - 1)));
    }

    let data = match store {
        Some(s) => s.training_features(exp, t)?,
        None => spec
            .train
            .par_iter()
            .map(|v| exp.load_video(v))
            .collect::<Result<Vec<_>>>()?,
    };

    let mut params = TaskParams::init(exp, state, t)?;
    let train_decoder = t == 1;
    let initial_loss = mean_loss(exp, &state.decoder, &params, &data)?;
    let mut opt = Optimizers::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, &format!("train.t{t}.epoch{epoch}")));
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = video_loss(exp, &state.decoder, &params, &data[i], train_decoder, true)?;
            let grads = grads.expect("gradients requested");
            total += loss;

            if let Some(dp) = grads.get("p_frm") {
                if project {
                    let space = state.space.as_ref().expect("checked above");
                    let dp_star = project_gradient(dp, space)?;
                    state.counters.projections += 1;
                    let residual = dp_star.matmul(&space.v1)?.frobenius_norm();
                    state.counters.max_protected_residual = state.counters.max_protected_residual.max(residual);
                    apply_projected_update(&mut params.prompts.frm, &dp_star, opt.state("p_frm"), t)?;
                } else {
                    opt.state("p_frm").step(&mut params.prompts.frm, dp)?;
                }
                state.counters.frame_updates += 1;
            }
            opt.step("p_vid", &mut params.prompts.vid, &grads)?;
            for (n, m) in params.heads.tensors_mut() {
                opt.step(&format!("head.{n}"), m, &grads)?;
            }
            if train_decoder {
                for (n, m) in state.decoder.tensors_mut() {
                    opt.step(&n, m, &grads)?;
                }
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let final_loss = mean_loss(exp, &state.decoder, &params, &data)?;

    let (space, space_videos) = build_space(exp, &params.prompts.frm, t, &data)?;
    if let Some(s) = store {
        s.persist_space(&space)?;
    }
    state.space = Some(space);
    state.prompts.push(params.prompts);
    state.heads.push(params.heads);
    state.logs.push(TaskLog {
        task: t,
        initial_loss,
        epoch_losses,
        final_loss,
        space_videos,
    });
    state.completed = t;
    Ok(())
}

/// Samples `B` training videos covering every class of task `t` and stacks
/// their compressed frame prompt features.
pub fn build_space(exp: &Experiment, p_frm: &Matrix, t: usize, data: &[VideoData]) -> Result<(OrthoSpace, Vec<String>)> {
    let cfg = &exp.cfg;
    let spec = exp.seq.task(t)?;
    let b = cfg.sample_size(spec.num_classes());
    let classes: Vec<Vec<usize>> = data
        .iter()
        .map(|d| d.video.instances.iter().map(|i| i.class_id).collect())
        .collect();
    let chosen = sample_covering(
        &classes,
        &spec.label_vec(),
        b,
        &mut stream(cfg.seed, &format!("ogc.sample.t{t}")),
    )?;
    let z = chosen
        .par_iter()
        .map(|&i| exp.det.transformer_decode_ctx(p_frm, &data[i].ctx))
        .collect::<Result<Vec<_>>>()?;
    let o = build_feature_space(&z)?;
    let ids = chosen.iter().map(|&i| data[i].video.id.clone()).collect();
    Ok((OrthoSpace::new(t, o, cfg.xi, b, cfg.seed)?, ids))
}
