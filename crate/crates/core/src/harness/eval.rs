//! Evaluation of tasks `1..=t` with concatenated prompts.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HvplError, Result};
use crate::harness::metrics::{aggregate, class_metrics, Evaluation, GroundTruth, Prediction, TaskAggregate};
use crate::harness::train::{Experiment, RunState};
use crate::video::{concat_for_inference, infer_video};

/// One prompt's prediction on one test video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub task: usize,
    pub prompt: usize,
    pub class: usize,
    pub score: f64,
    /// Binary mask over all frames, frame-major.
    pub mask: Vec<bool>,
}

pub struct EvalOutput {
    pub evaluation: Evaluation,
    pub predictions: Vec<VideoPrediction>,
}

/// Evaluates the state after its last completed task on the test videos
/// of every task seen so far.
pub fn evaluate(exp: &Experiment, state: &RunState) -> Result<EvalOutput> {
    let t = state.completed;
    if t == 0 {
        return Err(HvplError::State("nothing has been trained yet".into()));
    }
    let vcfg = exp.cfg.video();
    let set = concat_for_inference(&state.prompts, &state.heads, t, &vcfg)?;
    let specs: Vec<_> = exp.seq.tasks[..t].iter().flat_map(|task| task.test.iter()).collect();

    let per_video = specs
        .par_iter()
        .map(|spec| {
            let data = exp.load_video(spec)?;
            let outs = infer_video(&exp.det, &data.ctx, &data.f_out, &set, &state.decoder, &vcfg)?;
            let preds: Vec<VideoPrediction> = outs
                .iter()
                .map(|o| {
                    let (class, score) = o.best();
                    VideoPrediction {
                        video_id: spec.id.clone(),
                        task: o.task,
                        prompt: o.prompt,
                        class,
                        score,
                        mask: o.mask_logits.iter().map(|&x| x > 0.0).collect(),
                    }
                })
                .collect();
            Ok((data.video, preds))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let mut predictions = Vec::new();
    for (i, (video, vp)) in per_video.into_iter().enumerate() {
        for inst in &video.instances {
            gts.push(GroundTruth {
                video: i,
                class: inst.class_id,
                mask: inst.masks.concat(),
            });
        }
        for p in &vp {
            preds.push(Prediction {
                video: i,
                class: p.class,
                score: p.score,
                mask: p.mask.clone(),
            });
        }
        predictions.extend(vp);
    }

    let mut per_class = BTreeMap::new();
    for task in &exp.seq.tasks[..t] {
        for c in task.labels.clone() {
            if let Some(m) = class_metrics(&preds, &gts, c) {
                per_class.insert(c, m);
            }
        }
    }
    let per_task = exp.seq.tasks[..t]
        .iter()
        .map(|task| TaskAggregate {
            task: task.task,
            metrics: aggregate(task.labels.clone().filter_map(|c| per_class.get(&c))),
        })
        .collect();
    let overall = aggregate(per_class.values());
    Ok(EvalOutput {
        evaluation: Evaluation {
            after_task: t,
            per_class,
            per_task,
            overall,
        },
        predictions,
    })
}
