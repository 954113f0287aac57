//! Experiment configuration.
//!
//! Every field has a default, so `{}` is a valid configuration file.
//!
//! | field | default | meaning |
//! |---|---|---|
//! | `seed` | 42 | run seed; all random streams derive from it |
//! | `d`, `heads` | 64, 4 | feature width and attention heads |
//! | `state_dim` | 16 | GT-SSM hidden size `Q` |
//! | `frames`, `height`, `width`, `scales` | 4, 32, 32, 2 | synthetic video geometry |
//! | `detector_layers` | 3 | frozen frame decoder depth `L_d` |
//! | `noise_std` | 0.1 | pixel embedding noise |
//! | `phi` | 4 | neighbours per vertex in the similarity graph |
//! | `frame_prompt_len`, `video_prompt_len` | 8, 8 | `L_p^f`, `L_p^v` |
//! | `first_frame_prompt_len`, `first_video_prompt_len` | unset | task-1 overrides |
//! | `gss_layers`, `msa_layers` | 6, 3 | `L_g`, `L_m` |
//! | `xi` | 0.7 | elastic threshold |
//! | `lr` | 5e-5 | Adam learning rate |
//! | `epochs` | 30 | passes over each task's training videos |
//! | `split` | `[4, 2]` | classes per task |
//! | `class_budget` | sum of `split` | number of distinct classes available |
//! | `train_videos`, `test_videos` | 40, 20 | videos per task |
//! | `max_instances` | 3 | instances per video, at most |
//! | `b` | `max(6, classes)` | videos sampled for the feature space |
//! | `disable_ogc`, `disable_gtssm`, `disable_video_prompt` | false | ablations |
//! | `gss_residual`, `msa_layernorm` | false | architecture variants |
//! | `cache_features` | false | persist training features under `cache/` |
//! | `ablation_seeds` | 42..=46 | seeds used by `ablate` |

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{HvplError, Result};
use crate::video::VideoConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub d: usize,
    pub heads: usize,
    pub state_dim: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub scales: usize,
    pub detector_layers: usize,
    pub noise_std: f64,
    pub phi: usize,
    pub frame_prompt_len: usize,
    pub video_prompt_len: usize,
    pub first_frame_prompt_len: Option<usize>,
    pub first_video_prompt_len: Option<usize>,
    pub gss_layers: usize,
    pub msa_layers: usize,
    pub xi: f64,
    pub lr: f64,
    pub epochs: usize,
    pub split: Vec<usize>,
    pub class_budget: Option<usize>,
    pub train_videos: usize,
    pub test_videos: usize,
    pub max_instances: usize,
    pub b: Option<usize>,
    pub disable_ogc: bool,
    pub disable_gtssm: bool,
    pub disable_video_prompt: bool,
    pub gss_residual: bool,
    pub msa_layernorm: bool,
    pub cache_features: bool,
    pub ablation_seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            d: 64,
            heads: 4,
            state_dim: 16,
            frames: 4,
            height: 32,
            width: 32,
            scales: 2,
            detector_layers: 3,
            noise_std: 0.1,
            phi: 4,
            frame_prompt_len: 8,
            video_prompt_len: 8,
            first_frame_prompt_len: None,
            first_video_prompt_len: None,
            gss_layers: 6,
            msa_layers: 3,
            xi: 0.7,
            lr: 5e-5,
            epochs: 30,
            split: vec![4, 2],
            class_budget: None,
            train_videos: 40,
            test_videos: 20,
            max_instances: 3,
            b: None,
            disable_ogc: false,
            disable_gtssm: false,
            disable_video_prompt: false,
            gss_residual: false,
            msa_layernorm: false,
            cache_features: false,
            ablation_seeds: vec![42, 43, 44, 45, 46],
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HvplError::Config(m));
        if !(0.0..=1.0).contains(&self.xi) {
            return bad(format!("xi = {} outside [0, 1]", self.xi));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.split.is_empty() || self.split.contains(&0) {
            return bad(format!("split {:?} needs at least one non-empty task", self.split));
        }
        if self.frames == 0 || !self.d.is_multiple_of(self.frames) {
            return bad(format!("D = {} is not divisible by N_f = {}", self.d, self.frames));
        }
        if self.state_dim == 0 || self.phi == 0 {
            return bad("state_dim and phi must be positive".into());
        }
        if self.frame_prompt_len == 0 || self.video_prompt_len == 0 {
            return bad("prompt lengths must be positive".into());
        }
        if self.first_frame_prompt_len == Some(0) || self.first_video_prompt_len == Some(0) {
            return bad("prompt lengths must be positive".into());
        }
        if self.max_instances == 0 || self.train_videos == 0 || self.test_videos == 0 {
            return bad("video counts must be positive".into());
        }
        if let Some(budget) = self.class_budget {
            if budget < self.total_classes() {
                return bad(format!(
                    "class budget {budget} is smaller than the {} classes the split needs",
                    self.total_classes()
                ));
            }
        }
        for (t, &k) in self.split.iter().enumerate() {
            let b = self.sample_size(k);
            if b < k {
                return Err(HvplError::Coverage { needed: k, sampled: b });
            }
            if b > self.train_videos {
                return bad(format!("task {} samples {b} of {} videos", t + 1, self.train_videos));
            }
            if self.train_videos < k {
                return bad(format!("task {} has fewer videos than classes", t + 1));
            }
        }
        self.detector().validate()
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            d: self.d,
            heads: self.heads,
            layers: self.detector_layers,
            frames: self.frames,
            height: self.height,
            width: self.width,
            scales: self.scales,
            noise_std: self.noise_std,
        }
    }

    pub fn video(&self) -> VideoConfig {
        VideoConfig {
            d: self.d,
            heads: self.heads,
            state_dim: self.state_dim,
            phi: self.phi,
            gss_layers: self.gss_layers,
            msa_layers: self.msa_layers,
            gss_residual: self.gss_residual,
            msa_layernorm: self.msa_layernorm,
            disable_gtssm: self.disable_gtssm,
            disable_video_prompt: self.disable_video_prompt,
        }
    }

    /// Videos sampled for the feature space of a task with `classes` classes.
    pub fn sample_size(&self, classes: usize) -> usize {
        self.b.unwrap_or(classes.max(6))
    }

    pub fn prompt_lens(&self, task: usize) -> (usize, usize) {
        if task == 1 {
            (
                self.first_frame_prompt_len.unwrap_or(self.frame_prompt_len),
                self.first_video_prompt_len.unwrap_or(self.video_prompt_len),
            )
        } else {
            (self.frame_prompt_len, self.video_prompt_len)
        }
    }

    pub fn total_classes(&self) -> usize {
        self.split.iter().sum()
    }
}
