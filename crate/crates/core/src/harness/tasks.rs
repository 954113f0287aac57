//! Synthetic class-incremental task sequences.
//!
//! Task `t` owns a contiguous block of global class ids, disjoint from every
//! other task. Each video is described by a [`VideoSpec`] and materialised on
//! demand from its own random stream, `data.task{t}.{split}.{i}`, so any video
//! can be regenerated without touching the others.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, FrameFeatures, PrototypeBank, SyntheticVideo};
use crate::error::{HvplError, Result};
use crate::harness::config::TrainConfig;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub id: String,
    pub task: usize,
    pub split: Split,
    pub index: usize,
    /// Class guaranteed to appear (unless fully occluded).
    pub primary: usize,
    pub stream: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: usize,
    pub labels: Range<usize>,
    pub train: Vec<VideoSpec>,
    pub test: Vec<VideoSpec>,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_vec(&self) -> Vec<usize> {
        self.labels.clone().collect()
    }

    pub fn videos(&self, split: Split) -> &[VideoSpec] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub seed: u64,
    pub num_classes: usize,
    pub max_instances: usize,
    pub tasks: Vec<TaskSpec>,
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub task: usize,
    pub split: Split,
    pub classes: Vec<usize>,
    pub seed: u64,
    pub stream: String,
}

pub fn generate_tasks(cfg: &TrainConfig) -> Result<TaskSequence> {
    let needed = cfg.total_classes();
    let budget = cfg.class_budget.unwrap_or(needed);
    if budget < needed {
        return Err(HvplError::Config(format!(
            "class budget {budget} cannot cover splits {:?}",
            cfg.split
        )));
    }
    let mut tasks = Vec::with_capacity(cfg.split.len());
    let mut next = 0;
    for (i, &k) in cfg.split.iter().enumerate() {
        let task = i + 1;
        let labels = next..next + k;
        next += k;
        let make = |split: Split, count: usize| -> Vec<VideoSpec> {
            (0..count)
                .map(|index| VideoSpec {
                    id: format!("t{task}-{}-{index:03}", split.as_str()),
                    task,
                    split,
                    index,
                    primary: labels.start + index % k,
                    stream: format!("data.task{task}.{}.{index}", split.as_str()),
                })
                .collect()
        };
        tasks.push(TaskSpec {
            task,
            train: make(Split::Train, cfg.train_videos),
            test: make(Split::Test, cfg.test_videos),
            labels,
        });
    }
    Ok(TaskSequence {
        seed: cfg.seed,
        num_classes: budget,
        max_instances: cfg.max_instances,
        tasks,
    })
}

impl TaskSequence {
    pub fn task(&self, t: usize) -> Result<&TaskSpec> {
        self.tasks
            .get(t.wrapping_sub(1))
            .ok_or_else(|| HvplError::State(format!("task {t} is not part of the sequence")))
    }

    /// Prototypes for every class of the budget, drawn once.
    pub fn prototypes(&self, d: usize) -> PrototypeBank {
        PrototypeBank::new(self.seed, self.num_classes, d)
    }

    pub fn materialize(
        &self,
        det: &Detector,
        bank: &PrototypeBank,
        spec: &VideoSpec,
    ) -> Result<(SyntheticVideo, FrameFeatures)> {
        let task = self.task(spec.task)?;
        let mut rng = stream(self.seed, &spec.stream);
        det.synth_video(
            spec.id.clone(),
            spec.task,
            &task.label_vec(),
            Some(spec.primary),
            self.max_instances,
            bank,
            &mut rng,
        )
    }

    /// Layout only; identical to the layout produced by [`Self::materialize`].
    pub fn layout(&self, det: &Detector, spec: &VideoSpec) -> Result<SyntheticVideo> {
        let task = self.task(spec.task)?;
        let mut rng = stream(self.seed, &spec.stream);
        Ok(det.sample_layout(
            spec.id.clone(),
            spec.task,
            &task.label_vec(),
            Some(spec.primary),
            self.max_instances,
            &mut rng,
        ))
    }

    pub fn manifest(&self, det: &Detector) -> Result<Vec<ManifestEntry>> {
        let mut out = Vec::new();
        for task in &self.tasks {
            for spec in task.train.iter().chain(&task.test) {
                let layout = self.layout(det, spec)?;
                out.push(ManifestEntry {
                    id: spec.id.clone(),
                    task: spec.task,
                    split: spec.split,
                    classes: layout.instances.iter().map(|i| i.class_id).collect(),
                    seed: self.seed,
                    stream: spec.stream.clone(),
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            d: 16,
            heads: 2,
            frames: 2,
            height: 8,
            width: 8,
            detector_layers: 1,
            train_videos: 8,
            test_videos: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn four_two_split_is_disjoint() {
        let seq = generate_tasks(&small()).unwrap();
        assert_eq!(seq.tasks.len(), 2);
        assert_eq!(seq.tasks[0].labels, 0..4);
        assert_eq!(seq.tasks[1].labels, 4..6);
        assert!(seq.tasks[0].labels.clone().all(|c| !seq.tasks[1].labels.contains(&c)));
    }

    #[test]
    fn fifteen_ten_shape_gives_two_tasks() {
        let cfg = TrainConfig {
            split: vec![15, 10],
            train_videos: 20,
            ..small()
        };
        let seq = generate_tasks(&cfg).unwrap();
        assert_eq!(seq.tasks.len(), 2);
        assert_eq!(seq.tasks[0].num_classes(), 15);
        assert_eq!(seq.tasks[1].labels, 15..25);
    }

    #[test]
    fn small_budget_is_a_configuration_error() {
        let cfg = TrainConfig {
            class_budget: Some(5),
            ..small()
        };
        assert!(matches!(generate_tasks(&cfg), Err(HvplError::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let det = Detector::new(cfg.detector(), cfg.seed).unwrap();
        let a = generate_tasks(&cfg).unwrap();
        let b = generate_tasks(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.manifest(&det).unwrap(), b.manifest(&det).unwrap());
    }

    #[test]
    fn layout_matches_materialised_video() {
        let cfg = small();
        let det = Detector::new(cfg.detector(), cfg.seed).unwrap();
        let seq = generate_tasks(&cfg).unwrap();
        let bank = seq.prototypes(cfg.d);
        for spec in seq.tasks[1].train.iter().take(3) {
            let (video, _) = seq.materialize(&det, &bank, spec).unwrap();
            assert_eq!(video, seq.layout(&det, spec).unwrap());
            assert!(video.instances.iter().all(|i| seq.tasks[1].labels.contains(&i.class_id)));
        }
    }

    #[test]
    fn every_class_has_training_videos() {
        let cfg = small();
        let det = Detector::new(cfg.detector(), cfg.seed).unwrap();
        let seq = generate_tasks(&cfg).unwrap();
        let manifest = seq.manifest(&det).unwrap();
        for c in 0..6 {
            assert!(manifest
                .iter()
                .any(|e| e.split == Split::Train && e.classes.contains(&c)));
        }
    }
}
