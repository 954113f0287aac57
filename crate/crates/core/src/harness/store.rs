//! Run directory layout.
//!
//! ```text
//! <run>/
//!   config.json                 effective configuration
//!   manifest.json               synthetic dataset manifest
//!   state/decoder.hvpl          video context decoder weights
//!   state/prompts_t{t}.hvpl     frame prompt, video prompt
//!   state/heads_t{t}.hvpl       classifier, mask head (two layers)
//!   state/state.json            task count, head metadata, counters, logs
//!   ortho_space_t{t}.hvpl       feature space of the last task (+ .json)
//!   metrics.json                metrics report
//!   predictions_t{t}.jsonl      test predictions after task t, RLE masks
//!   cache/task{t}/...           training features of the current task only
//! ```
//!
//! Weights are stored as f64 so a reloaded state reproduces the run bit for
//! bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::SyntheticVideo;
use crate::error::{HvplError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::eval::VideoPrediction;
use crate::harness::metrics::MetricsReport;
use crate::harness::tasks::ManifestEntry;
use crate::harness::train::{Counters, Experiment, RunState, TaskLog, VideoData};
use crate::ogc::{list_spaces, load_space, persist_space, OrthoSpace};
use crate::tensor::io::{read_arrays, write_arrays, Array, Dtype};
use crate::tensor::Matrix;
use crate::video::{TaskHeads, TaskPrompts, VideoDecoder};

const STATE_DTYPE: Dtype = Dtype::F64;

pub struct RunStore {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    task: usize,
    class_offset: usize,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    completed: usize,
    heads: Vec<HeadMeta>,
    counters: Counters,
    logs: Vec<TaskLog>,
}

/// Run-length encoding of a flat binary mask: alternating run lengths,
/// starting with a run of zeros (possibly empty).
pub fn rle_encode(mask: &[bool]) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for &b in mask {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[usize]) -> Vec<bool> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (i, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, c));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct PredictionLine<'a> {
    after_task: usize,
    video_id: &'a str,
    task: usize,
    prompt: usize,
    class: usize,
    score: f64,
    counts: Vec<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HvplError + '_ {
    move |e| HvplError::io(path, e)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn matrices(path: &Path, expected: usize) -> Result<Vec<Matrix>> {
    let arrays = read_arrays(path)?;
    if arrays.len() != expected {
        return Err(HvplError::Format {
            path: path.to_path_buf(),
            msg: format!("expected {expected} records, found {}", arrays.len()),
        });
    }
    arrays.into_iter().map(Array::into_matrix).collect()
}

fn fill(path: &Path, targets: Vec<&mut Matrix>, values: Vec<Matrix>) -> Result<()> {
    for (t, v) in targets.into_iter().zip(values) {
        if t.shape() != v.shape() {
            return Err(HvplError::Format {
                path: path.to_path_buf(),
                msg: format!("stored shape {:?} where {:?} is expected", v.shape(), t.shape()),
            });
        }
        *t = v;
    }
    Ok(())
}

impl RunStore {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("state")).map_err(io_err(root))?;
        Ok(RunStore {
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let state = root.join("state");
        if !state.is_dir() {
            return Err(HvplError::io(
                &state,
                std::io::Error::new(std::io::ErrorKind::NotFound, "not a run directory"),
            ));
        }
        Ok(RunStore {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn state_dir(&self) -> PathBuf {
        self.root.join("state")
    }

    fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn save_config(&self, cfg: &TrainConfig) -> Result<()> {
        write_json(&self.root.join("config.json"), cfg)
    }

    pub fn load_config(&self) -> Result<TrainConfig> {
        let cfg: TrainConfig = read_json(&self.root.join("config.json"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_manifest(&self, entries: &[ManifestEntry]) -> Result<()> {
        write_json(&self.root.join("manifest.json"), &entries)
    }

    pub fn persist_space(&self, space: &OrthoSpace) -> Result<PathBuf> {
        persist_space(&self.root, space, STATE_DTYPE)
    }

    pub fn save_state(&self, state: &RunState) -> Result<()> {
        let dir = self.state_dir();
        let dec: Vec<Array> = state
            .decoder
            .tensors()
            .into_iter()
            .map(|(_, m)| Array::from_matrix(m, STATE_DTYPE))
            .collect();
        write_arrays(&dir.join("decoder.hvpl"), &dec)?;
        for p in &state.prompts {
            write_arrays(
                &dir.join(format!("prompts_t{}.hvpl", p.task)),
                &[Array::from_matrix(&p.frm, STATE_DTYPE), Array::from_matrix(&p.vid, STATE_DTYPE)],
            )?;
        }
        for h in &state.heads {
            let arrays: Vec<Array> = h.tensors().iter().map(|(_, m)| Array::from_matrix(m, STATE_DTYPE)).collect();
            write_arrays(&dir.join(format!("heads_t{}.hvpl", h.task)), &arrays)?;
        }
        let meta = StateMeta {
            completed: state.completed,
            heads: state
                .heads
                .iter()
                .map(|h| HeadMeta {
                    task: h.task,
                    class_offset: h.class_offset,
                    num_classes: h.num_classes,
                })
                .collect(),
            counters: state.counters.clone(),
            logs: state.logs.clone(),
        };
        write_json(&dir.join("state.json"), &meta)
    }

    pub fn load_state(&self, cfg: &TrainConfig) -> Result<RunState> {
        let dir = self.state_dir();
        let meta: StateMeta = read_json(&dir.join("state.json"))?;
        let mut state = RunState::new(cfg);
        let path = dir.join("decoder.hvpl");
        let values = matrices(&path, state.decoder.tensors().len())?;
        fill(&path, state.decoder.tensors_mut().into_iter().map(|(_, m)| m).collect(), values)?;

        for h in &meta.heads {
            let path = dir.join(format!("prompts_t{}.hvpl", h.task));
            let mut pm = matrices(&path, 2)?.into_iter();
            let (frm, vid) = (pm.next().expect("two records"), pm.next().expect("two records"));
            state.prompts.push(TaskPrompts { task: h.task, frm, vid });

            let path = dir.join(format!("heads_t{}.hvpl", h.task));
            let mut hm = matrices(&path, 3)?.into_iter();
            state.heads.push(TaskHeads {
                task: h.task,
                class_offset: h.class_offset,
                num_classes: h.num_classes,
                gamma_c: hm.next().expect("three records"),
                m1: hm.next().expect("three records"),
                m2: hm.next().expect("three records"),
            });
        }
        state.space = match list_spaces(&self.root)?.last() {
            Some(p) => Some(load_space(p)?),
            None => None,
        };
        state.completed = meta.completed;
        state.counters = meta.counters;
        state.logs = meta.logs;
        Ok(state)
    }

    pub fn load_decoder(&self, cfg: &TrainConfig) -> Result<VideoDecoder> {
        Ok(self.load_state(cfg)?.decoder)
    }

    pub fn write_metrics(&self, report: &MetricsReport) -> Result<PathBuf> {
        let path = self.root.join("metrics.json");
        write_json(&path, report)?;
        Ok(path)
    }

    pub fn write_predictions(&self, after_task: usize, preds: &[VideoPrediction]) -> Result<PathBuf> {
        let path = self.root.join(format!("predictions_t{after_task}.jsonl"));
        let mut out = Vec::new();
        for p in preds {
            let line = PredictionLine {
                after_task,
                video_id: &p.video_id,
                task: p.task,
                prompt: p.prompt,
                class: p.class,
                score: p.score,
                counts: rle_encode(&p.mask),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(&out).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Training data for task `t`. With caching enabled the features are
    /// written under `cache/task{t}/` (after removing any other task's
    /// cache) and read back from there.
    pub fn training_features(&self, exp: &Experiment, t: usize) -> Result<Vec<VideoData>> {
        let spec = exp.seq.task(t)?;
        if !exp.cfg.cache_features {
            self.rehearsal_audit(t)?;
            return spec.train.par_iter().map(|v| exp.load_video(v)).collect();
        }
        let cache = self.cache_dir();
        if cache.exists() {
            for entry in fs::read_dir(&cache).map_err(io_err(&cache))? {
                let p = entry.map_err(io_err(&cache))?.path();
                if p.file_name().and_then(|n| n.to_str()) != Some(&format!("task{t}")) {
                    fs::remove_dir_all(&p).map_err(io_err(&p))?;
                }
            }
        }
        self.rehearsal_audit(t)?;
        let dir = cache.join(format!("task{t}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        spec.train
            .par_iter()
            .map(|v| {
                let feat_path = dir.join(format!("{}.hvpl", v.id));
                let layout_path = dir.join(format!("{}.json", v.id));
                if !feat_path.exists() || !layout_path.exists() {
                    let (video, feats) = exp.seq.materialize(&exp.det, &exp.bank, v)?;
                    write_arrays(
                        &feat_path,
                        &[
                            Array::from_tensor3(&feats.f_out, STATE_DTYPE),
                            Array::from_tensor3(&feats.scales[0], STATE_DTYPE),
                        ],
                    )?;
                    write_json(&layout_path, &video)?;
                }
                let video: SyntheticVideo = read_json(&layout_path)?;
                let mut arrays = read_arrays(&feat_path)?.into_iter();
                let (Some(f_out), Some(first), None) = (arrays.next(), arrays.next(), arrays.next()) else {
                    return Err(HvplError::Format {
                        path: feat_path.clone(),
                        msg: "expected full-resolution and first-scale features".into(),
                    });
                };
                exp.video_data(video, f_out.into_tensor3()?, &first.into_tensor3()?)
            })
            .collect()
    }

    /// Files in the run directory that hold training videos of tasks
    /// before `t`.
    pub fn old_training_files(&self, t: usize) -> Result<Vec<PathBuf>> {
        let mut found = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let p = entry.map_err(io_err(&dir))?.path();
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                let old = (1..t).any(|k| name.starts_with(&format!("t{k}-train-")));
                if old {
                    found.push(p);
                }
            }
        }
        found.sort();
        Ok(found)
    }

    /// Fails if any training video of an earlier task is still stored.
    pub fn rehearsal_audit(&self, t: usize) -> Result<()> {
        let found = self.old_training_files(t)?;
        if found.is_empty() {
            Ok(())
        } else {
            Err(HvplError::State(format!(
                "rehearsal-free audit failed before task {t}: {} stored training file(s), first {}",
                found.len(),
                found[0].display()
            )))
        }
    }
}
