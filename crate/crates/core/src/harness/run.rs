//! End-to-end runs: every task in sequence, evaluating after each one.

use std::path::Path;

use crate::error::Result;
use crate::harness::config::TrainConfig;
use crate::harness::eval::evaluate;
use crate::harness::metrics::MetricsReport;
use crate::harness::store::RunStore;
use crate::harness::train::{train_task, Experiment, RunState};

pub struct RunOutcome {
    pub report: MetricsReport,
    pub state: RunState,
}

/// Trains and evaluates all tasks. With `out`, the run directory is
/// written as training progresses.
pub fn run_experiment(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let exp = Experiment::new(cfg.clone())?;
    let store = out.map(RunStore::create).transpose()?;
    if let Some(s) = &store {
        s.save_config(cfg)?;
        s.save_manifest(&exp.seq.manifest(&exp.det)?)?;
    }
    let mut state = RunState::new(cfg);
    let mut evaluations = Vec::with_capacity(exp.seq.tasks.len());
    for t in 1..=exp.seq.tasks.len() {
        train_task(&exp, &mut state, t, store.as_ref())?;
        let eval = evaluate(&exp, &state)?;
        if let Some(s) = &store {
            s.save_state(&state)?;
            s.write_predictions(t, &eval.predictions)?;
        }
        evaluations.push(eval.evaluation);
    }
    let report = MetricsReport::from_evaluations(evaluations, &exp.class_tasks());
    if let Some(s) = &store {
        s.write_metrics(&report)?;
    }
    Ok(RunOutcome { report, state })
}
