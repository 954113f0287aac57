//! Component ablations over several seeds.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HvplError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::run::run_experiment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    DisableOgc,
    DisableGtssm,
    DisableVideoPrompt,
    /// All three components removed.
    Base,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::DisableOgc,
        Variant::DisableGtssm,
        Variant::DisableVideoPrompt,
        Variant::Base,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DisableOgc => "disable_ogc",
            Variant::DisableGtssm => "disable_gtssm",
            Variant::DisableVideoPrompt => "disable_video_prompt",
            Variant::Base => "base",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::DisableOgc => c.disable_ogc = true,
            Variant::DisableGtssm => c.disable_gtssm = true,
            Variant::DisableVideoPrompt => c.disable_video_prompt = true,
            Variant::Base => {
                c.disable_ogc = true;
                c.disable_gtssm = true;
                c.disable_video_prompt = true;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HvplError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HvplError::Usage(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    pub fap: Option<f64>,
    pub far1: Option<f64>,
    /// Mean AP over all classes after the last task.
    pub final_ap: Option<f64>,
    /// Mean AP of the first task's classes right after learning them.
    pub first_task_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Seeds on which the full model forgets strictly less than the
    /// variant without gradient correction, when both were run.
    pub full_beats_disable_ogc: Option<usize>,
}

impl AblationReport {
    pub fn row(&self, seed: u64, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.seed == seed && r.variant == variant)
    }

    /// Plain-text table, one line per seed and variant.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "{:<6} {:<22} {:>8} {:>8} {:>9} {:>9}\n",
            "seed", "variant", "FAP", "FAR1", "final AP", "task1 AP"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<6} {:<22} {:>8} {:>8} {:>9} {:>9}\n",
                r.seed,
                r.variant.name(),
                fmt(r.fap),
                fmt(r.far1),
                fmt(r.final_ap),
                fmt(r.first_task_ap)
            ));
        }
        s
    }
}

/// Runs every variant on every seed. Runs are independent and may execute
/// in parallel; rows come back in (seed, variant) order.
pub fn run_ablation(cfg: &TrainConfig, seeds: &[u64], variants: &[Variant]) -> Result<AblationReport> {
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| variants.iter().map(move |&v| (s, v)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, variant)| {
            let c = TrainConfig {
                seed,
                ..variant.apply(cfg)
            };
            let out = run_experiment(&c, None)?;
            let r = &out.report;
            Ok(AblationRow {
                seed,
                variant,
                fap: r.fap.value,
                far1: r.far1.value,
                final_ap: r.evaluations.last().and_then(|e| e.overall).map(|m| m.ap),
                first_task_ap: r
                    .evaluations
                    .first()
                    .and_then(|e| e.per_task.first())
                    .and_then(|a| a.metrics)
                    .map(|m| m.ap),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = AblationReport {
        rows,
        full_beats_disable_ogc: None,
    };
    if variants.contains(&Variant::Full) && variants.contains(&Variant::DisableOgc) {
        let wins = seeds
            .iter()
            .filter(|&&s| {
                let full = report.row(s, Variant::Full).and_then(|r| r.fap);
                let abl = report.row(s, Variant::DisableOgc).and_then(|r| r.fap);
                matches!((full, abl), (Some(f), Some(a)) if f < a)
            })
            .count();
        report.full_beats_disable_ogc = Some(wins);
    }
    Ok(report)
}
