//! Traversal scaling benchmark.
//!
//! Times the two-pass tree scan and the explicit per-vertex walk on random
//! trees and fits the log-log slope of time against vertex count.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::Result;
use crate::gtssm::{gt_ssm_bruteforce, gt_ssm_fast, SpanningTree};
use crate::rng::{gaussian_matrix, stream};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanPath {
    Fast,
    Brute,
}

impl ScanPath {
    pub fn name(self) -> &'static str {
        match self {
            ScanPath::Fast => "fast",
            ScanPath::Brute => "brute",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub path: ScanPath,
    pub n_v: usize,
    /// Best observed mean time per call.
    pub nanos: f64,
}

pub const DEFAULT_FAST_SIZES: [usize; 4] = [256, 512, 1024, 2048];
pub const DEFAULT_BRUTE_SIZES: [usize; 4] = [64, 128, 256, 512];
const STATE_DIM: usize = 16;
const BATCHES: usize = 5;
const MIN_BATCH: Duration = Duration::from_millis(20);

fn random_case(seed: u64, n: usize) -> Result<(SpanningTree, Matrix, Matrix)> {
    let mut rng = stream(seed, &format!("bench.n{n}"));
    let parents = (0..n).map(|i| if i == 0 { 0 } else { rng.random_range(0..i) }).collect();
    let tree = SpanningTree::from_parents(parents)?;
    let abar = Matrix::from_fn(n, STATE_DIM, |_, _| rng.random_range(0.05..0.95));
    let u = gaussian_matrix(&mut rng, n, STATE_DIM, 1.0);
    Ok((tree, abar, u))
}

fn time_per_call(mut f: impl FnMut() -> Result<Matrix>) -> Result<f64> {
    std::hint::black_box(f()?);
    let mut best = f64::INFINITY;
    for _ in 0..BATCHES {
        let start = Instant::now();
        let mut calls = 0u32;
        while start.elapsed() < MIN_BATCH || calls == 0 {
            std::hint::black_box(f()?);
            calls += 1;
        }
        best = best.min(start.elapsed().as_nanos() as f64 / calls as f64);
    }
    Ok(best)
}

pub fn bench_traversal(fast_sizes: &[usize], brute_sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (path, sizes) in [(ScanPath::Fast, fast_sizes), (ScanPath::Brute, brute_sizes)] {
        for &n in sizes {
            let (tree, abar, u) = random_case(seed, n)?;
            let nanos = match path {
                ScanPath::Fast => time_per_call(|| gt_ssm_fast(&tree, &abar, &u))?,
                ScanPath::Brute => time_per_call(|| gt_ssm_bruteforce(&tree, &abar, &u))?,
            };
            rows.push(BenchRow { path, n_v: n, nanos });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn slope_of(rows: &[BenchRow], path: ScanPath) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.path == path)
        .map(|r| (r.n_v as f64, r.nanos))
        .collect();
    (pts.len() >= 2).then(|| loglog_slope(&pts))
}

/// One line per vertex count: `n_v,fast_ns,brute_ns`, with an empty cell
/// where a path was not timed at that size.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n_v).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let cell = |n: usize, path: ScanPath| {
        rows.iter()
            .find(|r| r.n_v == n && r.path == path)
            .map_or(String::new(), |r| format!("{:.1}", r.nanos))
    };
    let mut s = String::from("n_v,fast_ns,brute_ns\n");
    for n in sizes {
        s.push_str(&format!("{n},{},{}\n", cell(n, ScanPath::Fast), cell(n, ScanPath::Brute)));
    }
    s
}

/// The benchmark trees as JSON parent arrays keyed by vertex count, so other
/// implementations can replay the same cases.
pub fn trees_json(sizes: &[usize], seed: u64) -> Result<String> {
    let mut map = std::collections::BTreeMap::new();
    for &n in sizes {
        let (tree, _, _) = random_case(seed, n)?;
        map.insert(n.to_string(), tree.parents().to_vec());
    }
    Ok(serde_json::to_string(&map)?)
}
