//! Runtime oracle suites.
//!
//! Each suite compares a production routine against an independent
//! reference on seeded random inputs and reports how many cases agreed
//! together with the worst deviation observed.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::detector::Detector;
use crate::error::Result;
use crate::gtssm::{
    boruvka_mst, build_knn_graph, discretize, gt_ssm_bruteforce, gt_ssm_fast, similarity_tree, Edge,
    SequenceGraph, SpanningTree,
};
use crate::harness::config::TrainConfig;
use crate::harness::loss::hungarian;
use crate::harness::metrics::{compute_fap, ClassHistory};
use crate::harness::train::{video_loss, Experiment, RunState, TaskParams};
use crate::ogc::{project_gradient, OrthoSpace};
use crate::oracle::{
    attention_scores_reference, exhaustive_assignment, finite_difference, kruskal_weights, knn_edges_reference,
    naive_matmul,
};
use crate::rng::{gaussian_matrix, stream, StreamRng};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Largest deviation seen, in the suite's own measure.
    pub worst: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

struct Tally {
    name: &'static str,
    passed: usize,
    total: usize,
    worst: f64,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            passed: 0,
            total: 0,
            worst: 0.0,
            start: Instant::now(),
        }
    }

    fn record(&mut self, deviation: f64, tol: f64) {
        self.total += 1;
        if deviation <= tol {
            self.passed += 1;
        }
        if deviation.is_nan() {
            self.worst = f64::NAN;
        } else {
            self.worst = self.worst.max(deviation);
        }
    }

    fn check(&mut self, ok: bool) {
        self.record(if ok { 0.0 } else { 1.0 }, 0.0);
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            passed: self.passed,
            total: self.total,
            worst: self.worst,
            elapsed: self.start.elapsed(),
        }
    }
}

fn random_parent_tree(rng: &mut StreamRng, n: usize) -> Result<SpanningTree> {
    let parents = (0..n).map(|i| if i == 0 { 0 } else { rng.random_range(0..i) }).collect();
    SpanningTree::from_parents(parents)
}

/// Fast two-pass scan against the explicit walk on discretised random
/// parameters: `cases` trees of up to 64 vertices, `Q ∈ {1, 4, 16}`.
/// Deviation is `max|fast − brute| / max|brute|`.
pub fn gtssm_equivalence(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut tally = Tally::new("gtssm_equivalence");
    let mut rng = stream(seed, "oracle.gtssm");
    let d = 8;
    for case in 0..cases {
        let n = rng.random_range(1..=64);
        let q = [1, 4, 16][case % 3];
        let x = gaussian_matrix(&mut rng, n, d, 1.0);
        let tree = if case % 2 == 0 {
            random_parent_tree(&mut rng, n)?
        } else {
            similarity_tree(&x, rng.random_range(1..=4))?
        };
        let a: Vec<f64> = (0..q).map(|_| -rng.random_range(0.1..4.0)).collect();
        let mut abar = Matrix::zeros(n, q);
        let mut u = Matrix::zeros(n, q);
        for j in 0..n {
            let delta = rng.random_range(0.01..2.0);
            let b = gaussian_matrix(&mut rng, q, d, 1.0);
            let (aj, bj) = discretize(&a, delta, &b)?;
            abar.row_mut(j).copy_from_slice(&aj);
            let bx = bj.matmul(&Matrix::column_vector(x.row(j)))?;
            u.row_mut(j).copy_from_slice(bx.data());
        }
        let brute = gt_ssm_bruteforce(&tree, &abar, &u)?;
        let fast = gt_ssm_fast(&tree, &abar, &u)?;
        let dev = fast.max_abs_diff(&brute)? / brute.max_abs().max(f64::MIN_POSITIVE);
        tally.record(dev, 1e-6);
    }
    Ok(tally.finish())
}

type WeightedEdges = Vec<(usize, usize, f64)>;

fn random_connected_graph(rng: &mut StreamRng, n: usize) -> Result<(SequenceGraph, WeightedEdges)> {
    let mut raw = Vec::new();
    for v in 1..n {
        raw.push((rng.random_range(0..v), v, rng.random_range(0.0..2.0)));
    }
    for _ in 0..rng.random_range(0..=2 * n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            raw.push((a, b, rng.random_range(0.0..2.0)));
        }
    }
    let g = SequenceGraph::from_edges(n, raw.iter().map(|&(u, v, weight)| Edge { u, v, weight }))?;
    let edges = g.edges().iter().map(|e| (e.u, e.v, e.weight)).collect();
    Ok((g, edges))
}

/// Borůvka against Kruskal on random connected graphs: the sorted edge
/// weights of both spanning trees must be identical.
pub fn mst_kruskal(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut tally = Tally::new("mst_kruskal");
    let mut rng = stream(seed, "oracle.mst");
    for _ in 0..cases {
        let n = rng.random_range(2..=60);
        let (g, edges) = random_connected_graph(&mut rng, n)?;
        let tree = boruvka_mst(&g)?;
        let ok = tree.edge_weights_sorted() == kruskal_weights(n, &edges) && tree.edge_count() == n - 1;
        tally.check(ok);
    }
    Ok(tally.finish())
}

/// Every vertex of a random tree appears after its parent in the BTO.
pub fn bto_order(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut tally = Tally::new("bto_order");
    let mut rng = stream(seed, "oracle.bto");
    for case in 0..cases {
        let n = rng.random_range(1..=80);
        let tree = if case % 2 == 0 {
            random_parent_tree(&mut rng, n)?
        } else {
            let (g, _) = random_connected_graph(&mut rng, n.max(2))?;
            boruvka_mst(&g)?
        };
        let mut pos = vec![usize::MAX; tree.len()];
        for (i, &v) in tree.bto().iter().enumerate() {
            pos[v] = i;
        }
        let ok = tree.bto().len() == tree.len()
            && (0..tree.len()).all(|v| tree.is_root(v) || pos[tree.parent(v)] < pos[v]);
        tally.check(ok);
    }
    Ok(tally.finish())
}

/// Measurements of the projection algebra on a rank-16 `O` (`96 × 64`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OgcAlgebra {
    pub rank: usize,
    /// `‖ΔP*·Oᵀ‖ / (‖ΔP‖·‖O‖)` at ξ = 0.7.
    pub orthogonality: f64,
    /// `max|P(P(ΔP)) − P(ΔP)|`.
    pub idempotence: f64,
    /// `‖ΔP*·V̂₁‖`.
    pub protected_residual: f64,
    /// `max|P(ΔP) − ΔP|` at ξ = 0.
    pub identity_at_zero: f64,
    /// `max|P(ΔP)|` at ξ = 1.
    pub annihilation_at_one: f64,
}

pub fn ogc_algebra(seed: u64) -> Result<OgcAlgebra> {
    let mut rng = stream(seed, "oracle.ogc");
    let o = gaussian_matrix(&mut rng, 96, 16, 1.0).matmul(&gaussian_matrix(&mut rng, 16, 64, 1.0))?;
    let dp = gaussian_matrix(&mut rng, 8, 64, 1.0);
    let space = OrthoSpace::new(1, o.clone(), 0.7, 12, seed)?;
    let star = project_gradient(&dp, &space)?;
    let twice = project_gradient(&star, &space)?;
    let zero = OrthoSpace::new(1, o.clone(), 0.0, 12, seed)?;
    let one = OrthoSpace::new(1, o.clone(), 1.0, 12, seed)?;
    Ok(OgcAlgebra {
        rank: space.numerical_rank(),
        orthogonality: star.matmul_t(&o)?.frobenius_norm() / (dp.frobenius_norm() * o.frobenius_norm()),
        idempotence: twice.max_abs_diff(&star)?,
        protected_residual: star.matmul(&space.v1)?.frobenius_norm(),
        identity_at_zero: project_gradient(&dp, &zero)?.max_abs_diff(&dp)?,
        annihilation_at_one: project_gradient(&dp, &one)?.max_abs(),
    })
}

fn ogc_suite(seed: u64) -> Result<SuiteResult> {
    let mut tally = Tally::new("ogc_algebra");
    let m = ogc_algebra(seed)?;
    tally.check(m.rank == 16);
    tally.record(m.orthogonality, 1e-8);
    tally.record(m.idempotence, 1e-12);
    tally.record(m.protected_residual, 1e-10);
    tally.record(m.identity_at_zero, 1e-10);
    tally.record(m.annihilation_at_one, 1e-10);
    Ok(tally.finish())
}

fn attention_suite(seed: u64) -> Result<SuiteResult> {
    let mut tally = Tally::new("attention_reference");
    let det = Detector::new(Default::default(), seed)?;
    let mut rng = stream(seed, "oracle.attention");
    let hd = det.config.head_dim();
    for layer in 0..det.config.layers {
        for head in 0..det.config.heads {
            let p = gaussian_matrix(&mut rng, 4, det.config.d, 1.0);
            let f = gaussian_matrix(&mut rng, 16, det.config.d, 1.0);
            let l = &det.decoder.layers[layer];
            let reference = attention_scores_reference(
                &p,
                &f,
                &l.wq.slice_cols(head * hd, hd)?,
                &l.wk.slice_cols(head * hd, hd)?,
            );
            let got = det.cross_attention_scores(&p, &f, layer, head)?;
            tally.record(got.max_abs_diff(&reference)?, 1e-12);
        }
    }
    Ok(tally.finish())
}

fn knn_suite(seed: u64) -> Result<SuiteResult> {
    let mut tally = Tally::new("knn_reference");
    let mut rng = stream(seed, "oracle.knn");
    for _ in 0..50 {
        let n = rng.random_range(3..40);
        let phi = rng.random_range(1..n.min(6));
        let x = gaussian_matrix(&mut rng, n, 6, 1.0);
        let reference = knn_edges_reference(&x, phi);
        let g = build_knn_graph(&x, phi)?;
        let got: BTreeSet<(usize, usize)> = g.edges().iter().map(|e| (e.u, e.v)).collect();
        let plain = SequenceGraph::from_edges(
            n,
            reference.iter().map(|&(u, v)| Edge { u, v, weight: 0.0 }),
        )?;
        let ok = if plain.component_count() == 1 {
            got == reference
        } else {
            reference.is_subset(&got)
        };
        tally.check(ok);
    }
    Ok(tally.finish())
}

fn hungarian_suite(seed: u64) -> Result<SuiteResult> {
    let mut tally = Tally::new("hungarian_exhaustive");
    let mut rng = stream(seed, "oracle.hungarian");
    for _ in 0..100 {
        let rows = rng.random_range(1..=4);
        let cols = rows + rng.random_range(0..=2);
        let cost = Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..10.0));
        let m = hungarian(&cost)?;
        let total: f64 = m
            .iter()
            .enumerate()
            .map(|(r, c)| c.map_or(f64::INFINITY, |c| cost.get(r, c)))
            .sum();
        let (best, _) = exhaustive_assignment(&cost);
        tally.record((total - best).abs(), 1e-9);
    }
    Ok(tally.finish())
}

fn fap_suite() -> SuiteResult {
    let mut tally = Tally::new("fap_fixtures");
    let h = |class, task, values: &[Option<f64>]| ClassHistory {
        class,
        task,
        values: values.to_vec(),
    };
    tally.check(compute_fap(&[h(0, 1, &[Some(0.6), Some(0.6)])], 2).value == Some(0.0));
    tally.check(compute_fap(&[h(0, 1, &[Some(0.5), Some(0.25)])], 2).value == Some(0.5));
    let three = [
        h(0, 1, &[Some(0.4), None, Some(0.2)]),
        h(1, 1, &[Some(0.6), None, Some(0.6)]),
        h(2, 2, &[None, Some(0.5), Some(0.25)]),
    ];
    tally.check(compute_fap(&three, 3).value == Some(0.25));
    tally.finish()
}

fn matmul_suite(seed: u64) -> Result<SuiteResult> {
    let mut tally = Tally::new("matmul_naive");
    let mut rng = stream(seed, "oracle.matmul");
    for _ in 0..30 {
        let (r, k, c) = (rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..20));
        let a = gaussian_matrix(&mut rng, r, k, 1.0);
        let b = gaussian_matrix(&mut rng, k, c, 1.0);
        tally.record(a.matmul(&b)?.max_abs_diff(&naive_matmul(&a, &b))?, 1e-12);
    }
    Ok(tally.finish())
}

/// Small pipeline used for end-to-end gradient checks.
pub fn gradient_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        d: 16,
        heads: 2,
        state_dim: 4,
        frames: 2,
        height: 8,
        width: 8,
        scales: 1,
        detector_layers: 2,
        phi: 3,
        frame_prompt_len: 3,
        video_prompt_len: 3,
        gss_layers: 2,
        msa_layers: 2,
        split: vec![3],
        train_videos: 3,
        b: Some(3),
        test_videos: 1,
        max_instances: 2,
        ..TrainConfig::default()
    }
}

/// Prompt gradients of the full loss against central differences with
/// step `1e-6`, one random configuration per seed. Deviation is
/// `‖g − fd‖ / ‖fd‖` over both prompts together.
pub fn gradient_fidelity(seeds: impl IntoIterator<Item = u64>) -> Result<SuiteResult> {
    let mut tally = Tally::new("gradient_fidelity");
    for seed in seeds {
        let exp = Experiment::new(gradient_config(seed))?;
        let state = RunState::new(&exp.cfg);
        let base = TaskParams::init(&exp, &state, 1)?;
        let spec = &exp.seq.task(1)?.train[(seed % 3) as usize];
        let data = exp.load_video(spec)?;
        let (_, grads) = video_loss(&exp, &state.decoder, &base, &data, true, true)?;
        let grads = grads.expect("gradients requested");

        let eval = |frm: &Matrix, vid: &Matrix| {
            let p = TaskParams {
                task: 1,
                prompts: crate::video::TaskPrompts {
                    task: 1,
                    frm: frm.clone(),
                    vid: vid.clone(),
                },
                heads: base.heads.clone(),
            };
            video_loss(&exp, &state.decoder, &p, &data, true, false)
                .map(|(l, _)| l)
                .unwrap_or(f64::NAN)
        };
        let fd_frm = finite_difference(&base.prompts.frm, 1e-6, |x| eval(x, &base.prompts.vid));
        let fd_vid = finite_difference(&base.prompts.vid, 1e-6, |x| eval(&base.prompts.frm, x));
        let g_frm = grads.get("p_frm").cloned().unwrap_or_else(|| Matrix::zeros(3, 16));
        let g_vid = grads.get("p_vid").cloned().unwrap_or_else(|| Matrix::zeros(3, 16));
        let diff = g_frm.sub(&fd_frm)?.frobenius_norm().hypot(g_vid.sub(&fd_vid)?.frobenius_norm());
        let norm = fd_frm.frobenius_norm().hypot(fd_vid.frobenius_norm());
        tally.record(diff / norm.max(f64::MIN_POSITIVE), 1e-5);
    }
    Ok(tally.finish())
}

/// Every suite with its default size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        gtssm_equivalence(200, seed)?,
        mst_kruskal(100, seed)?,
        bto_order(100, seed)?,
        ogc_suite(seed)?,
        attention_suite(seed)?,
        knn_suite(seed)?,
        hungarian_suite(seed)?,
        fap_suite(),
        matmul_suite(seed)?,
        gradient_fidelity(0..5)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(gtssm_equivalence(30, 1).unwrap().ok());
        assert!(mst_kruskal(20, 1).unwrap().ok());
        assert!(bto_order(20, 1).unwrap().ok());
        assert!(ogc_suite(1).unwrap().ok());
        assert!(fap_suite().ok());
        assert!(hungarian_suite(1).unwrap().ok());
    }

    #[test]
    fn gradient_check_passes_on_one_config() {
        let r = gradient_fidelity([7]).unwrap();
        assert!(r.ok(), "worst {}", r.worst);
    }
}
