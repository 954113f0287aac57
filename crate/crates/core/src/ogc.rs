//! Orthogonal gradient correction for frame prompts.
//!
//! After a task finishes, frame prompt features of a few of its videos are
//! compressed into a representative matrix `O`. While the next task trains,
//! the frame prompt gradient is projected onto `V̂₀`, the right singular
//! vectors of `O` left over after keeping the leading `⌊ξD⌋`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HvplError, Result};
use crate::optim::OptimState;
use crate::rng::StreamRng;
use crate::tensor::io::{read_arrays, write_arrays, Array, Dtype};
use crate::tensor::{pca_reduce, svd, Matrix, Tensor3};

/// Relative singular value cutoff used when reporting numerical rank.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OrthoSpace {
    pub task: usize,
    pub o: Matrix,
    pub v1: Matrix,
    pub v0: Matrix,
    pub s: Vec<f64>,
    pub xi: f64,
    pub b: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    xi: f64,
    t: usize,
    b: usize,
    seed: u64,
    dtype: Dtype,
}

/// Picks `b` distinct videos so that every class in `classes` is present.
///
/// `video_classes[i]` lists the classes appearing in video `i`. One video
/// is drawn per class (skipping classes already covered), then the rest are
/// filled uniformly; the result is sorted.
pub fn sample_covering(
    video_classes: &[Vec<usize>],
    classes: &[usize],
    b: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    if b < classes.len() {
        return Err(HvplError::Coverage {
            needed: classes.len(),
            sampled: b,
        });
    }
    if b > video_classes.len() {
        return Err(HvplError::Config(format!(
            "cannot sample {b} videos from {}",
            video_classes.len()
        )));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(b);
    for c in classes {
        if chosen.iter().any(|&i| video_classes[i].contains(c)) {
            continue;
        }
        let candidates: Vec<usize> = (0..video_classes.len())
            .filter(|i| video_classes[*i].contains(c) && !chosen.contains(i))
            .collect();
        if candidates.is_empty() {
            return Err(HvplError::Coverage {
                needed: classes.len(),
                sampled: b,
            });
        }
        chosen.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let mut rest: Vec<usize> = (0..video_classes.len()).filter(|i| !chosen.contains(i)).collect();
    rest.shuffle(rng);
    chosen.extend(rest.into_iter().take(b - chosen.len()));
    chosen.sort_unstable();
    Ok(chosen)
}

/// Compresses the frame prompt features of one video.
///
/// `z` is `N_f × L × D`. A PCA fitted on its `N_f·L` rows reduces each row
/// to `D/N_f` coordinates; the `N_f` reduced rows of prompt position `l` are
/// then laid side by side, giving an `L × D` block.
pub fn compress_video(z: &Tensor3) -> Result<Matrix> {
    let (nf, l, d) = z.dims();
    if nf == 0 || d % nf != 0 {
        return Err(HvplError::Config(format!("D = {d} is not divisible by N_f = {nf}")));
    }
    let k = d / nf;
    let pca = pca_reduce(&z.flatten_leading(), k)?;
    let mut out = Matrix::zeros(l, d);
    for f in 0..nf {
        for p in 0..l {
            out.row_mut(p)[f * k..(f + 1) * k].copy_from_slice(pca.reduced.row(f * l + p));
        }
    }
    Ok(out)
}

/// Stacks the compressed blocks of the sampled videos into `O` (`B·L × D`).
pub fn build_feature_space(z_frms: &[Tensor3]) -> Result<Matrix> {
    if z_frms.is_empty() {
        return Err(HvplError::Usage("feature space needs at least one video".into()));
    }
    let blocks = z_frms.iter().map(compress_video).collect::<Result<Vec<_>>>()?;
    Matrix::concat_rows(&blocks.iter().collect::<Vec<_>>())
}

/// Splits the right singular vectors of `o` after the first `⌊ξD⌋`.
///
/// Returns `(V̂₁, V̂₀, S)`. `V` is completed to `D × D` when `o` has fewer
/// rows than columns, the extra directions belonging to zero singular values.
pub fn svd_split(o: &Matrix, xi: f64) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(HvplError::Config(format!("xi = {xi} outside [0, 1]")));
    }
    let d = o.cols();
    let dec = svd(o)?;
    let v = dec.full_v();
    let keep = ((xi * d as f64).floor() as usize).min(d);
    Ok((v.slice_cols(0, keep)?, v.slice_cols(keep, d - keep)?, dec.s))
}

impl OrthoSpace {
    pub fn new(task: usize, o: Matrix, xi: f64, b: usize, seed: u64) -> Result<Self> {
        let (v1, v0, s) = svd_split(&o, xi)?;
        Ok(OrthoSpace {
            task,
            o,
            v1,
            v0,
            s,
            xi,
            b,
            seed,
        })
    }

    pub fn numerical_rank(&self) -> usize {
        let max = self.s.first().copied().unwrap_or(0.0);
        self.s.iter().filter(|&&s| s > RANK_TOL * max && s > 0.0).count()
    }

    pub fn file_name(task: usize) -> String {
        format!("ortho_space_t{task}.hvpl")
    }
}

/// `ΔP* = ΔP · V̂₀ · V̂₀ᵀ`.
pub fn project_gradient(dp: &Matrix, space: &OrthoSpace) -> Result<Matrix> {
    if dp.cols() != space.v0.rows() {
        return Err(HvplError::shape(
            "project_gradient",
            format!("gradient has {} columns, space has D = {}", dp.cols(), space.v0.rows()),
        ));
    }
    dp.matmul(&space.v0)?.matmul_t(&space.v0)
}

/// Feeds the projected gradient to the optimizer. Only valid from the
/// second task on.
pub fn apply_projected_update(
    p_frm: &mut Matrix,
    dp_star: &Matrix,
    state: &mut OptimState,
    task: usize,
) -> Result<()> {
    if task < 2 {
        return Err(HvplError::Usage(format!(
            "projected updates start at task 2, called at task {task}"
        )));
    }
    state.step(p_frm, dp_star)
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `space` into `dir` and removes any other stored space.
pub fn persist_space(dir: &Path, space: &OrthoSpace, dtype: Dtype) -> Result<PathBuf> {
    let path = dir.join(OrthoSpace::file_name(space.task));
    write_arrays(
        &path,
        &[
            Array::from_matrix(&space.o, dtype),
            Array::from_matrix(&space.v1, dtype),
            Array::from_matrix(&space.v0, dtype),
            Array::from_vector(&space.s, dtype),
        ],
    )?;
    let side = Sidecar {
        xi: space.xi,
        t: space.task,
        b: space.b,
        seed: space.seed,
        dtype,
    };
    let side_path = sidecar_path(&path);
    fs::write(&side_path, serde_json::to_string_pretty(&side)?).map_err(|e| HvplError::io(&side_path, e))?;

    for old in list_spaces(dir)? {
        if old != path {
            fs::remove_file(&old).map_err(|e| HvplError::io(&old, e))?;
            let side = sidecar_path(&old);
            if side.exists() {
                fs::remove_file(&side).map_err(|e| HvplError::io(&side, e))?;
            }
        }
    }
    Ok(path)
}

/// Stored space files in `dir`, sorted by name.
pub fn list_spaces(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| HvplError::io(dir, e))? {
        let p = entry.map_err(|e| HvplError::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("ortho_space_t") && name.ends_with(".hvpl") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_space(path: &Path) -> Result<OrthoSpace> {
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|e| HvplError::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let mut arrays = read_arrays(path)?.into_iter();
    let bad = |msg: &str| HvplError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let (Some(o), Some(v1), Some(v0), Some(s), None) =
        (arrays.next(), arrays.next(), arrays.next(), arrays.next(), arrays.next())
    else {
        return Err(bad("expected four records: O, V1, V0, S"));
    };
    if s.dims.len() != 1 {
        return Err(bad("singular values must be a vector"));
    }
    Ok(OrthoSpace {
        task: side.t,
        o: o.into_matrix()?,
        v1: v1.into_matrix()?,
        v0: v0.into_matrix()?,
        s: s.data,
        xi: side.xi,
        b: side.b,
        seed: side.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detector, DetectorConfig, PrototypeBank};
    use crate::optim::OptimizerKind;
    use crate::rng::{gaussian_matrix, stream};
    use proptest::prelude::*;

    fn low_rank(seed: u64, n: usize, r: usize, d: usize) -> Matrix {
        let mut rng = stream(seed, "lowrank");
        let g1 = gaussian_matrix(&mut rng, n, r, 1.0);
        let g2 = gaussian_matrix(&mut rng, r, d, 1.0);
        g1.matmul(&g2).unwrap()
    }

    fn rel(m: &Matrix, by: f64) -> f64 {
        m.frobenius_norm() / by
    }

    #[test]
    fn rank_sixteen_space_is_protected() {
        let o = low_rank(1, 96, 16, 64);
        let space = OrthoSpace::new(2, o.clone(), 0.7, 6, 42).unwrap();
        assert_eq!(space.v1.cols(), 44);
        assert_eq!(space.v0.cols(), 20);
        assert_eq!(space.numerical_rank(), 16);
        assert!(rel(&o.matmul(&space.v0).unwrap(), o.frobenius_norm()) <= 1e-8);

        let mut rng = stream(2, "dp");
        for _ in 0..10 {
            let dp = gaussian_matrix(&mut rng, 8, 64, 1.0);
            let star = project_gradient(&dp, &space).unwrap();
            let leak = star.matmul_t(&o).unwrap();
            assert!(rel(&leak, dp.frobenius_norm() * o.frobenius_norm()) <= 1e-8);
            assert!(star.matmul(&space.v1).unwrap().max_abs() <= 1e-10);
            let twice = project_gradient(&star, &space).unwrap();
            assert!(twice.max_abs_diff(&star).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn split_columns_are_orthonormal() {
        let o = low_rank(3, 40, 10, 32);
        let space = OrthoSpace::new(1, o, 0.5, 5, 0).unwrap();
        let v = Matrix::concat_cols(&[&space.v1, &space.v0]).unwrap();
        let gram = v.t_matmul(&v).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(32)).unwrap() <= 1e-10);
    }

    #[test]
    fn threshold_boundaries() {
        let o = low_rank(4, 20, 5, 16);
        let dp = gaussian_matrix(&mut stream(4, "dp"), 3, 16, 1.0);
        let all = OrthoSpace::new(1, o.clone(), 1.0, 1, 0).unwrap();
        assert_eq!(all.v0.cols(), 0);
        assert_eq!(project_gradient(&dp, &all).unwrap(), Matrix::zeros(3, 16));
        let none = OrthoSpace::new(1, o, 0.0, 1, 0).unwrap();
        assert_eq!(none.v1.cols(), 0);
        assert!(project_gradient(&dp, &none).unwrap().max_abs_diff(&dp).unwrap() <= 1e-10);
    }

    #[test]
    fn fixed_points_and_annihilation() {
        let o = low_rank(5, 30, 8, 16);
        let space = OrthoSpace::new(1, o, 0.5, 1, 0).unwrap();
        let mut rng = stream(5, "coef");
        let inside = gaussian_matrix(&mut rng, 4, space.v0.cols(), 1.0).matmul_t(&space.v0).unwrap();
        assert!(project_gradient(&inside, &space).unwrap().max_abs_diff(&inside).unwrap() <= 1e-10);
        let outside = gaussian_matrix(&mut rng, 4, space.v1.cols(), 1.0).matmul_t(&space.v1).unwrap();
        assert!(project_gradient(&outside, &space).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn projected_norm_shrinks_with_threshold() {
        let o = low_rank(6, 48, 20, 32);
        let dp = gaussian_matrix(&mut stream(6, "dp"), 5, 32, 1.0);
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let space = OrthoSpace::new(1, o.clone(), step as f64 / 10.0, 1, 0).unwrap();
            let n = project_gradient(&dp, &space).unwrap().frobenius_norm();
            assert!(n <= last + 1e-12);
            last = n;
        }
    }

    #[test]
    fn invalid_threshold_and_shapes() {
        let o = low_rank(7, 10, 3, 8);
        assert!(matches!(svd_split(&o, 1.5), Err(HvplError::Config(_))));
        let space = OrthoSpace::new(1, o, 0.5, 1, 0).unwrap();
        assert!(matches!(
            project_gradient(&Matrix::zeros(2, 7), &space),
            Err(HvplError::Shape { .. })
        ));
    }

    #[test]
    fn update_rules() {
        let mut p = Matrix::filled(2, 2, 0.5);
        let mut sgd = OptimState::new(OptimizerKind::Sgd { lr: 0.1 });
        assert!(matches!(
            apply_projected_update(&mut p, &Matrix::zeros(2, 2), &mut sgd, 1),
            Err(HvplError::Usage(_))
        ));
        let mut adam = OptimState::new(OptimizerKind::adam(0.01));
        apply_projected_update(&mut p, &Matrix::zeros(2, 2), &mut adam, 2).unwrap();
        assert_eq!(p, Matrix::filled(2, 2, 0.5));
        apply_projected_update(&mut p, &Matrix::filled(2, 2, 1.0), &mut sgd, 2).unwrap();
        assert!(p.max_abs_diff(&Matrix::filled(2, 2, 0.4)).unwrap() < 1e-15);
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let p0 = Matrix::from_rows(&[vec![0.2, -0.4], vec![1.0, 0.0]]).unwrap();
        let grads = [
            Matrix::from_rows(&[vec![0.5, -1.0], vec![0.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[vec![-0.25, 0.5], vec![1.0, -2.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.1, 0.1], vec![0.1, 0.1]]).unwrap(),
        ];
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut p = p0.clone();
        let mut state = OptimState::new(OptimizerKind::adam(lr));
        for g in &grads {
            apply_projected_update(&mut p, g, &mut state, 2).unwrap();
        }
        for i in 0..4 {
            let (mut x, mut m, mut v) = (p0.data()[i], 0.0, 0.0);
            for (t, g) in grads.iter().enumerate() {
                let g = g.data()[i];
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t as i32 + 1));
                let vh = v / (1.0 - b2.powi(t as i32 + 1));
                x -= lr * mh / (vh.sqrt() + eps);
            }
            assert!((p.data()[i] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn covering_sample() {
        let vids = vec![vec![0], vec![1], vec![0, 2], vec![3], vec![1, 3], vec![2]];
        let mut rng = stream(8, "s");
        for _ in 0..20 {
            let s = sample_covering(&vids, &[0, 1, 2, 3], 4, &mut rng).unwrap();
            assert_eq!(s.len(), 4);
            for c in 0..4 {
                assert!(s.iter().any(|&i| vids[i].contains(&c)));
            }
        }
        assert!(matches!(
            sample_covering(&vids, &[0, 1, 2, 3], 3, &mut rng),
            Err(HvplError::Coverage { needed: 4, sampled: 3 })
        ));
    }

    #[test]
    fn feature_space_shape_and_divisibility() {
        let z = Tensor3::from_slices(
            &(0..4)
                .map(|f| gaussian_matrix(&mut stream(f, "z"), 4, 64, 1.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let o = build_feature_space(std::slice::from_ref(&z)).unwrap();
        assert_eq!(o.shape(), (4, 64));
        assert_eq!(o, build_feature_space(&[z]).unwrap());
        let z3 = Tensor3::zeros(3, 4, 64);
        assert!(matches!(compress_video(&z3), Err(HvplError::Config(_))));
    }

    #[test]
    fn single_class_noiseless_space_is_rank_deficient() {
        let cfg = DetectorConfig {
            noise_std: 0.0,
            ..DetectorConfig::default()
        };
        let det = Detector::new(cfg, 42).unwrap();
        let bank = PrototypeBank::new(42, 1, 64);
        let p = gaussian_matrix(&mut stream(42, "prompt"), 8, 64, 1.0);
        let zs: Vec<Tensor3> = (0..6)
            .map(|i| {
                let mut rng = stream(42, &format!("v{i}"));
                let (_, f) = det.synth_video(format!("v{i}"), 1, &[0], None, 1, &bank, &mut rng).unwrap();
                det.transformer_decode(&p, &f).unwrap()
            })
            .collect();
        let o = build_feature_space(&zs).unwrap();
        assert_eq!(o.shape(), (48, 64));
        let space = OrthoSpace::new(1, o, 0.7, 6, 42).unwrap();
        assert!(space.numerical_rank() < 48, "rank {}", space.numerical_rank());
    }

    #[test]
    fn attention_drift_is_smaller_after_projection() {
        let det = Detector::new(DetectorConfig::default(), 42).unwrap();
        let o = low_rank(9, 48, 16, 64);
        let space = OrthoSpace::new(1, o.clone(), 0.7, 6, 42).unwrap();
        let mut rng = stream(9, "drift");
        let f = gaussian_matrix(&mut rng, 32, 48, 1.0).matmul(&o).unwrap().scale(0.25);
        let p = gaussian_matrix(&mut rng, 8, 64, 1.0);
        let attn = |p: &Matrix| {
            let maps: Vec<Matrix> = (0..4).map(|h| det.cross_attention_scores(p, &f, 0, h).unwrap()).collect();
            Matrix::concat_cols(&maps.iter().collect::<Vec<_>>()).unwrap()
        };
        let base = attn(&p);
        let eta = 1e-2;
        let mut strict = 0;
        for _ in 0..20 {
            let dp = gaussian_matrix(&mut rng, 8, 64, 1.0);
            let star = project_gradient(&dp, &space).unwrap();
            let raw = attn(&p.add(&dp.scale(eta)).unwrap()).sub(&base).unwrap().frobenius_norm();
            let proj = attn(&p.add(&star.scale(eta)).unwrap()).sub(&base).unwrap().frobenius_norm();
            assert!(proj <= raw);
            if proj < raw {
                strict += 1;
            }
        }
        assert!(strict >= 18, "strict in {strict}/20");
    }

    #[test]
    fn persistence_round_trip_and_single_space() {
        let dir = tempfile::tempdir().unwrap();
        let s1 = OrthoSpace::new(1, low_rank(10, 12, 4, 16), 0.7, 2, 42).unwrap();
        let p1 = persist_space(dir.path(), &s1, Dtype::F64).unwrap();
        let back = load_space(&p1).unwrap();
        assert!(back.o.bitwise_eq(&s1.o) && back.v0.bitwise_eq(&s1.v0) && back.v1.bitwise_eq(&s1.v1));
        assert_eq!(back, s1);

        for t in 2..=3 {
            let s = OrthoSpace::new(t, low_rank(10 + t as u64, 12, 4, 16), 0.7, 2, 42).unwrap();
            persist_space(dir.path(), &s, Dtype::F64).unwrap();
        }
        let left = list_spaces(dir.path()).unwrap();
        assert_eq!(left, vec![dir.path().join("ortho_space_t3.hvpl")]);
        assert!(!dir.path().join("ortho_space_t1.json").exists());
    }

    #[test]
    fn paper_scale_space_fits_budget() {
        // L_p^f = 10, D = 256, B = 10 videos, stored as f32.
        let dir = tempfile::tempdir().unwrap();
        let o = low_rank(11, 100, 60, 256);
        let space = OrthoSpace::new(1, o, 0.7, 10, 42).unwrap();
        let path = persist_space(dir.path(), &space, Dtype::F32).unwrap();
        let size = fs::metadata(&path).unwrap().len();
        let expected = [(100, 256), (256, 179), (256, 77)]
            .iter()
            .map(|(r, c)| 8 + 4 + 4 + 16 + 4 * r * c)
            .sum::<usize>()
            + 8 + 4 + 4 + 8 + 4 * space.s.len();
        assert_eq!(size as usize, expected);
        assert!(size <= 500_000, "{size} bytes");
    }

    #[test]
    fn missing_space_reports_path() {
        let err = load_space(Path::new("/no/such/ortho_space_t1.hvpl")).unwrap_err();
        assert!(err.to_string().contains("/no/such/ortho_space_t1"));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_orthogonal(seed in any::<u64>(), xi in 0.0f64..=1.0) {
            let o = low_rank(seed, 20, 6, 12);
            let space = OrthoSpace::new(1, o, xi, 1, 0).unwrap();
            let dp = gaussian_matrix(&mut stream(seed, "dp"), 3, 12, 1.0);
            let once = project_gradient(&dp, &space).unwrap();
            let twice = project_gradient(&once, &space).unwrap();
            prop_assert!(twice.max_abs_diff(&once).unwrap() <= 1e-12);
            prop_assert!(once.matmul(&space.v1).unwrap().max_abs() <= 1e-10);
        }
    }
}
