//! Selective state-space recurrence over a spanning tree.
//!
//! The state matrix is diagonal and shared by all positions, so every
//! per-position quantity is a length-`Q` vector and the `N_v` positions are
//! stored as rows of `N_v × Q` matrices.

use std::sync::Arc;

use crate::error::{HvplError, Result};
use crate::tensor::{CustomBackward, Matrix, Var};

use super::graph::SpanningTree;

/// Zero-order-hold discretisation of one position.
///
/// `a` is the diagonal of `A` (all entries negative), `delta` the timescale
/// and `b` the `Q × D` input matrix. Returns `(Ā, B̄)` with
/// `Ā = exp(Δ A)` and `B̄ = (exp(Δ A) − I) A⁻¹ B`.
pub fn discretize(a: &[f64], delta: f64, b: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if let Some(v) = a.iter().find(|v| !(**v < 0.0)) {
        return Err(HvplError::Parameterization(format!(
            "state matrix diagonal entry {v} is not negative"
        )));
    }
    if !(delta > 0.0) {
        return Err(HvplError::Parameterization(format!("timescale {delta} is not positive")));
    }
    if b.rows() != a.len() {
        return Err(HvplError::shape(
            "discretize",
            format!("B has {} rows for Q = {}", b.rows(), a.len()),
        ));
    }
    let abar: Vec<f64> = a.iter().map(|ai| (delta * ai).exp()).collect();
    let mut bbar = b.clone();
    for (q, (ab, ai)) in abar.iter().zip(a).enumerate() {
        // exp_m1 keeps B̄ accurate as Δ → 0.
        let factor = (delta * ai).exp_m1() / ai;
        debug_assert!((ab - 1.0 - (delta * ai).exp_m1()).abs() < 1e-12);
        for v in bbar.row_mut(q) {
            *v *= factor;
        }
    }
    Ok((abar, bbar))
}

/// `H_j = Σ_k Ω(E_jk) u_k` by an explicit walk from every vertex.
///
/// `abar` row `v` is the factor carried by the edge between `v` and its
/// parent; `u` row `k` is `B̄_k X_k`. O(N_v² · Q).
pub fn gt_ssm_bruteforce(tree: &SpanningTree, abar: &Matrix, u: &Matrix) -> Result<Matrix> {
    check_scan_shapes(tree, abar, u)?;
    let (n, q) = u.shape();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for v in 0..n {
        if !tree.is_root(v) {
            let p = tree.parent(v);
            adj[v].push(p);
            adj[p].push(v);
        }
    }
    let mut h = Matrix::zeros(n, q);
    let mut omega = vec![vec![0.0; q]; n];
    let mut visited = vec![false; n];
    let mut stack = Vec::with_capacity(n);
    for j in 0..n {
        visited.iter_mut().for_each(|v| *v = false);
        omega[j].iter_mut().for_each(|v| *v = 1.0);
        visited[j] = true;
        stack.push(j);
        while let Some(a) = stack.pop() {
            let hj = h.row_mut(j);
            for ((hv, om), uv) in hj.iter_mut().zip(&omega[a]).zip(u.row(a)) {
                *hv += om * uv;
            }
            for &b in &adj[a] {
                if visited[b] {
                    continue;
                }
                visited[b] = true;
                // The edge's factor belongs to its child endpoint.
                let child = if tree.parent(b) == a && !tree.is_root(b) { b } else { a };
                let next: Vec<f64> = omega[a]
                    .iter()
                    .zip(abar.row(child))
                    .map(|(o, f)| o * f)
                    .collect();
                omega[b] = next;
                stack.push(b);
            }
        }
    }
    Ok(h)
}

/// Upward/downward two-pass evaluation of the same sums in O(N_v · Q).
///
/// Returns `(ζ, H)`: `ζ_j` aggregates the subtree of `j`, `H_j` the whole
/// tree.
pub fn gt_ssm_fast_with_subtree(
    tree: &SpanningTree,
    abar: &Matrix,
    u: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_scan_shapes(tree, abar, u)?;
    let q = u.cols();
    let mut zeta = u.clone();
    for &j in tree.bto().iter().rev() {
        if tree.is_root(j) {
            continue;
        }
        let p = tree.parent(j);
        let (zj, aj) = (zeta.row(j).to_vec(), abar.row(j));
        for ((zp, z), a) in zeta.row_mut(p).iter_mut().zip(&zj).zip(aj) {
            *zp += a * z;
        }
    }
    let mut h = Matrix::zeros(u.rows(), q);
    for &j in tree.bto() {
        if tree.is_root(j) {
            h.row_mut(j).copy_from_slice(zeta.row(j));
            continue;
        }
        let hp = h.row(tree.parent(j)).to_vec();
        let (a, z) = (abar.row(j), zeta.row(j));
        let out = h.row_mut(j);
        for c in 0..q {
            out[c] = a[c] * (hp[c] - a[c] * z[c]) + z[c];
        }
    }
    Ok((zeta, h))
}

pub fn gt_ssm_fast(tree: &SpanningTree, abar: &Matrix, u: &Matrix) -> Result<Matrix> {
    gt_ssm_fast_with_subtree(tree, abar, u).map(|(_, h)| h)
}

fn check_scan_shapes(tree: &SpanningTree, abar: &Matrix, u: &Matrix) -> Result<()> {
    if abar.shape() != u.shape() || u.rows() != tree.len() {
        return Err(HvplError::shape(
            "gt_ssm",
            format!(
                "tree of {} vertices, Ā {:?}, input {:?}",
                tree.len(),
                abar.shape(),
                u.shape()
            ),
        ));
    }
    Ok(())
}

/// Per-position readout `Y_j = C_j H_j + D ⊙ X_j`.
///
/// `c` holds the matrices `C_j` (`D × Q`) and `skip` the per-channel `D`.
pub fn ssm_output(h: &Matrix, c: &[Matrix], skip: &[f64], x: &Matrix) -> Result<Matrix> {
    let (n, q) = h.shape();
    let d = x.cols();
    if c.len() != n || x.rows() != n || skip.len() != d || c.iter().any(|m| m.shape() != (d, q)) {
        return Err(HvplError::shape("ssm_output", "inconsistent readout shapes"));
    }
    let mut y = Matrix::zeros(n, d);
    for j in 0..n {
        let hj = Matrix::column_vector(h.row(j));
        let ch = c[j].matmul(&hj)?;
        for (k, out) in y.row_mut(j).iter_mut().enumerate() {
            *out = ch.get(k, 0) + skip[k] * x.get(j, k);
        }
    }
    Ok(y)
}

/// Tape operation wrapping the two-pass scan: inputs `[u, Ā]`, output `H`.
///
/// Because `Ω(E_jk) = Ω(E_kj)`, the input gradient is the same scan applied
/// to the output gradient. For the factor on the edge `(s, Par(s))`:
/// `∂/∂Ā_s = ζᵍ_s ⊙ (H_p − Ā_s ζ_s) + (Hᵍ_p − Ā_s ζᵍ_s) ⊙ ζ_s`.
pub struct TreeScan {
    pub tree: Arc<SpanningTree>,
}

impl CustomBackward for TreeScan {
    fn name(&self) -> &'static str {
        "tree_scan"
    }

    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>> {
        let (u, abar) = (inputs[0], inputs[1]);
        let tree = &*self.tree;
        let (zeta, _) = gt_ssm_fast_with_subtree(tree, abar, u)?;
        let h = output;
        let (zeta_g, h_g) = gt_ssm_fast_with_subtree(tree, abar, grad)?;
        let mut g_abar = Matrix::zeros(abar.rows(), abar.cols());
        for s in 0..tree.len() {
            if tree.is_root(s) {
                continue;
            }
            let p = tree.parent(s);
            let out = g_abar.row_mut(s);
            for c in 0..out.len() {
                let a = abar.get(s, c);
                out[c] = zeta_g.get(s, c) * (h.get(p, c) - a * zeta.get(s, c))
                    + (h_g.get(p, c) - a * zeta_g.get(s, c)) * zeta.get(s, c);
            }
        }
        Ok(vec![h_g, g_abar])
    }
}

/// Records the scan `H = Σ_k Ω(E_jk) u_k` on the tape.
pub fn tree_scan<'t>(tree: Arc<SpanningTree>, u: Var<'t>, abar: Var<'t>) -> Result<Var<'t>> {
    let h = gt_ssm_fast(&tree, &abar.value(), &u.value())?;
    Ok(u.tape().custom(&[u, abar], h, Box::new(TreeScan { tree })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_difference;
    use crate::rng::{gaussian_matrix, stream};
    use crate::tensor::GradTape;
    use rand::Rng;

    fn random_tree(rng: &mut crate::rng::StreamRng, n: usize) -> SpanningTree {
        let parents = (0..n)
            .map(|i| if i == 0 { 0 } else { rng.random_range(0..i) })
            .collect();
        SpanningTree::from_parents(parents).unwrap()
    }

    #[test]
    fn discretize_zero_timescale_limit() {
        let a = [-1.0, -2.0, -0.5];
        let b = Matrix::filled(3, 4, 2.0);
        let (abar, bbar) = discretize(&a, 1e-9, &b).unwrap();
        assert!(abar.iter().all(|v| (v - 1.0).abs() <= 1e-8));
        assert!(bbar.frobenius_norm() <= 1e-8 * b.frobenius_norm());
    }

    #[test]
    fn discretize_closed_form() {
        let b = Matrix::row_vector(&[3.0, -1.0]);
        let (abar, bbar) = discretize(&[-1.0], 2f64.ln(), &b).unwrap();
        assert!((abar[0] - 0.5).abs() < 1e-15);
        assert!(bbar.max_abs_diff(&b.scale(0.5)).unwrap() < 1e-15);
        let again = discretize(&[-1.0], 2f64.ln(), &b).unwrap();
        assert_eq!(again.1, bbar);
    }

    #[test]
    fn discretize_rejects_bad_parameters() {
        let b = Matrix::zeros(1, 1);
        assert!(matches!(discretize(&[0.0], 1.0, &b), Err(HvplError::Parameterization(_))));
        assert!(matches!(discretize(&[-1.0], 0.0, &b), Err(HvplError::Parameterization(_))));
    }

    #[test]
    fn discretized_factors_lie_in_unit_interval() {
        let mut rng = stream(3, "disc");
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| -rng.random_range(0.01..10.0)).collect();
            let (abar, _) = discretize(&a, rng.random_range(1e-6..5.0), &Matrix::zeros(4, 1)).unwrap();
            assert!(abar.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn single_node_is_input() {
        let t = SpanningTree::single(1);
        let u = Matrix::row_vector(&[1.0, 2.0]);
        let a = Matrix::row_vector(&[0.3, 0.4]);
        assert_eq!(gt_ssm_bruteforce(&t, &a, &u).unwrap(), u);
        assert_eq!(gt_ssm_fast(&t, &a, &u).unwrap(), u);
    }

    #[test]
    fn two_and_three_node_expansions() {
        // Two nodes: root 0, child 1.
        let t = SpanningTree::from_parents(vec![0, 0]).unwrap();
        let u = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.25]]).unwrap();
        let expect = Matrix::from_rows(&[
            vec![1.0 + 0.5 * 3.0, 2.0 + 0.25 * 5.0],
            vec![0.5 * 1.0 + 3.0, 0.25 * 2.0 + 5.0],
        ])
        .unwrap();
        for h in [gt_ssm_bruteforce(&t, &a, &u).unwrap(), gt_ssm_fast(&t, &a, &u).unwrap()] {
            assert!(h.max_abs_diff(&expect).unwrap() < 1e-15);
        }

        // Chain r=0 → c=1 → g=2: H_g = Ā_g Ā_c u_r + Ā_g u_c + u_g.
        let t = SpanningTree::chain(3);
        let u = Matrix::column_vector(&[1.0, 10.0, 100.0]);
        let a = Matrix::column_vector(&[0.0, 0.5, 0.2]);
        let hg = 0.2 * 0.5 * 1.0 + 0.2 * 10.0 + 100.0;
        let hr = 1.0 + 0.5 * 10.0 + 0.5 * 0.2 * 100.0;
        for h in [gt_ssm_bruteforce(&t, &a, &u).unwrap(), gt_ssm_fast(&t, &a, &u).unwrap()] {
            assert!((h.get(2, 0) - hg).abs() < 1e-12);
            assert!((h.get(0, 0) - hr).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_matches_bruteforce_on_random_trees() {
        let mut rng = stream(4, "scan");
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let q = [1, 4, 16][rng.random_range(0..3)];
            let t = random_tree(&mut rng, n);
            let u = gaussian_matrix(&mut rng, n, q, 1.0);
            let a = Matrix::from_fn(n, q, |_, _| rng.random_range(0.0..1.0));
            let slow = gt_ssm_bruteforce(&t, &a, &u).unwrap();
            let fast = gt_ssm_fast(&t, &a, &u).unwrap();
            let rel = fast.sub(&slow).unwrap().frobenius_norm() / slow.frobenius_norm().max(1e-300);
            assert!(rel <= 1e-12, "rel {rel}");
        }
    }

    #[test]
    fn forest_components_do_not_interact() {
        let t = SpanningTree::from_parents(vec![0, 0, 2, 2]).unwrap();
        let u = Matrix::column_vector(&[1.0, 2.0, 3.0, 4.0]);
        let a = Matrix::filled(4, 1, 0.5);
        let h = gt_ssm_fast(&t, &a, &u).unwrap();
        assert_eq!(h, gt_ssm_bruteforce(&t, &a, &u).unwrap());
        assert_eq!(h.get(0, 0), 1.0 + 0.5 * 2.0);
        assert_eq!(h.get(2, 0), 3.0 + 0.5 * 4.0);
    }

    #[test]
    fn readout_skip_and_direct_multiply() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap();
        let h = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 1.0]]).unwrap();
        let zero_c = vec![Matrix::zeros(2, 3); 2];
        assert_eq!(ssm_output(&h, &zero_c, &[1.0, 1.0], &x).unwrap(), x);
        let c: Vec<Matrix> = (0..2)
            .map(|j| Matrix::from_fn(2, 3, |r, k| (j + r * 3 + k) as f64))
            .collect();
        let y = ssm_output(&h, &c, &[0.0, 0.0], &x).unwrap();
        for j in 0..2 {
            for r in 0..2 {
                let direct: f64 = (0..3).map(|k| c[j].get(r, k) * h.get(j, k)).sum();
                assert_eq!(y.get(j, r), direct);
            }
        }
    }

    #[test]
    fn tree_scan_gradient_matches_finite_differences() {
        let mut rng = stream(5, "scan-grad");
        for _ in 0..30 {
            let n = rng.random_range(1..12);
            let q = rng.random_range(1..4);
            let tree = Arc::new(random_tree(&mut rng, n));
            let u0 = gaussian_matrix(&mut rng, n, q, 1.0);
            let a0 = Matrix::from_fn(n, q, |_, _| rng.random_range(0.05..0.95));
            let w = gaussian_matrix(&mut rng, n, q, 1.0);
            let tape = GradTape::new();
            let u = tape.param("u", u0.clone()).unwrap();
            let a = tape.param("a", a0.clone()).unwrap();
            let h = tree_scan(tree.clone(), u, a).unwrap();
            let loss = h.mul(tape.constant(w.clone())).unwrap().sum();
            let g = tape.backward(loss).unwrap();
            let f = |u: &Matrix, a: &Matrix| gt_ssm_fast(&tree, a, u).unwrap().hadamard(&w).unwrap().sum();
            let fu = finite_difference(&u0, 1e-6, |x| f(x, &a0));
            let mut fa = finite_difference(&a0, 1e-6, |x| f(&u0, x));
            for r in tree.roots() {
                fa.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
            for (an, fd) in [(g.get("u").unwrap(), fu), (g.get("a").unwrap(), fa)] {
                let err = an.sub(&fd).unwrap().frobenius_norm();
                let scale = an.frobenius_norm().max(fd.frobenius_norm()).max(1e-12);
                assert!(err / scale < 1e-6, "rel {}", err / scale);
            }
        }
    }
}
