//! Graph-guided state-space layer.
//!
//! ```text
//! X      = SiLU(DWConv(Z W_r + b_r))
//! Z_left = SiLU(Z W_l + b_l)
//! out    = (LN(GT-SSM(X)) ⊙ Z_left) W_p        (+ Z when `residual`)
//! ```
//!
//! Inside GT-SSM the per-position parameters are projections of `X_j`:
//! `Δ_j = softplus(X_j w_Δ + b_Δ)`, `B_j = (X_j W_b) ⊗ r` and
//! `C_j = C₀ diag(X_j W_c)`. `A = −exp(a_log)` is shared by all positions
//! and `D` is a per-channel skip vector.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{gaussian_matrix, StreamRng};
use crate::tensor::{GradTape, Matrix, Var};

use super::graph::{boruvka_mst, build_knn_graph, SpanningTree};
use super::ssm::tree_scan;

pub const CONV_KERNEL: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GssWeights {
    pub w_r: Matrix,
    pub b_r: Matrix,
    pub conv: Matrix,
    pub conv_b: Matrix,
    pub w_l: Matrix,
    pub b_l: Matrix,
    pub w_delta: Matrix,
    pub b_delta: Matrix,
    pub a_log: Matrix,
    pub w_b: Matrix,
    pub r: Matrix,
    pub w_c: Matrix,
    pub c0: Matrix,
    pub skip: Matrix,
    pub w_p: Matrix,
}

impl GssWeights {
    /// Gaussian weights with std `1/√D`, `A = −diag(1..Q)`, unit skip.
    pub fn init(rng: &mut StreamRng, d: usize, q: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut g = |r, c| gaussian_matrix(rng, r, c, std);
        GssWeights {
            w_r: g(d, d),
            b_r: Matrix::zeros(1, d),
            conv: g(CONV_KERNEL, d),
            conv_b: Matrix::zeros(1, d),
            w_l: g(d, d),
            b_l: Matrix::zeros(1, d),
            w_delta: g(d, 1),
            b_delta: Matrix::zeros(1, 1),
            a_log: Matrix::from_fn(1, q, |_, k| ((k + 1) as f64).ln()),
            w_b: g(d, q),
            r: g(d, 1),
            w_c: g(d, q),
            c0: g(d, q),
            skip: Matrix::filled(1, d, 1.0),
            w_p: g(d, d),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 15] {
        [
            ("w_r", &self.w_r),
            ("b_r", &self.b_r),
            ("conv", &self.conv),
            ("conv_b", &self.conv_b),
            ("w_l", &self.w_l),
            ("b_l", &self.b_l),
            ("w_delta", &self.w_delta),
            ("b_delta", &self.b_delta),
            ("a_log", &self.a_log),
            ("w_b", &self.w_b),
            ("r", &self.r),
            ("w_c", &self.w_c),
            ("c0", &self.c0),
            ("skip", &self.skip),
            ("w_p", &self.w_p),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 15] {
        [
            ("w_r", &mut self.w_r),
            ("b_r", &mut self.b_r),
            ("conv", &mut self.conv),
            ("conv_b", &mut self.conv_b),
            ("w_l", &mut self.w_l),
            ("b_l", &mut self.b_l),
            ("w_delta", &mut self.w_delta),
            ("b_delta", &mut self.b_delta),
            ("a_log", &mut self.a_log),
            ("w_b", &mut self.w_b),
            ("r", &mut self.r),
            ("w_c", &mut self.w_c),
            ("c0", &mut self.c0),
            ("skip", &mut self.skip),
            ("w_p", &mut self.w_p),
        ]
    }

    /// Records the weights on `tape`, as parameters named `{prefix}.{field}`
    /// when `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t GradTape, prefix: &str, trainable: bool) -> Result<GssVars<'t>> {
        let mut vars = Vec::with_capacity(15);
        for (name, m) in self.tensors() {
            vars.push(tape.leaf(&format!("{prefix}.{name}"), m, trainable)?);
        }
        let v: [Var<'t>; 15] = vars.try_into().expect("fifteen tensors");
        let [w_r, b_r, conv, conv_b, w_l, b_l, w_delta, b_delta, a_log, w_b, r, w_c, c0, skip, w_p] = v;
        Ok(GssVars {
            w_r,
            b_r,
            conv,
            conv_b,
            w_l,
            b_l,
            w_delta,
            b_delta,
            a_log,
            w_b,
            r,
            w_c,
            c0,
            skip,
            w_p,
        })
    }

    /// Tape-free evaluation of one layer.
    pub fn apply(&self, z: &Matrix, phi: usize, residual: bool) -> Result<Matrix> {
        let tape = GradTape::new();
        let vars = self.bind(&tape, "gss", false)?;
        let out = vars.forward(tape.constant(z.clone()), phi, residual)?;
        let value = out.value().clone();
        Ok(value)
    }
}

/// [`GssWeights`] recorded on a tape.
pub struct GssVars<'t> {
    w_r: Var<'t>,
    b_r: Var<'t>,
    conv: Var<'t>,
    conv_b: Var<'t>,
    w_l: Var<'t>,
    b_l: Var<'t>,
    w_delta: Var<'t>,
    b_delta: Var<'t>,
    a_log: Var<'t>,
    w_b: Var<'t>,
    r: Var<'t>,
    w_c: Var<'t>,
    c0: Var<'t>,
    skip: Var<'t>,
    w_p: Var<'t>,
}

/// Spanning tree over the rows of `x` from its φ-NN cosine graph.
pub fn similarity_tree(x: &Matrix, phi: usize) -> Result<SpanningTree> {
    let n = x.rows();
    if n <= 1 {
        return Ok(SpanningTree::single(n));
    }
    let graph = build_knn_graph(x, phi.clamp(1, n - 1))?;
    boruvka_mst(&graph)
}

impl<'t> GssVars<'t> {
    pub fn forward(&self, z: Var<'t>, phi: usize, residual: bool) -> Result<Var<'t>> {
        let x = z
            .matmul(self.w_r)?
            .add_row(self.b_r)?
            .depthwise_conv1d(self.conv)?
            .add_row(self.conv_b)?
            .silu();
        let left = z.matmul(self.w_l)?.add_row(self.b_l)?.silu();
        let y = self.ssm(x, phi)?;
        let mut out = y.layer_norm_rows(LN_EPS).mul(left)?.matmul(self.w_p)?;
        if residual {
            out = out.add(z)?;
        }
        Ok(out)
    }

    /// `Y = GT-SSM(X)` with the tree taken from the current value of `x`.
    pub fn ssm(&self, x: Var<'t>, phi: usize) -> Result<Var<'t>> {
        let tree = Arc::new(similarity_tree(&x.value(), phi)?);
        let delta = x.matmul(self.w_delta)?.add_row(self.b_delta)?.softplus();
        let a = self.a_log.exp().neg();
        let inv_a = self.a_log.neg().exp().neg();
        let abar = delta.matmul(a)?.exp();
        let bx = x.matmul(self.w_b)?.mul_col(x.matmul(self.r)?)?;
        let u = abar.add_scalar(-1.0).mul_row(inv_a)?.mul(bx)?;
        let h = tree_scan(tree, u, abar)?;
        let c = x.matmul(self.w_c)?;
        c.mul(h)?.matmul_t(self.c0)?.add(x.mul_row(self.skip)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gtssm::ssm::{discretize, gt_ssm_bruteforce, ssm_output};
    use crate::oracle::finite_difference;
    use crate::rng::stream;

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    fn softplus(v: f64) -> f64 {
        if v > 30.0 {
            v
        } else {
            v.exp().ln_1p()
        }
    }

    fn layer(seed: u64, d: usize, q: usize) -> GssWeights {
        let mut w = GssWeights::init(&mut stream(seed, "gss-test"), d, q);
        let mut rng = stream(seed, "gss-test-bias");
        w.b_r = gaussian_matrix(&mut rng, 1, d, 0.3);
        w.b_l = gaussian_matrix(&mut rng, 1, d, 0.3);
        w.conv_b = gaussian_matrix(&mut rng, 1, d, 0.3);
        w
    }

    /// Straight-line composition of the named sub-operations.
    fn reference(w: &GssWeights, z: &Matrix, phi: usize) -> Matrix {
        let d = z.cols();
        let pre = z.matmul(&w.w_r).unwrap();
        let n = pre.rows();
        let mut conv = Matrix::zeros(n, d);
        for i in 0..n {
            for m in 0..CONV_KERNEL {
                let src = i as isize + m as isize - ((CONV_KERNEL - 1) / 2) as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                for c in 0..d {
                    let v = pre.get(src as usize, c) + w.b_r.get(0, c);
                    conv.set(i, c, conv.get(i, c) + v * w.conv.get(m, c));
                }
            }
        }
        let x = Matrix::from_fn(n, d, |i, c| silu(conv.get(i, c) + w.conv_b.get(0, c)));
        let zl = z.matmul(&w.w_l).unwrap();
        let left = Matrix::from_fn(n, d, |i, c| silu(zl.get(i, c) + w.b_l.get(0, c)));

        let tree = similarity_tree(&x, phi).unwrap();
        let a: Vec<f64> = w.a_log.data().iter().map(|v| -v.exp()).collect();
        let q = a.len();
        let mut abar = Matrix::zeros(n, q);
        let mut u = Matrix::zeros(n, q);
        let mut cs = Vec::new();
        for j in 0..n {
            let xj = Matrix::row_vector(x.row(j));
            let delta = softplus(xj.matmul(&w.w_delta).unwrap().get(0, 0) + w.b_delta.get(0, 0));
            let bvec = xj.matmul(&w.w_b).unwrap();
            let b = Matrix::from_fn(q, d, |k, c| bvec.get(0, k) * w.r.get(c, 0));
            let (ab, bbar) = discretize(&a, delta, &b).unwrap();
            abar.row_mut(j).copy_from_slice(&ab);
            let bx = bbar.matmul(&xj.transpose()).unwrap();
            for k in 0..q {
                u.set(j, k, bx.get(k, 0));
            }
            let cvec = xj.matmul(&w.w_c).unwrap();
            cs.push(Matrix::from_fn(d, q, |r, k| w.c0.get(r, k) * cvec.get(0, k)));
        }
        let h = gt_ssm_bruteforce(&tree, &abar, &u).unwrap();
        let y = ssm_output(&h, &cs, w.skip.data(), &x).unwrap();
        y.layer_norm_rows(LN_EPS).hadamard(&left).unwrap().matmul(&w.w_p).unwrap()
    }

    #[test]
    fn matches_compositional_reference() {
        let mut rng = stream(11, "gss-input");
        for (n, d, q) in [(1, 4, 2), (6, 8, 4), (24, 16, 8)] {
            let w = layer(n as u64, d, q);
            let z = gaussian_matrix(&mut rng, n, d, 1.0);
            let fast = w.apply(&z, 3, false).unwrap();
            let slow = reference(&w, &z, 3);
            let err = fast.max_abs_diff(&slow).unwrap();
            assert!(err <= 1e-9 * (1.0 + slow.max_abs()), "n={n} err {err}");
        }
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut w = layer(1, 8, 4);
        w.w_p = Matrix::zeros(8, 8);
        let z = gaussian_matrix(&mut stream(2, "z"), 10, 8, 1.0);
        assert_eq!(w.apply(&z, 2, false).unwrap(), Matrix::zeros(10, 8));
    }

    #[test]
    fn unit_gate_leaves_projected_normalised_ssm() {
        // Solve silu(b) = 1 so that the left branch is exactly ones.
        let mut b: f64 = 1.3;
        for _ in 0..50 {
            let s = 1.0 / (1.0 + (-b).exp());
            let f = b * s - 1.0;
            let df = s + b * s * (1.0 - s);
            b -= f / df;
        }
        let mut w = layer(3, 8, 4);
        w.w_l = Matrix::zeros(8, 8);
        w.b_l = Matrix::filled(1, 8, b);
        let z = gaussian_matrix(&mut stream(4, "z"), 12, 8, 1.0);

        let tape = GradTape::new();
        let vars = w.bind(&tape, "g", false).unwrap();
        let zc = tape.constant(z.clone());
        let x = zc
            .matmul(vars.w_r)
            .unwrap()
            .add_row(vars.b_r)
            .unwrap()
            .depthwise_conv1d(vars.conv)
            .unwrap()
            .add_row(vars.conv_b)
            .unwrap()
            .silu();
        let y = vars.ssm(x, 2).unwrap().value().layer_norm_rows(LN_EPS);
        let expect = y.matmul(&w.w_p).unwrap();
        let got = w.apply(&z, 2, false).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn residual_flag_adds_input() {
        let w = layer(5, 8, 4);
        let z = gaussian_matrix(&mut stream(6, "z"), 9, 8, 1.0);
        let plain = w.apply(&z, 2, false).unwrap();
        let res = w.apply(&z, 2, true).unwrap();
        assert!(res.sub(&z).unwrap().max_abs_diff(&plain).unwrap() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (n, d, q) = (8, 6, 3);
        let w = layer(7, d, q);
        let z0 = gaussian_matrix(&mut stream(8, "z"), n, d, 1.0);
        let probe = gaussian_matrix(&mut stream(9, "probe"), n, d, 1.0);
        let tape = GradTape::new();
        let vars = w.bind(&tape, "g", true).unwrap();
        let z = tape.param("z", z0.clone()).unwrap();
        let out = vars.forward(z, 3, false).unwrap();
        let loss = out.mul(tape.constant(probe.clone())).unwrap().sum();
        let grads = tape.backward(loss).unwrap();

        let check = |an: &Matrix, fd: &Matrix, what: &str| {
            let err = an.sub(fd).unwrap().frobenius_norm();
            let scale = an.frobenius_norm().max(fd.frobenius_norm()).max(1e-12);
            assert!(err / scale < 1e-5, "{what}: rel {}", err / scale);
        };
        let loss_of = |w: &GssWeights, z: &Matrix| {
            w.apply(z, 3, false).unwrap().hadamard(&probe).unwrap().sum()
        };
        check(grads.get("z").unwrap(), &finite_difference(&z0, 1e-6, |z| loss_of(&w, z)), "z");
        for name in ["a_log", "w_delta", "w_b", "r", "c0", "conv", "w_p"] {
            let base = w.tensors().iter().find(|(n, _)| *n == name).unwrap().1.clone();
            let fd = finite_difference(&base, 1e-6, |m| {
                let mut w2 = w.clone();
                for (n, slot) in w2.tensors_mut() {
                    if n == name {
                        *slot = m.clone();
                    }
                }
                loss_of(&w2, &z0)
            });
            check(grads.get(&format!("g.{name}")).unwrap(), &fd, name);
        }
    }
}
