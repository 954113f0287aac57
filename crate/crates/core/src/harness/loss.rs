//! Set-prediction loss with Hungarian matching.
//!
//! Prompts are matched one-to-one to ground-truth instances by minimising
//!
//! ```text
//! cost(i, g) = 2·(−log p_i(c_g)) + 5·(1 − Dice(σ(m_i), y_g)) + 5·BCE(m_i, y_g)
//! ```
//!
//! where Dice uses +1 smoothing in numerator and denominator and BCE is the
//! mean over pixels. The loss is the summed cost of matched pairs plus
//! `−log p_i(no object)` for every unmatched prompt.

use crate::detector::SyntheticVideo;
use crate::error::{HvplError, Result};
use crate::tensor::{GradTape, Matrix, Var};

pub const CLASS_WEIGHT: f64 = 2.0;
pub const DICE_WEIGHT: f64 = 5.0;
pub const BCE_WEIGHT: f64 = 5.0;

/// One ground-truth instance: local class index and flat 0/1 mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub mask: Vec<f64>,
}

/// Targets of `video` with class ids made local to a task's head.
pub fn targets_for(video: &SyntheticVideo, class_offset: usize) -> Vec<Target> {
    video
        .instances
        .iter()
        .map(|inst| Target {
            class: inst.class_id - class_offset,
            mask: inst.flat_mask(),
        })
        .collect()
}

/// Minimum-cost assignment. Returns, for each row, the matched column.
///
/// With more rows than columns some rows stay unmatched; otherwise every
/// row receives a distinct column.
pub fn hungarian(cost: &Matrix) -> Result<Vec<Option<usize>>> {
    if !cost.is_finite() {
        return Err(HvplError::Numeric("non-finite matching cost".into()));
    }
    let (rows, cols) = cost.shape();
    if rows > cols {
        let by_col = hungarian(&cost.transpose())?;
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return Ok(out);
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    Ok(out)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(cls: &Matrix, masks: &Matrix, targets: &[Target]) -> Result<()> {
    if !cls.is_finite() || !masks.is_finite() {
        return Err(HvplError::Numeric("NaN or infinity in predictions".into()));
    }
    if cls.rows() != masks.rows() {
        return Err(HvplError::shape(
            "set_prediction_loss",
            format!("{} class rows vs {} mask rows", cls.rows(), masks.rows()),
        ));
    }
    for t in targets {
        if t.mask.len() != masks.cols() {
            return Err(HvplError::shape(
                "set_prediction_loss",
                format!("target mask of {} pixels vs {} predicted", t.mask.len(), masks.cols()),
            ));
        }
        if t.class + 1 >= cls.cols() {
            return Err(HvplError::shape(
                "set_prediction_loss",
                format!("class {} outside a head of {} real classes", t.class, cls.cols() - 1),
            ));
        }
    }
    Ok(())
}

/// Matching cost of every prompt (rows) against every target (columns).
pub fn cost_matrix(cls: &Matrix, masks: &Matrix, targets: &[Target]) -> Result<Matrix> {
    check_inputs(cls, masks, targets)?;
    let n = masks.cols() as f64;
    let mut cost = Matrix::zeros(cls.rows(), targets.len());
    for i in 0..cls.rows() {
        let row = cls.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let m = masks.row(i);
        for (g, t) in targets.iter().enumerate() {
            let (mut inter, mut s_sum, mut y_sum, mut bce) = (0.0, 0.0, 0.0, 0.0);
            for (&x, &y) in m.iter().zip(&t.mask) {
                let s = sigmoid(x);
                inter += s * y;
                s_sum += s;
                y_sum += y;
                bce += softplus(x) - x * y;
            }
            let dice = (2.0 * inter + 1.0) / (s_sum + y_sum + 1.0);
            let c = CLASS_WEIGHT * (lse - row[t.class]) + DICE_WEIGHT * (1.0 - dice) + BCE_WEIGHT * bce / n;
            cost.set(i, g, c);
        }
    }
    Ok(cost)
}

/// Loss of one video on the tape, and the prompt→target matching used.
///
/// `cls` is `L × (K+1)` logits with "no object" last, `masks` is
/// `L × pixels` logits.
pub fn set_prediction_loss<'t>(
    cls: Var<'t>,
    masks: Var<'t>,
    targets: &[Target],
) -> Result<(Var<'t>, Vec<Option<usize>>)> {
    let cost = cost_matrix(&cls.value(), &masks.value(), targets)?;
    let matching = hungarian(&cost)?;
    let tape = cls.tape();
    let (rows, k1) = cls.shape();
    let pixels = masks.shape().1 as f64;
    let logp = cls.log_softmax_rows();

    let mut picks = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    let mut mask_terms = Vec::new();
    for (i, m) in matching.iter().enumerate() {
        match m {
            Some(g) => {
                let t = &targets[*g];
                picks.push((i, t.class));
                weights.push(CLASS_WEIGHT);
                let logits = masks.slice_rows(i, 1)?;
                let y = tape.constant(Matrix::row_vector(&t.mask));
                let y_sum: f64 = t.mask.iter().sum();
                let s = logits.sigmoid();
                let inter = s.mul(y)?.sum().scale(2.0).add_scalar(1.0);
                let denom = s.sum().add_scalar(y_sum + 1.0);
                let dice = inter.div(denom)?;
                let bce = logits.softplus().sub(logits.mul(y)?)?.sum().scale(1.0 / pixels);
                mask_terms.push(dice.neg().add_scalar(1.0).scale(DICE_WEIGHT));
                mask_terms.push(bce.scale(BCE_WEIGHT));
            }
            None => {
                picks.push((i, k1 - 1));
                weights.push(1.0);
            }
        }
    }
    let mut loss = if picks.is_empty() {
        tape.constant(Matrix::zeros(1, 1))
    } else {
        let picked = logp.pick(&picks)?;
        let w = tape.constant(Matrix::row_vector(&weights));
        picked.mul(w)?.sum().neg()
    };
    for term in mask_terms {
        loss = loss.add(term)?;
    }
    if !loss.scalar().is_finite() {
        return Err(HvplError::Numeric("set-prediction loss is not finite".into()));
    }
    Ok((loss, matching))
}

/// Loss value without gradients.
pub fn loss_value(cls: &Matrix, masks: &Matrix, targets: &[Target]) -> Result<f64> {
    let tape = GradTape::new();
    let (loss, _) = set_prediction_loss(tape.constant(cls.clone()), tape.constant(masks.clone()), targets)?;
    let v = loss.scalar();
    Ok(v)
}
