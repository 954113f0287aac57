//! Video context decoder, task heads and prompt concatenation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, FrameContext};
use crate::error::{HvplError, Result};
use crate::gtssm::{GssVars, GssWeights};
use crate::rng::{gaussian_matrix, StreamRng};
use crate::tensor::{GradTape, Matrix, Tensor3, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    pub d: usize,
    pub heads: usize,
    pub state_dim: usize,
    pub phi: usize,
    pub gss_layers: usize,
    pub msa_layers: usize,
    pub gss_residual: bool,
    pub msa_layernorm: bool,
    pub disable_gtssm: bool,
    pub disable_video_prompt: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsaLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl MsaLayer {
    pub fn init(rng: &mut StreamRng, d: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut g = || gaussian_matrix(rng, d, d, std);
        MsaLayer {
            wq: g(),
            wk: g(),
            wv: g(),
            wo: g(),
            w1: g(),
            w2: g(),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 6] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("w1", &mut self.w1),
            ("w2", &mut self.w2),
        ]
    }
}

pub struct MsaVars<'t> {
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    w1: Var<'t>,
    w2: Var<'t>,
}

impl<'t> MsaVars<'t> {
    /// `MSA = P + Concat_h(Φ_h) W_o`, `F' = MSA + MLP(MSA)`.
    pub fn forward(&self, p: Var<'t>, f: Var<'t>, heads: usize, layernorm: bool) -> Result<Var<'t>> {
        let d = p.shape().1;
        if f.shape().1 != d || !d.is_multiple_of(heads) {
            return Err(HvplError::shape(
                "msa_layer",
                format!("prompt {:?}, features {:?}, {heads} heads", p.shape(), f.shape()),
            ));
        }
        let hd = d / heads;
        let q = p.matmul(self.wq)?;
        let k = f.matmul(self.wk)?;
        let v = f.matmul(self.wv)?;
        let mut phis = Vec::with_capacity(heads);
        for h in 0..heads {
            let scores = q
                .slice_cols(h * hd, hd)?
                .matmul_t(k.slice_cols(h * hd, hd)?)?
                .scale(1.0 / (hd as f64).sqrt())
                .softmax_rows();
            phis.push(scores.matmul(v.slice_cols(h * hd, hd)?)?);
        }
        let mut msa = p.add(Var::concat_cols(&phis)?.matmul(self.wo)?)?;
        if layernorm {
            msa = msa.layer_norm_rows(LN_EPS);
        }
        let mut out = msa.add(msa.matmul(self.w1)?.silu().matmul(self.w2)?)?;
        if layernorm {
            out = out.layer_norm_rows(LN_EPS);
        }
        Ok(out)
    }
}

/// Trainable GSS and MSA stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoDecoder {
    pub gss: Vec<GssWeights>,
    pub msa: Vec<MsaLayer>,
}

impl VideoDecoder {
    pub fn init(rng: &mut StreamRng, cfg: &VideoConfig) -> Self {
        VideoDecoder {
            gss: (0..cfg.gss_layers)
                .map(|_| GssWeights::init(rng, cfg.d, cfg.state_dim))
                .collect(),
            msa: (0..cfg.msa_layers).map(|_| MsaLayer::init(rng, cfg.d)).collect(),
        }
    }

    /// Every weight matrix with a stable dotted name.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, g) in self.gss.iter().enumerate() {
            out.extend(g.tensors().into_iter().map(|(n, m)| (format!("dec.gss{i}.{n}"), m)));
        }
        for (i, l) in self.msa.iter().enumerate() {
            out.extend(l.tensors().into_iter().map(|(n, m)| (format!("dec.msa{i}.{n}"), m)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, g) in self.gss.iter_mut().enumerate() {
            out.extend(g.tensors_mut().into_iter().map(|(n, m)| (format!("dec.gss{i}.{n}"), m)));
        }
        for (i, l) in self.msa.iter_mut().enumerate() {
            out.extend(l.tensors_mut().into_iter().map(|(n, m)| (format!("dec.msa{i}.{n}"), m)));
        }
        out
    }

    pub fn bind<'t>(&self, tape: &'t GradTape, trainable: bool) -> Result<DecoderVars<'t>> {
        let gss = self
            .gss
            .iter()
            .enumerate()
            .map(|(i, g)| g.bind(tape, &format!("dec.gss{i}"), trainable))
            .collect::<Result<Vec<_>>>()?;
        let mut msa = Vec::with_capacity(self.msa.len());
        for (i, l) in self.msa.iter().enumerate() {
            let mut vars = Vec::with_capacity(6);
            for (n, m) in l.tensors() {
                vars.push(tape.leaf(&format!("dec.msa{i}.{n}"), m, trainable)?);
            }
            let [wq, wk, wv, wo, w1, w2]: [Var<'t>; 6] = vars.try_into().expect("six tensors");
            msa.push(MsaVars {
                wq,
                wk,
                wv,
                wo,
                w1,
                w2,
            });
        }
        Ok(DecoderVars { gss, msa })
    }
}

pub struct DecoderVars<'t> {
    pub gss: Vec<GssVars<'t>>,
    pub msa: Vec<MsaVars<'t>>,
}

impl<'t> DecoderVars<'t> {
    /// Runs the GSS stack over `z` (frame-major `N_v × D`) and, unless
    /// video prompts are disabled, the MSA stack with `p_vid` as query.
    ///
    /// Without video prompts the output has one row per frame prompt
    /// position: the mean of that position over frames.
    pub fn decode(&self, z: Var<'t>, p_vid: Option<Var<'t>>, frames: usize, cfg: &VideoConfig) -> Result<Var<'t>> {
        let mut x = z;
        if !cfg.disable_gtssm {
            for layer in &self.gss {
                x = layer.forward(x, cfg.phi, cfg.gss_residual)?;
            }
        }
        match p_vid {
            Some(p) if !cfg.disable_video_prompt => {
                let mut f = x;
                for layer in &self.msa {
                    f = layer.forward(p, f, cfg.heads, cfg.msa_layernorm)?;
                }
                if self.msa.is_empty() {
                    f = p;
                }
                Ok(f)
            }
            _ => {
                let n = x.shape().0;
                if frames == 0 || !n.is_multiple_of(frames) {
                    return Err(HvplError::shape("decode_video", format!("{n} rows over {frames} frames")));
                }
                let l = n / frames;
                let avg = Matrix::from_fn(l, n, |r, c| if c % l == r { 1.0 / frames as f64 } else { 0.0 });
                x.tape().constant(avg).matmul(x)
            }
        }
    }
}

/// Classifier and mask heads of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHeads {
    pub task: usize,
    /// Global id of local class 0.
    pub class_offset: usize,
    pub num_classes: usize,
    /// `D × (K + 1)`, last column is "no object".
    pub gamma_c: Matrix,
    pub m1: Matrix,
    pub m2: Matrix,
}

impl TaskHeads {
    pub fn init(rng: &mut StreamRng, task: usize, class_offset: usize, num_classes: usize, d: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        TaskHeads {
            task,
            class_offset,
            num_classes,
            gamma_c: gaussian_matrix(rng, d, num_classes + 1, std),
            m1: gaussian_matrix(rng, d, d, std),
            m2: gaussian_matrix(rng, d, d, std),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 3] {
        [("gamma_c", &self.gamma_c), ("m1", &self.m1), ("m2", &self.m2)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 3] {
        [
            ("gamma_c", &mut self.gamma_c),
            ("m1", &mut self.m1),
            ("m2", &mut self.m2),
        ]
    }

    pub fn bind<'t>(&self, tape: &'t GradTape, prefix: &str, trainable: bool) -> Result<HeadVars<'t>> {
        Ok(HeadVars {
            gamma_c: tape.leaf(&format!("{prefix}.gamma_c"), &self.gamma_c, trainable)?,
            m1: tape.leaf(&format!("{prefix}.m1"), &self.m1, trainable)?,
            m2: tape.leaf(&format!("{prefix}.m2"), &self.m2, trainable)?,
        })
    }
}

pub struct HeadVars<'t> {
    pub gamma_c: Var<'t>,
    pub m1: Var<'t>,
    pub m2: Var<'t>,
}

impl<'t> HeadVars<'t> {
    pub fn class_logits(&self, f: Var<'t>) -> Result<Var<'t>> {
        f.matmul(self.gamma_c)
    }

    /// Mask embeddings `E_m = Γ_m(F)`.
    pub fn mask_embed(&self, f: Var<'t>) -> Result<Var<'t>> {
        f.matmul(self.m1)?.silu().matmul(self.m2)
    }
}

/// Mask logits `⟨F_out[f, pixel], E_m[p]⟩` laid out as
/// `L × (N_f · H · W)`, frame-major along the columns.
pub fn mask_logits<'t>(e_m: Var<'t>, f_out: &Tensor3) -> Result<Var<'t>> {
    let tape = e_m.tape();
    let frames = (0..f_out.dims().0)
        .map(|f| e_m.matmul_t(tape.constant(f_out.slice(f))))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_cols(&frames)
}

/// `softmax(F Γ_c)` without a tape.
pub fn classify(f_vid: &Matrix, gamma_c: &Matrix) -> Result<Matrix> {
    Ok(f_vid.matmul(gamma_c)?.softmax_rows())
}

/// Plain-matrix mask prediction, `L × (N_f·H·W)` logits.
pub fn predict_masks(f_vid: &Matrix, heads: &TaskHeads, f_out: &Tensor3) -> Result<Matrix> {
    let tape = GradTape::new();
    let hv = heads.bind(&tape, "head", false)?;
    let e = hv.mask_embed(tape.constant(f_vid.clone()))?;
    let m = mask_logits(e, f_out)?;
    let out = m.value().clone();
    Ok(out)
}

/// One task's prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrompts {
    pub task: usize,
    pub frm: Matrix,
    pub vid: Matrix,
}

/// Everything inference needs for tasks `1..=t`.
pub struct InferenceSet {
    pub p_frm: Matrix,
    pub p_vid: Matrix,
    /// For each task: heads and the rows of the decoder output they read.
    pub routes: Vec<(TaskHeads, Range<usize>)>,
}

/// Concatenates the prompts of tasks `1..=t` and assigns each task's heads
/// to the decoder output rows produced by its own prompts.
pub fn concat_for_inference(
    prompts: &[TaskPrompts],
    heads: &[TaskHeads],
    t: usize,
    cfg: &VideoConfig,
) -> Result<InferenceSet> {
    let mut frm = Vec::with_capacity(t);
    let mut vid = Vec::with_capacity(t);
    let mut routes = Vec::with_capacity(t);
    let mut row = 0;
    for task in 1..=t {
        let p = prompts
            .iter()
            .find(|p| p.task == task)
            .ok_or_else(|| HvplError::State(format!("no prompts stored for task {task}")))?;
        let h = heads
            .iter()
            .find(|h| h.task == task)
            .ok_or_else(|| HvplError::State(format!("no heads stored for task {task}")))?;
        let rows = if cfg.disable_video_prompt { p.frm.rows() } else { p.vid.rows() };
        routes.push((h.clone(), row..row + rows));
        row += rows;
        frm.push(&p.frm);
        vid.push(&p.vid);
    }
    Ok(InferenceSet {
        p_frm: Matrix::concat_rows(&frm)?,
        p_vid: Matrix::concat_rows(&vid)?,
        routes,
    })
}

/// Raw outputs of one prompt row.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptOutput {
    pub task: usize,
    pub prompt: usize,
    /// Softmax over the task's classes plus "no object" (last entry).
    pub probs: Vec<f64>,
    pub mask_logits: Vec<f64>,
    pub class_offset: usize,
}

impl PromptOutput {
    /// Best real class as `(global id, probability)`.
    pub fn best(&self) -> (usize, f64) {
        let k = self.probs.len() - 1;
        let (i, p) = self.probs[..k]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        (self.class_offset + i, p)
    }
}

/// Forward pass for one video on a tape, shared by training and inference.
///
/// Returns class logits and mask logits for each routed head.
#[allow(clippy::too_many_arguments)]
pub fn forward_video<'t>(
    det: &Detector,
    ctx: &FrameContext,
    f_out: &Tensor3,
    p_frm: Var<'t>,
    p_vid: Var<'t>,
    decoder: &DecoderVars<'t>,
    heads: &[(HeadVars<'t>, Range<usize>)],
    cfg: &VideoConfig,
) -> Result<Vec<(Var<'t>, Var<'t>)>> {
    let frames = det.decode_frames(p_frm, ctx)?;
    let z = Var::concat_rows(&frames)?;
    let f_vid = decoder.decode(z, Some(p_vid), frames.len(), cfg)?;
    heads
        .iter()
        .map(|(h, rows)| {
            let f = f_vid.slice_rows(rows.start, rows.len())?;
            Ok((h.class_logits(f)?, mask_logits(h.mask_embed(f)?, f_out)?))
        })
        .collect()
}

/// Inference for one video with the given prompt set.
pub fn infer_video(
    det: &Detector,
    ctx: &FrameContext,
    f_out: &Tensor3,
    set: &InferenceSet,
    decoder: &VideoDecoder,
    cfg: &VideoConfig,
) -> Result<Vec<PromptOutput>> {
    let tape = GradTape::new();
    let dec = decoder.bind(&tape, false)?;
    let heads = set
        .routes
        .iter()
        .map(|(h, r)| Ok((h.bind(&tape, &format!("head{}", h.task), false)?, r.clone())))
        .collect::<Result<Vec<_>>>()?;
    let outs = forward_video(
        det,
        ctx,
        f_out,
        tape.constant(set.p_frm.clone()),
        tape.constant(set.p_vid.clone()),
        &dec,
        &heads,
        cfg,
    )?;
    let mut preds = Vec::new();
    for ((head, _), (cls, masks)) in set.routes.iter().zip(outs) {
        let probs = cls.value().softmax_rows();
        let masks = masks.value();
        for r in 0..probs.rows() {
            preds.push(PromptOutput {
                task: head.task,
                prompt: r,
                probs: probs.row(r).to_vec(),
                mask_logits: masks.row(r).to_vec(),
                class_offset: head.class_offset,
            });
        }
    }
    Ok(preds)
}

/// `F_vid` for a given `Z_frm`, without a tape.
pub fn decode_video(z_frm: &Tensor3, p_vid: &Matrix, decoder: &VideoDecoder, cfg: &VideoConfig) -> Result<Matrix> {
    let tape = GradTape::new();
    let dec = decoder.bind(&tape, false)?;
    let z = tape.constant(z_frm.flatten_leading());
    let out = dec.decode(z, Some(tape.constant(p_vid.clone())), z_frm.dims().0, cfg)?;
    let v = out.value().clone();
    Ok(v)
}

/// `MSA(P, F) + MLP(MSA(P, F))` for a single layer, without a tape.
pub fn msa_layer(p: &Matrix, f: &Matrix, layer: &MsaLayer, heads: usize, layernorm: bool) -> Result<Matrix> {
    let tape = GradTape::new();
    let mut vars = Vec::new();
    for (_, m) in layer.tensors() {
        vars.push(tape.constant(m.clone()));
    }
    let [wq, wk, wv, wo, w1, w2]: [Var<'_>; 6] = vars.try_into().expect("six tensors");
    let l = MsaVars {
        wq,
        wk,
        wv,
        wo,
        w1,
        w2,
    };
    let out = l.forward(tape.constant(p.clone()), tape.constant(f.clone()), heads, layernorm)?;
    let v = out.value().clone();
    Ok(v)
}
