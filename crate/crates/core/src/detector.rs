//! Frozen frame-level detector.
//!
//! Pixels are rendered from class prototypes passed through a frozen mixing
//! matrix plus Gaussian noise; those per-pixel embeddings play the role of the
//! pixel decoder output. A frozen cross-attention decoder then turns a frame
//! prompt into per-frame prompt features.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HvplError, Result};
use crate::rng::{gaussian_matrix, stream, StreamRng};
use crate::tensor::{GradTape, Matrix, Tensor3, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub scales: usize,
    pub noise_std: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            d: 64,
            heads: 4,
            layers: 3,
            frames: 4,
            height: 32,
            width: 32,
            scales: 2,
            noise_std: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HvplError::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("D = {} is not divisible into {} heads", self.d, self.heads));
        }
        if self.frames == 0 || self.scales == 0 {
            return bad("need at least one frame and one scale".into());
        }
        let f = 1usize << self.scales;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) || self.height < f || self.width < f {
            return bad(format!(
                "{}x{} grid cannot be pooled {} times",
                self.height, self.width, self.scales
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise std {}", self.noise_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// One object track: a class id and a binary mask per frame (row-major H·W).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    pub masks: Vec<Vec<bool>>,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|b| **b).count()).sum()
    }

    /// All frames' masks concatenated as 0/1 values.
    pub fn flat_mask(&self) -> Vec<f64> {
        self.masks
            .iter()
            .flat_map(|m| m.iter().map(|b| if *b { 1.0 } else { 0.0 }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub id: String,
    pub task: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

/// Per-frame pixel embeddings at full resolution and at each pooled scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    /// `N_f × (H_s·W_s) × D` for scale `s = 1..=S` (factor `2^s`).
    pub scales: Vec<Tensor3>,
    /// `N_f × (H·W) × D`.
    pub f_out: Tensor3,
}

impl FrameFeatures {
    pub fn first_scale(&self, frame: usize) -> Matrix {
        self.scales[0].slice(frame)
    }
}

/// Raw class and background prototypes, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub classes: Matrix,
    pub background: Matrix,
}

impl PrototypeBank {
    pub fn new(seed: u64, num_classes: usize, d: usize) -> Self {
        let mut rng = stream(seed, "data.prototypes");
        let classes = gaussian_matrix(&mut rng, num_classes, d, 1.0);
        let background = gaussian_matrix(&mut rng, 1, d, 1.0);
        PrototypeBank { classes, background }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Layer `ℓ`: `P ← P + Concat_h(softmax(P W_q^h (F W_k^h)ᵀ/√d) F W_v^h) W_o`,
/// then `P ← P + W₂ SiLU(W₁ P)`. Head `h` owns columns `h·d .. (h+1)·d` of
/// `W_q`, `W_k`, `W_v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenDecoder {
    pub heads: usize,
    pub layers: Vec<DecoderLayer>,
}

/// Keys and values of one video, per frame, layer and head.
pub struct FrameContext {
    frames: Vec<Vec<Vec<(Matrix, Matrix)>>>,
}

impl FrameContext {
    pub fn frames(&self) -> usize {
        self.frames.len()
    }
}

pub struct Detector {
    pub config: DetectorConfig,
    pub decoder: FrozenDecoder,
    pub mix: Matrix,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = stream(seed, "detector.weights");
        let layers = (0..config.layers)
            .map(|_| DecoderLayer {
                wq: gaussian_matrix(&mut rng, d, d, std),
                wk: gaussian_matrix(&mut rng, d, d, std),
                wv: gaussian_matrix(&mut rng, d, d, std),
                wo: gaussian_matrix(&mut rng, d, d, std),
                w1: gaussian_matrix(&mut rng, d, d, std),
                w2: gaussian_matrix(&mut rng, d, d, std),
            })
            .collect();
        let mix = gaussian_matrix(&mut stream(seed, "detector.mix"), d, d, std);
        Ok(Detector {
            decoder: FrozenDecoder {
                heads: config.heads,
                layers,
            },
            config,
            mix,
        })
    }

    /// Prototype rows after the frozen mixing matrix.
    pub fn mixed(&self, bank: &PrototypeBank) -> Result<(Matrix, Matrix)> {
        Ok((bank.classes.matmul(&self.mix)?, bank.background.matmul(&self.mix)?))
    }

    /// Samples a layout over `labels` and renders it.
    ///
    /// Between one and `max_instances` moving rectangles are drawn with
    /// distinct classes; `primary`, when given, is always among them.
    #[allow(clippy::too_many_arguments)]
    pub fn synth_video(
        &self,
        id: String,
        task: usize,
        labels: &[usize],
        primary: Option<usize>,
        max_instances: usize,
        bank: &PrototypeBank,
        rng: &mut StreamRng,
    ) -> Result<(SyntheticVideo, FrameFeatures)> {
        if labels.is_empty() {
            return Err(HvplError::Usage("synthetic video needs at least one label".into()));
        }
        let video = self.sample_layout(id, task, labels, primary, max_instances, rng);
        let feats = self.render(&video, bank, self.config.noise_std, rng)?;
        Ok((video, feats))
    }

    /// Samples only the layout; consumes the same draws as the first part
    /// of [`Detector::synth_video`].
    pub fn sample_layout(
        &self,
        id: String,
        task: usize,
        labels: &[usize],
        primary: Option<usize>,
        max_instances: usize,
        rng: &mut StreamRng,
    ) -> SyntheticVideo {
        let c = &self.config;
        let (h, w) = (c.height, c.width);
        let count = rng.random_range(1..=max_instances.clamp(1, labels.len()));
        let mut pool: Vec<usize> = labels.to_vec();
        let mut classes = Vec::with_capacity(count);
        if let Some(p) = primary.filter(|p| labels.contains(p)) {
            pool.retain(|l| *l != p);
            classes.push(p);
        }
        while classes.len() < count {
            classes.push(pool.swap_remove(rng.random_range(0..pool.len())));
        }

        struct Track {
            class_id: usize,
            rh: usize,
            rw: usize,
            y0: i64,
            x0: i64,
            vy: i64,
            vx: i64,
        }
        let mut tracks: Vec<Track> = classes
            .into_iter()
            .map(|class_id| {
                let rh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
                let rw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
                Track {
                    class_id,
                    rh,
                    rw,
                    y0: rng.random_range(0..=(h - rh)) as i64,
                    x0: rng.random_range(0..=(w - rw)) as i64,
                    vy: rng.random_range(-2..=2),
                    vx: rng.random_range(-2..=2),
                }
            })
            .collect();
        // Larger tracks are painted first so smaller ones stay visible.
        tracks.sort_by_key(|t| std::cmp::Reverse(t.rh * t.rw));

        let mut owner = vec![vec![usize::MAX; h * w]; c.frames];
        for (ti, t) in tracks.iter().enumerate() {
            for (f, own) in owner.iter_mut().enumerate() {
                let y = (t.y0 + t.vy * f as i64).clamp(0, (h - t.rh) as i64) as usize;
                let x = (t.x0 + t.vx * f as i64).clamp(0, (w - t.rw) as i64) as usize;
                for r in y..y + t.rh {
                    own[r * w + x..r * w + x + t.rw].fill(ti);
                }
            }
        }
        let instances = tracks
            .iter()
            .enumerate()
            .map(|(ti, t)| Instance {
                class_id: t.class_id,
                masks: owner.iter().map(|o| o.iter().map(|v| *v == ti).collect()).collect(),
            })
            .filter(|inst| inst.area() > 0)
            .collect();
        SyntheticVideo {
            id,
            task,
            frames: c.frames,
            height: h,
            width: w,
            instances,
        }
    }

    /// Pixel embeddings for a given layout: the mixed prototype of the
    /// owning instance (or the background) plus `N(0, noise_std²)` noise.
    pub fn render(
        &self,
        video: &SyntheticVideo,
        bank: &PrototypeBank,
        noise_std: f64,
        rng: &mut StreamRng,
    ) -> Result<FrameFeatures> {
        let c = &self.config;
        let (d, hw) = (c.d, c.pixels());
        if video.height * video.width != hw || video.frames != c.frames {
            return Err(HvplError::shape("render", "video layout does not match detector grid"));
        }
        let (mixed, bg) = self.mixed(bank)?;
        let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
        let mut f_out = Tensor3::zeros(c.frames, hw, d);
        let data = f_out.data_mut();
        for f in 0..c.frames {
            for p in 0..hw {
                let src = video
                    .instances
                    .iter()
                    .find(|i| i.masks[f][p])
                    .map(|i| mixed.row(i.class_id))
                    .unwrap_or(bg.row(0));
                let dst = &mut data[(f * hw + p) * d..(f * hw + p + 1) * d];
                dst.copy_from_slice(src);
                if noise_std > 0.0 {
                    for v in dst.iter_mut() {
                        *v += noise.sample(rng);
                    }
                }
            }
        }
        let scales = (1..=c.scales)
            .map(|s| pool(&f_out, c.height, c.width, 1 << s))
            .collect();
        Ok(FrameFeatures { scales, f_out })
    }

    /// Keys and values of every frozen layer and head over the first scale.
    pub fn context(&self, feats: &FrameFeatures) -> Result<FrameContext> {
        let hd = self.config.head_dim();
        let frames = (0..feats.scales[0].dims().0)
            .map(|f| {
                let x = feats.first_scale(f);
                self.decoder
                    .layers
                    .iter()
                    .map(|l| {
                        let k = x.matmul(&l.wk)?;
                        let v = x.matmul(&l.wv)?;
                        (0..self.decoder.heads)
                            .map(|h| Ok((k.slice_cols(h * hd, hd)?, v.slice_cols(h * hd, hd)?)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameContext { frames })
    }

    /// `σ(P W_q^h (F W_k^h)ᵀ / √d)` for one layer and head.
    pub fn cross_attention_scores(&self, p: &Matrix, f: &Matrix, layer: usize, head: usize) -> Result<Matrix> {
        let l = self
            .decoder
            .layers
            .get(layer)
            .ok_or_else(|| HvplError::Usage(format!("no decoder layer {layer}")))?;
        if head >= self.decoder.heads {
            return Err(HvplError::Usage(format!("no head {head}")));
        }
        let hd = self.config.head_dim();
        let q = p.matmul(&l.wq.slice_cols(head * hd, hd)?)?;
        let k = f.matmul(&l.wk.slice_cols(head * hd, hd)?)?;
        Ok(q.matmul_t(&k)?.scale(1.0 / (hd as f64).sqrt()).softmax_rows())
    }

    /// One frame through the frozen decoder, optionally recording the
    /// attention map of every layer and head.
    pub fn decode_frame<'t>(
        &self,
        p: Var<'t>,
        ctx: &FrameContext,
        frame: usize,
        mut maps: Option<&mut Vec<Matrix>>,
    ) -> Result<Var<'t>> {
        let tape = p.tape();
        let hd = self.config.head_dim();
        let inv = 1.0 / (hd as f64).sqrt();
        let mut x = p;
        for (l, kv) in self.decoder.layers.iter().zip(&ctx.frames[frame]) {
            let q = x.matmul(tape.constant(l.wq.clone()))?;
            let mut outs = Vec::with_capacity(kv.len());
            for (h, (k, v)) in kv.iter().enumerate() {
                let scores = q
                    .slice_cols(h * hd, hd)?
                    .matmul_t(tape.constant(k.clone()))?
                    .scale(inv)
                    .softmax_rows();
                if let Some(m) = maps.as_deref_mut() {
                    m.push(scores.value().clone());
                }
                outs.push(scores.matmul(tape.constant(v.clone()))?);
            }
            x = x.add(Var::concat_cols(&outs)?.matmul(tape.constant(l.wo.clone()))?)?;
            let mlp = x
                .matmul(tape.constant(l.w1.clone()))?
                .silu()
                .matmul(tape.constant(l.w2.clone()))?;
            x = x.add(mlp)?;
        }
        Ok(x)
    }

    /// Frame prompt features of every frame, `N_f × L × D`.
    pub fn decode_frames<'t>(&self, p: Var<'t>, ctx: &FrameContext) -> Result<Vec<Var<'t>>> {
        if p.shape().1 != self.config.d {
            return Err(HvplError::shape(
                "transformer_decode",
                format!("prompt has {} columns, D = {}", p.shape().1, self.config.d),
            ));
        }
        (0..ctx.frames()).map(|f| self.decode_frame(p, ctx, f, None)).collect()
    }

    pub fn transformer_decode(&self, p: &Matrix, feats: &FrameFeatures) -> Result<Tensor3> {
        let ctx = self.context(feats)?;
        self.transformer_decode_ctx(p, &ctx)
    }

    pub fn transformer_decode_ctx(&self, p: &Matrix, ctx: &FrameContext) -> Result<Tensor3> {
        let tape = GradTape::new();
        let frames = self.decode_frames(tape.constant(p.clone()), ctx)?;
        let slices: Vec<Matrix> = frames.iter().map(|v| v.value().clone()).collect();
        Tensor3::from_slices(&slices)
    }
}

fn pool(full: &Tensor3, h: usize, w: usize, factor: usize) -> Tensor3 {
    let (frames, _, d) = full.dims();
    let (hs, ws) = (h / factor, w / factor);
    let mut out = Tensor3::zeros(frames, hs * ws, d);
    let norm = 1.0 / (factor * factor) as f64;
    let src = full.data();
    let dst = out.data_mut();
    for f in 0..frames {
        for y in 0..hs {
            for x in 0..ws {
                let o = (f * hs * ws + y * ws + x) * d;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let i = (f * h * w + (y * factor + dy) * w + x * factor + dx) * d;
                        for c in 0..d {
                            dst[o + c] += src[i + c];
                        }
                    }
                }
                for v in &mut dst[o..o + d] {
                    *v *= norm;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::attention_scores_reference;

    fn small() -> DetectorConfig {
        DetectorConfig {
            d: 16,
            heads: 2,
            layers: 2,
            frames: 3,
            height: 8,
            width: 8,
            scales: 2,
            noise_std: 0.1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig::default().validate().is_ok());
        let mut c = small();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(HvplError::Config(_))));
        let mut c = small();
        c.height = 6;
        assert!(c.validate().is_err());
        let paper = DetectorConfig {
            d: 256,
            heads: 8,
            layers: 9,
            ..DetectorConfig::default()
        };
        assert!(paper.validate().is_ok());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let det = Detector::new(small(), 42).unwrap();
        let bank = PrototypeBank::new(42, 5, 16);
        let make = || {
            let mut rng = stream(42, "v");
            det.synth_video("v".into(), 1, &[0, 1, 2], None, 3, &bank, &mut rng).unwrap()
        };
        let (v1, f1) = make();
        let (v2, f2) = make();
        assert_eq!(v1, v2);
        assert!(f1.f_out.bitwise_eq(&f2.f_out));
        assert!(f1.scales.iter().zip(&f2.scales).all(|(a, b)| a.bitwise_eq(b)));
    }

    #[test]
    fn empty_label_set_is_rejected() {
        let det = Detector::new(small(), 1).unwrap();
        let bank = PrototypeBank::new(1, 2, 16);
        let r = det.synth_video("v".into(), 1, &[], None, 2, &bank, &mut stream(1, "v"));
        assert!(matches!(r, Err(HvplError::Usage(_))));
    }

    #[test]
    fn noiseless_full_cover_renders_mixed_prototype() {
        let det = Detector::new(small(), 3).unwrap();
        let bank = PrototypeBank::new(3, 4, 16);
        let video = SyntheticVideo {
            id: "full".into(),
            task: 1,
            frames: 3,
            height: 8,
            width: 8,
            instances: vec![Instance {
                class_id: 2,
                masks: vec![vec![true; 64]; 3],
            }],
        };
        let feats = det.render(&video, &bank, 0.0, &mut stream(0, "n")).unwrap();
        let proto = bank.classes.slice_rows(2, 1).unwrap().matmul(&det.mix).unwrap();
        for f in 0..3 {
            let frame = feats.f_out.slice(f);
            for p in 0..64 {
                assert_eq!(frame.row(p), proto.row(0));
            }
        }
        // Pooling a constant field leaves it unchanged up to rounding.
        let s1 = feats.first_scale(0);
        assert_eq!(s1.rows(), 16);
        assert!(s1.slice_rows(0, 1).unwrap().max_abs_diff(&proto).unwrap() < 1e-12);
    }

    #[test]
    fn instances_are_separable_in_embedding_space() {
        let det = Detector::new(small(), 5).unwrap();
        let bank = PrototypeBank::new(5, 4, 16);
        let mut tried = 0;
        for i in 0..50 {
            let mut rng = stream(5, &format!("v{i}"));
            let (v, f) = det.synth_video("v".into(), 1, &[0, 1, 2, 3], None, 2, &bank, &mut rng).unwrap();
            if v.instances.len() < 2 {
                continue;
            }
            tried += 1;
            let frame = f.f_out.slice(0);
            let pix = |inst: &Instance| -> Vec<usize> { (0..64).filter(|p| inst.masks[0][*p]).collect() };
            let (a, b) = (pix(&v.instances[0]), pix(&v.instances[1]));
            if a.len() < 2 || b.len() < 2 {
                continue;
            }
            let dist = |p: usize, q: usize| {
                frame.row(p).iter().zip(frame.row(q)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            };
            let mean = |pairs: Vec<(usize, usize)>| {
                let n = pairs.len() as f64;
                pairs.into_iter().map(|(p, q)| dist(p, q)).sum::<f64>() / n
            };
            let within: Vec<_> = a.iter().flat_map(|p| a.iter().filter(move |q| *q != p).map(move |q| (*p, *q))).collect();
            let cross: Vec<_> = a.iter().flat_map(|p| b.iter().map(move |q| (*p, *q))).collect();
            assert!(mean(within) < mean(cross));
        }
        assert!(tried > 0);
    }

    #[test]
    fn masks_are_linked_across_frames_and_cover_grid() {
        let det = Detector::new(DetectorConfig::default(), 9).unwrap();
        let bank = PrototypeBank::new(9, 6, 64);
        for i in 0..20 {
            let mut rng = stream(9, &format!("m{i}"));
            let (v, _) = det.synth_video(format!("m{i}"), 1, &[0, 1, 2, 3], Some(3), 3, &bank, &mut rng).unwrap();
            assert!(v.instances.iter().any(|inst| inst.class_id == 3));
            let mut classes: Vec<usize> = v.instances.iter().map(|i| i.class_id).collect();
            classes.sort();
            classes.dedup();
            assert_eq!(classes.len(), v.instances.len());
            for inst in &v.instances {
                assert_eq!(inst.masks.len(), 4);
                assert!(inst.masks.iter().all(|m| m.len() == 1024));
                assert!(inst.area() > 0);
            }
        }
    }

    #[test]
    fn single_key_gives_unit_scores() {
        let det = Detector::new(small(), 7).unwrap();
        let mut rng = stream(7, "p");
        let p = gaussian_matrix(&mut rng, 5, 16, 1.0);
        let f = gaussian_matrix(&mut rng, 1, 16, 1.0);
        let s = det.cross_attention_scores(&p, &f, 0, 1).unwrap();
        assert_eq!(s, Matrix::filled(5, 1, 1.0));
    }

    #[test]
    fn identical_prompts_give_identical_rows() {
        let det = Detector::new(small(), 7).unwrap();
        let mut rng = stream(8, "p");
        let row = gaussian_matrix(&mut rng, 1, 16, 1.0);
        let p = Matrix::concat_rows(&[&row, &row]).unwrap();
        let f = gaussian_matrix(&mut rng, 9, 16, 1.0);
        let s = det.cross_attention_scores(&p, &f, 1, 0).unwrap();
        assert_eq!(s.row(0), s.row(1));
    }

    #[test]
    fn scores_match_reference() {
        let det = Detector::new(DetectorConfig::default(), 11).unwrap();
        let mut rng = stream(11, "p");
        let p = gaussian_matrix(&mut rng, 4, 64, 1.0);
        let f = gaussian_matrix(&mut rng, 16, 64, 1.0);
        for head in 0..4 {
            let l = &det.decoder.layers[2];
            let wq = l.wq.slice_cols(head * 16, 16).unwrap();
            let wk = l.wk.slice_cols(head * 16, 16).unwrap();
            let expect = attention_scores_reference(&p, &f, &wq, &wk);
            let got = det.cross_attention_scores(&p, &f, 2, head).unwrap();
            assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn empty_decoder_broadcasts_prompt() {
        let cfg = DetectorConfig { layers: 0, ..small() };
        let det = Detector::new(cfg, 1).unwrap();
        let bank = PrototypeBank::new(1, 3, 16);
        let (_, feats) = det
            .synth_video("v".into(), 1, &[0], None, 1, &bank, &mut stream(1, "v"))
            .unwrap();
        let p = gaussian_matrix(&mut stream(2, "p"), 3, 16, 1.0);
        let z = det.transformer_decode(&p, &feats).unwrap();
        for f in 0..3 {
            assert!(z.slice(f).bitwise_eq(&p));
        }
    }

    #[test]
    fn decoder_is_deterministic_and_non_degenerate() {
        let det = Detector::new(small(), 4).unwrap();
        let bank = PrototypeBank::new(4, 3, 16);
        let (_, feats) = det
            .synth_video("v".into(), 1, &[0, 1], None, 2, &bank, &mut stream(4, "v"))
            .unwrap();
        let mut rng = stream(4, "p");
        let p1 = gaussian_matrix(&mut rng, 3, 16, 1.0);
        let p2 = gaussian_matrix(&mut rng, 3, 16, 1.0);
        let z1 = det.transformer_decode(&p1, &feats).unwrap();
        assert!(z1.bitwise_eq(&det.transformer_decode(&p1, &feats).unwrap()));
        let z2 = det.transformer_decode(&p2, &feats).unwrap();
        let diff: f64 = z1.data().iter().zip(z2.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn every_attention_map_is_row_stochastic() {
        let det = Detector::new(DetectorConfig::default(), 6).unwrap();
        let bank = PrototypeBank::new(6, 4, 64);
        let (_, feats) = det
            .synth_video("v".into(), 1, &[0, 1, 2], None, 3, &bank, &mut stream(6, "v"))
            .unwrap();
        let ctx = det.context(&feats).unwrap();
        let tape = GradTape::new();
        let p = tape.constant(gaussian_matrix(&mut stream(6, "p"), 8, 64, 1.0));
        let mut maps = Vec::new();
        det.decode_frame(p, &ctx, 2, Some(&mut maps)).unwrap();
        assert_eq!(maps.len(), 3 * 4);
        for m in &maps {
            assert_eq!(m.shape(), (8, 256));
            for r in 0..m.rows() {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
