//! Minimal single-scale DETR-style detector: convolutional backbone,
//! one transformer encoder layer producing exportable memory, learned object
//! queries, one decoder layer, and class/box heads.
//!
//! The backbone feature grid is shared with the gaze branch, and the encoder
//! memory (keys/values) is exported for the gaze decoder's cross-attention.

pub mod hungarian;
pub mod loss;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    pos_embed_2d, uniform_init, Bound, Conv2d, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, ParamId, ParamStore, PosEmbedding2D,
};
use crate::synth::BoxXYXY;
use crate::tensor::{ops, Element, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectorConfig {
    pub image_size: usize,
    /// Output channels of each stride-2 backbone conv; the final entry is
    /// the width of the shared scene feature grid.
    pub backbone_channels: Vec<usize>,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_queries: usize,
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            backbone_channels: vec![12, 24, 32],
            hidden: 32,
            heads: 4,
            ffn_hidden: 64,
            num_queries: 25,
            num_classes: 6,
        }
    }
}

impl DetectorConfig {
    /// Side length of the backbone grid (each conv halves the resolution).
    pub fn grid(&self) -> usize {
        self.image_size >> self.backbone_channels.len()
    }

    /// Encoder token count `M`.
    pub fn memory_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("backbone has layers")
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one conv".into()));
        }
        if self.image_size % (1 << self.backbone_channels.len()) != 0 || self.grid() < 2 {
            return Err(Error::Config(format!(
                "image size {} does not reduce to a grid of at least 2 over {} stride-2 convs",
                self.image_size,
                self.backbone_channels.len()
            )));
        }
        if self.hidden % 4 != 0 {
            return Err(Error::Config("hidden size must be divisible by 4".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config("heads must divide hidden size".into()));
        }
        if self.num_classes < 2 || self.num_queries == 0 {
            return Err(Error::Config("need >= 2 classes and >= 1 query".into()));
        }
        Ok(())
    }
}

pub struct Detector {
    pub cfg: DetectorConfig,
    convs: Vec<Conv2d>,
    proj: Conv2d,
    enc_attn: MultiHeadAttention,
    enc_norm1: LayerNorm,
    enc_ffn: FeedForward,
    enc_norm2: LayerNorm,
    query_embed: ParamId,
    dec_self: MultiHeadAttention,
    dec_norm1: LayerNorm,
    dec_cross: MultiHeadAttention,
    dec_norm2: LayerNorm,
    dec_ffn: FeedForward,
    dec_norm3: LayerNorm,
    class_head: Linear,
    box_head1: Linear,
    box_head2: Linear,
    pos: PosEmbedding2D,
}

/// Everything one image pass produces, still on the tape.
pub struct DetectorForward<E: Element> {
    /// `[n_q, num_classes]` per-class logits.
    pub class_logits: Tensor<E>,
    /// `[n_q, 4]` cxcywh in (0,1) via sigmoid.
    pub boxes: Tensor<E>,
    /// `[m, d]` encoder output plus positional embeddings; what the decoder
    /// cross-attends to as keys.
    pub memory_keys: Tensor<E>,
    /// `[m, d]` raw encoder output; cross-attention values.
    pub memory_values: Tensor<E>,
    /// `[c_b, g, g]` shared backbone feature grid.
    pub features: Tensor<E>,
}

impl Detector {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.backbone_channels.iter().enumerate() {
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("det.backbone.conv{i}"),
                c_in,
                c_out,
                3,
                2,
                1,
            ));
            c_in = c_out;
        }
        let proj = Conv2d::new(store, rng, "det.proj", c_in, d, 1, 1, 0);
        let enc_attn = MultiHeadAttention::new(store, rng, "det.enc.attn", d, cfg.heads)?;
        let enc_norm1 = LayerNorm::new(store, "det.enc.norm1", d);
        let enc_ffn = FeedForward::new(store, rng, "det.enc.ffn", d, cfg.ffn_hidden)?;
        let enc_norm2 = LayerNorm::new(store, "det.enc.norm2", d);
        let query_embed = store.register(
            "det.query_embed",
            &[cfg.num_queries, d],
            uniform_init(rng, cfg.num_queries * d, -0.5, 0.5),
        );
        let dec_self = MultiHeadAttention::new(store, rng, "det.dec.self", d, cfg.heads)?;
        let dec_norm1 = LayerNorm::new(store, "det.dec.norm1", d);
        let dec_cross = MultiHeadAttention::new(store, rng, "det.dec.cross", d, cfg.heads)?;
        let dec_norm2 = LayerNorm::new(store, "det.dec.norm2", d);
        let dec_ffn = FeedForward::new(store, rng, "det.dec.ffn", d, cfg.ffn_hidden)?;
        let dec_norm3 = LayerNorm::new(store, "det.dec.norm3", d);
        let class_head = Linear::new(store, rng, "det.class_head", d, cfg.num_classes);
        let box_head1 = Linear::new(store, rng, "det.box_head.l1", d, d);
        let box_head2 = Linear::new(store, rng, "det.box_head.l2", d, 4);
        let pos = pos_embed_2d(cfg.grid(), cfg.grid(), d)?;
        Ok(Detector {
            cfg: cfg.clone(),
            convs,
            proj,
            enc_attn,
            enc_norm1,
            enc_ffn,
            enc_norm2,
            query_embed,
            dec_self,
            dec_norm1,
            dec_cross,
            dec_norm2,
            dec_ffn,
            dec_norm3,
            class_head,
            box_head1,
            box_head2,
            pos,
        })
    }

    /// Shared scene features `[c_b, g, g]` from an image `[3, s, s]`.
    pub fn backbone<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        image: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let s = image.shape();
        if s != [3, self.cfg.image_size, self.cfg.image_size] {
            return Err(Error::shape(
                "detector_forward",
                format!(
                    "image shape {s:?}, expected [3, {0}, {0}]",
                    self.cfg.image_size
                ),
            ));
        }
        let mut x = image.clone();
        for conv in &self.convs {
            x = ops::relu(tape, &conv.forward(tape, p, &x)?);
        }
        Ok(x)
    }

    /// Encoder pass: `(memory_keys, memory_values)`, both `[m, d]`. The same
    /// pair feeds this detector's decoder and the gaze decoder.
    pub fn encode<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        features: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let d = self.cfg.hidden;
        let m = self.cfg.memory_len();
        let projected = self.proj.forward(tape, p, features)?; // [d, g, g]
        let flat = ops::reshape(tape, &projected, &[d, m])?;
        let tokens = ops::transpose2d(tape, &flat)?; // [m, d]
        let pos = self.pos.tensor::<E>();

        let qk = ops::add(tape, &tokens, &pos)?;
        let attn = self.enc_attn.forward(tape, p, &qk, &qk, &tokens)?;
        let x = self
            .enc_norm1
            .forward(tape, p, &ops::add(tape, &tokens, &attn)?)?;
        let ffn = self.enc_ffn.forward(tape, p, &x)?;
        let memory = self.enc_norm2.forward(tape, p, &ops::add(tape, &x, &ffn)?)?;

        let keys = ops::add(tape, &memory, &pos)?;
        Ok((keys, memory))
    }

    /// Decoder and heads over arbitrary memory; the cross-attention target
    /// is swappable so the reversed (gaze-to-object) wiring can reuse it.
    pub fn decode<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        memory_keys: &Tensor<E>,
        memory_values: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let queries = p.get(self.query_embed);
        let sa = self.dec_self.forward(tape, p, queries, queries, queries)?;
        let x = self
            .dec_norm1
            .forward(tape, p, &ops::add(tape, queries, &sa)?)?;
        let ca = self.dec_cross.forward(tape, p, &x, memory_keys, memory_values)?;
        let x = self.dec_norm2.forward(tape, p, &ops::add(tape, &x, &ca)?)?;
        let ffn = self.dec_ffn.forward(tape, p, &x)?;
        let x = self.dec_norm3.forward(tape, p, &ops::add(tape, &x, &ffn)?)?;

        let class_logits = self.class_head.forward(tape, p, &x)?;
        let h = ops::relu(tape, &self.box_head1.forward(tape, p, &x)?);
        let boxes = ops::sigmoid(tape, &self.box_head2.forward(tape, p, &h)?);
        Ok((class_logits, boxes))
    }

    pub fn forward<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        image: &Tensor<E>,
    ) -> Result<DetectorForward<E>> {
        let features = self.backbone(tape, p, image)?;
        let (keys, values) = self.encode(tape, p, &features)?;
        let (class_logits, boxes) = self.decode(tape, p, &keys, &values)?;
        Ok(DetectorForward {
            class_logits,
            boxes,
            memory_keys: keys,
            memory_values: values,
            features,
        })
    }
}

// ---------------------------------------------------------------------------
// detached detections for evaluation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCXCYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCXCYWH {
    pub fn to_xyxy(self) -> BoxXYXY {
        BoxXYXY::new(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// One image's detections as plain numbers: per query a box, an argmax
/// label, and the max sigmoid class probability as confidence.
#[derive(Debug, Clone, Default)]
pub struct Detections {
    pub boxes: Vec<BoxCXCYWH>,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Detections {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn extract_detections<E: Element>(
    class_logits: &Tensor<E>,
    boxes: &Tensor<E>,
) -> Detections {
    let n_c = class_logits.shape()[1];
    let n_q = class_logits.shape()[0];
    let mut out = Detections::default();
    for q in 0..n_q {
        let row = &class_logits.data()[q * n_c..(q + 1) * n_c];
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        let z = row[best].to_f64_lossy();
        let score = 1.0 / (1.0 + (-z).exp());
        let b = &boxes.data()[q * 4..(q + 1) * 4];
        out.boxes.push(BoxCXCYWH {
            cx: b[0].to_f64_lossy(),
            cy: b[1].to_f64_lossy(),
            w: b[2].to_f64_lossy(),
            h: b[3].to_f64_lossy(),
        });
        out.labels.push(best);
        out.scores.push(score);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::gradcheck;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            image_size: 16,
            backbone_channels: vec![4, 8],
            hidden: 8,
            heads: 2,
            ffn_hidden: 16,
            num_queries: 2,
            num_classes: 2,
        }
    }

    fn rand_image(seed: u64, size: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[3, size, size], data).unwrap()
    }

    #[test]
    fn forward_is_well_formed() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_cfg();
        let det = Detector::new(&mut store, &mut rng, &cfg).unwrap();
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let out = det.forward(&tape, &p, &rand_image(3, 16)).unwrap();
        assert_eq!(out.class_logits.shape(), &[2, 2]);
        assert_eq!(out.boxes.shape(), &[2, 4]);
        assert!(out.class_logits.data().iter().all(|v| v.is_finite()));
        assert!(out.boxes.data().iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn memory_length_matches_grid() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.grid(), 4);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = Detector::new(&mut store, &mut rng, &cfg).unwrap();
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let out = det.forward(&tape, &p, &rand_image(3, 16)).unwrap();
        assert_eq!(out.memory_keys.shape(), &[16, 8]);
        assert_eq!(out.memory_values.shape(), &[16, 8]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let det = Detector::new(&mut store, &mut rng, &tiny_cfg()).unwrap();
        let p = store.bind_frozen();
        let img = rand_image(8, 16);
        let a = det.forward(&Tape::inactive(), &p, &img).unwrap();
        let b = det.forward(&Tape::inactive(), &p, &img).unwrap();
        assert_eq!(a.class_logits.data(), b.class_logits.data());
        assert_eq!(a.boxes.data(), b.boxes.data());
        assert_eq!(a.memory_values.data(), b.memory_values.data());
    }

    #[test]
    fn wrong_image_size_is_shape_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let det = Detector::new(&mut store, &mut rng, &tiny_cfg()).unwrap();
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        assert!(det.forward(&tape, &p, &rand_image(1, 8)).is_err());
    }

    #[test]
    fn tiny_detector_gradcheck() {
        use super::loss::{det_loss, det_loss_matched, DetLossConfig, DetTargets};
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = tiny_cfg();
        let det = Detector::new(&mut store, &mut rng, &cfg).unwrap();
        let img = rand_image(21, 16);
        let targets = DetTargets {
            classes: vec![1],
            boxes_cxcywh: vec![[0.4, 0.6, 0.3, 0.2]],
        };

        // Fix the assignment at the base point so the probed function is
        // locally smooth.
        let base = store.bind_frozen();
        let tape = Tape::inactive();
        let out = det.forward(&tape, &base, &img).unwrap();
        let loss_cfg = DetLossConfig::default();
        let parts = det_loss(&tape, &out.class_logits, &out.boxes, &targets, &loss_cfg).unwrap();
        let assignment = parts.assignment.clone();

        let inputs = store.param_tensors();
        let report = gradcheck(
            move |tape, ins| {
                let bound = Bound::from_tensors(ins.to_vec());
                let out = det.forward(tape, &bound, &img)?;
                let parts = det_loss_matched(
                    tape,
                    &out.class_logits,
                    &out.boxes,
                    &targets,
                    assignment.clone(),
                    &loss_cfg,
                )?;
                Ok(parts.total)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max err {}", report.max_error);
    }
}
