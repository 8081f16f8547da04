//! Full gaze-object-prediction model: the detector and the gaze regressor
//! share one backbone feature grid, and the detector's encoder memory feeds
//! the gaze decoder's cross-attention (or the reverse, for the wiring
//! ablation).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::loss::DetTargets;
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::gaze::{
    head_crop_tensor, head_loc_tensor, image_tensor, DecoderMode, GazeConfig, GazeRegressor,
};
use crate::losses::{heatmap_box_region, PixelRegion};
use crate::nn::{Bound, ParamStore};
use crate::synth::{Scene, SceneSample};
use crate::tensor::{Element, Tape, Tensor};

/// Which branch provides cross-attention memory to the other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CrossWiring {
    /// Detector encoder memory feeds the gaze decoder (the design's default).
    ObjectToGaze,
    /// Gaze encoder tokens feed the detector decoder; the gaze decoder runs
    /// without cross-attention. Ablation wiring only.
    GazeToObject,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_queries: usize,
    pub backbone_channels: Vec<usize>,
    pub head_crop: usize,
    pub head_channels: Vec<usize>,
    pub loc_channels: Vec<usize>,
    pub heatmap_size: usize,
    pub heatmap_widths: Vec<usize>,
    pub decoder_mode: DecoderMode,
    pub use_gaze_autoencoder: bool,
    pub use_cross_adapter: bool,
    pub wiring: CrossWiring,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            num_classes: 6,
            hidden: 32,
            heads: 4,
            ffn_hidden: 64,
            num_queries: 25,
            backbone_channels: vec![12, 24, 32],
            head_crop: 32,
            head_channels: vec![8, 16, 16],
            loc_channels: vec![4, 8, 8],
            heatmap_size: 64,
            heatmap_widths: vec![16, 8, 4],
            decoder_mode: DecoderMode::Tokens,
            use_gaze_autoencoder: true,
            use_cross_adapter: true,
            wiring: CrossWiring::ObjectToGaze,
        }
    }
}

impl ModelConfig {
    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            image_size: self.image_size,
            backbone_channels: self.backbone_channels.clone(),
            hidden: self.hidden,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            num_queries: self.num_queries,
            num_classes: self.num_classes,
        }
    }

    pub fn gaze_config(&self) -> GazeConfig {
        let det = self.detector_config();
        GazeConfig {
            image_size: self.image_size,
            feature_channels: det.feature_channels(),
            grid: det.grid(),
            hidden: self.hidden,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            head_crop: self.head_crop,
            head_channels: self.head_channels.clone(),
            loc_channels: self.loc_channels.clone(),
            heatmap_size: self.heatmap_size,
            head_widths: self.heatmap_widths.clone(),
            decoder_mode: self.decoder_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector_config().validate()?;
        self.gaze_config().validate()
    }
}

pub struct GopModel {
    pub cfg: ModelConfig,
    pub detector: Detector,
    pub gaze: GazeRegressor,
}

/// One image's outputs, still on the tape.
pub struct ModelForward<E: Element> {
    pub class_logits: Tensor<E>,
    pub boxes: Tensor<E>,
    pub heatmap: Tensor<E>,
    pub fusion_attention: Tensor<E>,
}

impl GopModel {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let detector = Detector::new(store, rng, &cfg.detector_config())?;
        let gaze = GazeRegressor::new(store, rng, &cfg.gaze_config())?;
        Ok(GopModel {
            cfg: cfg.clone(),
            detector,
            gaze,
        })
    }

    pub fn forward<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        image: &Tensor<E>,
        head_crop: &Tensor<E>,
        head_loc: &Tensor<E>,
    ) -> Result<ModelForward<E>> {
        let features = self.detector.backbone(tape, p, image)?;
        match self.cfg.wiring {
            CrossWiring::ObjectToGaze => {
                let (mem_k, mem_v) = self.detector.encode(tape, p, &features)?;
                let (class_logits, boxes) = self.detector.decode(tape, p, &mem_k, &mem_v)?;
                let out = self.gaze.forward(
                    tape,
                    p,
                    &features,
                    head_crop,
                    head_loc,
                    Some((&mem_k, &mem_v)),
                    self.cfg.use_gaze_autoencoder,
                    self.cfg.use_cross_adapter,
                )?;
                Ok(ModelForward {
                    class_logits,
                    boxes,
                    heatmap: out.heatmap,
                    fusion_attention: out.attention,
                })
            }
            CrossWiring::GazeToObject => {
                // Reverse wiring: the gaze encoder's tokens become the
                // detector decoder's memory; the gaze decoder keeps only its
                // self-attention and FFN.
                let head_feat = self.gaze.head_feature(tape, p, head_crop)?;
                let (attention, fused) = self.gaze.fuse(tape, p, &features, &head_feat, head_loc)?;
                let tokens = self.gaze.reduce_tokens(tape, p, &fused)?;
                let (decoded, memory) = if self.cfg.use_gaze_autoencoder {
                    let encoded = self.gaze.encode(tape, p, &tokens)?;
                    let dec = self.gaze.decode(tape, p, &encoded, None)?;
                    (dec, encoded)
                } else {
                    (tokens.clone(), tokens)
                };
                let (mem_k, mem_v) = if self.cfg.use_cross_adapter {
                    self.gaze.adapt(tape, p, &memory, &memory)?
                } else {
                    (memory.clone(), memory)
                };
                let (class_logits, boxes) = self.detector.decode(tape, p, &mem_k, &mem_v)?;
                let heatmap = self.gaze.predict_heatmap(tape, p, &decoded)?;
                Ok(ModelForward {
                    class_logits,
                    boxes,
                    heatmap,
                    fusion_attention: attention,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// sample preparation

/// Everything the loss needs for one annotated scene.
pub struct PreparedSample<E: Element> {
    pub image: Tensor<E>,
    pub head_crop: Tensor<E>,
    pub head_loc: Tensor<E>,
    pub det_targets: DetTargets,
    pub gt_heatmap: Tensor<E>,
    pub gaze_region: PixelRegion,
    pub gaze_point: (f64, f64),
    pub head_center: (f64, f64),
}

pub fn det_targets_from_scene(scene: &Scene) -> DetTargets {
    let mut t = DetTargets::default();
    for obj in &scene.objects {
        let b = obj.bbox;
        t.classes.push(obj.class_id);
        t.boxes_cxcywh.push([
            (b.x1 + b.x2) / 2.0,
            (b.y1 + b.y2) / 2.0,
            b.width(),
            b.height(),
        ]);
    }
    t
}

pub fn prepare_sample<E: Element>(
    sample: &SceneSample,
    cfg: &ModelConfig,
    sigma: f64,
) -> Result<PreparedSample<E>> {
    let scene = &sample.scene;
    let image = image_tensor::<E>(&sample.image)?;
    let head_crop = head_crop_tensor::<E>(&sample.image, &scene.head_box, cfg.head_crop)?;
    let head_loc = head_loc_tensor::<E>(&scene.head_box, cfg.image_size)?;
    let gt_heatmap =
        crate::losses::gt_heatmap_tensor::<E>(scene.gaze_point, sigma, cfg.heatmap_size)?;
    let gaze_region = heatmap_box_region(&scene.gaze_box(), cfg.heatmap_size)?;
    Ok(PreparedSample {
        image,
        head_crop,
        head_loc,
        det_targets: det_targets_from_scene(scene),
        gt_heatmap,
        gaze_region,
        gaze_point: scene.gaze_point,
        head_center: scene.head_box.center(),
    })
}

/// Loss switches: exactly one of the two box-energy losses may be active.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossSwitches {
    pub use_gaze_box_loss: bool,
    pub use_energy_loss: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            use_gaze_box_loss: true,
            use_energy_loss: false,
        }
    }
}

impl LossSwitches {
    pub fn validate(&self) -> Result<()> {
        if self.use_gaze_box_loss && self.use_energy_loss {
            return Err(Error::Config(
                "gaze box loss and energy aggregation loss are alternatives, not a pair".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar loss parts of one training step, detached for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub det: f64,
    pub gaze: f64,
    pub gaze_box: f64,
    pub total: f64,
}

/// Forward plus the full training objective for one sample.
pub fn sample_loss<E: Element>(
    model: &GopModel,
    tape: &Tape<E>,
    p: &Bound<E>,
    sample: &PreparedSample<E>,
    weights: &crate::losses::LossWeights,
    switches: &LossSwitches,
) -> Result<(Tensor<E>, LossParts, ModelForward<E>)> {
    switches.validate()?;
    let out = model.forward(tape, p, &sample.image, &sample.head_crop, &sample.head_loc)?;
    let det_parts = crate::detector::loss::det_loss(
        tape,
        &out.class_logits,
        &out.boxes,
        &sample.det_targets,
        &crate::detector::loss::DetLossConfig::default(),
    )?;
    let l_gaze = crate::losses::gaze_loss(tape, &out.heatmap, &sample.gt_heatmap)?;
    let l_gb = if switches.use_gaze_box_loss {
        crate::losses::gaze_box_loss(tape, &out.heatmap, &sample.gaze_region)?
    } else if switches.use_energy_loss {
        crate::losses::energy_aggregation_loss(tape, &out.heatmap, &sample.gaze_region)?
    } else {
        Tensor::scalar(E::zero())
    };
    let total = crate::losses::total_loss(tape, &det_parts.total, &l_gaze, &l_gb, weights)?;
    let parts = LossParts {
        det: det_parts.total.item().to_f64_lossy(),
        gaze: l_gaze.item().to_f64_lossy(),
        gaze_box: l_gb.item().to_f64_lossy(),
        total: total.item().to_f64_lossy(),
    };
    Ok((total, parts, out))
}
