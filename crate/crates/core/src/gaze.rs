//! Gaze regressor: head-conditioned scene feature fusion, a single-layer
//! transformer gaze autoencoder whose decoder cross-attends to detector
//! memory through a cross-adapter, and an upsampling heatmap head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    pos_embed_2d, uniform_init, Bound, Conv2d, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, ParamId, ParamStore, PosEmbedding2D,
};
use crate::synth::{BoxXYXY, Image};
use crate::tensor::{ops, Element, Tape, Tensor};

/// Decoder token source: the encoded grid tokens themselves (default), or a
/// learned query set projected back onto the grid before the heatmap head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecoderMode {
    Tokens,
    LearnedQueries(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GazeConfig {
    pub image_size: usize,
    /// Channels of the shared scene feature grid (detector backbone output).
    pub feature_channels: usize,
    /// Side length of the scene feature grid.
    pub grid: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Head crop is resampled to this square before the head encoder.
    pub head_crop: usize,
    pub head_channels: Vec<usize>,
    /// Stride-2 conv widths taking the head-location map down to `grid`.
    pub loc_channels: Vec<usize>,
    pub heatmap_size: usize,
    /// Channel widths of the upsampling heatmap head, one per 2x stage.
    pub head_widths: Vec<usize>,
    pub decoder_mode: DecoderMode,
}

impl Default for GazeConfig {
    fn default() -> Self {
        GazeConfig {
            image_size: 64,
            feature_channels: 32,
            grid: 8,
            hidden: 32,
            heads: 4,
            ffn_hidden: 64,
            head_crop: 32,
            head_channels: vec![8, 16, 16],
            loc_channels: vec![4, 8, 8],
            heatmap_size: 64,
            head_widths: vec![16, 8, 4],
            decoder_mode: DecoderMode::Tokens,
        }
    }
}

fn log2_exact(num: usize, den: usize) -> Option<usize> {
    if den == 0 || num % den != 0 {
        return None;
    }
    let ratio = num / den;
    if ratio.is_power_of_two() {
        Some(ratio.trailing_zeros() as usize)
    } else {
        None
    }
}

impl GazeConfig {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % 4 != 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config("gaze hidden size must be divisible by 4 and by heads".into()));
        }
        let loc_stages = log2_exact(self.image_size, self.grid)
            .ok_or_else(|| Error::Config("image size must be grid * 2^k".into()))?;
        if self.loc_channels.len() != loc_stages {
            return Err(Error::Config(format!(
                "head-loc stack needs {loc_stages} stride-2 convs, got {}",
                self.loc_channels.len()
            )));
        }
        let up_stages = log2_exact(self.heatmap_size, self.grid)
            .ok_or_else(|| Error::Config("heatmap size must be grid * 2^k".into()))?;
        if up_stages == 0 || self.head_widths.len() != up_stages {
            return Err(Error::Config(format!(
                "heatmap head needs {up_stages} upsampling stages, got {}",
                self.head_widths.len()
            )));
        }
        if self.head_channels.is_empty() || self.loc_channels.is_empty() {
            return Err(Error::Config("head/loc encoders need at least one conv".into()));
        }
        if let DecoderMode::LearnedQueries(n) = self.decoder_mode {
            if n == 0 {
                return Err(Error::Config("learned-query mode needs at least one query".into()));
            }
        }
        Ok(())
    }

    pub fn head_feat_dim(&self) -> usize {
        *self.head_channels.last().expect("validated non-empty")
    }
}

pub struct GazeRegressor {
    pub cfg: GazeConfig,
    head_convs: Vec<Conv2d>,
    loc_convs: Vec<Conv2d>,
    fuse_head: Linear,
    fuse_loc: Conv2d,
    reduce: Linear,
    enc_attn: MultiHeadAttention,
    enc_norm1: LayerNorm,
    enc_ffn: FeedForward,
    enc_norm2: LayerNorm,
    adapter_k: Linear,
    adapter_k_norm: LayerNorm,
    adapter_v: Linear,
    adapter_v_norm: LayerNorm,
    dec_self: MultiHeadAttention,
    dec_norm1: LayerNorm,
    dec_cross: MultiHeadAttention,
    dec_norm2: LayerNorm,
    dec_ffn: FeedForward,
    dec_norm3: LayerNorm,
    query_embed: Option<ParamId>,
    query_proj: Option<ParamId>,
    entry_conv: Conv2d,
    up_convs: Vec<Conv2d>,
    final_conv: Conv2d,
    pos: PosEmbedding2D,
}

pub struct GazeForward<E: Element> {
    /// Predicted heatmap `[s, s]`, sigmoid-bounded in (0, 1).
    pub heatmap: Tensor<E>,
    /// Fusion attention over the `grid^2` positions.
    pub attention: Tensor<E>,
}

impl GazeRegressor {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        cfg: &GazeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;

        let mut head_convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.head_channels.iter().enumerate() {
            head_convs.push(Conv2d::new(store, rng, &format!("gaze.head.conv{i}"), c_in, c_out, 3, 2, 1));
            c_in = c_out;
        }
        let mut loc_convs = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in cfg.loc_channels.iter().enumerate() {
            loc_convs.push(Conv2d::new(store, rng, &format!("gaze.loc.conv{i}"), c_in, c_out, 3, 2, 1));
            c_in = c_out;
        }

        let fuse_head = Linear::new(store, rng, "gaze.fuse.head", cfg.head_feat_dim(), 1);
        let fuse_loc = Conv2d::new(
            store,
            rng,
            "gaze.fuse.loc",
            *cfg.loc_channels.last().unwrap(),
            1,
            1,
            1,
            0,
        );
        let reduce = Linear::new(store, rng, "gaze.reduce", cfg.feature_channels, d);

        let enc_attn = MultiHeadAttention::new(store, rng, "gaze.enc.attn", d, cfg.heads)?;
        let enc_norm1 = LayerNorm::new(store, "gaze.enc.norm1", d);
        let enc_ffn = FeedForward::new(store, rng, "gaze.enc.ffn", d, cfg.ffn_hidden)?;
        let enc_norm2 = LayerNorm::new(store, "gaze.enc.norm2", d);

        let adapter_k = Linear::new(store, rng, "gaze.adapter.k", d, d);
        let adapter_k_norm = LayerNorm::new(store, "gaze.adapter.k_norm", d);
        let adapter_v = Linear::new(store, rng, "gaze.adapter.v", d, d);
        let adapter_v_norm = LayerNorm::new(store, "gaze.adapter.v_norm", d);

        let dec_self = MultiHeadAttention::new(store, rng, "gaze.dec.self", d, cfg.heads)?;
        let dec_norm1 = LayerNorm::new(store, "gaze.dec.norm1", d);
        let dec_cross = MultiHeadAttention::new(store, rng, "gaze.dec.cross", d, cfg.heads)?;
        let dec_norm2 = LayerNorm::new(store, "gaze.dec.norm2", d);
        let dec_ffn = FeedForward::new(store, rng, "gaze.dec.ffn", d, cfg.ffn_hidden)?;
        let dec_norm3 = LayerNorm::new(store, "gaze.dec.norm3", d);

        let (query_embed, query_proj) = match cfg.decoder_mode {
            DecoderMode::Tokens => (None, None),
            DecoderMode::LearnedQueries(n) => {
                let qe = store.register(
                    "gaze.dec.query_embed",
                    &[n, d],
                    uniform_init(rng, n * d, -0.5, 0.5),
                );
                let qp = store.register(
                    "gaze.dec.query_proj",
                    &[cfg.tokens(), n],
                    xavier_like(rng, cfg.tokens(), n),
                );
                (Some(qe), Some(qp))
            }
        };

        let entry_conv = Conv2d::new(store, rng, "gaze.heat.entry", d, cfg.head_widths[0], 1, 1, 0);
        let mut up_convs = Vec::new();
        for i in 1..cfg.head_widths.len() {
            up_convs.push(Conv2d::new(
                store,
                rng,
                &format!("gaze.heat.up{i}"),
                cfg.head_widths[i - 1],
                cfg.head_widths[i],
                3,
                1,
                1,
            ));
        }
        let final_conv = Conv2d::new(
            store,
            rng,
            "gaze.heat.final",
            *cfg.head_widths.last().unwrap(),
            1,
            3,
            1,
            1,
        );
        let pos = pos_embed_2d(cfg.grid, cfg.grid, d)?;

        Ok(GazeRegressor {
            cfg: cfg.clone(),
            head_convs,
            loc_convs,
            fuse_head,
            fuse_loc,
            reduce,
            enc_attn,
            enc_norm1,
            enc_ffn,
            enc_norm2,
            adapter_k,
            adapter_k_norm,
            adapter_v,
            adapter_v_norm,
            dec_self,
            dec_norm1,
            dec_cross,
            dec_norm2,
            dec_ffn,
            dec_norm3,
            query_embed,
            query_proj,
            entry_conv,
            up_convs,
            final_conv,
            pos,
        })
    }

    /// Head appearance feature: conv stack over the head crop, then global
    /// average pooling.
    pub fn head_feature<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        head_crop: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let mut x = head_crop.clone();
        for conv in &self.head_convs {
            x = ops::relu(tape, &conv.forward(tape, p, &x)?);
        }
        let s = x.shape();
        let flat = ops::reshape(tape, &x, &[s[0], s[1] * s[2]])?;
        ops::mean_axis1(tape, &flat)
    }

    /// Fusion: a scalar logit per grid position from the head feature and
    /// the encoded head-location map, softmax over positions, then the
    /// scene features scaled position-wise. Returns `(attention [p],
    /// fused [c, p])`.
    pub fn fuse<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        scene_feat: &Tensor<E>,
        head_feat: &Tensor<E>,
        head_loc: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let g = self.cfg.grid;
        let c = self.cfg.feature_channels;
        let n = self.cfg.tokens();
        if scene_feat.shape() != [c, g, g] {
            return Err(Error::shape(
                "fuse_features",
                format!("scene features {:?}, expected [{c}, {g}, {g}]", scene_feat.shape()),
            ));
        }
        if head_loc.data().iter().all(|v| *v == E::zero()) {
            return Err(Error::contract("fuse_features", "head location map is empty"));
        }

        let mut loc = head_loc.clone();
        for conv in &self.loc_convs {
            loc = ops::relu(tape, &conv.forward(tape, p, &loc)?);
        }
        let loc_logit = self.fuse_loc.forward(tape, p, &loc)?; // [1, g, g]
        let loc_flat = ops::reshape(tape, &loc_logit, &[n])?;

        let hf = ops::reshape(tape, head_feat, &[1, self.cfg.head_feat_dim()])?;
        let head_logit = self.fuse_head.forward(tape, p, &hf)?; // [1, 1]
        let head_scalar = ops::reshape(tape, &head_logit, &[1])?;

        let logits = ops::add_broadcast_scalar(tape, &loc_flat, &head_scalar)?;
        let attention = ops::softmax(tape, &logits, 0)?;

        let scene_flat = ops::reshape(tape, scene_feat, &[c, n])?;
        let fused = ops::scale_columns(tape, &scene_flat, &attention)?;
        Ok((attention, fused))
    }

    /// 1x1 channel reduction `c -> d` and flattening to `[p, d]` tokens.
    pub fn reduce_tokens<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        fused: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let t = ops::transpose2d(tape, fused)?; // [p, c]
        self.reduce.forward(tape, p, &t)
    }

    pub fn encode<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        tokens: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        self.encode_with_pos(tape, p, tokens, Some(&self.pos.tensor::<E>()))
    }

    /// Encoder with an explicit positional table (or none); the grid table
    /// is the production path.
    pub fn encode_with_pos<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        tokens: &Tensor<E>,
        pos: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let qk = match pos {
            Some(pe) => ops::add(tape, tokens, pe)?,
            None => tokens.clone(),
        };
        let attn = self.enc_attn.forward(tape, p, &qk, &qk, tokens)?;
        let x = self.enc_norm1.forward(tape, p, &ops::add(tape, tokens, &attn)?)?;
        let ffn = self.enc_ffn.forward(tape, p, &x)?;
        self.enc_norm2.forward(tape, p, &ops::add(tape, &x, &ffn)?)
    }

    /// Per-token affine plus normalization for keys and values separately;
    /// token order and count are preserved.
    pub fn adapt<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        memory_keys: &Tensor<E>,
        memory_values: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        if memory_keys.shape()[1] != self.cfg.hidden {
            return Err(Error::Config(format!(
                "detector hidden size {} != gaze hidden size {}",
                memory_keys.shape()[1],
                self.cfg.hidden
            )));
        }
        let k = self
            .adapter_k_norm
            .forward(tape, p, &self.adapter_k.forward(tape, p, memory_keys)?)?;
        let v = self
            .adapter_v_norm
            .forward(tape, p, &self.adapter_v.forward(tape, p, memory_values)?)?;
        Ok((k, v))
    }

    /// Decoder: self-attention over gaze tokens, object-to-gaze
    /// cross-attention into the adapted detector memory (when provided),
    /// then the FFN; post-norm residuals throughout. Without memory the
    /// cross block is skipped (ablation baseline).
    pub fn decode<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        encoded: &Tensor<E>,
        adapted: Option<(&Tensor<E>, &Tensor<E>)>,
    ) -> Result<Tensor<E>> {
        let pos = self.pos.tensor::<E>();
        let (tgt, pos_for_tokens) = match self.cfg.decoder_mode {
            DecoderMode::Tokens => (encoded.clone(), Some(pos)),
            DecoderMode::LearnedQueries(_) => {
                let qe = self
                    .query_embed
                    .expect("learned-query mode registers queries");
                (p.get(qe).clone(), None)
            }
        };

        let qk = match &pos_for_tokens {
            Some(pe) => ops::add(tape, &tgt, pe)?,
            None => tgt.clone(),
        };
        let sa = self.dec_self.forward(tape, p, &qk, &qk, &tgt)?;
        let t_sa = self.dec_norm1.forward(tape, p, &ops::add(tape, &tgt, &sa)?)?;

        let x = if let Some((k_mem, v_mem)) = adapted {
            let q = match &pos_for_tokens {
                Some(pe) => ops::add(tape, &t_sa, pe)?,
                None => t_sa.clone(),
            };
            let ca = self.dec_cross.forward(tape, p, &q, k_mem, v_mem)?;
            self.dec_norm2.forward(tape, p, &ops::add(tape, &t_sa, &ca)?)?
        } else {
            t_sa
        };

        let ffn = self.dec_ffn.forward(tape, p, &x)?;
        let dec = self.dec_norm3.forward(tape, p, &ops::add(tape, &x, &ffn)?)?;

        match self.cfg.decoder_mode {
            DecoderMode::Tokens => Ok(dec),
            DecoderMode::LearnedQueries(_) => {
                let proj = p.get(self.query_proj.expect("learned-query mode registers proj"));
                ops::matmul(tape, proj, &dec)
            }
        }
    }

    /// Upsampling head from `[p, d]` grid tokens to the `[s, s]` heatmap;
    /// final sigmoid keeps every cell in (0, 1).
    pub fn predict_heatmap<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        tokens: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let g = self.cfg.grid;
        let d = self.cfg.hidden;
        let grid = ops::reshape(tape, &ops::transpose2d(tape, tokens)?, &[d, g, g])?;
        let mut x = ops::relu(tape, &self.entry_conv.forward(tape, p, &grid)?);
        for conv in &self.up_convs {
            x = ops::upsample2x(tape, &x)?;
            x = ops::relu(tape, &conv.forward(tape, p, &x)?);
        }
        x = ops::upsample2x(tape, &x)?;
        let logits = self.final_conv.forward(tape, p, &x)?;
        let m = ops::sigmoid(tape, &logits);
        let s = self.cfg.heatmap_size;
        ops::reshape(tape, &m, &[s, s])
    }

    /// Full gaze branch. `memory` carries the detector's exported
    /// keys/values; `use_autoencoder=false` routes the reduced fused tokens
    /// straight into the heatmap head; `use_cross_adapter=false` feeds the
    /// raw memory into the cross-attention.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Element>(
        &self,
        tape: &Tape<E>,
        p: &Bound<E>,
        scene_feat: &Tensor<E>,
        head_crop: &Tensor<E>,
        head_loc: &Tensor<E>,
        memory: Option<(&Tensor<E>, &Tensor<E>)>,
        use_autoencoder: bool,
        use_cross_adapter: bool,
    ) -> Result<GazeForward<E>> {
        let head_feat = self.head_feature(tape, p, head_crop)?;
        let (attention, fused) = self.fuse(tape, p, scene_feat, &head_feat, head_loc)?;
        let tokens = self.reduce_tokens(tape, p, &fused)?;

        let decoded = if use_autoencoder {
            let encoded = self.encode(tape, p, &tokens)?;
            let adapted_owned = match memory {
                Some((k, v)) if use_cross_adapter => Some(self.adapt(tape, p, k, v)?),
                Some((k, v)) => Some((k.clone(), v.clone())),
                None => None,
            };
            self.decode(
                tape,
                p,
                &encoded,
                adapted_owned.as_ref().map(|(k, v)| (k, v)),
            )?
        } else {
            tokens
        };
        let heatmap = self.predict_heatmap(tape, p, &decoded)?;
        Ok(GazeForward { heatmap, attention })
    }
}

fn xavier_like(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_init(rng, fan_out * fan_in, -a, a)
}

// ---------------------------------------------------------------------------
// input rasters

/// Binary head-location map `[1, s, s]`: 1 inside the head box, 0 elsewhere
/// (pixel-center containment). A box that straddles no pixel center still
/// lights the pixel containing its center.
pub fn head_loc_tensor<E: Element>(head_box: &BoxXYXY, size: usize) -> Result<Tensor<E>> {
    if !head_box.is_valid() {
        return Err(Error::contract(
            "head_location_map",
            format!("invalid head box {head_box:?}"),
        ));
    }
    let mut data = vec![E::zero(); size * size];
    let mut any = false;
    for py in 0..size {
        let v = (py as f64 + 0.5) / size as f64;
        if v < head_box.y1 || v >= head_box.y2 {
            continue;
        }
        for px in 0..size {
            let u = (px as f64 + 0.5) / size as f64;
            if u >= head_box.x1 && u < head_box.x2 {
                data[py * size + px] = E::one();
                any = true;
            }
        }
    }
    if !any {
        let (cx, cy) = head_box.center();
        let px = ((cx * size as f64) as usize).min(size - 1);
        let py = ((cy * size as f64) as usize).min(size - 1);
        data[py * size + px] = E::one();
    }
    Tensor::from_vec(&[1, size, size], data)
}

/// Crops the head box out of the raster and resamples it (nearest neighbour)
/// to a `[3, crop, crop]` tensor scaled to [0, 1].
pub fn head_crop_tensor<E: Element>(
    image: &Image,
    head_box: &BoxXYXY,
    crop: usize,
) -> Result<Tensor<E>> {
    if !head_box.is_valid() {
        return Err(Error::contract(
            "head_crop",
            format!("invalid head box {head_box:?}"),
        ));
    }
    let (w, h) = (image.width as f64, image.height as f64);
    let x_lo = (head_box.x1 * w).floor().max(0.0) as usize;
    let y_lo = (head_box.y1 * h).floor().max(0.0) as usize;
    let x_hi = ((head_box.x2 * w).ceil() as usize).clamp(x_lo + 1, image.width);
    let y_hi = ((head_box.y2 * h).ceil() as usize).clamp(y_lo + 1, image.height);
    let (cw, ch) = (x_hi - x_lo, y_hi - y_lo);

    let inv = E::from_f64(1.0 / 255.0);
    let mut data = vec![E::zero(); 3 * crop * crop];
    for oy in 0..crop {
        let sy = y_lo + (oy * ch) / crop;
        for ox in 0..crop {
            let sx = x_lo + (ox * cw) / crop;
            let px = image.pixel(sx, sy);
            for c in 0..3 {
                data[c * crop * crop + oy * crop + ox] = E::from_f64(px[c] as f64) * inv;
            }
        }
    }
    Tensor::from_vec(&[3, crop, crop], data)
}

/// Full image as a `[3, s, s]` tensor scaled to [0, 1].
pub fn image_tensor<E: Element>(image: &Image) -> Result<Tensor<E>> {
    let (w, h) = (image.width, image.height);
    let inv = E::from_f64(1.0 / 255.0);
    let mut data = vec![E::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(x, y);
            for c in 0..3 {
                data[c * h * w + y * w + x] = E::from_f64(px[c] as f64) * inv;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use crate::tensor::gradcheck::gradcheck;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> GazeConfig {
        GazeConfig {
            image_size: 24,
            feature_channels: 6,
            grid: 3,
            hidden: 8,
            heads: 2,
            ffn_hidden: 16,
            head_crop: 8,
            head_channels: vec![4, 4],
            loc_channels: vec![2, 4, 4],
            heatmap_size: 24,
            head_widths: vec![6, 4, 2],
            decoder_mode: DecoderMode::Tokens,
        }
    }

    fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn build(seed: u64, cfg: &GazeConfig) -> (ParamStore<f64>, GazeRegressor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GazeRegressor::new(&mut store, &mut rng, cfg).unwrap();
        (store, g)
    }

    #[test]
    fn zero_init_fusion_is_uniform() {
        let cfg = tiny_cfg();
        let (mut store, gz) = build(1, &cfg);
        for id in [gz.fuse_head.w, gz.fuse_head.b, gz.fuse_loc.w, gz.fuse_loc.b] {
            for v in store.data_mut(id).iter_mut() {
                *v = 0.0;
            }
        }
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let scene = rand_tensor(2, &[6, 3, 3], -1.0, 1.0);
        let head_feat = rand_tensor(3, &[4], -1.0, 1.0);
        let loc = head_loc_tensor::<f64>(&BoxXYXY::new(0.4, 0.0, 0.6, 0.1), 24).unwrap();
        let (a, fused) = gz.fuse(&tape, &p, &scene, &head_feat, &loc).unwrap();
        let n = cfg.tokens() as f64;
        for &v in a.data() {
            assert!((v - 1.0 / n).abs() < 1e-15);
        }
        for (f, s) in fused.data().iter().zip(scene.data()) {
            assert!((f - s / n).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_attention_masks_everything_else() {
        let cfg = tiny_cfg();
        let (store, gz) = build(1, &cfg);
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let scene = rand_tensor(2, &[6, 3, 3], 0.5, 1.5);
        // Bypass fuse() and check the fusion algebra directly with a one-hot
        // attention vector.
        let mut a = vec![0.0f64; 9];
        a[4] = 1.0;
        let attention = Tensor::from_vec(&[9], a).unwrap();
        let scene_flat = ops::reshape(&tape, &scene, &[6, 9]).unwrap();
        let fused = ops::scale_columns(&tape, &scene_flat, &attention).unwrap();
        let _ = (gz, p);
        for c in 0..6 {
            for pos in 0..9 {
                let v = fused.data()[c * 9 + pos];
                if pos == 4 {
                    assert_eq!(v, scene.data()[c * 9 + 4]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_head_loc_is_contract_error() {
        let cfg = tiny_cfg();
        let (store, gz) = build(1, &cfg);
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let scene = rand_tensor(2, &[6, 3, 3], -1.0, 1.0);
        let head_feat = rand_tensor(3, &[4], -1.0, 1.0);
        let loc = Tensor::<f64>::zeros(&[1, 24, 24]).unwrap();
        assert!(gz.fuse(&tape, &p, &scene, &head_feat, &loc).is_err());
    }

    #[test]
    fn encoder_token_count_and_determinism() {
        let cfg = tiny_cfg();
        let (store, gz) = build(4, &cfg);
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let tokens = rand_tensor(5, &[9, 8], -1.0, 1.0);
        let a = gz.encode(&tape, &p, &tokens).unwrap();
        let b = gz.encode(&tape, &p, &tokens).unwrap();
        assert_eq!(a.shape(), &[9, 8]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_pos() {
        let cfg = tiny_cfg();
        let (store, gz) = build(4, &cfg);
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let tokens = rand_tensor(6, &[9, 8], -1.0, 1.0);
        let out = gz.encode_with_pos(&tape, &p, &tokens, None).unwrap();

        let perm: Vec<usize> = vec![8, 2, 5, 0, 7, 1, 3, 6, 4];
        let permuted_in: Vec<f64> = perm
            .iter()
            .flat_map(|&i| tokens.data()[i * 8..(i + 1) * 8].to_vec())
            .collect();
        let permuted = Tensor::from_vec(&[9, 8], permuted_in).unwrap();
        let out_p = gz.encode_with_pos(&tape, &p, &permuted, None).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            let a = &out_p.data()[r * 8..(r + 1) * 8];
            let b = &out.data()[i * 8..(i + 1) * 8];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_adapter_preserves_normalized_tokens() {
        let cfg = tiny_cfg();
        let (mut store, gz) = build(7, &cfg);
        for lin in [gz.adapter_k, gz.adapter_v] {
            let d = lin.in_dim;
            let w = store.data_mut(lin.w);
            for v in w.iter_mut() {
                *v = 0.0;
            }
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
        }
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        // Tokens with zero mean and variance exactly (1 - eps), so the
        // adapter's normalization maps them to themselves.
        let eps = gz.adapter_k_norm.eps;
        let raw = rand_tensor(8, &[4, 8], -1.0, 1.0);
        let mut data = raw.data().to_vec();
        for row in data.chunks_exact_mut(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let target = (1.0 - eps) / var;
            for v in row.iter_mut() {
                *v = (*v - mean) * target.sqrt();
            }
        }
        let tokens = Tensor::from_vec(&[4, 8], data).unwrap();
        let (k, v) = gz.adapt(&tape, &p, &tokens, &tokens).unwrap();
        assert_eq!(k.shape(), tokens.shape());
        for (a, b) in k.data().iter().zip(tokens.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in v.data().iter().zip(tokens.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hidden_size_mismatch_is_config_error() {
        let cfg = tiny_cfg();
        let (store, gz) = build(7, &cfg);
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let bad = rand_tensor(9, &[4, 12], -1.0, 1.0);
        assert!(gz.adapt(&tape, &p, &bad, &bad).is_err());
    }

    #[test]
    fn zero_memory_values_leave_only_residual_path() {
        let cfg = tiny_cfg();
        let (store, gz) = build(10, &cfg);
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let enc = rand_tensor(11, &[9, 8], -1.0, 1.0);
        let zeros = Tensor::<f64>::zeros(&[4, 8]).unwrap();
        let k1 = rand_tensor(12, &[4, 8], -1.0, 1.0);
        let k2 = rand_tensor(13, &[4, 8], -1.0, 1.0);
        let out1 = gz.decode(&tape, &p, &enc, Some((&k1, &zeros))).unwrap();
        let out2 = gz.decode(&tape, &p, &enc, Some((&k2, &zeros))).unwrap();
        // With zero values the cross block contributes nothing that depends
        // on the keys; the output is the residual/self-attention path alone.
        assert_eq!(out1.data(), out2.data());
    }

    #[test]
    fn cross_attention_is_invariant_to_joint_kv_permutation() {
        let cfg = tiny_cfg();
        let (store, gz) = build(14, &cfg);
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let enc = rand_tensor(15, &[9, 8], -1.0, 1.0);
        let k = rand_tensor(16, &[5, 8], -1.0, 1.0);
        let v = rand_tensor(17, &[5, 8], -1.0, 1.0);
        let base = gz.decode(&tape, &p, &enc, Some((&k, &v))).unwrap();

        let perm = [4usize, 1, 3, 0, 2];
        let pk: Vec<f64> = perm.iter().flat_map(|&i| k.data()[i * 8..(i + 1) * 8].to_vec()).collect();
        let pv: Vec<f64> = perm.iter().flat_map(|&i| v.data()[i * 8..(i + 1) * 8].to_vec()).collect();
        let k2 = Tensor::from_vec(&[5, 8], pk).unwrap();
        let v2 = Tensor::from_vec(&[5, 8], pv).unwrap();
        let out = gz.decode(&tape, &p, &enc, Some((&k2, &v2))).unwrap();
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_reach_detector_memory() {
        let cfg = tiny_cfg();
        let (mut store, gz) = build(20, &cfg);
        let mut jrng = ChaCha8Rng::seed_from_u64(99);
        store.jitter(&mut jrng, 0.05);
        let p = store.bind();
        let tape = Tape::new();
        let enc = rand_tensor(21, &[9, 8], -1.0, 1.0);
        let k = Tensor::leaf(&[4, 8], rand_tensor(22, &[4, 8], -1.0, 1.0).data().to_vec()).unwrap();
        let v = Tensor::leaf(&[4, 8], rand_tensor(23, &[4, 8], -1.0, 1.0).data().to_vec()).unwrap();
        let (k_ad, v_ad) = gz.adapt(&tape, &p, &k, &v).unwrap();
        let dec = gz.decode(&tape, &p, &enc, Some((&k_ad, &v_ad))).unwrap();
        let sq = ops::mul(&tape, &dec, &dec).unwrap();
        let loss = ops::mean_all(&tape, &sq).unwrap();
        backward(&tape, &loss).unwrap();
        let gk = k.grad().expect("keys receive gradient");
        let gv = v.grad().expect("values receive gradient");
        assert!(gk.iter().any(|g| g.abs() > 1e-12));
        assert!(gv.iter().any(|g| g.abs() > 1e-12));

        // Finite-difference probe on the memory elements.
        let probe = gradcheck(
            |tape2, ins| {
                let (k_ad, v_ad) = gz.adapt(tape2, &p, &ins[0], &ins[1])?;
                let dec = gz.decode(tape2, &p, &enc, Some((&k_ad, &v_ad)))?;
                let sq = ops::mul(tape2, &dec, &dec)?;
                ops::mean_all(tape2, &sq)
            },
            &[k.detached(), v.detached()],
            1e-4,
        )
        .unwrap();
        assert!(probe.passed, "max err {}", probe.max_error);
        assert!(probe.entries.iter().any(|e| e.analytic.abs() > 1e-9));
    }

    #[test]
    fn heatmap_shape_and_range() {
        for mode in [DecoderMode::Tokens, DecoderMode::LearnedQueries(5)] {
            let cfg = GazeConfig {
                decoder_mode: mode,
                ..tiny_cfg()
            };
            let (store, gz) = build(30, &cfg);
            let p = store.bind_frozen();
            let tape = Tape::inactive();
            let scene = rand_tensor(31, &[6, 3, 3], -1.0, 1.0);
            let crop = rand_tensor(32, &[3, 8, 8], 0.0, 1.0);
            let loc = head_loc_tensor::<f64>(&BoxXYXY::new(0.4, 0.0, 0.6, 0.1), 24).unwrap();
            let k = rand_tensor(33, &[4, 8], -1.0, 1.0);
            let v = rand_tensor(34, &[4, 8], -1.0, 1.0);
            let out = gz
                .forward(&tape, &p, &scene, &crop, &loc, Some((&k, &v)), true, true)
                .unwrap();
            assert_eq!(out.heatmap.shape(), &[24, 24]);
            assert!(out.heatmap.data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn memory_free_pipeline_stays_finite() {
        let cfg = tiny_cfg();
        let (store, gz) = build(40, &cfg);
        let p = store.bind_frozen();
        let tape = Tape::inactive();
        let scene = rand_tensor(41, &[6, 3, 3], -1.0, 1.0);
        let crop = rand_tensor(42, &[3, 8, 8], 0.0, 1.0);
        let loc = head_loc_tensor::<f64>(&BoxXYXY::new(0.4, 0.0, 0.6, 0.1), 24).unwrap();
        let out = gz
            .forward(&tape, &p, &scene, &crop, &loc, None, true, true)
            .unwrap();
        assert!(out.heatmap.data().iter().all(|v| v.is_finite()));
        let out = gz
            .forward(&tape, &p, &scene, &crop, &loc, None, false, true)
            .unwrap();
        assert!(out.heatmap.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn end_to_end_tiny_gradcheck() {
        // fuse -> encode -> adapt -> decode -> heatmap -> combined loss, with
        // gradients checked for every parameter and the memory tokens
        // (D=8, H=W=3, M_len=4).
        use crate::losses::{gaze_box_loss, gaze_loss, gt_heatmap_tensor, heatmap_box_region};
        let cfg = tiny_cfg();
        let (mut store, gz) = build(50, &cfg);
        let mut jrng = ChaCha8Rng::seed_from_u64(77);
        store.jitter(&mut jrng, 0.05);
        let scene = rand_tensor(51, &[6, 3, 3], -0.5, 0.5);
        let crop = rand_tensor(52, &[3, 8, 8], 0.1, 0.9);
        let loc = head_loc_tensor::<f64>(&BoxXYXY::new(0.4, 0.0, 0.6, 0.12), 24).unwrap();
        let mem_k = rand_tensor(53, &[4, 8], -0.5, 0.5);
        let mem_v = rand_tensor(54, &[4, 8], -0.5, 0.5);
        let t = gt_heatmap_tensor::<f64>((0.52, 0.47), 2.0, 24).unwrap();
        let region = heatmap_box_region(&BoxXYXY::new(0.4, 0.35, 0.65, 0.6), 24).unwrap();

        let mut inputs = store.param_tensors();
        let n_params = inputs.len();
        inputs.push(mem_k);
        inputs.push(mem_v);

        let report = gradcheck(
            move |tape, ins| {
                let bound = Bound::from_tensors(ins[..n_params].to_vec());
                let (k, v) = (&ins[n_params], &ins[n_params + 1]);
                let out =
                    gz.forward(tape, &bound, &scene, &crop, &loc, Some((k, v)), true, true)?;
                let lg = gaze_loss(tape, &out.heatmap, &t)?;
                let lgb = gaze_box_loss(tape, &out.heatmap, &region)?;
                let scaled = ops::scale(tape, &lg, 100.0);
                ops::add(tape, &scaled, &lgb)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max err {}", report.max_error);
    }
}
