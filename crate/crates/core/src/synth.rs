//! Deterministic synthetic retail scenes: a shelf grid of class-colored
//! boxes, one head disc on the image border whose pupil points at the gazed
//! object, and a GOO-style JSON annotation format with P6 rasters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates, corners ordered
/// `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXYXY { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= 1.0
            && self.y2 <= 1.0
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxXYXY::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub bbox: BoxXYXY,
    pub class_id: usize,
}

/// Annotation-level scene: everything but the raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub head_box: BoxXYXY,
    pub gaze_point: (f64, f64),
    pub objects: Vec<SceneObject>,
    pub gaze_object_index: usize,
}

impl Scene {
    pub fn gaze_box(&self) -> BoxXYXY {
        self.objects[self.gaze_object_index].bbox
    }
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        Image { width, height, rgb }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene: Scene,
    pub image: Image,
}

/// Generator parameters. Everything downstream is a pure function of
/// `(config, seed)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_classes: usize,
    /// Probability that a shelf slot holds an object. At least one object is
    /// always placed.
    pub fill_prob: f64,
    /// Fraction of the image reserved as the border band where the head sits.
    pub head_band: f64,
    pub image_size: usize,
    /// Positional jitter of an object inside its slot, slot-relative.
    pub jitter: f64,
    /// Gaze point offset inside the gazed box, box-relative.
    pub gaze_jitter: f64,
    /// 0 = distribution A; other values rotate the palette and shift the
    /// background, standing in for a second dataset domain.
    pub style_variant: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid_rows: 3,
            grid_cols: 3,
            num_classes: 6,
            fill_prob: 0.7,
            head_band: 0.18,
            image_size: 64,
            jitter: 0.25,
            gaze_jitter: 0.5,
            style_variant: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("scene_config", "need at least 2 classes"));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::contract("scene_config", "grid must be at least 1x1"));
        }
        if !(self.fill_prob > 0.0 && self.fill_prob <= 1.0) {
            return Err(Error::contract(
                "scene_config",
                "fill probability must be in (0, 1] (a zero-object config is not a scene)",
            ));
        }
        if !(self.head_band > 0.02 && self.head_band < 0.4) {
            return Err(Error::contract("scene_config", "head band must be in (0.02, 0.4)"));
        }
        if self.image_size < 32 {
            return Err(Error::contract("scene_config", "image size must be >= 32"));
        }
        if !(0.0..1.0).contains(&self.jitter) || !(0.0..1.0).contains(&self.gaze_jitter) {
            return Err(Error::contract("scene_config", "jitter values must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Distinct saturated color per class via golden-angle hues.
pub fn class_color(class_id: usize, style_variant: u32) -> [u8; 3] {
    let hue = ((class_id as f64 + style_variant as f64 * 0.37) * 137.50776405) % 360.0;
    hsv_to_rgb(hue, 0.82, 0.88)
}

pub fn background_color(style_variant: u32) -> [u8; 3] {
    if style_variant == 0 {
        [205, 205, 205]
    } else {
        [180, 190, 170]
    }
}

pub const HEAD_COLOR: [u8; 3] = [244, 220, 181];
pub const PUPIL_COLOR: [u8; 3] = [25, 25, 25];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Scene metadata only; no raster. Fully determined by `(cfg, seed)`.
pub fn generate_scene_meta(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let band = cfg.head_band;
    let margin = 0.02;
    let region_lo = band + margin;
    let region_hi = 1.0 - band - margin;
    let slot_w = (region_hi - region_lo) / cfg.grid_cols as f64;
    let slot_h = (region_hi - region_lo) / cfg.grid_rows as f64;

    // Fixed draw order: presence for every slot, then a forced slot, then
    // per-object class and jitter.
    let n_slots = cfg.grid_rows * cfg.grid_cols;
    let present: Vec<bool> = (0..n_slots).map(|_| rng.gen_bool(cfg.fill_prob)).collect();
    let forced_slot = rng.gen_range(0..n_slots);
    let mut slots: Vec<usize> = (0..n_slots).filter(|&i| present[i]).collect();
    if slots.is_empty() {
        slots.push(forced_slot);
    }

    let mut objects = Vec::with_capacity(slots.len());
    for &slot in &slots {
        let row = slot / cfg.grid_cols;
        let col = slot % cfg.grid_cols;
        let sx = region_lo + col as f64 * slot_w;
        let sy = region_lo + row as f64 * slot_h;
        let class_id = rng.gen_range(0..cfg.num_classes);
        let shrink = 0.18;
        let jx = (rng.gen_range(0.0..1.0) - 0.5) * cfg.jitter * slot_w * 0.5;
        let jy = (rng.gen_range(0.0..1.0) - 0.5) * cfg.jitter * slot_h * 0.5;
        let scale = 0.85 + rng.gen_range(0.0..1.0) * 0.25;
        let half_w = slot_w * (0.5 - shrink) * scale;
        let half_h = slot_h * (0.5 - shrink) * scale;
        let cx = (sx + slot_w / 2.0 + jx).clamp(sx + half_w, sx + slot_w - half_w);
        let cy = (sy + slot_h / 2.0 + jy).clamp(sy + half_h, sy + slot_h - half_h);
        objects.push(SceneObject {
            bbox: BoxXYXY::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h),
            class_id,
        });
    }

    let gaze_object_index = rng.gen_range(0..objects.len());
    let gbox = objects[gaze_object_index].bbox;
    let (gcx, gcy) = gbox.center();
    let inset = 1e-4;
    let gx = (gcx + (rng.gen_range(0.0..1.0) - 0.5) * cfg.gaze_jitter * gbox.width())
        .clamp(gbox.x1 + inset, gbox.x2 - inset);
    let gy = (gcy + (rng.gen_range(0.0..1.0) - 0.5) * cfg.gaze_jitter * gbox.height())
        .clamp(gbox.y1 + inset, gbox.y2 - inset);

    // Head disc on one of the four border bands.
    let r = band * 0.35;
    let side = rng.gen_range(0..4u32);
    let along = rng.gen_range(band..(1.0 - band));
    let (hx, hy) = match side {
        0 => (along, band / 2.0),
        1 => (along, 1.0 - band / 2.0),
        2 => (band / 2.0, along),
        _ => (1.0 - band / 2.0, along),
    };
    let head_box = BoxXYXY::new(
        (hx - r).max(0.0),
        (hy - r).max(0.0),
        (hx + r).min(1.0),
        (hy + r).min(1.0),
    );

    Ok(Scene {
        head_box,
        gaze_point: (gx, gy),
        objects,
        gaze_object_index,
    })
}

/// Rasterizes a scene: class-colored rectangles in index order (later on
/// top), then the head disc with a pupil offset toward the gaze point.
/// Pixel-center containment throughout.
pub fn render(scene: &Scene, size: usize, style_variant: u32) -> Result<Image> {
    if size < 32 {
        return Err(Error::contract("render", "raster size must be >= 32"));
    }
    let mut img = Image::filled(size, size, background_color(style_variant));
    for obj in &scene.objects {
        let color = class_color(obj.class_id, style_variant);
        let b = obj.bbox;
        for py in 0..size {
            let v = (py as f64 + 0.5) / size as f64;
            if v < b.y1 || v >= b.y2 {
                continue;
            }
            for px in 0..size {
                let u = (px as f64 + 0.5) / size as f64;
                if u >= b.x1 && u < b.x2 {
                    img.set(px, py, color);
                }
            }
        }
    }

    let (hcx, hcy) = scene.head_box.center();
    let r = scene.head_box.width().min(scene.head_box.height()) / 2.0;
    let (gx, gy) = scene.gaze_point;
    let (dx, dy) = (gx - hcx, gy - hcy);
    let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
    let pupil_c = (hcx + dx / norm * r * 0.55, hcy + dy / norm * r * 0.55);
    let pupil_r = r * 0.38;
    for py in 0..size {
        let v = (py as f64 + 0.5) / size as f64;
        for px in 0..size {
            let u = (px as f64 + 0.5) / size as f64;
            let d_head = ((u - hcx).powi(2) + (v - hcy).powi(2)).sqrt();
            if d_head <= r {
                img.set(px, py, HEAD_COLOR);
            }
            let d_pupil = ((u - pupil_c.0).powi(2) + (v - pupil_c.1).powi(2)).sqrt();
            if d_pupil <= pupil_r {
                img.set(px, py, PUPIL_COLOR);
            }
        }
    }
    Ok(img)
}

/// One annotated scene with its raster at `cfg.image_size`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    let scene = generate_scene_meta(cfg, seed)?;
    let image = render(&scene, cfg.image_size, cfg.style_variant)?;
    Ok(SceneSample { scene, image })
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("class_{c}")).collect()
}

// ---------------------------------------------------------------------------
// scene validation (applied to generated and loaded data alike)

pub fn validate_scene(scene: &Scene, num_classes: usize, ctx: &str) -> Result<()> {
    if scene.objects.is_empty() {
        return Err(Error::Validation(format!("{ctx}: scene has no objects")));
    }
    if !scene.head_box.is_valid() {
        return Err(Error::Validation(format!("{ctx}: field head_box is not a valid box")));
    }
    for (i, obj) in scene.objects.iter().enumerate() {
        if !obj.bbox.is_valid() {
            return Err(Error::Validation(format!(
                "{ctx}: field objects[{i}].box is not a valid box"
            )));
        }
        if obj.class_id >= num_classes {
            return Err(Error::Validation(format!(
                "{ctx}: field objects[{i}].class_id {} out of range ({num_classes} classes)",
                obj.class_id
            )));
        }
        if obj.bbox == scene.head_box {
            return Err(Error::Validation(format!(
                "{ctx}: field objects[{i}].box equals head_box"
            )));
        }
    }
    if scene.gaze_object_index >= scene.objects.len() {
        return Err(Error::Validation(format!(
            "{ctx}: field gaze_object_index {} out of range ({} objects)",
            scene.gaze_object_index,
            scene.objects.len()
        )));
    }
    let (gx, gy) = scene.gaze_point;
    let gbox = scene.gaze_box();
    if !gbox.contains(gx, gy) {
        return Err(Error::Validation(format!(
            "{ctx}: field gaze_point ({gx:.4}, {gy:.4}) outside the gaze box"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// annotation file format

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    classes: Vec<String>,
    images: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationRecord {
    id: u64,
    file: String,
    width: usize,
    height: usize,
    head_box: [f64; 4],
    gaze_point: [f64; 2],
    gaze_object_index: usize,
    objects: Vec<AnnotationObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationObject {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_id: usize,
}

/// One loaded annotation; the raster stays on disk until asked for.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub scene: Scene,
}

#[derive(Debug, Clone)]
pub struct AnnotatedDataset {
    pub classes: Vec<String>,
    pub annotations: Vec<SceneAnnotation>,
    root: PathBuf,
}

impl AnnotatedDataset {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn load_image(&self, idx: usize) -> Result<Image> {
        let ann = &self.annotations[idx];
        read_ppm(&self.root.join(&ann.file))
    }
}

/// Reads and validates `annotations.json` in `dir`. Images load lazily via
/// [`AnnotatedDataset::load_image`].
pub fn load_annotations(dir: &Path) -> Result<AnnotatedDataset> {
    let path = dir.join("annotations.json");
    let text = fs::read_to_string(&path)?;
    let file: AnnotationFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if file.classes.is_empty() {
        return Err(Error::Parse(format!("{}: empty class table", path.display())));
    }
    let mut annotations = Vec::with_capacity(file.images.len());
    for (i, value) in file.images.into_iter().enumerate() {
        let rec: AnnotationRecord = serde_json::from_value(value)
            .map_err(|e| Error::Parse(format!("record {i}: {e}")))?;
        let scene = Scene {
            head_box: BoxXYXY::from_array(rec.head_box),
            gaze_point: (rec.gaze_point[0], rec.gaze_point[1]),
            objects: rec
                .objects
                .iter()
                .map(|o| SceneObject {
                    bbox: BoxXYXY::from_array(o.bbox),
                    class_id: o.class_id,
                })
                .collect(),
            gaze_object_index: rec.gaze_object_index,
        };
        validate_scene(&scene, file.classes.len(), &format!("record {i}"))?;
        annotations.push(SceneAnnotation {
            id: rec.id,
            file: rec.file,
            width: rec.width,
            height: rec.height,
            scene,
        });
    }
    Ok(AnnotatedDataset {
        classes: file.classes,
        annotations,
        root: dir.to_path_buf(),
    })
}

/// Writes `annotations.json` plus one P6 raster per sample into `dir`.
pub fn export_dataset(dir: &Path, classes: &[String], samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("scene_{i:06}.ppm");
        write_ppm(&dir.join(&file), &s.image)?;
        records.push(serde_json::to_value(AnnotationRecord {
            id: i as u64,
            file,
            width: s.image.width,
            height: s.image.height,
            head_box: s.scene.head_box.to_array(),
            gaze_point: [s.scene.gaze_point.0, s.scene.gaze_point.1],
            gaze_object_index: s.scene.gaze_object_index,
            objects: s
                .scene
                .objects
                .iter()
                .map(|o| AnnotationObject {
                    bbox: o.bbox.to_array(),
                    class_id: o.class_id,
                })
                .collect(),
        })
        .expect("annotation records serialize"));
    }
    let file = AnnotationFile {
        classes: classes.to_vec(),
        images: records,
    };
    let json = serde_json::to_string_pretty(&file).expect("annotation file serializes");
    fs::write(dir.join("annotations.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// portable pixmap I/O

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.rgb);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let (magic, rest) = parse_pnm_header(&bytes, path)?;
    if magic != "P6" {
        return Err(Error::Parse(format!("{}: not a P6 pixmap", path.display())));
    }
    let (w, h, data) = rest;
    if data.len() != w * h * 3 {
        return Err(Error::Parse(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            w * h * 3,
            data.len()
        )));
    }
    Ok(Image {
        width: w,
        height: h,
        rgb: data,
    })
}

/// Grayscale P5 output used for heatmap dumps.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    debug_assert_eq!(gray.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(gray);
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_pnm_header<'a>(
    bytes: &'a [u8],
    path: &Path,
) -> Result<(String, (usize, usize, Vec<u8>))> {
    let err = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut token = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    let w: usize = token(&mut pos)?.parse().map_err(|_| err("bad width"))?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| err("bad height"))?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    Ok((magic, (w, h, bytes[pos..].to_vec())))
}
