//! Raster operations: square resize, four-view composite, label-preserving
//! augmentation, and class rebalancing.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::GroundTruthReport;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("image has a zero dimension ({width}x{height})")]
    ZeroDimension { width: u32, height: u32 },
    #[error("tile is {got:?}, expected {expected:?}")]
    SizeMismatch { got: (u32, u32), expected: (u32, u32) },
    #[error("channel count mismatch: {0} vs {1}")]
    ChannelMismatch(u8, u8),
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    BadBuffer { got: usize, expected: usize },
    #[error("augmentation parameter {name}={value} outside [{min}, {max}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("class {class}: target {target} exceeds 4x original {original}")]
    CapExceeded {
        class: u8,
        original: usize,
        target: usize,
    },
    #[error("class {0} has no originals")]
    EmptyClass(u8),
    #[error("plan does not match items: {0}")]
    PlanMismatch(String),
    #[error("image codec: {0}")]
    Codec(String),
}

/// Row-major 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if channels != 1 && channels != 3 {
            return Err(ImagingError::ChannelMismatch(channels, 1));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(ImagingError::BadBuffer {
                got: pixels.len(),
                expected,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Self {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n]).expect("valid channels")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let o = self.offset(x, y);
        &self.pixels[o..o + self.channels as usize]
    }

    /// Copy a rectangular region.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> RasterImage {
        let c = self.channels as usize;
        let mut out = Vec::with_capacity(w as usize * h as usize * c);
        for y in y0..y0 + h {
            let start = self.offset(x0, y);
            out.extend_from_slice(&self.pixels[start..start + w as usize * c]);
        }
        RasterImage::new(w, h, self.channels, out).expect("crop within bounds")
    }

    fn blit(&mut self, src: &RasterImage, x0: u32, y0: u32) {
        let c = self.channels as usize;
        let row = src.width as usize * c;
        for y in 0..src.height {
            let dst = self.offset(x0, y0 + y);
            let s = src.offset(0, y);
            self.pixels[dst..dst + row].copy_from_slice(&src.pixels[s..s + row]);
        }
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, ImagingError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| ImagingError::Codec(e.to_string()))?;
        Ok(Self::from_dynamic(img))
    }

    pub fn open(path: &Path) -> Result<Self, ImagingError> {
        let img = image::open(path).map_err(|e| ImagingError::Codec(format!("{}: {e}", path.display())))?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        let is_gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if is_gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            RasterImage::new(w, h, 1, g.into_raw()).expect("luma buffer")
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            RasterImage::new(w, h, 3, rgb.into_raw()).expect("rgb buffer")
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImagingError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.pixels,
            self.width,
            self.height,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| ImagingError::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| ImagingError::Codec(format!("{}: {e}", path.display())))
    }

    /// Sample channel `ch` at fractional pixel-center coordinates; outside reads `fill`.
    fn sample_bilinear(&self, x: f64, y: f64, ch: usize, fill: u8) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let get = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                fill as f64
            } else {
                self.pixels[self.offset(xi as u32, yi as u32) + ch] as f64
            }
        };
        let top = get(x0, y0) * (1.0 - fx) + get(x0 + 1.0, y0) * fx;
        let bottom = get(x0, y0 + 1.0) * (1.0 - fx) + get(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resample with pixel-center alignment and edge clamping.
pub fn resample(img: &RasterImage, new_w: u32, new_h: u32) -> RasterImage {
    if new_w == img.width && new_h == img.height {
        return img.clone();
    }
    let c = img.channels as usize;
    let sx = img.width as f64 / new_w as f64;
    let sy = img.height as f64 / new_h as f64;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let mut out = Vec::with_capacity(new_w as usize * new_h as usize * c);
    for y in 0..new_h {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        for x in 0..new_w {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            for ch in 0..c {
                out.push(to_byte(img.sample_bilinear(src_x, src_y, ch, 0)));
            }
        }
    }
    RasterImage::new(new_w, new_h, img.channels, out).expect("resample buffer")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagingConfig {
    pub target_side: u32,
    pub pad_value: u8,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            target_side: 512,
            pad_value: 0,
        }
    }
}

impl ImagingConfig {
    pub fn new(target_side: u32) -> Result<Self, ImagingError> {
        if target_side == 0 {
            return Err(ImagingError::ZeroDimension {
                width: 0,
                height: 0,
            });
        }
        Ok(Self {
            target_side,
            ..Self::default()
        })
    }

    pub fn composite_side(&self) -> u32 {
        2 * self.target_side
    }

    /// Stable hash of the configuration, used to key cached composites.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("side={};pad={}", self.target_side, self.pad_value));
        hex::encode(h.finalize())
    }
}

/// Fit into a `target_side` square: aspect-preserving resample, then
/// symmetric padding with `pad_value`.
pub fn resize_square(img: &RasterImage, cfg: &ImagingConfig) -> Result<RasterImage, ImagingError> {
    if img.width == 0 || img.height == 0 {
        return Err(ImagingError::ZeroDimension {
            width: img.width,
            height: img.height,
        });
    }
    let side = cfg.target_side;
    if img.width == side && img.height == side {
        return Ok(img.clone());
    }
    let (w, h) = if img.width >= img.height {
        let h = ((img.height as u64 * side as u64) as f64 / img.width as f64).round() as u32;
        (side, h.max(1))
    } else {
        let w = ((img.width as u64 * side as u64) as f64 / img.height as f64).round() as u32;
        (w.max(1), side)
    };
    let content = resample(img, w, h);
    let mut out = RasterImage::filled(side, side, img.channels, cfg.pad_value);
    out.blit(&content, (side - w) / 2, (side - h) / 2);
    Ok(out)
}

/// 2x2 composite: CC views on top, MLO below, right breast in the left column.
pub fn compose_four_view(
    r_cc: &RasterImage,
    l_cc: &RasterImage,
    r_mlo: &RasterImage,
    l_mlo: &RasterImage,
) -> Result<RasterImage, ImagingError> {
    let side = r_cc.width;
    let channels = r_cc.channels;
    for tile in [r_cc, l_cc, r_mlo, l_mlo] {
        if tile.width != side || tile.height != side {
            return Err(ImagingError::SizeMismatch {
                got: (tile.width, tile.height),
                expected: (side, side),
            });
        }
        if tile.channels != channels {
            return Err(ImagingError::ChannelMismatch(tile.channels, channels));
        }
    }
    if side == 0 {
        return Err(ImagingError::ZeroDimension { width: 0, height: 0 });
    }
    let mut out = RasterImage::filled(2 * side, 2 * side, channels, 0);
    out.blit(r_cc, 0, 0);
    out.blit(l_cc, side, 0);
    out.blit(r_mlo, 0, side);
    out.blit(l_mlo, side, side);
    Ok(out)
}

/// Quadrants of a composite in (R-CC, L-CC, R-MLO, L-MLO) order.
pub fn decompose_four_view(
    composite: &RasterImage,
) -> Result<[RasterImage; 4], ImagingError> {
    if composite.width != composite.height || composite.width % 2 != 0 {
        return Err(ImagingError::SizeMismatch {
            got: (composite.width, composite.height),
            expected: (composite.width, composite.width),
        });
    }
    let s = composite.width / 2;
    Ok([
        composite.crop(0, 0, s, s),
        composite.crop(s, 0, s, s),
        composite.crop(0, s, s, s),
        composite.crop(s, s, s, s),
    ])
}

pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const TRANSLATE_RANGE: (f64, f64) = (-0.05, 0.05);

/// Validated geometric augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    flip_horizontal: bool,
    scale: f64,
    translate: (f64, f64),
    seed: u64,
}

fn check_range(name: &'static str, value: f64, (min, max): (f64, f64)) -> Result<(), ImagingError> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(ImagingError::OutOfRange { name, value, min, max })
    }
}

impl AugmentationSpec {
    pub fn new(flip_horizontal: bool, scale: f64, translate: (f64, f64), seed: u64) -> Result<Self, ImagingError> {
        check_range("scale", scale, SCALE_RANGE)?;
        check_range("dx", translate.0, TRANSLATE_RANGE)?;
        check_range("dy", translate.1, TRANSLATE_RANGE)?;
        Ok(Self {
            flip_horizontal,
            scale,
            translate,
            seed,
        })
    }

    pub fn flip_only(seed: u64) -> Self {
        Self::new(true, 1.0, (0.0, 0.0), seed).expect("identity in range")
    }

    pub fn flip_horizontal(&self) -> bool {
        self.flip_horizontal
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn translate(&self) -> (f64, f64) {
        self.translate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn is_geometric(&self) -> bool {
        self.scale != 1.0 || self.translate != (0.0, 0.0)
    }
}

pub fn flip_horizontal(img: &RasterImage) -> RasterImage {
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            out.extend_from_slice(img.pixel(x, y));
        }
    }
    RasterImage::new(img.width, img.height, img.channels, out).expect("same size")
}

/// Scale about the image center then shift; uncovered pixels are black.
fn scale_translate(img: &RasterImage, scale: f64, (dx, dy): (f64, f64)) -> RasterImage {
    let c = img.channels as usize;
    let cx = img.width as f64 / 2.0;
    let cy = img.height as f64 / 2.0;
    let shift_x = dx * img.width as f64;
    let shift_y = dy * img.height as f64;
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let sx = (px - shift_x - cx) / scale + cx - 0.5;
            let sy = (py - shift_y - cy) / scale + cy - 0.5;
            for ch in 0..c {
                out.push(to_byte(img.sample_bilinear(sx, sy, ch, 0)));
            }
        }
    }
    RasterImage::new(img.width, img.height, img.channels, out).expect("same size")
}

fn swap_word(word: &str) -> Option<String> {
    let replacement = match word.to_ascii_lowercase().as_str() {
        "right" => "left",
        "left" => "right",
        _ => return None,
    };
    if word.chars().all(|c| c.is_ascii_lowercase()) {
        Some(replacement.to_string())
    } else if word.chars().all(|c| c.is_ascii_uppercase()) {
        Some(replacement.to_ascii_uppercase())
    } else if word.chars().next().is_some_and(|c| c.is_ascii_uppercase())
        && word.chars().skip(1).all(|c| c.is_ascii_lowercase())
    {
        let mut s = replacement.to_string();
        s[..1].make_ascii_uppercase();
        Some(s)
    } else {
        // mixed-case spellings are left alone so swapping stays an involution
        None
    }
}

/// Swap whole-word `right`/`left`, keeping lower, Title or UPPER case.
pub fn swap_laterality(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !word.is_empty() {
            match swap_word(word) {
                Some(s) => out.push_str(&s),
                None => out.push_str(word),
            }
            word.clear();
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Apply an augmentation; horizontal flips also swap laterality in the findings text.
pub fn augment(
    img: &RasterImage,
    report: &GroundTruthReport,
    spec: &AugmentationSpec,
) -> (RasterImage, GroundTruthReport) {
    let mut out = if spec.flip_horizontal {
        flip_horizontal(img)
    } else {
        img.clone()
    };
    if spec.is_geometric() {
        out = scale_translate(&out, spec.scale, spec.translate);
    }
    let mut report = report.clone();
    if spec.flip_horizontal {
        report.findings_text = swap_laterality(&report.findings_text);
    }
    (out, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RebalanceAction {
    Downsample,
    Augment,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPlan {
    pub original_count: usize,
    pub target_count: usize,
    pub action: RebalanceAction,
    /// Whether extra copies of this class also receive translation.
    pub translate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalancePlan {
    pub classes: BTreeMap<u8, ClassPlan>,
    pub seed: u64,
}

impl RebalancePlan {
    pub fn total_target(&self) -> usize {
        self.classes.values().map(|c| c.target_count).sum()
    }
}

/// Classes whose augmented copies are translated as well as flipped and scaled.
pub const DEFAULT_TRANSLATE_CLASSES: [u8; 1] = [5];

/// Largest target allowed for augmentation: originals plus at most 300% added copies.
pub fn augmentation_cap(original: usize) -> usize {
    4 * original
}

pub fn build_rebalance_plan(
    class_counts: &BTreeMap<u8, usize>,
    targets: &BTreeMap<u8, usize>,
    translate_classes: &[u8],
    seed: u64,
) -> Result<RebalancePlan, ImagingError> {
    let mut classes = BTreeMap::new();
    for (&class, &target) in targets {
        let original = class_counts.get(&class).copied().unwrap_or(0);
        if original == 0 {
            return Err(ImagingError::EmptyClass(class));
        }
        let action = match target.cmp(&original) {
            std::cmp::Ordering::Less => RebalanceAction::Downsample,
            std::cmp::Ordering::Greater => RebalanceAction::Augment,
            std::cmp::Ordering::Equal => RebalanceAction::Keep,
        };
        if action == RebalanceAction::Augment && target > augmentation_cap(original) {
            return Err(ImagingError::CapExceeded {
                class,
                original,
                target,
            });
        }
        classes.insert(
            class,
            ClassPlan {
                original_count: original,
                target_count: target,
                action,
                translate: translate_classes.contains(&class),
            },
        );
    }
    Ok(RebalancePlan { classes, seed })
}

/// An input item for rebalancing.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: RasterImage,
    pub report: GroundTruthReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub original_id: String,
    pub class: u8,
    pub action: RebalanceAction,
    /// Zero for originals; 1.. for augmented copies of the same original.
    pub copy_index: usize,
    pub flip_horizontal: bool,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
    pub spec_seed: Option<u64>,
    #[serde(default)]
    pub output_path: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RebalancedItem {
    pub image: RasterImage,
    pub report: GroundTruthReport,
    pub provenance: Provenance,
}

fn class_rng(seed: u64, class: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64 + 1);
    rng
}

fn passthrough(item: LabeledImage, class: u8, action: RebalanceAction) -> RebalancedItem {
    RebalancedItem {
        provenance: Provenance {
            original_id: item.id,
            class,
            action,
            copy_index: 0,
            flip_horizontal: false,
            scale: 1.0,
            dx: 0.0,
            dy: 0.0,
            spec_seed: None,
            output_path: None,
        },
        image: item.image,
        report: item.report,
    }
}

/// Execute a plan. Output is grouped by class in ascending order.
///
/// Downsampling draws a seeded sample without replacement. Augmentation keeps
/// every original and cycles through them for extra copies: the first extra
/// copy of an original is a flip, later ones flip and scale, and classes
/// marked for translation also get a random shift.
pub fn apply_rebalance(
    plan: &RebalancePlan,
    mut items: BTreeMap<u8, Vec<LabeledImage>>,
) -> Result<Vec<RebalancedItem>, ImagingError> {
    let mut out = Vec::with_capacity(plan.total_target());
    for (&class, cp) in &plan.classes {
        let originals = items
            .remove(&class)
            .ok_or_else(|| ImagingError::PlanMismatch(format!("no items for class {class}")))?;
        if originals.len() != cp.original_count {
            return Err(ImagingError::PlanMismatch(format!(
                "class {class}: plan expects {} originals, got {}",
                cp.original_count,
                originals.len()
            )));
        }
        let mut rng = class_rng(plan.seed, class);
        match cp.action {
            RebalanceAction::Keep => {
                out.extend(originals.into_iter().map(|it| passthrough(it, class, cp.action)));
            }
            RebalanceAction::Downsample => {
                let mut picked = index::sample(&mut rng, originals.len(), cp.target_count).into_vec();
                picked.sort_unstable();
                let mut slots: Vec<Option<LabeledImage>> = originals.into_iter().map(Some).collect();
                for i in picked {
                    let it = slots[i].take().expect("sampled without replacement");
                    out.push(passthrough(it, class, cp.action));
                }
            }
            RebalanceAction::Augment => {
                let n = originals.len();
                let extra = cp.target_count - n;
                let mut copies = Vec::with_capacity(extra);
                for j in 0..extra {
                    let src = &originals[j % n];
                    let round = j / n;
                    let spec_seed: u64 = rng.gen();
                    let scale = if round == 0 {
                        1.0
                    } else {
                        rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1)
                    };
                    let translate = if cp.translate {
                        (
                            rng.gen_range(TRANSLATE_RANGE.0..=TRANSLATE_RANGE.1),
                            rng.gen_range(TRANSLATE_RANGE.0..=TRANSLATE_RANGE.1),
                        )
                    } else {
                        (0.0, 0.0)
                    };
                    let spec = AugmentationSpec::new(true, scale, translate, spec_seed)?;
                    let (image, report) = augment(&src.image, &src.report, &spec);
                    copies.push(RebalancedItem {
                        image,
                        report,
                        provenance: Provenance {
                            original_id: src.id.clone(),
                            class,
                            action: cp.action,
                            copy_index: round + 1,
                            flip_horizontal: spec.flip_horizontal,
                            scale: spec.scale,
                            dx: spec.translate.0,
                            dy: spec.translate.1,
                            spec_seed: Some(spec_seed),
                            output_path: None,
                        },
                    });
                }
                out.extend(originals.into_iter().map(|it| passthrough(it, class, cp.action)));
                out.extend(copies);
            }
        }
    }
    if let Some(class) = items.keys().next() {
        return Err(ImagingError::PlanMismatch(format!("class {class} not in plan")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RasterImage {
        let px = (0..w * h).map(|i| (i * 7 % 251) as u8).collect();
        RasterImage::new(w, h, 1, px).unwrap()
    }

    #[test]
    fn resize_identity() {
        let img = gradient(512, 512);
        assert_eq!(resize_square(&img, &ImagingConfig::default()).unwrap(), img);
    }

    #[test]
    fn resize_rejects_zero() {
        let img = RasterImage::new(0, 10, 1, vec![]).unwrap();
        assert!(matches!(
            resize_square(&img, &ImagingConfig::default()),
            Err(ImagingError::ZeroDimension { .. })
        ));
    }

    #[test]
    fn resize_wide_image_pads_rows() {
        let img = RasterImage::filled(1024, 512, 1, 200);
        let out = resize_square(&img, &ImagingConfig::default()).unwrap();
        assert_eq!((out.width(), out.height()), (512, 512));
        let top: u64 = out.crop(0, 0, 512, 128).pixels().iter().map(|&p| p as u64).sum();
        let bottom: u64 = out.crop(0, 384, 512, 128).pixels().iter().map(|&p| p as u64).sum();
        assert_eq!((top, bottom), (0, 0));
        assert!(out.crop(0, 128, 512, 256).pixels().iter().all(|&p| p == 200));
    }

    #[test]
    fn compose_quadrant_means() {
        let tiles: Vec<RasterImage> = [10u8, 20, 30, 40].iter().map(|&v| RasterImage::filled(8, 8, 1, v)).collect();
        let c = compose_four_view(&tiles[0], &tiles[1], &tiles[2], &tiles[3]).unwrap();
        let q = decompose_four_view(&c).unwrap();
        for (tile, want) in q.iter().zip([10u8, 20, 30, 40]) {
            assert!(tile.pixels().iter().all(|&p| p == want));
        }
    }

    #[test]
    fn compose_rejects_wrong_size() {
        let ok = RasterImage::filled(512, 512, 1, 0);
        let bad = RasterImage::filled(511, 512, 1, 0);
        assert!(matches!(
            compose_four_view(&ok, &ok, &bad, &ok),
            Err(ImagingError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn flip_two_pixels() {
        let img = RasterImage::new(2, 1, 1, vec![1, 2]).unwrap();
        assert_eq!(flip_horizontal(&img).pixels(), &[2, 1]);
        let rgb = RasterImage::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(flip_horizontal(&rgb).pixels(), &[4, 5, 6, 1, 2, 3]);
    }

    #[test]
    fn laterality_swap() {
        assert_eq!(swap_laterality("Mass in left CC view"), "Mass in right CC view");
        assert_eq!(swap_laterality("Right side, LEFT side"), "Left side, RIGHT side");
        assert_eq!(swap_laterality("leftover bright"), "leftover bright");
    }

    #[test]
    fn spec_ranges_enforced() {
        assert!(AugmentationSpec::new(false, 1.2, (0.0, 0.0), 0).is_err());
        assert!(AugmentationSpec::new(false, 1.0, (0.06, 0.0), 0).is_err());
        assert!(AugmentationSpec::new(false, f64::NAN, (0.0, 0.0), 0).is_err());
        assert!(AugmentationSpec::new(true, 0.9, (-0.05, 0.05), 0).is_ok());
    }

    #[test]
    fn plan_cap() {
        let counts = BTreeMap::from([(3u8, 242usize)]);
        let err = build_rebalance_plan(&counts, &BTreeMap::from([(3u8, 1000usize)]), &[], 0).unwrap_err();
        assert_eq!(err, ImagingError::CapExceeded { class: 3, original: 242, target: 1000 });
        assert!(build_rebalance_plan(&counts, &BTreeMap::from([(3u8, 968usize)]), &[], 0).is_ok());
        let keep = build_rebalance_plan(&counts, &BTreeMap::from([(3u8, 242usize)]), &[], 0).unwrap();
        assert_eq!(keep.classes[&3].action, RebalanceAction::Keep);
    }

    #[test]
    fn digest_changes_with_config() {
        let a = ImagingConfig::default();
        let b = ImagingConfig::new(256).unwrap();
        assert_eq!(a.digest(), ImagingConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn png_round_trip() {
        let img = gradient(13, 7);
        let back = RasterImage::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
