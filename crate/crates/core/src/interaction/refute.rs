//! Refutations: relabeled-by-construction variants of a corrected example
//! (zoom in, zoom out, dihedral augmentation, defect composited onto a
//! background texture).

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, Dihedral, Image, PixelBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefutationConfig {
    pub count: usize,
    pub zoom_in_scale: f64,
    pub zoom_out_scale: f64,
}

impl Default for RefutationConfig {
    fn default() -> Self {
        Self {
            count: 4,
            zoom_in_scale: 2.0,
            zoom_out_scale: 0.5,
        }
    }
}

/// How a refutation was derived from its source; enough to regenerate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Transform {
    ZoomIn { region: PixelBox, scale: f64 },
    ZoomOut { region: PixelBox, scale: f64 },
    Dihedral { op: Dihedral },
    /// The `patch` window of the source, masked by the source mask, pasted
    /// onto background `background` at `offset`.
    Composite { background: usize, patch: PixelBox, offset: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refutation {
    pub image: Image,
    pub label: Label,
    pub source_id: String,
    pub transform: Transform,
    /// Defect support in the refutation, when the transform tracks it.
    pub defect_mask: Option<BinaryMask>,
}

/// Hex SHA-256 of an image's side, channel count and pixel bits.
pub fn image_digest(image: &Image) -> String {
    let mut h = Sha256::new();
    h.update((image.side() as u64).to_le_bytes());
    h.update((image.channels() as u64).to_le_bytes());
    for v in image.pixels() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn fit_background(background: &Image, side: usize) -> Image {
    background.resize(side)
}

/// Apply a recorded transform to a source image and its effective mask.
pub fn apply_transform(
    image: &Image,
    mask: Option<&BinaryMask>,
    transform: &Transform,
    backgrounds: &[Image],
) -> Result<(Image, Option<BinaryMask>)> {
    match transform {
        Transform::ZoomIn { region, scale } | Transform::ZoomOut { region, scale } => {
            Ok((imaging::zoom_region(image, *region, *scale)?, None))
        }
        Transform::Dihedral { op } => Ok((imaging::augment(image, *op), mask.map(|m| imaging::augment_mask(m, *op)))),
        Transform::Composite {
            background,
            patch,
            offset,
        } => {
            let mask = mask.ok_or_else(|| Error::invalid("composite refutation needs a defect mask"))?;
            let bg = backgrounds
                .get(*background)
                .ok_or_else(|| Error::NotFound(format!("background {background}")))?;
            let bg = fit_background(bg, image.side());
            let bg = if bg.channels() == image.channels() {
                bg
            } else if image.channels() == 1 {
                bg.to_gray()
            } else {
                Image::from_fn(bg.side(), image.channels(), |x, y, _| bg.get(x, y, 0))
            };
            let source = imaging::crop(image, patch.x, patch.y, patch.w);
            let source_mask = imaging::crop_mask(mask, patch.x, patch.y, patch.w);
            let (out, placed) = imaging::composite(&source, &source_mask, &bg, *offset)?;
            Ok((out, Some(placed)))
        }
    }
}

/// Square window of side `max(w, h)` covering `bbox`, kept inside the frame.
fn patch_window(bbox: PixelBox, side: usize) -> PixelBox {
    let s = bbox.w.max(bbox.h).min(side);
    PixelBox {
        x: bbox.x.min(side - s),
        y: bbox.y.min(side - s),
        w: s,
        h: s,
    }
}

/// The default sequence: zoom in, zoom out, augmentation, then composite
/// (NOK) or a second augmentation (OK); any further refutations are
/// augmentations. `mask` is the effective explanation mask and is required
/// for NOK; OK instances use the whole frame as their region.
pub fn generate_refutations(
    source_id: &str,
    image: &Image,
    mask: Option<&BinaryMask>,
    label: Label,
    backgrounds: &[Image],
    config: &RefutationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Refutation>, Vec<String>)> {
    let side = image.side();
    let mut warnings = Vec::new();
    let region_mask = match label {
        Label::Nok => {
            let m = mask.ok_or_else(|| Error::invalid(format!("NOK refutations for {source_id} need a mask")))?;
            if m.is_empty() {
                return Err(Error::invalid(format!("NOK refutations for {source_id} need a nonempty mask")));
            }
            Some(m)
        }
        Label::Ok => None,
    };
    let region = region_mask
        .and_then(|m| m.bounding_box())
        .unwrap_or_else(|| PixelBox::full(side));
    let mut transforms = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let dihedral = |r: &mut ChaCha8Rng| Transform::Dihedral {
            op: Dihedral::ALL[r.random_range(0..Dihedral::ALL.len())],
        };
        let t = match i {
            0 => Transform::ZoomIn {
                region,
                scale: config.zoom_in_scale,
            },
            1 => Transform::ZoomOut {
                region,
                scale: config.zoom_out_scale,
            },
            3 if label == Label::Nok => {
                if backgrounds.is_empty() {
                    let msg = format!("no background textures; refutation 4 of {source_id} is an augmentation");
                    warn!("{msg}");
                    warnings.push(msg);
                    dihedral(rng)
                } else {
                    let patch = patch_window(region, side);
                    Transform::Composite {
                        background: rng.random_range(0..backgrounds.len()),
                        patch,
                        offset: (rng.random_range(0..=side - patch.w), rng.random_range(0..=side - patch.w)),
                    }
                }
            }
            _ => dihedral(rng),
        };
        transforms.push(t);
    }
    let mut out = Vec::with_capacity(transforms.len());
    for transform in transforms {
        let (img, defect_mask) = apply_transform(image, region_mask, &transform, backgrounds)?;
        out.push(Refutation {
            image: img,
            label,
            source_id: source_id.to_string(),
            transform,
            defect_mask,
        });
    }
    Ok((out, warnings))
}
