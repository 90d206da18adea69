//! Random-mask saliency: mask sampling, occlusion statistics, RISE and InvRISE.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::BlackBox;
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::{apply_mask, upsample_bilinear_shifted, BinaryMask, Image, LowResGrid, Mask};
use crate::rng;

pub const DEFAULT_K: usize = 1000;
pub const DEFAULT_L: usize = 8;
pub const DEFAULT_P: f64 = 0.5;
pub const DEFAULT_TOP_FRACTION: f64 = 0.10;
/// A mask value at or below this counts as hiding the pixel.
pub const OCCLUSION_EPS: f64 = 1e-9;

/// Masked images evaluated per classifier batch.
const BATCH: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub k: usize,
    pub l: usize,
    pub p: f64,
    pub seed: u64,
    /// Random sub-cell shift when upsampling (off by default).
    pub shift: bool,
    /// Use `1 - m` instead of the hard occlusion indicator.
    pub soft_complement: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            l: DEFAULT_L,
            p: DEFAULT_P,
            seed: 0,
            shift: false,
            soft_complement: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    side: usize,
    l: usize,
    p: f64,
    seed: u64,
    soft_complement: bool,
    grids: Vec<LowResGrid>,
    masks: Vec<Mask>,
    occlusion: Vec<f64>,
    mean_visible: Vec<f64>,
}

impl MaskSet {
    pub fn sample(config: &MaskConfig, side: usize) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::invalid("mask count k must be at least 1"));
        }
        if !(config.p > 0.0 && config.p < 1.0) {
            return Err(Error::invalid(format!("cell probability {} must lie in (0, 1)", config.p)));
        }
        if config.l == 0 || config.l > side {
            return Err(Error::invalid(format!("grid side {} must lie in 1..={side}", config.l)));
        }
        let mut r = rng::stream(config.seed, "masks", 0);
        let cell = side as f64 / config.l as f64;
        let mut grids = Vec::with_capacity(config.k);
        let mut shifts = Vec::with_capacity(config.k);
        for _ in 0..config.k {
            let cells = (0..config.l * config.l).map(|_| u8::from(r.random_bool(config.p))).collect();
            grids.push(LowResGrid::new(config.l, cells)?);
            shifts.push(if config.shift {
                (r.random_range(0.0..cell), r.random_range(0.0..cell))
            } else {
                (0.0, 0.0)
            });
        }
        let mut set = Self::build(grids, &shifts, side, config.soft_complement)?;
        set.p = config.p;
        set.seed = config.seed;
        Ok(set)
    }

    /// A mask set over explicitly given grids, each weighted 1/k.
    pub fn from_grids(grids: Vec<LowResGrid>, side: usize, soft_complement: bool) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::invalid("mask set needs at least one grid"));
        }
        let shifts = vec![(0.0, 0.0); grids.len()];
        Self::build(grids, &shifts, side, soft_complement)
    }

    /// Every one of the `2^(l*l)` binary grids, once each.
    pub fn exhaustive(l: usize, side: usize) -> Result<Self> {
        if l == 0 || l * l > 16 {
            return Err(Error::invalid(format!("exhaustive enumeration for l = {l} is too large")));
        }
        let n = l * l;
        let grids = (0..1u32 << n)
            .map(|bits| LowResGrid::new(l, (0..n).map(|i| ((bits >> i) & 1) as u8).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_grids(grids, side, false)
    }

    fn build(grids: Vec<LowResGrid>, shifts: &[(f64, f64)], side: usize, soft_complement: bool) -> Result<Self> {
        let l = grids[0].l();
        if grids.iter().any(|g| g.l() != l) {
            return Err(Error::invalid("grids in a mask set must share one size"));
        }
        let masks = grids
            .par_iter()
            .zip(shifts)
            .map(|(g, &s)| upsample_bilinear_shifted(g, side, s))
            .collect::<Result<Vec<_>>>()?;
        let k = masks.len() as f64;
        let mut occlusion = vec![0.0; side * side];
        let mut mean_visible = vec![0.0; side * side];
        for m in &masks {
            for (i, &v) in m.values().iter().enumerate() {
                occlusion[i] += complement(v, soft_complement);
                mean_visible[i] += v;
            }
        }
        occlusion.iter_mut().for_each(|v| *v /= k);
        mean_visible.iter_mut().for_each(|v| *v /= k);
        Ok(Self {
            side,
            l,
            p: f64::NAN,
            seed: 0,
            soft_complement,
            grids,
            masks,
            occlusion,
            mean_visible,
        })
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn soft_complement(&self) -> bool {
        self.soft_complement
    }

    pub fn grids(&self) -> &[LowResGrid] {
        &self.grids
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    /// `P[M_λ = 0]` for every pixel, row-major.
    pub fn occlusion_prob(&self) -> &[f64] {
        &self.occlusion
    }

    /// Mean soft mask value for every pixel, row-major.
    pub fn mean_visible(&self) -> &[f64] {
        &self.mean_visible
    }

    /// `P[M_λ = 0]` at pixel `(x, y)`.
    pub fn occlusion_probability(&self, x: usize, y: usize) -> Result<f64> {
        if x >= self.side || y >= self.side {
            return Err(Error::invalid(format!("pixel ({x}, {y}) outside {0}x{0}", self.side)));
        }
        Ok(self.occlusion[y * self.side + x])
    }

    /// The complemented mask value `m̄(λ)` for mask `index` at flat pixel `i`.
    pub fn complement(&self, index: usize, i: usize) -> f64 {
        complement(self.masks[index].values()[i], self.soft_complement)
    }
}

fn complement(v: f64, soft: bool) -> f64 {
    if soft {
        1.0 - v
    } else if v <= OCCLUSION_EPS {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SaliencyMethod {
    #[serde(rename = "rise")]
    Rise,
    #[serde(rename = "invrise")]
    InvRise,
}

impl SaliencyMethod {
    pub const ALL: [SaliencyMethod; 2] = [SaliencyMethod::Rise, SaliencyMethod::InvRise];
}

impl fmt::Display for SaliencyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaliencyMethod::Rise => "RISE",
            SaliencyMethod::InvRise => "InvRISE",
        })
    }
}

impl FromStr for SaliencyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rise" => Ok(SaliencyMethod::Rise),
            "invrise" => Ok(SaliencyMethod::InvRise),
            _ => Err(Error::invalid(format!("unknown saliency method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    side: usize,
    values: Vec<f64>,
    method: SaliencyMethod,
    target_class: Label,
    /// Flat indices where the normalizer was zero; their value is 0.
    undefined_pixels: Vec<usize>,
}

impl SaliencyMap {
    /// A map with given values, no undefined pixels, tagged as InvRISE / NOK.
    pub fn from_values(side: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), side * side, "saliency values must be side x side");
        Self {
            side,
            values,
            method: SaliencyMethod::InvRise,
            target_class: Label::Nok,
            undefined_pixels: Vec::new(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.side + x]
    }

    pub fn method(&self) -> SaliencyMethod {
        self.method
    }

    pub fn target_class(&self) -> Label {
        self.target_class
    }

    pub fn undefined_pixels(&self) -> &[usize] {
        &self.undefined_pixels
    }

    /// Flat index of the largest value, smallest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// One classifier call per mask, in mask order, as target-class confidences.
fn masked_scores(image: &Image, classifier: &dyn BlackBox, masks: &MaskSet, target: Label) -> Result<Vec<f64>> {
    if image.side() != masks.side() {
        return Err(Error::invalid(format!(
            "image side {} does not match mask side {}",
            image.side(),
            masks.side()
        )));
    }
    let total = masks.k();
    let mut scores = Vec::with_capacity(total);
    for chunk in masks.masks().chunks(BATCH) {
        let batch = chunk
            .par_iter()
            .map(|m| apply_mask(image, m))
            .collect::<Result<Vec<_>>>()?;
        match classifier.predict_batch(&batch) {
            Ok(confs) => scores.extend(confs.into_iter().map(|c| c.of(target))),
            Err(e) => {
                return Err(Error::Aborted {
                    completed: scores.len(),
                    total,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(scores)
}

fn finish(sums: Vec<f64>, normalizer: &[f64], method: SaliencyMethod, target: Label, side: usize) -> SaliencyMap {
    let mut undefined_pixels = Vec::new();
    let values = sums
        .into_iter()
        .zip(normalizer)
        .enumerate()
        .map(|(i, (s, &n))| {
            if n > 0.0 {
                s / n
            } else {
                undefined_pixels.push(i);
                0.0
            }
        })
        .collect();
    SaliencyMap {
        side,
        values,
        method,
        target_class: target,
        undefined_pixels,
    }
}

/// `S(λ) = 1/P[M_λ=0] · Σ_m (1 - f(I⊙m)) · m̄(λ) / k`, with `f` the
/// confidence for `target`.
pub fn invrise(image: &Image, classifier: &dyn BlackBox, masks: &MaskSet, target: Label) -> Result<SaliencyMap> {
    let scores = masked_scores(image, classifier, masks, target)?;
    let k = masks.k() as f64;
    let mut sums = vec![0.0; masks.side() * masks.side()];
    for (index, f) in scores.iter().enumerate() {
        let w = (1.0 - f) / k;
        if masks.soft_complement() {
            for (s, &v) in sums.iter_mut().zip(masks.masks()[index].values()) {
                *s += w * (1.0 - v);
            }
        } else {
            for (s, &v) in sums.iter_mut().zip(masks.masks()[index].values()) {
                if v <= OCCLUSION_EPS {
                    *s += w;
                }
            }
        }
    }
    Ok(finish(sums, masks.occlusion_prob(), SaliencyMethod::InvRise, target, masks.side()))
}

/// `S(λ) = Σ_m f(I⊙m) · m(λ) / (k · v̄(λ))` over the soft masks.
pub fn rise(image: &Image, classifier: &dyn BlackBox, masks: &MaskSet, target: Label) -> Result<SaliencyMap> {
    let scores = masked_scores(image, classifier, masks, target)?;
    let k = masks.k() as f64;
    let mut sums = vec![0.0; masks.side() * masks.side()];
    for (index, f) in scores.iter().enumerate() {
        let w = f / k;
        for (s, &v) in sums.iter_mut().zip(masks.masks()[index].values()) {
            *s += w * v;
        }
    }
    Ok(finish(sums, masks.mean_visible(), SaliencyMethod::Rise, target, masks.side()))
}

pub fn explain(
    method: SaliencyMethod,
    image: &Image,
    classifier: &dyn BlackBox,
    masks: &MaskSet,
    target: Label,
) -> Result<SaliencyMap> {
    match method {
        SaliencyMethod::Rise => rise(image, classifier, masks, target),
        SaliencyMethod::InvRise => invrise(image, classifier, masks, target),
    }
}

/// The `⌈fraction · side²⌉` most salient pixels, earlier row-major pixels
/// winning ties.
pub fn binarize_topfraction(map: &SaliencyMap, fraction: f64) -> Result<BinaryMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} must lie in (0, 1]")));
    }
    let n = map.values.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    let mut values = vec![false; n];
    for &i in &order[..keep] {
        values[i] = true;
    }
    BinaryMask::new(map.side, values)
}

const GRID_MAGIC: &[u8; 8] = b"IVRSSAL1";

/// Binary float grid: magic, side as u32, then row-major little-endian f64s.
pub fn encode_float_grid(map: &SaliencyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * map.values.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(map.side as u32).to_le_bytes());
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Values and side of a float grid written by [`encode_float_grid`].
pub fn decode_float_grid(bytes: &[u8]) -> Result<(usize, Vec<f64>)> {
    if bytes.len() < 12 || &bytes[..8] != GRID_MAGIC {
        return Err(Error::format("<saliency grid>", "not a saliency grid"));
    }
    let side = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 8 * side * side {
        return Err(Error::format("<saliency grid>", "truncated saliency grid"));
    }
    let values = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((side, values))
}

pub fn save_float_grid(map: &SaliencyMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_float_grid(map)).map_err(|e| Error::io(path, e))
}

/// RGB image: the grayscale input blended toward red by normalized saliency.
pub fn overlay(image: &Image, map: &SaliencyMap) -> Result<Image> {
    if image.side() != map.side {
        return Err(Error::invalid("overlay image and saliency sizes differ"));
    }
    let gray = image.to_gray();
    let lo = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let alpha = 0.6;
    Ok(Image::from_fn(map.side, 3, |x, y, c| {
        let heat = if span > 0.0 { (map.get(x, y) - lo) / span } else { 0.0 };
        let base = gray.get(x, y, 0);
        let target = if c == 0 { 1.0 } else { 0.0 };
        (1.0 - alpha * heat) * base + alpha * heat * target
    }))
}
