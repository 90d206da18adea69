//! Synthetic weld-seam dataset: procedurally textured plates with a
//! horizontal scalloped seam, five defect kinds with pixel-exact defect
//! masks, stratified four-way splits, and an on-disk manifest.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, Image};
use crate::rng;

pub const DEFAULT_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "NOK")]
    Nok,
}

impl Label {
    pub fn other(self) -> Label {
        match self {
            Label::Ok => Label::Nok,
            Label::Nok => Label::Ok,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Ok => "OK",
            Label::Nok => "NOK",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    Scratch,
    Pore,
    Gap,
    IrregularScale,
    MissingSeam,
}

impl DefectKind {
    /// Defects applied to an existing seam (everything but a missing seam).
    pub const SEAM_DEFECTS: [DefectKind; 4] = [
        DefectKind::Scratch,
        DefectKind::Pore,
        DefectKind::Gap,
        DefectKind::IrregularScale,
    ];

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSpec {
    Ok,
    Nok(DefectKind),
    /// A bare plate. Labeled NOK; its defect mask is the expected seam band.
    NoSeam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub image: Image,
    pub label: Label,
    pub defect_mask: Option<BinaryMask>,
    pub defect_kind: Option<DefectKind>,
    pub generator_seed: u64,
}

impl LabeledInstance {
    /// Check the label/mask consistency rule: NOK iff a nonempty defect mask.
    pub fn validate(&self) -> Result<()> {
        let has_defect = self.defect_mask.as_ref().is_some_and(|m| !m.is_empty());
        match (self.label, has_defect) {
            (Label::Nok, false) => Err(Error::invalid(format!("NOK instance {} has no defect mask", self.id))),
            (Label::Ok, true) => Err(Error::invalid(format!("OK instance {} carries a defect mask", self.id))),
            _ => {
                if let Some(m) = &self.defect_mask {
                    if m.side() != self.image.side() {
                        return Err(Error::invalid(format!("instance {}: mask and image sizes differ", self.id)));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Scene parameters drawn once per seed and shared between the OK render and
/// every defect variant of that seed.
struct Scene {
    side: usize,
    channels: usize,
    plate: Vec<f64>,
    noise: Vec<f64>,
    band_center: f64,
    band_slope: f64,
    half_height: f64,
    period: f64,
    phase: f64,
    tint: [f64; 3],
}

impl Scene {
    fn draw(seed: u64, side: usize, channels: usize) -> Self {
        let mut r = rng::stream(seed, "scene", 0);
        let s = side as f64;
        let base = r.random_range(0.30..0.40);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    r.random_range(0.01..0.03),
                    r.random_range(0.5..2.5) / s,
                    r.random_range(0.5..2.5) / s,
                    r.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let noise: Vec<f64> = (0..side * side).map(|_| r.random_range(-0.02..0.02)).collect();
        let plate = (0..side * side)
            .map(|i| {
                let (x, y) = ((i % side) as f64, (i / side) as f64);
                let w: f64 = waves
                    .iter()
                    .map(|(a, fx, fy, ph)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
                    .sum();
                base + w
            })
            .collect();
        let tint = [1.0, r.random_range(0.95..1.0), r.random_range(0.88..0.96)];
        Self {
            side,
            channels,
            plate,
            noise,
            band_center: s / 2.0 + r.random_range(-s / 16.0..s / 16.0),
            band_slope: r.random_range(-0.04..0.04),
            half_height: s * r.random_range(0.11..0.14),
            period: s * r.random_range(0.11..0.14),
            phase: r.random_range(0.0..s),
            tint,
        }
    }

    fn band_offset(&self, x: usize, y: usize) -> f64 {
        let center = self.band_center + self.band_slope * (x as f64 - self.side as f64 / 2.0);
        (y as f64 - center) / self.half_height
    }

    fn in_band(&self, x: usize, y: usize) -> bool {
        self.band_offset(x, y).abs() <= 1.0
    }

    fn plate_value(&self, x: usize, y: usize) -> f64 {
        let i = y * self.side + x;
        self.plate[i] + self.noise[i]
    }

    /// Scalloped seam brightness at `(x, y)` for a given scale period.
    fn seam_value(&self, x: usize, y: usize, period: f64, phase: f64) -> f64 {
        let dy = self.band_offset(x, y);
        let arc = (x as f64 + 0.6 * self.half_height * dy * dy + phase) / period;
        let scallop = 0.5 + 0.5 * (std::f64::consts::TAU * arc).cos();
        0.60 + 0.20 * scallop - 0.10 * dy * dy + self.noise[y * self.side + x]
    }

    fn ok_gray(&self) -> Vec<f64> {
        (0..self.side * self.side)
            .map(|i| {
                let (x, y) = (i % self.side, i / self.side);
                if self.in_band(x, y) {
                    self.seam_value(x, y, self.period, self.phase)
                } else {
                    self.plate_value(x, y)
                }
            })
            .collect()
    }

    fn to_image(&self, gray: &[f64]) -> Image {
        let mut img = Image::from_fn(self.side, self.channels, |x, y, c| {
            gray[y * self.side + x] * if self.channels == 3 { self.tint[c] } else { 1.0 }
        });
        img.quantize8();
        img
    }
}

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn apply_defect(scene: &Scene, gray: &mut [f64], kind: DefectKind, seed: u64, attempt: u64) {
    let side = scene.side;
    let s = side as f64;
    let unit = s / 64.0;
    let mut r = rng::stream(seed, "defect", kind.index() * 1000 + attempt);
    let dark = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(0.06..0.14);
    match kind {
        DefectKind::Scratch => {
            let top = scene.band_center - scene.half_height - 3.0 * unit;
            let bottom = scene.band_center + scene.half_height + 3.0 * unit;
            let x0 = r.random_range(0.15 * s..0.85 * s);
            let points = [
                (x0, top),
                (x0 + r.random_range(-6.0..6.0) * unit, (top + bottom) / 2.0),
                (x0 + r.random_range(-10.0..10.0) * unit, bottom),
            ];
            let half_width = r.random_range(1.0..1.6) * unit;
            let value = dark(&mut r);
            for (i, v) in gray.iter_mut().enumerate() {
                let p = ((i % side) as f64, (i / side) as f64);
                let d = distance_to_segment(p, points[0], points[1]).min(distance_to_segment(p, points[1], points[2]));
                if d <= half_width {
                    *v = value + scene.noise[i] * 0.5;
                }
            }
        }
        DefectKind::Pore => {
            let count = r.random_range(2..=4);
            for _ in 0..count {
                let cx = r.random_range(0.12 * s..0.88 * s);
                let cy = scene.band_center + r.random_range(-0.6..0.6) * scene.half_height;
                let rx = r.random_range(2.0..3.5) * unit;
                let ry = r.random_range(2.0..3.5) * unit;
                let value = dark(&mut r);
                for (i, v) in gray.iter_mut().enumerate() {
                    let (x, y) = ((i % side) as f64, (i / side) as f64);
                    if ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0 {
                        *v = value + scene.noise[i] * 0.5;
                    }
                }
            }
        }
        DefectKind::Gap => {
            let width = r.random_range(0.15 * s..0.28 * s);
            let start = r.random_range(0.05 * s..0.95 * s - width);
            for (i, v) in gray.iter_mut().enumerate() {
                let (x, y) = (i % side, i / side);
                let xf = x as f64;
                if xf >= start && xf < start + width && scene.in_band(x, y) {
                    *v = scene.plate_value(x, y);
                }
            }
        }
        DefectKind::IrregularScale => {
            let width = r.random_range(0.2 * s..0.35 * s);
            let start = r.random_range(0.05 * s..0.95 * s - width);
            let period = scene.period * r.random_range(0.4..0.6);
            let phase = r.random_range(0.0..s);
            for (i, v) in gray.iter_mut().enumerate() {
                let (x, y) = (i % side, i / side);
                let xf = x as f64;
                if xf >= start && xf < start + width && scene.in_band(x, y) {
                    *v = scene.seam_value(x, y, period, phase) - 0.08;
                }
            }
        }
        DefectKind::MissingSeam => {
            for (i, v) in gray.iter_mut().enumerate() {
                let (x, y) = (i % side, i / side);
                if scene.in_band(x, y) {
                    *v = scene.plate_value(x, y);
                }
            }
        }
    }
}

/// Deterministically render one instance. The defect mask is exactly the set
/// of pixels where the NOK render differs from the OK render of the same seed.
pub fn generate_instance(seed: u64, class: ClassSpec, side: usize, channels: usize) -> LabeledInstance {
    let scene = Scene::draw(seed, side, channels);
    let ok_gray = scene.ok_gray();
    let ok = scene.to_image(&ok_gray);
    let id = format!("{:016x}", rng::derive(seed, "id", 0));
    let kind = match class {
        ClassSpec::Ok => {
            return LabeledInstance {
                id,
                image: ok,
                label: Label::Ok,
                defect_mask: None,
                defect_kind: None,
                generator_seed: seed,
            }
        }
        ClassSpec::Nok(kind) => kind,
        ClassSpec::NoSeam => DefectKind::MissingSeam,
    };
    for attempt in 0.. {
        let mut gray = ok_gray.clone();
        apply_defect(&scene, &mut gray, kind, seed, attempt);
        let image = scene.to_image(&gray);
        let ch = channels;
        let mask = BinaryMask::from_fn(side, |x, y| {
            let i = (y * side + x) * ch;
            image.pixels()[i..i + ch] != ok.pixels()[i..i + ch]
        });
        if !mask.is_empty() {
            return LabeledInstance {
                id,
                image,
                label: Label::Nok,
                defect_mask: Some(mask),
                defect_kind: Some(kind),
                generator_seed: seed,
            };
        }
    }
    unreachable!()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub ok: usize,
    pub no_seam: usize,
    pub nok: usize,
    pub side: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    /// Class counts of the physical weld-seam collection: 139 regular seams,
    /// 110 bare plates, 164 irregular seams.
    fn default() -> Self {
        Self {
            ok: 139,
            no_seam: 110,
            nok: 164,
            side: DEFAULT_SIDE,
            channels: 1,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.ok + self.no_seam + self.nok
    }

    /// Class of the `index`-th instance: OK first, then bare plates, then seam
    /// defects cycling through the four kinds.
    pub fn class_of(&self, index: usize) -> ClassSpec {
        if index < self.ok {
            ClassSpec::Ok
        } else if index < self.ok + self.no_seam {
            ClassSpec::NoSeam
        } else {
            let k = index - self.ok - self.no_seam;
            ClassSpec::Nok(DefectKind::SEAM_DEFECTS[k % DefectKind::SEAM_DEFECTS.len()])
        }
    }
}

pub fn generate_dataset(config: &DatasetConfig) -> Vec<LabeledInstance> {
    (0..config.total())
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive(config.seed, "instance", i as u64);
            generate_instance(seed, config.class_of(i), config.side, config.channels)
        })
        .collect()
}

/// Brushed-metal textures used as backgrounds for composited refutations.
pub fn generate_backgrounds(count: usize, side: usize, channels: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, "background", i as u64);
            let base = r.random_range(0.35..0.55);
            let rows: Vec<f64> = (0..side).map(|_| r.random_range(-0.06..0.06)).collect();
            let mut streak: Vec<f64> = (0..side * side).map(|_| r.random_range(-0.04..0.04)).collect();
            // Smooth along x for the brushed look.
            for y in 0..side {
                for x in 1..side {
                    streak[y * side + x] = 0.7 * streak[y * side + x - 1] + 0.3 * streak[y * side + x];
                }
            }
            let mut img = Image::from_fn(side, channels, |x, y, _| base + rows[y] + streak[y * side + x]);
            img.quantize8();
            img
        })
        .collect()
}

/// Fractions for train, validation, test and interactive pool.
pub type SplitRatios = [f64; 4];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub interactive: Vec<String>,
}

impl DatasetSplits {
    pub fn parts(&self) -> [&Vec<String>; 4] {
        [&self.train, &self.validation, &self.test, &self.interactive]
    }
}

/// Split sizes for `n` items by largest remainder (ties to the earlier split).
fn split_sizes(n: usize, ratios: &SplitRatios) -> [usize; 4] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 4];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let mut rest = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            rest -= 1;
        }
    }
    sizes
}

/// Stratified, seeded four-way split. Each label's members are shuffled and
/// spread evenly over a merged ordering, which is then cut into consecutive
/// chunks of the target sizes, so every split holds each label within one
/// instance of its global proportion.
pub fn split_dataset(instances: &[LabeledInstance], ratios: SplitRatios, seed: u64) -> Result<DatasetSplits> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid(format!("split ratios must be nonnegative, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios sum to {sum}, expected 1")));
    }
    let mut by_label: Vec<(Label, Vec<&str>)> = vec![(Label::Ok, vec![]), (Label::Nok, vec![])];
    for inst in instances {
        let group = if inst.label == Label::Ok { 0 } else { 1 };
        by_label[group].1.push(&inst.id);
    }
    let mut merged: Vec<(f64, usize, &str)> = Vec::with_capacity(instances.len());
    for (g, (_, ids)) in by_label.iter_mut().enumerate() {
        ids.sort_unstable();
        ids.shuffle(&mut rng::stream(seed, "split", g as u64));
        let n = ids.len() as f64;
        merged.extend(ids.iter().enumerate().map(|(j, id)| ((j as f64 + 0.5) / n, g, *id)));
    }
    merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let sizes = split_sizes(merged.len(), &ratios);
    let mut parts: [Vec<String>; 4] = Default::default();
    let mut it = merged.into_iter();
    for (part, size) in parts.iter_mut().zip(sizes) {
        part.extend(it.by_ref().take(size).map(|(_, _, id)| id.to_string()));
    }
    let [train, validation, test, interactive] = parts;
    Ok(DatasetSplits {
        train,
        validation,
        test,
        interactive,
    })
}

/// An indexed collection of instances.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    instances: Vec<LabeledInstance>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(instances: Vec<LabeledInstance>) -> Result<Self> {
        let mut index = HashMap::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            inst.validate()?;
            if index.insert(inst.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate instance id {}", inst.id)));
            }
        }
        Ok(Self { instances, index })
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&LabeledInstance> {
        self.index
            .get(id)
            .map(|&i| &self.instances[i])
            .ok_or_else(|| Error::NotFound(format!("instance {id}")))
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<&LabeledInstance>> {
        ids.iter().map(|id| self.get(id)).collect()
    }

    /// Check that `splits` are pairwise disjoint, reference known ids and
    /// cover the dataset.
    pub fn check_splits(&self, splits: &DatasetSplits) -> Result<()> {
        let mut seen = HashSet::new();
        for part in splits.parts() {
            for id in part {
                self.get(id)?;
                if !seen.insert(id.as_str()) {
                    return Err(Error::invalid(format!("id {id} appears in more than one split")));
                }
            }
        }
        if seen.len() != self.len() {
            return Err(Error::invalid(format!(
                "splits cover {} of {} instances",
                seen.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BACKGROUND_DIR: &str = "backgrounds";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    label: Label,
    kind: Option<DefectKind>,
    seed: u64,
    image: String,
    mask: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    instances: Vec<ManifestEntry>,
    splits: Option<DatasetSplits>,
}

const MANIFEST_FORMAT: &str = "invrise-dataset";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write `manifest.json`, `images/<id>.png` and `masks/<id>.png` under `dir`.
pub fn save_manifest(dir: &Path, instances: &[LabeledInstance], splits: Option<&DatasetSplits>) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let mut entries = Vec::with_capacity(instances.len());
    let mut seen = HashSet::new();
    for inst in instances {
        inst.validate()?;
        if !seen.insert(&inst.id) {
            return Err(Error::invalid(format!("duplicate instance id {}", inst.id)));
        }
        let image = format!("images/{}.png", inst.id);
        imaging::save_png(&inst.image, &dir.join(&image))?;
        let mask = match &inst.defect_mask {
            Some(m) => {
                let rel = format!("masks/{}.png", inst.id);
                imaging::save_mask_png(m, &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: inst.id.clone(),
            label: inst.label,
            kind: inst.defect_kind,
            seed: inst.generator_seed,
            image,
            mask,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        instances: entries,
        splits: splits.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Load a dataset directory written by [`save_manifest`].
pub fn load_manifest(dir: &Path) -> Result<(Dataset, Option<DatasetSplits>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::format(&path, format!("unexpected format tag {:?}", manifest.format)));
    }
    let mut seen = HashSet::new();
    let mut instances = Vec::with_capacity(manifest.instances.len());
    for e in manifest.instances {
        if !seen.insert(e.id.clone()) {
            return Err(Error::format(&path, format!("duplicate instance id {}", e.id)));
        }
        let with_id = |err: Error| Error::format(&path, format!("instance {}: {err}", e.id));
        let image = imaging::load_png(&dir.join(&e.image)).map_err(with_id)?;
        let defect_mask = match &e.mask {
            Some(rel) => Some(imaging::load_mask_png(&dir.join(rel)).map_err(with_id)?),
            None => None,
        };
        let inst = LabeledInstance {
            id: e.id.clone(),
            image,
            label: e.label,
            defect_mask,
            defect_kind: e.kind,
            generator_seed: e.seed,
        };
        inst.validate().map_err(with_id)?;
        instances.push(inst);
    }
    let dataset = Dataset::new(instances)?;
    if let Some(s) = &manifest.splits {
        dataset.check_splits(s).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    Ok((dataset, manifest.splits))
}

pub fn save_backgrounds(dir: &Path, backgrounds: &[Image]) -> Result<()> {
    let bg_dir = dir.join(BACKGROUND_DIR);
    create_dir(&bg_dir)?;
    for (i, img) in backgrounds.iter().enumerate() {
        imaging::save_png(img, &bg_dir.join(format!("bg-{i:03}.png")))?;
    }
    Ok(())
}

/// Load `backgrounds/*.png` in file-name order; a missing directory yields none.
pub fn load_backgrounds(dir: &Path) -> Result<Vec<Image>> {
    let bg_dir = dir.join(BACKGROUND_DIR);
    if !bg_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&bg_dir)
        .map_err(|e| Error::io(&bg_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    paths.iter().map(|p| imaging::load_png(p)).collect()
}
