//! Deterministic unpaired two-modality segmentation datasets.
//!
//! Scenes are label maps of randomized ellipses over background. Each scene
//! is rendered in exactly one modality; the modalities differ in their class
//! intensity mapping, texture and noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{io, Tensor};
use crate::Modality;

/// One rasterized ellipse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub class: usize,
    /// (row, column) of the centre.
    pub center: [f64; 2],
    /// Semi-axes before rotation.
    pub radii: [f64; 2],
    pub angle: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center[0], x - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.radii[1]).powi(2) + (v / self.radii[0]).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub labels: LabelMap,
    pub blobs: Vec<Blob>,
}

/// Placement rules for foreground blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    /// Allowed per-class pixel fraction.
    pub min_fraction: f64,
    pub max_fraction: f64,
    /// Semi-axis range in pixels.
    pub radius_range: [f64; 2],
    /// Centre region per foreground class as fractions (row_lo, row_hi,
    /// col_lo, col_hi); classes without an entry use the whole image.
    pub anchors: Vec<[f64; 4]>,
    /// The pair placed in contact with each other.
    pub confusable: [usize; 2],
    pub max_retries: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            min_fraction: 0.02,
            max_fraction: 0.15,
            radius_range: [6.0, 11.0],
            anchors: vec![
                [0.35, 0.65, 0.2, 0.45],
                [0.35, 0.65, 0.55, 0.8],
                [0.1, 0.3, 0.2, 0.8],
                [0.7, 0.9, 0.2, 0.8],
            ],
            confusable: [1, 2],
            max_retries: 200,
        }
    }
}

impl LayoutConfig {
    fn validate(&self, classes: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("layout: {m}")));
        if !(0.0..=self.max_fraction).contains(&self.min_fraction) || self.max_fraction > 1.0 {
            return bad("fraction range must satisfy 0 <= min <= max <= 1");
        }
        if !(self.radius_range[0] > 0.0 && self.radius_range[0] <= self.radius_range[1]) {
            return bad("radius range must be positive and ordered");
        }
        if self
            .anchors
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return bad("anchor fractions must lie in [0, 1]");
        }
        let [p, q] = self.confusable;
        if classes > 2 && (p == q || p == 0 || q == 0 || p >= classes || q >= classes) {
            return bad("confusable pair must be two distinct foreground classes");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }
}

/// Draws a scene whose foreground fractions all fall in range and whose
/// confusable pair shares a 4-connected border. Retries with the same RNG
/// stream until success or `max_retries`.
pub fn generate_label_scene(
    seed: u64,
    classes: usize,
    height: usize,
    width: usize,
    layout: &LayoutConfig,
) -> Result<Scene> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidShape {
            shape: vec![height, width],
            reason: "empty scene".into(),
        });
    }
    layout.validate(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..layout.max_retries {
        let blobs = draw_blobs(&mut rng, classes, height, width, layout);
        let labels = rasterize(&blobs, height, width);
        if accept(&labels, classes, height, width, layout) {
            return Ok(Scene {
                seed,
                labels: LabelMap::new(&[height, width], labels)?,
                blobs,
            });
        }
    }
    Err(Error::InfeasibleLayout(layout.max_retries))
}

fn draw_blobs(
    rng: &mut ChaCha8Rng,
    classes: usize,
    h: usize,
    w: usize,
    layout: &LayoutConfig,
) -> Vec<Blob> {
    let [r_lo, r_hi] = layout.radius_range;
    let (hf, wf) = (h as f64, w as f64);
    let [first, second] = layout.confusable;
    let mut blobs: Vec<Blob> = Vec::with_capacity(classes - 1);
    for class in 1..classes {
        let radii = [rng.random_range(r_lo..=r_hi), rng.random_range(r_lo..=r_hi)];
        let angle = rng.random_range(0.0..PI);
        let partner = blobs.iter().find(|b| b.class == first);
        let center = match partner {
            Some(p) if classes > 2 && class == second => {
                let theta = rng.random_range(-PI / 4.0..PI / 4.0);
                let reach = 0.4 * (p.radii[0] + p.radii[1] + radii[0] + radii[1]);
                [
                    p.center[0] + reach * theta.sin(),
                    p.center[1] + reach * theta.cos(),
                ]
            }
            _ => {
                let a = layout
                    .anchors
                    .get(class - 1)
                    .copied()
                    .unwrap_or([0.0, 1.0, 0.0, 1.0]);
                [
                    hf * rng.random_range(a[0]..=a[1]),
                    wf * rng.random_range(a[2]..=a[3]),
                ]
            }
        };
        blobs.push(Blob {
            class,
            center,
            radii,
            angle,
        });
    }
    blobs
}

/// Later blobs overwrite earlier ones.
fn rasterize(blobs: &[Blob], h: usize, w: usize) -> Vec<usize> {
    let mut labels = vec![0; h * w];
    for b in blobs {
        for y in 0..h {
            for x in 0..w {
                if b.contains(y as f64, x as f64) {
                    labels[y * w + x] = b.class;
                }
            }
        }
    }
    labels
}

fn accept(labels: &[usize], classes: usize, h: usize, w: usize, layout: &LayoutConfig) -> bool {
    let total = (h * w) as f64;
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if counts[0] == 0 {
        return false;
    }
    let in_range = counts[1..].iter().all(|&c| {
        let f = c as f64 / total;
        f >= layout.min_fraction && f <= layout.max_fraction
    });
    if !in_range {
        return false;
    }
    if classes == 2 {
        return true;
    }
    let [p, q] = layout.confusable;
    (0..h).any(|y| {
        (0..w).any(|x| {
            let l = labels[y * w + x];
            let touch = |o: usize| (l == p && o == q) || (l == q && o == p);
            (x + 1 < w && touch(labels[y * w + x + 1]))
                || (y + 1 < h && touch(labels[(y + 1) * w + x]))
        })
    })
}

/// Mapping applied to the per-class mean intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum IntensityTransform {
    Identity,
    Affine {
        a: f64,
        b: f64,
    },
    /// Reflects means about their midrange, reversing their order.
    AntiCorrelated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityProfile {
    pub class_means: Vec<f64>,
    pub texture_amplitude: Vec<f64>,
    pub noise_sigma: f64,
    pub transform: IntensityTransform,
    /// Box-filter radius; 1 gives a 3×3 filter, 0 disables smoothing.
    pub smoothing_radius: usize,
    /// Required ratio of the smallest class-mean gap to `noise_sigma`.
    pub separation_margin: f64,
}

impl ModalityProfile {
    /// Well-contrasted modality with mild noise.
    pub fn default_a(classes: usize) -> Self {
        Self {
            class_means: default_means(classes),
            texture_amplitude: vec![0.15; classes],
            noise_sigma: 0.25,
            transform: IntensityTransform::Identity,
            smoothing_radius: 1,
            separation_margin: 1.2,
        }
    }

    /// Inverted, noisier and more textured counterpart of [`Self::default_a`].
    pub fn default_b(classes: usize) -> Self {
        Self {
            class_means: default_means(classes),
            texture_amplitude: vec![0.35; classes],
            noise_sigma: 0.5,
            transform: IntensityTransform::AntiCorrelated,
            smoothing_radius: 1,
            separation_margin: 0.6,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("profile: {m}")));
        if self.class_means.len() != classes || self.texture_amplitude.len() != classes {
            return bad(format!(
                "expected {classes} class means and texture amplitudes"
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative".into());
        }
        if self
            .texture_amplitude
            .iter()
            .any(|a| !(*a >= 0.0 && a.is_finite()))
        {
            return bad("texture amplitudes must be finite and non-negative".into());
        }
        let means = self.transformed_means();
        let mut sorted = means.clone();
        sorted.sort_by(f64::total_cmp);
        let gap = sorted
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if gap <= self.separation_margin * self.noise_sigma {
            return bad(format!(
                "smallest class-mean gap {gap} does not exceed {} x noise sigma {}",
                self.separation_margin, self.noise_sigma
            ));
        }
        Ok(())
    }

    pub fn transformed_means(&self) -> Vec<f64> {
        let m = &self.class_means;
        match self.transform {
            IntensityTransform::Identity => m.clone(),
            IntensityTransform::Affine { a, b } => m.iter().map(|v| a * v + b).collect(),
            IntensityTransform::AntiCorrelated => {
                let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m.iter().map(|v| lo + hi - v).collect()
            }
        }
    }
}

/// Background darkest; the confusable pair 1 and 2 sit closest together.
fn default_means(classes: usize) -> Vec<f64> {
    let base = [0.0, 1.6, 2.2, 3.4, 4.6];
    (0..classes)
        .map(|c| base.get(c).copied().unwrap_or(1.2 * c as f64))
        .collect()
}

/// Intensity image of shape 1×H×W: class means, texture and noise, box
/// smoothing, then per-image standardization. A constant image is left
/// unscaled.
pub fn render_modality(scene: &Scene, profile: &ModalityProfile, seed: u64) -> Result<Tensor> {
    let image = render_raw(scene, profile, seed)?;
    let (h, w) = (scene.labels.shape()[0], scene.labels.shape()[1]);
    Tensor::from_vec(&[1, h, w], standardize(image))
}

/// Rendering before standardization.
pub fn render_raw(scene: &Scene, profile: &ModalityProfile, seed: u64) -> Result<Vec<f64>> {
    let shape = scene.labels.shape();
    let classes = profile.class_means.len();
    scene.labels.check_range(classes)?;
    profile.validate(classes)?;
    let (h, w) = (shape[0], shape[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = sinusoid_field(&mut rng, h, w, 3);
    let means = profile.transformed_means();
    let noise = Normal::new(0.0, profile.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut image: Vec<f64> = scene
        .labels
        .values()
        .iter()
        .zip(&texture)
        .map(|(&c, &t)| means[c] + profile.texture_amplitude[c] * t)
        .collect();
    if profile.noise_sigma > 0.0 {
        for v in &mut image {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(box_filter(&image, h, w, profile.smoothing_radius))
}

/// Mean of `k` plane waves with 1 to 4 cycles across the image; values in [−1, 1].
fn sinusoid_field(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| {
            let cycles = rng.random_range(1.0..4.0);
            let dir = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            (
                cycles * dir.cos() / h as f64,
                cycles * dir.sin() / w as f64,
                phase,
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = waves
                .iter()
                .map(|(fy, fx, p)| (2.0 * PI * (fy * y as f64 + fx * x as f64) + p).sin())
                .sum();
            out.push(s / k as f64);
        }
    }
    out
}

/// Mean over the (2r+1)² window clipped to the image.
fn box_filter(image: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return image.to_vec();
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    s += image[yy * w + xx];
                }
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var > 0.0 {
        let sd = var.sqrt();
        for x in &mut v {
            *x = (*x - mean) / sd;
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Train/val/test counts: fractions rounded down, remainder to training,
/// and one case moved from training to validation if validation is empty.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let val = (n as f64 * fractions[1]).floor() as usize;
    let test = (n as f64 * fractions[2]).floor() as usize;
    let mut counts = [n - val - test, val, test];
    if counts[1] == 0 && counts[0] > 1 {
        counts[0] -= 1;
        counts[1] = 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub modality: Modality,
    /// Scenes use seeds `first_seed .. first_seed + count`.
    pub first_seed: u64,
    pub count: usize,
    pub profile: ModalityProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub layout: LayoutConfig,
    pub modalities: Vec<ModalitySpec>,
    pub split_fractions: [f64; 3],
}

impl DatasetConfig {
    /// Five classes at 64×64; 40 scenes of modality A and 5 of modality B.
    pub fn desk_default() -> Self {
        let classes = 5;
        Self {
            classes,
            height: 64,
            width: 64,
            layout: LayoutConfig::default(),
            modalities: vec![
                ModalitySpec {
                    modality: Modality::A,
                    first_seed: 1000,
                    count: 40,
                    profile: ModalityProfile::default_a(classes),
                },
                ModalitySpec {
                    modality: Modality::B,
                    first_seed: 5000,
                    count: 5,
                    profile: ModalityProfile::default_b(classes),
                },
            ],
            split_fractions: [0.7, 0.1, 0.2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for spec in &self.modalities {
            if seen.insert(spec.modality, ()).is_some() {
                return Err(Error::Config(format!(
                    "modality {} listed twice",
                    spec.modality
                )));
            }
            if spec.count == 0 {
                return Err(Error::Config(format!(
                    "modality {} has no scenes",
                    spec.modality
                )));
            }
            spec.profile.validate(self.classes)?;
        }
        for (i, a) in self.modalities.iter().enumerate() {
            for b in &self.modalities[i + 1..] {
                let lo = a.first_seed.max(b.first_seed);
                let hi = (a.first_seed + a.count as u64).min(b.first_seed + b.count as u64);
                if lo < hi {
                    return Err(Error::PairingViolation(lo));
                }
            }
        }
        split_counts(1, self.split_fractions)?;
        self.layout.validate(self.classes)
    }
}

/// Seeds per split for one modality.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSeeds {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitSeeds {
    pub fn get(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub splits: BTreeMap<Modality, SplitSeeds>,
}

impl DatasetManifest {
    /// Seeds appearing under more than one modality.
    pub fn shared_seeds(&self) -> Vec<u64> {
        let mut owner: BTreeMap<u64, Modality> = BTreeMap::new();
        let mut shared = Vec::new();
        for (m, s) in &self.splits {
            for seed in s.train.iter().chain(&s.val).chain(&s.test) {
                if let Some(prev) = owner.insert(*seed, *m) {
                    if prev != *m {
                        shared.push(*seed);
                    }
                }
            }
        }
        shared
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub seed: u64,
    /// 1×H×W standardized intensities.
    pub image: Tensor,
    /// H×W class indices.
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    cases: BTreeMap<(Modality, Split), Vec<Case>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Render seed derived from the scene seed so image noise differs per modality.
fn render_seed(scene_seed: u64, modality: Modality) -> u64 {
    let salt = match modality {
        Modality::A => 0x9E37_79B9_7F4A_7C15,
        Modality::B => 0xC2B2_AE3D_27D4_EB4F,
    };
    scene_seed ^ salt
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut cases = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for spec in &config.modalities {
        let [n_train, n_val, _] = split_counts(spec.count, config.split_fractions)?;
        let mut seeds = SplitSeeds::default();
        for i in 0..spec.count {
            let seed = spec.first_seed + i as u64;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let scene = generate_label_scene(
                seed,
                config.classes,
                config.height,
                config.width,
                &config.layout,
            )?;
            let image = render_modality(&scene, &spec.profile, render_seed(seed, spec.modality))?;
            match split {
                Split::Train => seeds.train.push(seed),
                Split::Val => seeds.val.push(seed),
                Split::Test => seeds.test.push(seed),
            }
            cases
                .entry((spec.modality, split))
                .or_insert_with(Vec::new)
                .push(Case {
                    seed,
                    image,
                    labels: scene.labels,
                });
        }
        splits.insert(spec.modality, seeds);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            config: config.clone(),
            splits,
        },
        cases,
    })
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.manifest.config.classes
    }

    pub fn cases(&self, modality: Modality, split: Split) -> &[Case] {
        self.cases
            .get(&(modality, split))
            .map_or(&[], Vec::as_slice)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.manifest.splits.keys().copied().collect()
    }

    /// Writes `manifest.json` and `<modality>/<split>/<seed>.img|.lbl`.
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        let mut manifest = serde_json::to_string_pretty(&self.manifest)?;
        manifest.push('\n');
        fs::write(root.join(MANIFEST_FILE), manifest)?;
        for ((modality, split), cases) in &self.cases {
            let dir = root.join(modality.to_string()).join(split.as_str());
            fs::create_dir_all(&dir)?;
            for case in cases {
                io::write(dir.join(format!("{}.img", case.seed)), &case.image)?;
                io::write(
                    dir.join(format!("{}.lbl", case.seed)),
                    &case.labels.to_tensor(),
                )?;
            }
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(root.join(MANIFEST_FILE))?)?;
        let shared = manifest.shared_seeds();
        if let Some(&seed) = shared.first() {
            return Err(Error::PairingViolation(seed));
        }
        let (h, w) = (manifest.config.height, manifest.config.width);
        let mut cases = BTreeMap::new();
        for (modality, seeds) in &manifest.splits {
            for split in Split::ALL {
                let dir = root.join(modality.to_string()).join(split.as_str());
                let mut list = Vec::new();
                for &seed in seeds.get(split) {
                    let image = io::read(dir.join(format!("{seed}.img")))?;
                    let labels =
                        LabelMap::from_tensor(&io::read(dir.join(format!("{seed}.lbl")))?)?;
                    if image.shape() != [1, h, w] || labels.shape() != [h, w] {
                        return Err(Error::Format(format!("case {seed} does not match {h}x{w}")));
                    }
                    labels.check_range(manifest.config.classes)?;
                    list.push(Case {
                        seed,
                        image,
                        labels,
                    });
                }
                if !list.is_empty() {
                    cases.insert((*modality, split), list);
                }
            }
        }
        Ok(Self { manifest, cases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(seed: u64) -> Scene {
        generate_label_scene(seed, 5, 64, 64, &LayoutConfig::default()).unwrap()
    }

    #[test]
    fn scenes_deterministic_and_in_range() {
        assert_eq!(scene(3), scene(3));
        for seed in 0..100 {
            let s = scene(seed);
            let counts = s.labels.counts(5);
            assert!(counts[0] > 0);
            for &c in &counts[1..] {
                let f = c as f64 / 4096.0;
                assert!((0.02..=0.15).contains(&f), "seed {seed}: fraction {f}");
            }
        }
    }

    #[test]
    fn two_class_scene() {
        let s = generate_label_scene(1, 2, 32, 32, &LayoutConfig::default()).unwrap();
        let c = s.labels.counts(2);
        assert!(c[0] > 0 && c[1] > 0);
        assert_eq!(s.blobs.len(), 1);
    }

    #[test]
    fn infeasible_layout_reported() {
        let layout = LayoutConfig {
            min_fraction: 0.9,
            max_fraction: 1.0,
            max_retries: 5,
            ..LayoutConfig::default()
        };
        assert!(matches!(
            generate_label_scene(1, 5, 32, 32, &layout),
            Err(Error::InfeasibleLayout(5))
        ));
    }

    #[test]
    fn piecewise_constant_render() {
        let s = scene(7);
        let profile = ModalityProfile {
            texture_amplitude: vec![0.0; 5],
            noise_sigma: 0.0,
            smoothing_radius: 0,
            ..ModalityProfile::default_a(5)
        };
        let raw = render_raw(&s, &profile, 1).unwrap();
        for (v, &l) in raw.iter().zip(s.labels.values()) {
            assert_eq!(*v, profile.class_means[l]);
        }
    }

    #[test]
    fn anticorrelated_reverses_order() {
        let a = ModalityProfile::default_a(5).transformed_means();
        let b = ModalityProfile::default_b(5).transformed_means();
        for i in 0..5 {
            for j in 0..5 {
                if a[i] < a[j] {
                    assert!(b[i] > b[j]);
                }
            }
        }
    }

    #[test]
    fn standardized_render() {
        let img = render_modality(&scene(2), &ModalityProfile::default_b(5), 11).unwrap();
        let n = img.len() as f64;
        let mean = img.values().iter().sum::<f64>() / n;
        let var = img.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn profile_separation_enforced() {
        let mut p = ModalityProfile::default_a(5);
        p.noise_sigma = 2.0;
        assert!(p.validate(5).is_err());
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_counts(40, [0.7, 0.1, 0.2]).unwrap(), [28, 4, 8]);
        assert_eq!(split_counts(5, [0.7, 0.1, 0.2]).unwrap(), [3, 1, 1]);
        assert!(split_counts(5, [0.7, 0.2, 0.2]).is_err());
    }

    #[test]
    fn overlapping_seeds_rejected() {
        let mut cfg = DatasetConfig::desk_default();
        cfg.modalities[1].first_seed = 1039;
        assert!(matches!(cfg.validate(), Err(Error::PairingViolation(1039))));
    }

    #[test]
    fn dataset_roundtrip() {
        let mut cfg = DatasetConfig::desk_default();
        cfg.height = 32;
        cfg.width = 32;
        cfg.layout.radius_range = [3.0, 5.5];
        cfg.modalities[0].count = 10;
        let ds = build_dataset(&cfg).unwrap();
        assert!(ds.manifest.shared_seeds().is_empty());
        assert_eq!(ds.cases(Modality::A, Split::Train).len(), 7);
        assert_eq!(ds.cases(Modality::B, Split::Val).len(), 1);
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        assert!(dir.path().join("B/test/5004.img").exists());
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
