//! Synthetic skull-like phantoms with injected shade artifacts and a
//! procedural pseudo-prior that corrects mild artifacts and fails on hard ones.
//!
//! Coordinates are normalized to `[-1, 1]` on both axes with `y` growing
//! toward the posterior (bottom) of the image.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::imageio::{load_sbim, save_sbim};
use crate::par;
use crate::scorenet::Reward;
use crate::seeding::{derive_seed, stream_rng};
use crate::training::LabeledPair;

/// Number of addressable slice positions along the head axis.
pub const MAX_SLICES: usize = 64;
/// Peak shade amplitude at severity 1.
pub const SHADE_PEAK: f64 = 0.35;
pub const NOISE_SIGMA: f64 = 0.01;
/// Severities above this defeat the pseudo-prior.
pub const FAILURE_THRESHOLD: f64 = 0.5;
/// Fraction of the shade the pseudo-prior leaves behind when it fails.
pub const RESIDUAL_FRACTION: f64 = 0.4;

/// Maximum of `v (1 - u^2 - v^2)` over the half disk `v > 0`, at `u = 0, v = 1/sqrt(3)`.
const PROFILE_PEAK: f64 = 2.0 / (3.0 * 1.732_050_807_568_877_2);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Coordinates of `(u, v)` in the ellipse frame; inside iff `x^2 + y^2 < 1`.
    fn local(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        ((c * du + s * dv) / self.ax, (-s * du + c * dv) / self.ay)
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let (x, y) = self.local(u, v);
        x * x + y * y < 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Artifact-free intensities in `[0, 1]`.
    pub clean: Image,
    /// 1 inside the posterior half of the soft-tissue region, 0 elsewhere.
    pub artifact_mask: Image,
    /// Smooth unit-peak shade shape, zero outside the mask.
    pub shade_profile: Image,
    pub severity: f64,
    pub subject: u32,
    pub slice: u32,
}

impl Phantom {
    pub fn mask_pixels(&self) -> usize {
        self.artifact_mask.data().iter().filter(|&&m| m > 0.5).count()
    }

    /// Mean of `img` over the artifact mask.
    pub fn mask_mean(&self, img: &Image) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&m, &v) in self.artifact_mask.data().iter().zip(img.data()) {
            if m > 0.5 {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Least-squares amplitude of the shade shape in `img - clean`.
    pub fn shade_amplitude(&self, img: &Image) -> Result<f64> {
        self.clean.ensure_same_shape(img)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for ((&g, &v), &c) in self.shade_profile.data().iter().zip(img.data()).zip(self.clean.data()) {
            num += g * (v - c);
            den += g * g;
        }
        Ok(if den > 0.0 { num / den } else { 0.0 })
    }
}

struct Anatomy {
    center: (f64, f64),
    outer: (f64, f64),
    bone_thickness: f64,
    bone: f64,
    tissue: f64,
    inclusions: Vec<Inclusion>,
}

struct Inclusion {
    rel: (f64, f64),
    drift: (f64, f64),
    axes: (f64, f64),
    phase: f64,
    angle: f64,
    intensity: f64,
}

impl Anatomy {
    fn draw(subject_seed: u64) -> Self {
        let mut rng = stream_rng(subject_seed, 0);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let center = (u(-0.03, 0.03), u(-0.03, 0.03));
        let outer = (u(0.76, 0.84), u(0.84, 0.92));
        let bone_thickness = u(0.09, 0.12);
        let bone = u(0.9, 0.97);
        let tissue = u(0.42, 0.48);
        let count = rng.random_range(2..=4);
        let inclusions = (0..count)
            .map(|_| {
                let r = rng.random_range(0.0..0.45);
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let bright = rng.random_bool(0.5);
                Inclusion {
                    rel: (r * th.cos(), r * th.sin()),
                    drift: (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
                    axes: (rng.random_range(0.08..0.2), rng.random_range(0.08..0.2)),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    intensity: if bright {
                        rng.random_range(0.62..0.8)
                    } else {
                        rng.random_range(0.15..0.3)
                    },
                }
            })
            .collect();
        Self {
            center,
            outer,
            bone_thickness,
            bone,
            tissue,
            inclusions,
        }
    }
}

/// Builds the artifact-free phantom for one slice of one subject.
///
/// Severity starts at 0 and `subject` at 0; [`build_dataset`] fills both in.
pub fn make_phantom(subject_seed: u64, slice_index: usize, size: usize) -> Result<Phantom> {
    if size < 16 || !size.is_multiple_of(4) {
        return Err(invalid(format!("phantom size must be a multiple of 4 and at least 16, got {size}")));
    }
    if slice_index >= MAX_SLICES {
        return Err(invalid(format!("slice index {slice_index} outside 0..{MAX_SLICES}")));
    }
    let a = Anatomy::draw(subject_seed);
    let z = slice_index as f64 / (MAX_SLICES - 1) as f64;
    // The head narrows toward both ends of the slice range.
    let taper = 1.0 - 0.3 * (z - 0.5).powi(2);
    let outer = Ellipse {
        cx: a.center.0,
        cy: a.center.1,
        ax: a.outer.0 * taper,
        ay: a.outer.1 * taper,
        angle: 0.0,
    };
    let inner = Ellipse {
        ax: outer.ax - a.bone_thickness,
        ay: outer.ay - a.bone_thickness,
        ..outer
    };
    let inclusions: Vec<(Ellipse, f64)> = a
        .inclusions
        .iter()
        .map(|inc| {
            let wobble = 1.0 + 0.25 * (std::f64::consts::TAU * z + inc.phase).sin();
            let e = Ellipse {
                cx: inner.cx + (inc.rel.0 + inc.drift.0 * (z - 0.5)) * inner.ax,
                cy: inner.cy + (inc.rel.1 + inc.drift.1 * (z - 0.5)) * inner.ay,
                ax: inc.axes.0 * wobble * inner.ax,
                ay: inc.axes.1 * wobble * inner.ay,
                angle: inc.angle,
            };
            (e, inc.intensity)
        })
        .collect();

    let coord = |k: usize| (k as f64 + 0.5) / size as f64 * 2.0 - 1.0;
    let clean = Image::from_fn(size, size, |x, y| {
        let (u, v) = (coord(x), coord(y));
        let mut val = 0.0;
        if outer.contains(u, v) {
            val = a.bone;
        }
        if inner.contains(u, v) {
            val = a.tissue;
            for (e, intensity) in &inclusions {
                if e.contains(u, v) {
                    val = *intensity;
                }
            }
        }
        f64::clamp(val, 0.0, 1.0)
    });
    let mut artifact_mask = Image::zeros(size, size);
    let mut shade_profile = Image::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (lu, lv) = inner.local(coord(x), coord(y));
            let r2 = lu * lu + lv * lv;
            if r2 < 1.0 && lv > 0.0 {
                artifact_mask.set(x, y, 1.0);
                shade_profile.set(x, y, lv * (1.0 - r2) / PROFILE_PEAK);
            }
        }
    }
    Ok(Phantom {
        clean,
        artifact_mask,
        shade_profile,
        severity: 0.0,
        subject: 0,
        slice: slice_index as u32,
    })
}

/// Adds a smooth shade of peak `SHADE_PEAK * severity` and random sign inside
/// the mask, plus Gaussian noise everywhere.
///
/// The sign is drawn before the noise, so for a fixed seed only the amplitude
/// depends on `severity`.
pub fn inject_shade<R: Rng + ?Sized>(p: &Phantom, severity: f64, rng: &mut R) -> Result<Image> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(invalid(format!("severity {severity} outside [0, 1]")));
    }
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let amp = SHADE_PEAK * severity * sign;
    let mut out = p.clean.clone();
    for (o, &g) in out.data_mut().iter_mut().zip(p.shade_profile.data()) {
        let n: f64 = rng.sample(StandardNormal);
        *o += amp * g + NOISE_SIGMA * n;
    }
    Ok(out)
}

/// Bias-field correction standing in for a pretrained translator.
///
/// Estimates the shade amplitude by least squares against the known shape and
/// removes all of it when `p.severity <= FAILURE_THRESHOLD`; otherwise leaves
/// `RESIDUAL_FRACTION` of it behind.
pub fn pseudo_prior(z0: &Image, p: &Phantom) -> Result<(Image, Reward)> {
    let amp = p.shade_amplitude(z0)?;
    let (removed, quality) = if p.severity <= FAILURE_THRESHOLD {
        (amp, Reward::Good)
    } else {
        ((1.0 - RESIDUAL_FRACTION) * amp, Reward::Bad)
    };
    let z1 = z0.zip_map(&p.shade_profile, |v, g| v - removed * g)?;
    Ok((z1, quality))
}

/// Mean absolute deviation from the clean phantom inside the artifact mask.
pub fn oracle_artifact_score(img: &Image, p: &Phantom) -> Result<f64> {
    p.clean.ensure_same_shape(img)?;
    let diff = img.zip_map(&p.clean, |a, b| (a - b).abs())?;
    Ok(p.mask_mean(&diff))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    pub size: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            slices_per_subject: 16,
            size: 64,
            test_fraction: 0.15,
            seed: 0,
        }
    }
}

/// A labeled pair with the phantom it was made from.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub phantom: Phantom,
    pub pair: LabeledPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PhantomCase>,
    pub test: Vec<PhantomCase>,
}

impl Dataset {
    pub fn train_pairs(&self) -> Vec<LabeledPair> {
        self.train.iter().map(|c| c.pair.clone()).collect()
    }

    pub fn test_pairs(&self) -> Vec<LabeledPair> {
        self.test.iter().map(|c| c.pair.clone()).collect()
    }

    pub fn all(&self) -> impl Iterator<Item = &PhantomCase> {
        self.train.iter().chain(&self.test)
    }

    pub fn find(&self, subject: u32, slice: u32) -> Option<&PhantomCase> {
        self.all()
            .find(|c| c.pair.subject == subject && c.pair.slice == slice)
    }
}

/// Slice position of the `k`-th dataset slice, spread over the head axis.
fn slice_position(k: usize, slices_per_subject: usize) -> usize {
    k * (MAX_SLICES / slices_per_subject)
}

pub fn make_case(cfg: &DatasetConfig, subject: usize, k: usize) -> Result<PhantomCase> {
    let subject_seed = derive_seed(cfg.seed, subject as u64);
    let mut phantom = make_phantom(subject_seed, slice_position(k, cfg.slices_per_subject), cfg.size)?;
    let mut rng = stream_rng(subject_seed, 1 + k as u64);
    phantom.severity = rng.random_range(0.0..=1.0);
    phantom.subject = subject as u32;
    phantom.slice = k as u32;
    let z0 = inject_shade(&phantom, phantom.severity, &mut rng)?;
    let (z1, r) = pseudo_prior(&z0, &phantom)?;
    Ok(PhantomCase {
        pair: LabeledPair {
            z0,
            z1,
            r,
            subject: subject as u32,
            slice: k as u32,
        },
        phantom,
    })
}

/// Generates the full dataset and splits it by subject; the highest subject
/// ids form the test set.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n_subjects < 2 {
        return Err(invalid("need at least two subjects for a train/test split"));
    }
    if cfg.slices_per_subject == 0 || cfg.slices_per_subject > MAX_SLICES {
        return Err(invalid(format!(
            "slices_per_subject must lie in 1..={MAX_SLICES}, got {}",
            cfg.slices_per_subject
        )));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(invalid("test_fraction must lie in [0, 1)"));
    }
    let n_test = ((cfg.n_subjects as f64 * cfg.test_fraction).round() as usize).clamp(1, cfg.n_subjects - 1);
    let n_train = cfg.n_subjects - n_test;
    let spp = cfg.slices_per_subject;
    let cases = par::try_map_range(cfg.n_subjects * spp, |idx| make_case(cfg, idx / spp, idx % spp))?;
    let (train, test): (Vec<_>, Vec<_>) = cases
        .into_iter()
        .partition(|c| (c.pair.subject as usize) < n_train);
    Ok(Dataset { train, test })
}

/// Run lengths of a binary mask in row-major order, starting with a run of zeros.
pub fn mask_rle(mask: &Image) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &m in mask.data() {
        let on = m > 0.5;
        if on != current {
            runs.push(len);
            current = on;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn mask_from_rle(width: usize, height: usize, runs: &[u32]) -> Result<Image> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (width * height) as u64 {
        return Err(Error::Format(format!(
            "mask RLE covers {total} pixels, expected {}",
            width * height
        )));
    }
    let mut data = Vec::with_capacity(width * height);
    for (k, &r) in runs.iter().enumerate() {
        let v = if k % 2 == 0 { 0.0 } else { 1.0 };
        data.extend(std::iter::repeat_n(v, r as usize));
    }
    Image::from_vec(width, height, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub slice: u32,
    pub severity: f64,
    /// 0 = good, 1 = bad.
    pub label: u8,
    pub mask_rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub subject: u32,
    pub split: String,
    pub width: usize,
    pub height: usize,
    pub slices: Vec<SliceMeta>,
}

pub fn subject_dir(root: &Path, subject: u32) -> PathBuf {
    root.join(format!("subject_{subject:03}"))
}

/// Writes one directory per subject with `z0_{slice}.img`, `z1_{slice}.img`,
/// `clean_{slice}.img`, `shade_{slice}.img` and `meta.json`.
pub fn export_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let mut groups: BTreeMap<u32, (String, Vec<&PhantomCase>)> = BTreeMap::new();
    for (split, cases) in [("train", &ds.train), ("test", &ds.test)] {
        for c in cases {
            groups
                .entry(c.pair.subject)
                .or_insert_with(|| (split.to_string(), Vec::new()))
                .1
                .push(c);
        }
    }
    for (subject, (split, cases)) in groups {
        let dir = subject_dir(root, subject);
        fs::create_dir_all(&dir)?;
        let mut slices = Vec::new();
        let (w, h) = cases[0].pair.z0.shape();
        for c in cases {
            let s = c.pair.slice;
            save_sbim(&c.pair.z0, dir.join(format!("z0_{s}.img")))?;
            save_sbim(&c.pair.z1, dir.join(format!("z1_{s}.img")))?;
            save_sbim(&c.phantom.clean, dir.join(format!("clean_{s}.img")))?;
            save_sbim(&c.phantom.shade_profile, dir.join(format!("shade_{s}.img")))?;
            slices.push(SliceMeta {
                slice: s,
                severity: c.phantom.severity,
                label: c.pair.r.label().unwrap_or(0),
                mask_rle: mask_rle(&c.phantom.artifact_mask),
            });
        }
        let meta = SubjectMeta {
            subject,
            split,
            width: w,
            height: h,
            slices,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    }
    Ok(())
}

/// Reads a dataset written by [`export_dataset`]. Pixels come back at `f32` precision.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for dir in dirs {
        let meta: SubjectMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        for sm in &meta.slices {
            let s = sm.slice;
            let phantom = Phantom {
                clean: load_sbim(dir.join(format!("clean_{s}.img")))?,
                artifact_mask: mask_from_rle(meta.width, meta.height, &sm.mask_rle)?,
                shade_profile: load_sbim(dir.join(format!("shade_{s}.img")))?,
                severity: sm.severity,
                subject: meta.subject,
                slice: s,
            };
            let pair = LabeledPair {
                z0: load_sbim(dir.join(format!("z0_{s}.img")))?,
                z1: load_sbim(dir.join(format!("z1_{s}.img")))?,
                r: Reward::from_label(sm.label)?,
                subject: meta.subject,
                slice: s,
            };
            let case = PhantomCase { phantom, pair };
            match meta.split.as_str() {
                "train" => ds.train.push(case),
                "test" => ds.test.push(case),
                other => return Err(Error::Format(format!("unknown split {other:?} in {}", dir.display()))),
            }
        }
    }
    Ok(ds)
}
