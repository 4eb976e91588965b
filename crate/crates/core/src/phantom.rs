//! Synthetic head-like phantoms with controllable structural anomalies.
//!
//! The healthy field is a stack of nested ellipsoids (scalp, cortex, white
//! matter) with two dark cavities placed symmetrically about the mid-sagittal
//! plane. Every boundary is a smoothstep ramp about 1.5 voxels wide, so the
//! field is well behaved under slicing and resampling.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, Label, ManifestRow, ScanMeta, Volume};
use crate::error::{Error, Result};

pub const MIN_EXTENT: usize = 32;
pub const MAX_SIGMA: f64 = 0.2;
/// Filter radius in voxels reached at anomaly magnitude 1.
pub const R_MAX: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Grid size along `[x, y, z]`.
    pub extent: [usize; 3],
    /// Standard deviation of additive Gaussian noise.
    pub sigma: f64,
    /// Drives the anatomical jitter and the noise.
    pub seed: u64,
    /// Scale of the per-seed anatomical jitter; 0 gives the canonical phantom.
    pub jitter: f64,
    /// Selects an independent noise realization for the same anatomy, e.g.
    /// a second timepoint of one subject.
    pub session: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: [64, 64, 64],
            sigma: 0.02,
            seed: 0,
            jitter: 1.0,
            session: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.extent.iter().find(|&&e| e < MIN_EXTENT) {
            return Err(Error::Spec(format!(
                "extent {e} is below the minimum of {MIN_EXTENT}"
            )));
        }
        if !(0.0..=MAX_SIGMA).contains(&self.sigma) {
            return Err(Error::Spec(format!(
                "noise sigma {} outside [0, {MAX_SIGMA}]",
                self.sigma
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Spec(format!(
                "jitter {} must be finite and non-negative",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// Anatomy parameters in normalized coordinates (each axis spans `[-1, 1]`).
#[derive(Clone, Debug)]
struct Anatomy {
    head: [f64; 3],
    brain: [f64; 3],
    white: [f64; 3],
    cavity: [f64; 3],
    /// Cavity centers sit at `(±cavity_dx, cavity_y, cavity_z)`.
    cavity_dx: f64,
    cavity_y: f64,
    cavity_z: f64,
    shift: [f64; 2],
    levels: [f64; 4],
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, jitter: f64) -> Anatomy {
        let mut n = |scale: f64| {
            let z: f64 = StandardNormal.sample(rng);
            1.0 + jitter * scale * z.clamp(-2.5, 2.5)
        };
        let head = n(0.02);
        let brain = n(0.02);
        let white = n(0.03);
        let cavity = [n(0.04), n(0.04), n(0.04)];
        let spacing = n(0.03);
        let (sy, sz) = (n(0.01) - 1.0, n(0.01) - 1.0);
        let tone = [n(0.02), n(0.02), n(0.02), n(0.05)];
        Anatomy {
            head: [0.88 * head, 0.92 * head, 0.88 * head],
            brain: [0.78 * brain, 0.82 * brain, 0.76 * brain],
            white: [0.55 * white, 0.62 * white, 0.52 * white],
            cavity: [0.11 * cavity[0], 0.24 * cavity[1], 0.16 * cavity[2]],
            cavity_dx: 0.17 * spacing,
            cavity_y: 0.04,
            cavity_z: 0.0,
            shift: [sy, sz],
            levels: [
                0.35 * tone[0],
                0.6 * tone[1],
                0.85 * tone[2],
                0.12 * tone[3],
            ],
        }
    }
}

/// Membership in `[0, 1]` of a point at ellipsoid radius `rho`, with a ramp of
/// half-width `w` around the surface.
fn inside(rho: f64, w: f64) -> f64 {
    let t = ((rho - (1.0 - w)) / (2.0 * w)).clamp(0.0, 1.0);
    1.0 - t * t * (3.0 - 2.0 * t)
}

fn rho(d: [f64; 3], r: [f64; 3]) -> f64 {
    ((d[0] / r[0]).powi(2) + (d[1] / r[1]).powi(2) + (d[2] / r[2]).powi(2)).sqrt()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn base_from(anatomy: &Anatomy, extent: [usize; 3]) -> Array3<f64> {
    let half = extent.map(|e| e as f64 / 2.0);
    // Ramp half-width of about 0.75 voxel, relative to each ellipsoid radius.
    let ramp = 0.75 / half[0].min(half[1]).min(half[2]);
    let a = anatomy;
    Array3::from_shape_fn((extent[0], extent[1], extent[2]), |(x, y, z)| {
        let ux = (x as f64 + 0.5 - half[0]) / half[0];
        let uy = (y as f64 + 0.5 - half[1]) / half[1] - a.shift[0];
        let uz = (z as f64 + 0.5 - half[2]) / half[2] - a.shift[1];
        let d = [ux, uy, uz];
        let w = |r: [f64; 3]| ramp / r[0].min(r[1]).min(r[2]);
        let mut v = 0.0;
        v = lerp(v, a.levels[0], inside(rho(d, a.head), w(a.head)));
        v = lerp(v, a.levels[1], inside(rho(d, a.brain), w(a.brain)));
        // Gentle superior-inferior ramp through the white matter.
        let white_level = a.levels[2] * (1.0 + 0.06 * uz);
        v = lerp(v, white_level, inside(rho(d, a.white), w(a.white)));
        let dy = uy - a.cavity_y;
        let dz = uz - a.cavity_z;
        let left = inside(rho([ux + a.cavity_dx, dy, dz], a.cavity), w(a.cavity));
        let right = inside(rho([ux - a.cavity_dx, dy, dz], a.cavity), w(a.cavity));
        lerp(v, a.levels[3], left.max(right))
    })
}

fn anatomy_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise_rng(seed: u64, session: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + session);
    rng
}

/// The noiseless field for `spec`; mirror-symmetric along `x`.
pub fn base_field(spec: &PhantomSpec) -> Result<Array3<f64>> {
    spec.validate()?;
    let anatomy = Anatomy::sample(&mut anatomy_rng(spec.seed), spec.jitter);
    Ok(base_from(&anatomy, spec.extent))
}

/// A healthy phantom: the base field plus Gaussian noise of `spec.sigma`.
pub fn generate_healthy(spec: &PhantomSpec) -> Result<Volume> {
    let mut field = base_field(spec)?;
    if spec.sigma > 0.0 {
        let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::Spec(e.to_string()))?;
        let mut rng = noise_rng(spec.seed, spec.session);
        field.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let meta = ScanMeta::new(
        format!("phantom{}", spec.seed),
        format!("phantom{}_s{}", spec.seed, spec.session),
        spec.session as u32,
        Label::Healthy,
    );
    Volume::new(field, meta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnomalyKind {
    /// Dark cavities grow (grey-scale erosion of the bright surround).
    CavityEnlarge,
    /// Bright walls grow (grey-scale dilation).
    WallThicken,
    /// A sinusoidal texture is superimposed.
    TextureShift,
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cavity_enlarge" => Ok(AnomalyKind::CavityEnlarge),
            "wall_thicken" => Ok(AnomalyKind::WallThicken),
            "texture_shift" => Ok(AnomalyKind::TextureShift),
            other => Err(Error::Config(format!("unknown anomaly kind `{other}`"))),
        }
    }
}

/// Half-open voxel box `[lo, hi)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Region {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    pub fn voxels(&self) -> usize {
        (0..3)
            .map(|a| self.hi[a].saturating_sub(self.lo[a]))
            .product()
    }

    /// Box around both cavities with room for the largest filter radius.
    pub fn cavities(extent: [usize; 3]) -> Region {
        let span = |e: usize, lo: f64, hi: f64| {
            let h = e as f64 / 2.0;
            let a = ((1.0 + lo) * h).floor().max(0.0) as usize;
            let b = (((1.0 + hi) * h).ceil() as usize).min(e);
            (a, b)
        };
        let (x0, x1) = span(extent[0], -0.45, 0.45);
        let (y0, y1) = span(extent[1], -0.35, 0.45);
        let (z0, z1) = span(extent[2], -0.32, 0.32);
        Region {
            lo: [x0, y0, z0],
            hi: [x1, y1, z1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// In `(0, 1]`.
    pub magnitude: f64,
    pub region: Region,
}

impl AnomalySpec {
    pub fn validate(&self, extent: [usize; 3]) -> Result<()> {
        if !(self.magnitude > 0.0 && self.magnitude <= 1.0) {
            return Err(Error::Spec(format!(
                "anomaly magnitude {} outside (0, 1]",
                self.magnitude
            )));
        }
        let r = &self.region;
        if (0..3).any(|a| r.lo[a] >= r.hi[a] || r.hi[a] > extent[a]) {
            return Err(Error::Region(format!(
                "{:?}..{:?} in grid {:?}",
                r.lo, r.hi, extent
            )));
        }
        Ok(())
    }
}

/// Separable box min/max filter of integer radius `k`, clamped at the grid edge.
fn box_filter(src: &Array3<f64>, k: usize, take_min: bool) -> Array3<f64> {
    let pick = |a: f64, b: f64| if take_min { a.min(b) } else { a.max(b) };
    let mut cur = src.clone();
    for axis in 0..3 {
        let n = cur.shape()[axis];
        let prev = cur.clone();
        Zip::indexed(&mut cur).for_each(|(x, y, z), out| {
            let p = [x, y, z];
            let lo = p[axis].saturating_sub(k);
            let hi = (p[axis] + k).min(n - 1);
            let mut q = p;
            let mut acc = *out;
            for i in lo..=hi {
                q[axis] = i;
                acc = pick(acc, prev[q]);
            }
            *out = acc;
        });
    }
    cur
}

/// Filter of fractional radius `r`: a blend of the two neighbouring integer radii.
fn fractional_filter(src: &Array3<f64>, r: f64, take_min: bool) -> Array3<f64> {
    let k = r.floor() as usize;
    let f = r - k as f64;
    let a = box_filter(src, k, take_min);
    if f == 0.0 {
        return a;
    }
    let b = box_filter(src, k + 1, take_min);
    Zip::from(&a).and(&b).map_collect(|&a, &b| a + f * (b - a))
}

/// Returns a copy of `volume` carrying the anomaly. Voxels outside the region
/// are untouched; the label becomes `ANOMALOUS`.
pub fn inject_anomaly(volume: &Volume, anomaly: &AnomalySpec) -> Result<Volume> {
    if volume.meta.label != Label::Healthy {
        return Err(Error::Spec(format!(
            "anomalies are injected into healthy volumes, scan {} is {}",
            volume.meta.scan_id, volume.meta.label
        )));
    }
    anomaly.validate(volume.extent())?;
    let radius = anomaly.magnitude * R_MAX;
    let changed = match anomaly.kind {
        AnomalyKind::CavityEnlarge => fractional_filter(&volume.voxels, radius, true),
        AnomalyKind::WallThicken => fractional_filter(&volume.voxels, radius, false),
        AnomalyKind::TextureShift => {
            let amp = 0.15 * anomaly.magnitude;
            let period = 6.0;
            let w = std::f64::consts::TAU / period;
            Array3::from_shape_fn(volume.voxels.dim(), |(x, y, z)| {
                volume.voxels[[x, y, z]]
                    + amp * (w * x as f64).sin() * (w * y as f64).sin() * (w * z as f64).sin()
            })
        }
    };
    let mut voxels = volume.voxels.clone();
    Zip::indexed(&mut voxels)
        .and(&changed)
        .for_each(|(x, y, z), out, &c| {
            if anomaly.region.contains([x, y, z]) {
                *out = c;
            }
        });
    let mut meta = volume.meta.clone();
    meta.label = Label::Anomalous;
    Volume::new(voxels, meta)
}

/// A labelled longitudinal cohort of phantoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub healthy_subjects: usize,
    pub anomalous_subjects: usize,
    pub timepoints: usize,
    pub extent: [usize; 3],
    pub sigma: f64,
    pub jitter: f64,
    pub kind: AnomalyKind,
    /// Each anomalous subject draws its magnitude uniformly from this range.
    pub magnitude: (f64, f64),
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            healthy_subjects: 9,
            anomalous_subjects: 10,
            timepoints: 2,
            extent: [64, 64, 64],
            sigma: 0.02,
            jitter: 1.0,
            kind: AnomalyKind::CavityEnlarge,
            magnitude: (0.5, 1.0),
            seed: 0,
        }
    }
}

/// Generates `healthy_subjects` then `anomalous_subjects` subjects with
/// `timepoints` scans each. Scans of one subject share anatomy and differ in
/// noise; an anomalous subject carries the same anomaly at every timepoint.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<Volume>> {
    let (lo, hi) = spec.magnitude;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Spec(format!(
            "magnitude range ({lo}, {hi}) must lie in (0, 1]"
        )));
    }
    if spec.timepoints == 0 {
        return Err(Error::Spec("a cohort needs at least one timepoint".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let total = spec.healthy_subjects + spec.anomalous_subjects;
    for s in 0..total {
        let subject_seed: u64 = rng.random();
        let anomalous = s >= spec.healthy_subjects;
        let magnitude = if anomalous {
            rng.random_range(lo..=hi)
        } else {
            0.0
        };
        let (prefix, label) = if anomalous {
            ("anom", Label::Anomalous)
        } else {
            ("hc", Label::Healthy)
        };
        let subject_id = format!("{prefix}{s:03}");
        for t in 0..spec.timepoints {
            let p = PhantomSpec {
                extent: spec.extent,
                sigma: spec.sigma,
                seed: subject_seed,
                jitter: spec.jitter,
                session: t as u64,
            };
            let mut v = generate_healthy(&p)?;
            v.meta = ScanMeta::new(
                &subject_id,
                format!("{subject_id}_t{t}"),
                t as u32,
                Label::Healthy,
            );
            if anomalous {
                let a = AnomalySpec {
                    kind: spec.kind,
                    magnitude,
                    region: Region::cavities(spec.extent),
                };
                v = inject_anomaly(&v, &a)?;
            }
            debug_assert_eq!(v.meta.label, label);
            out.push(v);
        }
    }
    Ok(out)
}

/// Writes each volume as `<scan_id>.nii` under `dir` plus `manifest.csv`;
/// returns the manifest path.
pub fn write_cohort(dir: &Path, volumes: &[Volume]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(volumes.len());
    for v in volumes {
        let path = dir.join(format!("{}.nii", v.meta.scan_id));
        v.save_nifti(&path)?;
        rows.push(ManifestRow {
            subject_id: v.meta.subject_id.clone(),
            scan_id: v.meta.scan_id.clone(),
            timepoint: v.meta.timepoint,
            label: v.meta.label,
            path,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
