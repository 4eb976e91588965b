use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Axis, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Healthy,
    Anomalous,
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Healthy => "HEALTHY",
            Label::Anomalous => "ANOMALOUS",
            Label::Unknown => "UNKNOWN",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "healthy" | "control" | "normal" | "0" => Ok(Label::Healthy),
            "anomalous" | "outlier" | "asd" | "1" => Ok(Label::Anomalous),
            "unknown" | "" => Ok(Label::Unknown),
            other => Err(Error::Config(format!("unknown label `{other}`"))),
        }
    }
}

/// Identity of one scan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub subject_id: String,
    pub scan_id: String,
    pub timepoint: u32,
    pub label: Label,
}

impl ScanMeta {
    pub fn new(
        subject_id: impl Into<String>,
        scan_id: impl Into<String>,
        timepoint: u32,
        label: Label,
    ) -> Self {
        ScanMeta {
            subject_id: subject_id.into(),
            scan_id: scan_id.into(),
            timepoint,
            label,
        }
    }
}

/// A 3-D intensity grid indexed `[x, y, z]`, plus the scan it came from.
#[derive(Clone, Debug)]
pub struct Volume {
    pub voxels: Array3<f64>,
    pub meta: ScanMeta,
}

impl Volume {
    pub fn new(voxels: Array3<f64>, meta: ScanMeta) -> Result<Self> {
        if let Some(pos) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "voxel {pos} of scan {}/{}",
                meta.subject_id, meta.scan_id
            )));
        }
        Ok(Volume { voxels, meta })
    }

    pub fn extent(&self) -> [usize; 3] {
        let d = self.voxels.dim();
        [d.0, d.1, d.2]
    }

    /// SHA-256 over the voxel bit patterns and extent, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in self.extent() {
            h.update((e as u64).to_le_bytes());
        }
        for v in self.voxels.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the volume as single-precision NIfTI (`.nii` or `.nii.gz`).
    pub fn save_nifti(&self, path: &Path) -> Result<()> {
        let data = self.voxels.mapv(|v| v as f32);
        nifti::writer::WriterOptions::new(path)
            .write_nifti(&data)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn is_nifti_file(path: &Path) -> bool {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Loads a volume from a NIfTI file or a directory of per-slice images.
///
/// Slice directories are stacked along `z` in natural filename order
/// (`slice2.png` before `slice10.png`); image columns map to `x`, rows to `y`.
pub fn load_volume(path: &Path, meta: ScanMeta) -> Result<Volume> {
    if path.is_dir() {
        return Volume::new(load_slice_dir(path)?, meta);
    }
    if !path.exists() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "file does not exist".into(),
        });
    }
    if is_image_file(path) {
        return Err(Error::Dimension { found: 2 });
    }
    if !is_nifti_file(path) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected .nii, .nii.gz or a slice directory".into(),
        });
    }
    let format_err = |e: nifti::NiftiError| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let obj = ReaderOptions::new().read_file(path).map_err(format_err)?;
    let mut arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(format_err)?;
    while arr.ndim() > 3 && arr.shape()[arr.ndim() - 1] == 1 {
        let last = Axis(arr.ndim() - 1);
        arr = arr.index_axis_move(last, 0);
    }
    if arr.ndim() != 3 {
        return Err(Error::Dimension { found: arr.ndim() });
    }
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Volume::new(arr.as_standard_layout().to_owned(), meta)
}

fn natural_key(name: &str) -> (String, u64, String) {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let digits_start = stem.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let number = stem[digits_start..].parse().unwrap_or(0);
    (stem[..digits_start].to_string(), number, name.to_string())
}

fn load_slice_dir(dir: &Path) -> Result<Array3<f64>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image_file(p))
        .collect();
    if files.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "no PNG/JPG slices in directory".into(),
        });
    }
    files.sort_by_key(|p| natural_key(p.file_name().and_then(|n| n.to_str()).unwrap_or("")));
    let mut slices = Vec::with_capacity(files.len());
    for f in &files {
        let img = image::open(f)?.into_luma16();
        slices.push(img);
    }
    let (w, h) = slices[0].dimensions();
    if slices.iter().any(|s| s.dimensions() != (w, h)) {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "slice images differ in size".into(),
        });
    }
    let mut vol = Array3::zeros((w as usize, h as usize, slices.len()));
    for (z, s) in slices.iter().enumerate() {
        for (x, y, p) in s.enumerate_pixels() {
            vol[[x as usize, y as usize, z]] = p.0[0] as f64 / u16::MAX as f64;
        }
    }
    Ok(vol)
}

/// Writes a volume as a directory of 8-bit PNG slices along `z`, scaled by
/// the volume's min-max range.
pub fn save_slice_dir(volume: &Volume, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let [ex, ey, ez] = volume.extent();
    let (lo, hi) = volume
        .voxels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    for z in 0..ez {
        let img = image::GrayImage::from_fn(ex as u32, ey as u32, |x, y| {
            let v = (volume.voxels[[x as usize, y as usize, z]] - lo) / span;
            image::Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        img.save(dir.join(format!("slice{z:03}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ScanMeta {
        ScanMeta::new("s1", "s1_t0", 0, Label::Healthy)
    }

    #[test]
    fn nonfinite_voxel_rejected() {
        let mut v = Array3::zeros((2, 2, 2));
        v[[1, 0, 1]] = f64::NAN;
        assert_eq!(
            Volume::new(v, meta()).unwrap_err().code(),
            "NONFINITE_ERROR"
        );
    }

    #[test]
    fn nifti_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vox = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| (x * 100 + y * 10 + z) as f64);
        let vol = Volume::new(vox.clone(), meta()).unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            vol.save_nifti(&p).unwrap();
            let back = load_volume(&p, meta()).unwrap();
            assert_eq!(back.voxels, vox);
            assert_eq!(back.meta.label, Label::Healthy);
        }
    }

    #[test]
    fn nifti_with_nan_is_nonfinite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.nii");
        let mut data = ndarray::Array3::<f32>::zeros((3, 3, 3));
        data[[0, 1, 2]] = f32::NAN;
        nifti::writer::WriterOptions::new(&p)
            .write_nifti(&data)
            .unwrap();
        assert_eq!(
            load_volume(&p, meta()).unwrap_err().code(),
            "NONFINITE_ERROR"
        );
    }

    #[test]
    fn two_dimensional_inputs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("slice.png");
        image::GrayImage::new(4, 4).save(&png).unwrap();
        assert_eq!(
            load_volume(&png, meta()).unwrap_err().code(),
            "DIMENSION_ERROR"
        );

        let nii = dir.path().join("flat.nii");
        let data = ndarray::Array2::<f32>::zeros((4, 4));
        nifti::writer::WriterOptions::new(&nii)
            .write_nifti(&data)
            .unwrap();
        assert_eq!(
            load_volume(&nii, meta()).unwrap_err().code(),
            "DIMENSION_ERROR"
        );
    }

    #[test]
    fn garbage_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, b"not a nifti file").unwrap();
        assert_eq!(load_volume(&p, meta()).unwrap_err().code(), "FORMAT_ERROR");
        assert_eq!(
            load_volume(&dir.path().join("missing.nii"), meta())
                .unwrap_err()
                .code(),
            "FORMAT_ERROR"
        );
    }

    #[test]
    fn slice_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vox = Array3::from_shape_fn((6, 5, 12), |(x, y, z)| (x + 2 * y + 3 * z) as f64);
        let vol = Volume::new(vox.clone(), meta()).unwrap();
        save_slice_dir(&vol, dir.path()).unwrap();
        let back = load_volume(dir.path(), meta()).unwrap();
        assert_eq!(back.extent(), [6, 5, 12]);
        // Ordering survives: intensity increases along z.
        assert!(back.voxels[[0, 0, 11]] > back.voxels[[0, 0, 10]]);
        assert!(back.voxels[[0, 0, 10]] > back.voxels[[0, 0, 2]]);
    }

    #[test]
    fn labels_parse() {
        assert_eq!("ASD".parse::<Label>().unwrap(), Label::Anomalous);
        assert_eq!("healthy".parse::<Label>().unwrap(), Label::Healthy);
        assert!("maybe".parse::<Label>().is_err());
    }
}
