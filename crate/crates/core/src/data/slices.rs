use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::volume::{ScanMeta, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Volume axis that is held fixed within one slice (`[x, y, z]` order).
    pub fn axis(self) -> usize {
        match self {
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
            Plane::Axial => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Plane> {
        Plane::ALL.into_iter().find(|p| p.code() == code)
    }

    /// In-plane `(height, width)` for a volume of the given extent.
    pub fn slice_dims(self, extent: [usize; 3]) -> (usize, usize) {
        match self {
            Plane::Axial => (extent[1], extent[0]),
            Plane::Coronal => (extent[2], extent[0]),
            Plane::Sagittal => (extent[2], extent[1]),
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        })
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::Config(format!("unknown plane `{other}`"))),
        }
    }
}

/// Half-open slice index range `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRange {
    pub lo: usize,
    pub hi: usize,
}

impl SliceRange {
    /// The informative band of a 256-slice scan: 60 slices.
    pub const FULL_SCALE: SliceRange = SliceRange { lo: 120, hi: 180 };
    /// Same band scaled to 64-voxel phantoms: 16 slices.
    pub const DESK_SCALE: SliceRange = SliceRange { lo: 28, hi: 44 };

    pub fn new(lo: usize, hi: usize) -> Self {
        SliceRange { lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi.saturating_sub(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FromStr for SliceRange {
    type Err = Error;

    /// Parses `lo,hi` or `lo..hi`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .or_else(|| s.split_once(','))
            .ok_or_else(|| Error::Config(format!("bad slice range `{s}`")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad slice range `{s}`")))
        };
        Ok(SliceRange::new(parse(a)?, parse(b)?))
    }
}

/// Ordered 2-D slices along one plane, intensities in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SliceSequence {
    pub plane: Plane,
    pub slices: Vec<Array2<f64>>,
    pub height: usize,
    pub width: usize,
    /// Original index of `slices[0]` within the volume.
    pub first_index: usize,
    pub meta: ScanMeta,
}

impl SliceSequence {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Maps values onto `[0, 1]` by their min and max. Constant input maps to 0.
pub fn normalize_min_max(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let span = hi - lo;
    values.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

/// Extracts slices `[range.lo, range.hi)` along `plane` after per-scan
/// min-max normalization of the whole volume.
pub fn extract_plane(volume: &Volume, plane: Plane, range: SliceRange) -> Result<SliceSequence> {
    let axis = plane.axis();
    let extent = volume.extent()[axis];
    if range.lo >= range.hi || range.hi > extent {
        return Err(Error::Range {
            lo: range.lo,
            hi: range.hi,
            extent,
        });
    }
    let mut vox = volume.voxels.clone();
    normalize_min_max(vox.as_slice_mut().expect("volumes are stored contiguously"));
    let slices = (range.lo..range.hi)
        .map(|i| {
            let s = vox.index_axis(Axis(axis), i);
            // Remaining axes are (a, b) in [x, y, z] order; rows follow the later axis.
            s.t().as_standard_layout().to_owned()
        })
        .collect::<Vec<_>>();
    let (height, width) = plane.slice_dims(volume.extent());
    debug_assert_eq!(slices[0].dim(), (height, width));
    Ok(SliceSequence {
        plane,
        slices,
        height,
        width,
        first_index: range.lo,
        meta: volume.meta.clone(),
    })
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;
    use proptest::prelude::*;

    use super::*;
    use crate::data::volume::Label;

    fn ramp(extent: (usize, usize, usize)) -> Volume {
        let vox = Array3::from_shape_fn(extent, |(x, y, z)| {
            5.0 + x as f64 + 0.5 * y as f64 - 2.0 * z as f64
        });
        Volume::new(vox, ScanMeta::new("s", "s_0", 0, Label::Healthy)).unwrap()
    }

    #[test]
    fn default_range_gives_sixty_slices() {
        let v = ramp((4, 4, 256));
        let seq = extract_plane(&v, Plane::Axial, SliceRange::FULL_SCALE).unwrap();
        assert_eq!(seq.len(), 60);
        assert_eq!(seq.first_index, 120);
    }

    #[test]
    fn single_slice_in_unit_interval() {
        let v = ramp((6, 5, 4));
        let seq = extract_plane(&v, Plane::Axial, SliceRange::new(0, 1)).unwrap();
        assert_eq!(seq.len(), 1);
        assert!(seq.slices[0].iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn range_past_extent_is_rejected() {
        let v = ramp((4, 4, 256));
        let err = extract_plane(&v, Plane::Axial, SliceRange::new(250, 260)).unwrap_err();
        assert_eq!(err.code(), "RANGE_ERROR");
    }

    #[test]
    fn plane_geometry() {
        let v = ramp((6, 5, 4));
        let ax = extract_plane(&v, Plane::Axial, SliceRange::new(0, 4)).unwrap();
        assert_eq!((ax.height, ax.width), (5, 6));
        let co = extract_plane(&v, Plane::Coronal, SliceRange::new(0, 5)).unwrap();
        assert_eq!((co.height, co.width), (4, 6));
        let sa = extract_plane(&v, Plane::Sagittal, SliceRange::new(0, 6)).unwrap();
        assert_eq!((sa.height, sa.width), (4, 5));
        // Axial slice z holds voxel (x, y, z) at row y, column x.
        let norm = |x: usize, y: usize, z: usize| {
            let raw = 5.0 + x as f64 + 0.5 * y as f64 - 2.0 * z as f64;
            let (lo, hi) = (5.0 - 6.0, 5.0 + 5.0 + 2.0);
            (raw - lo) / (hi - lo)
        };
        assert!((ax.slices[2][[3, 4]] - norm(4, 3, 2)).abs() < 1e-12);
        assert!((sa.slices[1][[2, 3]] - norm(1, 3, 2)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(values in proptest::collection::vec(-1e3f64..1e3, 2..200)) {
            let mut once = values.clone();
            normalize_min_max(&mut once);
            let mut twice = once.clone();
            normalize_min_max(&mut twice);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!(once.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
