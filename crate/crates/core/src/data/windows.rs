use ndarray::{Array3, Axis};

use super::slices::{Plane, SliceSequence};
use super::volume::Label;
use crate::error::{Error, Result};

/// Contiguous slices stacked on the channel axis, stored `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub data: Array3<f64>,
    pub plane: Plane,
    /// Original slice index of each channel, contiguous and increasing.
    pub indices: Vec<usize>,
}

impl SliceStack {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn values(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("stacks are stored contiguously")
    }
}

/// One training/scoring unit: the current stack and the stack that follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub input: SliceStack,
    pub target: SliceStack,
    pub subject_id: String,
    pub scan_id: String,
    pub timepoint: u32,
    pub label: Label,
    pub plane: Plane,
    /// Position of this window within its scan.
    pub window_index: usize,
}

/// Number of windows a sequence of `len` slices yields.
pub fn window_count(len: usize, in_len: usize, out_len: usize, stride: usize) -> usize {
    if stride == 0 || len < in_len + out_len {
        0
    } else {
        (len - in_len - out_len) / stride + 1
    }
}

fn stack(seq: &SliceSequence, start: usize, len: usize) -> SliceStack {
    let mut data = Array3::zeros((len, seq.height, seq.width));
    for (c, mut ch) in data.axis_iter_mut(Axis(0)).enumerate() {
        ch.assign(&seq.slices[start + c]);
    }
    SliceStack {
        data,
        plane: seq.plane,
        indices: (start..start + len).map(|i| seq.first_index + i).collect(),
    }
}

/// Enumerates `in_len`-slice inputs with the `out_len` slices that follow
/// them, stepping by `stride`.
pub fn build_windows(
    seq: &SliceSequence,
    in_len: usize,
    out_len: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if in_len == 0 || out_len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window lengths and stride must be positive (got {in_len}-{out_len}, stride {stride})"
        )));
    }
    if seq.len() < in_len + out_len {
        return Err(Error::TooShort {
            len: seq.len(),
            in_len,
            out_len,
        });
    }
    let count = window_count(seq.len(), in_len, out_len, stride);
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            WindowPair {
                input: stack(seq, start, in_len),
                target: stack(seq, start + in_len, out_len),
                subject_id: seq.meta.subject_id.clone(),
                scan_id: seq.meta.scan_id.clone(),
                timepoint: seq.meta.timepoint,
                label: seq.meta.label,
                plane: seq.plane,
                window_index: k,
            }
        })
        .collect())
}
