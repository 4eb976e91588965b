//! Window archive container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "RSWA"
//! version    u16      1
//! plane      u8       0 axial, 1 coronal, 2 sagittal
//! in_len     u8
//! out_len    u8
//! reserved   u8       0
//! height     u32
//! width      u32
//! count      u32
//! count records:
//!   subject_id   u16 length + UTF-8
//!   scan_id      u16 length + UTF-8
//!   label        u8   0 healthy, 1 anomalous, 2 unknown
//!   timepoint    u32
//!   window_index u32
//!   input_first  u32  original index of the first input slice
//!   target_first u32
//!   input        in_len * height * width f32, channel-major
//!   target       out_len * height * width f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use super::slices::Plane;
use super::volume::Label;
use super::windows::{SliceStack, WindowPair};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSWA";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub version: u16,
    pub plane: Plane,
    pub in_len: usize,
    pub out_len: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

fn label_code(l: Label) -> u8 {
    match l {
        Label::Healthy => 0,
        Label::Anomalous => 1,
        Label::Unknown => 2,
    }
}

fn label_from(code: u8) -> Option<Label> {
    match code {
        0 => Some(Label::Healthy),
        1 => Some(Label::Anomalous),
        2 => Some(Label::Unknown),
        _ => None,
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let len =
        u16::try_from(s.len()).map_err(|_| Error::Config(format!("identifier too long: {s}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_values(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Writes windows that share plane and geometry. An empty archive still
/// records `plane` and the window lengths.
pub fn write_archive(
    path: &Path,
    plane: Plane,
    in_len: usize,
    out_len: usize,
    windows: &[WindowPair],
) -> Result<ArchiveHeader> {
    let (height, width) = windows
        .first()
        .map(|w| (w.input.height(), w.input.width()))
        .unwrap_or((0, 0));
    for w in windows {
        if w.plane != plane
            || w.input.dims() != (in_len, height, width)
            || w.target.dims() != (out_len, height, width)
        {
            return Err(Error::Shape(format!(
                "window {}#{} does not match archive geometry {plane} {in_len}-{out_len} {height}x{width}",
                w.scan_id, w.window_index
            )));
        }
    }
    let small = |v: usize, what: &str| {
        u8::try_from(v).map_err(|_| Error::Config(format!("{what} too large")))
    };
    let big =
        |v: usize| u32::try_from(v).map_err(|_| Error::Config("archive dimension overflow".into()));
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&[
        plane.code(),
        small(in_len, "in_len")?,
        small(out_len, "out_len")?,
        0,
    ])?;
    f.write_all(&big(height)?.to_le_bytes())?;
    f.write_all(&big(width)?.to_le_bytes())?;
    f.write_all(&big(windows.len())?.to_le_bytes())?;
    for w in windows {
        write_str(&mut f, &w.subject_id)?;
        write_str(&mut f, &w.scan_id)?;
        f.write_all(&[label_code(w.label)])?;
        f.write_all(&w.timepoint.to_le_bytes())?;
        f.write_all(&big(w.window_index)?.to_le_bytes())?;
        f.write_all(&big(w.input.indices[0])?.to_le_bytes())?;
        f.write_all(&big(w.target.indices[0])?.to_le_bytes())?;
        write_values(&mut f, w.input.values())?;
        write_values(&mut f, w.target.values())?;
    }
    f.flush()?;
    Ok(ArchiveHeader {
        version: VERSION,
        plane,
        in_len,
        out_len,
        height,
        width,
        count: windows.len(),
    })
}

struct Reader<'a, R: Read> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.err(&format!("truncated archive ({e})")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.bytes::<2>()?) as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.err(&format!("truncated archive ({e})")))?;
        String::from_utf8(buf).map_err(|_| self.err("identifier is not UTF-8"))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.err(&format!("truncated archive ({e})")))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn err(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, Vec<WindowPair>)> {
    let file = File::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if &r.bytes::<4>()? != MAGIC {
        return Err(r.err("not a window archive (bad magic)"));
    }
    let version = u16::from_le_bytes(r.bytes::<2>()?);
    if version != VERSION {
        return Err(r.err(&format!("unsupported archive version {version}")));
    }
    let [plane, in_len, out_len, _] = r.bytes::<4>()?;
    let plane = Plane::from_code(plane).ok_or_else(|| r.err("bad plane code"))?;
    let (in_len, out_len) = (in_len as usize, out_len as usize);
    let height = r.u32()?;
    let width = r.u32()?;
    let count = r.u32()?;
    let mut windows = Vec::with_capacity(count);
    for _ in 0..count {
        let subject_id = r.string()?;
        let scan_id = r.string()?;
        let [label] = r.bytes::<1>()?;
        let label = label_from(label).ok_or_else(|| r.err("bad label code"))?;
        let timepoint = r.u32()? as u32;
        let window_index = r.u32()?;
        let input_first = r.u32()?;
        let target_first = r.u32()?;
        let input = r.values(in_len * height * width)?;
        let target = r.values(out_len * height * width)?;
        let stack = |data: Vec<f64>, len: usize, first: usize| SliceStack {
            data: Array3::from_shape_vec((len, height, width), data)
                .expect("length checked by reader"),
            plane,
            indices: (first..first + len).collect(),
        };
        windows.push(WindowPair {
            input: stack(input, in_len, input_first),
            target: stack(target, out_len, target_first),
            subject_id,
            scan_id,
            timepoint,
            label,
            plane,
            window_index,
        });
    }
    let header = ArchiveHeader {
        version,
        plane,
        in_len,
        out_len,
        height,
        width,
        count,
    };
    Ok((header, windows))
}
