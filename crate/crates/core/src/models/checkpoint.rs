//! Checkpoint container.
//!
//! ```text
//! magic        4 bytes  "RSCK"
//! version      u16      1
//! spec_len     u32      + compact ModelSpec JSON
//! spec_sha256  32 bytes over the spec JSON
//! meta_len     u32      + JSON {version, history}
//! count        u32
//! count entries:
//!   name       u16 length + UTF-8
//!   kind       u8       0 parameter, 1 running statistic
//!   rank       u8       + rank u32 dims
//!   values     f64 little-endian
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Entry, EntryMut};
use super::{Model, ModelSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::training::TrainHistory;

pub const MAGIC: &[u8; 4] = b"RSCK";
pub const FORMAT_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: &str = "reconscan-checkpoint/1";

/// A model together with how it was trained.
pub struct TrainedModel {
    pub model: Model,
    pub history: Option<TrainHistory>,
    pub version: String,
}

impl TrainedModel {
    pub fn new(model: Model, history: Option<TrainHistory>) -> Self {
        TrainedModel {
            model,
            history,
            version: CHECKPOINT_VERSION.to_string(),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        self.model.spec()
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: String,
    history: Option<TrainHistory>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ck("length overflows u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, trained: &TrainedModel) -> Result<()> {
    let spec_json = trained.model.spec().to_json();
    let meta = serde_json::to_string(&Meta {
        version: trained.version.clone(),
        history: trained.history.clone(),
    })?;
    let mut entries: Vec<(String, u8, Vec<usize>, Vec<f64>)> = Vec::new();
    trained.model.visit(&mut |name, e| match e {
        Entry::Param(t) => entries.push((name, 0, t.shape().to_vec(), t.to_vec())),
        Entry::Buffer(v) => entries.push((name, 1, vec![v.len()], v)),
    });

    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    put_u32(&mut f, spec_json.len())?;
    f.write_all(spec_json.as_bytes())?;
    f.write_all(&Sha256::digest(spec_json.as_bytes()))?;
    put_u32(&mut f, meta.len())?;
    f.write_all(meta.as_bytes())?;
    put_u32(&mut f, entries.len())?;
    for (name, kind, shape, values) in &entries {
        let len = u16::try_from(name.len()).map_err(|_| ck("tensor name too long"))?;
        f.write_all(&len.to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&[*kind, shape.len() as u8])?;
        for &d in shape {
            put_u32(&mut f, d)?;
        }
        for v in values {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn exact(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| ck(format!("truncated checkpoint ({e})")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.exact(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.exact(n)?).map_err(|_| ck("invalid UTF-8"))
    }
}

/// Loads a checkpoint, rebuilding the model from its embedded spec. Fails if
/// the stored spec hash does not match the model spec, or the tensors do not fit it.
pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let file = File::open(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    let mut r = Reader(BufReader::new(file));
    if r.exact(4)? != MAGIC {
        return Err(ck(format!("{} is not a checkpoint", path.display())));
    }
    let v = r.exact(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != FORMAT_VERSION {
        return Err(ck(format!("unsupported checkpoint format {version}")));
    }
    let n = r.u32()?;
    let spec_json = r.string(n)?;
    let stored_hash = r.exact(32)?;
    if Sha256::digest(spec_json.as_bytes()).as_slice() != stored_hash.as_slice() {
        return Err(ck("spec hash mismatch"));
    }
    let spec: ModelSpec = serde_json::from_str(&spec_json)?;
    let n = r.u32()?;
    let meta: Meta = serde_json::from_str(&r.string(n)?)?;
    let count = r.u32()?;
    let mut tensors: BTreeMap<String, (u8, Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let b = r.exact(2)?;
        let name = r.string(u16::from_le_bytes([b[0], b[1]]) as usize)?;
        let head = r.exact(2)?;
        let (kind, rank) = (head[0], head[1] as usize);
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.exact(len * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(name, (kind, shape, values));
    }

    let mut model = Model::build(&spec)?;
    let mut problem = None;
    let mut used = 0;
    model.visit_mut(&mut |name, e| {
        let Some((kind, shape, values)) = tensors.get(&name) else {
            problem.get_or_insert_with(|| ck(format!("missing tensor {name}")));
            return;
        };
        used += 1;
        match e {
            EntryMut::Param(t) if *kind == 0 && t.shape() == shape.as_slice() => {
                *t = Tensor::param(values.clone(), shape);
            }
            EntryMut::Buffer(b) if *kind == 1 && b.len() == values.len() => {
                b.copy_from_slice(values);
            }
            _ => {
                problem.get_or_insert_with(|| {
                    ck(format!("tensor {name} does not fit the model spec"))
                });
            }
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if used != tensors.len() {
        return Err(ck(format!("{} unexpected tensors", tensors.len() - used)));
    }
    Ok(TrainedModel {
        model,
        history: meta.history,
        version: meta.version,
    })
}

/// Loads a checkpoint that must have been trained from `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelSpec) -> Result<TrainedModel> {
    let trained = load_checkpoint(path)?;
    if trained.model.spec().hash() != expected.hash() {
        return Err(ck(format!(
            "checkpoint spec {} does not match expected {}",
            trained.model.spec().hash(),
            expected.hash()
        )));
    }
    Ok(trained)
}
