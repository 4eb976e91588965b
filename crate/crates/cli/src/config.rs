//! Run configuration files (JSON or TOML). Command-line flags override file
//! values; `RECONSCAN_SEED` overrides the file's seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reconscan::data::{Plane, SliceRange};
use reconscan::explain::CamObjective;
use reconscan::models::ModelKind;
use reconscan::phantom::CohortSpec;
use reconscan::scoring::{DistanceMetric, ThresholdKind};
use reconscan::training::TrainConfig;
use reconscan::{Error, Result};

pub const SEED_ENV: &str = "RECONSCAN_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, the file may only drive this subcommand.
    pub subcommand: Option<String>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub planes: Vec<Plane>,
    pub model: Option<ModelKind>,
    pub base_width: Option<usize>,
    pub critic_width: Option<usize>,
    pub metric: Option<DistanceMetric>,
    pub objective: Option<CamObjective>,
    pub threshold: Option<ThresholdKind>,
    pub seed: Option<u64>,
    pub in_len: Option<usize>,
    pub out_len: Option<usize>,
    pub stride: Option<usize>,
    pub range: Option<SliceRange>,
    pub holdout_healthy: Option<usize>,
    pub test_subjects: Vec<String>,
    pub train: Option<TrainConfig>,
    pub cohort: Option<CohortSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| bad(e.to_string())),
            Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
            _ => Err(Error::Config(format!(
                "config {} must end in .json or .toml",
                path.display()
            ))),
        }
    }

    pub fn check_subcommand(&self, name: &str) -> Result<()> {
        match &self.subcommand {
            Some(s) if s != name => {
                Err(Error::Config(format!("config is for `{s}`, not `{name}`")))
            }
            _ => Ok(()),
        }
    }

    /// Flag, then `RECONSCAN_SEED`, then the file, then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
            Err(_) => Ok(self.seed.unwrap_or(0)),
        }
    }
}

/// Parses `desk`, `full` or an explicit `lo..hi` / `lo,hi` range.
pub fn parse_range(s: &str) -> Result<SliceRange> {
    match s.trim().to_ascii_lowercase().as_str() {
        "desk" => Ok(SliceRange::DESK_SCALE),
        "full" => Ok(SliceRange::FULL_SCALE),
        _ => s.parse(),
    }
}

/// Window lengths outside {3, 5} need an explicit opt-in.
pub fn check_lengths(in_len: usize, out_len: usize, any: bool) -> Result<()> {
    let ok = |n: usize| n == 3 || n == 5;
    if any || (ok(in_len) && ok(out_len)) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "slice combination {in_len}-{out_len} is outside {{3,5}}-{{3,5}}; pass --any-lengths to allow it"
        )))
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{what} not found"),
        })
    }
}
