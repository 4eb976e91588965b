//! End-to-end phantom benchmark: cohort, split, training, scoring, evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{make_split, Plane, SliceRange, SplitConfig, WindowPair};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, PlaneTables};
use crate::models::{Model, ModelKind, ModelSpec, TrainedModel};
use crate::phantom::{generate_cohort, CohortSpec};
use crate::scoring::{build_score_table, DistanceMetric, ScoreTable, ScoringPolicy, ThresholdKind};
use crate::training::{train, TrainConfig, TrainHistory};

pub const BENCHMARK_VERSION: &str = "reconscan-benchmark/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub cohort: CohortSpec,
    pub split: SplitConfig,
    pub planes: Vec<Plane>,
    pub model: ModelKind,
    pub base_width: usize,
    pub critic_width: usize,
    pub train: TrainConfig,
    pub metrics: Vec<DistanceMetric>,
    pub threshold: ThresholdKind,
    pub policy: ScoringPolicy,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            cohort: CohortSpec::default(),
            split: SplitConfig {
                range: SliceRange::DESK_SCALE,
                holdout_healthy: 3,
                ..Default::default()
            },
            planes: vec![Plane::Axial],
            model: ModelKind::Sagan33,
            base_width: 8,
            critic_width: 8,
            train: TrainConfig {
                generator_steps: 300,
                batch_size: 4,
                validate_every: 100,
                ..Default::default()
            },
            metrics: vec![DistanceMetric::L2, DistanceMetric::L2PlusCosine],
            threshold: ThresholdKind::Avg,
            policy: ScoringPolicy::default(),
        }
    }
}

impl BenchmarkConfig {
    /// Points every random source (cohort, split, initialization, batches) at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.cohort.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self
    }

    fn model_spec(&self, plane: Plane, height: usize, width: usize) -> ModelSpec {
        ModelSpec::new(self.model, height, width)
            .with_widths(self.base_width, self.critic_width)
            .with_channels(self.split.in_len, self.split.out_len)
            .with_seed(self.train.seed)
            .with_plane(plane)
    }

    pub fn validate(&self) -> Result<()> {
        if self.planes.is_empty() {
            return Err(Error::Config("benchmark needs at least one plane".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config(
                "benchmark needs at least one distance metric".into(),
            ));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneRun {
    pub plane: Plane,
    pub train_windows: usize,
    pub test_windows: usize,
    pub param_digest: String,
    pub history: Option<TrainHistory>,
}

/// Everything the benchmark produces; free of timings so that equal seeds
/// give byte-identical JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub version: String,
    pub config: BenchmarkConfig,
    pub runs: Vec<PlaneRun>,
    pub reports: Vec<EvalReport>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn report(&self, metric: DistanceMetric) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.metric == metric)
    }
}

/// One trained plane with its windows, kept for callers that want to score
/// or explain further.
pub struct PlaneModel {
    pub plane: Plane,
    pub model: TrainedModel,
    pub train: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

pub fn train_plane(
    config: &BenchmarkConfig,
    plane: Plane,
    volumes: &[crate::data::Volume],
) -> Result<PlaneModel> {
    let split = make_split(volumes, plane, &config.split)?;
    let Some(first) = split.train.first() else {
        return Err(Error::EmptyData(format!(
            "no training windows for plane {plane}"
        )));
    };
    let (_, h, w) = first.input.dims();
    let model = Model::build(&config.model_spec(plane, h, w))?;
    let model = train(model, &split.train, &config.train)?;
    Ok(PlaneModel {
        plane,
        model,
        train: split.train,
        test: split.test,
    })
}

/// Runs the full benchmark and returns the report together with the trained
/// per-plane models.
pub fn run_benchmark_with_models(
    config: &BenchmarkConfig,
) -> Result<(BenchmarkReport, Vec<PlaneModel>)> {
    config.validate()?;
    let volumes = generate_cohort(&config.cohort)?;
    let planes = config
        .planes
        .iter()
        .map(|&p| train_plane(config, p, &volumes))
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::with_capacity(config.metrics.len());
    for &metric in &config.metrics {
        let tables: Vec<(ScoreTable, ScoreTable)> = planes
            .iter()
            .map(|p| {
                Ok((
                    build_score_table(&p.model, &p.train, metric)?,
                    build_score_table(&p.model, &p.test, metric)?,
                ))
            })
            .collect::<Result<_>>()?;
        let views: Vec<PlaneTables<'_>> = planes
            .iter()
            .zip(&tables)
            .map(|(p, (train, test))| PlaneTables {
                plane: p.plane,
                train,
                test,
            })
            .collect();
        reports.push(evaluate(&views, config.threshold, &config.policy)?);
    }

    let runs = planes
        .iter()
        .map(|p| PlaneRun {
            plane: p.plane,
            train_windows: p.train.len(),
            test_windows: p.test.len(),
            param_digest: p.model.model.param_digest(),
            history: p.model.history.clone(),
        })
        .collect();
    let report = BenchmarkReport {
        version: BENCHMARK_VERSION.into(),
        config: config.clone(),
        runs,
        reports,
    };
    Ok((report, planes))
}

pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    run_benchmark_with_models(config).map(|(r, _)| r)
}
