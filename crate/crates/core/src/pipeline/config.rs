use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::{DemographicSchema, DEFAULT_DEDUP_THRESHOLD, DEFAULT_WINDOW_MONTHS};
use crate::detection::DEFAULT_IOU_THRESHOLD;
use crate::estimation::Thresholds;
use crate::evaluation::DEFAULT_CONFIDENCE;
use crate::scoring::{ModePair, RetryPolicy};
use crate::simulator::{ServiceModel, WorldConfig};
use crate::types::ServiceId;

const SIMULATOR_PREFIX: &str = "simulator:";
/// Endpoint of a service whose scores are only read from the score store.
pub const STORE_ENDPOINT: &str = "store";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub id: ServiceId,
    /// `simulator:<model>` or `store`.
    pub endpoint: String,
    #[serde(default)]
    pub native_range: Option<(f64, f64)>,
    /// Fixed impostor/genuine modes; fitted from the scores when absent.
    #[serde(default)]
    pub modes: Option<ModePair>,
    /// Requests per second.
    #[serde(default)]
    pub rate_limit: Option<f64>,
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
}

/// Where a service's scores come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Simulator(String),
    Store,
}

impl ServiceConfig {
    pub fn endpoint(&self) -> Result<Endpoint, PipelineError> {
        if let Some(name) = self.endpoint.strip_prefix(SIMULATOR_PREFIX) {
            if name.is_empty() {
                return Err(PipelineError::Validation(format!("service {}: empty simulator model name", self.id)));
            }
            return Ok(Endpoint::Simulator(name.to_owned()));
        }
        if self.endpoint == STORE_ENDPOINT {
            return Ok(Endpoint::Store);
        }
        Err(PipelineError::Validation(format!(
            "service {}: unsupported endpoint {:?} (expected simulator:<name> or store)",
            self.id, self.endpoint
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    #[serde(default)]
    pub world: WorldConfig,
    pub services: Vec<ServiceModel>,
    #[serde(default)]
    pub score_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Name-list CSV. When absent, queries come from the simulator.
    #[serde(default)]
    pub name_list: Option<PathBuf>,
    /// Image manifests, searched in order.
    #[serde(default)]
    pub providers: Vec<PathBuf>,
    /// Detection dump CSV for runs on real images.
    #[serde(default)]
    pub detections: Option<PathBuf>,
    /// Allowed demographic values in the name list.
    #[serde(default)]
    pub demographics: DemographicSchema,
    #[serde(default)]
    pub as_of: Option<NaiveDate>,
    #[serde(default = "default_window")]
    pub window_months: u32,
    #[serde(default = "default_max_results")]
    pub max_results: usize,
    pub services: Vec<ServiceConfig>,
    #[serde(default)]
    pub simulator: Option<SimulatorConfig>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    #[serde(default = "default_dedup")]
    pub dedup_threshold: f64,
    /// Pair-plan seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Fraction of the ambiguity queue to annotate.
    #[serde(default)]
    pub annotation_budget: f64,
    /// Annotation CSV merged into the estimate.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_failure_rate")]
    pub max_failure_rate: f64,
}

fn default_window() -> u32 {
    DEFAULT_WINDOW_MONTHS
}

fn default_max_results() -> usize {
    100
}

fn default_iou() -> f64 {
    DEFAULT_IOU_THRESHOLD
}

fn default_dedup() -> f64 {
    DEFAULT_DEDUP_THRESHOLD
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_confidence() -> f64 {
    DEFAULT_CONFIDENCE
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn default_failure_rate() -> f64 {
    0.05
}

impl RunConfig {
    /// A simulator run with one `simulator:<id>` service per model.
    pub fn simulated(name: &str, world: WorldConfig, models: Vec<ServiceModel>, out_dir: impl Into<PathBuf>) -> Self {
        let services = models
            .iter()
            .map(|m| ServiceConfig {
                id: m.service_id.clone(),
                endpoint: format!("{SIMULATOR_PREFIX}{}", m.service_id),
                native_range: None,
                modes: None,
                rate_limit: None,
                parallelism: None,
                retry: None,
            })
            .collect();
        Self {
            name: name.to_owned(),
            name_list: None,
            providers: Vec::new(),
            detections: None,
            demographics: DemographicSchema::default(),
            as_of: None,
            window_months: default_window(),
            max_results: default_max_results(),
            services,
            simulator: Some(SimulatorConfig {
                world,
                services: models,
                score_seed: 0,
            }),
            thresholds: Thresholds::default(),
            iou_threshold: default_iou(),
            dedup_threshold: default_dedup(),
            seed: 0,
            out_dir: out_dir.into(),
            annotation_budget: 0.0,
            annotations: None,
            confidence: default_confidence(),
            workers: default_workers(),
            retry: RetryPolicy::default(),
            max_failure_rate: default_failure_rate(),
        }
    }

    /// Parses and validates a JSON config. Relative paths resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("reading config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.name_list.as_mut().map(fix);
        self.providers.iter_mut().for_each(fix);
        self.detections.as_mut().map(fix);
        self.annotations.as_mut().map(fix);
        fix(&mut self.out_dir);
    }

    pub fn is_simulated(&self) -> bool {
        self.name_list.is_none()
    }

    pub fn service_ids(&self) -> Vec<ServiceId> {
        self.services.iter().map(|s| s.id.clone()).collect()
    }

    /// The simulator model behind a service, renamed to the service id.
    pub fn model_for(&self, service: &ServiceConfig) -> Result<Option<ServiceModel>, PipelineError> {
        let Endpoint::Simulator(name) = service.endpoint()? else {
            return Ok(None);
        };
        let sim = self
            .simulator
            .as_ref()
            .ok_or_else(|| PipelineError::Validation(format!("service {} needs a simulator section", service.id)))?;
        let mut model = sim
            .services
            .iter()
            .find(|m| m.service_id.as_str() == name)
            .cloned()
            .ok_or_else(|| PipelineError::Validation(format!("service {}: no simulator model named {name}", service.id)))?;
        model.service_id = service.id.clone();
        if let Some(range) = service.native_range {
            model.native_range = range;
        }
        Ok(Some(model))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        self.thresholds
            .validate()
            .map_err(|e| PipelineError::Validation(e.to_string()))?;
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return bad(format!("iou_threshold must be in (0, 1), got {}", self.iou_threshold));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold < 1.0) {
            return bad(format!("dedup_threshold must be in (0, 1), got {}", self.dedup_threshold));
        }
        if !(0.0..=1.0).contains(&self.annotation_budget) {
            return bad(format!("annotation_budget must be in [0, 1], got {}", self.annotation_budget));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!("confidence must be in (0, 1), got {}", self.confidence));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return bad(format!("max_failure_rate must be in [0, 1], got {}", self.max_failure_rate));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.window_months == 0 {
            return bad("window_months must be at least 1".into());
        }
        if self.services.is_empty() {
            return bad("at least one service is required".into());
        }
        let mut seen = BTreeSet::new();
        for s in &self.services {
            if !seen.insert(&s.id) {
                return bad(format!("service {} listed twice", s.id));
            }
            if s.parallelism == Some(0) {
                return bad(format!("service {}: parallelism must be at least 1", s.id));
            }
            if let Some(r) = s.rate_limit {
                if !(r > 0.0) {
                    return bad(format!("service {}: rate_limit must be positive", s.id));
                }
            }
            if let Some(m) = s.modes {
                ModePair::new(m.low, m.high).map_err(|e| PipelineError::Validation(format!("service {}: {e}", s.id)))?;
            }
            match s.endpoint()? {
                Endpoint::Simulator(_) => {
                    let model = self.model_for(s)?.expect("simulator endpoint");
                    model.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
                }
                Endpoint::Store => {
                    if s.native_range.is_none() {
                        return bad(format!("service {}: store endpoints need a native_range", s.id));
                    }
                }
            }
        }
        if let Some(sim) = &self.simulator {
            sim.world.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        }
        match &self.name_list {
            None => {
                if self.simulator.is_none() {
                    return bad("either name_list or a simulator section is required".into());
                }
            }
            Some(list) => {
                if self.providers.is_empty() {
                    return bad("a name_list run needs at least one provider manifest".into());
                }
                if self.detections.is_none() {
                    return bad("a name_list run needs a detections file".into());
                }
                let mut paths = vec![list];
                paths.extend(&self.providers);
                paths.extend(&self.detections);
                for p in paths {
                    if !p.is_file() {
                        return bad(format!("{} does not exist", p.display()));
                    }
                }
            }
        }
        if let Some(a) = &self.annotations {
            if !a.is_file() {
                return bad(format!("{} does not exist", a.display()));
            }
        }
        Ok(())
    }

    pub fn as_of(&self) -> NaiveDate {
        self.as_of
            .or_else(|| self.simulator.as_ref().map(|s| s.world.as_of))
            .unwrap_or_else(|| chrono::Utc::now().date_naive())
    }
}
