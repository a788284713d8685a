//! Scenario files and the pinned topology suite.
//!
//! Scenarios are TOML. Every field of [`Scenario`] can be set; see
//! `examples/scenarios/` in the repository for annotated samples.

use std::path::{Path, PathBuf};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::master::{ms_to_us, Micros, SchedulerConfig};
use crate::metrics::NodePower;
use crate::preprocess::{self, rescale_dims, ImageFormat, ImagePayload, Mode, PpmImage};
use crate::protocol::http::DetectHeaders;
use crate::protocol::Tier;
use crate::worker::{fixture_path, DetectorError, DetectorSpec, LatencyModel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("reading scenario {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("worker {worker}: {source}")]
    Detector {
        worker: String,
        #[source]
        source: DetectorError,
    },
    #[error("worker {worker} has no fixture for image {image_id} (expected {path})")]
    MissingFixture {
        worker: String,
        image_id: String,
        path: PathBuf,
    },
    #[error("payload: {0}")]
    Payload(String),
}

/// One direction of a network link. Both directions of a link use the same
/// model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub latency_ms: f64,
    pub bandwidth_bytes_per_s: f64,
}

impl LinkModel {
    pub const LAN: LinkModel = LinkModel {
        latency_ms: 2.0,
        bandwidth_bytes_per_s: 12.5e6,
    };

    pub fn new(latency_ms: f64, bandwidth_bytes_per_s: f64) -> Self {
        Self {
            latency_ms,
            bandwidth_bytes_per_s,
        }
    }

    /// `latency + size / bandwidth`, rounded to the microsecond.
    pub fn transfer_us(&self, bytes: usize) -> Micros {
        (self.latency_ms * 1000.0 + bytes as f64 * 1e6 / self.bandwidth_bytes_per_s).round() as Micros
    }

    fn is_valid(&self) -> bool {
        self.latency_ms.is_finite()
            && self.latency_ms >= 0.0
            && self.bandwidth_bytes_per_s.is_finite()
            && self.bandwidth_bytes_per_s > 0.0
    }
}

/// What the gateway submits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PayloadSpec {
    /// Opaque bytes of a declared size. `rescaled_bytes` is the size after
    /// gateway-side rescaling for low-latency mode.
    Declared {
        width: u32,
        height: u32,
        bytes: usize,
        rescaled_bytes: Option<usize>,
    },
    /// A seeded random PPM image.
    Synthetic { width: u32, height: u32 },
    /// PPM files from a directory, used in name order and cycled.
    Files { dir: PathBuf },
}

/// A window during which a worker's outbound messages are held back and
/// released together when it ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub from_s: f64,
    pub to_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSpec {
    pub id: String,
    pub tier: Tier,
    #[serde(default = "one")]
    pub slots: u32,
    pub detector: DetectorSpec,
    pub link: LinkModel,
    pub power: NodePower,
    /// The worker process dies at this time.
    #[serde(default)]
    pub fail_at_s: Option<f64>,
    #[serde(default)]
    pub stall: Option<Stall>,
}

fn one() -> u32 {
    1
}

fn default_warmup() -> f64 {
    1.0
}

fn default_master_power() -> NodePower {
    NodePower {
        idle_watts: 10.0,
        busy_watts: 10.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Free-form label used to group reports (for example `fog1`).
    #[serde(default)]
    pub topology: String,
    pub mode: Mode,
    pub rate_per_min: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    /// Rescale on the gateway instead of the master in low-latency mode.
    #[serde(default)]
    pub client_rescale: bool,
    /// Time between worker start-up and the first submission.
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
    pub payload: PayloadSpec,
    pub client_link: LinkModel,
    #[serde(default)]
    pub master: SchedulerConfig,
    #[serde(default = "default_master_power")]
    pub master_power: NodePower,
    pub workers: Vec<WorkerSpec>,
    /// Directory of ground-truth JSON files; enables mAP in the report.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
}

/// A planned gateway submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submission {
    pub index: usize,
    pub image_id: String,
    /// Offset from the start of injection.
    pub at_us: Micros,
}

/// Submissions every `60 / rate` seconds from t = 0 while `t < duration`,
/// each with a fresh image id.
pub fn client_inject(rate_per_min: f64, duration_s: f64) -> Result<Vec<Submission>, ScenarioError> {
    if !(rate_per_min.is_finite() && rate_per_min > 0.0) {
        return Err(ScenarioError::Invalid(format!("rate must be > 0, got {rate_per_min}")));
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t_s = k as f64 * 60.0 / rate_per_min;
        if t_s >= duration_s {
            break;
        }
        out.push(Submission {
            index: k,
            image_id: format!("img-{k:05}"),
            at_us: (t_s * 1e6).round() as Micros,
        });
        k += 1;
    }
    Ok(out)
}

/// A fully built request: headers plus body, as the gateway sends it.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub headers: DetectHeaders,
    pub payload: ImagePayload,
}

/// Generates the image set for a scenario. Buffers are shared between
/// requests where possible.
pub struct PayloadSource {
    images: Vec<ImagePayload>,
}

impl PayloadSource {
    pub fn new(spec: &PayloadSpec, seed: u64) -> Result<Self, ScenarioError> {
        let images = match spec {
            PayloadSpec::Declared { width, height, bytes, .. } => {
                vec![ImagePayload::opaque("", *width, *height, Bytes::from(vec![0u8; *bytes]))]
            }
            PayloadSpec::Synthetic { width, height } => {
                let img = synthetic_ppm(*width, *height, seed);
                vec![ImagePayload::ppm("", img.to_bytes()).map_err(|e| ScenarioError::Payload(e.to_string()))?]
            }
            PayloadSpec::Files { dir } => {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| ScenarioError::Payload(format!("{}: {e}", dir.display())))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
                    .collect();
                paths.sort();
                if paths.is_empty() {
                    return Err(ScenarioError::Payload(format!("no .ppm files in {}", dir.display())));
                }
                paths
                    .iter()
                    .map(|p| {
                        let data = std::fs::read(p).map_err(|e| ScenarioError::Payload(format!("{}: {e}", p.display())))?;
                        ImagePayload::ppm("", data).map_err(|e| ScenarioError::Payload(format!("{}: {e}", p.display())))
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        Ok(Self { images })
    }

    /// The request for submission `sub`.
    pub fn request(&self, scenario: &Scenario, sub: &Submission) -> Result<Request, ScenarioError> {
        let mut payload = self.images[sub.index % self.images.len()].clone();
        payload.image_id = sub.image_id.clone();
        let rescale = scenario.client_rescale && scenario.mode == Mode::LowLatency;
        if rescale {
            payload = match (&scenario.payload, payload.format) {
                (PayloadSpec::Declared { rescaled_bytes, .. }, ImageFormat::Opaque) => {
                    let size = rescaled_bytes.ok_or_else(|| {
                        ScenarioError::Invalid("declared payload needs rescaled_bytes for client rescaling".into())
                    })?;
                    let (w, h) = rescale_dims(payload.width, payload.height, scenario.master.target_long_side);
                    ImagePayload::opaque(payload.image_id, w, h, Bytes::from(vec![0u8; size]))
                }
                _ => preprocess::prepare(&payload, Mode::LowLatency, scenario.master.target_long_side)
                    .map_err(|e| ScenarioError::Payload(e.to_string()))?,
            };
        }
        let headers = DetectHeaders {
            image_id: payload.image_id.clone(),
            mode: scenario.mode,
            width: payload.width,
            height: payload.height,
            format: payload.format,
            client_rescaled: rescale,
        };
        Ok(Request { headers, payload })
    }
}

/// Deterministic random RGB image.
pub fn synthetic_ppm(width: u32, height: u32, seed: u64) -> PpmImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; width as usize * height as usize * 3];
    rng.fill(&mut pixels[..]);
    PpmImage::new(width, height, pixels)
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut s = Self::from_toml(&text)?;
        s.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Makes relative fixture, payload, and ground-truth paths relative to
    /// `base` (the scenario file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let PayloadSpec::Files { dir } = &mut self.payload {
            fix(dir);
        }
        if let Some(gt) = &mut self.ground_truth {
            fix(gt);
        }
        for w in &mut self.workers {
            if let DetectorSpec::Tensorfile { fixtures, .. } = &mut w.detector {
                fix(fixtures);
            }
        }
    }

    pub fn duration_us(&self) -> Micros {
        (self.duration_s * 1e6).round() as Micros
    }

    pub fn warmup_us(&self) -> Micros {
        (self.warmup_s * 1e6).round() as Micros
    }

    pub fn submissions(&self) -> Result<Vec<Submission>, ScenarioError> {
        client_inject(self.rate_per_min, self.duration_s)
    }

    /// Checks the static invariants.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.rate_per_min.is_finite() && self.rate_per_min > 0.0) {
            return bad(format!("rate_per_min must be > 0, got {}", self.rate_per_min));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return bad(format!("duration_s must be >= 0, got {}", self.duration_s));
        }
        if !(self.warmup_s.is_finite() && self.warmup_s >= 0.0) {
            return bad("warmup_s must be >= 0".into());
        }
        if !self.client_link.is_valid() {
            return bad("client_link needs latency >= 0 and bandwidth > 0".into());
        }
        if !self.master_power.is_valid() {
            return bad("master_power needs busy >= idle >= 0".into());
        }
        if self.master.heartbeat_interval_ms == 0 || self.master.max_attempts == 0 {
            return bad("heartbeat_interval_ms and max_attempts must be >= 1".into());
        }
        if let PayloadSpec::Declared {
            width, height, bytes, ..
        } = self.payload
        {
            if width == 0 || height == 0 || bytes == 0 {
                return bad("declared payload needs nonzero width, height, and bytes".into());
            }
            if self.mode == Mode::LowLatency && !self.client_rescale {
                return bad("declared payloads cannot be rescaled by the master; set client_rescale".into());
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for w in &self.workers {
            if w.id.is_empty() || !ids.insert(&w.id) {
                return bad(format!("worker id {:?} is empty or repeated", w.id));
            }
            if !w.link.is_valid() {
                return bad(format!("worker {}: link needs latency >= 0 and bandwidth > 0", w.id));
            }
            if !w.power.is_valid() {
                return bad(format!("worker {}: power needs busy >= idle >= 0", w.id));
            }
            if let Some(st) = w.stall {
                if !(st.from_s >= 0.0 && st.to_s >= st.from_s) {
                    return bad(format!("worker {}: stall window must satisfy 0 <= from <= to", w.id));
                }
            }
        }
        Ok(())
    }

    /// Start-up checks that touch the file system: detector construction and
    /// one fixture per submitted image for tensor-file workers.
    pub fn check_resources(&self, submissions: &[Submission]) -> Result<(), ScenarioError> {
        for w in &self.workers {
            w.detector.build().map_err(|source| ScenarioError::Detector {
                worker: w.id.clone(),
                source,
            })?;
            if let DetectorSpec::Tensorfile { fixtures, .. } = &w.detector {
                for sub in submissions {
                    let path = fixture_path(fixtures, &sub.image_id);
                    if !path.is_file() {
                        return Err(ScenarioError::MissingFixture {
                            worker: w.id.clone(),
                            image_id: sub.image_id.clone(),
                            path,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Detector spec with the scenario seed mixed into mock seeds.
    pub fn effective_detector(&self, worker: &WorkerSpec) -> DetectorSpec {
        match &worker.detector {
            DetectorSpec::Mock {
                latency,
                seed,
                detections,
            } => DetectorSpec::Mock {
                latency: *latency,
                seed: seed ^ self.seed,
                detections: detections.clone(),
            },
            other => other.clone(),
        }
    }

    pub fn fail_at_us(worker: &WorkerSpec) -> Option<Micros> {
        worker.fail_at_s.map(|s| ms_to_us(s * 1000.0))
    }
}

/// Parameters of the pinned four-topology suite. The link and power values
/// are declared harness parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteParams {
    pub seed: u64,
    pub rate_per_min: f64,
    pub duration_s: f64,
    pub lan: LinkModel,
    pub cloud_near: LinkModel,
    pub cloud_far: LinkModel,
    pub width: u32,
    pub height: u32,
    pub accuracy_bytes: usize,
    pub latency_bytes: usize,
    pub fog_accuracy: LatencyModel,
    pub fog_latency: LatencyModel,
    pub cloud_accuracy: LatencyModel,
    pub cloud_latency: LatencyModel,
    pub fog_power: NodePower,
    pub cloud_power: NodePower,
    pub master_power: NodePower,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            seed: 2019,
            rate_per_min: 10.0,
            duration_s: 600.0,
            lan: LinkModel::LAN,
            cloud_near: LinkModel::new(50.0, 2.5e6),
            cloud_far: LinkModel::new(150.0, 2.5e6),
            width: 4000,
            height: 2192,
            accuracy_bytes: 943_718,
            latency_bytes: 4_956,
            fog_accuracy: LatencyModel::UniformJitter {
                base_ms: 1000.0,
                spread_ms: 800.0,
            },
            fog_latency: LatencyModel::UniformJitter {
                base_ms: 150.0,
                spread_ms: 100.0,
            },
            cloud_accuracy: LatencyModel::UniformJitter {
                base_ms: 2500.0,
                spread_ms: 2400.0,
            },
            cloud_latency: LatencyModel::UniformJitter {
                base_ms: 300.0,
                spread_ms: 300.0,
            },
            fog_power: NodePower {
                idle_watts: 12.0,
                busy_watts: 20.0,
            },
            cloud_power: NodePower {
                idle_watts: 40.0,
                busy_watts: 60.0,
            },
            master_power: default_master_power(),
        }
    }
}

pub const TOPOLOGIES: [&str; 4] = ["fog1", "fog2", "cloud-near", "cloud-far"];

/// The scenario for one topology and mode of the suite.
pub fn suite_scenario(params: &SuiteParams, topology: &str, mode: Mode) -> Scenario {
    let (fog_lat, cloud_lat) = match mode {
        Mode::HighAccuracy => (params.fog_accuracy, params.cloud_accuracy),
        Mode::LowLatency => (params.fog_latency, params.cloud_latency),
    };
    // Nodes of one tier share a seed, so equal images cost equal time on
    // either fog node.
    let fog = |id: &str| WorkerSpec {
        id: id.into(),
        tier: Tier::Fog,
        slots: 1,
        detector: DetectorSpec::Mock {
            latency: fog_lat,
            seed: 101,
            detections: Vec::new(),
        },
        link: params.lan,
        power: params.fog_power,
        fail_at_s: None,
        stall: None,
    };
    let cloud = |id: &str, link: LinkModel| WorkerSpec {
        id: id.into(),
        tier: Tier::Cloud,
        slots: 1,
        detector: DetectorSpec::Mock {
            latency: cloud_lat,
            seed: 202,
            detections: Vec::new(),
        },
        link,
        power: params.cloud_power,
        fail_at_s: None,
        stall: None,
    };
    let workers = match topology {
        "fog1" => vec![fog("fog-1")],
        "fog2" => vec![fog("fog-1"), fog("fog-2")],
        "cloud-near" => vec![cloud("cloud-near-1", params.cloud_near)],
        "cloud-far" => vec![cloud("cloud-far-1", params.cloud_far)],
        other => panic!("unknown suite topology {other}"),
    };
    Scenario {
        name: format!("{topology}-{mode}"),
        topology: topology.into(),
        mode,
        rate_per_min: params.rate_per_min,
        duration_s: params.duration_s,
        seed: params.seed,
        client_rescale: true,
        warmup_s: default_warmup(),
        payload: PayloadSpec::Declared {
            width: params.width,
            height: params.height,
            bytes: params.accuracy_bytes,
            rescaled_bytes: Some(params.latency_bytes),
        },
        client_link: params.lan,
        master: SchedulerConfig {
            mode_default: mode,
            ..SchedulerConfig::default()
        },
        master_power: params.master_power,
        workers,
        ground_truth: None,
    }
}

/// All eight suite scenarios, topology-major.
pub fn suite_scenarios(params: &SuiteParams) -> Vec<Scenario> {
    TOPOLOGIES
        .iter()
        .flat_map(|t| [Mode::HighAccuracy, Mode::LowLatency].map(|m| suite_scenario(params, t, m)))
        .collect()
}
