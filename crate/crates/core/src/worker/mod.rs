//! Worker side: detectors, latency models, and task execution.
//!
//! [`WorkerAgent`] turns a TASK into a RESULT or ERROR message and tracks slot
//! usage. It does not touch sockets, so the simulator and the tokio client in
//! [`net`] share it.

pub mod net;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{decode, nms, Detection, DetectionError, GridTensor, Thresholds};
use crate::protocol::{codes, ErrorMsg, Message, ResultEnvelope, TaskEnvelope, TaskHeader, Tier};

/// Extension of tensor fixtures: `<image_id>.grid`.
pub const FIXTURE_EXT: &str = "grid";

/// Modeled detector latency.
///
/// Text form: `fixed:<ms>` or `uniform:<base_ms>:<spread_ms>`. Uniform samples
/// lie in `[base, base + spread]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LatencyModel {
    Fixed { ms: f64 },
    UniformJitter { base_ms: f64, spread_ms: f64 },
}

impl LatencyModel {
    /// Latency for one image. The draw depends only on the seed and the image
    /// id, so a rerun (or a retry on another worker with the same seed)
    /// reproduces it exactly.
    pub fn sample_ms(&self, seed: u64, image_id: &str) -> f64 {
        match *self {
            LatencyModel::Fixed { ms } => ms,
            LatencyModel::UniformJitter { base_ms, spread_ms } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(image_id.as_bytes()));
                base_ms + spread_ms * rng.random::<f64>()
            }
        }
    }

    pub fn mean_ms(&self) -> f64 {
        match *self {
            LatencyModel::Fixed { ms } => ms,
            LatencyModel::UniformJitter { base_ms, spread_ms } => base_ms + spread_ms / 2.0,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl fmt::Display for LatencyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatencyModel::Fixed { ms } => write!(f, "fixed:{ms}"),
            LatencyModel::UniformJitter { base_ms, spread_ms } => write!(f, "uniform:{base_ms}:{spread_ms}"),
        }
    }
}

impl FromStr for LatencyModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| -> Result<f64, String> {
            let x: f64 = v.trim().parse().map_err(|_| format!("invalid number {v:?} in latency {s:?}"))?;
            if x.is_finite() && x >= 0.0 {
                Ok(x)
            } else {
                Err(format!("latency values must be finite and >= 0 in {s:?}"))
            }
        };
        match parts.as_slice() {
            ["fixed", ms] => Ok(LatencyModel::Fixed { ms: num(ms)? }),
            ["uniform", base, spread] => Ok(LatencyModel::UniformJitter {
                base_ms: num(base)?,
                spread_ms: num(spread)?,
            }),
            _ => Err(format!("latency must be fixed:<ms> or uniform:<base>:<spread>, got {s:?}")),
        }
    }
}

impl TryFrom<String> for LatencyModel {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<LatencyModel> for String {
    fn from(m: LatencyModel) -> String {
        m.to_string()
    }
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no fixture for image {image_id} at {path}")]
    MissingFixture { image_id: String, path: PathBuf },
    #[error("fixture for image {image_id}: {source}")]
    BadFixture {
        image_id: String,
        #[source]
        source: DetectionError,
    },
    #[error("fixture directory {0} does not exist")]
    MissingDirectory(PathBuf),
}

/// What a detector returns for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub detections: Vec<Detection>,
    /// Latency the detector wants charged for this call, if it models one.
    pub modeled_ms: Option<f64>,
}

pub trait Detector: Send + Sync {
    fn detect(&self, task: &TaskHeader, payload: &[u8]) -> Result<DetectorOutput, DetectorError>;
}

/// Returns canned detections after a modeled latency.
#[derive(Debug, Clone)]
pub struct MockDetector {
    pub latency: LatencyModel,
    pub seed: u64,
    pub detections: Vec<Detection>,
}

impl Detector for MockDetector {
    fn detect(&self, task: &TaskHeader, _payload: &[u8]) -> Result<DetectorOutput, DetectorError> {
        Ok(DetectorOutput {
            detections: self.detections.clone(),
            modeled_ms: Some(self.latency.sample_ms(self.seed, &task.image_id)),
        })
    }
}

/// Reads precomputed grid tensors from `<dir>/<image_id>.grid` and runs the
/// decoding head on them.
#[derive(Debug, Clone)]
pub struct TensorFileDetector {
    pub dir: PathBuf,
    pub thresholds: Thresholds,
}

impl TensorFileDetector {
    pub fn new(dir: impl Into<PathBuf>, thresholds: Thresholds) -> Result<Self, DetectorError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(DetectorError::MissingDirectory(dir));
        }
        Ok(Self { dir, thresholds })
    }

    pub fn fixture_path(&self, image_id: &str) -> PathBuf {
        fixture_path(&self.dir, image_id)
    }

    pub fn tensor_file_detect(&self, image_id: &str) -> Result<Vec<Detection>, DetectorError> {
        let path = self.fixture_path(image_id);
        if !path.is_file() {
            return Err(DetectorError::MissingFixture {
                image_id: image_id.to_string(),
                path,
            });
        }
        let bad = |source| DetectorError::BadFixture {
            image_id: image_id.to_string(),
            source,
        };
        let tensor = GridTensor::read_fixture(&path).map_err(bad)?;
        let candidates = decode(&tensor, self.thresholds.score).map_err(bad)?;
        nms(&candidates, self.thresholds.iou).map_err(bad)
    }
}

pub fn fixture_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.{FIXTURE_EXT}"))
}

impl Detector for TensorFileDetector {
    fn detect(&self, task: &TaskHeader, _payload: &[u8]) -> Result<DetectorOutput, DetectorError> {
        Ok(DetectorOutput {
            detections: self.tensor_file_detect(&task.image_id)?,
            modeled_ms: None,
        })
    }
}

/// Serializable detector choice, shared by the CLI and scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorSpec {
    Mock {
        latency: LatencyModel,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        detections: Vec<Detection>,
    },
    Tensorfile {
        fixtures: PathBuf,
        #[serde(default)]
        thresholds: Thresholds,
    },
}

impl DetectorSpec {
    pub fn build(&self) -> Result<Arc<dyn Detector>, DetectorError> {
        Ok(match self {
            DetectorSpec::Mock {
                latency,
                seed,
                detections,
            } => Arc::new(MockDetector {
                latency: *latency,
                seed: *seed,
                detections: detections.clone(),
            }),
            DetectorSpec::Tensorfile { fixtures, thresholds } => {
                Arc::new(TensorFileDetector::new(fixtures.clone(), *thresholds)?)
            }
        })
    }
}

/// How `compute_ms` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecClock {
    /// Report the modeled latency without waiting (simulator).
    Virtual,
    /// Sleep out the modeled latency and measure the wall-clock duration.
    Real,
}

/// Releases a slot when dropped.
pub struct SlotGuard {
    busy: Arc<AtomicU32>,
}

impl Drop for SlotGuard {
    fn drop(&mut self) {
        self.busy.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Executes tasks for one worker identity.
#[derive(Clone)]
pub struct WorkerAgent {
    pub worker_id: String,
    pub tier: Tier,
    pub slots: u32,
    detector: Arc<dyn Detector>,
    busy: Arc<AtomicU32>,
}

impl fmt::Debug for WorkerAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorkerAgent")
            .field("worker_id", &self.worker_id)
            .field("tier", &self.tier)
            .field("slots", &self.slots)
            .field("busy", &self.busy())
            .finish()
    }
}

impl WorkerAgent {
    pub fn new(worker_id: impl Into<String>, tier: Tier, slots: u32, detector: Arc<dyn Detector>) -> Self {
        Self {
            worker_id: worker_id.into(),
            tier,
            slots: slots.max(1),
            detector,
            busy: Arc::new(AtomicU32::new(0)),
        }
    }

    pub fn busy(&self) -> u32 {
        self.busy.load(Ordering::SeqCst)
    }

    fn error(&self, code: &str, message: String, task_id: &str) -> Message {
        Message::Error(ErrorMsg {
            code: code.to_string(),
            message,
            task_id: Some(task_id.to_string()),
            worker_id: Some(self.worker_id.clone()),
        })
    }

    /// Claims a slot for `task`, or returns the ERROR to send back when all
    /// slots are taken.
    pub fn try_acquire(&self, task: &TaskHeader) -> Result<SlotGuard, Message> {
        let claimed = self
            .busy
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| (b < self.slots).then_some(b + 1));
        match claimed {
            Ok(_) => Ok(SlotGuard {
                busy: Arc::clone(&self.busy),
            }),
            Err(b) => Err(self.error(
                codes::NO_FREE_SLOT,
                format!("{b} of {} slots busy", self.slots),
                &task.task_id,
            )),
        }
    }

    /// Runs the detector on a task that already holds a slot. Detector
    /// failures become an ERROR carrying the task id.
    pub fn execute(&self, envelope: &TaskEnvelope, clock: ExecClock) -> Message {
        let started = Instant::now();
        let out = match self.detector.detect(&envelope.header, &envelope.payload) {
            Ok(out) => out,
            Err(e) => return self.error(codes::DETECTOR_FAILED, e.to_string(), &envelope.header.task_id),
        };
        let compute_ms = match clock {
            ExecClock::Virtual => out.modeled_ms.unwrap_or(0.0),
            ExecClock::Real => {
                if let Some(ms) = out.modeled_ms {
                    let target = Duration::from_secs_f64(ms / 1000.0);
                    let spent = started.elapsed();
                    if target > spent {
                        std::thread::sleep(target - spent);
                    }
                }
                started.elapsed().as_secs_f64() * 1000.0
            }
        };
        Message::Result(ResultEnvelope {
            task_id: envelope.header.task_id.clone(),
            worker_id: self.worker_id.clone(),
            detections: out.detections,
            compute_ms,
        })
    }

    /// Slot check plus execution in one call.
    pub fn run_task(&self, envelope: &TaskEnvelope, clock: ExecClock) -> Message {
        match self.try_acquire(&envelope.header) {
            Ok(_guard) => self.execute(envelope, clock),
            Err(refusal) => refusal,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{encode, BoundingBox, GridSpec};
    use crate::preprocess::{ImageFormat, Mode};
    use bytes::Bytes;

    fn envelope(image_id: &str) -> TaskEnvelope {
        TaskEnvelope {
            header: TaskHeader {
                task_id: "t000001".into(),
                image_id: image_id.into(),
                mode: Mode::HighAccuracy,
                attempt: 1,
                width: 4,
                height: 4,
                format: ImageFormat::Opaque,
            },
            payload: Bytes::from_static(b"xyz"),
        }
    }

    fn mock(latency: LatencyModel) -> Arc<dyn Detector> {
        Arc::new(MockDetector {
            latency,
            seed: 9,
            detections: vec![Detection::new(2, 0.9, BoundingBox::new(0.5, 0.5, 0.2, 0.2))],
        })
    }

    #[test]
    fn latency_text_forms() {
        assert_eq!("fixed:100".parse::<LatencyModel>().unwrap(), LatencyModel::Fixed { ms: 100.0 });
        assert_eq!(
            "uniform:80:40".parse::<LatencyModel>().unwrap(),
            LatencyModel::UniformJitter {
                base_ms: 80.0,
                spread_ms: 40.0
            }
        );
        assert!("uniform:80".parse::<LatencyModel>().is_err());
        assert!("fixed:-1".parse::<LatencyModel>().is_err());
        let m: LatencyModel = "uniform:1.5:2".parse().unwrap();
        assert_eq!(m.to_string().parse::<LatencyModel>().unwrap(), m);
    }

    #[test]
    fn uniform_samples_stay_in_range_and_repeat() {
        let m = LatencyModel::UniformJitter {
            base_ms: 80.0,
            spread_ms: 40.0,
        };
        for i in 0..200 {
            let id = format!("img-{i}");
            let x = m.sample_ms(5, &id);
            assert!((80.0..=120.0).contains(&x));
            assert_eq!(x.to_bits(), m.sample_ms(5, &id).to_bits());
        }
        assert_ne!(m.sample_ms(5, "a"), m.sample_ms(6, "a"));
    }

    #[test]
    fn mock_reports_modeled_latency_under_virtual_clock() {
        let agent = WorkerAgent::new("w", Tier::Fog, 1, mock(LatencyModel::Fixed { ms: 100.0 }));
        match agent.run_task(&envelope("img"), ExecClock::Virtual) {
            Message::Result(r) => {
                assert_eq!(r.compute_ms, 100.0);
                assert_eq!(r.task_id, "t000001");
                assert_eq!(r.detections.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(agent.busy(), 0);
    }

    #[test]
    fn slots_are_enforced() {
        let agent = WorkerAgent::new("w", Tier::Fog, 1, mock(LatencyModel::Fixed { ms: 1.0 }));
        let env = envelope("img");
        let held = agent.try_acquire(&env.header).unwrap();
        match agent.run_task(&env, ExecClock::Virtual) {
            Message::Error(e) => {
                assert_eq!(e.code, codes::NO_FREE_SLOT);
                assert_eq!(e.task_id.as_deref(), Some("t000001"));
            }
            other => panic!("unexpected {other:?}"),
        }
        drop(held);
        assert!(matches!(agent.run_task(&env, ExecClock::Virtual), Message::Result(_)));
    }

    #[test]
    fn tensor_file_roundtrip_and_missing_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let det = Detection::new(0, 0.63, BoundingBox::new(0.3, 0.7, 0.2, 0.4));
        let grid = encode(&[det], GridSpec::new(3, 2).unwrap()).unwrap();
        std::fs::write(fixture_path(dir.path(), "img-7"), grid.to_fixture_string()).unwrap();
        let tf = TensorFileDetector::new(dir.path(), Thresholds::default()).unwrap();
        let got = tf.tensor_file_detect("img-7").unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].class_id, 0);
        assert!((got[0].score - 0.63).abs() < 1e-12);

        let agent = WorkerAgent::new("w", Tier::Cloud, 1, Arc::new(tf));
        match agent.run_task(&envelope("img-8"), ExecClock::Virtual) {
            Message::Error(e) => {
                assert_eq!(e.code, codes::DETECTOR_FAILED);
                assert_eq!(e.task_id.as_deref(), Some("t000001"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_fixture_directory_is_a_startup_error() {
        assert!(matches!(
            TensorFileDetector::new("/definitely/not/here", Thresholds::default()),
            Err(DetectorError::MissingDirectory(_))
        ));
    }

    #[test]
    fn detector_spec_from_toml() {
        let spec: DetectorSpec = toml::from_str(
            r#"
kind = "mock"
latency = "uniform:80:40"
seed = 3
detections = [{ class_id = 1, score = 0.5, cx = 0.5, cy = 0.5, w = 0.1, h = 0.1 }]
"#,
        )
        .unwrap();
        assert!(matches!(spec, DetectorSpec::Mock { seed: 3, .. }));
    }
}
