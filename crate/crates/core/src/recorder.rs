//! Episode dataset capture.
//!
//! A session directory holds `manifest.txt` plus one `episode_<id>.csv` per
//! episode. Both files are append-only; the field order is documented in
//! `docs/dataset.md`. Floats are written in shortest round-trip form, so a
//! loaded episode is bit-identical to the one that was recorded.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::thread::{self, JoinHandle};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::sim::{FollowerSim, ScenarioConfig};
use crate::types::{JointVector, Pose, SlaveCommand, JOINTS};

pub const EPISODE_HEADER: &str = "echo-episode";
pub const EPISODE_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "echo-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
/// Values per row: t, three joint vectors, position, quaternion, gripper, force, mode, ff.
pub const FIELDS_PER_ROW: usize = 1 + 3 * JOINTS + 3 + 4 + 4;

/// One dataset row, sampled once per control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    /// Microseconds since episode start.
    pub t_us: u64,
    pub leader_q: JointVector,
    pub cmd_q: JointVector,
    pub measured_q: JointVector,
    /// Forward kinematics of `measured_q`.
    pub ee_pose: Pose,
    pub gripper_cmd: f64,
    pub grip_force: f64,
    /// Sensitivity divisor.
    pub mode: u8,
    pub ff_enabled: bool,
}

impl EpisodeRecord {
    fn floats(&self) -> impl Iterator<Item = f64> + '_ {
        self.leader_q
            .iter()
            .chain(self.cmd_q.iter())
            .chain(self.measured_q.iter())
            .chain(self.ee_pose.position.iter())
            .chain(self.ee_pose.orientation.iter())
            .copied()
            .chain([self.gripper_cmd, self.grip_force])
    }

    pub fn is_finite(&self) -> bool {
        self.floats().all(f64::is_finite)
    }

    pub fn to_row(&self) -> String {
        let mut row = self.t_us.to_string();
        for v in self.floats() {
            let _ = write!(row, ",{v:?}");
        }
        let _ = write!(row, ",{},{}", self.mode, u8::from(self.ff_enabled));
        row
    }

    pub fn parse_row(row: &str) -> Result<EpisodeRecord, String> {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != FIELDS_PER_ROW {
            return Err(format!(
                "expected {FIELDS_PER_ROW} fields, found {}",
                fields.len()
            ));
        }
        let t_us = fields[0]
            .parse::<u64>()
            .map_err(|e| format!("t: {e}"))?;
        let floats = fields[1..FIELDS_PER_ROW - 2]
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.parse::<f64>()
                    .map_err(|e| format!("field {}: {e}", i + 2))
                    .and_then(|v| {
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(format!("field {}: non-finite value", i + 2))
                        }
                    })
            })
            .collect::<Result<Vec<f64>, String>>()?;
        let joints = |k: usize| JointVector(std::array::from_fn(|i| floats[k * JOINTS + i]));
        let p = 3 * JOINTS;
        let mode = fields[FIELDS_PER_ROW - 2]
            .parse::<u8>()
            .map_err(|e| format!("mode: {e}"))?;
        let ff_enabled = match fields[FIELDS_PER_ROW - 1] {
            "0" => false,
            "1" => true,
            other => return Err(format!("ff flag must be 0 or 1, got {other:?}")),
        };
        Ok(EpisodeRecord {
            t_us,
            leader_q: joints(0),
            cmd_q: joints(1),
            measured_q: joints(2),
            ee_pose: Pose {
                position: [floats[p], floats[p + 1], floats[p + 2]],
                orientation: [floats[p + 3], floats[p + 4], floats[p + 5], floats[p + 6]],
            },
            gripper_cmd: floats[p + 7],
            grip_force: floats[p + 8],
            mode,
            ff_enabled,
        })
    }

    pub fn command(&self) -> SlaveCommand {
        SlaveCommand {
            q_target: self.cmd_q,
            gripper_target: self.gripper_cmd,
        }
    }
}

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("an episode is already being recorded")]
    AlreadyRecording,
    #[error("no episode is open")]
    NotRecording,
    #[error("timestamp {got} us does not follow {last} us")]
    NonMonotonicTimestamp { last: u64, got: u64 },
    #[error("record contains non-finite values")]
    NonFinite,
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read episode: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },
    #[error("episode format version {found} is not supported (reader is v{EPISODE_VERSION})")]
    VersionMismatch { found: String },
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("episode was recorded with config {recorded}, replay sim has {current}")]
    ConfigMismatch { recorded: String, current: String },
    #[error("episode has a non-increasing timestamp at row {0}")]
    BadTiming(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeStatus {
    Open,
    Completed,
    Aborted,
}

impl EpisodeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeStatus::Open => "open",
            EpisodeStatus::Completed => "completed",
            EpisodeStatus::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeManifest {
    pub id: u64,
    pub start_unix_ms: u64,
    pub samples: u64,
    pub duration_us: u64,
    pub status: EpisodeStatus,
    pub config_hash: String,
    pub dropped: u64,
}

pub fn episode_file_name(id: u64) -> String {
    format!("episode_{id}.csv")
}

pub fn encode_episode(records: &[EpisodeRecord]) -> String {
    let mut out = format!("{EPISODE_HEADER} v{EPISODE_VERSION}\n");
    for r in records {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out
}

pub fn save_episode(path: &Path, records: &[EpisodeRecord]) -> io::Result<()> {
    fs::write(path, encode_episode(records))
}

pub fn parse_episode(text: &str) -> Result<Vec<EpisodeRecord>, LoadError> {
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("");
    let version = header
        .trim_end_matches('\n')
        .strip_prefix(EPISODE_HEADER)
        .and_then(|v| v.strip_prefix(" v"))
        .ok_or_else(|| LoadError::MalformedRow {
            line: 1,
            msg: format!("expected header `{EPISODE_HEADER} v{EPISODE_VERSION}`"),
        })?;
    if version != EPISODE_VERSION.to_string() {
        return Err(LoadError::VersionMismatch {
            found: version.to_string(),
        });
    }
    let mut records = Vec::new();
    for (idx, raw) in lines.enumerate() {
        let line = idx + 2;
        let Some(row) = raw.strip_suffix('\n') else {
            return Err(LoadError::MalformedRow {
                line,
                msg: "truncated row (missing line terminator)".into(),
            });
        };
        let record = EpisodeRecord::parse_row(row).map_err(|msg| LoadError::MalformedRow { line, msg })?;
        if let Some(prev) = records.last().map(|r: &EpisodeRecord| r.t_us) {
            if record.t_us <= prev {
                return Err(LoadError::MalformedRow {
                    line,
                    msg: format!("timestamp {} does not follow {prev}", record.t_us),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_episode(path: &Path) -> Result<Vec<EpisodeRecord>, LoadError> {
    parse_episode(&fs::read_to_string(path)?)
}

/// Destination for recorded samples.
pub trait RecordSink: Send {
    fn start_episode(&mut self, config_hash: &str) -> Result<u64, RecorderError>;
    fn append_sample(&mut self, record: &EpisodeRecord) -> Result<(), RecorderError>;
    fn end_episode(&mut self) -> Result<EpisodeManifest, RecorderError>;
    /// Samples lost since the episode started.
    fn dropped(&self) -> u64 {
        0
    }
}

struct OpenEpisode {
    manifest: EpisodeManifest,
    file: File,
    last_t: Option<u64>,
}

/// Synchronous recorder bound to one session directory.
pub struct Recorder {
    dir: PathBuf,
    next_id: u64,
    open: Option<OpenEpisode>,
}

impl Recorder {
    /// Open (creating if needed) a session directory. Episodes left open by a
    /// crash are truncated to their last complete row and marked aborted.
    pub fn open(dir: &Path) -> Result<Recorder, RecorderError> {
        fs::create_dir_all(dir)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            fs::write(&manifest_path, format!("{MANIFEST_HEADER}\n"))?;
        }
        let entries = read_manifest(dir)?;
        let mut recorder = Recorder {
            dir: dir.to_path_buf(),
            next_id: entries.iter().map(|e| e.id).max().unwrap_or(0) + 1,
            open: None,
        };
        for entry in entries.iter().filter(|e| e.status == EpisodeStatus::Open) {
            recorder.recover(entry)?;
        }
        Ok(recorder)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn is_recording(&self) -> bool {
        self.open.is_some()
    }

    pub fn add_dropped(&mut self, n: u64) {
        if let Some(open) = self.open.as_mut() {
            open.manifest.dropped += n;
        }
    }

    fn recover(&mut self, entry: &EpisodeManifest) -> Result<(), RecorderError> {
        let path = self.dir.join(episode_file_name(entry.id));
        let (samples, duration_us) = match fs::read(&path) {
            Ok(bytes) => {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                if keep < bytes.len() {
                    OpenOptions::new().write(true).open(&path)?.set_len(keep as u64)?;
                }
                let text = String::from_utf8_lossy(&bytes[..keep]);
                let rows: Vec<&str> = text.lines().skip(1).collect();
                let last_t = rows
                    .last()
                    .and_then(|r| r.split(',').next())
                    .and_then(|t| t.parse::<u64>().ok())
                    .unwrap_or(0);
                (rows.len() as u64, last_t)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => (0, 0),
            Err(e) => return Err(e.into()),
        };
        self.append_manifest(&format!(
            "end id={} status={} samples={samples} duration_us={duration_us} dropped=0",
            entry.id,
            EpisodeStatus::Aborted.as_str()
        ))
    }

    fn append_manifest(&self, line: &str) -> Result<(), RecorderError> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(self.dir.join(MANIFEST_FILE))?;
        f.write_all(format!("{line}\n").as_bytes())?;
        Ok(())
    }
}

impl RecordSink for Recorder {
    fn start_episode(&mut self, config_hash: &str) -> Result<u64, RecorderError> {
        if self.open.is_some() {
            return Err(RecorderError::AlreadyRecording);
        }
        let id = self.next_id;
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.dir.join(episode_file_name(id)))?;
        file.write_all(format!("{EPISODE_HEADER} v{EPISODE_VERSION}\n").as_bytes())?;
        let start_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let hash = if config_hash.is_empty() { "-" } else { config_hash };
        self.append_manifest(&format!("begin id={id} start_ms={start_unix_ms} config={hash}"))?;
        self.next_id += 1;
        self.open = Some(OpenEpisode {
            manifest: EpisodeManifest {
                id,
                start_unix_ms,
                samples: 0,
                duration_us: 0,
                status: EpisodeStatus::Open,
                config_hash: hash.to_string(),
                dropped: 0,
            },
            file,
            last_t: None,
        });
        Ok(id)
    }

    fn append_sample(&mut self, record: &EpisodeRecord) -> Result<(), RecorderError> {
        let open = self.open.as_mut().ok_or(RecorderError::NotRecording)?;
        if let Some(last) = open.last_t {
            if record.t_us <= last {
                return Err(RecorderError::NonMonotonicTimestamp {
                    last,
                    got: record.t_us,
                });
            }
        }
        if !record.is_finite() {
            return Err(RecorderError::NonFinite);
        }
        let mut row = record.to_row();
        row.push('\n');
        // one write per row: a crash can only leave the final row partial
        open.file.write_all(row.as_bytes())?;
        open.last_t = Some(record.t_us);
        open.manifest.samples += 1;
        open.manifest.duration_us = record.t_us;
        Ok(())
    }

    fn end_episode(&mut self) -> Result<EpisodeManifest, RecorderError> {
        let mut open = self.open.take().ok_or(RecorderError::NotRecording)?;
        open.file.flush()?;
        open.manifest.status = EpisodeStatus::Completed;
        let m = &open.manifest;
        self.append_manifest(&format!(
            "end id={} status={} samples={} duration_us={} dropped={}",
            m.id,
            m.status.as_str(),
            m.samples,
            m.duration_us,
            m.dropped
        ))?;
        Ok(open.manifest)
    }

    fn dropped(&self) -> u64 {
        self.open.as_ref().map_or(0, |o| o.manifest.dropped)
    }
}

enum Job {
    Start(String, SyncSender<Result<u64, RecorderError>>),
    Sample(Box<EpisodeRecord>),
    End(u64, SyncSender<Result<EpisodeManifest, RecorderError>>),
}

/// A [`Recorder`] on its own thread behind a bounded queue. Appending never
/// blocks: when the queue is full the sample is dropped and counted, and the
/// count ends up in the manifest.
pub struct ThreadedRecorder {
    jobs: SyncSender<Job>,
    dropped: u64,
    worker: Option<JoinHandle<()>>,
}

impl ThreadedRecorder {
    pub fn spawn(recorder: Recorder, capacity: usize) -> ThreadedRecorder {
        let (jobs, rx) = sync_channel(capacity.max(1));
        let worker = thread::Builder::new()
            .name("echo-recorder".into())
            .spawn(move || run_worker(recorder, rx))
            .expect("spawn recorder thread");
        ThreadedRecorder {
            jobs,
            dropped: 0,
            worker: Some(worker),
        }
    }

    fn call<T>(&self, job: impl FnOnce(SyncSender<Result<T, RecorderError>>) -> Job) -> Result<T, RecorderError> {
        let (tx, rx) = sync_channel(1);
        let gone = || RecorderError::StorageFailure(io::Error::other("recorder thread stopped"));
        self.jobs.send(job(tx)).map_err(|_| gone())?;
        rx.recv().map_err(|_| gone())?
    }
}

fn run_worker(mut recorder: Recorder, rx: Receiver<Job>) {
    let mut rejected = 0;
    for job in rx {
        match job {
            Job::Start(hash, reply) => {
                rejected = 0;
                let _ = reply.send(recorder.start_episode(&hash));
            }
            Job::Sample(record) => {
                // out-of-order or non-finite rows are counted, never written
                if recorder.append_sample(&record).is_err() {
                    rejected += 1;
                }
            }
            Job::End(dropped, reply) => {
                recorder.add_dropped(dropped + rejected);
                let _ = reply.send(recorder.end_episode());
            }
        }
    }
}

impl RecordSink for ThreadedRecorder {
    fn start_episode(&mut self, config_hash: &str) -> Result<u64, RecorderError> {
        self.dropped = 0;
        let hash = config_hash.to_string();
        self.call(|tx| Job::Start(hash, tx))
    }

    fn append_sample(&mut self, record: &EpisodeRecord) -> Result<(), RecorderError> {
        match self.jobs.try_send(Job::Sample(Box::new(*record))) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(_)) => {
                self.dropped += 1;
                Ok(())
            }
            Err(TrySendError::Disconnected(_)) => Err(RecorderError::StorageFailure(io::Error::other(
                "recorder thread stopped",
            ))),
        }
    }

    fn end_episode(&mut self) -> Result<EpisodeManifest, RecorderError> {
        let dropped = std::mem::take(&mut self.dropped);
        self.call(|tx| Job::End(dropped, tx))
    }

    fn dropped(&self) -> u64 {
        self.dropped
    }
}

impl Drop for ThreadedRecorder {
    fn drop(&mut self) {
        // closing the queue lets the worker drain and exit
        let (dead, _) = sync_channel(1);
        drop(std::mem::replace(&mut self.jobs, dead));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn kv<'a>(tokens: &'a [&'a str], key: &str) -> Option<&'a str> {
    tokens
        .iter()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

/// Merge the begin/end lines of a session manifest, ordered by episode id.
pub fn read_manifest(dir: &Path) -> io::Result<Vec<EpisodeManifest>> {
    let text = match fs::read_to_string(dir.join(MANIFEST_FILE)) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut entries: Vec<EpisodeManifest> = Vec::new();
    let num = |tokens: &[&str], key: &str| kv(tokens, key).and_then(|v| v.parse::<u64>().ok());
    for line in text.lines().skip(1) {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let Some(id) = num(&tokens, "id") else { continue };
        match tokens.first() {
            Some(&"begin") => entries.push(EpisodeManifest {
                id,
                start_unix_ms: num(&tokens, "start_ms").unwrap_or(0),
                samples: 0,
                duration_us: 0,
                status: EpisodeStatus::Open,
                config_hash: kv(&tokens, "config").unwrap_or("-").to_string(),
                dropped: 0,
            }),
            Some(&"end") => {
                if let Some(e) = entries.iter_mut().find(|e| e.id == id) {
                    e.status = match kv(&tokens, "status") {
                        Some("aborted") => EpisodeStatus::Aborted,
                        _ => EpisodeStatus::Completed,
                    };
                    e.samples = num(&tokens, "samples").unwrap_or(0);
                    e.duration_us = num(&tokens, "duration_us").unwrap_or(0);
                    e.dropped = num(&tokens, "dropped").unwrap_or(0);
                }
            }
            _ => {}
        }
    }
    entries.sort_by_key(|e| e.id);
    Ok(entries)
}

/// Re-drive the follower model with the recorded commands.
///
/// Starts from the first row's measured state; row `i` is stepped from row
/// `i - 1` with that row's command over the recorded tick spacing.
pub fn replay(
    records: &[EpisodeRecord],
    recorded_config_hash: &str,
    config: &ScenarioConfig,
) -> Result<Vec<JointVector>, ReplayError> {
    let current = config.hash();
    if current != recorded_config_hash {
        return Err(ReplayError::ConfigMismatch {
            recorded: recorded_config_hash.to_string(),
            current,
        });
    }
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let mut follower = FollowerSim::new(config.follower_params(), config.limits(), first.measured_q, 1.0);
    let mut out = Vec::with_capacity(records.len());
    out.push(follower.q());
    for (i, pair) in records.windows(2).enumerate() {
        let dt_us = pair[1]
            .t_us
            .checked_sub(pair[0].t_us)
            .filter(|&d| d > 0)
            .ok_or(ReplayError::BadTiming(i + 1))?;
        follower.step(&pair[0].command(), dt_us as f64 / 1e6);
        out.push(follower.q());
    }
    Ok(out)
}
