//! Append-only JSONL event log, snapshots and crash recovery.
//!
//! State is a pure fold over the log: [`replay`] runs every record through
//! [`ExperimentState::apply`], the same transition the live path uses.
//!
//! On-disk layout under a data directory:
//!
//! ```text
//! <data_dir>/<experiment_id>/config.json
//! <data_dir>/<experiment_id>/events.jsonl
//! <data_dir>/<experiment_id>/snapshots/<seq>.json
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::evolution::{Candidate, GenerationReport, StopReason};
use crate::experiment::{ApplyError, Experiment, ExperimentState};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 10_000;
/// Snapshots kept on disk after a new one is written.
const SNAPSHOTS_KEPT: usize = 2;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("sequence gap: expected {expected}, got {actual}")]
    SequenceGap { expected: u64, actual: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log is empty: no experiment_created record")]
    Empty,
    #[error("first record must be experiment_created, found {0}")]
    MissingCreated(&'static str),
    #[error("record {sequence}: {source}")]
    Apply { sequence: u64, source: ApplyError },
    #[error("snapshot at sequence {snapshot} is ahead of the log head {head}")]
    SnapshotAhead { snapshot: u64, head: u64 },
    #[error("snapshot checksum mismatch")]
    Checksum,
    #[error(transparent)]
    Persist(#[from] PersistError),
}

/// Serde form of a ChaCha RNG position: hex seed, stream and word position.
/// The word position is a decimal string because it is a u128.
pub mod rng_checkpoint {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Raw {
        seed: String,
        stream: u64,
        word_pos: String,
    }

    pub fn serialize<S: Serializer>(rng: &ChaCha8Rng, s: S) -> Result<S::Ok, S::Error> {
        Raw {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ChaCha8Rng, D::Error> {
        let raw = Raw::deserialize(d)?;
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&raw.seed, &mut seed).map_err(D::Error::custom)?;
        let word_pos: u128 = raw.word_pos.parse().map_err(D::Error::custom)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(raw.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub sequence: u64,
    /// Milliseconds since the epoch, supplied by the caller's clock.
    pub timestamp: i64,
    #[serde(flatten)]
    pub body: RecordBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewCandidate {
    pub id: u64,
    pub genome: crate::space::Genome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum RecordBody {
    ExperimentCreated {
        experiment_id: String,
        config: ExperimentConfig,
    },
    /// Draft → running; carries the initial population and the breeding RNG after seeding.
    Started {
        population: Vec<Candidate>,
        #[serde(with = "rng_checkpoint")]
        rng: ChaCha8Rng,
    },
    /// A new user-assignment; counts one impression.
    Assignment {
        user_id: String,
        candidate_id: u64,
        expires_at: i64,
    },
    /// A sticky revisit counted as an extra impression.
    Impression {
        user_id: String,
        candidate_id: u64,
    },
    /// `candidate_id` is absent when the conversion could not be attributed.
    Conversion {
        user_id: String,
        candidate_id: Option<u64>,
    },
    GenerationAdvanced {
        report: GenerationReport,
        offspring: Vec<NewCandidate>,
        #[serde(with = "rng_checkpoint")]
        rng: ChaCha8Rng,
    },
    Stopped {
        reason: StopReason,
    },
}

impl RecordBody {
    pub fn kind(&self) -> &'static str {
        match self {
            RecordBody::ExperimentCreated { .. } => "experiment_created",
            RecordBody::Started { .. } => "started",
            RecordBody::Assignment { .. } => "assignment",
            RecordBody::Impression { .. } => "impression",
            RecordBody::Conversion { .. } => "conversion",
            RecordBody::GenerationAdvanced { .. } => "generation_advanced",
            RecordBody::Stopped { .. } => "stopped",
        }
    }
}

/// Destination for committed records. `append` must reject sequence gaps and
/// must not return before the record is durable by its own standard.
pub trait RecordSink {
    fn append(&mut self, record: &LogRecord) -> Result<u64, PersistError>;
    fn last_sequence(&self) -> u64;
}

impl<S: RecordSink + ?Sized> RecordSink for Box<S> {
    fn append(&mut self, record: &LogRecord) -> Result<u64, PersistError> {
        (**self).append(record)
    }

    fn last_sequence(&self) -> u64 {
        (**self).last_sequence()
    }
}

fn check_next(last: u64, record: &LogRecord) -> Result<(), PersistError> {
    if record.sequence != last + 1 {
        return Err(PersistError::SequenceGap {
            expected: last + 1,
            actual: record.sequence,
        });
    }
    Ok(())
}

/// In-memory log.
#[derive(Debug, Default, Clone)]
pub struct MemoryLog {
    pub records: Vec<LogRecord>,
}

impl MemoryLog {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RecordSink for MemoryLog {
    fn append(&mut self, record: &LogRecord) -> Result<u64, PersistError> {
        check_next(self.last_sequence(), record)?;
        self.records.push(record.clone());
        Ok(record.sequence)
    }

    fn last_sequence(&self) -> u64 {
        self.records.last().map_or(0, |r| r.sequence)
    }
}

/// Keeps only the sequence counter.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullLog {
    last: u64,
}

impl RecordSink for NullLog {
    fn append(&mut self, record: &LogRecord) -> Result<u64, PersistError> {
        check_next(self.last, record)?;
        self.last = record.sequence;
        Ok(record.sequence)
    }

    fn last_sequence(&self) -> u64 {
        self.last
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// Leave records in the write buffer until it fills or [`FileLog::finish`].
    Buffered,
    /// Flush to the OS on every append.
    Flush,
    /// Flush and `fsync` on every append.
    #[default]
    Sync,
}

/// JSONL file log.
#[derive(Debug)]
pub struct FileLog {
    writer: BufWriter<File>,
    last: u64,
    durability: Durability,
}

impl FileLog {
    /// Creates a new, empty log. Fails if the file exists.
    pub fn create(path: &Path, durability: Durability) -> Result<Self, PersistError> {
        let file = OpenOptions::new().write(true).create_new(true).open(path)?;
        Ok(Self {
            writer: BufWriter::new(file),
            last: 0,
            durability,
        })
    }

    /// Opens an existing log for appending after `last_sequence`.
    pub fn open_append(
        path: &Path,
        last_sequence: u64,
        durability: Durability,
    ) -> Result<Self, PersistError> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            writer: BufWriter::new(file),
            last: last_sequence,
            durability,
        })
    }
}

impl FileLog {
    /// Flushes buffered records and syncs the file.
    pub fn finish(mut self) -> Result<(), PersistError> {
        self.writer.flush()?;
        self.writer.get_ref().sync_all()?;
        Ok(())
    }
}

impl RecordSink for FileLog {
    fn append(&mut self, record: &LogRecord) -> Result<u64, PersistError> {
        check_next(self.last, record)?;
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        match self.durability {
            Durability::Buffered => {}
            Durability::Flush => self.writer.flush()?,
            Durability::Sync => {
                self.writer.flush()?;
                self.writer.get_ref().sync_data()?;
            }
        }
        self.last = record.sequence;
        Ok(record.sequence)
    }

    fn last_sequence(&self) -> u64 {
        self.last
    }
}

/// Result of reading a log file: the valid prefix and where it ended.
#[derive(Debug, Default)]
pub struct LogContents {
    pub records: Vec<LogRecord>,
    /// Byte length of the valid prefix.
    pub valid_bytes: u64,
    /// Line number (1-based) and reason of the first unreadable record, if any.
    pub corrupt_at: Option<(usize, String)>,
}

/// Reads records until the first malformed, torn or out-of-sequence line.
pub fn read_log(path: &Path) -> Result<LogContents, PersistError> {
    let bytes = fs::read(path)?;
    let mut contents = LogContents::default();
    let mut last = 0;
    let mut pos = 0;
    let mut line_no = 0;
    while pos < bytes.len() {
        line_no += 1;
        let Some(len) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            contents.corrupt_at = Some((line_no, "record missing its line terminator".into()));
            break;
        };
        let parsed = serde_json::from_slice::<LogRecord>(&bytes[pos..pos + len])
            .map_err(|e| e.to_string())
            .and_then(|r| {
                if r.sequence == last + 1 {
                    Ok(r)
                } else {
                    Err(format!(
                        "expected sequence {}, found {}",
                        last + 1,
                        r.sequence
                    ))
                }
            });
        match parsed {
            Ok(record) => {
                last = record.sequence;
                contents.records.push(record);
                pos += len + 1;
                contents.valid_bytes = pos as u64;
            }
            Err(reason) => {
                contents.corrupt_at = Some((line_no, reason));
                break;
            }
        }
    }
    Ok(contents)
}

/// Folds records into a state, optionally stopping after `up_to` (inclusive).
pub fn replay(records: &[LogRecord], up_to: Option<u64>) -> Result<ExperimentState, ReplayError> {
    let (first, rest) = records.split_first().ok_or(ReplayError::Empty)?;
    let mut state = ExperimentState::from_created(first).map_err(|e| match e {
        ApplyError::NotCreated(kind) => ReplayError::MissingCreated(kind),
        other => ReplayError::Apply {
            sequence: first.sequence,
            source: other,
        },
    })?;
    for record in rest {
        if up_to.is_some_and(|k| record.sequence > k) {
            break;
        }
        state.apply(record).map_err(|source| ReplayError::Apply {
            sequence: record.sequence,
            source,
        })?;
    }
    Ok(state)
}

/// SHA-256 over the canonical JSON form of a state.
pub fn state_hash(state: &ExperimentState) -> String {
    let bytes = serde_json::to_vec(state).expect("state serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub sequence: u64,
    pub checksum: String,
    pub state: ExperimentState,
}

impl Snapshot {
    pub fn of(state: &ExperimentState) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            sequence: state.last_sequence,
            checksum: state_hash(state),
            state: state.clone(),
        }
    }

    pub fn verify(&self) -> Result<(), ReplayError> {
        if self.sequence != self.state.last_sequence || state_hash(&self.state) != self.checksum {
            return Err(ReplayError::Checksum);
        }
        Ok(())
    }
}

/// Rebuilds state from a snapshot plus the records after it.
pub fn restore(snapshot: &Snapshot, log: &[LogRecord]) -> Result<ExperimentState, ReplayError> {
    snapshot.verify()?;
    let head = log.last().map_or(0, |r| r.sequence);
    if snapshot.sequence > head {
        return Err(ReplayError::SnapshotAhead {
            snapshot: snapshot.sequence,
            head,
        });
    }
    let mut state = snapshot.state.clone();
    for record in log.iter().filter(|r| r.sequence > snapshot.sequence) {
        state.apply(record).map_err(|source| ReplayError::Apply {
            sequence: record.sequence,
            source,
        })?;
    }
    Ok(state)
}

/// Directory-backed experiments following the on-disk layout above.
#[derive(Debug, Clone)]
pub struct ExperimentStore {
    root: PathBuf,
    snapshot_every: u64,
    durability: Durability,
}

/// What [`ExperimentStore::open`] found while recovering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Recovery {
    pub snapshot_sequence: Option<u64>,
    pub snapshot_rejected: bool,
    pub truncated_at_line: Option<usize>,
}

impl ExperimentStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            durability: Durability::Sync,
        }
    }

    pub fn with_snapshot_every(mut self, every: u64) -> Self {
        self.snapshot_every = every.max(1);
        self
    }

    pub fn with_durability(mut self, durability: Durability) -> Self {
        self.durability = durability;
        self
    }

    pub fn snapshot_every(&self) -> u64 {
        self.snapshot_every
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn events_path(&self, id: &str) -> PathBuf {
        self.dir(id).join("events.jsonl")
    }

    pub fn exists(&self, id: &str) -> bool {
        self.events_path(id).exists()
    }

    /// Experiment ids with an event log, sorted.
    pub fn list(&self) -> Result<Vec<String>, PersistError> {
        let mut ids = Vec::new();
        if !self.root.exists() {
            return Ok(ids);
        }
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join("events.jsonl").exists() {
                if let Some(name) = entry.file_name().to_str() {
                    ids.push(name.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn create(
        &self,
        id: &str,
        config: ExperimentConfig,
        now: i64,
    ) -> Result<Experiment<FileLog>, crate::experiment::ExperimentError> {
        let dir = self.dir(id);
        fs::create_dir_all(dir.join("snapshots")).map_err(PersistError::from)?;
        fs::write(dir.join("config.json"), config.to_json_pretty()).map_err(PersistError::from)?;
        let log = FileLog::create(&self.events_path(id), self.durability)?;
        Experiment::create(id, config, now, log)
    }

    /// Recovers an experiment: newest valid snapshot plus log tail, or full
    /// replay when no snapshot verifies. A torn final record is cut off.
    pub fn open(&self, id: &str) -> Result<(Experiment<FileLog>, Recovery), ReplayError> {
        let path = self.events_path(id);
        let contents = read_log(&path)?;
        let mut recovery = Recovery {
            truncated_at_line: contents.corrupt_at.as_ref().map(|(line, _)| *line),
            ..Recovery::default()
        };
        if contents.corrupt_at.is_some() {
            let file = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(PersistError::from)?;
            file.set_len(contents.valid_bytes)
                .map_err(PersistError::from)?;
            file.sync_all().map_err(PersistError::from)?;
        }
        let head = contents.records.last().map_or(0, |r| r.sequence);
        let mut state = None;
        for (seq, snap_path) in self.snapshot_paths(id)?.into_iter().rev() {
            if seq > head {
                recovery.snapshot_rejected = true;
                continue;
            }
            let loaded = fs::read(&snap_path)
                .map_err(PersistError::from)
                .and_then(|bytes| Ok(serde_json::from_slice::<Snapshot>(&bytes)?));
            match loaded
                .map_err(ReplayError::from)
                .and_then(|snap| restore(&snap, &contents.records))
            {
                Ok(restored) => {
                    recovery.snapshot_sequence = Some(seq);
                    state = Some(restored);
                    break;
                }
                Err(_) => recovery.snapshot_rejected = true,
            }
        }
        let state = match state {
            Some(state) => state,
            None => replay(&contents.records, None)?,
        };
        let log = FileLog::open_append(&path, head, self.durability)?;
        Ok((Experiment::from_state(state, log), recovery))
    }

    fn snapshot_paths(&self, id: &str) -> Result<Vec<(u64, PathBuf)>, PersistError> {
        let dir = self.dir(id).join("snapshots");
        let mut found = Vec::new();
        if !dir.exists() {
            return Ok(found);
        }
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let seq = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok());
            if let (Some(seq), Some("json")) = (seq, path.extension().and_then(|e| e.to_str())) {
                found.push((seq, path));
            }
        }
        found.sort();
        Ok(found)
    }

    pub fn write_snapshot(&self, state: &ExperimentState) -> Result<PathBuf, PersistError> {
        let dir = self.dir(&state.experiment_id).join("snapshots");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.json", state.last_sequence));
        let tmp = dir.join(format!("{}.json.tmp", state.last_sequence));
        fs::write(&tmp, serde_json::to_vec(&Snapshot::of(state))?)?;
        fs::rename(&tmp, &path)?;
        let existing = self.snapshot_paths(&state.experiment_id)?;
        if existing.len() > SNAPSHOTS_KEPT {
            for (_, old) in &existing[..existing.len() - SNAPSHOTS_KEPT] {
                fs::remove_file(old)?;
            }
        }
        Ok(path)
    }

    /// Writes a snapshot when at least `snapshot_every` records were appended since the last one.
    pub fn maybe_snapshot(&self, state: &ExperimentState) -> Result<Option<PathBuf>, PersistError> {
        let last = self
            .snapshot_paths(&state.experiment_id)?
            .last()
            .map_or(0, |(seq, _)| *seq);
        if state.last_sequence >= last + self.snapshot_every {
            return self.write_snapshot(state).map(Some);
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::template_config;
    use crate::experiment::ExperimentStatus;
    use crate::simulator::{Simulation, SimulationScenario};

    fn scenario() -> SimulationScenario {
        SimulationScenario::from_config(&template_config()).unwrap()
    }

    fn drive(store: &ExperimentStore, users: u64) -> ExperimentState {
        let s = scenario();
        let mut exp = store
            .create(&s.experiment_id(), s.config.clone(), 0)
            .unwrap();
        exp.start(0).unwrap();
        let mut sim = Simulation::resume(&s, exp);
        sim.run_until(users).unwrap();
        sim.finish().0.state
    }

    #[test]
    fn record_json_shape() {
        let record = LogRecord {
            schema_version: SCHEMA_VERSION,
            sequence: 7,
            timestamp: 12,
            body: RecordBody::Impression {
                user_id: "u".into(),
                candidate_id: 3,
            },
            idempotency_key: None,
        };
        let text = serde_json::to_string(&record).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["kind"], "impression");
        assert_eq!(value["payload"]["candidate_id"], 3);
        assert_eq!(value["schema_version"], 1);
        assert_eq!(serde_json::from_str::<LogRecord>(&text).unwrap(), record);
    }

    #[test]
    fn memory_log_rejects_gaps() {
        let mut log = MemoryLog::new();
        let record = |sequence| LogRecord {
            schema_version: SCHEMA_VERSION,
            sequence,
            timestamp: 0,
            body: RecordBody::Stopped {
                reason: StopReason::Manual,
            },
            idempotency_key: None,
        };
        log.append(&record(1)).unwrap();
        assert!(matches!(
            log.append(&record(3)),
            Err(PersistError::SequenceGap {
                expected: 2,
                actual: 3
            })
        ));
        assert!(matches!(
            log.append(&record(1)),
            Err(PersistError::SequenceGap { .. })
        ));
        assert_eq!(log.last_sequence(), 1);
    }

    #[test]
    fn empty_log_does_not_replay() {
        assert!(matches!(replay(&[], None), Err(ReplayError::Empty)));
    }

    #[test]
    fn file_round_trip_and_prefix_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperimentStore::new(dir.path()).with_durability(Durability::Flush);
        let live = drive(&store, 700);
        let contents = read_log(&store.events_path(&live.experiment_id)).unwrap();
        assert!(contents.corrupt_at.is_none(), "{:?}", contents.corrupt_at);
        assert_eq!(replay(&contents.records, None).unwrap(), live);
        let prefix = replay(&contents.records, Some(10)).unwrap();
        assert_eq!(prefix.last_sequence, 10);
        assert_eq!(prefix, replay(&contents.records[..10], None).unwrap());
        assert_eq!(store.list().unwrap(), vec![live.experiment_id.clone()]);
    }

    #[test]
    fn snapshot_restore_matches_full_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperimentStore::new(dir.path()).with_durability(Durability::Flush);
        let s = scenario();
        let mut exp = store
            .create(&s.experiment_id(), s.config.clone(), 0)
            .unwrap();
        exp.start(0).unwrap();
        let mut sim = Simulation::resume(&s, exp);
        sim.run_until(400).unwrap();
        store.write_snapshot(sim.experiment().state()).unwrap();
        sim.run_until(900).unwrap();
        let live = sim.finish().0.state;

        let (reopened, recovery) = store.open(&live.experiment_id).unwrap();
        assert!(recovery.snapshot_sequence.is_some());
        assert!(!recovery.snapshot_rejected);
        assert_eq!(reopened.state(), &live);
    }

    #[test]
    fn corrupt_snapshot_falls_back_to_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperimentStore::new(dir.path()).with_durability(Durability::Flush);
        let live = drive(&store, 500);
        let path = store.write_snapshot(&live).unwrap();
        let mut snap: Snapshot = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        snap.state.total_impressions += 1;
        fs::write(&path, serde_json::to_vec(&snap).unwrap()).unwrap();

        let (reopened, recovery) = store.open(&live.experiment_id).unwrap();
        assert!(recovery.snapshot_rejected);
        assert_eq!(recovery.snapshot_sequence, None);
        assert_eq!(reopened.state(), &live);
    }

    #[test]
    fn torn_tail_is_truncated_and_appends_continue() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperimentStore::new(dir.path()).with_durability(Durability::Flush);
        let live = drive(&store, 300);
        let path = store.events_path(&live.experiment_id);
        let mut file = OpenOptions::new().append(true).open(&path).unwrap();
        file.write_all(br#"{"schema_version":1,"sequence":"#)
            .unwrap();
        drop(file);

        let (mut reopened, recovery) = store.open(&live.experiment_id).unwrap();
        assert!(recovery.truncated_at_line.is_some());
        assert_eq!(reopened.state(), &live);
        reopened.assign("late-user", 1).unwrap();
        let contents = read_log(&path).unwrap();
        assert!(contents.corrupt_at.is_none());
        assert_eq!(replay(&contents.records, None).unwrap(), *reopened.state());
    }

    #[test]
    fn snapshots_are_pruned() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperimentStore::new(dir.path())
            .with_durability(Durability::Flush)
            .with_snapshot_every(100);
        let s = scenario();
        let mut exp = store
            .create(&s.experiment_id(), s.config.clone(), 0)
            .unwrap();
        exp.start(0).unwrap();
        let mut sim = Simulation::resume(&s, exp);
        let mut written = 0;
        while sim.next_user() < 1_000 && sim.step().unwrap() {
            if store
                .maybe_snapshot(sim.experiment().state())
                .unwrap()
                .is_some()
            {
                written += 1;
            }
        }
        assert!(written > SNAPSHOTS_KEPT);
        let id = s.experiment_id();
        assert_eq!(store.snapshot_paths(&id).unwrap().len(), SNAPSHOTS_KEPT);
    }

    #[test]
    fn create_refuses_existing_log() {
        let dir = tempfile::tempdir().unwrap();
        let store = ExperimentStore::new(dir.path());
        let cfg = template_config();
        store.create("x", cfg.clone(), 0).unwrap();
        assert!(store.create("x", cfg, 0).is_err());
        let (exp, _) = store.open("x").unwrap();
        assert_eq!(exp.state().status, ExperimentStatus::Draft);
    }
}
