//! `.traj.jsonl` persistence: a header line, then one JSON record per
//! trajectory; observations and chunks are base64 of little-endian `f64`.
//! A `<file>.manifest.json` sidecar lists counts per (source, family, label).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Label, Result, Source, Trajectory, TrajectoryStore};
use crate::env::{ActionChunk, EventAnnotation, Observation, TaskSpec, CHUNK_DIM, OBS_DIM};

pub const FORMAT_TAG: &str = "vlaw-traj";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: TaskSpec,
    source: Source,
    label: Label,
    obs: String,
    chunks: String,
    events: Vec<EventAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
}

fn encode_f64s(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(s: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("base64: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of f64", bytes.len()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn encode_record(t: &Trajectory) -> String {
    let rec = Record {
        task: t.task,
        source: t.source,
        label: t.label,
        obs: encode_f64s(t.observations().iter().flat_map(|o| o.0)),
        chunks: encode_f64s(t.chunks().iter().flat_map(|c| c.flat())),
        events: t.events.clone(),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

fn decode_record(line: &str) -> std::result::Result<Trajectory, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obs = decode_f64s(&rec.obs)?;
    let chunks = decode_f64s(&rec.chunks)?;
    if obs.len() % OBS_DIM != 0 || chunks.len() % CHUNK_DIM != 0 {
        return Err("payload length not a multiple of row size".into());
    }
    let observations = obs.chunks_exact(OBS_DIM).map(|c| Observation::from_slice(c).unwrap()).collect();
    let chunks = chunks
        .chunks_exact(CHUNK_DIM)
        .map(|c| ActionChunk::from_flat(c).unwrap())
        .collect();
    let mut t = Trajectory::new(rec.task, observations, chunks, rec.source).map_err(|e| e.to_string())?;
    t.label = rec.label;
    t.events = rec.events;
    Ok(t)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn manifest(store: &TrajectoryStore) -> Manifest {
    let counts = store
        .index_counts()
        .map(|((s, f, l), n)| (format!("{}/{}/{}", s.name(), f.name(), l.name()), n))
        .collect();
    Manifest {
        total: store.len(),
        counts,
    }
}

pub fn save(store: &TrajectoryStore, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| DatasetError::Io(format!("{}: {e}", path.display()));
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        count: store.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for t in store.iter() {
        out.push_str(&encode_record(t));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io)?;
    let m = serde_json::to_string_pretty(&manifest(store)).expect("manifest serializes");
    std::fs::write(manifest_path(path), m + "\n").map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrajectoryStore> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))?;
    let corrupt = |offset: usize, line: usize, reason: String| DatasetError::Corrupt { offset, line, reason };
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().ok_or_else(|| corrupt(0, 1, "empty file".into()))?;
    let header: Header = serde_json::from_str(first.trim_end()).map_err(|e| corrupt(0, 1, format!("header: {e}")))?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(corrupt(0, 1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    offset += first.len();
    let mut store = TrajectoryStore::new();
    for (i, raw) in lines.enumerate() {
        let line_no = i + 2;
        if !raw.ends_with('\n') {
            return Err(corrupt(offset, line_no, "truncated record".into()));
        }
        let t = decode_record(raw.trim_end()).map_err(|r| corrupt(offset, line_no, r))?;
        store.append(t).map_err(|e| corrupt(offset, line_no, e.to_string()))?;
        offset += raw.len();
    }
    if store.len() != header.count {
        return Err(corrupt(
            offset,
            header.count + 1,
            format!("header promises {} records, found {}", header.count, store.len()),
        ));
    }
    Ok(store)
}
