//! Binary checkpoint and suite files.
//!
//! Checkpoint (`ATMCKPT1`), all integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `ATMCKPT1` |
//! | 4 | version (u32, currently 1) |
//! | 4 | header length `n` (u32) |
//! | n | UTF-8 JSON `{"layer_widths": [...], "activation": "...", "label": "..."}` |
//! | 8 | parameter count (u64) |
//! | 8 per param | IEEE-754 f64 values |
//!
//! Suite (`ATMSUIT1`) uses the same magic/version/header framing with a
//! header `{"feature_dim", "class_count", "suite_seed", "tasks": [{"task_id",
//! "class_count"}]}`, followed for every task by its `train`, `val` and
//! `test` splits, each as a u64 row count, `rows * feature_dim` f64 features
//! and `rows` u32 labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};
use crate::numeric::{Activation, ArchSpec, LabeledBatch, ModelState, ParamVector};
use crate::synth::{TaskData, TaskSuite};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATMCKPT1";
pub const SUITE_MAGIC: &[u8; 8] = b"ATMSUIT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layer_widths: Vec<usize>,
    activation: Activation,
    #[serde(default)]
    label: String,
}

#[derive(Serialize, Deserialize)]
struct SuiteHeader {
    feature_dim: usize,
    class_count: usize,
    suite_seed: u64,
    tasks: Vec<SuiteTaskHeader>,
}

#[derive(Serialize, Deserialize)]
struct SuiteTaskHeader {
    task_id: String,
    class_count: usize,
}

fn write_framed(buf: &mut Vec<u8>, magic: &[u8; 8], header: &impl Serialize) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AtmError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| AtmError::io(path, e))
}

/// Cursor over a file's bytes that reports truncation as corruption.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> AtmError {
        AtmError::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.corrupt(format!(
                "truncated while reading {what} (needed {n} bytes at offset {}, file has {})",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.corrupt(format!("{what} count overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn framed<H: for<'de> Deserialize<'de>>(&mut self, magic: &[u8; 8]) -> Result<H> {
        let found = self.take(8, "magic")?;
        if found != magic {
            return Err(self.corrupt(format!(
                "wrong magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(self.corrupt(format!("unsupported version {version}")));
        }
        let len = self.u32("header length")? as usize;
        let json = self.take(len, "header")?;
        serde_json::from_slice(json).map_err(|e| self.corrupt(format!("bad header: {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AtmError::io(path, e))
}

pub fn checkpoint_bytes(model: &ModelState<f64>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        layer_widths: model.arch().layer_widths.clone(),
        activation: model.arch().activation,
        label: model.label.clone(),
    };
    let params = model.params();
    let mut buf = Vec::with_capacity(64 + params.len() * 8);
    write_framed(&mut buf, CHECKPOINT_MAGIC, &header)?;
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &ModelState<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState<f64>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let header: CheckpointHeader = r.framed(CHECKPOINT_MAGIC)?;
    let arch = ArchSpec {
        layer_widths: header.layer_widths,
        activation: header.activation,
    };
    arch.validate().map_err(|e| r.corrupt(e.to_string()))?;
    let count = r.u64("parameter count")? as usize;
    if count != arch.param_count() {
        return Err(r.corrupt(format!(
            "parameter count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let params = r.f64s(count, "parameters")?;
    r.finish()?;
    ModelState::new(arch, ParamVector::from_vec(params), header.label)
}

fn write_split(buf: &mut Vec<u8>, batch: &LabeledBatch<f64>) {
    buf.extend_from_slice(&(batch.len() as u64).to_le_bytes());
    for v in batch.features() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in batch.labels() {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
}

fn read_split(r: &mut Reader<'_>, dim: usize, what: &str) -> Result<LabeledBatch<f64>> {
    let rows = r.u64(what)? as usize;
    let features = r.f64s(rows.checked_mul(dim).ok_or_else(|| r.corrupt("row count overflows"))?, what)?;
    let raw = r.take(rows.checked_mul(4).ok_or_else(|| r.corrupt("row count overflows"))?, what)?;
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    LabeledBatch::new(dim, features, labels).map_err(|e| r.corrupt(e.to_string()))
}

/// Serializes a suite without touching its read counters.
pub fn suite_bytes(suite: &TaskSuite<f64>) -> Result<Vec<u8>> {
    let header = SuiteHeader {
        feature_dim: suite.feature_dim,
        class_count: suite.class_count,
        suite_seed: suite.suite_seed,
        tasks: suite
            .tasks
            .iter()
            .map(|t| SuiteTaskHeader {
                task_id: t.task_id.clone(),
                class_count: t.class_count,
            })
            .collect(),
    };
    let mut buf = Vec::new();
    write_framed(&mut buf, SUITE_MAGIC, &header)?;
    for task in &suite.tasks {
        // Clones carry fresh counters, so serialization is not a read.
        let copy = task.clone();
        write_split(&mut buf, copy.train());
        write_split(&mut buf, copy.val());
        write_split(&mut buf, copy.test());
    }
    Ok(buf)
}

pub fn save_suite(suite: &TaskSuite<f64>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &suite_bytes(suite)?)
}

pub fn load_suite(path: impl AsRef<Path>) -> Result<TaskSuite<f64>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let header: SuiteHeader = r.framed(SUITE_MAGIC)?;
    let mut tasks = Vec::with_capacity(header.tasks.len());
    for t in header.tasks {
        let train = read_split(&mut r, header.feature_dim, "train split")?;
        let val = read_split(&mut r, header.feature_dim, "val split")?;
        let test = read_split(&mut r, header.feature_dim, "test split")?;
        tasks.push(TaskData::new(t.task_id, t.class_count, train, val, test).map_err(|e| r.corrupt(e.to_string()))?);
    }
    r.finish()?;
    let suite = TaskSuite::new(tasks, header.suite_seed).map_err(|e| r.corrupt(e.to_string()))?;
    if suite.feature_dim != header.feature_dim || suite.class_count != header.class_count {
        return Err(r.corrupt("suite header disagrees with task data"));
    }
    Ok(suite)
}
