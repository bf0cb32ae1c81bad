//! SQLite persistence for batches, tasks, corrections and retraining runs.

use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use eld_core::dataset::Sample;
use eld_core::geometry::Point2;
use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};

use crate::clock::format_ts;
use crate::error::{AnnotateError, Result};

const SCHEMA_SQL: &str = "
CREATE TABLE IF NOT EXISTS batches (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    manifest_path TEXT NOT NULL,
    schema TEXT NOT NULL,
    checkpoint_run TEXT,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS tasks (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    batch_id INTEGER NOT NULL REFERENCES batches(id),
    image_path TEXT NOT NULL,
    sample TEXT NOT NULL,
    prefill TEXT NOT NULL,
    prefill_warning TEXT,
    state TEXT NOT NULL CHECK (state IN ('pending', 'claimed', 'done')),
    owner TEXT,
    lease_until TEXT
);
CREATE INDEX IF NOT EXISTS tasks_batch ON tasks(batch_id);
CREATE TABLE IF NOT EXISTS corrections (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    task_id INTEGER NOT NULL REFERENCES tasks(id),
    version INTEGER NOT NULL,
    annotator TEXT NOT NULL,
    landmarks TEXT NOT NULL,
    shifted TEXT NOT NULL,
    started_at TEXT NOT NULL,
    finished_at TEXT NOT NULL,
    submitted_at TEXT NOT NULL,
    UNIQUE (task_id, version)
);
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    pool TEXT NOT NULL,
    snapshot_hash TEXT NOT NULL,
    n_samples INTEGER NOT NULL,
    out_dir TEXT NOT NULL,
    status TEXT NOT NULL,
    error TEXT,
    created_at TEXT NOT NULL,
    finished_at TEXT
);
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Pending,
    Claimed,
    Done,
}

impl TaskState {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pending => "pending",
            Self::Claimed => "claimed",
            Self::Done => "done",
        }
    }

    fn parse(s: &str) -> rusqlite::Result<Self> {
        match s {
            "pending" => Ok(Self::Pending),
            "claimed" => Ok(Self::Claimed),
            "done" => Ok(Self::Done),
            other => Err(rusqlite::Error::InvalidColumnType(
                0,
                format!("task state {other:?}"),
                rusqlite::types::Type::Text,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub id: i64,
    pub manifest_path: String,
    pub schema: String,
    pub checkpoint_run: Option<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub id: i64,
    pub batch_id: i64,
    pub image_path: String,
    /// Manifest record; image path absolute.
    pub sample: Sample,
    pub prefill: Vec<Point2>,
    pub prefill_warning: Option<String>,
    pub state: TaskState,
    pub owner: Option<String>,
    pub lease_until: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub task_id: i64,
    pub version: i64,
    pub annotator: String,
    pub landmarks: Vec<Point2>,
    pub shifted: Vec<bool>,
    pub started_at: String,
    pub finished_at: String,
    pub submitted_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: i64,
    pub pool: Vec<i64>,
    pub snapshot_hash: String,
    pub n_samples: usize,
    pub out_dir: String,
    pub status: String,
    pub error: Option<String>,
    pub created_at: String,
    pub finished_at: Option<String>,
}

/// New task content for [`Store::insert_batch`].
#[derive(Debug, Clone)]
pub struct NewTask {
    pub image_path: String,
    pub sample: Sample,
    pub prefill: Vec<Point2>,
    pub prefill_warning: Option<String>,
}

/// What [`Store::submit`] needs besides the task id.
#[derive(Debug, Clone)]
pub struct NewCorrection<'a> {
    pub annotator: &'a str,
    pub landmarks: &'a [Point2],
    pub started_at: &'a str,
    pub finished_at: &'a str,
}

pub struct Store {
    conn: Mutex<Connection>,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn from_json<T: for<'de> Deserialize<'de>>(row: &Row<'_>, idx: usize) -> rusqlite::Result<T> {
    let text: String = row.get(idx)?;
    serde_json::from_str(&text)
        .map_err(|e| rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e)))
}

const TASK_COLUMNS: &str = "id, batch_id, image_path, sample, prefill, prefill_warning, state, owner, lease_until";

fn task_from_row(row: &Row<'_>) -> rusqlite::Result<TaskRecord> {
    Ok(TaskRecord {
        id: row.get(0)?,
        batch_id: row.get(1)?,
        image_path: row.get(2)?,
        sample: from_json(row, 3)?,
        prefill: from_json(row, 4)?,
        prefill_warning: row.get(5)?,
        state: TaskState::parse(&row.get::<_, String>(6)?)?,
        owner: row.get(7)?,
        lease_until: row.get(8)?,
    })
}

const CORRECTION_COLUMNS: &str =
    "task_id, version, annotator, landmarks, shifted, started_at, finished_at, submitted_at";

fn correction_from_row(row: &Row<'_>) -> rusqlite::Result<CorrectionRecord> {
    Ok(CorrectionRecord {
        task_id: row.get(0)?,
        version: row.get(1)?,
        annotator: row.get(2)?,
        landmarks: from_json(row, 3)?,
        shifted: from_json(row, 4)?,
        started_at: row.get(5)?,
        finished_at: row.get(6)?,
        submitted_at: row.get(7)?,
    })
}

fn run_from_row(row: &Row<'_>) -> rusqlite::Result<RunRecord> {
    Ok(RunRecord {
        run_id: row.get(0)?,
        pool: from_json(row, 1)?,
        snapshot_hash: row.get(2)?,
        n_samples: row.get::<_, i64>(3)? as usize,
        out_dir: row.get(4)?,
        status: row.get(5)?,
        error: row.get(6)?,
        created_at: row.get(7)?,
        finished_at: row.get(8)?,
    })
}

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        Self::init(Connection::open(path)?)
    }

    pub fn in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.execute_batch("PRAGMA foreign_keys = ON; PRAGMA journal_mode = WAL;")?;
        conn.execute_batch(SCHEMA_SQL)?;
        Ok(Self { conn: Mutex::new(conn) })
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn insert_batch(
        &self,
        manifest_path: &str,
        schema: &str,
        checkpoint_run: Option<&str>,
        tasks: &[NewTask],
        now: DateTime<Utc>,
    ) -> Result<i64> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        tx.execute(
            "INSERT INTO batches (manifest_path, schema, checkpoint_run, created_at) VALUES (?1, ?2, ?3, ?4)",
            params![manifest_path, schema, checkpoint_run, format_ts(now)],
        )?;
        let batch_id = tx.last_insert_rowid();
        {
            let mut stmt = tx.prepare(
                "INSERT INTO tasks (batch_id, image_path, sample, prefill, prefill_warning, state)
                 VALUES (?1, ?2, ?3, ?4, ?5, 'pending')",
            )?;
            for t in tasks {
                stmt.execute(params![
                    batch_id,
                    t.image_path,
                    json(&t.sample),
                    json(&t.prefill),
                    t.prefill_warning
                ])?;
            }
        }
        tx.commit()?;
        Ok(batch_id)
    }

    pub fn batch(&self, id: i64) -> Result<BatchRecord> {
        self.conn()
            .query_row(
                "SELECT id, manifest_path, schema, checkpoint_run, created_at FROM batches WHERE id = ?1",
                [id],
                |r| {
                    Ok(BatchRecord {
                        id: r.get(0)?,
                        manifest_path: r.get(1)?,
                        schema: r.get(2)?,
                        checkpoint_run: r.get(3)?,
                        created_at: r.get(4)?,
                    })
                },
            )
            .optional()?
            .ok_or_else(|| AnnotateError::NotFound(format!("batch {id} not found")))
    }

    pub fn task(&self, id: i64) -> Result<TaskRecord> {
        self.conn()
            .query_row(&format!("SELECT {TASK_COLUMNS} FROM tasks WHERE id = ?1"), [id], task_from_row)
            .optional()?
            .ok_or_else(|| AnnotateError::NotFound(format!("task {id} not found")))
    }

    pub fn batch_tasks(&self, batch_id: i64) -> Result<Vec<TaskRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!("SELECT {TASK_COLUMNS} FROM tasks WHERE batch_id = ?1 ORDER BY id"))?;
        let rows = stmt.query_map([batch_id], task_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Claims the oldest task that is pending or whose lease ran out.
    pub fn claim_next(&self, annotator: &str, now: DateTime<Utc>, lease_until: DateTime<Utc>) -> Result<Option<TaskRecord>> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let now_s = format_ts(now);
        let id: Option<i64> = tx
            .query_row(
                "SELECT id FROM tasks
                 WHERE state = 'pending' OR (state = 'claimed' AND lease_until <= ?1)
                 ORDER BY id LIMIT 1",
                [&now_s],
                |r| r.get(0),
            )
            .optional()?;
        let Some(id) = id else {
            return Ok(None);
        };
        tx.execute(
            "UPDATE tasks SET state = 'claimed', owner = ?1, lease_until = ?2 WHERE id = ?3",
            params![annotator, format_ts(lease_until), id],
        )?;
        let task = tx.query_row(&format!("SELECT {TASK_COLUMNS} FROM tasks WHERE id = ?1"), [id], task_from_row)?;
        tx.commit()?;
        Ok(Some(task))
    }

    /// Stores a new correction version and marks the task done. The task
    /// must be claimed by, or already completed by, `c.annotator`.
    pub fn submit(
        &self,
        task_id: i64,
        c: &NewCorrection<'_>,
        shifted: impl FnOnce(&TaskRecord) -> Vec<bool>,
        now: DateTime<Utc>,
    ) -> Result<CorrectionRecord> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let task = tx
            .query_row(&format!("SELECT {TASK_COLUMNS} FROM tasks WHERE id = ?1"), [task_id], task_from_row)
            .optional()?
            .ok_or_else(|| AnnotateError::NotFound(format!("task {task_id} not found")))?;
        match (task.state, task.owner.as_deref()) {
            (TaskState::Pending, _) => {
                return Err(AnnotateError::Conflict(format!("task {task_id} is not claimed")));
            }
            (_, Some(owner)) if owner != c.annotator => {
                return Err(AnnotateError::Conflict(format!(
                    "task {task_id} is held by {owner:?}, not {:?}",
                    c.annotator
                )));
            }
            _ => {}
        }
        let flags = shifted(&task);
        let version: i64 = tx.query_row(
            "SELECT COALESCE(MAX(version), 0) + 1 FROM corrections WHERE task_id = ?1",
            [task_id],
            |r| r.get(0),
        )?;
        let record = CorrectionRecord {
            task_id,
            version,
            annotator: c.annotator.to_string(),
            landmarks: c.landmarks.to_vec(),
            shifted: flags,
            started_at: c.started_at.to_string(),
            finished_at: c.finished_at.to_string(),
            submitted_at: format_ts(now),
        };
        tx.execute(
            &format!("INSERT INTO corrections ({CORRECTION_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)"),
            params![
                record.task_id,
                record.version,
                record.annotator,
                json(&record.landmarks),
                json(&record.shifted),
                record.started_at,
                record.finished_at,
                record.submitted_at
            ],
        )?;
        tx.execute(
            "UPDATE tasks SET state = 'done', lease_until = NULL WHERE id = ?1",
            [task_id],
        )?;
        tx.commit()?;
        Ok(record)
    }

    /// All versions, oldest first.
    pub fn corrections(&self, task_id: i64) -> Result<Vec<CorrectionRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {CORRECTION_COLUMNS} FROM corrections WHERE task_id = ?1 ORDER BY version"
        ))?;
        let rows = stmt.query_map([task_id], correction_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Done tasks of the given batches with their latest correction, by task id.
    pub fn latest_corrections(&self, batch_ids: &[i64]) -> Result<Vec<(TaskRecord, CorrectionRecord)>> {
        let conn = self.conn();
        let mut out = Vec::new();
        let mut tasks = conn.prepare(&format!(
            "SELECT {TASK_COLUMNS} FROM tasks WHERE batch_id = ?1 AND state = 'done' ORDER BY id"
        ))?;
        let mut latest = conn.prepare(&format!(
            "SELECT {CORRECTION_COLUMNS} FROM corrections WHERE task_id = ?1 ORDER BY version DESC LIMIT 1"
        ))?;
        for &b in batch_ids {
            let rows: Vec<TaskRecord> = tasks.query_map([b], task_from_row)?.collect::<rusqlite::Result<_>>()?;
            for t in rows {
                let c = latest.query_row([t.id], correction_from_row)?;
                out.push((t, c));
            }
        }
        out.sort_by_key(|(t, _)| t.id);
        Ok(out)
    }

    pub fn insert_run(&self, pool: &[i64], snapshot_hash: &str, n_samples: usize, now: DateTime<Utc>) -> Result<i64> {
        let conn = self.conn();
        conn.execute(
            "INSERT INTO runs (pool, snapshot_hash, n_samples, out_dir, status, created_at)
             VALUES (?1, ?2, ?3, '', 'running', ?4)",
            params![json(&pool), snapshot_hash, n_samples as i64, format_ts(now)],
        )?;
        Ok(conn.last_insert_rowid())
    }

    pub fn set_run_dir(&self, id: i64, out_dir: &str) -> Result<()> {
        self.conn()
            .execute("UPDATE runs SET out_dir = ?1 WHERE id = ?2", params![out_dir, id])?;
        Ok(())
    }

    pub fn finish_run(&self, id: i64, error: Option<&str>, now: DateTime<Utc>) -> Result<()> {
        let status = if error.is_some() { "failed" } else { "done" };
        self.conn().execute(
            "UPDATE runs SET status = ?1, error = ?2, finished_at = ?3 WHERE id = ?4",
            params![status, error, format_ts(now), id],
        )?;
        Ok(())
    }

    pub fn run(&self, id: i64) -> Result<RunRecord> {
        self.conn()
            .query_row(
                "SELECT id, pool, snapshot_hash, n_samples, out_dir, status, error, created_at, finished_at
                 FROM runs WHERE id = ?1",
                [id],
                run_from_row,
            )
            .optional()?
            .ok_or_else(|| AnnotateError::NotFound(format!("run {id} not found")))
    }
}
