//! Evaluation reports: one JSON object per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{Direction, RecallEntry};
use crate::vcr::VcrAccuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRecord {
    pub direction: Direction,
    #[serde(rename = "K")]
    pub k: usize,
    pub recall: f64,
    pub num_queries: usize,
    pub num_candidates: usize,
    pub checkpoint_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub metric: String,
    pub accuracy: f64,
    pub count: usize,
    pub checkpoint_id: String,
    pub seed: u64,
}

pub fn recall_records(entries: &[RecallEntry], checkpoint_id: &str, seed: u64) -> Vec<RecallRecord> {
    entries
        .iter()
        .map(|e| RecallRecord {
            direction: e.direction,
            k: e.k,
            recall: e.recall,
            num_queries: e.num_queries,
            num_candidates: e.num_candidates,
            checkpoint_id: checkpoint_id.to_string(),
            seed,
        })
        .collect()
}

pub fn accuracy_records(acc: &VcrAccuracy, checkpoint_id: &str, seed: u64) -> Vec<AccuracyRecord> {
    [("q_a", acc.q_a), ("qa_r", acc.qa_r), ("q_ar", acc.q_ar)]
        .into_iter()
        .map(|(metric, accuracy)| AccuracyRecord { metric: metric.into(), accuracy, count: acc.count, checkpoint_id: checkpoint_id.into(), seed })
        .collect()
}

pub fn to_json_lines<T: Serialize>(records: &[T]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

pub fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_json_lines(records).as_bytes()).map_err(|e| Error::io(path, e))
}
