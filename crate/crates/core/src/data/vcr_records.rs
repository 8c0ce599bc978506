//! Multiple-choice reasoning records: one JSON object per line.
//!
//! Besides the question, choices, labels, ground-truth boxes and references,
//! each record carries the image's extracted regions in the pair-record layout
//! (`image_size`, `regions`).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::records::{regions_from_json, regions_to_json, resolve, DatasetKind, Manifest, RegionJson};
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::vcr::{GtBox, ObjectReference, VcrExample, NUM_CHOICES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VcrRecordJson {
    example_id: String,
    question_tokens: Vec<String>,
    answers: [Vec<String>; NUM_CHOICES],
    rationales: [Vec<String>; NUM_CHOICES],
    answer_label: usize,
    rationale_label: usize,
    gt_boxes: Vec<GtBox>,
    references: Vec<ObjectReference>,
    image_size: [f64; 2],
    regions: Vec<RegionJson>,
}

pub fn write_vcr(path: &Path, examples: &[VcrExample<f32>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let (image_size, regions) = regions_to_json(&ex.regions);
        let rec = VcrRecordJson {
            example_id: ex.example_id.clone(),
            question_tokens: ex.question.clone(),
            answers: ex.answers.clone(),
            rationales: ex.rationales.clone(),
            answer_label: ex.answer_label,
            rationale_label: ex.rationale_label,
            gt_boxes: ex.gt_boxes.clone(),
            references: ex.references.clone(),
            image_size,
            regions,
        };
        serde_json::to_writer(&mut w, &rec).expect("record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_vcr_records(path: &Path, manifest: &Manifest) -> Result<Vec<VcrExample<f32>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VcrRecordJson = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.display().to_string(), line: i + 1, msg: e.to_string() })?;
        let regions = regions_from_json(&rec.regions, rec.image_size, manifest.d_vis, manifest.num_classes, None, path, i + 1)?;
        let ex = VcrExample {
            example_id: rec.example_id,
            question: rec.question_tokens,
            answers: rec.answers,
            rationales: rec.rationales,
            answer_label: rec.answer_label,
            rationale_label: rec.rationale_label,
            gt_boxes: rec.gt_boxes,
            references: rec.references,
            regions,
        };
        ex.validate().map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    if out.len() != manifest.record_count {
        return Err(Error::Schema(format!("{}: manifest declares {} records, file has {}", path.display(), manifest.record_count, out.len())));
    }
    Ok(out)
}

/// Loads a reasoning corpus from its manifest.
pub fn load_vcr(manifest_path: &Path) -> Result<(Manifest, Vocabulary, Vec<VcrExample<f32>>)> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.kind != DatasetKind::Vcr {
        return Err(Error::Schema(format!("{} is not a reasoning corpus", manifest_path.display())));
    }
    let vocab = Vocabulary::load(&resolve(manifest_path, &manifest.vocabulary))?;
    let examples = load_vcr_records(&resolve(manifest_path, &manifest.records), &manifest)?;
    Ok((manifest, vocab, examples))
}
