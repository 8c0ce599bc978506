//! Pair-record files: one JSON object per line, with a JSON manifest.
//!
//! Region features are either inline (`feature`) or stored in a sidecar file of
//! little-endian `f32` values addressed by `feature_ref: {offset, count}`
//! (offset counted in floats).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embeddings::{tokenize, BBox, ImageSize, RegionSet, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, hash_str};
use crate::scalar::Scalar;

/// Detector confidence above which a region is eligible.
pub const SCORE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_REGION_CAP: usize = 8;
/// Region count used at full scale.
pub const FULL_SCALE_REGION_CAP: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Pairs,
    Vcr,
}

/// Corpus-level declaration stored next to the record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub corpus: String,
    pub kind: DatasetKind,
    pub d_vis: usize,
    /// Number of detector classes (K).
    pub num_classes: usize,
    /// Paths are relative to the manifest's directory.
    pub vocabulary: PathBuf,
    pub records: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    pub record_count: usize,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), line: e.line(), msg: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Resolves a manifest-relative path.
pub fn resolve(manifest_path: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub offset: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionJson {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label_id: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_ref: Option<FeatureRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecordJson {
    pair_id: String,
    image_id: String,
    caption: String,
    image_size: [f64; 2],
    regions: Vec<RegionJson>,
}

/// One image-caption pair with its precomputed regions.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub pair_id: String,
    pub image_id: String,
    pub caption: String,
    pub regions: RegionSet<f32>,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Maximum regions kept per image.
    pub region_cap: usize,
    /// Keep only pairs whose id hashes below this fraction of the hash space.
    pub fraction: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { region_cap: DEFAULT_REGION_CAP, fraction: None }
    }
}

/// Indices (ascending) of the regions kept under `cap`.
///
/// Regions scoring above [`SCORE_THRESHOLD`] are preferred; if at least `cap`
/// qualify, the `cap` best of them are kept, otherwise the `cap` best overall
/// regardless of threshold. Ties go to the lower index.
pub fn select_regions(scores: &[f64], cap: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let eligible: Vec<usize> = order.iter().copied().filter(|&i| scores[i] > SCORE_THRESHOLD).collect();
    let mut keep: Vec<usize> = if eligible.len() >= cap {
        eligible.into_iter().take(cap).collect()
    } else {
        order.into_iter().take(cap).collect()
    };
    keep.sort_unstable();
    keep
}

/// Deterministic subsampling by hash of `pair_id`.
pub fn in_fraction(pair_id: &str, fraction: f64) -> bool {
    (derive_seed(hash_str(pair_id), &[]) as f64 / u64::MAX as f64) < fraction
}

fn schema(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("{}:{line}: {msg}", path.display()))
}

fn read_sidecar(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Schema(format!("{}: length {} not a multiple of 4", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Decodes JSON regions into a validated set of width `d_vis`.
pub(crate) fn regions_from_json(
    regions: &[RegionJson],
    image_size: [f64; 2],
    d_vis: usize,
    num_classes: usize,
    sidecar: Option<&[f32]>,
    path: &Path,
    line: usize,
) -> Result<RegionSet<f32>> {
    if regions.is_empty() {
        return Err(schema(path, line, "record has no regions"));
    }
    let mut feats = Vec::with_capacity(regions.len() * d_vis);
    for (j, r) in regions.iter().enumerate() {
        let f: &[f32] = match (&r.feature, &r.feature_ref) {
            (Some(f), None) => f,
            (None, Some(fr)) => {
                let side = sidecar.ok_or_else(|| schema(path, line, "feature_ref without a features file"))?;
                let start = fr.offset as usize;
                side.get(start..start + fr.count)
                    .ok_or_else(|| schema(path, line, format!("feature_ref {fr:?} outside features file")))?
            }
            _ => return Err(schema(path, line, format!("region {j} needs exactly one of feature / feature_ref"))),
        };
        if f.len() != d_vis {
            return Err(schema(path, line, format!("region {j} feature width {} != d_vis {d_vis}", f.len())));
        }
        if r.label_id >= num_classes {
            return Err(schema(path, line, format!("region {j} label {} >= K {num_classes}", r.label_id)));
        }
        feats.extend_from_slice(f);
    }
    let size = ImageSize { width: image_size[0], height: image_size[1] };
    RegionSet::new(
        Tensor::new(vec![regions.len(), d_vis], feats)?,
        regions.iter().map(|r| BBox::from_array(r.bbox)).collect(),
        regions.iter().map(|r| r.label_id).collect(),
        regions.iter().map(|r| r.score).collect(),
        size,
    )
    .map_err(|e| schema(path, line, e))
}

pub(crate) fn regions_to_json(regions: &RegionSet<f32>) -> ([f64; 2], Vec<RegionJson>) {
    let size = [regions.image_size.width, regions.image_size.height];
    let out = (0..regions.len())
        .map(|j| RegionJson {
            bbox: regions.boxes[j].to_array(),
            label_id: regions.label_ids[j],
            score: regions.scores[j],
            feature: Some(regions.features.row(j).to_vec()),
            feature_ref: None,
        })
        .collect();
    (size, out)
}

/// Reads and validates every record of `records_path`, applying the region
/// selection rule and optional subsampling.
pub fn load_pairs(records_path: &Path, manifest: &Manifest, sidecar: Option<&Path>, opts: &LoadOptions) -> Result<Vec<PairRecord>> {
    let side = sidecar.map(read_sidecar).transpose()?;
    let file = fs::File::open(records_path).map_err(|e| Error::io(records_path, e))?;
    let mut out = Vec::new();
    let mut seen = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(records_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let rec: PairRecordJson = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: records_path.display().to_string(),
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.caption.trim().is_empty() {
            return Err(schema(records_path, line_no, "empty caption"));
        }
        if let Some(f) = opts.fraction {
            if !in_fraction(&rec.pair_id, f) {
                continue;
            }
        }
        let regions = regions_from_json(&rec.regions, rec.image_size, manifest.d_vis, manifest.num_classes, side.as_deref(), records_path, line_no)?;
        let keep = select_regions(&regions.scores, opts.region_cap);
        let regions = if keep.len() == regions.len() { regions } else { regions.select(&keep)? };
        out.push(PairRecord { pair_id: rec.pair_id, image_id: rec.image_id, caption: rec.caption, regions });
    }
    if seen != manifest.record_count {
        return Err(Error::Schema(format!(
            "{}: manifest declares {} records, file has {seen}",
            records_path.display(),
            manifest.record_count
        )));
    }
    Ok(out)
}

/// Loaded corpus: manifest, vocabulary and records.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub records: Vec<PairRecord>,
}

pub fn load_dataset(manifest_path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.kind != DatasetKind::Pairs {
        return Err(Error::Schema(format!("{} is not a pair corpus", manifest_path.display())));
    }
    let vocab = Vocabulary::load(&resolve(manifest_path, &manifest.vocabulary))?;
    let sidecar = manifest.features.as_ref().map(|p| resolve(manifest_path, p));
    let records = load_pairs(&resolve(manifest_path, &manifest.records), &manifest, sidecar.as_deref(), opts)?;
    Ok(Dataset { manifest, vocab, records })
}

/// Writes records one per line. With `sidecar`, features go to that file and
/// records carry `feature_ref`s.
pub fn write_pairs(records_path: &Path, records: &[PairRecord], sidecar: Option<&Path>) -> Result<()> {
    let file = fs::File::create(records_path).map_err(|e| Error::io(records_path, e))?;
    let mut w = BufWriter::new(file);
    let mut side = match sidecar {
        Some(p) => Some((p, BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?))),
        None => None,
    };
    let mut offset = 0u64;
    for rec in records {
        let (image_size, mut regions) = regions_to_json(&rec.regions);
        if let Some((p, sw)) = side.as_mut() {
            for r in regions.iter_mut() {
                let f = r.feature.take().expect("inline feature");
                for v in &f {
                    sw.write_all(&v.to_le_bytes()).map_err(|e| Error::io(*p, e))?;
                }
                r.feature_ref = Some(FeatureRef { offset, count: f.len() });
                offset += f.len() as u64;
            }
        }
        let json = PairRecordJson {
            pair_id: rec.pair_id.clone(),
            image_id: rec.image_id.clone(),
            caption: rec.caption.clone(),
            image_size,
            regions,
        };
        serde_json::to_writer(&mut w, &json).expect("record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(records_path, e))?;
    }
    w.flush().map_err(|e| Error::io(records_path, e))?;
    if let Some((p, mut sw)) = side {
        sw.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Tokenized pair ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PairExample<S> {
    pub pair_id: String,
    pub image_id: String,
    pub tokens: TokenSequence,
    pub regions: RegionSet<S>,
}

pub fn prepare_examples<S: Scalar>(records: &[PairRecord], vocab: &Vocabulary) -> Result<Vec<PairExample<S>>> {
    records
        .iter()
        .map(|r| {
            Ok(PairExample {
                pair_id: r.pair_id.clone(),
                image_id: r.image_id.clone(),
                tokens: tokenize(&r.caption, vocab)?,
                regions: r.regions.cast(),
            })
        })
        .collect()
}
