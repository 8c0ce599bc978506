use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use tempfile::TempDir;
use vlenc::data::records::{DatasetKind, Manifest, SCORE_THRESHOLD};
use vlenc::data::{generate_synthetic, load_dataset, load_vcr, select_regions, write_pairs, LoadOptions, PairRecord, SynthConfig};
use vlenc::harness::commands::run_gen_synthetic;
use vlenc::numerics::{AdamConfig, Graph, ParameterStore, Tensor};
use vlenc::Error;

fn small_config() -> SynthConfig {
    SynthConfig { pairs: 6, heldout_pairs: 2, vcr_examples: 4, seed: 11, ..Default::default() }
}

/// Writes the small synthetic corpus; returns the directory and the train manifest.
fn written() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let manifests = generate_synthetic(&small_config()).unwrap().write(dir.path()).unwrap();
    let train = manifests.iter().find(|p| p.ends_with("train.manifest.json")).unwrap().clone();
    (dir, train)
}

fn records_path(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap().join(Manifest::load(manifest).unwrap().records)
}

/// Rewrites line `line` (1-based) of the record file through `f`.
fn edit_record(manifest: &Path, line: usize, f: impl Fn(&mut serde_json::Value)) {
    let path = records_path(manifest);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[line - 1]).unwrap();
    f(&mut v);
    lines[line - 1] = v.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
}

fn load_err(manifest: &Path) -> Error {
    load_dataset(manifest, &LoadOptions::default()).unwrap_err()
}

#[test]
fn written_corpus_loads_back() {
    let dir = TempDir::new().unwrap();
    let corpus = generate_synthetic(&small_config()).unwrap();
    let manifests = corpus.write(dir.path()).unwrap();
    assert_eq!(manifests.len(), 3);
    let ds = load_dataset(&manifests[0], &LoadOptions::default()).unwrap();
    assert_eq!(ds.records, corpus.records);
    assert_eq!(ds.vocab, corpus.vocab);
    let (m, vocab, vcr) = load_vcr(&manifests[2]).unwrap();
    assert_eq!(m.kind, DatasetKind::Vcr);
    assert_eq!(vocab, corpus.vocab);
    assert_eq!(vcr, corpus.vcr);
}

#[test]
fn gen_synthetic_reads_a_toml_description() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("corpus.toml");
    fs::write(&cfg, "pairs = 5\nseed = 3\nnum_concepts = 6\nregions_max = 3\n").unwrap();
    let manifests = run_gen_synthetic(&cfg, &dir.path().join("out")).unwrap();
    assert_eq!(manifests.len(), 1);
    let ds = load_dataset(&manifests[0], &LoadOptions::default()).unwrap();
    assert_eq!(ds.records.len(), 5);
    assert_eq!(ds.manifest.num_classes, 6);

    fs::write(&cfg, "pairs = 5\nbogus = 1\n").unwrap();
    assert!(matches!(run_gen_synthetic(&cfg, dir.path()), Err(Error::Config(_))));
}

#[test]
fn malformed_json_reports_its_line() {
    let (_dir, manifest) = written();
    let path = records_path(&manifest);
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(str::to_string).collect();
    lines[2] = "{\"pair_id\": ".into();
    fs::write(&path, lines.join("\n")).unwrap();
    match load_err(&manifest) {
        Error::Parse { line, .. } => assert_eq!(line, 3),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn wrong_feature_width_is_a_schema_error() {
    let (_dir, manifest) = written();
    edit_record(&manifest, 2, |v| v["regions"][0]["feature"].as_array_mut().unwrap().push(0.5.into()));
    let e = load_err(&manifest);
    assert!(matches!(&e, Error::Schema(m) if m.contains(":2:") && m.contains("width")), "{e:?}");
}

#[test]
fn out_of_range_label_is_a_schema_error() {
    let (_dir, manifest) = written();
    let k = Manifest::load(&manifest).unwrap().num_classes;
    edit_record(&manifest, 1, |v| v["regions"][0]["label_id"] = k.into());
    assert!(matches!(load_err(&manifest), Error::Schema(m) if m.contains("label")));
}

#[test]
fn empty_caption_is_rejected() {
    let (_dir, manifest) = written();
    edit_record(&manifest, 4, |v| v["caption"] = "   ".into());
    assert!(matches!(load_err(&manifest), Error::Schema(m) if m.contains("empty caption")));
}

#[test]
fn box_outside_the_image_is_rejected() {
    let (_dir, manifest) = written();
    edit_record(&manifest, 1, |v| v["regions"][0]["box"][2] = 1e6.into());
    assert!(matches!(load_err(&manifest), Error::Schema(_)));
}

#[test]
fn record_count_must_match_the_manifest() {
    let (_dir, manifest) = written();
    let mut m = Manifest::load(&manifest).unwrap();
    m.record_count += 1;
    m.save(&manifest).unwrap();
    assert!(matches!(load_err(&manifest), Error::Schema(msg) if msg.contains("declares")));
}

#[test]
fn corpus_kind_is_checked() {
    let dir = TempDir::new().unwrap();
    let manifests = generate_synthetic(&small_config()).unwrap().write(dir.path()).unwrap();
    assert!(matches!(load_dataset(&manifests[2], &LoadOptions::default()), Err(Error::Schema(_))));
    assert!(matches!(load_vcr(&manifests[0]), Err(Error::Schema(_))));
}

#[test]
fn feature_refs_need_a_sidecar() {
    let dir = TempDir::new().unwrap();
    let corpus = generate_synthetic(&small_config()).unwrap();
    let (_d, manifest) = written();
    let mut m = Manifest::load(&manifest).unwrap();
    let records = dir.path().join("recs.jsonl");
    write_pairs(&records, &corpus.records, Some(&dir.path().join("feats.bin"))).unwrap();
    fs::copy(manifest.parent().unwrap().join("vocab.txt"), dir.path().join("vocab.txt")).unwrap();
    m.records = "recs.jsonl".into();
    m.features = Some("feats.bin".into());
    let path = dir.path().join("m.json");
    m.save(&path).unwrap();
    let ds = load_dataset(&path, &LoadOptions::default()).unwrap();
    assert_eq!(ds.records, corpus.records);

    m.features = None;
    m.save(&path).unwrap();
    assert!(matches!(load_err(&path), Error::Schema(msg) if msg.contains("feature_ref")));
}

#[test]
fn fraction_and_cap_are_applied_on_load() {
    let (_dir, manifest) = written();
    let all = load_dataset(&manifest, &LoadOptions::default()).unwrap().records;
    let none = load_dataset(&manifest, &LoadOptions { fraction: Some(0.0), ..Default::default() }).unwrap().records;
    assert!(none.is_empty());
    let capped = load_dataset(&manifest, &LoadOptions { region_cap: 1, fraction: None }).unwrap().records;
    assert_eq!(capped.len(), all.len());
    assert!(capped.iter().all(|r| r.regions.len() == 1));
}

proptest! {
    #[test]
    fn region_selection_rule(scores in prop::collection::vec(0.0..1.0f64, 0..20), cap in 0usize..12) {
        let keep = select_regions(&scores, cap);
        prop_assert_eq!(keep.len(), cap.min(scores.len()));
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        let eligible = scores.iter().filter(|&&s| s > SCORE_THRESHOLD).count();
        let min_kept = keep.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for (i, &s) in scores.iter().enumerate() {
            if !keep.contains(&i) {
                prop_assert!(s <= min_kept);
            }
        }
        if eligible >= cap {
            prop_assert!(keep.iter().all(|&i| scores[i] > SCORE_THRESHOLD));
        }
    }
}

fn region_rows(records: &[PairRecord]) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in records {
        for j in 0..r.regions.len() {
            x.extend(r.regions.features.row(j).iter().map(|&v| f64::from(v)));
            y.push(r.regions.label_ids[j]);
        }
    }
    (x, y)
}

#[test]
fn synthetic_regions_are_linearly_separable_by_concept() {
    let cfg = SynthConfig { pairs: 64, heldout_pairs: 32, ..Default::default() };
    let corpus = generate_synthetic(&cfg).unwrap();
    let (d, k) = (cfg.d_vis, cfg.num_concepts);
    let (xs, ys) = region_rows(&corpus.records);
    let (xt, yt) = region_rows(&corpus.heldout);

    let mut store = ParameterStore::<f64>::new();
    store.insert("probe.weight", Tensor::zeros(vec![d, k])).unwrap();
    store.insert("probe.bias", Tensor::zeros(vec![k])).unwrap();
    let adam = AdamConfig::with_lr(0.05);
    for _ in 0..200 {
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.constant(Tensor::new(vec![ys.len(), d], xs.clone()).unwrap());
            let logits = g.linear(x, "probe").unwrap();
            let loss = g.cross_entropy(logits, &ys).unwrap();
            g.backward(loss).unwrap()
        };
        store.adam_step(&grads, &adam).unwrap();
    }
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::new(vec![yt.len(), d], xt).unwrap());
    let logits = g.linear(x, "probe").unwrap();
    let out = g.value(logits);
    let correct = (0..yt.len()).filter(|&i| vlenc::vcr::argmax(out.row(i)) == yt[i]).count();
    let acc = correct as f64 / yt.len() as f64;
    assert!(acc >= 0.99, "held-out probe accuracy {acc} over {} regions", yt.len());
}
