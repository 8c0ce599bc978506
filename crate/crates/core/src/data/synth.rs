//! Concept-grounded synthetic corpus.
//!
//! Every region carries a latent concept: its feature is that concept's fixed
//! random prototype plus small noise and its detector label is the concept id.
//! Captions name the concepts of their image, so matching, masked prediction and
//! recombination of seen concepts are all learnable.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::records::{write_pairs, DatasetKind, Manifest, PairRecord};
use crate::data::vcr_records::write_vcr;
use crate::embeddings::{vocab, BBox, ImageSize, RegionSet, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vcr::{GtBox, ObjectReference, Segment, VcrExample, NUM_CHOICES};

const OBJECTS: &str = "{objects}";

/// Words used by captions, questions, answers and rationales.
const FUNCTION_WORDS: [&str; 16] = [
    "a", "and", "photo", "of", "there", "is", "in", "the", "scene", "what", "this", "object", "it", "because", "looks", "like",
];

const CONCEPT_NAMES: [&str; 24] = [
    "dog", "cat", "car", "tree", "cup", "bird", "boat", "chair", "horse", "kite", "lamp", "ball", "book", "clock", "shoe", "train",
    "apple", "bench", "cake", "door", "fish", "hat", "bike", "sofa",
];

fn concept_name(c: usize) -> String {
    CONCEPT_NAMES.get(c).map_or_else(|| format!("concept{c}"), |s| s.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_concepts: usize,
    /// Total vocabulary size; unused slots are filled with filler words.
    pub vocab_size: usize,
    pub d_vis: usize,
    pub regions_min: usize,
    pub regions_max: usize,
    /// Training pairs.
    pub pairs: usize,
    /// Extra pairs whose concept sets never occur in training.
    pub heldout_pairs: usize,
    pub captions_per_image: usize,
    pub vcr_examples: usize,
    pub seed: u64,
    /// Caption templates; `{objects}` is replaced by the listed concepts.
    pub templates: Vec<String>,
    pub noise_std: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_concepts: 8,
            vocab_size: 64,
            d_vis: 16,
            regions_min: 2,
            regions_max: 5,
            pairs: 32,
            heldout_pairs: 0,
            captions_per_image: 1,
            vcr_examples: 0,
            seed: 0,
            templates: vec![OBJECTS.into(), format!("a photo of {OBJECTS}"), format!("there is {OBJECTS}"), format!("{OBJECTS} in the scene")],
            noise_std: 0.1,
            image_width: 64.0,
            image_height: 64.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_concepts < 2 || self.num_concepts > self.vocab_size.saturating_sub(vocab::RESERVED.len()) {
            return bad(format!("num_concepts {} must be in [2, vocab_size - reserved]", self.num_concepts));
        }
        if self.regions_min == 0 || self.regions_min > self.regions_max || self.regions_max > self.num_concepts {
            return bad(format!("regions per image [{}, {}] must satisfy 1 <= min <= max <= num_concepts", self.regions_min, self.regions_max));
        }
        if self.pairs == 0 || self.captions_per_image == 0 || self.d_vis == 0 {
            return bad("pairs, captions_per_image and d_vis must be positive".into());
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !t.contains(OBJECTS)) {
            return bad(format!("every caption template must contain {OBJECTS}"));
        }
        if !(self.noise_std >= 0.0) || self.image_width < 8.0 || self.image_height < 8.0 {
            return bad("noise_std must be non-negative and images at least 8x8".into());
        }
        Ok(())
    }

    /// Vocabulary words beyond the reserved tokens, without fillers.
    fn content_words(&self) -> Vec<String> {
        let mut words: Vec<String> = vec![vocab::SEMICOLON.to_string()];
        words.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));
        for t in &self.templates {
            words.extend(crate::embeddings::tokenize::split_words(&t.replace(OBJECTS, " ")));
        }
        words.extend((0..self.num_concepts).map(concept_name));
        let mut seen = BTreeSet::new();
        words.retain(|w| seen.insert(w.clone()));
        words
    }
}

/// Generated corpus with its latent structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub concept_names: Vec<String>,
    /// `[num_concepts, d_vis]`.
    pub prototypes: Tensor<f32>,
    pub records: Vec<PairRecord>,
    pub heldout: Vec<PairRecord>,
    pub vcr: Vec<VcrExample<f32>>,
    /// Concept of every region, per image, in region order.
    pub image_concepts: Vec<Vec<usize>>,
}

fn random_box(rng: &mut impl Rng, w: f64, h: f64) -> BBox {
    let bw = rng.random_range(w / 8.0..w / 2.0);
    let bh = rng.random_range(h / 8.0..h / 2.0);
    let x1 = rng.random_range(0.0..w - bw);
    let y1 = rng.random_range(0.0..h - bh);
    BBox::new(x1, y1, x1 + bw, y1 + bh)
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    prototypes: Tensor<f32>,
    noise: Normal<f64>,
}

impl Generator<'_> {
    fn regions(&mut self, concepts: &[usize]) -> Result<RegionSet<f32>> {
        let d = self.cfg.d_vis;
        let mut feats = Vec::with_capacity(concepts.len() * d);
        for &c in concepts {
            for k in 0..d {
                feats.push(self.prototypes.at(c, k) + self.noise.sample(&mut self.rng) as f32);
            }
        }
        let (w, h) = (self.cfg.image_width, self.cfg.image_height);
        let boxes = concepts.iter().map(|_| random_box(&mut self.rng, w, h)).collect();
        let scores = concepts.iter().map(|_| self.rng.random_range(0.3..1.0)).collect();
        RegionSet::new(Tensor::new(vec![concepts.len(), d], feats)?, boxes, concepts.to_vec(), scores, ImageSize { width: w, height: h })
    }

    fn caption(&mut self, concepts: &[usize]) -> String {
        let mut order = concepts.to_vec();
        order.shuffle(&mut self.rng);
        let objects = order.iter().map(|&c| format!("a {}", concept_name(c))).collect::<Vec<_>>().join(" and ");
        let template = self.cfg.templates.choose(&mut self.rng).expect("templates validated non-empty");
        template.replace(OBJECTS, &objects)
    }

    /// Distinct concepts in random order, as a set never produced before.
    fn fresh_concepts(&mut self, used: &mut BTreeSet<Vec<usize>>) -> Result<Vec<usize>> {
        for _ in 0..10_000 {
            let k = self.rng.random_range(self.cfg.regions_min..=self.cfg.regions_max);
            let all: Vec<usize> = (0..self.cfg.num_concepts).collect();
            let mut picked: Vec<usize> = all.choose_multiple(&mut self.rng, k).copied().collect();
            let mut key = picked.clone();
            key.sort_unstable();
            if used.insert(key) {
                picked.shuffle(&mut self.rng);
                return Ok(picked);
            }
        }
        Err(Error::Config(format!(
            "could not find enough distinct concept sets ({} concepts, {}-{} regions)",
            self.cfg.num_concepts, self.cfg.regions_min, self.cfg.regions_max
        )))
    }

    fn vcr_example(&mut self, index: usize, answer_label: usize, rationale_label: usize) -> Result<VcrExample<f32>> {
        let n = self.cfg.num_concepts;
        let k = self.rng.random_range(self.cfg.regions_min..=self.cfg.regions_max).min(n - 1).max(1);
        let all: Vec<usize> = (0..n).collect();
        let concepts: Vec<usize> = all.choose_multiple(&mut self.rng, k).copied().collect();
        let regions = self.regions(&concepts)?;
        let target = self.rng.random_range(0..k);
        let truth = concepts[target];

        let jitter = |rng: &mut ChaCha8Rng, b: &BBox, size: ImageSize| {
            let d = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
            let x1 = (b.x1 + d(rng)).clamp(0.0, size.width - 1.0);
            let y1 = (b.y1 + d(rng)).clamp(0.0, size.height - 1.0);
            let x2 = (b.x2 + d(rng)).clamp(x1 + 1.0, size.width);
            let y2 = (b.y2 + d(rng)).clamp(y1 + 1.0, size.height);
            [x1, y1, x2, y2]
        };
        let gt_boxes = vec![GtBox { bbox: jitter(&mut self.rng, &regions.boxes[target], regions.image_size), object_index: 0 }];

        let absent: Vec<usize> = (0..n).filter(|c| !concepts.contains(c)).collect();
        let distract = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let pool = if absent.len() >= NUM_CHOICES - 1 { &absent } else { &all };
            let pool: Vec<usize> = pool.iter().copied().filter(|&c| c != truth).collect();
            pool.choose_multiple(rng, NUM_CHOICES - 1).copied().collect()
        };
        let words = |s: String| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let build = |rng: &mut ChaCha8Rng, label: usize, phrase: &dyn Fn(usize) -> String| -> [Vec<String>; NUM_CHOICES] {
            let mut others = distract(rng).into_iter();
            std::array::from_fn(|i| words(phrase(if i == label { truth } else { others.next().unwrap_or(truth) })))
        };
        let answers = build(&mut self.rng, answer_label, &|c| format!("it is a {}", concept_name(c)));
        let rationales = build(&mut self.rng, rationale_label, &|c| format!("because it looks like a {}", concept_name(c)));
        Ok(VcrExample {
            example_id: format!("vcr{index:05}"),
            question: words("what is this object".into()),
            answers,
            rationales,
            answer_label,
            rationale_label,
            gt_boxes,
            references: vec![ObjectReference { segment: Segment::Question, token_pos: 3, object_index: 0 }],
            regions,
        })
    }
}

/// Builds the corpus deterministically from `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut words = cfg.content_words();
    let reserved = vocab::RESERVED.len();
    if reserved + words.len() > cfg.vocab_size {
        return Err(Error::Config(format!("vocab_size {} below the {} tokens the corpus needs", cfg.vocab_size, reserved + words.len())));
    }
    words.extend((0..cfg.vocab_size - reserved - words.len()).map(|i| format!("filler{i}")));
    let vocab = Vocabulary::from_words(&words);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos: Vec<f32> = (0..cfg.num_concepts * cfg.d_vis).map(|_| StandardNormal.sample(&mut rng)).collect();
    let prototypes = Tensor::new(vec![cfg.num_concepts, cfg.d_vis], protos)?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut gen = Generator { cfg, rng, prototypes, noise };

    let mut used = BTreeSet::new();
    let mut image_concepts = Vec::new();
    let mut make_split = |gen: &mut Generator, count: usize, prefix: &str, image_concepts: &mut Vec<Vec<usize>>| -> Result<Vec<PairRecord>> {
        let mut out = Vec::with_capacity(count);
        let mut image = 0;
        while out.len() < count {
            let concepts = gen.fresh_concepts(&mut used)?;
            let regions = gen.regions(&concepts)?;
            for _ in 0..cfg.captions_per_image.min(count - out.len()) {
                out.push(PairRecord {
                    pair_id: format!("{prefix}pair{:05}", out.len()),
                    image_id: format!("{prefix}img{image:05}"),
                    caption: gen.caption(&concepts),
                    regions: regions.clone(),
                });
            }
            image_concepts.push(concepts);
            image += 1;
        }
        Ok(out)
    };
    let records = make_split(&mut gen, cfg.pairs, "", &mut image_concepts)?;
    let heldout = make_split(&mut gen, cfg.heldout_pairs, "heldout-", &mut image_concepts)?;
    // Each choice slot is correct equally often.
    let balanced = |rng: &mut ChaCha8Rng| {
        let mut v: Vec<usize> = (0..cfg.vcr_examples).map(|i| i % NUM_CHOICES).collect();
        v.shuffle(rng);
        v
    };
    let answer_labels = balanced(&mut gen.rng);
    let rationale_labels = balanced(&mut gen.rng);
    let vcr = (0..cfg.vcr_examples).map(|i| gen.vcr_example(i, answer_labels[i], rationale_labels[i])).collect::<Result<_>>()?;
    Ok(SynthCorpus {
        config: cfg.clone(),
        vocab,
        concept_names: (0..cfg.num_concepts).map(concept_name).collect(),
        prototypes: gen.prototypes,
        records,
        heldout,
        vcr,
        image_concepts,
    })
}

impl SynthCorpus {
    fn manifest(&self, corpus: &str, kind: DatasetKind, records: &str, count: usize) -> Manifest {
        Manifest {
            corpus: corpus.into(),
            kind,
            d_vis: self.config.d_vis,
            num_classes: self.config.num_concepts,
            vocabulary: PathBuf::from("vocab.txt"),
            records: PathBuf::from(records),
            features: None,
            record_count: count,
        }
    }

    /// Writes `vocab.txt` and a manifest plus record file per non-empty split;
    /// returns the manifest paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let mut out = Vec::new();
        for (name, recs) in [("train", &self.records), ("heldout", &self.heldout)] {
            if recs.is_empty() {
                continue;
            }
            let file = format!("{name}.jsonl");
            write_pairs(&dir.join(&file), recs, None)?;
            let path = dir.join(format!("{name}.manifest.json"));
            self.manifest(&format!("synthetic-{name}"), DatasetKind::Pairs, &file, recs.len()).save(&path)?;
            out.push(path);
        }
        if !self.vcr.is_empty() {
            write_vcr(&dir.join("vcr.jsonl"), &self.vcr)?;
            let path = dir.join("vcr.manifest.json");
            self.manifest("synthetic-vcr", DatasetKind::Vcr, "vcr.jsonl", self.vcr.len()).save(&path)?;
            out.push(path);
        }
        Ok(out)
    }
}
