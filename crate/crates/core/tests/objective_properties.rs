use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlenc::embeddings::vocab::{self, RESERVED};
use vlenc::embeddings::{assemble, BBox, ImageSize, RegionSet, Role, TokenSequence};
use vlenc::harness::diagnostics::fixture;
use vlenc::numerics::{Graph, ParameterStore, Tensor};
use vlenc::pretraining::{vlm_loss_value, MaskPlan, MaskingConfig, RegionReplacement, TextMaskSplit};
use vlenc::retrieval::{evaluate_retrieval, hardest_triplet_loss, hardest_triplet_node, recall_at_k, ScoreMatrix, DEFAULT_KS};
use vlenc::vcr::{argmax, iou, match_boxes};
use vlenc::Error;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.1..50.0f64, 0.1..50.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn region_set(boxes: Vec<BBox>, scores: Vec<f64>) -> RegionSet<f64> {
    let n = boxes.len();
    let size = ImageSize { width: 100.0, height: 100.0 };
    RegionSet::new(Tensor::zeros(vec![n, 2]), boxes, vec![0; n], scores, size).unwrap()
}

proptest! {
    #[test]
    fn triplet_loss_is_a_hinge_on_the_hardest_negative(
        pos in -1.0..1.0f64,
        negs in prop::collection::vec(-1.0..1.0f64, 1..6),
        margin in 0.01..1.0f64,
    ) {
        let loss = hardest_triplet_loss(pos, &negs, margin).unwrap();
        let hardest = negs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, pos >= hardest + margin);
        prop_assert!((loss - (margin - pos + hardest).max(0.0)).abs() < 1e-15);

        let mut more = negs.clone();
        more.push(hardest - 0.5);
        prop_assert_eq!(hardest_triplet_loss(pos, &more, margin).unwrap(), loss);

        let store = ParameterStore::<f64>::new();
        let mut g = Graph::new(&store);
        let p = g.constant(Tensor::from_vec(vec![pos]).unwrap());
        let n: Vec<_> = negs.iter().map(|&v| g.constant(Tensor::from_vec(vec![v]).unwrap())).collect();
        let node = hardest_triplet_node(&mut g, p, &n, margin).unwrap();
        prop_assert!((g.scalar_value(node).unwrap() - loss).abs() < 1e-15);
    }

    #[test]
    fn recall_is_invariant_under_increasing_maps(
        (q, c, scores, truth) in (1usize..6, 1usize..8).prop_flat_map(|(q, c)| (
            Just(q),
            Just(c),
            prop::collection::vec(-3.0..3.0f64, q * c),
            prop::collection::vec(0..c, q),
        )),
        k in 1usize..10,
    ) {
        let truth: Vec<Vec<usize>> = truth.into_iter().map(|t| vec![t]).collect();
        let m = ScoreMatrix::new(Tensor::new(vec![q, c], scores.clone()).unwrap(), truth.clone()).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| 2.0 * s.exp() + 7.0).collect();
        let m2 = ScoreMatrix::new(Tensor::new(vec![q, c], mapped).unwrap(), truth).unwrap();
        let r = recall_at_k(&m, k).unwrap();
        prop_assert_eq!(r, recall_at_k(&m2, k).unwrap());
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!(recall_at_k(&m, k + 1).unwrap() >= r);
        if k >= c {
            prop_assert_eq!(r, 1.0);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matched_regions_lead_and_respect_the_budget(
        gt in prop::collection::vec(bbox(), 0..4),
        regions in prop::collection::vec((bbox(), 0.0..1.0f64), 1..8),
        spare in 0usize..6,
    ) {
        let (boxes, scores): (Vec<BBox>, Vec<f64>) = regions.into_iter().unzip();
        let set = region_set(boxes, scores);
        let budget = gt.len() + spare;
        if budget == 0 {
            return Ok(());
        }
        let (matches, kept) = match_boxes(&gt, &set, budget).unwrap();
        prop_assert!(kept.len() <= budget);
        prop_assert_eq!(matches.len(), gt.len());
        for (i, (m, g)) in matches.iter().zip(&gt).enumerate() {
            prop_assert_eq!(kept.boxes[i], set.boxes[m.region]);
            for b in &set.boxes {
                prop_assert!(iou(g, b).unwrap() <= m.iou);
            }
        }
        let tail = &kept.scores[gt.len()..];
        prop_assert!(tail.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn argmax_ignores_shifts(values in prop::collection::vec(-5.0..5.0f64, 1..8), c in -100.0..100.0f64) {
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        let best = argmax(&values);
        prop_assert!(values.iter().all(|&v| v <= values[best]));
        prop_assert_eq!(best, argmax(&shifted));
    }

    #[test]
    fn matching_loss_is_label_symmetric(s in 0.001..0.999f64) {
        let pos = vlm_loss_value(s, true);
        prop_assert!(pos >= 0.0);
        prop_assert!((pos - vlm_loss_value(1.0 - s, false)).abs() < 1e-9);
        prop_assert!((pos + s.ln()).abs() < 1e-9);
    }

    #[test]
    fn masking_leaves_structure_alone(seed in 0u64..10_000, t in 1usize..10, i in 1usize..6, split in any::<bool>()) {
        let vocab_size = 40;
        let tokens = TokenSequence::new((0..t).map(|j| RESERVED.len() + j).collect(), "").unwrap();
        let size = ImageSize { width: 10.0, height: 10.0 };
        let feats = Tensor::full(vec![i, 3], 1.0);
        let boxes = vec![BBox::new(1.0, 1.0, 5.0, 5.0); i];
        let regions = RegionSet::new(feats, boxes, vec![0; i], vec![0.5; i], size).unwrap();
        let input = assemble(&tokens, &regions, 32).unwrap();
        let cfg = MaskingConfig {
            text_rate: 0.3,
            region_rate: 0.3,
            text_split: if split { TextMaskSplit::EIGHTY_TEN_TEN } else { TextMaskSplit::PURE_MASK },
            ..Default::default()
        };
        let plan = MaskPlan::sample(t, i, &cfg, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(!plan.text_mask_indices.is_empty() && !plan.region_mask_indices.is_empty());
        prop_assert!(plan.text_mask_indices.iter().all(|&j| j < t));
        prop_assert!(plan.region_mask_indices.iter().all(|&j| j < i));

        let masked = plan.apply(&input).unwrap();
        prop_assert_eq!(&masked.layout, &input.layout);
        prop_assert_eq!(masked.layout[0], Role::Cls);
        prop_assert_eq!(masked.layout[t + 1], Role::Sep);
        prop_assert_eq!(&masked.mask, &input.mask);
        for (j, (&before, &after)) in input.token_ids.iter().zip(&masked.token_ids).enumerate() {
            if plan.text_mask_indices.contains(&j) {
                prop_assert!(after == vocab::MASK || after >= RESERVED.len());
            } else {
                prop_assert_eq!(before, after);
            }
        }
        let out = masked.regions.as_ref().unwrap();
        for j in 0..i {
            let zeroed = plan
                .region_mask_indices
                .iter()
                .zip(&plan.region_replacement)
                .any(|(&k, &r)| k == j && r == RegionReplacement::Zeroed);
            let expect = if zeroed { 0.0 } else { 1.0 };
            prop_assert!(out.features.row(j).iter().all(|&v| v == expect));
        }
    }
}

#[test]
fn triplet_loss_without_negatives_is_an_error() {
    assert!(matches!(hardest_triplet_loss(0.5, &[], 0.2), Err(Error::Argument(_))));
}

#[test]
fn too_many_gt_boxes_exceed_the_budget() {
    let set = region_set(vec![BBox::new(0.0, 0.0, 1.0, 1.0)], vec![0.5]);
    let gt = vec![BBox::new(0.0, 0.0, 1.0, 1.0); 3];
    assert!(matches!(match_boxes(&gt, &set, 2), Err(Error::Budget { count: 3, budget: 2 })));
}

#[test]
fn retrieval_evaluation_is_deterministic() {
    let fx = fixture(4).unwrap();
    let a = evaluate_retrieval(&fx.store, &fx.model, &fx.pairs, &DEFAULT_KS).unwrap();
    let b = evaluate_retrieval(&fx.store, &fx.model, &fx.pairs, &DEFAULT_KS).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2 * DEFAULT_KS.len());
}
