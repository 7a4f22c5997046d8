//! Invariants checked over generated inputs.

use gaze_align::condition::Condition;
use gaze_align::fixation::{
    harmonize, normalize_reflacx, FixationRecord, FixationSequence, ImageViewport, RawFixationRow,
};
use gaze_align::losses::{ensemble_logit, focal_loss, gaze_loss, LossConfig};
use gaze_align::metrics::{entropy_bits, jensen_shannon, nss, pearson};
use gaze_align::regions::{
    aggregate_bounds, bounds_valid, match_keywords, render_mask, AggregationConfig, Annotation,
    RegionAtlas,
};
use gaze_align::report::{
    gate_conditions, keyword_filter_batches, ConditionPrediction, RetryPolicy, GATE_THRESHOLD,
};
use gaze_align::saliency::{
    decode_atnm, render_heatmap, to_distribution, write_atnm, AttentionMap, DistributionMode,
    DistributionView,
};
use gaze_align::text_metrics::{bleu, rouge_l, rouge_n};
use proptest::prelude::*;

fn map_strategy(max_side: usize) -> impl Strategy<Value = AttentionMap> {
    (2..=max_side, 2..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..1.0, h * w)
            .prop_map(move |v| AttentionMap::new(h, w, v).unwrap())
    })
}

fn map_pair(max_side: usize) -> impl Strategy<Value = (AttentionMap, AttentionMap)> {
    (2..=max_side, 2..=max_side).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..1.0, h * w),
            prop::collection::vec(0.0f64..1.0, h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    AttentionMap::new(h, w, a).unwrap(),
                    AttentionMap::new(h, w, b).unwrap(),
                )
            })
    })
}

fn dist_pair() -> impl Strategy<Value = (DistributionView, DistributionView)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(0.0f64..1.0, n),
        )
            .prop_filter_map("nonzero mass", |(a, b)| {
                let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
                (sa > 0.0 && sb > 0.0).then(|| {
                    (
                        DistributionView::new(a.iter().map(|v| v / sa).collect()).unwrap(),
                        DistributionView::new(b.iter().map(|v| v / sb).collect()).unwrap(),
                    )
                })
            })
    })
}

fn fixations(min: usize) -> impl Strategy<Value = FixationSequence> {
    prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.01f64..2.0), min..20).prop_map(|v| {
        FixationSequence::from_records(
            v.into_iter()
                .map(|(x, y, d)| FixationRecord {
                    x,
                    y,
                    duration: d,
                    pupil: 1.0,
                    t_start: 0.0,
                    valid: true,
                })
                .collect(),
        )
    })
}

const WORDS: [&str; 10] = [
    "heart", "lung", "effusion", "normal", "mild", "left", "right", "no", "the", "opacity",
];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 0..15).prop_map(|ix| {
        ix.into_iter()
            .map(|i| WORDS[i])
            .collect::<Vec<_>>()
            .join(" ")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heatmap_is_finite_and_nonnegative(seq in fixations(0), h in 8usize..40, w in 8usize..40, sigma in 0.5f64..10.0) {
        let m = render_heatmap(&seq, h, w, sigma).unwrap();
        prop_assert!(m.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn atnm_round_trips_exactly(m in map_strategy(24)) {
        let mut buf = Vec::new();
        write_atnm(&m, &mut buf).unwrap();
        let f32_values: Vec<f64> = m.values().iter().map(|v| *v as f32 as f64).collect();
        prop_assert_eq!(decode_atnm(&buf).unwrap().into_values(), f32_values);
    }

    #[test]
    fn distributions_sum_to_one(m in map_strategy(24)) {
        for mode in [DistributionMode::Softmax, DistributionMode::SumNormalize] {
            let s: f64 = to_distribution(&m, mode).probs().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jsd_is_symmetric_and_bounded((p, q) in dist_pair()) {
        let pq = jensen_shannon(&p, &q).unwrap();
        prop_assert_eq!(pq, jensen_shannon(&q, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&pq));
    }

    #[test]
    fn entropy_is_bounded_by_log_n((p, _) in dist_pair()) {
        let e = entropy_bits(&p);
        prop_assert!(e >= 0.0 && e <= (p.len() as f64).log2() + 1e-12);
    }

    #[test]
    fn pearson_is_bounded_and_affine_invariant((a, b) in map_pair(16), scale in 0.1f64..10.0, shift in 0.0f64..5.0) {
        let r = pearson(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r.r) && (0.0..=1.0).contains(&r.p));
        let moved = AttentionMap::new(a.height(), a.width(), a.values().iter().map(|v| v * scale + shift).collect()).unwrap();
        prop_assert!((pearson(&moved, &b).unwrap().r - r.r).abs() < 1e-9);
    }

    #[test]
    fn nss_is_finite((m, _) in map_pair(16), seq in fixations(1)) {
        prop_assert!(nss(&m, &seq).unwrap().value.is_finite());
    }

    #[test]
    fn gaze_loss_is_nonnegative((m, g) in map_pair(12), n_fix in 0usize..50, q in 0.0f64..=1.0) {
        let l = gaze_loss(&m, &g, n_fix, q).unwrap();
        prop_assert!(l.gaze_total >= -1e-12 && l.gaze_total.is_finite());
        prop_assert!(l.mse >= 0.0 && l.kl >= 0.0 && l.com >= 0.0 && l.corr >= -1e-12);
        prop_assert_eq!(l.grads.total.len(), m.len());
    }

    #[test]
    fn gaze_loss_of_identical_maps_is_zero(m in map_strategy(12), n_fix in 0usize..50, q in 0.0f64..=1.0) {
        prop_assert!(gaze_loss(&m, &m, n_fix, q).unwrap().gaze_total.abs() < 1e-9);
    }

    #[test]
    fn ensemble_lies_between_inputs(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..14), alpha in 0.0f64..=1.0) {
        let (g, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let e = ensemble_logit(&g, &l, alpha).unwrap();
        for ((x, y), z) in g.iter().zip(&l).zip(&e) {
            prop_assert!(*z >= x.min(*y) - 1e-12 && *z <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn focal_loss_is_nonnegative(rows in prop::collection::vec((-20.0f64..20.0, prop::bool::ANY), 8)) {
        let (logits, targets): (Vec<f64>, Vec<f64>) = rows.into_iter().map(|(z, t)| (z, t as u8 as f64)).unzip();
        let f = focal_loss(&logits, &targets, &LossConfig::default()).unwrap();
        prop_assert!(f >= 0.0 && f.is_finite());
    }

    #[test]
    fn valid_reflacx_points_land_in_unit_square(x in -200.0f64..2200.0, y in -200.0f64..2200.0) {
        let vp = ImageViewport::new([0.0, 0.0, 2000.0, 2000.0], [0.0, 0.0, 2560.0, 2560.0]).unwrap();
        let r = normalize_reflacx(&RawFixationRow::reflacx(x, y, 0.0, 0.3), &vp).unwrap();
        if r.valid {
            prop_assert!((0.0..=1.0).contains(&r.x) && (0.0..=1.0).contains(&r.y));
        }
    }

    #[test]
    fn harmonize_quality_is_a_fraction(rows in prop::collection::vec((-0.5f64..1.5, -0.5f64..1.5, -0.1f64..1.0), 0..30)) {
        let raw: Vec<RawFixationRow> = rows.iter().map(|&(x, y, d)| RawFixationRow::eyegaze(x, y, d)).collect();
        let seq = harmonize(&raw, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&seq.q_score));
        prop_assert_eq!(seq.records.len(), raw.len());
        prop_assert_eq!(seq.n_fix, seq.records.iter().filter(|r| r.valid).count());
    }

    #[test]
    fn aggregated_bounds_are_valid(boxes in prop::collection::vec((0usize..17, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.5, 0.0f64..0.5, 0.0f64..=1.0), 1..40)) {
        let atlas = RegionAtlas::builtin();
        let rows: Vec<Annotation> = boxes
            .iter()
            .map(|&(r, x, y, dw, dh, c)| Annotation {
                patient: "p".into(),
                region: atlas.regions[r].region_id.clone(),
                x1: x * 1000.0,
                y1: y * 1000.0,
                x2: (x + dw) * 1000.0,
                y2: (y + dh) * 1000.0,
                width: Some(1000.0),
                height: Some(1000.0),
                confidence: Some(c),
            })
            .collect();
        let out = aggregate_bounds(&rows, &atlas, &AggregationConfig::default());
        for r in &out.regions {
            prop_assert!(bounds_valid(&r.bounds));
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_matches(kws in prop::collection::vec("[a-z ]{3,20}", 1..6), t in 0.5f64..0.99) {
        let atlas = RegionAtlas::builtin();
        let terms: Vec<&str> = kws.iter().map(String::as_str).collect();
        let lo = match_keywords(&terms, &atlas, t).unwrap();
        let hi = match_keywords(&terms, &atlas, (t + 0.05).min(1.0)).unwrap();
        for (a, b) in lo.flags.iter().zip(&hi.flags) {
            prop_assert!(*a || !*b);
        }
        let mask = render_mask(&lo, &atlas, 32, 32).unwrap();
        prop_assert!(mask.values().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn gate_keeps_order_and_threshold(probs in prop::collection::vec(0.0f64..=1.0, 0..=8)) {
        let preds: Vec<ConditionPrediction> = probs.iter().zip(Condition::ALL).map(|(&p, c)| ConditionPrediction::new(c, p)).collect();
        let gated = gate_conditions(&preds, GATE_THRESHOLD).unwrap();
        prop_assert!(gated.iter().all(|p| p.probability > GATE_THRESHOLD));
        prop_assert_eq!(gated.len(), probs.iter().filter(|p| **p > GATE_THRESHOLD).count());
        let order: Vec<usize> = gated.iter().map(|g| preds.iter().position(|p| p.condition == g.condition).unwrap()).collect();
        prop_assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn keyword_batches_partition_the_input(n in 0usize..400, size in 1usize..50) {
        let items: Vec<usize> = (0..n).collect();
        let batches = keyword_filter_batches(&items, size).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(size));
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= size));
        prop_assert_eq!(batches.concat(), items);
    }

    #[test]
    fn text_scores_are_fractions(c in sentence(), r in sentence()) {
        if let Ok(b) = bleu(&c, &r, 4) {
            prop_assert!((0.0..=1.0).contains(&b.score));
        }
        for n in 1..=2 {
            if let Ok(s) = rouge_n(&c, &r, n) {
                prop_assert!((0.0..=1.0).contains(&s.f1));
            }
        }
        let l = rouge_l(&c, &r);
        prop_assert!((0.0..=1.0).contains(&l.f1) && (0.0..=1.0).contains(&l.precision) && (0.0..=1.0).contains(&l.recall));
    }

    #[test]
    fn retry_delays_triple(base in 0.5f64..10.0, retries in 0u32..8) {
        let p = RetryPolicy { max_retries: retries, base_delay_s: base, ..RetryPolicy::default() };
        let s = p.schedule();
        prop_assert_eq!(s.len(), retries as usize);
        for (k, d) in s.iter().enumerate() {
            prop_assert!((d.as_secs_f64() - base * 3f64.powi(k as i32)).abs() < 1e-6);
        }
    }
}
