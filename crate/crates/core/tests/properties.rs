//! Randomised invariants of NMS, matching and average precision.

use bird::bbox::BBox;
use bird::detection::{nms, Detection};
use bird::eval::{average_precision, match_detections, precision_envelope, EvalFrame};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..30.0f64, 0.0..30.0f64, 1.0..10.0f64, 1.0..10.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn detection(min_score: f64) -> impl Strategy<Value = Detection> {
    (bbox(), min_score..1.0f64, 0usize..2).prop_map(|(bbox, score, class_id)| Detection { bbox, score, class_id })
}

fn frame() -> impl Strategy<Value = EvalFrame> {
    (
        prop::collection::vec(detection(0.01), 0..6),
        prop::collection::vec(bbox(), 0..4),
    )
        .prop_map(|(mut preds, gts)| {
            // a prediction near each GT so matches actually happen
            for (i, g) in gts.iter().enumerate() {
                preds.push(Detection {
                    bbox: BBox::new(g.x1 + 0.3, g.y1, g.x2 + 0.3, g.y2),
                    score: 0.05 + 0.1 * i as f64,
                    class_id: 0,
                });
            }
            preds.sort_by(|a, b| b.score.total_cmp(&a.score));
            EvalFrame { preds, gts }
        })
}

fn frames() -> impl Strategy<Value = Vec<EvalFrame>> {
    prop::collection::vec(frame(), 1..5).prop_filter("needs ground truth", |fs| fs.iter().any(|f| !f.gts.is_empty()))
}

proptest! {
    #[test]
    fn nms_is_idempotent(dets in prop::collection::vec(detection(0.0), 0..12), thresh in 0.1..0.9f64) {
        let once = nms(dets, thresh);
        let twice = nms(once.clone(), thresh);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn nms_output_has_no_overlapping_same_class_pair(dets in prop::collection::vec(detection(0.0), 0..12), thresh in 0.1..0.9f64) {
        let kept = nms(dets, thresh);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || a.bbox.iou(&b.bbox) <= thresh);
                prop_assert!(a.score >= b.score);
            }
        }
    }

    #[test]
    fn ap_is_a_probability(fs in frames()) {
        let (ap, points) = average_precision(&fs, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        for (r, p) in points {
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn zero_score_miss_leaves_ap_unchanged(fs in frames(), which in 0usize..5) {
        let (ap, _) = average_precision(&fs, 0.5).unwrap();
        let mut more = fs.clone();
        let k = which % more.len();
        more[k].preds.push(Detection {
            bbox: BBox::new(100.0, 100.0, 105.0, 105.0),
            score: 0.0,
            class_id: 0,
        });
        let (ap2, _) = average_precision(&more, 0.5).unwrap();
        prop_assert!((ap - ap2).abs() < 1e-12, "{} vs {}", ap, ap2);
    }

    #[test]
    fn envelope_is_non_increasing(fs in frames()) {
        let (_, points) = average_precision(&fs, 0.5).unwrap();
        let env = precision_envelope(&points);
        for w in env.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for (e, (_, p)) in env.iter().zip(&points) {
            prop_assert!(e >= p);
        }
    }

    #[test]
    fn matching_is_one_to_one(f in frame(), thresh in 0.05..0.95f64) {
        let c = match_detections(&f.preds, &f.gts, thresh);
        prop_assert!(c.tp <= f.preds.len().min(f.gts.len()));
        prop_assert_eq!(c.tp + c.fp, f.preds.len());
        prop_assert_eq!(c.tp + c.fn_, f.gts.len());
    }
}
