use assd::boxes::{
    decode_box, encode_box, generate_anchors, generate_anchors_detailed, match_anchors, nms, AnchorSpec, BBox,
    Detection, GroundTruth, ScaleAnchorSpec,
};
use assd::detector::DetectorConfig;
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..0.9, 0.0f64..0.9, 0.02f64..0.6, 0.02f64..0.6)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    // coarse scores so ties actually occur
    prop::collection::vec((bbox(), 1usize..4, 1u32..20), 0..=max).prop_map(|v| {
        v.into_iter()
            .map(|(bbox, class_id, s)| Detection { bbox, class_id, score: s as f64 / 20.0 })
            .collect()
    })
}

fn truths(max: usize) -> impl Strategy<Value = Vec<GroundTruth>> {
    prop::collection::vec((bbox(), 1usize..4), 0..=max)
        .prop_map(|v| v.into_iter().map(|(bbox, class_id)| GroundTruth { bbox, class_id }).collect())
}

fn scale_spec() -> impl Strategy<Value = ScaleAnchorSpec> {
    (
        1usize..6,
        prop::collection::vec(prop_oneof![Just(1.0), Just(2.0), Just(0.5), Just(3.0), Just(1.0 / 3.0)], 1..4),
        0.05f64..0.5,
        0.0f64..0.4,
        any::<bool>(),
    )
        .prop_map(|(grid, aspect_ratios, s_min, extra, include_extra_unit_box)| ScaleAnchorSpec {
            grid_h: grid,
            grid_w: grid,
            aspect_ratios,
            s_min,
            s_max: s_min + extra + 0.01,
            include_extra_unit_box,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nms_equals_oracle(dets in detections(30), thr in 0.1f64..0.9) {
        prop_assert_eq!(nms(&dets, thr), assd_oracles::nms(&dets, thr));
    }

    #[test]
    fn matching_equals_oracle(anchors in prop::collection::vec(bbox(), 1..30), truths in truths(30), thr in 0.1f64..0.9) {
        let m = match_anchors(&anchors, &truths, thr).unwrap();
        let (matched, labels) = assd_oracles::match_anchors(&anchors, &truths, thr);
        prop_assert_eq!(&m.matched, &matched);
        prop_assert_eq!(&m.labels, &labels);
    }

    #[test]
    fn encode_decode_round_trip(truth in bbox(), anchor in bbox()) {
        let back = decode_box(&encode_box(&truth, &anchor).unwrap(), &anchor).unwrap();
        for (a, b) in back.to_array().iter().zip(truth.to_array()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_shapes_follow_scale_and_ratio(scales in prop::collection::vec(scale_spec(), 1..4)) {
        let spec = AnchorSpec { scales: scales.clone() };
        let detailed = generate_anchors_detailed(&spec).unwrap();
        prop_assert_eq!(detailed.len(), spec.total());
        for a in &detailed {
            prop_assert!((a.width * a.height - a.size * a.size).abs() < 1e-12);
            prop_assert!((a.width / a.height - a.aspect_ratio).abs() < 1e-12);
        }
        let oracle_input: Vec<_> = scales
            .iter()
            .map(|s| (s.grid_h, s.aspect_ratios.clone(), s.s_min, s.s_max, s.include_extra_unit_box))
            .collect();
        let expected = assd_oracles::anchors(&oracle_input);
        let got: Vec<[f64; 4]> = generate_anchors(&spec).unwrap().iter().map(BBox::to_array).collect();
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn toy_config_anchor_total() {
    let config = DetectorConfig::toy();
    assert_eq!(generate_anchors(&config.anchor_spec()).unwrap().len(), (64 + 16 + 4) * 4);
}

#[test]
fn every_truth_claims_an_anchor() {
    let anchors = vec![BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), BBox::new(0.5, 0.5, 1.0, 1.0).unwrap()];
    let truths = vec![
        GroundTruth { bbox: BBox::new(0.0, 0.0, 0.1, 0.1).unwrap(), class_id: 1 },
        GroundTruth { bbox: BBox::new(0.01, 0.01, 0.12, 0.12).unwrap(), class_id: 2 },
    ];
    let m = match_anchors(&anchors, &truths, 0.5).unwrap();
    assert_eq!(m.num_positives(), 2);
    assert_eq!(m.labels, vec![1, 2]);
}
