use assd::boxes::{decode_box, generate_anchors, nms};
use assd::detector::{postprocess, DetectOptions, Detector, DetectorConfig, ModelParams, Variant};
use assd::fusion::FusionParams;
use assd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The full model with every `Wv = 0` and identity-block fusion, plus the
/// attention-free model sharing its backbone and heads.
fn reduced_pair(config: &DetectorConfig, seed: u64) -> (Detector, Detector) {
    let mut full = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    for a in &mut full.attention {
        a.wv = Tensor::zeros(a.wv.shape());
    }
    let fp = full.fusion.as_ref().unwrap();
    full.fusion = Some(FusionParams::identity_block(fp.out_channels(), fp.in_channels()));
    let mut plain = full.clone();
    plain.attention.clear();
    plain.fusion = None;
    let plain_config = config.clone().with_variant(Variant::Baseline);
    (
        Detector::new(config.clone(), full).unwrap(),
        Detector::new(plain_config, plain).unwrap(),
    )
}

#[test]
fn attention_off_reduction() {
    for config in [DetectorConfig::toy(), DetectorConfig::tiny()] {
        let (full, plain) = reduced_pair(&config, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = config.image_size;
        let images = Tensor::random_uniform([4, 3, s, s], -0.5, 0.5, &mut rng);
        for training in [false, true] {
            let a = full.forward(&images, training).unwrap();
            let b = plain.forward(&images, training).unwrap();
            for i in 0..4 {
                assert!(a.loc[i].max_abs_diff(&b.loc[i]).unwrap() < 1e-9);
                assert!(a.conf[i].max_abs_diff(&b.conf[i]).unwrap() < 1e-9);
            }
        }
    }
}

#[test]
fn rows_match_anchor_count() {
    let config = DetectorConfig::toy();
    let det = Detector::init(config.clone(), 0).unwrap();
    let pass = det.forward(&Tensor::zeros([2, 3, 64, 64]), false).unwrap();
    let anchors = generate_anchors(&config.anchor_spec()).unwrap().len();
    assert_eq!(pass.loc[1].shape(), &[anchors, 4]);
    assert_eq!(pass.conf[1].shape(), &[anchors, 4]);
    assert_eq!(pass.attention.len(), 3);
    assert_eq!(pass.attention[2][1].locations(), 4);
}

#[test]
fn zero_heads_give_uniform_posteriors() {
    let mut det = Detector::init(DetectorConfig::toy(), 1).unwrap();
    for h in &mut det.params.heads {
        h.conf.weight = Tensor::zeros(h.conf.weight.shape());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pass = det.forward(&Tensor::random_uniform([1, 3, 64, 64], -0.5, 0.5, &mut rng), false).unwrap();
    let probs = pass.conf[0].softmax_rows().unwrap();
    assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn background_heads_detect_nothing() {
    let mut det = Detector::init(DetectorConfig::toy(), 1).unwrap();
    for h in &mut det.params.heads {
        h.conf.weight = Tensor::zeros(h.conf.weight.shape());
        let bpc = h.conf.bias.len() / 4;
        h.conf.bias = Tensor::new([4 * bpc], (0..4 * bpc).map(|i| if i % 4 == 0 { 20.0 } else { 0.0 }).collect()).unwrap();
    }
    let dets = det.detect(&Tensor::zeros([3, 64, 64]), &DetectOptions::default()).unwrap();
    assert!(dets.is_empty());
}

#[test]
fn single_dominant_anchor() {
    let anchors = generate_anchors(&DetectorConfig::toy().anchor_spec()).unwrap();
    let n = anchors.len();
    let mut conf = Tensor::zeros([n, 4]);
    for a in 0..n {
        conf.set(&[a, 0], 10.0);
    }
    conf.set(&[17, 0], 0.0);
    conf.set(&[17, 2], 12.0);
    let mut loc = Tensor::zeros([n, 4]);
    loc.set(&[17, 0], 0.5);
    let dets = postprocess(&loc, &conf, &anchors, &DetectOptions::default()).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].class_id, 2);
    let expected = decode_box(&[0.5, 0.0, 0.0, 0.0], &anchors[17]).unwrap().clipped();
    assert_eq!(dets[0].bbox, expected);
}

#[test]
fn detect_equals_stepwise_pipeline() {
    let config = DetectorConfig::toy();
    let det = Detector::init(config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let image = Tensor::random_uniform([3, 64, 64], -0.5, 0.5, &mut rng);
    let opts = DetectOptions { score_threshold: 0.2, nms_threshold: 0.45, max_detections: 50 };
    let got = det.detect(&image, &opts).unwrap();

    let pass = det.forward(&image.reshape([1, 3, 64, 64]).unwrap(), false).unwrap();
    let probs = pass.conf[0].softmax_rows().unwrap();
    let mut candidates = Vec::new();
    for (a, anchor) in det.anchors().iter().enumerate() {
        let r = pass.loc[0].row(a);
        let bbox = decode_box(&[r[0], r[1], r[2], r[3]], anchor).unwrap().clipped();
        for k in 1..4 {
            let score = probs.at(&[a, k]);
            if score > opts.score_threshold && bbox.is_valid() {
                candidates.push(assd::boxes::Detection { bbox, class_id: k, score });
            }
        }
    }
    let mut expected = assd_oracles::nms(&candidates, opts.nms_threshold);
    expected.truncate(opts.max_detections);
    assert!(!expected.is_empty());
    assert_eq!(got, expected);
    assert_eq!(nms(&candidates, opts.nms_threshold)[..got.len()], got[..]);
}

#[test]
fn thresholds_outside_unit_interval_are_rejected() {
    let det = Detector::init(DetectorConfig::tiny(), 0).unwrap();
    let opts = DetectOptions { score_threshold: 0.0, ..Default::default() };
    assert!(det.detect(&Tensor::zeros([3, 16, 16]), &opts).is_err());
}
