use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate_map, MapReport};
use super::optim::{sgd_step, OptimizerState};
use crate::boxes::{match_anchors, Detection, GroundTruth, DEFAULT_MATCH_THRESHOLD, DEFAULT_NEG_POS_RATIO};
use crate::data::{augment, AugmentOptions, Sample};
use crate::detector::{
    backward, forward, multibox_loss, postprocess, update_running_stats, DetectOptions, Detector,
    DetectorConfig,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// Independent ChaCha streams under one seed; stream 0 initializes weights.
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Hyperparameters of [`train_loop`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Vec<(usize, f64)>,
    pub seed: u64,
    pub augment: AugmentOptions,
    pub match_threshold: f64,
    pub neg_pos_ratio: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            learning_rate: OptimizerState::DEFAULT_LEARNING_RATE,
            momentum: OptimizerState::DEFAULT_MOMENTUM,
            weight_decay: OptimizerState::DEFAULT_WEIGHT_DECAY,
            schedule: Vec::new(),
            seed: 0,
            augment: AugmentOptions::default(),
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            neg_pos_ratio: DEFAULT_NEG_POS_RATIO,
        }
    }
}

impl TrainOptions {
    /// Two 10× decays at 5/7 and 25/28 of `epochs`.
    pub fn step_schedule(epochs: usize) -> Vec<(usize, f64)> {
        vec![(epochs * 5 / 7, 0.1), (epochs * 25 / 28, 0.1)]
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: Detector,
    /// Mean batch loss of every epoch, in order.
    pub history: Vec<f64>,
}

/// Stacks `[3, H, W]` image tensors into `[B, 3, H, W]`.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut data = Vec::with_capacity(samples.len() * 3 * w * h);
    for s in samples {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(Error::shape("batch_images", &[s.image.height, s.image.width], &[h, w]));
        }
        data.extend_from_slice(s.image.to_tensor().data());
    }
    Tensor::new([samples.len(), 3, h, w], data)
}

/// Initializes a detector from `opts.seed` and trains it on `samples`,
/// reporting every finished epoch to `on_epoch(epoch, mean_loss)`.
pub fn train_loop(
    config: &DetectorConfig,
    samples: &[Sample],
    opts: &TrainOptions,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let detector = Detector::init(config.clone(), opts.seed)?;
    train_from(detector, samples, opts, on_epoch)
}

/// Continues training an existing detector.
pub fn train_from(
    mut detector: Detector,
    samples: &[Sample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let size = detector.config.image_size;
    if let Some(s) = samples.iter().find(|s| s.image.width != size || s.image.height != size) {
        return Err(Error::Config(format!(
            "training image is {}x{}, model expects {size}x{size}",
            s.image.width, s.image.height
        )));
    }
    let num_classes = detector.config.num_classes;
    if samples.iter().flat_map(|s| &s.objects).any(|o| o.class_id == 0 || o.class_id > num_classes) {
        return Err(Error::Config(format!("object class outside 1..={num_classes}")));
    }

    let mut state = OptimizerState::new(opts.learning_rate, opts.momentum, opts.weight_decay, opts.schedule.clone());
    let mut shuffle_rng = stream(opts.seed, SHUFFLE_STREAM);
    let mut augment_rng = stream(opts.seed, AUGMENT_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let lr = state.rate_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&samples[i], opts.augment, &mut augment_rng))
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let images = batch_images(&refs)?;
            let matches = batch
                .iter()
                .map(|s| match_anchors(detector.anchors(), &s.objects, opts.match_threshold))
                .collect::<Result<Vec<_>>>()?;

            let pass = forward(&images, &detector.params, &detector.config, true)?;
            let out = multibox_loss(&pass.loc, &pass.conf, &matches, opts.neg_pos_ratio)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss diverged at epoch {epoch}")));
            }
            let grads = backward(&pass, &detector.params, &detector.config, &out.grad_loc, &out.grad_conf)?;
            update_running_stats(&mut detector.params, &pass);
            sgd_step(&mut detector.params, &grads, &mut state, lr)?;
            total += out.loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainOutcome { detector, history })
}

/// Inference over a corpus in batches.
pub fn detect_all(detector: &Detector, samples: &[Sample], opts: &DetectOptions) -> Result<Vec<Vec<Detection>>> {
    const BATCH: usize = 16;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pass = detector.forward(&batch_images(&refs)?, false)?;
        for (loc, conf) in pass.loc.iter().zip(&pass.conf) {
            out.push(postprocess(loc, conf, detector.anchors(), opts)?);
        }
    }
    Ok(out)
}

/// mAP of `detector` on `samples` with default post-processing.
pub fn evaluate_detector(detector: &Detector, samples: &[Sample], iou_threshold: f64) -> Result<MapReport> {
    let dets = detect_all(detector, samples, &DetectOptions::default())?;
    let truths: Vec<Vec<GroundTruth>> = samples.iter().map(|s| s.objects.clone()).collect();
    evaluate_map(&dets, &truths, detector.config.num_classes, iou_threshold)
}
