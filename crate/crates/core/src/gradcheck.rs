//! End-to-end gradient verification: every differentiable op and a tiny
//! full model are compared against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_backward, attention_forward, AttentionParams};
use crate::boxes::{generate_anchors, match_anchors, BBox, GroundTruth, MatchResult, DEFAULT_NEG_POS_RATIO};
use crate::detector::{backward, forward, multibox_loss, DetectorConfig, ModelParams, ParamGrads};
use crate::error::Result;
use crate::fusion::{fuse, fuse_backward, FusionParams};
use crate::grad::{finite_diff_coords, finite_diff_grad, max_relative_error, DEFAULT_STEP};
use crate::layers::{
    batch_norm, batch_norm_backward, bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward,
    BatchNormParams, ConvParams,
};
use crate::tensor::Tensor;

/// Tolerance for single layers.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for the assembled model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random instances per attention shape `(C, N)`.
    pub attention_repeats: usize,
    /// Test hook: scale the analytic gradient of the named check by 1.01.
    pub corrupt: Option<String>,
}

impl GradcheckOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            attention_repeats: 1,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<5} {:<28} instances {:>3}  max rel err {:.3e}  (tol {:.0e})",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.instances,
                c.max_relative_error,
                c.tolerance
            )?;
        }
        Ok(())
    }
}

struct Checker {
    rng: ChaCha8Rng,
    corrupt: Option<String>,
    report: GradcheckReport,
}

impl Checker {
    fn random(&mut self, shape: &[usize]) -> Tensor {
        Tensor::random_uniform(shape, -1.0, 1.0, &mut self.rng)
    }

    /// Records the worst error among `(analytic, numeric)` pairs.
    fn record(&mut self, name: &str, instances: usize, tolerance: f64, pairs: Vec<(Tensor, Tensor)>) -> Result<()> {
        let bump = if self.corrupt.as_deref() == Some(name) { 1.01 } else { 1.0 };
        let mut worst: f64 = 0.0;
        for (analytic, numeric) in pairs {
            worst = worst.max(max_relative_error(&analytic.scale(bump), &numeric)?);
        }
        match self.report.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.instances += instances;
                c.max_relative_error = c.max_relative_error.max(worst);
            }
            None => self.report.checks.push(CheckResult {
                name: name.to_string(),
                instances,
                max_relative_error: worst,
                tolerance,
            }),
        }
        Ok(())
    }
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut ck = Checker {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        corrupt: opts.corrupt.clone(),
        report: GradcheckReport::default(),
    };
    check_conv(&mut ck)?;
    check_batch_norm(&mut ck)?;
    check_upsample(&mut ck)?;
    check_attention(&mut ck, opts.attention_repeats.max(1))?;
    check_fusion(&mut ck)?;
    check_loss(&mut ck)?;
    check_model(&mut ck)?;
    Ok(ck.report)
}

fn check_conv(ck: &mut Checker) -> Result<()> {
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let x = ck.random(&[2, 3, 5, 5]);
        let p = ConvParams::new(ck.random(&[4, 3, k, k]), ck.random(&[4]), stride, pad)?;
        let probe = ck.random(conv2d(&x, &p)?.shape());
        let g = conv2d_backward(&x, &p, &probe)?;
        let loss = |x: &Tensor, p: &ConvParams| conv2d(x, p).and_then(|y| y.dot(&probe)).unwrap_or(f64::NAN);
        let fx = finite_diff_grad(|t| loss(t, &p), &x, DEFAULT_STEP)?;
        let fw = finite_diff_grad(|t| loss(&x, &ConvParams { weight: t.clone(), ..p.clone() }), &p.weight, DEFAULT_STEP)?;
        let fb = finite_diff_grad(|t| loss(&x, &ConvParams { bias: t.clone(), ..p.clone() }), &p.bias, DEFAULT_STEP)?;
        ck.record(
            "conv2d",
            1,
            LAYER_TOLERANCE,
            vec![(g.input, fx), (g.params["weight"].clone(), fw), (g.params["bias"].clone(), fb)],
        )?;
    }
    Ok(())
}

fn check_batch_norm(ck: &mut Checker) -> Result<()> {
    for training in [true, false] {
        let x = ck.random(&[3, 2, 3, 2]);
        let mut p = BatchNormParams::new(2);
        p.gamma = ck.random(&[2]);
        p.beta = ck.random(&[2]);
        p.running_mean = ck.random(&[2]);
        p.running_var = Tensor::random_uniform([2], 0.5, 1.5, &mut ck.rng);
        let probe = ck.random(x.shape());
        let (_, cache) = batch_norm(&x, &p, training)?;
        let g = batch_norm_backward(&cache, &p, &probe)?;
        let loss = |x: &Tensor, p: &BatchNormParams| {
            batch_norm(x, p, training).and_then(|(y, _)| y.dot(&probe)).unwrap_or(f64::NAN)
        };
        let fx = finite_diff_grad(|t| loss(t, &p), &x, DEFAULT_STEP)?;
        let fg = finite_diff_grad(|t| loss(&x, &BatchNormParams { gamma: t.clone(), ..p.clone() }), &p.gamma, DEFAULT_STEP)?;
        let fb = finite_diff_grad(|t| loss(&x, &BatchNormParams { beta: t.clone(), ..p.clone() }), &p.beta, DEFAULT_STEP)?;
        ck.record(
            "batch_norm",
            1,
            LAYER_TOLERANCE,
            vec![(g.input, fx), (g.params["gamma"].clone(), fg), (g.params["beta"].clone(), fb)],
        )?;
    }
    Ok(())
}

fn check_upsample(ck: &mut Checker) -> Result<()> {
    for (h, w, oh, ow) in [(2, 2, 4, 4), (2, 3, 5, 7), (1, 1, 3, 3)] {
        let x = ck.random(&[2, 2, h, w]);
        let probe = ck.random(&[2, 2, oh, ow]);
        let g = bilinear_upsample_backward(x.shape(), &probe)?;
        let fx = finite_diff_grad(
            |t| bilinear_upsample(t, oh, ow).and_then(|y| y.dot(&probe)).unwrap_or(f64::NAN),
            &x,
            DEFAULT_STEP,
        )?;
        ck.record("bilinear_upsample", 1, LAYER_TOLERANCE, vec![(g, fx)])?;
    }
    Ok(())
}

/// Side lengths giving N ∈ {1, 4, 9, 16}.
const ATTENTION_SIDES: [usize; 4] = [1, 2, 3, 4];

fn check_attention(ck: &mut Checker, repeats: usize) -> Result<()> {
    for _ in 0..repeats {
        for c in [8, 16] {
            for side in ATTENTION_SIDES {
                let x = ck.random(&[1, c, side, side]);
                let p = AttentionParams::init(c, &mut ck.rng);
                let probe = ck.random(x.shape());
                let g = attention_backward(&x, &p, &probe)?;
                let loss = |x: &Tensor, p: &AttentionParams| {
                    attention_forward(x, p).and_then(|(y, _)| y.dot(&probe)).unwrap_or(f64::NAN)
                };
                let fx = finite_diff_grad(|t| loss(t, &p), &x, DEFAULT_STEP)?;
                let fq = finite_diff_grad(|t| loss(&x, &AttentionParams { wq: t.clone(), ..p.clone() }), &p.wq, DEFAULT_STEP)?;
                let fk = finite_diff_grad(|t| loss(&x, &AttentionParams { wk: t.clone(), ..p.clone() }), &p.wk, DEFAULT_STEP)?;
                let fv = finite_diff_grad(|t| loss(&x, &AttentionParams { wv: t.clone(), ..p.clone() }), &p.wv, DEFAULT_STEP)?;
                ck.record(
                    "attention",
                    1,
                    LAYER_TOLERANCE,
                    vec![
                        (g.input, fx),
                        (g.params["wq"].clone(), fq),
                        (g.params["wk"].clone(), fk),
                        (g.params["wv"].clone(), fv),
                    ],
                )?;
            }
        }
    }
    Ok(())
}

fn check_fusion(ck: &mut Checker) -> Result<()> {
    let inputs = [ck.random(&[2, 3, 4, 4]), ck.random(&[2, 2, 2, 2]), ck.random(&[2, 2, 1, 1])];
    let p = FusionParams::new(ck.random(&[3, 7]), ck.random(&[3]))?;
    let probe = ck.random(&[2, 3, 4, 4]);
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let g = fuse_backward(&refs, &p, &probe)?;
    let mut pairs = Vec::new();
    for i in 0..inputs.len() {
        let fd = finite_diff_grad(
            |t| {
                let mut r = refs.clone();
                r[i] = t;
                fuse(&r, &p).and_then(|y| y.dot(&probe)).unwrap_or(f64::NAN)
            },
            &inputs[i],
            DEFAULT_STEP,
        )?;
        pairs.push((g.inputs[i].clone(), fd));
    }
    let loss = |p: &FusionParams| fuse(&refs, p).and_then(|y| y.dot(&probe)).unwrap_or(f64::NAN);
    let fw = finite_diff_grad(|t| loss(&FusionParams { weight: t.clone(), ..p.clone() }), &p.weight, DEFAULT_STEP)?;
    let fb = finite_diff_grad(|t| loss(&FusionParams { bias: t.clone(), ..p.clone() }), &p.bias, DEFAULT_STEP)?;
    pairs.push((g.params["weight"].clone(), fw));
    pairs.push((g.params["bias"].clone(), fb));
    ck.record("fusion", 1, LAYER_TOLERANCE, pairs)
}

fn random_truths(rng: &mut ChaCha8Rng, count: usize, classes: usize) -> Vec<GroundTruth> {
    (0..count)
        .map(|_| {
            let w = rng.random_range(0.15..0.5);
            let h = rng.random_range(0.15..0.5);
            let x = rng.random_range(0.0..1.0 - w);
            let y = rng.random_range(0.0..1.0 - h);
            GroundTruth {
                bbox: BBox::new(x, y, x + w, y + h).expect("inside the unit square"),
                class_id: rng.random_range(1..=classes),
            }
        })
        .collect()
}

fn check_loss(ck: &mut Checker) -> Result<()> {
    let config = DetectorConfig::tiny();
    let anchors = generate_anchors(&config.anchor_spec())?;
    let classes = config.num_classes + 1;
    for _ in 0..3 {
        let matches: Vec<MatchResult> = (0..2)
            .map(|_| {
                let truths = random_truths(&mut ck.rng, 2, config.num_classes);
                match_anchors(&anchors, &truths, 0.5)
            })
            .collect::<Result<_>>()?;
        let loc: Vec<Tensor> = (0..2).map(|_| ck.random(&[anchors.len(), 4]).scale(2.0)).collect();
        let conf: Vec<Tensor> = (0..2).map(|_| ck.random(&[anchors.len(), classes]).scale(3.0)).collect();
        let out = multibox_loss(&loc, &conf, &matches, DEFAULT_NEG_POS_RATIO)?;
        let mut pairs = Vec::new();
        for i in 0..2 {
            let fl = finite_diff_grad(
                |t| {
                    let mut l = loc.clone();
                    l[i] = t.clone();
                    multibox_loss(&l, &conf, &matches, DEFAULT_NEG_POS_RATIO).map_or(f64::NAN, |o| o.loss)
                },
                &loc[i],
                DEFAULT_STEP,
            )?;
            let fc = finite_diff_grad(
                |t| {
                    let mut c = conf.clone();
                    c[i] = t.clone();
                    multibox_loss(&loc, &c, &matches, DEFAULT_NEG_POS_RATIO).map_or(f64::NAN, |o| o.loss)
                },
                &conf[i],
                DEFAULT_STEP,
            )?;
            pairs.push((out.grad_loc[i].clone(), fl));
            pairs.push((out.grad_conf[i].clone(), fc));
        }
        ck.record("multibox_loss", 1, LAYER_TOLERANCE, pairs)?;
    }
    Ok(())
}

/// Multibox loss of the full model on a fixed batch, training-mode BN.
pub fn model_loss(
    params: &ModelParams,
    config: &DetectorConfig,
    images: &Tensor,
    matches: &[MatchResult],
) -> Result<(f64, ParamGrads)> {
    let pass = forward(images, params, config, true)?;
    let out = multibox_loss(&pass.loc, &pass.conf, matches, DEFAULT_NEG_POS_RATIO)?;
    let grads = backward(&pass, params, config, &out.grad_loc, &out.grad_conf)?;
    Ok((out.loss, grads))
}

/// Coordinates probed per parameter tensor in the full-model check.
const MODEL_COORDS_PER_TENSOR: usize = 6;

fn check_model(ck: &mut Checker) -> Result<()> {
    let config = DetectorConfig::tiny();
    let params = ModelParams::init(&config, &mut ck.rng)?;
    let anchors = generate_anchors(&config.anchor_spec())?;
    let images = Tensor::random_uniform([2, 3, config.image_size, config.image_size], -0.5, 0.5, &mut ck.rng);
    let matches: Vec<MatchResult> = (0..2)
        .map(|_| {
            let truths = random_truths(&mut ck.rng, 2, config.num_classes);
            match_anchors(&anchors, &truths, 0.5)
        })
        .collect::<Result<_>>()?;
    let (_, grads) = model_loss(&params, &config, &images, &matches)?;

    let mut names = Vec::new();
    params.visit(|name, t| names.push((name.to_string(), t.len())));
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, len) in names {
        let coords: Vec<usize> = (0..MODEL_COORDS_PER_TENSOR.min(len))
            .map(|_| ck.rng.random_range(0..len))
            .collect();
        let mut current = Tensor::zeros([1]);
        params.visit(|n, t| {
            if n == name {
                current = t.clone();
            }
        });
        let fd = finite_diff_coords(
            |t| {
                let mut p = params.clone();
                p.visit_mut(|n, slot| {
                    if n == name {
                        *slot = t.clone();
                    }
                });
                model_loss(&p, &config, &images, &matches).map_or(f64::NAN, |(l, _)| l)
            },
            &current,
            &coords,
            DEFAULT_STEP,
        )?;
        let g = &grads[&name];
        analytic.extend(coords.iter().map(|&i| g.data()[i]));
        numeric.extend(fd);
    }
    let n = analytic.len();
    ck.record(
        "full_model",
        1,
        MODEL_TOLERANCE,
        vec![(Tensor::new([n], analytic)?, Tensor::new([n], numeric)?)],
    )
}
