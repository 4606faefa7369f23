//! Backbone → fusion (shallowest scale) → attention (every scale) → heads.

use super::config::DetectorConfig;
use super::params::{ModelParams, ParamGrads};
use crate::attention::{attention_backward, attention_forward, AttentionMap};
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_backward};
use crate::layers::{
    batch_norm, batch_norm_backward, conv2d, conv2d_backward, dims4, relu_backward, BatchNormCache,
};
use crate::tensor::Tensor;

/// Intermediate values the backward pass consumes.
#[derive(Clone, Debug)]
struct Cache {
    /// `acts[0]` is the image batch, `acts[i + 1]` the output of block `i`.
    acts: Vec<Tensor>,
    bn: Vec<BatchNormCache>,
    /// Inputs to the attention units (fused map for scale 0 when fusing).
    pre_attention: Vec<Tensor>,
    /// Inputs to the prediction heads.
    head_inputs: Vec<Tensor>,
}

/// Result of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Per image, `[total_anchors, 4]` offsets.
    pub loc: Vec<Tensor>,
    /// Per image, `[total_anchors, num_classes + 1]` logits.
    pub conf: Vec<Tensor>,
    /// `attention[s][b]`: map of scale `s` for image `b` (empty without attention).
    pub attention: Vec<Vec<AttentionMap>>,
    cache: Cache,
}

impl ForwardPass {
    pub fn batch_size(&self) -> usize {
        self.loc.len()
    }
}

/// Runs the detector on a `[batch, 3, size, size]` tensor.
///
/// In training mode BN normalizes with batch statistics; call
/// [`update_running_stats`] afterwards to fold them into the running
/// estimates.
pub fn forward(images: &Tensor, params: &ModelParams, config: &DetectorConfig, training: bool) -> Result<ForwardPass> {
    let (batch, c, h, w) = dims4(images, "forward")?;
    if c != 3 || h != config.image_size || w != config.image_size {
        return Err(Error::shape(
            "forward",
            images.shape(),
            &[batch, 3, config.image_size, config.image_size],
        ));
    }
    check_params(params, config)?;

    let mut acts = vec![images.clone()];
    let mut bn_caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let z = conv2d(acts.last().expect("non-empty"), &block.conv)?;
        let (y, cache) = batch_norm(&z, &block.bn, training)?;
        acts.push(y.relu());
        bn_caches.push(cache);
    }
    let stem = config.stem_channels.len();
    let feats: Vec<&Tensor> = (0..config.scales.len()).map(|s| &acts[stem + s + 1]).collect();

    let mut pre_attention: Vec<Tensor> = feats.iter().map(|t| (*t).clone()).collect();
    if let Some(fp) = &params.fusion {
        pre_attention[0] = fuse(&feats[..config.fusion_inputs()], fp)?;
    }

    let mut attention = Vec::new();
    let head_inputs = if config.attention {
        let mut outs = Vec::with_capacity(pre_attention.len());
        for (s, (x, ap)) in pre_attention.iter().zip(&params.attention).enumerate() {
            let (y, mut maps) = attention_forward(x, ap)?;
            for m in &mut maps {
                m.scale = s;
            }
            attention.push(maps);
            outs.push(y);
        }
        outs
    } else {
        pre_attention.clone()
    };

    let mut loc = vec![Vec::new(); batch];
    let mut conf = vec![Vec::new(); batch];
    for (x, head) in head_inputs.iter().zip(&params.heads) {
        append_rows(&conv2d(x, &head.loc)?, 4, &mut loc);
        append_rows(&conv2d(x, &head.conf)?, config.num_classes + 1, &mut conf);
    }
    let to_tensors = |rows: Vec<Vec<f64>>, width: usize| -> Result<Vec<Tensor>> {
        rows.into_iter()
            .map(|r| Tensor::new([r.len() / width, width], r))
            .collect()
    };

    Ok(ForwardPass {
        loc: to_tensors(loc, 4)?,
        conf: to_tensors(conf, config.num_classes + 1)?,
        attention,
        cache: Cache {
            acts,
            bn: bn_caches,
            pre_attention,
            head_inputs,
        },
    })
}

/// Applies the batch statistics seen by a training-mode pass to the BN layers.
pub fn update_running_stats(params: &mut ModelParams, pass: &ForwardPass) {
    for (block, cache) in params.blocks.iter_mut().zip(&pass.cache.bn) {
        block.bn.update_running(cache);
    }
}

/// Gradients of a loss whose partial derivatives w.r.t. the per-image loc
/// and conf rows are `grad_loc` / `grad_conf`.
pub fn backward(
    pass: &ForwardPass,
    params: &ModelParams,
    config: &DetectorConfig,
    grad_loc: &[Tensor],
    grad_conf: &[Tensor],
) -> Result<ParamGrads> {
    let cache = &pass.cache;
    let batch = pass.batch_size();
    if grad_loc.len() != batch || grad_conf.len() != batch {
        return Err(Error::contract("one loc and conf gradient per image is required"));
    }
    for (g, p) in grad_loc.iter().zip(&pass.loc).chain(grad_conf.iter().zip(&pass.conf)) {
        if g.shape() != p.shape() {
            return Err(Error::shape("backward", g.shape(), p.shape()));
        }
    }

    let mut grads = ParamGrads::new();
    let mut row_offset = 0;
    let mut grad_pre = Vec::with_capacity(config.scales.len());
    for (s, (x, head)) in cache.head_inputs.iter().zip(&params.heads).enumerate() {
        let (_, _, h, w) = dims4(x, "backward")?;
        let rows = h * w * config.scales[s].boxes_per_cell();
        let gl = gather_rows(grad_loc, row_offset, rows, [batch, head.loc.out_channels(), h, w])?;
        let gc = gather_rows(grad_conf, row_offset, rows, [batch, head.conf.out_channels(), h, w])?;
        row_offset += rows;

        let lg = conv2d_backward(x, &head.loc, &gl)?;
        let cg = conv2d_backward(x, &head.conf, &gc)?;
        let mut gx = lg.input;
        gx.add_assign(&cg.input)?;
        for (prefix, pair) in [("loc", lg.params), ("conf", cg.params)] {
            for (name, t) in pair {
                grads.insert(format!("head.{s}.{prefix}.{name}"), t);
            }
        }

        if config.attention {
            let ag = attention_backward(&cache.pre_attention[s], &params.attention[s], &gx)?;
            for (name, t) in ag.params {
                grads.insert(format!("attention.{s}.{name}"), t);
            }
            gx = ag.input;
        }
        grad_pre.push(gx);
    }

    let stem = config.stem_channels.len();
    let mut grad_feats = grad_pre;
    if let Some(fp) = &params.fusion {
        let k = config.fusion_inputs();
        let inputs: Vec<&Tensor> = (0..k).map(|s| &cache.acts[stem + s + 1]).collect();
        let fg = fuse_backward(&inputs, fp, &grad_feats[0])?;
        for (name, t) in fg.params {
            grads.insert(format!("fusion.{name}"), t);
        }
        let mut parts = fg.inputs.into_iter();
        grad_feats[0] = parts.next().expect("fusion has a first input");
        for (s, g) in parts.enumerate() {
            grad_feats[s + 1].add_assign(&g)?;
        }
    }

    // Walk the backbone from the deepest block, merging in each scale's gradient.
    let mut upstream: Option<Tensor> = None;
    for i in (0..params.blocks.len()).rev() {
        let mut g = match (i.checked_sub(stem), upstream.take()) {
            (Some(s), Some(mut u)) => {
                u.add_assign(&grad_feats[s])?;
                u
            }
            (Some(s), None) => grad_feats[s].clone(),
            (None, Some(u)) => u,
            (None, None) => unreachable!("stem blocks always have a successor"),
        };
        g = relu_backward(&cache.acts[i + 1], &g)?;
        let block = &params.blocks[i];
        let bg = batch_norm_backward(&cache.bn[i], &block.bn, &g)?;
        let cg = conv2d_backward(&cache.acts[i], &block.conv, &bg.input)?;
        for (name, t) in bg.params {
            grads.insert(format!("backbone.{i}.bn.{name}"), t);
        }
        for (name, t) in cg.params {
            grads.insert(format!("backbone.{i}.conv.{name}"), t);
        }
        upstream = Some(cg.input);
    }
    Ok(grads)
}

fn check_params(params: &ModelParams, config: &DetectorConfig) -> Result<()> {
    let expected_blocks = config.stem_channels.len() + config.scales.len();
    let ok = params.blocks.len() == expected_blocks
        && params.heads.len() == config.scales.len()
        && params.fusion.is_some() == config.fusion
        && params.attention.len() == if config.attention { config.scales.len() } else { 0 };
    if !ok {
        return Err(Error::Config("parameters do not match the detector config".into()));
    }
    Ok(())
}

/// Head map `[B, bpc·width, h, w]` → rows ordered by (y, x, box), appended per image.
fn append_rows(map: &Tensor, width: usize, rows: &mut [Vec<f64>]) {
    let (b, ch, h, w) = (map.dim(0), map.dim(1), map.dim(2), map.dim(3));
    let bpc = ch / width;
    let plane = h * w;
    for (n, out) in rows.iter_mut().enumerate().take(b) {
        let base = n * ch * plane;
        out.reserve(plane * ch);
        for pos in 0..plane {
            for a in 0..bpc {
                for d in 0..width {
                    out.push(map.data()[base + (a * width + d) * plane + pos]);
                }
            }
        }
    }
}

/// Inverse of [`append_rows`] for gradients: `rows` rows starting at `offset`.
fn gather_rows(per_image: &[Tensor], offset: usize, rows: usize, shape: [usize; 4]) -> Result<Tensor> {
    let [b, ch, h, w] = shape;
    let plane = h * w;
    let width = per_image[0].dim(1);
    let bpc = ch / width;
    debug_assert_eq!(rows, plane * bpc);
    let mut out = Tensor::zeros(shape);
    for (n, g) in per_image.iter().enumerate().take(b) {
        if g.dim(0) < offset + rows {
            return Err(Error::shape("gather_rows", g.shape(), &[offset + rows, width]));
        }
        let base = n * ch * plane;
        for pos in 0..plane {
            for a in 0..bpc {
                let src = g.row(offset + pos * bpc + a);
                for d in 0..width {
                    out.data_mut()[base + (a * width + d) * plane + pos] = src[d];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn row_layout_round_trip() {
        let map = Tensor::new([2, 6, 2, 3], (0..72).map(|v| v as f64).collect()).unwrap();
        let mut rows = vec![Vec::new(); 2];
        append_rows(&map, 3, &mut rows);
        // image 0, position 1, box 1, coordinate 2 → channel 5
        assert_eq!(rows[0][(2 + 1) * 3 + 2], map.at(&[0, 5, 0, 1]));
        let per: Vec<Tensor> = rows.into_iter().map(|r| Tensor::new([12, 3], r).unwrap()).collect();
        assert_eq!(gather_rows(&per, 0, 12, [2, 6, 2, 3]).unwrap(), map);
    }

    #[test]
    fn output_rows_match_anchor_count() {
        for config in [DetectorConfig::toy(), DetectorConfig::tiny()] {
            let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let images = Tensor::full([2, 3, config.image_size, config.image_size], 0.1);
            let pass = forward(&images, &params, &config, true).unwrap();
            assert_eq!(pass.loc.len(), 2);
            assert_eq!(pass.loc[0].shape(), &[config.total_anchors(), 4]);
            assert_eq!(pass.conf[1].shape(), &[config.total_anchors(), config.num_classes + 1]);
            assert_eq!(pass.attention.len(), config.scales.len());
        }
    }

    #[test]
    fn wrong_image_size() {
        let config = DetectorConfig::tiny();
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(forward(&Tensor::zeros([1, 3, 8, 8]), &params, &config, false).is_err());
        let other = config.clone().with_variant(super::super::Variant::Baseline);
        assert!(forward(&Tensor::zeros([1, 3, 16, 16]), &params, &other, false).is_err());
    }
}
