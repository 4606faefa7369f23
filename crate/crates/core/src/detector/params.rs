use std::collections::BTreeMap;

use super::config::DetectorConfig;
use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::layers::{BatchNormParams, ConvParams};
use crate::tensor::Tensor;

/// `3×3 stride-2 conv → BN → ReLU`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

/// Per-scale prediction convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub loc: ConvParams,
    pub conf: ConvParams,
}

/// Gradients keyed by the names [`ModelParams::visit`] reports.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Every learnable tensor of the detector plus the BN running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<ConvBlock>,
    pub fusion: Option<FusionParams>,
    /// One unit per scale, empty when attention is disabled.
    pub attention: Vec<AttentionParams>,
    pub heads: Vec<Head>,
}

impl ModelParams {
    pub fn init(config: &DetectorConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut in_c = 3;
        let widths = config
            .stem_channels
            .iter()
            .copied()
            .chain(config.scales.iter().map(|s| s.channels));
        for out_c in widths {
            blocks.push(ConvBlock {
                conv: ConvParams::init(in_c, out_c, 3, 2, 1, rng)?,
                bn: BatchNormParams::new(out_c),
            });
            in_c = out_c;
        }
        let fusion = config.fusion.then(|| {
            let widths: Vec<usize> = config.scales[..config.fusion_inputs()].iter().map(|s| s.channels).collect();
            FusionParams::init(&widths, rng)
        });
        let attention = if config.attention {
            config.scales.iter().map(|s| AttentionParams::init(s.channels, rng)).collect()
        } else {
            Vec::new()
        };
        let heads = config
            .scales
            .iter()
            .map(|s| {
                let bpc = s.boxes_per_cell();
                Ok(Head {
                    loc: ConvParams::init(s.channels, 4 * bpc, 3, 1, 1, rng)?,
                    conf: ConvParams::init(s.channels, (config.num_classes + 1) * bpc, 3, 1, 1, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            fusion,
            attention,
            heads,
        })
    }

    /// Learnable tensors in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("backbone.{i}.conv.weight"), &b.conv.weight);
            f(&format!("backbone.{i}.conv.bias"), &b.conv.bias);
            f(&format!("backbone.{i}.bn.gamma"), &b.bn.gamma);
            f(&format!("backbone.{i}.bn.beta"), &b.bn.beta);
        }
        if let Some(p) = &self.fusion {
            f("fusion.weight", &p.weight);
            f("fusion.bias", &p.bias);
        }
        for (s, a) in self.attention.iter().enumerate() {
            f(&format!("attention.{s}.wq"), &a.wq);
            f(&format!("attention.{s}.wk"), &a.wk);
            f(&format!("attention.{s}.wv"), &a.wv);
        }
        for (s, h) in self.heads.iter().enumerate() {
            f(&format!("head.{s}.loc.weight"), &h.loc.weight);
            f(&format!("head.{s}.loc.bias"), &h.loc.bias);
            f(&format!("head.{s}.conf.weight"), &h.conf.weight);
            f(&format!("head.{s}.conf.bias"), &h.conf.bias);
        }
    }

    /// Mutable twin of [`visit`](Self::visit), same names and order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("backbone.{i}.conv.weight"), &mut b.conv.weight);
            f(&format!("backbone.{i}.conv.bias"), &mut b.conv.bias);
            f(&format!("backbone.{i}.bn.gamma"), &mut b.bn.gamma);
            f(&format!("backbone.{i}.bn.beta"), &mut b.bn.beta);
        }
        if let Some(p) = &mut self.fusion {
            f("fusion.weight", &mut p.weight);
            f("fusion.bias", &mut p.bias);
        }
        for (s, a) in self.attention.iter_mut().enumerate() {
            f(&format!("attention.{s}.wq"), &mut a.wq);
            f(&format!("attention.{s}.wk"), &mut a.wk);
            f(&format!("attention.{s}.wv"), &mut a.wv);
        }
        for (s, h) in self.heads.iter_mut().enumerate() {
            f(&format!("head.{s}.loc.weight"), &mut h.loc.weight);
            f(&format!("head.{s}.loc.bias"), &mut h.loc.bias);
            f(&format!("head.{s}.conf.weight"), &mut h.conf.weight);
            f(&format!("head.{s}.conf.bias"), &mut h.conf.bias);
        }
    }

    /// Non-learnable state (BN running statistics).
    pub fn visit_buffers_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("backbone.{i}.bn.running_mean"), &mut b.bn.running_mean);
            f(&format!("backbone.{i}.bn.running_var"), &mut b.bn.running_var);
        }
    }

    /// Learnable tensors followed by buffers, as `(name, tensor)` pairs.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(|name, t| out.push((name.to_string(), t.clone())));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.bn.running_mean"), b.bn.running_mean.clone()));
            out.push((format!("backbone.{i}.bn.running_var"), b.bn.running_var.clone()));
        }
        out
    }

    /// Rebuilds parameters for `config` from named tensors. Every expected
    /// name must be present with the expected shape; extras are rejected.
    pub fn from_named(config: &DetectorConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = Self::init(config, &mut rng)?;
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        let mut fill = |name: &str, slot: &mut Tensor| -> Result<()> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("ModelParams::from_named", t.shape(), slot.shape()));
            }
            *slot = t;
            Ok(())
        };
        let mut status = Ok(());
        params.visit_mut(|name, slot| {
            if status.is_ok() {
                status = fill(name, slot);
            }
        });
        params.visit_buffers_mut(|name, slot| {
            if status.is_ok() {
                status = fill(name, slot);
            }
        });
        status?;
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(params)
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    /// `self += scale·direction` for every learnable tensor named in `direction`.
    pub fn axpy(&mut self, scale: f64, direction: &ParamGrads) {
        self.visit_mut(|name, t| {
            if let Some(d) = direction.get(name) {
                for (v, dv) in t.data_mut().iter_mut().zip(d.data()) {
                    *v += scale * dv;
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_shapes_follow_config() {
        let config = DetectorConfig::toy();
        let p = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let named = p.named_tensors();
        let mut names: Vec<_> = named.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), named.len());
        assert_eq!(p.blocks.len(), 5);
        assert_eq!(p.heads[0].loc.out_channels(), 16);
        assert_eq!(p.heads[0].conf.out_channels(), 16);
        assert_eq!(p.fusion.as_ref().unwrap().weight.shape(), &[32, 32 + 48 + 64]);
        assert_eq!(p.attention[2].wq.shape(), &[64, 8]);
    }

    #[test]
    fn init_follows_glorot_bounds() {
        let config = DetectorConfig::toy();
        let p = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = &p.blocks[1].conv.weight;
        let bound = (6.0 / ((8 * 9 + 16 * 9) as f64)).sqrt();
        assert!(w.max_abs() <= bound);
        assert_eq!(p.blocks[1].conv.bias.max_abs(), 0.0);
        assert!(p.blocks[0].bn.gamma.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn named_round_trip() {
        let config = DetectorConfig::tiny();
        let p = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let q = ModelParams::from_named(&config, p.named_tensors()).unwrap();
        assert_eq!(p, q);

        let mut missing = p.named_tensors();
        missing.pop();
        assert!(ModelParams::from_named(&config, missing).is_err());
        let mut extra = p.named_tensors();
        extra.push(("bogus".into(), Tensor::zeros([1])));
        assert!(ModelParams::from_named(&config, extra).is_err());
    }
}
