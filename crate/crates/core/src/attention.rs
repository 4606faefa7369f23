//! Pixel-level self-attention over one feature map.
//!
//! With the map flattened to `x ∈ R^{C×N}`:
//! `q = Wqᵀx`, `k = Wkᵀx`, `v = Wvᵀx`, `ā = softmax_rows(qᵀk)` and the
//! output is `x + (ā vᵀ)ᵀ`. There is no temperature on the scores and no
//! normalization or nonlinearity inside the unit, so zeroing `Wv` turns it
//! into the identity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grad::GradPair;
use crate::layers::{dims4, xavier_uniform};
use crate::tensor::{gemm, softmax_in_place, Mat, Tensor};

/// Largest number of spatial locations a unit will materialize an N×N map for.
pub const ATTENTION_CAPACITY: usize = 4096;

/// Width of the query/key projection for a `channels`-wide map.
pub fn reduced_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

pub fn check_capacity(locations: usize) -> Result<()> {
    if locations > ATTENTION_CAPACITY {
        return Err(Error::Capacity {
            locations,
            limit: ATTENTION_CAPACITY,
        });
    }
    Ok(())
}

/// Projections for one pyramid scale: `wq`, `wk` are `[C, C′]`, `wv` is `[C, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor) -> Result<Self> {
        let c = wv.shape().first().copied().unwrap_or(0);
        let cr = reduced_channels(c);
        if wv.shape() != [c, c] {
            return Err(Error::shape("AttentionParams", wv.shape(), &[c, c]));
        }
        for w in [&wq, &wk] {
            if w.shape() != [c, cr] {
                return Err(Error::shape("AttentionParams", w.shape(), &[c, cr]));
            }
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn init(channels: usize, rng: &mut impl rand::Rng) -> Self {
        let cr = reduced_channels(channels);
        Self {
            wq: xavier_uniform([channels, cr], channels, cr, rng),
            wk: xavier_uniform([channels, cr], channels, cr, rng),
            wv: xavier_uniform([channels, channels], channels, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.wv.dim(0)
    }

    fn reduced(&self) -> usize {
        self.wq.dim(1)
    }
}

/// Row-normalized `N×N` relation matrix of one image at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub scores: Tensor,
    pub scale: usize,
    pub height: usize,
    pub width: usize,
}

impl AttentionMap {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// Row `location` of the map, shaped `[height, width]`.
    pub fn query_row(&self, location: usize) -> Result<Tensor> {
        if location >= self.locations() {
            return Err(Error::contract(format!(
                "query location {location} out of range for {}x{} map",
                self.height, self.width
            )));
        }
        Tensor::new([self.height, self.width], self.scores.row(location).to_vec())
    }
}

/// See [`AttentionMap::query_row`].
pub fn extract_query_row(map: &AttentionMap, location: usize) -> Result<Tensor> {
    map.query_row(location)
}

struct Internals {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
}

fn validate(x: &Tensor, p: &AttentionParams, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = dims4(x, op)?;
    if c != p.channels() {
        return Err(Error::shape(op, x.shape(), p.wv.shape()));
    }
    check_capacity(h * w)?;
    Ok((b, c, h, w))
}

fn internals(img: &[f64], p: &AttentionParams, c: usize, n: usize, with_values: bool) -> Internals {
    let cr = p.reduced();
    let x = Mat::new(img, c, n);
    let mut q = vec![0.0; cr * n];
    let mut k = vec![0.0; cr * n];
    gemm(Mat::new(p.wq.data(), c, cr).t(), x, &mut q, false);
    gemm(Mat::new(p.wk.data(), c, cr).t(), x, &mut k, false);
    let mut attn = vec![0.0; n * n];
    gemm(Mat::new(&q, cr, n).t(), Mat::new(&k, cr, n), &mut attn, false);
    for row in attn.chunks_mut(n) {
        softmax_in_place(row);
    }
    let mut v = Vec::new();
    if with_values {
        v = vec![0.0; c * n];
        gemm(Mat::new(p.wv.data(), c, c).t(), x, &mut v, false);
    }
    Internals { q, k, v, attn }
}

/// The normalized score matrix ā for every image in the batch.
pub fn attention_scores(x: &Tensor, p: &AttentionParams) -> Result<Vec<AttentionMap>> {
    let (b, c, h, w) = validate(x, p, "attention_scores")?;
    let n = h * w;
    (0..b)
        .map(|i| {
            let img = &x.data()[i * c * n..(i + 1) * c * n];
            let it = internals(img, p, c, n, false);
            Ok(AttentionMap {
                scores: Tensor::new([n, n], it.attn)?,
                scale: 0,
                height: h,
                width: w,
            })
        })
        .collect()
}

/// Residual attention output (same shape as `x`) and the maps that produced it.
pub fn attention_forward(x: &Tensor, p: &AttentionParams) -> Result<(Tensor, Vec<AttentionMap>)> {
    let (b, c, h, w) = validate(x, p, "attention_forward")?;
    let n = h * w;
    let mut out = x.clone();
    let mut maps = Vec::with_capacity(b);
    for i in 0..b {
        let range = i * c * n..(i + 1) * c * n;
        let it = internals(&x.data()[range.clone()], p, c, n, true);
        // out += v·āᵀ
        gemm(
            Mat::new(&it.v, c, n),
            Mat::new(&it.attn, n, n).t(),
            &mut out.data_mut()[range],
            true,
        );
        maps.push(AttentionMap {
            scores: Tensor::new([n, n], it.attn)?,
            scale: 0,
            height: h,
            width: w,
        });
    }
    Ok((out, maps))
}

/// Gradients w.r.t. the input and `wq`, `wk`, `wv`.
pub fn attention_backward(x: &Tensor, p: &AttentionParams, grad_out: &Tensor) -> Result<GradPair> {
    let (b, c, h, w) = validate(x, p, "attention_backward")?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("attention_backward", grad_out.shape(), x.shape()));
    }
    let n = h * w;
    let cr = p.reduced();
    let mut grad_x = grad_out.clone();
    let mut grad_wq = Tensor::zeros(p.wq.shape());
    let mut grad_wk = Tensor::zeros(p.wk.shape());
    let mut grad_wv = Tensor::zeros(p.wv.shape());

    let mut grad_v = vec![0.0; c * n];
    let mut grad_attn = vec![0.0; n * n];
    let mut grad_q = vec![0.0; cr * n];
    let mut grad_k = vec![0.0; cr * n];

    for i in 0..b {
        let range = i * c * n..(i + 1) * c * n;
        let img = &x.data()[range.clone()];
        let g = Mat::new(&grad_out.data()[range.clone()], c, n);
        let it = internals(img, p, c, n, true);
        let attn = Mat::new(&it.attn, n, n);

        // out = x + v·āᵀ
        gemm(g, attn, &mut grad_v, false);
        gemm(g.t(), Mat::new(&it.v, c, n), &mut grad_attn, false);

        // softmax rows: da = ā ⊙ (dā − Σ_j ā·dā)
        for (a_row, g_row) in it.attn.chunks(n).zip(grad_attn.chunks_mut(n)) {
            let dot: f64 = a_row.iter().zip(g_row.iter()).map(|(a, g)| a * g).sum();
            for (gv, &av) in g_row.iter_mut().zip(a_row) {
                *gv = av * (*gv - dot);
            }
        }
        let da = Mat::new(&grad_attn, n, n);

        // a = qᵀk
        gemm(Mat::new(&it.k, cr, n), da.t(), &mut grad_q, false);
        gemm(Mat::new(&it.q, cr, n), da, &mut grad_k, false);

        let xm = Mat::new(img, c, n);
        gemm(xm, Mat::new(&grad_q, cr, n).t(), grad_wq.data_mut(), true);
        gemm(xm, Mat::new(&grad_k, cr, n).t(), grad_wk.data_mut(), true);
        gemm(xm, Mat::new(&grad_v, c, n).t(), grad_wv.data_mut(), true);

        let gx = &mut grad_x.data_mut()[range];
        gemm(Mat::new(p.wq.data(), c, cr), Mat::new(&grad_q, cr, n), gx, true);
        gemm(Mat::new(p.wk.data(), c, cr), Mat::new(&grad_k, cr, n), gx, true);
        gemm(Mat::new(p.wv.data(), c, c), Mat::new(&grad_v, c, n), gx, true);
    }

    Ok(GradPair {
        input: grad_x,
        params: BTreeMap::from([
            ("wq".to_string(), grad_wq),
            ("wk".to_string(), grad_wk),
            ("wv".to_string(), grad_wv),
        ]),
    })
}
