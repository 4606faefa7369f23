use super::dims4;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-pixel-center sampling along one axis: returns the two neighbouring
/// source indices and the blend weight of the second one.
pub fn source_coordinate(dst: usize, in_size: usize, out_size: usize) -> (usize, usize, f64) {
    let scale = in_size as f64 / out_size as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_size - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_size - 1);
    (lo, hi, src - lo as f64)
}

fn check(x: &Tensor, out_h: usize, out_w: usize, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let dims = dims4(x, op)?;
    let (_, _, h, w) = dims;
    if out_h < h || out_w < w {
        return Err(Error::contract(format!(
            "{op}: target {out_h}x{out_w} is smaller than input {h}x{w}"
        )));
    }
    Ok(dims)
}

pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = check(x, out_h, out_w, "bilinear_upsample")?;
    let rows: Vec<_> = (0..out_h).map(|y| source_coordinate(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| source_coordinate(x, w, out_w)).collect();
    let mut out = Tensor::zeros([b, c, out_h, out_w]);
    let (src, dst) = (x.data(), out.data_mut());
    for plane in 0..b * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bottom = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                d[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Scatters `grad_out` back onto the input grid with the forward blend weights.
pub fn bilinear_upsample_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, out_h, out_w) = dims4(grad_out, "bilinear_upsample_backward")?;
    let (h, w) = match input_shape {
        &[ib, ic, h, w] if ib == b && ic == c => (h, w),
        other => return Err(Error::shape("bilinear_upsample_backward", other, grad_out.shape())),
    };
    check(&Tensor::zeros(input_shape), out_h, out_w, "bilinear_upsample_backward")?;
    let rows: Vec<_> = (0..out_h).map(|y| source_coordinate(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| source_coordinate(x, w, out_w)).collect();
    let mut grad = Tensor::zeros(input_shape);
    let (src, dst) = (grad_out.data(), grad.data_mut());
    for plane in 0..b * c {
        let g = &src[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let v = g[oy * out_w + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Ok(grad)
}
