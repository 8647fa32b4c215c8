//! Resampling kernels: bilinear resize (align-corners = false) and 2x2 mean pooling.

/// Per-output-coordinate source taps for bilinear interpolation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f32,
}

pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f32 };
            Tap { i0, i1, frac }
        })
        .collect()
}

pub(crate) fn resize_plane(src: &[f32], in_w: usize, ys: &[Tap], xs: &[Tap], dst: &mut [f32]) {
    let out_w = xs.len();
    for (oy, ty) in ys.iter().enumerate() {
        let r0 = &src[ty.i0 * in_w..(ty.i0 + 1) * in_w];
        let r1 = &src[ty.i1 * in_w..(ty.i1 + 1) * in_w];
        let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
        for (d, tx) in drow.iter_mut().zip(xs) {
            let top = r0[tx.i0] * (1.0 - tx.frac) + r0[tx.i1] * tx.frac;
            let bot = r1[tx.i0] * (1.0 - tx.frac) + r1[tx.i1] * tx.frac;
            *d = top * (1.0 - ty.frac) + bot * ty.frac;
        }
    }
}

pub(crate) fn resize_plane_backward(
    grad_out: &[f32],
    in_w: usize,
    ys: &[Tap],
    xs: &[Tap],
    grad_in: &mut [f32],
) {
    let out_w = xs.len();
    for (oy, ty) in ys.iter().enumerate() {
        for (ox, tx) in xs.iter().enumerate() {
            let g = grad_out[oy * out_w + ox];
            let wy0 = 1.0 - ty.frac;
            let wx0 = 1.0 - tx.frac;
            grad_in[ty.i0 * in_w + tx.i0] += g * wy0 * wx0;
            grad_in[ty.i0 * in_w + tx.i1] += g * wy0 * tx.frac;
            grad_in[ty.i1 * in_w + tx.i0] += g * ty.frac * wx0;
            grad_in[ty.i1 * in_w + tx.i1] += g * ty.frac * tx.frac;
        }
    }
}

/// Output extent of a 2x2 pool; odd extents replicate the last row/column.
pub(crate) fn pooled_len(len: usize) -> usize {
    len.div_ceil(2)
}

pub(crate) fn pool_plane(src: &[f32], h: usize, w: usize, dst: &mut [f32]) {
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    for oy in 0..oh {
        let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
        for ox in 0..ow {
            let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
            dst[oy * ow + ox] =
                0.25 * (src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1]);
        }
    }
}

pub(crate) fn pool_plane_backward(grad_out: &[f32], h: usize, w: usize, grad_in: &mut [f32]) {
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    for oy in 0..oh {
        let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
        for ox in 0..ow {
            let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
            let g = 0.25 * grad_out[oy * ow + ox];
            grad_in[y0 * w + x0] += g;
            grad_in[y0 * w + x1] += g;
            grad_in[y1 * w + x0] += g;
            grad_in[y1 * w + x1] += g;
        }
    }
}
