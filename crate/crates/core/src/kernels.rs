// Scalar kernels behind the tape ops. All loops run in a fixed order so that
// results are bit-reproducible for a given input.

use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }
    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
    fn patch(&self) -> usize {
        self.in_channels * 9
    }
}

/// out[n, o] = sum_i x[n, i] * w[i, o] + b[o]
pub(crate) fn dense_forward<T: Element>(x: &[T], w: &[T], b: &[T], rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * out);
    for n in 0..rows {
        let mut acc = b.to_vec();
        let xr = &x[n * inp..(n + 1) * inp];
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &w[i * out..(i + 1) * out];
            for (a, &wv) in acc.iter_mut().zip(wr) {
                *a = *a + xv * wv;
            }
        }
        y.extend_from_slice(&acc);
    }
    y
}

pub(crate) struct DenseGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

pub(crate) fn dense_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    want_x: bool,
) -> DenseGrads<T> {
    let mut gw = vec![T::zero(); inp * out];
    let mut gb = vec![T::zero(); out];
    for n in 0..rows {
        let g = &gy[n * out..(n + 1) * out];
        for (acc, &gv) in gb.iter_mut().zip(g) {
            *acc = *acc + gv;
        }
        for i in 0..inp {
            let xv = x[n * inp + i];
            let row = &mut gw[i * out..(i + 1) * out];
            for (acc, &gv) in row.iter_mut().zip(g) {
                *acc = *acc + xv * gv;
            }
        }
    }
    let gx = want_x.then(|| {
        let mut gx = vec![T::zero(); rows * inp];
        for n in 0..rows {
            let g = &gy[n * out..(n + 1) * out];
            for i in 0..inp {
                let wr = &w[i * out..(i + 1) * out];
                let mut s = T::zero();
                for (&wv, &gv) in wr.iter().zip(g) {
                    s = s + wv * gv;
                }
                gx[n * inp + i] = s;
            }
        }
        gx
    });
    DenseGrads { x: gx, w: gw, b: gb }
}

/// Patch matrix laid out [patch][position] for one sample.
fn im2col<T: Element>(x: &[T], geom: &ConvGeom, col: &mut [T]) {
    let (h, w, s) = (geom.height, geom.width, geom.stride);
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let p = oh * ow;
    for c in 0..geom.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - 1;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - 1;
                        row[oy * ow + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(col: &[T], geom: &ConvGeom, gx: &mut [T]) {
    let (h, w, s) = (geom.height, geom.width, geom.stride);
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let p = oh * ow;
    for c in 0..geom.in_channels {
        let plane = &mut gx[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < w {
                            let dst = &mut plane[iy as usize * w + ix as usize];
                            *dst = *dst + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 cross-correlation with zero padding 1.
pub(crate) fn conv_forward<T: Element>(x: &[T], k: &[T], b: &[T], geom: &ConvGeom) -> Vec<T> {
    let p = geom.positions();
    let kk = geom.patch();
    let in_sz = geom.in_channels * geom.height * geom.width;
    let mut col = vec![T::zero(); kk * p];
    let mut out = vec![T::zero(); geom.batch * geom.filters * p];
    for n in 0..geom.batch {
        im2col(&x[n * in_sz..(n + 1) * in_sz], geom, &mut col);
        let on = &mut out[n * geom.filters * p..(n + 1) * geom.filters * p];
        for f in 0..geom.filters {
            let row = &mut on[f * p..(f + 1) * p];
            row.fill(b[f]);
            for j in 0..kk {
                let wv = k[f * kk + j];
                let src = &col[j * p..(j + 1) * p];
                for (o, &cv) in row.iter_mut().zip(src) {
                    *o = *o + wv * cv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub k: Vec<T>,
    pub b: Vec<T>,
}

pub(crate) fn conv_backward<T: Element>(x: &[T], k: &[T], gy: &[T], geom: &ConvGeom, want_x: bool) -> ConvGrads<T> {
    let p = geom.positions();
    let kk = geom.patch();
    let in_sz = geom.in_channels * geom.height * geom.width;
    let mut col = vec![T::zero(); kk * p];
    let mut col_t = vec![T::zero(); p * kk];
    let mut dcol = vec![T::zero(); kk * p];
    let mut gk = vec![T::zero(); geom.filters * kk];
    let mut gb = vec![T::zero(); geom.filters];
    let mut gx = want_x.then(|| vec![T::zero(); geom.batch * in_sz]);
    for n in 0..geom.batch {
        im2col(&x[n * in_sz..(n + 1) * in_sz], geom, &mut col);
        for j in 0..kk {
            for q in 0..p {
                col_t[q * kk + j] = col[j * p + q];
            }
        }
        let gn = &gy[n * geom.filters * p..(n + 1) * geom.filters * p];
        for f in 0..geom.filters {
            let g = &gn[f * p..(f + 1) * p];
            let gkf = &mut gk[f * kk..(f + 1) * kk];
            let mut bs = T::zero();
            for (q, &gv) in g.iter().enumerate() {
                bs = bs + gv;
                let src = &col_t[q * kk..(q + 1) * kk];
                for (a, &cv) in gkf.iter_mut().zip(src) {
                    *a = *a + gv * cv;
                }
            }
            gb[f] = gb[f] + bs;
        }
        if let Some(gx) = gx.as_mut() {
            dcol.fill(T::zero());
            for f in 0..geom.filters {
                let g = &gn[f * p..(f + 1) * p];
                for j in 0..kk {
                    let wv = k[f * kk + j];
                    let dst = &mut dcol[j * p..(j + 1) * p];
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + wv * gv;
                    }
                }
            }
            col2im_add(&dcol, geom, &mut gx[n * in_sz..(n + 1) * in_sz]);
        }
    }
    ConvGrads { x: gx, k: gk, b: gb }
}

/// 2x2 max pool, stride 2, floor semantics. Returns values and the flat input
/// index each output was taken from (first maximum wins ties).
pub(crate) fn maxpool_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Returns (mean loss, softmax probabilities).
pub(crate) fn softmax_ce_forward<T: Element>(logits: &[T], labels: &[u16], classes: usize) -> (T, Vec<T>) {
    let rows = labels.len();
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - max).exp();
        }
        let log_denom = denom.ln();
        for &v in row {
            probs.push((v - max).exp() / denom);
        }
        total = total + (log_denom - (row[label as usize] - max));
    }
    (total / T::of(rows as f64), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window definition of the padded 3x3 cross-correlation.
    fn conv_reference(x: &[f64], k: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.batch * g.filters * oh * ow];
        for n in 0..g.batch {
            for f in 0..g.filters {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[f];
                        for c in 0..g.in_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * g.stride + ky) as isize - 1;
                                    let ix = (ox * g.stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy as usize >= g.height || ix as usize >= g.width {
                                        continue;
                                    }
                                    s += k[((f * g.in_channels + c) * 3 + ky) * 3 + kx]
                                        * x[((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize];
                                }
                            }
                        }
                        out[((n * g.filters + f) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_sliding_window_reference() {
        let geom = ConvGeom { batch: 2, in_channels: 3, height: 5, width: 4, filters: 2, stride: 2 };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let k: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
        let b = vec![0.25, -1.0];
        assert_eq!(conv_forward(&x, &k, &b, &geom), conv_reference(&x, &k, &b, &geom));
    }

    #[test]
    fn maxpool_picks_window_max() {
        let (v, a) = maxpool_forward(&[1.0f32, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(v, vec![4.0]);
        assert_eq!(a, vec![3]);
    }
}
