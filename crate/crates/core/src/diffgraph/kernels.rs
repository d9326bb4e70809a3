//! Numeric kernels behind the graph primitives. Everything here works on
//! flat slices; shape bookkeeping lives in `graph.rs`.

use rayon::prelude::*;

use super::gemm::gemm;

/// Geometry of a 2D or 3D convolution with "same"-style padding `k / 2`.
/// 2D convolutions are expressed with a unit depth axis and `kd == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        let output = [0, 1, 2].map(|a| (input[a] + 2 * pad[a] - kernel[a]) / stride[a] + 1);
        ConvGeom {
            batch,
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        }
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the unfolded patch matrix.
    pub fn k_rows(&self) -> usize {
        self.cin * self.kvol()
    }

    fn is_pointwise(&self) -> bool {
        self.kvol() == 1 && self.stride == [1, 1, 1]
    }
}

/// Unfolds one sample `(cin, D, H, W)` into a `(cin*kvol, out_len)` matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ol = g.out_len();
    let mut col = vec![0.0; g.k_rows() * ol];
    for c in 0..g.cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut col[row * ol..(row + 1) * ol];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let src = (iz as usize * ih + iy as usize) * iw;
                            let out = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    dst[out + ox] = xc[src + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `(cin, D, H, W)`.
fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ol = g.out_len();
    let mut x = vec![0.0; g.cin * g.in_len()];
    for c in 0..g.cin {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let src = &col[row * ol..(row + 1) * ol];
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let dst = (iz as usize * ih + iy as usize) * iw;
                            let o = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    xc[dst + ix as usize] += src[o + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let in_stride = g.cin * g.in_len();
    let ol = g.out_len();
    let per_sample: Vec<Vec<f64>> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * in_stride..(n + 1) * in_stride];
            let mut y = vec![0.0; g.cout * ol];
            if let Some(b) = b {
                for (co, chunk) in y.chunks_mut(ol).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            if g.is_pointwise() {
                gemm(g.cout, g.cin, ol, w, false, xs, false, 1.0, &mut y);
            } else {
                let col = im2col(xs, g);
                gemm(g.cout, g.k_rows(), ol, w, false, &col, false, 1.0, &mut y);
            }
            y
        })
        .collect();
    per_sample.concat()
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// Per-sample `(dx, dw, db)`.
type SampleGrads = (Option<Vec<f64>>, Vec<f64>, Vec<f64>);

pub fn conv_backward(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom, need_dx: bool) -> ConvGrads {
    let in_stride = g.cin * g.in_len();
    let ol = g.out_len();
    let kr = g.k_rows();
    let per_sample: Vec<SampleGrads> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * in_stride..(n + 1) * in_stride];
            let dys = &dy[n * g.cout * ol..(n + 1) * g.cout * ol];
            let db: Vec<f64> = dys.chunks(ol).map(|c| c.iter().sum()).collect();
            let mut dw = vec![0.0; g.cout * kr];
            let dx = if g.is_pointwise() {
                gemm(g.cout, ol, kr, dys, false, xs, true, 0.0, &mut dw);
                need_dx.then(|| {
                    let mut dx = vec![0.0; in_stride];
                    gemm(kr, g.cout, ol, w, true, dys, false, 0.0, &mut dx);
                    dx
                })
            } else {
                let col = im2col(xs, g);
                gemm(g.cout, ol, kr, dys, false, &col, true, 0.0, &mut dw);
                need_dx.then(|| {
                    let mut dcol = vec![0.0; kr * ol];
                    gemm(kr, g.cout, ol, w, true, dys, false, 0.0, &mut dcol);
                    col2im(&dcol, g)
                })
            };
            (dx, dw, db)
        })
        .collect();

    let mut dw = vec![0.0; g.cout * kr];
    let mut db = vec![0.0; g.cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * in_stride));
    for (dxn, dwn, dbn) in per_sample {
        dw.iter_mut().zip(&dwn).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&dbn).for_each(|(a, b)| *a += b);
        if let (Some(dx), Some(dxn)) = (dx.as_mut(), dxn) {
            dx.extend_from_slice(&dxn);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Nearest-neighbour upsampling of `(planes, D, H, W)` by per-axis factors.
pub fn upsample_forward(x: &[f64], planes: usize, input: [usize; 3], f: [usize; 3]) -> Vec<f64> {
    let [id, ih, iw] = input;
    let [od, oh, ow] = [id * f[0], ih * f[1], iw * f[2]];
    let mut y = vec![0.0; planes * od * oh * ow];
    for p in 0..planes {
        let xp = &x[p * id * ih * iw..];
        let yp = &mut y[p * od * oh * ow..(p + 1) * od * oh * ow];
        for z in 0..od {
            for r in 0..oh {
                let src = ((z / f[0]) * ih + r / f[1]) * iw;
                let dst = (z * oh + r) * ow;
                for c in 0..ow {
                    yp[dst + c] = xp[src + c / f[2]];
                }
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &[f64], planes: usize, input: [usize; 3], f: [usize; 3]) -> Vec<f64> {
    let [id, ih, iw] = input;
    let [od, oh, ow] = [id * f[0], ih * f[1], iw * f[2]];
    let mut dx = vec![0.0; planes * id * ih * iw];
    for p in 0..planes {
        let dyp = &dy[p * od * oh * ow..(p + 1) * od * oh * ow];
        let dxp = &mut dx[p * id * ih * iw..(p + 1) * id * ih * iw];
        for z in 0..od {
            for r in 0..oh {
                let dst = ((z / f[0]) * ih + r / f[1]) * iw;
                let src = (z * oh + r) * ow;
                for c in 0..ow {
                    dxp[dst + c / f[2]] += dyp[src + c];
                }
            }
        }
    }
    dx
}

pub struct GroupNormOut {
    pub y: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each `(sample, group)` block to zero mean and unit variance.
/// `block` is the contiguous element count of one group.
pub fn group_norm_forward(x: &[f64], block: usize, eps: f64) -> GroupNormOut {
    let nblocks = x.len() / block;
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; nblocks];
    for b in 0..nblocks {
        let xs = &x[b * block..(b + 1) * block];
        let mean = xs.iter().sum::<f64>() / block as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[b] = r;
        for (o, v) in y[b * block..(b + 1) * block].iter_mut().zip(xs) {
            *o = (v - mean) * r;
        }
    }
    GroupNormOut { y, rstd }
}

pub fn group_norm_backward(y: &[f64], rstd: &[f64], dy: &[f64], block: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    let m = block as f64;
    for (b, r) in rstd.iter().enumerate() {
        let range = b * block..(b + 1) * block;
        let (ys, dys) = (&y[range.clone()], &dy[range.clone()]);
        let sum_dy: f64 = dys.iter().sum();
        let sum_dy_y: f64 = dys.iter().zip(ys).map(|(a, b)| a * b).sum();
        for ((o, d), yh) in dx[range].iter_mut().zip(dys).zip(ys) {
            *o = r / m * (m * d - sum_dy - yh * sum_dy_y);
        }
    }
    dx
}

/// Multi-head softmax attention over `(C, S)` token matrices per sample.
/// Returns the output and the attention probabilities `(batch, heads, S, S)`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    channels: usize,
    tokens: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = channels / heads;
    let alpha = 1.0 / (dh as f64).sqrt();
    let ss = tokens * tokens;
    let work: Vec<(usize, usize)> = (0..batch).flat_map(|n| (0..heads).map(move |h| (n, h))).collect();
    let results: Vec<(Vec<f64>, Vec<f64>)> = work
        .par_iter()
        .map(|&(n, h)| {
            let off = (n * channels + h * dh) * tokens;
            let (qh, kh, vh) = (
                &q[off..off + dh * tokens],
                &k[off..off + dh * tokens],
                &v[off..off + dh * tokens],
            );
            let mut p = vec![0.0; ss];
            gemm(tokens, dh, tokens, qh, true, kh, false, 0.0, &mut p);
            for row in p.chunks_mut(tokens) {
                let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * alpha));
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s * alpha - max).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            let mut o = vec![0.0; dh * tokens];
            gemm(dh, tokens, tokens, vh, false, &p, true, 0.0, &mut o);
            (o, p)
        })
        .collect();

    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::with_capacity(batch * heads * ss);
    for (&(n, h), (o, p)) in work.iter().zip(results) {
        let off = (n * channels + h * dh) * tokens;
        out[off..off + dh * tokens].copy_from_slice(&o);
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    batch: usize,
    channels: usize,
    tokens: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = channels / heads;
    let alpha = 1.0 / (dh as f64).sqrt();
    let ss = tokens * tokens;
    let work: Vec<(usize, usize)> = (0..batch).flat_map(|n| (0..heads).map(move |h| (n, h))).collect();
    let results: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = work
        .par_iter()
        .enumerate()
        .map(|(idx, &(n, h))| {
            let off = (n * channels + h * dh) * tokens;
            let r = off..off + dh * tokens;
            let (qh, kh, vh, doh) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &dout[r]);
            let p = &probs[idx * ss..(idx + 1) * ss];

            let mut dv = vec![0.0; dh * tokens];
            gemm(dh, tokens, tokens, doh, false, p, false, 0.0, &mut dv);
            let mut ds = vec![0.0; ss];
            gemm(tokens, dh, tokens, doh, true, vh, false, 0.0, &mut ds);
            for (drow, prow) in ds.chunks_mut(tokens).zip(p.chunks(tokens)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, pv) in drow.iter_mut().zip(prow) {
                    *d = alpha * pv * (*d - dot);
                }
            }
            let mut dq = vec![0.0; dh * tokens];
            gemm(dh, tokens, tokens, kh, false, &ds, true, 0.0, &mut dq);
            let mut dk = vec![0.0; dh * tokens];
            gemm(dh, tokens, tokens, qh, false, &ds, false, 0.0, &mut dk);
            (dq, dk, dv)
        })
        .collect();

    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    for (&(n, h), (a, b, c)) in work.iter().zip(results) {
        let off = (n * channels + h * dh) * tokens;
        dq[off..off + dh * tokens].copy_from_slice(&a);
        dk[off..off + dh * tokens].copy_from_slice(&b);
        dv[off..off + dh * tokens].copy_from_slice(&c);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution used as an oracle for the unfolded path.
    fn conv_naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [id, ih, iw] = g.input;
        let [kd, kh, kw] = g.kernel;
        let [od, oh, ow] = g.output;
        let mut y = vec![0.0; g.batch * g.cout * g.out_len()];
        for n in 0..g.batch {
            for co in 0..g.cout {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.cin {
                                for a in 0..kd {
                                    for b in 0..kh {
                                        for c in 0..kw {
                                            let iz = (oz * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let iy = (oy * g.stride[1] + b) as isize - g.pad[1] as isize;
                                            let ix = (ox * g.stride[2] + c) as isize - g.pad[2] as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= id as isize
                                                || iy >= ih as isize
                                                || ix >= iw as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((n * g.cin + ci) * id + iz as usize) * ih + iy as usize) * iw
                                                + ix as usize;
                                            let wi = (((co * g.cin + ci) * kd + a) * kh + b) * kw + c;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            y[((n * g.cout + co) * od + oz) * oh * ow + oy * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn unfolded_conv_matches_direct_sum() {
        for (input, kernel, stride) in [
            ([3, 5, 4], [3, 3, 3], [1, 1, 1]),
            ([4, 6, 6], [3, 3, 3], [2, 2, 2]),
            ([1, 5, 7], [1, 3, 3], [1, 1, 1]),
            ([1, 6, 6], [1, 3, 3], [1, 2, 2]),
            ([2, 3, 3], [1, 1, 1], [1, 1, 1]),
        ] {
            let g = ConvGeom::new(2, 3, 2, input, kernel, stride);
            let x: Vec<f64> = (0..2 * 3 * g.in_len())
                .map(|i| ((i * 7919) % 13) as f64 - 6.0)
                .collect();
            let w: Vec<f64> = (0..2 * 3 * g.kvol())
                .map(|i| ((i * 31) % 7) as f64 * 0.25 - 0.7)
                .collect();
            let got = conv_forward(&x, &w, None, &g);
            let want = conv_naive(&x, &w, &g);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(1, 2, 1, [3, 4, 5], [3, 3, 3], [2, 2, 2]);
        let x: Vec<f64> = (0..2 * g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.k_rows() * g.out_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
