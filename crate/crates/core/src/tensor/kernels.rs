// Raw kernels over row-major slices. Shapes are validated by the caller.
// Reductions accumulate in f64; the matmul/conv inner products stay in the
// element type so the f32 path vectorizes.

use super::Element;

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv = *cv + s * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], k: usize, m: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == E::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv = *cv + s * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    const LANES: usize = 8;
    let mut acc = [E::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        for l in 0..LANES {
            let i = c * LANES + l;
            acc[l] = acc[l] + a[i] * b[i];
        }
    }
    let mut s = acc.iter().fold(E::zero(), |s, &v| s + v);
    for i in chunks * LANES..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

pub fn transpose<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 3×3, stride-1, zero-pad-1 convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

// cols[(ci*9 + ky*3 + kx), y*w + x] = img[ci, y+ky-1, x+kx-1]
fn im2col<E: Element>(img: &[E], c_in: usize, h: usize, w: usize, cols: &mut [E]) {
    let plane = h * w;
    for ci in 0..c_in {
        let src = &img[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        dst[x] = if sx < 0 || sx >= w as isize { E::zero() } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(cols: &[E], c_in: usize, h: usize, w: usize, img: &mut [E]) {
    let plane = h * w;
    for ci in 0..c_in {
        let dst = &mut img[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            let d = &mut dst[sy as usize * w + sx as usize];
                            *d = *d + row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// `y[b,co] = Σ_ci w[co,ci] ⋆ x[b,ci]`
pub fn conv2d<E: Element>(x: &[E], wt: &[E], d: ConvDims) -> Vec<E> {
    let plane = d.plane();
    let kdim = d.c_in * 9;
    let mut cols = vec![E::zero(); kdim * plane];
    let mut out = Vec::with_capacity(d.batch * d.c_out * plane);
    for b in 0..d.batch {
        im2col(&x[b * d.c_in * plane..(b + 1) * d.c_in * plane], d.c_in, d.h, d.w, &mut cols);
        out.extend(matmul_nn(wt, &cols, d.c_out, kdim, plane));
    }
    out
}

/// Adjoint of [`conv2d`] in its input: `gx = convᵀ(gy; w)`.
pub fn conv2d_bwd_input<E: Element>(gy: &[E], wt: &[E], d: ConvDims) -> Vec<E> {
    let plane = d.plane();
    let kdim = d.c_in * 9;
    let mut out = vec![E::zero(); d.batch * d.c_in * plane];
    for b in 0..d.batch {
        let gyb = &gy[b * d.c_out * plane..(b + 1) * d.c_out * plane];
        let dcols = matmul_tn(wt, gyb, d.c_out, kdim, plane);
        col2im(&dcols, d.c_in, d.h, d.w, &mut out[b * d.c_in * plane..(b + 1) * d.c_in * plane]);
    }
    out
}

/// Adjoint of [`conv2d`] in its weights: `gw = Σ_b gy[b] · im2col(x[b])ᵀ`.
pub fn conv2d_bwd_weight<E: Element>(x: &[E], gy: &[E], d: ConvDims) -> Vec<E> {
    let plane = d.plane();
    let kdim = d.c_in * 9;
    let mut cols = vec![E::zero(); kdim * plane];
    let mut out = vec![E::zero(); d.c_out * kdim];
    for b in 0..d.batch {
        im2col(&x[b * d.c_in * plane..(b + 1) * d.c_in * plane], d.c_in, d.h, d.w, &mut cols);
        let gyb = &gy[b * d.c_out * plane..(b + 1) * d.c_out * plane];
        let part = matmul_nt(gyb, &cols, d.c_out, plane, kdim);
        for (o, p) in out.iter_mut().zip(part) {
            *o = *o + p;
        }
    }
    out
}

/// 2×2 stride-2 mean pooling over `planes` planes of `h×w`.
pub fn avgpool2<E: Element>(x: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter);
            }
        }
    }
    out
}

/// Adjoint of [`avgpool2`]; `h, w` are the input (pre-pool) extents.
pub fn avgpool2_bwd<E: Element>(g: &[E], planes: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64_lossy(0.25);
    let mut out = vec![E::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[p * oh * ow + y * ow + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    out
}

/// `out[n, c, rest] = b[c]`
pub fn broadcast_axis1<E: Element>(b: &[E], shape: &[usize]) -> Vec<E> {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(shape[0] * c * inner);
    for _ in 0..shape[0] {
        for &v in b.iter().take(c) {
            out.extend(std::iter::repeat_n(v, inner));
        }
    }
    out
}

/// `out[c] = Σ_{n, rest} x[n, c, rest]`
pub fn sum_axis1<E: Element>(x: &[E], shape: &[usize]) -> Vec<E> {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut acc = vec![0f64; c];
    for n in 0..shape[0] {
        for (ch, a) in acc.iter_mut().enumerate() {
            let base = (n * c + ch) * inner;
            *a += x[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    acc.into_iter().map(E::from_f64_lossy).collect()
}

pub fn softmax_rows<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
        out.extend(row.iter().map(|v| E::from_f64_lossy((v.as_f64() - m).exp() / z)));
    }
    out
}

pub fn log_softmax_rows<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| E::from_f64_lossy(v.as_f64() - lse)));
    }
    out
}

/// Each element replaced by the sum of its row.
pub fn row_sum_broadcast<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let s: f64 = x[r * cols..(r + 1) * cols].iter().map(|v| v.as_f64()).sum();
        out.extend(std::iter::repeat_n(E::from_f64_lossy(s), cols));
    }
    out
}

/// Mean over rows of `-Σ_k y_k · log softmax(z)_k`.
pub fn softmax_cross_entropy<E: Element>(z: &[E], y: &[E], rows: usize, cols: usize) -> f64 {
    let logp = log_softmax_rows(z, rows, cols);
    let total: f64 = logp.iter().zip(y).map(|(l, t)| -l.as_f64() * t.as_f64()).sum();
    total / rows as f64
}

/// Each element replaced by the mean of its contiguous plane.
pub fn plane_mean_broadcast<E: Element>(x: &[E], plane: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(plane) {
        let m = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        out.extend(std::iter::repeat_n(E::from_f64_lossy(m), plane));
    }
    out
}

pub fn sum<E: Element>(x: &[E]) -> f64 {
    x.iter().map(|v| v.as_f64()).sum()
}

pub fn sum_sq<E: Element>(x: &[E]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.batch * d.c_out * d.h * d.w];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let mut s = 0.0;
                        for ci in 0..d.c_in {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                        continue;
                                    }
                                    s += w[((co * d.c_in + ci) * 3 + ky) * 3 + kx]
                                        * x[((b * d.c_in + ci) * d.h + sy as usize) * d.w + sx as usize];
                                }
                            }
                        }
                        out[((b * d.c_out + co) * d.h + y) * d.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * k).sin() * 3.0).round() / 2.0).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let d = ConvDims { batch: 2, c_in: 3, c_out: 4, h: 5, w: 6 };
        let x = ramp(2 * 3 * 30, 0.7);
        let w = ramp(4 * 3 * 9, 1.3);
        assert_eq!(conv2d(&x, &w, d), naive_conv(&x, &w, d));
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), g> = <x, bwd_input(g, w)> = <w, bwd_weight(x, g)>
        let d = ConvDims { batch: 2, c_in: 2, c_out: 3, h: 4, w: 4 };
        let x = ramp(2 * 2 * 16, 0.31);
        let w = ramp(3 * 2 * 9, 0.57);
        let g = ramp(2 * 3 * 16, 0.91);
        let ip = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = ip(&conv2d(&x, &w, d), &g);
        assert!((lhs - ip(&x, &conv2d_bwd_input(&g, &w, d))).abs() < 1e-9);
        assert!((lhs - ip(&w, &conv2d_bwd_weight(&x, &g, d))).abs() < 1e-9);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = ramp(6, 0.4); // 2x3
        let b = ramp(12, 0.9); // 3x4
        let c = matmul_nn(&a, &b, 2, 3, 4);
        assert_eq!(matmul_tn(&transpose(&a, 2, 3), &b, 3, 2, 4), c);
        assert_eq!(matmul_nt(&a, &transpose(&b, 3, 4), 2, 3, 4), c);
    }

    #[test]
    fn pooling_adjoint() {
        let x = ramp(2 * 16, 0.3);
        let g = ramp(2 * 4, 1.1);
        let ip = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = ip(&avgpool2(&x, 2, 4, 4), &g);
        assert!((lhs - ip(&x, &avgpool2_bwd(&g, 2, 4, 4))).abs() < 1e-12);
    }
}
