//! Raw loops shared by the forward and backward passes.

use super::Real;

/// `out[m,n] = a[m,k] · b[k,n]`, overwriting `out`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    out.iter_mut().for_each(|x| *x = F::zero());
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`.
pub(crate) fn matmul_a_bt_acc<F: Real>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`.
pub(crate) fn matmul_at_b_acc<F: Real>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a same-padded, stride-1 convolution over one image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Unfolds one `[c_in, h, w]` image into `[c_in·kh·kw, h·w]` columns.
    pub fn im2col<F: Real>(&self, image: &[F], cols: &mut [F]) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let hw = self.pixels();
        for c in 0..self.c_in {
            let plane = &image[c * hw..(c + 1) * hw];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..self.h {
                        let sy = y as isize + ki as isize - ph as isize;
                        let dst_row = &mut dst[y * self.w..(y + 1) * self.w];
                        if sy < 0 || sy >= self.h as isize {
                            dst_row.iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        let src_row = &plane[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for (x, v) in dst_row.iter_mut().enumerate() {
                            let sx = x as isize + kj as isize - pw as isize;
                            *v = if sx < 0 || sx >= self.w as isize {
                                F::zero()
                            } else {
                                src_row[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto an image.
    pub fn col2im_acc<F: Real>(&self, cols: &[F], image: &mut [F]) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let hw = self.pixels();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..self.h {
                        let sy = y as isize + ki as isize - ph as isize;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        let base = c * hw + sy as usize * self.w;
                        for x in 0..self.w {
                            let sx = x as isize + kj as isize - pw as isize;
                            if sx >= 0 && sx < self.w as isize {
                                image[base + sx as usize] += src[y * self.w + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution of `[n, c_in, h, w]` input with a
/// `[c_out, c_in, kh, kw]` kernel and `[c_out]` bias.
pub fn conv2d_forward<F: Real>(
    input: &[F],
    kernel: &[F],
    bias: &[F],
    n: usize,
    geom_dims: [usize; 6],
) -> Vec<F> {
    let [c_in, c_out, h, w, kh, kw] = geom_dims;
    let geom = ConvGeom {
        c_in,
        c_out,
        h,
        w,
        kh,
        kw,
    };
    conv2d_with(&geom, input, kernel, bias, n)
}

pub(crate) fn conv2d_with<F: Real>(
    geom: &ConvGeom,
    input: &[F],
    kernel: &[F],
    bias: &[F],
    n: usize,
) -> Vec<F> {
    let hw = geom.pixels();
    let mut cols = vec![F::zero(); geom.patch() * hw];
    let mut out = vec![F::zero(); n * geom.c_out * hw];
    for b in 0..n {
        geom.im2col(&input[b * geom.c_in * hw..(b + 1) * geom.c_in * hw], &mut cols);
        let dst = &mut out[b * geom.c_out * hw..(b + 1) * geom.c_out * hw];
        matmul(kernel, &cols, geom.c_out, geom.patch(), hw, dst);
        for (o, plane) in dst.chunks_mut(hw).enumerate() {
            let bo = bias[o];
            plane.iter_mut().for_each(|v| *v += bo);
        }
    }
    out
}

/// Output length of one pooled axis; axes shorter than the window pass through.
pub(crate) fn pooled_len(len: usize, window: usize) -> (usize, usize) {
    if len >= window {
        (len / window, window)
    } else {
        (len, 1)
    }
}

/// Max-pools the last two axes of a `[planes, h, w]` buffer.
///
/// Returns the pooled values and, per output cell, the flat input index
/// of the first maximum in its window.
pub fn maxpool2d_forward<F: Real>(
    input: &[F],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<F>, Vec<usize>, usize, usize) {
    let (oh, wh) = pooled_len(h, window);
    let (ow, ww) = pooled_len(w, window);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = base + (y * wh) * w + x * ww;
                let mut best = input[best_idx];
                for dy in 0..wh {
                    for dx in 0..ww {
                        let idx = base + (y * wh + dy) * w + x * ww + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax, oh, ow)
}
