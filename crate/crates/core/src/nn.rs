//! Dense feature-map kernels with hand-written reverse-mode derivatives.
//!
//! Everything works on `[C][H][W]` row-major `f64` buffers. Convolutions are
//! 3x3 with zero padding and unit stride.

/// A stack of `c` feature planes of size `h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(a: &Fmap, b: &Fmap) -> Fmap {
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Fmap {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Splits channels at `first`, the inverse of [`Fmap::concat`].
    pub fn split(self, first: usize) -> (Fmap, Fmap) {
        let n = self.plane_len();
        let mut data = self.data;
        let tail = data.split_off(first * n);
        (
            Fmap {
                c: first,
                h: self.h,
                w: self.w,
                data,
            },
            Fmap {
                c: self.c - first,
                h: self.h,
                w: self.w,
                data: tail,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Fmap) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Softplus shifted so that it vanishes at the origin.
#[inline]
pub fn shifted_softplus(x: f64) -> f64 {
    softplus(x) - std::f64::consts::LN_2
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[x] += k0 * inp[x-1] + k1 * inp[x] + k2 * inp[x+1]` with zero padding.
#[inline]
fn row_corr3(out: &mut [f64], inp: &[f64], k: [f64; 3]) {
    let w = out.len();
    if w == 1 {
        out[0] += k[1] * inp[0];
        return;
    }
    {
        let o = &mut out[1..w - 1];
        let a = &inp[0..w - 2];
        let b = &inp[1..w - 1];
        let c = &inp[2..w];
        for x in 0..o.len() {
            o[x] += k[0] * a[x] + k[1] * b[x] + k[2] * c[x];
        }
    }
    out[0] += k[1] * inp[0] + k[2] * inp[1];
    out[w - 1] += k[0] * inp[w - 2] + k[1] * inp[w - 1];
}

/// `[sum g[x] inp[x-1], sum g[x] inp[x], sum g[x] inp[x+1]]` with zero padding.
#[inline]
fn row_dot3(g: &[f64], inp: &[f64]) -> [f64; 3] {
    let w = g.len();
    let mut mid = 0.0;
    for x in 0..w {
        mid += g[x] * inp[x];
    }
    if w == 1 {
        return [0.0, mid, 0.0];
    }
    let mut left = 0.0;
    let mut right = 0.0;
    let (g_hi, g_lo) = (&g[1..], &g[..w - 1]);
    let (i_lo, i_hi) = (&inp[..w - 1], &inp[1..]);
    for x in 0..w - 1 {
        left += g_hi[x] * i_lo[x];
        right += g_lo[x] * i_hi[x];
    }
    [left, mid, right]
}

#[inline]
fn row_range(h: usize, dy: isize) -> std::ops::Range<usize> {
    let lo = if dy < 0 { 1 } else { 0 };
    let hi = if dy > 0 { h.saturating_sub(1) } else { h };
    lo..hi
}

/// 3x3 same-padded convolution. `weight` is `[cout][cin][3][3]`.
pub fn conv3x3(input: &Fmap, weight: &[f64], bias: &[f64], cout: usize) -> Fmap {
    let (cin, h, w) = (input.c, input.h, input.w);
    debug_assert_eq!(weight.len(), cout * cin * 9);
    debug_assert_eq!(bias.len(), cout);
    let mut out = Fmap::zeros(cout, h, w);
    for o in 0..cout {
        let plane = out.plane_mut(o);
        plane.fill(bias[o]);
        for c in 0..cin {
            let src = input.plane(c);
            let k = &weight[(o * cin + c) * 9..(o * cin + c + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let taps = [k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]];
                for y in row_range(h, dy) {
                    let sy = (y as isize + dy) as usize;
                    row_corr3(
                        &mut plane[y * w..(y + 1) * w],
                        &src[sy * w..(sy + 1) * w],
                        taps,
                    );
                }
            }
        }
    }
    out
}

/// Reverse pass of [`conv3x3`]: accumulates weight and bias gradients and,
/// when requested, returns the input gradient.
pub fn conv3x3_backward(
    input: &Fmap,
    weight: &[f64],
    grad_out: &Fmap,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Fmap> {
    let (cin, h, w) = (input.c, input.h, input.w);
    let cout = grad_out.c;
    let mut grad_in = want_input_grad.then(|| Fmap::zeros(cin, h, w));
    for o in 0..cout {
        let g = grad_out.plane(o);
        grad_bias[o] += g.iter().sum::<f64>();
        for c in 0..cin {
            let src = input.plane(c);
            let base = (o * cin + c) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let mut acc = [0.0; 3];
                for y in row_range(h, dy) {
                    let sy = (y as isize + dy) as usize;
                    let d = row_dot3(&g[y * w..(y + 1) * w], &src[sy * w..(sy + 1) * w]);
                    acc[0] += d[0];
                    acc[1] += d[1];
                    acc[2] += d[2];
                }
                grad_weight[base + ky * 3] += acc[0];
                grad_weight[base + ky * 3 + 1] += acc[1];
                grad_weight[base + ky * 3 + 2] += acc[2];
            }
            if let Some(gi) = grad_in.as_mut() {
                let k = &weight[base..base + 9];
                let dst = gi.plane_mut(c);
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    // input row sy receives output row y = sy - dy with the kernel mirrored
                    let taps = [k[ky * 3 + 2], k[ky * 3 + 1], k[ky * 3]];
                    for y in row_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        row_corr3(&mut dst[sy * w..(sy + 1) * w], &g[y * w..(y + 1) * w], taps);
                    }
                }
            }
        }
    }
    grad_in
}

/// Nearest-neighbour downsampling by 2 (keeps even rows and columns).
pub fn down2(input: &Fmap) -> Fmap {
    let (h, w) = (input.h / 2, input.w / 2);
    let mut out = Fmap::zeros(input.c, h, w);
    for c in 0..input.c {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(2 * y) * input.w + 2 * x];
            }
        }
    }
    out
}

pub fn down2_backward(grad_out: &Fmap, h: usize, w: usize) -> Fmap {
    let mut gi = Fmap::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        let g = grad_out.plane(c);
        let dst = gi.plane_mut(c);
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                dst[(2 * y) * w + 2 * x] = g[y * grad_out.w + x];
            }
        }
    }
    gi
}

/// Nearest-neighbour upsampling by 2.
pub fn up2(input: &Fmap) -> Fmap {
    let (h, w) = (input.h * 2, input.w * 2);
    let mut out = Fmap::zeros(input.c, h, w);
    for c in 0..input.c {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            let srow = &src[(y / 2) * input.w..(y / 2 + 1) * input.w];
            let drow = &mut dst[y * w..(y + 1) * w];
            for x in 0..w {
                drow[x] = srow[x / 2];
            }
        }
    }
    out
}

pub fn up2_backward(grad_out: &Fmap) -> Fmap {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let mut gi = Fmap::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        let g = grad_out.plane(c);
        let dst = gi.plane_mut(c);
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                dst[(y / 2) * w + x / 2] += g[y * grad_out.w + x];
            }
        }
    }
    gi
}

/// `y = W x + b` with `W` stored `[rows][cols]`.
pub fn dense(weight: &[f64], bias: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    let rows = weight.len() / cols;
    (0..rows)
        .map(|r| {
            let dot: f64 = weight[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
            dot + bias.map_or(0.0, |b| b[r])
        })
        .collect()
}

/// Accumulates `dW += g x^T`, `db += g` and returns `W^T g`.
pub fn dense_backward(
    weight: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: Option<&mut [f64]>,
) -> Vec<f64> {
    let cols = x.len();
    let mut gx = vec![0.0; cols];
    for (r, &g) in grad_out.iter().enumerate() {
        let wrow = &weight[r * cols..(r + 1) * cols];
        let gwrow = &mut grad_weight[r * cols..(r + 1) * cols];
        for k in 0..cols {
            gwrow[k] += g * x[k];
            gx[k] += g * wrow[k];
        }
    }
    if let Some(gb) = grad_bias {
        for (b, g) in gb.iter_mut().zip(grad_out) {
            *b += g;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Fmap, weight: &[f64], bias: &[f64], cout: usize) -> Fmap {
        let mut out = Fmap::zeros(cout, input.h, input.w);
        for o in 0..cout {
            for y in 0..input.h as isize {
                for x in 0..input.w as isize {
                    let mut acc = bias[o];
                    for c in 0..input.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy < 0 || sx < 0 || sy >= input.h as isize || sx >= input.w as isize {
                                    continue;
                                }
                                acc += weight[((o * input.c + c) * 3 + ky as usize) * 3 + kx as usize]
                                    * input.data[(c * input.h + sy as usize) * input.w + sx as usize];
                            }
                        }
                    }
                    out.data[(o * input.h + y as usize) * input.w + x as usize] = acc;
                }
            }
        }
        out
    }

    fn filled(c: usize, h: usize, w: usize, seed: u64) -> Fmap {
        let mut f = Fmap::zeros(c, h, w);
        let mut s = seed;
        for v in f.data.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
        }
        f
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(h, w) in &[(5, 7), (1, 1), (2, 3), (4, 1)] {
            let input = filled(3, h, w, 1);
            let weight = filled(2 * 3, 3, 3, 2).data;
            let bias = vec![0.3, -0.1];
            let fast = conv3x3(&input, &weight, &bias, 2);
            let slow = naive_conv(&input, &weight, &bias, 2);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12, "{h}x{w}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> + bias term, checked through the input gradient.
        let input = filled(3, 6, 5, 3);
        let weight = filled(4 * 3, 3, 3, 4).data;
        let bias = vec![0.0; 4];
        let g = filled(4, 6, 5, 5);
        let out = conv3x3(&input, &weight, &bias, 4);
        let lhs: f64 = out.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; 4];
        let gi = conv3x3_backward(&input, &weight, &g, &mut gw, &mut gb, true).unwrap();
        let rhs: f64 = input.data.iter().zip(&gi.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // linear in weights too: <conv_W(x), g> = <W, dW>
        let rhs_w: f64 = weight.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-12);
    }

    #[test]
    fn resampling_adjoints() {
        let x = filled(2, 4, 6, 7);
        let g = filled(2, 8, 12, 8);
        let lhs: f64 = up2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&up2_backward(&g).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let big = filled(2, 8, 12, 9);
        let gs = filled(2, 4, 6, 10);
        let lhs: f64 = down2(&big).data.iter().zip(&gs.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = big
            .data
            .iter()
            .zip(&down2_backward(&gs, 8, 12).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn activations() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(shifted_softplus(0.0), 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        let h = 1e-6;
        for &x in &[-3.0, -0.2, 0.0, 1.5] {
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
