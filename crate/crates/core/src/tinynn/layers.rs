//! Per-sample kernels on `[C, D, H, W]` buffers (width fastest).

use super::scalar::{gemm, Scalar};

pub type Dims = [usize; 3];

pub fn volume(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Output extent of a `pool`-wide max pool: floor division, never below 1.
pub fn pooled_len(len: usize, pool: usize) -> usize {
    (len / pool).max(1)
}

pub fn pooled_dims(d: Dims, pool: usize) -> Dims {
    [
        pooled_len(d[0], pool),
        pooled_len(d[1], pool),
        pooled_len(d[2], pool),
    ]
}

/// Geometry of a stride-1, same-padded cubic convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dims: Dims,
}

impl ConvShape {
    pub fn taps(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Rows of the in-plane unfolding: one per `(ci, ky, kx)`.
    fn plane_taps(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Unfold every input plane over `(ky, kx)` into `col`
    /// (`plane_taps x D*H*W`); depth taps become column shifts of whole planes.
    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        let [d, h, w] = self.dims;
        let (k, p, hw, n) = (self.k, self.pad(), h * w, d * h * w);
        let mut row = 0;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let dst_row = &mut col[row * n..(row + 1) * n];
                    row += 1;
                    let x0 = p.saturating_sub(kx);
                    let x1 = (w + p).saturating_sub(kx).min(w);
                    for z in 0..d {
                        let plane = (ci * d + z) * hw;
                        for y in 0..h {
                            let out = &mut dst_row[z * hw + y * w..z * hw + (y + 1) * w];
                            let yi = y as isize + ky as isize - p as isize;
                            if yi < 0 || yi >= h as isize || x0 >= x1 {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = plane + yi as usize * w + x0 + kx - p;
                            out[..x0].fill(T::zero());
                            out[x0..x1].copy_from_slice(&input[src..src + (x1 - x0)]);
                            out[x1..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add the inverse of [`ConvShape::im2col`] into `dinput`.
    fn col2im<T: Scalar>(&self, col: &[T], dinput: &mut [T]) {
        let [d, h, w] = self.dims;
        let (k, p, hw, n) = (self.k, self.pad(), h * w, d * h * w);
        let mut row = 0;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let src_row = &col[row * n..(row + 1) * n];
                    row += 1;
                    let x0 = p.saturating_sub(kx);
                    let x1 = (w + p).saturating_sub(kx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..d {
                        let plane = (ci * d + z) * hw;
                        for y in 0..h {
                            let yi = y as isize + ky as isize - p as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let dst = plane + yi as usize * w + x0 + kx - p;
                            let dst = &mut dinput[dst..dst + (x1 - x0)];
                            let src = &src_row[z * hw + y * w + x0..z * hw + y * w + x1];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o = *o + v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output planes `[lo, hi)` that see input plane `z + kz - pad`.
    fn depth_range(&self, kz: usize) -> (usize, usize) {
        let (d, p) = (self.dims[0], self.pad());
        (p.saturating_sub(kz), (d + p).saturating_sub(kz).min(d))
    }

    /// Weights of depth tap `kz` as a `cout x plane_taps` matrix.
    fn depth_slice<T: Scalar>(&self, weight: &[T], kz: usize) -> Vec<T> {
        let k2 = self.k * self.k;
        let mut out = Vec::with_capacity(self.cout * self.plane_taps());
        for co in 0..self.cout {
            for ci in 0..self.cin {
                let base = ((co * self.cin + ci) * self.k + kz) * k2;
                out.extend_from_slice(&weight[base..base + k2]);
            }
        }
        out
    }

    /// `output[cout, D, H, W] = conv(input) + bias`.
    pub fn forward<T: Scalar>(&self, input: &[T], weight: &[T], bias: &[T], output: &mut [T]) {
        let [d, h, w] = self.dims;
        let (hw, n) = (h * w, d * h * w);
        let (pt, p) = (self.plane_taps(), self.pad());
        debug_assert_eq!(input.len(), self.cin * n);
        debug_assert_eq!(output.len(), self.cout * n);
        for (co, chunk) in output.chunks_mut(n).enumerate() {
            chunk.fill(bias[co]);
        }
        let mut col = vec![T::zero(); pt * n];
        self.im2col(input, &mut col);
        for kz in 0..self.k {
            let (lo, hi) = self.depth_range(kz);
            if lo >= hi {
                continue;
            }
            let wk = self.depth_slice(weight, kz);
            gemm(
                self.cout,
                pt,
                (hi - lo) * hw,
                (&wk, pt, 1),
                (&col[(lo + kz - p) * hw..], n, 1),
                T::one(),
                (&mut output[lo * hw..], n, 1),
            );
        }
    }

    /// Accumulate weight and bias gradients; optionally write the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        input: &[T],
        weight: &[T],
        dout: &[T],
        dweight: &mut [T],
        dbias: &mut [T],
        dinput: Option<&mut [T]>,
    ) {
        let [d, h, w] = self.dims;
        let (hw, n) = (h * w, d * h * w);
        let (pt, p, k2) = (self.plane_taps(), self.pad(), self.k * self.k);
        for (co, chunk) in dout.chunks(n).enumerate() {
            dbias[co] = dbias[co] + chunk.iter().fold(T::zero(), |a, &v| a + v);
        }
        let mut col = vec![T::zero(); pt * n];
        self.im2col(input, &mut col);
        let mut dwk = vec![T::zero(); self.cout * pt];
        for kz in 0..self.k {
            let (lo, hi) = self.depth_range(kz);
            if lo >= hi {
                continue;
            }
            gemm(
                self.cout,
                (hi - lo) * hw,
                pt,
                (&dout[lo * hw..], n, 1),
                (&col[(lo + kz - p) * hw..], 1, n),
                T::zero(),
                (&mut dwk, pt, 1),
            );
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    let base = ((co * self.cin + ci) * self.k + kz) * k2;
                    let src = &dwk[co * pt + ci * k2..co * pt + (ci + 1) * k2];
                    for (g, &v) in dweight[base..base + k2].iter_mut().zip(src) {
                        *g = *g + v;
                    }
                }
            }
        }
        if let Some(di) = dinput {
            // reuse the unfolding buffer for its gradient
            col.fill(T::zero());
            for kz in 0..self.k {
                let (lo, hi) = self.depth_range(kz);
                if lo >= hi {
                    continue;
                }
                let wk = self.depth_slice(weight, kz);
                gemm(
                    pt,
                    self.cout,
                    (hi - lo) * hw,
                    (&wk, 1, pt),
                    (&dout[lo * hw..], n, 1),
                    T::one(),
                    (&mut col[(lo + kz - p) * hw..], n, 1),
                );
            }
            di.fill(T::zero());
            self.col2im(&col, di);
        }
    }
}

/// Half-open window of output cell `i` along an axis of length `len`.
fn pool_window(i: usize, len: usize, pool: usize) -> (usize, usize) {
    let lo = i * pool;
    (lo, (lo + pool).min(len))
}

/// Max pool of `relu(a * x + b)` per channel, fused with the batch-norm
/// affine. Returns pooled activations; `argmax` receives flat indices
/// into the unpooled channel buffer.
#[allow(clippy::too_many_arguments)]
pub fn affine_relu_maxpool<T: Scalar>(
    x: &[T],
    channels: usize,
    dims: Dims,
    pool: usize,
    scale: &[T],
    shift: &[T],
    out: &mut [T],
    argmax: &mut [u32],
) {
    let [d, h, w] = dims;
    let od = pooled_dims(dims, pool);
    let (n, on) = (volume(dims), volume(od));
    for c in 0..channels {
        let xs = &x[c * n..(c + 1) * n];
        for oz in 0..od[0] {
            let (z0, z1) = pool_window(oz, d, pool);
            for oy in 0..od[1] {
                let (y0, y1) = pool_window(oy, h, pool);
                for ox in 0..od[2] {
                    let (x0, x1) = pool_window(ox, w, pool);
                    let mut best = T::neg_infinity();
                    let mut at = 0usize;
                    for z in z0..z1 {
                        for y in y0..y1 {
                            let row = (z * h + y) * w;
                            for xi in x0..x1 {
                                let v = scale[c] * xs[row + xi] + shift[c];
                                if v > best {
                                    best = v;
                                    at = row + xi;
                                }
                            }
                        }
                    }
                    let o = c * on + (oz * od[1] + oy) * od[2] + ox;
                    out[o] = best.max(T::zero());
                    argmax[o] = at as u32;
                }
            }
        }
    }
}

/// Adaptive average pool `from` -> `to` per channel.
pub fn adaptive_avg_pool<T: Scalar>(x: &[T], channels: usize, from: Dims, to: Dims, out: &mut [T]) {
    let (n, on) = (volume(from), volume(to));
    for c in 0..channels {
        for oz in 0..to[0] {
            let (z0, z1) = adaptive_window(oz, from[0], to[0]);
            for oy in 0..to[1] {
                let (y0, y1) = adaptive_window(oy, from[1], to[1]);
                for ox in 0..to[2] {
                    let (x0, x1) = adaptive_window(ox, from[2], to[2]);
                    let mut s = T::zero();
                    for z in z0..z1 {
                        for y in y0..y1 {
                            for xi in x0..x1 {
                                s = s + x[c * n + (z * from[1] + y) * from[2] + xi];
                            }
                        }
                    }
                    let cnt = ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64;
                    out[c * on + (oz * to[1] + oy) * to[2] + ox] = s / T::of(cnt);
                }
            }
        }
    }
}

/// Gradient of [`adaptive_avg_pool`], accumulated into `dx`.
pub fn adaptive_avg_pool_backward<T: Scalar>(
    dout: &[T],
    channels: usize,
    from: Dims,
    to: Dims,
    dx: &mut [T],
) {
    let (n, on) = (volume(from), volume(to));
    for c in 0..channels {
        for oz in 0..to[0] {
            let (z0, z1) = adaptive_window(oz, from[0], to[0]);
            for oy in 0..to[1] {
                let (y0, y1) = adaptive_window(oy, from[1], to[1]);
                for ox in 0..to[2] {
                    let (x0, x1) = adaptive_window(ox, from[2], to[2]);
                    let cnt = ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64;
                    let g = dout[c * on + (oz * to[1] + oy) * to[2] + ox] / T::of(cnt);
                    for z in z0..z1 {
                        for y in y0..y1 {
                            for xi in x0..x1 {
                                let i = c * n + (z * from[1] + y) * from[2] + xi;
                                dx[i] = dx[i] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn adaptive_window(i: usize, from: usize, to: usize) -> (usize, usize) {
    let lo = i * from / to;
    let hi = ((i + 1) * from).div_ceil(to);
    (lo, hi.max(lo + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(s: &ConvShape, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
        let [d, h, w] = s.dims;
        let (k, p) = (s.k as isize, (s.k / 2) as isize);
        let mut out = vec![0.0; s.cout * d * h * w];
        for co in 0..s.cout {
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = b[co];
                        for ci in 0..s.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (zi, yi, xi) = (z + kz - p, y + ky - p, xx + kx - p);
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= d as isize
                                            || yi >= h as isize
                                            || xi >= w as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[((ci * d + zi as usize) * h + yi as usize) * w
                                            + xi as usize];
                                        let wv = wt[(((co * s.cin + ci) * s.k + kz as usize)
                                            * s.k
                                            + ky as usize)
                                            * s.k
                                            + kx as usize];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((co * d + z as usize) * h + y as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, a: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i as f64 * a).sin() * 1.7).round() / 2.0 + 0.1)
            .collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for &(k, dims) in &[
            (3, [4, 5, 6]),
            (5, [3, 4, 2]),
            (1, [2, 3, 3]),
            (3, [1, 1, 1]),
        ] {
            let s = ConvShape {
                cin: 2,
                cout: 3,
                k,
                dims,
            };
            let x = ramp(2 * volume(dims), 0.37);
            let wt = ramp(3 * s.taps(), 0.91);
            let b = vec![0.5, -0.25, 1.0];
            let mut out = vec![0.0; 3 * volume(dims)];
            s.forward(&x, &wt, &b, &mut out);
            let want = naive_conv(&s, &x, &wt, &b);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T g> and weight gradient via linearity in w
        let s = ConvShape {
            cin: 2,
            cout: 2,
            k: 3,
            dims: [3, 4, 5],
        };
        let n = volume(s.dims);
        let x = ramp(2 * n, 0.29);
        let wt = ramp(2 * s.taps(), 0.53);
        let g = ramp(2 * n, 0.71);
        let zero_b = vec![0.0; 2];
        let mut y = vec![0.0; 2 * n];
        s.forward(&x, &wt, &zero_b, &mut y);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 2];
        let mut dx = vec![0.0; x.len()];
        s.backward(&x, &wt, &g, &mut dw, &mut db, Some(&mut dx));
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let via_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0));
        let gsum: Vec<f64> = g.chunks(n).map(|c| c.iter().sum()).collect();
        assert_eq!(db, gsum);
    }

    #[test]
    fn pooled_traces() {
        let trace = |mut d: usize| {
            let mut t = vec![d];
            for _ in 0..5 {
                d = pooled_len(d, 2);
                t.push(d);
            }
            t
        };
        assert_eq!(trace(51), vec![51, 25, 12, 6, 3, 1]);
        assert_eq!(trace(27), vec![27, 13, 6, 3, 1, 1]);
    }

    #[test]
    fn maxpool_clamps_and_relu() {
        let x = [-1.0, 3.0, 2.0];
        let mut out = [0.0];
        let mut am = [0u32];
        affine_relu_maxpool(&x, 1, [1, 1, 3], 2, &[1.0], &[0.0], &mut out, &mut am);
        assert_eq!((out[0], am[0]), (3.0, 1));
        affine_relu_maxpool(&x, 1, [1, 1, 3], 2, &[-1.0], &[-5.0], &mut out, &mut am);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn adaptive_pool_averages_and_adjoint() {
        let from = [3, 4, 5];
        let to = [2, 2, 3];
        let x = ramp(volume(from), 0.4);
        let mut y = vec![0.0; volume(to)];
        adaptive_avg_pool(&x, 1, from, to, &mut y);
        let g = ramp(volume(to), 1.3);
        let mut dx = vec![0.0; x.len()];
        adaptive_avg_pool_backward(&g, 1, from, to, &mut dx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let mut whole = [0.0];
        adaptive_avg_pool(&x, 1, from, [1, 1, 1], &mut whole);
        assert!((whole[0] - x.iter().sum::<f64>() / x.len() as f64).abs() < 1e-12);
    }
}
