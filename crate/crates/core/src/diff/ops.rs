//! Graph-level operations used between sequential nets: channel
//! concatenation, spatial broadcast of a latent vector, bilinear resizing.
//! Each comes with its adjoint.

use super::tensor::{Shape3, Tensor};
use crate::error::{DuqError, Result};

/// Concatenates along channels; batch and spatial sizes must agree.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if a.batch() != b.batch() || sa.h != sb.h || sa.w != sb.w {
        return Err(DuqError::Shape(format!(
            "cannot concatenate {}x{} with {}x{}",
            a.batch(),
            sa,
            b.batch(),
            sb
        )));
    }
    let shape = Shape3::new(sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(a.batch() * shape.numel());
    for i in 0..a.batch() {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(a.batch(), shape, data)
}

/// Adjoint of [`concat_channels`]: splits off the first `channels` channels.
pub fn split_channels(t: &Tensor, channels: usize) -> Result<(Tensor, Tensor)> {
    let s = t.shape();
    if channels > s.c {
        return Err(DuqError::Shape(format!(
            "cannot split {channels} channels from {s}"
        )));
    }
    let sa = Shape3::new(channels, s.h, s.w);
    let sb = Shape3::new(s.c - channels, s.h, s.w);
    let mut a = Vec::with_capacity(t.batch() * sa.numel());
    let mut b = Vec::with_capacity(t.batch() * sb.numel());
    for i in 0..t.batch() {
        let x = t.sample(i);
        a.extend_from_slice(&x[..sa.numel()]);
        b.extend_from_slice(&x[sa.numel()..]);
    }
    Ok((
        Tensor::from_vec(t.batch(), sa, a)?,
        Tensor::from_vec(t.batch(), sb, b)?,
    ))
}

/// Tiles a K-vector over an `h×w` grid as K constant channels.
pub fn broadcast_vector(z: &[f64], h: usize, w: usize) -> Tensor {
    let shape = Shape3::new(z.len(), h, w);
    let mut data = Vec::with_capacity(shape.numel());
    for &v in z {
        data.extend(std::iter::repeat(v).take(h * w));
    }
    Tensor::from_vec(1, shape, data).expect("length matches by construction")
}

/// Adjoint of [`broadcast_vector`]: sums each channel over space.
pub fn reduce_broadcast(grad: &Tensor) -> Vec<f64> {
    let s = grad.shape();
    let hw = s.h * s.w;
    let mut out = vec![0.0; s.c];
    for i in 0..grad.batch() {
        let g = grad.sample(i);
        for (c, o) in out.iter_mut().enumerate() {
            *o += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
    }
    out
}

/// Source taps `(i0, i1, frac)` along one axis for half-pixel-centred
/// bilinear resizing from `n_in` to `n_out` samples.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `h×w` (edge-clamped, half-pixel centres).
pub fn bilinear_resize(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let ty = bilinear_taps(s.h, h);
    let tx = bilinear_taps(s.w, w);
    let os = Shape3::new(s.c, h, w);
    let mut out = Tensor::zeros(t.batch(), os);
    for i in 0..t.batch() {
        let x = t.sample(i);
        let o = out.sample_mut(i);
        for c in 0..s.c {
            let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * s.w + x0] * (1.0 - fx) + plane[y0 * s.w + x1] * fx;
                    let bot = plane[y1 * s.w + x0] * (1.0 - fx) + plane[y1 * s.w + x1] * fx;
                    o[(c * h + oy) * w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`] back to `input`.
pub fn bilinear_resize_backward(grad: &Tensor, input: Shape3) -> Tensor {
    let os = grad.shape();
    let ty = bilinear_taps(input.h, os.h);
    let tx = bilinear_taps(input.w, os.w);
    let mut dx = Tensor::zeros(grad.batch(), input);
    for i in 0..grad.batch() {
        let g = grad.sample(i);
        let d = dx.sample_mut(i);
        for c in 0..os.c {
            let base = c * input.h * input.w;
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = g[(c * os.h + oy) * os.w + ox];
                    d[base + y0 * input.w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    d[base + y0 * input.w + x1] += v * (1.0 - fy) * fx;
                    d[base + y1 * input.w + x0] += v * fy * (1.0 - fx);
                    d[base + y1 * input.w + x1] += v * fy * fx;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(t: &Tensor, factor: usize) -> Tensor {
    super::layer::upsample_forward(t, factor)
}

pub fn upsample_nearest_backward(grad: &Tensor, input: Shape3, factor: usize) -> Tensor {
    super::layer::upsample_backward(grad, input, factor)
}

/// Tiles one K-vector per sample over an `h×w` grid.
pub fn broadcast_batch(z: &[Vec<f64>], h: usize, w: usize) -> Result<Tensor> {
    let k = z.first().map_or(0, |v| v.len());
    if z.iter().any(|v| v.len() != k) {
        return Err(DuqError::Shape("latent vectors differ in length".into()));
    }
    let shape = Shape3::new(k, h, w);
    let mut data = Vec::with_capacity(z.len() * shape.numel());
    for row in z {
        for &v in row {
            data.extend(std::iter::repeat(v).take(h * w));
        }
    }
    Tensor::from_vec(z.len(), shape, data)
}

/// Adjoint of [`broadcast_batch`]: per-sample spatial sums.
pub fn reduce_broadcast_batch(grad: &Tensor) -> Vec<Vec<f64>> {
    let s = grad.shape();
    let hw = s.h * s.w;
    (0..grad.batch())
        .map(|i| {
            let g = grad.sample(i);
            (0..s.c)
                .map(|c| g[c * hw..(c + 1) * hw].iter().sum())
                .collect()
        })
        .collect()
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut super::rng::RngStream) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect()
}

/// Elementwise product with a mask; also the adjoint of itself.
pub fn apply_mask(t: &Tensor, mask: &[f64]) -> Tensor {
    let mut out = t.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::rng::RngStream;

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let mut rng = RngStream::new(1, 1);
        let a = Tensor::from_vec(2, Shape3::new(2, 3, 3), rng.normal_vec(36)).unwrap();
        let b = Tensor::from_vec(2, Shape3::new(1, 3, 3), rng.normal_vec(18)).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn resize_adjoint_identity() {
        // <R x, g> == <x, Rᵀ g>
        let mut rng = RngStream::new(2, 2);
        let input = Shape3::new(2, 4, 4);
        let x = Tensor::from_vec(1, input, rng.normal_vec(32)).unwrap();
        let g = Tensor::from_vec(1, Shape3::new(2, 32, 32), rng.normal_vec(2048)).unwrap();
        let lhs = dot(&bilinear_resize(&x, 32, 32), &g);
        let rhs = dot(&x, &bilinear_resize_backward(&g, input));
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::filled(1, Shape3::new(1, 4, 4), 0.7);
        let y = bilinear_resize(&x, 32, 32);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn broadcast_adjoint() {
        let z = [1.0, -2.0, 0.5];
        let b = broadcast_vector(&z, 2, 3);
        assert_eq!(b.shape(), Shape3::new(3, 2, 3));
        let g = Tensor::filled(1, b.shape(), 1.0);
        assert_eq!(reduce_broadcast(&g), vec![6.0, 6.0, 6.0]);
    }

    #[test]
    fn batch_broadcast_adjoint() {
        let z = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let b = broadcast_batch(&z, 2, 2).unwrap();
        assert_eq!(b.sample(1)[4..], [0.5; 4]);
        let g = Tensor::filled(2, b.shape(), 1.0);
        assert_eq!(
            reduce_broadcast_batch(&g),
            vec![vec![4.0, 4.0], vec![4.0, 4.0]]
        );
    }

    #[test]
    fn dropout_keep_fraction() {
        let mut rng = RngStream::new(3, 0);
        let m = dropout_mask(10_000, 0.3, &mut rng);
        let kept = m.iter().filter(|v| **v > 0.0).count() as f64 / 1e4;
        assert!((kept - 0.7).abs() < 0.01, "{kept}");
        assert!(dropout_mask(5, 0.0, &mut rng).iter().all(|v| *v == 1.0));
    }
}
