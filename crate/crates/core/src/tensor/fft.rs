//! Two-dimensional discrete Fourier transforms.
//!
//! Forward transforms are unnormalized, inverse transforms carry the
//! `1/(H·W)` factor. Power-of-two extents use an iterative radix-2
//! Cooley-Tukey kernel, every other extent falls back to the direct sum.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::Tensor;
use crate::error::{Error, Result};

/// Relative bound on the imaginary residue accepted by [`dft2_inverse`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Spectrum of a real `[H, W, C]` field, stored as a real/imaginary pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub real_part: Tensor,
    pub imag_part: Tensor,
}

impl ComplexSpectrum {
    pub fn new(real_part: Tensor, imag_part: Tensor) -> Result<Self> {
        if real_part.shape() != imag_part.shape() {
            return Err(Error::contract(format!(
                "spectrum parts disagree: {:?} vs {:?}",
                real_part.shape(),
                imag_part.shape()
            )));
        }
        if real_part.rank() != 3 {
            return Err(Error::contract("spectrum must have shape [H, W, C]"));
        }
        Ok(ComplexSpectrum { real_part, imag_part })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.real_part.shape();
        (s[0], s[1], s[2])
    }

    pub fn get(&self, k1: usize, k2: usize, ch: usize) -> Complex64 {
        let (_, w, c) = self.shape();
        let i = (k1 * w + k2) * c + ch;
        Complex64::new(self.real_part.data()[i], self.imag_part.data()[i])
    }
}

struct Twiddles {
    n: usize,
    table: Vec<Complex64>,
}

impl Twiddles {
    fn new(n: usize, inverse: bool) -> Self {
        let sign = if inverse { 1.0 } else { -1.0 };
        let table = (0..n)
            .map(|k| {
                let a = sign * 2.0 * PI * k as f64 / n as f64;
                Complex64::new(a.cos(), a.sin())
            })
            .collect();
        Twiddles { n, table }
    }
}

/// Unnormalized in-place 1-D transform; `inverse` flips the exponent sign only.
pub fn fft_inplace(buf: &mut [Complex64], inverse: bool) {
    let tw = Twiddles::new(buf.len(), inverse);
    let mut scratch = Vec::new();
    transform(buf, &tw, &mut scratch);
}

fn transform(buf: &mut [Complex64], tw: &Twiddles, scratch: &mut Vec<Complex64>) {
    let n = buf.len();
    debug_assert_eq!(n, tw.n);
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, tw);
    } else {
        scratch.clear();
        scratch.extend_from_slice(buf);
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, v) in scratch.iter().enumerate() {
                acc += v * tw.table[(k * j) % n];
            }
            *out = acc;
        }
    }
}

fn radix2(buf: &mut [Complex64], tw: &Twiddles) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = tw.table[k * step];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Transforms every `(batch, channel)` plane of a `[B, H, W, C]` complex
/// field stored as separate real and imaginary buffers. Unnormalized in both
/// directions.
pub(crate) fn fft2_planes(re: &mut [f64], im: &mut [f64], dims: [usize; 4], inverse: bool) {
    let [b, h, w, c] = dims;
    debug_assert_eq!(re.len(), b * h * w * c);
    let tw_w = Twiddles::new(w, inverse);
    let tw_h = Twiddles::new(h, inverse);
    let mut line = Vec::with_capacity(h.max(w));
    let mut scratch = Vec::new();
    for bi in 0..b {
        let base = bi * h * w * c;
        // along W
        for x in 0..h {
            for ch in 0..c {
                line.clear();
                for y in 0..w {
                    let i = base + (x * w + y) * c + ch;
                    line.push(Complex64::new(re[i], im[i]));
                }
                transform(&mut line, &tw_w, &mut scratch);
                for (y, v) in line.iter().enumerate() {
                    let i = base + (x * w + y) * c + ch;
                    re[i] = v.re;
                    im[i] = v.im;
                }
            }
        }
        // along H
        for y in 0..w {
            for ch in 0..c {
                line.clear();
                for x in 0..h {
                    let i = base + (x * w + y) * c + ch;
                    line.push(Complex64::new(re[i], im[i]));
                }
                transform(&mut line, &tw_h, &mut scratch);
                for (x, v) in line.iter().enumerate() {
                    let i = base + (x * w + y) * c + ch;
                    re[i] = v.re;
                    im[i] = v.im;
                }
            }
        }
    }
}

fn field_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        [h, w] => Ok((*h, *w, 1)),
        s => Err(Error::contract(format!("expected an [H, W, C] field, got {s:?}"))),
    }
}

/// Forward DFT of each channel of a real `[H, W, C]` (or `[H, W]`) field.
pub fn dft2_forward(field: &Tensor) -> Result<ComplexSpectrum> {
    let (h, w, c) = field_dims(field)?;
    if !field.is_finite() {
        return Err(Error::NonFinite { op: "dft2_forward".into() });
    }
    let mut re = field.data().to_vec();
    let mut im = vec![0.0; re.len()];
    fft2_planes(&mut re, &mut im, [1, h, w, c], false);
    let p = field.precision();
    p.round_slice(&mut re);
    p.round_slice(&mut im);
    Ok(ComplexSpectrum {
        real_part: Tensor::from_parts(vec![h, w, c], re, p),
        imag_part: Tensor::from_parts(vec![h, w, c], im, p),
    })
}

/// Inverse DFT returning the real field. Fails when the imaginary residue
/// exceeds [`SYMMETRY_TOLERANCE`] times the output norm.
pub fn dft2_inverse(spectrum: &ComplexSpectrum) -> Result<Tensor> {
    let (h, w, c) = spectrum.shape();
    if !spectrum.real_part.is_finite() || !spectrum.imag_part.is_finite() {
        return Err(Error::NonFinite { op: "dft2_inverse".into() });
    }
    let mut re = spectrum.real_part.data().to_vec();
    let mut im = spectrum.imag_part.data().to_vec();
    fft2_planes(&mut re, &mut im, [1, h, w, c], true);
    let scale = 1.0 / (h * w) as f64;
    re.iter_mut().for_each(|v| *v *= scale);
    let out_norm = re.iter().map(|v| v * v).sum::<f64>().sqrt();
    let residue = im.iter().map(|v| v * v).sum::<f64>().sqrt() * scale;
    let threshold = SYMMETRY_TOLERANCE * out_norm;
    if residue > threshold {
        return Err(Error::Symmetry { residue, threshold });
    }
    let p = spectrum.real_part.precision();
    p.round_slice(&mut re);
    Ok(Tensor::from_parts(vec![h, w, c], re, p))
}

/// Direct `O((HW)^2)` evaluation of the forward transform of one plane.
/// Used as the fallback kernel's reference in benchmarks and debugging.
pub fn naive_dft2(field: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for k1 in 0..h {
        for k2 in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for x in 0..h {
                for y in 0..w {
                    let a = -2.0 * PI * ((k1 * x) as f64 / h as f64 + (k2 * y) as f64 / w as f64);
                    acc += field[x * w + y] * Complex64::new(a.cos(), a.sin());
                }
            }
            out[k1 * w + k2] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_has_only_dc() {
        let f = Tensor::full(&[4, 4, 1], 2.5);
        let s = dft2_forward(&f).unwrap();
        assert!((s.get(0, 0, 0).re - 16.0 * 2.5).abs() < 1e-12);
        for k in 1..16 {
            assert!(s.get(k / 4, k % 4, 0).norm() < 1e-12);
        }
    }

    #[test]
    fn cosine_lands_in_two_bins() {
        let f = Tensor::from_fn(&[8, 8, 1], |i| (2.0 * PI * (i / 8) as f64 / 8.0).cos());
        let s = dft2_forward(&f).unwrap();
        for k1 in 0..8 {
            for k2 in 0..8 {
                let v = s.get(k1, k2, 0);
                let expect = if k2 == 0 && (k1 == 1 || k1 == 7) { 32.0 } else { 0.0 };
                assert!((v.re - expect).abs() < 1e-12 && v.im.abs() < 1e-12, "bin ({k1},{k2}) = {v}");
            }
        }
    }

    #[test]
    fn non_power_of_two_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 5);
        let data: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = dft2_forward(&Tensor::new(&[h, w, 1], data.clone()).unwrap()).unwrap();
        let direct = naive_dft2(&data, h, w);
        for k in 0..h * w {
            assert!((s.get(k / w, k % w, 0) - direct[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn dc_bin_inverts_to_ones() {
        let mut re = Tensor::zeros(&[4, 4, 1]);
        re.data_mut()[0] = 16.0;
        let s = ComplexSpectrum::new(re, Tensor::zeros(&[4, 4, 1])).unwrap();
        let f = dft2_inverse(&s).unwrap();
        assert!(f.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let s = ComplexSpectrum::new(Tensor::zeros(&[4, 4, 2]), Tensor::zeros(&[4, 4, 2])).unwrap();
        assert_eq!(dft2_inverse(&s).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let mut im = Tensor::zeros(&[4, 4, 1]);
        im.data_mut()[1] = 3.0;
        let mut re = Tensor::zeros(&[4, 4, 1]);
        re.data_mut()[0] = 1.0;
        let s = ComplexSpectrum::new(re, im).unwrap();
        assert!(matches!(dft2_inverse(&s), Err(Error::Symmetry { .. })));
    }

    #[test]
    fn non_finite_input_is_a_domain_error() {
        let mut f = Tensor::zeros(&[2, 2, 1]);
        f.data_mut()[1] = f64::NAN;
        assert!(matches!(dft2_forward(&f), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn single_precision_results_are_f32_representable() {
        let f = Tensor::from_fn(&[8, 8, 1], |i| (i as f64 * 0.37).sin()).to_precision(crate::tensor::Precision::Single);
        let s = dft2_forward(&f).unwrap();
        assert!(s.real_part.data().iter().all(|&v| v == v as f32 as f64));
    }
}
