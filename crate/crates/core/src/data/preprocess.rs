//! Resolution unification, channel padding, noise injection and the
//! train/held-out split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::trajectory::{SampleWindow, TrajDims, TrajectorySet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default relative noise scale used during pre-training.
pub const DEFAULT_NOISE_COEF: f64 = 1e-3;

/// Source taps `(index, weight)` for each target sample along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    if src == dst {
        return (0..dst).map(|i| vec![(i, 1.0)]).collect();
    }
    if src > dst && src % dst == 0 {
        let r = src / dst;
        return (0..dst).map(|i| vec![(i * r, 1.0)]).collect();
    }
    (0..dst)
        .map(|i| {
            let pos = i as f64 * src as f64 / dst as f64;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo = lo as usize % src;
            if frac == 0.0 {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - frac), ((lo + 1) % src, frac)]
            }
        })
        .collect()
}

/// Resamples every frame to `h_target × h_target`: periodic bilinear
/// interpolation, or strided subsampling for integer downscaling ratios.
pub fn unify_resolution(set: &TrajectorySet, h_target: usize) -> Result<TrajectorySet> {
    if h_target < 2 {
        return Err(Error::contract(format!("target resolution must be >= 2, got {h_target}")));
    }
    let d = set.dims();
    if d.h == h_target && d.w == h_target {
        return Ok(set.clone());
    }
    let rows = axis_taps(d.h, h_target);
    let cols = axis_taps(d.w, h_target);
    let out_dims = TrajDims { h: h_target, w: h_target, ..d };
    let mut data = Vec::with_capacity(out_dims.len());
    let mut tmp = vec![0.0; h_target * d.w];
    for n in 0..d.n {
        for t in 0..d.t_total {
            let frame = set.frame(n, t);
            for c in 0..d.c {
                let plane = &frame[c * d.h * d.w..(c + 1) * d.h * d.w];
                let is_mask = set.mask() && c == d.c - 1;
                for (i, taps) in rows.iter().enumerate() {
                    for y in 0..d.w {
                        tmp[i * d.w + y] = taps.iter().map(|&(s, wt)| wt * plane[s * d.w + y]).sum();
                    }
                }
                for i in 0..h_target {
                    for taps in &cols {
                        let v: f64 = taps.iter().map(|&(s, wt)| wt * tmp[i * d.w + s]).sum();
                        data.push(if is_mask { v.round().clamp(0.0, 1.0) } else { v });
                    }
                }
            }
        }
    }
    TrajectorySet::new(out_dims, set.mask(), data, set.meta.clone())
}

/// Pads physical channels up to `c_max` with `fill`, optionally appending a
/// binary mask channel (all ones for full-domain sets). An existing mask
/// channel is kept as the last channel.
pub fn pad_channels(set: &TrajectorySet, c_max: usize, fill: f64, add_mask: bool) -> Result<TrajectorySet> {
    let d = set.dims();
    let phys = set.physical_channels();
    if phys > c_max {
        return Err(Error::contract(format!("set has {phys} channels, more than C_max = {c_max}")));
    }
    let mask_out = set.mask() || add_mask;
    let c_out = c_max + mask_out as usize;
    if c_out == d.c {
        return Ok(set.clone());
    }
    let plane = d.h * d.w;
    let out_dims = TrajDims { c: c_out, ..d };
    let mut data = Vec::with_capacity(out_dims.len());
    for n in 0..d.n {
        for t in 0..d.t_total {
            let frame = set.frame(n, t);
            data.extend_from_slice(&frame[..phys * plane]);
            data.extend(std::iter::repeat(fill).take((c_max - phys) * plane));
            if set.mask() {
                data.extend_from_slice(&frame[phys * plane..]);
            } else if add_mask {
                data.extend(std::iter::repeat(1.0).take(plane));
            }
        }
    }
    TrajectorySet::new(out_dims, mask_out, data, set.meta.clone())
}

/// Adds i.i.d. Gaussian noise with standard deviation
/// `eps_coef × RMS(input window)` to the input frames; the target is untouched.
pub fn inject_noise(window: &SampleWindow, eps_coef: f64, seed: u64) -> Result<SampleWindow> {
    if !(eps_coef >= 0.0) {
        return Err(Error::config(format!("noise coefficient must be >= 0, got {eps_coef}")));
    }
    if eps_coef == 0.0 {
        return Ok(window.clone());
    }
    let x = window.input.data();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let std = eps_coef * rms;
    if std == 0.0 {
        return Ok(window.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = x.iter().map(|v| v + normal.sample(&mut rng)).collect();
    Ok(SampleWindow { input: Tensor::new(window.input.shape(), noisy)?, ..window.clone() })
}

/// `(train, held_out)` trajectory counts: the last 10% are held out
/// (at least one when the set has two or more trajectories).
pub fn split_counts(n: usize) -> (usize, usize) {
    if n < 2 {
        return (n, 0);
    }
    let held = (n / 10).max(1);
    (n - held, held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::trajectory::SetMeta;

    fn set_from(dims: TrajDims, f: impl Fn(usize) -> f64) -> TrajectorySet {
        let data = (0..dims.len()).map(f).collect();
        TrajectorySet::new(dims, false, data, SetMeta { dataset_id: "t".into(), params: None }).unwrap()
    }

    fn dims(c: usize, h: usize) -> TrajDims {
        TrajDims { n: 1, t_total: 2, c, h, w: h }
    }

    #[test]
    fn same_resolution_is_identity() {
        let s = set_from(dims(1, 4), |i| i as f64 * 0.5);
        assert_eq!(unify_resolution(&s, 4).unwrap(), s);
    }

    #[test]
    fn constants_survive_resampling() {
        let s = set_from(dims(2, 6), |_| 3.25);
        for target in [4, 9, 12, 3] {
            let out = unify_resolution(&s, target).unwrap();
            assert!(out.data().iter().all(|v| (v - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn ramp_midpoints_average_neighbours() {
        let s = set_from(dims(1, 4), |i| ((i / 4) % 4) as f64 / 4.0);
        let out = unify_resolution(&s, 8).unwrap();
        let f0 = s.value(0, 0, 0, 0, 0);
        let f1 = s.value(0, 0, 0, 1, 0);
        assert!((out.value(0, 0, 0, 1, 3) - 0.5 * (f0 + f1)).abs() < 1e-15);
        assert_eq!(out.value(0, 0, 0, 2, 0), f1);
    }

    #[test]
    fn integer_downscale_subsamples() {
        let s = set_from(dims(1, 8), |i| i as f64);
        let out = unify_resolution(&s, 4).unwrap();
        assert_eq!(out.value(0, 0, 0, 1, 1), s.value(0, 0, 0, 2, 2));
    }

    #[test]
    fn padding_fills_with_constant() {
        let s = set_from(dims(1, 4), |i| -(i as f64));
        let out = pad_channels(&s, 4, 1.0, false).unwrap();
        assert_eq!(out.dims().c, 4);
        for c in 1..4 {
            for x in 0..4 {
                assert_eq!(out.value(0, 1, c, x, 2), 1.0);
            }
        }
        assert_eq!(out.value(0, 1, 0, 3, 3), s.value(0, 1, 0, 3, 3));
    }

    #[test]
    fn mask_channel_is_all_ones() {
        let s = set_from(dims(1, 4), |i| i as f64);
        let out = pad_channels(&s, 2, 0.0, true).unwrap();
        assert!(out.mask());
        assert_eq!(out.dims().c, 3);
        assert!((0..16).all(|i| out.value(0, 0, 2, i / 4, i % 4) == 1.0));
        assert_eq!(pad_channels(&out, 2, 0.0, true).unwrap(), out);
    }

    #[test]
    fn full_width_without_mask_is_identity_and_overflow_is_error() {
        let s = set_from(dims(3, 4), |i| i as f64);
        assert_eq!(pad_channels(&s, 3, 1.0, false).unwrap(), s);
        assert!(matches!(pad_channels(&s, 2, 1.0, false), Err(Error::Contract(_))));
    }

    #[test]
    fn split_holds_out_a_tenth() {
        assert_eq!(split_counts(60), (54, 6));
        assert_eq!(split_counts(5), (4, 1));
        assert_eq!(split_counts(1), (1, 0));
    }
}
