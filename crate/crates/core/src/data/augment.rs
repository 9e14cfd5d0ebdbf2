use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{AlignedSequence, GPS_COLUMN, MIN_HALF_WINDOW};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Noise standard deviation as a fraction of the GPS profile's range.
pub const NOISE_FRACTION: f64 = 0.04;
/// Noise draws are truncated at this many standard deviations.
pub const TRUNCATION_SDS: f64 = 2.0;

/// One draw from N(0, sd²) truncated to ±`TRUNCATION_SDS`·sd, by rejection.
pub(crate) fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, dist: &Normal<f64>, sd: f64) -> f64 {
    let bound = TRUNCATION_SDS * sd;
    loop {
        let x = dist.sample(rng);
        if x.abs() <= bound {
            return x;
        }
    }
}

/// Adds truncated-normal noise to the GPS profile column only.
pub fn augment_noise<R: Rng + ?Sized>(seq: &AlignedSequence, rng: &mut R) -> AlignedSequence {
    let gps = seq.gps_profile();
    let (lo, hi) = gps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let sd = NOISE_FRACTION * (hi - lo);
    let mut out = seq.clone();
    if !(sd > 0.0 && sd.is_finite()) {
        return out;
    }
    let dist = Normal::new(0.0, sd).expect("positive finite sd");
    let cols = out.data.cols();
    for row in out.data.data_mut().chunks_mut(cols) {
        row[GPS_COLUMN] += truncated_normal(rng, &dist, sd);
    }
    out
}

/// Rows 0, 2, 4, ... and rows 1, 3, 5, ...
pub fn split_even_odd(seq: &AlignedSequence) -> Result<(AlignedSequence, AlignedSequence)> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::contract(format!("cannot split a sequence of {n} row(s)")));
    }
    let cols = seq.data.cols();
    let pick = |start: usize| -> Result<AlignedSequence> {
        let rows: Vec<f64> = seq.data.data().chunks(cols).skip(start).step_by(2).flatten().copied().collect();
        let m = rows.len() / cols;
        AlignedSequence::new(seq.source_id.clone(), Tensor::matrix(m, cols, rows)?, 2.0 * seq.spacing_m)
    };
    Ok((pick(0)?, pick(1)?))
}

/// Inverse of [`split_even_odd`].
pub fn interleave(even: &AlignedSequence, odd: &AlignedSequence) -> Result<Tensor> {
    let (a, b) = (even.len(), odd.len());
    if a != b && a != b + 1 || even.data.cols() != odd.data.cols() {
        return Err(Error::shape("interleave", even.data.shape(), odd.data.shape()));
    }
    let mut data = Vec::with_capacity(even.data.numel() + odd.data.numel());
    for i in 0..a {
        data.extend_from_slice(even.data.row(i));
        if i < b {
            data.extend_from_slice(odd.data.row(i));
        }
    }
    Tensor::matrix(a + b, even.data.cols(), data)
}

/// Noise first, then split into even and odd rows.
pub fn augment_downsample<R: Rng + ?Sized>(
    seq: &AlignedSequence,
    rng: &mut R,
) -> Result<(AlignedSequence, AlignedSequence)> {
    let min = 2 * MIN_HALF_WINDOW + 1;
    if seq.len() < min {
        return Err(Error::contract(format!(
            "{}: down-sampling needs at least {min} rows, got {}",
            seq.source_id,
            seq.len()
        )));
    }
    split_even_odd(&augment_noise(seq, rng))
}
