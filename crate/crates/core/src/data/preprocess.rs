use super::{AlignedSequence, RawCrossingRecord, GPS_COLUMN, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest accepted half-width of the aligned window around the peak.
pub const MIN_HALF_WINDOW: usize = 16;

/// Index of the largest value; the first one wins ties. NaN never wins.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if !(v > values[b]) => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Altitudes relative to the first sample.
pub fn normalize_gps_altitude(altitudes: &[f64]) -> Result<Vec<f64>> {
    let first = *altitudes
        .first()
        .ok_or_else(|| Error::contract("cannot normalize an empty altitude series"))?;
    Ok(altitudes.iter().map(|a| a - first).collect())
}

/// Symmetric windows `[peak - half_width, peak + half_width]` in two series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeakWindow {
    pub gps_peak: usize,
    pub wp_peak: usize,
    pub half_width: usize,
}

impl PeakWindow {
    pub fn len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn gps_range(&self) -> std::ops::Range<usize> {
        self.gps_peak - self.half_width..self.gps_peak + self.half_width + 1
    }

    pub fn wp_range(&self) -> std::ops::Range<usize> {
        self.wp_peak - self.half_width..self.wp_peak + self.half_width + 1
    }
}

/// Largest symmetric window around both peaks that fits inside both series.
pub fn align_by_peak(gps_profile: &[f64], wp_profile: &[f64]) -> Result<PeakWindow> {
    let gps_peak = argmax(gps_profile).ok_or_else(|| Error::Alignment("GPS profile has no maximum".into()))?;
    let wp_peak = argmax(wp_profile).ok_or_else(|| Error::Alignment("profiler series has no maximum".into()))?;
    let half_width = gps_peak
        .min(gps_profile.len() - 1 - gps_peak)
        .min(wp_peak)
        .min(wp_profile.len() - 1 - wp_peak);
    if half_width < MIN_HALF_WINDOW {
        return Err(Error::Alignment(format!(
            "only {half_width} samples fit on each side of the peak (GPS peak at {gps_peak} of {}, \
             profiler peak at {wp_peak} of {}); at least {MIN_HALF_WINDOW} are required",
            gps_profile.len(),
            wp_profile.len()
        )));
    }
    Ok(PeakWindow {
        gps_peak,
        wp_peak,
        half_width,
    })
}

/// Stacks six IMU channels, the GPS profile and the profiler target.
pub fn merge_channels(imu6: &Tensor, gps_norm: &[f64], wp: &[f64]) -> Result<Tensor> {
    let n = imu6.rows();
    if imu6.rank() != 2 || imu6.cols() != INPUT_CHANNELS - 1 {
        return Err(Error::shape("merge_channels", imu6.shape(), &[n, INPUT_CHANNELS - 1]));
    }
    if gps_norm.len() != n || wp.len() != n {
        return Err(Error::shape("merge_channels", &[n, gps_norm.len()], &[n, wp.len()]));
    }
    let mut data = Vec::with_capacity(n * 8);
    for i in 0..n {
        data.extend_from_slice(imu6.row(i));
        data.push(gps_norm[i]);
        data.push(wp[i]);
    }
    Tensor::matrix(n, 8, data)
}

/// Normalize, align and merge one record.
pub fn preprocess(record: &RawCrossingRecord) -> Result<AlignedSequence> {
    record.validate()?;
    let gps = normalize_gps_altitude(&record.imu_gps.column(GPS_COLUMN))?;
    let window = align_by_peak(&gps, &record.profiler)
        .map_err(|e| Error::Alignment(format!("{}: {}", record.crossing_id, strip_prefix(&e))))?;
    let rows = window.gps_range();
    let imu6: Vec<f64> = rows
        .clone()
        .flat_map(|i| record.imu_gps.row(i)[..INPUT_CHANNELS - 1].iter().copied())
        .collect();
    let imu6 = Tensor::matrix(window.len(), INPUT_CHANNELS - 1, imu6)?;
    let data = merge_channels(&imu6, &gps[rows], &record.profiler[window.wp_range()])?;
    let seq = AlignedSequence::new(record.crossing_id.clone(), data, record.sampling_interval_m)?;
    debug_assert_eq!(seq.peak_index, window.half_width);
    Ok(seq)
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Alignment(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Linear interpolation of every column onto `len` evenly spaced rows
/// spanning the original index range.
pub fn resample_to_length(seq: &AlignedSequence, len: usize) -> Result<AlignedSequence> {
    let n = seq.len();
    if len < 2 || n < 2 {
        return Err(Error::contract(format!("resampling needs at least 2 rows on both sides, got {n} -> {len}")));
    }
    let cols = seq.data.cols();
    let src = seq.data.data();
    let mut out = Vec::with_capacity(len * cols);
    let scale = (n - 1) as f64;
    for k in 0..len {
        let pos = (k as f64 * scale) / (len - 1) as f64;
        let i = pos.floor() as usize;
        if i >= n - 1 {
            out.extend_from_slice(&src[(n - 1) * cols..]);
            continue;
        }
        let t = pos - i as f64;
        let (a, b) = (&src[i * cols..(i + 1) * cols], &src[(i + 1) * cols..(i + 2) * cols]);
        out.extend(a.iter().zip(b).map(|(&x, &y)| x + t * (y - x)));
    }
    let spacing = seq.spacing_m * scale / (len - 1) as f64;
    AlignedSequence::new(seq.source_id.clone(), Tensor::matrix(len, cols, out)?, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_first_of_ties_and_skips_nan() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[f64::NAN, 0.5, f64::NAN]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn normalization_examples() {
        let out = normalize_gps_altitude(&[100.2, 100.5, 100.4]).unwrap();
        let expect = [0.0, 0.3, 0.2];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-12);
        }
        assert_eq!(normalize_gps_altitude(&[7.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(normalize_gps_altitude(&out).unwrap(), out);
        assert!(matches!(normalize_gps_altitude(&[]), Err(Error::Contract(_))));
    }

    fn bump(n: usize, peak: usize) -> Vec<f64> {
        (0..n).map(|i| -((i as f64 - peak as f64) / 10.0).powi(2)).collect()
    }

    #[test]
    fn self_alignment_covers_the_shorter_side() {
        let p = bump(100, 40);
        let w = align_by_peak(&p, &p).unwrap();
        assert_eq!((w.gps_peak, w.wp_peak, w.half_width), (40, 40, 40));
        assert_eq!(w.len(), 81);
    }

    #[test]
    fn shifted_profiles_align_on_the_peak() {
        let gps = bump(120, 50);
        let wp = bump(120, 55);
        let w = align_by_peak(&gps, &wp).unwrap();
        let (g, p) = (&gps[w.gps_range()], &wp[w.wp_range()]);
        assert_eq!(argmax(g), Some(w.half_width));
        assert_eq!(argmax(p), Some(w.half_width));
        // Brute force: the largest symmetric window centred on both peaks.
        let best = (0..120).filter(|&h| h <= 50 && 50 + h < 120 && h <= 55 && 55 + h < 120).max().unwrap();
        assert_eq!(w.half_width, best);
    }

    #[test]
    fn ties_resolve_to_the_first_peak() {
        let mut p = vec![0.0; 80];
        p[30] = 1.0;
        p[50] = 1.0;
        for _ in 0..3 {
            assert_eq!(align_by_peak(&p, &p).unwrap().gps_peak, 30);
        }
    }

    #[test]
    fn edge_peaks_are_rejected() {
        let p = bump(100, 10);
        assert!(matches!(align_by_peak(&p, &bump(100, 50)), Err(Error::Alignment(_))));
    }

    #[test]
    fn merge_examples() {
        let imu = Tensor::matrix(1, 6, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = merge_channels(&imu, &[7.0], &[8.0]).unwrap();
        assert_eq!(m.shape(), &[1, 8]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);

        let imu = Tensor::matrix(3, 6, (0..18).map(f64::from).collect()).unwrap();
        let gps = [0.5, 0.25, 0.125];
        let wp = [9.0, 8.0, 7.0];
        let m = merge_channels(&imu, &gps, &wp).unwrap();
        assert_eq!(m.column(6), gps);
        let again = merge_channels(&m.slice_cols(0, 6), &m.column(6), &m.column(7)).unwrap();
        assert_eq!(again, m);
        assert!(matches!(merge_channels(&imu, &gps[..2], &wp), Err(Error::Shape { .. })));
    }

    fn seq_from_columns(cols: &[Vec<f64>]) -> AlignedSequence {
        let n = cols[0].len();
        let data: Vec<f64> = (0..n).flat_map(|i| (0..8).map(move |c| cols[c % cols.len()][i])).collect();
        AlignedSequence::new("s", Tensor::matrix(n, 8, data).unwrap(), 0.01).unwrap()
    }

    #[test]
    fn resampling_identity_and_affine() {
        let ramp: Vec<f64> = (0..13).map(|i| 0.3 + 1.7 * i as f64).collect();
        let s = seq_from_columns(&[ramp.clone()]);
        let same = resample_to_length(&s, 13).unwrap();
        assert!(same.data.max_abs_diff(&s.data) < 1e-12);
        for len in [2, 5, 29, 100] {
            let r = resample_to_length(&s, len).unwrap();
            let col = r.data.column(3);
            assert_eq!(col[0], ramp[0]);
            assert_eq!(col[len - 1], ramp[12]);
            for (k, v) in col.iter().enumerate() {
                let expect = 0.3 + 1.7 * 12.0 * k as f64 / (len - 1) as f64;
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parabola_to_nine_points() {
        let s = seq_from_columns(&[vec![0.0, 1.0, 4.0, 9.0, 16.0]]);
        let r = resample_to_length(&s, 9).unwrap();
        let expect = [0.0, 0.5, 1.0, 2.5, 4.0, 6.5, 9.0, 12.5, 16.0];
        for (v, e) in r.data.column(0).iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!((r.spacing_m - 0.005).abs() < 1e-15);
    }

    #[test]
    fn resampling_rejects_degenerate_lengths() {
        let s = seq_from_columns(&[vec![1.0, 2.0, 3.0]]);
        assert!(resample_to_length(&s, 1).is_err());
        let one = seq_from_columns(&[vec![1.0]]);
        assert!(resample_to_length(&one, 5).is_err());
    }
}
