//! Synthetic grade-crossing scenes.
//!
//! The road profile is a symmetric hump: a crest vertical curve of half
//! length `crest_half_width` joined tangentially to a sag curve over
//! `approach_length` that meets the level lead-in with zero grade. With grade
//! `g = 2H / (approach + crest)` the crest is at height `H` exactly and the
//! profile is C¹ everywhere.
//!
//! The instrumented vehicle sees that profile through its suspension: the
//! body (and the GPS antenna) follows a speed-dependent lagged copy of the
//! road, and GPS altitude adds a random-walk bias and white noise on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RawCrossingRecord;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GRAVITY: f64 = 9.80665;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevels {
    /// m/s²
    pub accel: f64,
    /// rad
    pub roll: f64,
    /// rad
    pub pitch: f64,
    /// m/s
    pub speed: f64,
    /// m
    pub gps_white: f64,
    /// Standard deviation of each random-walk step of the GPS bias, m.
    pub gps_drift_step: f64,
    /// m
    pub profiler: f64,
}

impl NoiseLevels {
    pub fn none() -> Self {
        NoiseLevels {
            accel: 0.0,
            roll: 0.0,
            pitch: 0.0,
            speed: 0.0,
            gps_white: 0.0,
            gps_drift_step: 0.0,
            profiler: 0.0,
        }
    }
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            accel: 0.05,
            roll: 0.002,
            pitch: 0.002,
            speed: 0.05,
            gps_white: 0.01,
            gps_drift_step: 0.0005,
            profiler: 0.0005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub crossing_id: String,
    /// Crest height above the level approach, m.
    pub hump_height: f64,
    pub approach_length: f64,
    pub crest_half_width: f64,
    /// Level road before and after the hump, m.
    pub lead_length: f64,
    pub sampling_interval: f64,
    pub speed_kmh: f64,
    /// Suspension response time; the body lags the road by `speed * tau`.
    pub suspension_tau_s: f64,
    pub base_altitude: f64,
    /// Profiler samples skipped at the start and end of the drive.
    pub profiler_start_trim: usize,
    pub profiler_end_trim: usize,
    pub noise: NoiseLevels,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            crossing_id: "crossing-000".into(),
            hump_height: 0.3,
            approach_length: 6.0,
            crest_half_width: 3.0,
            lead_length: 3.5,
            sampling_interval: 0.01,
            speed_kmh: 20.0,
            suspension_tau_s: 0.12,
            base_altitude: 300.0,
            profiler_start_trim: 20,
            profiler_end_trim: 35,
            noise: NoiseLevels::default(),
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.hump_height >= 0.0) {
            return bad(format!("hump_height must be >= 0, got {}", self.hump_height));
        }
        if !(self.sampling_interval > 0.0) {
            return bad(format!("sampling_interval must be > 0, got {}", self.sampling_interval));
        }
        if !(self.approach_length > 0.0 && self.crest_half_width > 0.0 && self.lead_length > 0.0) {
            return bad("approach_length, crest_half_width and lead_length must be positive".into());
        }
        if !(self.speed_kmh > 0.0) {
            return bad(format!("speed_kmh must be positive, got {}", self.speed_kmh));
        }
        if !(self.suspension_tau_s >= 0.0) {
            return bad("suspension_tau_s must be >= 0".into());
        }
        let n = &self.noise;
        for (name, v) in [
            ("accel", n.accel),
            ("roll", n.roll),
            ("pitch", n.pitch),
            ("speed", n.speed),
            ("gps_white", n.gps_white),
            ("gps_drift_step", n.gps_drift_step),
            ("profiler", n.profiler),
        ] {
            if !(v >= 0.0) {
                return bad(format!("noise level `{name}` must be >= 0, got {v}"));
            }
        }
        let samples = self.sample_count();
        if samples < 32 {
            return bad(format!("scene has only {samples} samples; at least 32 are required"));
        }
        if samples < self.profiler_start_trim + self.profiler_end_trim + 32 {
            return bad("profiler trims leave fewer than 32 profiler samples".into());
        }
        Ok(())
    }

    fn half_span(&self) -> f64 {
        self.lead_length + self.approach_length + self.crest_half_width
    }

    /// Odd sample count so that the crest falls exactly on a sample.
    pub fn sample_count(&self) -> usize {
        let half = (self.half_span() / self.sampling_interval).round() as usize;
        2 * half + 1
    }

    /// Closed-form road elevation at signed distance `u` from the crest.
    pub fn road_elevation(&self, u: f64) -> f64 {
        let u = u.abs();
        let (h, a, c) = (self.hump_height, self.approach_length, self.crest_half_width);
        let grade = 2.0 * h / (a + c);
        if u <= c {
            h - grade * u * u / (2.0 * c)
        } else if u <= c + a {
            let r = c + a - u;
            grade * r * r / (2.0 * a)
        } else {
            0.0
        }
    }
}

/// Parameter ranges used to draw varied scenes for a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub hump_height: (f64, f64),
    pub approach_length: (f64, f64),
    pub crest_half_width: (f64, f64),
    pub speed_kmh: (f64, f64),
    pub lead_length: f64,
    pub sampling_interval: f64,
    pub max_profiler_trim: usize,
    pub noise: NoiseLevels,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            hump_height: (0.1, 0.5),
            approach_length: (4.0, 8.0),
            crest_half_width: (2.0, 4.0),
            speed_kmh: (10.0, 32.0),
            lead_length: 3.5,
            sampling_interval: 0.01,
            max_profiler_trim: 60,
            noise: NoiseLevels::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("hump_height", self.hump_height),
            ("approach_length", self.approach_length),
            ("crest_half_width", self.crest_half_width),
            ("speed_kmh", self.speed_kmh),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!("range `{name}` must satisfy min <= max, got ({lo}, {hi})")));
            }
        }
        self.scene(0, 0).validate()
    }

    /// Scene `index` of the corpus generated from `seed`.
    pub fn scene(&self, seed: u64, index: usize) -> SceneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let hump_height = draw(self.hump_height);
        let approach_length = draw(self.approach_length);
        let crest_half_width = draw(self.crest_half_width);
        let speed_kmh = draw(self.speed_kmh);
        let profiler_start_trim = rng.random_range(0..=self.max_profiler_trim);
        let profiler_end_trim = rng.random_range(0..=self.max_profiler_trim);
        let base_altitude = rng.random_range(250.0..400.0);
        SceneConfig {
            crossing_id: format!("crossing-{index:03}"),
            hump_height,
            approach_length,
            crest_half_width,
            lead_length: self.lead_length,
            sampling_interval: self.sampling_interval,
            speed_kmh,
            base_altitude,
            profiler_start_trim,
            profiler_end_trim,
            noise: self.noise.clone(),
            rng_seed: rng.random(),
            ..SceneConfig::default()
        }
    }
}

fn normal(sd: f64) -> Option<Normal<f64>> {
    (sd > 0.0).then(|| Normal::new(0.0, sd).expect("positive finite sd"))
}

fn draw(rng: &mut ChaCha8Rng, dist: &Option<Normal<f64>>) -> f64 {
    dist.as_ref().map_or(0.0, |d| d.sample(rng))
}

/// Generates one raw record. Deterministic in `cfg`.
pub fn synthesize_crossing(cfg: &SceneConfig) -> Result<RawCrossingRecord> {
    cfg.validate()?;
    let n = cfg.sample_count();
    let dx = cfg.sampling_interval;
    let center = (n / 2) as f64 * dx;
    let speed = cfg.speed_kmh / 3.6;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let road: Vec<f64> = (0..n).map(|i| cfg.road_elevation(i as f64 * dx - center)).collect();

    // Suspension lag as a first-order filter along the drive.
    let lag = speed * cfg.suspension_tau_s;
    let alpha = dx / (lag + dx);
    let mut body = vec![0.0; n];
    body[0] = road[0];
    for i in 1..n {
        body[i] = body[i - 1] + alpha * (road[i] - body[i - 1]);
    }
    let slope = |i: usize| -> f64 {
        let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
        (body[b] - body[a]) / ((b - a) as f64 * dx)
    };
    let slopes: Vec<f64> = (0..n).map(slope).collect();
    let curvature: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (slopes[b] - slopes[a]) / ((b - a) as f64 * dx)
        })
        .collect();

    let noise = &cfg.noise;
    let (n_acc, n_roll, n_pitch, n_speed) = (
        normal(noise.accel),
        normal(noise.roll),
        normal(noise.pitch),
        normal(noise.speed),
    );
    let (n_gps, n_drift, n_prof) = (normal(noise.gps_white), normal(noise.gps_drift_step), normal(noise.profiler));

    let mut imu = Vec::with_capacity(n * 7);
    let mut drift = 0.0;
    let mut roll = 0.0;
    for i in 0..n {
        drift += draw(&mut rng, &n_drift);
        roll = 0.98 * roll + draw(&mut rng, &n_roll);
        let pitch = slopes[i].atan();
        let v = (speed + draw(&mut rng, &n_speed)).max(0.1);
        let ax = GRAVITY * pitch.sin() + draw(&mut rng, &n_acc);
        let ay = GRAVITY * roll.sin() + draw(&mut rng, &n_acc);
        let az = GRAVITY * pitch.cos() + speed * speed * curvature[i] + draw(&mut rng, &n_acc);
        let alt = cfg.base_altitude + body[i] + drift + draw(&mut rng, &n_gps);
        imu.extend_from_slice(&[ax, ay, az, roll, pitch + draw(&mut rng, &n_pitch), v, alt]);
    }

    let start = cfg.profiler_start_trim;
    let end = n - cfg.profiler_end_trim;
    let profiler: Vec<f64> = road[start..end].iter().map(|z| z + draw(&mut rng, &n_prof)).collect();

    Ok(RawCrossingRecord {
        crossing_id: cfg.crossing_id.clone(),
        collection_speed_kmh: cfg.speed_kmh,
        sampling_interval_m: dx,
        imu_gps: Tensor::matrix(n, 7, imu)?,
        profiler,
        profiler_offset: start,
    })
}

/// `count` records drawn from `cfg` with corpus seed `seed`.
pub fn synthesize_corpus(cfg: &SynthConfig, seed: u64, count: usize) -> Result<Vec<RawCrossingRecord>> {
    cfg.validate()?;
    (0..count).map(|i| synthesize_crossing(&cfg.scene(seed, i))).collect()
}
