//! WebAssembly bindings behind `www/index.html`.
//!
//! Each export returns plain data (JSON text or a flat `f64` array) so the
//! page can draw it on a canvas without any JS dependencies.

use crossing_profiler::data::{
    augment_noise, preprocess, split_even_odd, synthesize_crossing, AlignedSequence, SceneConfig,
};
use crossing_profiler::layers::positional_encoding;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Curve {
    positions: Vec<f64>,
    values: Vec<f64>,
}

impl Curve {
    fn gps(seq: &AlignedSequence) -> Self {
        Curve {
            positions: seq.positions(),
            values: seq.gps_profile(),
        }
    }

    fn target(seq: &AlignedSequence) -> Self {
        Curve {
            positions: seq.positions(),
            values: seq.target(),
        }
    }
}

#[derive(Serialize)]
struct Scene {
    crossing_id: String,
    samples: usize,
    peak_index: usize,
    profiler: Curve,
    gps: Curve,
    pitch: Curve,
    accel_z: Curve,
}

#[derive(Serialize)]
struct Augmentation {
    original: Curve,
    noisy: Curve,
    even: Curve,
    odd: Curve,
    target: Curve,
}

fn aligned(hump_height: f64, speed_kmh: f64, seed: u64) -> Result<AlignedSequence, String> {
    let scene = SceneConfig {
        hump_height,
        speed_kmh,
        rng_seed: seed,
        crossing_id: format!("demo-{seed}"),
        ..SceneConfig::default()
    };
    let record = synthesize_crossing(&scene).map_err(|e| e.to_string())?;
    preprocess(&record).map_err(|e| e.to_string())
}

fn column(seq: &AlignedSequence, c: usize) -> Curve {
    Curve {
        positions: seq.positions(),
        values: seq.data.column(c),
    }
}

/// Synthesizes, aligns and returns one crossing as JSON.
pub fn scene_json(hump_height: f64, speed_kmh: f64, seed: u64) -> Result<String, String> {
    let seq = aligned(hump_height, speed_kmh, seed)?;
    let out = Scene {
        crossing_id: seq.source_id.clone(),
        samples: seq.len(),
        peak_index: seq.peak_index,
        profiler: Curve::target(&seq),
        gps: Curve::gps(&seq),
        pitch: column(&seq, 4),
        accel_z: column(&seq, 2),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// One noisy copy and one even/odd pair of the aligned crossing, as JSON.
pub fn augmentation_json(hump_height: f64, speed_kmh: f64, seed: u64) -> Result<String, String> {
    let seq = aligned(hump_height, speed_kmh, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let noisy = augment_noise(&seq, &mut rng);
    let (even, odd) = split_even_odd(&augment_noise(&seq, &mut rng)).map_err(|e| e.to_string())?;
    let mut odd_curve = Curve::gps(&odd);
    // Odd rows start one original sample in.
    odd_curve.positions.iter_mut().for_each(|x| *x += seq.spacing_m);
    let out = Augmentation {
        original: Curve::gps(&seq),
        noisy: Curve::gps(&noisy),
        even: Curve::gps(&even),
        odd: odd_curve,
        target: Curve::target(&seq),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn synthesize_scene(hump_height: f64, speed_kmh: f64, seed: u32) -> Result<String, JsError> {
    scene_json(hump_height, speed_kmh, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn augmentation_preview(hump_height: f64, speed_kmh: f64, seed: u32) -> Result<String, JsError> {
    augmentation_json(hump_height, speed_kmh, seed as u64).map_err(|e| JsError::new(&e))
}

/// Row-major `len x width` sinusoidal encoding table.
#[wasm_bindgen]
pub fn positional_encoding_grid(len: usize, width: usize) -> Result<Vec<f64>, JsError> {
    positional_encoding(len, width)
        .map(|t| t.into_data())
        .map_err(|e| JsError::new(&e.to_string()))
}
