//! Crossing records, preprocessing, augmentation and dataset bundles.
//!
//! A [`RawCrossingRecord`] holds one drive over a crossing: seven IMU/GPS
//! channels on a uniform distance grid plus the walking-profiler elevation.
//! [`preprocess`] turns it into an [`AlignedSequence`] (8 columns, peaks
//! aligned), and [`build_dataset`] augments, splits and standardizes a set of
//! aligned sources into a [`DatasetBundle`].

mod augment;
mod csv_io;
mod dataset;
mod preprocess;
mod synth;

pub use augment::{augment_downsample, augment_noise, interleave, split_even_odd, NOISE_FRACTION, TRUNCATION_SDS};
pub use csv_io::{
    export_raw_csv, export_sequence_csv, ingest_raw_csv, ingest_sequence_csv, read_raw_dir, SequenceFile,
    RAW_COLUMNS, SEQUENCE_COLUMNS,
};
pub use dataset::{
    build_dataset, source_seed, AugmentationPlan, DatasetBundle, Split, Standardization, StandardizedSequence,
    BUNDLE_MANIFEST,
};
pub use preprocess::{
    align_by_peak, argmax, merge_channels, normalize_gps_altitude, preprocess, resample_to_length,
    PeakWindow, MIN_HALF_WINDOW,
};
pub use synth::{synthesize_corpus, synthesize_crossing, NoiseLevels, SceneConfig, SynthConfig, GRAVITY};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of model input channels.
pub const INPUT_CHANNELS: usize = 7;
/// Column of the normalized GPS profile in an aligned sequence.
pub const GPS_COLUMN: usize = 6;
/// Column of the profiler target in an aligned sequence.
pub const TARGET_COLUMN: usize = 7;
/// Records and aligned sequences shorter than this are rejected.
pub const MIN_RECORD_LEN: usize = 32;

/// One drive over a crossing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCrossingRecord {
    pub crossing_id: String,
    pub collection_speed_kmh: f64,
    pub sampling_interval_m: f64,
    /// N×7: accel x/y/z (m/s²), roll, pitch (rad), speed (m/s), GPS altitude (m).
    pub imu_gps: Tensor,
    /// Profiler elevation (m), sampled on the same grid as `imu_gps`.
    pub profiler: Vec<f64>,
    /// Grid index of the first profiler sample.
    pub profiler_offset: usize,
}

impl RawCrossingRecord {
    pub fn len(&self) -> usize {
        self.imu_gps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.crossing_id;
        if self.imu_gps.rank() != 2 || self.imu_gps.cols() != INPUT_CHANNELS {
            return Err(Error::shape("RawCrossingRecord", self.imu_gps.shape(), &[self.len(), INPUT_CHANNELS]));
        }
        if self.len() < MIN_RECORD_LEN || self.profiler.len() < MIN_RECORD_LEN {
            return Err(Error::contract(format!(
                "{id}: need at least {MIN_RECORD_LEN} IMU and profiler samples, got {} and {}",
                self.len(),
                self.profiler.len()
            )));
        }
        if self.profiler_offset + self.profiler.len() > self.len() {
            return Err(Error::contract(format!("{id}: profiler samples extend past the IMU/GPS grid")));
        }
        if !(self.sampling_interval_m > 0.0) {
            return Err(Error::contract(format!("{id}: sampling interval must be positive")));
        }
        if let Some(i) = (0..self.len()).find(|&i| !(self.imu_gps.get(i, 5) > 0.0)) {
            return Err(Error::contract(format!("{id}: speed must be positive (row {i})")));
        }
        Ok(())
    }
}

/// An N×8 sequence: seven input channels followed by the profiler target.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSequence {
    pub source_id: String,
    pub data: Tensor,
    /// Row of the profile crest, the argmax of the target column.
    pub peak_index: usize,
    pub spacing_m: f64,
}

impl AlignedSequence {
    /// Wraps `data`, locating the peak from the target column.
    pub fn new(source_id: impl Into<String>, data: Tensor, spacing_m: f64) -> Result<Self> {
        if data.rank() != 2 || data.cols() != INPUT_CHANNELS + 1 {
            return Err(Error::shape("AlignedSequence", data.shape(), &[data.shape()[0], INPUT_CHANNELS + 1]));
        }
        let peak_index = argmax(&data.column(TARGET_COLUMN)).expect("tensor rows are positive");
        Ok(AlignedSequence {
            source_id: source_id.into(),
            data,
            peak_index,
            spacing_m,
        })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The N×7 input block.
    pub fn inputs(&self) -> Tensor {
        self.data.slice_cols(0, INPUT_CHANNELS)
    }

    pub fn target(&self) -> Vec<f64> {
        self.data.column(TARGET_COLUMN)
    }

    pub fn gps_profile(&self) -> Vec<f64> {
        self.data.column(GPS_COLUMN)
    }

    /// Distance of each row from the first, in meters.
    pub fn positions(&self) -> Vec<f64> {
        (0..self.len()).map(|i| i as f64 * self.spacing_m).collect()
    }
}
