use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    resample_to_length, AlignedSequence, DatasetBundle, Split, Standardization, StandardizedSequence,
    INPUT_CHANNELS, TARGET_COLUMN,
};
use crate::error::{Error, Result};
use crate::models::HybridModel;
use crate::numerics::Tensor;

/// Anything that maps a standardized sequence to a standardized profile.
pub trait Predictor: Sync {
    fn label(&self) -> String;

    /// `sequence` is L×8 and standardized. Column 8 holds the target and is
    /// only read by oracles.
    fn predict_standardized(&self, sequence: &Tensor) -> Result<Vec<f64>>;
}

impl Predictor for HybridModel {
    fn label(&self) -> String {
        self.spec().variant.label().to_string()
    }

    fn predict_standardized(&self, sequence: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(&sequence.slice_cols(0, INPUT_CHANNELS))?.into_data())
    }
}

/// Returns the stored target: a reference point with zero error.
pub struct Oracle;

impl Predictor for Oracle {
    fn label(&self) -> String {
        "Oracle".into()
    }

    fn predict_standardized(&self, sequence: &Tensor) -> Result<Vec<f64>> {
        Ok(sequence.column(TARGET_COLUMN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub dataset: String,
    /// `None` for the original sampling.
    pub downsample_factor: Option<usize>,
    pub sequences: usize,
    pub rmse_m: f64,
    pub mae_m: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,dataset,downsample_factor,sequences,rmse_m,mae_m\n");
        for r in &self.rows {
            let f = r.downsample_factor.map_or("-".to_string(), |f| f.to_string());
            s.push_str(&format!(
                "{},{},{f},{},{:.16e},{:.16e}\n",
                r.model, r.dataset, r.sequences, r.rmse_m, r.mae_m
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }
}

/// Pooled (rmse, mae) in meters over all positions of `seqs`.
pub(crate) fn score<P: Predictor + ?Sized>(
    p: &P,
    seqs: &[StandardizedSequence],
    stats: &Standardization,
) -> Result<(f64, f64)> {
    if seqs.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let sums: Vec<(f64, f64, usize)> = seqs
        .par_iter()
        .map(|s| {
            let pred = stats.destandardize_target(&p.predict_standardized(&s.data)?);
            let truth = stats.destandardize_target(&s.target());
            if pred.len() != truth.len() {
                return Err(Error::shape("predict", &[pred.len()], &[truth.len()]));
            }
            let sq = pred.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum();
            let ab = pred.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum();
            Ok((sq, ab, truth.len()))
        })
        .collect::<Result<_>>()?;
    let (sq, ab, n) = sums.iter().fold((0.0, 0.0, 0), |(a, b, c), (x, y, z)| (a + x, b + y, c + z));
    Ok(((sq / n as f64).sqrt(), ab / n as f64))
}

/// Train, validation and test rows for one model.
pub fn evaluate<P: Predictor + ?Sized>(p: &P, bundle: &DatasetBundle) -> Result<MetricsReport> {
    let rows = Split::ALL
        .iter()
        .map(|&s| {
            let seqs = bundle.split(s);
            let (rmse_m, mae_m) = score(p, seqs, &bundle.standardization)?;
            Ok(MetricRow {
                model: p.label(),
                dataset: s.name().into(),
                downsample_factor: None,
                sequences: seqs.len(),
                rmse_m,
                mae_m,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows })
}

/// Rows 0, f, 2f, ... of `seq`.
pub fn downsample_rows(seq: &AlignedSequence, factor: usize) -> Result<AlignedSequence> {
    if factor == 0 {
        return Err(Error::contract("down-sampling factor must be at least 1"));
    }
    let cols = seq.data.cols();
    let data: Vec<f64> = seq.data.data().chunks(cols).step_by(factor).flatten().copied().collect();
    let rows = data.len() / cols;
    AlignedSequence::new(seq.source_id.clone(), Tensor::matrix(rows, cols, data)?, seq.spacing_m * factor as f64)
}

/// One row per factor over sequences excluded from training.
///
/// `bundle`, when given, is checked for every held-out source id.
pub fn generalization_eval<P: Predictor + ?Sized>(
    p: &P,
    heldout: &[AlignedSequence],
    factors: &[usize],
    stats: &Standardization,
    sequence_length: usize,
    bundle: Option<&DatasetBundle>,
) -> Result<MetricsReport> {
    if heldout.is_empty() {
        return Err(Error::contract("no held-out sequences"));
    }
    if let Some(b) = bundle {
        if let Some(s) = heldout.iter().find(|s| b.contains_source(&s.source_id)) {
            return Err(Error::Leakage(s.source_id.clone()));
        }
    }
    let mut rows = Vec::new();
    for &f in factors {
        let seqs: Vec<StandardizedSequence> = heldout
            .iter()
            .map(|s| {
                let r = resample_to_length(&downsample_rows(s, f)?, sequence_length)?;
                Ok(StandardizedSequence {
                    source_id: r.source_id.clone(),
                    spacing_m: r.spacing_m,
                    data: stats.apply(&r.data),
                })
            })
            .collect::<Result<_>>()?;
        let (rmse_m, mae_m) = score(p, &seqs, stats)?;
        rows.push(MetricRow {
            model: p.label(),
            dataset: "heldout".into(),
            downsample_factor: (f > 1).then_some(f),
            sequences: seqs.len(),
            rmse_m,
            mae_m,
        });
    }
    Ok(MetricsReport { rows })
}
