//! CSV formats.
//!
//! Raw records carry `# key=value` metadata lines before the header and leave
//! `wp_profile` blank where the profiler has no sample. Values are written
//! with 17 significant digits so that a write/read cycle is bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::dataset::StandardizedSequence;
use super::{AlignedSequence, RawCrossingRecord, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RAW_COLUMNS: [&str; 9] = [
    "position_m",
    "accel_x",
    "accel_y",
    "accel_z",
    "roll",
    "pitch",
    "speed",
    "gps_altitude",
    "wp_profile",
];

pub const SEQUENCE_COLUMNS: [&str; 9] = [
    "position_m",
    "accel_x",
    "accel_y",
    "accel_z",
    "roll",
    "pitch",
    "speed",
    "gps_profile",
    "wp_profile",
];

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

struct Table {
    path: String,
    metadata: Vec<(String, String)>,
    header_line: u64,
    columns: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let metadata = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .filter_map(|l| l[1..].split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let parse_err = |line: u64, message: String| Error::Parse {
            path: name.clone(),
            line,
            message,
        };
        let csv_err = |e: csv::Error| {
            let line = e.position().map_or(0, |p| p.line());
            let message = match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    format!("row has {len} fields, expected {expected_len}")
                }
                _ => e.to_string(),
            };
            parse_err(line, message)
        };
        let headers = reader.headers().map_err(csv_err)?.clone();
        let header_line = text.lines().take_while(|l| l.starts_with('#') || l.trim().is_empty()).count() as u64 + 1;
        if headers.is_empty() || headers.iter().all(str::is_empty) {
            return Err(parse_err(header_line, "missing header row".into()));
        }
        let mut columns = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if columns.insert(h.to_string(), i).is_some() {
                return Err(parse_err(header_line, format!("duplicate column `{h}`")));
            }
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Table {
            path: name,
            metadata,
            header_line,
            columns,
            rows,
        })
    }

    fn err(&self, line: u64, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .get(name)
            .copied()
            .ok_or_else(|| self.err(self.header_line, format!("missing column `{name}`")))
    }

    fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn number(&self, line: u64, rec: &csv::StringRecord, col: usize, name: &str) -> Result<f64> {
        self.optional(line, rec, col, name)?
            .ok_or_else(|| self.err(line, format!("column `{name}`: empty cell")))
    }

    fn optional(&self, line: u64, rec: &csv::StringRecord, col: usize, name: &str) -> Result<Option<f64>> {
        let cell = rec.get(col).unwrap_or("");
        if cell.is_empty() {
            return Ok(None);
        }
        cell.parse::<f64>()
            .map(Some)
            .map_err(|_| self.err(line, format!("column `{name}`: `{cell}` is not a number")))
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn finish(path: &Path, mut w: std::io::BufWriter<fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn export_raw_csv(record: &RawCrossingRecord, path: &Path) -> Result<()> {
    record.validate()?;
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    writeln!(w, "# crossing_id={}", record.crossing_id).map_err(io)?;
    writeln!(w, "# collection_speed_kmh={}", record.collection_speed_kmh).map_err(io)?;
    writeln!(w, "# sampling_interval_m={}", record.sampling_interval_m).map_err(io)?;
    writeln!(w, "{}", RAW_COLUMNS.join(",")).map_err(io)?;
    let prof = record.profiler_offset..record.profiler_offset + record.profiler.len();
    let mut line = String::new();
    for i in 0..record.len() {
        line.clear();
        line.push_str(&fmt(i as f64 * record.sampling_interval_m));
        for v in record.imu_gps.row(i) {
            line.push(',');
            line.push_str(&fmt(*v));
        }
        line.push(',');
        if prof.contains(&i) {
            line.push_str(&fmt(record.profiler[i - prof.start]));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    finish(path, w)
}

pub fn ingest_raw_csv(path: &Path) -> Result<RawCrossingRecord> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = RAW_COLUMNS.iter().map(|c| t.column(c)).collect::<Result<_>>()?;
    if t.rows.is_empty() {
        return Err(t.err(t.header_line, "no data rows"));
    }
    let mut imu = Vec::with_capacity(t.rows.len() * INPUT_CHANNELS);
    let mut positions = Vec::with_capacity(t.rows.len());
    let mut profiler = Vec::new();
    let mut offset = None;
    let mut profiler_ended = false;
    for (i, (line, rec)) in t.rows.iter().enumerate() {
        positions.push(t.number(*line, rec, cols[0], RAW_COLUMNS[0])?);
        for k in 1..=INPUT_CHANNELS {
            imu.push(t.number(*line, rec, cols[k], RAW_COLUMNS[k])?);
        }
        match t.optional(*line, rec, cols[8], "wp_profile")? {
            Some(_) if profiler_ended => {
                return Err(t.err(*line, "wp_profile samples must form one contiguous block"));
            }
            Some(v) => {
                offset.get_or_insert(i);
                profiler.push(v);
            }
            None => profiler_ended |= offset.is_some(),
        }
    }
    let n = positions.len();
    let offset = offset.ok_or_else(|| t.err(t.header_line, "column `wp_profile` has no values"))?;
    let crossing_id = t.meta("crossing_id").map(str::to_string).unwrap_or_else(|| {
        path.file_stem().map_or_else(|| "unnamed".into(), |s| s.to_string_lossy().into_owned())
    });
    let meta_number = |key: &str| -> Result<Option<f64>> {
        t.meta(key)
            .map(|v| v.parse::<f64>().map_err(|_| t.err(1, format!("metadata `{key}`: `{v}` is not a number"))))
            .transpose()
    };
    let sampling_interval_m = match meta_number("sampling_interval_m")? {
        Some(v) => v,
        None if n >= 2 => positions[1] - positions[0],
        None => return Err(t.err(t.header_line, "cannot infer the sampling interval from one row")),
    };
    let imu_gps = Tensor::matrix(n, INPUT_CHANNELS, imu)?;
    let collection_speed_kmh = match meta_number("collection_speed_kmh")? {
        Some(v) => v,
        None => imu_gps.column(5).iter().sum::<f64>() / n as f64 * 3.6,
    };
    let record = RawCrossingRecord {
        crossing_id,
        collection_speed_kmh,
        sampling_interval_m,
        imu_gps,
        profiler,
        profiler_offset: offset,
    };
    record.validate().map_err(|e| t.err(t.header_line, e.to_string()))?;
    Ok(record)
}

/// Every `*.csv` in `dir`, in file-name order.
pub fn read_raw_dir(dir: &Path) -> Result<Vec<RawCrossingRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    paths.sort();
    paths.iter().map(|p| ingest_raw_csv(p)).collect()
}

/// A sequence CSV; the target column is optional.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFile {
    pub positions: Vec<f64>,
    /// N×7 input channels.
    pub inputs: Tensor,
    pub target: Option<Vec<f64>>,
}

impl SequenceFile {
    pub fn into_aligned(self, source_id: impl Into<String>) -> Result<AlignedSequence> {
        let source_id = source_id.into();
        let target = self
            .target
            .ok_or_else(|| Error::contract(format!("{source_id}: sequence has no wp_profile column")))?;
        let n = self.inputs.rows();
        let data: Vec<f64> = (0..n)
            .flat_map(|i| self.inputs.row(i).iter().copied().chain([target[i]]))
            .collect();
        let spacing = if n >= 2 { self.positions[1] - self.positions[0] } else { 1.0 };
        AlignedSequence::new(source_id, Tensor::matrix(n, INPUT_CHANNELS + 1, data)?, spacing)
    }
}

fn write_sequence_rows(
    w: &mut impl Write,
    prefix: &str,
    data: &Tensor,
    spacing: f64,
) -> std::io::Result<()> {
    let mut line = String::new();
    for i in 0..data.rows() {
        line.clear();
        line.push_str(prefix);
        line.push_str(&fmt(i as f64 * spacing));
        for v in data.row(i) {
            line.push(',');
            line.push_str(&fmt(*v));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn export_sequence_csv(seq: &AlignedSequence, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    writeln!(w, "{}", SEQUENCE_COLUMNS.join(",")).map_err(io)?;
    write_sequence_rows(&mut w, "", &seq.data, seq.spacing_m).map_err(io)?;
    finish(path, w)
}

pub fn ingest_sequence_csv(path: &Path) -> Result<SequenceFile> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = SEQUENCE_COLUMNS[..8].iter().map(|c| t.column(c)).collect::<Result<_>>()?;
    let target_col = t.columns.get("wp_profile").copied();
    if t.rows.is_empty() {
        return Err(t.err(t.header_line, "no data rows"));
    }
    let mut positions = Vec::with_capacity(t.rows.len());
    let mut inputs = Vec::with_capacity(t.rows.len() * INPUT_CHANNELS);
    let mut target = Vec::new();
    for (line, rec) in &t.rows {
        positions.push(t.number(*line, rec, cols[0], SEQUENCE_COLUMNS[0])?);
        for k in 1..8 {
            inputs.push(t.number(*line, rec, cols[k], SEQUENCE_COLUMNS[k])?);
        }
        if let Some(c) = target_col {
            target.push(t.number(*line, rec, c, "wp_profile")?);
        }
    }
    let n = positions.len();
    Ok(SequenceFile {
        positions,
        inputs: Tensor::matrix(n, INPUT_CHANNELS, inputs)?,
        target: target_col.map(|_| target),
    })
}

pub(crate) fn write_bundle_split(path: &Path, seqs: &[StandardizedSequence]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    writeln!(w, "sequence,source_id,{}", SEQUENCE_COLUMNS.join(",")).map_err(io)?;
    for (k, s) in seqs.iter().enumerate() {
        write_sequence_rows(&mut w, &format!("{k},{},", s.source_id), &s.data, s.spacing_m).map_err(io)?;
    }
    finish(path, w)
}

pub(crate) fn read_bundle_split(path: &Path) -> Result<Vec<StandardizedSequence>> {
    let t = Table::read(path)?;
    let seq_col = t.column("sequence")?;
    let src_col = t.column("source_id")?;
    let cols: Vec<usize> = SEQUENCE_COLUMNS.iter().map(|c| t.column(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut current: Option<(u64, String, Vec<f64>, Vec<f64>)> = None;
    let flush = |cur: Option<(u64, String, Vec<f64>, Vec<f64>)>, out: &mut Vec<StandardizedSequence>| -> Result<()> {
        if let Some((_, source_id, pos, data)) = cur {
            let rows = pos.len();
            let spacing = if rows >= 2 { pos[1] - pos[0] } else { 1.0 };
            out.push(StandardizedSequence {
                source_id,
                spacing_m: spacing,
                data: Tensor::matrix(rows, INPUT_CHANNELS + 1, data)?,
            });
        }
        Ok(())
    };
    for (line, rec) in &t.rows {
        let idx: u64 = rec
            .get(seq_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| t.err(*line, "column `sequence`: expected an integer"))?;
        let src = rec.get(src_col).unwrap_or("").to_string();
        if current.as_ref().is_none_or(|c| c.0 != idx) {
            if idx != out.len() as u64 + current.is_some() as u64 {
                return Err(t.err(*line, format!("sequence {idx} is out of order")));
            }
            flush(current.take(), &mut out)?;
            current = Some((idx, src.clone(), Vec::new(), Vec::new()));
        }
        let cur = current.as_mut().expect("set above");
        if cur.1 != src {
            return Err(t.err(*line, format!("sequence {idx} mixes sources `{}` and `{src}`", cur.1)));
        }
        cur.2.push(t.number(*line, rec, cols[0], SEQUENCE_COLUMNS[0])?);
        for k in 1..9 {
            cur.3.push(t.number(*line, rec, cols[k], SEQUENCE_COLUMNS[k])?);
        }
    }
    flush(current, &mut out)?;
    Ok(out)
}
