//! Sensor time-series ingestion and dataset-wide normalization.
//!
//! Raw rows of `(sensor_id, timestamp, value)` become one [`SensorSeries`]
//! per sensor, grouped and sorted by time, with short gaps interpolated and
//! anything suspicious rejected loudly. A [`Dataset`] owns the fleet plus
//! the normalization statistics shared by every later stage.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors raised while loading or transforming sensor data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("missing column {0:?} in header")]
    MissingColumn(String),
    #[error("file contains no data rows")]
    Empty,
    #[error("sensor {sensor}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { sensor: String, timestamp: i64 },
    #[error(
        "sensor {sensor}: {missing} consecutive cadence slots missing before t={at} \
         (limit {limit}); fill the gap or drop the sensor"
    )]
    GapTooLong {
        sensor: String,
        missing: usize,
        at: i64,
        limit: usize,
    },
    #[error(
        "sensor {sensor}: timestamp step {delta}s before t={at} is not a multiple of \
         the cadence {cadence}s"
    )]
    IrregularCadence {
        sensor: String,
        at: i64,
        delta: i64,
        cadence: i64,
    },
    #[error("sensor {sensor}: series has {len} points, need at least 2")]
    SeriesTooShort { sensor: String, len: usize },
    #[error("sensor {sensor}: timestamps not strictly increasing at t={at}")]
    NonMonotonic { sensor: String, at: i64 },
    #[error("sensor {sensor}: non-finite value at t={at}")]
    NonFinite { sensor: String, at: i64 },
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error("dataset is not normalized")]
    NotNormalized,
    #[error("degenerate dataset: pooled variance is zero")]
    DegenerateDataset,
}

/// One sensor's timestamped measurement sequence (soil water potential, kPa).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSeries {
    pub sensor_id: String,
    /// Epoch seconds, strictly increasing.
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
}

impl SensorSeries {
    /// Validates the series invariants: matching lengths, length >= 2,
    /// strictly increasing timestamps, finite values.
    pub fn new(sensor_id: String, timestamps: Vec<i64>, values: Vec<f64>) -> Result<Self, DataError> {
        if timestamps.len() != values.len() || timestamps.len() < 2 {
            return Err(DataError::SeriesTooShort {
                sensor: sensor_id,
                len: timestamps.len().min(values.len()),
            });
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(DataError::NonMonotonic {
                    sensor: sensor_id,
                    at: w[1],
                });
            }
        }
        if let Some(ix) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                sensor: sensor_id,
                at: timestamps[ix],
            });
        }
        Ok(Self {
            sensor_id,
            timestamps,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Scale convention for normalization. `Std` is the usual z-score;
/// `Variance` divides by the raw variance instead (changes units, kept as
/// a literal reproduction mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    #[default]
    Std,
    Variance,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleMode::Std => write!(f, "std"),
            ScaleMode::Variance => write!(f, "variance"),
        }
    }
}

/// Pooled statistics recorded when a dataset is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub scale: f64,
    pub mode: ScaleMode,
}

/// An ordered fleet of sensor series plus normalization state.
///
/// Immutable after construction; transformations return new datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series: Vec<SensorSeries>,
    pub norm_stats: Option<NormStats>,
    pub normalized: bool,
}

/// Sidecar metadata written next to a canonical dataset CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub normalized: bool,
    pub norm_stats: Option<NormStats>,
}

/// Column layout and ingestion policy for [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub sensor_col: String,
    pub timestamp_col: String,
    pub value_col: String,
    /// Expected spacing between samples; inferred per series when `None`.
    pub cadence_seconds: Option<i64>,
    /// Gaps of up to this many missing slots are linearly interpolated.
    pub max_gap_slots: usize,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            sensor_col: "sensor_id".into(),
            timestamp_col: "timestamp".into(),
            value_col: "value".into(),
            cadence_seconds: None,
            max_gap_slots: 2,
        }
    }
}

enum TimestampFormat {
    Epoch,
    Iso,
}

fn parse_iso(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

/// Load raw sensor rows and assemble the fleet.
///
/// Rows are grouped per sensor and sorted by timestamp. The timestamp
/// format (integer epoch seconds or ISO-8601) is auto-detected from the
/// first data row and applied to the whole file. Gaps of at most
/// `schema.max_gap_slots` cadence slots are linearly interpolated; longer
/// gaps, duplicate timestamps, and unparseable rows are hard errors.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| DataError::Row {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let sensor_ix = col(&schema.sensor_col)?;
    let ts_ix = col(&schema.timestamp_col)?;
    let value_ix = col(&schema.value_col)?;

    let mut format: Option<TimestampFormat> = None;
    // Preserve first-seen order only for detection; output order is by id.
    let mut rows: HashMap<String, Vec<(i64, f64)>> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| DataError::Row {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |ix: usize| {
            record.get(ix).ok_or(DataError::Row {
                line,
                msg: format!("missing field {ix}"),
            })
        };
        let sensor = field(sensor_ix)?.trim().to_string();
        let ts_raw = field(ts_ix)?.trim();
        let value_raw = field(value_ix)?.trim();

        if format.is_none() {
            format = Some(if ts_raw.parse::<i64>().is_ok() {
                TimestampFormat::Epoch
            } else {
                TimestampFormat::Iso
            });
        }
        let ts = match format.as_ref().unwrap() {
            TimestampFormat::Epoch => ts_raw.parse::<i64>().ok(),
            TimestampFormat::Iso => parse_iso(ts_raw),
        }
        .ok_or_else(|| DataError::Row {
            line,
            msg: format!("unparseable timestamp {ts_raw:?}"),
        })?;
        let value = value_raw.parse::<f64>().map_err(|_| DataError::Row {
            line,
            msg: format!("unparseable value {value_raw:?}"),
        })?;
        if !value.is_finite() {
            return Err(DataError::Row {
                line,
                msg: format!("non-finite value {value_raw:?}"),
            });
        }
        rows.entry(sensor).or_default().push((ts, value));
    }

    if rows.is_empty() {
        return Err(DataError::Empty);
    }

    let mut ids: Vec<String> = rows.keys().cloned().collect();
    ids.sort();
    let mut series = Vec::with_capacity(ids.len());
    for id in ids {
        let mut points = rows.remove(&id).unwrap();
        points.sort_by_key(|(t, _)| *t);
        for w in points.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(DataError::DuplicateTimestamp {
                    sensor: id,
                    timestamp: w[0].0,
                });
            }
        }
        series.push(fill_gaps(id, points, schema)?);
    }

    Dataset::from_series(series)
}

/// Interpolate short gaps on the cadence grid; reject long or irregular ones.
fn fill_gaps(
    sensor_id: String,
    points: Vec<(i64, f64)>,
    schema: &CsvSchema,
) -> Result<SensorSeries, DataError> {
    if points.len() < 2 {
        return Err(DataError::SeriesTooShort {
            sensor: sensor_id,
            len: points.len(),
        });
    }
    let cadence = match schema.cadence_seconds {
        Some(c) => c,
        None => points
            .windows(2)
            .map(|w| w[1].0 - w[0].0)
            .min()
            .expect("len >= 2"),
    };

    let mut timestamps = Vec::with_capacity(points.len());
    let mut values = Vec::with_capacity(points.len());
    timestamps.push(points[0].0);
    values.push(points[0].1);
    for w in points.windows(2) {
        let (t0, v0) = w[0];
        let (t1, v1) = w[1];
        let delta = t1 - t0;
        if delta % cadence != 0 {
            return Err(DataError::IrregularCadence {
                sensor: sensor_id,
                at: t1,
                delta,
                cadence,
            });
        }
        let missing = (delta / cadence - 1) as usize;
        if missing > schema.max_gap_slots {
            return Err(DataError::GapTooLong {
                sensor: sensor_id,
                missing,
                at: t1,
                limit: schema.max_gap_slots,
            });
        }
        for k in 1..=missing {
            let frac = k as f64 / (missing + 1) as f64;
            timestamps.push(t0 + cadence * k as i64);
            values.push(v0 + (v1 - v0) * frac);
        }
        timestamps.push(t1);
        values.push(v1);
    }
    SensorSeries::new(sensor_id, timestamps, values)
}

impl Dataset {
    /// Build a raw (unnormalized) dataset, validating every series.
    pub fn from_series(series: Vec<SensorSeries>) -> Result<Self, DataError> {
        let series = series
            .into_iter()
            .map(|s| SensorSeries::new(s.sensor_id, s.timestamps, s.values))
            .collect::<Result<Vec<_>, _>>()?;
        if series.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self {
            series,
            norm_stats: None,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    fn pooled_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in &self.series {
            sum += s.values.iter().sum::<f64>();
            count += s.values.len();
        }
        sum / count as f64
    }

    /// Replace every value `v` by `(v - mean) / scale`, with `mean` and the
    /// population variance pooled over all values of all series. `scale` is
    /// the standard deviation for [`ScaleMode::Std`] and the raw variance
    /// for [`ScaleMode::Variance`].
    pub fn normalize(&self, mode: ScaleMode) -> Result<Dataset, DataError> {
        if self.normalized {
            return Err(DataError::AlreadyNormalized);
        }
        let mean = self.pooled_mean();
        let mut sq = 0.0;
        let mut count = 0usize;
        for s in &self.series {
            sq += s.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            count += s.values.len();
        }
        let variance = sq / count as f64;
        if variance <= 0.0 {
            return Err(DataError::DegenerateDataset);
        }
        let scale = match mode {
            ScaleMode::Std => variance.sqrt(),
            ScaleMode::Variance => variance,
        };
        let series = self
            .series
            .iter()
            .map(|s| SensorSeries {
                sensor_id: s.sensor_id.clone(),
                timestamps: s.timestamps.clone(),
                values: s.values.iter().map(|v| (v - mean) / scale).collect(),
            })
            .collect();
        let out = Dataset {
            series,
            norm_stats: Some(NormStats { mean, scale, mode }),
            normalized: true,
        };
        debug_assert!(out.pooled_mean().abs() < 1e-9);
        Ok(out)
    }

    /// Undo [`Dataset::normalize`] using the recorded stats.
    pub fn denormalize(&self) -> Result<Dataset, DataError> {
        let stats = self.norm_stats.ok_or(DataError::NotNormalized)?;
        let series = self
            .series
            .iter()
            .map(|s| SensorSeries {
                sensor_id: s.sensor_id.clone(),
                timestamps: s.timestamps.clone(),
                values: s.values.iter().map(|v| v * stats.scale + stats.mean).collect(),
            })
            .collect();
        Ok(Dataset {
            series,
            norm_stats: None,
            normalized: false,
        })
    }

    /// Canonical CSV serialization: `sensor_id,timestamp,value`, series in
    /// dataset order, rows by timestamp, timestamps as epoch seconds and
    /// values in shortest round-trip decimal form.
    pub fn canonical_csv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["sensor_id", "timestamp", "value"]).unwrap();
            for s in &self.series {
                for (t, v) in s.timestamps.iter().zip(&s.values) {
                    w.write_record([s.sensor_id.as_str(), &t.to_string(), &v.to_string()])
                        .unwrap();
                }
            }
            w.flush().unwrap();
        }
        out
    }

    /// SHA-256 of the canonical serialization; stages use it to detect
    /// stale caches.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_csv_bytes());
        hasher.update([self.normalized as u8]);
        hex(&hasher.finalize())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            normalized: self.normalized,
            norm_stats: self.norm_stats,
        }
    }

    /// Write the canonical CSV, prefixed by optional `# key=value` comment
    /// lines (readers skip `#` comments).
    pub fn write_csv<W: Write>(&self, mut w: W, comments: &[String]) -> std::io::Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        w.write_all(&self.canonical_csv_bytes())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn ds(pooled: &[f64]) -> Dataset {
        // One series carrying the pooled values (timestamps are irrelevant
        // to normalization).
        let ts: Vec<i64> = (0..pooled.len() as i64).map(|i| i * 14400).collect();
        Dataset::from_series(vec![SensorSeries::new(
            "a".into(),
            ts,
            pooled.to_vec(),
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn load_single_sensor() {
        let f = write_temp("sensor_id,timestamp,value\na,0,-10\na,14400,-20\na,28800,-30\n");
        let d = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.series[0].values, vec![-10.0, -20.0, -30.0]);
        assert!(!d.normalized);
    }

    #[test]
    fn load_two_sensors_884_rows() {
        let mut content = String::from("sensor_id,timestamp,value\n");
        for s in ["a", "b"] {
            for i in 0..884i64 {
                content.push_str(&format!("{s},{},{}\n", i * 14400, -(i as f64) * 0.1));
            }
        }
        let f = write_temp(&content);
        let d = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.series.iter().all(|s| s.len() == 884));
    }

    #[test]
    fn load_iso_timestamps() {
        let f = write_temp(
            "sensor_id,timestamp,value\n\
             a,2007-04-01T00:00:00,-10\na,2007-04-01T04:00:00,-20\n",
        );
        let d = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(d.series[0].timestamps[1] - d.series[0].timestamps[0], 14400);
    }

    #[test]
    fn duplicate_timestamp_is_error() {
        let f = write_temp("sensor_id,timestamp,value\na,0,-1\na,0,-2\na,14400,-3\n");
        let err = load_csv(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, DataError::DuplicateTimestamp { .. }), "{err}");
    }

    #[test]
    fn unparseable_row_reports_line() {
        let f = write_temp("sensor_id,timestamp,value\na,0,-1\na,14400,oops\n");
        match load_csv(f.path(), &CsvSchema::default()).unwrap_err() {
            DataError::Row { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn short_gap_is_interpolated() {
        // Two missing slots between t=0 and t=43200.
        let f = write_temp("sensor_id,timestamp,value\na,0,0\na,43200,-30\na,57600,-40\n");
        let d = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(d.series[0].timestamps, vec![0, 14400, 28800, 43200, 57600]);
        assert_eq!(d.series[0].values, vec![0.0, -10.0, -20.0, -30.0, -40.0]);
    }

    #[test]
    fn long_gap_names_the_sensor() {
        let mut schema = CsvSchema::default();
        schema.cadence_seconds = Some(14400);
        let f = write_temp("sensor_id,timestamp,value\nbad,0,0\nbad,72000,-1\n");
        match load_csv(f.path(), &schema).unwrap_err() {
            DataError::GapTooLong { sensor, missing, .. } => {
                assert_eq!(sensor, "bad");
                assert_eq!(missing, 4);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn normalize_hand_case() {
        let d = ds(&[1.0, 2.0, 3.0]).normalize(ScaleMode::Std).unwrap();
        let stats = d.norm_stats.unwrap();
        assert!((stats.mean - 2.0).abs() < 1e-15);
        assert!((stats.scale - 0.816496580927726).abs() < 1e-12);
        assert!((d.series[0].values[0] + 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_is_degenerate() {
        let err = ds(&[5.0, 5.0, 5.0]).normalize(ScaleMode::Std).unwrap_err();
        assert!(matches!(err, DataError::DegenerateDataset));
    }

    #[test]
    fn normalize_identity_case() {
        // Already zero-mean unit-std data stays put.
        let vals = [-1.224744871391589, 0.0, 1.224744871391589];
        let d = ds(&vals).normalize(ScaleMode::Std).unwrap();
        for (a, b) in d.series[0].values.iter().zip(vals.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_mode_divides_by_variance() {
        let d = ds(&[1.0, 2.0, 3.0]).normalize(ScaleMode::Variance).unwrap();
        let stats = d.norm_stats.unwrap();
        assert!((stats.scale - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.series[0].values[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn normalize_roundtrip() {
        let vals: Vec<f64> = (0..200).map(|i| -0.5 * i as f64 + ((i * 7) % 13) as f64).collect();
        let raw = ds(&vals);
        let back = raw.normalize(ScaleMode::Std).unwrap().denormalize().unwrap();
        for (a, b) in back.series[0].values.iter().zip(&vals) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_preserves_ordering() {
        let vals = [3.0, -7.0, 12.0, 0.5, -2.0, 8.0];
        let d = ds(&vals).normalize(ScaleMode::Std).unwrap();
        let normed = &d.series[0].values;
        for i in 0..vals.len() {
            for j in 0..vals.len() {
                assert_eq!(vals[i] < vals[j], normed[i] < normed[j]);
            }
        }
    }

    #[test]
    fn canonical_serialization_roundtrips() {
        let f = write_temp("sensor_id,timestamp,value\nb,14400,-2.5\nb,0,-1.25\na,0,-3\na,14400,-4\n");
        let d = load_csv(f.path(), &CsvSchema::default()).unwrap();
        // Series sorted by id, rows sorted by time.
        assert_eq!(d.series[0].sensor_id, "a");
        assert_eq!(d.series[1].values, vec![-1.25, -2.5]);

        let bytes = d.canonical_csv_bytes();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f2.path(), &bytes).unwrap();
        let d2 = load_csv(f2.path(), &CsvSchema::default()).unwrap();
        assert_eq!(bytes, d2.canonical_csv_bytes());
        assert_eq!(d.content_hash(), d2.content_hash());
    }
}
