//! Run-to-failure series: ingestion, decimation, windowing and min-max scaling.
//!
//! Preprocessing order is fixed: downsample, then cut windows, then fit the
//! normalizer on training series only and apply it everywhere.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unit's run-to-failure record.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub unit_id: String,
    /// `T` rows of `d` sensor readings.
    pub readings: Vec<Vec<f64>>,
    /// Remaining useful life per row, in cycles.
    pub rul: Vec<f64>,
    /// Seconds between rows. Informational only.
    pub sample_period: f64,
}

impl SensorSeries {
    pub fn new(unit_id: impl Into<String>, readings: Vec<Vec<f64>>, rul: Vec<f64>) -> Result<Self> {
        let s = SensorSeries {
            unit_id: unit_id.into(),
            readings,
            rul,
            sample_period: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    /// Number of sensor channels `d`.
    pub fn channels(&self) -> usize {
        self.readings.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.readings.is_empty() {
            return Err(Error::arg(format!("series {} has no rows", self.unit_id)));
        }
        let d = self.channels();
        if d == 0 {
            return Err(Error::arg(format!("series {} has no sensor channels", self.unit_id)));
        }
        if self.rul.len() != self.readings.len() {
            return Err(Error::Shape(format!(
                "series {}: {} rows but {} RUL values",
                self.unit_id,
                self.readings.len(),
                self.rul.len()
            )));
        }
        if let Some(t) = self.readings.iter().position(|r| r.len() != d) {
            return Err(Error::Shape(format!(
                "series {}: row {t} has {} channels, expected {d}",
                self.unit_id,
                self.readings[t].len()
            )));
        }
        if let Some(t) = self.rul.iter().position(|&r| !(r >= 0.0)) {
            return Err(Error::arg(format!(
                "series {}: RUL at row {t} is {} (must be >= 0)",
                self.unit_id, self.rul[t]
            )));
        }
        Ok(())
    }
}

/// Column mapping for delimited input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeriesSchema {
    pub unit: String,
    /// Optional cycle column; read and ignored when present.
    pub cycle: Option<String>,
    pub rul: String,
    /// Sensor columns in order. `None` takes every other column.
    pub sensors: Option<Vec<String>>,
    pub delimiter: u8,
}

impl Default for SeriesSchema {
    fn default() -> Self {
        SeriesSchema {
            unit: "unit".into(),
            cycle: Some("cycle".into()),
            rul: "rul".into(),
            sensors: None,
            delimiter: b',',
        }
    }
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

/// Reads a delimited file with a header row into one series per unit, in
/// order of first appearance. Rows keep file order within each unit.
pub fn load_series(path: &Path, schema: &SeriesSchema) -> Result<Vec<SensorSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let unit_col = find_column(&headers, &schema.unit)?;
    let rul_col = find_column(&headers, &schema.rul)?;
    let cycle_col = match &schema.cycle {
        Some(name) => headers.iter().position(|h| h.trim() == name),
        None => None,
    };
    let sensor_cols: Vec<usize> = match &schema.sensors {
        Some(names) => names
            .iter()
            .map(|n| find_column(&headers, n))
            .collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&i| i != unit_col && i != rul_col && Some(i) != cycle_col)
            .collect(),
    };
    if sensor_cols.is_empty() {
        return Err(Error::Schema("no sensor columns".into()));
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_unit: HashMap<String, (Vec<Vec<f64>>, Vec<f64>)> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        // header is line 1
        let line = record.position().map_or(0, |p| p.line());
        let parse = |col: usize, what: &str| -> Result<f64> {
            let cell = record.get(col).unwrap_or("").trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Ingest {
                    path: path.to_path_buf(),
                    line,
                    message: format!("unparseable {what} value `{cell}`"),
                })
        };
        let unit = record.get(unit_col).unwrap_or("").trim().to_string();
        let rul = parse(rul_col, "RUL")?;
        if rul < 0.0 {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                line,
                message: format!("negative RUL {rul}"),
            });
        }
        let row = sensor_cols
            .iter()
            .map(|&c| parse(c, headers.get(c).unwrap_or("sensor")))
            .collect::<Result<Vec<f64>>>()?;
        let entry = by_unit.entry(unit.clone()).or_insert_with(|| {
            order.push(unit.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(row);
        entry.1.push(rul);
    }

    order
        .into_iter()
        .map(|unit| {
            let (readings, rul) = by_unit.remove(&unit).expect("unit recorded on first sight");
            SensorSeries::new(unit, readings, rul)
        })
        .collect()
}

/// Writes series in the layout [`load_series`] reads with the default schema.
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_series(path: &Path, series: &[SensorSeries]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    let d = series.first().map_or(0, SensorSeries::channels);
    let mut header = String::from("unit,cycle,rul");
    for j in 1..=d {
        header.push_str(&format!(",s{j}"));
    }
    let werr = |e| Error::io(format!("writing {}", path.display()), e);
    writeln!(out, "{header}").map_err(werr)?;
    for s in series {
        if s.channels() != d {
            return Err(Error::Shape(format!(
                "series {} has {} channels, expected {d}",
                s.unit_id,
                s.channels()
            )));
        }
        for (t, (row, rul)) in s.readings.iter().zip(&s.rul).enumerate() {
            let mut line = format!("{},{t},{rul:?}", s.unit_id);
            for v in row {
                line.push_str(&format!(",{v:?}"));
            }
            writeln!(out, "{line}").map_err(werr)?;
        }
    }
    out.flush().map_err(werr)
}

/// Keeps rows `0, factor, 2*factor, ...`.
pub fn downsample(series: &SensorSeries, factor: usize) -> Result<SensorSeries> {
    if factor == 0 {
        return Err(Error::arg("downsample factor must be >= 1"));
    }
    Ok(SensorSeries {
        unit_id: series.unit_id.clone(),
        readings: series.readings.iter().step_by(factor).cloned().collect(),
        rul: series.rul.iter().step_by(factor).copied().collect(),
        sample_period: series.sample_period * factor as f64,
    })
}

/// A fixed-length slice of one series with the RUL channel appended as the
/// last column.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub unit_id: String,
    /// Segment key: integer part of the label.
    pub rul_level: f64,
    pub start: usize,
    /// `w` rows of `d + 1` values; column `d` is RUL.
    pub values: Vec<Vec<f64>>,
    /// RUL at the last row.
    pub label: f64,
}

impl Window {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of sensor channels, excluding RUL.
    pub fn sensors(&self) -> usize {
        self.values.first().map_or(0, |r| r.len().saturating_sub(1))
    }

    /// Sensor column `j` as a contiguous vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    /// Sensor readings only, `w` rows of `d`.
    pub fn sensor_rows(&self) -> Vec<Vec<f64>> {
        let d = self.sensors();
        self.values.iter().map(|r| r[..d].to_vec()).collect()
    }
}

pub type WindowSet = Vec<Window>;

/// Overlapping windows at starts `0, s, 2s, ...` with `start + w <= T`.
/// A series shorter than `w` yields no windows.
pub fn make_windows(series: &SensorSeries, w: usize, s: usize) -> Result<WindowSet> {
    if w == 0 || s == 0 {
        return Err(Error::arg(format!("window length and stride must be >= 1 (got w={w}, s={s})")));
    }
    let t_len = series.len();
    if t_len < w {
        return Ok(Vec::new());
    }
    Ok((0..=t_len - w)
        .step_by(s)
        .map(|start| {
            let values: Vec<Vec<f64>> = (start..start + w)
                .map(|t| {
                    let mut row = series.readings[t].clone();
                    row.push(series.rul[t]);
                    row
                })
                .collect();
            let label = series.rul[start + w - 1];
            Window {
                unit_id: series.unit_id.clone(),
                rul_level: label.trunc(),
                start,
                values,
                label,
            }
        })
        .collect())
}

/// Per-channel min and max fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizerParams {
    #[inline]
    pub fn scale(&self, j: usize, x: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span > 0.0 {
            (x - self.min[j]) / span
        } else {
            0.0
        }
    }
}

pub fn fit_normalizer(train: &[SensorSeries]) -> Result<NormalizerParams> {
    let d = train
        .first()
        .map(SensorSeries::channels)
        .ok_or_else(|| Error::arg("normalizer needs at least one training series"))?;
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for s in train {
        if s.channels() != d {
            return Err(Error::Shape(format!("series {} has {} channels, expected {d}", s.unit_id, s.channels())));
        }
        for row in &s.readings {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
    }
    Ok(NormalizerParams { min, max })
}

/// Maps each sensor channel through `(x - min) / (max - min)`. Constant
/// channels map to 0. Values are not clipped.
pub fn apply_normalizer(series: &SensorSeries, params: &NormalizerParams) -> Result<SensorSeries> {
    if series.channels() != params.min.len() {
        return Err(Error::Shape(format!(
            "series {} has {} channels, normalizer has {}",
            series.unit_id,
            series.channels(),
            params.min.len()
        )));
    }
    let readings = series
        .readings
        .iter()
        .map(|row| row.iter().enumerate().map(|(j, &x)| params.scale(j, x)).collect())
        .collect();
    Ok(SensorSeries {
        readings,
        ..series.clone()
    })
}

/// Record written to the window index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowIndexRecord {
    pub unit: String,
    pub rul_level: f64,
    pub start: usize,
    pub label: f64,
}

impl From<&Window> for WindowIndexRecord {
    fn from(w: &Window) -> Self {
        WindowIndexRecord {
            unit: w.unit_id.clone(),
            rul_level: w.rul_level,
            start: w.start,
            label: w.label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(t_len: usize, d: usize) -> SensorSeries {
        let readings = (0..t_len)
            .map(|t| (0..d).map(|j| (t * 10 + j) as f64).collect())
            .collect();
        let rul = (0..t_len).map(|t| (t_len - 1 - t) as f64).collect();
        SensorSeries::new("u1", readings, rul).unwrap()
    }

    fn random_series(rng: &mut ChaCha8Rng, t_len: usize, d: usize) -> SensorSeries {
        let readings = (0..t_len)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let rul = (0..t_len).map(|_| rng.random_range(0.0..300.0)).collect();
        SensorSeries::new("r", readings, rul).unwrap()
    }

    #[test]
    fn loads_two_units() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "unit,cycle,rul,s1,s2,s3\n1,0,2,0.1,0.2,0.3\n1,1,1,0.4,0.5,0.6\n2,0,1,1,2,3\n1,2,0,7,8,9\n2,1,0,4,5,6\n",
        )
        .unwrap();
        let series = load_series(&path, &SeriesSchema::default()).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].unit_id, "1");
        assert_eq!(series[0].channels(), 3);
        assert_eq!(series[0].len(), 3);
        assert_eq!(series[0].readings[2], vec![7.0, 8.0, 9.0]);
        assert_eq!(series[1].rul, vec![1.0, 0.0]);
    }

    #[test]
    fn bad_cell_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "unit,cycle,rul,s1\n1,0,2,0.1\n1,1,1,abc\n").unwrap();
        let err = load_series(&path, &SeriesSchema::default()).unwrap_err();
        match err {
            Error::Ingest { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_text(&path).contains("line 3"));
    }

    fn err_text(path: &Path) -> String {
        load_series(path, &SeriesSchema::default()).unwrap_err().to_string()
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "unit,cycle,s1\n1,0,0.1\n").unwrap();
        assert!(matches!(
            load_series(&path, &SeriesSchema::default()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn write_load_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = random_series(&mut rng, 40, 4);
        a.unit_id = "7".into();
        let mut b = random_series(&mut rng, 25, 4);
        b.unit_id = "9".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        write_series(&path, &[a.clone(), b.clone()]).unwrap();
        let back = load_series(&path, &SeriesSchema::default()).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn downsample_cases() {
        let s = ramp(100, 2);
        assert_eq!(downsample(&s, 1).unwrap().readings, s.readings);
        let ds = downsample(&s, 10).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.readings[0], s.readings[0]);
        assert_eq!(ds.readings[1], s.readings[10]);
        assert_eq!(ds.rul[1], s.rul[10]);
        assert!(downsample(&s, 0).is_err());
    }

    #[test]
    fn downsample_matches_index_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t_len = rng.random_range(1..80);
            let factor = rng.random_range(1..12);
            let s = random_series(&mut rng, t_len, 3);
            let ds = downsample(&s, factor).unwrap();
            let mut idx = Vec::new();
            let mut i = 0;
            while i < t_len {
                idx.push(i);
                i += factor;
            }
            assert_eq!(ds.len(), t_len.div_ceil(factor));
            for (k, &i) in idx.iter().enumerate() {
                assert_eq!(ds.readings[k], s.readings[i]);
                assert_eq!(ds.rul[k], s.rul[i]);
            }
        }
    }

    #[test]
    fn window_counts_at_boundaries() {
        assert_eq!(make_windows(&ramp(50, 2), 50, 1).unwrap().len(), 1);
        let w = make_windows(&ramp(52, 2), 50, 1).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(make_windows(&ramp(49, 2), 50, 1).unwrap().is_empty());
        assert!(make_windows(&ramp(49, 2), 0, 1).is_err());
    }

    #[test]
    fn window_labels_match_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_series(&mut rng, 120, 3);
        for w in make_windows(&s, 17, 4).unwrap() {
            assert_eq!(w.label, s.rul[w.start + 16]);
            assert_eq!(w.values.len(), 17);
            assert_eq!(w.values[16][3], w.label);
            assert_eq!(w.rul_level, w.label.trunc());
            assert_eq!(&w.values[0][..3], &s.readings[w.start][..]);
        }
    }

    #[test]
    fn normalizer_arithmetic() {
        let train = SensorSeries::new("a", vec![vec![2.0, 5.0], vec![4.0, 5.0]], vec![1.0, 0.0]).unwrap();
        let p = fit_normalizer(&[train]).unwrap();
        let probe = SensorSeries::new("b", vec![vec![3.0, 9.0], vec![6.0, 5.0]], vec![1.0, 0.0]).unwrap();
        let out = apply_normalizer(&probe, &p).unwrap();
        assert_eq!(out.readings[0], vec![0.5, 0.0]);
        // test-time values outside [0, 1] are kept
        assert_eq!(out.readings[1][0], 2.0);
    }

    #[test]
    fn normalizer_matches_formula_on_held_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let train: Vec<_> = (0..3).map(|_| random_series(&mut rng, 30, 4)).collect();
        let test = random_series(&mut rng, 30, 4);
        let p = fit_normalizer(&train).unwrap();
        let out = apply_normalizer(&test, &p).unwrap();
        for j in 0..4 {
            let lo = train.iter().flat_map(|s| s.readings.iter().map(move |r| r[j])).fold(f64::INFINITY, f64::min);
            let hi = train.iter().flat_map(|s| s.readings.iter().map(move |r| r[j])).fold(f64::NEG_INFINITY, f64::max);
            for t in 0..30 {
                assert_eq!(out.readings[t][j], (test.readings[t][j] - lo) / (hi - lo));
            }
        }
    }

    proptest! {
        #[test]
        fn window_count_formula(t_len in 1usize..200, w in 1usize..60, s in 1usize..15) {
            let series = ramp(t_len, 1);
            let n = make_windows(&series, w, s).unwrap().len();
            let expected = if t_len >= w { (t_len - w) / s + 1 } else { 0 };
            prop_assert_eq!(n, expected);
        }

        #[test]
        fn composed_downsample_length(k in 1usize..6, a in 1usize..5, b in 1usize..5) {
            let series = ramp(k * a * b, 1);
            let twice = downsample(&downsample(&series, a).unwrap(), b).unwrap();
            let once = downsample(&series, a * b).unwrap();
            prop_assert_eq!(twice.len(), once.len());
        }

        #[test]
        fn normalized_training_in_unit_interval(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_series(&mut rng, 20, 3);
            for row in &mut s.readings { row[2] = 4.2; }
            let p = fit_normalizer(std::slice::from_ref(&s)).unwrap();
            let out = apply_normalizer(&s, &p).unwrap();
            for row in &out.readings {
                prop_assert!(row[0] >= 0.0 && row[0] <= 1.0);
                prop_assert!(row[1] >= 0.0 && row[1] <= 1.0);
                prop_assert_eq!(row[2], 0.0);
            }
        }
    }
}
