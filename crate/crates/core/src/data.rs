//! Series sources: synthetic ARIMA windows and hourly demand CSV files.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::Timeseries;

/// Roots of the AR polynomial must lie at least this far outside the unit disc.
const STATIONARITY_MARGIN: f64 = 1e-6;
const MAX_SPEC_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaSpec {
    pub ar_coeffs: Vec<f64>,
    pub diff_order: usize,
    pub ma_coeffs: Vec<f64>,
    pub innovation_std: f64,
    pub seed: u64,
}

impl ArimaSpec {
    pub fn ar_order(&self) -> usize {
        self.ar_coeffs.len()
    }

    pub fn ma_order(&self) -> usize {
        self.ma_coeffs.len()
    }

    /// Checks that `1 - φ₁z - … - φ_p z^p` has every root strictly outside the
    /// unit disc, i.e. the companion matrix has spectral radius below one.
    pub fn is_stationary(&self) -> bool {
        ar_spectral_radius(&self.ar_coeffs) < 1.0 - STATIONARITY_MARGIN
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.innovation_std >= 0.0 && self.innovation_std.is_finite()) {
            return Err(Error::Config(format!(
                "innovation std must be finite and non-negative, got {}",
                self.innovation_std
            )));
        }
        if self
            .ar_coeffs
            .iter()
            .chain(&self.ma_coeffs)
            .any(|c| !c.is_finite())
        {
            return Err(Error::Config("ARIMA coefficients must be finite".into()));
        }
        if !self.is_stationary() {
            return Err(Error::Config(format!(
                "AR coefficients {:?} are not stationary",
                self.ar_coeffs
            )));
        }
        Ok(())
    }

    fn burn_in(&self) -> usize {
        10 * (self.ar_order() + self.diff_order + self.ma_order() + 1)
    }
}

/// Spectral radius of the AR companion matrix.
fn ar_spectral_radius(phi: &[f64]) -> f64 {
    let p = phi.len();
    if p == 0 {
        return 0.0;
    }
    let mut companion = DMatrix::zeros(p, p);
    for (j, &c) in phi.iter().enumerate() {
        companion[(0, j)] = c;
    }
    for i in 1..p {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Normalization applied to a window: `normalized = (raw - offset) / factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub offset: f64,
    pub factor: f64,
}

impl Scale {
    pub const IDENTITY: Scale = Scale {
        offset: 0.0,
        factor: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    pub values: Timeseries,
    pub source_id: String,
    pub start_index: usize,
    pub scale: Scale,
}

impl SeriesWindow {
    /// Values mapped back to the raw scale.
    pub fn denormalized(&self) -> Result<Timeseries> {
        Timeseries::new(self.values.values().map(|v| v * self.scale.factor + self.scale.offset))
    }
}

fn innovations(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, std).expect("std validated");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Seed of window `index` derived from the dataset seed.
pub fn window_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

fn simulate_window(spec: &ArimaSpec, seed: u64, horizon: usize) -> Vec<f64> {
    let burn = spec.burn_in();
    let total = burn + horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = innovations(&mut rng, total, spec.innovation_std);
    let mut w = vec![0.0; total];
    for t in 0..total {
        let mut v = eps[t];
        for (i, &phi) in spec.ar_coeffs.iter().enumerate() {
            if t > i {
                v += phi * w[t - i - 1];
            }
        }
        for (j, &theta) in spec.ma_coeffs.iter().enumerate() {
            if t > j {
                v += theta * eps[t - j - 1];
            }
        }
        w[t] = v;
    }
    let mut out = w.split_off(burn);
    for _ in 0..spec.diff_order {
        let mut acc = 0.0;
        for v in out.iter_mut() {
            acc += *v;
            *v = acc;
        }
    }
    out
}

/// Simulates `count` independent ARIMA windows of length `horizon`.
///
/// Window `i` uses seed `spec.seed + i`; the ARMA recursion runs on the
/// differenced scale with a burn-in before the emitted part is integrated.
pub fn arima_generate(spec: &ArimaSpec, count: usize, horizon: usize) -> Result<Vec<SeriesWindow>> {
    spec.validate()?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    (0..count)
        .map(|i| {
            let values = simulate_window(spec, window_seed(spec.seed, i), horizon);
            Ok(SeriesWindow {
                values: Timeseries::from_slice(&values)?,
                source_id: format!("arima-{i}"),
                start_index: 0,
                scale: Scale::IDENTITY,
            })
        })
        .collect()
}

/// Draws an ARIMA(2,1,2) with coefficients uniform in `[-0.9, 0.9]`,
/// rejecting non-stationary AR parts.
pub fn sample_arima_spec(seed: u64) -> Result<ArimaSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SPEC_DRAWS {
        let ar: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..=0.9)).collect();
        let ma: Vec<f64> = (0..2).map(|_| rng.random_range(-0.9..=0.9)).collect();
        let spec = ArimaSpec {
            ar_coeffs: ar,
            diff_order: 1,
            ma_coeffs: ma,
            innovation_std: 1.0,
            seed,
        };
        if spec.is_stationary() {
            return Ok(spec);
        }
    }
    Err(Error::Numerical(format!(
        "no stationary ARIMA spec found in {MAX_SPEC_DRAWS} draws"
    )))
}

/// A random ARIMA(2,1,2) dataset: one spec per call, `count` windows.
pub fn sample_random_arima(seed: u64, horizon: usize, count: usize) -> Result<Vec<SeriesWindow>> {
    let spec = sample_arima_spec(seed)?;
    arima_generate(&spec, count, horizon)
}

/// Slides a window over one numeric column of a CSV file with a header row.
///
/// Partial tail windows are dropped.
pub fn load_series_windows(
    path: &Path,
    column: &str,
    horizon: usize,
    stride: usize,
) -> Result<Vec<SeriesWindow>> {
    if horizon == 0 || stride == 0 {
        return Err(Error::Config("horizon and stride must be at least 1".into()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = headers.iter().position(|h| h.trim() == column).ok_or_else(|| {
        Error::Data(format!(
            "column '{column}' not found in {}; available columns: {}",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let cell = record.get(col).unwrap_or("");
        let v: f64 = cell.trim().parse().map_err(|_| {
            Error::Data(format!(
                "non-numeric value '{cell}' at data row {} column '{column}' of {}",
                row + 1,
                path.display()
            ))
        })?;
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "non-finite value at data row {} column '{column}' of {}",
                row + 1,
                path.display()
            )));
        }
        values.push(v);
    }
    if values.len() < horizon {
        return Err(Error::Data(format!(
            "insufficient rows in {}: {} rows for horizon {horizon}",
            path.display(),
            values.len()
        )));
    }
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut windows = Vec::new();
    let mut start = 0;
    while start + horizon <= values.len() {
        windows.push(SeriesWindow {
            values: Timeseries::from_slice(&values[start..start + horizon])?,
            source_id: source_id.clone(),
            start_index: start,
            scale: Scale::IDENTITY,
        });
        start += stride;
    }
    Ok(windows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Data(format!("malformed CSV {}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    None,
    ZscoreGlobal,
    ZscoreWindow,
}

const STD_FLOOR: f64 = 1e-12;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn rescale(window: &SeriesWindow, scale: Scale) -> Result<SeriesWindow> {
    // Undo any previous normalization first.
    let raw = window.denormalized()?;
    Ok(SeriesWindow {
        values: Timeseries::new(raw.values().map(|v| (v - scale.offset) / scale.factor))?,
        source_id: window.source_id.clone(),
        start_index: window.start_index,
        scale,
    })
}

/// Z-scores windows, either with statistics of the whole dataset or per window.
/// Uses the population standard deviation.
pub fn normalize_windows(windows: &[SeriesWindow], mode: Normalization) -> Result<Vec<SeriesWindow>> {
    match mode {
        Normalization::None => Ok(windows.to_vec()),
        Normalization::ZscoreGlobal => {
            let raw: Vec<f64> = windows
                .iter()
                .map(|w| w.denormalized())
                .collect::<Result<Vec<_>>>()?
                .iter()
                .flat_map(|t| t.as_slice().to_vec())
                .collect();
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            let (mean, std) = mean_std(&raw);
            if std <= STD_FLOOR {
                return Err(Error::Data(
                    "cannot z-score constant data (std below 1e-12)".into(),
                ));
            }
            let scale = Scale {
                offset: mean,
                factor: std,
            };
            windows.iter().map(|w| rescale(w, scale)).collect()
        }
        Normalization::ZscoreWindow => windows
            .iter()
            .map(|w| {
                let raw = w.denormalized()?;
                let (mean, std) = mean_std(raw.as_slice());
                if std <= STD_FLOOR {
                    return Err(Error::Data(format!(
                        "cannot z-score constant window {} starting at {}",
                        w.source_id, w.start_index
                    )));
                }
                rescale(
                    w,
                    Scale {
                        offset: mean,
                        factor: std,
                    },
                )
            })
            .collect(),
    }
}

/// Writes windows as `window_id,t,value` rows.
pub fn write_windows_csv(path: &Path, windows: &[SeriesWindow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["window_id", "t", "value"])
        .map_err(|e| csv_error(path, e))?;
    for (id, w) in windows.iter().enumerate() {
        for (t, v) in w.values.as_slice().iter().enumerate() {
            writer
                .write_record([id.to_string(), t.to_string(), v.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads `window_id,t,value` rows back into windows, ordered by window id
/// then `t`.
pub fn read_windows_csv(path: &Path) -> Result<Vec<SeriesWindow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
            Error::Data(format!(
                "column '{name}' not found in {}; available columns: {}",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    let (id_col, t_col, v_col) = (find("window_id")?, find("t")?, find("value")?);
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let bad = |what: &str| {
            Error::Data(format!(
                "bad {what} at data row {} of {}",
                row + 1,
                path.display()
            ))
        };
        let id = record.get(id_col).ok_or_else(|| bad("window_id"))?.trim().to_string();
        let t: usize = record
            .get(t_col)
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad("t"))?;
        let v: f64 = record
            .get(v_col)
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad("value"))?;
        rows.push((id, t, v));
    }
    let mut order: Vec<String> = Vec::new();
    for (id, _, _) in &rows {
        if !order.contains(id) {
            order.push(id.clone());
        }
    }
    order.sort_by(|a, b| match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    order
        .into_iter()
        .map(|id| {
            let mut pts: Vec<(usize, f64)> = rows
                .iter()
                .filter(|(i, _, _)| *i == id)
                .map(|(_, t, v)| (*t, *v))
                .collect();
            pts.sort_by_key(|(t, _)| *t);
            if pts.iter().enumerate().any(|(i, (t, _))| i != *t) {
                return Err(Error::Data(format!(
                    "window '{id}' in {} does not have consecutive t = 0, 1, ...",
                    path.display()
                )));
            }
            let values: Vec<f64> = pts.into_iter().map(|(_, v)| v).collect();
            Ok(SeriesWindow {
                values: Timeseries::new(DVector::from_vec(values))?,
                source_id: id,
                start_index: 0,
                scale: Scale::IDENTITY,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn white_noise(seed: u64) -> ArimaSpec {
        ArimaSpec {
            ar_coeffs: vec![],
            diff_order: 0,
            ma_coeffs: vec![],
            innovation_std: 1.0,
            seed,
        }
    }

    #[test]
    fn silent_process_is_zero() {
        let spec = ArimaSpec {
            ar_coeffs: vec![0.0, 0.0],
            diff_order: 1,
            ma_coeffs: vec![0.0],
            innovation_std: 0.0,
            seed: 4,
        };
        let ws = arima_generate(&spec, 3, 12).unwrap();
        assert!(ws.iter().all(|w| w.values.values().amax() == 0.0));
    }

    #[test]
    fn identity_filter_returns_innovations() {
        let spec = white_noise(9);
        let ws = arima_generate(&spec, 2, 25).unwrap();
        for (i, w) in ws.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(window_seed(9, i));
            let eps = innovations(&mut rng, spec.burn_in() + 25, 1.0);
            assert_eq!(w.values.as_slice(), &eps[spec.burn_in()..]);
        }
    }

    #[test]
    fn explosive_ar_is_rejected() {
        let spec = ArimaSpec {
            ar_coeffs: vec![1.2],
            ..white_noise(0)
        };
        assert!(!spec.is_stationary());
        assert!(matches!(arima_generate(&spec, 1, 5), Err(Error::Config(_))));
        let unit_root = ArimaSpec {
            ar_coeffs: vec![0.5, 0.5],
            ..white_noise(0)
        };
        assert!(!unit_root.is_stationary());
        let ok = ArimaSpec {
            ar_coeffs: vec![0.5, 0.3],
            ..white_noise(0)
        };
        assert!(ok.is_stationary());
    }

    #[test]
    fn differencing_integrates_innovations() {
        let base = white_noise(3);
        let integrated = ArimaSpec {
            diff_order: 1,
            ..base.clone()
        };
        // Same burn-in length is needed for the comparison.
        let raw = simulate_window(&base, 3, 30 + integrated.burn_in() - base.burn_in());
        let tail = &raw[raw.len() - 30..];
        let w = simulate_window(&integrated, 3, 30);
        let mut acc = 0.0;
        for (a, b) in tail.iter().zip(&w) {
            acc += a;
            assert!((acc - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_arima_is_deterministic() {
        let a = sample_random_arima(17, 50, 4).unwrap();
        let b = sample_random_arima(17, 50, 4).unwrap();
        assert_eq!(a, b);
        assert!(sample_random_arima(17, 50, 0).unwrap().is_empty());
        let many = sample_random_arima(5, 50, 100).unwrap();
        assert_eq!(many.len(), 100);
        assert!(many.iter().all(|w| w.values.len() == 50));
        assert!(sample_arima_spec(5).unwrap().is_stationary());
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn windows_from_csv() {
        let f = write_csv("Datetime,AEP_MW\n0,1\n1,2\n2,3\n3,4\n4,5\n");
        let ws = load_series_windows(f.path(), "AEP_MW", 2, 2).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].values.as_slice(), &[1.0, 2.0]);
        assert_eq!(ws[1].values.as_slice(), &[3.0, 4.0]);
        assert_eq!(ws[1].start_index, 2);
        let stem = f.path().file_stem().unwrap().to_string_lossy();
        assert_eq!(ws[0].source_id, stem);
    }

    #[test]
    fn csv_errors() {
        let f = write_csv("Datetime,AEP_MW\n0,1\n1,2\n2,3\n3,4\n4,5\n");
        let err = load_series_windows(f.path(), "AEP_MW", 10, 10).unwrap_err();
        assert!(err.to_string().contains("insufficient rows"));
        let err = load_series_windows(f.path(), "PJM", 2, 2).unwrap_err();
        assert!(err.to_string().contains("Datetime, AEP_MW"));
        let g = write_csv("Datetime,AEP_MW\n0,1\n1,oops\n");
        let err = load_series_windows(g.path(), "AEP_MW", 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("AEP_MW"), "{msg}");
    }

    fn sample_windows() -> Vec<SeriesWindow> {
        [[1.0, 4.0, 2.0], [10.0, 12.0, 20.0]]
            .iter()
            .enumerate()
            .map(|(i, v)| SeriesWindow {
                values: Timeseries::from_slice(v).unwrap(),
                source_id: "demo".into(),
                start_index: 3 * i,
                scale: Scale::IDENTITY,
            })
            .collect()
    }

    #[test]
    fn normalization_modes() {
        let ws = sample_windows();
        assert_eq!(normalize_windows(&ws, Normalization::None).unwrap(), ws);

        let per = normalize_windows(&ws, Normalization::ZscoreWindow).unwrap();
        for w in &per {
            let (m, s) = mean_std(w.values.as_slice());
            assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
        }
        let global = normalize_windows(&ws, Normalization::ZscoreGlobal).unwrap();
        let all: Vec<f64> = global.iter().flat_map(|w| w.values.as_slice().to_vec()).collect();
        let (m, s) = mean_std(&all);
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);

        for (orig, norm) in ws.iter().zip(per.iter().chain(&global)) {
            let back = norm.denormalized().unwrap();
            assert!(back.difference(&orig.values).unwrap().amax() < 1e-10);
        }
    }

    #[test]
    fn constant_data_cannot_be_zscored() {
        let w = SeriesWindow {
            values: Timeseries::from_slice(&[2.0, 2.0, 2.0]).unwrap(),
            source_id: "flat".into(),
            start_index: 0,
            scale: Scale::IDENTITY,
        };
        assert!(normalize_windows(std::slice::from_ref(&w), Normalization::ZscoreGlobal).is_err());
        assert!(normalize_windows(&[w], Normalization::ZscoreWindow).is_err());
    }

    #[test]
    fn windows_csv_round_trip() {
        let ws = sample_random_arima(2, 7, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        write_windows_csv(&path, &ws).unwrap();
        let back = read_windows_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in ws.iter().zip(&back) {
            assert_eq!(a.values, b.values);
        }
    }
}
