//! Survival datasets: CSV ingestion, standardization, noise injection,
//! synthetic generation and stratified fold assignment.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::rng;

/// Right-censored survival data: one row of features per subject, the
/// observed time and whether the event was observed at that time.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub features: Array2<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub feature_names: Vec<String>,
}

impl SurvivalDataset {
    pub fn new(
        features: Array2<f64>,
        times: Vec<f64>,
        events: Vec<bool>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        if times.len() != n || events.len() != n {
            return Err(GraftError::Shape(format!(
                "{} feature rows, {} times, {} event flags",
                n,
                times.len(),
                events.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(GraftError::Schema("dataset has no feature columns".into()));
        }
        if feature_names.len() != features.ncols() {
            return Err(GraftError::Shape(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        if let Some(row) = times.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(GraftError::Validation {
                row,
                message: format!("time must be finite and > 0, got {}", times[row]),
            });
        }
        if let Some((row, _)) = features
            .axis_iter(Axis(0))
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(GraftError::Validation {
                row,
                message: "non-finite feature value".into(),
            });
        }
        Ok(Self {
            features,
            times,
            events,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            features: self.features.select(Axis(0), idx),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Reads a headered CSV. `time_col` and `event_col` name the outcome
/// columns; every other column is a numeric feature, kept in file order.
pub fn load_csv(path: impl AsRef<Path>, time_col: &str, event_col: &str) -> Result<SurvivalDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| GraftError::io(path, e))?;
    load_csv_from_reader(file, time_col, event_col)
}

pub fn load_csv_from_reader<R: Read>(
    reader: R,
    time_col: &str,
    event_col: &str,
) -> Result<SurvivalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| GraftError::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let find = |name: &str| {
        let hits: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| *h == name)
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [i] => Ok(*i),
            [] => Err(GraftError::Schema(format!("missing column `{name}`"))),
            _ => Err(GraftError::Schema(format!("column `{name}` appears more than once"))),
        }
    };
    let t_idx = find(time_col)?;
    let e_idx = find(event_col)?;
    if t_idx == e_idx {
        return Err(GraftError::Schema("time and event columns must differ".into()));
    }
    let feat_idx: Vec<usize> = (0..headers.len()).filter(|&i| i != t_idx && i != e_idx).collect();
    if feat_idx.is_empty() {
        return Err(GraftError::Schema("no feature columns besides time and event".into()));
    }
    let feature_names: Vec<String> = feat_idx.iter().map(|&i| headers[i].to_string()).collect();

    let mut values = Vec::new();
    let mut times = Vec::new();
    let mut events = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| GraftError::Validation {
            row,
            message: format!("malformed record: {e}"),
        })?;
        if rec.len() != headers.len() {
            return Err(GraftError::Validation {
                row,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let cell = |i: usize| -> Result<f64> {
            let raw = &rec[i];
            raw.parse::<f64>().map_err(|_| GraftError::Parse {
                row,
                column: headers[i].to_string(),
                value: raw.to_string(),
            })
        };
        let t = cell(t_idx)?;
        if !(t.is_finite() && t > 0.0) {
            return Err(GraftError::Validation {
                row,
                message: format!("time must be > 0, got {t}"),
            });
        }
        let e = cell(e_idx)?;
        let event = if e == 1.0 {
            true
        } else if e == 0.0 {
            false
        } else {
            return Err(GraftError::Validation {
                row,
                message: format!("event must be 0 or 1, got {e}"),
            });
        };
        for &i in &feat_idx {
            let v = cell(i)?;
            if !v.is_finite() {
                return Err(GraftError::Validation {
                    row,
                    message: format!("non-finite value in column `{}`", &headers[i]),
                });
            }
            values.push(v);
        }
        times.push(t);
        events.push(event);
    }
    if times.is_empty() {
        return Err(GraftError::Schema("CSV has a header but no data rows".into()));
    }
    let features = Array2::from_shape_vec((times.len(), feat_idx.len()), values)
        .map_err(|e| GraftError::Shape(e.to_string()))?;
    SurvivalDataset::new(features, times, events, feature_names)
}

/// Writes the dataset as CSV with outcome columns first.
pub fn write_csv<W: std::io::Write>(
    ds: &SurvivalDataset,
    writer: W,
    time_col: &str,
    event_col: &str,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![time_col.to_string(), event_col.to_string()];
    header.extend(ds.feature_names.iter().cloned());
    let to_err = |e: csv::Error| GraftError::Numeric(format!("csv write failed: {e}"));
    wtr.write_record(&header).map_err(to_err)?;
    for (i, row) in ds.features.axis_iter(Axis(0)).enumerate() {
        let mut rec = vec![ds.times[i].to_string(), u8::from(ds.events[i]).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(to_err)?;
    }
    wtr.flush()
        .map_err(|e| GraftError::Numeric(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Per-column location and scale fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ScalerParams {
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(GraftError::Config(format!(
                "standardization needs at least 2 rows, got {n}"
            )));
        }
        let mut means = Vec::with_capacity(x.ncols());
        let mut stds = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            let mean = col.sum() / n as f64;
            let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let sd = (ss / (n - 1) as f64).sqrt();
            means.push(mean);
            // constant column: std recorded as 1 so it maps to zeros
            stds.push(if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 });
        }
        Ok(Self { means, stds })
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.means.len() {
            return Err(GraftError::Shape(format!(
                "scaler fitted on {} columns, input has {}",
                self.means.len(),
                x.ncols()
            )));
        }
        let means = Array1::from(self.means.clone());
        let stds = Array1::from(self.stds.clone());
        Ok((x - &means) / &stds)
    }
}

/// Standardizes every feature column to mean 0 and sample std 1.
pub fn standardize(ds: &SurvivalDataset) -> Result<(SurvivalDataset, ScalerParams)> {
    let scaler = ScalerParams::fit(&ds.features)?;
    let features = scaler.transform(&ds.features)?;
    Ok((
        SurvivalDataset {
            features,
            ..ds.clone()
        },
        scaler,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDist {
    Gaussian,
    StudentTDf2,
}

impl std::str::FromStr for NoiseDist {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseDist::Gaussian),
            "student_t_df2" | "student-t" | "t2" => Ok(NoiseDist::StudentTDf2),
            other => Err(GraftError::Config(format!("unknown noise distribution `{other}`"))),
        }
    }
}

/// Appends `k * p` i.i.d. noise columns. The original columns are copied
/// unchanged.
pub fn inject_noise(ds: &SurvivalDataset, k: usize, dist: NoiseDist, seed: u64) -> Result<SurvivalDataset> {
    if k == 0 {
        return Err(GraftError::Config("noise multiplier must be >= 1".into()));
    }
    let (n, p) = ds.features.dim();
    let extra = k * p;
    let mut rng = rng::stream(seed, 0x6e6f_6973_65);
    let mut features = Array2::zeros((n, p + extra));
    features.slice_mut(ndarray::s![.., ..p]).assign(&ds.features);
    // column-major fill so column j's values do not depend on n_extra
    match dist {
        NoiseDist::Gaussian => {
            let d = Normal::new(0.0, 1.0).expect("valid normal");
            for j in p..p + extra {
                for i in 0..n {
                    features[[i, j]] = d.sample(&mut rng);
                }
            }
        }
        NoiseDist::StudentTDf2 => {
            let d = StudentT::new(2.0).expect("valid student t");
            for j in p..p + extra {
                for i in 0..n {
                    features[[i, j]] = d.sample(&mut rng);
                }
            }
        }
    }
    let mut feature_names = ds.feature_names.clone();
    feature_names.extend((1..=extra).map(|j| format!("noise_{j}")));
    Ok(SurvivalDataset {
        features,
        times: ds.times.clone(),
        events: ds.events.clone(),
        feature_names,
    })
}

/// Draws a dataset from a linear log-normal AFT model,
/// `log T = x·beta + intercept + N(0, 0.5²)`, with independent uniform
/// censoring `C ~ U(0, c_max)` where `c_max` is tuned so that the realised
/// censoring fraction matches `censor_frac`.
///
/// The first `n_signal` coefficients are nonzero (alternating ±1, scaled
/// by 1/sqrt(n_signal) so the signal variance stays at 1); the rest are 0.
pub fn generate_synthetic(
    n: usize,
    p: usize,
    n_signal: usize,
    censor_frac: f64,
    seed: u64,
) -> Result<(SurvivalDataset, Vec<f64>)> {
    if n == 0 || p == 0 {
        return Err(GraftError::Config("synthetic data needs n >= 1 and p >= 1".into()));
    }
    if n_signal > p {
        return Err(GraftError::Config(format!("n_signal {n_signal} exceeds p {p}")));
    }
    if !(0.0..1.0).contains(&censor_frac) {
        return Err(GraftError::Config(format!("censor_frac {censor_frac} not in [0, 1)")));
    }
    const INTERCEPT: f64 = 2.0;
    const NOISE_SD: f64 = 0.5;

    let mut x_rng = rng::stream(seed, 1);
    let mut y_rng = rng::stream(seed, 2);
    let mut c_rng = rng::stream(seed, 3);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");

    let features = Array2::from_shape_simple_fn((n, p), || std_normal.sample(&mut x_rng));
    let scale = if n_signal > 0 { 1.0 / (n_signal as f64).sqrt() } else { 0.0 };
    let beta: Vec<f64> = (0..p)
        .map(|j| {
            if j < n_signal {
                if j % 2 == 0 { scale } else { -scale }
            } else {
                0.0
            }
        })
        .collect();
    let beta_arr = Array1::from(beta.clone());
    let lin = features.dot(&beta_arr);
    let event_times: Vec<f64> = lin
        .iter()
        .map(|l| (l + INTERCEPT + NOISE_SD * std_normal.sample(&mut y_rng)).exp())
        .collect();
    // censoring draws never look at the event times
    let unit: Vec<f64> = (0..n).map(|_| c_rng.random::<f64>()).collect();

    let (times, events) = if censor_frac == 0.0 {
        (event_times.clone(), vec![true; n])
    } else {
        let frac_at = |c_max: f64| {
            let censored = unit
                .iter()
                .zip(&event_times)
                .filter(|(u, y)| *u * c_max < **y)
                .count();
            censored as f64 / n as f64
        };
        let mut lo = 0.0;
        let mut hi = event_times.iter().cloned().fold(0.0, f64::max) * 2.0;
        while frac_at(hi) > censor_frac {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if frac_at(mid) > censor_frac {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c_max = hi;
        let mut times = Vec::with_capacity(n);
        let mut events = Vec::with_capacity(n);
        for (u, y) in unit.iter().zip(&event_times) {
            let c = (u * c_max).max(f64::MIN_POSITIVE);
            if *y <= c {
                times.push(*y);
                events.push(true);
            } else {
                times.push(c);
                events.push(false);
            }
        }
        (times, events)
    };
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    Ok((SurvivalDataset::new(features, times, events, names)?, beta))
}

/// Fold assignment for cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub assignment: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl FoldSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

/// Shuffles each event-indicator stratum and deals it round-robin over the
/// folds. The dealing position carries over between strata so fold sizes
/// stay within one of each other.
pub fn stratified_kfold(ds: &SurvivalDataset, folds: usize, seed: u64) -> Result<FoldSplit> {
    Ok(FoldSplit {
        assignment: stratified_assignment(&ds.events, folds, seed)?,
        folds,
        seed,
    })
}

pub(crate) fn stratified_assignment(events: &[bool], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = events.len();
    if folds < 2 {
        return Err(GraftError::Config(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(GraftError::Config(format!("{folds} folds requested for {n} subjects")));
    }
    let mut rng = rng::stream(seed, 0x666f_6c64);
    let mut assignment = vec![usize::MAX; n];
    let mut next = 0usize;
    for stratum in [true, false] {
        let mut members: Vec<usize> = (0..n).filter(|&i| events[i] == stratum).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ds_from(x: Array2<f64>) -> SurvivalDataset {
        let n = x.nrows();
        let p = x.ncols();
        SurvivalDataset::new(
            x,
            (1..=n).map(|i| i as f64).collect(),
            vec![true; n],
            (0..p).map(|j| format!("f{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn loads_three_row_csv() {
        let text = "t,e,x1,x2\n1.5,1,0.1,2\n2,0,0.2,3\n3,1,-1,4\n";
        let ds = load_csv_from_reader(text.as_bytes(), "t", "e").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.feature_names, vec!["x1", "x2"]);
        assert_eq!(ds.events, vec![true, false, true]);
        assert_eq!(ds.features[[2, 0]], -1.0);
    }

    #[test]
    fn feature_order_follows_file_even_when_outcomes_are_interleaved() {
        let text = "a,time,b,event,c\n1,2,3,1,4\n";
        let ds = load_csv_from_reader(text.as_bytes(), "time", "event").unwrap();
        assert_eq!(ds.feature_names, vec!["a", "b", "c"]);
        assert_eq!(ds.features.row(0).to_vec(), vec![1.0, 3.0, 4.0]);
    }

    #[test]
    fn missing_event_column_is_schema_error() {
        let text = "t,x1\n1,2\n";
        let err = load_csv_from_reader(text.as_bytes(), "t", "e").unwrap_err();
        assert!(matches!(err, GraftError::Schema(_)), "{err}");
    }

    #[test]
    fn zero_time_names_row() {
        let text = "t,e,x\n1,1,0\n0,1,0\n";
        match load_csv_from_reader(text.as_bytes(), "t", "e").unwrap_err() {
            GraftError::Validation { row, .. } => assert_eq!(row, 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_event_and_bad_cell() {
        let text = "t,e,x\n1,2,0\n";
        assert!(matches!(
            load_csv_from_reader(text.as_bytes(), "t", "e").unwrap_err(),
            GraftError::Validation { row: 0, .. }
        ));
        let text = "t,e,x\n1,1,abc\n";
        match load_csv_from_reader(text.as_bytes(), "t", "e").unwrap_err() {
            GraftError::Parse { row, column, value } => {
                assert_eq!((row, column.as_str(), value.as_str()), (0, "x", "abc"));
            }
            other => panic!("unexpected {other}"),
        }
        // empty cells are missing values, which are rejected
        let text = "t,e,x\n1,1,\n";
        assert!(matches!(
            load_csv_from_reader(text.as_bytes(), "t", "e").unwrap_err(),
            GraftError::Parse { .. }
        ));
    }

    #[test]
    fn standardize_symmetric_and_constant_columns() {
        let (out, sc) = standardize(&ds_from(array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])).unwrap();
        assert_eq!(sc.means, vec![2.0, 5.0]);
        assert_eq!(sc.stds, vec![1.0, 1.0]);
        assert_eq!(out.features.column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(out.features.column(1).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardize_random_matrix_moments() {
        let mut r = rng::stream(11, 0);
        let x = Array2::from_shape_simple_fn((50, 4), || r.random::<f64>() * 10.0 - 3.0);
        let (out, sc) = standardize(&ds_from(x.clone())).unwrap();
        for col in out.features.axis_iter(Axis(1)) {
            let m = col.mean().unwrap();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 49.0).sqrt();
            assert!(m.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
        // applying the stored scaler reproduces the fitted transform
        assert_eq!(sc.transform(&x).unwrap(), out.features);
    }

    #[test]
    fn standardize_needs_two_rows() {
        assert!(standardize(&ds_from(array![[1.0]])).is_err());
    }

    #[test]
    fn noise_shapes_and_determinism() {
        let base = ds_from(Array2::from_elem((5, 4), 1.0));
        let a = inject_noise(&base, 3, NoiseDist::Gaussian, 9).unwrap();
        assert_eq!(a.n_features(), 16);
        let b = inject_noise(&base, 3, NoiseDist::Gaussian, 9).unwrap();
        assert_eq!(a, b);
        let c = inject_noise(&base, 3, NoiseDist::Gaussian, 10).unwrap();
        assert_ne!(a.features, c.features);
        let seven = ds_from(Array2::from_elem((3, 7), 0.5));
        assert_eq!(inject_noise(&seven, 10, NoiseDist::StudentTDf2, 1).unwrap().n_features(), 77);
        assert!(inject_noise(&base, 0, NoiseDist::Gaussian, 1).is_err());
    }

    #[test]
    fn noise_leaves_original_columns_bit_identical() {
        let mut r = rng::stream(3, 0);
        let x = Array2::from_shape_simple_fn((20, 3), || r.random::<f64>());
        let base = ds_from(x);
        let out = inject_noise(&base, 5, NoiseDist::StudentTDf2, 4).unwrap();
        for i in 0..20 {
            for j in 0..3 {
                assert_eq!(out.features[[i, j]].to_bits(), base.features[[i, j]].to_bits());
            }
        }
    }

    #[test]
    fn synthetic_without_censoring_observes_everything() {
        let (ds, beta) = generate_synthetic(100, 5, 2, 0.0, 1).unwrap();
        assert!(ds.events.iter().all(|&e| e));
        assert_eq!(beta.iter().filter(|b| **b != 0.0).count(), 2);
    }

    #[test]
    fn synthetic_hits_censoring_target() {
        for target in [0.2, 0.43, 0.7] {
            let (ds, _) = generate_synthetic(2000, 10, 3, target, 5).unwrap();
            let frac = 1.0 - ds.n_events() as f64 / ds.len() as f64;
            assert!((frac - target).abs() <= 0.05, "target {target}, got {frac}");
        }
    }

    #[test]
    fn kfold_one_event_per_fold() {
        let ds = SurvivalDataset::new(
            Array2::zeros((6, 1)),
            vec![1.0; 6],
            vec![true, false, true, false, true, false],
            vec!["x".into()],
        )
        .unwrap();
        let split = stratified_kfold(&ds, 3, 42).unwrap();
        for f in 0..3 {
            let test = split.test_indices(f);
            assert_eq!(test.iter().filter(|&&i| ds.events[i]).count(), 1);
            assert_eq!(test.len(), 2);
        }
        assert_eq!(split, stratified_kfold(&ds, 3, 42).unwrap());
        assert!(stratified_kfold(&ds, 7, 42).is_err());
        assert!(stratified_kfold(&ds, 1, 42).is_err());
    }
}
