//! Toy generators, CSV ingestion, seeded train/test splits and input
//! whitening.


use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::{derive_seed, Rng, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of both noise terms in the toy generators.
pub const TOY_NOISE_STD: f64 = 0.3;
/// Inputs of the toy generators are drawn from `U[0, TOY_X_MAX]`.
pub const TOY_X_MAX: f64 = 10.0;
pub const WHITEN_FLOOR: f64 = 1e-8;

/// Per-input-dimension statistics from a training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whitening {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns with (near) zero spread; these are mapped to zero.
    pub degenerate: Vec<bool>,
}

impl Whitening {
    /// Population mean / std of each column of `x`.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::Data("cannot whiten an empty partition".into()));
        }
        let c = x.row_width();
        let mut mean = vec![0.0; c];
        for i in 0..n {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        let degenerate = std.iter().map(|&s| !(s > WHITEN_FLOOR)).collect();
        Ok(Self {
            mean,
            std,
            degenerate,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        if x.shape().len() != 2 || x.row_width() != c {
            return Err(Error::Shape(format!(
                "whitening fitted on {c} columns, got {:?}",
                x.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let j = i % c;
                if self.degenerate[j] {
                    0.0
                } else {
                    (v - self.mean[j]) / self.std[j].max(WHITEN_FLOOR)
                }
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Tensor,
    pub input_names: Vec<String>,
    pub target_names: Vec<String>,
    /// Statistics already applied to `x`, if any.
    pub whitening: Option<Whitening>,
    /// Rows that were injected as synthetic outliers.
    pub outliers: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
            return Err(Error::Shape(format!(
                "inputs {:?} and targets {:?} must be [N, c] and [N, d]",
                x.shape(),
                y.shape()
            )));
        }
        let input_names = (0..x.row_width()).map(|i| format!("x{i}")).collect();
        let target_names = (0..y.row_width()).map(|i| format!("y{i}")).collect();
        Ok(Self {
            x,
            y,
            input_names,
            target_names,
            whitening: None,
            outliers: Vec::new(),
        })
    }

    pub fn with_names(mut self, inputs: Vec<String>, targets: Vec<String>) -> Result<Self> {
        if inputs.len() != self.input_dim() || targets.len() != self.output_dim() {
            return Err(Error::Shape("column name count does not match data".into()));
        }
        self.input_names = inputs;
        self.target_names = targets;
        Ok(self)
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.row_width()
    }

    pub fn output_dim(&self) -> usize {
        self.y.row_width()
    }

    /// Rows `indices` in the given order; outlier flags are remapped.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let outliers = indices
            .iter()
            .enumerate()
            .filter(|(_, i)| self.outliers.contains(i))
            .map(|(pos, _)| pos)
            .collect();
        Dataset {
            x: self.x.select_rows(indices),
            y: self.y.select_rows(indices),
            input_names: self.input_names.clone(),
            target_names: self.target_names.clone(),
            whitening: self.whitening.clone(),
            outliers,
        }
    }

    pub fn whitened_with(&self, stats: &Whitening) -> Result<Dataset> {
        Ok(Dataset {
            x: stats.apply(&self.x)?,
            whitening: Some(stats.clone()),
            ..self.clone()
        })
    }

    /// Writes a header row (inputs then targets) and full-precision values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let header: Vec<&str> = self
            .input_names
            .iter()
            .chain(&self.target_names)
            .map(String::as_str)
            .collect();
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for i in 0..self.len() {
            let record: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.y.row(i))
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&record).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Noise-free unimodal curve plus its noise terms: `x sin x + ε₁x + ε₂`.
pub fn unimodal_curve(x: f64, e1: f64, e2: f64) -> f64 {
    x * x.sin() + e1 * x + e2
}

/// Synthetic outlier line `y = x + 7`.
pub fn outlier_curve(x: f64) -> f64 {
    x + 7.0
}

/// Branch 0: `cos x + ε₁x + ε₂ − 5`; branch 1: `(ε₁ + 1)x + ε₂ + 5`.
pub fn multimodal_curve(x: f64, upper: bool, e1: f64, e2: f64) -> f64 {
    if upper {
        (e1 + 1.0) * x + e2 + 5.0
    } else {
        x.cos() + e1 * x + e2 - 5.0
    }
}

fn toy_dataset(xs: Vec<f64>, ys: Vec<f64>) -> Dataset {
    let n = xs.len();
    Dataset::new(
        Tensor::new(vec![n, 1], xs).unwrap(),
        Tensor::new(vec![n, 1], ys).unwrap(),
    )
    .unwrap()
    .with_names(vec!["x".into()], vec!["y".into()])
    .unwrap()
}

/// Heteroscedastic sinusoid on `x ~ U[0, 10]` with `outliers` extra rows
/// on `y = x + 7` appended at the end.
pub fn gen_unimodal_toy(n: usize, outliers: usize, noise_std: f64, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Data("toy dataset needs n ≥ 1".into()));
    }
    let mut xs = Vec::with_capacity(n + outliers);
    let mut ys = Vec::with_capacity(n + outliers);
    for _ in 0..n {
        let x = rng.uniform_in(0.0, TOY_X_MAX);
        let e1 = noise_std * rng.normal();
        let e2 = noise_std * rng.normal();
        xs.push(x);
        ys.push(unimodal_curve(x, e1, e2));
    }
    for _ in 0..outliers {
        let x = rng.uniform_in(0.0, TOY_X_MAX);
        xs.push(x);
        ys.push(outlier_curve(x));
    }
    let mut ds = toy_dataset(xs, ys);
    ds.outliers = (n..n + outliers).collect();
    Ok(ds)
}

/// Two-branch toy; each row picks a branch with probability ½.
pub fn gen_multimodal_toy(n: usize, noise_std: f64, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Data("toy dataset needs n ≥ 1".into()));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_in(0.0, TOY_X_MAX);
        let upper = rng.bernoulli(0.5);
        let e1 = noise_std * rng.normal();
        let e2 = noise_std * rng.normal();
        xs.push(x);
        ys.push(multimodal_curve(x, upper, e1, e2));
    }
    Ok(toy_dataset(xs, ys))
}

/// Reads a headered numeric CSV; `targets` name the output columns and
/// every other column becomes an input, in file order.
pub fn load_csv(path: &Path, targets: &[String]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_owned(),
        message,
    };
    if targets.is_empty() {
        return Err(Error::Config("at least one target column is required".into()));
    }
    for t in targets {
        if !header.contains(t) {
            return Err(parse_err(1, t, "target column not found in header".into()));
        }
    }
    let target_idx: Vec<usize> = targets
        .iter()
        .map(|t| header.iter().position(|h| h == t).unwrap())
        .collect();
    let input_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();
    if input_idx.is_empty() {
        return Err(Error::Data("no input columns left after removing targets".into()));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        // header is row 1
        let row = r + 2;
        let record = record.map_err(|e| parse_err(row, "", e.to_string()))?;
        if record.len() != header.len() {
            return Err(parse_err(
                row,
                "",
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let cell = |i: usize| -> Result<f64> {
            let raw = &record[i];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(row, &header[i], format!("'{raw}' is not a finite number"))),
            }
        };
        for &i in &input_idx {
            xs.push(cell(i)?);
        }
        for &i in &target_idx {
            ys.push(cell(i)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    Dataset::new(
        Tensor::new(vec![rows, input_idx.len()], xs)?,
        Tensor::new(vec![rows, target_idx.len()], ys)?,
    )?
    .with_names(
        input_idx.iter().map(|&i| header[i].clone()).collect(),
        targets.to_vec(),
    )
}

/// Provenance record written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub target_columns: Vec<String>,
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub seed: Option<u64>,
    #[serde(default)]
    pub outlier_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub n_splits: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            n_splits: 1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.n_splits == 0 {
            return Err(Error::Config("n_splits must be at least 1".into()));
        }
        Ok(())
    }
}

/// `(train, test)` row indices for split `index`. The test partition has
/// `round(N · fraction)` rows, clamped so both partitions are nonempty.
pub fn split_indices(n: usize, spec: &SplitSpec, index: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if index >= spec.n_splits {
        return Err(Error::Config(format!(
            "split index {index} out of range for {} splits",
            spec.n_splits
        )));
    }
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} rows")));
    }
    let test_len = ((n as f64 * spec.test_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = Rng::new(derive_seed(spec.seed, index as u64));
    let perm = rng.permutation(n);
    let test = perm[..test_len].to_vec();
    let train = perm[test_len..].to_vec();
    Ok((train, test))
}

pub fn split(dataset: &Dataset, spec: &SplitSpec, index: usize) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset.len(), spec, index)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Whitens inputs of both partitions with statistics of `train` only.
pub fn whiten_inputs(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Whitening)> {
    let stats = Whitening::fit(train.x())?;
    Ok((train.whitened_with(&stats)?, test.whitened_with(&stats)?, stats))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    #[test]
    fn unimodal_curve_points() {
        assert_eq!(unimodal_curve(0.0, 0.0, 0.0), 0.0);
        assert!((unimodal_curve(PI / 2.0, 0.0, 0.0) - PI / 2.0).abs() < 1e-15);
        assert_eq!(outlier_curve(3.0), 10.0);
    }

    #[test]
    fn multimodal_curve_points() {
        assert_eq!(multimodal_curve(0.0, false, 0.0, 0.0), -4.0);
        assert_eq!(multimodal_curve(2.0, true, 0.0, 0.0), 7.0);
    }

    #[test]
    fn outliers_are_appended_and_flagged() {
        let ds = gen_unimodal_toy(50, 20, TOY_NOISE_STD, &mut Rng::new(1)).unwrap();
        assert_eq!(ds.len(), 70);
        assert_eq!(ds.outliers, (50..70).collect::<Vec<_>>());
        for &i in &ds.outliers {
            let x = ds.x().row(i)[0];
            assert_eq!(ds.y().row(i)[0], x + 7.0);
        }
    }

    #[test]
    fn branch_counts_are_balanced() {
        let n = 10_000;
        let ds = gen_multimodal_toy(n, 0.0, &mut Rng::new(5)).unwrap();
        let upper = (0..n)
            .filter(|&i| {
                let x = ds.x().row(i)[0];
                (ds.y().row(i)[0] - (x + 5.0)).abs() < 1e-12
            })
            .count();
        // 3 binomial standard deviations is 150
        assert!((upper as i64 - 5000).abs() <= 150, "upper {upper}");
    }

    #[test]
    fn generators_are_reproducible() {
        let a = gen_multimodal_toy(100, TOY_NOISE_STD, &mut Rng::new(9)).unwrap();
        let b = gen_multimodal_toy(100, TOY_NOISE_STD, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SplitSpec {
            seed: 3,
            n_splits: 2,
            ..Default::default()
        };
        let (tr, te) = split_indices(10, &spec, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split_indices(10, &spec, 1).unwrap(), (tr, te));
        assert!(split_indices(10, &spec, 2).is_err());
        assert!(matches!(split_indices(1, &spec, 0), Err(Error::Data(_))));
    }

    #[test]
    fn whitening_uses_train_statistics() {
        let train = Dataset::new(
            Tensor::new(vec![2, 2], vec![0.0, 5.0, 2.0, 5.0]).unwrap(),
            Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let test = Dataset::new(
            Tensor::new(vec![1, 2], vec![1.0, 9.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
        )
        .unwrap();
        let (tr, te, stats) = whiten_inputs(&train, &test).unwrap();
        assert_eq!(tr.x().data(), &[-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(te.x().data(), &[0.0, 0.0]);
        assert_eq!(stats.degenerate, vec![false, true]);
        assert_eq!(tr.y(), train.y());
    }
}
