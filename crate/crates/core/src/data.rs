//! Synthetic datasets, CSV files and deterministic splits.
//!
//! All randomness comes from ChaCha20 seeded through `SeedableRng::seed_from_u64`
//! ([`GENERATOR_ID`]). Uniform variates on the open interval `(0, 1)` take the
//! top 53 bits of a `u64` draw as `(k + 0.5) / 2^53`; Gaussian variates use the
//! cosine branch of Box-Muller on two consecutive uniforms.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Dataset;

/// Identifier of the random source, recorded in experiment reports.
pub const GENERATOR_ID: &str =
    "chacha20/seed_from_u64; uniform=(k+0.5)/2^53; normal=box-muller-cos";

/// Seeded random stream with the documented transforms.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha20Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `(0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        let k = self.rng.next_u64() >> 11;
        (k as f64 + 0.5) / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Uniform integer in `0..n` by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SShapeParams {
    pub n: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SShapeParams {
    fn default() -> Self {
        Self {
            n: 500,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// The S-shaped curve `r = x + 0.3 sin(2 pi x)`.
pub fn sshape_curve(x: f64) -> f64 {
    x + 0.3 * (2.0 * PI * x).sin()
}

/// S-shape inverse problem: input column `r`, output column `x`, with
/// `x ~ U(0, 1)` and `r = x + 0.3 sin(2 pi x) + N(0, sigma^2)`.
pub fn gen_sshape(params: &SShapeParams) -> Result<Dataset> {
    if params.n < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: params.n,
        });
    }
    if !(params.noise_sigma >= 0.0 && params.noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise_sigma must be non-negative, got {}",
            params.noise_sigma
        )));
    }
    let mut stream = Stream::new(params.seed);
    let mut r = Vec::with_capacity(params.n);
    let mut x = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let xi = stream.uniform();
        let noise = stream.normal();
        x.push(xi);
        r.push(sshape_curve(xi) + params.noise_sigma * noise);
    }
    Dataset::new(
        DMatrix::from_column_slice(params.n, 1, &r),
        DMatrix::from_column_slice(params.n, 1, &x),
    )?
    .with_names(vec!["x0".into(), "y0".into()])
}

/// Smooth multi-output regression data: inputs uniform on `[-1, 1]^p`,
/// outputs `tanh` and `sin` of random projections plus Gaussian noise.
pub fn gen_multioutput(
    n: usize,
    p: usize,
    q: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if p == 0 || q == 0 {
        return Err(Error::Config(
            "input and output dimensions must be positive".into(),
        ));
    }
    let mut stream = Stream::new(seed);
    let weights = DMatrix::from_fn(p, q, |_, _| stream.normal() / (p as f64).sqrt());
    let inputs = DMatrix::from_fn(n, p, |_, _| 2.0 * stream.uniform() - 1.0);
    let proj = &inputs * &weights;
    let mut outputs = DMatrix::zeros(n, q);
    for j in 0..q {
        for i in 0..n {
            let z = proj[(i, j)];
            let clean = if j % 2 == 0 {
                (2.0 * z).tanh()
            } else {
                (PI * z).sin()
            };
            outputs[(i, j)] = clean + noise_sigma * stream.normal();
        }
    }
    Dataset::new(inputs, outputs)
}

/// Reads a CSV whose header names input columns `x*` and output columns `y*`.
///
/// Columns are assigned by prefix; within a prefix they are ordered by their
/// numeric suffix when every suffix is numeric, otherwise by header position.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let x_cols = prefixed_columns(&header, 'x')?;
    let y_cols = prefixed_columns(&header, 'y')?;
    if x_cols.is_empty() || y_cols.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: 0,
            message: "header needs at least one x* and one y* column".into(),
        });
    }
    if let Some(pos) = header
        .iter()
        .position(|h| !(h.starts_with('x') || h.starts_with('y')))
    {
        return Err(Error::Parse {
            row: 1,
            column: pos + 1,
            message: format!("column '{}' is neither an input nor an output", header[pos]),
        });
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // Row numbers are 1-based and count the header.
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("'{cell}' is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    let m = rows.len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    let inputs = DMatrix::from_fn(m, x_cols.len(), |i, j| rows[i][x_cols[j]]);
    let outputs = DMatrix::from_fn(m, y_cols.len(), |i, j| rows[i][y_cols[j]]);
    let names = x_cols
        .iter()
        .chain(&y_cols)
        .map(|&c| header[c].clone())
        .collect();
    Dataset::new(inputs, outputs)?.with_names(names)
}

fn prefixed_columns(header: &[String], prefix: char) -> Result<Vec<usize>> {
    let mut cols: Vec<usize> = (0..header.len())
        .filter(|&i| header[i].starts_with(prefix))
        .collect();
    let suffixes: Option<Vec<u64>> = cols
        .iter()
        .map(|&i| header[i][1..].parse::<u64>().ok())
        .collect();
    if let Some(suffixes) = suffixes {
        let mut keyed: Vec<(u64, usize)> = suffixes.into_iter().zip(cols.iter().copied()).collect();
        keyed.sort();
        if let Some(w) = keyed.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Parse {
                row: 1,
                column: w[1].1 + 1,
                message: format!("duplicate column '{}'", header[w[1].1]),
            });
        }
        cols = keyed.into_iter().map(|(_, i)| i).collect();
    }
    Ok(cols)
}

/// Formats a value with 17 significant digits.
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes with columns `x0..x{p-1},y0..y{q-1}` and `\n` line endings.
pub fn to_csv_string(data: &Dataset) -> String {
    let (p, q) = (data.input_dim(), data.output_dim());
    let mut out = String::new();
    let header: Vec<String> = (0..p)
        .map(|j| format!("x{j}"))
        .chain((0..q).map(|j| format!("y{j}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..data.len() {
        let cells: Vec<String> = data
            .inputs()
            .row(i)
            .iter()
            .chain(data.outputs().row(i).iter())
            .map(|&v| fmt17(v))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv_string(data))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Fraction of rows held out for testing.
    Holdout(f64),
    KFold(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SplitKind::Holdout(f) if !(f > 0.0 && f < 1.0) => Err(Error::Config(format!(
                "holdout fraction must lie in (0, 1), got {f}"
            ))),
            SplitKind::KFold(k) if k < 2 => {
                Err(Error::Config(format!("k-fold needs k >= 2, got {k}")))
            }
            _ => Ok(()),
        }
    }
}

/// Train/test partition with the row indices it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Shuffled index partitions. Holdout yields one partition, k-fold yields `k`.
pub fn split_indices(m: usize, spec: &SplitSpec) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..m).collect();
    Stream::new(spec.seed).shuffle(&mut order);
    let parts = match spec.kind {
        SplitKind::Holdout(fraction) => {
            let n_test = ((m as f64) * fraction).round() as usize;
            let test = order[..n_test].to_vec();
            let train = order[n_test..].to_vec();
            vec![(train, test)]
        }
        SplitKind::KFold(k) => {
            let (base, extra) = (m / k, m % k);
            let mut start = 0;
            (0..k)
                .map(|f| {
                    let len = base + usize::from(f < extra);
                    let test = order[start..start + len].to_vec();
                    let train = order[..start]
                        .iter()
                        .chain(&order[start + len..])
                        .copied()
                        .collect();
                    start += len;
                    (train, test)
                })
                .collect()
        }
    };
    for (train, test) in &parts {
        let small = train.len().min(test.len());
        if small < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: small,
            });
        }
    }
    Ok(parts)
}

/// Deterministic partitions of `data` according to `spec`.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Vec<Partition>> {
    split_indices(data.len(), spec)?
        .into_iter()
        .map(|(train_indices, test_indices)| {
            Ok(Partition {
                train: data.select(&train_indices)?,
                test: data.select(&test_indices)?,
                train_indices,
                test_indices,
            })
        })
        .collect()
}
