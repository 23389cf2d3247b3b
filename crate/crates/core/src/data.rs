//! In-memory labelled datasets: synthetic generators, IDX and CSV loaders,
//! per-channel standardization.

use crate::error::{Error, Result};
use crate::network::InputShape;
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

/// RNG stream used by the synthetic generators.
const DATA_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One sample per row, flattened `[h][w][c]`.
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub shape: InputShape,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, shape: InputShape) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != x.rows() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} samples",
                labels.len(),
                x.rows()
            )));
        }
        if shape.len() != x.cols() {
            return Err(Error::InvalidInput(format!(
                "sample shape {}x{}x{} does not match {} features",
                shape.height,
                shape.width,
                shape.channels,
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            x,
            labels,
            shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Dataset {
            x: Matrix::from_vec(idx.len(), d, data).expect("consistent shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            num_classes: self.num_classes,
        }
    }

    /// Seeded shuffle, then the first `round(frac·n)` samples go to the
    /// second set.
    pub fn split(&self, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::InvalidInput(format!(
                "split fraction must lie in [0, 1), got {frac}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_STREAM);
        idx.shuffle(&mut rng);
        let k = (frac * self.len() as f64).round() as usize;
        if k == 0 || k == self.len() {
            return Err(Error::InvalidInput(format!(
                "split of {} samples at {frac} leaves an empty part",
                self.len()
            )));
        }
        Ok((self.subset(&idx[k..]), self.subset(&idx[..k])))
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Statistics over every sample and spatial position. Constant channels
    /// get `std = 1`.
    pub fn fit(data: &Dataset) -> Self {
        let c = data.shape.channels;
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for r in 0..data.len() {
            for (k, v) in data.x.row(r).iter().enumerate() {
                sum[k % c] += v;
            }
            count += data.shape.height * data.shape.width;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for r in 0..data.len() {
            for (k, v) in data.x.row(r).iter().enumerate() {
                sq[k % c] += (v - mean[k % c]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        let c = self.mean.len();
        if c != data.shape.channels || self.std.len() != c {
            return Err(Error::InvalidInput(format!(
                "standardization has {c} channels, data has {}",
                data.shape.channels
            )));
        }
        for v in data.x.data_mut().chunks_mut(c) {
            for ((x, m), s) in v.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(())
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    rng
}

/// Two interleaving half circles with Gaussian noise, classes alternating.
pub fn two_moons(samples: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if samples < 2 {
        return Err(Error::InvalidInput(
            "two-moons needs at least 2 samples".into(),
        ));
    }
    let normal =
        Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = rng_for(seed);
    let mut x = Matrix::zeros(samples, 2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % 2;
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (a, b) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.set(i, 0, a + normal.sample(&mut rng));
        x.set(i, 1, b + normal.sample(&mut rng));
        labels.push(class);
    }
    Dataset::new(x, labels, InputShape::vector(2))
}

/// Isotropic Gaussian clusters around centers drawn from `U(-1, 1)^dim`
/// scaled by `separation`.
pub fn blobs(
    samples: usize,
    dim: usize,
    classes: usize,
    spread: f64,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if samples < classes || classes < 2 || dim == 0 {
        return Err(Error::InvalidInput(format!(
            "blobs need dim >= 1, classes >= 2 and samples >= classes, got {samples}/{dim}/{classes}"
        )));
    }
    let normal =
        Normal::new(0.0, spread.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = rng_for(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| separation * rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let mut x = Matrix::zeros(samples, dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % classes;
        for (v, c) in x.row_mut(i).iter_mut().zip(&centers[class]) {
            *v = c + normal.sample(&mut rng);
        }
        labels.push(class);
    }
    Dataset::new(x, labels, InputShape::vector(dim))
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            message: "unexpected end of file in header".into(),
        })
}

/// Parsed IDX file: dimensions and raw unsigned bytes.
struct Idx {
    dims: Vec<usize>,
    values: Vec<u8>,
}

fn parse_idx(bytes: &[u8], expect_rank: u8) -> Result<Idx> {
    let magic = read_u32(bytes, 0)?;
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX magic 0x{magic:08x} (expected unsigned-byte data)"),
        });
    }
    let rank = (magic & 0xff) as u8;
    if rank != expect_rank {
        return Err(Error::Parse {
            offset: 3,
            message: format!("IDX file has {rank} dimensions, expected {expect_rank}"),
        });
    }
    let dims: Vec<usize> = (0..rank as usize)
        .map(|k| read_u32(bytes, 4 + 4 * k).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let header = 4 + 4 * rank as usize;
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or(Error::Parse {
            offset: 4,
            message: "IDX dimensions overflow".into(),
        })?;
    let body = &bytes[header..];
    if body.len() != len {
        return Err(Error::Parse {
            offset: (header + body.len().min(len)) as u64,
            message: format!(
                "IDX payload has {} bytes, dimensions {:?} need {len}",
                body.len(),
                dims
            ),
        });
    }
    Ok(Idx {
        dims,
        values: body.to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// IDX image bytes (magic `0x00000803`, `n × h × w`) and label bytes (magic
/// `0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn parse_idx_pair(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = parse_idx(images, 3)?;
    let lab = parse_idx(labels, 1)?;
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{} labels for {n} images", lab.dims[0]),
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let x = Matrix::from_vec(
        n,
        h * w,
        img.values.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    Dataset::new(
        x,
        lab.values.iter().map(|&b| usize::from(b)).collect(),
        InputShape {
            height: h,
            width: w,
            channels: 1,
        },
    )
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx_pair(&read_file(images)?, &read_file(labels)?)
}

/// CSV rows `label, feature, feature, ...`, no header. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Line {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let fail = |message: String| Error::Line { line, message };
        match width {
            None => {
                if rec.len() < 2 {
                    return Err(fail("expected a label and at least one feature".into()));
                }
                width = Some(rec.len());
            }
            Some(w) if w != rec.len() => {
                return Err(fail(format!("expected {w} columns, found {}", rec.len())));
            }
            _ => {}
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|_| fail(format!("label {:?} is not a non-negative integer", &rec[0])))?;
        labels.push(label);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| fail(format!("feature {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(fail(format!("feature {field:?} is not finite")));
            }
            data.push(v);
        }
    }
    let Some(w) = width else {
        return Err(Error::EmptyDataset);
    };
    let x = Matrix::from_vec(labels.len(), w - 1, data)?;
    Dataset::new(x, labels, InputShape::vector(w - 1))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    parse_csv(std::fs::File::open(path)?)
}

fn default_noise() -> f64 {
    0.15
}

fn default_spread() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

/// Where a dataset comes from, as written in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    TwoMoons {
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Blobs {
        samples: usize,
        dim: usize,
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
    },
}

impl DataSource {
    /// Load raw (unstandardized) samples. Relative paths resolve against
    /// `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataSource::TwoMoons {
                samples,
                noise,
                seed,
            } => two_moons(*samples, *noise, *seed),
            DataSource::Blobs {
                samples,
                dim,
                classes,
                spread,
                separation,
                seed,
            } => blobs(*samples, *dim, *classes, *spread, *separation, *seed),
            DataSource::Idx { images, labels } => load_idx(&base.join(images), &base.join(labels)),
            DataSource::Csv { path } => load_csv(&base.join(path)),
        }
    }
}

/// Dataset section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Fraction held out for validation; 0 disables the split.
    #[serde(default)]
    pub validation: f64,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

/// Loaded, split and standardized data plus the statistics used.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub standardization: Option<Standardization>,
}

impl DataConfig {
    /// Statistics are fitted on the training part only.
    pub fn prepare(&self, base: &Path, seed: u64) -> Result<PreparedData> {
        let all = self.source.load(base)?;
        let (mut train, mut validation) = if self.validation > 0.0 {
            let (t, v) = all.split(self.validation, seed)?;
            (t, Some(v))
        } else {
            (all, None)
        };
        let standardization = if self.standardize {
            let s = Standardization::fit(&train);
            s.apply(&mut train)?;
            if let Some(v) = validation.as_mut() {
                s.apply(v)?;
            }
            Some(s)
        } else {
            None
        };
        // class count is taken from the union so a rare class missing from
        // one side does not shrink the output layer
        let k = train
            .num_classes
            .max(validation.as_ref().map_or(0, |v| v.num_classes));
        train.num_classes = k;
        if let Some(v) = validation.as_mut() {
            v.num_classes = k;
        }
        Ok(PreparedData {
            train,
            validation,
            standardization,
        })
    }
}
