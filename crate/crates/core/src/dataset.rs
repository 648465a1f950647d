//! Dataset ingestion (fvecs/ivecs) and a seeded synthetic generator.
//!
//! An fvecs record is a little-endian `i32` dimension `D` followed by `D`
//! little-endian `f32` values; ivecs records carry `i32` values instead.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::common::SeededRng;
use crate::error::{Error, Result};
use crate::eval::ground_truth;

fn parse_records<T>(bytes: &[u8], what: &'static str, decode: impl Fn([u8; 4]) -> T) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    let mut pos = 0;
    while pos < bytes.len() {
        let header = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::format(what, format!("truncated dimension at byte {pos}")))?;
        let d = i32::from_le_bytes(header.try_into().expect("4 bytes"));
        if d <= 0 {
            return Err(Error::format(
                what,
                format!("non-positive dimension {d} at record {}", out.len()),
            ));
        }
        let d = d as usize;
        if let Some(expected) = dim {
            if expected != d {
                return Err(Error::format(
                    what,
                    format!("record {} has dimension {d}, expected {expected}", out.len()),
                ));
            }
        }
        dim = Some(d);
        pos += 4;
        let body = bytes
            .get(pos..pos + 4 * d)
            .ok_or_else(|| Error::format(what, format!("truncated record {}", out.len())))?;
        out.push(
            body.chunks_exact(4)
                .map(|c| decode(c.try_into().expect("4 bytes")))
                .collect(),
        );
        pos += 4 * d;
    }
    Ok(out)
}

/// Reads fvecs records, widening to `f64`. An empty input yields no vectors.
pub fn read_fvecs<R: Read>(mut r: R) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let rows = parse_records(&bytes, "fvecs", |b| f32::from_le_bytes(b) as f64)?;
    if let Some((i, _)) = rows.iter().flatten().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(rows)
}

pub fn read_ivecs<R: Read>(mut r: R) -> Result<Vec<Vec<i32>>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_records(&bytes, "ivecs", i32::from_le_bytes)
}

fn check_uniform<T>(rows: &[Vec<T>]) -> Result<()> {
    if let Some(first) = rows.first() {
        if first.is_empty() {
            return Err(Error::InvalidParameter("records must have positive dimension".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                actual: bad.len(),
            });
        }
    }
    Ok(())
}

/// Writes fvecs records, narrowing to `f32`.
pub fn write_fvecs<W: Write>(rows: &[Vec<f64>], mut w: W) -> Result<()> {
    check_uniform(rows)?;
    for row in rows {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for &x in row {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ivecs<W: Write>(rows: &[Vec<i32>], mut w: W) -> Result<()> {
    check_uniform(rows)?;
    for row in rows {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for &x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_fvecs_path(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    read_fvecs(BufReader::new(File::open(path)?))
}

pub fn read_ivecs_path(path: impl AsRef<Path>) -> Result<Vec<Vec<i32>>> {
    read_ivecs(BufReader::new(File::open(path)?))
}

pub fn write_fvecs_path(rows: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    write_fvecs(rows, BufWriter::new(File::create(path)?))
}

pub fn write_ivecs_path(rows: &[Vec<i32>], path: impl AsRef<Path>) -> Result<()> {
    write_ivecs(rows, BufWriter::new(File::create(path)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub base: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    pub ground_truth: Option<Vec<Vec<u32>>>,
}

impl Dataset {
    pub fn new(base: Vec<Vec<f64>>, queries: Vec<Vec<f64>>, ground_truth: Option<Vec<Vec<u32>>>) -> Result<Self> {
        let ds = Self {
            base,
            queries,
            ground_truth,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        check_uniform(&self.base)?;
        check_uniform(&self.queries)?;
        if let (Some(b), Some(q)) = (self.base.first(), self.queries.first()) {
            if b.len() != q.len() {
                return Err(Error::DimensionMismatch {
                    expected: b.len(),
                    actual: q.len(),
                });
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.queries.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.queries.len(),
                    actual: gt.len(),
                });
            }
            if let Some(&bad) = gt.iter().flatten().find(|&&id| id as usize >= self.base.len()) {
                return Err(Error::MissingId(bad));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.base.first().map_or(0, Vec::len)
    }

    /// Loads base and query fvecs plus optional ivecs ground truth.
    pub fn load(base: impl AsRef<Path>, queries: impl AsRef<Path>, truth: Option<&Path>) -> Result<Self> {
        let gt = match truth {
            Some(p) => Some(
                read_ivecs_path(p)?
                    .into_iter()
                    .map(|row| {
                        row.into_iter()
                            .map(|id| {
                                u32::try_from(id).map_err(|_| Error::format("ivecs", format!("negative id {id}")))
                            })
                            .collect::<Result<Vec<u32>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Self::new(read_fvecs_path(base)?, read_fvecs_path(queries)?, gt)
    }

    /// Ground truth truncated to `k`, computing it when absent or too short.
    pub fn truth(&self, k: usize) -> Result<Vec<Vec<u32>>> {
        match &self.ground_truth {
            Some(gt) if gt.iter().all(|r| r.len() >= k) => Ok(gt.iter().map(|r| r[..k].to_vec()).collect()),
            _ => ground_truth(&self.base, &self.queries, k),
        }
    }

    /// Computes ground truth for `k` unless a deep enough one is present.
    pub fn with_ground_truth(mut self, k: usize) -> Result<Self> {
        let truth = self.truth(k)?;
        self.ground_truth = Some(truth);
        Ok(self)
    }
}

/// Seeded Gaussian mixture on a low-dimensional latent subspace, linearly
/// embedded in `d` dimensions with isotropic ambient noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub queries: usize,
    pub d: usize,
    pub clusters: usize,
    pub latent_dim: usize,
    /// Spread of points around their cluster centre, relative to centre spread.
    pub cluster_std: f64,
    pub ambient_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            queries: 100,
            d: 128,
            clusters: 64,
            latent_dim: 16,
            cluster_std: 0.5,
            ambient_std: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.d == 0 || self.latent_dim == 0 || self.clusters == 0 {
            return Err(Error::InvalidParameter(
                "synthetic dimensions and cluster count must be positive".into(),
            ));
        }
        let mut rng = SeededRng::new(seed);
        let l = self.latent_dim;
        let scale = 1.0 / (l as f64).sqrt();
        let projection: Vec<f64> = (0..l * self.d).map(|_| rng.gaussian() * scale).collect();
        let centres: Vec<Vec<f64>> = (0..self.clusters)
            .map(|_| (0..l).map(|_| rng.gaussian()).collect())
            .collect();
        let sample = |rng: &mut SeededRng| {
            let c = &centres[rng.below(self.clusters)];
            let z: Vec<f64> = c.iter().map(|x| x + self.cluster_std * rng.gaussian()).collect();
            let mut v = vec![0.0; self.d];
            for (i, zi) in z.iter().enumerate() {
                for (o, p) in v.iter_mut().zip(&projection[i * self.d..(i + 1) * self.d]) {
                    *o += zi * p;
                }
            }
            for o in &mut v {
                *o += self.ambient_std * rng.gaussian();
            }
            v
        };
        let base = (0..self.n).map(|_| sample(&mut rng)).collect();
        let queries = (0..self.queries).map(|_| sample(&mut rng)).collect();
        Dataset::new(base, queries, None)
    }
}
