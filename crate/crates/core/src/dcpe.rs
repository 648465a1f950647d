//! Scale-and-perturb encryption, the approximate distance-comparison-preserving
//! scheme used to build and search the filter index.
//!
//! `C(p) = s·p + λ`, where `λ` is uniform in direction and has norm
//! `(sβ/4)·x′^{1/d}` for `x′ ~ U(0, 1)`. Any Euclidean distance gap larger than
//! `β` between plaintexts survives encryption with the correct sign.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::common::codec::{Decoder, Encoder};
use crate::common::{sq_dist_slice, SeededRng};
use crate::error::{check_dim, Error, Result};

pub const KEY_MAGIC: &[u8; 4] = b"SAPK";
pub const STORE_MAGIC: &[u8; 4] = b"SAPC";

/// Scaling factor `s` used throughout the experiments.
pub const DEFAULT_SCALE: f64 = 1024.0;

/// Data-owner secret for scale-and-perturb. Never shipped to the server.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SapKey {
    s: f64,
    beta: f64,
    max_abs: f64,
    d: usize,
}

impl SapKey {
    pub fn scale(&self) -> f64 {
        self.s
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Radius of the noise ball, `s·β/4`.
    pub fn noise_radius(&self) -> f64 {
        self.s * self.beta / 4.0
    }

    /// Recommended β interval `[√M, 2M√d]` for the dataset's max coordinate `M`.
    pub fn recommended_beta_range(&self) -> (f64, f64) {
        (self.max_abs.sqrt(), 2.0 * self.max_abs * (self.d as f64).sqrt())
    }

    pub fn beta_in_recommended_range(&self) -> bool {
        let (lo, hi) = self.recommended_beta_range();
        (lo..=hi).contains(&self.beta)
    }

    /// Same key with a different β; used by β tuning.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let key = SapKey { beta, ..*self };
        validate(&key)?;
        Ok(key)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut enc = Encoder::new(w);
        enc.bytes(KEY_MAGIC)?;
        enc.f64(self.s)?;
        enc.f64(self.beta)?;
        enc.f64(self.max_abs)?;
        enc.len32(self.d)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut dec = Decoder::new(r, "SAP key");
        dec.magic(KEY_MAGIC)?;
        let (s, beta, max_abs) = (dec.f64()?, dec.f64()?, dec.f64()?);
        let d = dec.u32()? as usize;
        dec.finish()?;
        let key = SapKey { s, beta, max_abs, d };
        validate(&key)?;
        Ok(key)
    }
}

fn validate(key: &SapKey) -> Result<()> {
    if !(key.s > 0.0 && key.s.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "scaling factor must be positive, got {}",
            key.s
        )));
    }
    if !(key.beta > 0.0 && key.beta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive, got {}",
            key.beta
        )));
    }
    if key.d == 0 || key.max_abs.is_nan() || key.max_abs < 0.0 {
        return Err(Error::InvalidParameter(
            "dimension and max coordinate must be valid".into(),
        ));
    }
    Ok(())
}

/// Builds a key. A β outside `[√M, 2M√d]` is logged as a warning and kept,
/// since β is normally tuned for a target filter recall.
pub fn sap_keygen(s: f64, beta: f64, dataset_max_abs: f64, d: usize) -> Result<SapKey> {
    let key = SapKey {
        s,
        beta,
        max_abs: dataset_max_abs,
        d,
    };
    validate(&key)?;
    if !key.beta_in_recommended_range() {
        let (lo, hi) = key.recommended_beta_range();
        log::warn!("beta {beta} outside the recommended range [{lo:.4}, {hi:.4}]");
    }
    Ok(key)
}

/// Largest absolute coordinate over a dataset.
pub fn max_abs_coordinate(points: &[Vec<f64>]) -> f64 {
    points.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Draws the perturbation `λ` and its norm `x`.
pub fn perturbation(d: usize, radius: f64, rng: &mut SeededRng) -> (Vec<f64>, f64) {
    let u = loop {
        let u: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        if u.iter().any(|x| *x != 0.0) {
            break u;
        }
    };
    let x = radius * rng.open01().powf(1.0 / d as f64);
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    (u.iter().map(|v| x * v / norm).collect(), x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SapCiphertext(pub Vec<f64>);

impl SapCiphertext {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn sap_encrypt(p: &[f64], key: &SapKey, rng: &mut SeededRng) -> Result<SapCiphertext> {
    check_dim(key.d, p.len())?;
    let (lambda, _) = perturbation(key.d, key.noise_radius(), rng);
    Ok(SapCiphertext(
        p.iter().zip(&lambda).map(|(x, l)| key.s * x + l).collect(),
    ))
}

/// Euclidean distance between two ciphertexts.
pub fn approx_dist(ca: &SapCiphertext, cb: &SapCiphertext) -> Result<f64> {
    check_dim(ca.dim(), cb.dim())?;
    Ok(sq_dist_slice(&ca.0, &cb.0).sqrt())
}

/// Row-major store of `n` ciphertexts indexed by vector id.
#[derive(Clone, Debug, PartialEq)]
pub struct SapStore {
    d: usize,
    data: Vec<f64>,
}

impl SapStore {
    pub fn new(d: usize) -> Self {
        Self { d, data: Vec::new() }
    }

    /// Encrypts every vector in parallel; vector `i` draws from stream `i` of `seed`.
    pub fn encrypt_all(points: &[Vec<f64>], key: &SapKey, seed: u64) -> Result<Self> {
        let cts = points
            .par_iter()
            .enumerate()
            .map(|(i, p)| sap_encrypt(p, key, &mut SeededRng::for_stream(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut store = Self::new(key.d);
        store.data.reserve(cts.len() * key.d);
        for c in &cts {
            store.data.extend_from_slice(&c.0);
        }
        Ok(store)
    }

    /// Wraps already-encrypted (or, for oracle tests, plaintext) rows.
    pub fn from_rows(d: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut store = Self::new(d);
        for r in rows {
            store.push(r)?;
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, c: &[f64]) -> Result<u32> {
        check_dim(self.d, c.len())?;
        let id = self.len() as u32;
        self.data.extend_from_slice(c);
        Ok(id)
    }

    #[inline]
    pub fn get(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Squared distance between stored rows; the index only needs a monotone proxy.
    #[inline]
    pub fn sq_dist(&self, a: u32, b: u32) -> f64 {
        sq_dist_slice(self.get(a), self.get(b))
    }

    #[inline]
    pub fn sq_dist_to(&self, query: &[f64], id: u32) -> f64 {
        sq_dist_slice(query, self.get(id))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut enc = Encoder::new(w);
        enc.bytes(STORE_MAGIC)?;
        enc.len32(self.len())?;
        enc.len32(self.d)?;
        enc.f64s(&self.data)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut dec = Decoder::new(r, "SAP ciphertext store");
        dec.magic(STORE_MAGIC)?;
        let n = dec.u32()? as usize;
        let d = dec.u32()? as usize;
        if d == 0 {
            return Err(Error::format("SAP ciphertext store", "zero dimension"));
        }
        let data = dec.f64s(n * d)?;
        dec.finish()?;
        Ok(Self { d, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn euclid(a: &[f64], b: &[f64]) -> f64 {
        sq_dist_slice(a, b).sqrt()
    }

    fn random_point(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn keygen_validation() {
        assert!(sap_keygen(1024.0, 450.0, 255.0, 128).is_ok());
        assert!(sap_keygen(1024.0, 0.0, 1.0, 4).is_err());
        assert!(sap_keygen(0.0, 1.0, 1.0, 4).is_err());
        assert!(sap_keygen(-1.0, 1.0, 1.0, 4).is_err());
        let k = sap_keygen(1024.0, 450.0, 218.0, 128).unwrap();
        assert!(k.beta_in_recommended_range());
        let k = sap_keygen(1.0, 1e-3, 1.0, 8).unwrap();
        assert!(!k.beta_in_recommended_range());
    }

    #[test]
    fn noise_radius_bound() {
        let key = sap_keygen(1024.0, 2.5, 1.0, 16).unwrap();
        let mut rng = SeededRng::new(1);
        let p = random_point(&mut rng, 16);
        let scaled: Vec<f64> = p.iter().map(|x| key.scale() * x).collect();
        for _ in 0..10_000 {
            let c = sap_encrypt(&p, &key, &mut rng).unwrap();
            assert!(euclid(&c.0, &scaled) <= key.noise_radius() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn perturbation_norm_is_radius_draw() {
        let mut rng = SeededRng::new(2);
        for _ in 0..1000 {
            let (l, x) = perturbation(10, 3.0, &mut rng);
            let n = l.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - x).abs() <= 1e-12 * x);
        }
    }

    // x / (sβ/4) = x′^{1/d} has CDF t^d on (0, 1).
    #[test]
    fn radius_distribution_matches_closed_form() {
        let d = 8;
        let mut rng = SeededRng::new(3);
        let mut radii: Vec<f64> = (0..100_000).map(|_| perturbation(d, 1.0, &mut rng).1).collect();
        radii.sort_by(f64::total_cmp);
        let n = radii.len() as f64;
        let ks = radii
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let cdf = t.powi(d as i32);
                (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks <= 0.02, "Kolmogorov distance {ks}");
    }

    #[test]
    fn approx_dist_basic() {
        let c = SapCiphertext(vec![1.0, 2.0]);
        assert_eq!(approx_dist(&c, &c).unwrap(), 0.0);
        assert_eq!(approx_dist(&c, &SapCiphertext(vec![4.0, 6.0])).unwrap(), 5.0);
        assert!(approx_dist(&c, &SapCiphertext(vec![1.0])).is_err());
    }

    #[test]
    fn scaled_distance_band() {
        let d = 12;
        let key = sap_keygen(1024.0, 0.3, 1.0, d).unwrap();
        let mut rng = SeededRng::new(4);
        for _ in 0..2000 {
            let p = random_point(&mut rng, d);
            let q = random_point(&mut rng, d);
            let a = approx_dist(
                &sap_encrypt(&p, &key, &mut rng).unwrap(),
                &sap_encrypt(&q, &key, &mut rng).unwrap(),
            )
            .unwrap()
                / key.scale();
            let true_d = euclid(&p, &q);
            assert!(a >= true_d - key.beta() / 2.0 - 1e-9 && a <= true_d + key.beta() / 2.0 + 1e-9);
        }
    }

    #[test]
    fn beta_dcp_holds_with_margin() {
        let d = 8;
        let key = sap_keygen(1024.0, 0.2, 1.0, d).unwrap();
        let mut rng = SeededRng::new(5);
        let mut tested = 0;
        while tested < 20_000 {
            let o = random_point(&mut rng, d);
            let p = random_point(&mut rng, d);
            let q = random_point(&mut rng, d);
            if euclid(&o, &q) >= euclid(&p, &q) - key.beta() {
                continue;
            }
            let co = sap_encrypt(&o, &key, &mut rng).unwrap();
            let cp = sap_encrypt(&p, &key, &mut rng).unwrap();
            let cq = sap_encrypt(&q, &key, &mut rng).unwrap();
            assert!(approx_dist(&co, &cq).unwrap() < approx_dist(&cp, &cq).unwrap());
            tested += 1;
        }
    }

    #[test]
    fn encrypted_nearest_neighbour_error_bound() {
        let d = 6;
        let key = sap_keygen(1024.0, 0.25, 1.0, d).unwrap();
        let mut rng = SeededRng::new(6);
        let base: Vec<_> = (0..1000).map(|_| random_point(&mut rng, d)).collect();
        let store = SapStore::encrypt_all(&base, &key, 6).unwrap();
        for _ in 0..20 {
            let q = random_point(&mut rng, d);
            let cq = sap_encrypt(&q, &key, &mut rng).unwrap();
            let star = (0..base.len() as u32)
                .min_by(|&a, &b| store.sq_dist_to(&cq.0, a).total_cmp(&store.sq_dist_to(&cq.0, b)))
                .unwrap();
            let d_star = euclid(&q, &base[star as usize]);
            for p in &base {
                assert!(d_star <= euclid(&q, p) + key.beta() + 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_store_and_round_trip() {
        let d = 5;
        let key = sap_keygen(1024.0, 1.0, 1.0, d).unwrap();
        let mut rng = SeededRng::new(7);
        let base: Vec<_> = (0..20).map(|_| random_point(&mut rng, d)).collect();
        let a = SapStore::encrypt_all(&base, &key, 1).unwrap();
        let b = SapStore::encrypt_all(&base, &key, 1).unwrap();
        assert_eq!(a, b);
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SAPC");
        assert_eq!(bytes.len(), 12 + 20 * d * 8);
        assert_eq!(SapStore::read_from(&bytes[..]).unwrap(), a);

        let mut kb = Vec::new();
        key.write_to(&mut kb).unwrap();
        assert_eq!(SapKey::read_from(&kb[..]).unwrap(), key);
    }
}
