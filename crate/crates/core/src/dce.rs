//! Distance comparison encryption.
//!
//! A database vector `p` is encrypted into four vectors of width `2d + 16`,
//! a query `q` into one trapdoor vector of the same width. Given ciphertexts
//! of `o` and `p` and the trapdoor of `q`, [`distance_comp`] returns
//!
//! ```text
//! Z = 2 · r_o · r_p · r_q · (dist(o, q) − dist(p, q))
//! ```
//!
//! with `r_o, r_p, r_q > 0` fresh per-vector randoms, so the sign of `Z`
//! answers "is `o` closer to `q` than `p`" and nothing else about the
//! distances is revealed.
//!
//! Encryption has two phases. Randomization maps `p` (and `q`) into
//! `d + 8` dimensions such that `p̄ · q̄ = ‖p‖² − 2 pᵀq`: coordinates are
//! paired into sums and differences, permuted, split into halves padded
//! with random blinding terms, multiplied by two secret matrices and
//! permuted again. Transformation then lifts `p̄` through the halves of a
//! secret `(2d + 16)`-square matrix and blinds with four key vectors whose
//! pairwise products agree, so that the product difference
//! `c1(o) ∘ c3(p) − c2(o) ∘ c4(p)` collapses to `2 (ōᵀM_up + p̄ᵀM_down)`
//! scaled by the key vectors, which the trapdoor undoes.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::common::codec::{Decoder, Encoder};
use crate::common::{
    gen_conditioned_matrix, gen_permutation, InvertibleMatrix, Mat64, Perm, SeededRng, Vec64, CONDITIONED_SPREAD,
};
use crate::error::{check_dim, Error, Result};

pub const KEY_MAGIC: &[u8; 4] = b"DCEK";
pub const STORE_MAGIC: &[u8; 4] = b"DCEC";
pub const FORMAT_VERSION: u8 = 1;

/// Range of the per-vector positive multipliers `r_p`, `r_q`.
pub const POSITIVE_RANDOM_RANGE: (f64, f64) = (0.5, 2.0);
/// Range of the blinding randoms α, β and r′.
pub const BLINDING_RANGE: (f64, f64) = (-1.0, 1.0);

/// Width of a ciphertext part and of a trapdoor.
pub fn transformed_width(d: usize) -> usize {
    2 * d + 16
}

/// Width of a randomized vector.
pub fn randomized_width(d: usize) -> usize {
    d + 8
}

/// Multiply-accumulate steps one comparison performs: per lane one fused
/// multiply-subtract for the product difference and one accumulation into `Z`.
pub fn comparison_mac_count(d: usize) -> usize {
    2 * transformed_width(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DceSecretKey {
    d: usize,
    m1: InvertibleMatrix,
    m2: InvertibleMatrix,
    m3_up: Mat64,
    m3_down: Mat64,
    m3_inv: Mat64,
    pi1: Perm,
    pi2: Perm,
    r: [f64; 4],
    kv: [Vec64; 4],
}

impl DceSecretKey {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn m1(&self) -> &InvertibleMatrix {
        &self.m1
    }

    pub fn m2(&self) -> &InvertibleMatrix {
        &self.m2
    }

    pub fn m3_up(&self) -> &Mat64 {
        &self.m3_up
    }

    pub fn m3_down(&self) -> &Mat64 {
        &self.m3_down
    }

    pub fn m3_inv(&self) -> &Mat64 {
        &self.m3_inv
    }

    pub fn pi1(&self) -> &Perm {
        &self.pi1
    }

    pub fn pi2(&self) -> &Perm {
        &self.pi2
    }

    /// The shared randoms r1..r4 consumed by the query-side split.
    pub fn shared_randoms(&self) -> [f64; 4] {
        self.r
    }

    pub fn key_vectors(&self) -> &[Vec64; 4] {
        &self.kv
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut enc = Encoder::new(w);
        enc.bytes(KEY_MAGIC)?;
        enc.u8(FORMAT_VERSION)?;
        enc.len32(self.d)?;
        enc.mat64(&self.m1.matrix)?;
        enc.mat64(&self.m1.inverse)?;
        enc.mat64(&self.m2.matrix)?;
        enc.mat64(&self.m2.inverse)?;
        enc.mat64(&self.m3_up)?;
        enc.mat64(&self.m3_down)?;
        enc.mat64(&self.m3_inv)?;
        enc.perm(&self.pi1)?;
        enc.perm(&self.pi2)?;
        for r in self.r {
            enc.f64(r)?;
        }
        for kv in &self.kv {
            enc.vec64(kv)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut dec = Decoder::new(r, "DCE key");
        dec.magic(KEY_MAGIC)?;
        let version = dec.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("DCE key", format!("unsupported version {version}")));
        }
        let d = dec.u32()? as usize;
        let m1 = InvertibleMatrix {
            matrix: dec.mat64()?,
            inverse: dec.mat64()?,
        };
        let m2 = InvertibleMatrix {
            matrix: dec.mat64()?,
            inverse: dec.mat64()?,
        };
        let m3_up = dec.mat64()?;
        let m3_down = dec.mat64()?;
        let m3_inv = dec.mat64()?;
        let pi1 = dec.perm()?;
        let pi2 = dec.perm()?;
        let mut r = [0.0; 4];
        for x in &mut r {
            *x = dec.f64()?;
        }
        let kv = [dec.vec64()?, dec.vec64()?, dec.vec64()?, dec.vec64()?];
        dec.finish()?;
        let key = Self {
            d,
            m1,
            m2,
            m3_up,
            m3_down,
            m3_inv,
            pi1,
            pi2,
            r,
            kv,
        };
        key.validate_shapes()?;
        Ok(key)
    }

    fn validate_shapes(&self) -> Result<()> {
        let d = self.d;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::format("DCE key", format!("invalid dimension {d}")));
        }
        let h = d / 2 + 4;
        let w = transformed_width(d);
        let rw = randomized_width(d);
        let shapes = [
            (&self.m1.matrix, h, h),
            (&self.m1.inverse, h, h),
            (&self.m2.matrix, h, h),
            (&self.m2.inverse, h, h),
            (&self.m3_up, rw, w),
            (&self.m3_down, rw, w),
            (&self.m3_inv, w, w),
        ];
        for (m, r, c) in shapes {
            if m.rows() != r || m.cols() != c {
                return Err(Error::format("DCE key", "matrix shape does not match dimension"));
            }
        }
        if self.pi1.len() != d || self.pi2.len() != rw || self.kv.iter().any(|k| k.dim() != w) {
            return Err(Error::format(
                "DCE key",
                "permutation or key vector size does not match dimension",
            ));
        }
        if self.r[3] == 0.0 {
            return Err(Error::format("DCE key", "r4 must be non-zero"));
        }
        Ok(())
    }
}

/// Generates a secret key for dimension `d`, which must be even.
pub fn keygen(d: usize, seed: u64) -> Result<DceSecretKey> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!("dimension {d} must be at least 2")));
    }
    if !d.is_multiple_of(2) {
        return Err(Error::OddDimension(d));
    }
    let mut rng = SeededRng::new(seed);
    let h = d / 2 + 4;
    let w = transformed_width(d);
    let m1 = gen_conditioned_matrix(h, CONDITIONED_SPREAD, &mut rng)?;
    let m2 = gen_conditioned_matrix(h, CONDITIONED_SPREAD, &mut rng)?;
    let m3 = gen_conditioned_matrix(w, CONDITIONED_SPREAD, &mut rng)?;
    let (m3_up, m3_down) = m3.matrix.split_rows(randomized_width(d))?;
    let pi1 = gen_permutation(d, &mut rng);
    let pi2 = gen_permutation(randomized_width(d), &mut rng);
    let r = std::array::from_fn(|_| rng.signed_magnitude(0.5, 2.0));
    let kv = key_vectors(w, &mut rng);
    Ok(DceSecretKey {
        d,
        m1,
        m2,
        m3_up,
        m3_down,
        m3_inv: m3.inverse,
        pi1,
        pi2,
        r,
        kv,
    })
}

/// Builds kv1..kv4 from per-lane factors x, y, z, w as kv1 = xy, kv2 = xz,
/// kv3 = zw, kv4 = yw. Factors carry 24-bit mantissas so every pairwise
/// product is exact, hence `kv1 ∘ kv3 == kv2 ∘ kv4` holds bit for bit and
/// `kv4 == (kv1 ∘ kv3) / kv2` in exact arithmetic. Factor magnitudes in
/// [0.71, 1.41] keep each entry inside [0.5, 2].
fn key_vectors(width: usize, rng: &mut SeededRng) -> [Vec64; 4] {
    let mut kv: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(width));
    for _ in 0..width {
        let [x, y, z, w]: [f64; 4] = std::array::from_fn(|_| f64::from(rng.signed_magnitude(0.71, 1.41) as f32));
        kv[0].push(x * y);
        kv[1].push(x * z);
        kv[2].push(z * w);
        kv[3].push(y * w);
    }
    kv.map(Vec64::from_vec_unchecked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Database,
    Query,
}

/// Output of the randomization phase, of width `d + 8`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomizedVector(pub Vec64);

/// Maps `v` to its randomized form. Database vectors consume five blinding
/// randoms (α1, α2, r′1, r′2, r′3) and query vectors two (β1, β2), drawn in
/// that order from `rng`.
pub fn randomize(v: &[f64], sk: &DceSecretKey, role: Role, rng: &mut SeededRng) -> Result<RandomizedVector> {
    let d = sk.d;
    check_dim(d, v.len())?;
    let half = d / 2;
    let mut paired = Vec::with_capacity(d);
    for pair in v.chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        match role {
            Role::Database => paired.extend([a + b, a - b]),
            Role::Query => paired.extend([-(a + b), -(a - b)]),
        }
    }
    let hat = sk.pi1.apply(&paired)?;
    let (lo, hi) = hat.split_at(half);
    let mut first = lo.to_vec();
    let mut second = hi.to_vec();
    let (blo, bhi) = BLINDING_RANGE;
    let lifted = match role {
        Role::Database => {
            let a1 = rng.uniform(blo, bhi);
            let a2 = rng.uniform(blo, bhi);
            let rp = [rng.uniform(blo, bhi), rng.uniform(blo, bhi), rng.uniform(blo, bhi)];
            let [r1, r2, r3, r4] = sk.r;
            let norm_sq: f64 = v.iter().map(|x| x * x).sum();
            let gamma = (norm_sq - rp[0] * r1 - rp[1] * r2 - rp[2] * r3) / r4;
            first.extend([a1, -a1, rp[0], rp[1]]);
            second.extend([a2, a2, rp[2], gamma]);
            let mut out = sk.m1.matrix.left_mul(&first)?;
            out.extend(sk.m2.matrix.left_mul(&second)?);
            out
        }
        Role::Query => {
            let b1 = rng.uniform(blo, bhi);
            let b2 = rng.uniform(blo, bhi);
            let [r1, r2, r3, r4] = sk.r;
            first.extend([b1, b1, r1, r2]);
            second.extend([b2, -b2, r3, r4]);
            let mut out = sk.m1.inverse.mul_vec(&first)?;
            out.extend(sk.m2.inverse.mul_vec(&second)?);
            out
        }
    };
    Ok(RandomizedVector(Vec64::new(sk.pi2.apply(&lifted)?)?))
}

/// Four-part ciphertext of a database vector, stored contiguously as
/// `c1 | c2 | c3 | c4`, each part of width `2d + 16`.
#[derive(Clone, Debug, PartialEq)]
pub struct DceCiphertext {
    width: usize,
    data: Vec<f64>,
}

impl DceCiphertext {
    pub fn from_parts(parts: [Vec64; 4]) -> Result<Self> {
        let width = parts[0].dim();
        let mut data = Vec::with_capacity(4 * width);
        for p in &parts {
            check_dim(width, p.dim())?;
            data.extend_from_slice(p);
        }
        Ok(Self { width, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Part `i` in 1..=4.
    pub fn part(&self, i: usize) -> &[f64] {
        assert!((1..=4).contains(&i), "ciphertext parts are numbered 1..=4");
        &self.data[(i - 1) * self.width..i * self.width]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Number of stored reals, `8d + 64`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DceTrapdoor {
    t: Vec64,
}

impl DceTrapdoor {
    pub fn new(t: Vec64) -> Self {
        Self { t }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.t
    }

    pub fn width(&self) -> usize {
        self.t.dim()
    }
}

/// Transformation phase for an already randomized database vector with an
/// explicit multiplier `r_p > 0`.
pub fn transform_database(pbar: &RandomizedVector, r_p: f64, sk: &DceSecretKey) -> Result<DceCiphertext> {
    check_dim(randomized_width(sk.d), pbar.0.dim())?;
    let up = sk.m3_up.left_mul(&pbar.0)?;
    let down = sk.m3_down.left_mul(&pbar.0)?;
    let w = up.len();
    let mut data = Vec::with_capacity(4 * w);
    let [kv1, kv2, kv3, kv4] = &sk.kv;
    data.extend(up.iter().zip(kv1.iter()).map(|(u, k)| r_p * (u + 1.0) / k));
    data.extend(up.iter().zip(kv2.iter()).map(|(u, k)| r_p * (u - 1.0) / k));
    data.extend(down.iter().zip(kv3.iter()).map(|(u, k)| r_p * (u + 1.0) / k));
    data.extend(down.iter().zip(kv4.iter()).map(|(u, k)| r_p * (u - 1.0) / k));
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(data.iter().position(|x| !x.is_finite()).unwrap_or(0)));
    }
    Ok(DceCiphertext { width: w, data })
}

/// Transformation phase for a randomized query with an explicit `r_q > 0`:
/// `t = r_q · M3⁻¹ [q̄; −q̄] ∘ (kv2 ∘ kv4)`.
pub fn transform_query(qbar: &RandomizedVector, r_q: f64, sk: &DceSecretKey) -> Result<DceTrapdoor> {
    check_dim(randomized_width(sk.d), qbar.0.dim())?;
    let mut stacked = qbar.0.to_vec();
    stacked.extend(qbar.0.iter().map(|x| -x));
    let y = sk.m3_inv.mul_vec(&stacked)?;
    let t: Vec<f64> = y
        .iter()
        .zip(sk.kv[1].iter().zip(sk.kv[3].iter()))
        .map(|(y, (k2, k4))| r_q * y * (k2 * k4))
        .collect();
    Ok(DceTrapdoor { t: Vec64::new(t)? })
}

/// Encrypts a database vector with fresh randomness from `rng`.
pub fn encrypt_db(p: &[f64], sk: &DceSecretKey, rng: &mut SeededRng) -> Result<DceCiphertext> {
    let pbar = randomize(p, sk, Role::Database, rng)?;
    let (lo, hi) = POSITIVE_RANDOM_RANGE;
    let r_p = rng.uniform(lo, hi);
    transform_database(&pbar, r_p, sk)
}

/// Generates the trapdoor for a query with fresh randomness from `rng`.
pub fn trapgen(q: &[f64], sk: &DceSecretKey, rng: &mut SeededRng) -> Result<DceTrapdoor> {
    let qbar = randomize(q, sk, Role::Query, rng)?;
    let (lo, hi) = POSITIVE_RANDOM_RANGE;
    let r_q = rng.uniform(lo, hi);
    transform_query(&qbar, r_q, sk)
}

/// `Z = (c1(o) ∘ c3(p) − c2(o) ∘ c4(p))ᵀ t` over flat ciphertext records.
#[inline]
pub fn comparison_kernel(o: &[f64], p: &[f64], t: &[f64]) -> f64 {
    let w = t.len();
    debug_assert!(o.len() == 4 * w && p.len() == 4 * w);
    let (o1, o2) = (&o[..w], &o[w..2 * w]);
    let (p3, p4) = (&p[2 * w..3 * w], &p[3 * w..4 * w]);
    let mut acc = [0.0f64; 4];
    let n4 = w - w % 4;
    let mut i = 0;
    while i < n4 {
        for (l, a) in acc.iter_mut().enumerate() {
            let j = i + l;
            *a += (o1[j] * p3[j] - o2[j] * p4[j]) * t[j];
        }
        i += 4;
    }
    let mut tail = 0.0;
    for j in n4..w {
        tail += (o1[j] * p3[j] - o2[j] * p4[j]) * t[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Secure distance comparison. Negative iff `dist(o, q) < dist(p, q)`.
pub fn distance_comp(co: &DceCiphertext, cp: &DceCiphertext, tq: &DceTrapdoor) -> Result<f64> {
    check_dim(tq.width(), co.width)?;
    check_dim(tq.width(), cp.width)?;
    Ok(comparison_kernel(&co.data, &cp.data, tq.as_slice()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub multiplies: usize,
    pub multiply_accumulates: usize,
}

/// Scalar reference evaluation of [`distance_comp`] that tallies arithmetic:
/// per lane one plain multiply `o1·p3`, one multiply-subtract `− o2·p4` and one
/// multiply-accumulate into `Z`.
pub fn distance_comp_counted(co: &DceCiphertext, cp: &DceCiphertext, tq: &DceTrapdoor) -> Result<(f64, OpCount)> {
    check_dim(tq.width(), co.width)?;
    check_dim(tq.width(), cp.width)?;
    let mut count = OpCount::default();
    let mut z = 0.0;
    let t = tq.as_slice();
    for (j, tj) in t.iter().enumerate() {
        let mut x = co.part(1)[j] * cp.part(3)[j];
        count.multiplies += 1;
        x -= co.part(2)[j] * cp.part(4)[j];
        count.multiply_accumulates += 1;
        z += x * tj;
        count.multiply_accumulates += 1;
    }
    Ok((z, count))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    Closer,
    NotCloser,
}

/// `Closer` iff `Z < −eps`; ties and near-zero values report `NotCloser`.
pub fn is_closer(co: &DceCiphertext, cp: &DceCiphertext, tq: &DceTrapdoor, eps: f64) -> Result<Comparison> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidParameter(format!("eps must be non-negative, got {eps}")));
    }
    Ok(classify(distance_comp(co, cp, tq)?, eps))
}

pub fn classify(z: f64, eps: f64) -> Comparison {
    if z < -eps {
        Comparison::Closer
    } else {
        Comparison::NotCloser
    }
}

/// Contiguous store of `n` ciphertexts; record `i` belongs to vector id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DceStore {
    d: usize,
    width: usize,
    data: Vec<f64>,
}

impl DceStore {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            width: transformed_width(d),
            data: Vec::new(),
        }
    }

    /// Encrypts every vector in parallel; vector `i` draws from stream `i` of `seed`.
    pub fn encrypt_all(points: &[Vec<f64>], sk: &DceSecretKey, seed: u64) -> Result<Self> {
        let records = points
            .par_iter()
            .enumerate()
            .map(|(i, p)| encrypt_db(p, sk, &mut SeededRng::for_stream(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut store = Self::new(sk.d);
        store.data.reserve(records.len() * 4 * store.width);
        for r in &records {
            store.push(r)?;
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / (4 * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, c: &DceCiphertext) -> Result<u32> {
        check_dim(self.width, c.width)?;
        let id = self.len() as u32;
        self.data.extend_from_slice(&c.data);
        Ok(id)
    }

    pub fn record(&self, id: u32) -> &[f64] {
        let r = 4 * self.width;
        &self.data[id as usize * r..(id as usize + 1) * r]
    }

    pub fn get(&self, id: u32) -> DceCiphertext {
        DceCiphertext {
            width: self.width,
            data: self.record(id).to_vec(),
        }
    }

    /// `Z` for records `o` and `p` under trapdoor `t`.
    #[inline]
    pub fn compare(&self, o: u32, p: u32, t: &DceTrapdoor) -> f64 {
        comparison_kernel(self.record(o), self.record(p), t.as_slice())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut enc = Encoder::new(w);
        enc.bytes(STORE_MAGIC)?;
        enc.len32(self.len())?;
        enc.len32(self.d)?;
        enc.f64s(&self.data)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut dec = Decoder::new(r, "DCE ciphertext store");
        dec.magic(STORE_MAGIC)?;
        let n = dec.u32()? as usize;
        let d = dec.u32()? as usize;
        let width = transformed_width(d);
        let data = dec.f64s(n * 4 * width)?;
        dec.finish()?;
        Ok(Self { d, width, data })
    }
}
