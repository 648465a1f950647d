//! Asymmetric scalar-product-preserving encryption (ASPE) and known-plaintext
//! recovery attacks against variants that leak a transformation of the
//! squared distance.
//!
//! Database vectors are lifted to `p′ = [p, 1, ‖p‖²]` and queries to
//! `q′ = [−2q, ‖q‖², 1]`, so `p′ᵀq′ = ‖p − q‖²`. Ciphertexts are
//! `Mᵀp′` and `M⁻¹q′`. Variants blind the query side with per-query scalars
//! and apply an outer function to the ciphertext inner product.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::common::{dot, gen_invertible_matrix, sq_dist_slice, InvertibleMatrix, Mat64, SeededRng, Vec64};
use crate::error::{check_dim, Error, Result};

/// Resampling budget for degenerate leaked sets.
pub const MAX_RESAMPLES: usize = 10;
/// Systems with a larger 1-norm condition number are treated as singular.
const SINGULAR_CONDITION: f64 = 1e14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Linear,
    Exponential,
    Logarithmic,
    Square,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Linear,
        Variant::Exponential,
        Variant::Logarithmic,
        Variant::Square,
    ];

    /// Number of leaked plaintexts the recovery uses.
    pub fn system_size(self, d: usize) -> usize {
        match self {
            Variant::Square => square_basis_dim(d),
            _ => d + 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Linear => "linear",
            Variant::Exponential => "exp",
            Variant::Logarithmic => "log",
            Variant::Square => "square",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variant {s:?}")))
    }
}

/// Distance transformation with its scalars. `dist` is the squared
/// Euclidean distance and `dist′ = ‖p‖² − 2pᵀq`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    /// `a·dist + b`
    Linear { a: f64, b: f64 },
    /// `exp(a·dist + b)`
    Exponential { a: f64, b: f64 },
    /// `ln(a·dist + b)`
    Logarithmic { a: f64, b: f64 },
    /// `r1·(dist′ + r2)² + r3`
    Square { r1: f64, r2: f64, r3: f64 },
}

impl Transform {
    pub fn variant(&self) -> Variant {
        match self {
            Transform::Linear { .. } => Variant::Linear,
            Transform::Exponential { .. } => Variant::Exponential,
            Transform::Logarithmic { .. } => Variant::Logarithmic,
            Transform::Square { .. } => Variant::Square,
        }
    }

    /// Scalars with `a, r1 ∈ [0.5, 2]`. The logarithmic offset is positive
    /// so the argument stays in the domain.
    pub fn random(variant: Variant, rng: &mut SeededRng) -> Self {
        let a = rng.uniform(0.5, 2.0);
        match variant {
            Variant::Linear => Transform::Linear {
                a,
                b: rng.uniform(-1.0, 1.0),
            },
            Variant::Exponential => Transform::Exponential {
                a: a / 16.0,
                b: rng.uniform(-1.0, 1.0),
            },
            Variant::Logarithmic => Transform::Logarithmic {
                a,
                b: rng.uniform(0.1, 1.0),
            },
            Variant::Square => Transform::Square {
                r1: a,
                r2: rng.uniform(-1.0, 1.0),
                r3: rng.uniform(-1.0, 1.0),
            },
        }
    }

    /// Applies the outer function to the blinded inner product.
    fn outer(&self, ip: f64) -> Result<f64> {
        let v = match *self {
            Transform::Linear { .. } => ip,
            Transform::Exponential { .. } => ip.exp(),
            Transform::Logarithmic { .. } => {
                if ip <= 0.0 {
                    return Err(Error::LogDomain(ip));
                }
                ip.ln()
            }
            Transform::Square { r1, r3, .. } => r1 * ip * ip + r3,
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(0))
        }
    }
}

/// Direct evaluation of the leaked quantity from plaintexts.
pub fn leak(transform: &Transform, p: &[f64], q: &[f64]) -> Result<f64> {
    check_dim(p.len(), q.len())?;
    let dist = sq_dist_slice(p, q);
    let v = match *transform {
        Transform::Linear { a, b } => a * dist + b,
        Transform::Exponential { a, b } => (a * dist + b).exp(),
        Transform::Logarithmic { a, b } => {
            let arg = a * dist + b;
            if arg <= 0.0 {
                return Err(Error::LogDomain(arg));
            }
            arg.ln()
        }
        Transform::Square { r1, r2, r3 } => {
            let dp = dot(p, p) - 2.0 * dot(p, q) + r2;
            r1 * dp * dp + r3
        }
    };
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AspeKey {
    m: InvertibleMatrix,
    d: usize,
}

impl AspeKey {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &InvertibleMatrix {
        &self.m
    }
}

pub fn aspe_keygen(d: usize, rng: &mut SeededRng) -> Result<AspeKey> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    Ok(AspeKey {
        m: gen_invertible_matrix(d + 2, rng)?,
        d,
    })
}

fn lift_database(p: &[f64]) -> Vec<f64> {
    let mut v = p.to_vec();
    v.push(1.0);
    v.push(dot(p, p));
    v
}

/// `Mᵀ [p, 1, ‖p‖²]`.
pub fn aspe_encrypt(p: &[f64], key: &AspeKey) -> Result<Vec64> {
    check_dim(key.d, p.len())?;
    Vec64::new(key.m.matrix.left_mul(&lift_database(p))?)
}

/// `M⁻¹ [−2q, ‖q‖², 1]`; pairs with [`aspe_encrypt`] to give `‖p − q‖²`.
pub fn aspe_trapgen(q: &[f64], key: &AspeKey) -> Result<Vec64> {
    check_dim(key.d, q.len())?;
    let mut v: Vec<f64> = q.iter().map(|x| -2.0 * x).collect();
    v.push(dot(q, q));
    v.push(1.0);
    Vec64::new(key.m.inverse.mul_vec(&v)?)
}

/// A query token for a leaking variant: blinded trapdoor plus the outer function.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantTrapdoor {
    pub t: Vec64,
    pub transform: Transform,
}

/// Trapdoor whose inner product with [`aspe_encrypt`] is the inner argument
/// of `transform`: `a·dist + b` for the first three variants, `dist′ + r2`
/// for the square variant.
pub fn variant_trapgen(q: &[f64], key: &AspeKey, transform: Transform) -> Result<VariantTrapdoor> {
    check_dim(key.d, q.len())?;
    let qq = dot(q, q);
    let v: Vec<f64> = match transform {
        Transform::Linear { a, b } | Transform::Exponential { a, b } | Transform::Logarithmic { a, b } => {
            q.iter().map(|x| -2.0 * a * x).chain([a * qq + b, a]).collect()
        }
        Transform::Square { r2, .. } => q.iter().map(|x| -2.0 * x).chain([r2, 1.0]).collect(),
    };
    Ok(VariantTrapdoor {
        t: Vec64::new(key.m.inverse.mul_vec(&v)?)?,
        transform,
    })
}

/// What the server observes when evaluating a ciphertext against a token.
pub fn observe(c: &Vec64, trapdoor: &VariantTrapdoor) -> Result<f64> {
    check_dim(c.dim(), trapdoor.t.dim())?;
    trapdoor.transform.outer(dot(c, &trapdoor.t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeakRecord {
    pub db_index: usize,
    pub query_index: usize,
    pub value: f64,
}

/// `(d² + 5d + 6) / 2`.
pub fn square_basis_dim(d: usize) -> usize {
    (d * d + 5 * d + 6) / 2
}

/// Database-side monomial basis for the square variant:
/// `[‖p‖⁴, ‖p‖²·p, ‖p‖², 4p², 8pᵢpⱼ (i<j), −4p, 1]`.
pub fn expand_square_basis(p: &[f64]) -> Vec<f64> {
    let d = p.len();
    let pp = dot(p, p);
    let mut out = Vec::with_capacity(square_basis_dim(d));
    out.push(pp * pp);
    out.extend(p.iter().map(|x| pp * x));
    out.push(pp);
    out.extend(p.iter().map(|x| 4.0 * x * x));
    for i in 0..d {
        for j in i + 1..d {
            out.push(8.0 * p[i] * p[j]);
        }
    }
    out.extend(p.iter().map(|x| -4.0 * x));
    out.push(1.0);
    out
}

/// Query-side companion of [`expand_square_basis`]:
/// `[r1, −4r1·q, 2r1r2, r1q², r1qᵢqⱼ (i<j), r1r2·q, r1r2² + r3]`.
pub fn expand_square_query(q: &[f64], r1: f64, r2: f64, r3: f64) -> Vec<f64> {
    let d = q.len();
    let mut out = Vec::with_capacity(square_basis_dim(d));
    out.push(r1);
    out.extend(q.iter().map(|x| -4.0 * r1 * x));
    out.push(2.0 * r1 * r2);
    out.extend(q.iter().map(|x| r1 * x * x));
    for i in 0..d {
        for j in i + 1..d {
            out.push(r1 * q[i] * q[j]);
        }
    }
    out.extend(q.iter().map(|x| r1 * r2 * x));
    out.push(r1 * r2 * r2 + r3);
    out
}

/// Row of the coefficient matrix contributed by one leaked plaintext.
pub fn coefficient_row(variant: Variant, p: &[f64]) -> Vec<f64> {
    match variant {
        Variant::Square => expand_square_basis(p),
        _ => p.iter().map(|x| -2.0 * x).chain([dot(p, p), 1.0]).collect(),
    }
}

/// Coefficient matrix with one row per leaked plaintext.
pub fn coefficient_matrix(variant: Variant, leaked: &[Vec<f64>]) -> Result<Mat64> {
    Mat64::from_rows(&leaked.iter().map(|p| coefficient_row(variant, p)).collect::<Vec<_>>())
}

/// Undoes the outer function so the right-hand side is linear in the unknowns.
pub fn pre_transform(variant: Variant, value: f64) -> Result<f64> {
    let v = match variant {
        Variant::Linear | Variant::Square => value,
        Variant::Exponential => {
            if value <= 0.0 {
                return Err(Error::LogDomain(value));
            }
            value.ln()
        }
        Variant::Logarithmic => value.exp(),
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(0))
    }
}

/// Factorisation of a column-equilibrated system, reused across right-hand
/// sides. Square systems use LU with partial pivoting; tall systems are
/// solved in the least-squares sense through Householder QR.
pub struct FactoredSystem {
    solver: Solver,
    col_scale: Vec<f64>,
    rows: usize,
    condition: f64,
}

enum Solver {
    Lu(LU<f64, Dyn, Dyn>),
    Qr { qt: DMatrix<f64>, r: DMatrix<f64> },
}

fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.lp_norm(1)).fold(0.0, f64::max)
}

impl FactoredSystem {
    pub fn new(a: &Mat64) -> Result<Self> {
        let (rows, cols) = (a.rows(), a.cols());
        if rows < cols {
            return Err(Error::InvalidParameter(format!("underdetermined system {rows}x{cols}")));
        }
        let mut m = DMatrix::from_row_slice(rows, cols, a.as_slice());
        let col_scale: Vec<f64> = (0..cols)
            .map(|c| {
                let mx = m.column(c).amax();
                if mx > 0.0 {
                    1.0 / mx
                } else {
                    1.0
                }
            })
            .collect();
        for (c, s) in col_scale.iter().enumerate() {
            m.column_mut(c).scale_mut(*s);
        }
        let (solver, condition) = if rows == cols {
            let a_norm = norm_1(&m);
            let lu = m.lu();
            let inv = lu.try_inverse().ok_or(Error::SingularSystem { attempts: 1 })?;
            let cond = a_norm * norm_1(&inv);
            (Solver::Lu(lu), cond)
        } else {
            let qr = m.qr();
            let r = qr.r();
            let r_inv = r
                .clone()
                .solve_upper_triangular(&DMatrix::identity(cols, cols))
                .ok_or(Error::SingularSystem { attempts: 1 })?;
            let cond = norm_1(&r) * norm_1(&r_inv);
            (
                Solver::Qr {
                    qt: qr.q().transpose(),
                    r,
                },
                cond,
            )
        };
        if !condition.is_finite() || condition > SINGULAR_CONDITION {
            return Err(Error::SingularSystem { attempts: 1 });
        }
        Ok(Self {
            solver,
            col_scale,
            rows,
            condition,
        })
    }

    /// 1-norm condition number of the equilibrated matrix (of `R` for tall systems).
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, b.len())?;
        let b = DVector::from_column_slice(b);
        let y = match &self.solver {
            Solver::Lu(lu) => lu.solve(&b),
            Solver::Qr { qt, r } => r.solve_upper_triangular(&(qt * b)),
        }
        .ok_or(Error::SingularSystem { attempts: 1 })?;
        let x: Vec<f64> = y.iter().zip(&self.col_scale).map(|(v, s)| v * s).collect();
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::SingularSystem { attempts: 1 })
        }
    }
}

/// Index of the `‖p‖²` column in the square basis. It equals a quarter of
/// the sum of the `4pᵢ²` columns, so the solver drops it and the unknown for
/// each `4pᵢ²` column absorbs its coefficient.
fn square_dependent_column(d: usize) -> usize {
    d + 1
}

/// Coefficient matrix restricted to linearly independent columns.
fn solvable_matrix(variant: Variant, leaked: &[Vec<f64>]) -> Result<Mat64> {
    let full = coefficient_matrix(variant, leaked)?;
    if variant != Variant::Square {
        return Ok(full);
    }
    let skip = square_dependent_column(leaked[0].len());
    let rows: Vec<Vec<f64>> = (0..full.rows())
        .map(|r| {
            full.row(r)
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != skip)
                .map(|(_, v)| *v)
                .collect()
        })
        .collect();
    Mat64::from_rows(&rows)
}

/// A recovered query together with the full unknown vector of its system.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredQuery {
    pub q: Vec<f64>,
    /// `[a·q, a, a‖q‖² + b]`, or the square-query expansion without its
    /// dependent entry.
    pub unknowns: Vec<f64>,
    pub condition: f64,
}

fn extract_query(variant: Variant, d: usize, x: &[f64]) -> Result<Vec<f64>> {
    let (coef, denom) = match variant {
        Variant::Square => (&x[1..1 + d], -4.0 * x[0]),
        _ => (&x[..d], x[d]),
    };
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::SingularSystem { attempts: 1 });
    }
    Ok(coef.iter().map(|v| v / denom).collect())
}

/// Recovers one query from `leaks[i] = L(C_{p_i}, T_q)` for the leaked plaintexts.
pub fn recover_query(variant: Variant, leaked: &[Vec<f64>], leaks: &[f64]) -> Result<RecoveredQuery> {
    let mut out = recover_queries(variant, leaked, &[leaks.to_vec()])?;
    Ok(out.remove(0))
}

/// Recovers many queries against the same leaked set, factoring once.
/// `leaks[j][i]` is the leak of leaked plaintext `i` against query `j`.
pub fn recover_queries(variant: Variant, leaked: &[Vec<f64>], leaks: &[Vec<f64>]) -> Result<Vec<RecoveredQuery>> {
    let d = leaked.first().ok_or(Error::Empty("no leaked plaintexts"))?.len();
    check_dim(variant.system_size(d), leaked.len())?;
    let system = FactoredSystem::new(&solvable_matrix(variant, leaked)?)?;
    leaks
        .iter()
        .map(|row| {
            let b = row
                .iter()
                .map(|&v| pre_transform(variant, v))
                .collect::<Result<Vec<_>>>()?;
            let x = system.solve(&b)?;
            Ok(RecoveredQuery {
                q: extract_query(variant, d, &x)?,
                unknowns: x,
                condition: system.condition(),
            })
        })
        .collect()
}

/// Row contributed by a recovered query when solving for a database vector.
fn query_row(variant: Variant, d: usize, x: &[f64]) -> Vec<f64> {
    match variant {
        Variant::Square => x.to_vec(),
        _ => x[..d].iter().map(|v| -2.0 * v).chain([x[d], x[d + 1]]).collect(),
    }
}

fn extract_database(variant: Variant, d: usize, y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    let (coef, denom) = match variant {
        Variant::Square => (&y[n - 1 - d..n - 1], -4.0 * y[n - 1]),
        _ => (&y[..d], y[d + 1]),
    };
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::SingularSystem { attempts: 1 });
    }
    Ok(coef.iter().map(|v| v / denom).collect())
}

/// Recovers database vectors from their leaks against recovered queries.
/// `leaks[t][j]` is the leak of target `t` against query `j`.
pub fn recover_database_vectors(
    variant: Variant,
    queries: &[RecoveredQuery],
    leaks: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let d = queries.first().ok_or(Error::Empty("no recovered queries"))?.q.len();
    check_dim(variant.system_size(d), queries.len())?;
    let rows: Vec<Vec<f64>> = queries.iter().map(|r| query_row(variant, d, &r.unknowns)).collect();
    let system = FactoredSystem::new(&Mat64::from_rows(&rows)?)?;
    let recovered = leaks
        .iter()
        .map(|row| {
            check_dim(queries.len(), row.len())?;
            let b = row
                .iter()
                .map(|&v| pre_transform(variant, v))
                .collect::<Result<Vec<_>>>()?;
            extract_database(variant, d, &system.solve(&b)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((recovered, system.condition()))
}

pub fn recover_database_vector(variant: Variant, queries: &[RecoveredQuery], leaks: &[f64]) -> Result<Vec<f64>> {
    let (mut out, _) = recover_database_vectors(variant, queries, &[leaks.to_vec()])?;
    Ok(out.remove(0))
}

/// `‖x − truth‖ / ‖truth‖`, or the absolute error when `truth` is zero.
pub fn relative_error(x: &[f64], truth: &[f64]) -> f64 {
    let err = sq_dist_slice(x, truth).sqrt();
    let norm = dot(truth, truth).sqrt();
    if norm > 0.0 {
        err / norm
    } else {
        err
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub variant: Variant,
    pub d: usize,
    /// Database vectors outside the leaked set to recover.
    pub targets: usize,
    /// Standard deviation of additive Gaussian noise on every observed leak.
    pub leak_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub variant: Variant,
    pub d: usize,
    pub leaked: usize,
    /// Worst relative error over all recovered queries.
    pub query_error: f64,
    /// Worst relative error over the recovered database targets.
    pub database_error: f64,
    pub query_condition: f64,
    pub database_condition: f64,
    /// Leaked sets drawn, including the successful one.
    pub attempts: usize,
    pub elapsed: Duration,
}

fn random_vector(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// End-to-end attack on one seeded instance: encrypt a database and a query
/// set, observe leaks through the ciphertexts, recover every query from the
/// leaked plaintexts, then recover held-out database vectors.
pub fn run_attack(config: AttackConfig, seed: u64) -> Result<AttackOutcome> {
    let AttackConfig {
        variant,
        d,
        targets,
        leak_noise,
    } = config;
    let start = Instant::now();
    let mut rng = SeededRng::new(seed);
    let key = aspe_keygen(d, &mut rng)?;
    let n = variant.system_size(d);
    let queries: Vec<Vec<f64>> = (0..n).map(|_| random_vector(&mut rng, d)).collect();
    let trapdoors = queries
        .iter()
        .map(|q| variant_trapgen(q, &key, Transform::random(variant, &mut rng)))
        .collect::<Result<Vec<_>>>()?;
    let noisy = |v: f64, rng: &mut SeededRng| {
        if leak_noise > 0.0 {
            v + leak_noise * rng.gaussian()
        } else {
            v
        }
    };

    let mut attempts = 0;
    loop {
        attempts += 1;
        let leaked: Vec<Vec<f64>> = (0..n).map(|_| random_vector(&mut rng, d)).collect();
        let cts = leaked
            .iter()
            .map(|p| aspe_encrypt(p, &key))
            .collect::<Result<Vec<_>>>()?;
        let leaks = trapdoors
            .iter()
            .map(|t| {
                cts.iter()
                    .map(|c| Ok(noisy(observe(c, t)?, &mut rng)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let recovered = match recover_queries(variant, &leaked, &leaks) {
            Err(Error::SingularSystem { .. }) if attempts < MAX_RESAMPLES => continue,
            Err(Error::SingularSystem { .. }) => return Err(Error::SingularSystem { attempts }),
            r => r?,
        };
        let query_error = recovered
            .iter()
            .zip(&queries)
            .map(|(r, q)| relative_error(&r.q, q))
            .fold(0.0, f64::max);

        let hidden: Vec<Vec<f64>> = (0..targets).map(|_| random_vector(&mut rng, d)).collect();
        let hidden_leaks = hidden
            .iter()
            .map(|p| {
                let c = aspe_encrypt(p, &key)?;
                trapdoors
                    .iter()
                    .map(|t| Ok(noisy(observe(&c, t)?, &mut rng)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let (database_error, database_condition) = if hidden.is_empty() {
            (0.0, 0.0)
        } else {
            let (found, cond) = recover_database_vectors(variant, &recovered, &hidden_leaks)?;
            (
                found
                    .iter()
                    .zip(&hidden)
                    .map(|(r, p)| relative_error(r, p))
                    .fold(0.0, f64::max),
                cond,
            )
        };
        return Ok(AttackOutcome {
            variant,
            d,
            leaked: n,
            query_error,
            database_error,
            query_condition: recovered[0].condition,
            database_condition,
            attempts,
            elapsed: start.elapsed(),
        });
    }
}
