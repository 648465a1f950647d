//! Filter-and-refine search over the encrypted database.
//!
//! The server sees only ciphertexts: HNSW over scale-and-perturb
//! ciphertexts proposes `k′` candidates, then a size-`k` max-heap ordered by
//! DCE comparisons keeps the exact top-`k` of those candidates.

use std::cell::Cell;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::common::codec::{Decoder, Encoder};
use crate::common::{derive_seed, SeededRng, Vec64};
use crate::dce::{self, transformed_width, DceSecretKey, DceStore, DceTrapdoor};
use crate::dcpe::{sap_encrypt, SapCiphertext, SapKey, SapStore};
use crate::error::{check_dim, Error, Result};
use crate::eval::{mean_recall, top_k_by};
use crate::hnsw::{HnswGraph, HnswParams, SearchParams};

pub const QUERY_MAGIC: &[u8; 4] = b"PPQ1";
pub const RESPONSE_MAGIC: &[u8; 4] = b"PPR1";

/// Appends a zero coordinate when `v` has odd length. Distances are unchanged.
pub fn pad_to_even(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    if out.len() % 2 == 1 {
        out.push(0.0);
    }
    out
}

/// Dimension after [`pad_to_even`].
pub fn padded_dim(d: usize) -> usize {
    d + d % 2
}

/// Everything the server holds: both ciphertext stores and the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EncryptedDatabase {
    sap: SapStore,
    dce: DceStore,
    graph: HnswGraph,
    padded: bool,
}

impl EncryptedDatabase {
    pub fn from_parts(sap: SapStore, dce: DceStore, graph: HnswGraph, padded: bool) -> Result<Self> {
        check_dim(sap.dim(), dce.dim())?;
        check_dim(sap.len(), dce.len())?;
        if let Some(bad) = graph.ids().find(|&id| id as usize >= sap.len()) {
            return Err(Error::MissingId(bad));
        }
        Ok(Self {
            sap,
            dce,
            graph,
            padded,
        })
    }

    /// Owner-side construction from plaintexts. Odd dimensions are padded;
    /// keys must be generated for [`padded_dim`].
    pub fn build(
        base: &[Vec<f64>],
        dce_key: &DceSecretKey,
        sap_key: &SapKey,
        params: HnswParams,
        seed: u64,
    ) -> Result<Self> {
        let first = base.first().ok_or(Error::Empty("cannot encrypt an empty dataset"))?;
        let padded = first.len() % 2 == 1;
        let rows: Vec<Vec<f64>> = if padded {
            base.iter().map(|v| pad_to_even(v)).collect()
        } else {
            base.to_vec()
        };
        let sap = SapStore::encrypt_all(&rows, sap_key, derive_seed(seed, "sap-store"))?;
        let dce = DceStore::encrypt_all(&rows, dce_key, derive_seed(seed, "dce-store"))?;
        check_dim(dce_key.dim(), sap.dim())?;
        let graph = HnswGraph::build(&sap, sap.len(), params, derive_seed(seed, "hnsw"))?;
        Self::from_parts(sap, dce, graph, padded)
    }

    pub fn dim(&self) -> usize {
        self.sap.dim()
    }

    /// Number of searchable vectors.
    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    pub fn padded(&self) -> bool {
        self.padded
    }

    pub fn sap_store(&self) -> &SapStore {
        &self.sap
    }

    pub fn dce_store(&self) -> &DceStore {
        &self.dce
    }

    pub fn graph(&self) -> &HnswGraph {
        &self.graph
    }

    pub fn into_parts(self) -> (SapStore, DceStore, HnswGraph, bool) {
        (self.sap, self.dce, self.graph, self.padded)
    }

    /// Appends an already encrypted vector and indexes it. Returns its id.
    pub fn insert(&mut self, sap: &SapCiphertext, dce: &dce::DceCiphertext, rng: &mut SeededRng) -> Result<u32> {
        check_dim(self.dim(), sap.dim())?;
        check_dim(transformed_width(self.dim()), dce.width())?;
        let id = self.sap.push(sap.as_slice())?;
        self.dce.push(dce)?;
        self.graph.insert(id, &self.sap, rng)?;
        Ok(id)
    }

    /// Unindexes `id`. Its ciphertext records stay in the stores but are unreachable.
    pub fn delete(&mut self, id: u32) -> Result<()> {
        self.graph.delete(id, &self.sap)
    }
}

/// A user's encrypted query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryCiphertext {
    pub trapdoor: DceTrapdoor,
    pub sap_q: SapCiphertext,
    pub k: usize,
}

impl QueryCiphertext {
    /// Encrypts `q` under both schemes, padding odd dimensions.
    pub fn encrypt(q: &[f64], k: usize, dce_key: &DceSecretKey, sap_key: &SapKey, rng: &mut SeededRng) -> Result<Self> {
        let q = pad_to_even(q);
        let trapdoor = dce::trapgen(&q, dce_key, rng)?;
        let sap_q = sap_encrypt(&q, sap_key, rng)?;
        Ok(Self { trapdoor, sap_q, k })
    }

    pub fn dim(&self) -> usize {
        self.sap_q.dim()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Distinct candidates returned by the filter phase.
    pub filter_candidates: usize,
    /// DCE comparisons spent selecting the top `k`.
    pub refine_comparisons: u64,
    /// DCE comparisons spent ordering the selected ids best-first.
    pub order_comparisons: u64,
    pub elapsed: Duration,
}

impl SearchStats {
    pub fn total_comparisons(&self) -> u64 {
        self.refine_comparisons + self.order_comparisons
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub ids: Vec<u32>,
    pub stats: SearchStats,
}

/// Worst-case refine comparisons for a size-`k` heap fed `k_prime` candidates.
///
/// Each candidate costs one comparison against the heap top plus a sift of at most
/// two comparisons per level.
pub fn comparison_bound(k_prime: usize, k: usize) -> u64 {
    let log = if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    };
    (k_prime as u64) * (1 + 2 * log as u64)
}

struct Refiner<'a> {
    dce: &'a DceStore,
    trapdoor: &'a DceTrapdoor,
    comparisons: Cell<u64>,
}

impl Refiner<'_> {
    fn z(&self, o: u32, p: u32) -> f64 {
        self.comparisons.set(self.comparisons.get() + 1);
        self.dce.compare(o, p, self.trapdoor)
    }
}

/// Heap entry ordered by encrypted distance to the query, ties by id.
struct Ranked<'r, 'a> {
    id: u32,
    refiner: &'r Refiner<'a>,
}

impl PartialEq for Ranked<'_, '_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_, '_> {}

impl PartialOrd for Ranked<'_, '_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked<'_, '_> {
    fn cmp(&self, other: &Self) -> Ordering {
        if self.id == other.id {
            return Ordering::Equal;
        }
        // Z(o, p) < 0 exactly when o is closer to the query than p.
        let z = self.refiner.z(self.id, other.id);
        if z < 0.0 {
            Ordering::Less
        } else if z > 0.0 {
            Ordering::Greater
        } else {
            self.id.cmp(&other.id)
        }
    }
}

fn validate(db: &EncryptedDatabase, qc: &QueryCiphertext, k_prime: usize, ef_search: usize) -> Result<SearchParams> {
    if qc.k < 1 || k_prime < qc.k {
        return Err(Error::InvalidParameter(format!(
            "need k_prime >= k >= 1, got k={} k_prime={k_prime}",
            qc.k
        )));
    }
    check_dim(db.dim(), qc.sap_q.dim())?;
    check_dim(transformed_width(db.dim()), qc.trapdoor.width())?;
    SearchParams::new(k_prime, ef_search)
}

/// Candidate generation: `k′` ids from the graph, ranked by ciphertext distance.
pub fn filter(db: &EncryptedDatabase, sap_q: &SapCiphertext, params: SearchParams) -> Vec<u32> {
    let q = sap_q.as_slice();
    let mut ids = db.graph.knn_search(|id| db.sap.sq_dist_to(q, id), params);
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    ids.retain(|id| seen.insert(*id));
    ids
}

/// Exact top-`k` of `candidates` by DCE comparisons, best first.
pub fn refine(dce: &DceStore, trapdoor: &DceTrapdoor, candidates: &[u32], k: usize) -> (Vec<u32>, u64, u64) {
    let refiner = Refiner {
        dce,
        trapdoor,
        comparisons: Cell::new(0),
    };
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k);
    for &id in candidates {
        if heap.len() < k {
            heap.push(Ranked { id, refiner: &refiner });
            continue;
        }
        let top = heap.peek().expect("k >= 1").id;
        // Replace the farthest kept id only when the candidate is strictly closer.
        if refiner.z(top, id) > 0.0 {
            *heap.peek_mut().expect("k >= 1") = Ranked { id, refiner: &refiner };
        }
    }
    let selection = refiner.comparisons.get();
    let ids = heap.into_sorted_vec().into_iter().map(|r| r.id).collect();
    (ids, selection, refiner.comparisons.get() - selection)
}

/// Filter over SAP ciphertexts, then refine with DCE comparisons.
pub fn search(db: &EncryptedDatabase, qc: &QueryCiphertext, k_prime: usize, ef_search: usize) -> Result<SearchResult> {
    let params = validate(db, qc, k_prime, ef_search)?;
    let start = Instant::now();
    let candidates = filter(db, &qc.sap_q, params);
    let (ids, refine_comparisons, order_comparisons) = refine(&db.dce, &qc.trapdoor, &candidates, qc.k);
    Ok(SearchResult {
        ids,
        stats: SearchStats {
            filter_candidates: candidates.len(),
            refine_comparisons,
            order_comparisons,
            elapsed: start.elapsed(),
        },
    })
}

/// The filter phase alone with `k′ = k`: the first `k` graph results.
pub fn search_filter_only(db: &EncryptedDatabase, qc: &QueryCiphertext, ef_search: usize) -> Result<SearchResult> {
    let params = validate(db, qc, qc.k, ef_search.max(qc.k))?;
    let start = Instant::now();
    let ids = filter(db, &qc.sap_q, params);
    Ok(SearchResult {
        stats: SearchStats {
            filter_candidates: ids.len(),
            elapsed: start.elapsed(),
            ..Default::default()
        },
        ids,
    })
}

/// One measured point of a tuning sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub ratio: usize,
    pub k_prime: usize,
    pub ef_search: usize,
    pub recall: f64,
    pub qps: f64,
    pub mean_comparisons: f64,
}

/// Runs every query in parallel.
pub fn run_queries(
    db: &EncryptedDatabase,
    queries: &[QueryCiphertext],
    k_prime: usize,
    ef_search: usize,
) -> Result<Vec<SearchResult>> {
    queries
        .par_iter()
        .map(|qc| search(db, qc, k_prime, ef_search))
        .collect()
}

fn measure(
    db: &EncryptedDatabase,
    queries: &[QueryCiphertext],
    truth: &[Vec<u32>],
    k: usize,
    ratio: usize,
    ef_search: usize,
) -> Result<CurvePoint> {
    let k_prime = ratio * k;
    let ef_search = ef_search.max(k_prime);
    let results = run_queries(db, queries, k_prime, ef_search)?;
    let ids: Vec<Vec<u32>> = results.iter().map(|r| r.ids.clone()).collect();
    let busy: Duration = results.iter().map(|r| r.stats.elapsed).sum();
    let comparisons: u64 = results.iter().map(|r| r.stats.total_comparisons()).sum();
    Ok(CurvePoint {
        ratio,
        k_prime,
        ef_search,
        recall: mean_recall(&ids, truth, k)?,
        qps: queries.len() as f64 / busy.as_secs_f64().max(f64::MIN_POSITIVE),
        mean_comparisons: comparisons as f64 / queries.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KPrimeTuning {
    /// Smallest ratio reaching the target, if any.
    pub ratio: Option<usize>,
    /// Ratio with the highest recall when the target was missed.
    pub best_ratio: usize,
    pub best_recall: f64,
    pub curve: Vec<CurvePoint>,
}

impl KPrimeTuning {
    pub fn reached(&self) -> bool {
        self.ratio.is_some()
    }
}

/// Grid search over `Ratio_k = k′ / k` and `ef_search`. An `ef_search`
/// smaller than `k′` is raised to `k′`.
pub fn tune_k_prime(
    db: &EncryptedDatabase,
    queries: &[QueryCiphertext],
    truth: &[Vec<u32>],
    k: usize,
    target_recall: f64,
    ratios: &[usize],
    ef_grid: &[usize],
) -> Result<KPrimeTuning> {
    if queries.is_empty() {
        return Err(Error::Empty("no tuning queries"));
    }
    if ratios.is_empty() || ef_grid.is_empty() || ratios.contains(&0) {
        return Err(Error::InvalidParameter(
            "ratio and ef grids must be non-empty and positive".into(),
        ));
    }
    let mut ratios = ratios.to_vec();
    ratios.sort_unstable();
    let mut curve = Vec::new();
    let mut chosen = None;
    for &ratio in &ratios {
        for &ef in ef_grid {
            let point = measure(db, queries, truth, k, ratio, ef)?;
            curve.push(point);
            if chosen.is_none() && point.recall >= target_recall {
                chosen = Some(ratio);
            }
        }
        if chosen.is_some() {
            break;
        }
    }
    let best = curve
        .iter()
        .max_by(|a, b| a.recall.total_cmp(&b.recall).then(b.ratio.cmp(&a.ratio)))
        .expect("non-empty grid");
    if chosen.is_none() {
        log::warn!(
            "target recall {target_recall} not reached; best {:.4} at ratio {}",
            best.recall,
            best.ratio
        );
    }
    Ok(KPrimeTuning {
        ratio: chosen,
        best_ratio: best.ratio,
        best_recall: best.recall,
        curve,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaTuning {
    pub beta: f64,
    pub recall: f64,
    /// Whether `recall` lies within the tolerance band around the target.
    pub reached: bool,
    /// Every `(beta, recall)` evaluated, in order.
    pub evaluations: Vec<(f64, f64)>,
}

/// Filter-only recall@k when the beam is exhaustive: the exact top-`k` over
/// SAP ciphertexts, under a fixed noise draw scaled by `beta`.
pub fn filter_recall_upper_bound(
    base: &[Vec<f64>],
    queries: &[Vec<f64>],
    truth: &[Vec<u32>],
    k: usize,
    key: &SapKey,
    seed: u64,
) -> Result<f64> {
    let rows: Vec<Vec<f64>> = base.iter().map(|v| pad_to_even(v)).collect();
    let store = SapStore::encrypt_all(&rows, key, derive_seed(seed, "sap-store"))?;
    let qseed = derive_seed(seed, "sap-queries");
    let results: Vec<Vec<u32>> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let cq = sap_encrypt(&pad_to_even(q), key, &mut SeededRng::for_stream(qseed, i as u64))?;
            Ok(top_k_by(store.len(), k, |id| store.sq_dist_to(cq.as_slice(), id)))
        })
        .collect::<Result<_>>()?;
    mean_recall(&results, truth, k)
}

/// Tolerance band around the target filter recall.
pub const BETA_TOLERANCE: f64 = 0.05;
/// Bisection stops early once this close to the target.
const BETA_STOP: f64 = 0.01;

/// Geometric bisection on β for a target filter-only recall. Data-owner side.
/// Returns the evaluated β closest to the target.
pub fn tune_beta(
    base: &[Vec<f64>],
    queries: &[Vec<f64>],
    truth: &[Vec<u32>],
    k: usize,
    target: f64,
    key: &SapKey,
    seed: u64,
) -> Result<BetaTuning> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidParameter(format!(
            "target recall {target} outside [0, 1]"
        )));
    }
    let mut evaluations: Vec<(f64, f64)> = Vec::new();
    let mut eval = |beta: f64| -> Result<f64> {
        let r = filter_recall_upper_bound(base, queries, truth, k, &key.with_beta(beta)?, seed)?;
        log::debug!("beta {beta:.6} -> filter recall {r:.4}");
        evaluations.push((beta, r));
        Ok(r)
    };
    let close = |r: f64| (r - target).abs() <= BETA_STOP;

    let (_, upper) = key.recommended_beta_range();
    let mut hi = upper.max(f64::MIN_POSITIVE);
    let mut r_hi = eval(hi)?;
    for _ in 0..30 {
        if r_hi <= target {
            break;
        }
        hi *= 2.0;
        r_hi = eval(hi)?;
    }
    let mut lo = hi * 1e-6;
    let r_lo = eval(lo)?;
    if r_hi <= target && r_lo >= target && !close(r_hi) && !close(r_lo) {
        for _ in 0..40 {
            let mid = (lo * hi).sqrt();
            let r = eval(mid)?;
            if close(r) {
                break;
            }
            if r > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let (beta, recall) = *evaluations
        .iter()
        .min_by(|a, b| {
            (a.1 - target)
                .abs()
                .total_cmp(&(b.1 - target).abs())
                .then(a.0.total_cmp(&b.0))
        })
        .expect("at least two evaluations");
    let reached = (recall - target).abs() <= BETA_TOLERANCE;
    if !reached {
        log::warn!("filter recall target {target} unreachable; closest {recall:.4} at beta {beta}");
    }
    Ok(BetaTuning {
        beta,
        recall,
        reached,
        evaluations,
    })
}

/// Wire form of a query: the ciphertext plus the server-side search knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRequest {
    pub query: QueryCiphertext,
    pub k_prime: usize,
    pub ef_search: usize,
}

impl QueryRequest {
    /// Layout: magic, d, k, k_prime, ef_search (u32 each), trapdoor
    /// (`2d + 16` f64), SAP query (`d` f64).
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let d = self.query.dim();
        check_dim(transformed_width(d), self.query.trapdoor.width())?;
        let mut enc = Encoder::new(w);
        enc.bytes(QUERY_MAGIC)?;
        enc.len32(d)?;
        enc.len32(self.query.k)?;
        enc.len32(self.k_prime)?;
        enc.len32(self.ef_search)?;
        enc.f64s(self.query.trapdoor.as_slice())?;
        enc.f64s(self.query.sap_q.as_slice())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut dec = Decoder::new(r, "query request");
        dec.magic(QUERY_MAGIC)?;
        let d = dec.u32()? as usize;
        let k = dec.u32()? as usize;
        let k_prime = dec.u32()? as usize;
        let ef_search = dec.u32()? as usize;
        let t = Vec64::new(dec.f64s(transformed_width(d))?)?;
        let sap = Vec64::new(dec.f64s(d)?)?;
        dec.finish()?;
        Ok(Self {
            query: QueryCiphertext {
                trapdoor: DceTrapdoor::new(t),
                sap_q: SapCiphertext(sap.into_inner()),
                k,
            },
            k_prime,
            ef_search,
        })
    }
}

/// Layout: magic, count (u32), ids (u32 each).
pub fn write_response<W: Write>(ids: &[u32], w: W) -> Result<()> {
    let mut enc = Encoder::new(w);
    enc.bytes(RESPONSE_MAGIC)?;
    enc.len32(ids.len())?;
    for &id in ids {
        enc.u32(id)?;
    }
    Ok(())
}

pub fn read_response<R: Read>(r: R) -> Result<Vec<u32>> {
    let mut dec = Decoder::new(r, "query response");
    dec.magic(RESPONSE_MAGIC)?;
    let n = dec.u32()? as usize;
    let ids = (0..n).map(|_| dec.u32()).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(ids)
}
