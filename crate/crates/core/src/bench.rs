//! Recall and throughput sweeps over the encrypted search pipeline.
//!
//! Query loops run on the calling thread so QPS figures are comparable across
//! machines; only key generation, encryption and ground truth use the pool.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::common::{derive_seed, SeededRng};
use crate::dataset::{Dataset, SyntheticConfig};
use crate::dcpe::DEFAULT_SCALE;
use crate::error::{Error, Result};
use crate::eval::mean_recall;
use crate::hnsw::HnswParams;
use crate::pipeline::{self, Manifest, OwnerKeys};
use crate::search::{search, search_filter_only, tune_beta, EncryptedDatabase, QueryCiphertext, SearchResult};

/// Bumped whenever the CSV columns change.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 11] = [
    "schema_version",
    "mode",
    "ef_search",
    "k_prime",
    "ratio",
    "beta",
    "recall_at_k",
    "qps",
    "mean_dce_comparisons",
    "p50_ms",
    "p95_ms",
];

/// Everything a benchmark run needs. Missing dataset paths select the
/// synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub base: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Artifact directory. Loaded when it holds a manifest, written otherwise.
    pub artifacts: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub k: usize,
    pub ef_grid: Vec<usize>,
    pub ratio_grid: Vec<usize>,
    /// Fixed β. When absent β is tuned towards `target_filter_recall`.
    pub beta: Option<f64>,
    pub target_filter_recall: f64,
    pub s: f64,
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub reps: usize,
    /// Also sweep the filter phase alone.
    pub filter_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hnsw = HnswParams::default();
        Self {
            base: None,
            queries: None,
            ground_truth: None,
            artifacts: None,
            synthetic: SyntheticConfig::default(),
            k: 10,
            ef_grid: vec![16, 32, 64, 128, 256],
            ratio_grid: vec![1, 2, 4, 8, 16],
            beta: None,
            target_filter_recall: 0.5,
            s: DEFAULT_SCALE,
            m: hnsw.m,
            ef_construction: hnsw.ef_construction,
            seed: 0,
            threads: None,
            reps: 5,
            filter_only: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if self.ef_grid.is_empty() || self.ratio_grid.is_empty() {
            return Err(Error::InvalidParameter("ef and ratio grids must be non-empty".into()));
        }
        if self.ef_grid.contains(&0) || self.ratio_grid.contains(&0) {
            return Err(Error::InvalidParameter("grid entries must be positive".into()));
        }
        if self.reps == 0 {
            return Err(Error::InvalidParameter("reps must be at least 1".into()));
        }
        if self.base.is_some() != self.queries.is_some() {
            return Err(Error::InvalidParameter("base and queries paths go together".into()));
        }
        if let Some(beta) = self.beta {
            if !(beta.is_finite() && beta > 0.0) {
                return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
            }
        }
        self.hnsw().validate()
    }

    pub fn hnsw(&self) -> HnswParams {
        HnswParams {
            m: self.m,
            ef_construction: self.ef_construction,
        }
    }

    /// The configured dataset. Ground truth is whatever the files provide.
    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.base, &self.queries) {
            (Some(b), Some(q)) => Dataset::load(b, q, self.ground_truth.as_deref()),
            _ => self.synthetic.generate(self.seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Filter then refine.
    Full,
    /// Graph results only, `k′ = k`.
    Filter,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Filter => "filter",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: Mode,
    pub ef_search: usize,
    pub k_prime: usize,
    pub ratio: usize,
    pub beta: f64,
    pub recall_at_k: f64,
    pub qps: f64,
    pub mean_dce_comparisons: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub beta: f64,
    pub queries: usize,
    pub reps: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn rows(&self, mode: Mode) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            out.write_record([
                CSV_SCHEMA_VERSION.to_string(),
                r.mode.as_str().to_string(),
                r.ef_search.to_string(),
                r.k_prime.to_string(),
                r.ratio.to_string(),
                r.beta.to_string(),
                format!("{:.6}", r.recall_at_k),
                format!("{:.3}", r.qps),
                format!("{:.3}", r.mean_dce_comparisons),
                format!("{:.6}", r.p50_ms),
                format!("{:.6}", r.p95_ms),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "n={} d={} k={} beta={:.6} queries={} reps={}",
            self.n, self.d, self.k, self.beta, self.queries, self.reps
        );
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>9} {:>6} {:>9} {:>11} {:>10} {:>9} {:>9}",
            "mode", "ratio", "k_prime", "ef", "recall", "qps", "dce_cmp", "p50_ms", "p95_ms"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>9} {:>6} {:>9.4} {:>11.1} {:>10.1} {:>9.4} {:>9.4}",
                r.mode.as_str(),
                r.ratio,
                r.k_prime,
                r.ef_search,
                r.recall_at_k,
                r.qps,
                r.mean_dce_comparisons,
                r.p50_ms,
                r.p95_ms
            );
        }
        s
    }
}

/// Nearest-rank percentile of an ascending sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs `one` over all queries `reps` times on this thread.
fn timed(
    queries: &[QueryCiphertext],
    reps: usize,
    mut one: impl FnMut(&QueryCiphertext) -> Result<SearchResult>,
) -> Result<(Vec<SearchResult>, f64, Vec<f64>)> {
    let mut first = Vec::new();
    let mut wall = 0.0;
    let mut latencies = Vec::with_capacity(queries.len() * reps);
    for rep in 0..reps {
        let loop_start = Instant::now();
        for qc in queries {
            let t = Instant::now();
            let r = one(qc)?;
            latencies.push(t.elapsed().as_secs_f64() * 1e3);
            if rep == 0 {
                first.push(r);
            }
        }
        wall += loop_start.elapsed().as_secs_f64();
    }
    latencies.sort_by(f64::total_cmp);
    let qps = (queries.len() * reps) as f64 / wall.max(f64::MIN_POSITIVE);
    Ok((first, qps, latencies))
}

#[allow(clippy::too_many_arguments)]
fn row(
    mode: Mode,
    results: &[SearchResult],
    truth: &[Vec<u32>],
    k: usize,
    ratio: usize,
    ef_search: usize,
    beta: f64,
    qps: f64,
    latencies: &[f64],
) -> Result<BenchRow> {
    let ids: Vec<Vec<u32>> = results.iter().map(|r| r.ids.clone()).collect();
    let comparisons: u64 = results.iter().map(|r| r.stats.total_comparisons()).sum();
    Ok(BenchRow {
        mode,
        ef_search,
        k_prime: ratio * k,
        ratio,
        beta,
        recall_at_k: mean_recall(&ids, truth, k)?,
        qps,
        mean_dce_comparisons: comparisons as f64 / results.len() as f64,
        p50_ms: percentile(latencies, 0.5),
        p95_ms: percentile(latencies, 0.95),
    })
}

/// Sweeps `ratio_grid × ef_grid` over prepared query ciphertexts. An
/// `ef_search` below `k′` is raised to `k′`; duplicates are measured once.
#[allow(clippy::too_many_arguments)]
pub fn bench_grid(
    db: &EncryptedDatabase,
    queries: &[QueryCiphertext],
    truth: &[Vec<u32>],
    k: usize,
    beta: f64,
    ef_grid: &[usize],
    ratio_grid: &[usize],
    reps: usize,
    filter_only: bool,
) -> Result<Vec<BenchRow>> {
    if queries.is_empty() {
        return Err(Error::Empty("no benchmark queries"));
    }
    let mut rows = Vec::new();
    if filter_only {
        let mut efs: Vec<usize> = ef_grid.iter().map(|&ef| ef.max(k)).collect();
        efs.dedup();
        for ef in efs {
            let (results, qps, lat) = timed(queries, reps, |qc| search_filter_only(db, qc, ef))?;
            rows.push(row(Mode::Filter, &results, truth, k, 1, ef, beta, qps, &lat)?);
        }
    }
    for &ratio in ratio_grid {
        let k_prime = ratio * k;
        let mut efs: Vec<usize> = ef_grid.iter().map(|&ef| ef.max(k_prime)).collect();
        efs.dedup();
        for ef in efs {
            let (results, qps, lat) = timed(queries, reps, |qc| search(db, qc, k_prime, ef))?;
            rows.push(row(Mode::Full, &results, truth, k, ratio, ef, beta, qps, &lat)?);
        }
    }
    Ok(rows)
}

/// Encrypts every query under the owner keys, one RNG stream per query.
pub fn encrypt_queries(queries: &[Vec<f64>], k: usize, keys: &OwnerKeys, seed: u64) -> Result<Vec<QueryCiphertext>> {
    use rayon::prelude::*;
    let qseed = derive_seed(seed, "query-encrypt");
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| QueryCiphertext::encrypt(q, k, &keys.dce, &keys.sap, &mut SeededRng::for_stream(qseed, i as u64)))
        .collect()
}

/// Owner keys for `ds`, with β fixed by the config or tuned on the queries.
pub fn owner_keys(config: &RunConfig, ds: &Dataset) -> Result<OwnerKeys> {
    let mut keys = pipeline::generate_keys(&ds.base, config.s, config.beta.unwrap_or(1.0), config.seed)?;
    if config.beta.is_none() {
        let truth = ds.truth(config.k)?;
        let tuned = tune_beta(
            &ds.base,
            &ds.queries,
            &truth,
            config.k,
            config.target_filter_recall,
            &keys.sap,
            config.seed,
        )?;
        log::info!("tuned beta {:.6} (filter recall bound {:.4})", tuned.beta, tuned.recall);
        keys.sap = keys.sap.with_beta(tuned.beta)?;
    }
    Ok(keys)
}

/// Loads artifacts from `config.artifacts` when a manifest is present,
/// otherwise runs the owner steps in memory and persists them if a directory
/// was given.
pub fn prepare(config: &RunConfig, ds: &Dataset) -> Result<(OwnerKeys, EncryptedDatabase)> {
    if let Some(dir) = &config.artifacts {
        if dir.join(pipeline::MANIFEST_FILE).exists() {
            let manifest = Manifest::load(dir)?;
            if manifest.n != ds.base.len() || manifest.d != ds.dim() {
                return Err(Error::Integrity(format!(
                    "artifacts hold n={} d={}, dataset has n={} d={}",
                    manifest.n,
                    manifest.d,
                    ds.base.len(),
                    ds.dim()
                )));
            }
            let keys = pipeline::load_keys(dir, &manifest)?;
            return Ok((keys, pipeline::load_server_database(dir)?));
        }
    }
    let keys = owner_keys(config, ds)?;
    let (sap, dce) = pipeline::encrypt_stores(&ds.base, &keys, config.seed)?;
    let graph = pipeline::build_index(&sap, config.hnsw(), config.seed)?;
    if let Some(dir) = &config.artifacts {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Manifest::new(ds.base.len(), ds.dim());
        pipeline::save_keys(&keys, dir, &mut manifest)?;
        pipeline::save_stores(&sap, &dce, dir, &mut manifest)?;
        pipeline::save_index(&graph, dir, &mut manifest)?;
        manifest.save(dir)?;
    }
    let padded = ds.dim() % 2 == 1;
    Ok((keys, EncryptedDatabase::from_parts(sap, dce, graph, padded)?))
}

/// Builds or loads everything, then sweeps the grid. Setup time is excluded
/// from every timing figure.
pub fn run_bench(config: &RunConfig) -> Result<BenchReport> {
    config.validate()?;
    let ds = config.dataset()?;
    let truth = ds.truth(config.k)?;
    let (keys, db) = prepare(config, &ds)?;
    let queries = encrypt_queries(&ds.queries, config.k, &keys, config.seed)?;
    let beta = keys.sap.beta();
    let rows = bench_grid(
        &db,
        &queries,
        &truth,
        config.k,
        beta,
        &config.ef_grid,
        &config.ratio_grid,
        config.reps,
        config.filter_only,
    )?;
    Ok(BenchReport {
        n: ds.base.len(),
        d: ds.dim(),
        k: config.k,
        beta,
        queries: queries.len(),
        reps: config.reps,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            synthetic: SyntheticConfig {
                n: 2000,
                queries: 40,
                d: 32,
                ..Default::default()
            },
            ef_grid: vec![10, 20, 40, 80],
            ratio_grid: vec![1, 2, 4],
            m: 8,
            ef_construction: 64,
            reps: 1,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn ratio_one_matches_filter_only() {
        let report = run_bench(&small()).unwrap();
        for f in report.rows(Mode::Filter) {
            let full = report
                .rows(Mode::Full)
                .find(|r| r.ratio == 1 && r.ef_search == f.ef_search)
                .unwrap();
            assert_eq!(full.recall_at_k, f.recall_at_k);
        }
    }

    #[test]
    fn recall_grows_with_ratio_and_rows_are_sane() {
        let report = run_bench(&small()).unwrap();
        let at_80: Vec<f64> = report
            .rows(Mode::Full)
            .filter(|r| r.ef_search == 80)
            .map(|r| r.recall_at_k)
            .collect();
        assert!(at_80.windows(2).all(|w| w[1] >= w[0]), "{at_80:?}");
        for r in &report.rows {
            assert!((0.0..=1.0).contains(&r.recall_at_k) && r.qps > 0.0);
            assert!(r.p50_ms <= r.p95_ms);
        }
    }

    // Against plaintext truth a wider beam can lose recall at Ratio_k = 1,
    // since it converges on the ciphertext-space neighbours. Against
    // ciphertext-space truth it must not.
    #[test]
    fn filter_recall_in_ciphertext_space_grows_with_ef() {
        let config = small();
        let ds = config.dataset().unwrap();
        let (keys, db) = prepare(
            &RunConfig {
                beta: Some(0.5),
                ..config.clone()
            },
            &ds,
        )
        .unwrap();
        let queries = encrypt_queries(&ds.queries, config.k, &keys, config.seed).unwrap();
        let sap = db.sap_store();
        let truth: Vec<Vec<u32>> = queries
            .iter()
            .map(|qc| crate::eval::top_k_by(sap.len(), config.k, |id| sap.sq_dist_to(qc.sap_q.as_slice(), id)))
            .collect();
        let rows = bench_grid(
            &db,
            &queries,
            &truth,
            config.k,
            0.5,
            &[10, 20, 40, 80, 160],
            &[1],
            1,
            true,
        )
        .unwrap();
        let recalls: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == Mode::Filter)
            .map(|r| r.recall_at_k)
            .collect();
        assert!(recalls.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{recalls:?}");
        assert!(*recalls.last().unwrap() > 0.99, "{recalls:?}");
    }

    #[test]
    fn csv_has_versioned_header_and_one_line_per_row() {
        let report = run_bench(&RunConfig {
            ratio_grid: vec![1, 2],
            ..small()
        })
        .unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(&buf[..]);
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_COLUMNS);
        let records: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), report.rows.len());
        assert!(records.iter().all(|r| &r[0] == "1"));
        assert!(report.table().lines().count() == report.rows.len() + 2);
    }

    #[test]
    fn artifacts_are_reused() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            artifacts: Some(dir.path().to_path_buf()),
            beta: Some(0.3),
            ..small()
        };
        let first = run_bench(&config).unwrap();
        assert!(dir.path().join(pipeline::MANIFEST_FILE).exists());
        let second = run_bench(&config).unwrap();
        let recalls = |r: &BenchReport| r.rows.iter().map(|x| x.recall_at_k).collect::<Vec<_>>();
        assert_eq!(recalls(&first), recalls(&second));
    }

    #[test]
    fn invalid_configs() {
        assert!(RunConfig {
            k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            ef_grid: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            ratio_grid: vec![0],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            reps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            base: Some("b.fvecs".into()),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }
}
