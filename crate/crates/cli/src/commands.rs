use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use ppanns_core::attacks::{run_attack, AttackConfig};
use ppanns_core::bench::{encrypt_queries, owner_keys, prepare, run_bench, RunConfig};
use ppanns_core::dataset::Dataset;
use ppanns_core::pipeline::{self, Manifest};
use ppanns_core::search::{search, tune_beta, tune_k_prime, write_response, QueryRequest};

use crate::args::{AttackArgs, BenchArgs, Cli, Command, DataArgs, KeygenArgs, SearchArgs, TrapgenArgs};

const REQUEST_EXT: &str = "ppq";
const RESPONSE_EXT: &str = "ppr";

pub fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    init_threads(config.threads)?;
    match cli.command {
        Command::Keygen(args) => keygen(config, args),
        Command::EncryptDb(args) => encrypt_db(with_data(config, &args.data), &args.dir),
        Command::BuildIndex(args) => {
            if let Some(m) = args.m {
                config.m = m;
            }
            if let Some(ef) = args.ef_construction {
                config.ef_construction = ef;
            }
            build_index(config, &args.dir)
        }
        Command::Trapgen(args) => trapgen(config, args),
        Command::Search(args) => serve(args),
        Command::Bench(args) => bench(config, args),
        Command::TuneBeta(args) => {
            let mut config = with_data(config, &args.data);
            if let Some(t) = args.target_recall {
                config.target_filter_recall = t;
            }
            tune_beta_cmd(config)
        }
        Command::TuneKprime(args) => {
            let mut config = with_data(config, &args.data);
            config.beta = args.beta.or(config.beta);
            if let Some(g) = args.ef_grid {
                config.ef_grid = g;
            }
            if let Some(g) = args.ratio_grid {
                config.ratio_grid = g;
            }
            tune_k_prime_cmd(config, args.target_recall)
        }
        Command::AttackDemo(args) => attack_demo(config.seed, args),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// PPANN_THREADS wins over `--threads`, which wins over the config file.
fn init_threads(configured: Option<usize>) -> Result<()> {
    let from_env = match std::env::var("PPANN_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("PPANN_THREADS={v:?} is not a count"))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = from_env.or(configured) {
        ensure!(n >= 1, "thread count must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        log::debug!("using {n} worker threads");
    }
    Ok(())
}

fn with_data(mut config: RunConfig, data: &DataArgs) -> RunConfig {
    if data.base.is_some() {
        config.base = data.base.clone();
    }
    if data.queries.is_some() {
        config.queries = data.queries.clone();
    }
    if data.ground_truth.is_some() {
        config.ground_truth = data.ground_truth.clone();
    }
    if let Some(n) = data.n {
        config.synthetic.n = n;
    }
    if let Some(d) = data.dim {
        config.synthetic.d = d;
    }
    if let Some(q) = data.num_queries {
        config.synthetic.queries = q;
    }
    if let Some(k) = data.k {
        config.k = k;
    }
    config
}

fn dataset(config: &RunConfig) -> Result<Dataset> {
    config.validate()?;
    let start = Instant::now();
    let ds = config.dataset()?;
    log::info!(
        "dataset: n={} queries={} d={} ({:.1}s)",
        ds.base.len(),
        ds.queries.len(),
        ds.dim(),
        start.elapsed().as_secs_f64()
    );
    Ok(ds)
}

fn keygen(config: RunConfig, args: KeygenArgs) -> Result<()> {
    let mut config = with_data(config, &args.target.data);
    if let Some(s) = args.s {
        config.s = s;
    }
    config.beta = args.beta.or(config.beta);
    if let Some(t) = args.target_recall {
        config.target_filter_recall = t;
    }
    let ds = dataset(&config)?;
    let keys = owner_keys(&config, &ds)?;
    let dir = &args.target.dir;
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::new(ds.base.len(), ds.dim());
    pipeline::save_keys(&keys, dir, &mut manifest)?;
    manifest.save(dir)?;
    println!(
        "keys written to {} (d={}, beta={})",
        dir.display(),
        ds.dim(),
        keys.sap.beta()
    );
    Ok(())
}

fn encrypt_db(config: RunConfig, dir: &Path) -> Result<()> {
    let ds = dataset(&config)?;
    let mut manifest = Manifest::load(dir)?;
    ensure!(
        manifest.n == ds.base.len() && manifest.d == ds.dim(),
        "keys were generated for n={} d={}, dataset has n={} d={}",
        manifest.n,
        manifest.d,
        ds.base.len(),
        ds.dim()
    );
    let keys = pipeline::load_keys(dir, &manifest)?;
    let start = Instant::now();
    let (sap, dce) = pipeline::encrypt_stores(&ds.base, &keys, config.seed)?;
    pipeline::save_stores(&sap, &dce, dir, &mut manifest)?;
    manifest.save(dir)?;
    println!(
        "encrypted {} vectors in {:.1}s",
        sap.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn build_index(config: RunConfig, dir: &Path) -> Result<()> {
    let mut manifest = Manifest::load(dir)?;
    let sap = pipeline::load_sap_store(dir, &manifest)?;
    let start = Instant::now();
    let graph = pipeline::build_index(&sap, config.hnsw(), config.seed)?;
    pipeline::save_index(&graph, dir, &mut manifest)?;
    manifest.save(dir)?;
    println!(
        "indexed {} vectors (m={}, ef_construction={}, max level {}) in {:.1}s",
        graph.len(),
        config.m,
        config.ef_construction,
        graph.max_level(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn request_path(out: &Path, i: usize) -> PathBuf {
    out.join(format!("query-{i:06}.{REQUEST_EXT}"))
}

fn trapgen(config: RunConfig, args: TrapgenArgs) -> Result<()> {
    let config = with_data(config, &args.source.data);
    let dir = &args.source.dir;
    let manifest = Manifest::load(dir)?;
    let keys = pipeline::load_keys(dir, &manifest)?;
    let queries = match &config.queries {
        Some(path) => ppanns_core::dataset::read_fvecs_path(path)?,
        None => config.synthetic.generate(config.seed)?.queries,
    };
    if let Some(q) = queries.first() {
        ensure!(
            q.len() == manifest.d,
            "queries have d={}, keys expect d={}",
            q.len(),
            manifest.d
        );
    }
    let k = config.k;
    let k_prime = args.k_prime.unwrap_or(4 * k);
    let ef_search = args.ef_search.unwrap_or(k_prime.max(64));
    let encrypted = encrypt_queries(&queries, k, &keys, config.seed)?;
    fs::create_dir_all(&args.out)?;
    for (i, query) in encrypted.into_iter().enumerate() {
        let mut w = BufWriter::new(fs::File::create(request_path(&args.out, i))?);
        QueryRequest {
            query,
            k_prime,
            ef_search,
        }
        .write_to(&mut w)?;
        w.flush()?;
    }
    println!(
        "wrote {} requests (k={k}, k'={k_prime}, ef={ef_search}) to {}",
        queries.len(),
        args.out.display()
    );
    Ok(())
}

fn serve(args: SearchArgs) -> Result<()> {
    let db = pipeline::load_server_database(&args.dir)?;
    let mut requests: Vec<PathBuf> = fs::read_dir(&args.requests)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    requests.retain(|p| p.extension().is_some_and(|e| e == REQUEST_EXT));
    requests.sort();
    if requests.is_empty() {
        bail!("no .{REQUEST_EXT} files in {}", args.requests.display());
    }
    fs::create_dir_all(&args.out)?;
    let (mut latency, mut comparisons) = (0.0, 0u64);
    for path in &requests {
        let req = QueryRequest::read_from(BufReader::new(fs::File::open(path)?))
            .with_context(|| format!("reading {}", path.display()))?;
        let result = search(&db, &req.query, req.k_prime, req.ef_search)?;
        latency += result.stats.elapsed.as_secs_f64();
        comparisons += result.stats.total_comparisons();
        let out = args
            .out
            .join(path.with_extension(RESPONSE_EXT).file_name().expect("file name"));
        let mut w = BufWriter::new(fs::File::create(&out)?);
        write_response(&result.ids, &mut w)?;
        w.flush()?;
        log::debug!("{}: {:?}", path.display(), result.ids);
    }
    let n = requests.len() as f64;
    println!(
        "answered {} requests: mean latency {:.3} ms, mean DCE comparisons {:.1}",
        requests.len(),
        latency / n * 1e3,
        comparisons as f64 / n
    );
    Ok(())
}

fn bench(config: RunConfig, args: BenchArgs) -> Result<()> {
    let mut config = with_data(config, &args.data);
    if args.artifacts.is_some() {
        config.artifacts = args.artifacts;
    }
    if let Some(g) = args.ef_grid {
        config.ef_grid = g;
    }
    if let Some(g) = args.ratio_grid {
        config.ratio_grid = g;
    }
    config.beta = args.beta.or(config.beta);
    if let Some(r) = args.reps {
        config.reps = r;
    }
    let report = run_bench(&config)?;
    print!("{}", report.table());
    match args.csv {
        Some(path) => {
            let mut w = BufWriter::new(fs::File::create(&path)?);
            report.write_csv(&mut w)?;
            w.flush()?;
            println!("csv written to {}", path.display());
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn tune_beta_cmd(config: RunConfig) -> Result<()> {
    let ds = dataset(&config)?;
    let truth = ds.truth(config.k)?;
    let keys = pipeline::generate_keys(&ds.base, config.s, 1.0, config.seed)?;
    let tuning = tune_beta(
        &ds.base,
        &ds.queries,
        &truth,
        config.k,
        config.target_filter_recall,
        &keys.sap,
        config.seed,
    )?;
    println!("{:>14} {:>10}", "beta", "recall");
    for (beta, recall) in &tuning.evaluations {
        println!("{beta:>14.6} {recall:>10.4}");
    }
    println!(
        "beta = {} (filter recall@{} {:.4}, target {} {})",
        tuning.beta,
        config.k,
        tuning.recall,
        config.target_filter_recall,
        if tuning.reached { "reached" } else { "not reached" }
    );
    Ok(())
}

fn tune_k_prime_cmd(config: RunConfig, target: f64) -> Result<()> {
    let ds = dataset(&config)?;
    let truth = ds.truth(config.k)?;
    let (keys, db) = prepare(&config, &ds)?;
    let queries = encrypt_queries(&ds.queries, config.k, &keys, config.seed)?;
    let tuning = tune_k_prime(
        &db,
        &queries,
        &truth,
        config.k,
        target,
        &config.ratio_grid,
        &config.ef_grid,
    )?;
    println!(
        "{:>6} {:>8} {:>6} {:>8} {:>10} {:>10}",
        "ratio", "k_prime", "ef", "recall", "qps", "dce_cmp"
    );
    for p in &tuning.curve {
        println!(
            "{:>6} {:>8} {:>6} {:>8.4} {:>10.1} {:>10.1}",
            p.ratio, p.k_prime, p.ef_search, p.recall, p.qps, p.mean_comparisons
        );
    }
    match tuning.ratio {
        Some(r) => println!("Ratio_k = {r} reaches recall@{} >= {target}", config.k),
        None => println!(
            "target {target} not reached; best recall {:.4} at Ratio_k = {}",
            tuning.best_recall, tuning.best_ratio
        ),
    }
    Ok(())
}

fn attack_demo(seed: u64, args: AttackArgs) -> Result<()> {
    let config = AttackConfig {
        variant: args.variant,
        d: args.dim,
        targets: args.targets,
        leak_noise: args.noise,
    };
    let out = run_attack(config, seed)?;
    let rows = [
        ("variant", out.variant.name().to_string()),
        ("dimension", out.d.to_string()),
        ("leaked pairs", out.leaked.to_string()),
        ("max query rel. error", format!("{:.3e}", out.query_error)),
        ("max database rel. error", format!("{:.3e}", out.database_error)),
        ("query system condition", format!("{:.3e}", out.query_condition)),
        ("database system condition", format!("{:.3e}", out.database_condition)),
        ("attempts", out.attempts.to_string()),
        ("elapsed ms", format!("{:.2}", out.elapsed.as_secs_f64() * 1e3)),
    ];
    for (name, value) in &rows {
        println!("{name:<26} {value}");
    }
    println!("variant,d,seed,leaked,query_error,database_error,query_condition,database_condition,attempts,elapsed_ms");
    println!(
        "{},{},{seed},{},{:e},{:e},{:e},{:e},{},{:.3}",
        out.variant.name(),
        out.d,
        out.leaked,
        out.query_error,
        out.database_error,
        out.query_condition,
        out.database_condition,
        out.attempts,
        out.elapsed.as_secs_f64() * 1e3
    );
    Ok(())
}
