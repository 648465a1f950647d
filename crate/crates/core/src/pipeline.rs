//! Persisted artifacts and the data-owner pipeline.
//!
//! An artifact directory holds owner secrets (both keys) and server
//! artifacts (both ciphertext stores and the graph), plus a JSON manifest
//! with a SHA-256 digest and role for every file. Server-side loading only
//! opens files the manifest marks as server artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::common::derive_seed;
use crate::dce::{self, DceSecretKey, DceStore};
use crate::dcpe::{max_abs_coordinate, sap_keygen, SapKey, SapStore, DEFAULT_SCALE};
use crate::error::{Error, Result};
use crate::hnsw::{self, HnswGraph, HnswParams};
use crate::search::{pad_to_even, padded_dim, EncryptedDatabase};

pub const DCE_KEY_FILE: &str = "dce.key";
pub const SAP_KEY_FILE: &str = "sap.key";
pub const DCE_STORE_FILE: &str = "dce.store";
pub const SAP_STORE_FILE: &str = "sap.store";
pub const GRAPH_FILE: &str = "index.hnsw";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// The SAP key and store layouts carry no version byte; the manifest records this one.
pub const SAP_FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactRole {
    Owner,
    Server,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub role: ArtifactRole,
    pub format_version: u32,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    /// Number of database vectors.
    pub n: usize,
    /// Dimension of the plaintext vectors.
    pub d: usize,
    /// Dimension after zero padding to an even length.
    pub stored_dim: usize,
    pub padding: bool,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    pub fn new(n: usize, d: usize) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            n,
            d,
            stored_dim: padded_dim(d),
            padding: d % 2 == 1,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::format(
                "manifest",
                format!("unsupported version {}", m.manifest_version),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Hashes `dir/name` and records it.
    pub fn record(&mut self, dir: &Path, name: &str, role: ArtifactRole, format_version: u8) -> Result<()> {
        let bytes = fs::read(dir.join(name))?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                role,
                format_version: u32::from(format_version),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    /// Reads `dir/name` after checking its role and digest.
    pub fn read_verified(&self, dir: &Path, name: &str, role: ArtifactRole) -> Result<Vec<u8>> {
        let entry = self
            .artifacts
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("{name} is not listed in the manifest")))?;
        if entry.role != role {
            return Err(Error::Integrity(format!("{name} is not a {role:?} artifact")));
        }
        let bytes = fs::read(dir.join(name))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(Error::Integrity(format!(
                "{name}: digest {digest} does not match manifest {}",
                entry.sha256
            )));
        }
        Ok(bytes)
    }

    /// Checks every listed artifact against its digest.
    pub fn verify_all(&self, dir: &Path) -> Result<()> {
        for (name, entry) in &self.artifacts {
            self.read_verified(dir, name, entry.role)?;
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(path)
}

/// Both owner secrets.
#[derive(Clone, Debug, PartialEq)]
pub struct OwnerKeys {
    pub dce: DceSecretKey,
    pub sap: SapKey,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OwnerConfig {
    pub s: f64,
    pub beta: f64,
    pub hnsw: HnswParams,
    pub seed: u64,
}

impl Default for OwnerConfig {
    fn default() -> Self {
        Self {
            s: DEFAULT_SCALE,
            beta: 1.0,
            hnsw: HnswParams::default(),
            seed: 0,
        }
    }
}

/// Keys for `base`, sized for its padded dimension.
pub fn generate_keys(base: &[Vec<f64>], s: f64, beta: f64, seed: u64) -> Result<OwnerKeys> {
    let d = base
        .first()
        .ok_or(Error::Empty("cannot generate keys for an empty dataset"))?
        .len();
    let pd = padded_dim(d);
    Ok(OwnerKeys {
        dce: dce::keygen(pd, derive_seed(seed, "dce-key"))?,
        sap: sap_keygen(s, beta, max_abs_coordinate(base), pd)?,
    })
}

pub fn save_keys(keys: &OwnerKeys, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    write_file(dir, DCE_KEY_FILE, |w| keys.dce.write_to(w))?;
    write_file(dir, SAP_KEY_FILE, |w| keys.sap.write_to(w))?;
    manifest.record(dir, DCE_KEY_FILE, ArtifactRole::Owner, dce::FORMAT_VERSION)?;
    manifest.record(dir, SAP_KEY_FILE, ArtifactRole::Owner, SAP_FORMAT_VERSION)
}

pub fn load_keys(dir: &Path, manifest: &Manifest) -> Result<OwnerKeys> {
    let dce = DceSecretKey::read_from(&manifest.read_verified(dir, DCE_KEY_FILE, ArtifactRole::Owner)?[..])?;
    let sap = SapKey::read_from(&manifest.read_verified(dir, SAP_KEY_FILE, ArtifactRole::Owner)?[..])?;
    Ok(OwnerKeys { dce, sap })
}

/// Encrypts `base` under both schemes, padding odd dimensions.
pub fn encrypt_stores(base: &[Vec<f64>], keys: &OwnerKeys, seed: u64) -> Result<(SapStore, DceStore)> {
    let rows: Vec<Vec<f64>> = base.iter().map(|v| pad_to_even(v)).collect();
    Ok((
        SapStore::encrypt_all(&rows, &keys.sap, derive_seed(seed, "sap-store"))?,
        DceStore::encrypt_all(&rows, &keys.dce, derive_seed(seed, "dce-store"))?,
    ))
}

pub fn save_stores(sap: &SapStore, dce: &DceStore, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    write_file(dir, SAP_STORE_FILE, |w| sap.write_to(w))?;
    write_file(dir, DCE_STORE_FILE, |w| dce.write_to(w))?;
    manifest.record(dir, SAP_STORE_FILE, ArtifactRole::Server, SAP_FORMAT_VERSION)?;
    manifest.record(dir, DCE_STORE_FILE, ArtifactRole::Server, dce::FORMAT_VERSION)
}

pub fn build_index(sap: &SapStore, params: HnswParams, seed: u64) -> Result<HnswGraph> {
    HnswGraph::build(sap, sap.len(), params, derive_seed(seed, "hnsw"))
}

pub fn save_index(graph: &HnswGraph, dir: &Path, manifest: &mut Manifest) -> Result<()> {
    write_file(dir, GRAPH_FILE, |w| graph.write_to(w))?;
    manifest.record(dir, GRAPH_FILE, ArtifactRole::Server, hnsw::FORMAT_VERSION)
}

pub fn load_sap_store(dir: &Path, manifest: &Manifest) -> Result<SapStore> {
    SapStore::read_from(&manifest.read_verified(dir, SAP_STORE_FILE, ArtifactRole::Server)?[..])
}

/// Loads the server view. Key files are never opened.
pub fn load_server_database(dir: &Path) -> Result<EncryptedDatabase> {
    let manifest = Manifest::load(dir)?;
    let sap = load_sap_store(dir, &manifest)?;
    let dce = DceStore::read_from(&manifest.read_verified(dir, DCE_STORE_FILE, ArtifactRole::Server)?[..])?;
    let graph = HnswGraph::read_from(&manifest.read_verified(dir, GRAPH_FILE, ArtifactRole::Server)?[..])?;
    if sap.len() != manifest.n || sap.dim() != manifest.stored_dim {
        return Err(Error::Integrity("store shape disagrees with the manifest".into()));
    }
    EncryptedDatabase::from_parts(sap, dce, graph, manifest.padding)
}

/// Runs every owner step and writes all artifacts plus the manifest to `dir`.
pub fn owner_pipeline(base: &[Vec<f64>], config: &OwnerConfig, dir: &Path) -> Result<Manifest> {
    let d = base
        .first()
        .ok_or(Error::Empty("cannot outsource an empty dataset"))?
        .len();
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::new(base.len(), d);
    let keys = generate_keys(base, config.s, config.beta, config.seed)?;
    save_keys(&keys, dir, &mut manifest)?;
    let (sap, dce) = encrypt_stores(base, &keys, config.seed)?;
    save_stores(&sap, &dce, dir, &mut manifest)?;
    let graph = build_index(&sap, config.hnsw, config.seed)?;
    save_index(&graph, dir, &mut manifest)?;
    manifest.save(dir)?;
    log::info!(
        "wrote {} artifacts for n={} d={} to {}",
        manifest.artifacts.len(),
        base.len(),
        d,
        dir.display()
    );
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::common::SeededRng;
    use crate::dataset::SyntheticConfig;
    use crate::search::{search, QueryCiphertext};

    fn config() -> OwnerConfig {
        OwnerConfig {
            s: 1024.0,
            beta: 0.5,
            hnsw: HnswParams {
                m: 8,
                ef_construction: 64,
            },
            seed: 11,
        }
    }

    #[test]
    fn artifacts_round_trip_and_verify() {
        let ds = SyntheticConfig {
            n: 300,
            queries: 5,
            d: 16,
            ..Default::default()
        }
        .generate(1)
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = owner_pipeline(&ds.base, &config(), dir.path()).unwrap();
        assert_eq!(manifest.artifacts.len(), 5);
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        loaded.verify_all(dir.path()).unwrap();

        let db = load_server_database(dir.path()).unwrap();
        let keys = load_keys(dir.path(), &loaded).unwrap();
        let qc = QueryCiphertext::encrypt(&ds.queries[0], 5, &keys.dce, &keys.sap, &mut SeededRng::new(2)).unwrap();
        assert_eq!(search(&db, &qc, 300, 300).unwrap().ids, ds.truth(5).unwrap()[0]);

        for name in manifest.artifacts.keys() {
            let path = dir.path().join(name);
            let bytes = fs::read(&path).unwrap();
            let mut out = Vec::new();
            match name.as_str() {
                DCE_KEY_FILE => DceSecretKey::read_from(&bytes[..]).unwrap().write_to(&mut out).unwrap(),
                SAP_KEY_FILE => SapKey::read_from(&bytes[..]).unwrap().write_to(&mut out).unwrap(),
                DCE_STORE_FILE => DceStore::read_from(&bytes[..]).unwrap().write_to(&mut out).unwrap(),
                SAP_STORE_FILE => SapStore::read_from(&bytes[..]).unwrap().write_to(&mut out).unwrap(),
                GRAPH_FILE => HnswGraph::read_from(&bytes[..]).unwrap().write_to(&mut out).unwrap(),
                other => panic!("unexpected artifact {other}"),
            }
            assert_eq!(out, bytes, "{name}");
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let ds = SyntheticConfig {
            n: 200,
            queries: 1,
            d: 8,
            ..Default::default()
        }
        .generate(3)
        .unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = owner_pipeline(&ds.base, &config(), a.path()).unwrap();
        let mb = owner_pipeline(&ds.base, &config(), b.path()).unwrap();
        assert_eq!(ma, mb);
        for name in ma.artifacts.keys().map(String::as_str).chain([MANIFEST_FILE]) {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn single_byte_corruption_is_detected() {
        let ds = SyntheticConfig {
            n: 50,
            queries: 1,
            d: 4,
            ..Default::default()
        }
        .generate(5)
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = owner_pipeline(&ds.base, &config(), dir.path()).unwrap();
        for name in manifest.artifacts.keys() {
            let path = dir.path().join(name);
            let original = fs::read(&path).unwrap();
            let mut bytes = original.clone();
            let i = bytes.len() / 2;
            bytes[i] ^= 0x01;
            fs::write(&path, &bytes).unwrap();
            assert!(
                matches!(manifest.verify_all(dir.path()), Err(Error::Integrity(_))),
                "{name}"
            );
            fs::write(&path, &original).unwrap();
        }
        manifest.verify_all(dir.path()).unwrap();
    }

    #[test]
    fn server_loader_rejects_owner_roles() {
        let ds = SyntheticConfig {
            n: 30,
            queries: 1,
            d: 4,
            ..Default::default()
        }
        .generate(6)
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = owner_pipeline(&ds.base, &config(), dir.path()).unwrap();
        assert!(manifest
            .read_verified(dir.path(), DCE_KEY_FILE, ArtifactRole::Server)
            .is_err());
    }

    #[test]
    fn glove_like_dimension_and_odd_padding() {
        let ds = SyntheticConfig {
            n: 100,
            queries: 1,
            d: 100,
            ..Default::default()
        }
        .generate(7)
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = owner_pipeline(&ds.base, &config(), dir.path()).unwrap();
        assert!(!m.padding);
        assert_eq!(m.stored_dim, 100);

        let odd = SyntheticConfig {
            n: 100,
            queries: 1,
            d: 7,
            ..Default::default()
        }
        .generate(7)
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = owner_pipeline(&odd.base, &config(), dir.path()).unwrap();
        assert!(m.padding);
        assert_eq!(m.stored_dim, 8);
        assert!(load_server_database(dir.path()).unwrap().padded());
    }
}
