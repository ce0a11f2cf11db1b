use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use sha2::{Digest, Sha256};

use super::PipelineError;

/// Environment variable naming the default artifact root directory.
pub const ARTIFACT_ROOT_ENV: &str = "SKILLFORGE_ARTIFACT_ROOT";

/// `file://path` (relative paths resolve against the environment root),
/// `kv://key` or `mem://name`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArtifactUri {
    File(PathBuf),
    Kv(String),
    Mem(String),
}

impl ArtifactUri {
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        let bad = || PipelineError::BadUri(s.to_string());
        let (scheme, rest) = s.split_once("://").ok_or_else(bad)?;
        if rest.is_empty() {
            return Err(bad());
        }
        match scheme {
            "file" => Ok(ArtifactUri::File(PathBuf::from(rest))),
            "kv" => Ok(ArtifactUri::Kv(rest.to_string())),
            "mem" => Ok(ArtifactUri::Mem(rest.to_string())),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ArtifactUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArtifactUri::File(p) => write!(f, "file://{}", p.display()),
            ArtifactUri::Kv(k) => write!(f, "kv://{k}"),
            ArtifactUri::Mem(k) => write!(f, "mem://{k}"),
        }
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` next to `path` and renames into place, so readers see
/// either the old file or the complete new one.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Embedded file-backed key-value store: one file per key under `dir`.
#[derive(Debug, Clone)]
pub struct KvStore {
    dir: PathBuf,
}

impl KvStore {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        KvStore { dir: dir.into() }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(hex::encode(key.as_bytes()))
    }

    pub fn get(&self, key: &str) -> std::io::Result<Option<Vec<u8>>> {
        match fs::read(self.path(key)) {
            Ok(v) => Ok(Some(v)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, key: &str, value: &[u8]) -> std::io::Result<()> {
        write_atomic(&self.path(key), value)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path(key).is_file()
    }
}

/// Process-local artifact store shared by clones.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    map: Arc<RwLock<HashMap<String, Arc<Vec<u8>>>>>,
}

impl MemStore {
    pub fn get(&self, key: &str) -> Option<Arc<Vec<u8>>> {
        self.map.read().expect("mem store lock").get(key).cloned()
    }

    pub fn put(&self, key: &str, value: Vec<u8>) {
        self.map.write().expect("mem store lock").insert(key.to_string(), Arc::new(value));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.read().expect("mem store lock").contains_key(key)
    }
}

/// Where artifacts live: a file root, a key-value store and a memory store.
#[derive(Debug, Clone)]
pub struct ArtifactEnv {
    pub file_root: PathBuf,
    pub kv: KvStore,
    pub mem: MemStore,
}

impl ArtifactEnv {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        ArtifactEnv { kv: KvStore::open(root.join("kv")), file_root: root, mem: MemStore::default() }
    }

    /// Root from `SKILLFORGE_ARTIFACT_ROOT`, else `./artifacts`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(ARTIFACT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("artifacts")))
    }

    pub fn file_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.file_root.join(p)
        }
    }

    pub fn exists(&self, uri: &ArtifactUri) -> bool {
        match uri {
            ArtifactUri::File(p) => self.file_path(p).is_file(),
            ArtifactUri::Kv(k) => self.kv.contains(k),
            ArtifactUri::Mem(k) => self.mem.contains(k),
        }
    }

    pub fn read(&self, uri: &ArtifactUri) -> Result<Arc<Vec<u8>>, PipelineError> {
        let missing = || PipelineError::MissingArtifact(uri.to_string());
        match uri {
            ArtifactUri::File(p) => match fs::read(self.file_path(p)) {
                Ok(v) => Ok(Arc::new(v)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(missing()),
                Err(e) => Err(e.into()),
            },
            ArtifactUri::Kv(k) => self.kv.get(k)?.map(Arc::new).ok_or_else(missing),
            ArtifactUri::Mem(k) => self.mem.get(k).ok_or_else(missing),
        }
    }

    /// Atomic write (temp file then rename for file and kv artifacts).
    pub fn write(&self, uri: &ArtifactUri, bytes: Vec<u8>) -> Result<(), PipelineError> {
        match uri {
            ArtifactUri::File(p) => write_atomic(&self.file_path(p), &bytes)?,
            ArtifactUri::Kv(k) => self.kv.put(k, &bytes)?,
            ArtifactUri::Mem(k) => self.mem.put(k, bytes),
        }
        Ok(())
    }

    pub fn artifact(&self, uri: ArtifactUri) -> Artifact {
        Artifact { uri, env: self.clone(), payload: OnceLock::new() }
    }
}

/// Lazy handle: the payload is read on first access and cached.
#[derive(Debug)]
pub struct Artifact {
    uri: ArtifactUri,
    env: ArtifactEnv,
    payload: OnceLock<Arc<Vec<u8>>>,
}

impl Artifact {
    pub fn uri(&self) -> &ArtifactUri {
        &self.uri
    }

    pub fn exists(&self) -> bool {
        self.payload.get().is_some() || self.env.exists(&self.uri)
    }

    pub fn bytes(&self) -> Result<Arc<Vec<u8>>, PipelineError> {
        if let Some(p) = self.payload.get() {
            return Ok(p.clone());
        }
        let p = self.env.read(&self.uri)?;
        Ok(self.payload.get_or_init(|| p).clone())
    }

    /// Hex SHA-256 of the payload.
    pub fn digest(&self) -> Result<String, PipelineError> {
        Ok(hex::encode(Sha256::digest(self.bytes()?.as_slice())))
    }
}
