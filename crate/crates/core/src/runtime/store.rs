use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use super::{RuntimeError, SkillModelBundle};
use crate::pipeline::write_atomic;
use crate::text::{normalize_phrase, normalize_tokens};

pub const BUNDLE_FILE: &str = "bundle.bin";
pub const LATEST_FILE: &str = "latest";

/// Versioned bundle store: `<root>/<skill>/<version>/bundle.bin` plus a
/// `<root>/<skill>/latest` pointer, both replaced atomically.
#[derive(Debug, Clone)]
pub struct ModelStore {
    root: PathBuf,
}

fn skill_lock(dir: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let mut map = LOCKS.get_or_init(Default::default).lock().expect("lock table");
    map.entry(dir.to_path_buf()).or_default().clone()
}

pub fn valid_skill_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl ModelStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        ModelStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn skill_dir(&self, skill: &str) -> Result<PathBuf, RuntimeError> {
        if !valid_skill_id(skill) {
            return Err(RuntimeError::InvalidSkillId(skill.to_string()));
        }
        Ok(self.root.join(skill))
    }

    pub fn bundle_path(&self, skill: &str, version: u64) -> Result<PathBuf, RuntimeError> {
        Ok(self.skill_dir(skill)?.join(version.to_string()).join(BUNDLE_FILE))
    }

    pub fn skills(&self) -> Result<Vec<String>, RuntimeError> {
        let mut out = Vec::new();
        match fs::read_dir(&self.root) {
            Ok(entries) => {
                for e in entries.filter_map(Result::ok) {
                    let name = e.file_name().to_string_lossy().into_owned();
                    if valid_skill_id(&name) && e.path().join(LATEST_FILE).is_file() {
                        out.push(name);
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        out.sort();
        Ok(out)
    }

    /// Stored versions, ascending.
    pub fn versions(&self, skill: &str) -> Result<Vec<u64>, RuntimeError> {
        let dir = self.skill_dir(skill)?;
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(RuntimeError::UnknownSkill(skill.into())),
            Err(e) => return Err(e.into()),
        };
        let mut v: Vec<u64> = entries
            .filter_map(Result::ok)
            .filter(|e| e.path().join(BUNDLE_FILE).is_file())
            .filter_map(|e| e.file_name().to_str()?.parse().ok())
            .collect();
        v.sort_unstable();
        Ok(v)
    }

    pub fn latest_version(&self, skill: &str) -> Result<u64, RuntimeError> {
        let dir = self.skill_dir(skill)?;
        match fs::read_to_string(dir.join(LATEST_FILE)) {
            Ok(s) => s.trim().parse().map_err(|_| RuntimeError::Format(format!("bad latest pointer for {skill}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(RuntimeError::UnknownSkill(skill.into())),
            Err(e) => Err(e.into()),
        }
    }

    /// Assigns the next version, writes the bundle, then moves `latest`.
    /// Writers to the same skill are serialized within the process.
    pub fn store(&self, bundle: &SkillModelBundle) -> Result<u64, RuntimeError> {
        let dir = self.skill_dir(&bundle.skill_id)?;
        let lock = skill_lock(&dir);
        let _guard = lock.lock().expect("skill lock");
        let latest = self.latest_version(&bundle.skill_id).unwrap_or(0);
        let newest_dir = self.versions(&bundle.skill_id).ok().and_then(|v| v.last().copied()).unwrap_or(0);
        let version = latest.max(newest_dir) + 1;
        let mut b = bundle.clone();
        b.version = version;
        write_atomic(&dir.join(version.to_string()).join(BUNDLE_FILE), &b.to_bytes())?;
        write_atomic(&dir.join(LATEST_FILE), format!("{version}\n").as_bytes())?;
        log::info!(target: "skillforge::store", "stored {} v{version}", bundle.skill_id);
        Ok(version)
    }

    /// Loads `version`, or the latest one when `None`.
    pub fn load(&self, skill: &str, version: Option<u64>) -> Result<SkillModelBundle, RuntimeError> {
        let version = match version {
            Some(v) => v,
            None => self.latest_version(skill)?,
        };
        let path = self.bundle_path(skill, version)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if !self.skill_dir(skill)?.is_dir() {
                    return Err(RuntimeError::UnknownSkill(skill.into()));
                }
                return Err(RuntimeError::VersionNotFound { skill: skill.into(), version });
            }
            Err(e) => return Err(e.into()),
        };
        let bundle = SkillModelBundle::from_bytes(&bytes)?;
        if bundle.skill_id != skill || bundle.version != version {
            return Err(RuntimeError::Format(format!(
                "{} holds {} v{}",
                path.display(),
                bundle.skill_id,
                bundle.version
            )));
        }
        Ok(bundle)
    }
}

/// Result of matching an "open X" style request against stored skills.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub skill_id: String,
    /// Request text following the invocation name, if any.
    pub request: Option<String>,
}

const LAUNCH_WORDS: &[&str] = &["open", "launch", "start", "ask", "tell", "use"];
const JOINERS: &[&str] = &["to", "for", "about", "and", "that"];

/// Exact-match lookup of the invocation name across the latest bundles.
pub fn route_invocation(store: &ModelStore, utterance: &str) -> Result<Option<Invocation>, RuntimeError> {
    let tokens = normalize_tokens(utterance);
    let Some(first) = tokens.first() else { return Ok(None) };
    if !LAUNCH_WORDS.contains(&first.as_str()) {
        return Ok(None);
    }
    let rest = &tokens[1..];
    let mut best: Option<(usize, String)> = None;
    for skill in store.skills()? {
        let bundle = store.load(&skill, None)?;
        let name = normalize_tokens(&bundle.invocation_name);
        if !name.is_empty() && rest.starts_with(&name) && best.as_ref().is_none_or(|(n, _)| name.len() > *n) {
            best = Some((name.len(), skill));
        }
    }
    Ok(best.map(|(n, skill_id)| {
        let mut tail = &rest[n..];
        if tail.first().is_some_and(|t| JOINERS.contains(&t.as_str())) {
            tail = &tail[1..];
        }
        let request = (!tail.is_empty()).then(|| normalize_phrase(&tail.join(" ")));
        Invocation { skill_id, request }
    }))
}
