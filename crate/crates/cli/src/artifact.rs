use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use coreplan::features::{CoreSetFile, FeatureFile, WitnessFile};
use coreplan::mdp::MdpFile;
use coreplan::{CoreSet, FeatureMap, LinearMdpWitness, Mdp};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub const MDP_FILE: &str = "mdp.json";
pub const FEATURES_FILE: &str = "features.json";
pub const CORESET_FILE: &str = "coreset.json";
pub const WITNESS_FILE: &str = "witness.json";

/// Raised when an artifact was produced from a different instance.
#[derive(Debug, thiserror::Error)]
#[error("instance hash mismatch in {file}: expected {expected}, found {found}")]
pub struct IntegrityError {
    pub file: String,
    pub expected: String,
    pub found: String,
}

/// Raised for contradictory or empty command-line configuration.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Header carried by every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub instance_hash: String,
    pub config: serde_json::Value,
}

impl Meta {
    pub fn new(instance_hash: &str, config: serde_json::Value) -> Self {
        Self {
            version: VERSION.to_string(),
            instance_hash: instance_hash.to_string(),
            config,
        }
    }

    /// `#` lines for CSV outputs.
    pub fn preamble(&self) -> Vec<String> {
        vec![
            format!("version: {}", self.version),
            format!("instance_hash: {}", self.instance_hash),
            format!("config: {}", self.config),
        ]
    }
}

/// A JSON body with a `meta` field next to its own fields.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub meta: Meta,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Resolves `p` against the working directory given by `--out`.
pub fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn put<T: Serialize>(dir: &Path, name: &str, meta: &Meta, body: T) -> Result<()> {
    write_json(
        &dir.join(name),
        &Envelope {
            meta: meta.clone(),
            body,
        },
    )
}

pub struct Instance {
    pub mdp: Mdp,
    pub features: FeatureMap,
    pub core: CoreSet,
    pub witness: Option<LinearMdpWitness>,
    pub hash: String,
}

/// SHA-256 over the compact JSON of the MDP, features and core set.
pub fn instance_hash(mdp: &Mdp, features: &FeatureMap, core: &CoreSet) -> Result<String> {
    let bytes = serde_json::to_vec(&(mdp.to_file(), features.to_file(), core.to_file()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Instance {
    pub fn new(mdp: Mdp, features: FeatureMap, core: CoreSet, witness: Option<LinearMdpWitness>) -> Result<Self> {
        let hash = instance_hash(&mdp, &features, &core)?;
        Ok(Self {
            mdp,
            features,
            core,
            witness,
            hash,
        })
    }

    pub fn save(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let meta = Meta::new(&self.hash, config.clone());
        put(dir, MDP_FILE, &meta, self.mdp.to_file())?;
        put(dir, FEATURES_FILE, &meta, self.features.to_file())?;
        put(dir, CORESET_FILE, &meta, self.core.to_file())?;
        if let Some(w) = &self.witness {
            put(dir, WITNESS_FILE, &meta, w.to_file())?;
        }
        Ok(())
    }

    /// Loads an instance directory and checks that every file carries the
    /// hash of the reloaded instance.
    pub fn load(dir: &Path) -> Result<Self> {
        let mdp_env: Envelope<MdpFile> = read_json(&dir.join(MDP_FILE))?;
        let feat_env: Envelope<FeatureFile> = read_json(&dir.join(FEATURES_FILE))?;
        let core_env: Envelope<CoreSetFile> = read_json(&dir.join(CORESET_FILE))?;
        let mdp = Mdp::from_file(mdp_env.body)?;
        let features = FeatureMap::from_file(feat_env.body)?;
        let core = CoreSet::from_file(core_env.body, &features)?;
        let witness_path = dir.join(WITNESS_FILE);
        let (witness, witness_meta) = if witness_path.exists() {
            let w: Envelope<WitnessFile> = read_json(&witness_path)?;
            (
                Some(LinearMdpWitness::from_file(w.body, mdp.num_states())?),
                Some(w.meta),
            )
        } else {
            (None, None)
        };
        let inst = Self::new(mdp, features, core, witness)?;
        let metas = [
            (MDP_FILE, Some(mdp_env.meta)),
            (FEATURES_FILE, Some(feat_env.meta)),
            (CORESET_FILE, Some(core_env.meta)),
            (WITNESS_FILE, witness_meta),
        ];
        for (file, meta) in metas {
            if let Some(meta) = meta {
                inst.verify(&dir.join(file), &meta.instance_hash)?;
            }
        }
        Ok(inst)
    }

    pub fn verify(&self, file: &Path, found: &str) -> Result<()> {
        if found != self.hash {
            return Err(IntegrityError {
                file: file.display().to_string(),
                expected: self.hash.clone(),
                found: found.to_string(),
            }
            .into());
        }
        Ok(())
    }
}

/// Reads the `instance_hash` line from a CSV preamble.
pub fn csv_instance_hash(text: &str) -> Option<&str> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# instance_hash: "))
        .map(str::trim)
}
