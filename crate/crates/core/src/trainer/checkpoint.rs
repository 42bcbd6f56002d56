//! Checkpoint directories: module and optimizer burnpack files, the run config and a
//! `key = value` manifest. A `LAST` file in the parent names the newest checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const LAST_POINTER: &str = "LAST";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.cfg";
pub const GENERATOR_FILE: &str = "generator.bpk";
pub const DISCRIMINATOR_FILE: &str = "discriminator.bpk";
pub const G_OPTIM_FILE: &str = "g_optim.bpk";
pub const D_OPTIM_FILE: &str = "d_optim.bpk";

/// Scalar state stored next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub iteration: usize,
    pub config_hash: String,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub generator_hash: String,
    pub discriminator_hash: String,
    pub code_version: String,
}

pub fn config_hash(config: &RunConfig) -> String {
    hex::encode(Sha256::digest(config.serialize().as_bytes()))
}

impl CheckpointManifest {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn capture_rng(rng: &ChaCha8Rng) -> ([u8; 32], u64, u128) {
        (rng.get_seed(), rng.get_stream(), rng.get_word_pos())
    }

    pub fn to_text(&self) -> String {
        format!(
            "iteration = {}\nconfig_hash = {}\nrng_seed = {}\nrng_stream = {}\nrng_word_pos = {}\n\
             generator_hash = {}\ndiscriminator_hash = {}\ncode_version = {}\n",
            self.iteration,
            self.config_hash,
            hex::encode(self.rng_seed),
            self.rng_stream,
            self.rng_word_pos,
            self.generator_hash,
            self.discriminator_hash,
            self.code_version
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("manifest is missing '{k}'")))
        };
        let bad = |k: &str| Error::Checkpoint(format!("manifest has a malformed '{k}'"));
        let seed = hex::decode(get("rng_seed")?).map_err(|_| bad("rng_seed"))?;
        Ok(Self {
            iteration: get("iteration")?.parse().map_err(|_| bad("iteration"))?,
            config_hash: get("config_hash")?.to_string(),
            rng_seed: seed.try_into().map_err(|_| bad("rng_seed"))?,
            rng_stream: get("rng_stream")?.parse().map_err(|_| bad("rng_stream"))?,
            rng_word_pos: get("rng_word_pos")?.parse().map_err(|_| bad("rng_word_pos"))?,
            generator_hash: get("generator_hash")?.to_string(),
            discriminator_hash: get("discriminator_hash")?.to_string(),
            code_version: get("code_version")?.to_string(),
        })
    }
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt-{iteration:08}")
}

/// Creates `root/.tmp-<name>`, lets `fill` populate it, then renames it into place and
/// updates `LAST`.
pub fn write_atomic(root: &Path, name: &str, fill: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let tmp = root.join(format!(".tmp-{name}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fill(&tmp)?;
    let dest = root.join(name);
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    }
    fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
    let pointer = root.join(LAST_POINTER);
    let pointer_tmp = root.join(format!(".{LAST_POINTER}.tmp"));
    fs::write(&pointer_tmp, format!("{name}\n")).map_err(|e| Error::io(&pointer_tmp, e))?;
    fs::rename(&pointer_tmp, &pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(dest)
}

/// Resolves `path` to a checkpoint directory: either one itself (has a manifest) or a run
/// directory whose `LAST` names one.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let pointer = path.join(LAST_POINTER);
    let name = fs::read_to_string(&pointer)
        .map_err(|_| Error::Checkpoint(format!("{} is not a checkpoint or run directory", path.display())))?;
    let dir = path.join(name.trim());
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::Checkpoint(format!(
            "LAST points at {} which has no manifest",
            dir.display()
        )));
    }
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<(CheckpointManifest, RunConfig)> {
    let path = dir.join(MANIFEST_FILE);
    let manifest = CheckpointManifest::parse(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let path = dir.join(CONFIG_FILE);
    let config = RunConfig::parse(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    if config_hash(&config) != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "config in {} does not match the manifest hash",
            dir.display()
        )));
    }
    Ok((manifest, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn manifest_round_trip_restores_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..13 {
            rng.next_u32();
        }
        let (rng_seed, rng_stream, rng_word_pos) = CheckpointManifest::capture_rng(&rng);
        let m = CheckpointManifest {
            iteration: 100,
            config_hash: "ab".into(),
            rng_seed,
            rng_stream,
            rng_word_pos,
            generator_hash: "cd".into(),
            discriminator_hash: "ef".into(),
            code_version: "0.1.0".into(),
        };
        let back = CheckpointManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let mut restored = back.rng();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn atomic_write_updates_pointer() {
        let dir = tempfile::tempdir().unwrap();
        for it in [5, 10] {
            write_atomic(dir.path(), &checkpoint_name(it), |tmp| {
                fs::write(tmp.join(MANIFEST_FILE), "x").map_err(|e| Error::io(tmp, e))
            })
            .unwrap();
        }
        assert_eq!(resolve_checkpoint(dir.path()).unwrap(), dir.path().join(checkpoint_name(10)));
        assert!(!dir.path().join(".tmp-ckpt-00000010").exists());
        assert!(resolve_checkpoint(&dir.path().join("missing")).is_err());
    }
}
