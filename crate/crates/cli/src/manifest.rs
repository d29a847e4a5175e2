//! Provenance stamped on every artifact, plus JSON and JSON-lines helpers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub input_digests: BTreeMap<String, String>,
    pub tool_version: String,
    pub unicode_version: String,
    pub rng_seed: Option<u64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    /// `config` is the parsed argument struct; its JSON form, minus output
    /// paths, is hashed.
    pub fn new(subcommand: &str, config: &impl Serialize, inputs: &[&Path], rng_seed: Option<u64>) -> Result<Self> {
        let mut input_digests = BTreeMap::new();
        for p in inputs {
            let data = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            input_digests.insert(p.display().to_string(), sha256_hex(&data));
        }
        let mut config = serde_json::to_value(config)?;
        // where results are written does not change them
        if let Some(o) = config.as_object_mut() {
            o.remove("output");
            o.remove("list");
        }
        Ok(RunManifest {
            subcommand: subcommand.to_owned(),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            input_digests,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            unicode_version: improbable_core::script::unicode_version(),
            rng_seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: RunManifest,
}

fn sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

/// A JSON document `{"manifest": ..., <key>: value}`.
pub fn write_json(path: Option<&PathBuf>, manifest: &RunManifest, key: &str, value: &impl Serialize) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("manifest".into(), serde_json::to_value(manifest)?);
    doc.insert(key.into(), serde_json::to_value(value)?);
    let mut out = sink(path)?;
    serde_json::to_writer_pretty(&mut out, &doc)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: serde_json::Value =
        serde_json::from_slice(&data).with_context(|| format!("parsing {}", path.display()))?;
    let inner = match v.get_mut(key) {
        Some(x) => x.take(),
        None => v,
    };
    serde_json::from_value(inner).with_context(|| format!("reading {key} from {}", path.display()))
}

/// JSON lines; the first line is the manifest header.
pub fn write_jsonl<T: Serialize>(path: Option<&PathBuf>, manifest: &RunManifest, items: &[T]) -> Result<()> {
    let mut out = sink(path)?;
    serde_json::to_writer(
        &mut out,
        &Header {
            manifest: manifest.clone(),
        },
    )?;
    writeln!(out)?;
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Read JSON lines, skipping blank lines and manifest headers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: not JSON", path.display(), i + 1))?;
        if v.as_object().is_some_and(|o| o.len() == 1 && o.contains_key("manifest")) {
            continue;
        }
        items.push(serde_json::from_value(v).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_skips_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let m = RunManifest::new("t", &1, &[], Some(3)).unwrap();
        write_jsonl(Some(&p), &m, &[1u32, 2, 3]).unwrap();
        assert_eq!(read_jsonl::<u32>(&p).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
