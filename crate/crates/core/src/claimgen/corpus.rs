//! On-disk corpus: `corpus.jsonl` (one claim per line), a `clusters/`
//! sidecar directory with documents, summary and image records, and
//! `manifest.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::ImageRecord;
use crate::error::{Error, Result};
use crate::labels::Label;

use super::{checkworthiness_stats, prompts, CheckworthinessStats, ClaimRecord, DocumentCluster};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub mode: String,
    pub seed: u64,
    pub clusters: usize,
    pub claims: usize,
    pub per_label: BTreeMap<String, usize>,
    pub inconsistent_labels: usize,
    pub checkworthiness: CheckworthinessStats,
    pub template_hashes: BTreeMap<String, String>,
    pub corpus_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub clusters: Vec<DocumentCluster>,
    pub claims: Vec<ClaimRecord>,
}

impl Corpus {
    pub fn cluster(&self, id: &str) -> Option<&DocumentCluster> {
        self.clusters.iter().find(|c| c.id == id)
    }
}

fn claims_jsonl(claims: &[ClaimRecord]) -> Result<String> {
    let mut out = String::new();
    for c in claims {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(dir: &Path, corpus: &Corpus, seed: u64, mode: &str) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir.join("clusters"))?;
    let body = claims_jsonl(&corpus.claims)?;
    std::fs::write(dir.join("corpus.jsonl"), &body)?;
    for c in &corpus.clusters {
        let cdir = dir.join("clusters").join(&c.id);
        std::fs::create_dir_all(&cdir)?;
        std::fs::write(cdir.join("summary.txt"), &c.summary)?;
        for (k, d) in c.documents.iter().enumerate() {
            std::fs::write(cdir.join(format!("doc_{k:03}.txt")), d)?;
        }
        for (k, img) in c.images.iter().enumerate() {
            std::fs::write(cdir.join(format!("image_{k:03}.json")), serde_json::to_string(img)?)?;
        }
    }
    let mut per_label = BTreeMap::new();
    for l in Label::ALL {
        per_label.insert(l.as_str().to_string(), corpus.claims.iter().filter(|c| c.label == l).count());
    }
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        mode: mode.to_string(),
        seed,
        clusters: corpus.clusters.len(),
        claims: corpus.claims.len(),
        per_label,
        inconsistent_labels: corpus.claims.iter().filter(|c| !c.is_consistent()).count(),
        checkworthiness: checkworthiness_stats(&corpus.claims),
        template_hashes: prompts::template_hashes().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        corpus_sha256: hex::encode(Sha256::digest(body.as_bytes())),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn sorted_files(dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix)))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let raw = std::fs::read_to_string(&path)
        .map_err(|e| Error::Validation(format!("no corpus manifest at {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Field {
        path: path.clone(),
        field: "format_version".into(),
        message: "missing or not an integer".into(),
    })?;
    if found != CORPUS_FORMAT_VERSION as u64 {
        return Err(Error::Migration { path, found: found as u32, expected: CORPUS_FORMAT_VERSION });
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads every `<id>/` cluster directory under `root`, sorted by id.
pub fn load_clusters(root: &Path) -> Result<Vec<DocumentCluster>> {
    let mut dirs: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::Validation(format!("cannot read cluster directory {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    dirs.sort();
    let mut clusters = Vec::with_capacity(dirs.len());
    for id in dirs {
        let cdir = root.join(&id);
        let summary = std::fs::read_to_string(cdir.join("summary.txt")).unwrap_or_default();
        let documents = sorted_files(&cdir, "doc_")?
            .iter()
            .map(std::fs::read_to_string)
            .collect::<std::io::Result<Vec<_>>>()?;
        let images = sorted_files(&cdir, "image_")?
            .iter()
            .map(|p| ImageRecord::parse(&std::fs::read_to_string(p)?))
            .collect::<Result<Vec<_>>>()?;
        let cluster = DocumentCluster { id, documents, images, summary };
        cluster.validate()?;
        clusters.push(cluster);
    }
    Ok(clusters)
}

pub fn load_corpus(dir: &Path) -> Result<(Corpus, CorpusManifest)> {
    let manifest = load_manifest(dir)?;
    let path = dir.join("corpus.jsonl");
    let raw = std::fs::read_to_string(&path)?;
    let mut claims = Vec::new();
    for (n, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: ClaimRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        c.validate()?;
        claims.push(c);
    }
    let mut ids: Vec<String> = claims.iter().map(|c| c.cluster_id.clone()).collect();
    ids.dedup();
    let clusters = load_clusters(&dir.join("clusters"))?;
    if let Some(missing) = ids.iter().find(|id| !clusters.iter().any(|c| &c.id == *id)) {
        return Err(Error::Validation(format!("claims reference missing cluster {missing}")));
    }
    Ok((Corpus { clusters, claims }, manifest))
}
