//! Dataset construction: labeled claims per document cluster, label
//! double-checks, checkworthiness classes and a synthetic fact world.

pub mod client;
pub mod corpus;
pub mod prompts;
mod synth;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoding::ImageRecord;
use crate::error::{Error, Result};
use crate::labels::Label;
use crate::transport::Transport;

pub use client::{LlmClient, Script};
pub use synth::{
    synth_world, world_nli_pairs, Fact, SynthWorld, CLAIMS_PER_LABEL, FACTS_PER_CLUSTER, IMAGE_FEATURE_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentCluster {
    pub id: String,
    pub documents: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub summary: String,
}

impl DocumentCluster {
    pub fn validate(&self) -> Result<()> {
        if self.documents.is_empty() {
            return Err(Error::Validation(format!("cluster {} has no documents", self.id)));
        }
        if self.summary.trim().is_empty() {
            return Err(Error::Validation(format!("cluster {} has an empty summary", self.id)));
        }
        self.images.iter().try_for_each(ImageRecord::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Checkworthiness {
    /// Unimportant factual statement.
    #[serde(rename = "UFS")]
    Ufs,
    /// Check-worthy factual statement.
    #[serde(rename = "CFS")]
    Cfs,
    /// Non-factual statement.
    #[serde(rename = "NFS")]
    Nfs,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Checkworthiness {
    pub const CLASSES: [Checkworthiness; 3] = [Checkworthiness::Ufs, Checkworthiness::Cfs, Checkworthiness::Nfs];

    pub fn as_str(self) -> &'static str {
        match self {
            Checkworthiness::Ufs => "UFS",
            Checkworthiness::Cfs => "CFS",
            Checkworthiness::Nfs => "NFS",
            Checkworthiness::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Checkworthiness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Checkworthiness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "UFS" => Ok(Checkworthiness::Ufs),
            "CFS" => Ok(Checkworthiness::Cfs),
            "NFS" => Ok(Checkworthiness::Nfs),
            "unknown" => Ok(Checkworthiness::Unknown),
            other => Err(Error::Validation(format!("unknown checkworthiness class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimRecord {
    pub id: String,
    pub cluster_id: String,
    pub claim: String,
    pub label: Label,
    pub checkworthiness: Checkworthiness,
    pub verified_label: Option<Label>,
}

impl ClaimRecord {
    pub fn validate(&self) -> Result<()> {
        if self.claim.trim().is_empty() {
            return Err(Error::Validation(format!("claim {} is empty", self.id)));
        }
        Ok(())
    }

    /// False when a double-check disagreed with the generation label.
    pub fn is_consistent(&self) -> bool {
        self.verified_label.is_none_or(|v| v == self.label)
    }
}

fn numbered_item() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*(\d+)\.\s*(.*?)\s*$").expect("valid pattern"))
}

/// Items "1." through "10." of a numbered list; the first occurrence of
/// each number wins. Anything short of all ten is an error.
pub fn parse_numbered_list(response: &str) -> Result<Vec<String>> {
    let mut items: Vec<Option<String>> = vec![None; CLAIMS_PER_LABEL];
    for caps in numbered_item().captures_iter(response) {
        let Ok(n) = caps[1].parse::<usize>() else { continue };
        let text = caps[2].trim().trim_matches('"').trim();
        if (1..=CLAIMS_PER_LABEL).contains(&n) && items[n - 1].is_none() && !text.is_empty() {
            items[n - 1] = Some(text.to_string());
        }
    }
    let found = items.iter().filter(|i| i.is_some()).count();
    if found < CLAIMS_PER_LABEL {
        return Err(Error::Generation {
            message: format!("expected items 1. through {CLAIMS_PER_LABEL}., parsed {found}"),
            raw: response.to_string(),
        });
    }
    Ok(items.into_iter().flatten().collect())
}

/// Ten claims of `label` for `cluster`, in list order.
pub fn generate_claims(cluster: &DocumentCluster, label: Label, client: &LlmClient) -> Result<Vec<ClaimRecord>> {
    let prompt = prompts::claim_prompt(label, &cluster.summary);
    let mut attempt = 0;
    let items = loop {
        let response = client.complete(&prompt)?;
        match parse_numbered_list(&response) {
            Ok(items) => break items,
            Err(e) if attempt >= client.max_retries => return Err(e),
            Err(_) => attempt += 1,
        }
    };
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(i, claim)| ClaimRecord {
            id: format!("{}-{}-{}", cluster.id, label.as_str(), i + 1),
            cluster_id: cluster.id.clone(),
            claim,
            label,
            checkworthiness: Checkworthiness::Unknown,
            verified_label: None,
        })
        .collect())
}

fn label_word() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(entailment|neutral|contradiction)\b").expect("valid pattern"))
}

/// First label word in a double-check response.
pub fn parse_label_response(response: &str) -> Result<Label> {
    let m = label_word().find(response).ok_or_else(|| Error::Parse {
        message: "no label word in double-check response".into(),
        raw: response.to_string(),
    })?;
    m.as_str().to_lowercase().parse()
}

/// Asks the model for the label of `claim` given the cluster documents and
/// stores the answer in `claim.verified_label`.
pub fn verify_label(claim: &mut ClaimRecord, cluster: &DocumentCluster, client: &LlmClient) -> Result<Label> {
    if claim.cluster_id != cluster.id {
        return Err(Error::Precondition(format!("claim {} does not belong to cluster {}", claim.id, cluster.id)));
    }
    let response = client.complete(&prompts::double_check_prompt(&cluster.documents, &claim.claim))?;
    let label = parse_label_response(&response)?;
    claim.verified_label = Some(label);
    Ok(label)
}

const COPULAS: &[&str] = &["is", "are", "was", "were", "be", "been", "being", "am", "seems", "seem", "feels", "looks"];
const IRREGULAR_VERBS: &[&str] = &[
    "sold", "built", "won", "made", "said", "took", "gave", "met", "left", "lost", "rose", "fell", "hit", "cut", "led",
    "paid", "bought", "brought", "began", "became", "found", "held", "kept", "ran", "sent", "spent", "told", "wrote",
    "shut", "struck", "drew", "grew", "threw", "chose", "broke", "stole", "fought", "sought", "taught", "caught",
];
pub const DEFAULT_TRIVIAL_LEXICON: &[&str] =
    &["weather", "breakfast", "lunch", "dinner", "coffee", "birthday", "favorite", "favourite", "hobby", "pet", "dessert"];

/// Checkworthiness classifier.
#[derive(Debug, Clone)]
pub enum CheckworthinessPlugin {
    Builtin { trivial: Vec<String> },
    /// Sends `{"claim": ...}` and reads `{"class": "UFS" | "CFS" | "NFS"}`.
    External(Arc<Transport>),
}

impl Default for CheckworthinessPlugin {
    fn default() -> Self {
        CheckworthinessPlugin::Builtin { trivial: DEFAULT_TRIVIAL_LEXICON.iter().map(|s| s.to_string()).collect() }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Rule-based class: NFS without a content verb, number or capitalized
/// non-initial token; UFS when a trivial topic word occurs; CFS otherwise.
pub fn builtin_checkworthiness(claim: &str, trivial: &[String]) -> Checkworthiness {
    let ws = words(claim);
    let content_verb = ws.iter().any(|w| {
        let l = w.to_lowercase();
        !COPULAS.contains(&l.as_str()) && (IRREGULAR_VERBS.contains(&l.as_str()) || (l.len() > 3 && l.ends_with("ed")))
    });
    let number = ws.iter().any(|w| w.chars().any(|c| c.is_ascii_digit()));
    let entity = ws.iter().skip(1).any(|w| w.chars().next().is_some_and(char::is_uppercase));
    if !(content_verb || number || entity) {
        return Checkworthiness::Nfs;
    }
    if ws.iter().any(|w| trivial.iter().any(|t| t.eq_ignore_ascii_case(w))) {
        return Checkworthiness::Ufs;
    }
    Checkworthiness::Cfs
}

pub fn checkworthiness(claim: &ClaimRecord, plugin: &CheckworthinessPlugin) -> Result<Checkworthiness> {
    match plugin {
        CheckworthinessPlugin::Builtin { trivial } => Ok(builtin_checkworthiness(&claim.claim, trivial)),
        CheckworthinessPlugin::External(t) => {
            let reply = t.request(&json!({ "claim": claim.claim }))?;
            let class = reply
                .get("class")
                .and_then(|c| c.as_str())
                .ok_or_else(|| Error::Transport(format!("checkworthiness reply lacks `class`: {reply}")))?;
            class.parse()
        }
    }
}

/// Class shares of a batch, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckworthinessStats {
    pub total: usize,
    pub ufs_percent: f64,
    pub cfs_percent: f64,
    pub nfs_percent: f64,
}

pub fn checkworthiness_stats(claims: &[ClaimRecord]) -> CheckworthinessStats {
    let total = claims.len();
    let pct = |c: Checkworthiness| {
        if total == 0 {
            0.0
        } else {
            100.0 * claims.iter().filter(|r| r.checkworthiness == c).count() as f64 / total as f64
        }
    };
    CheckworthinessStats {
        total,
        ufs_percent: pct(Checkworthiness::Ufs),
        cfs_percent: pct(Checkworthiness::Cfs),
        nfs_percent: pct(Checkworthiness::Nfs),
    }
}

/// Responses that make a scripted client reproduce `world`'s claims and
/// confirm every constructed label.
pub fn script_for_world(world: &SynthWorld) -> Script {
    let mut script = Script::new();
    for cluster in &world.clusters {
        let claims: Vec<&ClaimRecord> = world.claims.iter().filter(|c| c.cluster_id == cluster.id).collect();
        for label in Label::ALL {
            let list: String = claims
                .iter()
                .filter(|c| c.label == label)
                .enumerate()
                .map(|(i, c)| format!("{}. {}\n", i + 1, c.claim))
                .collect();
            script.record(&prompts::claim_prompt(label, &cluster.summary), list);
        }
        for c in &claims {
            let mut word = c.label.as_str().to_string();
            word[..1].make_ascii_uppercase();
            script.record(&prompts::double_check_prompt(&cluster.documents, &c.claim), format!("{word}."));
        }
    }
    script
}

/// Generates, double-checks and classifies claims for every cluster.
/// Inconsistent labels are kept and flagged unless `drop_inconsistent`.
pub fn build_claims(
    clusters: &[DocumentCluster],
    client: &LlmClient,
    plugin: &CheckworthinessPlugin,
    verify: bool,
    drop_inconsistent: bool,
) -> Result<Vec<ClaimRecord>> {
    use rayon::prelude::*;
    let per_cluster: Vec<Result<Vec<ClaimRecord>>> = clusters
        .par_iter()
        .map(|cluster| {
            cluster.validate()?;
            let mut out = Vec::with_capacity(3 * CLAIMS_PER_LABEL);
            for label in Label::ALL {
                for mut c in generate_claims(cluster, label, client)? {
                    if verify {
                        verify_label(&mut c, cluster, client)?;
                    }
                    c.checkworthiness = checkworthiness(&c, plugin)?;
                    out.push(c);
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_cluster {
        all.extend(r?);
    }
    if drop_inconsistent {
        all.retain(ClaimRecord::is_consistent);
    }
    Ok(all)
}
