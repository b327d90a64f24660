use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::encoding::ImageRecord;
use crate::labels::Label;
use crate::reward::NliPair;
use crate::rng::{seeded, stream, Rng};

use super::{builtin_checkworthiness, ClaimRecord, DocumentCluster, DEFAULT_TRIVIAL_LEXICON};

pub const FACTS_PER_CLUSTER: usize = 5;
pub const CLAIMS_PER_LABEL: usize = 10;
pub const IMAGE_FEATURE_DIM: usize = 8;
const PATCHES_PER_IMAGE: usize = 2;

const SUBJECTS: &[&str] = &[
    "mayor", "senator", "council", "union", "court", "police", "company", "bank", "museum", "airline", "army",
    "school", "farmers", "hospital", "studio", "ministry",
];
const VERBS: &[&str] = &[
    "approved", "rejected", "announced", "signed", "opened", "closed", "funded", "sold", "built", "won", "launched",
    "blocked", "expanded", "cancelled", "delayed", "revealed",
];
const OBJECTS: &[&str] = &[
    "budget", "bridge", "contract", "clinic", "election", "factory", "treaty", "vaccine", "merger", "stadium", "law",
    "pipeline", "report", "library", "airport", "festival",
];
const PLACES: &[&str] = &["paris", "lagos", "lima", "oslo", "delhi", "quito"];
const DAYS: &[&str] = &["monday", "tuesday", "friday", "sunday"];
const FILLERS: &[&str] = &[
    "officials said more details would follow .",
    "reporters gathered outside the building .",
    "the statement came late in the evening .",
    "critics called for a public debate .",
    "local residents followed the news closely .",
];

/// A subject with its verb and object. The world assigns one verb and one
/// object to each subject, so a subject identifies its fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub subject: &'static str,
    pub verb: &'static str,
    pub object: &'static str,
}

impl Fact {
    pub fn sentence(&self) -> String {
        format!("{} {} {} .", self.subject, self.verb, self.object)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub seed: u64,
    pub clusters: Vec<DocumentCluster>,
    pub claims: Vec<ClaimRecord>,
    /// Facts of each cluster, parallel to `clusters`.
    pub facts: Vec<Vec<Fact>>,
    /// Index into the cluster's facts for each claim, parallel to `claims`.
    pub claim_facts: Vec<usize>,
}

fn subject_code(subject: usize) -> Vec<f64> {
    let mut rng = seeded(0x1ace + subject as u64);
    (0..IMAGE_FEATURE_DIM).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn image_for(subject: usize, rng: &mut Rng) -> ImageRecord {
    let code = subject_code(subject);
    ImageRecord::new(
        (0..PATCHES_PER_IMAGE).map(|_| code.iter().map(|c| c + rng.gen_range(-0.1..0.1)).collect()).collect(),
    )
}

fn claim_text(fact: &Fact, label: Label, variant: usize, rng: &mut Rng) -> String {
    let Fact { subject: s, verb: v, object: o } = fact;
    match (label, variant % 2) {
        (Label::Entailment, 0) => format!("{s} {v} {o}"),
        (Label::Entailment, _) => format!("the {s} {v} the {o}"),
        (Label::Contradiction, 0) => format!("{s} never {v} {o}"),
        (Label::Contradiction, _) => format!("the {s} {v} no {o}"),
        (Label::Neutral, 0) => format!("{s} {v} {o} in {}", PLACES.choose(rng).expect("places")),
        (Label::Neutral, _) => format!("{s} {v} {o} on {}", DAYS.choose(rng).expect("days")),
    }
}

/// Deterministic offline corpus: `clusters` clusters of five facts spread
/// over two or three documents, one image per fact and 30 claims per
/// cluster (two per fact and label).
pub fn synth_world(seed: u64, clusters: usize) -> SynthWorld {
    let mut rng = seeded(seed);
    let mut verbs: Vec<usize> = (0..VERBS.len()).collect();
    let mut objects: Vec<usize> = (0..OBJECTS.len()).collect();
    verbs.shuffle(&mut rng);
    objects.shuffle(&mut rng);
    let trivial: Vec<String> = DEFAULT_TRIVIAL_LEXICON.iter().map(|s| s.to_string()).collect();

    let mut world = SynthWorld { seed, clusters: vec![], claims: vec![], facts: vec![], claim_facts: vec![] };
    for c in 0..clusters {
        let mut rng = stream(seed, c as u64 + 1);
        let id = format!("c{c:04}");
        let mut subjects: Vec<usize> = (0..SUBJECTS.len()).collect();
        subjects.shuffle(&mut rng);
        subjects.truncate(FACTS_PER_CLUSTER);
        let facts: Vec<Fact> = subjects
            .iter()
            .map(|&s| Fact { subject: SUBJECTS[s], verb: VERBS[verbs[s]], object: OBJECTS[objects[s]] })
            .collect();

        let n_docs = rng.gen_range(2..=3);
        let mut docs: Vec<Vec<String>> = vec![vec![]; n_docs];
        for (i, f) in facts.iter().enumerate() {
            // the first facts seed every document, the rest land anywhere
            let d = if i < n_docs { i } else { rng.gen_range(0..n_docs) };
            docs[d].push(f.sentence());
        }
        for doc in docs.iter_mut() {
            for _ in 0..rng.gen_range(1..=2) {
                let pos = rng.gen_range(0..=doc.len());
                doc.insert(pos, FILLERS.choose(&mut rng).expect("fillers").to_string());
            }
        }
        let images = subjects.iter().map(|&s| image_for(s, &mut rng)).collect();
        let summary = facts.iter().map(Fact::sentence).collect::<Vec<_>>().join(" ");
        world.clusters.push(DocumentCluster {
            id: id.clone(),
            documents: docs.into_iter().map(|d| d.join(" ")).collect(),
            images,
            summary,
        });

        for label in Label::ALL {
            for k in 0..CLAIMS_PER_LABEL {
                let fi = k % FACTS_PER_CLUSTER;
                let claim = claim_text(&facts[fi], label, k / FACTS_PER_CLUSTER, &mut rng);
                world.claims.push(ClaimRecord {
                    id: format!("{id}-{}-{}", label.as_str(), k + 1),
                    cluster_id: id.clone(),
                    checkworthiness: builtin_checkworthiness(&claim, &trivial),
                    claim,
                    label,
                    verified_label: None,
                });
                world.claim_facts.push(fi);
            }
        }
        world.facts.push(facts);
    }
    world
}

/// Classifier training pairs shaped like rollout evaluations: the premise
/// is a short summary made of a few fact sentences of the claim's cluster
/// (sometimes cut short), the hypothesis a claim. The claim keeps its label
/// only when its full fact sentence is in the premise; otherwise the pair is
/// neutral.
pub fn world_nli_pairs(world: &SynthWorld, n: usize, seed: u64) -> Vec<NliPair> {
    let mut rng = seeded(seed);
    let by_cluster: Vec<(usize, usize)> = {
        let ids: Vec<&str> = world.clusters.iter().map(|c| c.id.as_str()).collect();
        world
            .claims
            .iter()
            .enumerate()
            .map(|(i, c)| (ids.iter().position(|id| *id == c.cluster_id).expect("cluster"), i))
            .collect()
    };
    (0..n)
        .map(|_| {
            let (ci, claim_i) = by_cluster[rng.gen_range(0..by_cluster.len())];
            let claim = &world.claims[claim_i];
            let facts = &world.facts[ci];
            let target = world.claim_facts[claim_i];
            let include = rng.gen_bool(0.5);
            let mut chosen: Vec<usize> = (0..facts.len()).filter(|&f| f != target).collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(rng.gen_range(0..=2));
            if include {
                let pos = rng.gen_range(0..=chosen.len());
                chosen.insert(pos, target);
            }
            let mut premise: Vec<String> = chosen.iter().map(|&f| facts[f].sentence()).collect();
            let mut label = if include { claim.label } else { Label::Neutral };
            if include && rng.gen_bool(0.15) {
                // drop the object of the claim's fact
                let at = chosen.iter().position(|&f| f == target).expect("target");
                premise[at] = format!("{} {}", facts[target].subject, facts[target].verb);
                label = Label::Neutral;
            }
            NliPair::new(premise.join(" "), claim.claim.clone(), label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::tokenizer::tokenize;
    use crate::reward::{is_function_word, is_negation};
    use std::collections::HashSet;

    /// Token-containment entailment oracle.
    fn contained(claim: &str, doc: &str) -> bool {
        let words: HashSet<String> = tokenize(doc).into_iter().collect();
        let toks = tokenize(claim);
        !toks.iter().any(|t| is_negation(t)) && toks.iter().all(|t| is_function_word(t) || words.contains(t))
    }

    #[test]
    fn worlds_are_deterministic() {
        assert_eq!(synth_world(7, 2), synth_world(7, 2));
        assert_ne!(synth_world(7, 2).clusters, synth_world(8, 2).clusters);
    }

    #[test]
    fn every_cluster_has_ten_claims_per_label() {
        let w = synth_world(3, 4);
        for c in &w.clusters {
            c.validate().unwrap();
            assert!((2..=3).contains(&c.documents.len()));
            assert_eq!(c.images.len(), FACTS_PER_CLUSTER);
            for label in Label::ALL {
                assert_eq!(w.claims.iter().filter(|r| r.cluster_id == c.id && r.label == label).count(), 10);
            }
        }
    }

    #[test]
    fn containment_oracle_agrees_with_constructed_labels() {
        let w = synth_world(11, 6);
        for claim in &w.claims {
            let cluster = w.clusters.iter().find(|c| c.id == claim.cluster_id).unwrap();
            let any = cluster.documents.iter().any(|d| contained(&claim.claim, d));
            match claim.label {
                Label::Entailment => assert!(any, "{}", claim.claim),
                Label::Contradiction | Label::Neutral => assert!(!any, "{}", claim.claim),
            }
        }
    }

    #[test]
    fn nli_pairs_cover_all_labels() {
        let w = synth_world(2, 3);
        let pairs = world_nli_pairs(&w, 300, 1);
        for l in Label::ALL {
            assert!(pairs.iter().any(|p| p.label == l));
        }
    }
}
