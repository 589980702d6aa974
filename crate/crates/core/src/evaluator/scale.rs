use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::sha256_hex;
use crate::types::{Query, ToolCollection, ToolRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledCandidates {
    pub candidates: Vec<ToolRef>,
    /// Providers added as distractors, in the order drawn.
    pub added_providers: Vec<String>,
    /// Set when the query's category ran out and other categories were used.
    pub fallback: bool,
}

fn query_seed(seed: u64, query_id: &str) -> u64 {
    let h = sha256_hex(query_id.as_bytes());
    seed ^ u64::from_str_radix(&h[..16], 16).unwrap_or(0)
}

/// Adds whole distractor providers from the query's category until there
/// are at least `target_n` candidates. Originals keep their order and come
/// first.
pub fn scale_candidates(query: &Query, collection: &ToolCollection, target_n: usize, seed: u64) -> ScaledCandidates {
    let mut candidates = query.candidate_tools.clone();
    let mut added_providers = Vec::new();
    if target_n <= candidates.len() {
        if target_n < candidates.len() {
            log::warn!(
                "{}: target {target_n} is below the {} original candidates, leaving them unchanged",
                query.query_id,
                candidates.len()
            );
        }
        return ScaledCandidates {
            candidates,
            added_providers,
            fallback: false,
        };
    }
    let present: BTreeSet<&str> = query.candidate_tools.iter().map(|t| t.provider_id.as_str()).collect();
    let category = query
        .candidate_tools
        .first()
        .and_then(|t| collection.category_of_provider(&t.provider_id))
        .unwrap_or(query.category.as_str())
        .to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, &query.query_id));
    let (mut same, mut other): (Vec<String>, Vec<String>) = collection
        .providers()
        .into_iter()
        .filter(|p| !present.contains(p.as_str()))
        .partition(|p| collection.category_of_provider(p) == Some(category.as_str()));
    same.shuffle(&mut rng);
    other.shuffle(&mut rng);
    let mut seen: BTreeSet<ToolRef> = candidates.iter().cloned().collect();
    let mut fallback = false;
    for (p, is_other) in same.into_iter().map(|p| (p, false)).chain(other.into_iter().map(|p| (p, true))) {
        if candidates.len() >= target_n {
            break;
        }
        fallback |= is_other;
        for t in collection.provider_tools(&p) {
            if seen.insert(t.tool_ref()) {
                candidates.push(t.tool_ref());
            }
        }
        added_providers.push(p);
    }
    if candidates.len() < target_n {
        log::warn!("{}: only {} tools exist, wanted {target_n}", query.query_id, candidates.len());
    }
    ScaledCandidates {
        candidates,
        added_providers,
        fallback,
    }
}

/// Applies [`scale_candidates`] to every query.
pub fn scale_queries(queries: &[Query], collection: &ToolCollection, target_n: usize, seed: u64) -> Vec<Query> {
    queries
        .iter()
        .map(|q| {
            let s = scale_candidates(q, collection, target_n, seed);
            let mut q = q.clone();
            q.candidate_tools = s.candidates;
            if s.fallback {
                q.extras.insert("scale_fallback".into(), true.into());
            }
            q
        })
        .collect()
}
