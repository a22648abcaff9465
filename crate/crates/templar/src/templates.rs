//! Template pool: state chains harvested from Viterbi segmentations of
//! unpaired text, and sampling of concrete templates (chains plus durations)
//! from that pool.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProtectedSpans, TokenSeq, UnpairedExample};
use crate::error::{Error, Result};
use crate::nhsmm::{viterbi_segment, HsmmParams};

/// A concrete template: ordered `(state, duration)` entries. Adjacent states
/// always differ and every duration lies in `1..=D`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub entries: Vec<(usize, usize)>,
}

impl Template {
    /// Total response length the template prescribes.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|&(_, l)| l).sum()
    }

    /// The duration-free state chain.
    pub fn chain(&self) -> Vec<usize> {
        self.entries.iter().map(|&(z, _)| z).collect()
    }
}

/// Multiset of state chains with provenance counts, kept in lexicographic
/// chain order so every traversal is deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePool {
    chains: Vec<(Vec<usize>, usize)>,
    occurrences: usize,
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    chain: Vec<usize>,
    count: usize,
}

impl TemplatePool {
    pub fn from_counts(counts: BTreeMap<Vec<usize>, usize>) -> Result<Self> {
        let chains: Vec<(Vec<usize>, usize)> =
            counts.into_iter().filter(|&(_, c)| c > 0).collect();
        let occurrences = chains.iter().map(|&(_, c)| c).sum();
        if occurrences == 0 {
            return Err(Error::EmptyPool);
        }
        Ok(TemplatePool { chains, occurrences })
    }

    /// Distinct chains with their multiplicities, lexicographically ordered.
    pub fn chains(&self) -> &[(Vec<usize>, usize)] {
        &self.chains
    }

    /// Total chain occurrences (sum of multiplicities).
    pub fn occurrences(&self) -> usize {
        self.occurrences
    }

    /// One `{"chain": [...], "count": n}` JSON object per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (chain, count) in &self.chains {
            let line = serde_json::to_string(&PoolLine { chain: chain.clone(), count: *count })
                .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut counts = BTreeMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PoolLine = serde_json::from_str(&line)
                .map_err(|e| Error::parse(i + 1, e.to_string()))?;
            if parsed.chain.is_empty() {
                return Err(Error::parse(i + 1, "empty chain"));
            }
            *counts.entry(parsed.chain).or_insert(0) += parsed.count;
        }
        TemplatePool::from_counts(counts)
    }
}

/// Segment every sentence with the constrained Viterbi decoder and collect
/// the duration-free state chains, retaining duplicates with multiplicity.
/// Sentences whose constraints admit no segmentation are skipped with a
/// warning; if none survive the pool is empty and that is an error.
pub fn build_pool(hsmm: &HsmmParams, corpus: &[UnpairedExample]) -> Result<TemplatePool> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for ex in corpus {
        match viterbi_segment(hsmm, &ex.text, &ex.spans) {
            Ok(segs) => {
                let chain: Vec<usize> = segs.iter().map(|&(z, _)| z).collect();
                *counts.entry(chain).or_insert(0) += 1;
            }
            Err(Error::InfeasibleConstraints) => {
                log::warn!("skipping sentence with infeasible span constraints");
            }
            Err(e) => return Err(e),
        }
    }
    TemplatePool::from_counts(counts)
}

/// Draw a chain uniformly over pool occurrences (multiplicity-weighted), then
/// draw each duration independently uniform over `1..=D`.
pub fn sample_template<R: Rng>(
    pool: &TemplatePool,
    hsmm: &HsmmParams,
    rng: &mut R,
) -> Result<Template> {
    if pool.occurrences == 0 {
        return Err(Error::EmptyPool);
    }
    let mut pick = rng.gen_range(0..pool.occurrences);
    let mut chosen: &[usize] = &pool.chains[0].0;
    for (chain, count) in &pool.chains {
        if pick < *count {
            chosen = chain;
            break;
        }
        pick -= count;
    }
    let entries = chosen
        .iter()
        .map(|&z| (z, rng.gen_range(1..=hsmm.d_max)))
        .collect();
    Ok(Template { entries })
}

/// The template a known response realizes: its constrained Viterbi
/// segmentation, states and durations both kept.
pub fn infer_template(
    hsmm: &HsmmParams,
    response: &TokenSeq,
    spans: &ProtectedSpans,
) -> Result<Template> {
    let segs = viterbi_segment(hsmm, response, spans)?;
    Ok(Template { entries: segs })
}
