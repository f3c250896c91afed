//! Downstream uses of the neuron decompositions.

pub mod concepts;
pub mod metrics;
pub mod mining;
pub mod segment;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::TextPool;

/// What a ranking was computed for.
#[derive(Debug, Clone, PartialEq)]
pub enum RankingContext {
    Direction(ndarray::Array1<f64>),
    Image(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankEntry {
    /// Row of the text pool.
    pub phrase: usize,
    pub score: f64,
}

/// Phrases sorted by score, highest first (ties: lower phrase index first).
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseRanking {
    pub entries: Vec<RankEntry>,
    pub context: RankingContext,
}

impl PhraseRanking {
    pub(crate) fn from_scores(
        scores: std::collections::BTreeMap<usize, f64>,
        context: RankingContext,
    ) -> Self {
        let mut entries: Vec<RankEntry> = scores
            .into_iter()
            .map(|(phrase, score)| RankEntry { phrase, score })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.phrase.cmp(&b.phrase)));
        PhraseRanking { entries, context }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    /// Score of a phrase, or `None` if it is not ranked.
    pub fn score_of(&self, phrase: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.phrase == phrase)
            .map(|e| e.score)
    }
}

/// One line of a ranking JSONL export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub phrase: String,
    pub score: f64,
    pub sign: String,
}

pub fn write_ranking(path: &Path, ranking: &PhraseRanking, pool: &TextPool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in &ranking.entries {
        let rec = RankingRecord {
            phrase: pool.phrases[e.phrase].clone(),
            score: e.score,
            sign: if e.score < 0.0 { "-" } else { "+" }.to_string(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
