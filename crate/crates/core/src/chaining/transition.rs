use std::collections::BTreeSet;
use std::io::Read;

use serde::Serialize;

use super::{index_of, ChainError, ChainingBackend, PredictionResult};
use crate::ingest::Corpus;
use crate::numfmt;
use crate::skill_kb::SkillId;

/// First-order transition statistics: `probs[i][j]` is the empirical
/// frequency of `j` directly following `i`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitionModel {
    vocabulary: Vec<SkillId>,
    counts: Vec<Vec<u64>>,
    probs: Vec<Vec<f64>>,
}

impl TransitionModel {
    /// Builds a model from raw counts; rows without counts become uniform.
    pub fn from_counts(vocabulary: Vec<SkillId>, counts: Vec<Vec<u64>>) -> Result<Self, ChainError> {
        let n = vocabulary.len();
        if n == 0 {
            return Err(ChainError::EmptyCorpus);
        }
        if vocabulary.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(ChainError::InvalidConfig("vocabulary has duplicate tokens".into()));
        }
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(ChainError::InvalidConfig(format!("counts must be {n}x{n}")));
        }
        let probs = counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    vec![1.0 / n as f64; n]
                } else {
                    row.iter().map(|&c| c as f64 / total as f64).collect()
                }
            })
            .collect();
        Ok(TransitionModel { vocabulary, counts, probs })
    }

    pub fn vocabulary(&self) -> &[SkillId] {
        &self.vocabulary
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn prob(&self, from: &SkillId, to: &SkillId) -> Result<f64, ChainError> {
        Ok(self.probs[index_of(&self.vocabulary, from)?][index_of(&self.vocabulary, to)?])
    }
}

impl ChainingBackend for TransitionModel {
    fn name(&self) -> &str {
        "transition"
    }

    fn vocabulary(&self) -> &[SkillId] {
        &self.vocabulary
    }

    fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError> {
        let last = history.last().ok_or(ChainError::EmptyHistory)?;
        let i = index_of(&self.vocabulary, last)?;
        Ok(PredictionResult::from_weights(&self.vocabulary, &self.probs[i]))
    }
}

pub fn fit_transition(corpus: &Corpus) -> Result<TransitionModel, ChainError> {
    fit_transition_with_vocabulary(corpus, corpus.vocabulary().iter().cloned().collect())
}

/// Like [`fit_transition`] but over a caller-chosen vocabulary order,
/// which must contain every corpus token.
pub fn fit_transition_with_vocabulary(corpus: &Corpus, vocabulary: Vec<SkillId>) -> Result<TransitionModel, ChainError> {
    if corpus.is_empty() {
        return Err(ChainError::EmptyCorpus);
    }
    let n = vocabulary.len();
    let mut counts = vec![vec![0u64; n]; n];
    for seq in corpus.sequences() {
        for pair in seq.tokens.windows(2) {
            let i = index_of(&vocabulary, &pair[0])?;
            let j = index_of(&vocabulary, &pair[1])?;
            counts[i][j] += 1;
        }
        if let Some(t) = seq.tokens.first() {
            index_of(&vocabulary, t)?;
        }
    }
    TransitionModel::from_counts(vocabulary, counts)
}

/// CSV heatmap: a header row of column tokens, then one row per source
/// token with its probabilities at 12 significant digits.
pub fn transition_heatmap(model: &TransitionModel) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec![String::from("from\\to")];
    header.extend(model.vocabulary.iter().map(|v| v.to_string()));
    w.write_record(&header).expect("write to memory");
    for (tok, row) in model.vocabulary.iter().zip(&model.probs) {
        let mut rec = vec![tok.to_string()];
        rec.extend(row.iter().map(|p| numfmt::sig12(*p)));
        w.write_record(&rec).expect("write to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

/// Reads a heatmap back into its vocabulary and probability matrix.
pub fn parse_heatmap(reader: impl Read) -> Result<(Vec<SkillId>, Vec<Vec<f64>>), ChainError> {
    let bad = |m: String| ChainError::ModelFile(format!("heatmap: {m}"));
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let vocabulary: Vec<SkillId> = header.iter().skip(1).map(SkillId::from).collect();
    let mut probs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != vocabulary.len() + 1 {
            return Err(bad(format!("row {} has {} cells", i + 1, rec.len())));
        }
        if vocabulary.get(i).map(SkillId::as_str) != Some(&rec[0]) {
            return Err(bad(format!("row {} label `{}` does not match the header", i + 1, &rec[0])));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|c| numfmt::parse(c).map_err(|e| bad(format!("`{c}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        probs.push(row);
    }
    if probs.len() != vocabulary.len() {
        return Err(bad(format!("{} rows for {} tokens", probs.len(), vocabulary.len())));
    }
    Ok((vocabulary, probs))
}

/// True when neither `a→b` nor `b→a` exceeds `epsilon`.
pub fn adjacency_hypothesis(model: &TransitionModel, a: &SkillId, b: &SkillId, epsilon: f64) -> Result<bool, ChainError> {
    Ok(model.prob(a, b)? <= epsilon && model.prob(b, a)? <= epsilon)
}
