//! Macro-level skill chaining: next-action models behind one interface,
//! an accuracy harness and a continuity-enforcing chain rollout.

mod chain;
mod chow_liu;
mod hmm;
mod llm_backend;
mod model_file;
mod mutual_info;
mod transition;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skill_kb::{KbError, SkillId};

pub use chain::{chain_task, evaluate, EvalReport};
pub use chow_liu::{fit_chow_liu, ChowLiuTree, TreeEdge};
pub use hmm::{
    hmm_fit, hmm_fit_traced, hmm_posterior, hmm_predict_next, HmmConfig, HmmFit, HmmModel, HmmPredictor,
    PROBABILITY_FLOOR,
};
pub use llm_backend::{llm_predict_next, render_next_action_prompt, LlmChainer};
pub use model_file::FittedModel;
pub use mutual_info::mutual_information;
pub use transition::{adjacency_hypothesis, fit_transition, fit_transition_with_vocabulary, parse_heatmap, transition_heatmap, TransitionModel};

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("contingency table is empty")]
    EmptyTable,
    #[error("structure learning needs at least two distinct tokens")]
    SingletonVocabulary,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token `{0}` is not in the model vocabulary")]
    UnknownToken(SkillId),
    #[error("prediction needs a non-empty history")]
    EmptyHistory,
    #[error("observation sequence has zero likelihood under the model")]
    ZeroLikelihood,
    #[error("chaining backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("language model answered `{0}`, which is not in the vocabulary")]
    HallucinatedToken(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("no vocabulary token continues the chain after `{}`", chain.last().map(SkillId::as_str).unwrap_or(""))]
    NoContinuousSuccessor { chain: Vec<SkillId> },
    #[error("chain reached {} skills without finishing", partial.len())]
    MaxLenExceeded { partial: Vec<SkillId> },
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ChainError {
    /// Errors that mean "this backend could not predict here" rather than
    /// "the harness cannot continue".
    pub fn is_prediction_miss(&self) -> bool {
        matches!(
            self,
            ChainError::UnknownToken(_) | ChainError::HallucinatedToken(_) | ChainError::ZeroLikelihood
        )
    }
}

impl From<crate::llm::LlmError> for ChainError {
    fn from(e: crate::llm::LlmError) -> Self {
        match e {
            crate::llm::LlmError::Unavailable(m) => ChainError::BackendUnavailable(m),
            crate::llm::LlmError::Transport(m) => ChainError::BackendUnavailable(m),
        }
    }
}

/// Next-token distribution over a model vocabulary, in vocabulary order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub distribution: Vec<(SkillId, f64)>,
    pub argmax: SkillId,
}

impl PredictionResult {
    /// Normalizes non-negative weights; all-zero weights become uniform.
    pub fn from_weights(vocabulary: &[SkillId], weights: &[f64]) -> Self {
        assert_eq!(vocabulary.len(), weights.len());
        assert!(!vocabulary.is_empty(), "prediction over an empty vocabulary");
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = if total > 0.0 && total.is_finite() {
            weights.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / weights.len() as f64; weights.len()]
        };
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        PredictionResult {
            distribution: vocabulary.iter().cloned().zip(probs).collect(),
            argmax: vocabulary[best].clone(),
        }
    }

    pub fn point_mass(vocabulary: &[SkillId], token: &SkillId) -> Self {
        let weights: Vec<f64> = vocabulary.iter().map(|v| if v == token { 1.0 } else { 0.0 }).collect();
        Self::from_weights(vocabulary, &weights)
    }

    pub fn prob(&self, token: &SkillId) -> f64 {
        self.distribution.iter().find(|(t, _)| t == token).map_or(0.0, |(_, p)| *p)
    }

    /// Tokens by decreasing probability, ties in vocabulary order.
    pub fn ranked(&self) -> Vec<&SkillId> {
        let mut idx: Vec<usize> = (0..self.distribution.len()).collect();
        idx.sort_by(|&i, &j| self.distribution[j].1.total_cmp(&self.distribution[i].1));
        idx.into_iter().map(|i| &self.distribution[i].0).collect()
    }
}

/// A fitted next-action model.
pub trait ChainingBackend: Send + Sync {
    fn name(&self) -> &str;

    fn vocabulary(&self) -> &[SkillId];

    /// Distribution of the token following `history`.
    fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError>;
}

impl<T: ChainingBackend + ?Sized> ChainingBackend for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn vocabulary(&self) -> &[SkillId] {
        (**self).vocabulary()
    }
    fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError> {
        (**self).predict_next(history)
    }
}

impl<T: ChainingBackend + ?Sized> ChainingBackend for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn vocabulary(&self) -> &[SkillId] {
        (**self).vocabulary()
    }
    fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError> {
        (**self).predict_next(history)
    }
}

fn index_of(vocabulary: &[SkillId], token: &SkillId) -> Result<usize, ChainError> {
    vocabulary
        .iter()
        .position(|v| v == token)
        .ok_or_else(|| ChainError::UnknownToken(token.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_break_by_vocabulary_order() {
        let v: Vec<SkillId> = ["a", "b", "c"].map(Into::into).to_vec();
        let p = PredictionResult::from_weights(&v, &[1.0, 2.0, 2.0]);
        assert_eq!(p.argmax.as_str(), "b");
        assert_eq!(p.ranked(), [&v[1], &v[2], &v[0]]);
        let u = PredictionResult::from_weights(&v, &[0.0; 3]);
        assert_eq!(u.argmax.as_str(), "a");
        assert!((u.distribution.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
