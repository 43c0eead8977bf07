//! JSON persistence for fitted models. Real matrices are stored as
//! decimal strings with 17 significant digits so they reload bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChainError, ChainingBackend, ChowLiuTree, HmmModel, TransitionModel, TreeEdge};
use crate::numfmt;
use crate::skill_kb::SkillId;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Document {
    Transition {
        vocabulary: Vec<SkillId>,
        counts: Vec<Vec<u64>>,
        probs: Vec<Vec<String>>,
    },
    ChowLiu {
        vocabulary: Vec<SkillId>,
        n_examples: u64,
        presence: Vec<Vec<u64>>,
        root: SkillId,
        edges: Vec<EdgeDoc>,
    },
    Hmm {
        vocabulary: Vec<SkillId>,
        n_states: usize,
        a: Vec<Vec<String>>,
        b: Vec<Vec<String>>,
        pi: Vec<String>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    a: SkillId,
    b: SkillId,
    weight: String,
}

fn row_out(r: &[f64]) -> Vec<String> {
    r.iter().map(|x| numfmt::exact(*x)).collect()
}

fn mat_out(m: &[Vec<f64>]) -> Vec<Vec<String>> {
    m.iter().map(|r| row_out(r)).collect()
}

fn row_in(r: &[String]) -> Result<Vec<f64>, ChainError> {
    r.iter()
        .map(|s| numfmt::parse(s).map_err(|e| ChainError::ModelFile(format!("number `{s}`: {e}"))))
        .collect()
}

fn mat_in(m: &[Vec<String>]) -> Result<Vec<Vec<f64>>, ChainError> {
    m.iter().map(|r| row_in(r)).collect()
}

fn position(vocabulary: &[SkillId], t: &SkillId) -> Result<usize, ChainError> {
    vocabulary
        .iter()
        .position(|v| v == t)
        .ok_or_else(|| ChainError::ModelFile(format!("`{t}` is not in the model vocabulary")))
}

/// Any fitted model, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum FittedModel {
    Transition(TransitionModel),
    ChowLiu(ChowLiuTree),
    Hmm(HmmModel),
}

impl FittedModel {
    pub fn backend(&self) -> &dyn ChainingBackend {
        match self {
            FittedModel::Transition(m) => m,
            FittedModel::ChowLiu(m) => m,
            FittedModel::Hmm(m) => m,
        }
    }

    pub fn to_json(&self) -> String {
        let doc = match self {
            FittedModel::Transition(m) => Document::Transition {
                vocabulary: m.vocabulary().to_vec(),
                counts: m.counts().to_vec(),
                probs: mat_out(m.probs()),
            },
            FittedModel::ChowLiu(t) => Document::ChowLiu {
                vocabulary: t.vocabulary.clone(),
                n_examples: t.n_examples,
                presence: t.presence.clone(),
                root: t.root().clone(),
                edges: t
                    .edges
                    .iter()
                    .map(|e| EdgeDoc {
                        a: t.vocabulary[e.a].clone(),
                        b: t.vocabulary[e.b].clone(),
                        weight: numfmt::exact(e.weight),
                    })
                    .collect(),
            },
            FittedModel::Hmm(m) => Document::Hmm {
                vocabulary: m.vocabulary().to_vec(),
                n_states: m.n_states(),
                a: mat_out(m.a()),
                b: mat_out(m.b()),
                pi: row_out(m.pi()),
            },
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("model document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ChainError> {
        let doc: Document = serde_json::from_str(text).map_err(|e| ChainError::ModelFile(e.to_string()))?;
        Ok(match doc {
            Document::Transition { vocabulary, counts, probs } => {
                let m = TransitionModel::from_counts(vocabulary, counts)?;
                let stored = mat_in(&probs)?;
                if stored != m.probs() {
                    return Err(ChainError::ModelFile("stored probabilities disagree with the counts".into()));
                }
                FittedModel::Transition(m)
            }
            Document::ChowLiu { vocabulary, n_examples, presence, root, edges } => {
                let edges = edges
                    .iter()
                    .map(|e| {
                        Ok(TreeEdge {
                            a: position(&vocabulary, &e.a)?,
                            b: position(&vocabulary, &e.b)?,
                            weight: numfmt::parse(&e.weight)
                                .map_err(|err| ChainError::ModelFile(format!("weight `{}`: {err}", e.weight)))?,
                        })
                    })
                    .collect::<Result<Vec<_>, ChainError>>()?;
                let root = position(&vocabulary, &root)?;
                FittedModel::ChowLiu(ChowLiuTree::from_parts(vocabulary, edges, root, n_examples, presence)?)
            }
            Document::Hmm { vocabulary, n_states, a, b, pi } => {
                let m = HmmModel::new(vocabulary, mat_in(&a)?, mat_in(&b)?, row_in(&pi)?)
                    .map_err(|e| ChainError::ModelFile(e.to_string()))?;
                if m.n_states() != n_states {
                    return Err(ChainError::ModelFile(format!("n_states {n_states} but pi has {}", m.n_states())));
                }
                FittedModel::Hmm(m)
            }
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ChainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ChainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
