use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ChainError, ChainingBackend};
use crate::ingest::Corpus;
use crate::skill_kb::{check_chain_continuity, SkillId, SkillLibrary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backend: String,
    pub n_predictions: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

/// Next-action accuracy: every position `t ≥ 1` of every sequence is
/// predicted from the tokens before it. Predictions the backend cannot
/// make (unknown context, out-of-vocabulary reply) count as wrong.
pub fn evaluate(backend: &dyn ChainingBackend, test: &Corpus) -> Result<EvalReport, ChainError> {
    if test.is_empty() {
        return Err(ChainError::EmptyCorpus);
    }
    let per_seq = test
        .sequences()
        .par_iter()
        .map(|seq| {
            let mut n = 0;
            let mut correct = 0;
            for t in 1..seq.tokens.len() {
                n += 1;
                match backend.predict_next(&seq.tokens[..t]) {
                    Ok(p) if p.argmax == seq.tokens[t] => correct += 1,
                    Ok(_) => {}
                    Err(e) if e.is_prediction_miss() => {}
                    Err(e) => return Err(e),
                }
            }
            Ok((n, correct))
        })
        .collect::<Result<Vec<_>, ChainError>>()?;
    let (n_predictions, n_correct) = per_seq.iter().fold((0, 0), |(a, b), (n, c)| (a + n, b + c));
    let accuracy = if n_predictions == 0 { 0.0 } else { n_correct as f64 / n_predictions as f64 };
    Ok(EvalReport { backend: backend.name().to_owned(), n_predictions, n_correct, accuracy })
}

/// Greedy rollout from `start`. Each step takes the most probable token
/// that keeps the chain continuous; stops after the Finish sentinel.
pub fn chain_task(
    backend: &dyn ChainingBackend,
    lib: &SkillLibrary,
    start: &SkillId,
    max_len: usize,
) -> Result<Vec<SkillId>, ChainError> {
    if max_len == 0 {
        return Err(ChainError::InvalidConfig("max_len must be at least 1".into()));
    }
    if !backend.vocabulary().contains(start) {
        return Err(ChainError::UnknownToken(start.clone()));
    }
    let mut chain = vec![start.clone()];
    loop {
        let last = lib.require(chain.last().expect("chain is never empty"))?;
        if last.is_finish() {
            break;
        }
        if chain.len() >= max_len {
            return Err(ChainError::MaxLenExceeded { partial: chain });
        }
        let prediction = backend.predict_next(&chain)?;
        let mut next = None;
        for cand in prediction.ranked() {
            let Some(skill) = lib.get(cand) else { continue };
            if skill.is_start() {
                continue;
            }
            if lib.links(&last.id, cand)? {
                next = Some(cand.clone());
                break;
            }
        }
        match next {
            Some(n) => chain.push(n),
            None => return Err(ChainError::NoContinuousSuccessor { chain }),
        }
    }
    debug_assert!(check_chain_continuity(&chain, lib).map(|c| c.continuous).unwrap_or(false));
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaining::{fit_transition, PredictionResult};

    fn drywall() -> SkillLibrary {
        SkillLibrary::from_json(include_str!("../../fixtures/drywall.json")).unwrap()
    }

    struct Oracle(Vec<SkillId>, Vec<Vec<SkillId>>);

    impl ChainingBackend for Oracle {
        fn name(&self) -> &str {
            "oracle"
        }
        fn vocabulary(&self) -> &[SkillId] {
            &self.0
        }
        fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError> {
            let seq = self.1.iter().find(|s| s.starts_with(history) && s.len() > history.len()).unwrap();
            Ok(PredictionResult::point_mass(&self.0, &seq[history.len()]))
        }
    }

    struct Fixed(Vec<SkillId>, Vec<f64>);

    impl ChainingBackend for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn vocabulary(&self) -> &[SkillId] {
            &self.0
        }
        fn predict_next(&self, _history: &[SkillId]) -> Result<PredictionResult, ChainError> {
            Ok(PredictionResult::from_weights(&self.0, &self.1))
        }
    }

    fn seq(tokens: &[&str]) -> Vec<SkillId> {
        tokens.iter().map(|t| SkillId::from(*t)).collect()
    }

    #[test]
    fn oracle_scores_one_and_outsider_zero() {
        let lists = vec![seq(&["a", "b", "c"]), seq(&["c", "a"])];
        let corpus = Corpus::from_token_lists(&lists.iter().map(|l| l.iter().map(|t| t.to_string()).collect()).collect::<Vec<Vec<String>>>());
        let vocab = seq(&["a", "b", "c"]);
        let r = evaluate(&Oracle(vocab, lists), &corpus).unwrap();
        assert_eq!((r.n_predictions, r.n_correct, r.accuracy), (3, 3, 1.0));

        let outsider = Fixed(seq(&["zzz"]), vec![1.0]);
        assert_eq!(evaluate(&outsider, &corpus).unwrap().accuracy, 0.0);
        assert!(matches!(evaluate(&outsider, &Corpus::new(vec![])), Err(ChainError::EmptyCorpus)));
    }

    #[test]
    fn deterministic_successor_corpus_is_perfect() {
        let c = Corpus::from_token_lists(&[vec!["a", "b", "c", "d"], vec!["b", "c", "d"], vec!["a", "b"]]);
        let m = fit_transition(&c).unwrap();
        assert_eq!(evaluate(&m, &c).unwrap().accuracy, 1.0);
    }

    #[test]
    fn drywall_sequence_rolls_out_exactly() {
        let lib = drywall();
        let want = ["start", "prepare", "plan", "cut", "connect", "finish"];
        let m = fit_transition(&Corpus::from_token_lists(&[want.to_vec()])).unwrap();
        assert_eq!(chain_task(&m, &lib, &"start".into(), 10).unwrap(), seq(&want));
        assert_eq!(chain_task(&m, &lib, &"finish".into(), 1).unwrap(), seq(&["finish"]));
        assert!(matches!(chain_task(&m, &lib, &"start".into(), 3), Err(ChainError::MaxLenExceeded { partial }) if partial.len() == 3));
    }

    #[test]
    fn discontinuous_argmax_falls_back_to_second_choice() {
        let lib = drywall();
        // after start, cut is most likely but only prepare links
        let vocab = seq(&["cut", "finish", "prepare", "start"]);
        let b = Fixed(vocab, vec![0.6, 0.0, 0.3, 0.1]);
        match chain_task(&b, &lib, &"start".into(), 3) {
            // prepare ends where cut begins, so cut is accepted next
            Err(ChainError::MaxLenExceeded { partial }) => assert_eq!(partial, seq(&["start", "prepare", "cut"])),
            other => panic!("{other:?}"),
        }
    }
}
