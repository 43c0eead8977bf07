use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{index_of, ChainError, ChainingBackend, PredictionResult};
use crate::ingest::Corpus;
use crate::skill_kb::SkillId;

/// Added to every re-estimated entry before row normalization.
pub const PROBABILITY_FLOOR: f64 = 1e-10;

const ROW_TOLERANCE: f64 = 1e-9;

/// Discrete hidden Markov model over a token vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HmmModel {
    vocabulary: Vec<SkillId>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    pi: Vec<f64>,
}

fn check_row(row: &[f64], what: &str) -> Result<(), ChainError> {
    if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(ChainError::InvalidConfig(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(ChainError::InvalidConfig(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl HmmModel {
    pub fn new(vocabulary: Vec<SkillId>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, pi: Vec<f64>) -> Result<Self, ChainError> {
        let n = pi.len();
        let v = vocabulary.len();
        if n == 0 || v == 0 {
            return Err(ChainError::InvalidConfig("model needs at least one state and one token".into()));
        }
        if a.len() != n || a.iter().any(|r| r.len() != n) {
            return Err(ChainError::InvalidConfig(format!("A must be {n}x{n}")));
        }
        if b.len() != n || b.iter().any(|r| r.len() != v) {
            return Err(ChainError::InvalidConfig(format!("B must be {n}x{v}")));
        }
        check_row(&pi, "pi")?;
        for (i, r) in a.iter().enumerate() {
            check_row(r, &format!("A row {i}"))?;
        }
        for (i, r) in b.iter().enumerate() {
            check_row(r, &format!("B row {i}"))?;
        }
        Ok(HmmModel { vocabulary, a, b, pi })
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn vocabulary(&self) -> &[SkillId] {
        &self.vocabulary
    }

    pub fn a(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[Vec<f64>] {
        &self.b
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    fn encode(&self, observed: &[SkillId]) -> Result<Vec<usize>, ChainError> {
        if observed.is_empty() {
            return Err(ChainError::EmptyHistory);
        }
        observed.iter().map(|t| index_of(&self.vocabulary, t)).collect()
    }

    /// Scaled forward pass: normalized alphas and the scale factors.
    fn forward(&self, obs: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>), ChainError> {
        let n = self.n_states();
        let mut alphas = Vec::with_capacity(obs.len());
        let mut scales = Vec::with_capacity(obs.len());
        let mut prev: Option<&Vec<f64>> = None;
        for &o in obs {
            let mut alpha: Vec<f64> = match prev {
                None => (0..n).map(|s| self.pi[s] * self.b[s][o]).collect(),
                Some(p) => (0..n)
                    .map(|s| (0..n).map(|r| p[r] * self.a[r][s]).sum::<f64>() * self.b[s][o])
                    .collect(),
            };
            let c: f64 = alpha.iter().sum();
            if c <= 0.0 || !c.is_finite() {
                return Err(ChainError::ZeroLikelihood);
            }
            alpha.iter_mut().for_each(|x| *x /= c);
            alphas.push(alpha);
            scales.push(c);
            prev = alphas.last();
        }
        Ok((alphas, scales))
    }

    fn backward(&self, obs: &[usize], scales: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let t_len = obs.len();
        let mut betas = vec![vec![1.0; n]; t_len];
        for t in (0..t_len.saturating_sub(1)).rev() {
            let next = obs[t + 1];
            for s in 0..n {
                betas[t][s] = (0..n).map(|r| self.a[s][r] * self.b[r][next] * betas[t + 1][r]).sum::<f64>()
                    / scales[t + 1];
            }
        }
        betas
    }

    /// Natural-log likelihood of one observation sequence.
    pub fn log_likelihood(&self, observed: &[SkillId]) -> Result<f64, ChainError> {
        let obs = self.encode(observed)?;
        let (_, scales) = self.forward(&obs)?;
        Ok(scales.iter().map(|c| c.ln()).sum())
    }

    fn predictive(&self, filtered: &[f64], literal: bool) -> Vec<f64> {
        let n = self.n_states();
        let state: Vec<f64> = if literal {
            filtered.to_vec()
        } else {
            (0..n).map(|s2| (0..n).map(|s| filtered[s] * self.a[s][s2]).sum()).collect()
        };
        (0..self.vocabulary.len()).map(|o| (0..n).map(|s| state[s] * self.b[s][o]).sum()).collect()
    }
}

/// State distribution at the final time given the whole observation
/// (normalized αβ at the last step, which equals the filtered α there).
pub fn hmm_posterior(model: &HmmModel, observed: &[SkillId]) -> Result<Vec<f64>, ChainError> {
    let obs = model.encode(observed)?;
    let (alphas, scales) = model.forward(&obs)?;
    let betas = model.backward(&obs, &scales);
    let t = obs.len() - 1;
    let mut g: Vec<f64> = alphas[t].iter().zip(&betas[t]).map(|(a, b)| a * b).collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|x| *x /= s);
    Ok(g)
}

/// Next-token distribution. `literal` composes the emission matrix
/// directly with the final-state posterior; otherwise one transition step
/// is applied first.
pub fn hmm_predict_next(model: &HmmModel, observed: &[SkillId], literal: bool) -> Result<PredictionResult, ChainError> {
    let post = hmm_posterior(model, observed)?;
    Ok(PredictionResult::from_weights(&model.vocabulary, &model.predictive(&post, literal)))
}

/// An [`HmmModel`] exposed as a chaining backend with a fixed variant.
#[derive(Clone, Debug)]
pub struct HmmPredictor {
    pub model: HmmModel,
    pub literal: bool,
}

impl ChainingBackend for HmmPredictor {
    fn name(&self) -> &str {
        if self.literal { "hmm_literal" } else { "hmm" }
    }

    fn vocabulary(&self) -> &[SkillId] {
        &self.model.vocabulary
    }

    fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError> {
        hmm_predict_next(&self.model, history, self.literal)
    }
}

impl ChainingBackend for HmmModel {
    fn name(&self) -> &str {
        "hmm"
    }

    fn vocabulary(&self) -> &[SkillId] {
        &self.vocabulary
    }

    fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError> {
        hmm_predict_next(self, history, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmmConfig {
    pub n_states: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        HmmConfig { n_states: 2, max_iters: 100, tol: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct HmmFit {
    pub model: HmmModel,
    /// Corpus log-likelihood (natural log) under the parameters entering
    /// each iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
}

fn dirichlet_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len).map(|_| -(1.0 - rng.random::<f64>()).ln() + f64::MIN_POSITIVE).collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
    row
}

fn floor_normalize(row: &mut [f64]) {
    row.iter_mut().for_each(|x| *x += PROBABILITY_FLOOR);
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
}

pub fn hmm_fit(corpus: &Corpus, config: &HmmConfig) -> Result<HmmModel, ChainError> {
    Ok(hmm_fit_traced(corpus, config)?.model)
}

/// Baum-Welch from a seeded Dirichlet(1) initialization.
pub fn hmm_fit_traced(corpus: &Corpus, config: &HmmConfig) -> Result<HmmFit, ChainError> {
    if corpus.is_empty() {
        return Err(ChainError::EmptyCorpus);
    }
    if config.n_states == 0 {
        return Err(ChainError::InvalidConfig("n_states must be at least 1".into()));
    }
    if !(config.tol.is_finite() && config.tol >= 0.0) {
        return Err(ChainError::InvalidConfig("tol must be finite and non-negative".into()));
    }
    let vocabulary: Vec<SkillId> = corpus.vocabulary().iter().cloned().collect();
    let n = config.n_states;
    let v = vocabulary.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pi = dirichlet_row(&mut rng, n);
    let a = (0..n).map(|_| dirichlet_row(&mut rng, n)).collect();
    let b = (0..n).map(|_| dirichlet_row(&mut rng, v)).collect();
    let mut model = HmmModel { vocabulary, a, b, pi };
    let seqs: Vec<Vec<usize>> = corpus
        .sequences()
        .iter()
        .map(|s| model.encode(&s.tokens))
        .collect::<Result<_, _>>()?;

    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < config.max_iters {
        let mut pi_acc = vec![0.0; n];
        let mut a_num = vec![vec![0.0; n]; n];
        let mut a_den = vec![0.0; n];
        let mut b_num = vec![vec![0.0; v]; n];
        let mut b_den = vec![0.0; n];
        let mut ll = 0.0;
        for obs in &seqs {
            let (alphas, scales) = model.forward(obs)?;
            let betas = model.backward(obs, &scales);
            ll += scales.iter().map(|c| c.ln()).sum::<f64>();
            for t in 0..obs.len() {
                let mut gamma: Vec<f64> = (0..n).map(|s| alphas[t][s] * betas[t][s]).collect();
                let g: f64 = gamma.iter().sum();
                gamma.iter_mut().for_each(|x| *x /= g);
                if t == 0 {
                    (0..n).for_each(|s| pi_acc[s] += gamma[s]);
                }
                for s in 0..n {
                    b_num[s][obs[t]] += gamma[s];
                    b_den[s] += gamma[s];
                }
                if t + 1 < obs.len() {
                    let next = obs[t + 1];
                    for r in 0..n {
                        a_den[r] += gamma[r];
                        for s in 0..n {
                            a_num[r][s] += alphas[t][r] * model.a[r][s] * model.b[s][next] * betas[t + 1][s]
                                / scales[t + 1];
                        }
                    }
                }
            }
        }
        history.push(ll);
        if let [.., prev, cur] = history[..] {
            if cur - prev < config.tol {
                break;
            }
        }

        let mut pi = pi_acc;
        floor_normalize(&mut pi);
        let mut a = model.a.clone();
        for r in 0..n {
            if a_den[r] > 0.0 {
                a[r] = a_num[r].clone();
                floor_normalize(&mut a[r]);
            }
        }
        let mut b = model.b.clone();
        for s in 0..n {
            if b_den[s] > 0.0 {
                b[s] = b_num[s].clone();
                floor_normalize(&mut b[s]);
            }
        }
        model = HmmModel { vocabulary: model.vocabulary, a, b, pi };
        iterations += 1;
    }
    Ok(HmmFit { model, log_likelihoods: history, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<SkillId> {
        v.iter().map(|s| SkillId::from(*s)).collect()
    }

    /// Unscaled α·β at the last step, computed without normalization.
    fn unscaled_posterior(m: &HmmModel, obs: &[usize]) -> Vec<f64> {
        let n = m.n_states();
        let mut alpha: Vec<f64> = (0..n).map(|s| m.pi[s] * m.b[s][obs[0]]).collect();
        for &o in &obs[1..] {
            alpha = (0..n).map(|s| (0..n).map(|r| alpha[r] * m.a[r][s]).sum::<f64>() * m.b[s][o]).collect();
        }
        let z: f64 = alpha.iter().sum();
        alpha.iter().map(|x| x / z).collect()
    }

    fn random_model(seed: u64, n: usize, v: usize) -> HmmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HmmModel::new(
            ids(&["a", "b", "c", "d", "e"][..v]),
            (0..n).map(|_| dirichlet_row(&mut rng, n)).collect(),
            (0..n).map(|_| dirichlet_row(&mut rng, v)).collect(),
            dirichlet_row(&mut rng, n),
        )
        .unwrap()
    }

    #[test]
    fn single_state_fit_is_unigram() {
        let c = Corpus::from_token_lists(&[vec!["a", "b", "a"], vec!["a", "c"]]);
        let m = hmm_fit(&c, &HmmConfig { n_states: 1, max_iters: 5, tol: 0.0, seed: 3 }).unwrap();
        assert_eq!(m.a(), &[vec![1.0]]);
        assert_eq!(m.pi(), &[1.0]);
        for (got, want) in m.b()[0].iter().zip([3.0 / 5.0, 1.0 / 5.0, 1.0 / 5.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert_eq!(hmm_posterior(&m, &ids(&["a", "c"])).unwrap(), vec![1.0]);
        for literal in [true, false] {
            let p = hmm_predict_next(&m, &ids(&["b"]), literal).unwrap();
            for ((_, x), y) in p.distribution.iter().zip(&m.b()[0]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_emission_and_deterministic_successor() {
        let v = ids(&["x", "y", "z"]);
        let eye = |i: usize| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        // x→y→z→x
        let a = vec![eye(1), eye(2), eye(0)];
        let b = vec![eye(0), eye(1), eye(2)];
        let m = HmmModel::new(v.clone(), a, b, vec![1.0 / 3.0; 3]).unwrap();
        assert_eq!(hmm_posterior(&m, &ids(&["x", "y"])).unwrap(), vec![0.0, 1.0, 0.0]);
        let p = hmm_predict_next(&m, &ids(&["x", "y"]), false).unwrap();
        assert_eq!(p.argmax.as_str(), "z");
        assert_eq!(p.prob(&"z".into()), 1.0);
        let lit = hmm_predict_next(&m, &ids(&["x", "y"]), true).unwrap();
        assert_eq!(lit.argmax.as_str(), "y");
        assert!(matches!(hmm_posterior(&m, &ids(&["x", "x"])), Err(ChainError::ZeroLikelihood)));
        assert!(matches!(hmm_posterior(&m, &ids(&["q"])), Err(ChainError::UnknownToken(_))));
    }

    #[test]
    fn scaling_matches_unscaled() {
        for seed in 0..40u64 {
            let n = 1 + (seed as usize % 4);
            let m = random_model(seed, n, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let t = 1 + rng.random_range(0..8);
            let obs: Vec<usize> = (0..t).map(|_| rng.random_range(0..4)).collect();
            let toks: Vec<SkillId> = obs.iter().map(|&o| m.vocabulary[o].clone()).collect();
            let got = hmm_posterior(&m, &toks).unwrap();
            for (g, w) in got.iter().zip(unscaled_posterior(&m, &obs)) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_monotone() {
        let c = Corpus::from_token_lists(&[vec!["a", "b", "c", "a", "b"], vec!["c", "c", "a"], vec!["b", "a"]]);
        let cfg = HmmConfig { n_states: 3, max_iters: 50, tol: 0.0, seed: 7 };
        let f1 = hmm_fit_traced(&c, &cfg).unwrap();
        let f2 = hmm_fit_traced(&c, &cfg).unwrap();
        assert_eq!(f1.model, f2.model);
        for w in f1.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} then {}", w[0], w[1]);
        }
        let other = hmm_fit_traced(&c, &HmmConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(other.model, f1.model);
    }

    #[test]
    fn config_errors() {
        let c = Corpus::from_token_lists(&[vec!["a"]]);
        assert!(matches!(hmm_fit(&c, &HmmConfig { n_states: 0, ..Default::default() }), Err(ChainError::InvalidConfig(_))));
        assert!(matches!(hmm_fit(&c, &HmmConfig { tol: f64::NAN, ..Default::default() }), Err(ChainError::InvalidConfig(_))));
        assert!(matches!(hmm_fit(&Corpus::new(vec![]), &HmmConfig::default()), Err(ChainError::EmptyCorpus)));
    }
}
