use serde::Serialize;

use super::{index_of, mutual_information, ChainError, ChainingBackend, PredictionResult};
use crate::ingest::Corpus;
use crate::skill_kb::SkillId;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeEdge {
    pub a: usize,
    pub b: usize,
    /// Mutual information of the endpoints' presence indicators, in bits.
    pub weight: f64,
}

/// Maximum-weight spanning tree over per-sequence token-presence
/// indicators, oriented away from a root.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChowLiuTree {
    pub(super) vocabulary: Vec<SkillId>,
    pub(super) edges: Vec<TreeEdge>,
    pub(super) root: usize,
    pub(super) parents: Vec<Option<usize>>,
    pub(super) n_examples: u64,
    /// `presence[i][j]`: sequences containing both `i` and `j`
    /// (the diagonal holds single-token presence).
    pub(super) presence: Vec<Vec<u64>>,
}

impl ChowLiuTree {
    pub fn vocabulary(&self) -> &[SkillId] {
        &self.vocabulary
    }

    pub fn edges(&self) -> &[TreeEdge] {
        &self.edges
    }

    pub fn root(&self) -> &SkillId {
        &self.vocabulary[self.root]
    }

    pub fn parent(&self, token: &SkillId) -> Result<Option<&SkillId>, ChainError> {
        Ok(self.parents[index_of(&self.vocabulary, token)?].map(|p| &self.vocabulary[p]))
    }

    pub fn children(&self, token: &SkillId) -> Result<Vec<&SkillId>, ChainError> {
        let i = index_of(&self.vocabulary, token)?;
        Ok(self
            .parents
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == Some(i))
            .map(|(c, _)| &self.vocabulary[c])
            .collect())
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    pub fn n_examples(&self) -> u64 {
        self.n_examples
    }

    pub(super) fn from_parts(
        vocabulary: Vec<SkillId>,
        edges: Vec<TreeEdge>,
        root: usize,
        n_examples: u64,
        presence: Vec<Vec<u64>>,
    ) -> Result<Self, ChainError> {
        let n = vocabulary.len();
        if n < 2 {
            return Err(ChainError::SingletonVocabulary);
        }
        if root >= n || edges.len() != n - 1 || edges.iter().any(|e| e.a >= n || e.b >= n || e.a == e.b) {
            return Err(ChainError::ModelFile("tree edges do not span the vocabulary".into()));
        }
        if presence.len() != n || presence.iter().any(|r| r.len() != n) {
            return Err(ChainError::ModelFile(format!("presence table must be {n}x{n}")));
        }
        let parents = orient(n, &edges, root)
            .ok_or_else(|| ChainError::ModelFile("tree edges do not form a spanning tree".into()))?;
        Ok(ChowLiuTree { vocabulary, edges, root, parents, n_examples, presence })
    }
}

/// Parent of every node after a walk from `root`; None when the edges
/// are not a spanning tree.
fn orient(n: usize, edges: &[TreeEdge], root: usize) -> Option<Vec<Option<usize>>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.a].push(e.b);
        adj[e.b].push(e.a);
    }
    let mut parents = vec![None; n];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                parents[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    seen.iter().all(|s| *s).then_some(parents)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub fn fit_chow_liu(corpus: &Corpus) -> Result<ChowLiuTree, ChainError> {
    if corpus.is_empty() {
        return Err(ChainError::EmptyCorpus);
    }
    let vocabulary: Vec<SkillId> = corpus.vocabulary().iter().cloned().collect();
    let n = vocabulary.len();
    if n < 2 {
        return Err(ChainError::SingletonVocabulary);
    }
    let n_examples = corpus.len() as u64;
    let mut presence = vec![vec![0u64; n]; n];
    for seq in corpus.sequences() {
        let mut present = vec![false; n];
        for t in &seq.tokens {
            present[index_of(&vocabulary, t)?] = true;
        }
        for i in 0..n {
            for j in 0..n {
                if present[i] && present[j] {
                    presence[i][j] += 1;
                }
            }
        }
    }

    let mut candidates = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let both = presence[i][j];
            let only_i = presence[i][i] - both;
            let only_j = presence[j][j] - both;
            let neither = n_examples - both - only_i - only_j;
            let weight = mutual_information(&[vec![neither, only_j], vec![only_i, both]])?;
            candidates.push(TreeEdge { a: i, b: j, weight });
        }
    }
    // Kruskal: heaviest first, ties in index order.
    candidates.sort_by(|x, y| y.weight.total_cmp(&x.weight).then((x.a, x.b).cmp(&(y.a, y.b))));
    let mut uf: Vec<usize> = (0..n).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for e in candidates {
        let (ra, rb) = (find(&mut uf, e.a), find(&mut uf, e.b));
        if ra != rb {
            uf[ra] = rb;
            edges.push(e);
            if edges.len() == n - 1 {
                break;
            }
        }
    }

    let root = match vocabulary.iter().position(|v| v.as_str() == "start") {
        Some(r) => r,
        None => {
            let mut degree = vec![0usize; n];
            for e in &edges {
                degree[e.a] += 1;
                degree[e.b] += 1;
            }
            (0..n).fold(0, |best, i| if degree[i] > degree[best] { i } else { best })
        }
    };
    ChowLiuTree::from_parts(vocabulary, edges, root, n_examples, presence)
}

impl ChainingBackend for ChowLiuTree {
    fn name(&self) -> &str {
        "chow_liu"
    }

    fn vocabulary(&self) -> &[SkillId] {
        &self.vocabulary
    }

    /// Children of the last token that have not yet occurred, weighted by
    /// P(child present | last present); then unused tree neighbours; then
    /// any unused token uniformly.
    fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError> {
        let last = index_of(&self.vocabulary, history.last().ok_or(ChainError::EmptyHistory)?)?;
        let n = self.vocabulary.len();
        let mut used = vec![false; n];
        for t in history {
            used[index_of(&self.vocabulary, t)?] = true;
        }
        let cond = |c: usize| {
            let denom = self.presence[last][last];
            if denom == 0 { 0.0 } else { self.presence[last][c] as f64 / denom as f64 }
        };
        let children: Vec<usize> = (0..n).filter(|&c| self.parents[c] == Some(last) && !used[c]).collect();
        let mut weights = vec![0.0; n];
        for &c in &children {
            weights[c] = cond(c);
        }
        if weights.iter().sum::<f64>() == 0.0 {
            if let Some(p) = self.parents[last].filter(|p| !used[*p]) {
                weights[p] = 1.0;
            }
        }
        if weights.iter().sum::<f64>() == 0.0 {
            for (i, w) in weights.iter_mut().enumerate() {
                *w = if used[i] { 0.0 } else { 1.0 };
            }
        }
        Ok(PredictionResult::from_weights(&self.vocabulary, &weights))
    }
}
