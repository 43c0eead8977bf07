//! Canonical micro-skill knowledge base.
//!
//! A [`SkillLibrary`] is a set of [`MicroSkill`]s, each declaring the state of
//! the manipulated object before and after the skill runs. Three database
//! rules are checked as data, not as errors:
//!
//! * coverage: every skill a task needs is in the library,
//! * exclusivity: no two skills overlap (disjoint synonym sets and unique
//!   begin/end transitions),
//! * continuity: every skill's begin state is some other skill's end state,
//!   or its end state is some other skill's begin state.
//!
//! Libraries are loaded from JSON and are immutable afterwards.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;

pub const LIBRARY_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("unknown skill id `{0}`")]
    UnknownSkillId(SkillId),
    #[error("malformed skill `{id}`: {reason}")]
    MalformedSkill { id: String, reason: String },
    #[error("library JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("reading library: {0}")]
    Io(#[from] std::io::Error),
}

/// Opaque skill identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillId(String);

impl SkillId {
    pub fn new(id: impl Into<String>) -> Self {
        SkillId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SkillId {
    fn from(s: &str) -> Self {
        SkillId(s.to_owned())
    }
}

impl From<String> for SkillId {
    fn from(s: String) -> Self {
        SkillId(s)
    }
}

/// Entity an object-state predicate is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateReference {
    MaterialStack,
    TargetCenter,
    GripperCenter,
    HumanHandCenter,
    AbsoluteCoordinate { x: f64, y: f64, z: f64 },
    None,
}

// Equality is reflexive because coordinates are checked finite at load.
impl Eq for StateReference {}

impl StateReference {
    fn canonical(self) -> Self {
        match self {
            StateReference::AbsoluteCoordinate { x, y, z } => StateReference::AbsoluteCoordinate {
                x: x + 0.0,
                y: y + 0.0,
                z: z + 0.0,
            },
            other => other,
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            StateReference::AbsoluteCoordinate { x, y, z } => crate::geom::is_finite([x, y, z]),
            _ => true,
        }
    }

    pub fn absolute(&self) -> Option<Point3> {
        match *self {
            StateReference::AbsoluteCoordinate { x, y, z } => Some([x, y, z]),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionPredicate {
    CoordEquals {
        #[serde(rename = "ref")]
        reference: StateReference,
    },
    CoordDiffers {
        #[serde(rename = "ref")]
        reference: StateReference,
        min_distance_m: f64,
    },
    ZMatchesHolder,
    #[default]
    Unspecified,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrientationPredicate {
    Matches {
        #[serde(rename = "ref")]
        reference: StateReference,
    },
    Differs {
        #[serde(rename = "ref")]
        reference: StateReference,
    },
    #[default]
    Unspecified,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePredicate {
    Original,
    RequiredSize,
    #[default]
    Unspecified,
}

/// Canonical predicate triple describing the manipulated object.
///
/// Two states are equal iff all three predicates are equal after
/// canonicalization (signed zeros folded, coordinates finite).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    #[serde(default)]
    pub position: PositionPredicate,
    #[serde(default)]
    pub orientation: OrientationPredicate,
    #[serde(default)]
    pub size: SizePredicate,
}

impl Eq for ObjectState {}

impl ObjectState {
    pub fn new(
        position: PositionPredicate,
        orientation: OrientationPredicate,
        size: SizePredicate,
    ) -> Self {
        ObjectState { position, orientation, size }
    }

    pub fn is_unspecified(&self) -> bool {
        *self == ObjectState::default()
    }

    /// Checks the numeric invariants and folds `-0.0` into `0.0`.
    pub fn canonical(self) -> Result<Self, String> {
        let position = match self.position {
            PositionPredicate::CoordEquals { reference } => {
                PositionPredicate::CoordEquals { reference: reference.canonical() }
            }
            PositionPredicate::CoordDiffers { reference, min_distance_m } => {
                if !(min_distance_m.is_finite() && min_distance_m >= 0.0) {
                    return Err(format!("min_distance_m must be finite and >= 0, got {min_distance_m}"));
                }
                PositionPredicate::CoordDiffers {
                    reference: reference.canonical(),
                    min_distance_m: min_distance_m + 0.0,
                }
            }
            other => other,
        };
        let orientation = match self.orientation {
            OrientationPredicate::Matches { reference } => {
                OrientationPredicate::Matches { reference: reference.canonical() }
            }
            OrientationPredicate::Differs { reference } => {
                OrientationPredicate::Differs { reference: reference.canonical() }
            }
            OrientationPredicate::Unspecified => OrientationPredicate::Unspecified,
        };
        let out = ObjectState { position, orientation, size: self.size };
        if !out.references().all(|r| r.is_finite()) {
            return Err("absolute coordinates must be finite".into());
        }
        Ok(out)
    }

    /// Every reference entity the predicates mention.
    pub fn references(&self) -> impl Iterator<Item = StateReference> {
        let pos = match self.position {
            PositionPredicate::CoordEquals { reference }
            | PositionPredicate::CoordDiffers { reference, .. } => Some(reference),
            _ => None,
        };
        let orient = match self.orientation {
            OrientationPredicate::Matches { reference } | OrientationPredicate::Differs { reference } => {
                Some(reference)
            }
            OrientationPredicate::Unspecified => None,
        };
        pos.into_iter().chain(orient)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    Point3,
    #[serde(rename = "length_m")]
    LengthM,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ParamType,
    /// Library-supplied value used when the task model has none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<f64>,
}

/// End effector a skill runs with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    Gripper,
    Knife,
    #[default]
    None,
}

/// What the simulated world does when the skill runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillEffect {
    #[default]
    None,
    PickUp,
    Install,
    Cut,
    Align,
    Transfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroSkill {
    pub id: SkillId,
    pub canonical_name: String,
    #[serde(default)]
    pub synonyms: BTreeSet<String>,
    #[serde(default)]
    pub begin_state: ObjectState,
    #[serde(default)]
    pub end_state: ObjectState,
    #[serde(default)]
    pub parameter_schema: Vec<ParameterSpec>,
    #[serde(default)]
    pub requires_human_gate: bool,
    #[serde(default)]
    pub is_sentinel: bool,
    #[serde(default)]
    pub effect: SkillEffect,
    /// Tool the skill needs mounted; `None` when any tool will do.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<Tool>,
}

impl MicroSkill {
    /// Start sentinel: only the end state is specified.
    pub fn is_start(&self) -> bool {
        self.is_sentinel && self.begin_state.is_unspecified()
    }

    /// Finish sentinel: only the begin state is specified.
    pub fn is_finish(&self) -> bool {
        self.is_sentinel && self.end_state.is_unspecified()
    }

    pub fn param(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameter_schema.iter().find(|p| p.name == name)
    }

    /// Stand-off distance before placement: the `approach_distance`
    /// parameter default, else the minimum distance in a begin state of the
    /// form "at least d away from the target".
    pub fn approach_distance(&self) -> Option<f64> {
        if let Some(d) = self.param("approach_distance").and_then(|p| p.default) {
            return Some(d);
        }
        match self.begin_state.position {
            PositionPredicate::CoordDiffers {
                reference: StateReference::TargetCenter,
                min_distance_m,
            } => Some(min_distance_m),
            _ => None,
        }
    }

    fn canonicalized(mut self) -> Result<Self, KbError> {
        let bad = |reason: String| KbError::MalformedSkill { id: self.id.0.clone(), reason };
        if self.id.0.trim().is_empty() {
            return Err(bad("empty id".into()));
        }
        let name = normalize_verb(&self.canonical_name);
        if name.is_empty() {
            return Err(bad("empty canonical_name".into()));
        }
        let synonyms: BTreeSet<String> = self
            .synonyms
            .iter()
            .map(|s| normalize_verb(s))
            .filter(|s| !s.is_empty())
            .collect();
        if synonyms.contains(&name) {
            return Err(bad("synonyms contain the canonical name".into()));
        }
        let begin = self.begin_state.canonical().map_err(&bad)?;
        let end = self.end_state.canonical().map_err(&bad)?;
        if self.is_sentinel && (begin.is_unspecified() == end.is_unspecified()) {
            return Err(bad("a sentinel must specify exactly one of begin_state/end_state".into()));
        }
        for p in &self.parameter_schema {
            if let Some(d) = p.default {
                if !d.is_finite() {
                    return Err(bad(format!("parameter `{}` default is not finite", p.name)));
                }
            }
        }
        self.canonical_name = name;
        self.synonyms = synonyms;
        self.begin_state = begin;
        self.end_state = end;
        Ok(self)
    }
}

/// Lowercase, trim, and collapse internal whitespace.
pub fn normalize_verb(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Serialize, Deserialize)]
struct LibraryDocument {
    version: String,
    skills: Vec<MicroSkill>,
}

/// Immutable set of micro skills.
#[derive(Clone, Debug)]
pub struct SkillLibrary {
    version: String,
    skills: Vec<MicroSkill>,
    by_id: HashMap<SkillId, usize>,
}

impl SkillLibrary {
    pub fn new(version: impl Into<String>, skills: Vec<MicroSkill>) -> Result<Self, KbError> {
        let skills = skills
            .into_iter()
            .map(MicroSkill::canonicalized)
            .collect::<Result<Vec<_>, _>>()?;
        let mut by_id = HashMap::new();
        for (i, s) in skills.iter().enumerate() {
            by_id.entry(s.id.clone()).or_insert(i);
        }
        Ok(SkillLibrary { version: version.into(), skills, by_id })
    }

    pub fn empty() -> Self {
        SkillLibrary { version: LIBRARY_SCHEMA_VERSION.into(), skills: Vec::new(), by_id: HashMap::new() }
    }

    pub fn from_json(text: &str) -> Result<Self, KbError> {
        let doc: LibraryDocument = serde_json::from_str(text)?;
        Self::new(doc.version, doc.skills)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let doc = LibraryDocument { version: self.version.clone(), skills: self.skills.clone() };
        serde_json::to_string_pretty(&doc).expect("library serializes")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn skills(&self) -> &[MicroSkill] {
        &self.skills
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn get(&self, id: &SkillId) -> Option<&MicroSkill> {
        self.by_id.get(id).map(|&i| &self.skills[i])
    }

    pub fn require(&self, id: &SkillId) -> Result<&MicroSkill, KbError> {
        self.get(id).ok_or_else(|| KbError::UnknownSkillId(id.clone()))
    }

    pub fn contains(&self, id: &SkillId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &SkillId> {
        self.skills.iter().map(|s| &s.id)
    }

    pub fn start(&self) -> Option<&MicroSkill> {
        self.skills.iter().find(|s| s.is_start())
    }

    pub fn finish(&self) -> Option<&MicroSkill> {
        self.skills.iter().find(|s| s.is_finish())
    }

    /// Whether `next` may directly follow `prev` in a chain.
    pub fn links(&self, prev: &SkillId, next: &SkillId) -> Result<bool, KbError> {
        Ok(self.require(prev)?.end_state == self.require(next)?.begin_state)
    }

    /// Every term a verb may canonicalize through: canonical names and synonyms.
    pub fn action_words(&self) -> Vec<String> {
        let mut words: Vec<String> = self
            .skills
            .iter()
            .filter(|s| !s.is_sentinel)
            .flat_map(|s| std::iter::once(s.canonical_name.clone()).chain(s.synonyms.iter().cloned()))
            .collect();
        words.dedup();
        words
    }

    /// Non-sentinel skills that are neither reachable from a Start sentinel
    /// nor able to reach a Finish sentinel in the begin/end adjacency graph.
    pub fn disconnected_skills(&self) -> Vec<SkillId> {
        let n = self.skills.len();
        let edge = |a: usize, b: usize| {
            let end = self.skills[a].end_state;
            a != b && !end.is_unspecified() && end == self.skills[b].begin_state
        };
        let bfs = |seeds: Vec<usize>, forward: bool| {
            let mut seen = vec![false; n];
            let mut queue: VecDeque<usize> = seeds.into_iter().collect();
            for &s in &queue {
                seen[s] = true;
            }
            while let Some(u) = queue.pop_front() {
                for v in 0..n {
                    let linked = if forward { edge(u, v) } else { edge(v, u) };
                    if linked && !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            seen
        };
        let starts = (0..n).filter(|&i| self.skills[i].is_start()).collect();
        let finishes = (0..n).filter(|&i| self.skills[i].is_finish()).collect();
        let from_start = bfs(starts, true);
        let to_finish = bfs(finishes, false);
        (0..n)
            .filter(|&i| !self.skills[i].is_sentinel && !from_start[i] && !to_finish[i])
            .map(|i| self.skills[i].id.clone())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Coverage,
    Exclusivity,
    Continuity,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub skill_ids: Vec<SkillId>,
    pub message: String,
}

impl Violation {
    fn new(rule: Rule, mut skill_ids: Vec<SkillId>, message: impl Into<String>) -> Self {
        skill_ids.sort();
        Violation { rule, skill_ids, message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(mut violations: Vec<Violation>) -> Self {
        violations.sort();
        violations.dedup();
        ValidationReport { ok: violations.is_empty(), violations }
    }
}

/// Checks the exclusivity and continuity rules over the whole library.
pub fn validate_library(lib: &SkillLibrary) -> ValidationReport {
    let skills = lib.skills();
    let mut out = Vec::new();

    let mut ids: BTreeMap<&SkillId, usize> = BTreeMap::new();
    let mut names: BTreeMap<&str, Vec<SkillId>> = BTreeMap::new();
    for s in skills {
        *ids.entry(&s.id).or_default() += 1;
        names.entry(&s.canonical_name).or_default().push(s.id.clone());
    }
    for (id, count) in ids {
        if count > 1 {
            out.push(Violation::new(
                Rule::Exclusivity,
                vec![id.clone(); count],
                format!("id `{id}` is used by {count} skills"),
            ));
        }
    }
    for (name, owners) in names {
        if owners.len() > 1 {
            out.push(Violation::new(
                Rule::Exclusivity,
                owners,
                format!("canonical name `{name}` is shared"),
            ));
        }
    }

    for (i, a) in skills.iter().enumerate() {
        for b in &skills[i + 1..] {
            let shared: Vec<&String> = a.synonyms.intersection(&b.synonyms).collect();
            for word in shared {
                out.push(Violation::new(
                    Rule::Exclusivity,
                    vec![a.id.clone(), b.id.clone()],
                    format!("synonym `{word}` appears in both skills"),
                ));
            }
            for (x, y) in [(a, b), (b, a)] {
                if x.synonyms.contains(&y.canonical_name) {
                    out.push(Violation::new(
                        Rule::Exclusivity,
                        vec![a.id.clone(), b.id.clone()],
                        format!("synonym `{}` of `{}` is the canonical name of `{}`", y.canonical_name, x.id, y.id),
                    ));
                }
            }
            // Identity transitions (begin == end) carry no transformation to
            // compare, so only state-changing skills must be unique.
            let transforming = |s: &MicroSkill| !s.is_sentinel && s.begin_state != s.end_state;
            if transforming(a) && transforming(b) && a.begin_state == b.begin_state && a.end_state == b.end_state {
                out.push(Violation::new(
                    Rule::Exclusivity,
                    vec![a.id.clone(), b.id.clone()],
                    "identical begin/end state transition",
                ));
            }
        }
    }

    for (i, s) in skills.iter().enumerate() {
        let linked = skills.iter().enumerate().any(|(j, t)| {
            i != j
                && ((!s.begin_state.is_unspecified() && s.begin_state == t.end_state)
                    || (!s.end_state.is_unspecified() && s.end_state == t.begin_state))
        });
        if !linked {
            out.push(Violation::new(
                Rule::Continuity,
                vec![s.id.clone()],
                format!("`{}` shares no begin/end state with any other skill", s.id),
            ));
        }
    }

    ValidationReport::from_violations(out)
}

/// Maps a free-form verb to a skill: canonical names first, then synonyms.
pub fn canonicalize(verb: &str, lib: &SkillLibrary) -> Option<SkillId> {
    let v = normalize_verb(verb);
    if v.is_empty() {
        return None;
    }
    lib.skills()
        .iter()
        .find(|s| s.canonical_name == v)
        .or_else(|| lib.skills().iter().find(|s| s.synonyms.contains(&v)))
        .map(|s| s.id.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Continuity {
    pub continuous: bool,
    pub first_break: Option<usize>,
}

/// Each skill's begin state must equal its predecessor's end state.
/// `first_break` is the index of the first skill that does not.
pub fn check_chain_continuity(seq: &[SkillId], lib: &SkillLibrary) -> Result<Continuity, KbError> {
    let skills = seq.iter().map(|id| lib.require(id)).collect::<Result<Vec<_>, _>>()?;
    let first_break = skills
        .windows(2)
        .position(|w| w[0].end_state != w[1].begin_state)
        .map(|i| i + 1);
    Ok(Continuity { continuous: first_break.is_none(), first_break })
}

/// Reports every task skill absent from the library.
pub fn check_task_coverage(task_skills: &BTreeSet<SkillId>, lib: &SkillLibrary) -> ValidationReport {
    let missing: Vec<SkillId> = task_skills.iter().filter(|id| !lib.contains(id)).cloned().collect();
    let violations = if missing.is_empty() {
        Vec::new()
    } else {
        let list = missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        vec![Violation::new(Rule::Coverage, missing, format!("not in library: {list}"))]
    };
    ValidationReport::from_violations(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn drywall() -> SkillLibrary {
        SkillLibrary::from_json(include_str!("../fixtures/drywall.json")).unwrap()
    }

    fn install_library() -> SkillLibrary {
        SkillLibrary::from_json(include_str!("../fixtures/install_library.json")).unwrap()
    }

    fn ids(v: &[&str]) -> Vec<SkillId> {
        v.iter().map(|s| SkillId::from(*s)).collect()
    }

    fn skill(id: &str, synonyms: &[&str], begin: ObjectState, end: ObjectState) -> MicroSkill {
        MicroSkill {
            id: id.into(),
            canonical_name: id.into(),
            synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
            begin_state: begin,
            end_state: end,
            parameter_schema: vec![],
            requires_human_gate: false,
            is_sentinel: false,
            effect: SkillEffect::None,
            tool: None,
        }
    }

    fn at(reference: StateReference, size: SizePredicate) -> ObjectState {
        ObjectState::new(PositionPredicate::CoordEquals { reference }, OrientationPredicate::Unspecified, size)
    }

    #[test]
    fn shipped_libraries_validate() {
        for lib in [drywall(), install_library()] {
            let report = validate_library(&lib);
            assert!(report.ok, "{:#?}", report.violations);
            assert!(lib.disconnected_skills().is_empty());
        }
    }

    #[test]
    fn empty_library_is_vacuously_valid() {
        assert!(validate_library(&SkillLibrary::empty()).ok);
    }

    #[test]
    fn shared_synonym_is_an_exclusivity_violation() {
        let s0 = at(StateReference::MaterialStack, SizePredicate::Original);
        let s1 = at(StateReference::TargetCenter, SizePredicate::Original);
        let s2 = at(StateReference::GripperCenter, SizePredicate::Original);
        let lib = SkillLibrary::new(
            "1",
            vec![skill("a", &["position", "set"], s0, s1), skill("b", &["Position"], s1, s2)],
        )
        .unwrap();
        let report = validate_library(&lib);
        // oracle: pairwise intersection over every pair of synonym sets
        let sets: Vec<&BTreeSet<String>> = lib.skills().iter().map(|s| &s.synonyms).collect();
        let mut expected = vec![];
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                for w in sets[i].intersection(sets[j]) {
                    expected.push((i, j, w.clone()));
                }
            }
        }
        assert_eq!(expected, vec![(0, 1, "position".to_string())]);
        let excl: Vec<_> = report.violations.iter().filter(|v| v.rule == Rule::Exclusivity).collect();
        assert_eq!(excl.len(), 1);
        assert_eq!(excl[0].skill_ids, ids(&["a", "b"]));
        assert!(!report.ok);
    }

    #[test]
    fn synonym_equal_to_other_canonical_name_is_flagged() {
        let s0 = at(StateReference::MaterialStack, SizePredicate::Original);
        let s1 = at(StateReference::TargetCenter, SizePredicate::Original);
        let lib = SkillLibrary::new("1", vec![skill("a", &["b"], s0, s1), skill("b", &[], s1, s0)]).unwrap();
        let report = validate_library(&lib);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].rule, Rule::Exclusivity);
    }

    #[test]
    fn duplicate_transition_is_flagged_but_identity_transitions_are_not() {
        let s0 = at(StateReference::MaterialStack, SizePredicate::Original);
        let s1 = at(StateReference::TargetCenter, SizePredicate::Original);
        let lib = SkillLibrary::new(
            "1",
            vec![skill("a", &[], s0, s1), skill("b", &[], s0, s1), skill("c", &[], s0, s0), skill("d", &[], s0, s0)],
        )
        .unwrap();
        let report = validate_library(&lib);
        assert_eq!(report.violations.len(), 1, "{:?}", report.violations);
        assert_eq!(report.violations[0].skill_ids, ids(&["a", "b"]));
    }

    #[test]
    fn isolated_skill_breaks_continuity_rule() {
        let s0 = at(StateReference::MaterialStack, SizePredicate::Original);
        let s1 = at(StateReference::TargetCenter, SizePredicate::Original);
        let s2 = at(StateReference::GripperCenter, SizePredicate::RequiredSize);
        let s3 = at(StateReference::HumanHandCenter, SizePredicate::RequiredSize);
        let lib = SkillLibrary::new("1", vec![skill("a", &[], s0, s1), skill("b", &[], s1, s0), skill("z", &[], s2, s3)])
            .unwrap();
        let report = validate_library(&lib);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].rule, Rule::Continuity);
        assert_eq!(report.violations[0].skill_ids, ids(&["z"]));
    }

    #[test]
    fn malformed_skills_are_rejected_at_load() {
        let s0 = at(StateReference::MaterialStack, SizePredicate::Original);
        let mut bad = skill("a", &["a"], s0, s0);
        assert!(SkillLibrary::new("1", vec![bad.clone()]).is_err());
        bad.synonyms.clear();
        bad.begin_state.position = PositionPredicate::CoordDiffers {
            reference: StateReference::TargetCenter,
            min_distance_m: -1.0,
        };
        assert!(SkillLibrary::new("1", vec![bad.clone()]).is_err());
        bad.begin_state = ObjectState::default();
        bad.is_sentinel = false;
        bad.canonical_name = "  ".into();
        assert!(SkillLibrary::new("1", vec![bad.clone()]).is_err());
        let mut sentinel = skill("s", &[], s0, s0);
        sentinel.is_sentinel = true;
        assert!(SkillLibrary::new("1", vec![sentinel]).is_err());
    }

    #[test]
    fn canonicalize_examples() {
        let t2 = install_library();
        assert_eq!(canonicalize("Connect", &t2), Some("install".into()));
        assert_eq!(canonicalize("  install ", &t2), Some("install".into()));
        assert_eq!(canonicalize("HANDOVER", &t2), Some("transfer".into()));
        assert_eq!(canonicalize("Pick   up", &t2), Some("pick_up".into()));
        assert_eq!(canonicalize("levitate", &t2), None);
        assert_eq!(canonicalize("", &t2), None);
    }

    #[test]
    fn drywall_chain_is_continuous() {
        let lib = drywall();
        let c = check_chain_continuity(&ids(&["start", "prepare", "plan", "cut", "connect", "finish"]), &lib).unwrap();
        assert_eq!(c, Continuity { continuous: true, first_break: None });
        for short in [ids(&[]), ids(&["start"])] {
            assert!(check_chain_continuity(&short, &lib).unwrap().continuous);
        }
    }

    #[test]
    fn connect_straight_after_start_breaks_at_one() {
        let c = check_chain_continuity(&ids(&["start", "connect", "finish"]), &drywall()).unwrap();
        assert_eq!(c.first_break, Some(1));
        assert!(!c.continuous);
    }

    #[test]
    fn unknown_id_in_chain_is_an_error() {
        let err = check_chain_continuity(&ids(&["start", "weld"]), &drywall()).unwrap_err();
        assert!(matches!(err, KbError::UnknownSkillId(id) if id.as_str() == "weld"));
    }

    #[test]
    fn coverage_examples() {
        let lib = drywall();
        let set = |v: &[&str]| v.iter().map(|s| SkillId::from(*s)).collect::<BTreeSet<_>>();
        assert!(check_task_coverage(&set(&["prepare", "plan", "cut", "connect"]), &lib).ok);
        assert!(check_task_coverage(&set(&[]), &lib).ok);
        let r = check_task_coverage(&set(&["prepare", "weld"]), &lib);
        assert!(!r.ok);
        // oracle: set difference
        let diff: Vec<SkillId> = set(&["prepare", "weld"]).into_iter().filter(|s| !lib.contains(s)).collect();
        assert_eq!(r.violations[0].skill_ids, diff);
        assert_eq!(r.violations[0].rule, Rule::Coverage);
    }

    #[test]
    fn install_approach_distance_is_library_data() {
        let t2 = install_library();
        assert_eq!(t2.get(&"install".into()).unwrap().approach_distance(), Some(0.2));
        let dw = drywall();
        assert_eq!(dw.get(&"connect".into()).unwrap().approach_distance(), Some(0.2));
    }

    #[test]
    fn library_json_round_trips() {
        let lib = drywall();
        let again = SkillLibrary::from_json(&lib.to_json()).unwrap();
        assert_eq!(lib.skills(), again.skills());
    }

    fn arb_reference() -> impl Strategy<Value = StateReference> {
        prop_oneof![
            Just(StateReference::MaterialStack),
            Just(StateReference::TargetCenter),
            Just(StateReference::GripperCenter),
            Just(StateReference::HumanHandCenter),
            Just(StateReference::None),
            (-1i8..=1, -1i8..=1, prop_oneof![Just(0.0f64), Just(-0.0f64), Just(1.5f64)]).prop_map(|(x, y, z)| {
                StateReference::AbsoluteCoordinate { x: x as f64, y: y as f64, z }
            }),
        ]
    }

    fn arb_state() -> impl Strategy<Value = ObjectState> {
        let pos = prop_oneof![
            arb_reference().prop_map(|reference| PositionPredicate::CoordEquals { reference }),
            (arb_reference(), prop_oneof![Just(0.0f64), Just(0.2f64)])
                .prop_map(|(reference, min_distance_m)| PositionPredicate::CoordDiffers { reference, min_distance_m }),
            Just(PositionPredicate::ZMatchesHolder),
            Just(PositionPredicate::Unspecified),
        ];
        let orient = prop_oneof![
            arb_reference().prop_map(|reference| OrientationPredicate::Matches { reference }),
            arb_reference().prop_map(|reference| OrientationPredicate::Differs { reference }),
            Just(OrientationPredicate::Unspecified),
        ];
        let size = prop_oneof![
            Just(SizePredicate::Original),
            Just(SizePredicate::RequiredSize),
            Just(SizePredicate::Unspecified)
        ];
        (pos, orient, size).prop_map(|(p, o, s)| ObjectState::new(p, o, s).canonical().unwrap())
    }

    proptest! {
        #[test]
        fn object_state_equality_is_an_equivalence(a in arb_state(), b in arb_state(), c in arb_state()) {
            prop_assert_eq!(a, a);
            prop_assert_eq!(a == b, b == a);
            if a == b && b == c {
                prop_assert_eq!(a, c);
            }
        }

        #[test]
        fn validation_is_order_independent_and_idempotent(
            states in proptest::collection::vec((arb_state(), arb_state()), 0..6),
            perm_seed in any::<u64>(),
        ) {
            let skills: Vec<MicroSkill> = states
                .iter()
                .enumerate()
                .map(|(i, (b, e))| skill(&format!("s{i}"), &[], *b, *e))
                .collect();
            let lib = SkillLibrary::new("1", skills.clone()).unwrap();
            let report = validate_library(&lib);
            prop_assert_eq!(&report, &validate_library(&lib));
            let mut shuffled = skills;
            let n = shuffled.len();
            if n > 1 {
                let mut s = perm_seed;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    shuffled.swap(i, (s >> 33) as usize % (i + 1));
                }
            }
            let permuted = SkillLibrary::new("1", shuffled).unwrap();
            prop_assert_eq!(report, validate_library(&permuted));
        }

        #[test]
        fn continuous_chains_have_continuous_prefixes(seq in proptest::collection::vec(0usize..6, 0..10)) {
            let lib = drywall();
            let all: Vec<SkillId> = lib.ids().cloned().collect();
            let chain: Vec<SkillId> = seq.iter().map(|&i| all[i % all.len()].clone()).collect();
            let c = check_chain_continuity(&chain, &lib).unwrap();
            for k in 0..=chain.len() {
                let p = check_chain_continuity(&chain[..k], &lib).unwrap();
                if c.continuous {
                    prop_assert!(p.continuous);
                }
                match c.first_break {
                    Some(b) if k > b => prop_assert_eq!(p.first_break, Some(b)),
                    _ => prop_assert!(p.continuous),
                }
            }
        }
    }
}
