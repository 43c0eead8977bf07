//! Plan execution against a simulated world.
//!
//! An [`ExecutionSession`] walks an approved, continuous plan one skill at
//! a time. Each skill's effect is applied as a list of [`WorldDelta`]s,
//! its declared end state is checked, and human gates pause the run until
//! a supervisor confirms. Every world change is recorded in the event log,
//! so replaying the log over the initial world reproduces the final one.

mod world;

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bim::{bind_skill, BimError, ParameterizedSkill, TaskModel};
use crate::geom::Point3;
use crate::skill_kb::{check_chain_continuity, KbError, MicroSkill, SkillEffect, SkillId, SkillLibrary, Tool};

pub use world::{evaluate_object_state, StateContext, WorldDelta, WorldState, HOME_POSE, STATE_TOLERANCE};

/// Confirmations a nail gate needs before the panel is released.
pub const NAIL_CONFIRMATIONS: u32 = 4;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("plan has not been approved")]
    UnapprovedPlan,
    #[error("plan is not continuous at step {0}")]
    DiscontinuousPlan(usize),
    #[error("plan has no steps")]
    EmptyPlan,
    #[error("session is not waiting for a human")]
    NotAwaitingHuman,
    #[error("session is not running ({0})")]
    NotRunning(String),
    #[error("state reference `{0}` cannot be resolved")]
    UnresolvedReference(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("event log: {0}")]
    MalformedEvent(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Bim(#[from] BimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    ManualSelection,
    AutoChained,
}

/// An ordered, parameterized skill chain for one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<ParameterizedSkill>,
    pub task_label: String,
    pub approved_by: Option<String>,
    pub source: PlanSource,
    pub context: StateContext,
}

impl Plan {
    /// Binds every skill in `skill_ids` against the task. Sentinels get
    /// empty bindings.
    pub fn bind(
        lib: &SkillLibrary,
        task: &TaskModel,
        skill_ids: &[SkillId],
        object_id: &str,
        target_id: Option<&str>,
        task_label: &str,
        source: PlanSource,
    ) -> Result<Self, ExecError> {
        let mut steps = Vec::with_capacity(skill_ids.len());
        for id in skill_ids {
            let skill = lib.require(id)?;
            steps.push(if skill.is_sentinel {
                ParameterizedSkill { skill_id: id.clone(), bindings: Default::default(), waypoints: Vec::new() }
            } else {
                bind_skill(skill, task, object_id, target_id)?
            });
        }
        Ok(Plan {
            steps,
            task_label: task_label.into(),
            approved_by: None,
            source,
            context: StateContext::from_task(task, object_id, target_id)?,
        })
    }

    pub fn skill_ids(&self) -> Vec<SkillId> {
        self.steps.iter().map(|s| s.skill_id.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Human fastens the held panel; released after the last confirmation.
    NailGate,
    /// Human checks the workpiece.
    WorkpieceGate,
    /// Human swaps the end effector.
    ToolGate,
    /// Human performs the step because the gripper is busy.
    HumanTakesTask,
}

impl GateKind {
    pub fn confirmations(self) -> u32 {
        match self {
            GateKind::NailGate => NAIL_CONFIRMATIONS,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Running,
    AwaitingHuman { gate: GateKind },
    Completed,
    Failed { reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StepStarted,
    StepCompleted,
    PostconditionFailed,
    HumanGateOpened,
    HumanConfirmed,
    ToolChangeRequested,
    PlanCompleted,
    PlanFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq_no: u64,
    /// Seconds since the Unix epoch.
    pub ts: f64,
    pub kind: EventKind,
    pub payload: Value,
}

impl Event {
    pub fn deltas(&self) -> Result<Vec<WorldDelta>, ExecError> {
        match self.payload.get("deltas") {
            None => Ok(Vec::new()),
            Some(d) => serde_json::from_value(d.clone()).map_err(|e| ExecError::MalformedEvent(e.to_string())),
        }
    }
}

/// Rebuilds the world from the initial state and an event log.
pub fn replay(initial: &WorldState, events: &[Event]) -> Result<WorldState, ExecError> {
    let mut world = initial.clone();
    for (i, e) in events.iter().enumerate() {
        if i > 0 && e.seq_no != events[i - 1].seq_no + 1 {
            return Err(ExecError::MalformedEvent(format!("gap before seq_no {}", e.seq_no)));
        }
        for d in e.deltas()? {
            world.apply(&d);
        }
    }
    Ok(world)
}

/// What [`tool_change_policy`] asks for before the next step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ToolAction {
    /// The gripper is busy; a human performs the step.
    HumanTakesTask { needs: Tool },
    /// The gripper is free; a human swaps the tool.
    ChangeTool { from: Tool, to: Tool },
}

/// Deliberate effect corruption for testing postcondition checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum FaultKind {
    /// The object's pose updates are dropped.
    SkipPoseUpdate,
    /// The object's size update is dropped.
    SkipSizeUpdate,
    /// The object ends up displaced by this offset.
    DisplaceObject { offset: Point3 },
    /// The object ends up rotated by this yaw.
    RotateObject { yaw: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub step: usize,
    pub kind: FaultKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OpenGate {
    kind: GateKind,
    confirmations: u32,
}

/// A running plan. Mutated by a single writer; events are append-only.
#[derive(Clone, Debug, Serialize)]
pub struct ExecutionSession {
    plan: Plan,
    cursor: usize,
    status: SessionStatus,
    initial_world: WorldState,
    world: WorldState,
    event_log: Vec<Event>,
    #[serde(skip)]
    library: SkillLibrary,
    #[serde(skip)]
    faults: Vec<Fault>,
    #[serde(skip)]
    gate: Option<OpenGate>,
    /// Payload of a checked step, emitted with its completion.
    #[serde(skip)]
    pending_deltas: Option<Value>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn progress_label(done: u32, total: u32) -> String {
    match (done, total) {
        (0, _) => "0".into(),
        (d, t) if d == t => "1".into(),
        (d, t) => {
            let g = gcd(d, t);
            format!("{}/{}", d / g, t / g)
        }
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Checks approval and continuity, then opens a session at step 0.
pub fn start(plan: Plan, initial: WorldState, library: &SkillLibrary) -> Result<ExecutionSession, ExecError> {
    start_with_faults(plan, initial, library, Vec::new())
}

pub fn start_with_faults(
    plan: Plan,
    initial: WorldState,
    library: &SkillLibrary,
    faults: Vec<Fault>,
) -> Result<ExecutionSession, ExecError> {
    if plan.approved_by.is_none() {
        return Err(ExecError::UnapprovedPlan);
    }
    if plan.steps.is_empty() {
        return Err(ExecError::EmptyPlan);
    }
    let c = check_chain_continuity(&plan.skill_ids(), library)?;
    if let Some(b) = c.first_break {
        return Err(ExecError::DiscontinuousPlan(b));
    }
    let mut s = ExecutionSession {
        plan,
        cursor: 0,
        status: SessionStatus::Running,
        world: initial.clone(),
        initial_world: initial,
        event_log: Vec::new(),
        library: library.clone(),
        faults,
        gate: None,
        pending_deltas: None,
    };
    s.emit_step_started();
    Ok(s)
}

impl ExecutionSession {
    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn status(&self) -> &SessionStatus {
        &self.status
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn initial_world(&self) -> &WorldState {
        &self.initial_world
    }

    pub fn events(&self) -> &[Event] {
        &self.event_log
    }

    /// Events with `seq_no >= from`.
    pub fn events_from(&self, from: u64) -> &[Event] {
        let i = self.event_log.partition_point(|e| e.seq_no < from);
        &self.event_log[i..]
    }

    /// Progress of the open gate as confirmed/needed.
    pub fn gate_progress(&self) -> Option<(GateKind, u32, u32)> {
        self.gate.as_ref().map(|g| (g.kind, g.confirmations, g.kind.confirmations()))
    }

    fn emit(&mut self, kind: EventKind, payload: Value) {
        let seq_no = self.event_log.last().map_or(0, |e| e.seq_no + 1);
        self.event_log.push(Event { seq_no, ts: now(), kind, payload });
    }

    fn step_payload(&self) -> serde_json::Map<String, Value> {
        let mut m = serde_json::Map::new();
        m.insert("step".into(), json!(self.cursor));
        m.insert("skill_id".into(), json!(self.plan.steps[self.cursor].skill_id));
        m
    }

    fn emit_step_started(&mut self) {
        let p = self.step_payload();
        self.emit(EventKind::StepStarted, Value::Object(p));
    }

    fn current_skill(&self) -> MicroSkill {
        self.library
            .get(&self.plan.steps[self.cursor].skill_id)
            .cloned()
            .expect("plan skills were checked against the library at start")
    }

    fn fail(&mut self, reason: String) {
        self.emit(EventKind::PlanFailed, json!({ "step": self.cursor, "reason": reason }));
        self.status = SessionStatus::Failed { reason };
        self.gate = None;
        self.pending_deltas = None;
    }

    /// Stops the session at the current step boundary.
    pub fn cancel(&mut self, reason: &str) -> Result<(), ExecError> {
        match self.status {
            SessionStatus::Running | SessionStatus::AwaitingHuman { .. } => {
                self.fail(format!("cancelled: {reason}"));
                Ok(())
            }
            _ => Err(ExecError::NotRunning(format!("{:?}", self.status))),
        }
    }

    fn open_gate(&mut self, kind: GateKind, mut payload: serde_json::Map<String, Value>) {
        payload.insert("gate".into(), json!(kind));
        if kind == GateKind::NailGate {
            payload.insert("progress".into(), json!(progress_label(0, NAIL_CONFIRMATIONS)));
            payload.insert("holding".into(), json!(self.world.gripper_holding));
        }
        self.emit(EventKind::HumanGateOpened, Value::Object(payload));
        self.gate = Some(OpenGate { kind, confirmations: 0 });
        self.status = SessionStatus::AwaitingHuman { gate: kind };
    }

    /// Advances one step: tool policy, effect, end-state check, then a
    /// human gate when the skill has one.
    pub fn step(&mut self) -> Result<(), ExecError> {
        if self.status != SessionStatus::Running {
            return Err(ExecError::NotRunning(format!("{:?}", self.status)));
        }
        match tool_change_policy(self) {
            Some(ToolAction::HumanTakesTask { needs }) => {
                let mut p = self.step_payload();
                p.insert("needs".into(), json!(needs));
                self.open_gate(GateKind::HumanTakesTask, p);
                return Ok(());
            }
            Some(ToolAction::ChangeTool { from, to }) => {
                let mut p = self.step_payload();
                p.insert("from".into(), json!(from));
                p.insert("to".into(), json!(to));
                self.emit(EventKind::ToolChangeRequested, Value::Object(p.clone()));
                self.open_gate(GateKind::ToolGate, p);
                return Ok(());
            }
            None => {}
        }
        let skill = self.current_skill();
        let deltas = match self.effect(&skill, false) {
            Ok(d) => d,
            Err(reason) => {
                self.fail(reason);
                return Ok(());
            }
        };
        if !self.record_and_check(&skill, deltas, "robot")? {
            return Ok(());
        }
        if skill.requires_human_gate {
            let kind = if skill.effect == SkillEffect::Install { GateKind::NailGate } else { GateKind::WorkpieceGate };
            // the effect is already applied, so its deltas go out now
            let p = match self.pending_deltas.take() {
                Some(Value::Object(m)) => m,
                _ => self.step_payload(),
            };
            self.open_gate(kind, p);
        } else {
            self.complete_step("robot");
        }
        Ok(())
    }

    /// Applies deltas (with any injected fault), then evaluates the end
    /// state. Returns false when the session failed.
    fn record_and_check(&mut self, skill: &MicroSkill, mut deltas: Vec<WorldDelta>, by: &str) -> Result<bool, ExecError> {
        let object = self.plan.context.object.clone();
        if let Some(f) = self.faults.iter().find(|f| f.step == self.cursor).cloned() {
            match f.kind {
                FaultKind::SkipPoseUpdate => {
                    deltas.retain(|d| !matches!(d, WorldDelta::ObjectPose { object: o, .. } if *o == object))
                }
                FaultKind::SkipSizeUpdate => {
                    deltas.retain(|d| !matches!(d, WorldDelta::ObjectSize { object: o, .. } if *o == object))
                }
                FaultKind::DisplaceObject { offset } => {
                    let mut probe = self.world.clone();
                    deltas.iter().for_each(|d| probe.apply(d));
                    let pose = probe.object_poses.get(&object).copied().unwrap_or_default();
                    deltas.push(WorldDelta::ObjectPose { object: object.clone(), pose: crate::geom::add(pose, offset) });
                }
                FaultKind::RotateObject { yaw } => {
                    let cur = self.world.object_yaws.get(&object).copied().unwrap_or(0.0);
                    deltas.push(WorldDelta::ObjectYaw { object: object.clone(), yaw: cur + yaw });
                }
            }
        }
        for d in &deltas {
            self.world.apply(d);
        }
        let ok = match evaluate_object_state(&skill.end_state, &self.world, &self.plan.context) {
            Ok(ok) => ok,
            Err(e) => {
                let mut p = self.step_payload();
                p.insert("deltas".into(), json!(deltas));
                p.insert("error".into(), json!(e.to_string()));
                self.emit(EventKind::PostconditionFailed, Value::Object(p));
                self.fail(format!("end state of `{}` could not be evaluated: {e}", skill.id));
                return Ok(false);
            }
        };
        let mut p = self.step_payload();
        p.insert("deltas".into(), json!(deltas));
        p.insert("performed_by".into(), json!(by));
        if !ok {
            p.insert("expected".into(), json!(skill.end_state));
            self.emit(EventKind::PostconditionFailed, Value::Object(p));
            self.fail(format!("end state of `{}` not reached", skill.id));
            return Ok(false);
        }
        // deltas ride on a step event so replay sees them
        self.pending_deltas = Some(Value::Object(p));
        Ok(true)
    }

    fn complete_step(&mut self, by: &str) {
        let mut p = match self.pending_deltas.take() {
            Some(Value::Object(m)) => m,
            _ => self.step_payload(),
        };
        p.insert("performed_by".into(), json!(by));
        self.emit(EventKind::StepCompleted, Value::Object(p));
        self.cursor += 1;
        if self.cursor == self.plan.steps.len() {
            self.status = SessionStatus::Completed;
            self.emit(EventKind::PlanCompleted, json!({ "steps": self.cursor }));
        } else {
            self.status = SessionStatus::Running;
            self.emit_step_started();
        }
    }

    /// Steps until the session completes, fails or waits for a human.
    pub fn run_until_blocked(&mut self) -> Result<&SessionStatus, ExecError> {
        while self.status == SessionStatus::Running {
            self.step()?;
        }
        Ok(&self.status)
    }

    /// Records a supervisor confirmation for the open gate.
    pub fn confirm_gate(&mut self, supervisor_id: &str) -> Result<(), ExecError> {
        let SessionStatus::AwaitingHuman { gate: kind } = self.status else {
            return Err(ExecError::NotAwaitingHuman);
        };
        let gate = self.gate.as_mut().expect("awaiting sessions have an open gate");
        gate.confirmations += 1;
        let done = gate.confirmations;
        let needed = kind.confirmations();
        let mut p = self.step_payload();
        p.insert("gate".into(), json!(kind));
        p.insert("supervisor_id".into(), json!(supervisor_id));
        p.insert("confirmations".into(), json!(done));
        if kind == GateKind::NailGate {
            p.insert("progress".into(), json!(progress_label(done, needed)));
        }
        if done < needed {
            self.emit(EventKind::HumanConfirmed, Value::Object(p));
            return Ok(());
        }
        self.gate = None;
        match kind {
            GateKind::NailGate => {
                let object = self.plan.context.object.clone();
                let deltas = vec![WorldDelta::Fastened { object }, WorldDelta::Holding { object: None }];
                deltas.iter().for_each(|d| self.world.apply(d));
                p.insert("deltas".into(), json!(deltas));
                p.insert("released".into(), json!(true));
                self.emit(EventKind::HumanConfirmed, Value::Object(p));
                self.complete_step("robot");
            }
            GateKind::WorkpieceGate => {
                self.emit(EventKind::HumanConfirmed, Value::Object(p));
                self.complete_step("robot");
            }
            GateKind::ToolGate => {
                let to = self.current_skill().tool.unwrap_or(Tool::None);
                let delta = WorldDelta::Tool { tool: to };
                self.world.apply(&delta);
                p.insert("deltas".into(), json!([delta]));
                self.emit(EventKind::HumanConfirmed, Value::Object(p));
                self.status = SessionStatus::Running;
            }
            GateKind::HumanTakesTask => {
                self.emit(EventKind::HumanConfirmed, Value::Object(p));
                self.status = SessionStatus::Running;
                let skill = self.current_skill();
                match self.effect(&skill, true) {
                    Ok(deltas) => {
                        if self.record_and_check(&skill, deltas, "human")? {
                            self.complete_step("human");
                        }
                    }
                    Err(reason) => self.fail(reason),
                }
            }
        }
        Ok(())
    }

    /// World changes the current skill makes. `by_human` skips gripper
    /// motion: the human takes the held object and does the work.
    fn effect(&self, skill: &MicroSkill, by_human: bool) -> Result<Vec<WorldDelta>, String> {
        let step = &self.plan.steps[self.cursor];
        let object = self.plan.context.object.clone();
        let pose = *self.world.object_poses.get(&object).ok_or_else(|| format!("object `{object}` is not in the world"))?;
        let holding = self.world.gripper_holding.clone();
        let mut out = Vec::new();
        if by_human {
            if holding.is_some() {
                out.push(WorldDelta::Holding { object: None });
            }
            match skill.effect {
                SkillEffect::Cut => out.push(self.cut_size(&object)?),
                SkillEffect::Install | SkillEffect::Align | SkillEffect::Transfer | SkillEffect::PickUp => {
                    if let Some(w) = step.waypoints.last() {
                        out.push(WorldDelta::ObjectPose { object, pose: *w });
                    }
                }
                SkillEffect::None => {}
            }
            return Ok(out);
        }
        let carry = |out: &mut Vec<WorldDelta>, w: Point3| {
            out.push(WorldDelta::Gripper { pose: w });
            out.push(WorldDelta::ObjectPose { object: object.clone(), pose: w });
        };
        let grasp = |out: &mut Vec<WorldDelta>| -> Result<(), String> {
            match &holding {
                Some(h) if *h == object => Ok(()),
                Some(h) => Err(format!("gripper is holding `{h}`, not `{object}`")),
                None => {
                    out.push(WorldDelta::Gripper { pose });
                    out.push(WorldDelta::Holding { object: Some(object.clone()) });
                    Ok(())
                }
            }
        };
        match skill.effect {
            SkillEffect::None => {
                for w in &step.waypoints {
                    out.push(WorldDelta::Gripper { pose: *w });
                }
            }
            SkillEffect::PickUp => {
                grasp(&mut out)?;
            }
            SkillEffect::Install | SkillEffect::Align => {
                grasp(&mut out)?;
                for w in &step.waypoints {
                    carry(&mut out, *w);
                }
                out.push(WorldDelta::ObjectYaw { object: object.clone(), yaw: self.plan.context.target_yaw });
            }
            SkillEffect::Transfer => {
                grasp(&mut out)?;
                for w in &step.waypoints {
                    carry(&mut out, *w);
                }
                out.push(WorldDelta::Holding { object: None });
            }
            SkillEffect::Cut => {
                if holding.is_some() {
                    return Err("cannot cut while holding an object".into());
                }
                for w in &step.waypoints {
                    out.push(WorldDelta::Gripper { pose: *w });
                }
                out.push(self.cut_size(&object)?);
            }
        }
        Ok(out)
    }

    fn cut_size(&self, object: &str) -> Result<WorldDelta, String> {
        let req = self.plan.context.required_size.ok_or("cut needs a required size")?;
        let cur = self.world.object_sizes.get(object).ok_or_else(|| format!("object `{object}` has no size"))?;
        Ok(WorldDelta::ObjectSize { object: object.into(), size: [req[0], req[1], cur[2]] })
    }
}

/// Tool handling before the current step runs; `None` when the tool
/// already matches or the step needs none.
pub fn tool_change_policy(session: &ExecutionSession) -> Option<ToolAction> {
    if session.cursor >= session.plan.steps.len() {
        return None;
    }
    let needs = session.current_skill().tool?;
    if needs == Tool::None || needs == session.world.current_tool {
        return None;
    }
    Some(match session.world.gripper_holding {
        Some(_) => ToolAction::HumanTakesTask { needs },
        None => ToolAction::ChangeTool { from: session.world.current_tool, to: needs },
    })
}
