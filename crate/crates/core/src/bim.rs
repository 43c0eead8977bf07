//! Geometric task models and skill parameter binding.
//!
//! A task model is a small JSON document: objects with their box
//! dimensions, placement targets, and the stud centers published by the
//! design tool. Lengths are meters internally; a document may declare
//! `"units": "inches"`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Point3};
use crate::numfmt::python_repr;
use crate::skill_kb::{MicroSkill, ParamType, SkillEffect, SkillId};

pub const METERS_PER_INCH: f64 = 0.0254;

/// Approach offset used when a skill declares none.
pub const DEFAULT_APPROACH_M: f64 = 0.2;

#[derive(Debug, Error)]
pub enum BimError {
    #[error("task model schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("`{path}` must be positive")]
    NonPositiveDimension { path: String },
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("task model has no value for `{0}`")]
    MissingParameter(String),
    #[error("required {what} {required} exceeds object `{object}` size {actual}")]
    RequiredExceedsObject { object: String, what: &'static str, required: f64, actual: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Meters,
    Inches,
}

impl Units {
    pub fn to_meters(self) -> f64 {
        match self {
            Units::Meters => 1.0,
            Units::Inches => METERS_PER_INCH,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Units::Meters => "meters",
            Units::Inches => "inches",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskObject {
    pub id: String,
    pub center: Point3,
    pub length_x: f64,
    pub width_y: f64,
    pub thickness_z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub id: String,
    pub center: Point3,
    /// Direction the object approaches from; `None` means +z.
    pub approach_normal: Option<Point3>,
}

impl Target {
    pub fn normal(&self) -> Point3 {
        let n = self.approach_normal.unwrap_or([0.0, 0.0, 1.0]);
        geom::scale(n, 1.0 / geom::norm(n))
    }
}

/// A parsed task model, all lengths in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub objects: Vec<TaskObject>,
    pub targets: Vec<Target>,
    pub stud_centers: Vec<Point3>,
    pub tool_length_m: Option<f64>,
    pub required_length: Option<f64>,
    pub required_width: Option<f64>,
    pub holder_z: Option<f64>,
    /// Units the document was written in.
    pub units: Units,
    /// Whether the document named its units (otherwise they were the
    /// loader's default).
    pub units_declared: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    id: String,
    center: Point3,
    length_x: f64,
    width_y: f64,
    thickness_z: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetDoc {
    id: String,
    center: Point3,
    #[serde(default)]
    approach_normal: Option<Point3>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskDoc {
    #[serde(default)]
    stud_centers: Vec<Point3>,
    #[serde(default)]
    units: Option<Units>,
    #[serde(default)]
    objects: Vec<ObjectDoc>,
    #[serde(default)]
    targets: Vec<TargetDoc>,
    #[serde(default)]
    tool_length_m: Option<f64>,
    #[serde(default)]
    required_length: Option<f64>,
    #[serde(default)]
    required_width: Option<f64>,
    #[serde(default)]
    holder_z: Option<f64>,
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> BimError {
    BimError::SchemaViolation { path: path.into(), message: message.into() }
}

fn positive(path: String, v: f64) -> Result<f64, BimError> {
    if !v.is_finite() {
        return Err(violation(path, "must be finite"));
    }
    if v <= 0.0 {
        return Err(BimError::NonPositiveDimension { path });
    }
    Ok(v)
}

fn finite_point(path: String, p: Point3) -> Result<Point3, BimError> {
    if geom::is_finite(p) { Ok(p) } else { Err(violation(path, "coordinates must be finite")) }
}

/// Parses a task document whose units default to meters.
pub fn load_task_model(document: &str) -> Result<TaskModel, BimError> {
    load_task_model_with_default_units(document, Units::Meters)
}

/// Parses a task document, using `default_units` when the document does
/// not declare any.
pub fn load_task_model_with_default_units(document: &str, default_units: Units) -> Result<TaskModel, BimError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let doc: TaskDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        violation(path, e.into_inner().to_string())
    })?;
    let units = doc.units.unwrap_or(default_units);
    let k = units.to_meters();
    let pt = |p: Point3| geom::scale(p, k);

    let mut ids = BTreeSet::new();
    let mut objects = Vec::with_capacity(doc.objects.len());
    for (i, o) in doc.objects.into_iter().enumerate() {
        let at = |f: &str| format!("objects[{i}].{f}");
        if !ids.insert(o.id.clone()) {
            return Err(violation(at("id"), format!("duplicate object id `{}`", o.id)));
        }
        objects.push(TaskObject {
            center: finite_point(at("center"), pt(o.center))?,
            length_x: positive(at("length_x"), o.length_x * k)?,
            width_y: positive(at("width_y"), o.width_y * k)?,
            thickness_z: positive(at("thickness_z"), o.thickness_z * k)?,
            id: o.id,
        });
    }
    let mut target_ids = BTreeSet::new();
    let mut targets = Vec::with_capacity(doc.targets.len());
    for (i, t) in doc.targets.into_iter().enumerate() {
        let at = |f: &str| format!("targets[{i}].{f}");
        if !target_ids.insert(t.id.clone()) {
            return Err(violation(at("id"), format!("duplicate target id `{}`", t.id)));
        }
        if let Some(n) = t.approach_normal {
            finite_point(at("approach_normal"), n)?;
            if geom::norm(n) == 0.0 {
                return Err(violation(at("approach_normal"), "must be non-zero"));
            }
        }
        targets.push(Target { center: finite_point(at("center"), pt(t.center))?, approach_normal: t.approach_normal, id: t.id });
    }
    let stud_centers = doc
        .stud_centers
        .into_iter()
        .enumerate()
        .map(|(i, c)| finite_point(format!("stud_centers[{i}]"), pt(c)))
        .collect::<Result<_, _>>()?;
    let opt_len = |name: &str, v: Option<f64>| v.map(|v| positive(name.to_owned(), v * k)).transpose();
    let holder_z = match doc.holder_z {
        Some(z) if !z.is_finite() => return Err(violation("holder_z", "must be finite")),
        z => z.map(|z| z * k),
    };
    Ok(TaskModel {
        objects,
        targets,
        stud_centers,
        tool_length_m: opt_len("tool_length_m", doc.tool_length_m)?,
        required_length: opt_len("required_length", doc.required_length)?,
        required_width: opt_len("required_width", doc.required_width)?,
        holder_z,
        units,
        units_declared: doc.units.is_some(),
    })
}

/// Shortest decimal that converts back to exactly `meters`.
fn in_units(meters: f64, units: Units) -> String {
    let k = units.to_meters();
    if k == 1.0 || meters == 0.0 || !meters.is_finite() {
        return python_repr(meters / k);
    }
    let q = meters / k;
    // The document value is within a few ulps of q; any float there that
    // converts to the same meters value is an equally exact spelling.
    (-16i64..=16)
        .map(|d| f64::from_bits((q.to_bits() as i64 + d) as u64))
        .filter(|c| c * k == meters)
        .map(python_repr)
        .min_by_key(|s| s.len())
        .unwrap_or_else(|| python_repr(q))
}

fn point_text(p: Point3, units: Units) -> String {
    format!("[{}, {}, {}]", in_units(p[0], units), in_units(p[1], units), in_units(p[2], units))
}

fn raw_point_text(p: Point3) -> String {
    format!("[{}, {}, {}]", python_repr(p[0]), python_repr(p[1]), python_repr(p[2]))
}

/// Serializes a task model in the published wire form: Python-style
/// separators, `stud_centers` first, values in the document's units.
/// Empty or absent fields are omitted, except `stud_centers`.
pub fn serialize_task_payload(task: &TaskModel) -> Vec<u8> {
    let u = task.units;
    let mut out = String::from("{\"stud_centers\": [");
    out.push_str(&task.stud_centers.iter().map(|c| point_text(*c, u)).collect::<Vec<_>>().join(", "));
    out.push(']');
    let quote = |s: &str| serde_json::to_string(s).expect("string serializes");
    if task.units_declared {
        let _ = write!(out, ", \"units\": \"{}\"", u.name());
    }
    if !task.objects.is_empty() {
        let objs: Vec<String> = task
            .objects
            .iter()
            .map(|o| {
                format!(
                    "{{\"id\": {}, \"center\": {}, \"length_x\": {}, \"width_y\": {}, \"thickness_z\": {}}}",
                    quote(&o.id),
                    point_text(o.center, u),
                    in_units(o.length_x, u),
                    in_units(o.width_y, u),
                    in_units(o.thickness_z, u)
                )
            })
            .collect();
        let _ = write!(out, ", \"objects\": [{}]", objs.join(", "));
    }
    if !task.targets.is_empty() {
        let ts: Vec<String> = task
            .targets
            .iter()
            .map(|t| {
                let mut s = format!("{{\"id\": {}, \"center\": {}", quote(&t.id), point_text(t.center, u));
                if let Some(n) = t.approach_normal {
                    let _ = write!(s, ", \"approach_normal\": {}", raw_point_text(n));
                }
                s.push('}');
                s
            })
            .collect();
        let _ = write!(out, ", \"targets\": [{}]", ts.join(", "));
    }
    for (name, v) in [
        ("tool_length_m", task.tool_length_m),
        ("required_length", task.required_length),
        ("required_width", task.required_width),
        ("holder_z", task.holder_z),
    ] {
        if let Some(v) = v {
            let _ = write!(out, ", \"{name}\": {}", in_units(v, u));
        }
    }
    out.push('}');
    out.into_bytes()
}

impl TaskModel {
    pub fn object(&self, id: &str) -> Result<&TaskObject, BimError> {
        self.objects.iter().find(|o| o.id == id).ok_or_else(|| BimError::UnknownObject(id.into()))
    }

    /// Placement targets: declared targets, then `stud_<i>` for each stud
    /// center not shadowed by a declared id.
    pub fn targets(&self) -> Vec<Target> {
        let mut all = self.targets.clone();
        for (i, c) in self.stud_centers.iter().enumerate() {
            let id = format!("stud_{i}");
            if !all.iter().any(|t| t.id == id) {
                all.push(Target { id, center: *c, approach_normal: None });
            }
        }
        all
    }

    pub fn target(&self, id: &str) -> Result<Target, BimError> {
        self.targets().into_iter().find(|t| t.id == id).ok_or_else(|| BimError::UnknownTarget(id.into()))
    }
}

/// A bound parameter value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Binding {
    Point(Point3),
    Length(f64),
    Reference(String),
}

/// A skill with its parameters resolved against a task model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterizedSkill {
    pub skill_id: SkillId,
    pub bindings: BTreeMap<String, Binding>,
    /// Tool or object waypoints in meters; empty for pure gates.
    pub waypoints: Vec<Point3>,
}

fn required(v: Option<f64>, name: &str) -> Result<f64, BimError> {
    v.ok_or_else(|| BimError::MissingParameter(name.into()))
}

/// The five cut waypoints for an object lying on the table plane:
/// start, plunge, cut along y, cut along x back to the edge, retract.
pub fn cut_waypoints(center: Point3, lo: f64, wo: f64, la: f64, wa: f64, z: f64, l: f64) -> [Point3; 5] {
    let (x, y) = (center[0], center[1]);
    let xc = x - lo / 2.0 + la;
    let y0 = y - wo / 2.0;
    let x_end = x - lo / 2.0;
    let y_end = y - wo / 2.0 + wa;
    [[xc, y0, z], [xc, y0, 0.0], [xc, y_end, 0.0], [x_end, y_end, 0.0], [x_end, y_end, l + 4.0 * z]]
}

pub fn bind_cut(task: &TaskModel, object_id: &str) -> Result<ParameterizedSkill, BimError> {
    let obj = task.object(object_id)?;
    let la = required(task.required_length, "required_length")?;
    let wa = required(task.required_width, "required_width")?;
    let l = required(task.tool_length_m, "tool_length")?;
    for (what, req, actual) in [("length", la, obj.length_x), ("width", wa, obj.width_y)] {
        if req > actual {
            return Err(BimError::RequiredExceedsObject { object: obj.id.clone(), what, required: req, actual });
        }
    }
    let waypoints = cut_waypoints(obj.center, obj.length_x, obj.width_y, la, wa, obj.thickness_z, l).to_vec();
    Ok(ParameterizedSkill {
        skill_id: SkillId::from("cut"),
        bindings: BTreeMap::from([
            ("object".into(), Binding::Reference(obj.id.clone())),
            ("required_length".into(), Binding::Length(la)),
            ("required_width".into(), Binding::Length(wa)),
            ("tool_length".into(), Binding::Length(l)),
        ]),
        waypoints,
    })
}

pub fn bind_pick_up(task: &TaskModel, object_id: &str) -> Result<ParameterizedSkill, BimError> {
    let obj = task.object(object_id)?;
    Ok(ParameterizedSkill {
        skill_id: SkillId::from("pick_up"),
        bindings: BTreeMap::from([
            ("object".into(), Binding::Reference(obj.id.clone())),
            ("gripper_target".into(), Binding::Point(obj.center)),
        ]),
        waypoints: vec![obj.center],
    })
}

/// Pre-place point `approach` meters out along the target normal, then
/// the target center.
pub fn install_waypoints(target: &Target, approach: f64) -> Vec<Point3> {
    vec![geom::add(target.center, geom::scale(target.normal(), approach)), target.center]
}

pub fn bind_install(task: &TaskModel, object_id: &str, target_id: &str) -> Result<ParameterizedSkill, BimError> {
    let obj = task.object(object_id)?;
    let target = task.target(target_id)?;
    Ok(ParameterizedSkill {
        skill_id: SkillId::from("install"),
        bindings: BTreeMap::from([
            ("object".into(), Binding::Reference(obj.id.clone())),
            ("target".into(), Binding::Point(target.center)),
        ]),
        waypoints: install_waypoints(&target, DEFAULT_APPROACH_M),
    })
}

/// Binds any library skill: parameters by name and type from its schema,
/// waypoints from its effect.
pub fn bind_skill(
    skill: &MicroSkill,
    task: &TaskModel,
    object_id: &str,
    target_id: Option<&str>,
) -> Result<ParameterizedSkill, BimError> {
    let target = || -> Result<Target, BimError> {
        task.target(target_id.ok_or_else(|| BimError::MissingParameter("target".into()))?)
    };
    let mut bindings = BTreeMap::new();
    for p in &skill.parameter_schema {
        let value = match (p.name.as_str(), p.kind) {
            (_, ParamType::Reference) => Binding::Reference(task.object(object_id)?.id.clone()),
            ("target", ParamType::Point3) => Binding::Point(target()?.center),
            ("gripper_target", ParamType::Point3) => Binding::Point(task.object(object_id)?.center),
            ("required_length", ParamType::LengthM) => Binding::Length(required(task.required_length, &p.name)?),
            ("required_width", ParamType::LengthM) => Binding::Length(required(task.required_width, &p.name)?),
            ("tool_length", ParamType::LengthM) => Binding::Length(required(task.tool_length_m, &p.name)?),
            (_, ParamType::LengthM) => Binding::Length(required(p.default, &p.name)?),
            (_, ParamType::Point3) => return Err(BimError::MissingParameter(p.name.clone())),
        };
        bindings.insert(p.name.clone(), value);
    }
    let approach = skill.approach_distance().unwrap_or(DEFAULT_APPROACH_M);
    let waypoints = match skill.effect {
        SkillEffect::Cut => bind_cut(task, object_id)?.waypoints,
        SkillEffect::PickUp => vec![task.object(object_id)?.center],
        SkillEffect::Install => install_waypoints(&target()?, approach),
        SkillEffect::Align => install_waypoints(&target()?, approach)[..1].to_vec(),
        SkillEffect::Transfer => match bindings.get("hand") {
            Some(Binding::Point(p)) => vec![*p],
            _ => Vec::new(),
        },
        SkillEffect::None => Vec::new(),
    };
    Ok(ParameterizedSkill { skill_id: skill.id.clone(), bindings, waypoints })
}
