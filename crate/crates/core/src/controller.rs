//! The suturing state machine: insertion, thread sweep, extraction with
//! cinching, handover and pose correction, with closed-loop perception,
//! bounded retries and optional human intervention.
//!
//! The controller only sees the world through [`SutureWorld`]: proprioception
//! (gripper poses), noisy needle observations, and the outcome of the few
//! checks a real system would also get (tissue pass, thread state).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_about_point, GeometryError, Point3, RigidTransform, UnitVector3};
use crate::perception::{pose_agreement, NeedleEstimate, NeedlePose, NeedleSpec, PerceptionError};
use crate::simworld::{
    jaw_center, tool_pose_for_jaw, Event, EventKind, GripperId, InterventionError, Jaw, Motion, MotionError,
    PassOutcome, Primitive, RecoveryDecision, RecoveryKind, ThreadError, WoundSpec,
};

/// Error taxonomy: insertion, extraction, handover, thread management.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    I,
    E,
    H,
    T,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 4] = [ErrorKind::I, ErrorKind::E, ErrorKind::H, ErrorKind::T];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineState {
    Insertion,
    Sweep,
    Extraction,
    Cinch,
    Handover,
    PoseCorrection,
    Done,
    Failed(ErrorKind),
}

impl PipelineState {
    pub fn primitive(self) -> Option<Primitive> {
        match self {
            PipelineState::Insertion => Some(Primitive::Insertion),
            PipelineState::Sweep => Some(Primitive::Sweep),
            PipelineState::Extraction => Some(Primitive::Extraction),
            PipelineState::Cinch => Some(Primitive::Cinch),
            PipelineState::Handover => Some(Primitive::Handover),
            PipelineState::PoseCorrection => Some(Primitive::PoseCorrection),
            PipelineState::Done | PipelineState::Failed(_) => None,
        }
    }
}

/// What the controller needs from a world.
pub trait SutureWorld {
    fn needle_spec(&self) -> NeedleSpec;
    fn wound(&self) -> &WoundSpec;
    fn jaw_depth(&self) -> f64;
    fn clock(&self) -> f64;
    fn gripper_pose(&self, id: GripperId) -> RigidTransform;
    fn left_home(&self) -> RigidTransform;
    fn intervention_budget(&self) -> u32;
    /// Tags subsequent events and motion timing.
    fn begin_step(&mut self, suture: usize, primitive: Primitive);
    fn observe(&mut self) -> Result<NeedleEstimate, PerceptionError>;
    fn execute_motion(&mut self, id: GripperId, motion: Motion) -> Result<(), MotionError>;
    fn tissue_pass_check(&mut self, entry: Point3, exit: Point3) -> PassOutcome;
    fn thread_entanglement_check(&mut self, swept: bool) -> bool;
    fn pull_thread(&mut self, length: f64) -> Result<(), ThreadError>;
    fn human_intervention(&mut self) -> Result<(), InterventionError>;
    fn set_dual_grasp_window(&mut self, open: bool);
    fn record(&mut self, kind: EventKind);
    fn events(&self) -> &[Event];
}

mod degrees {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rad: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(rad.to_degrees())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d).map(f64::to_radians)
    }
}

/// Angles are radians in memory and degrees (`*_deg`) in files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerParams {
    #[serde(rename = "insertion_rotation_deg", with = "degrees")]
    pub insertion_rotation: f64,
    #[serde(rename = "extraction_rotation_deg", with = "degrees")]
    pub extraction_rotation: f64,
    #[serde(rename = "correction_final_rotation_deg", with = "degrees")]
    pub correction_final_rotation: f64,
    pub approach_offset: f64,
    pub approach_advance: f64,
    pub handover_jitter_max: f64,
    pub extraction_progress_threshold: f64,
    pub max_retries: usize,
    pub normal_samples: usize,
    pub correction_corner: Point3,
    pub l_des: f64,
    pub l_each: f64,
    /// Normal change above which a handover grasp is judged to have disturbed the needle.
    #[serde(rename = "handover_normal_epsilon_deg", with = "degrees")]
    pub handover_normal_epsilon: f64,
    /// Straight pull after the extraction rotation.
    pub extraction_pull: f64,
    /// Where the left driver presents the needle for handover (needle center).
    pub handover_location: Point3,
    /// Jaw height above the wound while sweeping.
    pub sweep_height: f64,
    /// Sweep overshoot beyond the first and last site.
    pub sweep_margin: f64,
    /// Lift of the right driver after letting go of the inserted needle.
    pub retreat_height: f64,
    /// Perception attempts per requested estimate before giving up.
    pub observe_attempts: usize,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            insertion_rotation: 45f64.to_radians(),
            extraction_rotation: 80f64.to_radians(),
            correction_final_rotation: 90f64.to_radians(),
            approach_offset: 0.01,
            approach_advance: 0.015,
            handover_jitter_max: 0.005,
            extraction_progress_threshold: 0.02,
            max_retries: 5,
            normal_samples: 10,
            correction_corner: Point3::new(0.05, -0.05, 0.02),
            l_des: 0.08,
            l_each: 0.01,
            handover_normal_epsilon: 3f64.to_radians(),
            extraction_pull: 0.03,
            handover_location: Point3::new(-0.02, -0.01, 0.06),
            sweep_height: 0.004,
            sweep_margin: 0.01,
            retreat_height: 0.02,
            observe_attempts: 3,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, a) in [
            ("insertion_rotation_deg", self.insertion_rotation),
            ("extraction_rotation_deg", self.extraction_rotation),
            ("correction_final_rotation_deg", self.correction_final_rotation),
            ("handover_normal_epsilon_deg", self.handover_normal_epsilon),
        ] {
            if !(a > 0.0 && a <= PI) {
                return Err(format!("{name} = {} must lie in (0, 180]", a.to_degrees()));
            }
        }
        for (name, v) in [
            ("approach_offset", self.approach_offset),
            ("approach_advance", self.approach_advance),
            ("handover_jitter_max", self.handover_jitter_max),
            ("extraction_progress_threshold", self.extraction_progress_threshold),
            ("l_des", self.l_des),
            ("l_each", self.l_each),
            ("extraction_pull", self.extraction_pull),
            ("sweep_height", self.sweep_height),
            ("sweep_margin", self.sweep_margin),
            ("retreat_height", self.retreat_height),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} = {v} must be > 0"));
            }
        }
        if self.observe_attempts == 0 {
            return Err("observe_attempts must be >= 1".into());
        }
        if self.normal_samples == 0 {
            return Err("normal_samples must be >= 1".into());
        }
        if !(self.correction_corner.is_finite() && self.handover_location.is_finite()) {
            return Err("correction_corner and handover_location must be finite".into());
        }
        Ok(())
    }
}

/// Which optional primitives run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub sweep: bool,
    pub cinch: bool,
    pub pose_correction: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        sweep: true,
        cinch: true,
        pose_correction: true,
    };

    /// Successor of `s` on the nominal path.
    pub fn next(&self, s: PipelineState) -> PipelineState {
        use PipelineState::*;
        match s {
            Insertion if self.sweep => Sweep,
            Insertion | Sweep => Extraction,
            Extraction if self.cinch => Cinch,
            Extraction | Cinch => Handover,
            Handover if self.pose_correction => PoseCorrection,
            Handover | PoseCorrection => Done,
            Done => Done,
            Failed(k) => Failed(k),
        }
    }

    /// Whether `from → to` is a legal transition for this stage set.
    pub fn allows(&self, from: Option<PipelineState>, to: PipelineState, human_mode: bool) -> bool {
        use PipelineState::*;
        match (from, to) {
            (None, Insertion) => true,
            (None, _) => false,
            (Some(Failed(_)), Insertion) => human_mode,
            (Some(Failed(_)), _) => false,
            (Some(Done), _) => false,
            (Some(_), Failed(_)) => true,
            (Some(Extraction), Extraction) | (Some(Handover), Handover) => true,
            (Some(f), t) => self.next(f) == t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("entry and exit points coincide")]
    CoincidentSites,
    #[error("site chord {chord} m does not fit a needle of radius {radius} m")]
    ChordTooLong { chord: f64, radius: f64 },
    #[error("needle arc too short to span the bite")]
    NeedleTooShort,
    #[error("entry to exit direction is vertical")]
    VerticalBite,
    #[error("no horizontal approach direction to the regrasp point")]
    NoHorizontalApproach,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("insufficient thread plan: beta = {beta} for suture {i}")]
pub struct CinchError {
    pub i: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{failed} of {total} normal samples failed")]
pub struct CorrectionError {
    pub failed: usize,
    pub total: usize,
}

/// Open-loop insertion: push the tip along the bite, then rotate it in.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertionPlan {
    pub direction: UnitVector3,
    pub depth: f64,
    /// Where the needle should end up, in the body convention.
    pub target: NeedlePose,
    /// Right driver motions: approach, push, rotate.
    pub script: Vec<Motion>,
}

/// Needle pose that passes exactly through `entry` and `exit`, with the
/// buried arc centered on the body and the swage on the entry side.
pub fn insertion_target(entry: Point3, exit: Point3, spec: &NeedleSpec) -> Result<NeedlePose, PlanError> {
    let chord = exit - entry;
    let length = chord.norm();
    if length == 0.0 {
        return Err(PlanError::CoincidentSites);
    }
    if length >= 2.0 * spec.radius {
        return Err(PlanError::ChordTooLong {
            chord: length,
            radius: spec.radius,
        });
    }
    let dir = chord * (1.0 / length);
    let up = Point3::new(0.0, 0.0, 1.0);
    let normal = UnitVector3::new_normalize(dir.cross(up)).map_err(|_| PlanError::VerticalBite)?;
    // Re-orthogonalize so the circle stays in the plane of the bite.
    let lift = UnitVector3::new_normalize(normal.into_inner().cross(dir))?.into_inner();
    let half = 0.5 * length;
    let height = (spec.radius * spec.radius - half * half).sqrt();
    let center = entry.lerp(exit, 0.5) + lift * height;
    let buried = 2.0 * (half / spec.radius).asin();
    if buried >= spec.arc_span {
        return Err(PlanError::NeedleTooShort);
    }
    let exposed = 0.5 * (spec.arc_span - buried);
    let to_entry = entry - center;
    let back = rotation_about_point(normal, -exposed, Point3::ORIGIN)?;
    Ok(NeedlePose::from_swage_direction(
        center,
        normal,
        back.apply_vector(to_entry),
        spec,
    ))
}

/// Plans the right driver motions that take the believed needle through the
/// site. The approach pose holds the needle rotated back by the insertion
/// angle and shifted back by the bite length; the push then brings the tip
/// from the entry to the exit and the rotation seats the needle.
pub fn plan_insertion(
    belief: &NeedlePose,
    gripper: &RigidTransform,
    entry: Point3,
    exit: Point3,
    spec: &NeedleSpec,
    params: &ControllerParams,
) -> Result<InsertionPlan, PlanError> {
    let target = insertion_target(entry, exit, spec)?;
    let depth = entry.distance(exit);
    let direction = UnitVector3::new_normalize(exit - entry)?;
    let n = target.circle.normal;
    let c = target.circle.center;
    // The tip leads the bite, so the believed frame is anchored on the observed tip.
    let bc = belief.circle.center;
    let back = rotation_about_point(belief.circle.normal, -spec.arc_span, Point3::ORIGIN)?;
    let anchored = NeedlePose::from_swage_direction(bc, belief.circle.normal, back.apply_vector(belief.tip - bc), spec);
    let delta = anchored.frame()?.inverse().then(&target.frame()?);
    let seated = gripper.then(&delta);
    let start = seated
        .then(&rotation_about_point(n, -params.insertion_rotation, c)?)
        .then(&RigidTransform::from_translation(direction * -depth));
    Ok(InsertionPlan {
        direction,
        depth,
        target,
        script: vec![
            Motion::MoveTo { pose: start },
            Motion::Translate {
                offset: direction * depth,
            },
            Motion::RotateHeld {
                axis: n,
                angle: params.insertion_rotation,
                pivot: c,
            },
        ],
    })
}

/// Horizontal approach to a point on the needle.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproachPlan {
    pub regrasp: Point3,
    /// Unit horizontal direction from the regrasp point to the approach start.
    pub offset_dir: Point3,
    /// Tool pose before the advance; its tip sits `approach_offset` from the regrasp point.
    pub start: RigidTransform,
    /// Move to start, advance, close.
    pub script: Vec<Motion>,
}

/// Approach from outside the circle: the offset points away from `center` in
/// the horizontal plane, falling back to the direction toward `fallback_from`.
pub fn plan_approach(
    regrasp: Point3,
    center: Point3,
    fallback_from: Point3,
    jaw_depth: f64,
    params: &ControllerParams,
) -> Result<ApproachPlan, PlanError> {
    let radial = (regrasp - center).horizontal();
    let fallback = (fallback_from - regrasp).horizontal();
    let dir = if radial.norm() > 1e-6 {
        radial
    } else if fallback.norm() > 1e-6 {
        fallback
    } else {
        return Err(PlanError::NoHorizontalApproach);
    };
    let h = UnitVector3::new_normalize(dir)?;
    let approach = h.flipped();
    let tip_start = regrasp + h * params.approach_offset;
    let start = tool_pose_for_jaw(tip_start + h * jaw_depth, approach, jaw_depth);
    Ok(ApproachPlan {
        regrasp,
        offset_dir: h.into_inner(),
        start,
        script: vec![
            Motion::MoveTo { pose: start },
            Motion::Translate {
                offset: approach * params.approach_advance,
            },
            Motion::Jaw { jaw: Jaw::Closed },
        ],
    })
}

/// Left driver motions for extraction: approach the endpoint nearer to it,
/// close, rotate the needle out about its (body-convention) normal, pull.
pub fn plan_extraction(
    observed: &NeedlePose,
    left_gripper: &RigidTransform,
    jaw_depth: f64,
    params: &ControllerParams,
) -> Result<(ApproachPlan, Vec<Motion>), PlanError> {
    let jaws = jaw_center(left_gripper, jaw_depth);
    let [a, b] = observed.endpoints();
    let regrasp = if a.distance(jaws) <= b.distance(jaws) { a } else { b };
    let approach = plan_approach(regrasp, observed.circle.center, jaws, jaw_depth, params)?;
    let n = observed.circle.normal;
    let c = observed.circle.center;
    let turned = rotation_about_point(n, params.extraction_rotation, c)?.apply(observed.swage);
    let tangent = UnitVector3::new_normalize(n.into_inner().cross(turned - c))?;
    let mut script = approach.script.clone();
    script.push(Motion::RotateHeld {
        axis: n,
        angle: params.extraction_rotation,
        pivot: c,
    });
    script.push(Motion::Translate {
        offset: tangent * params.extraction_pull,
    });
    Ok((approach, script))
}

/// `β = l_des − (i − 1)·l_each`.
pub fn cinch_length(i: usize, l_des: f64, l_each: f64) -> Result<f64, CinchError> {
    assert!(i >= 1, "suture indices start at 1");
    let beta = l_des - (i - 1) as f64 * l_each;
    if beta < 0.0 {
        return Err(CinchError { i, beta });
    }
    Ok(beta)
}

/// Right driver approach to the endpoint farther from the left driver,
/// shifted by `jitter`.
pub fn plan_handover(
    observed: &NeedlePose,
    left_jaws: Point3,
    jitter: Point3,
    jaw_depth: f64,
    params: &ControllerParams,
) -> Result<ApproachPlan, PlanError> {
    let [a, b] = observed.endpoints();
    let far = if a.distance(left_jaws) >= b.distance(left_jaws) {
        a
    } else {
        b
    };
    let mut plan = plan_approach(
        far + jitter,
        observed.circle.center + jitter,
        left_jaws,
        jaw_depth,
        params,
    )?;
    plan.regrasp = far + jitter;
    Ok(plan)
}

/// Uniform jitter magnitude in `[0, max)` along a uniform horizontal direction.
pub fn draw_jitter(rng: &mut impl Rng, max: f64) -> Point3 {
    let magnitude = rng.random::<f64>() * max;
    let phi = rng.random::<f64>() * 2.0 * PI;
    Point3::new(phi.cos(), phi.sin(), 0.0) * magnitude
}

/// Extraction progress check. `retries_used` counts retries already spent.
pub fn recover_extraction(
    before: &NeedlePose,
    after: &NeedlePose,
    retries_used: usize,
    params: &ControllerParams,
) -> RecoveryDecision {
    extraction_decision(pose_agreement(before, after).endpoint_dist, retries_used, params)
}

pub fn extraction_decision(displacement: f64, retries_used: usize, params: &ControllerParams) -> RecoveryDecision {
    if displacement >= params.extraction_progress_threshold {
        RecoveryDecision::Proceed
    } else if retries_used < params.max_retries {
        RecoveryDecision::Retry
    } else {
        RecoveryDecision::Fail
    }
}

/// Handover check: a grasp that moves the needle's normal by more than the
/// epsilon disturbed it and is redone.
pub fn recover_handover(before: UnitVector3, after: UnitVector3, params: &ControllerParams) -> RecoveryDecision {
    if before.axial_angle_to(after) > params.handover_normal_epsilon {
        RecoveryDecision::Retry
    } else {
        RecoveryDecision::Proceed
    }
}

/// Sign-aligns every normal to the first, then takes the normalized mean.
pub fn aggregate_normals(normals: &[UnitVector3]) -> Option<UnitVector3> {
    let first = *normals.first()?;
    let sum = normals.iter().fold(Point3::ORIGIN, |acc, n| {
        acc + if n.dot(first) < 0.0 { n.flipped() } else { *n }.into_inner()
    });
    UnitVector3::new_normalize(sum).ok()
}

/// Axis and angle of the minimal rotation taking `from` to `to`.
pub fn rotation_between(from: UnitVector3, to: UnitVector3) -> (UnitVector3, f64) {
    let cross = from.into_inner().cross(to.into_inner());
    let angle = cross.norm().atan2(from.dot(to));
    match UnitVector3::new_normalize(cross) {
        Ok(axis) if cross.norm() > 1e-12 => (axis, angle),
        _ => {
            // Parallel or antiparallel: any perpendicular axis works.
            let f = from.into_inner();
            let helper = if f.x.abs() < 0.9 {
                Point3::new(1.0, 0.0, 0.0)
            } else {
                Point3::new(0.0, 1.0, 0.0)
            };
            let axis = UnitVector3::new_normalize(f.cross(helper)).expect("non-parallel helper");
            (axis, angle)
        }
    }
}

/// Puts an estimate into the body convention: `swage_hint` picks the swage
/// (nearest endpoint if `swage_near`, else farthest), and the normal sign
/// makes the body run right-handed from swage to tip through the observed
/// arc midpoint.
pub fn label_estimate(est: &NeedleEstimate, swage_hint: Point3, swage_near: bool) -> NeedlePose {
    let [a, b] = est.pose.endpoints();
    let a_is_swage = (a.distance(swage_hint) <= b.distance(swage_hint)) == swage_near;
    let (swage, tip) = if a_is_swage { (a, b) } else { (b, a) };
    let c = est.pose.circle.center;
    let mut circle = est.pose.circle;
    let turn = (swage - c)
        .cross(est.diagnostics.arc_midpoint - c)
        .dot(circle.normal.into_inner());
    if turn < 0.0 {
        circle.normal = circle.normal.flipped();
    }
    NeedlePose { circle, tip, swage }
}

/// Result of one [`Controller::run_suture`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state_before: PipelineState,
    pub state_after: PipelineState,
    /// Most retries any single primitive used in the final attempt.
    pub retries_used: usize,
    pub events: Vec<Event>,
    pub error: Option<ErrorKind>,
}

#[derive(Debug)]
struct Failure {
    state: PipelineState,
    kind: ErrorKind,
    detail: String,
}

fn failure(state: PipelineState, kind: ErrorKind, detail: impl Into<String>) -> Failure {
    Failure {
        state,
        kind,
        detail: detail.into(),
    }
}

/// Drives one world through sutures.
#[derive(Debug, Clone)]
pub struct Controller {
    pub params: ControllerParams,
    pub stages: Stages,
    pub human_mode: bool,
    rng: ChaCha8Rng,
    /// Needle belief (body convention) carried into the next insertion.
    belief: Option<NeedlePose>,
    /// Latest estimate, handed from one primitive to the next.
    last_estimate: Option<NeedleEstimate>,
    retries_used: usize,
}

impl Controller {
    pub fn new(params: ControllerParams, stages: Stages, human_mode: bool, seed: u64) -> Self {
        Self {
            params,
            stages,
            human_mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            belief: None,
            last_estimate: None,
            retries_used: 0,
        }
    }

    fn enter<W: SutureWorld>(&self, world: &mut W, i: usize, from: Option<PipelineState>, to: PipelineState) {
        if let Some(p) = to.primitive() {
            world.begin_step(i, p);
        }
        world.record(EventKind::Transition { from, to });
    }

    /// Runs suture `i` (1-based) to completion or terminal failure. In human
    /// mode a failure with budget left triggers an intervention and the
    /// suture restarts at insertion.
    pub fn run_suture<W: SutureWorld>(&mut self, world: &mut W, i: usize) -> StepOutcome {
        let first_event = world.events().len();
        self.enter(world, i, None, PipelineState::Insertion);
        let state_after = loop {
            self.retries_used = 0;
            match self.attempt(world, i) {
                Ok(()) => break PipelineState::Done,
                Err(f) => {
                    let failed = PipelineState::Failed(f.kind);
                    world.record(EventKind::Error {
                        kind: f.kind,
                        detail: f.detail,
                    });
                    world.record(EventKind::Transition {
                        from: Some(f.state),
                        to: failed,
                    });
                    self.belief = None;
                    self.last_estimate = None;
                    if self.human_mode && world.human_intervention().is_ok() {
                        self.enter(world, i, Some(failed), PipelineState::Insertion);
                        continue;
                    }
                    break failed;
                }
            }
        };
        StepOutcome {
            state_before: PipelineState::Insertion,
            state_after,
            retries_used: self.retries_used,
            events: world.events()[first_event..].to_vec(),
            error: match state_after {
                PipelineState::Failed(k) => Some(k),
                _ => None,
            },
        }
    }

    fn attempt<W: SutureWorld>(&mut self, world: &mut W, i: usize) -> Result<(), Failure> {
        let mut state = PipelineState::Insertion;
        let mut swept = false;
        loop {
            match state {
                PipelineState::Insertion => self.insertion(world, i)?,
                PipelineState::Sweep => {
                    self.sweep(world)?;
                    swept = true;
                }
                PipelineState::Extraction => self.extraction(world, i, swept)?,
                PipelineState::Cinch => self.cinch(world, i)?,
                PipelineState::Handover => self.handover(world, i)?,
                PipelineState::PoseCorrection => self.pose_correction(world)?,
                PipelineState::Done | PipelineState::Failed(_) => return Ok(()),
            }
            let next = self.stages.next(state);
            self.enter(world, i, Some(state), next);
            state = next;
        }
    }

    fn look<W: SutureWorld>(&self, world: &mut W) -> Result<NeedleEstimate, PerceptionError> {
        let mut result = world.observe();
        for _ in 1..self.params.observe_attempts {
            if result.is_ok() {
                break;
            }
            result = world.observe();
        }
        result
    }

    fn jaws<W: SutureWorld>(&self, world: &W, id: GripperId) -> Point3 {
        jaw_center(&world.gripper_pose(id), world.jaw_depth())
    }

    fn insertion<W: SutureWorld>(&mut self, world: &mut W, i: usize) -> Result<(), Failure> {
        use PipelineState::Insertion as S;
        let spec = world.needle_spec();
        let belief = match self.belief.take() {
            Some(b) => b,
            None => {
                let est = self
                    .look(world)
                    .map_err(|e| failure(S, ErrorKind::I, format!("no needle estimate before insertion: {e}")))?;
                label_estimate(&est, self.jaws(world, GripperId::Right), true)
            }
        };
        let entry = world.wound().entry_points[i - 1];
        let exit = world.wound().exit_points[i - 1];
        let plan = plan_insertion(
            &belief,
            &world.gripper_pose(GripperId::Right),
            entry,
            exit,
            &spec,
            &self.params,
        )
        .map_err(|e| failure(S, ErrorKind::I, format!("insertion plan: {e}")))?;
        for m in plan.script {
            world
                .execute_motion(GripperId::Right, m)
                .map_err(|e| failure(S, ErrorKind::I, format!("insertion motion: {e}")))?;
        }
        let result = world.tissue_pass_check(entry, exit);
        if !result.is_ok() {
            return Err(failure(S, ErrorKind::I, format!("tissue pass failed: {result:?}")));
        }
        let lift = Point3::new(0.0, 0.0, self.params.retreat_height);
        for m in [Motion::Jaw { jaw: Jaw::Open }, Motion::Translate { offset: lift }] {
            world
                .execute_motion(GripperId::Right, m)
                .map_err(|e| failure(S, ErrorKind::I, format!("insertion retreat: {e}")))?;
        }
        Ok(())
    }

    fn sweep<W: SutureWorld>(&mut self, world: &mut W) -> Result<(), Failure> {
        let wound = world.wound();
        let axis = wound.wound_axis;
        let c = wound.centroid();
        let along: Vec<f64> = wound
            .entry_points
            .iter()
            .chain(&wound.exit_points)
            .map(|p| (*p - c).dot(axis.into_inner()))
            .collect();
        let lo = along.iter().copied().fold(f64::INFINITY, f64::min) - self.params.sweep_margin;
        let hi = along.iter().copied().fold(f64::NEG_INFINITY, f64::max) + self.params.sweep_margin;
        let start = c + axis * lo + Point3::new(0.0, 0.0, self.params.sweep_height);
        let down = UnitVector3::new_normalize(Point3::new(0.0, 0.0, -1.0)).expect("unit");
        let pose = tool_pose_for_jaw(start, down, world.jaw_depth());
        for m in [
            Motion::Jaw { jaw: Jaw::Open },
            Motion::MoveTo { pose },
            Motion::Translate {
                offset: axis * (hi - lo),
            },
        ] {
            world
                .execute_motion(GripperId::Right, m)
                .map_err(|e| failure(PipelineState::Sweep, ErrorKind::T, format!("sweep motion: {e}")))?;
        }
        Ok(())
    }

    fn retry<W: SutureWorld>(&mut self, world: &mut W, i: usize, state: PipelineState, attempt: usize) {
        self.retries_used = self.retries_used.max(attempt);
        world.record(EventKind::Retry { attempt });
        self.enter(world, i, Some(state), state);
    }

    fn extraction<W: SutureWorld>(&mut self, world: &mut W, i: usize, swept: bool) -> Result<(), Failure> {
        use PipelineState::Extraction as S;
        let depth = world.jaw_depth();
        let mut checked = false;
        let mut last_issue = String::from("no attempt made");
        for attempt in 0..=self.params.max_retries {
            if attempt > 0 {
                self.retry(world, i, S, attempt);
                let home = world.left_home();
                for m in [Motion::Jaw { jaw: Jaw::Open }, Motion::MoveTo { pose: home }] {
                    world
                        .execute_motion(GripperId::Left, m)
                        .map_err(|e| failure(S, ErrorKind::E, format!("extraction retreat: {e}")))?;
                }
            }
            let before = match self.look(world) {
                Ok(e) => e,
                Err(e) => {
                    last_issue = format!("observation failed: {e}");
                    continue;
                }
            };
            if !checked {
                checked = true;
                if world.thread_entanglement_check(swept) {
                    return Err(failure(
                        S,
                        ErrorKind::T,
                        "thread caught with the needle at the extraction grasp",
                    ));
                }
            }
            let left = world.gripper_pose(GripperId::Left);
            let labeled = label_estimate(&before, jaw_center(&left, depth), false);
            let script = match plan_extraction(&labeled, &left, depth, &self.params) {
                Ok((_, s)) => s,
                Err(e) => {
                    last_issue = format!("extraction plan: {e}");
                    continue;
                }
            };
            if let Err(e) = script
                .into_iter()
                .try_for_each(|m| world.execute_motion(GripperId::Left, m))
            {
                last_issue = format!("extraction motion: {e}");
                continue;
            }
            let after = match self.look(world) {
                Ok(e) => e,
                Err(e) => {
                    last_issue = format!("observation failed: {e}");
                    continue;
                }
            };
            let moved = pose_agreement(&before.pose, &after.pose).endpoint_dist;
            let decision = extraction_decision(moved, attempt, &self.params);
            world.record(EventKind::RecoveryCheck {
                check: RecoveryKind::Extraction,
                value: moved,
                threshold: self.params.extraction_progress_threshold,
                decision,
            });
            match decision {
                RecoveryDecision::Proceed => {
                    self.last_estimate = Some(after);
                    return Ok(());
                }
                RecoveryDecision::Retry => last_issue = format!("endpoint moved only {moved:.4} m"),
                RecoveryDecision::Fail => {
                    last_issue = format!("endpoint moved only {moved:.4} m");
                    break;
                }
            }
        }
        Err(failure(
            S,
            ErrorKind::E,
            format!(
                "needle still in tissue after {} retries ({last_issue})",
                self.params.max_retries
            ),
        ))
    }

    fn cinch<W: SutureWorld>(&mut self, world: &mut W, i: usize) -> Result<(), Failure> {
        use PipelineState::Cinch as S;
        let beta = cinch_length(i, self.params.l_des, self.params.l_each)
            .map_err(|e| failure(S, ErrorKind::T, e.to_string()))?;
        world
            .pull_thread(beta)
            .map_err(|e| failure(S, ErrorKind::T, e.to_string()))
    }

    fn handover<W: SutureWorld>(&mut self, world: &mut W, i: usize) -> Result<(), Failure> {
        use PipelineState::Handover as S;
        let depth = world.jaw_depth();
        let Some(last) = self.last_estimate.take() else {
            return Err(failure(S, ErrorKind::H, "no needle estimate after extraction"));
        };
        let held = label_estimate(&last, self.jaws(world, GripperId::Left), false);
        let to_station = self.params.handover_location - held.circle.center;
        world
            .execute_motion(GripperId::Left, Motion::Translate { offset: to_station })
            .map_err(|e| failure(S, ErrorKind::H, format!("handover motion: {e}")))?;

        let mut last_issue = String::from("no attempt made");
        for attempt in 0..=self.params.max_retries {
            let mut jitter = Point3::ORIGIN;
            if attempt > 0 {
                self.retry(world, i, S, attempt);
                world
                    .execute_motion(GripperId::Right, Motion::Jaw { jaw: Jaw::Open })
                    .map_err(|e| failure(S, ErrorKind::H, format!("handover retreat: {e}")))?;
                jitter = draw_jitter(&mut self.rng, self.params.handover_jitter_max);
                world.record(EventKind::Jitter {
                    offset: jitter,
                    magnitude: jitter.norm(),
                });
            }
            let before = match self.look(world) {
                Ok(e) => e,
                Err(e) => {
                    last_issue = format!("observation failed: {e}");
                    continue;
                }
            };
            let left_jaws = self.jaws(world, GripperId::Left);
            let plan = match plan_handover(&before.pose, left_jaws, jitter, depth, &self.params) {
                Ok(p) => p,
                Err(e) => {
                    last_issue = format!("handover plan: {e}");
                    continue;
                }
            };
            world.set_dual_grasp_window(true);
            if let Err(e) = plan
                .script
                .into_iter()
                .try_for_each(|m| world.execute_motion(GripperId::Right, m))
            {
                self.close_window(world)?;
                last_issue = format!("handover motion: {e}");
                continue;
            }
            let after = match self.look(world) {
                Ok(e) => e,
                Err(e) => {
                    self.close_window(world)?;
                    last_issue = format!("observation failed: {e}");
                    continue;
                }
            };
            let change = before.pose.circle.normal.axial_angle_to(after.pose.circle.normal);
            let decision = recover_handover(before.pose.circle.normal, after.pose.circle.normal, &self.params);
            world.record(EventKind::RecoveryCheck {
                check: RecoveryKind::Handover,
                value: change,
                threshold: self.params.handover_normal_epsilon,
                decision,
            });
            if decision == RecoveryDecision::Retry {
                self.close_window(world)?;
                last_issue = format!("normal changed by {:.2} deg", change.to_degrees());
                continue;
            }
            let home = world.left_home();
            world
                .execute_motion(GripperId::Left, Motion::Jaw { jaw: Jaw::Open })
                .map_err(|e| failure(S, ErrorKind::H, e.to_string()))?;
            world.set_dual_grasp_window(false);
            world
                .execute_motion(GripperId::Left, Motion::MoveTo { pose: home })
                .map_err(|e| failure(S, ErrorKind::H, format!("handover retreat: {e}")))?;
            let post = self
                .look(world)
                .map_err(|e| failure(S, ErrorKind::H, format!("needle lost after release: {e}")))?;
            self.belief = Some(label_estimate(&post, self.jaws(world, GripperId::Right), true));
            self.last_estimate = Some(post);
            return Ok(());
        }
        Err(failure(
            S,
            ErrorKind::H,
            format!(
                "right driver failed to take the needle after {} retries ({last_issue})",
                self.params.max_retries
            ),
        ))
    }

    /// Opens the right jaws and ends the dual-grasp window.
    fn close_window<W: SutureWorld>(&self, world: &mut W) -> Result<(), Failure> {
        world
            .execute_motion(GripperId::Right, Motion::Jaw { jaw: Jaw::Open })
            .map_err(|e| failure(PipelineState::Handover, ErrorKind::H, e.to_string()))?;
        world.set_dual_grasp_window(false);
        Ok(())
    }

    fn pose_correction<W: SutureWorld>(&mut self, world: &mut W) -> Result<(), Failure> {
        use PipelineState::PoseCorrection as S;
        let Some(held) = self.belief.take() else {
            return Err(failure(S, ErrorKind::I, "no needle belief before pose correction"));
        };
        world
            .execute_motion(
                GripperId::Right,
                Motion::Translate {
                    offset: self.params.correction_corner - held.circle.center,
                },
            )
            .map_err(|e| failure(S, ErrorKind::I, format!("pose correction motion: {e}")))?;

        let right_jaws = self.jaws(world, GripperId::Right);
        let total = self.params.normal_samples;
        let mut samples = Vec::with_capacity(total);
        for _ in 0..total {
            if let Ok(e) = world.observe() {
                samples.push(label_estimate(&e, right_jaws, true));
            }
        }
        let failed = total - samples.len();
        if 2 * failed > total || samples.is_empty() {
            return Err(failure(S, ErrorKind::I, CorrectionError { failed, total }.to_string()));
        }
        let raw: Vec<UnitVector3> = samples
            .iter()
            .map(|p| crate::perception::canonical_normal(p.circle.normal))
            .collect();
        let mean = aggregate_normals(&raw).ok_or_else(|| failure(S, ErrorKind::I, "normal samples cancel out"))?;
        let k = 1.0 / samples.len() as f64;
        let center = samples.iter().fold(Point3::ORIGIN, |a, p| a + p.circle.center) * k;
        let swage = samples.iter().fold(Point3::ORIGIN, |a, p| a + p.swage) * k;
        let tip = samples.iter().fold(Point3::ORIGIN, |a, p| a + p.tip) * k;
        let sign: f64 = samples.iter().map(|p| p.circle.normal.dot(mean)).sum();
        let body_normal = if sign < 0.0 { mean.flipped() } else { mean };

        let (axis, angle) = rotation_between(mean, UnitVector3::Y);
        let motions = [
            Motion::RotateHeld {
                axis,
                angle,
                pivot: center,
            },
            Motion::RotateHeld {
                axis: UnitVector3::Y,
                angle: self.params.correction_final_rotation,
                pivot: center,
            },
        ];
        let mut moved = RigidTransform::identity();
        for m in motions {
            if let Motion::RotateHeld { axis, angle, pivot } = m {
                moved = moved.then(
                    &rotation_about_point(axis, angle, pivot).map_err(|e| failure(S, ErrorKind::I, e.to_string()))?,
                );
            }
            world
                .execute_motion(GripperId::Right, m)
                .map_err(|e| failure(S, ErrorKind::I, format!("pose correction motion: {e}")))?;
        }
        let mut circle = held.circle;
        circle.center = center;
        circle.normal = body_normal;
        self.belief = Some(NeedlePose { circle, tip, swage }.transformed(&moved));
        Ok(())
    }
}

/// A violated trace invariant.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("event {index}: {message}")]
pub struct TraceViolation {
    pub index: usize,
    pub message: String,
}

/// Checks one trial's event trace against the controller contracts: legal
/// transitions, retry bounds per primitive per suture attempt, observation
/// before every grasp, monotone time, exact cinch lengths, and at most
/// `intervention_budget` interventions.
pub fn validate_trace(
    events: &[Event],
    params: &ControllerParams,
    stages: &Stages,
    human_mode: bool,
    intervention_budget: u32,
) -> Result<(), TraceViolation> {
    let bad = |index: usize, message: String| Err(TraceViolation { index, message });
    let mut last_t = f64::NEG_INFINITY;
    let mut state: Option<PipelineState> = None;
    let mut retries: std::collections::HashMap<PipelineState, usize> = Default::default();
    let mut observed = false;
    let mut interventions = 0u32;
    for (k, e) in events.iter().enumerate() {
        if !(e.t >= last_t) {
            return bad(k, format!("time went backwards: {} after {last_t}", e.t));
        }
        last_t = e.t;
        match &e.kind {
            EventKind::Transition { from, to } => {
                let expected_from = match (state, from) {
                    (Some(PipelineState::Done), None) | (None, None) => true,
                    (Some(PipelineState::Failed(_)), None) => !human_mode,
                    (s, f) => s == *f,
                };
                if !expected_from {
                    return bad(k, format!("transition from {from:?} while in {state:?}"));
                }
                if !stages.allows(*from, *to, human_mode) {
                    return bad(k, format!("illegal transition {from:?} -> {to:?}"));
                }
                if *to == PipelineState::Insertion {
                    retries.clear();
                }
                observed = false;
                state = Some(*to);
            }
            EventKind::Retry { .. } => {
                let Some(s) = state else {
                    return bad(k, "retry outside any state".into());
                };
                let n = retries.entry(s).or_insert(0);
                *n += 1;
                if *n > params.max_retries {
                    return bad(k, format!("{n} retries in {s:?}, limit {}", params.max_retries));
                }
            }
            EventKind::Observation { .. } => observed = true,
            EventKind::GraspClose { .. } => {
                if !observed {
                    return bad(k, "grasp closed without a prior observation in this step".into());
                }
            }
            EventKind::ThreadPull { length, .. } => {
                if e.primitive == Some(Primitive::Cinch) {
                    match cinch_length(e.suture, params.l_des, params.l_each) {
                        Ok(beta) if beta == *length => {}
                        other => return bad(k, format!("cinch pulled {length}, expected {other:?}")),
                    }
                }
            }
            EventKind::Intervention { .. } => {
                interventions += 1;
                if interventions > intervention_budget {
                    return bad(
                        k,
                        format!("{interventions} interventions exceed budget {intervention_budget}"),
                    );
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::canonical_normal;
    use crate::simworld::{FailureModel, SimWorld, WorldConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::VecDeque;

    fn ideal_world(seed: u64) -> SimWorld {
        SimWorld::new(WorldConfig::ideal(), seed)
    }

    fn controller(stages: Stages, human: bool) -> Controller {
        Controller::new(ControllerParams::default(), stages, human, 99)
    }

    fn count(events: &[Event], f: impl Fn(&EventKind) -> bool) -> usize {
        events.iter().filter(|e| f(&e.kind)).count()
    }

    #[test]
    fn cinch_length_examples() {
        assert_eq!(cinch_length(1, 0.08, 0.01).unwrap(), 0.08);
        assert!((cinch_length(3, 0.20, 0.03).unwrap() - 0.14).abs() < 1e-15);
        let err = cinch_length(5, 0.10, 0.03).unwrap_err();
        assert_eq!(err.i, 5);
        assert!((err.beta + 0.02).abs() < 1e-15);
    }

    #[test]
    fn insertion_plan_direction_and_angle() {
        let spec = NeedleSpec::default();
        let params = ControllerParams::default();
        let belief = NeedlePose::from_swage_direction(
            Point3::new(0.05, -0.05, 0.02),
            UnitVector3::Y,
            Point3::new(1.0, 0.0, 0.0),
            &spec,
        );
        let plan = plan_insertion(
            &belief,
            &RigidTransform::identity(),
            Point3::ORIGIN,
            Point3::new(0.01, 0.0, 0.0),
            &spec,
            &params,
        )
        .unwrap();
        assert!(plan.direction.into_inner().distance(Point3::new(1.0, 0.0, 0.0)) < 1e-15);
        assert!((plan.depth - 0.01).abs() < 1e-15);
        match plan.script[1] {
            Motion::Translate { offset } => assert!(offset.distance(Point3::new(0.01, 0.0, 0.0)) < 1e-15),
            m => panic!("unexpected {m:?}"),
        }
        match plan.script[2] {
            Motion::RotateHeld { angle, .. } => assert_eq!(angle, 45f64.to_radians()),
            m => panic!("unexpected {m:?}"),
        }
    }

    #[test]
    fn insertion_plan_rejects_bad_sites() {
        let spec = NeedleSpec::default();
        let params = ControllerParams::default();
        let belief =
            NeedlePose::from_swage_direction(Point3::ORIGIN, UnitVector3::Y, Point3::new(1.0, 0.0, 0.0), &spec);
        let g = RigidTransform::identity();
        let p = Point3::new(0.01, 0.0, 0.0);
        assert_eq!(
            plan_insertion(&belief, &g, p, p, &spec, &params).unwrap_err(),
            PlanError::CoincidentSites
        );
        assert!(matches!(
            plan_insertion(&belief, &g, Point3::ORIGIN, Point3::new(0.03, 0.0, 0.0), &spec, &params),
            Err(PlanError::ChordTooLong { .. })
        ));
        assert_eq!(
            plan_insertion(&belief, &g, Point3::ORIGIN, Point3::new(0.0, 0.0, 0.01), &spec, &params).unwrap_err(),
            PlanError::VerticalBite
        );
    }

    #[test]
    fn insertion_target_passes_through_both_sites() {
        let spec = NeedleSpec::default();
        let (entry, exit) = (Point3::new(0.008, 0.0, 0.0), Point3::new(-0.008, 0.0, 0.0));
        let t = insertion_target(entry, exit, &spec).unwrap();
        assert!(t.distance_to_body(entry, &spec) < 1e-12);
        assert!(t.distance_to_body(exit, &spec) < 1e-12);
        assert!(t.tip.z > 0.0 && t.swage.z > 0.0);
        assert!(t.swage.x > t.tip.x, "swage stays on the entry side");
    }

    #[test]
    fn executed_insertion_leaves_tip_beyond_exit() {
        for seed in 0..5 {
            let mut w = ideal_world(seed);
            let params = ControllerParams::default();
            let est = w.observe().unwrap();
            let right = jaw_center(&w.gripper_pose(GripperId::Right), w.jaw_depth());
            let belief = label_estimate(&est, right, true);
            let (entry, exit) = (w.wound().entry_points[0], w.wound().exit_points[0]);
            let spec = w.needle_spec();
            let plan = plan_insertion(&belief, &w.gripper_pose(GripperId::Right), entry, exit, &spec, &params).unwrap();
            for m in plan.script.clone() {
                w.execute_motion(GripperId::Right, m).unwrap();
            }
            let tip = w.needle_true.tip;
            assert!((tip - exit).dot(plan.direction.into_inner()) > 0.0);
            assert_eq!(w.tissue_pass_check(entry, exit), PassOutcome::Ok);
        }
    }

    fn observed_pose() -> NeedlePose {
        NeedlePose::from_swage_direction(
            Point3::new(0.0, 0.0, 0.0),
            UnitVector3::from_components(0.0, 0.3, 1.0).unwrap(),
            Point3::new(1.0, 0.0, 0.0),
            &NeedleSpec::default(),
        )
    }

    #[test]
    fn extraction_regrasps_nearer_endpoint_with_offsets() {
        let params = ControllerParams::default();
        let pose = observed_pose();
        let left = tool_pose_for_jaw(Point3::new(-0.06, 0.0, 0.07), UnitVector3::X, 0.005);
        let (plan, script) = plan_extraction(&pose, &left, 0.005, &params).unwrap();
        let jaws = jaw_center(&left, 0.005);
        let a = if pose.tip.distance(jaws) < pose.swage.distance(jaws) {
            pose.tip
        } else {
            pose.swage
        };
        assert_eq!(plan.regrasp, a);
        let start_tip = plan.start.translation();
        assert!((start_tip.distance(a) - 0.01).abs() < 1e-15);
        assert!((start_tip - a).z.abs() < 1e-15, "offset is horizontal");
        let Motion::Translate { offset } = script[1] else {
            panic!()
        };
        let end_tip = start_tip + offset;
        assert!(
            (end_tip.distance(a) - 0.005).abs() < 1e-15,
            "overshoot past the regrasp point"
        );
        assert!((jaw_center(&plan.start.then(&RigidTransform::from_translation(offset)), 0.005).distance(a)) < 1e-15);
        assert!(matches!(script[2], Motion::Jaw { jaw: Jaw::Closed }));
        let Motion::RotateHeld { angle, .. } = script[3] else {
            panic!()
        };
        assert_eq!(angle, 80f64.to_radians());
    }

    #[test]
    fn handover_targets_far_endpoint() {
        let params = ControllerParams::default();
        let pose = observed_pose();
        let left_jaws = pose.tip + Point3::new(-0.001, 0.0, 0.0);
        let plan = plan_handover(&pose, left_jaws, Point3::ORIGIN, 0.005, &params).unwrap();
        assert_eq!(plan.regrasp, pose.swage);
        let jitter = Point3::new(0.001, 0.002, 0.0);
        let plan = plan_handover(&pose, left_jaws, jitter, 0.005, &params).unwrap();
        assert!(plan.regrasp.distance(pose.swage + jitter) < 1e-15);
    }

    #[test]
    fn jitter_is_horizontal_and_below_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100_000 {
            let j = draw_jitter(&mut rng, 0.005);
            assert!(j.norm() < 0.005 && j.norm() >= 0.0);
            assert_eq!(j.z, 0.0);
        }
    }

    #[test]
    fn extraction_decisions() {
        let p = ControllerParams::default();
        assert_eq!(extraction_decision(0.015, 0, &p), RecoveryDecision::Retry);
        assert_eq!(extraction_decision(0.05, 0, &p), RecoveryDecision::Proceed);
        assert_eq!(extraction_decision(0.02, 0, &p), RecoveryDecision::Proceed);
        assert_eq!(extraction_decision(0.015, 4, &p), RecoveryDecision::Retry);
        assert_eq!(extraction_decision(0.015, 5, &p), RecoveryDecision::Fail);
        let pose = observed_pose();
        let moved = pose.transformed(&RigidTransform::from_translation(Point3::new(0.0, 0.0, 0.05)));
        assert_eq!(recover_extraction(&pose, &moved, 0, &p), RecoveryDecision::Proceed);
        assert_eq!(recover_extraction(&pose, &pose, 0, &p), RecoveryDecision::Retry);
    }

    #[test]
    fn handover_decisions() {
        let p = ControllerParams::default();
        let n = UnitVector3::Y;
        assert_eq!(recover_handover(n, n, &p), RecoveryDecision::Proceed);
        assert_eq!(recover_handover(n, n.flipped(), &p), RecoveryDecision::Proceed);
        let tilted = rotation_about_point(UnitVector3::X, 5f64.to_radians(), Point3::ORIGIN)
            .unwrap()
            .apply_unit(n);
        assert_eq!(recover_handover(n, tilted, &p), RecoveryDecision::Retry);
        let at_eps = ControllerParams {
            handover_normal_epsilon: n.axial_angle_to(tilted),
            ..p
        };
        assert_eq!(recover_handover(n, tilted, &at_eps), RecoveryDecision::Proceed);
    }

    #[test]
    fn aggregation_aligns_signs() {
        let a = UnitVector3::from_components(0.1, 1.0, 0.0).unwrap();
        let b = UnitVector3::from_components(-0.1, 1.0, 0.0).unwrap();
        let mean = aggregate_normals(&[a, b.flipped(), a.flipped(), b]).unwrap();
        assert!(mean.into_inner().distance(Point3::new(0.0, 1.0, 0.0)) < 1e-12);
        assert!(aggregate_normals(&[]).is_none());
    }

    /// Tilts `n` by an angle uniform in [0, max] about a random perpendicular axis.
    fn tilt(n: UnitVector3, max: f64, rng: &mut ChaCha8Rng) -> UnitVector3 {
        let helper = if n.x().abs() < 0.9 {
            Point3::new(1.0, 0.0, 0.0)
        } else {
            Point3::new(0.0, 1.0, 0.0)
        };
        let u = UnitVector3::new_normalize(n.into_inner().cross(helper)).unwrap();
        let spin = rotation_about_point(n, rng.random::<f64>() * 2.0 * PI, Point3::ORIGIN).unwrap();
        let axis = spin.apply_unit(u);
        rotation_about_point(axis, rng.random::<f64>() * max, Point3::ORIGIN)
            .unwrap()
            .apply_unit(n)
    }

    #[test]
    fn correction_of_noisy_normals_lands_near_y() {
        let mut good = 0;
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = crate::perception::random_needle_pose(&NeedleSpec::default(), Point3::ORIGIN, 0.0, seed)
                .circle
                .normal;
            let samples: Vec<UnitVector3> = (0..10)
                .map(|k| {
                    let s = tilt(truth, 2f64.to_radians(), &mut rng);
                    if k % 3 == 1 {
                        s.flipped()
                    } else {
                        s
                    }
                })
                .collect();
            let mean = aggregate_normals(&samples).unwrap();
            let (axis, angle) = rotation_between(mean, UnitVector3::Y);
            let corrected = rotation_about_point(axis, angle, Point3::ORIGIN)
                .unwrap()
                .apply_unit(truth);
            if corrected.axial_angle_to(UnitVector3::Y) <= 1f64.to_radians() {
                good += 1;
            }
        }
        assert!(good >= 475, "{good}/500");
    }

    #[test]
    fn rotation_between_handles_parallel_cases() {
        let (_, angle) = rotation_between(UnitVector3::Y, UnitVector3::Y);
        assert_eq!(angle, 0.0);
        let (axis, angle) = rotation_between(UnitVector3::Y, UnitVector3::Y.flipped());
        assert!((angle - PI).abs() < 1e-12);
        assert!(axis.dot(UnitVector3::Y).abs() < 1e-12);
        let (axis, angle) = rotation_between(UnitVector3::X, UnitVector3::Y);
        let r = rotation_about_point(axis, angle, Point3::ORIGIN).unwrap();
        assert!(
            r.apply_unit(UnitVector3::X)
                .into_inner()
                .distance(Point3::new(0.0, 1.0, 0.0))
                < 1e-12
        );
    }

    #[test]
    fn pose_correction_turns_x_normal_to_y() {
        let mut w = ideal_world(0);
        let corner = w.needle_true.circle.center;
        w.execute_motion(
            GripperId::Right,
            Motion::RotateHeld {
                axis: UnitVector3::Z,
                angle: -PI / 2.0,
                pivot: corner,
            },
        )
        .unwrap();
        assert!(
            canonical_normal(w.needle_true.circle.normal)
                .into_inner()
                .distance(Point3::new(1.0, 0.0, 0.0))
                < 1e-12
        );
        let mut c = controller(Stages::ALL, false);
        let est = w.observe().unwrap();
        c.belief = Some(label_estimate(
            &est,
            jaw_center(&w.gripper_pose(GripperId::Right), 0.005),
            true,
        ));
        c.pose_correction(&mut w).unwrap();
        let after = w.observe().unwrap();
        assert!(after.pose.circle.normal.axial_angle_to(UnitVector3::Y) < 1e-6);
        let belief = c.belief.unwrap();
        assert!(belief.circle.center.distance(w.needle_true.circle.center) < 1e-9);
        assert!(belief.tip.distance(w.needle_true.tip) < 1e-9);
    }

    #[test]
    fn pose_correction_of_y_normal_starts_with_identity() {
        let mut w = ideal_world(0);
        let est = w.observe().unwrap();
        let mean = aggregate_normals(&[est.pose.circle.normal]).unwrap();
        let (_, angle) = rotation_between(mean, UnitVector3::Y);
        assert!(angle.abs() < 1e-9);
        let mut c = controller(Stages::ALL, false);
        c.belief = Some(label_estimate(
            &est,
            jaw_center(&w.gripper_pose(GripperId::Right), 0.005),
            true,
        ));
        let swage = w.needle_true.swage;
        c.pose_correction(&mut w).unwrap();
        // Only the final quarter turn about +y through the center moved the needle.
        let r = rotation_about_point(UnitVector3::Y, PI / 2.0, w.needle_true.circle.center).unwrap();
        assert!(w.needle_true.swage.distance(r.apply(swage)) < 1e-9);
    }

    #[test]
    fn pose_correction_fails_when_most_samples_fail() {
        let mut w = ideal_world(0);
        let mut c = controller(Stages::ALL, false);
        let est = w.observe().unwrap();
        c.belief = Some(label_estimate(
            &est,
            jaw_center(&w.gripper_pose(GripperId::Right), 0.005),
            true,
        ));
        w.faults.observation = VecDeque::from(vec![false; 6]);
        let f = c.pose_correction(&mut w).unwrap_err();
        assert_eq!(f.kind, ErrorKind::I);
        assert!(f.detail.contains("6 of 10"));
    }

    #[test]
    fn nominal_suture_completes_without_retries() {
        let mut w = ideal_world(3);
        let mut c = controller(Stages::ALL, false);
        let out = c.run_suture(&mut w, 1);
        assert_eq!(out.state_after, PipelineState::Done);
        assert_eq!(out.error, None);
        assert_eq!(out.retries_used, 0);
        assert_eq!(w.thread.pulled_through, 0.08);
        assert_eq!(count(&out.events, |k| matches!(k, EventKind::Retry { .. })), 0);
        validate_trace(w.events(), &c.params, &Stages::ALL, false, 0).unwrap();
    }

    #[test]
    fn nominal_wound_closes_for_every_preset() {
        for stages in [
            Stages::ALL,
            Stages {
                sweep: false,
                cinch: false,
                pose_correction: false,
            },
            Stages {
                sweep: true,
                cinch: true,
                pose_correction: false,
            },
        ] {
            let mut w = ideal_world(1);
            let mut c = controller(stages, false);
            for i in 1..=6 {
                assert_eq!(
                    c.run_suture(&mut w, i).state_after,
                    PipelineState::Done,
                    "{stages:?} suture {i}"
                );
            }
            validate_trace(w.events(), &c.params, &stages, false, 0).unwrap();
        }
    }

    #[test]
    fn forced_entanglement_is_thread_error() {
        let mut w = ideal_world(0);
        w.faults.entanglement.push_back(true);
        let out = controller(Stages::ALL, false).run_suture(&mut w, 1);
        assert_eq!(out.error, Some(ErrorKind::T));
        assert_eq!(out.state_after, PipelineState::Failed(ErrorKind::T));
    }

    #[test]
    fn forced_slip_is_insertion_error() {
        let mut w = ideal_world(0);
        w.faults.slip.push_back(true);
        let out = controller(Stages::ALL, false).run_suture(&mut w, 1);
        assert_eq!(out.error, Some(ErrorKind::I));
    }

    #[test]
    fn extraction_fails_after_exactly_five_retries() {
        let mut w = ideal_world(0);
        w.faults.grasp[GripperId::Left.index()] = VecDeque::from(vec![false; 6]);
        let mut c = controller(Stages::ALL, false);
        let out = c.run_suture(&mut w, 1);
        assert_eq!(out.error, Some(ErrorKind::E));
        assert_eq!(out.retries_used, 5);
        assert_eq!(count(&out.events, |k| matches!(k, EventKind::Retry { .. })), 5);
        let checks: Vec<_> = out
            .events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::RecoveryCheck {
                    check: RecoveryKind::Extraction,
                    value,
                    decision,
                    ..
                } => Some((value, decision)),
                _ => None,
            })
            .collect();
        assert_eq!(checks.len(), 6);
        assert!(checks.iter().all(|(v, _)| *v < 0.02));
        assert_eq!(checks.last().unwrap().1, RecoveryDecision::Fail);
        validate_trace(w.events(), &c.params, &Stages::ALL, false, 0).unwrap();
    }

    #[test]
    fn extraction_recovers_after_some_misses() {
        let mut w = ideal_world(0);
        w.faults.grasp[GripperId::Left.index()] = VecDeque::from(vec![false; 3]);
        let out = controller(Stages::ALL, false).run_suture(&mut w, 1);
        assert_eq!(out.state_after, PipelineState::Done);
        assert_eq!(out.retries_used, 3);
    }

    #[test]
    fn handover_fails_after_exactly_five_retries() {
        let mut w = ideal_world(0);
        w.faults.grasp[GripperId::Right.index()] = VecDeque::from(vec![false; 6]);
        let mut c = controller(Stages::ALL, false);
        let out = c.run_suture(&mut w, 1);
        assert_eq!(out.error, Some(ErrorKind::H));
        assert_eq!(count(&out.events, |k| matches!(k, EventKind::Retry { .. })), 5);
        let jitters: Vec<f64> = out
            .events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Jitter { magnitude, .. } => Some(magnitude),
                _ => None,
            })
            .collect();
        assert_eq!(jitters.len(), 5);
        assert!(jitters.iter().all(|m| *m < 0.005));
        // The left driver never let go.
        assert!(w.gripper(GripperId::Left).holds_needle());
        validate_trace(w.events(), &c.params, &Stages::ALL, false, 0).unwrap();
    }

    #[test]
    fn human_mode_recovers_a_failed_handover() {
        let failure = FailureModel {
            intervention_budget: 2,
            ..FailureModel::none()
        };
        let mut w = SimWorld::new(
            WorldConfig {
                failure,
                ..WorldConfig::ideal()
            },
            0,
        );
        w.faults.grasp[GripperId::Right.index()] = VecDeque::from(vec![false; 6]);
        let mut c = controller(Stages::ALL, true);
        let out = c.run_suture(&mut w, 1);
        assert_eq!(out.state_after, PipelineState::Done);
        assert_eq!(count(&out.events, |k| matches!(k, EventKind::Intervention { .. })), 1);
        assert_eq!(
            count(&out.events, |k| matches!(
                k,
                EventKind::Error { kind: ErrorKind::H, .. }
            )),
            1
        );
        assert_eq!(w.intervention_budget, 1);
        validate_trace(w.events(), &c.params, &Stages::ALL, true, 2).unwrap();
    }

    #[test]
    fn human_mode_stops_when_budget_runs_out() {
        let failure = FailureModel {
            intervention_budget: 2,
            ..FailureModel::none()
        };
        let mut w = SimWorld::new(
            WorldConfig {
                failure,
                ..WorldConfig::ideal()
            },
            0,
        );
        w.faults.slip = VecDeque::from(vec![true; 3]);
        let mut c = controller(Stages::ALL, true);
        let out = c.run_suture(&mut w, 1);
        assert_eq!(out.error, Some(ErrorKind::I));
        assert_eq!(count(&out.events, |k| matches!(k, EventKind::Intervention { .. })), 2);
        validate_trace(w.events(), &c.params, &Stages::ALL, true, 2).unwrap();
        assert!(validate_trace(w.events(), &c.params, &Stages::ALL, true, 1).is_err());
    }

    #[test]
    fn sweep_ends_past_the_last_site() {
        let mut w = ideal_world(0);
        let mut c = controller(Stages::ALL, false);
        c.sweep(&mut w).unwrap();
        let wound = w.wound().clone();
        let axis = wound.wound_axis.into_inner();
        let centroid = wound.centroid();
        let far = wound
            .entry_points
            .iter()
            .chain(&wound.exit_points)
            .map(|p| (*p - centroid).dot(axis))
            .fold(f64::NEG_INFINITY, f64::max);
        let expected = centroid + axis * (far + 0.01) + Point3::new(0.0, 0.0, 0.004);
        let jaws = jaw_center(&w.gripper_pose(GripperId::Right), w.jaw_depth());
        assert!(jaws.distance(expected) < 1e-12);
        assert!(w.gripper(GripperId::Right).jaw == Jaw::Open);
    }

    #[test]
    fn entanglement_check_sees_the_sweep_flag() {
        for (stages, expect_swept) in [
            (Stages::ALL, true),
            (
                Stages {
                    sweep: false,
                    cinch: true,
                    pose_correction: true,
                },
                false,
            ),
        ] {
            let mut w = ideal_world(0);
            controller(stages, false).run_suture(&mut w, 1);
            let swept = w
                .events()
                .iter()
                .find_map(|e| match e.kind {
                    EventKind::EntanglementCheck { swept, .. } => Some(swept),
                    _ => None,
                })
                .unwrap();
            assert_eq!(swept, expect_swept);
        }
    }

    #[test]
    fn validator_rejects_bad_traces() {
        let p = ControllerParams::default();
        let ev = |t: f64, kind: EventKind| Event {
            t,
            suture: 1,
            primitive: Some(Primitive::Insertion),
            kind,
        };
        let skip = vec![
            ev(
                0.0,
                EventKind::Transition {
                    from: None,
                    to: PipelineState::Insertion,
                },
            ),
            ev(
                1.0,
                EventKind::Transition {
                    from: Some(PipelineState::Insertion),
                    to: PipelineState::Extraction,
                },
            ),
        ];
        assert!(validate_trace(&skip, &p, &Stages::ALL, false, 0).is_err());
        let no_sweep = Stages {
            sweep: false,
            ..Stages::ALL
        };
        assert!(validate_trace(&skip, &p, &no_sweep, false, 0).is_ok());
        let backwards = vec![
            ev(
                1.0,
                EventKind::Transition {
                    from: None,
                    to: PipelineState::Insertion,
                },
            ),
            ev(
                0.5,
                EventKind::Observation {
                    ok: true,
                    corrupted: false,
                },
            ),
        ];
        assert!(validate_trace(&backwards, &p, &Stages::ALL, false, 0).is_err());
        let blind_grasp = vec![
            ev(
                0.0,
                EventKind::Transition {
                    from: None,
                    to: PipelineState::Insertion,
                },
            ),
            ev(
                1.0,
                EventKind::GraspClose {
                    gripper: GripperId::Left,
                    success: true,
                    distance: Some(0.0),
                },
            ),
        ];
        assert!(validate_trace(&blind_grasp, &p, &Stages::ALL, false, 0).is_err());
        let mut retries = vec![ev(
            0.0,
            EventKind::Transition {
                from: None,
                to: PipelineState::Insertion,
            },
        )];
        retries.extend((1..=6).map(|a| ev(1.0, EventKind::Retry { attempt: a })));
        assert!(validate_trace(&retries, &p, &Stages::ALL, false, 0).is_err());
        let revive = vec![
            ev(
                0.0,
                EventKind::Transition {
                    from: None,
                    to: PipelineState::Insertion,
                },
            ),
            ev(
                1.0,
                EventKind::Transition {
                    from: Some(PipelineState::Insertion),
                    to: PipelineState::Failed(ErrorKind::I),
                },
            ),
            ev(
                2.0,
                EventKind::Transition {
                    from: Some(PipelineState::Failed(ErrorKind::I)),
                    to: PipelineState::Insertion,
                },
            ),
        ];
        assert!(validate_trace(&revive, &p, &Stages::ALL, false, 0).is_err());
        assert!(validate_trace(&revive, &p, &Stages::ALL, true, 0).is_ok());
    }

    #[test]
    fn params_roundtrip_in_degrees() {
        let p = ControllerParams::default();
        let text = toml::to_string(&p).unwrap();
        assert!(text.contains("insertion_rotation_deg = 45.0"));
        let back: ControllerParams = toml::from_str(&text).unwrap();
        assert!((back.insertion_rotation - p.insertion_rotation).abs() < 1e-15);
        assert!(ControllerParams { max_retries: 0, ..p }.validate().is_ok());
        assert!(ControllerParams { l_each: 0.0, ..p }.validate().is_err());
        assert!(ControllerParams {
            extraction_rotation: 4.0,
            ..p
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn noisy_traces_respect_contracts(seed in 0u64..10_000, preset in 0usize..3) {
            let stages = [
                Stages::ALL,
                Stages { sweep: true, cinch: true, pose_correction: false },
                Stages { sweep: false, cinch: false, pose_correction: false },
            ][preset];
            let mut config = WorldConfig::default();
            config.failure.intervention_budget = 0;
            let mut w = SimWorld::new(config, seed);
            let mut c = Controller::new(ControllerParams::default(), stages, false, seed);
            for i in 1..=6 {
                let out = c.run_suture(&mut w, i);
                prop_assert!(out.retries_used <= c.params.max_retries);
                if out.error.is_some() {
                    break;
                }
            }
            let checked = validate_trace(w.events(), &c.params, &stages, false, 0);
            prop_assert!(checked.is_ok(), "{:?}", checked);
        }
    }
}
