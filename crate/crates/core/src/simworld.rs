//! Kinematic suturing scene: phantom wound, two needle drivers, the needle and
//! its thread, a simulated clock, and injected failures.
//!
//! Nothing here is physical. Grasps, insertions and thread tangles succeed or
//! fail by seeded Bernoulli draws whose odds depend on geometry (for grasps,
//! how far the jaws close from the true needle body). Observations render a
//! synthetic cloud from the true needle and run the pose estimator on it.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ErrorKind, PipelineState, SutureWorld};
use crate::geometry::{rotation_about_point, Point3, RigidTransform, UnitVector3};
use crate::perception::{
    estimate_needle_pose, synth_needle_cloud_with_hidden, visible_intervals, EstimatorParams, NeedleEstimate,
    NeedlePose, NeedleSpec, NoiseModel, PerceptionError, Stage,
};

/// Motion primitives, used to tag events and to look up durations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Insertion,
    Sweep,
    Extraction,
    Cinch,
    Handover,
    PoseCorrection,
    Intervention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperId {
    Left,
    Right,
}

impl GripperId {
    pub fn index(self) -> usize {
        match self {
            GripperId::Left => 0,
            GripperId::Right => 1,
        }
    }

    pub fn other(self) -> GripperId {
        match self {
            GripperId::Left => GripperId::Right,
            GripperId::Right => GripperId::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jaw {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holding {
    Nothing,
    /// `grasp_point` is in world coordinates and follows the gripper.
    Needle {
        grasp_point: Point3,
        grasp_angle: f64,
    },
    Thread,
}

/// A needle driver. The tool frame's x column is the approach direction; the
/// jaws close `jaw_depth` behind the tool tip along it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub id: GripperId,
    pub pose: RigidTransform,
    pub jaw: Jaw,
    pub holding: Holding,
}

impl GripperState {
    pub fn holds_needle(&self) -> bool {
        matches!(self.holding, Holding::Needle { .. })
    }
}

/// Approach direction of a tool pose.
pub fn approach_axis(pose: &RigidTransform) -> Point3 {
    pose.apply_vector(Point3::new(1.0, 0.0, 0.0))
}

/// Where the jaws close for a tool pose.
pub fn jaw_center(pose: &RigidTransform, jaw_depth: f64) -> Point3 {
    pose.translation() - approach_axis(pose) * jaw_depth
}

/// Tool pose with the given approach direction whose jaws close at `jaw`.
/// The second tool axis is kept horizontal when the approach allows it.
pub fn tool_pose_for_jaw(jaw: Point3, approach: UnitVector3, jaw_depth: f64) -> RigidTransform {
    let a = approach.into_inner();
    let side = Point3::new(0.0, 0.0, 1.0).cross(a);
    let side = if side.norm() > 1e-6 {
        side
    } else {
        a.cross(Point3::new(1.0, 0.0, 0.0))
    };
    let b = UnitVector3::new_normalize(side).expect("side axis is non-degenerate");
    let c = UnitVector3::new_normalize(a.cross(b.into_inner())).expect("orthogonal axes");
    RigidTransform::from_frame(approach, b, c, jaw + a * jaw_depth).expect("orthonormal tool frame")
}

/// Suture sites along a raised wound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoundSpec {
    pub entry_points: Vec<Point3>,
    pub exit_points: Vec<Point3>,
    /// Sweep direction along the wound.
    pub wound_axis: UnitVector3,
    pub n_target_sutures: usize,
}

impl Default for WoundSpec {
    /// Six sites 1 cm apart along +y, each crossing the ridge at x = 0 from
    /// right (entry) to left (exit) with a 16 mm bite.
    fn default() -> Self {
        let ys = [-0.025, -0.015, -0.005, 0.005, 0.015, 0.025].into_iter();
        Self {
            entry_points: ys.clone().map(|y| Point3::new(0.008, y, 0.0)).collect(),
            exit_points: ys.map(|y| Point3::new(-0.008, y, 0.0)).collect(),
            wound_axis: UnitVector3::Y,
            n_target_sutures: 6,
        }
    }
}

impl WoundSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.entry_points.is_empty() {
            return Err("wound needs at least one suture site".into());
        }
        if self.entry_points.len() != self.exit_points.len() {
            return Err(format!(
                "{} entry points but {} exit points",
                self.entry_points.len(),
                self.exit_points.len()
            ));
        }
        if self.n_target_sutures != self.entry_points.len() {
            return Err(format!(
                "n_target_sutures = {} but the wound has {} sites",
                self.n_target_sutures,
                self.entry_points.len()
            ));
        }
        for (k, (a, b)) in self.entry_points.iter().zip(&self.exit_points).enumerate() {
            if !(a.is_finite() && b.is_finite()) {
                return Err(format!("site {} has non-finite coordinates", k + 1));
            }
        }
        Ok(())
    }

    /// Midpoint of the wound, used as the sweep centerline reference.
    pub fn centroid(&self) -> Point3 {
        let n = (self.entry_points.len() + self.exit_points.len()) as f64;
        self.entry_points
            .iter()
            .chain(&self.exit_points)
            .fold(Point3::ORIGIN, |a, p| a + *p)
            * (1.0 / n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadState {
    pub total_length: f64,
    pub pulled_through: f64,
    /// Thread pulled while working on suture `k + 1`.
    pub per_suture_used: Vec<f64>,
    pub attached_to_swage: bool,
}

impl ThreadState {
    pub fn new(total_length: f64, n_sutures: usize) -> Self {
        Self {
            total_length,
            pulled_through: 0.0,
            per_suture_used: vec![0.0; n_sutures],
            attached_to_swage: true,
        }
    }

    pub fn remaining(&self) -> f64 {
        self.total_length - self.pulled_through
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureModel {
    pub grasp_miss_base: f64,
    pub grasp_miss_per_mm_pose_error: f64,
    pub entanglement_prob_unswept: f64,
    pub entanglement_prob_swept: f64,
    pub insertion_slip_prob: f64,
    pub perception_corruption_prob: f64,
    /// Human interventions available per trial; 0 disables human mode.
    pub intervention_budget: u32,
}

impl Default for FailureModel {
    fn default() -> Self {
        Self {
            grasp_miss_base: 0.04,
            grasp_miss_per_mm_pose_error: 0.06,
            entanglement_prob_unswept: 0.25,
            entanglement_prob_swept: 0.06,
            insertion_slip_prob: 0.05,
            perception_corruption_prob: 0.03,
            intervention_budget: 2,
        }
    }
}

impl FailureModel {
    /// Everything succeeds.
    pub fn none() -> Self {
        Self {
            grasp_miss_base: 0.0,
            grasp_miss_per_mm_pose_error: 0.0,
            entanglement_prob_unswept: 0.0,
            entanglement_prob_swept: 0.0,
            insertion_slip_prob: 0.0,
            perception_corruption_prob: 0.0,
            intervention_budget: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            ("grasp_miss_base", self.grasp_miss_base),
            ("entanglement_prob_unswept", self.entanglement_prob_unswept),
            ("entanglement_prob_swept", self.entanglement_prob_swept),
            ("insertion_slip_prob", self.insertion_slip_prob),
            ("perception_corruption_prob", self.perception_corruption_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} must lie in [0, 1]"));
            }
        }
        if !(self.grasp_miss_per_mm_pose_error >= 0.0 && self.grasp_miss_per_mm_pose_error <= 1.0) {
            return Err(format!(
                "grasp_miss_per_mm_pose_error = {} must lie in [0, 1]",
                self.grasp_miss_per_mm_pose_error
            ));
        }
        if self.entanglement_prob_swept > self.entanglement_prob_unswept {
            return Err("entanglement_prob_swept must not exceed entanglement_prob_unswept".into());
        }
        Ok(())
    }

    /// Probability that closing the jaws `d` meters from the needle body grasps it.
    pub fn grasp_success_probability(&self, d: f64) -> f64 {
        (1.0 - (self.grasp_miss_base + self.grasp_miss_per_mm_pose_error * d * 1000.0)).clamp(0.0, 1.0)
    }
}

/// Seconds charged per motion while each primitive is active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveDurations {
    pub insertion: f64,
    pub sweep: f64,
    pub extraction: f64,
    pub cinch: f64,
    pub handover: f64,
    pub pose_correction: f64,
    pub intervention: f64,
}

impl PrimitiveDurations {
    pub fn get(&self, p: Primitive) -> f64 {
        match p {
            Primitive::Insertion => self.insertion,
            Primitive::Sweep => self.sweep,
            Primitive::Extraction => self.extraction,
            Primitive::Cinch => self.cinch,
            Primitive::Handover => self.handover,
            Primitive::PoseCorrection => self.pose_correction,
            Primitive::Intervention => self.intervention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingModel {
    /// Seconds per observation.
    pub perception_period: f64,
    pub durations: PrimitiveDurations,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            perception_period: 1.2,
            durations: PrimitiveDurations {
                insertion: 7.0,
                sweep: 5.0,
                extraction: 5.0,
                cinch: 9.0,
                handover: 4.0,
                pose_correction: 4.0,
                intervention: 30.0,
            },
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<(), String> {
        let d = &self.durations;
        let all = [
            ("perception_period", self.perception_period),
            ("durations.insertion", d.insertion),
            ("durations.sweep", d.sweep),
            ("durations.extraction", d.extraction),
            ("durations.cinch", d.cinch),
            ("durations.handover", d.handover),
            ("durations.pose_correction", d.pose_correction),
            ("durations.intervention", d.intervention),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} = {v} must be > 0"));
            }
        }
        Ok(())
    }
}

/// How observations are corrupted. Stereo reconstruction is far better near
/// `corner_center`, the low-variance detection spot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionNoise {
    pub field: NoiseModel,
    pub corner: NoiseModel,
    pub corner_center: Point3,
    /// Needle centers within this distance of `corner_center` use `corner`.
    pub corner_radius: f64,
    /// Cloud size per observation.
    pub n_points: usize,
    /// Arc hidden behind each gripper holding the needle, radians.
    pub jaw_occlusion: f64,
}

impl Default for PerceptionNoise {
    fn default() -> Self {
        let field = NoiseModel {
            gaussian_sigma: 6.0e-4,
            outlier_fraction: 0.2,
            outlier_box: Point3::new(0.05, 0.05, 0.05),
            dropout_fraction: 0.1,
            occlusion_arc: 0.0,
            occlusion_center: 0.5,
        };
        let corner = NoiseModel {
            gaussian_sigma: 3.0e-4,
            outlier_fraction: 0.1,
            ..field
        };
        Self {
            field,
            corner,
            corner_center: Point3::new(0.05, -0.05, 0.02),
            corner_radius: 0.02,
            n_points: 150,
            jaw_occlusion: 0.2,
        }
    }
}

impl PerceptionNoise {
    /// Noise-free clouds everywhere, jaws included.
    pub fn none() -> Self {
        Self {
            field: NoiseModel::none(),
            corner: NoiseModel::none(),
            jaw_occlusion: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.field.validate().map_err(|e| format!("field: {e}"))?;
        self.corner.validate().map_err(|e| format!("corner: {e}"))?;
        if self.n_points < 3 {
            return Err(format!("n_points = {} must be >= 3", self.n_points));
        }
        if !(self.corner_radius >= 0.0) {
            return Err("corner_radius must be >= 0".into());
        }
        if !(self.jaw_occlusion >= 0.0 && self.jaw_occlusion.is_finite()) {
            return Err("jaw_occlusion must be >= 0".into());
        }
        Ok(())
    }
}

/// Remaining world tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub thread_length: f64,
    pub tissue_surface_z: f64,
    /// Largest distance from a site to the needle body that still counts as
    /// passing through it.
    pub insertion_tolerance: f64,
    /// Jaws closing farther than this from the needle never catch it.
    pub grasp_reach: f64,
    pub jaw_depth: f64,
    /// A missed grasp next to a held needle tilts its plane by an angle in this range, degrees.
    pub knock_angle_deg: [f64; 2],
    /// Corrupted estimates are rotated by an angle in this range, degrees...
    pub corruption_angle_deg: [f64; 2],
    /// ...and shifted by a distance in this range, meters.
    pub corruption_offset: [f64; 2],
    pub workspace_min: Point3,
    pub workspace_max: Point3,
    /// Where the left driver waits, as the point its jaws close on.
    pub left_home: Point3,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            thread_length: 0.40,
            tissue_surface_z: 0.0,
            insertion_tolerance: 1.5e-3,
            grasp_reach: 6e-3,
            jaw_depth: 5e-3,
            knock_angle_deg: [5.0, 20.0],
            corruption_angle_deg: [5.0, 20.0],
            corruption_offset: [5e-3, 15e-3],
            workspace_min: Point3::new(-0.1, -0.1, -0.01),
            workspace_max: Point3::new(0.1, 0.1, 0.12),
            left_home: Point3::new(-0.06, 0.0, 0.07),
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("thread_length", self.thread_length),
            ("insertion_tolerance", self.insertion_tolerance),
            ("grasp_reach", self.grasp_reach),
            ("jaw_depth", self.jaw_depth),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} = {v} must be > 0"));
            }
        }
        for (name, r) in [
            ("knock_angle_deg", self.knock_angle_deg),
            ("corruption_angle_deg", self.corruption_angle_deg),
            ("corruption_offset", self.corruption_offset),
        ] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(format!("{name} must be an ordered non-negative range"));
            }
        }
        let (lo, hi) = (self.workspace_min, self.workspace_max);
        if !(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z) {
            return Err("workspace_min must lie below workspace_max on every axis".into());
        }
        Ok(())
    }

    pub fn in_workspace(&self, p: Point3) -> bool {
        let (lo, hi) = (self.workspace_min, self.workspace_max);
        (lo.x..=hi.x).contains(&p.x) && (lo.y..=hi.y).contains(&p.y) && (lo.z..=hi.z).contains(&p.z)
    }
}

/// Everything a [`SimWorld`] needs besides its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub needle: NeedleSpec,
    pub wound: WoundSpec,
    pub noise: PerceptionNoise,
    pub ransac: EstimatorParams,
    pub failure: FailureModel,
    pub timing: TimingModel,
    pub world: WorldParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            needle: NeedleSpec::default(),
            wound: WoundSpec::default(),
            noise: PerceptionNoise::default(),
            ransac: EstimatorParams::default(),
            failure: FailureModel::default(),
            timing: TimingModel::default(),
            world: WorldParams::default(),
        }
    }
}

impl WorldConfig {
    /// Noise-free observations and no injected failures.
    pub fn ideal() -> Self {
        Self {
            noise: PerceptionNoise::none(),
            failure: FailureModel::none(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedleState {
    Free,
    /// Passed through suture site `site` (1-based) and left there.
    Inserted {
        site: usize,
    },
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    MoveTo {
        pose: RigidTransform,
    },
    /// Rotates the tool (and whatever it holds) about the line through `pivot`.
    RotateHeld {
        axis: UnitVector3,
        angle: f64,
        pivot: Point3,
    },
    Translate {
        offset: Point3,
    },
    Jaw {
        jaw: Jaw,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error("{gripper:?} gripper target {position} is outside the workspace")]
    OutOfWorkspace { gripper: GripperId, position: Point3 },
    #[error("{gripper:?} gripper cannot move while both grippers hold the needle")]
    NeedleConstrained { gripper: GripperId },
    #[error("invalid motion: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ThreadError {
    #[error("negative pull length {0}")]
    NegativeLength(f64),
    #[error("out of thread: requested {requested} m with {remaining} m left")]
    OutOfThread { requested: f64, remaining: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum InterventionError {
    #[error("intervention budget exhausted")]
    BudgetExhausted,
}

/// Result of checking the needle against a suture site after insertion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PassOutcome {
    Ok,
    /// The needle body misses the entry point: it went into a non-wound region.
    MissedEntry {
        distance: f64,
    },
    /// Entered correctly but did not come out at the exit point.
    MissedExit {
        distance: f64,
    },
    /// Geometry was fine but the needle slipped off the raised edge.
    EdgeSlip,
}

impl PassOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, PassOutcome::Ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryKind {
    Extraction,
    Handover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryDecision {
    Proceed,
    Retry,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Transition {
        from: Option<PipelineState>,
        to: PipelineState,
    },
    Observation {
        ok: bool,
        corrupted: bool,
    },
    /// `distance` from the jaws to the needle body; absent once the needle is dropped.
    GraspClose {
        gripper: GripperId,
        success: bool,
        distance: Option<f64>,
    },
    Release {
        gripper: GripperId,
        dropped: bool,
    },
    Retry {
        attempt: usize,
    },
    Jitter {
        offset: Point3,
        magnitude: f64,
    },
    RecoveryCheck {
        check: RecoveryKind,
        value: f64,
        threshold: f64,
        decision: RecoveryDecision,
    },
    InsertionCheck {
        result: PassOutcome,
    },
    EntanglementCheck {
        swept: bool,
        entangled: bool,
    },
    ThreadPull {
        length: f64,
        pulled_through: f64,
    },
    Error {
        kind: ErrorKind,
        detail: String,
    },
    Intervention {
        budget_left: u32,
    },
}

/// One timestamped trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub suture: usize,
    pub primitive: Option<Primitive>,
    pub kind: EventKind,
}

/// Scripted outcomes consumed before any random draw; used to force
/// specific failures in tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultScript {
    /// Per gripper (indexed by [`GripperId::index`]): `true` grasps, `false` misses.
    pub grasp: [VecDeque<bool>; 2],
    /// `true` entangles.
    pub entanglement: VecDeque<bool>,
    /// `true` slips.
    pub slip: VecDeque<bool>,
    /// `false` makes the observation fail.
    pub observation: VecDeque<bool>,
}

/// The simulated world. See the module docs.
#[derive(Debug, Clone)]
pub struct SimWorld {
    config: WorldConfig,
    pub needle_true: NeedlePose,
    pub needle_state: NeedleState,
    pub grippers: [GripperState; 2],
    pub thread: ThreadState,
    /// 1-based index of the suture being worked on.
    pub suture_index: usize,
    pub clock: f64,
    pub intervention_budget: u32,
    /// Set by a positive entanglement check, cleared by an intervention.
    pub entangled: bool,
    pub faults: FaultScript,
    dual_grasp_window: bool,
    phase: Option<Primitive>,
    rng: ChaCha8Rng,
    events: Vec<Event>,
}

impl SimWorld {
    /// Needle held by the right driver at its swage, in the canonical
    /// pre-insertion shape at the detection corner; left driver at home.
    pub fn new(config: WorldConfig, seed: u64) -> Self {
        let n = config.wound.n_target_sutures;
        let mut world = Self {
            needle_true: NeedlePose::from_swage_direction(
                Point3::ORIGIN,
                UnitVector3::Y,
                Point3::new(1.0, 0.0, 0.0),
                &config.needle,
            ),
            needle_state: NeedleState::Free,
            grippers: [
                GripperState {
                    id: GripperId::Left,
                    pose: RigidTransform::identity(),
                    jaw: Jaw::Open,
                    holding: Holding::Nothing,
                },
                GripperState {
                    id: GripperId::Right,
                    pose: RigidTransform::identity(),
                    jaw: Jaw::Closed,
                    holding: Holding::Nothing,
                },
            ],
            thread: ThreadState::new(config.world.thread_length, n),
            suture_index: 1,
            clock: 0.0,
            intervention_budget: config.failure.intervention_budget,
            entangled: false,
            faults: FaultScript::default(),
            dual_grasp_window: false,
            phase: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            events: Vec::new(),
            config,
        };
        world.reset_scene();
        world
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn gripper(&self, id: GripperId) -> &GripperState {
        &self.grippers[id.index()]
    }

    pub fn dual_grasp_window(&self) -> bool {
        self.dual_grasp_window
    }

    /// The needle pose every trial starts from and every intervention restores.
    pub fn canonical_needle(&self) -> NeedlePose {
        NeedlePose::from_swage_direction(
            self.config.noise.corner_center,
            UnitVector3::Y,
            Point3::new(1.0, 0.0, 0.0),
            &self.config.needle,
        )
    }

    /// Right driver pose holding the canonical needle at its swage, approaching along −x.
    pub fn right_home(&self) -> RigidTransform {
        let approach = UnitVector3::new_normalize(Point3::new(-1.0, 0.0, 0.0)).expect("unit");
        tool_pose_for_jaw(self.canonical_needle().swage, approach, self.config.world.jaw_depth)
    }

    pub fn left_home(&self) -> RigidTransform {
        tool_pose_for_jaw(self.config.world.left_home, UnitVector3::X, self.config.world.jaw_depth)
    }

    fn reset_scene(&mut self) {
        self.needle_true = self.canonical_needle();
        self.needle_state = NeedleState::Free;
        self.grippers[0] = GripperState {
            id: GripperId::Left,
            pose: self.left_home(),
            jaw: Jaw::Open,
            holding: Holding::Nothing,
        };
        self.grippers[1] = GripperState {
            id: GripperId::Right,
            pose: self.right_home(),
            jaw: Jaw::Closed,
            holding: Holding::Needle {
                grasp_point: self.needle_true.swage,
                grasp_angle: 0.0,
            },
        };
        self.dual_grasp_window = false;
    }

    fn duration(&self) -> f64 {
        self.phase.map_or(0.0, |p| self.config.timing.durations.get(p))
    }

    fn log(&mut self, kind: EventKind) {
        self.events.push(Event {
            t: self.clock,
            suture: self.suture_index,
            primitive: self.phase,
            kind,
        });
    }

    fn check_invariants(&self) {
        assert!(
            self.dual_grasp_window || !(self.grippers[0].holds_needle() && self.grippers[1].holds_needle()),
            "both grippers hold the needle outside the dual-grasp window"
        );
        assert!(self.thread.pulled_through >= 0.0 && self.thread.pulled_through <= self.thread.total_length);
    }

    /// Sub-arcs (from the swage) hidden by tissue or gripper jaws.
    pub fn hidden_arcs(&self) -> Vec<(f64, f64)> {
        const STEPS: usize = 720;
        let span = self.config.needle.arc_span;
        let step = span / STEPS as f64;
        let surface = self.config.world.tissue_surface_z;
        let mut hidden = Vec::new();
        let mut run: Option<f64> = None;
        for k in 0..=STEPS {
            let a = step * k as f64;
            let buried = self.needle_true.arc_point(a).z < surface;
            match (buried, run) {
                (true, None) => run = Some((a - 0.5 * step).max(0.0)),
                (false, Some(start)) => {
                    hidden.push((start, a - 0.5 * step));
                    run = None;
                }
                _ => {}
            }
        }
        if let Some(start) = run {
            hidden.push((start, span));
        }
        let w = 0.5 * self.config.noise.jaw_occlusion;
        for g in &self.grippers {
            if let (Holding::Needle { grasp_angle, .. }, true) = (g.holding, w > 0.0) {
                hidden.push(((grasp_angle - w).max(0.0), (grasp_angle + w).min(span)));
            }
        }
        hidden
    }

    fn noise_here(&self) -> NoiseModel {
        let n = &self.config.noise;
        if self.needle_true.circle.center.distance(n.corner_center) <= n.corner_radius {
            n.corner
        } else {
            n.field
        }
    }

    fn uniform(&mut self, range: [f64; 2]) -> f64 {
        range[0] + (range[1] - range[0]) * self.rng.random::<f64>()
    }

    fn random_direction(&mut self) -> UnitVector3 {
        loop {
            let v = Point3::new(
                StandardNormal.sample(&mut self.rng),
                StandardNormal.sample(&mut self.rng),
                StandardNormal.sample(&mut self.rng),
            );
            if let Ok(u) = UnitVector3::new_normalize(v) {
                return u;
            }
        }
    }

    /// Renders a cloud of the true needle, estimates its pose, and charges one
    /// perception period. May hand back a grossly perturbed estimate.
    pub fn observe(&mut self) -> Result<NeedleEstimate, PerceptionError> {
        self.clock += self.config.timing.perception_period;
        let result = self.observe_inner();
        let (ok, corrupted) = match &result {
            Ok((_, c)) => (true, *c),
            Err(_) => (false, false),
        };
        self.log(EventKind::Observation { ok, corrupted });
        result.map(|(e, _)| e)
    }

    fn observe_inner(&mut self) -> Result<(NeedleEstimate, bool), PerceptionError> {
        let spec = self.config.needle;
        if self.needle_state == NeedleState::Dropped {
            return Err(PerceptionError::DegenerateInput {
                stage: Stage::Plane,
                reason: "needle dropped out of view".into(),
            });
        }
        if self.faults.observation.pop_front() == Some(false) {
            return Err(PerceptionError::DegenerateInput {
                stage: Stage::Plane,
                reason: "scripted observation failure".into(),
            });
        }
        let hidden = self.hidden_arcs();
        let visible: f64 = visible_intervals(spec.arc_span, &hidden)
            .iter()
            .map(|(a, b)| b - a)
            .sum();
        if visible <= 1e-9 * spec.arc_span {
            return Err(PerceptionError::DegenerateInput {
                stage: Stage::Plane,
                reason: "needle fully occluded".into(),
            });
        }
        let noise = self.noise_here();
        let cloud_seed = self.rng.random::<u64>();
        let ransac_seed = self.rng.random::<u64>();
        let cloud = synth_needle_cloud_with_hidden(
            &self.needle_true,
            &spec,
            &noise,
            self.config.noise.n_points,
            &hidden,
            cloud_seed,
        );
        let mut estimate = estimate_needle_pose(&cloud, &spec, &self.config.ransac.with_seed(ransac_seed))?;

        let corrupt = self.rng.random::<f64>() < self.config.failure.perception_corruption_prob;
        if corrupt {
            let axis = self.random_direction();
            let angle = self.uniform(self.config.world.corruption_angle_deg).to_radians();
            let dir = self.random_direction();
            let shift = self.uniform(self.config.world.corruption_offset);
            let t = rotation_about_point(axis, angle, estimate.pose.circle.center)
                .expect("unit axis")
                .then(&RigidTransform::from_translation(dir * shift));
            estimate.pose = estimate.pose.transformed(&t);
            estimate.diagnostics.arc_midpoint = t.apply(estimate.diagnostics.arc_midpoint);
        }
        Ok((estimate, corrupt))
    }

    /// Moves or actuates one gripper. A held needle follows rigidly.
    pub fn execute_motion(&mut self, id: GripperId, motion: Motion) -> Result<(), MotionError> {
        let old = self.grippers[id.index()].pose;
        let target = match motion {
            Motion::Jaw { jaw } => {
                self.actuate_jaw(id, jaw);
                self.clock += self.duration();
                self.check_invariants();
                return Ok(());
            }
            Motion::MoveTo { pose } => pose,
            Motion::Translate { offset } => {
                if !offset.is_finite() {
                    return Err(MotionError::Invalid("non-finite translation".into()));
                }
                old.then(&RigidTransform::from_translation(offset))
            }
            Motion::RotateHeld { axis, angle, pivot } => {
                let r = rotation_about_point(axis, angle, pivot).map_err(|e| MotionError::Invalid(e.to_string()))?;
                old.then(&r)
            }
        };
        if !self.config.world.in_workspace(target.translation()) {
            return Err(MotionError::OutOfWorkspace {
                gripper: id,
                position: target.translation(),
            });
        }
        let holds = self.grippers[id.index()].holds_needle();
        if holds && self.grippers[id.other().index()].holds_needle() {
            return Err(MotionError::NeedleConstrained { gripper: id });
        }
        let delta = old.inverse().then(&target);
        let g = &mut self.grippers[id.index()];
        g.pose = target;
        if let Holding::Needle {
            grasp_point,
            grasp_angle,
        } = g.holding
        {
            g.holding = Holding::Needle {
                grasp_point: delta.apply(grasp_point),
                grasp_angle,
            };
            self.needle_true = self.needle_true.transformed(&delta);
            if let NeedleState::Inserted { .. } = self.needle_state {
                self.needle_state = NeedleState::Free;
            }
        }
        self.clock += self.duration();
        self.check_invariants();
        Ok(())
    }

    fn actuate_jaw(&mut self, id: GripperId, jaw: Jaw) {
        let i = id.index();
        if self.grippers[i].jaw == jaw {
            return;
        }
        self.grippers[i].jaw = jaw;
        match jaw {
            Jaw::Closed => self.close_jaw(id),
            Jaw::Open => {
                let was_holding = self.grippers[i].holds_needle();
                self.grippers[i].holding = Holding::Nothing;
                let mut dropped = false;
                if was_holding
                    && !self.grippers[id.other().index()].holds_needle()
                    && !matches!(self.needle_state, NeedleState::Inserted { .. })
                {
                    self.needle_state = NeedleState::Dropped;
                    dropped = true;
                }
                self.log(EventKind::Release { gripper: id, dropped });
            }
        }
    }

    fn close_jaw(&mut self, id: GripperId) {
        let spec = self.config.needle;
        let jaws = jaw_center(&self.grippers[id.index()].pose, self.config.world.jaw_depth);
        let distance =
            (self.needle_state != NeedleState::Dropped).then(|| self.needle_true.distance_to_body(jaws, &spec));
        let success = match self.faults.grasp[id.index()].pop_front() {
            Some(forced) => forced && distance.is_some(),
            None => match distance {
                Some(d) if d <= self.config.world.grasp_reach => {
                    self.rng.random::<f64>() < self.config.failure.grasp_success_probability(d)
                }
                _ => false,
            },
        };
        if success {
            let grasp_point = self.needle_true.nearest_body_point(jaws, &spec);
            let grasp_angle = self.needle_true.arc_angle_of(grasp_point).clamp(0.0, spec.arc_span);
            self.grippers[id.index()].holding = Holding::Needle {
                grasp_point,
                grasp_angle,
            };
        } else if let Holding::Needle { grasp_point, .. } = self.grippers[id.other().index()].holding {
            // The jaws push the needle out of its plane, tilting it about an
            // in-plane axis through the holder's grasp.
            let n = self.needle_true.circle.normal.into_inner();
            let axis = loop {
                let d = self.random_direction().into_inner();
                if let Ok(a) = UnitVector3::new_normalize(d - n * d.dot(n)) {
                    break a;
                }
            };
            let angle = self.uniform(self.config.world.knock_angle_deg).to_radians();
            let knock = rotation_about_point(axis, angle, grasp_point).expect("unit axis");
            self.needle_true = self.needle_true.transformed(&knock);
        }
        self.log(EventKind::GraspClose {
            gripper: id,
            success,
            distance,
        });
    }

    /// Classifies the needle against a suture site and draws an edge slip.
    /// A clean pass leaves the needle seated in the tissue.
    pub fn tissue_pass_check(&mut self, entry: Point3, exit: Point3) -> PassOutcome {
        let spec = self.config.needle;
        let tol = self.config.world.insertion_tolerance;
        let d_entry = self.needle_true.distance_to_body(entry, &spec);
        let d_exit = self.needle_true.distance_to_body(exit, &spec);
        let result = if self.needle_state == NeedleState::Dropped || d_entry > tol {
            PassOutcome::MissedEntry { distance: d_entry }
        } else if d_exit > tol {
            PassOutcome::MissedExit { distance: d_exit }
        } else {
            let slip = match self.faults.slip.pop_front() {
                Some(forced) => forced,
                None => self.rng.random::<f64>() < self.config.failure.insertion_slip_prob,
            };
            if slip {
                PassOutcome::EdgeSlip
            } else {
                PassOutcome::Ok
            }
        };
        if result.is_ok() {
            self.needle_state = NeedleState::Inserted {
                site: self.suture_index,
            };
        }
        self.log(EventKind::InsertionCheck { result });
        result
    }

    /// Whether the thread got caught up with the needle before the extraction grasp.
    pub fn thread_entanglement_check(&mut self, swept: bool) -> bool {
        let f = &self.config.failure;
        let p = if swept {
            f.entanglement_prob_swept
        } else {
            f.entanglement_prob_unswept
        };
        let entangled = match self.faults.entanglement.pop_front() {
            Some(forced) => forced,
            None => self.rng.random::<f64>() < p,
        };
        self.entangled |= entangled;
        self.log(EventKind::EntanglementCheck { swept, entangled });
        entangled
    }

    /// Pulls `length` more thread through the tissue.
    pub fn pull_thread(&mut self, length: f64) -> Result<(), ThreadError> {
        if !(length >= 0.0) {
            return Err(ThreadError::NegativeLength(length));
        }
        if length == 0.0 {
            return Ok(());
        }
        let remaining = self.thread.remaining();
        if self.thread.pulled_through + length > self.thread.total_length {
            return Err(ThreadError::OutOfThread {
                requested: length,
                remaining,
            });
        }
        self.thread.pulled_through += length;
        if let Some(used) = self.thread.per_suture_used.get_mut(self.suture_index - 1) {
            *used += length;
        }
        self.clock += self.config.timing.durations.cinch;
        let pulled_through = self.thread.pulled_through;
        self.log(EventKind::ThreadPull { length, pulled_through });
        self.check_invariants();
        Ok(())
    }

    /// A supervisor returns the scene to its start configuration.
    pub fn human_intervention(&mut self) -> Result<(), InterventionError> {
        if self.intervention_budget == 0 {
            return Err(InterventionError::BudgetExhausted);
        }
        self.intervention_budget -= 1;
        self.reset_scene();
        self.entangled = false;
        self.clock += self.config.timing.durations.intervention;
        let budget_left = self.intervention_budget;
        let phase = self.phase;
        self.phase = Some(Primitive::Intervention);
        self.log(EventKind::Intervention { budget_left });
        self.phase = phase;
        Ok(())
    }
}

impl SutureWorld for SimWorld {
    fn needle_spec(&self) -> NeedleSpec {
        self.config.needle
    }

    fn wound(&self) -> &WoundSpec {
        &self.config.wound
    }

    fn jaw_depth(&self) -> f64 {
        self.config.world.jaw_depth
    }

    fn clock(&self) -> f64 {
        self.clock
    }

    fn gripper_pose(&self, id: GripperId) -> RigidTransform {
        self.grippers[id.index()].pose
    }

    fn left_home(&self) -> RigidTransform {
        SimWorld::left_home(self)
    }

    fn intervention_budget(&self) -> u32 {
        self.intervention_budget
    }

    fn begin_step(&mut self, suture: usize, primitive: Primitive) {
        self.suture_index = suture;
        self.phase = Some(primitive);
    }

    fn observe(&mut self) -> Result<NeedleEstimate, PerceptionError> {
        SimWorld::observe(self)
    }

    fn execute_motion(&mut self, id: GripperId, motion: Motion) -> Result<(), MotionError> {
        SimWorld::execute_motion(self, id, motion)
    }

    fn tissue_pass_check(&mut self, entry: Point3, exit: Point3) -> PassOutcome {
        SimWorld::tissue_pass_check(self, entry, exit)
    }

    fn thread_entanglement_check(&mut self, swept: bool) -> bool {
        SimWorld::thread_entanglement_check(self, swept)
    }

    fn pull_thread(&mut self, length: f64) -> Result<(), ThreadError> {
        SimWorld::pull_thread(self, length)
    }

    fn human_intervention(&mut self) -> Result<(), InterventionError> {
        SimWorld::human_intervention(self)
    }

    fn set_dual_grasp_window(&mut self, open: bool) {
        self.dual_grasp_window = open;
        self.check_invariants();
    }

    fn record(&mut self, kind: EventKind) {
        self.log(kind);
    }

    fn events(&self) -> &[Event] {
        &self.events
    }
}
