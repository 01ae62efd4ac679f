//! Needle pose estimation from a segmented point cloud.
//!
//! The pipeline is: RANSAC plane → project the plane inliers into the plane
//! and express them in 2D plane coordinates → fixed-radius RANSAC circle →
//! lift the center back into 3D → refit plane and center jointly on the
//! points near the 3D circle → take the two mutually farthest of those
//! points, expressed on the circle, as the needle endpoints.
//!
//! [`synth_needle_cloud`] produces the input clouds for tests and the
//! simulator.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    plane_basis, project_point_to_plane, Circle3D, GeometryError, Plane, Point3, RigidTransform, UnitVector3,
};

/// Upper bound on refit/reselect rounds after consensus.
const REFINE_ROUNDS: usize = 20;

/// Rounds of joint plane/center refinement after both RANSAC stages.
const JOINT_ROUNDS: usize = 10;
/// Half-width of the refinement torus, in multiples of the larger stage threshold.
const JOINT_BAND_FACTOR: f64 = 3.0;

/// Radius of the half-circle needle used throughout, meters.
pub const DEFAULT_NEEDLE_RADIUS: f64 = 0.012;

/// Pipeline stage that produced a [`PerceptionError`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Plane,
    Circle,
    Endpoints,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Plane => "plane",
            Stage::Circle => "circle",
            Stage::Endpoints => "endpoints",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("degenerate input at {stage} stage: {reason}")]
    DegenerateInput { stage: Stage, reason: String },
    #[error("no consensus at {stage} stage: best hypothesis had {best} inliers, {required} required")]
    NoConsensus { stage: Stage, best: usize, required: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

impl PerceptionError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PerceptionError::DegenerateInput { stage, .. } | PerceptionError::NoConsensus { stage, .. } => Some(*stage),
            PerceptionError::InvalidParams(_) => None,
        }
    }

    fn with_stage(self, stage: Stage) -> Self {
        match self {
            PerceptionError::DegenerateInput { reason, .. } => PerceptionError::DegenerateInput { stage, reason },
            PerceptionError::NoConsensus { best, required, .. } => {
                PerceptionError::NoConsensus { stage, best, required }
            }
            other => other,
        }
    }
}

#[derive(Debug, Error)]
pub enum CloudParseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unordered set of 3D points, meters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| t.apply(*p)).collect())
    }

    /// Parses `x,y,z` lines. Blank lines and `#` comments are skipped; CRLF is accepted.
    pub fn parse_text(text: &str) -> Result<Self, CloudParseError> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r').trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(CloudParseError::Syntax {
                    line: i + 1,
                    message: format!("expected 3 comma-separated values, found {}", fields.len()),
                });
            }
            let mut xyz = [0.0; 3];
            for (slot, field) in xyz.iter_mut().zip(&fields) {
                *slot = field.parse::<f64>().map_err(|e| CloudParseError::Syntax {
                    line: i + 1,
                    message: format!("bad number {field:?}: {e}"),
                })?;
                if !slot.is_finite() {
                    return Err(CloudParseError::Syntax {
                        line: i + 1,
                        message: format!("non-finite coordinate {field:?}"),
                    });
                }
            }
            points.push(xyz.into());
        }
        Ok(Self { points })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 64);
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
        }
        out
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, CloudParseError> {
        let text = fs::read_to_string(path)?;
        Self::parse_text(&text)
    }
}

/// Needle geometry: radius and the angle its body subtends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub radius: f64,
    pub arc_span: f64,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        Self {
            radius: DEFAULT_NEEDLE_RADIUS,
            arc_span: std::f64::consts::PI,
        }
    }
}

impl NeedleSpec {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(PerceptionError::InvalidParams(format!(
                "needle radius {} must be > 0",
                self.radius
            )));
        }
        if !(self.arc_span > 0.0 && self.arc_span <= std::f64::consts::TAU) {
            return Err(PerceptionError::InvalidParams(format!(
                "needle arc_span {} must lie in (0, 2π]",
                self.arc_span
            )));
        }
        Ok(())
    }
}

/// A fitted or true needle: circle plus the two endpoints.
///
/// For ground-truth poses (simulator, generator) the body runs right-handed
/// about `circle.normal` from `swage` to `tip`. Estimated poses carry a
/// sign-normalized normal and geometrically ordered endpoints instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedlePose {
    pub circle: Circle3D,
    pub tip: Point3,
    pub swage: Point3,
}

impl NeedlePose {
    /// Builds a body-convention pose: swage at `center + r·swage_dir`, tip
    /// `arc_span` further round, right-handed about `normal`.
    pub fn from_swage_direction(center: Point3, normal: UnitVector3, swage_dir: Point3, spec: &NeedleSpec) -> Self {
        let n = normal.into_inner();
        let s = UnitVector3::new_normalize(swage_dir - n * swage_dir.dot(n)).expect("swage direction in plane");
        let circle = Circle3D {
            center,
            normal,
            radius: spec.radius,
        };
        let mut pose = NeedlePose {
            circle,
            tip: center,
            swage: center + s * spec.radius,
        };
        pose.tip = pose.arc_point(spec.arc_span);
        pose
    }

    /// Body point at arc angle `angle` from the swage (body convention).
    pub fn arc_point(&self, angle: f64) -> Point3 {
        let c = self.circle.center;
        let n = self.circle.normal.into_inner();
        let s = self.swage - c;
        let r = s.norm();
        let s = s * (1.0 / r);
        let t = n.cross(s);
        let (sn, cs) = angle.sin_cos();
        c + (s * cs + t * sn) * self.circle.radius
    }

    /// Arc angle of the projection of `p`, measured from the swage in `[0, 2π)`.
    pub fn arc_angle_of(&self, p: Point3) -> f64 {
        let c = self.circle.center;
        let n = self.circle.normal.into_inner();
        let s = (self.swage - c) * (1.0 / self.swage.distance(c));
        let t = n.cross(s);
        let d = p - c;
        let a = d.dot(t).atan2(d.dot(s));
        if a < 0.0 {
            a + std::f64::consts::TAU
        } else {
            a
        }
    }

    /// Closest point of the needle body (not the full circle) to `p`.
    pub fn nearest_body_point(&self, p: Point3, spec: &NeedleSpec) -> Point3 {
        let a = self.arc_angle_of(p);
        if a <= spec.arc_span {
            return self.arc_point(a);
        }
        // Outside the body arc: the nearer endpoint in angle is the nearer in space.
        let past_tip = a - spec.arc_span;
        let before_swage = std::f64::consts::TAU - a;
        if past_tip <= before_swage {
            self.tip
        } else {
            self.swage
        }
    }

    pub fn distance_to_body(&self, p: Point3, spec: &NeedleSpec) -> f64 {
        p.distance(self.nearest_body_point(p, spec))
    }

    pub fn transformed(&self, t: &RigidTransform) -> NeedlePose {
        NeedlePose {
            circle: self.circle.transformed(t),
            tip: t.apply(self.tip),
            swage: t.apply(self.swage),
        }
    }

    pub fn with_swapped_endpoints(&self) -> NeedlePose {
        NeedlePose {
            circle: self.circle,
            tip: self.swage,
            swage: self.tip,
        }
    }

    pub fn endpoints(&self) -> [Point3; 2] {
        [self.tip, self.swage]
    }

    /// Body frame: x toward the swage, z along the normal, origin at the center.
    pub fn frame(&self) -> Result<RigidTransform, GeometryError> {
        let n = self.circle.normal;
        let d = self.swage - self.circle.center;
        let e1 = UnitVector3::new_normalize(d - n.into_inner() * d.dot(n.into_inner()))?;
        let e2 = UnitVector3::new_normalize(n.into_inner().cross(e1.into_inner()))?;
        RigidTransform::from_frame(e1, e2, n, self.circle.center)
    }
}

/// RANSAC controls for one fitting stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iterations: usize,
    /// Meters.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl RansacParams {
    pub fn plane_default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 5e-4,
            min_inliers: 15,
            seed: 0,
        }
    }

    pub fn circle_default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 4e-4,
            min_inliers: 15,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        if self.iterations < 1 {
            return Err(PerceptionError::InvalidParams("iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(PerceptionError::InvalidParams("inlier_threshold must be > 0".into()));
        }
        if self.min_inliers < 3 {
            return Err(PerceptionError::InvalidParams("min_inliers must be >= 3".into()));
        }
        Ok(())
    }
}

/// Parameters of the two RANSAC stages of [`estimate_needle_pose`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub plane: RansacParams,
    pub circle: RansacParams,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            plane: RansacParams::plane_default(),
            circle: RansacParams::circle_default(),
        }
    }
}

impl EstimatorParams {
    /// Copy with both stage seeds derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.plane.seed = seed;
        self.circle.seed = seed ^ 0x9E37_79B9_7F4A_7C15;
        self
    }
}

/// Synthetic sensor corruption applied by [`synth_needle_cloud`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Isotropic per-axis standard deviation, meters.
    pub gaussian_sigma: f64,
    /// Fraction of the `n_points` budget spent on uniform clutter.
    pub outlier_fraction: f64,
    /// Full edge lengths of the clutter box, centered on the needle center.
    pub outlier_box: Point3,
    /// Fraction of needle samples deleted at random.
    pub dropout_fraction: f64,
    /// Length of the contiguous hidden arc, radians.
    pub occlusion_arc: f64,
    /// Where the hidden arc is centered, as a fraction of the body from swage (0) to tip (1).
    #[serde(default = "half")]
    pub occlusion_center: f64,
}

fn half() -> f64 {
    0.5
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            gaussian_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_box: Point3::new(0.05, 0.05, 0.05),
            dropout_fraction: 0.0,
            occlusion_arc: 0.0,
            occlusion_center: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        let bad = |m: &str| Err(PerceptionError::InvalidParams(m.to_string()));
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return bad("gaussian_sigma must be >= 0");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout_fraction) {
            return bad("dropout_fraction must lie in [0, 1)");
        }
        if !(self.occlusion_arc >= 0.0 && self.occlusion_arc.is_finite()) {
            return bad("occlusion_arc must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.occlusion_center) {
            return bad("occlusion_center must lie in [0, 1]");
        }
        let b = self.outlier_box;
        if !(b.x >= 0.0 && b.y >= 0.0 && b.z >= 0.0 && b.is_finite()) {
            return bad("outlier_box extents must be >= 0");
        }
        Ok(())
    }
}

/// Needle pose with a uniformly random orientation and its center uniform in
/// the cube of edge `spread` around `center`.
pub fn random_needle_pose(spec: &NeedleSpec, center: Point3, spread: f64, seed: u64) -> NeedlePose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = |rng: &mut ChaCha8Rng| loop {
        let v = Point3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Ok(u) = UnitVector3::new_normalize(v) {
            break u;
        }
    };
    let normal = direction(&mut rng);
    let mut swage = direction(&mut rng);
    while swage.into_inner().cross(normal.into_inner()).norm() < 1e-3 {
        swage = direction(&mut rng);
    }
    let offset = Point3::new(
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
        rng.random::<f64>() - 0.5,
    );
    NeedlePose::from_swage_direction(center + offset * spread, normal, swage.into_inner(), spec)
}

/// Hidden sub-arcs of the needle body, as `(start, end)` arc angles from the swage.
pub type HiddenArcs = Vec<(f64, f64)>;

/// Samples a needle cloud with `noise.occlusion_arc` hidden around
/// `noise.occlusion_center`.
///
/// `n_points` is the total budget: `round(outlier_fraction · n)` clutter
/// points, the rest spread evenly (ends included) over the visible body,
/// then jittered, thinned by dropout, and shuffled.
pub fn synth_needle_cloud(
    pose: &NeedlePose,
    spec: &NeedleSpec,
    noise: &NoiseModel,
    n_points: usize,
    seed: u64,
) -> PointCloud {
    let span = spec.arc_span;
    let hidden = if noise.occlusion_arc > 0.0 {
        let mid = noise.occlusion_center * span;
        let half = noise.occlusion_arc * 0.5;
        vec![((mid - half).max(0.0), (mid + half).min(span))]
    } else {
        Vec::new()
    };
    synth_needle_cloud_with_hidden(pose, spec, noise, n_points, &hidden, seed)
}

/// Visible parts of `[0, span]` once `hidden` is removed, in order.
pub fn visible_intervals(span: f64, hidden: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<(f64, f64)> = hidden
        .iter()
        .map(|&(a, b)| (a.max(0.0), b.min(span)))
        .filter(|(a, b)| b > a)
        .collect();
    cuts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    let mut cursor = 0.0;
    for (a, b) in cuts {
        if a > cursor {
            out.push((cursor, a));
        }
        cursor = f64::max(cursor, b);
    }
    if span > cursor {
        out.push((cursor, span));
    }
    out
}

/// [`synth_needle_cloud`] with an explicit list of hidden arcs.
pub fn synth_needle_cloud_with_hidden(
    pose: &NeedlePose,
    spec: &NeedleSpec,
    noise: &NoiseModel,
    n_points: usize,
    hidden: &[(f64, f64)],
    seed: u64,
) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let visible = visible_intervals(spec.arc_span, hidden);
    let visible_len: f64 = visible.iter().map(|(a, b)| b - a).sum();

    let n_out = (noise.outlier_fraction * n_points as f64).round() as usize;
    let n_in = if visible_len > 0.0 {
        n_points - n_out.min(n_points)
    } else {
        0
    };

    let mut inliers = Vec::with_capacity(n_in);
    for k in 0..n_in {
        let s = if n_in == 1 {
            0.5 * visible_len
        } else {
            visible_len * k as f64 / (n_in - 1) as f64
        };
        inliers.push(pose.arc_point(arc_from_visible_length(&visible, s)));
    }

    if noise.gaussian_sigma > 0.0 {
        let normal = Normal::new(0.0, noise.gaussian_sigma).expect("finite sigma");
        for p in &mut inliers {
            *p += Point3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
        }
    }

    let n_drop = (noise.dropout_fraction * inliers.len() as f64).round() as usize;
    if n_drop > 0 {
        let mut drop = index::sample(&mut rng, inliers.len(), n_drop).into_vec();
        drop.sort_unstable();
        for i in drop.into_iter().rev() {
            inliers.remove(i);
        }
    }

    let c = pose.circle.center;
    let b = noise.outlier_box;
    let mut points = inliers;
    for _ in 0..n_out.min(n_points) {
        let u = Point3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        points.push(c + Point3::new(u.x * b.x, u.y * b.y, u.z * b.z));
    }
    points.shuffle(&mut rng);
    PointCloud::new(points)
}

fn arc_from_visible_length(visible: &[(f64, f64)], s: f64) -> f64 {
    let mut rest = s;
    for (i, &(a, b)) in visible.iter().enumerate() {
        let len = b - a;
        if rest <= len || i + 1 == visible.len() {
            return (a + rest).min(b);
        }
        rest -= len;
    }
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneFit {
    pub plane: Plane,
    /// Consensus set, ascending indices into the input cloud.
    pub inliers: Vec<usize>,
    /// RMS point-plane distance of the inliers to the refit plane.
    pub rms: f64,
}

/// Inlier count and summed inlier residual; branch-free since this is the
/// RANSAC inner loop.
fn score(residuals: impl Iterator<Item = f64>, thr: f64) -> (usize, f64) {
    residuals.fold((0, 0.0), |(count, total), d| {
        let hit = d <= thr;
        (count + hit as usize, total + if hit { d } else { 0.0 })
    })
}

/// Better score: more inliers, then lower summed residual.
fn improves(count: usize, total: f64, best: Option<(usize, f64)>) -> bool {
    match best {
        None => true,
        Some((bc, bt)) => count > bc || (count == bc && total < bt),
    }
}

/// RANSAC plane followed by an orthogonal least-squares refit on the consensus set.
pub fn fit_plane_ransac(cloud: &PointCloud, params: &RansacParams) -> Result<PlaneFit, PerceptionError> {
    params.validate()?;
    let pts = &cloud.points;
    let n = pts.len();
    if n < 3 {
        return Err(PerceptionError::DegenerateInput {
            stage: Stage::Plane,
            reason: format!("{n} points, at least 3 required"),
        });
    }
    let thr = params.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, f64)> = None;
    let mut best_plane: Option<Plane> = None;

    for _ in 0..params.iterations {
        let s = index::sample(&mut rng, n, 3);
        let (a, b, c) = (pts[s.index(0)], pts[s.index(1)], pts[s.index(2)]);
        let e1 = b - a;
        let e2 = c - a;
        let cr = e1.cross(e2);
        if cr.norm() <= 1e-12 * e1.norm() * e2.norm() || cr.norm() == 0.0 {
            continue;
        }
        let normal = UnitVector3::new_normalize(cr).expect("non-degenerate cross product");
        let plane = Plane::through_point(normal, a);
        let (count, total) = score(pts.iter().map(|p| plane.signed_distance(*p).abs()), thr);
        if improves(count, total, best) {
            best = Some((count, total));
            best_plane = Some(plane);
        }
    }

    let (Some((count, _)), Some(hypothesis)) = (best, best_plane) else {
        return Err(PerceptionError::DegenerateInput {
            stage: Stage::Plane,
            reason: "every sampled triple was collinear".into(),
        });
    };
    if count < params.min_inliers {
        return Err(PerceptionError::NoConsensus {
            stage: Stage::Plane,
            best: count,
            required: params.min_inliers,
        });
    }
    let select =
        |plane: &Plane| -> Vec<usize> { (0..n).filter(|&i| plane.signed_distance(pts[i]).abs() <= thr).collect() };
    // Refit and reselect until the consensus set settles; a single refit on
    // the thin slab stays biased toward the sampled hypothesis.
    let mut plane = hypothesis;
    let mut inliers = select(&plane);
    for _ in 0..REFINE_ROUNDS {
        let Some(refit) = refit_plane(inliers.iter().map(|&i| pts[i]), plane.normal) else {
            break;
        };
        let next = select(&refit);
        if next.len() < params.min_inliers {
            break;
        }
        plane = refit;
        if next == inliers {
            break;
        }
        inliers = next;
    }
    let rms = rms(inliers.iter().map(|&i| plane.signed_distance(pts[i])));
    Ok(PlaneFit { plane, inliers, rms })
}

/// Orthogonal least-squares plane: normal is the eigenvector of the scatter
/// matrix with the smallest eigenvalue, oriented like `hint`.
pub fn refit_plane(points: impl Iterator<Item = Point3> + Clone, hint: UnitVector3) -> Option<Plane> {
    let mut n = 0usize;
    let mut sum = Point3::ORIGIN;
    for p in points.clone() {
        sum += p;
        n += 1;
    }
    if n < 3 {
        return None;
    }
    let centroid = sum * (1.0 / n as f64);
    let mut m = Matrix3::<f64>::zeros();
    for p in points {
        let d = p - centroid;
        let v = nalgebra::Vector3::new(d.x, d.y, d.z);
        m += v * v.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let k = eig.eigenvalues.imin();
    let col = eig.eigenvectors.column(k);
    let mut normal = UnitVector3::new_normalize(Point3::new(col[0], col[1], col[2])).ok()?;
    if normal.dot(hint) < 0.0 {
        normal = normal.flipped();
    }
    Some(Plane::through_point(normal, centroid))
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut acc = 0.0;
    for v in values {
        acc += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (acc / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleFit2d {
    pub center: [f64; 2],
    /// Consensus set, ascending indices into the input points.
    pub inliers: Vec<usize>,
    /// RMS radial residual of the inliers about the refined center.
    pub rms: f64,
}

fn radial_residual(p: [f64; 2], c: [f64; 2], r: f64) -> f64 {
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    (dx * dx + dy * dy).sqrt() - r
}

/// The (up to two) centers of radius-`r` circles through `a` and `b`.
pub fn candidate_centers(a: [f64; 2], b: [f64; 2], r: f64) -> Option<[[f64; 2]; 2]> {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let d = dx.hypot(dy);
    if d == 0.0 || d > 2.0 * r {
        return None;
    }
    let h = (r * r - 0.25 * d * d).max(0.0).sqrt();
    let mx = 0.5 * (a[0] + b[0]);
    let my = 0.5 * (a[1] + b[1]);
    let (px, py) = (-dy / d, dx / d);
    Some([[mx + h * px, my + h * py], [mx - h * px, my - h * py]])
}

/// Fixed-radius 2D circle by two-point RANSAC, refined with Gauss–Newton on
/// `Σ(|p − c| − r)²` over the consensus set.
pub fn fit_circle_fixed_radius(
    points: &[[f64; 2]],
    radius: f64,
    params: &RansacParams,
) -> Result<CircleFit2d, PerceptionError> {
    params.validate()?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(PerceptionError::InvalidParams(format!("radius {radius} must be > 0")));
    }
    let n = points.len();
    if n < 2 {
        return Err(PerceptionError::DegenerateInput {
            stage: Stage::Circle,
            reason: format!("{n} points, at least 2 required"),
        });
    }
    let thr = params.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, f64)> = None;
    let mut best_center = [0.0; 2];

    for _ in 0..params.iterations {
        let s = index::sample(&mut rng, n, 2);
        let Some(cands) = candidate_centers(points[s.index(0)], points[s.index(1)], radius) else {
            continue;
        };
        for c in cands {
            let (count, total) = score(points.iter().map(|p| radial_residual(*p, c, radius).abs()), thr);
            if improves(count, total, best) {
                best = Some((count, total));
                best_center = c;
            }
        }
    }

    let count = best.map_or(0, |b| b.0);
    if count < params.min_inliers {
        return Err(PerceptionError::NoConsensus {
            stage: Stage::Circle,
            best: count,
            required: params.min_inliers,
        });
    }
    let inliers: Vec<usize> = (0..n)
        .filter(|&i| radial_residual(points[i], best_center, radius).abs() <= thr)
        .collect();
    let subset: Vec<[f64; 2]> = inliers.iter().map(|&i| points[i]).collect();
    let center = refine_center_fixed_radius(&subset, radius, best_center);
    let rms = rms(subset.iter().map(|p| radial_residual(*p, center, radius)));
    Ok(CircleFit2d { center, inliers, rms })
}

/// Gauss–Newton with step halving on `Σ(|p − c| − r)²`.
pub fn refine_center_fixed_radius(points: &[[f64; 2]], radius: f64, start: [f64; 2]) -> [f64; 2] {
    let cost = |c: [f64; 2]| {
        points
            .iter()
            .map(|p| radial_residual(*p, c, radius).powi(2))
            .sum::<f64>()
    };
    let mut c = start;
    let mut f = cost(c);
    for _ in 0..100 {
        // Normal equations JᵀJ δ = -Jᵀe with J_i = -(p_i - c)/|p_i - c|.
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in points {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let d = (dx * dx + dy * dy).sqrt();
            if d == 0.0 {
                continue;
            }
            let (jx, jy) = (-dx / d, -dy / d);
            let e = d - radius;
            a11 += jx * jx;
            a12 += jx * jy;
            a22 += jy * jy;
            g1 += jx * e;
            g2 += jy * e;
        }
        let det = a11 * a22 - a12 * a12;
        if det.abs() <= 1e-300 {
            break;
        }
        let mut step = [(-a22 * g1 + a12 * g2) / det, (a12 * g1 - a11 * g2) / det];
        let mut accepted = false;
        for _ in 0..30 {
            let trial = [c[0] + step[0], c[1] + step[1]];
            let ft = cost(trial);
            if ft <= f {
                c = trial;
                f = ft;
                accepted = true;
                break;
            }
            step = [step[0] * 0.5, step[1] * 0.5];
        }
        if !accepted || step[0].hypot(step[1]) <= 1e-12 * radius {
            break;
        }
    }
    c
}

/// The farthest-apart pair of inliers and their snapped images on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointPair {
    /// Indices into the slice passed to [`extract_endpoints`], `first < second`.
    pub indices: [usize; 2],
    pub raw: [Point3; 2],
    pub snapped: [Point3; 2],
}

/// Exhaustive farthest pair (lowest `(i, j)` wins ties), then both points
/// snapped onto `circle`.
pub fn extract_endpoints(inliers: &[Point3], circle: &Circle3D) -> Result<EndpointPair, PerceptionError> {
    let n = inliers.len();
    if n < 2 {
        return Err(PerceptionError::DegenerateInput {
            stage: Stage::Endpoints,
            reason: format!("{n} inlier points, at least 2 required"),
        });
    }
    let mut best = (-1.0, 0, 1);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = inliers[i].distance_squared(inliers[j]);
            if d2 > best.0 {
                best = (d2, i, j);
            }
        }
    }
    let (i, j) = (best.1, best.2);
    Ok(EndpointPair {
        indices: [i, j],
        raw: [inliers[i], inliers[j]],
        snapped: [circle.snap(inliers[i]), circle.snap(inliers[j])],
    })
}

/// Per-stage diagnostics reported with an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    pub cloud_points: usize,
    pub plane_inliers: usize,
    pub plane_rms: f64,
    pub circle_inliers: usize,
    pub circle_rms: f64,
    /// Cloud indices of the raw endpoint pair.
    pub endpoint_indices: [usize; 2],
    /// Circle point in the direction of the mean circle inlier: marks which
    /// side of the endpoints the visible body lies on.
    pub arc_midpoint: Point3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleEstimate {
    pub pose: NeedlePose,
    pub diagnostics: EstimateDiagnostics,
}

/// Sign convention for estimated normals: positive y, then positive z, then positive x.
pub fn canonical_normal(n: UnitVector3) -> UnitVector3 {
    const EPS: f64 = 1e-12;
    let key = if n.y().abs() > EPS {
        n.y()
    } else if n.z().abs() > EPS {
        n.z()
    } else {
        n.x()
    };
    if key < 0.0 {
        n.flipped()
    } else {
        n
    }
}

/// Full 6D needle pose estimate of a segmented needle cloud.
pub fn estimate_needle_pose(
    cloud: &PointCloud,
    spec: &NeedleSpec,
    params: &EstimatorParams,
) -> Result<NeedleEstimate, PerceptionError> {
    spec.validate()?;
    if cloud.is_empty() {
        return Err(PerceptionError::DegenerateInput {
            stage: Stage::Plane,
            reason: "empty cloud".into(),
        });
    }
    let plane_fit = fit_plane_ransac(cloud, &params.plane)?;
    let plane = plane_fit.plane;

    let projected: Vec<Point3> = plane_fit
        .inliers
        .iter()
        .map(|&i| project_point_to_plane(cloud.points[i], &plane))
        .collect();
    let origin = project_point_to_plane(
        projected.iter().fold(Point3::ORIGIN, |a, p| a + *p) * (1.0 / projected.len() as f64),
        &plane,
    );
    let (u, v) = plane_basis(&plane);
    let (u3, v3) = (u.into_inner(), v.into_inner());
    let coords: Vec<[f64; 2]> = projected
        .iter()
        .map(|p| {
            let d = *p - origin;
            [d.dot(u3), d.dot(v3)]
        })
        .collect();

    let circle_fit =
        fit_circle_fixed_radius(&coords, spec.radius, &params.circle).map_err(|e| e.with_stage(Stage::Circle))?;
    let center = origin + u3 * circle_fit.center[0] + v3 * circle_fit.center[1];
    let mut circle = Circle3D {
        center,
        normal: canonical_normal(plane.normal),
        radius: spec.radius,
    };

    // Joint refinement: the thin consensus slab truncates the noise and
    // leaves the plane tilted toward the sampled hypothesis, so refit plane
    // and center on every point in a torus around the current circle.
    let band = JOINT_BAND_FACTOR * params.plane.inlier_threshold.max(params.circle.inlier_threshold);
    for _ in 0..JOINT_ROUNDS {
        let near: Vec<Point3> = cloud
            .points
            .iter()
            .copied()
            .filter(|p| circle.distance_to(*p) <= band)
            .collect();
        if near.len() < params.circle.min_inliers {
            break;
        }
        let Some(refit) = refit_plane(near.iter().copied(), circle.normal) else {
            break;
        };
        let anchor = project_point_to_plane(circle.center, &refit);
        let (u, v) = plane_basis(&refit);
        let (u3, v3) = (u.into_inner(), v.into_inner());
        let local: Vec<[f64; 2]> = near
            .iter()
            .map(|p| {
                let d = project_point_to_plane(*p, &refit) - anchor;
                [d.dot(u3), d.dot(v3)]
            })
            .collect();
        let c2 = refine_center_fixed_radius(&local, spec.radius, [0.0, 0.0]);
        let next = Circle3D {
            center: anchor + u3 * c2[0] + v3 * c2[1],
            normal: canonical_normal(refit.normal),
            radius: spec.radius,
        };
        let moved = next.center.distance(circle.center) + next.normal.axial_angle_to(circle.normal) * spec.radius;
        circle = next;
        if moved < 1e-12 {
            break;
        }
    }
    let plane = circle.plane();
    let center = circle.center;

    // Endpoint candidates: the torus members, placed on the fitted circle.
    let cloud_idx: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = cloud.points[i];
            circle.distance_to(p) <= band
        })
        .collect();
    if cloud_idx.len() < 2 {
        return Err(PerceptionError::DegenerateInput {
            stage: Stage::Endpoints,
            reason: format!("{} circle inliers after refinement", cloud_idx.len()),
        });
    }
    let members: Vec<Point3> = cloud_idx.iter().map(|&i| circle.snap(cloud.points[i])).collect();
    let ends = extract_endpoints(&members, &circle)?;

    let mean_offset = cloud_idx.iter().fold(Point3::ORIGIN, |a, &i| {
        a + (project_point_to_plane(cloud.points[i], &plane) - center)
    }) * (1.0 / cloud_idx.len() as f64);
    let arc_midpoint = if mean_offset.norm() > 1e-9 * spec.radius {
        circle.snap(center + mean_offset)
    } else {
        circle.snap(ends.snapped[0].lerp(ends.snapped[1], 0.5))
    };

    Ok(NeedleEstimate {
        pose: NeedlePose {
            circle,
            tip: ends.snapped[0],
            swage: ends.snapped[1],
        },
        diagnostics: EstimateDiagnostics {
            cloud_points: cloud.len(),
            plane_inliers: plane_fit.inliers.len(),
            plane_rms: plane_fit.rms,
            circle_inliers: cloud_idx.len(),
            circle_rms: circle_fit.rms,
            endpoint_indices: [cloud_idx[ends.indices[0]], cloud_idx[ends.indices[1]]],
            arc_midpoint,
        },
    })
}

/// Distances between two poses, independent of normal sign and endpoint labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseAgreement {
    pub center_dist: f64,
    /// Angle between the normal lines, radians in `[0, π/2]`.
    pub normal_angle: f64,
    /// Worse endpoint distance under the better of the two pairings.
    pub endpoint_dist: f64,
}

pub fn pose_agreement(a: &NeedlePose, b: &NeedlePose) -> PoseAgreement {
    let straight = a.tip.distance(b.tip).max(a.swage.distance(b.swage));
    let crossed = a.tip.distance(b.swage).max(a.swage.distance(b.tip));
    PoseAgreement {
        center_dist: a.circle.center.distance(b.circle.center),
        normal_angle: a.circle.normal.axial_angle_to(b.circle.normal),
        endpoint_dist: straight.min(crossed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn half_circle_pose() -> NeedlePose {
        NeedlePose::from_swage_direction(
            Point3::new(0.01, -0.02, 0.05),
            UnitVector3::from_components(0.2, 1.0, -0.3).unwrap(),
            Point3::new(1.0, 0.0, 0.0),
            &NeedleSpec::default(),
        )
    }

    fn loose(min_inliers: usize) -> RansacParams {
        RansacParams {
            min_inliers,
            ..RansacParams::circle_default()
        }
    }

    #[test]
    fn body_convention() {
        let spec = NeedleSpec::default();
        let pose = half_circle_pose();
        assert!((pose.swage.distance(pose.tip) - 2.0 * spec.radius).abs() < 1e-12);
        assert!(pose.arc_point(0.0).distance(pose.swage) < 1e-15);
        assert!(pose.arc_point(PI).distance(pose.tip) < 1e-12);
        assert!((pose.arc_angle_of(pose.arc_point(1.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_body_point_clamps_to_ends() {
        let spec = NeedleSpec::default();
        let pose = half_circle_pose();
        // A point on the missing half of the circle, just past the tip.
        let p = pose.arc_point(PI + 0.2);
        assert_eq!(pose.nearest_body_point(p, &spec), pose.tip);
        let q = pose.arc_point(TAU - 0.2);
        assert_eq!(pose.nearest_body_point(q, &spec), pose.swage);
        assert!(pose.distance_to_body(pose.arc_point(1.3), &spec) < 1e-12);
    }

    #[test]
    fn zero_noise_samples_lie_on_circle() {
        let spec = NeedleSpec {
            arc_span: TAU,
            ..Default::default()
        };
        let pose = half_circle_pose();
        let cloud = synth_needle_cloud(&pose, &spec, &NoiseModel::none(), 100, 7);
        assert_eq!(cloud.len(), 100);
        for p in &cloud.points {
            assert!(pose.circle.distance_to(*p) < 1e-12);
        }
    }

    #[test]
    fn occluded_arc_has_no_samples() {
        let spec = NeedleSpec::default();
        let pose = half_circle_pose();
        let noise = NoiseModel {
            occlusion_arc: FRAC_PI_2,
            ..NoiseModel::none()
        };
        let cloud = synth_needle_cloud(&pose, &spec, &noise, 200, 1);
        let (lo, hi) = (PI / 2.0 - PI / 4.0, PI / 2.0 + PI / 4.0);
        for p in &cloud.points {
            let a = pose.arc_angle_of(*p);
            assert!(!(a > lo + 1e-9 && a < hi - 1e-9), "sample at hidden angle {a}");
        }
    }

    #[test]
    fn synth_is_deterministic_and_counts_add_up() {
        let spec = NeedleSpec::default();
        let pose = half_circle_pose();
        let noise = NoiseModel {
            gaussian_sigma: 5e-4,
            outlier_fraction: 0.2,
            dropout_fraction: 0.1,
            ..NoiseModel::none()
        };
        let a = synth_needle_cloud(&pose, &spec, &noise, 200, 3);
        let b = synth_needle_cloud(&pose, &spec, &noise, 200, 3);
        assert_eq!(a, b);
        // 40 outliers, 160 needle samples minus 16 dropped.
        assert_eq!(a.len(), 184);
    }

    #[test]
    fn visible_interval_bookkeeping() {
        assert_eq!(visible_intervals(1.0, &[]), vec![(0.0, 1.0)]);
        assert_eq!(
            visible_intervals(1.0, &[(0.2, 0.4), (0.3, 0.5)]),
            vec![(0.0, 0.2), (0.5, 1.0)]
        );
        assert!(visible_intervals(1.0, &[(-1.0, 2.0)]).is_empty());
    }

    #[test]
    fn plane_exact_points() {
        let pts: Vec<Point3> = (0..50)
            .map(|i| {
                let t = i as f64;
                Point3::new((t * 0.37).sin(), (t * 0.91).cos() * 2.0, 0.1)
            })
            .collect();
        let fit = fit_plane_ransac(&PointCloud::new(pts), &RansacParams::plane_default()).unwrap();
        assert_eq!(fit.inliers.len(), 50);
        assert!(fit.plane.normal.axial_angle_to(UnitVector3::Z) < 1e-9);
        assert!((fit.plane.offset.abs() - 0.1).abs() < 1e-12);
        assert!((fit.plane.offset * fit.plane.normal.z() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn plane_degenerate_inputs() {
        let two = PointCloud::new(vec![Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0)]);
        let err = fit_plane_ransac(&two, &RansacParams::plane_default()).unwrap_err();
        assert!(matches!(
            err,
            PerceptionError::DegenerateInput {
                stage: Stage::Plane,
                ..
            }
        ));
        let line = PointCloud::new((0..20).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect());
        let err = fit_plane_ransac(&line, &RansacParams::plane_default()).unwrap_err();
        assert!(matches!(err, PerceptionError::DegenerateInput { .. }));
    }

    #[test]
    fn plane_no_consensus() {
        let pts = vec![
            Point3::ORIGIN,
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let err = fit_plane_ransac(&PointCloud::new(pts), &RansacParams::plane_default()).unwrap_err();
        assert_eq!(
            err,
            PerceptionError::NoConsensus {
                stage: Stage::Plane,
                best: 3,
                required: 15
            }
        );
    }

    #[test]
    fn circle_three_exact_points() {
        let pts = [[0.012, 0.0], [0.0, 0.012], [-0.012, 0.0]];
        let fit = fit_circle_fixed_radius(&pts, 0.012, &loose(3)).unwrap();
        assert!(fit.center[0].abs() < 1e-12 && fit.center[1].abs() < 1e-12);
        assert_eq!(fit.inliers, vec![0, 1, 2]);
    }

    #[test]
    fn circle_degenerate_and_too_far() {
        let err = fit_circle_fixed_radius(&[[0.0, 0.0]], 0.012, &loose(3)).unwrap_err();
        assert!(matches!(
            err,
            PerceptionError::DegenerateInput {
                stage: Stage::Circle,
                ..
            }
        ));
        // Every pair farther apart than the diameter: no candidate at all.
        let far = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let err = fit_circle_fixed_radius(&far, 0.012, &loose(3)).unwrap_err();
        assert!(matches!(err, PerceptionError::NoConsensus { best: 0, .. }));
    }

    #[test]
    fn candidate_centers_are_at_radius() {
        let [c1, c2] = candidate_centers([0.0, 0.0], [0.01, 0.004], 0.012).unwrap();
        for c in [c1, c2] {
            assert!((c[0].hypot(c[1]) - 0.012).abs() < 1e-15);
            assert!(((c[0] - 0.01).hypot(c[1] - 0.004) - 0.012).abs() < 1e-15);
        }
        assert!(candidate_centers([0.0, 0.0], [0.03, 0.0], 0.012).is_none());
    }

    #[test]
    fn endpoints_of_semicircle_are_the_diameter() {
        let r = 0.012;
        let pts: Vec<Point3> = (0..=40)
            .map(|k| {
                let a = PI * k as f64 / 40.0;
                Point3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        let circle = Circle3D::new(Point3::ORIGIN, UnitVector3::Z, r).unwrap();
        let e = extract_endpoints(&pts, &circle).unwrap();
        assert_eq!(e.indices, [0, 40]);
        assert!(e.snapped[0].distance(Point3::new(r, 0.0, 0.0)) < 1e-15);
        assert!(e.snapped[1].distance(Point3::new(-r, 0.0, 0.0)) < 1e-15);
    }

    #[test]
    fn endpoints_of_full_circle_are_opposite() {
        let r = 0.012;
        let pts: Vec<Point3> = (0..64)
            .map(|k| {
                let a = TAU * k as f64 / 64.0;
                Point3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        let circle = Circle3D::new(Point3::ORIGIN, UnitVector3::Z, r).unwrap();
        let e = extract_endpoints(&pts, &circle).unwrap();
        assert!((e.snapped[0].distance(e.snapped[1]) - 2.0 * r).abs() < 1e-12);
        assert_eq!(e.indices[1] - e.indices[0], 32);
    }

    #[test]
    fn endpoints_need_two_points() {
        let circle = Circle3D::new(Point3::ORIGIN, UnitVector3::Z, 0.01).unwrap();
        assert!(matches!(
            extract_endpoints(&[Point3::ORIGIN], &circle),
            Err(PerceptionError::DegenerateInput {
                stage: Stage::Endpoints,
                ..
            })
        ));
    }

    #[test]
    fn noise_free_closed_loop() {
        let spec = NeedleSpec::default();
        let pose = half_circle_pose();
        let cloud = synth_needle_cloud(&pose, &spec, &NoiseModel::none(), 120, 11);
        let est = estimate_needle_pose(&cloud, &spec, &EstimatorParams::default()).unwrap();
        let agree = pose_agreement(&est.pose, &pose);
        assert!(agree.center_dist < 1e-9, "{agree:?}");
        assert!(agree.normal_angle < 1e-9);
        assert!(agree.endpoint_dist < 1e-9);
        assert!(est.pose.circle.normal.y() > 0.0);
        let plane = est.pose.circle.plane();
        assert!(plane.signed_distance(est.pose.circle.center).abs() < 1e-9);
    }

    #[test]
    fn empty_cloud_fails_at_plane_stage() {
        let err = estimate_needle_pose(
            &PointCloud::default(),
            &NeedleSpec::default(),
            &EstimatorParams::default(),
        )
        .unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Plane));
        assert!(matches!(err, PerceptionError::DegenerateInput { .. }));
    }

    #[test]
    fn circle_stage_failure_is_tagged() {
        // Planar points nowhere near a 12 mm circle.
        let pts: Vec<Point3> = (0..40)
            .map(|i| Point3::new(0.001 * i as f64, 0.0005 * (i % 7) as f64, 0.0))
            .collect();
        let err = estimate_needle_pose(
            &PointCloud::new(pts),
            &NeedleSpec::default(),
            &EstimatorParams::default(),
        )
        .unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Circle));
    }

    #[test]
    fn agreement_examples() {
        let a = half_circle_pose();
        let z = pose_agreement(&a, &a);
        assert_eq!((z.center_dist, z.normal_angle, z.endpoint_dist), (0.0, 0.0, 0.0));
        assert_eq!(pose_agreement(&a, &a.with_swapped_endpoints()).endpoint_dist, 0.0);
        let shifted = a.transformed(&RigidTransform::from_translation(Point3::new(0.02, 0.0, 0.0)));
        assert!((pose_agreement(&a, &shifted).center_dist - 0.02).abs() < 1e-15);
    }

    #[test]
    fn cloud_text_format() {
        let text = "# needle\r\n0.1,0.2,0.3\r\n\n -1e-3 , 2, 3\n";
        let c = PointCloud::parse_text(text).unwrap();
        assert_eq!(c.points, vec![Point3::new(0.1, 0.2, 0.3), Point3::new(-1e-3, 2.0, 3.0)]);
        assert_eq!(PointCloud::parse_text(&c.to_text()).unwrap(), c);
        let err = PointCloud::parse_text("1,2,3\n1,2\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2"), "{err}");
        assert!(PointCloud::parse_text("1,x,3").is_err());
        assert!(PointCloud::parse_text("1,NaN,3").is_err());
    }

    #[test]
    fn canonical_normal_tie_breaks() {
        assert_eq!(canonical_normal(UnitVector3::Y.flipped()), UnitVector3::Y);
        assert_eq!(canonical_normal(UnitVector3::Z.flipped()), UnitVector3::Z);
        assert_eq!(canonical_normal(UnitVector3::X.flipped()), UnitVector3::X);
    }
}
