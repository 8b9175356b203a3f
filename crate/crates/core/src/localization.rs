//! Fiducial-tag localization.
//!
//! Detections are synthesized from scene ground truth (pose of each tag in
//! the camera frame, plus noise and occlusion). Robot poses are recovered in
//! the frame of the primary ground tag, which makes them independent of where
//! the camera happens to be.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    compose, invert, project, relative_pose, CameraIntrinsics, FrameId, GeometryError, Pose, Quat,
    Transform, Vec3,
};
use crate::{rng, RobotId, TagId};

/// Frame of the primary ground tag; the grid origin.
pub const GROUND_FRAME: &str = "ground";
pub const WORLD_FRAME: &str = "world";

/// Ticks a ground reference may be reused after its last detection.
pub const GROUND_LATCH_TICKS: u64 = 30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizationError {
    #[error("{0} is not visible from any camera")]
    RobotNotVisible(RobotId),
    #[error("ground reference tag lost")]
    GroundReferenceLost,
    #[error("cameras share no detected reference tag")]
    NoSharedReference,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid detection noise: {0}")]
    InvalidNoise(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    Robot(RobotId),
    GroundPrimary,
    GroundSecondary,
}

impl Carrier {
    pub fn is_ground(&self) -> bool {
        !matches!(self, Carrier::Robot(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSpec {
    pub id: TagId,
    pub side_length: f64,
    /// Tag frame to carrier frame. Ground tags are carried by the world.
    pub mount: Pose,
    pub carrier: Carrier,
}

impl TagSpec {
    pub fn frame(&self) -> FrameId {
        tag_frame(self.id)
    }
}

pub fn tag_frame(id: TagId) -> FrameId {
    FrameId(format!("tag{}", id.0))
}

pub fn robot_frame(id: RobotId) -> FrameId {
    FrameId(format!("robot{}", id.0))
}

/// Ground truth: every tag and every robot pose in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    tags: Vec<TagSpec>,
    pub robots: BTreeMap<RobotId, Pose>,
}

impl SceneTruth {
    pub fn new(
        mut tags: Vec<TagSpec>,
        robots: BTreeMap<RobotId, Pose>,
    ) -> Result<Self, LocalizationError> {
        tags.sort_by_key(|t| t.id);
        if tags.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(LocalizationError::InvalidScene("duplicate tag id".into()));
        }
        if let Some(t) = tags.iter().find(|t| !(t.side_length > 0.0)) {
            return Err(LocalizationError::InvalidScene(format!(
                "{} has non-positive side length",
                t.id
            )));
        }
        let primaries = tags.iter().filter(|t| t.carrier == Carrier::GroundPrimary).count();
        if primaries != 1 {
            return Err(LocalizationError::InvalidScene(format!(
                "expected exactly one primary ground tag, found {primaries}"
            )));
        }
        for t in &tags {
            if let Carrier::Robot(r) = t.carrier {
                if !robots.contains_key(&r) {
                    return Err(LocalizationError::InvalidScene(format!(
                        "{} is mounted on unknown {r}",
                        t.id
                    )));
                }
            }
        }
        Ok(Self { tags, robots })
    }

    pub fn tags(&self) -> &[TagSpec] {
        &self.tags
    }

    pub fn primary_ground_tag(&self) -> &TagSpec {
        self.tags
            .iter()
            .find(|t| t.carrier == Carrier::GroundPrimary)
            .expect("validated at construction")
    }

    pub fn tag_in_world(&self, spec: &TagSpec) -> Option<Pose> {
        match spec.carrier {
            Carrier::Robot(r) => self.robots.get(&r).map(|p| spec.mount.then(p)),
            Carrier::GroundPrimary | Carrier::GroundSecondary => Some(spec.mount),
        }
    }

    /// Robot pose in the primary ground-tag frame.
    pub fn robot_in_ground(&self, id: RobotId) -> Option<Pose> {
        let ground = self.primary_ground_tag().mount;
        self.robots.get(&id).map(|p| p.then(&ground.inverse()))
    }

    pub fn robot_tags(&self, id: RobotId) -> Vec<TagSpec> {
        self.tags
            .iter()
            .filter(|t| t.carrier == Carrier::Robot(id))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub frame: FrameId,
    pub intrinsics: CameraIntrinsics,
    /// Camera (optical frame) in world.
    pub pose: Pose,
}

impl Camera {
    pub fn new(frame: impl Into<FrameId>, intrinsics: CameraIntrinsics, pose: Pose) -> Self {
        Self {
            frame: frame.into(),
            intrinsics,
            pose,
        }
    }

    pub fn in_world(&self) -> Transform {
        Transform::new(self.frame.clone(), WORLD_FRAME, self.pose)
    }

    /// Frustum test on a world point.
    pub fn sees(&self, world: Vec3) -> bool {
        let p = self.pose.inverse().transform_point(world);
        matches!(project(&self.intrinsics, p), Ok(px) if self.intrinsics.contains(px))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionNoise {
    /// Per-axis translation sigma at 1 m range, meters; scales with range.
    pub translation_sigma: f64,
    /// Per-axis rotation-vector sigma, radians.
    pub rotation_sigma: f64,
    /// Independent per-tag, per-frame occlusion probability.
    pub occlusion_probability: f64,
    pub seed: u64,
}

impl DetectionNoise {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), LocalizationError> {
        if !(self.translation_sigma >= 0.0 && self.rotation_sigma >= 0.0) {
            return Err(LocalizationError::InvalidNoise("sigmas must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(LocalizationError::InvalidNoise(
                "occlusion probability must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagDetection {
    pub tag: TagId,
    /// Tag frame to camera frame.
    pub pose_in_camera: Transform,
    pub tick: u64,
    pub occluded: bool,
}

fn frame_key(frame: &FrameId) -> u64 {
    // FNV-1a; only needs to be stable across runs.
    frame.0.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// One detection per visible, non-occluded tag, ordered by tag id.
pub fn simulate_detections(
    scene: &SceneTruth,
    camera: &Camera,
    noise: &DetectionNoise,
    tick: u64,
) -> Vec<TagDetection> {
    let mut rng = rng::stream(noise.seed, &[frame_key(&camera.frame), tick]);
    let world_to_cam = camera.pose.inverse();
    let mut out = Vec::new();
    for spec in scene.tags() {
        // Draw the full sample set for every tag so the stream does not
        // depend on which tags happen to be visible.
        let occlusion_draw: f64 = rng.random();
        let t_noise: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let r_noise: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];

        let Some(tag_world) = scene.tag_in_world(spec) else {
            continue;
        };
        let truth = tag_world.then(&world_to_cam);
        let visible = matches!(
            project(&camera.intrinsics, truth.position),
            Ok(px) if camera.intrinsics.contains(px)
        );
        if !visible || occlusion_draw < noise.occlusion_probability {
            continue;
        }

        let range = truth.position.norm();
        let sigma = noise.translation_sigma * range;
        let position = truth.position
            + Vec3::new(t_noise[0], t_noise[1], t_noise[2]) * sigma;
        let rot = Quat::from_rotation_vector(
            Vec3::new(r_noise[0], r_noise[1], r_noise[2]) * noise.rotation_sigma,
        );
        if !(position.z > 0.0) {
            continue;
        }
        let pose = if sigma == 0.0 && noise.rotation_sigma == 0.0 {
            truth
        } else {
            Pose::new(position, rot * truth.orientation)
        };
        out.push(TagDetection {
            tag: spec.id,
            pose_in_camera: Transform::new(spec.frame(), camera.frame.clone(), pose),
            tick,
            occluded: false,
        });
    }
    out
}

/// Averages the robot-pose estimates implied by each detected tag of one
/// robot's group: translation mean and sign-aligned chordal quaternion mean.
pub fn fuse_robot_pose(
    detections: &[TagDetection],
    group: &[TagSpec],
) -> Result<Transform, LocalizationError> {
    let robot = group
        .iter()
        .find_map(|s| match s.carrier {
            Carrier::Robot(r) => Some(r),
            _ => None,
        })
        .ok_or_else(|| LocalizationError::InvalidScene("tag group has no robot carrier".into()))?;
    if group.iter().any(|s| s.carrier != Carrier::Robot(robot)) {
        return Err(LocalizationError::InvalidScene(
            "tag group spans several carriers".into(),
        ));
    }

    let mut camera: Option<&FrameId> = None;
    let mut estimates: Vec<Pose> = Vec::new();
    for det in detections.iter().filter(|d| !d.occluded) {
        let Some(spec) = group.iter().find(|s| s.id == det.tag) else {
            continue;
        };
        match camera {
            None => camera = Some(&det.pose_in_camera.target),
            Some(c) if *c != det.pose_in_camera.target => {
                return Err(GeometryError::Frame {
                    expected: c.clone(),
                    found: det.pose_in_camera.target.clone(),
                }
                .into())
            }
            _ => {}
        }
        estimates.push(spec.mount.inverse().then(&det.pose_in_camera.pose));
    }
    let Some(camera) = camera else {
        return Err(LocalizationError::RobotNotVisible(robot));
    };
    Ok(Transform::new(robot_frame(robot), camera.clone(), mean_pose(&estimates)))
}

fn mean_pose(estimates: &[Pose]) -> Pose {
    if let [single] = estimates {
        return *single;
    }
    let n = estimates.len() as f64;
    let reference = estimates[0].orientation;
    let mut t = Vec3::ZERO;
    let mut q = Quat {
        w: 0.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };
    for e in estimates {
        t += e.position;
        let s = if e.orientation.dot(reference) < 0.0 { -1.0 } else { 1.0 };
        q.w += s * e.orientation.w;
        q.x += s * e.orientation.x;
        q.y += s * e.orientation.y;
        q.z += s * e.orientation.z;
    }
    Pose::new(t * (1.0 / n), q.normalized())
}

/// Robot pose in the ground-tag frame.
pub fn localize_in_ground_frame(
    robot_in_cam: &Transform,
    ground_in_cam: &Transform,
) -> Result<Transform, LocalizationError> {
    Ok(relative_pose(robot_in_cam, ground_in_cam)?)
}

/// Camera-2 frame to camera-1 frame from one reference tag seen by both.
pub fn chain_cameras(
    shared_in_cam1: &Transform,
    shared_in_cam2: &Transform,
) -> Result<Transform, LocalizationError> {
    if shared_in_cam1.source != shared_in_cam2.source {
        return Err(GeometryError::Frame {
            expected: shared_in_cam1.source.clone(),
            found: shared_in_cam2.source.clone(),
        }
        .into());
    }
    Ok(compose(&invert(shared_in_cam2), shared_in_cam1)?)
}

/// Links two cameras through the lowest-id reference tag detected by both.
pub fn link_cameras(
    cam1: &[TagDetection],
    cam2: &[TagDetection],
    reference_tags: &BTreeSet<TagId>,
) -> Result<Transform, LocalizationError> {
    for tag in reference_tags {
        let a = cam1.iter().find(|d| d.tag == *tag && !d.occluded);
        let b = cam2.iter().find(|d| d.tag == *tag && !d.occluded);
        if let (Some(a), Some(b)) = (a, b) {
            return chain_cameras(&a.pose_in_camera, &b.pose_in_camera);
        }
    }
    Err(LocalizationError::NoSharedReference)
}

/// Holds the most recent camera-to-ground transform of one camera.
#[derive(Debug, Clone, Default)]
pub struct GroundLatch {
    last: Option<(u64, Transform)>,
}

impl GroundLatch {
    pub fn update(
        &mut self,
        tick: u64,
        observed: Option<Transform>,
    ) -> Result<Transform, LocalizationError> {
        if let Some(t) = observed {
            self.last = Some((tick, t.clone()));
            return Ok(t);
        }
        match &self.last {
            Some((seen, t)) if tick.saturating_sub(*seen) <= GROUND_LATCH_TICKS => Ok(t.clone()),
            _ => Err(LocalizationError::GroundReferenceLost),
        }
    }

    pub fn reset(&mut self) {
        self.last = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedRobot {
    /// Robot frame to ground frame.
    pub pose: Transform,
    pub camera: usize,
    pub tags_used: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalizationFrame {
    pub robots: BTreeMap<RobotId, LocalizedRobot>,
    /// Camera-to-ground transform of every resolved camera.
    pub cameras: BTreeMap<usize, Transform>,
}

/// Per-tick localization across one or more cameras.
///
/// Cameras seeing the primary ground tag resolve directly; others chain
/// through ground tags shared with an already resolved camera.
#[derive(Debug, Clone)]
pub struct Localizer {
    tags: Vec<TagSpec>,
    latches: Vec<GroundLatch>,
}

impl Localizer {
    pub fn new(tags: Vec<TagSpec>, camera_count: usize) -> Self {
        Self {
            tags,
            latches: vec![GroundLatch::default(); camera_count],
        }
    }

    pub fn localize(
        &mut self,
        tick: u64,
        detections: &[Vec<TagDetection>],
    ) -> Result<LocalizationFrame, LocalizationError> {
        let primary = self
            .tags
            .iter()
            .find(|t| t.carrier == Carrier::GroundPrimary)
            .map(|t| t.id)
            .ok_or_else(|| LocalizationError::InvalidScene("no primary ground tag".into()))?;
        let references: BTreeSet<TagId> = self
            .tags
            .iter()
            .filter(|t| t.carrier.is_ground())
            .map(|t| t.id)
            .collect();

        let n = detections.len().min(self.latches.len());
        let mut resolved: BTreeMap<usize, Transform> = BTreeMap::new();
        for (i, dets) in detections.iter().enumerate().take(n) {
            if let Some(d) = dets.iter().find(|d| d.tag == primary && !d.occluded) {
                let cam_to_ground = invert(&d.pose_in_camera);
                resolved.insert(i, Transform::new(cam_to_ground.source, GROUND_FRAME, cam_to_ground.pose));
            }
        }
        // Chain the rest through shared references, lowest index first.
        loop {
            let mut progressed = false;
            for j in 0..n {
                if resolved.contains_key(&j) {
                    continue;
                }
                let link = resolved.iter().find_map(|(&i, to_ground)| {
                    link_cameras(&detections[i], &detections[j], &references)
                        .ok()
                        .and_then(|cj_to_ci| compose(&cj_to_ci, to_ground).ok())
                });
                if let Some(t) = link {
                    resolved.insert(j, t);
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }

        let mut cameras = BTreeMap::new();
        for (i, latch) in self.latches.iter_mut().enumerate().take(n) {
            if let Ok(t) = latch.update(tick, resolved.remove(&i)) {
                cameras.insert(i, t);
            }
        }
        if cameras.is_empty() {
            return Err(LocalizationError::GroundReferenceLost);
        }

        let robot_ids: BTreeSet<RobotId> = self
            .tags
            .iter()
            .filter_map(|t| match t.carrier {
                Carrier::Robot(r) => Some(r),
                _ => None,
            })
            .collect();
        let mut robots = BTreeMap::new();
        for id in robot_ids {
            let group: Vec<TagSpec> = self
                .tags
                .iter()
                .filter(|t| t.carrier == Carrier::Robot(id))
                .cloned()
                .collect();
            for (&i, to_ground) in &cameras {
                let mine: Vec<TagDetection> = detections[i]
                    .iter()
                    .filter(|d| !d.occluded && group.iter().any(|s| s.id == d.tag))
                    .cloned()
                    .collect();
                if mine.is_empty() {
                    continue;
                }
                let in_cam = fuse_robot_pose(&mine, &group)?;
                let pose = compose(&in_cam, to_ground)?;
                robots.insert(
                    id,
                    LocalizedRobot {
                        pose,
                        camera: i,
                        tags_used: mine.len(),
                    },
                );
                break;
            }
        }
        Ok(LocalizationFrame { robots, cameras })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use std::f64::consts::PI;

    fn ground_tag(id: u32, carrier: Carrier, at: Pose) -> TagSpec {
        TagSpec {
            id: TagId(id),
            side_length: 0.1,
            mount: at,
            carrier,
        }
    }

    fn robot_tag(id: u32, robot: u32, offset: Vec3) -> TagSpec {
        TagSpec {
            id: TagId(id),
            side_length: 0.05,
            mount: Pose::from_translation(offset),
            carrier: Carrier::Robot(RobotId(robot)),
        }
    }

    fn overhead_camera(name: &str, x: f64, y: f64) -> Camera {
        overhead_camera_at(name, x, y, 2.5)
    }

    fn overhead_camera_at(name: &str, x: f64, y: f64, height: f64) -> Camera {
        Camera::new(
            name,
            CameraIntrinsics::default(),
            Pose::look_at(Vec3::new(x, y, height), Vec3::new(x, y, 0.0), Vec3::Y),
        )
    }

    fn basic_scene() -> SceneTruth {
        let mut robots = BTreeMap::new();
        robots.insert(RobotId(1), Pose::planar(1.0, 0.5, 0.3));
        SceneTruth::new(
            vec![
                ground_tag(0, Carrier::GroundPrimary, Pose::planar(0.2, 0.1, 0.1)),
                robot_tag(10, 1, Vec3::new(0.0, 0.0, 0.08)),
                robot_tag(11, 1, Vec3::new(0.04, 0.0, 0.08)),
                robot_tag(12, 1, Vec3::new(-0.04, 0.03, 0.08)),
            ],
            robots,
        )
        .unwrap()
    }

    #[test]
    fn tag_straight_ahead_is_detected_exactly() {
        let mut robots = BTreeMap::new();
        robots.insert(RobotId(1), Pose::IDENTITY);
        let scene = SceneTruth::new(
            vec![ground_tag(0, Carrier::GroundPrimary, Pose::from_translation(Vec3::new(0.0, 0.0, 1.0)))],
            robots,
        )
        .unwrap();
        let cam = Camera::new("cam", CameraIntrinsics::default(), Pose::IDENTITY);
        let dets = simulate_detections(&scene, &cam, &DetectionNoise::noiseless(), 0);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].pose_in_camera.pose.position, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn tag_behind_camera_is_absent() {
        let scene = SceneTruth::new(
            vec![ground_tag(0, Carrier::GroundPrimary, Pose::from_translation(Vec3::new(0.0, 0.0, -1.0)))],
            BTreeMap::new(),
        )
        .unwrap();
        let cam = Camera::new("cam", CameraIntrinsics::default(), Pose::IDENTITY);
        assert!(simulate_detections(&scene, &cam, &DetectionNoise::noiseless(), 0).is_empty());
    }

    #[test]
    fn scene_validation() {
        assert!(SceneTruth::new(vec![], BTreeMap::new()).is_err());
        let dup = vec![
            ground_tag(0, Carrier::GroundPrimary, Pose::IDENTITY),
            ground_tag(0, Carrier::GroundSecondary, Pose::IDENTITY),
        ];
        assert!(SceneTruth::new(dup, BTreeMap::new()).is_err());
        let orphan = vec![
            ground_tag(0, Carrier::GroundPrimary, Pose::IDENTITY),
            robot_tag(3, 9, Vec3::ZERO),
        ];
        assert!(SceneTruth::new(orphan, BTreeMap::new()).is_err());
    }

    #[test]
    fn detections_are_deterministic_per_seed() {
        let scene = basic_scene();
        let cam = overhead_camera("cam", 0.6, 0.3);
        let noise = DetectionNoise {
            translation_sigma: 0.003,
            rotation_sigma: 0.01,
            occlusion_probability: 0.3,
            seed: 42,
        };
        for tick in 0..20 {
            assert_eq!(
                simulate_detections(&scene, &cam, &noise, tick),
                simulate_detections(&scene, &cam, &noise, tick)
            );
        }
        let other = DetectionNoise { seed: 43, ..noise };
        assert_ne!(
            simulate_detections(&scene, &cam, &noise, 3),
            simulate_detections(&scene, &cam, &other, 3)
        );
    }

    #[test]
    fn single_tag_identity_mount_fuses_to_detection() {
        let scene = basic_scene();
        let cam = overhead_camera("cam", 0.6, 0.3);
        let dets = simulate_detections(&scene, &cam, &DetectionNoise::noiseless(), 0);
        let group = vec![TagSpec {
            mount: Pose::IDENTITY,
            ..robot_tag(10, 1, Vec3::ZERO)
        }];
        let det = dets.iter().find(|d| d.tag == TagId(10)).unwrap();
        let fused = fuse_robot_pose(std::slice::from_ref(det), &group).unwrap();
        assert_eq!(fused.pose, det.pose_in_camera.pose);
    }

    #[test]
    fn fusion_without_detections_reports_robot() {
        let group = vec![robot_tag(10, 7, Vec3::ZERO)];
        assert_eq!(
            fuse_robot_pose(&[], &group),
            Err(LocalizationError::RobotNotVisible(RobotId(7)))
        );
    }

    #[test]
    fn occluded_subsets_leave_noiseless_pose_unchanged() {
        let scene = basic_scene();
        let cam = overhead_camera("cam", 0.6, 0.3);
        let dets = simulate_detections(&scene, &cam, &DetectionNoise::noiseless(), 0);
        let group = scene.robot_tags(RobotId(1));
        let full = fuse_robot_pose(&dets, &group).unwrap();
        for mask in 1u32..7 {
            let kept: Vec<TagDetection> = dets
                .iter()
                .filter(|d| d.tag.0 < 10 || mask & (1 << (d.tag.0 - 10)) != 0)
                .cloned()
                .collect();
            let fused = fuse_robot_pose(&kept, &group).unwrap();
            assert!(fused.pose.position.distance(full.pose.position) < 1e-12);
            assert!(fused.pose.orientation.angle_to(full.pose.orientation) < 1e-12);
        }
    }

    #[test]
    fn robot_on_ground_tag_localizes_to_identity() {
        let ground = Transform::new("tag0", "cam", Pose::planar(0.3, -0.2, 0.4));
        let robot = Transform::new("robot1", "cam", ground.pose);
        let rel = localize_in_ground_frame(&robot, &ground).unwrap();
        assert!(rel.pose.position.norm() < 1e-12);
        assert!(rel.pose.orientation.angle_to(Quat::IDENTITY) < 1e-12);
    }

    #[test]
    fn camera_translation_does_not_move_robot() {
        let scene = basic_scene();
        let mut loc = Localizer::new(scene.tags().to_vec(), 1);
        let truth = scene.robot_in_ground(RobotId(1)).unwrap();
        let mut poses = Vec::new();
        for (tick, offset) in [(0u64, Vec3::ZERO), (1, Vec3::new(5.0, -3.0, 2.0))] {
            let eye = Vec3::new(0.6, 0.3, 2.5) + offset;
            let cam = Camera::new(
                "cam",
                CameraIntrinsics::default(),
                Pose::look_at(eye, Vec3::new(0.6, 0.3, 0.0), Vec3::Y),
            );
            let dets = simulate_detections(&scene, &cam, &DetectionNoise::noiseless(), tick);
            let frame = loc.localize(tick, &[dets]).unwrap();
            poses.push(frame.robots[&RobotId(1)].pose.pose);
        }
        assert!(poses[0].position.distance(poses[1].position) < 1e-9);
        assert!(poses[0].position.distance(truth.position) < 1e-9);
        assert!(poses[0].orientation.angle_to(truth.orientation) < 1e-9);
    }

    #[test]
    fn ground_latch_holds_for_thirty_ticks() {
        let mut latch = GroundLatch::default();
        assert_eq!(latch.update(0, None), Err(LocalizationError::GroundReferenceLost));
        let t = Transform::identity("cam");
        latch.update(5, Some(t.clone())).unwrap();
        assert_eq!(latch.update(35, None).unwrap(), t);
        assert_eq!(latch.update(36, None), Err(LocalizationError::GroundReferenceLost));
    }

    #[test]
    fn coincident_cameras_chain_to_identity() {
        let shared = Transform::new("tag5", "cam1", Pose::planar(0.4, 0.2, 1.0));
        let same = Transform::new("tag5", "cam2", shared.pose);
        let link = chain_cameras(&shared, &same).unwrap();
        assert_eq!(link.source, FrameId::new("cam2"));
        assert_eq!(link.target, FrameId::new("cam1"));
        assert!(link.pose.position.norm() < 1e-12);
        assert!(link.pose.orientation.angle_to(Quat::IDENTITY) < 1e-12);
    }

    #[test]
    fn chaining_requires_shared_detection() {
        let a = vec![TagDetection {
            tag: TagId(5),
            pose_in_camera: Transform::new("tag5", "cam1", Pose::IDENTITY),
            tick: 0,
            occluded: false,
        }];
        let refs: BTreeSet<TagId> = [TagId(5)].into_iter().collect();
        assert_eq!(link_cameras(&a, &[], &refs), Err(LocalizationError::NoSharedReference));
    }

    #[test]
    fn second_camera_robot_matches_ground_truth() {
        let mut robots = BTreeMap::new();
        robots.insert(RobotId(1), Pose::planar(3.4, 0.6, -0.8));
        let scene = SceneTruth::new(
            vec![
                ground_tag(0, Carrier::GroundPrimary, Pose::planar(0.2, 0.1, 0.3)),
                ground_tag(1, Carrier::GroundSecondary, Pose::planar(2.0, 0.5, PI / 3.0)),
                robot_tag(10, 1, Vec3::new(0.0, 0.0, 0.08)),
            ],
            robots,
        )
        .unwrap();
        let cam1 = overhead_camera_at("cam1", 1.0, 0.5, 1.2);
        let cam2 = overhead_camera_at("cam2", 3.0, 0.5, 1.2);
        let d1 = simulate_detections(&scene, &cam1, &DetectionNoise::noiseless(), 0);
        let d2 = simulate_detections(&scene, &cam2, &DetectionNoise::noiseless(), 0);
        assert!(d1.iter().all(|d| d.tag != TagId(10)), "robot must be out of camera 1");
        assert!(d2.iter().all(|d| d.tag != TagId(0)), "primary must be out of camera 2");
        let mut loc = Localizer::new(scene.tags().to_vec(), 2);
        let frame = loc.localize(0, &[d1, d2]).unwrap();
        let got = &frame.robots[&RobotId(1)];
        assert_eq!(got.camera, 1);
        let truth = scene.robot_in_ground(RobotId(1)).unwrap();
        assert!(got.pose.pose.position.distance(truth.position) < 1e-9);
        assert!(got.pose.pose.orientation.angle_to(truth.orientation) < 1e-9);
    }
}
