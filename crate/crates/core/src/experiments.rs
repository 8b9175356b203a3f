//! Seeded Monte-Carlo studies. Every trial draws from its own RNG stream, so
//! results are identical whether trials run in parallel or sequentially.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::Rng;
use serde::Serialize;

use crate::geometry::{
    backproject_ground, project, CameraIntrinsics, CellCoord, GridSpec, Pose, Transform, Vec3,
    DEFAULT_CELL_SIZE_M,
};
use crate::localization::{
    fuse_robot_pose, simulate_detections, Camera, Carrier, DetectionNoise, Localizer, SceneTruth,
    TagDetection, TagSpec,
};
use crate::planner::{
    compress, plan_fleet, validate_plan, waypoint_densify, Plan, PlanRequest, PlanStatus,
    TimedCell,
};
use crate::robot::{waypoint_to_motion, PidGains, PlanarPose, Robot, RobotParams};
use crate::{par, rng, RobotId, TagId};

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

fn overhead(name: &str, x: f64, y: f64, height: f64) -> Camera {
    Camera::new(
        name,
        CameraIntrinsics::default(),
        Pose::look_at(Vec3::new(x, y, height), Vec3::new(x, y, 0.0), Vec3::Y),
    )
}

fn deviation(a: &Pose, b: &Pose) -> (f64, f64) {
    (
        a.position.distance(b.position),
        a.orientation.angle_to(b.orientation),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub poses: u64,
    /// Largest ground-frame position deviation from ground truth, m.
    pub max_position_error: f64,
    /// Largest ground-frame orientation deviation from ground truth, rad.
    pub max_angle_error: f64,
}

/// Views one static scene from `n` random camera poses and localizes the
/// robot in the ground frame each time (noiseless).
pub fn camera_motion_invariance(n: u64, seed: u64) -> InvarianceReport {
    let mut robots = BTreeMap::new();
    robots.insert(RobotId(1), Pose::planar(1.1, 0.6, 0.7));
    let scene = SceneTruth::new(
        vec![
            ground_tag(0, Carrier::GroundPrimary, Pose::planar(0.3, 0.2, 0.25)),
            robot_tag(10, 1, Vec3::new(0.0, 0.0, 0.08)),
            robot_tag(11, 1, Vec3::new(0.04, 0.02, 0.08)),
        ],
        robots,
    )
    .expect("valid scene");
    let truth = scene.robot_in_ground(RobotId(1)).expect("robot present");
    let points: Vec<Vec3> = scene
        .tags()
        .iter()
        .filter_map(|t| scene.tag_in_world(t).map(|p| p.position))
        .collect();
    let centre = Vec3::new(0.7, 0.4, 0.0);

    let errors = par::map_trials(n, |i| {
        let mut r = rng::stream(seed, &[0xCA3E, i]);
        let camera = loop {
            let azimuth = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let elevation = r.random_range(0.6..1.5f64);
            let distance = r.random_range(1.5..3.0);
            let eye = centre
                + Vec3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                ) * distance;
            let roll = r.random_range(0.0..std::f64::consts::TAU);
            let up = Vec3::new(roll.cos(), roll.sin(), 0.0);
            let aim = centre + Vec3::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), 0.0);
            let cam = Camera::new("cam", CameraIntrinsics::default(), Pose::look_at(eye, aim, up));
            if points.iter().all(|p| cam.sees(*p)) {
                break cam;
            }
        };
        let dets = simulate_detections(&scene, &camera, &DetectionNoise::noiseless(), i);
        let mut localizer = Localizer::new(scene.tags().to_vec(), 1);
        let frame = localizer.localize(i, &[dets]).expect("ground tag visible");
        deviation(&frame.robots[&RobotId(1)].pose.pose, &truth)
    });
    let (max_position_error, max_angle_error) = errors
        .iter()
        .fold((0.0f64, 0.0f64), |(p, a), (dp, da)| (p.max(*dp), a.max(*da)));
    InvarianceReport {
        poses: n,
        max_position_error,
        max_angle_error,
    }
}

/// Oblique tripod-style camera over the default arena.
pub fn tripod_camera() -> Camera {
    Camera::new(
        "cam0",
        CameraIntrinsics::default(),
        Pose::look_at(
            Vec3::new(1.524, -1.5, 2.0),
            Vec3::new(1.524, 0.762, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ),
    )
}

/// Largest |backproject(project(p)) − p| over `n` random in-view ground points.
pub fn projection_round_trip(n: u64, seed: u64) -> f64 {
    let camera = tripod_camera();
    let to_cam = camera.pose.inverse();
    let cam_in_world = camera.in_world();
    par::map_trials(n, |i| {
        let mut r = rng::stream(seed, &[0x960E, i]);
        loop {
            let p = Vec3::new(r.random_range(-0.5..3.5), r.random_range(-0.5..2.5), 0.0);
            let Ok(px) = project(&camera.intrinsics, to_cam.transform_point(p)) else {
                continue;
            };
            if !camera.intrinsics.contains(px) {
                continue;
            }
            let back = backproject_ground(&camera.intrinsics, &cam_in_world, px)
                .expect("in-view pixel hits the ground");
            return back.distance(p);
        }
    })
    .into_iter()
    .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseStdReport {
    pub frames: u64,
    pub range: f64,
    pub expected_sigma: f64,
    /// Per-axis sample standard deviation of the detected translation.
    pub measured_sigma: [f64; 3],
}

/// Sample spread of a single tag's detected translation at fixed range.
pub fn detection_noise_std(frames: u64, sigma: f64, seed: u64) -> NoiseStdReport {
    let range = 1.5;
    let scene = SceneTruth::new(
        vec![ground_tag(0, Carrier::GroundPrimary, Pose::IDENTITY)],
        BTreeMap::new(),
    )
    .expect("valid scene");
    let camera = overhead("cam", 0.0, 0.0, range);
    let noise = DetectionNoise {
        translation_sigma: sigma,
        seed,
        ..DetectionNoise::default()
    };
    let samples = par::map_trials(frames, |tick| {
        simulate_detections(&scene, &camera, &noise, tick)[0]
            .pose_in_camera
            .pose
            .position
    });
    let n = samples.len() as f64;
    let mut measured_sigma = [0.0; 3];
    for (axis, out) in measured_sigma.iter_mut().enumerate() {
        let get = |v: &Vec3| [v.x, v.y, v.z][axis];
        let mean = samples.iter().map(get).sum::<f64>() / n;
        let var = samples.iter().map(|v| (get(v) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        *out = var.sqrt();
    }
    NoiseStdReport {
        frames,
        range,
        expected_sigma: sigma * range,
        measured_sigma,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionReport {
    pub trials: u64,
    pub one_tag_mean_error: f64,
    pub two_tag_mean_error: f64,
}

/// Mean robot-position error from one tag versus the fused pair.
pub fn fusion_study(trials: u64, sigma: f64, seed: u64) -> FusionReport {
    let mut robots = BTreeMap::new();
    robots.insert(RobotId(1), Pose::planar(0.8, 0.4, 0.5));
    let scene = SceneTruth::new(
        vec![
            ground_tag(0, Carrier::GroundPrimary, Pose::IDENTITY),
            robot_tag(10, 1, Vec3::new(0.03, 0.0, 0.08)),
            robot_tag(11, 1, Vec3::new(-0.03, 0.0, 0.08)),
        ],
        robots,
    )
    .expect("valid scene");
    let camera = overhead("cam", 0.8, 0.4, 1.5);
    let group = scene.robot_tags(RobotId(1));
    let truth = scene.robot_in_ground(RobotId(1)).expect("robot present");
    let truth_in_cam = truth.then(&camera.pose.inverse());
    let errors = par::map_trials(trials, |i| {
        let noise = DetectionNoise {
            translation_sigma: sigma,
            rotation_sigma: 0.0,
            occlusion_probability: 0.0,
            seed: rng::mix64(seed ^ i),
        };
        let dets: Vec<TagDetection> = simulate_detections(&scene, &camera, &noise, i)
            .into_iter()
            .filter(|d| d.tag.0 >= 10)
            .collect();
        let one = fuse_robot_pose(&dets[..1], &group).expect("visible");
        let two = fuse_robot_pose(&dets, &group).expect("visible");
        (
            one.pose.position.distance(truth_in_cam.position),
            two.pose.position.distance(truth_in_cam.position),
        )
    });
    let n = trials as f64;
    FusionReport {
        trials,
        one_tag_mean_error: errors.iter().map(|e| e.0).sum::<f64>() / n,
        two_tag_mean_error: errors.iter().map(|e| e.1).sum::<f64>() / n,
    }
}

/// Two overhead cameras 2 m apart sharing one secondary ground tag; the
/// robot is visible only to the second camera.
pub fn two_camera_scene() -> (SceneTruth, [Camera; 2]) {
    let mut robots = BTreeMap::new();
    robots.insert(RobotId(1), Pose::planar(3.4, 0.6, -0.8));
    let scene = SceneTruth::new(
        vec![
            ground_tag(0, Carrier::GroundPrimary, Pose::planar(0.2, 0.1, 0.3)),
            ground_tag(1, Carrier::GroundSecondary, Pose::planar(2.0, 0.5, 1.0)),
            robot_tag(10, 1, Vec3::new(0.0, 0.0, 0.08)),
        ],
        robots,
    )
    .expect("valid scene");
    (
        scene,
        [overhead("cam1", 1.0, 0.5, 1.2), overhead("cam2", 3.0, 0.5, 1.2)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainNoiseResult {
    /// Translation sigma at 1 m range, m.
    pub sigma: f64,
    pub median_error: f64,
}

/// Median ground-frame error of a robot seen only through the chained
/// second camera, one entry per sigma.
pub fn multi_camera_noise(trials: u64, sigmas: &[f64], seed: u64) -> Vec<ChainNoiseResult> {
    let (scene, cameras) = two_camera_scene();
    let truth = scene.robot_in_ground(RobotId(1)).expect("robot present");
    sigmas
        .iter()
        .map(|&sigma| {
            let mut errors = par::map_trials(trials, |i| {
                let noise = DetectionNoise {
                    translation_sigma: sigma,
                    seed: rng::mix64(seed ^ rng::mix64(sigma.to_bits()) ^ i),
                    ..DetectionNoise::default()
                };
                let dets: Vec<Vec<TagDetection>> = cameras
                    .iter()
                    .map(|c| simulate_detections(&scene, c, &noise, i))
                    .collect();
                let mut localizer = Localizer::new(scene.tags().to_vec(), 2);
                let frame = localizer.localize(i, &dets).expect("chained");
                frame.robots[&RobotId(1)].pose.pose.position.distance(truth.position)
            });
            errors.sort_by(f64::total_cmp);
            ChainNoiseResult {
                sigma,
                median_error: errors[errors.len() / 2],
            }
        })
        .collect()
}

/// Noiseless chained localization error of the two-camera scene.
pub fn chained_localization_error() -> (f64, f64) {
    let (scene, cameras) = two_camera_scene();
    let dets: Vec<Vec<TagDetection>> = cameras
        .iter()
        .map(|c| simulate_detections(&scene, c, &DetectionNoise::noiseless(), 0))
        .collect();
    let mut localizer = Localizer::new(scene.tags().to_vec(), 2);
    let frame = localizer.localize(0, &dets).expect("chained");
    let got = &frame.robots[&RobotId(1)];
    debug_assert_eq!(got.camera, 1);
    deviation(&got.pose.pose, &scene.robot_in_ground(RobotId(1)).expect("robot present"))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FuzzReport {
    pub scenarios: u64,
    pub robots: u64,
    pub failed_robots: u64,
    pub violations: u64,
}

/// Random grids up to `max_cols`×`max_rows` with up to `max_robots` robots;
/// every planner output is checked with the validator.
pub fn planner_fuzz(
    scenarios: u64,
    max_cols: u32,
    max_rows: u32,
    max_robots: u32,
    seed: u64,
) -> FuzzReport {
    let results = par::map_trials(scenarios, |i| {
        let mut r = rng::stream(seed, &[0xF022, i]);
        let cols = r.random_range(2..=max_cols);
        let rows = r.random_range(1..=max_rows);
        let grid = GridSpec::new(Pose::IDENTITY, DEFAULT_CELL_SIZE_M, cols, rows).expect("grid");
        let mut cells: Vec<CellCoord> = grid.cells().collect();
        let robots = r.random_range(1..=max_robots.min(cells.len() as u32));
        let starts = sample_cells(&mut r, &mut cells.clone(), robots);
        let goals = sample_cells(&mut r, &mut cells, robots);
        let requests: Vec<PlanRequest> = (0..robots as usize)
            .map(|k| {
                PlanRequest::new(RobotId(k as u32 + 1), starts[k], goals[k])
                    .with_priority(r.random_range(0..3))
            })
            .collect();
        let fleet = plan_fleet(&requests, &grid).expect("valid requests");
        FuzzReport {
            scenarios: 1,
            robots: robots as u64,
            failed_robots: fleet.failures.len() as u64,
            violations: validate_plan(&fleet.plans).len() as u64,
        }
    });
    results.into_iter().fold(FuzzReport::default(), |a, b| FuzzReport {
        scenarios: a.scenarios + b.scenarios,
        robots: a.robots + b.robots,
        failed_robots: a.failed_robots + b.failed_robots,
        violations: a.violations + b.violations,
    })
}

fn sample_cells(r: &mut impl Rng, pool: &mut Vec<CellCoord>, n: u32) -> Vec<CellCoord> {
    (0..n)
        .map(|_| pool.swap_remove(r.random_range(0..pool.len())))
        .collect()
}

/// Optimal joint makespan for two robots by breadth-first search over joint
/// states, forbidding shared cells and swaps. `None` when unsolvable.
pub fn joint_bfs_makespan(
    grid: &GridSpec,
    starts: [CellCoord; 2],
    goals: [CellCoord; 2],
) -> Option<u32> {
    let moves = |c: CellCoord| -> Vec<CellCoord> {
        let mut out = vec![c];
        out.extend(grid.neighbors(c));
        out
    };
    let mut seen: HashMap<(CellCoord, CellCoord), u32> = HashMap::new();
    let mut queue = VecDeque::new();
    seen.insert((starts[0], starts[1]), 0);
    queue.push_back((starts[0], starts[1]));
    while let Some((a, b)) = queue.pop_front() {
        let d = seen[&(a, b)];
        if a == goals[0] && b == goals[1] {
            return Some(d);
        }
        for na in moves(a) {
            for &nb in &moves(b) {
                if na == nb || (na == b && nb == a) {
                    continue;
                }
                if let std::collections::hash_map::Entry::Vacant(e) = seen.entry((na, nb)) {
                    e.insert(d + 1);
                    queue.push_back((na, nb));
                }
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct QualityReport {
    pub instances: u64,
    pub solvable: u64,
    pub solved: u64,
    /// solved / solvable.
    pub solved_ratio: f64,
    /// Largest prioritized makespan minus optimum over solved instances.
    pub max_excess: u32,
    /// Mean of prioritized / optimal makespan over solved instances with a
    /// nonzero optimum.
    pub mean_makespan_ratio: f64,
}

/// Prioritized planner against the joint-BFS optimum on every two-robot
/// instance with distinct starts and distinct goals.
pub fn planner_quality(cols: u32, rows: u32) -> QualityReport {
    let grid = GridSpec::new(Pose::IDENTITY, DEFAULT_CELL_SIZE_M, cols, rows).expect("grid");
    let cells: Vec<CellCoord> = grid.cells().collect();
    let mut instances = Vec::new();
    for &s0 in &cells {
        for &s1 in cells.iter().filter(|c| **c != s0) {
            for &g0 in &cells {
                for &g1 in cells.iter().filter(|c| **c != g0) {
                    instances.push(([s0, s1], [g0, g1]));
                }
            }
        }
    }
    let outcomes = par::map_trials(instances.len() as u64, |i| {
        let (s, g) = instances[i as usize];
        let optimum = joint_bfs_makespan(&grid, s, g)?;
        let requests = [
            PlanRequest::new(RobotId(1), s[0], g[0]),
            PlanRequest::new(RobotId(2), s[1], g[1]),
        ];
        let fleet = plan_fleet(&requests, &grid).expect("valid requests");
        let got = fleet.failures.is_empty().then(|| fleet.makespan());
        Some((optimum, got))
    });
    let mut report = QualityReport {
        instances: instances.len() as u64,
        ..Default::default()
    };
    let (mut ratio_sum, mut ratio_n) = (0.0, 0u64);
    for (optimum, got) in outcomes.into_iter().flatten() {
        report.solvable += 1;
        if let Some(m) = got {
            report.solved += 1;
            report.max_excess = report.max_excess.max(m.saturating_sub(optimum));
            if optimum > 0 {
                ratio_sum += m as f64 / optimum as f64;
                ratio_n += 1;
            }
        }
    }
    report.solved_ratio = report.solved as f64 / report.solvable.max(1) as f64;
    report.mean_makespan_ratio = if ratio_n > 0 { ratio_sum / ratio_n as f64 } else { 1.0 };
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaypointResult {
    /// `None` means a single command to the endpoint.
    pub spacing: Option<u32>,
    pub trials: u64,
    pub mean_error: f64,
}

/// Straight run of `cells` cells under per-command slip, re-aiming at every
/// waypoint from the true pose.
pub fn waypoint_study(
    trials: u64,
    cells: u32,
    slip_sigma: f64,
    spacings: &[Option<u32>],
    seed: u64,
) -> Vec<WaypointResult> {
    let grid = GridSpec::new(Pose::IDENTITY, DEFAULT_CELL_SIZE_M, cells + 1, 1).expect("grid");
    let start = CellCoord::new(0, 0);
    let goal = CellCoord::new(cells, 0);
    let sparse = compress(&Plan {
        robot: RobotId(1),
        waypoints: (0..=cells).map(|c| TimedCell::new(c, CellCoord::new(c, 0))).collect(),
        status: PlanStatus::Planned,
    });
    let params = RobotParams::default();
    let goal_world = grid.cell_center_local(goal).expect("in grid");
    spacings
        .iter()
        .map(|&spacing| {
            let plan = match spacing {
                Some(k) => waypoint_densify(&sparse, k).expect("spacing ≥ 1"),
                None => sparse.clone(),
            };
            let targets: Vec<Vec3> = plan.waypoints[1..]
                .iter()
                .map(|w| grid.cell_center_local(w.cell).expect("in grid"))
                .collect();
            let origin = grid.cell_center_local(start).expect("in grid");
            let errors = par::map_trials(trials, |i| {
                let mut robot = Robot::new(
                    RobotId(1),
                    params,
                    PidGains::default(),
                    PlanarPose::new(origin.x, origin.y, 0.0),
                    slip_sigma,
                    rng::mix64(seed ^ i),
                );
                for target in &targets {
                    robot.enqueue(waypoint_to_motion(&robot.state().pose, *target, &params));
                    while robot.is_busy() {
                        robot.advance(0.1);
                    }
                }
                robot.state().pose.distance_to(goal_world)
            });
            WaypointResult {
                spacing,
                trials,
                mean_error: errors.iter().sum::<f64>() / trials as f64,
            }
        })
        .collect()
}

/// Largest ground-frame change of a fused pose when any strict subset of a
/// three-tag group is occluded (noiseless).
pub fn occlusion_invariance() -> (f64, f64) {
    let mut robots = BTreeMap::new();
    robots.insert(RobotId(1), Pose::planar(1.0, 0.5, 0.3));
    let scene = SceneTruth::new(
        vec![
            ground_tag(0, Carrier::GroundPrimary, Pose::planar(0.2, 0.1, 0.1)),
            robot_tag(10, 1, Vec3::new(0.0, 0.0, 0.08)),
            robot_tag(11, 1, Vec3::new(0.04, 0.0, 0.08)),
            robot_tag(12, 1, Vec3::new(-0.04, 0.03, 0.08)),
        ],
        robots,
    )
    .expect("valid scene");
    let camera = overhead("cam", 0.6, 0.3, 2.5);
    let dets = simulate_detections(&scene, &camera, &DetectionNoise::noiseless(), 0);
    let group = scene.robot_tags(RobotId(1));
    let full = fuse_robot_pose(&dets, &group).expect("visible");
    let mut worst = (0.0f64, 0.0f64);
    // Bit k set means tag 10+k survives; 0b111 would occlude nothing.
    for survivors in 1u32..7 {
        let kept: Vec<TagDetection> = dets
            .iter()
            .filter(|d| d.tag.0 >= 10 && survivors & (1 << (d.tag.0 - 10)) != 0)
            .cloned()
            .collect();
        let fused = fuse_robot_pose(&kept, &group).expect("visible");
        let (dp, da) = deviation(&fused.pose, &full.pose);
        worst = (worst.0.max(dp), worst.1.max(da));
    }
    worst
}

/// Camera-to-ground transform is the link between frames; exposed for reuse.
pub fn ground_in_camera(scene: &SceneTruth, camera: &Camera) -> Transform {
    let tag = scene.primary_ground_tag();
    let pose = tag.mount.then(&camera.pose.inverse());
    Transform::new(tag.frame(), camera.frame.clone(), pose)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfs_oracle_small_cases() {
        let g22 = GridSpec::new(Pose::IDENTITY, 0.3, 2, 2).unwrap();
        let c = CellCoord::new;
        assert_eq!(joint_bfs_makespan(&g22, [c(0, 0), c(1, 0)], [c(1, 0), c(0, 0)]), Some(3));
        let g31 = GridSpec::new(Pose::IDENTITY, 0.3, 3, 1).unwrap();
        assert_eq!(joint_bfs_makespan(&g31, [c(0, 0), c(2, 0)], [c(2, 0), c(0, 0)]), None);
        assert_eq!(joint_bfs_makespan(&g31, [c(0, 0), c(2, 0)], [c(0, 0), c(2, 0)]), Some(0));
    }

    #[test]
    fn head_on_matches_oracle() {
        let g = GridSpec::new(Pose::IDENTITY, 0.3, 3, 2).unwrap();
        let c = CellCoord::new;
        let opt = joint_bfs_makespan(&g, [c(0, 0), c(2, 0)], [c(2, 0), c(0, 0)]).unwrap();
        let fleet = plan_fleet(
            &[
                PlanRequest::new(RobotId(1), c(0, 0), c(2, 0)),
                PlanRequest::new(RobotId(2), c(2, 0), c(0, 0)),
            ],
            &g,
        )
        .unwrap();
        assert!(validate_plan(&fleet.plans).is_empty());
        assert_eq!(fleet.makespan(), opt);
    }

    #[test]
    fn small_studies_are_reproducible() {
        assert_eq!(planner_fuzz(20, 6, 4, 5, 3), planner_fuzz(20, 6, 4, 5, 3));
        assert_eq!(fusion_study(50, 0.002, 1), fusion_study(50, 0.002, 1));
    }

    #[test]
    fn ground_in_camera_matches_detection() {
        let (scene, cams) = two_camera_scene();
        let d = simulate_detections(&scene, &cams[0], &DetectionNoise::noiseless(), 0);
        let g = ground_in_camera(&scene, &cams[0]);
        let det = d.iter().find(|d| d.tag == TagId(0)).unwrap();
        assert!(det.pose_in_camera.pose.position.distance(g.pose.position) < 1e-12);
    }
}
