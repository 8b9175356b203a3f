//! Scenario files (TOML, `schema_version = 1`) and their validation.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::path::Path;

use gridswarm_core::geometry::{grid_to_world, CameraIntrinsics, CellCoord, GridSpec, Pose, Vec3};
use gridswarm_core::localization::{Camera, Carrier, DetectionNoise, TagSpec};
use gridswarm_core::robot::{PidGains, RobotParams, Tray};
use gridswarm_core::{rng, RobotId, TagId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lan::LinkModel;
use crate::registry::{register_robot, RegistryConflict, RegistryEntry, RobotRegistry};

pub const SCHEMA_VERSION: u32 = 1;

/// Four-robot arena with the static addresses of the reference build.
pub const ARENA4_TOML: &str = include_str!("../scenarios/arena4.toml");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundKind {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTagConfig {
    pub id: u32,
    pub kind: GroundKind,
    #[serde(default = "default_ground_side")]
    pub side_length: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
}

fn default_ground_side() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_cell")]
    pub cell_size: f64,
    pub cols: u32,
    pub rows: u32,
}

fn default_cell() -> f64 {
    gridswarm_core::geometry::DEFAULT_CELL_SIZE_M
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub translation_sigma: f64,
    pub rotation_sigma: f64,
    pub occlusion_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub name: String,
    pub address: String,
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default)]
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub address: String,
    pub router: String,
    pub heartbeat_timeout_ticks: u64,
    pub ack_timeout_ticks: u64,
    pub deviation_ticks: u32,
    /// Waypoint-reached radius as a fraction of the cell size.
    pub waypoint_tolerance: f64,
    /// Correction attempts per waypoint before accepting the cell.
    pub max_corrections: u32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            address: "192.168.1.47".into(),
            router: "192.168.1.1".into(),
            heartbeat_timeout_ticks: 10,
            ack_timeout_ticks: 5,
            deviation_ticks: 3,
            waypoint_tolerance: 0.25,
            max_corrections: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub latency_ticks: u64,
    pub drop_probability: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latency_ticks: 1,
            drop_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotDefaults {
    pub params: RobotParams,
    pub gains: PidGains,
    pub slip_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub id: u32,
    pub address: String,
    pub tags: Vec<u32>,
    pub start: [u32; 2],
    /// Initial heading in the grid frame, radians.
    #[serde(default)]
    pub heading: f64,
    #[serde(default = "default_tray")]
    pub tray: Tray,
}

fn default_tray() -> Tray {
    Tray::Empty
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalConfig {
    /// Omitted: nearest idle robot.
    #[serde(default)]
    pub robot: Option<u32>,
    pub cell: [u32; 2],
    #[serde(default)]
    pub at_tick: u64,
    #[serde(default)]
    pub drop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// Raises a robot's slip sigma for a number of ticks.
    SlipBurst { robot: u32, sigma: f64, ticks: u64 },
    /// Partitions a robot's address; heals after `ticks` when given.
    Disconnect {
        robot: u32,
        #[serde(default)]
        ticks: Option<u64>,
    },
    Reconnect { robot: u32 },
    /// Moves a camera by (dx, dy, dz) meters and turns it by `dyaw` radians
    /// about the world vertical through its center.
    CameraNudge {
        #[serde(default)]
        camera: usize,
        #[serde(default)]
        dx: f64,
        #[serde(default)]
        dy: f64,
        #[serde(default)]
        dz: f64,
        #[serde(default)]
        dyaw: f64,
    },
    /// Permanent hardware failure of a robot.
    Hardware { robot: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFault {
    pub at_tick: u64,
    #[serde(flatten)]
    pub fault: Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub tick_rate_hz: f64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    /// Keep running after all scripted goals complete.
    #[serde(default)]
    pub interactive: bool,
    pub grid: GridConfig,
    pub ground_tags: Vec<GroundTagConfig>,
    pub cameras: Vec<CameraConfig>,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub robot_defaults: RobotDefaults,
    #[serde(default)]
    pub robots: Vec<RobotConfig>,
    #[serde(default)]
    pub goals: Vec<GoalConfig>,
    #[serde(default)]
    pub faults: Vec<ScriptedFault>,
}

fn default_rate() -> f64 {
    10.0
}

fn default_max_ticks() -> u64 {
    6000
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSetup {
    pub camera: Camera,
    pub address: String,
    pub noise: DetectionNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotStart {
    pub cell: CellCoord,
    /// Heading in the grid frame.
    pub heading: f64,
    pub tray: Tray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    pub robot: Option<RobotId>,
    pub cell: CellCoord,
    pub at_tick: u64,
    pub drop: bool,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub grid: GridSpec,
    pub cameras: Vec<CameraSetup>,
    /// Ground and robot tags.
    pub tags: Vec<TagSpec>,
    pub registry: RobotRegistry,
    pub starts: BTreeMap<RobotId, RobotStart>,
    pub goals: Vec<Goal>,
    pub network: LinkModel,
}

/// Height of robot-mounted tags above the floor, m.
pub const ROBOT_TAG_HEIGHT: f64 = 0.08;
/// Spacing between tags of one robot, m.
pub const ROBOT_TAG_SPACING: f64 = 0.05;

impl Scenario {
    pub fn id(&self) -> &str {
        &self.file.id
    }

    pub fn seed(&self) -> u64 {
        self.file.seed
    }

    pub fn tick_period(&self) -> f64 {
        1.0 / self.file.tick_rate_hz
    }

    pub fn server(&self) -> &ServerConfig {
        &self.file.server
    }

    /// Same scenario with a different master seed.
    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut file = self.file.clone();
        file.seed = seed;
        ScenarioFile::validate(file).expect("reseeding keeps a scenario valid")
    }

    pub fn robot_defaults(&self) -> &RobotDefaults {
        &self.file.robot_defaults
    }

    pub fn faults(&self) -> &[ScriptedFault] {
        &self.file.faults
    }

    pub fn bundled_arena() -> Scenario {
        parse_scenario(ARENA4_TOML).expect("bundled scenario is valid")
    }

    /// The bundled arena with `n` robots, differing only in registry entries.
    pub fn template(n: usize) -> Result<Scenario, ScenarioError> {
        let mut file = Self::bundled_arena().file;
        file.id = format!("template-{n}");
        file.robots = template_robots(n)?;
        ScenarioFile::validate(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("scenario serializes")
    }
}

/// Start cells used by [`Scenario::template`], in registration order.
const TEMPLATE_STARTS: [[u32; 2]; 8] = [
    [0, 0],
    [0, 4],
    [0, 2],
    [2, 0],
    [2, 4],
    [1, 1],
    [1, 3],
    [2, 2],
];

pub fn template_robots(n: usize) -> Result<Vec<RobotConfig>, ScenarioError> {
    if n == 0 || n > TEMPLATE_STARTS.len() {
        return Err(invalid(
            "robots",
            format!("template supports 1 to {} robots", TEMPLATE_STARTS.len()),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let id = i as u32 + 1;
            RobotConfig {
                id,
                address: format!("192.168.1.{}", 4 + i),
                tags: vec![10 * id, 10 * id + 1],
                start: TEMPLATE_STARTS[i],
                heading: 0.0,
                tray: Tray::Loaded,
            }
        })
        .collect())
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    if text.trim().is_empty() {
        return Err(ScenarioError::Parse("empty scenario file".into()));
    }
    let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    ScenarioFile::validate(file)
}

fn check_address(path: &str, addr: &str, used: &mut BTreeSet<String>) -> Result<(), ScenarioError> {
    if addr.parse::<Ipv4Addr>().is_err() {
        return Err(invalid(path, format!("`{addr}` is not a dotted IPv4 address")));
    }
    if !used.insert(addr.to_owned()) {
        return Err(invalid(path, format!("address {addr} is already in use")));
    }
    Ok(())
}

fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn cell(a: [u32; 2]) -> CellCoord {
    CellCoord::new(a[0], a[1])
}

impl ScenarioFile {
    pub fn validate(self) -> Result<Scenario, ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.id.trim().is_empty() {
            return Err(invalid("id", "must not be empty"));
        }
        if !(self.tick_rate_hz > 0.0 && self.tick_rate_hz.is_finite()) {
            return Err(invalid("tick_rate_hz", "must be positive"));
        }

        // Ground tags.
        let primaries: Vec<&GroundTagConfig> = self
            .ground_tags
            .iter()
            .filter(|t| t.kind == GroundKind::Primary)
            .collect();
        if primaries.len() != 1 {
            return Err(invalid(
                "ground_tags",
                format!("exactly one primary tag required, found {}", primaries.len()),
            ));
        }
        let primary = primaries[0];
        let origin = Pose::planar(primary.x, primary.y, primary.yaw);
        let mut tag_ids = BTreeSet::new();
        let mut tags = Vec::new();
        for (i, t) in self.ground_tags.iter().enumerate() {
            let path = format!("ground_tags[{i}]");
            if !tag_ids.insert(t.id) {
                return Err(invalid(format!("{path}.id"), format!("tag {} is duplicated", t.id)));
            }
            if !(t.side_length > 0.0) {
                return Err(invalid(format!("{path}.side_length"), "must be positive"));
            }
            tags.push(TagSpec {
                id: TagId(t.id),
                side_length: t.side_length,
                mount: Pose::planar(t.x, t.y, t.yaw),
                carrier: match t.kind {
                    GroundKind::Primary => Carrier::GroundPrimary,
                    GroundKind::Secondary => Carrier::GroundSecondary,
                },
            });
        }

        // Grid.
        let g = &self.grid;
        if !(g.cell_size > 0.0) {
            return Err(invalid("grid.cell_size", "must be positive"));
        }
        if g.cols == 0 || g.rows == 0 {
            return Err(invalid("grid", "cols and rows must be positive"));
        }
        let grid = GridSpec::new(origin, g.cell_size, g.cols, g.rows)
            .map_err(|e| invalid("grid", e.to_string()))?;

        // Addresses of infrastructure first so robots cannot shadow them.
        let mut addresses = BTreeSet::new();
        check_address("server.address", &self.server.address, &mut addresses)?;
        check_address("server.router", &self.server.router, &mut addresses)?;
        if !(self.server.waypoint_tolerance > 0.0 && self.server.waypoint_tolerance < 0.5) {
            return Err(invalid("server.waypoint_tolerance", "must lie in (0, 0.5)"));
        }
        if self.server.heartbeat_timeout_ticks == 0 || self.server.ack_timeout_ticks == 0 {
            return Err(invalid("server", "timeouts must be at least one tick"));
        }
        if !(0.0..=1.0).contains(&self.network.drop_probability) {
            return Err(invalid("network.drop_probability", "must lie in [0, 1]"));
        }

        // Cameras.
        if self.cameras.is_empty() {
            return Err(invalid("cameras", "at least one camera is required"));
        }
        let mut cameras = Vec::new();
        let mut names = BTreeSet::new();
        for (i, c) in self.cameras.iter().enumerate() {
            let path = format!("cameras[{i}]");
            if !names.insert(c.name.clone()) {
                return Err(invalid(format!("{path}.name"), format!("`{}` is duplicated", c.name)));
            }
            check_address(&format!("{path}.address"), &c.address, &mut addresses)?;
            let k = c.intrinsics;
            CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
                .map_err(|e| invalid(format!("{path}.intrinsics"), e.to_string()))?;
            let (eye, target, up) = (vec3(c.eye), vec3(c.target), vec3(c.up));
            let forward = target - eye;
            if forward.norm() < 1e-9 || forward.cross(up).norm() < 1e-9 * forward.norm() {
                return Err(invalid(
                    format!("{path}.target"),
                    "view direction must be non-zero and not parallel to `up`",
                ));
            }
            let noise = DetectionNoise {
                translation_sigma: c.noise.translation_sigma,
                rotation_sigma: c.noise.rotation_sigma,
                occlusion_probability: c.noise.occlusion_probability,
                seed: rng::mix64(self.seed ^ rng::mix64(0xCA + i as u64)),
            };
            noise
                .validate()
                .map_err(|e| invalid(format!("{path}.noise"), e.to_string()))?;
            cameras.push(CameraSetup {
                camera: Camera::new(c.name.clone(), k, Pose::look_at(eye, target, up)),
                address: c.address.clone(),
                noise,
            });
        }
        check_camera_links(&cameras, &tags)?;

        // Robots.
        let defaults = &self.robot_defaults;
        defaults
            .params
            .validate()
            .map_err(|e| invalid("robot_defaults.params", e.to_string()))?;
        defaults
            .gains
            .validate()
            .map_err(|e| invalid("robot_defaults.gains", e.to_string()))?;
        if defaults.params.footprint > g.cell_size {
            return Err(invalid("robot_defaults.params.footprint", "must not exceed the cell size"));
        }
        if !(defaults.slip_sigma >= 0.0) {
            return Err(invalid("robot_defaults.slip_sigma", "must be non-negative"));
        }
        let mut registry = RobotRegistry::new();
        let mut starts = BTreeMap::new();
        let mut start_cells = BTreeSet::new();
        for (i, r) in self.robots.iter().enumerate() {
            let path = format!("robots[{i}]");
            if addresses.contains(&r.address) {
                return Err(invalid(
                    format!("{path}.address"),
                    format!("address {} is already in use", r.address),
                ));
            }
            check_address(&format!("{path}.address"), &r.address, &mut BTreeSet::new())?;
            for t in &r.tags {
                if tag_ids.contains(t) {
                    return Err(invalid(format!("{path}.tags"), format!("tag {t} is duplicated")));
                }
            }
            let id = RobotId(r.id);
            registry = register_robot(
                registry,
                RegistryEntry {
                    id,
                    address: r.address.clone(),
                    tags: r.tags.iter().map(|t| TagId(*t)).collect(),
                    params: defaults.params,
                },
            )
            .map_err(|e: RegistryConflict| invalid(path.clone(), e.to_string()))?;
            let start = cell(r.start);
            if !grid.contains(start) {
                return Err(invalid(format!("{path}.start"), format!("{start} lies outside the grid")));
            }
            if !start_cells.insert(start) {
                return Err(invalid(format!("{path}.start"), format!("{start} is already occupied")));
            }
            let centre = grid_to_world(&grid, start).expect("cell checked above");
            if !cameras.iter().any(|c| c.camera.sees(centre)) {
                return Err(invalid(format!("{path}.start"), format!("{start} is not visible to any camera")));
            }
            let n = r.tags.len() as f64;
            for (k, t) in r.tags.iter().enumerate() {
                tag_ids.insert(*t);
                tags.push(TagSpec {
                    id: TagId(*t),
                    side_length: 0.05,
                    mount: Pose::from_translation(Vec3::new(
                        (k as f64 - (n - 1.0) / 2.0) * ROBOT_TAG_SPACING,
                        0.0,
                        ROBOT_TAG_HEIGHT,
                    )),
                    carrier: Carrier::Robot(id),
                });
            }
            starts.insert(
                id,
                RobotStart {
                    cell: start,
                    heading: r.heading,
                    tray: r.tray,
                },
            );
        }

        // Goals and faults refer to known robots, cameras and cells.
        let mut goals = Vec::new();
        for (i, gc) in self.goals.iter().enumerate() {
            let path = format!("goals[{i}]");
            let c = cell(gc.cell);
            if !grid.contains(c) {
                return Err(invalid(format!("{path}.cell"), format!("{c} lies outside the grid")));
            }
            if let Some(r) = gc.robot {
                if registry.get(RobotId(r)).is_none() {
                    return Err(invalid(format!("{path}.robot"), format!("unknown robot {r}")));
                }
            }
            goals.push(Goal {
                robot: gc.robot.map(RobotId),
                cell: c,
                at_tick: gc.at_tick,
                drop: gc.drop,
            });
        }
        for (i, f) in self.faults.iter().enumerate() {
            let path = format!("faults[{i}]");
            match &f.fault {
                Fault::SlipBurst { robot, .. }
                | Fault::Disconnect { robot, .. }
                | Fault::Reconnect { robot }
                | Fault::Hardware { robot } => {
                    if registry.get(RobotId(*robot)).is_none() {
                        return Err(invalid(format!("{path}.robot"), format!("unknown robot {robot}")));
                    }
                }
                Fault::CameraNudge { camera, .. } => {
                    if *camera >= cameras.len() {
                        return Err(invalid(format!("{path}.camera"), format!("unknown camera {camera}")));
                    }
                }
            }
        }

        let network = LinkModel {
            latency_ticks: self.network.latency_ticks,
            drop_probability: self.network.drop_probability,
            partitioned: BTreeSet::new(),
            seed: rng::mix64(self.seed ^ 0x1A4),
        };
        Ok(Scenario {
            file: self,
            grid,
            cameras,
            tags,
            registry,
            starts,
            goals,
            network,
        })
    }
}

/// Every camera must see a ground tag, and the cameras must form one
/// connected group through shared ground tags that includes the primary.
fn check_camera_links(cameras: &[CameraSetup], tags: &[TagSpec]) -> Result<(), ScenarioError> {
    let visible: Vec<BTreeSet<TagId>> = cameras
        .iter()
        .map(|c| {
            tags.iter()
                .filter(|t| c.camera.sees(t.mount.position))
                .map(|t| t.id)
                .collect()
        })
        .collect();
    let primary = tags
        .iter()
        .find(|t| t.carrier == Carrier::GroundPrimary)
        .map(|t| t.id)
        .expect("primary checked by caller");
    let mut linked: BTreeSet<usize> = (0..cameras.len())
        .filter(|&i| visible[i].contains(&primary))
        .collect();
    if linked.is_empty() {
        return Err(invalid("cameras", "no camera sees the primary ground tag"));
    }
    loop {
        let before = linked.len();
        for j in 0..cameras.len() {
            if !linked.contains(&j)
                && linked.clone().iter().any(|&i| !visible[i].is_disjoint(&visible[j]))
            {
                linked.insert(j);
            }
        }
        if linked.len() == before {
            break;
        }
    }
    match (0..cameras.len()).find(|j| !linked.contains(j)) {
        None => Ok(()),
        Some(j) => Err(invalid(
            format!("cameras[{j}]"),
            "shares no visible ground tag with the cameras linked to the primary tag",
        )),
    }
}
