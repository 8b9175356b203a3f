//! Rigid-body transforms, pinhole projection and the virtual grid.
//!
//! Conventions: right-handed world frame with the ground plane at `z = 0`.
//! Camera frames are optical frames (x right, y down, z forward). A
//! [`Transform`] with `source = A`, `target = B` maps coordinates expressed
//! in `A` into coordinates expressed in `B`.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("frame mismatch: expected `{expected}`, found `{found}`")]
    Frame { expected: FrameId, found: FrameId },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("viewing ray does not intersect the ground plane")]
    NoGroundIntersection,
    #[error("point ({x:.4}, {y:.4}) lies outside the grid")]
    OutOfGrid { x: f64, y: f64 },
    #[error("cell ({col}, {row}) lies outside a {cols}x{rows} grid")]
    CellOutOfRange {
        col: i64,
        row: i64,
        cols: u32,
        rows: u32,
    },
    #[error("grid is not visible from the camera")]
    EmptyOverlay,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Quat::IDENTITY;
        }
        let a = axis * (1.0 / n);
        let (s, c) = (angle * 0.5).sin_cos();
        Quat {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
    }

    /// Rotation vector (axis scaled by angle) to quaternion.
    pub fn from_rotation_vector(r: Vec3) -> Quat {
        Quat::from_axis_angle(r, r.norm())
    }

    pub fn from_yaw(yaw: f64) -> Quat {
        Quat::from_axis_angle(Vec3::Z, yaw)
    }

    /// Rotation matrix (row-major) to quaternion, Shepperd's method.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Quat {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[2][1] - m[1][2]) / s,
                y: (m[0][2] - m[2][0]) / s,
                z: (m[1][0] - m[0][1]) / s,
            }
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quat {
                w: (m[2][1] - m[1][2]) / s,
                x: 0.25 * s,
                y: (m[0][1] + m[1][0]) / s,
                z: (m[0][2] + m[2][0]) / s,
            }
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quat {
                w: (m[0][2] - m[2][0]) / s,
                x: (m[0][1] + m[1][0]) / s,
                y: 0.25 * s,
                z: (m[1][2] + m[2][1]) / s,
            }
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quat {
                w: (m[1][0] - m[0][1]) / s,
                x: (m[0][2] + m[2][0]) / s,
                y: (m[1][2] + m[2][1]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Quat {
        let n = self.norm();
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    fn vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = self.vector();
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Quat { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Heading about the world z axis.
    pub fn yaw(self) -> f64 {
        let Quat { w, x, y, z } = self;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    /// Rotation angle of `self⁻¹ · o`, in `[0, π]`.
    pub fn angle_to(self, o: Quat) -> f64 {
        let d = self.conjugate() * o;
        let v = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        2.0 * v.atan2(d.w.abs())
    }
}

impl Mul for Quat {
    type Output = Quat;
    fn mul(self, o: Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }
}

/// Rigid pose: `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: Vec3::ZERO,
        orientation: Quat::IDENTITY,
    };

    pub fn new(position: Vec3, orientation: Quat) -> Self {
        Self {
            position,
            orientation: orientation.normalized(),
        }
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self::new(position, Quat::IDENTITY)
    }

    /// Planar pose on the ground plane.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self::new(Vec3::new(x, y, 0.0), Quat::from_yaw(yaw))
    }

    /// Optical-frame camera pose at `eye` looking towards `target`.
    ///
    /// `up` is the world direction that should appear upward in the image;
    /// it must not be parallel to the viewing direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalized();
        let up_perp = up - forward * up.dot(forward);
        let down = (-up_perp).normalized();
        let right = down.cross(forward);
        let m = [
            [right.x, down.x, forward.x],
            [right.y, down.y, forward.y],
            [right.z, down.z, forward.z],
        ];
        Self::new(eye, Quat::from_matrix(m))
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.orientation.rotate(p) + self.position
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Pose) -> Pose {
        Pose {
            position: next.orientation.rotate(self.position) + next.position,
            orientation: (next.orientation * self.orientation).normalized(),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.conjugate();
        Pose {
            position: -inv.rotate(self.position),
            orientation: inv,
        }
    }

    pub fn yaw(&self) -> f64 {
        self.orientation.yaw()
    }
}

/// Coordinate frame label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameId(pub String);

impl FrameId {
    pub fn new(s: impl Into<String>) -> Self {
        FrameId(s.into())
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FrameId {
    fn from(s: &str) -> Self {
        FrameId(s.to_owned())
    }
}

/// Rigid map from `source` coordinates to `target` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub source: FrameId,
    pub target: FrameId,
    pub pose: Pose,
}

impl Transform {
    pub fn new(source: impl Into<FrameId>, target: impl Into<FrameId>, pose: Pose) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            pose,
        }
    }

    pub fn identity(frame: impl Into<FrameId>) -> Self {
        let f = frame.into();
        Self {
            source: f.clone(),
            target: f,
            pose: Pose::IDENTITY,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.pose.transform_point(p)
    }
}

impl From<String> for FrameId {
    fn from(s: String) -> Self {
        FrameId(s)
    }
}

/// `a` (S→T) followed by `b` (T→U), giving S→U.
pub fn compose(a: &Transform, b: &Transform) -> Result<Transform, GeometryError> {
    if a.target != b.source {
        return Err(GeometryError::Frame {
            expected: a.target.clone(),
            found: b.source.clone(),
        });
    }
    Ok(Transform {
        source: a.source.clone(),
        target: b.target.clone(),
        pose: a.pose.then(&b.pose),
    })
}

pub fn invert(t: &Transform) -> Transform {
    Transform {
        source: t.target.clone(),
        target: t.source.clone(),
        pose: t.pose.inverse(),
    }
}

/// Robot pose expressed in the ground-tag frame, from two observations in
/// one camera frame. With identity orientations the translation reduces to
/// `v_robot - v_ground`.
pub fn relative_pose(
    robot_in_cam: &Transform,
    ground_in_cam: &Transform,
) -> Result<Transform, GeometryError> {
    if robot_in_cam.target != ground_in_cam.target {
        return Err(GeometryError::Frame {
            expected: robot_in_cam.target.clone(),
            found: ground_in_cam.target.clone(),
        });
    }
    compose(robot_in_cam, &invert(ground_in_cam))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics("resolution must be non-zero"));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must lie inside the image",
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= 0.0 && px.u <= self.width as f64 && px.v >= 0.0 && px.v <= self.height as f64
    }
}

impl Default for CameraIntrinsics {
    /// 1920×1080 at 1000 px focal length.
    fn default() -> Self {
        Self {
            fx: 1000.0,
            fy: 1000.0,
            cx: 960.0,
            cy: 540.0,
            width: 1920,
            height: 1080,
        }
    }
}

pub fn project(k: &CameraIntrinsics, p_cam: Vec3) -> Result<Pixel, GeometryError> {
    if !(p_cam.z > 0.0) {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    Ok(Pixel {
        u: k.fx * p_cam.x / p_cam.z + k.cx,
        v: k.fy * p_cam.y / p_cam.z + k.cy,
    })
}

/// Intersects the viewing ray through `pixel` with the ground plane.
pub fn backproject_ground(
    k: &CameraIntrinsics,
    cam_in_world: &Transform,
    pixel: Pixel,
) -> Result<Vec3, GeometryError> {
    let ray_cam = Vec3::new((pixel.u - k.cx) / k.fx, (pixel.v - k.cy) / k.fy, 1.0);
    let dir = cam_in_world.pose.orientation.rotate(ray_cam);
    let origin = cam_in_world.pose.position;
    const PARALLEL_EPS: f64 = 1e-12;
    if dir.z.abs() < PARALLEL_EPS {
        return Err(GeometryError::NoGroundIntersection);
    }
    let s = -origin.z / dir.z;
    if !(s > 0.0) {
        return Err(GeometryError::NoGroundIntersection);
    }
    let mut hit = origin + dir * s;
    hit.z = 0.0;
    Ok(hit)
}

/// Integer cell index; `(0, 0)` contains the primary ground tag.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub struct CellCoord {
    pub col: u32,
    pub row: u32,
}

impl CellCoord {
    pub const fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }

    pub fn manhattan(self, o: CellCoord) -> u32 {
        self.col.abs_diff(o.col) + self.row.abs_diff(o.row)
    }
}

impl fmt::Display for CellCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.col, self.row)
    }
}

/// Virtual grid anchored at the primary ground tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Primary ground tag in the world frame.
    pub origin: Pose,
    pub cell_size: f64,
    pub cols: u32,
    pub rows: u32,
    /// Declared workspace extent in meters (x, y).
    pub extent: (f64, f64),
}

/// Arena width in meters (120 in).
pub const ARENA_WIDTH_M: f64 = 3.048;
/// Arena depth in meters (60 in).
pub const ARENA_DEPTH_M: f64 = 1.524;
pub const DEFAULT_CELL_SIZE_M: f64 = 0.3048;

impl GridSpec {
    pub fn new(origin: Pose, cell_size: f64, cols: u32, rows: u32) -> Result<Self, GeometryError> {
        Self::with_extent(
            origin,
            cell_size,
            cols,
            rows,
            (cols as f64 * cell_size, rows as f64 * cell_size),
        )
    }

    pub fn with_extent(
        origin: Pose,
        cell_size: f64,
        cols: u32,
        rows: u32,
        extent: (f64, f64),
    ) -> Result<Self, GeometryError> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(GeometryError::InvalidGrid("cell_size must be positive"));
        }
        if cols == 0 || rows == 0 {
            return Err(GeometryError::InvalidGrid("grid must have at least one cell"));
        }
        const COVER_EPS: f64 = 1e-9;
        if cols as f64 * cell_size + COVER_EPS < extent.0
            || rows as f64 * cell_size + COVER_EPS < extent.1
        {
            return Err(GeometryError::InvalidGrid("cells do not cover the declared extent"));
        }
        Ok(Self {
            origin,
            cell_size,
            cols,
            rows,
            extent,
        })
    }

    /// Smallest grid of `cell_size` cells covering `extent`.
    pub fn covering(origin: Pose, extent: (f64, f64), cell_size: f64) -> Result<Self, GeometryError> {
        if !(cell_size > 0.0) {
            return Err(GeometryError::InvalidGrid("cell_size must be positive"));
        }
        let cols = (extent.0 / cell_size - 1e-9).ceil().max(1.0) as u32;
        let rows = (extent.1 / cell_size - 1e-9).ceil().max(1.0) as u32;
        Self::with_extent(origin, cell_size, cols, rows, extent)
    }

    /// The 10×5 arena grid with its origin at the world origin.
    pub fn arena() -> Self {
        Self::covering(Pose::IDENTITY, (ARENA_WIDTH_M, ARENA_DEPTH_M), DEFAULT_CELL_SIZE_M)
            .expect("arena grid is valid")
    }

    pub fn width(&self) -> f64 {
        self.cols as f64 * self.cell_size
    }

    pub fn depth(&self) -> f64 {
        self.rows as f64 * self.cell_size
    }

    pub fn contains(&self, c: CellCoord) -> bool {
        c.col < self.cols && c.row < self.rows
    }

    pub fn cell_count(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn cells(&self) -> impl Iterator<Item = CellCoord> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| CellCoord::new(col, row)))
    }

    /// 4-connected neighbours inside the grid, ordered by (col, row).
    pub fn neighbors(&self, c: CellCoord) -> impl Iterator<Item = CellCoord> + '_ {
        let (col, row) = (c.col as i64, c.row as i64);
        [(col - 1, row), (col, row - 1), (col, row + 1), (col + 1, row)]
            .into_iter()
            .filter(move |&(x, y)| x >= 0 && y >= 0 && x < self.cols as i64 && y < self.rows as i64)
            .map(|(x, y)| CellCoord::new(x as u32, y as u32))
    }

    /// Grid-frame (ground-tag frame) point to cell.
    pub fn local_to_cell(&self, local: Vec3) -> Result<CellCoord, GeometryError> {
        let out = GeometryError::OutOfGrid {
            x: local.x,
            y: local.y,
        };
        if !(local.x >= 0.0 && local.y >= 0.0) {
            return Err(out);
        }
        let col = (local.x / self.cell_size).floor();
        let row = (local.y / self.cell_size).floor();
        if col >= self.cols as f64 || row >= self.rows as f64 {
            return Err(out);
        }
        Ok(CellCoord::new(col as u32, row as u32))
    }

    /// Cell center in the grid frame.
    pub fn cell_center_local(&self, c: CellCoord) -> Result<Vec3, GeometryError> {
        if !self.contains(c) {
            return Err(GeometryError::CellOutOfRange {
                col: c.col as i64,
                row: c.row as i64,
                cols: self.cols,
                rows: self.rows,
            });
        }
        Ok(Vec3::new(
            (c.col as f64 + 0.5) * self.cell_size,
            (c.row as f64 + 0.5) * self.cell_size,
            0.0,
        ))
    }
}

pub fn world_to_grid(g: &GridSpec, p: Vec3) -> Result<CellCoord, GeometryError> {
    g.local_to_cell(g.origin.inverse().transform_point(p))
}

pub fn grid_to_world(g: &GridSpec, c: CellCoord) -> Result<Vec3, GeometryError> {
    let local = g.cell_center_local(c)?;
    let mut w = g.origin.transform_point(local);
    w.z = 0.0;
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "index", rename_all = "snake_case")]
pub enum GridLine {
    /// Line `x = index · cell_size` in the grid frame.
    Column(u32),
    /// Line `y = index · cell_size` in the grid frame.
    Row(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub line: GridLine,
    pub points: Vec<Pixel>,
}

/// Near-plane distance used when clipping overlay lines, in meters.
const OVERLAY_NEAR: f64 = 1e-3;

/// Pixel polylines of every visible grid line, clipped to the image.
pub fn grid_overlay(
    g: &GridSpec,
    k: &CameraIntrinsics,
    cam_in_world: &Transform,
) -> Result<Vec<Polyline>, GeometryError> {
    let world_to_cam = cam_in_world.pose.inverse();
    let (w, d) = (g.width(), g.depth());
    let mut segments = Vec::with_capacity((g.cols + g.rows + 2) as usize);
    for i in 0..=g.cols {
        let x = i as f64 * g.cell_size;
        segments.push((GridLine::Column(i), Vec3::new(x, 0.0, 0.0), Vec3::new(x, d, 0.0)));
    }
    for j in 0..=g.rows {
        let y = j as f64 * g.cell_size;
        segments.push((GridLine::Row(j), Vec3::new(0.0, y, 0.0), Vec3::new(w, y, 0.0)));
    }

    let mut out = Vec::new();
    for (line, a, b) in segments {
        let to_cam = |p: Vec3| {
            let mut world = g.origin.transform_point(p);
            world.z = 0.0;
            world_to_cam.transform_point(world)
        };
        let Some((a, b)) = clip_near(to_cam(a), to_cam(b)) else {
            continue;
        };
        let (pa, pb) = (project(k, a)?, project(k, b)?);
        if let Some((pa, pb)) = clip_to_image(pa, pb, k) {
            out.push(Polyline {
                line,
                points: vec![pa, pb],
            });
        }
    }
    if out.is_empty() {
        return Err(GeometryError::EmptyOverlay);
    }
    Ok(out)
}

fn clip_near(a: Vec3, b: Vec3) -> Option<(Vec3, Vec3)> {
    match (a.z >= OVERLAY_NEAR, b.z >= OVERLAY_NEAR) {
        (true, true) => Some((a, b)),
        (false, false) => None,
        (a_in, _) => {
            let s = (OVERLAY_NEAR - a.z) / (b.z - a.z);
            let mut cut = a + (b - a) * s;
            cut.z = cut.z.max(OVERLAY_NEAR);
            if a_in {
                Some((a, cut))
            } else {
                Some((cut, b))
            }
        }
    }
}

/// Liang–Barsky clip of a pixel segment to the image rectangle.
fn clip_to_image(a: Pixel, b: Pixel, k: &CameraIntrinsics) -> Option<(Pixel, Pixel)> {
    let (du, dv) = (b.u - a.u, b.v - a.v);
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    let checks = [
        (-du, a.u),
        (du, k.width as f64 - a.u),
        (-dv, a.v),
        (dv, k.height as f64 - a.v),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    let at = |t: f64| Pixel::new(a.u + du * t, a.v + dv * t);
    Some((at(t0), at(t1)))
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}
