//! Camera-view rendering of a telemetry frame.

use anyhow::{bail, Result};
use gridswarm_core::geometry::{project, Vec3};
use gridswarm_fleet::scenario::Scenario;
use gridswarm_fleet::telemetry::TelemetryFrame;
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_circle_mut, draw_line_segment_mut};

const BACKGROUND: Rgb<u8> = Rgb([24, 26, 30]);
const GRID: Rgb<u8> = Rgb([90, 200, 120]);
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([230, 80, 70]),
    Rgb([70, 140, 230]),
    Rgb([240, 200, 60]),
    Rgb([190, 90, 220]),
    Rgb([60, 210, 210]),
    Rgb([240, 140, 40]),
    Rgb([220, 220, 220]),
    Rgb([150, 230, 90]),
];

/// Overlay polylines plus a marker per robot: filled at the localized pose,
/// ringed at ground truth.
pub fn draw(scenario: &Scenario, frame: &TelemetryFrame) -> Result<RgbImage> {
    if frame.overlay.is_empty() {
        bail!("frame at tick {} has no grid overlay: the camera does not see the grid", frame.tick);
    }
    let camera = &scenario.cameras[0].camera;
    let k = &camera.intrinsics;
    let mut img = RgbImage::from_pixel(k.width, k.height, BACKGROUND);
    for line in &frame.overlay {
        for pair in line.points.windows(2) {
            let a = (pair[0].u as f32, pair[0].v as f32);
            let b = (pair[1].u as f32, pair[1].v as f32);
            draw_line_segment_mut(&mut img, a, b, GRID);
        }
    }
    let to_pixel = |x: f64, y: f64| {
        let world = scenario.grid.origin.transform_point(Vec3::new(x, y, 0.0));
        let p = project(k, camera.pose.inverse().transform_point(world)).ok()?;
        k.contains(p).then_some((p.u.round() as i32, p.v.round() as i32))
    };
    let radius = (k.fx * 0.02).max(3.0) as i32;
    for robot in &frame.robots {
        let color = PALETTE[(robot.id.0 as usize) % PALETTE.len()];
        if let Some(p) = robot.pose.and_then(|p| to_pixel(p.x, p.y)) {
            draw_filled_circle_mut(&mut img, p, radius, color);
        }
        if let Some(p) = to_pixel(robot.truth.x, robot.truth.y) {
            draw_hollow_circle_mut(&mut img, p, radius + 3, color);
        }
    }
    Ok(img)
}
