use std::fs;
use std::path::Path;

use super::{cross, normalize, CameraView, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigParams {
    pub count: usize,
    pub radius: f64,
    pub elevation_rings: usize,
    pub height: usize,
    pub width: usize,
    pub fov_deg: f64,
}

impl Default for RigParams {
    fn default() -> Self {
        RigParams {
            count: 10,
            radius: 2.5,
            elevation_rings: 2,
            height: 256,
            width: 256,
            fov_deg: 50.0,
        }
    }
}

const MAX_ELEVATION_DEG: f64 = 30.0;

fn look_at_origin(view_id: u32, center: Vec3, p: &RigParams) -> CameraView {
    let forward = normalize(&[-center[0], -center[1], -center[2]]);
    let right = normalize(&cross(&forward, &[0.0, 1.0, 0.0]));
    let down = cross(&forward, &right);
    let rotation = [
        right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1], forward[2],
    ];
    let mut translation = [0.0; 3];
    for (i, t) in translation.iter_mut().enumerate() {
        *t = -(rotation[i * 3] * center[0] + rotation[i * 3 + 1] * center[1] + rotation[i * 3 + 2] * center[2]);
    }
    let focal = (p.width as f64 / 2.0) / (p.fov_deg.to_radians() / 2.0).tan();
    CameraView {
        view_id,
        rotation,
        translation,
        fx: focal,
        fy: focal,
        cx: p.width as f64 / 2.0,
        cy: p.height as f64 / 2.0,
        height: p.height,
        width: p.width,
    }
}

/// Cameras on a sphere around the origin, evenly spread in azimuth per
/// elevation ring. Rings span +-30 degrees; a single ring sits at the equator,
/// and azimuth 0 on the equator is the +z axis.
pub fn generate_camera_rig(params: &RigParams) -> Result<Vec<CameraView>> {
    if params.count == 0 {
        return Err(Error::contract("camera count must be >= 1"));
    }
    if params.elevation_rings == 0 || !(params.radius > 0.0) {
        return Err(Error::contract("rig needs >= 1 ring and a positive radius"));
    }
    if !(params.fov_deg > 0.0 && params.fov_deg < 180.0) {
        return Err(Error::contract("fov must lie in (0, 180) degrees"));
    }
    let rings = params.elevation_rings.min(params.count);
    let mut views = Vec::with_capacity(params.count);
    for ring in 0..rings {
        let elevation = if rings == 1 {
            0.0
        } else {
            -MAX_ELEVATION_DEG + 2.0 * MAX_ELEVATION_DEG * ring as f64 / (rings - 1) as f64
        }
        .to_radians();
        let in_ring = params.count / rings + usize::from(ring < params.count % rings);
        // stagger alternate rings by half a step
        let offset = if ring % 2 == 1 { 0.5 } else { 0.0 };
        for j in 0..in_ring {
            let azimuth = ((j as f64 + offset) / in_ring as f64 * 360.0).to_radians();
            let center = [
                params.radius * elevation.cos() * azimuth.sin(),
                params.radius * elevation.sin(),
                params.radius * elevation.cos() * azimuth.cos(),
            ];
            views.push(look_at_origin(views.len() as u32, center, params));
        }
    }
    Ok(views)
}

pub fn write_rig(path: &Path, views: &[CameraView]) -> Result<()> {
    let text = serde_json::to_string_pretty(views).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_rig(path: &Path) -> Result<Vec<CameraView>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let views: Vec<CameraView> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    for v in &views {
        v.validate()?;
    }
    let mut ids: Vec<u32> = views.iter().map(|v| v.view_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != views.len() {
        return Err(Error::format("camera rig", "duplicate view_id"));
    }
    Ok(views)
}
