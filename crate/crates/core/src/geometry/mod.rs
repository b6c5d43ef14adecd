//! Point clouds, pinhole cameras and z-buffer visibility.

mod ply;
mod render;
mod rig;

pub use ply::{read_ply, write_ply, PlyFormat};
pub use render::{render_all, render_visibility, RenderParams, ViewRender, EMPTY_PIXEL};
pub use rig::{generate_camera_rig, read_rig, write_rig, RigParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// A colored, optionally oriented point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    colors: Option<Vec<Vec3>>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Option<Vec<Vec3>>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::contract("point cloud must contain at least one point"));
        }
        if positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::contract("point coordinates must be finite"));
        }
        if let Some(c) = &colors {
            if c.len() != n {
                return Err(Error::contract("color count differs from point count"));
            }
            if c.iter().flatten().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::contract("colors must lie in [0, 1]"));
            }
        }
        if let Some(nm) = &normals {
            if nm.len() != n {
                return Err(Error::contract("normal count differs from point count"));
            }
            if nm.iter().any(|v| (norm(v) - 1.0).abs() > 1e-6) {
                return Err(Error::contract("normals must have unit length"));
            }
        }
        Ok(PointCloud {
            positions,
            colors,
            normals,
        })
    }

    pub fn from_positions(positions: Vec<Vec3>) -> Result<Self> {
        Self::new(positions, None, None)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[Vec3]> {
        self.colors.as_deref()
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }
}

pub(crate) fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(v: &Vec3) -> Vec3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Pinhole camera: `x_cam = rotation * x_world + translation`, looking down +z
/// with image u to the right and v downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub view_id: u32,
    /// Row-major 3x3 world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

/// Where a point lands in a view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InFront { u: f64, v: f64, depth: f64 },
    BehindCamera,
}

/// Default near-plane distance.
pub const Z_NEAR: f64 = 1e-4;

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().chain(&self.translation).any(|x| !x.is_finite()) {
            return Err(Error::contract(format!("view {}: non-finite pose", self.view_id)));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::contract(format!(
                        "view {}: rotation is not orthonormal",
                        self.view_id
                    )));
                }
            }
        }
        if (self.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "view {}: rotation determinant is not +1",
                self.view_id
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::contract(format!("view {}: empty image", self.view_id)));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::contract(format!("view {}: invalid intrinsics", self.view_id)));
        }
        Ok(())
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) + r[2] * (r[3] * r[7] - r[4] * r[6])
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        let mut c = [0.0; 3];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = -(r[i] * t[0] + r[3 + i] * t[1] + r[6 + i] * t[2]);
        }
        c
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
        ]
    }

    pub fn project(&self, p: &Vec3, z_near: f64) -> Projection {
        let [x, y, z] = self.to_camera(p);
        if z <= z_near {
            return Projection::BehindCamera;
        }
        Projection::InFront {
            u: self.fx * x / z + self.cx,
            v: self.fy * y / z + self.cy,
            depth: z,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

/// Project point `index` of `cloud` into `view` with the default near plane.
pub fn project_point(cloud: &PointCloud, view: &CameraView, index: usize) -> Result<Projection> {
    let p = cloud
        .positions()
        .get(index)
        .ok_or_else(|| Error::contract(format!("point index {index} out of range")))?;
    Ok(view.project(p, Z_NEAR))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn identity_view(f: f64, c: f64, size: usize) -> CameraView {
        CameraView {
            view_id: 0,
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            height: size,
            width: size,
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let view = identity_view(120.0, 50.0, 100);
        let cloud = PointCloud::from_positions(vec![[0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(
            project_point(&cloud, &view, 0).unwrap(),
            Projection::InFront {
                u: 50.0,
                v: 50.0,
                depth: 2.0
            }
        );
    }

    #[test]
    fn pinhole_hand_value() {
        let view = identity_view(100.0, 64.0, 128);
        let cloud = PointCloud::from_positions(vec![[0.1, 0.0, 1.0]]).unwrap();
        match project_point(&cloud, &view, 0).unwrap() {
            Projection::InFront { u, v, depth } => {
                assert!((u - 74.0).abs() < 1e-12);
                assert_eq!(v, 64.0);
                assert_eq!(depth, 1.0);
            }
            Projection::BehindCamera => panic!("expected in front"),
        }
    }

    #[test]
    fn zero_depth_is_behind_camera() {
        let view = identity_view(100.0, 64.0, 128);
        let cloud = PointCloud::from_positions(vec![[0.3, 0.2, 0.0]]).unwrap();
        assert_eq!(project_point(&cloud, &view, 0).unwrap(), Projection::BehindCamera);
    }

    #[test]
    fn rejects_bad_clouds() {
        assert!(PointCloud::from_positions(vec![]).is_err());
        assert!(PointCloud::from_positions(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], None, Some(vec![[0.0, 0.0, 2.0]])).is_err());
    }

    #[test]
    fn rejects_non_rotation() {
        let mut view = identity_view(100.0, 64.0, 128);
        view.rotation[0] = -1.0;
        assert!(view.validate().is_err());
        view.rotation[0] = 1.0;
        assert!(view.validate().is_ok());
        view.fx = 0.0;
        assert!(view.validate().is_err());
    }
}
