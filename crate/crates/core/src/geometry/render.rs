use serde::{Deserialize, Serialize};

use super::{CameraView, PointCloud, Projection, Z_NEAR};
use crate::error::{Error, Result};
use crate::par;

/// Marker for a pixel that no point covers, or a point without an in-image pixel.
pub const EMPTY_PIXEL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    /// Splat disc radius in pixels; 0 covers only the nearest pixel.
    pub splat_radius: f64,
    /// Depth slack (scene units) within which a point counts as visible at a pixel.
    pub depth_tolerance: f64,
    pub z_near: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            splat_radius: 1.0,
            depth_tolerance: 0.01,
            z_near: Z_NEAR,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.splat_radius >= 0.0 && self.splat_radius.is_finite()) {
            return Err(Error::contract("splat_radius must be finite and >= 0"));
        }
        if !(self.depth_tolerance > 0.0) {
            return Err(Error::contract("depth_tolerance must be > 0"));
        }
        if !(self.z_near >= 0.0) {
            return Err(Error::contract("z_near must be >= 0"));
        }
        Ok(())
    }
}

/// Result of z-buffer splatting one cloud into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub view_id: u32,
    pub height: usize,
    pub width: usize,
    /// Row-major winning point per pixel, or [`EMPTY_PIXEL`].
    pub pixel_to_point: Vec<u32>,
    /// Camera-space depth of the winner; `+inf` on empty pixels.
    pub depth: Vec<f64>,
    /// Per-point visibility flag.
    pub visible: Vec<bool>,
    /// Per-point row-major index of the pixel nearest its projection, or
    /// [`EMPTY_PIXEL`] when that pixel is outside the image or the point is
    /// behind the camera.
    pub point_pixel: Vec<u32>,
}

impl ViewRender {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn is_visible(&self, point: usize) -> bool {
        self.visible[point]
    }

    pub fn winner(&self, pixel: usize) -> Option<u32> {
        let p = self.pixel_to_point[pixel];
        (p != EMPTY_PIXEL).then_some(p)
    }

    pub fn occupied_pixels(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.pixel_to_point
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != EMPTY_PIXEL)
            .map(|(q, &p)| (q, p))
    }
}

/// Pixels (row-major indices) covered by a splat centred at `(u, v)`.
///
/// The footprint is every pixel centre within `radius` of the projection plus
/// the pixel containing the projection itself.
pub(crate) fn splat_pixels(u: f64, v: f64, radius: f64, width: usize, height: usize, out: &mut Vec<usize>) {
    out.clear();
    let c0 = u.round();
    let r0 = v.round();
    let in_image = |c: f64, r: f64| c >= 0.0 && r >= 0.0 && c < width as f64 && r < height as f64;
    let r2 = radius * radius;
    let (cmin, cmax) = ((u - radius).floor(), (u + radius).ceil());
    let (rmin, rmax) = ((v - radius).floor(), (v + radius).ceil());
    let mut r = rmin.min(r0);
    while r <= rmax.max(r0) {
        let mut c = cmin.min(c0);
        while c <= cmax.max(c0) {
            let inside = (c - u) * (c - u) + (r - v) * (r - v) <= r2 || (c == c0 && r == r0);
            if inside && in_image(c, r) {
                out.push(r as usize * width + c as usize);
            }
            c += 1.0;
        }
        r += 1.0;
    }
}

/// Rasterize `cloud` into `view` with a z-buffer and derive per-point visibility.
pub fn render_visibility(cloud: &PointCloud, view: &CameraView, params: &RenderParams) -> Result<ViewRender> {
    params.validate()?;
    view.validate()?;
    let (h, w) = (view.height, view.width);
    let n = cloud.len();
    let mut depth = vec![f64::INFINITY; h * w];
    let mut winner = vec![EMPTY_PIXEL; h * w];
    let mut point_pixel = vec![EMPTY_PIXEL; n];
    let mut projected = Vec::with_capacity(n);
    let mut footprint = Vec::new();

    for (i, p) in cloud.positions().iter().enumerate() {
        match view.project(p, params.z_near) {
            Projection::InFront { u, v, depth: z } => {
                let (c, r) = (u.round(), v.round());
                if c >= 0.0 && r >= 0.0 && c < w as f64 && r < h as f64 {
                    point_pixel[i] = (r as usize * w + c as usize) as u32;
                }
                splat_pixels(u, v, params.splat_radius, w, h, &mut footprint);
                for &q in &footprint {
                    // strict: equal depths keep the lower index
                    if z < depth[q] {
                        depth[q] = z;
                        winner[q] = i as u32;
                    }
                }
                projected.push(Some((u, v, z)));
            }
            Projection::BehindCamera => projected.push(None),
        }
    }

    let mut visible = vec![false; n];
    for (i, proj) in projected.iter().enumerate() {
        if let Some((u, v, z)) = *proj {
            splat_pixels(u, v, params.splat_radius, w, h, &mut footprint);
            visible[i] = footprint.iter().any(|&q| z <= depth[q] + params.depth_tolerance);
        }
    }

    Ok(ViewRender {
        view_id: view.view_id,
        height: h,
        width: w,
        pixel_to_point: winner,
        depth,
        visible,
        point_pixel,
    })
}

/// Render every view, in parallel when enabled. Output order follows `views`.
pub fn render_all(cloud: &PointCloud, views: &[CameraView], params: &RenderParams) -> Result<Vec<ViewRender>> {
    par::map(views, |v| render_visibility(cloud, v, params))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tests::identity_view;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(radius: f64, tol: f64) -> RenderParams {
        RenderParams {
            splat_radius: radius,
            depth_tolerance: tol,
            z_near: Z_NEAR,
        }
    }

    #[test]
    fn nearer_point_occludes_farther() {
        let view = identity_view(100.0, 32.0, 64);
        let cloud = PointCloud::from_positions(vec![[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]]).unwrap();
        let r = render_visibility(&cloud, &view, &params(1.0, 0.01)).unwrap();
        assert!(r.visible[1]);
        assert!(!r.visible[0]);
    }

    #[test]
    fn single_point_covers_its_splat() {
        let view = identity_view(100.0, 32.0, 64);
        let cloud = PointCloud::from_positions(vec![[0.0, 0.0, 1.0]]).unwrap();
        let r = render_visibility(&cloud, &view, &params(1.0, 0.01)).unwrap();
        assert!(r.visible[0]);
        let covered: Vec<usize> = r.occupied_pixels().map(|(q, _)| q).collect();
        let mut want = vec![];
        splat_pixels(32.0, 32.0, 1.0, 64, 64, &mut want);
        want.sort();
        assert_eq!(covered, want);
        // plus-shaped footprint for an integer-centred unit disc
        assert_eq!(covered.len(), 5);
        assert_eq!(r.point_pixel[0] as usize, 32 * 64 + 32);
    }

    #[test]
    fn zero_radius_uses_one_pixel() {
        let view = identity_view(100.0, 32.0, 64);
        let cloud = PointCloud::from_positions(vec![[0.0012, 0.0, 1.0]]).unwrap();
        let r = render_visibility(&cloud, &view, &params(0.0, 0.01)).unwrap();
        assert_eq!(r.occupied_pixels().count(), 1);
    }

    #[test]
    fn outside_image_is_invisible() {
        let view = identity_view(100.0, 32.0, 64);
        let cloud = PointCloud::from_positions(vec![[5.0, 0.0, 1.0], [0.0, 0.0, -1.0]]).unwrap();
        let r = render_visibility(&cloud, &view, &params(1.0, 0.01)).unwrap();
        assert_eq!(r.visible, vec![false, false]);
        assert_eq!(r.point_pixel, vec![EMPTY_PIXEL, EMPTY_PIXEL]);
    }

    #[test]
    fn equal_depth_tie_goes_to_lower_index() {
        let view = identity_view(100.0, 32.0, 64);
        let cloud = PointCloud::from_positions(vec![[0.0, 0.0, 1.0]; 3]).unwrap();
        let r = render_visibility(&cloud, &view, &params(1.0, 0.01)).unwrap();
        assert!(r.occupied_pixels().all(|(_, p)| p == 0));
        assert_eq!(r.visible, vec![true; 3]);
    }

    #[test]
    fn distinct_pixels_all_visible_brute_force() {
        // 100 points, each at its own pixel with radius 0: brute-force per-pixel
        // depth comparison says every in-frustum point wins its pixel.
        let view = identity_view(100.0, 32.0, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cells: Vec<(usize, usize)> = (0..64).flat_map(|r| (0..64).map(move |c| (r, c))).collect();
        for i in (1..cells.len()).rev() {
            let j = rng.random_range(0..=i);
            cells.swap(i, j);
        }
        let pts: Vec<[f64; 3]> = cells[..100]
            .iter()
            .map(|&(r, c)| {
                let z = rng.random_range(0.5..3.0);
                [(c as f64 - 32.0) * z / 100.0, (r as f64 - 32.0) * z / 100.0, z]
            })
            .collect();
        let cloud = PointCloud::from_positions(pts.clone()).unwrap();
        let r = render_visibility(&cloud, &view, &params(0.0, 0.01)).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let q = cells[i].0 * 64 + cells[i].1;
            let nearest = (0..pts.len())
                .filter(|&j| cells[j].0 * 64 + cells[j].1 == q)
                .map(|j| pts[j][2])
                .fold(f64::INFINITY, f64::min);
            assert_eq!(r.visible[i], p[2] <= nearest + 0.01);
            assert!(r.visible[i]);
        }
    }
}
