#![allow(dead_code)]

use partlift::geometry::{ViewRender, EMPTY_PIXEL};
use partlift::synthetic::{PartSpec, Pose, Primitive, SceneSpec};

/// A 1-row render where pixel `q` is won by `owners[q]`. Every point of a
/// pixel owner is visible and projects onto its pixel.
pub fn strip_render(view_id: u32, owners: &[Option<u32>], num_points: usize) -> ViewRender {
    let mut visible = vec![false; num_points];
    let mut point_pixel = vec![EMPTY_PIXEL; num_points];
    for (q, o) in owners.iter().enumerate() {
        if let Some(p) = *o {
            visible[p as usize] = true;
            point_pixel[p as usize] = q as u32;
        }
    }
    ViewRender {
        view_id,
        height: 1,
        width: owners.len(),
        pixel_to_point: owners.iter().map(|o| o.unwrap_or(EMPTY_PIXEL)).collect(),
        depth: owners
            .iter()
            .map(|o| if o.is_some() { 1.0 } else { f64::INFINITY })
            .collect(),
        visible,
        point_pixel,
    }
}

fn cube(x: f64, category: u32, color: [f64; 3]) -> PartSpec {
    PartSpec {
        primitive: Primitive::Box { size: [0.6, 0.6, 0.6] },
        category,
        pose: Pose {
            euler: [0.0, 0.3, 0.0],
            translation: [x, 0.0, 0.0],
        },
        scale: 1.0,
        color,
    }
}

/// Two cubes side by side with a clear gap between them.
pub fn two_cubes(categories: [u32; 2]) -> SceneSpec {
    SceneSpec {
        seed: 11,
        parts: vec![
            cube(-0.6, categories[0], [0.8, 0.2, 0.2]),
            cube(0.6, categories[1], [0.2, 0.2, 0.8]),
        ],
        points_per_unit_area: 2500.0,
        jitter: 0.0,
    }
}
