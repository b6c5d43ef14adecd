//! Seeded multi-part scenes built from boxes, cylinders and spheres.
//!
//! Surfaces are sampled uniformly by area with analytic normals, then the
//! whole scene is centred and scaled so its bounding box fits the unit cube
//! around the origin.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_camera_rig, CameraView, PointCloud, RigParams, Vec3};
use crate::par;
use crate::segmentation::InstanceSegmentation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    /// Axis-aligned box with full edge lengths.
    Box {
        size: Vec3,
    },
    /// Cylinder along local y, centred on the origin.
    Cylinder {
        radius: f64,
        height: f64,
    },
    Sphere {
        radius: f64,
    },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { size: [x, y, z] } => 2.0 * (x * y + y * z + x * z),
            Primitive::Cylinder { radius, height } => 2.0 * PI * radius * height + 2.0 * PI * radius * radius,
            Primitive::Sphere { radius } => 4.0 * PI * radius * radius,
        }
    }

    fn validate(&self, part: usize) -> Result<()> {
        let ok = match *self {
            Primitive::Box { size } => {
                size.iter().all(|s| s.is_finite() && *s >= 0.0) && size.iter().filter(|&&s| s > 0.0).count() >= 2
            }
            Primitive::Cylinder { radius, height } => {
                radius > 0.0 && radius.is_finite() && height >= 0.0 && height.is_finite()
            }
            Primitive::Sphere { radius } => radius > 0.0 && radius.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::EmptyPart { part })
        }
    }

    /// A uniform surface sample and its outward normal, in local coordinates.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        match *self {
            Primitive::Box { size: [x, y, z] } => {
                let faces = [y * z, y * z, x * z, x * z, x * y, x * y];
                let total: f64 = faces.iter().sum();
                let mut t = rng.random::<f64>() * total;
                let mut face = 5;
                for (i, a) in faces.iter().enumerate() {
                    if t < *a {
                        face = i;
                        break;
                    }
                    t -= a;
                }
                let (a, b) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => ([sign * x / 2.0, a * y, b * z], [sign, 0.0, 0.0]),
                    1 => ([a * x, sign * y / 2.0, b * z], [0.0, sign, 0.0]),
                    _ => ([a * x, b * y, sign * z / 2.0], [0.0, 0.0, sign]),
                }
            }
            Primitive::Cylinder { radius: r, height: h } => {
                let side = 2.0 * PI * r * h;
                let cap = PI * r * r;
                let t = rng.random::<f64>() * (side + 2.0 * cap);
                let phi = rng.random::<f64>() * 2.0 * PI;
                if t < side {
                    let y = (rng.random::<f64>() - 0.5) * h;
                    ([r * phi.cos(), y, r * phi.sin()], [phi.cos(), 0.0, phi.sin()])
                } else {
                    let rho = r * rng.random::<f64>().sqrt();
                    let sign = if t < side + cap { 1.0 } else { -1.0 };
                    ([rho * phi.cos(), sign * h / 2.0, rho * phi.sin()], [0.0, sign, 0.0])
                }
            }
            Primitive::Sphere { radius: r } => {
                let z: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let phi = rng.random::<f64>() * 2.0 * PI;
                let s = (1.0 - z * z).max(0.0).sqrt();
                let n = [s * phi.cos(), s * phi.sin(), z];
                ([r * n[0], r * n[1], r * n[2]], n)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Rotation angles about x, then y, then z, in radians.
    pub euler: Vec3,
    pub translation: Vec3,
}

impl Pose {
    fn rotation(&self) -> [[f64; 3]; 3] {
        let (sx, cx) = self.euler[0].sin_cos();
        let (sy, cy) = self.euler[1].sin_cos();
        let (sz, cz) = self.euler[2].sin_cos();
        // Rz * Ry * Rx
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub primitive: Primitive,
    pub category: u32,
    pub pose: Pose,
    pub scale: f64,
    /// RGB in [0, 1].
    pub color: Vec3,
}

impl PartSpec {
    fn aabb(&self) -> (Vec3, Vec3) {
        let r = self.pose.rotation();
        let t = self.pose.translation;
        let s = self.scale;
        let mut half = [0.0; 3];
        match self.primitive {
            Primitive::Box { size } => {
                for (i, h) in half.iter_mut().enumerate() {
                    *h = s * (0..3).map(|k| r[i][k].abs() * size[k] / 2.0).sum::<f64>();
                }
            }
            Primitive::Cylinder { radius, height } => {
                for (i, h) in half.iter_mut().enumerate() {
                    let a = r[i][1];
                    *h = s * (a.abs() * height / 2.0 + radius * (1.0 - a * a).max(0.0).sqrt());
                }
            }
            Primitive::Sphere { radius } => half = [s * radius; 3],
        }
        (
            [t[0] - half[0], t[1] - half[1], t[2] - half[2]],
            [t[0] + half[0], t[1] + half[1], t[2] + half[2]],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub parts: Vec<PartSpec>,
    /// Points per unit of surface area, measured after normalization.
    pub points_per_unit_area: f64,
    /// Standard deviation of Gaussian positional noise, after normalization.
    pub jitter: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::contract("scene needs at least one part"));
        }
        if !(self.points_per_unit_area > 0.0 && self.points_per_unit_area.is_finite()) {
            return Err(Error::contract("points_per_unit_area must be > 0"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::contract("jitter must be >= 0"));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if !(p.scale > 0.0 && p.scale.is_finite()) {
                return Err(Error::contract(format!("part {i} scale must be > 0")));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::contract(format!("part {i} color outside [0, 1]")));
            }
            p.primitive.validate(i)?;
        }
        Ok(())
    }

    /// Centre and scale factor taking the scene bounding box into the unit cube.
    pub fn normalization(&self) -> (Vec3, f64) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.parts {
            let (a, b) = p.aabb();
            for i in 0..3 {
                lo[i] = lo[i].min(a[i]);
                hi[i] = hi[i].max(b[i]);
            }
        }
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
        let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
        (center, 1.0 / extent)
    }

    /// Surface area of every part after normalization.
    pub fn normalized_areas(&self) -> Vec<f64> {
        let (_, k) = self.normalization();
        self.parts
            .iter()
            .map(|p| p.primitive.area() * (p.scale * k).powi(2))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text).map_err(|e| Error::format("scene spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Sample the scene. Ground-truth instance ids are part indices.
pub fn generate(spec: &SceneSpec) -> Result<(PointCloud, InstanceSegmentation)> {
    spec.validate()?;
    let (center, k) = spec.normalization();
    let areas = spec.normalized_areas();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.jitter).map_err(|e| Error::contract(e.to_string()))?;
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for (i, (part, area)) in spec.parts.iter().zip(&areas).enumerate() {
        let count = (spec.points_per_unit_area * area).round().max(1.0) as usize;
        let r = part.pose.rotation();
        for _ in 0..count {
            let (p, n) = part.primitive.sample(&mut rng);
            let w = mat_vec(&r, &p);
            let mut pos = [0.0; 3];
            for a in 0..3 {
                pos[a] = ((part.scale * w[a] + part.pose.translation[a]) - center[a]) * k;
                if spec.jitter > 0.0 {
                    pos[a] += noise.sample(&mut rng);
                }
            }
            let n = mat_vec(&r, &n);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            positions.push(pos);
            normals.push([n[0] / len, n[1] / len, n[2] / len]);
            colors.push(part.color);
            labels.push(Some(i as u32));
        }
    }
    refit_unit_cube(&mut positions);
    let categories: Vec<u32> = spec.parts.iter().map(|p| p.category).collect();
    let gt = InstanceSegmentation::from_labels(&labels, &categories, &vec![1.0; categories.len()])?;
    Ok((PointCloud::new(positions, Some(colors), Some(normals))?, gt))
}

/// Jitter can push points past the cube; pull them back when it does.
fn refit_unit_cube(positions: &mut [Vec3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in positions.iter() {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    if (0..3).all(|i| lo[i] >= -0.5 && hi[i] <= 0.5) {
        return;
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    let k = if extent > 1.0 { 1.0 / extent } else { 1.0 };
    for p in positions.iter_mut() {
        for i in 0..3 {
            p[i] = (p[i] - center[i]) * k;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::contract(format!("unknown difficulty '{s}'"))),
        }
    }
}

pub const TARGET_POINTS: f64 = 20_000.0;
pub const DEFAULT_JITTER: f64 = 0.002;

const PALETTE: [Vec3; 10] = [
    [0.90, 0.25, 0.20],
    [0.20, 0.55, 0.90],
    [0.25, 0.80, 0.35],
    [0.95, 0.75, 0.15],
    [0.60, 0.30, 0.80],
    [0.15, 0.80, 0.80],
    [0.95, 0.50, 0.70],
    [0.55, 0.40, 0.25],
    [0.50, 0.50, 0.50],
    [0.10, 0.20, 0.40],
];

fn random_primitive(rng: &mut ChaCha8Rng) -> Primitive {
    match rng.random_range(0..3) {
        0 => Primitive::Box {
            size: [
                rng.random_range(0.2..0.45),
                rng.random_range(0.2..0.45),
                rng.random_range(0.2..0.45),
            ],
        },
        1 => Primitive::Cylinder {
            radius: rng.random_range(0.1..0.2),
            height: rng.random_range(0.25..0.45),
        },
        _ => Primitive::Sphere {
            radius: rng.random_range(0.12..0.22),
        },
    }
}

fn random_euler(rng: &mut ChaCha8Rng) -> Vec3 {
    [
        rng.random_range(-PI..PI),
        rng.random_range(-PI..PI),
        rng.random_range(-PI..PI),
    ]
}

fn easy_parts(rng: &mut ChaCha8Rng) -> Vec<PartSpec> {
    let n = rng.random_range(3..=5usize);
    let categories = rng.random_range(2..=3u32).min(n as u32);
    let offset = rng.random_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let angle = offset + 2.0 * PI * i as f64 / n as f64;
            PartSpec {
                primitive: random_primitive(rng),
                category: i as u32 % categories,
                pose: Pose {
                    euler: random_euler(rng),
                    translation: [angle.cos(), rng.random_range(-0.2..0.2), angle.sin()],
                },
                scale: 1.0,
                color: PALETTE[i],
            }
        })
        .collect()
}

const BODY: u32 = 0;
const HANDLE: u32 = 1;
const KNOB: u32 = 2;
const PLATE: u32 = 3;
const LEG: u32 = 4;

/// A body with two side handles, two touching knobs, a thin top plate and
/// up to four thin legs.
fn hard_parts(rng: &mut ChaCha8Rng) -> Vec<PartSpec> {
    let (bx, by, bz) = (
        rng.random_range(0.9..1.1),
        rng.random_range(0.5..0.7),
        rng.random_range(0.5..0.7),
    );
    let still = Pose {
        euler: [0.0; 3],
        translation: [0.0; 3],
    };
    let at = |t: Vec3| Pose {
        translation: t,
        ..still
    };
    let part = |primitive, category, pose, color| PartSpec {
        primitive,
        category,
        pose,
        scale: 1.0,
        color,
    };
    let handle_color = PALETTE[1];
    let (hw, hh, hd) = (0.06, rng.random_range(0.25..0.4), rng.random_range(0.05..0.1));
    let handle = Primitive::Box { size: [hw, hh, hd] };
    let mut parts = vec![
        part(Primitive::Box { size: [bx, by, bz] }, BODY, still, PALETTE[8]),
        part(handle, HANDLE, at([bx / 2.0 + hw / 2.0, 0.0, 0.0]), handle_color),
        part(handle, HANDLE, at([-bx / 2.0 - hw / 2.0, 0.0, 0.0]), handle_color),
    ];
    let plate_h = 0.03;
    parts.push(part(
        Primitive::Box {
            size: [bx * 0.8, plate_h, bz * 0.8],
        },
        PLATE,
        at([0.0, by / 2.0 + plate_h / 2.0, 0.0]),
        PALETTE[3],
    ));
    let kr = rng.random_range(0.05..0.08);
    let ky = by / 2.0 + plate_h + kr;
    for s in [-1.0, 1.0] {
        parts.push(part(
            Primitive::Sphere { radius: kr },
            KNOB,
            at([s * kr, ky, 0.0]),
            PALETTE[0],
        ));
    }
    let legs = rng.random_range(0..=4usize);
    let lh = rng.random_range(0.3..0.5);
    let corners = [[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
    for c in corners.iter().take(legs) {
        parts.push(part(
            Primitive::Cylinder {
                radius: 0.03,
                height: lh,
            },
            LEG,
            at([c[0] * (bx / 2.0 - 0.08), -by / 2.0 - lh / 2.0, c[1] * (bz / 2.0 - 0.08)]),
            PALETTE[7],
        ));
    }
    parts
}

/// Density that yields about `target` points for the given parts.
pub fn density_for(parts: &[PartSpec], target: f64) -> f64 {
    let probe = SceneSpec {
        seed: 0,
        parts: parts.to_vec(),
        points_per_unit_area: 1.0,
        jitter: 0.0,
    };
    target / probe.normalized_areas().iter().sum::<f64>()
}

/// One seeded scene of the given difficulty.
pub fn make_scene(seed: u64, difficulty: Difficulty) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = match difficulty {
        Difficulty::Easy => easy_parts(&mut rng),
        Difficulty::Hard => hard_parts(&mut rng),
    };
    SceneSpec {
        seed: rng.random(),
        points_per_unit_area: density_for(&parts, TARGET_POINTS),
        parts,
        jitter: DEFAULT_JITTER,
    }
}

/// `count` scenes with per-scene seeds derived from `seed`, each paired with the default rig.
pub fn make_benchmark(count: usize, seed: u64, difficulty: Difficulty) -> Result<Vec<(SceneSpec, Vec<CameraView>)>> {
    if count == 0 {
        return Err(Error::NoScenes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    let rig = generate_camera_rig(&RigParams::default())?;
    Ok(par::map(&seeds, |&s| (make_scene(s, difficulty), rig.clone())))
}

pub fn write_spec(path: &Path, spec: &SceneSpec) -> Result<()> {
    fs::write(path, spec.to_json()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_scene(density: f64) -> SceneSpec {
        SceneSpec {
            seed: 3,
            parts: vec![PartSpec {
                primitive: Primitive::Sphere { radius: 1.0 },
                category: 0,
                pose: Pose {
                    euler: [0.0; 3],
                    translation: [0.0; 3],
                },
                scale: 1.0,
                color: [0.5; 3],
            }],
            points_per_unit_area: density,
            jitter: 0.0,
        }
    }

    #[test]
    fn sphere_point_count_tracks_area() {
        let spec = sphere_scene(2000.0);
        let (cloud, gt) = generate(&spec).unwrap();
        // unit sphere scaled to diameter 1
        let expect = 2000.0 * 4.0 * PI * 0.25;
        assert!((cloud.len() as f64 - expect).abs() / expect < 0.05);
        assert_eq!(gt.len(), 1);
        for p in cloud.positions() {
            assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn two_boxes_are_two_disjoint_instances() {
        let b = |x: f64, c: u32| PartSpec {
            primitive: Primitive::Box { size: [0.3, 0.3, 0.3] },
            category: c,
            pose: Pose {
                euler: [0.0; 3],
                translation: [x, 0.0, 0.0],
            },
            scale: 1.0,
            color: [0.2, 0.3, 0.4],
        };
        let spec = SceneSpec {
            seed: 1,
            parts: vec![b(-1.0, 0), b(1.0, 1)],
            points_per_unit_area: 3000.0,
            jitter: 0.0,
        };
        let (cloud, gt) = generate(&spec).unwrap();
        assert_eq!(gt.len(), 2);
        let a = &gt.instances()[0].members;
        let c = &gt.instances()[1].members;
        let min = a
            .iter()
            .flat_map(|&i| c.iter().map(move |&j| (i, j)))
            .map(|(i, j)| {
                let (p, q) = (cloud.positions()[i as usize], cloud.positions()[j as usize]);
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
    }

    #[test]
    fn normals_are_unit_and_cloud_fits_cube() {
        let spec = make_scene(11, Difficulty::Hard);
        let (cloud, gt) = generate(&spec).unwrap();
        assert!(cloud.positions().iter().flatten().all(|x| x.abs() <= 0.5 + 1e-12));
        assert_eq!(gt.point_instance().iter().filter(|x| x.is_none()).count(), 0);
        assert_eq!(gt.len(), spec.parts.len());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = make_scene(5, Difficulty::Easy);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(
            make_benchmark(3, 9, Difficulty::Hard).unwrap(),
            make_benchmark(3, 9, Difficulty::Hard).unwrap()
        );
    }

    #[test]
    fn benchmark_part_ranges() {
        let easy = make_benchmark(10, 1, Difficulty::Easy).unwrap();
        assert_eq!(easy.len(), 10);
        for (s, rig) in &easy {
            assert!((3..=5).contains(&s.parts.len()));
            assert_eq!(rig.len(), 10);
            let cats: std::collections::BTreeSet<u32> = s.parts.iter().map(|p| p.category).collect();
            assert!((2..=3).contains(&cats.len()));
        }
        let hard = make_benchmark(10, 1, Difficulty::Hard).unwrap();
        for (s, _) in &hard {
            assert!((6..=10).contains(&s.parts.len()));
            assert!(s.parts.iter().filter(|p| p.category == HANDLE).count() >= 2);
        }
        assert!(matches!(make_benchmark(0, 1, Difficulty::Easy), Err(Error::NoScenes)));
    }

    #[test]
    fn degenerate_part_is_rejected() {
        let mut spec = sphere_scene(10.0);
        spec.parts[0].primitive = Primitive::Box { size: [1.0, 0.0, 0.0] };
        assert!(matches!(generate(&spec), Err(Error::EmptyPart { part: 0 })));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = make_scene(2, Difficulty::Hard);
        assert_eq!(SceneSpec::from_json(&spec.to_json()).unwrap(), spec);
    }
}
