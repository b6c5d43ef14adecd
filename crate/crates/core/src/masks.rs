//! Per-view 2D instance masks: ground-truth rasterization, corruption and file I/O.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ViewRender;
use crate::par;
use crate::segmentation::InstanceSegmentation;

pub const DEFAULT_MIN_PIXELS: usize = 5;

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(height: usize, width: usize) -> Self {
        Bitmap {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::contract("bitmap size mismatch"));
        }
        Ok(Bitmap { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, pixel: usize) -> bool {
        self.bits[pixel]
    }

    pub fn at(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Inclusive `(row_min, col_min, row_max, col_max)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (q, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (r, c) = (q / self.width, q % self.width);
            bb = Some(match bb {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
        bb
    }

    fn disc_offsets(radius: u32) -> Vec<(i64, i64)> {
        let r = radius as i64;
        (-r..=r)
            .flat_map(|dr| (-r..=r).map(move |dc| (dr, dc)))
            .filter(|&(dr, dc)| dr * dr + dc * dc <= r * r)
            .collect()
    }

    fn neighbourhood<'a>(&'a self, offsets: &'a [(i64, i64)], q: usize) -> impl Iterator<Item = Option<usize>> + 'a {
        let (r, c) = ((q / self.width) as i64, (q % self.width) as i64);
        offsets.iter().map(move |&(dr, dc)| {
            let (rr, cc) = (r + dr, c + dc);
            (rr >= 0 && cc >= 0 && rr < self.height as i64 && cc < self.width as i64)
                .then(|| rr as usize * self.width + cc as usize)
        })
    }

    /// Morphological dilation with a Euclidean disc.
    pub fn dilate(&self, radius: u32) -> Bitmap {
        let offsets = Self::disc_offsets(radius);
        let mut out = Bitmap::new(self.height, self.width);
        for (q, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (r, c) = ((q / self.width) as i64, (q % self.width) as i64);
            for &(dr, dc) in &offsets {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && cc >= 0 && rr < self.height as i64 && cc < self.width as i64 {
                    out.bits[rr as usize * self.width + cc as usize] = true;
                }
            }
        }
        out
    }

    /// Morphological erosion with a Euclidean disc; outside the image is background.
    pub fn erode(&self, radius: u32) -> Bitmap {
        let offsets = Self::disc_offsets(radius);
        let bits = (0..self.bits.len())
            .map(|q| self.bits[q] && self.neighbourhood(&offsets, q).all(|n| n.is_some_and(|n| self.bits[n])))
            .collect();
        Bitmap {
            height: self.height,
            width: self.width,
            bits,
        }
    }

    /// Pixels with a differently-valued in-image pixel within `radius`.
    pub fn boundary_band(&self, radius: u32) -> Vec<bool> {
        let offsets = Self::disc_offsets(radius);
        (0..self.bits.len())
            .map(|q| {
                self.neighbourhood(&offsets, q)
                    .flatten()
                    .any(|n| self.bits[n] != self.bits[q])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask2D {
    pub view_id: u32,
    pub category: u32,
    pub bitmap: Bitmap,
}

impl InstanceMask2D {
    pub fn contains(&self, pixel: usize) -> bool {
        self.bitmap.get(pixel)
    }
}

/// All observed masks across views, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    masks: Vec<InstanceMask2D>,
    category_names: BTreeMap<u32, String>,
}

impl MaskSet {
    pub fn new(masks: Vec<InstanceMask2D>) -> Result<Self> {
        for m in &masks {
            if m.bitmap.count() == 0 {
                return Err(Error::contract(format!("mask in view {} has no pixels", m.view_id)));
            }
        }
        Ok(MaskSet {
            masks,
            category_names: BTreeMap::new(),
        })
    }

    pub fn with_category_names(mut self, names: BTreeMap<u32, String>) -> Self {
        self.category_names = names;
        self
    }

    pub fn category_name(&self, category: u32) -> String {
        self.category_names
            .get(&category)
            .cloned()
            .unwrap_or_else(|| format!("category_{category}"))
    }

    pub fn category_names(&self) -> &BTreeMap<u32, String> {
        &self.category_names
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[InstanceMask2D] {
        &self.masks
    }

    /// Mask indices grouped by view, each list in set order.
    pub fn by_view(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, m) in self.masks.iter().enumerate() {
            out.entry(m.view_id).or_default().push(i);
        }
        out
    }

    pub fn in_view(&self, view_id: u32) -> Vec<&InstanceMask2D> {
        self.masks.iter().filter(|m| m.view_id == view_id).collect()
    }

    /// Largest category id present, plus one.
    pub fn num_categories(&self) -> usize {
        self.masks.iter().map(|m| m.category as usize + 1).max().unwrap_or(0)
    }
}

/// One mask per ground-truth instance visible in the view, in instance order.
///
/// A pixel belongs to an instance's mask when its z-buffer winner is a member
/// of that instance. Masks with fewer than `min_pixels` pixels are dropped.
pub fn rasterize_ground_truth(
    gt: &InstanceSegmentation,
    render: &ViewRender,
    min_pixels: usize,
) -> Vec<InstanceMask2D> {
    let mut bitmaps: Vec<Option<Bitmap>> = vec![None; gt.len()];
    for (q, p) in render.occupied_pixels() {
        if let Some(inst) = gt.point_instance()[p as usize] {
            let bm = bitmaps[inst as usize].get_or_insert_with(|| Bitmap::new(render.height, render.width));
            bm.bits[q] = true;
        }
    }
    bitmaps
        .into_iter()
        .enumerate()
        .filter_map(|(i, bm)| {
            let bm = bm?;
            (bm.count() >= min_pixels.max(1)).then(|| InstanceMask2D {
                view_id: render.view_id,
                category: gt.instances()[i].category,
                bitmap: bm,
            })
        })
        .collect()
}

/// Ground-truth masks for all views, concatenated in view order.
pub fn rasterize_all(gt: &InstanceSegmentation, renders: &[ViewRender], min_pixels: usize) -> MaskSet {
    let per_view = par::map(renders, |r| rasterize_ground_truth(gt, r, min_pixels));
    MaskSet {
        masks: per_view.into_iter().flatten().collect(),
        category_names: BTreeMap::new(),
    }
}

/// Detector-imperfection models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Corruption {
    /// Replace each mask by its filled bounding box.
    Bboxify,
    Dilate {
        radius: u32,
    },
    Erode {
        radius: u32,
    },
    /// Remove each mask independently with this probability.
    Dropout {
        prob: f64,
    },
    /// Flip pixels within `radius` of the mask boundary with probability `prob`.
    BoundaryNoise {
        radius: u32,
        prob: f64,
    },
}

impl FromStr for Corruption {
    type Err = Error;

    /// `bboxify`, `dilate:R`, `erode:R`, `dropout:P`, `boundary-noise:R:P`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::contract(format!("unknown corruption '{s}'"));
        let radius = |t: &str| t.parse::<u32>().map_err(|_| bad());
        let prob = |t: &str| {
            t.parse::<f64>()
                .ok()
                .filter(|p| (0.0..=1.0).contains(p))
                .ok_or_else(bad)
        };
        Ok(match parts.as_slice() {
            ["bboxify"] => Corruption::Bboxify,
            ["dilate", r] => Corruption::Dilate { radius: radius(r)? },
            ["erode", r] => Corruption::Erode { radius: radius(r)? },
            ["dropout", p] => Corruption::Dropout { prob: prob(p)? },
            ["boundary-noise", r, p] => Corruption::BoundaryNoise {
                radius: radius(r)?,
                prob: prob(p)?,
            },
            _ => return Err(bad()),
        })
    }
}

/// Apply `model` to every mask; masks left empty are dropped. Deterministic in `seed`.
pub fn corrupt(masks: &MaskSet, model: &Corruption, seed: u64) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(masks.len());
    for m in &masks.masks {
        let bitmap = match *model {
            Corruption::Bboxify => {
                let mut bm = Bitmap::new(m.bitmap.height, m.bitmap.width);
                if let Some((r0, c0, r1, c1)) = m.bitmap.bounding_box() {
                    for r in r0..=r1 {
                        for c in c0..=c1 {
                            bm.set(r, c, true);
                        }
                    }
                }
                bm
            }
            Corruption::Dilate { radius } => m.bitmap.dilate(radius),
            Corruption::Erode { radius } => m.bitmap.erode(radius),
            Corruption::Dropout { prob } => {
                if rng.random::<f64>() < prob {
                    continue;
                }
                m.bitmap.clone()
            }
            Corruption::BoundaryNoise { radius, prob } => {
                let band = m.bitmap.boundary_band(radius);
                let mut bm = m.bitmap.clone();
                for (q, near) in band.into_iter().enumerate() {
                    if near && rng.random::<f64>() < prob {
                        bm.bits[q] = !bm.bits[q];
                    }
                }
                bm
            }
        };
        if bitmap.count() > 0 {
            out.push(InstanceMask2D {
                view_id: m.view_id,
                category: m.category,
                bitmap,
            });
        }
    }
    MaskSet {
        masks: out,
        category_names: masks.category_names.clone(),
    }
}

pub const MASK_SIDECAR: &str = "masks.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskEntry {
    view_id: u32,
    mask_index: usize,
    category_id: u32,
    category_name: String,
}

fn mask_file_name(view_id: u32, index: usize) -> String {
    format!("view{view_id}_mask{index}.png")
}

fn label_file_name(view_id: u32) -> String {
    format!("view{view_id}.png")
}

/// Write one 8-bit binary PNG per mask plus the JSON sidecar.
pub fn write_masks(dir: &Path, masks: &MaskSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut next_index: BTreeMap<u32, usize> = BTreeMap::new();
    let mut entries = Vec::with_capacity(masks.len());
    for m in &masks.masks {
        let idx = next_index.entry(m.view_id).or_default();
        let path = dir.join(mask_file_name(m.view_id, *idx));
        let img = GrayImage::from_fn(m.bitmap.width as u32, m.bitmap.height as u32, |x, y| {
            Luma([if m.bitmap.at(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(&path).map_err(|e| Error::Image { path, source: e })?;
        entries.push(MaskEntry {
            view_id: m.view_id,
            mask_index: *idx,
            category_id: m.category,
            category_name: masks.category_name(m.category),
        });
        *idx += 1;
    }
    let path = dir.join(MASK_SIDECAR);
    let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Write the shared-label layout: one 16-bit PNG per view where value `v >= 1`
/// marks mask `v - 1` of that view. Fails if masks in a view overlap.
pub fn write_masks_labeled(dir: &Path, masks: &MaskSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (view, idx) in masks.by_view() {
        let first = &masks.masks[idx[0]].bitmap;
        let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(first.width as u32, first.height as u32);
        for (k, &i) in idx.iter().enumerate() {
            let m = &masks.masks[i];
            for (q, _) in m.bitmap.bits.iter().enumerate().filter(|(_, &b)| b) {
                let px = img.get_pixel_mut((q % first.width) as u32, (q / first.width) as u32);
                if px[0] != 0 {
                    return Err(Error::contract(format!(
                        "masks overlap in view {view}; use the per-mask layout"
                    )));
                }
                px[0] = k as u16 + 1;
            }
            entries.push(MaskEntry {
                view_id: view,
                mask_index: k,
                category_id: m.category,
                category_name: masks.category_name(m.category),
            });
        }
        let path = dir.join(label_file_name(view));
        img.save(&path).map_err(|e| Error::Image { path, source: e })?;
    }
    let path = dir.join(MASK_SIDECAR);
    let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Read a mask directory in either layout. Per-mask files take precedence
/// over a view's shared label image.
pub fn read_masks(dir: &Path) -> Result<MaskSet> {
    let sidecar = dir.join(MASK_SIDECAR);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let entries: Vec<MaskEntry> = serde_json::from_str(&text).map_err(|e| Error::json(&sidecar, e))?;
    let mut label_images: BTreeMap<u32, ImageBuffer<Luma<u16>, Vec<u16>>> = BTreeMap::new();
    let mut names = BTreeMap::new();
    let mut masks = Vec::with_capacity(entries.len());
    for e in entries {
        names.insert(e.category_id, e.category_name.clone());
        let single = dir.join(mask_file_name(e.view_id, e.mask_index));
        let bitmap = if single.exists() {
            let img = image::open(&single)
                .map_err(|source| Error::Image {
                    path: single.clone(),
                    source,
                })?
                .to_luma8();
            let (w, h) = img.dimensions();
            Bitmap::from_bits(h as usize, w as usize, img.pixels().map(|p| p[0] != 0).collect())?
        } else {
            let labels = match label_images.entry(e.view_id) {
                std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
                std::collections::btree_map::Entry::Vacant(v) => {
                    let path = dir.join(label_file_name(e.view_id));
                    let img = image::open(&path)
                        .map_err(|source| Error::Image { path, source })?
                        .to_luma16();
                    v.insert(img)
                }
            };
            let (w, h) = labels.dimensions();
            let want = e.mask_index as u32 + 1;
            Bitmap::from_bits(
                h as usize,
                w as usize,
                labels.pixels().map(|p| u32::from(p[0]) == want).collect(),
            )?
        };
        if bitmap.count() == 0 {
            return Err(Error::format(
                "mask set",
                format!("view {} mask {} is empty", e.view_id, e.mask_index),
            ));
        }
        masks.push(InstanceMask2D {
            view_id: e.view_id,
            category: e.category_id,
            bitmap,
        });
    }
    Ok(MaskSet {
        masks,
        category_names: names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(rows: &[&str], view_id: u32, category: u32) -> InstanceMask2D {
        let h = rows.len();
        let w = rows[0].len();
        let bits = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        InstanceMask2D {
            view_id,
            category,
            bitmap: Bitmap::from_bits(h, w, bits).unwrap(),
        }
    }

    fn l_shape() -> InstanceMask2D {
        mask_from(&["......", ".#....", ".#....", ".###..", "......"], 0, 1)
    }

    #[test]
    fn bboxify_fills_extent() {
        let set = MaskSet::new(vec![l_shape()]).unwrap();
        let out = corrupt(&set, &Corruption::Bboxify, 0);
        assert_eq!(
            out.masks()[0],
            mask_from(&["......", ".###..", ".###..", ".###..", "......"], 0, 1)
        );
    }

    #[test]
    fn dilate_zero_is_identity_and_dropout_one_empties() {
        let set = MaskSet::new(vec![l_shape(), l_shape()]).unwrap();
        assert_eq!(corrupt(&set, &Corruption::Dilate { radius: 0 }, 3), set);
        assert!(corrupt(&set, &Corruption::Dropout { prob: 1.0 }, 3).is_empty());
        assert_eq!(corrupt(&set, &Corruption::Dropout { prob: 0.0 }, 3), set);
    }

    #[test]
    fn erode_to_nothing_drops_mask() {
        let set = MaskSet::new(vec![l_shape()]).unwrap();
        assert!(corrupt(&set, &Corruption::Erode { radius: 1 }, 0).is_empty());
    }

    #[test]
    fn dilate_and_erode_shapes() {
        let sq = mask_from(&[".....", ".###.", ".###.", ".###.", "....."], 0, 0);
        assert_eq!(sq.bitmap.erode(1).count(), 1);
        assert_eq!(sq.bitmap.dilate(1).count(), 9 + 4 * 3);
    }

    #[test]
    fn corruption_parsing() {
        assert_eq!("bboxify".parse::<Corruption>().unwrap(), Corruption::Bboxify);
        assert_eq!(
            "boundary-noise:2:0.25".parse::<Corruption>().unwrap(),
            Corruption::BoundaryNoise { radius: 2, prob: 0.25 }
        );
        assert!("dropout:1.5".parse::<Corruption>().is_err());
        assert!("blur".parse::<Corruption>().is_err());
    }

    #[test]
    fn per_mask_layout_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        // overlapping masks, interleaved views
        let a = l_shape();
        let b = mask_from(&["......", ".##...", ".##...", "......", "......"], 0, 2);
        let c = mask_from(&["#.....", "......", "......", "......", "......"], 3, 1);
        let set = MaskSet::new(vec![a, c, b]).unwrap();
        write_masks(dir.path(), &set).unwrap();
        assert!(dir.path().join("view0_mask1.png").exists());
        assert!(dir.path().join("view3_mask0.png").exists());
        let back = read_masks(dir.path()).unwrap();
        assert_eq!(back.masks(), set.masks());
        assert_eq!(back.category_name(2), "category_2");
    }

    #[test]
    fn labeled_layout_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let a = mask_from(&["##..", "....", "...."], 4, 0);
        let b = mask_from(&["....", "..##", "...."], 4, 1);
        let set = MaskSet::new(vec![a, b]).unwrap();
        write_masks_labeled(dir.path(), &set).unwrap();
        assert!(dir.path().join("view4.png").exists());
        assert!(!dir.path().join("view4_mask0.png").exists());
        assert_eq!(read_masks(dir.path()).unwrap().masks(), set.masks());

        let overlapping = MaskSet::new(vec![l_shape(), l_shape()]).unwrap();
        assert!(write_masks_labeled(dir.path(), &overlapping).is_err());
    }

    proptest! {
        #[test]
        fn bbox_grows_and_erode_shrinks(bits in prop::collection::vec(any::<bool>(), 48), r in 0u32..3) {
            prop_assume!(bits.iter().any(|&b| b));
            let m = InstanceMask2D { view_id: 0, category: 0, bitmap: Bitmap::from_bits(6, 8, bits).unwrap() };
            let set = MaskSet::new(vec![m.clone()]).unwrap();
            let boxed = corrupt(&set, &Corruption::Bboxify, 0);
            let bb = &boxed.masks()[0].bitmap;
            for q in 0..48 {
                prop_assert!(!m.bitmap.get(q) || bb.get(q));
            }
            let eroded = m.bitmap.erode(r);
            for q in 0..48 {
                prop_assert!(!eroded.get(q) || m.bitmap.get(q));
            }
        }

        #[test]
        fn corruption_is_seed_deterministic(seed in any::<u64>()) {
            let set = MaskSet::new(vec![l_shape(), l_shape(), l_shape()]).unwrap();
            let model = Corruption::BoundaryNoise { radius: 1, prob: 0.5 };
            prop_assert_eq!(corrupt(&set, &model, seed), corrupt(&set, &model, seed));
            let drop = Corruption::Dropout { prob: 0.5 };
            prop_assert_eq!(corrupt(&set, &drop, seed), corrupt(&set, &drop, seed));
        }
    }
}
