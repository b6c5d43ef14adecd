//! Per-point instance labelling shared by grouping, refinement and evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: u32,
    /// Ascending point indices.
    pub members: Vec<u32>,
    pub confidence: f64,
}

/// Disjoint point instances, each with one category and a confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSegmentation {
    point_instance: Vec<Option<u32>>,
    instances: Vec<Instance>,
}

impl InstanceSegmentation {
    /// Build from per-point labels. Instances that end up with no member points
    /// are dropped and the remaining ids compacted in order.
    pub fn from_labels(point_labels: &[Option<u32>], categories: &[u32], confidences: &[f64]) -> Result<Self> {
        if categories.len() != confidences.len() {
            return Err(Error::contract("category and confidence lists differ in length"));
        }
        let mut members = vec![Vec::new(); categories.len()];
        for (p, l) in point_labels.iter().enumerate() {
            if let Some(l) = *l {
                members
                    .get_mut(l as usize)
                    .ok_or_else(|| Error::contract(format!("instance id {l} out of range")))?
                    .push(p as u32);
            }
        }
        let mut remap = vec![None; categories.len()];
        let mut instances = Vec::new();
        for (i, m) in members.into_iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let confidence = confidences[i];
            if !(0.0..=1.0).contains(&confidence) {
                return Err(Error::contract(format!("confidence {confidence} outside [0, 1]")));
            }
            remap[i] = Some(instances.len() as u32);
            instances.push(Instance {
                category: categories[i],
                members: m,
                confidence,
            });
        }
        let point_instance = point_labels.iter().map(|l| l.and_then(|l| remap[l as usize])).collect();
        Ok(InstanceSegmentation {
            point_instance,
            instances,
        })
    }

    /// No instances at all over `n` points.
    pub fn empty(n: usize) -> Self {
        InstanceSegmentation {
            point_instance: vec![None; n],
            instances: Vec::new(),
        }
    }

    pub fn num_points(&self) -> usize {
        self.point_instance.len()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn point_instance(&self) -> &[Option<u32>] {
        &self.point_instance
    }

    pub fn point_category(&self, point: usize) -> Option<u32> {
        self.point_instance[point].map(|i| self.instances[i as usize].category)
    }

    pub fn semantic_labels(&self) -> Vec<Option<u32>> {
        (0..self.num_points()).map(|p| self.point_category(p)).collect()
    }

    pub fn categories(&self) -> Vec<u32> {
        self.instances.iter().map(|i| i.category).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.instances.iter().map(|i| i.confidence).collect()
    }

    pub fn to_json(&self) -> String {
        let file = SegmentationFile {
            instances: self
                .instances
                .iter()
                .enumerate()
                .map(|(id, inst)| InstanceEntry {
                    id: id as u32,
                    category_id: inst.category,
                    confidence: inst.confidence,
                })
                .collect(),
            point_instance: self.point_instance.iter().map(|l| l.map_or(-1, i64::from)).collect(),
        };
        serde_json::to_string(&file).expect("segmentation serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SegmentationFile =
            serde_json::from_str(text).map_err(|e| Error::format("segmentation JSON", e.to_string()))?;
        let mut order: Vec<u32> = file.instances.iter().map(|i| i.id).collect();
        order.sort_unstable();
        if order.iter().enumerate().any(|(i, &id)| id as usize != i) {
            return Err(Error::format(
                "segmentation JSON",
                "instance ids must be 0..k without gaps",
            ));
        }
        let mut categories = vec![0; order.len()];
        let mut confidences = vec![0.0; order.len()];
        for e in &file.instances {
            categories[e.id as usize] = e.category_id;
            confidences[e.id as usize] = e.confidence;
        }
        let labels: Vec<Option<u32>> = file
            .point_instance
            .iter()
            .map(|&l| match l {
                -1 => Ok(None),
                l if l >= 0 && (l as usize) < order.len() => Ok(Some(l as u32)),
                l => Err(Error::format(
                    "segmentation JSON",
                    format!("point_instance value {l} has no instance"),
                )),
            })
            .collect::<Result<_>>()?;
        let seg = Self::from_labels(&labels, &categories, &confidences)
            .map_err(|e| Error::format("segmentation JSON", e.to_string()))?;
        if seg.len() != order.len() {
            return Err(Error::format("segmentation JSON", "instance without member points"));
        }
        Ok(seg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceEntry {
    id: u32,
    category_id: u32,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct SegmentationFile {
    instances: Vec<InstanceEntry>,
    point_instance: Vec<i64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_empty_instances_and_compacts() {
        let seg = InstanceSegmentation::from_labels(&[Some(2), None, Some(0), Some(2)], &[5, 6, 7], &[0.5, 0.25, 1.0])
            .unwrap();
        assert_eq!(seg.len(), 2);
        assert_eq!(seg.point_instance(), &[Some(1), None, Some(0), Some(1)]);
        assert_eq!(seg.instances()[1].members, vec![0, 3]);
        assert_eq!(seg.point_category(0), Some(7));
    }

    #[test]
    fn json_round_trip() {
        let seg = InstanceSegmentation::from_labels(&[Some(1), None, Some(0)], &[3, 4], &[0.9, 0.125]).unwrap();
        let text = seg.to_json();
        assert_eq!(
            text,
            r#"{"instances":[{"id":0,"category_id":3,"confidence":0.9},{"id":1,"category_id":4,"confidence":0.125}],"point_instance":[1,-1,0]}"#
        );
        assert_eq!(InstanceSegmentation::from_json(&text).unwrap(), seg);
    }

    #[test]
    fn rejects_bad_json() {
        assert!(InstanceSegmentation::from_json(r#"{"instances":[],"point_instance":[0]}"#).is_err());
        assert!(InstanceSegmentation::from_json(
            r#"{"instances":[{"id":0,"category_id":1,"confidence":0.5}],"point_instance":[-1]}"#
        )
        .is_err());
        assert!(InstanceSegmentation::from_json(
            r#"{"instances":[{"id":1,"category_id":1,"confidence":0.5}],"point_instance":[1]}"#
        )
        .is_err());
        assert!(InstanceSegmentation::from_json("{").is_err());
    }
}
