//! End-to-end orchestration: render, oversegment, vote, group, refine, split, score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::em::{run_em, EmConfig, TraceRow};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::geometry::{render_all, CameraView, PointCloud, RenderParams, ViewRender};
use crate::grouping::{group, DEFAULT_FEATURE_THRESHOLD};
use crate::masks::{corrupt, rasterize_all, Corruption, MaskSet, DEFAULT_MIN_PIXELS};
use crate::par;
use crate::postprocess::{split_disconnected, DEFAULT_MIN_CLUSTER, DEFAULT_RADIUS};
use crate::segmentation::InstanceSegmentation;
use crate::superpoints::{oversegment, SuperpointParams, SuperpointPartition};
use crate::synthetic::{generate, SceneSpec};
use crate::voting::{vote, SemanticScores};

/// Independent seed for a named stage, derived from the root seed.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stage as u64);
    rng.random()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate = 1,
    Corrupt = 2,
    Em = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingParams {
    /// Vote share a superpoint needs for its best category to be assigned.
    pub assign_threshold: f64,
    pub feature_threshold: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        GroupingParams {
            assign_threshold: 0.0,
            feature_threshold: DEFAULT_FEATURE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostParams {
    pub radius: f64,
    pub min_cluster: usize,
}

impl Default for PostParams {
    fn default() -> Self {
        PostParams {
            radius: DEFAULT_RADIUS,
            min_cluster: DEFAULT_MIN_CLUSTER,
        }
    }
}

/// Granularity of the refinement's logit rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmUnit {
    #[default]
    Superpoint,
    Point,
}

/// Parameters for every stage plus the ablation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub render: RenderParams,
    pub superpoints: SuperpointParams,
    pub grouping: GroupingParams,
    /// The EM seed is derived from `seed`; the `seed` field inside is ignored.
    pub em: EmConfig,
    pub em_unit: EmUnit,
    pub post: PostParams,
    /// Skip refinement and keep the grouped instances.
    pub no_em: bool,
    /// Start refinement from one instance covering every point.
    pub no_init: bool,
    /// Skip the connected-component split.
    pub no_post: bool,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("pipeline config", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.em.validate()?;
        if !(self.post.radius > 0.0 && self.post.radius.is_finite()) {
            return Err(Error::contract("post radius must be > 0"));
        }
        let g = self.grouping.feature_threshold;
        if !(g > 0.0 && g <= 2.0) {
            return Err(Error::contract("feature_threshold must lie in (0, 2]"));
        }
        Ok(())
    }
}

/// Pipeline inputs shared by every variant.
pub struct Prepared {
    pub renders: Vec<ViewRender>,
    pub partition: SuperpointPartition,
    pub semantics: SemanticScores,
    /// Grouped instances, before refinement.
    pub grouped: InstanceSegmentation,
}

/// Everything up to and including grouping.
pub fn prepare(
    cloud: &PointCloud,
    views: &[CameraView],
    masks: &MaskSet,
    partition: Option<SuperpointPartition>,
    config: &PipelineConfig,
) -> Result<Prepared> {
    config.validate()?;
    let renders = render_all(cloud, views, &config.render).map_err(|e| e.in_stage("render"))?;
    let partition = match partition {
        Some(p) if p.num_points() == cloud.len() => p,
        Some(_) => return Err(Error::contract("partition does not match the cloud").in_stage("superpoints")),
        None => oversegment(cloud, &config.superpoints).map_err(|e| e.in_stage("superpoints"))?,
    };
    let semantics = vote(
        &partition,
        &renders,
        masks,
        masks.num_categories(),
        config.grouping.assign_threshold,
    )
    .map_err(|e| e.in_stage("vote"))?;
    let grouped = group(
        &partition,
        &semantics,
        &renders,
        masks,
        config.grouping.feature_threshold,
    )
    .map_err(|e| e.in_stage("group"))?;
    Ok(Prepared {
        renders,
        partition,
        semantics,
        grouped,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub instances: InstanceSegmentation,
    /// Per-point category: the point's instance category, else its superpoint's vote.
    pub semantic_labels: Vec<Option<u32>>,
    /// Per-superpoint voting scores.
    pub scores: SemanticScores,
    pub trace: Vec<TraceRow>,
    pub report: Option<EvalReport>,
}

/// One instance over every point, labelled with the most voted category.
fn all_points_instance(prepared: &Prepared) -> Result<InstanceSegmentation> {
    let n = prepared.partition.num_points();
    let mut counts = vec![0usize; prepared.semantics.num_categories()];
    for l in prepared
        .semantics
        .point_labels(&prepared.partition)
        .into_iter()
        .flatten()
    {
        counts[l as usize] += 1;
    }
    let category = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(c, _)| c as u32);
    InstanceSegmentation::from_labels(&vec![Some(0); n], &[category], &[1.0])
}

/// Refinement, splitting and scoring on top of a prepared scene.
pub fn finish(
    prepared: &Prepared,
    cloud: &PointCloud,
    masks: &MaskSet,
    gt: Option<&InstanceSegmentation>,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut trace = Vec::new();
    let refined = if config.no_em {
        prepared.grouped.clone()
    } else {
        let mut em = config.em;
        em.seed = stage_seed(config.seed, Stage::Em);
        let init = if config.no_init {
            let by_view = masks.by_view();
            em.slack_labels = em.slack_labels.max(by_view.values().map(Vec::len).max().unwrap_or(0));
            em.relabel_from_matches = true;
            all_points_instance(prepared)?
        } else {
            prepared.grouped.clone()
        };
        let points;
        let units = match config.em_unit {
            EmUnit::Superpoint => &prepared.partition,
            EmUnit::Point => {
                let n = prepared.partition.num_points();
                points = SuperpointPartition::from_assignment((0..n as u32).collect(), &vec![Vec::new(); n])?;
                &points
            }
        };
        let out = run_em(&init, units, &prepared.renders, masks, &em).map_err(|e| e.in_stage("em"))?;
        trace = out.trace;
        out.segmentation
    };
    let instances = if config.no_post {
        refined
    } else {
        split_disconnected(&refined, cloud, config.post.radius, config.post.min_cluster)
            .map_err(|e| e.in_stage("post"))?
    };
    let voted = prepared.semantics.point_labels(&prepared.partition);
    let semantic_labels: Vec<Option<u32>> = instances
        .point_instance()
        .iter()
        .zip(voted)
        .map(|(i, v)| i.map(|i| instances.instances()[i as usize].category).or(v))
        .collect();
    let report = gt
        .map(|gt| evaluate(&instances, Some(&semantic_labels), gt))
        .transpose()
        .map_err(|e| e.in_stage("eval"))?;
    Ok(PipelineOutput {
        instances,
        semantic_labels,
        scores: prepared.semantics.clone(),
        trace,
        report,
    })
}

pub fn run_pipeline(
    cloud: &PointCloud,
    views: &[CameraView],
    masks: &MaskSet,
    partition: Option<SuperpointPartition>,
    gt: Option<&InstanceSegmentation>,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    let prepared = prepare(cloud, views, masks, partition, config)?;
    finish(&prepared, cloud, masks, gt, config)
}

/// A generated scene with its renders and ground-truth masks.
pub struct SceneData {
    pub cloud: PointCloud,
    pub gt: InstanceSegmentation,
    pub renders: Vec<ViewRender>,
    pub masks: MaskSet,
}

/// Sample a scene, render it and rasterize (optionally corrupted) ground-truth masks.
pub fn scene_data(
    spec: &SceneSpec,
    views: &[CameraView],
    corruption: Option<&Corruption>,
    render: &RenderParams,
    seed: u64,
) -> Result<SceneData> {
    let (cloud, gt) = generate(spec)?;
    let renders = render_all(&cloud, views, render)?;
    let mut masks = rasterize_all(&gt, &renders, DEFAULT_MIN_PIXELS);
    if let Some(c) = corruption {
        masks = corrupt(&masks, c, stage_seed(seed, Stage::Corrupt));
    }
    Ok(SceneData {
        cloud,
        gt,
        renders,
        masks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoEm,
    NoInit,
    NoPost,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoEm, Variant::NoInit, Variant::NoPost];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEm => "no_em",
            Variant::NoInit => "no_init",
            Variant::NoPost => "no_post",
        }
    }

    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            no_em: self == Variant::NoEm,
            no_init: self == Variant::NoInit,
            no_post: self == Variant::NoPost,
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub map50: Vec<f64>,
    pub miou: Vec<f64>,
    pub mean_map50: f64,
    pub mean_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub corruption: Option<Corruption>,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Rows `scene,variant,map50,miou` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,variant,map50,miou\n");
        let scenes = self.variants.first().map_or(0, |v| v.map50.len());
        for s in 0..scenes {
            for v in &self.variants {
                out.push_str(&format!("{s},{},{},{}\n", v.variant.name(), v.map50[s], v.miou[s]));
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>8}  {:>8}  {:>8}\n", "variant", "map50", "miou");
        for v in &self.variants {
            out.push_str(&format!(
                "{:>8}  {:>8.4}  {:>8.4}\n",
                v.variant.name(),
                v.mean_map50,
                v.mean_miou
            ));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Score the requested variants on each scene with (optionally corrupted) ground-truth masks.
pub fn ablation_run(
    scenes: &[(SceneSpec, Vec<CameraView>)],
    corruption: Option<Corruption>,
    variants: &[Variant],
    config: &PipelineConfig,
) -> Result<AblationReport> {
    if scenes.is_empty() {
        return Err(Error::NoScenes);
    }
    config.validate()?;
    let per_scene: Vec<Result<Vec<(f64, f64)>>> = par::map(scenes, |(spec, views)| {
        let data = scene_data(spec, views, corruption.as_ref(), &config.render, config.seed)?;
        let prepared = prepare(&data.cloud, views, &data.masks, None, config)?;
        variants
            .iter()
            .map(|v| {
                let out = finish(&prepared, &data.cloud, &data.masks, Some(&data.gt), &v.apply(config))?;
                let r = out.report.expect("ground truth supplied");
                Ok((r.map50, r.miou))
            })
            .collect()
    });
    let per_scene: Vec<Vec<(f64, f64)>> = per_scene.into_iter().collect::<Result<_>>()?;
    let variants = variants
        .iter()
        .enumerate()
        .map(|(k, &variant)| {
            let map50: Vec<f64> = per_scene.iter().map(|s| s[k].0).collect();
            let miou: Vec<f64> = per_scene.iter().map(|s| s[k].1).collect();
            VariantResult {
                variant,
                mean_map50: mean(&map50),
                mean_miou: mean(&miou),
                map50,
                miou,
            }
        })
        .collect();
    Ok(AblationReport { corruption, variants })
}
