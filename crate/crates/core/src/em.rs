//! EM refinement of 3D instances against multi-view 2D masks.
//!
//! Each unit (superpoint, or point under the identity partition) carries a row
//! of instance logits. An iteration picks one view, matches that view's masks
//! one-to-one to instance labels by minimum binary cross-entropy between each
//! mask and the label's projected probabilities (E-step), then takes a fixed
//! number of gradient steps on the logits under that matching (M-step).
//!
//! Costs and gradients are evaluated from per-unit pixel counts: inside one
//! view every pixel owned by a unit shares that unit's probability, so the
//! sum over pixels collapses to a sum over units weighted by how many of their
//! pixels fall inside and outside the mask.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ViewRender, EMPTY_PIXEL};
use crate::hungarian::linear_sum_assignment;
use crate::masks::{Bitmap, InstanceMask2D, MaskSet};
use crate::par;
use crate::segmentation::InstanceSegmentation;
use crate::superpoints::SuperpointPartition;
use crate::voting::render_index;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewSchedule {
    Random,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub grad_steps_per_m: usize,
    /// Probabilities are clamped to `[eps, 1 - eps]` before logs; 0 disables clamping.
    pub prob_clamp_eps: f64,
    pub seed: u64,
    pub view_schedule: ViewSchedule,
    /// Extra label columns beyond the initial instances, initialised to zero logits.
    pub slack_labels: usize,
    /// Forbid matching a mask to a label of a different known category.
    pub restrict_to_category: bool,
    /// Give every label, not only slack ones, the most frequent category of its
    /// matched masks; labels never matched keep their initial category.
    pub relabel_from_matches: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            iterations: 10,
            learning_rate: 1.0,
            grad_steps_per_m: 20,
            prob_clamp_eps: 1e-6,
            seed: 0,
            view_schedule: ViewSchedule::Random,
            slack_labels: 0,
            restrict_to_category: false,
            relabel_from_matches: false,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be > 0"));
        }
        if !(0.0..0.5).contains(&self.prob_clamp_eps) {
            return Err(Error::contract("prob_clamp_eps must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Instance logits for every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    units: usize,
    labels: usize,
    theta: Vec<f64>,
    unit_sizes: Vec<usize>,
    unit_of_point: Vec<u32>,
}

impl LogitMatrix {
    /// Zero logits over the units of `partition`.
    pub fn zeros(partition: &SuperpointPartition, labels: usize) -> Self {
        LogitMatrix {
            units: partition.len(),
            labels,
            theta: vec![0.0; partition.len() * labels],
            unit_sizes: partition.superpoints().iter().map(Vec::len).collect(),
            unit_of_point: partition.assignment().to_vec(),
        }
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn unit_sizes(&self) -> &[usize] {
        &self.unit_sizes
    }

    pub fn unit_of_point(&self, point: usize) -> usize {
        self.unit_of_point[point] as usize
    }

    pub fn row(&self, unit: usize) -> &[f64] {
        &self.theta[unit * self.labels..(unit + 1) * self.labels]
    }

    pub fn row_mut(&mut self, unit: usize) -> &mut [f64] {
        let l = self.labels;
        &mut self.theta[unit * l..(unit + 1) * l]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Softmax of one row.
    pub fn probabilities(&self, unit: usize) -> Vec<f64> {
        softmax(self.row(unit))
    }

    /// Highest-logit label, ties to the lower label.
    pub fn argmax(&self, unit: usize) -> usize {
        let row = self.row(unit);
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        best
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Majority instance of each unit's points; a tie goes to the lower id and
/// unlabelled points form their own (losing on ties) bucket.
fn unit_instances(init: &InstanceSegmentation, partition: &SuperpointPartition) -> Vec<Option<u32>> {
    partition
        .superpoints()
        .iter()
        .map(|members| {
            let mut counts: BTreeMap<Option<u32>, usize> = BTreeMap::new();
            for &p in members {
                *counts.entry(init.point_instance()[p as usize]).or_default() += 1;
            }
            let mut best: Option<(Option<u32>, usize)> = None;
            // iterate labelled ids ascending, then None
            for (&k, &c) in counts
                .iter()
                .filter(|(k, _)| k.is_some())
                .chain(counts.iter().filter(|(k, _)| k.is_none()))
            {
                if best.is_none_or(|(_, b)| c > b) {
                    best = Some((k, c));
                }
            }
            best.and_then(|(k, _)| k)
        })
        .collect()
}

/// Logits from an initial segmentation with `m` instances: `ln m` on the
/// unit's instance column and 0 elsewhere; unassigned units get a zero row.
pub fn init_logits(init: &InstanceSegmentation, partition: &SuperpointPartition) -> Result<LogitMatrix> {
    init_logits_with_slack(init, partition, 0)
}

pub fn init_logits_with_slack(
    init: &InstanceSegmentation,
    partition: &SuperpointPartition,
    slack: usize,
) -> Result<LogitMatrix> {
    if init.num_points() != partition.num_points() {
        return Err(Error::contract("initial segmentation does not match the partition"));
    }
    let m = init.len();
    if m == 0 {
        return Err(Error::NoInstances);
    }
    let mut theta = LogitMatrix::zeros(partition, m + slack);
    let value = (m as f64).ln();
    for (u, inst) in unit_instances(init, partition).into_iter().enumerate() {
        if let Some(j) = inst {
            theta.row_mut(u)[j as usize] = value;
        }
    }
    Ok(theta)
}

/// Per-pixel probability of `label` for the unit owning each pixel; `None` on empty pixels.
pub fn project_scores(theta: &LogitMatrix, label: usize, render: &ViewRender) -> Result<Vec<Option<f64>>> {
    if label >= theta.labels() {
        return Err(Error::contract(format!("label {label} out of range")));
    }
    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    Ok(render
        .pixel_to_point
        .iter()
        .map(|&p| {
            (p != EMPTY_PIXEL).then(|| {
                let u = theta.unit_of_point(p as usize);
                *cache.entry(u).or_insert_with(|| theta.probabilities(u)[label])
            })
        })
        .collect())
}

fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Negative log-likelihood of `mask` under a projected probability map,
/// summed over occupied pixels only.
pub fn bce_cost(projected: &[Option<f64>], mask: &Bitmap, eps: f64) -> Result<f64> {
    if projected.len() != mask.bits().len() {
        return Err(Error::contract("projection and mask sizes differ"));
    }
    let mut cost = 0.0;
    for (p, &m) in projected.iter().zip(mask.bits()) {
        if let Some(p) = *p {
            let p = clamp_prob(p, eps);
            cost -= if m { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(cost)
}

/// Pixel counts of one view aggregated per unit.
#[derive(Debug, Clone)]
pub struct ViewEvidence {
    pub view_id: u32,
    /// Units owning at least one pixel, ascending.
    units: Vec<u32>,
    /// Pixels owned by each unit in `units`.
    unit_pixels: Vec<u32>,
    /// Global mask-set indices of this view's masks.
    mask_ids: Vec<usize>,
    mask_categories: Vec<u32>,
    /// Per mask, pixels of each unit inside the mask (aligned with `units`).
    inside: Vec<Vec<u32>>,
}

impl ViewEvidence {
    pub fn new(
        theta: &LogitMatrix,
        render: &ViewRender,
        masks: &[&InstanceMask2D],
        mask_ids: Vec<usize>,
    ) -> Result<Self> {
        if masks.len() != mask_ids.len() {
            return Err(Error::contract("mask id list length mismatch"));
        }
        for m in masks {
            if m.view_id != render.view_id || m.bitmap.bits().len() != render.pixel_count() {
                return Err(Error::contract("mask does not belong to this render"));
            }
        }
        let mut slot: BTreeMap<u32, usize> = BTreeMap::new();
        for (_, p) in render.occupied_pixels() {
            slot.insert(theta.unit_of_point[p as usize], 0);
        }
        let units: Vec<u32> = slot.keys().copied().collect();
        for (i, v) in slot.values_mut().enumerate() {
            *v = i;
        }
        let mut unit_pixels = vec![0u32; units.len()];
        let mut inside = vec![vec![0u32; units.len()]; masks.len()];
        for (q, p) in render.occupied_pixels() {
            let k = slot[&theta.unit_of_point[p as usize]];
            unit_pixels[k] += 1;
            for (i, m) in masks.iter().enumerate() {
                if m.contains(q) {
                    inside[i][k] += 1;
                }
            }
        }
        Ok(ViewEvidence {
            view_id: render.view_id,
            units,
            unit_pixels,
            mask_ids,
            mask_categories: masks.iter().map(|m| m.category).collect(),
            inside,
        })
    }

    pub fn num_masks(&self) -> usize {
        self.mask_ids.len()
    }

    pub fn mask_ids(&self) -> &[usize] {
        &self.mask_ids
    }

    /// Cost of assigning local mask `i` to `label`.
    pub fn cost(&self, probs: &UnitProbabilities, i: usize, label: usize, eps: f64) -> f64 {
        let mut c = 0.0;
        for (k, &n) in self.unit_pixels.iter().enumerate() {
            let p = clamp_prob(probs.get(k, label), eps);
            let a = self.inside[i][k] as f64;
            let b = n as f64 - a;
            if a > 0.0 {
                c -= a * p.ln();
            }
            if b > 0.0 {
                c -= b * (1.0 - p).ln();
            }
        }
        c
    }

    /// Softmax rows of the units seen in this view.
    pub fn probabilities(&self, theta: &LogitMatrix) -> UnitProbabilities {
        let labels = theta.labels();
        let mut values = Vec::with_capacity(self.units.len() * labels);
        for &u in &self.units {
            values.extend(theta.probabilities(u as usize));
        }
        UnitProbabilities { labels, values }
    }

    /// The `masks x labels` cost matrix, row-major.
    pub fn cost_matrix(&self, theta: &LogitMatrix, eps: f64) -> Vec<f64> {
        let probs = self.probabilities(theta);
        let l = theta.labels();
        par::map_range(self.num_masks() * l, |e| self.cost(&probs, e / l, e % l, eps))
    }
}

/// Row-major softmax values for the units of one [`ViewEvidence`].
pub struct UnitProbabilities {
    labels: usize,
    values: Vec<f64>,
}

impl UnitProbabilities {
    fn get(&self, k: usize, label: usize) -> f64 {
        self.values[k * self.labels + label]
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.labels..(k + 1) * self.labels]
    }
}

/// One view's matching of masks to labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub view_id: u32,
    /// Global mask-set index of each mask in the view.
    pub mask_ids: Vec<usize>,
    /// Label of each mask, `None` when unmatched.
    pub labels: Vec<Option<u32>>,
    /// Total cost of the matched pairs.
    pub cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (i, l as usize)))
    }
}

/// Match the view's masks to labels by minimum total cost.
///
/// `label_categories[j]` is the known category of label `j`, used only when
/// `config.restrict_to_category` is set; such a match across categories is
/// forbidden and the mask left unmatched.
pub fn e_step(
    theta: &LogitMatrix,
    evidence: &ViewEvidence,
    label_categories: &[Option<u32>],
    config: &EmConfig,
) -> Result<Assignment> {
    let l = theta.labels();
    let m = evidence.num_masks();
    if m == 0 {
        return Err(Error::contract("view has no masks"));
    }
    let mut cost = evidence.cost_matrix(theta, config.prob_clamp_eps);
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let forbidden = |i: usize, j: usize| {
        config.restrict_to_category
            && label_categories
                .get(j)
                .copied()
                .flatten()
                .is_some_and(|c| c != evidence.mask_categories[i])
    };
    let raw = cost.clone();
    if config.restrict_to_category {
        let big = 1.0 + 2.0 * raw.iter().map(|c| c.abs()).sum::<f64>();
        for i in 0..m {
            for j in 0..l {
                if forbidden(i, j) {
                    cost[i * l + j] = big;
                }
            }
        }
    }
    let pairs = linear_sum_assignment(&cost, m, l)?;
    let mut labels = vec![None; m];
    let mut matched = Vec::with_capacity(pairs.len());
    for (i, j) in pairs {
        if !forbidden(i, j) {
            labels[i] = Some(j as u32);
            matched.push(raw[i * l + j]);
        }
    }
    // summed in value order so tied matchings report the same total
    matched.sort_by(f64::total_cmp);
    let total = matched.iter().sum();
    Ok(Assignment {
        view_id: evidence.view_id,
        mask_ids: evidence.mask_ids.clone(),
        labels,
        cost: total,
    })
}

/// Total matched cost and its gradient with respect to every logit.
pub fn loss_and_gradient(
    theta: &LogitMatrix,
    evidence: &ViewEvidence,
    assignment: &Assignment,
    eps: f64,
) -> (f64, Vec<f64>) {
    let l = theta.labels();
    let probs = evidence.probabilities(theta);
    let pairs: Vec<(usize, usize)> = assignment.pairs().collect();
    let per_unit = par::map_range(evidence.units.len(), |k| {
        let p = probs.row(k);
        let n = evidence.unit_pixels[k] as f64;
        let mut loss = 0.0;
        // dL/dp_j for this unit
        let mut dp = vec![0.0; l];
        for &(i, j) in &pairs {
            let a = evidence.inside[i][k] as f64;
            let b = n - a;
            let pc = clamp_prob(p[j], eps);
            if a > 0.0 {
                loss -= a * pc.ln();
            }
            if b > 0.0 {
                loss -= b * (1.0 - pc).ln();
            }
            let flows = eps == 0.0 || (p[j] > eps && p[j] < 1.0 - eps);
            if flows {
                dp[j] += -a / pc + b / (1.0 - pc);
            }
        }
        let mean: f64 = dp.iter().zip(p).map(|(d, q)| d * q).sum();
        let grad: Vec<f64> = (0..l).map(|c| p[c] * (dp[c] - mean)).collect();
        (loss, grad)
    });
    let mut grad = vec![0.0; theta.units() * l];
    let mut loss = 0.0;
    for (k, (lk, gk)) in per_unit.into_iter().enumerate() {
        loss += lk;
        let u = evidence.units[k] as usize;
        grad[u * l..(u + 1) * l].copy_from_slice(&gk);
    }
    (loss, grad)
}

/// Gradient descent on the logits under a fixed assignment.
pub fn m_step(
    theta: &LogitMatrix,
    evidence: &ViewEvidence,
    assignment: &Assignment,
    config: &EmConfig,
) -> Result<LogitMatrix> {
    let mut next = theta.clone();
    if assignment.pairs().next().is_none() {
        return Ok(next);
    }
    for _ in 0..config.grad_steps_per_m {
        let (_, grad) = loss_and_gradient(&next, evidence, assignment, config.prob_clamp_eps);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        for (t, g) in next.theta.iter_mut().zip(&grad) {
            *t -= config.learning_rate * g;
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub view_id: u32,
    pub matched_cost: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,view_id,matched_cost\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{}", r.iteration, r.view_id, r.matched_cost);
    }
    out
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    fs::write(path, trace_to_csv(trace)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub segmentation: InstanceSegmentation,
    pub trace: Vec<TraceRow>,
    pub theta: LogitMatrix,
}

/// Per-view evidence for every view that has masks, in view-id order.
pub fn gather_evidence(theta: &LogitMatrix, renders: &[ViewRender], masks: &MaskSet) -> Result<Vec<ViewEvidence>> {
    let index = render_index(renders, masks)?;
    let views: Vec<(u32, Vec<usize>)> = masks.by_view().into_iter().collect();
    par::map(&views, |(view, ids)| {
        let list: Vec<&InstanceMask2D> = ids.iter().map(|&i| &masks.masks()[i]).collect();
        ViewEvidence::new(theta, index[view], &list, ids.clone())
    })
    .into_iter()
    .collect()
}

/// Run the EM loop from an initial segmentation and return the refined instances.
///
/// Label `j < m` inherits the category of initial instance `j`. Slack labels
/// take the most frequent category of the masks matched to them; a slack
/// label never matched yields no instance. Units that were unassigned at
/// initialisation and still hold an all-equal row are left unassigned.
pub fn run_em(
    init: &InstanceSegmentation,
    partition: &SuperpointPartition,
    renders: &[ViewRender],
    masks: &MaskSet,
    config: &EmConfig,
) -> Result<EmOutcome> {
    config.validate()?;
    if masks.is_empty() {
        return Err(Error::contract("EM needs at least one mask"));
    }
    let mut theta = init_logits_with_slack(init, partition, config.slack_labels)?;
    let m = init.len();
    let mut label_categories: Vec<Option<u32>> = init.categories().into_iter().map(Some).collect();
    label_categories.extend(std::iter::repeat_n(None, config.slack_labels));
    let init_assigned: Vec<bool> = unit_instances(init, partition)
        .into_iter()
        .map(|i| i.is_some())
        .collect();

    let evidence = gather_evidence(&theta, renders, masks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut votes: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); theta.labels()];
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let v = match config.view_schedule {
            ViewSchedule::RoundRobin => it % evidence.len(),
            ViewSchedule::Random => rng.random_range(0..evidence.len()),
        };
        let ev = &evidence[v];
        let assignment = e_step(&theta, ev, &label_categories, config)?;
        for (i, j) in assignment.pairs() {
            *votes[j].entry(ev.mask_categories[i]).or_default() += 1;
        }
        trace.push(TraceRow {
            iteration: it,
            view_id: ev.view_id,
            matched_cost: assignment.cost,
        });
        theta = m_step(&theta, ev, &assignment, config)?;
    }

    let first = if config.relabel_from_matches { 0 } else { m };
    for (j, cat) in label_categories.iter_mut().enumerate().skip(first) {
        let majority = votes[j]
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c);
        *cat = majority.or(if j < m { *cat } else { None });
    }

    let l = theta.labels();
    let mut unit_label = vec![None; theta.units()];
    let mut conf_sum = vec![0.0; l];
    let mut conf_n = vec![0usize; l];
    for u in 0..theta.units() {
        let row = theta.row(u);
        if !init_assigned[u] && row.iter().all(|&x| x == row[0]) {
            continue;
        }
        let j = theta.argmax(u);
        if label_categories[j].is_none() {
            continue;
        }
        unit_label[u] = Some(j as u32);
        conf_sum[j] += theta.probabilities(u)[j];
        conf_n[j] += 1;
    }
    let point_labels: Vec<Option<u32>> = partition.assignment().iter().map(|&u| unit_label[u as usize]).collect();
    let categories: Vec<u32> = label_categories.iter().map(|c| c.unwrap_or(0)).collect();
    let confidences: Vec<f64> = conf_sum
        .iter()
        .zip(&conf_n)
        .map(|(s, &n)| if n > 0 { (s / n as f64).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    let segmentation = InstanceSegmentation::from_labels(&point_labels, &categories, &confidences)?;
    Ok(EmOutcome {
        segmentation,
        trace,
        theta,
    })
}
