//! Adaptive density control: gradient-driven cloning and splitting with
//! opacity pruning, plus semantic-guided splitting of the most dissimilar
//! node of each semantic cluster. Children copy their parent's semantic
//! logits bit-for-bit, so decoded attributes are inherited exactly.

use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, GaussianPoint};
use crate::sh::SH_C0;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Accumulated densification statistics, aligned with the cloud.
#[derive(Debug, Clone, Default)]
pub struct DensifyStats {
    /// Sum of pixel-space positional gradient norms per point.
    pub grad_accum: Vec<f64>,
    /// Number of views the point contributed to.
    pub counts: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats {
            grad_accum: vec![0.0; n],
            counts: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    /// Adds one view's positional gradient norms for visible points.
    pub fn accumulate(&mut self, norms: &[f64], visible: &[bool]) {
        for i in 0..self.grad_accum.len() {
            if visible[i] {
                self.grad_accum[i] += norms[i];
                self.counts[i] += 1;
            }
        }
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.counts[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.counts[i] as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyConfig {
    /// Mean pixel-space positional gradient threshold for densification.
    pub grad_threshold: f64,
    /// Decoded-opacity prune threshold.
    pub opacity_threshold: f64,
    /// Clone/split decision: fraction of the scene extent.
    pub scale_split_threshold: f64,
    /// Scale divisor for split children.
    pub split_shrink: f64,
    pub seed: u64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            opacity_threshold: 0.05,
            scale_split_threshold: 0.01,
            split_shrink: 1.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensifyKind {
    Clone,
    Split,
    Prune,
    SemanticSplit,
}

impl DensifyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DensifyKind::Clone => "clone",
            DensifyKind::Split => "split",
            DensifyKind::Prune => "prune",
            DensifyKind::SemanticSplit => "semantic-split",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DensifyEvent {
    pub iteration: u64,
    pub kind: DensifyKind,
    /// Index in the cloud as it existed before this edit.
    pub parent: usize,
    /// Indices in the edited cloud.
    pub children: Vec<usize>,
}

impl DensifyEvent {
    pub fn log_line(&self) -> String {
        let kids: Vec<String> = self.children.iter().map(|c| c.to_string()).collect();
        format!(
            "{} {} {} {}",
            self.iteration,
            self.kind.as_str(),
            self.parent,
            kids.join(" ")
        )
    }
}

/// Result of a structural edit: the events plus, for every point of the new
/// cloud, the old index it came from (`None` for freshly created points).
/// The optimizer uses this to carry moments across the edit.
#[derive(Debug, Clone)]
pub struct CloudEdit {
    pub events: Vec<DensifyEvent>,
    pub source: Vec<Option<usize>>,
}

fn split_children(
    parent: &GaussianPoint,
    parent_idx: usize,
    shrink: f64,
    seed: u64,
    iteration: u64,
) -> [GaussianPoint; 2] {
    // Deterministic per (seed, iteration, parent): positions sampled inside
    // the parent Gaussian via Box-Muller.
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (parent_idx as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
    );
    let mut normal = || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    };
    let rot = parent.rotation.normalized().to_matrix();
    let scale = parent.scale();
    let mut mk = || {
        let xi = nalgebra::Vector3::new(normal(), normal(), normal());
        let offset = rot * scale.component_mul(&xi);
        let mut child = parent.clone();
        child.position = parent.position + offset;
        child.log_scale = parent.log_scale.map(|v| v - shrink.ln());
        child
    };
    [mk(), mk()]
}

/// Gradient-based densification and opacity pruning.
///
/// Points whose mean accumulated positional gradient exceeds the threshold
/// are cloned (small scale) or split in two (large scale, shrunken children
/// sampled inside the parent); points with decoded opacity below the prune
/// threshold are removed. Children copy the parent's semantic logits
/// exactly and record their provenance.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
    iteration: u64,
) -> Result<CloudEdit> {
    if stats.len() != cloud.len() {
        return Err(Error::Usage(format!(
            "densify stats length {} != cloud size {}",
            stats.len(),
            cloud.len()
        )));
    }
    let n = cloud.len();
    let scale_cut = cfg.scale_split_threshold * scene_extent;

    #[derive(Clone, Copy, PartialEq)]
    enum Action {
        Keep,
        Clone,
        Split,
        Prune,
    }
    let mut actions = vec![Action::Keep; n];
    for i in 0..n {
        let p = &cloud.points[i];
        if p.opacity() < cfg.opacity_threshold {
            actions[i] = Action::Prune;
            continue;
        }
        if stats.mean_grad(i) > cfg.grad_threshold {
            let max_scale = p.scale().max();
            actions[i] = if max_scale <= scale_cut {
                Action::Clone
            } else {
                Action::Split
            };
        }
    }

    let mut new_points = Vec::with_capacity(n + 16);
    let mut new_parents = Vec::with_capacity(n + 16);
    let mut source = Vec::with_capacity(n + 16);
    let mut events = Vec::new();
    // Survivors first (originals minus pruned minus split parents).
    let mut survivor_of = vec![usize::MAX; n];
    for i in 0..n {
        match actions[i] {
            Action::Keep | Action::Clone => {
                survivor_of[i] = new_points.len();
                new_points.push(cloud.points[i].clone());
                new_parents.push(cloud.parent_index[i]);
                source.push(Some(i));
            }
            Action::Prune => {
                events.push(DensifyEvent {
                    iteration,
                    kind: DensifyKind::Prune,
                    parent: i,
                    children: Vec::new(),
                });
            }
            Action::Split => {}
        }
    }
    // Clones and split children appended in parent order.
    for i in 0..n {
        match actions[i] {
            Action::Clone => {
                let idx = new_points.len();
                new_points.push(cloud.points[i].clone());
                new_parents.push(Some(i));
                source.push(None);
                events.push(DensifyEvent {
                    iteration,
                    kind: DensifyKind::Clone,
                    parent: i,
                    children: vec![idx],
                });
            }
            Action::Split => {
                let kids = split_children(&cloud.points[i], i, cfg.split_shrink, cfg.seed, iteration);
                let idx0 = new_points.len();
                for kid in kids {
                    new_points.push(kid);
                    new_parents.push(Some(i));
                    source.push(None);
                }
                events.push(DensifyEvent {
                    iteration,
                    kind: DensifyKind::Split,
                    parent: i,
                    children: vec![idx0, idx0 + 1],
                });
            }
            _ => {}
        }
    }
    cloud.points = new_points;
    cloud.parent_index = new_parents;
    Ok(CloudEdit { events, source })
}

/// Per-part clusters by argmax of the decoded semantic attribute.
#[derive(Debug, Clone)]
pub struct ClusterView {
    pub members: Vec<Vec<u32>>,
}

pub fn cluster_by_semantics(cloud: &GaussianCloud, parts: usize) -> ClusterView {
    let mut members = vec![Vec::new(); parts];
    for (i, p) in cloud.points.iter().enumerate() {
        let o = p.semantic();
        let mut best = 0usize;
        for (c, v) in o.iter().enumerate() {
            if *v > o[best] {
                best = c;
            }
        }
        members[best].push(i as u32);
    }
    ClusterView { members }
}

/// Basic render attribute used by the dissimilarity measure: decoded RGB at
/// degree zero plus decoded opacity.
fn node_attribute(p: &GaussianPoint) -> [f64; 4] {
    [
        p.sh[0] * SH_C0,
        p.sh[1] * SH_C0,
        p.sh[2] * SH_C0,
        p.opacity(),
    ]
}

fn attr_distance(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let mut acc = 0.0;
    for k in 0..4 {
        let d = a[k] - b[k];
        acc += d * d;
    }
    acc.sqrt()
}

/// The high-frequency node of each cluster: the member maximizing the mean
/// attribute dissimilarity to the rest of its cluster. Deterministic
/// tie-break on the smallest index; clusters with fewer than two members are
/// skipped with a warning.
pub fn high_frequency_nodes(cloud: &GaussianCloud, clusters: &ClusterView) -> Vec<Option<usize>> {
    clusters
        .members
        .iter()
        .enumerate()
        .map(|(part, members)| {
            if members.len() < 2 {
                if !members.is_empty() {
                    log::warn!("semantic cluster {part} has a single member; skipped");
                }
                return None;
            }
            let attrs: Vec<[f64; 4]> =
                members.iter().map(|&i| node_attribute(&cloud.points[i as usize])).collect();
            let inv = 1.0 / (members.len() - 1) as f64;
            let mut best = 0usize;
            let mut best_mean = f64::NEG_INFINITY;
            for i in 0..members.len() {
                let mut acc = 0.0;
                for j in 0..members.len() {
                    if i != j {
                        acc += attr_distance(&attrs[i], &attrs[j]);
                    }
                }
                let mean = acc * inv;
                if mean > best_mean {
                    best_mean = mean;
                    best = i;
                }
            }
            Some(members[best] as usize)
        })
        .collect()
}

/// Splits every selected high-frequency node regardless of gradient
/// statistics, with the same split rule as gradient densification.
pub fn semantic_guided_densify(
    cloud: &mut GaussianCloud,
    cfg: &DensifyConfig,
    parts: usize,
    iteration: u64,
) -> CloudEdit {
    let clusters = cluster_by_semantics(cloud, parts);
    let selected = high_frequency_nodes(cloud, &clusters);
    let n = cloud.len();
    let chosen: Vec<usize> = selected.into_iter().flatten().collect();
    let split_set: std::collections::BTreeSet<usize> = chosen.iter().copied().collect();

    let mut new_points = Vec::with_capacity(n + chosen.len());
    let mut new_parents = Vec::with_capacity(n + chosen.len());
    let mut source = Vec::with_capacity(n + chosen.len());
    let mut events = Vec::new();
    for i in 0..n {
        if !split_set.contains(&i) {
            new_points.push(cloud.points[i].clone());
            new_parents.push(cloud.parent_index[i]);
            source.push(Some(i));
        }
    }
    for &i in &split_set {
        let kids = split_children(&cloud.points[i], i, cfg.split_shrink, cfg.seed ^ 0x5EED, iteration);
        let idx0 = new_points.len();
        for kid in kids {
            new_points.push(kid);
            new_parents.push(Some(i));
            source.push(None);
        }
        events.push(DensifyEvent {
            iteration,
            kind: DensifyKind::SemanticSplit,
            parent: i,
            children: vec![idx0, idx0 + 1],
        });
    }
    cloud.points = new_points;
    cloud.parent_index = new_parents;
    CloudEdit { events, source }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_point(rng: &mut impl Rng, parts: usize) -> GaussianPoint {
        GaussianPoint {
            position: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            sh: vec![
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
            ],
            opacity_logit: rng.gen_range(-1.0..3.0),
            log_scale: Vector3::new(
                rng.gen_range(-5.0..-2.0),
                rng.gen_range(-5.0..-2.0),
                rng.gen_range(-5.0..-2.0),
            ),
            rotation: Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized(),
            semantic_logits: (0..parts).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        }
    }

    fn rand_cloud(rng: &mut impl Rng, n: usize, parts: usize) -> GaussianCloud {
        GaussianCloud::new((0..n).map(|_| rand_point(rng, parts)).collect())
    }

    #[test]
    fn quiet_cloud_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(151);
        let mut cloud = rand_cloud(&mut rng, 20, 5);
        // Opacities above threshold.
        for p in cloud.points.iter_mut() {
            p.opacity_logit = 2.0;
        }
        let before = cloud.clone();
        let stats = DensifyStats::new(20);
        let edit = densify_and_prune(&mut cloud, &stats, &DensifyConfig::default(), 2.0, 100)
            .unwrap();
        assert!(edit.events.is_empty());
        assert_eq!(cloud.points, before.points);
    }

    #[test]
    fn misaligned_stats_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(152);
        let mut cloud = rand_cloud(&mut rng, 5, 5);
        let stats = DensifyStats::new(4);
        assert!(matches!(
            densify_and_prune(&mut cloud, &stats, &DensifyConfig::default(), 2.0, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn split_children_inherit_semantics_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(153);
        let mut cloud = rand_cloud(&mut rng, 6, 5);
        for p in cloud.points.iter_mut() {
            p.opacity_logit = 2.0;
            // Large scale forces the split branch.
            p.log_scale = Vector3::new(-1.0, -1.0, -1.0);
        }
        let mut stats = DensifyStats::new(6);
        stats.grad_accum[3] = 1.0;
        stats.counts[3] = 1;
        let parent_sem = cloud.points[3].semantic_logits.clone();
        let parent_decoded = cloud.points[3].semantic();
        let edit = densify_and_prune(&mut cloud, &stats, &DensifyConfig::default(), 2.0, 7)
            .unwrap();
        let split: Vec<_> = edit
            .events
            .iter()
            .filter(|e| e.kind == DensifyKind::Split)
            .collect();
        assert_eq!(split.len(), 1);
        for &child in &split[0].children {
            assert_eq!(cloud.points[child].semantic_logits, parent_sem);
            assert_eq!(cloud.points[child].semantic(), parent_decoded);
            assert_eq!(cloud.parent_index[child], Some(3));
        }
        // Bookkeeping: before + clones + splits - prunes.
        assert_eq!(cloud.len(), 6 + 0 + 1 - 0);
    }

    #[test]
    fn same_inputs_give_bit_identical_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(154);
        let base = rand_cloud(&mut rng, 15, 5);
        let mut stats = DensifyStats::new(15);
        for i in 0..15 {
            stats.grad_accum[i] = rng.gen_range(0.0..1e-3);
            stats.counts[i] = 1;
        }
        let cfg = DensifyConfig::default();
        let mut a = base.clone();
        let mut b = base.clone();
        densify_and_prune(&mut a, &stats, &cfg, 2.0, 55).unwrap();
        densify_and_prune(&mut b, &stats, &cfg, 2.0, 55).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn bookkeeping_identity_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(155);
        for _ in 0..100 {
            let n = rng.gen_range(5..40);
            let mut cloud = rand_cloud(&mut rng, n, 5);
            let mut stats = DensifyStats::new(n);
            for i in 0..n {
                stats.grad_accum[i] = rng.gen_range(0.0..6e-4);
                stats.counts[i] = rng.gen_range(1..3);
            }
            let before = cloud.len();
            let cfg = DensifyConfig::default();
            let edit = densify_and_prune(&mut cloud, &stats, &cfg, 2.0, 9).unwrap();
            let clones = edit.events.iter().filter(|e| e.kind == DensifyKind::Clone).count();
            let splits = edit.events.iter().filter(|e| e.kind == DensifyKind::Split).count();
            let prunes = edit.events.iter().filter(|e| e.kind == DensifyKind::Prune).count();
            assert_eq!(cloud.len(), before + clones + splits - prunes);

            // Pruning never removes a point at or above the threshold.
            for e in edit.events.iter().filter(|e| e.kind == DensifyKind::Prune) {
                // Check against the pre-edit cloud via stats index: recompute
                // not possible here, so assert via source mapping instead:
                // pruned indices never appear as survivors.
                assert!(edit.source.iter().all(|s| *s != Some(e.parent)));
            }
            // Inheritance for every child.
            for e in &edit.events {
                for &c in &e.children {
                    assert_eq!(cloud.parent_index[c], Some(e.parent));
                }
            }
        }
    }

    #[test]
    fn prune_respects_threshold_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(156);
        let n = 30;
        let mut cloud = rand_cloud(&mut rng, n, 5);
        let cfg = DensifyConfig::default();
        let opacities: Vec<f64> = cloud.points.iter().map(|p| p.opacity()).collect();
        let stats = DensifyStats::new(n);
        let edit = densify_and_prune(&mut cloud, &stats, &cfg, 2.0, 0).unwrap();
        for e in &edit.events {
            if e.kind == DensifyKind::Prune {
                assert!(opacities[e.parent] < cfg.opacity_threshold);
            }
        }
        let pruned: Vec<usize> = edit
            .events
            .iter()
            .filter(|e| e.kind == DensifyKind::Prune)
            .map(|e| e.parent)
            .collect();
        for (i, o) in opacities.iter().enumerate() {
            assert_eq!(pruned.contains(&i), *o < cfg.opacity_threshold);
        }
    }

    #[test]
    fn hf_node_identical_cluster_ties_to_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(157);
        let p = rand_point(&mut rng, 5);
        let cloud = GaussianCloud::new(vec![p.clone(), p.clone(), p]);
        let clusters = cluster_by_semantics(&cloud, 5);
        let hf = high_frequency_nodes(&cloud, &clusters);
        let non_empty: Vec<_> = hf.iter().flatten().collect();
        assert_eq!(non_empty.len(), 1);
        assert_eq!(*non_empty[0], 0);
    }

    #[test]
    fn hf_node_picks_color_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(158);
        let mut a = rand_point(&mut rng, 5);
        a.semantic_logits = vec![5.0, 0.0, 0.0, 0.0, 0.0];
        let b = a.clone();
        let mut c = a.clone();
        c.sh = vec![a.sh[0] + 3.0, a.sh[1], a.sh[2]];
        let cloud = GaussianCloud::new(vec![a, b, c]);
        let clusters = cluster_by_semantics(&cloud, 5);
        let hf = high_frequency_nodes(&cloud, &clusters);
        assert_eq!(hf[0], Some(2));
    }

    #[test]
    fn hf_nodes_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(159);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let cloud = rand_cloud(&mut rng, n, 5);
            let clusters = cluster_by_semantics(&cloud, 5);
            let got = high_frequency_nodes(&cloud, &clusters);
            // O(|C|²) oracle with explicit attribute recomputation.
            for (part, members) in clusters.members.iter().enumerate() {
                if members.len() < 2 {
                    assert_eq!(got[part], None);
                    continue;
                }
                let attr = |i: u32| -> [f64; 4] {
                    let p = &cloud.points[i as usize];
                    [
                        p.sh[0] * SH_C0,
                        p.sh[1] * SH_C0,
                        p.sh[2] * SH_C0,
                        crate::gaussian::sigmoid(p.opacity_logit),
                    ]
                };
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for &i in members {
                    let mut acc = 0.0;
                    for &j in members {
                        if i != j {
                            let (ai, aj) = (attr(i), attr(j));
                            acc += (0..4)
                                .map(|k| (ai[k] - aj[k]) * (ai[k] - aj[k]))
                                .sum::<f64>()
                                .sqrt();
                        }
                    }
                    let mean = acc / (members.len() - 1) as f64;
                    if mean > best.0 {
                        best = (mean, i as usize);
                    }
                }
                assert_eq!(got[part], Some(best.1), "part {part}");
            }
        }
    }

    #[test]
    fn semantic_guided_splits_one_per_populated_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(160);
        let mut cloud = GaussianCloud::new(Vec::new());
        // Three parts with >= 2 members, one part with exactly 1, one empty.
        for part in 0..4usize {
            let count = if part == 3 { 1 } else { 3 };
            for _ in 0..count {
                let mut p = rand_point(&mut rng, 5);
                p.semantic_logits = vec![0.0; 5];
                p.semantic_logits[part] = 6.0;
                cloud.points.push(p);
                cloud.parent_index.push(None);
            }
        }
        let before = cloud.len();
        let edit = semantic_guided_densify(&mut cloud, &DensifyConfig::default(), 5, 42);
        assert_eq!(edit.events.len(), 3);
        assert!(edit.events.iter().all(|e| e.kind == DensifyKind::SemanticSplit));
        assert_eq!(cloud.len(), before + 3);
        for e in &edit.events {
            for &c in &e.children {
                assert_eq!(cloud.parent_index[c], Some(e.parent));
            }
        }
    }
}
