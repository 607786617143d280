//! Evaluation: coverage matching, FNE/FPE, WME, preference downsampling,
//! assignment retention and label agreement scores.

use std::str::FromStr;

use rand::seq::index::sample_weighted;

use crate::error::{Error, Result};
use crate::geometry::{centroid, dist, PointCloud, Vec3};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageResult {
    /// `N_c`.
    pub covered: usize,
    /// `(ground-truth index, detected index)`.
    pub pairs: Vec<(usize, usize)>,
    pub r: f64,
    pub diameter: f64,
}

/// Index of the nearest point of `set` to `p` (lowest index on ties) and its distance.
fn nearest(set: &[Vec3], p: Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in set.iter().enumerate() {
        let d = dist(*q, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Pairs `(gt, det, distance)` where `gt` may be covered by `det`: within
/// `r·D`, and no other ground-truth point is strictly closer to `det`.
fn coverage_edges(gt: &[Vec3], det: &[Vec3], r: f64, diameter: f64) -> Vec<(usize, usize, f64)> {
    let tol = r * diameter;
    let mut edges = vec![];
    for (j, q) in det.iter().enumerate() {
        let (_, best) = nearest(gt, *q);
        for (i, g) in gt.iter().enumerate() {
            let d = dist(*g, *q);
            if d <= tol && d <= best {
                edges.push((i, j, d));
            }
        }
    }
    edges
}

fn check_tolerance(r: f64, diameter: f64) -> Result<()> {
    if !(r >= 0.0) || !(diameter > 0.0) {
        return Err(Error::invalid(format!("coverage needs r >= 0 and D > 0 (got r={r}, D={diameter})")));
    }
    Ok(())
}

/// One-to-one coverage of ground truth `gt` (Q̂) by detections `det` (Q).
///
/// Candidate pairs are taken nearest first (ties by index) while both ends
/// are free; an augmenting-path pass then resolves equidistant ties.
pub fn match_coverage(gt: &[Vec3], det: &[Vec3], r: f64, diameter: f64) -> Result<CoverageResult> {
    check_tolerance(r, diameter)?;
    let mut edges = coverage_edges(gt, det, r, diameter);
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    let mut gt_match: Vec<Option<usize>> = vec![None; gt.len()];
    let mut det_match: Vec<Option<usize>> = vec![None; det.len()];
    for &(i, j, _) in &edges {
        if gt_match[i].is_none() && det_match[j].is_none() {
            gt_match[i] = Some(j);
            det_match[j] = Some(i);
        }
    }

    let mut adj = vec![vec![]; det.len()];
    for &(i, j, _) in &edges {
        adj[j].push(i);
    }
    fn augment(j: usize, adj: &[Vec<usize>], seen: &mut [bool], gt_match: &mut [Option<usize>], det_match: &mut [Option<usize>]) -> bool {
        for &i in &adj[j] {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            if gt_match[i].is_none() || augment(gt_match[i].unwrap(), adj, seen, gt_match, det_match) {
                gt_match[i] = Some(j);
                det_match[j] = Some(i);
                return true;
            }
        }
        false
    }
    for j in 0..det.len() {
        if det_match[j].is_none() {
            let mut seen = vec![false; gt.len()];
            augment(j, &adj, &mut seen, &mut gt_match, &mut det_match);
        }
    }

    let pairs: Vec<(usize, usize)> = gt_match
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect();
    Ok(CoverageResult {
        covered: pairs.len(),
        pairs,
        r,
        diameter,
    })
}

/// Exhaustive maximum coverage over all one-to-one assignments. Exponential;
/// meant for sets of at most about 8 points.
pub fn brute_force_coverage(gt: &[Vec3], det: &[Vec3], r: f64, diameter: f64) -> Result<usize> {
    check_tolerance(r, diameter)?;
    let covers = |i: usize, j: usize| {
        let d = dist(gt[i], det[j]);
        d <= r * diameter && gt.iter().all(|g| dist(*g, det[j]) >= d)
    };
    fn search(j: usize, n_det: usize, used: &mut Vec<bool>, covers: &dyn Fn(usize, usize) -> bool) -> usize {
        if j == n_det {
            return 0;
        }
        let mut best = search(j + 1, n_det, used, covers);
        for i in 0..used.len() {
            if !used[i] && covers(i, j) {
                used[i] = true;
                best = best.max(1 + search(j + 1, n_det, used, covers));
                used[i] = false;
            }
        }
        best
    }
    Ok(search(0, det.len(), &mut vec![false; gt.len()], &covers))
}

/// `(1 − N_c/|Q̂|, 1 − N_c/|Q|)`.
pub fn fne_fpe(gt: &[Vec3], det: &[Vec3], r: f64, diameter: f64) -> Result<(f64, f64)> {
    if gt.is_empty() || det.is_empty() {
        return Err(Error::invalid("FNE/FPE are undefined for an empty point set"));
    }
    let c = match_coverage(gt, det, r, diameter)?.covered as f64;
    Ok((1.0 - c / gt.len() as f64, 1.0 - c / det.len() as f64))
}

/// Marked regions per annotator and detected regions on one object.
#[derive(Clone, Debug, Default)]
pub struct RegionAnnotationSet {
    pub annotators: Vec<Vec<Vec<Vec3>>>,
    pub detected: Vec<Vec<Vec3>>,
}

/// `1 − Σ N^c / Σ T^h` from `(T^h, N^c)` per annotator.
pub fn wme_counts(counts: &[(usize, usize)]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::invalid("WME needs at least one annotator"));
    }
    let total: usize = counts.iter().map(|c| c.0).sum();
    let covered: usize = counts.iter().map(|c| c.1).sum();
    if total == 0 {
        return Err(Error::invalid("WME needs at least one marked region"));
    }
    if counts.iter().any(|c| c.1 > c.0) {
        return Err(Error::invalid("covered count exceeds marked regions"));
    }
    Ok(1.0 - covered as f64 / total as f64)
}

/// Region-level WME: regions are compared through their centroids with the
/// `r·D` coverage rule.
pub fn wme(set: &RegionAnnotationSet, r: f64, diameter: f64) -> Result<f64> {
    if set.annotators.iter().flatten().chain(&set.detected).any(|reg| reg.is_empty()) {
        return Err(Error::invalid("regions must be nonempty"));
    }
    let det: Vec<Vec3> = set.detected.iter().map(|reg| centroid(reg)).collect();
    let counts = set
        .annotators
        .iter()
        .map(|regions| {
            let marked: Vec<Vec3> = regions.iter().map(|reg| centroid(reg)).collect();
            Ok((marked.len(), match_coverage(&marked, &det, r, diameter)?.covered))
        })
        .collect::<Result<Vec<_>>>()?;
    wme_counts(&counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PreferenceMode {
    Distinctiveness,
    Curvature,
    Random,
}

impl PreferenceMode {
    pub const ALL: [PreferenceMode; 3] = [PreferenceMode::Distinctiveness, PreferenceMode::Curvature, PreferenceMode::Random];

    pub fn name(self) -> &'static str {
        match self {
            PreferenceMode::Distinctiveness => "distinctiveness",
            PreferenceMode::Curvature => "curvature",
            PreferenceMode::Random => "random",
        }
    }
}

impl FromStr for PreferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distinctiveness" => Ok(PreferenceMode::Distinctiveness),
            "curvature" => Ok(PreferenceMode::Curvature),
            "random" => Ok(PreferenceMode::Random),
            _ => Err(Error::invalid(format!("unknown preference mode `{s}`"))),
        }
    }
}

/// Floor added to every preference score.
pub const PREFERENCE_FLOOR: f64 = 1e-3;

/// Keeps `k` points drawn without replacement with probability ∝ score + ε.
/// Returns the retained points in their original order and their indices.
pub fn downsample_with_preference(
    pc: &PointCloud,
    d: &[f64],
    curvature: &[f64],
    mode: PreferenceMode,
    k: usize,
    rng: &mut Stream,
) -> Result<(PointCloud, Vec<usize>)> {
    let n = pc.len();
    if k > n {
        return Err(Error::invalid(format!("cannot keep {k} of {n} points")));
    }
    let scores: Vec<f64> = match mode {
        PreferenceMode::Distinctiveness => d.to_vec(),
        PreferenceMode::Curvature => curvature.to_vec(),
        PreferenceMode::Random => vec![1.0; n],
    };
    if scores.len() != n {
        return Err(Error::invalid(format!("{} scores for {n} points", scores.len())));
    }
    if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid("preference scores must be finite and nonnegative"));
    }
    let mut idx = sample_weighted(rng, n, |i| scores[i] + PREFERENCE_FLOOR, k)
        .map_err(|e| Error::invalid(format!("weighted sampling failed: {e}")))?
        .into_vec();
    idx.sort_unstable();
    Ok((pc.subset(&idx), idx))
}

/// Retention accuracy per `(mode, budget)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionTable {
    pub budgets: Vec<usize>,
    pub modes: Vec<PreferenceMode>,
    /// `accuracy[m][b]` for `modes[m]`, `budgets[b]`.
    pub accuracy: Vec<Vec<f64>>,
}

impl RetentionTable {
    pub fn get(&self, mode: PreferenceMode, budget: usize) -> Option<f64> {
        let m = self.modes.iter().position(|&x| x == mode)?;
        let b = self.budgets.iter().position(|&x| x == budget)?;
        Some(self.accuracy[m][b])
    }
}

/// Per-shape inputs to [`cluster_retention`].
pub struct RetentionShape<'a> {
    pub cloud: &'a PointCloud,
    pub distinctiveness: &'a [f64],
    pub curvature: &'a [f64],
    /// Assignment of the full cloud.
    pub baseline: usize,
}

/// Fraction of shapes whose assignment survives preference downsampling.
/// All modes share the random stream of each `(shape, budget)`. A subset
/// that `assign` rejects as degenerate counts as lost.
pub fn cluster_retention<F>(
    shapes: &[RetentionShape<'_>],
    budgets: &[usize],
    modes: &[PreferenceMode],
    seed: u64,
    assign: F,
) -> Result<RetentionTable>
where
    F: Fn(&PointCloud) -> Result<usize> + Sync,
{
    use rayon::prelude::*;
    if shapes.is_empty() {
        return Err(Error::invalid("retention over zero shapes"));
    }
    let mut accuracy = vec![vec![0.0; budgets.len()]; modes.len()];
    for (m, &mode) in modes.iter().enumerate() {
        for (b, &k) in budgets.iter().enumerate() {
            let kept: Vec<bool> = shapes
                .par_iter()
                .enumerate()
                .map(|(s, shape)| {
                    let mut r = rng::derive(seed, &[s as u64, k as u64, rng::tag::EVAL]);
                    let (sub, _) = downsample_with_preference(shape.cloud, shape.distinctiveness, shape.curvature, mode, k, &mut r)?;
                    match assign(&sub) {
                        Ok(c) => Ok(c == shape.baseline),
                        // a subset the model cannot encode keeps no assignment
                        Err(Error::Degenerate(_)) => Ok(false),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            accuracy[m][b] = kept.iter().filter(|&&x| x).count() as f64 / shapes.len() as f64;
        }
    }
    Ok(RetentionTable {
        budgets: budgets.to_vec(),
        modes: modes.to_vec(),
        accuracy,
    })
}

fn check_labels(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("no labels to compare"));
    }
    Ok(())
}

/// Maximum-weight assignment on a square weight matrix (Hungarian method).
/// Returns `col[row]`.
pub fn max_weight_assignment(weight: &[Vec<f64>]) -> Vec<usize> {
    let n = weight.len();
    if n == 0 {
        return vec![];
    }
    let max = weight.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    // minimize cost = max − weight; 1-indexed potentials
    let cost = |i: usize, j: usize| max - weight[i - 1][j - 1];
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Label map `pred → truth` maximizing agreement.
pub fn best_permutation(pred: &[usize], truth: &[usize], c: usize) -> Result<Vec<usize>> {
    check_labels(pred, truth)?;
    let size = c.max(pred.iter().chain(truth).max().unwrap() + 1);
    let mut conf = vec![vec![0.0; size]; size];
    for (&p, &t) in pred.iter().zip(truth) {
        conf[p][t] += 1.0;
    }
    Ok(max_weight_assignment(&conf))
}

/// Agreement after the best relabeling of `pred`.
pub fn best_permutation_accuracy(pred: &[usize], truth: &[usize], c: usize) -> Result<f64> {
    let map = best_permutation(pred, truth, c)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| map[**p] == **t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Adjusted Rand index (pair-counting form).
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_labels(pred, truth)?;
    let a = pred.iter().max().unwrap() + 1;
    let b = truth.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; b]; a];
    for (&p, &t) in pred.iter().zip(truth) {
        table[p][t] += 1;
    }
    let pairs = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&x| pairs(x)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..b).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(pred.len() as u64);
    let expected = rows * cols / total.max(1.0);
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        // both partitions trivial (one cluster or all singletons)
        return Ok(if (index - expected).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn coverage_examples() {
        let gt = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let det = [[0.05, 0.0, 0.0]];
        let c = match_coverage(&gt, &det, 0.1, 2.0).unwrap();
        assert_eq!(c.covered, 1);
        assert_eq!(c.pairs, vec![(0, 0)]);
        assert_eq!(fne_fpe(&gt, &det, 0.1, 2.0).unwrap(), (0.5, 0.0));
        assert_eq!(match_coverage(&gt, &gt, 0.0, 2.0).unwrap().covered, 2);
        assert_eq!(fne_fpe(&gt, &gt, 0.0, 2.0).unwrap(), (0.0, 0.0));
        assert_eq!(match_coverage(&gt, &[[5.0, 0.0, 0.0]], 0.0, 2.0).unwrap().covered, 0);
        assert!(fne_fpe(&gt, &[], 0.1, 2.0).is_err());
        assert_eq!(match_coverage(&[], &gt, 0.1, 2.0).unwrap().covered, 0);
    }

    #[test]
    fn detection_closer_to_another_truth_point_does_not_cover() {
        // det is within tolerance of gt[0] but strictly closer to gt[1]
        let gt = [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0]];
        let det = [[0.2, 0.0, 0.0]];
        let c = match_coverage(&gt, &det, 0.2, 1.0).unwrap();
        assert_eq!(c.pairs, vec![(1, 0)]);
    }

    #[test]
    fn equidistant_ties_resolved_optimally() {
        // det 0 is equally close to gt 0 and gt 1; det 1 only covers gt 0
        let gt = [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let det = [[0.0, 0.0, 0.0], [-2.5, 0.0, 0.0]];
        let c = match_coverage(&gt, &det, 1.0, 2.0).unwrap();
        assert_eq!(c.covered, 2);
        assert_eq!(brute_force_coverage(&gt, &det, 1.0, 2.0).unwrap(), 2);
    }

    fn random_points(r: &mut Stream, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn coverage_is_scale_invariant(seed in 0u64..1000, s in 0.1f64..10.0) {
            let mut r = rng::stream(seed);
            let (a, b) = (random_points(&mut r, 6), random_points(&mut r, 5));
            let scale = |v: &[Vec3]| v.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect::<Vec<_>>();
            let x = fne_fpe(&a, &b, 0.1, 1.7).unwrap();
            let y = fne_fpe(&scale(&a), &scale(&b), 0.1, 1.7 * s).unwrap();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn matched_pairs_respect_tolerance(seed in 0u64..1000) {
            let mut r = rng::stream(seed);
            let (a, b) = (random_points(&mut r, 8), random_points(&mut r, 8));
            let c = match_coverage(&a, &b, 0.15, 1.0).unwrap();
            prop_assert!(c.covered <= 8);
            for (i, j) in c.pairs {
                prop_assert!(dist(a[i], b[j]) <= 0.15);
            }
        }
    }

    #[test]
    fn subset_detection_has_zero_fpe_at_zero_tolerance() {
        let mut r = rng::stream(3);
        let gt = random_points(&mut r, 8);
        let det = gt[2..6].to_vec();
        assert_eq!(fne_fpe(&gt, &det, 0.0, 1.0).unwrap().1, 0.0);
    }

    #[test]
    fn wme_examples() {
        assert!((wme_counts(&[(2, 2), (3, 1)]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(wme_counts(&[(4, 4)]).unwrap(), 0.0);
        assert!(wme_counts(&[]).is_err());
        let region = |c: f64| vec![[c, 0.0, 0.0], [c, 0.1, 0.0]];
        let set = RegionAnnotationSet {
            annotators: vec![vec![region(0.0), region(1.0)]],
            detected: vec![region(0.0)],
        };
        let w = wme(&set, 0.1, 2.0).unwrap();
        let marked: Vec<Vec3> = set.annotators[0].iter().map(|r| centroid(r)).collect();
        let det: Vec<Vec3> = set.detected.iter().map(|r| centroid(r)).collect();
        assert_eq!(w, fne_fpe(&marked, &det, 0.1, 2.0).unwrap().0);
        assert_eq!(w, 0.5);
    }

    fn cloud(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| [i as f64, 0.0, 0.0]).collect(), "c").unwrap()
    }

    #[test]
    fn constant_scores_match_random_mode() {
        let pc = cloud(50);
        let d = vec![0.3; 50];
        let a = downsample_with_preference(&pc, &d, &d, PreferenceMode::Distinctiveness, 10, &mut rng::stream(8)).unwrap();
        let b = downsample_with_preference(&pc, &d, &d, PreferenceMode::Random, 10, &mut rng::stream(8)).unwrap();
        assert_eq!(a.1, b.1);
        let all = downsample_with_preference(&pc, &d, &d, PreferenceMode::Random, 50, &mut rng::stream(8)).unwrap();
        assert_eq!(all.1, (0..50).collect::<Vec<_>>());
        assert!(downsample_with_preference(&pc, &d, &d, PreferenceMode::Random, 51, &mut rng::stream(8)).is_err());
        assert!(a.1.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn two_point_preference_frequency() {
        let pc = cloud(2);
        let d = [1.0, 0.0];
        let mut r = rng::stream(9);
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| downsample_with_preference(&pc, &d, &d, PreferenceMode::Distinctiveness, 1, &mut r).unwrap().1 == [0])
            .count();
        let p = (1.0 + PREFERENCE_FLOOR) / (1.0 + 2.0 * PREFERENCE_FLOOR);
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!((hits as f64 - trials as f64 * p).abs() <= 3.0 * sigma.max(1.0), "{hits}");
    }

    fn exhaustive_accuracy(pred: &[usize], truth: &[usize], c: usize) -> f64 {
        fn perms(c: usize) -> Vec<Vec<usize>> {
            if c == 0 {
                return vec![vec![]];
            }
            let mut out = vec![];
            for p in perms(c - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, c - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(c)
            .iter()
            .map(|m| pred.iter().zip(truth).filter(|(p, t)| m[**p] == **t).count() as f64 / pred.len() as f64)
            .fold(0.0, f64::max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn hungarian_matches_exhaustive(seed in 0u64..10_000, c in 1usize..7) {
            let mut r = rng::stream(seed);
            let truth: Vec<usize> = (0..40).map(|_| r.random_range(0..c)).collect();
            let pred: Vec<usize> = truth.iter().map(|&t| if r.random_bool(0.6) { (t * 5 + 1) % c } else { r.random_range(0..c) }).collect();
            let fast = best_permutation_accuracy(&pred, &truth, c).unwrap();
            prop_assert!((fast - exhaustive_accuracy(&pred, &truth, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn label_agreement_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(best_permutation_accuracy(&truth, &truth, 3).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&truth, &truth).unwrap(), 1.0);
        let relabeled = [2, 2, 0, 0, 1, 1];
        assert_eq!(best_permutation_accuracy(&relabeled, &truth, 3).unwrap(), 1.0);
        assert!((adjusted_rand_index(&relabeled, &truth).unwrap() - 1.0).abs() < 1e-12);
        assert!(best_permutation_accuracy(&[0], &truth, 3).is_err());
        // sklearn reference: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714
        assert!((adjusted_rand_index(&[0, 0, 1, 2], &[0, 0, 1, 1]).unwrap() - 0.571_428_571_4).abs() < 1e-9);
    }

    #[test]
    fn random_labels_have_zero_ari() {
        let mut r = rng::stream(10);
        let a: Vec<usize> = (0..10_000).map(|i| i % 2).collect();
        let b: Vec<usize> = (0..10_000).map(|_| r.random_range(0..2)).collect();
        assert!(adjusted_rand_index(&a, &b).unwrap().abs() < 0.05);
    }
}
