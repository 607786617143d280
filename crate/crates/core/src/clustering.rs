//! Per-shape feature bank, spectral clustering and cluster prototypes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::ShapeId;
use crate::linalg::symmetric_eigen;
use crate::metrics::best_permutation;
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralConfig {
    /// Affinity bandwidth on the cosine-gap scale.
    pub sigma: f64,
    pub kmeans_restarts: usize,
    pub jacobi_tol: f64,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            sigma: 0.5,
            kmeans_restarts: 10,
            jacobi_tol: 1e-10,
            seed: 0,
        }
    }
}

/// Random unit vector of length `m`.
pub fn random_unit(m: usize, rng: &mut Stream) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub wcss: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_plus_plus(x: ArrayView2<f64>, k: usize, rng: &mut Stream) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(x.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(x: ArrayView2<f64>, mut centroids: Array2<f64>) -> KMeansResult {
    let (n, m) = x.dim();
    let k = centroids.nrows();
    let mut labels = vec![0; n];
    for _ in 0..100 {
        for i in 0..n {
            labels[i] = nearest_centroid(x.row(i), &centroids).0;
        }
        let mut sums = Array2::<f64>::zeros((k, m));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(labels[i]).scaled_add(1.0, &x.row(i));
            counts[labels[i]] += 1;
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                next.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // re-seed at the point farthest from its own centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| {
                        sq_dist(x.row(a), centroids.row(labels[a]))
                            .total_cmp(&sq_dist(x.row(b), centroids.row(labels[b])))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                taken[far] = true;
                next.row_mut(c).assign(&x.row(far));
            }
        }
        let shift = (0..k).map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt()).fold(0.0, f64::max);
        centroids = next;
        if shift < 1e-6 {
            break;
        }
    }
    let mut wcss = 0.0;
    for i in 0..n {
        let (l, d) = nearest_centroid(x.row(i), &centroids);
        labels[i] = l;
        wcss += d;
    }
    KMeansResult { labels, centroids, wcss }
}

/// Best of `restarts` k-means++ / Lloyd runs by within-cluster sum of squares.
pub fn kmeans(x: ArrayView2<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || k > x.nrows() {
        return Err(Error::invalid(format!("k-means with k={k} on {} rows", x.nrows())));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut stream = rng::derive(seed, &[r as u64, rng::tag::CLUSTER]);
        let res = lloyd(x, kmeans_plus_plus(x, k, &mut stream));
        if best.as_ref().is_none_or(|b| res.wcss < b.wcss) {
            best = Some(res);
        }
    }
    Ok(best.unwrap())
}

/// Relabels clusters in order of first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = vec![None; labels.iter().max().map_or(0, |m| m + 1)];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            *map[l].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Spectral clustering of unit-norm rows into `c` clusters.
pub fn spectral_cluster(bank: ArrayView2<f64>, c: usize, cfg: &SpectralConfig) -> Result<Vec<usize>> {
    let n = bank.nrows();
    if c == 0 || c > n {
        return Err(Error::invalid(format!("cannot form {c} clusters from {n} rows")));
    }
    if c == 1 {
        return Ok(vec![0; n]);
    }
    if !(cfg.sigma > 0.0) {
        return Err(Error::Config(format!("affinity bandwidth must be positive (got {})", cfg.sigma)));
    }
    let gram = bank.dot(&bank.t());
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[i * n + j] = (-(1.0 - gram[[i, j]]) / cfg.sigma).exp();
            }
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let isolated: Vec<bool> = deg.iter().map(|&d| !(d > 1e-300)).collect();
    let mut lap = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let norm = if isolated[i] || isolated[j] {
                0.0
            } else {
                a[i * n + j] / (deg[i] * deg[j]).sqrt()
            };
            lap[i * n + j] = if i == j { 1.0 } else { 0.0 } - norm;
        }
    }
    let (_, vecs) = symmetric_eigen(&lap, n, cfg.jacobi_tol);
    let mut emb = Array2::from_shape_fn((n, c), |(i, k)| vecs[i * n + k]);
    for mut row in emb.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 1e-12 {
            row /= norm;
        }
    }
    let mut labels = kmeans(emb.view(), c, cfg.seed, cfg.kmeans_restarts)?.labels;

    if isolated.iter().any(|&z| z) {
        let connected: Vec<usize> = (0..n).filter(|&i| !isolated[i]).collect();
        if !connected.is_empty() {
            let protos = prototypes_from(bank, &labels, c, &connected);
            for i in (0..n).filter(|&i| isolated[i]) {
                labels[i] = (0..c)
                    .filter(|&k| protos[k].is_some())
                    .max_by(|&x, &y| {
                        let px = protos[x].as_ref().unwrap().dot(&bank.row(i));
                        let py = protos[y].as_ref().unwrap().dot(&bank.row(i));
                        px.total_cmp(&py).then(y.cmp(&x))
                    })
                    .unwrap_or(0);
            }
        }
    }
    Ok(canonical(&labels))
}

fn prototypes_from(bank: ArrayView2<f64>, labels: &[usize], c: usize, rows: &[usize]) -> Vec<Option<Array1<f64>>> {
    let mut sums = vec![Array1::<f64>::zeros(bank.ncols()); c];
    let mut counts = vec![0; c];
    for &i in rows {
        sums[labels[i]] += &bank.row(i);
        counts[labels[i]] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            let norm = s.dot(&s).sqrt();
            (n > 0 && norm > 1e-12).then(|| s / norm)
        })
        .collect()
}

/// `normalize(mean of members)` per cluster; empty clusters get a random unit vector.
pub fn compute_prototypes(bank: ArrayView2<f64>, assignments: &[usize], c: usize, rng: &mut Stream) -> Result<Array2<f64>> {
    if assignments.len() != bank.nrows() {
        return Err(Error::invalid("one assignment per bank row required"));
    }
    if let Some(&bad) = assignments.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("assignment {bad} out of range for {c} clusters")));
    }
    let all: Vec<usize> = (0..bank.nrows()).collect();
    let protos = prototypes_from(bank, assignments, c, &all);
    let mut out = Array2::zeros((c, bank.ncols()));
    for (k, p) in protos.into_iter().enumerate() {
        let row = p.unwrap_or_else(|| {
            log::warn!("cluster {k} is empty; resampling its prototype");
            random_unit(bank.ncols(), rng)
        });
        out.row_mut(k).assign(&row);
    }
    Ok(out)
}

/// Stored per-shape global features with their cluster state.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub shape_ids: Vec<ShapeId>,
    pub bank: Array2<f64>,
    pub assignments: Vec<usize>,
    pub prototypes: Array2<f64>,
    pub c: usize,
    pub epoch: u64,
}

/// Random unit rows, clustered once.
pub fn init_bank(shape_ids: Vec<ShapeId>, m: usize, c: usize, cfg: &SpectralConfig, rng: &mut Stream) -> Result<MemoryBank> {
    let n = shape_ids.len();
    if c == 0 || n < c {
        return Err(Error::invalid(format!("{n} shapes cannot form {c} clusters")));
    }
    let mut bank = Array2::zeros((n, m));
    for mut row in bank.rows_mut() {
        row.assign(&random_unit(m, rng));
    }
    let assignments = spectral_cluster(bank.view(), c, cfg)?;
    let prototypes = compute_prototypes(bank.view(), &assignments, c, rng)?;
    Ok(MemoryBank {
        shape_ids,
        bank,
        assignments,
        prototypes,
        c,
        epoch: 0,
    })
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.shape_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape_ids.is_empty()
    }

    pub fn index_of(&self, id: &ShapeId) -> Result<usize> {
        self.shape_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownShape(id.to_string()))
    }

    /// Replaces the stored feature of `id` with `g`.
    pub fn update(&mut self, id: &ShapeId, g: ArrayView1<f64>) -> Result<()> {
        let i = self.index_of(id)?;
        self.update_row(i, g)
    }

    pub fn update_row(&mut self, i: usize, g: ArrayView1<f64>) -> Result<()> {
        if g.len() != self.bank.ncols() {
            return Err(Error::ShapeMismatch {
                op: "bank update",
                detail: format!("feature has {} channels, bank {}", g.len(), self.bank.ncols()),
            });
        }
        let n = g.dot(&g).sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("bank features must be unit norm (got {n})")));
        }
        self.bank.row_mut(i).assign(&g);
        Ok(())
    }

    /// Re-clusters the bank, aligns the new labels to the previous ones,
    /// recomputes prototypes and returns how many shapes changed cluster.
    pub fn recluster(&mut self, cfg: &SpectralConfig, rng: &mut Stream) -> Result<usize> {
        let fresh = spectral_cluster(self.bank.view(), self.c, cfg)?;
        let map = best_permutation(&fresh, &self.assignments, self.c)?;
        let aligned: Vec<usize> = fresh.iter().map(|&l| map[l]).collect();
        let changes = aligned.iter().zip(&self.assignments).filter(|(a, b)| a != b).count();
        self.assignments = aligned;
        self.prototypes = compute_prototypes(self.bank.view(), &self.assignments, self.c, rng)?;
        self.epoch += 1;
        Ok(changes)
    }

    /// Checks unit norms and label ranges.
    pub fn validate(&self) -> Result<()> {
        let unit = |m: &Array2<f64>| m.rows().into_iter().all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= 1e-6);
        if !unit(&self.bank) || !unit(&self.prototypes) {
            return Err(Error::invalid("bank and prototype rows must be unit norm"));
        }
        if self.assignments.len() != self.len() || self.assignments.iter().any(|&y| y >= self.c) {
            return Err(Error::invalid("bank assignments out of range"));
        }
        Ok(())
    }
}
