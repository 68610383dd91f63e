//! Semi-local training pools: per-location climatology/error features and k-means.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emos::TrainingCase;
use crate::ensemble::{ForecastCase, LocationId};
use crate::error::{Error, Result};

pub const DEFAULT_QUANTILES: usize = 12;
pub const MAX_LLOYD_ITERATIONS: usize = 100;
/// Average number of locations per cluster used to cap the cluster count.
pub const LOCATIONS_PER_CLUSTER: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub location_id: LocationId,
    /// `q` observation quantiles followed by `q` ensemble-mean error quantiles.
    pub features: Vec<f64>,
}

/// Linear interpolation between order statistics at `level` in `[0, 1]` (sorted input).
pub fn interpolated_quantile(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantiles at levels `i/(q+1)`, `i = 1..=q`.
pub fn equidistant_quantiles(values: &[f64], q: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..=q)
        .map(|i| interpolated_quantile(&sorted, i as f64 / (q + 1) as f64))
        .collect()
}

/// Features of one location from its training cases.
pub fn extract_features(location_id: &LocationId, cases: &[TrainingCase], q: usize) -> Result<FeatureVector> {
    if q == 0 || cases.len() < q {
        return Err(Error::insufficient(
            q.max(1),
            cases.len(),
            format!("cases for location {location_id}"),
        ));
    }
    let obs: Vec<f64> = cases.iter().map(|c| c.observation).collect();
    let err: Vec<f64> = cases.iter().map(|c| c.overall_mean - c.observation).collect();
    let mut features = equidistant_quantiles(&obs, q);
    features.extend(equidistant_quantiles(&err, q));
    Ok(FeatureVector {
        location_id: location_id.clone(),
        features,
    })
}

/// Per-coordinate centring and scaling fitted across locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut means = vec![0.0; dim];
        for r in rows {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut sds = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in sds.iter_mut().zip(r).zip(&means) {
                *s += (v - m).powi(2) / n;
            }
        }
        sds.iter_mut().for_each(|s| *s = s.sqrt());
        Standardizer { means, sds }
    }

    /// Constant coordinates map to 0.
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((v, m), s)| if *s > 1e-12 { (v - m) / s } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub wcss_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn wcss(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

/// D²-weighted seeding. Stops early if every remaining point coincides with a centre.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                chosen = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[chosen].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[chosen]));
        }
    }
    centroids
}

/// Lloyd's algorithm with D²-seeded initialisation, deterministic for a fixed seed.
/// May return fewer than `k` centroids when the data has fewer distinct points.
pub fn kmeans_points(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidClusterCount { k, n: points.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let dim = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let kk = centroids.len();
        let mut sums = vec![vec![0.0; dim]; kk];
        let mut counts = vec![0usize; kk];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..kk {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..kk {
            if counts[c] == 0 {
                // Re-seed from the point farthest from its centre, taken from a cluster that keeps a member.
                let far = (0..points.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                            .then(b.cmp(&a))
                    });
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    counts[c] = 1;
                    labels[i] = c;
                    centroids[c] = points[i].clone();
                }
            }
        }
        let new_labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = new_labels != labels;
        labels = new_labels;
        let w = wcss(points, &centroids, &labels);
        if let Some(&prev) = history.last() {
            debug_assert!(w <= prev * (1.0 + 1e-12) + 1e-12, "WCSS increased {prev} -> {w}");
        }
        history.push(w);
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        labels,
        iterations,
        wcss_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Centroids in standardised feature space.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<LocationId, usize>,
    pub standardizer: Standardizer,
    pub wcss_history: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_of(&self, location: &LocationId) -> Result<usize> {
        self.assignment
            .get(location)
            .copied()
            .ok_or_else(|| Error::UnknownLocation(location.to_string()))
    }

    /// Model with every location in one cluster.
    pub fn single(features: &[FeatureVector]) -> Self {
        let rows: Vec<Vec<f64>> = features.iter().map(|f| f.features.clone()).collect();
        let standardizer = Standardizer::fit(&rows);
        let dim = rows.first().map_or(0, Vec::len);
        ClusterModel {
            k: 1,
            centroids: vec![vec![0.0; dim]],
            assignment: features.iter().map(|f| (f.location_id.clone(), 0)).collect(),
            standardizer,
            wcss_history: Vec::new(),
        }
    }
}

impl ClusterModel {
    /// Folds clusters whose total `weight` is below `min` into the cluster with the nearest
    /// centroid, smallest first, until every cluster qualifies or one is left. Merged
    /// centroids are location-weighted means; cluster ids are renumbered in order.
    pub fn merge_small(&mut self, weight: impl Fn(&LocationId) -> usize, min: usize) {
        loop {
            let mut totals = vec![0usize; self.k];
            let mut members = vec![0usize; self.k];
            for (loc, &c) in &self.assignment {
                totals[c] += weight(loc);
                members[c] += 1;
            }
            if self.k <= 1 {
                return;
            }
            let Some(small) = (0..self.k)
                .filter(|&c| totals[c] < min)
                .min_by_key(|&c| (totals[c], c))
            else {
                return;
            };
            let target = (0..self.k)
                .filter(|&c| c != small)
                .min_by(|&a, &b| {
                    let d = |c: usize| sq_dist(&self.centroids[c], &self.centroids[small]);
                    d(a).total_cmp(&d(b)).then(a.cmp(&b))
                })
                .expect("at least two clusters");
            let (na, nb) = (members[target] as f64, members[small] as f64);
            if na + nb > 0.0 {
                let merged: Vec<f64> = self.centroids[target]
                    .iter()
                    .zip(&self.centroids[small])
                    .map(|(a, b)| (a * na + b * nb) / (na + nb))
                    .collect();
                self.centroids[target] = merged;
            }
            self.centroids.remove(small);
            self.k -= 1;
            for c in self.assignment.values_mut() {
                if *c == small {
                    *c = target;
                }
                if *c > small {
                    *c -= 1;
                }
            }
        }
    }
}

/// Cluster count actually used: at most one cluster per [`LOCATIONS_PER_CLUSTER`] locations.
pub fn effective_k(requested: usize, n_locations: usize) -> usize {
    requested.min(n_locations / LOCATIONS_PER_CLUSTER).max(1)
}

/// Standardises the features and clusters the locations.
///
/// Inputs are put in canonical `location_id` order before seeding so the result does not
/// depend on input order. Identical feature vectors with `k > 1` degrade to a single cluster.
pub fn kmeans(features: &[FeatureVector], k: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 || k > features.len() {
        return Err(Error::InvalidClusterCount {
            k,
            n: features.len(),
        });
    }
    let mut ordered: Vec<&FeatureVector> = features.iter().collect();
    ordered.sort_by(|a, b| a.location_id.cmp(&b.location_id));
    let raw: Vec<Vec<f64>> = ordered.iter().map(|f| f.features.clone()).collect();
    let standardizer = Standardizer::fit(&raw);
    let points: Vec<Vec<f64>> = raw.iter().map(|r| standardizer.apply(r)).collect();

    if k > 1 && points.iter().all(|p| p == &points[0]) {
        log::warn!("all {} feature vectors are identical; using a single cluster", points.len());
        return Ok(ClusterModel::single(features));
    }
    let result = kmeans_points(&points, k, seed)?;
    if result.centroids.len() < k {
        log::warn!(
            "only {} distinct feature vectors; clustering with k={}",
            result.centroids.len(),
            result.centroids.len()
        );
    }
    Ok(ClusterModel {
        k: result.centroids.len(),
        centroids: result.centroids,
        assignment: ordered
            .iter()
            .zip(&result.labels)
            .map(|(f, &l)| (f.location_id.clone(), l))
            .collect(),
        standardizer,
        wcss_history: result.wcss_history,
    })
}

/// Partitions cases by the cluster of their location; `pools[c]` holds cluster `c`'s cases.
pub fn pool_training_data(model: &ClusterModel, cases: &[ForecastCase]) -> Result<Vec<Vec<ForecastCase>>> {
    let mut pools = vec![Vec::new(); model.k];
    for case in cases {
        pools[model.cluster_of(&case.forecast.location_id)?].push(case.clone());
    }
    Ok(pools)
}

/// Index form of [`pool_training_data`].
pub fn pool_indices<'a>(
    model: &ClusterModel,
    locations: impl IntoIterator<Item = &'a LocationId>,
) -> Result<Vec<Vec<usize>>> {
    let mut pools = vec![Vec::new(); model.k];
    for (i, loc) in locations.into_iter().enumerate() {
        pools[model.cluster_of(loc)?].push(i);
    }
    Ok(pools)
}
