//! Group recovery from a soft adjacency matrix: normalized spectral
//! clustering, the eigengap count heuristic, and exact connected components.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::GroupPrediction;
use crate::tracks::TrackId;

/// Disjoint, non-empty groups of ids. Stored canonically: members sorted
/// within each group and groups ordered by their smallest member, so two
/// partitions compare equal iff they group the same ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    groups: Vec<Vec<TrackId>>,
}

impl Partition {
    pub fn new(groups: Vec<Vec<TrackId>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Validation("empty group in partition".into()));
            }
            for &id in g {
                if !seen.insert(id) {
                    return Err(Error::Validation(format!("id {id} appears in more than one group")));
                }
            }
        }
        let mut groups: Vec<Vec<TrackId>> = groups
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        groups.sort_unstable_by_key(|g| g[0]);
        Ok(Self { groups })
    }

    /// Group `labels[k]` receives `ids[k]`.
    pub fn from_labels(ids: &[TrackId], labels: &[usize]) -> Self {
        let mut by_label: BTreeMap<usize, Vec<TrackId>> = BTreeMap::new();
        for (&id, &l) in ids.iter().zip(labels) {
            by_label.entry(l).or_default().push(id);
        }
        Self::new(by_label.into_values().collect()).expect("labels induce a partition")
    }

    pub fn singletons(ids: &[TrackId]) -> Self {
        Self::new(ids.iter().map(|&i| vec![i]).collect()).expect("distinct ids")
    }

    pub fn single_group(ids: &[TrackId]) -> Self {
        Self::new(vec![ids.to_vec()]).expect("distinct ids")
    }

    /// Partition of `0..n` turned into one over `ids` (index `k` becomes `ids[k]`).
    pub fn map_ids(&self, ids: &[TrackId]) -> Self {
        Self::new(
            self.groups
                .iter()
                .map(|g| g.iter().map(|&k| ids[k as usize]).collect())
                .collect(),
        )
        .expect("distinct ids")
    }

    pub fn groups(&self) -> &[Vec<TrackId>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.groups.iter().flatten().copied()
    }

    /// Binary same-group matrix over `ids` in the given order, zero diagonal.
    pub fn adjacency(&self, ids: &[TrackId]) -> DMatrix<f64> {
        let group_of: BTreeMap<TrackId, usize> = self
            .groups
            .iter()
            .enumerate()
            .flat_map(|(g, members)| members.iter().map(move |&id| (id, g)))
            .collect();
        let n = ids.len();
        DMatrix::from_fn(n, n, |i, j| {
            let same = i != j && group_of.get(&ids[i]).is_some() && group_of.get(&ids[i]) == group_of.get(&ids[j]);
            if same {
                1.0
            } else {
                0.0
            }
        })
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| g.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(","))
            .collect();
        write!(f, "{}", parts.join(" | "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 100,
            seed: 0,
        }
    }
}

const DEGREE_FLOOR: f64 = 1e-12;

fn check_square(a: &DMatrix<f64>) -> Result<usize> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Input(format!("expected a non-empty square matrix, got {}x{}", a.nrows(), a.ncols())));
    }
    Ok(a.nrows())
}

/// Ascending eigenpairs of `I - D^{-1/2} A D^{-1/2}`.
fn normalized_laplacian_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row(i).sum().max(DEGREE_FLOOR).sqrt())
        .collect();
    let l = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt[i] * 0.5 * (a[(i, j)] + a[(j, i)]) * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(l);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |i, c| eig.eigenvectors[(i, order[c])]);
    (values, vectors)
}

/// Normalized spectral clustering of an affinity matrix into `k` groups of
/// the indices `0..n`: bottom-`k` eigenvectors of the symmetric normalized
/// Laplacian, row normalisation, then k-means++ with seeded restarts, keeping
/// the lowest-inertia run.
pub fn spectral_cluster(a: &DMatrix<f64>, k: usize, cfg: &SpectralConfig) -> Result<Partition> {
    let n = check_square(a)?;
    if k == 0 || k > n {
        return Err(Error::Input(format!("cluster count {k} outside 1..={n}")));
    }
    let ids: Vec<TrackId> = (0..n as TrackId).collect();
    if k == 1 {
        return Ok(Partition::single_group(&ids));
    }
    if k == n {
        return Ok(Partition::singletons(&ids));
    }
    let (_, vectors) = normalized_laplacian_eigen(a);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..k).map(|c| vectors[(i, c)]).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                row
            }
        })
        .collect();
    let labels = kmeans(&points, k, cfg);
    Ok(Partition::from_labels(&ids, &labels))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best-of-restarts Lloyd iterations from k-means++ seeds.
fn kmeans(points: &[Vec<f64>], k: usize, cfg: &SpectralConfig) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(restart as u64));
        let (inertia, labels) = lloyd(points, kmeans_pp(points, k, &mut rng), cfg.max_iter);
        // strict comparison: ties keep the earlier restart
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            d2.iter()
                .position(|&w| {
                    target -= w;
                    target < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> (f64, Vec<usize>) {
    let k = centers.len();
    let dim = points[0].len();
    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                (0..k)
                    .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                    .expect("k >= 1")
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the point worst served by its center
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]]).total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                    })
                    .expect("non-empty");
                centers[c] = points[far].clone();
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (inertia, labels)
}

/// Number of groups at the largest gap between consecutive ascending
/// eigenvalues of the normalized Laplacian. The gap after the last eigenvalue
/// is measured against 1, so an affinity with no cross links (all
/// eigenvalues 0) yields `n`. Ties go to the smaller count.
pub fn eigengap_k(a: &DMatrix<f64>) -> Result<usize> {
    let n = check_square(a)?;
    let (values, _) = normalized_laplacian_eigen(a);
    let mut best = (1, f64::NEG_INFINITY);
    for k in 1..=n {
        let next = if k < n { values[k] } else { 1.0 };
        let gap = next - values[k - 1];
        if gap > best.1 + 1e-12 {
            best = (k, gap);
        }
    }
    Ok(best.0)
}

/// Exact connected components of a symmetric 0/1 matrix over indices `0..n`.
pub fn connected_components(y: &DMatrix<f64>) -> Result<Partition> {
    let n = check_square(y)?;
    for i in 0..n {
        for j in 0..n {
            let v = y[(i, j)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::Input(format!("entry ({i}, {j}) = {v} is not binary")));
            }
            if v != y[(j, i)] {
                return Err(Error::Input(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if y[(u, v)] == 1.0 && label[v] == usize::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    let ids: Vec<TrackId> = (0..n as TrackId).collect();
    Ok(Partition::from_labels(&ids, &label))
}

/// How the number of groups is chosen at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountPolicy {
    /// Round the predicted cardinality and clamp into `1..=n`.
    Cardinality,
    /// Ignore the cardinality head; use the eigengap heuristic.
    Eigengap,
    /// Round-and-clamp, switching to the eigengap when the prediction is not finite.
    #[default]
    Fallback,
}

impl FromStr for CountPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cardinality" => Ok(Self::Cardinality),
            "eigengap" => Ok(Self::Eigengap),
            "fallback" => Ok(Self::Fallback),
            other => Err(Error::Config(format!("unknown count policy `{other}`"))),
        }
    }
}

impl fmt::Display for CountPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cardinality => "cardinality",
            Self::Eigengap => "eigengap",
            Self::Fallback => "fallback",
        })
    }
}

/// Group count chosen by `policy` for an `n`-track prediction.
pub fn choose_k(adjacency: &DMatrix<f64>, cardinality: f64, policy: CountPolicy) -> Result<usize> {
    let n = check_square(adjacency)?;
    let rounded = || cardinality.round().clamp(1.0, n as f64) as usize;
    match policy {
        CountPolicy::Eigengap => eigengap_k(adjacency),
        CountPolicy::Fallback if !cardinality.is_finite() => eigengap_k(adjacency),
        CountPolicy::Cardinality if cardinality.is_nan() => Ok(1),
        CountPolicy::Cardinality | CountPolicy::Fallback => Ok(rounded()),
    }
}

/// Partition of the prediction's tracks (as indices `0..n`): the adjacency
/// with a unit diagonal clustered into the number of groups picked by `policy`.
pub fn predict_groups(pred: &GroupPrediction, policy: CountPolicy, cfg: &SpectralConfig) -> Result<Partition> {
    let mut a = pred.adjacency.clone();
    a.fill_diagonal(1.0);
    let k = choose_k(&a, pred.cardinality, policy)?;
    spectral_cluster(&a, k, cfg)
}
