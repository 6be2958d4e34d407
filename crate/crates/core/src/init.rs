//! Initial class centers: K-means++ seeding with Lloyd refinement, or seeded
//! random prototypes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::ClassCenters;
use crate::dataio::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::{norm, squared_distance, Matrix};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Cluster every embedding, then tie clusters to known classes.
    ClusterAll,
    /// Known rows are labeled class means; novel rows are random.
    ClusterKnownRandomNovel,
    RandomAll,
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster_all" => Ok(Self::ClusterAll),
            "cluster_known_random_novel" => Ok(Self::ClusterKnownRandomNovel),
            "random_all" => Ok(Self::RandomAll),
            _ => Err(Error::Config(format!("unknown init kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for InitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ClusterAll => "cluster_all",
            Self::ClusterKnownRandomNovel => "cluster_known_random_novel",
            Self::RandomAll => "random_all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitMode {
    pub kind: InitKind,
    pub seed: u64,
    pub lloyd_max_iter: usize,
    pub lloyd_tol: f64,
    /// Skip Lloyd refinement after K-means++ seeding.
    pub seeding_only: bool,
    /// Independent seedings; the fit with the lowest SSE wins.
    pub restarts: usize,
}

impl Default for InitMode {
    fn default() -> Self {
        Self {
            kind: InitKind::ClusterAll,
            seed: 0,
            lloyd_max_iter: 100,
            lloyd_tol: 1e-6,
            seeding_only: false,
            restarts: 10,
        }
    }
}

fn distinct_rows(points: &Matrix) -> usize {
    let mut rows: Vec<Vec<u64>> = points
        .iter_rows()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

fn nearest(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter_rows().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// K-means++ seeding: the first center is uniform, each further center is
/// drawn with probability proportional to its squared distance from the
/// nearest chosen center.
pub fn kmeans_pp_seed(points: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = parallel::map_indices(n, |i| squared_distance(points.row(i), points.row(chosen[0])));

    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in dist.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("distinct points leave positive mass");
        chosen.push(pick);
        let new_row = points.row(pick);
        let updated = parallel::map_indices(n, |i| dist[i].min(squared_distance(points.row(i), new_row)));
        dist = updated;
    }
    Ok(points.select_rows(&chosen))
}

#[derive(Debug, Clone)]
pub struct LloydResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn within_sse(points: &Matrix, centers: &Matrix, assignments: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, centers.row(c)))
        .sum()
}

/// Assigns every point to its nearest center (ties to the lower index).
pub fn assign(points: &Matrix, centers: &Matrix) -> Vec<(usize, f64)> {
    parallel::map_indices(points.rows(), |i| nearest(points.row(i), centers))
}

/// Lloyd iterations from the given centers until the largest center shift
/// drops below `tol` or `max_iter` rounds have run.
pub fn lloyd_refine(points: &Matrix, centers: &Matrix, max_iter: usize, tol: f64) -> Result<LloydResult> {
    if points.cols() != centers.cols() {
        return Err(Error::Shape(format!(
            "points have d={}, centers d={}",
            points.cols(),
            centers.cols()
        )));
    }
    let (k, d) = centers.shape();
    let mut centers = centers.clone();
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        let assigned = assign(points, &centers);
        history.push(assigned.iter().map(|a| a.1).sum());
        iterations += 1;

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter_rows().zip(&assigned) {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; points.rows()];
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new_center: Vec<f64> = if counts[c] > 0 {
                sums.row(c).iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // farthest point from its assigned center, first come first served
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .fold(None, |best: Option<(usize, f64)>, (i, a)| match best {
                        Some((_, bd)) if bd >= a.1 => best,
                        _ => Some((i, a.1)),
                    });
                match far {
                    Some((i, _)) => {
                        taken[i] = true;
                        points.row(i).to_vec()
                    }
                    None => centers.row(c).to_vec(),
                }
            };
            shift = shift.max(squared_distance(centers.row(c), &new_center).sqrt());
            centers.row_mut(c).copy_from_slice(&new_center);
        }
        if shift < tol {
            break;
        }
    }
    let assignments = assign(points, &centers).into_iter().map(|a| a.0).collect();
    Ok(LloydResult {
        centers,
        assignments,
        sse_history: history,
        iterations,
    })
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize, target_norm: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&g).max(1e-12);
            g.into_iter().map(|v| v * target_norm / n).collect()
        })
        .collect()
}

fn mean_norm(m: &Matrix) -> f64 {
    if m.rows() == 0 {
        return 1.0;
    }
    m.iter_rows().map(norm).sum::<f64>() / m.rows() as f64
}

/// Greedy labeled-majority matching of clusters to known classes.
///
/// Returns the cluster index for each output row: rows `0..known` get the
/// cluster holding the most labeled samples of that class, the leftover
/// clusters follow in index order.
pub fn order_clusters_by_labels(assignments: &[usize], labels: &[usize], clusters: usize, known: usize) -> Vec<usize> {
    let mut counts = vec![vec![0usize; known]; clusters];
    for (&c, &y) in assignments.iter().zip(labels) {
        counts[c][y] += 1;
    }
    let mut row_of_class = vec![usize::MAX; known];
    let mut cluster_used = vec![false; clusters];
    for _ in 0..known.min(clusters) {
        let mut best: Option<(usize, usize, usize)> = None;
        for (c, row) in counts.iter().enumerate() {
            if cluster_used[c] {
                continue;
            }
            for (y, &n) in row.iter().enumerate() {
                if row_of_class[y] != usize::MAX {
                    continue;
                }
                if best.is_none_or(|(_, _, bn)| n > bn) {
                    best = Some((c, y, n));
                }
            }
        }
        let (c, y, _) = best.expect("unmatched pair exists");
        row_of_class[y] = c;
        cluster_used[c] = true;
    }
    let mut order = row_of_class;
    order.extend((0..clusters).filter(|&c| !cluster_used[c]));
    order
}

/// Builds the initial centers `A_0` with one row per known and novel class.
pub fn init_class_centers(dataset: &EmbeddingDataset, mode: &InitMode) -> Result<ClassCenters> {
    let k = dataset.class_count();
    let d = dataset.dim();
    let all = dataset.all_embeddings();
    if all.rows() == 0 {
        return Err(Error::InvalidArgument("cannot initialize centers from an empty dataset".into()));
    }
    if k > all.rows() {
        return Err(Error::InvalidArgument(format!(
            "{k} classes exceed {} samples",
            all.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mode.seed);
    let scale = mean_norm(if dataset.labeled.rows() > 0 { &dataset.labeled } else { &all });

    let centers = match mode.kind {
        InitKind::ClusterAll => {
            let iters = if mode.seeding_only { 0 } else { mode.lloyd_max_iter };
            let mut best: Option<(f64, LloydResult)> = None;
            for r in 0..mode.restarts.max(1) as u64 {
                let seeded = kmeans_pp_seed(&all, k, mode.seed.wrapping_add(r))?;
                let fit = lloyd_refine(&all, &seeded, iters, mode.lloyd_tol)?;
                let sse = within_sse(&all, &fit.centers, &fit.assignments);
                if best.as_ref().is_none_or(|(b, _)| sse < *b) {
                    best = Some((sse, fit));
                }
            }
            let fit = best.expect("at least one restart").1;
            let labeled_assign = &fit.assignments[..dataset.labeled.rows()];
            let order = order_clusters_by_labels(labeled_assign, &dataset.labels, k, dataset.known_classes);
            fit.centers.select_rows(&order)
        }
        InitKind::ClusterKnownRandomNovel => {
            let mut rows = Vec::with_capacity(k);
            for class in 0..dataset.known_classes {
                let idx: Vec<usize> = (0..dataset.labels.len()).filter(|&i| dataset.labels[i] == class).collect();
                if idx.is_empty() {
                    rows.extend(random_rows(&mut rng, 1, d, scale));
                } else {
                    rows.push(dataset.labeled.select_rows(&idx).column_mean());
                }
            }
            rows.extend(random_rows(&mut rng, dataset.novel_classes, d, scale));
            Matrix::from_rows(&rows)?
        }
        InitKind::RandomAll => Matrix::from_rows(&random_rows(&mut rng, k, d, scale))?,
    };
    Ok(ClassCenters::new(centers))
}
