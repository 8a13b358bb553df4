use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClusterConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Result of a clustering run.
#[derive(Clone, Debug)]
pub struct Clustering {
    /// `k x d` prototypes.
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Final weighted sum of squared distances to the assigned centroid.
    pub distortion: f64,
    /// Distortion after every assignment and update step of the returned run
    /// (k-means), or the log-likelihood after every E-step (GMM).
    pub history: Vec<f64>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn check_input(x: &Tensor, k: usize, weights: Option<&[f64]>) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot form {k} clusters from {n} points")));
    }
    if !x.is_finite() {
        return Err(Error::data("clustering input has non-finite values"));
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::data("weights must be positive, one per point"));
        }
    }
    Ok((n, d))
}

/// Lowest-index nearest centroid of every row.
pub(crate) fn nearest(x: &Tensor, centroids: &Tensor) -> Vec<usize> {
    (0..x.n_rows())
        .map(|i| {
            let row = x.row(i);
            let mut best = (f64::INFINITY, 0);
            for j in 0..centroids.n_rows() {
                let dist = sq_dist(row, centroids.row(j));
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1
        })
        .collect()
}

fn weight(w: Option<&[f64]>, i: usize) -> f64 {
    w.map_or(1.0, |w| w[i])
}

pub(crate) fn distortion(x: &Tensor, w: Option<&[f64]>, c: &Tensor, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &a)| weight(w, i) * sq_dist(x.row(i), c.row(a)))
        .sum()
}

fn cluster_sizes(assign: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &a in assign {
        sizes[a] += 1;
    }
    sizes
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from a cluster with more than one member.
pub(crate) fn repair_empty(x: &Tensor, c: &Tensor, assign: &mut [usize], k: usize) {
    let mut sizes = cluster_sizes(assign, k);
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (i, &a) in assign.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let dist = sq_dist(x.row(i), c.row(a));
            if best.is_none_or(|(b, _)| dist > b) {
                best = Some((dist, i));
            }
        }
        let (_, i) = best.expect("k <= n guarantees a donor cluster");
        sizes[assign[i]] -= 1;
        assign[i] = j;
        sizes[j] = 1;
    }
}

/// Weighted member means. Clusters must be non-empty.
pub(crate) fn means(x: &Tensor, w: Option<&[f64]>, assign: &[usize], k: usize) -> Tensor {
    let d = x.last_dim();
    let mut sums = vec![0.0; k * d];
    let mut mass = vec![0.0; k];
    for (i, &a) in assign.iter().enumerate() {
        let wi = weight(w, i);
        mass[a] += wi;
        for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(x.row(i)) {
            *s += wi * v;
        }
    }
    for j in 0..k {
        for s in &mut sums[j * d..(j + 1) * d] {
            *s /= mass[j];
        }
    }
    Tensor::new(vec![k, d], sums).expect("k x d")
}

/// Greedy k-means++: each new seed is the best of `2 + ln k` candidates drawn
/// with probability proportional to weight times squared distance.
fn seed_plus_plus(x: &Tensor, w: Option<&[f64]>, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, d) = (x.n_rows(), x.last_dim());
    let trials = 2 + (k as f64).ln().floor() as usize;
    let pick = |rng: &mut ChaCha8Rng, probs: &[f64]| -> Option<usize> {
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(i);
            }
        }
        probs.iter().rposition(|&p| p > 0.0)
    };

    let mut chosen = Vec::with_capacity(k);
    let uniform: Vec<f64> = (0..n).map(|i| weight(w, i)).collect();
    let first = pick(rng, &uniform).unwrap_or(0);
    chosen.push(first);
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    while chosen.len() < k {
        let pot: Vec<f64> = (0..n).map(|i| weight(w, i) * closest[i]).collect();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let Some(c) = pick(rng, &pot) else { break };
            let updated: Vec<f64> = (0..n)
                .map(|i| closest[i].min(sq_dist(x.row(i), x.row(c))))
                .collect();
            let p: f64 = (0..n).map(|i| weight(w, i) * updated[i]).sum();
            if best.as_ref().is_none_or(|b| p < b.0) {
                best = Some((p, c, updated));
            }
        }
        match best {
            Some((_, c, updated)) => {
                chosen.push(c);
                closest = updated;
            }
            None => {
                // Every point coincides with a seed: take unused indices.
                let c = (0..n).find(|i| !chosen.contains(i)).expect("k <= n");
                chosen.push(c);
            }
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &c in &chosen {
        data.extend_from_slice(x.row(c));
    }
    Tensor::new(vec![k, d], data).expect("k x d")
}

/// Single-point transfers: moves a point to another cluster whenever that
/// lowers the distortion once both means are updated. Lloyd stops at
/// fixed points this can still improve. Returns whether anything moved.
fn transfer_pass(x: &Tensor, w: Option<&[f64]>, c: &mut Tensor, assign: &mut [usize], max_sweeps: usize) -> bool {
    let k = c.n_rows();
    let mut mass = vec![0.0; k];
    for (i, &a) in assign.iter().enumerate() {
        mass[a] += weight(w, i);
    }
    let mut count = cluster_sizes(assign, k);
    let mut moved = false;
    for _ in 0..max_sweeps {
        let mut changed = false;
        for i in 0..assign.len() {
            let (a, wi) = (assign[i], weight(w, i));
            if count[a] < 2 || mass[a] - wi <= 0.0 {
                continue;
            }
            let xi = x.row(i);
            let remove = mass[a] * wi / (mass[a] - wi) * sq_dist(xi, c.row(a));
            let mut best: Option<(f64, usize)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let add = mass[b] * wi / (mass[b] + wi) * sq_dist(xi, c.row(b));
                if best.is_none_or(|(v, _)| add < v) {
                    best = Some((add, b));
                }
            }
            let Some((add, b)) = best else { continue };
            if add < remove * (1.0 - 1e-12) {
                let ca: Vec<f64> = c.row(a).iter().zip(xi).map(|(m, v)| (mass[a] * m - wi * v) / (mass[a] - wi)).collect();
                let cb: Vec<f64> = c.row(b).iter().zip(xi).map(|(m, v)| (mass[b] * m + wi * v) / (mass[b] + wi)).collect();
                c.row_mut(a).copy_from_slice(&ca);
                c.row_mut(b).copy_from_slice(&cb);
                mass[a] -= wi;
                mass[b] += wi;
                count[a] -= 1;
                count[b] += 1;
                assign[i] = b;
                changed = true;
                moved = true;
            }
        }
        if !changed {
            break;
        }
    }
    moved
}

fn lloyd(x: &Tensor, w: Option<&[f64]>, k: usize, cfg: &ClusterConfig, rng: &mut ChaCha8Rng) -> Clustering {
    let mut centroids = seed_plus_plus(x, w, k, rng);
    let mut assign = nearest(x, &centroids);
    let mut history = vec![distortion(x, w, &centroids, &assign)];
    let mut stale = true;
    for _ in 0..cfg.max_iters {
        repair_empty(x, &centroids, &mut assign, k);
        centroids = means(x, w, &assign, k);
        stale = false;
        let before = distortion(x, w, &centroids, &assign);
        history.push(before);
        let next = nearest(x, &centroids);
        if next == assign {
            break;
        }
        assign = next;
        stale = true;
        let after = distortion(x, w, &centroids, &assign);
        history.push(after);
        if before - after <= cfg.tol * before {
            repair_empty(x, &centroids, &mut assign, k);
            centroids = means(x, w, &assign, k);
            stale = false;
            history.push(distortion(x, w, &centroids, &assign));
            break;
        }
    }
    if stale {
        repair_empty(x, &centroids, &mut assign, k);
        centroids = means(x, w, &assign, k);
        history.push(distortion(x, w, &centroids, &assign));
    }
    if transfer_pass(x, w, &mut centroids, &mut assign, cfg.max_iters) {
        centroids = means(x, w, &assign, k);
        history.push(distortion(x, w, &centroids, &assign));
    }
    Clustering {
        distortion: *history.last().unwrap(),
        centroids,
        assignments: assign,
        history,
    }
}

/// Lloyd's algorithm from greedy k-means++ seeds followed by single-point
/// transfer refinement, best of `cfg.n_init` restarts. Optional per-point weights.
pub fn kmeans(x: &Tensor, k: usize, weights: Option<&[f64]>, cfg: &ClusterConfig) -> Result<Clustering> {
    check_input(x, k, weights)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..cfg.n_init {
        let run = lloyd(x, weights, k, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| run.distortion < b.distortion) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn cfg(seed: u64) -> ClusterConfig {
        ClusterConfig {
            seed,
            ..ClusterConfig::default()
        }
    }

    #[test]
    fn k_equals_n_gives_zero_distortion() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, 1.0], vec![-2.0, 5.0], vec![7.0, 7.0]]).unwrap();
        let c = kmeans(&x, 4, None, &cfg(0)).unwrap();
        assert_eq!(c.distortion, 0.0);
        let mut a = c.assignments.clone();
        a.sort();
        assert_eq!(a, [0, 1, 2, 3]);
    }

    #[test]
    fn k_larger_than_n_is_error() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(kmeans(&x, 4, None, &cfg(0)).is_err());
        assert!(kmeans(&x, 0, None, &cfg(0)).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let x = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        let c = kmeans(&x, 3, None, &cfg(5)).unwrap();
        assert_eq!(cluster_sizes(&c.assignments, 3).iter().filter(|&&s| s == 0).count(), 0);
    }

    #[test]
    fn separated_blobs_recover_blob_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rows = Vec::new();
        for (cx, cy) in [(-20.0, 0.0), (20.0, 5.0)] {
            for _ in 0..50 {
                rows.push(vec![cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)]);
            }
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let c = kmeans(&x, 2, None, &cfg(3)).unwrap();
        for (blob, chunk) in rows.chunks(50).enumerate() {
            let mean: Vec<f64> = (0..2).map(|j| chunk.iter().map(|r| r[j]).sum::<f64>() / 50.0).collect();
            let label = c.assignments[blob * 50];
            assert!(c.assignments[blob * 50..(blob + 1) * 50].iter().all(|&a| a == label));
            assert!(sq_dist(c.centroids.row(label), &mean).sqrt() <= 1e-9);
        }
    }

    #[test]
    fn weights_pull_the_centroid() {
        let x = Tensor::from_rows(&[vec![0.0], vec![4.0]]).unwrap();
        let c = kmeans(&x, 1, Some(&[3.0, 1.0]), &cfg(0)).unwrap();
        assert!((c.centroids.data()[0] - 1.0).abs() < 1e-12);
    }

    fn best_two_partition(x: &Tensor) -> f64 {
        let n = x.n_rows();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let assign: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let c = means(x, None, &assign, 2);
            best = best.min(distortion(x, None, &c, &assign));
        }
        best
    }

    #[test]
    fn small_instances_reach_exhaustive_optimum() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..100u64 {
            let n = rng.random_range(2..=8);
            let d = rng.random_range(1..=3);
            let x = Tensor::randn(&[n, d], 1.0, &mut rng);
            let got = kmeans(&x, 2, None, &cfg(case)).unwrap().distortion;
            let opt = best_two_partition(&x);
            assert!((got - opt).abs() <= 1e-12 * opt.max(1.0), "case {case}: {got} vs {opt}");
        }
    }

    fn data(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n, d], 1.0, &mut rng)
    }

    proptest! {
        #[test]
        fn lloyd_invariants(seed in 0u64..1000, n in 3usize..40, d in 1usize..5, k in 1usize..6) {
            let k = k.min(n);
            let x = data(seed, n, d);
            let c = kmeans(&x, k, None, &cfg(seed)).unwrap();
            for pair in c.history.windows(2) {
                prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12, "{:?}", c.history);
            }
            let sizes = cluster_sizes(&c.assignments, k);
            prop_assert!(sizes.iter().all(|&s| s > 0));
            let m = means(&x, None, &c.assignments, k);
            prop_assert!(m.max_abs_diff(&c.centroids) <= 1e-9);
            let again = kmeans(&x, k, None, &cfg(seed)).unwrap();
            prop_assert_eq!(again.assignments, c.assignments);
            prop_assert_eq!(again.centroids.data(), c.centroids.data());
        }

        #[test]
        fn scaling_keeps_assignments(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let x = data(seed, 30, 3);
            let c = kmeans(&x, 4, None, &cfg(seed)).unwrap();
            let s = kmeans(&x.map(|v| v * scale), 4, None, &cfg(seed)).unwrap();
            prop_assert_eq!(&s.assignments, &c.assignments);
            prop_assert!(s.centroids.max_abs_diff(&c.centroids.map(|v| v * scale)) <= 1e-9 * scale.max(1.0));
        }
    }
}
