use super::kmeans::{check_input, kmeans, repair_empty, Clustering};
use super::ClusterConfig;
use crate::error::{Error, Result};
use crate::numerics::kernels::log_sum_exp;
use crate::numerics::Tensor;

/// Lower bound on every per-dimension variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Fitted diagonal-covariance mixture.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub means: Tensor,
    pub variances: Tensor,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    /// `log pi_j + log N(x | mu_j, diag var_j)` for every component.
    fn joint_log(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        for (j, o) in out.iter_mut().enumerate() {
            let (mu, var) = (self.means.row(j), self.variances.row(j));
            let mut quad = 0.0;
            let mut log_det = 0.0;
            for ((xi, m), v) in x.iter().zip(mu).zip(var) {
                quad += (xi - m) * (xi - m) / v;
                log_det += v.ln();
            }
            *o = self.weights[j].ln() - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
        }
    }

    /// Responsibilities `n x k` and the (weighted) data log-likelihood.
    pub fn responsibilities(&self, x: &Tensor, w: Option<&[f64]>) -> (Tensor, f64) {
        let (n, k) = (x.n_rows(), self.weights.len());
        let mut resp = Tensor::zeros(&[n, k]);
        let mut ll = 0.0;
        for i in 0..n {
            let r = resp.row_mut(i);
            self.joint_log(x.row(i), r);
            let lse = log_sum_exp(r);
            for v in r.iter_mut() {
                *v = (*v - lse).exp();
            }
            ll += w.map_or(1.0, |w| w[i]) * lse;
        }
        (resp, ll)
    }
}

fn m_step(x: &Tensor, w: Option<&[f64]>, resp: &Tensor, prev: &GaussianMixture) -> GaussianMixture {
    let (n, d) = (x.n_rows(), x.last_dim());
    let k = resp.last_dim();
    let mut next = prev.clone();
    let total: f64 = (0..n).map(|i| w.map_or(1.0, |w| w[i])).sum();
    for j in 0..k {
        let r = |i: usize| resp.row(i)[j] * w.map_or(1.0, |w| w[i]);
        let nk: f64 = (0..n).map(r).sum();
        if !(nk > 0.0) {
            // A dead component keeps its parameters; its weight stays ~0.
            next.weights[j] = prev.weights[j].min(f64::MIN_POSITIVE);
            continue;
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            let ri = r(i);
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += ri * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; d];
        for i in 0..n {
            let ri = r(i);
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += ri * (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / nk).max(VARIANCE_FLOOR));
        next.means.row_mut(j).copy_from_slice(&mean);
        next.variances.row_mut(j).copy_from_slice(&var);
        next.weights[j] = nk / total;
    }
    next
}

fn init_from_kmeans(x: &Tensor, w: Option<&[f64]>, km: &Clustering) -> GaussianMixture {
    let k = km.centroids.n_rows();
    let d = x.last_dim();
    let mut resp = Tensor::zeros(&[x.n_rows(), k]);
    for (i, &a) in km.assignments.iter().enumerate() {
        resp.row_mut(i)[a] = 1.0;
    }
    let start = GaussianMixture {
        means: km.centroids.clone(),
        variances: Tensor::full(&[k, d], 1.0),
        weights: vec![1.0 / k as f64; k],
    };
    m_step(x, w, &resp, &start)
}

/// EM for a diagonal-covariance Gaussian mixture initialised from k-means.
/// Prototypes are the component means; assignments are the most responsible
/// component, with the same empty-cluster repair as k-means.
pub fn gmm_fit(x: &Tensor, k: usize, weights: Option<&[f64]>, cfg: &ClusterConfig) -> Result<(Clustering, GaussianMixture)> {
    check_input(x, k, weights)?;
    let km = kmeans(x, k, weights, cfg)?;
    let mut model = init_from_kmeans(x, weights, &km);
    let (mut resp, mut ll) = model.responsibilities(x, weights);
    let mut history = vec![ll];
    for _ in 0..cfg.max_iters {
        let next = m_step(x, weights, &resp, &model);
        let (next_resp, next_ll) = next.responsibilities(x, weights);
        if !next_ll.is_finite() {
            return Err(Error::NonFinite { op: "gmm_fit" });
        }
        history.push(next_ll);
        let gain = next_ll - ll;
        model = next;
        resp = next_resp;
        ll = next_ll;
        if gain <= cfg.tol * ll.abs().max(1.0) {
            break;
        }
    }
    let mut assignments: Vec<usize> = (0..x.n_rows())
        .map(|i| {
            let r = resp.row(i);
            let mut best = 0;
            for j in 1..k {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    repair_empty(x, &model.means, &mut assignments, k);
    let distortion = super::kmeans::distortion(x, weights, &model.means, &assignments);
    Ok((
        Clustering {
            centroids: model.means.clone(),
            assignments,
            distortion,
            history,
        },
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg(seed: u64) -> ClusterConfig {
        ClusterConfig {
            seed,
            ..ClusterConfig::default()
        }
    }

    #[test]
    fn single_component_mean_is_data_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[25, 3], 2.0, &mut rng);
        let (c, g) = gmm_fit(&x, 1, None, &cfg(0)).unwrap();
        for j in 0..3 {
            let mean = (0..25).map(|i| x.row(i)[j]).sum::<f64>() / 25.0;
            assert!((c.centroids.row(0)[j] - mean).abs() < 1e-12);
        }
        assert!((g.weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn separated_blobs_have_confident_responsibilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        for c in [-10.0, 10.0] {
            for _ in 0..40 {
                rows.push(vec![c + noise.sample(&mut rng), noise.sample(&mut rng)]);
            }
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let (c, g) = gmm_fit(&x, 2, None, &cfg(1)).unwrap();
        let (resp, _) = g.responsibilities(&x, None);
        for blob in 0..2 {
            let own = c.assignments[blob * 40];
            for i in blob * 40..(blob + 1) * 40 {
                assert!(resp.row(i)[own] >= 0.99);
            }
        }
    }

    #[test]
    fn log_likelihood_is_monotone_on_random_data() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::randn(&[40, 3], 1.0, &mut rng);
            let (c, _) = gmm_fit(&x, 4, None, &cfg(seed)).unwrap();
            for p in c.history.windows(2) {
                assert!(p[1] >= p[0] - 1e-9 * p[0].abs().max(1.0), "seed {seed}: {:?}", c.history);
            }
            let mut sizes = [0; 4];
            c.assignments.iter().for_each(|&a| sizes[a] += 1);
            assert!(sizes.iter().all(|&s| s > 0));
        }
    }

    #[test]
    fn collapsed_component_is_floored() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![5.0, 5.0], vec![5.0, 6.0]]).unwrap();
        let (_, g) = gmm_fit(&x, 2, None, &cfg(0)).unwrap();
        assert!(g.variances.data().iter().all(|&v| v >= VARIANCE_FLOOR));
    }
}
