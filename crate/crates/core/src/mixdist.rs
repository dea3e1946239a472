//! Statistics-mixing perturbation and the cross-view contrastive loss.
//!
//! An instance is normalized by its own mean and standard deviation and then
//! rescaled with a Beta-weighted blend of its statistics and those of a
//! randomly paired partner from the same batch. The contrastive loss pulls
//! the embedding of each instance toward the embedding of its perturbed copy
//! relative to the perturbed copies of the other instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, permutation, sample_beta, DenseArray, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixScope {
    /// Per-instance statistics, permuted partner, one λ per instance.
    Instance,
    /// Statistics over the whole batch and one λ per batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub delta: f64,
    pub epsilon_std: f64,
    pub scope: MixScope,
}

impl Default for MixParams {
    fn default() -> Self {
        Self {
            delta: 0.5,
            epsilon_std: 1e-5,
            scope: MixScope::Instance,
        }
    }
}

impl MixParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.epsilon_std > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_std must be positive, got {}",
                self.epsilon_std
            )));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of the elements of `x`.
pub fn instance_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// `(λ σ(x) + (1-λ) σ(partner), λ μ(x) + (1-λ) μ(partner))`.
pub fn mix_statistics(x: &[f64], partner: &[f64], lambda: f64) -> (f64, f64) {
    let (mx, sx) = instance_stats(x);
    let (mp, sp) = instance_stats(partner);
    mix_from_stats((mx, sx), (mp, sp), lambda)
}

fn mix_from_stats(own: (f64, f64), partner: (f64, f64), lambda: f64) -> (f64, f64) {
    let gamma = lambda * own.1 + (1.0 - lambda) * partner.1;
    let beta = lambda * own.0 + (1.0 - lambda) * partner.0;
    (gamma, beta)
}

/// `γ (x - μ(x)) / (σ(x) + ε) + β`.
pub fn perturb(x: &[f64], gamma_mix: f64, beta_mix: f64, epsilon_std: f64) -> Vec<f64> {
    let (mu, sigma) = instance_stats(x);
    let scale = gamma_mix / (sigma + epsilon_std);
    x.iter().map(|v| scale * (v - mu) + beta_mix).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedPair {
    pub original: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub lambda: f64,
    pub partner: usize,
    pub gamma_mix: f64,
    pub beta_mix: f64,
}

/// Perturbs every row of `batch`. Draw order: one permutation of the batch,
/// then the mixing coefficients in row order.
pub fn perturb_batch(batch: &DenseArray, params: &MixParams, rng: &mut Rng) -> Result<Vec<PerturbedPair>> {
    params.validate()?;
    let n = batch.rows();
    if n == 0 {
        return Err(Error::Empty("perturbation batch".into()));
    }
    let partners = permutation(n, rng);
    let stats: Vec<(f64, f64)> = (0..n).map(|i| instance_stats(batch.row(i))).collect();
    type Stats = Vec<(f64, f64)>;
    let (lambdas, own_stats, partner_stats): (Vec<f64>, Stats, Stats) = match params.scope {
        MixScope::Instance => {
            let lambdas = (0..n)
                .map(|_| sample_beta(params.delta, rng))
                .collect::<Result<Vec<_>>>()?;
            let partner_stats = partners.iter().map(|&j| stats[j]).collect();
            (lambdas, stats.clone(), partner_stats)
        }
        MixScope::Batch => {
            let lambda = sample_beta(params.delta, rng)?;
            let whole = instance_stats(batch.values());
            let shuffled = batch.select_rows(&partners);
            let whole_partner = instance_stats(shuffled.values());
            (vec![lambda; n], vec![whole; n], vec![whole_partner; n])
        }
    };
    Ok((0..n)
        .map(|i| {
            let (gamma_mix, beta_mix) = mix_from_stats(own_stats[i], partner_stats[i], lambdas[i]);
            let x = batch.row(i);
            PerturbedPair {
                original: x.to_vec(),
                perturbed: perturb(x, gamma_mix, beta_mix, params.epsilon_std),
                lambda: lambdas[i],
                partner: partners[i],
                gamma_mix,
                beta_mix,
            }
        })
        .collect())
}

/// Stacks the perturbed rows back into a matrix.
pub fn perturbed_matrix(pairs: &[PerturbedPair]) -> DenseArray {
    let d = pairs.first().map_or(0, |p| p.perturbed.len());
    let values = pairs.iter().flat_map(|p| p.perturbed.iter().copied()).collect();
    DenseArray::matrix(pairs.len(), d, values).expect("rows share a length")
}

/// Mean absolute elementwise change `|x̂ - x̄|` over a perturbed batch.
pub fn mean_abs_perturbation(pairs: &[PerturbedPair]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in pairs {
        for (a, b) in p.perturbed.iter().zip(&p.original) {
            total += (a - b).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// `x + N(0, std²)` elementwise.
pub fn additive_noise(batch: &DenseArray, std: f64, rng: &mut Rng) -> DenseArray {
    let mut out = batch.clone();
    for v in out.values_mut() {
        *v += std * rng.normal();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Adds the positive pair to the denominator (the usual InfoNCE form).
    /// Off by default: the denominator runs over `j ≠ i` only.
    pub include_positive_in_denominator: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.30,
            include_positive_in_denominator: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdclOutput {
    pub loss: f64,
    /// Gradient with respect to the unperturbed embeddings, `n x d_e`.
    pub grad_bar: Vec<f64>,
    /// Gradient with respect to the perturbed embeddings, `n x d_e`.
    pub grad_hat: Vec<f64>,
}

/// Loss and `∂L/∂sim` from an `n x n` similarity matrix with
/// `sim[i][j] = sim(z̄_i, ẑ_j)`:
/// `L = -Σ_i [ s_ii/τ - log Σ_{j∈D_i} exp(s_ij/τ) ]`, where `D_i` is
/// `{j ≠ i}` or all `j` when the positive is included.
pub fn mdcl_from_similarities(sim: &[f64], n: usize, cfg: &ContrastiveConfig) -> Result<(f64, Vec<f64>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 instances, got {n}"
        )));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {}", cfg.tau)));
    }
    if sim.len() != n * n {
        return Err(Error::Shape(format!("similarity matrix has {} entries for n = {n}", sim.len())));
    }
    let inv_tau = 1.0 / cfg.tau;
    let mut loss = 0.0;
    let mut dsim = vec![0.0; n * n];
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        terms.clear();
        for (j, &s) in row.iter().enumerate() {
            if j != i || cfg.include_positive_in_denominator {
                terms.push(s * inv_tau);
            }
        }
        let lse = log_sum_exp(&terms);
        loss += lse - row[i] * inv_tau;
        let drow = &mut dsim[i * n..(i + 1) * n];
        for (j, &s) in row.iter().enumerate() {
            if j != i || cfg.include_positive_in_denominator {
                drow[j] = (s * inv_tau - lse).exp() * inv_tau;
            }
        }
        drow[i] -= inv_tau;
    }
    Ok((loss, dsim))
}

/// One side of the contrastive loss over unit embeddings `z_bar`, `z_hat`
/// (each `n x d_e`). Since the inputs are unit vectors the cosine similarity
/// is their dot product, and gradients are taken of that dot product.
pub fn mdcl_loss_one_side(
    z_bar: &[f64],
    z_hat: &[f64],
    embed_dim: usize,
    cfg: &ContrastiveConfig,
) -> Result<MdclOutput> {
    if z_bar.len() != z_hat.len() || embed_dim == 0 || !z_bar.len().is_multiple_of(embed_dim) {
        return Err(Error::Shape(format!(
            "embedding lists of length {} and {} with width {embed_dim}",
            z_bar.len(),
            z_hat.len()
        )));
    }
    let n = z_bar.len() / embed_dim;
    let de = embed_dim;
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = dot(&z_bar[i * de..(i + 1) * de], &z_hat[j * de..(j + 1) * de]);
        }
    }
    let (loss, dsim) = mdcl_from_similarities(&sim, n, cfg)?;
    let mut grad_bar = vec![0.0; n * de];
    let mut grad_hat = vec![0.0; n * de];
    for i in 0..n {
        for j in 0..n {
            let g = dsim[i * n + j];
            if g == 0.0 {
                continue;
            }
            for k in 0..de {
                grad_bar[i * de + k] += g * z_hat[j * de + k];
                grad_hat[j * de + k] += g * z_bar[i * de + k];
            }
        }
    }
    Ok(MdclOutput {
        loss,
        grad_bar,
        grad_hat,
    })
}

/// Embeddings of one network for a batch and its perturbed copy.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingPair<'a> {
    pub z_bar: &'a [f64],
    pub z_hat: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdclCombined {
    pub loss: f64,
    /// Routed to the teacher projection head only.
    pub teacher: MdclOutput,
    /// Routed to the student projection head and extractor.
    pub student: MdclOutput,
}

/// Sum of the teacher-side and student-side losses.
pub fn mdcl_combined(
    teacher: EmbeddingPair<'_>,
    student: EmbeddingPair<'_>,
    embed_dim_teacher: usize,
    embed_dim_student: usize,
    cfg: &ContrastiveConfig,
) -> Result<MdclCombined> {
    let t = mdcl_loss_one_side(teacher.z_bar, teacher.z_hat, embed_dim_teacher, cfg)?;
    let s = mdcl_loss_one_side(student.z_bar, student.z_hat, embed_dim_student, cfg)?;
    Ok(MdclCombined {
        loss: s.loss + t.loss,
        teacher: t,
        student: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;

    fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n)
            .flat_map(|_| l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn stats_examples() {
        assert_eq!(instance_stats(&[1.0, 1.0, 1.0]), (1.0, 0.0));
        assert_eq!(instance_stats(&[0.0, 2.0]), (1.0, 1.0));
        let mut rng = Rng::new(6);
        let x: Vec<f64> = (0..37).map(|_| 3.0 * rng.normal() + 1.0).collect();
        // two-pass reference
        let mean = x.iter().sum::<f64>() / 37.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 37.0;
        let (m, s) = instance_stats(&x);
        assert!((m - mean).abs() < 1e-12 && (s - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mix_examples() {
        let x = [0.0, 2.0]; // μ 1, σ 1
        let p = [-1.0, 5.0]; // μ 2, σ 3
        assert_eq!(mix_statistics(&x, &p, 1.0), (1.0, 1.0));
        assert_eq!(mix_statistics(&x, &p, 0.0), (3.0, 2.0));
        let x = [-1.0, 1.0]; // μ 0, σ 1
        let p = [-1.0, 5.0];
        assert_eq!(mix_statistics(&x, &p, 0.5), (2.0, 1.0));
    }

    #[test]
    fn perturb_examples() {
        let mut rng = Rng::new(1);
        let x: Vec<f64> = (0..20).map(|_| 2.0 * rng.normal() + 0.5).collect();
        let (mu, sigma) = instance_stats(&x);
        let eps = 1e-5;
        let y = perturb(&x, sigma, mu, eps);
        let bound = x.iter().map(|v| (v - mu).abs()).fold(0.0, f64::max) * eps / sigma;
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= bound + 1e-15);
        }

        let c = perturb(&[4.0; 5], 2.0, -3.0, eps);
        assert!(c.iter().all(|&v| v == -3.0));

        let (g, b) = (0.7, 2.5);
        let y = perturb(&x, g, b, eps);
        let (my, sy) = instance_stats(&y);
        assert!((my - b).abs() < 1e-9);
        assert!((sy - g * sigma / (sigma + eps)).abs() < 1e-9);
    }

    #[test]
    fn batch_of_one_pairs_with_itself() {
        let x = DenseArray::matrix(1, 4, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let pairs = perturb_batch(&x, &MixParams::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(pairs[0].partner, 0);
        for (a, b) in pairs[0].perturbed.iter().zip(x.row(0)) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn large_delta_concentrates_lambda() {
        let mut rng = Rng::new(12);
        let params = MixParams {
            delta: 1000.0,
            ..Default::default()
        };
        let mut total_dev = 0.0;
        let mut count = 0;
        for _ in 0..100 {
            let x = DenseArray::matrix(10, 6, (0..60).map(|_| 3.0 * rng.normal()).collect()).unwrap();
            for (i, p) in perturb_batch(&x, &params, &mut rng).unwrap().iter().enumerate() {
                let (_, si) = instance_stats(x.row(i));
                let (_, sp) = instance_stats(x.row(p.partner));
                total_dev += (p.gamma_mix - 0.5 * (si + sp)).abs();
                assert!((p.lambda - 0.5).abs() < 0.1);
                count += 1;
            }
        }
        assert!(total_dev / (count as f64) < 0.05);
    }

    #[test]
    fn batch_perturbation_is_deterministic() {
        let x = DenseArray::matrix(5, 3, (0..15).map(|i| (i * i) as f64 * 0.1).collect()).unwrap();
        let a = perturb_batch(&x, &MixParams::default(), &mut Rng::new(4)).unwrap();
        let b = perturb_batch(&x, &MixParams::default(), &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        let scoped = MixParams {
            scope: MixScope::Batch,
            ..Default::default()
        };
        let c = perturb_batch(&x, &scoped, &mut Rng::new(4)).unwrap();
        assert!(c.windows(2).all(|w| w[0].lambda == w[1].lambda));
    }

    #[test]
    fn orthogonal_two_instance_example() {
        let z = [1.0, 0.0, 0.0, 1.0];
        let cfg = ContrastiveConfig {
            tau: 1.0,
            include_positive_in_denominator: false,
        };
        let out = mdcl_loss_one_side(&z, &z, 2, &cfg).unwrap();
        assert!((out.loss + 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_closed_form() {
        let n = 5;
        let z: Vec<f64> = (0..n).flat_map(|_| [0.6, 0.8]).collect();
        for tau in [0.3, 1.0] {
            let cfg = ContrastiveConfig {
                tau,
                include_positive_in_denominator: false,
            };
            let out = mdcl_loss_one_side(&z, &z, 2, &cfg).unwrap();
            let expected = n as f64 * ((n - 1) as f64).ln();
            assert!((out.loss - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_short_lists_and_bad_tau() {
        let z = [1.0, 0.0];
        assert!(mdcl_loss_one_side(&z, &z, 2, &ContrastiveConfig::default()).is_err());
        let z = [1.0, 0.0, 0.0, 1.0];
        let bad = ContrastiveConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(mdcl_loss_one_side(&z, &z, 2, &bad).is_err());
    }

    #[test]
    fn similarity_shift_leaves_loss_unchanged() {
        let mut rng = Rng::new(21);
        let n = 6;
        let sim: Vec<f64> = (0..n * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        for include in [false, true] {
            let cfg = ContrastiveConfig {
                tau: 0.3,
                include_positive_in_denominator: include,
            };
            let (base, _) = mdcl_from_similarities(&sim, n, &cfg).unwrap();
            let shifted: Vec<f64> = sim.iter().map(|s| s + 0.37).collect();
            let (moved, _) = mdcl_from_similarities(&shifted, n, &cfg).unwrap();
            assert!((base - moved).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(33);
        let (n, d) = (4, 3);
        for include in [false, true] {
            let cfg = ContrastiveConfig {
                tau: 0.3,
                include_positive_in_denominator: include,
            };
            let zb = unit_rows(n, d, &mut rng);
            let zh = unit_rows(n, d, &mut rng);
            let out = mdcl_loss_one_side(&zb, &zh, d, &cfg).unwrap();
            let h = 1e-5;
            for which in 0..2 {
                for i in 0..n * d {
                    let eval = |delta: f64| {
                        let (mut a, mut b) = (zb.clone(), zh.clone());
                        if which == 0 {
                            a[i] += delta;
                        } else {
                            b[i] += delta;
                        }
                        mdcl_loss_one_side(&a, &b, d, &cfg).unwrap().loss
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let g = if which == 0 { out.grad_bar[i] } else { out.grad_hat[i] };
                    let rel = (fd - g).abs() / (fd.abs() + g.abs()).max(1e-8);
                    assert!(rel < 1e-4, "side {which} index {i}: fd {fd} analytic {g}");
                }
            }
        }
    }

    #[test]
    fn combined_is_sum_of_sides() {
        let mut rng = Rng::new(2);
        let (n, d) = (4, 3);
        let (tb, th, sb, sh) = (
            unit_rows(n, d, &mut rng),
            unit_rows(n, d, &mut rng),
            unit_rows(n, d, &mut rng),
            unit_rows(n, d, &mut rng),
        );
        let cfg = ContrastiveConfig::default();
        let c = mdcl_combined(
            EmbeddingPair { z_bar: &tb, z_hat: &th },
            EmbeddingPair { z_bar: &sb, z_hat: &sh },
            d,
            d,
            &cfg,
        )
        .unwrap();
        let t = mdcl_loss_one_side(&tb, &th, d, &cfg).unwrap().loss;
        let s = mdcl_loss_one_side(&sb, &sh, d, &cfg).unwrap().loss;
        assert_eq!(c.loss, s + t);

        let sym = mdcl_combined(
            EmbeddingPair { z_bar: &tb, z_hat: &th },
            EmbeddingPair { z_bar: &tb, z_hat: &th },
            d,
            d,
            &cfg,
        )
        .unwrap();
        assert_eq!(sym.loss, 2.0 * t);
    }
}
