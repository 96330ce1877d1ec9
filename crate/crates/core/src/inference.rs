//! Parameter estimation for the parametric calibration maps.
//!
//! * Maximum likelihood: damped Newton iterations on the convex NLL.
//! * Stochastic variational inference: a mean-field Gaussian over
//!   `[weights..., bias]`, fitted by Adam ascent on a reparameterized
//!   Monte-Carlo ELBO. The KL term against the Gaussian prior is exact.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibrators::{linear, sigmoid, softplus_sigmoid, CalibratorSpec, Design, WeightVector};
use crate::data::SampleSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { mean: 0.0, std: 10.0 }
    }
}

impl PriorSpec {
    fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::invalid(format!("prior std must be positive, got {}", self.std)));
        }
        Ok(())
    }
}

/// Factorized Gaussian over `[weights..., bias]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                found: log_sigma.len(),
            });
        }
        if mu.is_empty() {
            return Err(Error::invalid("posterior needs at least one dimension"));
        }
        if mu.iter().chain(&log_sigma).any(|x| !x.is_finite()) {
            return Err(Error::invalid("posterior parameters must be finite"));
        }
        Ok(Self { mu, log_sigma })
    }

    /// Point mass at `theta` (up to `exp(log_sigma)`).
    pub fn around(theta: &WeightVector, log_sigma: f64) -> Self {
        let mu = theta.to_flat();
        let log_sigma = vec![log_sigma; mu.len()];
        Self { mu, log_sigma }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    pub fn mean_weights(&self) -> WeightVector {
        WeightVector::from_flat(&self.mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlConfig {
    pub max_steps: usize,
    /// Initial Newton step length before backtracking.
    pub learning_rate: f64,
    /// Bound on the per-sample gradient norm `||grad|| / N`.
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            learning_rate: 1.0,
            convergence_tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SviConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub mc_samples_per_step: usize,
    pub seed: u64,
    pub prior: PriorSpec,
    pub init_from_ml: bool,
    pub init_log_sigma: f64,
    /// Steps per ELBO moving-average window for the stopping rule.
    pub window: usize,
    /// Stop once a window's mean ELBO improves by less than this fraction.
    pub rel_tol: f64,
}

impl Default for SviConfig {
    fn default() -> Self {
        Self {
            max_steps: 20_000,
            learning_rate: 1e-2,
            mc_samples_per_step: 8,
            seed: 0,
            prior: PriorSpec::default(),
            init_from_ml: true,
            init_log_sigma: -2.0,
            window: 200,
            rel_tol: 1e-5,
        }
    }
}

fn check_labels(design: &Design) -> Result<()> {
    let pos = design.n_positive();
    if pos == 0 || pos == design.n() {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

fn hessian(design: &Design, theta: &WeightVector) -> DMatrix<f64> {
    let d = design.dim() + 1;
    let mut h = DMatrix::<f64>::zeros(d, d);
    let mut row = vec![1.0; d];
    for (phi, _) in design.rows() {
        let q = sigmoid(linear(phi, theta));
        let w = q * (1.0 - q);
        row[..d - 1].copy_from_slice(phi);
        for a in 0..d {
            let wa = w * row[a];
            for b in a..d {
                h[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    h
}

fn newton_direction(h: DMatrix<f64>, grad: &[f64]) -> Vec<f64> {
    let d = grad.len();
    let g = DVector::from_column_slice(grad);
    let scale = (h.trace() / d as f64).max(1e-12);
    let mut ridge = 1e-12 * scale;
    for _ in 0..12 {
        let mut hr = h.clone();
        for i in 0..d {
            hr[(i, i)] += ridge;
        }
        if let Some(chol) = hr.cholesky() {
            return chol.solve(&g).as_slice().to_vec();
        }
        ridge *= 100.0;
    }
    // steepest descent as a last resort
    grad.iter().map(|x| x / scale).collect()
}

/// Newton-Raphson with Armijo backtracking from the zero map.
pub fn fit_ml_design(design: &Design, cfg: &MlConfig) -> Result<WeightVector> {
    check_labels(design)?;
    if cfg.max_steps == 0 || !(cfg.learning_rate > 0.0) || !(cfg.convergence_tol > 0.0) {
        return Err(Error::invalid("ML config needs positive steps, learning rate and tolerance"));
    }
    let n = design.n() as f64;
    let mut theta = WeightVector::zeros(design.dim());
    let (mut f, mut grad) = design.nll_and_gradient(&theta)?;
    for _ in 0..cfg.max_steps {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt() / n;
        if gnorm <= cfg.convergence_tol {
            break;
        }
        let dir = newton_direction(hessian(design, &theta), &grad);
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let flat = theta.to_flat();
        let mut step = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = flat.iter().zip(&dir).map(|(t, d)| t - step * d).collect();
            let cand = WeightVector::from_flat(&cand);
            let fc = design.nll(&cand)?;
            if fc <= f - 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, _)) => {
                theta = cand;
                let (fc, gc) = design.nll_and_gradient(&theta)?;
                f = fc;
                grad = gc;
            }
            // no decrease possible at working precision
            None => break,
        }
    }
    Ok(theta)
}

pub fn fit_ml(train: &SampleSet, spec: &CalibratorSpec, cfg: &MlConfig) -> Result<WeightVector> {
    fit_ml_design(&Design::new(train, spec)?, cfg)
}

/// Closed-form `KL(q || prior)` summed over dimensions.
pub fn kl_gaussians(q: &VariationalPosterior, p: &PriorSpec) -> Result<f64> {
    p.validate()?;
    let var_p = p.std * p.std;
    Ok(q.mu
        .iter()
        .zip(&q.log_sigma)
        .map(|(&mu, &ls)| {
            let var_q = (2.0 * ls).exp();
            p.std.ln() - ls + (var_q + (mu - p.mean).powi(2)) / (2.0 * var_p) - 0.5
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub elbo: f64,
    pub grad_mu: Vec<f64>,
    pub grad_log_sigma: Vec<f64>,
}

/// Rows per parallel block of the ELBO data pass; fixed so that sums do not
/// depend on the thread count.
const ROW_BLOCK: usize = 4096;

fn draw_eps(rng: &mut ChaCha8Rng, n_mc: usize, dim: usize) -> Vec<f64> {
    (0..n_mc * dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Reparameterized ELBO and its gradient for one block of noise `eps`
/// (`n_mc` rows of `dim` standard normals).
fn elbo_with_eps(
    design: &Design,
    q: &VariationalPosterior,
    prior: &PriorSpec,
    eps: &[f64],
    n_mc: usize,
) -> Result<ElboGradient> {
    let dim = q.dim();
    if dim != design.dim() + 1 {
        return Err(Error::DimensionMismatch {
            expected: design.dim() + 1,
            found: dim,
        });
    }
    let sigma = q.sigma();
    let thetas: Vec<WeightVector> = eps
        .chunks_exact(dim)
        .map(|e| {
            let flat: Vec<f64> = (0..dim).map(|j| q.mu[j] + sigma[j] * e[j]).collect();
            WeightVector::from_flat(&flat)
        })
        .collect();

    // one pass over the data for all draws, in fixed blocks summed in order
    let partials: Vec<(Vec<f64>, Vec<f64>)> = design
        .row_blocks(ROW_BLOCK)
        .map(|(xs, ys)| {
            let mut nll = vec![0.0; n_mc];
            let mut grads = vec![0.0; n_mc * dim];
            for (phi, &m) in xs.chunks_exact(dim - 1).zip(ys) {
                for (s, theta) in thetas.iter().enumerate() {
                    let z = linear(phi, theta);
                    let (sp, sg) = softplus_sigmoid(z);
                    nll[s] += sp - m * z;
                    let r = sg - m;
                    let g = &mut grads[s * dim..(s + 1) * dim];
                    for (gj, x) in g.iter_mut().zip(phi) {
                        *gj += r * x;
                    }
                    g[dim - 1] += r;
                }
            }
            (nll, grads)
        })
        .collect();
    let mut nll = vec![0.0; n_mc];
    let mut grads = vec![0.0; n_mc * dim];
    for (pn, pg) in &partials {
        nll.iter_mut().zip(pn).for_each(|(a, b)| *a += b);
        grads.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
    }

    let inv = 1.0 / n_mc as f64;
    let mut grad_mu = vec![0.0; dim];
    let mut grad_log_sigma = vec![0.0; dim];
    let mut expected_ll = 0.0;
    for s in 0..n_mc {
        expected_ll -= nll[s] * inv;
        let g = &grads[s * dim..(s + 1) * dim];
        let e = &eps[s * dim..(s + 1) * dim];
        for j in 0..dim {
            grad_mu[j] -= g[j] * inv;
            grad_log_sigma[j] -= g[j] * e[j] * sigma[j] * inv;
        }
    }
    let var_p = prior.std * prior.std;
    for j in 0..dim {
        grad_mu[j] -= (q.mu[j] - prior.mean) / var_p;
        grad_log_sigma[j] -= sigma[j] * sigma[j] / var_p - 1.0;
    }
    Ok(ElboGradient {
        elbo: expected_ll - kl_gaussians(q, prior)?,
        grad_mu,
        grad_log_sigma,
    })
}

/// Monte-Carlo ELBO with gradients w.r.t. `mu` and `log_sigma`; the noise is
/// a pure function of `seed`, so repeated calls share random numbers.
pub fn elbo_and_gradient(
    design: &Design,
    q: &VariationalPosterior,
    prior: &PriorSpec,
    n_mc: usize,
    seed: u64,
) -> Result<ElboGradient> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be at least 1"));
    }
    prior.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = draw_eps(&mut rng, n_mc, q.dim());
    elbo_with_eps(design, q, prior, &eps, n_mc)
}

pub fn elbo_estimate(
    train: &SampleSet,
    spec: &CalibratorSpec,
    q: &VariationalPosterior,
    prior: &PriorSpec,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    let design = Design::new(train, spec)?;
    Ok(elbo_and_gradient(&design, q, prior, n_mc, seed)?.elbo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SviFit {
    pub posterior: VariationalPosterior,
    pub steps: usize,
    pub final_elbo: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    /// One ascent step along `grad`.
    fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] += self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

pub fn fit_svi_design(design: &Design, cfg: &SviConfig) -> Result<SviFit> {
    check_labels(design)?;
    cfg.prior.validate()?;
    if cfg.max_steps == 0 || cfg.mc_samples_per_step == 0 || cfg.window == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("SVI config needs positive steps, samples, window and learning rate"));
    }
    let dim = design.dim() + 1;
    let init = if cfg.init_from_ml {
        fit_ml_design(design, &MlConfig { seed: cfg.seed, ..MlConfig::default() })?
    } else {
        WeightVector::zeros(design.dim())
    };
    let mut q = VariationalPosterior::around(&init, cfg.init_log_sigma);
    let mut adam = Adam::new(2 * dim, cfg.learning_rate);
    let mut params = vec![0.0; 2 * dim];
    let mut grad = vec![0.0; 2 * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut window_sum = 0.0;
    let mut prev_window: Option<f64> = None;
    let mut last_elbo = f64::NAN;
    let mut steps = 0;
    for step in 0..cfg.max_steps {
        let eps = draw_eps(&mut rng, cfg.mc_samples_per_step, dim);
        let g = elbo_with_eps(design, &q, &cfg.prior, &eps, cfg.mc_samples_per_step)?;
        if !g.elbo.is_finite() || g.grad_mu.iter().chain(&g.grad_log_sigma).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteElbo { step });
        }
        last_elbo = g.elbo;
        params[..dim].copy_from_slice(&q.mu);
        params[dim..].copy_from_slice(&q.log_sigma);
        grad[..dim].copy_from_slice(&g.grad_mu);
        grad[dim..].copy_from_slice(&g.grad_log_sigma);
        adam.ascend(&mut params, &grad);
        q.mu.copy_from_slice(&params[..dim]);
        q.log_sigma.copy_from_slice(&params[dim..]);
        steps = step + 1;

        window_sum += g.elbo;
        if steps % cfg.window == 0 {
            let mean = window_sum / cfg.window as f64;
            window_sum = 0.0;
            if let Some(prev) = prev_window {
                if mean - prev < cfg.rel_tol * prev.abs() {
                    break;
                }
            }
            prev_window = Some(mean);
        }
    }
    if q.mu.iter().chain(&q.log_sigma).any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteElbo { step: steps });
    }
    Ok(SviFit {
        posterior: q,
        steps,
        final_elbo: last_elbo,
    })
}

pub fn fit_svi(train: &SampleSet, spec: &CalibratorSpec, cfg: &SviConfig) -> Result<VariationalPosterior> {
    Ok(fit_svi_design(&Design::new(train, spec)?, cfg)?.posterior)
}

/// `t` independent draws `mu + sigma * eps`.
pub fn sample_weights(q: &VariationalPosterior, t: usize, seed: u64) -> Result<Vec<WeightVector>> {
    if t == 0 {
        return Err(Error::invalid("number of weight draws must be at least 1"));
    }
    let sigma = q.sigma();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..t)
        .map(|_| {
            let flat: Vec<f64> = q
                .mu
                .iter()
                .zip(&sigma)
                .map(|(m, s)| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + s * e
                })
                .collect();
            WeightVector::from_flat(&flat)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrators::{build_features, forward, FeatureVector, Method};
    use crate::data::{BoxCoords, FeatureSubset, MatchedSample};
    use rand::Rng;

    fn toy_design() -> Design {
        Design::from_pairs(&[
            (FeatureVector(vec![0.5]), true),
            (FeatureVector(vec![-1.0]), false),
            (FeatureVector(vec![2.0]), true),
            (FeatureVector(vec![0.1]), false),
            (FeatureVector(vec![-0.3]), true),
        ])
        .unwrap()
    }

    fn calibrated_set(n: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = BoxCoords::new(0.5, 0.5, 0.1, 0.1).unwrap();
        SampleSet::new(
            (0..n)
                .map(|_| {
                    let p: f64 = rng.random_range(0.02..0.98);
                    MatchedSample::new(p, bx, rng.random::<f64>() < p).unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn kl_examples() {
        let p = PriorSpec { mean: 0.0, std: 1.0 };
        let q = VariationalPosterior::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(kl_gaussians(&q, &p).unwrap(), 0.0);
        let q = VariationalPosterior::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_gaussians(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        // N(0, var 4) against N(0, 1)
        let q = VariationalPosterior::new(vec![0.0], vec![2f64.ln()]).unwrap();
        let expect = 0.5f64.ln() + 4.0 / 2.0 - 0.5;
        assert!((kl_gaussians(&q, &p).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.806853).abs() < 1e-6);
        assert!(kl_gaussians(&q, &PriorSpec { mean: 0.0, std: 0.0 }).is_err());
    }

    #[test]
    fn elbo_deterministic_and_degenerate_limit() {
        let design = toy_design();
        let prior = PriorSpec::default();
        let theta = fit_ml_design(&design, &MlConfig::default()).unwrap();
        let q = VariationalPosterior::around(&theta, -30.0);
        let a = elbo_and_gradient(&design, &q, &prior, 16, 5).unwrap().elbo;
        let b = elbo_and_gradient(&design, &q, &prior, 16, 5).unwrap().elbo;
        assert_eq!(a, b);
        let expect = -design.nll(&theta).unwrap() - kl_gaussians(&q, &prior).unwrap();
        assert!((a - expect).abs() < 1e-9, "{a} vs {expect}");
        // ELBO never exceeds -NLL(mu) in this limit
        assert!(a <= -design.nll(&theta).unwrap());
    }

    #[test]
    fn elbo_gradient_matches_common_random_numbers() {
        let design = toy_design();
        let prior = PriorSpec { mean: 0.3, std: 2.0 };
        let q = VariationalPosterior::new(vec![0.7, -0.2], vec![-0.5, -1.0]).unwrap();
        let g = elbo_and_gradient(&design, &q, &prior, 32, 17).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            for which in 0..2 {
                let mut up = q.clone();
                let mut dn = q.clone();
                let (pu, pd) = if which == 0 {
                    (&mut up.mu, &mut dn.mu)
                } else {
                    (&mut up.log_sigma, &mut dn.log_sigma)
                };
                pu[j] += h;
                pd[j] -= h;
                let fd = (elbo_and_gradient(&design, &up, &prior, 32, 17).unwrap().elbo
                    - elbo_and_gradient(&design, &dn, &prior, 32, 17).unwrap().elbo)
                    / (2.0 * h);
                let an = if which == 0 { g.grad_mu[j] } else { g.grad_log_sigma[j] };
                assert!((an - fd).abs() / an.abs().max(1e-3) < 1e-4, "{an} vs {fd}");
            }
        }
    }

    #[test]
    fn ml_rejects_degenerate_labels() {
        let d = Design::from_pairs(&[(FeatureVector(vec![0.1]), true), (FeatureVector(vec![0.2]), true)]).unwrap();
        assert!(matches!(fit_ml_design(&d, &MlConfig::default()), Err(Error::DegenerateLabels)));
        assert!(matches!(fit_svi_design(&d, &SviConfig::default()), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn ml_converges_and_lowers_nll() {
        let design = toy_design();
        let theta = fit_ml_design(&design, &MlConfig::default()).unwrap();
        let (f, g) = design.nll_and_gradient(&theta).unwrap();
        assert!(f <= design.nll(&WeightVector::zeros(1)).unwrap());
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() / 5.0 <= 1e-9);
    }

    #[test]
    fn ml_is_invariant_to_duplication() {
        let set = calibrated_set(3000, 4);
        let spec = CalibratorSpec::new(Method::Logistic, FeatureSubset::ConfOnly);
        let a = fit_ml(&set, &spec, &MlConfig::default()).unwrap();
        let mut doubled = set.clone();
        doubled.samples = set.samples.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let b = fit_ml(&doubled, &spec, &MlConfig::default()).unwrap();
        for (x, y) in a.to_flat().iter().zip(b.to_flat()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn ml_from_two_starts_agrees() {
        // convexity: Newton from zero and plain gradient descent from elsewhere meet
        let set = calibrated_set(2000, 8);
        let spec = CalibratorSpec::new(Method::Logistic, FeatureSubset::ConfOnly);
        let design = Design::new(&set, &spec).unwrap();
        let newton = fit_ml_design(&design, &MlConfig::default()).unwrap();
        let mut flat = vec![-1.5, 2.0];
        let n = design.n() as f64;
        for _ in 0..30_000 {
            let (_, g) = design.nll_and_gradient(&WeightVector::from_flat(&flat)).unwrap();
            for (t, gi) in flat.iter_mut().zip(&g) {
                *t -= gi / n;
            }
        }
        let gd = WeightVector::from_flat(&flat);
        let (f1, f2) = (design.nll(&newton).unwrap(), design.nll(&gd).unwrap());
        assert!((f1 - f2).abs() < 1e-6, "{f1} vs {f2}");
    }

    #[test]
    fn sample_weights_examples() {
        let q = VariationalPosterior::new(vec![0.3, -1.2], vec![-40.0, -40.0]).unwrap();
        for w in sample_weights(&q, 50, 1).unwrap() {
            assert!((w.weights[0] - 0.3).abs() < 1e-15 && (w.bias + 1.2).abs() < 1e-15);
        }
        let q = VariationalPosterior::new(vec![0.0], vec![0.0]).unwrap();
        let draws = sample_weights(&q, 100_000, 2).unwrap();
        let xs: Vec<f64> = draws.iter().map(|w| w.bias).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!(mean.abs() < 0.02 && (sd - 1.0).abs() < 0.02, "{mean} {sd}");
        assert_eq!(sample_weights(&q, 10, 3).unwrap(), sample_weights(&q, 10, 3).unwrap());
        assert!(sample_weights(&q, 0, 3).is_err());
    }

    #[test]
    fn tight_prior_pins_posterior_means() {
        let set = calibrated_set(2000, 12);
        let spec = CalibratorSpec::new(Method::Logistic, FeatureSubset::ConfOnly);
        let cfg = SviConfig {
            prior: PriorSpec { mean: 0.0, std: 1e-6 },
            ..SviConfig::default()
        };
        let q = fit_svi(&set, &spec, &cfg).unwrap();
        assert!(q.mu.iter().all(|m| m.abs() < 0.01), "{:?}", q.mu);
    }

    #[test]
    fn svi_is_deterministic() {
        let set = calibrated_set(500, 3);
        let spec = CalibratorSpec::new(Method::Logistic, FeatureSubset::ConfOnly);
        let cfg = SviConfig { max_steps: 600, ..SviConfig::default() };
        assert_eq!(fit_svi(&set, &spec, &cfg).unwrap(), fit_svi(&set, &spec, &cfg).unwrap());
    }

    #[test]
    fn posterior_mean_curve_approaches_ml_with_more_data() {
        use crate::synthetic::{generate, SyntheticSpec, TrueMap};
        let spec = CalibratorSpec::new(Method::Logistic, FeatureSubset::ConfOnly);
        let bx = BoxCoords::new(0.5, 0.5, 0.1, 0.1).unwrap();
        let sup = |n: usize| {
            let train = generate(&SyntheticSpec::new(n, 31, TrueMap::logistic(vec![2.0], -1.0))).unwrap();
            let ml = fit_ml(&train, &spec, &MlConfig::default()).unwrap();
            let mean = fit_svi(&train, &spec, &SviConfig::default()).unwrap().mean_weights();
            (0..=90)
                .map(|i| {
                    let phi = build_features(&MatchedSample::new(0.05 + i as f64 * 0.01, bx, true).unwrap(), &spec);
                    (forward(&phi, &ml).unwrap() - forward(&phi, &mean).unwrap()).abs()
                })
                .fold(0.0, f64::max)
        };
        let d: Vec<f64> = [500, 5_000, 50_000].into_iter().map(sup).collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }
}
