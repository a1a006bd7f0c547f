//! Empirical checks of the statistical consequences of the approximation
//! bounds: a Bernstein-type event for the empirical residual and the
//! adversarial-risk gap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::metrics::{lipschitz_estimate, sample_pairs, NET_STEP};
use crate::targets::TargetFunction;
use crate::taylor::{build_euclidean, ConstructedApproximator, EuclideanParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    /// Samples per repetition.
    pub n: usize,
    /// Noise bound: xi ~ U[-sigma, sigma].
    pub sigma: f64,
    /// Target accuracy.
    pub eps: f64,
    /// Adversarial radii.
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Loss Lipschitz constant (1 for the absolute loss).
    #[serde(default = "one")]
    pub l_lip: f64,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub budget: SearchBudget,
}

fn default_deltas() -> Vec<f64> {
    vec![0.01, 0.02, 0.05]
}

fn one() -> f64 {
    1.0
}

fn default_reps() -> usize {
    200
}

impl RiskConfig {
    pub fn new(n: usize, sigma: f64, eps: f64) -> Self {
        Self {
            n,
            sigma,
            eps,
            deltas: default_deltas(),
            l_lip: 1.0,
            repetitions: default_reps(),
            seed: 0,
            budget: SearchBudget::default(),
        }
    }

    /// 0 < eps < min(sigma, 1), n and the repetition count positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < self.sigma.min(1.0)) {
            return Err(ForgeError::Precondition(format!(
                "need 0 < eps < min(sigma, 1), got eps = {}, sigma = {}",
                self.eps, self.sigma
            )));
        }
        if self.n == 0 || self.repetitions == 0 {
            return Err(ForgeError::Parameter("n and repetitions must be positive".into()));
        }
        if self.deltas.iter().any(|d| !(*d >= 0.0)) || !(self.l_lip > 0.0) {
            return Err(ForgeError::Parameter("deltas must be >= 0 and l_lip > 0".into()));
        }
        Ok(())
    }

    /// 1 - exp(-3 n eps^2 / (104 sigma^4)).
    pub fn theoretical_floor(&self) -> f64 {
        1.0 - (-3.0 * self.n as f64 * self.eps.powi(2) / (104.0 * self.sigma.powi(4))).exp()
    }
}

/// Inner-maximization effort per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBudget {
    pub directions: usize,
    pub ascent_steps: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            directions: 64,
            ascent_steps: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    Absolute,
    /// (g - y)^2 with the Lipschitz constant over the data range.
    Squared {
        lipschitz: f64,
    },
}

impl Loss {
    pub fn eval(&self, pred: f64, y: f64) -> f64 {
        match self {
            Loss::Absolute => (pred - y).abs(),
            Loss::Squared { .. } => (pred - y).powi(2),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Loss::Absolute => 1.0,
            Loss::Squared { lipschitz } => lipschitz,
        }
    }

    /// Squared loss with L = 2 (max |y| + max |g|) over the data.
    pub fn squared_for<G: Fn(&[f64]) -> f64>(g: &G, data: &[Labeled]) -> Self {
        let ymax = data.iter().map(|d| d.y.abs()).fold(0.0, f64::max);
        let gmax = data.iter().map(|d| g(&d.x).abs()).fold(0.0, f64::max);
        Loss::Squared {
            lipschitz: 2.0 * (ymax + gmax),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub x: Vec<f64>,
    pub y: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// x ~ U(0,1)^D, y = f(x) + xi with xi ~ U[-sigma, sigma].
pub fn noisy_samples(f: &TargetFunction, n: usize, sigma: f64, rng: &mut impl Rng) -> Vec<Labeled> {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..f.dim()).map(|_| rng.gen::<f64>()).collect();
            let xi = if sigma > 0.0 {
                rng.gen_range(-sigma..=sigma)
            } else {
                0.0
            };
            Labeled { y: f.eval(&x) + xi, x }
        })
        .collect()
}

/// (1/n) sum (g(x_i) - y_i)^2.
pub fn empirical_residual<G: Fn(&[f64]) -> f64>(g: &G, data: &[Labeled]) -> f64 {
    data.iter().map(|d| (g(&d.x) - d.y).powi(2)).sum::<f64>() / data.len() as f64
}

/// Accuracy-driven approximator: N = max(2, ceil(eps^(-1/alpha))), so
/// eta = N^-alpha <= eps, with M~ = N and J~ = N^(D-1).
pub fn risk_approximator(f: &TargetFunction, eps: f64) -> Result<ConstructedApproximator> {
    let n = (eps.powf(-1.0 / f.alpha as f64) - 1e-9).ceil().max(2.0) as usize;
    let dim = f.dim() as u32;
    build_euclidean(f, &EuclideanParams::new(n, n.pow(dim - 1)))
}

/// sqrt(D) eps^((alpha-1)/alpha): the Lipschitz excess of the approximant.
pub fn lipschitz_excess(dim: usize, alpha: usize, eps: f64) -> f64 {
    (dim as f64).sqrt() * eps.powf((alpha as f64 - 1.0) / alpha as f64)
}

/// Lipschitz estimate of g on (0,1)^D from seeded pairs and probes.
pub fn approximant_lipschitz<G: Fn(&[f64]) -> f64 + Sync>(g: &G, dim: usize, seed: u64) -> f64 {
    let pairs = sample_pairs(dim, 4000, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11b);
    let probes: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.01..0.99)).collect())
        .collect();
    lipschitz_estimate(g, &pairs, &probes, NET_STEP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernsteinReport {
    pub n: usize,
    pub sigma: f64,
    pub eps: f64,
    pub repetitions: usize,
    pub successes: usize,
    pub success_fraction: f64,
    pub theoretical_floor: f64,
    /// 2 eps^2 + sigma^2.
    pub residual_bound: f64,
    pub residuals: Vec<f64>,
    pub lipschitz_estimate: f64,
    /// 1 + sqrt(D) eps^((alpha-1)/alpha), times 1.05 slack.
    pub lipschitz_bound: f64,
    /// Monte Carlo E[(g(x) - y)^2] over 10^5 samples and its standard error.
    pub expected_risk: f64,
    pub expected_risk_stderr: f64,
    /// eps^2 + sigma^2.
    pub expected_risk_bound: f64,
    pub passed: bool,
}

/// Repeats the residual experiment with independent per-repetition streams
/// and counts how often both the residual and the Lipschitz events hold.
pub fn empirical_residual_study<G>(cfg: &RiskConfig, f: &TargetFunction, g: &G) -> Result<BernsteinReport>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let residual_bound = 2.0 * cfg.eps.powi(2) + cfg.sigma.powi(2);
    let residuals: Vec<f64> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(cfg.seed, r as u64 + 1);
            empirical_residual(g, &noisy_samples(f, cfg.n, cfg.sigma, &mut rng))
        })
        .collect();
    let lip = approximant_lipschitz(g, f.dim(), cfg.seed);
    let lip_bound = 1.05 * (1.0 + lipschitz_excess(f.dim(), f.alpha, cfg.eps));
    let lip_ok = lip <= lip_bound;
    let successes = if lip_ok {
        residuals.iter().filter(|&&v| v <= residual_bound).count()
    } else {
        0
    };

    let mut rng = stream_rng(cfg.seed, 0);
    let big = noisy_samples(f, 100_000, cfg.sigma, &mut rng);
    let sq: Vec<f64> = big.par_iter().map(|d| (g(&d.x) - d.y).powi(2)).collect();
    let mean = sq.iter().sum::<f64>() / sq.len() as f64;
    let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (sq.len() - 1) as f64;
    let stderr = (var / sq.len() as f64).sqrt();
    let expected_risk_bound = cfg.eps.powi(2) + cfg.sigma.powi(2);

    let success_fraction = successes as f64 / cfg.repetitions as f64;
    let floor = cfg.theoretical_floor();
    Ok(BernsteinReport {
        n: cfg.n,
        sigma: cfg.sigma,
        eps: cfg.eps,
        repetitions: cfg.repetitions,
        successes,
        success_fraction,
        theoretical_floor: floor,
        residual_bound,
        residuals,
        lipschitz_estimate: lip,
        lipschitz_bound: lip_bound,
        expected_risk: mean,
        expected_risk_stderr: stderr,
        expected_risk_bound,
        passed: success_fraction >= floor && mean <= expected_risk_bound + 3.0 * stderr,
    })
}

/// Uniform direction by rejection from the cube onto the unit ball.
fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if n > 1e-6 && n <= 1.0 {
            return v.into_iter().map(|t| t / n).collect();
        }
    }
}

/// Estimate of sup over the delta-ball around x of the loss: x itself,
/// random directions at the boundary and inside, then coordinate ascent
/// with halving steps, projected onto the ball.
fn inner_sup<G: Fn(&[f64]) -> f64>(
    g: &G,
    point: &Labeled,
    delta: f64,
    loss: &Loss,
    budget: &SearchBudget,
    rng: &mut impl Rng,
) -> f64 {
    let x = &point.x;
    let value = |p: &[f64]| loss.eval(g(p), point.y);
    let mut best = value(x);
    if delta == 0.0 {
        return best;
    }
    let dim = x.len();
    let mut arg = x.clone();
    for k in 0..budget.directions {
        let u = random_unit(dim, rng);
        let t = if k % 2 == 0 { 1.0 } else { rng.gen::<f64>() };
        let p: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + delta * t * b).collect();
        let v = value(&p);
        if v > best {
            best = v;
            arg = p;
        }
    }
    let project = |p: &mut Vec<f64>| {
        let d = p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if d > delta {
            for (pj, xj) in p.iter_mut().zip(x) {
                *pj = xj + (*pj - xj) * delta / d;
            }
        }
    };
    let mut step = delta / 2.0;
    for _ in 0..budget.ascent_steps {
        let mut improved = false;
        for j in 0..dim {
            for sign in [1.0, -1.0] {
                let mut p = arg.clone();
                p[j] += sign * step;
                project(&mut p);
                let v = value(&p);
                if v > best {
                    best = v;
                    arg = p;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    best
}

/// Adversarial risk estimates for every radius in `deltas`. Each sample
/// reuses one seeded direction stream for all radii, and the per-sample
/// estimate is carried upward in increasing radius, so the returned values
/// are nondecreasing in delta. delta = 0 gives the plain empirical risk.
pub fn adversarial_risk_curve<G: Fn(&[f64]) -> f64 + Sync>(
    g: &G,
    data: &[Labeled],
    deltas: &[f64],
    loss: &Loss,
    budget: &SearchBudget,
    seed: u64,
) -> Vec<f64> {
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[a].total_cmp(&deltas[b]));
    let per_sample: Vec<Vec<f64>> = data
        .par_iter()
        .enumerate()
        .map(|(i, point)| {
            let mut out = vec![0.0; deltas.len()];
            let mut carried = f64::NEG_INFINITY;
            for &k in &order {
                let mut rng = stream_rng(seed, i as u64);
                carried = carried.max(inner_sup(g, point, deltas[k], loss, budget, &mut rng));
                out[k] = carried;
            }
            out
        })
        .collect();
    (0..deltas.len())
        .map(|k| per_sample.iter().map(|v| v[k]).sum::<f64>() / data.len() as f64)
        .collect()
}

/// Mean over the data of the estimated sup of the loss on B_delta(x).
pub fn adversarial_risk<G: Fn(&[f64]) -> f64 + Sync>(
    g: &G,
    data: &[Labeled],
    delta: f64,
    loss: &Loss,
    budget: &SearchBudget,
    seed: u64,
) -> f64 {
    adversarial_risk_curve(g, data, &[delta], loss, budget, seed)[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub delta: f64,
    pub risk: f64,
    pub gap: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub plain_risk: f64,
    pub l_lip: f64,
    /// L_Lip (1 + sqrt(D) eps^((alpha-1)/alpha)).
    pub slope_bound: f64,
    pub lipschitz_estimate: f64,
    pub gap_table: Vec<GapRow>,
    pub passed: bool,
}

/// Absolute slack on each gap comparison for floating-point summation.
pub const GAP_SLACK: f64 = 1e-12;

/// R(g, delta) - R(g, 0) against L_Lip (1 + sqrt(D) eps^((alpha-1)/alpha)) delta
/// with the absolute loss on fresh noisy data.
pub fn adversarial_gap_check<G>(cfg: &RiskConfig, f: &TargetFunction, g: &G) -> Result<AdversarialReport>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let loss = Loss::Absolute;
    if cfg.l_lip < loss.lipschitz() {
        return Err(ForgeError::Precondition(format!(
            "declared loss Lipschitz constant {} is below that of the absolute loss",
            cfg.l_lip
        )));
    }
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    let data = noisy_samples(f, cfg.n, cfg.sigma, &mut rng);
    let mut radii = vec![0.0];
    radii.extend(&cfg.deltas);
    let risks = adversarial_risk_curve(g, &data, &radii, &loss, &cfg.budget, cfg.seed);
    let slope_bound = cfg.l_lip * (1.0 + lipschitz_excess(f.dim(), f.alpha, cfg.eps));
    let gap_table: Vec<GapRow> = cfg
        .deltas
        .iter()
        .zip(&risks[1..])
        .map(|(&delta, &risk)| {
            let gap = risk - risks[0];
            let bound = slope_bound * delta;
            GapRow {
                delta,
                risk,
                gap,
                bound,
                passed: gap <= bound + GAP_SLACK,
            }
        })
        .collect();
    Ok(AdversarialReport {
        plain_risk: risks[0],
        l_lip: cfg.l_lip,
        slope_bound,
        lipschitz_estimate: approximant_lipschitz(g, f.dim(), cfg.seed),
        passed: gap_table.iter().all(|r| r.passed),
        gap_table,
    })
}
