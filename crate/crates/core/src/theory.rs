//! Executable theory: synthetic oracle worlds with a known metric, draws
//! of the surrogate signal from the oracle Gram, the kernel-ratio /
//! metric-gap bound, the tail bound and sample-complexity threshold, the
//! Gaussian quadratic-form identities, and the end-to-end convergence
//! experiment that fits the metric on oracle data and measures how close
//! it lands.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{ChannelKind, ItemCatalog, MetaChannel};
use crate::error::{Error, Result};
use crate::gp::{factorize_spd, kernel_from_distance};
use crate::opt::TrainConfig;
use crate::siamese::{MetricMode, ModelShape, SiameseEnsembleParams};
use crate::ssl::{fit_ssl_replicated, freeze_mask};

/// A metric over raw points, with the induced kernel `exp(-D/2)`.
pub trait PointMetric: Sync {
    fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64;

    fn kernel(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        kernel_from_distance(self.distance(a, b))
    }
}

/// The fitted single-channel model viewed as a point metric.
pub struct SingleChannelMetric<'a>(&'a SiameseEnsembleParams);

impl<'a> SingleChannelMetric<'a> {
    pub fn new(params: &'a SiameseEnsembleParams) -> Result<Self> {
        if params.mode != MetricMode::SingleChannel || params.channels.len() != 1 {
            return Err(Error::Invariant(
                "point-metric view requires a single-channel model".into(),
            ));
        }
        Ok(Self(params))
    }
}

impl PointMetric for SingleChannelMetric<'_> {
    fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.0.distance_raw(&[a], &[b]).expect("validated shape")
    }
}

/// Constants entering the tail bound: the model noise, the residual
/// coupling constant, and the oracle Gram's largest eigenvalue with its
/// lower-bound ratio.
#[derive(Debug, Clone, Copy)]
pub struct TheoryConstants {
    pub sigma2: f64,
    pub alpha: f64,
    pub lambda_max: f64,
    pub d: f64,
}

/// `g(tau) = log(tau) + 1/tau - 1`, nonnegative on (0, inf).
pub fn g_fn(tau: f64) -> f64 {
    tau.ln() + 1.0 / tau - 1.0
}

impl TheoryConstants {
    pub fn c_eps(&self, eps: f64) -> f64 {
        eps * self.lambda_max / self.d
    }

    /// Argument of g in the tail bound: `sigma^4 / alpha (1 - c_eps) lambda_max`.
    pub fn g_arg(&self, eps: f64) -> Result<f64> {
        let c = self.c_eps(eps);
        if c >= 1.0 {
            return Err(Error::Domain(format!(
                "c_eps = {c} >= 1; assumption constants are inconsistent"
            )));
        }
        let tau = self.sigma2 * self.sigma2 / self.alpha * (1.0 - c) * self.lambda_max;
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Domain(format!("g argument {tau} is not positive")));
        }
        Ok(tau)
    }

    /// Tail probability bound `exp(-n g(tau) / 2)`, always in (0, 1].
    pub fn tail(&self, n: usize, eps: f64) -> Result<f64> {
        let tau = self.g_arg(eps)?;
        Ok((-0.5 * n as f64 * g_fn(tau)).exp())
    }

    /// Smallest n with `n >= (2 / g_eps) log(1 / delta)`.
    pub fn sample_complexity(&self, eps: f64, delta: f64) -> Result<usize> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("delta must be in (0, 1), got {delta}")));
        }
        let g_eps = g_fn(self.g_arg(eps)?);
        if g_eps <= 0.0 {
            return Err(Error::Domain(format!("g_eps = {g_eps} is not positive")));
        }
        Ok((2.0 / g_eps * (1.0 / delta).ln()).ceil() as usize)
    }
}

/// A synthetic world with a known metric: points, the true squared-distance
/// scale, the oracle Gram and the constants derived from it.
#[derive(Debug, Clone)]
pub struct OracleWorld {
    pub points: Vec<DVector<f64>>,
    pub metric_scale: f64,
    pub k_star: DMatrix<f64>,
    pub lambda_max: f64,
    pub d_const: f64,
    pub alpha_const: f64,
    pub sigma2: f64,
    chol_star: Cholesky<f64, Dyn>,
}

impl PointMetric for OracleWorld {
    fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.true_distance(a, b)
    }
}

impl OracleWorld {
    /// World over explicit points with `D* = scale * ||a - b||^2`.
    pub fn from_points(points: Vec<DVector<f64>>, metric_scale: f64, sigma2: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("oracle world needs at least 2 points".into()));
        }
        if sigma2 <= 0.0 {
            return Err(Error::Config("sigma2 must be positive".into()));
        }
        let n = points.len();
        let mut k_star = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let d = metric_scale * (&points[i] - &points[j]).norm_squared();
                let k = kernel_from_distance(d);
                k_star[(i, j)] = k;
                k_star[(j, i)] = k;
            }
        }
        let eigen = k_star.clone().symmetric_eigen();
        let lambda_max = eigen.eigenvalues.max();
        let inf_k = k_star.min();
        let d_const = lambda_max / inf_k;
        let (chol_star, _) = factorize_spd(&k_star)?;
        let mut world = Self {
            points,
            metric_scale,
            k_star,
            lambda_max,
            d_const,
            alpha_const: 0.0,
            sigma2,
            chol_star,
        };
        // A2's constant is existential; seed it with the tight value the
        // oracle kernel itself attains on a fixed internal draw.
        let r = world.sample(0x5eed);
        world.alpha_const = world.alpha_for(&world.k_star, sigma2, &r, 0.0);
        Ok(world)
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn true_distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.metric_scale * (a - b).norm_squared()
    }

    pub fn true_kernel(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        kernel_from_distance(self.true_distance(a, b))
    }

    pub fn constants(&self) -> TheoryConstants {
        TheoryConstants {
            sigma2: self.sigma2,
            alpha: self.alpha_const,
            lambda_max: self.lambda_max,
            d: self.d_const,
        }
    }

    /// One draw of the zero-mean surrogate with covariance `K*`.
    pub fn sample(&self, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let z = DVector::from_fn(self.n(), |_, _| StandardNormal.sample(&mut rng));
        self.chol_star.l_dirty().lower_triangle() * z
    }

    /// The tightest A2 constant a kernel with the given absolute sup error
    /// attains on this draw: `alpha = (1 - sup|k - k*|) (r - r_hat)' A (r - r_hat)`
    /// with `A = (K + sigma2 I)^2 / n`.
    pub fn alpha_for(
        &self,
        k: &DMatrix<f64>,
        sigma2: f64,
        r: &DVector<f64>,
        sup_abs_err: f64,
    ) -> f64 {
        let n = k.nrows();
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += sigma2;
        }
        let (chol, _) = factorize_spd(&a).expect("noise-regularized Gram");
        let resid = sigma2 * chol.solve(r);
        let quad = (&a * (&a * &resid)).dot(&resid) / n as f64;
        ((1.0 - sup_abs_err) * quad).max(0.0)
    }

    /// The world's points as a one-channel catalog for model fitting.
    pub fn to_catalog(&self) -> Result<ItemCatalog> {
        let dim = self.points[0].len();
        let items: Vec<String> = (0..self.n()).map(|i| format!("p{i:05}")).collect();
        let mut by_item = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            by_item.insert(item.clone(), self.points[i].iter().copied().collect());
        }
        let mut catalog = ItemCatalog::from_items(items)?;
        catalog.add_channel(MetaChannel::new(
            "coords",
            ChannelKind::Dense,
            dim,
            &by_item,
            catalog.items(),
        )?)?;
        Ok(catalog)
    }
}

/// Default oracle family: points uniform in `[0,1]^dim`, squared-Euclidean
/// metric scaled by 4 so the oracle kernel spans roughly [0.01, 1].
pub const DEFAULT_METRIC_SCALE: f64 = 4.0;

pub fn make_oracle(n: usize, dim: usize, seed: u64, sigma2: f64) -> Result<OracleWorld> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let points: Vec<DVector<f64>> = (0..n)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(0.0..1.0)))
        .collect();
    OracleWorld::from_points(points, DEFAULT_METRIC_SCALE, sigma2)
}

/// One surrogate draw `r ~ N(0, K*)`, deterministic under seed.
pub fn sample_surrogate(world: &OracleWorld, seed: u64) -> DVector<f64> {
    world.sample(seed)
}

/// The metric-gap bound `2 log(1 / (1 - eps))` for a kernel-ratio error eps.
pub fn metric_gap_bound(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("eps must be in (0, 1), got {eps}")));
    }
    Ok(2.0 * (1.0 / (1.0 - eps)).ln())
}

/// Measured discrepancy of a model against the oracle over point pairs.
#[derive(Debug, Clone, Copy)]
pub struct LemmaCheck {
    /// Max relative kernel error over the pairs.
    pub eps_hat: f64,
    /// Max absolute kernel error over the pairs.
    pub sup_abs_err: f64,
    /// Max metric discrepancy over the pairs.
    pub max_gap: f64,
    /// `2 log(1/(1-eps_hat))`, defined only when eps_hat < 1.
    pub bound: Option<f64>,
    /// Whether the gap respects the bound; None when the bound is undefined.
    pub holds: Option<bool>,
}

/// Measure the kernel/metric discrepancy over explicit point pairs and
/// check the gap bound. The bound is a proved implication, so `holds` must
/// come back true whenever `eps_hat < 1`.
pub fn check_lemma_at(
    model: &dyn PointMetric,
    world: &OracleWorld,
    pairs: &[(DVector<f64>, DVector<f64>)],
) -> LemmaCheck {
    let mut eps_hat = 0.0f64;
    let mut sup_abs = 0.0f64;
    let mut max_gap = 0.0f64;
    for (a, b) in pairs {
        let k_true = world.true_kernel(a, b);
        let k_hat = model.kernel(a, b);
        eps_hat = eps_hat.max((k_hat - k_true).abs() / k_true);
        sup_abs = sup_abs.max((k_hat - k_true).abs());
        max_gap = max_gap.max((model.distance(a, b) - world.true_distance(a, b)).abs());
    }
    let bound = (eps_hat < 1.0).then(|| 2.0 * (1.0 / (1.0 - eps_hat)).ln());
    let holds = bound.map(|b| max_gap <= b * (1.0 + 1e-12) + 1e-12);
    LemmaCheck {
        eps_hat,
        sup_abs_err: sup_abs,
        max_gap,
        bound,
        holds,
    }
}

/// [`check_lemma_at`] over pairs of world-point indices.
pub fn check_lemma(
    model: &dyn PointMetric,
    world: &OracleWorld,
    pairs: &[(usize, usize)],
) -> LemmaCheck {
    let owned: Vec<(DVector<f64>, DVector<f64>)> = pairs
        .iter()
        .map(|&(i, j)| (world.points[i].clone(), world.points[j].clone()))
        .collect();
    check_lemma_at(model, world, &owned)
}

/// Tail bound of the probability that the kernel-ratio error exceeds eps.
pub fn theorem1_tail(n: usize, eps: f64, constants: &TheoryConstants) -> Result<f64> {
    constants.tail(n, eps)
}

/// Observations sufficient for the metric-gap guarantee at confidence delta.
pub fn theorem2_sample_complexity(
    eps: f64,
    delta: f64,
    constants: &TheoryConstants,
) -> Result<usize> {
    constants.sample_complexity(eps, delta)
}

/// Monte-Carlo vs closed-form check of
/// `E[exp(lambda r' A r)] = |I - 2 lambda A K*|^(-1/2)`.
#[derive(Debug, Clone, Copy)]
pub struct MgfCheck {
    pub monte_carlo: f64,
    pub closed_form: f64,
    pub rel_err: f64,
}

/// Run the identity check with `draws` samples. `a` must be symmetric PSD
/// and `I - 2 lambda A K*` positive definite.
pub fn mgf_identity_check(
    world: &OracleWorld,
    lambda: f64,
    a: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> Result<MgfCheck> {
    mgf_identity_check_kernel(&world.k_star, &world.chol_star, lambda, a, draws, seed)
}

fn mgf_identity_check_kernel(
    k_star: &DMatrix<f64>,
    chol_star: &Cholesky<f64, Dyn>,
    lambda: f64,
    a: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> Result<MgfCheck> {
    let n = k_star.nrows();
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::Dimension {
            context: "quadratic form",
            expected: n,
            got: a.nrows(),
        });
    }
    if lambda < 0.0 {
        return Err(Error::Domain("lambda must be nonnegative".into()));
    }
    if (a - a.transpose()).amax() > 1e-12 {
        return Err(Error::Domain("quadratic form matrix must be symmetric".into()));
    }
    // Eigenvalues of A K* equal those of L' A L, which is symmetric PSD.
    let l = chol_star.l_dirty().lower_triangle();
    let sym = l.transpose() * a * &l;
    let eigen = sym.symmetric_eigen();
    let mut closed = 1.0f64;
    for &mu in eigen.eigenvalues.iter() {
        let factor = 1.0 - 2.0 * lambda * mu;
        if factor <= 0.0 {
            return Err(Error::Domain(format!(
                "I - 2 lambda A K* is not positive definite (factor {factor})"
            )));
        }
        closed *= factor.powf(-0.5);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let r = &l * z;
        acc += (lambda * (a * &r).dot(&r)).exp();
    }
    let mc = acc / draws as f64;
    Ok(MgfCheck {
        monte_carlo: mc,
        closed_form: closed,
        rel_err: (mc - closed).abs() / closed,
    })
}

/// Configuration of the convergence experiment.
#[derive(Debug, Clone)]
pub struct ConvergenceSpec {
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub dim: usize,
    pub sigma2: f64,
    pub hidden: usize,
    /// Independent surrogate draws fitted jointly per trial. A single draw
    /// cannot identify the kernel (the metric can warp to that draw's
    /// level sets and beat the oracle likelihood); replicates restore
    /// identifiability.
    pub draws_per_trial: usize,
    /// Held-out random pairs per world point (the sup is approximated over
    /// all world pairs plus this many fresh pairs).
    pub heldout_per_point: usize,
    pub train: TrainConfig,
    /// Keep the model noise at the generative value during fitting.
    pub fix_noise: bool,
    pub seed: u64,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            n_grid: vec![16, 256],
            trials: 5,
            dim: 2,
            sigma2: 0.05,
            hidden: 8,
            draws_per_trial: 32,
            heldout_per_point: 10,
            train: TrainConfig {
                steps: 1500,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            fix_noise: true,
            seed: 1,
        }
    }
}

/// One trial's measurements.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub n: usize,
    pub trial: usize,
    pub sup_gap: f64,
    pub eps_hat: f64,
    pub lemma_bound: Option<f64>,
    pub theorem1_tail: Option<f64>,
}

/// Report over the n-grid, plus per-n mean gaps over successful trials.
#[derive(Debug, Clone)]
pub struct TheoryReport {
    pub rows: Vec<TrialResult>,
    pub mean_gap_by_n: Vec<(usize, f64)>,
    pub failed_trials: usize,
}

impl TheoryReport {
    /// CSV rows `n,trial,sup_gap,eps_hat,lemma_bound,theorem1_tail`;
    /// undefined bounds print as empty fields.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "n,trial,sup_gap,eps_hat,lemma_bound,theorem1_tail")?;
        for r in &self.rows {
            let fmt = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.n,
                r.trial,
                r.sup_gap,
                r.eps_hat,
                fmt(r.lemma_bound),
                fmt(r.theorem1_tail)
            )?;
        }
        Ok(())
    }
}

fn trial_seed(base: u64, n: usize, trial: usize) -> u64 {
    base ^ (trial as u64) ^ ((n as u64) << 32)
}

fn run_trial(spec: &ConvergenceSpec, n: usize, trial: usize) -> Result<TrialResult> {
    let seed = trial_seed(spec.seed, n, trial);
    let world = make_oracle(n, spec.dim, seed, spec.sigma2)?;
    let draws: Vec<DVector<f64>> = (0..spec.draws_per_trial.max(1))
        .map(|d| sample_surrogate(&world, seed ^ (0x100 + d as u64)))
        .collect();
    let r = draws[0].clone();
    let catalog = world.to_catalog()?;
    let items: Vec<usize> = (0..n).collect();
    let init = SiameseEnsembleParams::init(
        &[spec.dim],
        n,
        &ModelShape {
            hidden: spec.hidden,
            id_dim: None,
            learn_lambda: false,
            mode: MetricMode::SingleChannel,
        },
        seed ^ 0x2,
    );
    let mut train = spec.train.clone();
    train.seed = seed ^ 0x3;
    let freeze = if spec.fix_noise {
        Some(freeze_mask(&init, &["noise"])?)
    } else {
        None
    };
    let (state, _trace) = fit_ssl_replicated(
        &catalog,
        &items,
        &draws,
        &init,
        spec.sigma2.ln(),
        &train,
        freeze.as_ref(),
    )?;

    // Sup over all world pairs plus fresh held-out pairs.
    let mut pairs: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((world.points[i].clone(), world.points[j].clone()));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x4);
    for _ in 0..spec.heldout_per_point * n {
        let a = DVector::from_fn(spec.dim, |_, _| rng.random_range(0.0..1.0));
        let b = DVector::from_fn(spec.dim, |_, _| rng.random_range(0.0..1.0));
        pairs.push((a, b));
    }
    let metric = SingleChannelMetric::new(&state.metric)?;
    let check = check_lemma_at(&metric, &world, &pairs);

    // Tail bound at the fitted model's constants, conditional on the
    // a-posteriori alpha.
    let tail = if check.eps_hat < 1.0 {
        let alpha = world.alpha_for(state.gram_matrix()?, state.sigma2(), &r, check.sup_abs_err);
        let constants = TheoryConstants {
            sigma2: state.sigma2(),
            alpha,
            lambda_max: world.lambda_max,
            d: world.d_const,
        };
        constants.tail(n, check.eps_hat).ok()
    } else {
        None
    };
    Ok(TrialResult {
        n,
        trial,
        sup_gap: check.max_gap,
        eps_hat: check.eps_hat,
        lemma_bound: check.bound,
        theorem1_tail: tail,
    })
}

/// Fit the metric on oracle draws across the n-grid and measure the sup
/// metric discrepancy. Trials run in parallel, each with its own derived
/// seed; failed fits are counted and excluded from the means.
pub fn convergence_experiment(spec: &ConvergenceSpec) -> Result<TheoryReport> {
    if spec.trials < 1 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if !spec.n_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("n_grid must be strictly increasing".into()));
    }
    let jobs: Vec<(usize, usize)> = spec
        .n_grid
        .iter()
        .flat_map(|&n| (0..spec.trials).map(move |t| (n, t)))
        .collect();
    let outcomes: Vec<Result<TrialResult>> = jobs
        .par_iter()
        .map(|&(n, t)| run_trial(spec, n, t))
        .collect();
    let mut rows = Vec::new();
    let mut failed = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(_) => failed += 1,
        }
    }
    let mut mean_gap_by_n = Vec::new();
    for &n in &spec.n_grid {
        let gaps: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.sup_gap).collect();
        if !gaps.is_empty() {
            mean_gap_by_n.push((n, gaps.iter().sum::<f64>() / gaps.len() as f64));
        }
    }
    Ok(TheoryReport {
        rows,
        mean_gap_by_n,
        failed_trials: failed,
    })
}
