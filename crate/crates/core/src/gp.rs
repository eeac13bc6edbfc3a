//! Gaussian-process machinery over the learned metric: the kernel
//! `exp(-D/2)`, Gram matrices, the negative log marginal likelihood and its
//! gradient chained into the metric parameters, posterior prediction, and a
//! low-rank inducing-point path.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::data::ItemCatalog;
use crate::error::{Error, Result};
use crate::siamese::{
    backprop_tower, sigmoid, EnsembleGrads, ItemEmbedding, LambdaParam, MetricMode,
    SiameseEnsembleParams,
};

/// Jitter ladder tried when factorizing `K + sigma^2 I`.
pub const JITTER_LADDER: [f64; 8] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Factorize the inducing Gram, escalating the nugget until it succeeds.
///
/// The warped ensemble kernel is not guaranteed positive definite and its
/// m-by-m Gram can dip far below what the dense ladder repairs. A larger
/// nugget only shrinks the low-rank `Q = U (K_pp + jI)^-1 U'` while
/// keeping it positive semidefinite, so escalation is always sound; for
/// kernel entries bounded by 1 a nugget above m is guaranteed to work.
fn factorize_inducing(k_pp: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    factorize_bounded_kernel(k_pp)
}

/// Factorization with an escalating nugget for Gram matrices of kernels
/// bounded by 1, where a nugget above the matrix order always succeeds.
/// Adaptation and low-rank objectives must stay evaluable at arbitrary
/// parameters; a heavy nugget degrades the fit but keeps it defined.
pub(crate) fn factorize_bounded_kernel(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut ladder: Vec<f64> = vec![0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];
    let mut j = 1.0;
    let ceiling = 4.0 * a.nrows() as f64;
    while j <= ceiling {
        ladder.push(j);
        j *= 2.0;
    }
    factorize_with_ladder(a, &ladder)
}

/// Kernel value induced by a metric value: `k = exp(-D / 2)`.
pub fn kernel_from_distance(d: f64) -> f64 {
    (-0.5 * d).exp()
}

/// Kernel between two catalog items under the metric.
pub fn kernel(
    metric: &SiameseEnsembleParams,
    catalog: &ItemCatalog,
    a: usize,
    b: usize,
) -> Result<f64> {
    Ok(kernel_from_distance(metric.distance(catalog, a, b)?))
}

pub(crate) fn embed_items(
    metric: &SiameseEnsembleParams,
    catalog: &ItemCatalog,
    items: &[usize],
) -> Result<Vec<ItemEmbedding>> {
    items
        .iter()
        .map(|&i| metric.embed_item(catalog, i))
        .collect()
}

pub(crate) fn gram_from_embeddings(
    metric: &SiameseEnsembleParams,
    embs: &[ItemEmbedding],
) -> DMatrix<f64> {
    let n = embs.len();
    let mut k = DMatrix::zeros(n, n);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| kernel_from_distance(metric.distance_cached(&embs[i], &embs[j])))
                .collect()
        })
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + off;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Gram matrix of the kernel on a list of catalog items.
pub fn gram(
    metric: &SiameseEnsembleParams,
    catalog: &ItemCatalog,
    items: &[usize],
) -> Result<DMatrix<f64>> {
    if items.is_empty() {
        return Err(Error::Config("gram needs at least one item".into()));
    }
    let embs = embed_items(metric, catalog, items)?;
    Ok(gram_from_embeddings(metric, &embs))
}

/// Cholesky of an SPD matrix, escalating jitter until it succeeds.
pub fn factorize_spd(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    factorize_with_ladder(a, &JITTER_LADDER)
}

fn factorize_with_ladder(
    a: &DMatrix<f64>,
    ladder: &[f64],
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut attempted = Vec::new();
    for &jitter in ladder {
        attempted.push(jitter);
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, jitter));
        }
    }
    Err(Error::Factorization { attempted })
}

fn log_det_from_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// `1/2 log|K + sigma^2 I| + 1/2 r' (K + sigma^2 I)^-1 r` for an explicit
/// Gram matrix.
pub fn nll_from_gram(k: &DMatrix<f64>, sigma2: f64, r: &DVector<f64>) -> Result<f64> {
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += sigma2;
    }
    let (chol, _) = factorize_spd(&a)?;
    let alpha = chol.solve(r);
    Ok(0.5 * log_det_from_chol(&chol) + 0.5 * r.dot(&alpha))
}

#[derive(Debug, Clone)]
struct DenseFit {
    k: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

/// A GP over a train-item subset: metric parameters, log noise, centered
/// targets, cached embeddings and (on the dense path) the cached Gram
/// factorization. States built with [`GpState::assemble`] skip the dense
/// factorization and serve the low-rank path only.
#[derive(Debug, Clone)]
pub struct GpState {
    pub metric: SiameseEnsembleParams,
    pub log_noise: f64,
    pub train_items: Vec<usize>,
    pub r: DVector<f64>,
    dense: Option<DenseFit>,
    embs: Vec<ItemEmbedding>,
}

impl GpState {
    fn base(
        metric: SiameseEnsembleParams,
        log_noise: f64,
        catalog: &ItemCatalog,
        train_items: Vec<usize>,
        r: DVector<f64>,
    ) -> Result<Self> {
        if train_items.len() != r.len() {
            return Err(Error::Dimension {
                context: "targets",
                expected: train_items.len(),
                got: r.len(),
            });
        }
        if train_items.is_empty() {
            return Err(Error::Config("GP needs at least one training item".into()));
        }
        metric.validate()?;
        let embs = embed_items(&metric, catalog, &train_items)?;
        Ok(Self {
            metric,
            log_noise,
            train_items,
            r,
            dense: None,
            embs,
        })
    }

    /// Assemble the Gram matrix and its factorization for the given metric.
    pub fn fit(
        metric: SiameseEnsembleParams,
        log_noise: f64,
        catalog: &ItemCatalog,
        train_items: Vec<usize>,
        r: DVector<f64>,
    ) -> Result<Self> {
        let mut state = Self::base(metric, log_noise, catalog, train_items, r)?;
        state.factorize_dense()?;
        Ok(state)
    }

    /// Cache embeddings only; no n-by-n Gram or factorization is formed.
    pub fn assemble(
        metric: SiameseEnsembleParams,
        log_noise: f64,
        catalog: &ItemCatalog,
        train_items: Vec<usize>,
        r: DVector<f64>,
    ) -> Result<Self> {
        Self::base(metric, log_noise, catalog, train_items, r)
    }

    /// Like [`GpState::fit`], but degrades to an assembled state when the
    /// dense Gram cannot be factorized (the metric itself stays usable).
    pub fn fit_or_assemble(
        metric: SiameseEnsembleParams,
        log_noise: f64,
        catalog: &ItemCatalog,
        train_items: Vec<usize>,
        r: DVector<f64>,
    ) -> Result<Self> {
        let mut state = Self::base(metric, log_noise, catalog, train_items, r)?;
        let _ = state.factorize_dense();
        Ok(state)
    }

    fn factorize_dense(&mut self) -> Result<()> {
        let k = gram_from_embeddings(&self.metric, &self.embs);
        let sigma2 = self.sigma2();
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += sigma2;
        }
        let (chol, jitter) = factorize_spd(&a)?;
        self.dense = Some(DenseFit { k, chol, jitter });
        Ok(())
    }

    fn dense(&self) -> Result<&DenseFit> {
        self.dense.as_ref().ok_or_else(|| {
            Error::Numerical("state has no dense factorization (assembled for the low-rank path)".into())
        })
    }

    pub fn has_dense_factorization(&self) -> bool {
        self.dense.is_some()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn jitter(&self) -> Result<f64> {
        Ok(self.dense()?.jitter)
    }

    pub fn n(&self) -> usize {
        self.train_items.len()
    }

    pub fn gram_matrix(&self) -> Result<&DMatrix<f64>> {
        Ok(&self.dense()?.k)
    }

    pub(crate) fn chol(&self) -> Result<&Cholesky<f64, Dyn>> {
        Ok(&self.dense()?.chol)
    }

    /// Negative log marginal likelihood via the cached factorization.
    pub fn nll(&self) -> Result<f64> {
        let chol = self.chol()?;
        let alpha = chol.solve(&self.r);
        Ok(0.5 * log_det_from_chol(chol) + 0.5 * self.r.dot(&alpha))
    }

    /// Posterior mean and variance at a catalog item. Variance is clamped at
    /// zero when it is negative by less than 1e-10.
    pub fn predict(&self, catalog: &ItemCatalog, x_star: usize) -> Result<(f64, f64)> {
        let chol = self.chol()?;
        let e_star = self.metric.embed_item(catalog, x_star)?;
        let k_star = DVector::from_fn(self.n(), |i, _| {
            kernel_from_distance(self.metric.distance_cached(&self.embs[i], &e_star))
        });
        let k_ss = kernel_from_distance(self.metric.distance_cached(&e_star, &e_star));
        let alpha = chol.solve(&self.r);
        let mean = k_star.dot(&alpha);
        let var = k_ss - k_star.dot(&chol.solve(&k_star));
        if var < -1e-10 {
            return Err(Error::Numerical(format!(
                "predictive variance {var} is negative beyond tolerance"
            )));
        }
        Ok((mean, var.max(0.0)))
    }

    /// In-sample predictions `K (K + sigma^2 I)^-1 r`.
    pub fn fitted_values(&self) -> Result<DVector<f64>> {
        let dense = self.dense()?;
        let alpha = dense.chol.solve(&self.r);
        Ok(&dense.k * alpha)
    }

    /// Residual via the factorization: `sigma^2 (K + sigma^2 I)^-1 r`.
    pub fn whitened_residual(&self) -> Result<DVector<f64>> {
        Ok(self.sigma2() * self.chol()?.solve(&self.r))
    }
}

/// Gradients of the NLL w.r.t. every metric parameter and the log noise.
#[derive(Debug, Clone)]
pub struct GpGrads {
    pub metric: EnsembleGrads,
    pub log_noise: f64,
}

impl GpGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.metric.flatten();
        v.push(self.log_noise);
        v
    }
}

/// One weighted unordered pair: positions into the participant list plus
/// the upstream scale multiplying `dD/dtheta`.
type PairTriple = (usize, usize, f64);

struct PairPartial {
    grads: EnsembleGrads,
    zg: Vec<Vec<DVector<f64>>>,
}

/// Accumulate `sum scale * dD(pos_a, pos_b)/dtheta` over weighted pairs.
/// Per-tower backpropagation is deferred: pair passes only accumulate
/// embedding-space gradients, then each participant tower runs once.
fn accumulate_pairs(
    params: &SiameseEnsembleParams,
    embs: &[ItemEmbedding],
    catalog_idx: &[usize],
    triples: &[PairTriple],
) -> EnsembleGrads {
    let p = params.channels.len();
    let hidden: Vec<usize> = params.channels.iter().map(|c| c.tower.hidden()).collect();
    let lambdas: Vec<DVector<f64>> = params.channels.iter().map(|c| c.lambda.values()).collect();
    let lambda_chain: Vec<Option<DVector<f64>>> = params
        .channels
        .iter()
        .map(|c| match &c.lambda {
            LambdaParam::Softplus(raw) => Some(raw.map(sigmoid)),
            LambdaParam::Fixed(_) => None,
        })
        .collect();

    let new_partial = || PairPartial {
        grads: EnsembleGrads::zeros_like(params),
        zg: embs
            .iter()
            .map(|_| hidden.iter().map(|&h| DVector::zeros(h)).collect())
            .collect(),
    };

    let chunk = (triples.len() / rayon::current_num_threads().max(1)).max(256);
    let partials: Vec<PairPartial> = triples
        .par_chunks(chunk)
        .map(|chunk| {
            let mut part = new_partial();
            for &(a, b, scale) in chunk {
                add_pair(
                    params, embs, catalog_idx, &lambdas, &lambda_chain, a, b, scale, &mut part,
                );
            }
            part
        })
        .collect();

    // Deterministic merge in chunk order.
    let mut merged = new_partial();
    for part in partials {
        merged.grads.add_assign(&part.grads);
        for (acc, other) in merged.zg.iter_mut().zip(part.zg) {
            for (a, o) in acc.iter_mut().zip(other) {
                *a += o;
            }
        }
    }

    // One tower backprop per participant and channel.
    let mut grads = merged.grads;
    for (pos, emb) in embs.iter().enumerate() {
        for c in 0..p {
            let gz = &merged.zg[pos][c];
            if gz.iter().all(|&x| x == 0.0) {
                continue;
            }
            backprop_tower(
                &params.channels[c].tower,
                &emb.channels[c],
                gz,
                &mut grads.channels[c],
            );
        }
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn add_pair(
    params: &SiameseEnsembleParams,
    embs: &[ItemEmbedding],
    catalog_idx: &[usize],
    lambdas: &[DVector<f64>],
    lambda_chain: &[Option<DVector<f64>>],
    a: usize,
    b: usize,
    scale: f64,
    part: &mut PairPartial,
) {
    let (ea, eb) = (&embs[a], &embs[b]);
    let p = params.channels.len();
    let n_comp = params.num_components();
    let mut comps = vec![0.0; n_comp];
    for c in 0..p {
        comps[c] = {
            let (za, zb) = (&ea.channels[c].z, &eb.channels[c].z);
            let mut acc = 0.0;
            for k in 0..za.len() {
                let d = za[k] - zb[k];
                acc += lambdas[c][k] * d * d;
            }
            acc
        };
    }
    if params.id_embed.is_some() {
        let delta = ea.id_row.as_ref().unwrap() - eb.id_row.as_ref().unwrap();
        comps[n_comp - 1] = delta.norm_squared();
    }

    let comp_grads: Vec<f64> = match params.mode {
        MetricMode::SingleChannel => {
            let mut g = vec![0.0; n_comp];
            g[0] = scale;
            g
        }
        MetricMode::Ensemble => {
            let mut u = params.agg_b;
            for (i, d) in comps.iter().enumerate() {
                u += params.agg_h[i] * d;
            }
            let s = sigmoid(u);
            let sp = s * (1.0 - s);
            for (i, d) in comps.iter().enumerate() {
                part.grads.agg_h[i] += scale * sp * d;
            }
            part.grads.agg_b += scale * sp;
            (0..n_comp).map(|i| scale * sp * params.agg_h[i]).collect()
        }
    };

    for c in 0..p {
        let gd = comp_grads[c];
        if gd == 0.0 {
            continue;
        }
        let (za, zb) = (&ea.channels[c].z, &eb.channels[c].z);
        if let Some(chain) = &lambda_chain[c] {
            let lg = part.grads.channels[c].lambda.as_mut().unwrap();
            for k in 0..za.len() {
                let d = za[k] - zb[k];
                lg[k] += gd * d * d * chain[k];
            }
        }
        for k in 0..za.len() {
            let g = 2.0 * gd * lambdas[c][k] * (za[k] - zb[k]);
            part.zg[a][c][k] += g;
            part.zg[b][c][k] -= g;
        }
    }

    if let Some(id_grads) = part.grads.id_embed.as_mut() {
        let gd = comp_grads[n_comp - 1];
        if gd != 0.0 {
            let delta = ea.id_row.as_ref().unwrap() - eb.id_row.as_ref().unwrap();
            let (ia, ib) = (catalog_idx[a], catalog_idx[b]);
            for k in 0..delta.len() {
                id_grads[(ia, k)] += 2.0 * gd * delta[k];
                id_grads[(ib, k)] -= 2.0 * gd * delta[k];
            }
        }
    }
}

/// Analytic gradient of the NLL:
/// `dl/dtheta = 1/2 tr(A^-1 dK/dtheta) - 1/2 (A^-1 r)' dK/dtheta (A^-1 r)`
/// with `A = K + sigma^2 I` and `dK_ab/dtheta = -1/2 k_ab dD_ab/dtheta`,
/// plus `dl/dlog_noise = sigma^2/2 [tr(A^-1) - |A^-1 r|^2]`.
pub fn nll_grad(state: &GpState) -> Result<GpGrads> {
    replicated_nll_grad(state, std::slice::from_ref(&state.r))
}

/// Mean NLL across independent target draws sharing the state's Gram:
/// `1/2 log|A| + 1/(2k) sum_d r_d' A^-1 r_d`. With one draw this is the
/// plain NLL.
pub fn replicated_nll(state: &GpState, draws: &[DVector<f64>]) -> Result<f64> {
    check_draws(state, draws)?;
    let chol = state.chol()?;
    let mut quad = 0.0;
    for r in draws {
        quad += r.dot(&chol.solve(r));
    }
    Ok(0.5 * log_det_from_chol(chol) + 0.5 * quad / draws.len() as f64)
}

/// Gradient of [`replicated_nll`] w.r.t. metric parameters and log noise.
pub fn replicated_nll_grad(state: &GpState, draws: &[DVector<f64>]) -> Result<GpGrads> {
    check_draws(state, draws)?;
    let n = state.n();
    let k = draws.len() as f64;
    let chol = state.chol()?;
    let gram = state.gram_matrix()?;
    let a_inv = chol.inverse();
    let alphas: Vec<DVector<f64>> = draws.iter().map(|r| chol.solve(r)).collect();
    // M = A^-1 - 1/k sum_d alpha_d alpha_d'
    let mut triples = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let mut m_ij = a_inv[(i, j)];
            for alpha in &alphas {
                m_ij -= alpha[i] * alpha[j] / k;
            }
            let mult = if i == j { 1.0 } else { 2.0 };
            let scale = -0.25 * mult * m_ij * gram[(i, j)];
            triples.push((i, j, scale));
        }
    }
    let metric = accumulate_pairs(&state.metric, &state.embs, &state.train_items, &triples);
    let mean_sq = alphas.iter().map(|a| a.norm_squared()).sum::<f64>() / k;
    let log_noise = 0.5 * state.sigma2() * (a_inv.trace() - mean_sq);
    Ok(GpGrads { metric, log_noise })
}

fn check_draws(state: &GpState, draws: &[DVector<f64>]) -> Result<()> {
    if draws.is_empty() {
        return Err(Error::Config("need at least one target draw".into()));
    }
    for r in draws {
        if r.len() != state.n() {
            return Err(Error::Dimension {
                context: "target draw",
                expected: state.n(),
                got: r.len(),
            });
        }
    }
    Ok(())
}

/// Inducing-item subset and its Gram matrix.
#[derive(Debug, Clone)]
pub struct InducingSet {
    pub items: Vec<usize>,
    pub k_pp: DMatrix<f64>,
}

impl InducingSet {
    pub fn new(
        metric: &SiameseEnsembleParams,
        catalog: &ItemCatalog,
        items: Vec<usize>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("inducing set needs at least one item".into()));
        }
        let k_pp = gram(metric, catalog, &items)?;
        Ok(Self { items, k_pp })
    }

    pub fn m(&self) -> usize {
        self.items.len()
    }
}

struct NystromWork {
    u: DMatrix<f64>,
    b: DMatrix<f64>,
    chol_c: Cholesky<f64, Dyn>,
    chol_pp: Cholesky<f64, Dyn>,
    sigma2: f64,
}

fn nystrom_prepare(state: &GpState, catalog: &ItemCatalog, inducing: &InducingSet) -> Result<NystromWork> {
    let train_set: std::collections::BTreeSet<usize> = state.train_items.iter().copied().collect();
    if let Some(bad) = inducing.items.iter().find(|i| !train_set.contains(i)) {
        return Err(Error::Config(format!(
            "inducing item index {bad} is not in the train set"
        )));
    }
    let n = state.n();
    let m = inducing.m();
    let sigma2 = state.sigma2();
    let ind_embs = embed_items(&state.metric, catalog, &inducing.items)?;
    let mut u = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            u[(i, j)] = kernel_from_distance(
                state.metric.distance_cached(&state.embs[i], &ind_embs[j]),
            );
        }
    }
    let (chol_pp, _) = factorize_inducing(&inducing.k_pp)?;
    let l_pp = chol_pp.l();
    let b = l_pp
        .solve_lower_triangular(&u.transpose())
        .ok_or_else(|| Error::Numerical("singular inducing factor".into()))?;
    // C = I + B B' / sigma2 is always PD.
    let mut c = &b * b.transpose() / sigma2;
    for i in 0..m {
        c[(i, i)] += 1.0;
    }
    let chol_c = Cholesky::new(c)
        .ok_or_else(|| Error::Numerical("low-rank capacitance factorization failed".into()))?;
    Ok(NystromWork {
        u,
        b,
        chol_c,
        chol_pp,
        sigma2,
    })
}

/// NLL with the Gram matrix replaced by the low-rank
/// `Q = K_np K_pp^-1 K_pn`, evaluated in O(n m^2) without forming any
/// dense n-by-n factorization.
pub fn nystrom_nll(state: &GpState, catalog: &ItemCatalog, inducing: &InducingSet) -> Result<f64> {
    let w = nystrom_prepare(state, catalog, inducing)?;
    let n = state.n() as f64;
    let log_det = n * w.sigma2.ln() + log_det_from_chol(&w.chol_c);
    let br = &w.b * &state.r;
    let quad = state.r.norm_squared() / w.sigma2
        - br.dot(&w.chol_c.solve(&br)) / (w.sigma2 * w.sigma2);
    Ok(0.5 * log_det + 0.5 * quad)
}

/// Gradient of [`nystrom_nll`] w.r.t. metric parameters and log noise.
pub fn nystrom_grad(
    state: &GpState,
    catalog: &ItemCatalog,
    inducing: &InducingSet,
) -> Result<GpGrads> {
    let work = nystrom_prepare(state, catalog, inducing)?;
    let n = state.n();
    let m = inducing.m();
    let sigma2 = work.sigma2;
    let sigma4 = sigma2 * sigma2;

    // A_Q^-1 x = (x - B' C^-1 B x / sigma2) / sigma2, applied to r and U.
    let apply_ainv_vec = |x: &DVector<f64>| -> DVector<f64> {
        let bx = &work.b * x;
        (x - work.b.transpose() * work.chol_c.solve(&bx) / sigma2) / sigma2
    };
    let alpha = apply_ainv_vec(&state.r);
    let bu = &work.b * &work.u;
    let ainv_u = (&work.u - work.b.transpose() * work.chol_c.solve(&bu) / sigma2) / sigma2;
    let ut_alpha = work.u.transpose() * &alpha;

    // W = K_pp^-1 (with the ladder jitter folded in).
    let w_inv = work.chol_pp.inverse();

    // G_U = 2 (A_Q^-1 U - alpha (alpha' U)) W over U entries.
    let m_u = &ainv_u - &alpha * ut_alpha.transpose();
    let g_u = 2.0 * &m_u * &w_inv;
    // G_mm = -W (U' M U) W over K_pp entries.
    let s = work.u.transpose() * &m_u;
    let g_mm = -(&w_inv * s * &w_inv);

    // Participants: train items first, inducing columns addressed through
    // their train positions.
    let mut pos_of = std::collections::BTreeMap::new();
    for (pos, &it) in state.train_items.iter().enumerate() {
        pos_of.insert(it, pos);
    }
    let ind_pos: Vec<usize> = inducing.items.iter().map(|it| pos_of[it]).collect();

    let mut triples = Vec::with_capacity(n * m + m * (m + 1) / 2);
    for a in 0..n {
        for j in 0..m {
            let scale = -0.25 * g_u[(a, j)] * work.u[(a, j)];
            triples.push((a, ind_pos[j], scale));
        }
    }
    for i in 0..m {
        for j in i..m {
            let mult = if i == j { 1.0 } else { 2.0 };
            let scale = -0.25 * mult * g_mm[(i, j)] * inducing.k_pp[(i, j)];
            triples.push((ind_pos[i], ind_pos[j], scale));
        }
    }
    let metric = accumulate_pairs(&state.metric, &state.embs, &state.train_items, &triples);

    // tr(A_Q^-1) = n/sigma2 - tr(C^-1 B B') / sigma4
    let bbt = &work.b * work.b.transpose();
    let c_inv = work.chol_c.inverse();
    let mut tr_cb = 0.0;
    for i in 0..m {
        for j in 0..m {
            tr_cb += c_inv[(i, j)] * bbt[(j, i)];
        }
    }
    let tr_ainv = n as f64 / sigma2 - tr_cb / sigma4;
    let log_noise = 0.5 * sigma2 * (tr_ainv - alpha.norm_squared());
    Ok(GpGrads { metric, log_noise })
}
