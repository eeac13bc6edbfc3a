//! Per-channel Siamese towers, Mahalanobis channel distances, the
//! sigmoid-aggregated ensemble distance, exact reverse-mode gradients for
//! every parameter, and the contrastive-loss baseline trainer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ItemCatalog, PairExample, PairLabel};
use crate::error::{Error, Result};
use crate::opt::{FlatOptimizer, TrainConfig};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus, used to seed raw scale parameters.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Weights of one three-layer feature tower:
/// `tanh(W_t * sigmoid(W_s * relu(W_o v + b_o) + b_s) + b_t)`
/// with layer widths `2h`, `h`, `h` over a `d`-dimensional channel vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerParams {
    pub w_o: DMatrix<f64>,
    pub b_o: DVector<f64>,
    pub w_s: DMatrix<f64>,
    pub b_s: DVector<f64>,
    pub w_t: DMatrix<f64>,
    pub b_t: DVector<f64>,
}

impl TowerParams {
    /// All-zero tower with input dim `d` and hidden width `h`.
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            w_o: DMatrix::zeros(2 * h, d),
            b_o: DVector::zeros(2 * h),
            w_s: DMatrix::zeros(h, 2 * h),
            b_s: DVector::zeros(h),
            w_t: DMatrix::zeros(h, h),
            b_t: DVector::zeros(h),
        }
    }

    /// Scale-preserving uniform init: weights ~ U(-a, a) with
    /// a = sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init(d: usize, h: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(d, h);
        fill_uniform(&mut p.w_o, (6.0 / (d + 2 * h) as f64).sqrt(), rng);
        fill_uniform(&mut p.w_s, (6.0 / (2 * h + h) as f64).sqrt(), rng);
        fill_uniform(&mut p.w_t, (6.0 / (h + h) as f64).sqrt(), rng);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_o.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w_t.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w_o.len()
            + self.b_o.len()
            + self.w_s.len()
            + self.b_s.len()
            + self.w_t.len()
            + self.b_t.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let h = self.hidden();
        let ok = self.w_o.nrows() == 2 * h
            && self.b_o.len() == 2 * h
            && self.w_s.nrows() == h
            && self.w_s.ncols() == 2 * h
            && self.b_s.len() == h
            && self.w_t.ncols() == h
            && self.b_t.len() == h;
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant("inconsistent tower shapes".into()))
        }
    }
}

fn fill_uniform(m: &mut DMatrix<f64>, a: f64, rng: &mut impl Rng) {
    for x in m.iter_mut() {
        *x = rng.random_range(-a..a);
    }
}

/// Diagonal metric scale of one channel. `Fixed` keeps the given
/// nonnegative values constant; `Softplus` learns raw values mapped
/// through softplus to stay nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaParam {
    Fixed(DVector<f64>),
    Softplus(DVector<f64>),
}

impl LambdaParam {
    pub fn identity(h: usize) -> Self {
        Self::Fixed(DVector::from_element(h, 1.0))
    }

    pub fn learnable_identity(h: usize) -> Self {
        Self::Softplus(DVector::from_element(h, softplus_inv(1.0)))
    }

    /// The nonnegative diagonal values.
    pub fn values(&self) -> DVector<f64> {
        match self {
            Self::Fixed(v) => v.clone(),
            Self::Softplus(raw) => raw.map(softplus),
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Self::Softplus(_))
    }

    fn len(&self) -> usize {
        match self {
            Self::Fixed(v) | Self::Softplus(v) => v.len(),
        }
    }
}

/// One channel of the ensemble: a shared tower and its diagonal scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetricParams {
    pub tower: TowerParams,
    pub lambda: LambdaParam,
}

impl ChannelMetricParams {
    fn check(&self) -> Result<()> {
        self.tower.check_shapes()?;
        if self.lambda.len() != self.tower.hidden() {
            return Err(Error::Dimension {
                context: "lambda diagonal",
                expected: self.tower.hidden(),
                got: self.lambda.len(),
            });
        }
        if let LambdaParam::Fixed(v) = &self.lambda {
            if v.iter().any(|&x| x < 0.0) {
                return Err(Error::Invariant("negative lambda entry".into()));
            }
        }
        Ok(())
    }
}

/// Per-item ID embeddings; one learnable row per catalog item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdEmbeddingTable {
    pub table: DMatrix<f64>,
}

impl IdEmbeddingTable {
    pub fn init(n_items: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut table = DMatrix::zeros(n_items, dim);
        let a = (3.0 / dim as f64).sqrt();
        fill_uniform(&mut table, a, rng);
        Self { table }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn row_vec(&self, item: usize) -> DVector<f64> {
        self.table.row(item).transpose()
    }
}

/// How per-channel distances combine into the item distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricMode {
    /// The raw quadratic-form distance of the only channel; unbounded above.
    SingleChannel,
    /// Sigmoid aggregation of all component distances; value in (0, 1).
    Ensemble,
}

/// Full parameterization of the ensemble metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseEnsembleParams {
    pub channels: Vec<ChannelMetricParams>,
    pub id_embed: Option<IdEmbeddingTable>,
    pub agg_h: DVector<f64>,
    pub agg_b: f64,
    pub mode: MetricMode,
}

/// Model shape options used when initializing fresh parameters.
#[derive(Debug, Clone)]
pub struct ModelShape {
    pub hidden: usize,
    pub id_dim: Option<usize>,
    pub learn_lambda: bool,
    pub mode: MetricMode,
}

impl SiameseEnsembleParams {
    /// Fresh seeded parameters for a catalog's channel dims.
    pub fn init(channel_dims: &[usize], n_items: usize, shape: &ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let channels: Vec<ChannelMetricParams> = channel_dims
            .iter()
            .map(|&d| ChannelMetricParams {
                tower: TowerParams::init(d, shape.hidden, &mut rng),
                lambda: if shape.learn_lambda {
                    LambdaParam::learnable_identity(shape.hidden)
                } else {
                    LambdaParam::identity(shape.hidden)
                },
            })
            .collect();
        let id_embed = shape
            .id_dim
            .map(|p_id| IdEmbeddingTable::init(n_items, p_id, &mut rng));
        let p_comp = channels.len() + id_embed.is_some() as usize;
        // Positive aggregation weights keep the initial ensemble
        // distance-like (self-distance is the minimum over pairs), which
        // keeps the induced kernel close to positive definite.
        let agg_h = DVector::from_fn(p_comp, |_, _| rng.random_range(0.5..1.5) / p_comp as f64);
        Self {
            channels,
            id_embed,
            agg_h,
            agg_b: 0.0,
            mode: shape.mode,
        }
    }

    /// Number of component distances feeding the aggregator.
    pub fn num_components(&self) -> usize {
        self.channels.len() + self.id_embed.is_some() as usize
    }

    /// Total learnable scalar count.
    pub fn num_params(&self) -> usize {
        let towers: usize = self
            .channels
            .iter()
            .map(|c| {
                c.tower.num_params() + if c.lambda.is_learnable() { c.lambda.len() } else { 0 }
            })
            .sum();
        let id = self.id_embed.as_ref().map_or(0, |t| t.table.len());
        towers + id + self.agg_h.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Invariant("ensemble needs at least one channel".into()));
        }
        for c in &self.channels {
            c.check()?;
        }
        if self.agg_h.len() != self.num_components() {
            return Err(Error::Dimension {
                context: "aggregation weights",
                expected: self.num_components(),
                got: self.agg_h.len(),
            });
        }
        if self.mode == MetricMode::SingleChannel
            && (self.channels.len() != 1 || self.id_embed.is_some())
        {
            return Err(Error::Invariant(
                "single-channel mode requires exactly one channel and no ID table".into(),
            ));
        }
        Ok(())
    }

    /// The aggregation weights w = (h, b) as one (p + 1)-vector.
    pub fn agg_vector(&self) -> DVector<f64> {
        let p = self.agg_h.len();
        let mut w = DVector::zeros(p + 1);
        w.rows_mut(0, p).copy_from(&self.agg_h);
        w[p] = self.agg_b;
        w
    }

    /// Clone with the aggregation weights replaced.
    pub fn with_agg(&self, w: &DVector<f64>) -> Result<Self> {
        let p = self.agg_h.len();
        if w.len() != p + 1 {
            return Err(Error::Dimension {
                context: "aggregation vector",
                expected: p + 1,
                got: w.len(),
            });
        }
        let mut out = self.clone();
        out.agg_h.copy_from(&w.rows(0, p).into_owned());
        out.agg_b = w[p];
        Ok(out)
    }
}

/// Cached forward pass of one tower (inputs and post-activation values),
/// enough to replay the backward pass.
#[derive(Debug, Clone)]
pub struct TowerActivations {
    pub(crate) v: DVector<f64>,
    pub(crate) r1: DVector<f64>,
    pub(crate) s2: DVector<f64>,
    pub(crate) z: DVector<f64>,
}

/// Cached per-channel activations (and ID row) of one item.
#[derive(Debug, Clone)]
pub struct ItemEmbedding {
    pub(crate) channels: Vec<TowerActivations>,
    pub(crate) id_row: Option<DVector<f64>>,
}

impl ItemEmbedding {
    /// The metric-space embedding of channel `c`.
    pub fn z(&self, c: usize) -> &DVector<f64> {
        &self.channels[c].z
    }
}

fn forward_cached(params: &TowerParams, v: &DVector<f64>) -> TowerActivations {
    let a1 = &params.w_o * v + &params.b_o;
    let r1 = a1.map(|x| x.max(0.0));
    let a2 = &params.w_s * &r1 + &params.b_s;
    let s2 = a2.map(sigmoid);
    let a3 = &params.w_t * &s2 + &params.b_t;
    let z = a3.map(f64::tanh);
    TowerActivations {
        v: v.clone(),
        r1,
        s2,
        z,
    }
}

/// Tower output `tanh(W_t sigmoid(W_s relu(W_o v + b_o) + b_s) + b_t)`.
pub fn tower_forward(params: &TowerParams, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != params.input_dim() {
        return Err(Error::Dimension {
            context: "tower input",
            expected: params.input_dim(),
            got: v.len(),
        });
    }
    Ok(forward_cached(params, v).z)
}

/// Quadratic-form channel distance `(F(v_a) - F(v_b))' Λ (F(v_a) - F(v_b))`.
pub fn channel_distance(
    params: &ChannelMetricParams,
    v_a: &DVector<f64>,
    v_b: &DVector<f64>,
) -> Result<f64> {
    params.check()?;
    let z_a = tower_forward(&params.tower, v_a)?;
    let z_b = tower_forward(&params.tower, v_b)?;
    let lambda = params.lambda.values();
    Ok(quad_dist(&lambda, &z_a, &z_b))
}

fn quad_dist(lambda: &DVector<f64>, z_a: &DVector<f64>, z_b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for k in 0..lambda.len() {
        let d = z_a[k] - z_b[k];
        acc += lambda[k] * d * d;
    }
    acc
}

impl SiameseEnsembleParams {
    /// Cache the tower activations of a catalog item.
    pub fn embed_item(&self, catalog: &ItemCatalog, item: usize) -> Result<ItemEmbedding> {
        if catalog.channels().len() != self.channels.len() {
            return Err(Error::Dimension {
                context: "catalog channels",
                expected: self.channels.len(),
                got: catalog.channels().len(),
            });
        }
        let channels = self
            .channels
            .iter()
            .zip(catalog.channels())
            .map(|(cp, ch)| {
                let v = ch.vector(item);
                if v.len() != cp.tower.input_dim() {
                    return Err(Error::Dimension {
                        context: "channel vector",
                        expected: cp.tower.input_dim(),
                        got: v.len(),
                    });
                }
                Ok(forward_cached(&cp.tower, v))
            })
            .collect::<Result<Vec<_>>>()?;
        let id_row = match &self.id_embed {
            Some(t) => {
                if item >= t.table.nrows() {
                    return Err(Error::Invariant(format!(
                        "ID table has {} rows, item index {item} is out of range",
                        t.table.nrows()
                    )));
                }
                Some(t.row_vec(item))
            }
            None => None,
        };
        Ok(ItemEmbedding { channels, id_row })
    }

    /// Cache activations for raw channel vectors (no ID component).
    pub fn embed_raw(&self, vectors: &[&DVector<f64>]) -> Result<ItemEmbedding> {
        if self.id_embed.is_some() {
            return Err(Error::Invariant(
                "raw-vector embedding is unavailable with an ID table".into(),
            ));
        }
        if vectors.len() != self.channels.len() {
            return Err(Error::Dimension {
                context: "raw channel vectors",
                expected: self.channels.len(),
                got: vectors.len(),
            });
        }
        let channels = self
            .channels
            .iter()
            .zip(vectors)
            .map(|(cp, v)| forward_cached(&cp.tower, v))
            .collect();
        Ok(ItemEmbedding {
            channels,
            id_row: None,
        })
    }

    /// Component distances [D_1 .. D_p, (D_id)] between two cached items.
    pub fn components(&self, a: &ItemEmbedding, b: &ItemEmbedding) -> Vec<f64> {
        let mut comps = Vec::with_capacity(self.num_components());
        for (c, cp) in self.channels.iter().enumerate() {
            let lambda = cp.lambda.values();
            comps.push(quad_dist(&lambda, &a.channels[c].z, &b.channels[c].z));
        }
        if self.id_embed.is_some() {
            let (ea, eb) = (a.id_row.as_ref().unwrap(), b.id_row.as_ref().unwrap());
            comps.push((ea - eb).norm_squared());
        }
        comps
    }

    /// Mode-aware distance from component distances.
    pub fn aggregate(&self, comps: &[f64]) -> f64 {
        match self.mode {
            MetricMode::SingleChannel => comps[0],
            MetricMode::Ensemble => {
                let mut u = self.agg_b;
                for (i, d) in comps.iter().enumerate() {
                    u += self.agg_h[i] * d;
                }
                sigmoid(u)
            }
        }
    }

    /// Distance between two cached items.
    pub fn distance_cached(&self, a: &ItemEmbedding, b: &ItemEmbedding) -> f64 {
        self.aggregate(&self.components(a, b))
    }

    /// Distance between two catalog items.
    pub fn distance(&self, catalog: &ItemCatalog, a: usize, b: usize) -> Result<f64> {
        let ea = self.embed_item(catalog, a)?;
        let eb = self.embed_item(catalog, b)?;
        Ok(self.distance_cached(&ea, &eb))
    }

    /// Distance between raw multi-channel vectors (no ID component).
    pub fn distance_raw(&self, a: &[&DVector<f64>], b: &[&DVector<f64>]) -> Result<f64> {
        let ea = self.embed_raw(a)?;
        let eb = self.embed_raw(b)?;
        Ok(self.distance_cached(&ea, &eb))
    }
}

/// Sigmoid ensemble distance between two catalog items (mode-aware).
pub fn ensemble_distance(
    params: &SiameseEnsembleParams,
    catalog: &ItemCatalog,
    a: usize,
    b: usize,
) -> Result<f64> {
    params.distance(catalog, a, b)
}

/// All catalog items embedded once; distance evaluation is then O(h) per pair.
pub struct EmbeddedCatalog {
    pub items: Vec<ItemEmbedding>,
}

impl EmbeddedCatalog {
    pub fn build(params: &SiameseEnsembleParams, catalog: &ItemCatalog) -> Result<Self> {
        let items = (0..catalog.len())
            .map(|i| params.embed_item(catalog, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn distance(&self, params: &SiameseEnsembleParams, a: usize, b: usize) -> f64 {
        params.distance_cached(&self.items[a], &self.items[b])
    }
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Gradients mirroring one channel's learnable parameters.
#[derive(Debug, Clone)]
pub struct ChannelGrads {
    pub w_o: DMatrix<f64>,
    pub b_o: DVector<f64>,
    pub w_s: DMatrix<f64>,
    pub b_s: DVector<f64>,
    pub w_t: DMatrix<f64>,
    pub b_t: DVector<f64>,
    /// Gradient w.r.t. the raw softplus parameters; absent when Λ is fixed.
    pub lambda: Option<DVector<f64>>,
}

/// Gradients mirroring [`SiameseEnsembleParams`].
#[derive(Debug, Clone)]
pub struct EnsembleGrads {
    pub channels: Vec<ChannelGrads>,
    pub id_embed: Option<DMatrix<f64>>,
    pub agg_h: DVector<f64>,
    pub agg_b: f64,
}

impl EnsembleGrads {
    pub fn zeros_like(params: &SiameseEnsembleParams) -> Self {
        let channels = params
            .channels
            .iter()
            .map(|c| {
                let d = c.tower.input_dim();
                let h = c.tower.hidden();
                ChannelGrads {
                    w_o: DMatrix::zeros(2 * h, d),
                    b_o: DVector::zeros(2 * h),
                    w_s: DMatrix::zeros(h, 2 * h),
                    b_s: DVector::zeros(h),
                    w_t: DMatrix::zeros(h, h),
                    b_t: DVector::zeros(h),
                    lambda: c.lambda.is_learnable().then(|| DVector::zeros(h)),
                }
            })
            .collect();
        Self {
            channels,
            id_embed: params
                .id_embed
                .as_ref()
                .map(|t| DMatrix::zeros(t.table.nrows(), t.table.ncols())),
            agg_h: DVector::zeros(params.agg_h.len()),
            agg_b: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (c, o) in self.channels.iter_mut().zip(&other.channels) {
            c.w_o += &o.w_o;
            c.b_o += &o.b_o;
            c.w_s += &o.w_s;
            c.b_s += &o.b_s;
            c.w_t += &o.w_t;
            c.b_t += &o.b_t;
            if let (Some(l), Some(lo)) = (c.lambda.as_mut(), o.lambda.as_ref()) {
                *l += lo;
            }
        }
        if let (Some(t), Some(to)) = (self.id_embed.as_mut(), other.id_embed.as_ref()) {
            *t += to;
        }
        self.agg_h += &other.agg_h;
        self.agg_b += other.agg_b;
    }
}

/// Backward through one tower: accumulates parameter gradients given the
/// gradient `gz` at the tower output.
pub(crate) fn backprop_tower(
    params: &TowerParams,
    acts: &TowerActivations,
    gz: &DVector<f64>,
    grads: &mut ChannelGrads,
) {
    // tanh
    let g3 = gz.zip_map(&acts.z, |g, z| g * (1.0 - z * z));
    grads.w_t += &g3 * acts.s2.transpose();
    grads.b_t += &g3;
    // sigmoid
    let g_s2 = params.w_t.transpose() * &g3;
    let g2 = g_s2.zip_map(&acts.s2, |g, s| g * s * (1.0 - s));
    grads.w_s += &g2 * acts.r1.transpose();
    grads.b_s += &g2;
    // relu (subgradient 0 at the kink)
    let g_r1 = params.w_s.transpose() * &g2;
    let g1 = g_r1.zip_map(&acts.r1, |g, r| if r > 0.0 { g } else { 0.0 });
    grads.w_o += &g1 * acts.v.transpose();
    grads.b_o += &g1;
}

impl SiameseEnsembleParams {
    /// Accumulate `scale * d(distance)/d(params)` for one item pair into
    /// `grads`. `item_a`/`item_b` index the ID table (ignored without one).
    pub fn accumulate_distance_grad(
        &self,
        a: &ItemEmbedding,
        b: &ItemEmbedding,
        item_a: usize,
        item_b: usize,
        scale: f64,
        grads: &mut EnsembleGrads,
    ) {
        let comps = self.components(a, b);
        // Per-component upstream gradient.
        let comp_grads: Vec<f64> = match self.mode {
            MetricMode::SingleChannel => {
                let mut g = vec![0.0; comps.len()];
                g[0] = scale;
                g
            }
            MetricMode::Ensemble => {
                let mut u = self.agg_b;
                for (i, d) in comps.iter().enumerate() {
                    u += self.agg_h[i] * d;
                }
                let s = sigmoid(u);
                let sp = s * (1.0 - s);
                for (i, d) in comps.iter().enumerate() {
                    grads.agg_h[i] += scale * sp * d;
                }
                grads.agg_b += scale * sp;
                (0..comps.len()).map(|i| scale * sp * self.agg_h[i]).collect()
            }
        };
        for (c, cp) in self.channels.iter().enumerate() {
            let g_d = comp_grads[c];
            if g_d == 0.0 {
                continue;
            }
            self.accumulate_channel_grad(c, cp, &a.channels[c], &b.channels[c], g_d, grads);
        }
        if let Some(id_grads) = grads.id_embed.as_mut() {
            let g_d = comp_grads[comps.len() - 1];
            if g_d != 0.0 {
                let delta = a.id_row.as_ref().unwrap() - b.id_row.as_ref().unwrap();
                for k in 0..delta.len() {
                    id_grads[(item_a, k)] += 2.0 * g_d * delta[k];
                    id_grads[(item_b, k)] -= 2.0 * g_d * delta[k];
                }
            }
        }
    }

    fn accumulate_channel_grad(
        &self,
        c: usize,
        cp: &ChannelMetricParams,
        acts_a: &TowerActivations,
        acts_b: &TowerActivations,
        g_d: f64,
        grads: &mut EnsembleGrads,
    ) {
        let lambda = cp.lambda.values();
        let delta = &acts_a.z - &acts_b.z;
        if let (LambdaParam::Softplus(raw), Some(lg)) =
            (&cp.lambda, grads.channels[c].lambda.as_mut())
        {
            for k in 0..raw.len() {
                lg[k] += g_d * delta[k] * delta[k] * sigmoid(raw[k]);
            }
        }
        let gz_a = delta.zip_map(&lambda, |d, l| 2.0 * g_d * l * d);
        let gz_b = -&gz_a;
        backprop_tower(&cp.tower, acts_a, &gz_a, &mut grads.channels[c]);
        backprop_tower(&cp.tower, acts_b, &gz_b, &mut grads.channels[c]);
    }

    /// Gradient of the item distance w.r.t. every parameter.
    pub fn distance_backward(
        &self,
        catalog: &ItemCatalog,
        a: usize,
        b: usize,
    ) -> Result<EnsembleGrads> {
        let ea = self.embed_item(catalog, a)?;
        let eb = self.embed_item(catalog, b)?;
        let mut grads = EnsembleGrads::zeros_like(self);
        self.accumulate_distance_grad(&ea, &eb, a, b, 1.0, &mut grads);
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Flat parameter vector
// ---------------------------------------------------------------------------

/// Named parameter groups (freeze-mask selectors).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Towers,
    Lambda,
    IdEmbed,
    Agg,
    Noise,
}

impl ParamGroup {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "towers" => Ok(Self::Towers),
            "lambda" => Ok(Self::Lambda),
            "id_embed" => Ok(Self::IdEmbed),
            "agg" => Ok(Self::Agg),
            "noise" => Ok(Self::Noise),
            other => Err(Error::Config(format!("unknown parameter group {other:?}"))),
        }
    }
}

/// Flat-vector spans of each parameter group. The metric occupies
/// `0..metric_len`; a trailing noise scalar (when present) sits at
/// `metric_len`.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub spans: Vec<(ParamGroup, std::ops::Range<usize>)>,
    pub metric_len: usize,
}

impl SiameseEnsembleParams {
    pub fn layout(&self) -> ParamLayout {
        let mut spans = Vec::new();
        let mut at = 0usize;
        for c in &self.channels {
            let t = c.tower.num_params();
            spans.push((ParamGroup::Towers, at..at + t));
            at += t;
            if c.lambda.is_learnable() {
                let l = c.lambda.len();
                spans.push((ParamGroup::Lambda, at..at + l));
                at += l;
            }
        }
        if let Some(t) = &self.id_embed {
            spans.push((ParamGroup::IdEmbed, at..at + t.table.len()));
            at += t.table.len();
        }
        let agg = self.agg_h.len() + 1;
        spans.push((ParamGroup::Agg, at..at + agg));
        at += agg;
        ParamLayout {
            spans,
            metric_len: at,
        }
    }

    pub fn flat_len(&self) -> usize {
        self.layout().metric_len
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for c in &self.channels {
            out.extend_from_slice(c.tower.w_o.as_slice());
            out.extend_from_slice(c.tower.b_o.as_slice());
            out.extend_from_slice(c.tower.w_s.as_slice());
            out.extend_from_slice(c.tower.b_s.as_slice());
            out.extend_from_slice(c.tower.w_t.as_slice());
            out.extend_from_slice(c.tower.b_t.as_slice());
            if let LambdaParam::Softplus(raw) = &c.lambda {
                out.extend_from_slice(raw.as_slice());
            }
        }
        if let Some(t) = &self.id_embed {
            out.extend_from_slice(t.table.as_slice());
        }
        out.extend_from_slice(self.agg_h.as_slice());
        out.push(self.agg_b);
        out
    }

    pub fn read_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.flat_len(), "flat vector length mismatch");
        let mut at = 0usize;
        fn fill(dst: &mut [f64], v: &[f64], at: &mut usize) {
            dst.copy_from_slice(&v[*at..*at + dst.len()]);
            *at += dst.len();
        }
        for c in &mut self.channels {
            fill(c.tower.w_o.as_mut_slice(), v, &mut at);
            fill(c.tower.b_o.as_mut_slice(), v, &mut at);
            fill(c.tower.w_s.as_mut_slice(), v, &mut at);
            fill(c.tower.b_s.as_mut_slice(), v, &mut at);
            fill(c.tower.w_t.as_mut_slice(), v, &mut at);
            fill(c.tower.b_t.as_mut_slice(), v, &mut at);
            if let LambdaParam::Softplus(raw) = &mut c.lambda {
                fill(raw.as_mut_slice(), v, &mut at);
            }
        }
        if let Some(t) = &mut self.id_embed {
            fill(t.table.as_mut_slice(), v, &mut at);
        }
        fill(self.agg_h.as_mut_slice(), v, &mut at);
        self.agg_b = v[at];
    }
}

impl EnsembleGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.channels {
            out.extend_from_slice(c.w_o.as_slice());
            out.extend_from_slice(c.b_o.as_slice());
            out.extend_from_slice(c.w_s.as_slice());
            out.extend_from_slice(c.b_s.as_slice());
            out.extend_from_slice(c.w_t.as_slice());
            out.extend_from_slice(c.b_t.as_slice());
            if let Some(l) = &c.lambda {
                out.extend_from_slice(l.as_slice());
            }
        }
        if let Some(t) = &self.id_embed {
            out.extend_from_slice(t.as_slice());
        }
        out.extend_from_slice(self.agg_h.as_slice());
        out.push(self.agg_b);
        out
    }
}

// ---------------------------------------------------------------------------
// Contrastive baseline
// ---------------------------------------------------------------------------

/// Contrastive loss over labelled pairs:
/// `sum (1 - y) D + y max(0, tau - D)`. Empty pair lists yield zero.
pub fn contrastive_loss(
    params: &SiameseEnsembleParams,
    catalog: &ItemCatalog,
    pairs: &[PairExample],
    margin_tau: f64,
) -> Result<f64> {
    if margin_tau <= 0.0 {
        return Err(Error::Config(format!(
            "margin_tau must be positive, got {margin_tau}"
        )));
    }
    let mut loss = 0.0;
    for p in pairs {
        let d = params.distance(catalog, p.a, p.b)?;
        loss += match p.label {
            PairLabel::Similar => d,
            PairLabel::Dissimilar => (margin_tau - d).max(0.0),
        };
    }
    Ok(loss)
}

/// Contrastive loss and its gradient over a pair batch; embeddings are
/// computed once per distinct item.
pub fn contrastive_loss_grad(
    params: &SiameseEnsembleParams,
    catalog: &ItemCatalog,
    pairs: &[PairExample],
    margin_tau: f64,
) -> Result<(f64, EnsembleGrads)> {
    let mut grads = EnsembleGrads::zeros_like(params);
    let mut cache: std::collections::BTreeMap<usize, ItemEmbedding> = std::collections::BTreeMap::new();
    for p in pairs {
        for idx in [p.a, p.b] {
            if !cache.contains_key(&idx) {
                cache.insert(idx, params.embed_item(catalog, idx)?);
            }
        }
    }
    let mut loss = 0.0;
    for p in pairs {
        let (ea, eb) = (&cache[&p.a], &cache[&p.b]);
        let d = params.distance_cached(ea, eb);
        let scale = match p.label {
            PairLabel::Similar => {
                loss += d;
                1.0
            }
            PairLabel::Dissimilar => {
                if d < margin_tau {
                    loss += margin_tau - d;
                    -1.0
                } else {
                    0.0
                }
            }
        };
        if scale != 0.0 {
            params.accumulate_distance_grad(ea, eb, p.a, p.b, scale, &mut grads);
        }
    }
    Ok((loss, grads))
}

/// Per-step record of the baseline trainer.
#[derive(Debug, Clone)]
pub struct BaselineTrace {
    pub records: Vec<(usize, f64, f64)>,
    pub empty_batches: usize,
}

/// Train the vanilla Siamese ensemble by gradient descent on the
/// contrastive loss. `config.batch_items` is the per-step pair batch size.
pub fn train_siamese_baseline(
    catalog: &ItemCatalog,
    pairs: &[PairExample],
    init: &SiameseEnsembleParams,
    margin_tau: f64,
    config: &TrainConfig,
) -> Result<(SiameseEnsembleParams, BaselineTrace)> {
    if pairs.is_empty() {
        return Err(Error::Config("baseline training needs pairs".into()));
    }
    // A zero rate is the identity map, which is allowed here (unlike the GP
    // trainer, which rejects it).
    if config.learning_rate < 0.0 {
        return Err(Error::Config(format!(
            "learning_rate must be nonnegative, got {}",
            config.learning_rate
        )));
    }
    if config.batch_items == Some(0) {
        return Err(Error::Config("batch_items must be at least 1".into()));
    }
    init.validate()?;
    if margin_tau <= 0.0 {
        return Err(Error::Config(format!(
            "margin_tau must be positive, got {margin_tau}"
        )));
    }
    let mut params = init.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut opt = FlatOptimizer::new(config.optimizer, params.flat_len());
    let mut trace = BaselineTrace {
        records: Vec::new(),
        empty_batches: 0,
    };
    for step in 0..config.steps {
        let batch: Vec<PairExample> = match config.batch_items {
            Some(bs) if bs < pairs.len() => (0..bs)
                .map(|_| pairs[rng.random_range(0..pairs.len())])
                .collect(),
            _ => pairs.to_vec(),
        };
        if batch.is_empty() {
            trace.empty_batches += 1;
            continue;
        }
        let (loss, grads) = contrastive_loss_grad(&params, catalog, &batch, margin_tau)?;
        let flat_grads = grads.flatten();
        let grad_norm = flat_grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                trace: Box::default(),
            });
        }
        trace.records.push((step, loss, grad_norm));
        let mut flat = params.flatten();
        opt.step(&mut flat, &flat_grads, config.learning_rate, None);
        params.read_flat(&flat);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opt::OptimizerKind;
    use crate::synth::{two_cluster_catalog, TwoClusterSpec};

    fn small_params(mode: MetricMode, dims: &[usize], id: Option<usize>, n: usize) -> SiameseEnsembleParams {
        SiameseEnsembleParams::init(
            dims,
            n,
            &ModelShape {
                hidden: 3,
                id_dim: id,
                learn_lambda: false,
                mode,
            },
            17,
        )
    }

    #[test]
    fn zero_tower_maps_to_zero() {
        let p = TowerParams::zeros(4, 3);
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let z = tower_forward(&p, &v).unwrap();
        // relu(0) = 0, sigmoid(0) = 0.5, but W_t = 0 so a3 = 0 and tanh(0) = 0.
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tower_output_bounded_by_tanh() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = TowerParams::init(5, 4, &mut rng);
        for _ in 0..100 {
            let v = DVector::from_fn(5, |_, _| rng.random_range(-10.0..10.0));
            let z = tower_forward(&p, &v).unwrap();
            assert!(z.amax() < 1.0);
        }
    }

    #[test]
    fn tower_matches_hand_composition() {
        // Hand-evaluate the 3-layer composition on small fixed weights.
        let d = 2;
        let h = 1;
        let mut p = TowerParams::zeros(d, h);
        p.w_o.copy_from_slice(&[0.1, 0.3, 0.2, -0.4]); // column-major 2x2
        p.b_o.copy_from_slice(&[0.05, -0.1]);
        p.w_s.copy_from_slice(&[0.7, -0.2]);
        p.b_s.copy_from_slice(&[0.1]);
        p.w_t.copy_from_slice(&[1.5]);
        p.b_t.copy_from_slice(&[-0.3]);
        let v = DVector::from_vec(vec![1.0, 0.0]); // e1
        let a1: [f64; 2] = [0.1 + 0.05, 0.3 - 0.1];
        let r1 = [a1[0].max(0.0), a1[1].max(0.0)];
        let a2 = 0.7 * r1[0] - 0.2 * r1[1] + 0.1;
        let s2 = 1.0 / (1.0 + (-a2 as f64).exp());
        let expect = (1.5 * s2 - 0.3_f64).tanh();
        let z = tower_forward(&p, &v).unwrap();
        assert!((z[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn tower_shape_mismatch_errors() {
        let p = TowerParams::zeros(3, 2);
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            tower_forward(&p, &v),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn channel_distance_identical_inputs_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let cp = ChannelMetricParams {
            tower: TowerParams::init(3, 2, &mut rng),
            lambda: LambdaParam::identity(2),
        };
        let v = DVector::from_vec(vec![0.4, -0.2, 1.0]);
        assert_eq!(channel_distance(&cp, &v, &v).unwrap(), 0.0);
    }

    #[test]
    fn channel_distance_quadratic_form() {
        // Λ = diag(2,3), Δz = (1,-1) gives 5; checked through quad_dist.
        let lambda = DVector::from_vec(vec![2.0, 3.0]);
        let z_a = DVector::from_vec(vec![1.0, 0.0]);
        let z_b = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(quad_dist(&lambda, &z_a, &z_b), 5.0);
        // Λ = I on the same embeddings: squared Euclidean = 2.
        let eye = DVector::from_element(2, 1.0);
        assert_eq!(quad_dist(&eye, &z_a, &z_b), 2.0);
    }

    #[test]
    fn channel_distance_rejects_negative_lambda() {
        let cp = ChannelMetricParams {
            tower: TowerParams::zeros(2, 2),
            lambda: LambdaParam::Fixed(DVector::from_vec(vec![1.0, -0.5])),
        };
        let v = DVector::zeros(2);
        assert!(matches!(
            channel_distance(&cp, &v, &v),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn channel_distance_symmetric_nonnegative() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let cp = ChannelMetricParams {
            tower: TowerParams::init(3, 2, &mut rng),
            lambda: LambdaParam::identity(2),
        };
        for _ in 0..50 {
            let a = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let b = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let dab = channel_distance(&cp, &a, &b).unwrap();
            let dba = channel_distance(&cp, &b, &a).unwrap();
            assert_eq!(dab, dba);
            assert!(dab >= 0.0);
        }
    }

    fn toy_catalog(n: usize, dims: &[usize], seed: u64) -> ItemCatalog {
        let spec = TwoClusterSpec {
            n_items: n,
            dims: dims.to_vec(),
            separation: 2.0,
            noise: 0.3,
            seed,
        };
        two_cluster_catalog(&spec)
    }

    #[test]
    fn ensemble_zero_weights_give_half() {
        let catalog = toy_catalog(4, &[2, 3], 1);
        let mut params = small_params(MetricMode::Ensemble, &[2, 3], None, 4);
        params.agg_h.fill(0.0);
        params.agg_b = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let d = ensemble_distance(&params, &catalog, a, b).unwrap();
                assert!((d - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ensemble_identical_items_hit_bias() {
        let catalog = toy_catalog(3, &[2, 2], 2);
        let mut params = small_params(MetricMode::Ensemble, &[2, 2], None, 3);
        params.agg_b = 0.0;
        for a in 0..3 {
            let d = ensemble_distance(&params, &catalog, a, a).unwrap();
            assert!((d - 0.5).abs() < 1e-15, "all channel distances vanish");
        }
    }

    #[test]
    fn ensemble_arithmetic_cancellation() {
        // D = (1, 2), h = (1, 1), b = -3 feeds sigmoid(0) = 0.5.
        let params = small_params(MetricMode::Ensemble, &[2, 2], None, 2);
        let mut p = params.clone();
        p.agg_h.copy_from_slice(&[1.0, 1.0]);
        p.agg_b = -3.0;
        assert!((p.aggregate(&[1.0, 2.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ensemble_symmetry_and_range() {
        let catalog = toy_catalog(8, &[2, 3], 3);
        let params = small_params(MetricMode::Ensemble, &[2, 3], Some(2), 8);
        for a in 0..8 {
            for b in 0..8 {
                let dab = ensemble_distance(&params, &catalog, a, b).unwrap();
                let dba = ensemble_distance(&params, &catalog, b, a).unwrap();
                assert_eq!(dab, dba);
                assert!(dab > 0.0 && dab < 1.0);
            }
        }
    }

    #[test]
    fn contrastive_loss_cases() {
        let catalog = toy_catalog(4, &[2], 4);
        let params = small_params(MetricMode::SingleChannel, &[2], None, 4);
        // Similar pair with itself-like distance 0 is impossible through the
        // catalog (a != b), so exercise the arithmetic directly.
        let pairs = vec![PairExample::new(0, 1, PairLabel::Similar).unwrap()];
        let d01 = params.distance(&catalog, 0, 1).unwrap();
        let loss = contrastive_loss(&params, &catalog, &pairs, 0.5).unwrap();
        assert!((loss - d01).abs() < 1e-15);
        // Dissimilar with D >= tau zeroes out.
        let pairs = vec![PairExample::new(0, 1, PairLabel::Dissimilar).unwrap()];
        let loss = contrastive_loss(&params, &catalog, &pairs, d01.min(1e-9)).unwrap();
        assert_eq!(loss, 0.0);
        // Mixed arithmetic: sim D + (tau - dis D).
        let pairs = vec![
            PairExample::new(0, 1, PairLabel::Similar).unwrap(),
            PairExample::new(2, 3, PairLabel::Dissimilar).unwrap(),
        ];
        let d23 = params.distance(&catalog, 2, 3).unwrap();
        let tau = d23 + 0.4;
        let loss = contrastive_loss(&params, &catalog, &pairs, tau).unwrap();
        assert!((loss - (d01 + 0.4)).abs() < 1e-12);
        // Empty list yields zero loss.
        assert_eq!(contrastive_loss(&params, &catalog, &[], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn param_count_formula() {
        // Learned-lambda ensemble with an ID table: the count is
        // sum_m [2h d_m + 2h + 2h^2 + h + h^2 + h + h] + n p_id + (p + 1).
        let dims = [4usize, 2];
        let (n, h, p_id) = (6usize, 3usize, 2usize);
        let params = SiameseEnsembleParams::init(
            &dims,
            n,
            &ModelShape {
                hidden: h,
                id_dim: Some(p_id),
                learn_lambda: true,
                mode: MetricMode::Ensemble,
            },
            0,
        );
        let expected: usize = dims
            .iter()
            .map(|&d| 2 * h * d + 2 * h + 2 * h * h + h + h * h + h + h)
            .sum::<usize>()
            + n * p_id
            + (dims.len() + 1 + 1);
        assert_eq!(params.num_params(), expected);
        assert_eq!(params.flatten().len(), expected);
    }

    #[test]
    fn flatten_roundtrip() {
        let params = small_params(MetricMode::Ensemble, &[3, 2], Some(2), 5);
        let flat = params.flatten();
        let mut other = small_params(MetricMode::Ensemble, &[3, 2], Some(2), 5);
        other.read_flat(&flat);
        assert_eq!(params, other);
    }

    #[test]
    fn zero_aggregation_kills_tower_gradients() {
        let catalog = toy_catalog(4, &[2, 2], 9);
        let mut params = small_params(MetricMode::Ensemble, &[2, 2], None, 4);
        params.agg_h.fill(0.0);
        let grads = params.distance_backward(&catalog, 0, 1).unwrap();
        for c in &grads.channels {
            assert_eq!(c.w_o.amax(), 0.0);
            assert_eq!(c.w_t.amax(), 0.0);
        }
        // The bias path survives: sigma'(b) != 0.
        assert!(grads.agg_b.abs() > 0.0);
    }

    #[test]
    fn identical_items_zero_lambda_gradient() {
        let catalog = toy_catalog(4, &[2], 10);
        let mut params = small_params(MetricMode::SingleChannel, &[2], None, 4);
        params.channels[0].lambda = LambdaParam::learnable_identity(3);
        let grads = params.distance_backward(&catalog, 2, 2).unwrap();
        let lg = grads.channels[0].lambda.as_ref().unwrap();
        assert_eq!(lg.amax(), 0.0, "delta z = 0 kills the lambda gradient");
    }

    #[test]
    fn baseline_zero_steps_identity() {
        let catalog = toy_catalog(6, &[2], 12);
        let params = small_params(MetricMode::SingleChannel, &[2], None, 6);
        let pairs = vec![PairExample::new(0, 1, PairLabel::Similar).unwrap()];
        let config = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (out, trace) = train_siamese_baseline(&catalog, &pairs, &params, 1.0, &config).unwrap();
        assert_eq!(out, params);
        assert!(trace.records.is_empty());
    }

    #[test]
    fn baseline_zero_rate_keeps_params() {
        let catalog = toy_catalog(6, &[2], 13);
        let params = small_params(MetricMode::SingleChannel, &[2], None, 6);
        let pairs = vec![
            PairExample::new(0, 1, PairLabel::Similar).unwrap(),
            PairExample::new(2, 3, PairLabel::Dissimilar).unwrap(),
        ];
        let config = TrainConfig {
            steps: 25,
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let (out, _) = train_siamese_baseline(&catalog, &pairs, &params, 1.0, &config).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn baseline_learns_separable_clusters() {
        let spec = TwoClusterSpec {
            n_items: 20,
            dims: vec![2],
            separation: 4.0,
            noise: 0.2,
            seed: 77,
        };
        let catalog = two_cluster_catalog(&spec);
        let params = small_params(MetricMode::SingleChannel, &[2], None, 20);
        // Same-cluster pairs similar, cross-cluster dissimilar.
        let mut pairs = Vec::new();
        for i in 0..10 {
            for j in (i + 1)..10 {
                pairs.push(PairExample::new(i, j, PairLabel::Similar).unwrap());
                pairs.push(PairExample::new(i, 10 + j, PairLabel::Dissimilar).unwrap());
            }
        }
        let config = TrainConfig {
            steps: 120,
            learning_rate: 0.02,
            optimizer: OptimizerKind::Adam,
            ..TrainConfig::default()
        };
        let initial = contrastive_loss(&params, &catalog, &pairs, 1.0).unwrap();
        let (trained, trace) =
            train_siamese_baseline(&catalog, &pairs, &params, 1.0, &config).unwrap();
        let fin = contrastive_loss(&trained, &catalog, &pairs, 1.0).unwrap();
        assert!(fin < initial, "final {fin} vs initial {initial}");
        assert_eq!(trace.records.len(), 120);
    }
}
