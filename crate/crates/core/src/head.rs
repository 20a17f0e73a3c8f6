//! Toy coordinate-free grounding head.
//!
//! ```text
//! ṽ = V + softmax_rows(Q Kᵀ / √d_v) U        Q = V W_Qᵀ, K = V W_Kᵀ, U = V W_Vᵀ
//! z   = W2_t tanh(W1_t q + b1_t) + b2_t
//! z_i = W2_v tanh(W1_v ṽ_i + b1_v) + b2_v
//! a   = softmax(⟨z, z_i⟩ / √d)
//! ```
//!
//! Patch features are stored one patch per row. Gradients are exact and use
//! the same struct as the parameters.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Patch features `v_1 … v_M`, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<T>(pub Array2<T>);

impl<T: Scalar> PatchFeatures<T> {
    pub fn num_patches(&self) -> usize {
        self.0.nrows()
    }
    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Stand-in for the hidden state the instruction is summarised into.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding<T>(pub Array1<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub grid: PatchGrid,
    pub probs: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(grid: PatchGrid, probs: Vec<T>) -> Result<Self> {
        if probs.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} probabilities for a grid of {} patches",
                probs.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, probs })
    }

    /// Index of the most attended patch, lowest row-major index on ties.
    pub fn argmax(&self) -> usize {
        crate::labels::argmax(&self.probs)
    }

    /// Total probability on the given patches.
    pub fn mass_on(&self, indices: &[usize]) -> T {
        indices.iter().fold(T::zero(), |acc, &i| acc + self.probs[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Patch feature dimension.
    pub d_v: usize,
    /// Query embedding dimension.
    pub d_q: usize,
    /// Hidden width of both MLPs.
    pub d_h: usize,
    /// Shared embedding dimension.
    pub d: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_q: 16,
            d_h: 32,
            d: 32,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_q == 0 || self.d_h == 0 || self.d == 0 {
            return Err(Error::InvalidArgument(format!(
                "head dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Weights of the head. Also used to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParameters<T> {
    pub config: HeadConfig,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub t_w1: Array2<T>,
    pub t_b1: Array1<T>,
    pub t_w2: Array2<T>,
    pub t_b2: Array1<T>,
    pub v_w1: Array2<T>,
    pub v_b1: Array1<T>,
    pub v_w2: Array2<T>,
    pub v_b2: Array1<T>,
}

/// Scale of the initial weights relative to `1/√fan_in`. Smaller values
/// leave the bilinear score near its flat saddle for many epochs.
pub const INIT_GAIN: f64 = 3.0;

pub const TENSOR_NAMES: [&str; 11] = [
    "w_q", "w_k", "w_v", "t_w1", "t_b1", "t_w2", "t_b2", "v_w1", "v_b1", "v_w2", "v_b2",
];

impl<T: Scalar> HeadParameters<T> {
    pub fn zeros(config: HeadConfig) -> Self {
        let HeadConfig { d_v, d_q, d_h, d } = config;
        Self {
            config,
            w_q: Array2::zeros((d_v, d_v)),
            w_k: Array2::zeros((d_v, d_v)),
            w_v: Array2::zeros((d_v, d_v)),
            t_w1: Array2::zeros((d_h, d_q)),
            t_b1: Array1::zeros(d_h),
            t_w2: Array2::zeros((d, d_h)),
            t_b2: Array1::zeros(d),
            v_w1: Array2::zeros((d_h, d_v)),
            v_b1: Array1::zeros(d_h),
            v_w2: Array2::zeros((d, d_h)),
            v_b2: Array1::zeros(d),
        }
    }

    /// Uniform `[-g/√fan_in, g/√fan_in]` initialisation with `g = INIT_GAIN`,
    /// tensors filled in
    /// [`TENSOR_NAMES`] order, row-major.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = Rng::new(seed, 0);
        let HeadConfig { d_v, d_q, d_h, .. } = config;
        let fan_in = [d_v, d_v, d_v, d_q, d_q, d_h, d_h, d_v, d_v, d_h, d_h];
        for ((_, mut t), fan) in p.tensors_mut().into_iter().zip(fan_in) {
            let bound = INIT_GAIN / (fan as f64).sqrt();
            t.map_inplace(|x| *x = T::of(rng.uniform_in(-bound, bound)));
        }
        Ok(p)
    }

    pub fn tensors(&self) -> [(&'static str, ArrayViewD<'_, T>); 11] {
        [
            ("w_q", self.w_q.view().into_dyn()),
            ("w_k", self.w_k.view().into_dyn()),
            ("w_v", self.w_v.view().into_dyn()),
            ("t_w1", self.t_w1.view().into_dyn()),
            ("t_b1", self.t_b1.view().into_dyn()),
            ("t_w2", self.t_w2.view().into_dyn()),
            ("t_b2", self.t_b2.view().into_dyn()),
            ("v_w1", self.v_w1.view().into_dyn()),
            ("v_b1", self.v_b1.view().into_dyn()),
            ("v_w2", self.v_w2.view().into_dyn()),
            ("v_b2", self.v_b2.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, ArrayViewMutD<'_, T>); 11] {
        [
            ("w_q", self.w_q.view_mut().into_dyn()),
            ("w_k", self.w_k.view_mut().into_dyn()),
            ("w_v", self.w_v.view_mut().into_dyn()),
            ("t_w1", self.t_w1.view_mut().into_dyn()),
            ("t_b1", self.t_b1.view_mut().into_dyn()),
            ("t_w2", self.t_w2.view_mut().into_dyn()),
            ("t_b2", self.t_b2.view_mut().into_dyn()),
            ("v_w1", self.v_w1.view_mut().into_dyn()),
            ("v_b1", self.v_b1.view_mut().into_dyn()),
            ("v_w2", self.v_w2.view_mut().into_dyn()),
            ("v_b2", self.v_b2.view_mut().into_dyn()),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters flattened in [`TENSOR_NAMES`] order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn from_flat(config: HeadConfig, flat: &[T]) -> Result<Self> {
        let mut p = Self::zeros(config);
        if flat.len() != p.num_parameters() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                p.num_parameters()
            )));
        }
        let mut it = flat.iter();
        for (_, mut t) in p.tensors_mut() {
            t.map_inplace(|x| *x = *it.next().expect("length checked"));
        }
        Ok(p)
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(alpha, &b);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for (_, mut a) in self.tensors_mut() {
            a.map_inplace(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> HeadParameters<U> {
        let flat: Vec<U> = self.to_flat().into_iter().map(|v| U::of(v.as_f64())).collect();
        HeadParameters::from_flat(self.config, &flat).expect("same shapes")
    }

    fn check_inputs(&self, feats: &PatchFeatures<T>, query: &QueryEmbedding<T>) -> Result<()> {
        if feats.num_patches() == 0 {
            return Err(Error::Dimension("no patches".into()));
        }
        if feats.dim() != self.config.d_v {
            return Err(Error::Dimension(format!(
                "patch features have dimension {}, head expects {}",
                feats.dim(),
                self.config.d_v
            )));
        }
        if query.0.len() != self.config.d_q {
            return Err(Error::Dimension(format!(
                "query has dimension {}, head expects {}",
                query.0.len(),
                self.config.d_q
            )));
        }
        Ok(())
    }

    /// Full forward pass, keeping the intermediates needed by
    /// [`HeadParameters::backward`].
    pub fn forward(
        &self,
        feats: &PatchFeatures<T>,
        query: &QueryEmbedding<T>,
    ) -> Result<ForwardPass<T>> {
        self.check_inputs(feats, query)?;
        let ctx = self.self_attention(&feats.0);

        let t_hidden = (self.t_w1.dot(&query.0) + &self.t_b1).mapv(|x| x.tanh());
        let z = self.t_w2.dot(&t_hidden) + &self.t_b2;

        let mut v_hidden = ctx.out.dot(&self.v_w1.t());
        v_hidden += &self.v_b1;
        v_hidden.mapv_inplace(|x| x.tanh());
        let mut zs = v_hidden.dot(&self.v_w2.t());
        zs += &self.v_b2;

        let scale = T::one() / T::from_count(self.config.d).sqrt();
        let logits = zs.dot(&z) * scale;
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("attention logits".into()));
        }
        let probs = softmax(logits.view());
        Ok(ForwardPass {
            ctx,
            t_hidden,
            z,
            v_hidden,
            zs,
            logits,
            probs,
        })
    }

    fn self_attention(&self, v: &Array2<T>) -> Contextualized<T> {
        let q = v.dot(&self.w_q.t());
        let k = v.dot(&self.w_k.t());
        let u = v.dot(&self.w_v.t());
        let scale = T::one() / T::from_count(self.config.d_v).sqrt();
        let mut attn = q.dot(&k.t());
        attn.mapv_inplace(|x| x * scale);
        for mut row in attn.rows_mut() {
            softmax_inplace(row.as_slice_mut().expect("standard layout"));
        }
        let out = v + &attn.dot(&u);
        Contextualized { q, k, u, attn, out }
    }

    /// Exact parameter gradients given `∂L/∂a` on the attention map.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        feats: &PatchFeatures<T>,
        query: &QueryEmbedding<T>,
        upstream: &[T],
    ) -> Result<HeadParameters<T>> {
        self.check_inputs(feats, query)?;
        let m = feats.num_patches();
        if upstream.len() != m {
            return Err(Error::Dimension(format!(
                "upstream gradient has {} entries for {m} patches",
                upstream.len()
            )));
        }
        let mut grad = HeadParameters::zeros(self.config);
        let g_a = ArrayView1::from(upstream);

        // softmax over patches
        let dot = pass.probs.dot(&g_a);
        let scale = T::one() / T::from_count(self.config.d).sqrt();
        let d_logits = Zip::from(&pass.probs)
            .and(&g_a)
            .map_collect(|&a, &g| a * (g - dot) * scale);

        // query branch
        let d_z = pass.zs.t().dot(&d_logits);
        grad.t_w2 = outer(d_z.view(), pass.t_hidden.view());
        grad.t_b2 = d_z.clone();
        let d_t_pre = Zip::from(&self.t_w2.t().dot(&d_z))
            .and(&pass.t_hidden)
            .map_collect(|&g, &h| g * (T::one() - h * h));
        grad.t_w1 = outer(d_t_pre.view(), query.0.view());
        grad.t_b1 = d_t_pre;

        // patch branch
        let d_zs = outer(d_logits.view(), pass.z.view());
        grad.v_w2 = d_zs.t().dot(&pass.v_hidden);
        grad.v_b2 = d_zs.sum_axis(Axis(0));
        let mut d_v_pre = d_zs.dot(&self.v_w2);
        Zip::from(&mut d_v_pre)
            .and(&pass.v_hidden)
            .for_each(|g, &h| *g *= T::one() - h * h);
        grad.v_w1 = d_v_pre.t().dot(&pass.ctx.out);
        grad.v_b1 = d_v_pre.sum_axis(Axis(0));
        let d_ctx = d_v_pre.dot(&self.v_w1);

        // self-attention; the residual path carries no parameters
        let c = &pass.ctx;
        let d_u = c.attn.t().dot(&d_ctx);
        let mut d_s = d_ctx.dot(&c.u.t());
        let s_scale = T::one() / T::from_count(self.config.d_v).sqrt();
        Zip::from(d_s.rows_mut())
            .and(c.attn.rows())
            .for_each(|mut d_row, a_row| {
                let inner = a_row.dot(&d_row);
                Zip::from(&mut d_row)
                    .and(&a_row)
                    .for_each(|d, &a| *d = a * (*d - inner) * s_scale);
            });
        let d_q = d_s.dot(&c.k);
        let d_k = d_s.t().dot(&c.q);
        grad.w_q = d_q.t().dot(&feats.0);
        grad.w_k = d_k.t().dot(&feats.0);
        grad.w_v = d_u.t().dot(&feats.0);
        Ok(grad)
    }
}

#[derive(Clone, Debug)]
struct Contextualized<T> {
    q: Array2<T>,
    k: Array2<T>,
    u: Array2<T>,
    attn: Array2<T>,
    out: Array2<T>,
}

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    ctx: Contextualized<T>,
    t_hidden: Array1<T>,
    pub z: Array1<T>,
    v_hidden: Array2<T>,
    pub zs: Array2<T>,
    pub logits: Array1<T>,
    pub probs: Array1<T>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn contextualized(&self) -> &Array2<T> {
        &self.ctx.out
    }
}

fn outer<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (mut row, &x) in out.rows_mut().into_iter().zip(a.iter()) {
        row.assign(&b.mapv(|y| x * y));
    }
    out
}

/// Softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: ArrayView1<T>) -> Array1<T> {
    let mut out = logits.to_owned();
    softmax_inplace(out.as_slice_mut().expect("owned array is contiguous"));
    out
}

fn softmax_inplace<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Self-attention contextualisation with residual connection.
pub fn contextualize<T: Scalar>(
    params: &HeadParameters<T>,
    feats: &PatchFeatures<T>,
) -> Result<PatchFeatures<T>> {
    if feats.dim() != params.config.d_v {
        return Err(Error::Dimension(format!(
            "patch features have dimension {}, head expects {}",
            feats.dim(),
            params.config.d_v
        )));
    }
    Ok(PatchFeatures(params.self_attention(&feats.0).out))
}

/// Scaled dot-product scores of `z` against each row of `zs`, softmaxed.
pub fn attention_from_embeddings<T: Scalar>(z: ArrayView1<T>, zs: ArrayView2<T>) -> Array1<T> {
    let scale = T::one() / T::from_count(z.len()).sqrt();
    softmax((zs.dot(&z) * scale).view())
}

pub fn attention_forward<T: Scalar>(
    params: &HeadParameters<T>,
    feats: &PatchFeatures<T>,
    query: &QueryEmbedding<T>,
    grid: &PatchGrid,
) -> Result<AttentionMap<T>> {
    if grid.len() != feats.num_patches() {
        return Err(Error::GridMismatch(format!(
            "{} feature rows for a grid of {} patches",
            feats.num_patches(),
            grid.len()
        )));
    }
    let pass = params.forward(feats, query)?;
    AttentionMap::new(*grid, pass.probs.to_vec())
}

pub fn backward<T: Scalar>(
    params: &HeadParameters<T>,
    feats: &PatchFeatures<T>,
    query: &QueryEmbedding<T>,
    upstream: &[T],
) -> Result<HeadParameters<T>> {
    let pass = params.forward(feats, query)?;
    params.backward(&pass, feats, query, upstream)
}

pub const CHECKPOINT_FORMAT: &str = "patchground-head-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON sidecar describing a `params.bin` checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dtype: String,
    pub config: HeadConfig,
    pub tensors: Vec<TensorShape>,
    pub seed: u64,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

pub const CHECKPOINT_PARAMS: &str = "params.bin";
pub const CHECKPOINT_SIDECAR: &str = "params.json";

/// Writes `params.bin` (flat little-endian f64) and `params.json` into `dir`.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    params: &HeadParameters<T>,
    seed: u64,
    hyperparameters: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(params.num_parameters() * 8);
    for v in params.to_flat() {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    std::fs::write(dir.join(CHECKPOINT_PARAMS), bytes)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f64-le".into(),
        config: params.config,
        tensors: params
            .tensors()
            .iter()
            .map(|(n, t)| TensorShape {
                name: (*n).into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        seed,
        hyperparameters,
    };
    std::fs::write(dir.join(CHECKPOINT_SIDECAR), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(HeadParameters<T>, CheckpointMeta)> {
    let meta: CheckpointMeta =
        serde_json::from_slice(&std::fs::read(dir.join(CHECKPOINT_SIDECAR))?)?;
    if meta.format != CHECKPOINT_FORMAT || meta.dtype != "f64-le" {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} / {}",
            meta.format, meta.dtype
        )));
    }
    let bytes = std::fs::read(dir.join(CHECKPOINT_PARAMS))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("parameter file length is not a multiple of 8".into()));
    }
    let flat: Vec<T> = bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let params = HeadParameters::from_flat(meta.config, &flat)?;
    for ((name, t), shape) in params.tensors().iter().zip(&meta.tensors) {
        if *name != shape.name || t.shape() != shape.shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint tensor {} has shape {:?}, expected {name} {:?}",
                shape.name,
                shape.shape,
                t.shape()
            )));
        }
    }
    Ok((params, meta))
}
