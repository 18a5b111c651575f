//! Per-face transformer denoiser with analytic gradients.
//!
//! Each of a face's 9 coordinate categories is embedded (shared C×D table
//! plus a learned intra-face slot embedding), the 9 embeddings concatenate
//! and project to one token per face, learned face-index positions are
//! added, and a timestep embedding (sinusoidal features through a 2-layer
//! MLP) plus a learned class embedding condition every token. Transformer
//! blocks with pre-norm attention/MLP follow; long skip connections pair
//! block i with block depth-1-i through a learned projection. Padded faces
//! are masked out of attention, so logits at real faces never depend on
//! padding contents.
//!
//! The backward pass is written out layer by layer; finite differences
//! validate every parameter tensor (see the tests and the acceptance suite).

use crate::diffusion::sample_xt;
use crate::rng::{derive, Rng};
use crate::schedule::NoiseSchedule;
use crate::soup::QuantizedTriangleSoup;
use crate::tensor::{add_assign, matmul, matmul_nt, matmul_tn, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error("non-finite loss at batch example {example}")]
    NonFiniteLoss { example: usize },
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Per-coordinate embedding width D.
    pub embed_dim: usize,
    /// Per-face channel width.
    pub face_dim: usize,
    /// Transformer depth; even when `skip_connections` is set.
    pub depth: usize,
    pub heads: usize,
    pub max_faces: usize,
    /// Coordinate categories C = 2^bits.
    pub categories: usize,
    pub class_count: usize,
    pub skip_connections: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            embed_dim: 16,
            face_dim: 128,
            depth: 4,
            heads: 4,
            max_faces: 800,
            categories: 256,
            class_count: 1,
            skip_connections: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.face_dim == 0 || self.face_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "face_dim {} not divisible by heads {}",
                self.face_dim, self.heads
            )));
        }
        if self.face_dim % 2 != 0 {
            return Err(ModelError::Config("face_dim must be even".into()));
        }
        if self.skip_connections && self.depth % 2 != 0 {
            return Err(ModelError::Config(format!(
                "depth {} must be even with skip connections",
                self.depth
            )));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.max_faces == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        if self.categories < 2 || self.class_count == 0 {
            return Err(ModelError::Config("need at least 2 categories and 1 class".into()));
        }
        if !self.categories.is_power_of_two() {
            return Err(ModelError::Config(format!(
                "categories {} must be a power of two (2^bits)",
                self.categories
            )));
        }
        Ok(())
    }

    fn hidden_dim(&self) -> usize {
        4 * self.face_dim
    }
}

/// Named parameter (or gradient / moment) tensors with deterministic
/// iteration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamMap {
    map: BTreeMap<String, Tensor>,
}

impl ParamMap {
    pub fn new() -> Self {
        ParamMap::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.map.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter tensor `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zeros_like(&self) -> ParamMap {
        ParamMap {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.zeros_like())).collect(),
        }
    }

    /// Total scalar count.
    pub fn parameter_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    /// Element-wise accumulate (shapes must agree).
    pub fn accumulate(&mut self, other: &ParamMap) {
        for (name, tensor) in &other.map {
            add_assign(self.map.get_mut(name).expect("matching keys").data_mut(), tensor.data());
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }
}

/// Model parameters plus their config.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub tensors: ParamMap,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

impl DenoiserParams {
    /// Seeded Gaussian init (std 0.02), zero biases, unit norm gains.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::new(derive(seed, 0x70a));
        let d = config.embed_dim;
        let cf = config.face_dim;
        let hidden = config.hidden_dim();
        let mut t = ParamMap::new();
        let mut randn = |t: &mut ParamMap, name: &str, dims: &[usize]| {
            t.insert(name, Tensor::randn(dims, INIT_STD, &mut rng));
        };

        randn(&mut t, "embed.category", &[config.categories, d]);
        randn(&mut t, "embed.slot_pos", &[9, d]);
        randn(&mut t, "embed.face_pos", &[config.max_faces, cf]);
        randn(&mut t, "face_proj.weight", &[9 * d, cf]);
        t.insert("face_proj.bias", Tensor::zeros(&[cf]));
        randn(&mut t, "time.fc1.weight", &[cf, cf]);
        t.insert("time.fc1.bias", Tensor::zeros(&[cf]));
        randn(&mut t, "time.fc2.weight", &[cf, cf]);
        t.insert("time.fc2.bias", Tensor::zeros(&[cf]));
        randn(&mut t, "class.embed", &[config.class_count, cf]);

        for i in 0..config.depth {
            let p = |suffix: &str| format!("block{i}.{suffix}");
            t.insert(&p("ln1.gamma"), Tensor::filled(&[cf], 1.0));
            t.insert(&p("ln1.beta"), Tensor::zeros(&[cf]));
            for proj in ["q", "k", "v", "out"] {
                randn(&mut t, &p(&format!("attn.{proj}.weight")), &[cf, cf]);
                t.insert(&p(&format!("attn.{proj}.bias")), Tensor::zeros(&[cf]));
            }
            t.insert(&p("ln2.gamma"), Tensor::filled(&[cf], 1.0));
            t.insert(&p("ln2.beta"), Tensor::zeros(&[cf]));
            randn(&mut t, &p("mlp.fc1.weight"), &[cf, hidden]);
            t.insert(&p("mlp.fc1.bias"), Tensor::zeros(&[hidden]));
            randn(&mut t, &p("mlp.fc2.weight"), &[hidden, cf]);
            t.insert(&p("mlp.fc2.bias"), Tensor::zeros(&[cf]));
        }
        if config.skip_connections {
            for j in 0..config.depth / 2 {
                randn(&mut t, &format!("skip{j}.weight"), &[2 * cf, cf]);
                t.insert(&format!("skip{j}.bias"), Tensor::zeros(&[cf]));
            }
        }
        t.insert("head.norm.gamma", Tensor::filled(&[cf], 1.0));
        t.insert("head.norm.beta", Tensor::zeros(&[cf]));
        randn(&mut t, "head.out.weight", &[cf, 9 * config.categories]);
        t.insert("head.out.bias", Tensor::zeros(&[9 * config.categories]));

        Ok(DenoiserParams { config: config.clone(), tensors: t })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.parameter_count()
    }
}

// ---------------------------------------------------------------------------
// Layer kernels.

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (K * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = K * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x)
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_fwd(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, dim: usize) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..dim {
            let h = (row[c] - mean) * rs;
            xhat[r * dim + c] = h;
            y[r * dim + c] = gamma[c] * h + beta[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into dgamma/dbeta and adds the input gradient into `dx`.
fn ln_bwd(
    cache: &LnCache,
    gamma: &[f64],
    dy: &[f64],
    rows: usize,
    dim: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    for r in 0..rows {
        let xhat = &cache.xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..dim {
            let dxh = dyr[c] * gamma[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[c];
            dgamma[c] += dyr[c] * xhat[c];
            dbeta[c] += dyr[c];
        }
        mean_dxhat /= dim as f64;
        mean_dxhat_xhat /= dim as f64;
        let rs = cache.rstd[r];
        for c in 0..dim {
            let dxh = dyr[c] * gamma[c];
            dx[r * dim + c] += rs * (dxh - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
}

fn linear_fwd(x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    matmul(x, w, rows, din, dout, &mut y, false);
    for r in 0..rows {
        for c in 0..dout {
            y[r * dout + c] += b[c];
        }
    }
    y
}

/// dw += xᵀ·dy, db += column sums of dy, dx += dy·wᵀ (when requested).
fn linear_bwd(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    matmul_tn(x, dy, rows, din, dout, dw, true);
    for r in 0..rows {
        for c in 0..dout {
            db[c] += dy[r * dout + c];
        }
    }
    if let Some(dx) = dx {
        matmul_nt(dy, w, rows, dout, din, dx, true);
    }
}

// ---------------------------------------------------------------------------
// Forward pass with caches.

struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>, // [heads, F, F]
    attn_concat: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    mlp_pre: Vec<f64>,
    mlp_act: Vec<f64>,
}

struct SkipCache {
    concat: Vec<f64>, // [F, 2*Cf]
}

struct Activations {
    cats: Vec<crate::soup::QuantFace>,
    class_label: u32,
    t_feats: Vec<f64>,
    time_pre: Vec<f64>,
    time_act: Vec<f64>,
    concat: Vec<f64>, // [F, 9D]
    blocks: Vec<BlockCache>,
    skips: Vec<Option<SkipCache>>, // indexed by block
    head_ln: LnCache,
    head_normed: Vec<f64>,
}

/// Sinusoidal features of the (integer) timestep.
fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Logits for every face slot and coordinate, shape max_faces × 3 × 3 × C.
pub fn forward(
    params: &DenoiserParams,
    soup: &QuantizedTriangleSoup,
    t: usize,
    class_label: u32,
    schedule: &NoiseSchedule,
) -> Result<Tensor, ModelError> {
    forward_cached(params, soup, t, class_label, schedule).map(|(logits, _)| logits)
}

fn forward_cached(
    params: &DenoiserParams,
    soup: &QuantizedTriangleSoup,
    t: usize,
    class_label: u32,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, Activations), ModelError> {
    let cfg = &params.config;
    if soup.capacity() != cfg.max_faces {
        return Err(ModelError::BadArgument(format!(
            "soup capacity {} does not match model max_faces {}",
            soup.capacity(),
            cfg.max_faces
        )));
    }
    if soup.categories() != cfg.categories {
        return Err(ModelError::BadArgument(format!(
            "soup categories {} do not match model categories {}",
            soup.categories(),
            cfg.categories
        )));
    }
    if t == 0 || t > schedule.timesteps() {
        return Err(ModelError::BadArgument(format!(
            "timestep {t} outside [1, {}]",
            schedule.timesteps()
        )));
    }
    if (class_label as usize) >= cfg.class_count {
        return Err(ModelError::BadArgument(format!(
            "class label {class_label} out of range ({} classes)",
            cfg.class_count
        )));
    }
    if soup.real_face_count() == 0 {
        return Err(ModelError::BadArgument("soup has no real faces".into()));
    }

    let f_cap = cfg.max_faces;
    let d = cfg.embed_dim;
    let cf = cfg.face_dim;
    let heads = cfg.heads;
    let hd = cf / heads;
    let hidden = cfg.hidden_dim();
    let p = &params.tensors;

    // Conditioning vector: timestep MLP + class embedding.
    let t_feats = timestep_features(t, cf);
    let time_pre = linear_fwd(
        &t_feats,
        p.get("time.fc1.weight").data(),
        p.get("time.fc1.bias").data(),
        1,
        cf,
        cf,
    );
    let time_act: Vec<f64> = time_pre.iter().map(|&x| gelu(x)).collect();
    let time_out = linear_fwd(
        &time_act,
        p.get("time.fc2.weight").data(),
        p.get("time.fc2.bias").data(),
        1,
        cf,
        cf,
    );
    let class_row = &p.get("class.embed").data()[class_label as usize * cf..(class_label as usize + 1) * cf];
    let cond: Vec<f64> = time_out.iter().zip(class_row).map(|(a, b)| a + b).collect();

    // Embed the 9 coordinate categories of every face and project per face.
    let cat_embed = p.get("embed.category").data();
    let slot_pos = p.get("embed.slot_pos").data();
    let mut concat = vec![0.0; f_cap * 9 * d];
    for f in 0..f_cap {
        let face = &soup.faces()[f];
        for v in 0..3 {
            for a in 0..3 {
                let sl = v * 3 + a;
                let cat = face[v][a] as usize;
                let dst = &mut concat[(f * 9 + sl) * d..(f * 9 + sl + 1) * d];
                let src = &cat_embed[cat * d..(cat + 1) * d];
                let pos = &slot_pos[sl * d..(sl + 1) * d];
                for i in 0..d {
                    dst[i] = src[i] + pos[i];
                }
            }
        }
    }
    let mut h = linear_fwd(
        &concat,
        p.get("face_proj.weight").data(),
        p.get("face_proj.bias").data(),
        f_cap,
        9 * d,
        cf,
    );
    let face_pos = p.get("embed.face_pos").data();
    for f in 0..f_cap {
        for c in 0..cf {
            h[f * cf + c] += face_pos[f * cf + c] + cond[c];
        }
    }

    let mask: Vec<bool> = soup.mask().to_vec();
    let half = cfg.depth / 2;
    let mut stash: Vec<Vec<f64>> = Vec::with_capacity(half);
    let mut blocks = Vec::with_capacity(cfg.depth);
    let mut skips: Vec<Option<SkipCache>> = Vec::with_capacity(cfg.depth);

    for i in 0..cfg.depth {
        // Long skip: concat with the paired shallow block's output, project.
        if cfg.skip_connections && i >= half {
            let partner = cfg.depth - 1 - i;
            let mut cat2 = vec![0.0; f_cap * 2 * cf];
            for f in 0..f_cap {
                cat2[f * 2 * cf..f * 2 * cf + cf].copy_from_slice(&h[f * cf..(f + 1) * cf]);
                cat2[f * 2 * cf + cf..(f + 1) * 2 * cf]
                    .copy_from_slice(&stash[partner][f * cf..(f + 1) * cf]);
            }
            let j = partner;
            h = linear_fwd(
                &cat2,
                p.get(&format!("skip{j}.weight")).data(),
                p.get(&format!("skip{j}.bias")).data(),
                f_cap,
                2 * cf,
                cf,
            );
            skips.push(Some(SkipCache { concat: cat2 }));
        } else {
            skips.push(None);
        }

        let name = |s: &str| format!("block{i}.{s}");
        let input = h.clone();
        let (a, ln1) = ln_fwd(
            &h,
            p.get(&name("ln1.gamma")).data(),
            p.get(&name("ln1.beta")).data(),
            f_cap,
            cf,
        );
        let q = linear_fwd(&a, p.get(&name("attn.q.weight")).data(), p.get(&name("attn.q.bias")).data(), f_cap, cf, cf);
        let k = linear_fwd(&a, p.get(&name("attn.k.weight")).data(), p.get(&name("attn.k.bias")).data(), f_cap, cf, cf);
        let v = linear_fwd(&a, p.get(&name("attn.v.weight")).data(), p.get(&name("attn.v.bias")).data(), f_cap, cf, cf);

        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; heads * f_cap * f_cap];
        let mut attn_concat = vec![0.0; f_cap * cf];
        for head in 0..heads {
            let col = head * hd;
            for qi in 0..f_cap {
                // Scores against unmasked keys only.
                let qrow = &q[qi * cf + col..qi * cf + col + hd];
                let mut max_score = f64::NEG_INFINITY;
                let mut scores = vec![f64::NEG_INFINITY; f_cap];
                for kj in 0..f_cap {
                    if !mask[kj] {
                        continue;
                    }
                    let krow = &k[kj * cf + col..kj * cf + col + hd];
                    let mut s = 0.0;
                    for x in 0..hd {
                        s += qrow[x] * krow[x];
                    }
                    let s = s * scale;
                    scores[kj] = s;
                    if s > max_score {
                        max_score = s;
                    }
                }
                let prow = &mut probs[(head * f_cap + qi) * f_cap..(head * f_cap + qi + 1) * f_cap];
                let mut z = 0.0;
                for kj in 0..f_cap {
                    if scores[kj] > f64::NEG_INFINITY {
                        let e = (scores[kj] - max_score).exp();
                        prow[kj] = e;
                        z += e;
                    }
                }
                if z > 0.0 {
                    for x in prow.iter_mut() {
                        *x /= z;
                    }
                }
                let orow = &mut attn_concat[qi * cf + col..qi * cf + col + hd];
                for kj in 0..f_cap {
                    let pk = prow[kj];
                    if pk == 0.0 {
                        continue;
                    }
                    let vrow = &v[kj * cf + col..kj * cf + col + hd];
                    for x in 0..hd {
                        orow[x] += pk * vrow[x];
                    }
                }
            }
        }
        let attn_out = linear_fwd(
            &attn_concat,
            p.get(&name("attn.out.weight")).data(),
            p.get(&name("attn.out.bias")).data(),
            f_cap,
            cf,
            cf,
        );
        let mut x1 = input.clone();
        add_assign(&mut x1, &attn_out);

        let (b, ln2) = ln_fwd(
            &x1,
            p.get(&name("ln2.gamma")).data(),
            p.get(&name("ln2.beta")).data(),
            f_cap,
            cf,
        );
        let mlp_pre = linear_fwd(&b, p.get(&name("mlp.fc1.weight")).data(), p.get(&name("mlp.fc1.bias")).data(), f_cap, cf, hidden);
        let mlp_act: Vec<f64> = mlp_pre.iter().map(|&x| gelu(x)).collect();
        let mlp_out = linear_fwd(&mlp_act, p.get(&name("mlp.fc2.weight")).data(), p.get(&name("mlp.fc2.bias")).data(), f_cap, hidden, cf);
        let mut x2 = x1.clone();
        add_assign(&mut x2, &mlp_out);

        blocks.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            attn_concat,
            ln2,
            b,
            mlp_pre,
            mlp_act,
        });
        if cfg.skip_connections && i < half {
            stash.push(x2.clone());
        }
        h = x2;
    }

    let (head_normed, head_ln) = ln_fwd(
        &h,
        p.get("head.norm.gamma").data(),
        p.get("head.norm.beta").data(),
        f_cap,
        cf,
    );
    let logits_flat = linear_fwd(
        &head_normed,
        p.get("head.out.weight").data(),
        p.get("head.out.bias").data(),
        f_cap,
        cf,
        9 * cfg.categories,
    );
    let logits = Tensor::from_vec(&[f_cap, 3, 3, cfg.categories], logits_flat);

    let cache = Activations {
        cats: soup.faces().to_vec(),
        class_label,
        t_feats,
        time_pre,
        time_act,
        concat,
        blocks,
        skips,
        head_ln,
        head_normed,
    };
    Ok((logits, cache))
}

// ---------------------------------------------------------------------------
// Backward pass.

fn backward(params: &DenoiserParams, cache: &Activations, dlogits: &[f64]) -> ParamMap {
    let cfg = &params.config;
    let f_cap = cfg.max_faces;
    let d = cfg.embed_dim;
    let cf = cfg.face_dim;
    let heads = cfg.heads;
    let hd = cf / heads;
    let hidden = cfg.hidden_dim();
    let half = cfg.depth / 2;
    let p = &params.tensors;
    let mut g = params.tensors.zeros_like();

    // Head.
    let mut d_normed = vec![0.0; f_cap * cf];
    {
        let mut dw = g.get("head.out.weight").clone();
        let mut db = g.get("head.out.bias").clone();
        linear_bwd(
            &cache.head_normed,
            p.get("head.out.weight").data(),
            dlogits,
            f_cap,
            cf,
            9 * cfg.categories,
            dw.data_mut(),
            db.data_mut(),
            Some(&mut d_normed),
        );
        *g.get_mut("head.out.weight") = dw;
        *g.get_mut("head.out.bias") = db;
    }
    let mut grad = vec![0.0; f_cap * cf];
    {
        let mut dgamma = g.get("head.norm.gamma").clone();
        let mut dbeta = g.get("head.norm.beta").clone();
        ln_bwd(
            &cache.head_ln,
            p.get("head.norm.gamma").data(),
            &d_normed,
            f_cap,
            cf,
            dgamma.data_mut(),
            dbeta.data_mut(),
            &mut grad,
        );
        *g.get_mut("head.norm.gamma") = dgamma;
        *g.get_mut("head.norm.beta") = dbeta;
    }

    // Blocks in reverse, tracking skip-stash gradients.
    let mut d_stash: Vec<Vec<f64>> = (0..half).map(|_| vec![0.0; f_cap * cf]).collect();
    for i in (0..cfg.depth).rev() {
        if cfg.skip_connections && i < half {
            add_assign(&mut grad, &d_stash[i]);
        }
        let blk = &cache.blocks[i];
        let name = |s: &str| format!("block{i}.{s}");

        // x2 = x1 + mlp(ln2(x1)): grad is d_x2.
        let d_mlp_out = grad.clone();
        let mut d_act = vec![0.0; f_cap * hidden];
        {
            let mut dw = g.get(&name("mlp.fc2.weight")).clone();
            let mut db = g.get(&name("mlp.fc2.bias")).clone();
            linear_bwd(
                &blk.mlp_act,
                p.get(&name("mlp.fc2.weight")).data(),
                &d_mlp_out,
                f_cap,
                hidden,
                cf,
                dw.data_mut(),
                db.data_mut(),
                Some(&mut d_act),
            );
            *g.get_mut(&name("mlp.fc2.weight")) = dw;
            *g.get_mut(&name("mlp.fc2.bias")) = db;
        }
        let mut d_pre = d_act;
        for (dp, &pre) in d_pre.iter_mut().zip(&blk.mlp_pre) {
            *dp *= gelu_grad(pre);
        }
        let mut d_b = vec![0.0; f_cap * cf];
        {
            let mut dw = g.get(&name("mlp.fc1.weight")).clone();
            let mut db = g.get(&name("mlp.fc1.bias")).clone();
            linear_bwd(
                &blk.b,
                p.get(&name("mlp.fc1.weight")).data(),
                &d_pre,
                f_cap,
                cf,
                hidden,
                dw.data_mut(),
                db.data_mut(),
                Some(&mut d_b),
            );
            *g.get_mut(&name("mlp.fc1.weight")) = dw;
            *g.get_mut(&name("mlp.fc1.bias")) = db;
        }
        // d_x1 = d_x2 + ln2-path.
        let mut d_x1 = grad;
        {
            let mut dgamma = g.get(&name("ln2.gamma")).clone();
            let mut dbeta = g.get(&name("ln2.beta")).clone();
            ln_bwd(
                &blk.ln2,
                p.get(&name("ln2.gamma")).data(),
                &d_b,
                f_cap,
                cf,
                dgamma.data_mut(),
                dbeta.data_mut(),
                &mut d_x1,
            );
            *g.get_mut(&name("ln2.gamma")) = dgamma;
            *g.get_mut(&name("ln2.beta")) = dbeta;
        }

        // x1 = input + attn_out(ln1(input)).
        let d_attn_out = d_x1.clone();
        let mut d_attn_concat = vec![0.0; f_cap * cf];
        {
            let mut dw = g.get(&name("attn.out.weight")).clone();
            let mut db = g.get(&name("attn.out.bias")).clone();
            linear_bwd(
                &blk.attn_concat,
                p.get(&name("attn.out.weight")).data(),
                &d_attn_out,
                f_cap,
                cf,
                cf,
                dw.data_mut(),
                db.data_mut(),
                Some(&mut d_attn_concat),
            );
            *g.get_mut(&name("attn.out.weight")) = dw;
            *g.get_mut(&name("attn.out.bias")) = db;
        }

        // Attention core backward.
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; f_cap * cf];
        let mut dk = vec![0.0; f_cap * cf];
        let mut dv = vec![0.0; f_cap * cf];
        for head in 0..heads {
            let col = head * hd;
            for qi in 0..f_cap {
                let prow = &blk.probs[(head * f_cap + qi) * f_cap..(head * f_cap + qi + 1) * f_cap];
                let do_row = &d_attn_concat[qi * cf + col..qi * cf + col + hd];
                // dP and the softmax-jacobian row dot.
                let mut dp = vec![0.0; f_cap];
                let mut row_dot = 0.0;
                for kj in 0..f_cap {
                    if prow[kj] == 0.0 {
                        continue;
                    }
                    let vrow = &blk.v[kj * cf + col..kj * cf + col + hd];
                    let mut s = 0.0;
                    for x in 0..hd {
                        s += do_row[x] * vrow[x];
                    }
                    dp[kj] = s;
                    row_dot += s * prow[kj];
                    // dV accumulation.
                    let dvrow = &mut dv[kj * cf + col..kj * cf + col + hd];
                    for x in 0..hd {
                        dvrow[x] += prow[kj] * do_row[x];
                    }
                }
                let qrow = &blk.q[qi * cf + col..qi * cf + col + hd];
                for kj in 0..f_cap {
                    if prow[kj] == 0.0 {
                        continue;
                    }
                    let ds = prow[kj] * (dp[kj] - row_dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &blk.k[kj * cf + col..kj * cf + col + hd];
                    let dqrow = &mut dq[qi * cf + col..qi * cf + col + hd];
                    for x in 0..hd {
                        dqrow[x] += ds * krow[x];
                    }
                    let dkrow = &mut dk[kj * cf + col..kj * cf + col + hd];
                    for x in 0..hd {
                        dkrow[x] += ds * qrow[x];
                    }
                }
            }
        }

        let mut d_a = vec![0.0; f_cap * cf];
        for (proj, dproj) in [("q", &dq), ("k", &dk), ("v", &dv)] {
            let mut dw = g.get(&name(&format!("attn.{proj}.weight"))).clone();
            let mut db = g.get(&name(&format!("attn.{proj}.bias"))).clone();
            linear_bwd(
                &blk.a,
                p.get(&name(&format!("attn.{proj}.weight"))).data(),
                dproj,
                f_cap,
                cf,
                cf,
                dw.data_mut(),
                db.data_mut(),
                Some(&mut d_a),
            );
            *g.get_mut(&name(&format!("attn.{proj}.weight"))) = dw;
            *g.get_mut(&name(&format!("attn.{proj}.bias"))) = db;
        }

        // d_input = d_x1 (residual) + ln1-path(d_a).
        let mut d_input = d_x1;
        {
            let mut dgamma = g.get(&name("ln1.gamma")).clone();
            let mut dbeta = g.get(&name("ln1.beta")).clone();
            ln_bwd(
                &blk.ln1,
                p.get(&name("ln1.gamma")).data(),
                &d_a,
                f_cap,
                cf,
                dgamma.data_mut(),
                dbeta.data_mut(),
                &mut d_input,
            );
            *g.get_mut(&name("ln1.gamma")) = dgamma;
            *g.get_mut(&name("ln1.beta")) = dbeta;
        }

        // Undo the skip projection if this block had one.
        if let Some(skip) = &cache.skips[i] {
            let j = cfg.depth - 1 - i;
            let mut d_concat2 = vec![0.0; f_cap * 2 * cf];
            {
                let mut dw = g.get(&format!("skip{j}.weight")).clone();
                let mut db = g.get(&format!("skip{j}.bias")).clone();
                linear_bwd(
                    &skip.concat,
                    p.get(&format!("skip{j}.weight")).data(),
                    &d_input,
                    f_cap,
                    2 * cf,
                    cf,
                    dw.data_mut(),
                    db.data_mut(),
                    Some(&mut d_concat2),
                );
                *g.get_mut(&format!("skip{j}.weight")) = dw;
                *g.get_mut(&format!("skip{j}.bias")) = db;
            }
            let mut d_h = vec![0.0; f_cap * cf];
            for f in 0..f_cap {
                d_h[f * cf..(f + 1) * cf].copy_from_slice(&d_concat2[f * 2 * cf..f * 2 * cf + cf]);
                add_assign(
                    &mut d_stash[j][f * cf..(f + 1) * cf],
                    &d_concat2[f * 2 * cf + cf..(f + 1) * 2 * cf],
                );
            }
            grad = d_h;
        } else {
            grad = d_input;
        }
    }

    // Token assembly backward: tokens = proj(concat) + face_pos + cond.
    add_assign(g.get_mut("embed.face_pos").data_mut(), &grad);
    let mut d_cond = vec![0.0; cf];
    for f in 0..f_cap {
        for c in 0..cf {
            d_cond[c] += grad[f * cf + c];
        }
    }
    // Class embedding.
    {
        let row = cache.class_label as usize;
        let dclass = g.get_mut("class.embed").data_mut();
        add_assign(&mut dclass[row * cf..(row + 1) * cf], &d_cond);
    }
    // Timestep MLP.
    {
        let mut d_time_act = vec![0.0; cf];
        let mut dw = g.get("time.fc2.weight").clone();
        let mut db = g.get("time.fc2.bias").clone();
        linear_bwd(
            &cache.time_act,
            p.get("time.fc2.weight").data(),
            &d_cond,
            1,
            cf,
            cf,
            dw.data_mut(),
            db.data_mut(),
            Some(&mut d_time_act),
        );
        *g.get_mut("time.fc2.weight") = dw;
        *g.get_mut("time.fc2.bias") = db;
        let mut d_time_pre = d_time_act;
        for (dp, &pre) in d_time_pre.iter_mut().zip(&cache.time_pre) {
            *dp *= gelu_grad(pre);
        }
        let mut dw = g.get("time.fc1.weight").clone();
        let mut db = g.get("time.fc1.bias").clone();
        linear_bwd(
            &cache.t_feats,
            p.get("time.fc1.weight").data(),
            &d_time_pre,
            1,
            cf,
            cf,
            dw.data_mut(),
            db.data_mut(),
            None,
        );
        *g.get_mut("time.fc1.weight") = dw;
        *g.get_mut("time.fc1.bias") = db;
    }
    // Face projection and embeddings.
    let mut d_concat = vec![0.0; f_cap * 9 * d];
    {
        let mut dw = g.get("face_proj.weight").clone();
        let mut db = g.get("face_proj.bias").clone();
        linear_bwd(
            &cache.concat,
            p.get("face_proj.weight").data(),
            &grad,
            f_cap,
            9 * d,
            cf,
            dw.data_mut(),
            db.data_mut(),
            Some(&mut d_concat),
        );
        *g.get_mut("face_proj.weight") = dw;
        *g.get_mut("face_proj.bias") = db;
    }
    {
        let d_cat = g.get_mut("embed.category").data_mut();
        for f in 0..f_cap {
            for v in 0..3 {
                for a in 0..3 {
                    let sl = v * 3 + a;
                    let cat = cache.cats[f][v][a] as usize;
                    let src = &d_concat[(f * 9 + sl) * d..(f * 9 + sl + 1) * d];
                    add_assign(&mut d_cat[cat * d..(cat + 1) * d], src);
                }
            }
        }
    }
    {
        let d_slot = g.get_mut("embed.slot_pos").data_mut();
        for f in 0..f_cap {
            for sl in 0..9 {
                let src = &d_concat[(f * 9 + sl) * d..(f * 9 + sl + 1) * d];
                add_assign(&mut d_slot[sl * d..(sl + 1) * d], src);
            }
        }
    }

    g
}

// ---------------------------------------------------------------------------
// Training gradient.

pub struct GradientOutput {
    /// Mean over the batch of per-example cross entropy, normalized by each
    /// example's unmasked-coordinate count. Nats per coordinate.
    pub loss: f64,
    pub grads: ParamMap,
}

/// Examples are processed in fixed-size chunks; chunk members may evaluate in
/// parallel, and gradients always reduce in example order, so results are
/// bit-identical for every thread count.
const REDUCE_CHUNK: usize = 8;

/// Per example: sample t uniformly, corrupt with `sample_xt`, run the
/// denoiser on the noised soup, and differentiate the per-coordinate
/// cross-entropy against the clean soup.
pub fn gradient(
    params: &DenoiserParams,
    batch: &[QuantizedTriangleSoup],
    schedule: &NoiseSchedule,
    seed: u64,
    threads: usize,
) -> Result<GradientOutput, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::BadArgument("empty batch".into()));
    }
    let t_max = schedule.timesteps();
    let mut total_loss = 0.0;
    let mut grads = params.tensors.zeros_like();
    let inv_batch = 1.0 / batch.len() as f64;

    let mut start = 0;
    while start < batch.len() {
        let end = (start + REDUCE_CHUNK).min(batch.len());
        let chunk: Vec<Result<(f64, ParamMap), ModelError>> =
            crate::parallel::map_indexed(end - start, threads, |off| {
                let idx = start + off;
                let soup = &batch[idx];
                let example_seed = derive(seed, idx as u64);
                let t = 1 + Rng::new(derive(example_seed, 0)).next_below(t_max);
                let noised = sample_xt(soup, t, schedule, derive(example_seed, 1))?;
                let (logits, cache) = forward_cached(params, &noised, t, soup.class_label, schedule)?;

                let c = soup.categories();
                let norm = soup.coordinate_count() as f64;
                let mut loss = 0.0;
                let mut dlogits = vec![0.0; logits.len()];
                let data = logits.data();
                for f in 0..soup.capacity() {
                    if !soup.mask()[f] {
                        continue;
                    }
                    for v in 0..3 {
                        for a in 0..3 {
                            let base = ((f * 3 + v) * 3 + a) * c;
                            let row = &data[base..base + c];
                            let target = soup.faces()[f][v][a] as usize;
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let mut z = 0.0;
                            for &x in row {
                                z += (x - max).exp();
                            }
                            loss += z.ln() + max - row[target];
                            let coeff = inv_batch / norm;
                            for j in 0..c {
                                let softmax_j = (row[j] - max).exp() / z;
                                dlogits[base + j] = coeff * (softmax_j - if j == target { 1.0 } else { 0.0 });
                            }
                        }
                    }
                }
                let example_loss = loss / norm;
                if !example_loss.is_finite() {
                    return Err(ModelError::NonFiniteLoss { example: idx });
                }
                let g = backward(params, &cache, &dlogits);
                Ok((example_loss, g))
            });
        for item in chunk {
            let (loss, g) = item?;
            total_loss += loss * inv_batch;
            grads.accumulate(&g);
        }
        start = end;
    }

    Ok(GradientOutput { loss: total_loss, grads })
}
