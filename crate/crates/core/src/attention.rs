//! Group Spatial and Channel Attention (GSCA).
//!
//! The spatial branch splits the channels into `G` groups of `C' = C / G`
//! channels. Inside a group every scalar element `(y, x, c')` is a token, so
//! the affinity is an `(H W C') x (H W C')` matrix whose entry `(u, v)` is
//! `theta(u) * phi(v)`. Rows are softmax-normalized and applied to `q`. The
//! per-group results are written back into their channel slots, which is the
//! channel-wise concatenation. A zero-initialized 1x1 projection follows.
//!
//! The channel branch squeezes the input by global average pooling and
//! excites it through `softmax(W2 relu(W1 s))`, giving one weight per channel.
//! The module output is `M = H + lambda * Y'`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{GraphParams, ParamStore};
use crate::tensor::{FeatureMap, Tensor};

/// How the intra-group affinity is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityMode {
    /// Row-wise softmax over the key dimension.
    #[default]
    Softmax,
    /// Plain product `theta(u) phi(v)` scaled by `1 / N`.
    Raw,
}

/// Per-row statistics kept from the forward pass (row max and partition sum).
#[derive(Clone, Debug, Default)]
pub struct AttentionCache {
    row_max: Vec<f64>,
    row_norm: Vec<f64>,
}

/// Multiply-accumulates spent in the affinity product: `G * (HWC / G)^2`.
pub fn affinity_macs(h: usize, w: usize, c: usize, groups: usize) -> u64 {
    let n = (h * w * c / groups) as u64;
    groups as u64 * n * n
}

/// Affinity plus aggregation FLOPs of the spatial branch.
pub fn attention_flops(h: usize, w: usize, c: usize, groups: usize) -> u64 {
    2 * affinity_macs(h, w, c, groups)
}

fn check_groups(t: &Tensor, groups: usize) -> Result<(usize, usize, usize)> {
    let (h, w, c) = t.check_dims3("attention input")?;
    if groups == 0 || c % groups != 0 {
        return Err(invalid(format!("{c} channels cannot be split into {groups} groups")));
    }
    Ok((h, w, c))
}

fn gather_group(t: &Tensor, group: usize, width: usize) -> Vec<f64> {
    let (_, _, c) = t.dims3();
    t.data()
        .chunks_exact(c)
        .flat_map(|px| px[group * width..(group + 1) * width].iter().copied())
        .collect()
}

fn scatter_group(dst: &mut [f64], c: usize, group: usize, width: usize, src: &[f64]) {
    for (px, vals) in dst.chunks_exact_mut(c).zip(src.chunks_exact(width)) {
        px[group * width..(group + 1) * width].copy_from_slice(vals);
    }
}

/// Spatial branch core: grouped all-pairs attention of `q` under the
/// `theta`/`phi` affinity. All three maps share the shape `(h, w, c)`.
pub fn grouped_attention_forward(
    theta: &Tensor,
    phi: &Tensor,
    q: &Tensor,
    groups: usize,
    mode: AffinityMode,
) -> Result<(Tensor, AttentionCache)> {
    let (h, w, c) = check_groups(theta, groups)?;
    if phi.shape() != theta.shape() || q.shape() != theta.shape() {
        return Err(invalid("theta, phi and q must share one shape"));
    }
    for (t, name) in [(theta, "theta"), (phi, "phi"), (q, "q")] {
        t.check_finite(name)?;
    }
    let width = c / groups;
    let n = h * w * width;
    let mut out = vec![0.0; h * w * c];
    let mut cache = AttentionCache {
        row_max: Vec::with_capacity(groups * n),
        row_norm: Vec::with_capacity(groups * n),
    };
    for g in 0..groups {
        let a = gather_group(theta, g, width);
        let b = gather_group(phi, g, width);
        let qv = gather_group(q, g, width);
        let mut res = vec![0.0; n];
        match mode {
            AffinityMode::Softmax => {
                let bmax = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let bmin = b.iter().copied().fold(f64::INFINITY, f64::min);
                for u in 0..n {
                    let au = a[u];
                    let m = if au >= 0.0 { au * bmax } else { au * bmin };
                    let (mut z, mut s) = (0.0, 0.0);
                    for (&bv, &qvv) in b.iter().zip(&qv) {
                        let e = (au * bv - m).exp();
                        z += e;
                        s += e * qvv;
                    }
                    res[u] = s / z;
                    cache.row_max.push(m);
                    cache.row_norm.push(z);
                }
            }
            AffinityMode::Raw => {
                let bq: f64 = b.iter().zip(&qv).map(|(x, y)| x * y).sum::<f64>() / n as f64;
                for u in 0..n {
                    res[u] = a[u] * bq;
                }
            }
        }
        scatter_group(&mut out, c, g, width, &res);
    }
    let out = Tensor::from_vec(&[h, w, c], out)?;
    out.check_finite("attention output")?;
    Ok((out, cache))
}

/// Gradients of [`grouped_attention_forward`] with respect to `theta`, `phi` and `q`.
#[allow(clippy::too_many_arguments)]
pub fn grouped_attention_backward(
    theta: &Tensor,
    phi: &Tensor,
    q: &Tensor,
    out: &Tensor,
    cache: &AttentionCache,
    groups: usize,
    mode: AffinityMode,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (h, w, c) = theta.dims3();
    let width = c / groups;
    let n = h * w * width;
    let mut ga_all = vec![0.0; h * w * c];
    let mut gb_all = vec![0.0; h * w * c];
    let mut gq_all = vec![0.0; h * w * c];
    for g in 0..groups {
        let a = gather_group(theta, g, width);
        let b = gather_group(phi, g, width);
        let qv = gather_group(q, g, width);
        let o = gather_group(out, g, width);
        let go = gather_group(grad_out, g, width);
        let mut ga = vec![0.0; n];
        let mut gb = vec![0.0; n];
        let mut gq = vec![0.0; n];
        match mode {
            AffinityMode::Softmax => {
                for u in 0..n {
                    let gu = go[u];
                    if gu == 0.0 {
                        continue;
                    }
                    let au = a[u];
                    let m = cache.row_max[g * n + u];
                    let scale = gu / cache.row_norm[g * n + u];
                    let ou = o[u];
                    let mut da = 0.0;
                    for v in 0..n {
                        // p(u, v) * g(u)
                        let pg = (au * b[v] - m).exp() * scale;
                        gq[v] += pg;
                        let dl = pg * (qv[v] - ou);
                        da += dl * b[v];
                        gb[v] += dl * au;
                    }
                    ga[u] = da;
                }
            }
            AffinityMode::Raw => {
                let inv = 1.0 / n as f64;
                let bq: f64 = b.iter().zip(&qv).map(|(x, y)| x * y).sum::<f64>() * inv;
                let ga_dot: f64 = go.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() * inv;
                for u in 0..n {
                    ga[u] = go[u] * bq;
                    gb[u] = qv[u] * ga_dot;
                    gq[u] = b[u] * ga_dot;
                }
            }
        }
        scatter_group(&mut ga_all, c, g, width, &ga);
        scatter_group(&mut gb_all, c, g, width, &gb);
        scatter_group(&mut gq_all, c, g, width, &gq);
    }
    let shape = [h, w, c];
    (
        Tensor::from_vec(&shape, ga_all).expect("shape"),
        Tensor::from_vec(&shape, gb_all).expect("shape"),
        Tensor::from_vec(&shape, gq_all).expect("shape"),
    )
}

/// One normalized affinity row: the attention of token `(y, x, c)` over its
/// group, laid out as `(h, w, C')`. Used for raw attention-map dumps.
pub fn affinity_row(theta: &Tensor, phi: &Tensor, groups: usize, y: usize, x: usize, c: usize) -> Result<Tensor> {
    let (h, w, ch) = check_groups(theta, groups)?;
    if y >= h || x >= w || c >= ch {
        return Err(invalid("query position outside the map"));
    }
    let width = ch / groups;
    let g = c / width;
    let au = theta.at3(y, x, c);
    let b = gather_group(phi, g, width);
    let logits: Vec<f64> = b.iter().map(|&bv| au * bv).collect();
    Tensor::from_vec(&[h, w, width], crate::nn::softmax(&logits))
}

/// Softmax channel weights, one per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights(Vec<f64>);

impl ChannelWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A 1x1 convolution `weight (1, 1, C, C)` plus `bias (C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv1x1 {
    pub fn identity(c: usize) -> Self {
        let mut weight = Tensor::zeros(&[1, 1, c, c]);
        for i in 0..c {
            weight.data_mut()[i * c + i] = 1.0;
        }
        Self {
            weight,
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[1, 1, c, c]),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn random(c: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = (0..c * c).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::from_vec(&[1, 1, c, c], w).expect("shape"),
            bias: Tensor::zeros(&[c]),
        }
    }
}

/// Parameters of one GSCA block.
#[derive(Clone, Debug, PartialEq)]
pub struct GscaParams {
    pub theta: Conv1x1,
    pub phi: Conv1x1,
    pub q: Conv1x1,
    /// Projection after the concatenation; zero at initialization.
    pub out_proj: Conv1x1,
    /// `(kappa C, C)`
    pub r_w1: Tensor,
    /// `(C, kappa C)`
    pub r_w2: Tensor,
    pub groups: usize,
    pub expansion: f64,
    pub mode: AffinityMode,
}

pub fn hidden_width(channels: usize, expansion: f64) -> usize {
    ((channels as f64 * expansion).round() as usize).max(1)
}

impl GscaParams {
    /// Every 1x1 transform is the identity and the excitation weights are zero.
    pub fn identity(channels: usize, groups: usize, expansion: f64) -> Self {
        let hidden = hidden_width(channels, expansion);
        Self {
            theta: Conv1x1::identity(channels),
            phi: Conv1x1::identity(channels),
            q: Conv1x1::identity(channels),
            out_proj: Conv1x1::identity(channels),
            r_w1: Tensor::zeros(&[hidden, channels]),
            r_w2: Tensor::zeros(&[channels, hidden]),
            groups,
            expansion,
            mode: AffinityMode::Softmax,
        }
    }

    /// Training initialization: random transforms, zero output projection.
    pub fn init(channels: usize, groups: usize, expansion: f64, rng: &mut impl Rng) -> Self {
        let hidden = hidden_width(channels, expansion);
        let std = (1.0 / channels as f64).sqrt();
        let normal_w1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("std");
        let normal_w2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("std");
        Self {
            theta: Conv1x1::random(channels, std, rng),
            phi: Conv1x1::random(channels, std, rng),
            q: Conv1x1::random(channels, std, rng),
            out_proj: Conv1x1::zeros(channels),
            r_w1: Tensor::from_vec(
                &[hidden, channels],
                (0..hidden * channels).map(|_| normal_w1.sample(rng)).collect(),
            )
            .expect("shape"),
            r_w2: Tensor::from_vec(
                &[channels, hidden],
                (0..hidden * channels).map(|_| normal_w2.sample(rng)).collect(),
            )
            .expect("shape"),
            groups,
            expansion,
            mode: AffinityMode::Softmax,
        }
    }

    pub fn channels(&self) -> usize {
        self.theta.bias.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let c = self.channels();
        if c != channels {
            return Err(invalid(format!("parameters expect {c} channels, input has {channels}")));
        }
        if self.groups == 0 || c % self.groups != 0 {
            return Err(invalid(format!("{c} channels cannot be split into {} groups", self.groups)));
        }
        for conv in [&self.theta, &self.phi, &self.q, &self.out_proj] {
            if conv.weight.shape() != [1, 1, c, c] || conv.bias.shape() != [c] {
                return Err(invalid("1x1 transforms must map C channels to C channels"));
            }
        }
        let hidden = self.r_w1.shape().first().copied().unwrap_or(0);
        if self.r_w1.shape() != [hidden, c] || self.r_w2.shape() != [c, hidden] || hidden == 0 {
            return Err(invalid(format!(
                "excitation weights {:?} / {:?} do not match {c} channels",
                self.r_w1.shape(),
                self.r_w2.shape()
            )));
        }
        Ok(())
    }

    /// Writes the parameters into `store` under `prefix`.
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (name, conv) in [("theta", &self.theta), ("phi", &self.phi), ("q", &self.q), ("out", &self.out_proj)] {
            store.insert(format!("{prefix}.{name}.w"), conv.weight.clone());
            store.insert(format!("{prefix}.{name}.b"), conv.bias.clone());
        }
        store.insert(format!("{prefix}.se.w1"), self.r_w1.clone());
        store.insert(format!("{prefix}.se.w2"), self.r_w2.clone());
    }

    fn store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        self.insert_into(&mut store, "gsca");
        store
    }
}

/// Graph form of the spatial branch, returning `Y'` (after the output projection).
pub fn spatial_branch(
    g: &mut Graph,
    params: &GraphParams,
    prefix: &str,
    h: Var,
    groups: usize,
    mode: AffinityMode,
) -> Result<Var> {
    let theta = params.conv(g, &format!("{prefix}.theta"), h, 1)?;
    let phi = params.conv(g, &format!("{prefix}.phi"), h, 1)?;
    let q = params.conv(g, &format!("{prefix}.q"), h, 1)?;
    let att = g.group_attention(theta, phi, q, groups, mode)?;
    params.conv(g, &format!("{prefix}.out"), att, 1)
}

/// Graph form of the channel branch, returning the softmax weights.
pub fn channel_branch(g: &mut Graph, params: &GraphParams, prefix: &str, h: Var) -> Result<Var> {
    let s = g.global_avg_pool(h)?;
    let z = g.mat_vec(params.get(&format!("{prefix}.se.w1"))?, s)?;
    let z = g.relu(z);
    let logits = g.mat_vec(params.get(&format!("{prefix}.se.w2"))?, z)?;
    g.softmax(logits)
}

/// Graph form of the whole block: `M = H + lambda * Y'`.
pub fn gsca_block(
    g: &mut Graph,
    params: &GraphParams,
    prefix: &str,
    h: Var,
    groups: usize,
    mode: AffinityMode,
) -> Result<Var> {
    let y_prime = spatial_branch(g, params, prefix, h, groups, mode)?;
    let lambda = channel_branch(g, params, prefix, h)?;
    let y = g.channel_scale(y_prime, lambda)?;
    g.add(h, y)
}

fn check_input(h: &FeatureMap, p: &GscaParams) -> Result<()> {
    let (_, _, c) = h.check_dims3("GSCA input")?;
    p.validate(c)?;
    if !h.is_finite() {
        return Err(Error::NumericDomain("GSCA input contains non-finite values".into()));
    }
    Ok(())
}

/// Spatial-attended map `Y'`; same shape as the input.
pub fn group_spatial_attention(h: &FeatureMap, p: &GscaParams) -> Result<FeatureMap> {
    check_input(h, p)?;
    let mut g = Graph::new();
    let params = p.store().load(&mut g, false);
    let hv = g.constant(h.clone());
    let y = spatial_branch(&mut g, &params, "gsca", hv, p.groups, p.mode)?;
    Ok(g.value(y).clone())
}

/// Channel weights `lambda = softmax(W2 relu(W1 gap(h)))`.
pub fn global_channel_attention(h: &FeatureMap, p: &GscaParams) -> Result<ChannelWeights> {
    check_input(h, p)?;
    let mut g = Graph::new();
    let params = p.store().load(&mut g, false);
    let hv = g.constant(h.clone());
    let l = channel_branch(&mut g, &params, "gsca", hv)?;
    Ok(ChannelWeights(g.value(l).data().to_vec()))
}

/// Full GSCA block output `M = H + Y`.
pub fn gsca_forward(h: &FeatureMap, p: &GscaParams) -> Result<FeatureMap> {
    check_input(h, p)?;
    let mut g = Graph::new();
    let params = p.store().load(&mut g, false);
    let hv = g.constant(h.clone());
    let m = gsca_block(&mut g, &params, "gsca", hv, p.groups, p.mode)?;
    Ok(g.value(m).clone())
}
