//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the inputs it needs for the backward pass. `backward` walks the tape
//! in reverse and accumulates gradients into every node that requires them.

use crate::attention::{self, AffinityMode, AttentionCache};
use crate::error::{invalid, Result};
use crate::fox::GeometryLabels;
use crate::losses::{self, FoxLossTerms, LossWeights, OhemConfig, TisLossMode};
use crate::nn;
use crate::roi::{self, RoIBox};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Resize(Var),
    GlobalAvgPool(Var),
    MatVec {
        w: Var,
        x: Var,
    },
    Softmax(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    GroupAttention {
        theta: Var,
        phi: Var,
        q: Var,
        groups: usize,
        mode: AffinityMode,
        cache: AttentionCache,
    },
    AffineGrid {
        field: Var,
        roi: RoIBox,
    },
    SamplePool {
        map: Var,
        grid: Var,
        k: usize,
        scale: f64,
    },
    MaxPool {
        map: Var,
        argmax: Vec<Option<usize>>,
    },
    TisLoss {
        logits: Var,
        mask: Vec<bool>,
        selected: Vec<usize>,
    },
    L1Mean {
        a: Var,
        target: Tensor,
    },
    FoxLoss {
        pred: Var,
        labels: Box<GeometryLabels>,
        weights: LossWeights,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probed activation).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(invalid(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let out = nn::conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride }, rg))
    }

    /// Bilinear resize of an `(h, w, c)` map.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        self.value(x).check_dims3("resize")?;
        let out = nn::resize_bilinear(self.value(x), oh, ow);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Resize(x), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.value(x).check_dims3("global_avg_pool")?;
        let out = nn::global_avg_pool(self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn mat_vec(&mut self, w: Var, x: Var) -> Result<Var> {
        let out = nn::mat_vec(self.value(w), self.value(x))?;
        let rg = self.rg(&[w, x]);
        Ok(self.push(out, Op::MatVec { w, x }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 1 {
            return Err(invalid("softmax expects a vector"));
        }
        let out = Tensor::from_vec(self.value(x).shape(), nn::softmax(self.value(x).data()))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Multiplies channel `i` of an `(h, w, c)` map by `s[i]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, _, c) = self.value(x).check_dims3("channel_scale")?;
        if self.value(s).shape() != [c] {
            return Err(invalid(format!(
                "channel_scale: weights {:?} for {c} channels",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for (v, w) in px.iter_mut().zip(&sv) {
                *v *= w;
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ChannelScale { x, s }, rg))
    }

    pub fn group_attention(&mut self, theta: Var, phi: Var, q: Var, groups: usize, mode: AffinityMode) -> Result<Var> {
        let (out, cache) =
            attention::grouped_attention_forward(self.value(theta), self.value(phi), self.value(q), groups, mode)?;
        let rg = self.rg(&[theta, phi, q]);
        Ok(self.push(
            out,
            Op::GroupAttention {
                theta,
                phi,
                q,
                groups,
                mode,
                cache,
            },
            rg,
        ))
    }

    /// Image-space sampling positions for a per-point affine field over `roi`.
    pub fn affine_grid(&mut self, field: Var, roi: RoIBox) -> Result<Var> {
        let out = roi::affine_grid(self.value(field), &roi)?;
        let rg = self.rg(&[field]);
        Ok(self.push(out, Op::AffineGrid { field, roi }, rg))
    }

    /// Bilinear samples of `map` at `grid` (image coordinates times `scale`),
    /// averaged over `k x k` blocks.
    pub fn sample_pool(&mut self, map: Var, grid: Var, k: usize, scale: f64) -> Result<Var> {
        let out = roi::sample_pool(self.value(map), self.value(grid), k, scale)?;
        let rg = self.rg(&[map, grid]);
        Ok(self.push(out, Op::SamplePool { map, grid, k, scale }, rg))
    }

    /// Quantized max pooling of `map` over `k x k` blocks of grid positions.
    pub fn max_pool(&mut self, map: Var, grid: &Tensor, k: usize, scale: f64) -> Result<Var> {
        let (out, argmax) = roi::max_pool_samples(self.value(map), grid, k, scale)?;
        let rg = self.rg(&[map]);
        Ok(self.push(out, Op::MaxPool { map, argmax }, rg))
    }

    pub fn tis_loss(&mut self, logits: Var, mask: &[bool], cfg: &OhemConfig, mode: TisLossMode) -> Result<Var> {
        let (loss, selected) = losses::tis_loss_forward(self.value(logits), mask, cfg, mode)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::TisLoss {
                logits,
                mask: mask.to_vec(),
                selected,
            },
            rg,
        ))
    }

    pub fn l1_mean(&mut self, a: Var, target: Tensor) -> Result<Var> {
        let loss = losses::l1_mean(self.value(a), &target)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(loss), Op::L1Mean { a, target }, rg))
    }

    pub fn fox_loss(&mut self, pred: Var, labels: GeometryLabels, weights: LossWeights) -> Result<(Var, FoxLossTerms)> {
        let terms = losses::fox_loss_forward(self.value(pred), &labels, &weights)?;
        let rg = self.rg(&[pred]);
        let v = self.push(
            Tensor::scalar(terms.total),
            Op::FoxLoss {
                pred,
                labels: Box::new(labels),
                weights,
            },
            rg,
        );
        Ok((v, terms))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(invalid("weighted_sum expects scalars"));
            }
            total += w * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates from a scalar node. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(invalid("backward needs a scalar loss"));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (v, gv) in contributions {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (gv, &x) in ga.data_mut().iter_mut().zip(val(a).data()) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Conv2d { x, w, b, stride } => {
                let (gx, gw, gb) = nn::conv2d_backward(val(x), val(w), *stride, g, needs(x));
                let mut out = vec![(*w, gw), (*b, gb)];
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                out
            }
            Op::Resize(x) => vec![(*x, nn::resize_bilinear_backward(val(x).shape(), g))],
            Op::GlobalAvgPool(x) => {
                let (h, w, c) = val(x).dims3();
                let n = (h * w) as f64;
                let gv: Vec<f64> = g.data().iter().map(|v| v / n).collect();
                let mut gx = Vec::with_capacity(h * w * c);
                for _ in 0..h * w {
                    gx.extend_from_slice(&gv);
                }
                vec![(*x, Tensor::from_vec(val(x).shape(), gx).expect("shape"))]
            }
            Op::MatVec { w, x } => {
                let (rows, cols) = (val(w).shape()[0], val(w).shape()[1]);
                let mut gw = vec![0.0; rows * cols];
                let mut gx = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.data()[r];
                    for c in 0..cols {
                        gw[r * cols + c] = gr * val(x).data()[c];
                        gx[c] += gr * val(w).data()[r * cols + c];
                    }
                }
                vec![
                    (*w, Tensor::from_vec(&[rows, cols], gw).expect("shape")),
                    (*x, Tensor::from_vec(&[cols], gx).expect("shape")),
                ]
            }
            Op::Softmax(x) => {
                let p = node.value.data();
                let dot: f64 = p.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let gx = p.iter().zip(g.data()).map(|(pi, gi)| pi * (gi - dot)).collect();
                vec![(*x, Tensor::from_vec(val(x).shape(), gx).expect("shape"))]
            }
            Op::ChannelScale { x, s } => {
                let c = val(s).len();
                let sv = val(s).data();
                let mut gx = g.clone();
                let mut gs = vec![0.0; c];
                for (gpx, xpx) in gx.data_mut().chunks_exact_mut(c).zip(val(x).data().chunks_exact(c)) {
                    for ch in 0..c {
                        gs[ch] += gpx[ch] * xpx[ch];
                        gpx[ch] *= sv[ch];
                    }
                }
                vec![(*x, gx), (*s, Tensor::from_vec(&[c], gs).expect("shape"))]
            }
            Op::GroupAttention {
                theta,
                phi,
                q,
                groups,
                mode,
                cache,
            } => {
                let (ga, gb, gq) = attention::grouped_attention_backward(
                    val(theta),
                    val(phi),
                    val(q),
                    &node.value,
                    cache,
                    *groups,
                    *mode,
                    g,
                );
                vec![(*theta, ga), (*phi, gb), (*q, gq)]
            }
            Op::AffineGrid { field, roi } => {
                vec![(*field, roi::affine_grid_backward(val(field).shape(), roi, g))]
            }
            Op::SamplePool { map, grid, k, scale } => {
                let (gm, gg) = roi::sample_pool_backward(val(map), val(grid), *k, *scale, g, needs(map), needs(grid));
                let mut out = Vec::new();
                if let Some(gm) = gm {
                    out.push((*map, gm));
                }
                if let Some(gg) = gg {
                    out.push((*grid, gg));
                }
                out
            }
            Op::MaxPool { map, argmax } => {
                let mut gm = Tensor::zeros(val(map).shape());
                for (o, src) in argmax.iter().enumerate() {
                    if let Some(s) = src {
                        gm.data_mut()[*s] += g.data()[o];
                    }
                }
                vec![(*map, gm)]
            }
            Op::TisLoss { logits, mask, selected } => {
                let gl = losses::tis_loss_backward(val(logits), mask, selected);
                vec![(*logits, gl.scale(g.item()))]
            }
            Op::L1Mean { a, target } => {
                let ga = losses::l1_mean_backward(val(a), target);
                vec![(*a, ga.scale(g.item()))]
            }
            Op::FoxLoss { pred, labels, weights } => {
                let gp = losses::fox_loss_backward(val(pred), labels, weights);
                vec![(*pred, gp.scale(g.item()))]
            }
            Op::WeightedSum(terms) => terms
                .iter()
                .map(|&(v, w)| (v, Tensor::scalar(w * g.item())))
                .collect(),
        }
    }
}
