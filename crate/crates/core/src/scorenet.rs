//! Reward- and time-conditioned encoder–decoder score network.
//!
//! Input channels are `[z_t; z0]`. Every encoder level, the bottleneck and
//! every decoder level add a per-channel time bias before their activation;
//! decoder levels additionally multiply their activations by a per-channel
//! reward gate. The final linear layer sees the top decoder features and the
//! raw input channels, scaled by [`RAW_SKIP_GAIN`].
//!
//! The network's raw field `u` is an endpoint residual: the returned score is
//! `u / sigma_t`, so `z_t - sigma_t * score = z_t - u` and the network works
//! at unit scale for every time index.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::{self, Fmap};
use crate::par;
use crate::schedule::Schedule;

/// Fixed gain on the raw input channels seen by the output layer. The
/// zero-initialized taps that copy `z_t - z0` through only have to grow to
/// `1 / RAW_SKIP_GAIN`; a power of two keeps that copy exact.
pub const RAW_SKIP_GAIN: f64 = 8.0;

/// Preference token fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reward {
    /// `r = 0`, the preferred class.
    Good,
    /// `r = 1`.
    Bad,
    /// The nullified token used by the unconditional branch.
    Null,
}

impl Reward {
    pub fn index(self) -> usize {
        match self {
            Reward::Good => 0,
            Reward::Bad => 1,
            Reward::Null => 2,
        }
    }

    /// Binary label, `None` for the null token.
    pub fn label(self) -> Option<u8> {
        match self {
            Reward::Good => Some(0),
            Reward::Bad => Some(1),
            Reward::Null => None,
        }
    }

    pub fn from_label(r: u8) -> Result<Self> {
        match r {
            0 => Ok(Reward::Good),
            1 => Ok(Reward::Bad),
            other => Err(invalid(format!("reward label must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Channel width per encoder level; the number of levels is `widths.len()`.
    pub widths: Vec<usize>,
    /// Sinusoidal feature count (sin/cos pairs, so even).
    pub time_features: usize,
    pub time_hidden: usize,
    pub reward_dim: usize,
    pub reward_hidden: usize,
    /// Ablation: zero the source-image input channel.
    pub drop_z0: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32],
            time_features: 32,
            time_hidden: 64,
            reward_dim: 16,
            reward_hidden: 32,
            drop_z0: false,
        }
    }
}

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(invalid("network needs at least one encoder level"));
        }
        if self.widths.contains(&0) {
            return Err(invalid("channel widths must be positive"));
        }
        if self.time_features < 2 || !self.time_features.is_multiple_of(2) {
            return Err(invalid("time_features must be a positive even number"));
        }
        if self.time_hidden == 0 || self.reward_dim == 0 || self.reward_hidden == 0 {
            return Err(invalid("embedding sizes must be positive"));
        }
        Ok(())
    }

    /// Images must be divisible by this factor along both axes.
    pub fn stride(&self) -> usize {
        1 << self.levels()
    }

    fn time_dims(&self) -> Vec<usize> {
        let e = self.levels();
        let mut dims = self.widths.clone();
        dims.push(self.widths[e - 1]);
        dims.extend_from_slice(&self.widths);
        dims
    }

    fn gate_dims(&self) -> Vec<usize> {
        self.widths.clone()
    }
}

/// A parameter tensor with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[cout, cin, 3, 3]`
    pub weight: Tensor,
    /// `[cout]`
    pub bias: Tensor,
}

impl Conv {
    fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[cout, cin, 3, 3], bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, 3, 3]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn cout(&self) -> usize {
        self.weight.shape[0]
    }

    fn forward(&self, x: &Fmap) -> Fmap {
        nn::conv3x3(x, &self.weight.data, &self.bias.data, self.cout())
    }
}

/// All weights of the score network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetParams {
    config: NetConfig,
    pub enc: Vec<Conv>,
    pub mid: Conv,
    /// `dec[l]` produces the level-`l` resolution; `dec[0]` is full resolution.
    pub dec: Vec<Conv>,
    pub out: Conv,
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
    /// Rows: good, bad, null.
    pub reward_table: Tensor,
    pub reward_w1: Tensor,
    pub reward_w2: Tensor,
}

/// What the network is conditioned on besides `z_t`.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub z0: &'a Image,
    pub t_index: usize,
    pub r: Reward,
}

/// Regression target used by [`ScoreNetParams::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `(z_t - z1) / sigma_t`
    #[default]
    Naive,
    /// `-(z_t - mu_t) / var_t`
    Exact,
    /// Squared error of the predicted endpoint `z_t - u` against `z1`; the
    /// naive loss weighted by `sigma_t^2`.
    Endpoint,
}

/// One training example: a bridge sample with both endpoints.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub z_t: Image,
    pub z0: Image,
    pub z1: Image,
    pub t_index: usize,
    pub r: Reward,
}

struct TimeCache {
    features: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    biases: Vec<Vec<f64>>,
}

struct GateCache {
    row: usize,
    embedding: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    gates: Vec<Vec<f64>>,
}

struct ForwardCache {
    enc_in: Vec<Fmap>,
    enc_pre: Vec<Fmap>,
    enc_act: Vec<Fmap>,
    mid_in: Fmap,
    mid_pre: Fmap,
    dec_in: Vec<Fmap>,
    dec_pre: Vec<Fmap>,
    dec_act: Vec<Fmap>,
    out_in: Fmap,
    time: TimeCache,
    gate: GateCache,
}

fn add_channel_bias(f: &mut Fmap, bias: &[f64]) {
    for (c, &b) in bias.iter().enumerate() {
        for v in f.plane_mut(c) {
            *v += b;
        }
    }
}

fn silu_map(f: &Fmap) -> Fmap {
    Fmap {
        data: f.data.iter().map(|&v| nn::silu(v)).collect(),
        ..*f
    }
}

fn split_dims(v: &[f64], dims: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(dims.len());
    let mut at = 0;
    for &d in dims {
        out.push(v[at..at + d].to_vec());
        at += d;
    }
    out
}

impl ScoreNetParams {
    /// Fan-in scaled uniform initialization. The output layer starts at zero
    /// and the null reward embedding starts at the origin, so its gates are
    /// exactly one.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &config.widths;
        let e = w.len();
        let enc = (0..e)
            .map(|l| Conv::new(if l == 0 { 2 } else { w[l - 1] }, w[l], &mut rng))
            .collect();
        let mid = Conv::new(w[e - 1], w[e - 1], &mut rng);
        let dec = (0..e)
            .map(|l| {
                let below = w[(l + 1).min(e - 1)];
                Conv::new(below + w[l], w[l], &mut rng)
            })
            .collect();
        let out = Conv::zeros(w[0] + 2, 1);

        let tf = config.time_features;
        let th = config.time_hidden;
        let tsum: usize = config.time_dims().iter().sum();
        let time_w1 = Tensor::uniform(&[th, tf], 1.0 / (tf as f64).sqrt(), &mut rng);
        let time_b1 = Tensor::zeros(&[th]);
        let time_w2 = Tensor::uniform(&[tsum, th], 1.0 / (th as f64).sqrt(), &mut rng);
        let time_b2 = Tensor::zeros(&[tsum]);

        let rd = config.reward_dim;
        let rh = config.reward_hidden;
        let gsum: usize = config.gate_dims().iter().sum();
        let mut reward_table = Tensor::zeros(&[3, rd]);
        for v in reward_table.data[..2 * rd].iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let reward_w1 = Tensor::uniform(&[rh, rd], 1.0 / (rd as f64).sqrt(), &mut rng);
        let reward_w2 = Tensor::uniform(&[gsum, rh], 1.0 / (rh as f64).sqrt(), &mut rng);

        Ok(Self {
            config: config.clone(),
            enc,
            mid,
            dec,
            out,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            reward_table,
            reward_w1,
            reward_w2,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Same architecture with every entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Tensors in the fixed serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for c in &self.enc {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.push(&self.mid.weight);
        v.push(&self.mid.bias);
        for c in &self.dec {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.push(&self.out.weight);
        v.push(&self.out.bias);
        v.extend([
            &self.time_w1,
            &self.time_b1,
            &self.time_w2,
            &self.time_b2,
            &self.reward_table,
            &self.reward_w1,
            &self.reward_w2,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for c in &mut self.enc {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.mid.weight);
        v.push(&mut self.mid.bias);
        for c in &mut self.dec {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v.extend([
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
            &mut self.reward_table,
            &mut self.reward_w1,
            &mut self.reward_w2,
        ]);
        v
    }

    /// Human-readable tensor names, aligned with [`ScoreNetParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.enc.len() {
            v.push(format!("enc{l}.weight"));
            v.push(format!("enc{l}.bias"));
        }
        v.push("mid.weight".into());
        v.push("mid.bias".into());
        for l in 0..self.dec.len() {
            v.push(format!("dec{l}.weight"));
            v.push(format!("dec{l}.bias"));
        }
        v.push("out.weight".into());
        v.push("out.bias".into());
        for n in [
            "time.w1",
            "time.b1",
            "time.w2",
            "time.b2",
            "reward.table",
            "reward.w1",
            "reward.w2",
        ] {
            v.push(n.into());
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &ScoreNetParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    /// Raw sinusoidal time features: `sin(f_k t), cos(f_k t)` for a geometric
    /// ladder of frequencies from 1 to `N / 2`.
    pub fn time_features(&self, schedule: &Schedule, t_index: usize) -> Vec<f64> {
        sinusoidal_features(self.config.time_features, schedule, t_index)
    }

    fn time_embedding(&self, schedule: &Schedule, t_index: usize) -> TimeCache {
        let features = self.time_features(schedule, t_index);
        let pre = nn::dense(&self.time_w1.data, Some(&self.time_b1.data), &features);
        let hidden: Vec<f64> = pre.iter().map(|&v| nn::softplus(v)).collect();
        let flat = nn::dense(&self.time_w2.data, Some(&self.time_b2.data), &hidden);
        TimeCache {
            features,
            pre,
            hidden,
            biases: split_dims(&flat, &self.config.time_dims()),
        }
    }

    /// Per-level additive time biases: encoder levels, bottleneck, decoder levels.
    pub fn embed_time(&self, schedule: &Schedule, t_index: usize) -> Vec<Vec<f64>> {
        self.time_embedding(schedule, t_index).biases
    }

    fn gate_embedding(&self, r: Reward) -> GateCache {
        let rd = self.config.reward_dim;
        let embedding = self.reward_table.data[r.index() * rd..(r.index() + 1) * rd].to_vec();
        let pre = nn::dense(&self.reward_w1.data, None, &embedding);
        let hidden: Vec<f64> = pre.iter().map(|&v| nn::shifted_softplus(v)).collect();
        let flat: Vec<f64> = nn::dense(&self.reward_w2.data, None, &hidden)
            .into_iter()
            .map(|v| 1.0 + v)
            .collect();
        GateCache {
            row: r.index(),
            embedding,
            pre,
            hidden,
            gates: split_dims(&flat, &self.config.gate_dims()),
        }
    }

    /// Multiplicative per-channel gates applied at each decoder level.
    pub fn reward_gates(&self, r: Reward) -> Vec<Vec<f64>> {
        self.gate_embedding(r).gates
    }

    fn check_input(&self, schedule: &Schedule, z_t: &Image, cond: &Conditioning) -> Result<()> {
        z_t.ensure_same_shape(cond.z0)?;
        schedule.check_index(cond.t_index)?;
        let s = self.config.stride();
        if !z_t.width().is_multiple_of(s) || !z_t.height().is_multiple_of(s) || z_t.is_empty() {
            return Err(invalid(format!(
                "image {}x{} is not divisible by {s}",
                z_t.width(),
                z_t.height()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, schedule: &Schedule, z_t: &Image, cond: &Conditioning) -> (Fmap, ForwardCache) {
        let (w, h) = z_t.shape();
        let e = self.config.levels();
        let mut x0 = Fmap::zeros(2, h, w);
        x0.plane_mut(0).copy_from_slice(z_t.data());
        if !self.config.drop_z0 {
            x0.plane_mut(1).copy_from_slice(cond.z0.data());
        }
        let time = self.time_embedding(schedule, cond.t_index);
        let gate = self.gate_embedding(cond.r);

        let mut enc_in = Vec::with_capacity(e);
        let mut enc_pre = Vec::with_capacity(e);
        let mut enc_act = Vec::with_capacity(e);
        let mut x = x0.clone();
        for l in 0..e {
            let mut a = self.enc[l].forward(&x);
            add_channel_bias(&mut a, &time.biases[l]);
            let act = silu_map(&a);
            enc_in.push(std::mem::replace(&mut x, nn::down2(&act)));
            enc_pre.push(a);
            enc_act.push(act);
        }
        let mid_in = x;
        let mut mid_pre = self.mid.forward(&mid_in);
        add_channel_bias(&mut mid_pre, &time.biases[e]);
        let mut x = silu_map(&mid_pre);

        let mut dec_in = vec![Fmap::zeros(0, 0, 0); e];
        let mut dec_pre = vec![Fmap::zeros(0, 0, 0); e];
        let mut dec_act = vec![Fmap::zeros(0, 0, 0); e];
        for l in (0..e).rev() {
            let cat = Fmap::concat(&nn::up2(&x), &enc_act[l]);
            let mut a = self.dec[l].forward(&cat);
            add_channel_bias(&mut a, &time.biases[e + 1 + l]);
            let act = silu_map(&a);
            let mut gated = act.clone();
            for (c, &g) in gate.gates[l].iter().enumerate() {
                for v in gated.plane_mut(c) {
                    *v *= g;
                }
            }
            dec_in[l] = cat;
            dec_pre[l] = a;
            dec_act[l] = act;
            x = gated;
        }
        let mut skip = x0;
        skip.data.iter_mut().for_each(|v| *v *= RAW_SKIP_GAIN);
        let out_in = Fmap::concat(&x, &skip);
        let raw = self.out.forward(&out_in);
        (
            raw,
            ForwardCache {
                enc_in,
                enc_pre,
                enc_act,
                mid_in,
                mid_pre,
                dec_in,
                dec_pre,
                dec_act,
                out_in,
                time,
                gate,
            },
        )
    }

    /// The network's unit-scale endpoint residual `u`, with `z_t - u` the
    /// predicted target endpoint.
    pub fn endpoint_residual(&self, schedule: &Schedule, z_t: &Image, cond: &Conditioning) -> Result<Image> {
        self.check_input(schedule, z_t, cond)?;
        let (raw, _) = self.forward_cached(schedule, z_t, cond);
        Image::from_vec(z_t.width(), z_t.height(), raw.data)
    }

    /// Score `s(z_t | z0, t, r)`.
    pub fn forward(&self, schedule: &Schedule, z_t: &Image, cond: &Conditioning) -> Result<Image> {
        let sigma = schedule.sigma(cond.t_index);
        if !(sigma > 0.0) {
            return Err(Error::BoundaryTime(cond.t_index));
        }
        let raw = self.endpoint_residual(schedule, z_t, cond)?;
        Ok(raw.scale(1.0 / sigma))
    }

    /// Regression target, error scale and whether the error is taken in
    /// residual units for one item.
    ///
    /// Residual-based targets are compared in residual units, `u - (z_t - z1)`,
    /// so an exact residual gives a bitwise-zero error. `scale` multiplies
    /// that difference (or the score for the exact kind).
    fn item_target(&self, schedule: &Schedule, item: &TrainItem, kind: LossKind) -> Result<(Image, f64, bool)> {
        let cond = Conditioning {
            z0: &item.z0,
            t_index: item.t_index,
            r: item.r,
        };
        self.check_input(schedule, &item.z_t, &cond)?;
        item.z0.ensure_same_shape(&item.z1)?;
        let sigma = schedule.sigma(item.t_index);
        match kind {
            LossKind::Naive | LossKind::Endpoint => {
                if item.t_index == 0 || !(sigma > 0.0) {
                    return Err(Error::BoundaryTime(item.t_index));
                }
                let scale = if kind == LossKind::Naive { 1.0 / sigma } else { 1.0 };
                Ok((item.z_t.zip_map(&item.z1, |a, b| a - b)?, scale, true))
            }
            LossKind::Exact => {
                let (mu, var) = schedule.bridge_moments(item.t_index, &item.z0, &item.z1)?;
                if !(var > 0.0) || !(sigma > 0.0) {
                    return Err(Error::BoundaryTime(item.t_index));
                }
                Ok((item.z_t.lincomb(-1.0 / var, &mu, 1.0 / var)?, 1.0 / sigma, false))
            }
        }
    }

    fn backward_item(
        &self,
        schedule: &Schedule,
        item: &TrainItem,
        kind: LossKind,
        weight: f64,
    ) -> Result<(f64, ScoreNetParams)> {
        let (target, scale, residual_units) = self.item_target(schedule, item, kind)?;
        let cond = Conditioning {
            z0: &item.z0,
            t_index: item.t_index,
            r: item.r,
        };
        let (raw, cache) = self.forward_cached(schedule, &item.z_t, &cond);
        let n = raw.data.len() as f64;
        let mut loss = 0.0;
        let mut g_raw = Fmap::zeros(1, raw.h, raw.w);
        for ((g, &u), &tgt) in g_raw.data.iter_mut().zip(&raw.data).zip(target.data()) {
            let err = if residual_units { (u - tgt) * scale } else { u * scale - tgt };
            loss += err * err;
            *g = weight * 2.0 * err * scale / n;
        }
        loss /= n;
        let grads = self.backprop(&cache, &g_raw);
        Ok((loss, grads))
    }

    fn item_loss(&self, schedule: &Schedule, item: &TrainItem, kind: LossKind) -> Result<f64> {
        let (target, scale, residual_units) = self.item_target(schedule, item, kind)?;
        let cond = Conditioning {
            z0: &item.z0,
            t_index: item.t_index,
            r: item.r,
        };
        let (raw, _) = self.forward_cached(schedule, &item.z_t, &cond);
        let sum: f64 = raw
            .data
            .iter()
            .zip(target.data())
            .map(|(&u, &tgt)| {
                let err = if residual_units { (u - tgt) * scale } else { u * scale - tgt };
                err * err
            })
            .sum();
        Ok(sum / raw.data.len() as f64)
    }

    fn backprop(&self, cache: &ForwardCache, g_raw: &Fmap) -> ScoreNetParams {
        let e = self.config.levels();
        let w = &self.config.widths;
        let mut grads = self.zeros_like();
        let mut g_tb: Vec<Vec<f64>> = self.config.time_dims().iter().map(|&d| vec![0.0; d]).collect();
        let mut g_gate: Vec<Vec<f64>> = self.config.gate_dims().iter().map(|&d| vec![0.0; d]).collect();

        let g_out_in = nn::conv3x3_backward(
            &cache.out_in,
            &self.out.weight.data,
            g_raw,
            &mut grads.out.weight.data,
            &mut grads.out.bias.data,
            true,
        )
        .expect("input gradient requested");
        let (mut g_x, _) = g_out_in.split(w[0]);

        let mut g_skip: Vec<Option<Fmap>> = (0..e).map(|_| None).collect();
        for l in 0..e {
            // g_x: gradient w.r.t. the gated output of decoder level l
            let act = &cache.dec_act[l];
            let pre = &cache.dec_pre[l];
            let gates = &cache.gate.gates[l];
            let mut g_pre = Fmap::zeros(act.c, act.h, act.w);
            for c in 0..act.c {
                let gx = g_x.plane(c);
                let a = act.plane(c);
                let p = pre.plane(c);
                let gp = g_pre.plane_mut(c);
                let mut g_gate_c = 0.0;
                let mut g_tb_c = 0.0;
                for k in 0..gx.len() {
                    g_gate_c += gx[k] * a[k];
                    let d = gx[k] * gates[c] * nn::silu_grad(p[k]);
                    gp[k] = d;
                    g_tb_c += d;
                }
                g_gate[l][c] += g_gate_c;
                g_tb[e + 1 + l][c] += g_tb_c;
            }
            let gconv = &mut grads.dec[l];
            let g_cat = nn::conv3x3_backward(
                &cache.dec_in[l],
                &self.dec[l].weight.data,
                &g_pre,
                &mut gconv.weight.data,
                &mut gconv.bias.data,
                true,
            )
            .expect("input gradient requested");
            let below = w[(l + 1).min(e - 1)];
            let (g_up, g_s) = g_cat.split(below);
            g_skip[l] = Some(g_s);
            g_x = nn::up2_backward(&g_up);
        }

        // bottleneck
        let mut g_pre = Fmap::zeros(cache.mid_pre.c, cache.mid_pre.h, cache.mid_pre.w);
        for c in 0..g_pre.c {
            let gx = g_x.plane(c);
            let p = cache.mid_pre.plane(c);
            let mut acc = 0.0;
            for (k, gp) in g_pre.plane_mut(c).iter_mut().enumerate() {
                *gp = gx[k] * nn::silu_grad(p[k]);
                acc += *gp;
            }
            g_tb[e][c] += acc;
        }
        g_x = nn::conv3x3_backward(
            &cache.mid_in,
            &self.mid.weight.data,
            &g_pre,
            &mut grads.mid.weight.data,
            &mut grads.mid.bias.data,
            true,
        )
        .expect("input gradient requested");

        for l in (0..e).rev() {
            let act = &cache.enc_act[l];
            let mut g_act = nn::down2_backward(&g_x, act.h, act.w);
            if let Some(s) = g_skip[l].take() {
                g_act.add_assign(&s);
            }
            let pre = &cache.enc_pre[l];
            for c in 0..g_act.c {
                let p = pre.plane(c);
                let mut acc = 0.0;
                for (k, g) in g_act.plane_mut(c).iter_mut().enumerate() {
                    *g *= nn::silu_grad(p[k]);
                    acc += *g;
                }
                g_tb[l][c] += acc;
            }
            let gconv = &mut grads.enc[l];
            let gi = nn::conv3x3_backward(
                &cache.enc_in[l],
                &self.enc[l].weight.data,
                &g_act,
                &mut gconv.weight.data,
                &mut gconv.bias.data,
                l > 0,
            );
            if let Some(gi) = gi {
                g_x = gi;
            }
        }

        // time embedding MLP
        let g_flat: Vec<f64> = g_tb.concat();
        let t = &cache.time;
        let g_hidden = nn::dense_backward(
            &self.time_w2.data,
            &t.hidden,
            &g_flat,
            &mut grads.time_w2.data,
            Some(&mut grads.time_b2.data),
        );
        let g_pre: Vec<f64> = g_hidden
            .iter()
            .zip(&t.pre)
            .map(|(g, &p)| g * nn::sigmoid(p))
            .collect();
        nn::dense_backward(
            &self.time_w1.data,
            &t.features,
            &g_pre,
            &mut grads.time_w1.data,
            Some(&mut grads.time_b1.data),
        );

        // reward gate MLP
        let g_flat: Vec<f64> = g_gate.concat();
        let gc = &cache.gate;
        let g_hidden = nn::dense_backward(&self.reward_w2.data, &gc.hidden, &g_flat, &mut grads.reward_w2.data, None);
        let g_pre: Vec<f64> = g_hidden
            .iter()
            .zip(&gc.pre)
            .map(|(g, &p)| g * nn::sigmoid(p))
            .collect();
        let g_emb = nn::dense_backward(&self.reward_w1.data, &gc.embedding, &g_pre, &mut grads.reward_w1.data, None);
        let rd = self.config.reward_dim;
        let row = gc.row;
        for (dst, g) in grads.reward_table.data[row * rd..(row + 1) * rd].iter_mut().zip(&g_emb) {
            *dst += g;
        }
        grads
    }

    /// Mean loss over the batch and its exact gradient.
    pub fn backward(
        &self,
        schedule: &Schedule,
        batch: &[TrainItem],
        kind: LossKind,
    ) -> Result<(f64, ScoreNetParams)> {
        if batch.is_empty() {
            return Err(invalid("backward needs a nonempty batch"));
        }
        let weight = 1.0 / batch.len() as f64;
        let parts = par::try_map_range(batch.len(), |k| {
            self.backward_item(schedule, &batch[k], kind, weight)
        })?;
        let mut grads = self.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            grads.axpy(1.0, g);
        }
        Ok((loss * weight, grads))
    }

    /// Batch loss without gradients.
    pub fn loss(&self, schedule: &Schedule, batch: &[TrainItem], kind: LossKind) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid("loss needs a nonempty batch"));
        }
        let parts = par::try_map_range(batch.len(), |k| self.item_loss(schedule, &batch[k], kind))?;
        Ok(parts.iter().sum::<f64>() / batch.len() as f64)
    }
}

pub(crate) fn sinusoidal_features(count: usize, schedule: &Schedule, t_index: usize) -> Vec<f64> {
    let t = schedule.time(t_index);
    let half = count / 2;
    let top = (schedule.n_steps() as f64 / 2.0).max(1.0);
    let mut out = Vec::with_capacity(count);
    for k in 0..half {
        let f = if half == 1 {
            1.0
        } else {
            top.powf(k as f64 / (half - 1) as f64)
        };
        out.push((f * t).sin());
        out.push((f * t).cos());
    }
    out
}

const MAGIC: &[u8; 5] = b"SBSN1";

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

impl ScoreNetParams {
    /// Checkpoint layout: `SBSN1`, config block (u32 level count, u32 widths,
    /// u32 time_features, time_hidden, reward_dim, reward_hidden, u8 drop_z0),
    /// u32 tensor count, then per tensor a u32 rank, u32 dims and
    /// little-endian f64 values, in [`ScoreNetParams::tensors`] order.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let c = &self.config;
        write_u32(&mut w, c.widths.len())?;
        for &x in &c.widths {
            write_u32(&mut w, x)?;
        }
        for x in [c.time_features, c.time_hidden, c.reward_dim, c.reward_hidden] {
            write_u32(&mut w, x)?;
        }
        w.write_all(&[c.drop_z0 as u8])?;
        let tensors = self.tensors();
        write_u32(&mut w, tensors.len())?;
        for t in tensors {
            write_u32(&mut w, t.shape.len())?;
            for &d in &t.shape {
                write_u32(&mut w, d)?;
            }
            let mut buf = Vec::with_capacity(8 * t.data.len());
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an SBSN1 checkpoint".into()));
        }
        let levels = read_u32(&mut r)?;
        if levels == 0 || levels > 16 {
            return Err(Error::Format(format!("implausible level count {levels}")));
        }
        let widths = (0..levels).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let time_features = read_u32(&mut r)?;
        let time_hidden = read_u32(&mut r)?;
        let reward_dim = read_u32(&mut r)?;
        let reward_hidden = read_u32(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let config = NetConfig {
            widths,
            time_features,
            time_hidden,
            reward_dim,
            reward_hidden,
            drop_z0: flag[0] != 0,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut params = Self::init(&config, 0)?;
        let count = read_u32(&mut r)?;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {count}",
                slots.len()
            )));
        }
        for (k, slot) in slots.iter_mut().enumerate() {
            let rank = read_u32(&mut r)?;
            let shape = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape {
                return Err(Error::Format(format!(
                    "tensor {k}: shape {shape:?} does not match {:?}",
                    slot.shape
                )));
            }
            let mut buf = vec![0u8; 8 * slot.data.len()];
            r.read_exact(&mut buf)?;
            for (v, chunk) in slot.data.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_config() -> NetConfig {
        NetConfig {
            widths: vec![3, 4],
            time_features: 8,
            time_hidden: 6,
            reward_dim: 4,
            reward_hidden: 5,
            drop_z0: false,
        }
    }

    /// Initialized parameters with every tensor (including the zero output layer
    /// and the null embedding) perturbed so all gradient paths are live.
    pub(crate) fn randomized(config: &NetConfig, seed: u64) -> ScoreNetParams {
        let mut p = ScoreNetParams::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        for t in p.tensors_mut() {
            for v in t.data.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    pub(crate) fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> Image {
        Image::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    fn batch(size: usize, schedule: &Schedule, seed: u64) -> Vec<TrainItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rewards = [Reward::Good, Reward::Bad, Reward::Null];
        (0..3)
            .map(|k| {
                let z0 = random_image(size, size, &mut rng);
                let z1 = random_image(size, size, &mut rng);
                let t_index = rng.random_range(1..schedule.n_steps());
                let z_t = crate::bridge::sample_intermediate(schedule, &z0, &z1, t_index, &mut rng).unwrap();
                TrainItem {
                    z_t,
                    z0,
                    z1,
                    t_index,
                    r: rewards[k % 3],
                }
            })
            .collect()
    }

    fn check_gradients(config: &NetConfig, kind: LossKind, sample_per_tensor: Option<usize>) {
        let schedule = Schedule::new(50, 0.1, 0.6).unwrap();
        let params = randomized(config, 7);
        let items = batch(8, &schedule, 11);
        let (_, grads) = params.backward(&schedule, &items, kind).unwrap();
        let names = params.tensor_names();
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = 0.0f64;
        for (ti, name) in names.iter().enumerate() {
            let len = params.tensors()[ti].len();
            let entries: Vec<usize> = match sample_per_tensor {
                Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
                _ => (0..len).collect(),
            };
            for k in entries {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data[k] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data[k] -= h;
                let fd = (plus.loss(&schedule, &items, kind).unwrap()
                    - minus.loss(&schedule, &items, kind).unwrap())
                    / (2.0 * h);
                let an = grads.tensors()[ti].data[k];
                let rel = (an - fd).abs() / (fd.abs() + 1e-8);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{k}]: analytic {an}, finite difference {fd}");
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_naive() {
        check_gradients(&small_config(), LossKind::Naive, None);
    }

    #[test]
    fn gradients_match_finite_differences_exact() {
        check_gradients(&small_config(), LossKind::Exact, None);
    }

    #[test]
    fn gradients_match_finite_differences_endpoint() {
        check_gradients(&small_config(), LossKind::Endpoint, None);
    }

    #[test]
    fn gradients_single_level() {
        let config = NetConfig {
            widths: vec![2],
            ..small_config()
        };
        check_gradients(&config, LossKind::Naive, None);
    }

    #[test]
    fn zero_output_at_init() {
        let schedule = Schedule::new(100, 0.1, 0.3).unwrap();
        let p = ScoreNetParams::init(&NetConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = random_image(16, 8, &mut rng);
        let zt = random_image(16, 8, &mut rng);
        for r in [Reward::Good, Reward::Bad, Reward::Null] {
            let c = Conditioning { z0: &z0, t_index: 40, r };
            let s = p.forward(&schedule, &zt, &c).unwrap();
            assert!(s.data().iter().all(|&v| v == 0.0));
        }
        assert!(p.reward_gates(Reward::Null).iter().flatten().all(|&g| g == 1.0));
        assert!(p.reward_gates(Reward::Good).iter().flatten().any(|&g| g != 1.0));
    }

    #[test]
    fn init_is_seeded_and_validated() {
        let c = NetConfig::default();
        assert_eq!(ScoreNetParams::init(&c, 9).unwrap(), ScoreNetParams::init(&c, 9).unwrap());
        assert_ne!(ScoreNetParams::init(&c, 9).unwrap(), ScoreNetParams::init(&c, 10).unwrap());
        let empty = NetConfig {
            widths: vec![],
            ..NetConfig::default()
        };
        assert!(ScoreNetParams::init(&empty, 0).is_err());
    }

    #[test]
    fn rejects_bad_shapes_and_boundary() {
        let schedule = Schedule::new(100, 0.1, 0.3).unwrap();
        let p = ScoreNetParams::init(&NetConfig::default(), 3).unwrap();
        let z0 = Image::zeros(8, 8);
        let c = Conditioning { z0: &z0, t_index: 5, r: Reward::Good };
        assert!(p.forward(&schedule, &Image::zeros(6, 8), &c).is_err());
        assert!(p.forward(&schedule, &Image::zeros(8, 4), &Conditioning { z0: &Image::zeros(8, 4), ..c }).is_ok());
        assert!(p.forward(&schedule, &Image::zeros(6, 6), &Conditioning { z0: &Image::zeros(6, 6), ..c }).is_err());
        assert!(matches!(
            p.forward(&schedule, &z0, &Conditioning { t_index: 0, ..c }),
            Err(Error::BoundaryTime(0))
        ));
        let item = TrainItem {
            z_t: z0.clone(),
            z0: z0.clone(),
            z1: z0.clone(),
            t_index: 0,
            r: Reward::Good,
        };
        assert!(p.backward(&schedule, std::slice::from_ref(&item), LossKind::Naive).is_err());
        assert!(p.backward(&schedule, &[TrainItem { t_index: 100, ..item }], LossKind::Exact).is_err());
        assert!(p.backward(&schedule, &[], LossKind::Naive).is_err());
    }

    /// Output layer wired to `u = z_t - z0`, the exact residual whenever `z1 = z0`.
    pub(crate) fn passthrough_oracle(config: &NetConfig) -> ScoreNetParams {
        let mut p = ScoreNetParams::init(config, 1).unwrap();
        let cin = config.widths[0] + 2;
        let center = |c: usize| c * 9 + 4;
        p.out.weight.data[center(cin - 2)] = 1.0 / RAW_SKIP_GAIN;
        p.out.weight.data[center(cin - 1)] = -1.0 / RAW_SKIP_GAIN;
        p
    }

    #[test]
    fn exact_oracle_has_zero_loss_and_gradient() {
        let schedule = Schedule::new(60, 0.1, 0.5).unwrap();
        let p = passthrough_oracle(&small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<TrainItem> = (0..3)
            .map(|k| {
                let z0 = random_image(8, 8, &mut rng);
                let z_t = random_image(8, 8, &mut rng);
                TrainItem {
                    z_t,
                    z1: z0.clone(),
                    z0,
                    t_index: 10 + k,
                    r: Reward::Bad,
                }
            })
            .collect();
        let (loss, grads) = p.backward(&schedule, &items, LossKind::Naive).unwrap();
        assert!(loss < 1e-28, "{loss}");
        assert!(grads.tensors().iter().all(|t| t.data.iter().all(|g| g.abs() < 1e-14)));
    }

    #[test]
    fn doubling_targets_quadruples_zero_network_loss() {
        let schedule = Schedule::new(60, 0.1, 0.5).unwrap();
        let p = ScoreNetParams::init(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z0 = random_image(8, 8, &mut rng);
        let z_t = random_image(8, 8, &mut rng);
        let z1 = random_image(8, 8, &mut rng);
        let item = TrainItem { z_t: z_t.clone(), z0: z0.clone(), z1: z1.clone(), t_index: 20, r: Reward::Good };
        let doubled = TrainItem { z_t: z_t.scale(2.0), z0, z1: z1.scale(2.0), t_index: 20, r: Reward::Good };
        let a = p.loss(&schedule, &[item], LossKind::Naive).unwrap();
        let b = p.loss(&schedule, &[doubled], LossKind::Naive).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12 * b);
    }

    #[test]
    fn drop_z0_masks_only_the_source_channel() {
        let schedule = Schedule::new(60, 0.1, 0.5).unwrap();
        let mut config = small_config();
        let p = randomized(&config, 4);
        config.drop_z0 = true;
        let mut ablated = p.clone();
        ablated.config = config;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zt = random_image(8, 8, &mut rng);
        let zero = Image::zeros(8, 8);
        let z0 = random_image(8, 8, &mut rng);
        let c = |z0| Conditioning { z0, t_index: 30, r: Reward::Good };
        assert_eq!(
            p.forward(&schedule, &zt, &c(&zero)).unwrap(),
            ablated.forward(&schedule, &zt, &c(&zero)).unwrap()
        );
        assert_eq!(
            ablated.forward(&schedule, &zt, &c(&z0)).unwrap(),
            ablated.forward(&schedule, &zt, &c(&zero)).unwrap()
        );
        assert_ne!(
            p.forward(&schedule, &zt, &c(&z0)).unwrap(),
            p.forward(&schedule, &zt, &c(&zero)).unwrap()
        );
    }

    #[test]
    fn time_features() {
        let schedule = Schedule::new(1000, 0.1, 0.3).unwrap();
        let p = ScoreNetParams::init(&NetConfig::default(), 0).unwrap();
        let a = p.time_features(&schedule, 0);
        let b = p.time_features(&schedule, 1000);
        assert_eq!(a.len(), 32);
        assert!(a.iter().chain(&b).all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!((a[0], a[1]), (0.0, 1.0));
        assert!((b[0] - 1f64.sin()).abs() < 1e-15 && (b[1] - 1f64.cos()).abs() < 1e-15);
        assert_eq!(p.embed_time(&schedule, 321), p.embed_time(&schedule, 321));
        assert_ne!(p.embed_time(&schedule, 321), p.embed_time(&schedule, 322));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = randomized(&small_config(), 12);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"SBSN1");
        let q = ScoreNetParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert!(ScoreNetParams::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ScoreNetParams::read_checkpoint(bad.as_slice()).is_err());
    }
}
