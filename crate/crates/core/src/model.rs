//! Network heads: spatial feature/classifier/discriminator, per-scale
//! relation modules with auxiliary classifiers, label attention, and the
//! temporal classifier/discriminator.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Matrix, ParamId, ParamSet, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub k: usize,
    pub num_classes: usize,
    pub d_sp: usize,
    pub d_t: usize,
    pub h_rel: usize,
    pub max_subsets_per_scale: usize,
    pub stop_grad_attention: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Default widths for a given input geometry.
    pub fn new(d_in: usize, k: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            d_in,
            k,
            num_classes,
            d_sp: 16,
            d_t: 32,
            h_rel: 64,
            max_subsets_per_scale: 32,
            stop_grad_attention: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if [self.d_in, self.d_sp, self.d_t, self.h_rel, self.max_subsets_per_scale].contains(&0)
        {
            return Err(Error::Config("layer widths and subset cap must be positive".into()));
        }
        Ok(())
    }

    pub fn scales(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-a..=a));
        Ok(Self {
            w: ps.add(format!("{name}.w"), w)?,
            b: ps.add(format!("{name}.b"), Matrix::zeros((1, fan_out)))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        (d_in, hidden, d_out): (usize, usize, usize),
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(ps, rng, &format!("{name}.0"), d_in, hidden)?,
            out: Linear::new(ps, rng, &format!("{name}.1"), hidden, d_out)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let h = self.hidden.apply(g, ps, x)?;
        let h = g.relu(h);
        self.out.apply(g, ps, h)
    }
}

/// Frame-index tuples (0-based, strictly increasing) fused at scale `r`.
///
/// All `C(k, r)` combinations in lexicographic order when that count is at
/// most `cap`; otherwise `cap` distinct combinations sampled with `seed`,
/// still returned in lexicographic order.
pub fn clip_subsets(k: usize, r: usize, cap: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if r < 2 || r > k {
        return Err(Error::Config(format!("scale r = {r} outside [2, {k}]")));
    }
    if cap == 0 {
        return Err(Error::Config("subset cap must be positive".into()));
    }
    if binomial(k, r).is_some_and(|n| n <= cap as u128) {
        return Ok(combinations(k, r));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32 | r as u64));
    let mut picked = BTreeSet::new();
    while picked.len() < cap {
        let mut tuple = index::sample(&mut rng, k, r).into_vec();
        tuple.sort_unstable();
        picked.insert(tuple);
    }
    Ok(picked.into_iter().collect())
}

fn binomial(n: usize, r: usize) -> Option<u128> {
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

fn combinations(k: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..r).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..r).rev().find(|&i| cur[i] < k - r + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..r {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// `sum_c p_c ln(max(p_c, 1e-8))`: the negative entropy, always <= 0.
pub fn certainty(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| p * p.max(PROB_FLOOR).ln()).sum()
}

/// Label-attention weight `max(0, tanh(1 + certainty))`, in `[0, tanh 1]`.
pub fn attention_weight(probs: &[f64]) -> f64 {
    (1.0 + certainty(probs)).tanh().max(0.0)
}

/// `sum_r w_r f_r` on plain vectors.
pub fn overall_temporal_feature(features: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if features.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} scale features but {} weights",
            features.len(),
            weights.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (f, w) in features.iter().zip(weights) {
        if f.len() != dim {
            return Err(Error::Config(format!(
                "scale feature of length {} where {dim} expected",
                f.len()
            )));
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// How scale features are combined into the overall temporal feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Weight each scale by its label-attention weight.
    Attentive,
    /// Plain sum over scales (every weight fixed to 1).
    Uniform,
}

/// Graph handles for one forward pass over a batch of videos.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub batch: usize,
    pub spatial: Var,
    pub spatial_logits: Var,
    pub scale_features: Vec<Var>,
    pub scale_logits: Vec<Var>,
    /// `batch x (k - 1)` attention weights, one column per scale.
    pub weights: Matrix,
    pub temporal: Var,
    pub temporal_logits: Var,
    pub spatial_domain_logits: Var,
    pub temporal_domain_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOutput {
    pub r: usize,
    pub feature: Vec<f64>,
    pub probs: Vec<f64>,
    pub weight: f64,
}

/// Plain-value outputs for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub spatial_feature: Vec<f64>,
    pub y_sp: Vec<f64>,
    pub scales: Vec<ScaleOutput>,
    pub feature: Vec<f64>,
    pub y_t: Vec<f64>,
}

impl ForwardOutput {
    pub fn k(&self) -> usize {
        self.scales.len() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.y_t.len()
    }
}

/// Serializable model: architecture config plus named row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub params: Vec<SavedParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatanModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub spf: Mlp,
    pub spy: Linear,
    pub spd: Mlp,
    /// Relation module `g^r` at index `r - 2`.
    pub rel: Vec<Mlp>,
    pub aux: Vec<Linear>,
    pub ty: Linear,
    pub td: Mlp,
    clips: Vec<Vec<Vec<usize>>>,
}

impl PatanModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut ps = ParamSet::new();
        let spf = Mlp::new(&mut ps, &mut rng, "spf", (c.d_in, c.d_sp, c.d_sp))?;
        let spy = Linear::new(&mut ps, &mut rng, "spy", c.d_sp, c.num_classes)?;
        let spd = Mlp::new(&mut ps, &mut rng, "spd", (c.d_sp, c.d_sp, 2))?;
        let mut rel = Vec::new();
        let mut aux = Vec::new();
        let mut clips = Vec::new();
        for r in c.scales() {
            rel.push(Mlp::new(&mut ps, &mut rng, &format!("rel{r}"), (r * c.d_in, c.h_rel, c.d_t))?);
            aux.push(Linear::new(&mut ps, &mut rng, &format!("aux{r}"), c.d_t, c.num_classes)?);
            clips.push(clip_subsets(c.k, r, c.max_subsets_per_scale, c.seed)?);
        }
        let ty = Linear::new(&mut ps, &mut rng, "ty", c.d_t, c.num_classes)?;
        let td = Mlp::new(&mut ps, &mut rng, "td", (c.d_t, c.d_t, 2))?;
        Ok(Self {
            config,
            params: ps,
            spf,
            spy,
            spd,
            rel,
            aux,
            ty,
            td,
            clips,
        })
    }

    pub fn clips(&self, r: usize) -> &[Vec<usize>] {
        &self.clips[r - 2]
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.config.clone(),
            params: self
                .params
                .ids()
                .map(|id| {
                    let v = self.params.value(id);
                    SavedParam {
                        name: self.params.name(id).to_string(),
                        shape: [v.nrows(), v.ncols()],
                        values: v.iter().copied().collect(),
                    }
                })
                .collect(),
        }
    }

    /// Rebuilds the architecture from the saved config, then overwrites every
    /// parameter by name.
    pub fn from_snapshot(snap: &ModelSnapshot) -> Result<Self> {
        let mut m = Self::new(snap.config.clone())?;
        if snap.params.len() != m.params.len() {
            return Err(Error::Input(format!(
                "snapshot has {} parameters, architecture has {}",
                snap.params.len(),
                m.params.len()
            )));
        }
        for p in &snap.params {
            let id = m
                .params
                .id(&p.name)
                .ok_or_else(|| Error::Input(format!("unknown parameter `{}` in snapshot", p.name)))?;
            let v = Matrix::from_shape_vec((p.shape[0], p.shape[1]), p.values.clone())
                .map_err(|e| Error::Input(format!("parameter `{}`: {e}", p.name)))?;
            if v.dim() != m.params.value(id).dim() {
                return Err(Error::Input(format!("parameter `{}` has the wrong shape", p.name)));
            }
            *m.params.value_mut(id) = v;
        }
        Ok(m)
    }

    fn check_frames(&self, frames: &[&Matrix]) -> Result<()> {
        if frames.is_empty() {
            return Err(Error::Usage("forward on an empty batch".into()));
        }
        for f in frames {
            if f.dim() != (self.config.k, self.config.d_in) {
                return Err(Error::Input(format!(
                    "video has {}x{} frame features, model expects {}x{}",
                    f.nrows(),
                    f.ncols(),
                    self.config.k,
                    self.config.d_in
                )));
            }
        }
        Ok(())
    }

    /// `f^r = sum_m g^r(concat of the frames in clip m)`, one row per video.
    pub fn local_temporal_feature(&self, g: &mut Graph, frames: &[&Matrix], r: usize) -> Result<Var> {
        if r < 2 || r > self.config.k {
            return Err(Error::Config(format!("scale r = {r} outside [2, {}]", self.config.k)));
        }
        let clips = self.clips(r);
        let d = self.config.d_in;
        let mut stacked = Matrix::zeros((frames.len() * clips.len(), r * d));
        for (b, f) in frames.iter().enumerate() {
            for (m, clip) in clips.iter().enumerate() {
                let mut row = stacked.row_mut(b * clips.len() + m);
                for (slot, &j) in clip.iter().enumerate() {
                    row.slice_mut(ndarray::s![slot * d..(slot + 1) * d]).assign(&f.row(j));
                }
            }
        }
        let x = g.constant(stacked);
        let h = self.rel[r - 2].apply(g, &self.params, x)?;
        let h = g.tanh(h);
        g.sum_groups(h, clips.len())
    }

    /// Runs every head on a batch. Discriminator inputs pass through a
    /// gradient reversal with coefficient `grl_coeff`.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        frames: &[&Matrix],
        pooling: Pooling,
        grl_coeff: f64,
    ) -> Result<BatchForward> {
        self.check_frames(frames)?;
        let ps = &self.params;
        let n = frames.len();
        let k = self.config.k;

        let mut pooled = Matrix::zeros((n, self.config.d_in));
        for (mut row, f) in pooled.rows_mut().into_iter().zip(frames) {
            row.assign(&f.mean_axis(Axis(0)).expect("k >= 2"));
        }
        let pooled = g.constant(pooled);
        let spatial = self.spf.apply(g, ps, pooled)?;
        let spatial = g.tanh(spatial);
        let spatial_logits = self.spy.apply(g, ps, spatial)?;

        let mut scale_features = Vec::with_capacity(k - 1);
        let mut scale_logits = Vec::with_capacity(k - 1);
        let mut weights = Matrix::ones((n, k - 1));
        let mut temporal: Option<Var> = None;
        for r in self.config.scales() {
            let f_r = self.local_temporal_feature(g, frames, r)?;
            let logits = self.aux[r - 2].apply(g, ps, f_r)?;
            let w = match pooling {
                Pooling::Uniform => g.constant(Matrix::ones((n, 1))),
                Pooling::Attentive => {
                    let w = self.attention_node(g, logits);
                    if self.config.stop_grad_attention {
                        g.detach(w)
                    } else {
                        w
                    }
                }
            };
            weights.column_mut(r - 2).assign(&g.value(w).column(0));
            let weighted = g.scale_rows(f_r, w)?;
            temporal = Some(match temporal {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
            scale_features.push(f_r);
            scale_logits.push(logits);
        }
        let temporal = temporal.expect("k >= 2 gives at least one scale");
        let temporal_logits = self.ty.apply(g, ps, temporal)?;

        let rev_sp = g.grl(spatial, grl_coeff);
        let spatial_domain_logits = self.spd.apply(g, ps, rev_sp)?;
        let rev_t = g.grl(temporal, grl_coeff);
        let temporal_domain_logits = self.td.apply(g, ps, rev_t)?;

        Ok(BatchForward {
            batch: n,
            spatial,
            spatial_logits,
            scale_features,
            scale_logits,
            weights,
            temporal,
            temporal_logits,
            spatial_domain_logits,
            temporal_domain_logits,
        })
    }

    /// In-graph `max(0, tanh(1 + sum_c p_c ln max(p_c, 1e-8)))`, `n x 1`.
    fn attention_node(&self, g: &mut Graph, logits: Var) -> Var {
        let p = g.softmax(logits);
        let logp = g.log_clamped(p, PROB_FLOOR);
        let plogp = g.mul(p, logp).expect("same shape");
        let c = g.row_sum(plogp);
        let shifted = g.add_scalar(c, 1.0);
        let t = g.tanh(shifted);
        g.relu(t)
    }

    /// Plain-value outputs for a batch of videos.
    pub fn forward_values(&self, frames: &[&Matrix], pooling: Pooling) -> Result<Vec<ForwardOutput>> {
        let mut g = Graph::new();
        let out = self.forward_batch(&mut g, frames, pooling, 0.0)?;
        let y_sp = softmax_rows(g.value(out.spatial_logits));
        let y_t = softmax_rows(g.value(out.temporal_logits));
        let scale_probs: Vec<Matrix> =
            out.scale_logits.iter().map(|v| softmax_rows(g.value(*v))).collect();
        let row = |m: &Matrix, i: usize| m.row(i).to_vec();
        Ok((0..frames.len())
            .map(|i| ForwardOutput {
                spatial_feature: row(g.value(out.spatial), i),
                y_sp: row(&y_sp, i),
                scales: self
                    .config
                    .scales()
                    .map(|r| ScaleOutput {
                        r,
                        feature: row(g.value(out.scale_features[r - 2]), i),
                        probs: row(&scale_probs[r - 2], i),
                        weight: out.weights[[i, r - 2]],
                    })
                    .collect(),
                feature: row(g.value(out.temporal), i),
                y_t: row(&y_t, i),
            })
            .collect())
    }

    /// Single-video forward with attentive pooling.
    pub fn forward(&self, frames: &Matrix, grl_coeff: f64) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        self.forward_batch(&mut g, &[frames], Pooling::Attentive, grl_coeff)?;
        let mut v = self.forward_values(&[frames], Pooling::Attentive)?;
        Ok(v.remove(0))
    }
}

/// Argmax of the mean of spatial and temporal predictions, lowest index on
/// ties.
pub fn predict_label(out: &ForwardOutput) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, (a, b)) in out.y_sp.iter().zip(&out.y_t).enumerate() {
        let score = (a + b) / 2.0;
        if score > best_score {
            best = c;
            best_score = score;
        }
    }
    best
}
