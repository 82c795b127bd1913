//! Training objectives (source-only, DANN, PADA, PATAN and its ablations),
//! the GRL coefficient schedule and the SGD loop.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamSet, Var};
use crate::data::{label_audit, SplitDataset, Unlabeled, VideoSample};
use crate::error::{Error, Result};
use crate::filtration::{self, ClassWeights, GammaTerms};
use crate::model::{predict_label, BatchForward, PatanModel, Pooling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    Dann,
    Pada,
    Patan,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SourceOnly, Method::Dann, Method::Pada, Method::Patan];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::Dann => "dann",
            Method::Pada => "pada",
            Method::Patan => "patan",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Every attention weight fixed to 1.
    NoAttentive,
    /// Class weights from the spatial and temporal heads only.
    NoLocalWeights,
    /// Class weights dropped from the two classification terms.
    NoClassifier,
    /// Class weights dropped from the two source domain terms.
    NoAdversarial,
}

impl Ablation {
    pub const VARIANTS: [Ablation; 4] = [
        Ablation::NoAttentive,
        Ablation::NoLocalWeights,
        Ablation::NoClassifier,
        Ablation::NoAdversarial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoAttentive => "no_attentive",
            Ablation::NoLocalWeights => "no_local_weights",
            Ablation::NoClassifier => "no_classifier",
            Ablation::NoAdversarial => "no_adversarial",
        }
    }

    /// Row label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::None => "PATAN",
            Ablation::NoAttentive => "PATAN w/o attentive",
            Ablation::NoLocalWeights => "PATAN w/o local weights",
            Ablation::NoClassifier => "PATAN w/o classifier",
            Ablation::NoAdversarial => "PATAN w/o adversarial",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Ablation::None)
            .chain(Ablation::VARIANTS)
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub ablation: Ablation,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_sp: f64,
    pub lambda_t: f64,
    pub lambda_aux: f64,
    /// Epochs at whose start the learning rate is divided by 10. Defaults to
    /// 60% and 80% of the run.
    pub lr_drop_epochs: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Patan,
            ablation: Ablation::None,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 30,
            lambda_sp: 1.0,
            lambda_t: 1.0,
            lambda_aux: 1.0,
            lr_drop_epochs: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it freezes the model.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("lambda_sp", self.lambda_sp),
            ("lambda_t", self.lambda_t),
            ("lambda_aux", self.lambda_aux),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.ablation != Ablation::None && self.method != Method::Patan {
            return Err(Error::Config(format!(
                "ablation {} only applies to method patan",
                self.ablation.as_str()
            )));
        }
        Ok(())
    }

    pub fn drop_epochs(&self) -> [usize; 2] {
        self.lr_drop_epochs
            .unwrap_or([self.epochs * 3 / 5, self.epochs * 4 / 5])
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.drop_epochs().iter().filter(|&&e| epoch >= e).count();
        self.lr / 10f64.powi(drops as i32)
    }

    /// How the model pools scales under this method.
    pub fn pooling(&self) -> Pooling {
        match (self.method, self.ablation) {
            (Method::Patan, Ablation::NoAttentive) => Pooling::Uniform,
            (Method::Patan, _) => Pooling::Attentive,
            _ => Pooling::Uniform,
        }
    }

    pub fn name(&self) -> String {
        match (self.method, self.ablation) {
            (Method::Patan, a) => a.label().to_string(),
            (Method::SourceOnly, _) => "Source-only".into(),
            (Method::Dann, _) => "DANN".into(),
            (Method::Pada, _) => "PADA".into(),
        }
    }
}

/// DANN schedule `2 / (1 + exp(-10 p)) - 1`.
pub fn grl_schedule(progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// Loss trade-offs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub sp: f64,
    pub t: f64,
    pub aux: f64,
}

impl From<&TrainConfig> for Lambdas {
    fn from(c: &TrainConfig) -> Self {
        Self {
            sp: c.lambda_sp,
            t: c.lambda_t,
            aux: c.lambda_aux,
        }
    }
}

/// A forward pass over `source ++ target` rows with source labels.
#[derive(Debug, Clone)]
pub struct JointForward {
    pub out: BatchForward,
    pub labels: Vec<usize>,
    pub n_source: usize,
    pub n_target: usize,
}

impl JointForward {
    pub fn new(
        g: &mut Graph,
        model: &PatanModel,
        source: &[&VideoSample],
        target: &[Unlabeled<'_>],
        pooling: Pooling,
        grl_coeff: f64,
    ) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Usage("source and target batches must be non-empty".into()));
        }
        let labels = source
            .iter()
            .map(|s| {
                s.source_label()
                    .ok_or_else(|| Error::Input(format!("`{}` is not a source sample", s.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let frames: Vec<&Matrix> = source
            .iter()
            .map(|s| &s.frames)
            .chain(target.iter().map(|t| t.frames))
            .collect();
        let out = model.forward_batch(g, &frames, pooling, grl_coeff)?;
        Ok(Self {
            out,
            labels,
            n_source: source.len(),
            n_target: target.len(),
        })
    }
}

/// Scalar loss node plus the per-term values that make it up.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ty: f64,
    pub spy: f64,
    pub spd: f64,
    pub td: f64,
    pub aux: f64,
}

/// `(1/n) sum_i w_i CE(logits_i, labels_i)` over the source rows.
fn weighted_ce(g: &mut Graph, logits: Var, rows: (usize, usize), labels: &[usize], weights: &[f64]) -> Result<Var> {
    let part = g.slice_rows(logits, rows.0, rows.1)?;
    let ce = g.cross_entropy_rows(part, labels)?;
    let w = g.constant(Matrix::from_shape_vec((weights.len(), 1), weights.to_vec()).expect("one weight per row"));
    let weighted = g.scale_rows(ce, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / labels.len() as f64))
}

fn class_weights_for(gamma: &ClassWeights, labels: &[usize]) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|&y| {
            gamma.gamma.get(y).copied().ok_or_else(|| {
                Error::Input(format!("label {y} outside [0, {})", gamma.gamma.len()))
            })
        })
        .collect()
}

struct Terms {
    ty: Var,
    spy: Var,
    spd_source: Var,
    td_source: Var,
    spd_target: Var,
    td_target: Var,
}

fn terms(g: &mut Graph, jf: &JointForward, cls_w: &[f64], adv_w: &[f64]) -> Result<Terms> {
    let src = (0, jf.n_source);
    let tgt = (jf.n_source, jf.n_target);
    let o = &jf.out;
    let dom_src = vec![0; jf.n_source];
    let dom_tgt = vec![1; jf.n_target];
    let ones_t = vec![1.0; jf.n_target];
    Ok(Terms {
        ty: weighted_ce(g, o.temporal_logits, src, &jf.labels, cls_w)?,
        spy: weighted_ce(g, o.spatial_logits, src, &jf.labels, cls_w)?,
        spd_source: weighted_ce(g, o.spatial_domain_logits, src, &dom_src, adv_w)?,
        td_source: weighted_ce(g, o.temporal_domain_logits, src, &dom_src, adv_w)?,
        spd_target: weighted_ce(g, o.spatial_domain_logits, tgt, &dom_tgt, &ones_t)?,
        td_target: weighted_ce(g, o.temporal_domain_logits, tgt, &dom_tgt, &ones_t)?,
    })
}

/// `a + c1 * b1 + c2 * b2 + ...`
fn combine(g: &mut Graph, base: &[Var], scaled: &[(f64, Var)]) -> Result<Var> {
    let mut acc = base[0];
    for &v in &base[1..] {
        acc = g.add(acc, v)?;
    }
    for &(c, v) in scaled {
        let s = g.scale(v, c);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

fn finish(g: &Graph, total: Var, t: &Terms, aux: f64) -> LossTerms {
    LossTerms {
        total,
        ty: g.scalar(t.ty),
        spy: g.scalar(t.spy),
        spd: g.scalar(t.spd_source) + g.scalar(t.spd_target),
        td: g.scalar(t.td_source) + g.scalar(t.td_target),
        aux,
    }
}

/// Mean source cross-entropy of the spatial and temporal heads.
pub fn loss_source_only(g: &mut Graph, jf: &JointForward) -> Result<LossTerms> {
    let ones = vec![1.0; jf.n_source];
    let t = terms(g, jf, &ones, &ones)?;
    let total = combine(g, &[t.ty, t.spy], &[])?;
    Ok(finish(g, total, &t, 0.0))
}

/// Classification on both heads plus spatial (`lambda_sp`) and temporal
/// (`lambda_t`) domain cross-entropy on source and target, through the GRL
/// already placed in the forward pass. Each domain is averaged separately.
pub fn loss_dann(g: &mut Graph, jf: &JointForward, l: Lambdas) -> Result<LossTerms> {
    loss_pada(g, jf, &ClassWeights::ones(jf.out_classes(g)), l)
}

/// As [`loss_dann`] with source classification and source domain terms
/// weighted per sample by `gamma[y]`.
pub fn loss_pada(g: &mut Graph, jf: &JointForward, gamma: &ClassWeights, l: Lambdas) -> Result<LossTerms> {
    let w = class_weights_for(gamma, &jf.labels)?;
    let t = terms(g, jf, &w, &w)?;
    let total = combine(
        g,
        &[t.ty, t.spy],
        &[
            (l.sp, t.spd_source),
            (l.sp, t.spd_target),
            (l.t, t.td_source),
            (l.t, t.td_target),
        ],
    )?;
    Ok(finish(g, total, &t, 0.0))
}

/// The six weighted terms (source-side domain terms scaled by `lambda_sp`,
/// target-side by `lambda_t`) plus `lambda_aux` times the mean weighted
/// cross-entropy of the per-scale auxiliary classifiers.
pub fn loss_patan(
    g: &mut Graph,
    jf: &JointForward,
    gamma: &ClassWeights,
    l: Lambdas,
    ablation: Ablation,
) -> Result<LossTerms> {
    let w = class_weights_for(gamma, &jf.labels)?;
    let ones = vec![1.0; w.len()];
    let cls_w = if ablation == Ablation::NoClassifier { &ones } else { &w };
    let adv_w = if ablation == Ablation::NoAdversarial { &ones } else { &w };
    let t = terms(g, jf, cls_w, adv_w)?;

    let src = (0, jf.n_source);
    let mut aux_terms = Vec::with_capacity(jf.out.scale_logits.len());
    for &logits in &jf.out.scale_logits {
        aux_terms.push(weighted_ce(g, logits, src, &jf.labels, &w)?);
    }
    let aux_sum = combine(g, &aux_terms, &[])?;
    let aux = g.scale(aux_sum, 1.0 / aux_terms.len() as f64);

    let total = combine(
        g,
        &[t.ty, t.spy],
        &[
            (l.sp, t.spd_source),
            (l.sp, t.td_source),
            (l.t, t.spd_target),
            (l.t, t.td_target),
            (l.aux, aux),
        ],
    )?;
    let aux_value = g.scalar(aux);
    Ok(finish(g, total, &t, aux_value))
}

impl JointForward {
    fn out_classes(&self, g: &Graph) -> usize {
        g.shape(self.out.temporal_logits).1
    }
}

/// Loss of `config.method` on a joint forward.
pub fn method_loss(g: &mut Graph, jf: &JointForward, gamma: &ClassWeights, config: &TrainConfig) -> Result<LossTerms> {
    let l = Lambdas::from(config);
    match config.method {
        Method::SourceOnly => loss_source_only(g, jf),
        Method::Dann => loss_dann(g, jf, l),
        Method::Pada => loss_pada(g, jf, gamma, l),
        Method::Patan => loss_patan(g, jf, gamma, l, config.ablation),
    }
}

/// SGD with heavy-ball momentum and decoupled weight decay:
/// `v <- mu v + g`, `p <- p - lr v - lr wd p`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.ids().map(|id| Matrix::zeros(params.value(id).dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        for (id, v) in ids.into_iter().zip(&mut self.velocity) {
            let (p, g) = params.value_and_grad_mut(id);
            v.zip_mut_with(g, |v, &g| *v = self.momentum * *v + g);
            let decay = lr * self.weight_decay;
            p.zip_mut_with(v, |p, &v| *p = *p - lr * v - decay * *p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub grl_coeff: f64,
    pub loss_total: f64,
    pub loss_ty: f64,
    pub loss_spy: f64,
    pub loss_spd: f64,
    pub loss_td: f64,
    pub loss_aux: f64,
    /// Running accuracy on the training source batches.
    pub source_accuracy: f64,
    /// Filled in by the evaluation hook, when one is given.
    pub target_accuracy: Option<f64>,
    pub gamma: Vec<f64>,
}

/// What training may see: labeled source videos and label-free target videos.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub source: &'a [VideoSample],
    pub target: Vec<Unlabeled<'a>>,
    pub num_classes: usize,
}

impl<'a> TrainData<'a> {
    pub fn from_split(data: &'a SplitDataset) -> Self {
        Self {
            source: &data.source,
            target: data.target_unlabeled(),
            num_classes: data.num_classes(),
        }
    }
}

/// Evaluation hook run after every epoch, outside the training scope.
pub type EpochHook<'h> = &'h mut dyn FnMut(&PatanModel) -> Result<f64>;

const EVAL_CHUNK: usize = 64;

/// Class weights for the coming epoch from a full pass over target videos.
pub fn compute_gamma(model: &PatanModel, target: &[Unlabeled<'_>], config: &TrainConfig) -> Result<ClassWeights> {
    let pooling = config.pooling();
    let mut outputs = Vec::with_capacity(target.len());
    for chunk in target.chunks(EVAL_CHUNK) {
        let frames: Vec<&Matrix> = chunk.iter().map(|t| t.frames).collect();
        outputs.extend(model.forward_values(&frames, pooling)?);
    }
    match config.method {
        Method::Pada => {
            let preds: Vec<Vec<f64>> = outputs.into_iter().map(|o| o.y_t).collect();
            filtration::gamma_pada(&preds)
        }
        Method::Patan => {
            let terms = GammaTerms {
                local: config.ablation != Ablation::NoLocalWeights,
                attentive: config.ablation != Ablation::NoAttentive,
            };
            filtration::gamma_patan_with(&outputs, terms)
        }
        Method::SourceOnly | Method::Dann => Ok(ClassWeights::ones(model.config.num_classes)),
    }
}

/// Trains `model` in place and returns one metrics record per epoch.
pub fn train(
    config: &TrainConfig,
    data: &TrainData<'_>,
    model: &mut PatanModel,
    mut hook: Option<EpochHook<'_>>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(Error::Usage("training needs at least one source and one target video".into()));
    }
    if data.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            data.num_classes, model.config.num_classes
        )));
    }
    let _scope = label_audit::TrainingScope::enter();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(&model.params, config.momentum, config.weight_decay);
    let bs = config.batch_size;
    let steps_per_epoch = data.source.len().max(data.target.len()).div_ceil(bs);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let pooling = config.pooling();
    let mut src_order: Vec<usize> = (0..data.source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..data.target.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let gamma = match config.method {
            Method::Pada | Method::Patan => filtration::update_schedule(epoch, data.num_classes, || {
                compute_gamma(model, &data.target, config)
            })?,
            _ => ClassWeights::ones(data.num_classes),
        };
        let lr = config.lr_at(epoch);
        src_order.shuffle(&mut rng);
        tgt_order.shuffle(&mut rng);

        let mut sums = [0.0f64; 6];
        let (mut correct, mut seen) = (0usize, 0usize);
        let mut coeff = 0.0;
        for step in 0..steps_per_epoch {
            let global = epoch * steps_per_epoch + step;
            coeff = grl_schedule(global as f64 / total_steps as f64);
            let src: Vec<&VideoSample> = (0..bs)
                .map(|j| &data.source[src_order[(step * bs + j) % src_order.len()]])
                .collect();
            let tgt: Vec<Unlabeled<'_>> = (0..bs)
                .map(|j| data.target[tgt_order[(step * bs + j) % tgt_order.len()]])
                .collect();

            let mut g = Graph::new();
            let jf = JointForward::new(&mut g, model, &src, &tgt, pooling, coeff)?;
            let lt = method_loss(&mut g, &jf, &gamma, config)?;
            let total = g.scalar(lt.total);
            if !total.is_finite() {
                return Err(Error::Runtime(format!(
                    "non-finite loss {total} at epoch {epoch}, step {step}"
                )));
            }
            for (s, v) in sums.iter_mut().zip([total, lt.ty, lt.spy, lt.spd, lt.td, lt.aux]) {
                *s += v;
            }
            let (c, n) = batch_accuracy(&g, &jf);
            correct += c;
            seen += n;

            model.params.zero_grad();
            g.backward(lt.total)?;
            g.accumulate_param_grads(&mut model.params);
            sgd.step(&mut model.params, lr);
        }

        let target_accuracy = match hook.as_mut() {
            Some(h) => Some(label_audit::outside_training(|| h(model))?),
            None => None,
        };
        let n = steps_per_epoch as f64;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            grl_coeff: coeff,
            loss_total: sums[0] / n,
            loss_ty: sums[1] / n,
            loss_spy: sums[2] / n,
            loss_spd: sums[3] / n,
            loss_td: sums[4] / n,
            loss_aux: sums[5] / n,
            source_accuracy: correct as f64 / seen.max(1) as f64,
            target_accuracy,
            gamma: gamma.gamma,
        });
    }
    Ok(metrics)
}

fn batch_accuracy(g: &Graph, jf: &JointForward) -> (usize, usize) {
    let sp = crate::autodiff::softmax_rows(g.value(jf.out.spatial_logits));
    let t = crate::autodiff::softmax_rows(g.value(jf.out.temporal_logits));
    let mut correct = 0;
    for (i, &y) in jf.labels.iter().enumerate() {
        let out = crate::model::ForwardOutput {
            spatial_feature: vec![],
            y_sp: sp.row(i).to_vec(),
            scales: vec![],
            feature: vec![],
            y_t: t.row(i).to_vec(),
        };
        if predict_label(&out) == y {
            correct += 1;
        }
    }
    (correct, jf.labels.len())
}

/// One JSON object per line.
pub fn write_metrics_jsonl(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut buf, m).expect("metrics serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
