//! Evaluation metrics, exports and the experiment grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::{self, fmt_f64, GeneratorSpec, SplitDataset, VideoSample};
use crate::error::{Error, Result};
use crate::filtration::{gamma_csv, ClassWeights};
use crate::model::{predict_label, ModelConfig, PatanModel, Pooling};
use crate::train::{self, Ablation, EpochMetrics, Method, TrainConfig, TrainData};

const EVAL_CHUNK: usize = 64;

fn predictions(model: &PatanModel, samples: &[VideoSample], pooling: Pooling) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let frames: Vec<&Matrix> = chunk.iter().map(|s| &s.frames).collect();
        out.extend(model.forward_values(&frames, pooling)?.iter().map(predict_label));
    }
    Ok(out)
}

/// Fraction of samples whose fused prediction equals the label.
pub fn top1_accuracy(model: &PatanModel, samples: &[VideoSample], pooling: Pooling) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("accuracy of an empty sample list".into()));
    }
    let preds = predictions(model, samples, pooling)?;
    let correct = preds
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.eval_label())
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Accuracy per label; `None` for classes with no samples.
pub fn per_class_accuracy(
    model: &PatanModel,
    samples: &[VideoSample],
    pooling: Pooling,
) -> Result<Vec<Option<f64>>> {
    if samples.is_empty() {
        return Err(Error::Usage("accuracy of an empty sample list".into()));
    }
    let preds = predictions(model, samples, pooling)?;
    let c = model.config.num_classes;
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (p, s) in preds.iter().zip(samples) {
        let y = s.eval_label();
        if y >= c {
            return Err(Error::Input(format!("label {y} outside [0, {c})")));
        }
        totals[y] += 1;
        hits[y] += usize::from(*p == y);
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect())
}

/// Class-weight CSV followed by one `summary,<shared mean>,<outlier mean>,<ratio>`
/// row. Outlier mean and ratio are empty when there are no outlier classes.
pub fn gamma_histogram_csv(weights: &ClassWeights, class_names: &[String], num_target_classes: usize) -> String {
    let mut out = gamma_csv(weights, class_names, num_target_classes);
    let (shared, outlier) = weights.shared_outlier_means(num_target_classes);
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let _ = writeln!(
        out,
        "summary,{},{},{}",
        fmt_f64(shared),
        opt(outlier),
        opt(weights.outlier_ratio(num_target_classes))
    );
    out
}

pub fn export_gamma_histogram(
    weights: &ClassWeights,
    class_names: &[String],
    num_target_classes: usize,
    path: &Path,
) -> Result<()> {
    fs::write(path, gamma_histogram_csv(weights, class_names, num_target_classes))
        .map_err(|e| Error::io(path, e))
}

/// `id,domain,label,t0..` with the overall temporal feature of each sample.
pub fn features_csv(model: &PatanModel, samples: &[VideoSample], pooling: Pooling) -> Result<String> {
    let mut out = String::from("id,domain,label");
    for i in 0..model.config.d_t {
        let _ = write!(out, ",t{i}");
    }
    out.push('\n');
    for chunk in samples.chunks(EVAL_CHUNK) {
        let frames: Vec<&Matrix> = chunk.iter().map(|s| &s.frames).collect();
        for (s, o) in chunk.iter().zip(model.forward_values(&frames, pooling)?) {
            let _ = write!(out, "{},{},{}", s.id, s.domain.as_str(), s.eval_label());
            for v in &o.feature {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_features(model: &PatanModel, samples: &[VideoSample], pooling: Pooling, path: &Path) -> Result<()> {
    fs::write(path, features_csv(model, samples, pooling)?).map_err(|e| Error::io(path, e))
}

/// Where an experiment's videos come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A named preset; the run seed replaces the preset seed.
    Benchmark(String),
    /// An explicit generator spec; the run seed is added to its seed.
    Spec(GeneratorSpec),
    /// A feature CSV, identical for every run.
    Features(PathBuf),
}

/// Layer widths; input geometry comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelWidths {
    pub d_sp: usize,
    pub d_t: usize,
    pub h_rel: usize,
    pub max_subsets_per_scale: usize,
    pub stop_grad_attention: bool,
}

impl Default for ModelWidths {
    fn default() -> Self {
        let c = ModelConfig::new(1, 2, 2, 0);
        Self {
            d_sp: c.d_sp,
            d_t: c.d_t,
            h_rel: c.h_rel,
            max_subsets_per_scale: c.max_subsets_per_scale,
            stop_grad_attention: c.stop_grad_attention,
        }
    }
}

impl ModelWidths {
    pub fn config_for(&self, data: &SplitDataset, seed: u64) -> ModelConfig {
        ModelConfig {
            d_in: data.d_in(),
            k: data.k(),
            num_classes: data.num_classes(),
            d_sp: self.d_sp,
            d_t: self.d_t,
            h_rel: self.h_rel,
            max_subsets_per_scale: self.max_subsets_per_scale,
            stop_grad_attention: self.stop_grad_attention,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelWidths,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        self.train.validate()
    }

    /// Seed of run `i`; every random stream of the run derives from it.
    pub fn run_seed(&self, i: usize) -> u64 {
        self.train.seed.wrapping_add(i as u64)
    }

    pub fn dataset(&self, run: usize) -> Result<SplitDataset> {
        let seed = self.run_seed(run);
        match &self.data {
            DataSource::Benchmark(name) => {
                let mut spec = data::default_benchmark(name)?;
                spec.seed = seed;
                data::generate(&spec)
            }
            DataSource::Spec(spec) => {
                let mut spec = spec.clone();
                spec.seed = spec.seed.wrapping_add(seed);
                data::generate(&spec)
            }
            DataSource::Features(path) => data::load_features(path),
        }
    }
}

/// One trainable configuration in a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub method: Method,
    pub ablation: Ablation,
}

impl Variant {
    pub fn plain(method: Method) -> Self {
        Self {
            method,
            ablation: Ablation::None,
        }
    }

    pub fn ablated(ablation: Ablation) -> Self {
        Self {
            method: Method::Patan,
            ablation,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            method: self.method,
            ablation: self.ablation,
            ..base.clone()
        }
    }

    pub fn name(&self) -> String {
        self.apply(&TrainConfig::default()).name()
    }

    /// Directory-safe identifier.
    pub fn slug(&self) -> String {
        match self.ablation {
            Ablation::None => self.method.as_str().to_string(),
            a => format!("patan_{}", a.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub spec_fingerprint: String,
    pub final_target_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub gamma: ClassWeights,
    pub gamma_ratio: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| Self {
            median: median(values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub variant: Variant,
    pub config: TrainConfig,
    pub accuracy: Summary,
    pub gamma_ratio: Option<Summary>,
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.final_target_accuracy).collect()
    }

    pub fn final_gamma(&self) -> Option<&ClassWeights> {
        self.runs.last().map(|r| &r.gamma)
    }
}

/// Trains one variant on one dataset and evaluates it on the target split.
pub fn run_single(
    config: &TrainConfig,
    widths: &ModelWidths,
    data: &SplitDataset,
    seed: u64,
) -> Result<(PatanModel, RunResult)> {
    let train_cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let mut model = PatanModel::new(widths.config_for(data, seed))?;
    let pooling = train_cfg.pooling();
    let mut hook = |m: &PatanModel| top1_accuracy(m, &data.target, pooling);
    let metrics = train::train(&train_cfg, &TrainData::from_split(data), &mut model, Some(&mut hook))?;
    let gamma = match train_cfg.method {
        Method::Pada | Method::Patan => {
            let mut g = train::compute_gamma(&model, &data.target_unlabeled(), &train_cfg)?;
            g.epoch_computed = train_cfg.epochs;
            g
        }
        _ => ClassWeights::ones(data.num_classes()),
    };
    let run = RunResult {
        seed,
        spec_fingerprint: data.spec_fingerprint.clone(),
        final_target_accuracy: top1_accuracy(&model, &data.target, pooling)?,
        per_class_accuracy: per_class_accuracy(&model, &data.target, pooling)?,
        gamma_ratio: gamma.outlier_ratio(data.num_target_classes),
        gamma,
        metrics,
    };
    Ok((model, run))
}

fn summarize(variant: Variant, base: &TrainConfig, runs: Vec<RunResult>) -> ExperimentResult {
    let ratios: Vec<f64> = runs.iter().filter_map(|r| r.gamma_ratio).collect();
    let accs: Vec<f64> = runs.iter().map(|r| r.final_target_accuracy).collect();
    ExperimentResult {
        name: variant.name(),
        variant,
        config: variant.apply(base),
        accuracy: Summary::of(&accs).expect("runs >= 1"),
        gamma_ratio: Summary::of(&ratios),
        runs,
    }
}

/// Trains every variant on the same per-run datasets.
pub fn run_variants(config: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    if variants.is_empty() {
        return Err(Error::Usage("no methods requested".into()));
    }
    let mut per_variant: Vec<Vec<RunResult>> = vec![Vec::new(); variants.len()];
    for run in 0..config.runs {
        let data = config.dataset(run)?;
        let seed = config.run_seed(run);
        for (v, slot) in variants.iter().zip(&mut per_variant) {
            let (_, r) = run_single(&v.apply(&config.train), &config.model, &data, seed)?;
            if r.spec_fingerprint != data.spec_fingerprint {
                return Err(Error::Runtime("dataset changed between methods".into()));
            }
            slot.push(r);
        }
    }
    Ok(variants
        .iter()
        .zip(per_variant)
        .map(|(v, runs)| summarize(*v, &config.train, runs))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub method: Method,
    pub ablation: Ablation,
    pub median_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub median_gamma_ratio: Option<f64>,
    pub accuracies: Vec<f64>,
    pub gamma_ratios: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub spec_fingerprints: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub fn comparison_table(config: &ExperimentConfig, results: &[ExperimentResult]) -> ComparisonTable {
    let first = &results[0];
    ComparisonTable {
        runs: config.runs,
        seeds: first.runs.iter().map(|r| r.seed).collect(),
        spec_fingerprints: first.runs.iter().map(|r| r.spec_fingerprint.clone()).collect(),
        rows: results
            .iter()
            .map(|r| ComparisonRow {
                name: r.name.clone(),
                method: r.variant.method,
                ablation: r.variant.ablation,
                median_accuracy: r.accuracy.median,
                min_accuracy: r.accuracy.min,
                max_accuracy: r.accuracy.max,
                median_gamma_ratio: r.gamma_ratio.as_ref().map(|s| s.median),
                accuracies: r.accuracies(),
                gamma_ratios: r.runs.iter().map(|x| x.gamma_ratio).collect(),
            })
            .collect(),
    }
}

/// Trains each variant on identical data and seeds, returning the table of
/// median accuracies and class-weight ratios. With `out`, writes
/// `compare.json` plus per-variant, per-run metrics and class weights.
pub fn run_comparison(
    config: &ExperimentConfig,
    variants: &[Variant],
    out: Option<&Path>,
) -> Result<ComparisonTable> {
    let results = run_variants(config, variants)?;
    let table = comparison_table(config, &results);
    if let Some(dir) = out {
        write_results(config, &results, dir)?;
        write_json(&table, &dir.join("compare.json"))?;
    }
    Ok(table)
}

/// Per-run `metrics.jsonl` and `gamma.csv` under `<dir>/<variant>/run_<i>/`.
pub fn write_results(config: &ExperimentConfig, results: &[ExperimentResult], dir: &Path) -> Result<()> {
    let data0 = config.dataset(0)?;
    for r in results {
        for (i, run) in r.runs.iter().enumerate() {
            let sub = dir.join(r.variant.slug()).join(format!("run_{i}"));
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            train::write_metrics_jsonl(&run.metrics, &sub.join("metrics.jsonl"))?;
            export_gamma_histogram(
                &run.gamma,
                &data0.class_names,
                data0.num_target_classes,
                &sub.join("gamma.csv"),
            )?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("result serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub num_target_classes: usize,
    pub patan_median_accuracy: f64,
    pub dann_median_accuracy: f64,
    pub patan_accuracies: Vec<f64>,
    pub dann_accuracies: Vec<f64>,
}

/// Accuracy of PATAN and DANN as the number of target classes varies.
/// Confusion pairs that stop being outlier-to-shared at a count are dropped.
pub fn run_target_count_sweep(
    config: &ExperimentConfig,
    base_spec: &GeneratorSpec,
    counts: &[usize],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() {
        return Err(Error::Usage("no target-class counts given".into()));
    }
    if let Some(&bad) = counts
        .iter()
        .find(|&&c| c > base_spec.num_source_classes || c == 0)
    {
        return Err(Error::Config(format!(
            "target-class count {bad} outside [1, {}]",
            base_spec.num_source_classes
        )));
    }
    let variants = [Variant::plain(Method::Patan), Variant::plain(Method::Dann)];
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut spec = base_spec.clone();
        spec.num_target_classes = count;
        spec.temporal_confusion_pairs
            .retain(|&(outlier, shared)| outlier >= count && shared < count);
        let cfg = ExperimentConfig {
            data: DataSource::Spec(spec),
            ..config.clone()
        };
        let results = run_variants(&cfg, &variants)?;
        if let Some(dir) = out {
            write_results(&cfg, &results, &dir.join(format!("targets_{count}")))?;
        }
        rows.push(SweepRow {
            num_target_classes: count,
            patan_median_accuracy: results[0].accuracy.median,
            dann_median_accuracy: results[1].accuracy.median,
            patan_accuracies: results[0].accuracies(),
            dann_accuracies: results[1].accuracies(),
        });
    }
    if let Some(dir) = out {
        write_json(&rows, &dir.join("sweep.json"))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TargetShift};

    fn tiny_spec() -> GeneratorSpec {
        GeneratorSpec {
            num_source_classes: 3,
            num_target_classes: 2,
            d_in: 3,
            k: 2,
            samples_per_class_source: 2,
            samples_per_class_target: 2,
            noise_std: 0.1,
            target_shift: TargetShift::none(),
            temporal_confusion_pairs: vec![],
            seed: 4,
        }
    }

    fn zero_head_model(data: &SplitDataset) -> PatanModel {
        let mut m = PatanModel::new(ModelWidths::default().config_for(data, 0)).unwrap();
        for id in [m.spy.w, m.spy.b, m.ty.w, m.ty.b] {
            m.params.value_mut(id).fill(0.0);
        }
        m
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn uniform_model_predicts_class_zero() {
        // All-zero logits tie every class; the tie rule picks class 0, so
        // accuracy is the share of class-0 samples: 2 of 4.
        let data = generate(&tiny_spec()).unwrap();
        let m = zero_head_model(&data);
        assert_eq!(top1_accuracy(&m, &data.target, Pooling::Attentive).unwrap(), 0.5);
        let pc = per_class_accuracy(&m, &data.target, Pooling::Attentive).unwrap();
        assert_eq!(pc, vec![Some(1.0), Some(0.0), None]);
    }

    #[test]
    fn accuracy_edge_cases() {
        let data = generate(&tiny_spec()).unwrap();
        let m = zero_head_model(&data);
        assert!(matches!(top1_accuracy(&m, &[], Pooling::Uniform), Err(Error::Usage(_))));
        let wrong: Vec<_> = data.target.iter().filter(|s| s.eval_label() == 1).take(1).cloned().collect();
        assert_eq!(top1_accuracy(&m, &wrong, Pooling::Uniform).unwrap(), 0.0);
        let right: Vec<_> = data.target.iter().filter(|s| s.eval_label() == 0).cloned().collect();
        assert_eq!(top1_accuracy(&m, &right, Pooling::Uniform).unwrap(), 1.0);
    }

    #[test]
    fn histogram_summary_rows() {
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let w = ClassWeights {
            gamma: vec![1.0, 1.0, 0.0, 0.0],
            epoch_computed: 1,
        };
        let csv = gamma_histogram_csv(&w, &names, 2);
        assert_eq!(
            csv.lines().last().unwrap(),
            "summary,1.0000000000000000e0,0.0000000000000000e0,0.0000000000000000e0"
        );
        let csv = gamma_histogram_csv(&ClassWeights::ones(4), &names, 4);
        assert_eq!(csv.lines().last().unwrap(), "summary,1.0000000000000000e0,,");
    }

    #[test]
    fn feature_export_rows() {
        let data = generate(&tiny_spec()).unwrap();
        let m = zero_head_model(&data);
        let all: Vec<_> = data.source.iter().chain(&data.target).cloned().collect();
        let a = features_csv(&m, &all, Pooling::Attentive).unwrap();
        let b = features_csv(&m, &all, Pooling::Attentive).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), all.len() + 1);
        assert_eq!(a.lines().next().unwrap().split(',').count(), 3 + m.config.d_t);
    }

    #[test]
    fn sweep_rejects_oversized_count() {
        let cfg = ExperimentConfig {
            train: TrainConfig::default(),
            data: DataSource::Spec(tiny_spec()),
            model: ModelWidths::default(),
            runs: 1,
            output_dir: None,
        };
        let err = run_target_count_sweep(&cfg, &tiny_spec(), &[4], None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn config_json_defaults() {
        let c = ExperimentConfig::from_json(r#"{"data": {"benchmark": "easy-7of14"}}"#).unwrap();
        assert_eq!(c.runs, 1);
        assert_eq!(c.train, TrainConfig::default());
        assert!(ExperimentConfig::from_json(r#"{"data": {"benchmark": "x"}, "runs": 0}"#).is_err());
    }
}
