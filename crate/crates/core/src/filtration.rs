//! Source-class filtration weights.
//!
//! Two estimators: the mean target prediction of the source classifier, and
//! the temporal attentive variant that also averages the spatial head and the
//! attention-weighted per-scale predictions. Both are max-normalized so the
//! most target-like class keeps weight 1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::model::ForwardOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub gamma: Vec<f64>,
    pub epoch_computed: usize,
}

impl ClassWeights {
    /// No filtering.
    pub fn ones(num_classes: usize) -> Self {
        Self {
            gamma: vec![1.0; num_classes],
            epoch_computed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.gamma[class]
    }

    /// Mean weight over the shared classes `0..num_target_classes` and over
    /// the remaining outlier classes. The outlier mean is `None` when every
    /// class is shared.
    pub fn shared_outlier_means(&self, num_target_classes: usize) -> (f64, Option<f64>) {
        let split = num_target_classes.min(self.gamma.len());
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let shared = mean(&self.gamma[..split]);
        let outlier = (split < self.gamma.len()).then(|| mean(&self.gamma[split..]));
        (shared, outlier)
    }

    /// Outlier-to-shared mean ratio; lower means stronger filtration.
    pub fn outlier_ratio(&self, num_target_classes: usize) -> Option<f64> {
        let (shared, outlier) = self.shared_outlier_means(num_target_classes);
        outlier.map(|o| o / shared)
    }
}

/// Divides by the largest entry.
pub fn normalize(gamma: &[f64]) -> Result<Vec<f64>> {
    let max = gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::Runtime(format!(
            "cannot normalize class weights with max {max}"
        )));
    }
    Ok(gamma.iter().map(|g| g / max).collect())
}

/// Mean target prediction of the source classifier, max-normalized.
pub fn gamma_pada(target_predictions: &[Vec<f64>]) -> Result<ClassWeights> {
    let first = target_predictions
        .first()
        .ok_or_else(|| Error::Usage("class weights need at least one target prediction".into()))?;
    let c = first.len();
    let mut acc = vec![0.0; c];
    for p in target_predictions {
        if p.len() != c {
            return Err(Error::Config(format!(
                "prediction over {} classes where {c} expected",
                p.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = target_predictions.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(ClassWeights {
        gamma: normalize(&acc)?,
        epoch_computed: 0,
    })
}

/// Which terms enter the temporal attentive average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GammaTerms {
    /// Include the per-scale predictions.
    pub local: bool,
    /// Weight per-scale predictions by attention; otherwise by 1.
    pub attentive: bool,
}

impl Default for GammaTerms {
    fn default() -> Self {
        Self {
            local: true,
            attentive: true,
        }
    }
}

/// `1 / (n (k + 1)) * sum_i (y_t + y_sp + sum_r w_r y_r)`, max-normalized.
pub fn gamma_patan(target_outputs: &[ForwardOutput]) -> Result<ClassWeights> {
    gamma_patan_with(target_outputs, GammaTerms::default())
}

pub fn gamma_patan_with(target_outputs: &[ForwardOutput], terms: GammaTerms) -> Result<ClassWeights> {
    let first = target_outputs
        .first()
        .ok_or_else(|| Error::Usage("class weights need at least one target output".into()))?;
    let (k, c) = (first.k(), first.num_classes());
    let mut acc = vec![0.0; c];
    for out in target_outputs {
        if out.k() != k {
            return Err(Error::Config(format!(
                "outputs from k = {} and k = {k} mixed",
                out.k()
            )));
        }
        if out.num_classes() != c || out.y_sp.len() != c {
            return Err(Error::Config(format!(
                "output over {} classes where {c} expected",
                out.num_classes()
            )));
        }
        for (cls, a) in acc.iter_mut().enumerate() {
            *a += out.y_t[cls] + out.y_sp[cls];
        }
        if terms.local {
            for s in &out.scales {
                let w = if terms.attentive { s.weight } else { 1.0 };
                for (a, p) in acc.iter_mut().zip(&s.probs) {
                    *a += w * p;
                }
            }
        }
    }
    let terms_per_sample = if terms.local { k + 1 } else { 2 };
    let denom = (target_outputs.len() * terms_per_sample) as f64;
    acc.iter_mut().for_each(|a| *a /= denom);
    Ok(ClassWeights {
        gamma: normalize(&acc)?,
        epoch_computed: 0,
    })
}

/// Weights in force during `epoch`: all ones at epoch 0, otherwise the result
/// of `recompute` (a full pass over the target set), stamped with the epoch.
pub fn update_schedule<F>(epoch: usize, num_classes: usize, recompute: F) -> Result<ClassWeights>
where
    F: FnOnce() -> Result<ClassWeights>,
{
    if epoch == 0 {
        return Ok(ClassWeights::ones(num_classes));
    }
    let mut w = recompute()?;
    w.epoch_computed = epoch;
    Ok(w)
}

/// `class_index,class_name,weight,is_target_class`, one row per class.
pub fn gamma_csv(weights: &ClassWeights, class_names: &[String], num_target_classes: usize) -> String {
    let mut out = String::from("class_index,class_name,weight,is_target_class\n");
    for (i, g) in weights.gamma.iter().enumerate() {
        let name = class_names.get(i).map_or("", String::as_str);
        let _ = writeln!(out, "{i},{name},{},{}", fmt_f64(*g), i < num_target_classes);
    }
    out
}

pub fn write_gamma_csv(
    weights: &ClassWeights,
    class_names: &[String],
    num_target_classes: usize,
    path: &Path,
) -> Result<()> {
    fs::write(path, gamma_csv(weights, class_names, num_target_classes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScaleOutput;

    fn out(y_t: Vec<f64>, y_sp: Vec<f64>, scales: Vec<(Vec<f64>, f64)>) -> ForwardOutput {
        ForwardOutput {
            spatial_feature: vec![],
            y_sp,
            scales: scales
                .into_iter()
                .enumerate()
                .map(|(i, (probs, weight))| ScaleOutput {
                    r: i + 2,
                    feature: vec![],
                    probs,
                    weight,
                })
                .collect(),
            feature: vec![],
            y_t,
        }
    }

    #[test]
    fn pada_one_hot() {
        let w = gamma_pada(&[vec![0.0, 0.0, 0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(w.gamma, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn pada_uniform_is_ones() {
        let w = gamma_pada(&[vec![0.25; 4], vec![0.25; 4]]).unwrap();
        assert_eq!(w.gamma, vec![1.0; 4]);
    }

    #[test]
    fn pada_hand_arithmetic() {
        let w = gamma_pada(&[vec![0.8, 0.2, 0.0], vec![0.6, 0.4, 0.0]]).unwrap();
        assert!((w.gamma[0] - 1.0).abs() < 1e-15);
        assert!((w.gamma[1] - 0.3 / 0.7).abs() < 1e-15);
        assert!((w.gamma[1] - 0.4286).abs() < 1e-4);
        assert_eq!(w.gamma[2], 0.0);
    }

    #[test]
    fn empty_inputs_are_usage_errors() {
        assert!(matches!(gamma_pada(&[]), Err(Error::Usage(_))));
        assert!(matches!(gamma_patan(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn patan_k2_one_hot() {
        let t = 1f64.tanh();
        let o = out(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![(vec![1.0, 0.0, 0.0], t)]);
        let raw0 = (2.0 + t) / 3.0;
        assert!((raw0 - 0.9205).abs() < 1e-4);
        let w = gamma_patan(&[o]).unwrap();
        assert_eq!(w.gamma, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn patan_zero_weights_collapse_to_heads() {
        let a = out(vec![0.7, 0.2, 0.1], vec![0.5, 0.1, 0.4], vec![(vec![0.0, 0.0, 1.0], 0.0); 2]);
        let b = out(vec![0.1, 0.6, 0.3], vec![0.2, 0.3, 0.5], vec![(vec![0.0, 1.0, 0.0], 0.0); 2]);
        let w = gamma_patan(&[a.clone(), b.clone()]).unwrap();
        let heads: Vec<f64> = (0..3)
            .map(|c| (a.y_t[c] + a.y_sp[c] + b.y_t[c] + b.y_sp[c]) / 4.0)
            .collect();
        let expect = normalize(&heads).unwrap();
        for (x, y) in w.gamma.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn patan_mixed_k_rejected() {
        let a = out(vec![0.5, 0.5], vec![0.5, 0.5], vec![(vec![0.5, 0.5], 0.1)]);
        let b = out(vec![0.5, 0.5], vec![0.5, 0.5], vec![(vec![0.5, 0.5], 0.1); 2]);
        assert!(matches!(gamma_patan(&[a, b]), Err(Error::Config(_))));
    }

    #[test]
    fn local_terms_can_be_dropped() {
        let a = out(vec![0.9, 0.1], vec![0.8, 0.2], vec![(vec![0.0, 1.0], 0.7)]);
        let full = gamma_patan(std::slice::from_ref(&a)).unwrap();
        let heads = gamma_patan_with(
            &[a],
            GammaTerms {
                local: false,
                attentive: true,
            },
        )
        .unwrap();
        assert!(full.gamma[1] > heads.gamma[1]);
        assert!((heads.gamma[1] - 0.3 / 1.7).abs() < 1e-15);
    }

    #[test]
    fn schedule_starts_with_ones() {
        let w = update_schedule(0, 4, || unreachable!()).unwrap();
        assert_eq!(w, ClassWeights::ones(4));
        let w = update_schedule(3, 2, || gamma_pada(&[vec![0.5, 0.5]])).unwrap();
        assert_eq!(w.gamma, vec![1.0, 1.0]);
        assert_eq!(w.epoch_computed, 3);
    }

    #[test]
    fn ratio_and_csv() {
        let w = ClassWeights {
            gamma: vec![1.0, 1.0, 0.0, 0.0],
            epoch_computed: 2,
        };
        assert_eq!(w.outlier_ratio(2), Some(0.0));
        assert_eq!(ClassWeights::ones(3).outlier_ratio(3), None);
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let csv = gamma_csv(&w, &names, 2);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "class_index,class_name,weight,is_target_class");
        assert_eq!(lines[3], "2,c2,0.0000000000000000e0,false");
    }
}
