//! Browser demo: the label-attention curve, the reversal/learning-rate
//! schedule, and a small filtration run. Every export returns JSON text;
//! failures come back as `{"error": "..."}`.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use patan::data::{self, GeneratorSpec};
use patan::eval::{self, ModelWidths};
use patan::model::{attention_weight, certainty};
use patan::train::{grl_schedule, Method, TrainConfig};

fn finish(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Certainty and attention weight as one class's probability goes from
/// uniform (`1 / classes`) to one-hot, the rest spread evenly.
#[wasm_bindgen]
pub fn attention_curve(classes: usize, steps: usize) -> String {
    finish(attention_points(classes, steps))
}

fn attention_points(classes: usize, steps: usize) -> Result<Value, String> {
    if classes < 2 || steps < 2 {
        return Err("need at least 2 classes and 2 steps".into());
    }
    let floor = 1.0 / classes as f64;
    let pts: Vec<Value> = (0..steps)
        .map(|i| {
            let peak = floor + (1.0 - floor) * i as f64 / (steps - 1) as f64;
            let rest = (1.0 - peak) / (classes - 1) as f64;
            let mut p = vec![rest; classes];
            p[0] = peak;
            json!({ "peak": peak, "certainty": certainty(&p), "weight": attention_weight(&p) })
        })
        .collect();
    Ok(json!({ "classes": classes, "max_weight": 1f64.tanh(), "points": pts }))
}

/// Reversal coefficient and learning rate at the start of every epoch.
#[wasm_bindgen]
pub fn schedule(epochs: usize, lr: f64) -> String {
    finish(schedule_points(epochs, lr))
}

fn schedule_points(epochs: usize, lr: f64) -> Result<Value, String> {
    let cfg = TrainConfig {
        epochs,
        lr,
        ..Default::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let pts: Vec<Value> = (0..epochs)
        .map(|e| {
            let progress = e as f64 / epochs as f64;
            json!({ "epoch": e, "progress": progress, "grl": grl_schedule(progress), "lr": cfg.lr_at(e) })
        })
        .collect();
    Ok(json!({ "drops": cfg.drop_epochs(), "points": pts }))
}

/// The hard preset at half the samples, so a run takes about a second.
fn demo_spec(seed: u64) -> Result<GeneratorSpec, String> {
    let mut spec = data::default_benchmark("hard-5of10-confused").map_err(|e| e.to_string())?;
    spec.samples_per_class_source = 20;
    spec.samples_per_class_target = 20;
    spec.seed = seed;
    Ok(spec)
}

/// Trains `method` (`dann`, `pada` or `patan`) on a 5-of-10 class task and
/// reports the final class weights and per-epoch target accuracy.
#[wasm_bindgen]
pub fn filtration_run(method: &str, epochs: usize, seed: u32) -> String {
    finish(filtration(method, epochs, seed))
}

fn filtration(method: &str, epochs: usize, seed: u32) -> Result<Value, String> {
    let method: Method = method.parse().map_err(|e: patan::Error| e.to_string())?;
    if !(1..=60).contains(&epochs) {
        return Err("epochs must be in 1..=60".into());
    }
    let d = data::generate(&demo_spec(u64::from(seed))?).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        method,
        epochs,
        seed: u64::from(seed),
        ..Default::default()
    };
    let (_, run) = eval::run_single(&cfg, &ModelWidths::default(), &d, cfg.seed).map_err(|e| e.to_string())?;
    Ok(json!({
        "method": method.as_str(),
        "classes": d.class_names,
        "shared": d.num_target_classes,
        "gamma": run.gamma.gamma,
        "ratio": run.gamma_ratio,
        "accuracy": run.final_target_accuracy,
        "epoch_accuracy": run.metrics.iter().map(|m| m.target_accuracy).collect::<Vec<_>>(),
    }))
}
