//! Frame-feature video samples: the synthetic partial-domain generator and
//! the feature CSV reader/writer.
//!
//! Target labels are quarantined. Training code can only reach target frames
//! through [`SplitDataset::target_unlabeled`]; evaluation reads labels through
//! [`VideoSample::eval_label`], which is counted by [`label_audit`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    /// Domain-discriminator label: source 0, target 1.
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// Counts reads of target-domain labels on the current thread.
pub mod label_audit {
    use std::cell::Cell;

    thread_local! {
        static TARGET_LABEL_READS: Cell<usize> = const { Cell::new(0) };
        static TRAINING_READS: Cell<usize> = const { Cell::new(0) };
        static IN_TRAINING: Cell<bool> = const { Cell::new(false) };
    }

    pub(crate) fn record() {
        TARGET_LABEL_READS.with(|c| c.set(c.get() + 1));
        if IN_TRAINING.with(Cell::get) {
            TRAINING_READS.with(|c| c.set(c.get() + 1));
        }
    }

    /// All target-label reads on this thread since the last [`reset`].
    pub fn target_label_reads() -> usize {
        TARGET_LABEL_READS.with(Cell::get)
    }

    /// Target-label reads that happened inside a [`TrainingScope`].
    pub fn training_reads() -> usize {
        TRAINING_READS.with(Cell::get)
    }

    pub fn reset() {
        TARGET_LABEL_READS.with(|c| c.set(0));
        TRAINING_READS.with(|c| c.set(0));
    }

    /// Marks the current thread as running training code until dropped.
    pub struct TrainingScope {
        previous: bool,
    }

    impl TrainingScope {
        pub fn enter() -> Self {
            Self {
                previous: IN_TRAINING.with(|f| f.replace(true)),
            }
        }
    }

    impl Drop for TrainingScope {
        fn drop(&mut self) {
            IN_TRAINING.with(|f| f.set(self.previous));
        }
    }

    /// Runs `f` (an evaluation hook) with the training mark lifted.
    pub fn outside_training<T>(f: impl FnOnce() -> T) -> T {
        let previous = IN_TRAINING.with(|flag| flag.replace(false));
        let out = f();
        IN_TRAINING.with(|flag| flag.set(previous));
        out
    }
}

/// One video: `k x d_in` frame features, row `j` is frame `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub domain: Domain,
    pub frames: Matrix,
    label: usize,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, domain: Domain, label: usize, frames: Matrix) -> Self {
        Self {
            id: id.into(),
            domain,
            frames,
            label,
        }
    }

    /// The training label; `None` for target samples.
    pub fn source_label(&self) -> Option<usize> {
        match self.domain {
            Domain::Source => Some(self.label),
            Domain::Target => None,
        }
    }

    /// The ground-truth label for evaluation. Reads on target samples are
    /// recorded by [`label_audit`].
    pub fn eval_label(&self) -> usize {
        if self.domain == Domain::Target {
            label_audit::record();
        }
        self.label
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Label-free view of a target video handed to training code.
#[derive(Debug, Clone, Copy)]
pub struct Unlabeled<'a> {
    pub id: &'a str,
    pub frames: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetShift {
    pub rotation_angle: f64,
    pub offset_scale: f64,
    pub noise_multiplier: f64,
}

impl TargetShift {
    pub fn none() -> Self {
        Self {
            rotation_angle: 0.0,
            offset_scale: 0.0,
            noise_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_source_classes: usize,
    pub num_target_classes: usize,
    pub d_in: usize,
    pub k: usize,
    pub samples_per_class_source: usize,
    pub samples_per_class_target: usize,
    pub noise_std: f64,
    pub target_shift: TargetShift,
    /// `(outlier_class, shared_class)` pairs with identical motion vectors.
    #[serde(default)]
    pub temporal_confusion_pairs: Vec<(usize, usize)>,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_target_classes < 1 {
            return bad("num_target_classes must be >= 1".into());
        }
        if self.num_target_classes > self.num_source_classes {
            return bad(format!(
                "num_target_classes {} exceeds num_source_classes {}",
                self.num_target_classes, self.num_source_classes
            ));
        }
        if self.num_source_classes < 2 {
            return bad("num_source_classes must be >= 2".into());
        }
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.d_in < 2 {
            return bad(format!("d_in must be >= 2, got {}", self.d_in));
        }
        if self.samples_per_class_source == 0 || self.samples_per_class_target == 0 {
            return bad("samples per class must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        let s = &self.target_shift;
        if !(s.rotation_angle.is_finite() && s.offset_scale >= 0.0 && s.noise_multiplier >= 0.0)
        {
            return bad(format!("invalid target_shift {s:?}"));
        }
        for &(outlier, shared) in &self.temporal_confusion_pairs {
            if outlier < self.num_target_classes
                || outlier >= self.num_source_classes
                || shared >= self.num_target_classes
            {
                return bad(format!(
                    "confusion pair ({outlier}, {shared}) must map an outlier class to a shared class"
                ));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex_digest(&json)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub source: Vec<VideoSample>,
    pub target: Vec<VideoSample>,
    pub class_names: Vec<String>,
    /// Number of leading classes shared with the target domain, when known.
    pub num_target_classes: usize,
    pub spec_fingerprint: String,
}

impl SplitDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn k(&self) -> usize {
        self.source.first().map_or(0, VideoSample::num_frames)
    }

    pub fn d_in(&self) -> usize {
        self.source.first().map_or(0, VideoSample::dim)
    }

    pub fn target_unlabeled(&self) -> Vec<Unlabeled<'_>> {
        self.target
            .iter()
            .map(|s| Unlabeled {
                id: &s.id,
                frames: &s.frames,
            })
            .collect()
    }
}

/// Named benchmark presets.
pub fn default_benchmark(name: &str) -> Result<GeneratorSpec> {
    let base = |cs, ct, shift, pairs| GeneratorSpec {
        num_source_classes: cs,
        num_target_classes: ct,
        d_in: 12,
        k: 4,
        samples_per_class_source: 40,
        samples_per_class_target: 40,
        noise_std: 0.25,
        target_shift: shift,
        temporal_confusion_pairs: pairs,
        seed: 0,
    };
    let mild = TargetShift {
        rotation_angle: 0.3,
        offset_scale: 0.5,
        noise_multiplier: 1.5,
    };
    match name {
        "easy-7of14" => Ok(base(14, 7, mild, vec![])),
        "hard-5of10-confused" => Ok(base(
            10,
            5,
            TargetShift {
                rotation_angle: 0.6,
                offset_scale: 1.0,
                noise_multiplier: 2.0,
            },
            vec![(5, 0), (6, 1), (7, 2)],
        )),
        "equal-14of14" => Ok(base(14, 14, mild, vec![])),
        other => Err(Error::Usage(format!(
            "unknown benchmark `{other}` (expected easy-7of14, hard-5of10-confused or equal-14of14)"
        ))),
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Rotation by `angle` in the plane spanned by two seeded orthonormal vectors.
fn plane_rotation(rng: &mut ChaCha8Rng, d: usize, angle: f64) -> Array2<f64> {
    let u = random_unit(rng, d);
    let v = loop {
        let w = random_unit(rng, d);
        let w = &w - &(&u * u.dot(&w));
        let n = w.dot(&w).sqrt();
        if n > 1e-6 {
            break w / n;
        }
    };
    let outer = |a: &Array1<f64>, b: &Array1<f64>| {
        Array2::from_shape_fn((d, d), |(i, j)| a[i] * b[j])
    };
    let (sin, cos) = angle.sin_cos();
    let mut r = Array2::eye(d);
    r += &((outer(&u, &u) + outer(&v, &v)) * (cos - 1.0));
    r += &((outer(&v, &u) - outer(&u, &v)) * sin);
    r
}

/// Builds a labeled source split and a (quarantined-label) target split.
///
/// Class `c` has a unit spatial prototype `s_c` and a motion vector `m_c` of
/// norm 0.5; frame `j` is `s_c + j * m_c / (k - 1)` plus gaussian noise.
/// Target frames are rotated, offset and noisier.
pub fn generate(spec: &GeneratorSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let (cs, ct, d, k) = (
        spec.num_source_classes,
        spec.num_target_classes,
        spec.d_in,
        spec.k,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Array1<f64>> = (0..cs).map(|_| random_unit(&mut rng, d)).collect();
    let mut motions: Vec<Array1<f64>> =
        (0..cs).map(|_| random_unit(&mut rng, d) * 0.5).collect();
    for &(outlier, shared) in &spec.temporal_confusion_pairs {
        motions[outlier] = motions[shared].clone();
    }

    let mut shift_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5151_7a7a_0000_0001);
    let rotation = plane_rotation(&mut shift_rng, d, spec.target_shift.rotation_angle);
    let offset = random_unit(&mut shift_rng, d) * spec.target_shift.offset_scale;

    let clean = |c: usize| -> Matrix {
        Array2::from_shape_fn((k, d), |(j, i)| {
            prototypes[c][i] + j as f64 * motions[c][i] / (k - 1) as f64
        })
    };
    let noisy = |base: Matrix, std: f64, rng: &mut ChaCha8Rng| -> Matrix {
        base.mapv(|v| v + std * rng.sample::<f64, _>(StandardNormal))
    };

    let mut source_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5151_7a7a_0000_0002);
    let mut source = Vec::with_capacity(cs * spec.samples_per_class_source);
    for c in 0..cs {
        for n in 0..spec.samples_per_class_source {
            let frames = noisy(clean(c), spec.noise_std, &mut source_rng);
            let id = format!("s-{c:02}-{n:04}");
            source.push(VideoSample::new(id, Domain::Source, c, frames));
        }
    }

    let mut target_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5151_7a7a_0000_0003);
    let target_std = spec.noise_std * spec.target_shift.noise_multiplier;
    let mut target = Vec::with_capacity(ct * spec.samples_per_class_target);
    for c in 0..ct {
        let shifted = clean(c).dot(&rotation.t()) + &offset;
        for n in 0..spec.samples_per_class_target {
            let frames = noisy(shifted.clone(), target_std, &mut target_rng);
            let id = format!("t-{c:02}-{n:04}");
            target.push(VideoSample::new(id, Domain::Target, c, frames));
        }
    }

    Ok(SplitDataset {
        source,
        target,
        class_names: (0..cs).map(|c| format!("class_{c:02}")).collect(),
        num_target_classes: ct,
        spec_fingerprint: spec.fingerprint(),
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the feature CSV: `id,domain,label,frame,f0..f{d-1}`, one row per
/// frame.
pub fn write_features(data: &SplitDataset, path: &Path) -> Result<()> {
    let d = data.d_in();
    let mut out = String::from("id,domain,label,frame");
    for i in 0..d {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for s in data.source.iter().chain(&data.target) {
        let label = s.label;
        for (j, row) in s.frames.rows().into_iter().enumerate() {
            let _ = write!(out, "{},{},{},{}", s.id, s.domain.as_str(), label, j);
            for v in row {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a feature CSV written by [`write_features`] or by an external
/// feature extractor.
pub fn load_features(path: &Path) -> Result<SplitDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut data = parse_features(&bytes)?;
    data.spec_fingerprint = hex_digest(&bytes);
    Ok(data)
}

struct Pending {
    id: String,
    domain: Domain,
    label: usize,
    rows: Vec<Vec<f64>>,
    first_row: usize,
}

pub fn parse_features(bytes: &[u8]) -> Result<SplitDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(bytes);
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| Error::Input(format!("row 1: {e}")))?,
        None => return Err(Error::Input("row 1: missing header".into())),
    };
    let fixed = ["id", "domain", "label", "frame"];
    if header.len() < 5 || fixed.iter().zip(header.iter()).any(|(a, b)| *a != b.trim()) {
        return Err(Error::Input(
            "row 1: missing header `id,domain,label,frame,f0,...`".into(),
        ));
    }
    let d = header.len() - 4;
    for (i, name) in header.iter().skip(4).enumerate() {
        if name.trim() != format!("f{i}") {
            return Err(Error::Input(format!(
                "row 1: expected column f{i}, found `{name}`"
            )));
        }
    }

    let mut videos: Vec<Pending> = Vec::new();
    for (n, rec) in records.enumerate() {
        let row = n + 2;
        let rec = rec.map_err(|e| Error::Input(format!("row {row}: {e}")))?;
        if rec.len() != d + 4 {
            return Err(Error::Input(format!(
                "row {row}: expected {} fields, found {}",
                d + 4,
                rec.len()
            )));
        }
        let id = rec[0].trim().to_string();
        let domain = match rec[1].trim() {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => {
                return Err(Error::Input(format!("row {row}: unknown domain `{other}`")));
            }
        };
        let label: usize = rec[2]
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("row {row}: non-numeric label `{}`", &rec[2])))?;
        let frame: usize = rec[3]
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("row {row}: non-numeric frame `{}`", &rec[3])))?;
        let mut values = Vec::with_capacity(d);
        for (i, cell) in rec.iter().skip(4).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Input(format!("row {row}: non-numeric value `{cell}` in f{i}"))
            })?;
            if !v.is_finite() {
                return Err(Error::Input(format!("row {row}: non-finite value in f{i}")));
            }
            values.push(v);
        }

        let continues = videos.last().is_some_and(|v| v.id == id);
        if continues {
            let v = videos.last_mut().expect("checked");
            if v.domain != domain || v.label != label {
                return Err(Error::Input(format!(
                    "row {row}: video `{id}` changes domain or label mid-sequence"
                )));
            }
            if frame != v.rows.len() {
                return Err(Error::Input(format!(
                    "row {row}: video `{id}` frame {frame} out of order (expected {})",
                    v.rows.len()
                )));
            }
            v.rows.push(values);
        } else {
            if videos.iter().any(|v| v.id == id) {
                return Err(Error::Input(format!(
                    "row {row}: frames of video `{id}` are not contiguous"
                )));
            }
            if frame != 0 {
                return Err(Error::Input(format!(
                    "row {row}: video `{id}` starts at frame {frame}, expected 0"
                )));
            }
            videos.push(Pending {
                id,
                domain,
                label,
                rows: vec![values],
                first_row: row,
            });
        }
    }

    let k = videos
        .first()
        .map(|v| v.rows.len())
        .ok_or_else(|| Error::Input("no videos in feature file".into()))?;
    if k < 2 {
        return Err(Error::Input(format!("row 2: videos need >= 2 frames, found {k}")));
    }
    for v in &videos {
        if v.rows.len() != k {
            return Err(Error::Input(format!(
                "row {}: video `{}` has {} frames, expected {k}",
                v.first_row,
                v.id,
                v.rows.len()
            )));
        }
    }

    let mut source = Vec::new();
    let mut target = Vec::new();
    for v in videos {
        let flat: Vec<f64> = v.rows.into_iter().flatten().collect();
        let frames = Array2::from_shape_vec((k, d), flat).expect("validated shape");
        let s = VideoSample::new(v.id, v.domain, v.label, frames);
        match v.domain {
            Domain::Source => source.push(s),
            Domain::Target => target.push(s),
        }
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::Input(
            "feature file needs at least one source and one target video".into(),
        ));
    }
    let num_classes = source.iter().map(|s| s.label).max().expect("non-empty") + 1;
    if let Some(bad) = target.iter().find(|s| s.label >= num_classes) {
        return Err(Error::Input(format!(
            "target video `{}` has label {} outside the source label space",
            bad.id, bad.label
        )));
    }
    let num_target_classes = target.iter().map(|s| s.label).max().expect("non-empty") + 1;
    Ok(SplitDataset {
        source,
        target,
        class_names: (0..num_classes).map(|c| format!("class_{c:02}")).collect(),
        num_target_classes,
        spec_fingerprint: String::new(),
    })
}
