//! Session streams, the incremental evaluation protocol, ablations and the
//! synthetic desk dataset.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::backbone::{Architecture, ModelParams};
use crate::data_io::{load_dataset, save_dataset, DType, DataFormat, LabeledDataset, SplitConfig};
use crate::error::{Error, Result};
use crate::explicit_memory::QuantSpec;
use crate::losses::Grid;
use crate::offline_training::{
    build_base_em, class_index, metalearn, pretrain, FccHead, MetaConfig, MetaHistory, MetaObjective, PretrainConfig,
    PretrainHistory,
};
use crate::online_learner::{finetune_fcr, learn_class, FinetuneConfig};

/// Base session, incremental sessions and a test set over all their classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub base: LabeledDataset,
    pub sessions: Vec<LabeledDataset>,
    pub ways: usize,
    pub shots: usize,
    pub test: LabeledDataset,
}

impl SessionStream {
    /// Classes introduced in session `t`; session 0 is the base session.
    pub fn session_classes(&self, t: usize) -> BTreeSet<u32> {
        if t == 0 {
            self.base.classes()
        } else {
            self.sessions[t - 1].classes()
        }
    }

    /// Union of the classes of sessions `0..=t`.
    pub fn seen_classes(&self, t: usize) -> BTreeSet<u32> {
        (0..=t).flat_map(|s| self.session_classes(s)).collect()
    }

    /// Number of incremental sessions.
    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyBase,
    DimensionMismatch { part: String, dim: usize, expected: usize },
    ClassInTwoSessions { class_id: u32, first: usize, second: usize },
    WayCount { session: usize, expected: usize, found: usize },
    ShotCount { session: usize, class_id: u32, expected: usize, found: usize },
    UntestedClass { class_id: u32 },
    UnknownTestClass { class_id: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyBase => write!(f, "base session is empty"),
            Violation::DimensionMismatch { part, dim, expected } => {
                write!(f, "{part} has input dimension {dim}, expected {expected}")
            }
            Violation::ClassInTwoSessions { class_id, first, second } => {
                write!(f, "class {class_id} appears in sessions {first} and {second}")
            }
            Violation::WayCount { session, expected, found } => {
                write!(f, "session {session} has {found} classes, expected {expected}")
            }
            Violation::ShotCount { session, class_id, expected, found } => {
                write!(f, "session {session} class {class_id} has {found} samples, expected {expected}")
            }
            Violation::UntestedClass { class_id } => write!(f, "class {class_id} has no test samples"),
            Violation::UnknownTestClass { class_id } => {
                write!(f, "test class {class_id} belongs to no session")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks session disjointness, way and shot counts, and test coverage.
pub fn validate_stream(stream: &SessionStream) -> ValidationReport {
    let mut v = Vec::new();
    if stream.base.is_empty() {
        v.push(Violation::EmptyBase);
    }
    let dim = stream.base.input_dim();
    let parts = std::iter::once(("test".to_string(), &stream.test))
        .chain(stream.sessions.iter().enumerate().map(|(i, s)| (format!("session {}", i + 1), s)));
    for (part, ds) in parts {
        if ds.input_dim() != dim {
            v.push(Violation::DimensionMismatch {
                part,
                dim: ds.input_dim(),
                expected: dim,
            });
        }
    }
    let mut owner: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for t in 0..=stream.num_sessions() {
        for c in stream.session_classes(t) {
            if let Some(&first) = owner.get(&c) {
                v.push(Violation::ClassInTwoSessions {
                    class_id: c,
                    first,
                    second: t,
                });
            } else {
                owner.insert(c, t);
            }
        }
    }
    for (i, s) in stream.sessions.iter().enumerate() {
        let by_class = s.indices_by_class();
        if by_class.len() != stream.ways {
            v.push(Violation::WayCount {
                session: i + 1,
                expected: stream.ways,
                found: by_class.len(),
            });
        }
        for (&c, rows) in &by_class {
            if rows.len() != stream.shots {
                v.push(Violation::ShotCount {
                    session: i + 1,
                    class_id: c,
                    expected: stream.shots,
                    found: rows.len(),
                });
            }
        }
    }
    let tested = stream.test.classes();
    for &c in owner.keys() {
        if !tested.contains(&c) {
            v.push(Violation::UntestedClass { class_id: c });
        }
    }
    for c in tested {
        if !owner.contains_key(&c) {
            v.push(Violation::UnknownTestClass { class_id: c });
        }
    }
    ValidationReport { violations: v }
}

/// Per-session accuracies with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub method: String,
    pub precision: String,
    pub finetune: bool,
    /// Accuracy on the classes seen so far, for sessions `0..=T`.
    pub accuracies: Vec<f64>,
    pub average: f64,
}

impl SessionReport {
    pub fn new(method: &str, precision: &str, finetune: bool, accuracies: Vec<f64>) -> Self {
        let average = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
        Self {
            method: method.to_string(),
            precision: precision.to_string(),
            finetune,
            accuracies,
            average,
        }
    }
}

/// Renders reports as `method,prec,ft,0,…,T,avg`, accuracies in percent.
pub fn reports_to_csv(reports: &[SessionReport]) -> String {
    let sessions = reports.iter().map(|r| r.accuracies.len()).max().unwrap_or(0);
    let mut out = String::from("method,prec,ft");
    for t in 0..sessions {
        write!(out, ",{t}").unwrap();
    }
    out.push_str(",avg\n");
    for r in reports {
        write!(out, "{},{},{}", r.method, r.precision, if r.finetune { "yes" } else { "no" }).unwrap();
        for t in 0..sessions {
            match r.accuracies.get(t) {
                Some(a) => write!(out, ",{:.2}", 100.0 * a).unwrap(),
                None => out.push(','),
            }
        }
        writeln!(out, ",{:.2}", 100.0 * r.average).unwrap();
    }
    out
}

/// Label for a prototype width: `fp` at full precision, otherwise `<bits>b`.
pub fn precision_label(quant: &QuantSpec) -> String {
    if quant.is_full_precision() {
        "fp".into()
    } else {
        format!("{}b", quant.prototype_bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOptions {
    pub method: String,
    /// FCR finetuning after each incremental session.
    pub finetune: Option<FinetuneConfig>,
    /// When false, incremental sessions add nothing (control run).
    pub learn_novel: bool,
    /// Inputs whose per-class scores are recorded after every session.
    pub probes: Vec<Vec<f64>>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            method: "ofscil".into(),
            finetune: None,
            learn_novel: true,
            probes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub session: usize,
    pub accuracy: f64,
    /// Accuracy restricted to test samples of base classes.
    pub base_accuracy: f64,
    /// Accuracy on test samples of incremental classes, if any were seen.
    pub novel_accuracy: Option<f64>,
    /// Test-set rows evaluated in this session.
    pub evaluated: Vec<usize>,
    pub predictions: Vec<u32>,
    /// For each probe, `(class_id, score)` over the classes in memory.
    pub probe_scores: Vec<Vec<(u32, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub report: SessionReport,
    pub sessions: Vec<SessionOutcome>,
}

/// Runs the incremental protocol: base memory from session 0, then each
/// session's classes learned in a single pass (optionally followed by FCR
/// finetuning), evaluating on every class seen so far after each session.
pub fn run_protocol(
    params: &ModelParams,
    stream: &SessionStream,
    quant: &QuantSpec,
    options: &ProtocolOptions,
) -> Result<ProtocolRun> {
    let report = validate_stream(stream);
    if !report.is_ok() {
        return Err(Error::InvalidConfig(format!("invalid stream: {}", report.violations[0])));
    }
    let mut params = params.clone();
    let (mut em, mut am) = build_base_em(&params, &stream.base, quant)?;
    let base_classes = stream.base.classes();
    let test_acts: Vec<Vec<f64>> = stream
        .test
        .inputs()
        .par_iter()
        .map(|x| params.forward_backbone(x, None))
        .collect::<Result<_>>()?;
    let probe_acts: Vec<Vec<f64>> = options
        .probes
        .iter()
        .map(|x| params.forward_backbone(x, None))
        .collect::<Result<_>>()?;

    let mut outcomes = Vec::with_capacity(stream.num_sessions() + 1);
    for t in 0..=stream.num_sessions() {
        if t > 0 && options.learn_novel {
            let session = &stream.sessions[t - 1];
            for c in session.classes() {
                learn_class(&mut em, &mut am, &params, &session.samples_of(c), c)?;
            }
            if let Some(ft) = &options.finetune {
                finetune_fcr(&mut params, &am, &em, ft)?;
            }
        }
        let seen = stream.seen_classes(t);
        let evaluated: Vec<usize> = (0..stream.test.len())
            .filter(|&i| seen.contains(&stream.test.labels()[i]))
            .collect();
        let predictions: Vec<u32> = evaluated
            .par_iter()
            .map(|&i| Ok(em.classify(&params.forward_fcr(&test_acts[i], None)?)?.class_id))
            .collect::<Result<_>>()?;
        let (mut hit, mut base_hit, mut base_n, mut novel_hit, mut novel_n) = (0, 0, 0, 0, 0);
        for (&i, &p) in evaluated.iter().zip(&predictions) {
            let y = stream.test.labels()[i];
            let ok = usize::from(p == y);
            hit += ok;
            if base_classes.contains(&y) {
                base_hit += ok;
                base_n += 1;
            } else {
                novel_hit += ok;
                novel_n += 1;
            }
        }
        let ids = em.class_ids();
        let probe_scores = probe_acts
            .iter()
            .map(|a| {
                let c = em.classify(&params.forward_fcr(a, None)?)?;
                Ok(ids.iter().copied().zip(c.scores).collect())
            })
            .collect::<Result<_>>()?;
        outcomes.push(SessionOutcome {
            session: t,
            accuracy: hit as f64 / evaluated.len().max(1) as f64,
            base_accuracy: base_hit as f64 / base_n.max(1) as f64,
            novel_accuracy: (novel_n > 0).then(|| novel_hit as f64 / novel_n as f64),
            evaluated,
            predictions,
            probe_scores,
        });
    }
    let report = SessionReport::new(
        &options.method,
        &precision_label(quant),
        options.finetune.is_some(),
        outcomes.iter().map(|o| o.accuracy).collect(),
    );
    Ok(ProtocolRun {
        report,
        sessions: outcomes,
    })
}

/// Checks that each session evaluated exactly the test rows of the classes
/// seen so far. Returns one message per mismatch.
pub fn coverage_audit(stream: &SessionStream, run: &ProtocolRun) -> Vec<String> {
    let mut problems = Vec::new();
    if run.sessions.len() != stream.num_sessions() + 1 {
        problems.push(format!(
            "{} sessions evaluated, stream has {}",
            run.sessions.len(),
            stream.num_sessions() + 1
        ));
    }
    for o in &run.sessions {
        let seen = stream.seen_classes(o.session);
        let expected: Vec<usize> = (0..stream.test.len())
            .filter(|&i| seen.contains(&stream.test.labels()[i]))
            .collect();
        if o.evaluated != expected {
            problems.push(format!(
                "session {} evaluated {} rows, expected {}",
                o.session,
                o.evaluated.len(),
                expected.len()
            ));
        }
    }
    problems
}

/// Base-class accuracy per session and its drop from session 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingMetrics {
    pub base_accuracy: Vec<f64>,
    pub drop: Vec<f64>,
}

pub fn forgetting_metrics(run: &ProtocolRun) -> ForgettingMetrics {
    let base_accuracy: Vec<f64> = run.sessions.iter().map(|o| o.base_accuracy).collect();
    let first = base_accuracy.first().copied().unwrap_or(0.0);
    ForgettingMetrics {
        drop: base_accuracy.iter().map(|a| first - a).collect(),
        base_accuracy,
    }
}

/// Method toggles of an ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationFlags {
    /// Mixup/cutmix augmentation during pretraining.
    pub ag: bool,
    /// Orthogonality regularization during pretraining.
    pub or: bool,
    /// Metalearning with the multi-margin loss.
    pub mm: bool,
    /// Metalearning with cross-entropy.
    pub ce: bool,
    /// FCR finetuning in incremental sessions.
    pub ft: bool,
}

impl AblationFlags {
    /// Parses `AG+OR+MM` style lists; `none` or an empty string is no flags.
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = Self::default();
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(f);
        }
        for tok in s.split(['+', ' ']).filter(|t| !t.is_empty()) {
            match tok.to_ascii_uppercase().as_str() {
                "AG" => f.ag = true,
                "OR" => f.or = true,
                "MM" => f.mm = true,
                "CE" => f.ce = true,
                "FT" => f.ft = true,
                other => return Err(Error::InvalidConfig(format!("unknown ablation flag {other:?}"))),
            }
        }
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mm && self.ce {
            return Err(Error::ConflictingFlags(
                "MM and CE both select the metalearning objective".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.ag, "AG"), (self.or, "OR"), (self.mm, "MM"), (self.ce, "CE"), (self.ft, "FT")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }

    pub fn meta_objective(&self) -> Option<MetaObjective> {
        if self.mm {
            Some(MetaObjective::MultiMargin)
        } else if self.ce {
            Some(MetaObjective::CrossEntropy)
        } else {
            None
        }
    }
}

/// Everything needed to train and evaluate one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetup {
    pub arch: Architecture,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub quant: QuantSpec,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    /// Parameters after pretraining, before any metalearning.
    pub pretrained: ModelParams,
    pub pretrain: PretrainHistory,
    pub meta: Option<MetaHistory>,
}

/// Freshly initialized weights plus the seeds of the two training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub params: ModelParams,
    pub fcc: FccHead,
    pub pretrain_seed: u64,
    pub meta_seed: u64,
}

/// Draws, in order, the model weights, the classifier head and the stage
/// seeds from one generator seeded with `setup.seed`. Running the stages
/// separately with these seeds reproduces `train_model` exactly.
pub fn initial_state(setup: &TrainingSetup, base: &LabeledDataset) -> Result<InitialState> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let params = ModelParams::init(&setup.arch, &mut rng)?;
    let fcc = FccHead::init(class_index(base).len(), setup.arch.d_p, &mut rng)?;
    Ok(InitialState {
        params,
        fcc,
        pretrain_seed: rng.random(),
        meta_seed: rng.random(),
    })
}

/// Initializes, pretrains and (if a metalearning flag is set) metalearns a
/// model on the base session. All randomness derives from `setup.seed`.
pub fn train_model(setup: &TrainingSetup, base: &LabeledDataset, flags: AblationFlags) -> Result<TrainedModel> {
    flags.validate()?;
    let InitialState {
        mut params,
        mut fcc,
        pretrain_seed,
        meta_seed,
    } = initial_state(setup, base)?;
    let mut pcfg = setup.pretrain.clone();
    if !flags.ag {
        pcfg.loss.mix_probability = 0.0;
    }
    if !flags.or {
        pcfg.loss.lambda_ortho = 0.0;
    }
    let history = pretrain(&mut params, &mut fcc, base, &pcfg, pretrain_seed)?;
    let pretrained = params.clone();
    let meta = match flags.meta_objective() {
        Some(objective) => {
            let mcfg = MetaConfig {
                objective,
                ..setup.meta.clone()
            };
            Some(metalearn(&mut params, base, &mcfg, meta_seed)?)
        }
        None => None,
    };
    Ok(TrainedModel {
        params,
        pretrained,
        pretrain: history,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub report: SessionReport,
}

/// Trains and evaluates one configuration per row.
pub fn ablation_matrix(stream: &SessionStream, setup: &TrainingSetup, rows: &[AblationFlags]) -> Result<Vec<AblationRow>> {
    for f in rows {
        f.validate()?;
    }
    rows.iter()
        .map(|&flags| {
            let model = train_model(setup, &stream.base, flags)?;
            let options = ProtocolOptions {
                method: flags.label(),
                finetune: flags.ft.then(|| setup.finetune.clone()),
                ..ProtocolOptions::default()
            };
            let run = run_protocol(&model.params, stream, &setup.quant, &options)?;
            Ok(AblationRow {
                flags,
                report: run.report,
            })
        })
        .collect()
}

/// Generator settings for the synthetic image-like dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: u32,
    pub per_class: usize,
    pub side: usize,
    pub blobs_per_class: usize,
    /// Standard deviation of the per-sample blob displacement, in pixels.
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 18,
            per_class: 70,
            side: 16,
            blobs_per_class: 3,
            jitter: 1.0,
            noise: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn grid(&self) -> Grid {
        Grid {
            channels: 1,
            height: self.side,
            width: self.side,
        }
    }
}

struct Blob {
    y: f64,
    x: f64,
    sigma: f64,
    amplitude: f64,
}

/// Each class is a fixed mixture of Gaussian blobs on a square grid; samples
/// displace and rescale the blobs and add pixel noise.
pub fn synthetic_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<LabeledDataset> {
    if cfg.side == 0 || cfg.blobs_per_class == 0 || !(cfg.jitter >= 0.0) || !(cfg.noise >= 0.0) {
        return Err(Error::InvalidConfig("synthetic dataset parameters out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.side as f64;
    let classes: Vec<Vec<Blob>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.blobs_per_class)
                .map(|_| Blob {
                    y: rng.random_range(0.15 * side..0.85 * side),
                    x: rng.random_range(0.15 * side..0.85 * side),
                    sigma: rng.random_range(0.08 * side..0.2 * side),
                    amplitude: rng.random_range(0.5..1.0),
                })
                .collect()
        })
        .collect();
    let jitter = Normal::new(0.0, cfg.jitter).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut ds = LabeledDataset::new(cfg.side * cfg.side);
    for (c, blobs) in classes.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let placed: Vec<Blob> = blobs
                .iter()
                .map(|b| Blob {
                    y: b.y + jitter.sample(&mut rng),
                    x: b.x + jitter.sample(&mut rng),
                    sigma: b.sigma * rng.random_range(0.9..1.1),
                    amplitude: b.amplitude * rng.random_range(0.8..1.2),
                })
                .collect();
            let mut img = Vec::with_capacity(cfg.side * cfg.side);
            for r in 0..cfg.side {
                for col in 0..cfg.side {
                    let mut v = 0.0;
                    for b in &placed {
                        let d2 = (r as f64 - b.y).powi(2) + (col as f64 - b.x).powi(2);
                        v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    }
                    img.push(v + noise.sample(&mut rng));
                }
            }
            ds.push(img, c as u32)?;
        }
    }
    Ok(ds)
}

/// The default desk split: 10 base classes with 50 samples, four 2-way
/// 5-shot sessions, 20 test samples per class.
pub fn desk_split_config() -> SplitConfig {
    SplitConfig {
        base_classes: 10,
        sessions: 4,
        ways: 2,
        shots: 5,
        per_class_cap: Some(50),
        test_per_class: 20,
    }
}

/// Text manifest naming the files of a stream.
///
/// ```text
/// ways=2
/// shots=5
/// base=base.bin
/// session=s1.bin
/// session=s2.bin
/// test=test.bin
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct StreamManifest {
    pub base: PathBuf,
    pub sessions: Vec<PathBuf>,
    pub test: PathBuf,
    pub ways: usize,
    pub shots: usize,
}

impl StreamManifest {
    /// Parses a manifest; relative paths resolve against `dir`.
    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfig(format!("manifest: {m}"));
        let (mut base, mut test, mut ways, mut shots) = (None, None, None, None);
        let mut sessions = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("line {}: {k} must be an integer", n + 1)));
            match k {
                "base" => base = Some(dir.join(v)),
                "session" => sessions.push(dir.join(v)),
                "test" => test = Some(dir.join(v)),
                "ways" => ways = Some(num(v)?),
                "shots" => shots = Some(num(v)?),
                _ => return Err(bad(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        Ok(Self {
            base: base.ok_or_else(|| bad("missing base".into()))?,
            test: test.ok_or_else(|| bad("missing test".into()))?,
            ways: ways.ok_or_else(|| bad("missing ways".into()))?,
            shots: shots.ok_or_else(|| bad("missing shots".into()))?,
            sessions,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn load_stream(&self) -> Result<SessionStream> {
        let read = |p: &Path| load_dataset(p, DataFormat::from_path(p));
        Ok(SessionStream {
            base: read(&self.base)?,
            sessions: self.sessions.iter().map(|p| read(p)).collect::<Result<_>>()?,
            ways: self.ways,
            shots: self.shots,
            test: read(&self.test)?,
        })
    }
}

/// Writes every part of `stream` as raw f64 files plus `manifest.txt` into
/// `dir`, returning the manifest path.
pub fn write_stream(stream: &SessionStream, dir: &Path) -> Result<PathBuf> {
    let mut text = format!("ways={}\nshots={}\nbase=base.bin\n", stream.ways, stream.shots);
    save_dataset(&stream.base, &dir.join("base.bin"), DataFormat::RawBinary, DType::F64)?;
    for (i, s) in stream.sessions.iter().enumerate() {
        let name = format!("session{}.bin", i + 1);
        save_dataset(s, &dir.join(&name), DataFormat::RawBinary, DType::F64)?;
        writeln!(text, "session={name}").unwrap();
    }
    save_dataset(&stream.test, &dir.join("test.bin"), DataFormat::RawBinary, DType::F64)?;
    text.push_str("test=test.bin\n");
    let path = dir.join("manifest.txt");
    crate::io_util::write_file(&path, text.as_bytes())?;
    Ok(path)
}
