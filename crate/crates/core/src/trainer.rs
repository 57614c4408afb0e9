//! Sequential, buffer-free training over a list of datasets.
//!
//! Session `t` trains the student on dataset `t` only. From session 2 on, the
//! model that ended session `t-1` is frozen as the teacher; its logits and
//! bottleneck features on the student's (augmented) input drive the KL and
//! cosine distillation terms. The KL weight `α_t` is fixed per session from
//! the teacher's Dice on the incoming training split. After every session the
//! student is scored on the test split of every dataset, filling one row of the
//! train-test matrix.
//!
//! All sample reads go through [`DataAccess`], which records them so runs can
//! be audited for reads of earlier datasets' training data.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainToken, ModalityUniverse};
use crate::error::{ensure, Error, Result};
use crate::losses::{self, LossBreakdown, LossConfig, TeacherTerms};
use crate::metrics::{self, TrainTestMatrix};
use crate::optim::{Adam, AdamConfig};
use crate::params::checksum;
use crate::synthdata::{
    self, derive_seed, DatasetSpec, SyntheticDataset, VolumeSample, DEFAULT_FG_BIAS, DEFAULT_P_DROP,
};
use crate::tensor::{index3, voxel_count, Dims, FeatureMap};
use crate::unet::{input_from_sample, ModelConfig, MoeUNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Proposed,
    Naive,
    StaticKd,
}

/// Which part of the domain token reaches the gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenMode {
    #[serde(rename = "d")]
    Pathology,
    #[serde(rename = "m")]
    Modality,
    #[serde(rename = "d+m")]
    Full,
    /// Constant all-ones token: gating no longer depends on the input.
    #[serde(rename = "none")]
    Constant,
}

impl TokenMode {
    pub fn apply(self, token: &DomainToken, universe: &ModalityUniverse) -> Vec<f64> {
        let m = universe.m();
        let bits = token.as_f64();
        match self {
            TokenMode::Full => bits,
            TokenMode::Constant => vec![1.0; bits.len()],
            TokenMode::Pathology => bits.iter().enumerate().map(|(i, &b)| if i < m { 0.0 } else { b }).collect(),
            TokenMode::Modality => bits.iter().enumerate().map(|(i, &b)| if i < m { b } else { 0.0 }).collect(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TokenMode::Pathology => "d",
            TokenMode::Modality => "m",
            TokenMode::Full => "d+m",
            TokenMode::Constant => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub name: StrategyName,
    pub use_kld: bool,
    pub use_cosine: bool,
    pub token_mode: TokenMode,
    pub use_modality_drop: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_alpha: Option<f64>,
}

impl Strategy {
    pub fn proposed() -> Self {
        Self {
            name: StrategyName::Proposed,
            use_kld: true,
            use_cosine: true,
            token_mode: TokenMode::Full,
            use_modality_drop: true,
            static_alpha: None,
        }
    }

    /// Plain fine-tuning of a UNet whose gates see a constant token.
    pub fn naive() -> Self {
        Self {
            name: StrategyName::Naive,
            use_kld: false,
            use_cosine: false,
            token_mode: TokenMode::Constant,
            use_modality_drop: false,
            static_alpha: None,
        }
    }

    /// Response distillation with a fixed coefficient.
    pub fn static_kd(alpha: f64) -> Self {
        Self {
            name: StrategyName::StaticKd,
            use_kld: true,
            use_cosine: false,
            token_mode: TokenMode::Constant,
            use_modality_drop: false,
            static_alpha: Some(alpha),
        }
    }

    /// Distillation through the logits only; constant gating token.
    pub fn kld_only() -> Self {
        Self {
            use_cosine: false,
            token_mode: TokenMode::Constant,
            ..Self::proposed()
        }
    }

    /// Bottleneck feature distillation only; constant gating token.
    pub fn cosine_only() -> Self {
        Self {
            use_kld: false,
            token_mode: TokenMode::Constant,
            ..Self::proposed()
        }
    }

    /// Token-conditioned gating without any distillation.
    pub fn moe_only() -> Self {
        Self {
            use_kld: false,
            use_cosine: false,
            ..Self::proposed()
        }
    }

    pub fn without_modality_drop() -> Self {
        Self {
            use_modality_drop: false,
            ..Self::proposed()
        }
    }

    /// Named configurations accepted by [`Strategy::preset`].
    pub const PRESETS: [&'static str; 7] = [
        "proposed",
        "naive",
        "static_kd",
        "kld_only",
        "cosine_only",
        "moe_only",
        "no_modality_drop",
    ];

    /// `static_kd` uses `alpha_max` of the default loss config.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "proposed" => Self::proposed(),
            "naive" => Self::naive(),
            "static_kd" => Self::static_kd(LossConfig::default().alpha_max),
            "kld_only" => Self::kld_only(),
            "cosine_only" => Self::cosine_only(),
            "moe_only" => Self::moe_only(),
            "no_modality_drop" => Self::without_modality_drop(),
            other => {
                return Err(Error::validation(format!(
                    "unknown strategy {other:?}; expected one of {}",
                    Self::PRESETS.join(", ")
                )))
            }
        })
    }

    /// Name of the preset this strategy equals, if any.
    pub fn preset_name(&self) -> Option<&'static str> {
        Self::PRESETS
            .iter()
            .copied()
            .find(|n| Self::preset(n).map(|p| p == *self).unwrap_or(false))
    }

    pub fn validate(&self) -> Result<()> {
        match self.name {
            StrategyName::Naive => ensure!(
                !self.use_kld && !self.use_cosine,
                "naive strategy cannot use distillation terms"
            ),
            StrategyName::StaticKd => {
                ensure!(
                    self.static_alpha.is_some(),
                    "static_kd strategy requires static_alpha"
                );
                ensure!(
                    self.use_kld && !self.use_cosine,
                    "static_kd strategy uses the KL term only"
                );
            }
            StrategyName::Proposed => ensure!(
                self.static_alpha.is_none(),
                "proposed strategy derives alpha dynamically; static_alpha must be unset"
            ),
        }
        if let Some(a) = self.static_alpha {
            ensure!(a >= 0.0 && a.is_finite(), "static_alpha must be finite and >= 0");
        }
        Ok(())
    }

    pub fn uses_teacher(&self) -> bool {
        self.use_kld || self.use_cosine
    }

    /// Short human-readable tag, e.g. `proposed[kld+cos,d+m]`.
    pub fn label(&self) -> String {
        let name = match self.name {
            StrategyName::Proposed => "proposed",
            StrategyName::Naive => "naive",
            StrategyName::StaticKd => "static_kd",
        };
        let mut terms = Vec::new();
        if self.use_kld {
            terms.push("kld");
        }
        if self.use_cosine {
            terms.push("cos");
        }
        if terms.is_empty() {
            terms.push("task");
        }
        let drop = if self.use_modality_drop { "" } else { ",nodrop" };
        format!("{name}[{},{}{drop}]", terms.join("+"), self.token_mode.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub experts: usize,
    pub gate_init: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            experts: 4,
            gate_init: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_shape: Dims,
    pub eval_patch: Dims,
    pub eval_overlap: f64,
    pub p_drop: f64,
    pub fg_bias: f64,
    /// Random 90° rotations before modality drop.
    pub rotate: bool,
    pub model: ModelSpec,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            epochs: 30,
            batch_size: 4,
            patch_shape: [16, 16, 16],
            eval_patch: [16, 16, 16],
            eval_overlap: 0.5,
            p_drop: DEFAULT_P_DROP,
            fg_bias: DEFAULT_FG_BIAS,
            rotate: true,
            model: ModelSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub name: String,
    pub universe: ModalityUniverse,
    pub datasets: Vec<DatasetSpec>,
    pub strategy: Strategy,
    pub loss: LossConfig,
    pub trainer: TrainerConfig,
    pub seed: u64,
}

impl SequenceConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.universe.m(),
            out_channels: 2,
            widths: self.trainer.model.widths.clone(),
            experts: self.trainer.model.experts,
            token_len: self.universe.token_len(),
            gate_init: self.trainer.model.gate_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.universe.validate()?;
        ensure!(!self.datasets.is_empty(), "sequence needs at least one dataset");
        for d in &self.datasets {
            d.validate(&self.universe)?;
        }
        self.strategy.validate()?;
        self.loss.validate()?;
        let t = &self.trainer;
        ensure!(t.epochs >= 1, "trainer.epochs must be >= 1");
        ensure!(t.batch_size >= 1, "trainer.batch_size must be >= 1");
        ensure!((0.0..1.0).contains(&t.eval_overlap), "trainer.eval_overlap must lie in [0, 1)");
        ensure!((0.0..1.0).contains(&t.p_drop), "trainer.p_drop must lie in [0, 1)");
        ensure!((0.0..=1.0).contains(&t.fg_bias), "trainer.fg_bias must lie in [0, 1]");
        ensure!(t.optimizer.lr > 0.0, "trainer.optimizer.lr must be > 0");
        let mc = self.model_config();
        mc.validate()
            .map_err(|e| Error::validation(format!("trainer.model: {e}")))?;
        let mult = mc.spatial_multiple();
        for (what, p) in [("trainer.patch_shape", t.patch_shape), ("trainer.eval_patch", t.eval_patch)] {
            ensure!(
                p.iter().all(|&v| v >= 1 && v % mult == 0),
                "{what} {p:?} must be positive multiples of {mult}"
            );
        }
        for d in &self.datasets {
            ensure!(
                (0..3).all(|a| t.patch_shape[a] <= d.volume_shape[a]),
                "trainer.patch_shape {:?} exceeds volume {:?} of dataset {}",
                t.patch_shape,
                d.volume_shape,
                d.id
            );
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Audited data access
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    ShiftEstimate,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    /// 1-based session during which the read happened.
    pub session: usize,
    /// 0-based dataset index.
    pub dataset: usize,
    pub split: Split,
    pub phase: Phase,
    pub sample: usize,
}

impl AccessRecord {
    /// A read of an earlier dataset's training data, or any non-evaluation
    /// use of an earlier dataset.
    pub fn is_past_dataset_read(&self) -> bool {
        self.dataset + 1 < self.session && (self.split == Split::Train || self.phase != Phase::Eval)
    }
}

/// Read-only view of all datasets that logs every sample access.
pub struct DataAccess<'a> {
    datasets: &'a [SyntheticDataset],
    log: Mutex<Vec<AccessRecord>>,
}

impl<'a> DataAccess<'a> {
    pub fn new(datasets: &'a [SyntheticDataset]) -> Self {
        Self {
            datasets,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn len(&self, dataset: usize, split: Split) -> usize {
        let d = &self.datasets[dataset];
        match split {
            Split::Train => d.train.len(),
            Split::Test => d.test.len(),
        }
    }

    pub fn num_datasets(&self) -> usize {
        self.datasets.len()
    }

    pub fn spec(&self, dataset: usize) -> &DatasetSpec {
        &self.datasets[dataset].spec
    }

    pub fn read(&self, session: usize, dataset: usize, split: Split, phase: Phase, sample: usize) -> &'a VolumeSample {
        self.log.lock().expect("access log poisoned").push(AccessRecord {
            session,
            dataset,
            split,
            phase,
            sample,
        });
        let d = &self.datasets[dataset];
        match split {
            Split::Train => &d.train[sample],
            Split::Test => &d.test[sample],
        }
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn past_dataset_reads(&self) -> Vec<AccessRecord> {
        self.records().into_iter().filter(|r| r.is_past_dataset_read()).collect()
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + patch < len).collect();
    starts.push(len - patch);
    starts.dedup();
    starts
}

/// Averaged foreground probability from overlapping tiles.
pub fn sliding_window_probs(
    net: &MoeUNet,
    params: &[f64],
    input: &FeatureMap,
    token: &[f64],
    patch: Dims,
    overlap: f64,
) -> Result<Vec<f64>> {
    ensure!((0.0..1.0).contains(&overlap), "overlap must lie in [0, 1)");
    let dims = input.dims;
    let padded: Dims = std::array::from_fn(|a| dims[a].max(patch[a]));
    let stride: Dims = std::array::from_fn(|a| ((patch[a] as f64 * (1.0 - overlap)).floor() as usize).max(1));
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| window_starts(padded[a], patch[a], stride[a]));
    let n = voxel_count(dims);
    let pn = voxel_count(patch);
    let mut acc = vec![0.0; n];
    let mut count = vec![0u32; n];
    let mut tile = FeatureMap::zeros(input.channels, patch);
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                tile.data.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..input.channels {
                    let src = input.channel(c);
                    let dst = &mut tile.data[c * pn..(c + 1) * pn];
                    for z in 0..patch[0] {
                        for y in 0..patch[1] {
                            for x in 0..patch[2] {
                                let (sz, sy, sx) = (z0 + z, y0 + y, x0 + x);
                                if sz < dims[0] && sy < dims[1] && sx < dims[2] {
                                    dst[index3(patch, z, y, x)] = src[index3(dims, sz, sy, sx)];
                                }
                            }
                        }
                    }
                }
                let out = net.forward(params, &tile, token)?;
                let prob = crate::nn::foreground_probability(&out.logits);
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        for x in 0..patch[2] {
                            let (sz, sy, sx) = (z0 + z, y0 + y, x0 + x);
                            if sz < dims[0] && sy < dims[1] && sx < dims[2] {
                                let i = index3(dims, sz, sy, sx);
                                acc[i] += prob[index3(patch, z, y, x)];
                                count[i] += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(acc.iter().zip(&count).map(|(a, &c)| a / c as f64).collect())
}

/// Tiled inference, thresholding the averaged foreground probability at 0.5.
pub fn sliding_window_infer(
    net: &MoeUNet,
    params: &[f64],
    sample: &VolumeSample,
    token: &[f64],
    patch: Dims,
    overlap: f64,
) -> Result<Vec<u8>> {
    let probs = sliding_window_probs(net, params, &input_from_sample(sample), token, patch, overlap)?;
    Ok(probs.iter().map(|&p| (p > 0.5) as u8).collect())
}

/// Mean DSC of `params` over one split of one dataset.
#[allow(clippy::too_many_arguments)]
pub fn mean_dsc(
    net: &MoeUNet,
    params: &[f64],
    access: &DataAccess<'_>,
    universe: &ModalityUniverse,
    token_mode: TokenMode,
    session: usize,
    dataset: usize,
    split: Split,
    phase: Phase,
    patch: Dims,
    overlap: f64,
) -> Result<f64> {
    let n = access.len(dataset, split);
    let scores = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = access.read(session, dataset, split, phase, i);
            let token = token_mode.apply(&s.token, universe);
            let pred = sliding_window_infer(net, params, s, &token, patch, overlap)?;
            metrics::dsc(&pred, &s.mask)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Teacher Dice on the incoming dataset's training split (no augmentation).
pub fn estimate_shift(
    net: &MoeUNet,
    teacher: &[f64],
    access: &DataAccess<'_>,
    cfg: &SequenceConfig,
    session: usize,
    dataset: usize,
) -> Result<f64> {
    mean_dsc(
        net,
        teacher,
        access,
        &cfg.universe,
        cfg.strategy.token_mode,
        session,
        dataset,
        Split::Train,
        Phase::ShiftEstimate,
        cfg.trainer.eval_patch,
        cfg.trainer.eval_overlap,
    )
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SessionState {
    /// Index of the session about to run (1-based).
    pub session_index: usize,
    pub student: Vec<f64>,
    /// Frozen copy of the student that ended the previous session.
    pub teacher: Option<Vec<f64>>,
    /// Checksums of the student at the end of each completed session.
    pub checkpoints: Vec<String>,
}

impl SessionState {
    pub fn new(student: Vec<f64>) -> Self {
        Self {
            session_index: 1,
            student,
            teacher: None,
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub session: usize,
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct SessionReport {
    pub state: SessionState,
    pub log: Vec<StepLog>,
    pub alpha_t: Option<f64>,
    pub dsc_shift: Option<f64>,
    pub teacher_checksum_before: Option<String>,
    pub teacher_checksum_after: Option<String>,
}

fn prepare_sample<R: Rng>(sample: &VolumeSample, cfg: &TrainerConfig, strategy: &Strategy, rng: &mut R) -> Result<VolumeSample> {
    let mut s = synthdata::sample_patch(sample, cfg.patch_shape, rng, cfg.fg_bias)?;
    if cfg.rotate {
        s = synthdata::random_rotate90(&s, rng);
    }
    if strategy.use_modality_drop {
        s = synthdata::drop_modalities(&s, cfg.p_drop, rng);
    }
    Ok(s)
}

struct StepContext<'a> {
    net: &'a MoeUNet,
    student: &'a [f64],
    teacher: Option<&'a [f64]>,
    strategy: &'a Strategy,
    loss: &'a LossConfig,
    alpha: f64,
}

impl StepContext<'_> {
    fn sample_gradient(&self, sample: &VolumeSample, token: &[f64]) -> Result<(LossBreakdown, Vec<f64>)> {
        let input = input_from_sample(sample);
        let (out, cache) = self.net.forward_train(self.student, &input, token)?;
        let teacher_out = match self.teacher {
            Some(tp) if self.strategy.uses_teacher() => Some(self.net.forward(tp, &input, token)?),
            _ => None,
        };
        let mut cfg = self.loss.clone();
        if !self.strategy.use_cosine {
            cfg.beta = 0.0;
        }
        let alpha = if self.strategy.use_kld { self.alpha } else { 0.0 };
        let terms = teacher_out.as_ref().map(|t| TeacherTerms {
            teacher_logits: &t.logits,
            student_features: &out.bottleneck,
            teacher_features: &t.bottleneck,
        });
        let (mut breakdown, grads) = losses::total_loss_grad(&out.logits, &sample.mask, terms, alpha, &cfg)?;
        // disabled terms are reported as zero
        if !self.strategy.use_cosine {
            breakdown.cosine = 0.0;
        }
        if !self.strategy.use_kld {
            breakdown.kld = 0.0;
        }
        let mut g = vec![0.0; self.student.len()];
        self.net
            .backward(self.student, cache, &grads.logits, grads.features.as_deref(), &mut g);
        Ok((breakdown, g))
    }
}

/// Runs one session on `dataset` and returns the updated state.
pub fn train_session(
    net: &MoeUNet,
    state: SessionState,
    access: &DataAccess<'_>,
    dataset: usize,
    cfg: &SequenceConfig,
) -> Result<SessionReport> {
    let session = state.session_index;
    ensure!(
        state.teacher.is_some() == (session >= 2),
        "teacher must be present exactly from session 2 on"
    );
    let strategy = &cfg.strategy;
    let tc = &cfg.trainer;

    let teacher_checksum_before = state.teacher.as_deref().map(checksum);
    let (alpha_t, dsc_shift) = match (&state.teacher, strategy.use_kld) {
        (Some(_), true) => match strategy.static_alpha {
            Some(a) => (Some(a), None),
            None => {
                let shift = estimate_shift(net, state.teacher.as_deref().expect("teacher"), access, cfg, session, dataset)?;
                let a = losses::dynamic_alpha(shift, cfg.loss.alpha_min, cfg.loss.alpha_max)?;
                (Some(a), Some(shift))
            }
        },
        _ => (None, None),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + session as u64));
    let mut student = state.student;
    let mut opt = Adam::new(tc.optimizer.clone(), student.len());
    let mut log = Vec::new();
    let n = access.len(dataset, Split::Train);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            let prepared = batch
                .iter()
                .map(|&i| {
                    let s = access.read(session, dataset, Split::Train, Phase::Train, i);
                    let s = prepare_sample(s, tc, strategy, &mut rng)?;
                    let token = strategy.token_mode.apply(&s.token, &cfg.universe);
                    Ok((s, token))
                })
                .collect::<Result<Vec<_>>>()?;
            let ctx = StepContext {
                net,
                student: &student,
                teacher: state.teacher.as_deref(),
                strategy,
                loss: &cfg.loss,
                alpha: alpha_t.unwrap_or(0.0),
            };
            let results = prepared
                .par_iter()
                .map(|(s, t)| ctx.sample_gradient(s, t))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut grads = vec![0.0; student.len()];
            let mut mean = LossBreakdown::default();
            for (b, g) in &results {
                for (acc, v) in grads.iter_mut().zip(g) {
                    *acc += v * scale;
                }
                mean.task_dice += b.task_dice * scale;
                mean.task_ce += b.task_ce * scale;
                mean.kld += b.kld * scale;
                mean.cosine += b.cosine * scale;
                mean.total += b.total * scale;
            }
            mean.alpha_t = alpha_t.unwrap_or(0.0);
            if !mean.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    session,
                    epoch,
                    step,
                    detail: format!("non-finite loss or gradient (total = {})", mean.total),
                });
            }
            opt.step(&mut student, &grads);
            log.push(StepLog {
                session,
                epoch,
                step,
                loss: mean,
            });
            step += 1;
        }
    }

    let teacher_checksum_after = state.teacher.as_deref().map(checksum);
    ensure!(
        teacher_checksum_before == teacher_checksum_after,
        "teacher parameters changed during session {session}"
    );
    let mut checkpoints = state.checkpoints;
    checkpoints.push(checksum(&student));
    let next = SessionState {
        session_index: session + 1,
        teacher: Some(student.clone()),
        student,
        checkpoints,
    };
    Ok(SessionReport {
        state: next,
        log,
        alpha_t,
        dsc_shift,
        teacher_checksum_before,
        teacher_checksum_after,
    })
}

// ---------------------------------------------------------------------------
// Whole sequences
// ---------------------------------------------------------------------------

/// Contents of `matrix.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFile {
    pub datasets: Vec<String>,
    /// Completed rows only; a full run has one row per dataset.
    pub dsc: Vec<Vec<f64>>,
    pub alpha_t: Vec<Option<f64>>,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: MatrixFile,
    pub logs: Vec<Vec<StepLog>>,
    pub dsc_shift: Vec<Option<f64>>,
    pub access_log: Vec<AccessRecord>,
    /// (before, after) teacher checksum per session.
    pub teacher_checksums: Vec<(Option<String>, Option<String>)>,
    pub final_state: Option<SessionState>,
    pub run_dir: Option<PathBuf>,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.matrix.failure.is_none() && self.matrix.dsc.len() == self.matrix.datasets.len()
    }

    pub fn train_test_matrix(&self) -> Result<TrainTestMatrix> {
        ensure!(self.is_complete(), "run did not complete");
        TrainTestMatrix::new(self.matrix.datasets.clone(), self.matrix.dsc.clone())
    }

    pub fn past_dataset_reads(&self) -> Vec<AccessRecord> {
        self.access_log.iter().copied().filter(|r| r.is_past_dataset_read()).collect()
    }
}

/// z-scores every sample of every dataset.
pub fn normalize_datasets(datasets: &[SyntheticDataset]) -> Vec<SyntheticDataset> {
    datasets
        .iter()
        .map(|d| SyntheticDataset {
            spec: d.spec.clone(),
            train: d.train.iter().map(|s| synthdata::znormalize(s).0).collect(),
            test: d.test.iter().map(|s| synthdata::znormalize(s).0).collect(),
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_matrix(dir: &Path, m: &MatrixFile) -> Result<()> {
    write_text(&dir.join("matrix.json"), &serde_json::to_string_pretty(m)?)
}

/// Contents of `audit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFile {
    pub total_reads: usize,
    pub past_dataset_reads: Vec<AccessRecord>,
}

fn write_audit(dir: &Path, access: &DataAccess<'_>) -> Result<()> {
    let audit = AuditFile {
        total_reads: access.records().len(),
        past_dataset_reads: access.past_dataset_reads(),
    };
    write_text(&dir.join("audit.json"), &serde_json::to_string_pretty(&audit)?)
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in log {
        let line = serde_json::to_string(rec)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains through `datasets` in order, evaluating on every test split after
/// each session. `datasets` must match `cfg.datasets` one-to-one and are
/// z-normalized here. When `run_dir` is given, the config, per-session
/// checkpoints and logs, and `matrix.json` are written there.
///
/// A diverged session does not return an error: the outcome carries the
/// completed rows and a failure marker.
pub fn run_sequence(cfg: &SequenceConfig, datasets: &[SyntheticDataset], run_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    ensure!(
        datasets.len() == cfg.datasets.len(),
        "got {} datasets for a sequence of {}",
        datasets.len(),
        cfg.datasets.len()
    );
    for (d, s) in datasets.iter().zip(&cfg.datasets) {
        ensure!(d.spec.id == s.id, "dataset {} supplied where {} was expected", d.spec.id, s.id);
    }
    let datasets = normalize_datasets(datasets);
    let access = DataAccess::new(&datasets);
    let net = MoeUNet::new(cfg.model_config())?;
    let p = datasets.len();

    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("config.json"), &serde_json::to_string_pretty(cfg)?)?;
    }

    let mut matrix = MatrixFile {
        datasets: cfg.datasets.iter().map(|d| d.id.clone()).collect(),
        dsc: Vec::new(),
        alpha_t: Vec::new(),
        strategy: cfg.strategy.clone(),
        failure: None,
    };
    let mut logs = Vec::new();
    let mut shifts = Vec::new();
    let mut teacher_checksums = Vec::new();
    let mut state = Some(SessionState::new(net.init_params(derive_seed(cfg.seed, 7))));

    for t in 0..p {
        let session = t + 1;
        let report = match train_session(&net, state.take().expect("state"), &access, t, cfg) {
            Ok(r) => r,
            Err(e) => {
                log::error!("session {session} aborted: {e}");
                matrix.failure = Some(format!("session {session}: {e}"));
                if let Some(dir) = run_dir {
                    write_matrix(dir, &matrix)?;
                    write_audit(dir, &access)?;
                }
                return Ok(RunOutcome {
                    matrix,
                    logs,
                    dsc_shift: shifts,
                    access_log: access.records(),
                    teacher_checksums,
                    final_state: None,
                    run_dir: run_dir.map(Path::to_path_buf),
                });
            }
        };
        let row = (0..p)
            .map(|j| {
                mean_dsc(
                    &net,
                    &report.state.student,
                    &access,
                    &cfg.universe,
                    cfg.strategy.token_mode,
                    session,
                    j,
                    Split::Test,
                    Phase::Eval,
                    cfg.trainer.eval_patch,
                    cfg.trainer.eval_overlap,
                )
            })
            .collect::<Result<Vec<f64>>>()?;
        log::info!(
            "session {session}/{p} [{}]: alpha_t={:?} row={:?}",
            cfg.strategy.label(),
            report.alpha_t,
            row
        );
        if let Some(dir) = run_dir {
            let sdir = dir.join(format!("session_{session}"));
            fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
            net.save_checkpoint(&report.state.student, &sdir.join("checkpoint.safetensors"))?;
            write_log(&sdir.join("log.jsonl"), &report.log)?;
        }
        matrix.dsc.push(row);
        matrix.alpha_t.push(report.alpha_t);
        shifts.push(report.dsc_shift);
        teacher_checksums.push((report.teacher_checksum_before, report.teacher_checksum_after));
        logs.push(report.log);
        state = Some(report.state);
    }

    if let Some(dir) = run_dir {
        write_matrix(dir, &matrix)?;
        write_audit(dir, &access)?;
        if p >= 2 {
            let tm = TrainTestMatrix::new(matrix.datasets.clone(), matrix.dsc.clone())?;
            metrics::write_metrics(&dir.join("metrics.json"), &tm.summary()?)?;
            write_text(&dir.join("matrix.csv"), &tm.to_csv())?;
        }
    }
    Ok(RunOutcome {
        matrix,
        logs,
        dsc_shift: shifts,
        access_log: access.records(),
        teacher_checksums,
        final_state: state,
        run_dir: run_dir.map(Path::to_path_buf),
    })
}

/// Generates every dataset of the sequence in memory.
pub fn generate_all(cfg: &SequenceConfig) -> Result<Vec<SyntheticDataset>> {
    cfg.datasets
        .iter()
        .map(|d| synthdata::generate_dataset(d, &cfg.universe))
        .collect()
}
