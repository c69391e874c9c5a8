//! The sequential training protocol: teacher synthesis, Bernoulli data
//! mixing, per-distribution optimization with early stopping, and the
//! teacher swap with weight transfer and discrete-latent growth.
//!
//! Five methods share the loop. `lifelong` trains on a real/replay mixture
//! with the consistency and information regularizers and grows the discrete
//! latent by one slot per hand-off. `ewc` keeps a fixed latent and anchors to
//! the previous model through a Fisher-weighted quadratic penalty. `vanilla`
//! has no protection, `full` trains once on everything, and `upto` retrains
//! from scratch on the union seen so far.

use crate::data::{accumulate_test, DistributionSequence, ImageDataset, Split};
use crate::distributions::Direction;
use crate::error::{Error, Result};
use crate::metrics::{
    feature_stats, frechet_distance, log_frechet, negative_test_elbo, FeatureMode,
};
use crate::networks::{decode_batch, init_model, transfer_weights, ArchSpec, ModelState};
use crate::objective::{
    estimate_fisher_diag, ewc_total, lifelong_total, BatchNoise, FisherDiag, LossTerms,
    ObjectiveConfig,
};
use crate::optim::AdamState;
use crate::seeds;
use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lifelong,
    Ewc,
    Vanilla,
    Full,
    Upto,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Lifelong => "lifelong",
            Method::Ewc => "ewc",
            Method::Vanilla => "vanilla",
            Method::Full => "full",
            Method::Upto => "upto",
        }
    }
}

/// Exponential relaxation-temperature schedule with a floor:
/// `tau(t) = max(tau_min, tau0 * exp(-decay * t))`.
#[derive(Debug, Clone, Copy)]
pub struct TauSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule {
            tau0: 1.0,
            tau_min: 0.5,
            decay: 3e-5,
        }
    }
}

impl TauSchedule {
    pub fn at(&self, step: u64) -> f64 {
        (self.tau0 * (-self.decay * step as f64).exp()).max(self.tau_min)
    }
}

/// Everything the training loop needs to know.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    /// Information-gain weight (lifelong objective only).
    pub lambda: f64,
    /// EWC penalty weight.
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping: epochs without improvement before giving up.
    pub patience: usize,
    /// Early stopping: improvement threshold in nats.
    pub min_delta: f64,
    pub tau_schedule: TauSchedule,
    pub kl_direction: Direction,
    pub include_continuous_consistency: bool,
    /// Master switch for the posterior consistency regularizer (ablations).
    pub consistency: bool,
    /// Reconstruction-space consistency regularizer (ablations, hurts).
    pub recon_consistency: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Lifelong,
            lambda: 0.01,
            gamma: 50.0,
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 50,
            patience: 10,
            min_delta: 1e-3,
            tau_schedule: TauSchedule::default(),
            kl_direction: Direction::Reverse,
            include_continuous_consistency: false,
            consistency: true,
            recon_consistency: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::arg("config", "lambda and gamma must be nonnegative"));
        }
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::arg(
                "config",
                "learning_rate and batch_size must be positive",
            ));
        }
        Ok(())
    }

    fn objective(&self, tau: f64) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            tau,
            kl_direction: self.kl_direction,
            include_continuous_consistency: self.include_continuous_consistency,
            consistency_enabled: self.consistency,
            recon_consistency: self.recon_consistency,
        }
    }
}

/// Mutable state of one sequential run.
#[derive(Debug, Clone)]
pub struct LifelongState {
    pub student: ModelState,
    /// Frozen previous model; present iff at least one distribution finished.
    pub teacher: Option<ModelState>,
    /// Count of completed distributions.
    pub distributions_seen: usize,
    pub optimizer: AdamState,
    /// Fisher estimate anchored to the current teacher (EWC method).
    pub fisher: Option<FisherDiag>,
    /// Root seed followed by every derived seed consumed so far.
    pub seed_lineage: Vec<u64>,
}

impl LifelongState {
    pub fn new(student: ModelState, root_seed: u64) -> Self {
        let n = student.param_count();
        LifelongState {
            student,
            teacher: None,
            distributions_seen: 0,
            optimizer: AdamState::new(n),
            fisher: None,
            seed_lineage: vec![root_seed],
        }
    }
}

/// Probability of drawing a real current-distribution sample after `k`
/// completed distributions: `1 / (k + 1)`.
pub fn mixing_ratio(k: usize) -> f64 {
    1.0 / (k as f64 + 1.0)
}

/// Replay batch synthesized by a frozen teacher, tagged with the discrete
/// code each sample was generated from.
#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    pub images: Array2<f64>,
    pub source: Vec<usize>,
}

/// Generate `n` replay samples: cycle the hard one-hot discrete code over the
/// `k` seen distributions (so code `d` contributes `floor(n/k)` samples plus
/// one more when `d < n mod k`), draw fresh standard-normal continuous codes,
/// decode, and emit the decoder's Bernoulli mean.
pub fn teacher_generate(
    teacher: &ModelState,
    k: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticBatch> {
    if k == 0 {
        return Err(Error::State(
            "cannot generate replay before any distribution was learned".into(),
        ));
    }
    if k > teacher.arch.discrete_dim {
        return Err(Error::arg(
            "k",
            format!(
                "{k} distributions exceed the teacher's discrete capacity {}",
                teacher.arch.discrete_dim
            ),
        ));
    }
    let c = teacher.arch.continuous_dim;
    let j = teacher.arch.discrete_dim;
    let mut z = Array2::zeros((n, c + j));
    let mut source = Vec::with_capacity(n);
    for i in 0..n {
        let d = i % k;
        source.push(d);
        for kk in 0..c {
            z[[i, kk]] = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        z[[i, c + d]] = 1.0;
    }
    let logits = decode_batch(teacher, &z)?;
    let images = logits.mapv(|l| {
        if l >= 0.0 {
            1.0 / (1.0 + (-l).exp())
        } else {
            let e = l.exp();
            e / (1.0 + e)
        }
    });
    Ok(SyntheticBatch { images, source })
}

/// Provenance of one slot in a mixed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleTag {
    Real,
    /// Synthetic, tagged with the source distribution of the replay sample.
    Synthetic(usize),
}

/// A training batch assembled from real and replayed samples.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub images: Array2<f64>,
    pub tags: Vec<SampleTag>,
}

impl MixedBatch {
    /// Rows tagged real and rows tagged synthetic, as separate arrays.
    pub fn partition(&self) -> (Array2<f64>, Array2<f64>) {
        let dim = self.images.ncols();
        let real_idx: Vec<usize> = self
            .tags
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, SampleTag::Real))
            .map(|(i, _)| i)
            .collect();
        let synth_idx: Vec<usize> = self
            .tags
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, SampleTag::Synthetic(_)))
            .map(|(i, _)| i)
            .collect();
        let gather = |idx: &[usize]| {
            Array2::from_shape_fn((idx.len(), dim), |(i, jx)| self.images[[idx[i], jx]])
        };
        (gather(&real_idx), gather(&synth_idx))
    }
}

/// Fill each output slot with a real sample with probability `pi`, otherwise
/// a teacher sample; both pools are consumed in order without replacement
/// until one empties, after which that pool is drawn with replacement.
pub fn mix_minibatch(
    real_batch: &Array2<f64>,
    teacher_batch: Option<&SyntheticBatch>,
    pi: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedBatch> {
    let n = real_batch.nrows();
    if n == 0 {
        return Err(Error::arg("real_batch", "must be nonempty"));
    }
    if pi < 1.0 && teacher_batch.map_or(true, |t| t.images.nrows() == 0) {
        return Err(Error::arg(
            "teacher_batch",
            "must be nonempty when pi < 1",
        ));
    }
    let dim = real_batch.ncols();
    let mut images = Array2::zeros((n, dim));
    let mut tags = Vec::with_capacity(n);
    let mut real_cursor = 0usize;
    let mut synth_cursor = 0usize;
    for slot in 0..n {
        let take_real = rng.random::<f64>() < pi;
        if take_real {
            let idx = if real_cursor < n {
                real_cursor += 1;
                real_cursor - 1
            } else {
                rng.random_range(0..n)
            };
            images.row_mut(slot).assign(&real_batch.row(idx));
            tags.push(SampleTag::Real);
        } else {
            let t = teacher_batch.expect("checked above");
            let len = t.images.nrows();
            let idx = if synth_cursor < len {
                synth_cursor += 1;
                synth_cursor - 1
            } else {
                rng.random_range(0..len)
            };
            images.row_mut(slot).assign(&t.images.row(idx));
            tags.push(SampleTag::Synthetic(t.source[idx]));
        }
    }
    Ok(MixedBatch { images, tags })
}

/// One epoch's summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss terms across the epoch's batches.
    pub train_terms: LossTerms,
    pub val_neg_elbo: f64,
    pub tau: f64,
}

fn mean_terms(acc: &[LossTerms]) -> LossTerms {
    let n = acc.len().max(1) as f64;
    let mut out = LossTerms::default();
    for t in acc {
        out.recon_nll += t.recon_nll / n;
        out.kl_continuous += t.kl_continuous / n;
        out.kl_discrete += t.kl_discrete / n;
        out.consistency += t.consistency / n;
        out.info_gain_bound += t.info_gain_bound / n;
        out.ewc_penalty += t.ewc_penalty / n;
        out.total += t.total / n;
    }
    out
}

/// Train the student on one distribution with epoch-level early stopping,
/// restoring the best-validation parameters. Returns the epoch history.
pub fn train_distribution(
    state: &mut LifelongState,
    train_set: &ImageDataset,
    val_set: &ImageDataset,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("train_set", "must be nonempty"));
    }
    if config.max_epochs == 0 {
        return Ok(Vec::new());
    }
    let root = state.seed_lineage[0];
    let dist_seed = seeds::derive2(root, 0xD157, state.seed_lineage.len() as u64);
    state.seed_lineage.push(dist_seed);

    let k = state.distributions_seen;
    let replay_active = config.method == Method::Lifelong && k >= 1;
    let ewc_active = config.method == Method::Ewc && k >= 1 && config.gamma > 0.0;
    let arch = state.student.arch;

    // Fixed validation pool: real validation images plus, for lifelong with a
    // teacher, k replay samples per real one, mirroring the training mixture.
    let val_images = if replay_active && !val_set.is_empty() {
        let teacher = state.teacher.as_ref().expect("teacher present when k >= 1");
        let mut grng = ChaCha8Rng::seed_from_u64(seeds::derive(dist_seed, 0x56414C));
        let synth = teacher_generate(teacher, k, k * val_set.len(), &mut grng)?;
        concatenate![Axis(0), val_set.images.view(), synth.images.view()]
    } else {
        val_set.images.clone()
    };
    let val_eval_seed = seeds::derive(dist_seed, 0x5645);

    let n_train = train_set.len();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Vec<f64> = state.student.flatten();
    let mut stale = 0usize;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut srng = ChaCha8Rng::seed_from_u64(seeds::derive2(dist_seed, 0x53, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = srng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut grng = ChaCha8Rng::seed_from_u64(seeds::derive2(dist_seed, 0x47, epoch as u64));
        let mut mrng = ChaCha8Rng::seed_from_u64(seeds::derive2(dist_seed, 0x4D, epoch as u64));
        let mut nrng = ChaCha8Rng::seed_from_u64(seeds::derive2(dist_seed, 0x4E, epoch as u64));

        let mut epoch_terms = Vec::new();
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let mb = train_set.subset(chunk, Split::Train);
            let tau = config.tau_schedule.at(state.optimizer.step);
            let noise = BatchNoise::draw(
                &mut nrng,
                chunk.len(),
                arch.continuous_dim,
                arch.discrete_dim,
            );

            let (terms, grads) = match config.method {
                Method::Lifelong if replay_active => {
                    let teacher = state.teacher.as_ref().expect("teacher present");
                    let synth = teacher_generate(teacher, k, chunk.len(), &mut grng)?;
                    let mixed =
                        mix_minibatch(&mb.images, Some(&synth), mixing_ratio(k), &mut mrng)?;
                    let (real_part, synth_part) = mixed.partition();
                    let synth_opt = (synth_part.nrows() > 0).then_some(&synth_part);
                    lifelong_total(
                        &real_part,
                        synth_opt,
                        &state.student,
                        Some(teacher),
                        &config.objective(tau),
                        &noise,
                        true,
                    )?
                }
                Method::Lifelong => lifelong_total(
                    &mb.images,
                    None,
                    &state.student,
                    None,
                    &config.objective(tau),
                    &noise,
                    true,
                )?,
                Method::Ewc => ewc_total(
                    &mb.images,
                    &state.student,
                    state.teacher.as_ref(),
                    state.fisher.as_ref(),
                    if ewc_active { config.gamma } else { 0.0 },
                    tau,
                    &noise,
                    true,
                )?,
                Method::Vanilla | Method::Full | Method::Upto => {
                    let cfg = ObjectiveConfig {
                        lambda: 0.0,
                        tau,
                        consistency_enabled: false,
                        ..ObjectiveConfig::default()
                    };
                    lifelong_total(&mb.images, None, &state.student, None, &cfg, &noise, true)?
                }
            };
            if !terms.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}: {terms:?}"
                )));
            }
            let grads = grads.expect("gradients requested");
            let mut params = state.student.flatten();
            state
                .optimizer
                .update(&mut params, &grads, config.learning_rate);
            state.student.assign_flat(&params)?;
            epoch_terms.push(terms);
        }

        let tau_min = config.tau_schedule.tau_min;
        let val_neg_elbo = negative_test_elbo(&state.student, &val_images, 1, val_eval_seed, tau_min)?;
        history.push(EpochRecord {
            epoch,
            train_terms: mean_terms(&epoch_terms),
            val_neg_elbo,
            tau: config.tau_schedule.at(state.optimizer.step),
        });

        if best_val - val_neg_elbo > config.min_delta {
            best_val = val_neg_elbo;
            best_params = state.student.flatten();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    state.student.assign_flat(&best_params)?;
    Ok(history)
}

/// Freeze the student as the new teacher, bump the distribution count, and
/// instantiate the next student via weight transfer (optionally growing the
/// discrete latent by one slot). Optimizer moments reset to zero.
pub fn on_distribution_shift(
    state: &mut LifelongState,
    grow_discrete: bool,
    seed: u64,
) -> Result<()> {
    let teacher = state.student.clone();
    let new_dim = teacher.arch.discrete_dim + usize::from(grow_discrete);
    let new_arch = teacher.arch.with_discrete_dim(new_dim);
    state.student = transfer_weights(&teacher, &new_arch, seed)?;
    state.teacher = Some(teacher);
    state.distributions_seen += 1;
    state.optimizer.reset(state.student.param_count());
    state.seed_lineage.push(seed);
    Ok(())
}

/// How a sequence run evaluates each step.
pub struct EvalContext<'a> {
    pub feature_mode: FeatureMode<'a>,
    /// Monte-Carlo draws for the negative test ELBO.
    pub n_mc: usize,
    /// Generated-sample count per Frechet evaluation.
    pub frechet_samples: usize,
    /// Cap on accumulated-test rows used for feature statistics.
    pub test_cap: usize,
    pub eval_seed: u64,
}

/// Per-distribution evaluation row.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub distribution_index: usize,
    pub neg_test_elbo: f64,
    pub frechet: f64,
    pub log_frechet: f64,
    pub epochs_to_stop: usize,
    pub loss_breakdown: LossTerms,
    /// Wall time spent training and evaluating this step; never part of
    /// determinism comparisons.
    pub wall_seconds: f64,
}

impl StepRecord {
    /// Everything except `wall_seconds`, for determinism checks.
    pub fn deterministic_view(&self) -> (usize, f64, f64, f64, usize, LossTerms) {
        (
            self.distribution_index,
            self.neg_test_elbo,
            self.frechet,
            self.log_frechet,
            self.epochs_to_stop,
            self.loss_breakdown,
        )
    }
}

fn union_datasets(parts: &[&ImageDataset], split: Split) -> Result<ImageDataset> {
    let views: Vec<_> = parts.iter().map(|d| d.images.view()).collect();
    let images = concatenate(Axis(0), &views).expect("consistent dims");
    let labels = if parts.iter().all(|d| d.labels.is_some()) {
        Some(
            parts
                .iter()
                .flat_map(|d| d.labels.as_ref().unwrap().iter().copied())
                .collect(),
        )
    } else {
        None
    };
    let tag = parts
        .iter()
        .map(|d| d.source_tag.as_str())
        .collect::<Vec<_>>()
        .join(",");
    ImageDataset::new(images, labels, split, tag)
}

fn evaluate_step(
    model: &ModelState,
    seq: &DistributionSequence,
    step: usize,
    config: &TrainConfig,
    eval: &EvalContext,
) -> Result<(f64, f64, f64)> {
    let accum = accumulate_test(seq, step + 1)?;
    let n_rows = accum.len().min(eval.test_cap);
    let test_images = accum.images.slice(ndarray::s![..n_rows, ..]).to_owned();
    let tau_min = config.tau_schedule.tau_min;
    let neg_elbo = negative_test_elbo(
        model,
        &test_images,
        eval.n_mc,
        seeds::derive2(eval.eval_seed, 0x4E45, step as u64),
        tau_min,
    )?;

    let mut grng = ChaCha8Rng::seed_from_u64(seeds::derive2(eval.eval_seed, 0x4652, step as u64));
    let generated = teacher_generate(
        model,
        model.arch.discrete_dim,
        eval.frechet_samples,
        &mut grng,
    )?;
    let test_stats = feature_stats(&test_images, &eval.feature_mode)?;
    let gen_stats = feature_stats(&generated.images, &eval.feature_mode)?;
    let fd = frechet_distance(&test_stats, &gen_stats)?;
    Ok((neg_elbo, fd, log_frechet(fd)))
}

fn record_from(
    step: usize,
    history: &[EpochRecord],
    metrics: (f64, f64, f64),
    wall_seconds: f64,
) -> StepRecord {
    StepRecord {
        distribution_index: step,
        neg_test_elbo: metrics.0,
        frechet: metrics.1,
        log_frechet: metrics.2,
        epochs_to_stop: history.len(),
        loss_breakdown: history.last().map(|h| h.train_terms).unwrap_or_default(),
        wall_seconds,
    }
}

/// Run the full sequential protocol for one method over a distribution
/// sequence; a pure function of `(sequence, config, arch, seed)`.
///
/// `arch.discrete_dim` is taken as the fixed latent size for the baselines;
/// the lifelong method starts at one slot and grows by one per hand-off.
pub fn run_sequence(
    seq: &DistributionSequence,
    config: &TrainConfig,
    arch: &ArchSpec,
    eval: &EvalContext,
    seed: u64,
) -> Result<Vec<StepRecord>> {
    if seq.is_empty() {
        return Err(Error::arg("sequence", "must contain at least one distribution"));
    }
    config.validate()?;
    let n = seq.len();
    let mut records = Vec::with_capacity(n);

    match config.method {
        Method::Lifelong | Method::Ewc | Method::Vanilla => {
            let start_dim = if config.method == Method::Lifelong {
                1
            } else {
                arch.discrete_dim
            };
            let student = init_model(&arch.with_discrete_dim(start_dim), seeds::derive(seed, 0x494E))?;
            let mut state = LifelongState::new(student, seed);
            for i in 0..n {
                let started = std::time::Instant::now();
                let triple = &seq.triples[i];
                let history = train_distribution(&mut state, &triple.train, &triple.val, config)?;
                let metrics = evaluate_step(&state.student, seq, i, config, eval)?;
                records.push(record_from(i, &history, metrics, started.elapsed().as_secs_f64()));
                if i + 1 < n {
                    let fisher = if config.method == Method::Ewc {
                        Some(estimate_fisher_diag(
                            &state.student,
                            &triple.train.images,
                            1,
                            seeds::derive2(seed, 0x4649, i as u64),
                            config.tau_schedule.tau_min,
                        )?)
                    } else {
                        None
                    };
                    on_distribution_shift(
                        &mut state,
                        config.method == Method::Lifelong,
                        seeds::derive2(seed, 0x5348, i as u64),
                    )?;
                    if config.method == Method::Ewc {
                        state.fisher = fisher;
                    }
                }
            }
        }
        Method::Full => {
            let trains: Vec<&ImageDataset> = seq.triples.iter().map(|t| &t.train).collect();
            let vals: Vec<&ImageDataset> = seq.triples.iter().map(|t| &t.val).collect();
            let train = union_datasets(&trains, Split::Train)?;
            let val = union_datasets(&vals, Split::Val)?;
            let started = std::time::Instant::now();
            let student = init_model(arch, seeds::derive(seed, 0x494E))?;
            let mut state = LifelongState::new(student, seed);
            let history = train_distribution(&mut state, &train, &val, config)?;
            let train_wall = started.elapsed().as_secs_f64();
            for i in 0..n {
                let eval_started = std::time::Instant::now();
                let metrics = evaluate_step(&state.student, seq, i, config, eval)?;
                let wall = eval_started.elapsed().as_secs_f64() + if i == 0 { train_wall } else { 0.0 };
                records.push(record_from(i, &history, metrics, wall));
            }
        }
        Method::Upto => {
            for i in 0..n {
                let started = std::time::Instant::now();
                let trains: Vec<&ImageDataset> =
                    seq.triples[..=i].iter().map(|t| &t.train).collect();
                let vals: Vec<&ImageDataset> = seq.triples[..=i].iter().map(|t| &t.val).collect();
                let train = union_datasets(&trains, Split::Train)?;
                let val = union_datasets(&vals, Split::Val)?;
                let student =
                    init_model(arch, seeds::derive2(seed, 0x5550, i as u64))?;
                let mut state = LifelongState::new(student, seeds::derive2(seed, 0x5551, i as u64));
                let history = train_distribution(&mut state, &train, &val, config)?;
                let metrics = evaluate_step(&state.student, seq, i, config, eval)?;
                records.push(record_from(i, &history, metrics, started.elapsed().as_secs_f64()));
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DistributionTriple, SequenceKind};

    fn toy_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 4,
            hidden_dim: 8,
            hidden_layers: 1,
            discrete_dim: 2,
            continuous_dim: 2,
        }
    }

    /// Two 4-pixel "classes": bright-left and bright-right, with noise.
    fn toy_dataset(class: u8, n: usize, seed: u64, split: Split) -> ImageDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Array2::from_shape_fn((n, 4), |(_, j)| {
            let base: f64 = if class == 0 {
                [0.9, 0.85, 0.1, 0.15][j]
            } else {
                [0.1, 0.15, 0.9, 0.85][j]
            };
            (base + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)
        });
        ImageDataset::new(images, Some(vec![class; n]), split, format!("toy_{class}")).unwrap()
    }

    fn toy_triple(class: u8, seed: u64) -> DistributionTriple {
        DistributionTriple {
            train: toy_dataset(class, 48, seed, Split::Train),
            val: toy_dataset(class, 12, seed + 1, Split::Val),
            test: toy_dataset(class, 12, seed + 2, Split::Test),
        }
    }

    fn toy_sequence(n: usize) -> DistributionSequence {
        DistributionSequence {
            triples: (0..n).map(|i| toy_triple(i as u8 % 2, 100 + 10 * i as u64)).collect(),
            kind: SequenceKind::PerClass,
        }
    }

    fn toy_eval() -> EvalContext<'static> {
        EvalContext {
            feature_mode: FeatureMode::RawPixels,
            n_mc: 1,
            frechet_samples: 32,
            test_cap: 64,
            eval_seed: 5,
        }
    }

    fn quick_config(method: Method, max_epochs: usize) -> TrainConfig {
        TrainConfig {
            method,
            max_epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            patience: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mixing_ratio_examples() {
        assert_eq!(mixing_ratio(0), 1.0);
        assert_eq!(mixing_ratio(1), 0.5);
        assert!((mixing_ratio(9) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn teacher_generate_allocation_and_determinism() {
        let arch = toy_arch().with_discrete_dim(5);
        let teacher = init_model(&arch, 3).unwrap();
        let before = teacher.param_hash();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = teacher_generate(&teacher, 5, 10, &mut rng).unwrap();
        for d in 0..5 {
            assert_eq!(batch.source.iter().filter(|&&s| s == d).count(), 2);
        }

        let arch3 = toy_arch().with_discrete_dim(3);
        let teacher3 = init_model(&arch3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = teacher_generate(&teacher3, 3, 7, &mut rng).unwrap();
        assert_eq!(batch.source, vec![0, 1, 2, 0, 1, 2, 0]);

        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let b1 = teacher_generate(&teacher3, 3, 8, &mut r1).unwrap();
        let b2 = teacher_generate(&teacher3, 3, 8, &mut r2).unwrap();
        assert_eq!(b1.images, b2.images);

        assert_eq!(teacher.param_hash(), before);
        assert!(teacher_generate(&teacher3, 0, 4, &mut r1).is_err());
        assert!(b1.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mix_minibatch_behaviors() {
        let real = Array2::from_shape_fn((8, 4), |(i, j)| (i * 4 + j) as f64 / 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let all_real = mix_minibatch(&real, None, 1.0, &mut rng).unwrap();
        assert_eq!(all_real.images, real);
        assert!(all_real.tags.iter().all(|t| *t == SampleTag::Real));

        let synth = SyntheticBatch {
            images: Array2::from_elem((8, 4), 0.5),
            source: vec![0; 8],
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let m1 = mix_minibatch(&real, Some(&synth), 0.5, &mut r1).unwrap();
        let m2 = mix_minibatch(&real, Some(&synth), 0.5, &mut r2).unwrap();
        assert_eq!(m1.images, m2.images);
        assert_eq!(m1.tags, m2.tags);
        let n_real = m1.tags.iter().filter(|t| **t == SampleTag::Real).count();
        assert!(n_real > 0 && n_real < 8);

        let empty = Array2::zeros((0, 4));
        assert!(mix_minibatch(&empty, Some(&synth), 0.5, &mut r1).is_err());
        assert!(mix_minibatch(&real, None, 0.5, &mut r1).is_err());
    }

    #[test]
    fn zero_epochs_leaves_state_unchanged() {
        let student = init_model(&toy_arch(), 5).unwrap();
        let hash = student.param_hash();
        let mut state = LifelongState::new(student, 7);
        let triple = toy_triple(0, 40);
        let config = quick_config(Method::Vanilla, 0);
        let history = train_distribution(&mut state, &triple.train, &triple.val, &config).unwrap();
        assert!(history.is_empty());
        assert_eq!(state.student.param_hash(), hash);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let triple = toy_triple(0, 41);
        let config = quick_config(Method::Lifelong, 40);

        let run = || {
            let student = init_model(&toy_arch(), 6).unwrap();
            let mut state = LifelongState::new(student, 11);
            let history =
                train_distribution(&mut state, &triple.train, &triple.val, &config).unwrap();
            (state, history)
        };
        let (state1, history1) = run();
        let (state2, history2) = run();
        assert_eq!(history1, history2);
        assert_eq!(state1.student.param_hash(), state2.student.param_hash());

        let first = history1.first().unwrap().train_terms.total;
        let last = history1.last().unwrap().train_terms.total;
        assert!(
            last < first,
            "training did not reduce the loss: {first} -> {last}"
        );
    }

    #[test]
    fn teacher_is_frozen_during_training() {
        let student = init_model(&toy_arch(), 8).unwrap();
        let mut state = LifelongState::new(student, 13);
        let triple0 = toy_triple(0, 42);
        let config = quick_config(Method::Lifelong, 6);
        train_distribution(&mut state, &triple0.train, &triple0.val, &config).unwrap();
        on_distribution_shift(&mut state, true, 99).unwrap();
        let teacher_hash = state.teacher.as_ref().unwrap().param_hash();

        let triple1 = toy_triple(1, 43);
        train_distribution(&mut state, &triple1.train, &triple1.val, &config).unwrap();
        assert_eq!(state.teacher.as_ref().unwrap().param_hash(), teacher_hash);
    }

    #[test]
    fn shift_freezes_student_and_grows_latent() {
        let student = init_model(&toy_arch(), 9).unwrap();
        let mut state = LifelongState::new(student, 17);
        let triple = toy_triple(0, 44);
        let config = quick_config(Method::Lifelong, 3);
        train_distribution(&mut state, &triple.train, &triple.val, &config).unwrap();

        let pre_shift = state.student.param_hash();
        let pre_dim = state.student.arch.discrete_dim;
        on_distribution_shift(&mut state, true, 1234).unwrap();
        assert_eq!(state.teacher.as_ref().unwrap().param_hash(), pre_shift);
        assert_eq!(state.optimizer.step, 0);
        assert!(state.optimizer.m.iter().all(|&v| v == 0.0));
        assert_eq!(state.student.arch.discrete_dim, pre_dim + 1);
        assert_eq!(state.distributions_seen, 1);

        on_distribution_shift(&mut state, false, 1235).unwrap();
        assert_eq!(state.student.arch.discrete_dim, pre_dim + 1);
        assert_eq!(state.distributions_seen, 2);
    }

    #[test]
    fn run_sequence_counts_and_determinism() {
        let seq = toy_sequence(2);
        let eval = toy_eval();
        let config = quick_config(Method::Lifelong, 3);
        let arch = toy_arch();
        let r1 = run_sequence(&seq, &config, &arch, &eval, 77).unwrap();
        let r2 = run_sequence(&seq, &config, &arch, &eval, 77).unwrap();
        assert_eq!(r1.len(), 2);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.deterministic_view(), b.deterministic_view());
        }
        assert!(r1.iter().all(|r| r.neg_test_elbo.is_finite() && r.frechet.is_finite()));

        for method in [Method::Ewc, Method::Vanilla, Method::Full, Method::Upto] {
            let records =
                run_sequence(&seq, &quick_config(method, 2), &arch, &eval, 77).unwrap();
            assert_eq!(records.len(), 2, "{method:?}");
        }
    }

    #[test]
    fn single_dataset_reduces_all_online_methods_to_the_same_run() {
        // With one distribution no teacher ever exists; with lambda = 0 the
        // lifelong objective is the plain ELBO, so lifelong, ewc and vanilla
        // coincide for identical seeds. Baselines get one discrete slot per
        // distribution, which for a single dataset matches lifelong's start.
        let seq = toy_sequence(1);
        let eval = toy_eval();
        let arch = toy_arch().with_discrete_dim(1);
        let mut base = quick_config(Method::Lifelong, 4);
        base.lambda = 0.0;
        let lifelong = run_sequence(&seq, &base, &arch, &eval, 31).unwrap();
        let ewc = run_sequence(
            &seq,
            &TrainConfig {
                method: Method::Ewc,
                ..base.clone()
            },
            &arch,
            &eval,
            31,
        )
        .unwrap();
        let vanilla = run_sequence(
            &seq,
            &TrainConfig {
                method: Method::Vanilla,
                ..base.clone()
            },
            &arch,
            &eval,
            31,
        )
        .unwrap();
        for (a, b) in lifelong.iter().zip(ewc.iter().chain(&vanilla)) {
            assert_eq!(a.deterministic_view(), b.deterministic_view());
        }
        for (a, b) in lifelong.iter().zip(&vanilla) {
            assert_eq!(a.deterministic_view(), b.deterministic_view());
        }
    }
}
