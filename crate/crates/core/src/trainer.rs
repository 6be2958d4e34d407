//! The training loop: batching, two-view augmentation, the forward and
//! backward chain, optimizer steps, center updates and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{
    cross_attention_backward, cross_attention_forward, decode_model, encode_model, update_centers, AttentionGrads,
    AttentionParams, ClassCenters, Model,
};
use crate::classifier::{predict_probs, probs_backward};
use crate::config::{AttnInit, TrainConfig};
use crate::dataio::{bin, read_file, write_file, EmbeddingDataset, Reader};
use crate::error::{Error, Result};
use crate::init::init_class_centers;
use crate::losses::{entropy_reg, pairwise_bce, pseudo_ce, supervised_ce, total_loss, LossBreakdown, LossParts};
use crate::numerics::{norm, Matrix};
use crate::optim::{adam_step, cosine_lr, early_stop_check, AdamState, EarlyStop, Schedule};

pub const METRICS_HEADER: &str = "epoch,total,ce_l,ce_u,bce,re,lr,selected_pseudo,pseudo_acc";

const OPT_MAGIC: &[u8; 8] = b"SSOCOPT1";
const BLOCK_NAMES: [&str; 3] = ["w_q", "w_k", "w_v"];

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two Gaussian views `z + σ·g` of one embedding.
pub fn augment_views(z: &[f64], sigma: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    if sigma == 0.0 {
        return (z.to_vec(), z.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        z.iter().map(|&x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let r1 = view(&mut rng);
    let r2 = view(&mut rng);
    (r1, r2)
}

/// One mini-batch. `view1` rows are scored; `view2` rows supply pseudo-labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled: Matrix,
    pub labels: Vec<usize>,
    pub view1: Matrix,
    pub view2: Matrix,
    /// Dataset row of every unlabeled entry.
    pub unlabeled_index: Vec<usize>,
}

/// Loss, gradients and intermediate quantities of one batch at fixed state.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub breakdown: LossBreakdown,
    pub grads: AttentionGrads,
    pub delta: Matrix,
    /// Pseudo-label and confidence of every `view2` row.
    pub pseudo_labels: Vec<usize>,
    pub pseudo_confidences: Vec<f64>,
}

pub fn batch_objective(
    centers: &ClassCenters,
    params: &AttentionParams,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<BatchObjective> {
    let nl = batch.labeled.rows();
    let nu = batch.view1.rows();
    if batch.view2.rows() != nu || batch.labels.len() != nl {
        return Err(Error::Shape("batch views or labels disagree in length".into()));
    }
    let w = &cfg.weights;
    let z_all = Matrix::vstack(&[&batch.labeled, &batch.view1, &batch.view2])?;
    let (delta, cache) = cross_attention_forward(centers, &z_all, params)?;

    let scored = Matrix::vstack(&[&batch.labeled, &batch.view1])?;
    let flags: Vec<bool> = (0..nl + nu).map(|i| i < nl).collect();
    let probs = predict_probs(&scored, &delta, &flags, cfg.epsilon)?;
    let targets = predict_probs(&batch.view2, &delta, &vec![false; nu], cfg.epsilon)?;

    let ce_labeled = supervised_ce(&probs.probs.slice_rows(0, nl), &batch.labels, w.prob_floor)?;
    let ce_pseudo = pseudo_ce(
        &probs.probs.slice_rows(nl, nl + nu),
        &targets.pseudo_labels,
        &targets.confidences,
        w.tau1,
        w.prob_floor,
    )?;
    let pair_labels: Vec<Option<usize>> =
        batch.labels.iter().map(|&y| Some(y)).chain(std::iter::repeat_n(None, nu)).collect();
    let bce = pairwise_bce(
        &probs.probs,
        &scored,
        &pair_labels,
        &probs.confidences,
        w.tau2,
        w.prob_floor,
        cfg.bce_z_grad,
    )?;
    let entropy = entropy_reg(&probs.probs, w.prob_floor, cfg.entropy_mode);
    let parts = LossParts { ce_labeled, ce_pseudo, bce, entropy };
    let (breakdown, d_probs, _) = total_loss(&parts, w)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {breakdown:?}")));
    }

    // Pseudo-label targets are constants; only the scored rows carry gradient.
    let (_, d_delta) = probs_backward(&probs, &d_probs, &scored, &delta, cfg.epsilon, &flags)?;
    let grads = cross_attention_backward(&cache, &d_delta, params)?;
    Ok(BatchObjective {
        breakdown,
        grads,
        delta,
        pseudo_labels: targets.pseudo_labels,
        pseudo_confidences: targets.confidences,
    })
}

/// Mutable training state. `epoch` is the next epoch to run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: [AdamState; 3],
    /// Backbone group; empty while embeddings are fixed inputs.
    pub backbone: AdamState,
    pub epoch: usize,
    /// Higher-is-better early-stopping metric per completed epoch.
    pub metric_history: Vec<f64>,
    pub best: Model,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let n = model.params.dim() * model.params.dim();
        Self {
            best: model.clone(),
            model,
            adam: [AdamState::new(n), AdamState::new(n), AdamState::new(n)],
            backbone: AdamState::new(0),
            epoch: 0,
            metric_history: Vec::new(),
            best_epoch: None,
        }
    }

    /// Initial centers and projections for `dataset`.
    pub fn initialize(dataset: &EmbeddingDataset, cfg: &TrainConfig) -> Result<Self> {
        let centers = init_class_centers(dataset, &cfg.init)?;
        let d = dataset.dim();
        let params = match cfg.attn_init {
            AttnInit::Identity => AttentionParams::identity(d),
            AttnInit::Perturbed => AttentionParams::perturbed_identity(d, cfg.attn_init_noise, mix(cfg.seed, 0xA77)),
        };
        Ok(Self::new(Model { params, centers, known_classes: dataset.known_classes }))
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// `(unlabeled dataset row, pseudo-label)` for rows that passed the gate.
    pub selected: Vec<(usize, usize)>,
}

fn clip_grads(grads: &mut AttentionGrads, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let total = [&grads.w_q, &grads.w_k, &grads.w_v]
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        grads.w_q.scale(s);
        grads.w_k.scale(s);
        grads.w_v.scale(s);
    }
}

/// One optimization step: objective at the current snapshot, center update,
/// then Adam on the projections.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<StepOutput> {
    let mut obj = batch_objective(&state.model.centers, &state.model.params, batch, cfg)?;
    let next_centers = update_centers(&state.model.centers, &obj.delta, cfg.norm_mode)?;
    clip_grads(&mut obj.grads, cfg.grad_clip);
    let grads = [&obj.grads.w_q, &obj.grads.w_k, &obj.grads.w_v];
    for (((name, param), grad), adam) in BLOCK_NAMES
        .iter()
        .zip(state.model.params.blocks_mut())
        .zip(grads)
        .zip(&mut state.adam)
    {
        adam_step(name, param.data_mut(), grad.data(), adam, &cfg.adam, lr)?;
    }
    state.model.centers = next_centers;
    let selected = obj
        .pseudo_labels
        .iter()
        .zip(&obj.pseudo_confidences)
        .zip(&batch.unlabeled_index)
        .filter(|((_, &c), _)| c > cfg.weights.tau1)
        .map(|((&y, _), &i)| (i, y))
        .collect();
    Ok(StepOutput { breakdown: obj.breakdown, selected })
}

/// Per-stream batch sizes.
pub fn batch_sizes(cfg: &TrainConfig, labeled: usize, unlabeled: usize) -> (usize, usize) {
    let (bl, bu) = if cfg.labeled_batch > 0 && cfg.unlabeled_batch > 0 {
        (cfg.labeled_batch, cfg.unlabeled_batch)
    } else {
        let total = (labeled + unlabeled) as f64;
        let bl = ((cfg.batch_size as f64 * labeled as f64 / total).round() as usize).max(1);
        (bl, cfg.batch_size.saturating_sub(bl).max(1))
    };
    (bl.min(labeled).max(1), bu.min(unlabeled).max(1))
}

fn stream(n: usize, b: usize, batches: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if n.div_ceil(b) == batches {
        return order.chunks(b).map(<[usize]>::to_vec).collect();
    }
    let mut out = Vec::with_capacity(batches);
    let mut pos = 0;
    for _ in 0..batches {
        let mut batch = Vec::with_capacity(b);
        while batch.len() < b {
            if pos == n {
                order.shuffle(rng);
                pos = 0;
            }
            batch.push(order[pos]);
            pos += 1;
        }
        out.push(batch);
    }
    out
}

/// `(labeled rows, unlabeled rows)` of every batch in `epoch`.
pub fn epoch_plan(
    labeled: usize,
    unlabeled: usize,
    sizes: (usize, usize),
    seed: u64,
    epoch: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let batches = labeled.div_ceil(sizes.0).max(unlabeled.div_ceil(sizes.1));
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, 0xBA7C), epoch as u64));
    let l = stream(labeled, sizes.0, batches, &mut rng);
    let u = stream(unlabeled, sizes.1, batches, &mut rng);
    l.into_iter().zip(u).collect()
}

/// Labeled rows kept out of training to drive early stopping.
fn holdout_rows(labeled: usize, cfg: &TrainConfig) -> Vec<usize> {
    let h = (cfg.holdout_fraction * labeled as f64).floor() as usize;
    if h == 0 || h >= labeled {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..labeled).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x401D)));
    let mut held = order[..h].to_vec();
    held.sort_unstable();
    held
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Batch means of the loss components; counts are epoch sums.
    pub breakdown: LossBreakdown,
    pub selected_pseudo: usize,
    pub pseudo_acc: Option<f64>,
    pub lr_attention: f64,
    pub lr_backbone: f64,
    pub batches: usize,
    pub holdout_ce: Option<f64>,
}

impl EpochReport {
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        let acc = self.pseudo_acc.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, b.total, b.ce_labeled, b.ce_pseudo, b.bce_pair, b.entropy_reg, self.lr_attention, self.selected_pseudo, acc
        )
    }
}

pub fn metrics_csv(reports: &[EpochReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Accuracy of the pseudo-labels selected during one epoch, if the
    /// observer has offline ground truth.
    fn pseudo_label_accuracy(&mut self, _selected: &[(usize, usize)]) -> Option<f64> {
        None
    }

    fn on_epoch(&mut self, _report: &EpochReport, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<EpochReport>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn model(&self) -> &Model {
        &self.state.model
    }
}

fn check_dataset(dataset: &EmbeddingDataset) -> Result<()> {
    dataset.validate()?;
    if dataset.labeled.rows() == 0 || dataset.unlabeled.rows() == 0 {
        return Err(Error::InvalidArgument(
            "training needs at least one labeled and one unlabeled sample".into(),
        ));
    }
    if dataset.class_count() < 2 {
        return Err(Error::InvalidArgument("training needs at least two classes".into()));
    }
    Ok(())
}

pub(crate) fn mean_row_norm(m: &Matrix) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    m.iter_rows().map(norm).sum::<f64>() / m.rows() as f64
}

pub fn train(dataset: &EmbeddingDataset, cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let (train_set, _) = split_holdout(dataset, cfg);
    let state = TrainState::initialize(&train_set, cfg)?;
    resume(dataset, cfg, state, observer)
}

pub(crate) fn split_holdout(dataset: &EmbeddingDataset, cfg: &TrainConfig) -> (EmbeddingDataset, Option<(Matrix, Vec<usize>)>) {
    let held = holdout_rows(dataset.labeled.rows(), cfg);
    if held.is_empty() {
        return (dataset.clone(), None);
    }
    let keep: Vec<usize> = (0..dataset.labeled.rows()).filter(|i| held.binary_search(i).is_err()).collect();
    let mut train_set = dataset.clone();
    train_set.labeled = dataset.labeled.select_rows(&keep);
    train_set.labels = keep.iter().map(|&i| dataset.labels[i]).collect();
    let hold = (
        dataset.labeled.select_rows(&held),
        held.iter().map(|&i| dataset.labels[i]).collect(),
    );
    (train_set, Some(hold))
}

fn holdout_ce(model: &Model, hold: &(Matrix, Vec<usize>), cfg: &TrainConfig) -> Result<f64> {
    let flags = vec![true; hold.0.rows()];
    let p = predict_probs(&hold.0, &model.centers.centers, &flags, cfg.epsilon)?;
    Ok(supervised_ce(&p.probs, &hold.1, cfg.weights.prob_floor)?.value)
}

/// Continues training from `state` up to `cfg.epochs` epochs.
pub fn resume(
    dataset: &EmbeddingDataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let (train_set, hold) = split_holdout(dataset, cfg);
    let d = dataset.dim();
    if state.model.params.dim() != d || state.model.centers.class_count() != dataset.class_count() {
        return Err(Error::Shape(format!(
            "state has d={} and {} classes, dataset d={} and {} classes",
            state.model.params.dim(),
            state.model.centers.class_count(),
            d,
            dataset.class_count()
        )));
    }
    let sigma = cfg.augment_sigma * mean_row_norm(&dataset.all_embeddings());
    let sizes = batch_sizes(cfg, train_set.labeled.rows(), train_set.unlabeled.rows());
    let schedule = Schedule { base_lr: cfg.lr_attention, total_epochs: cfg.epochs, mode: cfg.schedule };
    let backbone_schedule = Schedule { base_lr: cfg.lr_backbone, ..schedule };
    info!(
        "training {} labeled + {} unlabeled rows, batches of {}+{}, sigma {:.4}",
        train_set.labeled.rows(),
        train_set.unlabeled.rows(),
        sizes.0,
        sizes.1,
        sigma
    );

    let mut reports = Vec::new();
    let mut stopped_early = false;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cosine_lr(epoch, &schedule)?;
        let plan = epoch_plan(train_set.labeled.rows(), train_set.unlabeled.rows(), sizes, cfg.seed, epoch);
        let mut sum = LossBreakdown::default();
        let mut selected = Vec::new();
        for (b, (li, ui)) in plan.iter().enumerate() {
            let batch = assemble(&train_set, li, ui, sigma, cfg.seed, epoch)?;
            let out = train_step(&mut state, &batch, cfg, lr)
                .map_err(|e| Error::Numerical(format!("epoch {epoch} batch {b}: {e}")))?;
            accumulate(&mut sum, &out.breakdown);
            selected.extend(out.selected);
        }
        let n = plan.len() as f64;
        let breakdown = LossBreakdown {
            total: sum.total / n,
            ce_labeled: sum.ce_labeled / n,
            ce_pseudo: sum.ce_pseudo / n,
            bce_pair: sum.bce_pair / n,
            entropy_reg: sum.entropy_reg / n,
            ..sum
        };
        let pseudo_acc = observer.pseudo_label_accuracy(&selected);
        let held = hold.as_ref().map(|h| holdout_ce(&state.model, h, cfg)).transpose()?;
        state.epoch += 1;
        if let Some(ce) = held {
            state.metric_history.push(-ce);
            let best = state.metric_history[..state.metric_history.len() - 1]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            if -ce > best {
                state.best = state.model.clone();
                state.best_epoch = Some(epoch);
            }
        } else {
            state.best = state.model.clone();
            state.best_epoch = Some(epoch);
        }
        let report = EpochReport {
            epoch,
            breakdown,
            selected_pseudo: selected.len(),
            pseudo_acc,
            lr_attention: lr,
            lr_backbone: cosine_lr(epoch, &backbone_schedule)?,
            batches: plan.len(),
            holdout_ce: held,
        };
        debug!("epoch {epoch}: {}", report.csv_row());
        observer.on_epoch(&report, &state)?;
        reports.push(report);
        if hold.is_some() && early_stop_check(&state.metric_history, cfg.patience, cfg.min_delta) == EarlyStop::Stop {
            info!("early stop after epoch {epoch}");
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { state, reports, stopped_early })
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    sum.total += b.total;
    sum.ce_labeled += b.ce_labeled;
    sum.ce_pseudo += b.ce_pseudo;
    sum.bce_pair += b.bce_pair;
    sum.entropy_reg += b.entropy_reg;
    sum.selected_pseudo_count += b.selected_pseudo_count;
    sum.selected_pair_count += b.selected_pair_count;
}

pub(crate) fn assemble(
    set: &EmbeddingDataset,
    labeled: &[usize],
    unlabeled: &[usize],
    sigma: f64,
    seed: u64,
    epoch: usize,
) -> Result<Batch> {
    let (view1, view2) = match &set.unlabeled_view2 {
        Some(v2) => (set.unlabeled.select_rows(unlabeled), v2.select_rows(unlabeled)),
        None => {
            let epoch_seed = mix(mix(seed, 0xA06), epoch as u64);
            let views: Vec<(Vec<f64>, Vec<f64>)> = crate::parallel::map_indices(unlabeled.len(), |k| {
                let i = unlabeled[k];
                augment_views(set.unlabeled.row(i), sigma, mix(epoch_seed, i as u64))
            });
            let (r1, r2): (Vec<_>, Vec<_>) = views.into_iter().unzip();
            let d = set.dim();
            (
                Matrix::new(r1.len(), d, r1.concat())?,
                Matrix::new(r2.len(), d, r2.concat())?,
            )
        }
    };
    Ok(Batch {
        labeled: set.labeled.select_rows(labeled),
        labels: labeled.iter().map(|&i| set.labels[i]).collect(),
        view1,
        view2,
        unlabeled_index: unlabeled.to_vec(),
    })
}

/// Checkpoint bytes: the best model block followed by the optimizer block
/// needed to resume exactly.
pub fn encode_checkpoint(state: &TrainState, path: &Path) -> Result<Vec<u8>> {
    let mut out = encode_model(&state.best, path)?;
    out.extend_from_slice(OPT_MAGIC);
    bin::put_u64(&mut out, state.epoch as u64);
    bin::put_u64(&mut out, state.model.centers.step);
    bin::put_u64(&mut out, state.best.centers.step);
    bin::put_u64(&mut out, state.best_epoch.map_or(u64::MAX, |e| e as u64));
    bin::put_u64(&mut out, state.metric_history.len() as u64);
    bin::put_f64s(&mut out, &state.metric_history);
    for block in state.model.params.blocks() {
        bin::put_f64s(&mut out, block.data());
    }
    bin::put_f64s(&mut out, state.model.centers.centers.data());
    for a in &state.adam {
        bin::put_u64(&mut out, a.step);
        bin::put_f64s(&mut out, &a.m);
        bin::put_f64s(&mut out, &a.v);
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_file(path, &encode_checkpoint(state, path)?)
}

/// Reads a checkpoint. The state is `None` for a bare model file.
pub fn read_checkpoint(path: &Path) -> Result<(Model, Option<TrainState>)> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf);
    let mut best = decode_model(&mut r)?;
    if r.remaining() == 0 {
        return Ok((best, None));
    }
    r.magic(OPT_MAGIC)?;
    let epoch = r.u64("epoch")? as usize;
    let step = r.u64("center_step")?;
    best.centers.step = r.u64("best_center_step")?;
    let best_epoch = match r.u64("best_epoch")? {
        u64::MAX => None,
        e => Some(e as usize),
    };
    let hist_len = r.u64("history_len")? as usize;
    if hist_len > r.remaining() / 8 {
        return Err(Error::format(path, "history_len", format!("{hist_len} entries exceed the file")));
    }
    let metric_history = r.f64_block(hist_len, "history")?;
    let d = best.params.dim();
    let k = best.centers.class_count();
    let mut block = |field| -> Result<Matrix> { Matrix::new(d, d, r.f64_block(d * d, field)?) };
    let params = AttentionParams { w_q: block("w_q")?, w_k: block("w_k")?, w_v: block("w_v")? };
    let centers = Matrix::new(k, d, r.f64_block(k * d, "centers")?)?;
    let mut adam: [AdamState; 3] = std::array::from_fn(|_| AdamState::new(0));
    for a in &mut adam {
        a.step = r.u64("adam_step")?;
        a.m = r.f64_block(d * d, "adam_m")?;
        a.v = r.f64_block(d * d, "adam_v")?;
    }
    r.finish()?;
    let model = Model {
        params,
        centers: ClassCenters { centers, step },
        known_classes: best.known_classes,
    };
    let state = TrainState {
        model,
        adam,
        backbone: AdamState::new(0),
        epoch,
        metric_history,
        best: best.clone(),
        best_epoch,
    };
    Ok((best, Some(state)))
}
