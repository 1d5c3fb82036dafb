//! Optimization: loss composition, Adam, plateau schedule, patient-level
//! split, multi-view minibatches, best-model selection and fine-tuning.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::checkpoint::{digest, ModelCheckpoint, Provenance};
use crate::dataset::{patients, PatientKeyed, Sample};
use crate::error::{Error, Result};
use crate::heatmap::{self, DEFAULT_SIGMA_PX};
use crate::image::Image;
use crate::landmarks::{LandmarkSet, Point, View};
use crate::preprocess::{augment_with, bias_correct, preprocess_to, AugmentConfig, FRAME_SIZE};
use crate::tensor::Tensor;
use crate::unet::UNet;

pub const TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fresh,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Epochs without sufficient improvement before the rate drops.
    pub patience: usize,
    /// Relative improvement of the best validation loss that counts.
    pub min_rel_improvement: f64,
    pub factor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { patience: 3, min_rel_improvement: 1e-4, factor: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub plateau: PlateauConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub sigma_px: f64,
    /// Side of the square network input frame.
    pub frame_size: usize,
    pub augment: AugmentConfig,
    /// Views pooled into one model.
    pub views: Vec<View>,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 50,
            plateau: PlateauConfig::default(),
            batch_size: 8,
            seed: 0,
            mode: TrainMode::Fresh,
            sigma_px: DEFAULT_SIGMA_PX,
            frame_size: FRAME_SIZE,
            augment: AugmentConfig::default(),
            views: View::LAX.to_vec(),
            train_fraction: TRAIN_FRACTION,
        }
    }
}

impl TrainConfig {
    /// Phantom-scale defaults: batch 4 on a 96² frame.
    pub fn desk() -> Self {
        Self { batch_size: 4, frame_size: crate::phantom::DEFAULT_SIZE, ..Self::default() }
    }

    /// Switch to the fine-tuning schedule (lr 0.0005, 10 epochs).
    pub fn finetuning(self) -> Self {
        Self { lr0: 0.0005, epochs: 10, mode: TrainMode::Finetune, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr0));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return bad(format!("plateau factor must lie in (0,1), got {}", self.plateau.factor));
        }
        if self.epochs == 0 && self.mode == TrainMode::Fresh {
            return bad("training needs at least one epoch".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.views.is_empty() {
            return bad("no views selected".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction must lie in (0,1), got {}", self.train_fraction));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.eps > 0.0) {
            return bad("Adam betas must lie in [0,1) and eps be positive".into());
        }
        self.augment.validate()
    }

    pub fn digest(&self) -> String {
        digest(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[&[f32]],
    state: &mut OptimizerState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, p) in params.iter_mut().enumerate() {
        let (g, m, v) = (grads[k], &mut state.m[k], &mut state.v[k]);
        if g.len() != p.numel() {
            return Err(Error::Usage(format!("gradient {k} has {} values for {} parameters", g.len(), p.numel())));
        }
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            *theta = (*theta as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Reduce-on-plateau schedule driven by validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauState {
    pub fn new(lr0: f64, config: PlateauConfig) -> Self {
        Self { config, lr: lr0, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Record one epoch's validation loss and return the rate for the next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - self.config.min_rel_improvement) || self.best.is_infinite() {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr *= self.config.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Rates in effect after each of `losses` under the plateau rule.
pub fn plateau_lr(losses: &[f64], lr0: f64, config: PlateauConfig) -> Vec<f64> {
    let mut st = PlateauState::new(lr0, config);
    losses.iter().map(|&l| st.observe(l)).collect()
}

/// Patient-level split: returns (train, validation) item indices. Patients
/// are shuffled with `seed`; round(frac·patients) go to training, clamped
/// so both sides get at least one patient.
pub fn split_patients<T: PatientKeyed>(items: &[T], frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let groups = patients(items);
    if groups.len() < 2 {
        return Err(Error::Config(format!("a patient-level split needs at least 2 patients, found {}", groups.len())));
    }
    if let Some((id, _)) = groups.iter().find(|(id, _)| id.is_empty()) {
        return Err(Error::Config(format!("sample without patient id {id:?}")));
    }
    let mut ids: Vec<&String> = groups.keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((frac * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let collect = |ids: &[&String]| {
        let mut idx: Vec<usize> = ids.iter().flat_map(|id| groups[*id].iter().copied()).collect();
        idx.sort_unstable();
        idx
    };
    Ok((collect(&ids[..n_train]), collect(&ids[n_train..])))
}

/// A sample with everything that does not change between epochs cached.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub original: Image,
    pub corrected: Option<Image>,
    /// Unaugmented network input.
    pub input: Vec<f32>,
    /// `[4, F, F]` heat-map target in the network frame.
    pub target: Tensor<f32>,
    pub view: View,
}

#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub items: Vec<PreparedSample>,
    pub frame_size: usize,
    pub sigma_px: f64,
}

/// Landmarks mapped into the preprocessed network frame.
pub fn landmarks_to_network_frame(set: &LandmarkSet, record: &crate::preprocess::PreprocRecord) -> Result<LandmarkSet> {
    let frame = crate::landmarks::Frame::new(record.output_size.0, record.output_size.1, (1.0, 1.0));
    let points = set.points.map(|p| {
        p.map(|p| {
            let (r, c) = record.forward(p.row, p.col);
            Point::new(r, c)
        })
    });
    LandmarkSet::new(set.view, frame, points)
}

impl PreparedSet {
    pub fn new(samples: &[Sample], frame_size: usize, sigma_px: f64, with_corrected: bool) -> Result<Self> {
        let items = samples
            .iter()
            .map(|s| {
                let (net_img, record) = preprocess_to(&s.image, frame_size);
                let lm = landmarks_to_network_frame(&s.landmarks, &record)?;
                let target = heatmap::encode(&lm, frame_size, frame_size, sigma_px)?.probs;
                Ok(PreparedSample {
                    original: s.image.clone(),
                    corrected: with_corrected.then(|| bias_correct(&s.image)),
                    input: net_img.into_pixels(),
                    target,
                    view: s.view(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items, frame_size, sigma_px })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Indices of samples whose view is in `views`.
    pub fn pool(&self, views: &[View]) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| views.contains(&self.items[i].view)).collect()
    }

    fn augmented_input<R: Rng>(&self, i: usize, aug: &AugmentConfig, rng: &mut R) -> Vec<f32> {
        let it = &self.items[i];
        let img = augment_with(&it.original, it.corrected.as_ref(), aug, rng);
        preprocess_to(&img, self.frame_size).0.into_pixels()
    }

    /// Stack inputs and targets of `indices`; `aug` = None feeds the
    /// unaugmented inputs.
    pub fn batch<R: Rng>(&self, indices: &[usize], aug: Option<&AugmentConfig>, rng: &mut R) -> Result<Minibatch> {
        let f = self.frame_size;
        let mut inputs = Vec::with_capacity(indices.len() * f * f);
        let mut targets = Vec::with_capacity(indices.len() * 4 * f * f);
        for &i in indices {
            match aug {
                Some(a) => inputs.extend(self.augmented_input(i, a, rng)),
                None => inputs.extend_from_slice(&self.items[i].input),
            }
            targets.extend_from_slice(self.items[i].target.data());
        }
        let b = indices.len();
        Ok(Minibatch {
            inputs: Tensor::new(&[b, 1, f, f], inputs)?,
            targets: Tensor::new(&[b, 4, f, f], targets)?,
            views: indices.iter().map(|&i| self.items[i].view).collect(),
            indices: indices.to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Minibatch {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub views: Vec<View>,
    pub indices: Vec<usize>,
}

/// Draw `batch` sample indices uniformly, with replacement, from the
/// samples of `set` whose view is in `views`.
pub fn sample_indices<R: Rng>(set: &PreparedSet, views: &[View], batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pool = set.pool(views);
    if pool.is_empty() {
        return Err(Error::Config(format!("no training samples for views {views:?}")));
    }
    Ok((0..batch).map(|_| pool[rng.random_range(0..pool.len())]).collect())
}

/// Draw a minibatch and build its augmented inputs and targets.
pub fn sample_minibatch<R: Rng>(
    set: &PreparedSet,
    views: &[View],
    batch: usize,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Minibatch> {
    let idx = sample_indices(set, views, batch, rng)?;
    set.batch(&idx, Some(aug), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
        }
        s
    }
}

/// Keeps the snapshot with the lowest validation loss (first wins ties).
#[derive(Debug, Clone)]
pub struct BestTracker<S> {
    pub epoch: usize,
    pub loss: f64,
    pub snapshot: Option<S>,
}

impl<S> Default for BestTracker<S> {
    fn default() -> Self {
        Self { epoch: 0, loss: f64::INFINITY, snapshot: None }
    }
}

impl<S> BestTracker<S> {
    pub fn offer(&mut self, epoch: usize, loss: f64, snapshot: impl FnOnce() -> S) -> bool {
        if loss < self.loss {
            self.epoch = epoch;
            self.loss = loss;
            self.snapshot = Some(snapshot());
            true
        } else {
            false
        }
    }
}

/// Loss terms (KL, soft Dice) of softmax(scores) against `targets`.
pub fn loss_terms(scores: &Tensor<f32>, targets: &Tensor<f32>) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let s = g.leaf(scores.clone());
    let p = g.softmax_channels(s)?;
    let kl = g.kl_loss(targets, p)?;
    let dice = g.soft_dice_loss(p, targets)?;
    Ok((g.item(kl) as f64, g.item(dice) as f64))
}

/// Mean validation loss (KL + Dice per sample) in eval mode.
pub fn evaluate_loss(model: &UNet<f32>, set: &PreparedSet, indices: &[usize], batch: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in indices.chunks(batch.max(1)) {
        let mb = set.batch(chunk, None, &mut rng)?;
        let scores = model.infer(&mb.inputs)?;
        let (kl, dice) = loss_terms(&scores, &mb.targets)?;
        total += (kl + dice) * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Per-epoch hook: receives the record and the current model.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &UNet<f32>) -> Result<()> + 'a;

/// Train `model` on `train` and select the best epoch on `val`.
pub fn train(
    model: UNet<f32>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    train_with_hook(model, train, val, config, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    mut model: UNet<f32>,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    config.validate()?;
    if model.arch().out_channels != heatmap::CHANNELS || model.arch().in_channels != 1 {
        return Err(Error::Config(format!(
            "model maps {} → {} channels; landmark training needs 1 → {}",
            model.arch().in_channels,
            model.arch().out_channels,
            heatmap::CHANNELS
        )));
    }
    model.check_input(&[1, 1, config.frame_size, config.frame_size])?;
    let with_corrected = config.augment.p_corrected > 0.0;
    let train_set = PreparedSet::new(train, config.frame_size, config.sigma_px, with_corrected)?;
    let val_set = PreparedSet::new(val, config.frame_size, config.sigma_px, false)?;
    let train_pool = train_set.pool(&config.views);
    let val_pool = val_set.pool(&config.views);
    if train_pool.is_empty() {
        return Err(Error::Config(format!("no training samples for views {:?}", config.views)));
    }
    if val_pool.is_empty() {
        return Err(Error::Config(format!("no validation samples for views {:?}", config.views)));
    }

    let provenance = |epoch: usize, val_loss: Option<f64>| Provenance {
        config_digest: config.digest(),
        epoch,
        val_loss,
        frame_size: config.frame_size,
        sigma_px: config.sigma_px,
        views: config.views.clone(),
    };
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((ModelCheckpoint::new(model, provenance(0, None)), history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(model.params());
    let mut plateau = PlateauState::new(config.lr0, config.plateau);
    let mut best = BestTracker::default();
    let steps = train_pool.len().div_ceil(config.batch_size);
    let mut global_step = 0usize;
    for epoch in 1..=config.epochs {
        let lr = plateau.lr;
        let mut sum = 0.0;
        for _ in 0..steps {
            global_step += 1;
            let mb = sample_minibatch(&train_set, &config.views, config.batch_size, &config.augment, &mut rng)?;
            let diverged = |kl: f64, dice: f64| Error::Diverged { step: global_step, lr, kl, dice };
            let mut g = Graph::new();
            let vars = model.register_params(&mut g);
            let x = g.leaf(mb.inputs);
            let trace = match model.forward_graph(&mut g, x, &vars, Mode::Train) {
                Err(Error::Numeric(_)) => return Err(diverged(f64::NAN, f64::NAN)),
                r => r?,
            };
            let probs = g.softmax_channels(trace.scores)?;
            let (kl, dice) = match (g.kl_loss(&mb.targets, probs), g.soft_dice_loss(probs, &mb.targets)) {
                (Ok(kl), Ok(dice)) => (kl, dice),
                (Err(Error::Numeric(_)), _) | (_, Err(Error::Numeric(_))) => return Err(diverged(f64::NAN, f64::NAN)),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            let (klv, dicev) = (g.item(kl) as f64, g.item(dice) as f64);
            if !(klv.is_finite() && dicev.is_finite()) {
                return Err(diverged(klv, dicev));
            }
            let loss = g.add(kl, dice)?;
            g.backward(loss)?;
            let grads: Vec<&[f32]> = vars.iter().map(|&v| g.grad(v).expect("parameter leaves carry gradients")).collect();
            adam_step(model.params_mut(), &grads, &mut opt, lr, config.betas, config.eps)?;
            sum += klv + dicev;
        }
        let train_loss = sum / steps as f64;
        let val_loss = evaluate_loss(&model, &val_set, &val_pool, config.batch_size)?;
        let record = EpochRecord { epoch, train_loss, val_loss, lr };
        history.epochs.push(record);
        best.offer(epoch, val_loss, || model.clone());
        plateau.observe(val_loss);
        hook(&record, &model)?;
    }
    history.best_epoch = best.epoch;
    let model = best.snapshot.unwrap_or(model);
    Ok((ModelCheckpoint::new(model, provenance(best.epoch, Some(best.loss))), history))
}

/// Continue training a checkpoint on a new dataset; every parameter stays
/// trainable. Zero epochs hands the base back unchanged.
pub fn fine_tune(
    base: &ModelCheckpoint,
    train_samples: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    let arch = base.model.arch();
    if arch.out_channels != heatmap::CHANNELS || arch.in_channels != 1 {
        return Err(Error::Config(format!(
            "base model maps {} → {} channels, the landmark task needs 1 → {}",
            arch.in_channels,
            arch.out_channels,
            heatmap::CHANNELS
        )));
    }
    if config.epochs == 0 {
        return Ok((base.clone(), TrainHistory::default()));
    }
    train(base.model.clone(), train_samples, val, config)
}

/// Split `samples` by patient and train.
pub fn train_split(model: UNet<f32>, samples: &[Sample], config: &TrainConfig) -> Result<(ModelCheckpoint, TrainHistory)> {
    let (tr, va) = split_patients(samples, config.train_fraction, config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    train(model, &pick(&tr), &pick(&va), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Frame;
    use crate::phantom::{gen_samples, DatasetSpec};
    use crate::unet::ArchConfig;

    #[test]
    fn adam_first_step_and_symmetry() {
        let mut p = vec![Tensor::new(&[2], vec![0.0f32, 0.0]).unwrap()];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &[&[1.0, 0.0]], &mut st, 0.001, (0.9, 0.999), 1e-8).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0].data()[0] as f64 - expected).abs() < 1e-10);
        assert_eq!(p[0].data()[1], 0.0);

        let mut q = vec![Tensor::new(&[1], vec![0.0f32]).unwrap()];
        let mut st = OptimizerState::new(&q);
        adam_step(&mut q, &[&[-1.0]], &mut st, 0.001, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(q[0].data()[0], -p[0].data()[0]);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = vec![Tensor::new(&[3], vec![0.5f32, -1.0, 2.0]).unwrap()];
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[&[0.0; 3]], &mut st, 0.01, (0.9, 0.999), 1e-8).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn plateau_examples() {
        let cfg = PlateauConfig::default();
        assert_eq!(plateau_lr(&[1.0, 0.9, 0.8], 1.0, cfg), vec![1.0; 3]);
        let lrs = plateau_lr(&[1.0, 0.99999, 0.99998, 0.99997], 1.0, cfg);
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5]);
        let lrs = plateau_lr(&[1.0; 7], 1.0, cfg);
        assert_eq!(lrs[6], 0.25);
    }

    #[test]
    fn best_tracker_picks_lowest() {
        let mut b = BestTracker::default();
        for (e, l) in [0.5, 0.3, 0.4].into_iter().enumerate() {
            b.offer(e + 1, l, || format!("weights@{}", e + 1));
        }
        assert_eq!((b.epoch, b.snapshot.as_deref()), (2, Some("weights@2")));
    }

    struct P(String);
    impl PatientKeyed for P {
        fn patient_id(&self) -> &str {
            &self.0
        }
    }

    #[test]
    fn split_examples() {
        let items: Vec<P> = (0..10).map(|i| P(format!("p{i}"))).collect();
        let (tr, va) = split_patients(&items, 0.9, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (9, 1));
        assert_eq!(split_patients(&items, 0.9, 1).unwrap(), (tr, va));

        let mut items: Vec<P> = (0..12).map(|_| P("big".into())).collect();
        items.extend((0..3).map(|i| P(format!("s{i}"))));
        let (tr, va) = split_patients(&items, 0.5, 3).unwrap();
        let big_train = tr.iter().filter(|&&i| i < 12).count();
        let big_val = va.iter().filter(|&&i| i < 12).count();
        assert!(big_train == 12 || big_val == 12);

        assert!(matches!(split_patients(&[P("a".into())], 0.9, 0), Err(Error::Config(_))));
    }

    fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
        gen_samples(&DatasetSpec { n, seed, size: 32, mix: [1, 1, 1, 0], ..DatasetSpec::default() }).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            frame_size: 32,
            sigma_px: 2.0,
            augment: AugmentConfig::none(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn minibatch_respects_views_and_codec() {
        let samples = gen_samples(&DatasetSpec { n: 8, seed: 2, size: 32, ..DatasetSpec::default() }).unwrap();
        let set = PreparedSet::new(&samples, 32, 2.0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mb = sample_minibatch(&set, &[View::Sax], 4, &AugmentConfig::default(), &mut rng).unwrap();
        assert!(mb.views.iter().all(|&v| v == View::Sax));
        let t = mb.targets.data();
        for px in 0..4 * 32 * 32 {
            let (b, r) = (px / 1024, px % 1024);
            let s: f32 = (0..4).map(|c| t[b * 4096 + c * 1024 + r]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let only_lax = PreparedSet::new(&samples[..3], 32, 2.0, false).unwrap();
        assert!(matches!(sample_indices(&only_lax, &[View::Sax], 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn training_smoke_decreases_loss_and_is_deterministic() {
        let samples = tiny_samples(20, 1);
        let cfg = tiny_config();
        let run = || train_split(UNet::build(ArchConfig::tiny(), 7).unwrap(), &samples, &cfg).unwrap();
        let (ck, hist) = run();
        assert_eq!(hist.epochs.len(), 3);
        assert!(hist.epochs[2].train_loss < hist.epochs[0].train_loss, "{:?}", hist);
        let best = hist.epochs.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(hist.epochs[hist.best_epoch - 1].val_loss, best);
        assert_eq!(ck.provenance.epoch, hist.best_epoch);
        let (_, again) = run();
        assert_eq!(hist.to_csv(), again.to_csv());
    }

    #[test]
    fn fine_tune_zero_epochs_returns_base() {
        let samples = tiny_samples(8, 3);
        let base = ModelCheckpoint::new(UNet::build(ArchConfig::tiny(), 1).unwrap(), Provenance::default());
        let cfg = TrainConfig { epochs: 0, ..tiny_config().finetuning() };
        let (ck, hist) = fine_tune(&base, &samples[..4], &samples[4..], &cfg).unwrap();
        assert_eq!(ck.model.params(), base.model.params());
        assert!(hist.epochs.is_empty());

        let cfg = TrainConfig { epochs: 1, ..tiny_config().finetuning() };
        let (_, hist) = fine_tune(&base, &samples[..4], &samples[4..], &cfg).unwrap();
        assert_eq!(hist.epochs[0].lr, 0.0005);

        let wrong = ArchConfig { out_channels: 3, ..ArchConfig::tiny() };
        let base = ModelCheckpoint::new(UNet::build(wrong, 1).unwrap(), Provenance::default());
        assert!(matches!(fine_tune(&base, &samples, &samples, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn network_frame_mapping_matches_record() {
        let set = LandmarkSet::new(View::Sax, Frame::new(20, 20, (2.0, 2.0)), [Some(Point::new(5.0, 6.0)), None, None]).unwrap();
        let img = Image::filled(20, 20, 1.0, (2.0, 2.0)).unwrap();
        let (_, rec) = preprocess_to(&img, 48);
        let net = landmarks_to_network_frame(&set, &rec).unwrap();
        assert_eq!(net.points[0], Some(Point::new(10.0 + 4.0, 12.0 + 4.0)));
    }
}
