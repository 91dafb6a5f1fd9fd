//! Training: dataset splits, Adam with plateau learning-rate decay, the
//! epoch loop over the dense objective, and evaluation reports.

mod eval;

pub use eval::{evaluate, format_report_table, DatasetKind, EvalReport, EvalRow};

use rand::seq::SliceRandom;

use crate::augment::AugmentedPair;
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::scene::Observation;
use crate::tensor::ops;
use crate::tensor::tape::{GradTape, Gradients};
use crate::tensor::{LabelMap, Mode, Real, Shape, Tensor};

/// One training/evaluation sample: 8-bit image, dense labels, scene label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub labels: Vec<u16>,
    pub scene_label: u16,
}

impl Sample {
    pub fn from_observation(obs: &Observation) -> Sample {
        Sample {
            width: obs.width,
            height: obs.height,
            image: obs.image.clone(),
            labels: obs.dense_labels.clone(),
            scene_label: obs.scene_label,
        }
    }

    pub fn from_pair(pair: AugmentedPair) -> Sample {
        Sample {
            width: pair.width,
            height: pair.height,
            image: pair.image,
            labels: pair.dense_labels,
            scene_label: pair.scene_label,
        }
    }
}

/// Stack same-sized samples into an input tensor (pixels scaled to [0, 1])
/// and a label map.
pub fn batch_tensor(samples: &[&Sample]) -> Result<(Tensor, LabelMap)> {
    let first = samples.first().ok_or_else(|| Error::EmptyInput { op: "batch" })?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(samples.len() * h * w * 3);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.width, s.height) != (w, h) {
            return Err(Error::ShapeMismatch {
                op: "batch",
                detail: format!("mixed sizes {w}x{h} vs {}x{}", s.width, s.height),
            });
        }
        data.extend(s.image.iter().map(|&v| v as Real / 255.0));
        labels.extend_from_slice(&s.labels);
    }
    Ok((
        Tensor::from_vec(Shape::nhwc(samples.len(), h, w, 3), data)?,
        LabelMap::from_vec(samples.len(), h, w, labels)?,
    ))
}

/// 93/4/3 split fractions and shuffle seed.
#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub dev: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.93, test: 0.04, dev: 0.03, seed: 0 }
    }
}

impl SplitSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Partition sizes by largest-remainder rounding; exact on multiples
    /// of 100 for the default fractions.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let fractions = [self.train, self.test, self.dev];
        if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {fractions:?} must be non-negative and sum to 1"
            )));
        }
        let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut sizes: [usize; 3] = [quotas[0] as usize, quotas[1] as usize, quotas[2] as usize];
        let mut rest: Vec<(usize, f64)> =
            quotas.iter().enumerate().map(|(i, q)| (i, q - q.floor())).collect();
        rest.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut leftover = n - sizes.iter().sum::<usize>();
        for (i, _) in rest {
            if leftover == 0 {
                break;
            }
            sizes[i] += 1;
            leftover -= 1;
        }
        Ok(sizes)
    }
}

/// Deterministic shuffle then contiguous partition into (train, test, dev);
/// disjoint and exhaustive by construction.
pub fn split_dataset<T>(mut items: Vec<T>, spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::EmptyInput { op: "split_dataset" });
    }
    let sizes = spec.sizes(items.len())?;
    let mut rng = crate::rng::stream(spec.seed, 0x5911);
    items.shuffle(&mut rng);
    let dev = items.split_off(sizes[0] + sizes[1]);
    let test = items.split_off(sizes[0]);
    Ok((items, test, dev))
}

/// Adam optimizer state: one first/second moment buffer per parameter, step
/// counter, current learning rate.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: Real) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update over all parameters. Parameters without a
/// gradient on this step keep decaying moments. A non-finite gradient
/// rejects the whole step before touching anything.
pub fn adam_step(params: &mut [&mut Tensor], grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam state covers {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for p in params.iter() {
        if let Some(g) = grads.get(p) {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite gradient; step rejected".into()));
            }
        }
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let zero = vec![];
        let g = grads.get(p).unwrap_or(&zero);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = g.get(j).copied().unwrap_or(0.0);
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Learning-rate decay on dev-loss plateaus: after `patience` consecutive
/// epochs without an improvement of at least `min_delta`, multiply the rate
/// by `factor`, never below `floor`.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub lr: Real,
    pub factor: Real,
    pub patience: usize,
    pub min_delta: Real,
    pub floor: Real,
    best: Real,
    stale: usize,
}

/// Schedule knobs with the artifact defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauParams {
    pub factor: Real,
    pub patience: usize,
    pub min_delta: Real,
    pub floor: Real,
}

impl Default for PlateauParams {
    fn default() -> Self {
        PlateauParams { factor: 0.5, patience: 3, min_delta: 1e-3, floor: 1e-5 }
    }
}

impl PlateauSchedule {
    pub fn new(initial_lr: Real) -> Self {
        Self::with_params(initial_lr, PlateauParams::default())
    }

    pub fn with_params(initial_lr: Real, p: PlateauParams) -> Self {
        PlateauSchedule {
            lr: initial_lr,
            factor: p.factor,
            patience: p.patience,
            min_delta: p.min_delta,
            floor: p.floor,
            best: Real::INFINITY,
            stale: 0,
        }
    }

    /// Feed one epoch's dev loss; returns the rate to use next.
    pub fn step(&mut self, dev_loss: Real) -> Real {
        if self.best - dev_loss >= self.min_delta {
            self.best = dev_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Which dense objective the loop minimizes.
#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    Nll,
    Focal { gamma: Real, class_weights: Option<Vec<Real>> },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub lr: Real,
    pub plateau: PlateauParams,
    pub seed: u64,
    /// The optional in-training random validation carve-out (fraction of the
    /// training partition); off by default since the dev split covers it.
    pub inner_val_fraction: Option<f64>,
    /// Stop once training pixel accuracy reaches this value (checked once
    /// per epoch).
    pub stop_at_train_accuracy: Option<f64>,
    pub log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            loss: LossKind::Nll,
            lr: 0.01,
            plateau: PlateauParams::default(),
            seed: 0,
            inner_val_fraction: None,
            stop_at_train_accuracy: None,
            log: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Real,
    pub dev_loss: Real,
    pub lr: Real,
}

/// Per-epoch loss curve, the desk-scale convergence record.
#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,train_loss,dev_loss,lr` with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_loss,lr\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.dev_loss, r.lr));
        }
        out
    }
}

fn dense_loss(tape: &mut GradTape, logits: &Tensor, labels: &LabelMap, loss: &LossKind) -> Result<Tensor> {
    let probs = ops::softmax_per_fiber(tape, logits)?;
    match loss {
        LossKind::Nll => ops::dense_nll_loss(tape, &probs, labels),
        LossKind::Focal { gamma, class_weights } => {
            ops::focal_dense_loss(tape, &probs, labels, *gamma, class_weights.as_deref())
        }
    }
}

/// Mean per-pixel loss of a sample set under running statistics.
pub fn dataset_loss(net: &Network, samples: &[Sample], batch_size: usize, loss: &LossKind) -> Result<Real> {
    let mut total = 0.0f64;
    let mut pixels = 0.0f64;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, labels) = batch_tensor(&refs)?;
        let mut tape = GradTape::disabled();
        let logits = net.forward(&mut tape, &x, Mode::Infer)?;
        let l = dense_loss(&mut tape, &logits, &labels, loss)?;
        let px = labels.len() as f64;
        total += l.item() as f64 * px;
        pixels += px;
    }
    Ok((total / pixels.max(1.0)) as Real)
}

/// Training pixel accuracy under running statistics (argmax per fiber).
pub fn pixel_accuracy(net: &Network, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut hit = 0u64;
    let mut total = 0u64;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, labels) = batch_tensor(&refs)?;
        let logits = net.infer(&x)?;
        let c = logits.shape().c();
        for (fiber, &label) in logits.data().chunks_exact(c).zip(labels.data()) {
            let pred = fiber
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i as u16)
                .unwrap_or(0);
            hit += u64::from(pred == label);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// The epoch loop: shuffle, batch, forward, dense loss, backward, Adam;
/// dev loss feeds the plateau schedule after every epoch.
pub fn train_loop(net: &mut Network, train: &[Sample], dev: &[Sample], cfg: &TrainConfig) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::EmptyInput { op: "train_loop" });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }

    // optional in-training random validation carve-out
    let mut order: Vec<usize> = (0..train.len()).collect();
    let inner_val: Vec<usize> = match cfg.inner_val_fraction {
        Some(frac) if frac > 0.0 => {
            let mut rng = crate::rng::stream(cfg.seed, 0x1771);
            order.shuffle(&mut rng);
            let k = ((train.len() as f64 * frac).ceil() as usize).min(train.len() - 1);
            order.split_off(train.len() - k)
        }
        _ => Vec::new(),
    };

    let params = net.parameters();
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut schedule = PlateauSchedule::with_params(cfg.lr, cfg.plateau);
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        let mut rng = crate::rng::stream(cfg.seed, epoch as u64);
        let mut idx = order.clone();
        idx.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut epoch_pixels = 0.0f64;
        for (b, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, labels) = batch_tensor(&refs)?;
            let mut tape = GradTape::new();
            let logits = net.forward(&mut tape, &x, Mode::Train)?;
            let loss = dense_loss(&mut tape, &logits, &labels, &cfg.loss)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} batch {b}: {e}")))?;
            let grads = tape.backward(&loss)?;
            drop(tape); // release parameter references before the in-place update
            let mut params_mut = net.parameters_mut();
            adam_step(&mut params_mut, &grads, &mut adam)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} batch {b}: {e}")))?;
            let px = labels.len() as f64;
            epoch_loss += loss.item() as f64 * px;
            epoch_pixels += px;
        }
        let train_loss = (epoch_loss / epoch_pixels.max(1.0)) as Real;

        let dev_loss = if dev.is_empty() {
            train_loss // no dev split: the schedule monitors the train loss
        } else {
            dataset_loss(net, dev, cfg.batch_size, &cfg.loss)?
        };
        adam.lr = schedule.step(dev_loss);
        history.records.push(EpochRecord { epoch, train_loss, dev_loss, lr: adam.lr });

        if !inner_val.is_empty() {
            let held: Vec<Sample> = inner_val.iter().map(|&i| train[i].clone()).collect();
            let viloss = dataset_loss(net, &held, cfg.batch_size, &cfg.loss)?;
            if cfg.log {
                println!("epoch {epoch}: inner-val loss {viloss:.5}");
            }
        }
        if cfg.log {
            println!("epoch {epoch}: train {train_loss:.5} dev {dev_loss:.5} lr {}", adam.lr);
        }
        if let Some(target) = cfg.stop_at_train_accuracy {
            let acc = pixel_accuracy(net, train, cfg.batch_size)?;
            if cfg.log {
                println!("epoch {epoch}: train pixel accuracy {acc:.4}");
            }
            if acc >= target {
                break;
            }
        }
    }
    Ok(history)
}
