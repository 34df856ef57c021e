use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, softmax, softmax_cross_entropy, BatchNorm, Conv2d, Dense, Dropout, Mode};
use super::optim::{Adam, Param};
use super::tensor::Tensor4;
use super::Precision;
use crate::dataset::{balanced_epoch, AugmentConfig, Patch, PatchDataset};
use crate::error::{Error, Result};
use crate::resolution::argmax;
use crate::rng::{self, ChaCha8Rng, Stream};

/// Network shape. The last dense size is the class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub bands: usize,
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub dense_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub class_count: usize,
    /// Standard deviation of Gaussian noise added to inputs in training
    /// mode; 0 disables the layer.
    #[serde(default)]
    pub input_noise_sigma: f64,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn new(patch_size: usize, bands: usize, class_count: usize) -> Self {
        Self {
            patch_size,
            bands,
            conv_filters: vec![64, 64, 32, 16],
            kernel: 3,
            dense_sizes: vec![128, 64, class_count],
            dropout_rate: 0.25,
            class_count,
            input_noise_sigma: 0.0,
            precision: Precision::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("model config", reason));
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return bad(format!("patch size {} must be odd", self.patch_size));
        }
        if self.bands == 0 || self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return bad("bands and conv filter counts must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.dense_sizes.is_empty() || self.dense_sizes.contains(&0) {
            return bad("dense sizes must be positive".into());
        }
        if self.dense_sizes.last() != Some(&self.class_count) {
            return bad(format!(
                "last dense size {:?} must equal the class count {}",
                self.dense_sizes.last(),
                self.class_count
            ));
        }
        if self.class_count < 2 || self.class_count > 255 {
            return bad(format!("class count {} outside 2..=255", self.class_count));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.input_noise_sigma >= 0.0 && self.input_noise_sigma.is_finite()) {
            return bad("input noise sigma must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub per_label_samples: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 30,
            per_label_samples: 2000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 2
            && self.per_label_samples > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.augment.noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.augment.compose_noise_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "train config",
                "batch size must be at least 2; rates, betas and counts must be in range",
            ))
        }
    }
}

/// Stack patches into one `(n, size, size, bands)` tensor.
pub fn patches_to_tensor<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Result<Tensor4> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for p in patches {
        let d = (p.size(), p.bands());
        if dims.is_some_and(|x| x != d) {
            return Err(Error::invalid("batch", "patches differ in shape"));
        }
        dims = Some(d);
        data.extend_from_slice(p.values());
        n += 1;
    }
    let (s, b) = dims.unwrap_or((0, 0));
    Tensor4::new([n, s, s, b], data)
}

/// Conv blocks (conv, batch norm, ReLU, dropout), then dense layers with
/// ReLU and dropout on the hidden ones, then softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub(crate) config: ModelConfig,
    pub(crate) convs: Vec<Conv2d>,
    pub(crate) norms: Vec<BatchNorm>,
    pub(crate) denses: Vec<Dense>,
    pub(crate) adam: Adam,
    pub(crate) epochs_trained: usize,
    conv_drops: Vec<Dropout>,
    dense_drops: Vec<Dropout>,
    conv_pre: Vec<Tensor4>,
    dense_pre: Vec<Tensor4>,
}

impl Cnn {
    /// He-initialized network; all draws come from the weight-init stream
    /// of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::WeightInit, 0);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut channels = config.bands;
        for &f in &config.conv_filters {
            convs.push(Conv2d::new(config.kernel, channels, f, &mut rng)?.with_precision(config.precision));
            norms.push(BatchNorm::new(f));
            channels = f;
        }
        let mut denses = Vec::new();
        let mut width = config.patch_size * config.patch_size * channels;
        for &out in &config.dense_sizes {
            denses.push(Dense::new(width, out, &mut rng)?);
            width = out;
        }
        let drop = || Dropout::new(config.dropout_rate);
        Ok(Self {
            conv_drops: (0..convs.len()).map(|_| drop()).collect::<Result<_>>()?,
            dense_drops: (1..denses.len()).map(|_| drop()).collect::<Result<_>>()?,
            convs,
            norms,
            denses,
            adam: Adam::new(1e-3),
            epochs_trained: 0,
            conv_pre: Vec::new(),
            dense_pre: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    pub fn norms(&self) -> &[BatchNorm] {
        &self.norms
    }

    pub fn denses(&self) -> &[Dense] {
        &self.denses
    }

    pub fn convs_mut(&mut self) -> &mut [Conv2d] {
        &mut self.convs
    }

    pub fn denses_mut(&mut self) -> &mut [Dense] {
        &mut self.denses
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let c = &self.config;
        let want = [x.batch(), c.patch_size, c.patch_size, c.bands];
        if x.dims() != want {
            return Err(Error::invalid(
                "model input",
                format!("got {:?}, model expects {:?}", x.dims(), want),
            ));
        }
        Ok(())
    }

    /// Logits in inference mode. Pure: samples are processed independently.
    pub fn predict_logits(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = relu(&bn.infer(&conv.infer(&h)?)?);
        }
        h = h.flatten();
        let last = self.denses.len() - 1;
        for (i, dense) in self.denses.iter().enumerate() {
            h = dense.infer(&h)?;
            if i < last {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    /// Class probabilities in inference mode, one row per sample.
    pub fn predict(&self, x: &Tensor4) -> Result<Vec<f64>> {
        Ok(softmax(&self.predict_logits(x)?))
    }

    /// Logits, caching activations for `backward` in training mode.
    pub fn forward(&mut self, x: &Tensor4, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor4> {
        if mode == Mode::Infer {
            return self.predict_logits(x);
        }
        self.check_input(x)?;
        let mut h = x.clone();
        if self.config.input_noise_sigma > 0.0 {
            let s = self.config.input_noise_sigma;
            for v in h.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += s * z;
            }
        }
        self.conv_pre.clear();
        self.dense_pre.clear();
        for i in 0..self.convs.len() {
            let pre = self.norms[i].forward(&self.convs[i].forward(&h)?, Mode::Train)?;
            h = self.conv_drops[i].forward(&relu(&pre), Mode::Train, rng);
            self.conv_pre.push(pre);
        }
        h = h.flatten();
        let last = self.denses.len() - 1;
        for i in 0..self.denses.len() {
            h = self.denses[i].forward(&h)?;
            if i < last {
                let pre = h;
                h = self.dense_drops[i].forward(&relu(&pre), Mode::Train, rng);
                self.dense_pre.push(pre);
            }
        }
        Ok(h)
    }

    /// Accumulate parameter gradients for the last training-mode forward.
    pub fn backward(&mut self, grad_logits: &Tensor4) -> Result<()> {
        if self.conv_pre.len() != self.convs.len() {
            return Err(Error::invalid("model backward", "no training-mode forward to differentiate"));
        }
        let mut g = grad_logits.clone();
        for i in (0..self.denses.len()).rev() {
            if i < self.denses.len() - 1 {
                g = relu_backward(&self.dense_pre[i], &self.dense_drops[i].backward(&g));
            }
            g = self.denses[i].backward(&g)?;
        }
        let [n, s, _, c] = self.conv_pre.last().map(Tensor4::dims).unwrap_or_default();
        g = g.reshape([n, s, s, c])?;
        for i in (0..self.convs.len()).rev() {
            g = relu_backward(&self.conv_pre[i], &self.conv_drops[i].backward(&g));
            g = self.norms[i].backward(&g)?;
            g = self.convs[i].backward(&g)?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for (conv, bn) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.extend(conv.params_mut());
            out.extend(bn.params_mut());
        }
        for dense in self.denses.iter_mut() {
            out.extend(dense.params_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Drop gradients and activation caches, leaving only the state a
    /// checkpoint stores.
    pub fn clear_transient(&mut self) {
        self.zero_grad();
        self.convs.iter_mut().for_each(Conv2d::clear_cache);
        self.norms.iter_mut().for_each(BatchNorm::clear_cache);
        self.denses.iter_mut().for_each(Dense::clear_cache);
        self.conv_drops.iter_mut().chain(self.dense_drops.iter_mut()).for_each(Dropout::clear_cache);
        self.conv_pre.clear();
        self.dense_pre.clear();
    }

    /// One Adam update on one batch. Returns the batch loss and the number
    /// of samples whose training-mode prediction was correct.
    pub fn train_step(&mut self, x: &Tensor4, labels: &[u8], rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
        let logits = self.forward(x, Mode::Train, rng)?;
        let (loss, grad, probs) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical("training loss is not finite".into()));
        }
        self.zero_grad();
        self.backward(&grad)?;
        let mut adam = self.adam;
        adam.step(&mut self.params_mut())?;
        self.adam = adam;
        let d = self.config.class_count;
        let correct = probs
            .chunks_exact(d)
            .zip(labels)
            .filter(|(p, &l)| argmax(p) == l as usize)
            .count();
        Ok((loss, correct))
    }

    /// Fraction of patches whose inference-mode argmax equals their label.
    pub fn accuracy(&self, patches: &[Patch]) -> Result<f64> {
        if patches.is_empty() {
            return Err(Error::invalid("accuracy", "no patches"));
        }
        let d = self.config.class_count;
        let mut correct = 0;
        for chunk in patches.chunks(256) {
            let probs = self.predict(&patches_to_tensor(chunk)?)?;
            correct += probs
                .chunks_exact(d)
                .zip(chunk)
                .filter(|(p, patch)| argmax(p) == patch.label as usize)
                .count();
        }
        Ok(correct as f64 / patches.len() as f64)
    }

    /// Reject datasets whose geometry or classes do not fit the network.
    pub fn check_dataset(&self, ds: &PatchDataset) -> Result<()> {
        let c = &self.config;
        if ds.patch_size() != c.patch_size || ds.bands() != c.bands || ds.class_count() != c.class_count {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "patches {}x{}x{} with {} classes do not fit a model for {}x{}x{} with {} classes",
                    ds.patch_size(),
                    ds.patch_size(),
                    ds.bands(),
                    ds.class_count(),
                    c.patch_size,
                    c.patch_size,
                    c.bands,
                    c.class_count
                ),
            ));
        }
        Ok(())
    }
}

/// Consume `samples` in order in batches of `cfg.batch_size`, one Adam step
/// per batch. A trailing batch of one sample is skipped because batch norm
/// needs two. Returns the sample-weighted mean loss and training accuracy.
pub fn train_epoch(model: &mut Cnn, samples: &[Patch], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    cfg.validate()?;
    model.adam.learning_rate = cfg.learning_rate;
    model.adam.beta1 = cfg.beta1;
    model.adam.beta2 = cfg.beta2;
    model.adam.epsilon = cfg.epsilon;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut seen = 0;
    for batch in samples.chunks(cfg.batch_size) {
        if batch.len() < 2 {
            continue;
        }
        let labels: Vec<u8> = batch.iter().map(|p| p.label).collect();
        let (loss, ok) = model.train_step(&patches_to_tensor(batch)?, &labels, rng)?;
        loss_sum += loss * batch.len() as f64;
        correct += ok;
        seen += batch.len();
    }
    model.clear_transient();
    if seen == 0 {
        return Err(Error::invalid("training", "epoch holds fewer than two samples"));
    }
    Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Train for `cfg.epochs` balanced augmented epochs. Epoch `e` (counted
/// over the model's lifetime) draws its samples from the epoch stream and
/// its dropout masks from the dropout stream of `cfg.seed`, index `e`.
pub fn train(
    model: &mut Cnn,
    train_set: &PatchDataset,
    val_set: Option<&PatchDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    model.check_dataset(train_set)?;
    if let Some(v) = val_set {
        model.check_dataset(v)?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let e = model.epochs_trained as u64;
        let samples = balanced_epoch(
            train_set,
            cfg.per_label_samples,
            &cfg.augment,
            &mut rng::stream(cfg.seed, Stream::Epoch, e),
        )?;
        let (loss, train_accuracy) = train_epoch(model, &samples, cfg, &mut rng::stream(cfg.seed, Stream::Dropout, e))?;
        model.epochs_trained += 1;
        let val_accuracy = match val_set {
            Some(v) if !v.is_empty() => Some(model.accuracy(v.patches())?),
            _ => None,
        };
        let stats = EpochStats {
            epoch: model.epochs_trained,
            loss,
            train_accuracy,
            val_accuracy,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// CSV with header `epoch,loss,train_accuracy,val_accuracy`; a missing
/// validation accuracy is an empty field.
pub fn write_history(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let io = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["epoch", "loss", "train_accuracy", "val_accuracy"]).map_err(io)?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.loss.to_string(),
            h.train_accuracy.to_string(),
            h.val_accuracy.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
