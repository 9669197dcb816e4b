//! SGD training loop: polynomial learning-rate decay, momentum updates,
//! label-consistent augmentation, seeded shuffling, per-epoch loss history.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::impair;
use crate::map::{ClassMap, IGNORE_INDEX};
use crate::tensor::{softmax_cross_entropy, Element, Shape, Tensor};

/// Capture condition of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionTag {
    Daytime,
    Rainy,
    Night,
    Evening,
    Dusty,
    Synthetic,
}

/// One image with its per-pixel labels.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Tensor<f32>,
    pub mask: ClassMap,
    pub condition: ConditionTag,
}

impl LabeledSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let s = self.image.shape();
        if s.h != self.mask.h || s.w != self.mask.w {
            return Err(Error::Validation(format!(
                "sample: image {}x{} vs mask {}x{}",
                s.h, s.w, self.mask.h, self.mask.w
            )));
        }
        for &v in &self.mask.data {
            if v != IGNORE_INDEX && (v as usize) >= num_classes {
                return Err(Error::Validation(format!(
                    "sample: mask value {v} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Augmentation toggles; zero disables each effect.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub rotate_deg_max: f64,
    pub crop_fraction: f64,
    pub noise_sigma: f64,
    pub fog_severity: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotate_deg_max: 0.0, crop_fraction: 0.0, noise_sigma: 0.0, fog_severity: 0.0 }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.007,
            epochs: 200,
            batch_size: 4,
            poly_power: 1.0,
            momentum: 0.9,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.augment.crop_fraction) {
            return Err(Error::Config("crop_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `base_lr * (1 - step/total_steps)^power` — first-order polynomial decay
/// to zero at `power = 1`.
pub fn poly_lr(base_lr: f64, step: usize, total_steps: usize, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("poly_lr: total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "poly_lr: step {step} beyond total_steps {total_steps}"
        )));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// Momentum buffers matching the graph's parameter visitation order.
pub struct SgdState<T: Element> {
    velocity: Vec<Vec<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(graph: &NetworkGraph<T>) -> Self {
        SgdState { velocity: graph.param_sizes().iter().map(|&n| vec![T::zero(); n]).collect() }
    }
}

/// One momentum-SGD update: `v <- momentum * v + g; p <- p - lr * v` over
/// every parameter tensor. Parameters without a gradient buffer see g = 0.
pub fn sgd_step<T: Element>(
    graph: &mut NetworkGraph<T>,
    lr: f64,
    momentum: f64,
    state: &mut SgdState<T>,
) -> Result<()> {
    let lr = T::from_f64(lr);
    let momentum = T::from_f64(momentum);
    let mut idx = 0usize;
    let velocity = &mut state.velocity;
    let mut size_error = None;
    graph.visit_params_mut(|data, grad| {
        if idx >= velocity.len() || velocity[idx].len() != data.len() {
            size_error = Some(idx);
            idx += 1;
            return;
        }
        let v = &mut velocity[idx];
        match grad {
            Some(g) => {
                for ((vi, p), gi) in v.iter_mut().zip(data.iter_mut()).zip(g) {
                    *vi = momentum * *vi + *gi;
                    *p = *p - lr * *vi;
                }
            }
            None => {
                for (vi, p) in v.iter_mut().zip(data.iter_mut()) {
                    *vi = momentum * *vi;
                    *p = *p - lr * *vi;
                }
            }
        }
        idx += 1;
    });
    if let Some(i) = size_error {
        return Err(Error::Validation(format!(
            "sgd_step: velocity state does not match parameter tensor {i}"
        )));
    }
    Ok(())
}

/// Nearest-neighbor rotation for label maps; out-of-canvas sources become the
/// ignore id. Exact right angles on square canvases permute pixels exactly.
fn rotate_mask(mask: &ClassMap, degrees: f64) -> ClassMap {
    let (h, w) = (mask.h, mask.w);
    let rad = degrees.to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = ClassMap::filled(h, w, IGNORE_INDEX);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let rx = sx.round();
            let ry = sy.round();
            if rx >= 0.0 && rx < w as f64 && ry >= 0.0 && ry < h as f64 {
                out.set(y, x, mask.at(ry as usize, rx as usize));
            }
        }
    }
    out
}

/// Bilinear rotation for images; out-of-canvas sources fill with zero.
fn rotate_image(image: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    let s = image.shape();
    let rad = degrees.to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    let (cy, cx) = ((s.h as f64 - 1.0) / 2.0, (s.w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let sx = cx + cos * dx + sin * dy;
                    let sy = cy - sin * dx + cos * dy;
                    if sx < 0.0 || sy < 0.0 || sx > (s.w - 1) as f64 || sy > (s.h - 1) as f64 {
                        continue;
                    }
                    let x0 = sx.floor() as usize;
                    let y0 = sy.floor() as usize;
                    let x1 = (x0 + 1).min(s.w - 1);
                    let y1 = (y0 + 1).min(s.h - 1);
                    let fx = (sx - x0 as f64) as f32;
                    let fy = (sy - y0 as f64) as f32;
                    let top = image.at(n, c, y0, x0) * (1.0 - fx) + image.at(n, c, y0, x1) * fx;
                    let bot = image.at(n, c, y1, x0) * (1.0 - fx) + image.at(n, c, y1, x1) * fx;
                    out.set(n, c, y, x, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

fn nearest_resize_mask(mask: &ClassMap, out_h: usize, out_w: usize) -> ClassMap {
    let mut out = ClassMap::filled(out_h, out_w, IGNORE_INDEX);
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * mask.h as f64 / out_h as f64 - 0.5)
            .round()
            .clamp(0.0, (mask.h - 1) as f64) as usize;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * mask.w as f64 / out_w as f64 - 0.5)
                .round()
                .clamp(0.0, (mask.w - 1) as f64) as usize;
            out.set(y, x, mask.at(sy, sx));
        }
    }
    out
}

fn crop_sample(sample: &mut LabeledSample, fraction: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let s = sample.image.shape();
    let ch = (((1.0 - fraction) * s.h as f64).ceil() as usize).min(s.h);
    let cw = (((1.0 - fraction) * s.w as f64).ceil() as usize).min(s.w);
    if ch == 0 || cw == 0 {
        return Err(Error::Config(format!(
            "augment: crop fraction {fraction} leaves no pixels"
        )));
    }
    let oy = rng.gen_range(0..=(s.h - ch));
    let ox = rng.gen_range(0..=(s.w - cw));

    let mut cropped = Tensor::zeros(Shape::new(s.n, s.c, ch, cw));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..ch {
                for x in 0..cw {
                    cropped.set(n, c, y, x, sample.image.at(n, c, oy + y, ox + x));
                }
            }
        }
    }
    let mut mask = ClassMap::filled(ch, cw, IGNORE_INDEX);
    for y in 0..ch {
        for x in 0..cw {
            mask.set(y, x, sample.mask.at(oy + y, ox + x));
        }
    }
    sample.image = crate::tensor::bilinear_resize(&cropped, s.h, s.w)?;
    sample.mask = nearest_resize_mask(&mask, s.h, s.w);
    Ok(())
}

/// Label-consistent augmentation: rotation and crop transform image and mask
/// together (mask via nearest neighbor, rotation fill = ignore id); noise and
/// fog touch the image only. Deterministic given the rng. All-zero toggles
/// return the sample unchanged.
pub fn augment(
    sample: &LabeledSample,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledSample> {
    let mut out = sample.clone();
    if config.rotate_deg_max > 0.0 {
        let angle = rng.gen_range(-config.rotate_deg_max..=config.rotate_deg_max);
        out.image = rotate_image(&out.image, angle);
        out.mask = rotate_mask(&out.mask, angle);
    }
    if config.crop_fraction > 0.0 {
        crop_sample(&mut out, config.crop_fraction, rng)?;
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, config.noise_sigma).expect("positive sigma");
        for v in out.image.data_mut() {
            *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
    if config.fog_severity > 0.0 {
        out.image = impair::apply_fog(&out.image, config.fog_severity, rng.gen())?;
    }
    Ok(out)
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

pub fn loss_history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for e in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.mean_loss, e.lr));
    }
    out
}

/// Full training loop: per-step polynomial decay over
/// `epochs * ceil(N / batch)` steps, seeded per-epoch shuffling, the last
/// partial batch kept. Identical `(seed, samples, graph init)` reproduce the
/// loss history bit for bit.
pub fn train(
    graph: &mut NetworkGraph<f32>,
    samples: &[LabeledSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("train: no samples".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        s.validate(graph.num_classes())
            .map_err(|e| Error::Validation(format!("sample {i}: {e}")))?;
    }

    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mut sgd = SgdState::new(graph);
    let mut history = Vec::with_capacity(config.epochs);
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(impair::derive_seed(config.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        let mut first_lr = 0.0f64;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            // Assemble the batch, augmenting deterministically per
            // (seed, epoch, sample index).
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(impair::derive_seed(
                    impair::derive_seed(config.seed, epoch as u64),
                    si as u64,
                ));
                let aug = augment(&samples[si], &config.augment, &mut rng)?;
                images.push(aug.image);
                labels.push(aug.mask);
            }
            let refs: Vec<&Tensor<f32>> = images.iter().collect();
            let batch = concat_batch(&refs)?;

            graph.zero_grads();
            let store = graph.forward_train(&batch)?;
            let ce = softmax_cross_entropy(store.output(), &labels, Some(IGNORE_INDEX))?;
            graph.backward(&store, &ce.grad)?;

            let lr = poly_lr(config.base_lr, global_step, total_steps, config.poly_power)?;
            if bi == 0 {
                first_lr = lr;
            }
            sgd_step(graph, lr, config.momentum, &mut sgd)?;
            epoch_loss += ce.loss;
            global_step += 1;
        }

        let stats = EpochStats {
            epoch,
            mean_loss: epoch_loss / steps_per_epoch as f64,
            lr: first_lr,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Stacks single-item tensors along the batch axis.
pub fn concat_batch(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Dimension("concat_batch: no items".into()))?;
    let s = first.shape();
    let mut out = Tensor::zeros(Shape::new(items.len(), s.c, s.h, s.w));
    let item_len = s.c * s.h * s.w;
    for (i, t) in items.iter().enumerate() {
        let ts = t.shape();
        if ts.n != 1 || ts.c != s.c || ts.h != s.h || ts.w != s.w {
            return Err(Error::Dimension(format!(
                "concat_batch: item {i} is {ts}, expected 1x{}x{}x{}",
                s.c, s.h, s.w
            )));
        }
        out.data_mut()[i * item_len..(i + 1) * item_len].copy_from_slice(t.data());
    }
    Ok(out)
}
