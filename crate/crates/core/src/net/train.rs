//! Stochastic gradient descent training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{softmax_cross_entropy_grad, weighted_cross_entropy, LossOutput, IGNORE_LABEL};
use super::model::{BandNorm, LayerParams, Model, NetworkSpec};
use super::tensor::Tensor;
use crate::fusion::ProbMap;
use crate::labels::LabelMap;
use crate::raster::{band_statistics, MultibandRaster};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    None,
    /// Median-frequency balancing computed over the training labels.
    ClassFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReduction {
    /// Weighted loss summed over every labeled pixel of the batch.
    Sum,
    /// The same sum divided by the number of labeled pixels.
    Mean,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub loss_weighting: LossWeighting,
    pub reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 3,
            iterations: 2000,
            seed: 0,
            loss_weighting: LossWeighting::ClassFrequency,
            reduction: LossReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `v <- momentum * v - lr * (grad + weight_decay * param); param <- param + v`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], velocity: &mut [f32], cfg: &TrainConfig) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v - cfg.learning_rate * (g + cfg.weight_decay * *p);
        *p += *v;
    }
}

#[derive(Debug, Clone)]
pub struct TrainingChip {
    pub image: MultibandRaster<f32>,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Loss per iteration, reduced as configured.
    pub losses: Vec<f64>,
    /// Pixels whose labeled-class probability hit the log clamp, over the whole run.
    pub clamped: usize,
}

/// Median-frequency weights: `w_c = median(freq) / freq_c`, where `freq_c` is the
/// pixel count of class `c` over the pixel count of the chips containing `c`.
/// Classes that never occur get weight 1.
pub fn median_frequency_weights(labels: &[&LabelMap], classes: usize) -> Vec<f32> {
    let mut count = vec![0u64; classes];
    let mut present_in = vec![0u64; classes];
    for l in labels {
        let mut local = vec![0u64; classes];
        for &y in l.raster().data() {
            if y >= 1 && y as usize <= classes {
                local[y as usize - 1] += 1;
            }
        }
        let total = l.raster().len() as u64;
        for c in 0..classes {
            if local[c] > 0 {
                count[c] += local[c];
                present_in[c] += total;
            }
        }
    }
    let freq: Vec<Option<f64>> = (0..classes)
        .map(|c| (count[c] > 0).then(|| count[c] as f64 / present_in[c] as f64))
        .collect();
    let mut seen: Vec<f64> = freq.iter().flatten().copied().collect();
    if seen.is_empty() {
        return vec![1.0; classes];
    }
    seen.sort_by(|a, b| a.total_cmp(b));
    let median = if seen.len() % 2 == 1 {
        seen[seen.len() / 2]
    } else {
        0.5 * (seen[seen.len() / 2 - 1] + seen[seen.len() / 2])
    };
    freq.iter()
        .map(|f| f.map_or(1.0, |f| (median / f) as f32))
        .collect()
}

/// Loss and probability gradient for a probability map against a label map.
pub fn weighted_cross_entropy_map(probs: &ProbMap, labels: &LabelMap, weights: &[f32]) -> Result<LossOutput<f32>> {
    if probs.width() != labels.width() || probs.height() != labels.height() {
        return Err(Error::shape("probability map and labels differ in size"));
    }
    if probs.classes() != labels.classes() {
        return Err(Error::shape(format!(
            "{} probability classes for {}-class labels",
            probs.classes(),
            labels.classes()
        )));
    }
    let t = Tensor::from_vec([1, probs.classes(), probs.height(), probs.width()], probs.data().to_vec())?;
    weighted_cross_entropy(&t, labels.raster().data(), weights)
}

struct Sample {
    input: Tensor<f32>,
    labels: Vec<i32>,
    counted: usize,
}

fn prepare(model: &Model, chip: &TrainingChip) -> Result<Sample> {
    let planes = model.prepare_input(&chip.image)?;
    let (w, h) = (chip.image.width(), chip.image.height());
    if chip.labels.width() != w || chip.labels.height() != h {
        return Err(Error::shape("chip image and labels differ in size"));
    }
    let a = model.alignment();
    let (pw, ph) = (w.div_ceil(a) * a, h.div_ceil(a) * a);
    let mut input = Tensor::zeros([1, planes.len(), ph, pw]);
    for (c, plane) in planes.iter().enumerate() {
        let dst = input.plane_mut(0, c);
        for y in 0..h {
            dst[y * pw..y * pw + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
        }
    }
    let mut labels = vec![IGNORE_LABEL; pw * ph];
    for y in 0..h {
        labels[y * pw..y * pw + w].copy_from_slice(chip.labels.raster().row(y));
    }
    Ok(Sample {
        input,
        labels,
        counted: w * h,
    })
}

/// Normalization from band statistics over the training images: centre on the
/// mean, divide by half the value range.
pub fn normalization_from(chips: &[TrainingChip]) -> Result<Vec<BandNorm>> {
    let stats = band_statistics(chips.iter().map(|c| &c.image))?;
    Ok(stats
        .bands
        .iter()
        .map(|b| BandNorm {
            mean: b.mean as f32,
            scale: (((b.max - b.min) / 2.0) as f32).max(1e-6),
        })
        .collect())
}

pub fn train(spec: NetworkSpec, chips: &[TrainingChip], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(spec, chips, cfg, |_, _| {})
}

/// Deterministic for a given seed: initialization and batch order come from two
/// fixed ChaCha streams and every kernel reduces in a fixed order.
pub fn train_with_progress(
    spec: NetworkSpec,
    chips: &[TrainingChip],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = chips.first().ok_or_else(|| Error::argument("training set is empty"))?;
    let mode = first.labels.mode();
    for chip in chips {
        if chip.image.band_count() != spec.in_channels {
            return Err(Error::shape(format!(
                "chip has {} bands, network expects {}",
                chip.image.band_count(),
                spec.in_channels
            )));
        }
        if chip.labels.mode() != mode {
            return Err(Error::argument("chips mix label modes"));
        }
        if chip.image.band_names() != first.image.band_names() {
            return Err(Error::argument("chips disagree on band names"));
        }
    }
    if mode.classes() != spec.classes {
        return Err(Error::Config(format!(
            "{}-class labels for a {}-class network",
            mode.classes(),
            spec.classes
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);

    let mut model = Model::init(spec, &mut init_rng)?;
    model.set_input_bands(first.image.band_names().to_vec())?;
    model.set_normalization(normalization_from(chips)?)?;

    let weights = match cfg.loss_weighting {
        LossWeighting::None => vec![1.0; model.classes()],
        LossWeighting::ClassFrequency => {
            let labels: Vec<&LabelMap> = chips.iter().map(|c| &c.labels).collect();
            median_frequency_weights(&labels, model.classes())
        }
    };
    let samples = chips.iter().map(|c| prepare(&model, c)).collect::<Result<Vec<_>>>()?;

    let mut velocity: Vec<Option<LayerParams>> = model
        .params
        .iter()
        .map(|p| {
            p.as_ref().map(|p| LayerParams {
                weight: Tensor::zeros(p.weight.shape()),
                bias: vec![0.0; p.bias.len()],
            })
        })
        .collect();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut clamped = 0;

    for iteration in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let counted: usize = batch.iter().map(|&i| samples[i].counted).sum();
        let scale = match cfg.reduction {
            LossReduction::Sum => 1.0,
            LossReduction::Mean => 1.0 / counted as f32,
        };

        let mut total: Vec<Option<LayerParams>> = vec![None; model.params.len()];
        let mut loss = 0.0f64;
        for &i in &batch {
            let s = &samples[i];
            let (probs, trace) = model.forward(s.input.clone(), true)?;
            let out = weighted_cross_entropy(&probs, &s.labels, &weights)?;
            loss += out.loss as f64;
            clamped += out.clamped;
            let g = softmax_cross_entropy_grad(&probs, &s.labels, &weights, scale)?;
            let grads = model.backward(trace.as_ref().expect("trace kept"), g)?;
            accumulate(&mut total, grads);
        }
        let loss = loss * scale as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        losses.push(loss);
        progress(iteration, loss);

        for ((p, g), v) in model.params.iter_mut().zip(&total).zip(velocity.iter_mut()) {
            if let (Some(p), Some(g), Some(v)) = (p.as_mut(), g.as_ref(), v.as_mut()) {
                sgd_step(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), cfg);
                sgd_step(&mut p.bias, &g.bias, &mut v.bias, cfg);
            }
        }
        if model
            .params
            .iter()
            .flatten()
            .any(|p| p.weight.data().iter().chain(&p.bias).any(|v| !v.is_finite()))
        {
            return Err(Error::Divergence { iteration, loss });
        }
    }
    Ok(TrainOutcome {
        model,
        losses,
        clamped,
    })
}

fn accumulate(total: &mut [Option<LayerParams>], grads: Vec<Option<LayerParams>>) {
    for (t, g) in total.iter_mut().zip(grads) {
        match (t.as_mut(), g) {
            (None, g) => *t = g,
            (Some(t), Some(g)) => {
                for (a, b) in t.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *a += b;
                }
                for (a, b) in t.bias.iter_mut().zip(&g.bias) {
                    *a += b;
                }
            }
            (Some(_), None) => {}
        }
    }
}

/// `iteration,loss` CSV.
pub fn write_loss_curve(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}")?;
    }
    Ok(())
}
