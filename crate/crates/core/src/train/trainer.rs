use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, mean_logloss};
use super::optim::{Optimizer, OptimizerConfig};
use crate::data::{Impression, Sample};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::model::{HccmModel, Variant, VisualInput};
use crate::tensor::Graph;

const STREAM_SHUFFLE: u64 = 0x5_0000;

/// Arithmetic precision of training. Only 64-bit is implemented; the field
/// exists so configs state it explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub precision: Precision,
    /// All arithmetic runs on one thread in a fixed order, so runs are
    /// bit-reproducible either way; the flag is recorded in reports.
    pub deterministic: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Hccm,
            batch_size: 256,
            epochs: 3,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            seed: 7,
            precision: Precision::F64,
            deterministic: true,
            eval_batch_size: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config("adam needs beta1, beta2 in [0,1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub seed: u64,
    pub train_samples: usize,
    /// Train logloss of the untrained model.
    pub initial_loss: f64,
    /// Mean batch logloss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub test_samples: usize,
    pub test_auc: Option<f64>,
    pub test_logloss: Option<f64>,
    /// Kept out of the serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    pub param_checksum: String,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant        {}", self.variant);
        let _ = writeln!(s, "seed           {}", self.seed);
        let _ = writeln!(s, "train samples  {}", self.train_samples);
        let _ = writeln!(s, "initial loss   {:.6}", self.initial_loss);
        for (i, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "epoch {:<8} {:.6}", i + 1, l);
        }
        if let Some(a) = self.test_auc {
            let _ = writeln!(s, "test AUC       {a:.4}");
        }
        if let Some(l) = self.test_logloss {
            let _ = writeln!(s, "test logloss   {l:.6}");
        }
        let _ = writeln!(s, "checksum       {}", self.param_checksum);
        s
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<f64>,
    pub logloss: f64,
    pub auc: Option<f64>,
}

/// Forward-only scoring in fixed-size chunks.
pub fn predict_all(
    model: &HccmModel,
    samples: &[Sample],
    visual: Option<VisualInput<'_>>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Impression> = chunk.iter().map(|s| &s.impression).collect();
        out.extend(model.predict_batch(&batch, visual)?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &HccmModel,
    samples: &[Sample],
    visual: Option<VisualInput<'_>>,
    batch_size: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("evaluation on an empty split".into()));
    }
    let predictions = predict_all(model, samples, visual, batch_size)?;
    let labels: Vec<f64> = samples.iter().map(Sample::label_f64).collect();
    let raw: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let auc = match auc(&predictions, &raw) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        logloss: mean_logloss(&predictions, &labels),
        predictions,
        auc,
    })
}

fn param_norms(model: &HccmModel) -> String {
    model
        .params()
        .iter()
        .map(|(_, p)| format!("{}={:.3e}", p.name, p.value.l2_norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Mini-batch training on logloss; optionally scores a held-out split.
pub fn train(
    model: &mut HccmModel,
    train_set: &[Sample],
    test_set: Option<&[Sample]>,
    cfg: &TrainConfig,
    visual: Option<VisualInput<'_>>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if cfg.variant != model.variant() {
        return Err(Error::Config(format!(
            "train config is for {} but the model is {}",
            cfg.variant,
            model.variant()
        )));
    }
    let started = Instant::now();
    let initial_loss = evaluate(model, train_set, visual, cfg.eval_batch_size)?.logloss;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE + epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Impression> = idx.iter().map(|&i| &train_set[i].impression).collect();
            let labels: Vec<f64> = idx.iter().map(|&i| train_set[i].label_f64()).collect();
            let non_finite = |model: &HccmModel| Error::NonFiniteLoss {
                epoch,
                batch: bi,
                norms: param_norms(model),
            };
            let grads = {
                let mut g = Graph::with_params(model.params());
                let loss = match model.loss(&mut g, &batch, &labels, visual) {
                    Ok(l) => l,
                    Err(Error::NumericDomain(_)) => return Err(non_finite(model)),
                    Err(e) => return Err(e),
                };
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(non_finite(model));
                }
                total += value * idx.len() as f64;
                match g.backward(loss) {
                    Ok(grads) => grads,
                    Err(Error::NumericDomain(_)) => return Err(non_finite(model)),
                    Err(e) => return Err(e),
                }
            };
            opt.step(model.params_mut(), &grads);
        }
        let mean = total / train_set.len() as f64;
        log::info!("{} epoch {} train logloss {mean:.6}", cfg.variant, epoch + 1);
        epoch_losses.push(mean);
    }

    // Match the precision of a saved checkpoint.
    model.params_mut().round_to_f32();
    let (test_auc, test_logloss, test_samples) = match test_set {
        Some(test) if !test.is_empty() => {
            let ev = evaluate(model, test, visual, cfg.eval_batch_size)?;
            (ev.auc, Some(ev.logloss), test.len())
        }
        _ => (None, None, 0),
    };
    Ok(MetricsReport {
        variant: cfg.variant,
        seed: cfg.seed,
        train_samples: train_set.len(),
        initial_loss,
        epoch_losses,
        test_samples,
        test_auc,
        test_logloss,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        param_checksum: format!("{:016x}", model.checksum()),
    })
}
