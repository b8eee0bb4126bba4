//! Single training runs on the synthetic benchmark: build, train, evaluate.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::MetaBatch;
use crate::metrics::{accuracy, grouped_dcor2, pearson, MetricsReport};
use crate::nn::{CnnConfig, Network, NormMode};
use crate::synth::{Dataset, DatasetSplit};
use crate::tensor::Tensor;
use crate::trainer::{fit, TrainConfig, TrainData, TrainLog};

/// Rows per inference chunk, to bound activation memory.
pub const EVAL_CHUNK: usize = 200;

/// Which split dcor² is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DcorOn {
    Train,
    #[default]
    Eval,
}

impl DcorOn {
    pub fn name(self) -> &'static str {
        match self {
            DcorOn::Train => "train",
            DcorOn::Eval => "eval",
        }
    }
}

impl fmt::Display for DcorOn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DcorOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(DcorOn::Train),
            "eval" => Ok(DcorOn::Eval),
            other => Err(Error::Config(format!("dcor split must be train or eval, got `{other}`"))),
        }
    }
}

/// Builds the baseline CNN for `norm`, wired to the split's training
/// metadata when the method needs it.
pub fn build_network(cfg: &CnnConfig, norm: NormMode, split: &DatasetSplit, seed: u64) -> Result<Network<f32>> {
    let meta = norm.needs_metadata().then_some(&split.train_meta);
    Network::baseline_cnn(cfg, norm, meta, seed)
}

/// Trains a fresh network on the training split.
pub fn train_model(dataset: &Dataset, split: &DatasetSplit, cfg: &TrainConfig) -> Result<(Network<f32>, TrainLog)> {
    let mut net = build_network(&CnnConfig::default(), cfg.norm_mode, split, cfg.seed)?;
    let x = dataset.images(&split.train)?;
    let y = dataset.labels(&split.train);
    let data = TrainData {
        x: &x,
        y: &y,
        meta: cfg.norm_mode.needs_metadata().then_some(&split.train_meta),
    };
    let log = fit(&mut net, &data, cfg)?;
    Ok((net, log))
}

/// The method a network was built for, read from its layers.
pub fn infer_method(net: &Network<f32>) -> NormMode {
    if !net.pmdn_layers().is_empty() {
        NormMode::Pmdn
    } else if !net.mdn_layers().is_empty() {
        NormMode::Mdn
    } else if (0..net.layer_count()).any(|i| net.batchnorm(i).is_some()) {
        NormMode::BatchNorm
    } else {
        NormMode::None
    }
}

/// Logits and feature-tap activations for `idx`, computed in chunks.
pub fn predict(
    net: &Network<f32>,
    dataset: &Dataset,
    idx: &[usize],
    meta: Option<&MetaBatch>,
) -> Result<(Vec<f64>, Tensor)> {
    let mut logits = Vec::with_capacity(idx.len());
    let mut feats: Vec<f64> = Vec::new();
    let mut width = 0;
    for (c, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let x = dataset.images(chunk)?;
        let rows: Vec<usize> = (c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len()).collect();
        let m = meta.map(|m| MetaBatch::new(m.values().select_rows(&rows)?, m.roles().to_vec())).transpose()?;
        let (out, f) = net.infer_with_features(&x, m.as_ref())?;
        logits.extend(out.data().iter().map(|&v| v as f64));
        let f = f.ok_or_else(|| Error::Config("network has no feature tap".into()))?;
        width = f.row_len();
        feats.extend(f.data().iter().map(|&v| v as f64));
    }
    Ok((logits, Tensor::new([idx.len(), width], feats)?))
}

/// Accuracy on the eval split and within-group dcor² between the feature
/// layer and the raw confounder on the chosen split.
pub fn evaluate(
    net: &Network<f32>,
    dataset: &Dataset,
    split: &DatasetSplit,
    dcor_on: DcorOn,
    batch_size: usize,
) -> Result<MetricsReport> {
    let eval_meta = split.eval_meta.all_rows();
    let (logits, eval_feats) = predict(net, dataset, &split.eval, Some(&eval_meta))?;
    let labels = dataset.labels(&split.eval);
    let acc = accuracy(&logits, &labels)?;
    let conf = dataset.confounders(&split.eval)?;
    let pearson_meta = match pearson(&logits, conf.data()) {
        Ok(r) => r,
        Err(Error::ConstantInput) => 0.0,
        Err(e) => return Err(e),
    };
    let dcor = match dcor_on {
        DcorOn::Eval => grouped_dcor2(&eval_feats, &conf, &labels)?,
        DcorOn::Train => {
            let train_meta = split.train_meta.without_label()?.all_rows();
            let (_, feats) = predict(net, dataset, &split.train, Some(&train_meta))?;
            grouped_dcor2(&feats, &dataset.confounders(&split.train)?, &dataset.labels(&split.train))?
        }
    };
    Ok(MetricsReport {
        method: infer_method(net).name().to_string(),
        batch_size,
        seed: net.seed(),
        accuracy: acc,
        dcor2_group: dcor.per_group,
        dcor2_mean: dcor.mean,
        pearson_meta,
    })
}
