//! Finite-difference verification of [`Network::backward`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::{MetaBatch, MetadataMatrix};
use crate::nn::loss::bce_loss;
use crate::nn::{CnnConfig, LayerSpec, Mode, Network, NormMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error. Gradients that vanish
    /// structurally (a bias feeding an intercept-projecting MDN layer) are
    /// compared in absolute terms below this magnitude.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (chosen at random).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub layer: usize,
    pub kind: &'static str,
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Largest task-loss gradient reported for any PMDN coefficient.
    pub pmdn_beta_grad_max: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance && self.pmdn_beta_grad_max == 0.0
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_of(net: &mut Network<f64>, x: &Tensor<f64>, meta: Option<&MetaBatch>, targets: &[f64]) -> Result<f64> {
    let (logits, _) = net.forward(x, meta, Mode::Train)?;
    Ok(bce_loss(&logits, targets)?.0)
}

/// Compares analytic task-loss gradients against central differences of
/// the training-mode BCE loss, tensor by tensor.
pub fn gradient_check(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    meta: Option<&MetaBatch>,
    targets: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (logits, tape) = net.forward(x, meta, Mode::Train)?;
    let (_, dlogits) = bce_loss(&logits, targets)?;
    let grads = net.backward(&tape, &dlogits)?;
    drop(tape);

    let info = net.param_info();
    let specs = net.specs().to_vec();
    let mut probe = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(info.len());
    for (slot, p) in info.iter().enumerate() {
        let mut coords: Vec<usize> = (0..p.len).collect();
        if let Some(k) = cfg.max_coords_per_tensor {
            if k < p.len {
                coords.shuffle(&mut rng);
                coords.truncate(k);
                coords.sort_unstable();
            }
        }
        let mut worst = 0.0f64;
        for &j in &coords {
            let orig = probe.task_params()[slot][j];
            probe.task_params_mut()[slot][j] = orig + cfg.step;
            let up = loss_of(&mut probe, x, meta, targets)?;
            probe.task_params_mut()[slot][j] = orig - cfg.step;
            let down = loss_of(&mut probe, x, meta, targets)?;
            probe.task_params_mut()[slot][j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(relative_error(grads.task[slot][j], numeric, cfg.floor));
        }
        entries.push(GradCheckEntry {
            layer: p.layer,
            kind: specs[p.layer].kind(),
            name: p.name,
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let pmdn_beta_grad_max = grads.pmdn_beta.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tolerance: cfg.tolerance,
        pmdn_beta_grad_max,
    })
}

/// A ready-to-check network with its batch.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub net: Network<f64>,
    pub x: Tensor<f64>,
    pub meta: Option<MetaBatch>,
    pub targets: Vec<f64>,
}

impl GradCheckCase {
    pub fn run(&mut self, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        gradient_check(&mut self.net, &self.x, self.meta.as_ref(), &self.targets, cfg)
    }
}

/// Small CNN widths used by the default suite (about 2.3k parameters).
pub const SMALL_CNN: CnnConfig = CnnConfig {
    image_size: 8,
    conv1: 2,
    conv2: 3,
    hidden: 6,
};

fn case_batch(batch: usize, image: usize, seed: u64) -> Result<(Tensor<f64>, Vec<f64>, MetadataMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(
        [batch, 1, image, image],
        (0..batch * image * image).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let targets: Vec<f64> = (0..batch).map(|i| (i % 2) as f64).collect();
    let conf = Tensor::new([batch, 1], (0..batch).map(|_| rng.gen_range(1.0..6.0)).collect())?;
    let meta = MetadataMatrix::fit(&conf, Some(&targets), true)?;
    Ok((x, targets, meta))
}

/// The networks `gradcheck` verifies: a dense-only net and the small CNN
/// with each normalization choice (LayerNorm comes with PMDN).
pub fn default_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let batch = 6;
    let mut cases = Vec::new();

    let (x, targets, _) = case_batch(batch, 3, seed)?;
    let x = x.reshape([batch, 9])?;
    let specs = [
        LayerSpec::Dense { input: 9, output: 5 },
        LayerSpec::Relu,
        LayerSpec::Dense { input: 5, output: 1 },
    ];
    cases.push(GradCheckCase {
        name: "dense".into(),
        net: Network::new(&[9], &specs, None, seed)?,
        x,
        meta: None,
        targets,
    });

    for norm in NormMode::ALL {
        let (x, targets, meta) = case_batch(batch, SMALL_CNN.image_size, seed.wrapping_add(1))?;
        let mut net = Network::baseline_cnn(&SMALL_CNN, norm, Some(&meta), seed)?;
        // non-zero coefficients so the PMDN subtraction is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        for layer in net.pmdn_layers() {
            let p = net.pmdn_params_mut(layer).expect("pmdn layer");
            let noise = Tensor::new(
                p.beta().shape().to_vec(),
                (0..p.beta().len()).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            )?;
            let flipped = noise.map(|v| -v);
            p.step(&flipped, 1.0)?;
        }
        let name = match norm {
            NormMode::None => "cnn".to_string(),
            NormMode::Pmdn => "cnn-layernorm-pmdn".to_string(),
            other => format!("cnn-{}", other.name()),
        };
        cases.push(GradCheckCase {
            name,
            net,
            x,
            meta: norm.needs_metadata().then(|| meta.all_rows()),
            targets,
        });
    }
    Ok(cases)
}
