use confound_guard::linalg::{solve_beta_full, MetadataMatrix};
use confound_guard::nn::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use confound_guard::nn::{LayerSpec, Mode, Network, NormMode};
use confound_guard::tensor::Tensor;
use confound_guard::trainer::{alternating_step, fit, plain_step, Batch, TrainConfig, TrainData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 12;

fn meta() -> MetadataMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let conf = Tensor::new([N, 1], (0..N).map(|_| rng.gen_range(1.0..6.0)).collect()).unwrap();
    let labels: Vec<f64> = (0..N).map(|i| (i % 2) as f64).collect();
    MetadataMatrix::fit(&conf, Some(&labels), true).unwrap()
}

fn inputs() -> (Tensor<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = Tensor::new([N, 3], (0..N * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    (x, (0..N).map(|i| (i % 2) as f64).collect())
}

fn pmdn_net(m: &MetadataMatrix) -> Network<f64> {
    let specs = [
        LayerSpec::Dense { input: 3, output: 2 },
        LayerSpec::Pmdn,
        LayerSpec::Relu,
        LayerSpec::Dense { input: 2, output: 1 },
    ];
    Network::new(&[3], &specs, Some(m), 5).unwrap()
}

fn cfg(eta1: f64, eta2: f64) -> TrainConfig {
    TrainConfig {
        batch_size: N,
        epochs: 1,
        eta1,
        eta2,
        optimizer: OptimizerKind::Sgd,
        seed: 1,
        norm_mode: NormMode::Pmdn,
        shuffle: false,
        skip_redundant_forward: false,
    }
}

fn full_batch(m: &MetadataMatrix) -> Batch<f64> {
    let (x, y) = inputs();
    Batch { x, y, meta: Some(m.all_rows()) }
}

#[test]
fn zero_eta1_leaves_coefficients_untouched() {
    let m = meta();
    let mut net = pmdn_net(&m);
    net.pmdn_params_mut(1).unwrap().step(&Tensor::filled([2, 3], -0.1), 1.0).unwrap();
    let before = net.pmdn_params(1).unwrap().clone();
    let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
    let c = cfg(0.0, 0.1);
    alternating_step(&mut net, &mut opt, &full_batch(&m), &c).unwrap();
    assert_eq!(net.pmdn_params(1).unwrap(), &before);
}

#[test]
fn zero_eta2_converges_to_closed_form() {
    let m = meta();
    let mut net = pmdn_net(&m);
    let w_before: Vec<Vec<f64>> = net.task_params().iter().map(|p| p.to_vec()).collect();
    let mut opt = Optimizer::new(OptimizerConfig::sgd(0.0));
    let batch = full_batch(&m);
    let c = cfg(0.2, 0.0);
    let mut lstars = Vec::new();
    for _ in 0..3000 {
        lstars.push(alternating_step(&mut net, &mut opt, &batch, &c).unwrap().lstar);
    }
    let w_after: Vec<Vec<f64>> = net.task_params().iter().map(|p| p.to_vec()).collect();
    assert_eq!(w_before, w_after);
    assert!(lstars.windows(2).all(|w| w[1] <= w[0] + 1e-15));

    let (_, tape) = net.forward(&batch.x, batch.meta.as_ref(), Mode::Train).unwrap();
    let f = tape.input(1).unwrap().clone();
    let g = m.gram_inverse(0.0).unwrap();
    let beta = net.pmdn_params(1).unwrap().beta();
    for c in 0..2 {
        let fc = Tensor::vector((0..N).map(|i| f.at(i, c)).collect()).unwrap();
        let closed = solve_beta_full(m.values(), &fc, &g).unwrap();
        for k in 0..3 {
            assert!((closed.data()[k] - beta.at(c, k)).abs() < 1e-6, "c={c} k={k}");
        }
    }
}

/// Scalar re-implementation of one alternating step with SGD on the
/// Dense(3,2)-PMDN-ReLU-Dense(2,1) network.
#[allow(clippy::needless_range_loop)]
#[allow(clippy::too_many_arguments)]
fn scalar_step(
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: f64,
    beta: &[f64],
    x: &Tensor<f64>,
    y: &[f64],
    m: &Tensor,
    eta1: f64,
    eta2: f64,
) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let n = y.len();
    let k = 3;
    let mut f = vec![[0.0f64; 2]; n];
    for i in 0..n {
        for c in 0..2 {
            f[i][c] = b1[c] + (0..3).map(|j| w1[c * 3 + j] * x.at(i, j)).sum::<f64>();
        }
    }
    let fit = |beta: &[f64], i: usize, c: usize| (0..k).map(|j| m.at(i, j) * beta[c * k + j]).sum::<f64>();
    let mut lstar = 0.0;
    let mut new_beta = beta.to_vec();
    for c in 0..2 {
        let mut per = 0.0;
        for i in 0..n {
            let r = f[i][c] - fit(beta, i, c);
            per += r * r / n as f64;
            for j in 0..k {
                new_beta[c * k + j] -= eta1 * (-2.0 * m.at(i, j) * r / n as f64);
            }
        }
        lstar += per / 2.0;
    }
    let mut loss = 0.0;
    let mut gw1 = vec![0.0; 6];
    let mut gb1 = vec![0.0; 2];
    let mut gw2 = vec![0.0; 2];
    let mut gb2 = 0.0;
    for i in 0..n {
        let r: Vec<f64> = (0..2).map(|c| f[i][c] - fit(&new_beta, i, c)).collect();
        let h: Vec<f64> = r.iter().map(|v| v.max(0.0)).collect();
        let z = b2 + w2[0] * h[0] + w2[1] * h[1];
        let p = 1.0 / (1.0 + (-z).exp());
        loss += (-(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln())) / n as f64;
        let dz = (p - y[i]) / n as f64;
        gb2 += dz;
        for c in 0..2 {
            gw2[c] += dz * h[c];
            let dr = if r[c] > 0.0 { dz * w2[c] } else { 0.0 };
            gb1[c] += dr;
            for j in 0..3 {
                gw1[c * 3 + j] += dr * x.at(i, j);
            }
        }
    }
    let mut params: Vec<f64> = Vec::new();
    params.extend(w1.iter().zip(&gw1).map(|(w, g)| w - eta2 * g));
    params.extend(b1.iter().zip(&gb1).map(|(w, g)| w - eta2 * g));
    params.extend(w2.iter().zip(&gw2).map(|(w, g)| w - eta2 * g));
    params.push(b2 - eta2 * gb2);
    (loss, lstar, new_beta, params)
}

#[test]
fn single_step_matches_scalar_oracle() {
    let m = meta();
    let mut net = pmdn_net(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init = Tensor::new([2, 3], (0..6).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
    net.pmdn_params_mut(1).unwrap().step(&init, 1.0).unwrap();
    let p: Vec<Vec<f64>> = net.task_params().iter().map(|p| p.to_vec()).collect();
    let beta = net.pmdn_params(1).unwrap().beta().data().to_vec();
    let batch = full_batch(&m);
    let (loss, lstar, new_beta, new_params) =
        scalar_step(&p[0], &p[1], &p[2], p[3][0], &beta, &batch.x, &batch.y, m.values(), 0.05, 0.3);

    let mut opt = Optimizer::new(OptimizerConfig::sgd(0.3));
    let s = alternating_step(&mut net, &mut opt, &batch, &cfg(0.05, 0.3)).unwrap();
    assert!((s.loss - loss).abs() < 1e-12, "{} vs {loss}", s.loss);
    assert!((s.lstar - lstar).abs() < 1e-12, "{} vs {lstar}", s.lstar);
    for (a, b) in net.pmdn_params(1).unwrap().beta().data().iter().zip(&new_beta) {
        assert!((a - b).abs() < 1e-12);
    }
    let got: Vec<f64> = net.task_params().iter().flat_map(|p| p.to_vec()).collect();
    for (a, b) in got.iter().zip(&new_params) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_plain_step_is_inert() {
    let specs = [
        LayerSpec::Dense { input: 3, output: 4 },
        LayerSpec::BatchNorm { dim: 4, momentum: 0.9 },
        LayerSpec::Relu,
        LayerSpec::Dense { input: 4, output: 1 },
    ];
    let mut net = Network::<f64>::new(&[3], &specs, None, 2).unwrap();
    let before: Vec<Vec<f64>> = net.task_params().iter().map(|p| p.to_vec()).collect();
    let (x, y) = inputs();
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.0));
    plain_step(&mut net, &mut opt, &Batch { x, y, meta: None }).unwrap();
    let after: Vec<Vec<f64>> = net.task_params().iter().map(|p| p.to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn mdn_full_batch_coefficients_match_closed_form() {
    let m = meta();
    let specs = [
        LayerSpec::Dense { input: 3, output: 2 },
        LayerSpec::Mdn,
        LayerSpec::Relu,
        LayerSpec::Dense { input: 2, output: 1 },
    ];
    let mut net = Network::<f64>::new(&[3], &specs, Some(&m), 8).unwrap();
    let (x, _) = inputs();
    let tape = net.forward_prefix(&x, Some(&m.all_rows()), 2).unwrap();
    let f = tape.input(1).unwrap().clone();
    let state = net.mdn_state(1).unwrap();
    let batch_beta = state.last_beta().unwrap();
    for c in 0..2 {
        let fc = Tensor::vector((0..N).map(|i| f.at(i, c)).collect()).unwrap();
        let closed = solve_beta_full(m.values(), &fc, state.gram_inv()).unwrap();
        for k in 0..3 {
            assert!((closed.data()[k] - batch_beta.at(c, k)).abs() < 1e-9);
        }
    }
}

#[test]
fn fit_is_deterministic_and_skip_flag_is_exact() {
    let m = meta();
    let (x, y) = inputs();
    let data = TrainData {
        x: &x,
        y: &y,
        meta: Some(&m),
    };
    let run = |skip: bool| {
        let mut net = pmdn_net(&m);
        let c = TrainConfig {
            batch_size: 5,
            epochs: 3,
            optimizer: OptimizerKind::Adam,
            shuffle: true,
            skip_redundant_forward: skip,
            ..cfg(0.05, 0.01)
        };
        let log = fit(&mut net, &data, &c).unwrap();
        (net, log)
    };
    let (n1, l1) = run(false);
    let (n2, l2) = run(false);
    let (n3, l3) = run(true);
    assert_eq!(l1, l2);
    assert_eq!(n1, n2);
    assert_eq!(l1, l3);
    assert_eq!(n1, n3);
    // 12 rows in batches of 5: 5, 5, 2
    assert_eq!(l1.records.len(), 9);
    assert!(l1.records.iter().all(|r| r.loss.is_finite() && r.lstar.is_finite()));
}

#[test]
fn zero_epochs_returns_initial_network() {
    let m = meta();
    let (x, y) = inputs();
    let mut net = pmdn_net(&m);
    let before = net.clone();
    let c = TrainConfig { epochs: 0, ..cfg(0.1, 0.1) };
    let log = fit(&mut net, &TrainData { x: &x, y: &y, meta: Some(&m) }, &c).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(net, before);
}

#[test]
fn baseline_training_ignores_metadata() {
    let specs = [
        LayerSpec::Dense { input: 3, output: 4 },
        LayerSpec::Relu,
        LayerSpec::Dense { input: 4, output: 1 },
    ];
    let m = meta();
    let (x, y) = inputs();
    let c = TrainConfig {
        batch_size: 4,
        epochs: 2,
        norm_mode: NormMode::None,
        ..cfg(0.1, 0.05)
    };
    let mut a = Network::<f64>::new(&[3], &specs, None, 2).unwrap();
    let mut b = a.clone();
    let la = fit(&mut a, &TrainData { x: &x, y: &y, meta: None }, &c).unwrap();
    let lb = fit(&mut b, &TrainData { x: &x, y: &y, meta: Some(&m) }, &c).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert!(la.records.iter().all(|r| r.lstar == 0.0 && r.beta_norm == 0.0));
}

#[test]
fn weight_gradients_never_reach_coefficients() {
    let m = meta();
    let mut net = pmdn_net(&m);
    let batch = full_batch(&m);
    let (logits, tape) = net.forward(&batch.x, batch.meta.as_ref(), Mode::Train).unwrap();
    let d = logits.map(|_| 1.0);
    let g = net.backward(&tape, &d).unwrap();
    assert!(g.pmdn_beta.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn log_csv_layout() {
    let m = meta();
    let (x, y) = inputs();
    let mut net = pmdn_net(&m);
    let log = fit(&mut net, &TrainData { x: &x, y: &y, meta: Some(&m) }, &cfg(0.1, 0.1)).unwrap();
    let mut out = Vec::new();
    log.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,batch,loss,lstar,beta_norm");
    assert_eq!(lines.next().unwrap().split(',').count(), 5);
}
