use super::*;
use crate::data::TrainingInstance;
use crate::denoiser::DenoiserConfig;
use crate::noise::{build_schedule, SignificanceScore};
use crate::tensor::Rng;

fn toy_instance(n: usize, p: usize, l: usize, horizon: usize, rng: &mut Rng) -> TrainingInstance {
    let lp = l + horizon;
    let mut target = vec![0.0; n * p * lp];
    rng.fill_normal(&mut target);
    let mut history = vec![0.0; n * p * l];
    for np in 0..n * p {
        history[np * l..(np + 1) * l].copy_from_slice(&target[np * lp..np * lp + l]);
    }
    let mut future_mask = vec![0u8; lp];
    for m in future_mask[l..].iter_mut() {
        *m = 1;
    }
    TrainingInstance {
        start: 0,
        n,
        p,
        l,
        horizon,
        history,
        target,
        future_mask,
    }
}

fn uniform_schedule(k: usize, t: usize, beta_max: f64) -> crate::noise::NoiseSchedule {
    build_schedule(&SignificanceScore::uniform(1, t), k, beta_max, 0.0).unwrap()
}

struct EchoStub(Vec<f64>, Vec<usize>);

impl DenoiserModel for EchoStub {
    fn predict_noise(
        &self,
        _x_k: &Tensor,
        _history: &Tensor,
        _k: usize,
        _masks: Option<&crate::relations::HeadMaskSet>,
    ) -> Result<Tensor> {
        Tensor::from_vec(self.1.clone(), self.0.clone())
    }
}

struct ZeroStub;

impl DenoiserModel for ZeroStub {
    fn predict_noise(
        &self,
        x_k: &Tensor,
        _history: &Tensor,
        _k: usize,
        _masks: Option<&crate::relations::HeadMaskSet>,
    ) -> Result<Tensor> {
        Tensor::from_vec(x_k.shape().to_vec(), vec![0.0; x_k.len()])
    }
}

#[test]
fn echoing_the_injected_noise_gives_zero_loss() {
    let mut rng = Rng::seeded(1);
    let inst = toy_instance(2, 2, 5, 1, &mut rng);
    let schedule = uniform_schedule(10, inst.target_len(), 0.2);
    let bundle = ConditioningBundle::from_instance(&inst, None).unwrap();
    let mut eps = vec![0.0; inst.target.len()];
    rng.fill_normal(&mut eps);
    let rows = inst.n * inst.p;
    let stub = EchoStub(eps.clone(), vec![rows, inst.target_len()]);
    let loss = training_loss_given(&stub, &inst, &bundle, &schedule, 4, &eps, None)
        .unwrap()
        .item();
    assert!(loss.abs() < 1e-24);
}

#[test]
fn zero_prediction_loss_is_mean_squared_noise() {
    let mut rng = Rng::seeded(2);
    let inst = toy_instance(2, 2, 5, 1, &mut rng);
    let schedule = uniform_schedule(10, inst.target_len(), 0.2);
    let bundle = ConditioningBundle::from_instance(&inst, None).unwrap();
    let mut eps = vec![0.0; inst.target.len()];
    rng.fill_normal(&mut eps);
    let loss = training_loss_given(&ZeroStub, &inst, &bundle, &schedule, 4, &eps, None)
        .unwrap()
        .item();
    let expected: f64 = eps.iter().map(|e| e * e).sum::<f64>() / eps.len() as f64;
    assert!((loss - expected).abs() < 1e-12);
}

#[test]
fn weighted_loss_matches_direct_computation() {
    let mut rng = Rng::seeded(3);
    let inst = toy_instance(1, 2, 3, 1, &mut rng);
    let lp = inst.target_len();
    let schedule = uniform_schedule(8, lp, 0.2);
    let bundle = ConditioningBundle::from_instance(&inst, None).unwrap();
    let mut eps = vec![0.0; inst.target.len()];
    rng.fill_normal(&mut eps);
    let w = vec![1.0, 2.0, 0.5, 3.0];
    let loss = training_loss_given(&ZeroStub, &inst, &bundle, &schedule, 2, &eps, Some(&w))
        .unwrap()
        .item();
    let rows = inst.n * inst.p;
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..rows {
        for c in 0..lp {
            num += w[c] * eps[r * lp + c] * eps[r * lp + c];
            den += w[c];
        }
    }
    assert!((loss - num / den).abs() < 1e-12);
}

#[test]
fn forward_diffuse_matches_closed_form_moments() {
    // With x0 = 0 the corrupted value is sqrt(1 - abar) * eps, so its
    // standard deviation is sqrt(1 - abar).
    let t = 4;
    let schedule = uniform_schedule(50, t, 0.2);
    let mut rng = Rng::seeded(7);
    let k = 30;
    let trials = 20_000;
    let mut acc = vec![0.0; t];
    let x0 = vec![0.0; t];
    for _ in 0..trials {
        let mut eps = vec![0.0; t];
        rng.fill_normal(&mut eps);
        let xk = forward_diffuse(&x0, 1, k, &schedule, 0, &eps).unwrap();
        for (a, v) in acc.iter_mut().zip(&xk) {
            *a += v * v;
        }
    }
    for (c, a) in acc.iter().enumerate() {
        let var = a / trials as f64;
        let expect = 1.0 - schedule.alpha_bar_at(k, c);
        // variance of the sample variance is about 2 sigma^4 / n
        let se = (2.0 / trials as f64).sqrt() * expect;
        assert!(
            (var - expect).abs() < 4.0 * se,
            "col {c}: var {var} vs expected {expect}"
        );
    }
}

#[test]
fn bundle_rejects_nonzero_future_history() {
    let mut rng = Rng::seeded(4);
    let inst = toy_instance(1, 1, 3, 1, &mut rng);
    let lp = inst.target_len();
    let bad = ConditioningBundle {
        history: Tensor::from_vec(vec![1, lp], vec![1.0; lp]).unwrap(),
        future_mask: inst.future_mask.clone(),
        t_offset: 0,
        head_masks: None,
    };
    let schedule = uniform_schedule(5, lp, 0.2);
    let mut eps = vec![0.0; inst.target.len()];
    rng.fill_normal(&mut eps);
    assert!(training_loss_given(&ZeroStub, &inst, &bad, &schedule, 2, &eps, None).is_err());
}

#[test]
fn sampling_is_deterministic_given_the_seed() {
    let mut rng = Rng::seeded(5);
    let inst = toy_instance(2, 1, 4, 1, &mut rng);
    let schedule = uniform_schedule(12, inst.target_len(), 0.2);
    let bundle = ConditioningBundle::from_instance(&inst, None).unwrap();
    let a = sample(&ZeroStub, &bundle, &schedule, &mut Rng::seeded(42)).unwrap();
    let b = sample(&ZeroStub, &bundle, &schedule, &mut Rng::seeded(42)).unwrap();
    assert_eq!(a, b);
    let c = sample(&ZeroStub, &bundle, &schedule, &mut Rng::seeded(43)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_denoiser_sampling_has_bounded_output() {
    // With eps_hat = 0 each update divides by sqrt(1 - beta) and adds
    // posterior noise; the result must stay finite and not collapse.
    let mut rng = Rng::seeded(6);
    let inst = toy_instance(2, 2, 6, 2, &mut rng);
    let schedule = uniform_schedule(20, inst.target_len(), 0.2);
    let bundle = ConditioningBundle::from_instance(&inst, None).unwrap();
    let x = sample(&ZeroStub, &bundle, &schedule, &mut rng).unwrap();
    assert!(x.iter().all(|v| v.is_finite()));
    let spread: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    assert!(spread > 0.1);
}

#[test]
fn point_forecast_is_the_elementwise_median() {
    let samples = vec![
        vec![1.0, 10.0],
        vec![3.0, -2.0],
        vec![2.0, 4.0],
    ];
    let med = point_forecast(&samples).unwrap();
    assert_eq!(med, vec![2.0, 4.0]);
    let even = point_forecast(&samples[..2].to_vec()).unwrap();
    assert_eq!(even, vec![2.0, 4.0]);
    assert!(point_forecast(&[]).is_err());
}

#[test]
fn training_loss_gradients_match_finite_differences() {
    let cfg = DenoiserConfig {
        n_stocks: 2,
        n_indicators: 1,
        window: 3,
        horizon: 1,
        d_model: 4,
        n_masked_heads: 1,
        n_unmasked_heads: 1,
        n_encoder_layers: 1,
        conv_kernel: 2,
        dilations: vec![1],
        ff_dim: 8,
        k_steps: 6,
        emb_dim: 4,
        emb_base: 1e4,
        head_dim: 4,
    };
    let mut rng = Rng::seeded(8);
    let net = DenoiserNet::new(cfg.clone(), &mut rng).unwrap();
    let inst = toy_instance(cfg.n_stocks, cfg.n_indicators, cfg.window, cfg.horizon, &mut rng);
    let schedule = uniform_schedule(cfg.k_steps, inst.target_len(), 0.2);
    let masks = crate::relations::HeadMaskSet {
        masks: vec![vec![1.0; 4]],
        n: 2,
        unmasked_heads: 1,
        group_assignment: vec![0],
        relation_names: vec!["r".into()],
    };
    let bundle = ConditioningBundle::from_instance(&inst, Some(masks)).unwrap();
    let mut eps = vec![0.0; inst.target.len()];
    rng.fill_normal(&mut eps);
    let k = 3;

    let loss = training_loss_given(&net, &inst, &bundle, &schedule, k, &eps, None).unwrap();
    for (_, p) in net.named_params() {
        p.zero_grad();
    }
    loss.backward().unwrap();

    // spot-check a few coordinates of a few parameters against central
    // finite differences
    let h = 1e-5;
    for (name, p) in net.named_params().iter().step_by(7) {
        let grad = p.grad().unwrap();
        let idx = p.len() / 2;
        let mut data = p.data();
        let orig = data[idx];
        data[idx] = orig + h;
        p.set_data(&data);
        let up = training_loss_given(&net, &inst, &bundle, &schedule, k, &eps, None)
            .unwrap()
            .item();
        data[idx] = orig - h;
        p.set_data(&data);
        let dn = training_loss_given(&net, &inst, &bundle, &schedule, k, &eps, None)
            .unwrap()
            .item();
        data[idx] = orig;
        p.set_data(&data);
        let fd = (up - dn) / (2.0 * h);
        let denom = fd.abs().max(grad[idx].abs()).max(1e-4);
        assert!(
            (fd - grad[idx]).abs() / denom < 1e-4,
            "{name}[{idx}]: fd {fd} vs grad {}",
            grad[idx]
        );
    }
}

#[test]
fn a_few_optimisation_steps_reduce_the_loss() {
    let cfg = DenoiserConfig {
        n_stocks: 2,
        n_indicators: 1,
        window: 4,
        horizon: 1,
        d_model: 4,
        n_masked_heads: 1,
        n_unmasked_heads: 1,
        n_encoder_layers: 1,
        conv_kernel: 2,
        dilations: vec![1, 2],
        ff_dim: 8,
        k_steps: 8,
        emb_dim: 4,
        emb_base: 1e4,
        head_dim: 5,
    };
    let mut rng = Rng::seeded(9);
    let net = DenoiserNet::new(cfg.clone(), &mut rng).unwrap();
    let inst = toy_instance(cfg.n_stocks, cfg.n_indicators, cfg.window, cfg.horizon, &mut rng);
    let schedule = uniform_schedule(cfg.k_steps, inst.target_len(), 0.2);
    let bundle = ConditioningBundle::from_instance(&inst, None).unwrap();
    let mut opt = Adam::new(1e-2);
    let mut first = None;
    let mut last = 0.0;
    let mut acc = 0.0;
    let mut warm = 0.0;
    for step in 0..80 {
        let out = training_step(&net, &mut opt, &inst, &bundle, &schedule, None, &mut rng).unwrap();
        if first.is_none() {
            first = Some(out.loss);
        }
        if step < 10 {
            warm += out.loss;
        }
        if step >= 70 {
            acc += out.loss;
        }
        last = out.loss;
    }
    let early = warm / 10.0;
    let late = acc / 10.0;
    assert!(last.is_finite());
    assert!(late < early, "loss did not trend down: {early} -> {late}");
}
