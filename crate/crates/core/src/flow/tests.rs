use super::*;

fn t1(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

/// Exact velocity of the linear path when data is `N(m, var)` in 1-D.
fn gaussian_velocity(z: f64, t: f64, m: f64, var: f64) -> f64 {
    let s = 1.0 - t;
    -m + (t - s * var) / (t * t + s * s * var) * (z - s * m)
}

#[test]
fn uniform_schedule_points() {
    let s = FlowSchedule::uniform(4).unwrap();
    assert_eq!(s.times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
    assert_eq!(s.steps(), 4);
    assert_eq!(FlowSchedule::uniform(DEFAULT_STEPS).unwrap().times().len(), 26);
    assert!(FlowSchedule::uniform(0).is_err());
}

#[test]
fn schedule_rejects_bad_times() {
    assert!(FlowSchedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
    assert!(FlowSchedule::new(vec![1.0, 0.6, 0.7, 0.0]).is_err());
    assert!(FlowSchedule::new(vec![0.9, 0.0]).is_err());
    assert!(FlowSchedule::new(vec![1.0]).is_err());
    assert!(FlowSchedule::new(vec![1.0, 0.3, 0.0]).is_ok());
}

#[test]
fn interpolation_endpoints_and_derivative() {
    let x = t1(&[0.5, -1.0, 2.0]);
    let n = t1(&[1.5, 0.25, -0.75]);
    assert_eq!(interpolate(&x, &n, 0.0).unwrap(), x);
    assert_eq!(interpolate(&x, &n, 1.0).unwrap(), n);
    assert!(interpolate(&x, &n, 1.5).is_err());
    let v = velocity_target(&x, &n).unwrap();
    let h = 1e-6;
    let a = interpolate(&x, &n, 0.4 + h).unwrap();
    let b = interpolate(&x, &n, 0.4 - h).unwrap();
    for i in 0..3 {
        let fd = (a.data()[i] - b.data()[i]) / (2.0 * h);
        assert!((fd - v.data()[i]).abs() < 1e-8);
    }
}

#[test]
fn euler_step_example_and_ordering() {
    let z = euler_step(&t1(&[1.0]), 1.0, 0.5, &t1(&[2.0])).unwrap();
    assert_eq!(z.data(), &[0.0]);
    assert!(euler_step(&t1(&[1.0]), 0.5, 0.5, &t1(&[2.0])).is_err());
    assert!(euler_step(&t1(&[1.0]), 0.4, 0.5, &t1(&[2.0])).is_err());
}

#[test]
fn cfg_endpoints_are_exact() {
    let c = t1(&[0.1, 0.7, -0.3]);
    let u = t1(&[0.2, -0.4, 0.9]);
    assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
    assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    let g = cfg_combine(&t1(&[1.0]), &t1(&[0.0]), 3.0).unwrap();
    assert_eq!(g.data(), &[3.0]);
    assert!(cfg_combine(&c, &t1(&[1.0]), 2.0).is_err());
}

#[test]
fn euler_on_linear_decay_lands_on_origin() {
    // v = z/t transports every point straight to 0
    let mut field = |z: &Tensor, t: f64, _: ConditionRegime| Ok(z.map(|x| x / t));
    for k in [1, 3, 25] {
        let s = FlowSchedule::uniform(k).unwrap();
        let z = integrate(&mut field, &s, GuidanceConfig::new(1.0).unwrap(), ConditionRegime::Uncond, t1(&[1.3, -2.0])).unwrap();
        assert!(z.data().iter().all(|v| v.abs() <= 1e-12), "{:?}", z.data());
    }
}

#[test]
fn euler_is_first_order() {
    // dz/dt = z from t=1 to t=0 gives z(0) = z(1)/e
    let mut field = |z: &Tensor, _t: f64, _: ConditionRegime| Ok(z.clone());
    let exact = (-1.0f64).exp();
    let err = |k: usize, field: &mut dyn VelocityField| {
        let s = FlowSchedule::uniform(k).unwrap();
        let z = integrate(field, &s, GuidanceConfig::default(), ConditionRegime::Uncond, t1(&[1.0])).unwrap();
        (z.data()[0] - exact).abs()
    };
    let e1 = err(50, &mut field);
    let e2 = err(100, &mut field);
    let e3 = err(200, &mut field);
    assert!(e1 < 1e-2 && e2 < e1 && e3 < e2);
    assert!((e1 / e2 - 2.0).abs() < 0.05 && (e2 / e3 - 2.0).abs() < 0.05, "{e1} {e2} {e3}");
}

#[test]
fn gaussian_marginal_is_recovered() {
    let (m, var) = (2.0, 0.25);
    let mut field = |z: &Tensor, t: f64, _: ConditionRegime| Ok(z.map(|x| gaussian_velocity(x, t, m, var)));
    let s = FlowSchedule::uniform(100).unwrap();
    let mut rng = SeedRng::new(17);
    let z = sample(&mut field, &s, GuidanceConfig::default(), ConditionRegime::Uncond, &mut rng, &[10_000]).unwrap();
    let n = z.numel() as f64;
    let mean = z.data().iter().sum::<f64>() / n;
    let v = z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!((mean - m).abs() <= 0.05 * m.abs() + 0.02, "mean {mean}");
    assert!((v - var).abs() <= 0.1 * var, "var {v}");
}

#[test]
fn guidance_queries_uncond_only_when_needed() {
    let s = FlowSchedule::uniform(5).unwrap();
    let shape = [2, 3];
    for (scale, regime, expect) in [
        (1.0, ConditionRegime::Joint, 5),
        (3.0, ConditionRegime::Joint, 10),
        (3.0, ConditionRegime::TextOnly, 10),
        (3.0, ConditionRegime::Uncond, 5),
        (0.0, ConditionRegime::ImageOnly, 10),
    ] {
        let mut calls = Vec::new();
        let mut field = |z: &Tensor, _t: f64, r: ConditionRegime| {
            calls.push(r);
            Ok(z.map(|x| 0.1 * x))
        };
        sample(&mut field, &s, GuidanceConfig::new(scale).unwrap(), regime, &mut SeedRng::new(1), &shape).unwrap();
        assert_eq!(calls.len(), expect, "scale {scale} regime {regime}");
    }
}

#[test]
fn guided_sampling_matches_manual_combination() {
    let s = FlowSchedule::uniform(3).unwrap();
    let mut field = |z: &Tensor, t: f64, r: ConditionRegime| {
        let k = if r == ConditionRegime::Uncond { 0.2 } else { 0.5 };
        Ok(z.map(|x| k * x + t))
    };
    let z0 = t1(&[0.3, -0.8]);
    let got = integrate(&mut field, &s, GuidanceConfig::new(2.5).unwrap(), ConditionRegime::Joint, z0.clone()).unwrap();
    let mut want = z0.data().to_vec();
    for w in s.times().windows(2) {
        for x in want.iter_mut() {
            let c = 0.5 * *x + w[0];
            let u = 0.2 * *x + w[0];
            *x -= (w[0] - w[1]) * (u + 2.5 * (c - u));
        }
    }
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn wrong_velocity_shape_names_step() {
    let s = FlowSchedule::uniform(4).unwrap();
    let mut k = 0;
    let mut field = |z: &Tensor, _t: f64, _r: ConditionRegime| {
        k += 1;
        if k == 3 {
            Ok(Tensor::zeros(vec![1]))
        } else {
            Ok(z.clone())
        }
    };
    let err = sample(&mut field, &s, GuidanceConfig::new(1.0).unwrap(), ConditionRegime::Joint, &mut SeedRng::new(0), &[2, 2]).unwrap_err();
    assert!(err.to_string().contains("step 2"), "{err}");
}

#[test]
fn sampling_is_deterministic_in_seed() {
    let s = FlowSchedule::uniform(8).unwrap();
    let mut field = |z: &Tensor, t: f64, _r: ConditionRegime| Ok(z.map(|x| gaussian_velocity(x, t, 1.0, 0.5)));
    let a = sample(&mut field, &s, GuidanceConfig::default(), ConditionRegime::Joint, &mut SeedRng::new(5), &[4, 3]).unwrap();
    let b = sample(&mut field, &s, GuidanceConfig::default(), ConditionRegime::Joint, &mut SeedRng::new(5), &[4, 3]).unwrap();
    let c = sample(&mut field, &s, GuidanceConfig::default(), ConditionRegime::Joint, &mut SeedRng::new(6), &[4, 3]).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn flow_batch_uses_per_element_time() {
    let x = Tensor::from_fn(vec![3, 2, 2], |i| i as f64 * 0.1);
    let b = FlowBatch::draw(&x, &mut SeedRng::new(3), TimeDistribution::Uniform).unwrap();
    assert_eq!(b.t.len(), 3);
    assert!(b.t.iter().all(|t| (0.0..1.0).contains(t)));
    for e in 0..3 {
        let per = Tensor::new(vec![4], x.data()[e * 4..e * 4 + 4].to_vec()).unwrap();
        let noise = Tensor::new(vec![4], b.noise.data()[e * 4..e * 4 + 4].to_vec()).unwrap();
        let zt = interpolate(&per, &noise, b.t[e]).unwrap();
        assert_eq!(zt.data(), &b.z_t.data()[e * 4..e * 4 + 4]);
    }
    assert_eq!(b.target, velocity_target(&x, &b.noise).unwrap());
}

#[test]
fn logit_normal_times_stay_inside_unit_interval() {
    let d = TimeDistribution::LogitNormal { mean: 0.0, std: 1.0 };
    let mut rng = SeedRng::new(9);
    let ts: Vec<f64> = (0..2000).map(|_| d.draw(&mut rng)).collect();
    assert!(ts.iter().all(|t| *t > 0.0 && *t < 1.0));
    let mean = ts.iter().sum::<f64>() / ts.len() as f64;
    assert!((mean - 0.5).abs() < 0.03);
}

#[test]
fn flow_loss_is_zero_for_the_true_velocity() {
    let x = Tensor::from_fn(vec![2, 3], |i| (i as f64).sin());
    let batch = FlowBatch::draw(&x, &mut SeedRng::new(4), TimeDistribution::Uniform).unwrap();
    let mut g = Graph::new();
    let target = batch.target.clone();
    let loss = flow_loss(&mut g, &batch, |g, _z, _t| g.input(target)).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);

    let mut g = Graph::new();
    let loss = flow_loss(&mut g, &batch, |g, z, _t| g.input(Tensor::zeros(z.shape().to_vec()))).unwrap();
    let want = batch.target.sq_norm() / batch.target.numel() as f64;
    assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
}
