use qkdprov_rl::agents::{policy_architecture, policy_gradient, q_architecture};
use qkdprov_rl::neural::{Activation, Architecture, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Loss `½‖f(x) − y‖²`.
fn half_sq(net: &Mlp, x: &[f64], y: &[f64]) -> f64 {
    net.forward(x).unwrap().iter().zip(y).map(|(a, b)| 0.5 * (a - b).powi(2)).sum()
}

fn check_net(net: &mut Mlp, x: &[f64], y: &[f64], h: f64) -> f64 {
    let tr = net.forward_trace(x).unwrap();
    let g_out: Vec<f64> = tr.output().iter().zip(y).map(|(a, b)| a - b).collect();
    let mut g = vec![0.0; net.param_count()];
    let g_in = net.backward(&tr, &g_out, &mut g).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..net.param_count() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let up = half_sq(net, x, y);
        net.params_mut()[i] = orig - h;
        let down = half_sq(net, x, y);
        net.params_mut()[i] = orig;
        worst = worst.max(rel_err(g[i], (up - down) / (2.0 * h)));
    }
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        xp[j] += h;
        let mut xm = x.to_vec();
        xm[j] -= h;
        let num = (half_sq(net, &xp, y) - half_sq(net, &xm, y)) / (2.0 * h);
        worst = worst.max(rel_err(g_in[j], num));
    }
    worst
}

#[test]
fn dense_layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let acts = [Activation::Tanh, Activation::Identity, Activation::Relu];
    for case in 0..100 {
        let layers = rng.random_range(0..3usize);
        let hidden: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=16)).collect();
        let input = rng.random_range(1..=6);
        let output = rng.random_range(1..=4);
        let act = acts[case % 3];
        let out_act = acts[(case / 3) % 2];
        let mut net = Mlp::new(Architecture::new(input, &hidden, output, act, out_act), &mut rng);
        // nonzero biases keep rectified units off their kink
        for p in net.params_mut() {
            if *p == 0.0 {
                *p = rng.random_range(-0.5..0.5);
            }
        }
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..output).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = if act == Activation::Relu { 1e-6 } else { 1e-5 };
        let err = check_net(&mut net, &x, &y, h);
        assert!(err <= 1e-4, "case {case}: relative error {err}");
    }
}

#[test]
fn reparameterised_policy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..20 {
        let (obs_dim, act_dim) = (rng.random_range(1..=4), rng.random_range(1..=3));
        let mut policy = Mlp::new(policy_architecture(obs_dim, act_dim, &[6]), &mut rng);
        let q_arch = q_architecture(obs_dim, act_dim, &[5]);
        let q_arch = Architecture {
            activations: vec![Activation::Tanh; q_arch.activations.len() - 1]
                .into_iter()
                .chain([Activation::Identity])
                .collect(),
            ..q_arch
        };
        let q0 = Mlp::new(q_arch.clone(), &mut rng);
        let q1 = Mlp::new(q_arch, &mut rng);
        let obs: Vec<Vec<f64>> = (0..3).map(|_| (0..obs_dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
        let seed = 1000 + case;
        let loss_at = |p: &Mlp| policy_gradient(p, [&q0, &q1], &refs, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (_, g) = loss_at(&policy);
        let h = 1e-6;
        for i in 0..policy.param_count() {
            let orig = policy.params()[i];
            policy.params_mut()[i] = orig + h;
            let up = loss_at(&policy).0;
            policy.params_mut()[i] = orig - h;
            let down = loss_at(&policy).0;
            policy.params_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            assert!(rel_err(g[i], num) <= 1e-4, "case {case} param {i}: {} vs {num}", g[i]);
        }
    }
}
