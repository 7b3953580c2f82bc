use proptest::prelude::*;
use qkdprov_core::demand::build_scenarios;
use qkdprov_core::{CostTable, PhysicalParams};
use qkdprov_rl::agents::{
    fedavg_policies, manager_policy_update, manager_q_update, policy_architecture, q_architecture, sample_policy,
    train_fedsac, update_targets, AgentConfig, AgentError, Payload, Role, SacAgent, Transition,
};
use qkdprov_rl::env::{toy_instance, EnvConfig, ProvisioningEnv};
use qkdprov_rl::neural::{Architecture, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const OBS: usize = 2;

/// Policy whose output is exactly `(mean, log_std)` for every observation.
fn fixed_policy(mean: &[f64], log_std: &[f64], hidden: &[usize]) -> Mlp {
    let arch = policy_architecture(OBS, mean.len(), hidden);
    let mut p = vec![0.0; arch.param_count()];
    let n = p.len();
    let k = 2 * mean.len();
    p[n - k..n - mean.len()].copy_from_slice(mean);
    p[n - mean.len()..].copy_from_slice(log_std);
    Mlp::from_params(arch, p).unwrap()
}

/// Density of `tanh(u)`, `u ~ N(m, s²)`, evaluated at `a`.
fn squashed_density(a: f64, m: f64, s: f64) -> f64 {
    let u = a.atanh();
    (-(u - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt()) / (1.0 - a * a)
}

#[test]
fn log_prob_matches_change_of_variables_density() {
    let (m, ls) = (0.4, -0.3);
    let policy = fixed_policy(&[m], &[ls], &[4]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bins = 20;
    let mut hist = vec![0usize; bins];
    let n = 200_000;
    for _ in 0..n {
        let s = sample_policy(&policy, &[0.1, 0.2], &mut rng, false).unwrap();
        let a = s.action[0];
        if a.abs() < 0.999 {
            let want = squashed_density(a, m, ls.exp()).ln();
            assert!((s.log_prob - want).abs() < 1e-6, "{} vs {want}", s.log_prob);
        }
        let b = (((a + 1.0) / 2.0) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
        hist[b] += 1;
    }
    // midpoint-rule mass per bin against the empirical frequency
    let width = 2.0 / bins as f64;
    for (b, &count) in hist.iter().enumerate() {
        let lo = -1.0 + b as f64 * width;
        let mass: f64 = (0..50)
            .map(|i| squashed_density(lo + (i as f64 + 0.5) * width / 50.0, m, ls.exp()) * width / 50.0)
            .sum();
        let freq = count as f64 / n as f64;
        assert!((freq - mass).abs() < 0.004, "bin {b}: {freq} vs {mass}");
    }
}

fn bandit_agent(config: AgentConfig, policy: Mlp, rng: &mut ChaCha8Rng) -> SacAgent {
    let act = policy.architecture().output() / 2;
    SacAgent::new(0, Role::Manager, OBS, act, policy, config, rng).unwrap()
}

#[test]
fn critic_learns_a_one_step_bandit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = AgentConfig {
        gamma: 1e-9,
        hidden: vec![32, 32],
        zeta: 0.0,
        ..Default::default()
    };
    let policy = fixed_policy(&[0.0], &[0.0], &cfg.hidden);
    let mut agent = bandit_agent(cfg, policy, &mut rng);
    let obs = vec![0.5, -0.5];
    let r = |a: f64| 1.0 - a * a;
    for _ in 0..2000 {
        let a = rng.random_range(-1.0..1.0);
        agent
            .buffer
            .push(Transition {
                observation: obs.clone(),
                action: vec![a],
                reward: r(a),
                next_observation: obs.clone(),
                done: true,
            })
            .unwrap();
    }
    for _ in 0..1500 {
        manager_q_update(&mut agent, &mut rng).unwrap();
        update_targets(&mut agent).unwrap();
    }
    for a in [-0.8, -0.3, 0.0, 0.4, 0.9] {
        let q = agent.q[0].forward(&[obs[0], obs[1], a]).unwrap()[0];
        assert!((q - r(a)).abs() < 0.05, "Q({a}) = {q}, want {}", r(a));
    }
}

fn fill(agent: &mut SacAgent, n: usize, rng: &mut ChaCha8Rng) {
    let act = agent.act_dim();
    for _ in 0..n {
        let o: Vec<f64> = (0..OBS).map(|_| rng.random_range(0.0..1.0)).collect();
        agent
            .buffer
            .push(Transition {
                observation: o.clone(),
                action: (0..act).map(|_| rng.random_range(-1.0..1.0)).collect(),
                reward: 0.0,
                next_observation: o,
                done: false,
            })
            .unwrap();
    }
}

fn mean_sigma(agent: &SacAgent) -> f64 {
    let s = sample_policy(&agent.policy, &[0.5, 0.5], &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
    s.log_std.iter().map(|l| l.exp()).sum::<f64>() / s.log_std.len() as f64
}

#[test]
fn large_temperature_widens_the_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = AgentConfig {
        tau: 10.0,
        hidden: vec![8],
        batch_size: 16,
        ..Default::default()
    };
    let policy = SacAgent::initial_policy(OBS, 2, &AgentConfig { init_log_std: -1.0, ..cfg.clone() }, &mut rng);
    let mut agent = bandit_agent(cfg, policy, &mut rng);
    fill(&mut agent, 64, &mut rng);
    let before = mean_sigma(&agent);
    for _ in 0..100 {
        manager_policy_update(&mut agent, &mut rng).unwrap();
    }
    assert!(mean_sigma(&agent) > before);
}

#[test]
fn flat_critic_pulls_the_mean_towards_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = AgentConfig {
        hidden: vec![8],
        batch_size: 16,
        policy_learning_rate: 1e-2,
        ..Default::default()
    };
    let policy = fixed_policy(&[1.5], &[-0.5], &cfg.hidden);
    let mut agent = bandit_agent(cfg, policy, &mut rng);
    let arch = agent.q[0].architecture().clone();
    for i in 0..2 {
        agent.q[i] = Mlp::from_params(arch.clone(), vec![0.0; arch.param_count()]).unwrap();
    }
    fill(&mut agent, 64, &mut rng);
    let mean = |a: &SacAgent| sample_policy(&a.policy, &[0.5, 0.5], &mut ChaCha8Rng::seed_from_u64(0), true).unwrap().mean[0];
    let before = mean(&agent);
    for _ in 0..200 {
        // the critics stay flat because only the policy is stepped
        manager_policy_update(&mut agent, &mut rng).unwrap();
    }
    let after = mean(&agent);
    assert!(after.abs() < before.abs() - 0.1, "{before} -> {after}");
}

#[test]
fn empty_buffer_updates_are_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = AgentConfig::default();
    let policy = fixed_policy(&[0.0], &[0.0], &cfg.hidden);
    let mut agent = bandit_agent(cfg, policy, &mut rng);
    assert!(matches!(manager_q_update(&mut agent, &mut rng), Err(AgentError::EmptyBuffer(0))));
    assert!(matches!(manager_policy_update(&mut agent, &mut rng), Err(AgentError::EmptyBuffer(0))));
}

#[test]
fn toy_preset_federation_exchanges_parameters_only() {
    let (t, r) = toy_instance();
    let s = build_scenarios(10, None).unwrap();
    let cfg = EnvConfig::toy(&t, 3, 0);
    let mut env = ProvisioningEnv::new(&t, &r, &s, &CostTable::default(), &PhysicalParams::default(), cfg).unwrap();
    let run = train_fedsac(&mut env, &AgentConfig::toy(), 10, 4).unwrap();
    assert_eq!(run.log.len(), 10);
    let (p, q) = (run.agents[0].policy.param_count(), run.agents[0].q[0].param_count());
    assert!(!run.ledger.exchanges.is_empty());
    for x in &run.ledger.exchanges {
        match x.payload {
            Payload::PolicyParameters => assert_eq!(x.values, p),
            Payload::CriticParameters => assert_eq!(x.values, 2 * q),
        }
    }
    let first = &run.agents[0].policy;
    assert!(run.agents.iter().all(|a| &a.policy == first));
    assert!(run.agents.iter().all(|a| a.buffer.read_log().iter().all(|&r| r == a.id)));
}

fn small_arch() -> Architecture {
    q_architecture(2, 1, &[3])
}

proptest! {
    #[test]
    fn fedavg_is_the_weighted_mean(
        a in prop::collection::vec(-5.0f64..5.0, 16),
        b in prop::collection::vec(-5.0f64..5.0, 16),
        wa in 1usize..50,
        wb in 1usize..50,
    ) {
        let arch = small_arch();
        let n = arch.param_count();
        let pa = Mlp::from_params(arch.clone(), a[..n].to_vec()).unwrap();
        let pb = Mlp::from_params(arch.clone(), b[..n].to_vec()).unwrap();
        let avg = fedavg_policies(&[&pa, &pb], &[wa, wb]).unwrap();
        let swapped = fedavg_policies(&[&pb, &pa], &[wb, wa]).unwrap();
        let total = (wa + wb) as f64;
        for i in 0..n {
            let want = (wa as f64 * a[i] + wb as f64 * b[i]) / total;
            prop_assert!((avg.params()[i] - want).abs() < 1e-12);
            prop_assert!((swapped.params()[i] - want).abs() < 1e-12);
        }
        let same = fedavg_policies(&[&pa, &pa], &[wa, wb]).unwrap();
        for i in 0..n {
            prop_assert!((same.params()[i] - a[i]).abs() < 1e-12);
        }
    }
}
