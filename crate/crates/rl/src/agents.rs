//! Soft actor-critic agents and federated training.
//!
//! Managers hold twin critics, learn from rewarded transitions and update
//! their policies every slot once warmed up. Controllers store reward-free
//! transitions and improve their policies once per episode against critics
//! lent by a manager. Policies are then averaged with FedAvg weights equal to
//! buffer sizes and the average replaces every agent's policy. The DecSAC
//! baseline runs managers only, with nothing exchanged.

use std::cell::RefCell;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::env::{reward, EnvError, ProvisioningEnv};
use crate::neural::{soft_update, Activation, Adam, Architecture, Mlp, NeuralError};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("replay buffer of agent {0} is empty")]
    EmptyBuffer(usize),
    #[error("privacy: {0}")]
    Privacy(String),
    #[error("total FedAvg weight is zero")]
    ZeroWeight,
    #[error("invalid training setup: {0}")]
    Setup(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub q_learning_rate: f64,
    pub policy_learning_rate: f64,
    /// Entropy temperature.
    pub tau: f64,
    pub gamma: f64,
    /// Target blend: `target ← ζ·target + (1−ζ)·online`.
    pub zeta: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Transitions a manager collects before updating.
    pub warmup: usize,
    /// Manager Q and policy updates per slot.
    pub updates_per_step: usize,
    /// Controller policy updates per episode; `None` means one per slot.
    pub controller_steps: Option<usize>,
    /// Initial bias of the log standard deviation head.
    pub init_log_std: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![64, 64],
            q_learning_rate: 0.003,
            policy_learning_rate: 0.0001,
            tau: 0.01,
            gamma: 0.95,
            zeta: 0.01,
            buffer_capacity: 20_000,
            batch_size: 64,
            warmup: 200,
            updates_per_step: 1,
            controller_steps: None,
            init_log_std: 0.0,
        }
    }
}

impl AgentConfig {
    /// Settings that train reliably on [`crate::env::toy_instance`] within
    /// a hundred episodes.
    pub fn toy() -> Self {
        AgentConfig {
            policy_learning_rate: 3e-3,
            zeta: 0.99,
            warmup: 64,
            controller_steps: Some(8),
            init_log_std: -1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Setup(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return bad("zeta must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch size and buffer capacity must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Manager,
    Controller,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    /// Always zero in controller buffers.
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub done: bool,
}

/// Ring buffer owned by one agent. Every read is logged with the id of the
/// reader and refused unless the reader is the owner.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    owner: usize,
    role: Role,
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    reads: RefCell<Vec<usize>>,
}

impl ReplayBuffer {
    pub fn new(owner: usize, role: Role, capacity: usize) -> Self {
        ReplayBuffer {
            owner,
            role,
            capacity,
            items: Vec::new(),
            next: 0,
            reads: RefCell::new(Vec::new()),
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<(), AgentError> {
        if self.role == Role::Controller && t.reward != 0.0 {
            return Err(AgentError::Privacy(format!(
                "controller {} was handed a reward",
                self.owner
            )));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, reader: usize, n: usize, rng: &mut R) -> Result<Vec<&Transition>, AgentError> {
        self.reads.borrow_mut().push(reader);
        if reader != self.owner {
            return Err(AgentError::Privacy(format!(
                "agent {reader} tried to read the buffer of agent {}",
                self.owner
            )));
        }
        if self.items.is_empty() {
            return Err(AgentError::EmptyBuffer(self.owner));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }

    /// Ids of every reader so far.
    pub fn read_log(&self) -> Vec<usize> {
        self.reads.borrow().clone()
    }

    /// Owner-side view of stored rewards, for audits.
    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.items.iter().map(|t| t.reward)
    }
}

/// Squashed Gaussian action with its log-density.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// `log(1 − tanh²u)` without cancellation.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Splits a policy output into mean and clamped log standard deviation.
fn head(out: &[f64]) -> (&[f64], Vec<f64>) {
    let a = out.len() / 2;
    (&out[..a], out[a..].iter().map(|&v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect())
}

/// `ã = tanh(μ + σ ⊙ ξ)` and `log π(ã|s)`.
pub fn squashed_sample(mean: &[f64], log_std: &[f64], xi: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let mut u = Vec::with_capacity(mean.len());
    let mut logp = 0.0;
    for j in 0..mean.len() {
        let uj = mean[j] + log_std[j].exp() * xi[j];
        logp += -0.5 * xi[j] * xi[j] - log_std[j] - HALF_LN_2PI - log_one_minus_tanh_sq(uj);
        u.push(uj);
    }
    let a = u.iter().map(|v| v.tanh()).collect();
    (a, u, logp)
}

fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

pub fn policy_architecture(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Architecture {
    Architecture::new(obs_dim, hidden, 2 * act_dim, Activation::Tanh, Activation::Identity)
}

pub fn q_architecture(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Architecture {
    Architecture::new(obs_dim + act_dim, hidden, 1, Activation::Relu, Activation::Identity)
}

/// Samples an action from a policy network.
pub fn sample_policy<R: Rng + ?Sized>(policy: &Mlp, obs: &[f64], rng: &mut R, deterministic: bool) -> Result<PolicySample, AgentError> {
    let out = policy.forward(obs)?;
    let (mean, log_std) = head(&out);
    let xi = if deterministic {
        vec![0.0; mean.len()]
    } else {
        standard_normals(mean.len(), rng)
    };
    let (action, _, log_prob) = squashed_sample(mean, &log_std, &xi);
    Ok(PolicySample {
        action,
        log_prob,
        mean: mean.to_vec(),
        log_std,
    })
}

/// Loss `mean[τ log π(ã|s) − min_i Q_i(s, ã)]` and its gradient with
/// respect to the policy parameters, through the reparameterised action.
pub fn policy_gradient<R: Rng + ?Sized>(
    policy: &Mlp,
    critics: [&Mlp; 2],
    observations: &[&[f64]],
    tau: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), AgentError> {
    if critics[0].architecture() != critics[1].architecture() {
        return Err(NeuralError::Architecture.into());
    }
    let act_dim = policy.architecture().output() / 2;
    if critics[0].architecture().input() != policy.architecture().input() + act_dim {
        return Err(NeuralError::Architecture.into());
    }
    let b = observations.len() as f64;
    let mut grads = vec![0.0; policy.param_count()];
    let mut scratch = vec![0.0; critics[0].param_count()];
    let mut loss = 0.0;
    for obs in observations {
        let trace = policy.forward_trace(obs)?;
        let out = trace.output();
        let raw_ls = &out[act_dim..];
        let (mean, log_std) = head(out);
        let xi = standard_normals(act_dim, rng);
        let (a, u, logp) = squashed_sample(mean, &log_std, &xi);
        let input = concat(obs, &a);
        let t0 = critics[0].forward_trace(&input)?;
        let t1 = critics[1].forward_trace(&input)?;
        let (q, which, tr) = if t0.output()[0] <= t1.output()[0] {
            (t0.output()[0], 0, &t0)
        } else {
            (t1.output()[0], 1, &t1)
        };
        loss += (tau * logp - q) / b;
        let dq_din = critics[which].backward(tr, &[1.0], &mut scratch)?;
        let dq_da = &dq_din[obs.len()..];
        let mut g_out = vec![0.0; 2 * act_dim];
        for j in 0..act_dim {
            let th = u[j].tanh();
            let dq_du = dq_da[j] * (1.0 - a[j] * a[j]);
            let sigma_xi = log_std[j].exp() * xi[j];
            g_out[j] = (tau * 2.0 * th - dq_du) / b;
            let active = raw_ls[j] > LOG_STD_MIN && raw_ls[j] < LOG_STD_MAX;
            if active {
                g_out[act_dim + j] = (tau * (-1.0 + 2.0 * th * sigma_xi) - dq_du * sigma_xi) / b;
            }
        }
        policy.backward(&trace, &g_out, &mut grads)?;
    }
    Ok((loss, grads))
}

pub struct SacAgent {
    pub id: usize,
    pub role: Role,
    pub config: AgentConfig,
    pub policy: Mlp,
    pub q: [Mlp; 2],
    pub q_target: [Mlp; 2],
    policy_opt: Adam,
    q_opt: [Adam; 2],
    pub buffer: ReplayBuffer,
}

impl SacAgent {
    /// Builds an agent around a given initial policy; critics are drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(
        id: usize,
        role: Role,
        obs_dim: usize,
        act_dim: usize,
        policy: Mlp,
        config: AgentConfig,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        if policy.architecture() != &policy_architecture(obs_dim, act_dim, &config.hidden) {
            return Err(NeuralError::Architecture.into());
        }
        let q_arch = q_architecture(obs_dim, act_dim, &config.hidden);
        let q = [Mlp::new(q_arch.clone(), rng), Mlp::new(q_arch, rng)];
        Ok(SacAgent {
            id,
            role,
            policy_opt: Adam::new(policy.param_count(), config.policy_learning_rate),
            q_opt: [
                Adam::new(q[0].param_count(), config.q_learning_rate),
                Adam::new(q[1].param_count(), config.q_learning_rate),
            ],
            q_target: q.clone(),
            q,
            policy,
            buffer: ReplayBuffer::new(id, role, config.buffer_capacity),
            config,
        })
    }

    /// Fresh policy network with the log-std head biased to `init_log_std`.
    pub fn initial_policy<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, config: &AgentConfig, rng: &mut R) -> Mlp {
        let mut p = Mlp::new(policy_architecture(obs_dim, act_dim, &config.hidden), rng);
        let n = p.param_count();
        for v in &mut p.params_mut()[n - act_dim..] {
            *v = config.init_log_std;
        }
        p
    }

    pub fn act_dim(&self) -> usize {
        self.policy.architecture().output() / 2
    }

    pub fn select_action<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R, deterministic: bool) -> Result<PolicySample, AgentError> {
        sample_policy(&self.policy, obs, rng, deterministic)
    }

    /// `y = R + γ(min_i Q_targ,i(s', ã') − τ log π(ã'|s'))`. Episodes end
    /// on a slot limit rather than a terminal state, so the final slot
    /// bootstraps too.
    pub fn q_target_value<R: Rng + ?Sized>(&self, t: &Transition, rng: &mut R) -> Result<f64, AgentError> {
        let next = sample_policy(&self.policy, &t.next_observation, rng, false)?;
        let input = concat(&t.next_observation, &next.action);
        let q0 = self.q_target[0].forward(&input)?[0];
        let q1 = self.q_target[1].forward(&input)?[0];
        Ok(t.reward + self.config.gamma * (q0.min(q1) - self.config.tau * next.log_prob))
    }
}

/// One mean-squared-error step on each critic. Returns the mean of the two losses.
pub fn manager_q_update<R: Rng + ?Sized>(agent: &mut SacAgent, rng: &mut R) -> Result<f64, AgentError> {
    let batch: Vec<Transition> = agent
        .buffer
        .sample(agent.id, agent.config.batch_size, rng)?
        .into_iter()
        .cloned()
        .collect();
    let targets: Vec<f64> = batch
        .iter()
        .map(|t| agent.q_target_value(t, rng))
        .collect::<Result<_, _>>()?;
    let b = batch.len() as f64;
    let mut total = 0.0;
    for i in 0..2 {
        let mut grads = vec![0.0; agent.q[i].param_count()];
        let mut loss = 0.0;
        for (t, y) in batch.iter().zip(&targets) {
            let trace = agent.q[i].forward_trace(&concat(&t.observation, &t.action))?;
            let r = trace.output()[0] - y;
            loss += r * r / b;
            agent.q[i].backward(&trace, &[2.0 * r / b], &mut grads)?;
        }
        agent.q_opt[i].step(agent.q[i].params_mut(), &grads)?;
        total += loss / 2.0;
    }
    Ok(total)
}

/// Target blend for both critics.
pub fn update_targets(agent: &mut SacAgent) -> Result<(), AgentError> {
    for i in 0..2 {
        soft_update(&mut agent.q_target[i], &agent.q[i], agent.config.zeta)?;
    }
    Ok(())
}

fn policy_step<R: Rng + ?Sized>(agent: &mut SacAgent, critics: [&Mlp; 2], rng: &mut R) -> Result<f64, AgentError> {
    let batch: Vec<Vec<f64>> = agent
        .buffer
        .sample(agent.id, agent.config.batch_size, rng)?
        .into_iter()
        .map(|t| t.observation.clone())
        .collect();
    let obs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
    let (loss, grads) = policy_gradient(&agent.policy, critics, &obs, agent.config.tau, rng)?;
    agent.policy_opt.step(agent.policy.params_mut(), &grads)?;
    Ok(loss)
}

/// Policy step against the agent's own critics.
pub fn manager_policy_update<R: Rng + ?Sized>(agent: &mut SacAgent, rng: &mut R) -> Result<f64, AgentError> {
    let critics = agent.q.clone();
    policy_step(agent, [&critics[0], &critics[1]], rng)
}

/// Policy step against critics lent by a manager. The controller's own
/// critics are replaced by the borrowed ones and never trained.
pub fn controller_policy_update<R: Rng + ?Sized>(
    agent: &mut SacAgent,
    borrowed: [&Mlp; 2],
    rng: &mut R,
) -> Result<f64, AgentError> {
    for i in 0..2 {
        if borrowed[i].architecture() != agent.q[i].architecture() {
            return Err(NeuralError::Architecture.into());
        }
        agent.q[i] = borrowed[i].clone();
    }
    let critics = agent.q.clone();
    policy_step(agent, [&critics[0], &critics[1]], rng)
}

/// `Σ B_n φ_n / Σ B_n`, elementwise.
pub fn fedavg_policies(policies: &[&Mlp], weights: &[usize]) -> Result<Mlp, AgentError> {
    let first = policies.first().ok_or(AgentError::ZeroWeight)?;
    if policies.len() != weights.len() {
        return Err(AgentError::Setup("one weight per policy".into()));
    }
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(AgentError::ZeroWeight);
    }
    let mut acc = vec![0.0; first.param_count()];
    for (p, &w) in policies.iter().zip(weights) {
        if p.architecture() != first.architecture() {
            return Err(NeuralError::Architecture.into());
        }
        let f = w as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(p.params()) {
            *a += f * v;
        }
    }
    Ok(Mlp::from_params(first.architecture().clone(), acc)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Party {
    Agent(usize),
    Aggregator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Payload {
    CriticParameters,
    PolicyParameters,
}

/// One message between parties. Only parameter snapshots can be expressed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exchange {
    pub episode: usize,
    pub from: Party,
    pub to: Party,
    pub payload: Payload,
    pub values: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FederationLedger {
    pub exchanges: Vec<Exchange>,
}

impl FederationLedger {
    fn record(&mut self, episode: usize, from: Party, to: Party, payload: Payload, values: usize) {
        self.exchanges.push(Exchange {
            episode,
            from,
            to,
            payload,
            values,
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    FedSac,
    DecSac,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::FedSac => "fedsac",
            Scheme::DecSac => "decsac",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_manager_reward: f64,
    /// `C*/max(C, C*)` over all links, averaged over slots.
    pub mean_global_reward: f64,
    /// Expected two-stage cost of the joint reservation, averaged over slots.
    pub mean_cost: f64,
    pub policy_loss: f64,
    pub q_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub manager: usize,
    pub slot: usize,
    pub scenario: u32,
    pub cost: f64,
    pub reward: f64,
}

pub struct TrainingRun {
    pub scheme: Scheme,
    pub log: Vec<EpisodeLog>,
    pub trace: Vec<TraceRow>,
    pub agents: Vec<SacAgent>,
    pub ledger: FederationLedger,
}

impl TrainingRun {
    /// `episode,mean_manager_reward,mean_cost,policy_loss,q_loss`
    pub fn log_csv(&self) -> String {
        let mut out = String::from("episode,mean_manager_reward,mean_cost,policy_loss,q_loss\n");
        for e in &self.log {
            out += &format!(
                "{},{},{},{},{}\n",
                e.episode, e.mean_manager_reward, e.mean_cost, e.policy_loss, e.q_loss
            );
        }
        out
    }

    /// `slot,scenario,cost,reward` for one manager and episode.
    pub fn trace_csv(&self, manager: usize, episode: usize) -> String {
        let mut out = String::from("slot,scenario,cost,reward\n");
        for r in self.trace.iter().filter(|r| r.manager == manager && r.episode == episode) {
            out += &format!("{},{},{},{}\n", r.slot, r.scenario, r.cost, r.reward);
        }
        out
    }
}

/// Federated training: managers learn critics and policies, controllers
/// borrow critics, and FedAvg merges all policies every episode.
pub fn train_fedsac(env: &mut ProvisioningEnv, config: &AgentConfig, episodes: usize, seed: u64) -> Result<TrainingRun, AgentError> {
    train(env, config, episodes, seed, Scheme::FedSac)
}

/// Decentralised baseline: every agent must be a manager; no exchange.
pub fn train_decsac(env: &mut ProvisioningEnv, config: &AgentConfig, episodes: usize, seed: u64) -> Result<TrainingRun, AgentError> {
    if (0..env.config().agent_count()).any(|a| !env.config().is_manager(a)) {
        return Err(AgentError::Setup("DecSAC runs managers only".into()));
    }
    train(env, config, episodes, seed, Scheme::DecSac)
}

fn train(
    env: &mut ProvisioningEnv,
    config: &AgentConfig,
    episodes: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<TrainingRun, AgentError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env_cfg = env.config().clone();
    let (obs_dim, act_dim) = (env.observation_dim(), env.action_dim());
    let initial = SacAgent::initial_policy(obs_dim, act_dim, config, &mut rng);
    let mut agents: Vec<SacAgent> = (0..env_cfg.agent_count())
        .map(|id| {
            let role = if env_cfg.is_manager(id) {
                Role::Manager
            } else {
                Role::Controller
            };
            SacAgent::new(id, role, obs_dim, act_dim, initial.clone(), config.clone(), &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let managers = env_cfg.managers.clone();
    let optimal = env.optimal_cost();
    let levels = env.scenarios().levels().to_vec();
    let mut log = Vec::with_capacity(episodes);
    let mut trace = Vec::new();
    let mut ledger = FederationLedger::default();
    let slots = env_cfg.slots_per_episode;

    for episode in 0..episodes {
        env.reset_with_seed(seed.wrapping_mul(1_000_003).wrapping_add(episode as u64));
        let mut obs = env.observations();
        let (mut mgr_reward, mut global_reward, mut cost) = (0.0, 0.0, 0.0);
        let (mut p_loss, mut q_loss, mut updates) = (0.0, 0.0, 0usize);
        for slot in 0..slots {
            let actions: Vec<Vec<f64>> = agents
                .iter()
                .zip(&obs)
                .map(|(a, o)| a.select_action(o, &mut rng, false).map(|s| s.action))
                .collect::<Result<_, _>>()?;
            let out = env.step(&actions)?;
            for (n, agent) in agents.iter_mut().enumerate() {
                agent.buffer.push(Transition {
                    observation: obs[n].clone(),
                    action: actions[n].clone(),
                    reward: if agent.role == Role::Manager { out.rewards[n] } else { 0.0 },
                    next_observation: out.observations[n].clone(),
                    done: out.done,
                })?;
            }
            for &m in &managers {
                mgr_reward += out.rewards[m] / (managers.len() * slots) as f64;
                trace.push(TraceRow {
                    episode,
                    manager: m,
                    slot,
                    scenario: levels[out.scenario],
                    cost: out.realised_costs[m],
                    reward: out.rewards[m],
                });
            }
            global_reward += reward(optimal, out.expected_cost) / slots as f64;
            cost += out.expected_cost / slots as f64;
            for &m in &managers {
                let agent = &mut agents[m];
                if agent.buffer.len() < config.warmup {
                    continue;
                }
                for _ in 0..config.updates_per_step {
                    q_loss += manager_q_update(agent, &mut rng)?;
                    p_loss += manager_policy_update(agent, &mut rng)?;
                    update_targets(agent)?;
                    updates += 1;
                }
            }
            obs = out.observations;
        }

        let warmed = managers.iter().any(|&m| agents[m].buffer.len() >= config.warmup);
        if scheme == Scheme::FedSac && warmed {
            federate(&mut agents, &managers, config, episode, &mut ledger, &mut rng)?;
        }
        let per = |v: f64| if updates == 0 { 0.0 } else { v / updates as f64 };
        log.push(EpisodeLog {
            episode,
            mean_manager_reward: mgr_reward,
            mean_global_reward: global_reward,
            mean_cost: cost,
            policy_loss: per(p_loss),
            q_loss: per(q_loss),
        });
    }
    Ok(TrainingRun {
        scheme,
        log,
        trace,
        agents,
        ledger,
    })
}

/// Critic lending, local controller steps and FedAvg.
fn federate<R: Rng + ?Sized>(
    agents: &mut [SacAgent],
    managers: &[usize],
    config: &AgentConfig,
    episode: usize,
    ledger: &mut FederationLedger,
    rng: &mut R,
) -> Result<(), AgentError> {
    let steps = config.controller_steps.unwrap_or(1).max(1);
    let lenders: Vec<[Mlp; 2]> = managers.iter().map(|&m| agents[m].q.clone()).collect();
    for n in 0..agents.len() {
        if agents[n].role == Role::Controller {
            let k = n % managers.len();
            let values = lenders[k][0].param_count() + lenders[k][1].param_count();
            ledger.record(episode, Party::Agent(managers[k]), Party::Agent(n), Payload::CriticParameters, values);
            let critics = [&lenders[k][0], &lenders[k][1]];
            for _ in 0..steps {
                controller_policy_update(&mut agents[n], critics, rng)?;
            }
        }
    }
    let weights: Vec<usize> = agents.iter().map(|a| a.buffer.len()).collect();
    let policies: Vec<&Mlp> = agents.iter().map(|a| &a.policy).collect();
    let global = fedavg_policies(&policies, &weights)?;
    for a in agents.iter_mut() {
        ledger.record(episode, Party::Agent(a.id), Party::Aggregator, Payload::PolicyParameters, global.param_count());
        ledger.record(episode, Party::Aggregator, Party::Agent(a.id), Payload::PolicyParameters, global.param_count());
        a.policy = global.clone();
    }
    Ok(())
}

/// First episode whose trailing `window`-episode mean global reward reaches
/// `threshold`; `None` if never.
pub fn episodes_to_threshold(log: &[EpisodeLog], threshold: f64, window: usize) -> Option<usize> {
    let w = window.max(1);
    (w - 1..log.len()).find(|&e| {
        let mean: f64 = log[e + 1 - w..=e].iter().map(|l| l.mean_global_reward).sum::<f64>() / w as f64;
        mean >= threshold
    })
    .map(|e| e + 1)
}

/// Highest trailing `window`-episode mean global reward in the log.
pub fn best_trailing_mean(log: &[EpisodeLog], window: usize) -> f64 {
    let w = window.max(1);
    (w - 1..log.len())
        .map(|e| log[e + 1 - w..=e].iter().map(|l| l.mean_global_reward).sum::<f64>() / w as f64)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Mean global reward over the last `n` episodes.
pub fn final_mean_reward(log: &[EpisodeLog], n: usize) -> f64 {
    let tail = &log[log.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|l| l.mean_global_reward).sum::<f64>() / tail.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{toy_instance, EnvConfig};
    use qkdprov_core::demand::build_scenarios;
    use qkdprov_core::{CostTable, PhysicalParams};

    fn small_config() -> AgentConfig {
        AgentConfig {
            hidden: vec![8],
            batch_size: 8,
            warmup: 8,
            ..Default::default()
        }
    }

    fn agent(id: usize, role: Role, seed: u64) -> SacAgent {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SacAgent::initial_policy(3, 1, &cfg, &mut rng);
        SacAgent::new(id, role, 3, 1, p, cfg, &mut rng).unwrap()
    }

    fn fill(a: &mut SacAgent, reward: f64, n: usize) {
        for i in 0..n {
            let x = i as f64 / n as f64;
            a.buffer
                .push(Transition {
                    observation: vec![x, 1.0 - x, 0.5],
                    action: vec![x * 2.0 - 1.0],
                    reward,
                    next_observation: vec![1.0 - x, x, 0.5],
                    done: i % 2 == 0,
                })
                .unwrap();
        }
    }

    fn env(agents: usize, managers: usize) -> ProvisioningEnv {
        let (t, r) = toy_instance();
        let s = build_scenarios(10, None).unwrap();
        let cfg = EnvConfig::round_robin(&t, agents, managers, 1);
        ProvisioningEnv::new(&t, &r, &s, &CostTable::default(), &PhysicalParams::default(), cfg).unwrap()
    }

    #[test]
    fn stable_log_term_matches_direct_formula() {
        for u in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            assert!((log_one_minus_tanh_sq(u) - direct).abs() < 1e-12);
        }
        assert!(log_one_minus_tanh_sq(40.0).is_finite());
    }

    #[test]
    fn deterministic_action_is_tanh_of_mean() {
        let a = agent(0, Role::Manager, 1);
        let obs = [0.1, 0.2, 0.3];
        let s = a.select_action(&obs, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
        assert_eq!(s.action, vec![s.mean[0].tanh()]);
        let st = a.select_action(&obs, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        assert!(st.action[0].abs() < 1.0);
    }

    #[test]
    fn tiny_sigma_centres_on_tanh_mean() {
        let (a, _, _) = squashed_sample(&[0.0], &[-20.0], &[1.5]);
        assert!(a[0].abs() < 1e-8);
    }

    #[test]
    fn target_with_zero_discount_is_reward() {
        let mut a = agent(0, Role::Manager, 2);
        a.config.gamma = 1e-300;
        fill(&mut a, 0.7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Vec<Transition> = a.buffer.sample(0, 16, &mut rng).unwrap().into_iter().cloned().collect();
        for t in &batch {
            assert!((a.q_target_value(t, &mut rng).unwrap() - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn target_with_known_critics() {
        let mut a = agent(0, Role::Manager, 3);
        a.config.tau = 1e-300;
        let arch = a.q[0].architecture().clone();
        let n = arch.param_count();
        let mut p0 = vec![0.0; n];
        p0[n - 1] = 2.0;
        let mut p1 = vec![0.0; n];
        p1[n - 1] = 3.0;
        a.q_target = [Mlp::from_params(arch.clone(), p0).unwrap(), Mlp::from_params(arch, p1).unwrap()];
        let t = Transition {
            observation: vec![0.0; 3],
            action: vec![0.0],
            reward: 0.5,
            next_observation: vec![0.1; 3],
            done: false,
        };
        let y = a.q_target_value(&t, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((y - (0.5 + 0.95 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn controller_buffers_refuse_rewards_and_foreign_readers() {
        let mut c = agent(4, Role::Controller, 5);
        let t = Transition {
            observation: vec![0.0; 3],
            action: vec![0.0],
            reward: 0.1,
            next_observation: vec![0.0; 3],
            done: true,
        };
        assert!(matches!(c.buffer.push(t.clone()), Err(AgentError::Privacy(_))));
        c.buffer.push(Transition { reward: 0.0, ..t }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(c.buffer.sample(1, 1, &mut rng), Err(AgentError::Privacy(_))));
        assert_eq!(c.buffer.sample(4, 1, &mut rng).unwrap().len(), 1);
        let empty = ReplayBuffer::new(9, Role::Manager, 4);
        assert!(matches!(empty.sample(9, 1, &mut rng), Err(AgentError::EmptyBuffer(9))));
    }

    #[test]
    fn ring_buffer_caps_size() {
        let mut b = ReplayBuffer::new(0, Role::Manager, 3);
        for i in 0..7 {
            b.push(Transition {
                observation: vec![i as f64],
                action: vec![],
                reward: 1.0,
                next_observation: vec![],
                done: false,
            })
            .unwrap();
        }
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn controller_with_borrowed_critics_matches_manager() {
        let mut m = agent(0, Role::Manager, 6);
        let mut c = agent(0, Role::Controller, 7);
        c.policy = m.policy.clone();
        fill(&mut m, 0.0, 10);
        fill(&mut c, 0.0, 10);
        let critics = m.q.clone();
        manager_policy_update(&mut m, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        controller_policy_update(&mut c, [&critics[0], &critics[1]], &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(m.policy, c.policy);

        let mut empty = agent(3, Role::Controller, 8);
        let r = controller_policy_update(&mut empty, [&critics[0], &critics[1]], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(AgentError::EmptyBuffer(3))));
        let other = Mlp::new(q_architecture(4, 1, &[8]), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(controller_policy_update(&mut c, [&other, &other], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn single_sample_loss_is_the_bracket() {
        let a = agent(0, Role::Manager, 9);
        let obs = [0.3, -0.2, 0.8];
        let (loss, _) = policy_gradient(&a.policy, [&a.q[0], &a.q[1]], &[&obs], 0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_policy(&a.policy, &obs, &mut rng, false).unwrap();
        let input = concat(&obs, &s.action);
        let q = a.q[0].forward(&input).unwrap()[0].min(a.q[1].forward(&input).unwrap()[0]);
        assert!((loss - (0.2 * s.log_prob - q)).abs() < 1e-12);
    }

    #[test]
    fn fedavg_arithmetic() {
        let arch = policy_architecture(1, 1, &[]);
        let n = arch.param_count();
        let p = Mlp::from_params(arch.clone(), vec![0.4; n]).unwrap();
        let q = Mlp::from_params(arch.clone(), vec![1.0; n]).unwrap();
        let z = Mlp::from_params(arch.clone(), vec![0.0; n]).unwrap();
        assert_eq!(fedavg_policies(&[&p, &p], &[5, 5]).unwrap(), p);
        let mid = fedavg_policies(&[&p, &q], &[7, 7]).unwrap();
        assert!(mid.params().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let w = fedavg_policies(&[&z, &q], &[100, 300]).unwrap();
        assert!(w.params().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        assert!(matches!(fedavg_policies(&[&p], &[0]), Err(AgentError::ZeroWeight)));
    }

    #[test]
    fn zero_episodes_leave_policies_untouched() {
        let mut e = env(3, 1);
        let run = train_fedsac(&mut e, &small_config(), 0, 5).unwrap();
        assert!(run.log.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = SacAgent::initial_policy(e.observation_dim(), e.action_dim(), &small_config(), &mut rng);
        assert!(run.agents.iter().all(|a| a.policy == init));
    }

    #[test]
    fn training_is_deterministic_and_private() {
        let go = || {
            let mut e = env(3, 1);
            train_fedsac(&mut e, &small_config(), 4, 3).unwrap()
        };
        let (a, b) = (go(), go());
        assert_eq!(a.log, b.log);
        assert!(!a.ledger.exchanges.is_empty());
        for agent in &a.agents {
            assert!(agent.buffer.read_log().iter().all(|&r| r == agent.id));
            if agent.role == Role::Controller {
                assert!(agent.buffer.rewards().all(|r| r == 0.0));
            }
        }
    }

    #[test]
    fn decsac_requires_managers_only_and_never_exchanges() {
        let mut e = env(3, 1);
        assert!(train_decsac(&mut e, &small_config(), 1, 0).is_err());
        let mut e = env(1, 1);
        let run = train_decsac(&mut e, &small_config(), 3, 0).unwrap();
        assert!(run.ledger.exchanges.is_empty());
        assert_eq!(run.log_csv().lines().next().unwrap(), "episode,mean_manager_reward,mean_cost,policy_loss,q_loss");
        assert_eq!(run.trace_csv(0, 0).lines().count(), 1 + 8);
    }

    #[test]
    fn threshold_detection() {
        let mk = |r: f64| EpisodeLog {
            episode: 0,
            mean_manager_reward: r,
            mean_global_reward: r,
            mean_cost: 0.0,
            policy_loss: 0.0,
            q_loss: 0.0,
        };
        let log: Vec<_> = [0.5, 0.9, 0.96, 0.97, 0.99].iter().map(|&r| mk(r)).collect();
        assert_eq!(episodes_to_threshold(&log, 0.95, 1), Some(3));
        assert_eq!(episodes_to_threshold(&log, 0.95, 2), Some(4));
        assert_eq!(episodes_to_threshold(&log, 0.999, 1), None);
        assert!((final_mean_reward(&log, 2) - 0.98).abs() < 1e-12);
    }
}
