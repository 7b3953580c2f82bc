//! Vertical federated logistic regression under a secret-key budget.
//!
//! Features are split column-wise into worker shards. Worker 0 also holds the
//! labels. A budget admits a number of workers; the rest contribute nothing
//! to the margin `u_i = Σ_k θ_k · x_i^k`. Training minimises the second-order
//! Taylor surrogate of the logistic loss,
//! `(1/S) Σ_i [log 2 − ½ y_i u_i + ⅛ u_i²] + (λ/2)‖Θ‖²`.
//! Workers exchange only per-sample scalars: partial margins go to the label
//! holder and residuals come back.

use std::cell::RefCell;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FelError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Samples with ±1 labels and a column partition into worker shards.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    /// Row-major `S × d`.
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    shards: Vec<Range<usize>>,
}

impl VerticalDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>, shards: Vec<Range<usize>>) -> Result<Self, FelError> {
        if features.is_empty() {
            return Err(FelError::Invalid("no samples".into()));
        }
        if features.len() != labels.len() {
            return Err(FelError::Invalid(format!(
                "{} rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let d = features[0].len();
        if features.iter().any(|r| r.len() != d) {
            return Err(FelError::Invalid("ragged feature rows".into()));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(FelError::Invalid("labels must be -1 or +1".into()));
        }
        check_shards(&shards, d)?;
        Ok(VerticalDataset {
            features,
            labels,
            shards,
        })
    }

    /// Gaussian class-conditional data: `x = y·separation + N(0, 1)` per
    /// feature, with equiprobable labels, split into `workers` shards of
    /// near-equal width.
    pub fn synthetic<R: Rng + ?Sized>(
        samples: usize,
        dim: usize,
        workers: usize,
        separation: f64,
        rng: &mut R,
    ) -> Result<Self, FelError> {
        let mut features = Vec::with_capacity(samples);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let row = (0..dim)
                .map(|_| y * separation + rng.sample::<f64, _>(StandardNormal))
                .collect();
            features.push(row);
            labels.push(y);
        }
        VerticalDataset::new(features, labels, even_shards(dim, workers)?)
    }

    /// CSV with a header row, feature columns and a final `label` column.
    /// Labels `0` are read as `-1`.
    pub fn parse_csv(text: &str, shards: Option<Vec<Range<usize>>>) -> Result<Self, FelError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| FelError::Invalid("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.last() != Some(&"label") || cols.len() < 2 {
            return Err(FelError::Parse {
                line: 1,
                message: "header must end with a `label` column after at least one feature".into(),
            });
        }
        let d = cols.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines {
            let perr = |message: String| FelError::Parse { line: i + 1, message };
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| perr(format!("bad number `{}`", v.trim()))))
                .collect::<Result<_, _>>()?;
            if vals.len() != d + 1 {
                return Err(perr(format!("expected {} fields, found {}", d + 1, vals.len())));
            }
            let y = match vals[d] {
                v if v == 1.0 => 1.0,
                v if v == 0.0 || v == -1.0 => -1.0,
                v => return Err(perr(format!("label {v} is not 0, -1 or 1"))),
            };
            features.push(vals[..d].to_vec());
            labels.push(y);
        }
        let shards = match shards {
            Some(s) => s,
            None => even_shards(d, d.min(8))?,
        };
        VerticalDataset::new(features, labels, shards)
    }

    pub fn from_csv_file(path: impl AsRef<Path>, shards: Option<Vec<Range<usize>>>) -> Result<Self, FelError> {
        VerticalDataset::parse_csv(&std::fs::read_to_string(path)?, shards)
    }

    pub fn to_csv(&self) -> String {
        let mut out: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        out.push("label".into());
        let mut text = out.join(",") + "\n";
        for (row, y) in self.features.iter().zip(&self.labels) {
            let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            fields.push((*y as i64).to_string());
            text += &(fields.join(",") + "\n");
        }
        text
    }

    pub fn samples(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn worker_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[Range<usize>] {
        &self.shards
    }

    /// Hands each worker its own columns; only worker 0 receives labels.
    pub fn into_workers(self) -> Vec<Worker> {
        let VerticalDataset {
            features,
            labels,
            shards,
        } = self;
        let mut labels = Some(labels);
        shards
            .into_iter()
            .enumerate()
            .map(|(k, cols)| Worker {
                id: k,
                shard: features.iter().map(|r| r[cols.clone()].to_vec()).collect(),
                labels: if k == 0 { labels.take() } else { None },
                columns: cols,
                log: RefCell::new(Vec::new()),
            })
            .collect()
    }
}

fn check_shards(shards: &[Range<usize>], d: usize) -> Result<(), FelError> {
    if shards.is_empty() {
        return Err(FelError::Invalid("no shards".into()));
    }
    let mut next = 0;
    for s in shards {
        if s.start != next || s.end <= s.start {
            return Err(FelError::Invalid(format!(
                "shards must tile 0..{d} contiguously with width >= 1; got {}..{}",
                s.start, s.end
            )));
        }
        next = s.end;
    }
    if next != d {
        return Err(FelError::Invalid(format!("shards cover 0..{next}, expected 0..{d}")));
    }
    Ok(())
}

/// `workers` contiguous column blocks whose widths differ by at most one.
pub fn even_shards(dim: usize, workers: usize) -> Result<Vec<Range<usize>>, FelError> {
    if workers == 0 || workers > dim {
        return Err(FelError::Invalid(format!("cannot split {dim} columns into {workers} shards")));
    }
    let base = dim / workers;
    let extra = dim % workers;
    let mut start = 0;
    Ok((0..workers)
        .map(|k| {
            let w = base + usize::from(k < extra);
            let r = start..start + w;
            start += w;
            r
        })
        .collect())
}

/// Parses `worker <k> <col_start> <col_end>` lines; columns are 0-based and
/// `col_end` is exclusive.
pub fn parse_shard_map(text: &str) -> Result<Vec<Range<usize>>, FelError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |message: String| FelError::Parse { line: i + 1, message };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "worker" {
            return Err(perr("expected `worker <k> <col_start> <col_end>`".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| perr(format!("bad integer `{s}`")));
        entries.push((num(parts[1])?, num(parts[2])?..num(parts[3])?));
    }
    entries.sort_by_key(|e| e.0);
    for (i, (k, _)) in entries.iter().enumerate() {
        if *k != i {
            return Err(FelError::Invalid(format!("worker ids must be 0..{}", entries.len())));
        }
    }
    Ok(entries.into_iter().map(|e| e.1).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Features { worker: usize },
    Labels { worker: usize },
}

/// One party of the vertical split. Holds only its own columns.
#[derive(Debug)]
pub struct Worker {
    pub id: usize,
    pub columns: Range<usize>,
    shard: Vec<Vec<f64>>,
    labels: Option<Vec<f64>>,
    log: RefCell<Vec<Access>>,
}

impl Worker {
    pub fn holds_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Reads recorded against this worker's own data.
    pub fn access_log(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }

    /// Partial margins `θ_k · x_i^k` for every sample.
    fn partial_margins(&self, theta: &[f64]) -> Vec<f64> {
        self.log.borrow_mut().push(Access::Features { worker: self.id });
        self.shard
            .iter()
            .map(|row| row.iter().zip(theta).map(|(x, t)| x * t).sum())
            .collect()
    }

    /// Label holder only: loss data term and per-sample residuals
    /// `∂ℓ/∂u_i / S = (−½ y_i + ¼ u_i) / S`.
    fn residuals(&self, margins: &[f64]) -> (f64, Vec<f64>) {
        let labels = self.labels.as_ref().expect("residuals requested from a worker without labels");
        self.log.borrow_mut().push(Access::Labels { worker: self.id });
        let s = labels.len() as f64;
        let mut loss = 0.0;
        let res = labels
            .iter()
            .zip(margins)
            .map(|(&y, &u)| {
                loss += std::f64::consts::LN_2 - 0.5 * y * u + 0.125 * u * u;
                (-0.5 * y + 0.25 * u) / s
            })
            .collect();
        (loss / s, res)
    }

    /// Own-block gradient from received residuals.
    fn block_gradient(&self, theta: &[f64], residuals: &[f64], l2: f64) -> Vec<f64> {
        self.log.borrow_mut().push(Access::Features { worker: self.id });
        let mut g: Vec<f64> = theta.iter().map(|t| l2 * t).collect();
        for (row, r) in self.shard.iter().zip(residuals) {
            for (gj, x) in g.iter_mut().zip(row) {
                *gj += r * x;
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SecretKeyBudget {
    /// Key units per second granted to the cluster head.
    pub rate: f64,
    /// Key units per second consumed by one secured worker channel.
    pub per_channel_rate: f64,
}

/// `min(K_max, 1 + ⌊rate / per_channel_rate⌋)`; the label holder always
/// participates.
pub fn admitted_workers(budget: SecretKeyBudget, max_workers: usize) -> usize {
    assert!(max_workers >= 1, "need at least one worker");
    assert!(budget.per_channel_rate > 0.0, "per-channel rate must be positive");
    let extra = (budget.rate.max(0.0) / budget.per_channel_rate).floor();
    let k = if extra >= max_workers as f64 {
        max_workers
    } else {
        1 + extra as usize
    };
    k.clamp(1, max_workers)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// Scalars exchanged during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MessageCount {
    pub margins_sent: usize,
    pub residuals_sent: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Loss before the first update and after every epoch.
    pub losses: Vec<f64>,
    /// Parameter block per admitted worker.
    pub theta: Vec<Vec<f64>>,
    pub messages: MessageCount,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

/// Full-batch gradient descent over the first `admitted` workers, from
/// zero parameters.
pub fn train_vertical(workers: &[Worker], admitted: usize, config: &TrainConfig) -> Result<TrainOutcome, FelError> {
    assert!(
        (1..=workers.len()).contains(&admitted),
        "admitted workers {admitted} outside 1..={}",
        workers.len()
    );
    assert!(workers[0].holds_labels(), "worker 0 must hold the labels");
    let active = &workers[..admitted];
    let mut theta: Vec<Vec<f64>> = active.iter().map(|w| vec![0.0; w.width()]).collect();
    let mut messages = MessageCount::default();
    let mut losses = Vec::with_capacity(config.epochs + 1);

    let step = |theta: &[Vec<f64>], messages: &mut MessageCount| {
        let samples = active[0].shard.len();
        let mut u = vec![0.0; samples];
        for (w, t) in active.iter().zip(theta) {
            let part = w.partial_margins(t);
            if w.id != 0 {
                messages.margins_sent += part.len();
            }
            for (ui, p) in u.iter_mut().zip(part) {
                *ui += p;
            }
        }
        let (data_loss, res) = active[0].residuals(&u);
        messages.residuals_sent += res.len() * (admitted - 1);
        let reg: f64 = theta.iter().flatten().map(|t| t * t).sum::<f64>() * config.l2 / 2.0;
        (data_loss + reg, res)
    };

    for epoch in 0..=config.epochs {
        let (loss, res) = step(&theta, &mut messages);
        if !loss.is_finite() {
            return Err(FelError::Diverged { epoch });
        }
        losses.push(loss);
        if epoch == config.epochs {
            break;
        }
        for (w, t) in active.iter().zip(theta.iter_mut()) {
            let g = w.block_gradient(t, &res, config.l2);
            for (tj, gj) in t.iter_mut().zip(g) {
                *tj -= config.learning_rate * gj;
            }
        }
    }
    Ok(TrainOutcome {
        losses,
        theta,
        messages,
    })
}

/// Centralised Taylor loss on a dense matrix; reference for the federated
/// computation and for gradient checks.
pub fn taylor_loss(theta: &[f64], features: &[Vec<f64>], labels: &[f64], l2: f64) -> f64 {
    let s = labels.len() as f64;
    let data: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let u: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
            std::f64::consts::LN_2 - 0.5 * y * u + 0.125 * u * u
        })
        .sum();
    data / s + l2 / 2.0 * theta.iter().map(|t| t * t).sum::<f64>()
}

/// Analytic gradient of [`taylor_loss`].
pub fn taylor_gradient(theta: &[f64], features: &[Vec<f64>], labels: &[f64], l2: f64) -> Vec<f64> {
    let s = labels.len() as f64;
    let mut g: Vec<f64> = theta.iter().map(|t| l2 * t).collect();
    for (x, &y) in features.iter().zip(labels) {
        let u: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
        let r = (-0.5 * y + 0.25 * u) / s;
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj += r * xj;
        }
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub rate: f64,
    pub workers: usize,
    pub final_loss: f64,
}

/// One training run per budget rate. Rates must be nondecreasing.
pub fn key_rate_sweep(
    dataset: &VerticalDataset,
    rates: &[f64],
    per_channel_rate: f64,
    config: &TrainConfig,
) -> Result<Vec<CurvePoint>, FelError> {
    if rates.windows(2).any(|w| w[1] < w[0]) {
        return Err(FelError::Invalid("budget rates must be nondecreasing".into()));
    }
    let workers = dataset.clone().into_workers();
    rates
        .iter()
        .map(|&rate| {
            let k = admitted_workers(
                SecretKeyBudget {
                    rate,
                    per_channel_rate,
                },
                workers.len(),
            );
            let out = train_vertical(&workers, k, config)?;
            Ok(CurvePoint {
                rate,
                workers: k,
                final_loss: out.final_loss(),
            })
        })
        .collect()
}

/// `rate,workers,final_loss` rows.
pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("rate,workers,final_loss\n");
    for p in points {
        out += &format!("{},{},{}\n", p.rate, p.workers, p.final_loss);
    }
    out
}
