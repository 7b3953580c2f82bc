//! Discrete secret-key-rate demand scenarios.
//!
//! All requests share one realised level per scenario, so a scenario set is
//! a distribution over levels `0..|Ω|`.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("scenario count must be at least 1")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scenario set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A distribution over demand levels, truncated to the scenario range by
/// [`ScenarioSet::from_distribution`].
pub trait LevelDistribution {
    /// Unnormalised mass at `level`.
    fn mass(&self, level: u32) -> f64;
    fn mean(&self) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Poisson {
    pub lambda: f64,
}

impl LevelDistribution for Poisson {
    fn mass(&self, level: u32) -> f64 {
        let mut p = (-self.lambda).exp();
        for k in 1..=level {
            p *= self.lambda / k as f64;
        }
        p
    }

    fn mean(&self) -> f64 {
        self.lambda
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    levels: Vec<u32>,
    probabilities: Vec<f64>,
    mean: f64,
}

/// Default Poisson mean for `n` scenarios: `floor(n / 3)`.
pub fn default_mean(num_scenarios: usize) -> f64 {
    (num_scenarios / 3) as f64
}

/// Truncated Poisson scenarios over levels `0..num_scenarios`, renormalised
/// to sum to one.
pub fn build_scenarios(num_scenarios: usize, mean: Option<f64>) -> Result<ScenarioSet, DemandError> {
    let lambda = mean.unwrap_or_else(|| default_mean(num_scenarios));
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(DemandError::Invalid(format!("Poisson mean {lambda} must be >= 0")));
    }
    ScenarioSet::from_distribution(num_scenarios, &Poisson { lambda })
}

impl ScenarioSet {
    pub fn from_distribution<D: LevelDistribution + ?Sized>(
        num_scenarios: usize,
        dist: &D,
    ) -> Result<Self, DemandError> {
        if num_scenarios == 0 {
            return Err(DemandError::Empty);
        }
        let raw: Vec<f64> = (0..num_scenarios as u32).map(|k| dist.mass(k)).collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(DemandError::Invalid("distribution has no mass on the scenario range".into()));
        }
        Ok(ScenarioSet {
            levels: (0..num_scenarios as u32).collect(),
            probabilities: raw.iter().map(|p| p / total).collect(),
            mean: dist.mean(),
        })
    }

    /// Builds a set from explicit `(level, probability)` pairs.
    pub fn from_pairs(pairs: &[(u32, f64)]) -> Result<Self, DemandError> {
        if pairs.is_empty() {
            return Err(DemandError::Empty);
        }
        for w in pairs.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(DemandError::Invalid("levels must be strictly increasing".into()));
            }
        }
        if pairs.iter().any(|&(_, p)| !(p.is_finite() && p >= 0.0)) {
            return Err(DemandError::Invalid("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = pairs.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DemandError::Invalid(format!("probabilities sum to {total}, not 1")));
        }
        let mean = pairs.iter().map(|&(k, p)| k as f64 * p).sum();
        Ok(ScenarioSet {
            levels: pairs.iter().map(|&(k, _)| k).collect(),
            probabilities: pairs.iter().map(|&(_, p)| p).collect(),
            mean,
        })
    }

    /// All mass on a single level.
    pub fn certain(level: u32) -> Self {
        ScenarioSet {
            levels: vec![level],
            probabilities: vec![1.0],
            mean: level as f64,
        }
    }

    /// Parses `scenario <k> <probability>` lines.
    pub fn parse(text: &str) -> Result<Self, DemandError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| DemandError::Parse { line: i + 1, message };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != "scenario" {
                return Err(perr("expected `scenario <k> <probability>`".into()));
            }
            let k: u32 = parts[1].parse().map_err(|_| perr(format!("bad level `{}`", parts[1])))?;
            let p: f64 = parts[2]
                .parse()
                .map_err(|_| perr(format!("bad probability `{}`", parts[2])))?;
            pairs.push((k, p));
        }
        ScenarioSet::from_pairs(&pairs)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, DemandError> {
        ScenarioSet::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, p)| format!("scenario {k} {p}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.levels.iter().copied().zip(self.probabilities.iter().copied())
    }

    /// Mean parameter of the generating distribution (before truncation).
    pub fn lambda(&self) -> f64 {
        self.mean
    }

    /// Mean level of the (truncated) scenario distribution.
    pub fn mean_level(&self) -> f64 {
        self.iter().map(|(k, p)| k as f64 * p).sum()
    }

    pub fn max_level(&self) -> u32 {
        *self.levels.last().expect("non-empty scenario set")
    }

    /// Index of a scenario drawn with probability p(k).
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left u above the final cumulative sum
        self.probabilities
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(self.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.levels[self.sample_index(rng)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_mean_is_floor_third() {
        let s = build_scenarios(10, None).unwrap();
        assert_eq!(s.lambda(), 3.0);
        assert_eq!(s.len(), 10);
        assert_eq!(s.levels(), &(0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn single_scenario_is_certain() {
        let s = build_scenarios(1, None).unwrap();
        assert_eq!(s.levels(), &[0]);
        assert_eq!(s.probabilities(), &[1.0]);
        assert!(matches!(build_scenarios(0, None), Err(DemandError::Empty)));
    }

    #[test]
    fn poisson_ratio_at_mean_is_exact() {
        let s = build_scenarios(10, Some(3.0)).unwrap();
        assert_eq!(s.probabilities()[3] / s.probabilities()[2], 1.0);
        let sum: f64 = s.probabilities().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn single_level_always_sampled() {
        let s = build_scenarios(1, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| s.sample(&mut rng) == 0));
    }

    #[test]
    fn empirical_frequencies_within_three_sigma() {
        let s = build_scenarios(10, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000usize;
        let mut counts = vec![0usize; s.len()];
        for _ in 0..n {
            counts[s.sample_index(&mut rng)] += 1;
        }
        for (i, &p) in s.probabilities().iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * sigma + 1e-12, "level {i}: {freq} vs {p}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = build_scenarios(10, None).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| s.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn override_file_round_trip_and_validation() {
        let s = ScenarioSet::parse("scenario 0 0.25\nscenario 1 0.5\nscenario 2 0.25\n").unwrap();
        assert_eq!(s.mean_level(), 1.0);
        assert_eq!(ScenarioSet::parse(&s.to_text()).unwrap(), s);
        assert!(ScenarioSet::parse("scenario 0 0.5\nscenario 1 0.4\n").is_err());
        assert!(ScenarioSet::parse("scenario 1 0.5\nscenario 0 0.5\n").is_err());
        assert!(matches!(
            ScenarioSet::parse("scenario x 1\n"),
            Err(DemandError::Parse { line: 1, .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn truncated_masses_sum_to_one(n in 1usize..40, lambda in 0.0f64..30.0) {
            let s = build_scenarios(n, Some(lambda)).unwrap();
            let sum: f64 = s.probabilities().iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(s.probabilities().iter().all(|&p| p >= 0.0));
        }
    }
}
