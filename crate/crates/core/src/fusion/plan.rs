use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

const SIMPLEX_TOLERANCE: f32 = 1e-5;

/// Mixing weights, base choice, and (after fusion) the matched reference positions.
///
/// References are the task images other than the base, in ascending index order;
/// `match_indices[r][i]` is the flat position of reference `r` matched to base position `i`
/// on a `grid[0] x grid[1]` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPlan {
    pub alpha: Vec<f32>,
    pub base_index: usize,
    pub match_indices: Option<Vec<Vec<usize>>>,
    pub grid: Option<[usize; 2]>,
}

impl FusionPlan {
    pub fn new(alpha: Vec<f32>, base_index: usize) -> Result<Self> {
        let plan = Self {
            alpha,
            base_index,
            match_indices: None,
            grid: None,
        };
        plan.validate(plan.alpha.len())?;
        Ok(plan)
    }

    /// All weight on the base: fusion returns the base unchanged.
    pub fn one_hot(k: usize, base_index: usize) -> Result<Self> {
        let mut alpha = vec![0.0; k];
        if base_index < k {
            alpha[base_index] = 1.0;
        }
        Self::new(alpha, base_index)
    }

    /// Uniform draw from the probability simplex (normalized unit exponentials) and a uniform
    /// base index.
    pub fn sample<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        if k < 2 {
            return Err(Error::Validation(format!("fusion needs K >= 2, got {k}")));
        }
        let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let alpha = draws.iter().map(|d| (d / total) as f32).collect();
        let base_index = rng.random_range(0..k);
        Self::new(alpha, base_index)
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.alpha.len() != k {
            return Err(Error::Validation(format!(
                "plan has {} weights for {k} features",
                self.alpha.len()
            )));
        }
        if self.base_index >= k {
            return Err(Error::Validation(format!(
                "base index {} out of range for K = {k}",
                self.base_index
            )));
        }
        if self.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Validation(format!(
                "fusion weights must be finite and non-negative: {:?}",
                self.alpha
            )));
        }
        let sum: f32 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Validation(format!(
                "fusion weights sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    /// Reference image indices (every index but the base), ascending.
    pub fn references(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.k()).filter(move |&i| i != self.base_index)
    }

    pub fn with_matches(&self, matches: Vec<Vec<usize>>, grid: [usize; 2]) -> Self {
        Self {
            match_indices: Some(matches),
            grid: Some(grid),
            ..self.clone()
        }
    }

    /// Single-line record `base=..;alpha=..;grid=HxW;matches=a,b|c,d` for replay in tests
    /// and debug dumps.
    pub fn to_record(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for FusionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let alpha: Vec<String> = self.alpha.iter().map(|a| format!("{a:?}")).collect();
        write!(f, "base={};alpha={}", self.base_index, alpha.join(","))?;
        if let (Some(grid), Some(matches)) = (self.grid, &self.match_indices) {
            let rows: Vec<String> = matches
                .iter()
                .map(|m| m.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
                .collect();
            write!(f, ";grid={}x{};matches={}", grid[0], grid[1], rows.join("|"))?;
        }
        Ok(())
    }
}

impl FromStr for FusionPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Validation(format!("malformed fusion record ({what}): {s}"));
        let mut base = None;
        let mut alpha = None;
        let mut grid = None;
        let mut matches = None;
        for field in s.split(';') {
            let (key, value) = field.split_once('=').ok_or_else(|| bad("field"))?;
            match key {
                "base" => base = Some(value.parse::<usize>().map_err(|_| bad("base"))?),
                "alpha" => {
                    alpha = Some(
                        value
                            .split(',')
                            .map(|v| v.parse::<f32>().map_err(|_| bad("alpha")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "grid" => {
                    let (h, w) = value.split_once('x').ok_or_else(|| bad("grid"))?;
                    grid = Some([
                        h.parse().map_err(|_| bad("grid"))?,
                        w.parse().map_err(|_| bad("grid"))?,
                    ]);
                }
                "matches" => {
                    matches = Some(
                        value
                            .split('|')
                            .map(|row| {
                                row.split(',')
                                    .map(|v| v.parse::<usize>().map_err(|_| bad("matches")))
                                    .collect::<Result<Vec<_>>>()
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => return Err(bad("key")),
            }
        }
        let mut plan = FusionPlan::new(alpha.ok_or_else(|| bad("alpha"))?, base.ok_or_else(|| bad("base"))?)?;
        plan.grid = grid;
        plan.match_indices = matches;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampled_plans_lie_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 2..10 {
            for _ in 0..50 {
                let plan = FusionPlan::sample(k, &mut rng).unwrap();
                plan.validate(k).unwrap();
                assert!(plan.alpha.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn sampled_weights_are_uniform_on_simplex() {
        // Marginals of a flat Dirichlet(1, 1, 1) are Beta(1, 2) with mean 1/3.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let mut mean = [0.0f64; 3];
        for _ in 0..n {
            let plan = FusionPlan::sample(3, &mut rng).unwrap();
            for (m, a) in mean.iter_mut().zip(&plan.alpha) {
                *m += *a as f64 / n as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn rejects_off_simplex_weights() {
        assert!(FusionPlan::new(vec![0.5, 0.6], 0).is_err());
        assert!(FusionPlan::new(vec![1.5, -0.5], 0).is_err());
        assert!(FusionPlan::new(vec![0.5, 0.5], 2).is_err());
        assert!(FusionPlan::sample(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn record_round_trip() {
        let plan = FusionPlan::new(vec![0.25, 0.5, 0.25], 1)
            .unwrap()
            .with_matches(vec![vec![0, 3, 2, 1], vec![1, 1, 0, 0]], [2, 2]);
        let back: FusionPlan = plan.to_record().parse().unwrap();
        assert_eq!(back, plan);
        let bare = FusionPlan::one_hot(3, 2).unwrap();
        assert_eq!(bare.to_record().parse::<FusionPlan>().unwrap(), bare);
    }

    #[test]
    fn references_skip_base() {
        let plan = FusionPlan::one_hot(4, 2).unwrap();
        assert_eq!(plan.references().collect::<Vec<_>>(), vec![0, 1, 3]);
    }
}
