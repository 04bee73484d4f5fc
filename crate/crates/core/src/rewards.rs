//! Toy terminal rewards `R(x_0, c)`.

use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    /// `-‖x_0 - target(c)‖₂`. With one target the condition is ignored;
    /// with several, the condition label selects the target.
    ModeDistance { targets: Vec<Vec<f64>> },
    /// Smoothed indicator of the ball `‖x_0 - center‖ ≤ radius`:
    /// `sigmoid((radius - ‖x_0 - center‖) / smoothness)`, in `[0, 1]`.
    RegionIndicator {
        center: Vec<f64>,
        radius: f64,
        smoothness: f64,
    },
    /// Weighted sum of leaf rewards.
    Composite(Vec<(RewardSpec, f64)>),
}

impl RewardSpec {
    pub fn mode_distance(target: Vec<f64>) -> Self {
        RewardSpec::ModeDistance {
            targets: alloc::vec![target],
        }
    }

    pub fn region(center: Vec<f64>, radius: f64, smoothness: f64) -> Self {
        RewardSpec::RegionIndicator {
            center,
            radius,
            smoothness,
        }
    }

    /// Checks parameter domains, dimensions and the nesting limit (one level of
    /// composition over leaves).
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.validate_at(dim, 1)
    }

    fn validate_at(&self, dim: usize, depth: usize) -> Result<()> {
        match self {
            RewardSpec::ModeDistance { targets } => {
                if targets.is_empty() {
                    return Err(Error::invalid("reward.target", "needs at least one target"));
                }
                for t in targets {
                    check_len("reward target", dim, t.len())?;
                    if t.iter().any(|v| !v.is_finite()) {
                        return Err(Error::invalid("reward.target", "must be finite"));
                    }
                }
            }
            RewardSpec::RegionIndicator {
                center,
                radius,
                smoothness,
            } => {
                check_len("region center", dim, center.len())?;
                if !(radius.is_finite() && *radius >= 0.0) {
                    return Err(Error::invalid("reward.region.radius", "must be finite and >= 0"));
                }
                if !(smoothness.is_finite() && *smoothness > 0.0) {
                    return Err(Error::invalid(
                        "reward.region.smoothness",
                        "must be finite and > 0",
                    ));
                }
            }
            RewardSpec::Composite(parts) => {
                if depth >= 2 {
                    return Err(Error::invalid("reward", "composites nest at most two levels"));
                }
                if parts.is_empty() {
                    return Err(Error::invalid("reward", "composite needs at least one part"));
                }
                for (spec, w) in parts {
                    if !w.is_finite() {
                        return Err(Error::invalid("reward.weight", "must be finite"));
                    }
                    spec.validate_at(dim, depth + 1)?;
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, x0: &[f64], c: Option<usize>) -> Result<f64> {
        match self {
            RewardSpec::ModeDistance { targets } => {
                let target = match (targets.len(), c) {
                    (1, _) => &targets[0],
                    (n, Some(c)) if c < n => &targets[c],
                    (n, c) => {
                        return Err(Error::IndexOutOfRange {
                            what: "reward condition",
                            index: c.unwrap_or(usize::MAX),
                            bound: n,
                        })
                    }
                };
                Ok(-distance(x0, target)?)
            }
            RewardSpec::RegionIndicator {
                center,
                radius,
                smoothness,
            } => {
                let z = (radius - distance(x0, center)?) / smoothness;
                Ok(1.0 / (1.0 + libm::exp(-z)))
            }
            RewardSpec::Composite(parts) => parts
                .iter()
                .map(|(spec, w)| spec.evaluate(x0, c).map(|r| w * r))
                .sum(),
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("reward input", b.len(), a.len())?;
    Ok(libm::sqrt(
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    ))
}

/// Anything that scores a final state: a [`RewardSpec`] or a plain closure.
pub trait Reward {
    fn reward(&self, x0: &[f64], c: Option<usize>) -> Result<f64>;
}

impl Reward for RewardSpec {
    fn reward(&self, x0: &[f64], c: Option<usize>) -> Result<f64> {
        self.evaluate(x0, c)
    }
}

impl<F> Reward for F
where
    F: Fn(&[f64], Option<usize>) -> f64,
{
    fn reward(&self, x0: &[f64], c: Option<usize>) -> Result<f64> {
        Ok(self(x0, c))
    }
}
