//! Missing-data injection policies and training-time whitening.
//!
//! All injectors take a time-major `T×N` availability mask and return the
//! reduced mask plus an evaluation mask holding exactly the removed entries.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub valid_before: usize,
    pub removed_by_failures: usize,
    pub removed_by_points: usize,
}

impl InjectionReport {
    pub fn removed(&self) -> usize {
        self.removed_by_failures + self.removed_by_points
    }

    pub fn removed_fraction(&self) -> f64 {
        if self.valid_before == 0 {
            0.0
        } else {
            self.removed() as f64 / self.valid_before as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub mask: Vec<bool>,
    pub eval_mask: Vec<bool>,
    pub report: InjectionReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPolicy {
    pub point_rate: f64,
    pub failure_prob: f64,
    pub len_min: usize,
    pub len_max: usize,
}

impl Default for BlockPolicy {
    fn default() -> Self {
        Self {
            point_rate: 0.05,
            failure_prob: 0.0015,
            len_min: 12,
            len_max: 48,
        }
    }
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("{name} must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

fn drop_points(mask: &mut [bool], eval: &mut [bool], rate: f64, rng: &mut impl Rng) -> usize {
    let mut removed = 0;
    for (m, e) in mask.iter_mut().zip(eval.iter_mut()) {
        // one draw per valid entry keeps the stream aligned across policies
        if *m && rng.random::<f64>() < rate {
            *m = false;
            *e = true;
            removed += 1;
        }
    }
    removed
}

/// Removes every valid entry independently with probability `rate`.
pub fn inject_point_missing(mask: &[bool], rate: f64, seed: u64) -> Result<Injection> {
    check_rate("point-missing rate", rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut new_mask = mask.to_vec();
    let mut eval = vec![false; mask.len()];
    let removed = drop_points(&mut new_mask, &mut eval, rate, &mut rng);
    Ok(Injection {
        mask: new_mask,
        eval_mask: eval,
        report: InjectionReport {
            valid_before: mask.iter().filter(|&&m| m).count(),
            removed_by_failures: 0,
            removed_by_points: removed,
        },
    })
}

/// Simulated sensor failures plus point dropout.
///
/// Every `(node, step)` independently starts a failure with probability
/// `failure_prob`; a failure hides that node for `S ~ U{len_min..=len_max}`
/// steps (overlapping failures merge). Afterwards `point_rate` of the
/// remaining valid entries are dropped.
pub fn inject_block_missing(mask: &[bool], n_nodes: usize, policy: BlockPolicy, seed: u64) -> Result<Injection> {
    check_rate("block point rate", policy.point_rate)?;
    if !(0.0..=1.0).contains(&policy.failure_prob) {
        return Err(Error::Invalid(format!("failure probability must lie in [0, 1], got {}", policy.failure_prob)));
    }
    if policy.len_min == 0 || policy.len_min > policy.len_max {
        return Err(Error::Invalid(format!(
            "failure length range [{}, {}] is empty or starts at zero",
            policy.len_min, policy.len_max
        )));
    }
    if n_nodes == 0 || !mask.len().is_multiple_of(n_nodes) {
        return Err(Error::shape("inject_block_missing", format!("{} mask entries for {n_nodes} nodes", mask.len())));
    }
    let n_steps = mask.len() / n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut new_mask = mask.to_vec();
    let mut eval = vec![false; mask.len()];
    let mut removed_by_failures = 0;
    for i in 0..n_nodes {
        let mut covered_until = 0usize;
        for t in 0..n_steps {
            if rng.random::<f64>() < policy.failure_prob {
                let len = rng.random_range(policy.len_min..=policy.len_max);
                covered_until = covered_until.max(t + len);
            }
            if t < covered_until {
                let p = t * n_nodes + i;
                if new_mask[p] {
                    new_mask[p] = false;
                    eval[p] = true;
                    removed_by_failures += 1;
                }
            }
        }
    }
    let removed_by_points = drop_points(&mut new_mask, &mut eval, policy.point_rate, &mut rng);
    Ok(Injection {
        mask: new_mask,
        eval_mask: eval,
        report: InjectionReport {
            valid_before: mask.iter().filter(|&&m| m).count(),
            removed_by_failures,
            removed_by_points,
        },
    })
}

/// I.i.d. removal of each valid observation with probability `p`.
pub fn inject_sparsity_sweep(mask: &[bool], p: f64, seed: u64) -> Result<Injection> {
    check_rate("sparsity p", p)?;
    inject_point_missing(mask, p, seed)
}

/// Hiding ratios drawn uniformly at training time.
pub const WHITEN_RATIOS: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Clone, Debug, PartialEq)]
pub struct Whitened {
    /// Entries the model may read.
    pub input_mask: Vec<bool>,
    /// Hidden valid entries used as loss targets.
    pub loss_mask: Vec<bool>,
    pub ratio: f64,
}

/// Number of entries hidden from `n_valid` at ratio `p`: nearest integer,
/// at least one when anything is valid.
pub fn whiten_count(n_valid: usize, p: f64) -> usize {
    if n_valid == 0 {
        return 0;
    }
    ((p * n_valid as f64).round() as usize).clamp(1, n_valid)
}

/// Hides a random ratio (drawn from [`WHITEN_RATIOS`]) of the visible,
/// non-evaluation entries of a window.
pub fn training_whiten(mask: &[bool], eval_mask: &[bool], rng: &mut impl Rng) -> Result<Whitened> {
    let ratio = WHITEN_RATIOS[rng.random_range(0..WHITEN_RATIOS.len())];
    training_whiten_with_ratio(mask, eval_mask, ratio, rng)
}

pub fn training_whiten_with_ratio(mask: &[bool], eval_mask: &[bool], ratio: f64, rng: &mut impl Rng) -> Result<Whitened> {
    if mask.len() != eval_mask.len() {
        return Err(Error::shape("training_whiten", format!("mask {} vs eval mask {}", mask.len(), eval_mask.len())));
    }
    let candidates: Vec<usize> = (0..mask.len()).filter(|&p| mask[p] && !eval_mask[p]).collect();
    let mut input_mask: Vec<bool> = mask.iter().zip(eval_mask).map(|(&m, &e)| m && !e).collect();
    let mut loss_mask = vec![false; mask.len()];
    let k = whiten_count(candidates.len(), ratio);
    for idx in sample(rng, candidates.len(), k).into_iter() {
        let p = candidates[idx];
        input_mask[p] = false;
        loss_mask[p] = true;
    }
    Ok(Whitened {
        input_mask,
        loss_mask,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conserves(orig: &[bool], inj: &Injection) -> bool {
        orig.iter()
            .zip(&inj.mask)
            .zip(&inj.eval_mask)
            .all(|((&o, &m), &e)| !(m && e) && ((m || e) == o))
    }

    #[test]
    fn point_rate_zero_is_identity() {
        let mask = vec![true, false, true, true];
        let inj = inject_point_missing(&mask, 0.0, 3).unwrap();
        assert_eq!(inj.mask, mask);
        assert!(inj.eval_mask.iter().all(|&e| !e));
    }

    #[test]
    fn point_rate_one_rejected() {
        assert!(inject_point_missing(&[true], 1.0, 0).is_err());
        assert!(inject_sparsity_sweep(&[true], -0.1, 0).is_err());
    }

    #[test]
    fn point_rate_quarter_statistics() {
        let mask = vec![true; 10_000];
        let inj = inject_point_missing(&mask, 0.25, 7).unwrap();
        let frac = inj.report.removed_fraction();
        assert!((frac - 0.25).abs() < 0.02, "{frac}");
        assert!(conserves(&mask, &inj));
    }

    #[test]
    fn block_without_failures_is_point_policy() {
        let mask = vec![true; 10_000];
        let policy = BlockPolicy {
            failure_prob: 0.0,
            ..BlockPolicy::default()
        };
        let inj = inject_block_missing(&mask, 10, policy, 1).unwrap();
        assert_eq!(inj.report.removed_by_failures, 0);
        assert!((inj.report.removed_fraction() - 0.05).abs() < 0.01);
    }

    #[test]
    fn block_saturation_masks_whole_node() {
        let (w, n) = (24, 3);
        let mask = vec![true; w * n];
        let policy = BlockPolicy {
            point_rate: 0.0,
            failure_prob: 1.0,
            len_min: w,
            len_max: w,
        };
        let inj = inject_block_missing(&mask, n, policy, 5).unwrap();
        assert!(inj.mask.iter().all(|&m| !m));
        assert!(conserves(&mask, &inj));
    }

    #[test]
    fn block_failure_fraction_matches_expectation() {
        let (n, t) = (207, 10_000);
        let mask = vec![true; n * t];
        let policy = BlockPolicy {
            point_rate: 0.0,
            ..BlockPolicy::default()
        };
        let inj = inject_block_missing(&mask, n, policy, 11).unwrap();
        let frac = inj.report.removed_by_failures as f64 / (n * t) as f64;
        assert!((frac - 0.0015 * 30.0).abs() < 0.01, "{frac}");
    }

    #[test]
    fn block_rejects_bad_params() {
        let m = vec![true; 4];
        let bad_len = BlockPolicy {
            len_min: 5,
            len_max: 4,
            ..BlockPolicy::default()
        };
        assert!(inject_block_missing(&m, 2, bad_len, 0).is_err());
        assert!(inject_block_missing(&m, 3, BlockPolicy::default(), 0).is_err());
    }

    #[test]
    fn sweep_statistics() {
        let mask = vec![true; 10_000];
        let inj = inject_sparsity_sweep(&mask, 0.95, 2).unwrap();
        let kept = inj.mask.iter().filter(|&&m| m).count() as f64;
        let sigma = (10_000.0 * 0.95 * 0.05f64).sqrt();
        assert!((kept - 500.0).abs() < 2.0 * sigma, "{kept}");

        let half = inject_sparsity_sweep(&mask, 0.5, 3).unwrap();
        let removed = half.report.removed() as f64;
        let kept = 10_000.0 - removed;
        assert!((removed - kept).abs() < 4.0 * 2.0 * (10_000.0 * 0.25f64).sqrt());
    }

    #[test]
    fn whiten_rounding_and_leakage() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mask = vec![true; 12];
        mask[10] = false;
        mask[11] = false;
        let mut eval = vec![false; 12];
        eval[11] = true;
        let w = training_whiten_with_ratio(&mask, &eval, 0.5, &mut rng).unwrap();
        assert_eq!(w.loss_mask.iter().filter(|&&l| l).count(), 5);
        assert!(!w.loss_mask[11] && !w.input_mask[11]);
        assert!(w.loss_mask.iter().zip(&w.input_mask).all(|(&l, &i)| !(l && i)));
        assert_eq!(whiten_count(1, 0.2), 1);
        assert_eq!(whiten_count(0, 0.5), 0);
    }

    #[test]
    fn whiten_ratio_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = vec![true; 10];
        let eval = vec![false; 10];
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let w = training_whiten(&mask, &eval, &mut rng).unwrap();
            let k = WHITEN_RATIOS.iter().position(|&r| r == w.ratio).unwrap();
            counts[k] += 1;
        }
        for c in counts {
            assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.05, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn injectors_conserve_entries(bits in proptest::collection::vec(any::<bool>(), 60), seed in any::<u64>(), rate in 0.0f64..0.99) {
            let p = inject_point_missing(&bits, rate, seed).unwrap();
            prop_assert!(conserves(&bits, &p));
            let b = inject_block_missing(&bits, 6, BlockPolicy { failure_prob: 0.1, len_min: 2, len_max: 4, point_rate: rate * 0.5 }, seed).unwrap();
            prop_assert!(conserves(&bits, &b));
            prop_assert_eq!(b.report.removed(), b.eval_mask.iter().filter(|&&e| e).count());
            // determinism
            prop_assert_eq!(inject_point_missing(&bits, rate, seed).unwrap(), p);
        }
    }
}
