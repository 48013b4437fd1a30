use super::{FeedbackLabel, QuantileScheme};
use crate::error::{AltError, Result};

/// Sizes of `k` contiguous groups covering `n` items, larger groups first.
pub fn quantile_group_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Category per reward, 0 for the highest rewards. Rewards are sorted
/// descending (stable, so ties keep input order) and cut into `k` contiguous
/// groups whose sizes differ by at most one.
pub fn map_rewards_to_quantiles(rewards: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(AltError::validation("k must be at least 1"));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(AltError::numeric("quantile mapping", format!("reward {i} is {}", rewards[i])));
    }
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
    let mut out = vec![0; rewards.len()];
    let mut cursor = order.iter();
    for (cat, size) in quantile_group_sizes(rewards.len(), k).into_iter().enumerate() {
        for &i in cursor.by_ref().take(size) {
            out[i] = cat;
        }
    }
    Ok(out)
}

pub fn label_for_category(scheme: &QuantileScheme, category: usize) -> Result<FeedbackLabel> {
    scheme.labels.get(category).cloned().ok_or_else(|| {
        AltError::validation(format!("category {category} out of range for k = {}", scheme.k))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{toxicity_scheme, Encoding};
    use proptest::prelude::*;

    #[test]
    fn five_distinct() {
        let r = [0.1, 0.9, 0.5, 0.3, 0.7];
        assert_eq!(map_rewards_to_quantiles(&r, 5).unwrap(), vec![4, 0, 2, 3, 1]);
    }

    #[test]
    fn uneven_groups() {
        assert_eq!(quantile_group_sizes(7, 5), vec![2, 2, 1, 1, 1]);
        assert_eq!(quantile_group_sizes(3, 5), vec![1, 1, 1, 0, 0]);
        let r = [7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(map_rewards_to_quantiles(&r, 5).unwrap(), vec![0, 0, 1, 1, 2, 3, 4]);
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(map_rewards_to_quantiles(&[1.0, 1.0, 1.0, 1.0], 2).unwrap(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(map_rewards_to_quantiles(&[1.0, f64::NAN], 2).is_err());
        assert!(map_rewards_to_quantiles(&[1.0], 0).is_err());
        assert!(map_rewards_to_quantiles(&[], 3).unwrap().is_empty());
    }

    #[test]
    fn labels() {
        let s = toxicity_scheme(Encoding::Textual);
        assert_eq!(label_for_category(&s, 0).unwrap().text, "Lowest Toxicity");
        assert_eq!(label_for_category(&s, 4).unwrap().text, "Maximum Toxicity");
        assert!(label_for_category(&s, 5).is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_balanced(r in prop::collection::vec(-10.0f64..10.0, 0..60), k in 1usize..8) {
            let c = map_rewards_to_quantiles(&r, k).unwrap();
            for i in 0..r.len() {
                for j in 0..r.len() {
                    if r[i] > r[j] {
                        prop_assert!(c[i] <= c[j]);
                    }
                }
            }
            let counts: Vec<usize> = (0..k).map(|q| c.iter().filter(|&&x| x == q).count()).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(counts.iter().sum::<usize>(), r.len());
        }
    }
}
