//! Accumulated prediction error and discrepancy of a reconstruction order,
//! and an exhaustive check that ascending order maximises the discrepancy.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest instance [`verify_order_theorem`] will enumerate.
pub const MAX_EXHAUSTIVE: usize = 10;

/// Relative slack when comparing discrepancies of two permutations.
const REL_TOL: f64 = 1e-12;

/// Per-step scores `alpha` and per-step errors `y`, both positive and sorted
/// non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderInstance {
    alpha: Vec<f64>,
    y: Vec<f64>,
}

fn check_sequence(name: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(invalid(name, "entries must be finite and > 0"));
    }
    if v.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid(name, "entries must be sorted non-decreasing"));
    }
    Ok(())
}

impl OrderInstance {
    pub fn new(alpha: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "need equally long non-empty sequences, got {} and {}",
                alpha.len(),
                y.len()
            )));
        }
        check_sequence("alpha", &alpha)?;
        check_sequence("y", &y)?;
        Ok(Self { alpha, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }
}

/// `sqrt(sum y_i^2)`.
pub fn ape(instance: &OrderInstance) -> f64 {
    instance.y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `sum_i alpha_i * y_{pi(i)}` for a 0-based permutation `pi`.
pub fn apd(instance: &OrderInstance, pi: &[usize]) -> Result<f64> {
    let n = instance.len();
    let mut seen = vec![false; n];
    if pi.len() != n || pi.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(invalid("pi", format!("not a permutation of 0..{n}: {pi:?}")));
    }
    Ok(apd_unchecked(instance, pi))
}

fn apd_unchecked(instance: &OrderInstance, pi: &[usize]) -> f64 {
    instance
        .alpha
        .iter()
        .zip(pi)
        .map(|(a, &p)| a * instance.y[p])
        .sum()
}

/// Calls `f` once for every permutation of `0..n` (Heap's algorithm).
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&perm);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            let j = if i % 2 == 0 { 0 } else { c[i] };
            perm.swap(j, i);
            f(&perm);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// The identity attains the maximum; `ties` counts permutations whose
    /// discrepancy equals it (the identity included).
    Holds { max_apd: f64, min_apd: f64, ties: usize },
    /// Some permutation strictly beats the identity.
    Counterexample { pi: Vec<usize>, apd: f64, identity_apd: f64 },
}

impl Verdict {
    pub fn holds(&self) -> bool {
        matches!(self, Verdict::Holds { .. })
    }
}

/// Enumerates all `n!` permutations and checks the identity is a maximiser.
pub fn verify_order_theorem(instance: &OrderInstance) -> Result<Verdict> {
    let n = instance.len();
    if n > MAX_EXHAUSTIVE {
        return Err(Error::TooLarge(n));
    }
    let identity: Vec<usize> = (0..n).collect();
    let id_apd = apd_unchecked(instance, &identity);
    let slack = REL_TOL * id_apd.abs().max(f64::MIN_POSITIVE);
    let mut best: (f64, Vec<usize>) = (id_apd, identity);
    let mut min_apd = id_apd;
    let mut ties = 0;
    for_each_permutation(n, |pi| {
        let v = apd_unchecked(instance, pi);
        min_apd = min_apd.min(v);
        if (v - id_apd).abs() <= slack {
            ties += 1;
        }
        if v > best.0 + slack {
            best = (v, pi.to_vec());
        }
    });
    if best.0 > id_apd + slack {
        Ok(Verdict::Counterexample {
            pi: best.1,
            apd: best.0,
            identity_apd: id_apd,
        })
    } else {
        Ok(Verdict::Holds {
            max_apd: id_apd,
            min_apd,
            ties,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inst(a: &[f64], y: &[f64]) -> OrderInstance {
        OrderInstance::new(a.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn ape_examples() {
        assert_eq!(ape(&inst(&[1.0, 1.0], &[3.0, 4.0])), 5.0);
        assert_eq!(ape(&inst(&[1.0], &[1.0])), 1.0);
        assert!((ape(&inst(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0])) - 14f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn apd_examples() {
        let i = inst(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(apd(&i, &[0, 1, 2]).unwrap(), 14.0);
        assert_eq!(apd(&i, &[2, 1, 0]).unwrap(), 10.0);
        assert!(apd(&i, &[0, 0, 1]).is_err());
        assert!(apd(&i, &[0, 1]).is_err());
        assert_eq!(apd(&inst(&[2.0], &[3.0]), &[0]).unwrap(), 6.0);
    }

    #[test]
    fn construction_rejects_bad_sequences() {
        assert!(OrderInstance::new(vec![2.0, 1.0], vec![1.0, 2.0]).is_err());
        assert!(OrderInstance::new(vec![1.0, 2.0], vec![0.0, 2.0]).is_err());
        assert!(OrderInstance::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(OrderInstance::new(vec![], vec![]).is_err());
    }

    #[test]
    fn permutation_count() {
        for n in 0..=6 {
            let mut count = 0;
            let mut all = std::collections::BTreeSet::new();
            for_each_permutation(n, |p| {
                count += 1;
                all.insert(p.to_vec());
            });
            let fact: usize = (1..=n).product();
            assert_eq!(count, fact);
            assert_eq!(all.len(), fact);
        }
    }

    #[test]
    fn verdict_examples() {
        let v = verify_order_theorem(&inst(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(
            v,
            Verdict::Holds {
                max_apd: 14.0,
                min_apd: 10.0,
                ties: 1
            }
        );
        let flat = verify_order_theorem(&inst(&[1.0; 4], &[1.0, 2.0, 3.0, 5.0])).unwrap();
        assert!(matches!(flat, Verdict::Holds { ties: 24, .. }));
        let big = OrderInstance::new(vec![1.0; 11], vec![1.0; 11]).unwrap();
        assert!(matches!(verify_order_theorem(&big), Err(Error::TooLarge(11))));
    }

    fn sorted_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..=7).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.01f64..10.0, n),
                proptest::collection::vec(0.01f64..10.0, n),
            )
                .prop_map(|(mut a, mut y)| {
                    a.sort_by(f64::total_cmp);
                    y.sort_by(f64::total_cmp);
                    (a, y)
                })
        })
    }

    proptest! {
        #[test]
        fn lemma_bounds_hold((a, y) in sorted_pair(), seed in any::<u64>()) {
            let i = inst(&a, &y);
            let n = a.len();
            let id: Vec<usize> = (0..n).collect();
            let rev: Vec<usize> = (0..n).rev().collect();
            let hi = apd(&i, &id).unwrap();
            let lo = apd(&i, &rev).unwrap();
            let mut rng = crate::rng::Rng::new(seed);
            let mut pi = id.clone();
            rng.shuffle(&mut pi);
            let v = apd(&i, &pi).unwrap();
            prop_assert!(lo <= v + 1e-9 && v <= hi + 1e-9);

            let mut shuffled = y.clone();
            rng.shuffle(&mut shuffled);
            let e: f64 = shuffled.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((e - ape(&i)).abs() < 1e-9);
        }

        #[test]
        fn scaling_is_linear((a, y) in sorted_pair(), s in 0.1f64..10.0, t in 0.1f64..10.0) {
            let i = inst(&a, &y);
            let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
            let ty: Vec<f64> = y.iter().map(|v| v * t).collect();
            let j = inst(&sa, &ty);
            let id: Vec<usize> = (0..a.len()).collect();
            let lhs = apd(&j, &id).unwrap();
            let rhs = s * t * apd(&i, &id).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs);
            prop_assert!(verify_order_theorem(&j).unwrap().holds());
        }
    }
}
