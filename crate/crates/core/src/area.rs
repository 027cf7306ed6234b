//! Rank-order area constraint.
//!
//! A mask meets target area `a` when its sorted values equal the reference
//! vector: `n - round(a n)` zeros followed by `round(a n)` ones. The loss is
//! the squared distance between the two, so it needs no soft counting and
//! vanishes exactly on binary masks of the right size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaTarget {
    /// Target fraction in `[0, 1]`.
    pub a: f64,
    /// Number of mask elements.
    pub n: usize,
}

impl AreaTarget {
    pub fn new(a: f64, n: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::invalid(format!("target area {a} outside [0, 1]")));
        }
        if n == 0 {
            return Err(Error::invalid("target area over an empty mask"));
        }
        Ok(AreaTarget { a, n })
    }

    /// Keep exactly `k` of `n` elements (channel masks).
    pub fn count(k: usize, n: usize) -> Result<Self> {
        if k > n {
            return Err(Error::invalid(format!("cannot keep {k} of {n} elements")));
        }
        AreaTarget::new(k as f64 / n as f64, n)
    }

    /// Number of ones in the reference vector, `a n` rounded half up.
    pub fn ones(&self) -> usize {
        // the small offset absorbs representation error, e.g. 0.35 * 20
        ((self.a * self.n as f64 + 0.5 + 1e-9).floor() as usize).min(self.n)
    }
}

pub fn reference_vector(target: &AreaTarget) -> Tensor {
    let zeros = target.n - target.ones();
    let data = (0..target.n).map(|i| if i < zeros { 0.0 } else { 1.0 }).collect();
    Tensor::from_vec(data)
}

/// `|sort(m) - r_a|^2` on a graph. `mask` may have any shape; it is flattened.
pub fn area_loss(g: &mut Graph, mask: Var, target: &AreaTarget) -> Result<Var> {
    let n = g.value(mask).numel();
    if n != target.n {
        return Err(Error::ShapeMismatch {
            op: "area_loss",
            lhs: vec![n],
            rhs: vec![target.n],
        });
    }
    let flat = g.reshape(mask, &[n])?;
    let (sorted, _) = g.sort_with_permutation(flat)?;
    let reference = g.constant(reference_vector(target));
    let diff = g.sub(sorted, reference)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// Value of [`area_loss`] without a graph.
pub fn area_loss_value(mask: &Tensor, target: &AreaTarget) -> Result<f64> {
    let mut g = Graph::new();
    let m = g.constant(mask.clone());
    let loss = area_loss(&mut g, m, target)?;
    Ok(g.value(loss).item())
}

/// Fraction of elements strictly above `threshold`.
pub fn achieved_area(mask: &Tensor, threshold: f64) -> f64 {
    mask.data().iter().filter(|&&v| v > threshold).count() as f64 / mask.numel() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss(m: &[f64], a: f64) -> f64 {
        area_loss_value(&Tensor::from_vec(m.to_vec()), &AreaTarget::new(a, m.len()).unwrap()).unwrap()
    }

    fn naive(m: &[f64], a: f64) -> f64 {
        let mut sorted = m.to_vec();
        // insertion sort, kept deliberately independent of the graph's sort
        for i in 1..sorted.len() {
            let mut j = i;
            while j > 0 && sorted[j - 1] > sorted[j] {
                sorted.swap(j - 1, j);
                j -= 1;
            }
        }
        let ones = (a * m.len() as f64 + 0.5 + 1e-9).floor() as usize;
        let zeros = m.len() - ones;
        sorted
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let r = if i < zeros { 0.0 } else { 1.0 };
                (v - r) * (v - r)
            })
            .sum()
    }

    #[test]
    fn reference_vector_examples() {
        let r = |a, n| reference_vector(&AreaTarget::new(a, n).unwrap()).into_data();
        assert_eq!(r(0.5, 4), vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(r(0.0, 3), vec![0.0; 3]);
        assert_eq!(r(0.3, 10), vec![0., 0., 0., 0., 0., 0., 0., 1., 1., 1.]);
        // half-up rounding
        assert_eq!(AreaTarget::new(0.5, 5).unwrap().ones(), 3);
        assert_eq!(AreaTarget::new(0.35, 20).unwrap().ones(), 7);
        assert_eq!(AreaTarget::count(2, 7).unwrap().ones(), 2);
    }

    #[test]
    fn target_validation() {
        assert!(AreaTarget::new(-0.1, 4).is_err());
        assert!(AreaTarget::new(1.1, 4).is_err());
        assert!(AreaTarget::new(0.5, 0).is_err());
        assert!(AreaTarget::count(5, 4).is_err());
    }

    #[test]
    fn area_loss_examples() {
        assert_eq!(loss(&[1.0, 1.0, 0.0, 0.0], 0.5), 0.0);
        assert!((loss(&[0.5, 0.5], 0.5) - 0.5).abs() < 1e-15);
        assert!((loss(&[1.0; 4], 0.25) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn area_loss_rejects_wrong_length() {
        let mut g = Graph::new();
        let m = g.param(Tensor::ones(&[3]));
        assert!(area_loss(&mut g, m, &AreaTarget::new(0.5, 4).unwrap()).is_err());
    }

    #[test]
    fn achieved_area_examples() {
        let t = |v: &[f64]| achieved_area(&Tensor::from_vec(v.to_vec()), 0.5);
        assert_eq!(t(&[1.0, 0.0, 0.0, 0.0]), 0.25);
        assert_eq!(t(&[1.0; 5]), 1.0);
        assert_eq!(t(&[0.6, 0.4, 0.7, 0.1]), 0.5);
    }

    #[test]
    fn brute_force_over_small_lattices() {
        // every mask of length n <= 5 over five levels, and random ones up to 8
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        for n in 1..=5usize {
            for code in 0..levels.len().pow(n as u32) {
                let mut c = code;
                let m: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = levels[c % 5];
                        c /= 5;
                        v
                    })
                    .collect();
                for a in [0.0, 0.2, 0.5, 0.75, 1.0] {
                    let got = loss(&m, a);
                    assert!((got - naive(&m, a)).abs() < 1e-12);
                    let binary = m.iter().all(|&v| v == 0.0 || v == 1.0);
                    let ones = m.iter().filter(|&&v| v == 1.0).count();
                    let exact = binary && ones == AreaTarget::new(a, n).unwrap().ones();
                    assert_eq!(got == 0.0, exact, "{m:?} a={a}");
                }
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let n = r.gen_range(6..=8);
            let m: Vec<f64> = (0..n).map(|_| levels[r.gen_range(0..5)]).collect();
            let a = r.gen_range(0.0..=1.0);
            assert!((loss(&m, a) - naive(&m, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::gradcheck::{check_gradient, GradCheckConfig};
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let m = Tensor::random(&[3, 4], 0.0, 1.0, &mut r);
            let target = AreaTarget::new(0.4, 12).unwrap();
            let report = check_gradient(
                &[m],
                |g, v| area_loss(g, v[0], &target),
                &GradCheckConfig::default(),
                &mut r,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_is_nonnegative_and_permutation_invariant(
            m in proptest::collection::vec(0.0f64..=1.0, 1..20),
            a in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            let base = loss(&m, a);
            proptest::prop_assert!(base >= 0.0);
            let mut shuffled = m.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert!((loss(&shuffled, a) - base).abs() < 1e-12);
        }
    }
}
