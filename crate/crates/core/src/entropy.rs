//! Shannon entropy of empirical distributions, in bits.

use num_bigint::BigUint;

/// Entropy of the distribution given by `counts` (zero counts ignored).
///
/// Counts are summed in sorted order, so two histograms that are
/// permutations of each other produce bit-identical results.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let mut sorted: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    sorted.sort_unstable();
    let total: u64 = sorted.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h = sorted
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    // A single outcome gives -1*log2(1) = -0.0.
    h.max(0.0)
}

/// `prod c^c` over the counts. For histograms with the same total,
/// `H = log2(n) - log2(prod)/n`, so a larger product is exactly a lower
/// entropy and equal products are exactly equal entropies.
pub fn count_product(counts: &[u64]) -> BigUint {
    counts
        .iter()
        .filter(|&&c| c > 1)
        .fold(BigUint::from(1u32), |acc, &c| acc * BigUint::from(c).pow(c as u32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert_eq!(entropy_bits(&[5]), 0.0);
        assert_eq!(entropy_bits(&[1, 1, 1, 1]), 2.0);
        assert_eq!(entropy_bits(&[]), 0.0);
        let h = entropy_bits(&[2, 1]);
        assert!((h - 0.918_295_834_054_489_6).abs() < 1e-15);
    }

    #[test]
    fn product_orders_equal_totals_exactly() {
        // {3,3} and {4,1,1} differ in entropy; {2,2,1,1} and {2,1,2,1} do not.
        assert!(count_product(&[3, 3]) > count_product(&[4, 1, 1]));
        assert!(entropy_bits(&[3, 3]) < entropy_bits(&[4, 1, 1]));
        assert_eq!(count_product(&[2, 2, 1, 1]), count_product(&[2, 1, 2, 1]));
        assert_eq!(count_product(&[]), BigUint::from(1u32));
    }

    #[test]
    fn permutation_invariant_bitwise() {
        assert_eq!(
            entropy_bits(&[3, 7, 1, 9]).to_bits(),
            entropy_bits(&[9, 1, 7, 3]).to_bits()
        );
    }
}
