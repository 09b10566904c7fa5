//! Compute accounting: FLOPs models, per-layer token budget alignment and
//! the pruning primitives used to land on an exact token count.
//!
//! Hybrid compression keeps `M` visual tokens at the LLM input and prunes
//! down to `R_keep` at layer `K`. Holding the per-layer average at `R̄`:
//!
//! ```text
//! R̄·L = M·K + R_keep·(L − K),   M = f_e·R̄
//! r = R_keep / M = (L − f_e·K) / (f_e·(L − K))
//! ```

mod dpc;

pub use dpc::{dpcknn_cluster, dpcknn_reduce, default_knn, DpcClustering, Reduced};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational value of the shortest decimal that round-trips to `x`.
///
/// `0.1` becomes `1/10`, not the binary expansion of the nearest double, so
/// decimal hyper-parameters behave exactly in budget arithmetic.
pub fn exact_ratio(x: f64) -> BigRational {
    assert!(x.is_finite(), "exact_ratio needs a finite value, got {x}");
    let text = format!("{x}");
    let (negative, digits) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.as_str()),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    let mantissa: BigInt = format!("{int_part}{frac_part}")
        .parse()
        .expect("float Display yields plain decimal digits");
    let scale = num_traits::pow(BigInt::from(10u8), frac_part.len());
    let r = BigRational::new(mantissa, scale);
    if negative {
        -r
    } else {
        r
    }
}

/// `⌊r + ½⌋` as a count; negative values clamp to zero.
pub fn round_half_up(r: BigRational) -> usize {
    let half = BigRational::new(1.into(), 2.into());
    floor_count(&(r + half))
}

/// `⌊r⌋` as a count; negative values clamp to zero.
pub fn floor_count(r: &BigRational) -> usize {
    let f = r.floor().to_integer();
    if f < Zero::zero() {
        0
    } else {
        f.to_usize().expect("token count fits in usize")
    }
}

/// LLM dimensions entering the FLOPs models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: u64,
    pub hidden: u64,
    pub ffn_intermediate: u64,
    pub heads: u64,
    pub kv_heads: u64,
}

impl ModelShape {
    pub fn new(layers: u64, hidden: u64, ffn_intermediate: u64, heads: u64, kv_heads: u64) -> Result<Self> {
        let shape = Self {
            layers,
            hidden,
            ffn_intermediate,
            heads,
            kv_heads,
        };
        if [layers, hidden, ffn_intermediate, heads, kv_heads].contains(&0) {
            return Err(Error::Shape(format!("model shape {shape:?} has a zero dimension")));
        }
        if kv_heads > heads {
            return Err(Error::Shape(format!(
                "kv_heads {kv_heads} exceeds attention heads {heads}"
            )));
        }
        Ok(shape)
    }
}

fn check_len(n: u64) -> Result<u128> {
    if n == 0 {
        Err(Error::Shape("sequence length must be at least 1".into()))
    } else {
        Ok(n as u128)
    }
}

/// `L·(4nd² + 2n²d + 2ndm)` for a standard multi-head decoder.
pub fn flops_standard(shape: &ModelShape, n: u64) -> Result<f64> {
    let n = check_len(n)?;
    let (l, d, m) = (shape.layers as u128, shape.hidden as u128, shape.ffn_intermediate as u128);
    let per_layer = 4 * n * d * d + 2 * n * n * d + 2 * n * d * m;
    Ok((l * per_layer) as f64)
}

/// `L·(2nd²(1 + g/h) + 2n²d + 3ndm)` for grouped-query attention with a
/// gated (three-matrix) FFN.
pub fn flops_gqa(shape: &ModelShape, n: u64) -> Result<f64> {
    let n = check_len(n)?;
    let (l, d, m) = (shape.layers as u128, shape.hidden as u128, shape.ffn_intermediate as u128);
    let (h, g) = (shape.heads as u128, shape.kv_heads as u128);
    // keep the fractional projection term exact: 2nd²(h + g)/h
    let numerator = l * (2 * n * d * d * (h + g) + h * (2 * n * n * d + 3 * n * d * m));
    Ok(numerator as f64 / h as f64)
}

/// Token counts at each stage of hybrid compression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub layers: usize,
    pub prune_layer: usize,
    pub expansion_factor: f64,
    /// `R̄`: average visual tokens per LLM layer.
    pub avg_tokens_per_layer: f64,
    /// `M`: tokens entering the LLM.
    pub before_llm_tokens: usize,
    /// `r`: fraction of `M` kept after pruning at layer `K`.
    pub inner_keep: f64,
    /// `r` as an exact fraction, e.g. `"3/10"`.
    pub inner_keep_exact: String,
    /// `R_keep = round(r·M)`.
    pub kept_after_prune: usize,
}

impl BudgetPlan {
    /// `M·K + R_keep·(L − K)`, the realised per-layer token sum.
    pub fn realised_token_layers(&self) -> usize {
        self.before_llm_tokens * self.prune_layer
            + self.kept_after_prune * (self.layers - self.prune_layer)
    }
}

/// Exact inner keep ratio `r = (L − f_e·K) / (f_e·(L − K))`.
pub fn inner_keep_ratio(layers: usize, prune_layer: usize, expansion: &BigRational) -> BigRational {
    let l = BigRational::from_integer(layers.into());
    let k = BigRational::from_integer(prune_layer.into());
    (&l - expansion * &k) / (expansion * (&l - &k))
}

pub fn budget_align(
    layers: usize,
    prune_layer: usize,
    expansion_factor: f64,
    avg_tokens_per_layer: f64,
) -> Result<BudgetPlan> {
    if prune_layer == 0 || prune_layer >= layers {
        return Err(Error::Infeasible(format!(
            "prune layer K={prune_layer} must satisfy 0 < K < L={layers}"
        )));
    }
    if !(expansion_factor.is_finite() && expansion_factor >= 1.0) {
        return Err(Error::Infeasible(format!(
            "expansion factor {expansion_factor} must be >= 1"
        )));
    }
    if !(avg_tokens_per_layer.is_finite() && avg_tokens_per_layer >= 0.0) {
        return Err(Error::Infeasible(format!(
            "average token budget {avg_tokens_per_layer} must be non-negative"
        )));
    }
    let fe = exact_ratio(expansion_factor);
    let fe_k = &fe * BigRational::from_integer(prune_layer.into());
    if fe_k >= BigRational::from_integer(layers.into()) {
        return Err(Error::Infeasible(format!(
            "f_e·K = {expansion_factor}·{prune_layer} = {} is not below L = {layers}",
            fe_k.to_f64().unwrap_or(f64::NAN)
        )));
    }
    let r = inner_keep_ratio(layers, prune_layer, &fe);
    let m = round_half_up(&fe * exact_ratio(avg_tokens_per_layer));
    let kept = round_half_up(&r * BigRational::from_integer(m.into()));
    Ok(BudgetPlan {
        layers,
        prune_layer,
        expansion_factor,
        avg_tokens_per_layer,
        before_llm_tokens: m,
        inner_keep: r.to_f64().expect("finite ratio"),
        inner_keep_exact: r.to_string(),
        kept_after_prune: kept,
    })
}

/// Keeps the `keep` highest-scoring positions (ties to the lower index) and
/// returns them in their original order.
pub fn inner_llm_prune(scores: &[f64], keep: usize) -> Result<Vec<usize>> {
    if keep > scores.len() {
        return Err(Error::Infeasible(format!(
            "cannot keep {keep} of {} tokens",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            value: scores[i] as f32,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ratio(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn exact_ratio_reads_shortest_decimal() {
        assert_eq!(exact_ratio(0.1), ratio(1, 10));
        assert_eq!(exact_ratio(1.25), ratio(5, 4));
        assert_eq!(exact_ratio(1.3), ratio(13, 10));
        assert_eq!(exact_ratio(-2.5), ratio(-5, 2));
        assert_eq!(exact_ratio(28.0), ratio(28, 1));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(ratio(5, 2)), 3);
        assert_eq!(round_half_up(ratio(7, 2)), 4);
        assert_eq!(round_half_up(ratio(249, 100)), 2);
        assert_eq!(floor_count(&ratio(-1, 2)), 0);
    }

    #[test]
    fn standard_flops_spot_values() {
        let s = ModelShape::new(1, 1, 1, 1, 1).unwrap();
        assert_eq!(flops_standard(&s, 2).unwrap(), 20.0);
        assert_eq!(flops_standard(&s, 1).unwrap(), 8.0);
        assert!(flops_standard(&s, 0).is_err());
    }

    #[test]
    fn quadratic_term_quadruples() {
        // isolate 2n²d: subtract the linear terms measured at the same n
        let s = ModelShape::new(1, 64, 128, 4, 4).unwrap();
        let quad = |n: u64| {
            let total = flops_standard(&s, n).unwrap();
            let linear = (4 * n * 64 * 64 + 2 * n * 64 * 128) as f64;
            total - linear
        };
        assert_eq!(quad(2000) / quad(1000), 4.0);
    }

    #[test]
    fn gqa_flops_spot_values() {
        let s = ModelShape::new(1, 2, 1, 2, 1).unwrap();
        assert_eq!(flops_gqa(&s, 1).unwrap(), 22.0);
        // g = h: projection term is 4nd²
        let full = ModelShape::new(3, 16, 40, 4, 4).unwrap();
        let n = 7u64;
        let want = 3.0 * (4 * n * 256 + 2 * n * n * 16 + 3 * n * 16 * 40) as f64;
        assert_eq!(flops_gqa(&full, n).unwrap(), want);
    }

    #[test]
    fn kv_heads_cannot_exceed_heads() {
        assert!(ModelShape::new(1, 1, 1, 2, 3).is_err());
        assert!(ModelShape::new(0, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn align_with_default_hyperparameters() {
        let plan = budget_align(28, 20, 1.25, 627.2).unwrap();
        assert_eq!(plan.inner_keep_exact, "3/10");
        assert_eq!(plan.inner_keep, 0.3);
        assert_eq!(plan.before_llm_tokens, 784);
        assert_eq!(plan.kept_after_prune, 235);
        assert_eq!(inner_keep_ratio(28, 20, &exact_ratio(1.25)), ratio(3, 10));
    }

    #[test]
    fn align_small_cases() {
        let plan = budget_align(2, 1, 1.5, 10.0).unwrap();
        assert_eq!(plan.inner_keep_exact, "1/3");
        let identity = budget_align(28, 20, 1.0, 100.0).unwrap();
        assert_eq!(identity.inner_keep_exact, "1");
        assert_eq!(identity.before_llm_tokens, 100);
        assert_eq!(identity.kept_after_prune, 100);
    }

    #[test]
    fn align_rejects_infeasible() {
        assert!(matches!(budget_align(28, 20, 2.0, 100.0), Err(Error::Infeasible(_))));
        assert!(matches!(budget_align(28, 0, 1.25, 100.0), Err(Error::Infeasible(_))));
        assert!(matches!(budget_align(28, 28, 1.0, 100.0), Err(Error::Infeasible(_))));
        // f_e·K == L exactly
        assert!(matches!(budget_align(25, 20, 1.25, 100.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn prune_examples() {
        assert_eq!(inner_llm_prune(&[0.5, 0.1, 0.9, 0.3], 2).unwrap(), vec![0, 2]);
        assert_eq!(inner_llm_prune(&[0.5, 0.1, 0.9, 0.3], 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(inner_llm_prune(&[1.0; 4], 2).unwrap(), vec![0, 1]);
        assert!(inner_llm_prune(&[1.0; 2], 3).is_err());
        assert!(inner_llm_prune(&[1.0, f64::NAN], 1).is_err());
    }

    proptest! {
        #[test]
        fn token_conservation_is_exact_in_rationals(
            layers in 2usize..80,
            k_frac in 0.01f64..0.99,
            fe_hundredths in 100u32..300,
            avg in 1u32..10_000,
        ) {
            let k = ((layers as f64 * k_frac) as usize).clamp(1, layers - 1);
            let fe = ratio(fe_hundredths as i64, 100);
            let l = BigRational::from_integer(layers.into());
            let kk = BigRational::from_integer(k.into());
            prop_assume!(&fe * &kk < l);
            let rbar = BigRational::from_integer(avg.into());
            let m = &fe * &rbar;
            let r = inner_keep_ratio(layers, k, &fe);
            let kept = &r * &m;
            prop_assert_eq!(&rbar * &l, &m * &kk + kept * (&l - &kk));
        }

        #[test]
        fn rounded_plan_stays_within_layer_slack(
            layers in 2usize..80,
            k_frac in 0.01f64..0.99,
            fe_hundredths in 100u32..300,
            avg in 0.0f64..10_000.0,
        ) {
            let k = ((layers as f64 * k_frac) as usize).clamp(1, layers - 1);
            let fe = fe_hundredths as f64 / 100.0;
            prop_assume!(fe * (k as f64) < layers as f64 - 1e-9);
            let plan = budget_align(layers, k, fe, avg).unwrap();
            let ideal = avg * layers as f64;
            let realised = plan.realised_token_layers() as f64;
            prop_assert!((ideal - realised).abs() <= layers as f64 + 1e-6,
                "ideal {} realised {}", ideal, realised);
            prop_assert!(plan.kept_after_prune <= plan.before_llm_tokens);
        }

        #[test]
        fn flops_are_monotone(n in 1u64..5000, d in 1u64..512, m in 1u64..2048, g in 1u64..8, extra in 0u64..8) {
            let s = ModelShape::new(2, d, m, g + extra, g).unwrap();
            prop_assert!(flops_standard(&s, n).unwrap() < flops_standard(&s, n + 1).unwrap());
            prop_assert!(flops_gqa(&s, n).unwrap() < flops_gqa(&s, 2 * n).unwrap());
            let wider = ModelShape::new(2, d + 1, m, g + extra, g).unwrap();
            prop_assert!(flops_gqa(&s, n).unwrap() < flops_gqa(&wider, n).unwrap());
        }

        #[test]
        fn prune_preserves_order_and_is_identity_at_full(scores in proptest::collection::vec(-10.0f64..10.0, 0..30)) {
            let all = inner_llm_prune(&scores, scores.len()).unwrap();
            prop_assert_eq!(all, (0..scores.len()).collect::<Vec<_>>());
            let keep = scores.len() / 2;
            let kept = inner_llm_prune(&scores, keep).unwrap();
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            let worst_kept = kept.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in (0..scores.len()).filter(|i| !kept.contains(i)) {
                prop_assert!(scores[i] <= worst_kept);
            }
        }
    }
}
