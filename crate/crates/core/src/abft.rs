//! Attention checksums: offline forms computed densely from the exact
//! operands, and the online predicted checksum carried as one extra element
//! of each lane's output accumulator.
//!
//! For `S = softmax(Q K^T)` the output checksum `sum(S V)` equals
//! `sum_k sumcol_k(S) * sumrow_k(V)`. Grouping the same sum by query gives
//! `sum_i (1 / sum_j e^s_ij) * sum_k e^s_ik * sumrow_k(V)`, whose inner term
//! is exactly the lazy-softmax output recurrence with `v_k` replaced by
//! `sumrow_k(V)`. The online form rescales it like the output vector.

use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::attention::{accumulate_output, KernelConfig, StepFactors};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Role};
use crate::numerics::PrecisionPolicy;
use crate::schedule::{CycleTap, Engine};

/// Sequential `f64` sum of one row.
pub fn row_sum(row: &[f64]) -> f64 {
    row.iter().sum()
}

/// Element `k` is the sum of row `k` of `V`.
pub fn sumrow_vector(v: &Matrix) -> Vec<f64> {
    (0..v.rows()).map(|k| row_sum(v.row(k))).collect()
}

/// Element `k` is the sum of column `k` of `S`.
pub fn sumcol_vector(s: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; s.cols()];
    for i in 0..s.rows() {
        for (acc, &x) in out.iter_mut().zip(s.row(i)) {
            *acc += x;
        }
    }
    out
}

fn scores(q: &Matrix, k: &Matrix, scale: f64, i: usize) -> Vec<f64> {
    (0..k.rows())
        .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect()
}

/// Dense row-softmax of `Q K^T` in `f64`.
pub fn softmax_matrix(q: &Matrix, k: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::Dimension(format!(
            "Q has {} columns, K has {}",
            q.cols(),
            k.cols()
        )));
    }
    let scale = cfg.score_scale();
    let mut s = Matrix::zeros(q.rows(), k.rows(), Role::S);
    for i in 0..q.rows() {
        let sc = scores(q, k, scale, i);
        let max = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = sc.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (dst, x) in s.row_mut(i).iter_mut().zip(e) {
            *dst = x / z;
        }
    }
    Ok(s)
}

/// The offline predicted checksum evaluated in both summation orders.
/// Only the exponentials and row sums are plain `f64`; divisions, products
/// and sums are carried in double-double so the two orders can be compared
/// far below `f64` rounding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineCheck {
    /// `sum_k sumcol_k(S) * sumrow_k(V)` over the materialized `S`.
    pub column_form: f64,
    /// `sum_i check(q_i)`, computed per query without materializing `S`.
    pub query_form: f64,
}

impl OfflineCheck {
    pub fn value(&self) -> f64 {
        self.column_form
    }

    pub fn interchange_error(&self) -> f64 {
        relative_difference(self.column_form, self.query_form)
    }
}

pub fn offline_check(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &KernelConfig) -> Result<OfflineCheck> {
    if q.cols() != k.cols() || k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::Dimension(format!(
            "Q {}x{}, K {}x{}, V {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let sumrow = sumrow_vector(v);
    let scale = cfg.score_scale();
    let exps: Vec<Vec<f64>> = (0..q.rows())
        .map(|i| {
            let sc = scores(q, k, scale, i);
            let max = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            sc.iter().map(|x| (x - max).exp()).collect()
        })
        .collect();
    let zero = TwoFloat::from(0.0);
    let denom = |e: &[f64]| e.iter().fold(zero, |z, &x| z + x);

    // S materialized, column sums, then the dot product with sumrow
    let mut sumcol = vec![zero; k.rows()];
    for e in &exps {
        let z = denom(e);
        for (acc, &x) in sumcol.iter_mut().zip(e) {
            *acc += TwoFloat::from(x) / z;
        }
    }
    let column_form = sumcol
        .iter()
        .zip(&sumrow)
        .fold(zero, |acc, (&c, &r)| acc + c * r)
        .hi();

    let query_form = exps
        .iter()
        .fold(zero, |acc, e| {
            let num = e
                .iter()
                .zip(&sumrow)
                .fold(zero, |n, (&x, &r)| n + TwoFloat::new_mul(x, r));
            acc + num / denom(e)
        })
        .hi();

    Ok(OfflineCheck {
        column_form,
        query_form,
    })
}

/// Check-lane step `c <- c * rescale + sumrow * weight`, always in `f64`.
#[inline]
pub fn check_lane_update(c: f64, sumrow: f64, f: StepFactors) -> f64 {
    c * f.rescale + sumrow * f.weight
}

/// Global divider: `c_N / ell_N` with `ell_N` widened to `f64`.
#[inline]
pub fn query_check(c: f64, ell: f64) -> f64 {
    c / ell
}

/// One step of the extended accumulator `o* = [c, o]` with `v* = [sumrow, v]`.
/// Element 0 is computed in `f64`, the rest in the output-accumulator format.
pub fn merged_update(
    o_star: &[f64],
    v_star: &[f64],
    rescale: f64,
    weight: f64,
    policy: &PrecisionPolicy,
) -> Result<Vec<f64>> {
    if o_star.is_empty() || o_star.len() != v_star.len() {
        return Err(Error::Dimension(format!(
            "merged update needs equal non-empty vectors, got {} and {}",
            o_star.len(),
            v_star.len()
        )));
    }
    let f = StepFactors { rescale, weight };
    let mut out = o_star.to_vec();
    out[0] = check_lane_update(o_star[0], v_star[0], f);
    accumulate_output(&mut out[1..], &v_star[1..], f, policy);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedOutput {
    pub output: Matrix,
    /// Predicted checksum accumulated over all queries.
    pub predicted: f64,
    /// `check(q_i)` per query row.
    pub query_checks: Vec<f64>,
}

/// FlashAttention-2 block schedule with the online checker wired in.
pub fn fused_kernel(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &KernelConfig,
    tap: Option<&mut dyn CycleTap>,
) -> Result<FusedOutput> {
    let run = Engine::new(cfg, q, k, v, true)?.run(tap);
    Ok(FusedOutput {
        predicted: run.predicted.unwrap_or(0.0),
        output: run.output,
        query_checks: run.query_checks,
    })
}

/// Sum of every element of the output, row-major, in `f64`.
pub fn actual_checksum(o: &Matrix) -> f64 {
    o.data().iter().sum()
}

/// Whether the checker raises an alarm.
///
/// Faithful mode flags iff `|predicted - actual| > tol`, so any NaN on
/// either side silently passes. `nan_aware` additionally flags whenever
/// exactly one side is non-finite.
pub fn compare(predicted: f64, actual: f64, tol: f64, nan_aware: bool) -> bool {
    if nan_aware && predicted.is_finite() != actual.is_finite() {
        return true;
    }
    (predicted - actual).abs() > tol
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Output corrupted and flagged.
    Detected,
    /// Output intact but flagged.
    FalsePositive,
    /// Output corrupted, not flagged.
    Silent,
    /// Output intact, not flagged.
    Masked,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Detected,
        Category::FalsePositive,
        Category::Silent,
        Category::Masked,
    ];

    pub fn from_flags(output_corrupted: bool, flagged: bool) -> Self {
        match (output_corrupted, flagged) {
            (true, true) => Category::Detected,
            (false, true) => Category::FalsePositive,
            (true, false) => Category::Silent,
            (false, false) => Category::Masked,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Detected => "Detected",
            Category::FalsePositive => "False Positive",
            Category::Silent => "Silent",
            Category::Masked => "Masked",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub category: Category,
    pub predicted: f64,
    pub actual: f64,
    pub abs_diff: f64,
}

impl Verdict {
    pub fn new(category: Category, predicted: f64, actual: f64) -> Self {
        Verdict {
            category,
            predicted,
            actual,
            abs_diff: (predicted - actual).abs(),
        }
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when the two are equal.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::lazy_attention_stats;
    use crate::numerics::Format;
    use crate::schedule::run_block_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(nq: usize, n: usize, d: usize, seed: u64, f: Format) -> (Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Matrix::random_gaussian(nq, d, Role::Q, f, &mut rng),
            Matrix::random_gaussian(n, d, Role::K, f, &mut rng),
            Matrix::random_gaussian(n, d, Role::V, f, &mut rng),
        )
    }

    fn fp64(q: &Matrix, k: &Matrix) -> KernelConfig {
        KernelConfig::for_inputs(q, k).with_precision(PrecisionPolicy::fp64())
    }

    #[test]
    fn sumrow_examples() {
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]], Role::V).unwrap();
        assert_eq!(sumrow_vector(&eye), vec![1.0, 1.0]);
        let v = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], Role::V).unwrap();
        assert_eq!(sumrow_vector(&v), vec![6.0, 15.0]);
    }

    #[test]
    fn sumrow_matches_transposed_accumulation() {
        let (_, _, v) = inputs(1, 17, 9, 5, Format::Fp64);
        let mut t = Matrix::zeros(v.cols(), v.rows(), Role::S);
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                t.set(j, i, v.get(i, j));
            }
        }
        for (a, b) in sumrow_vector(&v).iter().zip(sumcol_vector(&t)) {
            assert!(relative_difference(*a, b) <= 1e-15);
        }
    }

    #[test]
    fn sumcol_examples() {
        let n = 4;
        let uniform = Matrix::new(3, n, vec![1.0 / n as f64; 3 * n], Role::S).unwrap();
        assert!(sumcol_vector(&uniform).iter().all(|&x| x == 3.0 / n as f64));
        let perm = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], Role::S)
            .unwrap();
        assert_eq!(sumcol_vector(&perm), vec![1.0; 3]);

        let (q, k, _) = inputs(11, 7, 5, 6, Format::Fp64);
        let s = softmax_matrix(&q, &k, &fp64(&q, &k)).unwrap();
        let total: f64 = sumcol_vector(&s).iter().sum();
        assert!((total - 11.0).abs() <= 1e-12);
    }

    #[test]
    fn offline_check_examples() {
        let q = Matrix::from_rows(&[[0.5, -2.0]], Role::Q).unwrap();
        let k = Matrix::from_rows(&[[1.5, 3.0]], Role::K).unwrap();
        let v = Matrix::from_rows(&[[1.25, -0.5]], Role::V).unwrap();
        let c = offline_check(&q, &k, &v, &fp64(&q, &k)).unwrap();
        assert_eq!(c.column_form, 0.75);
        assert_eq!(c.query_form, 0.75);

        let (q, k, _) = inputs(6, 5, 3, 7, Format::Fp64);
        let zeros = Matrix::zeros(5, 3, Role::V);
        let c = offline_check(&q, &k, &zeros, &fp64(&q, &k)).unwrap();
        assert_eq!((c.column_form, c.query_form), (0.0, 0.0));

        let (q, k, v) = inputs(8, 8, 4, 8, Format::Fp64);
        let c = offline_check(&q, &k, &v, &fp64(&q, &k)).unwrap();
        assert!(c.interchange_error() <= 1e-12, "{c:?}");
    }

    #[test]
    fn merged_update_examples() {
        let p = PrecisionPolicy::bf16();
        let o = [3.5, 0.25, -1.0];
        let v = [9.0, 4.0, 5.0];
        assert_eq!(merged_update(&o, &v, 1.0, 0.0, &p).unwrap(), o.to_vec());
        let zero = [0.0; 3];
        assert_eq!(merged_update(&zero, &v, 0.0, 1.0, &p).unwrap(), v.to_vec());
        assert!(merged_update(&[1.0], &[1.0, 2.0], 1.0, 1.0, &p).is_err());
    }

    #[test]
    fn unrolled_merged_update_equals_two_pass() {
        let (q, k, v) = inputs(1, 24, 6, 9, Format::Fp64);
        let cfg = fp64(&q, &k);
        let p = cfg.precision;
        let lazy = lazy_attention_stats(q.row(0), &k, &v, &cfg).unwrap();
        let sumrow = sumrow_vector(&v);

        let mut o_star = vec![0.0; 7];
        let mut m = f64::NEG_INFINITY;
        for (i, &s) in lazy.scores.iter().enumerate() {
            let m_new = m.max(s);
            let rescale = if m == f64::NEG_INFINITY { 0.0 } else { (m - m_new).exp() };
            let weight = (s - m_new).exp();
            let mut v_star = vec![sumrow[i]];
            v_star.extend_from_slice(v.row(i));
            o_star = merged_update(&o_star, &v_star, rescale, weight, &p).unwrap();
            m = m_new;
        }
        let two_pass_check: f64 = lazy
            .scores
            .iter()
            .zip(&sumrow)
            .map(|(s, r)| (s - lazy.max).exp() * r)
            .sum();
        assert!(relative_difference(o_star[0], two_pass_check) <= 1e-12);
        let two_pass_o: Vec<f64> = lazy.output.iter().map(|x| x * lazy.sum_exp).collect();
        for (a, b) in o_star[1..].iter().zip(&two_pass_o) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn fused_predicted_matches_offline() {
        let (q, k, v) = inputs(16, 16, 8, 10, Format::Fp64);
        let cfg = fp64(&q, &k).with_block_size(4);
        let fused = fused_kernel(&q, &k, &v, &cfg, None).unwrap();
        let offline = offline_check(&q, &k, &v, &cfg).unwrap();
        assert!(relative_difference(fused.predicted, offline.value()) <= 1e-9);
        assert!(relative_difference(fused.predicted, actual_checksum(&fused.output)) <= 1e-9);
    }

    #[test]
    fn fused_single_query_single_key() {
        let q = Matrix::from_rows(&[[0.1, 0.2]], Role::Q).unwrap();
        let k = Matrix::from_rows(&[[-3.0, 1.0]], Role::K).unwrap();
        let v = Matrix::from_rows(&[[2.5, -0.75]], Role::V).unwrap();
        let fused = fused_kernel(&q, &k, &v, &fp64(&q, &k), None).unwrap();
        assert_eq!(fused.predicted, 1.75);
        assert_eq!(fused.output.row(0), v.row(0));
    }

    #[test]
    fn checker_never_perturbs_datapath() {
        let (q, k, v) = inputs(37, 19, 6, 11, Format::Bf16);
        let cfg = KernelConfig::for_inputs(&q, &k).with_block_size(8);
        let fused = fused_kernel(&q, &k, &v, &cfg, None).unwrap();
        let plain = run_block_schedule(&q, &k, &v, &cfg, None).unwrap();
        assert!(fused.output.bitwise_eq(&plain));
        let per_query: f64 = fused.query_checks.iter().sum();
        assert_eq!(per_query, fused.predicted);
    }

    /// Pairwise tree summation as an alternative ordering.
    fn pairwise(xs: &[f64]) -> f64 {
        match xs.len() {
            0 => 0.0,
            1 => xs[0],
            n => pairwise(&xs[..n / 2]) + pairwise(&xs[n / 2..]),
        }
    }

    #[test]
    fn actual_checksum_examples() {
        assert_eq!(actual_checksum(&Matrix::zeros(3, 3, Role::O)), 0.0);
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]], Role::O).unwrap();
        assert_eq!(actual_checksum(&eye), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let o = Matrix::random_gaussian(40, 30, Role::O, Format::Fp64, &mut rng);
        // shift away from zero so the relative measure is well conditioned
        let o = Matrix::new(40, 30, o.data().iter().map(|x| x + 1.0).collect(), Role::O).unwrap();
        assert!(relative_difference(actual_checksum(&o), pairwise(o.data())) <= 1e-13);
    }

    #[test]
    fn compare_examples() {
        assert!(!compare(1.0, 1.0 + 1e-9, 1e-6, false));
        assert!(compare(1.0, 1.1, 1e-6, false));
        assert!(!compare(f64::NAN, 1.0, 1e-6, false));
        assert!(compare(f64::NAN, 1.0, 1e-6, true));
        assert!(compare(1.0, f64::INFINITY, 1e-6, false));
        assert!(!compare(f64::NAN, f64::NAN, 1e-6, true));
    }

    #[test]
    fn category_mapping() {
        assert_eq!(Category::from_flags(true, true), Category::Detected);
        assert_eq!(Category::from_flags(false, true), Category::FalsePositive);
        assert_eq!(Category::from_flags(true, false), Category::Silent);
        assert_eq!(Category::from_flags(false, false), Category::Masked);
        let v = Verdict::new(Category::Masked, 1.5, 1.25);
        assert_eq!(v.abs_diff, 0.25);
    }
}
