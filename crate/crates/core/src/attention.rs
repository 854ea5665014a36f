//! Reference, lazy-softmax and FlashAttention-2 formulations for a single
//! attention head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Role};
use crate::numerics::{nan_max, PrecisionPolicy};

/// Shape, parallelism and precision of one kernel run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Query lanes working in parallel.
    pub block_size: usize,
    /// Number of query rows.
    pub num_queries: usize,
    /// Number of key/value rows streamed per query.
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub precision: PrecisionPolicy,
    /// Multiply scores by `1/sqrt(d)`.
    #[serde(default)]
    pub scale_scores: bool,
}

impl KernelConfig {
    pub fn new(num_queries: usize, seq_len: usize, hidden_dim: usize) -> Self {
        KernelConfig {
            block_size: 16,
            num_queries,
            seq_len,
            hidden_dim,
            precision: PrecisionPolicy::default(),
            scale_scores: false,
        }
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self
    }

    pub fn with_precision(mut self, precision: PrecisionPolicy) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_scaled_scores(mut self, scale: bool) -> Self {
        self.scale_scores = scale;
        self
    }

    /// Config sized to the given operands.
    pub fn for_inputs(q: &Matrix, k: &Matrix) -> Self {
        Self::new(q.rows(), k.rows(), q.cols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.num_queries == 0 || self.seq_len == 0 || self.hidden_dim == 0
        {
            return Err(Error::Config(format!(
                "block size, query count, sequence length and hidden dimension must be >= 1 \
                 (B={}, Nq={}, N={}, d={})",
                self.block_size, self.num_queries, self.seq_len, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn validate_inputs(&self, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
        self.validate()?;
        let d = self.hidden_dim;
        if q.cols() != d || k.cols() != d || v.cols() != d {
            return Err(Error::Dimension(format!(
                "hidden dimension mismatch: config d={d}, Q has {}, K has {}, V has {} columns",
                q.cols(),
                k.cols(),
                v.cols()
            )));
        }
        if k.rows() != self.seq_len || v.rows() != self.seq_len {
            return Err(Error::Dimension(format!(
                "sequence length mismatch: config N={}, K has {}, V has {} rows",
                self.seq_len,
                k.rows(),
                v.rows()
            )));
        }
        if q.rows() != self.num_queries {
            return Err(Error::Dimension(format!(
                "query count mismatch: config Nq={}, Q has {} rows",
                self.num_queries,
                q.rows()
            )));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.num_queries.div_ceil(self.block_size)
    }

    /// `N` streaming cycles plus one division cycle.
    pub fn cycles_per_block(&self) -> usize {
        self.seq_len + 1
    }

    pub fn total_cycles(&self) -> usize {
        self.num_blocks() * self.cycles_per_block()
    }

    pub(crate) fn score_scale(&self) -> f64 {
        if self.scale_scores {
            1.0 / (self.hidden_dim as f64).sqrt()
        } else {
            1.0
        }
    }
}

fn check_vector_inputs(q: &[f64], k: &Matrix, v: &Matrix) -> Result<()> {
    if k.rows() == 0 || k.rows() != v.rows() {
        return Err(Error::Dimension(format!(
            "K has {} rows, V has {}",
            k.rows(),
            v.rows()
        )));
    }
    if q.len() != k.cols() || k.cols() != v.cols() {
        return Err(Error::Dimension(format!(
            "query length {}, K has {} columns, V has {}",
            q.len(),
            k.cols(),
            v.cols()
        )));
    }
    Ok(())
}

/// Dot-product unit: exact products, `f64` reduction, one rounding at the
/// output.
pub(crate) fn score(q: &[f64], k: &[f64], scale: f64, policy: &PrecisionPolicy) -> f64 {
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    policy.round_datapath(dot * scale)
}

/// Per-query registers of one accelerator lane.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneState {
    pub q: Vec<f64>,
    pub o: Vec<f64>,
    /// Running maximum score, starts at `-inf`.
    pub m: f64,
    /// Running sum of exponentials.
    pub ell: f64,
    /// Per-query predicted checksum accumulator.
    pub c: f64,
    /// Keys consumed so far.
    pub step: usize,
}

/// Factors shared by every accumulator of a lane in one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepFactors {
    /// `e^(m_prev - m)`, defined as 0 on the first step.
    pub rescale: f64,
    /// `e^(s - m)`.
    pub weight: f64,
}

impl LaneState {
    /// Fresh lane holding `q` rounded to the datapath format.
    pub fn new(q: &[f64], policy: &PrecisionPolicy) -> Self {
        LaneState {
            q: q.iter().map(|&x| policy.round_datapath(x)).collect(),
            o: vec![0.0; q.len()],
            m: f64::NEG_INFINITY,
            ell: 0.0,
            c: 0.0,
            step: 0,
        }
    }

    /// Reloads the lane for a new query without reallocating.
    pub(crate) fn reset(&mut self, q: &[f64], policy: &PrecisionPolicy) {
        for (dst, &x) in self.q.iter_mut().zip(q) {
            *dst = policy.round_datapath(x);
        }
        self.o.fill(0.0);
        self.m = f64::NEG_INFINITY;
        self.ell = 0.0;
        self.c = 0.0;
        self.step = 0;
    }

    /// Scores key `k`, updates `m` and `ell`, and returns the factors the
    /// output and check accumulators must apply.
    pub fn advance_softmax(&mut self, k: &[f64], scale: f64, policy: &PrecisionPolicy) -> StepFactors {
        let s = score(&self.q, k, scale, policy);
        let m_prev = self.m;
        let m = policy.round_stats(nan_max(m_prev, s));
        let rescale = if m_prev == f64::NEG_INFINITY {
            0.0
        } else {
            policy.round_datapath((m_prev - m).exp())
        };
        let weight = policy.round_datapath((s - m).exp());
        self.m = m;
        self.ell = policy.round_stats(self.ell * rescale + weight);
        self.step += 1;
        StepFactors { rescale, weight }
    }

    /// `o <- o * rescale + v * weight` in the output-accumulator format.
    pub fn accumulate_output(&mut self, v: &[f64], f: StepFactors, policy: &PrecisionPolicy) {
        accumulate_output(&mut self.o, v, f, policy);
    }

    /// Final division `o / ell` into the output-accumulator format.
    pub fn normalized_output(&self, policy: &PrecisionPolicy, out: &mut [f64]) {
        for (dst, &o) in out.iter_mut().zip(&self.o) {
            *dst = policy.round_accum(o / self.ell);
        }
    }
}

pub(crate) fn accumulate_output(o: &mut [f64], v: &[f64], f: StepFactors, policy: &PrecisionPolicy) {
    for (acc, &x) in o.iter_mut().zip(v) {
        *acc = policy.round_accum(*acc * f.rescale + x * f.weight);
    }
}

/// Golden dense attention `softmax(Q K^T) V` in `f64`, with max
/// subtraction. Ignores the precision policy.
pub fn reference_attention(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
    if q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows() || k.rows() == 0 {
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
    let scale = cfg.score_scale();
    let n = k.rows();
    let mut out = Matrix::zeros(q.rows(), v.cols(), Role::O);
    let mut s = vec![0.0; n];
    for i in 0..q.rows() {
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for sj in s.iter_mut() {
            *sj = (*sj - max).exp();
            total += *sj;
        }
        let row = out.row_mut(i);
        for (j, &p) in s.iter().enumerate() {
            let w = p / total;
            for (o, &x) in row.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

/// Result of the two-pass lazy-softmax computation.
#[derive(Clone, Debug, PartialEq)]
pub struct LazyAttention {
    pub output: Vec<f64>,
    pub scores: Vec<f64>,
    /// `m_N`, the maximum score.
    pub max: f64,
    /// `ell_N`, the sum of `e^(s_j - m_N)`.
    pub sum_exp: f64,
}

/// Two passes: all scores and their maximum first, then the weighted value
/// accumulation, then one division.
pub fn lazy_attention_stats(q: &[f64], k: &Matrix, v: &Matrix, cfg: &KernelConfig) -> Result<LazyAttention> {
    check_vector_inputs(q, k, v)?;
    let p = &cfg.precision;
    let scale = cfg.score_scale();
    let q: Vec<f64> = q.iter().map(|&x| p.round_datapath(x)).collect();

    let mut scores = Vec::with_capacity(k.rows());
    let mut max = f64::NEG_INFINITY;
    for i in 0..k.rows() {
        let kr: Vec<f64> = k.row(i).iter().map(|&x| p.round_datapath(x)).collect();
        let s = score(&q, &kr, scale, p);
        max = p.round_stats(nan_max(max, s));
        scores.push(s);
    }

    let mut o = vec![0.0; v.cols()];
    let mut ell = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        let w = p.round_datapath((s - max).exp());
        for (acc, &x) in o.iter_mut().zip(v.row(i)) {
            *acc = p.round_accum(*acc + p.round_datapath(x) * w);
        }
        ell = p.round_stats(ell + w);
    }
    let output = o.iter().map(|&x| p.round_accum(x / ell)).collect();
    Ok(LazyAttention {
        output,
        scores,
        max,
        sum_exp: ell,
    })
}

pub fn lazy_attention(q: &[f64], k: &Matrix, v: &Matrix, cfg: &KernelConfig) -> Result<Vec<f64>> {
    Ok(lazy_attention_stats(q, k, v, cfg)?.output)
}

/// Single-pass online-softmax attention for one query. Returns the output
/// row and the final lane registers.
pub fn flash_attention2(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    cfg: &KernelConfig,
) -> Result<(Vec<f64>, LaneState)> {
    check_vector_inputs(q, k, v)?;
    let p = &cfg.precision;
    let scale = cfg.score_scale();
    let mut lane = LaneState::new(q, p);
    let mut kr = vec![0.0; k.cols()];
    let mut vr = vec![0.0; v.cols()];
    for i in 0..k.rows() {
        for (dst, &x) in kr.iter_mut().zip(k.row(i)) {
            *dst = p.round_datapath(x);
        }
        for (dst, &x) in vr.iter_mut().zip(v.row(i)) {
            *dst = p.round_datapath(x);
        }
        let f = lane.advance_softmax(&kr, scale, p);
        lane.accumulate_output(&vr, f, p);
    }
    let mut out = vec![0.0; v.cols()];
    lane.normalized_output(p, &mut out);
    Ok((out, lane))
}

/// `max |a - b| / max |b|` over two equally long slices.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::numerics::Format;

    fn fp64_cfg(nq: usize, n: usize, d: usize) -> KernelConfig {
        KernelConfig::new(nq, n, d).with_precision(PrecisionPolicy::fp64())
    }

    fn random(rows: usize, cols: usize, role: Role, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_gaussian(rows, cols, role, Format::Fp64, &mut rng)
    }

    /// Textbook softmax(QK^T)V without max subtraction, as an independent
    /// dense evaluation.
    fn naive_dense(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(q.rows(), v.cols(), Role::O);
        for i in 0..q.rows() {
            let e: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|t| q.get(i, t) * k.get(j, t)).sum::<f64>().exp())
                .collect();
            let z: f64 = e.iter().sum();
            for c in 0..v.cols() {
                let acc: f64 = (0..k.rows()).map(|j| e[j] * v.get(j, c)).sum();
                out.set(i, c, acc / z);
            }
        }
        out
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Matrix::from_rows(&[[0.3, -1.2, 5.0]], Role::Q).unwrap();
        let k = Matrix::from_rows(&[[2.0, 1.0, -0.5]], Role::K).unwrap();
        let v = Matrix::from_rows(&[[7.0, -3.25, 0.125]], Role::V).unwrap();
        let cfg = fp64_cfg(1, 1, 3);
        let r = reference_attention(&q, &k, &v, &cfg).unwrap();
        assert_eq!(r.row(0), v.row(0));
        assert_eq!(lazy_attention(q.row(0), &k, &v, &cfg).unwrap(), v.row(0));
        let (out, lane) = flash_attention2(q.row(0), &k, &v, &cfg).unwrap();
        assert_eq!(out, v.row(0));
        assert_eq!(lane.ell, 1.0);
        assert_eq!(lane.m, 2.0 * 0.3 - 1.2 - 2.5);
    }

    #[test]
    fn two_by_two_hand_evaluation() {
        // orthogonal unit rows: scores are 1 on the diagonal, 0 off it
        let qk = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]], Role::Q).unwrap();
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]], Role::V).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let r = reference_attention(&qk, &qk, &v, &fp64_cfg(2, 2, 2)).unwrap();
        let expected = [hi, lo, lo, hi];
        for (a, b) in r.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn reference_matches_naive_dense() {
        let q = random(8, 4, Role::Q, 1);
        let k = random(8, 4, Role::K, 2);
        let v = random(8, 4, Role::V, 3);
        let r = reference_attention(&q, &k, &v, &fp64_cfg(8, 8, 4)).unwrap();
        let o = naive_dense(&q, &k, &v);
        assert!(max_relative_error(r.data(), o.data()) <= 1e-12);
    }

    #[test]
    fn equal_scores_give_column_mean() {
        let q = [0.0, 0.0, 0.0];
        let k = random(5, 3, Role::K, 9);
        let v = random(5, 3, Role::V, 10);
        let cfg = fp64_cfg(1, 5, 3);
        let out = lazy_attention(&q, &k, &v, &cfg).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0;
            assert!((out[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn lazy_and_flash_match_reference_at_fp64() {
        let q = random(1, 8, Role::Q, 21);
        let k = random(32, 8, Role::K, 22);
        let v = random(32, 8, Role::V, 23);
        let cfg = fp64_cfg(1, 32, 8);
        let lazy = lazy_attention_stats(q.row(0), &k, &v, &cfg).unwrap();
        let (flash, lane) = flash_attention2(q.row(0), &k, &v, &cfg).unwrap();
        let r = reference_attention(&q, &k, &v, &cfg).unwrap();
        assert!(max_relative_error(&lazy.output, r.row(0)) <= 1e-12);
        assert!(max_relative_error(&flash, &lazy.output) <= 1e-12);
        assert_eq!(lane.m, lazy.max);
        let direct: f64 = lazy.scores.iter().map(|s| (s - lazy.max).exp()).sum();
        assert!((lazy.sum_exp - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn online_rescaling_is_order_independent() {
        let q = random(1, 8, Role::Q, 31);
        let k = random(16, 8, Role::K, 32);
        let v = random(16, 8, Role::V, 33);
        let cfg = fp64_cfg(1, 16, 8);
        let lazy = lazy_attention_stats(q.row(0), &k, &v, &cfg).unwrap();
        let mut order: Vec<usize> = (0..16).collect();
        order.sort_by(|&a, &b| lazy.scores[a].partial_cmp(&lazy.scores[b]).unwrap());
        let permute = |m: &Matrix, order: &[usize]| {
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| m.row(i).to_vec()).collect();
            Matrix::from_rows(&rows, m.role()).unwrap()
        };
        let ascending = flash_attention2(q.row(0), &permute(&k, &order), &permute(&v, &order), &cfg)
            .unwrap()
            .0;
        order.reverse();
        let descending = flash_attention2(q.row(0), &permute(&k, &order), &permute(&v, &order), &cfg)
            .unwrap()
            .0;
        assert!(max_relative_error(&ascending, &descending) <= 1e-12);
        assert!(max_relative_error(&ascending, &lazy.output) <= 1e-12);
    }

    #[test]
    fn flash_max_sequence_is_monotone() {
        let q = random(1, 6, Role::Q, 41);
        let k = random(40, 6, Role::K, 42);
        let p = PrecisionPolicy::bf16();
        let mut lane = LaneState::new(q.row(0), &p);
        let mut prev = f64::NEG_INFINITY;
        let mut best = f64::NEG_INFINITY;
        for i in 0..k.rows() {
            let kr: Vec<f64> = k.row(i).iter().map(|&x| p.round_datapath(x)).collect();
            best = best.max(score(&lane.q, &kr, 1.0, &p));
            lane.advance_softmax(&kr, 1.0, &p);
            assert!(lane.m >= prev);
            prev = lane.m;
        }
        assert_eq!(lane.m, best);
        assert!(lane.ell >= 1.0);
    }

    #[test]
    fn dimension_errors() {
        let k = random(4, 3, Role::K, 1);
        let v = random(4, 2, Role::V, 2);
        let cfg = fp64_cfg(1, 4, 3);
        assert!(matches!(
            lazy_attention(&[1.0, 2.0, 3.0], &k, &v, &cfg),
            Err(Error::Dimension(_))
        ));
        assert!(flash_attention2(&[1.0, 2.0], &k, &k, &cfg).is_err());
        let q = random(2, 3, Role::Q, 3);
        assert!(reference_attention(&q, &k, &v, &cfg).is_err());
        assert!(cfg.validate_inputs(&q, &k, &k).is_err());
        assert!(KernelConfig::new(1, 1, 1).with_block_size(0).validate().is_err());
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = KernelConfig::new(32, 100, 8).with_block_size(16);
        assert_eq!(cfg.num_blocks(), 2);
        assert_eq!(cfg.total_cycles(), 2 * 101);
        assert_eq!(KernelConfig::new(33, 4, 1).with_block_size(16).num_blocks(), 3);
    }
}
