//! Minimal dense linear algebra and differentiable primitives.
//!
//! Everything here is 64-bit and analytically differentiated; the finite
//! difference checker at the bottom is the oracle the gradient tests lean on.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FedError::Dimension(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Input("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(FedError::Dimension("ragged matrix rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `W x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            out[i] = acc;
        }
        out
    }

    /// `W^T y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let yi = y[i];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
        out
    }
}

/// `Wx + b`, recording to `tape` when one is supplied.
pub fn affine_forward(
    x: &[f64],
    w: &Matrix,
    b: &[f64],
    tape: Option<&mut GradTape>,
) -> Result<Vec<f64>> {
    if x.len() != w.cols() || b.len() != w.rows() {
        return Err(FedError::Config(format!(
            "affine dims: x={} W={}x{} b={}",
            x.len(),
            w.rows(),
            w.cols(),
            b.len()
        )));
    }
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    if let Some(tape) = tape {
        tape.record(TapeEntry::Affine { input: x.to_vec() });
    }
    Ok(y)
}

/// Elementwise `max(0, x)`; the subgradient at 0 is taken as 0.
pub fn relu(x: &[f64], tape: Option<&mut GradTape>) -> Vec<f64> {
    let y: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    if let Some(tape) = tape {
        tape.record(TapeEntry::Relu { pre: x.to_vec() });
    }
    y
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Softmax cross entropy with its gradient w.r.t. the logits.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(FedError::Input(format!(
            "label {} out of range for {} logits",
            label,
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|v| v - m).collect();
    let log_sum = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    let loss = log_sum - shifted[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

const KL_FLOOR: f64 = 1e-12;

/// `KL(p || q)` with `0 log 0 = 0` and `q` floored at `1e-12`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(FedError::Dimension("kl: length mismatch".into()));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| *x < 0.0) {
            return Err(FedError::Input(format!("kl: negative entry in {name}")));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(FedError::Input(format!(
                "kl: {name} sums to {sum}, not normalized"
            )));
        }
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi / qi.max(KL_FLOOR)).ln();
        }
    }
    Ok(acc)
}

/// One recorded primitive application with the cached values its backward
/// pass needs.
#[derive(Debug)]
enum TapeEntry {
    Affine { input: Vec<f64> },
    Relu { pre: Vec<f64> },
}

/// Ordered record of primitive applications for one forward pass.
///
/// The backward pass consumes the tape exactly once, in reverse order of
/// recording. A tape is confined to a single client's update.
#[derive(Debug, Default)]
pub struct GradTape {
    entries: Vec<TapeEntry>,
}

/// Parameter gradients produced by [`GradTape::backward`], one pair per
/// affine layer in recording order.
#[derive(Debug)]
pub struct LayerGrads {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
    pub d_input: Vec<f64>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    fn record(&mut self, entry: TapeEntry) {
        self.entries.push(entry);
    }

    /// Walk the tape backwards from `d_out`, accumulating gradients for each
    /// recorded affine layer. `weights` are the layer matrices in recording
    /// order. Consumes the tape.
    pub fn backward(self, weights: &[&Matrix], d_out: &[f64]) -> Result<LayerGrads> {
        let n_affine = self
            .entries
            .iter()
            .filter(|e| matches!(e, TapeEntry::Affine { .. }))
            .count();
        if n_affine != weights.len() {
            return Err(FedError::Internal(format!(
                "tape holds {} affine entries, {} weight matrices given",
                n_affine,
                weights.len()
            )));
        }
        let mut d_weights: Vec<Option<Matrix>> = vec![None; weights.len()];
        let mut d_biases: Vec<Option<Vec<f64>>> = vec![None; weights.len()];
        let mut grad = d_out.to_vec();
        let mut layer_idx = n_affine;
        for entry in self.entries.into_iter().rev() {
            match entry {
                TapeEntry::Relu { pre } => {
                    for (g, p) in grad.iter_mut().zip(&pre) {
                        if *p <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                TapeEntry::Affine { input } => {
                    layer_idx -= 1;
                    let w = weights[layer_idx];
                    let mut dw = Matrix::zeros(w.rows(), w.cols());
                    for i in 0..w.rows() {
                        let gi = grad[i];
                        for j in 0..w.cols() {
                            *dw.at_mut(i, j) = gi * input[j];
                        }
                    }
                    d_weights[layer_idx] = Some(dw);
                    d_biases[layer_idx] = Some(grad.clone());
                    grad = w.matvec_transposed(&grad);
                }
            }
        }
        Ok(LayerGrads {
            d_weights: d_weights.into_iter().map(|m| m.unwrap()).collect(),
            d_biases: d_biases.into_iter().map(|b| b.unwrap()).collect(),
            d_input: grad,
        })
    }
}

/// Max relative error between an analytical gradient and central finite
/// differences of `loss_fn` at `params`.
///
/// The relative error per coordinate is `|g_a - g_fd| / max(1, |g_a|, |g_fd|)`.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &[f64], analytical: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must be in (0, 1e-2]");
    assert_eq!(params.len(), analytical.len());
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let up = loss_fn(&work);
        work[i] = orig - eps;
        let down = loss_fn(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ga = analytical[i];
        let rel = (ga - fd).abs() / 1.0f64.max(ga.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_diagonal_case() {
        let w = Matrix::from_rows(vec![vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let y = affine_forward(&[1.0, 0.0], &w, &[0.0, 0.0], None).unwrap();
        assert_eq!(y, vec![2.0, 0.0]);
    }

    #[test]
    fn affine_zero_input_returns_bias() {
        let w = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = affine_forward(&[0.0, 0.0], &w, &[5.0, 7.0], None).unwrap();
        assert_eq!(y, vec![5.0, 7.0]);
    }

    #[test]
    fn affine_hand_multiply() {
        let w = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = affine_forward(&[1.0, 1.0], &w, &[1.0, 1.0], None).unwrap();
        assert_eq!(y, vec![4.0, 8.0]);
    }

    #[test]
    fn affine_dim_mismatch_errors() {
        let w = Matrix::from_rows(vec![vec![1.0, 2.0]]).unwrap();
        assert!(affine_forward(&[1.0], &w, &[0.0], None).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&[-1.0, 2.0], None), vec![0.0, 2.0]);
        assert_eq!(relu(&[0.0, 0.0], None), vec![0.0, 0.0]);
        assert_eq!(relu(&[3.5, -0.1, 0.1], None), vec![3.5, 0.0, 0.1]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let (loss, _) = softmax_ce(&[0.0, 0.0], 0).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_no_overflow() {
        let (loss, grad) = softmax_ce(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss < 1e-9);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn softmax_ce_direct_evaluation() {
        // -log(e^3 / (e^1 + e^2 + e^3)) computed directly as the oracle.
        let expected = -((3.0f64).exp() / ((1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp())).ln();
        let (loss, _) = softmax_ce(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        assert!(softmax_ce(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn kl_identical_is_zero() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_form() {
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_flooring_keeps_finite() {
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert!(v > 1.0);
    }

    #[test]
    fn kl_rejects_unnormalized() {
        assert!(kl_divergence(&[0.6, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[-0.5, 1.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn finite_diff_exact_for_quadratic() {
        let err = finite_diff_check(|w| w[0] * w[0], &[3.0], &[6.0], 1e-5);
        assert!(err < 1e-6);
    }

    #[test]
    fn finite_diff_softmax_ce_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.gen_range(2..=16);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let label = rng.gen_range(0..n);
            let (_, grad) = softmax_ce(&logits, label).unwrap();
            let err = finite_diff_check(
                |l| softmax_ce(l, label).unwrap().0,
                &logits,
                &grad,
                1e-5,
            );
            assert!(err < 1e-4, "softmax_ce gradient off by {err}");
        }
    }

    #[test]
    fn finite_diff_relu_away_from_zero() {
        let x = vec![3.0, -2.0, 1.5];
        // d/dx sum(relu(x)) is the step indicator.
        let grad = vec![1.0, 0.0, 1.0];
        let err = finite_diff_check(|v| relu(v, None).iter().sum(), &x, &grad, 1e-5);
        assert!(err < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one_on_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(2..=16);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e4..1e4)).collect();
            let p = softmax(&logits);
            assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(2..=12);
            let raw_p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0) + 1e-3).collect();
            let raw_q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0) + 1e-3).collect();
            let sp: f64 = raw_p.iter().sum();
            let sq: f64 = raw_q.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|v| v / sp).collect();
            let q: Vec<f64> = raw_q.iter().map(|v| v / sq).collect();
            let d = kl_divergence(&p, &q).unwrap();
            assert!(d >= -1e-12, "Gibbs inequality violated: {d}");
            assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn tape_backward_matches_finite_diff_through_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let din = rng.gen_range(2..=6);
            let dhid = rng.gen_range(2..=6);
            let dout = rng.gen_range(2..=6);
            let w1 = Matrix::from_vec(
                dhid,
                din,
                (0..dhid * din).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let b1: Vec<f64> = (0..dhid).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w2 = Matrix::from_vec(
                dout,
                dhid,
                (0..dout * dhid).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let b2: Vec<f64> = (0..dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..din).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let run = |w1: &Matrix, b1: &[f64], w2: &Matrix, b2: &[f64]| -> f64 {
                let h = affine_forward(&x, w1, b1, None).unwrap();
                let h = relu(&h, None);
                let y = affine_forward(&h, w2, b2, None).unwrap();
                y.iter().map(|v| v * v).sum::<f64>()
            };

            let mut tape = GradTape::new();
            let h = affine_forward(&x, &w1, &b1, Some(&mut tape)).unwrap();
            let h = relu(&h, Some(&mut tape));
            let y = affine_forward(&h, &w2, &b2, Some(&mut tape)).unwrap();
            let d_out: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            let grads = tape.backward(&[&w1, &w2], &d_out).unwrap();

            // Check dW1 against finite differences coordinate by coordinate.
            let flat: Vec<f64> = w1.data().to_vec();
            let analytical: Vec<f64> = grads.d_weights[0].data().to_vec();
            let err = finite_diff_check(
                |p| {
                    let w = Matrix::from_vec(dhid, din, p.to_vec()).unwrap();
                    run(&w, &b1, &w2, &b2)
                },
                &flat,
                &analytical,
                1e-5,
            );
            assert!(err < 1e-3, "dW1 off by {err}");
        }
    }
}
