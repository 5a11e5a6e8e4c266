//! Small deterministic numeric kernels shared by the saliency, steering and
//! model code, plus the [`DenseTensor`] container that the ATN1 format
//! serializes.
//!
//! Everything stores `f32` and reduces in `f64`.

use crate::error::{GiftError, Result};

/// Row-major `f32` tensor with positive extents.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(GiftError::Shape(format!("extents must be positive, got {dims:?}")));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| GiftError::Shape(format!("extent product overflows: {dims:?}")))?;
        if numel != data.len() {
            return Err(GiftError::Shape(format!(
                "dims {dims:?} hold {numel} values, data has {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GiftError::NonFinite("tensor data"));
        }
        Ok(Self { dims, data })
    }

    pub fn from_vec1(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.dims, self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn check_finite(v: &[f32], what: &'static str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(GiftError::NonFinite(what));
    }
    Ok(())
}

/// Softmax of `logits + bias` over positions where `mask` is false.
///
/// Masked positions come out as exactly `0.0`.
pub fn softmax_with_bias(logits: &[f32], bias: &[f32], mask: &[bool]) -> Result<Vec<f32>> {
    if logits.len() != bias.len() || logits.len() != mask.len() {
        return Err(GiftError::Shape(format!(
            "softmax inputs differ in length: logits {}, bias {}, mask {}",
            logits.len(),
            bias.len(),
            mask.len()
        )));
    }
    check_finite(logits, "softmax logits")?;
    check_finite(bias, "softmax bias")?;

    let max = logits
        .iter()
        .zip(bias)
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|((&z, &b), _)| z as f64 + b as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(GiftError::EmptyAttentionRow);
    }

    let mut exps = vec![0.0f64; logits.len()];
    let mut sum = 0.0f64;
    for (i, e) in exps.iter_mut().enumerate() {
        if !mask[i] {
            *e = (logits[i] as f64 + bias[i] as f64 - max).exp();
            sum += *e;
        }
    }
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

/// Affine map of `v` onto `[0, 1]`. A constant vector maps to all zeros.
pub fn minmax_normalize(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(GiftError::EmptyInput("min-max normalization"));
    }
    check_finite(v, "min-max input")?;
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x as f64), hi.max(x as f64))
    });
    let span = hi - lo;
    if span == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v
        .iter()
        .map(|&x| (((x as f64) - lo) / span).clamp(0.0, 1.0) as f32)
        .collect())
}

/// Scale a non-negative vector so it sums to one.
pub fn sum_normalize(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(GiftError::EmptyInput("sum normalization"));
    }
    check_finite(v, "sum-normalization input")?;
    if v.iter().any(|&x| x < 0.0) {
        return Err(GiftError::InvalidInput("sum normalization needs non-negative entries".into()));
    }
    let sum: f64 = v.iter().map(|&x| x as f64).sum();
    if sum <= 0.0 {
        return Err(GiftError::DegenerateSaliency("zero total mass"));
    }
    Ok(v.iter().map(|&x| (x as f64 / sum) as f32).collect())
}

/// Population mean and standard deviation, accumulated in `f64`.
pub fn mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Replace values above `mean + k * std` (population std) with that bound.
pub fn clip_sigma(v: &[f32], k: f64) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(GiftError::EmptyInput("sigma clipping"));
    }
    if !(k > 0.0) || !k.is_finite() {
        return Err(GiftError::Config(format!("clip multiplier must be positive, got {k}")));
    }
    check_finite(v, "sigma-clip input")?;
    let (mean, std) = mean_std(v);
    let bound = mean + k * std;
    Ok(v.iter()
        .map(|&x| if (x as f64) > bound { bound as f32 } else { x })
        .collect())
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Indices of the `k` largest scores, ties toward the lower index, returned
/// in ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((*x as f64 - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_symmetric() {
        let out = softmax_with_bias(&[0.0, 0.0], &[0.0, 0.0], &[false, false]).unwrap();
        close(&out, &[0.5, 0.5], 1e-7);
    }

    #[test]
    fn softmax_log2_bias() {
        let b = std::f32::consts::LN_2;
        let out = softmax_with_bias(&[0.0, 0.0], &[b, 0.0], &[false, false]).unwrap();
        close(&out, &[2.0 / 3.0, 1.0 / 3.0], 1e-7);
    }

    #[test]
    fn softmax_masked_middle() {
        let out = softmax_with_bias(&[5.0, 1.0, 1.0], &[0.0; 3], &[false, true, false]).unwrap();
        let e4 = 4.0f64.exp();
        close(&out, &[e4 / (e4 + 1.0), 0.0, 1.0 / (e4 + 1.0)], 1e-7);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(
            softmax_with_bias(&[1.0, 2.0], &[0.0, 0.0], &[true, true]),
            Err(GiftError::EmptyAttentionRow)
        ));
        assert!(matches!(
            softmax_with_bias(&[f32::NAN, 2.0], &[0.0, 0.0], &[false, false]),
            Err(GiftError::NonFinite(_))
        ));
        assert!(softmax_with_bias(&[1.0], &[0.0, 0.0], &[false]).is_err());
    }

    #[test]
    fn minmax_examples() {
        close(&minmax_normalize(&[2.0, 4.0, 6.0]).unwrap(), &[0.0, 0.5, 1.0], 1e-7);
        close(&minmax_normalize(&[3.0, 3.0, 3.0]).unwrap(), &[0.0, 0.0, 0.0], 0.0);
        close(&minmax_normalize(&[-1.0, 0.0, 1.0]).unwrap(), &[0.0, 0.5, 1.0], 1e-7);
        assert!(minmax_normalize(&[]).is_err());
    }

    #[test]
    fn sum_normalize_examples() {
        close(&sum_normalize(&[1.0, 1.0, 2.0]).unwrap(), &[0.25, 0.25, 0.5], 1e-7);
        close(&sum_normalize(&[0.0, 5.0]).unwrap(), &[0.0, 1.0], 0.0);
        assert!(matches!(sum_normalize(&[0.0, 0.0]), Err(GiftError::DegenerateSaliency(_))));
        assert!(sum_normalize(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn clip_sigma_examples() {
        // mean 25, population std 25*sqrt(3) ~= 43.3, bound ~= 154.9
        let v = [0.0, 0.0, 0.0, 100.0];
        assert_eq!(clip_sigma(&v, 3.0).unwrap(), v.to_vec());

        let c = [7.5f32; 5];
        assert_eq!(clip_sigma(&c, 0.1).unwrap(), c.to_vec());

        // mean 100, std 300, bound 400
        let mut w = [0.0f32; 10];
        w[9] = 1000.0;
        let out = clip_sigma(&w, 1.0).unwrap();
        assert!((out[9] - 400.0).abs() < 1e-3, "{}", out[9]);
        assert!(out[..9].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn argmax_ties_to_lower_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
    }

    proptest! {
        #[test]
        fn bias_is_multiplicative_reweighting(
            pairs in prop::collection::vec((-8.0f32..8.0, -3.0f32..3.0, any::<bool>()), 1..64)
        ) {
            let z: Vec<f32> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f32> = pairs.iter().map(|p| p.1).collect();
            let mut m: Vec<bool> = pairs.iter().map(|p| p.2).collect();
            m[0] = false;
            let direct = softmax_with_bias(&z, &b, &m).unwrap();
            let plain = softmax_with_bias(&z, &vec![0.0; z.len()], &m).unwrap();
            let weighted: Vec<f32> = plain
                .iter()
                .zip(&b)
                .map(|(&p, &bb)| (p as f64 * (bb as f64).exp()) as f32)
                .collect();
            let renorm = sum_normalize(&weighted).unwrap();
            for (x, y) in direct.iter().zip(&renorm) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
            let s: f64 = direct.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            for (x, &mm) in direct.iter().zip(&m) {
                if mm { prop_assert_eq!(*x, 0.0); } else { prop_assert!(*x > 0.0); }
            }
        }

        #[test]
        fn minmax_idempotent(v in prop::collection::vec(-100.0f32..100.0, 1..50)) {
            let once = minmax_normalize(&v).unwrap();
            let twice = minmax_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            prop_assert!(once.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn clip_never_increases_or_reorders(
            v in prop::collection::vec(-50.0f32..500.0, 1..60),
            k in 0.5f64..4.0,
        ) {
            let out = clip_sigma(&v, k).unwrap();
            let (mean, std) = mean_std(&v);
            let bound = mean + k * std;
            for (i, (&a, &b)) in v.iter().zip(&out).enumerate() {
                prop_assert!(b <= a);
                if (a as f64) <= bound { prop_assert_eq!(a, b); }
                for (j, &c) in v.iter().enumerate() {
                    if (a as f64) <= bound && (c as f64) <= bound && a < c {
                        prop_assert!(out[i] < out[j]);
                    }
                }
            }
        }
    }
}
