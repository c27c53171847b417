//! Cross-backend output variance and per-backend deviation.

use serde::{Deserialize, Serialize};

use crate::backend::ExecutionOutcome;
use crate::value::{TensorData, ValueIR};

/// Output flattened to reals, with a mask marking integer-valued elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Flattened {
    pub values: Vec<f64>,
    pub integer: Vec<bool>,
    /// Per output: kind tag and shape, used to decide comparability.
    pub layout: Vec<(&'static str, Vec<usize>)>,
}

pub fn flatten_outputs(outputs: &[ValueIR]) -> Flattened {
    let mut f = Flattened {
        values: Vec::new(),
        integer: Vec::new(),
        layout: Vec::new(),
    };
    let push = |f: &mut Flattened, v: f64, int: bool| {
        f.values.push(v);
        f.integer.push(int);
    };
    for out in outputs {
        match out {
            ValueIR::Tensor(t) => {
                let tag = match &t.data {
                    TensorData::Real(v) => {
                        v.iter().for_each(|x| push(&mut f, *x, false));
                        "real"
                    }
                    TensorData::Complex(v) => {
                        v.iter().for_each(|(re, im)| {
                            push(&mut f, *re, false);
                            push(&mut f, *im, false);
                        });
                        "complex"
                    }
                    TensorData::Int(v) => {
                        v.iter().for_each(|x| push(&mut f, *x as f64, true));
                        "int"
                    }
                    TensorData::Bool(v) => {
                        v.iter().for_each(|x| push(&mut f, *x as u8 as f64, true));
                        "bool"
                    }
                };
                f.layout.push((tag, t.shape.clone()));
            }
            ValueIR::ValueScalar(x) => {
                push(&mut f, *x, false);
                f.layout.push(("real", vec![]));
            }
            ValueIR::IndexScalar(i) => {
                push(&mut f, *i as f64, true);
                f.layout.push(("int", vec![]));
            }
            ValueIR::Flag(b) => {
                push(&mut f, *b as u8 as f64, true);
                f.layout.push(("bool", vec![]));
            }
            ValueIR::Shape(s) => {
                s.iter().for_each(|x| push(&mut f, *x as f64, true));
                f.layout.push(("int", vec![s.len()]));
            }
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceResult {
    /// Backend ids in the order used for `mean`, `variance` and deviations.
    pub backends: Vec<String>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Largest element-wise variance over real elements, or the mismatch
    /// fraction over integer elements, whichever is larger.
    pub sigma2: f64,
    pub comparable: bool,
    /// Integer-valued elements on which not every backend agrees.
    pub integer_mismatches: usize,
    pub integer_elements: usize,
}

impl VarianceResult {
    fn incomparable(backends: Vec<String>) -> Self {
        VarianceResult {
            backends,
            mean: Vec::new(),
            variance: Vec::new(),
            sigma2: 0.0,
            comparable: false,
            integer_mismatches: 0,
            integer_elements: 0,
        }
    }
}

/// Sum in ascending order, so the result does not depend on backend order.
fn sorted_sum(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

/// Population variance over all Ok outcomes given.
///
/// Elements where any backend produced NaN are skipped (that case belongs
/// to the NaN oracle). A non-finite variance is reported as `f64::MAX`, and
/// a variance that underflows to zero for differing values as the smallest
/// positive normal, so that `sigma2 == 0` exactly when outputs agree.
pub fn compute_variance(outcomes: &[&ExecutionOutcome]) -> VarianceResult {
    let backends: Vec<String> = outcomes.iter().map(|o| o.backend_id.clone()).collect();
    let flat: Vec<Flattened> = outcomes.iter().map(|o| flatten_outputs(&o.outputs)).collect();
    let Some(first) = flat.first() else {
        return VarianceResult {
            comparable: true,
            ..VarianceResult::incomparable(backends)
        };
    };
    let same_layout = flat.iter().all(|f| {
        f.layout.len() == first.layout.len()
            && f.layout.iter().zip(&first.layout).all(|((ta, sa), (tb, sb))| {
                sa == sb && (ta == tb || (*ta != "int" && *ta != "bool" && *tb != "int" && *tb != "bool"))
            })
    });
    if !same_layout || flat.iter().any(|f| f.values.len() != first.values.len()) {
        return VarianceResult::incomparable(backends);
    }

    let n = flat.len() as f64;
    let len = first.values.len();
    let mut mean = Vec::with_capacity(len);
    let mut variance = Vec::with_capacity(len);
    let mut sigma2: f64 = 0.0;
    let mut mismatches = 0;
    let mut int_elems = 0;
    let mut column = Vec::with_capacity(flat.len());
    for e in 0..len {
        column.clear();
        column.extend(flat.iter().map(|f| f.values[e]));
        let all_equal = column.iter().all(|x| *x == column[0]);
        if first.integer[e] {
            int_elems += 1;
            if !all_equal {
                mismatches += 1;
            }
        }
        if column.iter().any(|x| x.is_nan()) {
            mean.push(f64::NAN);
            variance.push(0.0);
            continue;
        }
        if all_equal {
            mean.push(column[0]);
            variance.push(0.0);
            continue;
        }
        let mu = sorted_sum(&mut column) / n;
        let mut sq: Vec<f64> = column.iter().map(|x| (x - mu) * (x - mu)).collect();
        let mut var = sorted_sum(&mut sq) / n;
        if !var.is_finite() {
            var = f64::MAX;
        } else if var == 0.0 {
            var = f64::MIN_POSITIVE;
        }
        mean.push(mu);
        variance.push(var);
        if !first.integer[e] {
            sigma2 = sigma2.max(var);
        }
    }
    if int_elems > 0 {
        sigma2 = sigma2.max(mismatches as f64 / int_elems as f64);
    }
    VarianceResult {
        backends,
        mean,
        variance,
        sigma2,
        comparable: true,
        integer_mismatches: mismatches,
        integer_elements: int_elems,
    }
}

/// `A_i(x) - mean(x)` for every backend, element-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationVector {
    pub backends: Vec<String>,
    pub deviations: Vec<Vec<f64>>,
}

impl DeviationVector {
    /// Index of the backend with the largest finite absolute deviation.
    pub fn max_backend(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in self.deviations.iter().enumerate() {
            let m = d
                .iter()
                .filter(|x| x.is_finite())
                .fold(0.0f64, |m, x| m.max(x.abs()));
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn max_abs(&self) -> f64 {
        self.deviations
            .iter()
            .flatten()
            .filter(|x| !x.is_nan())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

pub fn deviation_vector(outcomes: &[&ExecutionOutcome], variance: &VarianceResult) -> DeviationVector {
    let deviations = outcomes
        .iter()
        .map(|o| {
            let f = flatten_outputs(&o.outputs);
            f.values
                .iter()
                .zip(&variance.mean)
                .map(|(x, mu)| if x == mu { 0.0 } else { x - mu })
                .collect()
        })
        .collect();
    DeviationVector {
        backends: variance.backends.clone(),
        deviations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Status;
    use crate::value::{DType, Tensor};

    pub(crate) fn ok(id: &str, outputs: Vec<ValueIR>) -> ExecutionOutcome {
        ExecutionOutcome {
            backend_id: id.into(),
            status: Status::Ok,
            nan_present: outputs.iter().any(ValueIR::has_nan),
            outputs,
            error_text: None,
            duration_ms: 0.0,
        }
    }

    fn scalar(id: &str, v: f64) -> ExecutionOutcome {
        ok(id, vec![ValueIR::ValueScalar(v)])
    }

    #[test]
    fn scalar_variance() {
        let (a, b, c) = (scalar("a", 1.0), scalar("b", 2.0), scalar("c", 3.0));
        let v = compute_variance(&[&a, &b, &c]);
        assert_eq!(v.mean, vec![2.0]);
        assert!((v.sigma2 - 0.6667).abs() < 1e-4);
        let d = deviation_vector(&[&a, &b, &c], &v);
        assert_eq!(d.deviations, vec![vec![-1.0], vec![0.0], vec![1.0]]);
        assert_eq!(d.max_backend(), Some(0));
    }

    #[test]
    fn identical_outputs() {
        let t = ValueIR::Tensor(Tensor::real(DType::F32, vec![3], vec![1.0, -0.0, 1e38]));
        let a = ok("a", vec![t.clone()]);
        let b = ok("b", vec![t]);
        let v = compute_variance(&[&a, &b]);
        assert_eq!(v.sigma2, 0.0);
        assert!(deviation_vector(&[&a, &b], &v)
            .deviations
            .iter()
            .flatten()
            .all(|x| *x == 0.0));
    }

    #[test]
    fn argsort_rows_from_first_inconsistent_example() {
        let row = |v: &[i64]| ValueIR::Tensor(Tensor::int(vec![10], v.to_vec()));
        let a = ok("torch", vec![row(&[5, 9, 0, 3, 8, 1, 4, 2, 7, 6])]);
        let b = ok("tf", vec![row(&[5, 9, 0, 1, 3, 8, 4, 2, 7, 6])]);
        let v = compute_variance(&[&a, &b]);
        assert!(v.comparable);
        assert_eq!(v.integer_mismatches, 3);
        assert!((v.sigma2 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_incomparable() {
        let a = ok("a", vec![ValueIR::Tensor(Tensor::real(DType::F64, vec![2], vec![1.0, 2.0]))]);
        let b = ok("b", vec![ValueIR::Tensor(Tensor::real(DType::F64, vec![1, 2], vec![1.0, 2.0]))]);
        assert!(!compute_variance(&[&a, &b]).comparable);
        let c = ok("c", vec![]);
        assert!(!compute_variance(&[&a, &c]).comparable);
        let i = ok("i", vec![ValueIR::Tensor(Tensor::int(vec![2], vec![1, 2]))]);
        assert!(!compute_variance(&[&a, &i]).comparable);
        // f32 and f64 outputs of one shape are still compared
        let f = ok("f", vec![ValueIR::Tensor(Tensor::real(DType::F32, vec![2], vec![1.0, 2.0]))]);
        assert_eq!(compute_variance(&[&a, &f]).sigma2, 0.0);
    }

    #[test]
    fn extremes_stay_ordered() {
        let (a, b) = (scalar("a", f64::INFINITY), scalar("b", 0.0));
        assert_eq!(compute_variance(&[&a, &b]).sigma2, f64::MAX);
        let (a, b) = (scalar("a", 1e-300), scalar("b", 0.0));
        assert!(compute_variance(&[&a, &b]).sigma2 > 0.0);
        let (a, b) = (scalar("a", f64::NAN), scalar("b", 0.0));
        assert_eq!(compute_variance(&[&a, &b]).sigma2, 0.0);
    }
}
