//! Input mutation and the annealing acceptance rule.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::variance::DeviationVector;
use crate::gen::{associated_rank, inject_one, ArgRole};
use crate::value::{DType, SeedTuple, TensorData, ValueIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationClass {
    TensorNoise,
    FlagToggle,
    ScalarNudge,
    EdgeInjection,
}

fn is_float_tensor(a: &ValueIR) -> bool {
    a.as_tensor()
        .is_some_and(|t| !t.data.is_empty() && matches!(t.data, TensorData::Real(_) | TensorData::Complex(_)))
}

/// Mutation classes that can change this tuple.
pub fn applicable_classes(args: &[ValueIR]) -> Vec<MutationClass> {
    let mut classes = Vec::new();
    let floats = args.iter().any(is_float_tensor);
    if floats {
        classes.push(MutationClass::TensorNoise);
    }
    if args.iter().any(|a| matches!(a, ValueIR::Flag(_))) {
        classes.push(MutationClass::FlagToggle);
    }
    if args
        .iter()
        .any(|a| matches!(a, ValueIR::ValueScalar(_) | ValueIR::IndexScalar(_)))
    {
        classes.push(MutationClass::ScalarNudge);
    }
    if floats {
        classes.push(MutationClass::EdgeInjection);
    }
    classes
}

fn pick<R: Rng, T: Copy>(rng: &mut R, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// Zeros, subnormals, non-finite and huge values are left alone by noise so
/// injected edge cases survive later mutations.
fn is_edge_element(x: f64, dtype: DType) -> bool {
    !x.is_finite() || x.abs() < dtype.min_normal() || x.abs() >= dtype.round(1e38)
}

/// Per-element noise weights taken from the most deviating backend, scaled
/// to a maximum of 1. Returns `None` when the deviation carries no signal.
fn guidance(dev: Option<&DeviationVector>) -> Option<Vec<f64>> {
    let dev = dev?;
    let d = &dev.deviations[dev.max_backend()?];
    let m = d
        .iter()
        .filter(|x| x.is_finite())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if m == 0.0 {
        return None;
    }
    Some(
        d.iter()
            .map(|x| if x.is_finite() { x.abs() / m } else { 1.0 })
            .collect(),
    )
}

/// Applies exactly one mutation class, chosen uniformly among those that
/// apply. The result satisfies the same signature as the input.
pub fn mutate<R: Rng>(
    seed: &SeedTuple,
    roles: &[ArgRole],
    dev: Option<&DeviationVector>,
    rng: &mut R,
    temperature: f64,
    noise_scale: f64,
) -> (SeedTuple, Option<MutationClass>) {
    let mut out = seed.clone();
    let classes = applicable_classes(&out.args);
    if classes.is_empty() {
        return (out, None);
    }
    let class = pick(rng, &classes);
    match class {
        MutationClass::TensorNoise => {
            let idx: Vec<usize> = (0..out.args.len()).filter(|&i| is_float_tensor(&out.args[i])).collect();
            let i = pick(rng, &idx);
            let weights = guidance(dev);
            let ValueIR::Tensor(t) = &mut out.args[i] else { unreachable!() };
            let dtype = t.dtype;
            let n = t.data.len();
            // Output deviation maps onto input elements only when the sizes agree.
            let weight = |k: usize| match &weights {
                Some(w) if w.len() == n => w[k],
                _ => 1.0,
            };
            let scale = noise_scale * temperature;
            let step = |rng: &mut R, k: usize, x: f64| -> f64 {
                let g: f64 = rng.sample(StandardNormal);
                let delta = scale * weight(k) * g;
                if delta == 0.0 || is_edge_element(x, dtype) {
                    x
                } else {
                    dtype.round(x + delta)
                }
            };
            match &mut t.data {
                TensorData::Real(v) => {
                    for (k, x) in v.iter_mut().enumerate() {
                        *x = step(rng, k, *x);
                    }
                }
                TensorData::Complex(v) => {
                    for (k, (re, im)) in v.iter_mut().enumerate() {
                        *re = step(rng, 2 * k, *re);
                        *im = step(rng, 2 * k + 1, *im);
                    }
                }
                _ => unreachable!(),
            }
        }
        MutationClass::FlagToggle => {
            let idx: Vec<usize> = (0..out.args.len())
                .filter(|&i| matches!(out.args[i], ValueIR::Flag(_)))
                .collect();
            let i = pick(rng, &idx);
            if let ValueIR::Flag(b) = &mut out.args[i] {
                *b = !*b;
            }
        }
        MutationClass::ScalarNudge => {
            let idx: Vec<usize> = (0..out.args.len())
                .filter(|&i| matches!(out.args[i], ValueIR::ValueScalar(_) | ValueIR::IndexScalar(_)))
                .collect();
            let i = pick(rng, &idx);
            let rank = associated_rank(&out.args).unwrap_or(1).max(1);
            let integral = roles.get(i) == Some(&ArgRole::IntValue);
            match &mut out.args[i] {
                ValueIR::ValueScalar(v) => {
                    let mut next = if *v == 0.0 || !v.is_finite() {
                        rng.random_range(0.0..=1.0)
                    } else {
                        (*v * rng.random_range(0.5..=2.0)).clamp(0.0, 1.0)
                    };
                    if integral {
                        next = next.round();
                    }
                    *v = next;
                }
                ValueIR::IndexScalar(a) => *a = rng.random_range(0..rank as i64),
                _ => unreachable!(),
            }
        }
        MutationClass::EdgeInjection => {
            let idx: Vec<usize> = (0..out.args.len()).filter(|&i| is_float_tensor(&out.args[i])).collect();
            let i = pick(rng, &idx);
            let ValueIR::Tensor(t) = &mut out.args[i] else { unreachable!() };
            let pos = rng.random_range(0..t.data.len());
            inject_one(rng, t, pos);
        }
    }
    (out, Some(class))
}

/// Acceptance probability for a candidate that is not a clear improvement.
///
/// The exponent is the shortfall against the required improvement, so the
/// probability stays below 1 for every rejected candidate and goes to 0 as
/// the temperature does.
pub fn acceptance_probability(old: f64, new: f64, temperature: f64, min_improvement: f64) -> f64 {
    if new >= old + min_improvement {
        return 1.0;
    }
    if temperature <= 0.0 {
        return 0.0;
    }
    let shortfall = (old + min_improvement - new).max(0.0);
    (-shortfall / temperature).exp().min(1.0)
}

pub fn accept<R: Rng>(old: f64, new: f64, temperature: f64, min_improvement: f64, rng: &mut R) -> bool {
    if new >= old + min_improvement {
        return true;
    }
    let p = acceptance_probability(old, new, temperature, min_improvement);
    p > 0.0 && rng.random_bool(p)
}

/// Geometric cooling applied after each accepted step.
pub fn cool(temperature: f64, decay: f64, floor: f64) -> f64 {
    (temperature * decay).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::validate_args;
    use crate::value::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seed(args: Vec<ValueIR>) -> SeedTuple {
        SeedTuple {
            group_id: "g".into(),
            rng_seed: 0,
            args,
        }
    }

    #[test]
    fn zero_temperature_noise_is_identity() {
        let s = seed(vec![ValueIR::Tensor(Tensor::real(DType::F64, vec![3], vec![0.1, 0.2, 0.3]))]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (m, class) = mutate(&s, &[ArgRole::Tensor], None, &mut rng, 0.0, 1.0);
            if class == Some(MutationClass::TensorNoise) {
                assert_eq!(m, s);
            }
        }
    }

    #[test]
    fn flag_toggle() {
        let s = seed(vec![ValueIR::Flag(true)]);
        let (m, class) = mutate(&s, &[ArgRole::Flag], None, &mut ChaCha8Rng::seed_from_u64(1), 0.1, 1.0);
        assert_eq!(class, Some(MutationClass::FlagToggle));
        assert_eq!(m.args[0], ValueIR::Flag(false));
    }

    #[test]
    fn index_nudge_stays_in_rank() {
        let t = ValueIR::Tensor(Tensor::real(DType::F32, vec![2, 2, 2], vec![0.0; 8]));
        let s = seed(vec![t, ValueIR::IndexScalar(0)]);
        let roles = [ArgRole::Tensor, ArgRole::Index];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = [false; 3];
        for _ in 0..300 {
            let (m, class) = mutate(&s, &roles, None, &mut rng, 0.1, 1.0);
            validate_args(&roles, &m.args).unwrap();
            if class == Some(MutationClass::ScalarNudge) {
                let ValueIR::IndexScalar(a) = m.args[1] else { panic!() };
                assert!((0..3).contains(&a));
                seen[a as usize] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn value_nudge_stays_in_unit_interval() {
        let s = seed(vec![ValueIR::ValueScalar(0.8), ValueIR::ValueScalar(1.0)]);
        let roles = [ArgRole::Value, ArgRole::IntValue];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cur = s;
        for _ in 0..200 {
            cur = mutate(&cur, &roles, None, &mut rng, 0.1, 1.0).0;
            let ValueIR::ValueScalar(v) = cur.args[0] else { panic!() };
            assert!((0.0..=1.0).contains(&v));
            let ValueIR::ValueScalar(k) = cur.args[1] else { panic!() };
            assert!(k == 0.0 || k == 1.0);
        }
    }

    #[test]
    fn acceptance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(accept(0.10, 0.15, 0.1, 0.001, &mut rng));
        let p = acceptance_probability(0.10, 0.1005, 0.1, 0.001);
        assert!(p < 1.0 && p > 0.0);
        assert!(acceptance_probability(0.5, 0.1, 1e-9, 0.001) < 1e-100);
        assert_eq!(acceptance_probability(0.5, 0.1, 0.0, 0.001), 0.0);
        assert_eq!(cool(0.1, 0.95, 1e-3), 0.095);
        assert_eq!(cool(1e-3, 0.95, 1e-3), 1e-3);
    }

    #[test]
    fn guided_noise_follows_deviation() {
        let t = ValueIR::Tensor(Tensor::real(DType::F64, vec![2], vec![0.5, 0.5]));
        let s = seed(vec![t]);
        let dev = DeviationVector {
            backends: vec!["a".into(), "b".into()],
            deviations: vec![vec![0.0, 1.0], vec![0.0, -1.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (m, class) = mutate(&s, &[ArgRole::Tensor], Some(&dev), &mut rng, 0.1, 1.0);
            if class == Some(MutationClass::TensorNoise) {
                let ValueIR::Tensor(t) = &m.args[0] else { panic!() };
                let TensorData::Real(v) = &t.data else { panic!() };
                assert_eq!(v[0], 0.5);
                assert_ne!(v[1], 0.5);
            }
        }
    }

    #[test]
    fn noise_keeps_edge_elements() {
        let data = vec![-0.0, f32::from_bits(1) as f64, f64::NAN, 1e38, 0.25];
        let s = seed(vec![ValueIR::Tensor(Tensor::real(DType::F32, vec![5], data))]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (m, class) = mutate(&s, &[ArgRole::Tensor], None, &mut rng, 0.1, 1.0);
            if class == Some(MutationClass::TensorNoise) {
                let ValueIR::Tensor(t) = &m.args[0] else { panic!() };
                let TensorData::Real(v) = &t.data else { panic!() };
                assert!(v[0] == 0.0 && v[0].is_sign_negative());
                assert_eq!(v[1], 1.401298464324817e-45);
                assert!(v[2].is_nan());
                assert_eq!(v[3], 1e38f32 as f64);
                assert_ne!(v[4], 0.25);
            }
        }
    }
}
