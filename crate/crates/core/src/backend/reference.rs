//! In-process reference backends.
//!
//! Two variants share one small op set and differ in exactly two places:
//! `FlushTiesToZero` treats subnormal keys as zero when sorting, and maps
//! `angle(NaN + NaN·i)` to `0.0`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, Invocation};
use crate::corpus::normalize_api_name;
use crate::value::{DType, Tensor, TensorData, ValueIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Stable,
    #[serde(rename = "ftz")]
    FlushTiesToZero,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stable" => Ok(Variant::Stable),
            "ftz" => Ok(Variant::FlushTiesToZero),
            _ => Err(format!("unknown reference variant `{s}`")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Stable => "stable",
            Variant::FlushTiesToZero => "ftz",
        })
    }
}

pub const OPS: &[&str] = &[
    "add", "angle", "argsort", "clamp", "matmul", "mean", "mul", "relu", "softmax", "sum",
];

const ALIASES: &[(&str, &str)] = &[
    ("clip", "clamp"),
    ("multiply", "mul"),
    ("reduce_mean", "mean"),
    ("reduce_sum", "sum"),
];

/// Maps an API name onto the op it runs, if any.
pub fn resolve_op(api: &str) -> Option<&'static str> {
    let name = normalize_api_name(api);
    if let Some(op) = OPS.iter().find(|op| **op == name) {
        return Some(op);
    }
    ALIASES.iter().find(|(a, _)| *a == name).map(|(_, op)| *op)
}

#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    variant: Variant,
}

impl ReferenceBackend {
    pub fn new(variant: Variant) -> Self {
        ReferenceBackend { variant }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn run(&self, api: &str, args: &[ValueIR]) -> Result<Vec<ValueIR>, String> {
        let op = resolve_op(api).ok_or_else(|| format!("unsupported api `{api}`"))?;
        let a = Args::split(args)?;
        let out = match op {
            "argsort" => argsort(a.tensor(0)?, a.axis(0, -1), self.variant)?,
            "add" => binary(a.tensor(0)?, &a.other()?, |x, y| x + y)?,
            "mul" => binary(a.tensor(0)?, &a.other()?, |x, y| x * y)?,
            "matmul" => matmul(a.tensor(0)?, a.tensor(1)?)?,
            "relu" => unary(a.tensor(0)?, |x| if x > 0.0 || x.is_nan() { x } else { 0.0 })?,
            "softmax" => softmax(a.tensor(0)?, a.axis(0, -1))?,
            "mean" => reduce(a.tensor(0)?, a.axis(0, -1), a.flag(0), Reduction::Mean)?,
            "sum" => reduce(a.tensor(0)?, a.axis(0, -1), a.flag(0), Reduction::Sum)?,
            "angle" => angle(a.tensor(0)?, self.variant)?,
            "clamp" => {
                let lo = a.value(0)?;
                let hi = a.value(1)?;
                unary(a.tensor(0)?, |x| if x.is_nan() { x } else { x.max(lo).min(hi) })?
            }
            _ => unreachable!("op table and dispatch disagree"),
        };
        Ok(vec![ValueIR::Tensor(out)])
    }
}

impl Backend for ReferenceBackend {
    fn version(&self) -> String {
        format!("reference-{} {}", self.variant, env!("CARGO_PKG_VERSION"))
    }

    fn manifest(&self) -> Vec<String> {
        OPS.iter()
            .chain(ALIASES.iter().map(|(a, _)| a))
            .map(|s| s.to_string())
            .collect()
    }

    fn invoke(&mut self, api: &str, args: &[ValueIR], _timeout: Duration) -> Invocation {
        match self.run(api, args) {
            Ok(out) => Invocation::Ok(out),
            Err(e) => Invocation::Error(e),
        }
    }
}

/// Arguments grouped by kind, each group in call order.
struct Args<'a> {
    tensors: Vec<&'a Tensor>,
    indices: Vec<i64>,
    values: Vec<f64>,
    flags: Vec<bool>,
}

impl<'a> Args<'a> {
    fn split(args: &'a [ValueIR]) -> Result<Self, String> {
        let mut a = Args {
            tensors: Vec::new(),
            indices: Vec::new(),
            values: Vec::new(),
            flags: Vec::new(),
        };
        for v in args {
            match v {
                ValueIR::Tensor(t) => {
                    t.check()?;
                    a.tensors.push(t)
                }
                ValueIR::IndexScalar(i) => a.indices.push(*i),
                ValueIR::ValueScalar(x) => a.values.push(*x),
                ValueIR::Flag(b) => a.flags.push(*b),
                ValueIR::Shape(_) => return Err("shape arguments are not supported".into()),
            }
        }
        Ok(a)
    }

    fn tensor(&self, i: usize) -> Result<&'a Tensor, String> {
        self.tensors
            .get(i)
            .copied()
            .ok_or_else(|| format!("missing tensor argument {i}"))
    }

    fn value(&self, i: usize) -> Result<f64, String> {
        self.values
            .get(i)
            .copied()
            .ok_or_else(|| format!("missing scalar argument {i}"))
    }

    fn axis(&self, i: usize, default: i64) -> i64 {
        self.indices.get(i).copied().unwrap_or(default)
    }

    fn flag(&self, i: usize) -> bool {
        self.flags.get(i).copied().unwrap_or(false)
    }

    /// Second operand of a binary op: a tensor, or a value scalar.
    fn other(&self) -> Result<Operand<'a>, String> {
        if let Some(t) = self.tensors.get(1) {
            return Ok(Operand::Tensor(t));
        }
        Ok(Operand::Scalar(self.value(0)?))
    }
}

enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

fn real_data(t: &Tensor) -> Result<&[f64], String> {
    match &t.data {
        TensorData::Real(v) => Ok(v),
        _ => Err(format!("unsupported dtype {}", t.dtype)),
    }
}

fn norm_axis(axis: i64, rank: usize) -> Result<usize, String> {
    let r = rank as i64;
    if rank == 0 || axis < -r || axis >= r {
        return Err(format!("axis {axis} out of range for rank {rank}"));
    }
    Ok(if axis < 0 { axis + r } else { axis } as usize)
}

/// `(outer, len, inner)` for iterating lanes along `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor, String> {
    let x = real_data(t)?;
    Ok(Tensor::real(t.dtype, t.shape.clone(), x.iter().map(|&v| f(v)).collect()))
}

fn binary(t: &Tensor, other: &Operand, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, String> {
    let x = real_data(t)?;
    match other {
        Operand::Scalar(s) => Ok(Tensor::real(
            t.dtype,
            t.shape.clone(),
            x.iter().map(|&v| f(v, *s)).collect(),
        )),
        Operand::Tensor(o) => {
            let y = real_data(o)?;
            let dtype = if t.dtype == DType::F64 || o.dtype == DType::F64 {
                DType::F64
            } else {
                DType::F32
            };
            if y.len() == 1 {
                return Ok(Tensor::real(dtype, t.shape.clone(), x.iter().map(|&v| f(v, y[0])).collect()));
            }
            if t.shape != o.shape {
                return Err(format!("shape mismatch {:?} vs {:?}", t.shape, o.shape));
            }
            Ok(Tensor::real(
                dtype,
                t.shape.clone(),
                x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect(),
            ))
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    let x = real_data(a)?;
    let y = real_data(b)?;
    if a.rank() == 0 || b.rank() == 0 {
        return Err("matmul needs tensors of rank >= 1".into());
    }
    let dtype = if a.dtype == DType::F64 || b.dtype == DType::F64 {
        DType::F64
    } else {
        DType::F32
    };
    // Promote vectors to matrices, remembering which axes to drop afterwards.
    let mut ashape = a.shape.clone();
    let mut bshape = b.shape.clone();
    let a_vec = ashape.len() == 1;
    let b_vec = bshape.len() == 1;
    if a_vec {
        ashape.insert(0, 1);
    }
    if b_vec {
        bshape.push(1);
    }
    let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    let (k2, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
    if k != k2 {
        return Err(format!("matmul inner dimensions differ: {k} vs {k2}"));
    }
    let abatch = &ashape[..ashape.len() - 2];
    let bbatch = &bshape[..bshape.len() - 2];
    let batch: Vec<usize> = if abatch.is_empty() {
        bbatch.to_vec()
    } else if bbatch.is_empty() || abatch == bbatch {
        abatch.to_vec()
    } else {
        return Err(format!("matmul batch dimensions differ: {abatch:?} vs {bbatch:?}"));
    };
    let nb: usize = batch.iter().product();
    let astride = if abatch.is_empty() { 0 } else { m * k };
    let bstride = if bbatch.is_empty() { 0 } else { k * n };
    let mut out = Vec::with_capacity(nb * m * n);
    for bi in 0..nb {
        let ao = bi * astride;
        let bo = bi * bstride;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += x[ao + i * k + p] * y[bo + p * n + j];
                }
                out.push(acc);
            }
        }
    }
    let mut shape = batch;
    if !a_vec {
        shape.push(m);
    }
    if !b_vec {
        shape.push(n);
    }
    Ok(Tensor::real(dtype, shape, out))
}

/// Total order used for sorting keys: NaN sorts last, `-0.0 == 0.0`.
fn key_cmp(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => a.partial_cmp(&b).unwrap(),
    }
}

fn argsort(t: &Tensor, axis: i64, variant: Variant) -> Result<Tensor, String> {
    let x = real_data(t)?;
    let axis = norm_axis(axis, t.rank())?;
    let min_normal = t.dtype.min_normal();
    let key = |v: f64| match variant {
        Variant::FlushTiesToZero if v != 0.0 && v.abs() < min_normal => 0.0,
        _ => v,
    };
    let (outer, len, inner) = lanes(&t.shape, axis);
    let mut out = vec![0i64; x.len()];
    let mut idx: Vec<usize> = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            idx.clear();
            idx.extend(0..len);
            idx.sort_by(|&p, &q| key_cmp(key(x[at(p)]), key(x[at(q)])));
            for (k, &src) in idx.iter().enumerate() {
                out[at(k)] = src as i64;
            }
        }
    }
    Ok(Tensor::int(t.shape.clone(), out))
}

fn softmax(t: &Tensor, axis: i64) -> Result<Tensor, String> {
    let x = real_data(t)?;
    let axis = norm_axis(axis, t.rank())?;
    let (outer, len, inner) = lanes(&t.shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, |m, v| {
                if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) }
            });
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Ok(Tensor::real(t.dtype, t.shape.clone(), out))
}

#[derive(Clone, Copy)]
enum Reduction {
    Sum,
    Mean,
}

fn reduce(t: &Tensor, axis: i64, keepdim: bool, how: Reduction) -> Result<Tensor, String> {
    let x = real_data(t)?;
    let axis = norm_axis(axis, t.rank())?;
    let (outer, len, inner) = lanes(&t.shape, axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..len).map(|k| x[o * len * inner + k * inner + i]).sum();
            out.push(match how {
                Reduction::Sum => s,
                Reduction::Mean => s / len as f64,
            });
        }
    }
    let mut shape = t.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Tensor::real(t.dtype, shape, out))
}

fn angle(t: &Tensor, variant: Variant) -> Result<Tensor, String> {
    match &t.data {
        TensorData::Complex(v) => {
            let out = v
                .iter()
                .map(|&(re, im)| {
                    if variant == Variant::FlushTiesToZero && re.is_nan() && im.is_nan() {
                        0.0
                    } else {
                        im.atan2(re)
                    }
                })
                .collect();
            Ok(Tensor::real(DType::F32, t.shape.clone(), out))
        }
        TensorData::Real(v) => Ok(Tensor::real(
            t.dtype,
            t.shape.clone(),
            v.iter().map(|&x| 0f64.atan2(x)).collect(),
        )),
        _ => Err(format!("unsupported dtype {}", t.dtype)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32t(data: &[f64]) -> ValueIR {
        ValueIR::Tensor(Tensor::real(DType::F32, vec![data.len()], data.to_vec()))
    }

    fn ints(out: &[ValueIR]) -> Vec<i64> {
        match &out[0].as_tensor().unwrap().data {
            TensorData::Int(v) => v.clone(),
            d => panic!("not ints: {d:?}"),
        }
    }

    fn reals(out: &[ValueIR]) -> Vec<f64> {
        match &out[0].as_tensor().unwrap().data {
            TensorData::Real(v) => v.clone(),
            d => panic!("not reals: {d:?}"),
        }
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn argsort_subnormal_ties() {
        let x = f32t(&[
            -0.0,
            1.401298464324817e-45,
            1.100000023841858,
            -0.0,
            5.960464477539063e-08,
            -2.0000000135803223,
            1000000.0,
            722801.375,
            0.0,
            -1.100000023841858,
        ]);
        let args = [x, ValueIR::IndexScalar(0)];
        let stable = ReferenceBackend::new(Variant::Stable).run("torch.argsort", &args).unwrap();
        let ftz = ReferenceBackend::new(Variant::FlushTiesToZero)
            .run("tf.argsort", &args)
            .unwrap();
        assert_eq!(ints(&stable), vec![5, 9, 0, 3, 8, 1, 4, 2, 7, 6]);
        assert_eq!(ints(&ftz), vec![5, 9, 0, 1, 3, 8, 4, 2, 7, 6]);
    }

    #[test]
    fn argsort_inner_axis() {
        let t = Tensor::real(DType::F64, vec![2, 3], vec![3.0, 1.0, 2.0, 0.0, -1.0, 5.0]);
        let out = ReferenceBackend::new(Variant::Stable)
            .run("argsort", &[ValueIR::Tensor(t.clone()), ValueIR::IndexScalar(1)])
            .unwrap();
        assert_eq!(ints(&out), vec![1, 2, 0, 1, 0, 2]);
        let out = ReferenceBackend::new(Variant::Stable)
            .run("argsort", &[ValueIR::Tensor(t), ValueIR::IndexScalar(0)])
            .unwrap();
        assert_eq!(ints(&out), vec![1, 1, 0, 0, 0, 1]);
    }

    #[test]
    fn angle_of_nan_pair() {
        let x = ValueIR::Tensor(Tensor::complex(vec![1], vec![(f64::NAN, f64::NAN)]));
        let s = ReferenceBackend::new(Variant::Stable).run("torch.angle", std::slice::from_ref(&x)).unwrap();
        let f = ReferenceBackend::new(Variant::FlushTiesToZero).run("tf.math.angle", &[x]).unwrap();
        assert!(reals(&s)[0].is_nan());
        assert_eq!(reals(&f)[0], 0.0);
        assert_eq!(s[0].as_tensor().unwrap().dtype, DType::F32);
    }

    #[test]
    fn matmul_shapes() {
        let a = Tensor::real(DType::F64, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::real(DType::F64, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let r = ReferenceBackend::new(Variant::Stable);
        let out = r
            .run("matmul", &[ValueIR::Tensor(a.clone()), ValueIR::Tensor(b)])
            .unwrap();
        assert_eq!(reals(&out), vec![19.0, 22.0, 43.0, 50.0]);
        let v = Tensor::real(DType::F64, vec![2], vec![1.0, 1.0]);
        let out = r.run("matmul", &[ValueIR::Tensor(a), ValueIR::Tensor(v.clone())]).unwrap();
        assert_eq!(out[0].as_tensor().unwrap().shape, vec![2]);
        assert_eq!(reals(&out), vec![3.0, 7.0]);
        let out = r.run("matmul", &[ValueIR::Tensor(v.clone()), ValueIR::Tensor(v)]).unwrap();
        assert_eq!(out[0].as_tensor().unwrap().shape, Vec::<usize>::new());
        assert_eq!(reals(&out), vec![2.0]);
        let bad = Tensor::real(DType::F64, vec![3], vec![1.0; 3]);
        let sq = Tensor::real(DType::F64, vec![2, 2], vec![1.0; 4]);
        assert!(r.run("matmul", &[ValueIR::Tensor(sq), ValueIR::Tensor(bad)]).is_err());
    }

    #[test]
    fn reductions_and_softmax() {
        let t = Tensor::real(DType::F64, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let r = ReferenceBackend::new(Variant::Stable);
        let s = r.run("tf.math.reduce_sum", &[ValueIR::Tensor(t.clone()), ValueIR::IndexScalar(0)]).unwrap();
        assert_eq!(reals(&s), vec![4.0, 6.0]);
        let m = r
            .run("mean", &[ValueIR::Tensor(t.clone()), ValueIR::IndexScalar(-1), ValueIR::Flag(true)])
            .unwrap();
        assert_eq!(reals(&m), vec![1.5, 3.5]);
        assert_eq!(m[0].as_tensor().unwrap().shape, vec![2, 1]);
        let p = r.run("softmax", &[ValueIR::Tensor(t), ValueIR::IndexScalar(1)]).unwrap();
        let p = reals(&p);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        assert!(p[1] > p[0]);
    }

    #[test]
    fn elementwise() {
        let r = ReferenceBackend::new(Variant::Stable);
        let x = f32t(&[-1.0, 0.5, f64::NAN]);
        assert_eq!(reals(&r.run("relu", std::slice::from_ref(&x)).unwrap())[..2], [0.0, 0.5]);
        let c = r
            .run("tf.clip_by_value", &[x.clone(), ValueIR::ValueScalar(0.0), ValueIR::ValueScalar(0.25)])
            .is_err();
        assert!(c, "clip_by_value is not an alias");
        let c = reals(&r.run("clip", &[x.clone(), ValueIR::ValueScalar(0.0), ValueIR::ValueScalar(0.25)]).unwrap());
        assert_eq!(c[..2], [0.0, 0.25]);
        assert!(c[2].is_nan());
        let a = reals(&r.run("add", &[x.clone(), ValueIR::ValueScalar(1.0)]).unwrap());
        assert_eq!(a[..2], [0.0, 1.5]);
        let m = reals(&r.run("mul", &[x.clone(), x]).unwrap());
        assert_eq!(m[..2], [1.0, 0.25]);
    }

    #[test]
    fn bad_axis_is_error() {
        let r = ReferenceBackend::new(Variant::Stable);
        assert!(r.run("argsort", &[f32t(&[1.0]), ValueIR::IndexScalar(1)]).is_err());
        assert!(r.run("argsort", &[f32t(&[1.0]), ValueIR::IndexScalar(-1)]).is_ok());
    }
}
