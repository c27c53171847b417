//! Source-neutral values passed to every backend, and their JSON form.
//!
//! Real tensor data is held as `f64` regardless of dtype; `f32` tensors
//! only ever hold `f32`-representable values. Complex data is stored as
//! `(re, im)` pairs.
//!
//! JSON form: `{kind, dtype?, shape?, data?, value?}`. Non-finite reals are
//! written as the strings `"nan"`, `"inf"` and `"-inf"`; complex elements
//! as `[re, im]`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Number, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    C64,
    I64,
    Bool,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::C64 => "c64",
            DType::I64 => "i64",
            DType::Bool => "bool",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        Some(match s {
            "f32" => DType::F32,
            "f64" => DType::F64,
            "c64" => DType::C64,
            "i64" => DType::I64,
            "bool" => DType::Bool,
            _ => return None,
        })
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    /// Rounds a value to this dtype's component precision.
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 | DType::C64 => v as f32 as f64,
            _ => v,
        }
    }

    /// Smallest positive subnormal of the component type.
    pub fn min_subnormal(self) -> f64 {
        match self {
            DType::F32 | DType::C64 => f32::from_bits(1) as f64,
            _ => f64::from_bits(1),
        }
    }

    /// Smallest positive normal of the component type.
    pub fn min_normal(self) -> f64 {
        match self {
            DType::F32 | DType::C64 => f32::MIN_POSITIVE as f64,
            _ => f64::MIN_POSITIVE,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(Vec<f64>),
    Complex(Vec<(f64, f64)>),
    Int(Vec<i64>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Real(v) => v.len(),
            TensorData::Complex(v) => v.len(),
            TensorData::Int(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn real(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert!(dtype.is_float());
        let data = data.into_iter().map(|v| dtype.round(v)).collect();
        Tensor {
            dtype,
            shape,
            data: TensorData::Real(data),
        }
    }

    pub fn complex(shape: Vec<usize>, data: Vec<(f64, f64)>) -> Tensor {
        let data = data
            .into_iter()
            .map(|(re, im)| (DType::C64.round(re), DType::C64.round(im)))
            .collect();
        Tensor {
            dtype: DType::C64,
            shape,
            data: TensorData::Complex(data),
        }
    }

    pub fn int(shape: Vec<usize>, data: Vec<i64>) -> Tensor {
        Tensor {
            dtype: DType::I64,
            shape,
            data: TensorData::Int(data),
        }
    }

    pub fn bool(shape: Vec<usize>, data: Vec<bool>) -> Tensor {
        Tensor {
            dtype: DType::Bool,
            shape,
            data: TensorData::Bool(data),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn has_nan(&self) -> bool {
        match &self.data {
            TensorData::Real(v) => v.iter().any(|x| x.is_nan()),
            TensorData::Complex(v) => v.iter().any(|(re, im)| re.is_nan() || im.is_nan()),
            _ => false,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        let kind_ok = matches!(
            (&self.data, self.dtype),
            (TensorData::Real(_), DType::F32 | DType::F64)
                | (TensorData::Complex(_), DType::C64)
                | (TensorData::Int(_), DType::I64)
                | (TensorData::Bool(_), DType::Bool)
        );
        if !kind_ok {
            return Err(format!("data does not match dtype {}", self.dtype));
        }
        if self.data.len() != self.numel() {
            return Err(format!(
                "data length {} does not match shape {:?}",
                self.data.len(),
                self.shape
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValueIR {
    Tensor(Tensor),
    ValueScalar(f64),
    IndexScalar(i64),
    Shape(Vec<i64>),
    Flag(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Tensor,
    ValueScalar,
    IndexScalar,
    Shape,
    Flag,
}

impl ValueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::Tensor => "tensor",
            ValueKind::ValueScalar => "value_scalar",
            ValueKind::IndexScalar => "index_scalar",
            ValueKind::Shape => "shape",
            ValueKind::Flag => "flag",
        }
    }
}

impl ValueIR {
    pub fn kind(&self) -> ValueKind {
        match self {
            ValueIR::Tensor(_) => ValueKind::Tensor,
            ValueIR::ValueScalar(_) => ValueKind::ValueScalar,
            ValueIR::IndexScalar(_) => ValueKind::IndexScalar,
            ValueIR::Shape(_) => ValueKind::Shape,
            ValueIR::Flag(_) => ValueKind::Flag,
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            ValueIR::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn has_nan(&self) -> bool {
        match self {
            ValueIR::Tensor(t) => t.has_nan(),
            ValueIR::ValueScalar(v) => v.is_nan(),
            _ => false,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            ValueIR::Tensor(t) => {
                let data: Vec<Value> = match &t.data {
                    TensorData::Real(v) => v.iter().map(|x| real_to_json(*x)).collect(),
                    TensorData::Complex(v) => v
                        .iter()
                        .map(|(re, im)| json!([real_to_json(*re), real_to_json(*im)]))
                        .collect(),
                    TensorData::Int(v) => v.iter().map(|x| json!(x)).collect(),
                    TensorData::Bool(v) => v.iter().map(|x| json!(x)).collect(),
                };
                json!({"kind": "tensor", "dtype": t.dtype.as_str(), "shape": t.shape, "data": data})
            }
            ValueIR::ValueScalar(v) => json!({"kind": "value_scalar", "value": real_to_json(*v)}),
            ValueIR::IndexScalar(v) => json!({"kind": "index_scalar", "value": v}),
            ValueIR::Shape(v) => json!({"kind": "shape", "value": v}),
            ValueIR::Flag(v) => json!({"kind": "flag", "value": v}),
        }
    }

    pub fn from_json(value: &Value) -> Result<ValueIR, String> {
        let obj = value.as_object().ok_or("value is not an object")?;
        let kind = obj
            .get("kind")
            .and_then(Value::as_str)
            .ok_or("missing `kind`")?;
        let field = |name: &str| obj.get(name).ok_or_else(|| format!("{kind}: missing `{name}`"));
        match kind {
            "tensor" => {
                let dtype = field("dtype")?
                    .as_str()
                    .and_then(DType::parse)
                    .ok_or("tensor: bad `dtype`")?;
                let shape = field("shape")?
                    .as_array()
                    .ok_or("tensor: `shape` is not an array")?
                    .iter()
                    .map(|d| d.as_u64().map(|d| d as usize))
                    .collect::<Option<Vec<_>>>()
                    .ok_or("tensor: bad shape entry")?;
                let items = field("data")?
                    .as_array()
                    .ok_or("tensor: `data` is not an array")?;
                let data = match dtype {
                    DType::F32 | DType::F64 => TensorData::Real(
                        items
                            .iter()
                            .map(|x| real_from_json(x).map(|v| dtype.round(v)))
                            .collect::<Result<_, _>>()?,
                    ),
                    DType::C64 => TensorData::Complex(
                        items
                            .iter()
                            .map(|x| match x.as_array().map(Vec::as_slice) {
                                Some([re, im]) => Ok((
                                    dtype.round(real_from_json(re)?),
                                    dtype.round(real_from_json(im)?),
                                )),
                                _ => Err("complex element must be [re, im]".to_string()),
                            })
                            .collect::<Result<_, _>>()?,
                    ),
                    DType::I64 => TensorData::Int(
                        items
                            .iter()
                            .map(|x| x.as_i64().ok_or("i64 element is not an integer"))
                            .collect::<Result<_, _>>()?,
                    ),
                    DType::Bool => TensorData::Bool(
                        items
                            .iter()
                            .map(|x| x.as_bool().ok_or("bool element is not a boolean"))
                            .collect::<Result<_, _>>()?,
                    ),
                };
                let t = Tensor { dtype, shape, data };
                t.check()?;
                Ok(ValueIR::Tensor(t))
            }
            "value_scalar" => Ok(ValueIR::ValueScalar(real_from_json(field("value")?)?)),
            "index_scalar" => Ok(ValueIR::IndexScalar(
                field("value")?
                    .as_i64()
                    .ok_or("index_scalar: not an integer")?,
            )),
            "shape" => Ok(ValueIR::Shape(
                field("value")?
                    .as_array()
                    .ok_or("shape: not an array")?
                    .iter()
                    .map(Value::as_i64)
                    .collect::<Option<_>>()
                    .ok_or("shape: non-integer entry")?,
            )),
            "flag" => Ok(ValueIR::Flag(
                field("value")?.as_bool().ok_or("flag: not a boolean")?,
            )),
            other => Err(format!("unknown kind `{other}`")),
        }
    }
}

pub fn real_to_json(v: f64) -> Value {
    if v.is_nan() {
        Value::String("nan".into())
    } else if v == f64::INFINITY {
        Value::String("inf".into())
    } else if v == f64::NEG_INFINITY {
        Value::String("-inf".into())
    } else {
        Value::Number(Number::from_f64(v).expect("finite"))
    }
}

pub fn real_from_json(v: &Value) -> Result<f64, String> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| format!("bad number {n}")),
        Value::String(s) => match s.as_str() {
            "nan" | "NaN" => Ok(f64::NAN),
            "inf" | "Infinity" => Ok(f64::INFINITY),
            "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
            other => Err(format!("bad real `{other}`")),
        },
        other => Err(format!("expected a real, found {other}")),
    }
}

impl Serialize for ValueIR {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ValueIR {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        ValueIR::from_json(&v).map_err(serde::de::Error::custom)
    }
}

/// A full argument tuple in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTuple {
    pub group_id: String,
    pub rng_seed: u64,
    pub args: Vec<ValueIR>,
}

impl SeedTuple {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("seed tuples always serialize")
    }
}

/// Coarse classes of unusual values present in a tuple.
pub fn edge_classes(args: &[ValueIR]) -> Vec<&'static str> {
    fn class_of(x: f64, dtype: DType) -> Option<&'static str> {
        if x.is_nan() {
            Some("nan")
        } else if x.is_infinite() {
            Some("inf")
        } else if x == 0.0 && x.is_sign_negative() {
            Some("neg_zero")
        } else if x != 0.0 && x.abs() < dtype.min_normal() {
            Some("subnormal")
        } else if x.abs() >= 1e30 {
            Some("huge")
        } else {
            None
        }
    }
    let mut classes = Vec::new();
    for arg in args {
        if let ValueIR::Tensor(t) = arg {
            if t.numel() == 0 {
                classes.push("empty");
            }
            match &t.data {
                TensorData::Real(v) => classes.extend(v.iter().filter_map(|x| class_of(*x, t.dtype))),
                TensorData::Complex(v) => classes.extend(v.iter().flat_map(|(re, im)| {
                    [class_of(*re, t.dtype), class_of(*im, t.dtype)].into_iter().flatten()
                })),
                _ => {}
            }
        }
    }
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Writes one seed tuple per line.
pub fn write_seed_dump<W: std::io::Write>(
    mut out: W,
    seeds: &[SeedTuple],
) -> std::io::Result<()> {
    for s in seeds {
        out.write_all(s.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
