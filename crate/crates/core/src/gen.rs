//! Seed generation for canonical signatures.
//!
//! Every tuple is a pure function of `(rng_seed, enumeration index,
//! signature, config)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::CanonicalParam;
use crate::corpus::AbstractType;
use crate::value::{DType, SeedTuple, Tensor, TensorData, ValueIR};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GenError {
    #[error("index scalar needs a tensor of rank >= 1")]
    RankZero,
    #[error("parameter `{name}` has type {ty}, which cannot be generated")]
    Unsupported { name: String, ty: AbstractType },
}

/// How a canonical parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArgRole {
    Tensor,
    /// Dimension index bounded by the rank of the first tensor.
    Index,
    /// Integer-valued tunable, stored as a rounded value scalar.
    IntValue,
    Value,
    Flag,
    /// Shape whose length matches the rank of the first tensor.
    Shape,
    /// Rank-0 complex tensor.
    ComplexScalar,
}

fn is_axis_name(name: &str) -> bool {
    name == "axis" || name.contains("dim") || name.contains("axis")
}

pub fn arg_role(p: &CanonicalParam) -> Result<ArgRole, GenError> {
    Ok(match p.abstract_type {
        AbstractType::Tensor => ArgRole::Tensor,
        AbstractType::Int if is_axis_name(&p.canonical_name) => ArgRole::Index,
        AbstractType::Int => ArgRole::IntValue,
        AbstractType::Float => ArgRole::Value,
        AbstractType::Bool => ArgRole::Flag,
        AbstractType::Shape => ArgRole::Shape,
        AbstractType::Complex => ArgRole::ComplexScalar,
        ty @ (AbstractType::String | AbstractType::Unknown) => {
            return Err(GenError::Unsupported {
                name: p.canonical_name.clone(),
                ty,
            })
        }
    })
}

pub fn arg_roles(signature: &[CanonicalParam]) -> Result<Vec<ArgRole>, GenError> {
    signature.iter().map(arg_role).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapePolicy {
    /// Every tensor argument shares one shape.
    Same,
    /// Shared shape whose last two dimensions are equal (batched matmul).
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeCaseConfig {
    /// Per-element replacement probability.
    pub element_prob: f64,
    /// Per-tuple probability of an empty-tensor or repeated-element variant.
    pub variant_prob: f64,
}

impl EdgeCaseConfig {
    pub const NONE: EdgeCaseConfig = EdgeCaseConfig {
        element_prob: 0.0,
        variant_prob: 0.0,
    };
}

impl Default for EdgeCaseConfig {
    fn default() -> Self {
        EdgeCaseConfig {
            element_prob: 0.05,
            variant_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub rank_min: usize,
    pub rank_max: usize,
    pub dim_min: usize,
    pub dim_max: usize,
    pub dtypes: Vec<DType>,
    /// Generate tensors as `c64` instead of a real dtype.
    pub complex: bool,
    pub shape_policy: ShapePolicy,
    pub edge: EdgeCaseConfig,
    /// Discrete parameters (flags, axes) are enumerated jointly when there
    /// are at most this many of them.
    pub combinatorial_max_params: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            rank_min: 1,
            rank_max: 4,
            dim_min: 1,
            dim_max: 6,
            dtypes: vec![DType::F32, DType::F64],
            complex: false,
            shape_policy: ShapePolicy::Same,
            edge: EdgeCaseConfig::default(),
            combinatorial_max_params: 2,
        }
    }
}

pub fn gen_shape_dims<R: Rng>(rng: &mut R, rank: usize, dim_min: usize, dim_max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(dim_min..=dim_max)).collect()
}

pub fn gen_data<R: Rng>(rng: &mut R, dtype: DType, numel: usize) -> TensorData {
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    match dtype {
        DType::F32 | DType::F64 => {
            TensorData::Real((0..numel).map(|_| dtype.round(normal())).collect())
        }
        DType::C64 => TensorData::Complex(
            (0..numel)
                .map(|_| (dtype.round(normal()), dtype.round(normal())))
                .collect(),
        ),
        DType::I64 => TensorData::Int((0..numel).map(|_| normal().round() as i64).collect()),
        DType::Bool => TensorData::Bool((0..numel).map(|_| normal() > 0.0).collect()),
    }
}

/// Tensor with rank drawn from `ranks`, each dimension from `dims`, and
/// standard-normal values.
pub fn gen_tensor<R: Rng>(
    rng: &mut R,
    ranks: std::ops::RangeInclusive<usize>,
    dims: std::ops::RangeInclusive<usize>,
    dtype: DType,
) -> ValueIR {
    let rank = rng.random_range(ranks);
    let shape = gen_shape_dims(rng, rank, *dims.start(), *dims.end());
    let numel = shape.iter().product();
    ValueIR::Tensor(Tensor {
        dtype,
        data: gen_data(rng, dtype, numel),
        shape,
    })
}

/// Uniform on `[0, 1]`.
pub fn gen_value_scalar<R: Rng>(rng: &mut R) -> ValueIR {
    ValueIR::ValueScalar(rng.random_range(0.0..=1.0))
}

pub fn gen_index_scalar<R: Rng>(rng: &mut R, rank: usize) -> Result<ValueIR, GenError> {
    if rank == 0 {
        return Err(GenError::RankZero);
    }
    Ok(ValueIR::IndexScalar(rng.random_range(0..rank) as i64))
}

pub fn gen_shape<R: Rng>(rng: &mut R, associated_rank: usize, dim_max: usize) -> ValueIR {
    ValueIR::Shape(
        (0..associated_rank)
            .map(|_| rng.random_range(1..=dim_max as i64))
            .collect(),
    )
}

/// Flag for the `index`-th tuple of an enumeration over `bit`.
pub fn gen_flag(index: u64, bit: u32) -> ValueIR {
    ValueIR::Flag((index >> bit) & 1 == 1)
}

/// Edge-case element values for a dtype.
pub fn edge_values(dtype: DType) -> [f64; 7] {
    [
        f64::NAN,
        f64::INFINITY,
        f64::NEG_INFINITY,
        -0.0,
        dtype.min_subnormal(),
        1e38,
        -1e38,
    ]
}

/// Rank of the first tensor argument, if any.
pub fn associated_rank(args: &[ValueIR]) -> Option<usize> {
    args.iter().find_map(|a| a.as_tensor().map(Tensor::rank))
}

#[derive(Debug, Clone)]
pub struct SeedGenerator {
    pub group_id: String,
    pub signature: Vec<CanonicalParam>,
    pub roles: Vec<ArgRole>,
    pub config: GenConfig,
}

impl SeedGenerator {
    pub fn new(
        group_id: impl Into<String>,
        signature: Vec<CanonicalParam>,
        config: GenConfig,
    ) -> Result<Self, GenError> {
        let roles = arg_roles(&signature)?;
        Ok(SeedGenerator {
            group_id: group_id.into(),
            signature,
            roles,
            config,
        })
    }

    /// Plain tuple without edge cases.
    pub fn generate(&self, rng_seed: u64, index: u64) -> SeedTuple {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let dtype = if cfg.complex {
            DType::C64
        } else {
            cfg.dtypes[rng.random_range(0..cfg.dtypes.len())]
        };
        let rank = rng.random_range(cfg.rank_min..=cfg.rank_max);
        let mut shape = gen_shape_dims(&mut rng, rank, cfg.dim_min, cfg.dim_max);
        if cfg.shape_policy == ShapePolicy::Square && rank >= 2 {
            shape[rank - 1] = shape[rank - 2];
        }
        let has_tensor = self.roles.contains(&ArgRole::Tensor);

        // discrete parameters: flags and axes
        let discrete: Vec<usize> = self
            .roles
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r, ArgRole::Flag | ArgRole::Index))
            .map(|(i, _)| i)
            .collect();
        let joint = discrete.len() <= cfg.combinatorial_max_params;
        let mut radix_rest = index;
        let mut flag_bit = 0u32;

        let mut args = Vec::with_capacity(self.roles.len());
        for (i, role) in self.roles.iter().enumerate() {
            let arg = match role {
                ArgRole::Tensor => {
                    let numel = shape.iter().product();
                    ValueIR::Tensor(Tensor {
                        dtype,
                        shape: shape.clone(),
                        data: gen_data(&mut rng, dtype, numel),
                    })
                }
                ArgRole::ComplexScalar => ValueIR::Tensor(Tensor {
                    dtype: DType::C64,
                    shape: vec![],
                    data: gen_data(&mut rng, DType::C64, 1),
                }),
                ArgRole::Value => gen_value_scalar(&mut rng),
                ArgRole::IntValue => ValueIR::ValueScalar(rng.random_range(0.0f64..=1.0).round()),
                ArgRole::Shape => gen_shape(&mut rng, if has_tensor { rank } else { rank.max(1) }, cfg.dim_max),
                ArgRole::Index => {
                    let domain = rank.max(1);
                    let draw = rng.random_range(0..domain);
                    if joint && discrete.contains(&i) {
                        let v = (radix_rest % domain as u64) as i64;
                        radix_rest /= domain as u64;
                        ValueIR::IndexScalar(v)
                    } else {
                        ValueIR::IndexScalar(draw as i64)
                    }
                }
                ArgRole::Flag => {
                    if joint {
                        let v = radix_rest % 2 == 1;
                        radix_rest /= 2;
                        ValueIR::Flag(v)
                    } else {
                        let v = gen_flag(index, flag_bit);
                        flag_bit += 1;
                        v
                    }
                }
            };
            args.push(arg);
        }
        SeedTuple {
            group_id: self.group_id.clone(),
            rng_seed,
            args,
        }
    }

    /// Tuple with edge cases injected per the config.
    pub fn fresh(&self, rng_seed: u64, index: u64) -> SeedTuple {
        let seed = self.generate(rng_seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x9e37_79b9_7f4a_7c15);
        inject_edge_cases(&seed, &mut rng, &self.config.edge)
    }

    pub fn validate(&self, seed: &SeedTuple) -> Result<(), String> {
        validate_args(&self.roles, &seed.args)
    }
}

/// Checks kinds, tensor consistency, axis bounds and shape lengths.
pub fn validate_args(roles: &[ArgRole], args: &[ValueIR]) -> Result<(), String> {
    if roles.len() != args.len() {
        return Err(format!("expected {} arguments, got {}", roles.len(), args.len()));
    }
    let rank = associated_rank(args);
    for (i, (role, arg)) in roles.iter().zip(args).enumerate() {
        let bad = |what: &str| Err(format!("argument {i}: {what}"));
        match (role, arg) {
            (ArgRole::Tensor, ValueIR::Tensor(t)) => t.check().or_else(|e| bad(&e))?,
            (ArgRole::ComplexScalar, ValueIR::Tensor(t)) => {
                t.check().or_else(|e| bad(&e))?;
                if t.dtype != DType::C64 {
                    return bad("expected a complex tensor");
                }
            }
            (ArgRole::Value | ArgRole::IntValue, ValueIR::ValueScalar(v)) => {
                if !(0.0..=1.0).contains(v) {
                    return bad("value scalar outside [0, 1]");
                }
            }
            (ArgRole::Index, ValueIR::IndexScalar(v)) => {
                let r = rank.unwrap_or(1) as i64;
                if *v < 0 || *v >= r.max(1) {
                    return bad(&format!("axis {v} out of range for rank {r}"));
                }
            }
            (ArgRole::Shape, ValueIR::Shape(s)) => {
                if let Some(r) = rank {
                    if s.len() != r {
                        return bad(&format!("shape length {} != tensor rank {r}", s.len()));
                    }
                }
                if s.iter().any(|d| *d < 0) {
                    return bad("negative dimension");
                }
            }
            (ArgRole::Flag, ValueIR::Flag(_)) => {}
            (role, arg) => {
                return bad(&format!("{:?} argument has kind {}", role, arg.kind().as_str()))
            }
        }
    }
    Ok(())
}

fn random_edge<R: Rng>(rng: &mut R, dtype: DType) -> f64 {
    let values = edge_values(dtype);
    values[rng.random_range(0..values.len())]
}

fn edge_complex<R: Rng>(rng: &mut R, (re, im): (f64, f64)) -> (f64, f64) {
    let v = random_edge(rng, DType::C64);
    match rng.random_range(0..3) {
        0 => (v, v),
        1 => (v, im),
        _ => (re, v),
    }
}

/// Replaces element `pos` of a float or complex tensor with an edge value,
/// or (one time in eight) with a copy of another element.
pub fn inject_one<R: Rng>(rng: &mut R, t: &mut Tensor, pos: usize) {
    let n = t.data.len();
    let repeat = n >= 2 && rng.random_range(0..8) == 0;
    let src = if repeat {
        let other = rng.random_range(0..n - 1);
        Some(if other >= pos { other + 1 } else { other })
    } else {
        None
    };
    let dtype = t.dtype;
    match &mut t.data {
        TensorData::Real(v) => {
            v[pos] = match src {
                Some(s) => v[s],
                None => random_edge(rng, dtype),
            }
        }
        TensorData::Complex(v) => {
            v[pos] = match src {
                Some(s) => v[s],
                None => edge_complex(rng, v[pos]),
            }
        }
        _ => {}
    }
}

/// Edge-case injection: element replacement plus empty-tensor and
/// repeated-element variants.
pub fn inject_edge_cases<R: Rng>(seed: &SeedTuple, rng: &mut R, cfg: &EdgeCaseConfig) -> SeedTuple {
    let mut out = seed.clone();
    if cfg.variant_prob > 0.0 && rng.random_bool(cfg.variant_prob.min(1.0)) {
        if rng.random_bool(0.5) {
            for arg in &mut out.args {
                if let ValueIR::Tensor(t) = arg {
                    if t.rank() > 0 {
                        t.shape.iter_mut().for_each(|d| *d = 0);
                        t.data = match t.data {
                            TensorData::Real(_) => TensorData::Real(vec![]),
                            TensorData::Complex(_) => TensorData::Complex(vec![]),
                            TensorData::Int(_) => TensorData::Int(vec![]),
                            TensorData::Bool(_) => TensorData::Bool(vec![]),
                        };
                    }
                }
            }
        } else {
            let candidates: Vec<usize> = out
                .args
                .iter()
                .enumerate()
                .filter(|(_, a)| a.as_tensor().is_some_and(|t| t.data.len() >= 2))
                .map(|(i, _)| i)
                .collect();
            if !candidates.is_empty() {
                let idx = candidates[rng.random_range(0..candidates.len())];
                if let ValueIR::Tensor(t) = &mut out.args[idx] {
                    repeat_elements(rng, t);
                }
            }
        }
    }
    if cfg.element_prob > 0.0 {
        let p = cfg.element_prob.min(1.0);
        for arg in &mut out.args {
            if let ValueIR::Tensor(t) = arg {
                let dtype = t.dtype;
                match &mut t.data {
                    TensorData::Real(v) => {
                        for x in v.iter_mut() {
                            if rng.random_bool(p) {
                                *x = random_edge(rng, dtype);
                            }
                        }
                    }
                    TensorData::Complex(v) => {
                        for x in v.iter_mut() {
                            if rng.random_bool(p) {
                                *x = edge_complex(rng, *x);
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    out
}

/// Copies one element's value over a random half (at least two) of the
/// positions.
fn repeat_elements<R: Rng>(rng: &mut R, t: &mut Tensor) {
    let n = t.data.len();
    let src = rng.random_range(0..n);
    let count = (n / 2).max(2);
    let mut positions: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = rng.random_range(i..n);
        positions.swap(i, j);
    }
    match &mut t.data {
        TensorData::Real(v) => {
            let val = v[src];
            positions[..count].iter().for_each(|&p| v[p] = val);
        }
        TensorData::Complex(v) => {
            let val = v[src];
            positions[..count].iter().for_each(|&p| v[p] = val);
        }
        TensorData::Int(v) => {
            let val = v[src];
            positions[..count].iter().for_each(|&p| v[p] = val);
        }
        TensorData::Bool(v) => {
            let val = v[src];
            positions[..count].iter().for_each(|&p| v[p] = val);
        }
    }
}
