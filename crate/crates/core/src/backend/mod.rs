//! Uniform execution of group members on backends.
//!
//! A backend is either in-process ([`reference::ReferenceBackend`]) or an
//! external worker process speaking the line-delimited protocol in
//! [`protocol`]. [`BackendHandle::call`] is total: every call yields exactly
//! one [`ExecutionOutcome`].

pub mod protocol;
pub mod reference;
pub mod worker;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::normalize_api_name;
use crate::value::ValueIR;

pub use reference::{ReferenceBackend, Variant};
pub use worker::WorkerBackend;

/// Outputs larger than this (total elements) are rejected as errors.
pub const MAX_OUTPUT_ELEMENTS: usize = 1_000_000;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
    Crash,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub backend_id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<ValueIR>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_text: Option<String>,
    pub nan_present: bool,
    /// Wall-clock time; not serialized so that reports stay reproducible.
    #[serde(skip)]
    pub duration_ms: f64,
}

impl ExecutionOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    fn failed(backend_id: &str, status: Status, text: String, started: Instant) -> Self {
        ExecutionOutcome {
            backend_id: backend_id.to_string(),
            status,
            outputs: Vec::new(),
            error_text: Some(text),
            nan_present: false,
            duration_ms: started.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// What a backend reports for one invocation, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub enum Invocation {
    Ok(Vec<ValueIR>),
    Error(String),
    Crash(String),
    Timeout,
}

pub trait Backend: Send {
    /// Backend name and version, as reported at handshake.
    fn version(&self) -> String;
    fn manifest(&self) -> Vec<String>;
    fn invoke(&mut self, api: &str, args: &[ValueIR], timeout: Duration) -> Invocation;
}

/// An API is callable when the manifest lists its qualified name or its
/// normalized name.
pub fn manifest_contains(manifest: &[String], api: &str) -> bool {
    let normalized = normalize_api_name(api);
    manifest.iter().any(|m| m == api || *m == normalized)
}

fn output_elements(v: &ValueIR) -> usize {
    match v {
        ValueIR::Tensor(t) => t.data.len(),
        ValueIR::Shape(s) => s.len(),
        _ => 1,
    }
}

pub struct BackendHandle {
    pub backend_id: String,
    pub timeout: Duration,
    manifest: Vec<String>,
    inner: Box<dyn Backend>,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendHandle")
            .field("backend_id", &self.backend_id)
            .field("version", &self.inner.version())
            .finish()
    }
}

impl BackendHandle {
    pub fn new(backend_id: impl Into<String>, inner: Box<dyn Backend>, timeout: Duration) -> Self {
        BackendHandle {
            backend_id: backend_id.into(),
            timeout,
            manifest: inner.manifest(),
            inner,
        }
    }

    pub fn reference(backend_id: impl Into<String>, variant: Variant) -> Self {
        Self::new(
            backend_id,
            Box::new(ReferenceBackend::new(variant)),
            DEFAULT_TIMEOUT,
        )
    }

    pub fn version(&self) -> String {
        self.inner.version()
    }

    pub fn manifest(&self) -> &[String] {
        &self.manifest
    }

    pub fn supports(&self, api: &str) -> bool {
        manifest_contains(&self.manifest, api)
    }

    pub fn call(&mut self, api: &str, args: &[ValueIR]) -> ExecutionOutcome {
        let started = Instant::now();
        if !self.supports(api) {
            return ExecutionOutcome::failed(
                &self.backend_id,
                Status::Error,
                format!("`{api}` is not in the backend manifest"),
                started,
            );
        }
        match self.inner.invoke(api, args, self.timeout) {
            Invocation::Ok(outputs) => {
                let total: usize = outputs.iter().map(output_elements).sum();
                if total > MAX_OUTPUT_ELEMENTS {
                    return ExecutionOutcome::failed(
                        &self.backend_id,
                        Status::Error,
                        format!("output has {total} elements, limit is {MAX_OUTPUT_ELEMENTS}"),
                        started,
                    );
                }
                ExecutionOutcome {
                    backend_id: self.backend_id.clone(),
                    status: Status::Ok,
                    nan_present: outputs.iter().any(ValueIR::has_nan),
                    outputs,
                    error_text: None,
                    duration_ms: started.elapsed().as_secs_f64() * 1e3,
                }
            }
            Invocation::Error(e) => {
                ExecutionOutcome::failed(&self.backend_id, Status::Error, e, started)
            }
            Invocation::Crash(e) => {
                ExecutionOutcome::failed(&self.backend_id, Status::Crash, e, started)
            }
            Invocation::Timeout => ExecutionOutcome::failed(
                &self.backend_id,
                Status::Timeout,
                format!("no response within {:?}", self.timeout),
                started,
            ),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("bad backend spec `{0}`: expected SOURCE=ref:stable|ref:ftz|worker:COMMAND")]
    Spec(String),
    #[error("worker `{command}` failed to start: {message}")]
    Spawn { command: String, message: String },
    #[error("worker `{command}` handshake failed: {message}")]
    Handshake { command: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    InProcess(Variant),
    Worker(Vec<String>),
}

/// `SOURCE=ref:stable`, `SOURCE=ref:ftz` or `SOURCE=worker:COMMAND ARGS...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    pub source: String,
    pub transport: Transport,
}

impl FromStr for BackendSpec {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || BackendError::Spec(s.to_string());
        let (source, rest) = s.split_once('=').ok_or_else(err)?;
        let source = source.trim();
        if source.is_empty() {
            return Err(err());
        }
        let (kind, arg) = rest.split_once(':').ok_or_else(err)?;
        let transport = match kind.trim() {
            "ref" => Transport::InProcess(arg.trim().parse().map_err(|_| err())?),
            "worker" => {
                let argv: Vec<String> = arg.split_whitespace().map(str::to_string).collect();
                if argv.is_empty() {
                    return Err(err());
                }
                Transport::Worker(argv)
            }
            _ => return Err(err()),
        };
        Ok(BackendSpec {
            source: source.to_string(),
            transport,
        })
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.transport {
            Transport::InProcess(v) => write!(f, "{}=ref:{}", self.source, v),
            Transport::Worker(argv) => write!(f, "{}=worker:{}", self.source, argv.join(" ")),
        }
    }
}

impl BackendSpec {
    pub fn build(&self, timeout: Duration) -> Result<BackendHandle, BackendError> {
        let inner: Box<dyn Backend> = match &self.transport {
            Transport::InProcess(v) => Box::new(ReferenceBackend::new(*v)),
            Transport::Worker(argv) => Box::new(WorkerBackend::spawn(argv.clone())?),
        };
        Ok(BackendHandle::new(self.source.clone(), inner, timeout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{DType, Tensor};

    #[test]
    fn spec_parsing() {
        let s: BackendSpec = "torch=ref:stable".parse().unwrap();
        assert_eq!(s.transport, Transport::InProcess(Variant::Stable));
        let s: BackendSpec = "tf=ref:ftz".parse().unwrap();
        assert_eq!(s.transport, Transport::InProcess(Variant::FlushTiesToZero));
        let s: BackendSpec = "jax=worker:python3 worker.py jax".parse().unwrap();
        assert_eq!(
            s.transport,
            Transport::Worker(vec!["python3".into(), "worker.py".into(), "jax".into()])
        );
        assert_eq!(s.to_string(), "jax=worker:python3 worker.py jax");
        assert!("torch".parse::<BackendSpec>().is_err());
        assert!("torch=ref:fast".parse::<BackendSpec>().is_err());
        assert!("=ref:stable".parse::<BackendSpec>().is_err());
        assert!("x=worker:".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn unknown_api_is_error_not_crash() {
        let mut h = BackendHandle::reference("torch", Variant::Stable);
        let out = h.call("torch.frobnicate", &[]);
        assert_eq!(out.status, Status::Error);
    }

    #[test]
    fn nan_flag_set_on_ok() {
        let mut h = BackendHandle::reference("torch", Variant::Stable);
        let x = ValueIR::Tensor(Tensor::complex(vec![], vec![(f64::NAN, f64::NAN)]));
        let out = h.call("torch.angle", &[x]);
        assert_eq!(out.status, Status::Ok);
        assert!(out.nan_present);
        let y = ValueIR::Tensor(Tensor::real(DType::F64, vec![1], vec![1.0]));
        assert!(!h.call("torch.relu", &[y]).nan_present);
    }

    #[test]
    fn outcome_json_omits_duration() {
        let mut h = BackendHandle::reference("torch", Variant::Stable);
        let y = ValueIR::Tensor(Tensor::real(DType::F64, vec![1], vec![1.0]));
        let out = h.call("torch.relu", &[y]);
        let s = serde_json::to_string(&out).unwrap();
        assert!(!s.contains("duration"));
        let back: ExecutionOutcome = serde_json::from_str(&s).unwrap();
        assert_eq!(back.outputs, out.outputs);
    }
}
