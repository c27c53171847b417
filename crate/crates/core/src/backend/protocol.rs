//! Line-delimited JSON protocol spoken by worker processes.
//!
//! The worker writes a `hello` line on startup, then answers each `call`
//! line with exactly one `result` line carrying the same id.

use std::io::{BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, Invocation};
use crate::value::ValueIR;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello {
        protocol: u32,
        backend: String,
        manifest: Vec<String>,
    },
    Call {
        id: u64,
        api: String,
        args: Vec<ValueIR>,
    },
    Result {
        id: u64,
        status: WireStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        outputs: Option<Vec<ValueIR>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("messages always serialize");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Message, String> {
        serde_json::from_str(line.trim_end()).map_err(|e| e.to_string())
    }
}

/// Options for [`serve`] that let tests provoke worker failures.
#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Abort the process on receiving any call.
    pub abort_on_call: bool,
    /// Never answer calls to this API (normalized or qualified name).
    pub hang_api: Option<String>,
}

/// Runs the worker side of the protocol until the input closes.
pub fn serve<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    backend: &mut dyn Backend,
    options: &ServeOptions,
) -> std::io::Result<()> {
    let hello = Message::Hello {
        protocol: PROTOCOL_VERSION,
        backend: backend.version(),
        manifest: backend.manifest(),
    };
    writer.write_all(hello.to_line().as_bytes())?;
    writer.flush()?;

    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match Message::parse(&line) {
            Ok(Message::Call { id, api, args }) => {
                if options.abort_on_call {
                    std::process::abort();
                }
                if let Some(h) = &options.hang_api {
                    if super::manifest_contains(std::slice::from_ref(h), &api) {
                        loop {
                            std::thread::sleep(Duration::from_secs(3600));
                        }
                    }
                }
                match backend.invoke(&api, &args, super::DEFAULT_TIMEOUT) {
                    Invocation::Ok(outputs) => Message::Result {
                        id,
                        status: WireStatus::Ok,
                        outputs: Some(outputs),
                        error: None,
                    },
                    Invocation::Error(e) | Invocation::Crash(e) => Message::Result {
                        id,
                        status: WireStatus::Error,
                        outputs: None,
                        error: Some(e),
                    },
                    Invocation::Timeout => Message::Result {
                        id,
                        status: WireStatus::Error,
                        outputs: None,
                        error: Some("timeout".into()),
                    },
                }
            }
            Ok(_) => Message::Result {
                id: 0,
                status: WireStatus::Error,
                outputs: None,
                error: Some("expected a call message".into()),
            },
            Err(e) => Message::Result {
                id: 0,
                status: WireStatus::Error,
                outputs: None,
                error: Some(format!("malformed request: {e}")),
            },
        };
        writer.write_all(reply.to_line().as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}
