//! Supervised worker process behind the line protocol.
//!
//! A reader thread forwards stdout lines over a channel so that calls can
//! wait with a deadline. Process exit, EOF or a malformed line during a call
//! is a crash; a missed deadline kills the process. Either way the worker is
//! respawned before the next call.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{Message, WireStatus, PROTOCOL_VERSION};
use super::{Backend, BackendError, Invocation};
use crate::value::ValueIR;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Process {
    fn kill(mut self) -> String {
        let _ = self.child.kill();
        match self.child.wait() {
            Ok(status) => status.to_string(),
            Err(e) => e.to_string(),
        }
    }
}

pub struct WorkerBackend {
    command: Vec<String>,
    process: Option<Process>,
    version: String,
    manifest: Vec<String>,
    next_id: u64,
    spawns: u64,
}

impl WorkerBackend {
    /// Starts the worker and completes the handshake.
    pub fn spawn(command: Vec<String>) -> Result<Self, BackendError> {
        let mut w = WorkerBackend {
            command,
            process: None,
            version: String::new(),
            manifest: Vec::new(),
            next_id: 1,
            spawns: 0,
        };
        let (process, version, manifest) = w.start()?;
        w.process = Some(process);
        w.version = version;
        w.manifest = manifest;
        Ok(w)
    }

    /// Number of processes started so far, including the first.
    pub fn spawn_count(&self) -> u64 {
        self.spawns
    }

    fn start(&mut self) -> Result<(Process, String, Vec<String>), BackendError> {
        let command = self.command.join(" ");
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Spawn {
                command: command.clone(),
                message: e.to_string(),
            })?;
        self.spawns += 1;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let process = Process {
            child,
            stdin,
            lines: rx,
        };
        let handshake = |message: String| BackendError::Handshake {
            command: command.clone(),
            message,
        };
        let line = match process.lines.recv_timeout(HANDSHAKE_TIMEOUT) {
            Ok(line) => line,
            Err(e) => {
                let status = process.kill();
                return Err(handshake(format!("no hello ({e}); exit {status}")));
            }
        };
        match Message::parse(&line) {
            Ok(Message::Hello {
                protocol,
                backend,
                manifest,
            }) if protocol == PROTOCOL_VERSION => Ok((process, backend, manifest)),
            Ok(Message::Hello { protocol, .. }) => {
                process.kill();
                Err(handshake(format!("unsupported protocol {protocol}")))
            }
            _ => {
                process.kill();
                Err(handshake(format!("expected hello, got `{line}`")))
            }
        }
    }

    fn crash(&mut self, what: &str) -> Invocation {
        let status = self.process.take().map(Process::kill).unwrap_or_default();
        Invocation::Crash(format!("{what}; worker exit {status}"))
    }
}

impl Drop for WorkerBackend {
    fn drop(&mut self) {
        if let Some(p) = self.process.take() {
            p.kill();
        }
    }
}

impl Backend for WorkerBackend {
    fn version(&self) -> String {
        self.version.clone()
    }

    fn manifest(&self) -> Vec<String> {
        self.manifest.clone()
    }

    fn invoke(&mut self, api: &str, args: &[ValueIR], timeout: Duration) -> Invocation {
        if self.process.is_none() {
            match self.start() {
                Ok((p, _, _)) => self.process = Some(p),
                Err(e) => return Invocation::Crash(format!("respawn failed: {e}")),
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        let request = Message::Call {
            id,
            api: api.to_string(),
            args: args.to_vec(),
        };
        let process = self.process.as_mut().expect("process is running");
        if let Err(e) = process
            .stdin
            .write_all(request.to_line().as_bytes())
            .and_then(|_| process.stdin.flush())
        {
            return self.crash(&format!("write failed: {e}"));
        }

        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let process = self.process.as_mut().expect("process is running");
            match process.lines.recv_timeout(remaining) {
                Ok(line) => match Message::parse(&line) {
                    Ok(Message::Result {
                        id: got,
                        status,
                        outputs,
                        error,
                    }) if got == id => {
                        return match status {
                            WireStatus::Ok => Invocation::Ok(outputs.unwrap_or_default()),
                            WireStatus::Error => {
                                Invocation::Error(error.unwrap_or_else(|| "unspecified error".into()))
                            }
                        }
                    }
                    // A stale reply from an earlier call; keep waiting.
                    Ok(Message::Result { .. }) => continue,
                    _ => return self.crash(&format!("protocol violation: `{line}`")),
                },
                Err(RecvTimeoutError::Timeout) => {
                    if let Some(p) = self.process.take() {
                        p.kill();
                    }
                    return Invocation::Timeout;
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return self.crash("worker closed its output");
                }
            }
        }
    }
}
