//! External-process runtime backend.
//!
//! A runtime instance is a plain child process kept warm between
//! invocations. The control protocol is line-oriented UTF-8 on the child's
//! stdin/stdout:
//!
//! - spawn: `<executable> --dataset <path> --config <path> --out <path>`
//! - readiness: the child prints `READY` once it can accept work
//! - per invocation: parent sends `RUN <dataset> <config> <out>`, child
//!   replies `DONE <exit-status>` (0 = success) after writing the result
//!   file; the process stays alive for the next invocation
//! - shutdown: parent closes stdin; the child exits on EOF

use super::{InvokeError, StartError};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

/// Handle to one warm runtime process.
pub struct ProcessHandle {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ProcessHandle {
    /// Spawn the runtime executable and wait for its `READY` handshake.
    pub fn spawn(
        executable: &Path,
        dataset: &Path,
        config: &Path,
        out: &Path,
    ) -> Result<Self, StartError> {
        let mut child = Command::new(executable)
            .arg("--dataset")
            .arg(dataset)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| StartError::SpawnFailure(format!("{}: {e}", executable.display())))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let mut stdout = BufReader::new(child.stdout.take().expect("stdout piped"));

        let mut line = String::new();
        let n = stdout
            .read_line(&mut line)
            .map_err(|e| StartError::SpawnFailure(format!("handshake read: {e}")))?;
        if n == 0 {
            // Child exited before READY.
            let status = child.wait().map(|s| s.to_string()).unwrap_or_default();
            return Err(StartError::SpawnFailure(format!(
                "runtime exited before READY ({status})"
            )));
        }
        if line.trim() != "READY" {
            let _ = child.kill();
            let _ = child.wait();
            return Err(StartError::SpawnFailure(format!(
                "bad handshake line: {:?}",
                line.trim()
            )));
        }
        Ok(ProcessHandle {
            child,
            stdin: Some(stdin),
            stdout,
        })
    }

    /// Run one invocation: the child reads `dataset`/`config`, writes `out`,
    /// and answers `DONE <status>`. Returns once the reply arrives.
    pub fn run(&mut self, dataset: &Path, config: &Path, out: &Path) -> Result<(), InvokeError> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| InvokeError::ExecutionFailure("process already stopped".into()))?;
        writeln!(
            stdin,
            "RUN {} {} {}",
            dataset.display(),
            config.display(),
            out.display()
        )
        .and_then(|()| stdin.flush())
        .map_err(|e| InvokeError::ExecutionFailure(format!("write RUN: {e}")))?;

        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| InvokeError::ExecutionFailure(format!("read DONE: {e}")))?;
        if n == 0 {
            return Err(InvokeError::ExecutionFailure(
                "runtime process exited mid-invocation".into(),
            ));
        }
        let reply = line.trim();
        match reply.strip_prefix("DONE ").map(str::parse::<i32>) {
            Some(Ok(0)) => Ok(()),
            Some(Ok(code)) => Err(InvokeError::ExecutionFailure(format!(
                "runtime reported exit status {code}"
            ))),
            _ => Err(InvokeError::ExecutionFailure(format!(
                "bad reply line: {reply:?}"
            ))),
        }
    }

    /// Graceful shutdown: close stdin and reap the child.
    pub fn stop(mut self) {
        self.stdin.take(); // EOF
        let _ = self.child.wait();
    }
}

impl Drop for ProcessHandle {
    fn drop(&mut self) {
        if self.stdin.take().is_some() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}
