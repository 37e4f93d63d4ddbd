//! Line-producing background activities with a uniform lifecycle.
//!
//! Both the telemetry sampler and the workload under test are consumed the
//! same way: a stream of timestamped stdout lines, a liveness check, and a
//! graceful-then-forced termination. [`ChildProcess`] wraps an OS process;
//! [`ThreadProcess`] runs an in-process generator for the simulated backend.

use std::io::{self, BufRead, BufReader};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

const POLL: Duration = Duration::from_millis(20);

/// One line of output and the moment it was received.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedLine {
    pub at: Instant,
    pub line: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitState {
    Code(i32),
    Signal(i32),
}

impl ExitState {
    pub fn success(&self) -> bool {
        matches!(self, ExitState::Code(0))
    }
}

impl std::fmt::Display for ExitState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExitState::Code(c) => write!(f, "exit code {c}"),
            ExitState::Signal(s) => write!(f, "signal {s}"),
        }
    }
}

impl From<ExitStatus> for ExitState {
    fn from(status: ExitStatus) -> Self {
        match (status.code(), status.signal()) {
            (Some(code), _) => ExitState::Code(code),
            (None, Some(sig)) => ExitState::Signal(sig),
            (None, None) => ExitState::Code(-1),
        }
    }
}

pub trait ManagedProcess: Send {
    /// The output stream. Returns `None` once taken.
    fn take_lines(&mut self) -> Option<Receiver<TimedLine>>;

    fn started_at(&self) -> Instant;

    fn try_wait(&mut self) -> io::Result<Option<ExitState>>;

    /// Asks the activity to stop, forcing it after `grace`.
    fn terminate(&mut self, grace: Duration) -> io::Result<ExitState>;
}

/// An OS process in its own process group, with stdout captured line by line.
pub struct ChildProcess {
    child: Child,
    started: Instant,
    lines: Option<Receiver<TimedLine>>,
    exit: Option<ExitState>,
}

impl ChildProcess {
    pub fn spawn(argv: &[String]) -> io::Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .process_group(0)
            .spawn()?;
        let started = Instant::now();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = unbounded();
        thread::spawn(move || forward_lines(BufReader::new(stdout), tx));
        Ok(Self {
            child,
            started,
            lines: Some(rx),
            exit: None,
        })
    }

    pub fn id(&self) -> u32 {
        self.child.id()
    }

    fn signal_group(&self, signal: libc::c_int) {
        // Negative pid addresses the whole group, which catches shell wrappers.
        let pgid = self.child.id() as libc::pid_t;
        unsafe {
            libc::kill(-pgid, signal);
        }
    }
}

fn forward_lines(reader: impl BufRead, tx: Sender<TimedLine>) {
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if tx
            .send(TimedLine {
                at: Instant::now(),
                line,
            })
            .is_err()
        {
            break;
        }
    }
}

impl ManagedProcess for ChildProcess {
    fn take_lines(&mut self) -> Option<Receiver<TimedLine>> {
        self.lines.take()
    }

    fn started_at(&self) -> Instant {
        self.started
    }

    fn try_wait(&mut self) -> io::Result<Option<ExitState>> {
        if self.exit.is_none() {
            self.exit = self.child.try_wait()?.map(ExitState::from);
        }
        Ok(self.exit)
    }

    fn terminate(&mut self, grace: Duration) -> io::Result<ExitState> {
        if let Some(state) = self.try_wait()? {
            return Ok(state);
        }
        self.signal_group(libc::SIGTERM);
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if let Some(state) = self.try_wait()? {
                self.signal_group(libc::SIGKILL);
                return Ok(state);
            }
            thread::sleep(POLL);
        }
        self.signal_group(libc::SIGKILL);
        let state = ExitState::from(self.child.wait()?);
        self.exit = Some(state);
        Ok(state)
    }
}

impl Drop for ChildProcess {
    fn drop(&mut self) {
        if matches!(self.try_wait(), Ok(None)) {
            self.signal_group(libc::SIGKILL);
            let _ = self.child.wait();
        }
    }
}

/// Handle given to an in-process generator.
pub struct LineSink {
    tx: Sender<TimedLine>,
    stop: Arc<AtomicBool>,
    started: Instant,
}

impl LineSink {
    /// Sends a line; false once the consumer has gone away.
    pub fn emit(&self, line: impl Into<String>) -> bool {
        self.tx
            .send(TimedLine {
                at: Instant::now(),
                line: line.into(),
            })
            .is_ok()
    }

    pub fn stop_requested(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    pub fn started_at(&self) -> Instant {
        self.started
    }

    /// Sleeps until `deadline`, waking early on a stop request. Returns false
    /// if stopped.
    pub fn sleep_until(&self, deadline: Instant) -> bool {
        loop {
            if self.stop_requested() {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return true;
            }
            thread::sleep((deadline - now).min(Duration::from_millis(5)));
        }
    }
}

/// An in-process generator thread behaving like a child process. The closure's
/// return value is its exit code.
pub struct ThreadProcess {
    handle: Option<JoinHandle<i32>>,
    stop: Arc<AtomicBool>,
    started: Instant,
    lines: Option<Receiver<TimedLine>>,
    exit: Option<ExitState>,
}

impl ThreadProcess {
    pub fn spawn<F>(body: F) -> Self
    where
        F: FnOnce(LineSink) -> i32 + Send + 'static,
    {
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = unbounded();
        let started = Instant::now();
        let sink = LineSink {
            tx,
            stop: Arc::clone(&stop),
            started,
        };
        let handle = thread::spawn(move || body(sink));
        Self {
            handle: Some(handle),
            stop,
            started,
            lines: Some(rx),
            exit: None,
        }
    }

    fn join(&mut self) -> ExitState {
        if let Some(handle) = self.handle.take() {
            let state = match handle.join() {
                Ok(code) => ExitState::Code(code),
                Err(_) => ExitState::Code(101),
            };
            self.exit = Some(state);
        }
        self.exit.unwrap_or(ExitState::Code(0))
    }
}

impl ManagedProcess for ThreadProcess {
    fn take_lines(&mut self) -> Option<Receiver<TimedLine>> {
        self.lines.take()
    }

    fn started_at(&self) -> Instant {
        self.started
    }

    fn try_wait(&mut self) -> io::Result<Option<ExitState>> {
        if self.exit.is_none() && self.handle.as_ref().is_some_and(|h| h.is_finished()) {
            self.join();
        }
        Ok(self.exit)
    }

    fn terminate(&mut self, grace: Duration) -> io::Result<ExitState> {
        self.stop.store(true, Ordering::Relaxed);
        let deadline = Instant::now() + grace;
        while self.handle.as_ref().is_some_and(|h| !h.is_finished()) && Instant::now() < deadline {
            thread::sleep(POLL);
        }
        if self.handle.as_ref().is_some_and(|h| !h.is_finished()) {
            // Threads cannot be killed; detach and report the forced stop.
            self.handle = None;
            self.exit = Some(ExitState::Signal(libc::SIGKILL));
        }
        Ok(self.join())
    }
}

impl Drop for ThreadProcess {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}
