//! Child-process execution with a wall-clock limit and best-effort isolation.
//!
//! Each child runs in its own session (so a timeout kills the whole process
//! group), with a scrubbed environment, a private network namespace when the
//! kernel allows it, and a Landlock ruleset that only permits filesystem
//! writes beneath one directory.

use std::ffi::CString;
use std::io::{self, Read};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Isolation {
    /// Run in a fresh network namespace and deny TCP via Landlock.
    pub network: bool,
    /// Deny filesystem writes outside the invocation directory.
    pub filesystem: bool,
}

impl Default for Isolation {
    fn default() -> Self {
        Self { network: true, filesystem: true }
    }
}

#[derive(Clone, Debug)]
pub struct SandboxCommand {
    pub argv: Vec<String>,
    /// Working directory; the only place the child may write.
    pub workdir: PathBuf,
    pub env: Vec<(String, String)>,
    pub timeout: Duration,
    pub isolation: Isolation,
    pub max_file_bytes: u64,
    pub max_captured_bytes: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ExecOutput {
    pub exit_code: Option<i32>,
    pub signal: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub elapsed: Duration,
}

impl ExecOutput {
    pub fn success(&self) -> bool {
        !self.timed_out && self.exit_code == Some(0)
    }
}

mod landlock {
    pub const CREATE_RULESET: libc::c_long = 444;
    pub const ADD_RULE: libc::c_long = 445;
    pub const RESTRICT_SELF: libc::c_long = 446;
    pub const CREATE_RULESET_VERSION: u32 = 1;
    pub const RULE_PATH_BENEATH: libc::c_int = 1;

    pub const WRITE_FILE: u64 = 1 << 1;
    pub const REMOVE_DIR: u64 = 1 << 4;
    pub const REMOVE_FILE: u64 = 1 << 5;
    pub const MAKE_CHAR: u64 = 1 << 6;
    pub const MAKE_DIR: u64 = 1 << 7;
    pub const MAKE_REG: u64 = 1 << 8;
    pub const MAKE_SOCK: u64 = 1 << 9;
    pub const MAKE_FIFO: u64 = 1 << 10;
    pub const MAKE_BLOCK: u64 = 1 << 11;
    pub const MAKE_SYM: u64 = 1 << 12;
    pub const REFER: u64 = 1 << 13;
    pub const TRUNCATE: u64 = 1 << 14;

    pub const NET_BIND_TCP: u64 = 1 << 0;
    pub const NET_CONNECT_TCP: u64 = 1 << 1;

    #[repr(C)]
    pub struct RulesetAttr {
        pub handled_access_fs: u64,
        pub handled_access_net: u64,
    }

    #[repr(C, packed)]
    pub struct PathBeneathAttr {
        pub allowed_access: u64,
        pub parent_fd: i32,
    }
}

/// Landlock ABI version supported by the running kernel, 0 if none.
pub fn landlock_abi() -> u32 {
    static ABI: OnceLock<u32> = OnceLock::new();
    *ABI.get_or_init(|| {
        // SAFETY: the version query takes no pointers.
        let r = unsafe {
            libc::syscall(
                landlock::CREATE_RULESET,
                std::ptr::null::<landlock::RulesetAttr>(),
                0usize,
                landlock::CREATE_RULESET_VERSION,
            )
        };
        if r < 0 {
            0
        } else {
            r as u32
        }
    })
}

fn add_path_rule(ruleset: &OwnedFd, path: &Path, access: u64) -> io::Result<()> {
    let c = CString::new(path.as_os_str().as_bytes())?;
    // SAFETY: `c` is a valid NUL-terminated path.
    let fd = unsafe { libc::open(c.as_ptr(), libc::O_PATH | libc::O_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: fd was just opened and is owned here.
    let fd = unsafe { OwnedFd::from_raw_fd(fd) };
    let attr = landlock::PathBeneathAttr { allowed_access: access, parent_fd: fd.as_raw_fd() };
    // SAFETY: attr lives across the call and matches the kernel layout.
    let r = unsafe {
        libc::syscall(
            landlock::ADD_RULE,
            ruleset.as_raw_fd(),
            landlock::RULE_PATH_BENEATH,
            &attr as *const landlock::PathBeneathAttr,
            0u32,
        )
    };
    if r < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Build a ruleset in the parent; the child only has to enforce it.
fn build_ruleset(writable: &Path, isolation: Isolation) -> io::Result<Option<OwnedFd>> {
    let abi = landlock_abi();
    if abi == 0 || !(isolation.filesystem || isolation.network) {
        return Ok(None);
    }
    let mut fs = 0;
    if isolation.filesystem {
        use landlock::*;
        fs = WRITE_FILE
            | REMOVE_DIR
            | REMOVE_FILE
            | MAKE_CHAR
            | MAKE_DIR
            | MAKE_REG
            | MAKE_SOCK
            | MAKE_FIFO
            | MAKE_BLOCK
            | MAKE_SYM;
        if abi >= 2 {
            fs |= REFER;
        }
        if abi >= 3 {
            fs |= TRUNCATE;
        }
    }
    let net = if isolation.network && abi >= 4 { landlock::NET_BIND_TCP | landlock::NET_CONNECT_TCP } else { 0 };
    if fs == 0 && net == 0 {
        return Ok(None);
    }
    let attr = landlock::RulesetAttr { handled_access_fs: fs, handled_access_net: net };
    let size = if net != 0 { 16usize } else { 8usize };
    // SAFETY: attr is valid for `size` bytes.
    let fd = unsafe { libc::syscall(landlock::CREATE_RULESET, &attr as *const landlock::RulesetAttr, size, 0u32) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: the kernel returned a fresh descriptor.
    let ruleset = unsafe { OwnedFd::from_raw_fd(fd as i32) };
    if fs != 0 {
        add_path_rule(&ruleset, writable, fs)?;
        let dev_null_access = landlock::WRITE_FILE | if abi >= 3 { landlock::TRUNCATE } else { 0 };
        add_path_rule(&ruleset, Path::new("/dev/null"), dev_null_access)?;
    }
    Ok(Some(ruleset))
}

fn spawn_reader<R: Read + Send + 'static>(mut src: R, cap: usize) -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 8192];
        loop {
            match src.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    if buf.len() > cap.saturating_mul(2).max(8192) {
                        let cut = buf.len() - cap;
                        buf.drain(..cut);
                    }
                }
            }
        }
        if buf.len() > cap {
            let cut = buf.len() - cap;
            buf.drain(..cut);
        }
        let _ = tx.send(String::from_utf8_lossy(&buf).into_owned());
    });
    rx
}

fn kill_group(child: &Child) {
    // SAFETY: plain signal delivery; the child leads its own process group.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
}

pub fn run_sandboxed(cmd: &SandboxCommand) -> io::Result<ExecOutput> {
    let (program, args) = cmd
        .argv
        .split_first()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty argv"))?;
    let ruleset = build_ruleset(&cmd.workdir, cmd.isolation)?;
    let ruleset_fd = ruleset.as_ref().map(AsRawFd::as_raw_fd);
    let isolate_net = cmd.isolation.network;
    let fsize = cmd.max_file_bytes;

    let mut command = Command::new(program);
    command
        .args(args)
        .current_dir(&cmd.workdir)
        .env_clear()
        .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
        .env("HOME", &cmd.workdir)
        .env("TMPDIR", &cmd.workdir)
        .env("LANG", "C.UTF-8")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .envs(cmd.env.iter().map(|(k, v)| (k, v)))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());

    // SAFETY: only async-signal-safe syscalls run between fork and exec.
    unsafe {
        command.pre_exec(move || {
            if libc::setsid() < 0 {
                return Err(io::Error::last_os_error());
            }
            let lim = libc::rlimit { rlim_cur: fsize, rlim_max: fsize };
            libc::setrlimit(libc::RLIMIT_FSIZE, &lim);
            let no_core = libc::rlimit { rlim_cur: 0, rlim_max: 0 };
            libc::setrlimit(libc::RLIMIT_CORE, &no_core);
            if isolate_net && libc::unshare(libc::CLONE_NEWNET) != 0 {
                // Unprivileged fallback; Landlock still denies TCP on newer kernels.
                libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET);
            }
            if let Some(fd) = ruleset_fd {
                if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
                    return Err(io::Error::last_os_error());
                }
                if libc::syscall(landlock::RESTRICT_SELF, fd, 0u32) != 0 {
                    return Err(io::Error::last_os_error());
                }
            }
            Ok(())
        });
    }

    let start = Instant::now();
    let mut child = command.spawn()?;
    drop(ruleset);
    let out_rx = spawn_reader(child.stdout.take().expect("piped"), cmd.max_captured_bytes);
    let err_rx = spawn_reader(child.stderr.take().expect("piped"), cmd.max_captured_bytes);

    let mut timed_out = false;
    let mut pause = Duration::from_millis(1);
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= cmd.timeout {
            timed_out = true;
            kill_group(&child);
            break child.wait()?;
        }
        thread::sleep(pause.min(cmd.timeout.saturating_sub(start.elapsed())));
        pause = (pause * 2).min(Duration::from_millis(10));
    };
    // Background children may still hold the pipes; don't wait on them forever.
    let grace = Duration::from_millis(500);
    let stdout = out_rx.recv_timeout(grace).unwrap_or_default();
    let stderr = err_rx.recv_timeout(grace).unwrap_or_default();

    Ok(ExecOutput {
        exit_code: status.code(),
        signal: status.signal(),
        stdout,
        stderr,
        timed_out,
        elapsed: start.elapsed(),
    })
}
