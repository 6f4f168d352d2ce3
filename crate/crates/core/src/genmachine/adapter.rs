//! External BOM generators run as subprocesses.
//!
//! A command template may use `{worktree}`, `{out_dir}` and `{tag}`; it runs
//! under `sh -c` in the worktree. On success the command prints the paths of
//! the BOM files it wrote, one per line (relative paths resolve against the
//! worktree).

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub command: String,
    /// Manifest file name marking one module (e.g. `pom.xml`); every such file
    /// in the worktree must yield a BOM.
    #[serde(default)]
    pub manifest: Option<String>,
}

#[derive(Debug)]
pub enum AdapterOutcome {
    Ok(Vec<PathBuf>),
    Failed { status: Option<i32>, stderr: String },
    TimedOut,
    Spawn(std::io::Error),
}

pub(crate) fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

pub fn expand(template: &str, worktree: &Path, out_dir: &Path, tag: &str) -> String {
    template
        .replace("{worktree}", &shell_quote(&worktree.to_string_lossy()))
        .replace("{out_dir}", &shell_quote(&out_dir.to_string_lossy()))
        .replace("{tag}", &shell_quote(tag))
}

/// Runs `command` under `sh -c` with a deadline; stdout and stderr are
/// drained on background threads so a chatty child cannot block.
pub fn run_command(command: &str, cwd: &Path, deadline: Instant) -> (AdapterOutcome, String) {
    let mut child = match Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
    {
        Ok(c) => c,
        Err(e) => return (AdapterOutcome::Spawn(e), String::new()),
    };
    let mut out_pipe = child.stdout.take().expect("piped");
    let mut err_pipe = child.stderr.take().expect("piped");
    let out_thread = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = out_pipe.read_to_string(&mut s);
        s
    });
    let err_thread = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = err_pipe.read_to_string(&mut s);
        s
    });
    let remaining = deadline.saturating_duration_since(Instant::now());
    let status = match child.wait_timeout(remaining.max(Duration::from_millis(1))) {
        Ok(Some(status)) => status,
        Ok(None) => {
            // the whole process group, so grandchildren holding the pipes die too
            let _ = Command::new("kill")
                .args(["-KILL", "--", &format!("-{}", child.id())])
                .status();
            let _ = child.kill();
            let _ = child.wait();
            return (AdapterOutcome::TimedOut, String::new());
        }
        Err(e) => return (AdapterOutcome::Spawn(e), String::new()),
    };
    let stdout = out_thread.join().unwrap_or_default();
    let stderr = err_thread.join().unwrap_or_default();
    if !status.success() {
        return (
            AdapterOutcome::Failed {
                status: status.code(),
                stderr: stderr.chars().take(2000).collect(),
            },
            stdout,
        );
    }
    let paths = stdout
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                cwd.join(p)
            }
        })
        .collect();
    (AdapterOutcome::Ok(paths), stdout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_and_quotes() {
        let s = expand("gen {worktree} -o {out_dir}/x-{tag}.json", Path::new("/a b"), Path::new("/o"), "v1's");
        assert_eq!(s, r"gen '/a b' -o '/o'/x-'v1'\''s'.json");
    }

    #[test]
    fn reports_paths_failure_and_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let far = Instant::now() + Duration::from_secs(30);
        match run_command("echo a.json; echo /abs/b.json", dir.path(), far).0 {
            AdapterOutcome::Ok(p) => assert_eq!(p, vec![dir.path().join("a.json"), PathBuf::from("/abs/b.json")]),
            other => panic!("{other:?}"),
        }
        match run_command("echo nope >&2; exit 3", dir.path(), far).0 {
            AdapterOutcome::Failed { status, stderr } => {
                assert_eq!(status, Some(3));
                assert_eq!(stderr.trim(), "nope");
            }
            other => panic!("{other:?}"),
        }
        let start = Instant::now();
        let near = Instant::now() + Duration::from_millis(200);
        assert!(matches!(run_command("sleep 5; true", dir.path(), near).0, AdapterOutcome::TimedOut));
        assert!(start.elapsed() < Duration::from_secs(3));
    }
}
