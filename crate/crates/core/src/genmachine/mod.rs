//! Per-release SBOM generation as a small state machine:
//! `Init → [SynthesizeManifest] → BomGeneration → Cleanup → Halted`.
//!
//! Go and Cargo projects are handled by built-in lockfile generators; other
//! ecosystems go through configured subprocess adapters. Every run ends in
//! `Cleanup`, which restores the worktree to the tagged state.

pub mod adapter;
pub mod cargo;
pub mod gomod;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::RepoId;
use crate::sbom::{merge_sboms, parse_sbom, to_cyclonedx_bytes, Sbom};

pub use adapter::AdapterConfig;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum GenError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GenError + '_ {
    move |source| GenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GenState {
    Init,
    SynthesizeManifest,
    BomGeneration,
    Cleanup,
    Halted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailReason {
    Unsupported,
    NoManifest,
    SynthesisFailed,
    GeneratorError,
    Timeout,
    Partial,
    InvalidBom,
    CleanupFailed,
}

impl FailReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            FailReason::Unsupported => "UNSUPPORTED",
            FailReason::NoManifest => "NO_MANIFEST",
            FailReason::SynthesisFailed => "SYNTHESIS_FAILED",
            FailReason::GeneratorError => "GENERATOR_ERROR",
            FailReason::Timeout => "TIMEOUT",
            FailReason::Partial => "PARTIAL",
            FailReason::InvalidBom => "INVALID_BOM",
            FailReason::CleanupFailed => "CLEANUP_FAILED",
        }
    }
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Pending,
    Done,
    Fail { reason: FailReason, detail: String },
}

impl Outcome {
    fn fail(reason: FailReason, detail: impl Into<String>) -> Outcome {
        Outcome::Fail {
            reason,
            detail: detail.into(),
        }
    }

    /// `REASON: detail` for the release's fail_reason column.
    pub fn reason_text(&self) -> Option<String> {
        match self {
            Outcome::Fail { reason, detail } if detail.is_empty() => Some(reason.to_string()),
            Outcome::Fail { reason, detail } => Some(format!("{reason}: {detail}")),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ecosystem {
    Go,
    Cargo,
    External(String),
}

impl Ecosystem {
    pub fn parse(s: &str) -> Ecosystem {
        match s.to_ascii_lowercase().as_str() {
            "go" | "golang" => Ecosystem::Go,
            "cargo" | "rust" => Ecosystem::Cargo,
            other => Ecosystem::External(other.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Ecosystem::Go => "go",
            Ecosystem::Cargo => "cargo",
            Ecosystem::External(n) => n,
        }
    }
}

/// What Init found in the worktree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub supported: bool,
    pub manifest_present: bool,
    pub can_synthesize: bool,
}

/// The transition table. Pure: the next state depends only on the current
/// state, the probe and whether the step just run failed.
pub fn next_state(state: GenState, probe: Probe, step_failed: bool) -> GenState {
    match state {
        GenState::Init if !probe.supported => GenState::Cleanup,
        GenState::Init if probe.manifest_present => GenState::BomGeneration,
        GenState::Init if probe.can_synthesize => GenState::SynthesizeManifest,
        GenState::Init => GenState::Cleanup,
        GenState::SynthesizeManifest if step_failed => GenState::Cleanup,
        GenState::SynthesizeManifest => GenState::BomGeneration,
        GenState::BomGeneration => GenState::Cleanup,
        GenState::Cleanup | GenState::Halted => GenState::Halted,
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub shared_dir: PathBuf,
    pub timeout: Duration,
    pub adapters: BTreeMap<String, AdapterConfig>,
    /// Ask a local `go` toolchain for the module graph when one is installed.
    pub use_go_tool: bool,
}

impl GenConfig {
    pub fn new(shared_dir: impl Into<PathBuf>) -> Self {
        GenConfig {
            shared_dir: shared_dir.into(),
            timeout: DEFAULT_TIMEOUT,
            adapters: BTreeMap::new(),
            use_go_tool: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenContext {
    pub repo_id: RepoId,
    pub worktree: PathBuf,
    pub tag: String,
    pub ecosystem: Ecosystem,
    pub synthesized_files: Vec<PathBuf>,
    pub outcome: Outcome,
    pub sbom_output: Option<PathBuf>,
    /// States visited, in order.
    pub trace: Vec<GenState>,
}

impl GenContext {
    pub fn new(repo_id: RepoId, worktree: impl Into<PathBuf>, tag: &str, ecosystem: Ecosystem) -> Self {
        GenContext {
            repo_id,
            worktree: worktree.into(),
            tag: tag.to_string(),
            ecosystem,
            synthesized_files: Vec::new(),
            outcome: Outcome::Pending,
            sbom_output: None,
            trace: Vec::new(),
        }
    }
}

pub struct Machine {
    pub state: GenState,
    pub probe: Probe,
}

/// Turns a tag into a file-name-safe string.
pub fn sanitize_tag(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '+') { c } else { '_' })
        .collect()
}

/// `<shared>/<repo_id>/<tag>.cdx.json`
pub fn output_path(shared: &Path, repo: &RepoId, tag: &str) -> PathBuf {
    shared.join(sanitize_tag(&repo.0)).join(format!("{}.cdx.json", sanitize_tag(tag)))
}

fn count_files(root: &Path, name: &str) -> usize {
    let mut n = 0;
    walk_sources(root, &mut |p| {
        if p.file_name().is_some_and(|f| f == name) {
            n += 1;
        }
    });
    n
}

fn find_files(root: &Path, name: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    walk_sources(root, &mut |p| {
        if p.file_name().is_some_and(|f| f == name) {
            out.push(p.to_path_buf());
        }
    });
    out.sort();
    out
}

/// Visits project files, skipping VCS metadata, vendored trees and test data.
fn walk_sources(dir: &Path, f: &mut dyn FnMut(&Path)) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    let mut entries: Vec<_> = entries.flatten().collect();
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name();
        let name = name.to_string_lossy();
        let Ok(ft) = e.file_type() else { continue };
        if ft.is_dir() {
            if name.starts_with('.') || matches!(name.as_ref(), "vendor" | "testdata" | "node_modules" | "target") {
                continue;
            }
            walk_sources(&e.path(), f);
        } else if ft.is_file() {
            f(&e.path());
        }
    }
}

pub fn build_machine(ctx: &GenContext, cfg: &GenConfig) -> Machine {
    let w = &ctx.worktree;
    let probe = match &ctx.ecosystem {
        Ecosystem::Go => Probe {
            supported: true,
            manifest_present: w.join("go.mod").is_file(),
            can_synthesize: w.join("Gopkg.lock").is_file(),
        },
        Ecosystem::Cargo => Probe {
            supported: true,
            manifest_present: w.join("Cargo.lock").is_file() && w.join("Cargo.toml").is_file(),
            can_synthesize: false,
        },
        Ecosystem::External(name) => match cfg.adapters.get(name) {
            None => Probe {
                supported: false,
                manifest_present: false,
                can_synthesize: false,
            },
            Some(a) => Probe {
                supported: true,
                manifest_present: a.manifest.as_ref().is_none_or(|m| count_files(w, m) > 0),
                can_synthesize: false,
            },
        },
    };
    Machine {
        state: GenState::Init,
        probe,
    }
}

fn go_tool_available() -> bool {
    Command::new("go")
        .arg("version")
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .is_ok_and(|s| s.success())
}

fn synthesize(ctx: &mut GenContext) -> Result<(), Outcome> {
    let w = ctx.worktree.clone();
    let lock = fs::read_to_string(w.join("Gopkg.lock"))
        .map_err(|e| Outcome::fail(FailReason::SynthesisFailed, format!("Gopkg.lock: {e}")))?;
    let manifest = fs::read_to_string(w.join("Gopkg.toml")).ok();
    let module = format!("example.invalid/{}", sanitize_tag(&ctx.repo_id.0));
    let text = gomod::synthesize_go_mod(&module, &lock, manifest.as_deref())
        .map_err(|e| Outcome::fail(FailReason::SynthesisFailed, e.to_string()))?;
    let target = w.join("go.mod");
    fs::write(&target, text).map_err(|e| Outcome::fail(FailReason::SynthesisFailed, e.to_string()))?;
    ctx.synthesized_files.push(target);
    Ok(())
}

fn generate_go_parts(ctx: &GenContext, cfg: &GenConfig, deadline: Instant) -> Result<Sbom, Outcome> {
    let mods = find_files(&ctx.worktree, "go.mod");
    let use_tool = cfg.use_go_tool && go_tool_available();
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for path in &mods {
        let res = fs::read_to_string(path)
            .map_err(|e| GenError::Io {
                path: path.clone(),
                source: e,
            })
            .and_then(|t| gomod::parse_go_mod(&t));
        match res {
            Ok(m) => {
                let graph = if use_tool {
                    let dir = path.parent().unwrap_or(&ctx.worktree);
                    match adapter::run_command("GOFLAGS=-mod=mod go mod graph", dir, deadline) {
                        (adapter::AdapterOutcome::Ok(_), stdout) => gomod::parse_mod_graph(&stdout).ok(),
                        (adapter::AdapterOutcome::TimedOut, _) => {
                            return Err(Outcome::fail(FailReason::Timeout, "go mod graph"))
                        }
                        _ => None,
                    }
                } else {
                    None
                };
                parts.push(gomod::generate_go(&m, graph.as_ref()));
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    finish_parts(parts, failures, mods.len())
}

fn finish_parts(parts: Vec<Sbom>, failures: Vec<String>, declared: usize) -> Result<Sbom, Outcome> {
    if parts.is_empty() {
        let detail = failures.first().cloned().unwrap_or_else(|| "no module produced a BOM".into());
        return Err(Outcome::fail(FailReason::GeneratorError, detail));
    }
    if !failures.is_empty() || parts.len() < declared {
        return Err(Outcome::fail(
            FailReason::Partial,
            format!("{} of {declared} modules produced a BOM", parts.len()),
        ));
    }
    merge_sboms(&parts).map_err(|e| Outcome::fail(FailReason::GeneratorError, e.to_string()))
}

fn generate_cargo_bom(ctx: &GenContext) -> Result<Sbom, Outcome> {
    let read = |name: &str| {
        fs::read_to_string(ctx.worktree.join(name))
            .map_err(|e| Outcome::fail(FailReason::GeneratorError, format!("{name}: {e}")))
    };
    let lock = read("Cargo.lock")?;
    let manifest = read("Cargo.toml")?;
    cargo::generate_cargo(&lock, &manifest).map_err(|e| Outcome::fail(FailReason::GeneratorError, e.to_string()))
}

fn work_dir(cfg: &GenConfig, ctx: &GenContext) -> PathBuf {
    cfg.shared_dir
        .join(sanitize_tag(&ctx.repo_id.0))
        .join(format!(".work-{}", sanitize_tag(&ctx.tag)))
}

fn generate_external(ctx: &GenContext, cfg: &GenConfig, a: &AdapterConfig, deadline: Instant) -> Result<Sbom, Outcome> {
    let out_dir = work_dir(cfg, ctx);
    fs::create_dir_all(&out_dir).map_err(|e| Outcome::fail(FailReason::GeneratorError, e.to_string()))?;
    let cmd = adapter::expand(&a.command, &ctx.worktree, &out_dir, &ctx.tag);
    let declared = a.manifest.as_ref().map(|m| count_files(&ctx.worktree, m)).unwrap_or(1);
    let paths = match adapter::run_command(&cmd, &ctx.worktree, deadline).0 {
        adapter::AdapterOutcome::Ok(p) => p,
        adapter::AdapterOutcome::TimedOut => return Err(Outcome::fail(FailReason::Timeout, cmd)),
        adapter::AdapterOutcome::Failed { status, stderr } => {
            let code = status.map(|c| c.to_string()).unwrap_or_else(|| "signal".into());
            return Err(Outcome::fail(FailReason::GeneratorError, format!("exit {code}: {}", stderr.trim())));
        }
        adapter::AdapterOutcome::Spawn(e) => return Err(Outcome::fail(FailReason::GeneratorError, e.to_string())),
    };
    let mut parts = Vec::new();
    for p in &paths {
        let bytes = fs::read(p).map_err(|e| Outcome::fail(FailReason::InvalidBom, format!("{}: {e}", p.display())))?;
        let sbom = parse_sbom(&bytes).map_err(|e| Outcome::fail(FailReason::InvalidBom, format!("{}: {e}", p.display())))?;
        parts.push(sbom);
    }
    finish_parts(parts, Vec::new(), declared.max(1))
}

fn write_output(path: &Path, sbom: &Sbom) -> Result<(), Outcome> {
    let bytes = to_cyclonedx_bytes(sbom);
    parse_sbom(&bytes).map_err(|e| Outcome::fail(FailReason::InvalidBom, e.to_string()))?;
    let fail = |e: std::io::Error| Outcome::fail(FailReason::GeneratorError, format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(fail)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, &bytes).map_err(fail)?;
    fs::rename(&tmp, path).map_err(fail)
}

fn git(worktree: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new("git")
        .arg("-C")
        .arg(worktree)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
    }
}

fn cleanup(ctx: &mut GenContext, cfg: &GenConfig) -> Result<(), String> {
    let mut problems = Vec::new();
    for f in ctx.synthesized_files.drain(..) {
        if let Err(e) = fs::remove_file(&f) {
            if e.kind() != std::io::ErrorKind::NotFound {
                problems.push(format!("{}: {e}", f.display()));
            }
        }
    }
    if ctx.worktree.join(".git").exists() {
        for args in [&["reset", "--hard", "-q"][..], &["clean", "-fdxq"][..]] {
            if let Err(e) = git(&ctx.worktree, args) {
                problems.push(format!("git {}: {e}", args.join(" ")));
            }
        }
    }
    let wd = work_dir(cfg, ctx);
    if wd.exists() {
        if let Err(e) = fs::remove_dir_all(&wd) {
            problems.push(format!("{}: {e}", wd.display()));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// Drives the machine to `Halted`. A context that is already `Done` with its
/// output in place is left alone.
pub fn run_release(machine: &mut Machine, ctx: &mut GenContext, cfg: &GenConfig) -> Outcome {
    if ctx.outcome == Outcome::Done && ctx.sbom_output.as_ref().is_some_and(|p| p.is_file()) {
        return Outcome::Done;
    }
    let deadline = Instant::now() + cfg.timeout;
    let output = output_path(&cfg.shared_dir, &ctx.repo_id, &ctx.tag);
    ctx.outcome = Outcome::Pending;
    ctx.trace.clear();
    loop {
        ctx.trace.push(machine.state);
        let mut failed = false;
        match machine.state {
            GenState::Init => {
                if !machine.probe.supported {
                    ctx.outcome = Outcome::fail(FailReason::Unsupported, ctx.ecosystem.name().to_string());
                } else if !machine.probe.manifest_present && !machine.probe.can_synthesize {
                    ctx.outcome = Outcome::fail(FailReason::NoManifest, "");
                }
            }
            GenState::SynthesizeManifest => {
                if let Err(o) = synthesize(ctx) {
                    ctx.outcome = o;
                    failed = true;
                }
            }
            GenState::BomGeneration => {
                let result = match &ctx.ecosystem {
                    Ecosystem::Go => generate_go_parts(ctx, cfg, deadline),
                    Ecosystem::Cargo => generate_cargo_bom(ctx),
                    Ecosystem::External(name) => {
                        let a = cfg.adapters[name].clone();
                        generate_external(ctx, cfg, &a, deadline)
                    }
                };
                let result = result.and_then(|sbom| {
                    if Instant::now() > deadline {
                        return Err(Outcome::fail(FailReason::Timeout, "deadline passed during generation"));
                    }
                    write_output(&output, &sbom)
                });
                match result {
                    Ok(()) => {
                        ctx.outcome = Outcome::Done;
                        ctx.sbom_output = Some(output.clone());
                    }
                    Err(o) => {
                        ctx.outcome = o;
                        failed = true;
                    }
                }
            }
            GenState::Cleanup => {
                if let Err(e) = cleanup(ctx, cfg) {
                    ctx.outcome = Outcome::fail(FailReason::CleanupFailed, e);
                }
                if ctx.outcome != Outcome::Done {
                    let _ = fs::remove_file(&output);
                    ctx.sbom_output = None;
                }
            }
            GenState::Halted => break,
        }
        machine.state = next_state(machine.state, machine.probe, failed);
    }
    if ctx.outcome == Outcome::Pending {
        ctx.outcome = Outcome::fail(FailReason::GeneratorError, "machine halted without a result");
    }
    ctx.outcome.clone()
}

/// Content hash of a worktree: relative paths, file bytes and the executable
/// bit, in sorted order. `.git` is ignored.
pub fn worktree_hash(root: &Path) -> Result<String, GenError> {
    let mut files = Vec::new();
    collect_all(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let p = root.join(&rel);
        let meta = fs::symlink_metadata(&p).map_err(io_err(&p))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        if meta.file_type().is_symlink() {
            h.update(b"L");
            h.update(fs::read_link(&p).map_err(io_err(&p))?.to_string_lossy().as_bytes());
        } else {
            use std::os::unix::fs::PermissionsExt;
            h.update(if meta.permissions().mode() & 0o111 != 0 { b"X" } else { b"F" });
            h.update(fs::read(&p).map_err(io_err(&p))?);
        }
        h.update([0]);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_all(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), GenError> {
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let e = e.map_err(io_err(dir))?;
        let path = e.path();
        if dir == root && e.file_name() == ".git" {
            continue;
        }
        let ft = e.file_type().map_err(io_err(&path))?;
        if ft.is_dir() {
            collect_all(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL_PROBES: [Probe; 8] = {
        let mut out = [Probe { supported: false, manifest_present: false, can_synthesize: false }; 8];
        let mut i = 0;
        while i < 8 {
            out[i] = Probe { supported: i & 1 != 0, manifest_present: i & 2 != 0, can_synthesize: i & 4 != 0 };
            i += 1;
        }
        out
    };

    #[test]
    fn every_path_through_the_table_ends_in_cleanup_then_halts() {
        for probe in ALL_PROBES {
            for fail_at_synth in [false, true] {
                let mut s = GenState::Init;
                let mut seen = vec![s];
                for _ in 0..10 {
                    let failed = s == GenState::SynthesizeManifest && fail_at_synth;
                    s = next_state(s, probe, failed);
                    seen.push(s);
                    if s == GenState::Halted {
                        break;
                    }
                }
                assert_eq!(*seen.last().unwrap(), GenState::Halted, "{probe:?}");
                assert_eq!(seen[seen.len() - 2], GenState::Cleanup, "{probe:?}");
                assert_eq!(seen.iter().filter(|s| **s == GenState::Cleanup).count(), 1);
            }
        }
    }

    #[test]
    fn go_with_manifest_skips_synthesis() {
        let p = Probe { supported: true, manifest_present: true, can_synthesize: true };
        assert_eq!(next_state(GenState::Init, p, false), GenState::BomGeneration);
        let p = Probe { supported: true, manifest_present: false, can_synthesize: true };
        assert_eq!(next_state(GenState::Init, p, false), GenState::SynthesizeManifest);
        assert_eq!(next_state(GenState::SynthesizeManifest, p, true), GenState::Cleanup);
    }

    #[test]
    fn tags_are_sanitized_for_paths() {
        assert_eq!(sanitize_tag("release/1.0"), "release_1.0");
        assert_eq!(
            output_path(Path::new("/s"), &RepoId("r-1".into()), "v1.0.0"),
            PathBuf::from("/s/r-1/v1.0.0.cdx.json")
        );
    }

    fn cfg(shared: &Path) -> GenConfig {
        GenConfig {
            use_go_tool: false,
            ..GenConfig::new(shared)
        }
    }

    #[test]
    fn cargo_happy_path() {
        let wt = tempfile::tempdir().unwrap();
        let shared = tempfile::tempdir().unwrap();
        fs::write(wt.path().join("Cargo.toml"), "[package]\nname = \"app\"\nversion = \"0.1.0\"\n[dependencies]\nx = \"1\"\n").unwrap();
        fs::write(
            wt.path().join("Cargo.lock"),
            "[[package]]\nname = \"app\"\nversion = \"0.1.0\"\ndependencies = [\"x\"]\n\n[[package]]\nname = \"x\"\nversion = \"1.0.0\"\nsource = \"registry+https://github.com/rust-lang/crates.io-index\"\n",
        )
        .unwrap();
        let before = worktree_hash(wt.path()).unwrap();
        let mut ctx = GenContext::new(RepoId("app-1".into()), wt.path(), "v0.1.0", Ecosystem::Cargo);
        let config = cfg(shared.path());
        let mut m = build_machine(&ctx, &config);
        assert_eq!(run_release(&mut m, &mut ctx, &config), Outcome::Done);
        assert_eq!(ctx.trace, [GenState::Init, GenState::BomGeneration, GenState::Cleanup, GenState::Halted]);
        let out = ctx.sbom_output.clone().unwrap();
        let s = parse_sbom(&fs::read(&out).unwrap()).unwrap();
        assert_eq!(s.components.len(), 1);
        assert_eq!(worktree_hash(wt.path()).unwrap(), before);
        // second run is a no-op
        let mut m = build_machine(&ctx, &config);
        assert_eq!(run_release(&mut m, &mut ctx, &config), Outcome::Done);
        assert_eq!(m.state, GenState::Init);
    }

    #[test]
    fn go_without_manifest_or_lock_fails() {
        let wt = tempfile::tempdir().unwrap();
        let shared = tempfile::tempdir().unwrap();
        fs::write(wt.path().join("main.go"), "package main\n").unwrap();
        let mut ctx = GenContext::new(RepoId("g".into()), wt.path(), "v1", Ecosystem::Go);
        let config = cfg(shared.path());
        let mut m = build_machine(&ctx, &config);
        let o = run_release(&mut m, &mut ctx, &config);
        assert!(matches!(o, Outcome::Fail { reason: FailReason::NoManifest, .. }), "{o:?}");
        assert_eq!(ctx.trace, [GenState::Init, GenState::Cleanup, GenState::Halted]);
    }

    #[test]
    fn go_synthesis_is_cleaned_up() {
        let wt = tempfile::tempdir().unwrap();
        let shared = tempfile::tempdir().unwrap();
        fs::write(
            wt.path().join("Gopkg.lock"),
            "[[projects]]\n  name = \"github.com/pkg/errors\"\n  version = \"v0.8.1\"\n  revision = \"ba968bfe8b2f7e042a574c888954fccecfa385b4\"\n",
        )
        .unwrap();
        let before = worktree_hash(wt.path()).unwrap();
        let mut ctx = GenContext::new(RepoId("g".into()), wt.path(), "v1", Ecosystem::Go);
        let config = cfg(shared.path());
        let mut m = build_machine(&ctx, &config);
        assert_eq!(run_release(&mut m, &mut ctx, &config), Outcome::Done);
        assert_eq!(ctx.trace[1], GenState::SynthesizeManifest);
        assert!(!wt.path().join("go.mod").exists());
        assert_eq!(worktree_hash(wt.path()).unwrap(), before);
        let s = parse_sbom(&fs::read(ctx.sbom_output.unwrap()).unwrap()).unwrap();
        assert_eq!(s.components[0].key, "pkg:golang/github.com/pkg/errors@v0.8.1");
    }

    #[test]
    fn unsupported_ecosystem() {
        let wt = tempfile::tempdir().unwrap();
        let config = cfg(wt.path());
        let mut ctx = GenContext::new(RepoId("c".into()), wt.path(), "v1", Ecosystem::parse("c++"));
        let mut m = build_machine(&ctx, &config);
        let o = run_release(&mut m, &mut ctx, &config);
        assert!(matches!(o, Outcome::Fail { reason: FailReason::Unsupported, .. }));
    }

    #[test]
    fn adapter_failures_leave_no_output() {
        let wt = tempfile::tempdir().unwrap();
        let shared = tempfile::tempdir().unwrap();
        let mut config = cfg(shared.path());
        config.adapters.insert("npm".into(), AdapterConfig { command: "echo boom >&2; exit 2".into(), manifest: None });
        let mut ctx = GenContext::new(RepoId("n".into()), wt.path(), "v1", Ecosystem::parse("npm"));
        let mut m = build_machine(&ctx, &config);
        let o = run_release(&mut m, &mut ctx, &config);
        assert_eq!(o.reason_text().unwrap(), "GENERATOR_ERROR: exit 2: boom");
        assert!(!output_path(shared.path(), &ctx.repo_id, "v1").exists());

        config.adapters.insert("npm".into(), AdapterConfig { command: "sleep 5".into(), manifest: None });
        config.timeout = Duration::from_millis(200);
        let mut m = build_machine(&ctx, &config);
        let o = run_release(&mut m, &mut ctx, &config);
        assert!(matches!(o, Outcome::Fail { reason: FailReason::Timeout, .. }), "{o:?}");
    }
}
