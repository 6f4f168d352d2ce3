//! Go modules: `go.mod` parsing, `go mod graph` output, and `go.mod`
//! synthesis from a legacy `Gopkg.lock`.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use super::GenError;
use crate::model::{Component, PackageUrl};
use crate::purl::{compare_versions, format_purl};
use crate::sbom::{Sbom, SbomComponent, SbomMetadata, Tool};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Require {
    pub path: String,
    pub version: String,
    pub indirect: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoMod {
    pub module: String,
    pub requires: Vec<Require>,
    /// `old path` → `(new path, new version)`; local-path targets are ignored.
    pub replaces: BTreeMap<String, (String, String)>,
}

fn unquote(s: &str) -> String {
    s.trim().trim_matches('"').trim_matches('`').to_string()
}

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> GenError {
    GenError::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

pub fn parse_go_mod(text: &str) -> Result<GoMod, GenError> {
    let mut m = GoMod::default();
    let mut block: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let (code, comment) = match raw.find("//") {
            Some(i) => (&raw[..i], &raw[i + 2..]),
            None => (raw, ""),
        };
        let code = code.trim();
        if code.is_empty() {
            continue;
        }
        let indirect = comment.trim() == "indirect" || comment.trim().starts_with("indirect;");
        let (verb, rest) = if let Some(b) = &block {
            if code == ")" {
                block = None;
                continue;
            }
            (b.clone(), code.to_string())
        } else {
            let mut it = code.splitn(2, char::is_whitespace);
            let verb = it.next().unwrap_or_default().to_string();
            let rest = it.next().unwrap_or_default().trim().to_string();
            if rest == "(" {
                block = Some(verb);
                continue;
            }
            (verb, rest)
        };
        match verb.as_str() {
            "module" => m.module = unquote(&rest),
            "require" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(parse_err("go.mod", lineno, format!("malformed require {rest:?}")));
                }
                m.requires.push(Require {
                    path: unquote(parts[0]),
                    version: unquote(parts[1]),
                    indirect,
                });
            }
            "replace" => {
                let Some((old, new)) = rest.split_once("=>") else {
                    return Err(parse_err("go.mod", lineno, "replace without =>"));
                };
                let old_path = old.split_whitespace().next().map(unquote).unwrap_or_default();
                let new_parts: Vec<String> = new.split_whitespace().map(unquote).collect();
                if new_parts.len() == 2 {
                    m.replaces.insert(old_path, (new_parts[0].clone(), new_parts[1].clone()));
                }
            }
            "go" | "toolchain" | "exclude" | "retract" | "godebug" => {}
            other => return Err(parse_err("go.mod", lineno, format!("unknown directive {other:?}"))),
        }
    }
    if block.is_some() {
        return Err(parse_err("go.mod", text.lines().count(), "unterminated block"));
    }
    if m.module.is_empty() {
        return Err(parse_err("go.mod", 1, "missing module directive"));
    }
    Ok(m)
}

/// Edges from `go mod graph`: `(from path, from version or "" for main) -> (to path, to version)`.
pub type ModGraph = Vec<((String, String), (String, String))>;

pub fn parse_mod_graph(text: &str) -> Result<ModGraph, GenError> {
    let split = |s: &str| match s.rsplit_once('@') {
        Some((p, v)) => (p.to_string(), v.to_string()),
        None => (s.to_string(), String::new()),
    };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err("go mod graph", idx + 1, format!("expected two fields in {line:?}")));
        }
        out.push((split(parts[0]), split(parts[1])));
    }
    Ok(out)
}

fn go_purl(path: &str, version: &str) -> PackageUrl {
    let (ns, name) = match path.rsplit_once('/') {
        Some((ns, name)) => (Some(ns), name),
        None => (None, path),
    };
    PackageUrl::new("golang", ns, name, Some(version))
}

fn component(path: &str, version: &str) -> SbomComponent {
    let purl = go_purl(path, version);
    SbomComponent {
        key: format_purl(&purl),
        kind: "library".into(),
        component: Component::from_purl(purl),
        synthetic: false,
    }
}

/// Builds a BOM for one module. Selected versions come from `go.mod` (which
/// lists the full build list since Go 1.17) and, for modules it omits, the
/// highest version in the graph. Without a graph only direct requirements are
/// reachable.
pub fn generate_go(gomod: &GoMod, graph: Option<&ModGraph>) -> Sbom {
    let resolve = |path: &str, version: &str| -> (String, String) {
        gomod
            .replaces
            .get(path)
            .cloned()
            .unwrap_or_else(|| (path.to_string(), version.to_string()))
    };
    let mut selected: BTreeMap<String, String> = BTreeMap::new();
    let bump = |path: &str, version: &str, selected: &mut BTreeMap<String, String>| {
        let e = selected.entry(path.to_string()).or_insert_with(|| version.to_string());
        if compare_versions("golang", version, e).is_gt() {
            *e = version.to_string();
        }
    };
    for r in &gomod.requires {
        bump(&r.path, &r.version, &mut selected);
    }
    if let Some(g) = graph {
        let listed: BTreeSet<&str> = gomod.requires.iter().map(|r| r.path.as_str()).collect();
        for (_, (to, v)) in g {
            if !listed.contains(to.as_str()) {
                bump(to, v, &mut selected);
            }
        }
    }
    selected.remove(&gomod.module);

    let key_of = |path: &str| -> String {
        let (p, v) = resolve(path, &selected[path]);
        component(&p, &v).key
    };
    let mut components: BTreeMap<String, SbomComponent> = BTreeMap::new();
    for (path, version) in &selected {
        let (p, v) = resolve(path, version);
        let c = component(&p, &v);
        components.insert(c.key.clone(), c);
    }
    let roots: BTreeSet<String> = gomod
        .requires
        .iter()
        .filter(|r| !r.indirect)
        .map(|r| key_of(&r.path))
        .collect();
    let mut dependencies: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    if let Some(g) = graph {
        for ((from, fv), (to, _)) in g {
            if from == &gomod.module || to == &gomod.module {
                continue;
            }
            // only edges out of the selected version of a module count
            if selected.get(from) != Some(fv) || !selected.contains_key(to) {
                continue;
            }
            let (a, b) = (key_of(from), key_of(to));
            if a != b {
                dependencies.entry(a).or_default().insert(b);
            }
        }
    }
    let mut subject = go_purl(&gomod.module, "");
    subject.version = None;
    let components: Vec<SbomComponent> = components.into_values().collect();
    let conflicts = crate::sbom::find_conflicts(&components);
    Sbom {
        spec_version: "1.5".into(),
        metadata: SbomMetadata {
            tools: vec![Tool {
                vendor: Some("depwatch".into()),
                name: "gomod-generator".into(),
                version: Some(env!("CARGO_PKG_VERSION").into()),
            }],
            timestamp: None,
            subject: Some(SbomComponent {
                key: format_purl(&subject),
                kind: "application".into(),
                component: Component::from_purl(subject),
                synthetic: false,
            }),
        },
        components,
        subject_depends_on: Some(roots),
        dependencies,
        conflicts,
    }
}

#[derive(Deserialize)]
struct GopkgLock {
    #[serde(default)]
    projects: Vec<GopkgProject>,
}

#[derive(Deserialize)]
struct GopkgProject {
    name: String,
    #[serde(default)]
    version: Option<String>,
    #[serde(default)]
    revision: Option<String>,
}

#[derive(Deserialize, Default)]
struct GopkgToml {
    #[serde(default)]
    constraint: Vec<GopkgConstraint>,
}

#[derive(Deserialize)]
struct GopkgConstraint {
    name: String,
}

fn toml_err(file: &str, text: &str, e: toml::de::Error) -> GenError {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
        .unwrap_or(0);
    parse_err(file, line, e.message().to_string())
}

fn is_semver_tag(v: &str) -> bool {
    let Some(rest) = v.strip_prefix('v') else {
        return false;
    };
    let core = rest.split(['-', '+']).next().unwrap_or("");
    let parts: Vec<&str> = core.split('.').collect();
    parts.len() == 3 && parts.iter().all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()))
}

/// Writes the text of a `go.mod` equivalent to a dep-managed project's
/// `Gopkg.lock`. Projects named as constraints in `Gopkg.toml` become direct
/// requirements, the rest are marked indirect.
pub fn synthesize_go_mod(module: &str, lock: &str, manifest: Option<&str>) -> Result<String, GenError> {
    let lock_doc: GopkgLock = toml::from_str(lock).map_err(|e| toml_err("Gopkg.lock", lock, e))?;
    let direct: BTreeSet<String> = match manifest {
        Some(text) => {
            let m: GopkgToml = toml::from_str(text).map_err(|e| toml_err("Gopkg.toml", text, e))?;
            m.constraint.into_iter().map(|c| c.name).collect()
        }
        None => lock_doc.projects.iter().map(|p| p.name.clone()).collect(),
    };
    let mut out = format!("module {module}\n\ngo 1.16\n");
    if !lock_doc.projects.is_empty() {
        out.push_str("\nrequire (\n");
        for p in &lock_doc.projects {
            let version = match (&p.version, &p.revision) {
                (Some(v), _) if is_semver_tag(v) => v.clone(),
                (_, Some(rev)) if rev.len() >= 12 => {
                    format!("v0.0.0-00010101000000-{}", &rev[..12])
                }
                _ => {
                    return Err(parse_err(
                        "Gopkg.lock",
                        0,
                        format!("project {} has neither a semver version nor a revision", p.name),
                    ))
                }
            };
            let marker = if direct.contains(&p.name) { "" } else { " // indirect" };
            out.push_str(&format!("\t{} {}{}\n", p.name, version, marker));
        }
        out.push_str(")\n");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sbom::{compute_depths, parse_sbom, to_cyclonedx_bytes};

    const GOMOD: &str = r#"module github.com/acme/server

go 1.19

require (
	github.com/prometheus/client_golang v1.11.0
	golang.org/x/sys v0.1.0 // indirect
	github.com/beorn7/perks v1.0.1 // indirect
)

require github.com/pkg/errors v0.9.1

replace github.com/pkg/errors => github.com/pkg/errors v0.9.0
"#;

    #[test]
    fn parses_go_mod() {
        let m = parse_go_mod(GOMOD).unwrap();
        assert_eq!(m.module, "github.com/acme/server");
        assert_eq!(m.requires.len(), 4);
        assert!(m.requires[1].indirect);
        assert!(!m.requires[3].indirect);
        assert_eq!(m.replaces["github.com/pkg/errors"].1, "v0.9.0");
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = parse_go_mod("module x\nrequire (\n  a\n)\n").unwrap_err();
        assert!(matches!(e, GenError::Parse { line: 3, .. }), "{e}");
        assert!(parse_go_mod("require a v1\n").is_err());
    }

    #[test]
    fn single_requirement_is_one_root() {
        let m = parse_go_mod("module m\nrequire github.com/a/b v1.0.0\n").unwrap();
        let s = generate_go(&m, None);
        assert_eq!(s.components.len(), 1);
        let d = compute_depths(&s.graph());
        assert_eq!(d.depth("pkg:golang/github.com/a/b@v1.0.0"), Some(0));
    }

    #[test]
    fn graph_gives_transitive_edges_for_selected_versions() {
        let m = parse_go_mod(GOMOD).unwrap();
        let graph = parse_mod_graph(
            "github.com/acme/server github.com/prometheus/client_golang@v1.11.0\n\
             github.com/acme/server github.com/pkg/errors@v0.9.1\n\
             github.com/prometheus/client_golang@v1.11.0 github.com/beorn7/perks@v1.0.1\n\
             github.com/prometheus/client_golang@v1.10.0 github.com/beorn7/perks@v1.0.0\n\
             github.com/beorn7/perks@v1.0.1 golang.org/x/sys@v0.0.9\n",
        )
        .unwrap();
        let s = generate_go(&m, Some(&graph));
        assert_eq!(s.components.len(), 4);
        let d = compute_depths(&s.graph());
        assert_eq!(d.depth("pkg:golang/github.com/beorn7/perks@v1.0.1"), Some(1));
        assert_eq!(d.depth("pkg:golang/golang.org/x/sys@v0.1.0"), Some(2));
        assert_eq!(d.depth("pkg:golang/github.com/pkg/errors@v0.9.0"), Some(0));
        assert!(d.unreachable.is_empty());
        // and the result survives a CycloneDX round trip
        let again = parse_sbom(&to_cyclonedx_bytes(&s)).unwrap();
        assert_eq!(again.dependencies, s.dependencies);
    }

    #[test]
    fn without_graph_indirect_modules_are_unreachable() {
        let s = generate_go(&parse_go_mod(GOMOD).unwrap(), None);
        let d = compute_depths(&s.graph());
        assert_eq!(d.depths.len(), 2);
        assert_eq!(d.unreachable.len(), 2);
    }

    #[test]
    fn synthesizes_from_gopkg_lock() {
        let lock = r#"
[[projects]]
  name = "github.com/pkg/errors"
  version = "v0.8.1"
  revision = "ba968bfe8b2f7e042a574c888954fccecfa385b4"

[[projects]]
  branch = "master"
  name = "golang.org/x/sys"
  revision = "1b2967e3c290b7c545b3db0deeda16e9be4f98a2"
"#;
        let manifest = "[[constraint]]\n  name = \"github.com/pkg/errors\"\n  version = \"0.8.1\"\n";
        let text = synthesize_go_mod("example.com/legacy", lock, Some(manifest)).unwrap();
        let m = parse_go_mod(&text).unwrap();
        assert_eq!(m.module, "example.com/legacy");
        assert_eq!(m.requires[0], Require { path: "github.com/pkg/errors".into(), version: "v0.8.1".into(), indirect: false });
        assert_eq!(m.requires[1].version, "v0.0.0-00010101000000-1b2967e3c290");
        assert!(m.requires[1].indirect);
        let e = synthesize_go_mod("m", "[[projects]]\nname = 3\n", None).unwrap_err();
        assert!(matches!(e, GenError::Parse { line: 2, .. }), "{e}");
    }
}
