//! Cargo: `Cargo.lock` plus `Cargo.toml` to a BOM.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use super::GenError;
use crate::model::{Component, PackageUrl};
use crate::purl::format_purl;
use crate::sbom::{find_conflicts, Sbom, SbomComponent, SbomMetadata, Tool};

#[derive(Deserialize)]
struct Lock {
    #[serde(default)]
    package: Vec<LockPackage>,
}

#[derive(Deserialize, Clone)]
struct LockPackage {
    name: String,
    version: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    checksum: Option<String>,
    #[serde(default)]
    dependencies: Vec<String>,
}

#[derive(Deserialize, Default)]
struct Manifest {
    #[serde(default)]
    package: Option<ManifestPackage>,
    #[serde(default)]
    dependencies: BTreeMap<String, toml::Value>,
    #[serde(default, rename = "dev-dependencies")]
    dev_dependencies: BTreeMap<String, toml::Value>,
    #[serde(default, rename = "build-dependencies")]
    build_dependencies: BTreeMap<String, toml::Value>,
    #[serde(default)]
    target: BTreeMap<String, TargetDeps>,
}

#[derive(Deserialize)]
struct ManifestPackage {
    name: String,
}

#[derive(Deserialize, Default)]
struct TargetDeps {
    #[serde(default)]
    dependencies: BTreeMap<String, toml::Value>,
    #[serde(default, rename = "dev-dependencies")]
    dev_dependencies: BTreeMap<String, toml::Value>,
    #[serde(default, rename = "build-dependencies")]
    build_dependencies: BTreeMap<String, toml::Value>,
}

fn toml_err(file: &str, text: &str, e: toml::de::Error) -> GenError {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
        .unwrap_or(0);
    GenError::Parse {
        file: file.into(),
        line,
        message: e.message().to_string(),
    }
}

fn line_of(text: &str, needle: &str) -> usize {
    text.lines()
        .position(|l| l.contains(needle))
        .map(|i| i + 1)
        .unwrap_or(0)
}

/// Crate names the manifest declares, after `package = "..."` renames.
fn declared_names(m: &Manifest) -> BTreeSet<String> {
    let mut tables: Vec<&BTreeMap<String, toml::Value>> =
        vec![&m.dependencies, &m.dev_dependencies, &m.build_dependencies];
    for t in m.target.values() {
        tables.extend([&t.dependencies, &t.dev_dependencies, &t.build_dependencies]);
    }
    let mut out = BTreeSet::new();
    for table in tables {
        for (key, spec) in table {
            let real = spec
                .get("package")
                .and_then(toml::Value::as_str)
                .unwrap_or(key);
            out.insert(real.to_string());
        }
    }
    out
}

fn cargo_component(p: &LockPackage) -> SbomComponent {
    let purl = PackageUrl::new("cargo", None, &p.name, Some(&p.version));
    let mut component = Component::from_purl(purl.clone());
    if let Some(sum) = &p.checksum {
        component.hashes.insert("SHA-256".into(), sum.to_lowercase());
    }
    SbomComponent {
        key: format_purl(&purl),
        kind: "library".into(),
        component,
        synthetic: false,
    }
}

/// Builds a BOM from a lockfile. Path packages (no `source`) are the
/// project's own crates: the manifest's package is the subject and is left
/// out of the component list; in a virtual workspace every path package is.
pub fn generate_cargo(lock_text: &str, manifest_text: &str) -> Result<Sbom, GenError> {
    let lock: Lock = toml::from_str(lock_text).map_err(|e| toml_err("Cargo.lock", lock_text, e))?;
    let manifest: Manifest =
        toml::from_str(manifest_text).map_err(|e| toml_err("Cargo.toml", manifest_text, e))?;

    let mut by_name: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in lock.package.iter().enumerate() {
        by_name.entry(p.name.as_str()).or_default().push(i);
    }
    let resolve = |dep: &str| -> Result<usize, GenError> {
        let mut parts = dep.splitn(3, ' ');
        let name = parts.next().unwrap_or_default();
        let version = parts.next();
        let source = parts.next().map(|s| s.trim_start_matches('(').trim_end_matches(')'));
        let candidates = by_name.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let hits: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| version.is_none_or(|v| lock.package[i].version == v))
            .filter(|&i| source.is_none_or(|s| lock.package[i].source.as_deref() == Some(s)))
            .collect();
        match hits.as_slice() {
            [one] => Ok(*one),
            [] => Err(GenError::Parse {
                file: "Cargo.lock".into(),
                line: line_of(lock_text, &format!("\"{dep}\"")),
                message: format!("dependency {dep:?} names no package in the lockfile"),
            }),
            _ => Err(GenError::Parse {
                file: "Cargo.lock".into(),
                line: line_of(lock_text, &format!("\"{dep}\"")),
                message: format!("dependency {dep:?} is ambiguous"),
            }),
        }
    };

    let subjects: BTreeSet<usize> = match &manifest.package {
        Some(pkg) => lock
            .package
            .iter()
            .enumerate()
            .filter(|(_, p)| p.source.is_none() && p.name == pkg.name)
            .map(|(i, _)| i)
            .collect(),
        None => lock
            .package
            .iter()
            .enumerate()
            .filter(|(_, p)| p.source.is_none())
            .map(|(i, _)| i)
            .collect(),
    };
    if manifest.package.is_some() && subjects.is_empty() {
        return Err(GenError::Parse {
            file: "Cargo.lock".into(),
            line: 0,
            message: "the manifest's package is missing from the lockfile".into(),
        });
    }
    let declared = declared_names(&manifest);

    let mut components: BTreeMap<String, SbomComponent> = BTreeMap::new();
    let mut key_of: BTreeMap<usize, String> = BTreeMap::new();
    for (i, p) in lock.package.iter().enumerate() {
        if subjects.contains(&i) {
            continue;
        }
        let c = cargo_component(p);
        key_of.insert(i, c.key.clone());
        components.insert(c.key.clone(), c);
    }

    let mut roots = BTreeSet::new();
    let mut dependencies: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, p) in lock.package.iter().enumerate() {
        for dep in &p.dependencies {
            let j = resolve(dep)?;
            if subjects.contains(&i) {
                let named = manifest.package.is_none() || declared.contains(&lock.package[j].name);
                if named && !subjects.contains(&j) {
                    roots.insert(key_of[&j].clone());
                }
            } else if let Some(to) = key_of.get(&j) {
                dependencies.entry(key_of[&i].clone()).or_default().insert(to.clone());
            }
        }
    }

    let subject = manifest.package.as_ref().map(|pkg| {
        let version = subjects
            .iter()
            .next()
            .map(|&i| lock.package[i].version.clone());
        let purl = PackageUrl::new("cargo", None, &pkg.name, version.as_deref());
        SbomComponent {
            key: format_purl(&purl),
            kind: "application".into(),
            component: Component::from_purl(purl),
            synthetic: false,
        }
    });
    let components: Vec<SbomComponent> = components.into_values().collect();
    let conflicts = find_conflicts(&components);
    Ok(Sbom {
        spec_version: "1.5".into(),
        metadata: SbomMetadata {
            tools: vec![Tool {
                vendor: Some("depwatch".into()),
                name: "cargo-lock-generator".into(),
                version: Some(env!("CARGO_PKG_VERSION").into()),
            }],
            timestamp: None,
            subject,
        },
        components,
        subject_depends_on: Some(roots),
        dependencies,
        conflicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sbom::compute_depths;

    const MANIFEST: &str = r#"
[package]
name = "app"
version = "0.1.0"

[dependencies]
serde = "1"
rx = { package = "regex", version = "1" }

[dev-dependencies]
tempfile = "3"
"#;

    const LOCK: &str = r#"
version = 3

[[package]]
name = "app"
version = "0.1.0"
dependencies = ["serde", "regex", "tempfile"]

[[package]]
name = "serde"
version = "1.0.0"
source = "registry+https://github.com/rust-lang/crates.io-index"
checksum = "AB12"

[[package]]
name = "regex"
version = "1.5.0"
source = "registry+https://github.com/rust-lang/crates.io-index"
dependencies = ["memchr 2.4.0"]

[[package]]
name = "memchr"
version = "2.4.0"
source = "registry+https://github.com/rust-lang/crates.io-index"

[[package]]
name = "memchr"
version = "1.0.0"
source = "registry+https://github.com/rust-lang/crates.io-index"

[[package]]
name = "tempfile"
version = "3.0.0"
source = "registry+https://github.com/rust-lang/crates.io-index"
dependencies = ["memchr 1.0.0 (registry+https://github.com/rust-lang/crates.io-index)"]
"#;

    #[test]
    fn builds_graph_and_roots() {
        let s = generate_cargo(LOCK, MANIFEST).unwrap();
        assert_eq!(s.components.len(), 5);
        assert_eq!(s.edge_count(), 2);
        let roots = s.subject_depends_on.clone().unwrap();
        assert_eq!(roots.len(), 3);
        assert!(roots.contains("pkg:cargo/regex@1.5.0"));
        let d = compute_depths(&s.graph());
        assert_eq!(d.depth("pkg:cargo/memchr@2.4.0"), Some(1));
        assert_eq!(s.component("pkg:cargo/serde@1.0.0").unwrap().component.hashes["SHA-256"], "ab12");
        assert_eq!(s.conflicts.len(), 1);
        assert_eq!(s.metadata.subject.as_ref().unwrap().key, "pkg:cargo/app@0.1.0");
    }

    #[test]
    fn missing_package_is_a_parse_error_with_line() {
        let broken = LOCK.replace("\"memchr 2.4.0\"", "\"ghost 0.1.0\"");
        let e = generate_cargo(&broken, MANIFEST).unwrap_err();
        match e {
            GenError::Parse { line, message, .. } => {
                assert_eq!(line, 19);
                assert!(message.contains("ghost"));
            }
            other => panic!("{other}"),
        }
        let ambiguous = LOCK.replace("\"memchr 2.4.0\"", "\"memchr\"");
        assert!(generate_cargo(&ambiguous, MANIFEST).is_err());
    }

    #[test]
    fn unparseable_lock_reports_line() {
        let e = generate_cargo("[[package]]\nname = \"a\"\nversion = 3\n", MANIFEST).unwrap_err();
        assert!(matches!(e, GenError::Parse { line: 3, .. }), "{e}");
    }

    #[test]
    fn virtual_workspace_uses_all_path_packages() {
        let lock = r#"
[[package]]
name = "a"
version = "0.1.0"
dependencies = ["b", "x"]

[[package]]
name = "b"
version = "0.1.0"
dependencies = ["y"]

[[package]]
name = "x"
version = "1.0.0"
source = "registry+https://github.com/rust-lang/crates.io-index"

[[package]]
name = "y"
version = "1.0.0"
source = "registry+https://github.com/rust-lang/crates.io-index"
"#;
        let s = generate_cargo(lock, "[workspace]\nmembers = [\"a\", \"b\"]\n").unwrap();
        assert_eq!(s.components.len(), 2);
        assert_eq!(s.subject_depends_on.unwrap().len(), 2);
    }
}
