//! CycloneDX JSON (1.4/1.5) documents, merged per release, and the
//! dependency graph derived from them.
//!
//! After parsing, every component is keyed by its canonical purl, so refs from
//! different generators line up when several partial BOMs are merged.
//! Components without a purl get a `pkg:generic/...?synthetic=true` key; they
//! count as components but never take part in matching.

mod graph;
mod merge;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{Component, PackageUrl};
use crate::purl::{format_purl, parse_purl};

pub use graph::{compute_depths, depth_histogram, DependencyGraph, DepthAssignment, HISTOGRAM_BUCKETS};
pub use merge::{find_conflicts, merge_sboms};

pub const SYNTHETIC_QUALIFIER: &str = "synthetic";
pub const SUPPORTED_SPEC_VERSIONS: [&str; 2] = ["1.4", "1.5"];

#[derive(Debug, Error, PartialEq)]
pub enum SbomError {
    #[error("malformed SBOM at {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("not a CycloneDX document (bomFormat {0:?})")]
    NotCycloneDx(String),
    #[error("unsupported CycloneDX spec version {0:?} (supported: 1.4, 1.5)")]
    UnsupportedVersion(String),
    #[error("duplicate component ref {0:?}")]
    DuplicateRef(String),
    #[error("dependency refers to unknown ref {0:?}")]
    DanglingRef(String),
    #[error("cannot merge an empty set of SBOMs")]
    EmptyMerge,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tool {
    pub vendor: Option<String>,
    pub name: String,
    pub version: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbomComponent {
    /// Canonical purl text; doubles as the graph node id.
    pub key: String,
    pub kind: String,
    pub component: Component,
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbomMetadata {
    pub tools: Vec<Tool>,
    pub timestamp: Option<DateTime<Utc>>,
    /// The subject (the project the BOM describes), if declared.
    pub subject: Option<SbomComponent>,
}

/// Two or more versions of one package in the same BOM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionConflict {
    pub package: String,
    pub versions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sbom {
    pub spec_version: String,
    pub metadata: SbomMetadata,
    /// Sorted by key, unique.
    pub components: Vec<SbomComponent>,
    /// Direct dependencies of the subject; `None` when the document has no
    /// dependency entry for it.
    pub subject_depends_on: Option<BTreeSet<String>>,
    /// Component-level edges `ref -> depends on`.
    pub dependencies: BTreeMap<String, BTreeSet<String>>,
    pub conflicts: Vec<VersionConflict>,
}

impl Sbom {
    pub fn component(&self, key: &str) -> Option<&SbomComponent> {
        self.components
            .binary_search_by(|c| c.key.as_str().cmp(key))
            .ok()
            .map(|i| &self.components[i])
    }

    pub fn edge_count(&self) -> usize {
        self.dependencies.values().map(BTreeSet::len).sum()
    }

    pub fn graph(&self) -> DependencyGraph {
        DependencyGraph::from_sbom(self)
    }
}

// ---- wire format -------------------------------------------------------

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawBom {
    bom_format: String,
    spec_version: String,
    #[serde(default)]
    metadata: Option<RawMetadata>,
    #[serde(default)]
    components: Vec<RawComponent>,
    #[serde(default)]
    dependencies: Vec<RawDependency>,
}

#[derive(Deserialize)]
struct RawMetadata {
    #[serde(default)]
    timestamp: Option<String>,
    #[serde(default)]
    tools: Option<RawTools>,
    #[serde(default)]
    component: Option<RawComponent>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawTools {
    Legacy(Vec<RawTool>),
    Structured {
        #[serde(default)]
        components: Vec<RawTool>,
        #[serde(default)]
        services: Vec<RawTool>,
    },
}

#[derive(Deserialize)]
struct RawTool {
    #[serde(default)]
    vendor: Option<String>,
    #[serde(default)]
    group: Option<String>,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    version: Option<String>,
}

#[derive(Deserialize)]
struct RawComponent {
    #[serde(rename = "type", default)]
    kind: Option<String>,
    #[serde(rename = "bom-ref", default)]
    bom_ref: Option<String>,
    #[serde(default)]
    group: Option<String>,
    #[serde(default)]
    name: String,
    #[serde(default)]
    version: Option<String>,
    #[serde(default)]
    purl: Option<String>,
    #[serde(default)]
    hashes: Vec<RawHash>,
    #[serde(default)]
    components: Vec<RawComponent>,
}

#[derive(Deserialize)]
struct RawHash {
    alg: String,
    content: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawDependency {
    #[serde(rename = "ref")]
    reference: String,
    #[serde(default)]
    depends_on: Vec<String>,
}

fn synthetic_purl(c: &RawComponent) -> PackageUrl {
    let name = if c.name.trim().is_empty() {
        c.bom_ref.clone().unwrap_or_else(|| "unnamed".into())
    } else {
        c.name.clone()
    };
    let mut p = PackageUrl::new(
        "generic",
        c.group.as_deref().filter(|g| !g.is_empty()),
        &name,
        c.version.as_deref().filter(|v| !v.is_empty()),
    );
    p.qualifiers.insert(SYNTHETIC_QUALIFIER.into(), "true".into());
    p
}

fn convert_component(c: &RawComponent) -> SbomComponent {
    let parsed = c.purl.as_deref().and_then(|p| parse_purl(p).ok());
    let synthetic = parsed.is_none();
    let purl = parsed.unwrap_or_else(|| synthetic_purl(c));
    let component = Component {
        group: c.group.clone().filter(|g| !g.is_empty()).or_else(|| purl.namespace.clone()),
        display_name: if c.name.is_empty() { purl.name.clone() } else { c.name.clone() },
        version: c
            .version
            .clone()
            .or_else(|| purl.version.clone())
            .unwrap_or_default(),
        hashes: c.hashes.iter().map(|h| (h.alg.clone(), h.content.to_lowercase())).collect(),
        analysis_state: crate::model::AnalysisState::New,
        purl,
    };
    SbomComponent {
        key: format_purl(&component.purl),
        kind: c.kind.clone().unwrap_or_else(|| "library".into()),
        component,
        synthetic,
    }
}

fn flatten<'a>(list: &'a [RawComponent], out: &mut Vec<&'a RawComponent>) {
    for c in list {
        out.push(c);
        flatten(&c.components, out);
    }
}

fn convert_tool(t: RawTool) -> Tool {
    Tool {
        vendor: t.vendor.or(t.group),
        name: t.name.unwrap_or_default(),
        version: t.version,
    }
}

fn malformed(e: serde_path_to_error::Error<serde_json::Error>) -> SbomError {
    SbomError::Malformed {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    }
}

/// Parses a CycloneDX JSON document.
pub fn parse_sbom(bytes: &[u8]) -> Result<Sbom, SbomError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let raw: RawBom = serde_path_to_error::deserialize(de).map_err(malformed)?;
    if raw.bom_format != "CycloneDX" {
        return Err(SbomError::NotCycloneDx(raw.bom_format));
    }
    if !SUPPORTED_SPEC_VERSIONS.contains(&raw.spec_version.as_str()) {
        return Err(SbomError::UnsupportedVersion(raw.spec_version));
    }

    let (tools, timestamp, subject_raw) = match raw.metadata {
        None => (Vec::new(), None, None),
        Some(m) => {
            let tools = match m.tools {
                None => Vec::new(),
                Some(RawTools::Legacy(list)) => list.into_iter().map(convert_tool).collect(),
                Some(RawTools::Structured { components, services }) => {
                    components.into_iter().chain(services).map(convert_tool).collect()
                }
            };
            let ts = match m.timestamp {
                None => None,
                Some(s) => Some(
                    DateTime::parse_from_rfc3339(&s)
                        .map_err(|e| SbomError::Malformed {
                            path: "metadata.timestamp".into(),
                            message: e.to_string(),
                        })?
                        .with_timezone(&Utc),
                ),
            };
            (tools, ts, m.component)
        }
    };

    // original ref -> canonical key
    let mut ref_map: BTreeMap<String, String> = BTreeMap::new();
    let subject = subject_raw.as_ref().map(convert_component);
    let subject_ref = subject_raw.as_ref().and_then(|s| s.bom_ref.clone());

    let mut flat = Vec::new();
    flatten(&raw.components, &mut flat);
    let mut by_key: BTreeMap<String, SbomComponent> = BTreeMap::new();
    for rc in flat {
        let sc = convert_component(rc);
        if let Some(r) = &rc.bom_ref {
            if ref_map.insert(r.clone(), sc.key.clone()).is_some() || subject_ref.as_deref() == Some(r) {
                return Err(SbomError::DuplicateRef(r.clone()));
            }
        }
        by_key
            .entry(sc.key.clone())
            .and_modify(|existing| {
                for (k, v) in &sc.component.hashes {
                    existing.component.hashes.entry(k.clone()).or_insert_with(|| v.clone());
                }
            })
            .or_insert(sc);
    }

    let resolve = |r: &str| -> Result<Option<String>, SbomError> {
        if subject_ref.as_deref() == Some(r) {
            return Ok(None);
        }
        ref_map
            .get(r)
            .cloned()
            .map(Some)
            .ok_or_else(|| SbomError::DanglingRef(r.to_string()))
    };

    let mut subject_depends_on: Option<BTreeSet<String>> = None;
    let mut dependencies: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for d in &raw.dependencies {
        let targets: Vec<Option<String>> =
            d.depends_on.iter().map(|t| resolve(t)).collect::<Result<_, _>>()?;
        let targets: BTreeSet<String> = targets.into_iter().flatten().collect();
        match resolve(&d.reference)? {
            None => subject_depends_on.get_or_insert_with(BTreeSet::new).extend(targets),
            Some(from) => {
                let entry = dependencies.entry(from.clone()).or_default();
                entry.extend(targets.into_iter().filter(|t| *t != from));
            }
        }
    }
    dependencies.retain(|_, v| !v.is_empty());

    let components: Vec<SbomComponent> = by_key.into_values().collect();
    let conflicts = merge::find_conflicts(&components);
    Ok(Sbom {
        spec_version: raw.spec_version,
        metadata: SbomMetadata {
            tools,
            timestamp,
            subject,
        },
        components,
        subject_depends_on,
        dependencies,
        conflicts,
    })
}

const SUBJECT_REF: &str = "subject";

fn component_json(c: &SbomComponent, bom_ref: &str) -> Value {
    let mut v = json!({
        "type": c.kind,
        "bom-ref": bom_ref,
        "name": c.component.display_name,
    });
    if let Some(g) = &c.component.group {
        v["group"] = json!(g);
    }
    if !c.component.version.is_empty() {
        v["version"] = json!(c.component.version);
    }
    if !c.synthetic {
        v["purl"] = json!(c.key);
    }
    if !c.component.hashes.is_empty() {
        v["hashes"] = Value::Array(
            c.component
                .hashes
                .iter()
                .map(|(alg, content)| json!({"alg": alg, "content": content}))
                .collect(),
        );
    }
    v
}

/// Writes the canonical CycloneDX 1.5 form: components sorted by purl,
/// dependencies sorted, subject ref `subject`.
pub fn to_cyclonedx_json(sbom: &Sbom) -> Value {
    let tools: Vec<Value> = sbom
        .metadata
        .tools
        .iter()
        .map(|t| {
            let mut v = json!({"name": t.name});
            if let Some(vendor) = &t.vendor {
                v["group"] = json!(vendor);
            }
            if let Some(ver) = &t.version {
                v["version"] = json!(ver);
            }
            v["type"] = json!("application");
            v
        })
        .collect();
    let mut metadata = json!({"tools": {"components": tools}});
    if let Some(ts) = sbom.metadata.timestamp {
        metadata["timestamp"] = json!(ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    }
    if let Some(s) = &sbom.metadata.subject {
        metadata["component"] = component_json(s, SUBJECT_REF);
    }
    let components: Vec<Value> = sbom.components.iter().map(|c| component_json(c, &c.key)).collect();
    let mut deps: Vec<Value> = Vec::new();
    if let Some(roots) = &sbom.subject_depends_on {
        if sbom.metadata.subject.is_some() {
            deps.push(json!({"ref": SUBJECT_REF, "dependsOn": roots}));
        }
    }
    for (from, to) in &sbom.dependencies {
        deps.push(json!({"ref": from, "dependsOn": to}));
    }
    json!({
        "bomFormat": "CycloneDX",
        "specVersion": "1.5",
        "version": 1,
        "metadata": metadata,
        "components": components,
        "dependencies": deps,
    })
}

pub fn to_cyclonedx_bytes(sbom: &Sbom) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&to_cyclonedx_json(sbom)).expect("json value serializes");
    out.push(b'\n');
    out
}
