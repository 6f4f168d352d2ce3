use std::collections::{BTreeMap, BTreeSet};

use super::{Sbom, SbomComponent, SbomError, SbomMetadata, VersionConflict};
use crate::purl::format_purl;

/// Packages present in more than one version.
pub fn find_conflicts(components: &[SbomComponent]) -> Vec<VersionConflict> {
    let mut by_package: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for c in components.iter().filter(|c| !c.synthetic) {
        by_package
            .entry(format_purl(&c.component.purl.without_version()))
            .or_default()
            .insert(c.component.purl.version.clone().unwrap_or_default());
    }
    by_package
        .into_iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|(package, versions)| VersionConflict {
            package,
            versions: versions.into_iter().collect(),
        })
        .collect()
}

/// Union of several BOMs for one release. Output depends only on the set of
/// inputs, not their order.
pub fn merge_sboms(parts: &[Sbom]) -> Result<Sbom, SbomError> {
    if parts.is_empty() {
        return Err(SbomError::EmptyMerge);
    }
    let mut tools = BTreeSet::new();
    let mut timestamp = None;
    let mut components: BTreeMap<String, SbomComponent> = BTreeMap::new();
    let mut dependencies: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut roots: Option<BTreeSet<String>> = None;

    for part in parts {
        tools.extend(part.metadata.tools.iter().cloned());
        timestamp = timestamp.max(part.metadata.timestamp);
        for c in &part.components {
            components
                .entry(c.key.clone())
                .and_modify(|existing| {
                    for (alg, content) in &c.component.hashes {
                        existing.component.hashes.entry(alg.clone()).or_insert_with(|| content.clone());
                    }
                })
                .or_insert_with(|| c.clone());
        }
        for (from, to) in &part.dependencies {
            dependencies.entry(from.clone()).or_default().extend(to.iter().cloned());
        }
        if let Some(r) = &part.subject_depends_on {
            roots.get_or_insert_with(BTreeSet::new).extend(r.iter().cloned());
        }
    }
    // hash maps merge first-wins; make the winner independent of part order
    for c in components.values_mut() {
        for part in parts {
            if let Some(pc) = part.component(&c.key) {
                for (alg, content) in &pc.component.hashes {
                    let slot = c.component.hashes.get_mut(alg).expect("union holds every alg");
                    if content < slot {
                        *slot = content.clone();
                    }
                }
            }
        }
    }

    let subject = parts
        .iter()
        .filter_map(|p| p.metadata.subject.as_ref())
        .min_by(|a, b| a.key.cmp(&b.key))
        .cloned();
    let spec_version = parts.iter().map(|p| p.spec_version.clone()).max().unwrap_or_default();
    let components: Vec<SbomComponent> = components.into_values().collect();
    let conflicts = find_conflicts(&components);
    Ok(Sbom {
        spec_version,
        metadata: SbomMetadata {
            tools: tools.into_iter().collect(),
            timestamp,
            subject,
        },
        components,
        subject_depends_on: roots,
        dependencies,
        conflicts,
    })
}
