//! NVD JSON 1.1 feed documents.

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::Deserialize;
use serde_json::Value;

use super::cpe::{AliasTable, Cpe};
use super::FeedError;
use crate::model::{
    derive_severity, is_cve_id, AffectedSpec, SpecSource, VersionBound, VersionRange,
    Vulnerability,
};
use crate::purl::{key_ecosystem, range_is_well_formed};

#[derive(Deserialize)]
struct FeedDoc {
    #[serde(rename = "CVE_Items")]
    items: Vec<Value>,
}

#[derive(Deserialize)]
struct Item {
    cve: CveBody,
    #[serde(default)]
    configurations: Option<Configurations>,
    #[serde(default)]
    impact: Option<Impact>,
    #[serde(rename = "publishedDate")]
    published: String,
    #[serde(rename = "lastModifiedDate")]
    last_modified: String,
}

#[derive(Deserialize)]
struct CveBody {
    #[serde(default)]
    description: Option<Descriptions>,
}

#[derive(Deserialize)]
struct Descriptions {
    #[serde(default)]
    description_data: Vec<LangString>,
}

#[derive(Deserialize)]
struct LangString {
    lang: String,
    value: String,
}

#[derive(Deserialize)]
struct Configurations {
    #[serde(default)]
    nodes: Vec<Node>,
}

#[derive(Deserialize)]
struct Node {
    #[serde(default)]
    children: Vec<Node>,
    #[serde(default)]
    cpe_match: Vec<CpeMatch>,
}

#[derive(Deserialize)]
struct CpeMatch {
    vulnerable: bool,
    #[serde(rename = "cpe23Uri")]
    cpe23_uri: String,
    #[serde(rename = "versionStartIncluding")]
    start_incl: Option<String>,
    #[serde(rename = "versionStartExcluding")]
    start_excl: Option<String>,
    #[serde(rename = "versionEndIncluding")]
    end_incl: Option<String>,
    #[serde(rename = "versionEndExcluding")]
    end_excl: Option<String>,
}

#[derive(Deserialize)]
struct Impact {
    #[serde(rename = "baseMetricV3")]
    v3: Option<MetricV3>,
    #[serde(rename = "baseMetricV2")]
    v2: Option<MetricV2>,
}

#[derive(Deserialize)]
struct MetricV3 {
    #[serde(rename = "cvssV3")]
    cvss: Score,
}

#[derive(Deserialize)]
struct MetricV2 {
    #[serde(rename = "cvssV2")]
    cvss: Score,
}

#[derive(Deserialize)]
struct Score {
    #[serde(rename = "baseScore")]
    base_score: f64,
}

/// Result of parsing one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedEntry {
    pub vulnerability: Vulnerability,
    /// Specs whose bounds could not be used.
    pub dropped_specs: usize,
    /// `vendor:product` pairs with no alias.
    pub unmatched: Vec<String>,
}

/// Outcome of parsing a whole feed payload.
#[derive(Debug, Default)]
pub struct ParsedFeed {
    pub entries: Vec<Vulnerability>,
    pub skipped: Vec<String>,
    pub dropped_specs: usize,
    /// `vendor:product` → first CVE that referenced it.
    pub unmatched: BTreeMap<String, String>,
    /// CVE ids that appeared more than once in this payload.
    pub duplicates: Vec<String>,
}

fn parse_time(raw: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc));
    }
    let trimmed = raw.trim_end_matches('Z');
    for fmt in ["%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(trimmed, fmt) {
            return Some(t.and_utc());
        }
    }
    None
}

fn collect_matches<'a>(nodes: &'a [Node], out: &mut Vec<&'a CpeMatch>) {
    for n in nodes {
        out.extend(n.cpe_match.iter().filter(|m| m.vulnerable));
        collect_matches(&n.children, out);
    }
}

fn spec_range(m: &CpeMatch, cpe: &Cpe) -> Option<VersionRange> {
    let start = match (&m.start_incl, &m.start_excl) {
        (Some(v), None) => Some(VersionBound::inclusive(v)),
        (None, Some(v)) => Some(VersionBound::exclusive(v)),
        (None, None) => None,
        (Some(_), Some(_)) => return None,
    };
    let end = match (&m.end_incl, &m.end_excl) {
        (Some(v), None) => Some(VersionBound::inclusive(v)),
        (None, Some(v)) => Some(VersionBound::exclusive(v)),
        (None, None) => None,
        (Some(_), Some(_)) => return None,
    };
    if start.is_some() || end.is_some() {
        return Some(VersionRange::bounded(start, end));
    }
    match cpe.concrete_version() {
        Some(v) => Some(VersionRange::exact([v])),
        // `*` with no bounds: every version
        None if cpe.version_is_wildcard() => Some(VersionRange::bounded(None, None)),
        None => None,
    }
}

/// Parses one `CVE_Items` element. `Ok(None)` means the entry has no CVE id
/// and is skipped.
pub fn parse_nvd_entry(raw: &Value, aliases: &AliasTable) -> Result<Option<ParsedEntry>, FeedError> {
    let id = match raw.pointer("/cve/CVE_data_meta/ID").and_then(Value::as_str) {
        Some(id) if !id.trim().is_empty() => id.trim().to_string(),
        _ => return Ok(None),
    };
    let schema = |path: String, message: String| FeedError::Schema {
        entry: id.clone(),
        path,
        message,
    };
    if !is_cve_id(&id) {
        return Err(schema("cve.CVE_data_meta.ID".into(), "not a CVE identifier".into()));
    }
    let item: Item = serde_path_to_error::deserialize(raw)
        .map_err(|e| schema(e.path().to_string(), e.inner().to_string()))?;

    let published = parse_time(&item.published)
        .ok_or_else(|| schema("publishedDate".into(), format!("bad timestamp {:?}", item.published)))?;
    let last_modified = parse_time(&item.last_modified).ok_or_else(|| {
        schema("lastModifiedDate".into(), format!("bad timestamp {:?}", item.last_modified))
    })?;

    let v3 = item.impact.as_ref().and_then(|i| i.v3.as_ref()).map(|m| m.cvss.base_score);
    let v2 = item.impact.as_ref().and_then(|i| i.v2.as_ref()).map(|m| m.cvss.base_score);
    let (severity, _) = derive_severity(v3, v2).map_err(|e| schema("impact".into(), e.to_string()))?;

    let description = item
        .cve
        .description
        .map(|d| d.description_data)
        .unwrap_or_default()
        .into_iter()
        .find(|d| d.lang == "en")
        .map(|d| d.value)
        .unwrap_or_default();

    let mut matches = Vec::new();
    if let Some(conf) = &item.configurations {
        collect_matches(&conf.nodes, &mut matches);
    }
    let mut affected: Vec<AffectedSpec> = Vec::new();
    let mut dropped = 0;
    let mut unmatched = Vec::new();
    for m in matches {
        let Some(cpe) = Cpe::parse(&m.cpe23_uri) else {
            dropped += 1;
            continue;
        };
        let keys = aliases.lookup(&cpe);
        if keys.is_empty() {
            let vp = cpe.vendor_product();
            if !unmatched.contains(&vp) {
                unmatched.push(vp);
            }
            continue;
        }
        let Some(range) = spec_range(m, &cpe) else {
            dropped += 1;
            continue;
        };
        for key in keys {
            if !range_is_well_formed(key_ecosystem(key), &range) {
                dropped += 1;
                continue;
            }
            let spec = AffectedSpec {
                product_key: key.clone(),
                range: range.clone(),
                source_form: SpecSource::Cpe,
            };
            if !affected.contains(&spec) {
                affected.push(spec);
            }
        }
    }

    let vulnerability = Vulnerability {
        cve_id: id.clone(),
        published,
        last_modified,
        cvss_v3_base: v3,
        cvss_v2_base: v2,
        severity,
        affected,
        description,
    };
    vulnerability
        .validate()
        .map_err(|e| schema(String::new(), e.to_string()))?;
    Ok(Some(ParsedEntry {
        vulnerability,
        dropped_specs: dropped,
        unmatched,
    }))
}

/// Parses a decompressed feed document. Any schema violation aborts the whole
/// feed so a half-understood payload never reaches the store.
pub fn parse_feed(json: &[u8], aliases: &AliasTable) -> Result<ParsedFeed, FeedError> {
    let doc: FeedDoc = {
        let de = &mut serde_json::Deserializer::from_slice(json);
        serde_path_to_error::deserialize(de).map_err(|e| FeedError::Schema {
            entry: "<document>".into(),
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?
    };
    let mut out = ParsedFeed::default();
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, raw) in doc.items.iter().enumerate() {
        match parse_nvd_entry(raw, aliases)? {
            None => out.skipped.push(format!("CVE_Items[{idx}]: missing CVE id")),
            Some(p) => {
                out.dropped_specs += p.dropped_specs;
                for vp in p.unmatched {
                    out.unmatched
                        .entry(vp)
                        .or_insert_with(|| p.vulnerability.cve_id.clone());
                }
                let v = p.vulnerability;
                match by_id.get(&v.cve_id) {
                    // duplicate within one payload: the newer last_modified wins
                    Some(&at) => {
                        out.duplicates.push(v.cve_id.clone());
                        if v.last_modified >= out.entries[at].last_modified {
                            out.entries[at] = v;
                        }
                    }
                    None => {
                        by_id.insert(v.cve_id.clone(), out.entries.len());
                        out.entries.push(v);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Severity;
    use serde_json::json;

    fn entry(id: &str, v3: Option<f64>, v2: Option<f64>) -> Value {
        let mut impact = serde_json::Map::new();
        if let Some(s) = v3 {
            impact.insert("baseMetricV3".into(), json!({"cvssV3": {"baseScore": s}}));
        }
        if let Some(s) = v2 {
            impact.insert("baseMetricV2".into(), json!({"cvssV2": {"baseScore": s}}));
        }
        json!({
            "cve": {"CVE_data_meta": {"ID": id}, "description": {"description_data": [{"lang": "en", "value": "d"}]}},
            "configurations": {"nodes": [{"operator": "OR", "cpe_match": [{
                "vulnerable": true,
                "cpe23Uri": "cpe:2.3:a:apache:log4j:*:*:*:*:*:*:*:*",
                "versionStartIncluding": "2.0-beta9",
                "versionEndExcluding": "2.15.0"
            }]}]},
            "impact": impact,
            "publishedDate": "2021-12-10T10:15Z",
            "lastModifiedDate": "2022-02-01T11:00Z"
        })
    }

    #[test]
    fn severity_from_scores() {
        let t = AliasTable::builtin();
        let cases = [
            (Some(10.0), None, Severity::Critical),
            (Some(7.5), Some(5.0), Severity::High),
            (None, Some(5.0), Severity::Medium),
        ];
        for (v3, v2, sev) in cases {
            let p = parse_nvd_entry(&entry("CVE-2021-44228", v3, v2), &t).unwrap().unwrap();
            assert_eq!(p.vulnerability.severity, sev);
        }
    }

    #[test]
    fn ranges_and_dates() {
        let p = parse_nvd_entry(&entry("CVE-2021-44228", Some(10.0), None), &AliasTable::builtin())
            .unwrap()
            .unwrap();
        let v = p.vulnerability;
        assert_eq!(v.published.to_rfc3339(), "2021-12-10T10:15:00+00:00");
        assert_eq!(v.affected.len(), 1);
        assert_eq!(v.affected[0].product_key, "maven:org.apache.logging.log4j/log4j-core");
        assert_eq!(
            v.affected[0].range,
            VersionRange::bounded(
                Some(VersionBound::inclusive("2.0-beta9")),
                Some(VersionBound::exclusive("2.15.0"))
            )
        );
    }

    #[test]
    fn exact_cpe_version_with_update() {
        let mut e = entry("CVE-2021-44228", Some(10.0), None);
        e["configurations"]["nodes"][0]["cpe_match"] = json!([{
            "vulnerable": true, "cpe23Uri": "cpe:2.3:a:apache:log4j:2.0:rc1:*:*:*:*:*:*"
        }, {
            "vulnerable": false, "cpe23Uri": "cpe:2.3:a:apache:log4j:2.0:rc2:*:*:*:*:*:*"
        }]);
        let v = parse_nvd_entry(&e, &AliasTable::builtin()).unwrap().unwrap().vulnerability;
        assert_eq!(v.affected.len(), 1);
        assert_eq!(v.affected[0].range, VersionRange::exact(["2.0-rc1"]));
    }

    #[test]
    fn unknown_cpe_is_reported_not_guessed() {
        let p = parse_nvd_entry(&entry("CVE-2021-44228", Some(10.0), None), &AliasTable::empty())
            .unwrap()
            .unwrap();
        assert!(p.vulnerability.affected.is_empty());
        assert_eq!(p.unmatched, vec!["apache:log4j".to_string()]);
    }

    #[test]
    fn conflicting_bounds_drop_spec() {
        let mut e = entry("CVE-2021-44228", Some(10.0), None);
        e["configurations"]["nodes"][0]["cpe_match"][0]["versionEndIncluding"] = json!("2.16");
        let p = parse_nvd_entry(&e, &AliasTable::builtin()).unwrap().unwrap();
        assert_eq!(p.dropped_specs, 1);
        assert!(p.vulnerability.affected.is_empty());
    }

    #[test]
    fn missing_id_is_skipped_and_schema_errors_name_entry() {
        let mut e = entry("CVE-2021-44228", Some(10.0), None);
        e["cve"]["CVE_data_meta"] = json!({});
        assert_eq!(parse_nvd_entry(&e, &AliasTable::builtin()).unwrap(), None);

        let mut e = entry("CVE-2021-44228", Some(10.0), None);
        e["impact"]["baseMetricV3"]["cvssV3"]["baseScore"] = json!("ten");
        let err = parse_nvd_entry(&e, &AliasTable::builtin()).unwrap_err().to_string();
        assert!(err.contains("CVE-2021-44228"), "{err}");
        assert!(err.contains("impact.baseMetricV3.cvssV3.baseScore"), "{err}");

        let mut e = entry("CVE-2021-44228", Some(11.0), None);
        e["publishedDate"] = json!("2021-12-10T10:15Z");
        assert!(parse_nvd_entry(&e, &AliasTable::builtin()).is_err());
    }

    #[test]
    fn feed_level_parse() {
        let mut no_id = entry("CVE-2021-44228", Some(10.0), None);
        no_id["cve"]["CVE_data_meta"] = json!({"ASSIGNER": "x"});
        let doc = json!({"CVE_data_type": "CVE", "CVE_Items": [
            entry("CVE-2021-44228", Some(10.0), None),
            no_id,
            entry("CVE-2022-21698", Some(7.5), None),
        ]});
        let parsed = parse_feed(doc.to_string().as_bytes(), &AliasTable::builtin()).unwrap();
        assert_eq!(parsed.entries.len(), 2);
        assert_eq!(parsed.skipped.len(), 1);
        assert!(parse_feed(b"{\"CVE_Items\": 3}", &AliasTable::builtin()).is_err());
    }
}
