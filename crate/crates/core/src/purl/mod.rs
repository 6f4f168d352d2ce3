//! Package URL parsing and formatting, plus ecosystem-aware version ordering.
//!
//! Canonical form: lowercase scheme and type, namespace/name/version
//! percent-encoded, qualifiers sorted by key, subpath segments cleaned of
//! `.`/`..` and empty parts.

mod maven;
mod pep440;
mod version;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use thiserror::Error;

use crate::model::{PackageUrl, VersionRange};

pub use version::{compare_versions, family_of, version_in_range, VersionFamily};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PurlError {
    #[error("missing \"pkg:\" scheme in {0:?}")]
    MissingScheme(String),
    #[error("invalid package type {0:?}")]
    BadType(String),
    #[error("empty package name in {0:?}")]
    EmptyName(String),
    #[error("malformed qualifier {0:?}")]
    BadQualifier(String),
    #[error("invalid percent-encoding in segment {0:?}")]
    BadEncoding(String),
    #[error("invalid namespace segment in {0:?}")]
    BadNamespace(String),
}

const SEGMENT: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~')
    .remove(b':');

const QUALIFIER_VALUE: &AsciiSet = &SEGMENT.remove(b'/');

fn decode(segment: &str) -> Result<String, PurlError> {
    percent_decode_str(segment)
        .decode_utf8()
        .map(|s| s.into_owned())
        .map_err(|_| PurlError::BadEncoding(segment.to_string()))
}

fn valid_type(t: &str) -> bool {
    let mut chars = t.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '+' | '-'))
}

fn valid_qualifier_key(k: &str) -> bool {
    let mut chars = k.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '.' || c == '_' || c == '-')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Parses a package URL.
pub fn parse_purl(text: &str) -> Result<PackageUrl, PurlError> {
    let text = text.trim();
    let (rest, subpath) = match text.split_once('#') {
        Some((head, sub)) => (head, clean_subpath(sub)?),
        None => (text, None),
    };
    let (rest, qualifiers) = match rest.split_once('?') {
        Some((head, q)) => (head, parse_qualifiers(q)?),
        None => (rest, BTreeMap::new()),
    };

    let Some((scheme, rest)) = rest.split_once(':') else {
        return Err(PurlError::MissingScheme(text.to_string()));
    };
    if !scheme.eq_ignore_ascii_case("pkg") {
        return Err(PurlError::MissingScheme(text.to_string()));
    }
    let rest = rest.trim_start_matches('/');

    let Some((ptype, rest)) = rest.split_once('/') else {
        return Err(PurlError::EmptyName(text.to_string()));
    };
    let ecosystem = ptype.to_ascii_lowercase();
    if !valid_type(&ecosystem) {
        return Err(PurlError::BadType(ptype.to_string()));
    }

    let rest = rest.trim_end_matches('/');
    // '@' only separates a version after the last path separator; npm scopes
    // such as "@angular" sit in the namespace.
    let last_slash = rest.rfind('/').map(|i| i + 1).unwrap_or(0);
    let (path, version) = match rest[last_slash..].rfind('@') {
        Some(at) => {
            let at = last_slash + at;
            (&rest[..at], Some(decode(&rest[at + 1..])?))
        }
        None => (rest, None),
    };
    let version = version.filter(|v| !v.is_empty());

    let (namespace_raw, name_raw) = match path.rsplit_once('/') {
        Some((ns, n)) => (Some(ns), n),
        None => (None, path),
    };
    let name = decode(name_raw)?;
    if name.is_empty() {
        return Err(PurlError::EmptyName(text.to_string()));
    }
    let namespace = match namespace_raw {
        Some(ns) => {
            let segments = ns
                .split('/')
                .filter(|s| !s.is_empty())
                .map(decode)
                .collect::<Result<Vec<_>, _>>()?;
            if segments.iter().any(|s| s.contains('/')) {
                return Err(PurlError::BadNamespace(ns.to_string()));
            }
            (!segments.is_empty()).then(|| segments.join("/"))
        }
        None => None,
    };

    Ok(PackageUrl {
        ecosystem,
        namespace,
        name,
        version,
        qualifiers,
        subpath,
    })
}

fn parse_qualifiers(q: &str) -> Result<BTreeMap<String, String>, PurlError> {
    let mut out = BTreeMap::new();
    for pair in q.split('&').filter(|p| !p.is_empty()) {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(PurlError::BadQualifier(pair.to_string()));
        };
        let key = k.to_ascii_lowercase();
        if !valid_qualifier_key(&key) || out.contains_key(&key) {
            return Err(PurlError::BadQualifier(pair.to_string()));
        }
        let value = decode(v)?;
        if !value.is_empty() {
            out.insert(key, value);
        }
    }
    Ok(out)
}

fn clean_subpath(sub: &str) -> Result<Option<String>, PurlError> {
    let segments = sub
        .split('/')
        .filter(|s| !s.is_empty())
        .map(decode)
        .collect::<Result<Vec<_>, _>>()?;
    let kept: Vec<String> = segments
        .into_iter()
        .filter(|s| s != "." && s != "..")
        .collect();
    Ok((!kept.is_empty()).then(|| kept.join("/")))
}

/// Canonical textual form; `parse_purl(&format_purl(p)) == p` for valid `p`.
pub fn format_purl(p: &PackageUrl) -> String {
    let mut out = String::with_capacity(32);
    out.push_str("pkg:");
    out.push_str(&p.ecosystem.to_ascii_lowercase());
    out.push('/');
    if let Some(ns) = &p.namespace {
        for segment in ns.split('/').filter(|s| !s.is_empty()) {
            out.extend(utf8_percent_encode(segment, SEGMENT));
            out.push('/');
        }
    }
    out.extend(utf8_percent_encode(&p.name, SEGMENT));
    if let Some(v) = &p.version {
        out.push('@');
        out.extend(utf8_percent_encode(v, SEGMENT));
    }
    let mut first = true;
    for (k, v) in &p.qualifiers {
        if v.is_empty() {
            continue;
        }
        out.push(if first { '?' } else { '&' });
        first = false;
        out.push_str(&k.to_ascii_lowercase());
        out.push('=');
        out.extend(utf8_percent_encode(v, QUALIFIER_VALUE));
    }
    if let Some(sub) = &p.subpath {
        let segments: Vec<_> = sub
            .split('/')
            .filter(|s| !s.is_empty() && *s != "." && *s != "..")
            .collect();
        if !segments.is_empty() {
            out.push('#');
            for (i, segment) in segments.iter().enumerate() {
                if i > 0 {
                    out.push('/');
                }
                out.extend(utf8_percent_encode(segment, SEGMENT));
            }
        }
    }
    out
}

/// Structural validity: what `format_purl` can round-trip exactly.
pub fn is_valid(p: &PackageUrl) -> bool {
    let ns_ok = match &p.namespace {
        Some(ns) => !ns.is_empty() && ns.split('/').all(|s| !s.is_empty()),
        None => true,
    };
    let sub_ok = match &p.subpath {
        Some(sub) => {
            !sub.is_empty() && sub.split('/').all(|s| !s.is_empty() && s != "." && s != "..")
        }
        None => true,
    };
    valid_type(&p.ecosystem)
        && p.ecosystem == p.ecosystem.to_ascii_lowercase()
        && !p.name.is_empty()
        && ns_ok
        && sub_ok
        && p.version.as_deref() != Some("")
        && p.qualifiers
            .iter()
            .all(|(k, v)| valid_qualifier_key(k) && *k == k.to_ascii_lowercase() && !v.is_empty())
}

impl fmt::Display for PackageUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_purl(self))
    }
}

impl FromStr for PackageUrl {
    type Err = PurlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_purl(s)
    }
}

/// Ecosystem-qualified matching key, `<type>:<namespace>/<name>`, lowercased.
///
/// PyPI names are additionally folded per the registry's name normalization
/// (runs of `-`, `_`, `.` collapse to `-`).
pub fn product_key(p: &PackageUrl) -> String {
    product_key_parts(&p.ecosystem, p.namespace.as_deref(), &p.name)
}

pub fn product_key_parts(ecosystem: &str, namespace: Option<&str>, name: &str) -> String {
    let eco = ecosystem.to_ascii_lowercase();
    let name = if eco == "pypi" {
        normalize_pypi_name(name)
    } else {
        name.to_lowercase()
    };
    match namespace.filter(|n| !n.is_empty()) {
        Some(ns) => format!("{eco}:{}/{name}", ns.to_lowercase()),
        None => format!("{eco}:{name}"),
    }
}

fn normalize_pypi_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut in_sep = false;
    for c in name.chars() {
        if matches!(c, '-' | '_' | '.') {
            if !in_sep {
                out.push('-');
            }
            in_sep = true;
        } else {
            out.extend(c.to_lowercase());
            in_sep = false;
        }
    }
    out
}

/// Ecosystem encoded in a product key (the part before the first `:`).
pub fn key_ecosystem(product_key: &str) -> &str {
    product_key.split_once(':').map(|(e, _)| e).unwrap_or("")
}

/// Checks a range is usable for `ecosystem`: bounds ordered, exact list non-empty.
pub fn range_is_well_formed(ecosystem: &str, range: &VersionRange) -> bool {
    if range.check_shape().is_err() {
        return false;
    }
    let bad = |v: &str| v.trim().is_empty() || v.chars().any(|c| c.is_whitespace() || c.is_control());
    if let Some(exact) = &range.exact {
        return !exact.is_empty() && exact.iter().all(|v| !bad(v));
    }
    for b in range.start.iter().chain(range.end.iter()) {
        if bad(&b.version) {
            return false;
        }
    }
    match (&range.start, &range.end) {
        (Some(s), Some(e)) => {
            let ord = compare_versions(ecosystem, &s.version, &e.version);
            ord.is_lt() || (ord.is_eq() && s.inclusive && e.inclusive)
        }
        _ => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_maven_purl() {
        let p = parse_purl("pkg:maven/org.apache.logging.log4j/log4j-core@2.14.1").unwrap();
        assert_eq!(p.ecosystem, "maven");
        assert_eq!(p.namespace.as_deref(), Some("org.apache.logging.log4j"));
        assert_eq!(p.name, "log4j-core");
        assert_eq!(p.version.as_deref(), Some("2.14.1"));
    }

    #[test]
    fn parses_golang_purl() {
        let p = parse_purl("pkg:golang/github.com/prometheus/client_golang@v1.11.0").unwrap();
        assert_eq!(p.ecosystem, "golang");
        assert_eq!(p.namespace.as_deref(), Some("github.com/prometheus"));
        assert_eq!(p.name, "client_golang");
        assert_eq!(p.version.as_deref(), Some("v1.11.0"));
    }

    #[test]
    fn rejects_missing_scheme() {
        assert!(matches!(
            parse_purl("log4j-core@2.14.1"),
            Err(PurlError::MissingScheme(_))
        ));
        assert!(matches!(
            parse_purl("npm:lodash@1.0.0"),
            Err(PurlError::MissingScheme(_))
        ));
    }

    #[test]
    fn error_names_offending_segment() {
        let err = parse_purl("pkg:npm/lodash?arch").unwrap_err();
        assert_eq!(err, PurlError::BadQualifier("arch".into()));
        assert!(err.to_string().contains("arch"));
        assert!(matches!(parse_purl("pkg:npm/"), Err(PurlError::EmptyName(_))));
        assert!(matches!(parse_purl("pkg:1npm/x"), Err(PurlError::BadType(_))));
    }

    #[test]
    fn formats_canonically() {
        let p = PackageUrl::new(
            "maven",
            Some("org.apache.logging.log4j"),
            "log4j-core",
            Some("2.14.1"),
        );
        assert_eq!(
            format_purl(&p),
            "pkg:maven/org.apache.logging.log4j/log4j-core@2.14.1"
        );
        let g = PackageUrl::new(
            "golang",
            Some("github.com/prometheus"),
            "client_golang",
            Some("v1.11.0"),
        );
        assert_eq!(
            format_purl(&g),
            "pkg:golang/github.com/prometheus/client_golang@v1.11.0"
        );
    }

    #[test]
    fn qualifiers_are_sorted() {
        let mut p = PackageUrl::new("deb", Some("debian"), "curl", Some("7.50.3-1"));
        p.qualifiers.insert("distro".into(), "jessie".into());
        p.qualifiers.insert("arch".into(), "amd64".into());
        assert_eq!(
            format_purl(&p),
            "pkg:deb/debian/curl@7.50.3-1?arch=amd64&distro=jessie"
        );
        let q = parse_purl("pkg:deb/debian/curl@7.50.3-1?distro=jessie&ARCH=amd64").unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn npm_scope_and_encoding() {
        let p = parse_purl("pkg:npm/%40angular/core@12.0.0").unwrap();
        assert_eq!(p.namespace.as_deref(), Some("@angular"));
        let unencoded = parse_purl("pkg:npm/@angular/core").unwrap();
        assert_eq!(unencoded.namespace.as_deref(), Some("@angular"));
        assert_eq!(unencoded.version, None);
        assert_eq!(format_purl(&p), "pkg:npm/%40angular/core@12.0.0");
    }

    #[test]
    fn subpath_is_cleaned() {
        let p = parse_purl("pkg:golang/google.golang.org/genproto#/googleapis/./api/../annotations/")
            .unwrap();
        assert_eq!(p.subpath.as_deref(), Some("googleapis/api/annotations"));
    }

    #[test]
    fn scheme_and_type_are_case_insensitive() {
        let p = parse_purl("PKG:Maven/org.x/y@1").unwrap();
        assert_eq!(p.ecosystem, "maven");
        assert!(format_purl(&p).starts_with("pkg:maven/"));
    }

    #[test]
    fn product_keys() {
        let p = parse_purl("pkg:pypi/Django_REST.framework@3.0").unwrap();
        assert_eq!(product_key(&p), "pypi:django-rest-framework");
        let g = parse_purl("pkg:golang/github.com/Prometheus/client_golang@v1.0.0").unwrap();
        assert_eq!(product_key(&g), "golang:github.com/prometheus/client_golang");
        assert_eq!(key_ecosystem("maven:a/b"), "maven");
    }

    #[test]
    fn well_formed_ranges() {
        use crate::model::VersionBound;
        let ok = VersionRange::bounded(
            Some(VersionBound::inclusive("2.0-beta9")),
            Some(VersionBound::exclusive("2.15.0")),
        );
        assert!(range_is_well_formed("maven", &ok));
        let inverted = VersionRange::bounded(
            Some(VersionBound::inclusive("3.0")),
            Some(VersionBound::exclusive("2.0")),
        );
        assert!(!range_is_well_formed("maven", &inverted));
        let empty_point = VersionRange::bounded(
            Some(VersionBound::inclusive("1.0")),
            Some(VersionBound::exclusive("1.0")),
        );
        assert!(!range_is_well_formed("maven", &empty_point));
        assert!(!range_is_well_formed("maven", &VersionRange::exact(Vec::<String>::new())));
        let blank = VersionRange::bounded(None, Some(VersionBound::exclusive(" ")));
        assert!(!range_is_well_formed("npm", &blank));
    }
}
