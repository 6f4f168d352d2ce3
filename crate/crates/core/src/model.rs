//! Domain types shared across the pipeline.
//!
//! Everything here is a plain value: constructors validate, nothing mutates
//! shared state. Serialization to disk lives in [`crate::store`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("CVSS score {0} is outside [0, 10]")]
    ScoreOutOfRange(f64),
    #[error("EPSS {field} {value} is outside [0, 1]")]
    ProbabilityOutOfRange { field: &'static str, value: f64 },
    #[error("malformed CVE identifier {0:?}")]
    BadCveId(String),
    #[error("{cve_id}: last_modified precedes published")]
    ModifiedBeforePublished { cve_id: String },
    #[error("{cve_id}: severity {stored} disagrees with CVSS v3 score {score}")]
    SeverityMismatch {
        cve_id: String,
        stored: Severity,
        score: f64,
    },
    #[error("illegal release transition {from} -> {to}")]
    IllegalTransition { from: ReleaseState, to: ReleaseState },
    #[error("unknown {kind} value {value:?}")]
    UnknownVariant { kind: &'static str, value: String },
    #[error("version range mixes exact versions with bounds")]
    MixedRange,
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(
                #[serde(rename = $text)]
                $variant,
            )+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $(
                    if s.eq_ignore_ascii_case($text) {
                        return Ok($name::$variant);
                    }
                )+
                Err(ModelError::UnknownVariant { kind: $kind, value: s.to_string() })
            }
        }
    };
}

string_enum!(
    /// Primary implementation language of a repository.
    Language, "language" {
        Java => "Java",
        Go => "Go",
        Rust => "Rust",
        Ruby => "Ruby",
        Python => "Python",
        Php => "PHP",
        JavaScript => "JavaScript",
        Other => "Other",
    }
);

string_enum!(
    /// Processing state of a release in the SBOM-generation stage.
    ReleaseState, "release state" {
        New => "NEW",
        Done => "DONE",
        Fail => "FAIL",
    }
);

string_enum!(
    AnalysisState, "analysis state" {
        New => "NEW",
        Analyzed => "ANALYZED",
    }
);

string_enum!(
    /// Qualitative severity, ordered from `None` to `Critical`.
    Severity, "severity" {
        None => "NONE",
        Low => "LOW",
        Medium => "MEDIUM",
        High => "HIGH",
        Critical => "CRITICAL",
    }
);

string_enum!(
    /// Which score a [`Severity`] was derived from.
    SeverityBasis, "severity basis" {
        CvssV3 => "cvss_v3",
        CvssV2Fallback => "cvss_v2_fallback",
        Unscored => "unscored",
    }
);

string_enum!(
    SpecSource, "spec source" {
        Cpe => "CPE",
        Purl => "PURL",
    }
);

string_enum!(
    MatchSource, "match source" {
        OfflineFeed => "OFFLINE_FEED",
        RemoteIndex => "REMOTE_INDEX",
    }
);

impl ReleaseState {
    pub fn can_transition(self, to: ReleaseState) -> bool {
        matches!(
            (self, to),
            (ReleaseState::New, ReleaseState::Done)
                | (ReleaseState::New, ReleaseState::Fail)
                | (ReleaseState::Fail, ReleaseState::New)
        )
    }

    pub fn transition(self, to: ReleaseState) -> Result<ReleaseState, ModelError> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(ModelError::IllegalTransition { from: self, to })
        }
    }
}

/// Buckets a CVSS v3.x base score using the v3.1 qualitative rating table.
pub fn severity_bucket(cvss_v3_base: f64) -> Result<Severity, ModelError> {
    check_score(cvss_v3_base)?;
    Ok(if cvss_v3_base == 0.0 {
        Severity::None
    } else if cvss_v3_base < 4.0 {
        Severity::Low
    } else if cvss_v3_base < 7.0 {
        Severity::Medium
    } else if cvss_v3_base < 9.0 {
        Severity::High
    } else {
        Severity::Critical
    })
}

/// CVSS v2 has no critical tier: anything from 7.0 up is `High`.
pub fn severity_bucket_v2(cvss_v2_base: f64) -> Result<Severity, ModelError> {
    check_score(cvss_v2_base)?;
    Ok(if cvss_v2_base == 0.0 {
        Severity::None
    } else if cvss_v2_base < 4.0 {
        Severity::Low
    } else if cvss_v2_base < 7.0 {
        Severity::Medium
    } else {
        Severity::High
    })
}

fn check_score(score: f64) -> Result<(), ModelError> {
    if score.is_finite() && (0.0..=10.0).contains(&score) {
        Ok(())
    } else {
        Err(ModelError::ScoreOutOfRange(score))
    }
}

/// Severity from whichever score is present, preferring v3.
pub fn derive_severity(
    cvss_v3_base: Option<f64>,
    cvss_v2_base: Option<f64>,
) -> Result<(Severity, SeverityBasis), ModelError> {
    match (cvss_v3_base, cvss_v2_base) {
        (Some(v3), _) => Ok((severity_bucket(v3)?, SeverityBasis::CvssV3)),
        (None, Some(v2)) => Ok((severity_bucket_v2(v2)?, SeverityBasis::CvssV2Fallback)),
        (None, None) => Ok((Severity::None, SeverityBasis::Unscored)),
    }
}

pub fn is_cve_id(id: &str) -> bool {
    let Some(rest) = id.strip_prefix("CVE-") else {
        return false;
    };
    let Some((year, seq)) = rest.split_once('-') else {
        return false;
    };
    year.len() == 4
        && year.bytes().all(|b| b.is_ascii_digit())
        && seq.len() >= 4
        && seq.bytes().all(|b| b.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RepoId(pub String);

impl fmt::Display for RepoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RepoId {
    fn from(s: &str) -> Self {
        RepoId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repository {
    pub id: RepoId,
    pub name: String,
    pub clone_url: String,
    pub primary_language: Language,
    pub stargazers: u64,
    pub contributor_count: u64,
    pub first_seen: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Release {
    pub repo_id: RepoId,
    pub tag: String,
    /// Committer timestamp of the tagged commit.
    pub release_date: DateTime<Utc>,
    /// Commits reachable from the tag (cumulative, not a per-release delta).
    pub commit_count: u64,
    pub contributor_count: u64,
    pub file_count: u64,
    pub lines_of_code: u64,
    pub lines_of_comments: u64,
    pub state: ReleaseState,
    /// Machine-readable reason attached to a `FAIL` state.
    pub fail_reason: Option<String>,
}

impl Release {
    pub fn new(repo_id: RepoId, tag: impl Into<String>, release_date: DateTime<Utc>) -> Self {
        Release {
            repo_id,
            tag: tag.into(),
            release_date,
            commit_count: 0,
            contributor_count: 0,
            file_count: 0,
            lines_of_code: 0,
            lines_of_comments: 0,
            state: ReleaseState::New,
            fail_reason: None,
        }
    }
}

/// A package URL. Textual form and parsing live in [`crate::purl`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PackageUrl {
    /// The purl "type", always lowercase.
    pub ecosystem: String,
    pub namespace: Option<String>,
    pub name: String,
    pub version: Option<String>,
    pub qualifiers: BTreeMap<String, String>,
    pub subpath: Option<String>,
}

impl PackageUrl {
    pub fn new(ecosystem: &str, namespace: Option<&str>, name: &str, version: Option<&str>) -> Self {
        PackageUrl {
            ecosystem: ecosystem.to_ascii_lowercase(),
            namespace: namespace.map(str::to_string),
            name: name.to_string(),
            version: version.map(str::to_string),
            qualifiers: BTreeMap::new(),
            subpath: None,
        }
    }

    pub fn without_version(&self) -> PackageUrl {
        PackageUrl {
            version: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub purl: PackageUrl,
    pub group: Option<String>,
    pub display_name: String,
    pub version: String,
    pub hashes: BTreeMap<String, String>,
    pub analysis_state: AnalysisState,
}

impl Component {
    pub fn from_purl(purl: PackageUrl) -> Self {
        Component {
            group: purl.namespace.clone(),
            display_name: purl.name.clone(),
            version: purl.version.clone().unwrap_or_default(),
            purl,
            hashes: BTreeMap::new(),
            analysis_state: AnalysisState::New,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VersionBound {
    pub version: String,
    pub inclusive: bool,
}

impl VersionBound {
    pub fn inclusive(version: &str) -> Self {
        VersionBound {
            version: version.to_string(),
            inclusive: true,
        }
    }

    pub fn exclusive(version: &str) -> Self {
        VersionBound {
            version: version.to_string(),
            inclusive: false,
        }
    }
}

/// Version applicability: either an interval with optional ends or an
/// explicit list of affected versions, never both.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct VersionRange {
    pub start: Option<VersionBound>,
    pub end: Option<VersionBound>,
    pub exact: Option<Vec<String>>,
}

impl VersionRange {
    pub fn bounded(start: Option<VersionBound>, end: Option<VersionBound>) -> Self {
        VersionRange {
            start,
            end,
            exact: None,
        }
    }

    pub fn exact<I, S>(versions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        VersionRange {
            start: None,
            end: None,
            exact: Some(versions.into_iter().map(Into::into).collect()),
        }
    }

    pub fn check_shape(&self) -> Result<(), ModelError> {
        if self.exact.is_some() && (self.start.is_some() || self.end.is_some()) {
            Err(ModelError::MixedRange)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AffectedSpec {
    /// `<ecosystem>:<normalized namespace/name>`, see [`crate::purl::product_key`].
    pub product_key: String,
    pub range: VersionRange,
    pub source_form: SpecSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vulnerability {
    pub cve_id: String,
    pub published: DateTime<Utc>,
    pub last_modified: DateTime<Utc>,
    pub cvss_v3_base: Option<f64>,
    pub cvss_v2_base: Option<f64>,
    pub severity: Severity,
    pub affected: Vec<AffectedSpec>,
    pub description: String,
}

impl Vulnerability {
    pub fn severity_basis(&self) -> SeverityBasis {
        match (self.cvss_v3_base, self.cvss_v2_base) {
            (Some(_), _) => SeverityBasis::CvssV3,
            (None, Some(_)) => SeverityBasis::CvssV2Fallback,
            (None, None) => SeverityBasis::Unscored,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !is_cve_id(&self.cve_id) {
            return Err(ModelError::BadCveId(self.cve_id.clone()));
        }
        if self.last_modified < self.published {
            return Err(ModelError::ModifiedBeforePublished {
                cve_id: self.cve_id.clone(),
            });
        }
        let (expected, _) = derive_severity(self.cvss_v3_base, self.cvss_v2_base)?;
        if expected != self.severity {
            return Err(ModelError::SeverityMismatch {
                cve_id: self.cve_id.clone(),
                stored: self.severity,
                score: self.cvss_v3_base.or(self.cvss_v2_base).unwrap_or(0.0),
            });
        }
        for spec in &self.affected {
            spec.range.check_shape()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpssEntry {
    pub cve_id: String,
    pub score: f64,
    pub percentile: f64,
    pub model_date: NaiveDate,
}

impl EpssEntry {
    pub fn new(
        cve_id: &str,
        score: f64,
        percentile: f64,
        model_date: NaiveDate,
    ) -> Result<Self, ModelError> {
        if !is_cve_id(cve_id) {
            return Err(ModelError::BadCveId(cve_id.to_string()));
        }
        for (field, value) in [("score", score), ("percentile", percentile)] {
            if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
                return Err(ModelError::ProbabilityOutOfRange { field, value });
            }
        }
        Ok(EpssEntry {
            cve_id: cve_id.to_string(),
            score,
            percentile,
            model_date,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnMatch {
    /// Canonical purl of the matched component.
    pub component: String,
    pub cve_id: String,
    pub source: MatchSource,
    pub matched_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistenceRecord {
    pub repo_id: RepoId,
    pub cve_id: String,
    pub first_vulnerable_release: String,
    pub first_vulnerable_date: DateTime<Utc>,
    pub first_clean_release: String,
    pub first_clean_date: DateTime<Utc>,
    pub days: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn severity_examples() {
        assert_eq!(severity_bucket(10.0).unwrap(), Severity::Critical);
        assert_eq!(severity_bucket(7.5).unwrap(), Severity::High);
        assert_eq!(severity_bucket(0.0).unwrap(), Severity::None);
    }

    #[test]
    fn severity_boundaries_are_exact() {
        let cases = [
            (0.1, Severity::Low),
            (3.9, Severity::Low),
            (4.0, Severity::Medium),
            (6.9, Severity::Medium),
            (7.0, Severity::High),
            (8.9, Severity::High),
            (9.0, Severity::Critical),
        ];
        for (score, expected) in cases {
            assert_eq!(severity_bucket(score).unwrap(), expected, "score {score}");
        }
    }

    #[test]
    fn severity_rejects_out_of_range() {
        assert!(severity_bucket(-0.1).is_err());
        assert!(severity_bucket(10.1).is_err());
        assert!(severity_bucket(f64::NAN).is_err());
    }

    #[test]
    fn severity_is_monotone_on_the_decimal_grid() {
        let mut last = Severity::None;
        for tenth in 0..=100 {
            let s = severity_bucket(tenth as f64 / 10.0).unwrap();
            assert!(s >= last);
            last = s;
        }
    }

    #[test]
    fn v2_fallback_has_no_critical() {
        assert_eq!(severity_bucket_v2(5.0).unwrap(), Severity::Medium);
        assert_eq!(severity_bucket_v2(10.0).unwrap(), Severity::High);
        let (sev, basis) = derive_severity(None, Some(5.0)).unwrap();
        assert_eq!((sev, basis), (Severity::Medium, SeverityBasis::CvssV2Fallback));
    }

    #[test]
    fn release_transitions() {
        use ReleaseState::*;
        assert!(New.can_transition(Done));
        assert!(New.can_transition(Fail));
        assert!(Fail.can_transition(New));
        for to in [New, Done, Fail] {
            assert!(!Done.can_transition(to), "DONE -> {to} must be rejected");
        }
        assert!(!Fail.can_transition(Done));
        assert!(New.transition(New).is_err());
    }

    #[test]
    fn cve_id_shape() {
        assert!(is_cve_id("CVE-2021-44228"));
        assert!(is_cve_id("CVE-2022-1234567"));
        assert!(!is_cve_id("CVE-X"));
        assert!(!is_cve_id("CVE-21-1234"));
        assert!(!is_cve_id("cve-2021-44228"));
    }

    #[test]
    fn epss_entry_validates_probabilities() {
        let d = NaiveDate::from_ymd_opt(2023, 6, 1).unwrap();
        assert!(EpssEntry::new("CVE-2021-44228", 0.97095, 0.999, d).is_ok());
        assert!(EpssEntry::new("CVE-2021-44228", 1.5, 0.5, d).is_err());
        assert!(EpssEntry::new("CVE-2021-44228", 0.5, -0.1, d).is_err());
    }

    #[test]
    fn vulnerability_validation_catches_inconsistent_severity() {
        let t = DateTime::parse_from_rfc3339("2021-12-10T10:15:00Z")
            .unwrap()
            .with_timezone(&Utc);
        let mut v = Vulnerability {
            cve_id: "CVE-2021-44228".into(),
            published: t,
            last_modified: t,
            cvss_v3_base: Some(10.0),
            cvss_v2_base: Some(9.3),
            severity: Severity::Critical,
            affected: vec![],
            description: String::new(),
        };
        assert!(v.validate().is_ok());
        v.severity = Severity::High;
        assert!(matches!(v.validate(), Err(ModelError::SeverityMismatch { .. })));
        v.severity = Severity::Critical;
        v.last_modified = t - chrono::Duration::days(1);
        assert!(v.validate().is_err());
    }

    #[test]
    fn range_shape() {
        let mut r = VersionRange::exact(["1.0"]);
        assert!(r.check_shape().is_ok());
        r.end = Some(VersionBound::exclusive("2.0"));
        assert_eq!(r.check_shape(), Err(ModelError::MixedRange));
    }
}
