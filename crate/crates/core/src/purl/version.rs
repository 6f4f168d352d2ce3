//! Ecosystem-aware version ordering.
//!
//! Each family maps a version string to a sortable key; comparison is key
//! comparison, so every family is a total order even on garbage input.
//! Strings a family cannot parse fall back to the generic segment key and sort
//! before every parseable version of that family.

use std::cmp::Ordering;

use crate::model::VersionRange;

use super::maven::MavenVersion;
use super::pep440::Pep440Key;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionFamily {
    /// cargo, npm, golang (golang strips one leading `v`)
    Semver { strip_v: bool },
    Maven,
    Pep440,
    /// gem and composer: dotted numeric with alphanumeric segments
    Gem { strip_v: bool },
    /// Segment-wise numeric-then-lexicographic.
    Generic,
}

pub fn family_of(ecosystem: &str) -> VersionFamily {
    match ecosystem.to_ascii_lowercase().as_str() {
        "golang" | "go" => VersionFamily::Semver { strip_v: true },
        "cargo" | "npm" => VersionFamily::Semver { strip_v: false },
        "maven" => VersionFamily::Maven,
        "pypi" => VersionFamily::Pep440,
        "gem" => VersionFamily::Gem { strip_v: false },
        "composer" => VersionFamily::Gem { strip_v: true },
        _ => VersionFamily::Generic,
    }
}

pub fn compare_versions(ecosystem: &str, a: &str, b: &str) -> Ordering {
    match family_of(ecosystem) {
        VersionFamily::Semver { strip_v } => {
            SemverKey::parse(a, strip_v).cmp(&SemverKey::parse(b, strip_v))
        }
        VersionFamily::Maven => MavenVersion::parse(a).cmp(&MavenVersion::parse(b)),
        VersionFamily::Pep440 => Pep440Key::parse(a).cmp(&Pep440Key::parse(b)),
        VersionFamily::Gem { strip_v } => GemKey::parse(a, strip_v).cmp(&GemKey::parse(b, strip_v)),
        VersionFamily::Generic => GenericKey::parse(a).cmp(&GenericKey::parse(b)),
    }
}

/// True iff `v` lies inside `range` (or is listed in its exact set).
pub fn version_in_range(ecosystem: &str, v: &str, range: &VersionRange) -> bool {
    if let Some(exact) = &range.exact {
        return exact
            .iter()
            .any(|e| compare_versions(ecosystem, v, e) == Ordering::Equal);
    }
    if let Some(start) = &range.start {
        match compare_versions(ecosystem, v, &start.version) {
            Ordering::Less => return false,
            Ordering::Equal if !start.inclusive => return false,
            _ => {}
        }
    }
    if let Some(end) = &range.end {
        match compare_versions(ecosystem, v, &end.version) {
            Ordering::Greater => return false,
            Ordering::Equal if !end.inclusive => return false,
            _ => {}
        }
    }
    true
}

/// Decimal digit string compared by magnitude without overflow.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) struct Num(String);

impl Num {
    pub(crate) fn new(digits: &str) -> Num {
        let trimmed = digits.trim_start_matches('0');
        Num(if trimmed.is_empty() { "0".to_string() } else { trimmed.to_string() })
    }

    pub(crate) fn is_zero(&self) -> bool {
        self.0 == "0"
    }
}

impl Ord for Num {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Num {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn all_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Segment {
    Num(Num),
    Text(String),
}

/// Generic fallback: split on non-alphanumerics; numbers sort before text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct GenericKey(Vec<Segment>);

impl GenericKey {
    pub(crate) fn parse(v: &str) -> GenericKey {
        GenericKey(
            v.split(|c: char| !c.is_alphanumeric())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    if all_digits(s) {
                        Segment::Num(Num::new(s))
                    } else {
                        Segment::Text(s.to_string())
                    }
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum PreRelease {
    Pre(Vec<Segment>),
    Release,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum SemverKey {
    Invalid(GenericKey),
    Valid { core: [Num; 3], pre: PreRelease },
}

impl SemverKey {
    /// Lenient semver: one to three numeric core parts (missing parts are 0),
    /// optional `-prerelease`, optional `+build` (ignored).
    fn parse(raw: &str, strip_v: bool) -> SemverKey {
        let mut s = raw.trim();
        if strip_v {
            if let Some(rest) = s.strip_prefix('v').or_else(|| s.strip_prefix('V')) {
                s = rest;
            }
        }
        let s = s.split_once('+').map(|(head, _)| head).unwrap_or(s);
        let (core, pre) = match s.split_once('-') {
            Some((c, p)) => (c, Some(p)),
            None => (s, None),
        };
        let parts: Vec<&str> = core.split('.').collect();
        if parts.is_empty() || parts.len() > 3 || !parts.iter().all(|p| all_digits(p)) {
            return SemverKey::Invalid(GenericKey::parse(raw));
        }
        let mut nums = [Num::new("0"), Num::new("0"), Num::new("0")];
        for (slot, part) in nums.iter_mut().zip(&parts) {
            *slot = Num::new(part);
        }
        let pre = match pre {
            None => PreRelease::Release,
            Some(p) => {
                let ids: Vec<&str> = p.split('.').collect();
                let valid = ids.iter().all(|id| {
                    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
                });
                if !valid {
                    return SemverKey::Invalid(GenericKey::parse(raw));
                }
                PreRelease::Pre(
                    ids.into_iter()
                        .map(|id| {
                            if all_digits(id) {
                                Segment::Num(Num::new(id))
                            } else {
                                Segment::Text(id.to_string())
                            }
                        })
                        .collect(),
                )
            }
        };
        SemverKey::Valid { core: nums, pre }
    }
}

/// RubyGems-style key: digit runs and letter runs; letters mark prereleases
/// and sort below any number at the same position. Trailing zeros are
/// insignificant (`1.0 == 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
struct GemKey(Vec<Segment>);

impl GemKey {
    fn parse(raw: &str, strip_v: bool) -> GemKey {
        let mut s = raw.trim();
        if strip_v {
            if let Some(rest) = s.strip_prefix('v').or_else(|| s.strip_prefix('V')) {
                s = rest;
            }
        }
        let mut segs = Vec::new();
        let mut buf = String::new();
        let mut buf_digit = false;
        let flush = |buf: &mut String, digit: bool, segs: &mut Vec<Segment>| {
            if !buf.is_empty() {
                segs.push(if digit {
                    Segment::Num(Num::new(buf))
                } else {
                    Segment::Text(buf.to_lowercase())
                });
                buf.clear();
            }
        };
        for c in s.chars() {
            if c.is_ascii_digit() {
                if !buf_digit {
                    flush(&mut buf, false, &mut segs);
                }
                buf_digit = true;
                buf.push(c);
            } else if c.is_alphabetic() {
                if buf_digit {
                    flush(&mut buf, true, &mut segs);
                }
                buf_digit = false;
                buf.push(c);
            } else {
                flush(&mut buf, buf_digit, &mut segs);
            }
        }
        flush(&mut buf, buf_digit, &mut segs);
        while matches!(segs.last(), Some(Segment::Num(n)) if n.is_zero()) {
            segs.pop();
        }
        GemKey(segs)
    }
}

impl Ord for GemKey {
    fn cmp(&self, other: &Self) -> Ordering {
        let zero = Segment::Num(Num::new("0"));
        let len = self.0.len().max(other.0.len());
        for i in 0..len {
            let a = self.0.get(i).unwrap_or(&zero);
            let b = other.0.get(i).unwrap_or(&zero);
            let ord = match (a, b) {
                (Segment::Num(x), Segment::Num(y)) => x.cmp(y),
                (Segment::Text(x), Segment::Text(y)) => x.cmp(y),
                (Segment::Num(_), Segment::Text(_)) => Ordering::Greater,
                (Segment::Text(_), Segment::Num(_)) => Ordering::Less,
            };
            if ord != Ordering::Equal {
                return ord;
            }
        }
        Ordering::Equal
    }
}

impl PartialOrd for GemKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
