//! EPSS daily score CSV.
//!
//! The published file starts with a comment such as
//! `#model_version:v2023.03.01,score_date:2023-06-01T00:00:00+0000`, followed
//! by a `cve,epss,percentile` header and one row per CVE.

use chrono::NaiveDate;

use crate::model::EpssEntry;

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ParsedEpss {
    pub model_version: Option<String>,
    pub score_date: Option<NaiveDate>,
    pub entries: Vec<EpssEntry>,
    /// `(line number, reason)` of rejected rows.
    pub rejected: Vec<(usize, String)>,
}

fn parse_comment(line: &str, out: &mut ParsedEpss) {
    for part in line.trim_start_matches('#').split(',') {
        let Some((k, v)) = part.split_once(':') else {
            continue;
        };
        match k.trim() {
            "model_version" => out.model_version = Some(v.trim().to_string()),
            "score_date" => {
                let v = v.trim();
                out.score_date = NaiveDate::parse_from_str(v.get(..10).unwrap_or(v), "%Y-%m-%d").ok();
            }
            _ => {}
        }
    }
}

/// Parses the CSV. Rows use `fallback_date` when the file carries no
/// `score_date` comment. Malformed or out-of-range rows are rejected, not
/// fatal.
pub fn parse_epss_csv(text: &str, fallback_date: NaiveDate) -> ParsedEpss {
    let mut out = ParsedEpss::default();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        parse_comment(line, &mut out);
    }
    let model_date = out.score_date.unwrap_or(fallback_date);

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut seen = std::collections::HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = rec
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map(|p| p.line() as usize)
            .unwrap_or(i + 1);
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push((line, e.to_string()));
                continue;
            }
        };
        if rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("cve")) {
            continue;
        }
        if rec.len() < 3 {
            out.rejected.push((line, format!("expected 3 fields, found {}", rec.len())));
            continue;
        }
        let (Ok(score), Ok(pct)) = (rec[1].parse::<f64>(), rec[2].parse::<f64>()) else {
            out.rejected.push((line, "non-numeric score".into()));
            continue;
        };
        match EpssEntry::new(&rec[0], score, pct, model_date) {
            Ok(e) => {
                if let Some(&at) = seen.get(&e.cve_id) {
                    out.entries[at] = e;
                } else {
                    seen.insert(e.cve_id.clone(), out.entries.len());
                    out.entries.push(e);
                }
            }
            Err(err) => out.rejected.push((line, err.to_string())),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn parses_published_layout() {
        let text = "#model_version:v2023.03.01,score_date:2023-06-01T00:00:00+0000\n\
                    cve,epss,percentile\n\
                    CVE-2021-44228,0.97095,0.999\n\
                    CVE-2022-21698,0.02686,0.61\n\
                    CVE-X,1.5,0.5\n";
        let p = parse_epss_csv(text, day(2000, 1, 1));
        assert_eq!(p.model_version.as_deref(), Some("v2023.03.01"));
        assert_eq!(p.score_date, Some(day(2023, 6, 1)));
        assert_eq!(p.entries.len(), 2);
        assert_eq!(p.entries[0].score, 0.97095);
        assert_eq!(p.entries[1].score, 0.02686);
        assert_eq!(p.entries[1].model_date, day(2023, 6, 1));
        assert_eq!(p.rejected.len(), 1);
        assert_eq!(p.rejected[0].0, 5);
    }

    #[test]
    fn out_of_range_rows_rejected() {
        let p = parse_epss_csv("CVE-2021-0001,1.5,0.5\nCVE-2021-0002,0.5,-0.1\nCVE-2021-0003,abc,0.1\n", day(2024, 1, 1));
        assert!(p.entries.is_empty());
        assert_eq!(p.rejected.len(), 3);
    }

    #[test]
    fn headerless_file_uses_fallback_date() {
        let p = parse_epss_csv("CVE-2021-0001,0.5,0.5\n", day(2024, 1, 1));
        assert_eq!(p.entries[0].model_date, day(2024, 1, 1));
    }
}
