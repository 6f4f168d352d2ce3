//! Small end-to-end fixtures: NVD/EPSS feed files on disk and git
//! repositories whose releases move dependencies in and out of vulnerable
//! ranges.

use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use serde_json::{json, Value};

use super::GitFixture;

/// One NVD 1.1 `CVE_Items` entry with a single vulnerable CPE match.
pub fn nvd_item(
    cve: &str,
    cpe: &str,
    start_incl: Option<&str>,
    end_excl: Option<&str>,
    cvss_v3: f64,
    published: &str,
) -> Value {
    let mut m = json!({ "vulnerable": true, "cpe23Uri": cpe });
    if let Some(s) = start_incl {
        m["versionStartIncluding"] = json!(s);
    }
    if let Some(e) = end_excl {
        m["versionEndExcluding"] = json!(e);
    }
    json!({
        "cve": {
            "CVE_data_meta": { "ID": cve },
            "description": { "description_data": [{ "lang": "en", "value": format!("{cve} fixture") }] }
        },
        "configurations": { "nodes": [{ "cpe_match": [m] }] },
        "impact": { "baseMetricV3": { "cvssV3": { "baseScore": cvss_v3 } } },
        "publishedDate": published,
        "lastModifiedDate": published
    })
}

/// Writes `<dir>/<stem>.json.gz`.
pub fn write_nvd_feed(dir: &Path, stem: &str, items: &[Value]) {
    let doc = json!({ "CVE_data_type": "CVE", "CVE_Items": items }).to_string();
    let mut gz = GzEncoder::new(Vec::new(), flate2::Compression::default());
    gz.write_all(doc.as_bytes()).expect("gzip");
    std::fs::create_dir_all(dir).expect("feed dir");
    std::fs::write(dir.join(format!("{stem}.json.gz")), gz.finish().expect("gzip")).expect("write feed");
}

pub const FEED_FIRST_YEAR: i32 = 2021;
pub const FEED_LAST_YEAR: i32 = 2022;

/// The CVEs behind the go and cargo fixture repositories.
pub fn fixture_feed_items() -> Vec<Value> {
    vec![
        nvd_item(
            "CVE-2021-25900",
            "cpe:2.3:a:smallvec_project:smallvec:*:*:*:*:*:rust:*:*",
            Some("1.0.0"),
            Some("1.6.1"),
            9.8,
            "2021-01-26T18:16Z",
        ),
        nvd_item(
            "CVE-2021-44228",
            "cpe:2.3:a:apache:log4j:*:*:*:*:*:*:*:*",
            Some("2.0-beta9"),
            Some("2.15.0"),
            10.0,
            "2021-12-10T10:15Z",
        ),
        nvd_item(
            "CVE-2022-21698",
            "cpe:2.3:a:prometheus:client_golang:*:*:*:*:*:go:*:*",
            None,
            Some("1.11.1"),
            7.5,
            "2022-02-15T15:15Z",
        ),
        nvd_item(
            "CVE-2022-24713",
            "cpe:2.3:a:regex_project:regex:*:*:*:*:*:rust:*:*",
            None,
            Some("1.5.5"),
            7.5,
            "2022-03-08T19:15Z",
        ),
    ]
}

/// Writes annual feeds for 2021 and 2022 (items split by publication year),
/// an empty modified feed and `epss.csv`. Returns the EPSS file path.
pub fn write_fixture_feeds(dir: &Path, items: &[Value]) -> std::path::PathBuf {
    for year in FEED_FIRST_YEAR..=FEED_LAST_YEAR {
        let prefix = format!("{year}-");
        let of_year: Vec<Value> = items
            .iter()
            .filter(|i| i["publishedDate"].as_str().is_some_and(|p| p.starts_with(&prefix)))
            .cloned()
            .collect();
        write_nvd_feed(dir, &format!("nvdcve-1.1-{year}"), &of_year);
    }
    write_nvd_feed(dir, "nvdcve-1.1-modified", &[]);
    let epss = dir.join("epss.csv");
    std::fs::write(
        &epss,
        "#model_version:v2023.03.01,score_date:2023-03-01T00:00:00+0000\n\
         cve,epss,percentile\n\
         CVE-2021-25900,0.00512,0.75214\n\
         CVE-2021-44228,0.97095,0.99997\n\
         CVE-2022-21698,0.02686,0.90123\n\
         CVE-2022-24713,0.00881,0.81235\n",
    )
    .expect("write epss");
    epss
}

fn gopkg_lock(client_golang: &str) -> String {
    let projects = [
        ("github.com/beorn7/perks", "v1.0.1", "37c8de3658fcb183f997c4e13e8337516ab753e6"),
        ("github.com/golang/protobuf", "v1.4.3", "4846b58453b3708320bdb524f25cc5a1d9cda4d4"),
        ("github.com/prometheus/client_golang", client_golang, "6edbbd9e560190e318cdc5b4d3e630b442858380"),
        ("github.com/prometheus/client_model", "v0.2.0", "7bc5445566f0fe75b15de23e6b93886e982d7bf9"),
    ];
    let mut out = String::new();
    for (name, version, rev) in projects {
        out.push_str(&format!(
            "[[projects]]\n  name = \"{name}\"\n  version = \"{version}\"\n  revision = \"{rev}\"\n\n"
        ));
    }
    out
}

const GOPKG_TOML: &str = "[[constraint]]\n  name = \"github.com/prometheus/client_golang\"\n  version = \"1.0.0\"\n";

/// A dep-managed Go service (Gopkg.lock, no go.mod) across four releases:
///
/// | tag    | date       | client_golang |
/// |--------|------------|---------------|
/// | v1.0.0 | 2021-06-01 | v1.10.0       |
/// | v1.1.0 | 2022-01-10 | v1.11.0       |
/// | v1.2.0 | 2022-03-01 | v1.11.0       |
/// | v1.3.0 | 2022-05-01 | v1.12.1       |
pub fn go_fixture_repo(dir: &Path) -> GitFixture {
    let g = GitFixture::init(dir);
    g.write("main.go", "package main\n\nfunc main() {\n\tserve()\n}\n")
        .write("metrics.go", "package main\n\n// serve exposes metrics.\nfunc serve() {}\n")
        .write("Gopkg.toml", GOPKG_TOML)
        .write("Gopkg.lock", &gopkg_lock("v1.10.0"));
    g.commit("ana@example.org", "2021-06-01T09:00:00Z", "initial import");
    g.tag("v1.0.0");
    g.write("Gopkg.lock", &gopkg_lock("v1.11.0"))
        .write("handler.go", "package main\n\nfunc handler() {}\n");
    g.commit("bo@example.org", "2022-01-10T09:00:00Z", "bump client_golang");
    g.tag("v1.1.0");
    g.write("handler.go", "package main\n\n/* handles requests */\nfunc handler() { serve() }\n");
    g.commit("ana@example.org", "2022-03-01T09:00:00Z", "handler tweaks");
    g.tag("v1.2.0");
    g.write("Gopkg.lock", &gopkg_lock("v1.12.1"));
    g.commit("cy@example.org", "2022-05-01T09:00:00Z", "fix CVE-2022-21698");
    g.tag("v1.3.0");
    g
}

fn cargo_lock(packages: &[(&str, &str, &[&str])]) -> String {
    let mut out = String::from("version = 3\n\n");
    out.push_str("[[package]]\nname = \"tool\"\nversion = \"0.1.0\"\ndependencies = [\n");
    for (name, _, _) in packages.iter().filter(|(n, _, _)| matches!(*n, "regex" | "smallvec")) {
        out.push_str(&format!(" \"{name}\",\n"));
    }
    out.push_str("]\n\n");
    for (name, version, deps) in packages {
        out.push_str(&format!(
            "[[package]]\nname = \"{name}\"\nversion = \"{version}\"\nsource = \"registry+https://github.com/rust-lang/crates.io-index\"\n"
        ));
        if !deps.is_empty() {
            out.push_str("dependencies = [\n");
            for d in *deps {
                out.push_str(&format!(" \"{d}\",\n"));
            }
            out.push_str("]\n");
        }
        out.push('\n');
    }
    out
}

const CARGO_TOML: &str = "[package]\nname = \"tool\"\nversion = \"0.1.0\"\nedition = \"2021\"\n\n[dependencies]\nregex = \"1\"\nsmallvec = \"1\"\n";

/// A Rust CLI across four releases:
///
/// | tag    | date       | smallvec | regex |
/// |--------|------------|----------|-------|
/// | v0.1.0 | 2021-03-01 | 1.6.0    | 1.4.3 |
/// | v0.2.0 | 2021-05-01 | 1.6.1    | 1.4.5 |
/// | v0.3.0 | 2022-04-01 | 1.8.0    | 1.5.4 |
/// | v0.4.0 | 2022-06-01 | 1.8.0    | 1.5.6 |
pub fn cargo_fixture_repo(dir: &Path) -> GitFixture {
    let g = GitFixture::init(dir);
    let lock = |smallvec: &str, regex: &str| {
        cargo_lock(&[
            ("aho-corasick", "0.7.18", &["memchr"]),
            ("memchr", "2.4.1", &[]),
            ("regex", regex, &["aho-corasick", "memchr", "regex-syntax"]),
            ("regex-syntax", "0.6.25", &[]),
            ("smallvec", smallvec, &[]),
        ])
    };
    g.write("Cargo.toml", CARGO_TOML)
        .write("src/main.rs", "// entry point\nfn main() {\n    println!(\"tool\");\n}\n")
        .write("Cargo.lock", &lock("1.6.0", "1.4.3"));
    g.commit("dee@example.org", "2021-03-01T12:00:00Z", "first cut");
    g.tag("v0.1.0");
    g.write("Cargo.lock", &lock("1.6.1", "1.4.5"));
    g.commit("eli@example.org", "2021-05-01T12:00:00Z", "bump smallvec");
    g.tag("v0.2.0");
    g.write("src/lib.rs", "/// Parses input.\npub fn parse() {}\n")
        .write("Cargo.lock", &lock("1.8.0", "1.5.4"));
    g.commit("dee@example.org", "2022-04-01T12:00:00Z", "library split");
    g.tag("v0.3.0");
    g.write("Cargo.lock", &lock("1.8.0", "1.5.6"));
    g.commit("fay@example.org", "2022-06-01T12:00:00Z", "bump regex");
    g.tag("v0.4.0");
    g
}

/// Adapter for [`java_fixture_repo`]: copies the committed BOM, sleeping
/// first when the release carries a `slow` marker file.
pub const JAVA_ADAPTER: &str = "if [ -f slow ]; then sleep 30; fi; cp bom.json {out_dir}/bom.json && echo {out_dir}/bom.json";

fn java_bom(log4j: &str) -> String {
    let purl = format!("pkg:maven/org.apache.logging.log4j/log4j-core@{log4j}");
    json!({
        "bomFormat": "CycloneDX",
        "specVersion": "1.4",
        "metadata": { "component": { "bom-ref": "app", "type": "application", "name": "app" } },
        "components": [{ "bom-ref": purl, "type": "library", "group": "org.apache.logging.log4j",
                         "name": "log4j-core", "version": log4j, "purl": purl }],
        "dependencies": [{ "ref": "app", "dependsOn": [purl] }, { "ref": purl, "dependsOn": [] }]
    })
    .to_string()
}

/// A Java service with two releases whose BOMs are committed; the second
/// release is marked `slow` so [`JAVA_ADAPTER`] times out on it.
pub fn java_fixture_repo(dir: &Path) -> GitFixture {
    let g = GitFixture::init(dir);
    g.write("src/App.java", "// app\npublic class App {}\n")
        .write("bom.json", &java_bom("2.14.1"));
    g.commit("gus@example.org", "2021-06-01T08:00:00Z", "start");
    g.tag("v1.0");
    g.write("slow", "").write("bom.json", &java_bom("2.17.1"));
    g.commit("gus@example.org", "2022-03-01T08:00:00Z", "upgrade log4j");
    g.tag("v1.1");
    g
}
