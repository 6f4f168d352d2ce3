//! CPE 2.3 names and the vendor/product alias table that maps them onto
//! package-ecosystem product keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::FeedError;
use crate::purl::{self, parse_purl};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cpe {
    pub part: String,
    pub vendor: String,
    pub product: String,
    pub version: String,
    pub update: String,
}

impl Cpe {
    /// Parses a formatted-string binding (`cpe:2.3:a:vendor:product:...`).
    pub fn parse(uri: &str) -> Option<Cpe> {
        let rest = uri.strip_prefix("cpe:2.3:")?;
        let mut fields = Vec::with_capacity(11);
        let mut cur = String::new();
        let mut chars = rest.chars();
        while let Some(c) = chars.next() {
            match c {
                '\\' => cur.push(chars.next()?),
                ':' => fields.push(std::mem::take(&mut cur)),
                _ => cur.push(c),
            }
        }
        fields.push(cur);
        if fields.len() < 5 {
            return None;
        }
        Some(Cpe {
            part: fields[0].clone(),
            vendor: fields[1].to_lowercase(),
            product: fields[2].to_lowercase(),
            version: fields[3].clone(),
            update: fields[4].clone(),
        })
    }

    pub fn vendor_product(&self) -> String {
        format!("{}:{}", self.vendor, self.product)
    }

    /// The concrete version named by the CPE, if any. An update component is
    /// appended with `-` (`2.0` + `beta9` → `2.0-beta9`).
    pub fn concrete_version(&self) -> Option<String> {
        if is_any(&self.version) {
            return None;
        }
        if is_any(&self.update) {
            Some(self.version.clone())
        } else {
            Some(format!("{}-{}", self.version, self.update))
        }
    }

    pub fn version_is_wildcard(&self) -> bool {
        self.version == "*"
    }
}

fn is_any(field: &str) -> bool {
    field == "*" || field == "-" || field.is_empty()
}

/// Maps `vendor:product` to one or more product keys.
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    map: BTreeMap<String, Vec<String>>,
}

const BUILTIN: &[(&str, &[&str])] = &[
    ("apache:log4j", &["maven:org.apache.logging.log4j/log4j-core"]),
    ("apache:commons_text", &["maven:org.apache.commons/commons-text"]),
    ("apache:commons_collections", &["maven:commons-collections/commons-collections", "maven:org.apache.commons/commons-collections4"]),
    ("fasterxml:jackson-databind", &["maven:com.fasterxml.jackson.core/jackson-databind"]),
    ("vmware:spring_framework", &["maven:org.springframework/spring-core", "maven:org.springframework/spring-beans"]),
    ("google:guava", &["maven:com.google.guava/guava"]),
    ("yaml_project:snakeyaml", &["maven:org.yaml/snakeyaml"]),
    ("snakeyaml_project:snakeyaml", &["maven:org.yaml/snakeyaml"]),
    ("prometheus:client_golang", &["golang:github.com/prometheus/client_golang"]),
    ("golang:protobuf", &["golang:github.com/golang/protobuf"]),
    ("golang:text", &["golang:golang.org/x/text"]),
    ("golang:net", &["golang:golang.org/x/net"]),
    ("golang:crypto", &["golang:golang.org/x/crypto"]),
    ("gogo:protobuf", &["golang:github.com/gogo/protobuf"]),
    ("grpc:grpc", &["golang:google.golang.org/grpc"]),
    ("dgrijalva:jwt-go", &["golang:github.com/dgrijalva/jwt-go"]),
    ("tidwall:gjson", &["golang:github.com/tidwall/gjson"]),
    ("pypa:pip", &["pypi:pip"]),
    ("python:urllib3", &["pypi:urllib3"]),
    ("python:requests", &["pypi:requests"]),
    ("palletsprojects:jinja", &["pypi:jinja2"]),
    ("palletsprojects:flask", &["pypi:flask"]),
    ("djangoproject:django", &["pypi:django"]),
    ("pyyaml:pyyaml", &["pypi:pyyaml"]),
    ("lodash:lodash", &["npm:lodash"]),
    ("minimist_project:minimist", &["npm:minimist"]),
    ("axios:axios", &["npm:axios"]),
    ("expressjs:express", &["npm:express"]),
    ("rubyonrails:rails", &["gem:rails"]),
    ("nokogiri:nokogiri", &["gem:nokogiri"]),
    ("rack_project:rack", &["gem:rack"]),
    ("tokio:tokio", &["cargo:tokio"]),
    ("hyper:hyper", &["cargo:hyper"]),
    ("smallvec_project:smallvec", &["cargo:smallvec"]),
    ("regex_project:regex", &["cargo:regex"]),
    ("guzzlephp:guzzle", &["composer:guzzlehttp/guzzle"]),
    ("symfony:symfony", &["composer:symfony/symfony"]),
    ("laravel:framework", &["composer:laravel/framework"]),
    ("twig:twig", &["composer:twig/twig"]),
];

#[derive(Deserialize)]
struct AliasFile {
    #[serde(default)]
    aliases: BTreeMap<String, Vec<String>>,
}

impl AliasTable {
    pub fn empty() -> Self {
        AliasTable::default()
    }

    pub fn builtin() -> Self {
        let mut t = AliasTable::default();
        for (vp, keys) in BUILTIN {
            for k in *keys {
                t.insert(vp, k).expect("builtin alias is well formed");
            }
        }
        t
    }

    /// Adds a mapping. `target` is a product key (`maven:group/artifact`) or a
    /// purl whose version is ignored.
    pub fn insert(&mut self, vendor_product: &str, target: &str) -> Result<(), FeedError> {
        let key = if target.starts_with("pkg:") {
            let p = parse_purl(target).map_err(|e| FeedError::Alias(format!("{target}: {e}")))?;
            purl::product_key(&p)
        } else {
            let (eco, rest) = target
                .split_once(':')
                .ok_or_else(|| FeedError::Alias(format!("{target}: expected <ecosystem>:<name>")))?;
            let (ns, name) = match rest.rsplit_once('/') {
                Some((ns, name)) => (Some(ns), name),
                None => (None, rest),
            };
            if eco.is_empty() || name.is_empty() {
                return Err(FeedError::Alias(format!("{target}: empty ecosystem or name")));
            }
            purl::product_key_parts(eco, ns, name)
        };
        let entry = self.map.entry(vendor_product.to_lowercase()).or_default();
        if !entry.contains(&key) {
            entry.push(key);
            entry.sort();
        }
        Ok(())
    }

    /// Loads extra aliases from a TOML file with an `[aliases]` table:
    /// `"vendor:product" = ["maven:group/artifact", ...]`.
    pub fn extend_from_file(&mut self, path: &Path) -> Result<(), FeedError> {
        let text = std::fs::read_to_string(path).map_err(|e| FeedError::Io {
            what: path.display().to_string(),
            source: e,
        })?;
        let file: AliasFile =
            toml::from_str(&text).map_err(|e| FeedError::Alias(format!("{}: {e}", path.display())))?;
        for (vp, targets) in file.aliases {
            for t in targets {
                self.insert(&vp, &t)?;
            }
        }
        Ok(())
    }

    pub fn lookup(&self, cpe: &Cpe) -> &[String] {
        self.map
            .get(&cpe.vendor_product())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
