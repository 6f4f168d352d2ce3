use std::cmp::Ordering;

use depwatch_core::model::{PackageUrl, VersionBound, VersionRange};
use depwatch_core::purl::{compare_versions, format_purl, parse_purl, version_in_range};
use proptest::prelude::*;

const ECOSYSTEMS: &[&str] = &["npm", "cargo", "golang", "maven", "pypi", "gem", "composer", "generic"];

fn segment() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9._~:@ %?#&=+é-]{1,8}".prop_filter("dot segments", |s| s != "." && s != "..")
}

fn purl() -> impl Strategy<Value = PackageUrl> {
    (
        prop::sample::select(ECOSYSTEMS),
        prop::option::of(prop::collection::vec(segment(), 1..3)),
        segment(),
        prop::option::of("[a-zA-Z0-9./+_-]{1,10}"),
        prop::collection::btree_map("[a-z]{1,6}", "[a-zA-Z0-9/ %+=&-]{1,8}", 0..3),
        prop::option::of(prop::collection::vec(segment(), 1..3)),
    )
        .prop_map(|(eco, ns, name, version, qualifiers, subpath)| {
            let mut p = PackageUrl::new(eco, ns.map(|n| n.join("/")).as_deref(), &name, version.as_deref());
            p.qualifiers = qualifiers;
            p.subpath = subpath.map(|s| s.join("/"));
            p
        })
}

fn version() -> impl Strategy<Value = String> {
    (0u32..4, 0u32..4, 0u32..4, prop::option::of(prop::sample::select(&["alpha", "beta", "rc"][..])), 1u32..3).prop_map(
        |(a, b, c, pre, n)| match pre {
            Some(q) => format!("{a}.{b}.{c}-{q}.{n}"),
            None => format!("{a}.{b}.{c}"),
        },
    )
}

proptest! {
    #[test]
    fn format_then_parse_is_identity(p in purl()) {
        let text = format_purl(&p);
        let back = parse_purl(&text).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(format_purl(&back), text);
    }

    #[test]
    fn comparison_is_a_total_order(
        eco in prop::sample::select(&["npm", "cargo", "maven", "pypi"][..]),
        a in version(),
        b in version(),
        c in version(),
    ) {
        let ab = compare_versions(eco, &a, &b);
        prop_assert_eq!(ab, compare_versions(eco, &b, &a).reverse());
        prop_assert_eq!(compare_versions(eco, &a, &a), Ordering::Equal);
        if ab != Ordering::Greater && compare_versions(eco, &b, &c) != Ordering::Greater {
            prop_assert_ne!(compare_versions(eco, &a, &c), Ordering::Greater);
        }
    }

    #[test]
    fn range_membership_follows_comparison(
        v in version(),
        lo in version(),
        hi in version(),
        lo_incl: bool,
        hi_incl: bool,
    ) {
        let bound = |s: &str, incl: bool| if incl { VersionBound::inclusive(s) } else { VersionBound::exclusive(s) };
        let range = VersionRange::bounded(Some(bound(&lo, lo_incl)), Some(bound(&hi, hi_incl)));
        let above = match compare_versions("npm", &v, &lo) {
            Ordering::Greater => true,
            Ordering::Equal => lo_incl,
            Ordering::Less => false,
        };
        let below = match compare_versions("npm", &v, &hi) {
            Ordering::Less => true,
            Ordering::Equal => hi_incl,
            Ordering::Greater => false,
        };
        prop_assert_eq!(version_in_range("npm", &v, &range), above && below);
    }
}
