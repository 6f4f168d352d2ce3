//! Maven version ordering (the `ComparableVersion` algorithm).
//!
//! Versions are tokenized on `.`, `-` and digit/letter transitions into a tree
//! of integer, string and list items. A `-` or a digit/letter transition opens
//! a sub-list; trailing "null" items (`0`, `""`, `final`, `ga`, `release`) are
//! trimmed from every list.

use std::cmp::Ordering;

use super::version::Num;

const QUALIFIERS: [&str; 7] = ["alpha", "beta", "milestone", "rc", "snapshot", "", "sp"];
const RELEASE_INDEX: &str = "5";

#[derive(Debug, Clone)]
enum Item {
    Int(Num),
    Str(String),
    List(Vec<Item>),
}

fn string_item(value: &str, followed_by_digit: bool) -> Item {
    let mut v = value;
    if followed_by_digit && v.len() == 1 {
        v = match v {
            "a" => "alpha",
            "b" => "beta",
            "m" => "milestone",
            other => other,
        };
    }
    let v = match v {
        "ga" | "final" | "release" => "",
        "cr" => "rc",
        other => other,
    };
    Item::Str(v.to_string())
}

fn comparable_qualifier(q: &str) -> String {
    match QUALIFIERS.iter().position(|&k| k == q) {
        Some(i) => i.to_string(),
        None => format!("{}-{}", QUALIFIERS.len(), q),
    }
}

impl Item {
    fn is_null(&self) -> bool {
        match self {
            Item::Int(n) => n.is_zero(),
            Item::Str(s) => s.is_empty(),
            Item::List(l) => l.is_empty(),
        }
    }

    fn compare(&self, other: Option<&Item>) -> Ordering {
        match self {
            Item::Int(n) => match other {
                None => {
                    if n.is_zero() {
                        Ordering::Equal
                    } else {
                        Ordering::Greater
                    }
                }
                Some(Item::Int(m)) => n.cmp(m),
                Some(Item::Str(_)) | Some(Item::List(_)) => Ordering::Greater,
            },
            Item::Str(s) => match other {
                None => comparable_qualifier(s).as_str().cmp(RELEASE_INDEX),
                Some(Item::Int(_)) | Some(Item::List(_)) => Ordering::Less,
                Some(Item::Str(t)) => comparable_qualifier(s).cmp(&comparable_qualifier(t)),
            },
            Item::List(items) => match other {
                None => {
                    for item in items {
                        let r = item.compare(None);
                        if r != Ordering::Equal {
                            return r;
                        }
                    }
                    Ordering::Equal
                }
                Some(Item::Int(_)) => Ordering::Less,
                Some(Item::Str(_)) => Ordering::Greater,
                Some(Item::List(others)) => compare_lists(items, others),
            },
        }
    }
}

fn compare_lists(items: &[Item], others: &[Item]) -> Ordering {
    let len = items.len().max(others.len());
    for i in 0..len {
        let r = match (items.get(i), others.get(i)) {
            (None, None) => Ordering::Equal,
            (None, Some(r)) => r.compare(None).reverse(),
            (Some(l), r) => l.compare(r),
        };
        if r != Ordering::Equal {
            return r;
        }
    }
    Ordering::Equal
}

fn normalize(list: &mut Vec<Item>) {
    let mut i = list.len();
    while i > 0 {
        i -= 1;
        if list[i].is_null() {
            list.remove(i);
        } else if !matches!(list[i], Item::List(_)) {
            break;
        }
    }
}

/// Arena-free builder: lists are addressed by their path from the root.
struct Builder {
    root: Vec<Item>,
    path: Vec<usize>,
}

impl Builder {
    fn current(&mut self) -> &mut Vec<Item> {
        let mut list = &mut self.root;
        for &idx in &self.path {
            list = match &mut list[idx] {
                Item::List(inner) => inner,
                _ => unreachable!("path always points at list items"),
            };
        }
        list
    }

    fn push(&mut self, item: Item) {
        self.current().push(item);
    }

    fn open_list(&mut self) {
        let cur = self.current();
        cur.push(Item::List(Vec::new()));
        let idx = cur.len() - 1;
        self.path.push(idx);
    }

    fn current_is_empty(&mut self) -> bool {
        self.current().is_empty()
    }
}

fn parse_item(is_digit: bool, buf: &str) -> Item {
    if is_digit {
        Item::Int(Num::new(buf))
    } else {
        string_item(buf, false)
    }
}

fn normalize_tree(list: &mut Vec<Item>) {
    for item in list.iter_mut() {
        if let Item::List(inner) = item {
            normalize_tree(inner);
        }
    }
    normalize(list);
}

#[derive(Debug, Clone)]
pub(crate) struct MavenVersion(Vec<Item>);

impl MavenVersion {
    pub(crate) fn parse(raw: &str) -> MavenVersion {
        let version = raw.trim().to_lowercase();
        let chars: Vec<char> = version.chars().collect();
        let mut b = Builder {
            root: Vec::new(),
            path: Vec::new(),
        };
        let mut is_digit = false;
        let mut start = 0usize;
        let sub = |from: usize, to: usize| chars[from..to].iter().collect::<String>();

        for (i, &c) in chars.iter().enumerate() {
            if c == '.' {
                if i == start {
                    b.push(Item::Int(Num::new("0")));
                } else {
                    b.push(parse_item(is_digit, &sub(start, i)));
                }
                start = i + 1;
            } else if c == '-' {
                if i == start {
                    b.push(Item::Int(Num::new("0")));
                } else {
                    b.push(parse_item(is_digit, &sub(start, i)));
                }
                start = i + 1;
                b.open_list();
            } else if c.is_ascii_digit() {
                if !is_digit && i > start {
                    // ".X1" behaves like "-X1"
                    if !b.current_is_empty() {
                        b.open_list();
                    }
                    b.push(string_item(&sub(start, i), true));
                    start = i;
                    b.open_list();
                }
                is_digit = true;
            } else {
                if is_digit && i > start {
                    b.push(parse_item(true, &sub(start, i)));
                    start = i;
                    b.open_list();
                }
                is_digit = false;
            }
        }
        if chars.len() > start {
            if !is_digit && !b.current_is_empty() {
                b.open_list();
            }
            b.push(parse_item(is_digit, &sub(start, chars.len())));
        }
        let mut root = b.root;
        normalize_tree(&mut root);
        MavenVersion(root)
    }
}

impl Ord for MavenVersion {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_lists(&self.0, &other.0)
    }
}

impl PartialOrd for MavenVersion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for MavenVersion {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for MavenVersion {}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmp(a: &str, b: &str) -> Ordering {
        MavenVersion::parse(a).cmp(&MavenVersion::parse(b))
    }

    fn assert_ascending(list: &[&str]) {
        for (i, a) in list.iter().enumerate() {
            for b in &list[i + 1..] {
                assert_eq!(cmp(a, b), Ordering::Less, "{a} < {b}");
                assert_eq!(cmp(b, a), Ordering::Greater, "{b} > {a}");
            }
        }
    }

    #[test]
    fn qualifier_ordering() {
        assert_ascending(&[
            "1-alpha2snapshot",
            "1-alpha2",
            "1-alpha-123",
            "1-beta-2",
            "1-beta123",
            "1-m2",
            "1-m11",
            "1-rc",
            "1-cr2",
            "1-rc123",
            "1-SNAPSHOT",
            "1",
            "1-sp",
            "1-sp2",
            "1-sp123",
            "1-abc",
            "1-def",
            "1-pom-1",
            "1-1-snapshot",
            "1-1",
            "1-2",
            "1-123",
        ]);
    }

    #[test]
    fn number_ordering() {
        assert_ascending(&[
            "2.0", "2.0.a", "2-1", "2.0.2", "2.0.123", "2.1.0", "2.1-a", "2.1b", "2.1-c", "2.1-1",
            "2.1.0.1", "2.2", "2.123", "11.a2", "11.a11", "11.b2", "11.b11", "11.m2", "11.m11",
            "11", "11.a", "11b", "11c", "11m",
        ]);
    }

    #[test]
    fn equivalences() {
        for group in [
            &["1", "1.0", "1.0.0", "1-0", "1.ga", "1-ga", "1.final", "1-release"][..],
            &["1-alpha-1", "1-a1", "1-ALPHA-1"],
            &["1.foo", "1-foo"],
            &["1-rc1", "1-cr1", "1-cr-1"],
        ] {
            for a in group {
                for b in group {
                    assert_eq!(cmp(a, b), Ordering::Equal, "{a} == {b}");
                }
            }
        }
    }

    #[test]
    fn documented_padding_rules() {
        assert_eq!(cmp("1", "1.1"), Ordering::Less);
        assert_eq!(cmp("1-snapshot", "1"), Ordering::Less);
        assert_eq!(cmp("1", "1-sp"), Ordering::Less);
        assert_eq!(cmp("1-foo2", "1-foo10"), Ordering::Less);
        assert_eq!(cmp("1-foo", "1-1"), Ordering::Less);
        assert_eq!(cmp("1-1", "1.1"), Ordering::Less);
        assert_eq!(cmp("1-sp", "1-ga"), Ordering::Greater);
        assert_eq!(cmp("1-sp.1", "1-ga.1"), Ordering::Greater);
        assert_eq!(cmp("1-sp-1", "1-ga-1"), Ordering::Less);
    }

    #[test]
    fn log4j_versions() {
        assert_eq!(cmp("2.0-beta9", "2.0"), Ordering::Less);
        assert_eq!(cmp("2.0-beta9", "2.14.1"), Ordering::Less);
        assert_eq!(cmp("2.14.1", "2.15.0"), Ordering::Less);
        assert_eq!(cmp("2.17.1", "2.15.0"), Ordering::Greater);
        assert_eq!(cmp("2.0-rc1", "2.0-beta9"), Ordering::Greater);
    }

    #[test]
    fn large_numbers_do_not_overflow() {
        assert_eq!(
            cmp("1.99999999999999999999999", "1.100000000000000000000000"),
            Ordering::Less
        );
    }
}
