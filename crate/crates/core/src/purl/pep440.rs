//! Python package version ordering.
//!
//! Accepts the permissive public version syntax (`v` prefix, `-`/`_`/`.`
//! separators, spelled-out pre-release labels, implicit post releases such as
//! `1.0-1`) and compares by the normalized sort key: epoch, release with
//! trailing zeros dropped, pre, post, dev, local.

use super::version::{GenericKey, Num};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Bound<T> {
    NegInf,
    Val(T),
    PosInf,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum LocalSeg {
    // alphanumeric segments sort below numeric ones
    Text(String),
    Num(Num),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Pep440Key {
    Invalid(GenericKey),
    Valid {
        epoch: Num,
        release: Vec<Num>,
        pre: Bound<(u8, Num)>,
        post: Bound<Num>,
        dev: Bound<Num>,
        local: Bound<Vec<LocalSeg>>,
    },
}

struct Cursor<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn digits(&mut self) -> Option<&'a str> {
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.s[start..self.pos]).unwrap())
    }

    fn eat_sep(&mut self) -> bool {
        if matches!(self.peek(), Some(b'-' | b'_' | b'.')) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_word(&mut self, words: &[&str]) -> Option<usize> {
        // longest match first so "alpha" wins over "a"
        let mut best: Option<(usize, usize)> = None;
        for (i, w) in words.iter().enumerate() {
            if self.s[self.pos..].starts_with(w.as_bytes())
                && best.is_none_or(|(_, len)| w.len() > len)
            {
                best = Some((i, w.len()));
            }
        }
        let (i, len) = best?;
        self.pos += len;
        Some(i)
    }
}

const PRE_LABELS: [&str; 7] = ["alpha", "a", "beta", "b", "preview", "pre", "c"];

impl Pep440Key {
    pub(crate) fn parse(raw: &str) -> Pep440Key {
        Self::parse_valid(raw).unwrap_or_else(|| Pep440Key::Invalid(GenericKey::parse(raw)))
    }

    fn parse_valid(raw: &str) -> Option<Pep440Key> {
        let lowered = raw.trim().to_ascii_lowercase();
        let (public, local_raw) = match lowered.split_once('+') {
            Some((p, l)) => (p.to_string(), Some(l.to_string())),
            None => (lowered, None),
        };
        let mut c = Cursor {
            s: public.as_bytes(),
            pos: 0,
        };
        if c.peek() == Some(b'v') {
            c.pos += 1;
        }

        let first = c.digits()?;
        let (epoch, first) = if c.peek() == Some(b'!') {
            c.pos += 1;
            (Num::new(first), c.digits()?)
        } else {
            (Num::new("0"), first)
        };
        let mut release = vec![Num::new(first)];
        loop {
            let save = c.pos;
            if c.peek() == Some(b'.') {
                c.pos += 1;
                if let Some(d) = c.digits() {
                    release.push(Num::new(d));
                    continue;
                }
            }
            c.pos = save;
            break;
        }
        while matches!(release.last(), Some(n) if n.is_zero()) && release.len() > 1 {
            release.pop();
        }
        if release.len() == 1 && release[0].is_zero() {
            release.clear();
        }

        // pre-release
        let mut pre = None;
        let save = c.pos;
        c.eat_sep();
        let pre_label = c
            .eat_word(&["rc"])
            .map(|_| 2u8)
            .or_else(|| {
                c.eat_word(&PRE_LABELS).map(|i| match PRE_LABELS[i] {
                    "alpha" | "a" => 0,
                    "beta" | "b" => 1,
                    _ => 2,
                })
            });
        match pre_label {
            Some(label) => {
                let save_n = c.pos;
                c.eat_sep();
                let n = match c.digits() {
                    Some(d) => Num::new(d),
                    None => {
                        c.pos = save_n;
                        Num::new("0")
                    }
                };
                pre = Some((label, n));
            }
            None => c.pos = save,
        }

        // post-release
        let mut post = None;
        let save = c.pos;
        if c.peek() == Some(b'-') {
            c.pos += 1;
            if let Some(d) = c.digits() {
                post = Some(Num::new(d));
            } else {
                c.pos = save;
            }
        }
        if post.is_none() {
            c.eat_sep();
            if c.eat_word(&["post", "rev", "r"]).is_some() {
                let save_n = c.pos;
                c.eat_sep();
                post = Some(match c.digits() {
                    Some(d) => Num::new(d),
                    None => {
                        c.pos = save_n;
                        Num::new("0")
                    }
                });
            } else {
                c.pos = save;
            }
        }

        // dev release
        let mut dev = None;
        let save = c.pos;
        c.eat_sep();
        if c.eat_word(&["dev"]).is_some() {
            let save_n = c.pos;
            c.eat_sep();
            dev = Some(match c.digits() {
                Some(d) => Num::new(d),
                None => {
                    c.pos = save_n;
                    Num::new("0")
                }
            });
        } else {
            c.pos = save;
        }

        if c.pos != c.s.len() {
            return None;
        }

        let local = match local_raw {
            None => Bound::NegInf,
            Some(l) => {
                let segs: Vec<&str> = l.split(['-', '_', '.']).collect();
                if segs
                    .iter()
                    .any(|s| s.is_empty() || !s.bytes().all(|b| b.is_ascii_alphanumeric()))
                {
                    return None;
                }
                Bound::Val(
                    segs.into_iter()
                        .map(|s| {
                            if s.bytes().all(|b| b.is_ascii_digit()) {
                                LocalSeg::Num(Num::new(s))
                            } else {
                                LocalSeg::Text(s.to_string())
                            }
                        })
                        .collect(),
                )
            }
        };

        let pre_key = match (&pre, &post, &dev) {
            (None, None, Some(_)) => Bound::NegInf,
            (None, _, _) => Bound::PosInf,
            (Some(p), _, _) => Bound::Val(p.clone()),
        };
        Some(Pep440Key::Valid {
            epoch,
            release,
            pre: pre_key,
            post: post.map(Bound::Val).unwrap_or(Bound::NegInf),
            dev: dev.map(Bound::Val).unwrap_or(Bound::PosInf),
            local,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cmp::Ordering;

    fn cmp(a: &str, b: &str) -> Ordering {
        Pep440Key::parse(a).cmp(&Pep440Key::parse(b))
    }

    #[test]
    fn canonical_ordering() {
        let ordered = [
            "1.0.dev456",
            "1.0a1",
            "1.0a2.dev456",
            "1.0a12.dev456",
            "1.0a12",
            "1.0b1.dev456",
            "1.0b2",
            "1.0b2.post345.dev456",
            "1.0b2.post345",
            "1.0rc1.dev456",
            "1.0rc1",
            "1.0",
            "1.0+abc.5",
            "1.0+abc.7",
            "1.0+5",
            "1.0.post456.dev34",
            "1.0.post456",
            "1.0.15",
            "1.1.dev1",
        ];
        for (i, a) in ordered.iter().enumerate() {
            for b in &ordered[i + 1..] {
                assert_eq!(cmp(a, b), Ordering::Less, "{a} < {b}");
            }
        }
    }

    #[test]
    fn spellings_normalize() {
        for (a, b) in [
            ("1.0.post1", "1.0-1"),
            ("1.0.post1", "1.0-post-1"),
            ("1.0.post1", "1.0.r1"),
            ("1.0a1", "1.0-alpha.1"),
            ("1.0rc1", "1.0c1"),
            ("1.0rc1", "1.0-preview_1"),
            ("1.0b0", "1.0beta"),
            ("v2.0", "2"),
            ("1!0", "1!0.0.0"),
        ] {
            assert_eq!(cmp(a, b), Ordering::Equal, "{a} == {b}");
        }
    }

    #[test]
    fn epoch_dominates() {
        assert_eq!(cmp("1!0.1", "2024.1"), Ordering::Greater);
    }

    #[test]
    fn invalid_sorts_first() {
        assert_eq!(cmp("not.a.version!", "0.0.1"), Ordering::Less);
        assert!(matches!(Pep440Key::parse("1.0foo"), Pep440Key::Invalid(_)));
    }
}
