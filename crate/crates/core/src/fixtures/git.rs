use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

/// Builds small git repositories with controlled authors and dates.
pub struct GitFixture {
    pub dir: PathBuf,
}

impl GitFixture {
    pub fn init(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        fs::create_dir_all(&dir).expect("create fixture dir");
        let f = GitFixture { dir };
        f.git(&["init", "-q", "-b", "main"], None);
        f
    }

    fn git(&self, args: &[&str], date: Option<&str>) -> String {
        let mut cmd = Command::new("git");
        cmd.arg("-C")
            .arg(&self.dir)
            .args(["-c", "commit.gpgsign=false", "-c", "tag.gpgsign=false"])
            .args(args)
            .env("GIT_CONFIG_NOSYSTEM", "1")
            .env("HOME", &self.dir)
            .env("GIT_COMMITTER_NAME", "fixture")
            .env("GIT_COMMITTER_EMAIL", "fixture@example.invalid");
        if let Some(d) = date {
            cmd.env("GIT_AUTHOR_DATE", d).env("GIT_COMMITTER_DATE", d);
        }
        let out = cmd.output().expect("run git");
        assert!(
            out.status.success(),
            "git {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }

    pub fn write(&self, rel: &str, contents: &str) -> &Self {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).expect("create parent");
        }
        fs::write(p, contents).expect("write fixture file");
        self
    }

    pub fn remove(&self, rel: &str) -> &Self {
        fs::remove_file(self.dir.join(rel)).expect("remove fixture file");
        self
    }

    /// Commits everything in the tree. `date` is ISO-8601 (e.g.
    /// `2021-06-01T12:00:00Z`).
    pub fn commit(&self, author: &str, date: &str, message: &str) -> String {
        self.git(&["add", "-A"], None);
        let who = format!("{} <{author}>", author.split('@').next().unwrap_or(author));
        self.git(&["commit", "-q", "--allow-empty", "--author", &who, "-m", message], Some(date));
        self.git(&["rev-parse", "HEAD"], None).trim().to_string()
    }

    pub fn tag(&self, name: &str) -> &Self {
        self.git(&["tag", name], None);
        self
    }

    pub fn annotated_tag(&self, name: &str, date: &str) -> &Self {
        self.git(&["tag", "-a", name, "-m", name], Some(date));
        self
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }
}
