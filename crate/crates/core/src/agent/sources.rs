use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Raw text handed to the store, before cleaning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub source_uri: String,
    pub text: Vec<u8>,
}

/// A producer of raw documents for one task tag.
pub trait DataSource {
    fn name(&self) -> &str;

    fn task_tag(&self) -> &str;

    fn exhausted(&self) -> bool;

    /// At most one document per call; `Ok(None)` once exhausted.
    fn fetch_next(&mut self) -> Result<Option<RawDocument>>;
}

const OBJECTS: [&str; 12] = [
    "sky", "grass", "sea", "apple", "lemon", "coal", "snow", "rose", "cloud", "leaf", "sand", "plum",
];
const COLORS: [&str; 8] = ["blue", "green", "red", "yellow", "black", "white", "grey", "purple"];
const ANIMALS: [&str; 10] = [
    "cat", "dog", "horse", "fish", "bird", "frog", "cow", "fox", "owl", "bee",
];
const PLACES: [&str; 8] = ["house", "field", "river", "forest", "barn", "pond", "hill", "garden"];
const FOODS: [&str; 8] = ["milk", "seeds", "grass", "worms", "mice", "hay", "nectar", "bugs"];

/// Seeded question/answer dialog lines such as
/// `Q: what color is the snow? A: the snow is white.`
///
/// Answers follow a fixed fact table drawn from `variant`, so different
/// variants are related but distinct tasks.
#[derive(Clone, Debug)]
pub struct SyntheticDialogSource {
    name: String,
    tag: String,
    rng: ChaCha8Rng,
    max_records: usize,
    produced: usize,
    colors: Vec<usize>,
    homes: Vec<usize>,
    foods: Vec<usize>,
}

fn fact_table(n: usize, range: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..range)).collect()
}

impl SyntheticDialogSource {
    pub fn new(tag: &str, seed: u64, max_records: usize) -> Self {
        Self::with_variant(tag, seed, max_records, 0)
    }

    pub fn with_variant(tag: &str, seed: u64, max_records: usize, variant: u64) -> Self {
        let mut facts = ChaCha8Rng::seed_from_u64(0xd1a1_0000 ^ variant);
        Self {
            name: format!("synthetic-dialog-v{variant}"),
            tag: tag.to_owned(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_records,
            produced: 0,
            colors: fact_table(OBJECTS.len(), COLORS.len(), &mut facts),
            homes: fact_table(ANIMALS.len(), PLACES.len(), &mut facts),
            foods: fact_table(ANIMALS.len(), FOODS.len(), &mut facts),
        }
    }

    fn line(&mut self) -> String {
        match self.rng.random_range(0..3) {
            0 => {
                let o = self.rng.random_range(0..OBJECTS.len());
                let (obj, color) = (OBJECTS[o], COLORS[self.colors[o]]);
                format!("Q: what color is the {obj}? A: the {obj} is {color}.")
            }
            1 => {
                let a = self.rng.random_range(0..ANIMALS.len());
                let (animal, place) = (ANIMALS[a], PLACES[self.homes[a]]);
                format!("Q: where does the {animal} live? A: the {animal} lives in the {place}.")
            }
            _ => {
                let a = self.rng.random_range(0..ANIMALS.len());
                let (animal, food) = (ANIMALS[a], FOODS[self.foods[a]]);
                format!("Q: what does the {animal} eat? A: the {animal} eats {food}.")
            }
        }
    }
}

impl DataSource for SyntheticDialogSource {
    fn name(&self) -> &str {
        &self.name
    }

    fn task_tag(&self) -> &str {
        &self.tag
    }

    fn exhausted(&self) -> bool {
        self.produced >= self.max_records
    }

    fn fetch_next(&mut self) -> Result<Option<RawDocument>> {
        if self.exhausted() {
            return Ok(None);
        }
        let lines = self.rng.random_range(1..=2);
        let text: Vec<String> = (0..lines).map(|_| self.line()).collect();
        let doc = RawDocument {
            source_uri: format!("synthetic://{}/{}", self.name, self.produced),
            text: text.join("\n").into_bytes(),
        };
        self.produced += 1;
        Ok(Some(doc))
    }
}

const VARS: [&str; 6] = ["a", "b", "c", "x", "y", "n"];

/// Seeded arithmetic and assignment snippets with balanced parentheses,
/// such as `let x = (3 + 4) * 2;`.
#[derive(Clone, Debug)]
pub struct SyntheticCodeSource {
    tag: String,
    rng: ChaCha8Rng,
    max_records: usize,
    produced: usize,
}

impl SyntheticCodeSource {
    pub fn new(tag: &str, seed: u64, max_records: usize) -> Self {
        Self {
            tag: tag.to_owned(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_records,
            produced: 0,
        }
    }

    fn expr(&mut self, depth: usize, defined: &[&str]) -> String {
        let leaf = depth == 0 || self.rng.random_bool(0.4);
        if leaf {
            if !defined.is_empty() && self.rng.random_bool(0.5) {
                return defined.choose(&mut self.rng).expect("non-empty").to_string();
            }
            return self.rng.random_range(1..10).to_string();
        }
        let op = ["+", "-", "*"][self.rng.random_range(0..3)];
        let lhs = self.expr(depth - 1, defined);
        let rhs = self.expr(depth - 1, defined);
        if self.rng.random_bool(0.5) {
            format!("({lhs} {op} {rhs})")
        } else {
            format!("{lhs} {op} {rhs}")
        }
    }
}

impl DataSource for SyntheticCodeSource {
    fn name(&self) -> &str {
        "synthetic-code"
    }

    fn task_tag(&self) -> &str {
        &self.tag
    }

    fn exhausted(&self) -> bool {
        self.produced >= self.max_records
    }

    fn fetch_next(&mut self) -> Result<Option<RawDocument>> {
        if self.exhausted() {
            return Ok(None);
        }
        let statements = self.rng.random_range(2..=3);
        let mut defined: Vec<&str> = Vec::new();
        let mut lines = Vec::with_capacity(statements + 1);
        for _ in 0..statements {
            let var = VARS[self.rng.random_range(0..VARS.len())];
            let e = self.expr(2, &defined);
            lines.push(format!("let {var} = {e};"));
            if !defined.contains(&var) {
                defined.push(var);
            }
        }
        lines.push(format!("print({});", defined.last().expect("at least one statement")));
        let doc = RawDocument {
            source_uri: format!("synthetic://code/{}", self.produced),
            text: lines.join("\n").into_bytes(),
        };
        self.produced += 1;
        Ok(Some(doc))
    }
}

const DETS: [&str; 4] = ["the", "a", "one", "that"];
const ADJS: [&str; 8] = ["small", "old", "quiet", "bright", "green", "tall", "warm", "slow"];
const NOUNS: [&str; 10] = [
    "cat", "house", "river", "tree", "road", "child", "boat", "garden", "town", "hill",
];
const VERBS: [&str; 8] = ["sees", "finds", "passes", "likes", "follows", "keeps", "leaves", "watches"];

/// Seeded general-domain prose used to pretrain the base model.
#[derive(Clone, Debug)]
pub struct SyntheticProseSource {
    tag: String,
    rng: ChaCha8Rng,
    max_records: usize,
    produced: usize,
}

impl SyntheticProseSource {
    pub fn new(tag: &str, seed: u64, max_records: usize) -> Self {
        Self {
            tag: tag.to_owned(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_records,
            produced: 0,
        }
    }

    fn phrase(&mut self) -> String {
        let det = DETS[self.rng.random_range(0..DETS.len())];
        let noun = NOUNS[self.rng.random_range(0..NOUNS.len())];
        if self.rng.random_bool(0.5) {
            let adj = ADJS[self.rng.random_range(0..ADJS.len())];
            format!("{det} {adj} {noun}")
        } else {
            format!("{det} {noun}")
        }
    }
}

impl DataSource for SyntheticProseSource {
    fn name(&self) -> &str {
        "synthetic-prose"
    }

    fn task_tag(&self) -> &str {
        &self.tag
    }

    fn exhausted(&self) -> bool {
        self.produced >= self.max_records
    }

    fn fetch_next(&mut self) -> Result<Option<RawDocument>> {
        if self.exhausted() {
            return Ok(None);
        }
        let sentences = self.rng.random_range(2..=4);
        let mut text = Vec::with_capacity(sentences);
        for _ in 0..sentences {
            let subject = self.phrase();
            let verb = VERBS[self.rng.random_range(0..VERBS.len())];
            let object = self.phrase();
            let mut s = format!("{subject} {verb} {object}.");
            if let Some(first) = s.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            text.push(s);
        }
        let doc = RawDocument {
            source_uri: format!("synthetic://prose/{}", self.produced),
            text: text.join(" ").into_bytes(),
        };
        self.produced += 1;
        Ok(Some(doc))
    }
}

/// Every regular file of a directory, in file-name order, one document each.
#[derive(Clone, Debug)]
pub struct LocalDirectorySource {
    name: String,
    tag: String,
    files: Vec<PathBuf>,
    next: usize,
}

impl LocalDirectorySource {
    pub fn new(dir: &Path, tag: &str) -> Result<Self> {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::Source {
            source_name: dir.display().to_string(),
            message: e.to_string(),
        })? {
            let path = entry?.path();
            if path.is_file() {
                files.push(path);
            }
        }
        files.sort();
        Ok(Self {
            name: format!("dir:{}", dir.display()),
            tag: tag.to_owned(),
            files,
            next: 0,
        })
    }
}

impl DataSource for LocalDirectorySource {
    fn name(&self) -> &str {
        &self.name
    }

    fn task_tag(&self) -> &str {
        &self.tag
    }

    fn exhausted(&self) -> bool {
        self.next >= self.files.len()
    }

    fn fetch_next(&mut self) -> Result<Option<RawDocument>> {
        let Some(path) = self.files.get(self.next).cloned() else {
            return Ok(None);
        };
        self.next += 1;
        let text = fs::read(&path).map_err(|e| Error::Source {
            source_name: self.name.clone(),
            message: format!("{}: {e}", path.display()),
        })?;
        Ok(Some(RawDocument {
            source_uri: format!("file://{}", path.display()),
            text,
        }))
    }
}

#[cfg(feature = "http")]
pub use http::HttpArticleSource;

#[cfg(feature = "http")]
mod http {
    use super::{DataSource, RawDocument};
    use crate::error::{Error, Result};

    pub const ENABLE_VAR: &str = "AGENT_HTTP_ENABLED";

    /// Fetches each URL once and strips markup. Performs no request unless
    /// `AGENT_HTTP_ENABLED=1`.
    #[derive(Clone, Debug)]
    pub struct HttpArticleSource {
        tag: String,
        urls: Vec<String>,
        next: usize,
    }

    impl HttpArticleSource {
        pub fn new(tag: &str, urls: Vec<String>) -> Self {
            Self {
                tag: tag.to_owned(),
                urls,
                next: 0,
            }
        }

        fn err(&self, message: String) -> Error {
            Error::Source {
                source_name: "http".into(),
                message,
            }
        }
    }

    fn strip_tags(html: &str) -> String {
        let mut out = String::with_capacity(html.len());
        let mut in_tag = false;
        for c in html.chars() {
            match c {
                '<' => in_tag = true,
                '>' if in_tag => {
                    in_tag = false;
                    out.push(' ');
                }
                _ if !in_tag => out.push(c),
                _ => {}
            }
        }
        out
    }

    impl DataSource for HttpArticleSource {
        fn name(&self) -> &str {
            "http"
        }

        fn task_tag(&self) -> &str {
            &self.tag
        }

        fn exhausted(&self) -> bool {
            self.next >= self.urls.len()
        }

        fn fetch_next(&mut self) -> Result<Option<RawDocument>> {
            if std::env::var(ENABLE_VAR).as_deref() != Ok("1") {
                return Err(self.err(format!("network access disabled; set {ENABLE_VAR}=1")));
            }
            let Some(url) = self.urls.get(self.next).cloned() else {
                return Ok(None);
            };
            self.next += 1;
            let body = ureq::get(&url)
                .call()
                .map_err(|e| self.err(format!("{url}: {e}")))?
                .body_mut()
                .read_to_string()
                .map_err(|e| self.err(format!("{url}: {e}")))?;
            Ok(Some(RawDocument {
                source_uri: url,
                text: strip_tags(&body).into_bytes(),
            }))
        }
    }
}
