use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Occurrence count a word must exceed in the caption corpus.
pub const DEFAULT_GROUNDED_THRESHOLD: u64 = 100;

const BUNDLED_STOPWORDS: &str = include_str!("../../../../data/stopwords.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundedClass {
    Grounded,
    NonGrounded,
    Stopword,
}

fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(BUNDLED_STOPWORDS)
}

pub fn load_stopwords(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stopwords(&text))
}

/// Reads `token<TAB>count` lines.
pub fn load_frequencies(path: impl AsRef<Path>) -> Result<HashMap<String, u64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (tok, count) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected token<TAB>count".into()))?;
        let count: u64 = count
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad count {count:?}: {e}")))?;
        out.insert(tok.to_lowercase(), count);
    }
    Ok(out)
}

pub fn classify_grounded(
    token: &str,
    stopwords: &HashSet<String>,
    freq: &HashMap<String, u64>,
    threshold: u64,
) -> GroundedClass {
    let token = token.to_lowercase();
    if stopwords.contains(&token) {
        GroundedClass::Stopword
    } else if freq.get(&token).copied().unwrap_or(0) > threshold {
        GroundedClass::Grounded
    } else {
        GroundedClass::NonGrounded
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules() {
        let sw = default_stopwords();
        let freq: HashMap<String, u64> =
            [("hands".to_string(), 150), ("edge".to_string(), 100)].into_iter().collect();
        let t = DEFAULT_GROUNDED_THRESHOLD;
        assert_eq!(classify_grounded("the", &sw, &freq, t), GroundedClass::Stopword);
        assert_eq!(classify_grounded("hands", &sw, &freq, t), GroundedClass::Grounded);
        assert_eq!(classify_grounded("divide", &sw, &freq, t), GroundedClass::NonGrounded);
        // strictly more than the threshold
        assert_eq!(classify_grounded("edge", &sw, &freq, t), GroundedClass::NonGrounded);
    }

    #[test]
    fn bundled_list_size() {
        let n = default_stopwords().len();
        assert!((140..=200).contains(&n), "{n}");
    }

    #[test]
    fn frequency_file_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tsv");
        fs::write(&p, "dog\t12\ncat twelve\n").unwrap();
        match load_frequencies(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
