use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{classify_grounded, pre_tokenize, GroundedClass};

/// grounded / (grounded + non_grounded).
pub fn ratio_from_counts(grounded: usize, non_grounded: usize) -> Result<f64> {
    if grounded + non_grounded == 0 {
        return Err(Error::UndefinedRatio("no grounded or non-grounded tokens".into()));
    }
    Ok(grounded as f64 / (grounded + non_grounded) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedCounts {
    pub grounded: usize,
    pub non_grounded: usize,
    pub stopwords: usize,
}

impl GroundedCounts {
    pub fn from_classes(classes: &[GroundedClass]) -> Self {
        let mut c = GroundedCounts::default();
        for class in classes {
            match class {
                GroundedClass::Grounded => c.grounded += 1,
                GroundedClass::NonGrounded => c.non_grounded += 1,
                GroundedClass::Stopword => c.stopwords += 1,
            }
        }
        c
    }

    pub fn ratio(&self) -> Result<f64> {
        ratio_from_counts(self.grounded, self.non_grounded)
    }
}

/// Visually-grounded ratio of a classified token list. Stopwords count
/// towards neither side.
pub fn grounded_ratio(classes: &[GroundedClass]) -> Result<f64> {
    GroundedCounts::from_classes(classes).ratio()
}

/// Word-level classes of `text`.
pub fn classify_text(
    text: &str,
    stopwords: &HashSet<String>,
    frequencies: &HashMap<String, u64>,
    threshold: u64,
) -> Vec<GroundedClass> {
    pre_tokenize(text)
        .iter()
        .map(|w| classify_grounded(w, stopwords, frequencies, threshold))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Improved,
    OnPar,
    Worsened,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Improved, Category::OnPar, Category::Worsened];

    pub fn label(self) -> &'static str {
        match self {
            Category::Improved => "improved",
            Category::OnPar => "on-par",
            Category::Worsened => "worsened",
        }
    }
}

/// Compares per-example correct-run counts of model `a` against model `b`.
/// `a[run][example]` is whether run `run` of `a` got the example right.
pub fn categorize_examples(a: &[Vec<bool>], b: &[Vec<bool>]) -> Result<Vec<Category>> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Contract(format!("run counts differ or are zero: {} vs {}", a.len(), b.len())));
    }
    let n = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != n) {
        return Err(Error::Contract("runs cover different numbers of examples".into()));
    }
    let correct = |runs: &[Vec<bool>], i: usize| runs.iter().filter(|r| r[i]).count();
    Ok((0..n)
        .map(|i| match correct(a, i).cmp(&correct(b, i)) {
            std::cmp::Ordering::Greater => Category::Improved,
            std::cmp::Ordering::Equal => Category::OnPar,
            std::cmp::Ordering::Less => Category::Worsened,
        })
        .collect())
}

/// Type-7 quantile (linear interpolation between order statistics).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InsufficientData("cannot summarize an empty category".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Summary {
        n: s.len(),
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        mean: s.iter().sum::<f64>() / s.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub text: String,
    pub counts: GroundedCounts,
    /// `None` when every token is a stopword.
    pub ratio: Option<f64>,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedReport {
    pub records: Vec<ExampleRecord>,
}

impl GroundedReport {
    pub fn build(
        texts: &[String],
        categories: &[Category],
        stopwords: &HashSet<String>,
        frequencies: &HashMap<String, u64>,
        threshold: u64,
    ) -> Result<Self> {
        if texts.len() != categories.len() {
            return Err(Error::Contract(format!(
                "{} texts but {} categories",
                texts.len(),
                categories.len()
            )));
        }
        let records = texts
            .iter()
            .zip(categories)
            .enumerate()
            .map(|(index, (text, &category))| {
                let counts = GroundedCounts::from_classes(&classify_text(text, stopwords, frequencies, threshold));
                ExampleRecord { index, text: text.clone(), counts, ratio: counts.ratio().ok(), category }
            })
            .collect();
        Ok(GroundedReport { records })
    }

    pub fn ratios(&self, category: Category) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.category == category)
            .filter_map(|r| r.ratio)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Quartiles and mean of the ratios in each category; empty categories are
/// left out.
pub fn summarize_categories(report: &GroundedReport) -> Vec<(Category, Summary)> {
    Category::ALL
        .iter()
        .filter_map(|&c| summarize(&report.ratios(c)).ok().map(|s| (c, s)))
        .collect()
}

/// `category,n,q1,median,q3,mean`.
pub fn summary_csv(summaries: &[(Category, Summary)]) -> String {
    let mut out = String::from("category,n,q1,median,q3,mean\n");
    for (c, s) in summaries {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            c.label(),
            s.n,
            s.q1,
            s.median,
            s.q3,
            s.mean
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_are_excluded() {
        use GroundedClass::*;
        let r = grounded_ratio(&[Grounded, Stopword, NonGrounded, NonGrounded, Stopword]).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(grounded_ratio(&[NonGrounded]).unwrap(), 0.0);
        assert!(matches!(grounded_ratio(&[Stopword, Stopword]), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn categories_by_correct_counts() {
        let yes = vec![vec![true]; 5];
        let no = vec![vec![false]; 5];
        assert_eq!(categorize_examples(&yes, &no).unwrap(), vec![Category::Improved]);
        assert_eq!(categorize_examples(&yes, &yes).unwrap(), vec![Category::OnPar]);
        assert_eq!(categorize_examples(&no, &yes).unwrap(), vec![Category::Worsened]);
        assert!(categorize_examples(&yes, &no[..4]).is_err());
    }

    #[test]
    fn quartiles() {
        let s = summarize(&[0.0, 0.25, 0.5, 1.0]).unwrap();
        assert!((s.q1 - 0.1875).abs() < 1e-15);
        assert!((s.q3 - 0.625).abs() < 1e-15);
        let s = summarize(&[0.1, 0.2, 0.3]).unwrap();
        assert!((s.median - 0.2).abs() < 1e-15 && (s.mean - 0.2).abs() < 1e-15);
        let s = summarize(&[0.4]).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.mean), (0.4, 0.4, 0.4, 0.4));
    }

    #[test]
    fn report_round_trip() {
        let stop: HashSet<String> = ["the".to_string()].into();
        let freq: HashMap<String, u64> = [("dog".to_string(), 500)].into();
        let texts = vec!["the dog barks".to_string(), "the".to_string()];
        let report =
            GroundedReport::build(&texts, &[Category::Improved, Category::OnPar], &stop, &freq, 100).unwrap();
        assert_eq!(report.records[0].ratio, Some(0.5));
        assert_eq!(report.records[1].ratio, None);
        let back: GroundedReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let csv = summary_csv(&summarize_categories(&report));
        assert_eq!(csv.lines().count(), 2);
    }
}
