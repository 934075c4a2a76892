//! Black-box quality scores over generated token lists. Higher is better.

use std::collections::BTreeSet;

use crate::corpus::is_marker;
use crate::error::{Error, Result};

/// Number of tokens, excluding begin/end/pad markers.
pub fn q_len<S: AsRef<str>>(y: &[S]) -> f64 {
    y.iter().filter(|t| !is_marker(t.as_ref())).count() as f64
}

/// Number of distinct lexicon tokens mentioned.
pub fn q_feat<S: AsRef<str>>(y: &[S], lexicon: &BTreeSet<String>) -> f64 {
    let seen: BTreeSet<&str> = y
        .iter()
        .map(|t| t.as_ref())
        .filter(|t| lexicon.contains(*t))
        .collect();
    seen.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QualityKind {
    Length,
    FeatureCount,
    Composite,
}

impl QualityKind {
    /// Short tag used in reports and configs: `L`, `F` or `LF`.
    pub fn tag(self) -> &'static str {
        match self {
            QualityKind::Length => "L",
            QualityKind::FeatureCount => "F",
            QualityKind::Composite => "LF",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L" | "LENGTH" => Ok(QualityKind::Length),
            "F" | "FEAT" | "FEATURE" | "FEATURE_COUNT" => Ok(QualityKind::FeatureCount),
            "LF" | "COMPOSITE" => Ok(QualityKind::Composite),
            other => Err(Error::Config(format!("unknown quality measure {other:?}"))),
        }
    }

    pub const ALL: [QualityKind; 3] = [QualityKind::Length, QualityKind::FeatureCount, QualityKind::Composite];
}

/// A configured quality oracle. Only the token list is visible to it.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityOracle {
    pub kind: QualityKind,
    lexicon: BTreeSet<String>,
    /// `(length, feature)` weights for the composite score.
    pub weights: (f64, f64),
}

impl QualityOracle {
    pub fn length() -> Self {
        Self {
            kind: QualityKind::Length,
            lexicon: BTreeSet::new(),
            weights: (1.0, 0.0),
        }
    }

    pub fn feature_count(lexicon: BTreeSet<String>) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(Error::Config("feature lexicon is empty".into()));
        }
        Ok(Self {
            kind: QualityKind::FeatureCount,
            lexicon,
            weights: (0.0, 1.0),
        })
    }

    pub fn composite(lexicon: BTreeSet<String>, weights: (f64, f64)) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(Error::Config("feature lexicon is empty".into()));
        }
        if weights.0 < 0.0 || weights.1 < 0.0 || !weights.0.is_finite() || !weights.1.is_finite() {
            return Err(Error::Config("composite weights must be finite and >= 0".into()));
        }
        Ok(Self {
            kind: QualityKind::Composite,
            lexicon,
            weights,
        })
    }

    pub fn of_kind(kind: QualityKind, lexicon: &BTreeSet<String>) -> Result<Self> {
        match kind {
            QualityKind::Length => Ok(Self::length()),
            QualityKind::FeatureCount => Self::feature_count(lexicon.clone()),
            QualityKind::Composite => Self::composite(lexicon.clone(), (1.0, 1.0)),
        }
    }

    pub fn score<S: AsRef<str>>(&self, y: &[S]) -> f64 {
        match self.kind {
            QualityKind::Length => q_len(y),
            QualityKind::FeatureCount => q_feat(y, &self.lexicon),
            QualityKind::Composite => {
                let (wl, wf) = self.weights;
                wl * q_len(y) + wf * q_feat(y, &self.lexicon)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;

    fn lex() -> BTreeSet<String> {
        ["graphics", "controller", "price"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn length_examples() {
        assert_eq!(q_len(&["great", "game", "!"]), 3.0);
        assert_eq!(q_len::<&str>(&[]), 0.0);
        assert_eq!(q_len(&["<bos>", "a", "<eos>"]), 1.0);
    }

    #[test]
    fn feature_examples() {
        let y = tokenize("the graphics are great and the controller works");
        assert_eq!(q_feat(&y, &lex()), 2.0);
        assert_eq!(q_feat(&tokenize("nothing here"), &lex()), 0.0);
        assert_eq!(q_feat(&tokenize("graphics graphics graphics"), &lex()), 1.0);
    }

    #[test]
    fn composite_examples() {
        let q = QualityOracle::composite(lex(), (1.0, 1.0)).unwrap();
        let y = tokenize("graphics and price are fine");
        assert_eq!(q.score(&y), 7.0);
        assert_eq!(q.score::<&str>(&[]), 0.0);
        let only_feat = QualityOracle::composite(lex(), (0.0, 1.0)).unwrap();
        assert_eq!(only_feat.score(&y), q_feat(&y, &lex()));
    }

    #[test]
    fn empty_lexicon_rejected() {
        assert!(QualityOracle::feature_count(BTreeSet::new()).is_err());
    }

    #[test]
    fn kind_tags_round_trip() {
        for k in QualityKind::ALL {
            assert_eq!(QualityKind::parse(k.tag()).unwrap(), k);
        }
        assert!(QualityKind::parse("X").is_err());
    }

    proptest! {
        #[test]
        fn oracle_bounds(words in prop::collection::vec(prop::sample::select(vec![
            "graphics", "controller", "price", "the", "is", "<eos>", "good",
        ]), 0..30)) {
            let l = lex();
            let len = q_len(&words);
            let feat = q_feat(&words, &l);
            prop_assert!(feat <= l.len() as f64);
            prop_assert!(feat <= len);
            let q = QualityOracle::composite(l.clone(), (1.0, 1.0)).unwrap();
            prop_assert_eq!(q.score(&words), len + feat);
            prop_assert_eq!(q.score(&words), q.score(&words));
        }
    }
}
