//! Review records, attribute spaces, datasets and their on-disk format.

mod io;
mod synth;
mod text;

pub use io::{load_dir, load_lexicon, load_records, save_dir, save_records};
pub(crate) use text::hex as hex_digest;
pub use synth::{synthesize, SynthesisSpec};
pub use text::{
    extract_explanations, is_marker, tokenize, Extracted, Vocabulary, BOS, BOS_ID, EOS, EOS_ID,
    NUM_RESERVED, PAD, PAD_ID, UNK, UNK_ID,
};

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One `(user, item, attribute, rating, explanation)` tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub user: String,
    pub item: String,
    pub attribute: String,
    pub rating: f64,
    pub explanation: Vec<String>,
}

impl Record {
    pub fn validate(&self, space: &AttributeSpace) -> Result<()> {
        if space.index_of(&self.attribute).is_none() {
            return Err(Error::Validation(format!(
                "attribute value {:?} not in {} {:?}",
                self.attribute, space.name, space.values
            )));
        }
        if !(1.0..=5.0).contains(&self.rating) {
            return Err(Error::Validation(format!(
                "rating {} outside [1, 5]",
                self.rating
            )));
        }
        if self.explanation.is_empty() {
            return Err(Error::Validation("empty explanation".into()));
        }
        Ok(())
    }
}

/// Name and ordered values of the protected attribute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSpace {
    pub name: String,
    pub values: Vec<String>,
}

impl AttributeSpace {
    pub fn new(name: impl Into<String>, values: Vec<String>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Config("attribute space needs at least two values".into()));
        }
        let unique: HashSet<_> = values.iter().collect();
        if unique.len() != values.len() {
            return Err(Error::Config("attribute values must be distinct".into()));
        }
        Ok(Self {
            name: name.into(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Records plus split membership. Records are stored train first, then
/// valid, then test, so that saving and reloading the three split files
/// reproduces the dataset exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
    space: AttributeSpace,
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl Dataset {
    /// Validates every record; all records start in the train split.
    pub fn new(records: Vec<Record>, space: AttributeSpace) -> Result<Self> {
        let n = records.len();
        Self::with_splits(records, space, n, 0)
    }

    fn with_splits(records: Vec<Record>, space: AttributeSpace, n_train: usize, n_valid: usize) -> Result<Self> {
        for r in &records {
            r.validate(&space)?;
        }
        let n = records.len();
        let mut groups = vec![Vec::new(); space.len()];
        for (i, r) in records.iter().enumerate() {
            groups[space.index_of(&r.attribute).expect("validated")].push(i);
        }
        Ok(Self {
            train: (0..n_train).collect(),
            valid: (n_train..n_train + n_valid).collect(),
            test: (n_train + n_valid..n).collect(),
            records,
            space,
            groups,
        })
    }

    pub fn from_splits(train: Vec<Record>, valid: Vec<Record>, test: Vec<Record>, space: AttributeSpace) -> Result<Self> {
        let (nt, nv) = (train.len(), valid.len());
        let mut records = train;
        records.extend(valid);
        records.extend(test);
        Self::with_splits(records, space, nt, nv)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &Record {
        &self.records[idx]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn attribute_space(&self) -> &AttributeSpace {
        &self.space
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.indices(split).iter().map(|&i| &self.records[i])
    }

    /// Record indices with attribute value `value_idx`, across all splits.
    pub fn group(&self, value_idx: usize) -> &[usize] {
        &self.groups[value_idx]
    }

    pub fn attribute_index(&self, idx: usize) -> usize {
        self.space
            .index_of(&self.records[idx].attribute)
            .expect("validated on construction")
    }

    /// Random split by `ratios` (train, valid, test), then a repair pass that
    /// moves valid/test records into train until every user and item occurs
    /// in train.
    pub fn split(&self, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
        }
        let n = self.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64) * ratios[0]).round() as usize;
        let n_valid = (((n as f64) * ratios[1]).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);

        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut rest_valid: Vec<usize> = order[n_train..n_train + n_valid].to_vec();
        let mut rest_test: Vec<usize> = order[n_train + n_valid..].to_vec();

        let mut users: BTreeSet<&str> = train.iter().map(|&i| self.records[i].user.as_str()).collect();
        let mut items: BTreeSet<&str> = train.iter().map(|&i| self.records[i].item.as_str()).collect();
        for bucket in [&mut rest_valid, &mut rest_test] {
            let mut kept = Vec::with_capacity(bucket.len());
            for &i in bucket.iter() {
                let r = &self.records[i];
                if users.contains(r.user.as_str()) && items.contains(r.item.as_str()) {
                    kept.push(i);
                } else {
                    users.insert(&r.user);
                    items.insert(&r.item);
                    train.push(i);
                }
            }
            *bucket = kept;
        }

        let pick = |idx: &[usize]| idx.iter().map(|&i| self.records[i].clone()).collect::<Vec<_>>();
        Dataset::from_splits(pick(&train), pick(&rest_valid), pick(&rest_test), self.space.clone())
    }

    /// Same valid and test splits, with train replaced by the records at `keep`.
    pub fn with_train_subset(&self, keep: &[usize]) -> Result<Dataset> {
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.records[i].clone()).collect::<Vec<_>>();
        Dataset::from_splits(pick(keep), pick(&self.valid), pick(&self.test), self.space.clone())
    }

    /// Sorted distinct user and item ids over all records.
    pub fn id_index(&self) -> IdIndex {
        IdIndex::new(&self.records)
    }
}

/// Dense integer ids for user and item strings.
#[derive(Clone, Debug, PartialEq)]
pub struct IdIndex {
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
}

impl IdIndex {
    pub fn new(records: &[Record]) -> Self {
        let users: BTreeSet<&str> = records.iter().map(|r| r.user.as_str()).collect();
        let items: BTreeSet<&str> = records.iter().map(|r| r.item.as_str()).collect();
        Self {
            users: users.into_iter().enumerate().map(|(i, u)| (u.to_string(), i)).collect(),
            items: items.into_iter().enumerate().map(|(i, u)| (u.to_string(), i)).collect(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn user(&self, id: &str) -> Result<usize> {
        self.users
            .get(id)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown user {id}")))
    }

    pub fn item(&self, id: &str) -> Result<usize> {
        self.items
            .get(id)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown item {id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn space() -> AttributeSpace {
        AttributeSpace::new("gender", vec!["male".into(), "female".into()]).unwrap()
    }

    fn rec(user: usize, item: usize, attr: &str) -> Record {
        Record {
            user: format!("u{user}"),
            item: format!("i{item}"),
            attribute: attr.into(),
            rating: 4.0,
            explanation: vec!["ok".into()],
        }
    }

    #[test]
    fn record_validation() {
        let mut r = rec(0, 0, "male");
        assert!(r.validate(&space()).is_ok());
        r.rating = 7.0;
        assert!(matches!(r.validate(&space()), Err(Error::Validation(_))));
        let r = rec(0, 0, "other");
        assert!(r.validate(&space()).is_err());
    }

    #[test]
    fn attribute_space_contract() {
        assert!(AttributeSpace::new("a", vec!["x".into()]).is_err());
        assert!(AttributeSpace::new("a", vec!["x".into(), "x".into()]).is_err());
    }

    fn hundred() -> Dataset {
        // every user and item has many records so repair does nothing
        let records = (0..100).map(|k| rec(k % 5, k % 4, if k % 2 == 0 { "male" } else { "female" })).collect();
        Dataset::new(records, space()).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = hundred();
        let s = ds.split([0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(s.indices(Split::Train).len(), 80);
        assert_eq!(s.indices(Split::Valid).len(), 10);
        assert_eq!(s.indices(Split::Test).len(), 10);
        assert_eq!(s, ds.split([0.8, 0.1, 0.1], 3).unwrap());
        assert_ne!(s, ds.split([0.8, 0.1, 0.1], 4).unwrap());
    }

    #[test]
    fn split_all_train() {
        let s = hundred().split([1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.indices(Split::Train).len(), 100);
        assert!(s.indices(Split::Test).is_empty());
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(matches!(hundred().split([0.5, 0.1, 0.1], 0), Err(Error::Config(_))));
    }

    #[test]
    fn repair_moves_singletons_into_train() {
        let mut records: Vec<Record> = (0..30).map(|k| rec(k % 3, k % 2, "male")).collect();
        for k in 0..10 {
            records.push(rec(100 + k, 50 + k, "female"));
        }
        let ds = Dataset::new(records, space()).unwrap();
        let s = ds.split([0.8, 0.1, 0.1], 11).unwrap();
        let users: BTreeSet<_> = s.split_records(Split::Train).map(|r| r.user.clone()).collect();
        let items: BTreeSet<_> = s.split_records(Split::Train).map(|r| r.item.clone()).collect();
        for r in s.records() {
            assert!(users.contains(&r.user) && items.contains(&r.item));
        }
        assert_eq!(s.len(), 40);
    }

    #[test]
    fn groups_cover_all_records() {
        let ds = hundred();
        let total: usize = (0..2).map(|a| ds.group(a).len()).sum();
        assert_eq!(total, ds.len());
    }
}
