use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PspError, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub label_fraction: f64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Disjointness and no duplicates.
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(PspError::Invalid(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        let mut seen = HashSet::new();
        for id in self.labeled.iter().chain(&self.unlabeled).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(PspError::Invalid(format!("id {id} appears more than once in the split")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PspError::io(path, e))?;
        let split: DatasetSplit = serde_json::from_str(&text).map_err(|e| PspError::json(path, e))?;
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, text).map_err(|e| PspError::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitOptions {
    pub label_fraction: f64,
    /// Share of all items held out for testing; 0 leaves the test set empty.
    pub test_fraction: f64,
    pub stratified: bool,
}

fn take_count(fraction: f64, n: usize, at_least_one: bool) -> usize {
    let k = (fraction * n as f64).round() as usize;
    let k = if at_least_one { k.max(1) } else { k };
    k.min(n)
}

/// Partitions `items` (`(id, label)`) into test, labeled and unlabeled ids.
///
/// The test share is drawn first; the labeled share is taken from what
/// remains. Stratified mode works per class with a minimum of one labeled
/// item per class. Output lists are sorted by id.
pub fn make_split(items: &[(String, Option<usize>)], opts: SplitOptions, rng: &mut RngState) -> Result<DatasetSplit> {
    if !(opts.label_fraction > 0.0 && opts.label_fraction <= 1.0) {
        return Err(PspError::Invalid(format!(
            "label fraction must lie in (0, 1], got {}",
            opts.label_fraction
        )));
    }
    if !(0.0..1.0).contains(&opts.test_fraction) {
        return Err(PspError::Invalid(format!(
            "test fraction must lie in [0, 1), got {}",
            opts.test_fraction
        )));
    }
    let mut sorted: Vec<&(String, Option<usize>)> = items.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let groups: Vec<Vec<String>> = if opts.stratified {
        let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (id, label) in &sorted {
            let l = label.ok_or_else(|| PspError::Invalid(format!("stratified split needs a label for {id}")))?;
            by_class.entry(l).or_default().push(id.clone());
        }
        let n_classes = by_class.keys().next_back().map_or(0, |m| m + 1);
        if let Some(missing) = (0..n_classes).find(|c| !by_class.contains_key(c)) {
            return Err(PspError::Invalid(format!("class {missing} has no items")));
        }
        by_class.into_values().collect()
    } else {
        vec![sorted.iter().map(|(id, _)| id.clone()).collect()]
    };

    let mut split = DatasetSplit {
        label_fraction: opts.label_fraction,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    for mut ids in groups {
        rng.shuffle(&mut ids);
        let n_test = take_count(opts.test_fraction, ids.len(), false);
        let train = ids.split_off(n_test);
        split.test.extend(ids);
        if train.is_empty() {
            continue;
        }
        let n_lab = take_count(opts.label_fraction, train.len(), opts.stratified);
        split.labeled.extend_from_slice(&train[..n_lab]);
        split.unlabeled.extend_from_slice(&train[n_lab..]);
    }
    split.labeled.sort();
    split.unlabeled.sort();
    split.test.sort();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize, classes: usize) -> Vec<(String, Option<usize>)> {
        (0..n).map(|i| (format!("s{i:04}"), Some(i % classes))).collect()
    }

    fn opts(label_fraction: f64, stratified: bool) -> SplitOptions {
        SplitOptions {
            label_fraction,
            test_fraction: 0.0,
            stratified,
        }
    }

    #[test]
    fn counts() {
        let its = items(1000, 4);
        let s = make_split(&its, opts(0.05, false), &mut RngState::new(1)).unwrap();
        assert_eq!(s.labeled.len(), 50);
        assert_eq!(s.unlabeled.len(), 950);
        let s = make_split(&its, opts(1.0, true), &mut RngState::new(1)).unwrap();
        assert!(s.unlabeled.is_empty());
        s.validate().unwrap();
    }

    #[test]
    fn determinism_and_class_counts() {
        let its = items(200, 4);
        let per_class = |s: &DatasetSplit| {
            let mut c = [0usize; 4];
            for id in &s.labeled {
                let i: usize = id[1..].parse().unwrap();
                c[i % 4] += 1;
            }
            c
        };
        let base = make_split(&its, opts(0.1, true), &mut RngState::new(0)).unwrap();
        for seed in 0..5 {
            let a = make_split(&its, opts(0.1, true), &mut RngState::new(seed)).unwrap();
            let b = make_split(&its, opts(0.1, true), &mut RngState::new(seed)).unwrap();
            assert_eq!(a, b);
            assert_eq!(per_class(&a), [5; 4]);
            if seed > 0 {
                assert_ne!(a.labeled, base.labeled);
            }
        }
    }

    #[test]
    fn stratified_errors() {
        let mut its = items(8, 4);
        its.retain(|(_, l)| *l != Some(2));
        assert!(make_split(&its, opts(0.5, true), &mut RngState::new(0)).is_err());
        let unl = vec![("a".to_string(), None)];
        assert!(make_split(&unl, opts(0.5, true), &mut RngState::new(0)).is_err());
        assert!(make_split(&unl, opts(0.5, false), &mut RngState::new(0)).is_ok());
        assert!(make_split(&unl, opts(0.0, false), &mut RngState::new(0)).is_err());
    }

    #[test]
    fn test_share_is_disjoint() {
        let its = items(100, 4);
        let o = SplitOptions {
            label_fraction: 0.1,
            test_fraction: 0.2,
            stratified: true,
        };
        let s = make_split(&its, o, &mut RngState::new(3)).unwrap();
        s.validate().unwrap();
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.labeled.len() + s.unlabeled.len(), 80);
    }
}
