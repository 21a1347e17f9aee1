use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

/// Hold out one frame per block of `every` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub every: usize,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol { every: 8 }
    }
}

/// Positions `p` (0-based, in sorted order) with `p % k == k-1` become test frames.
pub fn make_split(image_ids: &[u32], protocol: SplitProtocol) -> Result<SplitSpec> {
    let k = protocol.every;
    if k < 2 {
        return Err(Error::Config(format!("split block size must be >= 2, got {k}")));
    }
    if image_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data("image ids must be sorted ascending without duplicates".into()));
    }
    if image_ids.len() < k {
        warn!(
            "only {} images; 1-in-{k} protocol yields an empty test split",
            image_ids.len()
        );
    }
    let (test, train): (Vec<_>, Vec<_>) = image_ids.iter().enumerate().partition(|(p, _)| p % k == k - 1);
    Ok(SplitSpec {
        train_ids: train.into_iter().map(|(_, &id)| id).collect(),
        test_ids: test.into_iter().map(|(_, &id)| id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixteen_ids() {
        let ids: Vec<u32> = (0..16).collect();
        let s = make_split(&ids, SplitProtocol::default()).unwrap();
        assert_eq!(s.test_ids, vec![7, 15]);
        assert_eq!(s.train_ids.len(), 14);
    }

    #[test]
    fn eight_and_hundred() {
        let s = make_split(&(0..8).collect::<Vec<_>>(), SplitProtocol::default()).unwrap();
        assert_eq!(s.test_ids, vec![7]);
        let s = make_split(&(0..100).collect::<Vec<_>>(), SplitProtocol::default()).unwrap();
        assert_eq!(s.test_ids.len(), 12);
    }

    #[test]
    fn fewer_than_eight_gives_empty_test() {
        let s = make_split(&[3, 4, 9], SplitProtocol::default()).unwrap();
        assert!(s.test_ids.is_empty());
        assert_eq!(s.train_ids, vec![3, 4, 9]);
    }

    #[test]
    fn unsorted_rejected() {
        assert!(make_split(&[2, 1], SplitProtocol::default()).is_err());
    }

    proptest! {
        #[test]
        fn partition_complete(mut ids in proptest::collection::btree_set(0u32..10_000, 0..200)) {
            let ids: Vec<u32> = std::mem::take(&mut ids).into_iter().collect();
            let s = make_split(&ids, SplitProtocol::default()).unwrap();
            let mut all: Vec<u32> = s.train_ids.iter().chain(&s.test_ids).copied().collect();
            all.sort();
            prop_assert_eq!(&all, &ids);
            prop_assert_eq!(s.test_ids.len(), ids.len() / 8);
            prop_assert_eq!(make_split(&ids, SplitProtocol::default()).unwrap(), s);
        }
    }
}
