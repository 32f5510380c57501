use std::collections::HashMap;

use super::TensorError;
use crate::datagen::ImpressionRecord;

/// Single-feature encoding where each row is an `(offset, length)` window into
/// one shared buffer, so a list that is a shift of an earlier one only adds
/// its new tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialIkjt {
    feature_key: String,
    values: Vec<u64>,
    windows: Vec<(usize, usize)>,
}

impl PartialIkjt {
    pub fn new(
        feature_key: impl Into<String>,
        values: Vec<u64>,
        windows: Vec<(usize, usize)>,
    ) -> Result<Self, TensorError> {
        for (window, &(offset, length)) in windows.iter().enumerate() {
            if offset.checked_add(length).map_or(true, |end| end > values.len()) {
                return Err(TensorError::InvalidWindow {
                    window,
                    offset,
                    length,
                    buffer_len: values.len(),
                });
            }
        }
        Ok(Self {
            feature_key: feature_key.into(),
            values,
            windows,
        })
    }

    pub fn feature_key(&self) -> &str {
        &self.feature_key
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn windows(&self) -> &[(usize, usize)] {
        &self.windows
    }

    pub fn batch_size(&self) -> usize {
        self.windows.len()
    }

    pub fn row(&self, row: usize) -> &[u64] {
        let (offset, length) = self.windows[row];
        &self.values[offset..offset + length]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> + '_ {
        (0..self.windows.len()).map(move |i| self.row(i))
    }
}

struct ShiftBuffer {
    values: Vec<u64>,
    positions: HashMap<u64, Vec<usize>>,
}

impl ShiftBuffer {
    fn append(&mut self, tail: &[u64]) {
        for &v in tail {
            self.positions.entry(v).or_default().push(self.values.len());
            self.values.push(v);
        }
    }

    fn find_window(&self, list: &[u64]) -> Option<usize> {
        let first = list.first()?;
        self.positions.get(first)?.iter().copied().find(|&start| {
            self.values
                .get(start..start + list.len())
                .is_some_and(|w| w == list)
        })
    }

    /// Longest proper prefix of `list` that is also a suffix of the buffer.
    fn suffix_overlap(&self, list: &[u64]) -> usize {
        let max = list.len().saturating_sub(1).min(self.values.len());
        (1..=max)
            .rev()
            .find(|&k| self.values[self.values.len() - k..] == list[..k])
            .unwrap_or(0)
    }
}

/// Greedily encodes one feature of a batch as a [`PartialIkjt`].
///
/// Rows are visited in batch order. A row already present as a contiguous
/// window of the buffer references it; otherwise, if a proper prefix of the
/// row matches the buffer's suffix, only the remaining tail is appended;
/// otherwise the whole row is appended.
pub fn build_partial_ikjt(
    rows: &[ImpressionRecord],
    key: &str,
) -> Result<PartialIkjt, TensorError> {
    if rows.is_empty() {
        return Err(TensorError::EmptyBatch);
    }
    let mut buf = ShiftBuffer {
        values: Vec::new(),
        positions: HashMap::new(),
    };
    let mut windows = Vec::with_capacity(rows.len());
    for record in rows {
        let list = record.feature(key);
        if list.is_empty() {
            windows.push((0, 0));
            continue;
        }
        if let Some(start) = buf.find_window(list) {
            windows.push((start, list.len()));
            continue;
        }
        let overlap = buf.suffix_overlap(list);
        let start = buf.values.len() - overlap;
        buf.append(&list[overlap..]);
        windows.push((start, list.len()));
    }
    PartialIkjt::new(key, buf.values, windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn rows_of(lists: &[Vec<u64>]) -> Vec<ImpressionRecord> {
        lists
            .iter()
            .enumerate()
            .map(|(i, l)| ImpressionRecord {
                session_id: 0,
                timestamp: i as u64,
                features: BTreeMap::from([("b".to_string(), l.clone())]),
                label: 0,
            })
            .collect()
    }

    #[test]
    fn shift_example() {
        let rows = rows_of(&[vec![3, 4, 5], vec![4, 5, 6], vec![3, 4, 5]]);
        let p = build_partial_ikjt(&rows, "b").unwrap();
        assert_eq!(p.values(), &[3, 4, 5, 6]);
        assert_eq!(p.windows(), &[(0, 3), (1, 3), (0, 3)]);
    }

    #[test]
    fn identical_rows_share_one_window() {
        let rows = rows_of(&[vec![9, 9], vec![9, 9]]);
        let p = build_partial_ikjt(&rows, "b").unwrap();
        assert_eq!(p.values(), &[9, 9]);
        assert_eq!(p.windows(), &[(0, 2), (0, 2)]);
    }

    #[test]
    fn empty_rows_and_unrelated_rows() {
        let rows = rows_of(&[vec![], vec![1, 2], vec![7, 8], vec![]]);
        let p = build_partial_ikjt(&rows, "b").unwrap();
        assert_eq!(p.values(), &[1, 2, 7, 8]);
        let got: Vec<&[u64]> = p.rows().collect();
        assert_eq!(got, vec![&[][..], &[1, 2], &[7, 8], &[]]);
    }

    #[test]
    fn rejects_empty_batch_and_bad_windows() {
        assert_eq!(build_partial_ikjt(&[], "b").unwrap_err(), TensorError::EmptyBatch);
        assert!(PartialIkjt::new("b", vec![1, 2], vec![(1, 2)]).is_err());
    }

    fn shifted_sessions() -> impl Strategy<Value = Vec<Vec<u64>>> {
        // each session starts from a random window and shifts by one with some probability
        prop::collection::vec(
            (prop::collection::vec(0u64..20, 1..6), prop::collection::vec(any::<bool>(), 1..6)),
            1..6,
        )
        .prop_map(|sessions| {
            let mut out = Vec::new();
            let mut next = 100;
            for (mut list, shifts) in sessions {
                for shift in shifts {
                    if shift {
                        list.remove(0);
                        list.push(next);
                        next += 1;
                    }
                    out.push(list.clone());
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn reconstruction_and_size_bound(lists in shifted_sessions()) {
            let rows = rows_of(&lists);
            let p = build_partial_ikjt(&rows, "b").unwrap();
            let got: Vec<Vec<u64>> = p.rows().map(<[u64]>::to_vec).collect();
            prop_assert_eq!(&got, &lists);
            let concat: usize = lists.iter().map(Vec::len).sum();
            prop_assert!(p.values().len() <= concat);
        }
    }
}
