use super::TensorError;

/// A batch of variable-length rows stored as a flat `values` buffer and one
/// start offset per row.
///
/// Row `i` spans `values[offsets[i]..offsets[i + 1]]`, and the last row runs to
/// the end of `values`. Rows may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JaggedTensor<T = u64> {
    values: Vec<T>,
    offsets: Vec<usize>,
}

impl<T> Default for JaggedTensor<T> {
    fn default() -> Self {
        Self {
            values: Vec::new(),
            offsets: Vec::new(),
        }
    }
}

impl<T: Copy> JaggedTensor<T> {
    /// Builds a tensor from raw slices, checking the offset invariants.
    pub fn new(values: Vec<T>, offsets: Vec<usize>) -> Result<Self, TensorError> {
        if offsets.is_empty() && !values.is_empty() {
            return Err(TensorError::InvalidOffsets {
                position: 0,
                reason: format!("{} values but no rows", values.len()),
            });
        }
        if let Some(&first) = offsets.first() {
            if first != 0 {
                return Err(TensorError::InvalidOffsets {
                    position: 0,
                    reason: format!("first offset is {first}, expected 0"),
                });
            }
        }
        for (position, pair) in offsets.windows(2).enumerate() {
            if pair[1] < pair[0] {
                return Err(TensorError::InvalidOffsets {
                    position: position + 1,
                    reason: format!("offset {} decreases from {}", pair[1], pair[0]),
                });
            }
        }
        if let Some(&last) = offsets.last() {
            if last > values.len() {
                return Err(TensorError::InvalidOffsets {
                    position: offsets.len() - 1,
                    reason: format!("offset {last} exceeds {} values", values.len()),
                });
            }
        }
        Ok(Self { values, offsets })
    }

    pub fn from_rows<I, R>(rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[T]>,
    {
        let mut out = Self::default();
        for row in rows {
            out.push_row(row.as_ref());
        }
        out
    }

    pub(crate) fn with_capacity(rows: usize, values: usize) -> Self {
        Self {
            values: Vec::with_capacity(values),
            offsets: Vec::with_capacity(rows),
        }
    }

    pub(crate) fn push_row(&mut self, row: &[T]) {
        self.offsets.push(self.values.len());
        self.values.extend_from_slice(row);
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    fn row_end(&self, row: usize) -> usize {
        self.offsets
            .get(row + 1)
            .copied()
            .unwrap_or(self.values.len())
    }

    /// Panics if `row >= num_rows()`.
    pub fn row(&self, row: usize) -> &[T] {
        &self.values[self.offsets[row]..self.row_end(row)]
    }

    pub fn row_len(&self, row: usize) -> usize {
        self.row_end(row) - self.offsets[row]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        (0..self.num_rows()).map(move |i| self.row(i))
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.num_rows()).map(|i| self.row_len(i)).collect()
    }

    /// Applies `f` to every stored value, leaving the row structure untouched.
    pub fn map_values<U: Copy>(&self, f: impl FnMut(T) -> U) -> JaggedTensor<U> {
        JaggedTensor {
            values: self.values.iter().copied().map(f).collect(),
            offsets: self.offsets.clone(),
        }
    }

    pub fn into_parts(self) -> (Vec<T>, Vec<usize>) {
        (self.values, self.offsets)
    }
}

/// Gathers rows of `jt` by index without densifying.
///
/// Output row `k` is input row `indices[k]`; the output holds exactly the sum
/// of the selected row lengths, with no padding.
pub fn jagged_index_select<T: Copy>(
    jt: &JaggedTensor<T>,
    indices: &[usize],
) -> Result<JaggedTensor<T>, TensorError> {
    let rows = jt.num_rows();
    let mut total = 0;
    for (position, &index) in indices.iter().enumerate() {
        if index >= rows {
            return Err(TensorError::IndexOutOfRange {
                position,
                index,
                rows,
            });
        }
        total += jt.row_len(index);
    }
    let mut out = JaggedTensor::with_capacity(indices.len(), total);
    for &index in indices {
        out.push_row(jt.row(index));
    }
    Ok(out)
}
