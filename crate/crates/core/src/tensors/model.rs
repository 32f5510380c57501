use super::TensorError;

/// Features whose predicted dedupe factor exceeds this are usually worth
/// deduplicating.
pub const WORTH_IT_DEDUPE_FACTOR: f64 = 1.5;

/// Analytical predictor of how much a feature's values slice shrinks when a
/// session-clustered batch is deduplicated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DedupeModel {
    /// Average samples per session, at least 1.
    pub samples_per_session: f64,
    pub batch_size: usize,
    /// Average list length of the feature.
    pub avg_len: f64,
    /// Probability the feature is unchanged between adjacent rows of a session.
    pub unchanged_prob: f64,
}

impl DedupeModel {
    pub fn new(
        samples_per_session: f64,
        batch_size: usize,
        avg_len: f64,
        unchanged_prob: f64,
    ) -> Result<Self, TensorError> {
        let model = Self {
            samples_per_session,
            batch_size,
            avg_len,
            unchanged_prob,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), TensorError> {
        if !(self.samples_per_session >= 1.0) || !self.samples_per_session.is_finite() {
            return Err(TensorError::InvalidModelParameter {
                name: "samples_per_session",
                value: self.samples_per_session,
                expected: ">= 1",
            });
        }
        if self.batch_size < 1 {
            return Err(TensorError::InvalidModelParameter {
                name: "batch_size",
                value: self.batch_size as f64,
                expected: ">= 1",
            });
        }
        if !(self.avg_len > 0.0) || !self.avg_len.is_finite() {
            return Err(TensorError::InvalidModelParameter {
                name: "avg_len",
                value: self.avg_len,
                expected: "> 0",
            });
        }
        if !(0.0..=1.0).contains(&self.unchanged_prob) {
            return Err(TensorError::InvalidModelParameter {
                name: "unchanged_prob",
                value: self.unchanged_prob,
                expected: "in [0, 1]",
            });
        }
        Ok(())
    }

    /// Expected values-slice length after deduplication.
    pub fn dedupe_len(&self) -> Result<f64, TensorError> {
        self.validate()?;
        let s = self.samples_per_session;
        // l*B*(1 - (S-1)/S*d), with the division by S done last
        let kept_per_session = s - (s - 1.0) * self.unchanged_prob;
        Ok(self.avg_len * self.batch_size as f64 * kept_per_session / s)
    }

    /// Ratio of the original values-slice length to [`Self::dedupe_len`].
    pub fn dedupe_factor(&self) -> Result<f64, TensorError> {
        let len = self.dedupe_len()?;
        Ok(self.avg_len * self.batch_size as f64 / len)
    }

    pub fn worth_deduplicating(&self) -> Result<bool, TensorError> {
        Ok(self.dedupe_factor()? > WORTH_IT_DEDUPE_FACTOR)
    }
}
