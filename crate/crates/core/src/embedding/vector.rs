use super::EmbeddingError;

/// Norm tolerance for treating a vector as unit length.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// A fixed-dimension embedding.
///
/// Vectors built with [`EmbeddingVector::new`] are unit-normalized, so the
/// similarity kernel reduces to a dot product. Vectors already within
/// `1e-6` of unit length keep their exact bits.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    normalized: bool,
}

fn check_finite(values: &[f32]) -> Result<f64, EmbeddingError> {
    if values.is_empty() {
        return Err(EmbeddingError::InvalidVector("vector has no components".into()));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(EmbeddingError::InvalidVector(format!(
            "component {pos} is not finite ({})",
            values[pos]
        )));
    }
    let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(norm)
}

impl EmbeddingVector {
    /// Validates and unit-normalizes `values`.
    pub fn new(mut values: Vec<f32>) -> Result<Self, EmbeddingError> {
        let norm = check_finite(&values)?;
        if (norm - 1.0).abs() > 1e-6 {
            for v in &mut values {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        Ok(EmbeddingVector { values, normalized: true })
    }

    /// Validates `values` but keeps them as given. The normalized flag is set
    /// when the norm is already within [`UNIT_NORM_TOLERANCE`] of one.
    pub fn raw(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        let norm = check_finite(&values)?;
        let normalized = (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE;
        Ok(EmbeddingVector { values, normalized })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}
