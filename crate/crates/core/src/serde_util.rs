//! Flat-array serde adapters for fixed-size nalgebra types.

pub mod vec23 {
    use crate::linmodel::Vec23;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec23, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec23, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        if raw.len() != 23 {
            return Err(serde::de::Error::custom(format!("expected 23 entries, got {}", raw.len())));
        }
        Ok(Vec23::from_column_slice(&raw))
    }
}

/// Row-major nested arrays for any dense matrix.
pub fn rows<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<f64, R, C>>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}
