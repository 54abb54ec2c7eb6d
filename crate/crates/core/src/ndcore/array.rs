use super::NdError;

/// Dense row-major `f64` array.
///
/// Shapes with zero extents are allowed; a scalar is any array holding exactly
/// one element (shape `[]` or `[1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NdError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NdError::ShapeMismatch {
                op: "Array::new",
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element array.
    pub fn item(&self) -> Result<f64, NdError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(NdError::NotScalar(self.shape.clone()))
        }
    }

    /// Leading extent, i.e. the batch size for `[batch, ...]` arrays.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NdError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NdError::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                found: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Gathers the listed leading-axis rows into a new array.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Array { shape, data }
    }

    /// Concatenates arrays along the leading axis. All trailing extents must agree.
    pub fn concat_rows(parts: &[Array]) -> Result<Self, NdError> {
        let first = parts.first().ok_or(NdError::Empty("concat_rows"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(NdError::ShapeMismatch {
                    op: "concat_rows",
                    expected: first.shape.clone(),
                    found: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Array { shape, data })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Self, NdError> {
        if self.shape != other.shape {
            return Err(NdError::ShapeMismatch {
                op: "zip_map",
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |a - b|` over all elements; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Array) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0, |m, (a, b)| m.max((a - b).abs())),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<(), NdError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(NdError::NonFinite { op, index }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Array::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Array::new(vec![2, 3], vec![0.0; 5]),
            Err(NdError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scalar_shapes() {
        assert_eq!(Array::scalar(3.0).item().unwrap(), 3.0);
        assert_eq!(Array::from_vec(vec![4.0]).item().unwrap(), 4.0);
        assert!(Array::from_vec(vec![1.0, 2.0]).item().is_err());
    }

    #[test]
    fn rows_and_select() {
        let a = Array::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(a.row(1), &[2., 3.]);
        let s = a.select_rows(&[2, 0]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
        let c = Array::concat_rows(&[s.clone(), a.clone()]).unwrap();
        assert_eq!(c.shape(), &[5, 2]);
    }

    #[test]
    fn finite_check_reports_index() {
        let a = Array::from_vec(vec![0.0, f64::NAN]);
        assert!(matches!(
            a.ensure_finite("t"),
            Err(NdError::NonFinite { index: 1, .. })
        ));
    }
}
