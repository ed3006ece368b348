use crate::error::{Error, Result};

/// Dense row-major array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Number of trailing columns when the array is viewed as rows of its
    /// leading dimensions, with the last `tail_dims` dimensions flattened.
    pub fn cols(&self, tail_dims: usize) -> usize {
        let d = self.shape.len();
        self.shape[d - tail_dims..].iter().product()
    }

    /// View as a 2-d row matrix: all leading dims flattened, last dim is columns.
    pub fn rows_cols(&self) -> (usize, usize) {
        let d = self.shape.len();
        if d == 0 {
            return (1, 1);
        }
        let c = self.shape[d - 1];
        (self.data.len() / c.max(1), c)
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &DenseArray) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// One learnable array with its gradient slot.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: DenseArray,
    pub grad: DenseArray,
}

/// Named, shaped learnable arrays. Entry order is creation order and is the
/// canonical order for checkpoints and gradient accumulation.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: std::collections::HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, name: &str, value: DenseArray) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter name {name:?}")));
        }
        let grad = DenseArray::zeros(value.shape());
        let idx = self.entries.len();
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.entries[idx]
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        self.lookup(name)
            .map(|i| &self.entries[i])
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Total scalars whose name starts with the given prefix.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn store_rejects_duplicate_names() {
        let mut s = ParamStore::new();
        s.create("w", DenseArray::zeros(&[2])).unwrap();
        assert!(s.create("w", DenseArray::zeros(&[2])).is_err());
    }

    #[test]
    fn grad_shape_matches_value_shape() {
        let mut s = ParamStore::new();
        let i = s.create("w", DenseArray::zeros(&[3, 4])).unwrap();
        assert_eq!(s.get(i).value.shape(), s.get(i).grad.shape());
    }
}
