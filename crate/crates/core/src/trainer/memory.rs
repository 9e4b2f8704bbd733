use crate::diffcore::{RngState, Tensor};
use crate::error::{Error, Result};

/// Fixed-capacity FIFO ring of synthetic input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    width: usize,
    rows: Vec<f64>,
    cursor: usize,
    occupancy: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::config("memory bank needs capacity >= 1 and row width >= 1"));
        }
        Ok(MemoryBank {
            capacity,
            width,
            rows: vec![0.0; capacity * width],
            cursor: 0,
            occupancy: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.occupancy
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy == 0
    }

    /// Appends every row of `x`, overwriting the oldest rows once full.
    pub fn push(&mut self, x: &Tensor) -> Result<()> {
        if x.cols() != self.width {
            return Err(Error::shape(
                "memory_push",
                format!("row width {}, bank holds {}", x.cols(), self.width),
            ));
        }
        for row in x.iter_rows() {
            let at = self.cursor * self.width;
            self.rows[at..at + self.width].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.occupancy = (self.occupancy + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored rows from oldest to newest.
    pub fn contents(&self) -> Tensor {
        let start = if self.occupancy < self.capacity { 0 } else { self.cursor };
        let mut data = Vec::with_capacity(self.occupancy * self.width);
        for k in 0..self.occupancy {
            let at = ((start + k) % self.capacity) * self.width;
            data.extend_from_slice(&self.rows[at..at + self.width]);
        }
        Tensor::new(vec![self.occupancy, self.width], data).expect("consistent bank layout")
    }

    /// `n` distinct stored rows chosen uniformly at random.
    pub fn sample(&self, n: usize, rng: &mut RngState) -> Result<Tensor> {
        if n > self.occupancy {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {n} rows from a bank holding {}",
                self.occupancy
            )));
        }
        let idx = rng.sample_without_replacement(self.occupancy, n);
        let mut data = Vec::with_capacity(n * self.width);
        for i in idx {
            let at = i * self.width;
            data.extend_from_slice(&self.rows[at..at + self.width]);
        }
        Tensor::new(vec![n, self.width], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Stream;

    fn rows(vals: &[f64]) -> Tensor {
        Tensor::new(vec![vals.len(), 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn evicts_oldest_first() {
        let mut bank = MemoryBank::new(3, 1).unwrap();
        bank.push(&rows(&[1.0, 2.0])).unwrap();
        assert_eq!(bank.contents().data(), &[1.0, 2.0]);
        bank.push(&rows(&[3.0, 4.0])).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.contents().data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut bank = MemoryBank::new(10, 1).unwrap();
        bank.push(&rows(&[0.0, 1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut rng = RngState::new(1, Stream::Memory);
        let s = bank.sample(5, &mut rng).unwrap();
        let mut v = s.data().to_vec();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(bank.sample(6, &mut rng).is_err());
    }

    #[test]
    fn rejects_degenerate_banks() {
        assert!(MemoryBank::new(0, 2).is_err());
        let mut bank = MemoryBank::new(4, 2).unwrap();
        assert!(bank.push(&rows(&[1.0])).is_err());
    }
}
