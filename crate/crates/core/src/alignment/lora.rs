//! Low-rank weight updates `ΔW = A·B`.

use super::AlignmentError;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AlignmentError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(AlignmentError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, AlignmentError> {
        if self.cols != other.rows {
            return Err(AlignmentError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }
}

/// `A ∈ ℝ^{n×r}`, `B ∈ ℝ^{r×m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    a: Matrix,
    b: Matrix,
}

impl LoraFactors {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self, AlignmentError> {
        if a.cols == 0 {
            return Err(AlignmentError::Shape("rank must be at least 1".into()));
        }
        if a.cols != b.rows {
            return Err(AlignmentError::Shape(format!(
                "A is {}x{} but B is {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }
}

pub fn lora_delta(f: &LoraFactors) -> Matrix {
    f.a.matmul(&f.b).expect("factor shapes checked at construction")
}

/// `W + A·B`.
pub fn lora_apply(w: &Matrix, f: &LoraFactors) -> Result<Matrix, AlignmentError> {
    if w.rows != f.a.rows || w.cols != f.b.cols {
        return Err(AlignmentError::Shape(format!(
            "layer is {}x{} but update is {}x{}",
            w.rows, w.cols, f.a.rows, f.b.cols
        )));
    }
    let delta = lora_delta(f);
    let data = w.data.iter().zip(&delta.data).map(|(x, d)| x + d).collect();
    Ok(Matrix {
        rows: w.rows,
        cols: w.cols,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_product() {
        let a = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let f = LoraFactors::new(a, b).unwrap();
        assert_eq!(lora_delta(&f).data(), &[3.0, 4.0, 6.0, 8.0]);
        let w = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(lora_apply(&w, &f).unwrap().data(), &[4.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn zero_a_is_identity() {
        let f = LoraFactors::new(Matrix::zeros(3, 2), Matrix::new(2, 4, vec![1.5; 8]).unwrap()).unwrap();
        assert!(lora_delta(&f).data().iter().all(|&v| v == 0.0));
        let w = Matrix::new(3, 4, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(lora_apply(&w, &f).unwrap(), w);
    }

    #[test]
    fn shape_errors() {
        assert!(LoraFactors::new(Matrix::zeros(2, 2), Matrix::zeros(3, 2)).is_err());
        assert!(LoraFactors::new(Matrix::zeros(2, 0), Matrix::zeros(0, 2)).is_err());
        let f = LoraFactors::new(Matrix::zeros(2, 1), Matrix::zeros(1, 3)).unwrap();
        assert!(lora_apply(&Matrix::zeros(2, 2), &f).is_err());
    }
}
