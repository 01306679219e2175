use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Bijection between a flat `d_x`-vector and a `d x L` token matrix.
///
/// `order[k]` is the flat index placed at column-major position `k`
/// (row `k % d`, column `k / d`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReshapeSpec {
    d_x: usize,
    d: usize,
    l: usize,
    order: Vec<usize>,
}

impl ReshapeSpec {
    /// Consecutive chunks of `d` entries become tokens: column `j` holds
    /// `x[j d .. (j + 1) d]`.
    pub fn columns(d_x: usize, d: usize) -> Result<Self> {
        if d == 0 || d_x % d != 0 {
            return Err(Error::Shape(format!(
                "token dimension {d} does not divide d_x = {d_x}"
            )));
        }
        Ok(Self {
            d_x,
            d,
            l: d_x / d,
            order: (0..d_x).collect(),
        })
    }

    /// `p x p` patches of a row-major `side x side` image, patches in
    /// row-major order, pixels row-major inside each patch.
    pub fn patches(side: usize, p: usize) -> Result<Self> {
        if p < 2 || side % p != 0 {
            return Err(Error::Shape(format!(
                "patch size {p} must be >= 2 and divide the side {side}"
            )));
        }
        let per = side / p;
        let d = p * p;
        let mut order = Vec::with_capacity(side * side);
        for pr in 0..per {
            for pc in 0..per {
                for a in 0..p {
                    for b in 0..p {
                        order.push((pr * p + a) * side + pc * p + b);
                    }
                }
            }
        }
        Ok(Self {
            d_x: side * side,
            d,
            l: per * per,
            order,
        })
    }

    pub fn from_order(d: usize, order: Vec<usize>) -> Result<Self> {
        let d_x = order.len();
        if d == 0 || d_x % d != 0 {
            return Err(Error::Shape(format!(
                "token dimension {d} does not divide d_x = {d_x}"
            )));
        }
        let mut seen = vec![false; d_x];
        for &o in &order {
            if o >= d_x || seen[o] {
                return Err(Error::Shape("reshape order is not a permutation".into()));
            }
            seen[o] = true;
        }
        Ok(Self {
            d_x,
            d,
            l: d_x / d,
            order,
        })
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn reshape(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.d_x {
            return Err(Error::Shape(format!(
                "reshape expects {} entries, got {}",
                self.d_x,
                x.len()
            )));
        }
        Ok(DMatrix::from_iterator(
            self.d,
            self.l,
            self.order.iter().map(|&i| x[i]),
        ))
    }

    pub fn unreshape(&self, z: &DMatrix<f64>) -> Result<Vec<f64>> {
        if z.nrows() != self.d || z.ncols() != self.l {
            return Err(Error::Shape(format!(
                "unreshape expects {}x{}, got {}x{}",
                self.d,
                self.l,
                z.nrows(),
                z.ncols()
            )));
        }
        let mut x = vec![0.0; self.d_x];
        for (k, &i) in self.order.iter().enumerate() {
            x[i] = z[k];
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn square_image_patches() {
        let r = ReshapeSpec::patches(4, 2).unwrap();
        assert_eq!((r.d(), r.l()), (4, 4));
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let z = r.reshape(&x).unwrap();
        // first patch: pixels (0,0) (0,1) (1,0) (1,1)
        assert_eq!(z.column(0).as_slice(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(z.column(3).as_slice(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn column_major_layout() {
        let r = ReshapeSpec::columns(6, 2).unwrap();
        let z = r.reshape(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(
            z,
            DMatrix::from_row_slice(2, 3, &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0])
        );
    }

    #[test]
    fn round_trip() {
        let mut rng = seeded(1);
        for r in [
            ReshapeSpec::patches(6, 3).unwrap(),
            ReshapeSpec::columns(12, 4).unwrap(),
        ] {
            for _ in 0..100 {
                let x: Vec<f64> = (0..r.d_x()).map(|_| rng.random::<f64>()).collect();
                assert_eq!(r.unreshape(&r.reshape(&x).unwrap()).unwrap(), x);
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(ReshapeSpec::columns(7, 2).is_err());
        assert!(ReshapeSpec::patches(5, 2).is_err());
        assert!(ReshapeSpec::from_order(2, vec![0, 0, 1, 2]).is_err());
        assert!(ReshapeSpec::columns(4, 2).unwrap().reshape(&[1.0]).is_err());
    }
}
