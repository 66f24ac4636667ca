use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Observed counts with covariates and offsets.
///
/// `y` is `n × p` (sites × species), `x` is `n × d`, `o` is `n × p`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountDataset {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    o: DMatrix<f64>,
    species: Vec<String>,
}

impl CountDataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, o: DMatrix<f64>) -> Result<Self> {
        let p = y.ncols();
        let species = (0..p).map(|j| format!("sp{}", j + 1)).collect();
        Self::with_names(y, x, o, species)
    }

    /// Intercept-only design with zero offsets.
    pub fn from_counts(y: DMatrix<f64>) -> Result<Self> {
        let (n, p) = y.shape();
        Self::new(y, DMatrix::from_element(n, 1, 1.0), DMatrix::zeros(n, p))
    }

    pub fn with_names(
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        o: DMatrix<f64>,
        species: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = y.shape();
        if n < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 sites, got {n}")));
        }
        if p < 3 {
            return Err(Error::InvalidInput(format!("need at least 3 species, got {p}")));
        }
        if x.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "covariates have {} rows, counts have {n}",
                x.nrows()
            )));
        }
        if o.shape() != (n, p) {
            return Err(Error::InvalidInput(format!(
                "offsets are {}x{}, counts are {n}x{p}",
                o.nrows(),
                o.ncols()
            )));
        }
        if species.len() != p {
            return Err(Error::InvalidInput("species name count does not match columns".into()));
        }
        for ((i, j), &v) in y.iter().enumerate().map(|(k, v)| ((k % n, k / n), v)) {
            if !(v >= 0.0 && v.fract() == 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "count at site {}, species {} is not a non-negative integer: {v}",
                    i + 1,
                    species[j]
                )));
            }
        }
        for j in 0..p {
            if y.column(j).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidInput(format!("species {} has only zero counts", species[j])));
            }
        }
        if x.iter().chain(o.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariates and offsets must be finite".into()));
        }
        Ok(CountDataset { y, x, o, species })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }
    pub fn p(&self) -> usize {
        self.y.ncols()
    }
    pub fn d(&self) -> usize {
        self.x.ncols()
    }
    pub fn counts(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn offsets(&self) -> &DMatrix<f64> {
        &self.o
    }
    pub fn species(&self) -> &[String] {
        &self.species
    }

    /// The dataset restricted to the given sites, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let pick = |m: &DMatrix<f64>| m.select_rows(rows.iter());
        Self::with_names(pick(&self.y), pick(&self.x), pick(&self.o), self.species.clone())
    }

    /// The dataset restricted to the given species, in order.
    pub fn select_species(&self, cols: &[usize]) -> Result<Self> {
        let names = cols.iter().map(|&j| self.species[j].clone()).collect();
        Self::with_names(
            self.y.select_columns(cols.iter()),
            self.x.clone(),
            self.o.select_columns(cols.iter()),
            names,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 1.0, 4.0, 1.0, 0.0])
    }

    #[test]
    fn accepts_valid_counts() {
        let d = CountDataset::from_counts(counts()).unwrap();
        assert_eq!((d.n(), d.p(), d.d()), (3, 3, 1));
        assert_eq!(d.offsets().sum(), 0.0);
    }

    #[test]
    fn rejects_bad_counts() {
        let mut y = counts();
        y[(0, 0)] = 1.5;
        assert!(CountDataset::from_counts(y).is_err());
        let mut y = counts();
        y[(1, 1)] = -1.0;
        assert!(CountDataset::from_counts(y).is_err());
        let mut y = counts();
        y.column_mut(2).fill(0.0);
        assert!(CountDataset::from_counts(y).is_err());
        assert!(CountDataset::from_counts(DMatrix::from_element(3, 2, 1.0)).is_err());
        assert!(CountDataset::from_counts(DMatrix::from_element(1, 3, 1.0)).is_err());
    }

    #[test]
    fn rejects_misaligned_covariates() {
        let y = counts();
        assert!(CountDataset::new(y.clone(), DMatrix::zeros(2, 1), DMatrix::zeros(3, 3)).is_err());
        assert!(CountDataset::new(y, DMatrix::zeros(3, 1), DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn row_and_column_selection() {
        let d = CountDataset::from_counts(counts()).unwrap();
        let r = d.select_rows(&[2, 0]).unwrap();
        assert_eq!(r.counts()[(0, 0)], 4.0);
        let c = d.select_species(&[2, 1, 0]).unwrap();
        assert_eq!(c.species()[0], "sp3");
        assert_eq!(c.counts()[(0, 0)], 2.0);
    }
}
