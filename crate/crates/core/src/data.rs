//! Observations `(W, A, Y)`, exposure rescaling, and CSV ingestion.
//!
//! All basis computations run on the rescaled exposure `A01 = (A - a_min) / (a_max - a_min)`,
//! where `a_min`/`a_max` are the observed extremes. Reported curves and bands are mapped back to
//! the original exposure units with [`ObservationSet::to_original`].

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::SobolevBasis;
use crate::error::{Error, Result};

/// Result of mapping one exposure value to the unit interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescaled {
    pub value: f64,
    /// Set when the input lay outside `[a_min, a_max]`.
    pub out_of_range: bool,
}

/// Affine min-max map onto `[0, 1]`. Nothing is clamped.
pub fn rescale_to_unit(a: f64, a_min: f64, a_max: f64) -> Result<Rescaled> {
    if !(a_min < a_max) {
        return Err(Error::InvalidInput(format!(
            "rescaling needs a_min < a_max, got [{a_min}, {a_max}]"
        )));
    }
    let value = (a - a_min) / (a_max - a_min);
    Ok(Rescaled {
        value,
        out_of_range: !(0.0..=1.0).contains(&value),
    })
}

#[derive(Debug, Clone)]
pub struct ObservationSet {
    w: DMatrix<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
    a_min: f64,
    a_max: f64,
    a01: Vec<f64>,
    covariate_names: Vec<String>,
}

impl ObservationSet {
    /// Builds a validated observation set; `w` is `n x q` (q may be zero).
    pub fn new(w: DMatrix<f64>, a: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let names = (1..=w.ncols()).map(|j| format!("w{j}")).collect();
        Self::with_names(w, a, y, names)
    }

    pub fn with_names(
        w: DMatrix<f64>,
        a: Vec<f64>,
        y: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = a.len();
        if n < 2 {
            return Err(Error::TooFewRows { needed: 2, found: n });
        }
        if y.len() != n || w.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "row counts differ: W has {}, A has {}, Y has {}",
                w.nrows(),
                n,
                y.len()
            )));
        }
        if covariate_names.len() != w.ncols() {
            return Err(Error::InvalidInput(
                "covariate name count does not match W".into(),
            ));
        }
        if w.iter().chain(&a).chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in data".into()));
        }
        let a_min = a.iter().copied().fold(f64::INFINITY, f64::min);
        let a_max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if a_min >= a_max {
            return Err(Error::DegenerateExposure(a_min));
        }
        let a01 = a.iter().map(|&v| (v - a_min) / (a_max - a_min)).collect();
        Ok(Self {
            w,
            a,
            y,
            a_min,
            a_max,
            a01,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Covariates of row `i` as an owned vector.
    pub fn w_row(&self, i: usize) -> Vec<f64> {
        self.w.row(i).iter().copied().collect()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn a01(&self) -> &[f64] {
        &self.a01
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a_range(&self) -> (f64, f64) {
        (self.a_min, self.a_max)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn to_unit(&self, a: f64) -> Rescaled {
        // a_min < a_max is a construction invariant
        rescale_to_unit(a, self.a_min, self.a_max).expect("validated range")
    }

    pub fn to_original(&self, u: f64) -> f64 {
        self.a_min + u * (self.a_max - self.a_min)
    }

    /// Reads a header-row CSV; the covariate, exposure and outcome columns are picked by name.
    pub fn load_csv(
        path: impl AsRef<Path>,
        covariates: &[String],
        exposure: &str,
        outcome: &str,
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let w_idx = covariates
            .iter()
            .map(|c| find(c))
            .collect::<Result<Vec<_>>>()?;
        let a_idx = find(exposure)?;
        let y_idx = find(outcome)?;

        let parse = |rec: &csv::StringRecord, idx: usize, row: usize| -> Result<f64> {
            let raw = rec.get(idx).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumeric {
                    column: headers[idx].to_string(),
                    row,
                    value: raw.to_string(),
                })
        };

        let mut w_flat = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            for &j in &w_idx {
                w_flat.push(parse(&rec, j, row + 1)?);
            }
            a.push(parse(&rec, a_idx, row + 1)?);
            y.push(parse(&rec, y_idx, row + 1)?);
        }
        if a.len() < 2 {
            return Err(Error::TooFewRows {
                needed: 2,
                found: a.len(),
            });
        }
        let w = DMatrix::from_row_slice(a.len(), w_idx.len(), &w_flat);
        Self::with_names(w, a, y, covariates.to_vec())
    }

    /// Writes covariates, then `exposure_name`, then `outcome_name`; floats use shortest
    /// round-trip formatting so a reload reproduces the values exactly.
    pub fn write_csv(
        &self,
        path: impl AsRef<Path>,
        exposure_name: &str,
        outcome_name: &str,
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        header.push(exposure_name);
        header.push(outcome_name);
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.w.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.a[i].to_string());
            rec.push(self.y[i].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Candidate dose-response `θ*` on the rescaled exposure scale. Centering happens downstream.
#[derive(Clone)]
pub enum NullCurve {
    Zero,
    /// `c_0 + Σ c_d η_d(a01)` in the given basis.
    Basis {
        basis: SobolevBasis,
        intercept: f64,
        coefs: Vec<f64>,
    },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl NullCurve {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        NullCurve::Custom(Arc::new(f))
    }

    pub fn eval(&self, a01: f64) -> f64 {
        match self {
            NullCurve::Zero => 0.0,
            NullCurve::Basis {
                basis,
                intercept,
                coefs,
            } => {
                let phi = basis.eval(a01);
                intercept + phi.iter().zip(coefs).map(|(p, c)| p * c).sum::<f64>()
            }
            NullCurve::Custom(f) => f(a01),
        }
    }

    pub fn eval_many(&self, a01: &[f64]) -> Vec<f64> {
        a01.iter().map(|&a| self.eval(a)).collect()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, NullCurve::Zero)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            NullCurve::Zero => "zero",
            NullCurve::Basis { .. } => "basis",
            NullCurve::Custom(_) => "custom",
        }
    }
}

impl fmt::Debug for NullCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NullCurve::Zero => write!(f, "NullCurve::Zero"),
            NullCurve::Basis {
                intercept, coefs, ..
            } => f
                .debug_struct("NullCurve::Basis")
                .field("intercept", intercept)
                .field("coefs", coefs)
                .finish(),
            NullCurve::Custom(_) => write!(f, "NullCurve::Custom(..)"),
        }
    }
}

/// Serializable form of a [`NullCurve`] used in configuration files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullCurveSpec {
    #[default]
    Zero,
    BasisCoefficients {
        #[serde(default)]
        intercept: f64,
        coefs: Vec<f64>,
    },
}

impl NullCurveSpec {
    pub fn to_curve(&self, basis: &SobolevBasis) -> Result<NullCurve> {
        match self {
            NullCurveSpec::Zero => Ok(NullCurve::Zero),
            NullCurveSpec::BasisCoefficients { intercept, coefs } => {
                if coefs.len() != basis.dim() {
                    return Err(Error::InvalidInput(format!(
                        "null curve has {} coefficients but the basis has {} functions",
                        coefs.len(),
                        basis.dim()
                    )));
                }
                Ok(NullCurve::Basis {
                    basis: *basis,
                    intercept: *intercept,
                    coefs: coefs.clone(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_to_unit(0.0, -1.0, 1.0).unwrap().value, 0.5);
        let r = rescale_to_unit(-1.0, -1.0, 1.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(!r.out_of_range);
        let r = rescale_to_unit(2.0, -1.0, 1.0).unwrap();
        assert_eq!(r.value, 1.5);
        assert!(r.out_of_range);
        assert!(rescale_to_unit(0.0, 1.0, 1.0).is_err());
        assert!(rescale_to_unit(0.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn load_three_rows() {
        let f = write_tmp("w1,a,y\n0.1,-1,3\n0.2,0,4\n0.3,1,5\n");
        let d = ObservationSet::load_csv(f.path(), &["w1".into()], "a", "y").unwrap();
        assert_eq!(d.a01(), &[0.0, 0.5, 1.0]);
        assert_eq!(d.n(), 3);
        assert_eq!(d.q(), 1);
        assert_eq!(d.y(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn constant_exposure_is_degenerate() {
        let f = write_tmp("a,y\n2,1\n2,0\n2,3\n");
        let err = ObservationSet::load_csv(f.path(), &[], "a", "y").unwrap_err();
        assert!(matches!(err, Error::DegenerateExposure(_)));
        assert!(err.to_string().contains("degenerate exposure range"));
    }

    #[test]
    fn load_errors() {
        let f = write_tmp("w1,a,y\n0.1,-1,3\n0.2,0,4\n");
        let err = ObservationSet::load_csv(f.path(), &["w1".into()], "dose", "y").unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "dose"));

        let f = write_tmp("w1,a,y\n0.1,-1,3\n0.2,zero,4\n");
        let err = ObservationSet::load_csv(f.path(), &["w1".into()], "a", "y").unwrap_err();
        assert!(matches!(err, Error::NonNumeric { row: 2, .. }));

        let f = write_tmp("a,y\n0.1,3\n");
        let err = ObservationSet::load_csv(f.path(), &[], "a", "y").unwrap_err();
        assert!(matches!(err, Error::TooFewRows { found: 1, .. }));
    }

    #[test]
    fn no_covariates_allowed() {
        let d = ObservationSet::new(DMatrix::zeros(3, 0), vec![0.0, 1.0, 2.0], vec![1.0; 3]).unwrap();
        assert_eq!(d.q(), 0);
        assert_eq!(d.to_original(0.5), 1.0);
    }

    #[test]
    fn null_curves() {
        assert_eq!(NullCurve::Zero.eval(0.3), 0.0);
        let basis = SobolevBasis::new(2);
        let c = NullCurveSpec::BasisCoefficients {
            intercept: 1.0,
            coefs: vec![1.0, 0.0],
        }
        .to_curve(&basis)
        .unwrap();
        assert!((c.eval(0.0) - (1.0 + 2f64.sqrt())).abs() < 1e-15);
        let bad = NullCurveSpec::BasisCoefficients {
            intercept: 0.0,
            coefs: vec![1.0],
        };
        assert!(bad.to_curve(&basis).is_err());
    }
}
