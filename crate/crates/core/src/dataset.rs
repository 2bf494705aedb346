//! Observational samples `{T, M, Y, X}` (optionally with a causally prior
//! mediator `W`): CSV ingestion, validation and affine rescaling onto
//! `[-1, 1]`.
//!
//! Validation is strict. A file with a missing cell, a treatment value outside
//! `{0, 1}` or an empty treatment arm is rejected as a whole; rows are never
//! dropped silently because that changes the estimand.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tokens read as a missing cell.
const MISSING_TOKENS: &[&str] = &["", "NA", "na", "N/A", "NaN", "nan", "null", "NULL"];

/// How many missing cells are spelled out in the error message.
const MISSING_SHOWN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Treatment,
    Mediator,
    CausallyPriorMediator,
    Outcome,
    Covariate,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Treatment => "treatment",
            Role::Mediator => "mediator",
            Role::CausallyPriorMediator => "causally_prior_mediator",
            Role::Outcome => "outcome",
            Role::Covariate => "covariate",
        };
        f.write_str(s)
    }
}

/// A named column and the part it plays in the analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRole {
    pub role: Role,
    pub name: String,
}

impl ColumnRole {
    pub fn new(role: Role, name: impl Into<String>) -> Self {
        Self {
            role,
            name: name.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingCell {
    /// 1-based data row (the header is not counted).
    pub row: usize,
    pub column: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("input file not found: {0}")]
    FileNotFound(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema mismatch: column `{column}` is not present in the header")]
    SchemaMismatch { column: String },
    #[error("malformed csv at data row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("non-binary treatment value `{value}` at data row {row}")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("{}", format_missing(.0))]
    MissingValue(Vec<MissingCell>),
    #[error("cannot parse `{value}` as a number at data row {row}, column `{column}`")]
    InvalidNumber {
        row: usize,
        column: String,
        value: String,
    },
    #[error("non-finite value at data row {row}, column `{column}`")]
    NotFinite { row: usize, column: String },
    #[error("degenerate treatment arm: no observations with T = {arm}")]
    DegenerateArm { arm: u8 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

fn format_missing(cells: &[MissingCell]) -> String {
    let mut s = format!("{} missing value(s):", cells.len());
    for c in cells.iter().take(MISSING_SHOWN) {
        s.push_str(&format!(" (row {}, column `{}`)", c.row, c.column));
    }
    if cells.len() > MISSING_SHOWN {
        s.push_str(" ...");
    }
    s
}

/// Checks the role counts: one treatment, one outcome, at least one covariate
/// and one mediator, unique names.
pub fn validate_schema(schema: &[ColumnRole]) -> Result<(), DatasetError> {
    let count = |r: Role| schema.iter().filter(|c| c.role == r).count();
    if count(Role::Treatment) != 1 {
        return Err(DatasetError::InvalidSchema(
            "exactly one treatment column is required".into(),
        ));
    }
    if count(Role::Outcome) != 1 {
        return Err(DatasetError::InvalidSchema(
            "exactly one outcome column is required".into(),
        ));
    }
    if count(Role::Covariate) == 0 {
        return Err(DatasetError::InvalidSchema(
            "at least one covariate column is required".into(),
        ));
    }
    if count(Role::Mediator) == 0 {
        return Err(DatasetError::InvalidSchema(
            "at least one mediator column is required".into(),
        ));
    }
    for (i, c) in schema.iter().enumerate() {
        if c.name.is_empty() {
            return Err(DatasetError::InvalidSchema("empty column name".into()));
        }
        if schema[..i].iter().any(|o| o.name == c.name) {
            return Err(DatasetError::InvalidSchema(format!(
                "column `{}` is listed twice",
                c.name
            )));
        }
    }
    Ok(())
}

/// A validated rectangular sample. Rows are observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    treated: Vec<bool>,
    y: DVector<f64>,
    x: DMatrix<f64>,
    m: DMatrix<f64>,
    w: Option<DMatrix<f64>>,
    schema: Vec<ColumnRole>,
}

impl Dataset {
    /// Builds a dataset with generated column names (`t`, `m1..`, `w1..`,
    /// `y`, `x1..`).
    pub fn new(
        treated: Vec<bool>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        m: DMatrix<f64>,
        w: Option<DMatrix<f64>>,
    ) -> Result<Self, DatasetError> {
        let mut schema = vec![ColumnRole::new(Role::Treatment, "t")];
        schema.extend((1..=m.ncols()).map(|j| ColumnRole::new(Role::Mediator, format!("m{j}"))));
        if let Some(w) = &w {
            schema.extend(
                (1..=w.ncols())
                    .map(|j| ColumnRole::new(Role::CausallyPriorMediator, format!("w{j}"))),
            );
        }
        schema.push(ColumnRole::new(Role::Outcome, "y"));
        schema.extend((1..=x.ncols()).map(|j| ColumnRole::new(Role::Covariate, format!("x{j}"))));
        Self::with_schema(treated, y, x, m, w, schema)
    }

    /// Builds a dataset whose columns carry the names in `schema`. The
    /// schema's role counts must match the matrix widths.
    pub fn with_schema(
        treated: Vec<bool>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        m: DMatrix<f64>,
        w: Option<DMatrix<f64>>,
        schema: Vec<ColumnRole>,
    ) -> Result<Self, DatasetError> {
        validate_schema(&schema)?;
        let n = treated.len();
        let width = |r: Role| schema.iter().filter(|c| c.role == r).count();
        if y.len() != n || x.nrows() != n || m.nrows() != n {
            return Err(DatasetError::Dimension(format!(
                "row counts differ: t={n}, y={}, x={}, m={}",
                y.len(),
                x.nrows(),
                m.nrows()
            )));
        }
        if x.ncols() != width(Role::Covariate) || m.ncols() != width(Role::Mediator) {
            return Err(DatasetError::Dimension(
                "matrix widths do not match the schema".into(),
            ));
        }
        match &w {
            Some(w) if w.nrows() != n || w.ncols() != width(Role::CausallyPriorMediator) => {
                return Err(DatasetError::Dimension(
                    "prior-mediator matrix does not match the schema".into(),
                ))
            }
            None if width(Role::CausallyPriorMediator) > 0 => {
                return Err(DatasetError::Dimension(
                    "schema names a prior mediator but none was supplied".into(),
                ))
            }
            _ => {}
        }
        let named = |r: Role| -> Vec<String> {
            schema
                .iter()
                .filter(|c| c.role == r)
                .map(|c| c.name.clone())
                .collect()
        };
        check_finite(y.iter().copied(), &named(Role::Outcome))?;
        check_finite_matrix(&x, &named(Role::Covariate))?;
        check_finite_matrix(&m, &named(Role::Mediator))?;
        if let Some(w) = &w {
            check_finite_matrix(w, &named(Role::CausallyPriorMediator))?;
        }
        if !treated.iter().any(|&t| t) {
            return Err(DatasetError::DegenerateArm { arm: 1 });
        }
        if treated.iter().all(|&t| t) {
            return Err(DatasetError::DegenerateArm { arm: 0 });
        }
        Ok(Self {
            treated,
            y,
            x,
            m,
            w,
            schema,
        })
    }

    pub fn n(&self) -> usize {
        self.treated.len()
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    /// Treatment indicator of observation `i` as a number.
    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        if self.treated[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn w(&self) -> Option<&DMatrix<f64>> {
        self.w.as_ref()
    }

    pub fn schema(&self) -> &[ColumnRole] {
        &self.schema
    }

    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|&&t| t).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// `T̄`, the sample share of treated units.
    pub fn treated_share(&self) -> f64 {
        self.n_treated() as f64 / self.n() as f64
    }

    /// The full mediator block: `[W | M]` when a prior mediator exists,
    /// otherwise `M`.
    pub fn joint_mediators(&self) -> DMatrix<f64> {
        match &self.w {
            Some(w) => hstack(w, &self.m),
            None => self.m.clone(),
        }
    }

    /// Same sample with a different outcome vector.
    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Self, DatasetError> {
        Self::with_schema(
            self.treated.clone(),
            y,
            self.x.clone(),
            self.m.clone(),
            self.w.clone(),
            self.schema.clone(),
        )
    }

    /// Writes the dataset as CSV in schema column order. Numbers use the
    /// shortest representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut out = csv::Writer::from_writer(writer);
        let header: Vec<&str> = self.schema.iter().map(|c| c.name.as_str()).collect();
        out.write_record(&header).map_err(csv_io)?;
        let mut counters = [0usize; 5];
        let slot = |r: Role| match r {
            Role::Treatment => 0,
            Role::Mediator => 1,
            Role::CausallyPriorMediator => 2,
            Role::Outcome => 3,
            Role::Covariate => 4,
        };
        let columns: Vec<(Role, usize)> = self
            .schema
            .iter()
            .map(|c| {
                let k = slot(c.role);
                let j = counters[k];
                counters[k] += 1;
                (c.role, j)
            })
            .collect();
        for i in 0..self.n() {
            let record: Vec<String> = columns
                .iter()
                .map(|&(role, j)| match role {
                    Role::Treatment => (if self.treated[i] { "1" } else { "0" }).to_string(),
                    Role::Mediator => format!("{}", self.m[(i, j)]),
                    Role::CausallyPriorMediator => {
                        format!("{}", self.w.as_ref().expect("schema checked")[(i, j)])
                    }
                    Role::Outcome => format!("{}", self.y[i]),
                    Role::Covariate => format!("{}", self.x[(i, j)]),
                })
                .collect();
            out.write_record(&record).map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> DatasetError {
    DatasetError::Io(std::io::Error::other(e))
}

fn check_finite(values: impl Iterator<Item = f64>, names: &[String]) -> Result<(), DatasetError> {
    for (i, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(DatasetError::NotFinite {
                row: i + 1,
                column: names.first().cloned().unwrap_or_default(),
            });
        }
    }
    Ok(())
}

fn check_finite_matrix(m: &DMatrix<f64>, names: &[String]) -> Result<(), DatasetError> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(DatasetError::NotFinite {
                    row: i + 1,
                    column: names.get(j).cloned().unwrap_or_default(),
                });
            }
        }
    }
    Ok(())
}

pub(crate) fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Reads and validates a CSV file against `schema`.
pub fn load_csv(path: impl AsRef<Path>, schema: &[ColumnRole]) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::FileNotFound(path.display().to_string()),
        _ => DatasetError::Io(e),
    })?;
    read_csv(std::io::BufReader::new(file), schema)
}

/// Parses CSV text (one header row, comma separated, `.` decimal point).
/// Columns not named in `schema` are ignored.
pub fn read_csv<R: Read>(reader: R, schema: &[ColumnRole]) -> Result<Dataset, DatasetError> {
    validate_schema(schema)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DatasetError::Malformed {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let mut positions = Vec::with_capacity(schema.len());
    for col in schema {
        let pos = headers
            .iter()
            .position(|h| h.trim() == col.name)
            .ok_or_else(|| DatasetError::SchemaMismatch {
                column: col.name.clone(),
            })?;
        positions.push(pos);
    }

    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); schema.len()];
    let mut missing = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| DatasetError::Malformed {
            row,
            message: e.to_string(),
        })?;
        for (k, (col, &pos)) in schema.iter().zip(&positions).enumerate() {
            let raw = record.get(pos).unwrap_or("").trim();
            if MISSING_TOKENS.contains(&raw) {
                missing.push(MissingCell {
                    row,
                    column: col.name.clone(),
                });
                cells[k].push(f64::NAN);
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| DatasetError::InvalidNumber {
                row,
                column: col.name.clone(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::NotFinite {
                    row,
                    column: col.name.clone(),
                });
            }
            if col.role == Role::Treatment && v != 0.0 && v != 1.0 {
                return Err(DatasetError::NonBinaryTreatment {
                    row,
                    value: raw.to_string(),
                });
            }
            cells[k].push(v);
        }
    }
    if !missing.is_empty() {
        return Err(DatasetError::MissingValue(missing));
    }

    let n = cells[0].len();
    let gather = |role: Role| -> Option<DMatrix<f64>> {
        let cols: Vec<&Vec<f64>> = schema
            .iter()
            .zip(&cells)
            .filter(|(c, _)| c.role == role)
            .map(|(_, v)| v)
            .collect();
        if cols.is_empty() {
            return None;
        }
        Some(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
    };
    let t_col = schema
        .iter()
        .position(|c| c.role == Role::Treatment)
        .expect("schema validated");
    let y_col = schema
        .iter()
        .position(|c| c.role == Role::Outcome)
        .expect("schema validated");
    let treated = cells[t_col].iter().map(|&v| v == 1.0).collect();
    let y = DVector::from_vec(cells[y_col].clone());
    Dataset::with_schema(
        treated,
        y,
        gather(Role::Covariate).expect("schema validated"),
        gather(Role::Mediator).expect("schema validated"),
        gather(Role::CausallyPriorMediator),
        schema.to_vec(),
    )
}

/// `v ↦ (v - shift) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub shift: f64,
    pub scale: f64,
}

impl AffineMap {
    /// Sends the column's min to -1 and max to +1; a constant column goes to 0.
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        if hi > lo {
            Self {
                shift: 0.5 * (hi + lo),
                scale: 2.0 / (hi - lo),
            }
        } else {
            Self {
                shift: if lo.is_finite() { lo } else { 0.0 },
                scale: 1.0,
            }
        }
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.shift) * self.scale
    }

    #[inline]
    pub fn invert(&self, v: f64) -> f64 {
        v / self.scale + self.shift
    }
}

/// Per-column affine maps for covariates, mediators and prior mediators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingMap {
    pub x: Vec<AffineMap>,
    pub m: Vec<AffineMap>,
    pub w: Option<Vec<AffineMap>>,
}

pub fn fit_scaling(d: &Dataset) -> ScalingMap {
    let fit = |mat: &DMatrix<f64>| -> Vec<AffineMap> {
        mat.column_iter()
            .map(|c| AffineMap::fit(c.iter().copied()))
            .collect()
    };
    ScalingMap {
        x: fit(d.x()),
        m: fit(d.m()),
        w: d.w().map(fit),
    }
}

fn map_matrix(mat: &DMatrix<f64>, maps: &[AffineMap], f: impl Fn(&AffineMap, f64) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| f(&maps[j], mat[(i, j)]))
}

impl ScalingMap {
    pub fn apply(&self, d: &Dataset) -> Dataset {
        self.transform(d, |a, v| a.apply(v))
    }

    pub fn invert(&self, d: &Dataset) -> Dataset {
        self.transform(d, |a, v| a.invert(v))
    }

    fn transform(&self, d: &Dataset, f: impl Fn(&AffineMap, f64) -> f64 + Copy) -> Dataset {
        assert_eq!(self.x.len(), d.x().ncols(), "covariate width mismatch");
        assert_eq!(self.m.len(), d.m().ncols(), "mediator width mismatch");
        Dataset {
            treated: d.treated.clone(),
            y: d.y.clone(),
            x: map_matrix(d.x(), &self.x, f),
            m: map_matrix(d.m(), &self.m, f),
            w: match (d.w(), &self.w) {
                (Some(w), Some(maps)) => Some(map_matrix(w, maps, f)),
                (None, _) => None,
                (Some(_), None) => panic!("scaling map has no prior-mediator maps"),
            },
            schema: d.schema.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<ColumnRole> {
        vec![
            ColumnRole::new(Role::Treatment, "treat"),
            ColumnRole::new(Role::Mediator, "med"),
            ColumnRole::new(Role::Outcome, "out"),
            ColumnRole::new(Role::Covariate, "age"),
        ]
    }

    #[test]
    fn four_row_file_loads() {
        let csv = "treat,med,out,age\n1,0.5,2.0,30\n0,0.1,1.0,40\n1,0.7,3.5,35\n0,0.2,1.5,50\n";
        let d = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.n_treated(), 2);
        assert_eq!(d.n_control(), 2);
        assert_eq!(d.x()[(3, 0)], 50.0);
        assert_eq!(d.y()[2], 3.5);
    }

    #[test]
    fn all_treated_is_degenerate() {
        let csv = "treat,med,out,age\n1,0.5,2,30\n1,0.1,1,40\n1,0.7,3,35\n";
        match read_csv(csv.as_bytes(), &schema()) {
            Err(DatasetError::DegenerateArm { arm: 0 }) => {}
            other => panic!("expected DegenerateArm, got {other:?}"),
        }
    }

    #[test]
    fn treatment_of_two_is_rejected() {
        let csv = "treat,med,out,age\n1,0.5,2,30\n2,0.1,1,40\n0,0.7,3,35\n";
        match read_csv(csv.as_bytes(), &schema()) {
            Err(DatasetError::NonBinaryTreatment { row: 2, value }) => assert_eq!(value, "2"),
            other => panic!("expected NonBinaryTreatment, got {other:?}"),
        }
    }

    #[test]
    fn missing_cells_are_itemized() {
        let csv = "treat,med,out,age\n1,,2,30\n0,0.1,NA,40\n0,0.7,3,35\n";
        match read_csv(csv.as_bytes(), &schema()) {
            Err(DatasetError::MissingValue(cells)) => {
                assert_eq!(
                    cells,
                    vec![
                        MissingCell {
                            row: 1,
                            column: "med".into()
                        },
                        MissingCell {
                            row: 2,
                            column: "out".into()
                        }
                    ]
                );
            }
            other => panic!("expected MissingValue, got {other:?}"),
        }
    }

    #[test]
    fn absent_column_is_schema_mismatch() {
        let csv = "treat,med,age\n1,0.5,30\n0,0.1,40\n";
        match read_csv(csv.as_bytes(), &schema()) {
            Err(DatasetError::SchemaMismatch { column }) => assert_eq!(column, "out"),
            other => panic!("expected SchemaMismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_csv("/definitely/not/here.csv", &schema()),
            Err(DatasetError::FileNotFound(_))
        ));
    }

    #[test]
    fn schema_needs_one_treatment() {
        let mut s = schema();
        s.push(ColumnRole::new(Role::Treatment, "t2"));
        assert!(matches!(
            validate_schema(&s),
            Err(DatasetError::InvalidSchema(_))
        ));
        let s: Vec<_> = schema()
            .into_iter()
            .filter(|c| c.role != Role::Covariate)
            .collect();
        assert!(validate_schema(&s).is_err());
    }

    #[test]
    fn scaling_examples() {
        let a = AffineMap::fit([0.0, 5.0, 10.0].into_iter());
        assert_eq!(
            [0.0, 5.0, 10.0].map(|v| a.apply(v)),
            [-1.0, 0.0, 1.0]
        );
        let c = AffineMap::fit([3.0, 3.0, 3.0].into_iter());
        assert_eq!([3.0, 3.0, 3.0].map(|v| c.apply(v)), [0.0, 0.0, 0.0]);
        assert!(c.scale > 0.0);
        let s = AffineMap::fit([-2.0, 2.0].into_iter());
        assert_eq!(s.shift, 0.0);
        assert_eq!(s.scale, 0.5);
    }

    #[test]
    fn scaling_is_idempotent() {
        let csv = "treat,med,out,age\n1,0.5,2,30\n0,0.1,1,40\n1,0.7,3,35\n0,-4,1,50\n";
        let d = read_csv(csv.as_bytes(), &schema()).unwrap();
        let scaled = fit_scaling(&d).apply(&d);
        let again = fit_scaling(&scaled);
        for a in again.x.iter().chain(&again.m) {
            assert!(a.shift.abs() <= 1e-12 && (a.scale - 1.0).abs() <= 1e-12, "{a:?}");
        }
    }

    #[test]
    fn write_then_read_is_bit_exact() {
        let csv = "treat,med,out,age\n1,0.123456789012345,2.5e-7,30\n0,0.1,-1.75,40\n";
        let d = read_csv(csv.as_bytes(), &schema()).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &schema()).unwrap();
        assert_eq!(d, back);
    }
}
