//! Source/target sample containers, validation and linear decision rules.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("table has no covariate columns")]
    NoCovariates,
    #[error("row {row}: expected {expected} fields, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: value is not finite")]
    NonFiniteValue { row: usize, column: String },
    #[error("row {row}: treatment must be 0 or 1")]
    InvalidTreatment { row: usize },
    #[error("row {row}: event flag must be 0 or 1")]
    InvalidEventFlag { row: usize },
    #[error("row {row}: observed time must be positive")]
    NonPositiveTime { row: usize },
    #[error("row {row}: design weight must be positive")]
    NonPositiveWeight { row: usize },
    #[error("sample has no records")]
    Empty,
    #[error("treatment arm {0} has no subjects")]
    EmptyArm(Arm),
    #[error("treatment arm {0} has no observed events")]
    NoEvents(Arm),
    #[error("covariate dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("rule coefficients must be finite with last coefficient of magnitude one")]
    InvalidRule,
}

/// Binary treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn from_indicator(treated: bool) -> Arm {
        if treated {
            Arm::Treated
        } else {
            Arm::Control
        }
    }

    pub fn is_treated(self) -> bool {
        self == Arm::Treated
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub x: Vec<f64>,
    pub arm: Arm,
    /// Observed time `min(T, C)`.
    pub time: f64,
    /// `true` when the event of interest was observed.
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRecord {
    pub x: Vec<f64>,
    /// Design weight, the inverse target inclusion probability.
    pub design_weight: f64,
}

/// Validated source sample: both arms present, each with at least one event.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSample {
    records: Vec<SourceRecord>,
    covariate_names: Vec<String>,
}

/// Validated target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSample {
    records: Vec<TargetRecord>,
    covariate_names: Vec<String>,
}

pub fn default_covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

fn check_finite(row: usize, names: &[String], x: &[f64]) -> Result<(), DataError> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(DataError::NonFiniteValue {
            row,
            column: names[j].clone(),
        }),
        None => Ok(()),
    }
}

impl SourceSample {
    pub fn new(records: Vec<SourceRecord>) -> Result<Self, DataError> {
        let p = records.first().map(|r| r.x.len()).ok_or(DataError::Empty)?;
        Self::with_names(records, default_covariate_names(p))
    }

    pub fn with_names(
        records: Vec<SourceRecord>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        let p = covariate_names.len();
        if p == 0 {
            return Err(DataError::NoCovariates);
        }
        let mut arms = [false; 2];
        let mut events = [false; 2];
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            if r.x.len() != p {
                return Err(DataError::DimensionMismatch {
                    expected: p,
                    found: r.x.len(),
                });
            }
            check_finite(row, &covariate_names, &r.x)?;
            if !r.time.is_finite() {
                return Err(DataError::NonFiniteValue {
                    row,
                    column: "u".into(),
                });
            }
            if r.time <= 0.0 {
                return Err(DataError::NonPositiveTime { row });
            }
            arms[r.arm.index()] = true;
            events[r.arm.index()] |= r.event;
        }
        for arm in Arm::BOTH {
            if !arms[arm.index()] {
                return Err(DataError::EmptyArm(arm));
            }
            if !events[arm.index()] {
                return Err(DataError::NoEvents(arm));
            }
        }
        Ok(Self {
            records,
            covariate_names,
        })
    }

    pub fn records(&self) -> &[SourceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Sub-sample by index (indices may repeat, as in a bootstrap draw).
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::with_names(records, self.covariate_names.clone())
    }

    pub fn into_records(self) -> Vec<SourceRecord> {
        self.records
    }
}

impl TargetSample {
    pub fn new(records: Vec<TargetRecord>) -> Result<Self, DataError> {
        let p = records.first().map(|r| r.x.len()).ok_or(DataError::Empty)?;
        Self::with_names(records, default_covariate_names(p))
    }

    pub fn with_names(
        records: Vec<TargetRecord>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        let p = covariate_names.len();
        if p == 0 {
            return Err(DataError::NoCovariates);
        }
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            if r.x.len() != p {
                return Err(DataError::DimensionMismatch {
                    expected: p,
                    found: r.x.len(),
                });
            }
            check_finite(row, &covariate_names, &r.x)?;
            if !r.design_weight.is_finite() {
                return Err(DataError::NonFiniteValue {
                    row,
                    column: "design_weight".into(),
                });
            }
            if r.design_weight <= 0.0 {
                return Err(DataError::NonPositiveWeight { row });
            }
        }
        Ok(Self {
            records,
            covariate_names,
        })
    }

    pub fn records(&self) -> &[TargetRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Sum of design weights, the implied population size.
    pub fn total_weight(&self) -> f64 {
        self.records.iter().map(|r| r.design_weight).sum()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::with_names(records, self.covariate_names.clone())
    }
}

/// A raw, untyped table: header plus string cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    fn column(&self, name: &str) -> Result<usize, DataError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    fn cell(&self, row: usize, col: usize) -> Result<f64, DataError> {
        let raw = self.rows[row][col].trim();
        raw.parse::<f64>().map_err(|_| DataError::Parse {
            row: row + 1,
            column: self.header[col].clone(),
            value: raw.to_string(),
        })
    }

    fn check_row_lengths(&self) -> Result<(), DataError> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != self.header.len() {
                return Err(DataError::RowLength {
                    row: i + 1,
                    expected: self.header.len(),
                    found: r.len(),
                });
            }
        }
        Ok(())
    }

    fn covariates(&self, reserved: &[usize]) -> Vec<usize> {
        (0..self.header.len())
            .filter(|c| !reserved.contains(c))
            .collect()
    }
}

fn flag(value: f64) -> Option<bool> {
    if value == 0.0 {
        Some(false)
    } else if value == 1.0 {
        Some(true)
    } else {
        None
    }
}

/// Validates a source table with header `x1,...,xp,a,u,delta`. Covariate
/// columns are every column other than `a`, `u` and `delta`, in header order.
pub fn validate_source(table: &RawTable) -> Result<SourceSample, DataError> {
    let a_col = table.column("a")?;
    let u_col = table.column("u")?;
    let d_col = table.column("delta")?;
    let cov_cols = table.covariates(&[a_col, u_col, d_col]);
    if cov_cols.is_empty() {
        return Err(DataError::NoCovariates);
    }
    table.check_row_lengths()?;
    let names: Vec<String> = cov_cols.iter().map(|&c| table.header[c].clone()).collect();
    let mut records = Vec::with_capacity(table.rows.len());
    for i in 0..table.rows.len() {
        let row = i + 1;
        let x = cov_cols
            .iter()
            .map(|&c| table.cell(i, c))
            .collect::<Result<Vec<_>, _>>()?;
        check_finite(row, &names, &x)?;
        let a = table.cell(i, a_col)?;
        let arm = flag(a)
            .map(Arm::from_indicator)
            .ok_or(DataError::InvalidTreatment { row })?;
        let time = table.cell(i, u_col)?;
        if !time.is_finite() {
            return Err(DataError::NonFiniteValue {
                row,
                column: "u".into(),
            });
        }
        let event = flag(table.cell(i, d_col)?).ok_or(DataError::InvalidEventFlag { row })?;
        records.push(SourceRecord {
            x,
            arm,
            time,
            event,
        });
    }
    SourceSample::with_names(records, names)
}

/// Validates a target table with header `x1,...,xp,design_weight`.
pub fn validate_target(table: &RawTable, p: usize) -> Result<TargetSample, DataError> {
    let w_col = table.column("design_weight")?;
    let cov_cols = table.covariates(&[w_col]);
    if cov_cols.len() != p {
        return Err(DataError::DimensionMismatch {
            expected: p,
            found: cov_cols.len(),
        });
    }
    table.check_row_lengths()?;
    let names: Vec<String> = cov_cols.iter().map(|&c| table.header[c].clone()).collect();
    let mut records = Vec::with_capacity(table.rows.len());
    for i in 0..table.rows.len() {
        let x = cov_cols
            .iter()
            .map(|&c| table.cell(i, c))
            .collect::<Result<Vec<_>, _>>()?;
        let design_weight = table.cell(i, w_col)?;
        records.push(TargetRecord { x, design_weight });
    }
    TargetSample::with_names(records, names)
}

/// Linear decision rule `d(x) = 1{eta . (1, x) >= 0}` with `|eta[p]| = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRule {
    eta: Vec<f64>,
}

impl LinearRule {
    /// Wraps coefficients that already satisfy the normalization.
    pub fn new(eta: Vec<f64>) -> Result<Self, DataError> {
        let last = *eta.last().ok_or(DataError::InvalidRule)?;
        if eta.len() < 2 || eta.iter().any(|v| !v.is_finite()) || last.abs() != 1.0 {
            return Err(DataError::InvalidRule);
        }
        Ok(Self { eta })
    }

    pub(crate) fn from_normalized(eta: Vec<f64>) -> Self {
        debug_assert_eq!(eta.last().map(|v| v.abs()), Some(1.0));
        Self { eta }
    }

    /// `eta = (±intercept, 0, ..., 0, 1)`: treats (or withholds treatment
    /// from) every subject whose last covariate is below `intercept` in
    /// magnitude.
    pub fn constant(p: usize, treat: bool, intercept: f64) -> Self {
        let mut eta = vec![0.0; p + 1];
        eta[0] = if treat { intercept } else { -intercept };
        eta[p] = 1.0;
        Self { eta }
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Covariate dimension `p`.
    pub fn dim(&self) -> usize {
        self.eta.len() - 1
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        linear_score(&self.eta, x)
    }

    /// Treatment recommended at `x`; the boundary `score == 0` treats.
    pub fn decide(&self, x: &[f64]) -> Arm {
        Arm::from_indicator(self.score(x) >= 0.0)
    }
}

pub(crate) fn linear_score(eta: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(eta.len(), x.len() + 1);
    eta[0] + eta[1..].iter().zip(x).map(|(e, v)| e * v).sum::<f64>()
}

/// Applies `rule` to a single covariate vector.
pub fn apply_rule(rule: &LinearRule, x: &[f64]) -> Result<Arm, DataError> {
    if x.len() != rule.dim() {
        return Err(DataError::DimensionMismatch {
            expected: rule.dim(),
            found: x.len(),
        });
    }
    Ok(rule.decide(x))
}
