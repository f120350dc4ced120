//! Attribute transition matrix: for each applied attribute, what every other
//! attribute of the transformed face is allowed to do.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AttributeId, AttributeVector};

const N: usize = 17;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MatrixError {
    #[error("malformed matrix: {0}")]
    MalformedMatrix(String),
    #[error("age attribute `{0}` has no matrix row")]
    AgeAttributeNotApplicable(AttributeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpecCode {
    MustBePresent,
    MustBeAbsent,
    PreserveFromSource,
    Ignore,
}

impl SpecCode {
    pub fn code(self) -> i8 {
        match self {
            SpecCode::MustBePresent => 1,
            SpecCode::MustBeAbsent => 0,
            SpecCode::PreserveFromSource => -1,
            SpecCode::Ignore => -2,
        }
    }

    pub fn from_code(code: i8) -> Option<SpecCode> {
        match code {
            1 => Some(SpecCode::MustBePresent),
            0 => Some(SpecCode::MustBeAbsent),
            -1 => Some(SpecCode::PreserveFromSource),
            -2 => Some(SpecCode::Ignore),
            _ => None,
        }
    }

    /// Whether a transformed flag value satisfies this code given the source flag.
    pub fn allows(self, source: bool, transformed: bool) -> bool {
        match self {
            SpecCode::MustBePresent => transformed,
            SpecCode::MustBeAbsent => !transformed,
            SpecCode::PreserveFromSource => transformed == source,
            SpecCode::Ignore => true,
        }
    }
}

/// Square matrix over the 17 non-age attributes, indexed
/// `[applied][target]` in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMatrix {
    cells: [[SpecCode; N]; N],
}

fn idx(a: AttributeId) -> Result<usize, MatrixError> {
    a.non_age_index().ok_or(MatrixError::AgeAttributeNotApplicable(a))
}

impl TransitionMatrix {
    /// Identity-like matrix: diagonal present, everything else preserved.
    pub fn strict() -> Self {
        let mut cells = [[SpecCode::PreserveFromSource; N]; N];
        for (i, row) in cells.iter_mut().enumerate() {
            row[i] = SpecCode::MustBePresent;
        }
        TransitionMatrix { cells }
    }

    pub fn get(&self, applied: AttributeId, target: AttributeId) -> Result<SpecCode, MatrixError> {
        Ok(self.cells[idx(applied)?][idx(target)?])
    }

    /// Set a cell. Diagonal cells must stay `MustBePresent`.
    pub fn set(&mut self, applied: AttributeId, target: AttributeId, code: SpecCode) -> Result<(), MatrixError> {
        let (i, j) = (idx(applied)?, idx(target)?);
        if i == j && code != SpecCode::MustBePresent {
            return Err(MatrixError::MalformedMatrix(format!("diagonal cell ({applied}, {applied}) must be 1")));
        }
        self.cells[i][j] = code;
        Ok(())
    }

    pub fn row(&self, applied: AttributeId) -> Result<BTreeMap<AttributeId, SpecCode>, MatrixError> {
        let i = idx(applied)?;
        Ok(AttributeId::NON_AGE.iter().zip(self.cells[i]).map(|(a, c)| (*a, c)).collect())
    }

    /// Render as the CSV grid accepted by [`load_matrix`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("applied");
        for a in AttributeId::NON_AGE {
            out.push(',');
            out.push_str(a.as_str());
        }
        out.push('\n');
        for (i, a) in AttributeId::NON_AGE.iter().enumerate() {
            out.push_str(a.as_str());
            for c in self.cells[i] {
                out.push(',');
                out.push_str(&c.code().to_string());
            }
            out.push('\n');
        }
        out
    }
}

impl Default for TransitionMatrix {
    fn default() -> Self {
        default_matrix()
    }
}

impl fmt::Display for TransitionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

/// The shipped matrix. Cells not covered by a documented coinciding or
/// contradicting relationship preserve the source value.
pub fn default_matrix() -> TransitionMatrix {
    use AttributeId::*;
    use SpecCode::*;
    let mut m = TransitionMatrix::strict();
    let mut put = |applied, targets: &[AttributeId], code| {
        for t in targets {
            m.set(applied, *t, code).expect("non-age, off-diagonal");
        }
    };
    // A facemask hides the mouth and chin region.
    put(Facemask, &[Smile, Mustache, Goatee, RedLipstick], MustBeAbsent);
    put(Facemask, &[ThickBeard], Ignore);
    // Sunglasses are a kind of glasses.
    put(Sunglasses, &[Glasses], Ignore);
    // Red lipstick counts as heavy makeup and vice versa.
    put(HeavyMakeup, &[RedLipstick], Ignore);
    put(RedLipstick, &[HeavyMakeup], Ignore);
    // Facial hair styles overlap.
    put(ThickBeard, &[Mustache, Goatee], Ignore);
    put(Goatee, &[Mustache, ThickBeard], Ignore);
    put(Mustache, &[Goatee, ThickBeard], Ignore);
    m
}

/// Parse a CSV grid: header row and first column hold attribute names (any
/// order), cells are one of `1, 0, -1, -2`.
pub fn load_matrix(text: &str) -> Result<TransitionMatrix, MatrixError> {
    let bad = |msg: String| MatrixError::MalformedMatrix(msg);
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
    let columns: Vec<AttributeId> =
        header.split(',').skip(1).map(|name| parse_non_age(name.trim())).collect::<Result<_, _>>()?;
    check_permutation(&columns, "column")?;

    let mut cells = [[None::<SpecCode>; N]; N];
    let mut seen_rows = Vec::new();
    for (row_no, line) in lines.enumerate() {
        let mut fields = line.split(',').map(str::trim);
        let applied = parse_non_age(fields.next().unwrap_or_default())?;
        let values: Vec<&str> = fields.collect();
        if values.len() != N {
            return Err(bad(format!("row {} ({applied}) has {} cells, expected {N}", row_no + 2, values.len())));
        }
        let i = idx(applied)?;
        for (col, raw) in columns.iter().zip(values) {
            let code = raw
                .parse::<i8>()
                .ok()
                .and_then(SpecCode::from_code)
                .ok_or_else(|| bad(format!("invalid code `{raw}` at ({applied}, {col})")))?;
            cells[i][idx(*col)?] = Some(code);
        }
        seen_rows.push(applied);
    }
    check_permutation(&seen_rows, "row")?;

    let mut m = TransitionMatrix::strict();
    for (i, applied) in AttributeId::NON_AGE.iter().enumerate() {
        for (j, target) in AttributeId::NON_AGE.iter().enumerate() {
            let code = cells[i][j].ok_or_else(|| bad(format!("missing cell ({applied}, {target})")))?;
            m.set(*applied, *target, code)?;
        }
    }
    Ok(m)
}

fn parse_non_age(name: &str) -> Result<AttributeId, MatrixError> {
    let a: AttributeId =
        name.parse().map_err(|_| MatrixError::MalformedMatrix(format!("unknown attribute `{name}`")))?;
    if a.is_age() {
        return Err(MatrixError::MalformedMatrix(format!("age attribute `{a}` not allowed in matrix")));
    }
    Ok(a)
}

fn check_permutation(items: &[AttributeId], what: &str) -> Result<(), MatrixError> {
    let mut seen = [false; N];
    for a in items {
        let i = idx(*a)?;
        if seen[i] {
            return Err(MatrixError::MalformedMatrix(format!("duplicate {what} `{a}`")));
        }
        seen[i] = true;
    }
    if let Some(missing) = AttributeId::NON_AGE.iter().zip(seen).find(|(_, s)| !s) {
        return Err(MatrixError::MalformedMatrix(format!("missing {what} `{}`", missing.0)));
    }
    Ok(())
}

/// Targets whose matrix constraint is violated by the edit `applied`, in
/// canonical order. Empty means the edit is specific.
pub fn check_specificity(
    applied: AttributeId,
    source: &AttributeVector,
    transformed: &AttributeVector,
    matrix: &TransitionMatrix,
) -> Result<Vec<AttributeId>, MatrixError> {
    let i = idx(applied)?;
    Ok(AttributeId::NON_AGE
        .iter()
        .zip(matrix.cells[i])
        .filter(|(t, code)| !code.allows(source.get(**t), transformed.get(**t)))
        .map(|(t, _)| *t)
        .collect())
}
