//! Observational data and the standardized design.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome, treatment labels and raw covariates for `n` units.
///
/// Labels are dense in `0..=T`, each level occurs at least once, and all
/// values are finite.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    d: Vec<usize>,
    x_raw: Array2<f64>,
    column_names: Vec<String>,
    n_levels: usize,
    label_values: Vec<i64>,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        d: Vec<usize>,
        x_raw: Array2<f64>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n_levels = d.iter().copied().max().map_or(0, |m| m + 1);
        let label_values = (0..n_levels as i64).collect();
        Self::with_labels(y, d, x_raw, column_names, label_values)
    }

    fn with_labels(
        y: Vec<f64>,
        d: Vec<usize>,
        x_raw: Array2<f64>,
        column_names: Vec<String>,
        label_values: Vec<i64>,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 observations, got {n}")));
        }
        if d.len() != n || x_raw.nrows() != n {
            return Err(Error::Dimension(format!(
                "y has {n} rows, d has {}, x has {}",
                d.len(),
                x_raw.nrows()
            )));
        }
        if column_names.len() != x_raw.ncols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} covariates",
                column_names.len(),
                x_raw.ncols()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome at row {i}")));
        }
        if let Some(((i, j), _)) = x_raw.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite covariate `{}` at row {i}",
                column_names[j]
            )));
        }
        let n_levels = d.iter().copied().max().unwrap_or(0) + 1;
        if n_levels < 2 {
            return Err(Error::InvalidData("need at least two treatment levels".into()));
        }
        let mut counts = vec![0usize; n_levels];
        for &t in &d {
            counts[t] += 1;
        }
        if let Some(t) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyGroup(t));
        }
        Ok(Self {
            y,
            d,
            x_raw,
            column_names,
            n_levels,
            label_values,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of non-baseline treatment levels, `T`.
    pub fn n_treatments(&self) -> usize {
        self.n_levels - 1
    }

    /// `T + 1`.
    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[usize] {
        &self.d
    }

    pub fn x_raw(&self) -> ArrayView2<'_, f64> {
        self.x_raw.view()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Original label value for each dense level.
    pub fn label_values(&self) -> &[i64] {
        &self.label_values
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_levels];
        for &t in &self.d {
            counts[t] += 1;
        }
        counts
    }

    pub fn min_group_size(&self) -> usize {
        self.group_sizes().into_iter().min().unwrap_or(0)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.column_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Keep the listed rows. Fails if a treatment level disappears.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let d = rows.iter().map(|&i| self.d[i]).collect::<Vec<_>>();
        let x = self.x_raw.select(Axis(0), rows);
        let ds = Self::with_labels(
            y,
            d,
            x,
            self.column_names.clone(),
            self.label_values.clone(),
        )?;
        if ds.n_levels != self.n_levels {
            return Err(Error::EmptyGroup(ds.n_levels));
        }
        Ok(ds)
    }
}

/// Read a CSV with a header row; every column other than the outcome and the
/// treatment becomes a covariate.
///
/// Treatment values must be nonnegative integers. They are mapped to dense
/// levels `0..=T` in ascending order of the original value, so the smallest
/// label is the baseline.
pub fn load_csv(path: impl AsRef<Path>, outcome_col: &str, treatment_col: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, outcome_col, treatment_col)
}

pub fn read_csv<R: std::io::Read>(reader: R, outcome_col: &str, treatment_col: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_idx = find(outcome_col)?;
    let d_idx = find(treatment_col)?;
    let cov_idx: Vec<usize> = (0..headers.len()).filter(|&j| j != y_idx && j != d_idx).collect();

    let mut y = Vec::new();
    let mut raw_d = Vec::new();
    let mut x = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // 1-based data row, header excluded
        let row = r + 1;
        let cell = |j: usize| -> Result<f64> {
            let v = rec.get(j).unwrap_or("");
            if v.is_empty() || v.eq_ignore_ascii_case("na") {
                return Err(Error::MissingCell {
                    row,
                    column: headers[j].clone(),
                });
            }
            v.parse::<f64>().map_err(|_| Error::ParseCell {
                row,
                column: headers[j].clone(),
                value: v.to_string(),
            })
        };
        y.push(cell(y_idx)?);
        let dv = cell(d_idx)?;
        if dv < 0.0 || dv.fract() != 0.0 {
            return Err(Error::ParseCell {
                row,
                column: headers[d_idx].clone(),
                value: rec.get(d_idx).unwrap_or("").to_string(),
            });
        }
        raw_d.push(dv as i64);
        for &j in &cov_idx {
            x.push(cell(j)?);
        }
    }
    let n = y.len();
    let distinct: BTreeSet<i64> = raw_d.iter().copied().collect();
    let label_values: Vec<i64> = distinct.into_iter().collect();
    let lookup: BTreeMap<i64, usize> = label_values.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let d = raw_d.iter().map(|v| lookup[v]).collect();
    let x_raw = Array2::from_shape_vec((n, cov_idx.len()), x)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let names = cov_idx.iter().map(|&j| headers[j].clone()).collect();
    Dataset::with_labels(y, d, x_raw, names, label_values)
}

/// Where a design column came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnSource {
    Intercept,
    Base { column: String },
    Indicator { column: String },
    Interaction { left: String, right: String },
    Polynomial { column: String, degree: u32 },
}

impl fmt::Display for ColumnSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnSource::Intercept => write!(f, "(intercept)"),
            ColumnSource::Base { column } => write!(f, "{column}"),
            ColumnSource::Indicator { column } => write!(f, "1{{{column}=0}}"),
            ColumnSource::Interaction { left, right } => write!(f, "{left}*{right}"),
            ColumnSource::Polynomial { column, degree } => write!(f, "{column}^{degree}"),
        }
    }
}

/// Unstandardized design columns awaiting [`standardize`].
#[derive(Debug, Clone)]
pub struct RawDesign {
    pub columns: Array2<f64>,
    pub provenance: Vec<ColumnSource>,
    pub intercept_col: Option<usize>,
}

/// The standardized design `X*`.
///
/// Every non-intercept column has `E_n[x²] = 1`; the intercept, when present,
/// is a column of ones and is never penalized.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x_star: Array2<f64>,
    intercept_col: Option<usize>,
    col_means: Vec<f64>,
    col_scales: Vec<f64>,
    provenance: Vec<ColumnSource>,
    names: Vec<String>,
    warnings: Vec<String>,
}

impl DesignMatrix {
    pub fn x_star(&self) -> ArrayView2<'_, f64> {
        self.x_star.view()
    }

    pub fn n(&self) -> usize {
        self.x_star.nrows()
    }

    pub fn p(&self) -> usize {
        self.x_star.ncols()
    }

    pub fn intercept_col(&self) -> Option<usize> {
        self.intercept_col
    }

    pub fn col_means(&self) -> &[f64] {
        &self.col_means
    }

    pub fn col_scales(&self) -> &[f64] {
        &self.col_scales
    }

    pub fn provenance(&self) -> &[ColumnSource] {
        &self.provenance
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Columns dropped during expansion, with the reason.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x_star.row(i)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// `𝒳̂ = max_{i,j} |x*_{ij}|`.
    pub fn x_max(&self) -> f64 {
        self.x_star.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Whether column `j` carries a penalty.
    pub fn is_penalized(&self, j: usize) -> bool {
        Some(j) != self.intercept_col
    }

    /// Map coefficients on `X*` (rows = columns of the design) to the raw
    /// column scale.
    pub fn back_transform(&self, coef: &Array2<f64>) -> Array2<f64> {
        let mut out = coef.clone();
        for (j, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row /= self.col_scales[j];
        }
        out
    }

    /// Restrict to a subset of rows, keeping the column scaling.
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            x_star: self.x_star.select(Axis(0), rows),
            ..self.clone()
        }
    }

    /// Pooled Gram matrix `Q = E_n[x* x*']`.
    pub fn gram(&self) -> Array2<f64> {
        self.x_star.t().dot(&self.x_star) / self.n() as f64
    }

    /// Per-treatment Gram matrix `Q_t = E_{n,t}[x* x*']`.
    pub fn gram_group(&self, d: &[usize], t: usize) -> Array2<f64> {
        let rows: Vec<usize> = (0..d.len()).filter(|&i| d[i] == t).collect();
        let xt = self.x_star.select(Axis(0), &rows);
        xt.t().dot(&xt) / rows.len() as f64
    }
}

/// Rescale non-intercept columns to unit second moment about zero.
///
/// Errors on a constant non-intercept column.
pub fn standardize(raw: RawDesign) -> Result<DesignMatrix> {
    let RawDesign {
        mut columns,
        provenance,
        intercept_col,
    } = raw;
    let n = columns.nrows() as f64;
    if provenance.len() != columns.ncols() {
        return Err(Error::Dimension("provenance length differs from column count".into()));
    }
    let names: Vec<String> = provenance.iter().map(ToString::to_string).collect();
    let mut col_means = Vec::with_capacity(columns.ncols());
    let mut col_scales = Vec::with_capacity(columns.ncols());
    for (j, mut col) in columns.axis_iter_mut(Axis(1)).enumerate() {
        col_means.push(col.sum() / n);
        if Some(j) == intercept_col {
            if col.iter().any(|&v| v != 1.0) {
                return Err(Error::InvalidData("intercept column must be all ones".into()));
            }
            col_scales.push(1.0);
            continue;
        }
        if is_constant(col.view()) {
            return Err(Error::ConstantColumn(names[j].clone()));
        }
        let scale = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        col /= scale;
        col_scales.push(scale);
    }
    Ok(DesignMatrix {
        x_star: columns,
        intercept_col,
        col_means,
        col_scales,
        provenance,
        names,
        warnings: Vec::new(),
    })
}

fn is_constant(col: ArrayView1<'_, f64>) -> bool {
    let first = col[0];
    col.iter().all(|&v| v == first)
}

/// Rules turning raw covariates into design columns.
///
/// Read from a key-value file:
///
/// ```text
/// base = age, educ, re74, re75
/// indicators = re74, re75
/// interactions = true
/// degree.age = 5
/// ```
///
/// An empty or absent `base` uses every covariate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    pub base: Vec<String>,
    pub indicators: Vec<String>,
    pub interactions: bool,
    pub degrees: BTreeMap<String, u32>,
}

impl ExpansionSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = ExpansionSpec::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let list = || -> Vec<String> {
                value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            };
            match key {
                "base" => spec.base = list(),
                "indicators" => spec.indicators = list(),
                "interactions" => {
                    spec.interactions = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: interactions must be true/false", lineno + 1))
                    })?
                }
                k if k.starts_with("degree.") => {
                    let col = k["degree.".len()..].trim().to_string();
                    let deg: i64 = value.parse().map_err(|_| {
                        Error::Config(format!("line {}: degree must be an integer", lineno + 1))
                    })?;
                    if deg < 1 {
                        return Err(Error::Config(format!("degree for `{col}` must be >= 1, got {deg}")));
                    }
                    spec.degrees.insert(col, deg as u32);
                }
                other => {
                    return Err(Error::Config(format!("line {}: unknown key `{other}`", lineno + 1)))
                }
            }
        }
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// Build the intercept plus expanded columns and standardize them.
///
/// Column order: intercept, base, zero indicators, pairwise interactions of
/// base and indicator columns (lexicographic by position), then polynomial
/// terms by column and degree. Constant and duplicate columns are dropped and
/// listed in [`DesignMatrix::warnings`].
pub fn expand_features(ds: &Dataset, spec: &ExpansionSpec) -> Result<DesignMatrix> {
    let x = ds.x_raw();
    let n = ds.n();
    let base: Vec<String> = if spec.base.is_empty() {
        ds.column_names().to_vec()
    } else {
        spec.base.clone()
    };
    let mut cols: Vec<(ColumnSource, Array1<f64>)> = vec![(ColumnSource::Intercept, Array1::ones(n))];
    let mut warnings = Vec::new();

    for name in &base {
        let j = ds.column_index(name)?;
        cols.push((ColumnSource::Base { column: name.clone() }, x.column(j).to_owned()));
    }
    for name in &spec.indicators {
        let j = ds.column_index(name)?;
        let col = x.column(j);
        if !col.iter().any(|&v| v == 0.0) {
            warnings.push(format!("indicator 1{{{name}=0}} dropped: column has no zeros"));
            continue;
        }
        let ind = col.mapv(|v| if v == 0.0 { 1.0 } else { 0.0 });
        cols.push((ColumnSource::Indicator { column: name.clone() }, ind));
    }
    if spec.interactions {
        let first_order: Vec<(ColumnSource, Array1<f64>)> = cols[1..].to_vec();
        for a in 0..first_order.len() {
            for b in a + 1..first_order.len() {
                let prod = &first_order[a].1 * &first_order[b].1;
                cols.push((
                    ColumnSource::Interaction {
                        left: first_order[a].0.to_string(),
                        right: first_order[b].0.to_string(),
                    },
                    prod,
                ));
            }
        }
    }
    for col in spec.degrees.keys() {
        if !base.contains(col) {
            return Err(Error::Config(format!("degree given for `{col}`, which is not a base column")));
        }
    }
    for name in &base {
        let Some(&deg) = spec.degrees.get(name) else { continue };
        let j = ds.column_index(name)?;
        for k in 2..=deg {
            let pw = x.column(j).mapv(|v| v.powi(k as i32));
            cols.push((ColumnSource::Polynomial { column: name.clone(), degree: k }, pw));
        }
    }

    let mut kept: Vec<(ColumnSource, Array1<f64>)> = Vec::with_capacity(cols.len());
    for (src, col) in cols {
        if src != ColumnSource::Intercept && is_constant(col.view()) {
            warnings.push(format!("{src} dropped: constant column"));
            continue;
        }
        if let Some((dup, _)) = kept.iter().find(|(_, c)| c == &col) {
            warnings.push(format!("{src} dropped: duplicate of {dup}"));
            continue;
        }
        kept.push((src, col));
    }
    let p = kept.len();
    let mut columns = Array2::zeros((n, p));
    let mut provenance = Vec::with_capacity(p);
    for (j, (src, col)) in kept.into_iter().enumerate() {
        columns.column_mut(j).assign(&col);
        provenance.push(src);
    }
    let mut dm = standardize(RawDesign {
        columns,
        provenance,
        intercept_col: Some(0),
    })?;
    dm.warnings = warnings;
    Ok(dm)
}

/// Intercept plus every raw covariate, standardized.
pub fn default_design(ds: &Dataset) -> Result<DesignMatrix> {
    expand_features(ds, &ExpansionSpec::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy() -> Dataset {
        Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0, 1, 1, 0],
            array![[1.0, 0.0, 2.0], [2.0, 3.0, 0.0], [0.5, 0.0, 1.0], [4.0, 1.0, 1.0]],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn csv_four_rows_binary() {
        let text = "y,d,x1\n1.0,0,3\n2.0,1,4\n3.5,1,5\n0.5,0,6\n";
        let ds = read_csv(text.as_bytes(), "y", "d").unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.n_treatments(), 1);
        assert_eq!(ds.column_names(), ["x1"]);
    }

    #[test]
    fn csv_missing_outcome_names_row() {
        let text = "y,d,x1\n1.0,0,3\n,1,4\n3.5,1,5\n";
        let err = read_csv(text.as_bytes(), "y", "d").unwrap_err();
        match err {
            Error::MissingCell { row, column } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_errors() {
        let text = "y,d,x1\n1.0,0,abc\n2,1,4\n";
        assert!(matches!(read_csv(text.as_bytes(), "y", "d"), Err(Error::ParseCell { row: 1, .. })));
        assert!(matches!(read_csv(text.as_bytes(), "y", "treat"), Err(Error::MissingColumn(_))));
        let neg = "y,d,x1\n1.0,-1,3\n2,1,4\n";
        assert!(read_csv(neg.as_bytes(), "y", "d").is_err());
    }

    #[test]
    fn csv_relabels_densely_with_mapping() {
        let text = "y,d,x\n1,5,1\n2,2,2\n3,9,3\n4,2,4\n";
        let ds = read_csv(text.as_bytes(), "y", "d").unwrap();
        assert_eq!(ds.d(), [1, 0, 2, 0]);
        assert_eq!(ds.label_values(), [2, 5, 9]);
        assert_eq!(ds.n_treatments(), 2);
    }

    #[test]
    fn dataset_rejects_missing_level() {
        let r = Dataset::new(vec![1.0, 2.0], vec![0, 2], Array2::zeros((2, 1)), vec!["x".into()]);
        assert!(matches!(r, Err(Error::EmptyGroup(1))));
    }

    #[test]
    fn standardize_examples() {
        let cols = array![[1.0, 2.0, 3.0], [1.0, 2.0, 0.0], [1.0, -2.0, 0.0], [1.0, -2.0, 0.0]];
        let dm = standardize(RawDesign {
            columns: cols,
            provenance: vec![
                ColumnSource::Intercept,
                ColumnSource::Base { column: "u".into() },
                ColumnSource::Base { column: "v".into() },
            ],
            intercept_col: Some(0),
        })
        .unwrap();
        let x = dm.x_star();
        assert_eq!(x.column(0).to_vec(), vec![1.0; 4]);
        assert_eq!(x.column(1).to_vec(), vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(dm.col_scales()[1], 2.0);
        assert_abs_diff_eq!(dm.col_scales()[2], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(x[[0, 2]], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn standardize_rejects_constant() {
        let err = standardize(RawDesign {
            columns: array![[1.0, 5.0], [1.0, 5.0]],
            provenance: vec![ColumnSource::Intercept, ColumnSource::Base { column: "k".into() }],
            intercept_col: Some(0),
        })
        .unwrap_err();
        assert!(matches!(err, Error::ConstantColumn(ref c) if c == "k"));
    }

    #[test]
    fn expansion_counts() {
        let ds = toy();
        let two = ExpansionSpec {
            base: vec!["a".into(), "b".into()],
            ..Default::default()
        };
        assert_eq!(expand_features(&ds, &two).unwrap().p(), 3);
        let inter = ExpansionSpec {
            interactions: true,
            ..Default::default()
        };
        assert_eq!(expand_features(&ds, &inter).unwrap().p(), 7);
    }

    #[test]
    fn expansion_order_and_drops() {
        let ds = toy();
        let spec = ExpansionSpec::parse(
            "base = a, b\nindicators = b, a\ninteractions = true\ndegree.a = 3\n",
        )
        .unwrap();
        let dm = expand_features(&ds, &spec).unwrap();
        assert_eq!(
            dm.names(),
            ["(intercept)", "a", "b", "1{b=0}", "a*b", "a*1{b=0}", "a^2", "a^3"]
        );
        let dm2 = expand_features(&ds, &spec).unwrap();
        assert_eq!(dm.names(), dm2.names());
        // `a` has no zeros; `b*1{b=0}` is identically zero
        assert!(dm.warnings().iter().any(|w| w.contains("1{a=0}")));
        assert!(dm.warnings().iter().any(|w| w.starts_with("b*1{b=0}")));
        for j in 1..dm.p() {
            let m2 = dm.x_star().column(j).iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn expansion_spec_errors() {
        assert!(ExpansionSpec::parse("degree.a = 0").is_err());
        assert!(ExpansionSpec::parse("colour = red").is_err());
        let spec = ExpansionSpec::parse("base = a\ndegree.b = 2").unwrap();
        assert!(expand_features(&toy(), &spec).is_err());
    }

    #[test]
    fn back_transform_reproduces_fit() {
        let ds = toy();
        let dm = default_design(&ds).unwrap();
        let coef = Array2::from_shape_vec((dm.p(), 1), vec![0.3, -1.2, 0.7, 2.5]).unwrap();
        let raw = dm.back_transform(&coef);
        for i in 0..ds.n() {
            let fitted_std: f64 = dm.row(i).dot(&coef.column(0));
            let fitted_raw = raw[[0, 0]]
                + (0..3).map(|k| ds.x_raw()[[i, k]] * raw[[k + 1, 0]]).sum::<f64>();
            assert_abs_diff_eq!(fitted_std, fitted_raw, epsilon = 1e-10);
        }
    }
}
