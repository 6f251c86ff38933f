//! Linear meta-regression of specialization effects on one-hot experiment
//! features, with feature-group ablations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::Dimension;
use crate::error::{Error, Result};
use crate::experiments::{delta_table, Baseline};
use crate::finetune::{BaseModel, ResultRecord, SpecDomain, Subset, Task};
use crate::specialize::Method;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureGroup {
    /// Specialization domain.
    #[serde(rename = "-D")]
    Domain,
    /// Mono- or multilingual base model.
    #[serde(rename = "-M")]
    Model,
    #[serde(rename = "-S")]
    Subset,
    #[serde(rename = "-C")]
    Country,
    /// Specialization approach.
    #[serde(rename = "-A")]
    Approach,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 5] =
        [FeatureGroup::Domain, FeatureGroup::Model, FeatureGroup::Subset, FeatureGroup::Country, FeatureGroup::Approach];

    pub fn code(self) -> &'static str {
        match self {
            FeatureGroup::Domain => "-D",
            FeatureGroup::Model => "-M",
            FeatureGroup::Subset => "-S",
            FeatureGroup::Country => "-C",
            FeatureGroup::Approach => "-A",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            FeatureGroup::Domain => "domain",
            FeatureGroup::Model => "model",
            FeatureGroup::Subset => "subset",
            FeatureGroup::Country => "country",
            FeatureGroup::Approach => "method",
        }
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for FeatureGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.code() == s || g.code()[1..] == *s)
            .ok_or_else(|| Error::UnknownCategory { group: "feature group".into(), value: s.into() })
    }
}

/// Category vocabularies that fix the column layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub countries: Vec<String>,
    pub methods: Vec<Method>,
    pub domains: Vec<SpecDomain>,
    pub base_models: Vec<BaseModel>,
    pub subsets: Vec<Subset>,
}

impl FeatureSpace {
    pub fn new(countries: Vec<String>) -> Self {
        Self {
            countries,
            methods: Method::SPECIALIZED.to_vec(),
            domains: vec![SpecDomain::InDomain, SpecDomain::OutOfDomain],
            base_models: vec![BaseModel::Monolingual, BaseModel::Multilingual],
            subsets: Subset::ALL.to_vec(),
        }
    }

    /// Country vocabulary taken from the records, sorted.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ResultRecord>) -> Self {
        let mut countries: Vec<String> = records.into_iter().map(|r| r.country.clone()).collect();
        countries.sort();
        countries.dedup();
        Self::new(countries)
    }

    fn groups(&self) -> [(FeatureGroup, Vec<String>); 5] {
        [
            (FeatureGroup::Country, self.countries.clone()),
            (FeatureGroup::Approach, self.methods.iter().map(|m| m.to_string()).collect()),
            (FeatureGroup::Domain, self.domains.iter().map(|d| d.as_str().to_string()).collect()),
            (FeatureGroup::Model, self.base_models.iter().map(|b| b.as_str().to_string()).collect()),
            (FeatureGroup::Subset, self.subsets.iter().map(|s| s.as_str().to_string()).collect()),
        ]
    }

    /// Column names; the first column is the intercept.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        for (g, values) in self.groups() {
            names.extend(values.iter().map(|v| format!("{}={v}", g.prefix())));
        }
        names
    }

    pub fn width(&self) -> usize {
        self.names().len()
    }

    /// Column indices owned by `group`.
    pub fn columns(&self, group: FeatureGroup) -> Vec<usize> {
        let mut start = 1;
        for (g, values) in self.groups() {
            if g == group {
                return (start..start + values.len()).collect();
            }
            start += values.len();
        }
        unreachable!("every group is laid out")
    }
}

/// One-hot encoding of a record; exactly one indicator per group is set.
pub fn build_features(space: &FeatureSpace, record: &ResultRecord) -> Result<Vec<f64>> {
    let mut x = vec![0.0; space.width()];
    x[0] = 1.0;
    let active = [
        (FeatureGroup::Country, record.country.clone()),
        (FeatureGroup::Approach, record.method.to_string()),
        (FeatureGroup::Domain, record.spec_domain.as_str().to_string()),
        (FeatureGroup::Model, record.base_model.as_str().to_string()),
        (FeatureGroup::Subset, record.subset.as_str().to_string()),
    ];
    let groups = space.groups();
    for (group, value) in active {
        let (_, values) = groups.iter().find(|(g, _)| *g == group).expect("group present");
        let offset = values
            .iter()
            .position(|v| *v == value)
            .ok_or_else(|| Error::UnknownCategory { group: group.prefix().into(), value: value.clone() })?;
        x[space.columns(group)[offset]] = 1.0;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub rmse: f64,
    pub ablation: BTreeMap<FeatureGroup, f64>,
}

fn to_matrix(x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if n == 0 || p == 0 {
        return Err(Error::InsufficientData("regression needs at least one row and column".into()));
    }
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::InvalidArgument("ragged feature matrix".into()));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| x[i][j]))
}

/// Minimum-norm least squares through an SVD; returns `(weights, rmse)`.
pub fn fit_regression(x: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let xm = to_matrix(x)?;
    if y.len() != xm.nrows() {
        return Err(Error::InvalidArgument(format!("{} targets for {} rows", y.len(), xm.nrows())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression targets"));
    }
    let yv = DVector::from_column_slice(y);
    let svd = xm.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * xm.nrows().max(xm.ncols()) as f64 * f64::EPSILON;
    let w = svd.solve(&yv, tol).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let resid = &xm * &w - &yv;
    let rmse = (resid.norm_squared() / y.len() as f64).sqrt();
    Ok((w.iter().copied().collect(), rmse))
}

/// RMSE of the refit without the columns of `exclude`.
pub fn ablate(space: &FeatureSpace, x: &[Vec<f64>], y: &[f64], exclude: FeatureGroup) -> Result<f64> {
    let drop = space.columns(exclude);
    let reduced: Vec<Vec<f64>> = x
        .iter()
        .map(|row| row.iter().enumerate().filter(|(j, _)| !drop.contains(j)).map(|(_, &v)| v).collect())
        .collect();
    Ok(fit_regression(&reduced, y)?.1)
}

/// Full fit plus one ablation per group.
pub fn analyze(space: &FeatureSpace, x: &[Vec<f64>], y: &[f64]) -> Result<RegressionFit> {
    let (weights, rmse) = fit_regression(x, y)?;
    let mut ablation = BTreeMap::new();
    for g in FeatureGroup::ALL {
        let r = ablate(space, x, y, g)?;
        // nested models: dropping regressors cannot lower in-sample error
        if r < rmse - 1e-9 * rmse.max(1.0) {
            return Err(Error::InvalidArgument(format!("ablation {g} lowered RMSE from {rmse} to {r}")));
        }
        ablation.insert(g, r);
    }
    Ok(RegressionFit { names: space.names(), weights, rmse, ablation })
}

/// Features with weight above `threshold`, by weight descending, then name.
pub fn select_important(fit: &RegressionFit, threshold: f64) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = fit
        .names
        .iter()
        .zip(&fit.weights)
        .filter(|(_, &w)| w > threshold)
        .map(|(n, &w)| (n.clone(), w))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// One row of the ablation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    pub task: Task,
    pub dimension: Dimension,
    pub n: usize,
    pub fit: RegressionFit,
    pub important: Vec<(String, f64)>,
}

/// Regresses the seed-averaged gain over the vanilla baseline (in F1
/// points) per (task, dimension) group of records.
pub fn meta_analysis(records: &[ResultRecord], threshold: f64) -> Result<Vec<MetaRow>> {
    let space = FeatureSpace::from_records(records);
    let table = delta_table(records, Baseline::Vanilla);
    let mut groups: BTreeMap<(Task, Dimension), (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
    for row in &table.rows {
        let rec = row.key.as_record();
        let entry = groups.entry((rec.task, rec.dimension)).or_default();
        entry.0.push(build_features(&space, &rec)?);
        entry.1.push(row.delta);
    }
    let mut out = Vec::new();
    for ((task, dimension), (x, y)) in groups {
        let fit = analyze(&space, &x, &y)?;
        let important = select_important(&fit, threshold);
        out.push(MetaRow { task, dimension, n: y.len(), fit, important });
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("no specialized records pair with a vanilla baseline".into()));
    }
    Ok(out)
}

pub fn write_meta_tsv(path: &Path, rows: &[MetaRow]) -> Result<()> {
    let mut buf = Vec::new();
    let codes: Vec<&str> = FeatureGroup::ALL.iter().map(|g| g.code()).collect();
    writeln!(buf, "task\tdimension\tn\tall\t{}\tselected", codes.join("\t")).expect("vec write");
    for r in rows {
        let abl: Vec<String> = FeatureGroup::ALL.iter().map(|g| format!("{:.4}", r.fit.ablation[g])).collect();
        let sel: Vec<String> = r.important.iter().map(|(n, w)| format!("{n}:{w:.3}")).collect();
        writeln!(buf, "{}\t{}\t{}\t{:.4}\t{}\t{}", r.task, r.dimension, r.n, r.fit.rmse, abl.join("\t"), sel.join(","))
            .expect("vec write");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
