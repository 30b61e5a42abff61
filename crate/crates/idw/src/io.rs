//! Long-format CSV ingestion: one row per unit (cross-section) or per
//! unit-period (panel).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use idw_core::{Design, DesignKind, Population, TreatmentSet};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Names of the structural columns. Every other column is a covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMap {
    pub unit: String,
    pub period: String,
    pub treatment: String,
    pub outcome: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            unit: "unit".into(),
            period: "period".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pop: Population,
    pub ts: TreatmentSet,
    /// π* read from design columns, when given.
    pub design: Option<Design>,
    pub notes: Vec<String>,
}

fn data_err(path: &Path, line: Option<u64>, msg: impl std::fmt::Display) -> CliError {
    match line {
        Some(l) => CliError::Data(format!("{}:{l}: {msg}", path.display())),
        None => CliError::Data(format!("{}: {msg}", path.display())),
    }
}

fn parse_number(path: &Path, line: u64, column: &str, raw: &str) -> CliResult<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| data_err(path, Some(line), format!("column `{column}`: `{raw}` is not a number ('.' decimal)")))?;
    if !v.is_finite() {
        return Err(data_err(path, Some(line), format!("column `{column}`: non-finite value `{raw}`")));
    }
    Ok(v)
}

fn open_csv(path: &Path) -> CliResult<(csv::Reader<std::fs::File>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| data_err(path, None, e))?;
    let headers: Vec<String> =
        rdr.headers().map_err(|e| data_err(path, Some(1), e))?.iter().map(|h| h.trim().to_string()).collect();
    if headers.len() == 1 && (headers[0].contains(';') || headers[0].contains('\t')) {
        return Err(data_err(path, Some(1), "expected comma-separated values"));
    }
    let mut seen = BTreeSet::new();
    for h in &headers {
        if h.is_empty() {
            return Err(data_err(path, Some(1), "empty column name in header"));
        }
        if !seen.insert(h.as_str()) {
            return Err(data_err(path, Some(1), format!("duplicate column `{h}`")));
        }
    }
    Ok((rdr, headers))
}

fn sort_labels(labels: &mut [String]) {
    if labels.iter().all(|l| l.parse::<f64>().is_ok()) {
        labels.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    } else {
        labels.sort();
    }
}

struct Row {
    unit: usize,
    period: String,
    line: u64,
    w: Option<f64>,
    y: Option<f64>,
    x: Vec<f64>,
    p: Vec<f64>,
}

fn path_label(path: &[f64]) -> String {
    if path.iter().all(|&v| v == 0.0) {
        return "never".into();
    }
    let staggered = path.iter().all(|&v| v == 0.0 || v == 1.0) && path.windows(2).all(|p| p[0] <= p[1]);
    match (staggered, path.iter().position(|&v| v != 0.0)) {
        (true, Some(a)) => format!("adopt@{a}"),
        _ => path.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("|"),
    }
}

/// Reads a dataset. `treatments` fixes 𝒲 (needed for arms nobody takes up);
/// otherwise it is the set of observed values or paths.
pub fn read_dataset(
    path: &Path,
    cols: &ColumnMap,
    design_columns: &[String],
    treatments: Option<&TreatmentSet>,
) -> CliResult<Dataset> {
    let (mut rdr, headers) = open_csv(path)?;
    let find = |name: &str| headers.iter().position(|h| h == name);
    let unit_col =
        find(&cols.unit).ok_or_else(|| data_err(path, Some(1), format!("missing unit column `{}`", cols.unit)))?;
    let period_col = find(&cols.period);
    let treat_col = find(&cols.treatment);
    let outcome_col = find(&cols.outcome);
    let design_idx: Vec<usize> = design_columns
        .iter()
        .map(|c| find(c).ok_or_else(|| data_err(path, Some(1), format!("missing design column `{c}`"))))
        .collect::<CliResult<_>>()?;
    let structural: Vec<usize> = [Some(unit_col), period_col, treat_col, outcome_col]
        .into_iter()
        .flatten()
        .chain(design_idx.iter().copied())
        .collect();
    let cov_idx: Vec<usize> = (0..headers.len()).filter(|c| !structural.contains(c)).collect();
    let cov_names: Vec<String> = cov_idx.iter().map(|&c| headers[c].clone()).collect();

    let mut unit_ids: Vec<String> = Vec::new();
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line());
            data_err(path, line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let uid = rec[unit_col].trim().to_string();
        if uid.is_empty() {
            return Err(data_err(path, Some(line), "empty unit id"));
        }
        let unit = *unit_index.entry(uid.clone()).or_insert_with(|| {
            unit_ids.push(uid);
            unit_ids.len() - 1
        });
        let period = period_col.map_or_else(String::new, |c| rec[c].trim().to_string());
        if period_col.is_some() && period.is_empty() {
            return Err(data_err(path, Some(line), "empty period"));
        }
        let w = match treat_col {
            Some(c) if rec[c].trim().is_empty() => return Err(data_err(path, Some(line), "empty treatment")),
            Some(c) => Some(parse_number(path, line, &cols.treatment, &rec[c])?),
            None => None,
        };
        let y = match outcome_col {
            Some(c) if !rec[c].trim().is_empty() => Some(parse_number(path, line, &cols.outcome, &rec[c])?),
            _ => None,
        };
        let x = cov_idx.iter().map(|&c| parse_number(path, line, &headers[c], &rec[c])).collect::<CliResult<_>>()?;
        let p = design_idx.iter().map(|&c| parse_number(path, line, &headers[c], &rec[c])).collect::<CliResult<_>>()?;
        rows.push(Row { unit, period, line, w, y, x, p });
    }
    if rows.is_empty() {
        return Err(data_err(path, None, "no data rows"));
    }

    let mut periods: Vec<String> = rows.iter().map(|r| r.period.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    sort_labels(&mut periods);
    let t_len = periods.len();
    let period_pos: HashMap<&str, usize> = periods.iter().enumerate().map(|(t, p)| (p.as_str(), t)).collect();
    let n = unit_ids.len();
    let d = cov_idx.len();
    let mut cell: Vec<Vec<Option<&Row>>> = vec![vec![None; t_len]; n];
    for r in &rows {
        let t = period_pos[r.period.as_str()];
        if cell[r.unit][t].is_some() {
            return Err(data_err(
                path,
                Some(r.line),
                format!("duplicate row for unit `{}` period `{}`", unit_ids[r.unit], r.period),
            ));
        }
        cell[r.unit][t] = Some(r);
    }
    let mut notes = Vec::new();
    let observed: Vec<Vec<bool>> = cell.iter().map(|u| u.iter().map(Option::is_some).collect()).collect();
    let first = |i: usize| cell[i].iter().flatten().next().copied().expect("unit has a row");

    let covariates: Vec<Vec<f64>> = (0..n).map(|i| first(i).x.clone()).collect();
    let varying = (0..n).any(|i| cell[i].iter().flatten().any(|r| r.x != covariates[i]));
    let mut pop = Population::panel(cov_names, covariates.clone(), t_len).with_observed_periods(observed);
    pop.unit_ids = unit_ids.clone();
    pop.period_ids = if period_col.is_some() { periods.clone() } else { vec!["1".into()] };
    if varying {
        let x = (0..n)
            .map(|i| {
                let mut last = covariates[i].clone();
                (0..t_len)
                    .map(|t| {
                        if let Some(r) = cell[i][t] {
                            last = r.x.clone();
                        }
                        last.clone()
                    })
                    .collect()
            })
            .collect();
        pop = pop.with_varying_covariates(x);
        notes.push(format!("{d} covariates read as time-varying"));
    }

    if outcome_col.is_some() {
        pop = pop.with_outcomes((0..n).map(|i| (0..t_len).map(|t| cell[i][t].and_then(|r| r.y)).collect()).collect());
    }

    let mut ts = treatments.cloned();
    if treat_col.is_some() {
        let mut filled = 0usize;
        let paths: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut last = 0.0;
                (0..t_len)
                    .map(|t| match cell[i][t] {
                        Some(r) => {
                            last = r.w.expect("treatment column present");
                            last
                        }
                        None => {
                            filled += 1;
                            last
                        }
                    })
                    .collect()
            })
            .collect();
        if filled > 0 {
            notes.push(format!("{filled} unobserved unit-periods took the preceding treatment value"));
        }
        let ts = match &ts {
            Some(t) => t.clone(),
            None => {
                let mut distinct: Vec<Vec<f64>> = paths.clone();
                distinct.sort_by(|a, b| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                distinct.dedup();
                if distinct.len() < 2 {
                    return Err(data_err(path, None, "treatment takes a single value"));
                }
                let scalar_levels = t_len == 1 && distinct.iter().enumerate().all(|(j, v)| v[0] == j as f64);
                let built = if scalar_levels {
                    TreatmentSet::multivalued(distinct.len() - 1)
                } else {
                    let labels = distinct.iter().map(|p| path_label(p)).collect();
                    TreatmentSet::new(distinct, labels)
                };
                ts = Some(built.map_err(|e| data_err(path, None, e))?);
                ts.clone().expect("set")
            }
        };
        let w = paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                ts.index_of(p).ok_or_else(|| {
                    data_err(
                        path,
                        Some(first(i).line),
                        format!("unit `{}` has a treatment outside the configured set", unit_ids[i]),
                    )
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        pop = pop.with_treatment(w);
    }
    let ts = ts.ok_or_else(|| CliError::Config("no treatment column and no `treatments` in the config".into()))?;
    if ts.periods() != t_len {
        return Err(CliError::Config(format!("configured treatments have {} periods, data has {t_len}", ts.periods())));
    }

    let design = if design_idx.is_empty() {
        None
    } else {
        let levels = ts.len();
        if design_idx.len() != levels - 1 && design_idx.len() != levels {
            return Err(CliError::Config(format!("{} design columns for {levels} treatment values", design_idx.len())));
        }
        let mut probs = Vec::with_capacity(n);
        for i in 0..n {
            let r = first(i);
            if let Some(other) = cell[i].iter().flatten().find(|o| o.p != r.p) {
                return Err(data_err(path, Some(other.line), "design values must be constant within a unit"));
            }
            let row = if design_idx.len() == levels {
                r.p.clone()
            } else {
                let mut row = vec![1.0 - r.p.iter().sum::<f64>()];
                row.extend_from_slice(&r.p);
                row
            };
            probs.push(row);
        }
        Some(Design::new(probs, DesignKind::True).map_err(|e| data_err(path, None, e))?)
    };

    Ok(Dataset { pop, ts, design, notes })
}

/// Reads user IPW weights: columns `unit`, `level` (treatment index),
/// `weight`, and optionally `period` and `contrast`. Missing cells are zero.
pub fn read_unit_weights(
    path: &Path,
    pop: &Population,
    levels: usize,
    contrasts: usize,
) -> CliResult<Vec<Vec<DMatrix<f64>>>> {
    let (mut rdr, headers) = open_csv(path)?;
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| find(name).ok_or_else(|| data_err(path, Some(1), format!("missing column `{name}`")));
    let (uc, lc, wc) = (need("unit")?, need("level")?, need("weight")?);
    let (pc, cc) = (find("period"), find("contrast"));
    let t_len = pop.periods();
    let mut out = vec![vec![DMatrix::zeros(contrasts, t_len); levels]; pop.n()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data_err(path, e.position().map(|p| p.line()), e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let uid = rec[uc].trim();
        let i = pop
            .unit_ids
            .iter()
            .position(|u| u == uid)
            .ok_or_else(|| data_err(path, Some(line), format!("unknown unit `{uid}`")))?;
        let level: usize =
            rec[lc].trim().parse().map_err(|_| data_err(path, Some(line), "level must be a treatment index"))?;
        if level >= levels {
            return Err(data_err(path, Some(line), format!("level {level} out of range")));
        }
        let t = match pc {
            Some(c) => {
                let p = rec[c].trim();
                pop.period_ids
                    .iter()
                    .position(|q| q == p)
                    .ok_or_else(|| data_err(path, Some(line), format!("unknown period `{p}`")))?
            }
            None => 0,
        };
        let j: usize = match cc {
            Some(c) => rec[c].trim().parse().map_err(|_| data_err(path, Some(line), "contrast must be an index"))?,
            None => 0,
        };
        if j >= contrasts {
            return Err(data_err(path, Some(line), format!("contrast {j} out of range")));
        }
        out[i][level][(j, t)] = parse_number(path, line, "weight", &rec[wc])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn cross_section_with_design_column() {
        let f = write("unit,treatment,outcome,x,p\na,1,2.5,0.1,0.4\nb,0,1.0,0.2,0.5\nc,1,,0.3,0.6\n");
        let ds = read_dataset(f.path(), &ColumnMap::default(), &["p".into()], None).unwrap();
        assert_eq!(ds.pop.n(), 3);
        assert_eq!(ds.pop.covariate_names, vec!["x".to_string()]);
        assert_eq!(ds.pop.treatment, Some(vec![1, 0, 1]));
        assert_eq!(ds.pop.outcome(2, 0), None);
        assert_eq!(ds.design.unwrap().prob(1, 1), 0.5);
        assert_eq!(ds.ts, TreatmentSet::binary());
    }

    #[test]
    fn panel_paths_and_missing_periods() {
        let f = write("unit,period,treatment,outcome\n1,2001,0,1\n1,2002,1,2\n2,2001,0,1\n2,2002,0,1\n3,2002,1,3\n");
        let ds = read_dataset(f.path(), &ColumnMap::default(), &[], None).unwrap();
        assert_eq!(ds.pop.periods(), 2);
        assert!(!ds.pop.is_observed(2, 0));
        assert_eq!(ds.ts.len(), 2);
        assert_eq!(ds.pop.treatment, Some(vec![1, 0, 1]));
        assert_eq!(ds.ts.labels()[1], "adopt@1");
    }

    #[test]
    fn malformed_rows_are_data_errors() {
        for bad in [
            "unit,treatment\na,1\nb\n",
            "unit,treatment,x\na,1,1,5\n",
            "unit;treatment\na;1\n",
            "unit,treatment,x\na,1,abc\n",
            "unit,treatment\na,1\na,0\n",
        ] {
            let f = write(bad);
            let err = read_dataset(f.path(), &ColumnMap::default(), &[], None).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad:?}: {err}");
        }
    }
}
