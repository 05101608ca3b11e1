//! Feature-matrix preprocessing: simple imputation (mean / mode), one-hot
//! encoding of categoricals, and min-max scaling to [0,1].
//!
//! All statistics are fit from training rows only and frozen, so applying
//! the transform to unseen rows can never look at them (unseen numeric
//! values are clipped into [0,1], unseen categories encode as all zeros).

use serde::{Deserialize, Serialize};

use crate::featurize::{FeatureColumn, FeatureMatrix};

/// Mean of the non-null cells; all-null columns impute 0.
pub fn numeric_impute_value(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Most frequent non-null value, ties toward the lexicographically smallest;
/// all-null columns impute the sentinel `__missing__`.
pub fn categorical_impute_value<'a>(values: impl Iterator<Item = Option<&'a str>>) -> String {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for v in values.flatten() {
        *counts.entry(v).or_insert(0) += 1;
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(v, _)| (*v).to_owned())
        .unwrap_or_else(|| "__missing__".to_owned())
}

/// (min, max) over a training slice; degenerate inputs give a zero range.
pub fn minmax_fit(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if min > max {
        (0.0, 0.0)
    } else {
        (min, max)
    }
}

/// `(x − min) / (max − min)` clipped to [0,1]; constant columns map to 0.
pub fn minmax_apply(x: f64, min: f64, max: f64) -> f64 {
    if max <= min {
        0.0
    } else {
        ((x - min) / (max - min)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnState {
    /// Booleans ride along as 0/1 numerics.
    Numeric {
        name: String,
        impute: f64,
        min: f64,
        max: f64,
    },
    Categorical {
        name: String,
        impute: String,
        /// Sorted; each category becomes one 0/1 output column.
        categories: Vec<String>,
    },
}

/// Frozen impute → one-hot → min-max statistics for one training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    columns: Vec<ColumnState>,
}

fn cell_as_numeric(column: &FeatureColumn, row: usize) -> Option<f64> {
    match column {
        FeatureColumn::Numeric(v) => v[row],
        FeatureColumn::Boolean(v) => v[row].map(|b| if b { 1.0 } else { 0.0 }),
        FeatureColumn::Categorical(_) => None,
    }
}

impl Preprocessor {
    /// Fits every statistic on `rows` of `matrix` only.
    pub fn fit(matrix: &FeatureMatrix, rows: &[usize]) -> Self {
        let columns = matrix
            .features
            .iter()
            .zip(&matrix.columns)
            .map(|(feature, column)| match column {
                FeatureColumn::Categorical(values) => {
                    let impute =
                        categorical_impute_value(rows.iter().map(|&r| values[r].as_deref()));
                    let mut categories: Vec<String> = rows
                        .iter()
                        .filter_map(|&r| values[r].clone())
                        .chain(std::iter::once(impute.clone()))
                        .collect();
                    categories.sort();
                    categories.dedup();
                    ColumnState::Categorical {
                        name: feature.name.clone(),
                        impute,
                        categories,
                    }
                }
                _ => {
                    let impute =
                        numeric_impute_value(rows.iter().map(|&r| cell_as_numeric(column, r)));
                    let (min, max) = minmax_fit(
                        rows.iter()
                            .map(|&r| cell_as_numeric(column, r).unwrap_or(impute)),
                    );
                    ColumnState::Numeric {
                        name: feature.name.clone(),
                        impute,
                        min,
                        max,
                    }
                }
            })
            .collect();
        Preprocessor { columns }
    }

    /// Output column names after one-hot expansion.
    pub fn output_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for state in &self.columns {
            match state {
                ColumnState::Numeric { name, .. } => names.push(name.clone()),
                ColumnState::Categorical { name, categories, .. } => {
                    names.extend(categories.iter().map(|c| format!("{name}={c}")));
                }
            }
        }
        names
    }

    pub fn output_width(&self) -> usize {
        self.columns
            .iter()
            .map(|s| match s {
                ColumnState::Numeric { .. } => 1,
                ColumnState::Categorical { categories, .. } => categories.len(),
            })
            .sum()
    }

    /// Dense design matrix for `rows`, fully numeric in [0,1].
    pub fn transform(&self, matrix: &FeatureMatrix, rows: &[usize]) -> Vec<Vec<f64>> {
        let width = self.output_width();
        rows.iter()
            .map(|&row| {
                let mut out = Vec::with_capacity(width);
                for (state, column) in self.columns.iter().zip(&matrix.columns) {
                    match state {
                        ColumnState::Numeric { impute, min, max, .. } => {
                            let x = cell_as_numeric(column, row).unwrap_or(*impute);
                            out.push(minmax_apply(x, *min, *max));
                        }
                        ColumnState::Categorical { impute, categories, .. } => {
                            let value = match column {
                                FeatureColumn::Categorical(v) => {
                                    v[row].clone().unwrap_or_else(|| impute.clone())
                                }
                                _ => impute.clone(),
                            };
                            for category in categories {
                                out.push(if *category == value { 1.0 } else { 0.0 });
                            }
                        }
                    }
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{FeatureDef, FeatureExpr, FeatureKind, FeatureType};
    use chrono::NaiveDate;

    fn def(name: &str, output_type: FeatureType) -> FeatureDef {
        FeatureDef {
            name: name.into(),
            kind: FeatureKind::Direct,
            primitive: "identity".into(),
            path: vec![],
            depth: 0,
            output_type,
            expr: FeatureExpr::Direct {
                entity: "t".into(),
                column: name.into(),
            },
        }
    }

    fn matrix(columns: Vec<(FeatureDef, FeatureColumn)>) -> FeatureMatrix {
        let rows = columns.first().map(|(_, c)| c.len()).unwrap_or(0);
        let t0 = NaiveDate::from_ymd_opt(2020, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        FeatureMatrix {
            features: columns.iter().map(|(d, _)| d.clone()).collect(),
            entity_ids: (0..rows).map(|i| format!("r{i}")).collect(),
            cutoff_times: vec![t0; rows],
            columns: columns.into_iter().map(|(_, c)| c).collect(),
        }
    }

    #[test]
    fn mean_impute_example() {
        let m = matrix(vec![(
            def("x", FeatureType::Numeric),
            FeatureColumn::Numeric(vec![Some(1.0), None, Some(3.0)]),
        )]);
        let rows: Vec<usize> = vec![0, 1, 2];
        let prep = Preprocessor::fit(&m, &rows);
        let x = prep.transform(&m, &rows);
        // Imputed to the mean 2.0, then min-max over [1,3] → [0, 0.5, 1].
        assert_eq!(x, vec![vec![0.0], vec![0.5], vec![1.0]]);
    }

    #[test]
    fn all_null_numeric_becomes_zero() {
        let m = matrix(vec![(
            def("x", FeatureType::Numeric),
            FeatureColumn::Numeric(vec![None, None]),
        )]);
        let prep = Preprocessor::fit(&m, &[0, 1]);
        assert_eq!(prep.transform(&m, &[0, 1]), vec![vec![0.0], vec![0.0]]);
    }

    #[test]
    fn categorical_mode_impute_and_one_hot() {
        let m = matrix(vec![(
            def("c", FeatureType::Categorical),
            FeatureColumn::Categorical(vec![
                Some("a".into()),
                None,
                Some("a".into()),
                Some("b".into()),
            ]),
        )]);
        let rows: Vec<usize> = vec![0, 1, 2, 3];
        let prep = Preprocessor::fit(&m, &rows);
        assert_eq!(prep.output_names(), vec!["c=a", "c=b"]);
        let x = prep.transform(&m, &rows);
        // Null imputed to the mode "a".
        assert_eq!(x[1], vec![1.0, 0.0]);
        assert_eq!(x[3], vec![0.0, 1.0]);
    }

    #[test]
    fn all_null_categorical_gets_sentinel() {
        let m = matrix(vec![(
            def("c", FeatureType::Categorical),
            FeatureColumn::Categorical(vec![None, None]),
        )]);
        let prep = Preprocessor::fit(&m, &[0, 1]);
        assert_eq!(prep.output_names(), vec!["c=__missing__"]);
        assert_eq!(prep.transform(&m, &[0, 1]), vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_fit([2.0, 4.0, 6.0].into_iter()), (2.0, 6.0));
        assert_eq!(minmax_apply(4.0, 2.0, 6.0), 0.5);
        assert_eq!(minmax_apply(-1.0, -1.0, 1.0), 0.0);
        assert_eq!(minmax_apply(1.0, -1.0, 1.0), 1.0);
        // Constant column → all zeros.
        assert_eq!(minmax_apply(5.0, 5.0, 5.0), 0.0);
        // Unseen data clips into [0,1].
        assert_eq!(minmax_apply(99.0, 2.0, 6.0), 1.0);
        assert_eq!(minmax_apply(-99.0, 2.0, 6.0), 0.0);
    }

    #[test]
    fn boolean_rides_as_numeric() {
        let m = matrix(vec![(
            def("b", FeatureType::Boolean),
            FeatureColumn::Boolean(vec![Some(true), Some(false), None]),
        )]);
        let rows: Vec<usize> = vec![0, 1, 2];
        let prep = Preprocessor::fit(&m, &rows);
        let x = prep.transform(&m, &rows);
        assert_eq!(x[0], vec![1.0]);
        assert_eq!(x[1], vec![0.0]);
        // Null → mean of {1,0} = 0.5.
        assert_eq!(x[2], vec![0.5]);
    }

    #[test]
    fn statistics_come_from_training_rows_only() {
        let m = matrix(vec![(
            def("x", FeatureType::Numeric),
            FeatureColumn::Numeric(vec![Some(0.0), Some(10.0), Some(1000.0)]),
        )]);
        // Fit on rows {0,1}; row 2 is "test" and must not affect the state.
        let prep = Preprocessor::fit(&m, &[0, 1]);
        let x = prep.transform(&m, &[2]);
        assert_eq!(x, vec![vec![1.0]]); // clipped, not rescaled
        let refit = Preprocessor::fit(&m, &[0, 1]);
        assert_eq!(refit, prep);
    }

    #[test]
    fn unseen_category_encodes_as_zeros() {
        let m = matrix(vec![(
            def("c", FeatureType::Categorical),
            FeatureColumn::Categorical(vec![Some("a".into()), Some("b".into()), Some("z".into())]),
        )]);
        let prep = Preprocessor::fit(&m, &[0, 1]);
        let x = prep.transform(&m, &[2]);
        assert_eq!(x, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn state_round_trips_through_serde() {
        let m = matrix(vec![
            (
                def("x", FeatureType::Numeric),
                FeatureColumn::Numeric(vec![Some(1.0), Some(2.0)]),
            ),
            (
                def("c", FeatureType::Categorical),
                FeatureColumn::Categorical(vec![Some("a".into()), None]),
            ),
        ]);
        let prep = Preprocessor::fit(&m, &[0, 1]);
        let json = serde_json::to_string(&prep).unwrap();
        let back: Preprocessor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, prep);
    }
}
