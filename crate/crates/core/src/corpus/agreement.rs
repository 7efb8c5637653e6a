//! Inter-annotator agreement: Krippendorff's alpha for nominal data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Alpha above this is conventionally taken as good reliability.
pub const ALPHA_RELIABILITY_THRESHOLD: f64 = 0.8;

/// Items x annotators matrix of nominal category codes; `None` marks a
/// missing rating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingMatrix {
    rows: Vec<Vec<Option<u32>>>,
    annotators: usize,
}

impl RatingMatrix {
    pub fn new(rows: Vec<Vec<Option<u32>>>) -> Result<Self> {
        let annotators = rows.first().map(Vec::len).unwrap_or(0);
        if annotators < 2 {
            return Err(Error::Data(format!("need at least 2 annotators, got {annotators}")));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != annotators {
                return Err(Error::Data(format!(
                    "ragged rating matrix: item {i} has {} cells, expected {annotators}",
                    row.len()
                )));
            }
        }
        Ok(RatingMatrix { rows, annotators })
    }

    pub fn items(&self) -> usize {
        self.rows.len()
    }

    pub fn annotators(&self) -> usize {
        self.annotators
    }

    pub fn rows(&self) -> &[Vec<Option<u32>>] {
        &self.rows
    }

    /// Concatenate another matrix's items below this one's.
    pub fn stacked(&self, other: &RatingMatrix) -> Result<RatingMatrix> {
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        RatingMatrix::new(rows)
    }
}

/// Nominal Krippendorff's alpha: `1 - D_o / D_e`, observed pairwise
/// disagreement within items over expected disagreement from the pooled
/// category marginals.
pub fn krippendorff_alpha(matrix: &RatingMatrix) -> Result<f64> {
    let mut n_total = 0.0f64;
    let mut by_category: BTreeMap<u32, f64> = BTreeMap::new();
    let mut observed = 0.0f64;
    let mut any_pairable = false;

    for row in matrix.rows() {
        let values: Vec<u32> = row.iter().flatten().copied().collect();
        let n_u = values.len();
        if n_u < 2 {
            continue;
        }
        any_pairable = true;
        n_total += n_u as f64;
        for &v in &values {
            *by_category.entry(v).or_insert(0.0) += 1.0;
        }
        let mut disagreeing = 0usize;
        for (i, a) in values.iter().enumerate() {
            for (j, b) in values.iter().enumerate() {
                if i != j && a != b {
                    disagreeing += 1;
                }
            }
        }
        observed += disagreeing as f64 / (n_u as f64 - 1.0);
    }

    if !any_pairable {
        return Err(Error::InsufficientData(
            "no item carries two or more ratings".to_string(),
        ));
    }
    let d_o = observed / n_total;
    let mut expected_pairs = 0.0f64;
    for (&c, &n_c) in &by_category {
        for (&k, &n_k) in &by_category {
            if c != k {
                expected_pairs += n_c * n_k;
            }
        }
    }
    let d_e = expected_pairs / (n_total * (n_total - 1.0));
    if d_e == 0.0 {
        return Err(Error::InsufficientData(
            "all ratings fall in a single category; expected disagreement is zero".to_string(),
        ));
    }
    Ok(1.0 - d_o / d_e)
}

/// Read a ratings CSV: one row per item, one column per annotator, empty
/// cells for missing ratings, arbitrary strings as category names. No header.
pub fn read_ratings_csv(path: &Path) -> Result<RatingMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut codes: BTreeMap<String, u32> = BTreeMap::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<Option<u32>> = line
            .split(',')
            .map(|cell| {
                let cell = cell.trim();
                if cell.is_empty() {
                    None
                } else {
                    let next = codes.len() as u32;
                    Some(*codes.entry(cell.to_string()).or_insert(next))
                }
            })
            .collect();
        rows.push(row);
    }
    RatingMatrix::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[Option<u32>]]) -> RatingMatrix {
        RatingMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn perfect_agreement_is_exactly_one() {
        let matrix = m(&[
            &[Some(1), Some(1)],
            &[Some(1), Some(1)],
            &[Some(2), Some(2)],
            &[Some(2), Some(2)],
        ]);
        assert_eq!(krippendorff_alpha(&matrix).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_small_case() {
        // Units (1,1), (1,2), (2,2): D_o = (0 + 2 + 0) / 6 = 1/3,
        // marginals 3/3 => D_e = 18/30, alpha = 1 - (1/3)/(3/5) = 4/9.
        let matrix = m(&[
            &[Some(1), Some(1)],
            &[Some(1), Some(2)],
            &[Some(2), Some(2)],
        ]);
        let alpha = krippendorff_alpha(&matrix).unwrap();
        assert!((alpha - 4.0 / 9.0).abs() < 1e-15, "{alpha}");
    }

    #[test]
    fn single_category_is_insufficient_variation() {
        let matrix = m(&[&[Some(3), Some(3)], &[Some(3), Some(3)]]);
        let err = krippendorff_alpha(&matrix).unwrap_err();
        assert!(err.to_string().contains("single category"), "{err}");
    }

    #[test]
    fn no_pairable_items_is_insufficient_data() {
        let matrix = m(&[&[Some(1), None], &[None, Some(2)]]);
        assert!(krippendorff_alpha(&matrix).is_err());
    }

    #[test]
    fn missing_values_are_skipped_not_counted() {
        // The unpaired third annotator cell changes nothing.
        let a = m(&[&[Some(1), Some(1)], &[Some(1), Some(2)], &[Some(2), Some(2)]]);
        let b = m(&[
            &[Some(1), Some(1), None],
            &[Some(1), Some(2), None],
            &[Some(2), Some(2), None],
        ]);
        assert_eq!(krippendorff_alpha(&a).unwrap(), krippendorff_alpha(&b).unwrap());
    }

    #[test]
    fn one_annotator_is_rejected() {
        assert!(RatingMatrix::new(vec![vec![Some(1)]]).is_err());
    }

    #[test]
    fn csv_reader_maps_categories_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(&path, "yes,yes,no\nno,,no\nyes,yes,yes\n").unwrap();
        let matrix = read_ratings_csv(&path).unwrap();
        assert_eq!(matrix.items(), 3);
        assert_eq!(matrix.annotators(), 3);
        assert_eq!(matrix.rows()[1][1], None);
        assert!(krippendorff_alpha(&matrix).is_ok());
    }

    #[test]
    fn duplication_shifts_alpha_only_by_the_small_sample_correction() {
        // Doubling every item leaves D_o unchanged; D_e moves from
        // S/(n(n-1)) to 4S/(2n(2n-1)), so alpha shifts by O(1/n).
        let base = m(&[
            &[Some(1), Some(1)],
            &[Some(1), Some(2)],
            &[Some(2), Some(2)],
            &[Some(2), Some(1)],
        ]);
        let doubled = base.stacked(&base).unwrap();
        let a1 = krippendorff_alpha(&base).unwrap();
        let a2 = krippendorff_alpha(&doubled).unwrap();
        // Closed form: alpha_2 - alpha_1 = -(1 - alpha_1) / (2(n-1)).
        let n = 8.0f64;
        let expected_shift = -(1.0 - a1) / (2.0 * (n - 1.0));
        assert!((a2 - a1 - expected_shift).abs() < 1e-12, "a1={a1} a2={a2}");
    }
}
