//! Confusion matrices, accuracy and balanced accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self { class_names, counts: vec![vec![0; c]; c] }
    }

    /// Builds a matrix from raw counts, naming classes by index.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::Usage("confusion matrix must be square".into()));
        }
        Ok(Self { class_names: (0..c).map(|i| i.to_string()).collect(), counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// Adds another matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Usage("cannot merge confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Writes the matrix as CSV with class names as header row and column.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["truth\\pred".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Counts `(labels[i], predictions[i])` pairs.
pub fn confusion(labels: &[usize], predictions: &[usize], class_names: Vec<String>) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Data(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let c = class_names.len();
    let mut cm = ConfusionMatrix::zeros(class_names);
    for (i, (&l, &p)) in labels.iter().zip(predictions).enumerate() {
        if l >= c || p >= c {
            return Err(Error::Data(format!("class out of range at index {i}: label {l}, prediction {p}, {c} classes")));
        }
        cm.counts[l][p] += 1;
    }
    Ok(cm)
}

/// Fraction of correctly classified pixels.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Usage("accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.num_classes()).map(|i| cm.counts[i][i]).sum();
    Ok(trace as f64 / total as f64)
}

/// Mean recall over the classes that occur in the ground truth.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = (0..cm.num_classes())
        .filter_map(|c| {
            let n = cm.row_sum(c);
            (n > 0).then(|| cm.counts[c][c] as f64 / n as f64)
        })
        .collect();
    if recalls.is_empty() {
        return Err(Error::Usage("balanced accuracy of an empty confusion matrix".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Row percentages; empty rows stay zero.
pub fn row_normalize(cm: &ConfusionMatrix) -> Vec<Vec<f64>> {
    cm.counts
        .iter()
        .map(|row| {
            let sum: u64 = row.iter().sum();
            row.iter()
                .map(|&v| if sum == 0 { 0.0 } else { v as f64 / sum as f64 * 100.0 })
                .collect()
        })
        .collect()
}

/// Accuracy and balanced accuracy as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub pixels: u64,
}

pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    Ok(Scores { accuracy: accuracy(cm)?, balanced_accuracy: balanced_accuracy(cm)?, pixels: cm.total() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(counts).unwrap()
    }

    #[test]
    fn small_examples() {
        let m = cm(vec![vec![2, 0], vec![1, 1]]);
        assert_eq!(accuracy(&m).unwrap(), 0.75);
        assert_eq!(balanced_accuracy(&m).unwrap(), 0.75);
        assert_eq!(accuracy(&cm(vec![vec![3, 0], vec![0, 9]])).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&cm(vec![vec![1, 0], vec![0, 90]])).unwrap(), 1.0);
        assert_eq!(row_normalize(&cm(vec![vec![2, 2], vec![0, 0]])), vec![vec![50.0, 50.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn empty_inputs() {
        let m = confusion(&[], &[], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(m.counts, vec![vec![0, 0], vec![0, 0]]);
        assert!(matches!(accuracy(&m), Err(Error::Usage(_))));
        assert!(matches!(balanced_accuracy(&m), Err(Error::Usage(_))));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let m = cm(vec![vec![1, 1, 0], vec![0, 0, 0], vec![0, 0, 4]]);
        assert_eq!(balanced_accuracy(&m).unwrap(), 0.75);
    }

    #[test]
    fn out_of_range_names_index() {
        let err = confusion(&[0, 1, 5], &[0, 1, 1], vec!["a".into(), "b".into()]).unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
    }

    #[test]
    fn csv_layout() {
        let mut m = cm(vec![vec![2, 0], vec![1, 1]]);
        m.class_names = vec!["grass".into(), "tree".into()];
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "truth\\pred,grass,tree\ngrass,2,0\ntree,1,1\n");
    }
}
