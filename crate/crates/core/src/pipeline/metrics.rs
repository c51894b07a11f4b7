//! Classification metrics: confusion matrix, overall accuracy, average
//! accuracy (mean per-class recall) and Cohen's kappa, with mean/std
//! aggregation over repeated runs.

use crate::error::{Error, Result};

/// Confusion counts of one evaluation; `confusion[truth][pred]`, classes
/// 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evaluation {
    pub confusion: Vec<Vec<u64>>,
}

/// Count a confusion matrix from paired label sequences (0-based classes).
pub fn confusion_from_pairs(truth: &[usize], pred: &[usize], classes: usize) -> Result<Evaluation> {
    if truth.len() != pred.len() {
        return Err(Error::shape(
            "confusion_from_pairs",
            format!("{} predictions", truth.len()),
            format!("{}", pred.len()),
        ));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Config(format!(
                "label out of range: truth {t}, pred {p}, classes {classes}"
            )));
        }
        confusion[t][p] += 1;
    }
    Ok(Evaluation { confusion })
}

impl Evaluation {
    pub fn new(confusion: Vec<Vec<u64>>) -> Self {
        Evaluation { confusion }
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.confusion[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.confusion.iter().map(|row| row[c]).sum()
    }

    /// Overall accuracy in percent: diagonal mass over total.
    pub fn oa(&self) -> f64 {
        let diag: u64 = (0..self.classes()).map(|c| self.confusion[c][c]).sum();
        100.0 * diag as f64 / self.total() as f64
    }

    /// Per-class recall in percent; `None` for classes with no test samples.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| 100.0 * self.confusion[c][c] as f64 / n as f64)
            })
            .collect()
    }

    /// Classes absent from the test split.
    pub fn missing_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.row_sum(c) == 0).collect()
    }

    /// Average accuracy in percent: mean recall over classes that appear in
    /// the test split.
    pub fn aa(&self) -> f64 {
        let recalls: Vec<f64> = self.per_class_recall().into_iter().flatten().collect();
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }

    /// Cohen's kappa in [-1, 1]: observed agreement corrected by the chance
    /// agreement implied by the marginals.
    pub fn kappa(&self) -> f64 {
        let total = self.total() as f64;
        let diag: u64 = (0..self.classes()).map(|c| self.confusion[c][c]).sum();
        let p_o = diag as f64 / total;
        let p_e = (0..self.classes())
            .map(|c| self.row_sum(c) as f64 * self.col_sum(c) as f64)
            .sum::<f64>()
            / (total * total);
        if (1.0 - p_e).abs() < 1e-15 {
            // marginals concentrate all mass: agreement is either perfect or
            // indistinguishable from chance
            return if p_o >= p_e { 1.0 } else { 0.0 };
        }
        (p_o - p_e) / (1.0 - p_e)
    }
}

/// Mean and sample standard deviation over repeated runs (std 0 for one run).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} +/- {:.2}", self.mean, self.std)
    }
}

/// Metrics aggregated over one or more seeded runs. The confusion matrix is
/// summed across runs, so each row totals `runs` x that class's test count.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<Stat>,
    pub oa: Stat,
    pub aa: Stat,
    pub kappa: Stat,
    pub confusion: Vec<Vec<u64>>,
    pub runs: usize,
    /// Classes that never appeared in the test split; AA skips them.
    pub missing_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn from_runs(class_names: Vec<String>, runs: &[Evaluation]) -> Result<MetricsReport> {
        if runs.is_empty() {
            return Err(Error::Config("metrics report needs at least one run".into()));
        }
        let classes = runs[0].classes();
        if class_names.len() != classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                classes
            )));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for run in runs {
            for (acc, row) in confusion.iter_mut().zip(&run.confusion) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let per_class = (0..classes)
            .map(|c| {
                let values: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| r.per_class_recall()[c])
                    .collect();
                if values.is_empty() {
                    Stat { mean: f64::NAN, std: 0.0 }
                } else {
                    Stat::from_values(&values)
                }
            })
            .collect();
        Ok(MetricsReport {
            class_names,
            per_class,
            oa: Stat::from_values(&runs.iter().map(|r| r.oa()).collect::<Vec<_>>()),
            aa: Stat::from_values(&runs.iter().map(|r| r.aa()).collect::<Vec<_>>()),
            kappa: Stat::from_values(&runs.iter().map(|r| r.kappa()).collect::<Vec<_>>()),
            confusion,
            runs: runs.len(),
            missing_classes: runs[0].missing_classes(),
        })
    }

    /// Aligned plain-text table: per-class accuracies then OA/AA/Kappa.
    pub fn to_table(&self) -> String {
        let name_width = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<4} {:<width$} {:>16}\n",
            "no.",
            "class",
            "accuracy (%)",
            width = name_width
        ));
        for (i, (name, stat)) in self.class_names.iter().zip(&self.per_class).enumerate() {
            let cell = if stat.mean.is_nan() {
                "absent".to_string()
            } else {
                format!("{:.2} +/- {:.2}", stat.mean, stat.std)
            };
            out.push_str(&format!(
                "{:<4} {:<width$} {:>16}\n",
                i + 1,
                name,
                cell,
                width = name_width
            ));
        }
        out.push_str(&format!(
            "{:<4} {:<width$} {:>16}\n",
            "",
            "OA",
            format!("{:.2} +/- {:.2}", self.oa.mean, self.oa.std),
            width = name_width
        ));
        out.push_str(&format!(
            "{:<4} {:<width$} {:>16}\n",
            "",
            "AA",
            format!("{:.2} +/- {:.2}", self.aa.mean, self.aa.std),
            width = name_width
        ));
        out.push_str(&format!(
            "{:<4} {:<width$} {:>16}\n",
            "",
            "Kappa",
            format!("{:.4} +/- {:.4}", self.kappa.mean, self.kappa.std),
            width = name_width
        ));
        if !self.missing_classes.is_empty() {
            let ids: Vec<String> = self.missing_classes.iter().map(|c| (c + 1).to_string()).collect();
            out.push_str(&format!(
                "note: classes absent from the test split (skipped in AA): {}\n",
                ids.join(", ")
            ));
        }
        out
    }

    /// CSV rows `row_type,name,mean,std`; per-class rows then overall rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row_type,name,mean,std\n");
        for (name, stat) in self.class_names.iter().zip(&self.per_class) {
            if stat.mean.is_nan() {
                out.push_str(&format!("class,{},absent,absent\n", name));
            } else {
                out.push_str(&format!("class,{},{:.6},{:.6}\n", name, stat.mean, stat.std));
            }
        }
        out.push_str(&format!("overall,OA,{:.6},{:.6}\n", self.oa.mean, self.oa.std));
        out.push_str(&format!("overall,AA,{:.6},{:.6}\n", self.aa.mean, self.aa.std));
        out.push_str(&format!(
            "overall,Kappa,{:.6},{:.6}\n",
            self.kappa.mean, self.kappa.std
        ));
        out
    }

    /// CSV of the summed confusion matrix; header names predicted classes.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_diagonal_scores_everything() {
        let e = Evaluation::new(vec![vec![50, 0], vec![0, 50]]);
        assert_eq!(e.oa(), 100.0);
        assert_eq!(e.aa(), 100.0);
        assert_eq!(e.kappa(), 1.0);
    }

    #[test]
    fn uniform_confusion_is_chance() {
        let e = Evaluation::new(vec![vec![25, 25], vec![25, 25]]);
        assert_eq!(e.oa(), 50.0);
        assert_eq!(e.kappa(), 0.0);
    }

    #[test]
    fn missing_class_is_flagged_and_skipped_in_aa() {
        let e = Evaluation::new(vec![vec![10, 0, 0], vec![0, 0, 0], vec![0, 2, 6]]);
        assert_eq!(e.missing_classes(), vec![1]);
        // AA over classes 0 and 2: (100 + 75) / 2
        assert!((e.aa() - 87.5).abs() < 1e-12);
        let report =
            MetricsReport::from_runs(vec!["a".into(), "b".into(), "c".into()], &[e]).unwrap();
        assert_eq!(report.missing_classes, vec![1]);
        assert!(report.to_table().contains("absent"));
    }

    #[test]
    fn confusion_from_pairs_counts_and_transposes() {
        let truth = [0usize, 0, 1, 1, 2];
        let pred = [0usize, 1, 1, 1, 0];
        let a = confusion_from_pairs(&truth, &pred, 3).unwrap();
        assert_eq!(a.confusion[0], vec![1, 1, 0]);
        assert_eq!(a.confusion[1], vec![0, 2, 0]);
        assert_eq!(a.confusion[2], vec![1, 0, 0]);
        // swapping roles transposes the matrix
        let b = confusion_from_pairs(&pred, &truth, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.confusion[i][j], b.confusion[j][i]);
            }
        }
    }

    #[test]
    fn stat_of_single_run_has_zero_std() {
        let s = Stat::from_values(&[93.74]);
        assert_eq!(s.mean, 93.74);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn csv_has_documented_header() {
        let e = Evaluation::new(vec![vec![5, 0], vec![1, 4]]);
        let report = MetricsReport::from_runs(vec!["x".into(), "y".into()], &[e]).unwrap();
        assert!(report.to_csv().starts_with("row_type,name,mean,std\n"));
        assert!(report.confusion_csv().starts_with("truth\\pred,x,y\n"));
    }
}
