use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::localize::LocRow;
use super::metrics::mean_defined;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_label: String,
    pub classes: Vec<String>,
    pub n_images: usize,
    /// Positive images per class in the evaluated set.
    pub positives: Vec<usize>,
    /// `None` where a class has only one label value.
    pub auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    pub localization: Vec<LocRow>,
    pub include_negatives: bool,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Classification table: one row, AUC in percent per class plus the mean.
    pub fn auc_table(&self) -> String {
        let mut header = vec!["Model".to_string()];
        header.extend(self.classes.iter().cloned());
        header.push("Mean".into());
        let mut row = vec![self.model_label.clone()];
        row.extend(self.auc.iter().map(|&a| cell(a)));
        row.push(cell(self.mean_auc));
        render(&[header, row])
    }

    /// Localization table: `T(IoU) | Model | classes... | Mean`, accuracy in
    /// percent, only over classes that have cases.
    pub fn localization_table(&self) -> String {
        let scored: Vec<usize> = (0..self.classes.len())
            .filter(|&c| self.localization.iter().any(|r| r.total[c] > 0))
            .collect();
        let mut header = vec!["T(IoU)".to_string(), "Model".to_string()];
        header.extend(scored.iter().map(|&c| self.classes[c].clone()));
        header.push("Mean".into());
        let mut rows = vec![header];
        for r in &self.localization {
            let accs: Vec<Option<f64>> = scored.iter().map(|&c| r.accuracy[c]).collect();
            let mut row = vec![format!("{}", r.threshold), self.model_label.clone()];
            row.extend(accs.iter().map(|&a| cell(a)));
            row.push(cell(mean_defined(&accs)));
            rows.push(row);
        }
        render(&rows)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("images: {}\n\nROC-AUC (%)\n{}", self.n_images, self.auc_table());
        if !self.localization.is_empty() {
            let _ = write!(s, "\nLocalization accuracy (%)\n{}", self.localization_table());
        }
        s
    }
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let rule: String = widths.iter().map(|w| format!("+{}", "-".repeat(w + 2))).collect::<String>() + "+\n";
    let mut out = rule.clone();
    for (i, r) in rows.iter().enumerate() {
        for (c, v) in r.iter().enumerate() {
            let _ = write!(out, "| {:>w$} ", v, w = widths[c]);
        }
        out.push_str("|\n");
        if i == 0 {
            out.push_str(&rule);
        }
    }
    out + &rule
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_have_class_and_mean_columns() {
        let report = EvalReport {
            model_label: "prior_and_roi".into(),
            classes: vec!["A".into(), "B".into(), "C".into()],
            n_images: 10,
            positives: vec![3, 4, 0],
            auc: vec![Some(0.9), Some(0.7), None],
            mean_auc: Some(0.8),
            localization: vec![LocRow {
                threshold: 0.3,
                correct: vec![1, 2, 0],
                total: vec![2, 4, 0],
                accuracy: vec![Some(0.5), Some(0.5), None],
            }],
            include_negatives: false,
        };
        let auc = report.auc_table();
        assert!(auc.contains("| 90.00 |") && auc.contains("| 80.00 |") && auc.contains("-"));
        let loc = report.localization_table();
        let header = loc.lines().nth(1).unwrap();
        assert!(header.contains("T(IoU)") && header.contains("Mean") && !header.contains(" C "));
        assert!(loc.lines().nth(3).unwrap().starts_with("|    0.3 | prior_and_roi | 50.00 | 50.00 | 50.00 |"));
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
