//! Prediction scoring, the stage × task accuracy matrix and continual-learning metrics.

mod text;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::benchmarks::{EvalType, TaskManifest};
use crate::error::{Error, Result};

pub use text::{bleu4, exact_match, rouge_l, vqa_match, vqa_normalize};

/// One generated answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub prediction: String,
}

/// Scores predictions for one task and returns a percentage.
///
/// `golds` maps sample ids to their reference answers.
pub fn score_task(
    predictions: &[Prediction],
    manifest: &TaskManifest,
    golds: &BTreeMap<String, Vec<String>>,
    containment: bool,
) -> Result<f64> {
    let mut seen = BTreeSet::new();
    let mut total = 0.0;
    for p in predictions {
        if !seen.insert(p.sample_id.as_str()) {
            return Err(Error::DuplicatePrediction(p.sample_id.clone()));
        }
        let refs = golds.get(&p.sample_id).ok_or_else(|| Error::MissingGold(p.sample_id.clone()))?;
        total += match manifest.eval_type {
            EvalType::Vqa => vqa_match(&p.prediction, refs, containment),
            EvalType::Exact => refs.iter().any(|g| exact_match(&p.prediction, g)) as u8 as f64,
            EvalType::Caption => bleu4(&p.prediction, refs),
        };
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    Ok(100.0 * total / predictions.len() as f64)
}

/// Lower-triangular accuracies `A[l][t]`, the score on task `t` after stage `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub num_tasks: usize,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self { num_tasks, rows: vec![None; num_tasks] }
    }

    /// Builds a complete matrix from its triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (l, row) in rows.into_iter().enumerate() {
            m.set_row(l, row)?;
        }
        Ok(m)
    }

    pub fn set_row(&mut self, stage: usize, row: Vec<f64>) -> Result<()> {
        if stage >= self.num_tasks {
            return Err(Error::IncompleteMatrix(format!("stage {stage} is outside 0..{}", self.num_tasks)));
        }
        if row.len() != stage + 1 {
            return Err(Error::IncompleteMatrix(format!("row {stage} has {} entries, expected {}", row.len(), stage + 1)));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::IncompleteMatrix(format!("entry {v} of row {stage} is outside [0, 100]")));
        }
        self.rows[stage] = Some(row);
        Ok(())
    }

    pub fn row(&self, stage: usize) -> Option<&[f64]> {
        self.rows.get(stage)?.as_deref()
    }

    fn require_row(&self, stage: usize) -> Result<&[f64]> {
        self.row(stage).ok_or_else(|| Error::IncompleteMatrix(format!("row {stage} is missing")))
    }

    /// Mean of the final row.
    pub fn last_accuracy(&self) -> Result<f64> {
        if self.num_tasks == 0 {
            return Err(Error::IncompleteMatrix("no tasks".into()));
        }
        Ok(mean(self.require_row(self.num_tasks - 1)?))
    }

    /// Mean over stages of the mean accuracy over the tasks seen so far.
    pub fn avg_accuracy(&self) -> Result<f64> {
        Ok(mean(&self.stage_means()?))
    }

    pub fn stage_means(&self) -> Result<Vec<f64>> {
        if self.num_tasks == 0 {
            return Err(Error::IncompleteMatrix("no tasks".into()));
        }
        (0..self.num_tasks).map(|l| self.require_row(l).map(mean)).collect()
    }

    /// Mean over non-final tasks of the drop from the best earlier-stage
    /// accuracy to the final accuracy.
    pub fn forgetting(&self) -> Result<f64> {
        let big_t = self.num_tasks;
        if big_t < 2 {
            return Err(Error::UndefinedForSingleTask);
        }
        let last = self.require_row(big_t - 1)?;
        let mut total = 0.0;
        for (t, &final_acc) in last.iter().enumerate().take(big_t - 1) {
            let mut best = f64::NEG_INFINITY;
            for l in t..big_t - 1 {
                best = best.max(self.require_row(l)?[t]);
            }
            total += best - final_acc;
        }
        Ok(total / (big_t - 1) as f64)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Run-level summary. Metrics are `None` when the rows they need were not evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub benchmark: String,
    pub method: String,
    pub seed: u64,
    pub task_names: Vec<String>,
    pub last_accuracy: Option<f64>,
    pub average_accuracy: Option<f64>,
    pub forgetting: Option<f64>,
    pub per_task_final: Option<Vec<f64>>,
    pub stage_means: Vec<Option<f64>>,
    pub matrix: Vec<Option<Vec<f64>>>,
}

impl MetricsReport {
    pub fn from_matrix(benchmark: &str, method: &str, seed: u64, task_names: Vec<String>, matrix: &AccuracyMatrix) -> Self {
        Self {
            benchmark: benchmark.to_owned(),
            method: method.to_owned(),
            seed,
            task_names,
            last_accuracy: matrix.last_accuracy().ok(),
            average_accuracy: matrix.avg_accuracy().ok(),
            forgetting: matrix.forgetting().ok(),
            per_task_final: matrix.num_tasks.checked_sub(1).and_then(|l| matrix.row(l)).map(<[f64]>::to_vec),
            stage_means: matrix.rows.iter().map(|r| r.as_deref().map(mean)).collect(),
            matrix: matrix.rows.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::EvalType;

    fn hand() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![90.0], vec![85.0, 80.0], vec![70.0, 75.0, 88.0]]).unwrap()
    }

    #[test]
    fn hand_matrix_metrics() {
        let m = hand();
        assert!((m.forgetting().unwrap() - 12.5).abs() < 1e-9);
        assert!((m.avg_accuracy().unwrap() - 83.388_888_9).abs() < 1e-3);
        assert!((m.last_accuracy().unwrap() - 233.0 / 3.0).abs() < 1e-12);
        let two = AccuracyMatrix::from_rows(vec![vec![80.0], vec![70.0, 90.0]]).unwrap();
        assert!((two.forgetting().unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_task_edge_cases() {
        let one = AccuracyMatrix::from_rows(vec![vec![42.0]]).unwrap();
        assert_eq!(one.last_accuracy().unwrap(), 42.0);
        assert_eq!(one.avg_accuracy().unwrap(), 42.0);
        assert!(matches!(one.forgetting(), Err(Error::UndefinedForSingleTask)));
    }

    #[test]
    fn incomplete_rows_are_reported() {
        let mut m = AccuracyMatrix::new(3);
        m.set_row(0, vec![50.0]).unwrap();
        assert!(matches!(m.last_accuracy(), Err(Error::IncompleteMatrix(_))));
        assert!(m.set_row(1, vec![1.0]).is_err());
        assert!(m.set_row(1, vec![1.0, 101.0]).is_err());
    }

    #[test]
    fn score_task_dispatch_and_errors() {
        let manifest = TaskManifest {
            task_name: "t".into(),
            order_index: 0,
            train_path: "a".into(),
            test_path: "b".into(),
            eval_type: EvalType::Exact,
            prompt_template: "{instruction}".into(),
            num_train: None,
            num_test: None,
        };
        let golds: BTreeMap<String, Vec<String>> =
            [("1".to_string(), vec!["B".to_string()]), ("2".to_string(), vec!["c".to_string()])].into();
        let p = |id: &str, s: &str| Prediction { sample_id: id.into(), prediction: s.into() };
        assert_eq!(score_task(&[p("1", "b "), p("2", "c")], &manifest, &golds, false).unwrap(), 100.0);
        assert_eq!(score_task(&[p("1", "b"), p("2", "x")], &manifest, &golds, false).unwrap(), 50.0);
        assert!(matches!(score_task(&[p("3", "b")], &manifest, &golds, false), Err(Error::MissingGold(_))));
        assert!(matches!(
            score_task(&[p("1", "b"), p("1", "b")], &manifest, &golds, false),
            Err(Error::DuplicatePrediction(_))
        ));
        let caption = TaskManifest { eval_type: EvalType::Caption, ..manifest };
        let golds: BTreeMap<String, Vec<String>> = [("1".to_string(), vec!["a man rides a red bike".to_string()])].into();
        assert!((score_task(&[p("1", "a man rides a red bike")], &caption, &golds, false).unwrap() - 100.0).abs() < 1e-9);
    }
}
