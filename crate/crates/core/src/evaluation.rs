//! AUC-ROC, per-class and unseen-class evaluation, and report rendering.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetIndex, Label, Split, SplitCounts};
use crate::error::{Error, Result};
use crate::meta::{write_text_with_meta, Meta};
use crate::scoring::{check_binary, estimate_threshold, score_split, AnomalyScore, Confusion, ScoringModel};
use crate::training::Checkpoint;

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
///
/// Computed as a tie-grouped rank sum; every partial count is a multiple of
/// one half, so the result equals the pairwise count divided by `P * N`.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins += (p * neg_below) as f64 + 0.5 * (p * n) as f64;
        neg_below += n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Model trained on the class it is tested on.
    Seen,
    /// Mean over models trained on other classes.
    Unseen,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Seen => "seen",
            EvalMode::Unseen => "unseen",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFragment {
    pub class: String,
    pub mode: EvalMode,
    pub auc: f64,
    /// Youden threshold on normalized scores and confusion there (seen only).
    pub threshold: Option<f64>,
    pub confusion: Option<Confusion>,
    pub counts: SplitCounts,
    pub config_hash: String,
    /// Models averaged over (1 for seen).
    pub models: usize,
}

fn labels_of(scores: &[AnomalyScore]) -> Vec<u8> {
    scores.iter().map(|s| s.label.map_or(0, Label::as_binary)).collect()
}

/// Score a class's test split with one distilled student.
pub fn evaluate_class(
    student: &Checkpoint,
    teacher: &Checkpoint,
    data: &DatasetIndex,
    class: &str,
) -> Result<(EvalFragment, Vec<AnomalyScore>)> {
    let cdata = data.filter_class(class);
    if cdata.is_empty() {
        return Err(Error::Data(format!("class {class} not in dataset")));
    }
    let model = ScoringModel::distilled(student, &teacher.networks)?;
    let scores = score_split(&model, &cdata, Split::Test)?;
    let labels = labels_of(&scores);
    let raw: Vec<f64> = scores.iter().map(|s| s.raw).collect();
    let norm: Vec<f64> = scores.iter().map(|s| s.normalized).collect();
    let auc = auc_roc(&raw, &labels)?;
    let th = estimate_threshold(&norm, &labels)?;
    Ok((
        EvalFragment {
            class: class.to_string(),
            mode: EvalMode::Seen,
            auc,
            threshold: Some(th.value),
            confusion: Some(th.confusion),
            counts: cdata.counts(),
            config_hash: student.config.hash(),
            models: 1,
        },
        scores,
    ))
}

/// Mean AUC on `target`'s test split over the models trained on other
/// classes. `models` maps a training class to its `(student, teacher)`.
pub fn evaluate_unseen(
    models: &BTreeMap<String, (Checkpoint, Checkpoint)>,
    target: &str,
    data: &DatasetIndex,
) -> Result<EvalFragment> {
    let foreign: Vec<_> = models.iter().filter(|(c, _)| c.as_str() != target).collect();
    if foreign.is_empty() {
        return Err(Error::Invalid(format!("no models trained on a class other than {target}")));
    }
    let mut aucs = Vec::new();
    for (class, (s, t)) in &foreign {
        let (frag, _) = evaluate_class(s, t, data, target)?;
        log::info!("unseen {target} with model of {class}: auc {:.4}", frag.auc);
        aucs.push(frag.auc);
    }
    let hash = foreign[0].1 .0.config.hash();
    Ok(EvalFragment {
        class: target.to_string(),
        mode: EvalMode::Unseen,
        auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        threshold: None,
        confusion: None,
        counts: data.filter_class(target).counts(),
        config_hash: hash,
        models: aucs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fragments: Vec<EvalFragment>,
    /// Mean AUC per mode over its classes.
    pub averages: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(fragments: Vec<EvalFragment>) -> Result<Self> {
        if fragments.is_empty() {
            return Err(Error::Invalid("nothing to report".into()));
        }
        let mut averages = BTreeMap::new();
        for mode in [EvalMode::Seen, EvalMode::Unseen] {
            let v: Vec<f64> = fragments.iter().filter(|f| f.mode == mode).map(|f| f.auc).collect();
            if !v.is_empty() {
                averages.insert(mode.to_string(), v.iter().sum::<f64>() / v.len() as f64);
            }
        }
        Ok(Self { fragments, averages })
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from(
            "class,mode,auc,threshold,tp,fp,tn,fn,models,train,test,test_no_damage,test_damage,config_hash\n",
        );
        for f in &self.fragments {
            let th = f.threshold.map_or(String::new(), |t| t.to_string());
            let c = f.confusion.map_or(",,,".to_string(), |c| format!("{},{},{},{}", c.tp, c.fp, c.tn, c.fn_));
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                f.class,
                f.mode,
                f.auc,
                th,
                c,
                f.models,
                f.counts.train,
                f.counts.test,
                f.counts.test_no_damage,
                f.counts.test_damage,
                f.config_hash
            ));
        }
        for (mode, avg) in &self.averages {
            s.push_str(&format!("average,{mode},{avg},,,,,,,,,,,\n"));
        }
        s
    }

    /// Classes as columns plus an average column; one row per mode.
    pub fn table(&self) -> String {
        let mut classes: Vec<&str> = self.fragments.iter().map(|f| f.class.as_str()).collect();
        classes.sort();
        classes.dedup();
        let mut s = format!("{:<10}", "AUC-ROC");
        for c in &classes {
            s.push_str(&format!(" {c:>16}"));
        }
        s.push_str(&format!(" {:>10}\n", "Average"));
        for mode in [EvalMode::Seen, EvalMode::Unseen] {
            let Some(avg) = self.averages.get(&mode.to_string()) else { continue };
            s.push_str(&format!("{:<10}", mode.to_string()));
            for c in &classes {
                match self.fragments.iter().find(|f| f.mode == mode && f.class == *c) {
                    Some(f) => s.push_str(&format!(" {:>16.4}", f.auc)),
                    None => s.push_str(&format!(" {:>16}", "-")),
                }
            }
            s.push_str(&format!(" {avg:>10.4}\n"));
        }
        s
    }
}

pub const RESULTS_FILE: &str = "results.csv";
pub const TABLE_FILE: &str = "table.txt";

/// Write `results.csv` and `table.txt` into `dir`.
pub fn render_report(fragments: &[EvalFragment], dir: &Path, meta: &Meta) -> Result<EvalReport> {
    let report = EvalReport::new(fragments.to_vec())?;
    write_text_with_meta(&dir.join(RESULTS_FILE), meta, &report.results_csv())?;
    write_text_with_meta(&dir.join(TABLE_FILE), meta, &report.table())?;
    Ok(report)
}
