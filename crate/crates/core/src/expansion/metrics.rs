//! Multi-label classification metrics: per-label sensitivity, specificity,
//! AUC, F1, average precision, the Sen/Spe harmonic mean, and their macro
//! averages. Labels whose metric is undefined on the given test set (e.g.
//! no positives) are excluded from the macro average with a warning.

#[derive(Debug, Clone, Default)]
pub struct LabelMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub f1_sen_spe: Option<f64>,
    pub average_precision: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub per_label: Vec<LabelMetrics>,
    pub macro_sensitivity: Option<f64>,
    pub macro_specificity: Option<f64>,
    pub macro_auc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub macro_f1_sen_spe: Option<f64>,
    pub macro_map: Option<f64>,
    pub warnings: Vec<String>,
}

fn macro_avg(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Rank-based AUC (equivalent to the trapezoidal ROC area, exact under
/// ties via midranks).
fn auc_from_scores(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Average precision: area under the precision-recall curve with step
/// interpolation, ties grouped by score.
fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

/// Compute the full roster from per-item scores and boolean targets.
/// `scores[i][l]` is the predicted probability of label l on item i.
pub fn compute_metrics(scores: &[Vec<f32>], targets: &[Vec<bool>], threshold: f32) -> EvalReport {
    let n_labels = targets.first().map(|t| t.len()).unwrap_or(0);
    let mut per_label = Vec::with_capacity(n_labels);
    let mut warnings = Vec::new();

    for l in 0..n_labels {
        let label_scores: Vec<f64> = scores.iter().map(|s| s[l] as f64).collect();
        let label_truth: Vec<bool> = targets.iter().map(|t| t[l]).collect();
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (s, &y) in label_scores.iter().zip(&label_truth) {
            let pred = *s >= threshold as f64;
            match (pred, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let positives = tp + fn_;
        let negatives = tn + fp;
        let sensitivity = if positives > 0 {
            Some(tp as f64 / positives as f64)
        } else {
            None
        };
        let specificity = if negatives > 0 {
            Some(tn as f64 / negatives as f64)
        } else {
            None
        };
        let f1 = if 2 * tp + fp + fn_ > 0 && positives > 0 {
            Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        } else {
            None
        };
        let f1_sen_spe = match (sensitivity, specificity) {
            (Some(sen), Some(spe)) if sen + spe > 0.0 => Some(2.0 * sen * spe / (sen + spe)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        let auc = auc_from_scores(&label_scores, &label_truth);
        let ap = average_precision(&label_scores, &label_truth);
        if positives == 0 {
            warnings.push(format!(
                "label {}: no positives in test set; Sen/AUC/F1/AP excluded from macro averages",
                l
            ));
        }
        if negatives == 0 {
            warnings.push(format!(
                "label {}: no negatives in test set; Spe/AUC excluded from macro averages",
                l
            ));
        }
        per_label.push(LabelMetrics {
            sensitivity,
            specificity,
            auc,
            f1,
            f1_sen_spe,
            average_precision: ap,
            positives,
            negatives,
        });
    }

    EvalReport {
        macro_sensitivity: macro_avg(per_label.iter().map(|m| m.sensitivity)),
        macro_specificity: macro_avg(per_label.iter().map(|m| m.specificity)),
        macro_auc: macro_avg(per_label.iter().map(|m| m.auc)),
        macro_f1: macro_avg(per_label.iter().map(|m| m.f1)),
        macro_f1_sen_spe: macro_avg(per_label.iter().map(|m| m.f1_sen_spe)),
        macro_map: macro_avg(per_label.iter().map(|m| m.average_precision)),
        per_label,
        warnings,
    }
}
