//! Offline inspection of pseudo-labels against ground truth. Only experiment
//! commands use this; plain training never sees ground truth.

use crate::config::TrainConfig;
use crate::dataio::{EmbeddingDataset, GroundTruth};
use crate::error::{Error, Result};
use crate::eval::aligned_accuracy;
use crate::trainer::{
    assemble, batch_objective, batch_sizes, epoch_plan, mean_row_norm, split_holdout, EpochReport, TrainObserver,
    TrainState,
};

/// Aligned accuracy of the selected pseudo-labels whose true class is novel.
pub fn selected_novel_accuracy(selected: &[(usize, usize)], truth: &GroundTruth, known_classes: usize) -> Result<Option<f64>> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for &(i, y) in selected {
        let t = *truth
            .0
            .get(i)
            .ok_or_else(|| Error::Shape(format!("row {i} outside ground truth of {}", truth.0.len())))?;
        if t >= known_classes {
            pred.push(y);
            gt.push(t);
        }
    }
    if pred.is_empty() {
        return Ok(None);
    }
    aligned_accuracy(&pred, &gt).map(Some)
}

/// Fills in pseudo-label accuracy from ground truth and forwards epochs to
/// an inner observer.
pub struct PseudoLabelAudit<'a> {
    pub truth: &'a GroundTruth,
    pub known_classes: usize,
    pub inner: Option<&'a mut dyn TrainObserver>,
}

impl TrainObserver for PseudoLabelAudit<'_> {
    fn pseudo_label_accuracy(&mut self, selected: &[(usize, usize)]) -> Option<f64> {
        selected_novel_accuracy(selected, self.truth, self.known_classes).ok().flatten()
    }

    fn on_epoch(&mut self, report: &EpochReport, state: &TrainState) -> Result<()> {
        match self.inner.as_deref_mut() {
            Some(o) => o.on_epoch(report, state),
            None => Ok(()),
        }
    }
}

/// Cross-view pseudo-label of one unlabeled row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
}

/// Pseudo-labels a frozen `state` assigns over one epoch's batches.
pub fn pseudo_label_snapshot(
    state: &TrainState,
    dataset: &EmbeddingDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<PseudoLabel>> {
    let (set, _) = split_holdout(dataset, cfg);
    let sigma = cfg.augment_sigma * mean_row_norm(&dataset.all_embeddings());
    let sizes = batch_sizes(cfg, set.labeled.rows(), set.unlabeled.rows());
    let mut out = Vec::new();
    for (li, ui) in epoch_plan(set.labeled.rows(), set.unlabeled.rows(), sizes, cfg.seed, epoch) {
        let batch = assemble(&set, &li, &ui, sigma, cfg.seed, epoch)?;
        let obj = batch_objective(&state.model.centers, &state.model.params, &batch, cfg)?;
        for ((&index, &label), &confidence) in ui.iter().zip(&obj.pseudo_labels).zip(&obj.pseudo_confidences) {
            out.push(PseudoLabel { index, label, confidence });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPoint {
    pub tau: f64,
    pub selected: usize,
    pub novel_accuracy: Option<f64>,
}

/// Selection count and novel accuracy of `labels` at every threshold.
pub fn threshold_profile(
    labels: &[PseudoLabel],
    taus: &[f64],
    truth: &GroundTruth,
    known_classes: usize,
) -> Result<Vec<ThresholdPoint>> {
    taus.iter()
        .map(|&tau| {
            let selected: Vec<(usize, usize)> =
                labels.iter().filter(|p| p.confidence > tau).map(|p| (p.index, p.label)).collect();
            Ok(ThresholdPoint {
                tau,
                selected: selected.len(),
                novel_accuracy: selected_novel_accuracy(&selected, truth, known_classes)?,
            })
        })
        .collect()
}
