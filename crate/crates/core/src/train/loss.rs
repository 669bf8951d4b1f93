//! Dual-pathway objective: summed label log-likelihood plus length-normalized
//! chain log-likelihood, averaged over the batch.

use crate::backend::ScoredSequence;

use super::TrainError;

/// Scores for one record. A classification-only record has no `reason`; a
/// reasoning-only record has no `cls`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualScores {
    pub cls: Option<ScoredSequence>,
    pub reason: Option<ScoredSequence>,
}

impl DualScores {
    pub fn both(cls: ScoredSequence, reason: ScoredSequence) -> Self {
        Self {
            cls: Some(cls),
            reason: Some(reason),
        }
    }

    /// `-sum(cls) - mean(reason)` for this record.
    pub fn record_loss(&self) -> Result<f64, TrainError> {
        if self.cls.is_none() && self.reason.is_none() {
            return Err(TrainError::LengthMismatch(
                "record has neither pathway".into(),
            ));
        }
        let mut loss = 0.0;
        if let Some(cls) = &self.cls {
            if cls.is_empty() {
                return Err(TrainError::LengthMismatch("empty label sequence".into()));
            }
            loss -= cls.total_logprob();
        }
        if let Some(reason) = &self.reason {
            if reason.is_empty() {
                return Err(TrainError::LengthMismatch(
                    "empty reasoning sequence".into(),
                ));
            }
            loss -= reason.total_logprob() / reason.len() as f64;
        }
        Ok(loss)
    }
}

/// Mean of per-record losses over the batch.
pub fn dual_loss(batch: &[DualScores]) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for record in batch {
        total += record.record_loss()?;
    }
    Ok(total / batch.len() as f64)
}

/// Cross-training loss over `(label, chain)` score pairs.
pub fn mtct_loss(batch: &[(ScoredSequence, ScoredSequence)]) -> Result<f64, TrainError> {
    let dual: Vec<DualScores> = batch
        .iter()
        .map(|(c, r)| DualScores::both(c.clone(), r.clone()))
        .collect();
    dual_loss(&dual)
}

/// Self-alignment round loss over retained self-generated chains. Same form
/// as [`mtct_loss`], with the batch drawn from the round's retained set.
pub fn sarr_loss(batch: &[(ScoredSequence, ScoredSequence)]) -> Result<f64, TrainError> {
    mtct_loss(batch)
}
