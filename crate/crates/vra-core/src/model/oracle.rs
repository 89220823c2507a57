//! Hard-label target oracle with strict query accounting.
//!
//! Only the argmax label ever crosses this boundary; scores stay inside the
//! wrapped classifier. The query counter is atomic so parallel per-clip
//! attacks never lose increments.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::data::PixelTensor;
use crate::error::{Error, Result};
use crate::model::SourceModel;

/// Anything that can answer a hard-label query.
pub trait HardLabelClassifier: Send + Sync {
    fn predict_label(&self, pixels: &PixelTensor) -> usize;
    fn num_classes(&self) -> usize;
}

impl HardLabelClassifier for SourceModel {
    fn predict_label(&self, pixels: &PixelTensor) -> usize {
        self.predict(pixels)
            .expect("oracle models accept the clip shapes they are queried with")
    }

    fn num_classes(&self) -> usize {
        self.arch().n_classes
    }
}

/// Black-box view of a classifier: one label per query, hard budget.
pub struct TargetOracle {
    classifier: Arc<dyn HardLabelClassifier>,
    count: AtomicU64,
    limit: Option<u64>,
}

impl TargetOracle {
    pub fn new(classifier: Arc<dyn HardLabelClassifier>, limit: Option<u64>) -> Self {
        TargetOracle {
            classifier,
            count: AtomicU64::new(0),
            limit,
        }
    }

    /// Queries the wrapped classifier, consuming one unit of budget. The
    /// counter only moves on completed queries; a budget-exceeded call does
    /// not increment it.
    pub fn hard_label_query(&self, pixels: &PixelTensor) -> Result<usize> {
        let reserve = self.count.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
            match self.limit {
                Some(limit) if c >= limit => None,
                _ => Some(c + 1),
            }
        });
        match reserve {
            Ok(_) => Ok(self.classifier.predict_label(pixels)),
            Err(used) => Err(Error::BudgetExceeded {
                used,
                limit: self.limit.expect("fetch_update only fails with a limit"),
            }),
        }
    }

    /// Number of completed queries.
    pub fn query_count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn query_limit(&self) -> Option<u64> {
        self.limit
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }
}
