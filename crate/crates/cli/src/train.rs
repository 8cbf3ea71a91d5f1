//! Offline projection-head training on tabular items.

use std::path::Path;

use cqb_core::contrastive::{balanced_sample, train_head, ProjectionHead, TrainReport};
use cqb_core::env::offline_tabular_items;

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTraining {
    pub head: ProjectionHead,
    pub report: TrainReport,
    /// Items kept after balancing.
    pub items: usize,
    /// Servers that were best for fewer than `per_model` items.
    pub short_groups: Vec<usize>,
}

/// Draws offline items from the master seed's tabular prototypes, balances
/// them by best server and trains a fresh head on the result.
pub fn train_head_from_config(config: &ExperimentConfig) -> Result<HeadTraining, CliError> {
    config.validate()?;
    let t = &config.train;
    let items = offline_tabular_items(&config.tabular_params(), config.seed, t.items)?;
    let pool: Vec<(Vec<f64>, Vec<f64>)> =
        items.into_iter().map(|i| (i.embedding, i.departure)).collect();
    let balanced = balanced_sample(&pool, t.per_model, config.seed)?;
    let mut head = ProjectionHead::init(config.instance.d, t.hidden, t.d_out, config.seed)?;
    let report = train_head(&balanced.dataset, &mut head, &t.optimizer)?;
    Ok(HeadTraining {
        head,
        report,
        items: balanced.dataset.len(),
        short_groups: balanced.short_groups,
    })
}

/// Trains and writes the head as JSON.
pub fn train_head_to(config: &ExperimentConfig, out: &Path) -> Result<HeadTraining, CliError> {
    let trained = train_head_from_config(config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    trained.head.write_json(out)?;
    Ok(trained)
}
