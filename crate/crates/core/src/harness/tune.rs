use crate::error::Result;
use crate::plateau::grid_search_thresholds;
use crate::stream::gen_synthetic;

use super::config::ExperimentConfig;
use super::run::{stream_for_seed, train};

/// Picks detector thresholds from a grid by the A_Final of a validation run
/// on `validation_seed`.
pub fn tune_thresholds(cfg: &ExperimentConfig, means: &[f64], vars: &[f64], validation_seed: u64) -> Result<(f64, f64)> {
    cfg.validate()?;
    let ds = gen_synthetic(&cfg.data)?;
    let stream = stream_for_seed(cfg, &ds, validation_seed)?;
    grid_search_thresholds(means, vars, |m, v| {
        let mut c = cfg.clone();
        c.mean_threshold = m;
        c.var_threshold = v;
        let (record, _) = train(&c, validation_seed, &stream)?;
        Ok(record.metrics.a_final)
    })
}
