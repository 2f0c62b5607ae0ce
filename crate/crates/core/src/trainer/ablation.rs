use std::fmt::Write;

use super::{evaluate, meta_train, pretrain_backbone, test_seed, Event, EvalReport, ModelScorer, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::helix::HelixConfig;

pub const CSV_HEADER: &str = "variant,heads,embed,rep,stack,mean,ci,episodes,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: HelixConfig,
    pub seed: u64,
    pub report: EvalReport,
}

/// Pretrains one backbone per seed, then meta-trains and evaluates every
/// cell on the novel split. All cells of a seed share the backbone and the
/// test episodes, so differences come from the cross-attention setting only.
pub fn run_ablation(
    base: &TrainConfig,
    cells: &[HelixConfig],
    seeds: &[u64],
    ds: &Dataset,
    progress: &mut dyn FnMut(&HelixConfig, u64, &Event),
) -> Result<Vec<AblationRow>> {
    for cell in cells {
        cell.validate(base.model.channels)?;
    }
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let backbone_cell = cells.first().copied().unwrap_or(cfg.model.helix);
        let pretrained = pretrain_backbone(&cfg, ds, &mut |e| progress(&backbone_cell, seed, e))?;
        for cell in cells {
            let mut run = cfg.clone();
            run.model.helix = *cell;
            let trained = meta_train(&run, ds, &pretrained, &mut |e| progress(cell, seed, e))?;
            let scorer = ModelScorer::new(run.model, trained.eval_params(), trained.norm);
            let report = evaluate(&scorer, &ds.novel, &run.episode, run.eval_episodes, test_seed(seed))?;
            rows.push(AblationRow {
                cell: *cell,
                seed,
                report,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let c = &r.cell;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{},{}",
            if c.stack == 0 { "rn".to_string() } else { c.variant.to_string() },
            c.heads,
            c.embed,
            if c.rep { "on" } else { "off" },
            c.stack,
            r.report.mean,
            r.report.ci95,
            r.report.episodes,
            r.seed
        );
    }
    out
}
