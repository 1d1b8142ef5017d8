use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::RunLog;

/// Rank matrix (`layers × experts`) at a step; step 0 is the initial state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSnapshot {
    pub step: u64,
    pub ranks: Vec<Vec<usize>>,
}

/// The initial rank matrix followed by the matrix recorded after each growth
/// event.
pub fn export_rank_evolution(log: &RunLog) -> Result<Vec<RankSnapshot>> {
    let header = log
        .header()
        .ok_or_else(|| Error::Input("run log has no header".into()))?;
    let mut out = vec![RankSnapshot {
        step: 0,
        ranks: header.initial_ranks.to_vec(),
    }];
    out.extend(log.events().into_iter().map(|e| RankSnapshot {
        step: e.step,
        ranks: e.ranks.to_vec(),
    }));
    Ok(out)
}

/// Rebuilds the same sequence from the initial ranks and the logged
/// allocation decisions alone.
pub fn replay_rank_evolution(log: &RunLog) -> Result<Vec<RankSnapshot>> {
    let header = log
        .header()
        .ok_or_else(|| Error::Input("run log has no header".into()))?;
    let mut ranks = header.initial_ranks.to_vec();
    let mut out = vec![RankSnapshot {
        step: 0,
        ranks: ranks.clone(),
    }];
    for event in log.events() {
        for d in event.decisions {
            for &(i, n) in &d.grants {
                let r = ranks
                    .get_mut(d.layer)
                    .and_then(|l| l.get_mut(i))
                    .ok_or_else(|| Error::Input(format!("decision for unknown expert ({}, {i})", d.layer)))?;
                *r += n;
            }
        }
        out.push(RankSnapshot {
            step: event.step,
            ranks: ranks.clone(),
        });
    }
    Ok(out)
}

/// One row per layer, comma-separated.
pub fn rank_matrix_csv(ranks: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for row in ranks {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
