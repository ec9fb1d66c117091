use std::path::Path;

use super::{flatten_draw, PosteriorChain};
use crate::error::Result;

/// Flattened parameter names, 1-based, in `flatten_draw` order.
pub fn parameter_names(q: usize, p: usize, r: usize, groups: Option<usize>) -> Vec<String> {
    let mut names = Vec::new();
    for k in 1..=q {
        for j in 1..=p {
            names.push(format!("beta[{k},{j}]"));
        }
    }
    names.extend((1..=r).map(|k| format!("beta_phi[{k}]")));
    names.push("xi".into());
    names.push("xi_star".into());
    if let Some(g) = groups {
        for gi in 1..=g {
            for j in 1..=p {
                names.push(format!("u[{gi},{j}]"));
            }
        }
        names.extend((1..=p).map(|j| format!("sigma_u[{j}]")));
    }
    names
}

/// One row per retained draw, one column per flattened parameter.
pub fn write_chain_csv(path: &Path, chain: &PosteriorChain, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for d in &chain.draws {
        w.write_record(flatten_draw(d).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
