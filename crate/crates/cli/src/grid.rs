//! Expected-utility grid: one row per (panel, row, N).

use std::path::Path;

use anyhow::Context as _;
use iapo::aggregate::{expected_bon_exact, expected_mv_exact};
use iapo::Stream;

pub const BON_SUPPORT: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// MV rows are binary vote distributions with gold mass `p` in 0.1..0.9.
/// BoN rows are random distributions over [`BON_SUPPORT`] drawn from `seed`,
/// listed with their probabilities in the row id.
pub fn grid_rows(n_max: u32, bon_rows: usize, seed: u64) -> anyhow::Result<Vec<(&'static str, String, u32, f64)>> {
    let mut rows = Vec::new();
    for i in 1..=9 {
        let p = i as f64 / 10.0;
        for n in 1..=n_max {
            rows.push(("mv", format!("{p}"), n, expected_mv_exact(&[p, 1.0 - p], Some(0), n)?));
        }
    }
    let mut rng = Stream::new(seed).derive("bon-grid");
    for r in 0..bon_rows {
        let raw: Vec<f64> = BON_SUPPORT.iter().map(|_| 0.05 + rng.unit()).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let id = format!(
            "d{r}:{}",
            probs.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join("/")
        );
        for n in 1..=n_max {
            rows.push(("bon", id.clone(), n, expected_bon_exact(&BON_SUPPORT, &probs, n, 0.0, 0.0)?));
        }
    }
    Ok(rows)
}

pub fn write_grid(out: &Path, n_max: u32, bon_rows: usize, seed: u64) -> anyhow::Result<()> {
    anyhow::ensure!(n_max >= 1, "n_max must be at least 1");
    let rows = grid_rows(n_max, bon_rows, seed)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    w.write_record(["panel", "row", "n", "value"])?;
    for (panel, row, n, value) in rows {
        w.write_record([panel.to_string(), row, n.to_string(), value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
