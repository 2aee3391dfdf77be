use std::collections::BTreeSet;
use std::path::Path;

use serde_json::{Map, Value};

use super::manifest::RunManifest;
use super::pretrain::run_pretrain;
use crate::error::{Error, Result};
use crate::training::RunConfig;

pub const TABLE_FILE: &str = "ablation.csv";

/// Ablation grid: a base config plus either axes (expanded as a cartesian
/// product) or an explicit list of cells, or both.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub base: Map<String, Value>,
    pub cells: Vec<Map<String, Value>>,
    pub workers: usize,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        let root = root
            .as_object()
            .ok_or_else(|| Error::Config("grid must be a JSON object".into()))?;
        if let Some(key) = root
            .keys()
            .find(|k| !["base", "axes", "cells", "workers"].contains(&k.as_str()))
        {
            return Err(Error::Config(format!("unknown grid key {key:?}")));
        }
        let base = match root.get("base") {
            None => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return Err(Error::Config("grid base must be an object".into())),
        };
        let mut cells = vec![];
        if let Some(axes) = root.get("axes") {
            let axes = axes
                .as_object()
                .ok_or_else(|| Error::Config("grid axes must be an object".into()))?;
            cells.push(Map::new());
            for (key, values) in axes {
                let values = values.as_array().filter(|v| !v.is_empty()).ok_or_else(|| {
                    Error::Config(format!("axis {key:?} must be a non-empty array"))
                })?;
                cells = cells
                    .iter()
                    .flat_map(|cell| {
                        values.iter().map(move |v| {
                            let mut c = cell.clone();
                            c.insert(key.clone(), v.clone());
                            c
                        })
                    })
                    .collect();
            }
        }
        if let Some(list) = root.get("cells") {
            let list = list
                .as_array()
                .ok_or_else(|| Error::Config("grid cells must be an array".into()))?;
            for (i, c) in list.iter().enumerate() {
                let c = c
                    .as_object()
                    .ok_or_else(|| Error::Config(format!("grid cell {i}: must be an object")))?;
                cells.push(c.clone());
            }
        }
        if cells.is_empty() {
            return Err(Error::Config("grid has no cells".into()));
        }
        let workers = match root.get("workers") {
            None => 1,
            Some(v) => v
                .as_u64()
                .filter(|&w| w >= 1)
                .ok_or_else(|| Error::Config("workers must be a positive integer".into()))?
                as usize,
        };
        let grid = Grid {
            base,
            cells,
            workers,
        };
        for i in 0..grid.cells.len() {
            grid.config(i)?;
        }
        Ok(grid)
    }

    /// Resolved config of cell `i`.
    pub fn config(&self, i: usize) -> Result<RunConfig> {
        let mut merged = self.base.clone();
        merged.extend(self.cells[i].clone());
        let cfg = RunConfig::from_json(&Value::Object(merged).to_string())
            .and_then(|c| c.validate().map(|_| c))
            .map_err(|e| Error::Config(format!("grid cell {i}: {e}")))?;
        Ok(cfg)
    }

    /// Keys varied by at least one cell, in sorted order.
    pub fn varied_keys(&self) -> Vec<String> {
        let keys: BTreeSet<&String> = self.cells.iter().flat_map(|c| c.keys()).collect();
        keys.into_iter().cloned().collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs every cell as an independent pre-training run in `out/cell_NNN`,
/// then writes a combined table. Cells are spread over `grid.workers`
/// threads.
pub fn run_ablation(
    grid: &Grid,
    out: &Path,
    on_cell: impl Fn(usize, &RunManifest) + Sync,
) -> Result<Vec<RunManifest>> {
    std::fs::create_dir_all(out)?;
    let n = grid.cells.len();
    let run_cell = |i: usize| -> Result<RunManifest> {
        let cfg = grid.config(i)?;
        let m = run_pretrain(cfg, &out.join(format!("cell_{i:03}")), None, |_| {})
            .map_err(|e| Error::Config(format!("grid cell {i}: {e}")))?;
        on_cell(i, &m);
        Ok(m)
    };
    let workers = grid.workers.min(n);
    let mut results: Vec<Option<Result<RunManifest>>> = (0..n).map(|_| None).collect();
    if workers <= 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_cell(i));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = run_cell(i);
                    done.lock().expect("no worker panicked")[i] = Some(r);
                });
            }
        });
    }
    let manifests = results
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;

    let keys = grid.varied_keys();
    let mut table = String::from("cell");
    for k in &keys {
        table += &format!(",{k}");
    }
    table += ",loss,loss_pc,loss_recon,visible,masked\n";
    for (i, m) in manifests.iter().enumerate() {
        table += &i.to_string();
        for k in &keys {
            let v = grid.cells[i].get(k).map_or(String::new(), |v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            });
            table += &format!(",{}", csv_field(&v));
        }
        let last = m.metrics.last().cloned().unwrap_or_default();
        table += &format!(
            ",{},{},{},{},{}\n",
            last.loss, last.loss_pc, last.loss_recon, last.visible, last.masked
        );
    }
    std::fs::write(out.join(TABLE_FILE), table)?;
    Ok(manifests)
}
