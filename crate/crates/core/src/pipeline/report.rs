//! Text tables and gnuplot matrices rendered from a run's metrics.

use std::fs;
use std::path::{Path, PathBuf};

use gwsel_autodiff::checkpoint::atomic_write;

use crate::attention::Attention;
use crate::error::{Error, Result};

use super::{Manifest, REFERENCE_ATTENTION_PARAMS};

/// Pads every column to its widest cell. Numeric-looking cells are right-aligned.
pub fn align(header: &[String], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut width = vec![0; ncol];
    for r in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let numeric = |c: &str| c.parse::<f64>().is_ok();
    let line = |r: &[String]| {
        let cells: Vec<String> = r
            .iter()
            .zip(&width)
            .map(|(c, &w)| {
                if numeric(c) {
                    format!("{c:>w$}")
                } else {
                    format!("{c:<w$}")
                }
            })
            .collect();
        cells.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn round_cell(c: &str) -> String {
    match c.parse::<f64>() {
        Ok(v) if c.contains('.') || c.contains('e') => format!("{v:.4}"),
        _ => c.to_string(),
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(String::from).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

/// Whitespace-separated matrix with leading comment lines, loadable by
/// gnuplot's `matrix nonuniform` mode.
pub fn gnuplot_matrix(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::from("# rows: train sigma, columns: test sigma\n");
    out.push_str(&format!("{}\t{}\n", header.len() - 1, header[1..].join("\t")));
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

pub fn param_budget_note(d: usize, h: usize) -> String {
    let ours = Attention::new(d, h).param_count();
    format!(
        "attention parameters: {ours} = 2*(d*h + h) at d={d}, h={h}\n\
         reference count: {REFERENCE_ATTENTION_PARAMS} (difference {})\n\
         The key and query maps are single affine layers d -> h; the difference \
         is reported, not padded out.\n",
        REFERENCE_ATTENTION_PARAMS as i64 - ours as i64
    )
}

/// Renders every metrics CSV under `in_dir` into `in_dir/report`. Returns the
/// paths written.
pub fn render(in_dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics = in_dir.join("metrics");
    if !metrics.is_dir() {
        return Err(Error::Missing(format!("{} has no metrics directory", in_dir.display())));
    }
    let out_dir = in_dir.join("report");
    let mut written = Vec::new();
    let mut csvs: Vec<PathBuf> = fs::read_dir(&metrics)
        .map_err(|e| Error::io(&metrics, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    let mut index = String::new();
    for path in csvs {
        let stem = path.file_stem().expect("csv file").to_string_lossy().to_string();
        // training curves are long; the tables skip them
        if stem.starts_with("train_") || stem.starts_with("attention_scores_") {
            continue;
        }
        let (header, rows) = read_csv(&path)?;
        let pretty: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|c| round_cell(c)).collect()).collect();
        let table = align(&header, &pretty);
        let p = out_dir.join(format!("{stem}.txt"));
        atomic_write(&p, table.as_bytes())?;
        written.push(p);
        index.push_str(&format!("== {stem}\n{table}\n"));
        if stem.starts_with("noise_grid_") {
            let p = out_dir.join(format!("{stem}.dat"));
            atomic_write(&p, gnuplot_matrix(&header, &rows).as_bytes())?;
            written.push(p);
        }
    }
    let mpath = in_dir.join("manifest.json");
    let note = if mpath.exists() {
        let m = Manifest::load(&mpath)?;
        let cfg = super::RunConfig::from_toml(&m.config)?;
        param_budget_note(cfg.gw.d, cfg.attention.h)
    } else {
        let a = Attention::default();
        param_budget_note(a.d, a.h)
    };
    index.push_str(&format!("== parameters\n{note}"));
    let p = out_dir.join("parameters.txt");
    atomic_write(&p, note.as_bytes())?;
    written.push(p);
    let p = out_dir.join("report.txt");
    atomic_write(&p, index.as_bytes())?;
    written.push(p);
    Ok(written)
}
