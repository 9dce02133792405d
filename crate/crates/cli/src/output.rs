//! Artifact writing: atomic files, the content-hash manifest and gnuplot scripts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "MANIFEST.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Writes every artifact through a temp file in the target directory
/// followed by a rename, and records its hash.
pub struct ArtifactWriter {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl ArtifactWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, CliError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, entries: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(ArtifactEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn write_str(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.write(name, text.as_bytes())
    }

    pub fn entries(&self) -> &[ArtifactEntry] {
        &self.entries
    }

    /// Writes `MANIFEST.json`; the only artifact carrying a timestamp.
    pub fn finish(mut self, command: &str) -> Result<Vec<ArtifactEntry>, CliError> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = serde_json::json!({
            "command": command,
            "created_unix": created,
            "artifacts": self.entries,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::from)?;
        write_atomic(&self.dir.join(MANIFEST_NAME), text.as_bytes())?;
        Ok(self.entries)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Report CSV: ratio against lambda on a log x axis, one curve per `p`.
    RatioVsLambda,
    /// Error CSV: `e0`, `e1` against `h = L_d / M` on log-log axes.
    ErrorVsH,
}

fn column(header: &[&str], name: &str) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| *h == name)
        .map(|i| i + 1)
        .ok_or_else(|| CliError::Config(format!("CSV lacks column `{name}`")))
}

fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

/// Gnuplot script for `csv_name` (a path relative to the script).
pub fn plot_script(csv_text: &str, csv_name: &str, kind: PlotKind, xd_length: f64) -> Result<String, CliError> {
    let mut lines = csv_text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.trim().is_empty()).map(|l| l.split(',').collect()).collect();
    if rows.is_empty() {
        log::warn!("{csv_name} has no data rows; plot script will draw nothing");
    }
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key top left autotitle columnhead\n");
    s.push_str("set grid\n");
    match kind {
        PlotKind::RatioVsLambda => {
            let lam = column(&header, "lambda")?;
            let p = column(&header, "p")?;
            let ratio = column(&header, "ratio")?;
            let mut ps: Vec<String> = rows.iter().filter_map(|r| r.get(p - 1).map(|v| v.to_string())).collect();
            ps.sort_by(|a, b| a.parse::<f64>().unwrap_or(0.0).total_cmp(&b.parse::<f64>().unwrap_or(0.0)));
            ps.dedup();
            s.push_str("set logscale x\n");
            s.push_str("set xlabel 'lambda'\n");
            s.push_str("set ylabel 'ratio'\n");
            s.push_str("set terminal pngcairo size 800,600\n");
            s.push_str(&format!("set output '{}.png'\n", csv_name.trim_end_matches(".csv")));
            if ps.is_empty() {
                s.push_str(&format!("plot '{csv_name}' using {lam}:{ratio} with linespoints title 'ratio'\n"));
            } else {
                let curves: Vec<String> = ps
                    .iter()
                    .map(|pv| {
                        format!("'{csv_name}' using {lam}:(${p} == {pv} ? ${ratio} : 1/0) with linespoints title 'p = {pv}'")
                    })
                    .collect();
                s.push_str(&format!("plot {}\n", curves.join(", \\\n     ")));
            }
        }
        PlotKind::ErrorVsH => {
            let m = column(&header, "M")?;
            let e0 = column(&header, "e0")?;
            let e1 = column(&header, "e1")?;
            let anchor = |c: usize, pow: i32| -> f64 {
                rows.first()
                    .and_then(|r| {
                        let mv: f64 = r.get(m - 1)?.parse().ok()?;
                        let e: f64 = r.get(c - 1)?.parse().ok()?;
                        Some(e / (xd_length / mv).powi(pow))
                    })
                    .filter(|v| v.is_finite() && *v > 0.0)
                    .unwrap_or(1.0)
            };
            s.push_str("set logscale xy\n");
            s.push_str("set xlabel 'h'\n");
            s.push_str("set ylabel 'error'\n");
            s.push_str("set terminal pngcairo size 800,600\n");
            s.push_str(&format!("set output '{}.png'\n", csv_name.trim_end_matches(".csv")));
            s.push_str(&format!("L = {}\n", fmt_num(xd_length)));
            s.push_str(&format!("c2 = {}\n", fmt_num(anchor(e0, 2))));
            s.push_str(&format!("c1 = {}\n", fmt_num(anchor(e1, 1))));
            s.push_str(&format!(
                "plot '{csv_name}' using (L/${m}):{e0} with linespoints title 'e0', \\\n     \
                 '{csv_name}' using (L/${m}):{e1} with linespoints title 'e1', \\\n     \
                 c2*x**2 with lines dashtype 2 title 'slope 2', \\\n     \
                 c1*x with lines dashtype 3 title 'slope 1'\n"
            ));
        }
    }
    Ok(s)
}
