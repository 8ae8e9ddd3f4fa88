//! Output files: CSV tables, JSON reports, SVG boundary renderings, datasets
//! and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use ctkit_core::curvature::{BBox, CurvatureReport, Polyline};
use ctkit_core::data::{Dataset, Split, TaskKind};
use ctkit_core::Tensor;

use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA: &str = "ctkit-manifest/1";
pub const DATA_SCHEMA: &str = "ctkit-data/1";
pub const SWEEP_SCHEMA: &str = "ctkit-sweep/1";
pub const CURVATURE_SCHEMA: &str = "ctkit-curvature/1";
pub const BOUNDARY_SCHEMA: &str = "ctkit-boundary/1";
pub const CURVE_SCHEMA: &str = "ctkit-loss-curve/1";
pub const FIT_SCHEMA: &str = "ctkit-fit/1";
pub const REPORT_SCHEMA: &str = "ctkit-report/1";
pub const CHECKPOINT_SCHEMA: &str = "ctkit-network/1";
pub const SVG_SCHEMA: &str = "ctkit-boundary-svg/1";

/// Shortest round-trip decimal; CSV cells and SVG coordinates share it.
pub fn num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Serialize)]
struct OutputEntry {
    file: String,
    schema: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema: &'static str,
    command: &'a str,
    config: &'a std::collections::BTreeMap<String, String>,
    warnings: &'a [String],
    seed: Option<u64>,
    input_hash: String,
    inputs: &'a [String],
    outputs: &'a [OutputEntry],
    started_unix_secs: u64,
    wall_clock_secs: f64,
}

/// Collects every file a run writes and finishes with `manifest.json`.
pub struct RunContext {
    out_dir: PathBuf,
    command: String,
    started: Instant,
    started_unix: u64,
    hasher: Sha256,
    inputs: Vec<String>,
    outputs: Vec<OutputEntry>,
}

impl RunContext {
    pub fn new(out_dir: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            command: command.to_string(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            hasher: Sha256::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Reads an input file and folds its bytes into the input hash.
    pub fn read_input(&mut self, path: &Path) -> CliResult<String> {
        let text = fs::read_to_string(path).map_err(|_| CliError::MissingInput(path.display().to_string()))?;
        self.hasher.update(path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        self.hasher.update(text.as_bytes());
        self.inputs.push(path.display().to_string());
        Ok(text)
    }

    fn register(&mut self, name: &str, schema: &str) -> PathBuf {
        self.outputs.push(OutputEntry {
            file: name.to_string(),
            schema: schema.to_string(),
        });
        self.out_dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, schema: &str, body: &str) -> CliResult<()> {
        let path = self.register(name, schema);
        fs::write(path, body)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, schema: &str, value: &T) -> CliResult<()> {
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        self.write_text(name, schema, &body)
    }

    pub fn write_csv(&mut self, name: &str, schema: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let path = self.register(name, schema);
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn finish(mut self, resolved: &std::collections::BTreeMap<String, String>, warnings: &[String]) -> CliResult<PathBuf> {
        for (k, v) in resolved.iter().filter(|(k, _)| !matches!(k.as_str(), "out" | "config")) {
            self.hasher.update(format!("{k}={v}\n").as_bytes());
        }
        let hash = hex::encode(self.hasher.clone().finalize());
        let seed = resolved.get("seed").and_then(|s| s.parse().ok());
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA,
            command: &self.command,
            config: resolved,
            warnings,
            seed,
            input_hash: hash,
            inputs: &self.inputs,
            outputs: &self.outputs,
            started_unix_secs: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join("manifest.json");
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        fs::write(&path, body)?;
        Ok(path)
    }
}

pub fn dataset_header(d: &Dataset) -> Vec<String> {
    let mut h: Vec<String> = (1..=d.dim()).map(|i| format!("x{i}[input]")).collect();
    h.push(match d.task {
        TaskKind::Classification => "y[label]".into(),
        TaskKind::Regression => "y[value]".into(),
    });
    h.push("split[tag]".into());
    h
}

pub fn dataset_rows(d: &Dataset) -> Vec<Vec<String>> {
    (0..d.len())
        .map(|i| {
            let mut row: Vec<String> = d.inputs.row(i).iter().map(|&v| num(v)).collect();
            row.push(num(d.targets[i]));
            row.push(d.splits[i].as_str().to_string());
            row
        })
        .collect()
}

pub fn parse_dataset(path: &str, text: &str) -> CliResult<Dataset> {
    let bad = |reason: String| CliError::BadInput {
        path: path.to_string(),
        reason,
    };
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header.last().map(String::as_str) != Some("split[tag]") {
        return Err(bad("expected columns x1[input],…,y[label|value],split[tag]".into()));
    }
    let task = match header[header.len() - 2].as_str() {
        "y[label]" => TaskKind::Classification,
        "y[value]" => TaskKind::Regression,
        other => return Err(bad(format!("unknown target column {other}"))),
    };
    let dim = header.len() - 2;
    let (mut inputs, mut targets, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: {s:?} is not a number", i + 1)));
        for k in 0..dim {
            inputs.push(parse(&rec[k])?);
        }
        targets.push(parse(&rec[dim])?);
        splits.push(Split::parse(&rec[dim + 1]).map_err(|e| bad(e.to_string()))?);
    }
    let n = targets.len();
    Ok(Dataset::new(task, Tensor::matrix(n, dim, inputs)?, targets, splits)?)
}

pub const CURVATURE_HEADER: [&str; 5] = [
    "x1[input]",
    "x2[input]",
    "grad_norm[logit/input]",
    "hessian_norm[logit/input^2]",
    "excluded[bool]",
];

/// Rows for 2-D points; the hessian cell is empty for excluded points.
pub fn curvature_rows(report: &CurvatureReport) -> Vec<Vec<String>> {
    (0..report.points.len())
        .map(|i| {
            let p = &report.points[i];
            vec![
                num(p[0]),
                num(p.get(1).copied().unwrap_or(0.0)),
                num(report.grad_norms[i]),
                report.hessian_norms[i].map(num).unwrap_or_default(),
                report.excluded[i].to_string(),
            ]
        })
        .collect()
}

pub const BOUNDARY_HEADER: [&str; 3] = ["polyline_id[id]", "x1[input]", "x2[input]"];

/// One row per vertex; a closed polyline repeats its first vertex at the end.
pub fn boundary_rows(lines: &[Polyline]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (id, line) in lines.iter().enumerate() {
        for p in closed_vertices(line) {
            rows.push(vec![id.to_string(), num(p[0]), num(p[1])]);
        }
    }
    rows
}

fn closed_vertices(line: &Polyline) -> Vec<[f64; 2]> {
    let mut v = line.points.clone();
    if line.closed && !v.is_empty() {
        v.push(v[0]);
    }
    v
}

/// Data-coordinate SVG: viewBox is the bbox plus a 5% margin, y flipped so up is +x2.
pub fn boundary_svg(lines: &[Polyline], bbox: &BBox, reference_circle: bool) -> String {
    let mx = 0.05 * (bbox.x_hi - bbox.x_lo);
    let my = 0.05 * (bbox.y_hi - bbox.y_lo);
    let (x0, w) = (bbox.x_lo - mx, bbox.x_hi - bbox.x_lo + 2.0 * mx);
    let (y0, h) = (-(bbox.y_hi + my), bbox.y_hi - bbox.y_lo + 2.0 * my);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"1000\" height=\"1000\" viewBox=\"{} {} {} {}\">\n",
        num(x0),
        num(y0),
        num(w),
        num(h)
    ));
    out.push_str("<g transform=\"scale(1,-1)\" fill=\"none\">\n");
    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" stroke=\"#999\" stroke-width=\"1\" vector-effect=\"non-scaling-stroke\"/>\n",
        num(bbox.x_lo),
        num(bbox.y_lo),
        num(bbox.x_hi - bbox.x_lo),
        num(bbox.y_hi - bbox.y_lo)
    ));
    if reference_circle {
        out.push_str("<circle cx=\"0\" cy=\"0\" r=\"1\" stroke=\"#888\" stroke-dasharray=\"4 4\" stroke-width=\"1\" vector-effect=\"non-scaling-stroke\"/>\n");
    }
    for (id, line) in lines.iter().enumerate() {
        let pts: Vec<String> = closed_vertices(line).iter().map(|p| format!("{},{}", num(p[0]), num(p[1]))).collect();
        out.push_str(&format!(
            "<polyline data-id=\"{id}\" points=\"{}\" stroke=\"#c0392b\" stroke-width=\"2\" vector-effect=\"non-scaling-stroke\"/>\n",
            pts.join(" ")
        ));
    }
    out.push_str("</g>\n</svg>\n");
    out
}
