//! One function per subcommand: resolve settings, run, write artifacts and
//! the manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;

use ctkit_core::activation::{DEFAULT_RAW_BETA, DEFAULT_RAW_COEFF};
use ctkit_core::circle::{pullback_breakpoints, segment_errors, total_error_quadrature, DEFAULT_REFINE_TOL};
use ctkit_core::curvature::{
    contour_turning, curvature_report, decision_boundary_2d, network_jacobian_bound, BBox, CurvatureOptions,
    CurvatureSummary,
};
use ctkit_core::data::{gen_annulus, gen_regression_1d, Dataset, Split};
use ctkit_core::network::{build_mlp, MlpSpec, Network};
use ctkit_core::trainers::{
    sct_grid_search, train_base, train_linear_probe, train_lora, train_tct, validation_metric, CtSummary,
    GridSearchOptions, LossKind, LossPoint, SweepMode, TrainConfig,
};

use crate::artifacts::*;
use crate::cli::*;
use crate::config::{ConfigFile, Resolver, Widths};
use crate::error::{CliError, CliResult};
use crate::pipelines::{run_fig1, run_fig2, uniform_points, Fig1Config, Fig2Config, ParamCounts};

struct Session {
    ctx: RunContext,
    r: Resolver,
}

impl Session {
    fn open(command: &str, common: &Common) -> CliResult<Self> {
        let file = ConfigFile::load(common.config.as_deref().map(Path::new))?;
        let mut r = Resolver::new(file);
        let out: String = r.get("out", common.out.clone(), format!("out/{command}"))?;
        let ctx = RunContext::new(Path::new(&out), command)?;
        Ok(Self { ctx, r })
    }

    /// Call once every setting has been resolved: unknown config keys fail here.
    fn settled(&self) -> CliResult<()> {
        self.r.file.finish()
    }

    fn load_net(&mut self, flag: Option<String>) -> CliResult<Network> {
        let path: String = self.r.require("net", flag)?;
        let text = self.ctx.read_input(Path::new(&path))?;
        Network::from_checkpoint_json(&text).map_err(|e| CliError::BadInput {
            path,
            reason: e.to_string(),
        })
    }

    fn load_data(&mut self, flag: Option<String>) -> CliResult<Dataset> {
        let path: String = self.r.require("data", flag)?;
        let text = self.ctx.read_input(Path::new(&path))?;
        parse_dataset(&path, &text)
    }

    fn finish(self) -> CliResult<PathBuf> {
        self.ctx.finish(&self.r.resolved, &self.r.warnings)
    }
}

fn split_or_all(data: &Dataset, split: Split) -> Dataset {
    let sub = data.subset(split);
    if sub.is_empty() {
        data.clone()
    } else {
        sub
    }
}

fn curve_rows(curve: &[LossPoint]) -> Vec<Vec<String>> {
    curve.iter().map(|p| vec![p.step.to_string(), num(p.loss)]).collect()
}

fn loss_header(loss: LossKind) -> [&'static str; 2] {
    match loss {
        LossKind::BceLogits => ["step[1]", "loss[nats]"],
        LossKind::Mse => ["step[1]", "loss[squared_error]"],
    }
}

fn write_net(ctx: &mut RunContext, net: &Network) -> CliResult<()> {
    ctx.write_text("net.json", CHECKPOINT_SCHEMA, &(net.to_checkpoint_json()? + "\n"))
}

#[derive(Serialize)]
struct TrainReport {
    final_loss: f64,
    train_metric: f64,
    params: ParamCounts,
    ct_summary: Option<CtSummary>,
}

fn finish_training(
    mut s: Session,
    net: &Network,
    curve: &[LossPoint],
    loss: LossKind,
    data: &Dataset,
    ct_summary: Option<CtSummary>,
) -> CliResult<PathBuf> {
    write_net(&mut s.ctx, net)?;
    s.ctx.write_csv("loss_curve.csv", CURVE_SCHEMA, &loss_header(loss), &curve_rows(curve))?;
    let report = TrainReport {
        final_loss: curve.last().map(|p| p.loss).unwrap_or(f64::NAN),
        train_metric: validation_metric(net, data)?,
        params: ParamCounts::of(net),
        ct_summary,
    };
    s.ctx.write_json("train_report.json", REPORT_SCHEMA, &report)?;
    s.finish()
}

pub fn run(command: Command) -> CliResult<PathBuf> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Steer(a) => steer(a),
        Command::FinetuneTct(a) => finetune_tct(a),
        Command::FinetuneLora(a) => finetune_lora(a),
        Command::Probe(a) => probe(a),
        Command::CircleError(a) => circle_error(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Fig1(a) => fig1(a),
        Command::Fig2(a) => fig2(a),
    }
}

fn gen_data(a: GenDataArgs) -> CliResult<PathBuf> {
    let mut s = Session::open("gen-data", &a.common)?;
    let kind: String = s.r.get("kind", a.kind, "annulus".into())?;
    let n = s.r.get("n", a.n, 512)?;
    let seed = s.r.seed(a.seed, 0)?;
    let train = s.r.get("train-frac", a.train_frac, 0.8)?;
    let val = s.r.get("val-frac", a.val_frac, 0.2)?;
    let test = s.r.get("test-frac", a.test_frac, 0.0)?;
    s.settled()?;
    let mut data = match kind.as_str() {
        "annulus" => gen_annulus(n, seed)?,
        "sine" => gen_regression_1d(n, seed)?,
        other => return Err(CliError::Config(format!("unknown data kind {other:?} (annulus|sine)"))),
    };
    data.assign_splits(train, val, test, seed)?;
    let header = dataset_header(&data);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    s.ctx.write_csv("data.csv", DATA_SCHEMA, &header, &dataset_rows(&data))?;
    s.finish()
}

fn train(a: TrainArgs) -> CliResult<PathBuf> {
    let mut s = Session::open("train", &a.common)?;
    let data = s.load_data(a.data)?;
    let default_widths = Widths(vec![data.dim(), 7, 1]);
    let widths: Widths = s.r.get(
        "widths",
        a.widths.map(|w| w.parse::<Widths>()).transpose().map_err(CliError::Config)?,
        default_widths,
    )?;
    let steps = s.r.get("steps", a.steps, 4000)?;
    let lr = s.r.get("lr", a.lr, 1e-3)?;
    let seed = s.r.seed(a.seed, 0)?;
    let eval_every = s.r.get("eval-every", a.eval_every, 100)?;
    s.settled()?;
    if widths.0.first() != Some(&data.dim()) {
        return Err(CliError::Config(format!("widths {widths} do not start with input dim {}", data.dim())));
    }
    let train = split_or_all(&data, Split::Train);
    let loss = LossKind::for_task(data.task);
    let net = build_mlp(&MlpSpec::relu(widths.0, seed))?;
    let cfg = TrainConfig {
        steps,
        lr_main: lr,
        loss,
        seed,
        eval_every,
        ..TrainConfig::default()
    };
    let out = train_base(&net, &train, &cfg)?;
    finish_training(s, &out.net, &out.curve, loss, &train, None)
}

fn steer(a: SteerArgs) -> CliResult<PathBuf> {
    let mut s = Session::open("steer", &a.common)?;
    let net = s.load_net(a.net)?;
    let data = s.load_data(a.data)?;
    let beta_lo = s.r.get("beta-lo", a.beta_lo, 0.7)?;
    let beta_hi = s.r.get("beta-hi", a.beta_hi, 1.0)?;
    let step = s.r.get("step", a.step, 0.01)?;
    let c = s.r.get("c", a.c, 0.5)?;
    let mode: String = s.r.get("mode", a.mode, "direct".into())?;
    let eval_split: String = s.r.get("eval-split", a.eval_split, "val".into())?;
    let probe_steps = s.r.get("probe-steps", a.probe_steps, 500)?;
    let probe_lr = s.r.get("probe-lr", a.probe_lr, 1e-3)?;
    s.settled()?;
    let mode = match mode.as_str() {
        "direct" => SweepMode::Direct,
        "reprobe" => SweepMode::Reprobe,
        other => return Err(CliError::Config(format!("unknown mode {other:?} (direct|reprobe)"))),
    };
    let eval = match eval_split.as_str() {
        "all" => data.clone(),
        tag => {
            let sub = data.subset(Split::parse(tag)?);
            if sub.is_empty() {
                s.r.warn(format!("split {tag:?} is empty; evaluating on the whole dataset"));
                data.clone()
            } else {
                sub
            }
        }
    };
    let train = split_or_all(&data, Split::Train);
    let opts = GridSearchOptions {
        beta_lo,
        beta_hi,
        step,
        c,
        mode,
        probe: TrainConfig {
            steps: probe_steps,
            lr_head: probe_lr,
            loss: LossKind::for_task(data.task),
            ..TrainConfig::default()
        },
    };
    let result = sct_grid_search(&net, &train, &eval, &opts)?;
    let relu = net.restore_relu();
    let mut rows = Vec::new();
    for (&beta, &metric) in result.betas.iter().zip(&result.metrics) {
        let circle = if net.input_dim() == 2 {
            let steered = relu.replace_relu_shared(beta, c)?;
            num(total_error_quadrature(|x| steered.eval_scalar(x), ctkit_core::circle::DEFAULT_N_PANELS)?)
        } else {
            String::new()
        };
        rows.push(vec![num(beta), num(metric), circle]);
    }
    let metric_col = match data.task {
        ctkit_core::data::TaskKind::Classification => "metric[accuracy]",
        ctkit_core::data::TaskKind::Regression => "metric[neg_mse]",
    };
    s.ctx.write_csv("sweep.csv", SWEEP_SCHEMA, &["beta[1]", metric_col, "circle_error[logit*length]"], &rows)?;
    s.ctx.write_json("sweep.json", REPORT_SCHEMA, &result)?;
    s.finish()
}

fn finetune_tct(a: FinetuneTctArgs) -> CliResult<PathBuf> {
    let mut s = Session::open("finetune-tct", &a.common)?;
    let net = s.load_net(a.net)?;
    let data = s.load_data(a.data)?;
    let steps = s.r.get("steps", a.steps, 4000)?;
    let lr_ct = s.r.get("lr-ct", a.lr_ct, 1e-1)?;
    let lr_head = s.r.get("lr-head", a.lr_head, 1e-3)?;
    let train_head = s.r.get("train-head", a.train_head, false)?;
    let raw_beta = s.r.get("raw-beta", a.raw_beta, DEFAULT_RAW_BETA)?;
    let raw_coeff = s.r.get("raw-coeff", a.raw_coeff, DEFAULT_RAW_COEFF)?;
    s.settled()?;
    let train = split_or_all(&data, Split::Train);
    let loss = LossKind::for_task(data.task);
    let cfg = TrainConfig {
        steps,
        lr_ct,
        lr_head,
        train_head,
        loss,
        ..TrainConfig::default()
    };
    let tct_net = net.restore_relu().replace_relu_trainable(raw_beta, raw_coeff)?;
    let out = train_tct(&tct_net, &train, &cfg)?;
    finish_training(s, &out.net, &out.curve, loss, &train, Some(out.summary))
}

fn finetune_lora(a: FinetuneLoraArgs) -> CliResult<PathBuf> {
    let mut s = Session::open("finetune-lora", &a.common)?;
    let net = s.load_net(a.net)?;
    let data = s.load_data(a.data)?;
    let steps = s.r.get("steps", a.steps, 4000)?;
    let rank = s.r.get("rank", a.rank, 1)?;
    let alpha = s.r.get("alpha", a.alpha, 1.0)?;
    let lr = s.r.get("lr", a.lr, 1e-4)?;
    let lr_head = s.r.get("lr-head", a.lr_head, 1e-4)?;
    let train_head = s.r.get("train-head", a.train_head, false)?;
    s.settled()?;
    let train = split_or_all(&data, Split::Train);
    let loss = LossKind::for_task(data.task);
    let cfg = TrainConfig {
        steps,
        lr_main: lr,
        lr_head,
        train_head,
        loss,
        ..TrainConfig::default()
    };
    let out = train_lora(&net.attach_lora(rank, alpha)?, &train, &cfg)?;
    finish_training(s, &out.net, &out.curve, loss, &train, None)
}

fn probe(a: ProbeArgs) -> CliResult<PathBuf> {
    let mut s = Session::open("probe", &a.common)?;
    let net = s.load_net(a.net)?;
    let data = s.load_data(a.data)?;
    let steps = s.r.get("steps", a.steps, 1000)?;
    let lr = s.r.get("lr", a.lr, 1e-3)?;
    s.settled()?;
    let train = split_or_all(&data, Split::Train);
    let loss = LossKind::for_task(data.task);
    let cfg = TrainConfig {
        steps,
        lr_head: lr,
        loss,
        ..TrainConfig::default()
    };
    let out = train_linear_probe(&net, &train, &cfg)?;
    finish_training(s, &out.net, &out.curve, loss, &train, None)
}

#[derive(Serialize)]
struct CircleJson {
    knots: Vec<f64>,
    contributions: Vec<f64>,
    total_closed: Option<f64>,
    total_quadrature: f64,
    relative_gap: Option<f64>,
}

fn circle_error(a: CircleErrorArgs) -> CliResult<PathBuf> {
    let mut s = Session::open("circle-error", &a.common)?;
    let net = s.load_net(a.net)?;
    let n_scan = s.r.get("n-scan", a.n_scan, ctkit_core::circle::DEFAULT_N_SCAN)?;
    let n_panels = s.r.get("n-panels", a.n_panels, ctkit_core::circle::DEFAULT_N_PANELS)?;
    s.settled()?;
    let total_quadrature = total_error_quadrature(|x| net.eval_scalar(x), n_panels)?;
    let report = if net.is_pure_relu() {
        let set = pullback_breakpoints(&net, n_scan, DEFAULT_REFINE_TOL)?;
        let contributions: Vec<f64> = segment_errors(&set)?.iter().map(|e| e.contribution).collect();
        let closed = std::f64::consts::TAU * contributions.iter().sum::<f64>();
        CircleJson {
            knots: set.knots,
            contributions,
            total_closed: Some(closed),
            total_quadrature,
            relative_gap: Some(ctkit_core::circle::relative_gap(closed, total_quadrature)),
        }
    } else {
        CircleJson {
            knots: Vec::new(),
            contributions: Vec::new(),
            total_closed: None,
            total_quadrature,
            relative_gap: None,
        }
    };
    s.ctx.write_json("circle.json", REPORT_SCHEMA, &report)?;
    s.finish()
}

#[derive(Serialize)]
struct DiagnoseJson {
    summary: CurvatureSummary,
    jacobian_bound: f64,
    contour_turning: Option<f64>,
}

fn diagnose(a: DiagnoseArgs) -> CliResult<PathBuf> {
    let mut s = Session::open("diagnose", &a.common)?;
    let net = s.load_net(a.net)?;
    let n_points = s.r.get("n-points", a.n_points, 400)?;
    let half = s.r.get("half-width", a.half_width, 2.0)?;
    let resolution = s.r.get("resolution", a.resolution, 200)?;
    let seed = s.r.seed(a.seed, 0)?;
    s.settled()?;
    let points = uniform_points(n_points, half, net.input_dim(), seed);
    let report = curvature_report(&net, &points, &CurvatureOptions::default())?;
    let mut turning = None;
    if net.input_dim() == 2 {
        s.ctx.write_csv("curvature.csv", CURVATURE_SCHEMA, &CURVATURE_HEADER, &curvature_rows(&report))?;
        let bbox = BBox::square(half)?;
        let lines = decision_boundary_2d(|x| net.eval_scalar(x), &bbox, resolution)?;
        s.ctx.write_csv("boundary.csv", BOUNDARY_SCHEMA, &BOUNDARY_HEADER, &boundary_rows(&lines))?;
        s.ctx.write_text("boundary.svg", SVG_SCHEMA, &boundary_svg(&lines, &bbox, true))?;
        turning = Some(contour_turning(&lines));
    } else {
        let mut header: Vec<String> = (1..=net.input_dim()).map(|i| format!("x{i}[input]")).collect();
        header.extend(CURVATURE_HEADER[2..].iter().map(|h| h.to_string()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = (0..points.len())
            .map(|i| {
                let mut row: Vec<String> = points[i].iter().map(|&v| num(v)).collect();
                row.push(num(report.grad_norms[i]));
                row.push(report.hessian_norms[i].map(num).unwrap_or_default());
                row.push(report.excluded[i].to_string());
                row
            })
            .collect();
        s.ctx.write_csv("curvature.csv", CURVATURE_SCHEMA, &header, &rows)?;
    }
    let summary = DiagnoseJson {
        summary: report.summary(),
        jacobian_bound: network_jacobian_bound(&net),
        contour_turning: turning,
    };
    s.ctx.write_json("curvature.json", REPORT_SCHEMA, &summary)?;
    s.finish()
}

fn fig1(a: Fig1Args) -> CliResult<PathBuf> {
    let mut s = Session::open("fig1", &a.common)?;
    let d = Fig1Config::default();
    let cfg = Fig1Config {
        seed: s.r.seed(a.seed, d.seed)?,
        n_classification: s.r.get("n-classification", a.n_classification, d.n_classification)?,
        n_regression: s.r.get("n-regression", a.n_regression, d.n_regression)?,
        classification_steps: s.r.get("classification-steps", a.classification_steps, d.classification_steps)?,
        regression_steps: s.r.get("regression-steps", a.regression_steps, d.regression_steps)?,
        lr: s.r.get("lr", a.lr, d.lr)?,
        c: s.r.get("c", a.c, d.c)?,
        resolution: s.r.get("resolution", a.resolution, d.resolution)?,
        curvature_points: s.r.get("curvature-points", a.curvature_points, d.curvature_points)?,
    };
    s.settled()?;
    run_fig1(&mut s.ctx, &cfg)?;
    s.finish()
}

fn fig2(a: Fig2Args) -> CliResult<PathBuf> {
    let mut s = Session::open("fig2", &a.common)?;
    let d = Fig2Config::default();
    let cfg = Fig2Config {
        seed: s.r.seed(a.seed, d.seed)?,
        n: s.r.get("n", a.n, d.n)?,
        pretrain_steps: s.r.get("pretrain-steps", a.pretrain_steps, d.pretrain_steps)?,
        finetune_steps: s.r.get("finetune-steps", a.finetune_steps, d.finetune_steps)?,
        lr_pretrain: s.r.get("lr-pretrain", a.lr_pretrain, d.lr_pretrain)?,
        lr_ct: s.r.get("lr-ct", a.lr_ct, d.lr_ct)?,
        lr_lora: s.r.get("lr-lora", a.lr_lora, d.lr_lora)?,
        rank: s.r.get("rank", a.rank, d.rank)?,
        alpha: s.r.get("alpha", a.alpha, d.alpha)?,
        resolution: s.r.get("resolution", a.resolution, d.resolution)?,
        curvature_points: s.r.get("curvature-points", a.curvature_points, d.curvature_points)?,
    };
    s.settled()?;
    run_fig2(&mut s.ctx, &cfg)?;
    s.finish()
}
