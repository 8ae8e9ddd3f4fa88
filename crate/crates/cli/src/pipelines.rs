//! Desk-scale reproductions of the two toy figures: the β sweep on a
//! classifier and a deep regressor, and the pretrain-then-finetune comparison
//! of a frozen baseline, LoRA and trainable curvature units.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ctkit_core::activation::{DEFAULT_RAW_BETA, DEFAULT_RAW_COEFF};
use ctkit_core::circle::{circle_report, total_error_quadrature, DEFAULT_N_PANELS};
use ctkit_core::curvature::{
    contour_turning, curvature_report, decision_boundary_2d, BBox, CurvatureOptions, CurvatureReport,
    CurvatureSummary, Polyline,
};
use ctkit_core::data::{gen_annulus, gen_regression_1d, Dataset};
use ctkit_core::network::{build_mlp, MlpSpec, Network, ParamCategory};
use ctkit_core::rng::SplitMix64;
use ctkit_core::trainers::{
    train_base, train_lora, train_tct, validation_metric, CtSummary, LossKind, TrainConfig,
};

use crate::artifacts::*;
use crate::error::CliResult;

/// Bounding box for boundary plots and curvature sampling around the annulus.
pub const PLOT_HALF_WIDTH: f64 = 2.2;

pub fn uniform_points(n: usize, half: f64, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::derived(seed, 0xD1A6);
    (0..n).map(|_| (0..dim).map(|_| rng.uniform(-half, half)).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub base: usize,
    pub ct: usize,
    pub lora: usize,
    pub all: usize,
    pub trainable: usize,
}

impl ParamCounts {
    pub fn of(net: &Network) -> Self {
        Self {
            base: net.param_count(ParamCategory::Base),
            ct: net.param_count(ParamCategory::Ct),
            lora: net.param_count(ParamCategory::Lora),
            all: net.param_count(ParamCategory::All),
            trainable: net.trainable_count(),
        }
    }
}

fn boundary(net: &Network, bbox: &BBox, resolution: usize) -> CliResult<Vec<Polyline>> {
    Ok(decision_boundary_2d(|x| net.eval_scalar(x), bbox, resolution)?)
}

fn write_boundary(ctx: &mut RunContext, stem: &str, lines: &[Polyline], bbox: &BBox) -> CliResult<()> {
    ctx.write_csv(&format!("{stem}.csv"), BOUNDARY_SCHEMA, &BOUNDARY_HEADER, &boundary_rows(lines))?;
    ctx.write_text(&format!("{stem}.svg"), SVG_SCHEMA, &boundary_svg(lines, bbox, true))
}

fn write_curvature(ctx: &mut RunContext, name: &str, report: &CurvatureReport) -> CliResult<()> {
    ctx.write_csv(name, CURVATURE_SCHEMA, &CURVATURE_HEADER, &curvature_rows(report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Config {
    pub seed: u64,
    pub n: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lr_pretrain: f64,
    pub lr_ct: f64,
    pub lr_lora: f64,
    pub rank: usize,
    pub alpha: f64,
    pub resolution: usize,
    pub curvature_points: usize,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Self {
            seed: 42,
            n: 512,
            pretrain_steps: 4000,
            finetune_steps: 4000,
            lr_pretrain: 1e-3,
            lr_ct: 1e-1,
            lr_lora: 1e-4,
            rank: 1,
            alpha: 1.0,
            resolution: 200,
            curvature_points: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub name: String,
    pub params: ParamCounts,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub circle_closed: Option<f64>,
    pub circle_quadrature: f64,
    pub circle_relative_gap: Option<f64>,
    pub contour_turning: f64,
    pub curvature: CurvatureSummary,
    pub ct_summary: Option<CtSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Report {
    pub config: Fig2Config,
    pub widths: Vec<usize>,
    pub pretrain_final_loss: f64,
    pub pretrain_accuracy: f64,
    pub branches: Vec<BranchReport>,
}

impl Fig2Report {
    pub fn branch(&self, name: &str) -> Option<&BranchReport> {
        self.branches.iter().find(|b| b.name == name)
    }
}

pub fn run_fig2(ctx: &mut RunContext, cfg: &Fig2Config) -> CliResult<Fig2Report> {
    let widths = vec![2, 7, 1];
    let data = gen_annulus(cfg.n, cfg.seed)?;
    let net = build_mlp(&MlpSpec::relu(widths.clone(), cfg.seed))?;
    let pre_cfg = TrainConfig {
        steps: cfg.pretrain_steps,
        lr_main: cfg.lr_pretrain,
        loss: LossKind::BceLogits,
        seed: cfg.seed,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let pre = train_base(&net, &data, &pre_cfg)?;
    let baseline = pre.net;
    let pretrain_final_loss = pre.curve.last().map(|p| p.loss).unwrap_or(f64::NAN);

    let lora_cfg = TrainConfig {
        steps: cfg.finetune_steps,
        lr_main: cfg.lr_lora,
        lr_head: cfg.lr_lora,
        ..pre_cfg.clone()
    };
    let lora = train_lora(&baseline.attach_lora(cfg.rank, cfg.alpha)?, &data, &lora_cfg)?;

    let tct_cfg = TrainConfig {
        steps: cfg.finetune_steps,
        lr_ct: cfg.lr_ct,
        ..pre_cfg.clone()
    };
    let tct = train_tct(
        &baseline.replace_relu_trainable(DEFAULT_RAW_BETA, DEFAULT_RAW_COEFF)?,
        &data,
        &tct_cfg,
    )?;

    let bbox = BBox::square(PLOT_HALF_WIDTH)?;
    let points = uniform_points(cfg.curvature_points, 2.0, 2, cfg.seed);
    let branches: Vec<(&str, Network, f64, Option<CtSummary>)> = vec![
        ("baseline", baseline.clone(), pretrain_final_loss, None),
        (
            "lora",
            lora.net,
            lora.curve.last().map(|p| p.loss).unwrap_or(f64::NAN),
            None,
        ),
        (
            "tct",
            tct.net,
            tct.curve.last().map(|p| p.loss).unwrap_or(f64::NAN),
            Some(tct.summary),
        ),
    ];

    let mut reports = Vec::new();
    for (name, net, final_loss, ct_summary) in branches {
        let circle = circle_report(&net)?;
        let lines = boundary(&net, &bbox, cfg.resolution)?;
        let curvature = curvature_report(&net, &points, &CurvatureOptions::default())?;
        write_boundary(ctx, &format!("fig2_{name}_boundary"), &lines, &bbox)?;
        write_curvature(ctx, &format!("fig2_{name}_curvature.csv"), &curvature)?;
        ctx.write_text(&format!("fig2_{name}_net.json"), CHECKPOINT_SCHEMA, &(net.to_checkpoint_json()? + "\n"))?;
        reports.push(BranchReport {
            name: name.to_string(),
            params: ParamCounts::of(&net),
            final_loss,
            train_accuracy: validation_metric(&net, &data)?,
            circle_closed: circle.total_closed,
            circle_quadrature: circle.total_quadrature,
            circle_relative_gap: circle.relative_gap,
            contour_turning: contour_turning(&lines),
            curvature: curvature.summary(),
            ct_summary,
        });
    }
    let report = Fig2Report {
        config: cfg.clone(),
        widths,
        pretrain_final_loss,
        pretrain_accuracy: validation_metric(&baseline, &data)?,
        branches: reports,
    };
    ctx.write_json("fig2_report.json", REPORT_SCHEMA, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Config {
    pub seed: u64,
    pub n_classification: usize,
    pub n_regression: usize,
    pub classification_steps: usize,
    pub regression_steps: usize,
    pub lr: f64,
    /// Curvature coefficient of every frame.
    pub c: f64,
    pub resolution: usize,
    pub curvature_points: usize,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classification: 512,
            n_regression: 128,
            classification_steps: 2000,
            regression_steps: 20000,
            lr: 1e-3,
            c: 1.0,
            resolution: 200,
            curvature_points: 200,
        }
    }
}

/// β ∈ {1.0, 0.9, …, 0.0}.
pub fn fig1_betas() -> Vec<f64> {
    (0..=10).rev().map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub beta: f64,
    pub metric: f64,
    pub circle_error: Option<f64>,
    pub contour_turning: Option<f64>,
    /// Largest |output − ReLU baseline output| over the evaluation points.
    pub max_diff_vs_baseline: f64,
    pub curvature: CurvatureSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSweep {
    pub model: String,
    pub widths: Vec<usize>,
    pub final_loss: f64,
    pub baseline_metric: f64,
    pub frames: Vec<FrameReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Report {
    pub config: Fig1Config,
    pub models: Vec<ModelSweep>,
}

struct Frame {
    report: FrameReport,
    lines: Vec<Polyline>,
    fit: Vec<f64>,
}

fn regression_widths() -> Vec<usize> {
    let mut w = vec![1];
    w.extend([64; 8]);
    w.push(1);
    w
}

fn sweep_model(
    model: &str,
    widths: Vec<usize>,
    data: &Dataset,
    steps: usize,
    cfg: &Fig1Config,
    bbox: &BBox,
    grid: &[Vec<f64>],
) -> CliResult<(ModelSweep, Vec<Frame>, Network)> {
    let net = build_mlp(&MlpSpec::relu(widths.clone(), cfg.seed))?;
    let loss = LossKind::for_task(data.task);
    let trained = train_base(
        &net,
        data,
        &TrainConfig {
            steps,
            lr_main: cfg.lr,
            loss,
            seed: cfg.seed,
            eval_every: 100,
            ..TrainConfig::default()
        },
    )?;
    let base = trained.net;
    let two_d = base.input_dim() == 2;
    let baseline_out: Vec<f64> = grid.iter().map(|x| base.eval_scalar(x)).collect();
    let dim = base.input_dim();
    let points = uniform_points(cfg.curvature_points, if two_d { 2.0 } else { 1.0 }, dim, cfg.seed);
    let frames = fig1_betas()
        .par_iter()
        .map(|&beta| {
            let steered = base.replace_relu_shared(beta, cfg.c)?;
            let out: Vec<f64> = grid.iter().map(|x| steered.eval_scalar(x)).collect();
            let max_diff = out.iter().zip(&baseline_out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let lines = if two_d { boundary(&steered, bbox, cfg.resolution)? } else { Vec::new() };
            let circle_error = if two_d {
                Some(total_error_quadrature(|x| steered.eval_scalar(x), DEFAULT_N_PANELS)?)
            } else {
                None
            };
            let curvature = curvature_report(&steered, &points, &CurvatureOptions::default())?;
            Ok(Frame {
                report: FrameReport {
                    beta,
                    metric: validation_metric(&steered, data)?,
                    circle_error,
                    contour_turning: two_d.then(|| contour_turning(&lines)),
                    max_diff_vs_baseline: max_diff,
                    curvature: curvature.summary(),
                },
                lines,
                fit: if two_d { Vec::new() } else { out },
            })
        })
        .collect::<CliResult<Vec<Frame>>>()?;
    Ok((
        ModelSweep {
            model: model.to_string(),
            widths,
            final_loss: trained.curve.last().map(|p| p.loss).unwrap_or(f64::NAN),
            baseline_metric: validation_metric(&base, data)?,
            frames: frames.iter().map(|f| f.report.clone()).collect(),
        },
        frames,
        base,
    ))
}

fn sweep_rows(sweep: &ModelSweep) -> Vec<Vec<String>> {
    sweep
        .frames
        .iter()
        .map(|f| vec![num(f.beta), num(f.metric), f.circle_error.map(num).unwrap_or_default()])
        .collect()
}

pub fn beta_tag(beta: f64) -> String {
    format!("{beta:.2}")
}

pub fn run_fig1(ctx: &mut RunContext, cfg: &Fig1Config) -> CliResult<Fig1Report> {
    let bbox = BBox::square(PLOT_HALF_WIDTH)?;
    let cls_data = gen_annulus(cfg.n_classification, cfg.seed)?;
    let reg_data = gen_regression_1d(cfg.n_regression, cfg.seed)?;
    let cls_grid = uniform_points(1000, 2.0, 2, cfg.seed ^ 1);
    let reg_grid: Vec<Vec<f64>> = (0..=200).map(|i| vec![-1.0 + i as f64 / 100.0]).collect();

    let (cls, cls_frames, cls_net) = sweep_model(
        "classification",
        vec![2, 20, 20, 1],
        &cls_data,
        cfg.classification_steps,
        cfg,
        &bbox,
        &cls_grid,
    )?;
    let (reg, reg_frames, reg_net) = sweep_model(
        "regression",
        regression_widths(),
        &reg_data,
        cfg.regression_steps,
        cfg,
        &bbox,
        &reg_grid,
    )?;

    for (model, net) in [("classification", &cls_net), ("regression", &reg_net)] {
        ctx.write_text(&format!("fig1_{model}_net.json"), CHECKPOINT_SCHEMA, &(net.to_checkpoint_json()? + "\n"))?;
    }
    let header = ["beta[1]", "metric[accuracy]", "circle_error[logit*length]"];
    ctx.write_csv("fig1_classification_sweep.csv", SWEEP_SCHEMA, &header, &sweep_rows(&cls))?;
    let header = ["beta[1]", "metric[neg_mse]", "circle_error[logit*length]"];
    ctx.write_csv("fig1_regression_sweep.csv", SWEEP_SCHEMA, &header, &sweep_rows(&reg))?;
    for frame in &cls_frames {
        write_boundary(
            ctx,
            &format!("fig1_classification_boundary_beta{}", beta_tag(frame.report.beta)),
            &frame.lines,
            &bbox,
        )?;
    }
    let mut fit_rows = Vec::new();
    for frame in &reg_frames {
        for (x, y) in reg_grid.iter().zip(&frame.fit) {
            fit_rows.push(vec![num(frame.report.beta), num(x[0]), num(*y)]);
        }
    }
    ctx.write_csv("fig1_regression_fit.csv", FIT_SCHEMA, &["beta[1]", "x1[input]", "y[prediction]"], &fit_rows)?;
    let report = Fig1Report {
        config: cfg.clone(),
        models: vec![cls, reg],
    };
    ctx.write_json("fig1_report.json", REPORT_SCHEMA, &report)?;
    Ok(report)
}
