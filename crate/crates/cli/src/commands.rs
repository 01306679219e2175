//! One function per subcommand. Each reads its tables from the config,
//! writes CSV artifacts and returns a one-line summary.

use crate::config::{ConfigError, ExperimentConfig, Predictor, UatTarget};
use crate::output::{num, opt_num, vec_cell, Artifacts};
use condit::evaluation::{
    covering_bound, guided_score, monotone_within_noise, trend_experiment, tv_estimate,
    CoverInputs, Setting, TrendConfig, TREND_COLUMNS,
};
use condit::localpoly::{
    hat_coeffs, score_generic, score_strong, taylor_table, weighted_score_mse, GridSpec,
    HolderParams, ScoreAssemblyConfig, StrongFactor,
};
use condit::rng::stream;
use condit::schedule::{backward_sample, TimeWindow};
use condit::targets::{oracle_score, sample_given, sample_pair, Family};
use condit::training::{score_risk, train, truncated_risk};
use condit::transformer::{load_checkpoint, norm_report, save_checkpoint, DiTModel};
use condit::uat::{assemble_uat, has_duplicate_tokens};
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::path::Path;

/// Failure of a subcommand.
#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<condit::Error> for Failure {
    fn from(e: condit::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<Box<dyn std::error::Error>> for Failure {
    fn from(e: Box<dyn std::error::Error>) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = Result<String, Failure>;

fn field(field: &str, message: impl Into<String>) -> Failure {
    Failure::Config(ConfigError {
        location: format!("field `{field}`"),
        message: message.into(),
    })
}

fn load_model(path: Option<&String>, key: &str, family: &Family) -> Result<DiTModel, Failure> {
    let path = path.ok_or_else(|| field(key, "a checkpoint path is required"))?;
    let m = load_checkpoint(Path::new(path)).map_err(|e| field(key, format!("{path}: {e}")))?;
    if m.d_x() != family.d_x() || m.d_y != family.d_y() {
        return Err(field(
            key,
            format!(
                "checkpoint has d_x={}, d_y={} but the family has d_x={}, d_y={}",
                m.d_x(),
                m.d_y,
                family.d_x(),
                family.d_y()
            ),
        ));
    }
    Ok(m)
}

fn check_condition(y: &Option<Vec<f64>>, key: &str, family: &Family) -> Result<(), Failure> {
    match y {
        Some(v) if v.len() != family.d_y() => Err(field(
            key,
            format!("has {} entries, family expects {}", v.len(), family.d_y()),
        )),
        _ => Ok(()),
    }
}

pub fn train_cmd(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Outcome {
    let family = cfg.family.build()?;
    let window = cfg.schedule.window()?;
    let model_cfg = cfg.model.dit_config(family.d_x(), family.d_y())?;
    let tc = cfg.train.train_config(window, seed)?;
    if cfg.train.risk_points == 0 {
        return Err(field("train.risk_points", "must be >= 1"));
    }
    let model = DiTModel::new(&model_cfg, &mut stream(seed, "init", 0))?;
    let header = ["epoch", "loss", "risk", "stderr"];
    let trace_rows = |trace: &[f64]| -> Vec<Vec<String>> {
        trace
            .iter()
            .enumerate()
            .map(|(e, l)| vec![(e + 1).to_string(), num(*l), String::new(), String::new()])
            .collect()
    };
    let outcome = match train(model, &family, &tc) {
        Ok(o) => o,
        Err(condit::Error::Divergence { epoch, loss, trace }) => {
            out.csv("loss.csv", &header, &trace_rows(&trace))?;
            return Err(Failure::Run(format!(
                "training diverged at epoch {epoch} (loss {loss})"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let m = &outcome.model;
    let risk = score_risk(
        |x: &[f64], y: Option<&[f64]>, t: f64| m.forward(x, y, t),
        &family,
        &window,
        cfg.train.risk_points,
        &mut stream(seed, "risk", 0),
    )?;
    let mut rows = trace_rows(&outcome.trace);
    if let Some(last) = rows.last_mut() {
        last[2] = num(risk.risk);
        last[3] = num(risk.stderr);
    }
    out.csv("loss.csv", &header, &rows)?;
    save_checkpoint(m, &out.path("model.ckpt"))?;
    out.record("model.ckpt")?;
    let rep = norm_report(m);
    let mut norm_rows: Vec<Vec<String>> = rep
        .matrices
        .iter()
        .map(|n| vec![n.name.clone(), num(n.spectral), num(n.two_inf)])
        .collect();
    norm_rows.push(vec!["C_T".into(), num(rep.c_t), String::new()]);
    for (b, l) in rep.l_t.iter().enumerate() {
        norm_rows.push(vec![format!("block{b}.L_T"), num(*l), String::new()]);
    }
    out.csv("norms.csv", &["matrix", "spectral", "two_inf"], &norm_rows)?;
    Ok(format!(
        "final loss {:.6}, risk {:.6} +- {:.6}",
        outcome.trace.last().copied().unwrap_or(f64::NAN),
        risk.risk,
        risk.stderr
    ))
}

pub fn risk_cmd(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Outcome {
    let family = cfg.family.build()?;
    let window = cfg.schedule.window()?;
    let spec = &cfg.risk;
    if spec.mc_points == 0 {
        return Err(field("risk.mc_points", "must be >= 1"));
    }
    let model = match spec.predictor {
        Predictor::Checkpoint => Some(load_model(
            spec.checkpoint.as_ref(),
            "risk.checkpoint",
            &family,
        )?),
        _ => None,
    };
    let score = |x: &[f64], y: Option<&[f64]>, t: f64| -> condit::Result<Vec<f64>> {
        match (spec.predictor, &model) {
            (Predictor::Oracle, _) => oracle_score(&family, x, y.unwrap_or(&[]), t),
            (Predictor::Zero, _) => Ok(vec![0.0; x.len()]),
            (_, Some(m)) => m.forward(x, y, t),
            (_, None) => unreachable!("checkpoint loaded above"),
        }
    };
    let mut rng = stream(seed, "risk", 0);
    let rep = match spec.r_trunc {
        Some(r) => truncated_risk(score, &family, &window, r, spec.mc_points, &mut rng)?,
        None => score_risk(score, &family, &window, spec.mc_points, &mut rng)?,
    };
    let name = match spec.predictor {
        Predictor::Oracle => "oracle",
        Predictor::Zero => "zero",
        Predictor::Checkpoint => "checkpoint",
    };
    out.csv(
        "risk.csv",
        &["predictor", "mc_points", "r_trunc", "risk", "stderr"],
        &[vec![
            name.into(),
            rep.mc_points.to_string(),
            opt_num(spec.r_trunc),
            num(rep.risk),
            num(rep.stderr),
        ]],
    )?;
    Ok(format!("{name} risk {:.6} +- {:.6}", rep.risk, rep.stderr))
}

pub fn approx_cmd(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    let family = cfg.family.build()?;
    let a = &cfg.approx;
    if family.d_x() > 2 {
        return Err(field("family.d_x", "approx-sweep supports d_x <= 2"));
    }
    if a.n.is_empty() || a.n.contains(&0) {
        return Err(field("approx.n", "needs at least one grid size >= 1"));
    }
    if a.points < 2 || !(a.half_width > 0.0) || !(a.t > 0.0) {
        return Err(field(
            "approx",
            "needs points >= 2, half_width > 0 and t > 0",
        ));
    }
    if a.y.is_empty() || a.y.iter().any(|y| y.len() != family.d_y()) {
        return Err(field(
            "approx.y",
            format!("needs conditions of length {}", family.d_y()),
        ));
    }
    let rows: Vec<Vec<String>> = a
        .n
        .par_iter()
        .map(|&n| {
            let run = || -> condit::Result<(f64, Option<f64>)> {
                let g = GridSpec::new(n, a.c_x, family.d_x(), family.d_y())?;
                let h = HolderParams::new(a.beta, &g)?;
                let p = taylor_table(&family, &g, &h, true)?;
                let sc = ScoreAssemblyConfig::for_poly(&p, a.t, 1.0)?;
                let eg = weighted_score_mse(&family, &a.y, a.t, a.half_width, a.points, |x, y| {
                    score_generic(&p, x, y, a.t, &sc)
                })?;
                let es = match &family {
                    Family::Strong(s) => {
                        let ps = taylor_table(&StrongFactor(s), &g, &h, false)?;
                        let dec = hat_coeffs(a.t, s.c2())?;
                        Some(weighted_score_mse(
                            &family,
                            &a.y,
                            a.t,
                            a.half_width,
                            a.points,
                            |x, y| score_strong(&ps, x, y, &dec),
                        )?)
                    }
                    _ => None,
                };
                Ok((eg, es))
            };
            match run() {
                Ok((eg, es)) => vec![n.to_string(), num(eg), opt_num(es), "ok".into()],
                Err(e) => vec![n.to_string(), String::new(), String::new(), e.code().into()],
            }
        })
        .collect();
    out.csv(
        "approx.csv",
        &["n", "mse_generic", "mse_strong", "status"],
        &rows,
    )?;
    Ok(format!("{} grid sizes", rows.len()))
}

fn uat_target(kind: UatTarget) -> impl Fn(&DMatrix<f64>) -> DMatrix<f64> + Copy {
    move |z: &DMatrix<f64>| match kind {
        UatTarget::Sum => z.map(|_| z.sum()),
        UatTarget::Mean => z.map(|_| z.mean()),
        UatTarget::Max => z.map(|_| z.max()),
        UatTarget::Square => z.map(|v| v * v),
    }
}

pub fn uat_cmd(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    let u = &cfg.uat;
    if u.granularity == 0 || u.d == 0 || u.l < 2 {
        return Err(field("uat", "needs granularity >= 1, d >= 1 and l >= 2"));
    }
    let target = uat_target(u.target);
    let net = assemble_uat(target, u.d, u.l, u.granularity, u.delta_q, u.r)?;
    let rep = net.memorization_report(target)?;
    let mut rows = Vec::new();
    for (i, (g, label)) in net.grid.labels.iter().enumerate() {
        let center = net.grid.center(g);
        let y = net.forward(&center)?;
        let dup = has_duplicate_tokens(g);
        let want = if dup {
            DMatrix::zeros(y.nrows(), y.ncols())
        } else {
            label.clone()
        };
        rows.push(vec![
            i.to_string(),
            dup.to_string(),
            vec_cell(center.as_slice()),
            vec_cell(label.as_slice()),
            vec_cell(y.as_slice()),
            num((y - want).amax()),
        ]);
    }
    out.csv(
        "uat_cells.csv",
        &[
            "cell",
            "duplicate",
            "center",
            "label",
            "output",
            "abs_error",
        ],
        &rows,
    )?;
    let att = &net.attention;
    out.csv(
        "uat_summary.csv",
        &[
            "granularity",
            "d",
            "l",
            "cells",
            "duplicate_free",
            "max_label_error",
            "max_target_error",
            "max_duplicate_output",
            "separation_margin",
            "delta_prime",
            "max_movement",
            "eps_sep",
            "lambda",
            "lambda_nominal",
        ],
        &[vec![
            u.granularity.to_string(),
            u.d.to_string(),
            u.l.to_string(),
            rep.cells.to_string(),
            rep.duplicate_free.to_string(),
            num(rep.max_label_error),
            num(rep.max_target_error),
            num(rep.max_duplicate_output),
            num(net.separation_margin),
            num(att.delta_prime),
            num(net.max_movement),
            num(att.cfg.eps_sep),
            num(att.lambda),
            num(att.lambda_nominal),
        ]],
    )?;
    Ok(format!(
        "{} cells, max center error {:.3e}, separation margin {:.3e}",
        rep.cells, rep.max_label_error, net.separation_margin
    ))
}

pub fn cover_cmd(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    let c = &cfg.cover;
    let inp = match &c.checkpoint {
        Some(path) => {
            let m = load_checkpoint(Path::new(path))
                .map_err(|e| field("cover.checkpoint", format!("{path}: {e}")))?;
            let rep = norm_report(&m);
            CoverInputs::from_report(
                &rep,
                m.blocks.len(),
                c.eps_c,
                c.n,
                (m.reshape.l() + 2) as f64,
                c.r_t,
                m.d() as f64,
            )
        }
        None => c.inputs(),
    };
    inp.validate().map_err(|e| field("cover", e.to_string()))?;
    let v = covering_bound(&inp);
    out.csv(
        "cover.csv",
        &[
            "eps_c",
            "n",
            "L",
            "R_T",
            "C_F",
            "C_F_2inf",
            "C_OV",
            "C_OV_2inf",
            "C_KQ",
            "C_KQ_2inf",
            "C_E",
            "d",
            "log_covering",
        ],
        &[vec![
            num(inp.eps_c),
            num(inp.n),
            num(inp.l),
            num(inp.r_t),
            num(inp.c_f),
            num(inp.c_f_2inf),
            num(inp.c_ov),
            num(inp.c_ov_2inf),
            num(inp.c_kq),
            num(inp.c_kq_2inf),
            num(inp.c_e),
            num(inp.d),
            num(v),
        ]],
    )?;
    Ok(format!("log covering bound {v:.16e}"))
}

/// Backward samples (with their conditions) and, optionally, direct draws
/// from the family at the same conditions.
fn generate(
    family: &Family,
    window: &TimeWindow,
    model: Option<&DiTModel>,
    eta: f64,
    y_fixed: Option<&[f64]>,
    n: usize,
    seed: u64,
    with_direct: bool,
) -> condit::Result<Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cond_rng = stream(seed, "condition", i as u64);
            let (direct, y) = match y_fixed {
                Some(y) => (
                    with_direct
                        .then(|| sample_given(family, y, &mut cond_rng))
                        .transpose()?,
                    y.to_vec(),
                ),
                None => {
                    let (x, y) = sample_pair(family, &mut cond_rng);
                    (with_direct.then_some(x), y)
                }
            };
            let score = |x: &[f64], c: Option<&[f64]>, t: f64| match model {
                Some(m) => guided_score(m, x, c.unwrap_or(&[]), t, eta),
                None => oracle_score(family, x, c.unwrap_or(&[]), t),
            };
            let x = backward_sample(
                score,
                window,
                family.d_x(),
                Some(&y),
                &mut stream(seed, "backward", i as u64),
            )?;
            Ok((y, x, direct))
        })
        .collect()
}

fn sampler_model(
    checkpoint: Option<&String>,
    key: &str,
    eta: f64,
    family: &Family,
) -> Result<Option<DiTModel>, Failure> {
    if !(eta >= 0.0) {
        return Err(field(&format!("{key}.eta"), "must be >= 0"));
    }
    match checkpoint {
        Some(_) => Ok(Some(load_model(
            checkpoint,
            &format!("{key}.checkpoint"),
            family,
        )?)),
        None if eta != 0.0 => Err(field(
            &format!("{key}.eta"),
            "guidance needs a checkpoint (the oracle has no unconditional score)",
        )),
        None => Ok(None),
    }
}

pub fn tv_cmd(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Outcome {
    let family = cfg.family.build()?;
    let window = cfg.schedule.window()?;
    let t = &cfg.tv;
    if family.d_x() > 2 {
        return Err(field("family.d_x", "tv supports d_x <= 2"));
    }
    if t.samples == 0 || t.bins == 0 {
        return Err(field("tv", "needs samples >= 1 and bins >= 1"));
    }
    check_condition(&t.y, "tv.y", &family)?;
    let model = sampler_model(t.checkpoint.as_ref(), "tv", t.eta, &family)?;
    let draws = generate(
        &family,
        &window,
        model.as_ref(),
        t.eta,
        t.y.as_deref(),
        t.samples,
        seed,
        true,
    )?;
    let generated: Vec<Vec<f64>> = draws.iter().map(|d| d.1.clone()).collect();
    let direct: Vec<Vec<f64>> = draws.iter().filter_map(|d| d.2.clone()).collect();
    let rep = tv_estimate(&generated, &direct, t.bins)?;
    let mean: Vec<f64> = (0..family.d_x())
        .map(|k| generated.iter().map(|x| x[k]).sum::<f64>() / generated.len() as f64)
        .collect();
    out.csv(
        "tv.csv",
        &["samples", "bins", "tv", "generated_mean"],
        &[vec![
            t.samples.to_string(),
            rep.bins.to_string(),
            num(rep.tv),
            vec_cell(&mean),
        ]],
    )?;
    Ok(format!("TV {:.4} over {} samples", rep.tv, t.samples))
}

pub fn sample_cmd(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Outcome {
    let family = cfg.family.build()?;
    let window = cfg.schedule.window()?;
    let s = &cfg.sample;
    if s.samples == 0 {
        return Err(field("sample.samples", "must be >= 1"));
    }
    check_condition(&s.y, "sample.y", &family)?;
    let model = sampler_model(s.checkpoint.as_ref(), "sample", s.eta, &family)?;
    let draws = generate(
        &family,
        &window,
        model.as_ref(),
        s.eta,
        s.y.as_deref(),
        s.samples,
        seed,
        false,
    )?;
    let mut header: Vec<String> = (0..family.d_y()).map(|k| format!("y_{k}")).collect();
    header.extend((0..family.d_x()).map(|k| format!("x_{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = draws
        .iter()
        .map(|(y, x, _)| y.iter().chain(x).map(|v| num(*v)).collect())
        .collect();
    out.csv("samples.csv", &header, &rows)?;
    Ok(format!("{} samples", rows.len()))
}

pub fn trend_cmd(cfg: &ExperimentConfig, seed: u64, out: &mut Artifacts) -> Outcome {
    let tr = &cfg.trend;
    let (settings, by_dx): (Vec<Setting>, bool) = match (tr.dx.is_empty(), tr.t0.is_empty()) {
        (false, true) => (tr.dx.iter().map(|&d| Setting::Dx(d)).collect(), true),
        (true, false) => (tr.t0.iter().map(|&t| Setting::T0(t)).collect(), false),
        _ => return Err(field("trend", "set exactly one of `dx` or `t0`")),
    };
    if settings.len() < 3 {
        return Err(field(
            if by_dx { "trend.dx" } else { "trend.t0" },
            "needs at least 3 settings",
        ));
    }
    if tr.seeds < 3 {
        return Err(field("trend.seeds", "needs at least 3 seeds"));
    }
    let window = cfg.schedule.window()?;
    let tc = TrendConfig {
        train: cfg.train.train_config(window, seed)?,
        token_dim: cfg.model.d,
        blocks: cfg.model.blocks,
        s: cfg.model.s,
        d_x: tr.d_x,
        test_n: tr.test_n,
        risk_points: tr.risk_points,
    };
    let seeds: Vec<u64> = (0..tr.seeds as u64).collect();
    let table = trend_experiment(&settings, &seeds, &tc)?;
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.setting.to_string(), r.seed.to_string()];
            match &r.result {
                Ok(m) => {
                    row.extend(
                        [
                            m.test_loss,
                            m.risk,
                            m.stderr,
                            m.norm_wo_2inf,
                            m.norm_wv_2inf,
                            m.test_stderr,
                        ]
                        .map(num),
                    );
                    row.push("ok".into());
                }
                Err(f) => {
                    row.extend(std::iter::repeat_n(String::new(), 6));
                    row.push(f.code.into());
                }
            }
            row
        })
        .collect();
    out.csv("trend.csv", &TREND_COLUMNS, &rows)?;
    let med: Vec<Vec<String>> = table
        .summary
        .iter()
        .map(|s| {
            vec![
                s.setting.to_string(),
                s.cells.to_string(),
                num(s.test_loss),
                num(s.test_stderr),
                num(s.risk),
                num(s.stderr),
                num(s.norm_wo_2inf),
                num(s.norm_wv_2inf),
            ]
        })
        .collect();
    out.csv(
        "trend_medians.csv",
        &[
            "setting",
            "cells",
            "test_loss",
            "test_stderr",
            "risk",
            "stderr",
            "norm_WO_2inf",
            "norm_WV_2inf",
        ],
        &med,
    )?;
    // d_x: test loss grows with d_x; t0: risk shrinks as t0 grows
    let mut order: Vec<usize> = (0..settings.len()).collect();
    let key = |s: &Setting| match s {
        Setting::Dx(d) => *d as f64,
        Setting::T0(t) => -t,
    };
    order.sort_by(|&a, &b| key(&settings[a]).total_cmp(&key(&settings[b])));
    let pick = |f: fn(&condit::evaluation::TrendSummary) -> f64| {
        order
            .iter()
            .map(|&i| f(&table.summary[i]))
            .collect::<Vec<_>>()
    };
    let ok = if by_dx {
        monotone_within_noise(&pick(|s| s.test_loss), &pick(|s| s.test_stderr), true)
    } else {
        monotone_within_noise(&pick(|s| s.risk), &pick(|s| s.stderr), true)
    };
    let failed = table.rows.iter().filter(|r| r.result.is_err()).count();
    Ok(format!(
        "{} cells ({failed} failed), trend {}",
        table.rows.len(),
        if ok { "holds" } else { "violated" }
    ))
}
