// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use visedit_core::attribution::{
    calibrate, control_attribution, control_summary, prompt_trace, render_heatmap, unrelated_answers,
    visual_contribution, write_bar_data, Calibration, PerturbationSpec,
};
use visedit_core::datagen::io::{
    case_records, cases_from_records, pretrain_records, read_jsonl, write_jsonl, write_manifest, DatasetManifest,
    Record,
};
use visedit_core::datagen::{gen_vqa_set, EditCase, QaSample, Vocab};
use visedit_core::evalbench::{
    edit_splits, evaluate, intensity_contrast, layer_sweep, run_ablation, sweep_layers, train_adapter, write_table,
    Ablation, AdapterSetup, FtEditor, MetricsReport, NoEdit, VeadEditor,
};
use visedit_core::toyvlm::{argmax, HiddenTrace, ToyVlm};
use visedit_core::training::{pretrain, TrainConfig};
use visedit_core::vead::{compute_edit_signal, forward_with_adapter, VeadParams};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::rundir::RunDir;

/// Seed offset of the calibration samples.
const CALIBRATION_STREAM: u64 = 0xca11_b4a7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeMode {
    Standard,
    PostEdit,
    WrongToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Attribute(AttributeMode),
    TrainVead,
    EditEval,
    SweepLayers,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Pretrain => "pretrain",
            Self::Attribute(_) => "attribute",
            Self::TrainVead => "train-vead",
            Self::EditEval => "edit-eval",
            Self::SweepLayers => "sweep-layers",
            Self::Ablate => "ablate",
        }
    }
}

/// Inverse of [`Ablation::tag`]; parts may be joined with commas.
pub fn parse_ablation(tag: &str) -> CliResult<Ablation> {
    let mut a = Ablation::default();
    if tag == "full" {
        return Ok(a);
    }
    for part in tag.split(',') {
        match part.trim() {
            "-im_down" => a.drop_im_down = true,
            "-im_up" => a.drop_im_up = true,
            "-im_align" => a.drop_im_align = true,
            "-IM" => a.drop_im = true,
            "-CA" => a.drop_ca = true,
            other => return Err(CliError::Config(format!("unknown ablation `{other}` in `{tag}`"))),
        }
    }
    Ok(a)
}

/// Runs `cmd` in a fresh run directory and returns its path.
pub fn execute(cmd: Command, cfg: &RunConfig) -> CliResult<PathBuf> {
    // Prerequisites are checked before a run directory is created.
    let ctx = Context::new(cmd, cfg)?;
    let run = RunDir::create(&cfg.paths.resolved_run_root(), cmd.name(), cfg)?;
    info!("{} -> {}", cmd.name(), run.path.display());
    match cmd {
        Command::GenData => gen_data(&ctx, &run)?,
        Command::Pretrain => pretrain_cmd(&ctx, &run)?,
        Command::Attribute(mode) => attribute(&ctx, &run, mode)?,
        Command::TrainVead => train_vead(&ctx, &run)?,
        Command::EditEval => edit_eval(&ctx, &run)?,
        Command::SweepLayers => sweep(&ctx, &run)?,
        Command::Ablate => ablate(&ctx, &run)?,
    }
    Ok(run.path)
}

fn required(value: &str, key: &str) -> CliResult<PathBuf> {
    if value.is_empty() {
        return Err(CliError::Missing {
            what: format!("`{key}` (not set)"),
            path: PathBuf::new(),
        });
    }
    let p = PathBuf::from(value);
    if !p.exists() {
        return Err(CliError::Missing {
            what: format!("`{key}`"),
            path: p,
        });
    }
    Ok(p)
}

struct Context<'a> {
    cfg: &'a RunConfig,
    vocab: Vocab,
    model: Option<ToyVlm<f32>>,
    vead: Option<VeadParams<f32>>,
}

impl<'a> Context<'a> {
    fn new(cmd: Command, cfg: &'a RunConfig) -> CliResult<Self> {
        let needs_model = !matches!(cmd, Command::Pretrain | Command::GenData);
        let needs_vead = matches!(cmd, Command::EditEval | Command::Attribute(AttributeMode::PostEdit));
        let mut model = None;
        if needs_model || (cmd == Command::GenData && !cfg.paths.pretrain_ckpt.is_empty()) {
            let p = required(&cfg.paths.pretrain_ckpt, "paths.pretrain_ckpt")?;
            model = Some(ToyVlm::<f32>::load(&p)?);
        }
        let vead = if needs_vead {
            let p = required(&cfg.paths.vead_ckpt, "paths.vead_ckpt")?;
            let m = model.as_ref().expect("model loaded");
            Some(VeadParams::<f32>::load(&p, &m.config)?)
        } else {
            None
        };
        if needs_model && !cfg.paths.data_dir.is_empty() && cmd != Command::Attribute(AttributeMode::Standard) {
            let dir = required(&cfg.paths.data_dir, "paths.data_dir")?;
            for f in ["edit_train.jsonl", "edit_eval.jsonl"] {
                required(&dir.join(f).to_string_lossy(), "paths.data_dir")?;
            }
        }
        Ok(Self {
            cfg,
            vocab: Vocab::standard(),
            model,
            vead,
        })
    }

    fn model(&self) -> &ToyVlm<f32> {
        self.model.as_ref().expect("checked in Context::new")
    }

    fn grid(&self) -> (usize, usize) {
        let c = self.model.as_ref().map_or(&self.cfg.model, |m| &m.config);
        (c.grid_rows, c.grid_cols)
    }

    fn cases(&self) -> CliResult<(Vec<EditCase>, Vec<EditCase>)> {
        let cfg = self.cfg;
        if cfg.paths.data_dir.is_empty() {
            info!("generating {} + {} edit cases", cfg.data.n_train, cfg.data.n_eval);
            return Ok(edit_splits(
                self.model(),
                &self.vocab,
                cfg.seed,
                cfg.data.n_train,
                cfg.data.n_eval,
                cfg.data.counterfactual,
            )?);
        }
        let dir = Path::new(&cfg.paths.data_dir);
        let load = |f: &str| -> CliResult<Vec<EditCase>> {
            let recs: Vec<Record> = read_jsonl(&dir.join(f))?;
            Ok(cases_from_records(&recs)?)
        };
        Ok((load("edit_train.jsonl")?, load("edit_eval.jsonl")?))
    }

    fn calibration_samples(&self) -> Vec<QaSample> {
        let (r, c) = self.grid();
        gen_vqa_set(self.cfg.seed ^ CALIBRATION_STREAM, self.cfg.attribution.samples, r, c)
    }

    fn calibration(&self, run: &RunDir) -> CliResult<Calibration> {
        let (_, cal) = calibrate(
            self.model(),
            &self.vocab,
            &self.calibration_samples(),
            self.cfg.attribution.fraction,
        )?;
        run.write_json("calibration.json", &cal)?;
        info!("high-contribution layers {:?}", cal.l_h);
        Ok(cal)
    }

    /// Train config with `l_h` from the config or, when empty, the calibration.
    fn train_config(&self, run: &RunDir) -> CliResult<TrainConfig> {
        let l_h = if self.cfg.train.l_h.is_empty() {
            self.calibration(run)?.l_h
        } else {
            self.cfg.train.l_h.clone()
        };
        Ok(self.cfg.train.to_train_config(l_h, self.cfg.attribution.perturbation()))
    }
}

fn gen_data(ctx: &Context, run: &RunDir) -> CliResult<()> {
    let cfg = ctx.cfg;
    let (r, c) = ctx.grid();
    let vqa = gen_vqa_set(cfg.seed, cfg.data.vqa_samples, r, c);
    write_jsonl(&run.file("vqa.jsonl"), &pretrain_records(&vqa))?;
    let mut counts = vec![("vqa".to_string(), vqa.len())];
    if ctx.model.is_some() {
        let (train, eval) = ctx.cases()?;
        write_jsonl(&run.file("edit_train.jsonl"), &case_records(&train))?;
        write_jsonl(&run.file("edit_eval.jsonl"), &case_records(&eval))?;
        counts.push(("edit_train".into(), train.len()));
        counts.push(("edit_eval".into(), eval.len()));
    } else {
        info!("paths.pretrain_ckpt not set; edit cases need a base model and are skipped");
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        counts,
        vocabulary: ctx.vocab.words().to_vec(),
    };
    write_manifest(&run.file("manifest.json"), &manifest)?;
    Ok(())
}

fn pretrain_cmd(ctx: &Context, run: &RunDir) -> CliResult<()> {
    let mut lines = String::new();
    let (model, report) = pretrain(&ctx.cfg.model, &ctx.cfg.pretrain, &ctx.vocab, |l| {
        if let Some(a) = l.heldout_accuracy {
            info!("step {} loss {:.4} held-out accuracy {:.3}", l.step, l.loss, a);
        }
        lines.push_str(&serde_json::to_string(l).expect("plain struct"));
        lines.push('\n');
    })?;
    run.write("pretrain_log.jsonl", &lines)?;
    model.save(&run.file("model.ckpt"))?;
    #[derive(Serialize)]
    struct Summary {
        steps: usize,
        final_loss: f64,
        heldout_accuracy: f64,
        text_accuracy: f64,
    }
    run.write_json(
        "pretrain_report.json",
        &Summary {
            steps: report.steps,
            final_loss: report.final_loss,
            heldout_accuracy: report.heldout_accuracy,
            text_accuracy: report.text_accuracy,
        },
    )?;
    info!(
        "held-out accuracy {:.4} after {} steps",
        report.heldout_accuracy, report.steps
    );
    Ok(())
}

fn heatmaps(
    model: &ToyVlm<f32>,
    trace: &HiddenTrace<f32>,
    spec: &PerturbationSpec,
    dir: &Path,
    prefix: &str,
) -> CliResult<()> {
    let (r, c) = (model.config.grid_rows, model.config.grid_cols);
    for l in 1..=model.config.layers {
        let map = visual_contribution(model, trace, l, trace.last(), spec)?;
        render_heatmap(&map.values, r, c, &dir.join(format!("{prefix}l{l:02}.pgm")))?;
    }
    Ok(())
}

fn attribute(ctx: &Context, run: &RunDir, mode: AttributeMode) -> CliResult<()> {
    let model = ctx.model();
    let spec = ctx.cfg.attribution.perturbation();
    let idx = ctx.cfg.attribution.index;
    match mode {
        AttributeMode::Standard => {
            let samples = ctx.calibration_samples();
            let (set, cal) = calibrate(model, &ctx.vocab, &samples, ctx.cfg.attribution.fraction)?;
            run.write_json("calibration.json", &cal)?;
            let s = samples
                .get(idx)
                .ok_or_else(|| CliError::Config(format!("attribution.index {idx} >= {}", samples.len())))?;
            run.write_json("sample.json", s)?;
            write_bar_data(&set[idx], &run.file("bars.csv"))?;
            let (trace, _) = prompt_trace(model, &ctx.vocab, s)?;
            heatmaps(model, &trace, &spec, &run.path, "heatmap_")?;
            info!(
                "deep/shallow mean contribution {:.4} / {:.4}",
                cal.deep_mean, cal.shallow_mean
            );
        }
        AttributeMode::WrongToken => {
            let samples = ctx.calibration_samples();
            let summary = control_summary(model, &ctx.vocab, &samples)?;
            run.write_json("control.json", &summary)?;
            let s = samples
                .get(idx)
                .ok_or_else(|| CliError::Config(format!("attribution.index {idx} >= {}", samples.len())))?;
            let wrong = unrelated_answers(&ctx.vocab, &samples)?[idx];
            let (trace, key) = prompt_trace(model, &ctx.vocab, s)?;
            let r = control_attribution(model, &trace, key, wrong)?;
            write_bar_data(&r.correct, &run.file("bars.csv"))?;
            write_bar_data(&r.wrong, &run.file("bars_wrong.csv"))?;
            info!(
                "correct/wrong mean contribution {:.4} / {:.4} (ratio {:.2})",
                summary.mean_correct, summary.mean_wrong, summary.ratio
            );
        }
        AttributeMode::PostEdit => post_edit(ctx, run, idx, &spec)?,
    }
    Ok(())
}

fn post_edit(ctx: &Context, run: &RunDir, idx: usize, spec: &PerturbationSpec) -> CliResult<()> {
    let model = ctx.model();
    let vead = ctx.vead.as_ref().expect("checked in Context::new");
    let (cases, _) = edit_splits(model, &ctx.vocab, ctx.cfg.seed, idx + 1, 1, true)?;
    let case = &cases[idx];
    run.write_json("case.json", case)?;
    let signal = compute_edit_signal(
        model,
        case.edit.image.as_ref(),
        &case.edit.prompt_ids(&ctx.vocab)?,
        &case.edit.answer_ids(&ctx.vocab)?,
        vead.l_e,
        &format!("case {}", case.id),
    )?;
    #[derive(Serialize)]
    struct Prediction {
        role: &'static str,
        before: String,
        after: String,
    }
    let mut preds = Vec::new();
    let mg = case.mg_sample();
    for (role, s) in [("rel", &case.edit), ("mg", &mg), ("ml", &case.ml)] {
        let emb = model.embed(s.image.as_ref(), &s.prompt_ids(&ctx.vocab)?)?;
        let before = model.forward_trace(&emb)?;
        let after = forward_with_adapter(model, &emb, vead, &signal)?;
        heatmaps(model, &before, spec, &run.path, &format!("be_{role}_"))?;
        heatmaps(model, &after, spec, &run.path, &format!("ae_{role}_"))?;
        let word = |t: &HiddenTrace<f32>| ctx.vocab.word(argmax(t.logits.row(t.last()))).map(String::from);
        preds.push(Prediction {
            role,
            before: word(&before)?,
            after: word(&after)?,
        });
    }
    run.write_json("predictions.json", &preds)?;
    Ok(())
}

fn train_vead(ctx: &Context, run: &RunDir) -> CliResult<()> {
    let (train, _) = ctx.cases()?;
    let tc = ctx.train_config(run)?;
    let outcome = train_adapter(
        ctx.model(),
        &ctx.vocab,
        &train,
        &ctx.cfg.vead,
        &tc,
        Ablation::default(),
        Some(&run.path),
        |r| {
            if r.iter % 500 == 0 {
                info!(
                    "iter {} total {:.4} rel {:.4} gen {:.4} loc {:.4}",
                    r.iter, r.total, r.rel, r.gen, r.loc
                );
            }
        },
    )?;
    outcome.vead.save(&run.file("vead.ckpt"))?;
    run.write_json(
        "train_summary.json",
        &serde_json::json!({
            "l_h": tc.l_h,
            "selected": outcome.selected,
            "checkpoints": outcome.checkpoints,
        }),
    )?;
    Ok(())
}

fn write_reports(run: &RunDir, reports: &[(String, MetricsReport)], table: &str) -> CliResult<()> {
    for (label, r) in reports {
        r.write(&run.file(&format!("metrics_{label}.json")))?;
        info!(
            "{label}: rel {:.3} t_gen {:.3} m_gen {:.3} t_loc {:.3} m_loc {:.3} avg {:.3}",
            r.rel, r.t_gen, r.m_gen, r.t_loc, r.m_loc, r.average
        );
    }
    let rows: Vec<(String, &MetricsReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    write_table(&run.file(table), &rows)?;
    Ok(())
}

fn edit_eval(ctx: &Context, run: &RunDir) -> CliResult<()> {
    let model = ctx.model();
    let vead = ctx.vead.clone().expect("checked in Context::new");
    let (_, eval) = ctx.cases()?;
    let snapshot = serde_json::json!({ "vead_ckpt": ctx.cfg.paths.vead_ckpt, "l_e": vead.l_e, "d_a": vead.d_a });
    let (on, off) = intensity_contrast(model, &vead, &ctx.vocab, &eval)?;
    let editor = VeadEditor {
        params: vead,
        tag: "vead".into(),
    };
    let ft = FtEditor {
        config: ctx.cfg.baseline.clone(),
    };
    let reports = vec![
        (
            "none".to_string(),
            evaluate(model, &NoEdit, &ctx.vocab, &eval, snapshot.clone())?,
        ),
        (
            "vead".to_string(),
            evaluate(model, &editor, &ctx.vocab, &eval, snapshot)?,
        ),
        (
            "ft-l".to_string(),
            evaluate(
                model,
                &ft,
                &ctx.vocab,
                &eval,
                serde_json::to_value(&ctx.cfg.baseline).map_err(visedit_core::Error::from)?,
            )?,
        ),
    ];
    write_reports(run, &reports, "table.csv")?;
    run.write_json("intensity.json", &serde_json::json!({ "edit": on, "locality": off }))?;
    Ok(())
}

fn with_iters(tc: &TrainConfig, iters: usize) -> TrainConfig {
    let mut tc = tc.clone();
    if iters > 0 {
        tc.max_iters = iters;
    }
    tc
}

fn sweep(ctx: &Context, run: &RunDir) -> CliResult<()> {
    let model = ctx.model();
    let layers = if ctx.cfg.sweep.layers.is_empty() {
        sweep_layers(model.config.layers)
    } else {
        ctx.cfg.sweep.layers.clone()
    };
    let (train, eval) = ctx.cases()?;
    let tc = with_iters(&ctx.train_config(run)?, ctx.cfg.sweep.max_iters);
    let results = layer_sweep(model, &ctx.vocab, &train, &eval, &layers, &ctx.cfg.vead, &tc)?;
    let best = results
        .iter()
        .max_by(|a, b| a.1.average.total_cmp(&b.1.average))
        .map(|(l, _)| *l);
    let reports: Vec<(String, MetricsReport)> = results.into_iter().map(|(l, r)| (format!("l{l:02}"), r)).collect();
    write_reports(run, &reports, "sweep.csv")?;
    run.write_json("sweep.json", &serde_json::json!({ "layers": layers, "best": best }))?;
    Ok(())
}

fn ablate(ctx: &Context, run: &RunDir) -> CliResult<()> {
    let (train, eval) = ctx.cases()?;
    let tc = with_iters(&ctx.train_config(run)?, ctx.cfg.ablate.max_iters);
    let setup: &AdapterSetup = &ctx.cfg.vead;
    let mut reports = Vec::new();
    for v in &ctx.cfg.ablate.variants {
        let a = parse_ablation(v)?;
        info!("ablation {}", a.tag());
        let r = run_ablation(ctx.model(), &ctx.vocab, &train, &eval, setup, &tc, a)?;
        reports.push((a.tag().replace(',', "_"), r));
    }
    write_reports(run, &reports, "ablation.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_tags_round_trip() {
        for a in [
            Ablation::default(),
            Ablation {
                drop_im_down: true,
                ..Default::default()
            },
            Ablation {
                drop_im: true,
                drop_ca: true,
                ..Default::default()
            },
        ] {
            assert_eq!(parse_ablation(&a.tag()).unwrap(), a);
        }
        assert!(parse_ablation("-XY").is_err());
    }
}
