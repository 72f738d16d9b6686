use std::path::{Path, PathBuf};

use bridge_core::container::{encode_scenes, manifest};
use bridge_core::metrics::{evaluate as eval_scenes, features_csv, EvalResult};
use bridge_core::report::{render_ablation_table, render_arm_table, render_run};
use bridge_core::synth::{gen_dataset, Scene};
use bridge_core::trainer::{
    ablate_weights, encode_dcycle, prepare_benchmark, run_arm, trace_csv, AblationReport, Arm, Checkpoint, RunReport,
    TrainConfig, WeightMode,
};
use bridge_core::CoreError;
use serde::Serialize;

use crate::error::CliError;
use crate::output::Artifacts;

pub fn load_config(spec: &str, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg = if spec == "default" {
        TrainConfig::default()
    } else {
        TrainConfig::load(Path::new(spec)).map_err(CliError::config)?
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(CliError::config)?;
    Ok(cfg)
}

fn base(cfg: &TrainConfig) -> Artifacts {
    let mut a = Artifacts::default();
    a.add("config.toml", cfg.to_toml());
    a
}

fn eval_features(model: &bridge_core::detector::DetectorModel, cfg: &TrainConfig) -> Result<String, CliError> {
    let data = gen_dataset(cfg.seed, &cfg.data)?;
    let scenes: Vec<Scene> = data.eval_source.into_iter().chain(data.eval_target).collect();
    Ok(features_csv(model, &scenes)?)
}

pub fn generate_data(cfg: &TrainConfig, out: &Path) -> Result<(), CliError> {
    let bench = prepare_benchmark(cfg)?;
    let d = &bench.data;
    let mut a = base(cfg);
    let splits: [(&str, &[Scene]); 5] = [
        ("train_S", &d.train_source),
        ("train_T", &d.train_target),
        ("eval_T", &d.eval_target),
        ("eval_S", &d.eval_source),
        ("train_F", &bench.intermediate),
    ];
    for (name, scenes) in splits {
        a.add(format!("{name}.bin"), encode_scenes(scenes));
    }
    let header = [
        ("config_hash", cfg.hash()),
        ("seed", cfg.seed.to_string()),
        ("translator.slope", bench.translator.slope.to_string()),
        ("translator.offset", format!("{:?}", bench.translator.offset)),
        ("translator.noise", bench.translator.noise.to_string()),
        ("dcycle.epoch_losses", format!("{:?}", bench.dcycle_losses)),
    ];
    a.add("dataset.manifest", manifest(&header, &splits));
    a.add("translator.json", serde_json::to_string_pretty(&bench.translator).expect("translator serializes"));
    a.add("dcycle.bin", encode_dcycle(&bench.dcycle));
    a.write(out, "generate-data", &cfg.hash(), Some(cfg.seed))
}

pub fn train(cfg: &TrainConfig, arm: Arm, out: &Path) -> Result<(), CliError> {
    let bench = prepare_benchmark(cfg)?;
    let run = match run_arm(arm, &bench, cfg) {
        Ok(run) => run,
        Err(CoreError::NonFiniteLoss {
            stage,
            iteration,
            detail,
            last_good,
        }) => {
            if let Some(ck) = last_good {
                let mut a = base(cfg);
                a.add("last_good.ckpt", ck.encode());
                a.write(out, "train", &cfg.hash(), Some(cfg.seed))?;
            }
            return Err(CliError::runtime(format!(
                "non-finite loss in {stage} at iteration {iteration}: {detail}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let mut a = base(cfg);
    a.add("report.json", run.report.to_json());
    a.add("report.txt", render_run(&run.report));
    a.add("trace.csv", trace_csv(&run.report.stages));
    a.add("checkpoint.ckpt", run.checkpoint.encode());
    a.add("dcycle.bin", encode_dcycle(&bench.dcycle));
    a.add("features.csv", eval_features(&run.checkpoint.model()?, cfg)?);
    a.write(out, "train", &cfg.hash(), Some(cfg.seed))
}

#[derive(Serialize)]
struct Evaluation<'a> {
    checkpoint_stage: &'a str,
    checkpoint_iteration: u64,
    checkpoint_config_hash: &'a str,
    eval_target: &'a EvalResult,
    eval_source: &'a EvalResult,
}

pub fn evaluate(cfg: &TrainConfig, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint).map_err(CliError::input)?;
    let model = ck.model().map_err(CliError::input)?;
    let data = gen_dataset(cfg.seed, &cfg.data)?;
    let t = eval_scenes(&model, &data.eval_target, &cfg.eval)?;
    let s = eval_scenes(&model, &data.eval_source, &cfg.eval)?;
    let ev = Evaluation {
        checkpoint_stage: &ck.stage,
        checkpoint_iteration: ck.iteration,
        checkpoint_config_hash: &ck.config_hash,
        eval_target: &t,
        eval_source: &s,
    };
    let mut text = format!(
        "checkpoint: stage {} iteration {} config {}\nAP protocol: {}\n",
        ck.stage, ck.iteration, ck.config_hash, t.protocol
    );
    for (split, e) in [("eval_T", &t), ("eval_S", &s)] {
        for c in &e.classes {
            text.push_str(&format!("{split} class {} AP {:.4}\n", c.class, c.ap));
        }
        text.push_str(&format!("{split} mAP {:.4}\n", e.map));
    }
    let scenes: Vec<Scene> = data.eval_source.into_iter().chain(data.eval_target).collect();
    let mut a = base(cfg);
    a.add("evaluation.json", serde_json::to_string_pretty(&ev).expect("evaluation serializes"));
    a.add("evaluation.txt", text);
    a.add("features.csv", features_csv(&model, &scenes)?);
    a.write(out, "evaluate", &cfg.hash(), Some(cfg.seed))
}

fn mode_dir(m: WeightMode) -> String {
    m.to_string().replace(':', "-")
}

pub fn ablate(cfg: &TrainConfig, out: &Path) -> Result<(), CliError> {
    let bench = prepare_benchmark(cfg)?;
    let (report, runs) = ablate_weights(&bench, cfg, &cfg.ablation_weights)?;
    let mut a = base(cfg);
    a.add("ablation.json", report.to_json());
    a.add("ablation.txt", render_ablation_table(std::slice::from_ref(&report)));
    for run in &runs {
        let dir = format!("runs/{}", mode_dir(run.report.config.weight_mode));
        a.add(format!("{dir}/report.json"), run.report.to_json());
        a.add(format!("{dir}/config.toml"), run.report.config.to_toml());
    }
    a.write(out, "ablate-weights", &cfg.hash(), Some(cfg.seed))
}

fn collect(path: &Path, found: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let meta = std::fs::metadata(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    if meta.is_file() {
        found.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    // per-mode runs of an ablation are summarized by its ablation.json
    let ablation_dir = entries.iter().any(|p| p.ends_with("ablation.json"));
    for p in entries {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if p.is_dir() {
            if ablation_dir && name == "runs" {
                continue;
            }
            collect(&p, found)?;
        } else if name == "report.json" || name == "ablation.json" {
            found.push(p);
        }
    }
    Ok(())
}

pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut files = Vec::new();
    for p in inputs {
        collect(p, &mut files)?;
    }
    let mut runs = Vec::new();
    let mut ablations = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| CliError::input(format!("{}: {e}", f.display())))?;
        if let Ok(r) = RunReport::from_json(&text) {
            runs.push(r);
        } else {
            let a = AblationReport::from_json(&text).map_err(|e| CliError::input(format!("{}: {e}", f.display())))?;
            ablations.push(a);
        }
    }
    if runs.is_empty() && ablations.is_empty() {
        return Err(CliError::input("no run or ablation reports found"));
    }
    let mut text = String::new();
    if !runs.is_empty() {
        text.push_str(&render_arm_table(&runs));
    }
    if !ablations.is_empty() {
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&render_ablation_table(&ablations));
    }
    print!("{text}");
    if let Some(dir) = out {
        let mut a = Artifacts::default();
        a.add("tables.txt", text);
        a.write(dir, "report", "", None)?;
    }
    Ok(())
}
