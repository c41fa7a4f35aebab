use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use patchdiff::attack::{AttackKind, Defense, NoDefense};
use patchdiff::eval::{
    emit_outputs, emit_triptychs, run_ablation, sweep_is_consistent, sweep_tstar, AblationKind, AttackMode, AttackedSet,
    Experiment, ResultTable,
};
use patchdiff::io::{save_heatmap_png, save_mask_png, save_png};
use patchdiff::pipeline::{DefenseKind, PatchDefense, Prompts};
use patchdiff::prompt::{LossWeights, PromptEmbedding};
use patchdiff::{Config, RngStream};

#[derive(Parser)]
#[command(name = "patchdiff", version, about = "Diffusion-based adversarial patch localization and restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for attacks, defense noise, tuning and subset selection.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for cached model checkpoints.
    #[arg(long, default_value = "cache")]
    cache: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PromptArgs {
    /// Tuned localization prompt file; manual prompts are used otherwise.
    #[arg(long, requires = "prompt_r")]
    prompt_l: Option<PathBuf>,
    /// Tuned restoration prompt file.
    #[arg(long, requires = "prompt_l")]
    prompt_r: Option<PathBuf>,
    /// Use empty prompts for both stages.
    #[arg(long, conflicts_with_all = ["prompt_l", "prompt_r"])]
    empty_prompts: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load from cache) the toy denoiser and classifier.
    TrainToy {
        #[command(flatten)]
        common: Common,
    },
    /// Attack evaluation images and save the patched images.
    Attack {
        #[command(flatten)]
        common: Common,
        /// advp or lavan.
        #[arg(long, default_value = "advp")]
        attack: String,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run the defense on attacked images and save triptychs and masks.
    Defend {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long, default_value = "aap-inpaint")]
        defense: String,
        #[arg(long, default_value = "advp")]
        attack: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Few-shot prompt tuning.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "advp")]
        attack: String,
    },
    /// Clean and robust accuracy for every defense/attack pair.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        prompts: PromptArgs,
        /// Comma-separated defenses.
        #[arg(long, default_value = "undefended,aap-zero-fill,aap-inpaint")]
        defenses: String,
        /// Comma-separated attacks; a `bpda-` prefix makes an attack adaptive.
        #[arg(long, default_value = "advp,lavan")]
        attacks: String,
        #[arg(long)]
        n: Option<usize>,
        /// Triptychs per defense/attack pair.
        #[arg(long, default_value_t = 0)]
        triptychs: usize,
    },
    /// Ablation runners.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// loss, patch_size, no_restore or prompt_form.
        #[arg(long)]
        kind: String,
        /// Comma-separated grid; the kind's default grid when omitted.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value = "advp")]
        attack: String,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Global purification residuals across noise ratios versus the localized pipeline.
    SweepTstar {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0.05,0.1,0.15,0.2,0.3,0.4,0.5,0.6,0.8")]
        grid: String,
        #[arg(long, default_value = "advp")]
        attack: String,
        #[arg(long, default_value_t = 32)]
        n: usize,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let cfg = match &common.config {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::toy(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn prepare(common: &Common) -> Result<Experiment> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&common.cache)?;
    std::fs::create_dir_all(&common.out)?;
    Ok(Experiment::prepare(&cfg, Some(&common.cache))?)
}

fn prompts_for(exp: &Experiment, args: &PromptArgs) -> Result<Prompts> {
    if args.empty_prompts {
        return Ok(Experiment::empty_prompts());
    }
    match (&args.prompt_l, &args.prompt_r) {
        (Some(l), Some(r)) => Ok(exp.tuned_prompts(&PromptEmbedding::load(l)?, &PromptEmbedding::load(r)?)?),
        _ => Ok(exp.manual_prompts()?),
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

fn attacked_for(exp: &Experiment, ids: &[usize], mode: AttackMode, defense: &PatchDefense) -> Result<AttackedSet> {
    let area = exp.config.attack.area_frac;
    let adaptive = matches!(mode, AttackMode::Adaptive(_));
    Ok(exp.attacked(ids, mode, area, adaptive.then_some(defense as &dyn Defense))?)
}

fn save_attacked(set: &AttackedSet, seed: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for it in &set.items {
        let name = format!("{:05}.png", it.id);
        save_png(&it.adv, &dir.join(&name))?;
        manifest.push(serde_json::json!({
            "image_id": it.id,
            "label": it.label,
            "attack": set.attack,
            "seed": seed,
            "file": name,
            "patch": { "top": it.spec.top, "left": it.spec.left, "side": it.spec.side },
        }));
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy { common } => {
            let exp = prepare(&common)?;
            let val = &exp.splits.val;
            let acc = exp.classifier.accuracy(&val.images, &val.labels)?;
            println!("classifier validation accuracy {:.1}%", 100.0 * acc);
            println!("checkpoints in {}", common.cache.display());
        }
        Command::Attack { common, attack, n } => {
            let exp = prepare(&common)?;
            let mode = AttackMode::NonAdaptive(AttackKind::parse(&attack)?);
            let ids = exp.eval_subset(n.unwrap_or(exp.config.eval.n_images))?;
            let set = exp.attacked(&ids, mode, exp.config.attack.area_frac, None)?;
            let fooled = set
                .items
                .iter()
                .zip(exp.classifier.predict_batch(&set.items.iter().map(|i| i.adv.clone()).collect::<Vec<_>>())?)
                .filter(|(it, p)| *p != it.label)
                .count();
            let dir = common.out.join(format!("attacked_{}", set.attack));
            save_attacked(&set, exp.config.attack.seed, &dir)?;
            println!("{}: {fooled}/{} misclassified, saved to {}", set.attack, set.items.len(), dir.display());
        }
        Command::Defend { common, prompts, defense, attack, n } => {
            let exp = prepare(&common)?;
            let d = exp.defense(DefenseKind::parse(&defense)?, prompts_for(&exp, &prompts)?)?;
            let ids = exp.eval_subset(n)?;
            let set = attacked_for(&exp, &ids, AttackMode::parse(&attack)?, &d)?;
            let dir = common.out.join("defend");
            emit_triptychs(&d, &set, exp.config.eval.seed, &dir, n)?;
            let root = RngStream::new(exp.config.eval.seed, 0).named("defend");
            for it in &set.items {
                let trace = d.run(&it.adv, &root.named("adv").substream(it.id as u64))?;
                if let Some(soft) = &trace.soft {
                    save_heatmap_png(soft, &dir.join(format!("{:05}_soft.png", it.id)))?;
                }
                if let Some(r) = &trace.refined {
                    save_mask_png(&r.mask, &dir.join(format!("{:05}_mask.png", it.id)))?;
                }
            }
            println!("wrote {} panels to {}", set.items.len(), dir.display());
        }
        Command::Tune { common, attack } => {
            let exp = prepare(&common)?;
            let shots = exp.few_shot(AttackKind::parse(&attack)?, exp.config.tuning.shots)?;
            let (l, r, trace) = exp.tune(&shots, LossWeights::from(&exp.config.tuning))?;
            l.save(&common.out.join("prompt_l.safetensors"))?;
            r.save(&common.out.join("prompt_r.safetensors"))?;
            std::fs::write(common.out.join("tuning_trace.json"), serde_json::to_string_pretty(&trace)?)?;
            if let (Some(a), Some(b)) = (trace.epoch_means.first(), trace.epoch_means.last()) {
                println!("tuning loss {a:.4} -> {b:.4} over {} epochs", trace.epoch_means.len());
            }
        }
        Command::Eval { common, prompts, defenses, attacks, n, triptychs } => {
            let exp = prepare(&common)?;
            let n = n.unwrap_or(exp.config.eval.n_images);
            let ids = exp.eval_subset(n)?;
            let prompts = prompts_for(&exp, &prompts)?;
            let mut table = ResultTable::new();
            for a in split_list(&attacks) {
                let mode = AttackMode::parse(&a)?;
                let mut shared: Option<AttackedSet> = None;
                for dname in split_list(&defenses) {
                    let kind = DefenseKind::parse(&dname)?;
                    let d = exp.defense(kind, prompts.clone())?;
                    let set = match mode {
                        AttackMode::Adaptive(_) if kind != DefenseKind::Undefended => attacked_for(&exp, &ids, mode, &d)?,
                        _ => {
                            if shared.is_none() {
                                shared = Some(exp.attacked(&ids, AttackMode::NonAdaptive(mode.kind()), exp.config.attack.area_frac, None)?);
                            }
                            let mut s = shared.clone().expect("built above");
                            s.attack = mode.name();
                            s
                        }
                    };
                    let (rec, verdicts) = if kind == DefenseKind::Undefended {
                        exp.evaluate(&NoDefense, &set)?
                    } else {
                        exp.evaluate(&d, &set)?
                    };
                    log::info!("{} / {}: clean {:.1} robust {:.1}", rec.defense, rec.attack, rec.clean_acc, rec.robust_acc);
                    if triptychs > 0 && kind != DefenseKind::Undefended {
                        emit_triptychs(&d, &set, exp.config.eval.seed, &common.out.join("triptychs"), triptychs)?;
                    }
                    table.push(rec, verdicts)?;
                }
            }
            emit_outputs(&table, &common.out)?;
            for r in &table.records {
                println!("{:<16} {:<12} clean {:>5.1}  robust {:>5.1}  n={}", r.defense, r.attack, r.clean_acc, r.robust_acc, r.n);
            }
        }
        Command::Ablate { common, kind, grid, attack, n } => {
            let exp = prepare(&common)?;
            let kind = AblationKind::parse(&kind)?;
            let grid = grid.map(|g| split_list(&g)).unwrap_or_else(|| kind.default_grid());
            let n = n.unwrap_or(exp.config.eval.n_images);
            let table = run_ablation(kind, &grid, &exp, AttackKind::parse(&attack)?, n)?;
            emit_outputs(&table, &common.out)?;
            for r in &table.records {
                println!("{:<28} {:<16} clean {:>5.1}  robust {:>5.1}", r.defense, r.attack, r.clean_acc, r.robust_acc);
            }
        }
        Command::SweepTstar { common, grid, attack, n } => {
            let exp = prepare(&common)?;
            let grid: Vec<f64> = split_list(&grid)
                .iter()
                .map(|s| s.parse::<f64>().with_context(|| format!("bad grid value `{s}`")))
                .collect::<Result<_>>()?;
            let ids = exp.eval_subset(n)?;
            let set = exp.attacked(&ids, AttackMode::NonAdaptive(AttackKind::parse(&attack)?), exp.config.attack.area_frac, None)?;
            let d = exp.defense(DefenseKind::AapInpaint, exp.manual_prompts()?)?;
            let report = sweep_tstar(&set, &grid, &d, &exp.config.defense, exp.config.eval.seed)?;
            if !sweep_is_consistent(&report) {
                bail!("sweep report failed its consistency check");
            }
            std::fs::write(common.out.join("sweep_tstar.json"), serde_json::to_string_pretty(&report)?)?;
            println!("{:>6} {:>9} {:>11} {:>9}  both", "t*", "patch", "background", "l2");
            for p in &report.points {
                println!(
                    "{:>6.2} {:>9.4} {:>11.4} {:>9.4}  {}",
                    p.t_star,
                    p.mean.patch,
                    p.mean.background,
                    p.mean.global_l2,
                    p.flags.both()
                );
            }
            println!(
                "pipeline: both conditions on {:.0}% of images (literal), {:.0}% (background floored)",
                100.0 * report.pipeline.both_literal,
                100.0 * report.pipeline.both_floored
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
