//! Experiment assembly, robust-accuracy evaluation, ablations, the noise-ratio
//! sweep and result files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{
    bpda_adaptive_attack, patch_attack, train_toy_classifier, AttackKind, Classifier, Defense, PatchSpec,
};
use crate::config::{config_hash, AttackConfig, Config, DefenseConfig};
use crate::data::{GratingSpec, ToyDataset};
use crate::diffusion::{diffpure_baseline, train_toy_denoiser, Conditioning, ToyDenoiser};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::io::{bar_chart, save_rgb, triptych};
use crate::pipeline::{DefenseKind, PatchDefense, Prompts};
use crate::prompt::{init_prompt, tune_prompts, FewShotItem, FewShotSet, LossWeights, PromptEmbedding, PromptInit, PromptRole, TuningTrace};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

/// Published numbers shipped for context.
pub const REFERENCE_VALUES: &str = include_str!("../assets/reference_values.json");

const FEWSHOT_POOL: usize = 64;

/// Training, validation and few-shot images, all generated from the data seed.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: ToyDataset,
    pub val: ToyDataset,
    pub fewshot: ToyDataset,
}

pub fn make_splits(cfg: &crate::config::DataConfig) -> Splits {
    let spec = GratingSpec::new(cfg.image_size, cfg.classes).with_layout(cfg.layout);
    let root = RngStream::new(cfg.seed, 0);
    Splits {
        train: spec.generate(cfg.train_images, &root.named("train")),
        val: spec.generate(cfg.val_images, &root.named("val")),
        fewshot: spec.generate(FEWSHOT_POOL, &root.named("fewshot")),
    }
}

/// First `n` images, in seeded-shuffle order, that `clf` classifies correctly.
pub fn select_eval_subset(dataset: &ToyDataset, clf: &Classifier, n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut RngStream::new(seed, 0).named("subset").generator());
    let mut picked = Vec::with_capacity(n);
    for chunk in order.chunks(64) {
        if picked.len() >= n {
            break;
        }
        let imgs: Vec<Image> = chunk.iter().map(|&i| dataset.images[i].clone()).collect();
        for (&i, p) in chunk.iter().zip(clf.predict_batch(&imgs)?) {
            if p == dataset.labels[i] && picked.len() < n {
                picked.push(i);
            }
        }
    }
    if picked.len() < n {
        return Err(Error::Data(format!("only {} correctly classified images, {n} requested", picked.len())));
    }
    Ok(picked)
}

/// How attacked inputs are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackMode {
    /// Patch optimized against the bare classifier.
    NonAdaptive(AttackKind),
    /// Patch optimized through the defense (BPDA with straight-through masks).
    Adaptive(AttackKind),
}

impl AttackMode {
    pub fn name(self) -> String {
        match self {
            AttackMode::NonAdaptive(k) => k.name().to_string(),
            AttackMode::Adaptive(k) => format!("bpda-{}", k.name()),
        }
    }

    pub fn kind(self) -> AttackKind {
        match self {
            AttackMode::NonAdaptive(k) | AttackMode::Adaptive(k) => k,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("bpda-") {
            Some(rest) => Ok(AttackMode::Adaptive(AttackKind::parse(rest)?)),
            None => Ok(AttackMode::NonAdaptive(AttackKind::parse(s)?)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackedItem {
    pub id: usize,
    pub label: usize,
    pub clean: Image,
    pub adv: Image,
    pub spec: PatchSpec,
}

#[derive(Debug, Clone)]
pub struct AttackedSet {
    pub attack: String,
    pub items: Vec<AttackedItem>,
}

/// Attacks every selected image. Adaptive modes need the defense under attack.
pub fn build_attacked_set(
    dataset: &ToyDataset,
    ids: &[usize],
    clf: &Classifier,
    mode: AttackMode,
    cfg: &AttackConfig,
    defense: Option<&dyn Defense>,
) -> Result<AttackedSet> {
    let root = RngStream::new(cfg.seed, 0).named(&mode.name());
    let mut items = Vec::with_capacity(ids.len());
    for &id in ids {
        let x = &dataset.images[id];
        let y = dataset.labels[id];
        let rng = root.substream(id as u64);
        let out = match mode {
            AttackMode::NonAdaptive(kind) => patch_attack(x, y, clf, kind, cfg, &rng)?,
            AttackMode::Adaptive(kind) => {
                let d = defense.ok_or_else(|| Error::Param("adaptive attack needs a defense".into()))?;
                bpda_adaptive_attack(x, y, clf, kind, d, cfg, &rng)?
            }
        };
        items.push(AttackedItem { id, label: y, clean: x.clone(), adv: out.image, spec: out.spec });
    }
    Ok(AttackedSet { attack: mode.name(), items })
}

/// One row of a result table. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub defense: String,
    pub attack: String,
    pub classifier: String,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Not written to CSV, which must be reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Fixed CSV column layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    defense: String,
    attack: String,
    classifier: String,
    clean_acc: f64,
    robust_acc: f64,
    n: usize,
    seed: u64,
    config_hash: String,
}

pub const CSV_HEADER: &str = "defense,attack,classifier,clean_acc,robust_acc,n,seed,config_hash";

/// Outcome for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageVerdict {
    pub defense: String,
    pub attack: String,
    pub image_id: usize,
    pub label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub clean_correct: bool,
    pub robust_correct: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TableMeta {
    pub backend: String,
    pub created: Option<String>,
    pub git_hash: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub meta: TableMeta,
    pub records: Vec<EvalRecord>,
    #[serde(skip)]
    pub verdicts: Vec<ImageVerdict>,
}

impl ResultTable {
    pub fn new() -> Self {
        Self { meta: TableMeta { backend: "toy".into(), ..TableMeta::default() }, ..Self::default() }
    }

    /// Appends a record; `(defense, attack, classifier)` must be unique.
    pub fn push(&mut self, record: EvalRecord, verdicts: Vec<ImageVerdict>) -> Result<()> {
        if self.records.iter().any(|r| r.defense == record.defense && r.attack == record.attack && r.classifier == record.classifier) {
            return Err(Error::Data(format!("duplicate row {}/{}/{}", record.defense, record.attack, record.classifier)));
        }
        self.records.push(record);
        self.verdicts.extend(verdicts);
        Ok(())
    }

    pub fn extend(&mut self, other: ResultTable) -> Result<()> {
        let mut by_key: BTreeMap<(String, String), Vec<ImageVerdict>> = BTreeMap::new();
        for v in other.verdicts {
            by_key.entry((v.defense.clone(), v.attack.clone())).or_default().push(v);
        }
        for r in other.records {
            let v = by_key.remove(&(r.defense.clone(), r.attack.clone())).unwrap_or_default();
            self.push(r, v)?;
        }
        Ok(())
    }
}

fn pct(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

/// Clean and robust accuracy of `clf` behind `defense` on an attacked set.
/// Each image draws defense noise from substreams keyed by its id.
pub fn evaluate(
    defense: &dyn Defense,
    set: &AttackedSet,
    clf: &Classifier,
    classifier_name: &str,
    seed: u64,
    config_hash: &str,
) -> Result<(EvalRecord, Vec<ImageVerdict>)> {
    if set.items.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let start = Instant::now();
    let root = RngStream::new(seed, 0).named("defend");
    let name = defense.name();
    let mut verdicts = Vec::with_capacity(set.items.len());
    for it in &set.items {
        let clean_out = defense.defend(&it.clean, &root.named("clean").substream(it.id as u64))?;
        let adv_out = defense.defend(&it.adv, &root.named("adv").substream(it.id as u64))?;
        let preds = clf.predict_batch(&[clean_out, adv_out])?;
        verdicts.push(ImageVerdict {
            defense: name.clone(),
            attack: set.attack.clone(),
            image_id: it.id,
            label: it.label,
            clean_pred: preds[0],
            adv_pred: preds[1],
            clean_correct: preds[0] == it.label,
            robust_correct: preds[1] == it.label,
        });
    }
    let record = record_from_verdicts(&name, &set.attack, classifier_name, &verdicts, seed, config_hash);
    Ok((EvalRecord { wall_time_s: Some(start.elapsed().as_secs_f64()), ..record }, verdicts))
}

fn record_from_verdicts(defense: &str, attack: &str, classifier: &str, v: &[ImageVerdict], seed: u64, hash: &str) -> EvalRecord {
    let n = v.len();
    EvalRecord {
        defense: defense.into(),
        attack: attack.into(),
        classifier: classifier.into(),
        clean_acc: pct(v.iter().filter(|x| x.clean_correct).count(), n),
        robust_acc: pct(v.iter().filter(|x| x.robust_correct).count(), n),
        n,
        seed,
        config_hash: hash.into(),
        wall_time_s: None,
    }
}

/// Recomputes `(defense, attack) -> (clean_acc, robust_acc, n)` from verdicts.
pub fn recount(verdicts: &[ImageVerdict]) -> BTreeMap<(String, String), (f64, f64, usize)> {
    let mut groups: BTreeMap<(String, String), Vec<&ImageVerdict>> = BTreeMap::new();
    for v in verdicts {
        groups.entry((v.defense.clone(), v.attack.clone())).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(k, vs)| {
            let n = vs.len();
            let c = vs.iter().filter(|v| v.label == v.clean_pred).count();
            let r = vs.iter().filter(|v| v.label == v.adv_pred).count();
            (k, (pct(c, n), pct(r, n), n))
        })
        .collect()
}

pub fn write_csv(table: &ResultTable, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in &table.records {
        w.serialize(CsvRow {
            defense: r.defense.clone(),
            attack: r.attack.clone(),
            classifier: r.classifier.clone(),
            clean_acc: r.clean_acc,
            robust_acc: r.robust_acc,
            n: r.n,
            seed: r.seed,
            config_hash: r.config_hash.clone(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(EvalRecord {
                defense: row.defense,
                attack: row.attack,
                classifier: row.classifier,
                clean_acc: row.clean_acc,
                robust_acc: row.robust_acc,
                n: row.n,
                seed: row.seed,
                config_hash: row.config_hash,
                wall_time_s: None,
            })
        })
        .collect()
}

pub fn write_verdicts(verdicts: &[ImageVerdict], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for v in verdicts {
        w.serialize(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_verdicts(path: &Path) -> Result<Vec<ImageVerdict>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Writes `results.csv`, `results.json`, `verdicts.csv`, `reference_values.json`
/// and, for non-empty tables, `robust_acc.png` (one group per attack, one bar
/// per defense in row order).
pub fn emit_outputs(table: &ResultTable, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join("results.csv");
    write_csv(table, &csv_path)?;
    written.push(csv_path);
    let json_path = dir.join("results.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(table)?)?;
    written.push(json_path);
    let v_path = dir.join("verdicts.csv");
    write_verdicts(&table.verdicts, &v_path)?;
    written.push(v_path);
    let ref_path = dir.join("reference_values.json");
    std::fs::write(&ref_path, REFERENCE_VALUES)?;
    written.push(ref_path);
    if !table.records.is_empty() {
        let mut attacks: Vec<&str> = Vec::new();
        for r in &table.records {
            if !attacks.contains(&r.attack.as_str()) {
                attacks.push(&r.attack);
            }
        }
        let groups: Vec<Vec<f64>> = attacks
            .iter()
            .map(|a| table.records.iter().filter(|r| r.attack == *a).map(|r| r.robust_acc).collect())
            .collect();
        let png = dir.join("robust_acc.png");
        save_rgb(&bar_chart(&groups), &png)?;
        written.push(png);
    }
    Ok(written)
}

/// Adversarial | mask | restored panels for a defended attacked set.
pub fn emit_triptychs(defense: &PatchDefense, set: &AttackedSet, seed: u64, dir: &Path, limit: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let root = RngStream::new(seed, 0).named("defend");
    let mut out = Vec::new();
    for it in set.items.iter().take(limit) {
        let trace = defense.run(&it.adv, &root.named("adv").substream(it.id as u64))?;
        let mask = trace.refined.as_ref().map(|r| r.mask.clone()).unwrap_or_else(|| BinaryMask::zeros(it.adv.height(), it.adv.width()));
        let path = dir.join(format!("{}_{}_{:05}.png", defense.kind.name(), set.attack, it.id));
        save_rgb(&triptych(&it.adv, &mask, &trace.output)?, &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Trained models and data for one configuration.
pub struct Experiment {
    pub config: Config,
    pub device: Device,
    pub splits: Splits,
    pub schedule: NoiseSchedule,
    pub denoiser: ToyDenoiser,
    pub classifier: Classifier,
    pub classifier_name: String,
}

impl Experiment {
    /// Trains the denoiser and classifier, or loads them from `cache` when a
    /// checkpoint for the same data/model settings exists there.
    pub fn prepare(config: &Config, cache: Option<&Path>) -> Result<Self> {
        config.defense.validate()?;
        let device = Device::Cpu;
        let splits = make_splits(&config.data);
        let schedule = config.schedule.build()?;
        let den_key = config_hash(&(&config.data, &config.schedule, &config.denoiser));
        let clf_key = config_hash(&(&config.data, &config.classifier));
        let den_path = cache.map(|d| d.join(format!("denoiser-{den_key}.safetensors")));
        let clf_path = cache.map(|d| d.join(format!("classifier-{clf_key}.safetensors")));
        let denoiser = match &den_path {
            Some(p) if p.exists() => ToyDenoiser::load(p, &device)?,
            _ => {
                log::info!("training toy denoiser ({} steps)", config.denoiser.train_steps);
                let (m, _) = train_toy_denoiser(&splits.train, &config.denoiser, &schedule, &device)?;
                if let Some(p) = &den_path {
                    m.save(p)?;
                }
                m
            }
        };
        let classifier = match &clf_path {
            Some(p) if p.exists() => Classifier::load(p, &device)?,
            _ => {
                log::info!("training toy classifier ({} epochs)", config.classifier.epochs);
                let (c, _) = train_toy_classifier(&splits.train, &config.classifier, &device)?;
                if let Some(p) = &clf_path {
                    c.save(p)?;
                }
                c
            }
        };
        Ok(Self { config: config.clone(), device, splits, schedule, denoiser, classifier, classifier_name: "toy-cnn".into() })
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }

    pub fn manual_prompts(&self) -> Result<Prompts> {
        Ok(Prompts {
            localize: self.denoiser.caption(&self.config.tuning.prompt_l)?,
            restore: self.denoiser.caption(&self.config.tuning.prompt_r)?,
        })
    }

    pub fn empty_prompts() -> Prompts {
        Prompts { localize: Conditioning::empty(), restore: Conditioning::empty() }
    }

    pub fn tuned_prompts(&self, l: &PromptEmbedding, r: &PromptEmbedding) -> Result<Prompts> {
        Ok(Prompts { localize: l.conditioning(&self.device)?, restore: r.conditioning(&self.device)? })
    }

    pub fn defense(&self, kind: DefenseKind, prompts: Prompts) -> Result<PatchDefense<'_>> {
        PatchDefense::new(kind, self.config.defense.clone(), &self.denoiser, &self.schedule, prompts)
    }

    pub fn eval_subset(&self, n: usize) -> Result<Vec<usize>> {
        select_eval_subset(&self.splits.val, &self.classifier, n, self.config.eval.seed)
    }

    pub fn attacked(&self, ids: &[usize], mode: AttackMode, area_frac: f64, defense: Option<&dyn Defense>) -> Result<AttackedSet> {
        let cfg = AttackConfig { area_frac, ..self.config.attack.clone() };
        build_attacked_set(&self.splits.val, ids, &self.classifier, mode, &cfg, defense)
    }

    /// `k` attacked shots from the few-shot pool, which is disjoint from the
    /// evaluation images.
    pub fn few_shot(&self, kind: AttackKind, k: usize) -> Result<FewShotSet> {
        let ids = select_eval_subset(&self.splits.fewshot, &self.classifier, k, self.config.tuning.seed)?;
        let cfg = AttackConfig { seed: self.config.tuning.seed, ..self.config.attack.clone() };
        let set = build_attacked_set(&self.splits.fewshot, &ids, &self.classifier, AttackMode::NonAdaptive(kind), &cfg, None)?;
        let (h, w) = (self.config.data.image_size, self.config.data.image_size);
        let items = set
            .items
            .into_iter()
            .map(|it| FewShotItem { mask: it.spec.mask(h, w), clean: it.clean, adv: it.adv, label: it.label })
            .collect();
        FewShotSet::new(kind.name().into(), items)
    }

    /// Initial prompts from the tuning section.
    pub fn initial_prompts(&self) -> Result<(PromptEmbedding, PromptEmbedding)> {
        self.initial_prompts_from(&self.config.tuning.init)
    }

    /// Initial prompts for `init` ("manual" or "random").
    pub fn initial_prompts_from(&self, init: &str) -> Result<(PromptEmbedding, PromptEmbedding)> {
        let t = &self.config.tuning;
        let rng = RngStream::new(t.seed, 0);
        let (src_l, src_r) = match init {
            "manual" => (PromptInit::Manual(t.prompt_l.clone()), PromptInit::Manual(t.prompt_r.clone())),
            "random" => (PromptInit::Random, PromptInit::Random),
            other => return Err(Error::Config(format!("unknown prompt init `{other}`"))),
        };
        let text = self.denoiser.text();
        Ok((
            init_prompt(&src_l, PromptRole::Localization, t.n_ctx, text, &rng.named("prompt_l"))?,
            init_prompt(&src_r, PromptRole::Restoration, t.n_ctx, text, &rng.named("prompt_r"))?,
        ))
    }

    pub fn tune(&self, set: &FewShotSet, weights: LossWeights) -> Result<(PromptEmbedding, PromptEmbedding, TuningTrace)> {
        self.tune_from(set, weights, self.initial_prompts()?)
    }

    pub fn tune_from(
        &self,
        set: &FewShotSet,
        weights: LossWeights,
        (l, r): (PromptEmbedding, PromptEmbedding),
    ) -> Result<(PromptEmbedding, PromptEmbedding, TuningTrace)> {
        let cfg = crate::config::TuningConfig { w_ce: weights.ce, w_l1: weights.l1, w_perceptual: weights.perceptual, ..self.config.tuning.clone() };
        tune_prompts(
            set,
            &l,
            &r,
            &cfg,
            &self.config.defense,
            &self.denoiser,
            &self.schedule,
            &self.classifier,
            &RngStream::new(cfg.seed, 0).named("tune"),
        )
    }

    pub fn evaluate(&self, defense: &dyn Defense, set: &AttackedSet) -> Result<(EvalRecord, Vec<ImageVerdict>)> {
        evaluate(defense, set, &self.classifier, &self.classifier_name, self.config.eval.seed, &self.hash())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    /// Toggle objective terms during tuning.
    Loss,
    /// Vary the patch area.
    PatchSize,
    /// Inpainting versus blanking the localized region.
    NoRestore,
    /// Empty, manual and tuned prompts.
    PromptForm,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(AblationKind::Loss),
            "patch_size" | "patch-size" => Ok(AblationKind::PatchSize),
            "no_restore" | "no-restore" => Ok(AblationKind::NoRestore),
            "prompt_form" | "prompt-form" => Ok(AblationKind::PromptForm),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let g: &[&str] = match self {
            AblationKind::Loss => &["ce", "ce+l1", "ce+perceptual", "ce+l1+perceptual"],
            AblationKind::PatchSize => &["0.005", "0.02", "0.05", "0.1", "0.15"],
            AblationKind::NoRestore => &["aap-zero-fill", "aap-inpaint"],
            AblationKind::PromptForm => &["empty", "manual", "tuned"],
        };
        g.iter().map(|s| s.to_string()).collect()
    }
}

/// Parses `"ce+l1"`-style term lists.
pub fn parse_loss_terms(s: &str) -> Result<LossWeights> {
    let mut w = LossWeights { ce: 0.0, l1: 0.0, perceptual: 0.0 };
    for term in s.split('+').map(str::trim) {
        match term {
            "ce" => w.ce = 1.0,
            "l1" => w.l1 = 1.0,
            "perceptual" | "d" => w.perceptual = 1.0,
            other => return Err(Error::Config(format!("unknown loss term `{other}`"))),
        }
    }
    Ok(w)
}

/// Wraps a defense under a different reported name.
struct Renamed<'a> {
    inner: &'a dyn Defense,
    name: String,
}

impl Defense for Renamed<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn defend(&self, x: &Image, rng: &RngStream) -> Result<Image> {
        self.inner.defend(x, rng)
    }
    fn surrogate(&self, x: &candle_core::Tensor, rng: &RngStream) -> Result<candle_core::Tensor> {
        self.inner.surrogate(x, rng)
    }
}

/// One record per grid cell. Attacks are non-adaptive `attack` patches at the
/// configured area unless the grid varies it.
pub fn run_ablation(kind: AblationKind, grid: &[String], exp: &Experiment, attack: AttackKind, n: usize) -> Result<ResultTable> {
    if grid.is_empty() {
        return Err(Error::Param("ablation grid is empty".into()));
    }
    let ids = exp.eval_subset(n)?;
    let mode = AttackMode::NonAdaptive(attack);
    let area = exp.config.attack.area_frac;
    let mut table = ResultTable::new();
    let mut base_set: Option<AttackedSet> = None;
    let mut base = || -> Result<AttackedSet> {
        if base_set.is_none() {
            base_set = Some(exp.attacked(&ids, mode, area, None)?);
        }
        Ok(base_set.clone().expect("just built"))
    };
    let mut tuned: Option<(PromptEmbedding, PromptEmbedding)> = None;
    for cell in grid {
        let (record, verdicts) = match kind {
            AblationKind::Loss => {
                let weights = parse_loss_terms(cell)?;
                let shots = exp.few_shot(attack, exp.config.tuning.shots)?;
                let (l, r, _) = exp.tune(&shots, weights)?;
                let d = exp.defense(DefenseKind::AapInpaint, exp.tuned_prompts(&l, &r)?)?;
                let named = Renamed { inner: &d, name: format!("aap-inpaint[{cell}]") };
                exp.evaluate(&named, &base()?)?
            }
            AblationKind::PatchSize => {
                let frac: f64 = cell.parse().map_err(|_| Error::Config(format!("bad patch area `{cell}`")))?;
                let mut set = exp.attacked(&ids, mode, frac, None)?;
                set.attack = format!("{}@{cell}", mode.name());
                let d = exp.defense(DefenseKind::AapInpaint, exp.manual_prompts()?)?;
                exp.evaluate(&d, &set)?
            }
            AblationKind::NoRestore => {
                let d = exp.defense(DefenseKind::parse(cell)?, exp.manual_prompts()?)?;
                exp.evaluate(&d, &base()?)?
            }
            AblationKind::PromptForm => {
                let prompts = match cell.as_str() {
                    "empty" => Experiment::empty_prompts(),
                    "manual" => exp.manual_prompts()?,
                    "tuned" => {
                        if tuned.is_none() {
                            let shots = exp.few_shot(attack, exp.config.tuning.shots)?;
                            let (l, r, _) = exp.tune(&shots, LossWeights::from(&exp.config.tuning))?;
                            tuned = Some((l, r));
                        }
                        let (l, r) = tuned.as_ref().expect("tuned above");
                        exp.tuned_prompts(l, r)?
                    }
                    other => return Err(Error::Config(format!("unknown prompt form `{other}`"))),
                };
                let d = exp.defense(DefenseKind::AapInpaint, prompts)?;
                let named = Renamed { inner: &d, name: format!("aap-inpaint[{cell}]") };
                exp.evaluate(&named, &base()?)?
            }
        };
        table.push(record, verdicts)?;
    }
    Ok(table)
}

/// Residual statistics of one purified image against its clean original.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Mean absolute difference inside the patch.
    pub patch: f64,
    /// Mean absolute difference outside the patch.
    pub background: f64,
    /// Root-mean-square difference over the whole image.
    pub global_l2: f64,
}

pub fn residuals(output: &Image, clean: &Image, patch: &BinaryMask) -> Result<Residuals> {
    output.check_same(clean)?;
    let c = clean.channels();
    let (mut pin, mut pout, mut sq) = (0.0, 0.0, 0.0);
    let (mut nin, mut nout) = (0usize, 0usize);
    for (i, (a, b)) in output.pixels().iter().zip(clean.pixels()).enumerate() {
        let d = (*a as f64 - *b as f64).abs();
        sq += d * d;
        if patch.values()[i / c] == 1 {
            pin += d;
            nin += 1;
        } else {
            pout += d;
            nout += 1;
        }
    }
    Ok(Residuals {
        patch: pin / nin.max(1) as f64,
        background: pout / nout.max(1) as f64,
        global_l2: (sq / output.pixels().len() as f64).sqrt(),
    })
}

/// Both trade-off conditions for one output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffFlags {
    /// Patch residual within 1.5× the background residual.
    pub patch_removed: bool,
    /// Global L2 no worse than the reference ratio's output.
    pub fidelity_kept: bool,
}

impl TradeoffFlags {
    pub fn both(&self) -> bool {
        self.patch_removed && self.fidelity_kept
    }
}

pub fn tradeoff_flags(r: &Residuals, reference_l2: f64, background_floor: f64) -> TradeoffFlags {
    TradeoffFlags {
        patch_removed: r.patch <= 1.5 * r.background.max(background_floor),
        fidelity_kept: r.global_l2 <= reference_l2,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t_star: f64,
    pub mean: Residuals,
    /// Conditions evaluated on the mean residuals.
    pub flags: TradeoffFlags,
    /// Share of images meeting both conditions individually.
    pub per_image_both: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub mean: Residuals,
    /// Share of images meeting both conditions with the literal background residual.
    pub both_literal: f64,
    /// Same, with the background residual floored at the reference output's.
    pub both_floored: f64,
}

/// Noise-ratio sweep of global purification versus the localized pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub reference_t_star: f64,
    pub n: usize,
    pub points: Vec<SweepPoint>,
    /// Some grid point satisfies both conditions on the mean residuals.
    pub any_point_both: bool,
    pub pipeline: PipelineSummary,
    pub per_image: Vec<SweepImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepImage {
    pub image_id: usize,
    pub reference_l2: f64,
    pub reference_background: f64,
    pub diffpure: Vec<Residuals>,
    pub pipeline: Residuals,
}

pub const REFERENCE_T_STAR: f64 = 0.15;

pub fn sweep_tstar(
    set: &AttackedSet,
    grid: &[f64],
    defense: &PatchDefense,
    cfg: &DefenseConfig,
    seed: u64,
) -> Result<SweepReport> {
    if set.items.is_empty() || grid.is_empty() {
        return Err(Error::Param("sweep needs images and grid points".into()));
    }
    let root = RngStream::new(seed, 0).named("sweep");
    let mut per_image = Vec::with_capacity(set.items.len());
    for it in &set.items {
        let (h, w) = (it.adv.height(), it.adv.width());
        let patch = it.spec.mask(h, w);
        let rng = root.substream(it.id as u64);
        let purify = |t: f64| -> Result<Residuals> {
            let out = diffpure_baseline(&it.adv, t, defense.model, defense.sched, cfg.diffpure_steps, &rng.named(&format!("t{t}")))?;
            residuals(&out, &it.clean, &patch)
        };
        let reference = purify(REFERENCE_T_STAR)?;
        let diffpure = grid.iter().map(|&t| purify(t)).collect::<Result<Vec<_>>>()?;
        let out = defense.defend(&it.adv, &rng.named("pipeline"))?;
        per_image.push(SweepImage {
            image_id: it.id,
            reference_l2: reference.global_l2,
            reference_background: reference.background,
            diffpure,
            pipeline: residuals(&out, &it.clean, &patch)?,
        });
    }
    Ok(assemble_sweep(grid, per_image))
}

fn mean_residuals<'a>(rs: impl Iterator<Item = &'a Residuals>) -> Residuals {
    let (mut p, mut b, mut g, mut n) = (0.0, 0.0, 0.0, 0usize);
    for r in rs {
        p += r.patch;
        b += r.background;
        g += r.global_l2;
        n += 1;
    }
    let n = n.max(1) as f64;
    Residuals { patch: p / n, background: b / n, global_l2: g / n }
}

/// Aggregates per-image sweep measurements into the report.
pub fn assemble_sweep(grid: &[f64], per_image: Vec<SweepImage>) -> SweepReport {
    let n = per_image.len();
    let mean_ref_l2 = per_image.iter().map(|p| p.reference_l2).sum::<f64>() / n as f64;
    let points: Vec<SweepPoint> = grid
        .iter()
        .enumerate()
        .map(|(gi, &t)| {
            let mean = mean_residuals(per_image.iter().map(|p| &p.diffpure[gi]));
            let flags = tradeoff_flags(&mean, mean_ref_l2, 0.0);
            let hits = per_image.iter().filter(|p| tradeoff_flags(&p.diffpure[gi], p.reference_l2, 0.0).both()).count();
            SweepPoint { t_star: t, mean, flags, per_image_both: hits as f64 / n as f64 }
        })
        .collect();
    let literal = per_image.iter().filter(|p| tradeoff_flags(&p.pipeline, p.reference_l2, 0.0).both()).count();
    let floored = per_image
        .iter()
        .filter(|p| tradeoff_flags(&p.pipeline, p.reference_l2, p.reference_background).both())
        .count();
    SweepReport {
        reference_t_star: REFERENCE_T_STAR,
        n,
        any_point_both: points.iter().any(|p| p.flags.both()),
        points,
        pipeline: PipelineSummary {
            mean: mean_residuals(per_image.iter().map(|p| &p.pipeline)),
            both_literal: literal as f64 / n as f64,
            both_floored: floored as f64 / n as f64,
        },
        per_image,
    }
}

/// Recomputes the report from its own per-image data and compares.
pub fn sweep_is_consistent(report: &SweepReport) -> bool {
    let grid: Vec<f64> = report.points.iter().map(|p| p.t_star).collect();
    let again = assemble_sweep(&grid, report.per_image.clone());
    serde_json::to_value(&again).ok() == serde_json::to_value(report).ok()
}
