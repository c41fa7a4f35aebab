use candle_core::{DType, Device};
use patchdiff::attack::{bpda_adaptive_attack, AttackKind, Classifier, ClassifierArch, PatchSpec};
use patchdiff::config::{AttackConfig, DefenseConfig, DenoiserConfig};
use patchdiff::data::GratingSpec;
use patchdiff::diffusion::{inpaint, Conditioning, TextEncoder, ToyDenoiser};
use patchdiff::eval::{evaluate, AttackedItem, AttackedSet};
use patchdiff::pipeline::{DefenseKind, PatchDefense, Prompts};
use patchdiff::restoration::{restore, zero_fill};
use patchdiff::{BinaryMask, Image, NoiseSchedule, RngStream};

fn toy(side_hint: usize) -> (ToyDenoiser, NoiseSchedule) {
    let sched = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
    let cfg = DenoiserConfig { base_channels: 4, emb_dim: 8, ..DenoiserConfig::default() };
    let text = TextEncoder::toy(cfg.cond_dim, 4, 0);
    let model = ToyDenoiser::new(3, &cfg, true, sched.clone(), text, &Device::Cpu).unwrap();
    assert_eq!(side_hint % 4, 0);
    (model, sched)
}

fn unchanged_outside(out: &Image, x: &Image, mask: &BinaryMask) -> bool {
    let c = x.channels();
    out.pixels()
        .iter()
        .zip(x.pixels())
        .enumerate()
        .all(|(k, (a, b))| mask.values()[k / c] == 1 || a.to_bits() == b.to_bits())
}

#[test]
fn restore_and_inpaint_never_touch_unmasked_pixels() {
    let (model, sched) = toy(16);
    let cfg = DefenseConfig { inpaint_steps: 3, ..DefenseConfig::scaled_to(16) };
    let prompt = model.caption("clean").unwrap();
    for i in 0..200u64 {
        let rng = RngStream::new(11, i);
        let x = Image::new(16, 16, 3, rng.named("x").uniform_vec(768)).unwrap();
        let density = 0.01 + 0.6 * rng.named("d").uniform_vec(1)[0];
        let mask = BinaryMask::new(16, 16, rng.named("m").uniform_vec(256).into_iter().map(|u| u8::from(u < density)).collect()).unwrap();
        let a = restore(&x, &mask, &prompt, &model, &sched, &cfg, &rng.named("r")).unwrap();
        let b = inpaint(&x, &mask, &Conditioning::empty(), &model, &sched, 3, &rng.named("i")).unwrap();
        assert!(unchanged_outside(&a, &x, &mask), "restore altered unmasked pixels for mask {i}");
        assert!(unchanged_outside(&b, &x, &mask), "inpaint altered unmasked pixels for mask {i}");
    }
}

#[test]
fn empty_mask_makes_both_fills_the_identity() {
    let (model, sched) = toy(16);
    let x = Image::new(16, 16, 3, RngStream::new(1, 0).uniform_vec(768)).unwrap();
    let empty = BinaryMask::zeros(16, 16);
    let cfg = DefenseConfig::scaled_to(16);
    let r = restore(&x, &empty, &Conditioning::empty(), &model, &sched, &cfg, &RngStream::new(2, 0)).unwrap();
    assert_eq!(r, x);
    assert_eq!(zero_fill(&x, &empty).unwrap(), x);
}

#[test]
fn full_mask_zero_fill_scores_like_black_images() {
    let clf = Classifier::new(ClassifierArch { channels: 3, width: 4, classes: 3 }, 1, DType::F32, &Device::Cpu).unwrap();
    let black = Image::zeros(16, 16, 3).unwrap();
    let black_pred = clf.predict(&black).unwrap();
    let data = GratingSpec::new(16, 3).generate(12, &RngStream::new(3, 0));
    for img in &data.images {
        let out = zero_fill(img, &BinaryMask::ones(16, 16)).unwrap();
        assert_eq!(clf.predict(&out).unwrap(), black_pred);
    }
}

#[test]
fn adaptive_attack_runs_through_the_defense() {
    let (model, sched) = toy(16);
    let clf = Classifier::new(ClassifierArch { channels: 3, width: 4, classes: 4 }, 2, DType::F32, &Device::Cpu).unwrap();
    let prompts = Prompts { localize: model.caption("adversarial").unwrap(), restore: model.caption("clean").unwrap() };
    let cfg = DefenseConfig { inpaint_steps: 2, ..DefenseConfig::scaled_to(16) };
    let defense = PatchDefense::new(DefenseKind::AapInpaint, cfg, &model, &sched, prompts).unwrap();
    let x = GratingSpec::new(16, 4).generate(1, &RngStream::new(4, 0)).images.remove(0);
    let acfg = AttackConfig { iters: 3, area_frac: 0.05, ..AttackConfig::default() };
    let out = bpda_adaptive_attack(&x, 0, &clf, AttackKind::AdvP, &defense, &acfg, &RngStream::new(5, 0)).unwrap();
    out.spec.check_bounds(16, 16).unwrap();
    assert_eq!(out.loss_trace.len(), acfg.iters + 1);
    let mask = out.spec.mask(16, 16);
    assert!(unchanged_outside(&out.image, &x, &mask));
}

#[test]
fn evaluation_is_independent_of_item_order() {
    let (model, sched) = toy(16);
    let clf = Classifier::new(ClassifierArch { channels: 3, width: 4, classes: 4 }, 3, DType::F32, &Device::Cpu).unwrap();
    let prompts = Prompts { localize: model.caption("adversarial").unwrap(), restore: model.caption("clean").unwrap() };
    let cfg = DefenseConfig { inpaint_steps: 2, ..DefenseConfig::scaled_to(16) };
    let defense = PatchDefense::new(DefenseKind::AapInpaint, cfg, &model, &sched, prompts).unwrap();
    let data = GratingSpec::new(16, 4).generate(6, &RngStream::new(6, 0));
    let items: Vec<AttackedItem> = (0..6)
        .map(|id| {
            let spec = PatchSpec::new(2, 3, 4, 3, RngStream::new(7, id as u64).uniform_vec(48)).unwrap();
            AttackedItem {
                id,
                label: data.labels[id],
                clean: data.images[id].clone(),
                adv: patchdiff::attack::apply_patch(&data.images[id], &spec).unwrap(),
                spec,
            }
        })
        .collect();
    let forward = AttackedSet { attack: "advp".into(), items: items.clone() };
    let backward = AttackedSet { attack: "advp".into(), items: items.into_iter().rev().collect() };
    let (ra, mut va) = evaluate(&defense, &forward, &clf, "toy", 9, "h").unwrap();
    let (rb, mut vb) = evaluate(&defense, &backward, &clf, "toy", 9, "h").unwrap();
    va.sort_by_key(|v| v.image_id);
    vb.sort_by_key(|v| v.image_id);
    assert_eq!(va, vb);
    assert_eq!((ra.clean_acc, ra.robust_acc), (rb.clean_acc, rb.robust_acc));
}
