use proptest::prelude::*;
use xmm_core::config::{FrozenNorm, RunConfig, ScheduleKind, Strategy, Unfreeze};
use xmm_core::gradsuite::{run_suite, TOLERANCE};
use xmm_core::model::{Init, PoolMode};
use xmm_core::Error;

#[test]
fn file_load_with_comments() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(
        &path,
        "# ablation run\nmodel.pool = gap\nmodel.gb=off   # no gate\n\ntrain.strategy=2\ntext.len=80\n",
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    let m = cfg.model_config(10).unwrap();
    assert_eq!(m.pool, PoolMode::Gap);
    assert!(!m.gated);
    assert_eq!(cfg.strategy().unwrap(), Strategy::FrozenVision);
    assert_eq!(cfg.seq_len().unwrap(), 80);
    assert!(RunConfig::load(&dir.path().join("missing.cfg")).is_err());
}

#[test]
fn training_keys_parse_to_typed_values() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.frozen_norm().unwrap(), FrozenNorm::Batch);
    assert_eq!(cfg.lr_scale().unwrap(), 1.0);
    assert_eq!(cfg.clip_norm().unwrap(), Some(1.0));
    assert_eq!(cfg.schedule().unwrap(), ScheduleKind::Compressed);
    assert_eq!(cfg.unfreeze().unwrap(), Unfreeze::All);

    let cfg = RunConfig::parse("train.clip_norm=0\ntrain.frozen_bn=running\ntrain.lr_scale=0.5\ntrain.schedule=full").unwrap();
    assert_eq!(cfg.clip_norm().unwrap(), None);
    assert_eq!(cfg.frozen_norm().unwrap(), FrozenNorm::Running);
    assert_eq!(cfg.lr_scale().unwrap(), 0.5);
    assert_eq!(cfg.schedule().unwrap(), ScheduleKind::Full);

    for bad in [
        "train.clip_norm=-1",
        "train.lr_scale=0",
        "train.frozen_bn=sometimes",
        "train.momentum=1",
        "train.batch=1",
        "loss.cmpm=off\nloss.cmpc=off",
        "augment.flip=1.5",
        "model.reduction=7",
        "seed=-3",
    ] {
        assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn strategy_one_forces_xavier_vision_init() {
    let cfg = RunConfig::parse("train.strategy=1").unwrap();
    assert_eq!(cfg.model_config(4).unwrap().vision.init, Init::Xavier);
    let cfg = RunConfig::parse("train.strategy=3").unwrap();
    assert_eq!(cfg.model_config(4).unwrap().vision.init, Init::Kaiming);
}

#[test]
fn stem_width_and_stage_overrides() {
    let cfg = RunConfig::parse("model.text.stem_width=16\nmodel.vision.widths=8,8,16,64\nmodel.vision.blocks=2,1,1,1").unwrap();
    let m = cfg.model_config(4).unwrap();
    assert_eq!(m.text.stem.width, 16);
    assert_eq!(m.vision.stages.iter().map(|s| s.width).collect::<Vec<_>>(), [8, 8, 16, 64]);
    assert_eq!(m.vision.stages[0].blocks, 2);
    assert!(RunConfig::parse("model.vision.widths=8,16").is_err());
    assert!(RunConfig::parse("model.vision.widths=8,16,32,48").is_err());
}

#[test]
fn full_preset_validates_at_full_scale() {
    let cfg = RunConfig::parse("model.preset=full\ndata.height=384\ndata.width=128\ntext.embed_dim=768").unwrap();
    let m = cfg.model_config(11003).unwrap();
    assert_eq!(m.descriptor_dim(), 2048);
    assert!(RunConfig::parse("model.preset=full\ndata.height=100").is_err(), "100 is not divisible by 32");
}

#[test]
fn every_documented_key_has_a_valid_default() {
    let cfg = RunConfig::default();
    for (key, default, help) in RunConfig::documented_keys() {
        assert_eq!(cfg.get(key), default);
        assert!(!help.is_empty());
    }
    cfg.validate().unwrap();
}

#[test]
fn gradient_suite_passes_within_tolerance() {
    let results = run_suite(0).unwrap();
    let names: Vec<&str> = results.iter().map(|(n, _)| *n).collect();
    assert_eq!(
        names,
        ["cmpm_loss", "cmpc_loss", "gate_apply", "global_max_pool", "global_avg_pool", "conv2d", "dual_path"]
    );
    for (name, r) in results {
        assert!(r.coords_checked > 0, "{name}");
        assert!(r.max_rel_error <= TOLERANCE, "{name}: {}", r.max_rel_error);
    }
}

proptest! {
    /// Canonical text parses back to the same config and fingerprint, for
    /// any mix of overrides.
    #[test]
    fn canonical_text_round_trips(
        seed in any::<u64>(),
        pool in prop::sample::select(vec!["gap", "gmp", "both"]),
        gb in any::<bool>(),
        len in prop::sample::select(vec![40usize, 60, 80, 100, 120]),
        strategy in 1u32..=4,
    ) {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("model.pool", pool).unwrap();
        cfg.set("model.gb", if gb { "on" } else { "off" }).unwrap();
        cfg.set("text.len", &len.to_string()).unwrap();
        cfg.set("train.strategy", &strategy.to_string()).unwrap();
        cfg.validate().unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.fingerprint(), cfg.fingerprint());
        prop_assert_eq!(back.seed().unwrap(), seed);
    }
}
