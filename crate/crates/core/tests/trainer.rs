use veil_core::data::{generate_synthetic, SyntheticTaskSpec, TaskDataset, DESIRABLE};
use veil_core::networks::{ArchitectureSpec, EncoderNetwork};
use veil_core::objectives::{EncoderObjective, PrivacyUpdateMode, Utility};
use veil_core::seed::stream;
use veil_core::trainer::{warm_up, TrainConfig, Trainer};
use veil_core::Tensor;

fn data() -> TaskDataset {
    generate_synthetic(&SyntheticTaskSpec { size: 16, ..SyntheticTaskSpec::default() }, 400).unwrap()
}

fn small_trainer(data: &TaskDataset, mode: PrivacyUpdateMode, seed: u64) -> Trainer<'_> {
    let objective =
        EncoderObjective { privacy: mode, utility: Utility::DesirableTasks(vec![DESIRABLE.into()]), alpha: 0.0625 };
    let mut cfg = TrainConfig::desk(objective, seed);
    cfg.batch = 16;
    cfg.warmup = 10;
    cfg.iterations = 30;
    cfg.eval_every = 10;
    cfg.classifier_widths = vec![4];
    cfg.probe_samples = 32;
    cfg.eval_samples = 40;
    let arch = ArchitectureSpec::desk_encoder([3, 16, 16], [4, 4, 4]);
    let enc = EncoderNetwork::build(&arch, &mut stream(seed, "init/encoder")).unwrap();
    Trainer::new(cfg, enc, data).unwrap()
}

fn snapshot(params: Vec<&Tensor>) -> Vec<Tensor> {
    params.into_iter().cloned().collect()
}

#[test]
fn classifier_step_touches_only_classifier_parameters() {
    let d = data();
    let mut tr = small_trainer(&d, PrivacyUpdateMode::LabelFlip, 1);
    let enc = snapshot(tr.encoder.net.params());
    let cls = snapshot(tr.private.net.params());
    let idx: Vec<usize> = (0..16).collect();
    tr.classifier_step(&idx, 1e-2).unwrap();
    assert_eq!(enc, snapshot(tr.encoder.net.params()));
    assert_ne!(cls, snapshot(tr.private.net.params()));
}

#[test]
fn encoder_step_touches_only_encoder_parameters() {
    let d = data();
    let mut tr = small_trainer(&d, PrivacyUpdateMode::LabelFlip, 2);
    let enc = snapshot(tr.encoder.net.params());
    let cls = snapshot(tr.private.net.params());
    let des = snapshot(tr.desirable.as_ref().unwrap().net.params());
    let idx: Vec<usize> = (16..32).collect();
    tr.encoder_step(&idx, 1e-3).unwrap();
    assert_ne!(enc, snapshot(tr.encoder.net.params()));
    assert_eq!(cls, snapshot(tr.private.net.params()));
    assert_eq!(des, snapshot(tr.desirable.as_ref().unwrap().net.params()));
}

#[test]
fn warm_up_leaves_the_encoder_alone() {
    let d = data();
    let mut tr = small_trainer(&d, PrivacyUpdateMode::GanFlipTrueLabel, 3);
    let enc = snapshot(tr.encoder.net.params());
    let rows = warm_up(&mut tr).unwrap();
    assert!(rows.iter().all(|r| r.phase == "warmup"));
    assert_eq!(tr.iteration, 10);
    assert_eq!(enc, snapshot(tr.encoder.net.params()));
}

#[test]
fn same_seed_same_run() {
    let d = data();
    let mut a = small_trainer(&d, PrivacyUpdateMode::LabelFlip, 4);
    let mut b = small_trainer(&d, PrivacyUpdateMode::LabelFlip, 4);
    let ra = a.run().unwrap();
    let rb = b.run().unwrap();
    assert_eq!(ra, rb);
    assert_eq!(snapshot(a.encoder.net.params()), snapshot(b.encoder.net.params()));

    let mut c = small_trainer(&d, PrivacyUpdateMode::LabelFlip, 5);
    c.run().unwrap();
    assert_ne!(snapshot(a.encoder.net.params()), snapshot(c.encoder.net.params()));
}

#[test]
fn gan_and_flip_share_the_warm_up() {
    let d = data();
    let mut flip = small_trainer(&d, PrivacyUpdateMode::LabelFlip, 6);
    let mut gan = small_trainer(&d, PrivacyUpdateMode::GanFlipTrueLabel, 6);
    let rf = flip.run().unwrap();
    let rg = gan.run().unwrap();
    let warm = |rows: &[veil_core::trainer::LogRow]| rows.iter().filter(|r| r.phase == "warmup").cloned().collect::<Vec<_>>();
    assert!(!warm(&rf).is_empty());
    assert_eq!(warm(&rf), warm(&rg));
    assert_ne!(rf.last().unwrap().encoder_privacy_loss, rg.last().unwrap().encoder_privacy_loss);
}
