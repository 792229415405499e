mod common;

use std::fs;

use boosted_attention::checkpoint::{
    load_checkpoint, load_saliency, save_checkpoint, save_saliency, MANIFEST_FILE, PARAMS_FILE,
};
use boosted_attention::model::Variant;
use boosted_attention::pipeline::build_model;
use boosted_attention::synth::{read_dataset, write_dataset, Split};
use boosted_attention::train::{corpus_stats, examples_from_scenes, Phase, Trainer};
use boosted_attention::Error;

fn trainer(variant: Variant) -> (Trainer, Vec<boosted_attention::train::Example>) {
    let cfg = common::small_model();
    let scenes = common::scenes(Split::Train, 16);
    let sal = common::saliency(&scenes, cfg.feature_dim);
    let model = build_model(variant, &cfg, Some(&sal), 1).unwrap();
    let data = examples_from_scenes(&scenes, &model.vocab).unwrap();
    (Trainer::new(model, common::small_train(2, 2)).unwrap(), data)
}

fn fingerprints(t: &Trainer) -> Vec<String> {
    let mut out: Vec<String> = t.model.parameters().iter().map(|(_, p)| p.fingerprint()).collect();
    out.extend(t.moments.iter().flat_map(|m| [m.m.fingerprint(), m.v.fingerprint()]));
    out
}

#[test]
fn resume_matches_uninterrupted_run_bit_for_bit() {
    for variant in Variant::ALL {
        let (mut straight, data) = trainer(variant);
        let stats = corpus_stats(&data);
        let full = straight.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!(full.len(), 4);

        for cut in 1..4 {
            let (mut first, _) = trainer(variant);
            let mut log = Vec::new();
            for _ in 0..cut {
                log.push(first.next_epoch(&data, &stats).unwrap().unwrap());
            }
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(&first, dir.path()).unwrap();
            let mut resumed = load_checkpoint(dir.path()).unwrap();
            assert_eq!(fingerprints(&resumed), fingerprints(&first));
            assert_eq!(resumed.phase, first.phase);
            assert_eq!(resumed.epoch, first.epoch);
            log.extend(resumed.run(&data, |_, _| Ok(())).unwrap());
            assert_eq!(log, full, "{} cut at {cut}", variant.name());
            assert_eq!(fingerprints(&resumed), fingerprints(&straight));
            assert_eq!(resumed.phase, Phase::Done);
        }
    }
}

#[test]
fn checkpoint_files_round_trip_bit_exactly() {
    let (mut t, data) = trainer(Variant::Bam);
    let stats = corpus_stats(&data);
    t.next_epoch(&data, &stats).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_checkpoint(&t, a.path()).unwrap();
    save_checkpoint(&load_checkpoint(a.path()).unwrap(), b.path()).unwrap();
    for f in [PARAMS_FILE, MANIFEST_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let loaded = load_checkpoint(a.path()).unwrap();
    assert!(loaded.model.stimulus.as_ref().unwrap().frozen);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (t, _) = trainer(Variant::BamStar);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&t, dir.path()).unwrap();
    let params = dir.path().join(PARAMS_FILE);
    let manifest = dir.path().join(MANIFEST_FILE);
    let good_params = fs::read(&params).unwrap();
    let good_manifest = fs::read_to_string(&manifest).unwrap();

    let mut flipped = good_params.clone();
    let n = flipped.len();
    flipped[n / 3] ^= 1;
    fs::write(&params, &flipped).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

    fs::write(&params, &good_params[..n - 8]).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());

    fs::write(&params, &good_params).unwrap();
    fs::write(&manifest, good_manifest.replace("\"batch_size\": 8", "\"batch_size\": 9")).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

    fs::write(&manifest, good_manifest.replace("bam-checkpoint", "something-else")).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

    fs::remove_file(&manifest).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io(_))));
}

#[test]
fn saliency_head_round_trips() {
    let scenes = common::scenes(Split::Train, 6);
    let sal = common::saliency(&scenes, 8);
    let dir = tempfile::tempdir().unwrap();
    save_saliency(&sal, &[1.5, 1.25], dir.path()).unwrap();
    let (back, man) = load_saliency(dir.path()).unwrap();
    for ((_, a), (_, b)) in sal.tensors().iter().zip(back.tensors().iter()) {
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
    assert_eq!(man.loss_curve, vec![1.5, 1.25]);
    assert!(back.frozen);
}

#[test]
fn dataset_files_round_trip_bit_exactly() {
    let scenes = common::scenes(Split::Val, 10);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&scenes, a.path()).unwrap();
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back, scenes);
    write_dataset(&back, b.path()).unwrap();
    for f in ["manifest.jsonl", "tensors.batn"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}
