mod common;

use boosted_attention::autograd::Tape;
use boosted_attention::decoder::{beam_search, greedy_decode, sample_decode, StepModel};
use boosted_attention::model::Variant;
use boosted_attention::synth::Split;
use boosted_attention::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn variants_share_everything_but_the_stimulus_branch() {
    let base = common::model(Variant::Baseline, 7);
    let star = common::model(Variant::BamStar, 7);
    let bam = common::model(Variant::Bam, 7);
    assert!(base.stimulus.is_none());
    assert!(!star.stimulus.as_ref().unwrap().frozen);
    assert!(bam.stimulus.as_ref().unwrap().frozen);
    let shared = |m: &boosted_attention::model::Captioner| -> Vec<(String, String)> {
        m.parameters()
            .into_iter()
            .filter(|(n, _)| !n.ends_with("_sal"))
            .map(|(n, t)| (n.to_string(), t.fingerprint()))
            .collect()
    };
    assert_eq!(shared(&base), shared(&star));
    assert_eq!(shared(&base), shared(&bam));
    assert_ne!(
        star.stimulus.as_ref().unwrap().w_sal.fingerprint(),
        bam.stimulus.as_ref().unwrap().w_sal.fingerprint()
    );
}

#[test]
fn zero_attentional_features_reduce_bam_to_baseline() {
    let base = common::model(Variant::Baseline, 3);
    let mut bam = common::model(Variant::Bam, 3);
    let s = bam.stimulus.as_mut().unwrap();
    s.w_sal = Tensor::zeros(s.w_sal.shape());
    s.b_sal = Tensor::zeros(s.b_sal.shape());
    for scene in common::scenes(Split::Test, 4) {
        let mut a = base.session(&scene.features).unwrap();
        let mut b = bam.session(&scene.features).unwrap();
        assert!(max_abs_diff(a.integrated(), b.integrated()) < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(scene.id);
        for _ in 0..5 {
            let h = Tensor::uniform(&[base.config.hidden], -1.0, 1.0, &mut rng);
            let (alpha_a, za) = a.attend(&h).unwrap();
            let (alpha_b, zb) = b.attend(&h).unwrap();
            assert!(max_abs_diff(&za, &zb) < 1e-12);
            assert!(max_abs_diff(&alpha_a.to_tensor(), &alpha_b.to_tensor()) < 1e-12);
        }
        let ga = greedy_decode(&mut a, base.config.max_len).unwrap();
        let gb = greedy_decode(&mut b, bam.config.max_len).unwrap();
        assert_eq!(ga.tokens, gb.tokens);
        assert!((ga.total_logprob - gb.total_logprob).abs() < 1e-12);
    }
}

#[test]
fn teacher_forced_score_is_negative_summed_cross_entropy() {
    for v in Variant::ALL {
        let m = common::model(v, 11);
        for scene in common::scenes(Split::Val, 3) {
            let ids = m.vocab.encode(&scene.captions[0]).unwrap();
            let score = m.score_caption(&scene.features, &ids).unwrap();
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape, false);
            let enc = m.encode(&mut tape, &vars, &scene.features).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let loss = m.caption_loss(&mut tape, &vars, &enc, &ids, 0.0, &mut rng).unwrap();
            assert!((score + tape.value(loss.loss).item()).abs() < 1e-9, "{score}");
        }
    }
}

#[test]
fn decoded_log_probs_match_rescoring() {
    let m = common::model(Variant::Bam, 5);
    for scene in common::scenes(Split::Test, 4) {
        let mut s = m.session(&scene.features).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(scene.id);
        let sampled = sample_decode(&mut s, m.config.max_len, &mut rng).unwrap();
        let greedy = greedy_decode(&mut s, m.config.max_len).unwrap();
        let beam = beam_search(&mut s, 3, m.config.max_len).unwrap();
        for r in [&sampled, &greedy, &beam] {
            let direct: f64 = r.step_logprobs.iter().sum();
            assert!((direct - r.total_logprob).abs() < 1e-9);
            if r.finished {
                let rescored = m.score_caption(&scene.features, &r.tokens).unwrap();
                assert!((rescored - r.total_logprob).abs() < 1e-9);
            }
        }
        let one = beam_search(&mut s, 1, m.config.max_len).unwrap();
        assert_eq!(one.tokens, greedy.tokens);
    }
}

#[test]
fn session_steps_are_pure() {
    let m = common::model(Variant::BamStar, 2);
    let scene = &common::scenes(Split::Test, 1)[0];
    let mut s = m.session(&scene.features).unwrap();
    let st = s.initial().unwrap();
    let a = s.step(&st, 5).unwrap();
    let b = s.step(&st, 5).unwrap();
    assert_eq!(a.logprobs, b.logprobs);
    assert!(a.logprobs[0] == f64::NEG_INFINITY && a.logprobs[1] == f64::NEG_INFINITY);
    let total: f64 = a.logprobs.iter().map(|l| l.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}
