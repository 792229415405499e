//! Per-word comparison of stimulus and top-down attention, and the
//! described-given-fixated statistics on synthetic scenes.

use serde::{Deserialize, Serialize};

use crate::attention_map::AttentionMap;
use crate::decoder::{beam_search, greedy_decode};
use crate::error::Result;
use crate::metrics::{cc, p_described_given_fixated, sim, spearman, vos_captioning_attention, DESCRIBED_THRESHOLD};
use crate::model::Captioner;
use crate::synth::{noun_map, SceneSample};

/// Top-down attention for one generated word next to the stimulus map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAttention {
    pub position: usize,
    pub token: String,
    pub alpha: AttentionMap,
    pub cc: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAnalysis {
    pub id: u64,
    pub caption: Vec<String>,
    /// Channel mean of the attentional features; absent for the baseline.
    pub stimulus_map: Option<AttentionMap>,
    pub words: Vec<WordAttention>,
    /// Correlation of the stimulus map with the ground-truth saliency.
    pub stimulus_vs_saliency_cc: Option<f64>,
    /// Generated caption: share of fixated locations it describes.
    pub p_described: f64,
    /// Reference captions: the same share, averaged over references.
    pub p_described_references: f64,
    pub vos_cc: Option<f64>,
    pub vos_sim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub samples: usize,
    pub word_pairs: usize,
    pub undefined_pairs: usize,
    pub mean_cc: Option<f64>,
    pub mean_spearman: Option<f64>,
    pub mean_stimulus_vs_saliency_cc: Option<f64>,
    pub mean_p_described: f64,
    pub mean_p_described_references: f64,
    pub mean_vos_cc: Option<f64>,
    pub mean_vos_sim: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Decodes `scene` (beam search, greedy when `beam_width` is 1) and pairs each
/// word's top-down map with the stimulus map.
pub fn analyze_scene(model: &Captioner, scene: &SceneSample, beam_width: usize) -> Result<SampleAnalysis> {
    let mut session = model.session(&scene.features)?;
    let stimulus = session.stimulus_map()?;
    let result = if beam_width == 1 {
        greedy_decode(&mut session, model.config.max_len)?
    } else {
        beam_search(&mut session, beam_width, model.config.max_len)?
    };
    let caption = model.vocab.decode(&result.tokens);
    let mut words = Vec::with_capacity(result.tokens.len());
    for (t, (&tok, alpha)) in result.tokens.iter().zip(&result.alphas).enumerate() {
        let (c, s) = match &stimulus {
            Some(m) => (cc(m, alpha)?, spearman(m, alpha)?),
            None => (None, None),
        };
        words.push(WordAttention {
            position: t,
            token: model.vocab.token(tok).unwrap_or("?").to_string(),
            alpha: alpha.clone(),
            cc: c,
            spearman: s,
        });
    }
    let (h, w) = (scene.height(), scene.width());
    let nouns = noun_map();
    let masks = scene.object_masks();
    let fix = scene.fixations();
    let vos = vos_captioning_attention(&masks, &caption, &nouns, h, w)?;
    let p_described = p_described_given_fixated(&vos, &fix, DESCRIBED_THRESHOLD)?;
    let mut p_refs = 0.0;
    for r in &scene.captions {
        let m = vos_captioning_attention(&masks, r, &nouns, h, w)?;
        p_refs += p_described_given_fixated(&m, &fix, DESCRIBED_THRESHOLD)?;
    }
    let stimulus_vs_saliency_cc = match &stimulus {
        Some(m) => cc(m, &scene.saliency)?,
        None => None,
    };
    let vos_sim = if vos.is_zero() { None } else { Some(sim(&vos, &scene.saliency)?) };
    Ok(SampleAnalysis {
        id: scene.id,
        caption,
        stimulus_map: stimulus,
        words,
        stimulus_vs_saliency_cc,
        p_described,
        p_described_references: p_refs / scene.captions.len().max(1) as f64,
        vos_cc: cc(&vos, &scene.saliency)?,
        vos_sim,
    })
}

pub fn summarize(samples: &[SampleAnalysis]) -> AttentionSummary {
    let paired: Vec<&WordAttention> = samples
        .iter()
        .filter(|s| s.stimulus_map.is_some())
        .flat_map(|s| &s.words)
        .collect();
    AttentionSummary {
        samples: samples.len(),
        word_pairs: paired.len(),
        undefined_pairs: paired.iter().filter(|w| w.cc.is_none()).count(),
        mean_cc: mean(paired.iter().filter_map(|w| w.cc)),
        mean_spearman: mean(paired.iter().filter_map(|w| w.spearman)),
        mean_stimulus_vs_saliency_cc: mean(samples.iter().filter_map(|s| s.stimulus_vs_saliency_cc)),
        mean_p_described: mean(samples.iter().map(|s| s.p_described)).unwrap_or(0.0),
        mean_p_described_references: mean(samples.iter().map(|s| s.p_described_references)).unwrap_or(0.0),
        mean_vos_cc: mean(samples.iter().filter_map(|s| s.vos_cc)),
        mean_vos_sim: mean(samples.iter().filter_map(|s| s.vos_sim)),
    }
}
