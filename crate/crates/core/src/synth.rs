//! Synthetic grid scenes with planted objects, known saliency, and template captions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention_map::{AttentionMap, Normalization};
use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::metrics::{FixationSet, ObjectMask, DESCRIBED_THRESHOLD};
use crate::tensor::Tensor;

pub const NOUNS: [&str; 12] = [
    "cat", "dog", "bird", "car", "tree", "house", "boat", "ball", "cup", "chair", "lamp", "book",
];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const FUNCTION_WORDS: [&str; 7] = ["a", "and", "there", "is", "next", "to", "near"];

/// Channels reserved at the end of the feature vector for the pop-out signal.
pub const CONTRAST_DIMS: usize = 4;
const CODE_SEED: u64 = 0x5eed_c0de;

pub const FORMAT: &str = "bam-synth";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";
pub const TENSORS: &str = "tensors.batn";

/// The closed caption vocabulary: reserved tokens, function words, colors, nouns.
pub fn vocabulary() -> Vocab {
    Vocab::new(FUNCTION_WORDS.iter().chain(&COLORS).chain(&NOUNS))
}

/// Caption token to object category.
pub fn noun_map() -> HashMap<String, String> {
    NOUNS.iter().map(|n| (n.to_string(), n.to_string())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_salient: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub noise: f64,
    /// Scale of the pop-out channels relative to salience.
    pub contrast: f64,
    /// Salience weights of salient objects are drawn from this range; others from below it.
    pub salient_range: (f64, f64),
    pub distractor_range: (f64, f64),
    pub references: usize,
    pub exact_references: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 7,
            width: 7,
            channels: 16,
            min_objects: 2,
            max_objects: 4,
            max_salient: 2,
            min_side: 1,
            max_side: 3,
            noise: 0.1,
            contrast: 1.0,
            salient_range: (0.5, 1.0),
            distractor_range: (0.05, 0.2),
            references: 5,
            exact_references: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("empty grid".into());
        }
        if self.channels <= CONTRAST_DIMS {
            return bad(format!("need more than {CONTRAST_DIMS} channels"));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects || self.max_objects > NOUNS.len() {
            return bad(format!("object range {}..={}", self.min_objects, self.max_objects));
        }
        if self.max_salient == 0 || self.min_side == 0 || self.max_side < self.min_side {
            return bad("salient count and object sides must be positive".into());
        }
        let (lo, hi) = self.salient_range;
        let (dlo, dhi) = self.distractor_range;
        if !(0.0 < dlo && dlo <= dhi && dhi < lo && lo <= hi && hi <= 1.0) {
            return bad("salience ranges must lie in (0, 1] with distractors below salient".into());
        }
        if self.references < 2 || self.references > 5 || self.exact_references > self.references {
            return bad(format!("{} references", self.references));
        }
        if !(self.noise >= 0.0) || !(self.contrast > 0.0) {
            return bad("noise must be non-negative and contrast positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: String,
    pub color: String,
    /// `[row, col, height, width]`
    pub rect: [usize; 4],
    pub salience: f64,
    pub salient: bool,
}

impl SceneObject {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let [r0, c0, h, w] = self.rect;
        r >= r0 && r < r0 + h && c >= c0 && c < c0 + w
    }

    pub fn area(&self) -> usize {
        self.rect[2] * self.rect[3]
    }

    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width)
            .map(|i| self.contains(i / width, i % width))
            .collect()
    }

    fn overlaps(&self, other: &SceneObject) -> bool {
        let [a0, b0, ah, aw] = self.rect;
        let [c0, d0, ch, cw] = other.rect;
        a0 < c0 + ch && c0 < a0 + ah && b0 < d0 + cw && d0 < b0 + aw
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    pub objects: Vec<SceneObject>,
    /// `C × H × W`
    pub features: Tensor,
    pub saliency: AttentionMap,
    pub captions: Vec<Vec<String>>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.saliency.height()
    }

    pub fn width(&self) -> usize {
        self.saliency.width()
    }

    pub fn object_masks(&self) -> Vec<ObjectMask> {
        self.objects
            .iter()
            .map(|o| ObjectMask {
                category: o.category.clone(),
                height: self.height(),
                width: self.width(),
                mask: o.mask(self.height(), self.width()),
            })
            .collect()
    }

    /// Locations above a tenth of the peak ground-truth saliency.
    pub fn fixations(&self) -> FixationSet {
        FixationSet::from_map(&self.saliency, DESCRIBED_THRESHOLD)
    }

    /// Salient objects, most salient first.
    pub fn salient_objects(&self) -> Vec<&SceneObject> {
        let mut s: Vec<&SceneObject> = self.objects.iter().filter(|o| o.salient).collect();
        s.sort_by(|a, b| b.salience.total_cmp(&a.salience));
        s
    }
}

/// Fixed category and color codes shared by every scene.
pub struct Codebook {
    nouns: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
    contrast: Vec<f64>,
}

impl Codebook {
    pub fn new(channels: usize) -> Self {
        let dims = channels - CONTRAST_DIMS;
        let mut rng = ChaCha8Rng::seed_from_u64(CODE_SEED);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dims).map(|_| normal.sample(rng)).collect() };
        // Gram-Schmidt while the dimension allows, then plain normalization.
        let mut nouns: Vec<Vec<f64>> = Vec::new();
        for _ in NOUNS {
            let mut v = draw(&mut rng);
            if nouns.len() < dims {
                for u in &nouns {
                    let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
                }
            }
            nouns.push(normalized(v));
        }
        let colors = COLORS
            .iter()
            .map(|_| normalized(draw(&mut rng)).into_iter().map(|x| 0.5 * x).collect())
            .collect();
        Codebook {
            nouns,
            colors,
            contrast: vec![1.0 / (CONTRAST_DIMS as f64).sqrt(); CONTRAST_DIMS],
        }
    }

    fn noun(&self, name: &str) -> &[f64] {
        &self.nouns[NOUNS.iter().position(|n| *n == name).expect("known noun")]
    }

    fn color(&self, name: &str) -> &[f64] {
        &self.colors[COLORS.iter().position(|n| *n == name).expect("known color")]
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn place_objects<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig, n: usize) -> Option<Vec<[usize; 4]>> {
    let mut placed: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..200 {
            let h = rng.gen_range(cfg.min_side..=cfg.max_side.min(cfg.height));
            let w = rng.gen_range(cfg.min_side..=cfg.max_side.min(cfg.width));
            let r = rng.gen_range(0..=cfg.height - h);
            let c = rng.gen_range(0..=cfg.width - w);
            let cand = SceneObject {
                category: String::new(),
                color: String::new(),
                rect: [r, c, h, w],
                salience: 0.0,
                salient: false,
            };
            if placed.iter().all(|p| !p.overlaps(&cand)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed.into_iter().map(|o| o.rect).collect())
}

fn phrase(o: &SceneObject, with_color: bool) -> Vec<String> {
    let mut p = vec!["a".to_string()];
    if with_color {
        p.push(o.color.clone());
    }
    p.push(o.category.clone());
    p
}

fn caption<R: Rng + ?Sized>(rng: &mut R, salient: &[&SceneObject], distractor: Option<&SceneObject>) -> Vec<String> {
    let existential = rng.gen_bool(0.5);
    let mut words: Vec<String> = Vec::new();
    if existential {
        words.extend(["there", "is"].map(String::from));
    }
    for (i, o) in salient.iter().enumerate() {
        if i > 0 {
            words.push("and".into());
        }
        words.extend(phrase(o, true));
    }
    if let Some(d) = distractor {
        if existential {
            words.push("near".into());
        } else {
            words.extend(["next", "to"].map(String::from));
        }
        words.extend(phrase(d, false));
    }
    words
}

/// Generates one scene. The same rng state always yields the same scene.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig, codes: &Codebook, id: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let (hh, ww) = (cfg.height, cfg.width);
    if cfg.min_objects * cfg.min_side * cfg.min_side > hh * ww {
        return Err(Error::Generation(format!(
            "{} objects of side {} do not fit a {hh}×{ww} grid",
            cfg.min_objects, cfg.min_side
        )));
    }
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let rects = (0..20)
        .find_map(|_| place_objects(rng, cfg, n))
        .ok_or_else(|| Error::Generation(format!("could not place {n} objects on a {hh}×{ww} grid")))?;
    let categories: Vec<&str> = NOUNS.choose_multiple(rng, n).copied().collect();
    let k = rng.gen_range(1..=cfg.max_salient.min(n - 1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let salient_idx = &order[..k];
    let objects: Vec<SceneObject> = (0..n)
        .map(|i| {
            let salient = salient_idx.contains(&i);
            let (lo, hi) = if salient { cfg.salient_range } else { cfg.distractor_range };
            SceneObject {
                category: categories[i].to_string(),
                color: COLORS.choose(rng).expect("colors").to_string(),
                rect: rects[i],
                salience: rng.gen_range(lo..=hi),
                salient,
            }
        })
        .collect();

    let mut sal = vec![0.0; hh * ww];
    for o in objects.iter().filter(|o| o.salient) {
        for (v, m) in sal.iter_mut().zip(o.mask(hh, ww)) {
            if m {
                *v = o.salience;
            }
        }
    }
    let saliency = AttentionMap::to_distribution(hh, ww, &sal)?;

    let c = cfg.channels;
    let dims = c - CONTRAST_DIMS;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut feats = vec![0.0; c * hh * ww];
    for loc in 0..hh * ww {
        let (r, col) = (loc / ww, loc % ww);
        let mut v = vec![0.0; c];
        if let Some(o) = objects.iter().find(|o| o.contains(r, col)) {
            for (j, x) in v[..dims].iter_mut().enumerate() {
                *x = codes.noun(&o.category)[j] + codes.color(&o.color)[j];
            }
            for (j, x) in v[dims..].iter_mut().enumerate() {
                *x = cfg.contrast * o.salience * codes.contrast[j];
            }
        }
        for (ch, x) in v.into_iter().enumerate() {
            feats[ch * hh * ww + loc] = x + cfg.noise * normal.sample(rng);
        }
    }
    let features = Tensor::new(&[c, hh, ww], feats)?;

    let mut ranked: Vec<&SceneObject> = objects.iter().filter(|o| o.salient).collect();
    ranked.sort_by(|a, b| b.salience.total_cmp(&a.salience));
    let distractors: Vec<&SceneObject> = objects.iter().filter(|o| !o.salient).collect();
    let captions = (0..cfg.references)
        .map(|i| {
            let d = (i >= cfg.exact_references).then(|| *distractors.choose(rng).expect("one distractor"));
            caption(rng, &ranked, d)
        })
        .collect();

    Ok(SceneSample {
        id,
        objects,
        features,
        saliency,
        captions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// `count` scenes, each drawn from its own stream of the seeded generator.
pub fn generate_split(cfg: &SynthConfig, seed: u64, split: Split, count: usize) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    let codes = Codebook::new(cfg.channels);
    (0..count as u64)
        .map(|i| {
            let id = ((split as u64) << 32) | i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            generate_scene(&mut rng, cfg, &codes, id)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    height: usize,
    width: usize,
    objects: Vec<SceneObject>,
    captions: Vec<Vec<String>>,
}

/// Writes `manifest.jsonl` and `tensors.batn` under `dir`, creating it if needed.
pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
    let mut blobs = BufWriter::new(File::create(dir.join(TENSORS))?);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        count: samples.len(),
    };
    writeln!(manifest, "{}", serde_json::to_string(&header)?)?;
    for s in samples {
        let rec = Record {
            id: s.id,
            height: s.height(),
            width: s.width(),
            objects: s.objects.clone(),
            captions: s.captions.clone(),
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
        let masks: Vec<f64> = s
            .objects
            .iter()
            .flat_map(|o| o.mask(s.height(), s.width()))
            .map(|m| if m { 1.0 } else { 0.0 })
            .collect();
        let masks = Tensor::new(&[s.objects.len(), s.height(), s.width()], masks)?;
        s.features.write_to(&mut blobs)?;
        s.saliency.to_tensor().write_to(&mut blobs)?;
        masks.write_to(&mut blobs)?;
    }
    manifest.flush()?;
    blobs.flush()?;
    Ok(())
}

fn next_tensor<R: Read>(r: &mut R, what: &str, id: u64) -> Result<Tensor> {
    Tensor::read_from(r)?.ok_or_else(|| Error::Format(format!("tensor file truncated at {what} of sample {id}")))
}

/// Reads a dataset written by [`write_dataset`]. An empty manifest is an empty dataset.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest = BufReader::new(File::open(dir.join(MANIFEST))?);
    let mut lines = manifest.lines();
    let header: Header = match lines.next() {
        None => return Ok(Vec::new()),
        Some(line) => serde_json::from_str(&line?)
            .map_err(|e| Error::Format(format!("bad dataset header: {e}")))?,
    };
    if header.format != FORMAT {
        return Err(Error::Format(format!("not a dataset manifest: {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "dataset version {} (expected {VERSION})",
            header.version
        )));
    }
    let mut blobs = BufReader::new(File::open(dir.join(TENSORS))?);
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Format(format!("bad record: {e}")))?;
        let features = next_tensor(&mut blobs, "features", rec.id)?;
        let saliency = next_tensor(&mut blobs, "saliency", rec.id)?;
        let masks = next_tensor(&mut blobs, "masks", rec.id)?;
        let (hh, ww) = (rec.height, rec.width);
        let expected: Vec<f64> = rec
            .objects
            .iter()
            .flat_map(|o| o.mask(hh, ww))
            .map(|m| if m { 1.0 } else { 0.0 })
            .collect();
        if masks.data() != expected.as_slice() {
            return Err(Error::Format(format!("masks disagree with object records for sample {}", rec.id)));
        }
        if features.rank() != 3 || features.shape()[1..] != [hh, ww] {
            return Err(Error::Format(format!("feature shape {:?} for sample {}", features.shape(), rec.id)));
        }
        let saliency = AttentionMap::from_tensor(&saliency, Normalization::Distribution)
            .map_err(|e| Error::Format(format!("saliency of sample {}: {e}", rec.id)))?;
        out.push(SceneSample {
            id: rec.id,
            objects: rec.objects,
            features,
            saliency,
            captions: rec.captions,
        });
    }
    if out.len() != header.count {
        return Err(Error::Format(format!(
            "manifest lists {} samples, header says {}",
            out.len(),
            header.count
        )));
    }
    if Tensor::read_from(&mut blobs)?.is_some() {
        return Err(Error::Format("trailing tensors after the last sample".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{p_described_given_fixated, vos_captioning_attention};

    fn small(n: usize, seed: u64) -> Vec<SceneSample> {
        generate_split(&SynthConfig::default(), seed, Split::Train, n).unwrap()
    }

    #[test]
    fn vocabulary_is_closed() {
        let v = vocabulary();
        assert_eq!(v.len(), 3 + 7 + 4 + 12);
        for s in small(50, 1) {
            for c in &s.captions {
                v.encode(c).unwrap();
            }
        }
    }

    #[test]
    fn scene_invariants() {
        for s in small(200, 2) {
            assert!((s.saliency.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.objects.iter().any(|o| o.salient));
            assert!(s.objects.iter().any(|o| !o.salient));
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    assert!(!a.overlaps(b));
                    assert_ne!(a.category, b.category);
                }
            }
            assert!((2..=5).contains(&s.captions.len()));
            let present: Vec<&str> = s.objects.iter().map(|o| o.category.as_str()).collect();
            for c in &s.captions {
                for w in c.iter().filter(|w| NOUNS.contains(&w.as_str())) {
                    assert!(present.contains(&w.as_str()));
                }
            }
            for o in s.salient_objects() {
                assert!(s.captions.iter().all(|c| c.contains(&o.category)));
            }
        }
    }

    #[test]
    fn regeneration_is_identical() {
        assert_eq!(small(20, 9), small(20, 9));
        assert_ne!(small(20, 9)[0].features, small(20, 10)[0].features);
    }

    #[test]
    fn equal_salience_equal_area_splits_mass() {
        let codes = Codebook::new(16);
        let cfg = SynthConfig {
            min_side: 2,
            max_side: 2,
            salient_range: (0.8, 0.8),
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = 0;
        while seen < 5 {
            let s = generate_scene(&mut rng, &cfg, &codes, 0).unwrap();
            let salient = s.salient_objects();
            if salient.len() != 2 {
                continue;
            }
            for o in salient {
                let mass: f64 = o
                    .mask(7, 7)
                    .iter()
                    .zip(s.saliency.values())
                    .filter(|(m, _)| **m)
                    .map(|(_, v)| v)
                    .sum();
                assert!((mass - 0.5).abs() < 1e-12);
            }
            seen += 1;
        }
    }

    #[test]
    fn exact_captions_cover_fixations() {
        let nouns = noun_map();
        for s in small(100, 4) {
            let cap = vos_captioning_attention(&s.object_masks(), &s.captions[0], &nouns, 7, 7).unwrap();
            let p = p_described_given_fixated(&cap, &s.fixations(), DESCRIBED_THRESHOLD).unwrap();
            assert!(p >= 0.9, "{p}");
        }
    }

    #[test]
    fn grid_too_small() {
        let cfg = SynthConfig {
            height: 2,
            width: 2,
            min_side: 2,
            max_side: 2,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = generate_scene(&mut rng, &cfg, &Codebook::new(16), 0);
        assert!(matches!(err, Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let samples = small(100, 5);
        write_dataset(&samples, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);

        let empty = tempfile::tempdir().unwrap();
        File::create(empty.path().join(MANIFEST)).unwrap();
        File::create(empty.path().join(TENSORS)).unwrap();
        assert!(read_dataset(empty.path()).unwrap().is_empty());

        let path = dir.path().join(TENSORS);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));

        bytes[0] = b'B';
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));

        let m = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&m).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&m, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }
}
