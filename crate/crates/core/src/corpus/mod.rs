//! Synthetic identity-structured corpus: every identity has fixed clothing and
//! scene, and may appear performing a normal action, an anomalous one, or both.

mod manifest;
mod render;
mod sampler;
mod vocab;

pub use manifest::{read_corpus, write_corpus, MANIFEST_SCHEMA_VERSION};
pub use render::{
    appearance_vector, background_vector, box_to_image, heatmap_sigma, render_image, render_pose, sample_keypoints,
    silhouette_mask, skeleton_template, RenderNoise,
};
pub use sampler::{sample_batch_ihnm, TrainPool};
pub use vocab::{
    caption_text, Action, Appearance, Vocabulary, ANOMALY_ACTIONS, BOTTOMS, COLORS, NORMAL_ACTIONS, PERSON_LEXICON,
    SCENES, SPECIAL_WORDS, SUBJECTS, TOPS,
};

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImageInput, Keypoint, PoseInput, TextInput, CLS, MAX_TEXT_LEN, SEP};
use crate::numerics::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Normal,
    Anomaly,
}

impl Variant {
    pub fn opposite(self) -> Self {
        match self {
            Variant::Normal => Variant::Anomaly,
            Variant::Anomaly => Variant::Normal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaptionKind {
    #[serde(rename = "C_n")]
    Normal,
    #[serde(rename = "C_a")]
    Anomaly,
    /// Anomaly caption of an identity that also has a normal description.
    #[serde(rename = "C_a_plus")]
    AnomalyPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: u32,
    pub split: Split,
    pub subject: String,
    pub appearance: Appearance,
    pub appearance_vector: Vec<f32>,
    pub background_vector: Vec<f32>,
    pub normal_action: String,
    pub anomaly_action: String,
    pub scene: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub record_id: u32,
    pub identity_id: u32,
    pub split: Split,
    pub variant: Variant,
    pub caption_kind: CaptionKind,
    pub image: ImageInput,
    pub pose: PoseInput,
    /// Description of this image.
    pub caption: TextInput,
    /// Generation prompt; the joined normal and anomaly captions for
    /// `C_a_plus` records.
    pub prompt: TextInput,
    pub action: String,
    pub scene: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecords {
    pub normal: Vec<u32>,
    pub anomaly: Vec<u32>,
}

impl IdentityRecords {
    pub fn side(&self, v: Variant) -> &[u32] {
        match v {
            Variant::Normal => &self.normal,
            Variant::Anomaly => &self.anomaly,
        }
    }

    pub fn is_paired(&self) -> bool {
        !self.normal.is_empty() && !self.anomaly.is_empty()
    }
}

/// Identity → (normal records, anomaly records), with a record-level lookup.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairIndex {
    identities: HashMap<u32, IdentityRecords>,
    records: HashMap<u32, (u32, Variant)>,
}

impl PairIndex {
    pub fn build<'a>(records: impl IntoIterator<Item = &'a CorpusRecord>) -> Self {
        let mut index = Self::default();
        for r in records {
            index.insert(r.record_id, r.identity_id, r.variant);
        }
        index
    }

    pub fn insert(&mut self, record_id: u32, identity_id: u32, variant: Variant) {
        let entry = self.identities.entry(identity_id).or_default();
        match variant {
            Variant::Normal => entry.normal.push(record_id),
            Variant::Anomaly => entry.anomaly.push(record_id),
        }
        self.records.insert(record_id, (identity_id, variant));
    }

    pub fn identity(&self, identity_id: u32) -> Option<&IdentityRecords> {
        self.identities.get(&identity_id)
    }

    pub fn identity_of(&self, record_id: u32) -> Option<u32> {
        self.records.get(&record_id).map(|r| r.0)
    }

    /// Records of the same identity with the opposite variant.
    pub fn counterparts(&self, record_id: u32) -> &[u32] {
        match self.records.get(&record_id) {
            Some(&(id, v)) => self.identities[&id].side(v.opposite()),
            None => &[],
        }
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn num_paired(&self) -> usize {
        self.identities.values().filter(|e| e.is_paired()).count()
    }

    pub fn to_sorted(&self) -> BTreeMap<u32, IdentityRecords> {
        self.identities.iter().map(|(k, v)| (*k, v.clone())).collect()
    }

    pub fn from_sorted(map: BTreeMap<u32, IdentityRecords>) -> Self {
        let mut index = Self::default();
        for (id, e) in map {
            for &r in &e.normal {
                index.insert(r, id, Variant::Normal);
            }
            for &r in &e.anomaly {
                index.insert(r, id, Variant::Anomaly);
            }
        }
        index
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Training identities.
    pub n_identities: usize,
    /// Held-out identities, each with one normal and one anomaly record.
    pub n_test_identities: usize,
    pub images_per_caption: usize,
    /// Normal : anomaly image count in the training split.
    pub ratio: [u32; 2],
    /// Overrides the ratio: this fraction of training identities gets both
    /// variants, the rest alternate between normal-only and anomaly-only.
    pub paired_fraction: Option<f64>,
    pub image_size: usize,
    pub vocab_size: usize,
    /// Probability that a drawn caption subject is not a person.
    pub non_person_rate: f64,
    pub keypoint_jitter: f32,
    pub noise_std: f32,
    pub silhouette_noise_std: f32,
    pub min_keypoints: usize,
    pub min_confidence: f32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_identities: 400,
            n_test_identities: 100,
            images_per_caption: 3,
            ratio: [2, 3],
            paired_fraction: None,
            image_size: 32,
            vocab_size: 512,
            non_person_rate: 0.1,
            keypoint_jitter: 0.02,
            noise_std: 0.03,
            silhouette_noise_std: 0.08,
            min_keypoints: 5,
            min_confidence: 0.3,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 {
            return Err(Error::config("corpus.n_identities", "must be at least 1"));
        }
        if self.images_per_caption == 0 {
            return Err(Error::config("corpus.images_per_caption", "must be at least 1"));
        }
        if self.ratio[0] + self.ratio[1] == 0 {
            return Err(Error::config("corpus.ratio", "both sides are zero"));
        }
        if let Some(f) = self.paired_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("corpus.paired_fraction", "must lie in [0, 1]"));
            }
        }
        if self.n_identities + self.n_test_identities > Appearance::COMBINATIONS {
            return Err(Error::config(
                "corpus.n_identities",
                format!("at most {} distinct identities exist", Appearance::COMBINATIONS),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::config("corpus.image_size", "must be at least 8"));
        }
        if !(0.0..1.0).contains(&self.non_person_rate) {
            return Err(Error::config("corpus.non_person_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub train_normal: usize,
    pub train_anomaly: usize,
    pub test_normal: usize,
    pub test_anomaly: usize,
    pub paired_identities: usize,
    pub unpaired_identities: usize,
    pub subject_rejected: usize,
    pub pose_dropped: usize,
    pub ratio: [u32; 2],
    /// `|normal − anomaly · r_n / r_a|` over the training split, in records.
    pub ratio_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub identities: Vec<IdentitySpec>,
    pub records: Vec<CorpusRecord>,
    pub index: PairIndex,
    pub report: CorpusReport,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Hash of the generating configuration, embedded in the manifest.
    pub fn config_hash(&self) -> String {
        crate::config::content_hash(&self.config)
    }

    pub fn record(&self, record_id: u32) -> Option<&CorpusRecord> {
        // Ids are assigned densely at generation time; filtering may leave gaps.
        match self.records.get(record_id as usize) {
            Some(r) if r.record_id == record_id => Some(r),
            _ => self.records.iter().find(|r| r.record_id == record_id),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.config.vocab_size)
    }
}

/// True iff the first body token (the subject slot) is in the lexicon.
pub fn subject_filter(caption: &TextInput, lexicon: &[u32]) -> bool {
    caption.body().first().is_some_and(|t| lexicon.contains(t))
}

pub fn person_lexicon(vocab: &Vocabulary) -> Vec<u32> {
    PERSON_LEXICON.iter().filter_map(|w| vocab.id(w)).collect()
}

/// Enough confidently detected joints.
pub fn has_pose(keypoints: &[Keypoint], min_keypoints: usize, min_confidence: f32) -> bool {
    keypoints.iter().filter(|k| k.confidence >= min_confidence).count() >= min_keypoints
}

pub fn pose_presence_filter(records: Vec<CorpusRecord>, min_keypoints: usize, min_confidence: f32) -> Vec<CorpusRecord> {
    records
        .into_iter()
        .filter(|r| has_pose(&r.pose.keypoints, min_keypoints, min_confidence))
        .collect()
}

/// Source of keypoints for an image. The generator knows the true pose, so
/// the default source simply returns it.
pub trait KeypointDetector {
    fn detect(&self, record: &CorpusRecord) -> Vec<Keypoint>;
}

pub struct GroundTruthKeypoints;

impl KeypointDetector for GroundTruthKeypoints {
    fn detect(&self, record: &CorpusRecord) -> Vec<Keypoint> {
        record.pose.keypoints.clone()
    }
}

/// Hook for rejecting images in which the person covers too little area.
/// Generated images always frame the person, so no implementation ships.
pub trait PersonAreaFilter {
    fn keep(&self, record: &CorpusRecord) -> bool;
}

/// Frames in the middle of the segments before and after the anomaly.
pub fn extract_frame_pair(num_frames: usize, timestamp: usize) -> Result<(usize, usize)> {
    if timestamp == 0 || timestamp >= num_frames {
        return Err(Error::invalid(
            "extract_frame_pair",
            format!("timestamp {timestamp} outside the open interval (0, {num_frames})"),
        ));
    }
    Ok((timestamp / 2, (timestamp + num_frames) / 2))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("similarity_dedup", "zero-norm feature"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Drops pairs whose features are more similar than `threshold`; a pair at
/// exactly the threshold is kept. `features` maps a pair to its two feature
/// vectors.
pub fn similarity_dedup<P, F>(pairs: Vec<P>, threshold: f64, features: F) -> Result<Vec<P>>
where
    F: Fn(&P) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut kept = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (a, b) = features(&p)?;
        if cosine(&a, &b)? <= threshold {
            kept.push(p);
        }
    }
    Ok(kept)
}

/// `[CLS] C_n [SEP] C_a`, keeping the first [`MAX_TEXT_LEN`] tokens.
pub fn concat_captions(normal: &TextInput, anomaly: &TextInput) -> TextInput {
    let mut tokens = vec![CLS];
    tokens.extend_from_slice(normal.body());
    tokens.push(SEP);
    tokens.extend_from_slice(anomaly.body());
    tokens.truncate(MAX_TEXT_LEN);
    TextInput::new(tokens).expect("starts with CLS and is truncated")
}

struct Plan {
    spec: IdentitySpec,
    normal_caption: TextInput,
    anomaly_caption: TextInput,
    n_normal: usize,
    n_anomaly: usize,
    first_record: u32,
}

/// Per-identity image counts for the training split.
fn allocate(cfg: &CorpusConfig, n: usize) -> Vec<(usize, usize)> {
    let m = cfg.images_per_caption;
    if let Some(f) = cfg.paired_fraction {
        let paired = (f * n as f64).round() as usize;
        return (0..n)
            .map(|i| match i {
                i if i < paired => (m, m),
                i if (i - paired) % 2 == 0 => (m, 0),
                _ => (0, m),
            })
            .collect();
    }
    let [a, b] = cfg.ratio.map(|v| v as usize);
    // The majority side gets every identity; the minority side is filled
    // until the count matches the ratio, the last identity taking the rest.
    let (major, minor, swap) = if a <= b { (b, a, false) } else { (a, b, true) };
    let major_total = n * m;
    let minor_total = ((major_total * minor) as f64 / major as f64).round() as usize;
    (0..n)
        .map(|i| {
            let given = (i * m).min(minor_total);
            let minor_count = (minor_total - given).min(m);
            if swap {
                (m, minor_count)
            } else {
                (minor_count, m)
            }
        })
        .collect()
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg.vocab_size)?;
    let lexicon = person_lexicon(&vocab);
    let mut rng = seeded_rng(cfg.seed, 0);
    let mut combos: Vec<usize> = (0..Appearance::COMBINATIONS).collect();
    combos.shuffle(&mut rng);
    let persons: Vec<&str> = SUBJECTS.iter().copied().filter(|s| PERSON_LEXICON.contains(s)).collect();
    let others: Vec<&str> = SUBJECTS.iter().copied().filter(|s| !PERSON_LEXICON.contains(s)).collect();

    let wanted = cfg.n_identities + cfg.n_test_identities;
    let mut accepted = Vec::with_capacity(wanted);
    let mut rejected = 0;
    for &combo in &combos {
        if accepted.len() == wanted {
            break;
        }
        let app = Appearance::from_index(combo);
        let subject = if rng.random::<f64>() < cfg.non_person_rate {
            others[rng.random_range(0..others.len())]
        } else {
            persons[rng.random_range(0..persons.len())]
        };
        let normal = NORMAL_ACTIONS[rng.random_range(0..NORMAL_ACTIONS.len())];
        let anomaly = ANOMALY_ACTIONS[rng.random_range(0..ANOMALY_ACTIONS.len())];
        let c_n = vocab.tokenize(&caption_text(subject, &app, &normal))?;
        if !subject_filter(&c_n, &lexicon) {
            rejected += 1;
            continue;
        }
        let c_a = vocab.tokenize(&caption_text(subject, &app, &anomaly))?;
        accepted.push((subject, app, normal, anomaly, c_n, c_a));
    }
    if accepted.len() < wanted {
        return Err(Error::config(
            "corpus.n_identities",
            format!("only {} identities survived the subject filter", accepted.len()),
        ));
    }

    // Held-out identities come first so the test split does not depend on
    // the training size.
    let train_counts = allocate(cfg, cfg.n_identities);
    let mut next_record = 0u32;
    let plans: Vec<Plan> = accepted
        .into_iter()
        .enumerate()
        .map(|(i, (subject, app, normal, anomaly, c_n, c_a))| {
            let (split, (n_normal, n_anomaly)) = if i < cfg.n_test_identities {
                (Split::Test, (1, 1))
            } else {
                (Split::Train, train_counts[i - cfg.n_test_identities])
            };
            let plan = Plan {
                spec: IdentitySpec {
                    identity_id: i as u32,
                    split,
                    subject: subject.to_string(),
                    appearance: app,
                    appearance_vector: appearance_vector(&app),
                    background_vector: background_vector(&app),
                    normal_action: normal.label.to_string(),
                    anomaly_action: anomaly.label.to_string(),
                    scene: SCENES[app.scene].to_string(),
                },
                normal_caption: c_n,
                anomaly_caption: c_a,
                n_normal,
                n_anomaly,
                first_record: next_record,
            };
            next_record += (n_normal + n_anomaly) as u32;
            plan
        })
        .collect();

    let noise = RenderNoise { base_std: cfg.noise_std, silhouette_std: cfg.silhouette_noise_std };
    let per_identity: Vec<Vec<CorpusRecord>> = plans
        .par_iter()
        .map(|p| render_identity(cfg, p, noise))
        .collect::<Result<_>>()?;
    let all: Vec<CorpusRecord> = per_identity.into_iter().flatten().collect();
    let before = all.len();
    let records = pose_presence_filter(all, cfg.min_keypoints, cfg.min_confidence);
    let pose_dropped = before - records.len();

    let index = PairIndex::build(&records);
    let identities: Vec<IdentitySpec> = plans.into_iter().map(|p| p.spec).collect();
    let report = build_report(cfg, &records, &index, &identities, rejected, pose_dropped);
    Ok(Corpus { config: cfg.clone(), identities, records, index, report })
}

fn render_identity(cfg: &CorpusConfig, plan: &Plan, noise: RenderNoise) -> Result<Vec<CorpusRecord>> {
    let spec = &plan.spec;
    let mut rng = seeded_rng(cfg.seed, 1 + spec.identity_id as u64);
    let paired = plan.n_normal > 0 && plan.n_anomaly > 0;
    let plus = concat_captions(&plan.normal_caption, &plan.anomaly_caption);
    let mut out = Vec::with_capacity(plan.n_normal + plan.n_anomaly);
    let variants = std::iter::repeat_n(Variant::Normal, plan.n_normal).chain(std::iter::repeat_n(Variant::Anomaly, plan.n_anomaly));
    for (k, variant) in variants.enumerate() {
        let (action, caption, kind, prompt) = match variant {
            Variant::Normal => (&spec.normal_action, &plan.normal_caption, CaptionKind::Normal, &plan.normal_caption),
            Variant::Anomaly if paired => (&spec.anomaly_action, &plan.anomaly_caption, CaptionKind::AnomalyPlus, &plus),
            Variant::Anomaly => (&spec.anomaly_action, &plan.anomaly_caption, CaptionKind::Anomaly, &plan.anomaly_caption),
        };
        let template = skeleton_template(action).expect("actions come from the template table");
        let keypoints = sample_keypoints(&template, cfg.keypoint_jitter, &mut rng);
        let image = render_image(&spec.appearance, &keypoints, cfg.image_size, noise, &mut rng)?;
        let pose = render_pose(keypoints, cfg.image_size)?;
        out.push(CorpusRecord {
            record_id: plan.first_record + k as u32,
            identity_id: spec.identity_id,
            split: spec.split,
            variant,
            caption_kind: kind,
            image,
            pose,
            caption: caption.clone(),
            prompt: prompt.clone(),
            action: action.clone(),
            scene: spec.scene.clone(),
        });
    }
    Ok(out)
}

fn build_report(
    cfg: &CorpusConfig,
    records: &[CorpusRecord],
    index: &PairIndex,
    identities: &[IdentitySpec],
    subject_rejected: usize,
    pose_dropped: usize,
) -> CorpusReport {
    let count = |split, variant| records.iter().filter(|r| r.split == split && r.variant == variant).count();
    let (tn, ta) = (count(Split::Train, Variant::Normal), count(Split::Train, Variant::Anomaly));
    let train_ids = identities.iter().filter(|i| i.split == Split::Train);
    let paired = train_ids
        .clone()
        .filter(|i| index.identity(i.identity_id).is_some_and(IdentityRecords::is_paired))
        .count();
    let [a, b] = cfg.ratio;
    let ratio_deviation = if b > 0 {
        (tn as f64 - ta as f64 * a as f64 / b as f64).abs()
    } else {
        ta as f64
    };
    CorpusReport {
        train_normal: tn,
        train_anomaly: ta,
        test_normal: count(Split::Test, Variant::Normal),
        test_anomaly: count(Split::Test, Variant::Anomaly),
        paired_identities: paired,
        unpaired_identities: train_ids.count() - paired,
        subject_rejected,
        pose_dropped,
        ratio: cfg.ratio,
        ratio_deviation,
    }
}
