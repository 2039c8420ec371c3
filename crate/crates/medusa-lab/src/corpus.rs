//! Synthetic image/report corpus generation.
//!
//! The two classes are separable by construction: normal images are noisy
//! flat backgrounds, disease images carry one or more soft bright blobs, and
//! reports mix shared filler tokens with class keywords. A third distractor
//! class (striped images, hardware-style keywords) widens the corpus of the
//! general-domain encoder. All draws come from named substreams of one seed,
//! so regenerating with the same spec is byte-identical.

use serde::{Deserialize, Serialize};

use crate::data::{Image, Report};
use crate::error::{Error, Result};
use crate::numkit::{Rng, Tensor};
use crate::ragsim::KnowledgeBase;

/// Label used internally for the broadening class in general-domain corpora.
pub const DISTRACTOR_LABEL: &str = "distractor";

/// Parameters of the synthetic world.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub image_size: usize,
    pub normal_label: String,
    pub target_label: String,
    pub background_base: f64,
    pub background_noise: f64,
    pub blob_count_min: usize,
    pub blob_count_max: usize,
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    pub blob_intensity_min: f64,
    pub blob_intensity_max: f64,
    pub report_len_min: usize,
    pub report_len_max: usize,
    /// Class-keyword tokens per report; the rest are filler.
    pub keyword_tokens: usize,
    pub filler: Vec<String>,
    pub normal_keywords: Vec<String>,
    pub disease_keywords: Vec<String>,
    pub distractor_keywords: Vec<String>,
    pub seed: u64,
}

/// Defaults: 64-token vocabulary, blobs visible but not saturating.
pub fn default_corpus_spec(image_size: usize, seed: u64) -> SyntheticCorpusSpec {
    let words = |list: &[&str]| list.iter().map(|s| s.to_string()).collect();
    SyntheticCorpusSpec {
        image_size,
        normal_label: "normal".into(),
        target_label: "pneumonia".into(),
        background_base: 0.35,
        background_noise: 0.08,
        blob_count_min: 1,
        blob_count_max: 3,
        blob_radius_min: image_size as f64 * 0.09,
        blob_radius_max: image_size as f64 * 0.2,
        blob_intensity_min: 0.3,
        blob_intensity_max: 0.55,
        report_len_min: 8,
        report_len_max: 14,
        keyword_tokens: 3,
        filler: words(&[
            "the", "chest", "image", "exam", "view", "left", "right", "upper", "lower", "lung",
            "lungs", "field", "fields", "heart", "size", "contour", "bones", "soft", "tissue",
            "study", "patient", "frontal", "lateral", "noted", "seen", "within", "limits",
            "without", "evidence", "acute", "process", "prior", "comparison", "stable",
            "unchanged", "technique", "portable", "findings", "impression", "report",
        ]),
        normal_keywords: words(&[
            "clear",
            "normal",
            "unremarkable",
            "lucent",
            "patent",
            "crisp",
            "welldefined",
            "aerated",
        ]),
        disease_keywords: words(&[
            "opacity",
            "consolidation",
            "infiltrate",
            "effusion",
            "haziness",
            "airspace",
            "patchy",
            "dense",
        ]),
        distractor_keywords: words(&[
            "fracture",
            "hardware",
            "scoliosis",
            "cardiomegaly",
            "nodule",
            "granuloma",
            "calcified",
            "devices",
        ]),
        seed,
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        if self.normal_label == self.target_label {
            return Err(Error::config("class labels must differ"));
        }
        for (name, list) in [
            ("filler", &self.filler),
            ("normal_keywords", &self.normal_keywords),
            ("disease_keywords", &self.disease_keywords),
            ("distractor_keywords", &self.distractor_keywords),
        ] {
            if list.is_empty() {
                return Err(Error::config(format!("{name} vocabulary must be nonempty")));
            }
        }
        let vocab = self.vocabulary();
        let mut dedup = vocab.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != vocab.len() {
            return Err(Error::config("vocabulary lists must not overlap"));
        }
        if self.blob_count_min > self.blob_count_max
            || self.blob_radius_min > self.blob_radius_max
            || self.blob_intensity_min > self.blob_intensity_max
            || self.report_len_min > self.report_len_max
        {
            return Err(Error::config("range bounds are inverted"));
        }
        if self.keyword_tokens == 0 || self.keyword_tokens > self.report_len_min {
            return Err(Error::config(
                "keyword_tokens must be in 1..=report_len_min",
            ));
        }
        Ok(())
    }

    /// The full vocabulary, in a stable order shared by every encoder.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut vocab = Vec::new();
        vocab.extend(self.filler.iter().cloned());
        vocab.extend(self.normal_keywords.iter().cloned());
        vocab.extend(self.disease_keywords.iter().cloned());
        vocab.extend(self.distractor_keywords.iter().cloned());
        vocab
    }

    fn keywords_for(&self, label: &str) -> Result<&[String]> {
        if label == self.normal_label {
            Ok(&self.normal_keywords)
        } else if label == self.target_label {
            Ok(&self.disease_keywords)
        } else if label == DISTRACTOR_LABEL {
            Ok(&self.distractor_keywords)
        } else {
            Err(Error::contract(format!("no keyword set for label {label:?}")))
        }
    }
}

fn gen_pixels(spec: &SyntheticCorpusSpec, label: &str, rng: &mut Rng) -> Result<Tensor> {
    let n = spec.image_size;
    let mut data = vec![0.0; n * n];
    for px in data.iter_mut() {
        *px = (spec.background_base
            + rng.uniform_in(-spec.background_noise, spec.background_noise))
        .clamp(0.0, 1.0);
    }
    if label == spec.target_label {
        let blobs = rng.uniform_range(spec.blob_count_min, spec.blob_count_max);
        for _ in 0..blobs {
            let radius = rng.uniform_in(spec.blob_radius_min, spec.blob_radius_max);
            let cy = rng.uniform_in(radius, n as f64 - radius);
            let cx = rng.uniform_in(radius, n as f64 - radius);
            let intensity = rng.uniform_in(spec.blob_intensity_min, spec.blob_intensity_max);
            let sigma = radius / 2.0;
            for r in 0..n {
                for c in 0..n {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    let add = intensity * (-d2 / (2.0 * sigma * sigma)).exp();
                    data[r * n + c] = (data[r * n + c] + add).clamp(0.0, 1.0);
                }
            }
        }
    } else if label == DISTRACTOR_LABEL {
        let period = rng.uniform_range(3, 6);
        let amplitude = rng.uniform_in(0.2, 0.4);
        let vertical = rng.uniform() < 0.5;
        for r in 0..n {
            for c in 0..n {
                let phase = if vertical { c } else { r };
                if (phase / period) % 2 == 0 {
                    data[r * n + c] = (data[r * n + c] + amplitude).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(vec![n, n], data)
}

fn gen_report(
    spec: &SyntheticCorpusSpec,
    id: &str,
    label: &str,
    rng: &mut Rng,
) -> Result<Report> {
    let keywords = spec.keywords_for(label)?;
    let len = rng.uniform_range(spec.report_len_min, spec.report_len_max);
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..spec.keyword_tokens {
        tokens.push(keywords[rng.uniform_usize(keywords.len())].clone());
    }
    for _ in spec.keyword_tokens..len {
        tokens.push(spec.filler[rng.uniform_usize(spec.filler.len())].clone());
    }
    rng.shuffle(&mut tokens);
    Ok(Report::new(id, label, tokens))
}

fn gen_image(
    spec: &SyntheticCorpusSpec,
    id: &str,
    label: &str,
    rng: &mut Rng,
) -> Result<Image> {
    Image::new(id, label, gen_pixels(spec, label, rng)?)
}

/// Everything a campaign needs from the synthetic world.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub kb: KnowledgeBase,
    /// Clean attack inputs; always normal-labeled.
    pub attack_images: Vec<Image>,
    /// Paired ground-truth reports, aligned with `attack_images`.
    pub attack_truths: Vec<Report>,
    /// Target-labeled reports, disjoint from the knowledge base.
    pub target_pool: Vec<Report>,
}

/// Generates the knowledge base, attack set and target pool.
///
/// Deterministic for a fixed spec: the kb holds `kb_per_class` reports per
/// label, every attack image is normal-labeled, and target-pool ids never
/// collide with kb ids.
pub fn gen_corpus(
    spec: &SyntheticCorpusSpec,
    kb_per_class: usize,
    n_attack_images: usize,
    target_pool_size: usize,
) -> Result<CorpusBundle> {
    spec.validate()?;
    if kb_per_class == 0 || n_attack_images == 0 || target_pool_size == 0 {
        return Err(Error::config("corpus sizes must be positive"));
    }
    let root = Rng::new(spec.seed);

    let mut kb_rng = root.substream("kb");
    let mut reports = Vec::with_capacity(2 * kb_per_class);
    for i in 0..kb_per_class {
        reports.push(gen_report(
            spec,
            &format!("kb-n-{i:04}"),
            &spec.normal_label,
            &mut kb_rng,
        )?);
    }
    for i in 0..kb_per_class {
        reports.push(gen_report(
            spec,
            &format!("kb-t-{i:04}"),
            &spec.target_label,
            &mut kb_rng,
        )?);
    }
    let kb = KnowledgeBase::new(reports)?;

    let mut attack_rng = root.substream("attack-images");
    let mut attack_images = Vec::with_capacity(n_attack_images);
    let mut attack_truths = Vec::with_capacity(n_attack_images);
    for i in 0..n_attack_images {
        attack_images.push(gen_image(
            spec,
            &format!("img-{i:03}"),
            &spec.normal_label,
            &mut attack_rng,
        )?);
        attack_truths.push(gen_report(
            spec,
            &format!("truth-{i:03}"),
            &spec.normal_label,
            &mut attack_rng,
        )?);
    }

    let mut target_rng = root.substream("target-pool");
    let mut target_pool = Vec::with_capacity(target_pool_size);
    for i in 0..target_pool_size {
        target_pool.push(gen_report(
            spec,
            &format!("tgt-{i:03}"),
            &spec.target_label,
            &mut target_rng,
        )?);
    }

    Ok(CorpusBundle {
        kb,
        attack_images,
        attack_truths,
        target_pool,
    })
}

/// Paired training corpus for one encoder. With `with_distractors` every
/// third pair belongs to the broadening class.
pub fn gen_training_corpus(
    spec: &SyntheticCorpusSpec,
    seed: u64,
    n_pairs: usize,
    with_distractors: bool,
) -> Result<Vec<(Image, Report)>> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(Error::config("training corpus must be nonempty"));
    }
    let mut rng = Rng::new(seed).substream("train-corpus");
    let mut corpus = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let label = if with_distractors {
            match i % 3 {
                0 => spec.normal_label.as_str(),
                1 => spec.target_label.as_str(),
                _ => DISTRACTOR_LABEL,
            }
        } else if i % 2 == 0 {
            spec.normal_label.as_str()
        } else {
            spec.target_label.as_str()
        };
        let image = gen_image(spec, &format!("tr-{i:04}"), label, &mut rng)?;
        let report = gen_report(spec, &format!("trr-{i:04}"), label, &mut rng)?;
        corpus.push((image, report));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let spec = default_corpus_spec(16, 9);
        let a = gen_corpus(&spec, 10, 5, 8).unwrap();
        let b = gen_corpus(&spec, 10, 5, 8).unwrap();
        assert_eq!(a.attack_images, b.attack_images);
        assert_eq!(a.target_pool, b.target_pool);
        assert_eq!(a.kb.reports(), b.kb.reports());
    }

    #[test]
    fn kb_is_balanced_and_attack_images_normal() {
        let spec = default_corpus_spec(16, 9);
        let bundle = gen_corpus(&spec, 25, 10, 8).unwrap();
        assert_eq!(bundle.kb.class_count(&spec.normal_label), 25);
        assert_eq!(bundle.kb.class_count(&spec.target_label), 25);
        assert!(bundle
            .attack_images
            .iter()
            .all(|img| img.label == spec.normal_label));
        assert!(bundle
            .target_pool
            .iter()
            .all(|r| r.label == spec.target_label));
    }

    #[test]
    fn reports_keywords_match_label() {
        let spec = default_corpus_spec(16, 12);
        let bundle = gen_corpus(&spec, 20, 5, 5).unwrap();
        for report in bundle.kb.reports() {
            let keywords = if report.label == spec.normal_label {
                &spec.normal_keywords
            } else {
                &spec.disease_keywords
            };
            let count = report
                .tokens
                .iter()
                .filter(|t| keywords.contains(t))
                .count();
            assert!(count >= spec.keyword_tokens, "report {} lacks keywords", report.id);
            let wrong = if report.label == spec.normal_label {
                &spec.disease_keywords
            } else {
                &spec.normal_keywords
            };
            assert!(report.tokens.iter().all(|t| !wrong.contains(t)));
        }
    }

    #[test]
    fn disease_images_are_brighter_than_normal() {
        let spec = default_corpus_spec(16, 30);
        let corpus = gen_training_corpus(&spec, 4, 40, false).unwrap();
        let mean = |img: &Image| {
            img.pixels().data().iter().sum::<f64>() / img.pixels().len() as f64
        };
        let normal: Vec<f64> = corpus
            .iter()
            .filter(|(i, _)| i.label == spec.normal_label)
            .map(|(i, _)| mean(i))
            .collect();
        let disease: Vec<f64> = corpus
            .iter()
            .filter(|(i, _)| i.label == spec.target_label)
            .map(|(i, _)| mean(i))
            .collect();
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(avg(&disease) > avg(&normal) + 0.01);
    }
}
