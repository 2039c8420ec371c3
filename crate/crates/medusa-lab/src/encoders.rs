//! Aligned image/text encoder pairs.
//!
//! Each pair is a miniature dual-encoder retriever: the image branch is
//! patch mean-pooling followed by a two-layer tanh MLP, the text branch is a
//! single affine map over a bag-of-words, and both branches end in L2
//! normalization so every embedding is unit-norm. Pairs are trained with a
//! full-batch contrastive alignment loss (in-batch negatives over the whole
//! corpus), which keeps training bit-reproducible for a given seed.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Image, Report};
use crate::error::{Error, Result};
use crate::io::{from_json, to_json_17};
use crate::numkit::tape::{NodeId, Tape};
use crate::numkit::{Rng, Tensor};

/// Where a pair's training data came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Domain,
    General,
    Victim,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Domain => write!(f, "domain"),
            Provenance::General => write!(f, "general"),
            Provenance::Victim => write!(f, "victim"),
        }
    }
}

/// Architecture of one encoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub image_height: usize,
    pub image_width: usize,
    /// Side length of the mean-pooled image patches.
    pub patch: usize,
    /// Hidden width of the image branch.
    pub hidden: usize,
    /// Token vocabulary; the bag-of-words dimension is `vocab.len()`.
    pub vocab: Vec<String>,
    /// Shared embedding dimension.
    pub dim: usize,
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::contract("embedding dim must be >= 2"));
        }
        if self.patch == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            return Err(Error::contract(format!(
                "patch {} must divide image dims {}x{}",
                self.patch, self.image_height, self.image_width
            )));
        }
        if self.hidden < self.dim {
            return Err(Error::contract("hidden width must be >= dim"));
        }
        if self.vocab.is_empty() {
            return Err(Error::contract("vocabulary must be nonempty"));
        }
        let mut sorted = self.vocab.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.vocab.len() {
            return Err(Error::contract("vocabulary tokens must be unique"));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.vocab.iter().position(|t| t == token)
    }
}

/// Tape handles for one pair's weights.
#[derive(Debug, Clone, Copy)]
pub struct PairNodes {
    pub img_w1: NodeId,
    pub img_b1: NodeId,
    pub img_w2: NodeId,
    pub img_b2: NodeId,
    pub txt_w: NodeId,
    pub txt_b: NodeId,
}

/// One surrogate or victim image/text encoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub arch: EncoderArch,
    pub img_w1: Tensor,
    pub img_b1: Tensor,
    pub img_w2: Tensor,
    pub img_b2: Tensor,
    pub txt_w: Tensor,
    pub txt_b: Tensor,
    pub seed: u64,
    pub tag: Provenance,
}

impl EncoderPair {
    /// Fresh pair with seeded uniform init scaled by 1/√fan_in.
    pub fn init(arch: EncoderArch, seed: u64, tag: Provenance) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::new(seed).substream("encoder-init");
        let mut uniform = |rows: usize, cols: usize| {
            let a = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.uniform_in(-a, a)).collect();
            Tensor::matrix(rows, cols, data)
        };
        let np = arch.n_patches();
        let img_w1 = uniform(arch.hidden, np)?;
        let img_w2 = uniform(arch.dim, arch.hidden)?;
        let txt_w = uniform(arch.dim, arch.vocab.len())?;
        Ok(EncoderPair {
            img_b1: Tensor::zeros(vec![arch.hidden]),
            img_b2: Tensor::zeros(vec![arch.dim]),
            txt_b: Tensor::zeros(vec![arch.dim]),
            arch,
            img_w1,
            img_w2,
            txt_w,
            seed,
            tag,
        })
    }

    pub fn with_tag(mut self, tag: Provenance) -> Self {
        self.tag = tag;
        self
    }

    /// Stable identifier derived from provenance and training seed.
    pub fn id(&self) -> String {
        format!("{}-s{}", self.tag, self.seed)
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    fn validate_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        let np = self.arch.n_patches();
        let checks = [
            (self.img_w1.shape(), vec![self.arch.hidden, np], "img_w1"),
            (self.img_b1.shape(), vec![self.arch.hidden], "img_b1"),
            (
                self.img_w2.shape(),
                vec![self.arch.dim, self.arch.hidden],
                "img_w2",
            ),
            (self.img_b2.shape(), vec![self.arch.dim], "img_b2"),
            (
                self.txt_w.shape(),
                vec![self.arch.dim, self.arch.vocab.len()],
                "txt_w",
            ),
            (self.txt_b.shape(), vec![self.arch.dim], "txt_b"),
        ];
        for (got, expected, name) in checks {
            if got != expected.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{expected:?}"),
                    got: format!("{got:?}"),
                    context: format!("encoder weight {name}"),
                });
            }
        }
        Ok(())
    }

    /// Pushes all six weight tensors onto a tape, marked or constant.
    pub fn push_weights(&self, tape: &mut Tape, marked: bool) -> Result<PairNodes> {
        let mut push = |t: &Tensor| {
            if marked {
                tape.input(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Ok(PairNodes {
            img_w1: push(&self.img_w1)?,
            img_b1: push(&self.img_b1)?,
            img_w2: push(&self.img_w2)?,
            img_b2: push(&self.img_b2)?,
            txt_w: push(&self.txt_w)?,
            txt_b: push(&self.txt_b)?,
        })
    }

    /// Image branch on a tape: patch-mean → affine → tanh → affine → normalize.
    pub fn image_forward(&self, tape: &mut Tape, nodes: &PairNodes, x: NodeId) -> Result<NodeId> {
        let pooled = tape.patch_mean(x, self.arch.patch)?;
        let h = tape.affine(nodes.img_w1, pooled, nodes.img_b1)?;
        let h = tape.tanh(h)?;
        let e = tape.affine(nodes.img_w2, h, nodes.img_b2)?;
        tape.normalize(e)
    }

    /// Text branch on a tape: affine over a bag-of-words → normalize.
    pub fn text_forward(&self, tape: &mut Tape, nodes: &PairNodes, bag: NodeId) -> Result<NodeId> {
        let e = tape.affine(nodes.txt_w, bag, nodes.txt_b)?;
        tape.normalize(e)
    }

    fn check_image_dims(&self, pixels: &Tensor) -> Result<()> {
        let expected = [self.arch.image_height, self.arch.image_width];
        if pixels.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected:?}"),
                got: format!("{:?}", pixels.shape()),
                context: "encode_image".into(),
            });
        }
        Ok(())
    }

    /// Unit-norm embedding of an image.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        self.encode_pixels(image.pixels())
    }

    /// Unit-norm embedding of raw pixels (same contract as [`encode_image`]).
    pub fn encode_pixels(&self, pixels: &Tensor) -> Result<Tensor> {
        self.check_image_dims(pixels)?;
        let mut tape = Tape::new();
        let x = tape.constant(pixels.clone())?;
        let nodes = self.push_weights(&mut tape, false)?;
        let e = self.image_forward(&mut tape, &nodes, x)?;
        let out = tape.value(e).clone();
        ensure_unit(&out, "encode_image")?;
        Ok(out)
    }

    /// Token counts over the vocabulary. Errors on out-of-vocabulary tokens.
    pub fn bag_of_words(&self, report: &Report) -> Result<Tensor> {
        let mut bag = vec![0.0; self.arch.vocab.len()];
        for token in &report.tokens {
            match self.arch.token_index(token) {
                Some(i) => bag[i] += 1.0,
                None => {
                    return Err(Error::UnknownToken {
                        token: token.clone(),
                        report_id: report.id.clone(),
                    })
                }
            }
        }
        Ok(Tensor::vector(bag))
    }

    /// Unit-norm embedding of a report (bag-of-words, so token order is
    /// irrelevant). Errors on empty reports and out-of-vocabulary tokens.
    pub fn encode_text(&self, report: &Report) -> Result<Tensor> {
        if report.tokens.is_empty() {
            return Err(Error::DegenerateVector {
                norm: 0.0,
                context: format!("encode_text: report {} is empty", report.id),
            });
        }
        let bag = self.bag_of_words(report)?;
        let mut tape = Tape::new();
        let b = tape.constant(bag)?;
        let nodes = self.push_weights(&mut tape, false)?;
        let e = self.text_forward(&mut tape, &nodes, b)?;
        let out = tape.value(e).clone();
        ensure_unit(&out, "encode_text")?;
        Ok(out)
    }

    /// All weights flattened in a fixed order, for heterogeneity checks.
    pub fn flattened_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in [
            &self.img_w1,
            &self.img_b1,
            &self.img_w2,
            &self.img_b2,
            &self.txt_w,
            &self.txt_b,
        ] {
            out.extend_from_slice(t.data());
        }
        out
    }
}

fn ensure_unit(embedding: &Tensor, context: &str) -> Result<()> {
    let norm = embedding.norm_l2();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::DegenerateVector {
            norm,
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Cosine similarity of two pairs' flattened weight vectors; `None` when the
/// architectures have different parameter counts.
pub fn weight_cosine(a: &EncoderPair, b: &EncoderPair) -> Option<f64> {
    let fa = a.flattened_weights();
    let fb = b.flattened_weights();
    if fa.len() != fb.len() {
        return None;
    }
    crate::numkit::cosine_sim(&Tensor::vector(fa), &Tensor::vector(fb)).ok()
}

/// Minimum held-out matched-label retrieval accuracy for a trained pair.
pub const TRAIN_ACCURACY_FLOOR: f64 = 0.90;

/// Trains an aligned pair with full-batch gradient descent on the
/// contrastive alignment loss (softmax over in-batch negatives).
///
/// Deterministic for fixed `(corpus, arch, seed, epochs, lr)`. Returns a
/// [`Error::TrainingDiverged`] carrying the final accuracy when the held-out
/// matched-label top-1 accuracy ends below [`TRAIN_ACCURACY_FLOOR`].
pub fn train_aligned_pair(
    corpus: &[(Image, Report)],
    arch: &EncoderArch,
    seed: u64,
    epochs: usize,
    lr: f64,
) -> Result<EncoderPair> {
    if corpus.is_empty() {
        return Err(Error::contract("training corpus must be nonempty"));
    }
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    for (image, report) in corpus {
        if image.label != report.label {
            return Err(Error::contract(format!(
                "paired items must share labels: image {} is {:?}, report {} is {:?}",
                image.id, image.label, report.id, report.label
            )));
        }
    }

    let mut pair = EncoderPair::init(arch.clone(), seed, Provenance::Domain)?;

    // Deterministic 80/20 split: every fifth item is held out.
    let holdout: Vec<usize> = (0..corpus.len()).filter(|i| i % 5 == 4).collect();
    let train: Vec<usize> = (0..corpus.len()).filter(|i| i % 5 != 4).collect();
    let train = if train.is_empty() { vec![0] } else { train };

    let bags: Vec<Tensor> = corpus
        .iter()
        .map(|(_, r)| pair.bag_of_words(r))
        .collect::<Result<_>>()?;

    for _ in 0..epochs {
        let mut tape = Tape::new();
        let nodes = pair.push_weights(&mut tape, true)?;

        let text_nodes: Vec<NodeId> = train
            .iter()
            .map(|&j| {
                let bag = tape.constant(bags[j].clone())?;
                pair.text_forward(&mut tape, &nodes, bag)
            })
            .collect::<Result<_>>()?;
        let text_matrix = tape.stack_rows(&text_nodes)?;
        let zero_bias = tape.constant(Tensor::zeros(vec![train.len()]))?;

        let mut losses = Vec::with_capacity(train.len());
        for (row, &i) in train.iter().enumerate() {
            let x = tape.constant(corpus[i].0.pixels().clone())?;
            let e = pair.image_forward(&mut tape, &nodes, x)?;
            let sims = tape.affine(text_matrix, e, zero_bias)?;
            let denom = tape.log_sum_exp(sims)?;
            let own = tape.index(sims, row)?;
            losses.push(tape.sub(denom, own)?);
        }
        let total = tape.sum_list(&losses)?;
        let loss = tape.scale(total, 1.0 / train.len() as f64)?;

        let grads = tape.backward(loss)?;
        for (weight, node) in [
            (&mut pair.img_w1, nodes.img_w1),
            (&mut pair.img_b1, nodes.img_b1),
            (&mut pair.img_w2, nodes.img_w2),
            (&mut pair.img_b2, nodes.img_b2),
            (&mut pair.txt_w, nodes.txt_w),
            (&mut pair.txt_b, nodes.txt_b),
        ] {
            weight.add_scaled_assign(grads.wrt(node), -lr)?;
        }
    }

    let eval: Vec<usize> = if holdout.is_empty() {
        (0..corpus.len()).collect()
    } else {
        holdout
    };
    let images: Vec<Image> = eval.iter().map(|&i| corpus[i].0.clone()).collect();
    let reports: Vec<Report> = eval.iter().map(|&i| corpus[i].1.clone()).collect();
    let accuracy = matched_label_top1_accuracy(&pair, &images, &reports)?;
    if accuracy < TRAIN_ACCURACY_FLOOR {
        return Err(Error::TrainingDiverged {
            accuracy,
            required: TRAIN_ACCURACY_FLOOR,
        });
    }
    Ok(pair)
}

/// Fraction of images whose top-1 retrieved report (by embedding dot
/// product) carries the image's label. Ties break toward the lower index.
pub fn matched_label_top1_accuracy(
    pair: &EncoderPair,
    images: &[Image],
    reports: &[Report],
) -> Result<f64> {
    if images.is_empty() || reports.is_empty() {
        return Err(Error::contract("accuracy needs nonempty images and reports"));
    }
    let text_embs: Vec<Tensor> = reports
        .iter()
        .map(|r| pair.encode_text(r))
        .collect::<Result<_>>()?;
    let mut hits = 0usize;
    for image in images {
        let e = pair.encode_image(image)?;
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (j, t) in text_embs.iter().enumerate() {
            let s = e.dot(t)?;
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        if reports[best].label == image.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// The full alignment loss of a pair over a corpus, for diagnostics/tests.
pub fn alignment_loss(pair: &EncoderPair, corpus: &[(Image, Report)]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::contract("alignment_loss needs a nonempty corpus"));
    }
    let texts: Vec<Tensor> = corpus
        .iter()
        .map(|(_, r)| pair.encode_text(r))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (i, (image, _)) in corpus.iter().enumerate() {
        let e = pair.encode_image(image)?;
        let sims: Vec<f64> = texts.iter().map(|t| e.dot(t)).collect::<Result<_>>()?;
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        total += lse - sims[i];
    }
    Ok(total / corpus.len() as f64)
}

// ---------------------------------------------------------------------------
// Persistence: JSON with an explicit shape header, floats at 17 significant
// digits so load(save(p)) reproduces p bit-exactly.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ImageWeightsFile {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Serialize, Deserialize)]
struct TextWeightsFile {
    w: Tensor,
    b: Tensor,
}

#[derive(Serialize, Deserialize)]
struct PairFile {
    arch: EncoderArch,
    image_weights: ImageWeightsFile,
    text_weights: TextWeightsFile,
    seed: u64,
    tag: Provenance,
}

pub fn save_pair(pair: &EncoderPair, path: &Path) -> Result<()> {
    pair.validate_shapes()?;
    let file = PairFile {
        arch: pair.arch.clone(),
        image_weights: ImageWeightsFile {
            w1: pair.img_w1.clone(),
            b1: pair.img_b1.clone(),
            w2: pair.img_w2.clone(),
            b2: pair.img_b2.clone(),
        },
        text_weights: TextWeightsFile {
            w: pair.txt_w.clone(),
            b: pair.txt_b.clone(),
        },
        seed: pair.seed,
        tag: pair.tag,
    };
    std::fs::write(path, to_json_17(&file)?)?;
    Ok(())
}

pub fn load_pair(path: &Path) -> Result<EncoderPair> {
    let text = std::fs::read_to_string(path)?;
    let file: PairFile = from_json(&text)?;
    let pair = EncoderPair {
        arch: file.arch,
        img_w1: file.image_weights.w1,
        img_b1: file.image_weights.b1,
        img_w2: file.image_weights.w2,
        img_b2: file.image_weights.b2,
        txt_w: file.text_weights.w,
        txt_b: file.text_weights.b,
        seed: file.seed,
        tag: file.tag,
    };
    pair.validate_shapes()?;
    Ok(pair)
}

// ---------------------------------------------------------------------------
// Surrogate sets
// ---------------------------------------------------------------------------

/// Ordered surrogate ensemble with a fixed train/test partition.
#[derive(Debug, Clone)]
pub struct SurrogateSet {
    members: Vec<EncoderPair>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    victim_id: Option<String>,
}

impl SurrogateSet {
    /// Builds a set from explicit members and partition indices.
    ///
    /// The partition must be disjoint and cover every member, and the train
    /// side must be nonempty.
    pub fn new(
        members: Vec<EncoderPair>,
        train_idx: Vec<usize>,
        test_idx: Vec<usize>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::contract("surrogate set must be nonempty"));
        }
        if train_idx.is_empty() {
            return Err(Error::contract("train partition must be nonempty"));
        }
        let mut seen = vec![false; members.len()];
        for &i in train_idx.iter().chain(&test_idx) {
            if i >= members.len() {
                return Err(Error::contract(format!("partition index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::contract(format!(
                    "partition index {i} appears twice; train/test must be disjoint"
                )));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::contract("partition must cover every member"));
        }
        Ok(SurrogateSet {
            members,
            train_idx,
            test_idx,
            victim_id: None,
        })
    }

    /// Leave-one-out construction: `pool[victim]` becomes the black-box
    /// victim and is never a member. By default every non-general member
    /// trains and general members are held out for the outer loop; when no
    /// general member exists the last member is held out instead.
    pub fn leave_one_out(pool: &[EncoderPair], victim: usize) -> Result<(Self, EncoderPair)> {
        if victim >= pool.len() {
            return Err(Error::contract(format!(
                "victim index {victim} out of range for pool of {}",
                pool.len()
            )));
        }
        if pool.len() < 2 {
            return Err(Error::contract("leave-one-out needs at least two pairs"));
        }
        let victim_pair = pool[victim].clone();
        let members: Vec<EncoderPair> = pool
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != victim)
            .map(|(_, p)| p.clone())
            .collect();
        let general: Vec<usize> = members
            .iter()
            .enumerate()
            .filter(|(_, p)| p.tag == Provenance::General)
            .map(|(i, _)| i)
            .collect();
        let (train_idx, test_idx) = if general.is_empty() {
            if members.len() == 1 {
                (vec![0], vec![])
            } else {
                let last = members.len() - 1;
                ((0..last).collect(), vec![last])
            }
        } else {
            let train: Vec<usize> = (0..members.len()).filter(|i| !general.contains(i)).collect();
            if train.is_empty() {
                // All members are general; keep one on the train side.
                ((0..1).collect(), (1..members.len()).collect())
            } else {
                (train, general)
            }
        };
        let mut set = SurrogateSet::new(members, train_idx, test_idx)?;
        set.victim_id = Some(victim_pair.id());
        Ok((set, victim_pair))
    }

    /// White-box set: the victim itself is the sole (train) surrogate.
    pub fn white_box(victim: &EncoderPair) -> Result<Self> {
        SurrogateSet::new(vec![victim.clone()], vec![0], vec![])
    }

    pub fn with_partition(mut self, train_idx: Vec<usize>, test_idx: Vec<usize>) -> Result<Self> {
        let victim_id = self.victim_id.take();
        let mut set = SurrogateSet::new(self.members, train_idx, test_idx)?;
        set.victim_id = victim_id;
        Ok(set)
    }

    /// Drops every general-provenance member (ensemble ablation), keeping the
    /// partition rule: remaining members all train except a held-out last.
    pub fn without_general(&self) -> Result<Self> {
        let members: Vec<EncoderPair> = self
            .members
            .iter()
            .filter(|p| p.tag != Provenance::General)
            .cloned()
            .collect();
        if members.is_empty() {
            return Err(Error::contract("ablation removed every surrogate"));
        }
        let (train_idx, test_idx) = if members.len() == 1 {
            (vec![0], vec![])
        } else {
            let last = members.len() - 1;
            ((0..last).collect(), vec![last])
        };
        let mut set = SurrogateSet::new(members, train_idx, test_idx)?;
        set.victim_id = self.victim_id.clone();
        Ok(set)
    }

    pub fn members(&self) -> &[EncoderPair] {
        &self.members
    }

    pub fn train_members(&self) -> Vec<&EncoderPair> {
        self.train_idx.iter().map(|&i| &self.members[i]).collect()
    }

    pub fn test_members(&self) -> Vec<&EncoderPair> {
        self.test_idx.iter().map(|&i| &self.members[i]).collect()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_idx
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|p| p.id()).collect()
    }

    pub fn victim_id(&self) -> Option<&str> {
        self.victim_id.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_corpus_spec, gen_training_corpus};

    fn tiny_arch() -> EncoderArch {
        EncoderArch {
            image_height: 8,
            image_width: 8,
            patch: 4,
            hidden: 8,
            vocab: vec!["a", "b", "c", "d"].into_iter().map(String::from).collect(),
            dim: 4,
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let pair = EncoderPair::init(tiny_arch(), 3, Provenance::Domain).unwrap();
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let img = Image::new("x", "normal", Tensor::new(vec![8, 8], data).unwrap()).unwrap();
        let e1 = pair.encode_image(&img).unwrap();
        let e2 = pair.encode_image(&img).unwrap();
        assert!((e1.norm_l2() - 1.0).abs() <= 1e-9);
        assert_eq!(e1, e2);
    }

    #[test]
    fn encode_image_matches_straight_line_oracle() {
        // Independent re-implementation: patch-mean → affine → tanh →
        // affine → normalize, written as flat loops.
        let pair = EncoderPair::init(tiny_arch(), 11, Provenance::Domain).unwrap();
        let mut rng = Rng::new(23);
        let data: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let img = Image::new("x", "normal", Tensor::new(vec![8, 8], data.clone()).unwrap())
            .unwrap();

        let mut pooled = vec![0.0; 4];
        for pr in 0..2 {
            for pc in 0..2 {
                let mut acc = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        acc += data[(pr * 4 + i) * 8 + pc * 4 + j];
                    }
                }
                pooled[pr * 2 + pc] = acc / 16.0;
            }
        }
        let mut hidden = vec![0.0; 8];
        for r in 0..8 {
            let mut acc = pair.img_b1.data()[r];
            for c in 0..4 {
                acc += pair.img_w1.data()[r * 4 + c] * pooled[c];
            }
            hidden[r] = acc.tanh();
        }
        let mut emb = vec![0.0; 4];
        for r in 0..4 {
            let mut acc = pair.img_b2.data()[r];
            for c in 0..8 {
                acc += pair.img_w2.data()[r * 8 + c] * hidden[c];
            }
            emb[r] = acc;
        }
        let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut emb {
            *v /= norm;
        }

        let got = pair.encode_image(&img).unwrap();
        for (a, b) in got.data().iter().zip(&emb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_text_is_permutation_invariant() {
        let pair = EncoderPair::init(tiny_arch(), 7, Provenance::Domain).unwrap();
        let r1 = Report::new("r1", "normal", vec!["a".into(), "b".into()]);
        let r2 = Report::new("r2", "normal", vec!["b".into(), "a".into()]);
        assert_eq!(pair.encode_text(&r1).unwrap(), pair.encode_text(&r2).unwrap());
    }

    #[test]
    fn encode_text_rejects_empty_and_oov() {
        let pair = EncoderPair::init(tiny_arch(), 7, Provenance::Domain).unwrap();
        let empty = Report::new("r0", "normal", vec![]);
        assert!(matches!(
            pair.encode_text(&empty),
            Err(Error::DegenerateVector { .. })
        ));
        let oov = Report::new("r1", "normal", vec!["zebra".into()]);
        match pair.encode_text(&oov) {
            Err(Error::UnknownToken { token, .. }) => assert_eq!(token, "zebra"),
            other => panic!("expected UnknownToken, got {other:?}"),
        }
    }

    #[test]
    fn encode_image_rejects_wrong_dims() {
        let pair = EncoderPair::init(tiny_arch(), 7, Provenance::Domain).unwrap();
        let img = Image::new("x", "normal", Tensor::zeros(vec![4, 4])).unwrap();
        assert!(matches!(
            pair.encode_image(&img),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn single_item_corpus_has_zero_alignment_loss() {
        let spec = default_corpus_spec(8, 1);
        let corpus = gen_training_corpus(&spec, 21, 1, false).unwrap();
        let arch = EncoderArch {
            vocab: spec.vocabulary(),
            ..tiny_arch()
        };
        // One item: softmax denominator equals the numerator.
        let pair = EncoderPair::init(arch, 5, Provenance::Domain).unwrap();
        let loss = alignment_loss(&pair, &corpus).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn different_seeds_give_different_weights() {
        let a = EncoderPair::init(tiny_arch(), 1, Provenance::Domain).unwrap();
        let b = EncoderPair::init(tiny_arch(), 2, Provenance::Domain).unwrap();
        assert_ne!(a.img_w1, b.img_w1);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.json");
        let pair = EncoderPair::init(tiny_arch(), 99, Provenance::General).unwrap();
        save_pair(&pair, &path).unwrap();
        let back = load_pair(&path).unwrap();
        assert_eq!(pair, back);
    }

    #[test]
    fn load_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.json");
        let pair = EncoderPair::init(tiny_arch(), 99, Provenance::Domain).unwrap();
        save_pair(&pair, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_pair(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn load_rejects_mismatched_shape_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.json");
        let pair = EncoderPair::init(tiny_arch(), 99, Provenance::Domain).unwrap();
        save_pair(&pair, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"hidden\":8", "\"hidden\":6", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_pair(&path), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn leave_one_out_excludes_victim() {
        let pool: Vec<EncoderPair> = (0..3)
            .map(|s| EncoderPair::init(tiny_arch(), s, Provenance::Domain).unwrap())
            .collect();
        let (set, victim) = SurrogateSet::leave_one_out(&pool, 1).unwrap();
        assert_eq!(set.members().len(), 2);
        assert!(set.member_ids().iter().all(|id| *id != victim.id()));
        assert_eq!(set.victim_id(), Some(victim.id()).as_deref());
    }

    #[test]
    fn partition_must_cover_and_be_disjoint() {
        let pool: Vec<EncoderPair> = (0..3)
            .map(|s| EncoderPair::init(tiny_arch(), s, Provenance::Domain).unwrap())
            .collect();
        assert!(SurrogateSet::new(pool.clone(), vec![0, 1], vec![1, 2]).is_err());
        assert!(SurrogateSet::new(pool.clone(), vec![0], vec![1]).is_err());
        assert!(SurrogateSet::new(pool, vec![0, 1], vec![2]).is_ok());
    }
}
