//! Text-embedding mask classification and caption grounding.
//!
//! Mask embeddings are compared against category (or caption-noun) text
//! embeddings by inner product, scaled by a learnable temperature.
//! Label supervision is a cross-entropy over categories plus a learned
//! null (no-object) row for unmatched queries; caption supervision is a
//! batch-symmetric contrastive loss over region-word similarities.

use crate::encoders::VocabularyEmbedding;
use crate::error::{Error, Result};
use crate::maskgen::Assignment;
use crate::nn::{Binding, Init, ParamId, ParamSet};
use crate::tensor::{arr, ArrD, Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Categorical distribution over K classes.
#[derive(Clone, Debug)]
pub struct ProbabilityVector {
    pub probs: Vec<f64>,
}

impl ProbabilityVector {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().fold(f64::MIN, |a, &b| a.max(b))
    }

    /// Entries non-negative and summing to one.
    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::invalid("probability entries must be >= 0"));
        }
        let s: f64 = self.probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probabilities sum to {s}")));
        }
        Ok(())
    }
}

/// Numerically stabilized softmax.
pub fn softmax_scores(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `Softmax(z . T(C) / tau)` for one embedding against a category matrix.
pub fn class_probs(z: &[f64], vocab: &VocabularyEmbedding, tau: f64) -> ProbabilityVector {
    let k = vocab.num_categories();
    let d = vocab.dim();
    assert_eq!(z.len(), d, "embedding dim mismatch");
    let mut scores = vec![0.0; k];
    for (ki, s) in scores.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..d {
            acc += z[c] * vocab.matrix[[ki, c]];
        }
        *s = acc / tau;
    }
    ProbabilityVector {
        probs: softmax_scores(&scores),
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub tau_init: f64,
    pub grounding_tau_init: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            embed_dim: 64,
            tau_init: 0.07,
            grounding_tau_init: 0.07,
        }
    }
}

/// One grounding batch item: mask embeddings plus its caption's word
/// embedding matrix (L2-normalized rows). Items with zero nouns must be
/// dropped before batching.
pub struct GroundingItem {
    /// `[N, d]` mask embeddings on the tape.
    pub embeddings: Var,
    /// `[K_word, d]` word embeddings (constant).
    pub words: ArrD,
}

/// Learnable temperatures (log-parameterized, always positive) and the
/// learned null-category embedding.
pub struct OpenVocabClassifier {
    log_tau_cls: ParamId,
    log_tau_grounding: ParamId,
    null_embedding: ParamId,
    pub cfg: ClassifierConfig,
}

impl OpenVocabClassifier {
    pub fn new(ps: &mut ParamSet, cfg: ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let log_tau_cls = ps.add(
            "cls.log_tau",
            arr(&[1], vec![cfg.tau_init.ln()]),
            true,
        );
        let log_tau_grounding = ps.add(
            "grounding.log_tau",
            arr(&[1], vec![cfg.grounding_tau_init.ln()]),
            true,
        );
        let null_embedding = ps.add(
            "cls.null_embedding",
            Init::Normal(1.0).sample(&[1, cfg.embed_dim], cfg.embed_dim, rng),
            true,
        );
        OpenVocabClassifier {
            log_tau_cls,
            log_tau_grounding,
            null_embedding,
            cfg,
        }
    }

    /// Current classification temperature value.
    pub fn tau_cls(&self, ps: &ParamSet) -> f64 {
        ps.get(self.log_tau_cls)[[0]].exp()
    }

    pub fn tau_grounding(&self, ps: &ParamSet) -> f64 {
        ps.get(self.log_tau_grounding)[[0]].exp()
    }

    /// Normalized null row as a plain vector (for inference-time rejection).
    pub fn null_row(&self, ps: &ParamSet) -> Vec<f64> {
        let raw = ps.get(self.null_embedding);
        let v: Vec<f64> = raw.iter().copied().collect();
        crate::encoders::l2_normalized(&v)
    }

    fn inv_tau(&self, t: &Tape, bind: &Binding, id: ParamId) -> Var {
        t.exp(t.neg(bind.var(id)))
    }

    /// Cross-entropy of Eq.-style softmax probabilities over all N queries:
    /// matched queries target their assigned label, unmatched ones target
    /// the appended null category (index K).
    pub fn category_loss(
        &self,
        t: &Tape,
        bind: &Binding,
        embeddings: Var,
        vocab: &VocabularyEmbedding,
        gt_labels: &[usize],
        assignment: &Assignment,
    ) -> Result<Var> {
        let k = vocab.num_categories();
        if let Some(&bad) = gt_labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label index {bad} out of range for {k} categories"
            )));
        }
        let n = t.shape(embeddings)[0];
        let mut targets = vec![k; n]; // default: null category
        for (q, j) in &assignment.pairs {
            targets[*q] = gt_labels[*j];
        }
        let vocab_rows = t.constant(vocab.matrix.clone());
        let null = t.l2norm_rows(bind.var(self.null_embedding));
        let rows = t.concat(0, &[vocab_rows, null]); // [K+1, d]
        let logits = t.matmul_nt(embeddings, rows);
        let inv_tau = self.inv_tau(t, bind, self.log_tau_cls);
        let scaled = t.mul_bcast_scalar(logits, inv_tau);
        Ok(t.cross_entropy_rows(scaled, &targets))
    }

    /// Region-word similarity of one image/caption pair:
    /// `g = (1/K) sum_k sum_i p(z_i, words)_k <z_i, T(w_k)>` where `p` is the
    /// word softmax under the grounding temperature.
    pub fn grounding_similarity(&self, t: &Tape, bind: &Binding, item_z: Var, words: &ArrD) -> Var {
        let k_word = words.shape()[0];
        assert!(k_word >= 1, "grounding needs at least one word");
        let w = t.constant(words.clone());
        let logits = t.matmul_nt(item_z, w); // [N, K]
        let inv_tau = self.inv_tau(t, bind, self.log_tau_grounding);
        let p = t.softmax_last(t.mul_bcast_scalar(logits, inv_tau));
        t.scale(t.sum_all(t.mul(p, logits)), 1.0 / k_word as f64)
    }

    /// Symmetric batch contrastive loss over all image/caption pairings,
    /// with the grounding temperature. `B = 1` gives exactly zero.
    pub fn grounding_loss(&self, t: &Tape, bind: &Binding, items: &[GroundingItem]) -> Var {
        let b = items.len();
        assert!(b >= 1, "grounding batch must not be empty");
        let mut sims = Vec::with_capacity(b * b);
        for img in items {
            for cap in items {
                sims.push(self.grounding_similarity(t, bind, img.embeddings, &cap.words));
            }
        }
        let sims: Vec<Var> = sims.iter().map(|&s| t.reshape(s, &[1])).collect();
        let sim = t.reshape(t.concat(0, &sims), &[b, b]);
        let inv_tau = self.inv_tau(t, bind, self.log_tau_grounding);
        let scaled = t.mul_bcast_scalar(sim, inv_tau);
        let diag: Vec<usize> = (0..b).collect();
        let img_to_cap = t.cross_entropy_rows(scaled, &diag);
        let cap_to_img = t.cross_entropy_rows(t.permute(scaled, &[1, 0]), &diag);
        t.add(img_to_cap, cap_to_img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{check_grad, finite_diff, max_rel_err, rand_arr};
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn unit_rows(k: usize, d: usize, seed: u64) -> ArrD {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = rand_arr(&[k, d], &mut rng);
        for i in 0..k {
            let norm: f64 = (0..d).map(|c| m[[i, c]] * m[[i, c]]).sum::<f64>().sqrt();
            for c in 0..d {
                m[[i, c]] /= norm;
            }
        }
        m
    }

    fn vocab_emb(k: usize, d: usize, seed: u64) -> VocabularyEmbedding {
        VocabularyEmbedding {
            matrix: unit_rows(k, d, seed),
        }
    }

    #[test]
    fn orthogonal_embedding_gives_uniform() {
        let v = vocab_emb(5, 8, 1);
        let p = class_probs(&vec![0.0; 8], &v, 1.0);
        p.validate().unwrap();
        for &pr in &p.probs {
            assert!((pr - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_temperature_flattens() {
        let v = vocab_emb(10, 16, 2);
        let z = unit_rows(1, 16, 3);
        let zrow: Vec<f64> = (0..16).map(|c| z[[0, c]]).collect();
        let p = class_probs(&zrow, &v, 1e3);
        for &pr in &p.probs {
            assert!((pr - 0.1).abs() < 1e-2, "deviation too large: {pr}");
        }
    }

    #[test]
    fn two_class_hand_case() {
        // z.t1 = 1, z.t2 = 0, tau = 1 -> (0.7311, 0.2689)
        let mut m = ArrD::zeros(IxDyn(&[2, 2]));
        m[[0, 0]] = 1.0;
        m[[1, 1]] = 1.0;
        let v = VocabularyEmbedding { matrix: m };
        let p = class_probs(&[1.0, 0.0], &v, 1.0);
        assert!((p.probs[0] - 0.7311).abs() < 1e-4);
        assert!((p.probs[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn argmax_invariant_under_temperature() {
        let v = vocab_emb(7, 12, 4);
        let z = unit_rows(1, 12, 5);
        let zrow: Vec<f64> = (0..12).map(|c| z[[0, c]]).collect();
        let a1 = class_probs(&zrow, &v, 0.05).argmax();
        let a2 = class_probs(&zrow, &v, 5.0).argmax();
        assert_eq!(a1, a2);
    }

    #[test]
    fn permuting_vocab_permutes_probs() {
        let v = vocab_emb(6, 8, 6);
        let z = unit_rows(1, 8, 7);
        let zrow: Vec<f64> = (0..8).map(|c| z[[0, c]]).collect();
        let p = class_probs(&zrow, &v, 0.3);
        // reverse the rows
        let mut rev = ArrD::zeros(IxDyn(&[6, 8]));
        for i in 0..6 {
            for c in 0..8 {
                rev[[i, c]] = v.matrix[[5 - i, c]];
            }
        }
        let pr = class_probs(&zrow, &VocabularyEmbedding { matrix: rev }, 0.3);
        for i in 0..6 {
            assert!((p.probs[i] - pr.probs[5 - i]).abs() < 1e-12);
        }
    }

    fn setup_classifier(d: usize) -> (ParamSet, OpenVocabClassifier) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cls = OpenVocabClassifier::new(
            &mut ps,
            ClassifierConfig {
                embed_dim: d,
                ..Default::default()
            },
            &mut rng,
        );
        (ps, cls)
    }

    #[test]
    fn category_loss_perfect_embeddings_vanish() {
        let d = 16;
        let k = 4;
        let vocab = vocab_emb(k, d, 20);
        let (mut ps, cls) = setup_classifier(d);
        // tau = 0.05 sharpens the softmax
        *ps.get_mut(ps.by_name("cls.log_tau").unwrap()) = arr(&[1], vec![0.05f64.ln()]);
        let t = Tape::new();
        let bind = ps.bind(&t);
        // all queries matched, embeddings equal to their target rows
        let z = t.constant(vocab.matrix.clone());
        let assignment = Assignment {
            pairs: (0..k).map(|i| (i, i)).collect(),
            unmatched_queries: vec![],
        };
        let labels: Vec<usize> = (0..k).collect();
        let loss = cls
            .category_loss(&t, &bind, z, &vocab, &labels, &assignment)
            .unwrap();
        assert!(t.scalar(loss) < 0.05, "loss {}", t.scalar(loss));
    }

    #[test]
    fn category_loss_uniform_is_ln_k_plus_one() {
        let d = 8;
        let k = 5;
        let vocab = vocab_emb(k, d, 21);
        let (ps, cls) = setup_classifier(d);
        let t = Tape::new();
        let bind = ps.bind(&t);
        // zero embeddings -> all logits zero -> uniform over K+1
        let z = t.constant(ArrD::zeros(IxDyn(&[3, d])));
        let loss = cls
            .category_loss(&t, &bind, z, &vocab, &[], &Assignment::empty(3))
            .unwrap();
        assert!((t.scalar(loss) - ((k + 1) as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn category_loss_rejects_bad_labels() {
        let d = 8;
        let vocab = vocab_emb(3, d, 22);
        let (ps, cls) = setup_classifier(d);
        let t = Tape::new();
        let bind = ps.bind(&t);
        let z = t.constant(ArrD::zeros(IxDyn(&[2, d])));
        let a = Assignment {
            pairs: vec![(0, 0)],
            unmatched_queries: vec![1],
        };
        assert!(cls.category_loss(&t, &bind, z, &vocab, &[7], &a).is_err());
    }

    #[test]
    fn category_loss_gradients_match_finite_differences() {
        let d = 6;
        let k = 3;
        let vocab = vocab_emb(k, d, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let z0 = rand_arr(&[4, d], &mut rng);
        let assignment = Assignment {
            pairs: vec![(0, 0), (2, 1)],
            unmatched_queries: vec![1, 3],
        };
        let labels = vec![2usize, 0];
        // gradient w.r.t. embeddings; tau = 1 keeps the softmax away from
        // saturation where finite differences lose precision
        let (v2, a2, l2) = (vocab.matrix.clone(), assignment.clone(), labels.clone());
        let err = check_grad(
            &z0,
            move |t, z| {
                let (mut ps, cls) = setup_classifier(d);
                *ps.get_mut(ps.by_name("cls.log_tau").unwrap()) = arr(&[1], vec![0.0]);
                let bind = ps.bind(t);
                cls.category_loss(
                    t,
                    &bind,
                    z,
                    &VocabularyEmbedding { matrix: v2.clone() },
                    &l2,
                    &a2,
                )
                .unwrap()
            },
            1e-6,
        );
        assert!(err <= 1e-3, "category_loss dz rel err {err}");

        // gradient w.r.t. the temperature parameter
        let (ps, cls) = setup_classifier(d);
        let t = Tape::new();
        let bind = ps.bind(&t);
        let z = t.constant(z0.clone());
        let loss = cls
            .category_loss(&t, &bind, z, &vocab, &labels, &assignment)
            .unwrap();
        let grads = t.backward(loss);
        let tau_var = bind.var(ps.by_name("cls.log_tau").unwrap());
        let analytic = grads.get_or_zeros(tau_var, &[1]);
        let tau0 = ps.get(ps.by_name("cls.log_tau").unwrap()).clone();
        let numeric = finite_diff(
            &tau0,
            |tv| {
                let (mut ps2, cls2) = setup_classifier(d);
                *ps2.get_mut(ps2.by_name("cls.log_tau").unwrap()) = tv.clone();
                let t2 = Tape::new();
                let bind2 = ps2.bind(&t2);
                let z2 = t2.constant(z0.clone());
                t2.scalar(
                    cls2.category_loss(&t2, &bind2, z2, &vocab, &labels, &assignment)
                        .unwrap(),
                )
            },
            1e-6,
        );
        let rel = max_rel_err(&analytic, &numeric, 1e-7);
        assert!(rel <= 1e-3, "category_loss dtau rel err {rel}");
    }

    #[test]
    fn grounding_single_word_softmax_degenerates() {
        let d = 8;
        let (ps, cls) = setup_classifier(d);
        let t = Tape::new();
        let bind = ps.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let z0 = rand_arr(&[5, d], &mut rng);
        let z = t.constant(z0.clone());
        let words = unit_rows(1, d, 31);
        let g = cls.grounding_similarity(&t, &bind, z, &words);
        // oracle: sum_i <z_i, w>
        let mut expect = 0.0;
        for i in 0..5 {
            for c in 0..d {
                expect += z0[[i, c]] * words[[0, c]];
            }
        }
        assert!((t.scalar(g) - expect).abs() < 1e-12);
    }

    #[test]
    fn grounding_hand_case_two_words() {
        let d = 4;
        let (mut ps, cls) = setup_classifier(d);
        *ps.get_mut(ps.by_name("grounding.log_tau").unwrap()) = arr(&[1], vec![0.0]); // tau = 1
        let t = Tape::new();
        let bind = ps.bind(&t);
        let z0 = arr(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let words = arr(&[2, 4], vec![0.6, 0.8, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let z = t.constant(z0);
        let g = cls.grounding_similarity(&t, &bind, z, &words);
        // explicit two-term sum: s = (0.6, 1.0); p = softmax(s); g = (p0*s0 + p1*s1)/2
        let p = softmax_scores(&[0.6, 1.0]);
        let expect = (p[0] * 0.6 + p[1] * 1.0) / 2.0;
        assert!((t.scalar(g) - expect).abs() < 1e-12);
    }

    #[test]
    fn grounding_invariant_under_joint_rotation() {
        // signed permutation is orthogonal: applying it to both z and words
        // preserves all inner products and hence g
        let d = 6;
        let (ps, cls) = setup_classifier(d);
        let t = Tape::new();
        let bind = ps.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let z0 = rand_arr(&[3, d], &mut rng);
        let w0 = unit_rows(4, d, 34);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let sign = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0];
        let rot = |m: &ArrD| {
            let mut out = m.clone();
            for i in 0..m.shape()[0] {
                for c in 0..d {
                    out[[i, perm[c]]] = m[[i, c]] * sign[c];
                }
            }
            out
        };
        let g1 = cls.grounding_similarity(&t, &bind, t.constant(z0.clone()), &w0);
        let g2 = cls.grounding_similarity(&t, &bind, t.constant(rot(&z0)), &rot(&w0));
        assert!((t.scalar(g1) - t.scalar(g2)).abs() < 1e-12);
    }

    #[test]
    fn grounding_loss_identities() {
        let d = 8;
        let (ps, cls) = setup_classifier(d);
        let t = Tape::new();
        let bind = ps.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        // B = 1 -> exactly zero
        let item = GroundingItem {
            embeddings: t.constant(rand_arr(&[4, d], &mut rng)),
            words: unit_rows(3, d, 36),
        };
        let loss = cls.grounding_loss(&t, &bind, &[item]);
        assert_eq!(t.scalar(loss), 0.0);
    }

    #[test]
    fn grounding_loss_batch_order_invariance() {
        let d = 8;
        let (ps, cls) = setup_classifier(d);
        let t = Tape::new();
        let bind = ps.bind(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let zs: Vec<ArrD> = (0..3).map(|_| rand_arr(&[4, d], &mut rng)).collect();
        let ws: Vec<ArrD> = (0..3).map(|i| unit_rows(2 + i, d, 40 + i as u64)).collect();
        let mk = |order: &[usize]| {
            let items: Vec<GroundingItem> = order
                .iter()
                .map(|&i| GroundingItem {
                    embeddings: t.constant(zs[i].clone()),
                    words: ws[i].clone(),
                })
                .collect();
            t.scalar(cls.grounding_loss(&t, &bind, &items))
        };
        let l1 = mk(&[0, 1, 2]);
        let l2 = mk(&[2, 0, 1]);
        assert!((l1 - l2).abs() < 1e-12);
        assert!(l1 >= -1e-9, "loss must be non-negative: {l1}");
    }

    #[test]
    fn grounding_loss_gradients_match_finite_differences() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let z0 = rand_arr(&[3, d], &mut rng);
        let z1 = rand_arr(&[3, d], &mut rng);
        let w0 = unit_rows(2, d, 51);
        let w1 = unit_rows(3, d, 52);
        let (z1c, w0c, w1c) = (z1.clone(), w0.clone(), w1.clone());
        let err = check_grad(
            &z0,
            move |t, z| {
                let (ps, cls) = setup_classifier(d);
                let bind = ps.bind(t);
                let items = vec![
                    GroundingItem {
                        embeddings: z,
                        words: w0c.clone(),
                    },
                    GroundingItem {
                        embeddings: t.constant(z1c.clone()),
                        words: w1c.clone(),
                    },
                ];
                cls.grounding_loss(t, &bind, &items)
            },
            1e-6,
        );
        assert!(err <= 1e-3, "grounding_loss dz rel err {err}");

        // temperature gradient
        let (ps, cls) = setup_classifier(d);
        let t = Tape::new();
        let bind = ps.bind(&t);
        let items = vec![
            GroundingItem {
                embeddings: t.constant(z0.clone()),
                words: w0.clone(),
            },
            GroundingItem {
                embeddings: t.constant(z1.clone()),
                words: w1.clone(),
            },
        ];
        let loss = cls.grounding_loss(&t, &bind, &items);
        let grads = t.backward(loss);
        let tau_var = bind.var(ps.by_name("grounding.log_tau").unwrap());
        let analytic = grads.get_or_zeros(tau_var, &[1]);
        let tau0 = ps.get(ps.by_name("grounding.log_tau").unwrap()).clone();
        let numeric = finite_diff(
            &tau0,
            |tv| {
                let (mut ps2, cls2) = setup_classifier(d);
                *ps2.get_mut(ps2.by_name("grounding.log_tau").unwrap()) = tv.clone();
                let t2 = Tape::new();
                let bind2 = ps2.bind(&t2);
                let items2 = vec![
                    GroundingItem {
                        embeddings: t2.constant(z0.clone()),
                        words: w0.clone(),
                    },
                    GroundingItem {
                        embeddings: t2.constant(z1.clone()),
                        words: w1.clone(),
                    },
                ];
                t2.scalar(cls2.grounding_loss(&t2, &bind2, &items2))
            },
            1e-6,
        );
        let rel = max_rel_err(&analytic, &numeric, 1e-7);
        assert!(rel <= 1e-3, "grounding_loss dtau rel err {rel}");
    }

    #[test]
    fn separated_diagonal_drives_loss_down() {
        // with g(m,m) >> g(m,n) the contrastive loss approaches zero; build
        // orthogonal per-item embedding/word spaces to realize it
        let d = 4;
        let (mut ps, cls) = setup_classifier(d);
        *ps.get_mut(ps.by_name("grounding.log_tau").unwrap()) = arr(&[1], vec![0.0f64.max(0.0)]);
        // tau = 1
        *ps.get_mut(ps.by_name("grounding.log_tau").unwrap()) = arr(&[1], vec![0.0]);
        let t = Tape::new();
        let bind = ps.bind(&t);
        let z0 = arr(&[1, 4], vec![10.0, 0.0, 0.0, 0.0]);
        let z1 = arr(&[1, 4], vec![0.0, 10.0, 0.0, 0.0]);
        let w0 = arr(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let w1 = arr(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]);
        let items = vec![
            GroundingItem {
                embeddings: t.constant(z0),
                words: w0,
            },
            GroundingItem {
                embeddings: t.constant(z1),
                words: w1,
            },
        ];
        // g diagonal = 10, off-diagonal = 0, tau = 1
        let loss = cls.grounding_loss(&t, &bind, &items);
        assert!(t.scalar(loss) < 1e-4, "loss {}", t.scalar(loss));
    }
}
