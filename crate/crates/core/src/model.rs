//! The assembled pipeline: frozen encoder bundle plus the trainable heads,
//! with end-to-end feature extraction and single-image inference.

use crate::captioner::{CaptionerConfig, CaptionerMode, ImplicitCaptioner};
use crate::checkpoint::TensorSection;
use crate::classifier::{ClassifierConfig, OpenVocabClassifier};
use crate::config::RunConfig;
use crate::diffusion::{
    extract_features, FeaturePyramid, NoiseSchedule, PyramidConfig, PyramidProjector,
    TimeStepSpec, UNet, UNetConfig,
};
use crate::encoders::{
    ImageEncoder, ImageEncoderConfig, Lexicon, SynonymMap, TextEncoder, TextEncoderConfig,
    Tokenizer, Vocabulary, VocabularyEmbedding,
};
use crate::error::{Error, Result};
use crate::inference::{
    classify_masks, instance_proposals, panoptic_assemble, semantic_from_panoptic, FusedPrediction,
    InferenceConfig, InstanceProposal, PanopticMap,
};
use crate::maskgen::{MaskGenerator, MaskGeneratorConfig, MaskSet, MaskSetVars};
use crate::nn::{Binding, ParamSet};
use crate::tensor::{ArrD, Tape, Var};
use ndarray::{Array2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tape bindings for one forward pass.
pub struct PipelineBinds {
    pub unet: Binding,
    pub projector: Binding,
    pub trainable: Binding,
}

/// Output of full single-image inference.
pub struct InferenceOutput {
    pub masks: MaskSet,
    pub fused: Vec<FusedPrediction>,
    pub panoptic: PanopticMap,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub tokenizer: Tokenizer,
    pub lexicon: Lexicon,
    pub text_encoder: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub unet: UNet,
    pub projector: PyramidProjector,
    pub schedule: NoiseSchedule,
    pub captioner: ImplicitCaptioner,
    pub maskgen: MaskGenerator,
    pub classifier: OpenVocabClassifier,
    /// Captioner + mask generator + temperatures + null embedding.
    pub trainable: ParamSet,
}

impl Pipeline {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.masks_mask_dim != cfg.enc_text_dim {
            return Err(Error::Config(format!(
                "masks.mask_dim ({}) must equal encoders.text_dim ({}) so mask embeddings \
                 and text embeddings share one space",
                cfg.masks_mask_dim, cfg.enc_text_dim
            )));
        }
        let synonyms = if cfg.enc_synonyms.is_empty() {
            SynonymMap::builtin()
        } else {
            SynonymMap::from_path(&cfg.enc_synonyms)?
        };
        let lexicon = if cfg.enc_lexicon.is_empty() {
            Lexicon::builtin()
        } else {
            Lexicon::from_path(&cfg.enc_lexicon)?
        };
        let tokenizer = Tokenizer::new(cfg.enc_vocab_size, cfg.enc_text_len, synonyms);
        let text_encoder = TextEncoder::new(TextEncoderConfig {
            vocab_size: cfg.enc_vocab_size,
            max_len: cfg.enc_text_len,
            dim: cfg.enc_text_dim,
            ffn_hidden: cfg.enc_text_dim * 2,
            seed: cfg.enc_seed,
        });
        let image_encoder = ImageEncoder::new(ImageEncoderConfig {
            stride: cfg.enc_image_stride,
            hidden: cfg.enc_image_hidden,
            out_dim: cfg.enc_text_dim,
            seed: cfg.enc_seed,
        });
        let unet_cfg = UNetConfig {
            base_width: cfg.unet_base_width,
            channel_mult: cfg.unet_channel_mult.clone(),
            text_dim: cfg.enc_text_dim,
            time_dim: 64,
            groups: cfg.unet_groups,
            seed: cfg.unet_seed,
        };
        let mut unet = UNet::new(unet_cfg.clone());
        let mut projector = PyramidProjector::new(
            PyramidConfig {
                strides: cfg.pyramid_strides.clone(),
                channels: cfg.pyramid_channels,
                tap_levels: (0..cfg.unet_channel_mult.len()).collect(),
                seed: cfg.pyramid_seed,
            },
            &unet_cfg.widths(),
        );
        let mut schedule = NoiseSchedule::default_linear();
        if !cfg.backbone_checkpoint.is_empty() {
            let ckpt = crate::checkpoint::load_checkpoint(
                std::path::Path::new(&cfg.backbone_checkpoint),
                None,
                true,
            )?;
            load_backbone_section(&ckpt.params, &mut unet, &mut projector, &mut schedule)?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed ^ 0x0mode_l());
        let mut trainable = ParamSet::new();
        let captioner = ImplicitCaptioner::new(
            &mut trainable,
            CaptionerConfig {
                pseudo_tokens: cfg.captioner_pseudo_tokens,
                hidden_dim: cfg.captioner_hidden_dim,
                image_dim: cfg.enc_text_dim,
                text_dim: cfg.enc_text_dim,
            },
            text_encoder.encode_empty().sequence,
            &mut rng,
        );
        let timestep_multiplier = cfg.timesteps.len();
        let maskgen = MaskGenerator::new(
            &mut trainable,
            MaskGeneratorConfig {
                num_queries: cfg.masks_num_queries,
                decoder_layers: cfg.masks_decoder_layers,
                query_dim: cfg.masks_mask_dim,
                mask_dim: cfg.masks_mask_dim,
                ffn_hidden: cfg.masks_ffn_hidden,
                pyramid_channels: cfg.pyramid_channels * timestep_multiplier,
                pyramid_levels: cfg.pyramid_strides.len(),
                cost_bce: cfg.masks_cost_bce,
                cost_dice: cfg.masks_cost_dice,
                loss_bce: cfg.masks_loss_bce,
                loss_dice: cfg.masks_loss_dice,
            },
            &mut rng,
        );
        let classifier = OpenVocabClassifier::new(
            &mut trainable,
            ClassifierConfig {
                embed_dim: cfg.masks_mask_dim,
                tau_init: cfg.cls_tau_init,
                grounding_tau_init: cfg.grounding_tau_init,
            },
            &mut rng,
        );
        Ok(Pipeline {
            cfg: cfg.clone(),
            tokenizer,
            lexicon,
            text_encoder,
            image_encoder,
            unet,
            projector,
            schedule,
            captioner,
            maskgen,
            classifier,
            trainable,
        })
    }

    /// Bind every parameter set on a fresh tape. `train` controls whether
    /// trainable entries become gradient leaves.
    pub fn bind(&self, t: &Tape, train: bool) -> PipelineBinds {
        PipelineBinds {
            unet: self.unet.bind(t),
            projector: self.projector.bind(t),
            trainable: if train {
                self.trainable.bind(t)
            } else {
                self.trainable.bind_frozen(t)
            },
        }
    }

    pub fn timestep_spec(&self) -> Result<TimeStepSpec> {
        TimeStepSpec::with_repeats(self.cfg.timesteps.clone(), self.schedule.total_steps())
    }

    /// Pooled image-encoder embeddings for a batch `[B, 3, H, W]`.
    pub fn pooled_image_embeddings(&self, images: &ArrD) -> Result<ArrD> {
        let b = images.shape()[0];
        let d = self.cfg.enc_text_dim;
        let mut out = ArrD::zeros(IxDyn(&[b, d]));
        for i in 0..b {
            let img = images
                .index_axis(ndarray::Axis(0), i)
                .as_standard_layout()
                .to_owned();
            let emb = self.image_encoder.encode(&img)?;
            for c in 0..d {
                out[[i, c]] = emb.pooled[[c]];
            }
        }
        Ok(out)
    }

    /// The composed feature extractor: implicit caption (or the empty
    /// embedding) into the frozen UNet, taps into the pyramid.
    pub fn extract_visual_representation(
        &self,
        t: &Tape,
        binds: &PipelineBinds,
        images: &ArrD,
        mode: CaptionerMode,
        eps_seed: u64,
    ) -> Result<FeaturePyramid> {
        let pooled = self.pooled_image_embeddings(images)?;
        let ctx = self.captioner.forward(t, &binds.trainable, &pooled, mode);
        let spec = self.timestep_spec()?;
        extract_features(
            t,
            &self.unet,
            &binds.unet,
            &self.projector,
            &binds.projector,
            images,
            ctx,
            &spec,
            &self.schedule,
            eps_seed,
        )
    }

    /// Feature pyramid and per-item mask sets for a batch.
    pub fn forward_batch(
        &self,
        t: &Tape,
        binds: &PipelineBinds,
        images: &ArrD,
        mode: CaptionerMode,
        eps_seed: u64,
    ) -> Result<(FeaturePyramid, Vec<MaskSetVars>)> {
        let pyramid = self.extract_visual_representation(t, binds, images, mode, eps_seed)?;
        let hw = (images.shape()[2], images.shape()[3]);
        let sets = self.maskgen.forward(t, &binds.trainable, &pyramid, hw)?;
        Ok((pyramid, sets))
    }

    /// Mask generation from cached pyramid arrays (frozen-feature path).
    pub fn forward_cached(
        &self,
        t: &Tape,
        binds: &PipelineBinds,
        pyramid_arrays: &[ArrD],
        image_hw: (usize, usize),
    ) -> Result<Vec<MaskSetVars>> {
        let spec = self.timestep_spec()?;
        let pyramid = FeaturePyramid::from_arrays(
            t,
            pyramid_arrays,
            self.cfg.pyramid_strides.clone(),
            spec.steps().to_vec(),
        );
        self.maskgen.forward(t, &binds.trainable, &pyramid, image_hw)
    }

    /// Full open-vocabulary inference for one image `[3, H, W]`.
    pub fn infer_image(
        &self,
        image: &ArrD,
        vocab: &Vocabulary,
        vocab_emb: &VocabularyEmbedding,
        infer_cfg: &InferenceConfig,
        eps_seed: u64,
    ) -> Result<InferenceOutput> {
        let sh = image.shape();
        let batch = image
            .clone()
            .into_shape_with_order(IxDyn(&[1, sh[0], sh[1], sh[2]]))
            .unwrap();
        let t = Tape::new();
        let binds = self.bind(&t, false);
        let (_, sets) =
            self.forward_batch(&t, &binds, &batch, self.cfg.captioner_mode, eps_seed)?;
        let masks = sets[0].detach(&t);
        let disc = self.image_encoder.encode(image)?;
        let tau = self.classifier.tau_cls(&self.trainable);
        let null_row = if self.cfg.cls_null_category {
            self.classifier.null_row(&self.trainable)
        } else {
            vec![0.0; vocab_emb.dim()]
        };
        let fused = classify_masks(
            &masks,
            vocab_emb,
            &null_row,
            tau,
            &disc.feature_map,
            infer_cfg.lambda,
        )?;
        let panoptic = panoptic_assemble(&masks, &fused, vocab, infer_cfg)?;
        Ok(InferenceOutput {
            masks,
            fused,
            panoptic,
        })
    }

    /// Semantic map derived from panoptic inference.
    pub fn infer_semantic(
        &self,
        out: &InferenceOutput,
        vocab: &Vocabulary,
    ) -> Result<Array2<usize>> {
        semantic_from_panoptic(&out.panoptic, vocab)
    }

    /// Ranked instance proposals from an inference output.
    pub fn proposals(
        &self,
        out: &InferenceOutput,
        vocab: &Vocabulary,
        top_k: usize,
        class_agnostic: bool,
    ) -> Result<Vec<InstanceProposal>> {
        instance_proposals(&out.masks, &out.fused, vocab, top_k, class_agnostic)
    }

    /// Embed a vocabulary with the frozen text encoder.
    pub fn embed_vocabulary(&self, vocab: &Vocabulary) -> VocabularyEmbedding {
        crate::encoders::embed_vocabulary(&self.text_encoder, &self.tokenizer, vocab)
    }

    /// Word-embedding matrix (L2-normalized rows) for caption nouns.
    pub fn embed_words(&self, words: &[String]) -> ArrD {
        let d = self.cfg.enc_text_dim;
        let mut out = ArrD::zeros(IxDyn(&[words.len(), d]));
        for (i, w) in words.iter().enumerate() {
            let emb = self.text_encoder.encode_text(&self.tokenizer, w);
            let norm = crate::encoders::l2_normalized(emb.pooled.as_slice().unwrap());
            for c in 0..d {
                out[[i, c]] = norm[c];
            }
        }
        out
    }

    /// Names of all trainable parameters (the census).
    pub fn census(&self) -> Vec<String> {
        self.trainable.trainable_names()
    }

    /// Snapshot trainable parameters into a checkpoint section.
    pub fn trainable_section(&self) -> TensorSection {
        TensorSection {
            tensors: self
                .trainable
                .iter()
                .filter(|(_, e)| e.trainable)
                .map(|(_, e)| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    /// Load trainable parameters by name.
    pub fn load_trainable(&mut self, section: &TensorSection) -> Result<()> {
        for (name, tensor) in &section.tensors {
            let id = self
                .trainable
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
            if self.trainable.get(id).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} shape mismatch"
                )));
            }
            *self.trainable.get_mut(id) = tensor.clone();
        }
        Ok(())
    }

    /// Frozen-backbone tensors (UNet, pyramid projections, schedule).
    pub fn backbone_section(&self) -> TensorSection {
        let mut tensors: Vec<(String, ArrD)> = self
            .unet
            .params()
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        tensors.extend(
            self.projector
                .params()
                .iter()
                .map(|(_, e)| (e.name.clone(), e.value.clone())),
        );
        let alphas = self.schedule.alphas().to_vec();
        tensors.push((
            "schedule.alphas".into(),
            ArrD::from_shape_vec(IxDyn(&[alphas.len()]), alphas).unwrap(),
        ));
        TensorSection { tensors }
    }

    pub fn load_backbone(&mut self, section: &TensorSection) -> Result<()> {
        load_backbone_section(
            section,
            &mut self.unet,
            &mut self.projector,
            &mut self.schedule,
        )
    }
}

fn load_backbone_section(
    section: &TensorSection,
    unet: &mut UNet,
    projector: &mut PyramidProjector,
    schedule: &mut NoiseSchedule,
) -> Result<()> {
    for (name, tensor) in &section.tensors {
        if name == "schedule.alphas" {
            *schedule = NoiseSchedule::from_alphas(tensor.iter().copied().collect());
            continue;
        }
        let ps = if name.starts_with("pyramid.") {
            projector.params_mut()
        } else {
            unet.params_mut()
        };
        let id = ps
            .by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown backbone parameter {name:?}")))?;
        if ps.get(id).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "backbone parameter {name:?} shape mismatch"
            )));
        }
        *ps.get_mut(id) = tensor.clone();
    }
    Ok(())
}
