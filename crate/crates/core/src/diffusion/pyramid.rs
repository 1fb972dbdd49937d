//! Tapping UNet activations into a multi-scale feature pyramid.

use super::schedule::{add_noise, NoiseSchedule, TimeStepSpec};
use super::unet::{UNet, UNetTaps};
use crate::error::Result;
use crate::nn::{Binding, Conv2d, ParamSet};
use crate::tensor::{ArrD, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct PyramidConfig {
    /// Canonical output strides, finest first.
    pub strides: Vec<usize>,
    /// Channel width of every output level.
    pub channels: usize,
    /// Which UNet decoder taps feed each level (index into the tap list).
    pub tap_levels: Vec<usize>,
    pub seed: u64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            strides: vec![2, 4, 8],
            channels: 64,
            tap_levels: vec![0, 1, 2],
            seed: 3,
        }
    }
}

/// Multi-scale feature maps on a tape. With a multi-step [`TimeStepSpec`]
/// the per-step features are concatenated along channels.
pub struct FeaturePyramid {
    /// One `[B, C, h, w]` map per level, finest first.
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
    pub source_timesteps: Vec<usize>,
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self, t: &Tape) -> usize {
        t.shape(self.levels[0])[1]
    }

    pub fn to_arrays(&self, t: &Tape) -> Vec<ArrD> {
        self.levels
            .iter()
            .map(|&v| t.value(v).as_ref().clone())
            .collect()
    }

    /// Rebuild a pyramid from cached arrays as tape constants.
    pub fn from_arrays(
        t: &Tape,
        arrays: &[ArrD],
        strides: Vec<usize>,
        source_timesteps: Vec<usize>,
    ) -> Self {
        FeaturePyramid {
            levels: arrays.iter().map(|a| t.constant(a.clone())).collect(),
            strides,
            source_timesteps,
        }
    }
}

/// Frozen 1x1 projections from tapped UNet widths to the pyramid width.
pub struct PyramidProjector {
    params: ParamSet,
    projs: Vec<Conv2d>,
    pub cfg: PyramidConfig,
}

impl PyramidProjector {
    pub fn new(cfg: PyramidConfig, tap_widths: &[usize]) -> Self {
        assert_eq!(
            cfg.strides.len(),
            cfg.tap_levels.len(),
            "one tap per pyramid level"
        );
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0979_4a31);
        let projs = cfg
            .tap_levels
            .iter()
            .enumerate()
            .map(|(lvl, &tap)| {
                Conv2d::new(
                    &mut ps,
                    &format!("pyramid.proj{lvl}"),
                    tap_widths[tap],
                    cfg.channels,
                    1,
                    1,
                    0,
                    false,
                    &mut rng,
                )
            })
            .collect();
        PyramidProjector {
            params: ps,
            projs,
            cfg,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, t: &Tape) -> Binding {
        self.params.bind(t)
    }

    /// Resize the selected taps onto the canonical stride grid and project
    /// to the pyramid width. `input_hw` is the original image size.
    pub fn build(
        &self,
        t: &Tape,
        bind: &Binding,
        taps: &UNetTaps,
        input_hw: (usize, usize),
    ) -> Vec<Var> {
        let (h, w) = input_hw;
        self.cfg
            .strides
            .iter()
            .zip(self.cfg.tap_levels.iter())
            .enumerate()
            .map(|(lvl, (&stride, &tap))| {
                let target = (h.div_ceil(stride), w.div_ceil(stride));
                let resized = t.bilinear_resize(taps.taps[tap], target.0, target.1);
                self.projs[lvl].forward(t, bind, resized)
            })
            .collect()
    }
}

/// Noise the image for each spec step, run the UNet, and assemble the
/// pyramid; one forward pass per timestep, no iterative denoising.
#[allow(clippy::too_many_arguments)]
pub fn extract_features(
    t: &Tape,
    unet: &UNet,
    unet_bind: &Binding,
    projector: &PyramidProjector,
    proj_bind: &Binding,
    x: &ArrD,
    ctx: Var,
    spec: &TimeStepSpec,
    schedule: &NoiseSchedule,
    eps_seed: u64,
) -> Result<FeaturePyramid> {
    let sh = x.shape().to_vec();
    let (h, w) = (sh[2], sh[3]);
    let mut per_level: Vec<Vec<Var>> = vec![Vec::new(); projector.cfg.strides.len()];
    for (j, &step) in spec.steps().iter().enumerate() {
        let eps = sample_noise(&sh, eps_seed, j);
        let x_t = add_noise(x, step, &eps, schedule)?;
        let xv = t.constant(x_t);
        let taps = unet.forward(t, unet_bind, xv, ctx, step)?;
        for (lvl, var) in projector.build(t, proj_bind, &taps, (h, w)).into_iter().enumerate() {
            per_level[lvl].push(var);
        }
    }
    let levels = per_level
        .into_iter()
        .map(|steps| {
            if steps.len() == 1 {
                steps[0]
            } else {
                t.concat(1, &steps)
            }
        })
        .collect();
    Ok(FeaturePyramid {
        levels,
        strides: projector.cfg.strides.clone(),
        source_timesteps: spec.steps().to_vec(),
    })
}

/// Standard-normal noise tensor, seeded per (run seed, spec position).
pub fn sample_noise(shape: &[usize], eps_seed: u64, step_index: usize) -> ArrD {
    let mut rng = ChaCha8Rng::seed_from_u64(
        eps_seed ^ (step_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    crate::testkit::rand_arr(shape, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::super::unet::UNetConfig;
    use super::*;
    use crate::testkit::rand_arr;

    fn setup() -> (UNet, PyramidProjector) {
        let ucfg = UNetConfig {
            base_width: 8,
            channel_mult: vec![1, 2, 2],
            text_dim: 16,
            time_dim: 16,
            groups: 4,
            seed: 21,
        };
        let unet = UNet::new(ucfg.clone());
        let proj = PyramidProjector::new(
            PyramidConfig {
                channels: 24,
                ..Default::default()
            },
            &ucfg.widths(),
        );
        (unet, proj)
    }

    #[test]
    fn single_step_pyramid_shapes() {
        let (unet, proj) = setup();
        let schedule = NoiseSchedule::default_linear();
        let spec = TimeStepSpec::single(0, 1000).unwrap();
        let t = Tape::new();
        let (ub, pb) = (unet.bind(&t), proj.bind(&t));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_arr(&[2, 3, 64, 64], &mut rng);
        let ctx = t.constant(rand_arr(&[2, 4, 16], &mut rng));
        let pyr =
            extract_features(&t, &unet, &ub, &proj, &pb, &x, ctx, &spec, &schedule, 7).unwrap();
        assert_eq!(pyr.num_levels(), 3);
        assert_eq!(t.shape(pyr.levels[0]), &[2, 24, 32, 32]);
        assert_eq!(t.shape(pyr.levels[1]), &[2, 24, 16, 16]);
        assert_eq!(t.shape(pyr.levels[2]), &[2, 24, 8, 8]);
        assert_eq!(pyr.source_timesteps, vec![0]);
    }

    #[test]
    fn multi_step_concatenates_channels() {
        let (unet, proj) = setup();
        let schedule = NoiseSchedule::default_linear();
        let spec = TimeStepSpec::new(vec![0, 100, 200], 1000).unwrap();
        let t = Tape::new();
        let (ub, pb) = (unet.bind(&t), proj.bind(&t));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr(&[1, 3, 32, 32], &mut rng);
        let ctx = t.constant(rand_arr(&[1, 4, 16], &mut rng));
        let pyr =
            extract_features(&t, &unet, &ub, &proj, &pb, &x, ctx, &spec, &schedule, 7).unwrap();
        assert_eq!(t.shape(pyr.levels[0])[1], 3 * 24);
    }

    #[test]
    fn repeated_zero_step_duplicates_channels() {
        let (unet, proj) = setup();
        let schedule = NoiseSchedule::default_linear();
        let t = Tape::new();
        let (ub, pb) = (unet.bind(&t), proj.bind(&t));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&[1, 3, 16, 16], &mut rng);
        let ctx = t.constant(rand_arr(&[1, 4, 16], &mut rng));
        let single = TimeStepSpec::single(0, 1000).unwrap();
        let double = TimeStepSpec::with_repeats(vec![0, 0], 1000).unwrap();
        let p1 = extract_features(&t, &unet, &ub, &proj, &pb, &x, ctx, &single, &schedule, 7)
            .unwrap();
        let p2 = extract_features(&t, &unet, &ub, &proj, &pb, &x, ctx, &double, &schedule, 7)
            .unwrap();
        let v1 = t.value(p1.levels[0]);
        let v2 = t.value(p2.levels[0]);
        let c = v1.shape()[1];
        for (idx, v) in v1.indexed_iter() {
            let (b, ch, y, x2) = (idx[0], idx[1], idx[2], idx[3]);
            assert_eq!(*v, v2[[b, ch, y, x2]], "first half");
            assert_eq!(*v, v2[[b, ch + c, y, x2]], "second half");
        }
    }

    #[test]
    fn nonzero_step_depends_on_noise_seed() {
        let (unet, proj) = setup();
        let schedule = NoiseSchedule::default_linear();
        let spec = TimeStepSpec::single(500, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr(&[1, 3, 16, 16], &mut rng);
        let c0 = rand_arr(&[1, 4, 16], &mut rng);
        let run = |seed: u64| {
            let t = Tape::new();
            let (ub, pb) = (unet.bind(&t), proj.bind(&t));
            let ctx = t.constant(c0.clone());
            let pyr = extract_features(&t, &unet, &ub, &proj, &pb, &x, ctx, &spec, &schedule, seed)
                .unwrap();
            t.value(pyr.levels[0]).as_ref().clone()
        };
        assert_ne!(run(1), run(2));
        assert_eq!(run(1), run(1));
    }

    #[test]
    fn step_zero_is_noise_free() {
        let (unet, proj) = setup();
        let schedule = NoiseSchedule::default_linear();
        let spec = TimeStepSpec::single(0, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&[1, 3, 16, 16], &mut rng);
        let c0 = rand_arr(&[1, 4, 16], &mut rng);
        let run = |seed: u64| {
            let t = Tape::new();
            let (ub, pb) = (unet.bind(&t), proj.bind(&t));
            let ctx = t.constant(c0.clone());
            let pyr = extract_features(&t, &unet, &ub, &proj, &pb, &x, ctx, &spec, &schedule, seed)
                .unwrap();
            t.value(pyr.levels[0]).as_ref().clone()
        };
        assert_eq!(run(1), run(99));
    }
}
