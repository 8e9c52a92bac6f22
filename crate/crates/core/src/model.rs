//! Model definitions: a small three-stage backbone at output stride 4, the
//! two-channel activation branch, the affinity branch, and the
//! fully-supervised variant trained on (pseudo) masks.
//!
//! The weak model follows the refine-then-upsample order: backbone features
//! feed both branches, the affinity features build a transition matrix, the
//! random walk refines the activation logits at feature resolution, and only
//! then are logits upsampled, cropped to the original size, and softmaxed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{tape_affinity_graph, tape_random_walk, AffinityGraphVars, NeighborhoodSpec};
use crate::error::{Error, Result};
use crate::kernels::PairPattern;
use crate::optim::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{el, Element, Tensor};

pub const OUTPUT_STRIDE: usize = 4;

/// Serialized form of [`NeighborhoodSpec`] lives here so checkpoints can
/// rebuild the model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AffinitySettings {
    pub radius: usize,
    pub include_self: bool,
    pub beta: f64,
    pub walk_steps: usize,
}

impl Default for AffinitySettings {
    fn default() -> Self {
        // beta/t deliberately shallow: trained from scratch, deeper walks
        // smear the point-supervision gradients over the whole grid and stall
        // the first epochs. Both stay available as config keys.
        AffinitySettings { radius: 5, include_self: true, beta: 2.0, walk_steps: 2 }
    }
}

impl AffinitySettings {
    pub fn neighborhood(&self) -> NeighborhoodSpec {
        NeighborhoodSpec { radius: self.radius, include_self: self.include_self }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Channel widths of the three backbone stages.
    pub backbone_channels: (usize, usize, usize),
    /// Output widths of the three per-level 1x1 affinity convolutions.
    pub branch_channels: (usize, usize, usize),
    /// Width of the fusing 1x1 convolution (the affinity feature width).
    pub fuse_channels: usize,
    pub affinity: AffinitySettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Desk-scale widths: one quarter of the full-width branches.
    pub fn toy() -> Self {
        ModelConfig {
            backbone_channels: (16, 32, 64),
            branch_channels: (16, 32, 64),
            fuse_channels: 112,
            affinity: AffinitySettings::default(),
        }
    }

    /// Restores the full-width affinity branches (64/128/256 -> 448).
    pub fn full_width() -> Self {
        ModelConfig {
            backbone_channels: (16, 32, 64),
            branch_channels: (64, 128, 256),
            fuse_channels: 448,
            affinity: AffinitySettings::default(),
        }
    }

    /// Miniature config for gradient checks and fixtures.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone_channels: (3, 4, 5),
            branch_channels: (2, 3, 4),
            fuse_channels: 9,
            affinity: AffinitySettings { radius: 2, include_self: true, beta: 2.0, walk_steps: 2 },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full-width" => Ok(Self::full_width()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown model preset {other:?} (expected toy | full-width | tiny)"
            ))),
        }
    }
}

/// Fan-in-scaled uniform init: `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, which
/// has standard deviation `1/sqrt(fan_in)`. Biases start at zero.
fn init_conv<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<()> {
    let fan_in = (cin * k * k) as f64;
    let bound = (3.0 / fan_in).sqrt();
    let weight = Tensor::from_fn(vec![cout, cin, k, k], |_| el(rng.gen_range(-bound..bound)));
    store.insert(&format!("{name}.weight"), weight)?;
    store.insert(&format!("{name}.bias"), Tensor::zeros(vec![cout]))?;
    Ok(())
}

fn conv_block<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = tape.param(&format!("{name}.weight"), store.get(&format!("{name}.weight"))?);
    let b = tape.param(&format!("{name}.bias"), store.get(&format!("{name}.bias"))?);
    let c = tape.conv2d(x, w, stride, pad)?;
    tape.bias_add(c, b)
}

fn backbone_params<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    (c1, c2, c3): (usize, usize, usize),
) -> Result<()> {
    init_conv(store, rng, "backbone.stage1.conv1", c1, 3, 3)?;
    init_conv(store, rng, "backbone.stage1.conv2", c1, c1, 3)?;
    init_conv(store, rng, "backbone.stage2.conv1", c2, c1, 3)?;
    init_conv(store, rng, "backbone.stage2.conv2", c2, c2, 3)?;
    init_conv(store, rng, "backbone.stage3.conv1", c3, c2, 3)?;
    init_conv(store, rng, "backbone.stage3.conv2", c3, c3, 3)?;
    Ok(())
}

/// Three stages of (3x3 conv, relu) x2; the two stride-2 convolutions sit in
/// stage one, so all three feature levels share the stride-4 grid.
pub fn backbone_forward<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    image: Var,
) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(image);
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::dim(format!("backbone expects [3,H,W], got {shape:?}")));
    }
    if !shape[1].is_multiple_of(OUTPUT_STRIDE) || !shape[2].is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::dim(format!(
            "backbone input {}x{} not a multiple of the output stride {OUTPUT_STRIDE}",
            shape[1], shape[2]
        )));
    }
    let mut x = conv_block(tape, store, "backbone.stage1.conv1", image, 2, 1)?;
    x = tape.relu(x);
    x = conv_block(tape, store, "backbone.stage1.conv2", x, 2, 1)?;
    let f1 = tape.relu(x);
    let mut x = conv_block(tape, store, "backbone.stage2.conv1", f1, 1, 1)?;
    x = tape.relu(x);
    x = conv_block(tape, store, "backbone.stage2.conv2", x, 1, 1)?;
    let f2 = tape.relu(x);
    let mut x = conv_block(tape, store, "backbone.stage3.conv1", f2, 1, 1)?;
    x = tape.relu(x);
    x = conv_block(tape, store, "backbone.stage3.conv2", x, 1, 1)?;
    let f3 = tape.relu(x);
    Ok((f1, f2, f3))
}

/// The weak model: backbone + activation branch + affinity branch + walk.
#[derive(Clone, Debug)]
pub struct AlcfcnModel {
    pub cfg: ModelConfig,
}

/// Tape handles exposed by one forward pass.
pub struct AlcfcnForward {
    /// `[2, H, W]` per-pixel probabilities at (cropped) image resolution.
    pub s: Var,
    /// Activation logits at feature resolution.
    pub f_act: Var,
    /// Affinity features at feature resolution.
    pub f_aff: Var,
    /// Refined logits after the random walk.
    pub f_ref: Var,
    /// Transition-matrix pieces (powered weights and row normalizers).
    pub graph: AffinityGraphVars,
    pub pattern: Arc<PairPattern>,
}

impl AlcfcnModel {
    pub fn new(cfg: ModelConfig) -> Self {
        AlcfcnModel { cfg }
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c1, c2, c3) = self.cfg.backbone_channels;
        let (b1, b2, b3) = self.cfg.branch_channels;
        backbone_params(&mut store, &mut rng, (c1, c2, c3))?;
        init_conv(&mut store, &mut rng, "act.conv", 2, c3, 1)?;
        init_conv(&mut store, &mut rng, "aff.level1", b1, c1, 1)?;
        init_conv(&mut store, &mut rng, "aff.level2", b2, c2, 1)?;
        init_conv(&mut store, &mut rng, "aff.level3", b3, c3, 1)?;
        init_conv(&mut store, &mut rng, "aff.fuse", self.cfg.fuse_channels, b1 + b2 + b3, 1)?;
        Ok(store)
    }

    /// Activation branch: one 1x1 convolution onto 2 channels.
    pub fn activation_branch<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f3: Var,
    ) -> Result<Var> {
        conv_block(tape, store, "act.conv", f3, 1, 0)
    }

    /// Affinity branch: per-level 1x1 convs + relu, resized onto the last
    /// level's grid, concatenated, and fused by a final 1x1 conv.
    pub fn affinity_branch<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        levels: (Var, Var, Var),
    ) -> Result<Var> {
        let target = {
            let s = tape.shape(levels.2);
            (s[1], s[2])
        };
        let mut mapped = Vec::new();
        for (i, f) in [levels.0, levels.1, levels.2].into_iter().enumerate() {
            let mut v = conv_block(tape, store, &format!("aff.level{}", i + 1), f, 1, 0)?;
            v = tape.relu(v);
            let s = tape.shape(v);
            if (s[1], s[2]) != target {
                v = tape.bilinear_upsample(v, target.0, target.1)?;
            }
            mapped.push(v);
        }
        let cat = tape.concat_channels(&mapped)?;
        conv_block(tape, store, "aff.fuse", cat, 1, 0)
    }

    /// Full forward pass. `crop` restores the original (pre-padding) size
    /// before the softmax.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        crop: Option<(usize, usize)>,
    ) -> Result<AlcfcnForward> {
        let x = tape.constant(image);
        let (f1, f2, f3) = backbone_forward(tape, store, x)?;
        let f_act = self.activation_branch(tape, store, f3)?;
        let f_aff = self.affinity_branch(tape, store, (f1, f2, f3))?;

        let fs = tape.shape(f_aff);
        let pattern = self.cfg.affinity.neighborhood().pattern(fs[1], fs[2]);
        let graph = tape_affinity_graph(
            tape,
            f_aff,
            &pattern,
            self.cfg.affinity.beta,
            self.cfg.affinity.include_self,
        )?;
        let f_ref = tape_random_walk(
            tape,
            f_act,
            &graph,
            &pattern,
            self.cfg.affinity.walk_steps,
            self.cfg.affinity.include_self,
        )?;

        let (full_h, full_w) = (tape.shape(x)[1], tape.shape(x)[2]);
        let mut logits = tape.bilinear_upsample(f_ref, full_h, full_w)?;
        if let Some((h, w)) = crop {
            if (h, w) != (full_h, full_w) {
                logits = tape.crop_spatial(logits, h, w)?;
            }
        }
        let s = tape.softmax_channels(logits)?;
        Ok(AlcfcnForward { s, f_act, f_aff, f_ref, graph, pattern })
    }
}

/// Fully-supervised model: shared backbone topology plus an upsampling head
/// that aggregates all three levels into 2 channels at input resolution.
#[derive(Clone, Debug)]
pub struct FsModel {
    pub backbone_channels: (usize, usize, usize),
}

pub struct FsForward {
    pub s: Var,
}

impl FsModel {
    pub fn new(backbone_channels: (usize, usize, usize)) -> Self {
        FsModel { backbone_channels }
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c1, c2, c3) = self.backbone_channels;
        backbone_params(&mut store, &mut rng, (c1, c2, c3))?;
        init_conv(&mut store, &mut rng, "head.level1", 2, c1, 1)?;
        init_conv(&mut store, &mut rng, "head.level2", 2, c2, 1)?;
        init_conv(&mut store, &mut rng, "head.level3", 2, c3, 1)?;
        Ok(store)
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        crop: Option<(usize, usize)>,
    ) -> Result<FsForward> {
        let x = tape.constant(image);
        let (f1, f2, f3) = backbone_forward(tape, store, x)?;
        let h1 = conv_block(tape, store, "head.level1", f1, 1, 0)?;
        let h2 = conv_block(tape, store, "head.level2", f2, 1, 0)?;
        let h3 = conv_block(tape, store, "head.level3", f3, 1, 0)?;
        let sum12 = tape.add(h1, h2)?;
        let fused = tape.add(sum12, h3)?;
        let (full_h, full_w) = (tape.shape(x)[1], tape.shape(x)[2]);
        let mut logits = tape.bilinear_upsample(fused, full_h, full_w)?;
        if let Some((h, w)) = crop {
            if (h, w) != (full_h, full_w) {
                logits = tape.crop_spatial(logits, h, w)?;
            }
        }
        let s = tape.softmax_channels(logits)?;
        Ok(FsForward { s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_shapes_follow_the_stride_arithmetic() {
        let model = AlcfcnModel::new(ModelConfig::toy());
        let store = model.init_params::<f32>(7).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::from_fn(vec![3, 64, 96], |i| (i as f32 * 0.01).sin());
        let x = tape.constant(&img);
        let (f1, f2, f3) = backbone_forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(f1), &[16, 16, 24]);
        assert_eq!(tape.shape(f2), &[32, 16, 24]);
        assert_eq!(tape.shape(f3), &[64, 16, 24]);
    }

    #[test]
    fn zero_image_stays_zero_through_linear_stages() {
        let model = AlcfcnModel::new(ModelConfig::tiny());
        let store = model.init_params::<f32>(3).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros(vec![3, 8, 8]);
        let x = tape.constant(&img);
        let (f1, f2, f3) = backbone_forward(&mut tape, &store, x).unwrap();
        for f in [f1, f2, f3] {
            assert!(tape.value(f).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unpadded_input_is_dim_error() {
        let model = AlcfcnModel::new(ModelConfig::tiny());
        let store = model.init_params::<f32>(3).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros(vec![3, 10, 8]);
        let x = tape.constant(&img);
        assert!(matches!(backbone_forward(&mut tape, &store, x), Err(Error::Dim(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let model = AlcfcnModel::new(ModelConfig::tiny());
        let store = model.init_params::<f32>(11).unwrap();
        let img = Tensor::from_fn(vec![3, 8, 12], |i| (i as f32 * 0.07).cos());
        let run = || {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &img, None).unwrap();
            tape.value(out.s).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn activation_branch_always_outputs_two_channels() {
        for cfg in [ModelConfig::tiny(), ModelConfig::toy()] {
            let model = AlcfcnModel::new(cfg);
            let store = model.init_params::<f32>(1).unwrap();
            let mut tape = Tape::new();
            let img = Tensor::zeros(vec![3, 8, 8]);
            let x = tape.constant(&img);
            let (_, _, f3) = backbone_forward(&mut tape, &store, x).unwrap();
            let act = model.activation_branch(&mut tape, &store, f3).unwrap();
            assert_eq!(tape.shape(act)[0], 2);
        }
    }

    #[test]
    fn affinity_branch_width_is_the_fuse_width() {
        let model = AlcfcnModel::new(ModelConfig::toy());
        let store = model.init_params::<f32>(5).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::from_fn(vec![3, 64, 96], |i| (i % 7) as f32 * 0.1);
        let x = tape.constant(&img);
        let levels = backbone_forward(&mut tape, &store, x).unwrap();
        let aff = model.affinity_branch(&mut tape, &store, levels).unwrap();
        assert_eq!(tape.shape(aff), &[112, 16, 24]);
        assert_eq!(16 + 32 + 64, 112, "fuse width defaults to the branch sum");
    }

    #[test]
    fn zero_affinity_features_give_unit_pair_weights() {
        // zero image + zero biases -> zero features -> all pair weights exp(0)=1
        let model = AlcfcnModel::new(ModelConfig::tiny());
        let store = model.init_params::<f64>(2).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros(vec![3, 8, 8]);
        let out = model.forward(&mut tape, &store, &img, None).unwrap();
        assert!(tape.value(out.f_aff).iter().all(|&v| v == 0.0));
        for &w in tape.value(out.graph.powered) {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn s_is_softmax_normalized_and_cropped() {
        let model = AlcfcnModel::new(ModelConfig::tiny());
        let store = model.init_params::<f32>(13).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::from_fn(vec![3, 8, 12], |i| (i as f32 * 0.03).sin());
        let out = model.forward(&mut tape, &store, &img, Some((7, 11))).unwrap();
        assert_eq!(tape.shape(out.s), &[2, 7, 11]);
        let v = tape.value(out.s);
        for p in 0..7 * 11 {
            let sum = v[p] + v[7 * 11 + p];
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn activation_branch_identity_fixture_is_hand_computable() {
        // 1x1 kernel picking channel 0 into logit 0 and channel 1 into
        // logit 1, with a known bias
        let cfg = ModelConfig::tiny();
        let model = AlcfcnModel::new(cfg);
        let mut store = model.init_params::<f64>(1).unwrap();
        let c3 = 5;
        let mut kernel = vec![0.0; 2 * c3];
        kernel[0] = 1.0; // out 0 <- in 0
        kernel[c3 + 1] = 1.0; // out 1 <- in 1
        let mut rebuilt = ParamStore::new();
        for (name, t) in store.iter() {
            match name.as_str() {
                "act.conv.weight" => rebuilt
                    .insert(name, Tensor::new(vec![2, c3, 1, 1], kernel.clone()).unwrap())
                    .unwrap(),
                "act.conv.bias" => rebuilt
                    .insert(name, Tensor::new(vec![2], vec![0.25, -0.5]).unwrap())
                    .unwrap(),
                _ => rebuilt.insert(name, t.clone()).unwrap(),
            }
        }
        store = rebuilt;
        let mut tape = Tape::<f64>::new();
        let img = Tensor::from_fn(vec![3, 8, 8], |i| (i as f64 * 0.21).sin());
        let x = tape.constant(&img);
        let (_, _, f3) = backbone_forward(&mut tape, &store, x).unwrap();
        let act = model.activation_branch(&mut tape, &store, f3).unwrap();
        let f3v = tape.value(f3).to_vec();
        let hw = 4; // 2x2 feature grid
        for p in 0..hw {
            assert!((tape.value(act)[p] - (f3v[p] + 0.25)).abs() < 1e-12);
            assert!((tape.value(act)[hw + p] - (f3v[hw + p] - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_fuse_makes_affinity_branch_a_concat() {
        // fuse width == sum of branch widths, identity-initialized fuse:
        // the branch output equals the concatenated level features
        let cfg = ModelConfig::tiny();
        let model = AlcfcnModel::new(cfg);
        let store = model.init_params::<f64>(6).unwrap();
        let fuse = cfg.fuse_channels;
        assert_eq!(
            fuse,
            cfg.branch_channels.0 + cfg.branch_channels.1 + cfg.branch_channels.2
        );
        let mut identity = vec![0.0; fuse * fuse];
        for i in 0..fuse {
            identity[i * fuse + i] = 1.0;
        }
        let mut rebuilt = ParamStore::new();
        for (name, t) in store.iter() {
            if name == "aff.fuse.weight" {
                rebuilt
                    .insert(name, Tensor::new(vec![fuse, fuse, 1, 1], identity.clone()).unwrap())
                    .unwrap();
            } else {
                rebuilt.insert(name, t.clone()).unwrap();
            }
        }
        let img = Tensor::from_fn(vec![3, 8, 8], |i| (i as f64 * 0.13).cos());
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&img);
        let levels = backbone_forward(&mut tape, &rebuilt, x).unwrap();
        let aff = model.affinity_branch(&mut tape, &rebuilt, levels).unwrap();

        // manual per-level 1x1 conv + relu, concatenated
        let mut expected = Vec::new();
        for (li, f) in [levels.0, levels.1, levels.2].into_iter().enumerate() {
            let w = rebuilt.get(&format!("aff.level{}.weight", li + 1)).unwrap();
            let b = rebuilt.get(&format!("aff.level{}.bias", li + 1)).unwrap();
            let (cout, cin) = (w.shape()[0], w.shape()[1]);
            let fv = tape.value(f).to_vec();
            let hw = 4;
            for co in 0..cout {
                for p in 0..hw {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        acc += w.at(&[co, ci, 0, 0]) * fv[ci * hw + p];
                    }
                    expected.push(acc.max(0.0));
                }
            }
        }
        for (got, want) in tape.value(aff).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_params_different_seed_different() {
        let model = AlcfcnModel::new(ModelConfig::tiny());
        let a = model.init_params::<f32>(7).unwrap();
        let b = model.init_params::<f32>(7).unwrap();
        let c = model.init_params::<f32>(8).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data());
        }
        let wa = a.get("backbone.stage1.conv1.weight").unwrap();
        let wc = c.get("backbone.stage1.conv1.weight").unwrap();
        assert_ne!(wa.data(), wc.data());
    }

    #[test]
    fn init_stddev_tracks_the_fan_in_formula() {
        // 3x3 kernel, 16 -> 16 channels: std should be ~ 1/sqrt(144)
        let want = (1.0f64 / 144.0).sqrt();
        let mut acc = 0.0;
        let mut count = 0usize;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            init_conv(&mut store, &mut rng, "k", 16, 16, 3).unwrap();
            let w = store.get("k.weight").unwrap();
            let mean: f64 = w.data().iter().sum::<f64>() / w.numel() as f64;
            acc += w.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
            count += w.numel();
        }
        let std = (acc / count as f64).sqrt();
        assert!(
            (std - want).abs() < 0.2 * want,
            "std {std} not within 20% of {want}"
        );
    }

    #[test]
    fn walk_disabled_equals_unrefined_pipeline() {
        let mut cfg = ModelConfig::tiny();
        cfg.affinity.walk_steps = 0;
        let model = AlcfcnModel::new(cfg);
        let store = model.init_params::<f64>(21).unwrap();
        let img = Tensor::from_fn(vec![3, 8, 8], |i| (i as f64 * 0.05).sin());

        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &img, None).unwrap();
        // f_ref must equal f_act exactly when the walk is off
        assert_eq!(tape.value(out.f_ref), tape.value(out.f_act));
    }

    #[test]
    fn fs_model_outputs_two_channels_at_input_resolution() {
        let fs = FsModel::new((3, 4, 5));
        let store = fs.init_params::<f32>(9).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::from_fn(vec![3, 12, 8], |i| (i as f32 * 0.02).cos());
        let out = fs.forward(&mut tape, &store, &img, None).unwrap();
        assert_eq!(tape.shape(out.s), &[2, 12, 8]);
    }

    #[test]
    fn zero_features_make_refinement_a_neighborhood_average() {
        // with all pair weights 1 and self-weight 1, one walk step averages
        // each pixel with its neighbors
        let mut cfg = ModelConfig::tiny();
        cfg.affinity.radius = 1;
        cfg.affinity.walk_steps = 1;
        let model = AlcfcnModel::new(cfg);
        let mut store = model.init_params::<f64>(4).unwrap();
        // zero every affinity-path weight so features vanish; keep act path
        let names: Vec<String> = store
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| n.starts_with("aff."))
            .collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            let mut s2 = ParamStore::new();
            std::mem::swap(&mut s2, &mut store);
            let mut rebuilt = ParamStore::new();
            for (name, t) in s2.iter() {
                if *name == n {
                    rebuilt.insert(name, Tensor::zeros(shape.clone())).unwrap();
                } else {
                    rebuilt.insert(name, t.clone()).unwrap();
                }
            }
            store = rebuilt;
        }
        let img = Tensor::from_fn(vec![3, 8, 8], |i| (i as f64 * 0.11).sin());
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &img, None).unwrap();
        let act = tape.value(out.f_act).to_vec();
        let refined = tape.value(out.f_ref).to_vec();
        let (h, w) = (2, 2); // 8/4
        for k in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    // radius-1 neighbors on the feature grid
                    let mut acc = act[k * h * w + y * w + x];
                    let mut cnt = 1.0;
                    for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            acc += act[k * h * w + ny as usize * w + nx as usize];
                            cnt += 1.0;
                        }
                    }
                    let want = acc / cnt;
                    let got = refined[k * h * w + y * w + x];
                    assert!((got - want).abs() < 1e-9, "({k},{y},{x}): {got} vs {want}");
                }
            }
        }
    }
}
