//! Multi-task video model: a shared 3D convolutional backbone feeding three
//! classification/regression heads and a reconstruction decoder.
//!
//! Four variants exist, crossing backbone depth (shallow: 3 convs, deep: 6)
//! with width (narrow, wide = doubled filters). Spatial max-pooling halves
//! height/width after selected convs; the final pooling stage also collapses
//! the temporal axis, so clips of any length map to the same feature shape.

use crate::error::{Error, Result};
use crate::numerics::{BnMode, BnStats, BnUpdate, Elem, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::derive_rng;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Head convolutions always use this many filters regardless of width.
pub const HEAD_CONV_FILTERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Width {
    Narrow,
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Forward,      // arrow of time
    Intermittent, // motion irregularity
    Middle,       // middle frame reconstruction
    Distill,      // knowledge distillation regression
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub depth: Depth,
    pub width: Width,
    pub input_side: usize,
    pub n_distill: usize,
}

impl ArchitectureConfig {
    pub fn new(depth: Depth, width: Width, n_distill: usize) -> Self {
        Self {
            depth,
            width,
            input_side: 64,
            n_distill,
        }
    }

    /// Backbone 3D-conv filter counts, in order.
    pub fn backbone_filters(&self) -> Vec<usize> {
        let base: &[usize] = match self.depth {
            Depth::Shallow => &[16, 32, 32],
            Depth::Deep => &[16, 16, 32, 32, 32, 32],
        };
        let scale = match self.width {
            Width::Narrow => 1,
            Width::Wide => 2,
        };
        base.iter().map(|&f| f * scale).collect()
    }

    /// For each backbone conv, whether a max-pooling stage follows it. The
    /// last pooling stage is the one that also collapses the temporal axis.
    pub fn pool_after(&self) -> Vec<bool> {
        match self.depth {
            Depth::Shallow => vec![true, true, true],
            Depth::Deep => vec![false, true, false, true, true, true],
        }
    }

    pub fn pooling_count(&self) -> usize {
        self.pool_after().iter().filter(|&&p| p).count()
    }

    /// Side length of the shared feature map (input halved once per pool).
    pub fn feature_side(&self) -> usize {
        self.input_side >> self.pooling_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || self.input_side % (1 << self.pooling_count()) != 0 {
            return Err(Error::arg(format!(
                "input side {} is not divisible by 2^{} pooling stages",
                self.input_side,
                self.pooling_count()
            )));
        }
        if self.n_distill == 0 {
            return Err(Error::arg("n_distill must be positive"));
        }
        Ok(())
    }
}

/// Conv + batch-norm block. The conv carries no bias: batch normalization
/// cancels any constant channel offset, so a bias there would have an
/// identically-zero gradient; `beta` plays that role instead.
struct ConvBn {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats_index: usize,
}

struct Head {
    conv: ConvBn,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

enum DecoderLayer {
    Upsample,
    /// Conv followed by batch-norm + relu.
    Conv(ConvBn),
    /// Final linear reconstruction conv; biased, no normalization.
    Final { kernel: ParamId, bias: ParamId },
}

pub struct MultiTaskModel<E: Elem> {
    pub config: ArchitectureConfig,
    pub seed: u64,
    pub store: ParamStore<E>,
    bn_stats: Vec<BnStats<E>>,
    backbone: Vec<ConvBn>,
    head_forward: Head,
    head_intermittent: Head,
    head_distill: Head,
    decoder: Vec<DecoderLayer>,
}

struct Builder<E: Elem> {
    store: ParamStore<E>,
    bn_stats: Vec<BnStats<E>>,
    seed: u64,
    layer: u64,
}

impl<E: Elem> Builder<E> {
    fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<E> {
        let mut rng = derive_rng(self.seed, "model-init", &[self.layer]);
        self.layer += 1;
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::<f64>::rand_uniform(shape, -bound, bound, &mut rng).cast()
    }

    fn conv_bn_3d(&mut self, c_in: usize, c_out: usize) -> ConvBn {
        let kernel = self.he_uniform(&[3, 3, 3, c_in, c_out], 27 * c_in);
        self.conv_bn(kernel, c_out)
    }

    fn conv_bn_2d(&mut self, c_in: usize, c_out: usize) -> ConvBn {
        let kernel = self.he_uniform(&[3, 3, c_in, c_out], 9 * c_in);
        self.conv_bn(kernel, c_out)
    }

    fn conv_bn(&mut self, kernel: Tensor<E>, c_out: usize) -> ConvBn {
        let kernel = self.store.add(kernel);
        let gamma = self.store.add(Tensor::filled(&[c_out], E::one()));
        let beta = self.store.add(Tensor::zeros(&[c_out]));
        let stats_index = self.bn_stats.len();
        self.bn_stats.push(BnStats::new(c_out));
        ConvBn {
            kernel,
            gamma,
            beta,
            stats_index,
        }
    }

    fn plain_conv_2d(&mut self, c_in: usize, c_out: usize) -> (ParamId, ParamId) {
        let kernel = self.he_uniform(&[3, 3, c_in, c_out], 9 * c_in);
        let kernel = self.store.add(kernel);
        let bias = self.store.add(Tensor::zeros(&[c_out]));
        (kernel, bias)
    }

    fn fully_connected(&mut self, d_in: usize, d_out: usize) -> (ParamId, ParamId) {
        let weight = self.he_uniform(&[d_in, d_out], d_in);
        let weight = self.store.add(weight);
        let bias = self.store.add(Tensor::zeros(&[d_out]));
        (weight, bias)
    }

    fn head(&mut self, c_in: usize, side: usize, units: usize) -> Head {
        let conv = self.conv_bn_2d(c_in, HEAD_CONV_FILTERS);
        let flat = (side / 2) * (side / 2) * HEAD_CONV_FILTERS;
        let (fc_weight, fc_bias) = self.fully_connected(flat, units);
        Head {
            conv,
            fc_weight,
            fc_bias,
        }
    }
}

pub fn build_model<E: Elem>(config: ArchitectureConfig, seed: u64) -> Result<MultiTaskModel<E>> {
    config.validate()?;
    let filters = config.backbone_filters();
    let mut b = Builder {
        store: ParamStore::new(),
        bn_stats: Vec::new(),
        seed,
        layer: 0,
    };

    let mut c_prev = 3;
    let mut backbone = Vec::new();
    for &f in &filters {
        backbone.push(b.conv_bn_3d(c_prev, f));
        c_prev = f;
    }
    let c_feat = *filters.last().unwrap();
    let side = config.feature_side();

    let head_forward = b.head(c_feat, side, 2);
    let head_intermittent = b.head(c_feat, side, 2);
    let head_distill = b.head(c_feat, side, config.n_distill);

    // Decoder: as many 2D convs as backbone convs, as many upsamples as
    // pooling stages, interleaved so the spatial side returns to the input
    // side; channel widths mirror the reversed backbone filter counts and
    // the final conv emits 3 linear channels.
    let n_convs = filters.len();
    let n_ups = config.pooling_count();
    let mut out_channels: Vec<usize> = filters.iter().rev().skip(1).copied().collect();
    out_channels.push(3);
    debug_assert_eq!(out_channels.len(), n_convs);

    let mut decoder = Vec::new();
    let mut c_dec = c_feat;
    match config.depth {
        Depth::Shallow => {
            // up-conv, up-conv, up-conv
            for (i, &c_out) in out_channels.iter().enumerate() {
                decoder.push(DecoderLayer::Upsample);
                if i + 1 < n_convs {
                    decoder.push(DecoderLayer::Conv(b.conv_bn_2d(c_dec, c_out)));
                } else {
                    let (kernel, bias) = b.plain_conv_2d(c_dec, c_out);
                    decoder.push(DecoderLayer::Final { kernel, bias });
                }
                c_dec = c_out;
            }
        }
        Depth::Deep => {
            // conv, up, conv, up, conv, up, conv, up, conv, conv
            for (i, &c_out) in out_channels.iter().enumerate() {
                if i + 1 < n_convs {
                    decoder.push(DecoderLayer::Conv(b.conv_bn_2d(c_dec, c_out)));
                } else {
                    let (kernel, bias) = b.plain_conv_2d(c_dec, c_out);
                    decoder.push(DecoderLayer::Final { kernel, bias });
                }
                c_dec = c_out;
                if i < n_ups {
                    decoder.push(DecoderLayer::Upsample);
                }
            }
        }
    }

    let up_count = decoder
        .iter()
        .filter(|l| matches!(l, DecoderLayer::Upsample))
        .count();
    let conv_count = decoder
        .iter()
        .filter(|l| !matches!(l, DecoderLayer::Upsample))
        .count();
    assert_eq!(up_count, n_ups, "decoder upsamples must match pooling count");
    assert_eq!(conv_count, n_convs, "decoder convs must match backbone convs");
    assert_eq!(side << up_count, config.input_side);

    Ok(MultiTaskModel {
        config,
        seed,
        store: b.store,
        bn_stats: b.bn_stats,
        backbone,
        head_forward,
        head_intermittent,
        head_distill,
        decoder,
    })
}

impl<E: Elem> MultiTaskModel<E> {
    fn conv_bn_relu_3d(
        &self,
        g: &mut Graph<E>,
        layer: &ConvBn,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let k = g.param(&self.store, layer.kernel);
        let c_out = *self.store.value(layer.kernel).shape().last().unwrap();
        let b = g.leaf(Tensor::zeros(&[c_out]), false);
        let y = g.conv3d(x, k, b)?;
        let gamma = g.param(&self.store, layer.gamma);
        let beta = g.param(&self.store, layer.beta);
        let y = g.batch_norm(
            y,
            gamma,
            beta,
            E::from_f64(BN_EPSILON),
            E::from_f64(BN_MOMENTUM),
            mode,
            &self.bn_stats[layer.stats_index],
            layer.stats_index,
        )?;
        Ok(g.relu(y))
    }

    fn conv_2d(&self, g: &mut Graph<E>, layer: &ConvBn, x: Var) -> Result<Var> {
        let k = g.param(&self.store, layer.kernel);
        let c_out = *self.store.value(layer.kernel).shape().last().unwrap();
        let b = g.leaf(Tensor::zeros(&[c_out]), false);
        g.conv2d(x, k, b)
    }

    fn bn_relu_2d(&self, g: &mut Graph<E>, layer: &ConvBn, y: Var, mode: BnMode) -> Result<Var> {
        let gamma = g.param(&self.store, layer.gamma);
        let beta = g.param(&self.store, layer.beta);
        let y = g.batch_norm(
            y,
            gamma,
            beta,
            E::from_f64(BN_EPSILON),
            E::from_f64(BN_MOMENTUM),
            mode,
            &self.bn_stats[layer.stats_index],
            layer.stats_index,
        )?;
        Ok(g.relu(y))
    }

    /// Shared backbone over a [B, T, side, side, 3] clip batch. Any T >= 1
    /// is accepted; the output is [B, 1, S, S, C] with S fixed per config.
    pub fn forward_shared(&self, g: &mut Graph<E>, input: Var, mode: BnMode) -> Result<Var> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 5 || shape[2] != self.config.input_side || shape[3] != self.config.input_side || shape[4] != 3 {
            return Err(Error::shape(format!(
                "backbone expects [B, T, {side}, {side}, 3], got {shape:?}",
                side = self.config.input_side
            )));
        }
        let pools = self.config.pool_after();
        let last_pool = pools.iter().rposition(|&p| p).unwrap();
        let mut x = input;
        for (i, layer) in self.backbone.iter().enumerate() {
            x = self.conv_bn_relu_3d(g, layer, x, mode)?;
            if pools[i] {
                x = if i == last_pool {
                    g.maxpool3d_global_temporal(x)?
                } else {
                    g.maxpool3d_spatial(x)?
                };
            }
        }
        Ok(x)
    }

    /// Classification / regression heads over shared features
    /// [B, 1, S, S, C]. Forward/intermittent emit 2 logits per sample, the
    /// distillation head emits `n_distill` raw values.
    pub fn forward_head(
        &self,
        g: &mut Graph<E>,
        task: Task,
        features: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let head = match task {
            Task::Forward => &self.head_forward,
            Task::Intermittent => &self.head_intermittent,
            Task::Distill => &self.head_distill,
            Task::Middle => {
                return Err(Error::arg(
                    "reconstruction uses forward_decoder, not forward_head",
                ))
            }
        };
        let shape = g.value(features).shape().to_vec();
        let (b, s, c) = (shape[0], shape[2], shape[4]);
        let x = g.reshape(features, &[b, s, s, c])?;
        let y = self.conv_2d(g, &head.conv, x)?;
        let y = self.bn_relu_2d(g, &head.conv, y, mode)?;
        let y = g.maxpool2d(y)?;
        let flat = (s / 2) * (s / 2) * HEAD_CONV_FILTERS;
        let y = g.reshape(y, &[b, flat])?;
        let w = g.param(&self.store, head.fc_weight);
        let bias = g.param(&self.store, head.fc_bias);
        g.fully_connected(y, w, bias)
    }

    /// Reconstruction decoder over shared features [B, 1, S, S, C],
    /// producing [B, side, side, 3].
    pub fn forward_decoder(&self, g: &mut Graph<E>, features: Var, mode: BnMode) -> Result<Var> {
        let shape = g.value(features).shape().to_vec();
        let (b, s, c) = (shape[0], shape[2], shape[4]);
        let mut x = g.reshape(features, &[b, s, s, c])?;
        for layer in &self.decoder {
            x = match layer {
                DecoderLayer::Upsample => g.upsample_nearest_2x(x)?,
                DecoderLayer::Conv(conv) => {
                    let y = self.conv_2d(g, conv, x)?;
                    self.bn_relu_2d(g, conv, y, mode)?
                }
                DecoderLayer::Final { kernel, bias } => {
                    let k = g.param(&self.store, *kernel);
                    let b = g.param(&self.store, *bias);
                    g.conv2d(x, k, b)?
                }
            };
        }
        Ok(x)
    }

    /// Parameters exclusive to one task's output head (decoder for the
    /// reconstruction task). Shared-backbone parameters are never included.
    pub fn head_param_ids(&self, task: Task) -> Vec<ParamId> {
        let head_ids = |h: &Head| {
            vec![
                h.conv.kernel,
                h.conv.gamma,
                h.conv.beta,
                h.fc_weight,
                h.fc_bias,
            ]
        };
        match task {
            Task::Forward => head_ids(&self.head_forward),
            Task::Intermittent => head_ids(&self.head_intermittent),
            Task::Distill => head_ids(&self.head_distill),
            Task::Middle => self
                .decoder
                .iter()
                .flat_map(|layer| match layer {
                    DecoderLayer::Upsample => vec![],
                    DecoderLayer::Conv(c) => vec![c.kernel, c.gamma, c.beta],
                    DecoderLayer::Final { kernel, bias } => vec![*kernel, *bias],
                })
                .collect(),
        }
    }

    /// Learnable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.store.scalar_count()
    }

    /// Folds deferred batch-norm running-stat updates from a training-mode
    /// forward pass back into the model. Updates are applied in forward
    /// order, each mixed against the stats left by the previous one, so a
    /// layer traversed once per task head absorbs every task's batch.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<E>>) {
        for u in updates {
            let current = &self.bn_stats[u.stats_index];
            let (mean, var) = crate::numerics::updated_running_stats(
                &u.mean,
                &u.var,
                current,
                u.momentum,
            );
            self.bn_stats[u.stats_index] = BnStats { mean, var };
        }
    }

    pub fn bn_stats(&self) -> &[BnStats<E>] {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut Vec<BnStats<E>> {
        &mut self.bn_stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::Rng;

    fn all_configs() -> Vec<ArchitectureConfig> {
        let mut out = Vec::new();
        for depth in [Depth::Shallow, Depth::Deep] {
            for width in [Width::Narrow, Width::Wide] {
                out.push(ArchitectureConfig::new(depth, width, 40));
            }
        }
        out
    }

    fn rand_clip(b: usize, t: usize, seed: u64) -> Tensor<f32> {
        let mut rng = derive_rng(seed, "clip", &[]);
        Tensor::rand_uniform(&[b, t, 64, 64, 3], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn filter_counts_match_table() {
        let sn = ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 40);
        assert_eq!(sn.backbone_filters(), vec![16, 32, 32]);
        let dw = ArchitectureConfig::new(Depth::Deep, Width::Wide, 40);
        assert_eq!(dw.backbone_filters(), vec![32, 32, 64, 64, 64, 64]);
        assert_eq!(sn.feature_side(), 8);
        assert_eq!(dw.feature_side(), 4);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 40);
        let a = build_model::<f32>(cfg.clone(), 7).unwrap();
        let b = build_model::<f32>(cfg, 7).unwrap();
        assert_eq!(a.store.scalar_count(), b.store.scalar_count());
        for (ia, ib) in a.store.ids().zip(b.store.ids()) {
            assert_eq!(a.store.value(ia).data(), b.store.value(ib).data());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 40);
        let a = build_model::<f32>(cfg.clone(), 7).unwrap();
        let b = build_model::<f32>(cfg, 8).unwrap();
        let ia = a.store.ids().next().unwrap();
        assert_ne!(a.store.value(ia).data(), b.store.value(ia).data());
    }

    #[test]
    fn shared_feature_shapes_for_all_configs_and_lengths() {
        for cfg in all_configs() {
            let s = cfg.feature_side();
            let c = *cfg.backbone_filters().last().unwrap();
            let model = build_model::<f32>(cfg, 1).unwrap();
            for t in [1usize, 6, 7] {
                let mut g = Graph::new();
                let x = g.input(rand_clip(1, t, t as u64));
                let f = model.forward_shared(&mut g, x, BnMode::Eval).unwrap();
                assert_eq!(g.value(f).shape(), &[1, 1, s, s, c]);
            }
        }
    }

    #[test]
    fn head_output_shapes() {
        for cfg in all_configs() {
            let n_distill = cfg.n_distill;
            let side = cfg.input_side;
            let model = build_model::<f32>(cfg, 2).unwrap();
            let mut g = Graph::new();
            let x = g.input(rand_clip(2, 7, 3));
            let f = model.forward_shared(&mut g, x, BnMode::Eval).unwrap();
            for (task, units) in [
                (Task::Forward, 2),
                (Task::Intermittent, 2),
                (Task::Distill, n_distill),
            ] {
                let y = model.forward_head(&mut g, task, f, BnMode::Eval).unwrap();
                assert_eq!(g.value(y).shape(), &[2, units]);
            }
            let r = model.forward_decoder(&mut g, f, BnMode::Eval).unwrap();
            assert_eq!(g.value(r).shape(), &[2, side, side, 3]);
        }
    }

    #[test]
    fn middle_task_rejected_by_forward_head() {
        let model =
            build_model::<f32>(ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 40), 0)
                .unwrap();
        let mut g = Graph::new();
        let x = g.input(rand_clip(1, 6, 4));
        let f = model.forward_shared(&mut g, x, BnMode::Eval).unwrap();
        assert!(model
            .forward_head(&mut g, Task::Middle, f, BnMode::Eval)
            .is_err());
    }

    #[test]
    fn wrong_spatial_size_rejected() {
        let model =
            build_model::<f32>(ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 40), 0)
                .unwrap();
        let mut g = Graph::new();
        let mut rng = derive_rng(5, "clip", &[]);
        let x = g.input(Tensor::<f32>::rand_uniform(&[1, 3, 32, 32, 3], 0.0, 1.0, &mut rng));
        assert!(model.forward_shared(&mut g, x, BnMode::Eval).is_err());
    }

    #[test]
    fn zero_input_stays_finite() {
        let model =
            build_model::<f32>(ArchitectureConfig::new(Depth::Deep, Width::Narrow, 40), 0)
                .unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::<f32>::zeros(&[1, 7, 64, 64, 3]));
        let f = model.forward_shared(&mut g, x, BnMode::Eval).unwrap();
        assert!(g.value(f).all_finite());
        let y = model
            .forward_head(&mut g, Task::Forward, f, BnMode::Eval)
            .unwrap();
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn parameter_count_matches_shape_walk_and_orders() {
        let mut counts = Vec::new();
        for cfg in all_configs() {
            let model = build_model::<f32>(cfg.clone(), 0).unwrap();

            // independent shape walk over the layer recipe
            let filters = cfg.backbone_filters();
            let mut expected = 0usize;
            let mut c_prev = 3;
            for &f in &filters {
                expected += 27 * c_prev * f + 2 * f; // kernel + bn gamma/beta
                c_prev = f;
            }
            let c_feat = *filters.last().unwrap();
            let s = cfg.feature_side();
            for units in [2, 2, cfg.n_distill] {
                expected += 9 * c_feat * HEAD_CONV_FILTERS + 2 * HEAD_CONV_FILTERS;
                expected += (s / 2) * (s / 2) * HEAD_CONV_FILTERS * units + units;
            }
            let mut dec_out: Vec<usize> = filters.iter().rev().skip(1).copied().collect();
            dec_out.push(3);
            let mut c_dec = c_feat;
            for (i, &c_out) in dec_out.iter().enumerate() {
                expected += 9 * c_dec * c_out;
                if i + 1 < dec_out.len() {
                    expected += 2 * c_out; // bn on all but the linear output conv
                } else {
                    expected += c_out; // only the linear output conv has a bias
                }
                c_dec = c_out;
            }
            assert_eq!(model.count_parameters(), expected, "{cfg:?}");
            counts.push((cfg, model.count_parameters()));
        }
        // widening strictly increases the count; shallow+narrow < deep+wide
        let get = |d: Depth, w: Width| {
            counts
                .iter()
                .find(|(c, _)| c.depth == d && c.width == w)
                .unwrap()
                .1
        };
        assert!(get(Depth::Shallow, Width::Wide) > get(Depth::Shallow, Width::Narrow));
        assert!(get(Depth::Deep, Width::Wide) > get(Depth::Deep, Width::Narrow));
        assert!(get(Depth::Deep, Width::Wide) > get(Depth::Shallow, Width::Narrow));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let model =
            build_model::<f32>(ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 40), 3)
                .unwrap();
        let a = rand_clip(1, 7, 10);
        let b = rand_clip(1, 7, 11);
        let run = |first: &Tensor<f32>, second: &Tensor<f32>| {
            let mut data = first.data().to_vec();
            data.extend_from_slice(second.data());
            let batch = Tensor::from_vec(&[2, 7, 64, 64, 3], data).unwrap();
            let mut g = Graph::new();
            let x = g.input(batch);
            let f = model.forward_shared(&mut g, x, BnMode::Eval).unwrap();
            let y = model
                .forward_head(&mut g, Task::Forward, f, BnMode::Eval)
                .unwrap();
            g.value(y).data().to_vec()
        };
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        assert_eq!(&ab[0..2], &ba[2..4]);
        assert_eq!(&ab[2..4], &ba[0..2]);
    }

    #[test]
    fn forward_backward_leaves_finite_gradients() {
        let mut model =
            build_model::<f32>(ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 8), 4)
                .unwrap();
        let mut g = Graph::new();
        let x = g.input(rand_clip(2, 7, 12));
        let f = model.forward_shared(&mut g, x, BnMode::Train).unwrap();
        let logits = model
            .forward_head(&mut g, Task::Forward, f, BnMode::Train)
            .unwrap();
        let target = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = g.cross_entropy_loss(logits, &target).unwrap();
        g.backward(loss, &mut model.store).unwrap();
        let updates = g.take_bn_updates();
        assert!(!updates.is_empty());
        for id in model.store.ids().collect::<Vec<_>>() {
            assert!(model.store.grad(id).all_finite());
        }
        model.apply_bn_updates(updates);
        assert!(model.bn_stats()[0].mean.all_finite());
    }

    #[test]
    fn training_mode_updates_running_stats() {
        let mut model =
            build_model::<f32>(ArchitectureConfig::new(Depth::Shallow, Width::Narrow, 8), 5)
                .unwrap();
        let before = model.bn_stats()[0].mean.data().to_vec();
        let mut g = Graph::new();
        let x = g.input(rand_clip(1, 7, 13));
        model.forward_shared(&mut g, x, BnMode::Train).unwrap();
        model.apply_bn_updates(g.take_bn_updates());
        assert_ne!(model.bn_stats()[0].mean.data(), before.as_slice());
    }

    #[test]
    fn gradcheck_tiny_model_joint_forward() {
        // double-precision finite differences through backbone + one head.
        // Probes whose perturbation interval crosses a relu/pool boundary
        // are resampled: the loss has a kink there and central differences
        // are not a valid oracle.
        let cfg = ArchitectureConfig {
            depth: Depth::Shallow,
            width: Width::Narrow,
            input_side: 16,
            n_distill: 4,
        };
        let model = build_model::<f64>(cfg, 6).unwrap();
        let mut rng = derive_rng(14, "clip", &[]);
        let clip = Tensor::<f64>::rand_uniform(&[2, 3, 16, 16, 3], 0.0, 1.0, &mut rng);
        let target = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();

        let build = |m: &MultiTaskModel<f64>, g: &mut Graph<f64>| {
            let x = g.input(clip.clone());
            let f = m.forward_shared(g, x, BnMode::Train).unwrap();
            let y = m.forward_head(g, Task::Forward, f, BnMode::Train).unwrap();
            g.cross_entropy_loss(y, &target).unwrap()
        };
        let eval = |m: &MultiTaskModel<f64>, id: ParamId, idx: usize, delta: f64| {
            let mut m2 = build_model::<f64>(m.config.clone(), m.seed).unwrap();
            for (a, b) in m.store.ids().zip(m2.store.ids()) {
                *m2.store.value_mut(b) = m.store.value(a).clone();
            }
            m2.store.value_mut(id).data_mut()[idx] += delta;
            let mut g = Graph::new();
            let l = build(&m2, &mut g);
            (g.scalar_value(l), g.activation_signature())
        };

        let mut model = model;
        model.store.zero_grads();
        let mut g = Graph::new();
        let loss = build(&model, &mut g);
        let mut store = std::mem::replace(&mut model.store, ParamStore::new());
        g.backward(loss, &mut store).unwrap();
        model.store = store;

        let step = 1e-5;
        let ids: Vec<_> = model.store.ids().collect();
        let mut rng = derive_rng(15, "probe", &[]);
        let mut worst = 0.0f64;
        let mut checked = 0;
        for &id in &ids {
            let n = model.store.value(id).numel();
            let mut tries = 0;
            while tries < 10 {
                tries += 1;
                let idx = rng.gen_range(0..n);
                let (lp, sig_p) = eval(&model, id, idx, step);
                let (lm, sig_m) = eval(&model, id, idx, -step);
                if sig_p != sig_m {
                    continue; // kink inside the probe interval
                }
                let numeric = (lp - lm) / (2.0 * step);
                let analytic = model.store.grad(id).data()[idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((analytic - numeric).abs() / denom);
                checked += 1;
                break;
            }
        }
        assert!(checked >= ids.len() - 2, "too few clean probes: {checked}");
        assert!(worst < 1e-5, "worst rel err {}", worst);
    }
}
