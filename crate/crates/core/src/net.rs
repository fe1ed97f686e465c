//! The small classifier the attention module plugs into, with manual
//! backprop and a deterministic SGD loop.
//!
//! Architecture (for 3 x 64 x 64 input):
//!
//! ```text
//! conv 3->16, relu, pool2      -> 16 x 32 x 32
//! conv 16->32, relu, pool2     -> 32 x 16 x 16
//! [attention slot A]
//! conv 32->64, relu            -> 64 x 16 x 16
//! [attention slot B]
//! gap -> linear 64 -> K logits (bias-free; rows are the CAM weights)
//! ```
//!
//! Slots hold no parameters; they are active only in training mode (by
//! default) and each batch fixes one branch draw per slot, shared by every
//! sample in the batch.

use crate::dfm::{dfm_backward, dfm_forward_forced, Branch, DfmCache, DfmConfig, Mode};
use crate::error::{CoreError, Result};
use crate::layers::{
    gap_backward, maxpool2, maxpool2_backward, relu, relu_backward, softmax_cross_entropy,
    Conv2d, Linear,
};
use crate::rng::{RngStream, StreamKind};
use crate::tensor::{gap, FeatureMap};

pub const FINAL_CHANNELS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub fc: Linear,
    pub num_classes: usize,
}

/// Which of the two insertion points carry the module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DfmSlots {
    pub a: bool,
    pub b: bool,
}

impl DfmSlots {
    pub const BOTH: DfmSlots = DfmSlots { a: true, b: true };
    pub const NONE: DfmSlots = DfmSlots { a: false, b: false };

    pub fn as_str(self) -> &'static str {
        match (self.a, self.b) {
            (true, true) => "ab",
            (true, false) => "a",
            (false, true) => "b",
            (false, false) => "none",
        }
    }
}

impl std::str::FromStr for DfmSlots {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ab" | "ba" => Ok(DfmSlots::BOTH),
            "a" => Ok(DfmSlots { a: true, b: false }),
            "b" => Ok(DfmSlots { a: false, b: true }),
            "none" => Ok(DfmSlots::NONE),
            other => Err(CoreError::Config(format!(
                "dfm_slots must be one of ab|a|b|none, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dfm_slots: DfmSlots,
    pub dfm: DfmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            dfm_slots: DfmSlots::BOTH,
            dfm: DfmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be >= 1".into()));
        }
        self.dfm.validate()
    }
}

impl Network {
    pub fn init(num_classes: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, StreamKind::WeightInit);
        // The first two convs amplify (gain 48) so that by the attention
        // slots the feature scale sits well above the module's O(1) mask and
        // enhancement maps; conv3 preserves that scale (gain 6), and the
        // small head gain keeps the initial logits around unit size.
        Network {
            conv1: Conv2d::init(3, 16, 48.0, &mut rng),
            conv2: Conv2d::init(16, 32, 48.0, &mut rng),
            conv3: Conv2d::init(32, FINAL_CHANNELS, 6.0, &mut rng),
            fc: Linear::init(FINAL_CHANNELS, num_classes, 0.4, &mut rng),
            num_classes,
        }
    }

    pub fn zeros(num_classes: usize) -> Self {
        Network {
            conv1: Conv2d::zeros(3, 16),
            conv2: Conv2d::zeros(16, 32),
            conv3: Conv2d::zeros(32, FINAL_CHANNELS),
            fc: Linear::zeros(FINAL_CHANNELS, num_classes),
            num_classes,
        }
    }

    /// Parameter blocks in fixed layer order; gradients and checkpoints use
    /// the same order.
    pub fn param_blocks_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.conv3.w,
            &mut self.conv3.b,
            &mut self.fc.w,
        ]
    }

    pub fn param_blocks(&self) -> [&Vec<f64>; 7] {
        [
            &self.conv1.w,
            &self.conv1.b,
            &self.conv2.w,
            &self.conv2.b,
            &self.conv3.w,
            &self.conv3.b,
            &self.fc.w,
        ]
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (i, block) in self.param_blocks().iter().enumerate() {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite(format!("parameter block {i}")));
            }
        }
        Ok(())
    }
}

/// Per-sample activations kept for the backward pass.
pub struct SampleCache {
    x: FeatureMap,
    conv1_out: FeatureMap,
    pool1_out: FeatureMap,
    pool1_idx: Vec<usize>,
    pool1_in_shape: (usize, usize, usize),
    conv2_out: FeatureMap,
    pool2_idx: Vec<usize>,
    pool2_in_shape: (usize, usize, usize),
    dfm_a: Option<DfmCache>,
    conv3_in: FeatureMap,
    conv3_out: FeatureMap,
    dfm_b: Option<DfmCache>,
    final_feats: FeatureMap,
    pooled: Vec<f64>,
}

pub struct SampleForward {
    pub logits: Vec<f64>,
    /// Pre-GAP activations, the CAM source.
    pub final_features: FeatureMap,
    pub cache: Option<SampleCache>,
}

/// Branch choices for the two slots, fixed for a whole batch.
#[derive(Clone, Copy, Debug)]
pub struct SlotBranches {
    pub a: Branch,
    pub b: Branch,
}

/// One draw per active slot per batch; inactive slots get an arbitrary
/// (unused) branch. Variants with a fixed branch consume no randomness,
/// mirroring the single-sample forward.
pub fn draw_slot_branches(
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<SlotBranches> {
    let mut draw = |active: bool| -> Result<Branch> {
        use crate::dfm::DfmVariant;
        if !active {
            return Ok(Branch::Channel);
        }
        Ok(match cfg.dfm.variant {
            DfmVariant::ChannelOnly => Branch::Channel,
            DfmVariant::PositionOnly => Branch::Position,
            _ => {
                if rng.bernoulli(cfg.dfm.tau)? {
                    Branch::Position
                } else {
                    Branch::Channel
                }
            }
        })
    };
    Ok(SlotBranches { a: draw(cfg.dfm_slots.a)?, b: draw(cfg.dfm_slots.b)? })
}

impl Network {
    /// Forward one image. In eval mode the slots pass activations through
    /// untouched and no cache is built.
    pub fn forward_sample(
        &self,
        image: &FeatureMap,
        dfm: &DfmConfig,
        slots: DfmSlots,
        mode: Mode,
        branches: SlotBranches,
    ) -> Result<SampleForward> {
        let (c, _, _) = image.shape();
        if c != 3 {
            return Err(CoreError::ShapeMismatch(format!("expected 3-channel input, got {c}")));
        }
        let conv1_out = self.conv1.forward(image)?;
        let relu1 = relu(&conv1_out);
        let (pool1_out, pool1_idx) = maxpool2(&relu1)?;
        let conv2_out = self.conv2.forward(&pool1_out)?;
        let relu2 = relu(&conv2_out);
        let (pool2_out, pool2_idx) = maxpool2(&relu2)?;

        let (conv3_in, dfm_a) = if slots.a {
            let (out, cache) = dfm_forward_forced(&pool2_out, dfm, branches.a, mode)?;
            (out, cache)
        } else {
            (pool2_out, None)
        };

        let conv3_out = self.conv3.forward(&conv3_in)?;
        let relu3 = relu(&conv3_out);

        let (final_feats, dfm_b) = if slots.b {
            let (out, cache) = dfm_forward_forced(&relu3, dfm, branches.b, mode)?;
            (out, cache)
        } else {
            (relu3, None)
        };

        let pooled = gap(&final_feats).data().to_vec();
        let logits = self.fc.forward(&pooled)?;

        let cache = (mode == Mode::Train).then(|| SampleCache {
            x: image.clone(),
            pool1_in_shape: relu1.shape(),
            conv1_out,
            pool1_out,
            pool1_idx,
            pool2_in_shape: conv2_out.shape(),
            conv2_out,
            pool2_idx,
            dfm_a,
            conv3_in,
            conv3_out,
            dfm_b,
            final_feats: final_feats.clone(),
            pooled: pooled.clone(),
        });
        Ok(SampleForward { logits, final_features: final_feats, cache })
    }

    /// Gradients for every parameter block plus the input image, from one
    /// sample's cache and its logit gradient.
    pub fn backward_sample(
        &self,
        cache: &SampleCache,
        grad_logits: &[f64],
        dfm: &DfmConfig,
    ) -> Result<(NetGrads, FeatureMap)> {
        if grad_logits.len() != self.num_classes {
            return Err(CoreError::ShapeMismatch(format!(
                "{} logit grads for {} classes",
                grad_logits.len(),
                self.num_classes
            )));
        }
        let (gfc, gpooled) = self.fc.backward(&cache.pooled, grad_logits)?;
        let g_final = gap_backward(cache.final_feats.shape(), &gpooled)?;

        let g_relu3 = match &cache.dfm_b {
            Some(dcache) => dfm_backward(&g_final, dcache, dfm)?,
            None => g_final,
        };
        let g_conv3_out = relu_backward(&cache.conv3_out, &g_relu3)?;
        let (gw3, gb3, g_conv3_in) = self.conv3.backward(&cache.conv3_in, &g_conv3_out)?;

        let g_pool2_out = match &cache.dfm_a {
            Some(dcache) => dfm_backward(&g_conv3_in, dcache, dfm)?,
            None => g_conv3_in,
        };
        let g_relu2 = maxpool2_backward(cache.pool2_in_shape, &cache.pool2_idx, &g_pool2_out)?;
        let g_conv2_out = relu_backward(&cache.conv2_out, &g_relu2)?;
        let (gw2, gb2, g_pool1_out) = self.conv2.backward(&cache.pool1_out, &g_conv2_out)?;

        let g_relu1 = maxpool2_backward(cache.pool1_in_shape, &cache.pool1_idx, &g_pool1_out)?;
        let g_conv1_out = relu_backward(&cache.conv1_out, &g_relu1)?;
        let (gw1, gb1, g_input) = self.conv1.backward(&cache.x, &g_conv1_out)?;

        Ok((NetGrads { blocks: [gw1, gb1, gw2, gb2, gw3, gb3, gfc] }, g_input))
    }
}

/// Gradient blocks aligned with [`Network::param_blocks`].
pub struct NetGrads {
    pub blocks: [Vec<f64>; 7],
}

impl NetGrads {
    pub fn zeros_like(net: &Network) -> Self {
        let blocks = net.param_blocks().map(|b| vec![0.0; b.len()]);
        NetGrads { blocks }
    }

    pub fn add(&mut self, other: &NetGrads) {
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for block in &mut self.blocks {
            for v in block.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// A labeled training item: the image and its class.
pub trait TrainItem {
    fn image(&self) -> &FeatureMap;
    fn label(&self) -> usize;
}

impl TrainItem for crate::data::Sample {
    fn image(&self) -> &FeatureMap {
        &self.image
    }
    fn label(&self) -> usize {
        self.label
    }
}

impl TrainItem for (FeatureMap, usize) {
    fn image(&self) -> &FeatureMap {
        &self.0
    }
    fn label(&self) -> usize {
        self.1
    }
}

impl<T: TrainItem + ?Sized> TrainItem for &T {
    fn image(&self) -> &FeatureMap {
        (**self).image()
    }
    fn label(&self) -> usize {
        (**self).label()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Everything that evolves during training; checkpointable mid-run.
#[derive(Debug)]
pub struct TrainState {
    pub net: Network,
    pub cfg: TrainConfig,
    pub epoch: usize,
    pub shuffle: RngStream,
    pub select: RngStream,
    pub velocity: [Vec<f64>; 7],
    pub log: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let net = Network::init(num_classes, cfg.seed);
        let velocity = net.param_blocks().map(|b| vec![0.0; b.len()]);
        Ok(TrainState {
            shuffle: RngStream::new(cfg.seed, StreamKind::Shuffle),
            select: RngStream::new(cfg.seed, StreamKind::DfmSelect),
            net,
            cfg,
            epoch: 0,
            velocity,
            log: Vec::new(),
        })
    }

    /// One full pass over `items`: shuffle, batch, accumulate mean gradients,
    /// momentum step. Returns the epoch's mean loss and training accuracy.
    pub fn run_epoch<T: TrainItem>(&mut self, items: &[T]) -> Result<EpochStats> {
        if items.is_empty() {
            return Err(CoreError::InvalidArgument("empty training set".into()));
        }
        for (i, item) in items.iter().enumerate() {
            if item.label() >= self.net.num_classes {
                return Err(CoreError::InvalidArgument(format!(
                    "item {i}: label {} out of range 0..{}",
                    item.label(),
                    self.net.num_classes
                )));
            }
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        self.shuffle.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            let branches = draw_slot_branches(&self.cfg, &mut self.select)?;
            let mut grads = NetGrads::zeros_like(&self.net);
            for &i in batch {
                let item = &items[i];
                let fwd = self.net.forward_sample(
                    item.image(),
                    &self.cfg.dfm,
                    self.cfg.dfm_slots,
                    Mode::Train,
                    branches,
                )?;
                let (loss, dlogits) = softmax_cross_entropy(&fwd.logits, item.label())?;
                loss_sum += loss;
                if argmax(&fwd.logits) == item.label() {
                    correct += 1;
                }
                let cache = fwd.cache.as_ref().expect("train mode builds a cache");
                let (g, _) = self.net.backward_sample(cache, &dlogits, &self.cfg.dfm)?;
                grads.add(&g);
            }
            grads.scale(1.0 / batch.len() as f64);

            // Momentum SGD: v <- mu*v + g; p <- p - lr*v.
            let lr = self.cfg.lr;
            let mu = self.cfg.momentum;
            for (block, (vel, g)) in self
                .net
                .param_blocks_mut()
                .into_iter()
                .zip(self.velocity.iter_mut().zip(&grads.blocks))
            {
                for ((p, v), gv) in block.iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = mu * *v + gv;
                    *p -= lr * *v;
                }
            }
        }
        self.net.assert_finite()?;
        self.epoch += 1;
        let stats = EpochStats {
            epoch: self.epoch,
            loss: loss_sum / items.len() as f64,
            accuracy: correct as f64 / items.len() as f64,
        };
        self.log.push(stats);
        Ok(stats)
    }

    pub fn run<T: TrainItem>(&mut self, items: &[T]) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(items)?;
        }
        Ok(())
    }
}

/// Train from scratch per the config; convenience over [`TrainState`].
pub fn train<T: TrainItem>(
    items: &[T],
    cfg: TrainConfig,
    num_classes: usize,
) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, num_classes)?;
    state.run(items)?;
    Ok(state)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
