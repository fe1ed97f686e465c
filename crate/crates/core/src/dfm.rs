//! The dual-branch focused attention module.
//!
//! Given an activation tensor `F_in`, the module derives a channel attention
//! vector (spatial mean per channel) and a position attention map (channel
//! mean per cell), turns each into a tanh *enhancement* and a thresholded
//! binary *mask*, strengthens the position mask's border ring, fuses the two
//! branches, randomly selects one fused map, and applies it back onto the
//! input. Everything is parameter-free; the only state is the RNG that picks
//! the branch.
//!
//! Training support is a fixed gradient contract rather than full
//! autodiff: the threshold masks and the border ring are treated as constants
//! of the backward pass, while gradients flow through the residual (or
//! product) application and through the tanh enhancement into the pooling
//! that produced it.

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::{
    broadcast_channel, broadcast_spatial, cap, gap, scale_add, ChannelVector, FeatureMap,
    SpatialMap,
};

/// How the module output is folded back into the input features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApplyMode {
    /// `F_out = F_in + F_Module` (the default).
    Additive,
    /// `F_out = F_in ⊙ F_Module` (erasing-style alternative).
    Multiplicative,
}

impl ApplyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ApplyMode::Additive => "additive",
            ApplyMode::Multiplicative => "multiplicative",
        }
    }
}

impl std::str::FromStr for ApplyMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(ApplyMode::Additive),
            "multiplicative" => Ok(ApplyMode::Multiplicative),
            other => Err(CoreError::Config(format!(
                "apply_mode must be additive or multiplicative, got {other:?}"
            ))),
        }
    }
}

/// Which fused map the stochastic selection picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Position,
    Channel,
}

/// Structural variant, used by the ablation sweep. `Full` is the module as
/// designed; the others disable pieces of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfmVariant {
    /// Channel branch alone: `delta·C̃_E + C̃_M`, no selection draw.
    ChannelOnly,
    /// Position branch alone: `gamma·P̃_E + P̃_M`, no border ring, no draw.
    PositionOnly,
    /// Both branches with the selection draw, but each keeps its own
    /// enhancement (no cross-branch fusion) and the ring is off.
    DualNoFusion,
    /// Cross-branch fusion without the border ring.
    DualFusion,
    /// Cross-branch fusion plus the strengthened border ring.
    Full,
}

impl DfmVariant {
    pub const ALL: [DfmVariant; 5] = [
        DfmVariant::ChannelOnly,
        DfmVariant::PositionOnly,
        DfmVariant::DualNoFusion,
        DfmVariant::DualFusion,
        DfmVariant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DfmVariant::ChannelOnly => "channel",
            DfmVariant::PositionOnly => "position",
            DfmVariant::DualNoFusion => "dual",
            DfmVariant::DualFusion => "fusion",
            DfmVariant::Full => "focused",
        }
    }
}

impl std::str::FromStr for DfmVariant {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(DfmVariant::ChannelOnly),
            "position" => Ok(DfmVariant::PositionOnly),
            "dual" => Ok(DfmVariant::DualNoFusion),
            "fusion" => Ok(DfmVariant::DualFusion),
            "focused" => Ok(DfmVariant::Full),
            other => Err(CoreError::Config(format!(
                "unknown module variant {other:?} (expected channel|position|dual|fusion|focused)"
            ))),
        }
    }
}

/// Hyperparameters of the module. `Default` gives the reference values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DfmConfig {
    /// Channel mask threshold ratio, in (0, 1].
    pub alpha: f64,
    /// Position mask threshold ratio, in (0, 1].
    pub beta: f64,
    /// Weight of the strengthened ring around masked cells, >= 0.
    pub omega: f64,
    /// Coefficient of the position enhancement inside the channel fusion.
    pub delta: f64,
    /// Coefficient of the channel enhancement inside the position fusion.
    pub gamma: f64,
    /// Probability of selecting the position fusion, in [0, 1].
    pub tau: f64,
    pub apply_mode: ApplyMode,
    /// When false (default) the module is an exact no-op at evaluation time.
    pub active_in_eval: bool,
    pub variant: DfmVariant,
}

impl Default for DfmConfig {
    fn default() -> Self {
        DfmConfig {
            alpha: 0.85,
            beta: 0.95,
            omega: 0.15,
            delta: 0.6,
            gamma: 0.4,
            tau: 0.70,
            apply_mode: ApplyMode::Additive,
            active_in_eval: false,
            variant: DfmVariant::Full,
        }
    }
}

impl DfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CoreError::Config(format!("alpha must be in (0,1], got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(CoreError::Config(format!("beta must be in (0,1], got {}", self.beta)));
        }
        if !(self.tau >= 0.0 && self.tau <= 1.0) {
            return Err(CoreError::Config(format!("tau must be in [0,1], got {}", self.tau)));
        }
        for (name, v) in [("omega", self.omega), ("delta", self.delta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Forward / evaluation switch for [`dfm_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything the backward pass needs, captured by a training-mode forward.
#[derive(Clone, Debug)]
pub struct DfmCache {
    pub branch: Branch,
    pub c_a: ChannelVector,
    pub p_a: SpatialMap,
    pub c_e: ChannelVector,
    pub p_e: SpatialMap,
    pub c_m: ChannelVector,
    /// Position mask before the ring is added.
    pub pm_raw: SpatialMap,
    /// Position mask after the ring (equal to `pm_raw` unless the variant
    /// strengthens it).
    pub p_m: SpatialMap,
    pub f_in: FeatureMap,
    pub f_module: FeatureMap,
}

fn threshold_mask(values: &[f64], ratio: f64) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // With nothing positive to suppress, masking everything would erase the
    // whole map; degrade to a pass-through mask instead.
    if max <= 0.0 {
        return vec![1.0; values.len()];
    }
    let cut = ratio * max;
    values.iter().map(|&v| if v >= cut { 0.0 } else { 1.0 }).collect()
}

/// Zero out the channels whose attention reaches `alpha` times the peak.
pub fn channel_mask(c_a: &ChannelVector, alpha: f64) -> ChannelVector {
    ChannelVector::new(threshold_mask(c_a.data(), alpha)).expect("mask values are finite")
}

/// Zero out the cells whose attention reaches `beta` times the peak.
pub fn position_mask(p_a: &SpatialMap, beta: f64) -> SpatialMap {
    SpatialMap::new(p_a.h(), p_a.w(), threshold_mask(p_a.data(), beta))
        .expect("mask values are finite")
}

/// Strengthen the ring of surviving cells that touch a masked cell: each cell
/// of the 8-neighborhood of the masked set (excluding the set itself) gains
/// `omega`, once, regardless of how many masked neighbors it has.
pub fn neighbor_focus(pm: &SpatialMap, omega: f64) -> Result<SpatialMap> {
    if pm.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CoreError::InvalidArgument(
            "neighbor_focus expects a 0/1 mask".into(),
        ));
    }
    let (h, w) = (pm.h(), pm.w());
    let mut out = pm.data().to_vec();
    for i in 0..h {
        for j in 0..w {
            if pm.at(i, j) != 0.0 {
                continue;
            }
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let s = i as i64 + di;
                    let t = j as i64 + dj;
                    if s < 0 || t < 0 || s >= h as i64 || t >= w as i64 {
                        continue;
                    }
                    let (s, t) = (s as usize, t as usize);
                    if pm.at(s, t) == 1.0 {
                        out[s * w + t] = 1.0 + omega;
                    }
                }
            }
        }
    }
    SpatialMap::new(h, w, out)
}

/// Cross-branch fusion: pair each mask with the *other* branch's enhancement.
pub fn fuse(
    c_m: &ChannelVector,
    p_e: &SpatialMap,
    c_e: &ChannelVector,
    p_m: &SpatialMap,
    cfg: &DfmConfig,
    c: usize,
    h: usize,
    w: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    if c_m.len() != c || c_e.len() != c {
        return Err(CoreError::ShapeMismatch(format!(
            "fuse: channel maps of length {} / {} vs c={c}",
            c_m.len(),
            c_e.len()
        )));
    }
    if (p_e.h(), p_e.w()) != (h, w) || (p_m.h(), p_m.w()) != (h, w) {
        return Err(CoreError::ShapeMismatch(format!(
            "fuse: position maps {}x{} / {}x{} vs {h}x{w}",
            p_e.h(),
            p_e.w(),
            p_m.h(),
            p_m.w()
        )));
    }
    let c_me = scale_add(
        cfg.delta,
        &broadcast_spatial(p_e, c),
        &broadcast_channel(c_m, h, w),
    )?;
    let p_me = scale_add(
        cfg.gamma,
        &broadcast_channel(c_e, h, w),
        &broadcast_spatial(p_m, c),
    )?;
    Ok((c_me, p_me))
}

fn apply(f_in: &FeatureMap, f_module: &FeatureMap, mode: ApplyMode) -> Result<FeatureMap> {
    match mode {
        ApplyMode::Additive => f_in.add(f_module),
        ApplyMode::Multiplicative => f_in.hadamard(f_module),
    }
}

/// Run the module with the branch decided by `rng`. In eval mode with
/// `active_in_eval = false` this returns the input untouched (bit-exact) and
/// consumes no randomness.
pub fn dfm_forward(
    f_in: &FeatureMap,
    cfg: &DfmConfig,
    rng: &mut RngStream,
    mode: Mode,
) -> Result<(FeatureMap, Option<DfmCache>)> {
    cfg.validate()?;
    if mode == Mode::Eval && !cfg.active_in_eval {
        return Ok((f_in.clone(), None));
    }
    let branch = match cfg.variant {
        DfmVariant::ChannelOnly => Branch::Channel,
        DfmVariant::PositionOnly => Branch::Position,
        _ => {
            if rng.bernoulli(cfg.tau)? {
                Branch::Position
            } else {
                Branch::Channel
            }
        }
    };
    forward_with_branch(f_in, cfg, branch, mode)
}

/// Like [`dfm_forward`] but with the branch imposed by the caller. Batch
/// training uses this so one draw covers the whole batch; tests use it to
/// freeze the stochastic choice.
pub fn dfm_forward_forced(
    f_in: &FeatureMap,
    cfg: &DfmConfig,
    branch: Branch,
    mode: Mode,
) -> Result<(FeatureMap, Option<DfmCache>)> {
    cfg.validate()?;
    if mode == Mode::Eval && !cfg.active_in_eval {
        return Ok((f_in.clone(), None));
    }
    forward_with_branch(f_in, cfg, branch, mode)
}

fn forward_with_branch(
    f_in: &FeatureMap,
    cfg: &DfmConfig,
    branch: Branch,
    mode: Mode,
) -> Result<(FeatureMap, Option<DfmCache>)> {
    match (cfg.variant, branch) {
        (DfmVariant::ChannelOnly, Branch::Position)
        | (DfmVariant::PositionOnly, Branch::Channel) => {
            return Err(CoreError::InvalidArgument(format!(
                "branch {branch:?} is not available under variant {:?}",
                cfg.variant
            )));
        }
        _ => {}
    }
    let (c, h, w) = f_in.shape();
    let c_a = gap(f_in);
    let p_a = cap(f_in);
    let c_e = c_a.tanh_map();
    let p_e = p_a.tanh_map();
    let c_m = channel_mask(&c_a, cfg.alpha);
    let pm_raw = position_mask(&p_a, cfg.beta);
    let p_m = if cfg.variant == DfmVariant::Full {
        neighbor_focus(&pm_raw, cfg.omega)?
    } else {
        pm_raw.clone()
    };

    let f_module = match (cfg.variant, branch) {
        // Cross-branch pairs.
        (DfmVariant::Full | DfmVariant::DualFusion, _) => {
            let (c_me, p_me) = fuse(&c_m, &p_e, &c_e, &p_m, cfg, c, h, w)?;
            match branch {
                Branch::Channel => c_me,
                Branch::Position => p_me,
            }
        }
        // Same-branch pairs: each mask keeps its own enhancement, with the
        // coefficient of its own fusion equation.
        (DfmVariant::ChannelOnly | DfmVariant::DualNoFusion, Branch::Channel) => scale_add(
            cfg.delta,
            &broadcast_channel(&c_e, h, w),
            &broadcast_channel(&c_m, h, w),
        )?,
        (DfmVariant::PositionOnly | DfmVariant::DualNoFusion, Branch::Position) => scale_add(
            cfg.gamma,
            &broadcast_spatial(&p_e, c),
            &broadcast_spatial(&p_m, c),
        )?,
        _ => unreachable!("invalid pairs rejected above"),
    };

    let f_out = apply(f_in, &f_module, cfg.apply_mode)?;
    let cache = if mode == Mode::Train {
        Some(DfmCache {
            branch,
            c_a,
            p_a,
            c_e,
            p_e,
            c_m,
            pm_raw,
            p_m,
            f_in: f_in.clone(),
            f_module,
        })
    } else {
        None
    };
    Ok((f_out, cache))
}

/// Which pooled enhancement carries gradient, and with what coefficient.
fn enhancement_route(variant: DfmVariant, branch: Branch) -> (Branch, f64, bool) {
    // Returns (enhancement source, coefficient index) where the bool selects
    // delta (true) vs gamma (false).
    match (variant, branch) {
        (DfmVariant::Full | DfmVariant::DualFusion, Branch::Channel) => (Branch::Position, 0.0, true),
        (DfmVariant::Full | DfmVariant::DualFusion, Branch::Position) => (Branch::Channel, 0.0, false),
        (DfmVariant::ChannelOnly | DfmVariant::DualNoFusion, Branch::Channel) => {
            (Branch::Channel, 0.0, true)
        }
        (DfmVariant::PositionOnly | DfmVariant::DualNoFusion, Branch::Position) => {
            (Branch::Position, 0.0, false)
        }
        (DfmVariant::ChannelOnly, Branch::Position)
        | (DfmVariant::PositionOnly, Branch::Channel) => {
            unreachable!("invalid pairs rejected at forward time")
        }
    }
}

/// Propagate `grad_out` back to the module input.
///
/// The masks and the ring are constants of this pass; gradient reaches the
/// input through the application step and through the selected fusion's tanh
/// enhancement, whose pooling adjoint spreads it uniformly over the pooled
/// extent.
pub fn dfm_backward(
    grad_out: &FeatureMap,
    cache: &DfmCache,
    cfg: &DfmConfig,
) -> Result<FeatureMap> {
    let (c, h, w) = cache.f_in.shape();
    if grad_out.shape() != cache.f_in.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "gradient {:?} vs cached input {:?}",
            grad_out.shape(),
            cache.f_in.shape()
        )));
    }
    let plane = h * w;

    // Split Eq.-of-application: grad wrt the input's direct path, and grad
    // wrt the module map.
    let (mut grad_in, grad_module): (Vec<f64>, Vec<f64>) = match cfg.apply_mode {
        ApplyMode::Additive => (grad_out.data().to_vec(), grad_out.data().to_vec()),
        ApplyMode::Multiplicative => (
            grad_out
                .data()
                .iter()
                .zip(cache.f_module.data())
                .map(|(g, m)| g * m)
                .collect(),
            grad_out
                .data()
                .iter()
                .zip(cache.f_in.data())
                .map(|(g, x)| g * x)
                .collect(),
        ),
    };

    let (source, _, use_delta) = enhancement_route(cfg.variant, cache.branch);
    let coef = if use_delta { cfg.delta } else { cfg.gamma };
    match source {
        Branch::Channel => {
            // grad -> C_E (sum over the broadcast plane) -> tanh' -> mean
            // pooling over the plane.
            for k in 0..c {
                let g_sum: f64 = grad_module[k * plane..(k + 1) * plane].iter().sum();
                let g_ca = coef * g_sum * (1.0 - cache.c_e.at(k) * cache.c_e.at(k));
                let spread = g_ca / plane as f64;
                for cell in &mut grad_in[k * plane..(k + 1) * plane] {
                    *cell += spread;
                }
            }
        }
        Branch::Position => {
            // grad -> P_E (sum over channels) -> tanh' -> mean pooling over
            // channels.
            for idx in 0..plane {
                let mut g_sum = 0.0;
                for k in 0..c {
                    g_sum += grad_module[k * plane + idx];
                }
                let pe = cache.p_e.data()[idx];
                let g_pa = coef * g_sum * (1.0 - pe * pe);
                let spread = g_pa / c as f64;
                for k in 0..c {
                    grad_in[k * plane + idx] += spread;
                }
            }
        }
    }
    FeatureMap::new(c, h, w, grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, StreamKind};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_map(r: &mut RngStream, c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| r.uniform(-2.0, 2.0)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn channel_mask_worked_example() {
        let c_a = ChannelVector::new(vec![2.5, 2.0]).unwrap();
        assert_eq!(channel_mask(&c_a, 0.85).data(), &[0.0, 1.0]);
    }

    #[test]
    fn channel_mask_all_equal_masks_everything() {
        let c_a = ChannelVector::new(vec![1.5; 4]).unwrap();
        assert_eq!(channel_mask(&c_a, 1.0).data(), &[0.0; 4]);
        assert_eq!(channel_mask(&c_a, 0.5).data(), &[0.0; 4]);
    }

    #[test]
    fn channel_mask_degenerate_nonpositive() {
        let zero = ChannelVector::new(vec![0.0; 3]).unwrap();
        assert_eq!(channel_mask(&zero, 0.85).data(), &[1.0; 3]);
        let neg = ChannelVector::new(vec![-1.0, -0.5, -2.0]).unwrap();
        assert_eq!(channel_mask(&neg, 0.85).data(), &[1.0; 3]);
    }

    #[test]
    fn position_mask_worked_example() {
        let p_a = SpatialMap::from_rows(&[vec![0.5, 1.0], vec![1.5, 6.0]]).unwrap();
        let m = position_mask(&p_a, 0.95);
        assert_eq!(m.data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn position_mask_single_cell() {
        let p_a = SpatialMap::new(1, 1, vec![0.3]).unwrap();
        assert_eq!(position_mask(&p_a, 0.95).data(), &[0.0]);
    }

    #[test]
    fn position_mask_matches_scan_oracle() {
        let mut r = RngStream::new(21, StreamKind::DataGen);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..36).map(|_| r.uniform(-1.0, 3.0)).collect();
            let p_a = SpatialMap::new(6, 6, vals.clone()).unwrap();
            let got = position_mask(&p_a, 0.95);
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (idx, &v) in vals.iter().enumerate() {
                let want = if max <= 0.0 {
                    1.0
                } else if v >= 0.95 * max {
                    0.0
                } else {
                    1.0
                };
                assert_eq!(got.data()[idx], want, "cell {idx}");
            }
        }
    }

    #[test]
    fn mask_monotone_in_threshold() {
        let mut r = RngStream::new(22, StreamKind::DataGen);
        for _ in 0..50 {
            let c_a = ChannelVector::new((0..8).map(|_| r.uniform(0.1, 4.0)).collect()).unwrap();
            let lo = channel_mask(&c_a, 0.4);
            let hi = channel_mask(&c_a, 0.9);
            for k in 0..8 {
                // Anything masked at the high ratio is masked at the low one.
                if hi.at(k) == 0.0 {
                    assert_eq!(lo.at(k), 0.0);
                }
            }
        }
    }

    #[test]
    fn neighbor_focus_center() {
        let pm = SpatialMap::from_rows(&[
            vec![1.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ])
        .unwrap();
        let out = neighbor_focus(&pm, 0.15).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if (i, j) == (1, 1) {
                    assert_eq!(out.at(i, j), 0.0);
                } else {
                    assert_abs_diff_eq!(out.at(i, j), 1.15, epsilon = 0.0);
                }
            }
        }
    }

    #[test]
    fn neighbor_focus_corner_clips() {
        let pm = SpatialMap::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ])
        .unwrap();
        let out = neighbor_focus(&pm, 0.15).unwrap();
        let strengthened: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| out.at(i, j) > 1.0)
            .collect();
        assert_eq!(strengthened, vec![(0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn neighbor_focus_never_stacks() {
        let pm = SpatialMap::from_rows(&[
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        let out = neighbor_focus(&pm, 0.15).unwrap();
        for v in out.data() {
            assert!(*v == 0.0 || *v == 1.0 || *v == 1.15, "value {v}");
        }
        // Cells between the two masked cells are shared neighbors and must
        // still read exactly 1.15.
        assert_eq!(out.at(0, 1), 1.15);
        assert_eq!(out.at(0, 2), 1.15);
        assert_eq!(out.at(2, 1), 1.15);
        assert_eq!(out.at(2, 2), 1.15);
    }

    #[test]
    fn neighbor_focus_rejects_non_binary() {
        let pm = SpatialMap::new(1, 2, vec![0.5, 1.0]).unwrap();
        assert!(neighbor_focus(&pm, 0.15).is_err());
    }

    /// Support of the ring == dilate8(Mask) \ Mask, values exactly omega.
    #[test]
    fn neighbor_focus_support_matches_dilation_oracle() {
        let mut r = RngStream::new(23, StreamKind::DataGen);
        for _ in 0..100 {
            let h = 1 + r.below(7);
            let w = 1 + r.below(7);
            let vals: Vec<f64> = (0..h * w)
                .map(|_| if r.bernoulli(0.3).unwrap() { 0.0 } else { 1.0 })
                .collect();
            let pm = SpatialMap::new(h, w, vals.clone()).unwrap();
            let out = neighbor_focus(&pm, 0.15).unwrap();

            let masked: Vec<(i64, i64)> = (0..h as i64)
                .flat_map(|i| (0..w as i64).map(move |j| (i, j)))
                .filter(|&(i, j)| vals[(i as usize) * w + j as usize] == 0.0)
                .collect();
            let mut dilated = std::collections::HashSet::new();
            for &(i, j) in &masked {
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (s, t) = (i + di, j + dj);
                        if s >= 0 && t >= 0 && (s as usize) < h && (t as usize) < w {
                            dilated.insert((s, t));
                        }
                    }
                }
            }
            for &(i, j) in &masked {
                dilated.remove(&(i, j));
            }
            for i in 0..h {
                for j in 0..w {
                    let ring = dilated.contains(&(i as i64, j as i64));
                    if ring {
                        assert_eq!(out.at(i, j), 1.0 + 0.15);
                    } else {
                        assert_eq!(out.at(i, j), pm.at(i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn fuse_zero_coefficients_reduce_to_masks() {
        let cfg = DfmConfig {
            delta: 0.0,
            gamma: 0.0,
            ..DfmConfig::default()
        };
        let c_m = ChannelVector::new(vec![1.0, 0.0]).unwrap();
        let c_e = ChannelVector::new(vec![0.9, -0.2]).unwrap();
        let p_e = SpatialMap::new(2, 2, vec![0.5, 0.4, -0.1, 0.2]).unwrap();
        let p_m = SpatialMap::new(2, 2, vec![1.0, 1.15, 0.0, 1.0]).unwrap();
        let (c_me, p_me) = fuse(&c_m, &p_e, &c_e, &p_m, &cfg, 2, 2, 2).unwrap();
        assert_eq!(c_me, broadcast_channel(&c_m, 2, 2));
        assert_eq!(p_me, broadcast_spatial(&p_m, 2));
    }

    #[test]
    fn fuse_forced_arithmetic() {
        let cfg = DfmConfig::default(); // delta = 0.6
        let c_m = ChannelVector::new(vec![1.0, 0.0]).unwrap();
        let c_e = ChannelVector::new(vec![0.0, 0.0]).unwrap();
        let p_e = SpatialMap::new(2, 2, vec![0.5; 4]).unwrap();
        let p_m = SpatialMap::new(2, 2, vec![1.0; 4]).unwrap();
        let (c_me, _) = fuse(&c_m, &p_e, &c_e, &p_m, &cfg, 2, 2, 2).unwrap();
        for v in c_me.channel(0) {
            assert_abs_diff_eq!(*v, 1.3, epsilon = 1e-15);
        }
        for v in c_me.channel(1) {
            assert_abs_diff_eq!(*v, 0.3, epsilon = 1e-15);
        }
    }

    #[test]
    fn fuse_matches_naive_oracle() {
        let mut r = RngStream::new(24, StreamKind::DataGen);
        for _ in 0..50 {
            let c = 1 + r.below(5);
            let h = 1 + r.below(5);
            let w = 1 + r.below(5);
            let cfg = DfmConfig {
                delta: r.uniform(0.0, 1.0),
                gamma: r.uniform(0.0, 1.0),
                ..DfmConfig::default()
            };
            let c_m = ChannelVector::new((0..c).map(|_| r.uniform(0.0, 1.0)).collect()).unwrap();
            let c_e = ChannelVector::new((0..c).map(|_| r.uniform(-1.0, 1.0)).collect()).unwrap();
            let p_e =
                SpatialMap::new(h, w, (0..h * w).map(|_| r.uniform(-1.0, 1.0)).collect()).unwrap();
            let p_m =
                SpatialMap::new(h, w, (0..h * w).map(|_| r.uniform(0.0, 1.2)).collect()).unwrap();
            let (c_me, p_me) = fuse(&c_m, &p_e, &c_e, &p_m, &cfg, c, h, w).unwrap();
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let want_c = cfg.delta * p_e.at(i, j) + c_m.at(k);
                        let want_p = cfg.gamma * c_e.at(k) + p_m.at(i, j);
                        assert_abs_diff_eq!(c_me.at(k, i, j), want_c, epsilon = 1e-12);
                        assert_abs_diff_eq!(p_me.at(k, i, j), want_p, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn fuse_shape_mismatch_errors() {
        let cfg = DfmConfig::default();
        let c_m = ChannelVector::new(vec![1.0, 0.0]).unwrap();
        let c_e = ChannelVector::new(vec![0.0, 0.0]).unwrap();
        let p_e = SpatialMap::new(2, 2, vec![0.5; 4]).unwrap();
        let p_m = SpatialMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert!(fuse(&c_m, &p_e, &c_e, &p_m, &cfg, 3, 2, 2).is_err());
        assert!(fuse(&c_m, &p_e, &c_e, &p_m, &cfg, 2, 3, 2).is_err());
    }

    #[test]
    fn eval_mode_is_bit_exact_passthrough() {
        let mut r = RngStream::new(25, StreamKind::DataGen);
        let f = random_map(&mut r, 4, 5, 5);
        let mut sel = RngStream::new(1, StreamKind::DfmSelect);
        let before = sel.state();
        let (out, cache) = dfm_forward(&f, &DfmConfig::default(), &mut sel, Mode::Eval).unwrap();
        assert_eq!(out, f);
        assert!(cache.is_none());
        // Passthrough must not consume randomness.
        assert_eq!(sel.state(), before);
    }

    #[test]
    fn tau_endpoints_pin_the_branch() {
        let mut r = RngStream::new(26, StreamKind::DataGen);
        let f = random_map(&mut r, 2, 3, 3);
        for (tau, want) in [(1.0, Branch::Position), (0.0, Branch::Channel)] {
            let cfg = DfmConfig { tau, ..DfmConfig::default() };
            let mut sel = RngStream::new(9, StreamKind::DfmSelect);
            for _ in 0..50 {
                let (_, cache) = dfm_forward(&f, &cfg, &mut sel, Mode::Train).unwrap();
                assert_eq!(cache.unwrap().branch, want);
            }
        }
    }

    #[test]
    fn selection_frequency_near_tau() {
        let mut r = RngStream::new(27, StreamKind::DataGen);
        let f = random_map(&mut r, 2, 3, 3);
        let cfg = DfmConfig::default();
        let mut sel = RngStream::new(42, StreamKind::DfmSelect);
        let mut position = 0usize;
        for _ in 0..10_000 {
            let (_, cache) = dfm_forward(&f, &cfg, &mut sel, Mode::Train).unwrap();
            if cache.unwrap().branch == Branch::Position {
                position += 1;
            }
        }
        let frac = position as f64 / 10_000.0;
        assert!((0.68..=0.72).contains(&frac), "position fraction {frac}");
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let mut r = RngStream::new(28, StreamKind::DataGen);
        let f = random_map(&mut r, 3, 4, 4);
        let cfg = DfmConfig::default();
        let run = |seed: u64| {
            let mut sel = RngStream::new(seed, StreamKind::DfmSelect);
            dfm_forward(&f, &cfg, &mut sel, Mode::Train).unwrap().0
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn enhancement_values_stay_inside_unit_interval() {
        let mut r = RngStream::new(29, StreamKind::DataGen);
        for _ in 0..30 {
            let (c, h, w) = (1 + r.below(4), 1 + r.below(5), 1 + r.below(5));
            let f = random_map(&mut r, c, h, w);
            let c_e = gap(&f).tanh_map();
            let p_e = cap(&f).tanh_map();
            assert!(c_e.data().iter().all(|v| v.abs() < 1.0));
            assert!(p_e.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn p_m_values_form_three_level_set() {
        let mut r = RngStream::new(30, StreamKind::DataGen);
        for _ in 0..30 {
            let f = random_map(&mut r, 3, 6, 6);
            let pm = position_mask(&cap(&f), 0.95);
            let p_m = neighbor_focus(&pm, 0.15).unwrap();
            for v in p_m.data() {
                assert!(*v == 0.0 || *v == 1.0 || *v == 1.15, "value {v}");
            }
        }
    }

    /// Independent step-by-step composition for a single-channel input with a
    /// centered peak, forced to the position fusion.
    #[test]
    fn forward_matches_step_by_step_composition() {
        let f = FeatureMap::new(
            1,
            3,
            3,
            vec![0.1, 0.2, 0.1, 0.2, 3.0, 0.2, 0.1, 0.2, 0.1],
        )
        .unwrap();
        let cfg = DfmConfig::default();
        let (out, cache) = dfm_forward_forced(&f, &cfg, Branch::Position, Mode::Train).unwrap();
        let cache = cache.unwrap();
        assert_eq!(cache.branch, Branch::Position);

        // Oracle: naive loops, no module code.
        let vals = f.data();
        // Position attention = channel mean = the single plane itself.
        let p_a: Vec<f64> = vals.to_vec();
        let p_e: Vec<f64> = p_a.iter().map(|v| v.tanh()).collect();
        let max = p_a.iter().cloned().fold(f64::MIN, f64::max);
        let pm: Vec<f64> = p_a
            .iter()
            .map(|&v| if v >= cfg.beta * max { 0.0 } else { 1.0 })
            .collect();
        // Only the center masks; the whole border ring gets 1 + omega.
        let mut p_m = pm.clone();
        for (idx, cell) in p_m.iter_mut().enumerate() {
            if idx != 4 && *cell == 1.0 {
                *cell = 1.0 + cfg.omega;
            }
        }
        // Channel attention of the single channel = global mean.
        let c_a = vals.iter().sum::<f64>() / 9.0;
        let c_e = c_a.tanh();
        let f_module: Vec<f64> = p_m.iter().map(|&m| cfg.gamma * c_e + m).collect();
        let want: Vec<f64> = vals.iter().zip(&f_module).map(|(x, m)| x + m).collect();

        assert_eq!(cache.p_e.data(), p_e.as_slice());
        for (got, want) in out.data().iter().zip(&want) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_residual_only_when_coefficient_zero() {
        let mut r = RngStream::new(31, StreamKind::DataGen);
        let f = random_map(&mut r, 3, 4, 4);
        let cfg = DfmConfig {
            delta: 0.0,
            ..DfmConfig::default()
        };
        let (_, cache) = dfm_forward_forced(&f, &cfg, Branch::Channel, Mode::Train).unwrap();
        let g = random_map(&mut r, 3, 4, 4);
        let back = dfm_backward(&g, &cache.unwrap(), &cfg).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let mut r = RngStream::new(32, StreamKind::DataGen);
        let f = random_map(&mut r, 2, 3, 3);
        let cfg = DfmConfig::default();
        let (_, cache) = dfm_forward_forced(&f, &cfg, Branch::Position, Mode::Train).unwrap();
        let bad = random_map(&mut r, 2, 3, 4);
        assert!(dfm_backward(&bad, &cache.unwrap(), &cfg).is_err());
    }

    fn fd_check(f: &FeatureMap, cfg: &DfmConfig, branch: Branch, weights: &FeatureMap) {
        let loss = |x: &FeatureMap| -> f64 {
            let (out, _) = dfm_forward_forced(x, cfg, branch, Mode::Train).unwrap();
            out.data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = dfm_forward_forced(f, cfg, branch, Mode::Train).unwrap();
        let analytic = dfm_backward(weights, &cache.unwrap(), cfg).unwrap();

        let (c, h, w) = f.shape();
        let eps = 1e-5;
        for idx in 0..c * h * w {
            let mut plus = f.data().to_vec();
            plus[idx] += eps;
            let mut minus = f.data().to_vec();
            minus[idx] -= eps;
            let fd = (loss(&FeatureMap::new(c, h, w, plus).unwrap())
                - loss(&FeatureMap::new(c, h, w, minus).unwrap()))
                / (2.0 * eps);
            let a = analytic.data()[idx];
            let scale = a.abs().max(fd.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (a - fd).abs() / scale;
            assert!(
                rel < 1e-4,
                "idx {idx}: analytic {a} vs fd {fd} (rel {rel}) cfg {cfg:?} branch {branch:?}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = RngStream::new(77, StreamKind::DataGen);
        let mut checked = 0;
        for variant in DfmVariant::ALL {
            for apply_mode in [ApplyMode::Additive, ApplyMode::Multiplicative] {
                let branches: &[Branch] = match variant {
                    DfmVariant::ChannelOnly => &[Branch::Channel],
                    DfmVariant::PositionOnly => &[Branch::Position],
                    _ => &[Branch::Channel, Branch::Position],
                };
                for &branch in branches {
                    let cfg = DfmConfig {
                        alpha: r.uniform(0.6, 0.99),
                        beta: r.uniform(0.6, 0.99),
                        omega: r.uniform(0.0, 0.3),
                        delta: r.uniform(0.1, 1.0),
                        gamma: r.uniform(0.1, 1.0),
                        apply_mode,
                        variant,
                        ..DfmConfig::default()
                    };
                    let f = random_map(&mut r, 4, 6, 6);
                    let weights = random_map(&mut r, 4, 6, 6);
                    fd_check(&f, &cfg, branch, &weights);
                    checked += 1;
                }
            }
        }
        assert!(checked >= 16, "covered {checked} configurations");
        // Top up with extra random full-variant configurations to pass 20.
        for _ in 0..6 {
            let cfg = DfmConfig {
                alpha: r.uniform(0.6, 0.99),
                beta: r.uniform(0.6, 0.99),
                delta: r.uniform(0.1, 1.0),
                gamma: r.uniform(0.1, 1.0),
                ..DfmConfig::default()
            };
            let f = random_map(&mut r, 3, 5, 5);
            let weights = random_map(&mut r, 3, 5, 5);
            let branch = if r.bernoulli(0.5).unwrap() {
                Branch::Position
            } else {
                Branch::Channel
            };
            fd_check(&f, &cfg, branch, &weights);
        }
    }

    #[test]
    fn multiplicative_backward_has_product_structure() {
        let mut r = RngStream::new(33, StreamKind::DataGen);
        let f = random_map(&mut r, 2, 3, 3);
        let cfg = DfmConfig {
            apply_mode: ApplyMode::Multiplicative,
            gamma: 0.0,
            ..DfmConfig::default()
        };
        // gamma = 0 silences the enhancement path of the position fusion, so
        // only the product rule's F_Module factor remains.
        let (_, cache) = dfm_forward_forced(&f, &cfg, Branch::Position, Mode::Train).unwrap();
        let cache = cache.unwrap();
        let g = random_map(&mut r, 2, 3, 3);
        let back = dfm_backward(&g, &cache, &cfg).unwrap();
        let want = g.hadamard(&cache.f_module).unwrap();
        assert_eq!(back, want);
    }

    #[test]
    fn config_validation() {
        assert!(DfmConfig::default().validate().is_ok());
        assert!(DfmConfig { alpha: 0.0, ..DfmConfig::default() }.validate().is_err());
        assert!(DfmConfig { alpha: 1.2, ..DfmConfig::default() }.validate().is_err());
        assert!(DfmConfig { beta: -0.1, ..DfmConfig::default() }.validate().is_err());
        assert!(DfmConfig { tau: 1.1, ..DfmConfig::default() }.validate().is_err());
        assert!(DfmConfig { omega: -0.5, ..DfmConfig::default() }.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in DfmVariant::ALL {
            assert_eq!(v.as_str().parse::<DfmVariant>().unwrap(), v);
        }
        assert!("gibberish".parse::<DfmVariant>().is_err());
        assert_eq!("additive".parse::<ApplyMode>().unwrap(), ApplyMode::Additive);
        assert!("mul".parse::<ApplyMode>().is_err());
    }

    proptest! {
        /// For thresholds a1 <= a2, every channel masked at a2 is masked at a1.
        #[test]
        fn prop_mask_monotone(
            vals in proptest::collection::vec(0.01f64..4.0, 1..12),
            a1 in 0.05f64..1.0,
            d in 0.0f64..0.9,
        ) {
            let a2 = (a1 + d).min(1.0);
            let v = ChannelVector::new(vals).unwrap();
            let m1 = channel_mask(&v, a1);
            let m2 = channel_mask(&v, a2);
            for k in 0..v.len() {
                if m2.at(k) == 0.0 {
                    prop_assert_eq!(m1.at(k), 0.0);
                }
            }
        }

        /// A strictly positive max always masks at least its own argmax.
        #[test]
        fn prop_mask_nonempty(
            vals in proptest::collection::vec(-2.0f64..4.0, 1..16),
            ratio in 0.05f64..1.0,
        ) {
            prop_assume!(vals.iter().cloned().fold(f64::MIN, f64::max) > 0.0);
            let v = ChannelVector::new(vals).unwrap();
            let m = channel_mask(&v, ratio);
            prop_assert!(m.data().iter().any(|&x| x == 0.0));
        }

        /// Additive application with both coefficients zero shifts each cell
        /// by exactly its own mask value.
        #[test]
        fn prop_zero_coef_forward_is_mask_shift(
            seed in 0u64..500,
            c in 1usize..4,
            h in 2usize..6,
            w in 2usize..6,
        ) {
            let mut r = RngStream::new(seed, StreamKind::DataGen);
            let f = random_map(&mut r, c, h, w);
            let cfg = DfmConfig { delta: 0.0, gamma: 0.0, ..DfmConfig::default() };
            let (out, cache) =
                dfm_forward_forced(&f, &cfg, Branch::Channel, Mode::Train).unwrap();
            let cache = cache.unwrap();
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let want = f.at(k, i, j) + cache.c_m.at(k);
                        prop_assert_eq!(out.at(k, i, j), want);
                    }
                }
            }
        }
    }
}
