//! FLOPs accounting, finite-difference gradient checking and survival
//! overlays.

use std::fmt;
use std::path::PathBuf;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::app::CriterionKind;
use crate::data::{write_pnm, Sample};
use crate::error::{ApvitError, Result};
use crate::model::{
    backward, forward, forward_with, init_params, ApvitConfig, ApvitParams, Diagnostics,
    ForwardOptions, PoolingMode,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::cross_entropy;
use crate::transformer::MLP_RATIO;

// ---------------------------------------------------------------------------
// FLOPs

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageFlops {
    pub name: String,
    /// Tokens (or output positions) the stage processes.
    pub tokens: usize,
    pub flops: u64,
}

/// Multiply-add pairs counted twice. Softmax, normalization, activations
/// and pooling are not counted.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub stages: Vec<StageFlops>,
    pub total: u64,
    pub baseline_total: u64,
    pub ratio: f64,
    /// Encoder blocks only.
    pub transformer: u64,
    pub baseline_transformer: u64,
    pub transformer_ratio: f64,
}

pub fn msa_flops(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    2 * (3 * n * d * d + n * n * d + n * n * d + n * d * d)
}

pub fn mlp_flops(n: usize, d: usize) -> u64 {
    let (n, d) = (n as u64, d as u64);
    2 * (n * d * MLP_RATIO as u64 * d * 2)
}

fn stage_list(config: &ApvitConfig) -> Result<Vec<StageFlops>> {
    config.validate()?;
    let stem = &config.stem;
    let mut stages = Vec::new();
    let mut side = stem.input_side;
    let mut cin = stem.input_channels;
    for (i, &cout) in stem.channels.iter().enumerate() {
        let positions = side * side;
        stages.push(StageFlops {
            name: format!("stem.conv{i}"),
            tokens: positions,
            flops: 2 * (cin * cout * 9 * positions) as u64,
        });
        cin = cout;
        side /= 2;
    }
    let hw = stem.patch_count();
    if config.criterion == CriterionKind::Lanet && config.pooling != PoolingMode::None {
        let hidden = cin / config.lanet_ratio;
        stages.push(StageFlops {
            name: "criterion".into(),
            tokens: hw,
            flops: 2 * (hidden * cin * hw + hidden * hw) as u64,
        });
    }
    let n0 = config.post_app_count();
    let d = config.embed_dim;
    stages.push(StageFlops {
        name: "embedding".into(),
        tokens: n0,
        flops: 2 * (n0 * cin * d) as u64,
    });
    for (i, n) in config.schedule()?.block_input_counts().into_iter().enumerate() {
        stages.push(StageFlops {
            name: format!("block{i}.msa"),
            tokens: n + 1,
            flops: msa_flops(n + 1, d),
        });
        stages.push(StageFlops {
            name: format!("block{i}.mlp"),
            tokens: n + 1,
            flops: mlp_flops(n + 1, d),
        });
    }
    stages.push(StageFlops {
        name: "head".into(),
        tokens: 1,
        flops: 2 * (d * config.num_classes) as u64,
    });
    Ok(stages)
}

fn block_total(stages: &[StageFlops]) -> u64 {
    stages
        .iter()
        .filter(|s| s.name.starts_with("block"))
        .map(|s| s.flops)
        .sum()
}

/// Analytic cost of one forward pass, compared with the same architecture
/// without pooling.
pub fn count_flops(config: &ApvitConfig) -> Result<FlopsReport> {
    let stages = stage_list(config)?;
    let base = stage_list(&config.baseline())?;
    let total = stages.iter().map(|s| s.flops).sum();
    let baseline_total = base.iter().map(|s| s.flops).sum();
    let transformer = block_total(&stages);
    let baseline_transformer = block_total(&base);
    Ok(FlopsReport {
        total,
        baseline_total,
        ratio: total as f64 / baseline_total as f64,
        transformer,
        baseline_transformer,
        transformer_ratio: transformer as f64 / baseline_transformer as f64,
        stages,
    })
}

impl FlopsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8} {:>14}", "stage", "tokens", "flops")?;
        for s in &self.stages {
            writeln!(f, "{:<16} {:>8} {:>14}", s.name, s.tokens, s.flops)?;
        }
        writeln!(f, "{:<16} {:>8} {:>14}", "total", "", self.total)?;
        writeln!(f, "{:<16} {:>8} {:>14}", "baseline", "", self.baseline_total)?;
        writeln!(f, "ratio             {:.3}", self.ratio)?;
        write!(f, "transformer ratio {:.3}", self.transformer_ratio)
    }
}

// ---------------------------------------------------------------------------
// gradient check

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub threshold: f64,
    pub coords_per_group: usize,
    /// Factor applied to the initialized weights before adding noise.
    pub init_scale: f64,
    /// Half-width of the uniform noise added to every parameter.
    pub perturb: f64,
    /// Only check groups whose name starts with this prefix.
    pub only_prefix: Option<String>,
    /// Negate the analytic gradient of this group (negative control).
    pub flip_sign: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            threshold: 1e-4,
            coords_per_group: 5,
            init_scale: 1.0,
            perturb: 0.1,
            only_prefix: None,
            flip_sign: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub coords: usize,
    /// Probes discarded because a step crossed a ReLU or max-pool kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub worst: String,
    pub worst_error: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Image redraws needed to get a tie-free selection.
    pub rejitters: usize,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            let mark = if g.max_rel_error < self.threshold { "ok" } else { "FAIL" };
            writeln!(f, "{:<24} {:>3} {:>3} {:>12.3e} {mark}", g.name, g.coords, g.skipped, g.max_rel_error)?;
        }
        write!(
            f,
            "worst {} {:.3e} (threshold {:.0e}): {}",
            self.worst,
            self.worst_error,
            self.threshold,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub const TIE_MARGIN: f64 = 1e-4;
pub const MAX_REJITTERS: usize = 10;

/// Smallest analytic gradient magnitude a central difference at the default
/// step resolves to well under the threshold in 64-bit arithmetic.
pub const FD_MIN_GRAD: f64 = 1e-5;

/// Candidate coordinates: those with `|grad| >= FD_MIN_GRAD` in random order,
/// then the rest by decreasing magnitude.
fn coord_order(rng: &mut ChaCha8Rng, grad: &[f64]) -> Vec<usize> {
    let (big, mut small): (Vec<usize>, Vec<usize>) =
        (0..grad.len()).partition(|&i| grad[i].abs() >= FD_MIN_GRAD);
    small.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
    sample_indices(rng, big.len(), big.len())
        .into_iter()
        .map(|i| big[i])
        .chain(small)
        .collect()
}

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

fn tie_free(diag: &Diagnostics<f64>) -> bool {
    diag.app_margin
        .iter()
        .chain(diag.atp_margins.iter().flatten())
        .all(|&m| m > TIE_MARGIN)
}

/// Central differences of the cross-entropy loss against the analytic
/// gradient on random parameters and a random image, with every selection
/// held at its forward-pass value.
pub fn grad_check(config: &ApvitConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = init_params::<f64>(config, seed)?;
    let stem = &config.stem;
    let shape = [stem.input_channels, stem.input_side, stem.input_side];
    let label = rng.random_range(0..config.num_classes);

    let mut rejitters = 0;
    let (params, image, pass) = loop {
        let mut params = base.clone();
        params.for_each_mut(|name, t| {
            let scale = if name.ends_with(".gamma") { 1.0 } else { opts.init_scale };
            for v in t.data_mut() {
                *v = *v * scale + rng.random_range(-opts.perturb..=opts.perturb);
            }
        });
        let image = Tensor::from_fn(&shape, |_| rng.random_range(0.0..255.0));
        let pass = forward_with(&image, &params, config, &ForwardOptions::default())?;
        if tie_free(&pass.diagnostics) {
            break (params, image, pass);
        }
        rejitters += 1;
        if rejitters > MAX_REJITTERS {
            return Err(ApvitError::TieDetected(format!(
                "selection margin below {TIE_MARGIN} after {MAX_REJITTERS} redraws"
            )));
        }
    };
    let (_, dlogits) = cross_entropy(&pass.logits, label)?;
    let grads = backward(&pass, &params, config, &dlogits)?;
    let selections = pass.diagnostics.selections.clone();
    let fixed = ForwardOptions {
        forced: Some(&selections),
        pinned_attention: None,
    };
    let base_kinks = pass.kink_pattern(config.criterion);
    // Loss at `p`, or None when `p` sits on another linear piece than the base.
    let loss_at = |p: &ApvitParams<f64>| -> Result<Option<f64>> {
        let out = forward_with(&image, p, config, &fixed)?;
        if out.kink_pattern(config.criterion) != base_kinks {
            return Ok(None);
        }
        Ok(Some(cross_entropy(&out.logits, label)?.0))
    };

    let names: Vec<String> = params
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| opts.only_prefix.as_ref().is_none_or(|p| n.starts_with(p.as_str())))
        .collect();
    if let Some(flip) = &opts.flip_sign {
        if !names.contains(flip) {
            return Err(ApvitError::Config(format!("no parameter group named {flip:?}")));
        }
    }
    let grad_map: Vec<(String, Tensor<f64>)> = grads
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();

    let mut groups = Vec::with_capacity(names.len());
    for name in names {
        let mut analytic = grad_map
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .expect("same layout");
        if opts.flip_sign.as_deref() == Some(name.as_str()) {
            analytic = analytic.scale(-1.0);
        }
        let mut worst: f64 = 0.0;
        let (mut coords, mut skipped) = (0, 0);
        for c in coord_order(&mut rng, analytic.data()) {
            if coords == opts.coords_per_group {
                break;
            }
            let nudge = |p: &mut ApvitParams<f64>, delta: f64| {
                p.for_each_mut(|n, t| {
                    if n == name {
                        t.data_mut()[c] += delta;
                    }
                })
            };
            let mut probe = params.clone();
            nudge(&mut probe, opts.eps);
            let plus = loss_at(&probe)?;
            nudge(&mut probe, -2.0 * opts.eps);
            let minus = loss_at(&probe)?;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                skipped += 1;
                continue;
            };
            let fd = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic.data()[c], fd));
            coords += 1;
        }
        groups.push(GroupError {
            name,
            coords,
            skipped,
            max_rel_error: worst,
        });
    }
    let (worst, worst_error) = groups
        .iter()
        .fold((String::new(), 0.0), |(wn, we), g| {
            if g.max_rel_error > we || wn.is_empty() {
                (g.name.clone(), g.max_rel_error)
            } else {
                (wn, we)
            }
        });
    Ok(GradCheckReport {
        passed: worst_error < opts.threshold,
        threshold: opts.threshold,
        worst,
        worst_error,
        groups,
        rejitters,
    })
}

// ---------------------------------------------------------------------------
// overlays

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlayStage {
    App,
    Block(usize),
}

impl fmt::Display for OverlayStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::App => f.write_str("app"),
            Self::Block(i) => write!(f, "block{i}"),
        }
    }
}

impl std::str::FromStr for OverlayStage {
    type Err = ApvitError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "app" {
            return Ok(Self::App);
        }
        lower
            .strip_prefix("block")
            .and_then(|i| i.parse().ok())
            .map(Self::Block)
            .ok_or_else(|| ApvitError::Config(format!("unknown overlay stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlaySpec {
    pub stage: OverlayStage,
    pub path: PathBuf,
}

/// Original patch positions alive at `stage`.
pub fn surviving_patches<T>(diag: &Diagnostics<T>, stage: OverlayStage) -> Result<&[usize]> {
    match stage {
        OverlayStage::App => Ok(&diag.app_indices),
        OverlayStage::Block(i) => diag.trail.get(i).map(Vec::as_slice).ok_or_else(|| {
            ApvitError::Config(format!("block {i} outside 0..{}", diag.trail.len()))
        }),
    }
}

/// Grey-scale `[1, side, side]` image with every dropped patch cell white.
pub fn overlay_image<T>(
    image: &Tensor<f64>,
    diag: &Diagnostics<T>,
    config: &ApvitConfig,
    stage: OverlayStage,
) -> Result<Tensor<f64>> {
    let stem = &config.stem;
    let (c, side) = (stem.input_channels, stem.input_side);
    if image.shape() != [c, side, side] {
        return Err(ApvitError::Dimension(format!(
            "overlay source {:?} does not match [{c}, {side}, {side}]",
            image.shape()
        )));
    }
    let grid = stem.grid_side();
    let cell = stem.cell_side();
    let mut alive = vec![false; grid * grid];
    for &p in surviving_patches(diag, stage)? {
        alive[p] = true;
    }
    let plane = side * side;
    Ok(Tensor::from_fn(&[1, side, side], |i| {
        let (y, x) = (i / side, i % side);
        if !alive[(y / cell) * grid + x / cell] {
            return 255.0;
        }
        let mean = (0..c).map(|ch| image.data()[ch * plane + i]).sum::<f64>() / c as f64;
        mean.round().clamp(0.0, 255.0)
    }))
}

pub fn render_overlay<T>(
    image: &Tensor<f64>,
    diag: &Diagnostics<T>,
    config: &ApvitConfig,
    spec: &OverlaySpec,
) -> Result<()> {
    write_pnm(&spec.path, &overlay_image(image, diag, config, spec.stage)?)
}

// ---------------------------------------------------------------------------
// occlusion

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OcclusionStats {
    pub dropped_cells: usize,
    pub occluded_drops: usize,
    pub fraction: f64,
}

/// Share of patch cells dropped by patch pooling that touch an occluder.
pub fn occlusion_drop_stats<T: Scalar>(
    params: &ApvitParams<T>,
    config: &ApvitConfig,
    samples: &[Sample],
) -> Result<OcclusionStats> {
    let grid = config.stem.grid_side();
    let cell = config.stem.cell_side();
    let mut dropped_cells = 0;
    let mut occluded_drops = 0;
    for s in samples {
        let (_, diag) = forward(&s.image.cast::<T>(), params, config)?;
        let mut kept = vec![false; grid * grid];
        for &p in &diag.app_indices {
            kept[p] = true;
        }
        for (p, _) in kept.iter().enumerate().filter(|(_, &k)| !k) {
            dropped_cells += 1;
            if s.occluders.iter().any(|r| r.overlaps_cell(p % grid, p / grid, cell)) {
                occluded_drops += 1;
            }
        }
    }
    Ok(OcclusionStats {
        dropped_cells,
        occluded_drops,
        fraction: if dropped_cells == 0 {
            0.0
        } else {
            occluded_drops as f64 / dropped_cells as f64
        },
    })
}
