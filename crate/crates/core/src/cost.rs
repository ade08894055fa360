//! Platform constraints on architectures and the proxy resource figures the
//! search minimizes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nas::{Genome, CHANNEL_CHOICES, KERNEL_CHOICES, STRIDE_CHOICES};
use crate::nn::{architecture_output_shapes, architecture_param_count, LayerShape, MAX_LAYERS};

/// Length and channel count of the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub length: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(length: usize, channels: usize) -> Self {
        Self { length, channels }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub max_params: usize,
    pub max_layers: usize,
    pub max_kernel: usize,
    pub metric_floor: f64,
    pub require_pow2: bool,
    pub require_stride_le_kernel: bool,
    /// Optional compute budget; unset means unlimited.
    #[serde(default)]
    pub max_macs_per_window: Option<u64>,
    /// Optional bound on the largest layer output (length times channels).
    /// Training time grows with activation volume as well as with MACs.
    #[serde(default)]
    pub max_layer_output: Option<usize>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            max_params: 1_000_000,
            max_layers: MAX_LAYERS,
            max_kernel: 32,
            metric_floor: 0.7,
            require_pow2: true,
            require_stride_le_kernel: true,
            max_macs_per_window: None,
            max_layer_output: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Kernel,
    Channels,
    Stride,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Kernel => "kernel",
            Field::Channels => "channels",
            Field::Stride => "stride",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Violation {
    NoLayers,
    TooManyLayers { count: usize, max: usize },
    ZeroDimension { layer: usize, field: Field },
    NotPowerOfTwo { layer: usize, field: Field, value: usize },
    OutOfSearchSpace { layer: usize, field: Field, value: usize },
    StrideExceedsKernel { layer: usize, stride: usize, kernel: usize },
    KernelTooLarge { layer: usize, kernel: usize, max: usize },
    TooManyParams { params: usize, max: usize },
    ShapeInfeasible { layer: usize, length: usize, kernel: usize },
    MacBudgetExceeded { macs: u64, max: u64 },
    OutputBudgetExceeded { elements: usize, max: usize },
}

impl Violation {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Violation::NoLayers => "no_layers",
            Violation::TooManyLayers { .. } => "too_many_layers",
            Violation::ZeroDimension { .. } => "zero_dimension",
            Violation::NotPowerOfTwo { .. } => "not_power_of_two",
            Violation::OutOfSearchSpace { .. } => "out_of_search_space",
            Violation::StrideExceedsKernel { .. } => "stride_exceeds_kernel",
            Violation::KernelTooLarge { .. } => "kernel_too_large",
            Violation::TooManyParams { .. } => "too_many_params",
            Violation::ShapeInfeasible { .. } => "shape_infeasible",
            Violation::MacBudgetExceeded { .. } => "mac_budget_exceeded",
            Violation::OutputBudgetExceeded { .. } => "output_budget_exceeded",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoLayers => write!(f, "no layers"),
            Violation::TooManyLayers { count, max } => write!(f, "{count} layers exceed the limit of {max}"),
            Violation::ZeroDimension { layer, field } => write!(f, "layer {layer}: {field} is zero"),
            Violation::NotPowerOfTwo { layer, field, value } => {
                write!(f, "layer {layer}: {field} {value} is not a power of two")
            }
            Violation::OutOfSearchSpace { layer, field, value } => {
                write!(f, "layer {layer}: {field} {value} is outside the search space")
            }
            Violation::StrideExceedsKernel { layer, stride, kernel } => {
                write!(f, "layer {layer}: stride {stride} exceeds kernel {kernel}")
            }
            Violation::KernelTooLarge { layer, kernel, max } => {
                write!(f, "layer {layer}: kernel {kernel} exceeds the limit of {max}")
            }
            Violation::TooManyParams { params, max } => write!(f, "{params} parameters exceed the limit of {max}"),
            Violation::ShapeInfeasible { layer, length, kernel } => {
                write!(f, "layer {layer}: input length {length} is shorter than kernel {kernel}")
            }
            Violation::MacBudgetExceeded { macs, max } => write!(f, "{macs} MACs per window exceed the budget of {max}"),
            Violation::OutputBudgetExceeded { elements, max } => {
                write!(f, "a layer output of {elements} elements exceeds the budget of {max}")
            }
        }
    }
}

type Check = fn(&Genome, &ConstraintConfig, InputShape, &mut Vec<Violation>);

fn fields(l: &LayerShape) -> [(Field, usize, &'static [usize]); 3] {
    [
        (Field::Kernel, l.kernel, &KERNEL_CHOICES),
        (Field::Channels, l.channels, &CHANNEL_CHOICES),
        (Field::Stride, l.stride, &STRIDE_CHOICES),
    ]
}

fn has_zero(g: &Genome) -> bool {
    g.layers.iter().any(|l| l.kernel == 0 || l.channels == 0 || l.stride == 0)
}

fn check_layer_count(g: &Genome, cfg: &ConstraintConfig, _: InputShape, out: &mut Vec<Violation>) {
    if g.layers.is_empty() {
        out.push(Violation::NoLayers);
    } else if g.layers.len() > cfg.max_layers {
        out.push(Violation::TooManyLayers { count: g.layers.len(), max: cfg.max_layers });
    }
}

fn check_dimensions(g: &Genome, cfg: &ConstraintConfig, _: InputShape, out: &mut Vec<Violation>) {
    for (i, l) in g.layers.iter().enumerate() {
        for (field, value, allowed) in fields(l) {
            if value == 0 {
                out.push(Violation::ZeroDimension { layer: i, field });
            } else if cfg.require_pow2 && !value.is_power_of_two() {
                out.push(Violation::NotPowerOfTwo { layer: i, field, value });
            } else if cfg.require_pow2 && !allowed.contains(&value) {
                out.push(Violation::OutOfSearchSpace { layer: i, field, value });
            }
        }
    }
}

fn check_stride(g: &Genome, cfg: &ConstraintConfig, _: InputShape, out: &mut Vec<Violation>) {
    if !cfg.require_stride_le_kernel {
        return;
    }
    for (i, l) in g.layers.iter().enumerate() {
        if l.stride > l.kernel {
            out.push(Violation::StrideExceedsKernel { layer: i, stride: l.stride, kernel: l.kernel });
        }
    }
}

fn check_kernel_limit(g: &Genome, cfg: &ConstraintConfig, _: InputShape, out: &mut Vec<Violation>) {
    for (i, l) in g.layers.iter().enumerate() {
        if l.kernel > cfg.max_kernel {
            out.push(Violation::KernelTooLarge { layer: i, kernel: l.kernel, max: cfg.max_kernel });
        }
    }
}

fn check_params(g: &Genome, cfg: &ConstraintConfig, input: InputShape, out: &mut Vec<Violation>) {
    if g.layers.is_empty() {
        return;
    }
    let params = architecture_param_count(input.channels, &g.layers);
    if params > cfg.max_params {
        out.push(Violation::TooManyParams { params, max: cfg.max_params });
    }
}

fn check_shapes(g: &Genome, _: &ConstraintConfig, input: InputShape, out: &mut Vec<Violation>) {
    if has_zero(g) {
        return;
    }
    if let Err((layer, length)) = architecture_output_shapes(input.length, &g.layers) {
        out.push(Violation::ShapeInfeasible { layer, length, kernel: g.layers[layer].kernel });
    }
}

fn check_budget(g: &Genome, cfg: &ConstraintConfig, input: InputShape, out: &mut Vec<Violation>) {
    if has_zero(g) || g.layers.is_empty() {
        return;
    }
    if let Some(max) = cfg.max_macs_per_window {
        let macs = proxy_macs(&g.layers, input);
        if macs > max {
            out.push(Violation::MacBudgetExceeded { macs, max });
        }
    }
    if let Some(max) = cfg.max_layer_output {
        // Infeasible shapes are reported by check_shapes.
        if let Ok(shapes) = architecture_output_shapes(input.length, &g.layers) {
            let elements = shapes.iter().map(|(h, c)| h * c).max().unwrap_or(0);
            if elements > max {
                out.push(Violation::OutputBudgetExceeded { elements, max });
            }
        }
    }
}

/// Every check the validator runs; each is independent of the others.
pub const CHECKS: [Check; 7] =
    [check_layer_count, check_dimensions, check_stride, check_kernel_limit, check_params, check_shapes, check_budget];

/// Runs the checks in the given order and returns every violation, sorted.
pub fn validate_in_order(g: &Genome, cfg: &ConstraintConfig, input: InputShape, order: &[usize]) -> Vec<Violation> {
    let mut out = Vec::new();
    for &i in order {
        CHECKS[i](g, cfg, input, &mut out);
    }
    out.sort();
    out
}

/// Checks a genome against the platform constraints.
pub fn validate(g: &Genome, cfg: &ConstraintConfig, input: InputShape) -> Result<(), Vec<Violation>> {
    let v = validate_in_order(g, cfg, input, &[0, 1, 2, 3, 4, 5, 6]);
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Multiply-accumulates of the convolution stages, counting `H/S` output
/// positions per layer: `Σ (H_i/S_i)·C_in,i·(K_i + C_out,i)`.
pub fn proxy_macs(layers: &[LayerShape], input: InputShape) -> u64 {
    let mut h = input.length;
    let mut c_in = input.channels;
    let mut total = 0u64;
    for l in layers {
        h /= l.stride;
        total += (h * c_in * (l.kernel + l.channels)) as u64;
        c_in = l.channels;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: usize,
    pub weight_bytes: usize,
    pub macs_per_window: u64,
    pub max_layer_output: usize,
    pub activation_bytes: usize,
    pub linebuffer_bytes: usize,
    pub total_bits: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid genome: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

fn bytes_per(bits: u32) -> usize {
    bits.div_ceil(8) as usize
}

/// Proxy resource figures of a structurally sound genome.
pub fn report(g: &Genome, input: InputShape) -> Result<CostReport, CostError> {
    let mut v = Vec::new();
    let structural = ConstraintConfig {
        max_params: usize::MAX,
        max_layers: usize::MAX,
        max_kernel: usize::MAX,
        require_pow2: false,
        require_stride_le_kernel: false,
        max_macs_per_window: None,
        max_layer_output: None,
        ..ConstraintConfig::default()
    };
    for c in CHECKS {
        c(g, &structural, input, &mut v);
    }
    if !v.is_empty() {
        return Err(CostError::Invalid(v));
    }
    let shapes = architecture_output_shapes(input.length, &g.layers).expect("checked above");
    let params = architecture_param_count(input.channels, &g.layers);
    let ww = g.quant.weights.width_bits;
    let wa = g.quant.activations.width_bits;
    let act = bytes_per(wa);
    let mut outputs = vec![input.length * input.channels * act];
    outputs.extend(shapes.iter().map(|(h, c)| h * c * act));
    let mut c_in = input.channels;
    let mut linebuffer = 0;
    for l in &g.layers {
        linebuffer += l.kernel * c_in * act;
        c_in = l.channels;
    }
    Ok(CostReport {
        params,
        weight_bytes: (params * ww as usize).div_ceil(8),
        macs_per_window: proxy_macs(&g.layers, input),
        max_layer_output: shapes.iter().map(|(h, c)| h * c).max().unwrap_or(0),
        activation_bytes: outputs.windows(2).map(|p| p[0] + p[1]).max().unwrap_or(0),
        linebuffer_bytes: linebuffer,
        total_bits: ww + wa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::QuantPair;
    use proptest::prelude::*;

    fn genome(layers: &[(usize, usize, usize)]) -> Genome {
        Genome {
            layers: layers.iter().map(|&(k, c, s)| LayerShape::new(k, c, s)).collect(),
            quant: QuantPair::new(crate::fxp::FxpFormat::new(16, 8).unwrap(), crate::fxp::FxpFormat::new(16, 8).unwrap()),
        }
    }

    const DESK: InputShape = InputShape { length: 3840, channels: 2 };

    fn codes(g: &Genome, cfg: &ConstraintConfig, input: InputShape) -> Vec<&'static str> {
        validate(g, cfg, input).err().unwrap_or_default().iter().map(|v| v.code()).collect()
    }

    #[test]
    fn validator_examples() {
        let cfg = ConstraintConfig::default();
        assert_eq!(codes(&genome(&[(4, 16, 8)]), &cfg, DESK), ["stride_exceeds_kernel"]);
        assert_eq!(codes(&genome(&[(24, 16, 1)]), &cfg, DESK), ["not_power_of_two"]);
        assert!(validate(&genome(&[(16, 16, 8), (8, 32, 4)]), &cfg, DESK).is_ok());
        assert_eq!(codes(&genome(&[]), &cfg, DESK), ["no_layers"]);
        assert_eq!(codes(&genome(&[(4, 4, 1); 6]), &cfg, DESK), ["too_many_layers"]);
        assert_eq!(codes(&genome(&[(64, 4, 1)]), &cfg, DESK), ["kernel_too_large"]);
        assert_eq!(codes(&genome(&[(1, 1024, 1), (1, 1024, 1)]), &cfg, DESK), ["too_many_params"]);
        assert_eq!(codes(&genome(&[(32, 4, 32), (32, 4, 32), (32, 4, 1)]), &cfg, DESK), ["shape_infeasible"]);
        assert_eq!(codes(&genome(&[(4, 2, 1)]), &cfg, DESK), ["out_of_search_space"]);
        let budget = ConstraintConfig { max_macs_per_window: Some(1000), ..cfg.clone() };
        assert_eq!(codes(&genome(&[(4, 4, 1)]), &budget, DESK), ["mac_budget_exceeded"]);
        let budget = ConstraintConfig { max_layer_output: Some(3837 * 4 - 1), ..cfg.clone() };
        assert_eq!(codes(&genome(&[(4, 4, 1)]), &budget, DESK), ["output_budget_exceeded"]);
        assert!(validate(&genome(&[(4, 4, 2)]), &budget, DESK).is_ok());
        // all violations are reported together
        let many = codes(&genome(&[(24, 16, 32), (64, 12, 1)]), &cfg, DESK);
        assert!(many.contains(&"not_power_of_two") && many.contains(&"stride_exceeds_kernel"));
        assert!(many.contains(&"kernel_too_large"));
    }

    #[test]
    fn report_examples() {
        let shapes = [(1, 4, 1), (2, 8, 1), (4, 256, 1), (2, 16, 1)];
        let r = report(&genome(&shapes), InputShape::new(3840, 3)).unwrap();
        assert_eq!(r.params, 7328);
        assert_eq!(r.weight_bytes, 14_656);
        let r = report(&genome(&[(16, 32, 1)]), InputShape::new(1024, 8)).unwrap();
        assert_eq!(r.macs_per_window, 393_216);
        assert_eq!(r.total_bits, 32);
        assert_eq!(r.linebuffer_bytes, 16 * 8 * 2);
        assert_eq!(r.max_layer_output, 1009 * 32);
        assert_eq!(r.activation_bytes, (1024 * 8 + 1009 * 32) * 2);
        assert!(matches!(report(&genome(&[]), DESK), Err(CostError::Invalid(_))));
    }

    fn arb_genome() -> impl Strategy<Value = Genome> {
        let layer = (0usize..9, 0usize..9, 0usize..7)
            .prop_map(|(k, c, s)| LayerShape::new(1 << k, 4 << c, 1 << s.min(k)));
        prop::collection::vec(layer, 1..=5).prop_map(|layers| Genome { layers, quant: QuantPair::generous() })
    }

    proptest! {
        #[test]
        fn cost_monotone(g in arb_genome(), which in 0usize..5, field in 0usize..3) {
            let input = InputShape::new(1 << 20, 2);
            let base = report(&g, input);
            prop_assume!(base.is_ok());
            let base = base.unwrap();
            let mut bigger = g.clone();
            let i = which % g.layers.len();
            match field {
                0 => bigger.layers[i].kernel *= 2,
                1 => bigger.layers[i].channels *= 2,
                _ => bigger.layers.push(LayerShape::new(1, 4, 1)),
            }
            let r = report(&bigger, input);
            prop_assume!(r.is_ok());
            let r = r.unwrap();
            prop_assert!(r.params >= base.params);
            prop_assert!(r.macs_per_window >= base.macs_per_window);
        }

        #[test]
        fn violation_set_independent_of_order(g in arb_genome(), perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle(), len in 1usize..5000) {
            let cfg = ConstraintConfig { max_macs_per_window: Some(2_000_000), max_layer_output: Some(50_000), ..ConstraintConfig::default() };
            let input = InputShape::new(len, 2);
            prop_assert_eq!(validate_in_order(&g, &cfg, input, &perm), validate_in_order(&g, &cfg, input, &[0, 1, 2, 3, 4, 5, 6]));
        }
    }
}
