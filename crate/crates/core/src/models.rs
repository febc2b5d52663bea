//! Canonical 1D and 2D classifiers.
//!
//! Both stacks read as fourteen entries when the input, head, argmax and
//! output are counted as layers and a pool absorbs the dropout and flatten
//! that follow it:
//!
//! ```text
//!  1 input            6 relu                       11 dense(T)
//!  2 conv(16, k7)     7 maxpool [+dropout] +flatten 12 head
//!  3 relu             8 dense(64)  <- features     13 argmax
//!  4 maxpool [+drop]  9 relu                       14 output
//!  5 conv(32, k5)    10 dropout(0.5)
//! ```

use std::fmt;
use std::str::FromStr;

use crate::config::Section;
use crate::error::{invalid, Error, Result};
use crate::nn::{Head, LayerSpec, Network, Shape};

/// Rows of every 2D sample.
pub const WINDOW_ROWS: usize = crate::framing::WINDOW_BINS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Dropout after each pool, Huber-SVM head.
    OccupancySvm,
    /// No post-pool dropout, softmax head.
    SizeSoftmax,
}

impl Variant {
    pub fn head(self) -> Head {
        match self {
            Variant::OccupancySvm => Head::SvmLinear,
            Variant::SizeSoftmax => Head::Softmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    OneD,
    TwoD,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::OneD => "1d",
            Arch::TwoD => "2d",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1d" => Ok(Arch::OneD),
            "2d" => Ok(Arch::TwoD),
            _ => Err(invalid(format!("unknown architecture {s:?}; expected 1d or 2d"))),
        }
    }
}

/// Sizes of the canonical stacks; `Default` is the canonical choice.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub channels: (usize, usize),
    pub kernels: (usize, usize),
    pub stride: usize,
    pub pool: usize,
    pub feature_units: usize,
    pub pool_dropout: f64,
    pub tail_dropout: f64,
    /// Replaces the canonical body entirely; the last entry must be
    /// `dense(T)`.
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            channels: (16, 32),
            kernels: (7, 5),
            stride: 2,
            pool: 2,
            feature_units: 64,
            pool_dropout: 0.3,
            tail_dropout: 0.5,
            layers: None,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "arch",
    "channels",
    "kernels",
    "stride",
    "pool",
    "feature_units",
    "pool_dropout",
    "tail_dropout",
    "layers",
];

fn pair(s: &str) -> Result<(usize, usize)> {
    let bad = || invalid(format!("expected a pair like 16,32, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

impl ModelOptions {
    /// Reads the keys of a `[model]` section over the defaults.
    pub fn from_section(section: &Section) -> Result<Self> {
        section.check_keys(MODEL_KEYS)?;
        let mut o = ModelOptions::default();
        let located = |key: &str, e: Error| match section.get(key) {
            Some(entry) => Error::Config {
                line: entry.line,
                msg: format!("{key}: {e}"),
            },
            None => e,
        };
        if let Some(e) = section.get("channels") {
            o.channels = pair(&e.value).map_err(|err| located("channels", err))?;
        }
        if let Some(e) = section.get("kernels") {
            o.kernels = pair(&e.value).map_err(|err| located("kernels", err))?;
        }
        if let Some(v) = section.parse("stride")? {
            o.stride = v;
        }
        if let Some(v) = section.parse("pool")? {
            o.pool = v;
        }
        if let Some(v) = section.parse("feature_units")? {
            o.feature_units = v;
        }
        if let Some(v) = section.parse("pool_dropout")? {
            o.pool_dropout = v;
        }
        if let Some(v) = section.parse("tail_dropout")? {
            o.tail_dropout = v;
        }
        if let Some(e) = section.get("layers") {
            o.layers = Some(parse_layer_list(&e.value).map_err(|err| located("layers", err))?);
        }
        Ok(o)
    }
}

/// Comma-separated layer list, e.g. `conv1d(16,7,2), relu, dense(2)`.
/// Commas inside parentheses belong to the layer.
pub fn parse_layer_list(text: &str) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let bytes = text.as_bytes();
    for i in 0..=bytes.len() {
        let c = bytes.get(i).copied();
        match c {
            Some(b'(') => depth += 1,
            Some(b')') => depth -= 1,
            Some(b',') | None if depth == 0 => {
                let item = text[start..i].trim();
                if !item.is_empty() {
                    out.push(item.parse()?);
                }
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 {
            return Err(invalid(format!("unbalanced parentheses in layer list {text:?}")));
        }
    }
    if depth != 0 {
        return Err(invalid(format!("unbalanced parentheses in layer list {text:?}")));
    }
    if out.is_empty() {
        return Err(invalid("empty layer list"));
    }
    Ok(out)
}

pub fn format_layer_list(specs: &[LayerSpec]) -> String {
    specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
}

fn layers_1d(t: usize, variant: Variant, o: &ModelOptions) -> Vec<LayerSpec> {
    let mut v = Vec::new();
    for (ch, k) in [(o.channels.0, o.kernels.0), (o.channels.1, o.kernels.1)] {
        v.push(LayerSpec::Conv1D {
            out_channels: ch,
            kernel: k,
            stride: o.stride,
        });
        v.push(LayerSpec::ReLU);
        v.push(LayerSpec::MaxPool1D { width: o.pool });
        if variant == Variant::OccupancySvm {
            v.push(LayerSpec::Dropout { rate: o.pool_dropout });
        }
    }
    tail(&mut v, t, o);
    v
}

fn layers_2d(t: usize, o: &ModelOptions) -> Vec<LayerSpec> {
    let mut v = Vec::new();
    for (ch, k) in [(o.channels.0, o.kernels.0), (o.channels.1, o.kernels.1)] {
        v.push(LayerSpec::Conv2D {
            out_channels: ch,
            kernel: (3, k),
            stride: (1, o.stride),
        });
        v.push(LayerSpec::ReLU);
        v.push(LayerSpec::MaxPool2D { size: (1, o.pool) });
        v.push(LayerSpec::Dropout { rate: o.pool_dropout });
    }
    tail(&mut v, t, o);
    v
}

fn tail(v: &mut Vec<LayerSpec>, t: usize, o: &ModelOptions) {
    v.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense {
            out_units: o.feature_units,
        },
        LayerSpec::ReLU,
        LayerSpec::Dropout { rate: o.tail_dropout },
        LayerSpec::Dense { out_units: t },
    ]);
}

/// Smallest input width (up to 1 << 20) for which `specs` chain, or `None`.
fn minimum_width(rows: usize, specs: &[LayerSpec]) -> Option<usize> {
    let fits = |w: usize| Network::with_zero_params(Shape::new(1, rows, w), specs, Head::Softmax).is_ok();
    let mut hi = 1usize;
    while !fits(hi) {
        hi *= 2;
        if hi > 1 << 20 {
            return None;
        }
    }
    // Every stage is monotone in width, so bisect.
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

fn assemble(rows: usize, width: usize, specs: &[LayerSpec], head: Head, seed: u64) -> Result<Network> {
    if width == 0 || rows == 0 {
        return Err(Error::Shape {
            layer: 0,
            msg: "input length must be positive".into(),
        });
    }
    let input = Shape::new(1, rows, width);
    Network::new(input, specs, head, seed).map_err(|e| match (e, minimum_width(rows, specs)) {
        (Error::Shape { .. }, Some(min)) if width < min => Error::Shape {
            layer: 0,
            msg: format!("input length {width} is below the minimum {min} for this architecture"),
        },
        (e, _) => e,
    })
}

pub fn build_1d(input_len: usize, num_classes: usize, variant: Variant, seed: u64) -> Result<Network> {
    build_1d_with(input_len, num_classes, variant, &ModelOptions::default(), seed)
}

pub fn build_1d_with(
    input_len: usize,
    num_classes: usize,
    variant: Variant,
    options: &ModelOptions,
    seed: u64,
) -> Result<Network> {
    let specs = match &options.layers {
        Some(l) => l.clone(),
        None => layers_1d(num_classes, variant, options),
    };
    finish(assemble(1, input_len, &specs, variant.head(), seed)?, num_classes)
}

/// `input_len` is the per-row length; every sample has `WINDOW_ROWS` rows.
pub fn build_2d(input_len: usize, num_classes: usize, variant: Variant, seed: u64) -> Result<Network> {
    build_2d_with(input_len, num_classes, variant, &ModelOptions::default(), seed)
}

pub fn build_2d_with(
    input_len: usize,
    num_classes: usize,
    variant: Variant,
    options: &ModelOptions,
    seed: u64,
) -> Result<Network> {
    let specs = match &options.layers {
        Some(l) => l.clone(),
        None => layers_2d(num_classes, options),
    };
    finish(assemble(WINDOW_ROWS, input_len, &specs, variant.head(), seed)?, num_classes)
}

pub fn build(
    arch: Arch,
    input_len: usize,
    num_classes: usize,
    variant: Variant,
    options: &ModelOptions,
    seed: u64,
) -> Result<Network> {
    match arch {
        Arch::OneD => build_1d_with(input_len, num_classes, variant, options, seed),
        Arch::TwoD => build_2d_with(input_len, num_classes, variant, options, seed),
    }
}

fn finish(net: Network, num_classes: usize) -> Result<Network> {
    if net.num_classes() != num_classes {
        return Err(Error::ClassCountMismatch {
            net: net.num_classes(),
            task: num_classes,
        });
    }
    Ok(net)
}

/// One entry of the fourteen-entry reading of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackEntry {
    pub name: String,
    /// Indices into `Network::layers` covered by this entry.
    pub layers: Vec<usize>,
}

/// Groups a network's layers into the counted entries described at the
/// top of this module.
pub fn stack_entries(net: &Network) -> Vec<StackEntry> {
    let mut out = vec![StackEntry {
        name: format!("input {}", net.input_shape()),
        layers: Vec::new(),
    }];
    let mut after_pool = false;
    for (i, layer) in net.layers().iter().enumerate() {
        let spec = layer.spec();
        let absorbed = after_pool && matches!(spec, LayerSpec::Dropout { .. } | LayerSpec::Flatten);
        if absorbed {
            let last = out.last_mut().unwrap();
            last.name.push_str(&format!(" + {spec}"));
            last.layers.push(i);
            continue;
        }
        after_pool = matches!(spec, LayerSpec::MaxPool1D { .. } | LayerSpec::MaxPool2D { .. });
        out.push(StackEntry {
            name: spec.to_string(),
            layers: vec![i],
        });
    }
    for name in [net.head().to_string(), "argmax".into(), "output".into()] {
        out.push(StackEntry {
            name,
            layers: Vec::new(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(net: &Network) -> Vec<LayerSpec> {
        net.layers().iter().map(|l| *l.spec()).collect()
    }

    #[test]
    fn canonical_1d_has_fourteen_entries_and_eighth_is_features() {
        for variant in [Variant::OccupancySvm, Variant::SizeSoftmax] {
            let net = build_1d(1687, 2, variant, 0).unwrap();
            let entries = stack_entries(&net);
            assert_eq!(entries.len(), 14, "{entries:?}");
            let eighth = &entries[7];
            assert_eq!(eighth.name, "dense(64)");
            assert_eq!(net.feature_layer(), Some(eighth.layers[0]));
            assert_eq!(net.layers()[eighth.layers[0]].output_shape().len(), 64);
            assert_eq!(entries[11].name, variant.head().to_string());
        }
    }

    #[test]
    fn variants_differ_only_in_post_pool_dropout_and_head() {
        let occ = build_1d(800, 2, Variant::OccupancySvm, 0).unwrap();
        let size = build_1d(800, 2, Variant::SizeSoftmax, 0).unwrap();
        let mut stripped = specs(&occ);
        let mut i = 0;
        while i < stripped.len() {
            let after_pool = i > 0 && matches!(stripped[i - 1], LayerSpec::MaxPool1D { .. });
            if after_pool && stripped[i] == (LayerSpec::Dropout { rate: 0.3 }) {
                stripped.remove(i);
            } else {
                i += 1;
            }
        }
        assert_eq!(stripped, specs(&size));
        assert_eq!(occ.head(), Head::SvmLinear);
        assert_eq!(size.head(), Head::Softmax);
    }

    #[test]
    fn heads_output_one_score_per_class() {
        let net = build_1d(600, 5, Variant::OccupancySvm, 3).unwrap();
        let x: Vec<f64> = (0..600).map(|i| (i as f64 * 0.1).sin()).collect();
        assert_eq!(net.predict(&x).unwrap().scores.len(), 5);
        let net = build_1d(600, 2, Variant::SizeSoftmax, 3).unwrap();
        let s: f64 = net.predict(&x).unwrap().scores.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_d_keeps_bin_stride_one_and_shrinks_bins_six_four_two() {
        let net = build_2d(1687, 2, Variant::OccupancySvm, 0).unwrap();
        let convs: Vec<_> = net
            .layers()
            .iter()
            .filter(|l| matches!(l.spec(), LayerSpec::Conv2D { .. }))
            .collect();
        assert_eq!(convs.len(), 2);
        let rows: Vec<usize> = std::iter::once(convs[0].input_shape().h)
            .chain(convs.iter().map(|l| l.output_shape().h))
            .collect();
        assert_eq!(rows, vec![6, 4, 2]);
        for l in &convs {
            let LayerSpec::Conv2D { stride, .. } = *l.spec() else { unreachable!() };
            assert_eq!(stride.0, 1);
        }
        assert_eq!(stack_entries(&net)[7].name, "dense(64)");
        assert_eq!(net.layers()[net.feature_layer().unwrap()].output_shape().len(), 64);
    }

    #[test]
    fn two_d_has_more_parameters() {
        for len in [300, 1687, 3697] {
            let a = build_1d(len, 2, Variant::OccupancySvm, 0).unwrap().parameter_count();
            let b = build_2d(len, 2, Variant::OccupancySvm, 0).unwrap().parameter_count();
            assert!(b > a, "{len}: {b} <= {a}");
        }
    }

    #[test]
    fn short_input_names_the_minimum() {
        let min = minimum_width(1, &layers_1d(2, Variant::SizeSoftmax, &ModelOptions::default())).unwrap();
        assert!(build_1d(min, 2, Variant::SizeSoftmax, 0).is_ok());
        let err = build_1d(min - 1, 2, Variant::SizeSoftmax, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(err.to_string().contains(&format!("minimum {min}")), "{err}");
        assert!(build_2d(10, 2, Variant::OccupancySvm, 0).unwrap_err().to_string().contains("minimum"));
    }

    #[test]
    fn layer_list_round_trips_through_text() {
        let net = build_2d(900, 5, Variant::OccupancySvm, 0).unwrap();
        let text = format_layer_list(&specs(&net));
        assert_eq!(parse_layer_list(&text).unwrap(), specs(&net));
        assert!(parse_layer_list("conv1d(2,3,1), relu)").is_err());
        assert!(parse_layer_list(" ").is_err());
    }

    #[test]
    fn custom_layers_must_end_in_the_class_count() {
        let o = ModelOptions {
            layers: Some(parse_layer_list("conv1d(4,3,1), relu, flatten, dense(8), dense(3)").unwrap()),
            ..Default::default()
        };
        assert!(build_1d_with(50, 3, Variant::SizeSoftmax, &o, 0).is_ok());
        assert!(matches!(
            build_1d_with(50, 2, Variant::SizeSoftmax, &o, 0),
            Err(Error::ClassCountMismatch { .. })
        ));
    }

    #[test]
    fn options_read_from_a_model_section() {
        let cfg = crate::config::Config::parse(
            "[model]\nchannels = 8, 12\npool_dropout = 0.2\nlayers = flatten, dense(2)\n",
        )
        .unwrap();
        let o = ModelOptions::from_section(cfg.section("model").unwrap()).unwrap();
        assert_eq!(o.channels, (8, 12));
        assert_eq!(o.pool_dropout, 0.2);
        assert_eq!(o.layers.unwrap().len(), 2);
        let bad = crate::config::Config::parse("[model]\nchanels = 1,2\n").unwrap();
        assert!(ModelOptions::from_section(bad.section("model").unwrap()).is_err());
    }
}
