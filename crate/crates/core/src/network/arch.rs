use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    /// `k × k` kernels, stride 1, no padding.
    Conv { kernel: usize },
    /// 2×2 max pooling with stride 2.
    Pool,
    Fc,
}

impl LayerKind {
    /// Parses a dash-separated kind list such as `i-c5-p-c5-p-f-f`.
    pub fn parse_list(s: &str) -> Result<Vec<LayerKind>> {
        s.split('-')
            .enumerate()
            .map(|(i, tok)| {
                let tok = tok.trim();
                match tok {
                    "i" => Ok(LayerKind::Input),
                    "p" => Ok(LayerKind::Pool),
                    "f" => Ok(LayerKind::Fc),
                    t if t.starts_with('c') => t[1..]
                        .parse::<usize>()
                        .ok()
                        .filter(|&k| k >= 1)
                        .map(|kernel| LayerKind::Conv { kernel })
                        .ok_or_else(|| Error::ArchParse {
                            position: i + 1,
                            message: format!("bad conv kernel in {tok:?}"),
                        }),
                    _ => Err(Error::ArchParse {
                        position: i + 1,
                        message: format!("unknown layer kind {tok:?}"),
                    }),
                }
            })
            .collect()
    }

    fn token(&self) -> String {
        match self {
            LayerKind::Input => "i".into(),
            LayerKind::Conv { kernel } => format!("c{kernel}"),
            LayerKind::Pool => "p".into(),
            LayerKind::Fc => "f".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_maps: usize,
    pub out_maps: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub activation: Activation,
}

impl LayerSpec {
    /// Inputs seen by one output unit of a fully-connected layer.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Fc => self.in_maps * self.in_h * self.in_w,
            LayerKind::Conv { kernel } => self.in_maps * kernel * kernel,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv { kernel } => self.out_maps * self.in_maps * kernel * kernel + self.out_maps,
            LayerKind::Fc => self.out_maps * self.fan_in() + self.out_maps,
            _ => 0,
        }
    }
}

/// Layer sequence described by a feature-map-count string, e.g.
/// `1-20-20-50-50-500-10`, plus one kind per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    source: String,
    kinds: Vec<LayerKind>,
    input_size: usize,
    layers: Vec<LayerSpec>,
}

impl Arch {
    pub fn parse(s: &str, kinds: &[LayerKind], input_size: usize) -> Result<Arch> {
        let counts = s
            .split('-')
            .enumerate()
            .map(|(i, tok)| {
                tok.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                    Error::ArchParse {
                        position: i + 1,
                        message: format!("expected a positive integer, found {tok:?}"),
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_counts(&counts, kinds, input_size)
    }

    pub fn from_counts(counts: &[usize], kinds: &[LayerKind], input_size: usize) -> Result<Arch> {
        let err = |position: usize, message: String| Error::ArchParse { position, message };
        if counts.len() != kinds.len() {
            return Err(err(
                counts.len().min(kinds.len()) + 1,
                format!("{} counts but {} layer kinds", counts.len(), kinds.len()),
            ));
        }
        if counts.len() < 2 {
            return Err(err(1, "need at least an input and an output layer".into()));
        }
        if kinds[0] != LayerKind::Input {
            return Err(err(1, "first layer must be the input".into()));
        }
        if *kinds.last().unwrap() != LayerKind::Fc {
            return Err(err(kinds.len(), "last layer must be fully connected".into()));
        }
        let mut layers = vec![LayerSpec {
            kind: LayerKind::Input,
            in_maps: counts[0],
            out_maps: counts[0],
            in_h: input_size,
            in_w: input_size,
            out_h: input_size,
            out_w: input_size,
            activation: Activation::None,
        }];
        for (i, (&kind, &maps)) in kinds.iter().zip(counts).enumerate().skip(1) {
            let prev = layers.last().unwrap();
            let (in_maps, in_h, in_w) = (prev.out_maps, prev.out_h, prev.out_w);
            let last = i + 1 == kinds.len();
            let spec = match kind {
                LayerKind::Input => return Err(err(i + 1, "input layer must come first".into())),
                LayerKind::Conv { kernel } => {
                    if prev.kind == LayerKind::Fc {
                        return Err(err(i + 1, "convolution after a fully connected layer".into()));
                    }
                    if kernel > in_h || kernel > in_w {
                        return Err(err(
                            i + 1,
                            format!("{kernel}x{kernel} kernel on {in_h}x{in_w} maps"),
                        ));
                    }
                    LayerSpec {
                        kind,
                        in_maps,
                        out_maps: maps,
                        in_h,
                        in_w,
                        out_h: in_h - kernel + 1,
                        out_w: in_w - kernel + 1,
                        activation: Activation::Relu,
                    }
                }
                LayerKind::Pool => {
                    if maps != in_maps {
                        return Err(err(
                            i + 1,
                            format!("pooling changes map count from {in_maps} to {maps}"),
                        ));
                    }
                    if prev.kind == LayerKind::Fc || in_h < 2 || in_w < 2 {
                        return Err(err(i + 1, format!("cannot pool {in_h}x{in_w} maps")));
                    }
                    LayerSpec {
                        kind,
                        in_maps,
                        out_maps: maps,
                        in_h,
                        in_w,
                        out_h: in_h / 2,
                        out_w: in_w / 2,
                        activation: Activation::None,
                    }
                }
                LayerKind::Fc => LayerSpec {
                    kind,
                    in_maps,
                    out_maps: maps,
                    in_h,
                    in_w,
                    out_h: 1,
                    out_w: 1,
                    activation: if last { Activation::Softmax } else { Activation::Relu },
                },
            };
            layers.push(spec);
        }
        let source = counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-");
        Ok(Arch { source, kinds: kinds.to_vec(), input_size, layers })
    }

    /// Inverse of [`Arch::descriptor`].
    pub fn from_descriptor(d: &str) -> Result<Arch> {
        let bad = || Error::Format {
            what: "arch descriptor".into(),
            message: format!("expected COUNTS@SIZE:KINDS, got {d:?}"),
        };
        let (counts, rest) = d.split_once('@').ok_or_else(bad)?;
        let (size, kinds) = rest.split_once(':').ok_or_else(bad)?;
        let size = size.parse::<usize>().map_err(|_| bad())?;
        Arch::parse(counts, &LayerKind::parse_list(kinds)?, size)
    }

    /// `COUNTS@SIZE:KINDS`, e.g. `3-32-32-32-32-64-10@32:i-c5-p-c5-p-c5-f`.
    pub fn descriptor(&self) -> String {
        format!("{}@{}:{}", self.source, self.input_size, self.kinds_string())
    }

    pub fn kinds_string(&self) -> String {
        self.kinds.iter().map(|k| k.token()).collect::<Vec<_>>().join("-")
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_maps).collect()
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].out_maps
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_maps
    }

    /// Positions (indices into [`Arch::layers`]) of the convolution layers.
    pub fn conv_positions(&self) -> Vec<usize> {
        self.positions(|k| matches!(k, LayerKind::Conv { .. }))
    }

    /// Positions of layers carrying weights (conv and fully connected).
    pub fn weighted_positions(&self) -> Vec<usize> {
        self.positions(|k| matches!(k, LayerKind::Conv { .. } | LayerKind::Fc))
    }

    fn positions(&self, pred: impl Fn(&LayerKind) -> bool) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| pred(&l.kind)).map(|(i, _)| i).collect()
    }

    /// Layer label in the usual LeNet style: `C1`, `S2`, `C3`, `S4`, `F5`, ...
    pub fn layer_name(&self, position: usize) -> String {
        let prefix = match self.layers[position].kind {
            LayerKind::Input => "I",
            LayerKind::Conv { .. } => "C",
            LayerKind::Pool => "S",
            LayerKind::Fc => "F",
        };
        format!("{prefix}{position}")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Same kinds and input size with different map counts.
    pub fn with_counts(&self, counts: &[usize]) -> Result<Arch> {
        Arch::from_counts(counts, &self.kinds, self.input_size)
    }

    pub fn mnist() -> Arch {
        Self::preset("1-20-20-50-50-500-10", "i-c5-p-c5-p-f-f", 28)
    }

    pub fn cifar() -> Arch {
        Self::preset("3-32-32-32-32-64-10", "i-c5-p-c5-p-c5-f", 32)
    }

    pub fn mnist_desk() -> Arch {
        Self::preset("1-8-8-16-16-128-10", "i-c5-p-c5-p-f-f", 28)
    }

    pub fn cifar_desk() -> Arch {
        Self::preset("3-16-16-16-16-32-10", "i-c5-p-c5-p-c5-f", 32)
    }

    fn preset(counts: &str, kinds: &str, size: usize) -> Arch {
        Arch::parse(counts, &LayerKind::parse_list(kinds).expect("preset kinds"), size)
            .expect("preset arch")
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_geometry() {
        let a = Arch::mnist();
        let l = a.layers();
        assert_eq!(l.len(), 7);
        assert_eq!((l[1].out_h, l[2].out_h, l[3].out_h, l[4].out_h), (24, 12, 8, 4));
        assert_eq!(l[5].fan_in(), 50 * 16);
        assert_eq!(a.param_count(), 431_080);
    }

    #[test]
    fn cifar_geometry() {
        let a = Arch::cifar();
        let l = a.layers();
        assert_eq!((l[1].out_h, l[2].out_h, l[3].out_h, l[4].out_h, l[5].out_h), (28, 14, 10, 5, 1));
        assert_eq!(a.param_count(), 79_978);
        assert_eq!(
            l.iter().map(LayerSpec::param_count).collect::<Vec<_>>(),
            vec![0, 2432, 0, 25632, 0, 51264, 650]
        );
    }

    #[test]
    fn malformed_token_position() {
        let kinds = LayerKind::parse_list("i-c5-p").unwrap();
        match Arch::parse("3-32-x", &kinds, 32) {
            Err(Error::ArchParse { position, .. }) => assert_eq!(position, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pool_channel_mismatch_rejected() {
        let kinds = LayerKind::parse_list("i-c5-p-f").unwrap();
        match Arch::parse("1-20-21-10", &kinds, 28) {
            Err(Error::ArchParse { position, .. }) => assert_eq!(position, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn descriptor_round_trip() {
        for a in [Arch::mnist(), Arch::cifar(), Arch::mnist_desk(), Arch::cifar_desk()] {
            assert_eq!(Arch::from_descriptor(&a.descriptor()).unwrap(), a);
        }
        assert_eq!(Arch::cifar().descriptor(), "3-32-32-32-32-64-10@32:i-c5-p-c5-p-c5-f");
    }

    #[test]
    fn layer_names_follow_positions() {
        let a = Arch::cifar();
        let names: Vec<_> = a.weighted_positions().iter().map(|&p| a.layer_name(p)).collect();
        assert_eq!(names, ["C1", "C3", "C5", "F6"]);
    }
}
