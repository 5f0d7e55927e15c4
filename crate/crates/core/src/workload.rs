//! Layer geometry, training phases, and dense operation counts.
//!
//! A conv layer's work is the seven-dimensional loop nest over
//! (N, C, K, R, S, P, Q); the forward, backward, and weight-update passes all
//! traverse the same operation-space volume, they just fix a different operand
//! as sparse. FC layers are the degenerate case R = S = P = Q = 1.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Training phase. Forward and backward passes may skip zero weights; the
/// weight-update pass may skip zero input activations. The back-propagated
/// gradient is always treated as dense (batch normalization destroys its
/// sparsity in practice).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Forward,
    Backward,
    WeightUpdate,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Forward, Phase::Backward, Phase::WeightUpdate];

    pub fn label(&self) -> &'static str {
        match self {
            Phase::Forward => "fw",
            Phase::Backward => "bw",
            Phase::WeightUpdate => "wu",
        }
    }
}

/// A loop dimension of the conv operation space that a mapping may bind to a
/// PE-array axis. R and S are never spatialized (filters are small).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    N,
    C,
    K,
    P,
    Q,
}

impl Dim {
    pub fn label(&self) -> &'static str {
        match self {
            Dim::N => "N",
            Dim::C => "C",
            Dim::K => "K",
            Dim::P => "P",
            Dim::Q => "Q",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

/// Geometry of one compute layer.
///
/// For conv: output `[N][K][P][Q]`, weights `[K][C][R][S]`, input
/// `[N][C][X][Y]` with `X = (P-1)*stride + R - 2*pad` (exact, no remainder).
/// For fc: `R = S = P = Q = 1`, `stride = 1`, `pad = 0`, weights `K x C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub r: usize,
    pub s: usize,
    pub p: usize,
    pub q: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerShape {
    pub fn conv(
        n: usize,
        c: usize,
        k: usize,
        r: usize,
        s: usize,
        p: usize,
        q: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let shape = Self { kind: LayerKind::Conv, n, c, k, r, s, p, q, stride, pad };
        shape.validate()?;
        Ok(shape)
    }

    pub fn fc(n: usize, c: usize, k: usize) -> Result<Self> {
        let shape =
            Self { kind: LayerKind::Fc, n, c, k, r: 1, s: 1, p: 1, q: 1, stride: 1, pad: 0 };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n, self.c, self.k, self.r, self.s, self.p, self.q];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("zero-sized dimension in {self:?}")));
        }
        match self.kind {
            LayerKind::Fc => {
                if self.r != 1 || self.s != 1 || self.p != 1 || self.q != 1 {
                    return Err(Error::InvalidShape(
                        "fc layers require R=S=P=Q=1".to_string(),
                    ));
                }
            }
            LayerKind::Conv => {
                if !(1..=2).contains(&self.stride) {
                    return Err(Error::InvalidShape(format!(
                        "stride {} unsupported (only 1 and 2)",
                        self.stride
                    )));
                }
                // Input extent must be positive and the geometry exact.
                let x = (self.p - 1) as i64 * self.stride as i64 + self.r as i64
                    - 2 * self.pad as i64;
                let y = (self.q - 1) as i64 * self.stride as i64 + self.s as i64
                    - 2 * self.pad as i64;
                if x < 1 || y < 1 {
                    return Err(Error::InvalidShape(format!(
                        "derived input extent {x}x{y} below 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Input activation extents `(X, Y)` implied by the output geometry.
    pub fn input_hw(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Fc => (1, 1),
            LayerKind::Conv => (
                (self.p - 1) * self.stride + self.r - 2 * self.pad,
                (self.q - 1) * self.stride + self.s - 2 * self.pad,
            ),
        }
    }

    /// Extent of one operation-space dimension.
    pub fn extent(&self, dim: Dim) -> usize {
        match dim {
            Dim::N => self.n,
            Dim::C => self.c,
            Dim::K => self.k,
            Dim::P => self.p,
            Dim::Q => self.q,
        }
    }

    /// Number of weights, `K*C*R*S`.
    pub fn weight_count(&self) -> usize {
        self.k * self.c * self.r * self.s
    }
}

/// Multiply-accumulates the dense computation performs in one phase.
///
/// Each forward MAC `y[p,q,k,n] += w[r,s,k,c] * x[..]` has exactly one
/// counterpart in the backward pass (scattering into `dL/dx`) and one in the
/// weight-update pass (accumulating into `dL/dW`), so all three phases share
/// the volume `N*C*K*R*S*P*Q`.
pub fn dense_macs(layer: &LayerShape, _phase: Phase) -> u64 {
    [layer.n, layer.c, layer.k, layer.r, layer.s, layer.p, layer.q]
        .iter()
        .map(|&d| d as u64)
        .product()
}

/// Idealized sparse MAC count: `ceil(dense * density)`. This is the
/// even-sparsity, zero-overhead savings oracle.
pub fn sparse_macs(layer: &LayerShape, phase: Phase, density: f64) -> Result<u64> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidDensity(density));
    }
    Ok((dense_macs(layer, phase) as f64 * density).ceil() as u64)
}

/// One entry of a network: a compute layer (optionally ReLU-activated) or a
/// MAC-free pass-through (pooling / batch-norm). Pass-throughs reshape
/// activations and force the backward gradient dense; they never hold weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerOp {
    Compute { shape: LayerShape, relu: bool },
    /// Non-overlapping average pool over `window x window` tiles of the
    /// previous layer's `[N][C][H][W]` output.
    AvgPool { n: usize, c: usize, in_h: usize, in_w: usize, window: usize },
}

impl LayerOp {
    /// Output activation shape `[N][C][H][W]`.
    pub fn output_shape(&self) -> [usize; 4] {
        match self {
            LayerOp::Compute { shape, .. } => [shape.n, shape.k, shape.p, shape.q],
            LayerOp::AvgPool { n, c, in_h, in_w, window } => {
                [*n, *c, in_h / window, in_w / window]
            }
        }
    }

    /// Input activation shape `[N][C][H][W]`. FC layers accept any input of
    /// matching volume; this reports the canonical flattened form.
    pub fn input_shape(&self) -> [usize; 4] {
        match self {
            LayerOp::Compute { shape, .. } => {
                let (x, y) = shape.input_hw();
                [shape.n, shape.c, x, y]
            }
            LayerOp::AvgPool { n, c, in_h, in_w, .. } => [*n, *c, *in_h, *in_w],
        }
    }

    pub fn weight_count(&self) -> usize {
        match self {
            LayerOp::Compute { shape, .. } => shape.weight_count(),
            LayerOp::AvgPool { .. } => 0,
        }
    }

    pub fn shape(&self) -> Option<&LayerShape> {
        match self {
            LayerOp::Compute { shape, .. } => Some(shape),
            LayerOp::AvgPool { .. } => None,
        }
    }
}

/// An ordered stack of layers with compatible activation volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub layers: Vec<LayerOp>,
}

impl Network {
    pub fn new(name: impl Into<String>, layers: Vec<LayerOp>) -> Result<Self> {
        let net = Self { name: name.into(), layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::BadConfig("network has no layers".to_string()));
        }
        for op in &self.layers {
            if let LayerOp::Compute { shape, .. } = op {
                shape.validate()?;
            }
            if let LayerOp::AvgPool { in_h, in_w, window, .. } = op {
                if *window == 0 || in_h % window != 0 || in_w % window != 0 {
                    return Err(Error::BadConfig(format!(
                        "pool window {window} does not tile {in_h}x{in_w}"
                    )));
                }
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            let out = pair[0].output_shape();
            let inp = pair[1].input_shape();
            let out_vol: usize = out.iter().product();
            let inp_vol: usize = inp.iter().product();
            if out[0] != inp[0] || out_vol != inp_vol {
                return Err(Error::BadConfig(format!(
                    "layer {i} output {out:?} incompatible with layer {} input {inp:?}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Compute layers only, with their index in the full stack.
    pub fn compute_layers(&self) -> impl Iterator<Item = (usize, &LayerShape)> {
        self.layers.iter().enumerate().filter_map(|(i, op)| op.shape().map(|s| (i, s)))
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count()).sum()
    }

    pub fn dense_macs(&self, phase: Phase) -> u64 {
        self.compute_layers().map(|(_, s)| dense_macs(s, phase)).sum()
    }

    /// Minibatch size (all layers share it).
    pub fn batch(&self) -> usize {
        self.layers[0].input_shape()[0]
    }
}

// ---------------------------------------------------------------------------
// Structured text config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    /// Minibatch size applied to every layer unless overridden per entry.
    pub n: usize,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerConfig {
    pub kind: String,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub c: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub r: Option<usize>,
    #[serde(default)]
    pub s: Option<usize>,
    #[serde(default)]
    pub p: Option<usize>,
    #[serde(default)]
    pub q: Option<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub pad: Option<usize>,
    #[serde(default)]
    pub relu: Option<bool>,
    /// Pool window for `kind = "pool"` entries.
    #[serde(default)]
    pub window: Option<usize>,
}

impl NetworkConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("network config serializes")
    }

    /// Resolve into a validated `Network`. Pool entries inherit geometry from
    /// the preceding layer; fc entries inherit their input volume when `c` is
    /// omitted.
    pub fn build(&self) -> Result<Network> {
        let mut layers = Vec::new();
        let mut prev_out: Option<[usize; 4]> = None;
        for (i, lc) in self.layers.iter().enumerate() {
            let n = lc.n.unwrap_or(self.n);
            let missing =
                |f: &str| Error::BadConfig(format!("layer {i}: missing field `{f}`"));
            let op = match lc.kind.as_str() {
                "conv" => {
                    let shape = LayerShape::conv(
                        n,
                        lc.c.ok_or_else(|| missing("c"))?,
                        lc.k.ok_or_else(|| missing("k"))?,
                        lc.r.ok_or_else(|| missing("r"))?,
                        lc.s.ok_or_else(|| missing("s"))?,
                        lc.p.ok_or_else(|| missing("p"))?,
                        lc.q.ok_or_else(|| missing("q"))?,
                        lc.stride.unwrap_or(1),
                        lc.pad.unwrap_or(0),
                    )?;
                    LayerOp::Compute { shape, relu: lc.relu.unwrap_or(true) }
                }
                "fc" => {
                    let c = match (lc.c, prev_out) {
                        (Some(c), _) => c,
                        (None, Some(out)) => out[1] * out[2] * out[3],
                        (None, None) => return Err(missing("c")),
                    };
                    let shape = LayerShape::fc(n, c, lc.k.ok_or_else(|| missing("k"))?)?;
                    LayerOp::Compute { shape, relu: lc.relu.unwrap_or(false) }
                }
                "pool" => {
                    let out = prev_out
                        .ok_or_else(|| Error::BadConfig("pool cannot be first".to_string()))?;
                    LayerOp::AvgPool {
                        n: out[0],
                        c: out[1],
                        in_h: out[2],
                        in_w: out[3],
                        window: lc.window.unwrap_or(2),
                    }
                }
                other => {
                    return Err(Error::BadConfig(format!("layer {i}: unknown kind `{other}`")))
                }
            };
            prev_out = Some(op.output_shape());
            layers.push(op);
        }
        Network::new(self.name.clone(), layers)
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// The toy training network: three conv layers and a classifier, 28k weights,
/// 11x11 single-channel inputs, four classes.
pub fn toy_network(n: usize) -> Network {
    let layers = vec![
        LayerOp::Compute {
            shape: LayerShape::conv(n, 1, 16, 3, 3, 11, 11, 1, 1).unwrap(),
            relu: true,
        },
        LayerOp::Compute {
            shape: LayerShape::conv(n, 16, 64, 3, 3, 6, 6, 2, 1).unwrap(),
            relu: true,
        },
        LayerOp::Compute {
            shape: LayerShape::conv(n, 64, 64, 2, 2, 3, 3, 2, 0).unwrap(),
            relu: true,
        },
        LayerOp::Compute { shape: LayerShape::fc(n, 64 * 3 * 3, 4).unwrap(), relu: false },
    ];
    Network::new("toy", layers).unwrap()
}

/// A reduced VGG-style conv stack (32x32 inputs, pooling pass-throughs,
/// ~4.7M weights). Used for cost-model experiments only, never trained here.
pub fn vgg_s_like(n: usize) -> Network {
    let conv = |c, k, p| LayerOp::Compute {
        shape: LayerShape::conv(n, c, k, 3, 3, p, p, 1, 1).unwrap(),
        relu: true,
    };
    let pool = |c, hw| LayerOp::AvgPool { n, c, in_h: hw, in_w: hw, window: 2 };
    let layers = vec![
        conv(3, 64, 32),
        conv(64, 64, 32),
        pool(64, 32),
        conv(64, 128, 16),
        conv(128, 128, 16),
        pool(128, 16),
        conv(128, 256, 8),
        conv(256, 256, 8),
        pool(256, 8),
        conv(256, 512, 4),
        conv(512, 512, 4),
        pool(512, 4),
        LayerOp::Compute { shape: LayerShape::fc(n, 512 * 2 * 2, 10).unwrap(), relu: false },
    ];
    Network::new("vgg-s-like", layers).unwrap()
}

/// Look up a bundled preset by name.
pub fn preset(name: &str, n: usize) -> Result<Network> {
    match name {
        "toy" => Ok(toy_network(n)),
        "vgg-s-like" => Ok(vgg_s_like(n)),
        other => Err(Error::BadConfig(format!("unknown preset `{other}`"))),
    }
}
