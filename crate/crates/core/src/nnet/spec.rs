use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Activation(Activation),
}

/// Feed-forward architecture. The last layer must be a dense projection onto
/// `output_classes`; softmax is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub output_classes: usize,
}

impl ModelSpec {
    /// `input -> [dense(h) -> act]* -> dense(classes)`.
    pub fn mlp(input_dim: usize, hidden: &[usize], activation: Activation, classes: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() * 2 + 1);
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::Dense { in_dim: prev, out_dim: h });
            layers.push(LayerSpec::Activation(activation));
            prev = h;
        }
        layers.push(LayerSpec::Dense { in_dim: prev, out_dim: classes });
        ModelSpec { layers, output_classes: classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_classes < 2 {
            return Err(Error::Spec(format!("output_classes must be at least 2, got {}", self.output_classes)));
        }
        let mut prev_out: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Dense { in_dim, out_dim } = *layer {
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::Spec(format!("layer {i}: dense dimensions must be positive")));
                }
                if let Some(p) = prev_out {
                    if p != in_dim {
                        return Err(Error::Spec(format!(
                            "layer {i}: dense input {in_dim} does not chain with previous output {p}"
                        )));
                    }
                }
                prev_out = Some(out_dim);
            }
        }
        match self.layers.last() {
            None => Err(Error::Spec("at least one dense layer is required".into())),
            Some(LayerSpec::Dense { out_dim, .. }) if *out_dim == self.output_classes => Ok(()),
            Some(LayerSpec::Dense { out_dim, .. }) => Err(Error::Spec(format!(
                "final dense layer has {out_dim} outputs but output_classes is {}",
                self.output_classes
            ))),
            Some(LayerSpec::Activation(_)) => {
                Err(Error::Spec("the final layer must be dense (softmax is implicit)".into()))
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dense_shapes().next().map(|(i, _)| i).unwrap_or(0)
    }

    /// `(in_dim, out_dim)` of every dense layer, in order.
    pub fn dense_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layers.iter().filter_map(|l| match *l {
            LayerSpec::Dense { in_dim, out_dim } => Some((in_dim, out_dim)),
            LayerSpec::Activation(_) => None,
        })
    }

    pub fn dense_count(&self) -> usize {
        self.dense_shapes().count()
    }
}

/// Named architecture family. `A` is the protected model's architecture,
/// `B` keeps the activation but changes depth and width, `C` swaps the
/// activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum FamilyId {
    A,
    B,
    C,
}

impl std::fmt::Display for FamilyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyId::A => "A",
            FamilyId::B => "B",
            FamilyId::C => "C",
        })
    }
}

impl std::str::FromStr for FamilyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(FamilyId::A),
            "B" => Ok(FamilyId::B),
            "C" => Ok(FamilyId::C),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

/// Hidden-layer shapes for the three families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Families {
    pub a: FamilyShape,
    pub b: FamilyShape,
    pub c: FamilyShape,
}

impl Default for Families {
    fn default() -> Self {
        Families {
            a: FamilyShape { hidden: vec![64, 64], activation: Activation::Relu },
            b: FamilyShape { hidden: vec![48, 48, 48], activation: Activation::Relu },
            c: FamilyShape { hidden: vec![64, 64], activation: Activation::Tanh },
        }
    }
}

impl Families {
    pub fn shape(&self, id: FamilyId) -> &FamilyShape {
        match id {
            FamilyId::A => &self.a,
            FamilyId::B => &self.b,
            FamilyId::C => &self.c,
        }
    }

    pub fn spec(&self, id: FamilyId, input_dim: usize, classes: usize) -> ModelSpec {
        let shape = self.shape(id);
        ModelSpec::mlp(input_dim, &shape.hidden, shape.activation, classes)
    }
}
