use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::network::ActivationKind;
use crate::quantization::CodebookSpec;

/// The seven weight/activation constraint regimes, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Conventional,
    Lightnn2,
    Lightnn1,
    #[serde(rename = "binaryconnect")]
    BinaryConnect,
    Lightnn2Bin,
    Lightnn1Bin,
    #[serde(rename = "binarynet")]
    BinaryNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightConstraint {
    None,
    KOnes(u8),
    Binary,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::Conventional,
        ModelVariant::Lightnn2,
        ModelVariant::Lightnn1,
        ModelVariant::BinaryConnect,
        ModelVariant::Lightnn2Bin,
        ModelVariant::Lightnn1Bin,
        ModelVariant::BinaryNet,
    ];

    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Conventional => "conventional",
            ModelVariant::Lightnn2 => "lightnn2",
            ModelVariant::Lightnn1 => "lightnn1",
            ModelVariant::BinaryConnect => "binaryconnect",
            ModelVariant::Lightnn2Bin => "lightnn2_bin",
            ModelVariant::Lightnn1Bin => "lightnn1_bin",
            ModelVariant::BinaryNet => "binarynet",
        }
    }

    pub fn weight_constraint(self) -> WeightConstraint {
        match self {
            ModelVariant::Conventional => WeightConstraint::None,
            ModelVariant::Lightnn2 | ModelVariant::Lightnn2Bin => WeightConstraint::KOnes(2),
            ModelVariant::Lightnn1 | ModelVariant::Lightnn1Bin => WeightConstraint::KOnes(1),
            ModelVariant::BinaryConnect | ModelVariant::BinaryNet => WeightConstraint::Binary,
        }
    }

    pub fn activation(self) -> ActivationKind {
        match self {
            ModelVariant::Conventional
            | ModelVariant::Lightnn2
            | ModelVariant::Lightnn1
            | ModelVariant::BinaryConnect => ActivationKind::Relu,
            _ => ActivationKind::HtanhSign,
        }
    }

    pub fn codebook(self) -> Option<CodebookSpec> {
        match self.weight_constraint() {
            WeightConstraint::None => None,
            WeightConstraint::KOnes(k) => Some(CodebookSpec::k_ones(k)),
            WeightConstraint::Binary => Some(CodebookSpec::binary()),
        }
    }

    /// Packed width of one weight.
    pub fn bits_per_weight(self) -> u32 {
        match self.weight_constraint() {
            WeightConstraint::None => 32,
            WeightConstraint::KOnes(2) => 8,
            WeightConstraint::KOnes(_) => 4,
            WeightConstraint::Binary => 1,
        }
    }

    pub fn binary_activations(self) -> bool {
        self.activation() == ActivationKind::HtanhSign
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}
