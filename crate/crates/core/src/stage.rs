//! Pipeline stage taxonomy.

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

/// The 4-bit post-training quantization algorithm used in stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuantMethod {
    /// Blockwise absmax NF4 with double-quantized scales.
    #[serde(rename = "bnb-nf4")]
    BnbNf4,
    #[serde(rename = "gptq")]
    Gptq,
}

impl QuantMethod {
    /// Short tag used inside stage labels.
    pub fn tag(self) -> &'static str {
        match self {
            QuantMethod::BnbNf4 => "BNB",
            QuantMethod::Gptq => "GPTQ",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuantMethod::BnbNf4 => "bnb-nf4",
            QuantMethod::Gptq => "gptq",
        }
    }
}

impl fmt::Display for QuantMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantMethod {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bnb-nf4" | "bnb" | "nf4" => Ok(QuantMethod::BnbNf4),
            "gptq" => Ok(QuantMethod::Gptq),
            other => Err(crate::Error::Config(alloc::format!(
                "unknown quantization method `{other}`"
            ))),
        }
    }
}

/// Where a checkpoint sits in the three-stage pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "alloc::string::String", into = "alloc::string::String")]
pub enum StageLabel {
    Sft16Bit,
    Ptq(QuantMethod),
    PtqQlora(QuantMethod),
}

impl StageLabel {
    pub const ALL: [StageLabel; 5] = [
        StageLabel::Sft16Bit,
        StageLabel::Ptq(QuantMethod::BnbNf4),
        StageLabel::Ptq(QuantMethod::Gptq),
        StageLabel::PtqQlora(QuantMethod::BnbNf4),
        StageLabel::PtqQlora(QuantMethod::Gptq),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageLabel::Sft16Bit => "SFT-16bit",
            StageLabel::Ptq(QuantMethod::BnbNf4) => "PTQ-BNB-4bit",
            StageLabel::Ptq(QuantMethod::Gptq) => "PTQ-GPTQ-4bit",
            StageLabel::PtqQlora(QuantMethod::BnbNf4) => "PTQ-BNB-4bit+QLoRA",
            StageLabel::PtqQlora(QuantMethod::Gptq) => "PTQ-GPTQ-4bit+QLoRA",
        }
    }

    /// Pipeline position: 1, 2 or 3.
    pub fn stage_number(self) -> u8 {
        match self {
            StageLabel::Sft16Bit => 1,
            StageLabel::Ptq(_) => 2,
            StageLabel::PtqQlora(_) => 3,
        }
    }

    pub fn method(self) -> Option<QuantMethod> {
        match self {
            StageLabel::Sft16Bit => None,
            StageLabel::Ptq(m) | StageLabel::PtqQlora(m) => Some(m),
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageLabel {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageLabel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s.trim())
            .ok_or_else(|| crate::Error::Config(alloc::format!("unknown stage label `{s}`")))
    }
}

impl TryFrom<alloc::string::String> for StageLabel {
    type Error = crate::Error;

    fn try_from(s: alloc::string::String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StageLabel> for alloc::string::String {
    fn from(l: StageLabel) -> Self {
        l.as_str().into()
    }
}
