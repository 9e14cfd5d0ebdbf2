use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Topology of a hybrid model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Model 1: encoder blocks, then the LSTM layer.
    TransformerThenLstm,
    /// Model 2: LSTM layer, then encoder blocks.
    LstmThenTransformer,
    /// Model 3: LSTM and encoder branches side by side, fused.
    ParallelLstmTransformer,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::TransformerThenLstm,
        Variant::LstmThenTransformer,
        Variant::ParallelLstmTransformer,
    ];

    pub fn number(self) -> u8 {
        match self {
            Variant::TransformerThenLstm => 1,
            Variant::LstmThenTransformer => 2,
            Variant::ParallelLstmTransformer => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::TransformerThenLstm => "Model 1",
            Variant::LstmThenTransformer => "Model 2",
            Variant::ParallelLstmTransformer => "Model 3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::TransformerThenLstm => "transformer-lstm",
            Variant::LstmThenTransformer => "lstm-transformer",
            Variant::ParallelLstmTransformer => "parallel",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        match key.as_str() {
            "1" | "model1" | "model-1" | "transformer-lstm" | "transformerthenlstm" => {
                Ok(Variant::TransformerThenLstm)
            }
            "2" | "model2" | "model-2" | "lstm-transformer" | "lstmthentransformer" => {
                Ok(Variant::LstmThenTransformer)
            }
            "3" | "model3" | "model-3" | "parallel" | "lstm-transformer-parallel"
            | "parallellstmtransformer" => Ok(Variant::ParallelLstmTransformer),
            _ => Err(Error::config(format!(
                "unknown model variant `{s}` (expected 1, 2, 3, transformer-lstm, lstm-transformer or parallel)"
            ))),
        }
    }
}

/// Declarative description of a hybrid model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_channels: usize,
    /// Width of the projected input, and total attention width
    /// (`num_heads * d_head`) of every encoder block.
    pub d_model: usize,
    pub lstm_hidden: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub num_encoder_blocks: usize,
    pub sequence_length: usize,
    /// Dropout after each encoder sub-layer. Kept at zero unless training is
    /// explicitly configured to allow it.
    #[serde(default)]
    pub dropout: f64,
}

impl ModelSpec {
    /// Small dimensions suitable for CPU training.
    pub fn desk(variant: Variant) -> Self {
        ModelSpec {
            variant,
            input_channels: 7,
            d_model: 64,
            lstm_hidden: 64,
            num_heads: 2,
            d_ff: match variant {
                Variant::TransformerThenLstm => 64,
                _ => 128,
            },
            num_encoder_blocks: 1,
            sequence_length: 512,
            dropout: 0.0,
        }
    }

    /// Full-size model: 1024 LSTM units, 2 heads, and a
    /// 1024/2048-wide feed-forward layer.
    pub fn full(variant: Variant) -> Self {
        ModelSpec {
            lstm_hidden: 1024,
            d_ff: match variant {
                Variant::TransformerThenLstm => 1024,
                _ => 2048,
            },
            ..ModelSpec::desk(variant)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelSpec {
            variant,
            ..self.clone()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads.max(1)
    }

    /// Width of the residual stream the encoder blocks operate on.
    pub fn encoder_width(&self) -> usize {
        match self.variant {
            Variant::LstmThenTransformer => self.lstm_hidden,
            _ => self.d_model,
        }
    }

    /// Width of the features entering the output head.
    pub fn head_width(&self) -> usize {
        match self.variant {
            Variant::TransformerThenLstm | Variant::LstmThenTransformer => self.lstm_hidden,
            Variant::ParallelLstmTransformer => self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("d_model", self.d_model),
            ("lstm_hidden", self.lstm_hidden),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("num_encoder_blocks", self.num_encoder_blocks),
            ("sequence_length", self.sequence_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config(format!("d_model must be even, got {}", self.d_model)));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_model ({}) must be divisible by num_heads ({})",
                self.d_model, self.num_heads
            )));
        }
        if self.encoder_width() < 2 {
            return Err(Error::config("encoder width must be at least 2 for layer normalization"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}
