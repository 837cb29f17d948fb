use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parsefeat::PARSE_FEATURE_DIM;

/// Which side inputs the encoder fuses with the phone stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Phone,
    PhoneWord,
    PhoneParser,
    PhoneWordParser,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Phone,
        Variant::PhoneWord,
        Variant::PhoneParser,
        Variant::PhoneWordParser,
    ];

    pub fn uses_word(self) -> bool {
        matches!(self, Variant::PhoneWord | Variant::PhoneWordParser)
    }

    pub fn uses_parser(self) -> bool {
        matches!(self, Variant::PhoneParser | Variant::PhoneWordParser)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Phone => "PHONE",
            Variant::PhoneWord => "PHONE_WORD",
            Variant::PhoneParser => "PHONE_PARSER",
            Variant::PhoneWordParser => "PHONE_WORD_PARSER",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '+'], "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::ConfigError(format!("unknown variant {s:?}")))
    }
}

/// Network hyper-parameters. Hidden widths are multiplied by `width_multiplier`
/// (see [`ModelConfig::dims`]); kernel sizes and `mel_dim` are not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Phone inventory size; filled from the lexicon.
    pub n_phones: usize,
    /// Raw word-embedding width (the is-word flag is added on top); filled from the data.
    pub word_dim: usize,
    pub phone_emb_dim: usize,
    pub enc_conv_layers: usize,
    pub enc_conv_kernel: usize,
    pub enc_conv_channels: usize,
    pub enc_blstm_units: usize,
    pub word_stream_conv_channels: usize,
    pub word_stream_blstm_units: usize,
    pub word_dense_units: usize,
    pub parser_dense_units: usize,
    pub side_dense_layers: usize,
    pub attention_dim: usize,
    pub attention_location_filters: usize,
    pub attention_location_kernel: usize,
    pub prenet_units: usize,
    pub prenet_layers: usize,
    pub prenet_dropout: f64,
    pub decoder_units: usize,
    pub decoder_layers: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub mel_dim: usize,
    pub reduction_factor: usize,
    pub max_decoder_frames: usize,
    pub width_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Phone,
            n_phones: 0,
            word_dim: 0,
            phone_emb_dim: 256,
            enc_conv_layers: 3,
            enc_conv_kernel: 5,
            enc_conv_channels: 256,
            enc_blstm_units: 128,
            word_stream_conv_channels: 128,
            word_stream_blstm_units: 64,
            word_dense_units: 128,
            parser_dense_units: 32,
            side_dense_layers: 2,
            attention_dim: 128,
            attention_location_filters: 32,
            attention_location_kernel: 31,
            prenet_units: 256,
            prenet_layers: 2,
            prenet_dropout: 0.5,
            decoder_units: 512,
            decoder_layers: 2,
            postnet_layers: 5,
            postnet_channels: 256,
            postnet_kernel: 5,
            mel_dim: 80,
            reduction_factor: 1,
            max_decoder_frames: 2000,
            width_multiplier: 1.0,
        }
    }
}

/// Effective layer widths after the width multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub phone_emb: usize,
    pub enc_conv: usize,
    pub enc_blstm: usize,
    pub word_conv: usize,
    pub word_blstm: usize,
    pub word_dense: usize,
    pub parser_dense: usize,
    pub attention: usize,
    pub location_filters: usize,
    pub prenet: usize,
    pub decoder: usize,
    pub postnet: usize,
    /// Word stream input width: embedding plus is-word flag.
    pub word_in: usize,
    /// Parser stream input width: parse features plus is-word flag.
    pub parser_in: usize,
    pub encoder_out: usize,
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..ModelConfig::default()
        }
    }

    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn dims(&self) -> Dims {
        let enc_blstm = self.scaled(self.enc_blstm_units);
        let word_blstm = self.scaled(self.word_stream_blstm_units);
        let encoder_out = if self.variant == Variant::PhoneWord {
            2 * enc_blstm + 2 * word_blstm
        } else {
            2 * enc_blstm
        };
        Dims {
            phone_emb: self.scaled(self.phone_emb_dim),
            enc_conv: self.scaled(self.enc_conv_channels),
            enc_blstm,
            word_conv: self.scaled(self.word_stream_conv_channels),
            word_blstm,
            word_dense: self.scaled(self.word_dense_units),
            parser_dense: self.scaled(self.parser_dense_units),
            attention: self.scaled(self.attention_dim),
            location_filters: self.scaled(self.attention_location_filters),
            prenet: self.scaled(self.prenet_units),
            decoder: self.scaled(self.decoder_units),
            postnet: self.scaled(self.postnet_channels),
            word_in: self.word_dim + 1,
            parser_in: PARSE_FEATURE_DIM + 1,
            encoder_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::ConfigError(m));
        if self.n_phones == 0 {
            return err("n_phones must be set from the lexicon".into());
        }
        if self.variant.uses_word() && self.word_dim == 0 {
            return err(format!("{} needs word_dim > 0", self.variant));
        }
        let positive = [
            ("phone_emb_dim", self.phone_emb_dim),
            ("enc_conv_layers", self.enc_conv_layers),
            ("enc_conv_channels", self.enc_conv_channels),
            ("enc_blstm_units", self.enc_blstm_units),
            ("word_stream_conv_channels", self.word_stream_conv_channels),
            ("word_stream_blstm_units", self.word_stream_blstm_units),
            ("word_dense_units", self.word_dense_units),
            ("parser_dense_units", self.parser_dense_units),
            ("side_dense_layers", self.side_dense_layers),
            ("attention_dim", self.attention_dim),
            ("attention_location_filters", self.attention_location_filters),
            ("prenet_units", self.prenet_units),
            ("prenet_layers", self.prenet_layers),
            ("decoder_units", self.decoder_units),
            ("postnet_layers", self.postnet_layers),
            ("postnet_channels", self.postnet_channels),
            ("mel_dim", self.mel_dim),
            ("max_decoder_frames", self.max_decoder_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        for (name, k) in [
            ("enc_conv_kernel", self.enc_conv_kernel),
            ("attention_location_kernel", self.attention_location_kernel),
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 {
                return err(format!("{name} must be odd, got {k}"));
            }
        }
        if self.postnet_layers < 2 {
            return err("postnet needs at least 2 layers".into());
        }
        if self.reduction_factor != 1 {
            return err("only reduction_factor = 1 is supported".into());
        }
        if self.decoder_layers != 2 {
            return err("the decoder has exactly 2 recurrent layers".into());
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return err(format!("prenet_dropout {} outside [0, 1)", self.prenet_dropout));
        }
        if !(self.width_multiplier > 0.0) {
            return err("width_multiplier must be positive".into());
        }
        Ok(())
    }
}
