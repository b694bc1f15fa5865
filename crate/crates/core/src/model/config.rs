use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::{ConfigFile, Section};
use crate::error::{Error, Result};
use crate::features::{Field, DIF_BUCKETS};

/// The eight compared model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Din,
    DinPosInWide,
    DinActualPosInWide,
    DinPal,
    DinCombination,
    DpinNoTransformer,
    Dpin,
    DpinItemAction,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Din,
        Variant::DinPosInWide,
        Variant::DinActualPosInWide,
        Variant::DinPal,
        Variant::DinCombination,
        Variant::DpinNoTransformer,
        Variant::Dpin,
        Variant::DpinItemAction,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Din => "DIN",
            Variant::DinPosInWide => "DIN+PosInWide",
            Variant::DinActualPosInWide => "DIN+ActualPosInWide",
            Variant::DinPal => "DIN+PAL",
            Variant::DinCombination => "DIN+Combination",
            Variant::DpinNoTransformer => "DPIN-Transformer",
            Variant::Dpin => "DPIN",
            Variant::DpinItemAction => "DPIN+ItemAction",
        }
    }

    pub fn valid_tags() -> String {
        Variant::ALL.iter().map(|v| v.tag()).collect::<Vec<_>>().join(", ")
    }

    /// Variants built on the candidate-queried interest pooling.
    pub fn is_din_family(self) -> bool {
        !self.is_dpin_family()
    }

    /// Variants with the position-wise interaction module.
    pub fn is_dpin_family(self) -> bool {
        matches!(self, Variant::DpinNoTransformer | Variant::Dpin | Variant::DpinItemAction)
    }

    pub fn uses_transformer(self) -> bool {
        matches!(self, Variant::Dpin | Variant::DpinItemAction)
    }

    /// Variants whose head consumes the position embedding table `E(k)`.
    pub fn uses_position_embedding(self) -> bool {
        matches!(self, Variant::DinCombination) || self.is_dpin_family()
    }

    /// Position a logged impression is scored at during evaluation.
    /// PosInWide is scored as if shown in the first slot.
    pub fn evaluation_position(self, actual: u32) -> u32 {
        match self {
            Variant::DinPosInWide => 1,
            _ => actual,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('\u{2212}', "-");
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.tag().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| Error::usage(format!("unknown variant '{s}'; valid tags: {}", Variant::valid_tags())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding dimension `d` shared by every sparse field.
    pub embedding_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub combination_hidden: usize,
    /// Hidden width of the attention scorer in interest pooling.
    pub attention_hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Maximum behavior sequence length `L`.
    pub seq_len: usize,
    /// Number of positions `K`.
    pub positions: usize,
    /// Table sizes per [`Field`], in `Field::ALL` order.
    pub vocab_sizes: [usize; 8],
}

impl ModelConfig {
    /// Small configuration used for experiments on one core.
    pub fn desk(vocab_sizes: [usize; 8]) -> Self {
        ModelConfig {
            embedding_dim: 8,
            mlp_hidden: vec![64, 32, 16],
            combination_hidden: 16,
            attention_hidden: 16,
            d_model: 32,
            heads: 2,
            layers: 2,
            seq_len: 30,
            positions: 10,
            vocab_sizes,
        }
    }

    /// Sizes of the original production setting.
    pub fn production_scale(vocab_sizes: [usize; 8]) -> Self {
        ModelConfig {
            embedding_dim: 8,
            mlp_hidden: vec![1024, 512, 128],
            combination_hidden: 128,
            attention_hidden: 64,
            d_model: 64,
            heads: 2,
            layers: 2,
            seq_len: 300,
            positions: 25,
            vocab_sizes,
        }
    }

    pub fn preset(name: &str, vocab_sizes: [usize; 8]) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(vocab_sizes)),
            "production" => Ok(Self::production_scale(vocab_sizes)),
            other => Err(Error::Config(format!("unknown model preset '{other}' (desk|production)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("combination_hidden", self.combination_hidden),
            ("attention_hidden", self.attention_hidden),
            ("d_model", self.d_model),
            ("positions", self.positions),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
            return Err(Error::Config("mlp_hidden needs at least one positive size".into()));
        }
        if self.vocab_sizes.contains(&0) {
            return Err(Error::Config("vocabulary sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Width of `r_item`, the last MLP layer.
    pub fn item_repr_dim(&self) -> usize {
        *self.mlp_hidden.last().expect("validated")
    }

    /// Width of one behavior embedding: item fields, context fields, time bucket.
    pub fn behavior_dim(&self) -> usize {
        (Field::ITEM.len() + Field::CONTEXT.len() + 1) * self.embedding_dim
    }

    pub fn user_dim(&self) -> usize {
        Field::USER.len() * self.embedding_dim
    }

    pub fn context_dim(&self) -> usize {
        Field::CONTEXT.len() * self.embedding_dim
    }

    pub fn item_dim(&self) -> usize {
        Field::ITEM.len() * self.embedding_dim
    }

    pub fn dif_buckets(&self) -> usize {
        DIF_BUCKETS
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "embedding_dim = {}", self.embedding_dim);
        let _ = writeln!(out, "mlp_hidden = {}", join(&self.mlp_hidden));
        let _ = writeln!(out, "combination_hidden = {}", self.combination_hidden);
        let _ = writeln!(out, "attention_hidden = {}", self.attention_hidden);
        let _ = writeln!(out, "d_model = {}", self.d_model);
        let _ = writeln!(out, "heads = {}", self.heads);
        let _ = writeln!(out, "layers = {}", self.layers);
        let _ = writeln!(out, "seq_len = {}", self.seq_len);
        let _ = writeln!(out, "positions = {}", self.positions);
        let _ = writeln!(out, "vocab_sizes = {}", join(&self.vocab_sizes));
        out
    }

    /// Reads a section produced by [`ModelConfig::render`]; every key is required.
    pub fn from_section(s: &Section<'_>) -> Result<Self> {
        let req = |k: &str| -> Result<String> {
            s.raw(k).map(str::to_string).ok_or_else(|| Error::Config(format!("model config missing '{k}'")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            req(k)?
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad list entry in '{k}'"))))
                .collect()
        };
        let num = |k: &str| -> Result<usize> { req(k)?.parse().map_err(|_| Error::Config(format!("bad value for '{k}'"))) };
        let vocab = list("vocab_sizes")?;
        let vocab_sizes: [usize; 8] =
            vocab.try_into().map_err(|_| Error::Config("vocab_sizes needs 8 entries".into()))?;
        let cfg = ModelConfig {
            embedding_dim: num("embedding_dim")?,
            mlp_hidden: list("mlp_hidden")?,
            combination_hidden: num("combination_hidden")?,
            attention_hidden: num("attention_hidden")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            layers: num("layers")?,
            seq_len: num("seq_len")?,
            positions: num("positions")?,
            vocab_sizes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_section(&ConfigFile::parse(text)?.section(""))
    }
}
