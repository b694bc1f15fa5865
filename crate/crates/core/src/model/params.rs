use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, Variant};
use crate::autodiff::{ParameterSet, Tensor};
use crate::error::Result;
use crate::features::Field;

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Ones,
    /// Normal(0, 0.01).
    Embedding,
}

pub fn embedding_name(f: Field) -> String {
    format!("emb.{}", f.name())
}

pub const DIF_EMBEDDING: &str = "emb.dif";
pub const POSITION_EMBEDDING: &str = "emb.position";

/// Every tensor a variant owns, with its shape and initializer. Shapes
/// follow from the config alone.
pub fn parameter_specs(cfg: &ModelConfig, variant: Variant) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embedding_dim;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    for f in Field::ALL {
        push(embedding_name(f), vec![cfg.vocab_sizes[f.index()], d], Init::Embedding);
    }
    push(DIF_EMBEDDING.into(), vec![cfg.dif_buckets(), d], Init::Embedding);
    if variant.uses_position_embedding() {
        push(POSITION_EMBEDDING.into(), vec![cfg.positions, d], Init::Embedding);
    }

    let mut fan_in = cfg.user_dim() + cfg.context_dim() + cfg.item_dim();
    for (i, &h) in cfg.mlp_hidden.iter().enumerate() {
        push(format!("base.w{i}"), vec![fan_in, h], Init::Glorot);
        push(format!("base.b{i}"), vec![h], Init::Zeros);
        fan_in = h;
    }

    let r_item = cfg.item_repr_dim();
    let ah = cfg.attention_hidden;
    let attention = |prefix: &str, input: usize, push: &mut dyn FnMut(String, Vec<usize>, Init)| {
        push(format!("{prefix}.w_a"), vec![input, ah], Init::Glorot);
        push(format!("{prefix}.b_a"), vec![ah], Init::Zeros);
        push(format!("{prefix}.w_b"), vec![ah, 1], Init::Glorot);
        push(format!("{prefix}.b_b"), vec![1], Init::Zeros);
    };

    if variant.is_din_family() {
        attention("din.att", cfg.behavior_dim() + cfg.item_dim(), &mut push);
        let hidden = r_item + cfg.behavior_dim();
        match variant {
            Variant::DinCombination => {
                push("comb.w1".into(), vec![hidden + d, cfg.combination_hidden], Init::Glorot);
                push("comb.b1".into(), vec![cfg.combination_hidden], Init::Zeros);
                push("comb.w2".into(), vec![cfg.combination_hidden, 1], Init::Glorot);
                push("comb.b2".into(), vec![1], Init::Zeros);
            }
            _ => {
                push("head.w".into(), vec![hidden, 1], Init::Glorot);
                push("head.b".into(), vec![1], Init::Zeros);
            }
        }
        match variant {
            Variant::DinPosInWide | Variant::DinActualPosInWide => {
                push("wide.position".into(), vec![cfg.positions, 1], Init::Zeros)
            }
            Variant::DinPal => push("pal.position".into(), vec![cfg.positions, 1], Init::Zeros),
            _ => {}
        }
    } else {
        let item_extra = if variant == Variant::DpinItemAction { cfg.item_dim() } else { 0 };
        attention("pos.att", cfg.behavior_dim() + cfg.context_dim() + item_extra, &mut push);
        push(
            "pos.w_v".into(),
            vec![d + cfg.context_dim() + cfg.behavior_dim() + item_extra, cfg.d_model],
            Init::Glorot,
        );
        push("pos.b_v".into(), vec![cfg.d_model], Init::Zeros);
        if variant.uses_transformer() {
            let dm = cfg.d_model;
            for l in 0..cfg.layers {
                for m in ["wq", "wk", "wv", "wo"] {
                    push(format!("tf{l}.{m}"), vec![dm, dm], Init::Glorot);
                }
                push(format!("tf{l}.ln1.gain"), vec![dm], Init::Ones);
                push(format!("tf{l}.ln1.bias"), vec![dm], Init::Zeros);
                push(format!("tf{l}.ff.w1"), vec![dm, 4 * dm], Init::Glorot);
                push(format!("tf{l}.ff.b1"), vec![4 * dm], Init::Zeros);
                push(format!("tf{l}.ff.w2"), vec![4 * dm, dm], Init::Glorot);
                push(format!("tf{l}.ff.b2"), vec![dm], Init::Zeros);
                push(format!("tf{l}.ln2.gain"), vec![dm], Init::Ones);
                push(format!("tf{l}.ln2.bias"), vec![dm], Init::Zeros);
            }
        }
        push("comb.w1".into(), vec![r_item + cfg.d_model + d, cfg.combination_hidden], Init::Glorot);
        push("comb.b1".into(), vec![cfg.combination_hidden], Init::Zeros);
        push("comb.w2".into(), vec![cfg.combination_hidden, 1], Init::Glorot);
        push("comb.b2".into(), vec![1], Init::Zeros);
    }
    specs
}

/// Per-tensor RNG keyed by (seed, name): a tensor shared by two variants
/// starts from the same values in both.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

pub fn init_parameters(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    for (name, shape, init) in parameter_specs(cfg, variant) {
        let n: usize = shape.iter().product();
        let mut rng = tensor_rng(seed, &name);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Embedding => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Glorot => {
                let fan_in = shape[0];
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
            }
        };
        ps.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(ps)
}
