//! The encoder-decoder cross-attention block that enhances diagnosis
//! features with segmentation features.
//!
//! The encoder embeds the diagnosis feature through its affinity with the
//! segmentation feature (segmentation tokens as query, diagnosis tokens as
//! key and value). The decoder maps the embedding back to diagnosis space
//! (diagnosis tokens as query, embedding as key and value), and a trailing
//! self-attention stage refines the result. Fixed sine positional encodings
//! are added to queries and keys at every attention call; values are left
//! unencoded.

use std::rc::Rc;

use rand::Rng;

use crate::attention::{
    multi_head_attention, transformer_sublayer, AttentionParams, SublayerParams,
};
use crate::autograd::{glorot_normal, Param, ParamSet, Var};
use crate::error::{Error, Result};
use crate::features::{
    flatten_to_tokens, sine_positional_encoding, tokens_to_feature, FeatureMap, TokenSequence,
};

/// Attention width for a given diagnosis channel count: capped at 256 and
/// rounded up so both the positional encoding (multiple of 4) and the head
/// split divide it.
pub fn sea_model_dim(diag_channels: usize, num_heads: usize) -> usize {
    let base = diag_channels.min(256);
    let mut step = 4;
    while step % num_heads != 0 {
        step += 4;
    }
    base.div_ceil(step) * step
}

/// One attention stage: projections plus its residual/MLP sublayer.
pub struct AttentionStage {
    pub attn: AttentionParams,
    pub sublayer: SublayerParams,
}

impl AttentionStage {
    fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionStage {
            attn: AttentionParams::init(params, &format!("{prefix}.attn"), d, heads, rng)?,
            sublayer: SublayerParams::init(params, &format!("{prefix}.sub"), d, 4 * d, rng),
        })
    }
}

/// Parameters of one interaction block: channel projections into a common
/// attention width, encoder, decoder and trailing self-attention stages,
/// and the projection back to the diagnosis channel count.
pub struct SeaBlock {
    pub model_dim: usize,
    pub proj_seg: Rc<Param>,
    pub proj_diag: Rc<Param>,
    pub proj_out: Rc<Param>,
    pub encoder: AttentionStage,
    pub decoder: AttentionStage,
    pub self_attn: AttentionStage,
}

impl SeaBlock {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        seg_channels: usize,
        diag_channels: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = sea_model_dim(diag_channels, num_heads);
        Ok(SeaBlock {
            model_dim: d,
            proj_seg: params.register(
                format!("{prefix}.proj_seg"),
                Param::new(glorot_normal(rng, &[seg_channels, d], seg_channels, d)),
            ),
            proj_diag: params.register(
                format!("{prefix}.proj_diag"),
                Param::new(glorot_normal(rng, &[diag_channels, d], diag_channels, d)),
            ),
            proj_out: params.register(
                format!("{prefix}.proj_out"),
                Param::new(glorot_normal(rng, &[d, diag_channels], d, diag_channels)),
            ),
            encoder: AttentionStage::init(params, &format!("{prefix}.enc"), d, num_heads, rng)?,
            decoder: AttentionStage::init(params, &format!("{prefix}.dec"), d, num_heads, rng)?,
            self_attn: AttentionStage::init(params, &format!("{prefix}.self"), d, num_heads, rng)?,
        })
    }
}

fn with_encoding(seq: &TokenSequence) -> Result<TokenSequence> {
    let pe = sine_positional_encoding(seq.origin_height, seq.origin_width, seq.dim())?;
    Ok(TokenSequence {
        data: seq.data.add(&Var::constant(pe.data)),
        origin_height: seq.origin_height,
        origin_width: seq.origin_width,
        origin_rate: seq.origin_rate,
    })
}

/// Encoder: embed the diagnosis feature by its segmentation affinity.
/// Query is `seg + E_m`, key is `diag + E_d`, value is the raw diagnosis
/// tokens; the residual path carries the query tokens. Output length equals
/// the segmentation token count.
pub fn sea_encode(
    seg_tokens: &TokenSequence,
    diag_tokens: &TokenSequence,
    block: &SeaBlock,
) -> Result<TokenSequence> {
    let attended = multi_head_attention(
        &with_encoding(seg_tokens)?,
        &with_encoding(diag_tokens)?,
        diag_tokens,
        &block.encoder.attn,
    )?;
    transformer_sublayer(seg_tokens, &attended, &block.encoder.sublayer)
}

/// Decoder plus trailing self-attention: map the embedding back to diagnosis
/// space. Query is `diag + E_d`, key is `embedded + E_md`, value is the raw
/// embedding. Output length equals the diagnosis token count.
pub fn sea_decode(
    diag_tokens: &TokenSequence,
    embedded: &TokenSequence,
    block: &SeaBlock,
) -> Result<TokenSequence> {
    let attended = multi_head_attention(
        &with_encoding(diag_tokens)?,
        &with_encoding(embedded)?,
        embedded,
        &block.decoder.attn,
    )?;
    let decoded = transformer_sublayer(diag_tokens, &attended, &block.decoder.sublayer)?;
    let refined = multi_head_attention(
        &with_encoding(&decoded)?,
        &with_encoding(&decoded)?,
        &decoded,
        &block.self_attn.attn,
    )?;
    transformer_sublayer(&decoded, &refined, &block.self_attn.sublayer)
}

/// Full block: flatten, project both feature maps to the common attention
/// width, encode, decode, project back and reshape. The output has exactly
/// the diagnosis feature's shape.
pub fn sea_block(f_m: &FeatureMap, f_d: &FeatureMap, block: &SeaBlock) -> Result<FeatureMap> {
    if f_m.height() != f_d.height() || f_m.width() != f_d.width() {
        return Err(Error::SpatialMismatch {
            context: "sea_block".into(),
            left: format!("{}x{}", f_m.height(), f_m.width()),
            right: format!("{}x{}", f_d.height(), f_d.width()),
        });
    }
    let seg_tokens = flatten_to_tokens(f_m);
    let diag_tokens = flatten_to_tokens(f_d);
    let seg_p = TokenSequence {
        data: seg_tokens.data.matmul(&Var::from_param(&block.proj_seg)),
        ..seg_tokens
    };
    let diag_p = TokenSequence {
        data: diag_tokens.data.matmul(&Var::from_param(&block.proj_diag)),
        ..diag_tokens
    };
    let embedded = sea_encode(&seg_p, &diag_p, block)?;
    let decoded = sea_decode(&diag_p, &embedded, block)?;
    let out_tokens = TokenSequence {
        data: decoded.data.matmul(&Var::from_param(&block.proj_out)),
        ..decoded
    };
    let out = tokens_to_feature(&out_tokens, f_d.height(), f_d.width())?;
    Ok(FeatureMap::new(out.data, f_d.rate))
}
