//! Multi-head dot-product attention and the LayerNorm/MLP sublayer the
//! interaction blocks are assembled from.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{concat_last, glorot_normal, ones, zeros, Param, ParamSet, Var};
use crate::error::{Error, Result};
use crate::features::TokenSequence;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-head projection matrices plus the shared output projection.
pub struct AttentionParams {
    pub num_heads: usize,
    pub model_dim: usize,
    pub w_q: Vec<Rc<Param>>,
    pub w_k: Vec<Rc<Param>>,
    pub w_v: Vec<Rc<Param>>,
    pub w_o: Rc<Param>,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        model_dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if model_dim % num_heads != 0 {
            return Err(Error::NotDivisible {
                context: format!("{prefix}: model_dim vs heads"),
                channels: model_dim,
                divisor: num_heads,
            });
        }
        let head_dim = model_dim / num_heads;
        let mut w_q = Vec::with_capacity(num_heads);
        let mut w_k = Vec::with_capacity(num_heads);
        let mut w_v = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            w_q.push(params.register(
                format!("{prefix}.h{h}.wq"),
                Param::new(glorot_normal(rng, &[model_dim, head_dim], model_dim, head_dim)),
            ));
            w_k.push(params.register(
                format!("{prefix}.h{h}.wk"),
                Param::new(glorot_normal(rng, &[model_dim, head_dim], model_dim, head_dim)),
            ));
            w_v.push(params.register(
                format!("{prefix}.h{h}.wv"),
                Param::new(glorot_normal(rng, &[model_dim, head_dim], model_dim, head_dim)),
            ));
        }
        let w_o = params.register(
            format!("{prefix}.wo"),
            Param::new(glorot_normal(rng, &[model_dim, model_dim], model_dim, model_dim)),
        );
        Ok(AttentionParams {
            num_heads,
            model_dim,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }
}

/// LayerNorm scale/shift pairs around a two-layer MLP.
pub struct SublayerParams {
    pub ln1_gamma: Rc<Param>,
    pub ln1_beta: Rc<Param>,
    pub ln2_gamma: Rc<Param>,
    pub ln2_beta: Rc<Param>,
    pub mlp_w1: Rc<Param>,
    pub mlp_b1: Rc<Param>,
    pub mlp_w2: Rc<Param>,
    pub mlp_b2: Rc<Param>,
}

impl SublayerParams {
    /// `d_ff` defaults to `4 * d` at the call sites.
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        SublayerParams {
            ln1_gamma: params.register(format!("{prefix}.ln1.g"), Param::new(ones(&[d]))),
            ln1_beta: params.register(format!("{prefix}.ln1.b"), Param::new(zeros(&[d]))),
            ln2_gamma: params.register(format!("{prefix}.ln2.g"), Param::new(ones(&[d]))),
            ln2_beta: params.register(format!("{prefix}.ln2.b"), Param::new(zeros(&[d]))),
            mlp_w1: params.register(
                format!("{prefix}.mlp.w1"),
                Param::new(glorot_normal(rng, &[d, d_ff], d, d_ff)),
            ),
            mlp_b1: params.register(format!("{prefix}.mlp.b1"), Param::new(zeros(&[d_ff]))),
            mlp_w2: params.register(
                format!("{prefix}.mlp.w2"),
                Param::new(glorot_normal(rng, &[d_ff, d], d_ff, d)),
            ),
            mlp_b2: params.register(format!("{prefix}.mlp.b2"), Param::new(zeros(&[d]))),
        }
    }
}

fn check_tokens(name: &str, seq: &TokenSequence, d: usize) -> Result<()> {
    if seq.dim() != d {
        return Err(Error::DimMismatch {
            context: format!("attention input {name}"),
            expected: format!("token dim {d}"),
            got: format!("{}", seq.dim()),
        });
    }
    if seq.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("attention input {name}")));
    }
    Ok(())
}

/// Multi-head dot-product attention. Per head the affinity weights are the
/// row softmax of `Q K^T / sqrt(d/h)`; head outputs are concatenated and
/// passed through the output projection. Output length equals the query
/// length.
pub fn multi_head_attention(
    q_seq: &TokenSequence,
    k_seq: &TokenSequence,
    v_seq: &TokenSequence,
    params: &AttentionParams,
) -> Result<TokenSequence> {
    let d = params.model_dim;
    check_tokens("query", q_seq, d)?;
    check_tokens("key", k_seq, d)?;
    check_tokens("value", v_seq, d)?;
    if k_seq.len() != v_seq.len() {
        return Err(Error::DimMismatch {
            context: "attention key/value".into(),
            expected: format!("{} tokens", k_seq.len()),
            got: format!("{}", v_seq.len()),
        });
    }
    let head_dim = d / params.num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let q = q_seq.data.matmul(&Var::from_param(&params.w_q[h]));
        let k = k_seq.data.matmul(&Var::from_param(&params.w_k[h]));
        let v = v_seq.data.matmul(&Var::from_param(&params.w_v[h]));
        let weights = q.matmul_nt(&k).scale(scale).softmax_rows();
        heads.push(weights.matmul(&v));
    }
    let merged = concat_last(&heads).matmul(&Var::from_param(&params.w_o));
    Ok(TokenSequence {
        data: merged,
        origin_height: q_seq.origin_height,
        origin_width: q_seq.origin_width,
        origin_rate: q_seq.origin_rate,
    })
}

/// Attention affinity matrices per head, for inspection and tests.
pub fn attention_weight_rows(
    q_seq: &TokenSequence,
    k_seq: &TokenSequence,
    params: &AttentionParams,
) -> Vec<crate::autograd::Arr> {
    let head_dim = params.model_dim / params.num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    (0..params.num_heads)
        .map(|h| {
            let q = q_seq.data.matmul(&Var::from_param(&params.w_q[h]));
            let k = k_seq.data.matmul(&Var::from_param(&params.w_k[h]));
            q.matmul_nt(&k).scale(scale).softmax_rows().value().clone()
        })
        .collect()
}

/// Post-norm residual sublayer: `y = LN(x + attended); out = LN(y + MLP(y))`
/// with a ReLU MLP.
pub fn transformer_sublayer(
    x: &TokenSequence,
    attended: &TokenSequence,
    params: &SublayerParams,
) -> Result<TokenSequence> {
    if x.value().shape() != attended.value().shape() {
        return Err(Error::DimMismatch {
            context: "transformer_sublayer".into(),
            expected: format!("{:?}", x.value().shape()),
            got: format!("{:?}", attended.value().shape()),
        });
    }
    let y = x.data.add(&attended.data).layer_norm(
        &Var::from_param(&params.ln1_gamma),
        &Var::from_param(&params.ln1_beta),
        LAYER_NORM_EPS,
    );
    let hidden = y
        .matmul(&Var::from_param(&params.mlp_w1))
        .add_bias_rows(&Var::from_param(&params.mlp_b1))
        .relu();
    let mlp = hidden
        .matmul(&Var::from_param(&params.mlp_w2))
        .add_bias_rows(&Var::from_param(&params.mlp_b2));
    let out = y.add(&mlp).layer_norm(
        &Var::from_param(&params.ln2_gamma),
        &Var::from_param(&params.ln2_beta),
        LAYER_NORM_EPS,
    );
    Ok(TokenSequence {
        data: out,
        origin_height: x.origin_height,
        origin_width: x.origin_width,
        origin_rate: x.origin_rate,
    })
}
