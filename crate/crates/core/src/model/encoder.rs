use ndarray::{Array2, Array3, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{apply_mask, dropout_mask, gelu, gelu_grad, normal_matrix, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear};
use super::params::{ParamId, ParamSet};
use crate::corpus::{MaskedBatch, PAD_ID};
use crate::error::{Error, Result};

const EMBED_INIT_STD: f64 = 0.1;

fn default_max_seq_len() -> usize {
    128
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout: f64,
    /// When false the sequence state is the mean of all token states
    /// instead of the first position.
    #[serde(default = "default_true")]
    pub has_sequence_token: bool,
}

impl EncoderConfig {
    /// 4 layers, hidden 128, 4 heads, feed-forward 256.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            feedforward_dim: 256,
            max_seq_len: 128,
            dropout: 0.1,
            has_sequence_token: true,
        }
    }

    /// A much smaller shape for quick experiments and tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            feedforward_dim: 64,
            max_seq_len: 32,
            dropout: 0.1,
            has_sequence_token: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size <= crate::corpus::NUM_SPECIAL as usize {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!("hidden_dim {} not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        if self.feedforward_dim == 0 {
            return bad("feedforward_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Parameter layout of a pre-norm transformer encoder with learned
/// position embeddings. Holds only handles; values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    /// `batch x seq x hidden`; padded positions are zero.
    pub token_states: Array3<f64>,
    pub sequence_state: Array2<f64>,
    packed: Array2<f64>,
    offsets: Vec<usize>,
}

impl EncodedBatch {
    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn hidden_dim(&self) -> usize {
        self.packed.ncols()
    }

    pub fn len(&self, row: usize) -> usize {
        self.offsets[row + 1] - self.offsets[row]
    }

    /// Real (unpadded) token states stacked row after row.
    pub fn packed(&self) -> &Array2<f64> {
        &self.packed
    }

    pub fn packed_index(&self, row: usize, pos: usize) -> usize {
        debug_assert!(pos < self.len(row));
        self.offsets[row] + pos
    }

    pub fn state(&self, row: usize, pos: usize) -> ArrayView1<'_, f64> {
        self.packed.row(self.packed_index(row, pos))
    }

    pub fn all_finite(&self) -> bool {
        self.packed.iter().all(|v| v.is_finite())
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    a_in: Array2<f64>,
    attn: AttentionCache,
    drop_a: Option<Array2<f64>>,
    ln2: LayerNormCache,
    f_in: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    drop_f: Option<Array2<f64>>,
}

pub struct ForwardCache {
    ids: Vec<usize>,
    positions: Vec<usize>,
    offsets: Vec<usize>,
    drop_emb: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    has_sequence_token: bool,
}

impl Encoder {
    pub fn init(config: &EncoderConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let tok_emb = params.add("embed.tokens", normal_matrix((config.vocab_size, h), EMBED_INIT_STD, rng));
        let pos_emb = params.add("embed.positions", normal_matrix((config.max_seq_len, h), EMBED_INIT_STD, rng));
        let blocks = (0..config.num_layers)
            .map(|l| {
                let n = format!("layer{l}");
                Block {
                    ln1: LayerNorm::init(params, &format!("{n}.ln1"), h),
                    attn: Attention::init(params, &format!("{n}.attn"), h, config.num_heads, rng),
                    ln2: LayerNorm::init(params, &format!("{n}.ln2"), h),
                    ff1: Linear::init(params, &format!("{n}.ff1"), h, config.feedforward_dim, rng),
                    ff2: Linear::init(params, &format!("{n}.ff2"), config.feedforward_dim, h, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::init(params, "final_ln", h);
        Ok(Self { config: config.clone(), tok_emb, pos_emb, blocks, final_ln })
    }

    /// Locates an existing parameter layout, checking every shape.
    pub fn bind(config: &EncoderConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let tok_emb = params.expect("embed.tokens", (config.vocab_size, h))?;
        let pos_emb = params.expect("embed.positions", (config.max_seq_len, h))?;
        let blocks = (0..config.num_layers)
            .map(|l| {
                let n = format!("layer{l}");
                Ok(Block {
                    ln1: LayerNorm::bind(params, &format!("{n}.ln1"), h)?,
                    attn: Attention::bind(params, &format!("{n}.attn"), h, config.num_heads)?,
                    ln2: LayerNorm::bind(params, &format!("{n}.ln2"), h)?,
                    ff1: Linear::bind(params, &format!("{n}.ff1"), h, config.feedforward_dim)?,
                    ff2: Linear::bind(params, &format!("{n}.ff2"), config.feedforward_dim, h)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_ln = LayerNorm::bind(params, "final_ln", h)?;
        Ok(Self { config: config.clone(), tok_emb, pos_emb, blocks, final_ln })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Names of every encoder-owned parameter (heads excluded).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("embed.") || name.starts_with("layer") || name.starts_with("final_ln.")
    }

    pub fn forward(&self, params: &ParamSet, batch: &MaskedBatch, mode: Mode<'_>) -> Result<(EncodedBatch, ForwardCache)> {
        self.forward_with_positions(params, &batch.token_ids, None, mode)
    }

    /// `positions[r][p]` overrides the position embedding index of token
    /// `p` in row `r`; by default it is `p`.
    pub fn forward_with_positions(
        &self,
        params: &ParamSet,
        token_ids: &Array2<u32>,
        positions: Option<&Array2<usize>>,
        mut mode: Mode<'_>,
    ) -> Result<(EncodedBatch, ForwardCache)> {
        let cfg = &self.config;
        let (rows, width) = token_ids.dim();
        if rows == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if width > cfg.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {width} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let mut offsets = vec![0usize];
        let mut ids = Vec::new();
        let mut pos_ids = Vec::new();
        for (r, row) in token_ids.rows().into_iter().enumerate() {
            let len = row.iter().take_while(|&&t| t != PAD_ID).count();
            if len == 0 {
                return Err(Error::InvalidArgument(format!("row {r} is empty")));
            }
            for (p, &t) in row.iter().take(len).enumerate() {
                if t as usize >= cfg.vocab_size {
                    return Err(Error::OutOfVocabulary { id: t as usize, vocab_size: cfg.vocab_size });
                }
                ids.push(t as usize);
                let pos = positions.map_or(p, |m| m[[r, p]]);
                if pos >= cfg.max_seq_len {
                    return Err(Error::InvalidArgument(format!("position {pos} exceeds max_seq_len")));
                }
                pos_ids.push(pos);
            }
            offsets.push(ids.len());
        }

        let h = cfg.hidden_dim;
        let total = ids.len();
        let tok = params.get(self.tok_emb);
        let pe = params.get(self.pos_emb);
        let mut x = Array2::zeros((total, h));
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            row.assign(&tok.row(ids[i]));
            row += &pe.row(pos_ids[i]);
        }
        let p = cfg.dropout;
        let mut draw = |shape| match &mut mode {
            Mode::Train(rng) => dropout_mask(shape, p, *rng),
            Mode::Eval => None,
        };
        let drop_emb = draw((total, h));
        apply_mask(&mut x, &drop_emb);

        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a_in, ln1) = b.ln1.forward(params, &x);
            let (mut a, attn) = b.attn.forward(params, &a_in, &offsets);
            let drop_a = draw(a.dim());
            apply_mask(&mut a, &drop_a);
            let hmid = &x + &a;
            let (f_in, ln2) = b.ln2.forward(params, &hmid);
            let f1 = b.ff1.forward(params, &f_in.view());
            let g = f1.mapv(gelu);
            let mut f2 = b.ff2.forward(params, &g.view());
            let drop_f = draw(f2.dim());
            apply_mask(&mut f2, &drop_f);
            let out = &hmid + &f2;
            caches.push(BlockCache { ln1, a_in, attn, drop_a, ln2, f_in, f1, g, drop_f });
            x = out;
        }
        let (packed, final_ln) = self.final_ln.forward(params, &x);
        if packed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder states"));
        }

        let mut token_states = Array3::zeros((rows, width, h));
        let mut sequence_state = Array2::zeros((rows, h));
        for r in 0..rows {
            let span = packed.slice(ndarray::s![offsets[r]..offsets[r + 1], ..]);
            token_states.index_axis_mut(Axis(0), r).slice_mut(ndarray::s![..span.nrows(), ..]).assign(&span);
            if cfg.has_sequence_token {
                sequence_state.row_mut(r).assign(&span.row(0));
            } else {
                sequence_state.row_mut(r).assign(&span.mean_axis(Axis(0)).expect("non-empty row"));
            }
        }
        let encoded = EncodedBatch { token_states, sequence_state, packed, offsets: offsets.clone() };
        let cache = ForwardCache {
            ids,
            positions: pos_ids,
            offsets,
            drop_emb,
            blocks: caches,
            final_ln,
            has_sequence_token: cfg.has_sequence_token,
        };
        Ok((encoded, cache))
    }

    /// Evaluation-mode forward pass without a cache.
    pub fn encode(&self, params: &ParamSet, batch: &MaskedBatch) -> Result<EncodedBatch> {
        Ok(self.forward(params, batch, Mode::Eval)?.0)
    }

    /// Back-propagates gradients with respect to the packed token states
    /// and/or the sequence states into `grads`.
    pub fn backward(
        &self,
        params: &ParamSet,
        grads: &mut ParamSet,
        cache: &ForwardCache,
        d_packed: Option<&Array2<f64>>,
        d_sequence: Option<&Array2<f64>>,
    ) {
        let total = cache.ids.len();
        let h = self.config.hidden_dim;
        let mut dy = match d_packed {
            Some(d) => d.clone(),
            None => Array2::zeros((total, h)),
        };
        if let Some(ds) = d_sequence {
            for (r, w) in cache.offsets.windows(2).enumerate() {
                if cache.has_sequence_token {
                    let mut row = dy.row_mut(w[0]);
                    row += &ds.row(r);
                } else {
                    let share = &ds.row(r) / (w[1] - w[0]) as f64;
                    for i in w[0]..w[1] {
                        let mut row = dy.row_mut(i);
                        row += &share;
                    }
                }
            }
        }
        let mut dx = self.final_ln.backward(params, grads, &cache.final_ln, &dy);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // out = hmid + drop(ff2(gelu(ff1(ln2(hmid))))), hmid = x + drop(attn(ln1(x)))
            let mut df2 = dx.clone();
            apply_mask(&mut df2, &c.drop_f);
            let dg = b.ff2.backward(params, grads, &c.g.view(), &df2);
            let mut df1 = dg;
            df1.zip_mut_with(&c.f1, |d, &z| *d *= gelu_grad(z));
            let dfin = b.ff1.backward(params, grads, &c.f_in.view(), &df1);
            let dh = dx + b.ln2.backward(params, grads, &c.ln2, &dfin);
            let mut da = dh.clone();
            apply_mask(&mut da, &c.drop_a);
            let dain = b.attn.backward(params, grads, &c.a_in, &cache.offsets, &c.attn, &da);
            dx = dh + b.ln1.backward(params, grads, &c.ln1, &dain);
        }
        apply_mask(&mut dx, &cache.drop_emb);
        {
            let g = grads.get_mut(self.tok_emb);
            for (i, row) in dx.rows().into_iter().enumerate() {
                let mut target = g.row_mut(cache.ids[i]);
                target += &row;
            }
        }
        let g = grads.get_mut(self.pos_emb);
        for (i, row) in dx.rows().into_iter().enumerate() {
            let mut target = g.row_mut(cache.positions[i]);
            target += &row;
        }
    }
}
