//! Post-norm encoder-decoder Transformer exposing every per-head attention map.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BOS, EOS};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Mask, ParamId, ParamSet, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "model.dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form trainable parameter count.
    ///
    /// With `d = d_model`, `f = d_ffn`, `V = vocab_size`:
    /// - shared token embedding `V·d`;
    /// - attention block `4d² + d` (per-head Q/K/V projections without bias,
    ///   output projection with bias);
    /// - feed-forward block `2df + f + d`; layer norm `2d`;
    /// - encoder layer: attention + FFN + 2 norms = `4d² + 2df + f + 6d`;
    /// - decoder layer: 2 attentions + FFN + 3 norms = `8d² + 2df + f + 9d`;
    /// - output projection `d·V + V`.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab_size);
        let enc = 4 * d * d + 2 * d * f + f + 6 * d;
        let dec = 8 * d * d + 2 * d * f + f + 9 * d;
        v * d + self.n_enc_layers * enc + self.n_dec_layers * dec + d * v + v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    EncSelf,
    DecSelf,
    DecCross,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [
        AttentionKind::EncSelf,
        AttentionKind::DecSelf,
        AttentionKind::DecCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::EncSelf => "enc_self",
            AttentionKind::DecSelf => "dec_self",
            AttentionKind::DecCross => "dec_cross",
        }
    }
}

/// Attention maps of one forward pass as tape nodes, ordered layer-major,
/// head-minor. Each map is `[batch, L_query, L_key]`; decoder cross maps have
/// target-indexed rows.
#[derive(Clone, Debug, Default)]
pub struct AttentionMaps {
    pub enc_self: Vec<Var>,
    pub dec_self: Vec<Var>,
    pub dec_cross: Vec<Var>,
}

impl AttentionMaps {
    pub fn of(&self, kind: AttentionKind) -> &[Var] {
        match kind {
            AttentionKind::EncSelf => &self.enc_self,
            AttentionKind::DecSelf => &self.dec_self,
            AttentionKind::DecCross => &self.dec_cross,
        }
    }

    pub fn to_set(&self, tape: &Tape, n_heads: usize) -> AttentionMapSet {
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.to_tensor(v)).collect();
        AttentionMapSet {
            n_heads,
            enc_self: grab(&self.enc_self),
            dec_self: grab(&self.dec_self),
            dec_cross: grab(&self.dec_cross),
        }
    }
}

/// Detached copy of [`AttentionMaps`].
#[derive(Clone, Debug)]
pub struct AttentionMapSet {
    pub n_heads: usize,
    pub enc_self: Vec<Tensor>,
    pub dec_self: Vec<Tensor>,
    pub dec_cross: Vec<Tensor>,
}

impl AttentionMapSet {
    pub fn of(&self, kind: AttentionKind) -> &[Tensor] {
        match kind {
            AttentionKind::EncSelf => &self.enc_self,
            AttentionKind::DecSelf => &self.dec_self,
            AttentionKind::DecCross => &self.dec_cross,
        }
    }

    pub fn get(&self, kind: AttentionKind, layer: usize, head: usize) -> &Tensor {
        &self.of(kind)[layer * self.n_heads + head]
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    attn: AttnIds,
    norm1: NormIds,
    ffn: FfnIds,
    norm2: NormIds,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_attn: AttnIds,
    norm1: NormIds,
    cross_attn: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
    norm3: NormIds,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut dyn RngCore,
    normal: Normal<f64>,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = Tensor::from_fn(shape, |_| self.normal.sample(&mut *self.rng));
        self.params.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape))
    }

    fn attn(&mut self, prefix: &str, c: &ModelConfig) -> AttnIds {
        let (d, dh) = (c.d_model, c.d_head());
        let per_head = |m: &mut Self, proj: &str| -> Vec<ParamId> {
            (0..c.n_heads)
                .map(|h| m.normal(format!("{prefix}.w{proj}.{h}"), &[d, dh]))
                .collect()
        };
        let wq = per_head(self, "q");
        let wk = per_head(self, "k");
        let wv = per_head(self, "v");
        AttnIds {
            wq,
            wk,
            wv,
            wo: self.normal(format!("{prefix}.wo"), &[d, d]),
            bo: self.zeros(format!("{prefix}.bo"), &[d]),
        }
    }

    fn ffn(&mut self, prefix: &str, c: &ModelConfig) -> FfnIds {
        FfnIds {
            w1: self.normal(format!("{prefix}.w1"), &[c.d_model, c.d_ffn]),
            b1: self.zeros(format!("{prefix}.b1"), &[c.d_ffn]),
            w2: self.normal(format!("{prefix}.w2"), &[c.d_ffn, c.d_model]),
            b2: self.zeros(format!("{prefix}.b2"), &[c.d_model]),
        }
    }

    fn norm(&mut self, prefix: &str, c: &ModelConfig) -> NormIds {
        NormIds {
            gain: self
                .params
                .add(format!("{prefix}.gain"), Tensor::full(&[c.d_model], 1.0)),
            bias: self.zeros(format!("{prefix}.bias"), &[c.d_model]),
        }
    }
}

/// Per-call forward switches.
#[derive(Default)]
pub struct ForwardOptions<'r> {
    /// Bind parameters as trainable (gradient reaches them) or as constants.
    pub trainable: bool,
    /// When set and `dropout_rate > 0`, dropout is active.
    pub dropout_rng: Option<&'r mut dyn RngCore>,
}

impl<'r> ForwardOptions<'r> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'r mut dyn RngCore) -> Self {
        ForwardOptions {
            trainable: true,
            dropout_rng: Some(rng),
        }
    }

    pub fn trainable_no_dropout() -> Self {
        ForwardOptions {
            trainable: true,
            dropout_rng: None,
        }
    }
}

pub struct ForwardOutput {
    /// `[batch, L_tgt, vocab]`
    pub logits: Var,
    pub maps: AttentionMaps,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

struct Ctx<'m, 'r, 'o> {
    model: &'m Model,
    bound: Bound,
    dropout: Option<(f64, &'o mut (dyn RngCore + 'r))>,
}

impl Ctx<'_, '_, '_> {
    fn drop(&mut self, tape: &mut Tape, x: Var) -> Var {
        match &mut self.dropout {
            Some((rate, rng)) => tape.dropout(x, *rate, &mut **rng),
            None => x,
        }
    }

    fn p(&self, id: ParamId) -> Var {
        self.bound[id]
    }

    fn attention(
        &self,
        tape: &mut Tape,
        ids: &AttnIds,
        x_q: Var,
        x_kv: Var,
        mask: &Mask,
    ) -> Result<(Var, Vec<Var>)> {
        let dh = self.model.config.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(ids.wq.len());
        let mut maps = Vec::with_capacity(ids.wq.len());
        for h in 0..ids.wq.len() {
            let q = tape.matmul(x_q, self.p(ids.wq[h]))?;
            let k = tape.matmul(x_kv, self.p(ids.wk[h]))?;
            let v = tape.matmul(x_kv, self.p(ids.wv[h]))?;
            let kt = tape.transpose_last_two(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let map = tape.softmax_rows(scores, Some(mask))?;
            heads.push(tape.matmul(map, v)?);
            maps.push(map);
        }
        let cat = tape.concat_last_dim(&heads)?;
        let proj = tape.matmul(cat, self.p(ids.wo))?;
        Ok((tape.add(proj, self.p(ids.bo))?, maps))
    }

    fn ffn(&self, tape: &mut Tape, ids: &FfnIds, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.p(ids.w1))?;
        let h = tape.add(h, self.p(ids.b1))?;
        let h = tape.relu(h);
        let o = tape.matmul(h, self.p(ids.w2))?;
        tape.add(o, self.p(ids.b2))
    }

    fn residual_norm(&mut self, tape: &mut Tape, x: Var, sub: Var, n: NormIds) -> Result<Var> {
        let sub = self.drop(tape, sub);
        let sum = tape.add(x, sub)?;
        tape.layer_norm(sum, self.p(n.gain), self.p(n.bias), LAYER_NORM_EPS)
    }

    fn embed(&mut self, tape: &mut Tape, ids: &[usize], rows: usize, len: usize) -> Result<Var> {
        let c = &self.model.config;
        if len > c.max_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds max_len {}",
                c.max_len
            )));
        }
        let e = tape.embedding_lookup(self.p(self.model.layout.embed), ids, &[rows, len])?;
        let e = tape.scale(e, (c.d_model as f64).sqrt());
        let pe = tape.constant(&positional_encoding(len, c.d_model));
        let x = tape.add(e, pe)?;
        Ok(self.drop(tape, x))
    }

    fn encode(&mut self, tape: &mut Tape, src: &[usize], rows: usize, len: usize, src_mask: &Mask) -> Result<(Var, Vec<Var>)> {
        let mut x = self.embed(tape, src, rows, len)?;
        let mask = key_mask(src_mask, len, false)?;
        let mut maps = Vec::new();
        let model = self.model;
        for layer in &model.layout.enc {
            let (a, m) = self.attention(tape, &layer.attn, x, x, &mask)?;
            maps.extend(m);
            x = self.residual_norm(tape, x, a, layer.norm1)?;
            let f = self.ffn(tape, &layer.ffn, x)?;
            x = self.residual_norm(tape, x, f, layer.norm2)?;
        }
        Ok((x, maps))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &mut self,
        tape: &mut Tape,
        memory: Var,
        src_mask: &Mask,
        tgt_in: &[usize],
        rows: usize,
        len: usize,
        tgt_mask: &Mask,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let mut x = self.embed(tape, tgt_in, rows, len)?;
        let self_mask = key_mask(tgt_mask, len, true)?;
        let cross_mask = key_mask(src_mask, len, false)?;
        let (mut self_maps, mut cross_maps) = (Vec::new(), Vec::new());
        let model = self.model;
        for layer in &model.layout.dec {
            let (a, m) = self.attention(tape, &layer.self_attn, x, x, &self_mask)?;
            self_maps.extend(m);
            x = self.residual_norm(tape, x, a, layer.norm1)?;
            let (a, m) = self.attention(tape, &layer.cross_attn, x, memory, &cross_mask)?;
            cross_maps.extend(m);
            x = self.residual_norm(tape, x, a, layer.norm2)?;
            let f = self.ffn(tape, &layer.ffn, x)?;
            x = self.residual_norm(tape, x, f, layer.norm3)?;
        }
        let logits = tape.matmul(x, self.p(model.layout.out_w))?;
        let logits = tape.add(logits, self.p(model.layout.out_b))?;
        Ok((logits, self_maps, cross_maps))
    }
}

/// Key-validity mask `[batch, L_q, L_k]` a given attention type applies to
/// a batch.
pub fn attention_mask(kind: AttentionKind, batch: &Batch) -> Result<Mask> {
    match kind {
        AttentionKind::EncSelf => key_mask(&batch.src_mask, batch.src_len, false),
        AttentionKind::DecSelf => key_mask(&batch.tgt_mask, batch.tgt_len, true),
        AttentionKind::DecCross => key_mask(&batch.src_mask, batch.tgt_len, false),
    }
}

/// Query-row mask `[batch, L_q]` of a given attention type.
pub fn query_mask(kind: AttentionKind, batch: &Batch) -> &Mask {
    match kind {
        AttentionKind::EncSelf => &batch.src_mask,
        AttentionKind::DecSelf | AttentionKind::DecCross => &batch.tgt_mask,
    }
}

/// Attention mask `[batch, L_q, L_k]` from key validity `[batch, L_k]`,
/// optionally intersected with causality.
fn key_mask(keys: &Mask, l_q: usize, causal: bool) -> Result<Mask> {
    let (b, l_k) = match keys.shape() {
        [b, l] => (*b, *l),
        s => return Err(Error::dim("attention_mask", s, &[])),
    };
    Ok(Mask::from_fn(&[b, l_q, l_k], |i| {
        let (row, j) = (i / l_k, i % l_k);
        let (bi, qi) = (row / l_q, row % l_q);
        keys.data()[bi * l_k + j] && (!causal || j <= qi)
    }))
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
}

impl Model {
    /// Builds a freshly initialized model: `N(0, 0.02)` projections and
    /// embeddings, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let c = &config;
        let embed = b.normal("embed".into(), &[c.vocab_size, c.d_model]);
        let enc = (0..c.n_enc_layers)
            .map(|l| EncLayer {
                attn: b.attn(&format!("enc.{l}.self"), c),
                norm1: b.norm(&format!("enc.{l}.norm1"), c),
                ffn: b.ffn(&format!("enc.{l}.ffn"), c),
                norm2: b.norm(&format!("enc.{l}.norm2"), c),
            })
            .collect();
        let dec = (0..c.n_dec_layers)
            .map(|l| DecLayer {
                self_attn: b.attn(&format!("dec.{l}.self"), c),
                norm1: b.norm(&format!("dec.{l}.norm1"), c),
                cross_attn: b.attn(&format!("dec.{l}.cross"), c),
                norm2: b.norm(&format!("dec.{l}.norm2"), c),
                ffn: b.ffn(&format!("dec.{l}.ffn"), c),
                norm3: b.norm(&format!("dec.{l}.norm3"), c),
            })
            .collect();
        let out_w = b.normal("out.w".into(), &[c.d_model, c.vocab_size]);
        let out_b = b.zeros("out.b".into(), &[c.vocab_size]);
        let params = b.params;
        Ok(Model {
            config,
            params,
            layout: Layout {
                embed,
                enc,
                dec,
                out_w,
                out_b,
            },
        })
    }

    /// Rebuilds a model from named tensors; every expected name must be
    /// present with the expected shape.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Model> {
        let mut model = Model::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} model tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn ctx<'o, 'r>(&self, tape: &mut Tape, opts: &'o mut ForwardOptions<'r>) -> Ctx<'_, 'r, 'o> {
        let bound = tape.bind(&self.params, opts.trainable);
        let rate = self.config.dropout_rate;
        let dropout = match &mut opts.dropout_rng {
            Some(rng) if rate > 0.0 => Some((rate, &mut **rng)),
            _ => None,
        };
        Ctx {
            model: self,
            bound,
            dropout,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(Error::Input(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Teacher-forced forward pass over a batch.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, opts: &mut ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.check_ids(&batch.src_ids)?;
        self.check_ids(&batch.tgt_in_ids)?;
        let mut ctx = self.ctx(tape, opts);
        let (memory, enc_maps) =
            ctx.encode(tape, &batch.src_ids, batch.size, batch.src_len, &batch.src_mask)?;
        let (logits, dec_self, dec_cross) = ctx.decode(
            tape,
            memory,
            &batch.src_mask,
            &batch.tgt_in_ids,
            batch.size,
            batch.tgt_len,
            &batch.tgt_mask,
        )?;
        Ok(ForwardOutput {
            logits,
            maps: AttentionMaps {
                enc_self: enc_maps,
                dec_self,
                dec_cross,
            },
        })
    }

    /// Greedy decoding of one source sentence (ids without BOS/EOS).
    pub fn greedy_decode(&self, src: &[usize], max_steps: usize) -> Result<Vec<usize>> {
        Ok(self
            .greedy_decode_batch(&[src.to_vec()], max_steps)?
            .pop()
            .unwrap_or_default())
    }

    /// Batched greedy decoding. Each output stops before its first EOS and
    /// holds at most `min(max_steps, max_len)` tokens.
    pub fn greedy_decode_batch(&self, srcs: &[Vec<usize>], max_steps: usize) -> Result<Vec<Vec<usize>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let rows = srcs.len();
        let src_len = srcs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut src_ids = vec![crate::data::PAD; rows * src_len];
        let mut valid = vec![false; rows * src_len];
        for (r, s) in srcs.iter().enumerate() {
            self.check_ids(s)?;
            src_ids[r * src_len..r * src_len + s.len()].copy_from_slice(s);
            valid[r * src_len..r * src_len + s.len()].iter_mut().for_each(|v| *v = true);
            if s.is_empty() {
                // An empty source still needs one attendable key.
                src_ids[r * src_len] = EOS;
                valid[r * src_len] = true;
            }
        }
        let src_mask = Mask::new(&[rows, src_len], valid)?;
        let steps = max_steps.min(self.config.max_len);

        let mut tape = Tape::new();
        let mut opts = ForwardOptions::eval();
        let mut ctx = self.ctx(&mut tape, &mut opts);
        let (memory, _) = ctx.encode(&mut tape, &src_ids, rows, src_len, &src_mask)?;
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); rows];
        let mut done = vec![false; rows];
        let mut prefix: Vec<Vec<usize>> = vec![vec![BOS]; rows];
        let vocab = self.config.vocab_size;
        for _ in 0..steps {
            let len = prefix[0].len();
            let tgt_in: Vec<usize> = prefix.iter().flatten().copied().collect();
            let tgt_mask = Mask::all(&[rows, len]);
            let (logits, _, _) =
                ctx.decode(&mut tape, memory, &src_mask, &tgt_in, rows, len, &tgt_mask)?;
            let lv = tape.value(logits);
            for r in 0..rows {
                let at = (r * len + len - 1) * vocab;
                let next = argmax(&lv[at..at + vocab]);
                prefix[r].push(next);
                if !done[r] {
                    if next == EOS {
                        done[r] = true;
                    } else {
                        out[r].push(next);
                    }
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
