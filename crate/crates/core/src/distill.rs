//! Attention Alignment Modules and the distillation objective.
//!
//! An alignment module mixes the `K` student attention maps of one stack into
//! `C` intermediate maps, one per teacher map, with a pointwise (1×1)
//! convolution: `H^I_c = Σ_k w[c,k] · H^S_k + b_c`. Each intermediate map is
//! then compared to its teacher map with a row-wise KL divergence, and the
//! stacks are combined as `L_enc + ½(L_dec_self + L_dec_cross)`.
//!
//! Student map order is layer-major, head-minor: input channel
//! `k = layer · heads + head`. Teacher channels use the same convention.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{batchify, Batch, ParallelCorpus, Vocab, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Mask, ParamId, ParamSet, Tape, Tensor, Var, KL_EPS};
use crate::transformer::{self, AttentionKind, AttentionMaps, ForwardOptions, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_att: f64,
    pub mu_kd: f64,
    pub lambda_decay: f64,
    pub apply_enc_self: bool,
    pub apply_dec_self: bool,
    pub apply_dec_cross: bool,
    pub layerwise_variant: bool,
    pub kd_temperature: f64,
    /// Renormalize intermediate rows onto the simplex before the KL. Off by
    /// default: the bias term may leave rows unnormalized and `q` is only
    /// clamped at `KL_EPS`.
    pub renormalize_intermediate: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_att: 1.0,
            mu_kd: 1.0,
            lambda_decay: 0.9,
            apply_enc_self: true,
            apply_dec_self: true,
            apply_dec_cross: true,
            layerwise_variant: false,
            kd_temperature: 1.0,
            renormalize_intermediate: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_att", self.lambda_att), ("mu_kd", self.mu_kd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("distill.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return Err(Error::Config(format!(
                "distill.lambda_decay must be in (0, 1], got {}",
                self.lambda_decay
            )));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "distill.kd_temperature must be > 0, got {}",
                self.kd_temperature
            )));
        }
        Ok(())
    }

    pub fn applies(&self, kind: AttentionKind) -> bool {
        match kind {
            AttentionKind::EncSelf => self.apply_enc_self,
            AttentionKind::DecSelf => self.apply_dec_self,
            AttentionKind::DecCross => self.apply_dec_cross,
        }
    }

    /// Enables exactly the listed stacks.
    pub fn set_parts(&mut self, parts: &[AttentionKind]) {
        self.apply_enc_self = parts.contains(&AttentionKind::EncSelf);
        self.apply_dec_self = parts.contains(&AttentionKind::DecSelf);
        self.apply_dec_cross = parts.contains(&AttentionKind::DecCross);
    }

    /// Stack coefficients of the combined attention loss. The decoder terms
    /// share a ½ weight; a decoder stack enabled alone gets weight 1.
    pub fn stack_weights(&self) -> Result<[f64; 3]> {
        if !(self.apply_enc_self || self.apply_dec_self || self.apply_dec_cross) {
            return Err(Error::Config("all attention stacks are disabled".into()));
        }
        let dec = if self.apply_dec_self && self.apply_dec_cross { 0.5 } else { 1.0 };
        Ok([
            if self.apply_enc_self { 1.0 } else { 0.0 },
            if self.apply_dec_self { dec } else { 0.0 },
            if self.apply_dec_cross { dec } else { 0.0 },
        ])
    }
}

/// Combines per-stack attention losses `[enc_self, dec_self, dec_cross]`.
pub fn combine_stack_losses(components: [f64; 3], cfg: &DistillConfig) -> Result<f64> {
    let w = cfg.stack_weights()?;
    Ok(w[0] * components[0] + w[1] * components[1] + w[2] * components[2])
}

/// Trainable scalars of one alignment module: `M·N·C` weights plus `C` biases.
pub fn aam_param_count(student_heads: usize, student_layers: usize, teacher_maps: usize) -> usize {
    student_heads * student_layers * teacher_maps + teacher_maps
}

/// Geometry of one alignment module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AamShape {
    pub kind: AttentionKind,
    pub student_layers: usize,
    pub student_heads: usize,
    pub teacher_layers: usize,
    pub teacher_heads: usize,
    pub layerwise: bool,
}

impl AamShape {
    pub fn new(kind: AttentionKind, student: &ModelConfig, teacher: &ModelConfig, layerwise: bool) -> Self {
        let layers = |c: &ModelConfig| match kind {
            AttentionKind::EncSelf => c.n_enc_layers,
            _ => c.n_dec_layers,
        };
        AamShape {
            kind,
            student_layers: layers(student),
            student_heads: student.n_heads,
            teacher_layers: layers(teacher),
            teacher_heads: teacher.n_heads,
            layerwise,
        }
    }

    /// Input channels `K` (student maps fed to the module).
    pub fn inputs(&self) -> usize {
        if self.layerwise {
            self.student_layers
        } else {
            self.student_layers * self.student_heads
        }
    }

    /// Output channels `C` (teacher maps matched).
    pub fn outputs(&self) -> usize {
        if self.layerwise {
            self.teacher_layers
        } else {
            self.teacher_layers * self.teacher_heads
        }
    }

    /// Row labels (`t<layer>.<head>`, or `t<layer>` layer-wise).
    pub fn teacher_labels(&self) -> Vec<String> {
        labels('t', self.teacher_layers, self.teacher_heads, self.layerwise)
    }

    pub fn student_labels(&self) -> Vec<String> {
        labels('s', self.student_layers, self.student_heads, self.layerwise)
    }
}

fn labels(prefix: char, layers: usize, heads: usize, layerwise: bool) -> Vec<String> {
    if layerwise {
        return (0..layers).map(|l| format!("{prefix}{l}")).collect();
    }
    (0..layers)
        .flat_map(|l| (0..heads).map(move |h| format!("{prefix}{l}.{h}")))
        .collect()
}

#[derive(Clone, Debug)]
pub struct AamModule {
    pub shape: AamShape,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Alignment modules for every enabled stack. Training-only: nothing here is
/// needed by the student at inference.
#[derive(Clone, Debug)]
pub struct AamParams {
    params: ParamSet,
    modules: Vec<AamModule>,
}

impl AamParams {
    /// Uniform initialization `w = 1/K`, `b = 0`: each initial intermediate
    /// map is the mean of the student maps.
    pub fn new(student: &ModelConfig, teacher: &ModelConfig, cfg: &DistillConfig) -> Result<Self> {
        cfg.stack_weights()?;
        let shapes = AttentionKind::ALL
            .into_iter()
            .filter(|&k| cfg.applies(k))
            .map(|k| AamShape::new(k, student, teacher, cfg.layerwise_variant));
        Ok(Self::with_shapes(shapes))
    }

    pub fn with_shapes(shapes: impl IntoIterator<Item = AamShape>) -> Self {
        let mut params = ParamSet::new();
        let modules = shapes
            .into_iter()
            .map(|shape| {
                let (c, k) = (shape.outputs(), shape.inputs());
                let name = shape.kind.name();
                let weight = params.add(format!("aam.{name}.w"), Tensor::full(&[c, k], 1.0 / k as f64));
                let bias = params.add(format!("aam.{name}.b"), Tensor::zeros(&[c]));
                AamModule { shape, weight, bias }
            })
            .collect();
        AamParams { params, modules }
    }

    /// Rebuilds from stored shapes and named tensors.
    pub fn from_named(shapes: &[AamShape], named: &[(String, Tensor)]) -> Result<Self> {
        let mut aams = Self::with_shapes(shapes.iter().copied());
        if named.len() != aams.params.len() {
            return Err(Error::Format(format!(
                "expected {} alignment tensors, found {}",
                aams.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = aams
                .params
                .find(name)
                .ok_or_else(|| Error::Format(format!("unexpected alignment tensor `{name}`")))?;
            let slot = aams.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("alignment tensor `{name}` has wrong shape {:?}", t.shape())));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(aams)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn modules(&self) -> &[AamModule] {
        &self.modules
    }

    pub fn module(&self, kind: AttentionKind) -> Option<&AamModule> {
        self.modules.iter().find(|m| m.shape.kind == kind)
    }

    pub fn shapes(&self) -> Vec<AamShape> {
        self.modules.iter().map(|m| m.shape).collect()
    }

    /// `[C, K]` weight matrix of a stack.
    pub fn weight(&self, kind: AttentionKind) -> Option<&Tensor> {
        self.module(kind).map(|m| self.params.get(m.weight))
    }
}

/// Applies one alignment module to `K` equally shaped maps `[batch, r, c]`
/// and returns the `C` intermediate maps stacked as `[C, batch, r, c]`.
pub fn aam_forward_stacked(tape: &mut Tape, student_maps: &[Var], weight: Var, bias: Var) -> Result<Var> {
    let ws = tape.shape(weight).to_vec();
    if ws.len() != 2 || ws[1] != student_maps.len() {
        return Err(Error::Config(format!(
            "alignment module expects {} student maps, got {}",
            ws.get(1).copied().unwrap_or(0),
            student_maps.len()
        )));
    }
    let c = ws[0];
    if tape.shape(bias) != [c] {
        return Err(Error::dim("aam_forward", &ws, tape.shape(bias)));
    }
    let map_shape = tape.shape(student_maps[0]).to_vec();
    let plane: usize = map_shape.iter().product();
    let stacked = tape.stack(student_maps)?;
    let flat = tape.reshape(stacked, &[student_maps.len(), plane])?;
    let mixed = tape.matmul(weight, flat)?;
    let b = tape.reshape(bias, &[c, 1])?;
    let mixed = tape.add(mixed, b)?;
    let mut out_shape = vec![c];
    out_shape.extend(map_shape);
    tape.reshape(mixed, &out_shape)
}

/// Intermediate maps `H^I_c = Σ_k w[c,k] · H^S_k + b_c`, one per teacher map.
pub fn aam_forward(tape: &mut Tape, student_maps: &[Var], weight: Var, bias: Var) -> Result<Vec<Var>> {
    let stacked = aam_forward_stacked(tape, student_maps, weight, bias)?;
    let c = tape.shape(stacked)[0];
    (0..c).map(|i| tape.select(stacked, i)).collect()
}

/// `Σ_c KL(H^T_c ‖ H^I_c)`, each term averaged over the active query rows of
/// the batch.
pub fn attention_transfer_loss(
    tape: &mut Tape,
    teacher_maps: &[Var],
    intermediate_maps: &[Var],
    row_mask: &Mask,
) -> Result<Var> {
    if teacher_maps.len() != intermediate_maps.len() || teacher_maps.is_empty() {
        return Err(Error::Config(format!(
            "{} teacher maps vs {} intermediate maps",
            teacher_maps.len(),
            intermediate_maps.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&t, &i) in teacher_maps.iter().zip(intermediate_maps) {
        let kl = tape.kl_rows(t, i, Some(row_mask))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, kl)?,
            None => kl,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Head-mean map of each layer: `K = layers·heads` maps in, `layers` out.
pub fn layerwise_maps(tape: &mut Tape, maps: &[Var], n_layers: usize, n_heads: usize) -> Result<Vec<Var>> {
    if maps.len() != n_layers * n_heads {
        return Err(Error::Config(format!(
            "{} maps for {n_layers} layers x {n_heads} heads",
            maps.len()
        )));
    }
    maps.chunks(n_heads)
        .map(|layer| {
            let mut acc = layer[0];
            for &m in &layer[1..] {
                acc = tape.add(acc, m)?;
            }
            Ok(tape.scale(acc, 1.0 / n_heads as f64))
        })
        .collect()
}

/// Per-stack attention losses and their combination.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionLosses {
    /// `[enc_self, dec_self, dec_cross]`; zero for disabled stacks.
    pub components: [f64; 3],
    pub combined: f64,
}

/// Combined attention-transfer loss over every enabled stack.
#[allow(clippy::too_many_arguments)]
pub fn combined_attention_loss(
    tape: &mut Tape,
    batch: &Batch,
    teacher_maps: &AttentionMaps,
    student_maps: &AttentionMaps,
    teacher_cfg: &ModelConfig,
    student_cfg: &ModelConfig,
    aams: &AamParams,
    cfg: &DistillConfig,
) -> Result<(Var, AttentionLosses)> {
    let weights = cfg.stack_weights()?;
    let bound = tape.bind(aams.params(), true);
    let mut losses = AttentionLosses::default();
    let mut total: Option<Var> = None;
    for (slot, kind) in AttentionKind::ALL.into_iter().enumerate() {
        if !cfg.applies(kind) {
            continue;
        }
        let module = aams
            .module(kind)
            .ok_or_else(|| Error::Config(format!("no alignment module for {}", kind.name())))?;
        let (t_maps, s_maps) = (teacher_maps.of(kind), student_maps.of(kind));
        assert_eq!(
            tape.shape(t_maps[0]),
            tape.shape(s_maps[0]),
            "teacher and student saw different batches"
        );
        let (t_maps, s_maps) = if module.shape.layerwise {
            let tl = layerwise_maps(tape, t_maps, module.shape.teacher_layers, teacher_cfg.n_heads)?;
            let sl = layerwise_maps(tape, s_maps, module.shape.student_layers, student_cfg.n_heads)?;
            (tl, sl)
        } else {
            (t_maps.to_vec(), s_maps.to_vec())
        };
        let mut inter = aam_forward(tape, &s_maps, bound[module.weight], bound[module.bias])?;
        if cfg.renormalize_intermediate {
            let keys = transformer::attention_mask(kind, batch)?;
            inter = inter
                .into_iter()
                .map(|m| tape.normalize_rows(m, Some(&keys), KL_EPS))
                .collect::<Result<_>>()?;
        }
        let rows = transformer::query_mask(kind, batch);
        let loss = attention_transfer_loss(tape, &t_maps, &inter, rows)?;
        losses.components[slot] = tape.item(loss);
        let weighted = tape.scale(loss, weights[slot]);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("at least one stack enabled");
    losses.combined = tape.item(total);
    Ok((total, losses))
}

/// Response distillation: `T² · mean_rows(−Σ softmax(z_T/T) · log_softmax(z_S/T))`
/// over non-pad target positions.
pub fn vanilla_kd_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    tgt_mask: &Mask,
    temperature: f64,
) -> Result<Var> {
    if tape.shape(student_logits) != tape.shape(teacher_logits) {
        return Err(Error::dim(
            "vanilla_kd_loss",
            tape.shape(student_logits),
            tape.shape(teacher_logits),
        ));
    }
    let inv_t = 1.0 / temperature;
    let t = tape.scale(teacher_logits, inv_t);
    let p_teacher = tape.softmax_rows(t, None)?;
    let s = tape.scale(student_logits, inv_t);
    let ce = tape.soft_cross_entropy(s, p_teacher, Some(tgt_mask))?;
    Ok(tape.scale(ce, temperature * temperature))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossMetrics {
    pub ce: f64,
    pub att: AttentionLosses,
    pub kd: f64,
    pub lambda: f64,
    pub mu: f64,
    pub total: f64,
}

/// Teacher-side inputs of the objective.
pub struct TeacherRef<'a> {
    pub model: &'a Model,
    pub aams: &'a AamParams,
}

/// `L_CE + λ·L_att + μ·L_KD` for one batch.
///
/// The teacher is bound as constants and runs without dropout. With
/// `λ = μ = 0` (or no teacher) the teacher is not evaluated at all and the
/// returned node is the cross-entropy node itself.
pub fn total_loss(
    tape: &mut Tape,
    batch: &Batch,
    student: &Model,
    teacher: Option<TeacherRef<'_>>,
    cfg: &DistillConfig,
    lambda: f64,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(Var, LossMetrics)> {
    let mut opts = ForwardOptions {
        trainable: true,
        dropout_rng,
    };
    let s = student.forward(tape, batch, &mut opts)?;
    let ce = tape.cross_entropy(s.logits, &batch.tgt_out_ids, PAD)?;
    let mut metrics = LossMetrics {
        ce: tape.item(ce),
        lambda,
        mu: cfg.mu_kd,
        ..Default::default()
    };
    let mut loss = ce;
    let teacher = match teacher {
        Some(t) if lambda > 0.0 || cfg.mu_kd > 0.0 => t,
        _ => {
            metrics.total = metrics.ce;
            return Ok((loss, metrics));
        }
    };
    if student.config().vocab_size != teacher.model.config().vocab_size {
        return Err(Error::Config("teacher and student vocabularies differ".into()));
    }
    let t = teacher.model.forward(tape, batch, &mut ForwardOptions::eval())?;
    if lambda > 0.0 {
        let (att, losses) = combined_attention_loss(
            tape,
            batch,
            &t.maps,
            &s.maps,
            teacher.model.config(),
            student.config(),
            teacher.aams,
            cfg,
        )?;
        metrics.att = losses;
        let att = tape.scale(att, lambda);
        loss = tape.add(loss, att)?;
    }
    if cfg.mu_kd > 0.0 {
        let kd = vanilla_kd_loss(tape, s.logits, t.logits, &batch.tgt_mask, cfg.kd_temperature)?;
        metrics.kd = tape.item(kd);
        let kd = tape.scale(kd, cfg.mu_kd);
        loss = tape.add(loss, kd)?;
    }
    metrics.total = tape.item(loss);
    Ok((loss, metrics))
}

/// Attention-transfer loss of a trained student and its alignment modules
/// on `corpus`, averaged over batches. Both models run without dropout.
pub fn held_out_attention_loss(
    teacher: &Model,
    student: &Model,
    aams: &AamParams,
    cfg: &DistillConfig,
    corpus: &ParallelCorpus,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<AttentionLosses> {
    let batches = batchify(corpus, batch_size, vocab, None, student.config().max_len)?;
    let mut sum = AttentionLosses::default();
    for batch in &batches {
        let mut tape = Tape::new();
        let t = teacher.forward(&mut tape, batch, &mut ForwardOptions::eval())?;
        let s = student.forward(&mut tape, batch, &mut ForwardOptions::eval())?;
        let (_, l) = combined_attention_loss(
            &mut tape,
            batch,
            &t.maps,
            &s.maps,
            teacher.config(),
            student.config(),
            aams,
            cfg,
        )?;
        for (acc, v) in sum.components.iter_mut().zip(l.components) {
            *acc += v;
        }
        sum.combined += l.combined;
    }
    let n = batches.len() as f64;
    sum.components.iter_mut().for_each(|v| *v /= n);
    sum.combined /= n;
    Ok(sum)
}
