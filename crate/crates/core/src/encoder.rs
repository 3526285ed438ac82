//! The pretraining model: embeddings, stacked post-LN encoder layers, and
//! the MLM and NSP heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_on_tape, attention_scores, AttentionConfig, Dropout, HeadVars, RelBinding};
use crate::data::PretrainExample;
use crate::error::{Error, Result};
use crate::numerics::{Arith, Gradients, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::posenc::{check_position, RelBanks, RelPositionTable, SchemeKind, DEFAULT_PRPE_CLIP, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    /// PAPE table rows; initial FRPE table reach.
    pub max_position: usize,
    pub scheme: SchemeKind,
    pub prpe_clip: usize,
    /// Also add learned absolute embeddings under a relative scheme.
    pub add_absolute_input_embeddings: bool,
    pub type_vocab_size: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk(256, SchemeKind::Frpe)
    }
}

impl EncoderConfig {
    /// Desk-scale model: 64 hidden, 2 layers, 2 heads, no dropout.
    pub fn desk(vocab_size: usize, scheme: SchemeKind) -> Self {
        Self {
            vocab_size,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 256,
            max_position: 128,
            scheme,
            prpe_clip: DEFAULT_PRPE_CLIP,
            add_absolute_input_embeddings: false,
            type_vocab_size: 2,
            hidden_dropout: 0.0,
            attention_dropout: 0.0,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }

    /// Full-scale base configuration (not exercised at desk scale).
    pub fn base() -> Self {
        Self {
            vocab_size: 21_128,
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            intermediate_size: 3072,
            max_position: 512,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            ..Self::desk(21_128, SchemeKind::Frpe)
        }
    }

    /// Full-scale large configuration (not exercised at desk scale).
    pub fn large() -> Self {
        Self {
            hidden_size: 1024,
            num_layers: 24,
            num_heads: 16,
            intermediate_size: 4096,
            ..Self::base()
        }
    }

    pub fn d_z(&self) -> usize {
        self.hidden_size / self.num_heads.max(1)
    }

    pub fn uses_absolute(&self) -> bool {
        self.scheme == SchemeKind::Pape || self.add_absolute_input_embeddings
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.num_heads,
            d_model: self.hidden_size,
            scheme: self.scheme,
            attention_dropout: self.attention_dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.vocab_size < 6 || self.num_layers == 0 || self.intermediate_size == 0 {
            return Err(Error::Config(
                "vocab size must be >= 6 and layer/FFN sizes positive".into(),
            ));
        }
        if self.type_vocab_size != 2 {
            return Err(Error::Config("type vocabulary must have exactly 2 entries".into()));
        }
        if self.max_position == 0 {
            return Err(Error::Config("max position must be positive".into()));
        }
        if self.scheme == SchemeKind::Prpe && self.prpe_clip == 0 {
            return Err(Error::Config("PRPE clip distance must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.hidden_dropout) {
            return Err(Error::Config("hidden dropout must lie in [0, 1)".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer-norm eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
    output_bias: ParamId,
    attn_ln: (ParamId, ParamId),
    inner: ParamId,
    inner_bias: ParamId,
    outer: ParamId,
    outer_bias: ParamId,
    ffn_ln: (ParamId, ParamId),
    rel: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct ModelIds {
    word: ParamId,
    segment: ParamId,
    position: Option<ParamId>,
    emb_ln: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    mlm_dense: ParamId,
    mlm_bias: ParamId,
    mlm_ln: (ParamId, ParamId),
    mlm_out_bias: ParamId,
    pooler: ParamId,
    pooler_bias: ParamId,
    nsp: ParamId,
    nsp_bias: ParamId,
}

/// Model structure: configuration, parameter layout and the fixed FRPE
/// table. Parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    ids: ModelIds,
    frpe: Option<RelPositionTable>,
}

/// Forward results for one example.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub sequence: Tensor,
    pub pooled: Tensor,
    /// One row per prediction position; `None` when there are none.
    pub mlm_logits: Option<Tensor>,
    pub nsp_logits: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct ForwardVars {
    sequence: Var,
    pooled: Var,
    mlm_logits: Option<Var>,
    nsp_logits: Var,
}

/// Loss parts and counts for one example or an aggregate.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub mlm: f64,
    pub nsp: f64,
    pub mlm_correct: usize,
    pub mlm_count: usize,
    pub nsp_correct: usize,
    pub examples: usize,
}

impl LossReport {
    pub fn mlm_accuracy(&self) -> f64 {
        if self.mlm_count == 0 {
            0.0
        } else {
            self.mlm_correct as f64 / self.mlm_count as f64
        }
    }

    pub fn nsp_accuracy(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.nsp_correct as f64 / self.examples as f64
        }
    }

    /// Sums counts and losses; divide with [`LossReport::mean`].
    fn absorb(&mut self, other: &LossReport) {
        self.total += other.total;
        self.mlm += other.mlm;
        self.nsp += other.nsp;
        self.mlm_correct += other.mlm_correct;
        self.mlm_count += other.mlm_count;
        self.nsp_correct += other.nsp_correct;
        self.examples += other.examples;
    }

    fn mean(mut self) -> Self {
        if self.examples > 0 {
            let n = self.examples as f64;
            self.total /= n;
            self.mlm /= n;
            self.nsp /= n;
        }
        self
    }
}

/// Hidden-state and attention-probability dropout for one example.
pub struct DropoutCtx {
    pub hidden: Dropout,
    pub attention: Dropout,
}

impl DropoutCtx {
    pub fn new(config: &EncoderConfig, seed: u64) -> Option<Self> {
        (config.hidden_dropout > 0.0 || config.attention_dropout > 0.0).then(|| Self {
            hidden: Dropout {
                rate: config.hidden_dropout,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            attention: Dropout {
                rate: config.attention_dropout,
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a77e),
            },
        })
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.hidden.rate <= 0.0 {
            return Ok(x);
        }
        let mask = self.hidden.mask(tape.value(x).len());
        tape.dropout(x, mask)
    }
}

fn add_matrix(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamId> {
    store.add(name, Tensor::randn(&[rows, cols], INIT_STD, rng), false)
}

fn add_ln(store: &mut ParamStore, prefix: &str, d: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        store.add(format!("{prefix}.gamma"), Tensor::filled(&[d], 1.0), true)?,
        store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]), true)?,
    ))
}

fn add_bias(store: &mut ParamStore, name: String, d: usize) -> Result<ParamId> {
    store.add(name, Tensor::zeros(&[d]), true)
}

impl Encoder {
    /// Builds the layout and randomly initialised parameters.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.hidden_size;
        let d_z = config.d_z();
        let word = add_matrix(&mut s, "embeddings.word".into(), config.vocab_size, d, &mut rng)?;
        let segment = add_matrix(&mut s, "embeddings.segment".into(), config.type_vocab_size, d, &mut rng)?;
        let position = if config.uses_absolute() {
            Some(add_matrix(&mut s, "embeddings.position".into(), config.max_position, d, &mut rng)?)
        } else {
            None
        };
        let emb_ln = add_ln(&mut s, "embeddings.ln", d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layer{l}");
            let query = add_matrix(&mut s, format!("{p}.attn.query"), d, d, &mut rng)?;
            let key = add_matrix(&mut s, format!("{p}.attn.key"), d, d, &mut rng)?;
            let value = add_matrix(&mut s, format!("{p}.attn.value"), d, d, &mut rng)?;
            let output = add_matrix(&mut s, format!("{p}.attn.output"), d, d, &mut rng)?;
            let output_bias = add_bias(&mut s, format!("{p}.attn.output_bias"), d)?;
            let rel = if config.scheme == SchemeKind::Prpe {
                let rows = 2 * config.prpe_clip + 1;
                Some((
                    add_matrix(&mut s, format!("{p}.rel.key"), rows, d_z, &mut rng)?,
                    add_matrix(&mut s, format!("{p}.rel.value"), rows, d_z, &mut rng)?,
                ))
            } else {
                None
            };
            let attn_ln = add_ln(&mut s, &format!("{p}.attn.ln"), d)?;
            let f = config.intermediate_size;
            let inner = add_matrix(&mut s, format!("{p}.ffn.inner"), d, f, &mut rng)?;
            let inner_bias = add_bias(&mut s, format!("{p}.ffn.inner_bias"), f)?;
            let outer = add_matrix(&mut s, format!("{p}.ffn.outer"), f, d, &mut rng)?;
            let outer_bias = add_bias(&mut s, format!("{p}.ffn.outer_bias"), d)?;
            let ffn_ln = add_ln(&mut s, &format!("{p}.ffn.ln"), d)?;
            layers.push(LayerIds {
                query,
                key,
                value,
                output,
                output_bias,
                attn_ln,
                inner,
                inner_bias,
                outer,
                outer_bias,
                ffn_ln,
                rel,
            });
        }
        let mlm_dense = add_matrix(&mut s, "mlm.dense".into(), d, d, &mut rng)?;
        let mlm_bias = add_bias(&mut s, "mlm.dense_bias".into(), d)?;
        let mlm_ln = add_ln(&mut s, "mlm.ln", d)?;
        let mlm_out_bias = add_bias(&mut s, "mlm.output_bias".into(), config.vocab_size)?;
        let pooler = add_matrix(&mut s, "pooler.dense".into(), d, d, &mut rng)?;
        let pooler_bias = add_bias(&mut s, "pooler.bias".into(), d)?;
        let nsp = add_matrix(&mut s, "nsp.classifier".into(), d, 2, &mut rng)?;
        let nsp_bias = add_bias(&mut s, "nsp.bias".into(), 2)?;
        let frpe = if config.scheme == SchemeKind::Frpe {
            Some(RelPositionTable::frpe(config.max_position, d_z)?)
        } else {
            None
        };
        let ids = ModelIds {
            word,
            segment,
            position,
            emb_ln,
            layers,
            mlm_dense,
            mlm_bias,
            mlm_ln,
            mlm_out_bias,
            pooler,
            pooler_bias,
            nsp,
            nsp_bias,
        };
        Ok((Self { config, ids, frpe }, s))
    }

    /// Checks that `params` has exactly this model's layout.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let (_, reference) = Self::init(self.config.clone(), 0)?;
        if params.len() != reference.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for ((_, want), (_, got)) in reference.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {} with shape {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn frpe_table(&self) -> Option<&RelPositionTable> {
        self.frpe.as_ref()
    }

    pub fn word_embedding_id(&self) -> ParamId {
        self.ids.word
    }

    pub fn position_embedding_id(&self) -> Option<ParamId> {
        self.ids.position
    }

    /// Token + segment (+ absolute position) embeddings, layer-normalised.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        tokens: &[u32],
        segments: &[u8],
        dropout: Option<&mut DropoutCtx>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if tokens.len() != segments.len() {
            return Err(Error::Input(format!(
                "{} tokens but {} segment ids",
                tokens.len(),
                segments.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Input("empty sequence".into()));
        }
        if let Some((i, t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} at position {i} exceeds vocabulary size {}",
                cfg.vocab_size
            )));
        }
        if let Some((i, s)) = segments
            .iter()
            .enumerate()
            .find(|(_, &s)| s as usize >= cfg.type_vocab_size)
        {
            return Err(Error::Input(format!("segment id {s} at position {i} out of range")));
        }
        let tok_idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let seg_idx: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
        let word = tape.param(self.ids.word, params);
        let seg = tape.param(self.ids.segment, params);
        let w = tape.gather_rows(word, &tok_idx)?;
        let s = tape.gather_rows(seg, &seg_idx)?;
        let mut x = tape.add(w, s)?;
        if let Some(pos_id) = self.ids.position {
            check_position(tokens.len() - 1, cfg.max_position)?;
            let pos = tape.param(pos_id, params);
            let positions: Vec<usize> = (0..tokens.len()).collect();
            let p = tape.gather_rows(pos, &positions)?;
            x = tape.add(x, p)?;
        }
        let x = self.layer_norm(tape, params, x, self.ids.emb_ln)?;
        match dropout {
            Some(d) => d.apply(tape, x),
            None => Ok(x),
        }
    }

    fn layer_norm(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        (gamma, beta): (ParamId, ParamId),
    ) -> Result<Var> {
        let g = tape.param(gamma, params);
        let b = tape.param(beta, params);
        tape.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    fn dense(&self, tape: &mut Tape, params: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(w, params);
        let bv = tape.param(b, params);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    /// Pre-softmax scores `e_ij` of every head of `layer` for one unmasked
    /// sequence, computed from that layer's input.
    pub fn attention_scores(
        &self,
        params: &ParamStore,
        layer: usize,
        tokens: &[u32],
        segments: &[u8],
    ) -> Result<Vec<Tensor>> {
        if layer >= self.config.num_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.config.num_layers,
            });
        }
        let n = tokens.len();
        let mut tape = Tape::new();
        let mut x = self.embed_on_tape(&mut tape, params, tokens, segments, None)?;
        let frpe = self.frpe_binding(&mut tape, n)?;
        for l in 0..layer {
            x = self.encoder_layer_on_tape(&mut tape, params, l, x, frpe.as_ref(), None, None)?;
        }
        let ids = &self.ids.layers[layer];
        let x = tape.value(x);
        let q = x.matmul(params.value(ids.query))?;
        let k = x.matmul(params.value(ids.key))?;
        let table = match ids.rel {
            Some((key, value)) => Some(RelPositionTable {
                d_z: self.config.d_z(),
                banks: RelBanks::Learned {
                    key: params.value(key).clone(),
                    value: params.value(value).clone(),
                    clip: self.config.prpe_clip,
                },
            }),
            None => self.frpe.clone(),
        };
        let d_z = self.config.d_z();
        let cols = |m: &Tensor, h: usize| -> Result<Tensor> {
            let data = (0..n).flat_map(|i| m.row(i)[h * d_z..(h + 1) * d_z].to_vec()).collect();
            Tensor::new(vec![n, d_z], data)
        };
        (0..self.config.num_heads)
            .map(|h| attention_scores(&cols(&q, h)?, &cols(&k, h)?, table.as_ref(), &vec![true; n]))
            .collect()
    }

    /// Shared FRPE binding for a sequence of length `n`, if any.
    fn frpe_binding(&self, tape: &mut Tape, n: usize) -> Result<Option<RelBinding>> {
        self.frpe
            .as_ref()
            .map(|t| RelBinding::constant(tape, t, n))
            .transpose()
    }

    /// `y = LN(x + MHA(x))`, `out = LN(y + FFN(y))`.
    #[allow(clippy::too_many_arguments)]
    pub fn encoder_layer_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        layer: usize,
        x: Var,
        frpe: Option<&RelBinding>,
        mask: Option<&Tensor>,
        mut dropout: Option<&mut DropoutCtx>,
    ) -> Result<Var> {
        let ids = &self.ids.layers[layer];
        let n = tape.value(x).rows();
        let heads = HeadVars {
            query: tape.param(ids.query, params),
            key: tape.param(ids.key, params),
            value: tape.param(ids.value, params),
            output: tape.param(ids.output, params),
            output_bias: tape.param(ids.output_bias, params),
        };
        let learned;
        let rel = match ids.rel {
            Some((k, v)) => {
                learned = RelBinding::learned(tape, params, k, v, self.config.prpe_clip, n)?;
                Some(&learned)
            }
            None => frpe,
        };
        let attn = attention_on_tape(
            tape,
            x,
            &heads,
            &self.config.attention(),
            rel,
            mask,
            dropout.as_deref_mut().map(|d| &mut d.attention),
        )?;
        let attn = match dropout.as_deref_mut() {
            Some(d) => d.apply(tape, attn)?,
            None => attn,
        };
        let res = tape.add(x, attn)?;
        let y = self.layer_norm(tape, params, res, ids.attn_ln)?;
        let h = self.dense(tape, params, y, ids.inner, ids.inner_bias)?;
        let h = tape.gelu(h);
        let f = self.dense(tape, params, h, ids.outer, ids.outer_bias)?;
        let f = match dropout {
            Some(d) => d.apply(tape, f)?,
            None => f,
        };
        let res = tape.add(y, f)?;
        self.layer_norm(tape, params, res, ids.ffn_ln)
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        example: &PretrainExample,
        mut dropout: Option<&mut DropoutCtx>,
    ) -> Result<ForwardVars> {
        let n = example.tokens.len();
        if let Some(&p) = example.predict_positions.iter().find(|&&p| p >= n) {
            return Err(Error::OutOfRange {
                what: "prediction position",
                index: p,
                limit: n,
            });
        }
        let mut x = self.embed_on_tape(
            tape,
            params,
            &example.tokens,
            &example.segments,
            dropout.as_deref_mut(),
        )?;
        let frpe = self.frpe_binding(tape, n)?;
        for l in 0..self.config.num_layers {
            x = self.encoder_layer_on_tape(tape, params, l, x, frpe.as_ref(), None, dropout.as_deref_mut())?;
        }
        let ids = &self.ids;
        let mlm_logits = if example.predict_positions.is_empty() {
            None
        } else {
            let picked = tape.gather_rows(x, &example.predict_positions)?;
            let h = self.dense(tape, params, picked, ids.mlm_dense, ids.mlm_bias)?;
            let h = tape.gelu(h);
            let h = self.layer_norm(tape, params, h, ids.mlm_ln)?;
            let word = tape.param(ids.word, params);
            let logits = tape.matmul_t(h, word)?;
            let bias = tape.param(ids.mlm_out_bias, params);
            Some(tape.add_row(logits, bias)?)
        };
        let first = tape.gather_rows(x, &[0])?;
        let pooled = self.dense(tape, params, first, ids.pooler, ids.pooler_bias)?;
        let pooled = tape.tanh(pooled);
        let nsp_logits = self.dense(tape, params, pooled, ids.nsp, ids.nsp_bias)?;
        Ok(ForwardVars {
            sequence: x,
            pooled,
            mlm_logits,
            nsp_logits,
        })
    }

    pub fn pretrain_forward(&self, params: &ParamStore, example: &PretrainExample) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let v = self.forward_on_tape(&mut tape, params, example, None)?;
        Ok(ForwardOutput {
            sequence: tape.value(v.sequence).clone(),
            pooled: tape.value(v.pooled).clone(),
            mlm_logits: v.mlm_logits.map(|l| tape.value(l).clone()),
            nsp_logits: tape.value(v.nsp_logits).clone(),
        })
    }

    /// Records forward and loss; returns the total-loss variable.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        example: &PretrainExample,
        dropout: Option<&mut DropoutCtx>,
    ) -> Result<(Var, LossReport)> {
        let v = self.forward_on_tape(tape, params, example, dropout)?;
        let labels: Vec<usize> = example.predict_labels.iter().map(|&l| l as usize).collect();
        if labels.len() != example.predict_positions.len() {
            return Err(Error::Input("prediction labels and positions differ in length".into()));
        }
        let nsp = tape.cross_entropy(v.nsp_logits, &[example.nsp_label as usize])?;
        let mut report = LossReport {
            nsp: tape.scalar(nsp),
            examples: 1,
            nsp_correct: usize::from(argmax(tape.value(v.nsp_logits).row(0)) == example.nsp_label as usize),
            ..LossReport::default()
        };
        let total = match v.mlm_logits {
            Some(logits) => {
                let mlm = tape.cross_entropy(logits, &labels)?;
                report.mlm = tape.scalar(mlm);
                report.mlm_count = labels.len();
                let lt = tape.value(logits);
                report.mlm_correct = labels
                    .iter()
                    .enumerate()
                    .filter(|(r, &l)| argmax(lt.row(*r)) == l)
                    .count();
                tape.add(mlm, nsp)?
            }
            None => nsp,
        };
        report.total = tape.scalar(total);
        Ok((total, report))
    }

    /// Mean loss over `batch` and gradients of `seed · mean loss`.
    pub fn batch_gradients(
        &self,
        params: &ParamStore,
        batch: &[PretrainExample],
        arith: Arith,
        seed: f64,
        dropout_seed: u64,
    ) -> Result<(LossReport, Gradients)> {
        let mut grads = Gradients::new();
        let mut report = LossReport::default();
        let per = seed / batch.len().max(1) as f64;
        for (i, ex) in batch.iter().enumerate() {
            let mut tape = Tape::with_arith(arith);
            let mut dropout = DropoutCtx::new(&self.config, dropout_seed.wrapping_add(i as u64));
            let (loss, r) = self.loss_on_tape(&mut tape, params, ex, dropout.as_mut())?;
            let g = tape.backward(loss, per);
            grads.merge(&g, 1.0);
            report.absorb(&r);
        }
        Ok((report.mean(), grads))
    }

    /// Mean loss and accuracy without gradients.
    pub fn evaluate(&self, params: &ParamStore, examples: &[PretrainExample]) -> Result<LossReport> {
        let mut report = LossReport::default();
        for ex in examples {
            let mut tape = Tape::new();
            let (_, r) = self.loss_on_tape(&mut tape, params, ex, None)?;
            report.absorb(&r);
        }
        Ok(report.mean())
    }
}

/// Mean cross-entropy over prediction rows plus NSP cross-entropy.
pub fn pretrain_loss(output: &ForwardOutput, example: &PretrainExample) -> Result<LossReport> {
    let mut tape = Tape::new();
    let nsp_logits = tape.input(output.nsp_logits.clone());
    let nsp = tape.cross_entropy(nsp_logits, &[example.nsp_label as usize])?;
    let mut report = LossReport {
        nsp: tape.scalar(nsp),
        examples: 1,
        nsp_correct: usize::from(argmax(output.nsp_logits.row(0)) == example.nsp_label as usize),
        ..LossReport::default()
    };
    if let Some(logits) = &output.mlm_logits {
        let labels: Vec<usize> = example.predict_labels.iter().map(|&l| l as usize).collect();
        let lv = tape.input(logits.clone());
        let mlm = tape.cross_entropy(lv, &labels)?;
        report.mlm = tape.scalar(mlm);
        report.mlm_count = labels.len();
        report.mlm_correct = labels
            .iter()
            .enumerate()
            .filter(|(r, &l)| argmax(logits.row(*r)) == l)
            .count();
    } else if !example.predict_labels.is_empty() {
        return Err(Error::Input("labels present but no MLM logits".into()));
    }
    report.total = report.mlm + report.nsp;
    Ok(report)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
