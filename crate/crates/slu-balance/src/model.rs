//! Joint intent-classification + slot-filling network.
//!
//! One shared feature extractor (token embeddings + a bidirectional gated
//! recurrent layer) feeds two decoder sets, one per task. Each task has an
//! intent decoder (two GELU dense layers and a softmax) over the max-pooled
//! sentence feature, and a slot decoder (two GELU dense layers per token,
//! a linear emission layer and a linear-chain CRF) over the token features.
//! Only the primary task's decoders are consulted at inference time; the
//! auxiliary decoders exist so a differently-sampled training signal can
//! shape the shared extractor.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassHistogram, Corpus};
use crate::crf;
use crate::error::{Error, Result};
use crate::seeding;
use crate::tape::{Gradients, ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Which decoder set a forward pass runs through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Primary,
    Auxiliary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_dim")]
    pub encoder_hidden: usize,
    #[serde(default = "default_dim")]
    pub decoder_hidden: usize,
    #[serde(default = "default_intent_dropout")]
    pub intent_dropout: f64,
    #[serde(default = "default_slot_dropout")]
    pub slot_dropout: f64,
    #[serde(default = "default_loss_weight")]
    pub loss_weight_ic: f64,
    #[serde(default = "default_loss_weight")]
    pub loss_weight_sf: f64,
}

fn default_dim() -> usize {
    24
}
fn default_intent_dropout() -> f64 {
    0.5
}
fn default_slot_dropout() -> f64 {
    0.2
}
fn default_loss_weight() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: default_dim(),
            encoder_hidden: default_dim(),
            decoder_hidden: default_dim(),
            intent_dropout: default_intent_dropout(),
            slot_dropout: default_slot_dropout(),
            loss_weight_ic: default_loss_weight(),
            loss_weight_sf: default_loss_weight(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        for (name, p) in [
            ("intent_dropout", self.intent_dropout),
            ("slot_dropout", self.slot_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Reserved token index for out-of-vocabulary tokens.
pub const UNK_TOKEN: &str = "<unk>";

/// Label and token inventories a model was built against. Token index 0 is
/// the reserved unknown token; all lists are sorted for reproducibility.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub tokens: Vec<String>,
    pub intents: Vec<String>,
    pub slots: Vec<String>,
}

impl Vocabularies {
    /// Union over the given corpora. Intents and slot tags come from the
    /// corpus vocabularies (which may include zero-count labels), tokens
    /// from the utterances.
    pub fn build(corpora: &[&Corpus]) -> Vocabularies {
        let mut tokens: Vec<String> = corpora
            .iter()
            .flat_map(|c| c.utterances.iter())
            .flat_map(|u| u.tokens.iter().cloned())
            .filter(|t| t != UNK_TOKEN)
            .collect();
        tokens.sort();
        tokens.dedup();
        tokens.insert(0, UNK_TOKEN.to_string());

        let mut intents: Vec<String> = corpora
            .iter()
            .flat_map(|c| c.intent_vocab.iter().cloned())
            .collect();
        intents.sort();
        intents.dedup();

        let mut slots: Vec<String> = corpora
            .iter()
            .flat_map(|c| c.slot_vocab.iter().cloned())
            .collect();
        slots.sort();
        slots.dedup();
        if slots.is_empty() {
            slots.push("O".to_string());
        }

        Vocabularies {
            tokens,
            intents,
            slots,
        }
    }

    pub fn token_index(&self, token: &str) -> usize {
        self.tokens[1..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map(|i| i + 1)
            .unwrap_or(0)
    }

    pub fn intent_index(&self, intent: &str) -> Option<usize> {
        self.intents.binary_search_by(|i| i.as_str().cmp(intent)).ok()
    }

    pub fn slot_index(&self, tag: &str) -> Option<usize> {
        self.slots.binary_search_by(|t| t.as_str().cmp(tag)).ok()
    }
}

/// An utterance mapped onto model indices, ready for the forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedUtterance {
    pub tokens: Vec<usize>,
    pub intent: usize,
    pub tags: Vec<usize>,
}

/// Everything a forward pass produces in evaluation mode.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub token_features: Tensor,
    pub sentence_feature: Vec<f64>,
    pub intent_log_probs: Vec<f64>,
    pub emissions: Tensor,
    pub crf_log_partition: f64,
}

/// Named, ordered parameter storage. Tensors are shared into tapes by
/// reference count; the trainer is the only mutator between passes.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id])
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let t = self.get(id);
        (t.rows, t.cols)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug)]
struct GruIds {
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
}

#[derive(Clone, Debug)]
struct IntentIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

#[derive(Clone, Debug)]
struct SlotIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    we: ParamId,
    be: ParamId,
}

#[derive(Clone, Debug)]
struct TaskIds {
    intent: IntentIds,
    slot: SlotIds,
    crf: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    fwd: GruIds,
    bwd: GruIds,
    primary: TaskIds,
    auxiliary: TaskIds,
}

/// Dropout stream tags so masks are independent per decoder layer.
const DROP_IC1: u64 = 0xD1;
const DROP_IC2: u64 = 0xD2;
const DROP_SF1: u64 = 0xD3;
const DROP_SF2: u64 = 0xD4;

#[derive(Clone, Copy, Debug)]
enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    params: ParamStore,
    ids: Ids,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut rand_chacha::ChaCha8Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store.add(name.to_string(), Tensor::from_vec(rows, cols, data))
    }

    fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.store.add(name.to_string(), Tensor::from_vec(rows, cols, data))
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name.to_string(), Tensor::zeros(rows, cols))
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruIds {
        GruIds {
            wz: self.weight(&format!("{prefix}.wz"), input, hidden),
            uz: self.weight(&format!("{prefix}.uz"), hidden, hidden),
            bz: self.zeros(&format!("{prefix}.bz"), 1, hidden),
            wr: self.weight(&format!("{prefix}.wr"), input, hidden),
            ur: self.weight(&format!("{prefix}.ur"), hidden, hidden),
            br: self.zeros(&format!("{prefix}.br"), 1, hidden),
            wh: self.weight(&format!("{prefix}.wh"), input, hidden),
            uh: self.weight(&format!("{prefix}.uh"), hidden, hidden),
            bh: self.zeros(&format!("{prefix}.bh"), 1, hidden),
        }
    }

    fn task(&mut self, prefix: &str, feature: usize, hidden: usize, intents: usize, tags: usize) -> TaskIds {
        TaskIds {
            intent: IntentIds {
                w1: self.weight(&format!("{prefix}.intent.w1"), feature, hidden),
                b1: self.zeros(&format!("{prefix}.intent.b1"), 1, hidden),
                w2: self.weight(&format!("{prefix}.intent.w2"), hidden, hidden),
                b2: self.zeros(&format!("{prefix}.intent.b2"), 1, hidden),
                w3: self.weight(&format!("{prefix}.intent.w3"), hidden, intents),
                b3: self.zeros(&format!("{prefix}.intent.b3"), 1, intents),
            },
            slot: SlotIds {
                w1: self.weight(&format!("{prefix}.slot.w1"), feature, hidden),
                b1: self.zeros(&format!("{prefix}.slot.b1"), 1, hidden),
                w2: self.weight(&format!("{prefix}.slot.w2"), hidden, hidden),
                b2: self.zeros(&format!("{prefix}.slot.b2"), 1, hidden),
                we: self.weight(&format!("{prefix}.slot.we"), hidden, tags),
                be: self.zeros(&format!("{prefix}.slot.be"), 1, tags),
            },
            crf: self.zeros(&format!("{prefix}.crf"), tags + 2, tags + 2),
        }
    }
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, vocabs: Vocabularies, seed: u64) -> Result<Model> {
        config.validate()?;
        if vocabs.intents.is_empty() {
            return Err(Error::Config("model needs at least one intent".into()));
        }
        let mut rng = seeding::rng(seeding::mix(seed, 0x4D0DE1));
        let mut builder = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let e = config.embed_dim;
        let h = config.encoder_hidden;
        let f = 2 * h;
        let d = config.decoder_hidden;
        let num_intents = vocabs.intents.len();
        let num_tags = vocabs.slots.len();

        let embed = builder.uniform("embed", vocabs.tokens.len(), e, 0.1);
        let fwd = builder.gru("encoder.fwd", e, h);
        let bwd = builder.gru("encoder.bwd", e, h);
        let primary = builder.task("primary", f, d, num_intents, num_tags);
        let auxiliary = builder.task("auxiliary", f, d, num_intents, num_tags);
        Ok(Model {
            config,
            vocabs,
            params: builder.store,
            ids: Ids {
                embed,
                fwd,
                bwd,
                primary,
                auxiliary,
            },
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn task_ids(&self, task: Task) -> &TaskIds {
        match task {
            Task::Primary => &self.ids.primary,
            Task::Auxiliary => &self.ids.auxiliary,
        }
    }

    /// Parameter ids of one task's decoders (intent + slot + CRF).
    pub fn decoder_param_ids(&self, task: Task) -> Vec<ParamId> {
        let t = self.task_ids(task);
        vec![
            t.intent.w1, t.intent.b1, t.intent.w2, t.intent.b2, t.intent.w3, t.intent.b3,
            t.slot.w1, t.slot.b1, t.slot.w2, t.slot.b2, t.slot.we, t.slot.be, t.crf,
        ]
    }

    /// Parameter ids of the shared feature extractor (embeddings + encoder).
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        let g = |g: &GruIds| vec![g.wz, g.uz, g.bz, g.wr, g.ur, g.br, g.wh, g.uh, g.bh];
        let mut ids = vec![self.ids.embed];
        ids.extend(g(&self.ids.fwd));
        ids.extend(g(&self.ids.bwd));
        ids
    }

    /// Overwrite one task's decoder parameters with seeded uniform noise.
    pub fn randomize_decoders(&mut self, task: Task, seed: u64) {
        let mut rng = seeding::rng(seed);
        for id in self.decoder_param_ids(task) {
            let tensor = self.params.tensor_mut(id);
            for v in &mut tensor.data {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }

    /// Map utterances onto model indices. Tokens fall back to the unknown
    /// index; labels must exist in the vocabularies.
    pub fn encode_corpus(&self, corpus: &Corpus) -> Result<Vec<EncodedUtterance>> {
        corpus
            .utterances
            .iter()
            .map(|utt| {
                let tokens = utt
                    .tokens
                    .iter()
                    .map(|t| self.vocabs.token_index(t))
                    .collect();
                let intent = self
                    .vocabs
                    .intent_index(&utt.intent)
                    .ok_or_else(|| Error::UnknownLabel(utt.intent.clone()))?;
                let tags = utt
                    .slots
                    .iter()
                    .map(|t| {
                        self.vocabs
                            .slot_index(t)
                            .ok_or_else(|| Error::UnknownLabel(t.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncodedUtterance {
                    tokens,
                    intent,
                    tags,
                })
            })
            .collect()
    }

    fn gru_direction(
        &self,
        tape: &mut Tape,
        inputs: &[Var],
        gru: &GruIds,
        reverse: bool,
    ) -> Vec<Var> {
        let h = self.config.encoder_hidden;
        let wz = tape.param(gru.wz, Arc::clone(self.params.get(gru.wz)));
        let uz = tape.param(gru.uz, Arc::clone(self.params.get(gru.uz)));
        let bz = tape.param(gru.bz, Arc::clone(self.params.get(gru.bz)));
        let wr = tape.param(gru.wr, Arc::clone(self.params.get(gru.wr)));
        let ur = tape.param(gru.ur, Arc::clone(self.params.get(gru.ur)));
        let br = tape.param(gru.br, Arc::clone(self.params.get(gru.br)));
        let wh = tape.param(gru.wh, Arc::clone(self.params.get(gru.wh)));
        let uh = tape.param(gru.uh, Arc::clone(self.params.get(gru.uh)));
        let bh = tape.param(gru.bh, Arc::clone(self.params.get(gru.bh)));
        let ones = tape.constant(Tensor::row_vector(vec![1.0; h]));
        let mut state = tape.constant(Tensor::zeros(1, h));

        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        let mut states = vec![state; inputs.len()];
        for &t in &order {
            let x = inputs[t];
            let zx = tape.matmul(x, wz);
            let zh = tape.matmul(state, uz);
            let zs = tape.add(zx, zh);
            let zb = tape.add(zs, bz);
            let z = tape.sigmoid(zb);

            let rx = tape.matmul(x, wr);
            let rh = tape.matmul(state, ur);
            let rs = tape.add(rx, rh);
            let rb = tape.add(rs, br);
            let r = tape.sigmoid(rb);

            let rh_state = tape.mul(r, state);
            let cx = tape.matmul(x, wh);
            let ch = tape.matmul(rh_state, uh);
            let cs = tape.add(cx, ch);
            let cb = tape.add(cs, bh);
            let candidate = tape.tanh(cb);

            let keep = tape.sub(ones, z);
            let kept = tape.mul(keep, state);
            let update = tape.mul(z, candidate);
            state = tape.add(kept, update);
            states[t] = state;
        }
        states
    }

    fn dropout_mask(rng_seed: u64, tag: u64, len: usize, p: f64) -> Vec<f64> {
        let mut rng = seeding::rng(seeding::mix(rng_seed, tag));
        let scale = 1.0 / (1.0 - p);
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect()
    }

    fn maybe_dropout(&self, tape: &mut Tape, var: Var, mode: Mode, tag: u64, p: f64) -> Var {
        match mode {
            Mode::Eval => var,
            Mode::Train { dropout_seed } if p > 0.0 => {
                let len = tape.value(var).numel();
                let mask = Self::dropout_mask(dropout_seed, tag, len, p);
                tape.dropout(var, mask)
            }
            Mode::Train { .. } => var,
        }
    }

    /// Shared extractor: embeddings -> bidirectional GRU -> per-token
    /// features (L×2H) and max-pooled sentence feature (1×2H).
    fn encode_on_tape(&self, tape: &mut Tape, token_ids: &[usize]) -> Result<(Var, Var)> {
        if token_ids.is_empty() {
            return Err(Error::EmptyInput("encode over empty token sequence"));
        }
        let embed_table = self.params.get(self.ids.embed);
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= embed_table.rows) {
            return Err(Error::Config(format!(
                "token index {bad} outside vocabulary of {}",
                embed_table.rows
            )));
        }
        let inputs: Vec<Var> = token_ids
            .iter()
            .map(|&t| tape.embed_row(self.ids.embed, embed_table, t))
            .collect();
        let fwd_states = self.gru_direction(tape, &inputs, &self.ids.fwd, false);
        let bwd_states = self.gru_direction(tape, &inputs, &self.ids.bwd, true);
        let features: Vec<Var> = fwd_states
            .iter()
            .zip(&bwd_states)
            .map(|(&f, &b)| tape.concat_cols(f, b))
            .collect();
        let token_features = tape.stack_rows(features);
        let sentence = tape.max_pool_rows(token_features);
        Ok((token_features, sentence))
    }

    fn intent_head_on_tape(
        &self,
        tape: &mut Tape,
        task: Task,
        sentence: Var,
        mode: Mode,
    ) -> Var {
        let ids = &self.task_ids(task).intent;
        let w1 = tape.param(ids.w1, Arc::clone(self.params.get(ids.w1)));
        let b1 = tape.param(ids.b1, Arc::clone(self.params.get(ids.b1)));
        let w2 = tape.param(ids.w2, Arc::clone(self.params.get(ids.w2)));
        let b2 = tape.param(ids.b2, Arc::clone(self.params.get(ids.b2)));
        let w3 = tape.param(ids.w3, Arc::clone(self.params.get(ids.w3)));
        let b3 = tape.param(ids.b3, Arc::clone(self.params.get(ids.b3)));
        let p = self.config.intent_dropout;

        let h1 = tape.matmul(sentence, w1);
        let h1 = tape.add(h1, b1);
        let h1 = tape.gelu(h1);
        let h1 = self.maybe_dropout(tape, h1, mode, DROP_IC1, p);
        let h2 = tape.matmul(h1, w2);
        let h2 = tape.add(h2, b2);
        let h2 = tape.gelu(h2);
        let h2 = self.maybe_dropout(tape, h2, mode, DROP_IC2, p);
        let logits = tape.matmul(h2, w3);
        let logits = tape.add(logits, b3);
        tape.log_softmax_row(logits)
    }

    fn slot_head_on_tape(&self, tape: &mut Tape, task: Task, token_features: Var, mode: Mode) -> Var {
        let ids = &self.task_ids(task).slot;
        let w1 = tape.param(ids.w1, Arc::clone(self.params.get(ids.w1)));
        let b1 = tape.param(ids.b1, Arc::clone(self.params.get(ids.b1)));
        let w2 = tape.param(ids.w2, Arc::clone(self.params.get(ids.w2)));
        let b2 = tape.param(ids.b2, Arc::clone(self.params.get(ids.b2)));
        let we = tape.param(ids.we, Arc::clone(self.params.get(ids.we)));
        let be = tape.param(ids.be, Arc::clone(self.params.get(ids.be)));
        let p = self.config.slot_dropout;

        let h1 = tape.matmul(token_features, w1);
        let h1 = tape.add_row_broadcast(h1, b1);
        let h1 = tape.gelu(h1);
        let h1 = self.maybe_dropout(tape, h1, mode, DROP_SF1, p);
        let h2 = tape.matmul(h1, w2);
        let h2 = tape.add_row_broadcast(h2, b2);
        let h2 = tape.gelu(h2);
        let h2 = self.maybe_dropout(tape, h2, mode, DROP_SF2, p);
        let emissions = tape.matmul(h2, we);
        tape.add_row_broadcast(emissions, be)
    }

    /// Token features and the max-pooled sentence feature, evaluation mode.
    pub fn encode(&self, token_ids: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let (token_features, sentence) = self.encode_on_tape(&mut tape, token_ids)?;
        Ok((
            tape.value(token_features).clone(),
            tape.value(sentence).data.clone(),
        ))
    }

    /// Intent log-probabilities from a given sentence feature. Dropout is
    /// applied only in train mode and is deterministic under the seed.
    pub fn intent_forward(
        &self,
        task: Task,
        sentence_feature: &[f64],
        train_mode: bool,
        dropout_seed: u64,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let sentence = tape.constant(Tensor::row_vector(sentence_feature.to_vec()));
        let mode = if train_mode {
            Mode::Train { dropout_seed }
        } else {
            Mode::Eval
        };
        let logp = self.intent_head_on_tape(&mut tape, task, sentence, mode);
        tape.value(logp).data.clone()
    }

    /// log P(tags | emissions) under this task's CRF.
    pub fn crf_log_likelihood(&self, task: Task, emissions: &Tensor, tags: &[usize]) -> Result<f64> {
        crf::log_likelihood(self.params.get(self.task_ids(task).crf), emissions, tags)
    }

    /// Best tag sequence and its score under this task's CRF.
    pub fn crf_viterbi(&self, task: Task, emissions: &Tensor) -> Result<(Vec<usize>, f64)> {
        crf::viterbi(self.params.get(self.task_ids(task).crf), emissions)
    }

    /// Full evaluation-mode forward pass for one utterance.
    pub fn forward_output(&self, task: Task, token_ids: &[usize]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let (token_features, sentence) = self.encode_on_tape(&mut tape, token_ids)?;
        let intent_logp = self.intent_head_on_tape(&mut tape, task, sentence, Mode::Eval);
        let emissions_var = self.slot_head_on_tape(&mut tape, task, token_features, Mode::Eval);
        let emissions = tape.value(emissions_var).clone();
        let crf_log_partition =
            crf::log_partition(self.params.get(self.task_ids(task).crf), &emissions)?;
        Ok(ForwardOutput {
            token_features: tape.value(token_features).clone(),
            sentence_feature: tape.value(sentence).data.clone(),
            intent_log_probs: tape.value(intent_logp).data.clone(),
            emissions,
            crf_log_partition,
        })
    }

    /// Predict on already-indexed tokens using the primary decoders only.
    pub fn predict_indices(&self, token_ids: &[usize]) -> Result<(usize, Vec<usize>)> {
        let mut tape = Tape::new();
        let (token_features, sentence) = self.encode_on_tape(&mut tape, token_ids)?;
        let intent_logp = self.intent_head_on_tape(&mut tape, Task::Primary, sentence, Mode::Eval);
        let emissions = self.slot_head_on_tape(&mut tape, Task::Primary, token_features, Mode::Eval);
        let logp = tape.value(intent_logp);
        let mut best = f64::NEG_INFINITY;
        let mut intent = 0usize;
        for (i, &v) in logp.data.iter().enumerate() {
            if v > best {
                best = v;
                intent = i;
            }
        }
        let (tags, _) = crf::viterbi(
            self.params.get(self.ids.primary.crf),
            tape.value(emissions),
        )?;
        Ok((intent, tags))
    }

    /// Predict intent label and BIO tags for a tokenized utterance.
    /// Deterministic; unknown tokens map to the reserved index.
    pub fn predict(&self, tokens: &[String]) -> Result<(String, Vec<String>)> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("predict over empty token sequence"));
        }
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocabs.token_index(t)).collect();
        let (intent, tags) = self.predict_indices(&ids)?;
        Ok((
            self.vocabs.intents[intent].clone(),
            tags.iter().map(|&t| self.vocabs.slots[t].clone()).collect(),
        ))
    }

    /// Joint loss over a batch and its exact gradients for every parameter
    /// reachable from `task` (shared extractor + this task's decoders).
    ///
    /// loss = w_ic · mean(class_weight · −intent_log_prob[gold])
    ///      + w_sf · mean(−crf_log_likelihood(gold tags))
    pub fn joint_loss(
        &self,
        task: Task,
        batch: &[&EncodedUtterance],
        class_weights: Option<&[f64]>,
        train_mode: bool,
        seed: u64,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("joint_loss over empty batch"));
        }
        if let Some(w) = class_weights {
            if w.len() != self.vocabs.intents.len() {
                return Err(Error::Shape(format!(
                    "{} class weights for {} intents",
                    w.len(),
                    self.vocabs.intents.len()
                )));
            }
        }
        for utt in batch {
            if utt.intent >= self.vocabs.intents.len() {
                return Err(Error::UnknownLabel(format!("intent index {}", utt.intent)));
            }
            if let Some(&bad) = utt.tags.iter().find(|&&t| t >= self.vocabs.slots.len()) {
                return Err(Error::UnknownLabel(format!("slot index {bad}")));
            }
        }

        let per_utterance: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, utt)| {
                let mode = if train_mode {
                    Mode::Train {
                        dropout_seed: seeding::mix(seed, i as u64),
                    }
                } else {
                    Mode::Eval
                };
                self.utterance_loss(task, utt, class_weights, mode)
            })
            .collect();

        let mut total = 0.0;
        let mut grads = Gradients::empty(self.num_params());
        for item in per_utterance {
            let (value, g) = item?;
            total += value;
            grads.add_assign(&g);
        }
        let scale = 1.0 / batch.len() as f64;
        total *= scale;
        grads.scale(scale);
        grads.densify(|id| self.params.shape(id));
        if !total.is_finite() {
            return Err(Error::NonFinite("joint loss".into()));
        }
        Ok((total, grads))
    }

    fn utterance_loss(
        &self,
        task: Task,
        utt: &EncodedUtterance,
        class_weights: Option<&[f64]>,
        mode: Mode,
    ) -> Result<(f64, Gradients)> {
        if utt.tokens.len() != utt.tags.len() {
            return Err(Error::LengthMismatch {
                index: 0,
                tokens: utt.tokens.len(),
                slots: utt.tags.len(),
            });
        }
        let mut tape = Tape::new();
        let (token_features, sentence) = self.encode_on_tape(&mut tape, &utt.tokens)?;
        let intent_logp = self.intent_head_on_tape(&mut tape, task, sentence, mode);
        let emissions = self.slot_head_on_tape(&mut tape, task, token_features, mode);

        let weight = class_weights.map_or(1.0, |w| w[utt.intent]);
        let gold_logp = tape.pick(intent_logp, utt.intent);
        let ic_term = tape.scale(gold_logp, -self.config.loss_weight_ic * weight);

        let crf_id = self.task_ids(task).crf;
        let transitions = tape.param(crf_id, Arc::clone(self.params.get(crf_id)));
        let ll = tape.crf_log_likelihood(emissions, transitions, utt.tags.clone());
        let sf_term = tape.scale(ll, -self.config.loss_weight_sf);

        let loss = tape.add(ic_term, sf_term);
        let value = tape.value(loss).data[0];
        let grads = tape.backward(loss, self.num_params());
        Ok((value, grads))
    }

    /// Save config, vocabularies and all parameters as canonical JSON.
    /// Loading the file reproduces every f64 bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let checkpoint = Checkpoint {
            config: self.config.clone(),
            vocabs: self.vocabs.clone(),
            params: self
                .params
                .iter()
                .map(|(name, tensor)| NamedTensor {
                    name: name.to_string(),
                    tensor: (**tensor).clone(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&checkpoint)
            .map_err(|e| Error::Config(format!("checkpoint serialization: {e}")))?;
        std::fs::write(path, json).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let json = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let checkpoint: Checkpoint = serde_json::from_str(&json).map_err(|e| {
            Error::MalformedRecord {
                path: path.to_path_buf(),
                line: 0,
                message: e.to_string(),
            }
        })?;
        let mut model = Model::new(checkpoint.config, checkpoint.vocabs, 0)?;
        for named in checkpoint.params {
            let id = model
                .params
                .id(&named.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", named.name)))?;
            let expected = model.params.shape(id);
            if (named.tensor.rows, named.tensor.cols) != expected {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {}x{}, expected {}x{}",
                    named.name, named.tensor.rows, named.tensor.cols, expected.0, expected.1
                )));
            }
            *model.params.tensor_mut(id) = named.tensor;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    vocabs: Vocabularies,
    params: Vec<NamedTensor>,
}

/// Inverse-frequency class weights, normalized so the weighted mean over the
/// empirical distribution is 1: w_c = total / (|nonempty| · n_c). Classes
/// with zero instances get weight 0.
pub fn balanced_class_weights(hist: &ClassHistogram) -> Result<BTreeMap<String, f64>> {
    let nonempty = hist.counts.values().filter(|&&n| n > 0).count();
    if nonempty == 0 {
        return Err(Error::EmptyInput("balanced weights over all-zero histogram"));
    }
    Ok(hist
        .counts
        .iter()
        .map(|(intent, &n)| {
            let w = if n == 0 {
                0.0
            } else {
                hist.total as f64 / (nonempty as f64 * n as f64)
            };
            (intent.clone(), w)
        })
        .collect())
}
