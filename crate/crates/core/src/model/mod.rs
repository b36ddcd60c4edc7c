//! Decoder-only transformer over interleaved text and speech tokens with
//! grouped (multi-token) speech prediction.
//!
//! Speech spans are packed into groups of `g` tokens. Each group enters the
//! trunk as one position, fused from its member embeddings by an MLP, and the
//! hidden state before it predicts all `g` members at once through `g`
//! independent linear slices. With `g = 1` the same machinery degenerates to
//! plain next-token prediction with per-role heads.

pub mod checkpoint;
pub mod layers;
pub mod session;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{pack_groups, FrameLayout, Segment, SlotRole, Tag, TokenId, TokenStream, Vocabulary};
use layers::{cst, Scalar};

pub use layers::{log_softmax, softmax};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Coupled,
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeechHeadArch {
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub head_mode: HeadMode,
    /// Speech tokens per hidden state; 1 is next-token prediction.
    pub g: usize,
    pub fusion: FusionKind,
    pub speech_head_arch: SpeechHeadArch,
    pub d_spk: usize,
    pub init_std: f64,
    /// Contexts carry the speaker slot.
    pub speaker_aware: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_positions: 1024,
            head_mode: HeadMode::Decoupled,
            g: 1,
            fusion: FusionKind::Mlp,
            speech_head_arch: SpeechHeadArch::Linear,
            d_spk: 16,
            init_std: 0.02,
            speaker_aware: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, layout: &FrameLayout) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_positions == 0 || self.d_spk == 0 {
            return Err(Error::Config("layer count, d_ff, max_positions and d_spk must be positive".into()));
        }
        layout.check_group_size(self.g)
    }
}

/// Output class space of one prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSpace {
    /// Text ids plus EOS_TEXT.
    Text,
    /// Prosody ids plus EOS_SPEECH.
    Prosody,
    /// Content ids.
    Content,
    /// Prosody and content ids plus EOS_SPEECH (coupled mode).
    Flat,
}

#[derive(Clone, Debug)]
pub struct SpeechHead {
    pub slice: usize,
    /// Slot role served by this matrix; `None` in coupled mode.
    pub role: Option<SlotRole>,
    pub space: HeadSpace,
}

/// Class ↔ token id tables for every head space.
#[derive(Clone, Debug)]
pub struct HeadLayout {
    classes: [Vec<TokenId>; 4],
    class_of: [Vec<Option<u32>>; 4],
    pub speech_heads: Vec<SpeechHead>,
    mode: HeadMode,
    g: usize,
}

fn space_index(space: HeadSpace) -> usize {
    match space {
        HeadSpace::Text => 0,
        HeadSpace::Prosody => 1,
        HeadSpace::Content => 2,
        HeadSpace::Flat => 3,
    }
}

impl HeadLayout {
    pub fn new(vocab: &Vocabulary, layout: &FrameLayout, mode: HeadMode, g: usize) -> Self {
        let ids = |seg: Segment| {
            let sp = vocab.span(seg);
            (sp.offset..sp.offset + sp.size).collect::<Vec<_>>()
        };
        let text = [ids(Segment::Text), vec![vocab.eos_text]].concat();
        let prosody = [ids(Segment::Prosody), vec![vocab.eos_speech]].concat();
        let content = ids(Segment::Content);
        let flat = [ids(Segment::Prosody), ids(Segment::Content), vec![vocab.eos_speech]].concat();
        let classes = [text, prosody, content, flat];
        let class_of = classes.clone().map(|cls| {
            let mut m = vec![None; vocab.total_size()];
            for (c, &id) in cls.iter().enumerate() {
                m[id as usize] = Some(c as u32);
            }
            m
        });
        let role_space = |r: SlotRole| match r {
            SlotRole::Prosody => HeadSpace::Prosody,
            SlotRole::Content => HeadSpace::Content,
        };
        let speech_heads = match mode {
            HeadMode::Coupled => {
                (0..g).map(|k| SpeechHead { slice: k, role: None, space: HeadSpace::Flat }).collect()
            }
            HeadMode::Decoupled if g == 1 => [SlotRole::Prosody, SlotRole::Content]
                .into_iter()
                .map(|r| SpeechHead { slice: 0, role: Some(r), space: role_space(r) })
                .collect(),
            HeadMode::Decoupled => (0..g)
                .map(|k| {
                    let r = layout.role(k);
                    SpeechHead { slice: k, role: Some(r), space: role_space(r) }
                })
                .collect(),
        };
        Self { classes, class_of, speech_heads, mode, g }
    }

    pub fn classes(&self, space: HeadSpace) -> &[TokenId] {
        &self.classes[space_index(space)]
    }

    pub fn class_of(&self, space: HeadSpace, id: TokenId) -> Option<usize> {
        self.class_of[space_index(space)].get(id as usize).copied().flatten().map(|c| c as usize)
    }

    /// Matrix index serving `slice` when that slice predicts a token of `role`.
    pub fn speech_head_index(&self, slice: usize, role: SlotRole) -> usize {
        match self.mode {
            HeadMode::Coupled => slice,
            HeadMode::Decoupled if self.g == 1 => match role {
                SlotRole::Prosody => 0,
                SlotRole::Content => 1,
            },
            HeadMode::Decoupled => slice,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub w_qkv: Array2<T>,
    pub b_qkv: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w_fc: Array2<T>,
    pub b_fc: Array1<T>,
    pub w_proj: Array2<T>,
    pub b_proj: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct Fusion<T> {
    /// (g·d_model × 2·d_model)
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    /// (2·d_model × d_model)
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// All trainable tensors. Linear weights are stored (in × out).
#[derive(Clone, Debug)]
pub struct Params<T> {
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub seg_emb: Array2<T>,
    pub spk_w: Array2<T>,
    pub spk_b: Array1<T>,
    pub fusion: Option<Fusion<T>>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    pub text_head: Array2<T>,
    pub speech_heads: Vec<Array2<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
            ("seg_emb".to_string(), self.seg_emb.view().into_dyn()),
            ("spk_w".to_string(), self.spk_w.view().into_dyn()),
            ("spk_b".to_string(), self.spk_b.view().into_dyn()),
        ];
        if let Some(f) = &self.fusion {
            out.push(("fusion.w1".into(), f.w1.view().into_dyn()));
            out.push(("fusion.b1".into(), f.b1.view().into_dyn()));
            out.push(("fusion.w2".into(), f.w2.view().into_dyn()));
            out.push(("fusion.b2".into(), f.b2.view().into_dyn()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1_g"), b.ln1_g.view().into_dyn()));
            out.push((p("ln1_b"), b.ln1_b.view().into_dyn()));
            out.push((p("w_qkv"), b.w_qkv.view().into_dyn()));
            out.push((p("b_qkv"), b.b_qkv.view().into_dyn()));
            out.push((p("w_o"), b.w_o.view().into_dyn()));
            out.push((p("b_o"), b.b_o.view().into_dyn()));
            out.push((p("ln2_g"), b.ln2_g.view().into_dyn()));
            out.push((p("ln2_b"), b.ln2_b.view().into_dyn()));
            out.push((p("w_fc"), b.w_fc.view().into_dyn()));
            out.push((p("b_fc"), b.b_fc.view().into_dyn()));
            out.push((p("w_proj"), b.w_proj.view().into_dyn()));
            out.push((p("b_proj"), b.b_proj.view().into_dyn()));
        }
        out.push(("lnf_g".into(), self.lnf_g.view().into_dyn()));
        out.push(("lnf_b".into(), self.lnf_b.view().into_dyn()));
        out.push(("text_head".into(), self.text_head.view().into_dyn()));
        for (k, w) in self.speech_heads.iter().enumerate() {
            out.push((format!("speech_head.{k}"), w.view().into_dyn()));
        }
        out
    }

    /// Same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
            ("seg_emb".to_string(), self.seg_emb.view_mut().into_dyn()),
            ("spk_w".to_string(), self.spk_w.view_mut().into_dyn()),
            ("spk_b".to_string(), self.spk_b.view_mut().into_dyn()),
        ];
        if let Some(f) = &mut self.fusion {
            out.push(("fusion.w1".into(), f.w1.view_mut().into_dyn()));
            out.push(("fusion.b1".into(), f.b1.view_mut().into_dyn()));
            out.push(("fusion.w2".into(), f.w2.view_mut().into_dyn()));
            out.push(("fusion.b2".into(), f.b2.view_mut().into_dyn()));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.push((p("ln1_g"), b.ln1_g.view_mut().into_dyn()));
            out.push((p("ln1_b"), b.ln1_b.view_mut().into_dyn()));
            out.push((p("w_qkv"), b.w_qkv.view_mut().into_dyn()));
            out.push((p("b_qkv"), b.b_qkv.view_mut().into_dyn()));
            out.push((p("w_o"), b.w_o.view_mut().into_dyn()));
            out.push((p("b_o"), b.b_o.view_mut().into_dyn()));
            out.push((p("ln2_g"), b.ln2_g.view_mut().into_dyn()));
            out.push((p("ln2_b"), b.ln2_b.view_mut().into_dyn()));
            out.push((p("w_fc"), b.w_fc.view_mut().into_dyn()));
            out.push((p("b_fc"), b.b_fc.view_mut().into_dyn()));
            out.push((p("w_proj"), b.w_proj.view_mut().into_dyn()));
            out.push((p("b_proj"), b.b_proj.view_mut().into_dyn()));
        }
        out.push(("lnf_g".into(), self.lnf_g.view_mut().into_dyn()));
        out.push(("lnf_b".into(), self.lnf_b.view_mut().into_dyn()));
        out.push(("text_head".into(), self.text_head.view_mut().into_dyn()));
        for (k, w) in self.speech_heads.iter_mut().enumerate() {
            out.push((format!("speech_head.{k}"), w.view_mut().into_dyn()));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<T>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        Self {
            tok_emb: z2(&self.tok_emb),
            pos_emb: z2(&self.pos_emb),
            seg_emb: z2(&self.seg_emb),
            spk_w: z2(&self.spk_w),
            spk_b: z1(&self.spk_b),
            fusion: self.fusion.as_ref().map(|f| Fusion { w1: z2(&f.w1), b1: z1(&f.b1), w2: z2(&f.w2), b2: z1(&f.b2) }),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: z1(&b.ln1_g),
                    ln1_b: z1(&b.ln1_b),
                    w_qkv: z2(&b.w_qkv),
                    b_qkv: z1(&b.b_qkv),
                    w_o: z2(&b.w_o),
                    b_o: z1(&b.b_o),
                    ln2_g: z1(&b.ln2_g),
                    ln2_b: z1(&b.ln2_b),
                    w_fc: z2(&b.w_fc),
                    b_fc: z1(&b.b_fc),
                    w_proj: z2(&b.w_proj),
                    b_proj: z1(&b.b_proj),
                })
                .collect(),
            lnf_g: z1(&self.lnf_g),
            lnf_b: z1(&self.lnf_b),
            text_head: z2(&self.text_head),
            speech_heads: self.speech_heads.iter().map(z2).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// One trunk position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Element {
    Token(TokenId),
    /// `g` speech tokens fused into one input vector.
    Group(Vec<TokenId>),
    /// The continuous speaker vector.
    Speaker,
}

/// What an element is as a prediction target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    /// Class in the text head.
    Text(usize),
    /// `(speech head index, class)` for every non-PAD member.
    Speech(Vec<(usize, usize)>),
}

/// A token stream converted to trunk positions and prediction targets.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub elements: Vec<Element>,
    pub tags: Vec<Tag>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub labels: Vec<Option<Label>>,
    pub speaker: Option<u32>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// `(hidden index, label)` pairs: the hidden state at `t` predicts element `t + 1`.
    pub fn targets(&self) -> impl Iterator<Item = (usize, &Label)> + '_ {
        (1..self.elements.len()).filter(|&t| self.mask[t]).filter_map(move |t| self.labels[t].as_ref().map(|l| (t - 1, l)))
    }

    pub fn prediction_count(&self) -> usize {
        self.targets().count()
    }
}

/// Position ids restart at zero whenever the segment tag changes.
#[derive(Clone, Debug, Default)]
pub struct PositionTracker {
    last: Option<Tag>,
    run: usize,
}

impl PositionTracker {
    pub fn next(&mut self, tag: Tag) -> usize {
        if self.last == Some(tag) {
            self.run += 1;
        } else {
            self.last = Some(tag);
            self.run = 0;
        }
        self.run
    }
}

/// Per-layer hidden states of one sequence.
#[derive(Clone, Debug)]
pub struct HiddenStates<T> {
    /// Embedding output followed by each block's residual output.
    pub layers: Vec<Array2<T>>,
    /// Final-normalized states fed to the heads.
    pub output: Array2<T>,
}

struct BlockCache<T> {
    x_in: Array2<T>,
    ln1: layers::LnCache<T>,
    a: Array2<T>,
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
    y: Array2<T>,
    ln2: layers::LnCache<T>,
    m: Array2<T>,
    fc_pre: Array2<T>,
    fc_act: Array2<T>,
}

struct EmbedCache<T> {
    group_rows: Vec<usize>,
    concat: Array2<T>,
    fus_pre: Array2<T>,
    fus_act: Array2<T>,
    speaker: Option<Array1<T>>,
}

struct Trace<T> {
    embed: EmbedCache<T>,
    blocks: Vec<BlockCache<T>>,
    x_last: Array2<T>,
    lnf: layers::LnCache<T>,
    h: Array2<T>,
}

/// Summed loss over the predictions of one or more sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss_sum: f64,
    pub text_loss_sum: f64,
    pub speech_loss_sum: f64,
    pub predictions: usize,
    pub text_predictions: usize,
    pub speech_predictions: usize,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        if self.predictions == 0 {
            0.0
        } else {
            self.loss_sum / self.predictions as f64
        }
    }

    pub fn add(&mut self, o: &LossStats) {
        self.loss_sum += o.loss_sum;
        self.text_loss_sum += o.text_loss_sum;
        self.speech_loss_sum += o.speech_loss_sum;
        self.predictions += o.predictions;
        self.text_predictions += o.text_predictions;
        self.speech_predictions += o.speech_predictions;
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub layout: FrameLayout,
    pub heads: HeadLayout,
    pub params: Params<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with all tables and weights drawn from N(0, init_std²),
    /// norm gains at one and biases at zero.
    pub fn new(config: ModelConfig, vocab: Vocabulary, layout: FrameLayout, seed: u64) -> Result<Self> {
        config.validate(&layout)?;
        let heads = HeadLayout::new(&vocab, &layout, config.head_mode, config.g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut mat = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || cst::<T>(normal.sample(&mut rng)));
        let d = config.d_model;
        let zeros = |n: usize| Array1::<T>::zeros(n);
        let ones = |n: usize| Array1::<T>::ones(n);

        let tok_emb = mat(vocab.total_size(), d);
        let pos_emb = mat(config.max_positions, d);
        let seg_emb = mat(Tag::ALL.len(), d);
        let spk_w = mat(config.d_spk, d);
        let fusion = if config.g > 1 {
            Some(Fusion { w1: mat(config.g * d, 2 * d), b1: zeros(2 * d), w2: mat(2 * d, d), b2: zeros(d) })
        } else {
            None
        };
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                w_qkv: mat(d, 3 * d),
                b_qkv: zeros(3 * d),
                w_o: mat(d, d),
                b_o: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w_fc: mat(d, config.d_ff),
                b_fc: zeros(config.d_ff),
                w_proj: mat(config.d_ff, d),
                b_proj: zeros(d),
            })
            .collect();
        let text_head = mat(d, heads.classes(HeadSpace::Text).len());
        let speech_heads = heads.speech_heads.iter().map(|h| mat(d, heads.classes(h.space).len())).collect();
        let params = Params {
            tok_emb,
            pos_emb,
            seg_emb,
            spk_w,
            spk_b: zeros(d),
            fusion,
            blocks,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            text_head,
            speech_heads,
        };
        Ok(Self { config, vocab, layout, heads, params })
    }

    pub fn g(&self) -> usize {
        self.config.g
    }

    /// Converts a token stream into trunk positions: speech spans become
    /// groups of `g` (or single tokens when `g = 1`), the speaker slot becomes
    /// a speaker position, everything else stays a token.
    pub fn prepare(&self, stream: &TokenStream) -> Result<ModelInput> {
        stream.validate(&self.vocab)?;
        let g = self.config.g;
        let v = &self.vocab;
        let mut input = ModelInput {
            elements: Vec::new(),
            tags: Vec::new(),
            positions: Vec::new(),
            mask: Vec::new(),
            labels: Vec::new(),
            speaker: stream.speaker,
        };
        let mut tracker = PositionTracker::default();
        let mut push = |input: &mut ModelInput, e: Element, tag: Tag, masked: bool, label: Option<Label>| {
            input.positions.push(tracker.next(tag));
            input.elements.push(e);
            input.tags.push(tag);
            input.mask.push(masked);
            input.labels.push(label);
        };
        let is_speech = |i: usize| stream.segment_tags[i] == Tag::SpeechA && v.is_speech(stream.tokens[i]);
        let mut i = 0;
        while i < stream.len() {
            let tag = stream.segment_tags[i];
            if is_speech(i) {
                let start = i;
                while i < stream.len() && is_speech(i) {
                    i += 1;
                }
                let span = &stream.tokens[start..i];
                let masked = stream.loss_mask[start];
                if g == 1 {
                    let spf = self.layout.slots_per_frame();
                    if span.len() % spf != 0 {
                        return Err(Error::Framing { len: span.len(), unit: spf });
                    }
                    for (o, &id) in span.iter().enumerate() {
                        let label = self.speech_label(&[id], &[self.layout.role(o)], start + o)?;
                        push(&mut input, Element::Token(id), tag, masked, Some(label));
                    }
                } else {
                    let mut groups = pack_groups(v, &self.layout, span, g)?;
                    // A closing EOS_SPEECH fills the first free slot of a
                    // short final group, so decoding can stop mid-group.
                    let fill = span.len() % g;
                    if fill != 0
                        && i < stream.len()
                        && stream.tokens[i] == v.eos_speech
                        && stream.segment_tags[i] == tag
                        && stream.loss_mask[i] == masked
                    {
                        groups.last_mut().expect("non-empty span").member_ids[fill] = v.eos_speech;
                        i += 1;
                    }
                    for (j, group) in groups.into_iter().enumerate() {
                        let label = self.speech_label(&group.member_ids, &group.slot_roles, start + j * g)?;
                        push(&mut input, Element::Group(group.member_ids), tag, masked, Some(label));
                    }
                }
                continue;
            }
            let id = stream.tokens[i];
            let masked = stream.loss_mask[i];
            let (element, label) = if tag == Tag::Speaker {
                (Element::Speaker, None)
            } else if id == v.eos_speech {
                let head = self.heads.speech_head_index(0, SlotRole::Prosody);
                let space = self.heads.speech_heads[head].space;
                let class = self.heads.class_of(space, id).expect("EOS_SPEECH is a speech class");
                (Element::Token(id), Some(Label::Speech(vec![(head, class)])))
            } else if let Some(class) = self.heads.class_of(HeadSpace::Text, id) {
                (Element::Token(id), Some(Label::Text(class)))
            } else {
                (Element::Token(id), None)
            };
            if masked && label.is_none() {
                return Err(Error::Format(format!("loss-masked token {id} at {i} is not a prediction target")));
            }
            push(&mut input, element, tag, masked, label);
            i += 1;
        }
        if input.len() > self.config.max_positions {
            return Err(Error::Length { len: input.len(), max: self.config.max_positions });
        }
        Ok(input)
    }

    fn speech_label(&self, members: &[TokenId], roles: &[SlotRole], offset: usize) -> Result<Label> {
        let mut out = Vec::with_capacity(members.len());
        for (k, (&id, &role)) in members.iter().zip(roles).enumerate() {
            if id == self.vocab.pad {
                continue;
            }
            let head = self.heads.speech_head_index(k, role);
            let space = self.heads.speech_heads[head].space;
            let class = self.heads.class_of(space, id).ok_or_else(|| Error::Layout {
                position: offset + k,
                reason: format!("token {id} is not in the {space:?} head vocabulary"),
            })?;
            out.push((head, class));
        }
        Ok(Label::Speech(out))
    }

    fn speaker_row(&self, speaker: Option<&[T]>) -> Result<Array1<T>> {
        let u = speaker.ok_or_else(|| Error::Shape("speaker slot present but no speaker vector given".into()))?;
        if u.len() != self.config.d_spk {
            return Err(Error::Shape(format!("speaker vector has {} dims, expected {}", u.len(), self.config.d_spk)));
        }
        let u = ArrayView1::from(u);
        Ok(u.dot(&self.params.spk_w) + &self.params.spk_b)
    }

    /// Fusion MLP on a batch of concatenated group embeddings.
    fn fuse(&self, concat: &Array2<T>) -> (Array2<T>, Array2<T>, Array2<T>) {
        let f = self.params.fusion.as_ref().expect("fusion exists when g > 1");
        let pre = layers::linear(concat, &f.w1, &f.b1);
        let act = pre.mapv(layers::gelu);
        let out = layers::linear(&act, &f.w2, &f.b2);
        (pre, act, out)
    }

    fn group_concat(&self, members: &[TokenId]) -> Result<Array1<T>> {
        let d = self.config.d_model;
        if members.len() != self.config.g {
            return Err(Error::Shape(format!("group of {} tokens, model expects g = {}", members.len(), self.config.g)));
        }
        let mut row = Array1::zeros(members.len() * d);
        for (k, &id) in members.iter().enumerate() {
            row.slice_mut(s![k * d..(k + 1) * d]).assign(&self.params.tok_emb.row(id as usize));
        }
        Ok(row)
    }

    /// Input vector of one element, before position and segment embeddings.
    pub(crate) fn element_vector(&self, e: &Element, speaker: Option<&[T]>) -> Result<Array1<T>> {
        match e {
            Element::Token(id) => Ok(self.params.tok_emb.row(*id as usize).to_owned()),
            Element::Speaker => self.speaker_row(speaker),
            Element::Group(members) => {
                if self.config.g == 1 {
                    return Err(Error::Shape("group element given to a g = 1 model".into()));
                }
                let concat = self.group_concat(members)?.insert_axis(Axis(0));
                Ok(self.fuse(&concat).2.row(0).to_owned())
            }
        }
    }

    pub(crate) fn add_position(&self, row: &mut Array1<T>, position: usize, tag: Tag) -> Result<()> {
        if position >= self.config.max_positions {
            return Err(Error::Length { len: position + 1, max: self.config.max_positions });
        }
        *row += &self.params.pos_emb.row(position);
        *row += &self.params.seg_emb.row(tag.index());
        Ok(())
    }

    fn embed_with_cache(&self, input: &ModelInput, speaker: Option<&[T]>) -> Result<(Array2<T>, EmbedCache<T>)> {
        let n = input.len();
        let d = self.config.d_model;
        let mut x = Array2::zeros((n, d));
        let mut group_rows = Vec::new();
        let mut concat_rows = Vec::new();
        let mut speaker_vec = None;
        for (t, e) in input.elements.iter().enumerate() {
            match e {
                Element::Token(id) => x.row_mut(t).assign(&self.params.tok_emb.row(*id as usize)),
                Element::Speaker => {
                    x.row_mut(t).assign(&self.speaker_row(speaker)?);
                    speaker_vec = speaker.map(|u| Array1::from(u.to_vec()));
                }
                Element::Group(members) => {
                    if self.config.g == 1 {
                        return Err(Error::Shape("group element given to a g = 1 model".into()));
                    }
                    group_rows.push(t);
                    concat_rows.push(self.group_concat(members)?);
                }
            }
        }
        let gd = self.config.g * d;
        let mut concat = Array2::zeros((concat_rows.len(), gd));
        for (r, row) in concat_rows.iter().enumerate() {
            concat.row_mut(r).assign(row);
        }
        let (fus_pre, fus_act) = if group_rows.is_empty() {
            (Array2::zeros((0, 0)), Array2::zeros((0, 0)))
        } else {
            let (pre, act, out) = self.fuse(&concat);
            for (r, &t) in group_rows.iter().enumerate() {
                x.row_mut(t).assign(&out.row(r));
            }
            (pre, act)
        };
        for t in 0..n {
            let mut row = x.row(t).to_owned();
            self.add_position(&mut row, input.positions[t], input.tags[t])?;
            x.row_mut(t).assign(&row);
        }
        Ok((x, EmbedCache { group_rows, concat, fus_pre, fus_act, speaker: speaker_vec }))
    }

    /// One `d_model` vector per element: table lookups for tokens, fused
    /// member embeddings for groups, the projected speaker vector for the
    /// speaker slot; plus position and segment embeddings.
    pub fn embed_stream(&self, input: &ModelInput, speaker: Option<&[T]>) -> Result<Array2<T>> {
        Ok(self.embed_with_cache(input, speaker)?.0)
    }

    fn trace(&self, x0: Array2<T>, embed: EmbedCache<T>) -> Result<Trace<T>> {
        let n = x0.nrows();
        if n > self.config.max_positions {
            return Err(Error::Length { len: n, max: self.config.max_positions });
        }
        let mut x = x0;
        let mut caches = Vec::with_capacity(self.params.blocks.len());
        for b in &self.params.blocks {
            let (a, ln1) = layers::layernorm(&x, &b.ln1_g, &b.ln1_b);
            let qkv = layers::linear(&a, &b.w_qkv, &b.b_qkv);
            let (y, probs) = layers::causal_attention(&qkv, self.config.n_heads);
            let o = layers::linear(&y, &b.w_o, &b.b_o);
            let x_mid = &x + &o;
            let (m, ln2) = layers::layernorm(&x_mid, &b.ln2_g, &b.ln2_b);
            let fc_pre = layers::linear(&m, &b.w_fc, &b.b_fc);
            let fc_act = fc_pre.mapv(layers::gelu);
            let p = layers::linear(&fc_act, &b.w_proj, &b.b_proj);
            let x_out = &x_mid + &p;
            caches.push(BlockCache { x_in: x, ln1, a, qkv, probs, y, ln2, m, fc_pre, fc_act });
            x = x_out;
        }
        let (h, lnf) = layers::layernorm(&x, &self.params.lnf_g, &self.params.lnf_b);
        Ok(Trace { embed, blocks: caches, x_last: x, lnf, h })
    }

    /// Runs the trunk; `h_i` depends only on positions `≤ i`.
    pub fn forward(&self, vectors: &Array2<T>) -> Result<HiddenStates<T>> {
        let empty = EmbedCache {
            group_rows: vec![],
            concat: Array2::zeros((0, 0)),
            fus_pre: Array2::zeros((0, 0)),
            fus_act: Array2::zeros((0, 0)),
            speaker: None,
        };
        let tr = self.trace(vectors.clone(), empty)?;
        let mut layers_out: Vec<Array2<T>> = tr.blocks.iter().map(|c| c.x_in.clone()).collect();
        layers_out.push(tr.x_last);
        Ok(HiddenStates { layers: layers_out, output: tr.h })
    }

    pub fn hidden_states(&self, input: &ModelInput, speaker: Option<&[T]>) -> Result<HiddenStates<T>> {
        self.forward(&self.embed_stream(input, speaker)?)
    }

    /// Scores over text ids plus EOS_TEXT (`W_text · h`).
    pub fn language_logits(&self, h: ArrayView1<T>) -> Array1<T> {
        h.dot(&self.params.text_head)
    }

    /// One score vector per group slice. `first_slot` is the frame slot of the
    /// first member; it only matters for `g = 1`, where the slot decides
    /// between the prosody and content heads.
    pub fn speech_logits(&self, h: ArrayView1<T>, first_slot: usize) -> Vec<Array1<T>> {
        (0..self.config.g)
            .map(|k| {
                let head = self.heads.speech_head_index(k, self.layout.role(first_slot + k));
                h.dot(&self.params.speech_heads[head])
            })
            .collect()
    }

    /// Head matrix index and class space used by slice `k`.
    pub fn slice_head(&self, k: usize, first_slot: usize) -> (usize, HeadSpace) {
        let head = self.heads.speech_head_index(k, self.layout.role(first_slot + k));
        (head, self.heads.speech_heads[head].space)
    }

    /// Summed loss of one sequence; when `grads` is given, accumulates the
    /// gradient of `loss_sum / norm` into it.
    pub fn loss_and_grad(
        &self,
        input: &ModelInput,
        speaker: Option<&[T]>,
        norm: f64,
        grads: Option<&mut Params<T>>,
    ) -> Result<LossStats> {
        let (x0, embed) = self.embed_with_cache(input, speaker)?;
        let tr = self.trace(x0, embed)?;
        let d = self.config.d_model;
        let n = input.len();
        let inv_norm = 1.0 / norm;

        let mut text_rows = Vec::new();
        let mut text_targets = Vec::new();
        let mut speech: Vec<(Vec<usize>, Vec<usize>, Vec<T>)> = vec![(vec![], vec![], vec![]); self.params.speech_heads.len()];
        let mut stats = LossStats::default();
        for (t, label) in input.targets() {
            stats.predictions += 1;
            match label {
                Label::Text(c) => {
                    text_rows.push(t);
                    text_targets.push(*c);
                    stats.text_predictions += 1;
                }
                Label::Speech(members) => {
                    stats.speech_predictions += 1;
                    let w = inv_norm / members.len() as f64;
                    for &(head, c) in members {
                        speech[head].0.push(t);
                        speech[head].1.push(c);
                        speech[head].2.push(cst(w));
                    }
                }
            }
        }

        let mut dh = Array2::<T>::zeros((n, d));
        let mut grads = grads;
        let text_w = vec![cst::<T>(inv_norm); text_rows.len()];
        if !text_rows.is_empty() {
            let hs = tr.h.select(Axis(0), &text_rows);
            let logits = hs.dot(&self.params.text_head);
            let (loss, g) = layers::cross_entropy_rows(logits.view(), &text_targets, &text_w);
            let l = loss.to_f64().unwrap_or(f64::NAN) * norm;
            stats.text_loss_sum += l;
            if let Some(gr) = grads.as_deref_mut() {
                ndarray::linalg::general_mat_mul(T::one(), &hs.t(), &g, T::one(), &mut gr.text_head);
                let dhs = g.dot(&self.params.text_head.t());
                for (r, &t) in text_rows.iter().enumerate() {
                    let mut row = dh.row_mut(t);
                    row += &dhs.row(r);
                }
            }
        }
        for (head, (rows, targets, weights)) in speech.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let w = &self.params.speech_heads[head];
            let hs = tr.h.select(Axis(0), rows);
            let logits = hs.dot(w);
            let (loss, g) = layers::cross_entropy_rows(logits.view(), targets, weights);
            stats.speech_loss_sum += loss.to_f64().unwrap_or(f64::NAN) * norm;
            if let Some(gr) = grads.as_deref_mut() {
                ndarray::linalg::general_mat_mul(T::one(), &hs.t(), &g, T::one(), &mut gr.speech_heads[head]);
                let dhs = g.dot(&w.t());
                for (r, &t) in rows.iter().enumerate() {
                    let mut row = dh.row_mut(t);
                    row += &dhs.row(r);
                }
            }
        }
        stats.loss_sum = stats.text_loss_sum + stats.speech_loss_sum;

        if let Some(gr) = grads {
            self.backward(input, &tr, dh, gr);
        }
        Ok(stats)
    }

    fn backward(&self, input: &ModelInput, tr: &Trace<T>, dh: Array2<T>, gr: &mut Params<T>) {
        let p = &self.params;
        let mut dx = layers::layernorm_backward(&dh, &tr.lnf, &p.lnf_g, &mut gr.lnf_g, &mut gr.lnf_b);
        for (i, (b, c)) in p.blocks.iter().zip(&tr.blocks).enumerate().rev() {
            let gb = &mut gr.blocks[i];
            // MLP branch
            let d_fc_act = layers::linear_backward(&dx, &c.fc_act, &b.w_proj, &mut gb.w_proj, &mut gb.b_proj);
            let mut d_fc_pre = d_fc_act;
            d_fc_pre.zip_mut_with(&c.fc_pre, |g, &x| *g *= layers::gelu_grad(x));
            let dm = layers::linear_backward(&d_fc_pre, &c.m, &b.w_fc, &mut gb.w_fc, &mut gb.b_fc);
            let dx_mid = &dx + &layers::layernorm_backward(&dm, &c.ln2, &b.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
            // attention branch
            let dy = layers::linear_backward(&dx_mid, &c.y, &b.w_o, &mut gb.w_o, &mut gb.b_o);
            let dqkv = layers::causal_attention_backward(&dy, &c.qkv, &c.probs, self.config.n_heads);
            let da = layers::linear_backward(&dqkv, &c.a, &b.w_qkv, &mut gb.w_qkv, &mut gb.b_qkv);
            dx = &dx_mid + &layers::layernorm_backward(&da, &c.ln1, &b.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
        }
        self.embed_backward(input, &tr.embed, &dx, gr);
    }

    fn embed_backward(&self, input: &ModelInput, cache: &EmbedCache<T>, dx: &Array2<T>, gr: &mut Params<T>) {
        let d = self.config.d_model;
        for (t, e) in input.elements.iter().enumerate() {
            let row = dx.row(t);
            let mut pr = gr.pos_emb.row_mut(input.positions[t]);
            pr += &row;
            let mut sr = gr.seg_emb.row_mut(input.tags[t].index());
            sr += &row;
            match e {
                Element::Token(id) => {
                    let mut r = gr.tok_emb.row_mut(*id as usize);
                    r += &row;
                }
                Element::Speaker => {
                    if let Some(u) = &cache.speaker {
                        for (a, &ua) in u.iter().enumerate() {
                            let mut r = gr.spk_w.row_mut(a);
                            r.scaled_add(ua, &row);
                        }
                    }
                    gr.spk_b += &row;
                }
                Element::Group(_) => {}
            }
        }
        if cache.group_rows.is_empty() {
            return;
        }
        let f = self.params.fusion.as_ref().expect("fusion exists when groups exist");
        let gf = gr.fusion.as_mut().expect("fusion grads exist when groups exist");
        let d_out = dx.select(Axis(0), &cache.group_rows);
        let mut d_act = layers::linear_backward(&d_out, &cache.fus_act, &f.w2, &mut gf.w2, &mut gf.b2);
        d_act.zip_mut_with(&cache.fus_pre, |g, &x| *g *= layers::gelu_grad(x));
        let d_concat = layers::linear_backward(&d_act, &cache.concat, &f.w1, &mut gf.w1, &mut gf.b1);
        for (r, &t) in cache.group_rows.iter().enumerate() {
            if let Element::Group(members) = &input.elements[t] {
                for (k, &id) in members.iter().enumerate() {
                    let mut er = gr.tok_emb.row_mut(id as usize);
                    er += &d_concat.slice(s![r, k * d..(k + 1) * d]);
                }
            }
        }
    }

    /// Mean loss over the masked predictions of one stream.
    pub fn sequence_loss(&self, stream: &TokenStream, speaker: Option<&[T]>) -> Result<f64> {
        let input = self.prepare(stream)?;
        let count = input.prediction_count();
        if count == 0 {
            return Err(Error::Empty("stream has no loss-masked prediction targets".into()));
        }
        Ok(self.loss_and_grad(&input, speaker, count as f64, None)?.mean())
    }
}
