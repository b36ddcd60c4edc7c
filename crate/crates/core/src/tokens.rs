//! Vocabularies, frame layouts, interleaving schemes, group packing and
//! context assembly.
//!
//! Token ids are global: one id space is shared by every modality. The
//! speech sub-vocabularies come first so that prosody ids start at zero,
//! followed by content ids, text ids and finally the reserved specials.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Default number of frames per chunk for chunk-wise interleaving.
pub const DEFAULT_CHUNK_LEN: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Special,
    Text,
    Prosody,
    Content,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub segment: Segment,
    pub offset: TokenId,
    pub size: u32,
}

impl SegmentSpan {
    fn contains(&self, id: TokenId) -> bool {
        id >= self.offset && id < self.offset + self.size
    }
}

/// Number of reserved special ids.
pub const NUM_SPECIALS: u32 = 8;

/// The global id space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    segments: Vec<SegmentSpan>,
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos_text: TokenId,
    pub eos_speech: TokenId,
    pub mark_ta: TokenId,
    pub mark_ua: TokenId,
    pub mark_spk: TokenId,
    /// Placeholder id occupying the speaker slot; its embedding comes from
    /// the continuous speaker vector rather than the token table.
    pub spk_slot: TokenId,
}

impl Vocabulary {
    pub fn new(text_size: u32, prosody_size: u32, content_size: u32) -> Self {
        let prosody = SegmentSpan { segment: Segment::Prosody, offset: 0, size: prosody_size };
        let content = SegmentSpan {
            segment: Segment::Content,
            offset: prosody_size,
            size: content_size,
        };
        let text = SegmentSpan {
            segment: Segment::Text,
            offset: prosody_size + content_size,
            size: text_size,
        };
        let base = prosody_size + content_size + text_size;
        let special = SegmentSpan { segment: Segment::Special, offset: base, size: NUM_SPECIALS };
        Self {
            segments: vec![special, text, prosody, content],
            pad: base,
            bos: base + 1,
            eos_text: base + 2,
            eos_speech: base + 3,
            mark_ta: base + 4,
            mark_ua: base + 5,
            mark_spk: base + 6,
            spk_slot: base + 7,
        }
    }

    pub fn segments(&self) -> &[SegmentSpan] {
        &self.segments
    }

    pub fn span(&self, segment: Segment) -> &SegmentSpan {
        self.segments
            .iter()
            .find(|s| s.segment == segment)
            .expect("every segment is present")
    }

    pub fn total_size(&self) -> usize {
        self.segments.iter().map(|s| s.size as usize).sum()
    }

    pub fn segment_of(&self, id: TokenId) -> Option<Segment> {
        self.segments.iter().find(|s| s.contains(id)).map(|s| s.segment)
    }

    pub fn in_segment(&self, id: TokenId, segment: Segment) -> bool {
        self.span(segment).contains(id)
    }

    pub fn text_id(&self, index: u32) -> TokenId {
        self.span(Segment::Text).offset + index
    }

    pub fn prosody_id(&self, index: u32) -> TokenId {
        self.span(Segment::Prosody).offset + index
    }

    pub fn content_id(&self, index: u32) -> TokenId {
        self.span(Segment::Content).offset + index
    }

    /// Global id → index inside its own segment.
    pub fn local_index(&self, id: TokenId) -> Option<(Segment, u32)> {
        self.segments
            .iter()
            .find(|s| s.contains(id))
            .map(|s| (s.segment, id - s.offset))
    }

    pub fn role_segment(role: SlotRole) -> Segment {
        match role {
            SlotRole::Prosody => Segment::Prosody,
            SlotRole::Content => Segment::Content,
        }
    }

    pub fn is_speech(&self, id: TokenId) -> bool {
        matches!(self.segment_of(id), Some(Segment::Prosody | Segment::Content))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotRole {
    Prosody,
    Content,
}

/// Maps slot index → sub-vocabulary role for one codec frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub slot_roles: Vec<SlotRole>,
}

impl Default for FrameLayout {
    fn default() -> Self {
        Self { slot_roles: vec![SlotRole::Prosody, SlotRole::Content, SlotRole::Content] }
    }
}

impl FrameLayout {
    pub fn slots_per_frame(&self) -> usize {
        self.slot_roles.len()
    }

    pub fn role(&self, slot: usize) -> SlotRole {
        self.slot_roles[slot % self.slot_roles.len()]
    }

    /// Checks that `g` is usable as a group size: 1 (token-level) or a whole
    /// number of frames.
    pub fn check_group_size(&self, g: usize) -> Result<()> {
        let spf = self.slots_per_frame();
        if g == 0 || (g > 1 && g % spf != 0) {
            return Err(Error::Config(format!(
                "group size {g} must be 1 or a positive multiple of {spf} slots per frame"
            )));
        }
        Ok(())
    }
}

/// One codec frame in global ids, one token per slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpeechFrame {
    pub tokens: Vec<TokenId>,
}

impl SpeechFrame {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }
}

impl From<Vec<TokenId>> for SpeechFrame {
    fn from(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interleave {
    Fwi,
    Cwi,
}

fn check_frame(vocab: &Vocabulary, layout: &FrameLayout, frame: &SpeechFrame, frame_index: usize) -> Result<()> {
    let spf = layout.slots_per_frame();
    if frame.tokens.len() != spf {
        return Err(Error::Layout {
            position: frame_index * spf,
            reason: format!("frame {frame_index} has {} slots, expected {spf}", frame.tokens.len()),
        });
    }
    for (slot, &id) in frame.tokens.iter().enumerate() {
        let want = Vocabulary::role_segment(layout.role(slot));
        if !vocab.in_segment(id, want) {
            return Err(Error::Layout {
                position: frame_index * spf + slot,
                reason: format!("token {id} in slot {slot} is not a {want:?} id"),
            });
        }
    }
    Ok(())
}

/// Frame-wise interleaving: `[p_1, c_11, c_12, p_2, c_21, c_22, ...]`.
pub fn interleave_fwi(vocab: &Vocabulary, layout: &FrameLayout, frames: &[SpeechFrame]) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(frames.len() * layout.slots_per_frame());
    for (i, frame) in frames.iter().enumerate() {
        check_frame(vocab, layout, frame, i)?;
        out.extend_from_slice(&frame.tokens);
    }
    Ok(out)
}

/// Chunk-wise interleaving: within each chunk of up to `chunk_len` frames,
/// all slot-0 tokens, then all slot-1 tokens, and so on.
pub fn interleave_cwi(
    vocab: &Vocabulary,
    layout: &FrameLayout,
    frames: &[SpeechFrame],
    chunk_len: usize,
) -> Result<Vec<TokenId>> {
    if chunk_len == 0 {
        return Err(Error::Config("chunk_len must be at least 1".into()));
    }
    for (i, frame) in frames.iter().enumerate() {
        check_frame(vocab, layout, frame, i)?;
    }
    let spf = layout.slots_per_frame();
    let mut out = Vec::with_capacity(frames.len() * spf);
    for chunk in frames.chunks(chunk_len) {
        for slot in 0..spf {
            out.extend(chunk.iter().map(|f| f.tokens[slot]));
        }
    }
    Ok(out)
}

pub fn interleave(
    vocab: &Vocabulary,
    layout: &FrameLayout,
    frames: &[SpeechFrame],
    scheme: Interleave,
    chunk_len: usize,
) -> Result<Vec<TokenId>> {
    match scheme {
        Interleave::Fwi => interleave_fwi(vocab, layout, frames),
        Interleave::Cwi => interleave_cwi(vocab, layout, frames, chunk_len),
    }
}

/// Exact inverse of [`interleave_fwi`] / [`interleave_cwi`].
pub fn deinterleave(
    vocab: &Vocabulary,
    layout: &FrameLayout,
    tokens: &[TokenId],
    scheme: Interleave,
    chunk_len: usize,
) -> Result<Vec<SpeechFrame>> {
    let spf = layout.slots_per_frame();
    if tokens.len() % spf != 0 {
        return Err(Error::Framing { len: tokens.len(), unit: spf });
    }
    let n_frames = tokens.len() / spf;
    let mut frames = vec![SpeechFrame { tokens: vec![0; spf] }; n_frames];
    // position of (frame, slot) in the flat stream
    let mut place = |frame: usize, slot: usize, pos: usize| -> Result<()> {
        let id = tokens[pos];
        let want = Vocabulary::role_segment(layout.role(slot));
        if !vocab.in_segment(id, want) {
            return Err(Error::Layout {
                position: pos,
                reason: format!("token {id} is not a {want:?} id"),
            });
        }
        frames[frame].tokens[slot] = id;
        Ok(())
    };
    match scheme {
        Interleave::Fwi => {
            for pos in 0..tokens.len() {
                place(pos / spf, pos % spf, pos)?;
            }
        }
        Interleave::Cwi => {
            if chunk_len == 0 {
                return Err(Error::Config("chunk_len must be at least 1".into()));
            }
            let mut start = 0;
            while start < n_frames {
                let m = chunk_len.min(n_frames - start);
                let base = start * spf;
                for slot in 0..spf {
                    for f in 0..m {
                        place(start + f, slot, base + slot * m + f)?;
                    }
                }
                start += m;
            }
        }
    }
    Ok(frames)
}

/// `g` consecutive speech tokens decoded from one hidden state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub member_ids: Vec<TokenId>,
    pub slot_roles: Vec<SlotRole>,
}

impl TokenGroup {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    pub fn real_members(&self, vocab: &Vocabulary) -> usize {
        self.member_ids.iter().filter(|&&id| id != vocab.pad).count()
    }
}

/// Splits a frame-wise speech span into groups of `g`; a short final group
/// is right-padded with PAD.
pub fn pack_groups(
    vocab: &Vocabulary,
    layout: &FrameLayout,
    speech_tokens: &[TokenId],
    g: usize,
) -> Result<Vec<TokenGroup>> {
    layout.check_group_size(g)?;
    let spf = layout.slots_per_frame();
    if speech_tokens.len() % spf != 0 {
        return Err(Error::Framing { len: speech_tokens.len(), unit: spf });
    }
    let groups = speech_tokens
        .chunks(g)
        .enumerate()
        .map(|(j, chunk)| {
            let mut member_ids = chunk.to_vec();
            member_ids.resize(g, vocab.pad);
            let slot_roles = (0..g).map(|k| layout.role(j * g + k)).collect();
            TokenGroup { member_ids, slot_roles }
        })
        .collect();
    Ok(groups)
}

pub fn unpack_groups(vocab: &Vocabulary, groups: &[TokenGroup]) -> Vec<TokenId> {
    groups
        .iter()
        .flat_map(|g| g.member_ids.iter().copied())
        .filter(|&id| id != vocab.pad)
        .collect()
}

/// Role of each position in an assembled context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Speaker,
    TextQ,
    TextA,
    SpeechA,
    Special,
}

impl Tag {
    pub const ALL: [Tag; 5] = [Tag::Speaker, Tag::TextQ, Tag::TextA, Tag::SpeechA, Tag::Special];

    pub fn index(self) -> usize {
        match self {
            Tag::Speaker => 0,
            Tag::TextQ => 1,
            Tag::TextA => 2,
            Tag::SpeechA => 3,
            Tag::Special => 4,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Tag::Speaker => "spk",
            Tag::TextQ => "tq",
            Tag::TextA => "ta",
            Tag::SpeechA => "sa",
            Tag::Special => "sp",
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, Tag::TextQ | Tag::TextA)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tag::ALL
            .into_iter()
            .find(|t| t.code() == s)
            .ok_or_else(|| Error::Parse(format!("unknown tag {s:?}")))
    }
}

/// A tagged token sequence with its loss mask.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<TokenId>,
    pub segment_tags: Vec<Tag>,
    pub loss_mask: Vec<bool>,
    /// Speaker index behind the speaker slot, if the context has one.
    pub speaker: Option<u32>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, id: TokenId, tag: Tag, masked: bool) {
        self.tokens.push(id);
        self.segment_tags.push(tag);
        self.loss_mask.push(masked);
    }

    pub fn extend(&mut self, ids: &[TokenId], tag: Tag, masked: bool) {
        for &id in ids {
            self.push(id, tag, masked);
        }
    }

    /// Verifies parallel lengths and that every id lies in the segment its
    /// tag claims. Terminators (EOS_TEXT, EOS_SPEECH) carry the tag of the
    /// span they close.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.segment_tags.len() != self.tokens.len() || self.loss_mask.len() != self.tokens.len() {
            return Err(Error::Format(format!(
                "parallel lists differ in length: {} tokens, {} tags, {} mask entries",
                self.tokens.len(),
                self.segment_tags.len(),
                self.loss_mask.len()
            )));
        }
        for (pos, (&id, &tag)) in self.tokens.iter().zip(&self.segment_tags).enumerate() {
            let ok = match tag {
                Tag::Speaker => id == vocab.spk_slot,
                Tag::TextQ | Tag::TextA => vocab.in_segment(id, Segment::Text) || id == vocab.eos_text,
                Tag::SpeechA => vocab.is_speech(id) || id == vocab.eos_speech,
                Tag::Special => vocab.in_segment(id, Segment::Special) && id != vocab.spk_slot,
            };
            if !ok {
                return Err(Error::Layout { position: pos, reason: format!("token {id} does not belong to tag {tag}") });
            }
        }
        if self.segment_tags.contains(&Tag::Speaker) != self.speaker.is_some() {
            return Err(Error::Format("speaker slot and speaker index must appear together".into()));
        }
        Ok(())
    }

    /// Two text lines: space-separated ids, then the parallel tags. A tag
    /// ending in `*` is loss-masked; the speaker slot tag carries the
    /// speaker index as `spk=<n>`.
    pub fn to_lines(&self) -> (String, String) {
        let ids = self.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let tags = self
            .segment_tags
            .iter()
            .zip(&self.loss_mask)
            .map(|(tag, &m)| {
                let mut s = tag.code().to_string();
                if *tag == Tag::Speaker {
                    if let Some(spk) = self.speaker {
                        s = format!("spk={spk}");
                    }
                }
                if m {
                    s.push('*');
                }
                s
            })
            .collect::<Vec<_>>()
            .join(" ");
        (ids, tags)
    }

    pub fn from_lines(ids: &str, tags: &str) -> Result<Self> {
        let mut stream = TokenStream::default();
        let ids: Vec<&str> = ids.split_whitespace().collect();
        let tags: Vec<&str> = tags.split_whitespace().collect();
        if ids.len() != tags.len() {
            return Err(Error::Parse(format!("{} ids but {} tags", ids.len(), tags.len())));
        }
        for (id, tag) in ids.into_iter().zip(tags) {
            let id: TokenId = id.parse().map_err(|_| Error::Parse(format!("bad token id {id:?}")))?;
            let (tag, masked) = match tag.strip_suffix('*') {
                Some(t) => (t, true),
                None => (tag, false),
            };
            let tag = if let Some(spk) = tag.strip_prefix("spk=") {
                stream.speaker =
                    Some(spk.parse().map_err(|_| Error::Parse(format!("bad speaker index {spk:?}")))?);
                Tag::Speaker
            } else {
                tag.parse()?
            };
            stream.push(id, tag, masked);
        }
        Ok(stream)
    }
}

/// Writes streams in the two-lines-per-example text format.
pub fn write_streams<W: std::io::Write>(mut w: W, streams: &[TokenStream]) -> Result<()> {
    for s in streams {
        let (ids, tags) = s.to_lines();
        writeln!(w, "{ids}")?;
        writeln!(w, "{tags}")?;
    }
    Ok(())
}

pub fn read_streams<R: std::io::BufRead>(r: R) -> Result<Vec<TokenStream>> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    if lines.len() % 2 != 0 {
        return Err(Error::Parse("stream file has an odd number of lines".into()));
    }
    lines.chunks(2).map(|pair| TokenStream::from_lines(&pair[0], &pair[1])).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Tts,
    Asr,
    RoleQa,
}

/// Per-task parts of a training example. Text is already mapped to text
/// ids; speech is given as frames in global ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ContextParts {
    Tts { speaker: Option<u32>, text: Vec<TokenId>, frames: Vec<SpeechFrame> },
    Asr { frames: Vec<SpeechFrame>, text: Vec<TokenId> },
    RoleQa { speaker: Option<u32>, question: Vec<TokenId>, answer_text: Vec<TokenId>, answer_frames: Vec<SpeechFrame> },
}

impl ContextParts {
    pub fn task(&self) -> Task {
        match self {
            ContextParts::Tts { .. } => Task::Tts,
            ContextParts::Asr { .. } => Task::Asr,
            ContextParts::RoleQa { .. } => Task::RoleQa,
        }
    }
}

fn check_text(vocab: &Vocabulary, text: &[TokenId], what: &str) -> Result<()> {
    if text.is_empty() {
        return Err(Error::Format(format!("missing {what}")));
    }
    if let Some(pos) = text.iter().position(|&id| !vocab.in_segment(id, Segment::Text)) {
        return Err(Error::Layout { position: pos, reason: format!("{what} token {} is not a text id", text[pos]) });
    }
    Ok(())
}

fn push_speaker(stream: &mut TokenStream, vocab: &Vocabulary, speaker: Option<u32>) {
    if let Some(spk) = speaker {
        stream.push(vocab.mark_spk, Tag::Special, false);
        stream.push(vocab.spk_slot, Tag::Speaker, false);
        stream.speaker = Some(spk);
    }
}

/// Builds the full training context for a task:
///
/// * TTS: `[MARK_SPK, spk] text EOS_TEXT speech EOS_SPEECH`, loss on speech.
/// * ASR: `speech EOS_SPEECH text EOS_TEXT`, loss on text.
/// * Role QA: `[MARK_SPK, spk] question MARK_TA answer EOS_TEXT MARK_UA speech EOS_SPEECH`,
///   loss on both answers.
pub fn assemble_context(vocab: &Vocabulary, layout: &FrameLayout, parts: &ContextParts) -> Result<TokenStream> {
    let mut s = TokenStream::default();
    match parts {
        ContextParts::Tts { speaker, text, frames } => {
            check_text(vocab, text, "text")?;
            if frames.is_empty() {
                return Err(Error::Format("missing speech".into()));
            }
            let speech = interleave_fwi(vocab, layout, frames)?;
            push_speaker(&mut s, vocab, *speaker);
            s.extend(text, Tag::TextQ, false);
            s.push(vocab.eos_text, Tag::TextQ, false);
            s.extend(&speech, Tag::SpeechA, true);
            s.push(vocab.eos_speech, Tag::SpeechA, true);
        }
        ContextParts::Asr { frames, text } => {
            check_text(vocab, text, "text")?;
            if frames.is_empty() {
                return Err(Error::Format("missing speech".into()));
            }
            let speech = interleave_fwi(vocab, layout, frames)?;
            s.extend(&speech, Tag::SpeechA, false);
            s.push(vocab.eos_speech, Tag::SpeechA, false);
            s.extend(text, Tag::TextA, true);
            s.push(vocab.eos_text, Tag::TextA, true);
        }
        ContextParts::RoleQa { speaker, question, answer_text, answer_frames } => {
            check_text(vocab, question, "question")?;
            check_text(vocab, answer_text, "text answer")?;
            if answer_frames.is_empty() {
                return Err(Error::Format("missing speech answer".into()));
            }
            let speech = interleave_fwi(vocab, layout, answer_frames)?;
            push_speaker(&mut s, vocab, *speaker);
            s.extend(question, Tag::TextQ, false);
            s.push(vocab.mark_ta, Tag::Special, false);
            s.extend(answer_text, Tag::TextA, true);
            s.push(vocab.eos_text, Tag::TextA, true);
            s.push(vocab.mark_ua, Tag::Special, false);
            s.extend(&speech, Tag::SpeechA, true);
            s.push(vocab.eos_speech, Tag::SpeechA, true);
        }
    }
    Ok(s)
}

/// Source material for a generation prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptParts {
    Tts { speaker: Option<u32>, text: Vec<TokenId> },
    Asr { frames: Vec<SpeechFrame> },
    RoleQa { speaker: Option<u32>, question: Vec<TokenId> },
}

/// The prefix of [`assemble_context`] that precedes the first generated
/// position.
pub fn assemble_prompt(vocab: &Vocabulary, layout: &FrameLayout, parts: &PromptParts) -> Result<TokenStream> {
    let mut s = TokenStream::default();
    match parts {
        PromptParts::Tts { speaker, text } => {
            check_text(vocab, text, "text")?;
            push_speaker(&mut s, vocab, *speaker);
            s.extend(text, Tag::TextQ, false);
            s.push(vocab.eos_text, Tag::TextQ, false);
        }
        PromptParts::Asr { frames } => {
            if frames.is_empty() {
                return Err(Error::Format("missing speech".into()));
            }
            let speech = interleave_fwi(vocab, layout, frames)?;
            s.extend(&speech, Tag::SpeechA, false);
            s.push(vocab.eos_speech, Tag::SpeechA, false);
        }
        PromptParts::RoleQa { speaker, question } => {
            check_text(vocab, question, "question")?;
            push_speaker(&mut s, vocab, *speaker);
            s.extend(question, Tag::TextQ, false);
            s.push(vocab.mark_ta, Tag::Special, false);
        }
    }
    Ok(s)
}
