//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use speechlab::codec::{CodecConfig, ToyCodec};
use speechlab::data::Corpus;
use speechlab::experiment::{Lab, RunConfig, TtsReport};
use speechlab::generation::{greedy_decode, DecodeOptions};
use speechlab::metrics::{exact_match, f1_score, riemannian_distance};
use speechlab::model::{log_softmax, HeadMode, Model, ModelConfig};
use speechlab::tokens::{
    assemble_context, assemble_prompt, ContextParts, FrameLayout, PromptParts, Segment, SlotRole, Tag, TokenId, TokenStream, Vocabulary,
};

type Outcome = Result<String, String>;

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn report(n: usize, name: &str, outcome: &Outcome, failures: &mut Vec<usize>) {
    match outcome {
        Ok(detail) => say(&format!("criterion {n} {name}: PASS ({detail})")),
        Err(detail) => {
            say(&format!("criterion {n} {name}: FAIL ({detail})"));
            failures.push(n);
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn codec() -> ToyCodec {
    ToyCodec::new(CodecConfig::default()).unwrap()
}

fn micro(g: usize, mode: HeadMode, seed: u64) -> Model<f32> {
    let cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_positions: 512, head_mode: mode, g, init_std: 0.3, ..ModelConfig::default() };
    Model::new(cfg, codec().config().vocabulary(), FrameLayout::default(), seed).unwrap()
}

fn random_text(rng: &mut ChaCha8Rng, c: &ToyCodec, lo: usize, hi: usize) -> String {
    let chars: Vec<char> = c.config().charset.chars().collect();
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| chars[rng.gen_range(0..chars.len())]).collect()
}

// 1: forward passes per speech span

fn suppress_eos(m: &mut Model<f32>) {
    m.params.lnf_b[0] = 50.0;
    for (i, head) in m.heads.speech_heads.clone().iter().enumerate() {
        if let Some(c) = m.heads.class_of(head.space, m.vocab.eos_speech) {
            m.params.speech_heads[i][[0, c]] = -100.0;
        }
    }
}

fn step_count() -> Outcome {
    let c = codec();
    let v = c.config().vocabulary();
    let layout = FrameLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for mode in [HeadMode::Decoupled, HeadMode::Coupled] {
        let mut m1 = micro(1, mode, 3);
        let mut m12 = micro(12, mode, 3);
        suppress_eos(&mut m1);
        suppress_eos(&mut m12);
        for _ in 0..10 {
            let t = 12 * rng.gen_range(1..=20);
            let text = c.text_tokens(&v, &random_text(&mut rng, &c, 1, 8)).unwrap();
            let prompt = assemble_prompt(&v, &layout, &PromptParts::Tts { speaker: None, text }).unwrap();
            let opts = DecodeOptions { speech_budget: Some(t), max_new: 1000, ..DecodeOptions::default() };
            let a = greedy_decode(&m1, &prompt, None, &opts).map_err(|e| e.to_string())?;
            let b = greedy_decode(&m12, &prompt, None, &opts).map_err(|e| e.to_string())?;
            ensure(a.speech.len() == t && b.speech.len() == t, || format!("span {t}: emitted {} and {}", a.speech.len(), b.speech.len()))?;
            ensure(a.speech_steps == t && b.speech_steps * 12 == a.speech_steps, || {
                format!("span {t}: g=1 took {} passes, g=12 took {}", a.speech_steps, b.speech_steps)
            })?;
            cases += 1;
        }
        // training-side count: one trunk position per 12 speech tokens
        for n in [2usize, 4, 10, 16] {
            let text = random_text(&mut rng, &c, n, n);
            let frames = c.to_speech_frames(&v, &c.encode(&text, &c.speaker(0)).unwrap());
            let parts = ContextParts::Tts { speaker: None, text: c.text_tokens(&v, &text).unwrap(), frames };
            let s = assemble_context(&v, &layout, &parts).unwrap();
            let span = s.tokens.iter().filter(|&&id| v.is_speech(id)).count();
            let p1 = m1.prepare(&s).unwrap().len();
            let p12 = m12.prepare(&s).unwrap().len();
            let prefix = n + 1;
            // g = 1 keeps EOS_SPEECH as its own position, g = 12 opens a group for it
            ensure(p1 - prefix == span + 1 && p12 - prefix == span / 12 + 1, || format!("{span} speech tokens: {p1} vs {p12} positions"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} spans, passes(g=1) = 12 x passes(g=12) exactly"))
}

// 2: g = 1 against a plain next-token reference

fn head_target(v: &Vocabulary, mode: HeadMode, id: TokenId) -> Option<(Option<usize>, usize)> {
    // (speech matrix index or None for the text head, class)
    let local = |seg: Segment| (id - v.span(seg).offset) as usize;
    let np = v.span(Segment::Prosody).size as usize;
    let nc = v.span(Segment::Content).size as usize;
    let nt = v.span(Segment::Text).size as usize;
    if id == v.eos_text {
        return Some((None, nt));
    }
    match v.segment_of(id) {
        Some(Segment::Text) => Some((None, local(Segment::Text))),
        Some(Segment::Prosody) => Some((Some(0), local(Segment::Prosody))),
        Some(Segment::Content) => match mode {
            HeadMode::Decoupled => Some((Some(1), local(Segment::Content))),
            HeadMode::Coupled => Some((Some(0), np + local(Segment::Content))),
        },
        _ if id == v.eos_speech => match mode {
            HeadMode::Decoupled => Some((Some(0), np)),
            HeadMode::Coupled => Some((Some(0), np + nc)),
        },
        _ => None,
    }
}

fn ntp_embed(m: &Model<f32>, s: &TokenStream, spk: Option<&[f32]>) -> Array2<f32> {
    let p = &m.params;
    let mut x = Array2::zeros((s.len(), m.config.d_model));
    let mut prev: Option<Tag> = None;
    let mut pos = 0;
    for (i, (&id, &tag)) in s.tokens.iter().zip(&s.segment_tags).enumerate() {
        pos = if prev == Some(tag) { pos + 1 } else { 0 };
        prev = Some(tag);
        let mut row: Array1<f32> = if tag == Tag::Speaker {
            Array1::from(spk.unwrap().to_vec()).dot(&p.spk_w) + &p.spk_b
        } else {
            p.tok_emb.row(id as usize).to_owned()
        };
        row += &p.pos_emb.row(pos);
        row += &p.seg_emb.row(tag.index());
        x.row_mut(i).assign(&row);
    }
    x
}

fn ntp_head<'a>(m: &'a Model<f32>, head: Option<usize>) -> &'a Array2<f32> {
    match head {
        None => &m.params.text_head,
        Some(k) => &m.params.speech_heads[k],
    }
}

fn ntp_last_hidden(m: &Model<f32>, s: &TokenStream, spk: Option<&[f32]>) -> Array1<f32> {
    let h = m.forward(&ntp_embed(m, s, spk)).unwrap().output;
    h.row(h.nrows() - 1).to_owned()
}

fn penalize(z: &mut [f64], seen: &[bool], gamma: f64) {
    for (x, &r) in z.iter_mut().zip(seen) {
        if r {
            *x = if *x > 0.0 { *x / gamma } else { *x * gamma };
        }
    }
}

fn first_argmax(z: &[f64]) -> usize {
    (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b })
}

/// Greedy NTP decoding that recomputes the full prefix at every step.
fn ntp_greedy(m: &Model<f32>, prompt: &TokenStream, spk: Option<&[f32]>, opts: &DecodeOptions, mode: HeadMode) -> Vec<TokenId> {
    let v = &m.vocab;
    let layout = FrameLayout::default();
    let mut s = prompt.clone();
    let mut out = vec![];
    let speech = *prompt.tokens.last().unwrap() == v.eos_text;
    let space: Vec<TokenId> = if speech {
        (0..v.total_size() as TokenId).filter(|&id| v.is_speech(id) || id == v.eos_speech).collect()
    } else {
        (0..v.total_size() as TokenId).filter(|&id| v.in_segment(id, Segment::Text) || id == v.eos_text).collect()
    };
    let mut seen = vec![false; v.total_size()];
    for _ in 0..opts.max_new {
        let h = ntp_last_hidden(m, &s, spk);
        let slot = out.len();
        let head = if speech {
            match (mode, layout.role(slot)) {
                (HeadMode::Decoupled, SlotRole::Content) => Some(1),
                _ => Some(0),
            }
        } else {
            None
        };
        let w = ntp_head(m, head);
        let logits = h.dot(w);
        let cands: Vec<TokenId> = space.iter().copied().filter(|&id| head_target(v, mode, id).map(|t| t.0) == Some(head)).collect();
        let mut z: Vec<f64> = cands.iter().map(|&id| logits[head_target(v, mode, id).unwrap().1] as f64).collect();
        let flags: Vec<bool> = cands.iter().map(|&id| seen[id as usize]).collect();
        if !speech || opts.penalize_speech {
            penalize(&mut z, &flags, opts.rep_penalty);
        }
        if speech && slot % layout.slots_per_frame() != 0 {
            if let Some(k) = cands.iter().position(|&id| id == v.eos_speech) {
                z[k] = f64::NEG_INFINITY;
            }
        }
        let id = cands[first_argmax(&z)];
        if id == v.eos_speech || id == v.eos_text {
            break;
        }
        seen[id as usize] = true;
        out.push(id);
        s.push(id, if speech { Tag::SpeechA } else { Tag::TextA }, false);
    }
    out
}

fn ntp_reduction() -> Outcome {
    let c = codec();
    let v = c.config().vocabulary();
    let layout = FrameLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut logits_checked = 0usize;
    let mut emitted = 0usize;
    for case in 0..100u64 {
        let mode = if case % 2 == 0 { HeadMode::Decoupled } else { HeadMode::Coupled };
        let m = micro(1, mode, 100 + case);
        let text = random_text(&mut rng, &c, 1, 6);
        let spk_id = rng.gen_range(0..c.config().speakers);
        let with_spk = rng.gen_bool(0.5);
        let speaker = with_spk.then_some(spk_id);
        let emb = c.speaker(spk_id).embedding;
        let spk = with_spk.then_some(emb.as_slice());
        let frames = c.to_speech_frames(&v, &c.encode(&text, &c.speaker(spk_id)).unwrap());
        let tt = c.text_tokens(&v, &text).unwrap();
        let (parts, prompt) = match case % 3 {
            0 => (ContextParts::Tts { speaker, text: tt.clone(), frames }, PromptParts::Tts { speaker, text: tt }),
            1 => (ContextParts::Asr { frames: frames.clone(), text: tt }, PromptParts::Asr { frames }),
            _ => {
                let q = c.text_tokens(&v, &random_text(&mut rng, &c, 1, 6)).unwrap();
                (ContextParts::RoleQa { speaker, question: q, answer_text: tt.clone(), answer_frames: frames }, PromptParts::Tts { speaker, text: tt })
            }
        };
        let s = assemble_context(&v, &layout, &parts).unwrap();

        // loss and logits through the model's prediction path
        let input = m.prepare(&s).map_err(|e| e.to_string())?;
        let stats = m.loss_and_grad(&input, spk, 1.0, None).map_err(|e| e.to_string())?;
        let h = m.hidden_states(&input, spk).map_err(|e| e.to_string())?.output;

        // reference: one position per token, one head per token kind
        let h_ref = m.forward(&ntp_embed(&m, &s, spk)).unwrap().output;
        ensure(h_ref.len() == h.len() && h_ref.iter().zip(h.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), || format!("case {case}: hidden states differ"))?;
        // targets per head, in stream order: (hidden row, class)
        let mut by_head: Vec<(Option<usize>, Vec<usize>, Vec<usize>)> =
            std::iter::once(None).chain((0..m.params.speech_heads.len()).map(Some)).map(|h| (h, vec![], vec![])).collect();
        let mut slot = 0;
        for i in 1..s.len() {
            let id = s.tokens[i];
            let speech_token = s.segment_tags[i] == Tag::SpeechA && (v.is_speech(id) || id == v.eos_speech);
            if !speech_token {
                slot = 0;
            }
            let this_slot = slot;
            if speech_token {
                slot += 1;
            }
            if !s.loss_mask[i] {
                continue;
            }
            let (head, class) = head_target(&v, mode, id).ok_or_else(|| format!("case {case}: masked token {id} has no head"))?;
            let ref_logits = h_ref.row(i - 1).dot(ntp_head(&m, head));
            let lib_logits = match head {
                None => m.language_logits(h.row(i - 1)),
                Some(_) => m.speech_logits(h.row(i - 1), this_slot).remove(0),
            };
            ensure(ref_logits.iter().zip(lib_logits.iter()).all(|(a, b)| a.to_bits() == b.to_bits()) && ref_logits.len() == lib_logits.len(), || {
                format!("case {case}: logits differ at position {i}")
            })?;
            logits_checked += 1;
            let k = head.map_or(0, |k| k + 1);
            by_head[k].1.push(i - 1);
            by_head[k].2.push(class);
        }
        // batched cross-entropy per head
        let mut sums = vec![0.0f32; by_head.len()];
        for (k, (head, rows, classes)) in by_head.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let logits = h_ref.select(ndarray::Axis(0), rows).dot(ntp_head(&m, *head));
            for (r, &c) in classes.iter().enumerate() {
                sums[k] += -log_softmax(logits.row(r))[c] * 1.0;
            }
        }
        let text_sum = sums[0];
        let head_sums = &sums[1..];
        let speech_sum = head_sums.iter().fold(0.0f64, |acc, &x| acc + x as f64);
        let ref_loss = text_sum as f64 + speech_sum;
        ensure(ref_loss.to_bits() == stats.loss_sum.to_bits(), || format!("case {case}: loss {} vs reference {ref_loss}", stats.loss_sum))?;

        // greedy continuation
        let p = assemble_prompt(&v, &layout, &prompt).unwrap();
        let opts = DecodeOptions { max_new: 30, ..DecodeOptions::default() };
        let gen = greedy_decode(&m, &p, spk, &opts).map_err(|e| e.to_string())?;
        let got = if gen.speech.is_empty() { gen.text.clone() } else { gen.speech.clone() };
        let want = ntp_greedy(&m, &p, spk, &opts, mode);
        ensure(got == want, || format!("case {case}: greedy {got:?} vs reference {want:?}"))?;
        emitted += got.len();
    }
    Ok(format!("100 cases, {logits_checked} logit vectors, {emitted} greedy tokens; losses, logits and greedy outputs bit-identical"))
}

// 3: codec

fn codec_oracle() -> Outcome {
    let c = codec();
    let v = c.config().vocabulary();
    let cfg = c.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..10_000 {
        let text = random_text(&mut rng, &c, 1, 32);
        let spk = rng.gen_range(0..cfg.speakers);
        let profile = c.speaker(spk);
        let frames = c.encode(&text, &profile).map_err(|e| e.to_string())?;
        let d = c.decode(&frames);
        ensure(d.text == text && d.speaker == Some(spk) && d.valid, || format!("pair {i}: {text:?}/{spk} decoded to {d:?}"))?;
        ensure(c.from_speech_frames(&v, &c.to_speech_frames(&v, &frames)) == frames, || format!("pair {i}: global-id round trip"))?;
        ensure(c.speaker_match(&frames, &profile) == 1.0, || format!("pair {i}: prosody outside own band"))?;
    }
    let bands: Vec<HashSet<u32>> = (0..cfg.speakers).map(|s| {
        let b = c.speaker(s).band_base;
        (b..b + cfg.prosody_band).collect()
    }).collect();
    let mut pairs = 0;
    for a in 0..bands.len() {
        ensure(bands[a].iter().all(|&p| p < cfg.prosody_vocab), || format!("speaker {a} band leaves the codebook"))?;
        for b in a + 1..bands.len() {
            ensure(bands[a].is_disjoint(&bands[b]), || format!("speakers {a} and {b} share prosody ids"))?;
            pairs += 1;
        }
    }
    Ok(format!("10000 round trips exact, {pairs} speaker pairs disjoint"))
}

// 7: metric oracles

fn brute_tokens(s: &str) -> Vec<String> {
    let mut cleaned = String::new();
    for ch in s.chars() {
        if !ch.is_ascii_punctuation() {
            cleaned.extend(ch.to_lowercase());
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn brute_f1(pred: &str, gold: &str) -> f64 {
    let p = brute_tokens(pred);
    let g = brute_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    // match each predicted token to an unused equal gold token
    let mut used = vec![false; g.len()];
    let mut overlap = 0;
    for w in &p {
        if let Some(j) = (0..g.len()).find(|&j| !used[j] && g[j] == *w) {
            used[j] = true;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let pr = overlap as f64 / p.len() as f64;
    let rc = overlap as f64 / g.len() as f64;
    2.0 * pr * rc / (pr + rc)
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 8] = ["The", "cat", "sat", "on", "the", "mat", "Mat!", "a"];
    let n = rng.gen_range(0..6);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
        s.push_str(if rng.gen_bool(0.2) { ",  " } else { " " });
    }
    s
}

fn cov_oracle(rows: &Array2<f64>, eps: f64) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = rows.dim();
    let mu: Vec<f64> = (0..d).map(|j| (0..n).map(|i| rows[[i, j]]).sum::<f64>() / n as f64).collect();
    let mut k = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                k[(a, b)] += (rows[[i, a]] - mu[a]) * (rows[[i, b]] - mu[b]);
            }
        }
    }
    k /= n as f64 - 1.0;
    for a in 0..d {
        k[(a, a)] += eps;
    }
    (k, mu)
}

/// Generalized eigenvalues through a Cholesky factor of the text covariance.
fn riemannian_oracle(hs: &Array2<f64>, ht: &Array2<f64>, eps: f64) -> f64 {
    let (ks, ms) = cov_oracle(hs, eps);
    let (kt, mt) = cov_oracle(ht, eps);
    let l = kt.cholesky().expect("positive definite").l();
    let li = l.clone().try_inverse().unwrap();
    let c = &li * ks * li.transpose();
    let sym = (&c + c.transpose()) * 0.5;
    let geo = sym.symmetric_eigenvalues().iter().map(|x| x.ln().powi(2)).sum::<f64>().sqrt();
    let shift: f64 = ms.iter().zip(&mt).map(|(a, b)| (a - b).powi(2)).sum();
    geo + shift
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..200 {
        let (a, b) = (random_sentence(&mut rng), random_sentence(&mut rng));
        let em = f64::from(u8::from(brute_tokens(&a) == brute_tokens(&b)));
        ensure(exact_match(&a, &b) == em, || format!("pair {i}: EM({a:?}, {b:?})"))?;
        ensure(f1_score(&a, &b) == brute_f1(&a, &b), || format!("pair {i}: F1({a:?}, {b:?}) = {} vs {}", f1_score(&a, &b), brute_f1(&a, &b)))?;
    }

    let mut h = Array2::zeros((40, 5));
    h.mapv_inplace(|_: f64| rng.gen_range(-1.0..1.0));
    let id = riemannian_distance(h.view(), h.view(), 1e-6).map_err(|e| e.to_string())?.distance;
    ensure(id.abs() < 1e-9, || format!("identity law: {id:e}"))?;

    let ht = ndarray::array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    let hs = &ht * 2.0;
    let scaled = riemannian_distance(hs.view(), ht.view(), 0.0).map_err(|e| e.to_string())?.distance;
    let want = (2.0 * 4f64.ln().powi(2)).sqrt();
    ensure((scaled - want).abs() < 1e-6, || format!("scaling law: {scaled} vs {want}"))?;

    let mut worst = 0.0f64;
    for case in 0..50 {
        let d = rng.gen_range(2..=8);
        let n = rng.gen_range(3 * d..6 * d);
        let mut hs = Array2::zeros((n, d));
        let mut ht = Array2::zeros((n + 3, d));
        hs.mapv_inplace(|_: f64| rng.gen_range(-1.0..1.0));
        ht.mapv_inplace(|_: f64| rng.gen_range(-1.0..1.0));
        hs.mapv_inplace(|x| 1.5 * x + 0.3);
        let got = riemannian_distance(hs.view(), ht.view(), 1e-6).map_err(|e| e.to_string())?.distance;
        let want = riemannian_oracle(&hs, &ht, 1e-6);
        let rel = (got - want).abs() / want.abs().max(1e-300);
        worst = worst.max(rel);
        ensure(rel < 1e-8, || format!("matrix case {case}: {got} vs oracle {want} (rel {rel:e})"))?;
    }
    Ok(format!("200 EM/F1 pairs exact; identity {id:.1e}; scaling {scaled:.9}; 50 eigen oracles, worst rel {worst:.1e}"))
}

// 8: gradient check

fn micro64(g: usize, mode: HeadMode, seed: u64) -> Model<f64> {
    let cfg = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_positions: 64, head_mode: mode, g, init_std: 0.3, ..ModelConfig::default() };
    Model::new(cfg, codec().config().vocabulary(), FrameLayout::default(), seed).unwrap()
}

fn gradient_check() -> Outcome {
    let c = codec();
    let v = c.config().vocabulary();
    let layout = FrameLayout::default();
    let cases: [(usize, HeadMode, u32); 4] = [(1, HeadMode::Decoupled, 0), (3, HeadMode::Coupled, 1), (6, HeadMode::Decoupled, 2), (12, HeadMode::Decoupled, 2)];
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for (ci, (g, mode, task)) in cases.into_iter().enumerate() {
        let m = micro64(g, mode, 40 + ci as u64);
        let frames = c.to_speech_frames(&v, &c.encode("ab", &c.speaker(5)).unwrap());
        let text = c.text_tokens(&v, "ab").unwrap();
        let parts = match task {
            0 => ContextParts::Tts { speaker: Some(5), text, frames },
            1 => ContextParts::Asr { frames, text },
            _ => ContextParts::RoleQa { speaker: Some(5), question: c.text_tokens(&v, "why").unwrap(), answer_text: text, answer_frames: frames },
        };
        let s = assemble_context(&v, &layout, &parts).unwrap();
        let spk: Vec<f64> = c.speaker(5).embedding.iter().map(|&x| x as f64).collect();
        let spk = s.speaker.map(|_| spk.as_slice());
        let input = m.prepare(&s).unwrap();
        let norm = input.prediction_count() as f64;
        let mut grads = m.params.zeros_like();
        m.loss_and_grad(&input, spk, norm, Some(&mut grads)).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.iter().copied().collect())).collect();
        let loss = |p: &Model<f64>| p.loss_and_grad(&input, spk, norm, None).unwrap().loss_sum / norm;
        let mut probe = m.clone();
        let step = 1e-4;
        for (ti, (name, a)) in analytic.iter().enumerate() {
            let mut numeric = vec![0.0; a.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let nudge = |p: &mut Model<f64>, delta: f64| {
                    let mut ts = p.params.tensors_mut();
                    *ts[ti].1.iter_mut().nth(i).unwrap() += delta;
                };
                nudge(&mut probe, step);
                let up = loss(&probe);
                nudge(&mut probe, -2.0 * step);
                let down = loss(&probe);
                nudge(&mut probe, step);
                *slot = (up - down) / (2.0 * step);
            }
            let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
            if scale < 1e-10 {
                ensure(diff < 1e-9, || format!("g={g} {name}: zero analytic gradient but numeric norm {diff:e}"))?;
                continue;
            }
            let rel = diff / scale;
            worst = worst.max(rel);
            tensors += 1;
            ensure(rel < 1e-3, || format!("g={g} {name}: relative error {rel:e}"))?;
        }
    }
    Ok(format!("{tensors} tensors over 4 models, worst relative error {worst:.1e}"))
}

// 4, 5, 6, 9: trained runs

struct Cell {
    lab: Lab,
    model: Model<f32>,
    steps: usize,
    tts: TtsReport,
    riemannian: Option<f64>,
}

fn train_cell(base: &RunConfig, corpus: &Corpus, g: usize, speaker_aware: bool) -> Result<Cell, String> {
    let mut cfg = base.clone();
    cfg.model.g = g;
    cfg.model.head_mode = HeadMode::Decoupled;
    cfg.model.speaker_aware = speaker_aware;
    let lab = Lab::new(cfg).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let out = lab.pretrain(corpus).map_err(|e| e.to_string())?;
    let tts = lab.eval_tts(&out.model, &corpus.test).map_err(|e| e.to_string())?;
    let rep = lab.align(&out.model, &corpus.test).map_err(|e| e.to_string())?;
    let riemannian = rep.layers.last().and_then(|l| l.riemannian.as_ref()).map(|r| r.distance);
    say(&format!(
        "  trained {}: {} steps in {:.0}s, test sr {:.3} ter {:.4} speaker-match {:.3} riemannian(last) {}",
        lab.cfg.label(),
        out.steps_run,
        t0.elapsed().as_secs_f64(),
        tts.sr,
        tts.ter,
        tts.speaker_match,
        riemannian.map_or("n/a".into(), |r| format!("{r:.3}"))
    ));
    Ok(Cell { lab, model: out.model, steps: out.steps_run, tts, riemannian })
}

fn convergence(cells: &[Result<Cell, String>]) -> Outcome {
    let mut parts = vec![];
    for (g, cell) in [1, 3, 6, 12].iter().zip(cells) {
        let c = cell.as_ref().map_err(|e| format!("g={g}: {e}"))?;
        ensure(c.steps <= 20_000 && c.tts.ter <= 0.05 && c.tts.sr >= 0.95, || {
            format!("g={g}: ter {:.4} sr {:.3} after {} steps", c.tts.ter, c.tts.sr, c.steps)
        })?;
        parts.push(format!("g={g} ter {:.4} sr {:.3} in {} steps", c.tts.ter, c.tts.sr, c.steps));
    }
    Ok(parts.join("; "))
}

fn trend(cells: &[Result<Cell, String>]) -> Outcome {
    let mut parts = vec![];
    for (g, cell) in [1, 3, 6, 12].iter().zip(cells) {
        let c = cell.as_ref().map_err(|e| format!("g={g}: {e}"))?;
        parts.push(format!("g={g} ter {:.4} riemannian {}", c.tts.ter, c.riemannian.map_or("n/a".into(), |r| format!("{r:.3}"))));
    }
    let r3 = cells[1].as_ref().unwrap().riemannian.ok_or("g=3 riemannian unavailable")?;
    let r12 = cells[3].as_ref().unwrap().riemannian.ok_or("g=12 riemannian unavailable")?;
    ensure(r12 <= r3, || format!("g=12 {r12:.3} > g=3 {r3:.3}; {}", parts.join("; ")))?;
    Ok(parts.join("; "))
}

fn speaker_effect(cells: &[Result<Cell, String>], off: &Result<Cell, String>) -> Outcome {
    let mut on = vec![];
    for (g, cell) in [1, 3, 6, 12].iter().zip(cells) {
        let c = cell.as_ref().map_err(|e| format!("g={g}: {e}"))?;
        on.push(c.tts.speaker_match);
    }
    let off = off.as_ref().map_err(|e| format!("speaker off: {e}"))?.tts.speaker_match;
    let min_on = on.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(min_on >= 0.90 && off <= 0.30, || format!("speaker-match on {on:?}, off {off:.3}"))?;
    Ok(format!("speaker-match on (g=1,3,6,12) {:?}; off (g=12) {off:.3}", on.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()))
}

fn role_qa(cell: &Result<Cell, String>, corpus: &Corpus) -> Outcome {
    let cell = cell.as_ref().map_err(|e| format!("pretraining: {e}"))?;
    let t0 = Instant::now();
    let out = cell.lab.finetune(cell.model.clone(), corpus).map_err(|e| e.to_string())?;
    let (seen, _) = cell.lab.eval_qa(&out.model, &corpus.qa_train).map_err(|e| e.to_string())?;
    let (unseen, _) = cell.lab.eval_qa(&out.model, &corpus.qa_unseen).map_err(|e| e.to_string())?;
    let gap = (seen.speaker_match - unseen.speaker_match).abs();
    let detail = format!(
        "{} steps in {:.0}s; in-domain em {:.3} f1 {:.3} sr {:.3}; speaker-match seen {:.3} unseen {:.3} (gap {gap:.3}); unseen em {:.3}",
        out.steps_run,
        t0.elapsed().as_secs_f64(),
        seen.em,
        seen.f1,
        seen.sr,
        seen.speaker_match,
        unseen.speaker_match,
        unseen.em
    );
    ensure(seen.em >= 0.8 && gap <= 0.1, || detail.clone())?;
    Ok(detail)
}

#[test]
fn acceptance_criteria() {
    let mut failures = vec![];
    let t0 = Instant::now();
    report(1, "step-count speedup", &step_count(), &mut failures);
    report(2, "NTP/MTP reduction at g=1", &ntp_reduction(), &mut failures);
    report(3, "codec oracle", &codec_oracle(), &mut failures);
    report(7, "metric oracles", &metric_oracles(), &mut failures);
    report(8, "gradient check", &gradient_check(), &mut failures);
    say(&format!("  structural criteria took {:.0}s", t0.elapsed().as_secs_f64()));

    let base = RunConfig::default();
    let corpus = Lab::new(base.clone()).unwrap().corpus().unwrap();
    let cells: Vec<Result<Cell, String>> = [1, 3, 6, 12].into_iter().map(|g| train_cell(&base, &corpus, g, true)).collect();
    report(4, "convergence", &convergence(&cells), &mut failures);
    report(5, "riemannian trend across g", &trend(&cells), &mut failures);
    let off = train_cell(&base, &corpus, 12, false);
    report(6, "speaker-aware effect", &speaker_effect(&cells, &off), &mut failures);
    report(9, "role-QA end to end", &role_qa(&cells[3], &corpus), &mut failures);
    say(&format!("  total {:.0}s", t0.elapsed().as_secs_f64()));
    failures.sort();
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
