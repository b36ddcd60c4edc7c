//! Losses, the AdamW optimizer with cosine decay, and the stage runner.

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{cst, log_softmax, Scalar};
use crate::model::{Model, ModelInput, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub seed: u64,
    /// Loss-curve record interval.
    pub log_every: usize,
    /// Interval of the evaluation hook (early stopping).
    pub eval_every: usize,
    /// Share of pretraining examples mixed into fine-tuning data.
    pub replay_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 16,
            steps_stage1: 20_000,
            steps_stage2: 30_000,
            seed: 0,
            log_every: 100,
            eval_every: 1000,
            replay_frac: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::Config("lr_init must be positive".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, log_every and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.replay_frac) {
            return Err(Error::Config("replay_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `−log softmax(logits)[target]`.
pub fn text_loss(logits: ArrayView1<f64>, target: usize) -> f64 {
    -log_softmax(logits)[target]
}

/// Mean cross-entropy over the non-PAD members of a group (`None` marks
/// PAD). Returns `(loss, weight)`; an all-PAD group has weight 0.
pub fn speech_group_loss(slices: &[ndarray::Array1<f64>], targets: &[Option<usize>]) -> (f64, f64) {
    let terms: Vec<f64> = slices
        .iter()
        .zip(targets)
        .filter_map(|(z, t)| t.map(|t| -log_softmax(z.view())[t]))
        .collect();
    if terms.is_empty() {
        return (0.0, 0.0);
    }
    (terms.iter().sum::<f64>() / terms.len() as f64, 1.0)
}

/// Cosine decay from `lr_init` at step 0 to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * lr_init * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = cst::<T>(max_norm / norm);
        for (_, mut t) in grads.tensors_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// AdamW with decoupled weight decay on matrices (not on vectors).
pub struct AdamW<T> {
    m: Params<T>,
    v: Params<T>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &Params<T>, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (cst::<T>(self.beta1), cst::<T>(self.beta2));
        let (one_b1, one_b2) = (cst::<T>(1.0 - self.beta1), cst::<T>(1.0 - self.beta2));
        let bc1 = cst::<T>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = cst::<T>(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = cst::<T>(lr);
        let eps = cst::<T>(self.eps);
        let decay = cst::<T>(1.0 - lr * self.weight_decay);
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            let decays = p.ndim() == 2;
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                if decays {
                    *p *= decay;
                }
                *p -= lr_t * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft,
}

/// How a stage obtains its starting parameters.
pub enum StageStart {
    /// Freshly initialized parameters (pretraining only).
    Fresh(Model<f32>),
    /// Parameters from an earlier stage's checkpoint.
    Checkpoint(Model<f32>),
}

/// A prepared training example and its speaker vector.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub input: ModelInput,
    pub speaker: Option<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct StageOutcome {
    pub model: Model<f32>,
    pub curve: Vec<CurvePoint>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Loss and gradient of one batch, normalized by the batch's masked
/// prediction count.
pub fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    batch: &[(&ModelInput, Option<&[T]>)],
    grads: &mut Params<T>,
) -> Result<f64> {
    let count: usize = batch.iter().map(|(i, _)| i.prediction_count()).sum();
    if count == 0 {
        return Err(Error::Empty("batch has no prediction targets".into()));
    }
    let mut total = 0.0;
    for (input, spk) in batch {
        total += model.loss_and_grad(input, *spk, count as f64, Some(grads))?.loss_sum;
    }
    Ok(total / count as f64)
}

/// Runs one training stage for `steps` optimizer steps. `on_eval` is called
/// every `eval_every` steps and may stop training early by returning true.
pub fn run_stage(
    stage: Stage,
    start: StageStart,
    data: &[TrainExample],
    cfg: &TrainConfig,
    steps: usize,
    on_eval: &mut dyn FnMut(usize, &Model<f32>) -> Result<bool>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let mut model = match (stage, start) {
        (Stage::Sft, StageStart::Fresh(_)) => {
            return Err(Error::Config("fine-tuning requires a pretrained checkpoint".into()))
        }
        (_, StageStart::Fresh(m) | StageStart::Checkpoint(m)) => m,
    };
    if steps > 0 && data.is_empty() {
        return Err(Error::Empty("no training examples".into()));
    }
    let stage_salt = match stage {
        Stage::Pretrain => 0x5117,
        Stage::Sft => 0x5f7,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stage_salt);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut grads = model.params.zeros_like();
    let mut curve = Vec::new();
    let mut window = 0.0;
    let mut window_n = 0;
    let mut stopped_early = false;
    let mut step = 0;
    while step < steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
        let batch: Vec<(&ModelInput, Option<&[f32]>)> =
            idx.iter().map(|&i| (&data[i].input, data[i].speaker.as_deref())).collect();
        grads.fill_zero();
        let loss = batch_gradient(&model, &batch, &mut grads)?;
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss {loss}, gradient norm {norm}") });
        }
        let lr = cosine_lr(step, steps, cfg.lr_init);
        opt.step(&mut model.params, &grads, lr);
        step += 1;
        window += loss;
        window_n += 1;
        if step % cfg.log_every == 0 || step == steps {
            curve.push(CurvePoint { step, loss: window / window_n as f64, lr });
            log::info!("{stage:?} step {step}/{steps} loss {:.4} lr {lr:.2e}", window / window_n as f64);
            window = 0.0;
            window_n = 0;
        }
        if step % cfg.eval_every == 0 && step < steps && on_eval(step, &model)? {
            stopped_early = true;
            break;
        }
    }
    Ok(StageOutcome { model, curve, steps_run: step, stopped_early })
}

/// Writes a loss curve as `step,loss,lr` CSV.
pub fn write_curve<W: std::io::Write>(mut w: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(w, "step,loss,lr")?;
    for p in curve {
        writeln!(w, "{},{:.6},{:.6e}", p.step, p.loss, p.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, ToyCodec};
    use crate::model::{HeadMode, ModelConfig};
    use crate::tokens::{assemble_context, ContextParts, FrameLayout};
    use ndarray::{array, Array1};

    #[test]
    fn text_loss_examples() {
        let z = Array1::<f64>::zeros(96);
        assert!((text_loss(z.view(), 5) - 96f64.ln()).abs() < 1e-12);
        assert!((96f64.ln() - 4.5643).abs() < 1e-4);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut z = Array1::<f64>::zeros(10);
            z[3] = margin;
            let l = text_loss(z.view(), 3);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn text_loss_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z: Array1<f64> = (0..20).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t = rng.gen_range(0..20);
            let direct = -(z[t].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
            assert!((text_loss(z.view(), t) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn speech_group_loss_examples() {
        let z = array![0.3, -1.0, 2.0];
        let (l, w) = speech_group_loss(&[z.clone()], &[Some(2)]);
        assert_eq!(w, 1.0);
        assert!((l - text_loss(z.view(), 2)).abs() < 1e-15);

        let uni = [Array1::zeros(128), Array1::zeros(64), Array1::zeros(128)];
        let (l, _) = speech_group_loss(&uni, &[Some(0), Some(1), Some(2)]);
        let want = (128f64.ln() + 64f64.ln() + 128f64.ln()) / 3.0;
        assert!((l - want).abs() < 1e-12);
        assert!((want - 4.6209).abs() < 1e-4);

        let slices: Vec<Array1<f64>> = (0..6).map(|k| Array1::from_elem(4, k as f64)).collect();
        let t = [Some(0), None, Some(1), Some(2), None, Some(3)];
        let (l, _) = speech_group_loss(&slices, &t);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(speech_group_loss(&slices[..2], &[None, None]), (0.0, 0.0));
    }

    #[test]
    fn cosine_schedule_properties() {
        let total = 1000;
        assert_eq!(cosine_lr(0, total, 5e-4), 5e-4);
        assert!(cosine_lr(total, total, 5e-4) <= 1e-8 * 5e-4);
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, 5e-4);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    /// Hand-computed AdamW oracle for one scalar parameter.
    #[test]
    fn adamw_matches_single_parameter_oracle() {
        let cfg = TrainConfig::default();
        let lr = 1e-2;
        let grads_seq = [0.5, -0.2, 0.1];
        let model = Model::<f64>::new(
            ModelConfig { d_model: 4, n_layers: 1, n_heads: 1, d_ff: 4, max_positions: 4, ..ModelConfig::default() },
            CodecConfig::default().vocabulary(),
            FrameLayout::default(),
            0,
        )
        .unwrap();
        let mut params = model.params.clone();
        let p0 = params.tok_emb[[0, 0]];
        let b0 = params.spk_b[0];
        let mut opt = AdamW::new(&params, &cfg);
        let (mut p, mut b, mut m, mut v) = (p0, b0, 0.0, 0.0);
        for (t, &g) in grads_seq.iter().enumerate() {
            let mut gr = params.zeros_like();
            gr.tok_emb[[0, 0]] = g;
            gr.spk_b[0] = g;
            opt.step(&mut params, &gr, lr);
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let upd = (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.99f64.powi(t))).sqrt() + 1e-8);
            p = p * (1.0 - lr * 0.01) - lr * upd;
            b -= lr * upd;
        }
        assert!((params.tok_emb[[0, 0]] - p).abs() < 1e-10);
        assert!((params.spk_b[0] - b).abs() < 1e-10);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let model = Model::<f64>::new(
            ModelConfig { d_model: 4, n_layers: 1, n_heads: 1, d_ff: 4, max_positions: 4, ..ModelConfig::default() },
            CodecConfig::default().vocabulary(),
            FrameLayout::default(),
            0,
        )
        .unwrap();
        let mut g = model.params.zeros_like();
        g.tok_emb[[0, 0]] = 3.0;
        g.spk_b[1] = 4.0;
        assert!((clip_grad_norm(&mut g, 1.0) - 5.0).abs() < 1e-12);
        assert!((g.tok_emb[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((clip_grad_norm(&mut g, 1.0) - 1.0).abs() < 1e-12);
    }

    fn tiny_setup(g: usize) -> (Model<f32>, Vec<TrainExample>, ToyCodec) {
        let codec = ToyCodec::new(CodecConfig::default()).unwrap();
        let v = codec.config().vocabulary();
        let cfg = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, g, ..ModelConfig::default() };
        let model = Model::new(cfg, v.clone(), FrameLayout::default(), 1).unwrap();
        let data = ["abab", "bbaa", "aabb"]
            .iter()
            .map(|t| {
                let spk = codec.speaker(1);
                let frames = codec.to_speech_frames(&v, &codec.encode(t, &spk).unwrap());
                let parts = ContextParts::Tts { speaker: Some(1), text: codec.text_tokens(&v, t).unwrap(), frames };
                let s = assemble_context(&v, &FrameLayout::default(), &parts).unwrap();
                TrainExample { input: model.prepare(&s).unwrap(), speaker: Some(spk.embedding) }
            })
            .collect();
        (model, data, codec)
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (model, data, _) = tiny_setup(3);
        let before = model.params.tensors().iter().map(|(_, t)| t.to_owned()).collect::<Vec<_>>();
        let out = run_stage(Stage::Pretrain, StageStart::Fresh(model), &data, &TrainConfig::default(), 0, &mut |_, _| Ok(false))
            .unwrap();
        let after = out.model.params.tensors().iter().map(|(_, t)| t.to_owned()).collect::<Vec<_>>();
        assert_eq!(before, after);
        assert_eq!(out.steps_run, 0);
    }

    #[test]
    fn sft_requires_checkpoint() {
        let (model, data, _) = tiny_setup(3);
        let r = run_stage(Stage::Sft, StageStart::Fresh(model), &data, &TrainConfig::default(), 1, &mut |_, _| Ok(false));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = TrainConfig { batch_size: 4, log_every: 10, eval_every: 1000, lr_init: 3e-3, ..TrainConfig::default() };
        let run = || {
            let (model, data, _) = tiny_setup(6);
            run_stage(Stage::Pretrain, StageStart::Fresh(model), &data, &cfg, 60, &mut |_, _| Ok(false)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model.params.tok_emb, b.model.params.tok_emb);
        assert_eq!(a.curve, b.curve);
        assert!(a.curve.last().unwrap().loss < a.curve[0].loss);
    }

    #[test]
    fn eval_hook_can_stop_early() {
        let cfg = TrainConfig { batch_size: 2, eval_every: 5, ..TrainConfig::default() };
        let (model, data, _) = tiny_setup(3);
        let out = run_stage(Stage::Pretrain, StageStart::Fresh(model), &data, &cfg, 50, &mut |s, _| Ok(s >= 10)).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.steps_run, 10);
    }

    #[test]
    fn masked_gradients_decompose_by_term() {
        let codec = ToyCodec::new(CodecConfig::default()).unwrap();
        let v = codec.config().vocabulary();
        let cfg = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, g: 3, head_mode: HeadMode::Decoupled, ..ModelConfig::default() };
        let model = Model::<f64>::new(cfg, v.clone(), FrameLayout::default(), 2).unwrap();
        let frames = codec.to_speech_frames(&v, &codec.encode("ab", &codec.speaker(0)).unwrap());
        let parts = ContextParts::Tts { speaker: None, text: codec.text_tokens(&v, "ab").unwrap(), frames };
        let tts = assemble_context(&v, &FrameLayout::default(), &parts).unwrap();

        // TTS masks only speech: the text head receives no gradient at all
        let input = model.prepare(&tts).unwrap();
        let mut g = model.params.zeros_like();
        model.loss_and_grad(&input, None, 1.0, Some(&mut g)).unwrap();
        assert!(g.text_head.iter().all(|&x| x == 0.0));

        // masked terms + complementary terms = all terms
        let mut all = tts.clone();
        all.loss_mask.iter_mut().for_each(|m| *m = true);
        all.loss_mask[0] = false;
        let mut comp = all.clone();
        for (c, &m) in comp.loss_mask.iter_mut().zip(&tts.loss_mask) {
            *c = *c && !m;
        }
        let mut g_all = model.params.zeros_like();
        model.loss_and_grad(&model.prepare(&all).unwrap(), None, 1.0, Some(&mut g_all)).unwrap();
        let mut g_sum = model.params.zeros_like();
        model.loss_and_grad(&input, None, 1.0, Some(&mut g_sum)).unwrap();
        model.loss_and_grad(&model.prepare(&comp).unwrap(), None, 1.0, Some(&mut g_sum)).unwrap();
        for ((n, a), (_, b)) in g_all.tensors().iter().zip(g_sum.tensors().iter()) {
            let diff = (a - b).mapv(f64::abs).fold(0.0, |x: f64, &y| x.max(y));
            assert!(diff < 1e-12, "{n}: {diff}");
        }
    }
}
