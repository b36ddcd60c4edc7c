//! Incremental inference with cached keys and values.

use ndarray::{s, Array1, Array2};

use super::layers::{self, cst, Scalar};
use super::{Element, Model, PositionTracker};
use crate::error::{Error, Result};
use crate::tokens::Tag;

/// Feeds one element at a time through the trunk, keeping per-layer keys
/// and values so each step costs one position.
pub struct Session<'m, T> {
    model: &'m Model<T>,
    speaker: Option<Vec<T>>,
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
    len: usize,
    tracker: PositionTracker,
    passes: usize,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m Model<T>, speaker: Option<&[T]>) -> Self {
        let d = model.config.d_model;
        let cap = model.config.max_positions;
        let layers = model.config.n_layers;
        Self {
            model,
            speaker: speaker.map(|s| s.to_vec()),
            keys: (0..layers).map(|_| Array2::zeros((cap, d))).collect(),
            values: (0..layers).map(|_| Array2::zeros((cap, d))).collect(),
            len: 0,
            tracker: PositionTracker::default(),
            passes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of [`step`](Self::step) calls so far.
    pub fn passes(&self) -> usize {
        self.passes
    }

    /// Appends one element and returns its final-normalized hidden state.
    pub fn step(&mut self, element: &Element, tag: Tag) -> Result<Array1<T>> {
        let m = self.model;
        let cfg = &m.config;
        if self.len >= cfg.max_positions {
            return Err(Error::Length { len: self.len + 1, max: cfg.max_positions });
        }
        let mut x = m.element_vector(element, self.speaker.as_deref())?;
        let pos = self.tracker.next(tag);
        m.add_position(&mut x, pos, tag)?;

        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let hd = d / nh;
        let scale = cst::<T>(1.0 / (hd as f64).sqrt());
        let t = self.len;
        for (l, b) in m.params.blocks.iter().enumerate() {
            let a = layers::layernorm_row(x.view(), &b.ln1_g, &b.ln1_b);
            let qkv = a.dot(&b.w_qkv) + &b.b_qkv;
            self.keys[l].row_mut(t).assign(&qkv.slice(s![d..2 * d]));
            self.values[l].row_mut(t).assign(&qkv.slice(s![2 * d..]));
            let keys = self.keys[l].slice(s![..=t, ..]);
            let values = self.values[l].slice(s![..=t, ..]);
            let mut y = Array1::<T>::zeros(d);
            for h in 0..nh {
                let q = qkv.slice(s![h * hd..(h + 1) * hd]);
                let kh = keys.slice(s![.., h * hd..(h + 1) * hd]);
                let mut scores = kh.dot(&q) * scale;
                let max = scores.iter().fold(T::neg_infinity(), |mx, &v| if v > mx { v } else { mx });
                scores.mapv_inplace(|v| (v - max).exp());
                let sum = scores.sum();
                scores.mapv_inplace(|v| v / sum);
                let vh = values.slice(s![.., h * hd..(h + 1) * hd]);
                y.slice_mut(s![h * hd..(h + 1) * hd]).assign(&scores.dot(&vh));
            }
            x = x + y.dot(&b.w_o) + &b.b_o;
            let mm = layers::layernorm_row(x.view(), &b.ln2_g, &b.ln2_b);
            let f = (mm.dot(&b.w_fc) + &b.b_fc).mapv(layers::gelu);
            x = x + f.dot(&b.w_proj) + &b.b_proj;
        }
        self.len += 1;
        self.passes += 1;
        Ok(layers::layernorm_row(x.view(), &m.params.lnf_g, &m.params.lnf_b))
    }
}
