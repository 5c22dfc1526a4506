//! Non-overlapping 3D (time × height × width) window partitioning.
//!
//! Remainders are zero-padded; the layout records which window slots map to
//! real positions so the reverse pass can drop padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowConfig {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        let cfg = Self { t, h, w };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Config(format!("window extents must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Position of a token within the unpadded `[T, H, W]` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPos {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

/// Index map from window slots to flattened `(t, h, w)` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    pub dims: (usize, usize, usize),
    pub cfg: WindowConfig,
    pub blocks: (usize, usize, usize),
    /// `slots[win * tokens + k]` is the flat source position, `None` for padding.
    pub slots: Vec<Option<usize>>,
}

impl WindowLayout {
    pub fn new(t: usize, h: usize, w: usize, cfg: WindowConfig) -> Result<Self> {
        cfg.validate()?;
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty grid {t}x{h}x{w}")));
        }
        let blocks = (t.div_ceil(cfg.t), h.div_ceil(cfg.h), w.div_ceil(cfg.w));
        let mut slots = Vec::with_capacity(blocks.0 * blocks.1 * blocks.2 * cfg.tokens());
        for bt in 0..blocks.0 {
            for bh in 0..blocks.1 {
                for bw in 0..blocks.2 {
                    for it in 0..cfg.t {
                        for ih in 0..cfg.h {
                            for iw in 0..cfg.w {
                                let (pt, ph, pw) = (bt * cfg.t + it, bh * cfg.h + ih, bw * cfg.w + iw);
                                slots.push((pt < t && ph < h && pw < w).then(|| (pt * h + ph) * w + pw));
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            dims: (t, h, w),
            cfg,
            blocks,
            slots,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.blocks.0 * self.blocks.1 * self.blocks.2
    }

    pub fn tokens_per_window(&self) -> usize {
        self.cfg.tokens()
    }

    pub fn num_positions(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    /// `(bt, bh, bw)` block coordinates of window `win`.
    pub fn block_of(&self, win: usize) -> (usize, usize, usize) {
        let bw = win % self.blocks.2;
        let bh = (win / self.blocks.2) % self.blocks.1;
        let bt = win / (self.blocks.1 * self.blocks.2);
        (bt, bh, bw)
    }

    pub fn pos_of(&self, flat: usize) -> GridPos {
        let (_, h, w) = self.dims;
        GridPos {
            t: flat / (h * w),
            h: (flat / w) % h,
            w: flat % w,
        }
    }

    /// Inverse map: for every real position, its slot index.
    pub fn reverse_slots(&self) -> Vec<Option<usize>> {
        let mut inv = vec![None; self.num_positions()];
        for (slot, src) in self.slots.iter().enumerate() {
            if let Some(p) = *src {
                inv[p] = Some(slot);
            }
        }
        inv
    }
}

/// Partition a `[T, H, W, C]` tensor into `[nWin, win_t·win_h·win_w, C]`
/// tokens plus a validity mask (one flag per token slot).
pub fn window_partition(x: &Tensor, cfg: WindowConfig) -> Result<(Tensor, Vec<bool>)> {
    let &[t, h, w, c] = x.shape() else {
        return Err(Error::shape("window_partition", x.shape(), &[0, 0, 0, 0]));
    };
    let layout = WindowLayout::new(t, h, w, cfg)?;
    let mut out = vec![0.0; layout.slots.len() * c];
    for (slot, src) in layout.slots.iter().enumerate() {
        if let Some(p) = *src {
            out[slot * c..(slot + 1) * c].copy_from_slice(&x.data()[p * c..(p + 1) * c]);
        }
    }
    let tokens = Tensor::new(vec![layout.num_windows(), layout.tokens_per_window(), c], out)?;
    Ok((tokens, layout.mask()))
}

/// Inverse of [`window_partition`]; padded slots are dropped.
pub fn window_reverse(tokens: &Tensor, cfg: WindowConfig, shape: [usize; 4]) -> Result<Tensor> {
    let [t, h, w, c] = shape;
    let layout = WindowLayout::new(t, h, w, cfg)?;
    let expected = [layout.num_windows(), layout.tokens_per_window(), c];
    if tokens.shape() != expected {
        return Err(Error::shape("window_reverse", tokens.shape(), &expected));
    }
    let mut out = vec![0.0; t * h * w * c];
    for (slot, src) in layout.slots.iter().enumerate() {
        if let Some(p) = *src {
            out[p * c..(p + 1) * c].copy_from_slice(&tokens.data()[slot * c..(slot + 1) * c]);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Tape version: `[T·H·W, C]` rows → `[nWin·tokens, C]` rows.
pub(crate) fn partition_var(tape: &mut Tape, x: Var, layout: &WindowLayout) -> Result<Var> {
    tape.gather(x, layout.slots.clone())
}

/// Tape version of the reverse: `[nWin·tokens, C]` rows → `[T·H·W, C]` rows.
pub(crate) fn reverse_var(tape: &mut Tape, tokens: Var, layout: &WindowLayout) -> Result<Var> {
    tape.gather(tokens, layout.reverse_slots())
}
