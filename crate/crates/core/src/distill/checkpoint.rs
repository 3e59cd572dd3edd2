use std::path::Path;

use super::stm::{DistillConfig, Expansion, HistoryEntry, Stm, StmState, Termination};
use super::syn::SyntheticDataset;
use crate::error::{FormatError, Result};
use crate::io::{Decoder, Encoder};
use crate::nets::ArchDescriptor;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STMS";
const VERSION: u32 = 1;
const NO_CAP: u64 = u64::MAX;

/// A distillation run frozen between two outer iterations, tagged with the
/// architecture its trajectories came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub stm: Stm,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let s = &self.stm;
        let mut e = Encoder::new(MAGIC, VERSION);
        e.arch(&self.arch);

        let c = &s.cfg;
        e.u32(c.syn_steps as u32);
        e.f64(c.lr_pixels);
        e.f64(c.lr_alpha);
        e.f64(c.lambda);
        e.u64(c.max_iter as u64);
        e.u32(c.expand_increment as u32);
        e.u32(c.validation_stride as u32);
        e.u64(c.max_total_iter.unwrap_or(NO_CAP));
        e.u64(c.seed);
        e.f64(c.grad_clip.unwrap_or(0.0));

        let syn = &s.syn;
        let (ch, h, w) = syn.dims();
        for v in [syn.classes(), syn.ipc(), ch, h, w] {
            e.u32(v as u32);
        }
        e.f32(syn.alpha());
        e.f32s(syn.images().data());

        let st = &s.state;
        e.u64(st.iter() as u64);
        e.u32(st.t() as u32);
        e.u32(st.pool() as u32);
        e.u64(st.step());
        e.u32(st.ell_val().len() as u32);
        for &v in st.ell_val() {
            e.f64(v);
        }

        e.u64(s.history.len() as u64);
        for h in &s.history {
            e.u64(h.step);
            e.u64(h.iter as u64);
            e.u32(h.t as u32);
            e.u32(h.pool as u32);
            e.u32(h.buffer as u32);
            e.f64(h.train_loss);
            e.u8(h.val_loss.is_some() as u8);
            e.f64(h.val_loss.unwrap_or(0.0));
            e.f32(h.alpha);
        }

        e.u32(s.expansions.len() as u32);
        for x in &s.expansions {
            e.u64(x.step);
            e.u64(x.iteration as u64);
            e.u32(x.series_len as u32);
            e.f64(x.r);
            e.u32(x.new_pool as u32);
        }

        match s.termination {
            None => e.u8(0),
            Some(Termination::MaxIter) => e.u8(1),
            Some(Termination::Budget) => e.u8(2),
            Some(Termination::TrajectoryExhausted { needed, available }) => {
                e.u8(3);
                e.u32(needed as u32);
                e.u32(available as u32);
            }
        }
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, MAGIC, VERSION)?;
        let arch = d.arch()?;

        let syn_steps = d.u32("config")? as usize;
        let lr_pixels = d.f64("config")?;
        let lr_alpha = d.f64("config")?;
        let lambda = d.f64("config")?;
        let max_iter = d.u64("config")? as usize;
        let expand_increment = d.u32("config")? as usize;
        let validation_stride = d.u32("config")? as usize;
        let cap = d.u64("config")?;
        let seed = d.u64("config")?;
        let clip = d.f64("config")?;
        let cfg = DistillConfig {
            syn_steps,
            lr_pixels,
            lr_alpha,
            lambda,
            max_iter,
            expand_increment,
            validation_stride,
            max_total_iter: (cap != NO_CAP).then_some(cap),
            seed,
            grad_clip: (clip != 0.0).then_some(clip),
        };
        cfg.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;

        let mut dims = [0usize; 5];
        for v in &mut dims {
            *v = d.u32("synthetic set")? as usize;
        }
        let [classes, ipc, ch, h, w] = dims;
        let alpha = d.f32("synthetic set")?;
        let n = classes * ipc * ch * h * w;
        let pixels = d.f32s(n, "synthetic images")?;
        let images = Tensor::new(vec![classes * ipc, ch, h, w], pixels)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        let syn = SyntheticDataset::new(images, classes, ipc, alpha)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;

        let iter = d.u64("state")? as usize;
        let t = d.u32("state")? as usize;
        let pool = d.u32("state")? as usize;
        let step = d.u64("state")?;
        let n_ell = d.u32("state")? as usize;
        let mut ell = Vec::with_capacity(n_ell);
        for _ in 0..n_ell {
            ell.push(d.f64("validation series")?);
        }
        if pool == 0 || t >= pool {
            return Err(FormatError::Malformed(format!("start epoch {t} outside pool {pool}")).into());
        }
        let state = StmState::restore(&cfg, iter, t, pool, step, ell);

        let n_hist = d.u64("history")? as usize;
        let mut history = Vec::with_capacity(n_hist.min(1 << 20));
        for _ in 0..n_hist {
            let step = d.u64("history")?;
            let iter = d.u64("history")? as usize;
            let t = d.u32("history")? as usize;
            let pool = d.u32("history")? as usize;
            let buffer = d.u32("history")? as usize;
            let train_loss = d.f64("history")?;
            let has_val = d.u8("history")? != 0;
            let val = d.f64("history")?;
            let alpha = d.f32("history")?;
            history.push(HistoryEntry { step, iter, t, pool, buffer, train_loss, val_loss: has_val.then_some(val), alpha });
        }

        let n_exp = d.u32("expansions")? as usize;
        let mut expansions = Vec::with_capacity(n_exp);
        for _ in 0..n_exp {
            expansions.push(Expansion {
                step: d.u64("expansions")?,
                iteration: d.u64("expansions")? as usize,
                series_len: d.u32("expansions")? as usize,
                r: d.f64("expansions")?,
                new_pool: d.u32("expansions")? as usize,
            });
        }

        let termination = match d.u8("termination")? {
            0 => None,
            1 => Some(Termination::MaxIter),
            2 => Some(Termination::Budget),
            3 => Some(Termination::TrajectoryExhausted {
                needed: d.u32("termination")? as usize,
                available: d.u32("termination")? as usize,
            }),
            other => return Err(FormatError::Malformed(format!("termination tag {other}")).into()),
        };
        d.finish()?;
        Ok(Self { arch, stm: Stm { cfg, syn, state, history, expansions, termination } })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    Checkpoint::decode(&bytes)
}
