//! Input preprocessing shared by the teacher, distill, eval and export
//! subcommands. Every stage refits the same transforms on the training
//! view of the same dataset, so they all see identical inputs.

use stm_core::curate::{LabeledDataset, Split};
use stm_core::teacher::{zca_apply, zca_fit, zca_inverse, ChannelStats, ZcaTransform};
use stm_core::Result;

use crate::config::RunConfig;

pub struct Prepared {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub stats: Option<ChannelStats>,
    pub zca: Option<ZcaTransform>,
}

pub fn prepare(ds: &LabeledDataset, cfg: &RunConfig) -> Result<Prepared> {
    let mut train = ds.training_view();
    let mut test = ds.select_split(Split::Test);
    let stats = if cfg.distill_standardize {
        let s = ChannelStats::fit(&train)?;
        train = s.apply(&train)?;
        test = s.apply(&test)?;
        Some(s)
    } else {
        None
    };
    let zca = if cfg.distill_zca {
        let z = zca_fit(&train, cfg.distill_zca_eps)?;
        train = zca_apply(&z, &train)?;
        if !test.is_empty() {
            test = zca_apply(&z, &test)?;
        }
        Some(z)
    } else {
        None
    };
    Ok(Prepared { train, test, stats, zca })
}

impl Prepared {
    /// Maps preprocessed images back to the input's pixel scale.
    pub fn invert(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        let mut out = ds.clone();
        if let Some(z) = &self.zca {
            out = zca_inverse(z, &out)?;
        }
        if let Some(s) = &self.stats {
            out = s.invert(&out)?;
        }
        Ok(out)
    }
}
