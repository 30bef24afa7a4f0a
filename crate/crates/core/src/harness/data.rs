//! Deterministic synthetic minibatches.
//!
//! Labels come from a fixed random "teacher" model so the task is learnable.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::embedding::LookupBatch;
use crate::error::{Error, Result};
use crate::model::{Dlrm, DlrmConfig, MiniBatch, TrainOptions};
use crate::optim::PrecisionMode;
use crate::tensor::DenseTensor;

pub const ZIPF_EXPONENT: f64 = 1.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexDistribution {
    /// Independent uniform draws over all rows.
    #[default]
    Uniform,
    /// Zipf-skewed draws, so a few rows receive most updates.
    Clustered,
}

impl std::str::FromStr for IndexDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "clustered" => Ok(Self::Clustered),
            other => Err(Error::config(format!("unknown index distribution '{other}'"))),
        }
    }
}

/// Draws row indices in `[0, rows)`.
pub struct IndexSampler {
    rows: usize,
    zipf: Option<Zipf<f64>>,
}

impl IndexSampler {
    pub fn new(rows: usize, dist: IndexDistribution) -> Result<Self> {
        if rows == 0 {
            return Err(Error::config("tables need at least one row"));
        }
        let zipf = match dist {
            IndexDistribution::Uniform => None,
            IndexDistribution::Clustered => {
                Some(Zipf::new(rows as f64, ZIPF_EXPONENT).map_err(|e| Error::config(format!("zipf: {e}")))?)
            }
        };
        Ok(Self { rows, zipf })
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.zipf {
            None => rng.random_range(0..self.rows),
            // Zipf yields ranks 1..=rows.
            Some(z) => (z.sample(rng) as usize).clamp(1, self.rows) - 1,
        }
    }
}

/// `batch` bags of exactly `per_bag` lookups each.
pub fn random_lookups<R: rand::Rng + ?Sized>(
    sampler: &IndexSampler,
    batch: usize,
    per_bag: usize,
    rng: &mut R,
) -> LookupBatch {
    let indices = (0..batch * per_bag).map(|_| sampler.sample(rng)).collect();
    LookupBatch::uniform_bags(per_bag, indices).expect("bag size divides lookups")
}

/// Fraction of lookups in `indices` whose row already appeared earlier.
pub fn duplicate_rate(indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut v = indices.to_vec();
    v.sort_unstable();
    let dups = v.windows(2).filter(|w| w[0] == w[1]).count();
    dups as f64 / indices.len() as f64
}

/// Fraction of lookups that hit the most popular `frac` of `rows`.
pub fn top_rows_share(indices: &[usize], rows: usize, frac: f64) -> f64 {
    let mut counts = std::collections::HashMap::<usize, usize>::new();
    for &i in indices {
        *counts.entry(i).or_default() += 1;
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable_by(|a, b| b.cmp(a));
    let k = ((rows as f64 * frac).ceil() as usize).max(1);
    c.iter().take(k).sum::<usize>() as f64 / indices.len().max(1) as f64
}

/// Produces a reproducible stream of labelled minibatches for `config`.
pub struct SyntheticData {
    config: DlrmConfig,
    sampler: IndexSampler,
    teacher: Dlrm,
    rng: ChaCha8Rng,
    calibrated: bool,
}

impl SyntheticData {
    pub fn new(config: &DlrmConfig, seed: u64, dist: IndexDistribution) -> Result<Self> {
        config.validate()?;
        let options = TrainOptions {
            precision: PrecisionMode::Fp32,
            lr: 0.0,
            ..TrainOptions::default()
        };
        let teacher = Dlrm::new_local(config.clone(), seed ^ 0x7EAC_4E55_D1A7_0001, options)?;
        Ok(Self {
            config: config.clone(),
            sampler: IndexSampler::new(config.rows, dist)?,
            teacher,
            rng: ChaCha8Rng::seed_from_u64(seed),
            calibrated: false,
        })
    }

    fn unlabelled(&mut self, batch: usize) -> Result<MiniBatch> {
        let d = self.config.dense_width();
        let dense: Vec<f32> = (0..batch * d).map(|_| self.rng.random::<f32>()).collect();
        let lookups = (0..self.config.tables)
            .map(|_| random_lookups(&self.sampler, batch, self.config.lookups, &mut self.rng))
            .collect();
        MiniBatch::new(DenseTensor::from_vec(&[batch, d], dense)?, lookups, vec![0.0; batch])
    }

    /// Next labelled batch of `batch` samples.
    pub fn next_batch(&mut self, batch: usize) -> Result<MiniBatch> {
        let mut mb = self.unlabelled(batch)?;
        let mut p = self.teacher.predict(&mb)?;
        if !self.calibrated {
            // Shift the teacher's output bias so its median logit sits at
            // zero; thresholding at 0.5 then gives balanced labels.
            let mut sorted = p.clone();
            sorted.sort_by(f32::total_cmp);
            let median = sorted[sorted.len() / 2].clamp(1e-6, 1.0 - 1e-6);
            let logit = (median / (1.0 - median)).ln();
            let last = self.teacher.num_layers() - 1;
            self.teacher.layer_mut(last).params_mut().1[0] -= logit;
            self.calibrated = true;
            p = self.teacher.predict(&mb)?;
        }
        mb.labels = p.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        Ok(mb)
    }
}

/// `count` batches of `batch` samples each.
pub fn generate_synthetic(
    config: &DlrmConfig,
    seed: u64,
    dist: IndexDistribution,
    batch: usize,
    count: usize,
) -> Result<Vec<MiniBatch>> {
    let mut gen = SyntheticData::new(config, seed, dist)?;
    (0..count).map(|_| gen.next_batch(batch)).collect()
}
