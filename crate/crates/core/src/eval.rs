//! Mean constraint satisfaction error per set size, and cross-scoring of
//! generators against critics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Suite;
use crate::discriminator::Discriminator;
use crate::error::{invalid, Error, Result};
use crate::generator::PlainGenerator;
use crate::nn::ParamSet;
use crate::semantic::{Constraint, SemanticSpace};
use crate::tensor::Tensor;
use crate::training::{sample_z, TrainedModel, ZDist};

/// Anything that maps a constraint set and noise to an image.
pub trait ConditionalGenerator {
    fn n_z(&self) -> usize;
    fn z_dist(&self) -> ZDist;
    fn generate(&self, cs: &[Constraint<&Tensor<f32>>], z: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl ConditionalGenerator for TrainedModel {
    fn n_z(&self) -> usize {
        self.config.generator.n_z
    }

    fn z_dist(&self) -> ZDist {
        self.config.z_dist
    }

    fn generate(&self, cs: &[Constraint<&Tensor<f32>>], z: &Tensor<f32>) -> Result<Tensor<f32>> {
        TrainedModel::generate(self, cs, z)
    }
}

/// Returns the first constraint's positive image unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoPositive;

impl ConditionalGenerator for EchoPositive {
    fn n_z(&self) -> usize {
        1
    }

    fn z_dist(&self) -> ZDist {
        ZDist::Uniform
    }

    fn generate(&self, cs: &[Constraint<&Tensor<f32>>], _z: &Tensor<f32>) -> Result<Tensor<f32>> {
        cs.first()
            .map(|c| c.positive.clone())
            .ok_or(Error::EmptyConstraintSet)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McseRow {
    pub k: usize,
    /// Violated fraction, averaged over sets and trials.
    pub mcse_mean: f64,
    /// Standard deviation across trials of the per-trial mean.
    pub mcse_std: f64,
    pub n_sets: usize,
    pub n_trials: usize,
    pub satisfied: u64,
    pub total: u64,
}

impl McseRow {
    /// Half-width of a `z`-sigma binomial interval around `p` for this row's constraint count.
    pub fn binomial_halfwidth(&self, p: f64, z: f64) -> f64 {
        z * (p * (1.0 - p) / self.total as f64).sqrt()
    }
}

/// RNG for one (set, trial) cell; independent of evaluation order.
pub fn cell_rng(seed: u64, k: usize, set: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 48) | ((set as u64) << 16) | trial as u64);
    rng
}

/// MCSE of `gen` on each suite. `images` and `embeddings` are indexed by id.
pub fn mcse<G: ConditionalGenerator + ?Sized>(
    gen: &G,
    space: &SemanticSpace,
    images: &[Tensor<f32>],
    embeddings: &[Vec<f64>],
    suites: &[Suite],
    trials: usize,
    seed: u64,
) -> Result<Vec<McseRow>> {
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    let lookup = |id: usize| -> Result<(&Tensor<f32>, &Vec<f64>)> {
        match (images.get(id), embeddings.get(id)) {
            (Some(i), Some(e)) => Ok((i, e)),
            _ => Err(invalid(format!("suite references image {id}, dataset has {}", images.len()))),
        }
    };
    let mut rows = Vec::with_capacity(suites.len());
    for suite in suites {
        if suite.entries.is_empty() {
            return Err(invalid(format!("suite k={} is empty", suite.k)));
        }
        let mut per_trial = vec![0.0; trials];
        let (mut satisfied, mut total) = (0u64, 0u64);
        for (si, entry) in suite.entries.iter().enumerate() {
            let cs = entry.constraints();
            let imgs = cs
                .iter()
                .map(|c| Ok(Constraint::new(lookup(c.positive)?.0, lookup(c.negative)?.0)))
                .collect::<Result<Vec<_>>>()?;
            for (t, acc) in per_trial.iter_mut().enumerate() {
                let mut rng = cell_rng(seed, suite.k, si, t);
                let z = sample_z(gen.z_dist(), gen.n_z(), &mut rng);
                let x = gen.generate(&imgs, &z)?;
                let e = space.embed_value(&x)?;
                let mut ok = 0u64;
                for c in &cs {
                    if space.satisfies(&e, lookup(c.positive)?.1, lookup(c.negative)?.1)? {
                        ok += 1;
                    }
                }
                satisfied += ok;
                total += cs.len() as u64;
                *acc += 1.0 - ok as f64 / cs.len() as f64;
            }
        }
        let n_sets = suite.entries.len();
        for v in &mut per_trial {
            *v /= n_sets as f64;
        }
        let mean = per_trial.iter().sum::<f64>() / trials as f64;
        let std = if trials > 1 {
            (per_trial.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(McseRow {
            k: suite.k,
            mcse_mean: mean,
            mcse_std: std,
            n_sets,
            n_trials: trials,
            satisfied,
            total,
        });
    }
    Ok(rows)
}

/// Mean critic score of each sample collection under each critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossScores {
    pub generators: Vec<String>,
    pub discriminators: Vec<String>,
    /// `scores[g][d]`.
    pub scores: Vec<Vec<f64>>,
}

pub fn cross_discriminator_scores(
    samples: &[(String, Vec<Tensor<f32>>)],
    critics: &[(String, &Discriminator, &ParamSet<f32>)],
) -> Result<CrossScores> {
    if samples.iter().any(|(_, s)| s.is_empty()) || critics.is_empty() {
        return Err(invalid("cross scoring needs non-empty sample sets and at least one critic"));
    }
    let scores = samples
        .iter()
        .map(|(_, imgs)| {
            critics
                .iter()
                .map(|(_, d, p)| {
                    let sum = imgs
                        .iter()
                        .map(|x| Ok(d.score(p, x)? as f64))
                        .sum::<Result<f64>>()?;
                    Ok(sum / imgs.len() as f64)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossScores {
        generators: samples.iter().map(|(n, _)| n.clone()).collect(),
        discriminators: critics.iter().map(|(n, _, _)| n.clone()).collect(),
        scores,
    })
}

/// One image per suite entry (cycling if `n` exceeds the suite), fresh z per image.
pub fn sample_conditional<G: ConditionalGenerator + ?Sized>(
    gen: &G,
    images: &[Tensor<f32>],
    suite: &Suite,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    if suite.entries.is_empty() {
        return Err(invalid("empty suite"));
    }
    (0..n)
        .map(|i| {
            let entry = &suite.entries[i % suite.entries.len()];
            let cs: Vec<_> = entry
                .constraints
                .iter()
                .map(|p| Constraint::new(&images[p.pos_id], &images[p.neg_id]))
                .collect();
            let mut rng = cell_rng(seed, suite.k, i, 0);
            gen.generate(&cs, &sample_z(gen.z_dist(), gen.n_z(), &mut rng))
        })
        .collect()
}

pub fn sample_plain(
    gen: &PlainGenerator,
    params: &ParamSet<f32>,
    dist: ZDist,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| gen.generate(params, &sample_z(dist, gen.config.n_z, &mut rng)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub checkpoint: String,
    pub iteration: u64,
    pub seed: u64,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub mcse: Vec<McseRow>,
    pub cross_scores: Option<CrossScores>,
}

impl EvalReport {
    pub fn mean_mcse(&self) -> f64 {
        self.mcse.iter().map(|r| r.mcse_mean).sum::<f64>() / self.mcse.len().max(1) as f64
    }

    /// Columns `k,mcse_mean,mcse_std,n_sets,n_trials`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,mcse_mean,mcse_std,n_sets,n_trials\n");
        for r in &self.mcse {
            writeln!(s, "{},{:.6},{:.6},{},{}", r.k, r.mcse_mean, r.mcse_std, r.n_sets, r.n_trials)
                .expect("writing to a String");
        }
        s
    }

    /// One row per set size with `mean ± std` in a fixed-width table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>4} | {:>18}", "k", "MCSE").expect("writing to a String");
        writeln!(s, "{:->4}-+-{:->18}", "", "").expect("writing to a String");
        for r in &self.mcse {
            writeln!(s, "{:>4} | {:>8.4} ± {:<7.4}", r.k, r.mcse_mean, r.mcse_std)
                .expect("writing to a String");
        }
        writeln!(s, "mean | {:>8.4}", self.mean_mcse()).expect("writing to a String");
        s
    }

    /// Writes `report.json`, `mcse.csv` and `mcse.txt` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        fs::write(dir.join("mcse.csv"), self.to_csv())?;
        fs::write(dir.join("mcse.txt"), self.to_table())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IdPair, SuiteEntry};

    fn toy() -> (Vec<Tensor<f32>>, Vec<Vec<f64>>, SemanticSpace) {
        let space = SemanticSpace::channel_mean();
        let images: Vec<_> = (0..6)
            .map(|i| Tensor::full(&[3, 8, 8], -1.0 + i as f32 * 0.3))
            .collect();
        let emb = images.iter().map(|x| space.embed_value(x).unwrap()).collect();
        (images, emb, space)
    }

    #[test]
    fn echo_generator_satisfies_single_constraints() {
        let (images, emb, space) = toy();
        let suite = Suite {
            k: 1,
            entries: (0..5)
                .map(|i| SuiteEntry {
                    reference_id: i,
                    constraints: vec![IdPair {
                        pos_id: i,
                        neg_id: (i + 1) % 6,
                    }],
                })
                .collect(),
        };
        let rows = mcse(&EchoPositive, &space, &images, &emb, &[suite], 3, 0).unwrap();
        assert_eq!(rows[0].mcse_mean, 0.0);
        assert_eq!(rows[0].mcse_std, 0.0);
        assert_eq!((rows[0].satisfied, rows[0].total), (15, 15));
    }

    #[test]
    fn reversed_constraints_fail_everywhere() {
        let (images, emb, space) = toy();
        let suite = Suite {
            k: 2,
            entries: vec![SuiteEntry {
                reference_id: 0,
                constraints: vec![IdPair { pos_id: 1, neg_id: 0 }, IdPair { pos_id: 2, neg_id: 0 }],
            }],
        };
        let rows = mcse(&EchoPositive, &space, &images, &emb, &[suite.clone()], 2, 0).unwrap();
        assert_eq!(rows[0].mcse_mean, 0.5);
        let report = EvalReport {
            meta: EvalMeta {
                checkpoint: "none".into(),
                iteration: 0,
                seed: 0,
                trials: 2,
            },
            mcse: rows,
            cross_scores: None,
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "k,mcse_mean,mcse_std,n_sets,n_trials");
        assert_eq!(csv.lines().nth(1).unwrap(), "2,0.500000,0.000000,1,2");
        assert!(mcse(&EchoPositive, &space, &images, &emb, &[suite], 0, 0).is_err());
    }
}
