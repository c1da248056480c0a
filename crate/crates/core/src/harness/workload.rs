//! YCSB-style workload generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Zipf};
use serde::{Deserialize, Serialize};

use crate::types::{ClientId, Op};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyDistribution {
    Zipfian { theta: f64 },
    Uniform,
}

impl Default for KeyDistribution {
    fn default() -> Self {
        KeyDistribution::Zipfian { theta: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub key_count: u64,
    pub distribution: KeyDistribution,
    pub read_ratio: f64,
    pub value_size: usize,
    pub op_count: usize,
    pub client_count: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            key_count: 10_000,
            distribution: KeyDistribution::default(),
            read_ratio: 0.5,
            value_size: 64,
            op_count: 200,
            client_count: 8,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.read_ratio) {
            return Err(format!("read_ratio {} outside [0, 1]", self.read_ratio));
        }
        if self.value_size == 0 {
            return Err("value_size must be positive".into());
        }
        if self.key_count == 0 {
            return Err("key_count must be positive".into());
        }
        if self.client_count == 0 {
            return Err("client_count must be positive".into());
        }
        if let KeyDistribution::Zipfian { theta } = self.distribution {
            if !(theta > 0.0) || !theta.is_finite() {
                return Err(format!("zipf theta {theta} must be positive"));
            }
        }
        Ok(())
    }
}

/// One generated operation, already assigned to a client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkItem {
    pub client: ClientId,
    pub op: Op,
}

pub fn key_name(rank: u64) -> Vec<u8> {
    format!("user{rank:06}").into_bytes()
}

/// Deterministic operation stream. Clients are assigned round-robin, and
/// every written value is unique: its first eight bytes carry the operation
/// index, the rest is random.
pub fn gen_workload(spec: &WorkloadSpec, seed: u64) -> Vec<WorkItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3c5b_1a3e);
    let zipf = match spec.distribution {
        KeyDistribution::Zipfian { theta } => {
            Some(Zipf::new(spec.key_count, theta).expect("validated zipf parameters"))
        }
        KeyDistribution::Uniform => None,
    };
    (0..spec.op_count)
        .map(|i| {
            let rank = match &zipf {
                Some(z) => (z.sample(&mut rng) as u64).clamp(1, spec.key_count) - 1,
                None => rng.gen_range(0..spec.key_count),
            };
            let key = key_name(rank);
            let op = if rng.gen_bool(spec.read_ratio) {
                Op::Get { key }
            } else {
                let mut value = vec![0u8; spec.value_size];
                rng.fill(&mut value[..]);
                let tag = (i as u64).to_le_bytes();
                let n = tag.len().min(value.len());
                value[..n].copy_from_slice(&tag[..n]);
                Op::Put { key, value }
            };
            WorkItem {
                client: ClientId((i % spec.client_count) as u32),
                op,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = WorkloadSpec::default();
        assert_eq!(gen_workload(&spec, 5), gen_workload(&spec, 5));
        assert_ne!(gen_workload(&spec, 5), gen_workload(&spec, 6));
    }

    #[test]
    fn all_reads_means_no_writes() {
        let spec = WorkloadSpec {
            read_ratio: 1.0,
            op_count: 1000,
            ..Default::default()
        };
        assert!(gen_workload(&spec, 1).iter().all(|w| !w.op.is_write()));
    }

    #[test]
    fn read_fraction_within_one_percent() {
        for ratio in [0.5, 0.75, 0.9, 0.95, 0.99] {
            let spec = WorkloadSpec {
                read_ratio: ratio,
                op_count: 20_000,
                ..Default::default()
            };
            let ops = gen_workload(&spec, 42);
            let reads = ops.iter().filter(|w| !w.op.is_write()).count() as f64;
            assert!((reads / 20_000.0 - ratio).abs() < 0.01, "ratio {ratio}");
        }
    }

    #[test]
    fn zipf_head_matches_analytic_mass() {
        let spec = WorkloadSpec {
            op_count: 100_000,
            read_ratio: 1.0,
            ..Default::default()
        };
        let hits = gen_workload(&spec, 9)
            .iter()
            .filter(|w| w.op.key() == key_name(0).as_slice())
            .count() as f64;
        // P(rank 1) = 1 / H(n, theta), with the harmonic number summed directly.
        let h: f64 = (1..=10_000u64).map(|k| (k as f64).powf(-0.99)).sum();
        let expected = 100_000.0 / h;
        assert!(((hits - expected) / expected).abs() < 0.10, "{hits} vs {expected}");
    }

    #[test]
    fn written_values_are_unique() {
        let spec = WorkloadSpec {
            read_ratio: 0.0,
            op_count: 500,
            value_size: 16,
            key_count: 3,
            ..Default::default()
        };
        let mut vals: Vec<Vec<u8>> = gen_workload(&spec, 3)
            .into_iter()
            .filter_map(|w| match w.op {
                Op::Put { value, .. } => Some(value),
                _ => None,
            })
            .collect();
        vals.sort();
        vals.dedup();
        assert_eq!(vals.len(), 500);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = WorkloadSpec::default();
        s.read_ratio = 1.5;
        assert!(s.validate().is_err());
        s.read_ratio = 0.5;
        s.value_size = 0;
        assert!(s.validate().is_err());
    }
}
