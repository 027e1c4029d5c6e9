use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::transformer::Example;

/// `p_l^(1/T) / Σ p^(1/T)` with `p_l = D_l / ΣD`. `T = 1` returns the raw
/// proportions; large `T` approaches uniform.
pub fn temperature_distribution(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(contract("temperature sampling needs at least one task"));
    }
    if sizes.contains(&0) {
        return Err(contract("a task with an empty corpus cannot be sampled"));
    }
    if !(temperature >= 1.0) || !temperature.is_finite() {
        return Err(contract(format!("temperature {temperature} must be >= 1")));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let raw: Vec<f64> = sizes.iter().map(|&s| s as f64 / total).collect();
    if temperature == 1.0 {
        return Ok(raw);
    }
    let scaled: Vec<f64> = raw.iter().map(|p| p.powf(1.0 / temperature)).collect();
    let z: f64 = scaled.iter().sum();
    Ok(scaled.into_iter().map(|p| p / z).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    pub temperature: f64,
    pub probabilities: Vec<f64>,
}

impl SamplingSchedule {
    pub fn new(sizes: &[usize], temperature: f64) -> Result<Self> {
        Ok(SamplingSchedule {
            temperature,
            probabilities: temperature_distribution(sizes, temperature)?,
        })
    }
}

/// Endless, seeded stream of `(task index, pair)`.
///
/// Tasks are drawn i.i.d. from the temperature distribution. Each task walks
/// its own shuffled copy of the training pairs and reshuffles when exhausted,
/// so every pair appears exactly once per task-local epoch.
pub struct SampleStream<'a> {
    corpora: Vec<&'a [Example]>,
    schedule: SamplingSchedule,
    choose: WeightedIndex<f64>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> SampleStream<'a> {
    pub fn new(corpora: Vec<&'a [Example]>, temperature: f64, seed: u64) -> Result<Self> {
        let sizes: Vec<usize> = corpora.iter().map(|c| c.len()).collect();
        let schedule = SamplingSchedule::new(&sizes, temperature)?;
        let choose = WeightedIndex::new(&schedule.probabilities)
            .map_err(|e| contract(format!("sampling weights: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orders = sizes
            .iter()
            .map(|&n| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        Ok(SampleStream {
            cursors: vec![0; corpora.len()],
            corpora,
            schedule,
            choose,
            orders,
            rng,
        })
    }

    pub fn schedule(&self) -> &SamplingSchedule {
        &self.schedule
    }
}

impl<'a> Iterator for SampleStream<'a> {
    type Item = (usize, &'a Example);

    fn next(&mut self) -> Option<Self::Item> {
        let task = self.choose.sample(&mut self.rng);
        if self.cursors[task] == self.orders[task].len() {
            self.orders[task].shuffle(&mut self.rng);
            self.cursors[task] = 0;
        }
        let idx = self.orders[task][self.cursors[task]];
        self.cursors[task] += 1;
        Some((task, &self.corpora[task][idx]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_proportions_at_unit_temperature() {
        assert_eq!(temperature_distribution(&[100, 300], 1.0).unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn high_temperature_is_near_uniform() {
        let p = temperature_distribution(&[1, 1_000_000_000], 100.0).unwrap();
        assert!(p.iter().all(|x| (x - 0.5).abs() <= 0.06), "{p:?}");
    }

    #[test]
    fn moderate_temperature_matches_reference() {
        // reference values from an independent arbitrary-precision evaluation
        let p = temperature_distribution(&[100, 10_000], 5.0).unwrap();
        assert!((p[0] - 0.284_747_248_950_801_4).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 0.715_252_751_049_198_6).abs() < 1e-12);
    }

    #[test]
    fn contract_errors() {
        assert!(temperature_distribution(&[], 1.0).is_err());
        assert!(temperature_distribution(&[3, 0], 1.0).is_err());
        assert!(temperature_distribution(&[3], 0.5).is_err());
    }

    fn corpus(n: usize, tag: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                src: vec![tag, i],
                tgt: vec![i],
            })
            .collect()
    }

    #[test]
    fn every_pair_once_per_task_epoch() {
        let a = corpus(7, 0);
        let stream = SampleStream::new(vec![&a], 1.0, 4).unwrap();
        let drawn: Vec<usize> = stream.take(21).map(|(_, e)| e.src[1]).collect();
        for epoch in drawn.chunks(7) {
            let mut e = epoch.to_vec();
            e.sort_unstable();
            assert_eq!(e, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn stream_is_seeded() {
        let a = corpus(5, 0);
        let b = corpus(50, 1);
        let x: Vec<_> = SampleStream::new(vec![&a, &b], 2.0, 9)
            .unwrap()
            .take(200)
            .map(|(t, e)| (t, e.clone()))
            .collect();
        let y: Vec<_> = SampleStream::new(vec![&a, &b], 2.0, 9)
            .unwrap()
            .take(200)
            .map(|(t, e)| (t, e.clone()))
            .collect();
        assert_eq!(x, y);
    }
}
