//! Seeded token-substitution grammar standing in for real parallel corpora.
//!
//! A "language" is a bijection from source words `s0..s{C-1}` to target
//! words `t0..t{C-1}`. A domain shift overrides the mapping of a fraction of
//! source words by permuting their targets among themselves. Optional local
//! reordering swaps a "modifier" word (the first quarter of the source
//! vocabulary) with the word that follows it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{TaskKind, TextCorpus, TextTask};
use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub id: String,
    pub kind: TaskKind,
    pub content_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed of the base bijection; a new value is a new "language".
    pub lang_seed: u64,
    /// Fraction of source words whose translation is overridden.
    pub shift: f64,
    pub shift_seed: u64,
    pub reorder: bool,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            id: "base".into(),
            kind: TaskKind::Domain,
            content_size: 24,
            min_len: 4,
            max_len: 10,
            lang_seed: 1,
            shift: 0.0,
            shift_seed: 0,
            reorder: false,
            train: 1000,
            dev: 100,
            test: 100,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.content_size < 2 {
            return Err(contract("content_size must be at least 2"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(contract("need 1 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(contract("shift must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Word-to-word translation table: `table[s]` is the target index of source word `s`.
    pub fn table(&self) -> Vec<usize> {
        let c = self.content_size;
        let mut base: Vec<usize> = (0..c).collect();
        base.shuffle(&mut ChaCha8Rng::seed_from_u64(self.lang_seed));
        let n = (self.shift * c as f64).round() as usize;
        if n == 0 {
            return base;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.shift_seed ^ 0x5eed_0f_5b1f7);
        let mut chosen: Vec<usize> = (0..c).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(n);
        let mut table = base.clone();
        if n == 1 {
            let s = chosen[0];
            let other = (s + 1 + rng.random_range(0..c - 1)) % c;
            table[s] = base[other];
            return table;
        }
        // a random derangement of the chosen words' targets
        let mut perm: Vec<usize> = (0..n).collect();
        loop {
            perm.shuffle(&mut rng);
            if perm.iter().enumerate().all(|(i, &p)| i != p) {
                break;
            }
        }
        for (i, &p) in perm.iter().enumerate() {
            table[chosen[i]] = base[chosen[p]];
        }
        table
    }

    fn is_modifier(&self, s: usize) -> bool {
        s < self.content_size / 4
    }

    /// Target word indices for a source sentence given as word indices.
    pub fn translate(&self, table: &[usize], src: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(src.len());
        let mut i = 0;
        while i < src.len() {
            if self.reorder && self.is_modifier(src[i]) && i + 1 < src.len() {
                out.push(table[src[i + 1]]);
                out.push(table[src[i]]);
                i += 2;
            } else {
                out.push(table[src[i]]);
                i += 1;
            }
        }
        out
    }
}

fn render(prefix: char, ids: &[usize]) -> String {
    ids.iter()
        .map(|i| format!("{prefix}{i}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates train/dev/test splits for `spec`; sentences are drawn from `seed`.
pub fn make_synthetic_task(spec: &SyntheticSpec, seed: u64) -> Result<TextTask> {
    spec.validate()?;
    let table = spec.table();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| {
        let pairs = (0..n)
            .map(|_| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let src: Vec<usize> = (0..len)
                    .map(|_| rng.random_range(0..spec.content_size))
                    .collect();
                let tgt = spec.translate(&table, &src);
                (render('s', &src), render('t', &tgt))
            })
            .collect();
        TextCorpus { pairs }
    };
    let train = split(spec.train);
    let dev = split(spec.dev);
    let test = split(spec.test);
    Ok(TextTask {
        id: spec.id.clone(),
        kind: spec.kind,
        train,
        dev,
        test,
    })
}
