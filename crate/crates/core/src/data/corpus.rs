use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::Vocab;
use crate::error::{contract, format_err, Error, Result};
use crate::transformer::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Domain,
    LanguagePair,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "domain" => Ok(TaskKind::Domain),
            "language_pair" => Ok(TaskKind::LanguagePair),
            other => Err(format_err("task kind", other)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Domain => "domain",
            TaskKind::LanguagePair => "language_pair",
        }
    }
}

/// Parallel sentences as raw text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextCorpus {
    pub pairs: Vec<(String, String)>,
}

/// Parallel sentences as token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Tokenizes both sides. Pairs with an empty side are rejected.
    pub fn encode(&self, vocab: &Vocab) -> Result<Corpus> {
        let pairs = self
            .pairs
            .iter()
            .map(|(s, t)| {
                let ex = Example {
                    src: vocab.encode(s),
                    tgt: vocab.encode(t),
                };
                if ex.src.is_empty() || ex.tgt.is_empty() {
                    Err(contract(format!("empty side after tokenization: {s:?} / {t:?}")))
                } else {
                    Ok(ex)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { pairs })
    }
}

/// A task's text splits before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTask {
    pub id: String,
    pub kind: TaskKind,
    pub train: TextCorpus,
    pub dev: TextCorpus,
    pub test: TextCorpus,
}

impl TextTask {
    pub fn encode(&self, vocab: &Vocab) -> Result<TaskSpec> {
        let train = self.train.encode(vocab)?;
        Ok(TaskSpec {
            id: self.id.clone(),
            kind: self.kind,
            size: train.len(),
            train,
            dev: self.dev.encode(vocab)?,
            test: self.test.encode(vocab)?,
        })
    }

    pub fn split(&self, name: &str) -> Result<&TextCorpus> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(contract(format!("unknown split {other}"))),
        }
    }
}

/// A tokenized task; `size` is the training pair count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub size: usize,
}

impl TaskSpec {
    pub fn split(&self, name: &str) -> Result<&Corpus> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(contract(format!("unknown split {other}"))),
        }
    }
}

/// Puts the task's conditioning token in front of the source.
pub fn prepend_task_token(pair: &Example, token_id: usize) -> Example {
    let mut src = Vec::with_capacity(pair.src.len() + 1);
    src.push(token_id);
    src.extend_from_slice(&pair.src);
    Example {
        src,
        tgt: pair.tgt.clone(),
    }
}

/// Uniform subsample without replacement of `round(fraction·N)` pairs (at
/// least one), kept in corpus order.
pub fn subsample<T: Clone>(pairs: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(contract(format!("fraction {fraction} outside (0, 1]")));
    }
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let n = ((fraction * pairs.len() as f64).round() as usize).clamp(1, pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pairs.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pairs[i].clone()).collect())
}

/// Writes `<prefix>.src` and `<prefix>.tgt`, one sentence per line.
pub fn write_text_corpus(corpus: &TextCorpus, prefix: &Path) -> Result<()> {
    let mut src = fs::File::create(with_ext(prefix, "src"))?;
    let mut tgt = fs::File::create(with_ext(prefix, "tgt"))?;
    for (s, t) in &corpus.pairs {
        writeln!(src, "{s}")?;
        writeln!(tgt, "{t}")?;
    }
    Ok(())
}

pub fn read_text_corpus(prefix: &Path) -> Result<TextCorpus> {
    let src = fs::read_to_string(with_ext(prefix, "src"))?;
    let tgt = fs::read_to_string(with_ext(prefix, "tgt"))?;
    let s: Vec<&str> = src.lines().collect();
    let t: Vec<&str> = tgt.lines().collect();
    if s.len() != t.len() {
        return Err(format_err(
            "parallel corpus",
            format!("{}: {} source vs {} target lines", prefix.display(), s.len(), t.len()),
        ));
    }
    Ok(TextCorpus {
        pairs: s
            .into_iter()
            .zip(t)
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
    })
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// One task record of a manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: TaskKind,
    /// Split file prefixes (`<prefix>.src` / `<prefix>.tgt`), relative to the manifest.
    pub train: String,
    pub dev: String,
    pub test: String,
    pub size: usize,
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        format!(
            "id={} kind={} size={} train={} dev={} test={}",
            self.id,
            self.kind.as_str(),
            self.size,
            self.train,
            self.dev,
            self.test
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let mut id = None;
        let mut kind = None;
        let mut size = None;
        let (mut train, mut dev, mut test) = (None, None, None);
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| format_err("manifest", format!("field without '=': {field}")))?;
            match k {
                "id" => id = Some(v.to_string()),
                "kind" => kind = Some(TaskKind::parse(v)?),
                "size" => {
                    size = Some(
                        v.parse()
                            .map_err(|_| format_err("manifest", format!("bad size {v}")))?,
                    )
                }
                "train" => train = Some(v.to_string()),
                "dev" => dev = Some(v.to_string()),
                "test" => test = Some(v.to_string()),
                other => return Err(format_err("manifest", format!("unknown key {other}"))),
            }
        }
        let need = |o: Option<String>, k: &str| {
            o.ok_or_else(|| format_err("manifest", format!("missing {k} in: {line}")))
        };
        Ok(ManifestEntry {
            id: need(id, "id")?,
            kind: kind.unwrap_or(TaskKind::Domain),
            size: size.ok_or_else(|| format_err("manifest", format!("missing size in: {line}")))?,
            train: need(train, "train")?,
            dev: need(dev, "dev")?,
            test: need(test, "test")?,
        })
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a manifest and the text corpora it points at. Each task's declared
/// size must equal its training pair count.
pub fn load_manifest(path: &Path) -> Result<Vec<TextTask>> {
    let text = fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tasks = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let e = ManifestEntry::parse(line)?;
        let task = TextTask {
            id: e.id.clone(),
            kind: e.kind,
            train: read_text_corpus(&dir.join(&e.train))?,
            dev: read_text_corpus(&dir.join(&e.dev))?,
            test: read_text_corpus(&dir.join(&e.test))?,
        };
        if task.train.len() != e.size {
            return Err(format_err(
                "manifest",
                format!("task {} declares size {} but has {}", e.id, e.size, task.train.len()),
            ));
        }
        if tasks.iter().any(|t: &TextTask| t.id == e.id) {
            return Err(Error::AlreadyExists(e.id));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, TokenMode};

    #[test]
    fn subsample_sizes_and_determinism() {
        let xs: Vec<usize> = (0..100).collect();
        let a = subsample(&xs, 0.25, 3).unwrap();
        assert_eq!(a.len(), 25);
        assert_eq!(a, subsample(&xs, 0.25, 3).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(&xs, 0.001, 3).unwrap().len(), 1);
        assert_eq!(subsample(&xs, 1.0, 3).unwrap(), xs);
        assert!(subsample(&xs, 0.0, 3).is_err());
    }

    #[test]
    fn task_token_goes_first() {
        let e = Example {
            src: vec![7, 8],
            tgt: vec![9],
        };
        assert_eq!(prepend_task_token(&e, 4).src, vec![4, 7, 8]);
    }

    #[test]
    fn empty_side_rejected() {
        let v = build_vocab(["a b"], TokenMode::Word, 10, &[]);
        let c = TextCorpus {
            pairs: vec![("a".into(), "   ".into())],
        };
        assert!(c.encode(&v).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = TextCorpus {
            pairs: vec![("s1 s2".into(), "t1 t2".into()), ("s3".into(), "t3".into())],
        };
        for split in ["train", "dev", "test"] {
            write_text_corpus(&corpus, &dir.path().join(format!("x.{split}"))).unwrap();
        }
        let entry = ManifestEntry {
            id: "x".into(),
            kind: TaskKind::Domain,
            train: "x.train".into(),
            dev: "x.dev".into(),
            test: "x.test".into(),
            size: 2,
        };
        let path = dir.path().join("tasks.manifest");
        write_manifest(&path, std::slice::from_ref(&entry)).unwrap();
        let tasks = load_manifest(&path).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].train, corpus);

        let bad = ManifestEntry { size: 3, ..entry };
        write_manifest(&path, &[bad]).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
