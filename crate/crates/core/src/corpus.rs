//! Vocabulary, n-gram encoding and batching for whitespace-tokenized text
//! with one sentence per line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_UNK: &str = "<unk>";
pub const DEFAULT_BOUNDARY: &str = "<s>";

const CACHE_MAGIC: &[u8; 4] = b"ZLNG";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabConfig {
    /// Keep at most this many regular tokens.
    pub max_size: Option<usize>,
    /// Drop tokens seen fewer times than this.
    pub min_count: u64,
    pub unk: String,
    /// Padding token for sentence starts; `None` pads with `unk`.
    pub boundary: Option<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: None,
            min_count: 1,
            unk: DEFAULT_UNK.to_string(),
            boundary: Some(DEFAULT_BOUNDARY.to_string()),
        }
    }
}

/// Token ids ordered by descending frequency (ties by first occurrence),
/// followed by the unknown token and the boundary token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    unk_id: usize,
    boundary_id: Option<usize>,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, unk_id: usize, boundary_id: Option<usize>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        if unk_id >= tokens.len() || boundary_id.is_some_and(|b| b >= tokens.len() || b == unk_id) {
            return Err(Error::Data("special token id out of range".into()));
        }
        Ok(Vocab { tokens, counts, index, unk_id, boundary_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn boundary_id(&self) -> Option<usize> {
        self.boundary_id
    }

    /// Id of `token`, or the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk_id)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Header `D<TAB>unk[<TAB>boundary]`, then `token<TAB>count`, one id per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "{}\t{}", self.len(), self.tokens[self.unk_id])?;
        if let Some(b) = self.boundary_id {
            write!(w, "\t{}", self.tokens[b])?;
        }
        writeln!(w)?;
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            writeln!(w, "{t}\t{c}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty vocabulary file".into()))??;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Data(format!("bad vocabulary header `{header}`")));
        }
        let size: usize = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("bad vocabulary size `{}`", fields[0])))?;
        let mut tokens = Vec::with_capacity(size);
        let mut counts = Vec::with_capacity(size);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, count) = match line.split_once('\t') {
                Some((t, c)) => (t, c.parse().map_err(|_| Error::Data(format!("bad count on vocabulary line {}", i + 2)))?),
                None => (line.as_str(), 0),
            };
            tokens.push(tok.to_string());
            counts.push(count);
        }
        if tokens.len() != size {
            return Err(Error::Data(format!("vocabulary header says {size} tokens, file has {}", tokens.len())));
        }
        let find = |name: &str| {
            tokens
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| Error::Data(format!("special token `{name}` missing from vocabulary")))
        };
        let unk_id = find(fields[1])?;
        let boundary_id = fields.get(2).map(|b| find(b)).transpose()?;
        Self::from_parts(tokens, counts, unk_id, boundary_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Counts whitespace tokens and keeps the most frequent ones.
///
/// The unknown token's count is the number of corpus tokens mapped to it, so
/// the counts sum to the corpus token count. The boundary token never
/// occurs as a target and has count zero unless it appears literally.
pub fn build_vocab<R: BufRead>(reader: R, cfg: &VocabConfig) -> Result<Vocab> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: Vec<(String, u64)> = Vec::new();
    let mut unk_count = 0u64;
    let mut boundary_count = 0u64;
    let mut total = 0u64;
    for line in reader.lines() {
        let line = line?;
        for tok in line.split_whitespace() {
            total += 1;
            if tok == cfg.unk {
                unk_count += 1;
            } else if cfg.boundary.as_deref() == Some(tok) {
                boundary_count += 1;
            } else if let Some(&i) = index.get(tok) {
                seen[i].1 += 1;
            } else {
                index.insert(tok.to_string(), seen.len());
                seen.push((tok.to_string(), 1));
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("corpus contains no tokens".into()));
    }
    // Stable sort keeps first-occurrence order among equal counts.
    seen.sort_by_key(|s| std::cmp::Reverse(s.1));
    let keep = seen
        .iter()
        .take_while(|(_, c)| *c >= cfg.min_count)
        .count()
        .min(cfg.max_size.unwrap_or(usize::MAX));
    unk_count += seen[keep..].iter().map(|(_, c)| c).sum::<u64>();
    seen.truncate(keep);

    let (mut tokens, mut counts): (Vec<String>, Vec<u64>) = seen.into_iter().unzip();
    let unk_id = tokens.len();
    tokens.push(cfg.unk.clone());
    counts.push(unk_count);
    let boundary_id = cfg.boundary.as_ref().map(|b| {
        tokens.push(b.clone());
        counts.push(boundary_count);
        tokens.len() - 1
    });
    Vocab::from_parts(tokens, counts, unk_id, boundary_id)
}

pub fn build_vocab_from_path(path: &Path, cfg: &VocabConfig) -> Result<Vocab> {
    build_vocab(BufReader::new(File::open(path)?), cfg)
}

/// `N` examples of `context_len` context ids and one target id each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NgramDataset {
    context_len: usize,
    contexts: Vec<u32>,
    targets: Vec<u32>,
}

impl NgramDataset {
    pub fn new(context_len: usize, contexts: Vec<u32>, targets: Vec<u32>) -> Result<Self> {
        if context_len < 1 {
            return Err(Error::Config("context length must be >= 1".into()));
        }
        if targets.is_empty() {
            return Err(Error::Data("dataset has no examples".into()));
        }
        if contexts.len() != targets.len() * context_len {
            return Err(Error::Data("context matrix does not match the number of targets".into()));
        }
        Ok(NgramDataset { context_len, contexts, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn context(&self, i: usize) -> &[u32] {
        &self.contexts[i * self.context_len..(i + 1) * self.context_len]
    }

    pub fn target(&self, i: usize) -> usize {
        self.targets[i] as usize
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    pub fn max_id(&self) -> usize {
        self.contexts.iter().chain(&self.targets).copied().max().unwrap_or(0) as usize
    }

    /// Fails unless every id is below `n_classes`.
    pub fn check_ids(&self, n_classes: usize) -> Result<()> {
        let max = self.max_id();
        if max >= n_classes {
            return Err(Error::Data(format!("id {max} out of range for vocabulary of size {n_classes}")));
        }
        Ok(())
    }

    /// 16-byte header (magic, `N` as u64, `n` as u32), then `N` rows of
    /// `n` little-endian u32: the context followed by the target.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&((self.context_len + 1) as u32).to_le_bytes())?;
        for i in 0..self.len() {
            for &id in self.context(i) {
                w.write_all(&id.to_le_bytes())?;
            }
            w.write_all(&self.targets[i].to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        self.write_cache(BufWriter::new(File::create(path)?))
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != CACHE_MAGIC {
            return Err(Error::Data("not an n-gram cache file".into()));
        }
        let n_rows = u64::from_le_bytes(header[4..12].try_into().expect("8 bytes")) as usize;
        let n = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
        if n < 2 {
            return Err(Error::Data(format!("cache has n = {n}")));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != n_rows * n * 4 {
            return Err(Error::Data("n-gram cache is truncated or has trailing bytes".into()));
        }
        let ids: Vec<u32> = body.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let mut contexts = Vec::with_capacity(n_rows * (n - 1));
        let mut targets = Vec::with_capacity(n_rows);
        for row in ids.chunks_exact(n) {
            contexts.extend_from_slice(&row[..n - 1]);
            targets.push(row[n - 1]);
        }
        Self::new(n - 1, contexts, targets)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        Self::read_cache(BufReader::new(File::open(path)?))
    }
}

/// One example per token: each line is prefixed with `n - 1` boundary
/// tokens and every real token becomes a target once.
pub fn encode_ngrams<R: BufRead>(reader: R, vocab: &Vocab, n: usize) -> Result<NgramDataset> {
    if n < 2 {
        return Err(Error::Config(format!("n-gram order must be >= 2, got {n}")));
    }
    let ctx = n - 1;
    let pad = vocab.boundary_id().unwrap_or(vocab.unk_id()) as u32;
    let mut contexts = Vec::new();
    let mut targets = Vec::new();
    let mut window = vec![pad; ctx];
    for line in reader.lines() {
        let line = line?;
        window.iter_mut().for_each(|w| *w = pad);
        for tok in line.split_whitespace() {
            let id = vocab.id(tok) as u32;
            contexts.extend_from_slice(&window);
            targets.push(id);
            window.rotate_left(1);
            window[ctx - 1] = id;
        }
    }
    NgramDataset::new(ctx, contexts, targets)
}

pub fn encode_ngrams_from_path(path: &Path, vocab: &Vocab, n: usize) -> Result<NgramDataset> {
    encode_ngrams(BufReader::new(File::open(path)?), vocab, n)
}

/// Index batches over a dataset; a seeded permutation or the original order.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_stream(n_examples: usize, batch_size: usize, seed: Option<u64>) -> Result<BatchStream> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    if let Some(s) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    Ok(BatchStream { order, batch_size, pos: 0 })
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn vocab_of(text: &str, max_size: Option<usize>) -> Vocab {
        build_vocab(Cursor::new(text), &VocabConfig { max_size, ..Default::default() }).unwrap()
    }

    #[test]
    fn hand_counted_vocab() {
        let v = vocab_of("a b a", Some(2));
        assert_eq!(v.id("a"), 0);
        assert_eq!(v.id("b"), 1);
        assert_eq!(v.token(v.unk_id()), Some("<unk>"));
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("zzz"), v.unk_id());
    }

    #[test]
    fn cutoffs_map_to_unk() {
        let v = vocab_of("x y y z z z w", Some(2));
        assert_eq!(v.id("z"), 0);
        assert_eq!(v.id("y"), 1);
        assert_eq!(v.id("x"), v.unk_id());
        assert_eq!(v.counts()[v.unk_id()], 2);
        let cfg = VocabConfig { min_count: 2, ..Default::default() };
        let v = build_vocab(Cursor::new("x y y z z z w"), &cfg).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn ties_keep_first_occurrence() {
        let v = vocab_of("q p r p q r s", None);
        assert_eq!((v.id("q"), v.id("p"), v.id("r"), v.id("s")), (0, 1, 2, 3));
    }

    #[test]
    fn counts_sum_to_token_count() {
        let text = "the cat sat\non the mat\n<unk> cat the";
        let v = vocab_of(text, Some(2));
        assert_eq!(v.counts().iter().sum::<u64>(), 9);
        for t in ["the", "cat"] {
            assert_eq!(v.token(v.id(t)), Some(t));
        }
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        assert!(matches!(build_vocab(Cursor::new("\n  \n"), &VocabConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab_of("a b c a b a", None);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("5\t<unk>\t<s>\na\t3\n"));
        assert_eq!(Vocab::read_from(Cursor::new(buf)).unwrap(), v);
        assert!(Vocab::read_from(Cursor::new("3\t<unk>\na\t1\n")).is_err());
    }

    #[test]
    fn padded_pairs() {
        let v = vocab_of("a b", None);
        let ds = encode_ngrams(Cursor::new("a b"), &v, 3).unwrap();
        let s = v.boundary_id().unwrap() as u32;
        let (a, b) = (v.id("a") as u32, v.id("b") as u32);
        assert_eq!(ds.len(), 2);
        assert_eq!((ds.context(0), ds.target(0)), (&[s, s][..], a as usize));
        assert_eq!((ds.context(1), ds.target(1)), (&[s, a][..], b as usize));
    }

    #[test]
    fn one_pair_per_token() {
        let text = "a\n\nb c d e\nf a";
        let v = vocab_of(text, Some(3));
        let ds = encode_ngrams(Cursor::new(text), &v, 4).unwrap();
        assert_eq!(ds.len(), 7);
        let single = encode_ngrams(Cursor::new("a"), &v, 7).unwrap();
        assert_eq!(single.len(), 1);
        // Contexts never cross a line boundary.
        let s = v.boundary_id().unwrap() as u32;
        assert_eq!(ds.context(5), &[s, s, s]);
        assert!(ds.targets().iter().all(|&t| t as usize != v.boundary_id().unwrap()));
        assert!(encode_ngrams(Cursor::new("a"), &v, 1).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let text = "a b c\nc b a a";
        let v = vocab_of(text, None);
        let ds = encode_ngrams(Cursor::new(text), &v, 3).unwrap();
        let mut buf = Vec::new();
        ds.write_cache(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + ds.len() * 3 * 4);
        assert_eq!(&buf[..4], b"ZLNG");
        assert_eq!(NgramDataset::read_cache(Cursor::new(&buf)).unwrap(), ds);
        buf.pop();
        assert!(NgramDataset::read_cache(Cursor::new(&buf)).is_err());
    }

    #[test]
    fn batches() {
        let sizes: Vec<usize> = batch_stream(10, 4, None).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let plain: Vec<usize> = batch_stream(10, 3, None).unwrap().flatten().collect();
        assert_eq!(plain, (0..10).collect::<Vec<_>>());
        let a: Vec<usize> = batch_stream(50, 7, Some(3)).unwrap().flatten().collect();
        let b: Vec<usize> = batch_stream(50, 7, Some(3)).unwrap().flatten().collect();
        assert_eq!(a, b);
        assert_ne!(a, (0..50).collect::<Vec<_>>());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert!(batch_stream(5, 0, None).is_err());
    }
}
