//! Synthetic preference corpora: a character tokenizer, analytic oracle
//! rewards, corpus generation from a seed model, the JSON Lines file format
//! and batching.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nanolm::{NanoLm, SampleOptions, TokenBatch};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
const N_SPECIAL: usize = 4;

/// Response alphabet shared by all tasks.
pub const ALPHABET: &str = "abcdefgh()";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SortedRun,
    BalancedBrackets,
    TargetCount,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::SortedRun, Task::BalancedBrackets, Task::TargetCount];

    /// First character of every prompt for this task.
    pub fn tag(self) -> char {
        match self {
            Task::SortedRun => 'S',
            Task::BalancedBrackets => 'B',
            Task::TargetCount => 'T',
        }
    }

    pub fn from_tag(c: char) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.tag() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::SortedRun => "sorted-run",
            Task::BalancedBrackets => "balanced-brackets",
            Task::TargetCount => "target-count",
        }
    }

    fn prompt_alphabet(self) -> &'static str {
        match self {
            Task::SortedRun | Task::TargetCount => "abcdefgh",
            Task::BalancedBrackets => "()",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Number of `a` characters the target-count task rewards.
pub const TARGET_COUNT: usize = 3;

/// Deterministic score in `[0, 1]`; an empty response scores 0.
pub fn oracle_reward(task: Task, response: &str) -> f64 {
    let chars: Vec<char> = response.chars().collect();
    if chars.is_empty() {
        return 0.0;
    }
    match task {
        Task::SortedRun => {
            let (mut best, mut run) = (1, 1);
            for w in chars.windows(2) {
                run = if w[1] >= w[0] { run + 1 } else { 1 };
                best = best.max(run);
            }
            best as f64 / chars.len() as f64
        }
        Task::BalancedBrackets => {
            let (mut open, mut pairs, mut total) = (0usize, 0usize, 0usize);
            for &c in &chars {
                match c {
                    '(' => {
                        open += 1;
                        total += 1;
                    }
                    ')' => {
                        total += 1;
                        if open > 0 {
                            open -= 1;
                            pairs += 1;
                        }
                    }
                    _ => {}
                }
            }
            if total == 0 {
                0.0
            } else {
                2.0 * pairs as f64 / total as f64
            }
        }
        Task::TargetCount => {
            let n = chars.iter().filter(|&&c| c == 'a').count();
            1.0 / (1.0 + n.abs_diff(TARGET_COUNT) as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharTokenizer {
    chars: Vec<char>,
}

impl Default for CharTokenizer {
    fn default() -> Self {
        let mut chars: Vec<char> = ALPHABET.chars().collect();
        chars.extend(Task::ALL.iter().map(|t| t.tag()));
        CharTokenizer { chars }
    }
}

impl CharTokenizer {
    pub fn vocab_size(&self) -> usize {
        N_SPECIAL + self.chars.len()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + N_SPECIAL)
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| self.id(c).ok_or_else(|| Error::Domain(format!("character {c:?} not in vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                i.checked_sub(N_SPECIAL)
                    .and_then(|j| self.chars.get(j).copied())
                    .ok_or_else(|| Error::Domain(format!("token {i} is not a character")))
            })
            .collect()
    }

    /// Tokens a response may never contain: specials other than EOS, and
    /// task tags.
    pub fn banned_in_response(&self) -> Vec<usize> {
        let mut b = vec![PAD, BOS, SEP];
        b.extend(Task::ALL.iter().filter_map(|t| self.id(t.tag())));
        b
    }

    /// `BOS prompt SEP`.
    pub fn prompt_ids(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(prompt)?);
        ids.push(SEP);
        Ok(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    /// Oracle scores of (chosen, rejected).
    pub scores: (f64, f64),
}

impl PreferenceRecord {
    pub fn task(&self) -> Option<Task> {
        self.prompt.chars().next().and_then(Task::from_tag)
    }
}

/// A random task prompt: the task tag followed by 2–6 characters.
pub fn random_prompt(task: Task, rng: &mut impl Rng) -> String {
    let alpha: Vec<char> = task.prompt_alphabet().chars().collect();
    let n = rng.random_range(2..=6);
    std::iter::once(task.tag())
        .chain((0..n).map(|_| alpha[rng.random_range(0..alpha.len())]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub task: Task,
    pub n_records: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_response_len: usize,
    /// Resamples of a tied pair before the prompt is skipped.
    pub max_resamples: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            task: Task::SortedRun,
            n_records: 200,
            temperature: 1.0,
            seed: 0,
            max_response_len: 10,
            max_resamples: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    pub prompts_tried: usize,
    pub tie_resamples: usize,
    pub tie_skips: usize,
    pub mean_score_gap: f64,
}

pub fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 16);
    rng.random()
}

/// Sample two responses per prompt from `lm`, order them by the oracle and
/// keep strictly ordered pairs. Each prompt draws from seeds derived from
/// `(seed, prompt index)`.
pub fn gen_corpus(lm: &NanoLm, cfg: &CorpusConfig) -> Result<(Vec<PreferenceRecord>, CorpusStats)> {
    let tok = CharTokenizer::default();
    if lm.config().vocab_size < tok.vocab_size() {
        return Err(Error::Config("seed model vocabulary is smaller than the tokenizer's".into()));
    }
    let opts = response_options(cfg.temperature, cfg.max_response_len);
    let mut stats = CorpusStats::default();
    let mut out = Vec::with_capacity(cfg.n_records);
    let cap = 20 * cfg.n_records.max(1);
    let mut gap_sum = 0.0;
    while out.len() < cfg.n_records {
        if stats.prompts_tried >= cap {
            return Err(Error::Corpus(format!(
                "only {} of {} records after {} prompts",
                out.len(),
                cfg.n_records,
                stats.prompts_tried
            )));
        }
        let i = stats.prompts_tried as u64;
        stats.prompts_tried += 1;
        let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i, 0));
        let prompt = random_prompt(cfg.task, &mut prng);
        let ids = tok.prompt_ids(&prompt)?;
        let mut kept = None;
        for attempt in 0..=cfg.max_resamples {
            let s = derive_seed(cfg.seed, i, 1 + attempt as u64);
            let pair = lm.sample_batch(&[ids.clone(), ids.clone()], &opts, &[s, s.wrapping_add(1)])?;
            let a = tok.decode(&pair[0])?;
            let b = tok.decode(&pair[1])?;
            let (sa, sb) = (oracle_reward(cfg.task, &a), oracle_reward(cfg.task, &b));
            if sa != sb {
                kept = Some(if sa > sb { (a, b, sa, sb) } else { (b, a, sb, sa) });
                break;
            }
            if attempt < cfg.max_resamples {
                stats.tie_resamples += 1;
            }
        }
        match kept {
            Some((chosen, rejected, sc, sr)) => {
                gap_sum += sc - sr;
                out.push(PreferenceRecord {
                    prompt,
                    chosen,
                    rejected,
                    scores: (sc, sr),
                });
            }
            None => stats.tie_skips += 1,
        }
    }
    stats.records = out.len();
    stats.mean_score_gap = if out.is_empty() { 0.0 } else { gap_sum / out.len() as f64 };
    Ok((out, stats))
}

pub fn records_to_jsonl(records: &[PreferenceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_records(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(records_to_jsonl(records).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a corpus; every line must be a record whose chosen score beats
/// its rejected score. Blank lines are not allowed.
pub fn read_records(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let tok = CharTokenizer::default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let r: PreferenceRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !(r.scores.0 > r.scores.1) {
            return Err(bad("chosen score must exceed rejected score".into()));
        }
        for s in [&r.prompt, &r.chosen, &r.rejected] {
            tok.encode(s).map_err(|e| bad(e.to_string()))?;
        }
        out.push(r);
    }
    Ok(out)
}

/// Record order for one epoch.
pub fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Tokenized preference pairs, right padded.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceBatch {
    pub chosen: TokenBatch,
    pub rejected: TokenBatch,
    pub chosen_prompt_mask: Tensor,
    pub rejected_prompt_mask: Tensor,
    pub chosen_response_mask: Tensor,
    pub rejected_response_mask: Tensor,
    /// Response token counts, including the end token.
    pub len_chosen: Vec<f64>,
    pub len_rejected: Vec<f64>,
}

/// `BOS prompt SEP response EOS` with per-position prompt and response
/// masks.
fn encode_pair(tok: &CharTokenizer, prompt: &str, response: &str) -> Result<(Vec<usize>, usize)> {
    let mut ids = tok.prompt_ids(prompt)?;
    let p = ids.len();
    ids.extend(tok.encode(response)?);
    ids.push(EOS);
    Ok((ids, p))
}

fn side(tok: &CharTokenizer, records: &[&PreferenceRecord], chosen: bool) -> Result<(TokenBatch, Tensor, Tensor, Vec<f64>)> {
    let pairs: Vec<(&str, &str)> = records
        .iter()
        .map(|r| (r.prompt.as_str(), if chosen { r.chosen.as_str() } else { r.rejected.as_str() }))
        .collect();
    encode_sequences(tok, &pairs)
}

/// Encode `(prompt, response)` pairs as a padded batch. Returns the batch,
/// prompt mask, response mask (including the end token) and response
/// lengths.
pub fn encode_sequences(tok: &CharTokenizer, pairs: &[(&str, &str)]) -> Result<(TokenBatch, Tensor, Tensor, Vec<f64>)> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut prompt_lens = Vec::with_capacity(pairs.len());
    for (prompt, response) in pairs {
        let (ids, p) = encode_pair(tok, prompt, response)?;
        rows.push(ids);
        prompt_lens.push(p);
    }
    let tb = TokenBatch::from_rows(&rows, PAD)?;
    let (b, t) = (tb.batch, tb.seq);
    let mut pm = vec![0.0; b * t];
    let mut rm = vec![0.0; b * t];
    let mut lens = Vec::with_capacity(b);
    for (i, (row, &p)) in rows.iter().zip(&prompt_lens).enumerate() {
        pm[i * t..i * t + p].iter_mut().for_each(|x| *x = 1.0);
        rm[i * t + p..i * t + row.len()].iter_mut().for_each(|x| *x = 1.0);
        lens.push((row.len() - p) as f64);
    }
    Ok((tb, Tensor::new(&[b, t], pm)?, Tensor::new(&[b, t], rm)?, lens))
}

/// Sampling options for task responses: stop at the end token, never emit
/// specials or task tags.
pub fn response_options(temperature: f64, max_len: usize) -> SampleOptions {
    SampleOptions {
        temperature,
        max_new: max_len,
        stop_token: Some(EOS),
        banned: CharTokenizer::default().banned_in_response(),
    }
}

/// One decoded response per prompt, each drawn from its own seed.
pub fn sample_responses(lm: &NanoLm, prompts: &[String], temperature: f64, max_len: usize, seeds: &[u64]) -> Result<Vec<String>> {
    let tok = CharTokenizer::default();
    let ids = prompts.iter().map(|p| tok.prompt_ids(p)).collect::<Result<Vec<_>>>()?;
    let max_len = max_len.min(lm.config().max_seq_len.saturating_sub(1 + ids.iter().map(Vec::len).max().unwrap_or(0)));
    lm.sample_batch(&ids, &response_options(temperature, max_len), seeds)?
        .iter()
        .map(|r| tok.decode(r))
        .collect()
}

impl PreferenceBatch {
    pub fn encode(records: &[&PreferenceRecord], tok: &CharTokenizer) -> Result<Self> {
        let (chosen, cpm, crm, lc) = side(tok, records, true)?;
        let (rejected, rpm, rrm, lr) = side(tok, records, false)?;
        Ok(PreferenceBatch {
            chosen,
            rejected,
            chosen_prompt_mask: cpm,
            rejected_prompt_mask: rpm,
            chosen_response_mask: crm,
            rejected_response_mask: rrm,
            len_chosen: lc,
            len_rejected: lr,
        })
    }

    pub fn len(&self) -> usize {
        self.chosen.batch
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.batch == 0
    }
}

/// Shuffle with `seed`, split into batches (last one may be short) and
/// encode.
pub fn make_batches(records: &[PreferenceRecord], batch_size: usize, seed: u64, tok: &CharTokenizer) -> Result<Vec<PreferenceBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let order = epoch_order(records.len(), seed);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rs: Vec<&PreferenceRecord> = chunk.iter().map(|&i| &records[i]).collect();
            PreferenceBatch::encode(&rs, tok)
        })
        .collect()
}

/// [`read_records`] followed by [`make_batches`].
pub fn load_batches(path: &Path, batch_size: usize, shuffle_seed: u64) -> Result<Vec<PreferenceBatch>> {
    make_batches(&read_records(path)?, batch_size, shuffle_seed, &CharTokenizer::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nanolm::LmConfig;
    use proptest::prelude::*;

    fn seed_lm() -> NanoLm {
        NanoLm::init(&LmConfig {
            vocab_size: CharTokenizer::default().vocab_size(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 24,
            seed: 1,
        })
        .unwrap()
    }

    fn rec(p: &str, c: &str, r: &str) -> PreferenceRecord {
        PreferenceRecord {
            prompt: p.into(),
            chosen: c.into(),
            rejected: r.into(),
            scores: (oracle_reward(Task::SortedRun, c), oracle_reward(Task::SortedRun, r)),
        }
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_reward(Task::SortedRun, "abcdef"), 1.0);
        assert_eq!(oracle_reward(Task::SortedRun, "fedcba"), 1.0 / 6.0);
        assert_eq!(oracle_reward(Task::SortedRun, "aab"), 1.0);
        assert_eq!(oracle_reward(Task::BalancedBrackets, "(()())"), 1.0);
        assert_eq!(oracle_reward(Task::BalancedBrackets, "(("), 0.0);
        assert_eq!(oracle_reward(Task::BalancedBrackets, "ab"), 0.0);
        assert_eq!(oracle_reward(Task::BalancedBrackets, ")(()"), 0.5);
        assert_eq!(oracle_reward(Task::TargetCount, "aaab"), 1.0);
        assert_eq!(oracle_reward(Task::TargetCount, "b"), 0.25);
        for t in Task::ALL {
            assert_eq!(oracle_reward(t, ""), 0.0);
        }
    }

    #[test]
    fn tokenizer_layout() {
        let tok = CharTokenizer::default();
        assert_eq!(tok.vocab_size(), 17);
        assert_eq!(tok.id('a'), Some(4));
        assert!(tok.encode("az").is_err());
        assert!(tok.decode(&[PAD]).is_err());
        assert_eq!(tok.prompt_ids("Sa").unwrap(), vec![BOS, tok.id('S').unwrap(), 4, SEP]);
    }

    proptest! {
        #[test]
        fn tokenizer_round_trips(s in "[abcdefgh()SBT]{0,40}") {
            let tok = CharTokenizer::default();
            prop_assert_eq!(tok.decode(&tok.encode(&s).unwrap()).unwrap(), s);
        }
    }

    #[test]
    fn batch_masks_partition_positions() {
        let records = [rec("Sab", "abc", "ca"), rec("Sbbbbb", "a", "hgfedcba")];
        let refs: Vec<&PreferenceRecord> = records.iter().collect();
        let b = PreferenceBatch::encode(&refs, &CharTokenizer::default()).unwrap();
        for (tb, pm, rm) in [
            (&b.chosen, &b.chosen_prompt_mask, &b.chosen_response_mask),
            (&b.rejected, &b.rejected_prompt_mask, &b.rejected_response_mask),
        ] {
            for i in 0..tb.batch * tb.seq {
                let (p, r, pad) = (pm.data()[i], rm.data()[i], 1.0 - tb.attn_mask.data()[i]);
                assert_eq!(p + r + pad, 1.0);
                if pad == 1.0 {
                    assert_eq!(tb.ids[i], PAD);
                }
            }
        }
        assert_eq!(b.len_chosen, vec![4.0, 2.0]);
        assert_eq!(b.len_rejected, vec![3.0, 9.0]);
        assert_eq!(b.chosen.row(0), &[BOS, 14, 4, 5, SEP, 4, 5, 6, EOS, PAD]);
    }

    #[test]
    fn batching_partitions_and_is_deterministic() {
        let records: Vec<PreferenceRecord> = (0..10).map(|i| rec(&format!("S{}", "ab".repeat(1 + i % 3)), "ab", "ba")).collect();
        let tok = CharTokenizer::default();
        let sizes: Vec<usize> = make_batches(&records, 4, 7, &tok).unwrap().iter().map(PreferenceBatch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(make_batches(&records, 4, 7, &tok).unwrap(), make_batches(&records, 4, 7, &tok).unwrap());
        let mut order = epoch_order(10, 7);
        assert_ne!(order, (0..10).collect::<Vec<_>>());
        order.sort();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn file_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let records = vec![rec("Sab", "abc", "ca"), rec("Sb", "a()", "ba")];
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
        let mut text = records_to_jsonl(&records);
        text.push_str("{\"prompt\": 3}\n");
        std::fs::write(&path, text).unwrap();
        match read_records(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let flipped = PreferenceRecord {
            scores: (0.2, 0.5),
            ..records[0].clone()
        };
        std::fs::write(&path, records_to_jsonl(&[flipped])).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn corpus_is_ordered_and_reproducible() {
        let lm = seed_lm();
        let cfg = CorpusConfig {
            n_records: 40,
            seed: 5,
            ..CorpusConfig::default()
        };
        let (a, stats) = gen_corpus(&lm, &cfg).unwrap();
        let (b, _) = gen_corpus(&lm, &cfg).unwrap();
        assert_eq!(records_to_jsonl(&a), records_to_jsonl(&b));
        assert_eq!(stats.records, 40);
        assert_eq!(stats.prompts_tried, 40 + stats.tie_skips);
        for r in &a {
            assert!(oracle_reward(Task::SortedRun, &r.chosen) > oracle_reward(Task::SortedRun, &r.rejected));
            assert_eq!(r.task(), Some(Task::SortedRun));
        }
    }
}
