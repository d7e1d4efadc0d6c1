//! Evaluation metrics: perplexity, edit-distance error rates, and paired
//! likelihood judgments, plus the unigram baseline and negative-pair
//! construction used to benchmark them.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{batch_cross_entropy, ModelError, ModelParams, Scalar, ScoredSeq};
use crate::vocab::Special;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad eval item: {0}")]
    BadItem(String),
    #[error("got {refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("total reference length is zero; error rate undefined")]
    ZeroReferenceUnits,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which positions of a sequence count toward perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Score every next-token prediction (position 1 onward).
    FullSequence,
    /// Score only tokens after the last generate metatoken — the
    /// task-target segment of a formatted sequence.
    TargetOnly,
}

fn score_mask_for(seq: &[u32], policy: MaskPolicy) -> Result<Vec<bool>, EvalError> {
    if seq.len() < 2 {
        return Err(EvalError::BadItem(format!(
            "sequence of {} tokens has nothing to score",
            seq.len()
        )));
    }
    match policy {
        MaskPolicy::FullSequence => Ok(vec![true; seq.len()]),
        MaskPolicy::TargetOnly => {
            let gen_text = Special::GenerateText.id();
            let gen_speech = Special::GenerateSpeech.id();
            let g = seq
                .iter()
                .rposition(|&id| id == gen_text || id == gen_speech)
                .ok_or_else(|| {
                    EvalError::BadItem("target-only scoring needs a generate token".into())
                })?;
            if g + 1 >= seq.len() {
                return Err(EvalError::BadItem(
                    "no tokens after the generate token".into(),
                ));
            }
            let mut mask = vec![false; seq.len()];
            for m in &mut mask[g + 1..] {
                *m = true;
            }
            Ok(mask)
        }
    }
}

/// Teacher-forced perplexity: exp(total cross-entropy / scored positions).
pub fn perplexity<S: Scalar>(
    params: &ModelParams<S>,
    seqs: &[Vec<u32>],
    policy: MaskPolicy,
) -> Result<f64, EvalError> {
    if seqs.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let masks = seqs
        .iter()
        .map(|s| score_mask_for(s, policy))
        .collect::<Result<Vec<_>, _>>()?;
    let batch: Vec<ScoredSeq<'_>> = seqs
        .iter()
        .zip(&masks)
        .map(|(tokens, score_mask)| ScoredSeq {
            tokens,
            score_mask,
        })
        .collect();
    let (ce, n) = batch_cross_entropy(params, &batch)?;
    Ok((ce / n as f64).exp())
}

fn lev_core<'a, T: PartialEq>(
    a: &[T],
    b: &[T],
    mut prev: &'a mut [usize],
    mut curr: &'a mut [usize],
) -> usize {
    for (j, p) in prev.iter_mut().enumerate() {
        *p = j;
    }
    for i in 1..=a.len() {
        curr[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            curr[j] = sub.min(prev[j] + 1).min(curr[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Levenshtein distance with unit substitution/insertion/deletion costs.
/// Stack-allocated for short inputs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let n = b.len();
    if n < 32 {
        let mut pbuf = [0usize; 32];
        let mut cbuf = [0usize; 32];
        lev_core(a, b, &mut pbuf[..=n], &mut cbuf[..=n])
    } else {
        let mut pbuf = vec![0usize; n + 1];
        let mut cbuf = vec![0usize; n + 1];
        lev_core(a, b, &mut pbuf, &mut cbuf)
    }
}

/// Corpus error rate: summed edit distance over summed reference length.
/// The unit is whatever the caller segmented into (words, characters,
/// speech units). Can exceed 1 for long hypotheses.
pub fn error_rate<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64, EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let total_ref: usize = refs.iter().map(Vec::len).sum();
    if total_ref == 0 {
        return Err(EvalError::ZeroReferenceUnits);
    }
    let total_edits: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| levenshtein(r, h))
        .sum();
    Ok(total_edits as f64 / total_ref as f64)
}

/// Word error rate over whitespace-separated words.
pub fn word_error_rate(refs: &[String], hyps: &[String]) -> Result<f64, EvalError> {
    let split = |s: &String| -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    };
    let r: Vec<Vec<String>> = refs.iter().map(split).collect();
    let h: Vec<Vec<String>> = hyps.iter().map(split).collect();
    error_rate(&r, &h)
}

/// Character error rate (whitespace included as characters).
pub fn char_error_rate(refs: &[String], hyps: &[String]) -> Result<f64, EvalError> {
    let r: Vec<Vec<char>> = refs.iter().map(|s| s.chars().collect()).collect();
    let h: Vec<Vec<char>> = hyps.iter().map(|s| s.chars().collect()).collect();
    error_rate(&r, &h)
}

/// Mean per-token log-probability of `seq` (full-sequence scoring) — the
/// length-normalized likelihood used for paired judgments.
pub fn mean_token_logprob<S: Scalar>(
    params: &ModelParams<S>,
    seq: &[u32],
) -> Result<f64, EvalError> {
    let mask = score_mask_for(seq, MaskPolicy::FullSequence)?;
    let (ce, n) = batch_cross_entropy(
        params,
        &[ScoredSeq {
            tokens: seq,
            score_mask: &mask,
        }],
    )?;
    Ok(-(ce / n as f64))
}

/// Fraction of pairs where the positive item's length-normalized
/// log-likelihood strictly beats the negative's; exact ties score 0.5.
pub fn paired_judgment<S: Scalar>(
    params: &ModelParams<S>,
    pairs: &[(Vec<u32>, Vec<u32>)],
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut score = 0.0;
    for (pos, neg) in pairs {
        let lp = mean_token_logprob(params, pos)?;
        let ln = mean_token_logprob(params, neg)?;
        if lp > ln {
            score += 1.0;
        } else if lp == ln {
            score += 0.5;
        }
    }
    Ok(score / pairs.len() as f64)
}

/// Builds a corrupted negative of `seq`, keeping the first and last token
/// (task opener and ⟨eos⟩) intact: either swaps two differing interior
/// tokens or inserts one drawn from `pool`. None if the sequence is too
/// short to corrupt and the pool is empty.
pub fn corrupt_sequence(
    seq: &[u32],
    pool: &[u32],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<u32>> {
    let len = seq.len();
    let interior = 1..len.saturating_sub(1);
    if interior.len() >= 2 {
        for _ in 0..20 {
            let i = rng.gen_range(interior.clone());
            let j = rng.gen_range(interior.clone());
            if seq[i] != seq[j] {
                let mut out = seq.to_vec();
                out.swap(i, j);
                return Some(out);
            }
        }
    }
    if !pool.is_empty() && len >= 2 {
        let at = rng.gen_range(1..len);
        let tok = pool[rng.gen_range(0..pool.len())];
        let mut out = seq.to_vec();
        out.insert(at, tok);
        return Some(out);
    }
    None
}

/// Pairs each sequence with a corrupted negative (skipping uncorruptible
/// ones).
pub fn make_negative_pairs(
    seqs: &[Vec<u32>],
    pool: &[u32],
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<u32>, Vec<u32>)> {
    seqs.iter()
        .filter_map(|s| corrupt_sequence(s, pool, rng).map(|neg| (s.clone(), neg)))
        .collect()
}

/// Laplace-smoothed unigram language model — the baseline that trained
/// models must beat.
#[derive(Debug, Clone)]
pub struct UnigramBaseline {
    counts: Vec<u64>,
    total: u64,
}

impl UnigramBaseline {
    /// Counts every token of every sequence.
    pub fn fit(seqs: &[Vec<u32>], vocab_size: usize) -> Self {
        let mut counts = vec![0u64; vocab_size];
        let mut total = 0u64;
        for seq in seqs {
            for &tok in seq {
                counts[tok as usize] += 1;
                total += 1;
            }
        }
        Self { counts, total }
    }

    /// log P(token) with add-one smoothing.
    pub fn logprob(&self, token: u32) -> f64 {
        let v = self.counts.len() as f64;
        ((self.counts[token as usize] as f64 + 1.0) / (self.total as f64 + v)).ln()
    }

    /// Perplexity over the same scored positions the model is charged for.
    pub fn perplexity(&self, seqs: &[Vec<u32>], policy: MaskPolicy) -> Result<f64, EvalError> {
        if seqs.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for seq in seqs {
            let mask = score_mask_for(seq, policy)?;
            for (pos, &m) in mask.iter().enumerate().skip(1) {
                if m {
                    total -= self.logprob(seq[pos]);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(EvalError::BadItem("no scored positions".into()));
        }
        Ok((total / n as f64).exp())
    }
}

/// SHA-256 hex digest of a JSON config, for tying reports to the exact
/// settings that produced them.
pub fn config_digest(config: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.to_string().as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// One evaluation result, as written to report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n_items: usize,
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(
        metric: impl Into<String>,
        value: f64,
        n_items: usize,
        config: &serde_json::Value,
    ) -> Self {
        Self {
            metric: metric.into(),
            value,
            n_items,
            config_digest: config_digest(config),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, math::log_softmax_f64, ModelConfig, ParamLayout};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            n_layers: 1,
            width: 8,
            n_heads: 2,
            max_seq_len: 12,
            ff_mult: 2,
            dropout: 0.0,
        }
    }

    /// All-zero parameters with fixed output biases: every position gets
    /// the same known distribution.
    fn bias_model(probs: &[f64]) -> ModelParams<f64> {
        let c = cfg(probs.len());
        let mut params =
            ModelParams::from_flat(c.clone(), vec![0.0; ParamLayout::for_config(&c).total_params()])
                .unwrap();
        for (i, &p) in probs.iter().enumerate() {
            params.vec1_mut("lm_head.b")[i] = p.ln();
        }
        params
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let params = bias_model(&[0.25; 4]);
        let seqs = vec![vec![0u32, 1, 2, 3], vec![3, 2, 1]];
        let ppl = perplexity(&params, &seqs, MaskPolicy::FullSequence).unwrap();
        assert_relative_eq!(ppl, 4.0, epsilon = 1e-10);
    }

    #[test]
    fn certain_model_perplexity_is_one() {
        let mut params = bias_model(&[0.25; 4]);
        params.vec1_mut("lm_head.b")[2] = 60.0;
        let seqs = vec![vec![0u32, 2, 2, 2]];
        let ppl = perplexity(&params, &seqs, MaskPolicy::FullSequence).unwrap();
        assert_relative_eq!(ppl, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn two_half_probability_tokens_give_perplexity_two() {
        let params = bias_model(&[0.5, 0.5]);
        let seqs = vec![vec![0u32, 1, 0]];
        let ppl = perplexity(&params, &seqs, MaskPolicy::FullSequence).unwrap();
        assert_relative_eq!(ppl, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn perplexity_matches_independent_per_token_rescoring() {
        let params: ModelParams<f32> = init_params(&cfg(13), 3).unwrap();
        let seqs = vec![vec![1u32, 5, 2, 9, 0], vec![12, 4, 4, 7]];
        let ppl = perplexity(&params, &seqs, MaskPolicy::FullSequence).unwrap();

        let mut total = 0.0;
        let mut n = 0;
        for seq in &seqs {
            let logits = forward(&params, seq).unwrap();
            for pos in 1..seq.len() {
                let ls = log_softmax_f64(logits.row(pos - 1).as_slice().unwrap());
                total -= ls[seq[pos] as usize];
                n += 1;
            }
        }
        let expect = (total / n as f64).exp();
        assert!((ppl - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn target_only_masks_the_condition_segment() {
        // Sequence: [gen_text, a, gen_speech, u, v] — target-only scores
        // only u's and v's predictions.
        let gt = Special::GenerateText.id();
        let gs = Special::GenerateSpeech.id();
        let seq = vec![gt, 8, gs, 9, 10];
        let mask = score_mask_for(&seq, MaskPolicy::TargetOnly).unwrap();
        assert_eq!(mask, vec![false, false, false, true, true]);
        let no_gen = vec![7u32, 8, 9];
        assert!(score_mask_for(&no_gen, MaskPolicy::TargetOnly).is_err());
        let nothing_after = vec![7u32, gt];
        assert!(score_mask_for(&nothing_after, MaskPolicy::TargetOnly).is_err());
    }

    #[test]
    fn levenshtein_reference_cases() {
        assert_eq!(levenshtein(b"abc", b"abc"), 0);
        assert_eq!(levenshtein(b"abc", b"axcd"), 2);
        assert_eq!(levenshtein(b"", b"abcd"), 4);
        assert_eq!(levenshtein(b"abcd", b""), 4);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"flaw", b"lawn"), 2);
    }

    /// Full-matrix memoized DP — the naive oracle the two-row version must
    /// reproduce.
    fn lev_oracle(a: &[u8], b: &[u8]) -> usize {
        let (n, m) = (a.len(), b.len());
        let mut d = vec![vec![0usize; m + 1]; n + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=m {
            d[0][j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[n][m]
    }

    #[test]
    fn levenshtein_agrees_with_full_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let la = rng.gen_range(0..10);
            let lb = rng.gen_range(0..40); // exercise the heap path too
            let a: Vec<u8> = (0..la).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen_range(0..3)).collect();
            assert_eq!(levenshtein(&a, &b), lev_oracle(&a, &b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn error_rate_reference_cases() {
        let refs = vec!["a b c".to_string()];
        let hyps = vec!["a x c d".to_string()];
        let wer = word_error_rate(&refs, &hyps).unwrap();
        assert_relative_eq!(wer, 2.0 / 3.0);

        assert_eq!(
            word_error_rate(&refs, &vec!["a b c".to_string()]).unwrap(),
            0.0
        );
        let empty_hyp = word_error_rate(&vec!["w x y z".to_string()], &vec![String::new()]);
        assert_relative_eq!(empty_hyp.unwrap(), 1.0);

        // Long hypotheses push the rate past 1.
        let over = word_error_rate(&vec!["a".to_string()], &vec!["b c d".to_string()]).unwrap();
        assert!(over > 1.0);

        assert!(matches!(
            error_rate::<u32>(&[vec![]], &[vec![1]]),
            Err(EvalError::ZeroReferenceUnits)
        ));
        assert!(matches!(
            error_rate(&[vec![1u32]], &[vec![1], vec![2]]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn error_rate_is_invariant_under_unit_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let perm: Vec<u32> = vec![7, 3, 5, 1, 9]; // injective relabeling of 0..5
        for _ in 0..50 {
            let gen_seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
                (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..5)).collect()
            };
            let refs = vec![gen_seq(&mut rng), gen_seq(&mut rng)];
            let hyps = vec![gen_seq(&mut rng), gen_seq(&mut rng)];
            if refs.iter().map(Vec::len).sum::<usize>() == 0 {
                continue;
            }
            let base = error_rate(&refs, &hyps).unwrap();
            let relabel = |v: &Vec<u32>| v.iter().map(|&t| perm[t as usize]).collect::<Vec<_>>();
            let rr: Vec<Vec<u32>> = refs.iter().map(relabel).collect();
            let hh: Vec<Vec<u32>> = hyps.iter().map(relabel).collect();
            assert_eq!(base, error_rate(&rr, &hh).unwrap());
        }
    }

    #[test]
    fn paired_judgment_hand_table() {
        // Fixed per-token distribution (0.1, 0.2, 0.3, 0.4): mean logprobs
        // are hand-computable, so the expected accuracy is too.
        let params = bias_model(&[0.1, 0.2, 0.3, 0.4]);
        let pairs = vec![
            (vec![0u32, 3, 3], vec![0u32, 0, 0]), // ln.4 > ln.1 → win
            (vec![0u32, 0, 0], vec![0u32, 3, 3]), // lose
            (vec![1u32, 2, 3], vec![1u32, 2, 3]), // identical → tie
            (vec![2u32, 3, 2], vec![2u32, 1, 1]), // (ln.4+ln.3)/2 > (ln.2+ln.2)/2 → win
        ];
        let acc = paired_judgment(&params, &pairs).unwrap();
        assert_relative_eq!(acc, (1.0 + 0.0 + 0.5 + 1.0) / 4.0);
    }

    #[test]
    fn paired_judgment_swap_symmetry() {
        let params: ModelParams<f32> = init_params(&cfg(11), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..12)
            .map(|_| {
                let g = |rng: &mut ChaCha8Rng| {
                    (0..rng.gen_range(2..7)).map(|_| rng.gen_range(0..11)).collect::<Vec<u32>>()
                };
                (g(&mut rng), g(&mut rng))
            })
            .collect();
        let acc = paired_judgment(&params, &pairs).unwrap();
        let swapped: Vec<_> = pairs.iter().map(|(p, n)| (n.clone(), p.clone())).collect();
        let acc_swapped = paired_judgment(&params, &swapped).unwrap();
        assert_relative_eq!(acc + acc_swapped, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn self_pairs_score_exactly_half() {
        let params: ModelParams<f32> = init_params(&cfg(7), 1).unwrap();
        let pairs = vec![
            (vec![1u32, 2, 3], vec![1u32, 2, 3]),
            (vec![4u32, 5], vec![4u32, 5]),
        ];
        assert_eq!(paired_judgment(&params, &pairs).unwrap(), 0.5);
    }

    #[test]
    fn corruption_produces_distinct_bounded_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = vec![100u32, 1, 2, 3, 4, 101];
        for _ in 0..50 {
            let neg = corrupt_sequence(&seq, &[8, 9], &mut rng).unwrap();
            assert_ne!(neg, seq);
            assert_eq!(neg[0], 100, "opener must survive");
            assert_eq!(*neg.last().unwrap(), 101, "closer must survive");
        }
        // All-identical interior forces the insert path.
        let flat = vec![100u32, 5, 5, 5, 101];
        let neg = corrupt_sequence(&flat, &[9], &mut rng).unwrap();
        assert_eq!(neg.len(), flat.len() + 1);
        assert!(neg.contains(&9));
        // Nothing to swap, nothing to insert.
        assert!(corrupt_sequence(&flat, &[], &mut rng).is_none());
        let pairs = make_negative_pairs(&[seq.clone(), flat], &[8], &mut rng);
        assert_eq!(pairs.len(), 2);
    }

    #[test]
    fn unigram_baseline_matches_hand_counts() {
        let seqs = vec![vec![0u32, 1, 1], vec![1u32, 2]];
        let uni = UnigramBaseline::fit(&seqs, 4);
        // counts: [1, 3, 1, 0], total 5; Laplace over V=4.
        assert_relative_eq!(uni.logprob(1), (4.0f64 / 9.0).ln());
        assert_relative_eq!(uni.logprob(3), (1.0f64 / 9.0).ln());
        // Scored positions: seq0 → tokens 1,1; seq1 → token 2.
        let expect = -((4.0f64 / 9.0).ln() * 2.0 + (2.0f64 / 9.0).ln()) / 3.0;
        let ppl = uni.perplexity(&seqs, MaskPolicy::FullSequence).unwrap();
        assert_relative_eq!(ppl, expect.exp(), epsilon = 1e-12);
    }

    #[test]
    fn report_round_trips_and_digest_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let config = serde_json::json!({"beam": 4, "seed": 7});
        let report = EvalReport::new("wer", 0.042, 128, &config);
        report.save(&path).unwrap();
        let back = EvalReport::load(&path).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.config_digest.len(), 64);
        assert_eq!(report.config_digest, config_digest(&config));
        assert_ne!(
            report.config_digest,
            config_digest(&serde_json::json!({"beam": 5, "seed": 7}))
        );
    }
}
