//! Edit-distance based recognition metrics.
//!
//! All rates aggregate over the corpus: total edits divided by total
//! reference length. With `N` reference symbols,
//! `CR = (N − del − sub) / N` and `AR = (N − del − sub − ins) / N`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("references contain no symbols")]
    EmptyReference,
}

/// Edit operations of one minimal alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub n_ref: usize,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl AlignmentCounts {
    pub fn distance(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

impl std::ops::Add for AlignmentCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        AlignmentCounts {
            n_ref: self.n_ref + o.n_ref,
            sub: self.sub + o.sub,
            del: self.del + o.del,
            ins: self.ins + o.ins,
        }
    }
}

impl std::iter::Sum for AlignmentCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Unit-cost Levenshtein alignment. When several minimal alignments exist the
/// traceback prefers substitution, then deletion, then insertion.
pub fn edit_align<S: PartialEq>(reference: &[S], hyp: &[S]) -> AlignmentCounts {
    let (n, m) = (reference.len(), hyp.len());
    let cols = m + 1;
    let mut dp = vec![0usize; (n + 1) * cols];
    for i in 0..=n {
        dp[i * cols] = i;
    }
    for (j, cell) in dp.iter_mut().take(cols).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * cols + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let up = dp[(i - 1) * cols + j] + 1;
            let left = dp[i * cols + j - 1] + 1;
            dp[i * cols + j] = diag.min(up).min(left);
        }
    }
    let mut counts = AlignmentCounts {
        n_ref: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * cols + j];
        if i > 0 && j > 0 {
            let mismatch = reference[i - 1] != hyp[j - 1];
            if dp[(i - 1) * cols + j - 1] + usize::from(mismatch) == here {
                counts.sub += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * cols + j] + 1 == here {
            counts.del += 1;
            i -= 1;
        } else {
            counts.ins += 1;
            j -= 1;
        }
    }
    counts
}

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

fn words(s: &str) -> Vec<&str> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split(' ').collect()
    }
}

fn check_lengths<R, H>(refs: &[R], hyps: &[H]) -> Result<(), MetricsError> {
    if refs.len() != hyps.len() {
        return Err(MetricsError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    Ok(())
}

/// Summed character-level counts over all pairs.
pub fn char_counts<R: AsRef<str>, H: AsRef<str>>(
    refs: &[R],
    hyps: &[H],
) -> Result<AlignmentCounts, MetricsError> {
    check_lengths(refs, hyps)?;
    let total: AlignmentCounts = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_align(&chars(r.as_ref()), &chars(h.as_ref())))
        .sum();
    if total.n_ref == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(total)
}

pub fn cer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64, MetricsError> {
    let c = char_counts(refs, hyps)?;
    Ok(c.distance() as f64 / c.n_ref as f64)
}

/// Word error rate with words separated by single spaces.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64, MetricsError> {
    check_lengths(refs, hyps)?;
    let total: AlignmentCounts = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_align(&words(r.as_ref()), &words(h.as_ref())))
        .sum();
    if total.n_ref == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(total.distance() as f64 / total.n_ref as f64)
}

/// `(AR, CR)` at character level.
pub fn ar_cr<R: AsRef<str>, H: AsRef<str>>(
    refs: &[R],
    hyps: &[H],
) -> Result<(f64, f64), MetricsError> {
    let c = char_counts(refs, hyps)?;
    let n = c.n_ref as f64;
    let cr = (n - c.del as f64 - c.sub as f64) / n;
    let ar = (n - c.del as f64 - c.sub as f64 - c.ins as f64) / n;
    Ok((ar, cr))
}

/// Evaluation summary printed by `olhtr eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub cer: f64,
    pub wer: f64,
    pub ar: f64,
    pub cr: f64,
    pub n_sequences: usize,
    pub n_chars: usize,
}

impl MetricsReport {
    pub fn compute<R: AsRef<str>, H: AsRef<str>>(
        refs: &[R],
        hyps: &[H],
    ) -> Result<Self, MetricsError> {
        let c = char_counts(refs, hyps)?;
        let (ar, cr) = ar_cr(refs, hyps)?;
        let wer = wer(refs, hyps)?;
        Ok(MetricsReport {
            cer: c.distance() as f64 / c.n_ref as f64,
            wer,
            ar,
            cr,
            n_sequences: refs.len(),
            n_chars: c.n_ref,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Exhaustive recursion over every alignment; returns the minimal distance.
    fn brute_distance(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ar)), Some((y, br))) => {
                let diag = brute_distance(ar, br) + usize::from(x != y);
                diag.min(brute_distance(ar, b) + 1)
                    .min(brute_distance(a, br) + 1)
            }
        }
    }

    fn short() -> impl Strategy<Value = String> {
        "[abc]{0,6}"
    }

    #[test]
    fn classic_pair() {
        let c = edit_align(&chars("kitten"), &chars("sitting"));
        assert_eq!(c.distance(), 3);
        assert_eq!((c.sub, c.del, c.ins), (2, 0, 1));
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(
            edit_align(&chars("abc"), &chars("abc")),
            AlignmentCounts {
                n_ref: 3,
                sub: 0,
                del: 0,
                ins: 0
            }
        );
        assert_eq!(edit_align(&chars("abc"), &[]).del, 3);
        assert_eq!(edit_align(&[], &chars("ab")).ins, 2);
        // equal-cost alternatives resolve to substitutions
        assert_eq!(
            edit_align(&chars("ab"), &chars("ba")),
            AlignmentCounts {
                n_ref: 2,
                sub: 2,
                del: 0,
                ins: 0
            }
        );
    }

    #[test]
    fn rates() {
        assert_eq!(cer(&["hello"], &["helo"]).unwrap(), 0.2);
        assert_eq!(cer(&["ab", "cd"], &["ab", "cd"]).unwrap(), 0.0);
        assert_eq!(wer(&["the cat sat"], &["the bat sat"]).unwrap(), 1.0 / 3.0);
        assert_eq!(ar_cr(&["abc"], &["abc"]).unwrap(), (1.0, 1.0));
        let (ar, cr) = ar_cr(&["abc"], &["abxc"]).unwrap();
        assert_eq!(cr, 1.0);
        assert!(ar < 1.0);
        assert_eq!(cer(&[""], &["x"]), Err(MetricsError::EmptyReference));
        assert_eq!(
            cer(&["a"], &["a", "b"]),
            Err(MetricsError::LengthMismatch { refs: 1, hyps: 2 })
        );
    }

    #[test]
    fn report_serializes_documented_fields() {
        let r = MetricsReport::compute(&["12 3", "45"], &["12 3", "4"]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["ar", "cer", "cr", "n_chars", "n_sequences", "wer"]);
        assert_eq!((r.n_sequences, r.n_chars), (2, 6));
    }

    proptest! {
        #[test]
        fn alignment_is_minimal_and_consistent(a in short(), b in short()) {
            let (a, b) = (chars(&a), chars(&b));
            let c = edit_align(&a, &b);
            prop_assert_eq!(c.distance(), brute_distance(&a, &b));
            prop_assert!(c.sub + c.del <= c.n_ref);
            // matched + sub + ins covers the hypothesis
            prop_assert_eq!(c.n_ref - c.del + c.ins, b.len());
        }

        #[test]
        fn distance_is_a_metric(a in short(), b in short(), c in short()) {
            let (a, b, c) = (chars(&a), chars(&b), chars(&c));
            let d = |x: &[char], y: &[char]| edit_align(x, y).distance();
            prop_assert_eq!(d(&a, &a), 0);
            prop_assert_eq!(d(&a, &b) == 0, a == b);
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn corpus_rates_match_pairwise_oracle(pairs in prop::collection::vec(("[abc]{1,6}", short()), 1..6)) {
            let refs: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
            let hyps: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
            let edits: usize = pairs.iter().map(|(r, h)| brute_distance(&chars(r), &chars(h))).sum();
            let n: usize = refs.iter().map(|r| r.chars().count()).sum();
            prop_assert_eq!(cer(&refs, &hyps).unwrap(), edits as f64 / n as f64);
            let (ar, cr) = ar_cr(&refs, &hyps).unwrap();
            prop_assert!(ar <= cr && cr <= 1.0);
            prop_assert_eq!(cer(&refs, &hyps).unwrap() == 0.0, refs == hyps);
        }
    }
}
