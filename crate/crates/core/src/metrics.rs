//! Summary quality metrics: length, compression, extractive fragments
//! (coverage and density), n-gram overlap precision, ROUGE-1/2/L, and a
//! pluggable sentence-level specificity scorer, aggregated per instruction
//! bucket.
//!
//! All word-level metrics run on [`TokenizedText`]: lowercased tokens split
//! on Unicode whitespace with leading and trailing non-alphanumerics
//! stripped. Specificity is the exception; it scores raw sentences because
//! capitalization is one of its cues.

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("sample {index}: {what}")]
    BadSample { index: usize, what: &'static str },
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
}

/// Lowercase, split on Unicode whitespace, strip leading/trailing
/// non-alphanumerics per token, drop tokens with nothing left. Idempotent.
pub fn tokenize(text: &str) -> TokenizedText {
    let tokens = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    TokenizedText { tokens }
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One copied span: `summary[summary_start..+len]` equals
/// `article[article_start..+len]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fragment {
    pub summary_start: usize,
    pub article_start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FragmentSet {
    pub fragments: Vec<Fragment>,
}

impl FragmentSet {
    pub fn total_copied(&self) -> usize {
        self.fragments.iter().map(|f| f.len).sum()
    }
}

/// Greedy left-to-right extractive fragment scan: at each summary position
/// take the longest span that occurs anywhere in the article (ties broken
/// by the smallest article index), emit it, and continue after it;
/// positions with no match advance by one.
pub fn extract_fragments(article: &TokenizedText, summary: &TokenizedText) -> FragmentSet {
    let a = &article.tokens;
    let s = &summary.tokens;
    let mut fragments = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut best_len = 0;
        let mut best_j = 0;
        for j in 0..a.len() {
            let mut l = 0;
            while i + l < s.len() && j + l < a.len() && s[i + l] == a[j + l] {
                l += 1;
            }
            if l > best_len {
                best_len = l;
                best_j = j;
            }
        }
        if best_len >= 1 {
            fragments.push(Fragment { summary_start: i, article_start: best_j, len: best_len });
            i += best_len;
        } else {
            i += 1;
        }
    }
    FragmentSet { fragments }
}

/// Fraction of summary tokens inside copied spans: `sum(len) / |S|`.
pub fn coverage(fragments: &FragmentSet, summary: &TokenizedText) -> Result<f64> {
    if summary.is_empty() {
        return Err(MetricError::Undefined("coverage needs a nonempty summary"));
    }
    Ok(fragments.total_copied() as f64 / summary.len() as f64)
}

/// Span-length-weighted copying: `sum(len^2) / |S|`. Equal to coverage when
/// every copied span has length one; grows with verbatim run length.
pub fn density(fragments: &FragmentSet, summary: &TokenizedText) -> Result<f64> {
    if summary.is_empty() {
        return Err(MetricError::Undefined("density needs a nonempty summary"));
    }
    let sq: usize = fragments.fragments.iter().map(|f| f.len * f.len).sum();
    Ok(sq as f64 / summary.len() as f64)
}

fn ngram_containment(article: &TokenizedText, summary: &TokenizedText, n: usize) -> f64 {
    let article_grams: HashSet<&[String]> = article.tokens.windows(n).collect();
    let positions = summary.len() + 1 - n;
    let hits = summary.tokens.windows(n).filter(|g| article_grams.contains(*g)).count();
    hits as f64 / positions as f64
}

/// Mean of 2-gram and 3-gram containment: for each n, the fraction of
/// summary n-gram positions whose n-gram occurs anywhere in the article.
pub fn overlap_precision(article: &TokenizedText, summary: &TokenizedText) -> Result<f64> {
    if summary.len() < 3 {
        return Err(MetricError::Undefined("overlap precision needs at least 3 summary tokens"));
    }
    let p2 = ngram_containment(article, summary, 2);
    let p3 = ngram_containment(article, summary, 3);
    Ok((p2 + p3) / 2.0)
}

/// Summary token count and its ratio to the article's.
pub fn length_and_compression(
    article: &TokenizedText,
    summary: &TokenizedText,
) -> Result<(usize, f64)> {
    if article.is_empty() {
        return Err(MetricError::Undefined("compression needs a nonempty article"));
    }
    Ok((summary.len(), summary.len() as f64 / article.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn rouge_n(reference: &TokenizedText, hypothesis: &TokenizedText, n: usize) -> f64 {
    let ref_total = reference.len().saturating_sub(n - 1);
    let hyp_total = hypothesis.len().saturating_sub(n - 1);
    if ref_total == 0 || hyp_total == 0 {
        return 0.0;
    }
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    for gram in reference.tokens.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }
    // Clipped matching: each reference occurrence can be claimed once.
    let mut overlap = 0usize;
    for gram in hypothesis.tokens.windows(n) {
        if let Some(count) = ref_counts.get_mut(gram) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    f1(overlap as f64 / hyp_total as f64, overlap as f64 / ref_total as f64)
}

/// Longest common subsequence length, two-row dynamic program.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 (clipped n-gram F1) and ROUGE-L (token-level LCS F1).
pub fn rouge(reference: &TokenizedText, hypothesis: &TokenizedText) -> Result<RougeScores> {
    if reference.is_empty() {
        return Err(MetricError::Undefined("rouge needs a nonempty reference"));
    }
    let lcs = lcs_len(&reference.tokens, &hypothesis.tokens) as f64;
    let rouge_l = if hypothesis.is_empty() {
        0.0
    } else {
        f1(lcs / hypothesis.len() as f64, lcs / reference.len() as f64)
    };
    Ok(RougeScores {
        rouge1: rouge_n(reference, hypothesis, 1),
        rouge2: rouge_n(reference, hypothesis, 2),
        rouge_l,
    })
}

/// Scores one sentence in [0, 1]. Implementations decide what "specific"
/// means; the shipped baseline is a surface-cue proxy, not a trained
/// specificity model.
pub trait SentenceScorer {
    fn score(&self, sentence: &str) -> f64;
}

/// Surface-cue proxy: the fraction of words that are all digits, at least
/// 8 characters long, or capitalized somewhere other than sentence-initial
/// position (ordinary English capitalizes the first word regardless of
/// content, so position 0 never counts as a proper-noun cue).
pub struct SurfaceCueScorer;

impl SentenceScorer for SurfaceCueScorer {
    fn score(&self, sentence: &str) -> f64 {
        let words: Vec<&str> = sentence
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return 0.0;
        }
        let specific = words
            .iter()
            .enumerate()
            .filter(|(i, w)| {
                w.chars().all(|c| c.is_ascii_digit())
                    || w.chars().count() >= 8
                    || (*i > 0 && w.chars().next().is_some_and(char::is_uppercase))
            })
            .count();
        specific as f64 / words.len() as f64
    }
}

/// Fixed score regardless of text; a test stand-in for external scorers.
pub struct ConstantScorer(pub f64);

impl SentenceScorer for ConstantScorer {
    fn score(&self, _sentence: &str) -> f64 {
        self.0
    }
}

fn split_sentences(text: &str) -> Vec<&str> {
    text.split(['.', '!', '?']).map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Macro average of per-sentence scores; sentences split on `.`, `!`, `?`.
pub fn specificity(summary: &str, scorer: &dyn SentenceScorer) -> Result<f64> {
    let sentences = split_sentences(summary);
    if sentences.is_empty() {
        return Err(MetricError::Undefined("specificity needs at least one sentence"));
    }
    let total: f64 = sentences.iter().map(|s| scorer.score(s)).sum();
    Ok(total / sentences.len() as f64)
}

/// One generated summary with everything needed to score it.
#[derive(Debug, Clone)]
pub struct EvalSample {
    /// Instruction bucket this sample answers, e.g. "length=short".
    pub bucket: String,
    pub article: String,
    pub reference: String,
    pub generated: String,
}

/// Per-bucket means. Metrics that are undefined for some samples (empty or
/// too-short generations) report the mean over the samples where they were
/// defined, alongside that count; `None` means no sample defined them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bucket: String,
    pub n: usize,
    pub mean_length: f64,
    pub mean_compression: f64,
    pub coverage: Option<f64>,
    pub coverage_n: usize,
    pub density: Option<f64>,
    pub density_n: usize,
    pub overlap: Option<f64>,
    pub overlap_n: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub specificity: Option<f64>,
    pub specificity_n: usize,
}

pub const OVERALL_BUCKET: &str = "Overall";

#[derive(Default)]
struct Accumulator {
    n: usize,
    length: f64,
    compression: f64,
    coverage: (f64, usize),
    density: (f64, usize),
    overlap: (f64, usize),
    rouge1: f64,
    rouge2: f64,
    rouge_l: f64,
    specificity: (f64, usize),
}

impl Accumulator {
    fn finish(self, bucket: String) -> MetricReport {
        let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
        let n = self.n as f64;
        MetricReport {
            bucket,
            n: self.n,
            mean_length: self.length / n,
            mean_compression: self.compression / n,
            coverage: mean(self.coverage),
            coverage_n: self.coverage.1,
            density: mean(self.density),
            density_n: self.density.1,
            overlap: mean(self.overlap),
            overlap_n: self.overlap.1,
            rouge1: self.rouge1 / n,
            rouge2: self.rouge2 / n,
            rouge_l: self.rouge_l / n,
            specificity: mean(self.specificity),
            specificity_n: self.specificity.1,
        }
    }
}

/// Scores every sample and reports per-bucket means (buckets in first-seen
/// order) plus a pooled `Overall` row: the mean over all samples, not the
/// mean of bucket means, so unequal bucket sizes weigh in proportionally.
pub fn aggregate(
    samples: &[EvalSample],
    scorer: &dyn SentenceScorer,
) -> Result<Vec<MetricReport>> {
    let mut order: Vec<String> = Vec::new();
    let mut buckets: HashMap<String, Accumulator> = HashMap::new();
    let mut overall = Accumulator::default();

    for (index, sample) in samples.iter().enumerate() {
        let article = tokenize(&sample.article);
        let generated = tokenize(&sample.generated);
        let reference = tokenize(&sample.reference);
        if article.is_empty() {
            return Err(MetricError::BadSample { index, what: "article has no tokens" });
        }
        if reference.is_empty() {
            return Err(MetricError::BadSample { index, what: "reference has no tokens" });
        }

        let (length, compression) = length_and_compression(&article, &generated)?;
        let scores = rouge(&reference, &generated)?;
        let fragments = extract_fragments(&article, &generated);

        if !buckets.contains_key(&sample.bucket) {
            order.push(sample.bucket.clone());
            buckets.insert(sample.bucket.clone(), Accumulator::default());
        }
        let acc = buckets.get_mut(&sample.bucket).expect("just inserted");
        for acc in [&mut *acc, &mut overall] {
            acc.n += 1;
            acc.length += length as f64;
            acc.compression += compression;
            acc.rouge1 += scores.rouge1;
            acc.rouge2 += scores.rouge2;
            acc.rouge_l += scores.rouge_l;
            if let Ok(v) = coverage(&fragments, &generated) {
                acc.coverage.0 += v;
                acc.coverage.1 += 1;
            }
            if let Ok(v) = density(&fragments, &generated) {
                acc.density.0 += v;
                acc.density.1 += 1;
            }
            if let Ok(v) = overlap_precision(&article, &generated) {
                acc.overlap.0 += v;
                acc.overlap.1 += 1;
            }
            if let Ok(v) = specificity(&sample.generated, scorer) {
                acc.specificity.0 += v;
                acc.specificity.1 += 1;
            }
        }
    }

    let mut reports = Vec::with_capacity(order.len() + 1);
    for bucket in order {
        let acc = buckets.remove(&bucket).expect("bucket accumulated");
        reports.push(acc.finish(bucket));
    }
    if overall.n > 0 {
        reports.push(overall.finish(OVERALL_BUCKET.to_string()));
    }
    Ok(reports)
}
