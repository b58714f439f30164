use std::collections::HashMap;

const PUNCTUATION: &[char] = &['.', ',', '!', '?', '"', '\'', '`', '(', ')', ':', ';'];
const ARTICLES: [&str; 3] = ["a", "an", "the"];
const NUMBER_WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

/// VQA-style answer normalization.
pub fn vqa_normalize(text: &str) -> String {
    let lowered: String = text.to_lowercase().chars().filter(|c| !PUNCTUATION.contains(c)).collect();
    lowered
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .map(|w| match NUMBER_WORDS.iter().position(|n| *n == w) {
            Some(d) => d.to_string(),
            None => w.to_owned(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1.0 when the normalized prediction equals (or, with `containment`,
/// contains) any normalized gold.
pub fn vqa_match(prediction: &str, golds: &[String], containment: bool) -> f64 {
    let p = vqa_normalize(prediction);
    let hit = golds.iter().map(|g| vqa_normalize(g)).any(|g| if containment { p.contains(&g) } else { p == g });
    hit as u8 as f64
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    prediction.trim().to_lowercase() == gold.trim().to_lowercase()
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_owned).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU-4 with clipped n-gram precision, closest-reference brevity
/// penalty and add-one smoothing of zero-count orders above unigrams.
pub fn bleu4(prediction: &str, references: &[String]) -> f64 {
    let hyp = tokens(prediction);
    if hyp.is_empty() || references.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r)).collect();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp_counts = ngram_counts(&hyp, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = hyp_counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = hyp.len().saturating_sub(n - 1).max(1);
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references are nonempty");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / 4.0).exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Maximum over references of the LCS-based F1.
pub fn rouge_l(prediction: &str, references: &[String]) -> f64 {
    let hyp = tokens(prediction);
    references
        .iter()
        .map(|r| {
            let reference = tokens(r);
            let l = lcs(&hyp, &reference);
            if l == 0 {
                return 0.0;
            }
            // 2PR/(P+R) with P = l/|hyp| and R = l/|ref|.
            2.0 * l as f64 / (hyp.len() + reference.len()) as f64
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(vqa_normalize("A Dog."), "dog");
        assert_eq!(vqa_normalize(""), "");
        assert_eq!(vqa_normalize("two  cats"), "2 cats");
        assert_eq!(vqa_normalize("  The (Ten) apples!  "), "10 apples");
    }

    #[test]
    fn vqa_and_exact() {
        assert_eq!(vqa_match("The dog", &s(&["dog"]), false), 1.0);
        assert_eq!(vqa_match("cat", &s(&["dog"]), false), 0.0);
        assert_eq!(vqa_match("", &s(&[""]), false), 1.0);
        assert_eq!(vqa_match("a big dog", &s(&["dog"]), true), 1.0);
        assert!(exact_match("B", "b"));
        assert!(exact_match("B ", "B"));
        assert!(!exact_match("B", "C"));
    }

    #[test]
    fn bleu_edges() {
        let r = s(&["the cat sat on the mat"]);
        assert!((bleu4("the cat sat on the mat", &r) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4("", &r), 0.0);
        assert_eq!(bleu4("dog", &r), 0.0);
        // Clipped unigram 2/3, smoothed 1/3 and 1/2, empty 4-gram order 1/2, brevity e^{-1}.
        let expected = (-1.0f64).exp() * (2.0 / 3.0 * 1.0 / 3.0 * 0.5 * 0.5f64).powf(0.25);
        assert!((bleu4("the the the", &r) - expected).abs() < 1e-12);
    }

    #[test]
    fn rouge_edges() {
        assert_eq!(rouge_l("a c", &s(&["a b c"])), 0.8);
        assert_eq!(rouge_l("x y", &s(&["a b c"])), 0.0);
        assert_eq!(rouge_l("a b c", &s(&["a b c"])), 1.0);
        assert_eq!(rouge_l("a b", &s(&["z", "a b"])), 1.0);
    }
}
