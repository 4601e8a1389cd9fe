use proptest::prelude::*;
use vlmkg::metrics::{bleu, brevity_penalty, lcs_len, rouge_l, BleuMode};

fn count(seq: &[u8], gram: &[u8]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

/// Clipped matches and candidate n-gram total by direct scanning.
fn naive_clip(c: &[u8], r: &[u8], n: usize) -> (usize, usize) {
    if c.len() < n {
        return (0, 0);
    }
    let mut seen: Vec<&[u8]> = Vec::new();
    let mut matched = 0;
    for i in 0..=c.len() - n {
        let g = &c[i..i + n];
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        matched += count(c, g).min(count(r, g));
    }
    (matched, c.len() - n + 1)
}

fn naive_bleu(cands: &[Vec<u8>], refs: &[Vec<u8>], max_n: usize) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut m, mut t) = (0, 0);
        for (c, r) in cands.iter().zip(refs) {
            let (a, b) = naive_clip(c, r, n);
            m += a;
            t += b;
        }
        if m == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / max_n as f64).exp()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn naive_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_sub = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if sub.len() > best && is_sub(&sub) {
            best = sub.len();
        }
    }
    best
}

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn corpus_bleu_matches_naive_oracle(pairs in prop::collection::vec((seq(14), seq(14)), 1..5), max_n in 1usize..5) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let got = bleu(&c, &r, max_n, BleuMode::Corpus).unwrap().bleu;
        prop_assert!((got - naive_bleu(&c, &r, max_n)).abs() <= 1e-9);
    }

    #[test]
    fn sentence_bleu_averages_single_pair_scores(pairs in prop::collection::vec((seq(10), seq(10)), 1..5)) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let got = bleu(&c, &r, 4, BleuMode::Sentence).unwrap().bleu;
        let want = c.iter().zip(&r).map(|(a, b)| naive_bleu(&[a.clone()], &[b.clone()], 4)).sum::<f64>() / c.len() as f64;
        prop_assert!((got - want).abs() <= 1e-9);
    }

    #[test]
    fn rouge_l_matches_enumerated_lcs(a in seq(11), b in seq(11)) {
        let l = naive_lcs(&a, &b);
        prop_assert_eq!(lcs_len(&a, &b), l);
        let got = rouge_l(&a, &b, 1.2).unwrap();
        let want = if l == 0 {
            0.0
        } else {
            let (rec, prec) = (l as f64 / b.len() as f64, l as f64 / a.len() as f64);
            2.44 * rec * prec / (rec + 1.44 * prec)
        };
        prop_assert!((got.rouge_l - want).abs() <= 1e-9);
    }
}

#[test]
fn hand_cases() {
    let w = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let id = bleu(&[w("a b c d e")], &[w("a b c d e")], 4, BleuMode::Corpus).unwrap();
    assert_eq!(id.bleu, 1.0);
    let b2 = bleu(&[w("the cat")], &[w("the cat sat")], 2, BleuMode::Corpus).unwrap();
    assert!((b2.bleu - (-0.5f64).exp()).abs() < 1e-12);
    assert!((b2.bleu - 0.6065).abs() < 5e-5);
    assert_eq!(lcs_len(b"ABCBDAB", b"BDCABA"), 4);
    assert_eq!(brevity_penalty(0, 3), 0.0);
    assert_eq!(rouge_l(&w("x y"), &w("x y"), 1.2).unwrap().rouge_l, 1.0);
}
