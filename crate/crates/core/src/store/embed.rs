use std::hash::Hasher;

use fnv::FnvHasher;

/// Split text into lowercase subtokens: identifier pieces at snake_case,
/// camelCase and letter/digit boundaries, plus every other non-space
/// character as its own token.
pub fn subtokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev: Option<char> = None;
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        if !cur.is_empty() {
            out.push(std::mem::take(cur).to_lowercase());
        }
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            if let Some(p) = prev {
                let boundary = (p.is_lowercase() && c.is_uppercase())
                    || (p.is_alphabetic() && c.is_numeric())
                    || (p.is_numeric() && c.is_alphabetic());
                if boundary {
                    flush(&mut cur, &mut out);
                }
            }
            cur.push(c);
            prev = Some(c);
        } else {
            flush(&mut cur, &mut out);
            if !c.is_whitespace() && c != '_' {
                out.push(c.to_string());
            }
            prev = None;
        }
    }
    flush(&mut cur, &mut out);
    out
}

/// Signed feature hashing of subtoken counts, L2-normalized. Empty text
/// (or text with no tokens) maps to the zero vector.
pub fn embed_text(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut v = vec![0.0; dim];
    for tok in subtokens(text) {
        let mut h = FnvHasher::default();
        h.write(tok.as_bytes());
        let h = h.finish();
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subtoken_boundaries() {
        assert_eq!(subtokens("getUserName2"), ["get", "user", "name", "2"]);
        assert_eq!(subtokens("max_len = a+1"), ["max", "len", "=", "a", "+", "1"]);
        assert!(subtokens("  ").is_empty());
    }

    #[test]
    fn empty_text_is_zero() {
        assert_eq!(embed_text("", 16), vec![0.0; 16]);
    }

    #[test]
    fn unit_norm_and_deterministic() {
        let a = embed_text("x", 16);
        assert_eq!(a, embed_text("x", 16));
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
