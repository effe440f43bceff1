//! Tokenization and hashed bag-of-words vectors shared by the fallback
//! sentence encoder and the fallback word vectors.

/// Lowercase, strip ASCII punctuation, split on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Lowercase and trim; the matching rule for answers and entities.
pub fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// 64-bit FNV-1a. Stable across platforms and runs, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn bucket(token: &str, dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % dim as u64) as usize
}

/// Count tokens into `dim` hashed coordinates and L2-normalize.
/// Returns `None` when there are no tokens.
pub fn hashed_bag<S: AsRef<str>>(tokens: &[S], dim: usize) -> Option<Vec<f64>> {
    if tokens.is_empty() || dim == 0 {
        return None;
    }
    let mut v = vec![0.0; dim];
    for t in tokens {
        v[bucket(t.as_ref(), dim)] += 1.0;
    }
    let n = crate::numerics::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation_and_case() {
        assert_eq!(
            tokenize("A red, Car!  on the road."),
            ["a", "red", "car", "on", "the", "road"]
        );
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn bag_is_order_free_and_unit_norm() {
        let a = hashed_bag(&["a", "a", "b"], 64).unwrap();
        let b = hashed_bag(&["b", "a", "a"], 64).unwrap();
        assert_eq!(a, b);
        assert!((crate::numerics::norm(&a) - 1.0).abs() < 1e-12);
        assert!(hashed_bag::<&str>(&[], 8).is_none());
    }
}
