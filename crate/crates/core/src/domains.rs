//! Deterministic micro-domains with exact answer functions.
//!
//! Every domain enumerates its query space through a bijection
//! `index -> query`, so sampling distinct items and detecting exhaustion are
//! exact. Queries are kept short enough that the relevant input stays inside
//! a 16-token context window while answering.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryResponsePair {
    pub query: String,
    pub response: String,
    pub domain: String,
}

impl QueryResponsePair {
    pub fn new(query: impl Into<String>, response: impl Into<String>, domain: impl Into<String>) -> Self {
        QueryResponsePair {
            query: query.into(),
            response: response.into(),
            domain: domain.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    ModArith,
    Reverse,
    Caesar3,
    SortDigits,
    Roman,
    ParenBalance,
    /// Shared filler tasks every model sees; not an expert domain.
    General,
}

impl Domain {
    /// The six expert domains, in expert-index order.
    pub const EXPERTS: [Domain; 6] = [
        Domain::ModArith,
        Domain::Reverse,
        Domain::Caesar3,
        Domain::SortDigits,
        Domain::Roman,
        Domain::ParenBalance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Domain::ModArith => "mod-arith",
            Domain::Reverse => "reverse",
            Domain::Caesar3 => "caesar3",
            Domain::SortDigits => "sort-digits",
            Domain::Roman => "roman",
            Domain::ParenBalance => "paren-balance",
            Domain::General => "general",
        }
    }

    /// Number of distinct queries the generator can produce.
    pub fn space_size(self) -> u64 {
        match self {
            Domain::ModArith => 100 * 100 * MODULI.len() as u64,
            Domain::Reverse => strings_space(REVERSE_ALPHABET.len(), 3..=5),
            Domain::Caesar3 => 26u64.pow(4),
            Domain::SortDigits => strings_space(SORT_ALPHABET.len(), 4..=5),
            Domain::Roman => 2 * ROMAN_MAX as u64,
            Domain::ParenBalance => strings_space(PARENS.len(), 2..=9),
            Domain::General => GENERAL_TASKS.len() as u64 * strings_space(26, 2..=5),
        }
    }

    /// The query with the given index in `[0, space_size)`.
    pub fn query_at(self, index: u64) -> String {
        debug_assert!(index < self.space_size());
        match self {
            Domain::ModArith => {
                let m = MODULI[(index % MODULI.len() as u64) as usize];
                let rest = index / MODULI.len() as u64;
                format!("({}+{}) mod {} = ?", rest / 100, rest % 100, m)
            }
            Domain::Reverse => format!("reverse: {}", string_at(REVERSE_ALPHABET, 3..=5, index)),
            Domain::Caesar3 => format!("caesar3: {}", string_at(LOWER, 4..=4, index)),
            Domain::SortDigits => format!("sort: {}", string_at(SORT_ALPHABET, 4..=5, index)),
            Domain::Roman => {
                let n = (index % ROMAN_MAX as u64) as u32 + 1;
                if index < ROMAN_MAX as u64 {
                    format!("roman: {n}")
                } else {
                    format!("roman: {}", to_roman(n))
                }
            }
            Domain::ParenBalance => format!("parens: {}", string_at(PARENS, 2..=9, index)),
            Domain::General => {
                let per_task = strings_space(26, 2..=5);
                let task = GENERAL_TASKS[(index / per_task) as usize];
                format!("{task}: {}", string_at(LOWER, 2..=5, index % per_task))
            }
        }
    }

    /// The unique correct response to a query produced by this domain.
    pub fn answer(self, query: &str) -> Result<String> {
        let malformed = || EtrError::MalformedQuery {
            domain: self.name().to_string(),
            query: query.to_string(),
        };
        match self {
            Domain::ModArith => {
                let body = query
                    .strip_prefix('(')
                    .and_then(|q| q.strip_suffix(" = ?"))
                    .ok_or_else(malformed)?;
                let (sum, m) = body.split_once(") mod ").ok_or_else(malformed)?;
                let (a, b) = sum.split_once('+').ok_or_else(malformed)?;
                let parse = |s: &str| s.parse::<u64>().map_err(|_| malformed());
                let (a, b, m) = (parse(a)?, parse(b)?, parse(m)?);
                if m == 0 {
                    return Err(malformed());
                }
                Ok(((a + b) % m).to_string())
            }
            Domain::Reverse => {
                let s = query.strip_prefix("reverse: ").ok_or_else(malformed)?;
                Ok(s.chars().rev().collect())
            }
            Domain::Caesar3 => {
                let s = query.strip_prefix("caesar3: ").ok_or_else(malformed)?;
                s.chars()
                    .map(|c| match c {
                        'a'..='z' => Ok(char::from(b'a' + (c as u8 - b'a' + 3) % 26)),
                        _ => Err(malformed()),
                    })
                    .collect()
            }
            Domain::SortDigits => {
                let s = query.strip_prefix("sort: ").ok_or_else(malformed)?;
                if !s.chars().all(|c| c.is_ascii_digit()) {
                    return Err(malformed());
                }
                let mut chars: Vec<char> = s.chars().collect();
                chars.sort_unstable();
                Ok(chars.into_iter().collect())
            }
            Domain::Roman => {
                let s = query.strip_prefix("roman: ").ok_or_else(malformed)?;
                if s.chars().all(|c| c.is_ascii_digit()) && !s.is_empty() {
                    let n: u32 = s.parse().map_err(|_| malformed())?;
                    if !(1..=ROMAN_MAX).contains(&n) {
                        return Err(malformed());
                    }
                    Ok(to_roman(n))
                } else {
                    from_roman(s).map(|n| n.to_string()).ok_or_else(malformed)
                }
            }
            Domain::ParenBalance => {
                let s = query.strip_prefix("parens: ").ok_or_else(malformed)?;
                unmatched_parens(s).map(|n| n.to_string()).ok_or_else(malformed)
            }
            Domain::General => {
                let (task, w) = query.split_once(": ").ok_or_else(malformed)?;
                match task {
                    "echo" => Ok(w.to_string()),
                    "upper" => Ok(w.to_ascii_uppercase()),
                    "first" => w.chars().next().map(String::from).ok_or_else(malformed),
                    "len" => Ok(w.chars().count().to_string()),
                    _ => Err(malformed()),
                }
            }
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = EtrError;

    fn from_str(s: &str) -> Result<Self> {
        Domain::EXPERTS
            .iter()
            .chain(std::iter::once(&Domain::General))
            .find(|d| d.name() == s)
            .copied()
            .ok_or_else(|| EtrError::UnknownDomain(s.to_string()))
    }
}

const MODULI: [u64; 2] = [2, 5];
const REVERSE_ALPHABET: &[char] = &['a', 'b', 'c', 'd', 'e', 'f'];
const SORT_ALPHABET: &[char] = &['1', '2', '3', '4', '5', '6'];
const PARENS: &[char] = &['(', ')', 'a', 'b'];
const LOWER: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r', 's',
    't', 'u', 'v', 'w', 'x', 'y', 'z',
];
const GENERAL_TASKS: [&str; 4] = ["echo", "upper", "first", "len"];
const ROMAN_MAX: u32 = 3999;

fn strings_space(alphabet: usize, lengths: std::ops::RangeInclusive<u32>) -> u64 {
    lengths.map(|l| (alphabet as u64).pow(l)).sum()
}

/// Index into the concatenation of all strings of each length, shortest
/// first, each block in base-|alphabet| order.
fn string_at(alphabet: &[char], lengths: std::ops::RangeInclusive<u32>, mut index: u64) -> String {
    let base = alphabet.len() as u64;
    for len in lengths {
        let block = base.pow(len);
        if index < block {
            let mut out = vec![alphabet[0]; len as usize];
            for slot in out.iter_mut().rev() {
                *slot = alphabet[(index % base) as usize];
                index /= base;
            }
            return out.into_iter().collect();
        }
        index -= block;
    }
    unreachable!("index outside string space")
}

pub fn to_roman(mut n: u32) -> String {
    const TABLE: [(u32, &str); 13] = [
        (1000, "M"),
        (900, "CM"),
        (500, "D"),
        (400, "CD"),
        (100, "C"),
        (90, "XC"),
        (50, "L"),
        (40, "XL"),
        (10, "X"),
        (9, "IX"),
        (5, "V"),
        (4, "IV"),
        (1, "I"),
    ];
    let mut out = String::new();
    for (value, glyph) in TABLE {
        while n >= value {
            out.push_str(glyph);
            n -= value;
        }
    }
    out
}

/// Parses a canonical roman numeral in `1..=3999`.
pub fn from_roman(s: &str) -> Option<u32> {
    let value = |c| match c {
        'I' => Some(1),
        'V' => Some(5),
        'X' => Some(10),
        'L' => Some(50),
        'C' => Some(100),
        'D' => Some(500),
        'M' => Some(1000),
        _ => None,
    };
    let digits: Vec<u32> = s.chars().map(value).collect::<Option<_>>()?;
    let mut total = 0i64;
    for (i, &d) in digits.iter().enumerate() {
        if digits.get(i + 1).is_some_and(|&next| next > d) {
            total -= d as i64;
        } else {
            total += d as i64;
        }
    }
    let n = u32::try_from(total).ok().filter(|n| (1..=ROMAN_MAX).contains(n))?;
    // only the canonical spelling is accepted
    (to_roman(n) == s).then_some(n)
}

/// Number of parentheses left unmatched; 0 means balanced. The letters `a`
/// and `b` are filler.
fn unmatched_parens(s: &str) -> Option<u32> {
    let mut open = 0u32;
    let mut unmatched_close = 0u32;
    for c in s.chars() {
        match c {
            '(' => open += 1,
            ')' if open > 0 => open -= 1,
            ')' => unmatched_close += 1,
            'a' | 'b' => {}
            _ => return None,
        }
    }
    Some(open + unmatched_close)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(domain: Domain, seed: u64) -> Self {
        DomainSpec { domain, seed }
    }
}

/// `n` distinct pairs drawn uniformly from the domain's query space.
pub fn generate_domain(spec: &DomainSpec, n: usize) -> Result<Vec<QueryResponsePair>> {
    generate_domain_excluding(spec, n, &HashSet::new())
}

/// As [`generate_domain`], never producing a query listed in `exclude`.
pub fn generate_domain_excluding(
    spec: &DomainSpec,
    n: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<QueryResponsePair>> {
    if n == 0 {
        return Err(EtrError::config("generate_domain needs n >= 1"));
    }
    let domain = spec.domain;
    let space = domain.space_size();
    let excluded_in_space = exclude
        .iter()
        .filter(|q| domain.answer(q).is_ok())
        .count() as u64;
    let achievable = space.saturating_sub(excluded_in_space);
    if (n as u64) > achievable {
        return Err(EtrError::DomainExhausted {
            domain: domain.name().to_string(),
            achievable: achievable as usize,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let index = rng.random_range(0..space);
        if !seen.insert(index) {
            continue;
        }
        let query = domain.query_at(index);
        if exclude.contains(&query) {
            continue;
        }
        let response = domain.answer(&query)?;
        out.push(QueryResponsePair::new(query, response, domain.name()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Correct,
    Incorrect,
}

impl Grade {
    pub fn is_correct(self) -> bool {
        self == Grade::Correct
    }
}

/// Exact match of the trimmed generation against the answer function.
pub fn grade(domain: &str, query: &str, generated: &str) -> Result<Grade> {
    let domain: Domain = domain.parse()?;
    let expected = domain.answer(query)?;
    Ok(if generated.trim() == expected {
        Grade::Correct
    } else {
        Grade::Incorrect
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_examples() {
        assert_eq!(Domain::Reverse.answer("reverse: abc").unwrap(), "cba");
        assert_eq!(Domain::ModArith.answer("(17+25) mod 7 = ?").unwrap(), "0");
        assert_eq!(Domain::Caesar3.answer("caesar3: xyza").unwrap(), "abcd");
        assert_eq!(Domain::SortDigits.answer("sort: 3142").unwrap(), "1234");
        assert_eq!(Domain::Roman.answer("roman: 49").unwrap(), "XLIX");
        assert_eq!(Domain::Roman.answer("roman: MCMXCIV").unwrap(), "1994");
        assert_eq!(Domain::ParenBalance.answer("parens: (()())").unwrap(), "0");
        assert_eq!(Domain::ParenBalance.answer("parens: ))(").unwrap(), "3");
        assert_eq!(Domain::ParenBalance.answer("parens: (a)b(").unwrap(), "1");
        assert_eq!(Domain::General.answer("upper: abc").unwrap(), "ABC");
        assert_eq!(Domain::General.answer("len: abcd").unwrap(), "4");
    }

    #[test]
    fn malformed_queries_rejected() {
        assert!(Domain::Reverse.answer("rev abc").is_err());
        assert!(Domain::ModArith.answer("(1+2) mod 0 = ?").is_err());
        assert!(Domain::Roman.answer("roman: IIII").is_err());
        assert!(Domain::Roman.answer("roman: 4000").is_err());
        assert!(Domain::ParenBalance.answer("parens: (c)").is_err());
    }

    #[test]
    fn roman_round_trip() {
        for n in 1..=3999 {
            assert_eq!(from_roman(&to_roman(n)), Some(n));
        }
        assert_eq!(to_roman(3888), "MMMDCCCLXXXVIII");
    }

    #[test]
    fn grade_trims_and_rejects_unknown_domains() {
        assert_eq!(grade("reverse", "reverse: abc", "cba").unwrap(), Grade::Correct);
        assert_eq!(grade("reverse", "reverse: abc", " cba ").unwrap(), Grade::Correct);
        assert_eq!(grade("reverse", "reverse: abc", "abc").unwrap(), Grade::Incorrect);
        assert!(matches!(
            grade("astrology", "x", "y"),
            Err(EtrError::UnknownDomain(_))
        ));
    }

    #[test]
    fn query_indexing_is_a_bijection_on_small_domains() {
        for d in [Domain::Reverse, Domain::SortDigits, Domain::Roman, Domain::ParenBalance] {
            let mut seen = HashSet::new();
            for i in 0..d.space_size() {
                assert!(seen.insert(d.query_at(i)), "{d}: duplicate at {i}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_distinct() {
        for d in Domain::EXPERTS {
            let spec = DomainSpec::new(d, 11);
            let a = generate_domain(&spec, 300).unwrap();
            let b = generate_domain(&spec, 300).unwrap();
            assert_eq!(a, b);
            let distinct: HashSet<_> = a.iter().map(|p| &p.query).collect();
            assert_eq!(distinct.len(), 300);
            assert!(a.iter().all(|p| p.domain == d.name()));
        }
    }

    #[test]
    fn generated_queries_fit_the_window() {
        // everything the answer depends on must sit in the last 15 query chars
        for d in [Domain::ModArith, Domain::Reverse, Domain::Caesar3, Domain::SortDigits, Domain::ParenBalance] {
            for p in generate_domain(&DomainSpec::new(d, 3), 500).unwrap() {
                let tail: String = p.query.chars().rev().take(15).collect::<Vec<_>>().into_iter().rev().collect();
                if d == Domain::ModArith {
                    // only last digits matter for moduli 2 and 5
                    assert!(tail.contains('+'), "{}", p.query);
                } else {
                    let payload = p.query.split_once(": ").unwrap().1;
                    assert!(tail.ends_with(payload), "{}", p.query);
                }
            }
        }
    }

    #[test]
    fn exhaustion_reports_achievable_count() {
        let spec = DomainSpec::new(Domain::Reverse, 1);
        match generate_domain(&spec, 9300) {
            Err(EtrError::DomainExhausted { achievable, .. }) => assert_eq!(achievable, 9288),
            other => panic!("expected exhaustion, got {other:?}"),
        }
        let exclude: HashSet<String> = ["reverse: abc", "reverse: fed"].iter().map(|s| s.to_string()).collect();
        match generate_domain_excluding(&spec, 9288, &exclude) {
            Err(EtrError::DomainExhausted { achievable, .. }) => assert_eq!(achievable, 9286),
            other => panic!("expected exhaustion, got {other:?}"),
        }
        assert!(generate_domain(&spec, 0).is_err());
    }

    #[test]
    fn full_scale_generation_is_fast() {
        let start = std::time::Instant::now();
        for d in Domain::EXPERTS {
            let pairs = generate_domain(&DomainSpec::new(d, 7), 7_500).unwrap();
            let distinct: HashSet<_> = pairs.iter().map(|p| &p.query).collect();
            assert_eq!(distinct.len(), 7_500);
        }
        assert!(start.elapsed().as_secs_f64() < 60.0);
    }

    #[test]
    fn grader_agrees_with_generator() {
        let mut checked = 0;
        for (k, d) in Domain::EXPERTS.iter().enumerate() {
            for p in generate_domain(&DomainSpec::new(*d, 100 + k as u64), 1_700).unwrap() {
                assert_eq!(grade(d.name(), &p.query, &p.response).unwrap(), Grade::Correct);
                checked += 1;
            }
        }
        assert!(checked >= 10_000);
    }
}
