//! Number and date extraction from passage tokens.
//!
//! The extracted mentions define the supports over which all value
//! distributions live: the sorted unique numbers, the sorted unique dates,
//! and the set of signed year differences between dates.

use serde::{Deserialize, Serialize};

/// A token parseable as a number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumberToken {
    pub index: usize,
    pub value: f64,
}

/// A normalized date mention covering tokens `start..=end`.
/// Missing day/month default to 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateToken {
    pub start: usize,
    pub end: usize,
    pub day: u32,
    pub month: u32,
    pub year: i32,
}

impl DateToken {
    /// (year, month, day) for the lexicographic date order.
    pub fn ymd(&self) -> (i32, u32, u32) {
        (self.year, self.month, self.day)
    }
}

/// A passage with its extracted numbers and dates.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AnnotatedPassage {
    pub tokens: Vec<String>,
    pub number_tokens: Vec<NumberToken>,
    pub date_tokens: Vec<DateToken>,
    pub unique_numbers: Vec<f64>,
    pub unique_dates: Vec<(i32, u32, u32)>,
}

/// All distinct signed year differences between passage dates, sorted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeDeltaSupport {
    pub values: Vec<i32>,
}

impl TimeDeltaSupport {
    pub fn index_of(&self, delta: i32) -> Option<usize> {
        self.values.iter().position(|v| *v == delta)
    }
}

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december",
];

fn strip_punct(token: &str) -> &str {
    token.trim_end_matches(|c: char| matches!(c, ',' | '.' | ';' | ':' | '?' | '!'))
}

fn parse_month(token: &str) -> Option<u32> {
    let t = strip_punct(token).to_lowercase();
    MONTHS.iter().position(|m| *m == t).map(|i| i as u32 + 1)
}

fn parse_year(token: &str) -> Option<i32> {
    let t = strip_punct(token);
    if t.len() == 4 && t.chars().all(|c| c.is_ascii_digit()) {
        let y: i32 = t.parse().ok()?;
        if (1000..=2100).contains(&y) {
            return Some(y);
        }
    }
    None
}

fn parse_day(token: &str) -> Option<u32> {
    let t = strip_punct(token);
    let t = t
        .strip_suffix("st")
        .or_else(|| t.strip_suffix("nd"))
        .or_else(|| t.strip_suffix("rd"))
        .or_else(|| t.strip_suffix("th"))
        .unwrap_or(t);
    if t.is_empty() || !t.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let d: u32 = t.parse().ok()?;
    (1..=31).contains(&d).then_some(d)
}

/// Parse a token as a number: integers or decimals, optional comma grouping.
/// Values are not unit-normalized.
pub fn parse_number(token: &str) -> Option<f64> {
    let t = strip_punct(token);
    if t.is_empty() {
        return None;
    }
    let (neg, digits) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    if digits.is_empty() {
        return None;
    }
    // Validate [0-9,]*[.##]; comma grouping must be in groups of three.
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (digits, None),
    };
    if int_part.is_empty() && frac_part.is_none() {
        return None;
    }
    if let Some(f) = frac_part {
        if f.is_empty() || !f.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
    }
    let cleaned_int = if int_part.contains(',') {
        let groups: Vec<&str> = int_part.split(',').collect();
        if groups.len() < 2
            || groups[0].is_empty()
            || groups[0].len() > 3
            || !groups[0].chars().all(|c| c.is_ascii_digit())
            || groups[1..]
                .iter()
                .any(|g| g.len() != 3 || !g.chars().all(|c| c.is_ascii_digit()))
        {
            return None;
        }
        groups.concat()
    } else {
        if !int_part.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        int_part.to_string()
    };
    let text = match frac_part {
        Some(f) => format!("{cleaned_int}.{f}"),
        None => cleaned_int,
    };
    let v: f64 = text.parse().ok()?;
    Some(if neg { -v } else { v })
}

/// All tokens parseable as a number, in order. Unparseable tokens are skipped.
pub fn extract_numbers(tokens: &[String]) -> Vec<NumberToken> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| parse_number(t).map(|value| NumberToken { index: i, value }))
        .collect()
}

/// Date mentions recognized by pattern rules, greedy longest match left to
/// right. Recognized surface forms: "19 November 1961" (day month year),
/// "November 1961" (month year), and a bare year "1961".
pub fn extract_dates(tokens: &[String]) -> Vec<DateToken> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        // day month year
        if i + 2 < tokens.len() {
            if let (Some(d), Some(m), Some(y)) = (
                parse_day(&tokens[i]),
                parse_month(&tokens[i + 1]),
                parse_year(&tokens[i + 2]),
            ) {
                out.push(DateToken { start: i, end: i + 2, day: d, month: m, year: y });
                i += 3;
                continue;
            }
        }
        // month year
        if i + 1 < tokens.len() {
            if let (Some(m), Some(y)) = (parse_month(&tokens[i]), parse_year(&tokens[i + 1])) {
                out.push(DateToken { start: i, end: i + 1, day: 1, month: m, year: y });
                i += 2;
                continue;
            }
        }
        // bare year
        if let Some(y) = parse_year(&tokens[i]) {
            out.push(DateToken { start: i, end: i, day: 1, month: m_default(), year: y });
        }
        i += 1;
    }
    out
}

fn m_default() -> u32 {
    1
}

impl AnnotatedPassage {
    /// Annotate a token sequence: extract numbers and dates and build the
    /// deduplicated, sorted value supports.
    pub fn annotate(tokens: Vec<String>) -> Self {
        let number_tokens = extract_numbers(&tokens);
        let date_tokens = extract_dates(&tokens);
        let mut p = AnnotatedPassage {
            tokens,
            number_tokens,
            date_tokens,
            unique_numbers: Vec::new(),
            unique_dates: Vec::new(),
        };
        p.rebuild_supports();
        p
    }

    pub fn rebuild_supports(&mut self) {
        let mut nums: Vec<f64> = self.number_tokens.iter().map(|n| n.value).collect();
        nums.sort_by(|a, b| a.partial_cmp(b).unwrap());
        nums.dedup();
        self.unique_numbers = nums;
        let mut dates: Vec<(i32, u32, u32)> = self.date_tokens.iter().map(DateToken::ymd).collect();
        dates.sort();
        dates.dedup();
        self.unique_dates = dates;
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn number_value_index(&self, value: f64) -> Option<usize> {
        self.unique_numbers.iter().position(|v| *v == value)
    }

    pub fn date_value_index(&self, ymd: (i32, u32, u32)) -> Option<usize> {
        self.unique_dates.iter().position(|v| *v == ymd)
    }

    /// Index of the unique value each number token maps to.
    pub fn number_token_value_indices(&self) -> Vec<usize> {
        self.number_tokens
            .iter()
            .map(|n| self.number_value_index(n.value).expect("support invariant"))
            .collect()
    }

    /// Index of the unique date each date token maps to.
    pub fn date_token_value_indices(&self) -> Vec<usize> {
        self.date_tokens
            .iter()
            .map(|d| self.date_value_index(d.ymd()).expect("support invariant"))
            .collect()
    }

    /// All distinct signed year differences over ordered pairs of unique dates.
    pub fn time_delta_support(&self) -> TimeDeltaSupport {
        let mut values: Vec<i32> = Vec::new();
        for a in &self.unique_dates {
            for b in &self.unique_dates {
                values.push(a.0 - b.0);
            }
        }
        values.sort_unstable();
        values.dedup();
        TimeDeltaSupport { values }
    }
}
