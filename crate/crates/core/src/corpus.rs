//! Dated article collections, sentence splitting, date mentions and timelines.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A calendar day, serialised as `YYYY-MM-DD`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DayStamp(NaiveDate);

impl DayStamp {
    pub fn new(year: i32, month: u32, day: u32) -> Result<Self> {
        NaiveDate::from_ymd_opt(year, month, day)
            .map(DayStamp)
            .ok_or_else(|| Error::validation(format!("invalid date {year:04}-{month:02}-{day:02}")))
    }

    pub fn year(&self) -> i32 {
        self.0.year()
    }

    pub fn month(&self) -> u32 {
        self.0.month()
    }

    pub fn day(&self) -> u32 {
        self.0.day()
    }

    pub fn weekday(&self) -> Weekday {
        self.0.weekday()
    }

    pub fn offset_days(&self, days: i64) -> DayStamp {
        DayStamp(self.0 + Duration::days(days))
    }

    /// Signed number of days from `other` to `self`.
    pub fn days_since(&self, other: DayStamp) -> i64 {
        (self.0 - other.0).num_days()
    }
}

impl fmt::Display for DayStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%d"))
    }
}

impl FromStr for DayStamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        if bytes.len() != 10 || bytes[4] != b'-' || bytes[7] != b'-' {
            return Err(Error::validation(format!("expected YYYY-MM-DD, got {s:?}")));
        }
        let field = |r: std::ops::Range<usize>| {
            s[r].parse::<u32>()
                .map_err(|_| Error::validation(format!("expected YYYY-MM-DD, got {s:?}")))
        };
        DayStamp::new(field(0..4)? as i32, field(5..7)?, field(8..10)?)
    }
}

impl Serialize for DayStamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DayStamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Lowercases, splits on Unicode whitespace and strips surrounding punctuation.
///
/// This is the one tokenizer used by TF-IDF, ROUGE, the repetition penalty and
/// the summary policy, so that all of them agree on what a token is.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "gen", "gov", "sen", "rep", "lt",
    "col", "capt", "sgt", "maj", "adm", "cmdr", "rev", "hon", "pres", "inc", "ltd", "co", "corp",
    "bros", "no", "vs", "etc", "u.s", "u.k", "u.n", "e.g", "i.e", "jan", "feb", "mar", "apr",
    "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "approx", "dept", "est", "fig",
];

/// Splits text on sentence-final punctuation followed by whitespace and an
/// uppercase letter or digit. Known abbreviations ("Dr.", "U.S.") do not end a
/// sentence. Returned spans are trimmed slices of the input.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') {
            // Absorb closing quotes and brackets after the terminator.
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}') {
                j += 1;
            }
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let mut next = k;
            while next < chars.len() && matches!(chars[next].1, '"' | '\'' | '(' | '[' | '\u{201c}' | '\u{2018}') {
                next += 1;
            }
            let boundary = k > j
                && next < chars.len()
                && (chars[next].1.is_uppercase() || chars[next].1.is_ascii_digit())
                && !(c == '.' && ends_with_abbreviation(&text[start..pos]));
            if boundary {
                let end = chars.get(j).map(|&(p, _)| p).unwrap_or(text.len());
                push_span(&mut spans, &text[start..end]);
                start = chars[k].0;
                i = k;
                continue;
            }
        }
        i += 1;
    }
    push_span(&mut spans, &text[start..]);
    spans
}

fn push_span<'a>(spans: &mut Vec<&'a str>, span: &'a str) {
    let span = span.trim();
    if !span.is_empty() {
        spans.push(span);
    }
}

fn ends_with_abbreviation(before_period: &str) -> bool {
    let word = before_period
        .rsplit(|c: char| c.is_whitespace() || c == '(' || c == '"')
        .next()
        .unwrap_or("");
    let word = word.to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub publication_date: DayStamp,
    pub sentences: Vec<String>,
    pub date_mentions: Vec<DayStamp>,
}

impl Article {
    pub fn from_text(id: impl Into<String>, publication_date: DayStamp, text: &str) -> Self {
        let sentences: Vec<String> = split_sentences(text).into_iter().map(str::to_owned).collect();
        let date_mentions = extract_date_mentions(&sentences.join(" "), publication_date);
        Article {
            id: id.into(),
            publication_date,
            sentences,
            date_mentions,
        }
    }

    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticleCollection {
    pub topic: String,
    pub articles: Vec<Article>,
}

impl ArticleCollection {
    pub fn new(topic: impl Into<String>, articles: Vec<Article>) -> Result<Self> {
        let mut seen = HashSet::new();
        for a in &articles {
            if !seen.insert(a.id.as_str()) {
                return Err(Error::validation(format!("duplicate article id {:?}", a.id)));
            }
        }
        Ok(ArticleCollection {
            topic: topic.into(),
            articles,
        })
    }

    pub fn get(&self, id: &str) -> Option<&Article> {
        self.articles.iter().find(|a| a.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    /// Corpus-wide count of each mentioned date.
    pub fn mention_counts(&self) -> BTreeMap<DayStamp, usize> {
        let mut counts = BTreeMap::new();
        for a in &self.articles {
            for d in &a.date_mentions {
                *counts.entry(*d).or_insert(0) += 1;
            }
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    #[serde(alias = "date")]
    publication_date: DayStamp,
    text: String,
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses line-delimited JSON records, skipping blank lines.
pub(crate) fn parse_records<T: for<'de> Deserialize<'de>>(path: &Path, content: &str) -> Result<Vec<T>> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub(crate) fn write_records<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn topic_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a corpus of `{"id", "publication_date", "text"}` records. The topic is the file stem.
pub fn load_collection(path: impl AsRef<Path>) -> Result<ArticleCollection> {
    let path = path.as_ref();
    let records: Vec<CorpusRecord> = parse_records(path, &read_lines(path)?)?;
    let articles = records
        .into_iter()
        .map(|r| Article::from_text(r.id, r.publication_date, &r.text))
        .collect();
    ArticleCollection::new(topic_from_path(path), articles)
}

pub fn save_collection(collection: &ArticleCollection, path: impl AsRef<Path>) -> Result<()> {
    write_records(
        path.as_ref(),
        collection.articles.iter().map(|a| CorpusRecord {
            id: a.id.clone(),
            publication_date: a.publication_date,
            text: a.text(),
        }),
    )
}

/// Keeps the first `k` sentences and recomputes date mentions over them.
pub fn truncate_article(article: &Article, k: usize) -> Article {
    let sentences: Vec<String> = article.sentences.iter().take(k).cloned().collect();
    let date_mentions = extract_date_mentions(&sentences.join(" "), article.publication_date);
    Article {
        id: article.id.clone(),
        publication_date: article.publication_date,
        sentences,
        date_mentions,
    }
}

const MONTHS: &str = "January|February|March|April|May|June|July|August|September|October|November|December|Jan|Feb|Mar|Apr|Jun|Jul|Aug|Sept|Sep|Oct|Nov|Dec";

struct DatePatterns {
    iso: Regex,
    day_month_year: Regex,
    month_day_year: Regex,
    month_day: Regex,
    day_month: Regex,
    weekday: Regex,
    relative: Regex,
    weekday_tail: Regex,
}

fn patterns() -> &'static DatePatterns {
    static PATTERNS: OnceLock<DatePatterns> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let re = |s: String| Regex::new(&s).expect("static date pattern");
        DatePatterns {
            iso: re(r"\b(\d{4})-(\d{2})-(\d{2})\b".into()),
            day_month_year: re(format!(r"\b(\d{{1,2}})(?:st|nd|rd|th)?\s+({MONTHS})\.?,?\s+(\d{{4}})\b")),
            month_day_year: re(format!(r"\b({MONTHS})\.?\s+(\d{{1,2}})(?:st|nd|rd|th)?,?\s+(\d{{4}})\b")),
            month_day: re(format!(r"\b({MONTHS})\.?\s+(\d{{1,2}})(?:st|nd|rd|th)?\b")),
            day_month: re(format!(r"\b(\d{{1,2}})(?:st|nd|rd|th)?\s+({MONTHS})\b")),
            weekday: re(r"\b(Monday|Tuesday|Wednesday|Thursday|Friday|Saturday|Sunday)\b".into()),
            relative: re(r"(?i)\b(yesterday|today)\b".into()),
            weekday_tail: re(r"^,?\s*".into()),
        }
    })
}

fn month_number(name: &str) -> u32 {
    match &name[..3] {
        "Jan" => 1,
        "Feb" => 2,
        "Mar" => 3,
        "Apr" => 4,
        "May" => 5,
        "Jun" => 6,
        "Jul" => 7,
        "Aug" => 8,
        "Sep" => 9,
        "Oct" => 10,
        "Nov" => 11,
        _ => 12,
    }
}

fn weekday_from_name(name: &str) -> Weekday {
    match name {
        "Monday" => Weekday::Mon,
        "Tuesday" => Weekday::Tue,
        "Wednesday" => Weekday::Wed,
        "Thursday" => Weekday::Thu,
        "Friday" => Weekday::Fri,
        "Saturday" => Weekday::Sat,
        _ => Weekday::Sun,
    }
}

/// Resolves a yearless day-month to the nearest such day on or before `pub_date`.
fn resolve_month_day(month: u32, day: u32, pub_date: DayStamp) -> Option<DayStamp> {
    let this_year = DayStamp::new(pub_date.year(), month, day).ok();
    match this_year {
        Some(d) if d <= pub_date => Some(d),
        _ => DayStamp::new(pub_date.year() - 1, month, day).ok(),
    }
}

fn resolve_weekday(weekday: Weekday, pub_date: DayStamp) -> DayStamp {
    let back = (pub_date.weekday().num_days_from_monday() as i64 - weekday.num_days_from_monday() as i64)
        .rem_euclid(7);
    pub_date.offset_days(-back)
}

/// Finds date expressions in `text` and resolves them against `pub_date`.
///
/// Recognised: ISO dates, `D Month YYYY`, `Month D, YYYY`, yearless `Month D`
/// or `D Month`, weekday names, and `yesterday` / `today`. Yearless forms and
/// weekdays resolve to the nearest matching day on or before `pub_date`.
/// Overlapping matches are resolved in favour of the more explicit pattern.
pub fn extract_date_mentions(text: &str, pub_date: DayStamp) -> Vec<DayStamp> {
    let p = patterns();
    let mut taken: Vec<(usize, usize, DayStamp)> = Vec::new();
    let overlaps = |taken: &[(usize, usize, DayStamp)], s: usize, e: usize| {
        taken.iter().any(|&(ts, te, _)| s < te && ts < e)
    };

    let accept = |taken: &mut Vec<(usize, usize, DayStamp)>, s: usize, e: usize, d: Option<DayStamp>| {
        if let Some(d) = d {
            if !overlaps(taken, s, e) {
                taken.push((s, e, d));
            }
        }
    };

    for c in p.iso.captures_iter(text) {
        let m = c.get(0).unwrap();
        let d = DayStamp::new(c[1].parse().unwrap(), c[2].parse().unwrap(), c[3].parse().unwrap()).ok();
        accept(&mut taken, m.start(), m.end(), d);
    }
    for c in p.day_month_year.captures_iter(text) {
        let m = c.get(0).unwrap();
        let d = DayStamp::new(c[3].parse().unwrap(), month_number(&c[2]), c[1].parse().unwrap()).ok();
        accept(&mut taken, m.start(), m.end(), d);
    }
    for c in p.month_day_year.captures_iter(text) {
        let m = c.get(0).unwrap();
        let d = DayStamp::new(c[3].parse().unwrap(), month_number(&c[1]), c[2].parse().unwrap()).ok();
        accept(&mut taken, m.start(), m.end(), d);
    }
    for c in p.month_day.captures_iter(text) {
        let m = c.get(0).unwrap();
        let d = resolve_month_day(month_number(&c[1]), c[2].parse().unwrap(), pub_date);
        accept(&mut taken, m.start(), m.end(), d);
    }
    for c in p.day_month.captures_iter(text) {
        let m = c.get(0).unwrap();
        let d = resolve_month_day(month_number(&c[2]), c[1].parse().unwrap(), pub_date);
        accept(&mut taken, m.start(), m.end(), d);
    }
    for c in p.weekday.captures_iter(text) {
        let m = c.get(0).unwrap();
        // "Monday, March 3, 2011" names one day, not two.
        let tail = p.weekday_tail.find(&text[m.end()..]).map(|t| t.end()).unwrap_or(0);
        let next = m.end() + tail;
        if taken.iter().any(|&(s, _, _)| s == next) {
            continue;
        }
        let d = Some(resolve_weekday(weekday_from_name(&c[1]), pub_date));
        accept(&mut taken, m.start(), m.end(), d);
    }
    for c in p.relative.captures_iter(text) {
        let m = c.get(0).unwrap();
        let d = if c[1].eq_ignore_ascii_case("yesterday") {
            pub_date.offset_days(-1)
        } else {
            pub_date
        };
        accept(&mut taken, m.start(), m.end(), Some(d));
    }

    taken.sort_by_key(|&(s, _, _)| s);
    taken.into_iter().map(|(_, _, d)| d).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub date: DayStamp,
    pub text: String,
    pub tokens: Vec<String>,
}

impl EventSummary {
    pub fn new(date: DayStamp, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        EventSummary { date, text, tokens }
    }
}

/// Chronological event summaries with at most one entry per date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub topic: String,
    pub entries: Vec<EventSummary>,
}

impl Timeline {
    /// Sorts entries by date, merging entries that share a date by
    /// concatenating their texts in input order.
    pub fn from_entries(topic: impl Into<String>, entries: Vec<EventSummary>) -> Self {
        let mut by_date: BTreeMap<DayStamp, Vec<String>> = BTreeMap::new();
        for e in entries {
            by_date.entry(e.date).or_default().push(e.text);
        }
        let entries = by_date
            .into_iter()
            .map(|(date, texts)| {
                let texts: Vec<String> = texts.into_iter().filter(|t| !t.trim().is_empty()).collect();
                EventSummary::new(date, texts.join(" "))
            })
            .collect();
        Timeline {
            topic: topic.into(),
            entries,
        }
    }

    pub fn dates(&self) -> Vec<DayStamp> {
        self.entries.iter().map(|e| e.date).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn text(&self) -> String {
        self.entries
            .iter()
            .map(|e| e.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> Vec<String> {
        self.entries.iter().flat_map(|e| e.tokens.iter().cloned()).collect()
    }

    /// True when dates are strictly increasing.
    pub fn is_well_formed(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].date < w[1].date)
    }
}

#[derive(Serialize, Deserialize)]
struct TimelineRecord {
    date: DayStamp,
    summary: String,
}

/// Loads a timeline of `{"date", "summary"}` records. The topic is the file stem.
pub fn load_timeline(path: impl AsRef<Path>) -> Result<Timeline> {
    let path = path.as_ref();
    let records: Vec<TimelineRecord> = parse_records(path, &read_lines(path)?)?;
    Ok(Timeline::from_entries(
        topic_from_path(path),
        records
            .into_iter()
            .map(|r| EventSummary::new(r.date, r.summary))
            .collect(),
    ))
}

pub fn save_timeline(timeline: &Timeline, path: impl AsRef<Path>) -> Result<()> {
    write_records(
        path.as_ref(),
        timeline.entries.iter().map(|e| TimelineRecord {
            date: e.date,
            summary: e.text.clone(),
        }),
    )
}

/// Serialised timeline bytes, used for content hashing.
pub fn timeline_bytes(timeline: &Timeline) -> Vec<u8> {
    let mut out = Vec::new();
    for e in &timeline.entries {
        serde_json::to_writer(
            &mut out,
            &TimelineRecord {
                date: e.date,
                summary: e.text.clone(),
            },
        )
        .expect("timeline record serialises");
        out.push(b'\n');
    }
    out
}

/// Smoothed inverse document frequency: `ln((1 + n) / (1 + df)) + 1`.
pub fn smoothed_idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// Document frequency of every token over the collection's articles.
pub fn document_frequencies(collection: &ArticleCollection) -> HashMap<String, usize> {
    let mut df = HashMap::new();
    for a in &collection.articles {
        let distinct: HashSet<String> = tokenize(&a.text()).into_iter().collect();
        for t in distinct {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    df
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "again", "against", "all", "also", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from",
    "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself", "him",
    "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just", "me",
    "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once", "only",
    "or", "other", "our", "ours", "out", "over", "own", "said", "same", "says", "she", "should",
    "so", "some", "such", "than", "that", "the", "their", "theirs", "them", "then", "there",
    "these", "they", "this", "those", "through", "to", "too", "under", "until", "up", "very",
    "was", "we", "were", "what", "when", "where", "which", "while", "who", "whom", "why", "will",
    "with", "would", "you", "your", "yours",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// The `n` reference-timeline terms with the highest TF-IDF weight.
///
/// Term frequency is the raw count over the whole reference text; document
/// frequencies come from the corpus articles. Stopwords and tokens without a
/// letter are skipped. Ties are broken lexicographically.
pub fn extract_keywords_tfidf(reference: &Timeline, corpus: &ArticleCollection, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::validation("keyword count must be positive"));
    }
    if reference.is_empty() {
        return Err(Error::validation("reference timeline is empty"));
    }
    let df = document_frequencies(corpus);
    let mut tf: HashMap<String, usize> = HashMap::new();
    for t in reference.tokens() {
        if is_stopword(&t) || !t.chars().any(char::is_alphabetic) {
            continue;
        }
        *tf.entry(t).or_insert(0) += 1;
    }
    let mut weighted: Vec<(String, f64)> = tf
        .into_iter()
        .map(|(term, count)| {
            let w = count as f64 * smoothed_idf(corpus.len(), df.get(&term).copied().unwrap_or(0));
            (term, w)
        })
        .collect();
    weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(weighted.into_iter().take(n).map(|(t, _)| t).collect())
}
