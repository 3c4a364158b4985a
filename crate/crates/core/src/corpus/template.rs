use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{parse_flat_record, CorpusError, Example, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Generation,
}

/// Which variant of a pattern to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot<'a> {
    /// Classification: fill the label slot with this label's verbalizer.
    Label(&'a str),
    /// Fill with the example's own gold label (classification) or its
    /// target text (generation).
    Gold,
    /// Everything before the label slot / target placeholder, trailing
    /// whitespace trimmed. This is the test input as it appears in a prompt.
    Open,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(String),
    SourceName,
    TargetName,
}

/// A parsed pattern split around its label slot.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Pattern {
    raw: String,
    head: Vec<Segment>,
    slot: Vec<Segment>,
    tail: Vec<Segment>,
}

/// Per-label prompt patterns with `<X>`-style placeholders.
///
/// For classification every pattern shares the text outside the label slot;
/// the slot is the differing middle region, widened to whitespace boundaries.
/// Generation templates hold a single pattern whose last placeholder is the
/// target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    kind: TaskKind,
    patterns: BTreeMap<String, Pattern>,
    separator: String,
    bindings: BTreeMap<String, String>,
    source_name: Option<String>,
    target_name: Option<String>,
}

const GENERATION_KEY: &str = "";

fn default_field(placeholder: &str) -> &str {
    match placeholder {
        "X" => "text",
        "C" => "context",
        "X'" => "source",
        "Y'" => "target",
        other => other,
    }
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

fn parse_segments(raw: &str, generation: bool) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut rest = raw;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("<<") {
            lit.push('<');
            rest = &rest[2..];
            continue;
        }
        if rest.starts_with(">>") {
            lit.push('>');
            rest = &rest[2..];
            continue;
        }
        if generation && (rest.starts_with("[src]") || rest.starts_with("[tgt]")) {
            if !lit.is_empty() {
                out.push(Segment::Literal(std::mem::take(&mut lit)));
            }
            out.push(if rest.starts_with("[src]") {
                Segment::SourceName
            } else {
                Segment::TargetName
            });
            rest = &rest[5..];
            continue;
        }
        if c == '<' {
            let name_len: usize = rest[1..]
                .chars()
                .take_while(|&c| is_name_char(c))
                .map(char::len_utf8)
                .sum();
            if name_len > 0 && rest[1 + name_len..].starts_with('>') {
                if !lit.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut lit)));
                }
                out.push(Segment::Field(rest[1..1 + name_len].to_string()));
                rest = &rest[name_len + 2..];
                continue;
            }
        }
        lit.push(c);
        rest = &rest[c.len_utf8()..];
    }
    if !lit.is_empty() {
        out.push(Segment::Literal(lit));
    }
    out
}

/// Byte lengths of the shared head and tail of all patterns, snapped so the
/// head ends after whitespace and the tail starts with whitespace.
fn label_slot_bounds(raws: &[&str]) -> (usize, usize) {
    let first = raws[0];
    let mut head = first.len();
    for r in &raws[1..] {
        let common: usize = first
            .chars()
            .zip(r.chars())
            .take_while(|(a, b)| a == b)
            .map(|(a, _)| a.len_utf8())
            .sum();
        head = head.min(common);
    }
    while head > 0 && !first[..head].ends_with(char::is_whitespace) {
        head -= first[..head].chars().next_back().map_or(1, char::len_utf8);
    }
    let mut tail = first.len();
    for r in &raws[1..] {
        let common: usize = first
            .chars()
            .rev()
            .zip(r.chars().rev())
            .take_while(|(a, b)| a == b)
            .map(|(a, _)| a.len_utf8())
            .sum();
        tail = tail.min(common);
    }
    let min_len = raws.iter().map(|r| r.len()).min().unwrap_or(0);
    tail = tail.min(min_len - head);
    while tail > 0 && !first[first.len() - tail..].starts_with(char::is_whitespace) {
        tail -= first[first.len() - tail..]
            .chars()
            .next()
            .map_or(1, char::len_utf8);
    }
    (head, tail)
}

impl Template {
    /// Builds a classification template from `(label, pattern)` pairs.
    pub fn classification<L, P>(patterns: impl IntoIterator<Item = (L, P)>) -> Result<Self>
    where
        L: Into<String>,
        P: Into<String>,
    {
        let raw: BTreeMap<String, String> = patterns
            .into_iter()
            .map(|(l, p)| (l.into(), p.into()))
            .collect();
        if raw.len() < 2 {
            return Err(CorpusError::InvalidTemplate(
                "classification templates need at least two labels".into(),
            ));
        }
        let raws: Vec<&str> = raw.values().map(String::as_str).collect();
        let (head, tail) = label_slot_bounds(&raws);
        let patterns = raw
            .iter()
            .map(|(label, p)| {
                let split = p.len() - tail;
                let pattern = Pattern {
                    raw: p.clone(),
                    head: parse_segments(&p[..head], false),
                    slot: parse_segments(&p[head..split], false),
                    tail: parse_segments(&p[split..], false),
                };
                (label.clone(), pattern)
            })
            .collect();
        Ok(Self {
            kind: TaskKind::Classification,
            patterns,
            separator: "\n".into(),
            bindings: BTreeMap::new(),
            source_name: None,
            target_name: None,
        })
    }

    /// Builds a generation template. The last placeholder in `pattern` is
    /// the target slot.
    pub fn generation(
        pattern: impl Into<String>,
        source_name: impl Into<String>,
        target_name: impl Into<String>,
    ) -> Result<Self> {
        let raw = pattern.into();
        let segments = parse_segments(&raw, true);
        let Some(target_at) = segments
            .iter()
            .rposition(|s| matches!(s, Segment::Field(_)))
        else {
            return Err(CorpusError::InvalidTemplate(
                "generation pattern has no target placeholder".into(),
            ));
        };
        let pattern = Pattern {
            raw,
            head: segments[..target_at].to_vec(),
            slot: segments[target_at..=target_at].to_vec(),
            tail: segments[target_at + 1..].to_vec(),
        };
        Ok(Self {
            kind: TaskKind::Generation,
            patterns: BTreeMap::from([(GENERATION_KEY.to_string(), pattern)]),
            separator: "\n".into(),
            bindings: BTreeMap::new(),
            source_name: Some(source_name.into()),
            target_name: Some(target_name.into()),
        })
    }

    /// Overrides which example field a placeholder reads.
    pub fn bind(mut self, placeholder: impl Into<String>, field: impl Into<String>) -> Self {
        self.bindings.insert(placeholder.into(), field.into());
        self
    }

    pub fn with_separator(mut self, separator: impl Into<String>) -> Self {
        self.separator = separator.into();
        self
    }

    /// Templates shipped with the crate, by task id.
    pub fn builtin(id: &str) -> Option<Self> {
        let review = |labels: &[&str]| {
            Template::classification(
                labels
                    .iter()
                    .map(|l| (*l, format!("Review: \"<X>\" Sentiment: {l}"))),
            )
            .ok()
        };
        match id {
            "sst2" | "cr" => review(&["positive", "negative"]),
            "sst5" => review(&["terrible", "bad", "okay", "good", "great"]),
            "subj" => Template::classification([
                ("objective", "Input: \"<X>\" Type: objective"),
                ("subjective", "Input: \"<X>\" Type: subjective"),
            ])
            .ok(),
            "agnews" => Template::classification([
                ("World", "\"<X>\" It is about world."),
                ("Sports", "\"<X>\" It is about sports."),
                ("Business", "\"<X>\" It is about business."),
                ("Sci/Tech", "\"<X>\" It is about science and technology."),
            ])
            .ok(),
            "mnli" => Template::classification([
                ("Entailment", "<C> Can we know <X>? Yes."),
                ("Neutral", "<C> Can we know <X>? Maybe."),
                ("Contradiction", "<C> Can we know <X>? No."),
            ])
            .ok()
            .map(|t| t.bind("C", "premise").bind("X", "hypothesis")),
            "qnli" => Template::classification([
                ("Entailment", "<C> Can we know <X>? Yes."),
                ("Contradiction", "<C> Can we know <X>? No."),
            ])
            .ok()
            .map(|t| t.bind("C", "sentence").bind("X", "question")),
            _ => None,
        }
    }

    /// Reads a template file: line-delimited flat records. A record with
    /// `label` and `pattern` adds a classification pattern; a record with only
    /// `pattern` (plus `src`/`tgt` language names) defines a generation
    /// template. Keys of the form `<NAME>` bind a placeholder to a field, and
    /// `separator` overrides the demonstration separator.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut labelled = Vec::new();
        let mut generation = None;
        let mut bindings = Vec::new();
        let mut separator = None;
        let mut names = (None, None);
        for (idx, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let mut rec = parse_flat_record(raw, idx + 1)?;
            if let Some(sep) = rec.remove("separator") {
                separator = Some(sep);
            }
            if let Some(s) = rec.remove("src") {
                names.0 = Some(s);
            }
            if let Some(t) = rec.remove("tgt") {
                names.1 = Some(t);
            }
            match (rec.remove("label"), rec.remove("pattern")) {
                (Some(l), Some(p)) => labelled.push((l, p)),
                (None, Some(p)) => generation = Some(p),
                (Some(l), None) => {
                    return Err(CorpusError::InvalidTemplate(format!(
                        "line {}: label \"{l}\" has no pattern",
                        idx + 1
                    )))
                }
                (None, None) => {}
            }
            rec.remove("kind");
            for (k, v) in rec {
                if let Some(name) = k.strip_prefix('<').and_then(|k| k.strip_suffix('>')) {
                    bindings.push((name.to_string(), v));
                }
            }
        }
        let mut template = match (generation, labelled.is_empty()) {
            (Some(p), true) => Self::generation(
                p,
                names.0.unwrap_or_else(|| "Source".into()),
                names.1.unwrap_or_else(|| "Target".into()),
            )?,
            (None, false) => Self::classification(labelled)?,
            (Some(_), false) => {
                return Err(CorpusError::InvalidTemplate(
                    "mixes labelled and unlabelled patterns".into(),
                ))
            }
            (None, true) => return Err(CorpusError::InvalidTemplate("no patterns".into())),
        };
        for (name, field) in bindings {
            template = template.bind(name, field);
        }
        if let Some(sep) = separator {
            template.separator = sep;
        }
        Ok(template)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    /// Label names in lexicographic order. Empty for generation templates.
    pub fn labels(&self) -> Vec<&str> {
        match self.kind {
            TaskKind::Classification => self.patterns.keys().map(String::as_str).collect(),
            TaskKind::Generation => Vec::new(),
        }
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.kind == TaskKind::Classification && self.patterns.contains_key(label)
    }

    /// Raw pattern text for a label (or the generation pattern for `""`).
    pub fn pattern(&self, label: &str) -> Option<&str> {
        self.patterns.get(label).map(|p| p.raw.as_str())
    }

    fn field_for<'a>(&'a self, placeholder: &'a str) -> &'a str {
        self.bindings
            .get(placeholder)
            .map(String::as_str)
            .unwrap_or_else(|| default_field(placeholder))
    }

    /// Fields every example must carry for this template.
    pub fn required_fields(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in self.patterns.values() {
            for seg in p.head.iter().chain(&p.slot).chain(&p.tail) {
                if let Segment::Field(name) = seg {
                    let f = self.field_for(name).to_string();
                    if !out.contains(&f) {
                        out.push(f);
                    }
                }
            }
        }
        out
    }

    /// Fields that make up the test input, i.e. everything except a
    /// generation template's target.
    pub fn input_fields(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in self.patterns.values() {
            let segs: Box<dyn Iterator<Item = &Segment>> = match self.kind {
                TaskKind::Classification => Box::new(p.head.iter().chain(&p.slot).chain(&p.tail)),
                TaskKind::Generation => Box::new(p.head.iter().chain(&p.tail)),
            };
            for seg in segs {
                if let Segment::Field(name) = seg {
                    let f = self.field_for(name).to_string();
                    if !out.contains(&f) {
                        out.push(f);
                    }
                }
            }
        }
        out
    }

    /// Input fields of `example` joined by single spaces, used as retrieval text.
    pub fn input_text(&self, example: &Example) -> String {
        self.input_fields()
            .iter()
            .filter_map(|f| example.field(f))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn render_segments(&self, segs: &[Segment], example: &Example, out: &mut String) -> Result<()> {
        for seg in segs {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Field(name) => {
                    let field = self.field_for(name);
                    let value =
                        example
                            .field(field)
                            .ok_or_else(|| CorpusError::UnresolvedPlaceholder {
                                id: example.id.clone(),
                                field: field.to_string(),
                            })?;
                    out.push_str(value);
                }
                Segment::SourceName => out.push_str(self.source_name.as_deref().unwrap_or("")),
                Segment::TargetName => out.push_str(self.target_name.as_deref().unwrap_or("")),
            }
        }
        Ok(())
    }

    /// Renders `example` through the pattern chosen by `slot`.
    pub fn render(&self, example: &Example, slot: Slot<'_>) -> Result<String> {
        let pattern = match (self.kind, slot) {
            (TaskKind::Classification, Slot::Label(l)) => self
                .patterns
                .get(l)
                .ok_or_else(|| CorpusError::UnknownLabel(l.to_string()))?,
            (TaskKind::Classification, Slot::Gold) => {
                let label = example
                    .label
                    .as_deref()
                    .ok_or_else(|| CorpusError::MissingLabel(example.id.clone()))?;
                self.patterns
                    .get(label)
                    .ok_or_else(|| CorpusError::UnknownLabel(label.to_string()))?
            }
            (TaskKind::Classification, Slot::Open) => self
                .patterns
                .values()
                .next()
                .expect("classification templates hold two or more patterns"),
            (TaskKind::Generation, Slot::Label(l)) => {
                return Err(CorpusError::UnknownLabel(l.to_string()))
            }
            (TaskKind::Generation, _) => &self.patterns[GENERATION_KEY],
        };
        let mut out = String::new();
        self.render_segments(&pattern.head, example, &mut out)?;
        if slot == Slot::Open {
            out.truncate(out.trim_end().len());
            return Ok(out);
        }
        self.render_segments(&pattern.slot, example, &mut out)?;
        self.render_segments(&pattern.tail, example, &mut out)?;
        Ok(out)
    }

    /// Byte range of the label slot inside `render(example, Slot::Label(label))`.
    pub fn label_span(&self, example: &Example, label: &str) -> Result<std::ops::Range<usize>> {
        let pattern = self
            .patterns
            .get(label)
            .filter(|_| self.kind == TaskKind::Classification)
            .ok_or_else(|| CorpusError::UnknownLabel(label.to_string()))?;
        let mut out = String::new();
        self.render_segments(&pattern.head, example, &mut out)?;
        let start = out.len();
        self.render_segments(&pattern.slot, example, &mut out)?;
        Ok(start..out.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sst2_example(text: &str) -> Example {
        Example::new("0").with_field("text", text)
    }

    #[test]
    fn renders_sst2_row() {
        let t = Template::builtin("sst2").unwrap();
        let out = t
            .render(&sst2_example("a fine film"), Slot::Label("positive"))
            .unwrap();
        assert_eq!(out, "Review: \"a fine film\" Sentiment: positive");
        let open = t.render(&sst2_example("a fine film"), Slot::Open).unwrap();
        assert_eq!(open, "Review: \"a fine film\" Sentiment:");
    }

    #[test]
    fn renders_mt_pattern() {
        let t = Template::generation("[src]: <X'> [tgt]: <Y'>", "English", "French").unwrap();
        let e = Example::new("0")
            .with_field("source", "hello")
            .with_field("target", "bonjour");
        assert_eq!(t.render(&e, Slot::Gold).unwrap(), "English: hello French: bonjour");
        assert_eq!(t.render(&e, Slot::Open).unwrap(), "English: hello French:");
        assert_eq!(t.input_fields(), ["source"]);
    }

    #[test]
    fn empty_field_is_fine() {
        let t = Template::builtin("sst2").unwrap();
        let out = t.render(&sst2_example(""), Slot::Label("negative")).unwrap();
        assert_eq!(out, "Review: \"\" Sentiment: negative");
    }

    #[test]
    fn render_errors() {
        let t = Template::builtin("sst2").unwrap();
        assert!(matches!(
            t.render(&sst2_example("x"), Slot::Label("meh")),
            Err(CorpusError::UnknownLabel(_))
        ));
        assert!(matches!(
            t.render(&Example::new("q"), Slot::Label("positive")),
            Err(CorpusError::UnresolvedPlaceholder { .. })
        ));
        assert!(matches!(
            t.render(&sst2_example("x"), Slot::Gold),
            Err(CorpusError::MissingLabel(_))
        ));
    }

    #[test]
    fn label_slot_snaps_to_words() {
        // "positive" and "negative" share the suffix "ive"
        let t = Template::builtin("sst2").unwrap();
        let e = sst2_example("ok");
        let span = t.label_span(&e, "positive").unwrap();
        let text = t.render(&e, Slot::Label("positive")).unwrap();
        assert_eq!(&text[span], "positive");

        let t = Template::builtin("mnli").unwrap();
        let e = Example::new("0")
            .with_field("premise", "P.")
            .with_field("hypothesis", "H");
        let text = t.render(&e, Slot::Label("Neutral")).unwrap();
        assert_eq!(text, "P. Can we know H? Maybe.");
        assert_eq!(&text[t.label_span(&e, "Neutral").unwrap()], "Maybe.");
        assert_eq!(t.render(&e, Slot::Open).unwrap(), "P. Can we know H?");
    }

    #[test]
    fn escapes_and_unknown_angles() {
        let t = Template::classification([("a", "<<X>> <X> a < b"), ("b", "<<X>> <X> b < b")])
            .unwrap();
        let out = t.render(&sst2_example("v"), Slot::Label("a")).unwrap();
        assert_eq!(out, "<X> v a < b");
        assert_eq!(t.required_fields(), ["text"]);
    }

    #[test]
    fn parses_template_file() {
        let text = r#"{"label":"entail","pattern":"<C> so <X>? yes"}
{"label":"contra","pattern":"<C> so <X>? no"}
{"<C>":"premise","<X>":"hypothesis","separator":" || "}"#;
        let t = Template::parse(text).unwrap();
        assert_eq!(t.labels(), ["contra", "entail"]);
        assert_eq!(t.separator(), " || ");
        assert_eq!(t.required_fields(), ["premise", "hypothesis"]);

        let g = Template::parse(r#"{"pattern":"[src]: <X'> [tgt]: <Y'>","src":"German","tgt":"Russian"}"#)
            .unwrap();
        assert_eq!(g.kind(), TaskKind::Generation);
        assert!(Template::parse(r#"{"label":"a","pattern":"x a"}"#).is_err());
        assert!(Template::parse("").is_err());
    }

    proptest! {
        #[test]
        fn labels_differ_only_in_slot(text in "[a-z ]{0,20}", a in 0usize..5, b in 0usize..5) {
            let t = Template::builtin("sst5").unwrap();
            let labels = t.labels();
            let e = sst2_example(&text);
            let (la, lb) = (labels[a], labels[b]);
            let ra = t.render(&e, Slot::Label(la)).unwrap();
            let rb = t.render(&e, Slot::Label(lb)).unwrap();
            let sa = t.label_span(&e, la).unwrap();
            let sb = t.label_span(&e, lb).unwrap();
            prop_assert_eq!(&ra[..sa.start], &rb[..sb.start]);
            prop_assert_eq!(&ra[sa.end..], &rb[sb.end..]);
            prop_assert_eq!(t.render(&e, Slot::Label(la)).unwrap(), ra);
        }
    }
}
