use std::ops::Range;

/// A fully assembled prompt and the byte regions it is made of.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    /// Concatenated demonstrations, separators between them included.
    pub demo_region: Range<usize>,
    /// Exactly the query text.
    pub test_region: Range<usize>,
}

impl Prompt {
    pub fn demos(&self) -> &str {
        &self.text[self.demo_region.clone()]
    }

    pub fn query(&self) -> &str {
        &self.text[self.test_region.clone()]
    }

    /// Everything before the query: demonstrations plus the trailing separator.
    pub fn context(&self) -> &str {
        &self.text[..self.test_region.start]
    }
}

/// Joins demonstrations and the query with `separator`. With no
/// demonstrations the prompt is the bare query.
pub fn assemble_prompt<S: AsRef<str>>(demos: &[S], query: &str, separator: &str) -> Prompt {
    let mut text = String::new();
    for (i, d) in demos.iter().enumerate() {
        if i > 0 {
            text.push_str(separator);
        }
        text.push_str(d.as_ref());
    }
    let demo_region = 0..text.len();
    if !demos.is_empty() {
        text.push_str(separator);
    }
    let start = text.len();
    text.push_str(query);
    Prompt {
        test_region: start..text.len(),
        demo_region,
        text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_shot() {
        let p = assemble_prompt::<&str>(&[], "Q", "\n");
        assert_eq!(p.text, "Q");
        assert_eq!(p.test_region, 0..1);
        assert!(p.demo_region.is_empty());
        assert_eq!(p.context(), "");
    }

    #[test]
    fn two_demos() {
        let p = assemble_prompt(&["A", "B"], "Q", "\n");
        assert_eq!(p.text, "A\nB\nQ");
        assert_eq!(p.query(), "Q");
        assert_eq!(p.demos(), "A\nB");
        assert_eq!(p.demo_region.end + 1, p.test_region.start);
        assert_eq!(p.context(), "A\nB\n");
    }

    proptest! {
        #[test]
        fn regions_partition_text(demos in proptest::collection::vec("[a-z ]{0,6}", 0..5),
                                  query in "[a-z]{0,6}", sep in "[\n|]{0,2}") {
            let p = assemble_prompt(&demos, &query, &sep);
            prop_assert!(p.demo_region.end <= p.test_region.start);
            prop_assert_eq!(p.test_region.end, p.text.len());
            prop_assert_eq!(p.query(), query.as_str());
            let mut rebuilt = p.demos().to_string();
            if !demos.is_empty() { rebuilt.push_str(&sep); }
            rebuilt.push_str(p.query());
            prop_assert_eq!(rebuilt, p.text.clone());
        }
    }
}
