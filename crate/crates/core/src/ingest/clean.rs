use std::sync::OnceLock;

use regex::Regex;

use super::IngestError;

fn timestamp_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[?\b(?:\d{1,2}:)?\d{1,2}:\d{2}\b\]?").unwrap())
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*(?:step\s*)?\d+\s*[.):-]\s*").unwrap())
}

/// Transcript cleanup rules.
#[derive(Clone, Debug)]
pub struct CleanConfig {
    /// Lines matching any of these are dropped (ads, channel boilerplate).
    pub drop_patterns: Vec<Regex>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        let patterns = [
            r"(?i)\bsubscribe\b",
            r"(?i)\bsponsored\b",
            r"(?i)\badvertisement\b",
            r"(?i)\blike and share\b",
            r"(?i)\blink in the description\b",
            r"(?i)^\s*\[(?:music|applause)\]\s*$",
        ];
        CleanConfig { drop_patterns: patterns.iter().map(|p| Regex::new(p).unwrap()).collect() }
    }
}

impl CleanConfig {
    pub fn with_patterns(patterns: &[&str]) -> Result<Self, regex::Error> {
        Ok(CleanConfig { drop_patterns: patterns.iter().map(|p| Regex::new(p)).collect::<Result<_, _>>()? })
    }

    pub fn clean(&self, raw: &str) -> Result<String, IngestError> {
        let lines: Vec<String> = raw
            .lines()
            .filter(|line| !self.drop_patterns.iter().any(|re| re.is_match(line)))
            .map(|line| {
                let stripped = timestamp_re().replace_all(line, " ");
                stripped.split_whitespace().collect::<Vec<_>>().join(" ")
            })
            .filter(|line| !line.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(IngestError::EmptyAfterClean);
        }
        Ok(lines.join("\n"))
    }
}

/// Strips timestamps and boilerplate lines with the default rules.
pub fn clean_transcript(raw: &str) -> Result<String, IngestError> {
    CleanConfig::default().clean(raw)
}

const AUTO_DELIMITERS: [char; 4] = ['|', ',', '\\', '\n'];

/// Splits an action-verb list. Without an explicit delimiter the most
/// frequent of `|`, `,`, `\` and newline is used.
pub fn parse_verb_list(text: &str, delimiter: Option<char>) -> Result<Vec<String>, IngestError> {
    let delimiter = match delimiter {
        Some(d) => d,
        None => {
            let best = AUTO_DELIMITERS
                .iter()
                .map(|&d| (d, text.matches(d).count()))
                .fold(None, |best: Option<(char, usize)>, (d, n)| match best {
                    Some((_, m)) if m >= n => best,
                    _ if n > 0 => Some((d, n)),
                    _ => best,
                });
            match best {
                Some((d, _)) => d,
                None => {
                    let item = text.trim();
                    if item.is_empty() {
                        return Ok(Vec::new());
                    }
                    if item.split_whitespace().count() > 1 {
                        return Err(IngestError::NoDelimiterFound);
                    }
                    return Ok(vec![item.to_owned()]);
                }
            }
        }
    };
    Ok(text
        .split(delimiter)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Breaks cleaned tutorial text into steps: numbered items when the text
/// is numbered (lines before the first item are a heading and skipped),
/// otherwise one step per line, otherwise one per sentence.
pub fn split_steps(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.iter().any(|l| numbered_re().is_match(l)) {
        let mut steps: Vec<String> = Vec::new();
        for line in lines {
            if let Some(m) = numbered_re().find(line) {
                steps.push(line[m.end()..].trim().to_owned());
            } else if let Some(last) = steps.last_mut() {
                last.push(' ');
                last.push_str(line);
            }
        }
        return steps.into_iter().filter(|s| !s.is_empty()).collect();
    }
    if lines.len() > 1 {
        return lines.into_iter().map(str::to_owned).collect();
    }
    let Some(line) = lines.first() else { return Vec::new() };
    line.split_inclusive(['.', '!', '?', ';'])
        .map(|s| s.trim().trim_end_matches(['.', '!', '?', ';']).trim().to_owned())
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strips_timestamps() {
        assert_eq!(clean_transcript("00:01 pick up the panel").unwrap(), "pick up the panel");
        assert_eq!(clean_transcript("[01:02:03]  cut   it").unwrap(), "cut it");
    }

    #[test]
    fn clean_text_is_unchanged() {
        let text = "pick up the panel\ncut it to size";
        assert_eq!(clean_transcript(text).unwrap(), text);
    }

    #[test]
    fn only_timestamps_is_empty() {
        let raw = "00:01\n[00:02]\n  01:00:03  \n";
        assert!(matches!(clean_transcript(raw), Err(IngestError::EmptyAfterClean)));
    }

    #[test]
    fn boilerplate_lines_dropped_in_order() {
        let raw = "measure the wall\nPlease SUBSCRIBE to the channel\n[Music]\nhang the sheet";
        assert_eq!(clean_transcript(raw).unwrap(), "measure the wall\nhang the sheet");
        let custom = CleanConfig::with_patterns(&["(?i)^measure"]).unwrap();
        assert_eq!(custom.clean(raw).unwrap(), "Please SUBSCRIBE to the channel\n[Music]\nhang the sheet");
    }

    #[test]
    fn verb_list_examples() {
        assert_eq!(parse_verb_list("pick up | cut | install", None).unwrap(), ["pick up", "cut", "install"]);
        assert_eq!(parse_verb_list("install", None).unwrap(), ["install"]);
        // oracle: split on ',', trim, drop empties
        let want: Vec<String> =
            "a,b,,c".split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        assert_eq!(parse_verb_list("a,b,,c", Some(',')).unwrap(), want);
        assert_eq!(parse_verb_list("cut\\ plan \\prepare", None).unwrap(), ["cut", "plan", "prepare"]);
        assert_eq!(parse_verb_list("cut\nplan", None).unwrap(), ["cut", "plan"]);
        assert!(matches!(parse_verb_list("pick up", None), Err(IngestError::NoDelimiterFound)));
        assert!(parse_verb_list("   ", None).unwrap().is_empty());
    }

    #[test]
    fn auto_detect_prefers_most_frequent() {
        assert_eq!(parse_verb_list("a, b | c, d", None).unwrap(), ["a", "b | c", "d"]);
    }

    #[test]
    fn steps_from_numbered_lines_lines_and_sentences() {
        let numbered = "Intro line\n1. Prepare the area\n   carefully\n2) Cut the sheet\nStep 3: Hang it";
        assert_eq!(split_steps(numbered), ["Prepare the area carefully", "Cut the sheet", "Hang it"]);
        assert_eq!(split_steps("cut\ninstall"), ["cut", "install"]);
        assert_eq!(split_steps("Cut the panel. Then install it!"), ["Cut the panel", "Then install it"]);
        assert!(split_steps("").is_empty());
    }

    proptest! {
        #[test]
        fn parse_inverts_join(
            items in proptest::collection::vec("[a-z][a-z ]{0,8}[a-z]", 1..8),
            d in prop_oneof![Just('|'), Just(','), Just('\\'), Just('\n')],
        ) {
            let joined = items.iter().map(String::as_str).collect::<Vec<_>>().join(&d.to_string());
            prop_assert_eq!(parse_verb_list(&joined, Some(d)).unwrap(), items.clone());
        }
    }
}
