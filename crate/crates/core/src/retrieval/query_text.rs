use std::sync::LazyLock;

use regex::Regex;

use super::{ComponentFilter, ComponentKind, RetrievalError};

static KIND: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(window|door)s?\b").unwrap());
static ROWS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b([0-9]+|[a-z]+)[\s-]+rows?\b").unwrap());
static COLS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b([0-9]+|[a-z]+)[\s-]+(?:columns?|cols?)\b").unwrap());

const NUMBER_WORDS: [&str; 10] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

fn count(token: &str) -> Option<u32> {
    token.parse().ok().or_else(|| {
        let t = token.to_ascii_lowercase();
        NUMBER_WORDS.iter().position(|w| *w == t).map(|i| i as u32 + 1)
    })
}

/// Extracts kind, row and column constraints from a component request such as
/// "a window with 1 row and 4 columns".
pub fn parse_component_query(text: &str) -> Result<ComponentFilter, RetrievalError> {
    let kind = KIND.captures(text).map(|c| match c[1].to_ascii_lowercase().as_str() {
        "door" => ComponentKind::Door,
        _ => ComponentKind::Window,
    });
    let rows = ROWS.captures(text).and_then(|c| count(&c[1]));
    let cols = COLS.captures(text).and_then(|c| count(&c[1]));
    if kind.is_none() && rows.is_none() && cols.is_none() {
        return Err(RetrievalError::UnparseableFilter(text.to_string()));
    }
    let f = ComponentFilter { kind, rows, cols };
    f.validate()?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(
            parse_component_query("a window with 1 row and 4 columns").unwrap(),
            ComponentFilter { kind: Some(ComponentKind::Window), rows: Some(1), cols: Some(4) }
        );
        assert_eq!(
            parse_component_query("door").unwrap(),
            ComponentFilter { kind: Some(ComponentKind::Door), rows: None, cols: None }
        );
        assert!(matches!(parse_component_query("blue sky"), Err(RetrievalError::UnparseableFilter(_))));
    }

    #[test]
    fn case_and_words() {
        let f = parse_component_query("Two-row WINDOWS, three cols").unwrap();
        assert_eq!(f, ComponentFilter { kind: Some(ComponentKind::Window), rows: Some(2), cols: Some(3) });
        assert!(parse_component_query("window with 0 rows").is_err());
        assert_eq!(parse_component_query("3 columns").unwrap().cols, Some(3));
    }
}
