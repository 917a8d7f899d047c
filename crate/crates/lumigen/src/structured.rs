//! Extraction of structured JSON from chat-model output, which may be wrapped
//! in prose or code fences.

/// Find the first balanced JSON object in `text`, honoring string literals
/// and escapes. Returns the object slice.
pub fn extract_first_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|b| *b == b'{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, b) in bytes[start..].iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if *b == b'\\' {
                escaped = true;
            } else if *b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_object_after_leading_chatter() {
        let text = "Sure! Here is the plan:\n```json\n{\"a\": {\"b\": 1}}\n```\ntrailing";
        assert_eq!(extract_first_json_object(text), Some("{\"a\": {\"b\": 1}}"));
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_the_scanner() {
        let text = r#"{"quote": "a \" and a } inside"} tail"#;
        assert_eq!(
            extract_first_json_object(text),
            Some(r#"{"quote": "a \" and a } inside"}"#)
        );
    }

    #[test]
    fn no_object_yields_none() {
        assert_eq!(extract_first_json_object("no json here"), None);
        assert_eq!(extract_first_json_object("{unterminated"), None);
    }
}
