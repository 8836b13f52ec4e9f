//! Maps JSON pointers to the line and column where each value starts.
//! Runs over text serde_json has already accepted, so it only has to be
//! right for valid JSON.

use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Default)]
pub struct SpanIndex {
    spans: HashMap<String, Location>,
}

impl SpanIndex {
    pub fn build(text: &str) -> Self {
        let mut s = Scanner { bytes: text.as_bytes(), pos: 0, line: 1, col: 1, spans: HashMap::new() };
        let mut pointer = String::new();
        s.skip_ws();
        s.value(&mut pointer);
        SpanIndex { spans: s.spans }
    }

    /// Location of the value at `pointer`, or of its nearest recorded
    /// ancestor.
    pub fn locate(&self, pointer: &str) -> Location {
        let mut p = pointer;
        loop {
            if let Some(loc) = self.spans.get(p) {
                return *loc;
            }
            match p.rfind('/') {
                Some(i) => p = &p[..i],
                None => return Location { line: 1, column: 1 },
            }
        }
    }
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
    spans: HashMap<String, Location>,
}

impl Scanner<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) {
        if let Some(b) = self.peek() {
            self.pos += 1;
            if b == b'\n' {
                self.line += 1;
                self.col = 1;
            } else if b & 0xC0 != 0x80 {
                self.col += 1;
            }
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.bump();
        }
    }

    fn value(&mut self, pointer: &mut String) {
        self.spans.insert(pointer.clone(), Location { line: self.line, column: self.col });
        match self.peek() {
            Some(b'{') => {
                self.bump();
                self.skip_ws();
                while let Some(b'"') = self.peek() {
                    let key = self.string();
                    self.skip_ws();
                    self.bump(); // ':'
                    self.skip_ws();
                    let len = pointer.len();
                    pointer.push('/');
                    pointer.push_str(&key.replace('~', "~0").replace('/', "~1"));
                    self.value(pointer);
                    pointer.truncate(len);
                    self.skip_ws();
                    if self.peek() == Some(b',') {
                        self.bump();
                        self.skip_ws();
                    }
                }
                self.bump(); // '}'
            }
            Some(b'[') => {
                self.bump();
                self.skip_ws();
                let mut i = 0;
                while !matches!(self.peek(), Some(b']') | None) {
                    let len = pointer.len();
                    pointer.push('/');
                    pointer.push_str(&i.to_string());
                    self.value(pointer);
                    pointer.truncate(len);
                    i += 1;
                    self.skip_ws();
                    if self.peek() == Some(b',') {
                        self.bump();
                        self.skip_ws();
                    }
                }
                self.bump(); // ']'
            }
            Some(b'"') => {
                self.string();
            }
            _ => {
                while matches!(self.peek(), Some(b) if !matches!(b, b',' | b']' | b'}' | b' ' | b'\t' | b'\n' | b'\r'))
                {
                    self.bump();
                }
            }
        }
    }

    /// Consume a string literal and return its decoded contents.
    fn string(&mut self) -> String {
        let start = self.pos;
        self.bump();
        while let Some(b) = self.peek() {
            match b {
                b'\\' => {
                    self.bump();
                    self.bump();
                }
                b'"' => {
                    self.bump();
                    break;
                }
                _ => self.bump(),
            }
        }
        let raw = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("\"\"");
        serde_json::from_str(raw).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locates_nested_values() {
        let text = "{\n  \"a\": [1,\n    {\"b\": \"x\"}],\n  \"c/d\": true\n}";
        let idx = SpanIndex::build(text);
        assert_eq!(idx.locate(""), Location { line: 1, column: 1 });
        assert_eq!(idx.locate("/a"), Location { line: 2, column: 8 });
        assert_eq!(idx.locate("/a/0"), Location { line: 2, column: 9 });
        assert_eq!(idx.locate("/a/1/b"), Location { line: 3, column: 11 });
        assert_eq!(idx.locate("/c~1d"), Location { line: 4, column: 10 });
        assert_eq!(idx.locate("/a/1/b/zz"), Location { line: 3, column: 11 });
    }

    #[test]
    fn escaped_strings_and_unicode() {
        let text = "{\"k\\\"\": \"é\", \"n\": 2}";
        let idx = SpanIndex::build(text);
        assert_eq!(idx.locate("/k\""), Location { line: 1, column: 9 });
        assert_eq!(idx.locate("/n"), Location { line: 1, column: 19 });
    }
}
