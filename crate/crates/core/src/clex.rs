//! Permissive, lossless C lexer.
//!
//! Every byte of the input lands in exactly one token, so concatenating the
//! token texts reproduces the source. Bytes that do not start a C token come
//! out as [`TokenKind::Unknown`].

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKind {
    Identifier,
    Keyword,
    /// Preprocessor directive name following `#` at the start of a line.
    Directive,
    /// `<...>` operand of `#include`.
    HeaderName,
    Number,
    Str,
    Char,
    Punct,
    Whitespace,
    Comment,
    Unknown,
}

impl TokenKind {
    /// Whitespace and comments are trivia; everything else is significant.
    pub fn is_significant(self) -> bool {
        !matches!(self, TokenKind::Whitespace | TokenKind::Comment)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
}

pub const KEYWORDS: &[&str] = &[
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else",
    "enum", "extern", "float", "for", "goto", "if", "inline", "int", "long", "register",
    "restrict", "return", "short", "signed", "sizeof", "static", "struct", "switch", "typedef",
    "union", "unsigned", "void", "volatile", "while", "_Alignas", "_Alignof", "_Atomic", "_Bool",
    "_Complex", "_Generic", "_Imaginary", "_Noreturn", "_Static_assert", "_Thread_local",
];

/// Standard-library functions, macros and types that augmentation never renames.
pub const LIBRARY_NAMES: &[&str] = &[
    "main", "malloc", "calloc", "realloc", "free", "alloca", "strcpy", "strncpy", "strcat",
    "strncat", "strlen", "strnlen", "strcmp", "strncmp", "strchr", "strrchr", "strstr", "strdup",
    "strtok", "strerror", "memcpy", "memmove", "memset", "memcmp", "memchr", "printf", "fprintf",
    "sprintf", "snprintf", "vprintf", "vsprintf", "vsnprintf", "scanf", "fscanf", "sscanf",
    "gets", "fgets", "puts", "fputs", "putchar", "getchar", "fgetc", "fputc", "fopen", "fclose",
    "fread", "fwrite", "fseek", "ftell", "fflush", "rewind", "remove", "rename", "tmpnam",
    "tmpfile", "mkstemp", "exit", "abort", "assert", "atexit", "atoi", "atol", "atof", "strtol",
    "strtoul", "strtoll", "strtoull", "strtod", "system", "popen", "pclose", "execl", "execlp",
    "execv", "execvp", "fork", "open", "close", "read", "write", "lseek", "unlink", "access",
    "realpath", "getenv", "setenv", "rand", "srand", "time", "sleep", "usleep", "isdigit",
    "isalpha", "isalnum", "isspace", "isupper", "islower", "toupper", "tolower", "abs", "labs",
    "sqrt", "pow", "floor", "ceil", "qsort", "bsearch", "signal", "raise", "setjmp", "longjmp",
    "va_list", "va_start", "va_arg", "va_end", "offsetof", "NULL", "EOF", "BUFSIZ", "PATH_MAX",
    "INT_MAX", "INT_MIN", "UINT_MAX", "LONG_MAX", "SIZE_MAX", "CHAR_BIT", "RAND_MAX",
    "EXIT_SUCCESS", "EXIT_FAILURE", "SEEK_SET", "SEEK_CUR", "SEEK_END", "O_RDONLY", "O_WRONLY",
    "O_CREAT", "size_t", "ssize_t", "ptrdiff_t", "intptr_t", "uintptr_t", "wchar_t", "FILE",
    "stdin", "stdout", "stderr", "errno", "bool", "true", "false", "int8_t", "int16_t",
    "int32_t", "int64_t", "uint8_t", "uint16_t", "uint32_t", "uint64_t", "time_t", "pid_t",
    "off_t", "pthread_t", "pthread_mutex_t", "pthread_create", "pthread_join",
    "pthread_mutex_lock", "pthread_mutex_unlock", "pthread_mutex_init", "sqlite3",
    "sqlite3_exec", "sqlite3_open", "sqlite3_close", "sqlite3_prepare_v2", "sqlite3_step",
    "sqlite3_finalize", "sqlite3_bind_text", "sqlite3_stmt",
];

pub const PUNCTUATORS: &[&str] = &[
    ">>=", "<<=", "...", "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "*=",
    "/=", "%=", "+=", "-=", "&=", "^=", "|=", "##", "[", "]", "(", ")", "{", "}", ".", "&", "*",
    "+", "-", "~", "!", "/", "%", "<", ">", "^", "|", "?", ":", ";", "=", ",", "#",
];

pub fn is_keyword(s: &str) -> bool {
    KEYWORDS.contains(&s)
}

pub fn is_library_name(s: &str) -> bool {
    LIBRARY_NAMES.contains(&s)
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_ident_continue(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Scans a quoted literal starting at `start` (which holds the quote).
/// Stops after the closing quote, or before an unescaped newline.
fn scan_quoted(bytes: &[u8], start: usize, quote: u8) -> usize {
    let mut i = start + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'\n' => return i,
            b if b == quote => return i + 1,
            _ => i += 1,
        }
    }
    bytes.len()
}

pub fn lex(src: &str) -> Vec<Token<'_>> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    // Tracks whether only trivia has been seen since the last newline.
    let mut line_start = true;
    // 0 = normal, 1 = expecting directive name, 2 = inside #include.
    let mut directive_state = 0u8;

    while i < bytes.len() {
        let b = bytes[i];
        let start = i;
        let kind;

        if b == b'\\' && bytes.get(i + 1) == Some(&b'\n') {
            i += 2;
            kind = TokenKind::Whitespace;
        } else if b.is_ascii_whitespace() {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                if bytes[i] == b'\n' {
                    line_start = true;
                    directive_state = 0;
                }
                i += 1;
            }
            kind = TokenKind::Whitespace;
        } else if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            kind = TokenKind::Comment;
        } else if b == b'/' && bytes.get(i + 1) == Some(&b'*') {
            i += 2;
            while i < bytes.len() && !(bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/')) {
                i += 1;
            }
            i = (i + 2).min(bytes.len());
            kind = TokenKind::Comment;
        } else if directive_state == 2 && b == b'<' {
            while i < bytes.len() && bytes[i] != b'>' && bytes[i] != b'\n' {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'>' {
                i += 1;
            }
            kind = TokenKind::HeaderName;
        } else if is_ident_start(b) {
            while i < bytes.len() && is_ident_continue(bytes[i]) {
                i += 1;
            }
            let word = &src[start..i];
            let prefixed_literal = matches!(word, "L" | "u" | "U" | "u8")
                && matches!(bytes.get(i), Some(b'"') | Some(b'\''));
            if prefixed_literal {
                let quote = bytes[i];
                i = scan_quoted(bytes, i, quote);
                kind = if quote == b'"' {
                    TokenKind::Str
                } else {
                    TokenKind::Char
                };
            } else if directive_state == 1 {
                kind = TokenKind::Directive;
            } else if is_keyword(word) {
                kind = TokenKind::Keyword;
            } else {
                kind = TokenKind::Identifier;
            }
        } else if b.is_ascii_digit()
            || (b == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
        {
            i += 1;
            while i < bytes.len() {
                let c = bytes[i];
                if (c == b'+' || c == b'-') && matches!(bytes[i - 1], b'e' | b'E' | b'p' | b'P') {
                    i += 1;
                } else if c.is_ascii_alphanumeric() || c == b'_' || c == b'.' {
                    i += 1;
                } else {
                    break;
                }
            }
            kind = TokenKind::Number;
        } else if b == b'"' {
            i = scan_quoted(bytes, i, b'"');
            kind = TokenKind::Str;
        } else if b == b'\'' {
            i = scan_quoted(bytes, i, b'\'');
            kind = TokenKind::Char;
        } else if let Some(p) = PUNCTUATORS.iter().find(|p| bytes[i..].starts_with(p.as_bytes())) {
            i += p.len();
            kind = TokenKind::Punct;
        } else {
            let ch = src[i..].chars().next().expect("in bounds");
            i += ch.len_utf8();
            kind = TokenKind::Unknown;
        }

        let text = &src[start..i];
        if kind.is_significant() {
            directive_state = match (directive_state, kind) {
                (_, TokenKind::Punct) if text == "#" && line_start => 1,
                (1, TokenKind::Directive) if text == "include" => 2,
                (2, _) => 2,
                _ => 0,
            };
            line_start = false;
        }
        tokens.push(Token { kind, text });
    }
    tokens
}

/// Significant tokens only.
pub fn significant(src: &str) -> Vec<Token<'_>> {
    lex(src)
        .into_iter()
        .filter(|t| t.kind.is_significant())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(src: &str) -> Vec<(TokenKind, &str)> {
        significant(src).into_iter().map(|t| (t.kind, t.text)).collect()
    }

    #[test]
    fn basic_statement() {
        use TokenKind::*;
        assert_eq!(
            kinds("int x = 0; x++;"),
            vec![
                (Keyword, "int"),
                (Identifier, "x"),
                (Punct, "="),
                (Number, "0"),
                (Punct, ";"),
                (Identifier, "x"),
                (Punct, "++"),
                (Punct, ";"),
            ]
        );
    }

    #[test]
    fn literals_and_comments_are_single_tokens() {
        use TokenKind::*;
        let src = "printf(\"a \\\"b\\\" c\\n\"); /* x y */ char c = '\\''; // tail";
        let toks = lex(src);
        assert!(toks.iter().any(|t| t.kind == Str && t.text == "\"a \\\"b\\\" c\\n\""));
        assert!(toks.iter().any(|t| t.kind == Comment && t.text == "/* x y */"));
        assert!(toks.iter().any(|t| t.kind == Char && t.text == "'\\''"));
        assert!(toks.iter().any(|t| t.kind == Comment && t.text == "// tail"));
    }

    #[test]
    fn directives_and_headers() {
        use TokenKind::*;
        assert_eq!(
            kinds("#include <stdio.h>\n#define N 10\nint a[N];"),
            vec![
                (Punct, "#"),
                (Directive, "include"),
                (HeaderName, "<stdio.h>"),
                (Punct, "#"),
                (Directive, "define"),
                (Identifier, "N"),
                (Number, "10"),
                (Keyword, "int"),
                (Identifier, "a"),
                (Punct, "["),
                (Identifier, "N"),
                (Punct, "]"),
                (Punct, ";"),
            ]
        );
        // `<` outside an include stays an operator.
        assert_eq!(kinds("a < b")[1], (Punct, "<"));
    }

    #[test]
    fn longest_punctuator_wins() {
        let k = kinds("a >>= 2; p->x; i--");
        assert_eq!(k[1].1, ">>=");
        assert_eq!(k[5].1, "->");
        assert_eq!(k[9].1, "--");
    }

    #[test]
    fn numbers_with_exponents_and_suffixes() {
        let k = kinds("1.5e-3 + 0x1fUL - .5f");
        assert_eq!(k[0], (TokenKind::Number, "1.5e-3"));
        assert_eq!(k[2], (TokenKind::Number, "0x1fUL"));
        assert_eq!(k[4], (TokenKind::Number, ".5f"));
    }

    #[test]
    fn unknown_bytes_pass_through() {
        let toks = lex("int é = $;");
        assert!(toks.iter().any(|t| t.kind == TokenKind::Unknown && t.text == "é"));
        assert!(toks.iter().any(|t| t.kind == TokenKind::Unknown && t.text == "$"));
    }

    proptest! {
        #[test]
        fn lexing_is_lossless(src in "\\PC{0,200}") {
            let joined: String = lex(&src).iter().map(|t| t.text).collect();
            prop_assert_eq!(joined, src);
        }

        #[test]
        fn lexing_c_like_text_is_lossless(src in "[a-z_0-9 +\\-*/=;(){}\\[\\]<>!&|\"'#\n\\\\.]{0,200}") {
            let joined: String = lex(&src).iter().map(|t| t.text).collect();
            prop_assert_eq!(joined, src);
        }
    }
}
