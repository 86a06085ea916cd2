//! Line-oriented architecture description language.
//!
//! ```text
//! # comments run to end of line; keywords are case-insensitive
//! input 13
//! batchnorm
//! level 1: branches 6, units 128, relu, merge pairs
//! level 2: branches 3, units 128, relu, merge all
//! level 3: branches 1, units 128, relu
//! output: 1, linear
//! ```
//!
//! Grammar:
//!
//! ```text
//! spec       := input_line [bn_line] level_line+ output_line
//! input_line := "input" INT
//! bn_line    := "batchnorm"
//! level_line := "level" INT ":" "branches" INT "," "units" INT "," ACT ["," "merge" MERGE]
//! output_line:= "output" ":" INT "," ACT
//! ACT        := "relu" | "linear"
//! MERGE      := "pairs" | "all" | "none"        (default "none")
//! ```
//!
//! Every branch of level 1 reads the whole (normalized) input. Branch `i` of a
//! later level reads stream `i` of the previous level, so its branch count must
//! equal the number of streams that level emits: `branches / 2` after
//! `merge pairs` (adjacent branches 1+2, 3+4, ... concatenated), one after
//! `merge all`, and `branches` after `merge none`. The output layer reads a
//! single stream.

use std::fmt;

use thiserror::Error;

use crate::layers::Activation;

/// The network of the reference experiment.
pub const CANONICAL_SPEC: &str = "\
input 13
batchnorm
level 1: branches 6, units 128, relu, merge pairs
level 2: branches 3, units 128, relu, merge all
level 3: branches 1, units 128, relu
output: 1, linear
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Merge {
    Pairs,
    All,
    None,
}

impl Merge {
    pub fn keyword(self) -> &'static str {
        match self {
            Merge::Pairs => "pairs",
            Merge::All => "all",
            Merge::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LevelSpec {
    pub branches: usize,
    pub units: usize,
    pub activation: Activation,
    pub merge: Merge,
}

impl LevelSpec {
    /// Number of streams this level hands to the next one.
    pub fn streams_out(&self) -> usize {
        match self.merge {
            Merge::Pairs => self.branches / 2,
            Merge::All => 1,
            Merge::None => self.branches,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchitectureSpec {
    pub input_width: usize,
    pub use_batchnorm: bool,
    pub levels: Vec<LevelSpec>,
    pub output_units: usize,
    pub output_activation: Activation,
}

impl ArchitectureSpec {
    pub fn canonical() -> Self {
        parse_spec(CANONICAL_SPEC).expect("canonical spec parses")
    }

    /// Hidden dense layers, i.e. all branches of all levels.
    pub fn hidden_dense_count(&self) -> usize {
        self.levels.iter().map(|l| l.branches).sum()
    }

    pub fn render(&self) -> String {
        render(self)
    }
}

/// One broken invariant of an [`ArchitectureSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("line {line}: expected {expected}, found {found}")]
    Syntax {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("invalid architecture: {}", join(.0))]
    Invalid(Vec<Violation>),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.0.as_str()).collect::<Vec<_>>().join("; ")
}

/// Checks every structural invariant and reports all violations found.
pub fn validate_spec(spec: &ArchitectureSpec) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |s: String| out.push(Violation(s));

    if spec.input_width == 0 {
        push("input width must be positive, got 0".into());
    }
    if spec.levels.is_empty() {
        push("at least one level is required".into());
    }
    let mut streams = 1usize;
    for (i, level) in spec.levels.iter().enumerate() {
        let n = i + 1;
        if level.branches == 0 {
            push(format!("level {n}: branches must be positive, got 0"));
        }
        if level.units == 0 {
            push(format!("level {n}: units must be positive, got 0"));
        }
        if i > 0 && level.branches != streams {
            push(format!(
                "level {n}: branches {} ≠ streams {streams} emitted by level {i}",
                level.branches
            ));
        }
        if level.merge == Merge::Pairs && level.branches % 2 != 0 {
            push(format!(
                "level {n}: merge pairs needs an even branch count, got {} branches",
                level.branches
            ));
        }
        streams = level.streams_out();
    }
    if !spec.levels.is_empty() && streams != 1 {
        push(format!(
            "output layer reads one stream but level {} emits {streams}",
            spec.levels.len()
        ));
    }
    if spec.output_units == 0 {
        push("output units must be positive, got 0".into());
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Colon,
    Comma,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) => write!(f, "'{w}'"),
            Tok::Colon => f.write_str("':'"),
            Tok::Comma => f.write_str("','"),
        }
    }
}

fn tokenize(line: &str) -> Vec<Tok> {
    let mut toks = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, toks: &mut Vec<Tok>| {
        if !word.is_empty() {
            toks.push(Tok::Word(std::mem::take(word).to_ascii_lowercase()));
        }
    };
    for ch in line.chars() {
        match ch {
            ':' => {
                flush(&mut word, &mut toks);
                toks.push(Tok::Colon);
            }
            ',' => {
                flush(&mut word, &mut toks);
                toks.push(Tok::Comma);
            }
            c if c.is_whitespace() => flush(&mut word, &mut toks),
            c => word.push(c),
        }
    }
    flush(&mut word, &mut toks);
    toks
}

struct Cursor<'a> {
    line: usize,
    toks: &'a [Tok],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, expected: &str) -> SpecError {
        SpecError::Syntax {
            line: self.line,
            expected: expected.to_string(),
            found: self
                .toks
                .get(self.pos)
                .map_or_else(|| "end of line".to_string(), Tok::to_string),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), SpecError> {
        match self.toks.get(self.pos) {
            Some(Tok::Word(w)) if w == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(&format!("'{kw}'"))),
        }
    }

    fn punct(&mut self, p: Tok) -> Result<(), SpecError> {
        if self.toks.get(self.pos) == Some(&p) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&p.to_string()))
        }
    }

    fn int(&mut self) -> Result<usize, SpecError> {
        match self.toks.get(self.pos) {
            Some(Tok::Word(w)) if !w.is_empty() && w.bytes().all(|b| b.is_ascii_digit()) => {
                let v = w.parse().map_err(|_| self.err("an integer that fits in usize"))?;
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.err("an integer")),
        }
    }

    fn activation(&mut self) -> Result<Activation, SpecError> {
        let act = match self.toks.get(self.pos) {
            Some(Tok::Word(w)) if w == "relu" => Activation::Relu,
            Some(Tok::Word(w)) if w == "linear" => Activation::Linear,
            _ => return Err(self.err("activation 'relu' or 'linear'")),
        };
        self.pos += 1;
        Ok(act)
    }

    fn merge(&mut self) -> Result<Merge, SpecError> {
        let m = match self.toks.get(self.pos) {
            Some(Tok::Word(w)) if w == "pairs" => Merge::Pairs,
            Some(Tok::Word(w)) if w == "all" => Merge::All,
            Some(Tok::Word(w)) if w == "none" => Merge::None,
            _ => return Err(self.err("merge 'pairs', 'all' or 'none'")),
        };
        self.pos += 1;
        Ok(m)
    }

    fn end(&mut self) -> Result<(), SpecError> {
        if self.pos < self.toks.len() {
            Err(self.err("end of line"))
        } else {
            Ok(())
        }
    }
}

fn leading_word(toks: &[Tok]) -> Option<&str> {
    match toks.first() {
        Some(Tok::Word(w)) => Some(w.as_str()),
        _ => None,
    }
}

/// Parses and validates an architecture description.
pub fn parse_spec(text: &str) -> Result<ArchitectureSpec, SpecError> {
    let lines: Vec<(usize, Vec<Tok>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, tokenize(l.split('#').next().unwrap_or(""))))
        .filter(|(_, t)| !t.is_empty())
        .collect();
    let last_line = text.lines().count().max(1);
    let mut it = lines.iter().peekable();

    let Some((ln, toks)) = it.next() else {
        return Err(SpecError::Syntax {
            line: last_line,
            expected: "'input'".into(),
            found: "end of input".into(),
        });
    };
    let mut c = Cursor { line: *ln, toks, pos: 0 };
    c.keyword("input")?;
    let input_width = c.int()?;
    c.end()?;

    let mut use_batchnorm = false;
    if let Some((ln, toks)) = it.peek() {
        if leading_word(toks) == Some("batchnorm") {
            let mut c = Cursor { line: *ln, toks, pos: 1 };
            c.end()?;
            use_batchnorm = true;
            it.next();
        }
    }

    let mut levels = Vec::new();
    let mut level_numbers = Vec::new();
    while let Some((ln, toks)) = it.peek() {
        if leading_word(toks) != Some("level") {
            break;
        }
        it.next();
        let mut c = Cursor { line: *ln, toks, pos: 1 };
        let number = c.int()?;
        c.punct(Tok::Colon)?;
        c.keyword("branches")?;
        let branches = c.int()?;
        c.punct(Tok::Comma)?;
        c.keyword("units")?;
        let units = c.int()?;
        c.punct(Tok::Comma)?;
        let activation = c.activation()?;
        let mut merge = Merge::None;
        if c.pos < toks.len() {
            c.punct(Tok::Comma)?;
            c.keyword("merge")?;
            merge = c.merge()?;
        }
        c.end()?;
        level_numbers.push((*ln, number));
        levels.push(LevelSpec {
            branches,
            units,
            activation,
            merge,
        });
    }

    let Some((ln, toks)) = it.next() else {
        return Err(SpecError::Syntax {
            line: last_line,
            expected: if levels.is_empty() { "'level'" } else { "'level' or 'output'" }.into(),
            found: "end of input".into(),
        });
    };
    let mut c = Cursor { line: *ln, toks, pos: 0 };
    if levels.is_empty() {
        c.keyword("level")?;
    }
    if leading_word(toks) != Some("output") {
        return Err(c.err("'level' or 'output'"));
    }
    c.pos = 1;
    c.punct(Tok::Colon)?;
    let output_units = c.int()?;
    c.punct(Tok::Comma)?;
    let output_activation = c.activation()?;
    c.end()?;

    if let Some((ln, toks)) = it.next() {
        let c = Cursor { line: *ln, toks, pos: 0 };
        return Err(c.err("end of input after the output line"));
    }

    for (i, (ln, n)) in level_numbers.iter().enumerate() {
        if *n != i + 1 {
            return Err(SpecError::Syntax {
                line: *ln,
                expected: format!("level number {}", i + 1),
                found: format!("'{n}'"),
            });
        }
    }

    let spec = ArchitectureSpec {
        input_width,
        use_batchnorm,
        levels,
        output_units,
        output_activation,
    };
    validate_spec(&spec).map_err(SpecError::Invalid)?;
    Ok(spec)
}

/// Canonical text form; `parse_spec(&render(s)) == Ok(s)` for valid specs.
pub fn render(spec: &ArchitectureSpec) -> String {
    let mut s = format!("input {}\n", spec.input_width);
    if spec.use_batchnorm {
        s.push_str("batchnorm\n");
    }
    for (i, l) in spec.levels.iter().enumerate() {
        s.push_str(&format!(
            "level {}: branches {}, units {}, {}",
            i + 1,
            l.branches,
            l.units,
            l.activation.keyword()
        ));
        if l.merge != Merge::None {
            s.push_str(&format!(", merge {}", l.merge.keyword()));
        }
        s.push('\n');
    }
    s.push_str(&format!(
        "output: {}, {}\n",
        spec.output_units,
        spec.output_activation.keyword()
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_text_parses_to_three_levels() {
        let spec = parse_spec(CANONICAL_SPEC).unwrap();
        assert_eq!(spec.input_width, 13);
        assert!(spec.use_batchnorm);
        assert_eq!(spec.levels.len(), 3);
        assert_eq!(spec.hidden_dense_count(), 10);
        assert_eq!(spec.levels[0].merge, Merge::Pairs);
        assert_eq!(spec.levels[1].merge, Merge::All);
        assert_eq!(spec.levels[2].merge, Merge::None);
        assert_eq!(spec.output_units, 1);
        assert_eq!(spec.output_activation, Activation::Linear);
        assert_eq!(render(&spec), CANONICAL_SPEC);
    }

    #[test]
    fn comments_blank_lines_and_case() {
        let text = "# header\n\nINPUT 4  # four features\nLevel 1: Branches 2, UNITS 3, ReLU, Merge ALL\n\nOutput: 1, Linear\n";
        let spec = parse_spec(text).unwrap();
        assert_eq!(spec.input_width, 4);
        assert!(!spec.use_batchnorm);
        assert_eq!(spec.levels[0].merge, Merge::All);
    }

    #[test]
    fn zero_units_is_a_validation_error() {
        let text = CANONICAL_SPEC.replace("level 3: branches 1, units 128", "level 3: branches 1, units 0");
        match parse_spec(&text) {
            Err(SpecError::Invalid(v)) => assert!(v.iter().any(|x| x.0.contains("units must be positive"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn odd_pairs_is_a_validation_error() {
        let text = "input 13\nlevel 1: branches 3, units 8, relu, merge pairs\nlevel 2: branches 1, units 8, relu\noutput: 1, linear\n";
        match parse_spec(text) {
            Err(SpecError::Invalid(v)) => {
                assert!(v.iter().any(|x| x.0.contains("even") && x.0.contains("3 branches")), "{v:?}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validate_reports_every_violation() {
        let mut spec = ArchitectureSpec::canonical();
        assert_eq!(validate_spec(&spec), Ok(()));
        spec.levels[1].branches = 4;
        let v = validate_spec(&spec).unwrap_err();
        assert!(v.iter().any(|x| x.0.contains("branches 4 ≠ streams 3")), "{v:?}");

        spec.input_width = 0;
        spec.levels[2].units = 0;
        let v = validate_spec(&spec).unwrap_err();
        assert!(v.len() >= 3, "{v:?}");
        assert!(v.iter().any(|x| x.0.contains("input width")));
    }

    #[test]
    fn multi_stream_output_is_rejected() {
        let text = "input 3\nlevel 1: branches 2, units 4, relu\noutput: 1, linear\n";
        let err = parse_spec(text).unwrap_err();
        assert!(err.to_string().contains("emits 2"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_and_expectation() {
        let cases = [
            ("input 13\nlevel 1: branches 6 units 128, relu\noutput: 1, linear", 2, "','"),
            ("input 13\nlevel 1: branches 1, units 8, tanh\noutput: 1, linear", 2, "activation"),
            ("input 13\nlevel 1: branches 2, units 8, relu, merge some\noutput: 1, linear", 2, "merge"),
            ("input x", 1, "integer"),
            ("level 1: branches 1, units 8, relu", 1, "'input'"),
            ("input 13\noutput: 1, linear", 2, "'level'"),
            ("input 13\nlevel 1: branches 1, units 8, relu\n", 2, "'output'"),
            ("input 13\nlevel 2: branches 1, units 8, relu\noutput: 1, linear", 2, "level number 1"),
            ("input 13\nlevel 1: branches 1, units 8, relu\noutput: 1, linear\ninput 3", 4, "end of input"),
            ("", 1, "'input'"),
        ];
        for (text, line, expect) in cases {
            match parse_spec(text) {
                Err(SpecError::Syntax { line: l, expected, .. }) => {
                    assert_eq!(l, line, "{text}");
                    assert!(expected.contains(expect), "{text}: {expected}");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    fn arb_spec() -> impl Strategy<Value = ArchitectureSpec> {
        (1usize..32, any::<bool>(), 1usize..5, 1usize..4, 1usize..64, any::<bool>()).prop_map(
            |(input_width, use_batchnorm, pairs, depth, units, relu_out)| {
                // fan out in pairs, merge down, then a chain of single branches
                let mut levels = vec![LevelSpec {
                    branches: pairs * 2,
                    units,
                    activation: Activation::Relu,
                    merge: Merge::Pairs,
                }];
                levels.push(LevelSpec {
                    branches: pairs,
                    units: units + 1,
                    activation: Activation::Linear,
                    merge: Merge::All,
                });
                for _ in 0..depth {
                    levels.push(LevelSpec {
                        branches: 1,
                        units,
                        activation: Activation::Relu,
                        merge: Merge::None,
                    });
                }
                ArchitectureSpec {
                    input_width,
                    use_batchnorm,
                    levels,
                    output_units: 1 + units % 3,
                    output_activation: if relu_out { Activation::Relu } else { Activation::Linear },
                }
            },
        )
    }

    proptest! {
        #[test]
        fn parse_never_panics(text in "[a-z0-9:, #\n]{0,200}") {
            let _ = parse_spec(&text);
        }

        #[test]
        fn parse_never_panics_on_near_misses(
            lines in proptest::collection::vec(
                prop_oneof![
                    Just("input 13".to_string()),
                    Just("batchnorm".to_string()),
                    Just("level 1: branches 2, units 4, relu, merge pairs".to_string()),
                    Just("level 2: branches 1, units 4, linear".to_string()),
                    Just("output: 1, linear".to_string()),
                    "[a-z0-9:, ]{0,30}",
                ],
                0..8,
            )
        ) {
            let _ = parse_spec(&lines.join("\n"));
        }

        #[test]
        fn render_parse_round_trip(spec in arb_spec()) {
            prop_assert_eq!(validate_spec(&spec), Ok(()));
            prop_assert_eq!(parse_spec(&render(&spec)), Ok(spec));
        }
    }
}
