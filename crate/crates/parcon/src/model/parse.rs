//! Parser for the coefficient-expression mini-grammar.
//!
//! Spatial expressions are sums of terms
//!
//! ```text
//!   a                  constant
//!   a*sin(k)           a · √2 sin(kπx/L), integer mode k ≥ 1
//!   a*poly(c1,c2,…)    a · (c1·x + c2·x² + …)
//!   tab(v0,…,vn)       uniform samples over [0, L]
//! ```
//!
//! with the scalar factor on either side of the atom. Temporal expressions use
//! the same shape with `poly` carrying an ordinary constant term, plus the
//! atoms `exp(a)` (= a·eᵗ) and top-level `piecewise{[t0,t1): expr; …}`.
//!
//! Terms of different kinds do not mix within one expression; the descriptor
//! enums keep one kind per function. Rendering ([`SpaceFn::render`],
//! [`TimeFn::render`]) emits canonical text that re-parses to an equal value.

use super::descriptor::{SpaceFn, SpaceTimeFn, TimeFn, TimePiece};
use super::ModelError;

pub fn parse_space(text: &str) -> Result<SpaceFn, ModelError> {
    let mut p = Parser::new(text);
    let fd = p.space_expr()?;
    p.expect_eof()?;
    Ok(fd)
}

pub fn parse_time(text: &str) -> Result<TimeFn, ModelError> {
    let mut p = Parser::new(text);
    let fd = p.time_expr()?;
    p.expect_eof()?;
    Ok(fd)
}

/// Convenience for problem files: `SPACE` or `SPACE @ TIME`.
pub fn parse_space_time(text: &str) -> Result<SpaceTimeFn, ModelError> {
    match text.split_once('@') {
        None => Ok(SpaceTimeFn::of_space(parse_space(text)?)),
        Some((s, t)) => {
            let space = parse_space(s.trim())?;
            let off = text.find('@').unwrap() + 1;
            let time = parse_time(t.trim()).map_err(|e| e.shift_offset(off))?;
            Ok(SpaceTimeFn { space, time })
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

/// Accumulates same-kind terms; mixing kinds is a parse error.
enum SpaceAcc {
    Empty,
    Constant(f64),
    Sine(Vec<(f64, u32)>),
    Poly(Vec<f64>),
    Tab(Vec<f64>),
}

enum TimeAcc {
    Empty,
    Constant(f64),
    Poly(Vec<f64>),
    Exp(f64),
    Tab(Vec<f64>),
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser { src: text.as_bytes(), pos: 0 }
    }

    fn err(&self, expected: &[&'static str]) -> ModelError {
        let found = if self.pos < self.src.len() {
            let rest = &self.src[self.pos..];
            let take = rest.len().min(8);
            String::from_utf8_lossy(&rest[..take]).into_owned()
        } else {
            "end of input".to_owned()
        };
        ModelError::Parse { offset: self.pos, expected: expected.to_vec(), found }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, ch: u8) -> bool {
        if self.peek() == Some(ch) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, ch: u8, what: &'static str) -> Result<(), ModelError> {
        if self.eat(ch) {
            Ok(())
        } else {
            Err(self.err(&[what]))
        }
    }

    fn expect_eof(&mut self) -> Result<(), ModelError> {
        if self.peek().is_none() {
            Ok(())
        } else {
            Err(self.err(&["end of input", "'+'", "'-'"]))
        }
    }

    fn eat_ident(&mut self, name: &str) -> bool {
        self.skip_ws();
        let bytes = name.as_bytes();
        if self.src[self.pos..].starts_with(bytes) {
            let after = self.pos + bytes.len();
            // Must not be a prefix of a longer identifier.
            if self.src.get(after).map_or(true, |b| !b.is_ascii_alphanumeric()) {
                self.pos = after;
                return true;
            }
        }
        false
    }

    fn number(&mut self) -> Result<f64, ModelError> {
        self.skip_ws();
        let start = self.pos;
        let mut i = self.pos;
        if self.src.get(i) == Some(&b'-') || self.src.get(i) == Some(&b'+') {
            i += 1;
        }
        let mut saw_digit = false;
        while self.src.get(i).is_some_and(|b| b.is_ascii_digit()) {
            i += 1;
            saw_digit = true;
        }
        if self.src.get(i) == Some(&b'.') {
            i += 1;
            while self.src.get(i).is_some_and(|b| b.is_ascii_digit()) {
                i += 1;
                saw_digit = true;
            }
        }
        if !saw_digit {
            return Err(self.err(&["number"]));
        }
        if matches!(self.src.get(i), Some(b'e') | Some(b'E')) {
            let mut j = i + 1;
            if matches!(self.src.get(j), Some(b'-') | Some(b'+')) {
                j += 1;
            }
            if self.src.get(j).is_some_and(|b| b.is_ascii_digit()) {
                while self.src.get(j).is_some_and(|b| b.is_ascii_digit()) {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&self.src[start..i]).expect("ascii");
        let val: f64 = text.parse().map_err(|_| self.err(&["number"]))?;
        self.pos = i;
        Ok(val)
    }

    fn num_list(&mut self) -> Result<Vec<f64>, ModelError> {
        self.expect(b'(', "'('")?;
        let mut vals = vec![self.number()?];
        while self.eat(b',') {
            vals.push(self.number()?);
        }
        self.expect(b')', "')'")?;
        Ok(vals)
    }

    /// One `factor ('*' factor)*` group: at most one atom, scalars multiply.
    fn space_term(&mut self) -> Result<SpaceAcc, ModelError> {
        let mut scale = 1.0;
        let mut atom: Option<SpaceAcc> = None;
        loop {
            if self.eat_ident("sin") {
                self.expect(b'(', "'('")?;
                let at = self.pos;
                let kf = self.number()?;
                let k = kf as u32;
                if kf.fract() != 0.0 || kf < 1.0 {
                    return Err(ModelError::Parse {
                        offset: at,
                        expected: vec!["integer mode >= 1"],
                        found: format!("{kf}"),
                    });
                }
                self.expect(b')', "')'")?;
                set_atom(&mut atom, SpaceAcc::Sine(vec![(1.0, k)]), self)?;
            } else if self.eat_ident("poly") {
                let coeffs = self.num_list()?;
                set_atom(&mut atom, SpaceAcc::Poly(coeffs), self)?;
            } else if self.eat_ident("tab") {
                let vals = self.num_list()?;
                set_atom(&mut atom, SpaceAcc::Tab(vals), self)?;
            } else {
                scale *= self.number()?;
            }
            if !self.eat(b'*') {
                break;
            }
        }
        Ok(match atom {
            None => SpaceAcc::Constant(scale),
            Some(a) => scale_space(a, scale),
        })
    }

    fn space_expr(&mut self) -> Result<SpaceFn, ModelError> {
        let mut acc = SpaceAcc::Empty;
        let mut sign = if self.eat(b'-') { -1.0 } else { 1.0 };
        loop {
            let at = self.pos;
            let term = scale_space(self.space_term()?, sign);
            acc = combine_space(acc, term, at)?;
            if self.eat(b'+') {
                sign = 1.0;
            } else if self.eat(b'-') {
                sign = -1.0;
            } else {
                break;
            }
        }
        Ok(finish_space(acc))
    }

    fn time_term(&mut self) -> Result<TimeAcc, ModelError> {
        let mut scale = 1.0;
        let mut atom: Option<TimeAcc> = None;
        loop {
            if self.eat_ident("exp") {
                self.expect(b'(', "'('")?;
                let a = self.number()?;
                self.expect(b')', "')'")?;
                set_atom(&mut atom, TimeAcc::Exp(a), self)?;
            } else if self.eat_ident("poly") {
                let coeffs = self.num_list()?;
                set_atom(&mut atom, TimeAcc::Poly(coeffs), self)?;
            } else if self.eat_ident("tab") {
                let vals = self.num_list()?;
                set_atom(&mut atom, TimeAcc::Tab(vals), self)?;
            } else {
                scale *= self.number()?;
            }
            if !self.eat(b'*') {
                break;
            }
        }
        Ok(match atom {
            None => TimeAcc::Constant(scale),
            Some(a) => scale_time(a, scale),
        })
    }

    fn simple_time_expr(&mut self) -> Result<TimePiece, ModelError> {
        let mut acc = TimeAcc::Empty;
        let mut sign = if self.eat(b'-') { -1.0 } else { 1.0 };
        loop {
            let at = self.pos;
            let term = scale_time(self.time_term()?, sign);
            acc = combine_time(acc, term, at)?;
            if self.eat(b'+') {
                sign = 1.0;
            } else if self.eat(b'-') {
                sign = -1.0;
            } else {
                break;
            }
        }
        Ok(finish_time(acc))
    }

    fn time_expr(&mut self) -> Result<TimeFn, ModelError> {
        if self.eat_ident("piecewise") {
            self.expect(b'{', "'{'")?;
            let mut pieces: Vec<(f64, f64, TimePiece)> = Vec::new();
            loop {
                self.expect(b'[', "'['")?;
                let at = self.pos;
                let t0 = self.number()?;
                self.expect(b',', "','")?;
                let t1 = self.number()?;
                if !(self.eat(b')') || self.eat(b']')) {
                    return Err(self.err(&["')'", "']'"]));
                }
                self.expect(b':', "':'")?;
                let piece = self.simple_time_expr()?;
                if t1 <= t0 || pieces.last().is_some_and(|&(_, prev, _)| prev != t0) {
                    return Err(ModelError::Parse {
                        offset: at,
                        expected: vec!["contiguous increasing breakpoints"],
                        found: format!("[{t0},{t1})"),
                    });
                }
                pieces.push((t0, t1, piece));
                if !self.eat(b';') {
                    break;
                }
            }
            self.expect(b'}', "'}'")?;
            Ok(TimeFn::Piecewise(pieces))
        } else {
            Ok(TimeFn::Uniform(self.simple_time_expr()?))
        }
    }
}

fn set_atom<T>(slot: &mut Option<T>, atom: T, p: &Parser) -> Result<(), ModelError> {
    if slot.is_some() {
        return Err(p.err(&["scalar factor (one atom per term)"]));
    }
    *slot = Some(atom);
    Ok(())
}

fn scale_space(acc: SpaceAcc, s: f64) -> SpaceAcc {
    match acc {
        SpaceAcc::Empty => SpaceAcc::Empty,
        SpaceAcc::Constant(a) => SpaceAcc::Constant(a * s),
        SpaceAcc::Sine(mut v) => {
            v.iter_mut().for_each(|t| t.0 *= s);
            SpaceAcc::Sine(v)
        }
        SpaceAcc::Poly(mut v) => {
            v.iter_mut().for_each(|c| *c *= s);
            SpaceAcc::Poly(v)
        }
        SpaceAcc::Tab(mut v) => {
            v.iter_mut().for_each(|c| *c *= s);
            SpaceAcc::Tab(v)
        }
    }
}

fn scale_time(acc: TimeAcc, s: f64) -> TimeAcc {
    match acc {
        TimeAcc::Empty => TimeAcc::Empty,
        TimeAcc::Constant(a) => TimeAcc::Constant(a * s),
        TimeAcc::Poly(mut v) => {
            v.iter_mut().for_each(|c| *c *= s);
            TimeAcc::Poly(v)
        }
        TimeAcc::Exp(a) => TimeAcc::Exp(a * s),
        TimeAcc::Tab(mut v) => {
            v.iter_mut().for_each(|c| *c *= s);
            TimeAcc::Tab(v)
        }
    }
}

fn mixed_kinds(offset: usize) -> ModelError {
    ModelError::Parse {
        offset,
        expected: vec!["term of the same kind as the preceding ones"],
        found: "mixed descriptor kinds".to_owned(),
    }
}

fn combine_space(acc: SpaceAcc, term: SpaceAcc, at: usize) -> Result<SpaceAcc, ModelError> {
    Ok(match (acc, term) {
        (SpaceAcc::Empty, t) => t,
        (SpaceAcc::Constant(a), SpaceAcc::Constant(b)) => SpaceAcc::Constant(a + b),
        (SpaceAcc::Sine(mut v), SpaceAcc::Sine(w)) => {
            for (a, k) in w {
                match v.iter_mut().find(|t| t.1 == k) {
                    Some(t) => t.0 += a,
                    None => v.push((a, k)),
                }
            }
            SpaceAcc::Sine(v)
        }
        (SpaceAcc::Poly(mut v), SpaceAcc::Poly(w)) => {
            if w.len() > v.len() {
                v.resize(w.len(), 0.0);
            }
            for (i, c) in w.into_iter().enumerate() {
                v[i] += c;
            }
            SpaceAcc::Poly(v)
        }
        _ => return Err(mixed_kinds(at)),
    })
}

fn combine_time(acc: TimeAcc, term: TimeAcc, at: usize) -> Result<TimeAcc, ModelError> {
    Ok(match (acc, term) {
        (TimeAcc::Empty, t) => t,
        (TimeAcc::Constant(a), TimeAcc::Constant(b)) => TimeAcc::Constant(a + b),
        (TimeAcc::Constant(a), TimeAcc::Poly(mut w)) => {
            w[0] += a;
            TimeAcc::Poly(w)
        }
        (TimeAcc::Poly(mut v), TimeAcc::Constant(b)) => {
            v[0] += b;
            TimeAcc::Poly(v)
        }
        (TimeAcc::Poly(mut v), TimeAcc::Poly(w)) => {
            if w.len() > v.len() {
                v.resize(w.len(), 0.0);
            }
            for (i, c) in w.into_iter().enumerate() {
                v[i] += c;
            }
            TimeAcc::Poly(v)
        }
        (TimeAcc::Exp(a), TimeAcc::Exp(b)) => TimeAcc::Exp(a + b),
        _ => return Err(mixed_kinds(at)),
    })
}

fn finish_space(acc: SpaceAcc) -> SpaceFn {
    match acc {
        SpaceAcc::Empty => SpaceFn::Constant(0.0),
        SpaceAcc::Constant(a) => SpaceFn::Constant(a),
        SpaceAcc::Sine(mut v) => {
            v.retain(|t| t.0 != 0.0);
            v.sort_by_key(|t| t.1);
            if v.is_empty() {
                SpaceFn::Constant(0.0)
            } else {
                SpaceFn::SineSeries(v)
            }
        }
        SpaceAcc::Poly(mut v) => {
            while v.last() == Some(&0.0) {
                v.pop();
            }
            if v.is_empty() {
                SpaceFn::Constant(0.0)
            } else {
                SpaceFn::Polynomial(v)
            }
        }
        SpaceAcc::Tab(v) => SpaceFn::Tabulated(v),
    }
}

fn finish_time(acc: TimeAcc) -> TimePiece {
    match acc {
        TimeAcc::Empty => TimePiece::Constant(0.0),
        TimeAcc::Constant(a) => TimePiece::Constant(a),
        TimeAcc::Poly(mut v) => {
            while v.len() > 1 && v.last() == Some(&0.0) {
                v.pop();
            }
            if v.len() == 1 {
                TimePiece::Constant(v[0])
            } else {
                TimePiece::Polynomial(v)
            }
        }
        TimeAcc::Exp(a) => TimePiece::Exponential(a),
        TimeAcc::Tab(v) => TimePiece::Tabulated(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_atom() {
        assert_eq!(parse_space("sin(1)").unwrap(), SpaceFn::SineSeries(vec![(1.0, 1)]));
    }

    #[test]
    fn zero_constant() {
        assert_eq!(parse_space("0").unwrap(), SpaceFn::Constant(0.0));
    }

    #[test]
    fn scaled_poly_either_side() {
        // Frozen from direct evaluation of the parsed tree at x = 0.5.
        let p = parse_space("poly(1,-1)*2").unwrap();
        assert_eq!(p, SpaceFn::Polynomial(vec![2.0, -2.0]));
        assert!((p.eval(0.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(parse_space("2*poly(1,-1)").unwrap(), p);
    }

    #[test]
    fn sine_sum_merges_and_sorts() {
        let p = parse_space("2*sin(3) + sin(1) - 0.5*sin(3)").unwrap();
        assert_eq!(p, SpaceFn::SineSeries(vec![(1.0, 1), (1.5, 3)]));
    }

    #[test]
    fn mixed_kinds_rejected_with_offset() {
        let err = parse_space("sin(1) + poly(1)").unwrap_err();
        match err {
            ModelError::Parse { offset, .. } => assert!(offset >= 7),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_token_reports_expected_set() {
        let err = parse_space("sin(x)").unwrap_err();
        match err {
            ModelError::Parse { offset, expected, .. } => {
                assert_eq!(offset, 4);
                assert!(!expected.is_empty());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn piecewise_time() {
        let t = parse_time("piecewise{[0,1): exp(1.5); [1,3]: poly(4,-1)}").unwrap();
        match &t {
            TimeFn::Piecewise(pieces) => {
                assert_eq!(pieces.len(), 2);
                assert_eq!(pieces[0].2, TimePiece::Exponential(1.5));
                assert_eq!(pieces[1].2, TimePiece::Polynomial(vec![4.0, -1.0]));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!((t.eval(2.0, 3.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_contiguous_pieces_rejected() {
        assert!(parse_time("piecewise{[0,1): 1; [2,3]: 2}").is_err());
    }

    #[test]
    fn render_round_trip_handpicked() {
        let cases = [
            SpaceFn::Constant(-3.25),
            SpaceFn::SineSeries(vec![(1.0, 1)]),
            SpaceFn::SineSeries(vec![(-2.5, 1), (0.125, 4)]),
            SpaceFn::Polynomial(vec![1.0, -1.0]),
            SpaceFn::Tabulated(vec![0.0, 0.5, 0.0]),
        ];
        for fd in &cases {
            let text = fd.render();
            assert_eq!(&parse_space(&text).unwrap(), fd, "round-trip of {text}");
        }
        let times = [
            TimeFn::Uniform(TimePiece::Constant(2.0)),
            TimeFn::Uniform(TimePiece::Exponential(1.5)),
            TimeFn::Uniform(TimePiece::Polynomial(vec![4.0, -1.0])),
            TimeFn::Piecewise(vec![
                (0.0, 0.5, TimePiece::Constant(1.0)),
                (0.5, 3.0, TimePiece::Polynomial(vec![0.0, 2.0])),
            ]),
        ];
        for fd in &times {
            let text = fd.render();
            assert_eq!(&parse_time(&text).unwrap(), fd, "round-trip of {text}");
        }
    }
}
