//! Sectioned key/value problem files.
//!
//! ```text
//! # comment
//! [problem]
//! L = 1
//! T = 3
//! gamma = 0
//! f = 0
//! y0 = sin(1)
//! yd = sin(1) @ piecewise{[0,0.6931471805599453): exp(1.5); [0.6931471805599453,1): 3; [1,3]: poly(4,-1)}
//! ydT = sin(1)
//!
//! [controls]
//! m = 1
//! b0 = 0
//! b1 = 1
//! alpha1 = 0
//! lo1 = -1
//! hi1 = 10.869604401089358
//!
//! [constraints]
//! q = 1
//! c1 = sin(1)
//! d1 = -2
//!
//! [grid]
//! nx = 101
//! nt = 600
//! ```
//!
//! Function values use the expression mini-grammar; space-time functions are
//! written `SPACE @ TIME` with the time factor defaulting to 1. The `[grid]`
//! section is optional (defaults 101 × 600).

use super::{
    parse_space, parse_space_time, validate, ModelError, ProblemSpec, SpaceTimeGrid, ValidatedSpec,
};
use std::collections::BTreeMap;

const DEFAULT_NX: usize = 101;
const DEFAULT_NT: usize = 600;

pub fn read_problem_file(text: &str) -> Result<ValidatedSpec, ModelError> {
    let mut sections: BTreeMap<String, BTreeMap<String, (usize, String)>> = BTreeMap::new();
    let mut current = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_owned();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(lineno, "expected `key = value` or `[section]`"));
        };
        if current.is_empty() {
            return Err(err(lineno, "key before any [section] header"));
        }
        let prev = sections
            .get_mut(&current)
            .unwrap()
            .insert(key.trim().to_owned(), (lineno, value.trim().to_owned()));
        if prev.is_some() {
            return Err(err(lineno, &format!("duplicate key {:?}", key.trim())));
        }
    }

    let mut problem = take_section(&mut sections, "problem")?;
    let mut controls = take_section(&mut sections, "controls")?;
    let mut constraints = take_section(&mut sections, "constraints")?;
    let mut grid_sec = sections.remove("grid").unwrap_or_default();
    if let Some(name) = sections.keys().next() {
        return Err(err(0, &format!("unknown section [{name}]")));
    }

    let l = num(&mut problem, "L")?;
    let t_final = num(&mut problem, "T")?;
    let gamma = num(&mut problem, "gamma")?;
    let f = space_time(&mut problem, "f")?;
    let y0 = space(&mut problem, "y0")?;
    let yd = space_time(&mut problem, "yd")?;
    let yd_terminal = space(&mut problem, "ydT")?;
    reject_leftovers(&problem, "problem")?;

    let m = index(&mut controls, "m")?;
    let mut b = Vec::with_capacity(m + 1);
    for i in 0..=m {
        b.push(space(&mut controls, &format!("b{i}"))?);
    }
    let mut alpha = Vec::with_capacity(m);
    let mut u_lo = Vec::with_capacity(m);
    let mut u_hi = Vec::with_capacity(m);
    for i in 1..=m {
        alpha.push(num(&mut controls, &format!("alpha{i}"))?);
        u_lo.push(num(&mut controls, &format!("lo{i}"))?);
        u_hi.push(num(&mut controls, &format!("hi{i}"))?);
    }
    reject_leftovers(&controls, "controls")?;

    let q = index(&mut constraints, "q")?;
    let mut c = Vec::with_capacity(q);
    let mut d = Vec::with_capacity(q);
    for j in 1..=q {
        c.push(space(&mut constraints, &format!("c{j}"))?);
        d.push(num(&mut constraints, &format!("d{j}"))?);
    }
    reject_leftovers(&constraints, "constraints")?;

    let n_x = opt_index(&mut grid_sec, "nx")?.unwrap_or(DEFAULT_NX);
    let n_t = opt_index(&mut grid_sec, "nt")?.unwrap_or(DEFAULT_NT);
    reject_leftovers(&grid_sec, "grid")?;
    if n_x < 3 || n_t < 2 {
        return Err(err(0, "grid too small: need nx >= 3 and nt >= 2"));
    }

    let spec = ProblemSpec {
        l,
        t_final,
        gamma,
        m,
        b,
        f,
        y0,
        yd,
        yd_terminal,
        alpha,
        q,
        c,
        d,
        u_lo,
        u_hi,
        grid: SpaceTimeGrid::new(l, t_final, n_x, n_t),
    };
    validate(&spec)
}

/// Canonical text for a spec; `read_problem_file` inverts it.
pub fn render_problem_file(spec: &ProblemSpec) -> String {
    let mut out = String::new();
    out.push_str("[problem]\n");
    out.push_str(&format!("L = {}\n", spec.l));
    out.push_str(&format!("T = {}\n", spec.t_final));
    out.push_str(&format!("gamma = {}\n", spec.gamma));
    out.push_str(&format!("f = {}\n", render_space_time(&spec.f)));
    out.push_str(&format!("y0 = {}\n", spec.y0.render()));
    out.push_str(&format!("yd = {}\n", render_space_time(&spec.yd)));
    out.push_str(&format!("ydT = {}\n", spec.yd_terminal.render()));
    out.push_str("\n[controls]\n");
    out.push_str(&format!("m = {}\n", spec.m));
    for (i, bi) in spec.b.iter().enumerate() {
        out.push_str(&format!("b{i} = {}\n", bi.render()));
    }
    for i in 0..spec.m {
        out.push_str(&format!("alpha{} = {}\n", i + 1, spec.alpha[i]));
        out.push_str(&format!("lo{} = {}\n", i + 1, spec.u_lo[i]));
        out.push_str(&format!("hi{} = {}\n", i + 1, spec.u_hi[i]));
    }
    out.push_str("\n[constraints]\n");
    out.push_str(&format!("q = {}\n", spec.q));
    for j in 0..spec.q {
        out.push_str(&format!("c{} = {}\n", j + 1, spec.c[j].render()));
        out.push_str(&format!("d{} = {}\n", j + 1, spec.d[j]));
    }
    out.push_str("\n[grid]\n");
    out.push_str(&format!("nx = {}\n", spec.grid.n_x));
    out.push_str(&format!("nt = {}\n", spec.grid.n_t));
    out
}

fn render_space_time(f: &super::SpaceTimeFn) -> String {
    if f.time == super::TimeFn::one() {
        f.space.render()
    } else {
        format!("{} @ {}", f.space.render(), f.time.render())
    }
}

type Section = BTreeMap<String, (usize, String)>;

fn err(line: usize, msg: &str) -> ModelError {
    ModelError::ProblemFile { line, msg: msg.to_owned() }
}

fn take_section(
    sections: &mut BTreeMap<String, Section>,
    name: &str,
) -> Result<Section, ModelError> {
    sections.remove(name).ok_or_else(|| err(0, &format!("missing section [{name}]")))
}

fn take(section: &mut Section, key: &str) -> Result<(usize, String), ModelError> {
    section.remove(key).ok_or_else(|| err(0, &format!("missing key {key:?}")))
}

fn num(section: &mut Section, key: &str) -> Result<f64, ModelError> {
    let (line, text) = take(section, key)?;
    text.parse().map_err(|_| err(line, &format!("{key}: expected a number, got {text:?}")))
}

fn index(section: &mut Section, key: &str) -> Result<usize, ModelError> {
    let (line, text) = take(section, key)?;
    text.parse().map_err(|_| err(line, &format!("{key}: expected a count, got {text:?}")))
}

fn opt_index(section: &mut Section, key: &str) -> Result<Option<usize>, ModelError> {
    match section.remove(key) {
        None => Ok(None),
        Some((line, text)) => text
            .parse()
            .map(Some)
            .map_err(|_| err(line, &format!("{key}: expected a count, got {text:?}"))),
    }
}

fn space(section: &mut Section, key: &str) -> Result<super::SpaceFn, ModelError> {
    let (line, text) = take(section, key)?;
    parse_space(&text).map_err(|e| err(line, &format!("{key}: {e}")))
}

fn space_time(section: &mut Section, key: &str) -> Result<super::SpaceTimeFn, ModelError> {
    let (line, text) = take(section, key)?;
    parse_space_time(&text).map_err(|e| err(line, &format!("{key}: {e}")))
}

fn reject_leftovers(section: &Section, name: &str) -> Result<(), ModelError> {
    if let Some((key, (line, _))) = section.iter().next() {
        return Err(err(*line, &format!("unknown key {key:?} in [{name}]")));
    }
    Ok(())
}
