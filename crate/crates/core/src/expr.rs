//! Expression trees for coefficients and Lyapunov functionals.
//!
//! An [`Expr`] is a polynomial in the space coordinates and in a finite set of
//! moment observables of a measure, with `T`-periodic time dependence entering
//! only through the harmonics `sin(k*w*t)` / `cos(k*w*t)`, `w = 2*pi/T`. This
//! family is closed under the partial derivatives needed by the generator
//! evaluation, so all derivatives stay symbolic.
//!
//! ## Grammar
//!
//! Expressions parse from an infix string form:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*       -- '/' only by a constant
//! factor := '-' factor | atom ('^' int)?       -- integer power 0..=6
//! atom   := number
//!         | 'x1'..'x3' | 'y1'..'y3'            -- coordinates ('x'/'y' = first)
//!         | 'M[' int (',' int)* ']'            -- moment observable, |alpha| <= 4
//!         | 'sin(' [int '*'] 'w*t' ')'
//!         | 'cos(' [int '*'] 'w*t' ')'
//!         | '(' expr ')'
//! ```
//!
//! `x*` and `y*` are synonyms for the coordinate slots; by convention model
//! coefficients are written in `x` and the integrand of a measure functional
//! in `y`. `M[a1,...,ad]` evaluates to the weighted empirical moment
//! `sum_i w_i * x_i^alpha` of the attached particle cloud. Bare `t` outside a
//! harmonic is rejected: it would break periodicity in time.

use std::fmt;

use thiserror::Error;

/// Largest allowed integer power of a subexpression.
pub const MAX_POW: u32 = 6;
/// Largest allowed total order `|alpha|` of a moment observable.
pub const MAX_OBS_ORDER: u32 = 4;
/// Largest supported space dimension.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("observable order {order} exceeds the bound {MAX_OBS_ORDER}")]
    ObsOrder { order: u32 },
    #[error("multi-index length {len} not in 1..={MAX_DIM}")]
    ObsLen { len: usize },
    #[error("power {pow} exceeds the bound {MAX_POW}")]
    PowBound { pow: u32 },
    #[error("coordinate x{} used but evaluation point has dimension {dim}", idx + 1)]
    CoordOutOfRange { idx: usize, dim: usize },
    #[error("observable M[{idx}] has length {}, expected the dimension {dim}", idx.len())]
    ObsDimMismatch { idx: MultiIndex, dim: usize },
    #[error("non-finite value from `{expr}`")]
    NonFinite { expr: String },
}

/// Moment multi-index `alpha`, at most [`MAX_DIM`] entries, `|alpha| <= 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MultiIndex {
    exps: [u8; MAX_DIM],
    len: u8,
}

impl MultiIndex {
    pub fn new(exps: &[u8]) -> Result<Self, ExprError> {
        if exps.is_empty() || exps.len() > MAX_DIM {
            return Err(ExprError::ObsLen { len: exps.len() });
        }
        let order: u32 = exps.iter().map(|&e| u32::from(e)).sum();
        if order > MAX_OBS_ORDER {
            return Err(ExprError::ObsOrder { order });
        }
        let mut buf = [0u8; MAX_DIM];
        buf[..exps.len()].copy_from_slice(exps);
        Ok(Self {
            exps: buf,
            len: exps.len() as u8,
        })
    }

    pub fn exps(&self) -> &[u8] {
        &self.exps[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn order(&self) -> u32 {
        self.exps().iter().map(|&e| u32::from(e)).sum()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for e in self.exps() {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
            first = false;
        }
        Ok(())
    }
}

/// Symbolic expression over time harmonics, coordinates and observables.
///
/// `Omega` is the angular frequency `2*pi/T`; it appears in time derivatives
/// of the harmonics and has no surface syntax of its own.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Coordinate slot, zero-based (`x1` is `Coord(0)`).
    Coord(usize),
    /// `sin(k * w * t)` with `w = 2*pi/T`.
    SinK(u32),
    /// `cos(k * w * t)`.
    CosK(u32),
    /// The angular frequency symbol `w`.
    Omega,
    /// Moment observable `M[alpha]` of the attached measure.
    Obs(MultiIndex),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, u32),
}

/// Shared harmonic-argument formula so tree and compiled evaluation agree
/// bit for bit.
#[inline(always)]
fn trig_arg(k: u32, omega: f64, t: f64) -> f64 {
    k as f64 * omega * t
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn coord(i: usize) -> Expr {
        Expr::Coord(i)
    }

    pub fn obs(exps: &[u8]) -> Result<Expr, ExprError> {
        Ok(Expr::Obs(MultiIndex::new(exps)?))
    }

    pub fn sin_harmonic(k: u32) -> Expr {
        Expr::SinK(k.max(1))
    }

    pub fn cos_harmonic(k: u32) -> Expr {
        Expr::CosK(k.max(1))
    }

    // Smart constructors fold constants and drop neutral elements so that
    // derivative trees stay small.

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
            (Expr::Const(z), e) | (e, Expr::Const(z)) if z == 0.0 => e,
            (a, b) => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
            (a, Expr::Const(z)) if z == 0.0 => a,
            (Expr::Const(z), b) if z == 0.0 => Expr::neg(b),
            (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
            (Expr::Const(z), _) | (_, Expr::Const(z)) if z == 0.0 => Expr::Const(0.0),
            (Expr::Const(o), e) | (e, Expr::Const(o)) if o == 1.0 => e,
            (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(e) => *e,
            a => Expr::Neg(Box::new(a)),
        }
    }

    pub fn pow(a: Expr, n: u32) -> Expr {
        match n {
            0 => Expr::Const(1.0),
            1 => a,
            _ => match a {
                Expr::Const(c) => Expr::Const(c.powi(n as i32)),
                a => Expr::Pow(Box::new(a), n),
            },
        }
    }

    /// Checked recursive evaluation. `obs` supplies observable values for a
    /// backing measure; a non-finite intermediate is reported with the
    /// offending subexpression.
    pub fn eval_checked(
        &self,
        t: f64,
        omega: f64,
        x: &[f64],
        obs: &mut dyn FnMut(&MultiIndex) -> f64,
    ) -> Result<f64, ExprError> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Coord(i) => {
                if *i >= x.len() {
                    return Err(ExprError::CoordOutOfRange { idx: *i, dim: x.len() });
                }
                x[*i]
            }
            Expr::SinK(k) => trig_arg(*k, omega, t).sin(),
            Expr::CosK(k) => trig_arg(*k, omega, t).cos(),
            Expr::Omega => omega,
            Expr::Obs(mi) => obs(mi),
            Expr::Add(a, b) => {
                a.eval_checked(t, omega, x, obs)? + b.eval_checked(t, omega, x, obs)?
            }
            Expr::Sub(a, b) => {
                a.eval_checked(t, omega, x, obs)? - b.eval_checked(t, omega, x, obs)?
            }
            Expr::Mul(a, b) => {
                a.eval_checked(t, omega, x, obs)? * b.eval_checked(t, omega, x, obs)?
            }
            Expr::Neg(a) => -a.eval_checked(t, omega, x, obs)?,
            Expr::Pow(a, n) => a.eval_checked(t, omega, x, obs)?.powi(*n as i32),
        };
        if !v.is_finite() {
            return Err(ExprError::NonFinite {
                expr: self.to_string(),
            });
        }
        Ok(v)
    }

    /// Time partial derivative.
    pub fn d_time(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Coord(_) | Expr::Obs(_) | Expr::Omega => Expr::Const(0.0),
            Expr::SinK(k) => Expr::mul(
                Expr::Const(*k as f64),
                Expr::mul(Expr::Omega, Expr::CosK(*k)),
            ),
            Expr::CosK(k) => Expr::neg(Expr::mul(
                Expr::Const(*k as f64),
                Expr::mul(Expr::Omega, Expr::SinK(*k)),
            )),
            Expr::Add(a, b) => Expr::add(a.d_time(), b.d_time()),
            Expr::Sub(a, b) => Expr::sub(a.d_time(), b.d_time()),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.d_time(), (**b).clone()),
                Expr::mul((**a).clone(), b.d_time()),
            ),
            Expr::Neg(a) => Expr::neg(a.d_time()),
            Expr::Pow(a, n) => Expr::mul(
                Expr::Const(*n as f64),
                Expr::mul(Expr::pow((**a).clone(), n - 1), a.d_time()),
            ),
        }
    }

    /// Partial derivative in coordinate `i` (zero-based).
    pub fn d_coord(&self, i: usize) -> Expr {
        match self {
            Expr::Const(_) | Expr::SinK(_) | Expr::CosK(_) | Expr::Omega | Expr::Obs(_) => {
                Expr::Const(0.0)
            }
            Expr::Coord(j) => Expr::Const(if i == *j { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => Expr::add(a.d_coord(i), b.d_coord(i)),
            Expr::Sub(a, b) => Expr::sub(a.d_coord(i), b.d_coord(i)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.d_coord(i), (**b).clone()),
                Expr::mul((**a).clone(), b.d_coord(i)),
            ),
            Expr::Neg(a) => Expr::neg(a.d_coord(i)),
            Expr::Pow(a, n) => Expr::mul(
                Expr::Const(*n as f64),
                Expr::mul(Expr::pow((**a).clone(), n - 1), a.d_coord(i)),
            ),
        }
    }

    /// Upper bound for the polynomial degree in the space coordinates.
    pub fn space_degree(&self) -> u32 {
        match self {
            Expr::Const(_) | Expr::SinK(_) | Expr::CosK(_) | Expr::Omega | Expr::Obs(_) => 0,
            Expr::Coord(_) => 1,
            Expr::Add(a, b) | Expr::Sub(a, b) => a.space_degree().max(b.space_degree()),
            Expr::Mul(a, b) => a.space_degree() + b.space_degree(),
            Expr::Neg(a) => a.space_degree(),
            Expr::Pow(a, n) => a.space_degree() * n,
        }
    }

    /// Largest coordinate slot referenced, if any.
    pub fn max_coord(&self) -> Option<usize> {
        match self {
            Expr::Coord(i) => Some(*i),
            Expr::Const(_) | Expr::SinK(_) | Expr::CosK(_) | Expr::Omega | Expr::Obs(_) => None,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                match (a.max_coord(), b.max_coord()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
            Expr::Neg(a) | Expr::Pow(a, _) => a.max_coord(),
        }
    }

    /// Largest harmonic index referenced (0 when time-independent).
    pub fn max_harmonic(&self) -> u32 {
        match self {
            Expr::SinK(k) | Expr::CosK(k) => *k,
            Expr::Const(_) | Expr::Coord(_) | Expr::Omega | Expr::Obs(_) => 0,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.max_harmonic().max(b.max_harmonic())
            }
            Expr::Neg(a) | Expr::Pow(a, _) => a.max_harmonic(),
        }
    }

    /// Largest explicit power used anywhere in the tree.
    pub fn max_pow(&self) -> u32 {
        match self {
            Expr::Pow(a, n) => a.max_pow().max(*n),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => a.max_pow().max(b.max_pow()),
            Expr::Neg(a) => a.max_pow(),
            _ => 0,
        }
    }

    pub fn has_obs(&self) -> bool {
        match self {
            Expr::Obs(_) => true,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => a.has_obs() || b.has_obs(),
            Expr::Neg(a) | Expr::Pow(a, _) => a.has_obs(),
            _ => false,
        }
    }

    pub fn collect_obs(&self, out: &mut Vec<MultiIndex>) {
        match self {
            Expr::Obs(mi) => {
                if !out.contains(mi) {
                    out.push(*mi);
                }
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.collect_obs(out);
                b.collect_obs(out);
            }
            Expr::Neg(a) | Expr::Pow(a, _) => a.collect_obs(out),
            _ => {}
        }
    }

    pub fn parse(input: &str) -> Result<Expr, ExprError> {
        Parser::new(input).parse_full()
    }
}

// ---------------------------------------------------------------------------
// Printing

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) => 2,
        // a negative constant prints with a leading minus, so it binds like
        // a unary minus (e.g. it must parenthesize as a power base)
        Expr::Neg(..) => 3,
        Expr::Const(c) if *c < 0.0 => 3,
        Expr::Pow(..) => 4,
        _ => 5,
    }
}

fn fmt_with(e: &Expr, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
    let p = prec(e);
    let paren = p < min_prec;
    if paren {
        write!(f, "(")?;
    }
    match e {
        Expr::Const(c) => write!(f, "{c}")?,
        Expr::Coord(i) => write!(f, "x{}", i + 1)?,
        Expr::SinK(k) => {
            if *k == 1 {
                write!(f, "sin(w*t)")?;
            } else {
                write!(f, "sin({k}*w*t)")?;
            }
        }
        Expr::CosK(k) => {
            if *k == 1 {
                write!(f, "cos(w*t)")?;
            } else {
                write!(f, "cos({k}*w*t)")?;
            }
        }
        Expr::Omega => write!(f, "w")?,
        Expr::Obs(mi) => write!(f, "M[{mi}]")?,
        Expr::Add(a, b) => {
            fmt_with(a, f, 1)?;
            write!(f, " + ")?;
            fmt_with(b, f, 2)?
        }
        Expr::Sub(a, b) => {
            fmt_with(a, f, 1)?;
            write!(f, " - ")?;
            fmt_with(b, f, 2)?
        }
        Expr::Mul(a, b) => {
            fmt_with(a, f, 2)?;
            write!(f, "*")?;
            fmt_with(b, f, 3)?
        }
        Expr::Neg(a) => {
            write!(f, "-")?;
            fmt_with(a, f, 3)?
        }
        Expr::Pow(a, n) => {
            fmt_with(a, f, 5)?;
            write!(f, "^{n}")?
        }
    }
    if paren {
        write!(f, ")")?;
    }
    Ok(())
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_with(self, f, 0)
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Parse {
            pos: self.pos,
            msg: msg.into(),
        })
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected '{}'", c as char))
        }
    }

    fn parse_full(mut self) -> Result<Expr, ExprError> {
        let e = self.parse_expr()?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.err("trailing input");
        }
        Ok(e)
    }

    fn parse_expr(&mut self) -> Result<Expr, ExprError> {
        let mut acc = self.parse_term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = Expr::add(acc, self.parse_term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = Expr::sub(acc, self.parse_term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Expr, ExprError> {
        let mut acc = self.parse_factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    acc = Expr::mul(acc, self.parse_factor()?);
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.parse_factor()?;
                    match rhs {
                        Expr::Const(c) if c != 0.0 => {
                            acc = Expr::mul(acc, Expr::Const(1.0 / c));
                        }
                        Expr::Const(_) => return self.err("division by zero"),
                        _ => return self.err("division is only allowed by a constant"),
                    }
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_factor(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            return Ok(Expr::neg(self.parse_factor()?));
        }
        let base = self.parse_atom()?;
        if self.eat(b'^') {
            let n = self.parse_uint()?;
            if n > MAX_POW {
                return Err(ExprError::PowBound { pow: n });
            }
            return Ok(Expr::pow(base, n));
        }
        Ok(base)
    }

    fn parse_uint(&mut self) -> Result<u32, ExprError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected an integer");
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse::<u32>()
            .map_err(|_| ExprError::Parse {
                pos: start,
                msg: "integer out of range".into(),
            })
    }

    fn parse_number(&mut self) -> Result<f64, ExprError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E') && self.pos > start {
                self.pos += 1;
                if matches!(self.src.get(self.pos), Some(b'+') | Some(b'-')) {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
        if start == self.pos {
            return self.err("expected a number");
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse::<f64>()
            .map_err(|_| ExprError::Parse {
                pos: start,
                msg: "malformed number".into(),
            })
    }

    fn parse_ident(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    /// `[int '*'] 'w' '*' 't'` inside `sin(...)` / `cos(...)`.
    fn parse_trig_arg(&mut self) -> Result<u32, ExprError> {
        let k = if self.peek().is_some_and(|c| c.is_ascii_digit()) {
            let k = self.parse_uint()?;
            self.expect(b'*')?;
            k
        } else {
            1
        };
        if k == 0 {
            return self.err("harmonic index must be positive");
        }
        let w = self.parse_ident();
        if w != "w" {
            return self.err("expected 'w' in harmonic argument");
        }
        self.expect(b'*')?;
        let t = self.parse_ident();
        if t != "t" {
            return self.err("expected 't' in harmonic argument");
        }
        Ok(k)
    }

    fn parse_atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            None => self.err("unexpected end of input"),
            Some(b'(') => {
                self.pos += 1;
                let e = self.parse_expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Const(self.parse_number()?)),
            Some(b'M') => {
                self.pos += 1;
                self.expect(b'[')?;
                let mut exps = Vec::new();
                loop {
                    let e = self.parse_uint()?;
                    if e > u32::from(u8::MAX) {
                        return self.err("exponent out of range");
                    }
                    exps.push(e as u8);
                    if !self.eat(b',') {
                        break;
                    }
                }
                self.expect(b']')?;
                Expr::obs(&exps)
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let id = self.parse_ident();
                match id.as_str() {
                    "sin" | "cos" => {
                        self.expect(b'(')?;
                        let k = self.parse_trig_arg()?;
                        self.expect(b')')?;
                        Ok(if id == "sin" {
                            Expr::SinK(k)
                        } else {
                            Expr::CosK(k)
                        })
                    }
                    // `x`/`y` with an optional digit suffix; bare means slot 1.
                    "x" | "y" => {
                        if self
                            .src
                            .get(self.pos)
                            .copied()
                            .is_some_and(|c| c.is_ascii_digit())
                        {
                            let n = self.parse_uint()? as usize;
                            if n == 0 || n > MAX_DIM {
                                return self
                                    .err(format!("coordinate index must be 1..={MAX_DIM}"));
                            }
                            Ok(Expr::Coord(n - 1))
                        } else {
                            Ok(Expr::Coord(0))
                        }
                    }
                    "t" | "w" => self.err(format!(
                        "bare '{id}' is not allowed; time enters only via sin(k*w*t)/cos(k*w*t)"
                    )),
                    _ => self.err(format!("unknown identifier `{id}`")),
                }
            }
            Some(c) => self.err(format!("unexpected character '{}'", c as char)),
        }
    }
}

// ---------------------------------------------------------------------------
// Compiled form

/// Flat postfix program for fast repeated evaluation.
///
/// Compilation is a plain postorder walk with no algebraic rewriting, so a
/// compiled program reproduces checked tree evaluation bit for bit.
#[derive(Debug, Clone)]
pub struct Compiled {
    prog: Vec<Instr>,
    stack_need: usize,
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Coord(u8),
    Sin(u32),
    Cos(u32),
    Omega,
    Obs(u16),
    Add,
    Sub,
    Mul,
    Neg,
    Pow(i32),
}

/// Per-time-step table of harmonic values shared by all particles.
#[derive(Debug, Clone)]
pub struct TrigTable {
    pub omega: f64,
    sin: Vec<f64>,
    cos: Vec<f64>,
}

impl TrigTable {
    pub fn at(t: f64, omega: f64, max_k: u32) -> Self {
        let mut sin = Vec::with_capacity(max_k as usize);
        let mut cos = Vec::with_capacity(max_k as usize);
        for k in 1..=max_k {
            let a = trig_arg(k, omega, t);
            sin.push(a.sin());
            cos.push(a.cos());
        }
        TrigTable { omega, sin, cos }
    }

    #[inline(always)]
    fn sin_k(&self, k: u32) -> f64 {
        self.sin[(k - 1) as usize]
    }

    #[inline(always)]
    fn cos_k(&self, k: u32) -> f64 {
        self.cos[(k - 1) as usize]
    }
}

const EVAL_STACK: usize = 64;

impl Compiled {
    /// Flatten `e`, registering observable slots in `slots` (deduplicated).
    pub fn compile(e: &Expr, slots: &mut Vec<MultiIndex>) -> Compiled {
        let mut prog = Vec::new();
        fn walk(e: &Expr, prog: &mut Vec<Instr>, slots: &mut Vec<MultiIndex>) {
            match e {
                Expr::Const(c) => prog.push(Instr::Const(*c)),
                Expr::Coord(i) => prog.push(Instr::Coord(*i as u8)),
                Expr::SinK(k) => prog.push(Instr::Sin(*k)),
                Expr::CosK(k) => prog.push(Instr::Cos(*k)),
                Expr::Omega => prog.push(Instr::Omega),
                Expr::Obs(mi) => {
                    let slot = match slots.iter().position(|s| s == mi) {
                        Some(p) => p,
                        None => {
                            slots.push(*mi);
                            slots.len() - 1
                        }
                    };
                    prog.push(Instr::Obs(slot as u16));
                }
                Expr::Add(a, b) => {
                    walk(a, prog, slots);
                    walk(b, prog, slots);
                    prog.push(Instr::Add);
                }
                Expr::Sub(a, b) => {
                    walk(a, prog, slots);
                    walk(b, prog, slots);
                    prog.push(Instr::Sub);
                }
                Expr::Mul(a, b) => {
                    walk(a, prog, slots);
                    walk(b, prog, slots);
                    prog.push(Instr::Mul);
                }
                Expr::Neg(a) => {
                    walk(a, prog, slots);
                    prog.push(Instr::Neg);
                }
                Expr::Pow(a, n) => {
                    walk(a, prog, slots);
                    prog.push(Instr::Pow(*n as i32));
                }
            }
        }
        walk(e, &mut prog, slots);

        let mut depth = 0usize;
        let mut need = 0usize;
        for ins in &prog {
            match ins {
                Instr::Add | Instr::Sub | Instr::Mul => depth -= 1,
                Instr::Neg | Instr::Pow(_) => {}
                _ => {
                    depth += 1;
                    need = need.max(depth);
                }
            }
        }
        assert!(need <= EVAL_STACK, "expression too deep to compile");
        Compiled {
            prog,
            stack_need: need,
        }
    }

    /// Evaluate at a space point with precomputed harmonics and observables.
    #[inline]
    pub fn eval(&self, x: &[f64], trig: &TrigTable, obs: &[f64]) -> f64 {
        let mut stack = [0.0f64; EVAL_STACK];
        let mut top = 0usize;
        for ins in &self.prog {
            match *ins {
                Instr::Const(c) => {
                    stack[top] = c;
                    top += 1;
                }
                Instr::Coord(i) => {
                    stack[top] = x[i as usize];
                    top += 1;
                }
                Instr::Sin(k) => {
                    stack[top] = trig.sin_k(k);
                    top += 1;
                }
                Instr::Cos(k) => {
                    stack[top] = trig.cos_k(k);
                    top += 1;
                }
                Instr::Omega => {
                    stack[top] = trig.omega;
                    top += 1;
                }
                Instr::Obs(s) => {
                    stack[top] = obs[s as usize];
                    top += 1;
                }
                Instr::Add => {
                    top -= 1;
                    stack[top - 1] += stack[top];
                }
                Instr::Sub => {
                    top -= 1;
                    stack[top - 1] -= stack[top];
                }
                Instr::Mul => {
                    top -= 1;
                    stack[top - 1] *= stack[top];
                }
                Instr::Neg => stack[top - 1] = -stack[top - 1],
                Instr::Pow(n) => stack[top - 1] = stack[top - 1].powi(n),
            }
        }
        debug_assert_eq!(top, 1);
        stack[0]
    }

    pub fn stack_need(&self) -> usize {
        self.stack_need
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn atom() -> impl Strategy<Value = Expr> {
        prop_oneof![
            (-8.0f64..8.0).prop_map(Expr::Const),
            (0usize..3).prop_map(Expr::Coord),
            (1u32..4).prop_map(Expr::SinK),
            (1u32..4).prop_map(Expr::CosK),
            prop_oneof![Just(vec![1u8]), Just(vec![2]), Just(vec![0, 2]), Just(vec![1, 1, 1])]
                .prop_map(|e| Expr::obs(&e).unwrap()),
        ]
    }

    fn tree() -> impl Strategy<Value = Expr> {
        atom().prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner, 2u32..4).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn print_parse_evaluates_identically(e in tree()) {
            // the printed form must parse back to something that evaluates
            // the same (smart constructors may fold constants structurally)
            let printed = e.to_string();
            let back = Expr::parse(&printed).unwrap();
            let omega = 0.9;
            let obs_val = |mi: &MultiIndex| 0.3 + mi.order() as f64 * 0.1;
            for (t, x) in [(0.0, [0.5, -1.0, 2.0]), (1.7, [0.0, 0.25, -0.75])] {
                let va = e.eval_checked(t, omega, &x, &mut |mi| obs_val(mi));
                let vb = back.eval_checked(t, omega, &x, &mut |mi| obs_val(mi));
                match (va, vb) {
                    (Ok(va), Ok(vb)) => prop_assert!(
                        (va - vb).abs() <= 1e-9 * (1.0 + va.abs()),
                        "`{printed}`: {va} vs {vb}"
                    ),
                    (Err(_), Err(_)) => {}
                    other => prop_assert!(false, "eval disagreement for `{printed}`: {other:?}"),
                }
            }
        }

        #[test]
        fn compiled_agrees_with_tree_bitwise(e in tree()) {
            let mut slots = Vec::new();
            let compiled = Compiled::compile(&e, &mut slots);
            let obs: Vec<f64> = slots.iter().map(|mi| 0.2 + mi.order() as f64 * 0.05).collect();
            let omega = 1.3;
            for (t, x) in [(0.4, [1.0, -0.5, 0.125]), (2.2, [-2.0, 0.0, 3.0])] {
                let trig = TrigTable::at(t, omega, e.max_harmonic().max(1));
                let fast = compiled.eval(&x, &trig, &obs);
                let mut lookup = |mi: &MultiIndex| {
                    obs[slots.iter().position(|s| s == mi).unwrap()]
                };
                if let Ok(slow) = e.eval_checked(t, omega, &x, &mut lookup) {
                    prop_assert_eq!(fast.to_bits(), slow.to_bits());
                }
            }
        }
    }
}
