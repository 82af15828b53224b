//! Workload description language.
//!
//! ```text
//! # comment
//! param threads = 2;
//! memory sv = 0;
//! thread * threads {
//!     loop 4 {
//!         read flag_$tid -> r1;
//!         lock L @1;
//!         compute 2;
//!         if r1 == 1 { read sv -> r2; write sv = r2 add 1 }
//!         unlock L
//!     }
//! }
//! ```
//!
//! `thread * N { .. }` replicates a block N times; `$tid` inside an address
//! or lock name expands to the replica's thread id. `param` values can be
//! overridden when a program is instantiated; a later `param` may be
//! computed from earlier ones, e.g. `param n = work / threads + 1;`.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::trace::{Addr, BinOp, CodeRegion, LockId, Operand, Reg, ThreadId, TraceEvent, ValExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    pub fn holds(self, lhs: i64, rhs: i64) -> bool {
        match self {
            Cmp::Eq => lhs == rhs,
            Cmp::Ne => lhs != rhs,
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Compute(u64),
    Lock {
        lock: LockId,
        site: CodeRegion,
    },
    Unlock(LockId),
    Read {
        addr: Addr,
        reg: Reg,
    },
    Write {
        addr: Addr,
        val: ValExpr,
    },
    If {
        reg: Reg,
        cmp: Cmp,
        value: i64,
        then: Vec<Stmt>,
        otherwise: Vec<Stmt>,
    },
    Loop {
        count: u64,
        body: Vec<Stmt>,
    },
    Marker(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadProgram {
    pub threads: Vec<Vec<Stmt>>,
    pub initial_memory: BTreeMap<Addr, i64>,
    /// Resolved parameter values, after overrides.
    pub params: BTreeMap<String, i64>,
}

impl WorkloadProgram {
    /// Number of LOCK_ACQ events the program issues if every `if` takes
    /// the branch with more acquisitions; exact for branch-free programs.
    pub fn static_lock_count(&self) -> u64 {
        fn count(block: &[Stmt]) -> u64 {
            block
                .iter()
                .map(|s| match s {
                    Stmt::Lock { .. } => 1,
                    Stmt::Loop { count: n, body } => n * count(body),
                    Stmt::If {
                        then, otherwise, ..
                    } => count(then).max(count(otherwise)),
                    _ => 0,
                })
                .sum()
        }
        self.threads.iter().map(|t| count(t)).sum()
    }
}

pub fn parse_workload(text: &str) -> Result<WorkloadProgram> {
    parse_workload_with(text, &BTreeMap::new())
}

/// Parses with parameter overrides. Overriding an undeclared parameter is an error.
pub fn parse_workload_with(
    text: &str,
    overrides: &BTreeMap<String, i64>,
) -> Result<WorkloadProgram> {
    let tokens = lex(text)?;
    let mut p = Parser {
        toks: tokens,
        pos: 0,
        params: BTreeMap::new(),
        overrides,
    };
    let program = p.program()?;
    for name in overrides.keys() {
        if !program.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "workload declares no parameter `{name}`"
            )));
        }
    }
    Ok(program)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Sym(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

const SYMBOLS: [&str; 17] = [
    "->", "==", "!=", "<=", ">=", "{", "}", ";", "=", "@", "*", "/", "+", "-", "<", ">", ",",
];

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    for (lno, line) in text.lines().enumerate() {
        let line_no = lno + 1;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c == '#' {
                break;
            }
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_digit()
                || (c == '-' && chars.get(i + 1).is_some_and(char::is_ascii_digit))
            {
                let start = i;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                let v = s.parse().map_err(|_| Error::Syntax {
                    line: line_no,
                    col,
                    msg: format!("integer out of range: {s}"),
                })?;
                out.push(Token {
                    tok: Tok::Int(v),
                    line: line_no,
                    col,
                });
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' || c == '$' {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || matches!(chars[i], '_' | '$' | '.'))
                {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    line: line_no,
                    col,
                });
                continue;
            }
            let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
            match SYMBOLS.iter().find(|s| rest.starts_with(**s)) {
                Some(sym) => {
                    out.push(Token {
                        tok: Tok::Sym(sym),
                        line: line_no,
                        col,
                    });
                    i += sym.len();
                }
                None => {
                    return Err(Error::Syntax {
                        line: line_no,
                        col,
                        msg: format!("unexpected character `{c}`"),
                    })
                }
            }
        }
    }
    let (line, col) = out.last().map_or((1, 1), |t| (t.line, t.col + 1));
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

/// Unexpanded statement with source positions, checked before replication.
#[derive(Debug, Clone)]
enum RawStmt {
    Compute(u64),
    Lock {
        lock: String,
        site_id: u32,
        line: usize,
        col: usize,
    },
    Unlock {
        lock: String,
        line: usize,
        col: usize,
    },
    Read {
        addr: String,
        reg: String,
    },
    Write {
        addr: String,
        val: ValExpr,
        line: usize,
        col: usize,
    },
    If {
        reg: String,
        cmp: Cmp,
        value: i64,
        then: Vec<RawStmt>,
        otherwise: Vec<RawStmt>,
        line: usize,
        col: usize,
    },
    Loop {
        count: u64,
        body: Vec<RawStmt>,
    },
    Marker(String),
}

struct Parser<'a> {
    toks: Vec<Token>,
    pos: usize,
    params: BTreeMap<String, i64>,
    overrides: &'a BTreeMap<String, i64>,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        let t = self.peek();
        Err(Error::Syntax {
            line: t.line,
            col: t.col,
            msg: msg.into(),
        })
    }

    fn is_sym(&self, sym: &str) -> bool {
        matches!(&self.peek().tok, Tok::Sym(s) if *s == sym)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn expect_sym(&mut self, sym: &str) -> Result<()> {
        if self.is_sym(sym) {
            self.bump();
            Ok(())
        } else {
            self.err(format!("expected `{sym}`"))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String> {
        match &self.peek().tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn int(&mut self) -> Result<i64> {
        match self.peek().tok {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            _ => self.err("expected integer"),
        }
    }

    fn param_term(&mut self) -> Result<i64> {
        match &self.peek().tok {
            Tok::Ident(name) => match self.params.get(name) {
                Some(v) => {
                    let v = *v;
                    self.bump();
                    Ok(v)
                }
                None => self.err(format!("unknown parameter `{name}`")),
            },
            _ => self.int(),
        }
    }

    fn param_product(&mut self) -> Result<i64> {
        let mut v = self.param_term()?;
        loop {
            let mul = if self.is_sym("*") {
                true
            } else if self.is_sym("/") {
                false
            } else {
                return Ok(v);
            };
            self.bump();
            let rhs = self.param_term()?;
            v = match if mul {
                v.checked_mul(rhs)
            } else {
                v.checked_div(rhs)
            } {
                Some(v) => v,
                None => return self.err("parameter arithmetic out of range"),
            };
        }
    }

    /// Integer arithmetic over literals and earlier params; `*` and `/`
    /// bind tighter than `+` and `-`.
    fn param_expr(&mut self) -> Result<i64> {
        let mut v = self.param_product()?;
        loop {
            // `a -3` lexes as a negative literal.
            let rhs = if self.is_sym("+") {
                self.bump();
                self.param_product()?
            } else if self.is_sym("-") {
                self.bump();
                match self.param_product()?.checked_neg() {
                    Some(r) => r,
                    None => return self.err("parameter arithmetic out of range"),
                }
            } else if matches!(self.peek().tok, Tok::Int(n) if n < 0) {
                self.param_product()?
            } else {
                return Ok(v);
            };
            v = match v.checked_add(rhs) {
                Some(v) => v,
                None => return self.err("parameter arithmetic out of range"),
            };
        }
    }

    fn count(&mut self) -> Result<u64> {
        let v = match &self.peek().tok {
            Tok::Int(v) => *v,
            Tok::Ident(name) => match self.params.get(name) {
                Some(v) => *v,
                None => return self.err(format!("unknown parameter `{name}`")),
            },
            _ => return self.err("expected count"),
        };
        if v < 0 {
            return self.err("count must be non-negative");
        }
        self.bump();
        Ok(v as u64)
    }

    fn skip_semis(&mut self) {
        while self.is_sym(";") {
            self.bump();
        }
    }

    fn program(&mut self) -> Result<WorkloadProgram> {
        let mut initial_memory = BTreeMap::new();
        let mut threads = Vec::new();
        loop {
            self.skip_semis();
            if self.peek().tok == Tok::Eof {
                break;
            }
            if self.is_kw("param") {
                self.bump();
                let name = self.ident("parameter name")?;
                self.expect_sym("=")?;
                let v = self.param_expr()?;
                let v = self.overrides.get(&name).copied().unwrap_or(v);
                self.params.insert(name, v);
            } else if self.is_kw("memory") {
                self.bump();
                let addr = self.ident("address")?;
                self.expect_sym("=")?;
                let v = self.int()?;
                initial_memory.insert(addr, v);
            } else if self.is_kw("thread") {
                self.bump();
                let replicas = if self.is_sym("*") {
                    self.bump();
                    self.count()?
                } else {
                    1
                };
                self.expect_sym("{")?;
                let body = self.block()?;
                self.expect_sym("}")?;
                check_locks(&body, &mut Vec::new())?;
                check_regs(&body, &mut HashSet::new())?;
                for _ in 0..replicas {
                    let tid = threads.len() as ThreadId;
                    threads.push(expand(&body, tid));
                }
            } else {
                return self.err("expected `param`, `memory` or `thread`");
            }
        }
        Ok(WorkloadProgram {
            threads,
            initial_memory,
            params: self.params.clone(),
        })
    }

    fn block(&mut self) -> Result<Vec<RawStmt>> {
        let mut out = Vec::new();
        loop {
            self.skip_semis();
            if self.is_sym("}") || self.peek().tok == Tok::Eof {
                return Ok(out);
            }
            out.push(self.stmt()?);
        }
    }

    fn stmt(&mut self) -> Result<RawStmt> {
        let (line, col) = (self.peek().line, self.peek().col);
        let kw = self.ident("statement")?;
        match kw.as_str() {
            "compute" => Ok(RawStmt::Compute(self.count()?)),
            "lock" => {
                let lock = self.ident("lock name")?;
                let site_id = if self.is_sym("@") {
                    self.bump();
                    let v = self.int()?;
                    u32::try_from(v).or_else(|_| self.err("site id must be non-negative"))?
                } else {
                    0
                };
                Ok(RawStmt::Lock {
                    lock,
                    site_id,
                    line,
                    col,
                })
            }
            "unlock" => Ok(RawStmt::Unlock {
                lock: self.ident("lock name")?,
                line,
                col,
            }),
            "read" => {
                let addr = self.ident("address")?;
                self.expect_sym("->")?;
                let reg = self.ident("register")?;
                Ok(RawStmt::Read { addr, reg })
            }
            "write" => {
                let addr = self.ident("address")?;
                self.expect_sym("=")?;
                let val = self.valexpr()?;
                Ok(RawStmt::Write {
                    addr,
                    val,
                    line,
                    col,
                })
            }
            "if" => {
                let reg = self.ident("register")?;
                let cmp = match &self.peek().tok {
                    Tok::Sym("==") => Cmp::Eq,
                    Tok::Sym("!=") => Cmp::Ne,
                    Tok::Sym("<") => Cmp::Lt,
                    Tok::Sym("<=") => Cmp::Le,
                    Tok::Sym(">") => Cmp::Gt,
                    Tok::Sym(">=") => Cmp::Ge,
                    _ => return self.err("expected comparison"),
                };
                self.bump();
                let value = self.int()?;
                self.expect_sym("{")?;
                let then = self.block()?;
                self.expect_sym("}")?;
                let otherwise = if self.is_kw("else") {
                    self.bump();
                    self.expect_sym("{")?;
                    let b = self.block()?;
                    self.expect_sym("}")?;
                    b
                } else {
                    Vec::new()
                };
                Ok(RawStmt::If {
                    reg,
                    cmp,
                    value,
                    then,
                    otherwise,
                    line,
                    col,
                })
            }
            "loop" => {
                let count = self.count()?;
                self.expect_sym("{")?;
                let body = self.block()?;
                self.expect_sym("}")?;
                Ok(RawStmt::Loop { count, body })
            }
            "marker" => Ok(RawStmt::Marker(self.ident("marker name")?)),
            other => Err(Error::Syntax {
                line,
                col,
                msg: format!("unknown statement `{other}`"),
            }),
        }
    }

    fn operand(&mut self) -> Result<Operand> {
        match &self.peek().tok {
            Tok::Int(v) => {
                let v = *v;
                self.bump();
                Ok(Operand::Const(v))
            }
            Tok::Ident(r) => {
                let r = r.clone();
                self.bump();
                Ok(Operand::Reg(r))
            }
            _ => self.err("expected register or integer"),
        }
    }

    fn valexpr(&mut self) -> Result<ValExpr> {
        let a = self.operand()?;
        let op = if self.is_kw("add") {
            BinOp::Add
        } else if self.is_kw("sub") {
            BinOp::Sub
        } else {
            return Ok(match a {
                Operand::Const(k) => ValExpr::Const(k),
                reg => ValExpr::copy(reg),
            });
        };
        self.bump();
        let b = self.operand()?;
        Ok(ValExpr::Op { op, a, b })
    }
}

/// Locks must nest LIFO and every block must leave the held stack as it found it.
fn check_locks(block: &[RawStmt], held: &mut Vec<String>) -> Result<()> {
    let depth = held.len();
    for s in block {
        match s {
            RawStmt::Lock {
                lock, line, col, ..
            } => {
                if held.contains(lock) {
                    return Err(Error::UnbalancedLock {
                        line: *line,
                        col: *col,
                        msg: format!("`{lock}` acquired while already held"),
                    });
                }
                held.push(lock.clone());
            }
            RawStmt::Unlock { lock, line, col } => {
                if held.len() <= depth || held.last() != Some(lock) {
                    return Err(Error::UnbalancedLock {
                        line: *line,
                        col: *col,
                        msg: format!("`{lock}` is not the innermost lock held in this block"),
                    });
                }
                held.pop();
            }
            RawStmt::If {
                then, otherwise, ..
            } => {
                check_locks(then, held)?;
                check_locks(otherwise, held)?;
            }
            RawStmt::Loop { body, .. } => check_locks(body, held)?,
            _ => {}
        }
    }
    if held.len() != depth {
        let (line, col) = block
            .iter()
            .rev()
            .find_map(|s| match s {
                RawStmt::Lock { line, col, .. } => Some((*line, *col)),
                _ => None,
            })
            .unwrap_or((0, 0));
        return Err(Error::UnbalancedLock {
            line,
            col,
            msg: format!(
                "`{}` still held at end of block",
                held.last().expect("non-empty")
            ),
        });
    }
    Ok(())
}

/// Definite-assignment check: every register used is bound by an earlier read on all paths.
fn check_regs(block: &[RawStmt], bound: &mut HashSet<String>) -> Result<()> {
    for s in block {
        match s {
            RawStmt::Read { reg, .. } => {
                bound.insert(reg.clone());
            }
            RawStmt::Write { val, line, col, .. } => {
                if let Some(r) = val.regs().find(|r| !bound.contains(*r)) {
                    return Err(Error::UnboundRegister {
                        line: *line,
                        col: *col,
                        reg: r.to_string(),
                    });
                }
            }
            RawStmt::If {
                reg,
                then,
                otherwise,
                line,
                col,
                ..
            } => {
                if !bound.contains(reg) {
                    return Err(Error::UnboundRegister {
                        line: *line,
                        col: *col,
                        reg: reg.clone(),
                    });
                }
                let mut a = bound.clone();
                let mut b = bound.clone();
                check_regs(then, &mut a)?;
                check_regs(otherwise, &mut b)?;
                *bound = a.intersection(&b).cloned().collect();
            }
            RawStmt::Loop { count, body } => {
                let mut inner = bound.clone();
                check_regs(body, &mut inner)?;
                if *count > 0 {
                    *bound = inner;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Substitutes `$tid` and resolves lock sites to the line range up to the matching unlock.
fn expand(block: &[RawStmt], tid: ThreadId) -> Vec<Stmt> {
    let subst = |s: &str| s.replace("$tid", &tid.to_string());
    let mut out = Vec::with_capacity(block.len());
    for (i, s) in block.iter().enumerate() {
        out.push(match s {
            RawStmt::Compute(c) => Stmt::Compute(*c),
            RawStmt::Lock {
                lock,
                site_id,
                line,
                ..
            } => {
                let end_line = block[i + 1..]
                    .iter()
                    .find_map(|s| match s {
                        RawStmt::Unlock { lock: l, line, .. } if l == lock => Some(*line),
                        _ => None,
                    })
                    .unwrap_or(*line);
                Stmt::Lock {
                    lock: LockId::new(subst(lock)),
                    site: CodeRegion::new(*site_id, *line as u32, end_line as u32),
                }
            }
            RawStmt::Unlock { lock, .. } => Stmt::Unlock(LockId::new(subst(lock))),
            RawStmt::Read { addr, reg } => Stmt::Read {
                addr: subst(addr),
                reg: reg.clone(),
            },
            RawStmt::Write { addr, val, .. } => Stmt::Write {
                addr: subst(addr),
                val: val.clone(),
            },
            RawStmt::If {
                reg,
                cmp,
                value,
                then,
                otherwise,
                ..
            } => Stmt::If {
                reg: reg.clone(),
                cmp: *cmp,
                value: *value,
                then: expand(then, tid),
                otherwise: expand(otherwise, tid),
            },
            RawStmt::Loop { count, body } => Stmt::Loop {
                count: *count,
                body: expand(body, tid),
            },
            RawStmt::Marker(name) => Stmt::Marker(subst(name)),
        });
    }
    out
}

/// Lazily interprets one thread of a program, yielding trace events.
/// Branches are resolved against the thread's registers at the moment
/// the interpreter reaches them.
pub(crate) struct ThreadCursor<'p> {
    tid: ThreadId,
    frames: Vec<Frame<'p>>,
    started: bool,
    finished: bool,
}

struct Frame<'p> {
    block: &'p [Stmt],
    pc: usize,
    iters_left: u64,
}

impl<'p> ThreadCursor<'p> {
    pub(crate) fn new(tid: ThreadId, body: &'p [Stmt]) -> Self {
        ThreadCursor {
            tid,
            frames: vec![Frame {
                block: body,
                pc: 0,
                iters_left: 1,
            }],
            started: false,
            finished: false,
        }
    }

    pub(crate) fn next_event(&mut self, regs: &HashMap<Reg, i64>) -> Option<TraceEvent> {
        let tid = self.tid;
        if !self.started {
            self.started = true;
            return Some(TraceEvent::thread_start(tid));
        }
        loop {
            let Some(frame) = self.frames.last_mut() else {
                if self.finished {
                    return None;
                }
                self.finished = true;
                return Some(TraceEvent::thread_end(tid));
            };
            if frame.pc >= frame.block.len() {
                if frame.iters_left > 1 {
                    frame.iters_left -= 1;
                    frame.pc = 0;
                } else {
                    self.frames.pop();
                }
                continue;
            }
            let stmt = &frame.block[frame.pc];
            frame.pc += 1;
            match stmt {
                Stmt::Compute(c) => return Some(TraceEvent::compute(tid, *c)),
                Stmt::Lock { lock, site } => {
                    return Some(TraceEvent::lock_acq(tid, lock.clone(), *site))
                }
                Stmt::Unlock(lock) => return Some(TraceEvent::lock_rel(tid, lock.clone())),
                Stmt::Read { addr, reg } => {
                    return Some(TraceEvent::read(tid, addr.clone(), reg.clone()))
                }
                Stmt::Write { addr, val } => {
                    return Some(TraceEvent::write(tid, addr.clone(), val.clone()))
                }
                Stmt::Marker(name) => return Some(TraceEvent::marker(tid, name.clone())),
                Stmt::If {
                    reg,
                    cmp,
                    value,
                    then,
                    otherwise,
                } => {
                    let lhs = regs.get(reg).copied().unwrap_or(0);
                    let block = if cmp.holds(lhs, *value) {
                        then
                    } else {
                        otherwise
                    };
                    self.frames.push(Frame {
                        block,
                        pc: 0,
                        iters_left: 1,
                    });
                }
                Stmt::Loop { count, body } => {
                    if *count > 0 {
                        self.frames.push(Frame {
                            block: body,
                            pc: 0,
                            iters_left: *count,
                        });
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_compute() {
        let p = parse_workload("thread { compute 5 }").unwrap();
        assert_eq!(p.threads.len(), 1);
        assert_eq!(p.threads[0], vec![Stmt::Compute(5)]);
    }

    #[test]
    fn guarded_increment_inside_section() {
        let src = "thread { lock L @1; read flag -> r1; if r1 == 1 { read sv -> r2; write sv = r2 add 1 } ; unlock L }";
        let p = parse_workload(src).unwrap();
        let body = &p.threads[0];
        assert_eq!(body.len(), 4);
        assert!(matches!(body[0], Stmt::Lock { .. }));
        let Stmt::If {
            then, otherwise, ..
        } = &body[2]
        else {
            panic!("expected if");
        };
        assert!(otherwise.is_empty());
        assert_eq!(
            then[1],
            Stmt::Write {
                addr: "sv".into(),
                val: ValExpr::Op {
                    op: BinOp::Add,
                    a: Operand::Reg("r2".into()),
                    b: Operand::Const(1)
                }
            }
        );
        assert!(matches!(body[3], Stmt::Unlock(_)));
    }

    #[test]
    fn loop_of_three_sections_counts_three_acquisitions() {
        let p = parse_workload("thread { loop 3 { lock L @1; unlock L } }").unwrap();
        assert_eq!(p.static_lock_count(), 3);
        let mut cur = ThreadCursor::new(0, &p.threads[0]);
        let regs = HashMap::new();
        let mut acqs = 0;
        while let Some(ev) = cur.next_event(&regs) {
            if ev.kind == crate::trace::EventKind::LockAcq {
                acqs += 1;
            }
        }
        assert_eq!(acqs, 3);
    }

    #[test]
    fn derived_params_follow_overrides() {
        let src = "param threads = 2; param work = 12; param iters = work / threads * 2;\nparam gap = threads * 2 - 3 + 1;\nthread * threads { loop iters { compute 1 } }";
        let p = parse_workload(src).unwrap();
        assert_eq!(p.params["iters"], 12);
        assert_eq!(p.params["gap"], 2);
        let p = parse_workload_with(src, &BTreeMap::from([("threads".into(), 4)])).unwrap();
        assert_eq!(p.params["iters"], 6);
        assert!(parse_workload("param a = 1 / 0;").is_err());
        assert!(parse_workload("param a = b * 2;").is_err());
    }

    #[test]
    fn replication_and_params() {
        let src = "param threads = 2;\nthread * threads { read f_$tid -> r }";
        let p = parse_workload(src).unwrap();
        assert_eq!(p.threads.len(), 2);
        assert_eq!(
            p.threads[1][0],
            Stmt::Read {
                addr: "f_1".into(),
                reg: "r".into()
            }
        );
        let p = parse_workload_with(src, &BTreeMap::from([("threads".into(), 5)])).unwrap();
        assert_eq!(p.threads.len(), 5);
        assert!(parse_workload_with(src, &BTreeMap::from([("size".into(), 5)])).is_err());
    }

    #[test]
    fn site_spans_lock_to_unlock_lines() {
        let src = "thread {\n lock L @3\n compute 1\n unlock L\n}";
        let p = parse_workload(src).unwrap();
        assert_eq!(
            p.threads[0][0],
            Stmt::Lock {
                lock: "L".into(),
                site: CodeRegion::new(3, 2, 4)
            }
        );
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_workload("thread {\n  compute }") {
            Err(Error::Syntax {
                line: 2, col: 11, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            parse_workload("thread { jump 3 }").unwrap_err().code(),
            "SYNTAX_ERROR"
        );
    }

    #[test]
    fn unbalanced_locks_rejected() {
        for src in [
            "thread { lock L @1 }",
            "thread { unlock L }",
            "thread { lock A @1; lock B @1; unlock A; unlock B }",
            "thread { lock A @1; if r == 1 { unlock A } }",
            "thread { lock A @1; lock A @1; unlock A; unlock A }",
        ] {
            let err = parse_workload(src).unwrap_err();
            assert!(
                matches!(err.code(), "UNBALANCED_LOCK" | "UNBOUND_REGISTER"),
                "{src}: {err}"
            );
        }
        assert_eq!(
            parse_workload("thread { lock L @1 }").unwrap_err().code(),
            "UNBALANCED_LOCK"
        );
    }

    #[test]
    fn unbound_register_rejected() {
        assert_eq!(
            parse_workload("thread { write x = r add 1 }")
                .unwrap_err()
                .code(),
            "UNBOUND_REGISTER"
        );
        assert_eq!(
            parse_workload("thread { if q == 0 { compute 1 } }")
                .unwrap_err()
                .code(),
            "UNBOUND_REGISTER"
        );
        // bound on only one branch
        assert_eq!(
            parse_workload("thread { read a -> r; if r == 0 { read b -> q } ; write x = q }")
                .unwrap_err()
                .code(),
            "UNBOUND_REGISTER"
        );
        assert!(parse_workload("thread { read a -> r; write x = r sub 2 }").is_ok());
    }

    #[test]
    fn branches_follow_registers() {
        let p =
            parse_workload("thread { read f -> r; if r == 1 { compute 7 } else { compute 2 } }")
                .unwrap();
        let mut cur = ThreadCursor::new(0, &p.threads[0]);
        let mut regs = HashMap::new();
        let mut costs = Vec::new();
        while let Some(ev) = cur.next_event(&regs) {
            if ev.kind == crate::trace::EventKind::Read {
                regs.insert("r".to_string(), 1);
            }
            costs.push(ev.cost());
        }
        assert_eq!(costs, vec![0, 1, 7, 0]);
    }
}
