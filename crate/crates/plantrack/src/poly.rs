//! Sparse multivariate polynomial arithmetic over named real variables.
//!
//! Polynomials are immutable values over a shared, append-only variable
//! registry. Terms map graded-lexicographically ordered monomials to `f64`
//! coefficients; coefficients below [`PRUNE_EPS`] are dropped so that
//! canonical forms stay comparable.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

/// Coefficients with magnitude below this are pruned after every operation.
pub const PRUNE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("operands belong to different variable registries")]
    RegistryMismatch,
    #[error("variable `{0}` is already registered")]
    DuplicateVariable(String),
    #[error("no value assigned to variable `{0}`")]
    MissingAssignment(String),
}

/// Handle to a registered variable. Copyable; resolves to a name through the
/// registry it was created in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Variable {
    index: u32,
}

impl Variable {
    pub fn index(&self) -> usize {
        self.index as usize
    }

    /// Rebuilds a handle from a dense index; caller must ensure it is
    /// registered in the registry it will be used with.
    pub fn from_index(index: usize) -> Self {
        Self { index: index as u32 }
    }
}

#[derive(Debug, Default)]
struct RegistryInner {
    names: Vec<String>,
}

/// Append-only registry assigning dense indices to variable names.
///
/// Registration order fixes the monomial order for the lifetime of the
/// program, which keeps Gram indexing deterministic across runs.
#[derive(Debug, Default)]
pub struct VarRegistry {
    inner: Mutex<RegistryInner>,
}

impl VarRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Registers a new variable, failing if the name is taken.
    pub fn register(self: &Arc<Self>, name: &str) -> Result<Variable, PolyError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.names.iter().any(|n| n == name) {
            return Err(PolyError::DuplicateVariable(name.to_string()));
        }
        let index = inner.names.len() as u32;
        inner.names.push(name.to_string());
        Ok(Variable { index })
    }

    /// Registers several variables at once.
    pub fn register_all(self: &Arc<Self>, names: &[&str]) -> Result<Vec<Variable>, PolyError> {
        names.iter().map(|n| self.register(n)).collect()
    }

    pub fn name(&self, v: Variable) -> String {
        self.inner.lock().unwrap().names[v.index()].clone()
    }

    pub fn lookup(&self, name: &str) -> Option<Variable> {
        let inner = self.inner.lock().unwrap();
        inner
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| Variable { index: i as u32 })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variables(&self) -> Vec<Variable> {
        (0..self.len() as u32).map(|index| Variable { index }).collect()
    }
}

fn same_registry(a: &Arc<VarRegistry>, b: &Arc<VarRegistry>) -> bool {
    Arc::ptr_eq(a, b)
}

/// Exponent vector stored densely up to the highest variable with a nonzero
/// power (trailing zeros trimmed, so equal monomials compare equal regardless
/// of when they were built).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Monomial {
    exps: Vec<u16>,
}

impl Monomial {
    pub fn one() -> Self {
        Self { exps: Vec::new() }
    }

    pub fn var(v: Variable) -> Self {
        Self::var_pow(v, 1)
    }

    pub fn var_pow(v: Variable, pow: u16) -> Self {
        if pow == 0 {
            return Self::one();
        }
        let mut exps = vec![0u16; v.index() + 1];
        exps[v.index()] = pow;
        Self { exps }
    }

    pub fn from_exps(exps: Vec<u16>) -> Self {
        let mut m = Self { exps };
        m.trim();
        m
    }

    fn trim(&mut self) {
        while self.exps.last() == Some(&0) {
            self.exps.pop();
        }
    }

    pub fn degree(&self) -> u32 {
        self.exps.iter().map(|&e| e as u32).sum()
    }

    pub fn exp(&self, v: Variable) -> u16 {
        self.exps.get(v.index()).copied().unwrap_or(0)
    }

    pub fn exps(&self) -> &[u16] {
        &self.exps
    }

    pub fn is_one(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.exps.len().max(other.exps.len());
        let mut exps = vec![0u16; n];
        for (i, e) in exps.iter_mut().enumerate() {
            *e = self.exp(Variable { index: i as u32 }) + other.exp(Variable { index: i as u32 });
        }
        Self::from_exps(exps)
    }

    /// Variables with nonzero exponent.
    pub fn support(&self) -> Vec<Variable> {
        self.exps
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(i, _)| Variable { index: i as u32 })
            .collect()
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Monomial {
    /// Graded lexicographic: total degree first, then lexicographic with
    /// earlier-registered variables more significant.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.degree().cmp(&other.degree()).then_with(|| {
            let n = self.exps.len().max(other.exps.len());
            for i in 0..n {
                let a = self.exps.get(i).copied().unwrap_or(0);
                let b = other.exps.get(i).copied().unwrap_or(0);
                match a.cmp(&b) {
                    std::cmp::Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            std::cmp::Ordering::Equal
        })
    }
}

/// Sparse multivariate polynomial with real coefficients.
#[derive(Debug, Clone)]
pub struct Poly {
    reg: Arc<VarRegistry>,
    terms: BTreeMap<Monomial, f64>,
}

impl Poly {
    pub fn zero(reg: &Arc<VarRegistry>) -> Self {
        Self { reg: reg.clone(), terms: BTreeMap::new() }
    }

    pub fn constant(reg: &Arc<VarRegistry>, c: f64) -> Self {
        let mut p = Self::zero(reg);
        if c.abs() >= PRUNE_EPS {
            p.terms.insert(Monomial::one(), c);
        }
        p
    }

    pub fn var(reg: &Arc<VarRegistry>, v: Variable) -> Self {
        let mut p = Self::zero(reg);
        p.terms.insert(Monomial::var(v), 1.0);
        p
    }

    pub fn from_terms(reg: &Arc<VarRegistry>, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut p = Self::zero(reg);
        for (m, c) in terms {
            *p.terms.entry(m).or_insert(0.0) += c;
        }
        p.prune();
        p
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() >= PRUNE_EPS && c.is_finite());
    }

    pub fn registry(&self) -> &Arc<VarRegistry> {
        &self.reg
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    /// Highest power of `v` across all terms.
    pub fn degree_in(&self, v: Variable) -> u16 {
        self.terms.keys().map(|m| m.exp(v)).max().unwrap_or(0)
    }

    /// Variables that actually appear.
    pub fn support(&self) -> Vec<Variable> {
        let mut seen = std::collections::BTreeSet::new();
        for m in self.terms.keys() {
            seen.extend(m.support());
        }
        seen.into_iter().collect()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0f64, |a, c| a.max(c.abs()))
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self, PolyError> {
        if !same_registry(&self.reg, &other.reg) {
            return Err(PolyError::RegistryMismatch);
        }
        let mut out = self.clone();
        for (m, c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        out.prune();
        Ok(out)
    }

    pub fn checked_mul(&self, other: &Self) -> Result<Self, PolyError> {
        if !same_registry(&self.reg, &other.reg) {
            return Err(PolyError::RegistryMismatch);
        }
        let mut out = Self::zero(&self.reg);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                *out.terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        out.prune();
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= s;
        }
        out.prune();
        out
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.checked_add(&other.neg()).expect("registry mismatch")
    }

    /// `self^k` by repeated multiplication.
    pub fn pow(&self, k: u16) -> Self {
        let mut out = Poly::constant(&self.reg, 1.0);
        for _ in 0..k {
            out = out.checked_mul(self).expect("same registry");
        }
        out
    }

    /// Formal partial derivative with respect to `v`.
    pub fn differentiate(&self, v: Variable) -> Self {
        let mut out = Self::zero(&self.reg);
        for (m, c) in &self.terms {
            let e = m.exp(v);
            if e == 0 {
                continue;
            }
            let mut exps = m.exps.clone();
            if exps.len() <= v.index() {
                exps.resize(v.index() + 1, 0);
            }
            exps[v.index()] = e - 1;
            *out.terms.entry(Monomial::from_exps(exps)).or_insert(0.0) += c * e as f64;
        }
        out.prune();
        out
    }

    /// Evaluates at a full assignment, Horner-style: terms are grouped by the
    /// lowest-index variable present and factored out recursively.
    pub fn evaluate(&self, point: &BTreeMap<Variable, f64>) -> Result<f64, PolyError> {
        for v in self.support() {
            if !point.contains_key(&v) {
                return Err(PolyError::MissingAssignment(self.reg.name(v)));
            }
        }
        let terms: Vec<(&Monomial, f64)> = self.terms.iter().map(|(m, &c)| (m, c)).collect();
        Ok(horner_eval(&terms, 0, point))
    }

    /// Evaluates against a dense slice indexed by variable id (must cover the
    /// registry). Panics on out-of-range access; used on hot paths where the
    /// assignment is known complete.
    pub fn eval_slice(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (m, c) in &self.terms {
            let mut t = *c;
            for (i, &e) in m.exps.iter().enumerate() {
                if e > 0 {
                    t *= values[i].powi(e as i32);
                }
            }
            acc += t;
        }
        acc
    }

    /// Simultaneous substitution; unbound variables pass through.
    pub fn substitute(&self, bindings: &BTreeMap<Variable, Poly>) -> Self {
        for p in bindings.values() {
            assert!(same_registry(&self.reg, &p.reg), "binding from a different registry");
        }
        let mut out = Self::zero(&self.reg);
        for (m, c) in &self.terms {
            let mut term = Poly::constant(&self.reg, *c);
            for (i, &e) in m.exps.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let v = Variable { index: i as u32 };
                let factor = match bindings.get(&v) {
                    Some(p) => p.pow(e),
                    None => {
                        let mut q = Self::zero(&self.reg);
                        q.terms.insert(Monomial::var_pow(v, e), 1.0);
                        q
                    }
                };
                term = term.checked_mul(&factor).expect("same registry");
            }
            out = out.checked_add(&term).expect("same registry");
        }
        out
    }

    /// L-infinity distance between coefficient vectors.
    pub fn coeff_distance(&self, other: &Self) -> f64 {
        let mut d = 0.0f64;
        for (m, c) in &self.terms {
            d = d.max((c - other.coeff(m)).abs());
        }
        for (m, c) in &other.terms {
            d = d.max((c - self.coeff(m)).abs());
        }
        d
    }
}

fn horner_eval(terms: &[(&Monomial, f64)], from_var: usize, point: &BTreeMap<Variable, f64>) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    // Lowest variable index >= from_var appearing in any term.
    let mut pivot: Option<usize> = None;
    for (m, _) in terms {
        for (i, &e) in m.exps.iter().enumerate().skip(from_var) {
            if e > 0 {
                pivot = Some(pivot.map_or(i, |p| p.min(i)));
            }
        }
    }
    let Some(pv) = pivot else {
        // All remaining terms are constants (possibly several merged).
        return terms.iter().map(|(_, c)| *c).sum();
    };
    let x = point[&Variable { index: pv as u32 }];
    // Group terms by exponent of the pivot variable.
    let mut groups: BTreeMap<u16, Vec<(&Monomial, f64)>> = BTreeMap::new();
    for (m, c) in terms {
        groups.entry(m.exp(Variable { index: pv as u32 })).or_default().push((m, *c));
    }
    // Horner over descending exponents of x_pv.
    let mut acc = 0.0;
    let mut prev_exp: Option<u16> = None;
    for (&e, group) in groups.iter().rev() {
        if let Some(pe) = prev_exp {
            acc *= x.powi((pe - e) as i32);
        }
        acc += horner_eval(group, pv + 1, point);
        prev_exp = Some(e);
    }
    if let Some(pe) = prev_exp {
        acc *= x.powi(pe as i32);
    }
    acc
}

impl PartialEq for Poly {
    fn eq(&self, other: &Self) -> bool {
        same_registry(&self.reg, &other.reg) && self.terms == other.terms
    }
}

impl fmt::Display for Poly {
    /// Sorted `coeff * v1^a1*...*vn^an` rendering, leading term first.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            let (sign, mag) = if *c < 0.0 { ("-", -c) } else { ("+", *c) };
            if first {
                if sign == "-" {
                    write!(f, "-")?;
                }
                first = false;
            } else {
                write!(f, " {} ", sign)?;
            }
            write!(f, "{}", mag)?;
            for (i, &e) in m.exps.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let name = self.reg.name(Variable { index: i as u32 });
                if e == 1 {
                    write!(f, "*{}", name)?;
                } else {
                    write!(f, "*{}^{}", name, e)?;
                }
            }
        }
        Ok(())
    }
}

impl std::ops::Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        self.checked_add(rhs).expect("registry mismatch")
    }
}

impl std::ops::Sub for &Poly {
    type Output = Poly;
    fn sub(self, rhs: &Poly) -> Poly {
        self.sub(rhs)
    }
}

impl std::ops::Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        self.checked_mul(rhs).expect("registry mismatch")
    }
}

/// Ordered monomial list over a variable subset, graded-lex ascending and
/// always containing the constant monomial (unless filters exclude it).
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    pub vars: Vec<Variable>,
    pub monomials: Vec<Monomial>,
}

impl MonomialBasis {
    /// All monomials in `vars` of total degree at most `degree`.
    pub fn total_degree(vars: &[Variable], degree: u32) -> Self {
        Self::filtered(vars, degree, |_| true)
    }

    /// Monomials of total degree at most `degree` passing `keep`.
    pub fn filtered(vars: &[Variable], degree: u32, keep: impl Fn(&Monomial) -> bool) -> Self {
        let mut monomials = Vec::new();
        let mut current = vec![0u16; vars.len()];
        enumerate_rec(vars, degree, 0, &mut current, &mut monomials, &keep);
        monomials.sort();
        monomials.dedup();
        Self { vars: vars.to_vec(), monomials }
    }

    /// Restricts to even total degree.
    pub fn even_only(vars: &[Variable], degree: u32) -> Self {
        Self::filtered(vars, degree, |m| m.degree() % 2 == 0)
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }
}

fn enumerate_rec(
    vars: &[Variable],
    budget: u32,
    pos: usize,
    current: &mut Vec<u16>,
    out: &mut Vec<Monomial>,
    keep: &impl Fn(&Monomial) -> bool,
) {
    if pos == vars.len() {
        let mut exps = Vec::new();
        for (v, &e) in vars.iter().zip(current.iter()) {
            if e > 0 {
                if exps.len() <= v.index() {
                    exps.resize(v.index() + 1, 0);
                }
                exps[v.index()] = e;
            }
        }
        let m = Monomial::from_exps(exps);
        if keep(&m) {
            out.push(m);
        }
        return;
    }
    for e in 0..=budget {
        current[pos] = e as u16;
        enumerate_rec(vars, budget - e, pos + 1, current, out, keep);
    }
    current[pos] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Arc<VarRegistry>, Variable, Variable) {
        let reg = VarRegistry::new();
        let x = reg.register("x").unwrap();
        let y = reg.register("y").unwrap();
        (reg, x, y)
    }

    #[test]
    fn add_cancellation_and_identity() {
        let (reg, x, _) = setup();
        let xp1 = Poly::from_terms(&reg, [(Monomial::var(x), 1.0), (Monomial::one(), 1.0)]);
        let xm1 = Poly::from_terms(&reg, [(Monomial::var(x), 1.0), (Monomial::one(), -1.0)]);
        let sum = &xp1 + &xm1;
        assert_eq!(sum, Poly::from_terms(&reg, [(Monomial::var(x), 2.0)]));

        let zero = Poly::zero(&reg);
        assert_eq!(&xp1 + &zero, xp1);
    }

    #[test]
    fn add_merges_like_terms() {
        let (reg, x, y) = setup();
        let p = Poly::from_terms(&reg, [(Monomial::var_pow(x, 2), 1.0), (Monomial::var(y), 1.0)]);
        let q = Poly::from_terms(&reg, [(Monomial::var(y), 1.0)]);
        let s = &p + &q;
        assert_eq!(s.coeff(&Monomial::var_pow(x, 2)), 1.0);
        assert_eq!(s.coeff(&Monomial::var(y)), 2.0);
        assert_eq!(s.num_terms(), 2);
    }

    #[test]
    fn mul_difference_of_squares() {
        let (reg, x, y) = setup();
        let xpy = &Poly::var(&reg, x) + &Poly::var(&reg, y);
        let xmy = Poly::var(&reg, x).sub(&Poly::var(&reg, y));
        let prod = &xpy * &xmy;
        let expect = Poly::from_terms(
            &reg,
            [(Monomial::var_pow(x, 2), 1.0), (Monomial::var_pow(y, 2), -1.0)],
        );
        assert_eq!(prod, expect);

        let one = Poly::constant(&reg, 1.0);
        assert_eq!(&prod * &one, prod);
    }

    #[test]
    fn mul_monomials() {
        let (reg, x, y) = setup();
        let a = Poly::var(&reg, x).scale(2.0);
        let b = Poly::from_terms(&reg, [(Monomial::var(x).mul(&Monomial::var(y)), 3.0)]);
        let prod = &a * &b;
        assert_eq!(prod.coeff(&Monomial::var_pow(x, 2).mul(&Monomial::var(y))), 6.0);
        assert_eq!(prod.num_terms(), 1);
    }

    #[test]
    fn registry_mismatch_is_an_error() {
        let (reg_a, x, _) = setup();
        let reg_b = VarRegistry::new();
        let z = reg_b.register("z").unwrap();
        let p = Poly::var(&reg_a, x);
        let q = Poly::var(&reg_b, z);
        assert!(matches!(p.checked_add(&q), Err(PolyError::RegistryMismatch)));
        assert!(matches!(p.checked_mul(&q), Err(PolyError::RegistryMismatch)));
    }

    #[test]
    fn differentiate_powers() {
        let (reg, x, y) = setup();
        let x3 = Poly::from_terms(&reg, [(Monomial::var_pow(x, 3), 1.0)]);
        let d = x3.differentiate(x);
        assert_eq!(d, Poly::from_terms(&reg, [(Monomial::var_pow(x, 2), 3.0)]));

        let sq = Poly::from_terms(
            &reg,
            [(Monomial::var_pow(x, 2), 1.0), (Monomial::var_pow(y, 2), 1.0)],
        );
        assert_eq!(sq.differentiate(x), Poly::from_terms(&reg, [(Monomial::var(x), 2.0)]));

        // t-independent polynomial differentiates to zero in t.
        let t = reg.register("t").unwrap();
        assert!(sq.differentiate(t).is_zero());
    }

    #[test]
    fn evaluate_examples() {
        let (reg, x, y) = setup();
        let p = Poly::from_terms(&reg, [(Monomial::var_pow(x, 2), 1.0), (Monomial::var(y), 1.0)]);
        let mut pt = BTreeMap::new();
        pt.insert(x, 2.0);
        pt.insert(y, 1.0);
        assert_eq!(p.evaluate(&pt).unwrap(), 5.0);

        assert_eq!(Poly::zero(&reg).evaluate(&BTreeMap::new()).unwrap(), 0.0);

        // e' P e with P = I at e = (1, 1).
        let q = Poly::from_terms(
            &reg,
            [(Monomial::var_pow(x, 2), 1.0), (Monomial::var_pow(y, 2), 1.0)],
        );
        let mut pt2 = BTreeMap::new();
        pt2.insert(x, 1.0);
        pt2.insert(y, 1.0);
        assert_eq!(q.evaluate(&pt2).unwrap(), 2.0);

        let missing = p.evaluate(&BTreeMap::new());
        assert!(matches!(missing, Err(PolyError::MissingAssignment(_))));
    }

    #[test]
    fn substitute_examples() {
        let reg = VarRegistry::new();
        let x = reg.register("x").unwrap();
        let e = reg.register("e").unwrap();
        let s = reg.register("s").unwrap();

        // x^2 with x -> e + s gives e^2 + 2 e s + s^2.
        let x2 = Poly::from_terms(&reg, [(Monomial::var_pow(x, 2), 1.0)]);
        let mut b = BTreeMap::new();
        b.insert(x, &Poly::var(&reg, e) + &Poly::var(&reg, s));
        let sub = x2.substitute(&b);
        assert_eq!(sub.coeff(&Monomial::var_pow(e, 2)), 1.0);
        assert_eq!(sub.coeff(&Monomial::var(e).mul(&Monomial::var(s))), 2.0);
        assert_eq!(sub.coeff(&Monomial::var_pow(s, 2)), 1.0);

        // Empty bindings pass through.
        assert_eq!(x2.substitute(&BTreeMap::new()), x2);
    }

    #[test]
    fn substitute_velocity_error() {
        // v - v_hat with v -> e2 + u_hat, v_hat -> u_hat collapses to e2,
        // mirroring the single/double integrator comparison map.
        let reg = VarRegistry::new();
        let v = reg.register("v").unwrap();
        let vh = reg.register("v_hat").unwrap();
        let e2 = reg.register("e2").unwrap();
        let uh = reg.register("u_hat").unwrap();

        let expr = Poly::var(&reg, v).sub(&Poly::var(&reg, vh));
        let mut b = BTreeMap::new();
        b.insert(v, &Poly::var(&reg, e2) + &Poly::var(&reg, uh));
        b.insert(vh, Poly::var(&reg, uh));
        assert_eq!(expr.substitute(&b), Poly::var(&reg, e2));
    }

    #[test]
    fn basis_sizes() {
        let reg = VarRegistry::new();
        let vars = reg.register_all(&["e1", "e2"]).unwrap();
        let basis = MonomialBasis::total_degree(&vars, 2);
        assert_eq!(basis.len(), 6); // 1, e1, e2, e1^2, e1 e2, e2^2
        assert!(basis.monomials[0].is_one());

        let basis0 = MonomialBasis::total_degree(&vars, 0);
        assert_eq!(basis0.len(), 1);

        let reg2 = VarRegistry::new();
        let nine = reg2
            .register_all(&["t", "e1", "e2", "e3", "e4", "e5", "e6", "u1", "u2"])
            .unwrap();
        // C(9 + 2, 2) with n = 9 vars, degree 2.
        assert_eq!(MonomialBasis::total_degree(&nine[..7], 2).len(), 36);
        assert_eq!(MonomialBasis::total_degree(&nine, 2).len(), 55);
    }

    #[test]
    fn grlex_order_is_graded() {
        let (reg, x, y) = setup();
        let _ = reg;
        let one = Monomial::one();
        let mx = Monomial::var(x);
        let my = Monomial::var(y);
        let mxy = mx.mul(&my);
        let mx2 = Monomial::var_pow(x, 2);
        assert!(one < mx);
        assert!(my < mx2);
        assert!(mxy < mx2 || mx2 < mxy); // strict order between distinct monomials
    }

    fn random_poly(reg: &Arc<VarRegistry>, vars: &[Variable], rng: &mut impl rand::Rng) -> Poly {
        let basis = MonomialBasis::total_degree(vars, 3);
        let mut terms: Vec<(Monomial, f64)> = Vec::new();
        for m in &basis.monomials {
            if rng.gen_bool(0.6) {
                terms.push((m.clone(), rng.gen_range(-10.0..10.0)));
            }
        }
        Poly::from_terms(reg, terms)
    }

    #[test]
    fn ring_axioms_randomized() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let reg = VarRegistry::new();
        let vars = reg.register_all(&["a", "b", "c"]).unwrap();
        for _ in 0..30 {
            let p = random_poly(&reg, &vars, &mut rng);
            let q = random_poly(&reg, &vars, &mut rng);
            let r = random_poly(&reg, &vars, &mut rng);
            assert!((&p + &q).coeff_distance(&(&q + &p)) < 1e-9);
            assert!((&p * &q).coeff_distance(&(&q * &p)) < 1e-9);
            let assoc_l = &(&p * &q) * &r;
            let assoc_r = &p * &(&q * &r);
            assert!(assoc_l.coeff_distance(&assoc_r) < 1e-6);
            let dist_l = &p * &(&q + &r);
            let dist_r = &(&p * &q) + &(&p * &r);
            assert!(dist_l.coeff_distance(&dist_r) < 1e-6);
        }
    }

    #[test]
    fn derivative_chain_rule_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let reg = VarRegistry::new();
        let vars = reg.register_all(&["a", "b"]).unwrap();
        let sub_var = vars[0];
        for _ in 0..5 {
            let p = random_poly(&reg, &vars, &mut rng);
            let bind = random_poly(&reg, &[vars[1]], &mut rng);
            let mut bindings = BTreeMap::new();
            bindings.insert(sub_var, bind.clone());
            // d/db of p(bind(b), b) via substitute-then-differentiate vs finite differences.
            let composed = p.substitute(&bindings);
            let dcomposed = composed.differentiate(vars[1]);
            for _ in 0..20 {
                let b_val: f64 = rng.gen_range(-1.0..1.0);
                let h = 1e-6;
                let eval = |bv: f64| {
                    let mut pt = BTreeMap::new();
                    pt.insert(vars[1], bv);
                    pt.insert(vars[0], 0.0); // composed has no `a` left, harmless
                    composed.evaluate(&pt).unwrap()
                };
                let fd = (eval(b_val + h) - eval(b_val - h)) / (2.0 * h);
                let mut pt = BTreeMap::new();
                pt.insert(vars[1], b_val);
                pt.insert(vars[0], 0.0);
                let an = dcomposed.evaluate(&pt).unwrap();
                let scale = an.abs().max(1.0);
                assert!((fd - an).abs() / scale < 1e-5, "fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn evaluate_matches_term_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let reg = VarRegistry::new();
        let vars = reg.register_all(&["a", "b", "c"]).unwrap();
        for _ in 0..50 {
            let basis = MonomialBasis::total_degree(&vars, 6);
            let mut terms: Vec<(Monomial, f64)> = Vec::new();
            for m in &basis.monomials {
                if rng.gen_bool(0.3) {
                    terms.push((m.clone(), rng.gen_range(-10.0..10.0)));
                }
            }
            let p = Poly::from_terms(&reg, terms.clone());
            let mut pt = BTreeMap::new();
            let mut dense = vec![0.0f64; 3];
            for (i, v) in vars.iter().enumerate() {
                let val = rng.gen_range(-1.0..1.0);
                pt.insert(*v, val);
                dense[i] = val;
            }
            let naive: f64 = terms
                .iter()
                .map(|(m, c)| {
                    let mut t = *c;
                    for (i, &e) in m.exps().iter().enumerate() {
                        t *= dense[i].powi(e as i32);
                    }
                    t
                })
                .sum();
            assert!((p.evaluate(&pt).unwrap() - naive).abs() < 1e-12);
            assert!((p.eval_slice(&dense) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn display_is_sorted_and_stable() {
        let (reg, x, y) = setup();
        let p = Poly::from_terms(
            &reg,
            [
                (Monomial::one(), -1.0),
                (Monomial::var_pow(x, 2).mul(&Monomial::var(y)), 1.5),
                (Monomial::var(y), 2.0),
            ],
        );
        assert_eq!(format!("{}", p), "1.5*x^2*y + 2*y - 1");
        assert_eq!(format!("{}", Poly::zero(&reg)), "0");
    }
}
