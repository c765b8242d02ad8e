//! Declarative SOS programs and their reduction to conic form.
//!
//! A program owns scalar decision handles. Decision polynomials expose their
//! coefficients as affine forms over handles ([`LinPoly`]); SOS constraints
//! tie an affine-in-handles polynomial expression, plus optional fresh
//! Gram-parameterized SOS multipliers times fixed factors, to a PSD Gram
//! certificate by coefficient matching:
//!
//! ```text
//!     expr(handles) + sum_k (z_k' Q_k z_k) * p_k  =  z' G z,   G, Q_k psd
//! ```
//!
//! Gram bases are pruned by a Newton-polytope bounding box (halved per-variable
//! and total degrees of the expression support).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::conic::{self, svec_index, ConeBlock, ConicProblem, ConicSolution, SolveStatus};
use crate::poly::{Monomial, MonomialBasis, Poly, VarRegistry, Variable};

const COEFF_PRUNE: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum SosError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("cannot recover certificates from a solve with status {0:?}")]
    NotOptimal(SolveStatus),
    #[error(transparent)]
    Conic(#[from] conic::ConicError),
}

/// Affine form `constant + sum coef_i * handle_i`, handles sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffForm {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl AffForm {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: Vec::new() }
    }

    pub fn handle(h: usize) -> Self {
        Self { constant: 0.0, terms: vec![(h, 1.0)] }
    }

    pub fn is_zero(&self) -> bool {
        self.constant.abs() < COEFF_PRUNE && self.terms.is_empty()
    }

    pub fn add_scaled(&mut self, other: &AffForm, s: f64) {
        self.constant += other.constant * s;
        for &(h, c) in &other.terms {
            self.add_term(h, c * s);
        }
    }

    pub fn add_term(&mut self, h: usize, c: f64) {
        match self.terms.binary_search_by_key(&h, |t| t.0) {
            Ok(i) => {
                self.terms[i].1 += c;
                if self.terms[i].1.abs() < COEFF_PRUNE {
                    self.terms.remove(i);
                }
            }
            Err(i) => {
                if c.abs() >= COEFF_PRUNE {
                    self.terms.insert(i, (h, c));
                }
            }
        }
    }

    fn scaled(&self, s: f64) -> Self {
        let mut out = Self::constant(self.constant * s);
        for &(h, c) in &self.terms {
            if (c * s).abs() >= COEFF_PRUNE {
                out.terms.push((h, c * s));
            }
        }
        out
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(h, c)| c * values[h]).sum::<f64>()
    }
}

/// Polynomial whose coefficients are affine forms over decision handles.
#[derive(Debug, Clone)]
pub struct LinPoly {
    reg: Arc<VarRegistry>,
    terms: BTreeMap<Monomial, AffForm>,
}

impl LinPoly {
    pub fn zero(reg: &Arc<VarRegistry>) -> Self {
        Self { reg: reg.clone(), terms: BTreeMap::new() }
    }

    pub fn from_poly(p: &Poly) -> Self {
        let mut out = Self::zero(p.registry());
        for (m, c) in p.terms() {
            out.terms.insert(m.clone(), AffForm::constant(c));
        }
        out
    }

    pub fn registry(&self) -> &Arc<VarRegistry> {
        &self.reg
    }

    pub fn add(&self, other: &LinPoly) -> LinPoly {
        let mut out = self.clone();
        for (m, f) in &other.terms {
            out.entry(m).add_scaled(f, 1.0);
        }
        out.prune();
        out
    }

    pub fn sub(&self, other: &LinPoly) -> LinPoly {
        let mut out = self.clone();
        for (m, f) in &other.terms {
            out.entry(m).add_scaled(f, -1.0);
        }
        out.prune();
        out
    }

    pub fn add_poly(&self, p: &Poly) -> LinPoly {
        let mut out = self.clone();
        for (m, c) in p.terms() {
            out.entry(m).constant += c;
        }
        out.prune();
        out
    }

    pub fn add_scalar(&self, c: f64) -> LinPoly {
        let mut out = self.clone();
        out.entry(&Monomial::one()).constant += c;
        out.prune();
        out
    }

    pub fn add_form(&self, m: &Monomial, f: &AffForm) -> LinPoly {
        let mut out = self.clone();
        out.entry(m).add_scaled(f, 1.0);
        out.prune();
        out
    }

    pub fn scale(&self, s: f64) -> LinPoly {
        let mut out = Self::zero(&self.reg);
        for (m, f) in &self.terms {
            out.terms.insert(m.clone(), f.scaled(s));
        }
        out.prune();
        out
    }

    /// Product with a fixed (constant-coefficient) polynomial.
    pub fn mul_poly(&self, p: &Poly) -> LinPoly {
        let mut out = Self::zero(&self.reg);
        for (m, f) in &self.terms {
            for (pm, pc) in p.terms() {
                out.entry(&m.mul(pm)).add_scaled(f, pc);
            }
        }
        out.prune();
        out
    }

    pub fn differentiate(&self, v: Variable) -> LinPoly {
        let mut out = Self::zero(&self.reg);
        for (m, f) in &self.terms {
            let e = m.exp(v);
            if e == 0 {
                continue;
            }
            let mut exps = m.exps().to_vec();
            if exps.len() <= v.index() {
                exps.resize(v.index() + 1, 0);
            }
            exps[v.index()] = e - 1;
            out.entry(&Monomial::from_exps(exps)).add_scaled(f, e as f64);
        }
        out.prune();
        out
    }

    /// Simultaneous substitution of fixed polynomials for variables.
    pub fn substitute(&self, bindings: &BTreeMap<Variable, Poly>) -> LinPoly {
        let mut out = Self::zero(&self.reg);
        for (m, f) in &self.terms {
            let mut expansion = Poly::constant(&self.reg, 1.0);
            for (i, &e) in m.exps().iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let v = Variable::from_index(i);
                let factor = match bindings.get(&v) {
                    Some(p) => p.pow(e),
                    None => Poly::from_terms(&self.reg, [(Monomial::var_pow(v, e), 1.0)]),
                };
                expansion = expansion.checked_mul(&factor).expect("same registry");
            }
            for (em, ec) in expansion.terms() {
                out.entry(em).add_scaled(f, ec);
            }
        }
        out.prune();
        out
    }

    /// Instantiates the polynomial at concrete handle values.
    pub fn eval_handles(&self, values: &[f64]) -> Poly {
        Poly::from_terms(&self.reg, self.terms.iter().map(|(m, f)| (m.clone(), f.eval(values))))
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &AffForm)> {
        self.terms.iter()
    }

    pub fn support(&self) -> Vec<Monomial> {
        self.terms.keys().cloned().collect()
    }

    fn entry(&mut self, m: &Monomial) -> &mut AffForm {
        self.terms.entry(m.clone()).or_default()
    }

    fn prune(&mut self) {
        self.terms.retain(|_, f| !f.is_zero());
    }
}

/// A declared decision polynomial: contiguous handles, one per basis monomial.
#[derive(Debug, Clone)]
pub struct PolyDecision {
    pub name: String,
    pub first_handle: usize,
    pub basis: MonomialBasis,
}

impl PolyDecision {
    pub fn num_handles(&self) -> usize {
        self.basis.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// expr (+ multipliers) must be a sum of squares.
    Sos,
    /// expr must vanish coefficient-wise.
    Zero,
}

/// Fresh Gram-parameterized SOS multiplier `s = z' Q z` contributing
/// `s * factor` to the host constraint expression.
#[derive(Debug, Clone)]
pub struct SosMultiplier {
    pub label: String,
    pub basis: Vec<Monomial>,
    pub factor: Poly,
}

#[derive(Debug, Clone)]
pub struct SosConstraint {
    pub name: String,
    pub expr: LinPoly,
    pub kind: ConstraintKind,
    pub multipliers: Vec<SosMultiplier>,
    /// Optional explicit Gram basis override.
    pub gram_basis: Option<Vec<Monomial>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultKind {
    Sos,
    Free,
}

/// Declarative SOS feasibility/optimization problem.
pub struct SosProgram {
    reg: Arc<VarRegistry>,
    n_handles: usize,
    pub decisions: Vec<PolyDecision>,
    pub constraints: Vec<SosConstraint>,
    /// Minimized affine objective.
    pub objective: AffForm,
}

impl SosProgram {
    pub fn new(reg: &Arc<VarRegistry>) -> Self {
        Self {
            reg: reg.clone(),
            n_handles: 0,
            decisions: Vec::new(),
            constraints: Vec::new(),
            objective: AffForm::constant(0.0),
        }
    }

    pub fn registry(&self) -> &Arc<VarRegistry> {
        &self.reg
    }

    pub fn num_handles(&self) -> usize {
        self.n_handles
    }

    /// Declares a decision polynomial over `vars` up to total `degree`;
    /// `symmetric_even` restricts the basis to even total degree.
    pub fn declare_poly(
        &mut self,
        name: &str,
        vars: &[Variable],
        degree: u32,
        symmetric_even: bool,
    ) -> Result<PolyDecision, SosError> {
        if vars.is_empty() && degree > 0 {
            return Err(SosError::Structural(format!(
                "decision `{name}`: empty variable list with degree {degree}"
            )));
        }
        let basis = if symmetric_even {
            MonomialBasis::even_only(vars, degree)
        } else {
            MonomialBasis::total_degree(vars, degree)
        };
        self.declare_poly_with_basis(name, basis)
    }

    /// Declares a decision polynomial on an explicit monomial basis.
    pub fn declare_poly_with_basis(
        &mut self,
        name: &str,
        basis: MonomialBasis,
    ) -> Result<PolyDecision, SosError> {
        if self.decisions.iter().any(|d| d.name == name) {
            return Err(SosError::Structural(format!("duplicate decision name `{name}`")));
        }
        let d = PolyDecision { name: name.to_string(), first_handle: self.n_handles, basis };
        self.n_handles += d.num_handles();
        self.decisions.push(d.clone());
        Ok(d)
    }

    /// Declares a scalar decision (a degree-0 polynomial); returns its handle.
    pub fn declare_scalar(&mut self, name: &str) -> Result<usize, SosError> {
        let d = self.declare_poly(name, &[], 0, false)?;
        Ok(d.first_handle)
    }

    /// The affine-in-handles polynomial spanned by a decision.
    pub fn poly_of(&self, d: &PolyDecision) -> LinPoly {
        let mut out = LinPoly::zero(&self.reg);
        for (k, m) in d.basis.monomials.iter().enumerate() {
            out.terms.insert(m.clone(), AffForm::handle(d.first_handle + k));
        }
        out
    }

    pub fn minimize(&mut self, objective: AffForm) {
        self.objective = objective;
    }

    /// Appends `expr in SOS` with an automatic Gram basis; returns its index.
    pub fn assert_sos(&mut self, name: &str, expr: LinPoly) -> usize {
        self.constraints.push(SosConstraint {
            name: name.to_string(),
            expr,
            kind: ConstraintKind::Sos,
            multipliers: Vec::new(),
            gram_basis: None,
        });
        self.constraints.len() - 1
    }

    /// Appends `expr == 0` (coefficient-wise).
    pub fn assert_zero(&mut self, name: &str, expr: LinPoly) -> usize {
        self.constraints.push(SosConstraint {
            name: name.to_string(),
            expr,
            kind: ConstraintKind::Zero,
            multipliers: Vec::new(),
            gram_basis: None,
        });
        self.constraints.len() - 1
    }

    /// Attaches a fresh SOS multiplier of the given degree over `vars`,
    /// contributing `s * factor` to constraint `ci`.
    pub fn add_sos_multiplier(
        &mut self,
        ci: usize,
        label: &str,
        vars: &[Variable],
        degree: u32,
        factor: &Poly,
    ) {
        let basis = MonomialBasis::total_degree(vars, degree / 2);
        self.constraints[ci].multipliers.push(SosMultiplier {
            label: label.to_string(),
            basis: basis.monomials,
            factor: factor.clone(),
        });
    }

    /// Generalized S-procedure: certifies `consequent >= 0` on the
    /// intersection of the antecedent sets `{p_i <= 0}` by appending
    /// `consequent + sum_i s_i * p_i in SOS` with fresh multipliers.
    ///
    /// `Sos` antecedents get Gram multipliers; `Free` antecedents (equality
    /// style, used for level-set boundaries) get free decision polynomials.
    /// Returns the constraint index.
    pub fn s_procedure_implication(
        &mut self,
        name: &str,
        antecedents: &[(MultKind, Poly)],
        consequent: LinPoly,
        mult_degree: u32,
    ) -> Result<usize, SosError> {
        let mut vars: BTreeSet<Variable> = BTreeSet::new();
        for m in consequent.support() {
            vars.extend(m.support());
        }
        for (_, p) in antecedents {
            vars.extend(p.support());
        }
        let vars: Vec<Variable> = vars.into_iter().collect();

        let mut expr = consequent;
        let mut frees = Vec::new();
        for (k, (kind, p)) in antecedents.iter().enumerate() {
            if *kind == MultKind::Free {
                let l = self.declare_poly(&format!("{name}__l{k}"), &vars, mult_degree, false)?;
                frees.push((l, p.clone()));
            }
        }
        for (l, p) in frees {
            expr = expr.add(&self.poly_of(&l).mul_poly(&p));
        }
        let ci = self.assert_sos(name, expr);
        for (k, (kind, p)) in antecedents.iter().enumerate() {
            if *kind == MultKind::Sos {
                self.add_sos_multiplier(ci, &format!("{name}__s{k}"), &vars, mult_degree, p);
            }
        }
        Ok(ci)
    }

    /// Reduces the program to conic form plus a recovery map.
    pub fn compile(&self) -> Result<CompiledSos, SosError> {
        let mut blocks = vec![ConeBlock::Free(self.n_handles)];
        let mut col = self.n_handles;
        let mut constraints = Vec::new();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut b = Vec::new();

        for con in self.constraints.iter() {
            // Support: expression monomials plus every multiplier product.
            let mut support: BTreeSet<Monomial> = con.expr.support().into_iter().collect();
            for mult in &con.multipliers {
                for (i, zi) in mult.basis.iter().enumerate() {
                    for zj in mult.basis.iter().skip(i) {
                        let zz = zi.mul(zj);
                        for (fm, _) in mult.factor.terms() {
                            support.insert(zz.mul(fm));
                        }
                    }
                }
            }

            let gram_basis = match con.kind {
                ConstraintKind::Zero => {
                    if !con.multipliers.is_empty() {
                        return Err(SosError::Structural(format!(
                            "constraint `{}`: equality constraints cannot carry multipliers",
                            con.name
                        )));
                    }
                    Vec::new()
                }
                ConstraintKind::Sos => match &con.gram_basis {
                    Some(basis) => {
                        let max_half = basis.iter().map(|m| m.degree()).max().unwrap_or(0);
                        let need = support.iter().map(|m| m.degree()).max().unwrap_or(0);
                        if need > 2 * max_half {
                            return Err(SosError::Structural(format!(
                                "constraint `{}`: expression degree {} exceeds 2x gram degree {}",
                                con.name, need, max_half
                            )));
                        }
                        basis.clone()
                    }
                    None => newton_box_basis(&support),
                },
            };

            // Doubled Gram products extend the row support.
            for (i, zi) in gram_basis.iter().enumerate() {
                for zj in gram_basis.iter().skip(i) {
                    support.insert(zi.mul(zj));
                }
            }

            // Assign PSD blocks: main Gram then multipliers.
            let gram = if con.kind == ConstraintKind::Sos {
                let side = gram_basis.len().max(1);
                blocks.push(ConeBlock::Psd(side));
                let off = col;
                col += conic::svec_len(side);
                Some(GramRecovery { col_offset: off, basis: gram_basis.clone() })
            } else {
                None
            };
            let mut mult_rec = Vec::new();
            for mult in &con.multipliers {
                let side = mult.basis.len().max(1);
                blocks.push(ConeBlock::Psd(side));
                mult_rec.push(MultRecovery {
                    label: mult.label.clone(),
                    col_offset: col,
                    basis: mult.basis.clone(),
                    factor: mult.factor.clone(),
                });
                col += conic::svec_len(side);
            }

            // Column contributions per monomial.
            let mut contrib: BTreeMap<Monomial, Vec<(usize, f64)>> = BTreeMap::new();
            let sqrt2 = std::f64::consts::SQRT_2;
            if let Some(g) = &gram {
                let side = g.basis.len();
                for i in 0..side {
                    for j in i..side {
                        let m = g.basis[i].mul(&g.basis[j]);
                        let scale = if i == j { 1.0 } else { sqrt2 };
                        // Certificate enters with -1: expr + mult - z'Gz = 0.
                        contrib
                            .entry(m)
                            .or_default()
                            .push((g.col_offset + svec_index(side, j, i), -scale));
                    }
                }
            }
            for (mk, mult) in con.multipliers.iter().enumerate() {
                let side = mult.basis.len();
                let off = mult_rec[mk].col_offset;
                for i in 0..side {
                    for j in i..side {
                        let zz = mult.basis[i].mul(&mult.basis[j]);
                        let scale = if i == j { 1.0 } else { sqrt2 };
                        for (fm, fc) in mult.factor.terms() {
                            contrib
                                .entry(zz.mul(fm))
                                .or_default()
                                .push((off + svec_index(side, j, i), scale * fc));
                        }
                    }
                }
            }

            let row_start = rows.len();
            for m in &support {
                let mut row: BTreeMap<usize, f64> = BTreeMap::new();
                let mut rhs = 0.0;
                if let Some(f) = con.expr.terms.get(m) {
                    rhs -= f.constant;
                    for &(h, c) in &f.terms {
                        *row.entry(h).or_insert(0.0) += c;
                    }
                }
                if let Some(entries) = contrib.get(m) {
                    for &(cc, v) in entries {
                        *row.entry(cc).or_insert(0.0) += v;
                    }
                }
                row.retain(|_, v| v.abs() > COEFF_PRUNE);
                rows.push(row.into_iter().collect());
                b.push(rhs);
            }

            constraints.push(ConstraintRecovery {
                name: con.name.clone(),
                kind: con.kind,
                gram,
                multipliers: mult_rec,
                row_range: (row_start, rows.len()),
            });
        }

        let mut c = vec![0.0; col];
        for &(h, v) in &self.objective.terms {
            c[h] = v;
        }
        let problem = ConicProblem { blocks, rows, b, c };
        problem.validate()?;
        Ok(CompiledSos {
            problem,
            map: RecoveryMap {
                reg: self.reg.clone(),
                n_handles: self.n_handles,
                objective_constant: self.objective.constant,
                decisions: self
                    .decisions
                    .iter()
                    .map(|d| (d.name.clone(), d.first_handle, d.basis.monomials.clone()))
                    .collect(),
                constraints,
            },
        })
    }
}

/// Gram basis from the halved bounding box of the support Newton polytope.
fn newton_box_basis(support: &BTreeSet<Monomial>) -> Vec<Monomial> {
    let mut vars: BTreeSet<Variable> = BTreeSet::new();
    for m in support {
        vars.extend(m.support());
    }
    let vars: Vec<Variable> = vars.into_iter().collect();
    let total_max = support.iter().map(|m| m.degree()).max().unwrap_or(0);
    let mut var_max: BTreeMap<Variable, u16> = BTreeMap::new();
    for m in support {
        for v in &vars {
            let e = m.exp(*v);
            let entry = var_max.entry(*v).or_insert(0);
            *entry = (*entry).max(e);
        }
    }
    let half_total = total_max / 2;
    let basis = MonomialBasis::filtered(&vars, half_total, |m| {
        vars.iter().all(|v| m.exp(*v) <= var_max[v] / 2)
    });
    basis.monomials
}

#[derive(Debug, Clone)]
pub struct GramRecovery {
    pub col_offset: usize,
    pub basis: Vec<Monomial>,
}

#[derive(Debug, Clone)]
pub struct MultRecovery {
    pub label: String,
    pub col_offset: usize,
    pub basis: Vec<Monomial>,
    pub factor: Poly,
}

#[derive(Debug, Clone)]
pub struct ConstraintRecovery {
    pub name: String,
    pub kind: ConstraintKind,
    pub gram: Option<GramRecovery>,
    pub multipliers: Vec<MultRecovery>,
    pub row_range: (usize, usize),
}

/// Compiled problem plus the bookkeeping needed to reconstruct certificates.
pub struct CompiledSos {
    pub problem: ConicProblem,
    pub map: RecoveryMap,
}

pub struct RecoveryMap {
    reg: Arc<VarRegistry>,
    pub n_handles: usize,
    pub objective_constant: f64,
    pub decisions: Vec<(String, usize, Vec<Monomial>)>,
    pub constraints: Vec<ConstraintRecovery>,
}

/// Certificate for one constraint: Gram matrix, multiplier polynomials, and
/// the coefficient-matching residual of the recovered identity.
#[derive(Debug, Clone)]
pub struct ConstraintCert {
    pub name: String,
    pub gram: Option<DMatrix<f64>>,
    pub gram_basis: Vec<Monomial>,
    pub multipliers: Vec<(String, Poly, DMatrix<f64>)>,
    pub residual: f64,
    pub min_gram_eig: f64,
}

#[derive(Debug, Clone)]
pub struct Certificates {
    pub handle_values: Vec<f64>,
    pub decisions: BTreeMap<String, Poly>,
    pub constraints: Vec<ConstraintCert>,
    pub objective: f64,
    pub max_residual: f64,
    pub min_gram_eig: f64,
}

impl Certificates {
    pub fn decision(&self, name: &str) -> Option<&Poly> {
        self.decisions.get(name)
    }

    pub fn multiplier(&self, constraint: &str, label: &str) -> Option<&Poly> {
        self.constraints
            .iter()
            .find(|c| c.name == constraint)?
            .multipliers
            .iter()
            .find(|(l, _, _)| l == label)
            .map(|(_, p, _)| p)
    }
}

impl RecoveryMap {
    /// Rebuilds decision polynomials and Gram certificates from an optimal
    /// solution, re-verifying every constraint identity.
    pub fn recover(
        &self,
        program: &SosProgram,
        solution: &ConicSolution,
    ) -> Result<Certificates, SosError> {
        if !solution.is_optimal() {
            return Err(SosError::NotOptimal(solution.status));
        }
        self.recover_lenient(program, solution)
    }

    /// Like [`RecoveryMap::recover`] but accepts iteration-capped solves;
    /// callers must gate on the returned residuals, which measure the actual
    /// certificate identity independent of the solver status.
    pub fn recover_lenient(
        &self,
        program: &SosProgram,
        solution: &ConicSolution,
    ) -> Result<Certificates, SosError> {
        if solution.x.len() < self.n_handles {
            return Err(SosError::NotOptimal(solution.status));
        }
        let values: Vec<f64> = solution.x[..self.n_handles].to_vec();
        let mut decisions = BTreeMap::new();
        for (name, first, basis) in &self.decisions {
            let p = Poly::from_terms(
                &self.reg,
                basis.iter().enumerate().map(|(k, m)| (m.clone(), values[first + k])),
            );
            decisions.insert(name.clone(), p);
        }

        let mut constraints = Vec::new();
        let mut max_residual = 0.0f64;
        let mut min_gram_eig = f64::INFINITY;
        for (rec, con) in self.constraints.iter().zip(&program.constraints) {
            let mut assembled = con.expr.eval_handles(&values);
            let mut multipliers = Vec::new();
            let mut local_min_eig = f64::INFINITY;
            for mr in &rec.multipliers {
                let side = mr.basis.len();
                let q = extract_gram(&solution.x, mr.col_offset, side);
                let s_poly = gram_poly(&self.reg, &mr.basis, &q);
                assembled = assembled
                    .checked_add(&s_poly.checked_mul(&mr.factor).expect("registry"))
                    .expect("registry");
                local_min_eig = local_min_eig.min(crate::linalg::min_eigenvalue(&q));
                multipliers.push((mr.label.clone(), s_poly, q));
            }
            // Residuals are measured relative to the constraint's coefficient
            // scale; the identities involve products with the level gamma and
            // model coefficients that can sit far from unit magnitude.
            let input_scale = con
                .expr
                .terms()
                .map(|(_, f)| {
                    f.constant.abs()
                        + f.terms.iter().map(|&(h, c)| c.abs() * (1.0 + values[h].abs())).sum::<f64>()
                })
                .fold(1.0f64, f64::max);
            let (gram, gram_basis, residual) = match (&rec.gram, rec.kind) {
                (Some(g), ConstraintKind::Sos) => {
                    let side = g.basis.len();
                    let q = extract_gram(&solution.x, g.col_offset, side);
                    let cert = gram_poly(&self.reg, &g.basis, &q);
                    local_min_eig = local_min_eig.min(crate::linalg::min_eigenvalue(&q));
                    let scale = input_scale.max(cert.max_abs_coeff());
                    let resid = assembled.sub(&cert).max_abs_coeff() / scale;
                    (Some(q), g.basis.clone(), resid)
                }
                _ => (None, Vec::new(), assembled.max_abs_coeff() / input_scale),
            };
            max_residual = max_residual.max(residual);
            min_gram_eig = min_gram_eig.min(local_min_eig);
            constraints.push(ConstraintCert {
                name: rec.name.clone(),
                gram,
                gram_basis,
                multipliers,
                residual,
                min_gram_eig: if local_min_eig.is_finite() { local_min_eig } else { 0.0 },
            });
        }

        Ok(Certificates {
            handle_values: values,
            decisions,
            constraints,
            objective: solution.objective + self.objective_constant,
            max_residual,
            min_gram_eig: if min_gram_eig.is_finite() { min_gram_eig } else { 0.0 },
        })
    }
}

fn extract_gram(x: &[f64], offset: usize, side: usize) -> DMatrix<f64> {
    crate::conic::svec_to_mat(side, &x[offset..offset + conic::svec_len(side)])
}

pub fn gram_poly(reg: &Arc<VarRegistry>, basis: &[Monomial], q: &DMatrix<f64>) -> Poly {
    let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            *terms.entry(basis[i].mul(&basis[j])).or_insert(0.0) += q[(i, j)];
        }
    }
    Poly::from_terms(reg, terms)
}

/// Human-readable program dump: constraints, degrees, multiplier inventory.
pub fn dump_program(p: &SosProgram) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    writeln!(s, "decisions: {}", p.decisions.len()).unwrap();
    for d in &p.decisions {
        writeln!(s, "  {} ({} coeffs)", d.name, d.num_handles()).unwrap();
    }
    writeln!(s, "constraints: {}", p.constraints.len()).unwrap();
    for c in &p.constraints {
        let deg = c.expr.support().iter().map(|m| m.degree()).max().unwrap_or(0);
        let kind = match c.kind {
            ConstraintKind::Sos => "sos",
            ConstraintKind::Zero => "zero",
        };
        writeln!(s, "  {} [{}] expr-degree {} multipliers {}", c.name, kind, deg, c.multipliers.len())
            .unwrap();
        for m in &c.multipliers {
            writeln!(s, "    {} gram-side {} factor-degree {}", m.label, m.basis.len(), m.factor.degree())
                .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::SolverSettings;
    use rand::{Rng, SeedableRng};

    fn solve_program(p: &SosProgram) -> (CompiledSos, crate::conic::ConicSolution) {
        let compiled = p.compile().unwrap();
        let sol = crate::conic::solve(&compiled.problem, &SolverSettings::default()).unwrap();
        (compiled, sol)
    }

    #[test]
    fn declare_poly_handle_counts() {
        let reg = VarRegistry::new();
        let e = reg.register_all(&["e1", "e2"]).unwrap();
        let mut prog = SosProgram::new(&reg);
        let d = prog.declare_poly("V", &e, 2, false).unwrap();
        assert_eq!(d.num_handles(), 6);
        let c = prog.declare_poly("gamma", &[], 0, false).unwrap();
        assert_eq!(c.num_handles(), 1);
        assert!(prog.declare_poly("bad", &[], 2, false).is_err());

        let reg2 = VarRegistry::new();
        let nine = reg2
            .register_all(&["t", "e1", "e2", "e3", "e4", "e5", "e6", "u1", "u2"])
            .unwrap();
        let mut prog2 = SosProgram::new(&reg2);
        let d2 = prog2.declare_poly("V", &nine[..7], 2, false).unwrap();
        assert_eq!(d2.num_handles(), 36);
    }

    #[test]
    fn assert_sos_simple_feasibility() {
        let reg = VarRegistry::new();
        let x = reg.register("x").unwrap();
        // x^2 + 1 compiles to one psd block of side 2 and 3 equality rows.
        let mut prog0 = SosProgram::new(&reg);
        let x2p1 = Poly::from_terms(&reg, [(Monomial::var_pow(x, 2), 1.0), (Monomial::one(), 1.0)]);
        prog0.assert_sos("c0", LinPoly::from_poly(&x2p1));
        let compiled0 = prog0.compile().unwrap();
        assert_eq!(compiled0.problem.blocks[1], ConeBlock::Psd(2));
        assert_eq!(compiled0.problem.num_rows(), 3);

        // x^2 alone: feasible, recovered Gram approx [[0,0],[0,1]] on (1, x).
        let mut prog = SosProgram::new(&reg);
        let x2 = Poly::from_terms(&reg, [(Monomial::var_pow(x, 2), 1.0)]);
        prog.assert_sos("c0", LinPoly::from_poly(&x2));
        let (compiled, sol) = solve_program(&prog);
        assert!(sol.is_optimal());
        let certs = compiled.map.recover(&prog, &sol).unwrap();
        let g = certs.constraints[0].gram.as_ref().unwrap();
        assert!(g[(0, 0)].abs() < 1e-6);
        assert!((g[(1, 1)] - 1.0).abs() < 1e-5);
        assert!(certs.max_residual < 1e-7);
        assert!(certs.min_gram_eig > -1e-7);
    }

    #[test]
    fn assert_sos_of_negative_constant_is_infeasible() {
        let reg = VarRegistry::new();
        let _x = reg.register("x").unwrap();
        let mut prog = SosProgram::new(&reg);
        prog.assert_sos("c0", LinPoly::from_poly(&Poly::constant(&reg, -1.0)));
        let compiled = prog.compile().unwrap();
        let sol = crate::conic::solve(&compiled.problem, &SolverSettings::default()).unwrap();
        assert_ne!(sol.status, SolveStatus::Optimal);
    }

    #[test]
    fn perfect_square_gram_eigenvalues() {
        let reg = VarRegistry::new();
        let vars = reg.register_all(&["x", "y"]).unwrap();
        // x^2 - 2xy + y^2 = (x - y)^2: eigenvalues of the Gram include 2 and
        // the rest vanish.
        let p = Poly::from_terms(
            &reg,
            [
                (Monomial::var_pow(vars[0], 2), 1.0),
                (Monomial::var(vars[0]).mul(&Monomial::var(vars[1])), -2.0),
                (Monomial::var_pow(vars[1], 2), 1.0),
            ],
        );
        let mut prog = SosProgram::new(&reg);
        prog.assert_sos("c0", LinPoly::from_poly(&p));
        let (compiled, sol) = solve_program(&prog);
        assert!(sol.is_optimal());
        let certs = compiled.map.recover(&prog, &sol).unwrap();
        let g = certs.constraints[0].gram.as_ref().unwrap();
        let mut eigs: Vec<f64> = g.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(eigs[0] > -1e-7);
        assert!((eigs.last().unwrap() - 2.0).abs() < 1e-5);
        assert!(certs.max_residual < 1e-7);
    }

    #[test]
    fn s_procedure_interval_containment() {
        // {e^2 <= 1} subset {e^2 <= 4}: interval oracle gives margin 3 at the
        // antecedent boundary; the reverse containment fails at e = 2.
        let reg = VarRegistry::new();
        let e = reg.register("e").unwrap();
        let e2 = Poly::from_terms(&reg, [(Monomial::var_pow(e, 2), 1.0)]);
        let consequent =
            LinPoly::from_poly(&e2.neg().checked_add(&Poly::constant(&reg, 4.0)).unwrap());
        let antecedent = e2.checked_add(&Poly::constant(&reg, -1.0)).unwrap();
        let mut prog = SosProgram::new(&reg);
        prog.s_procedure_implication("cont", &[(MultKind::Sos, antecedent)], consequent, 2)
            .unwrap();
        let (compiled, sol) = solve_program(&prog);
        assert!(sol.is_optimal(), "containment should be certified");
        let certs = compiled.map.recover(&prog, &sol).unwrap();
        assert!(certs.max_residual < 1e-6);

        let consequent_r =
            LinPoly::from_poly(&e2.neg().checked_add(&Poly::constant(&reg, 1.0)).unwrap());
        let antecedent_r = e2.checked_add(&Poly::constant(&reg, -4.0)).unwrap();
        let mut prog_r = SosProgram::new(&reg);
        prog_r
            .s_procedure_implication("cont", &[(MultKind::Sos, antecedent_r)], consequent_r, 2)
            .unwrap();
        let compiled_r = prog_r.compile().unwrap();
        let sol_r = crate::conic::solve(&compiled_r.problem, &SolverSettings::default()).unwrap();
        assert_ne!(sol_r.status, SolveStatus::Optimal);

        // Empty antecedent list degenerates to a plain SOS constraint.
        let mut prog_p = SosProgram::new(&reg);
        let ci = prog_p.s_procedure_implication("plain", &[], LinPoly::from_poly(&e2), 2).unwrap();
        assert!(prog_p.constraints[ci].multipliers.is_empty());
        let (_, sol_p) = solve_program(&prog_p);
        assert!(sol_p.is_optimal());
    }

    #[test]
    fn empty_program_is_trivially_optimal() {
        let reg = VarRegistry::new();
        let prog = SosProgram::new(&reg);
        let compiled = prog.compile().unwrap();
        let sol = crate::conic::solve(&compiled.problem, &SolverSettings::default()).unwrap();
        assert!(sol.is_optimal());
    }

    #[test]
    fn scalar_objective_reaches_analytic_optimum() {
        // min g s.t. (g - 1) - 2x + x^2 in SOS; optimum g = 2 via (x - 1)^2.
        let reg = VarRegistry::new();
        let x = reg.register("x").unwrap();
        let mut prog = SosProgram::new(&reg);
        let g = prog.declare_scalar("g").unwrap();
        let expr = LinPoly::zero(&reg).add_form(&Monomial::one(), &AffForm::handle(g)).add_poly(
            &Poly::from_terms(
                &reg,
                [
                    (Monomial::one(), -1.0),
                    (Monomial::var(x), -2.0),
                    (Monomial::var_pow(x, 2), 1.0),
                ],
            ),
        );
        prog.assert_sos("c0", expr);
        prog.minimize(AffForm::handle(g));
        let (compiled, sol) = solve_program(&prog);
        assert!(sol.is_optimal());
        assert!((sol.objective - 2.0).abs() < 1e-6, "objective {}", sol.objective);
        let certs = compiled.map.recover(&prog, &sol).unwrap();
        assert!((certs.handle_values[g] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn round_trip_random_sos_polynomials() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let reg = VarRegistry::new();
        let vars = reg.register_all(&["a", "b", "c"]).unwrap();
        for trial in 0..10 {
            let deg = rng.gen_range(1..=2);
            let nv = rng.gen_range(1..=3);
            let basis = MonomialBasis::total_degree(&vars[..nv], deg);
            let n = basis.len();
            let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = &g * g.transpose();
            let target = gram_poly(&reg, &basis.monomials, &q);
            let mut prog = SosProgram::new(&reg);
            prog.assert_sos("c0", LinPoly::from_poly(&target));
            let (compiled, sol) = solve_program(&prog);
            assert!(sol.is_optimal(), "trial {trial}");
            let certs = compiled.map.recover(&prog, &sol).unwrap();
            let recovered = gram_poly(
                &reg,
                &certs.constraints[0].gram_basis,
                certs.constraints[0].gram.as_ref().unwrap(),
            );
            assert!(
                recovered.coeff_distance(&target) < 1e-8,
                "trial {trial}: distance {}",
                recovered.coeff_distance(&target)
            );
            assert!(certs.min_gram_eig > -1e-7);
        }
    }

    #[test]
    fn sampled_soundness_of_recovered_certificates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let reg = VarRegistry::new();
        let vars = reg.register_all(&["a", "b"]).unwrap();
        let basis = MonomialBasis::total_degree(&vars, 2);
        let n = basis.len();
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = &g * g.transpose();
        let target = gram_poly(&reg, &basis.monomials, &q);
        let mut prog = SosProgram::new(&reg);
        prog.assert_sos("c0", LinPoly::from_poly(&target));
        let (compiled, sol) = solve_program(&prog);
        let certs = compiled.map.recover(&prog, &sol).unwrap();
        let rec = gram_poly(
            &reg,
            &certs.constraints[0].gram_basis,
            certs.constraints[0].gram.as_ref().unwrap(),
        );
        for _ in 0..10_000 {
            let pt = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            assert!(rec.eval_slice(&pt) >= -1e-6);
        }
    }

    #[test]
    fn linpoly_differentiate_and_substitute() {
        let reg = VarRegistry::new();
        let t = reg.register("t").unwrap();
        let e = reg.register("e").unwrap();
        let mut prog = SosProgram::new(&reg);
        let d = prog.declare_poly("V", &[t, e], 2, false).unwrap();
        let v = prog.poly_of(&d);
        let dv = v.differentiate(e);
        // With V = t*e + e^2: dV/de = t + 2e; V(0, e) = e^2.
        let mut values = vec![0.0; prog.num_handles()];
        for (k, m) in d.basis.monomials.iter().enumerate() {
            if *m == Monomial::var(t).mul(&Monomial::var(e)) || *m == Monomial::var_pow(e, 2) {
                values[d.first_handle + k] = 1.0;
            }
        }
        let got = dv.eval_handles(&values);
        let want = Poly::from_terms(&reg, [(Monomial::var(t), 1.0), (Monomial::var(e), 2.0)]);
        assert_eq!(got, want);

        let mut bind = BTreeMap::new();
        bind.insert(t, Poly::zero(&reg));
        let v0 = v.substitute(&bind).eval_handles(&values);
        assert_eq!(v0, Poly::from_terms(&reg, [(Monomial::var_pow(e, 2), 1.0)]));
    }

    #[test]
    fn program_dump_lists_inventory() {
        let reg = VarRegistry::new();
        let x = reg.register("x").unwrap();
        let mut prog = SosProgram::new(&reg);
        let _ = prog.declare_poly("V", &[x], 2, false).unwrap();
        let ci = prog.assert_sos("decrease", LinPoly::from_poly(&Poly::var(&reg, x)));
        prog.add_sos_multiplier(ci, "s0", &[x], 2, &Poly::constant(&reg, 1.0));
        let dump = dump_program(&prog);
        assert!(dump.contains("decrease"));
        assert!(dump.contains("s0"));
    }
}
