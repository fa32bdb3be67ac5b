//! Finite groups given by explicit multiplication tables.
//!
//! Elements are dense integer indices with the identity at index 0. The
//! composition convention is left-to-right: `mul(a, b)` means "apply `a`,
//! then `b`", so for permutation groups `(a·b)(x) = b(a(x))`.
//!
//! Groups come from three sources: built-ins (`Zn`, `S3`, `D4`, `Q8`), a
//! plain-text table format (see [`parse_group`]), or a raw table via
//! [`FiniteGroup::from_table`]. All constructors validate the group axioms;
//! associativity is checked exhaustively up to order 64 and on at least
//! `10·n²` sampled triples beyond that.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Index of a group element in `[0, order)`. Index 0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(pub(crate) u16);

impl GroupElement {
    /// The identity element of any group.
    pub const IDENTITY: GroupElement = GroupElement(0);

    /// Dense index of this element.
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_identity(self) -> bool {
        self.0 == 0
    }
}

/// Errors from parsing or validating a finite group.
#[derive(Debug, Error)]
pub enum GroupError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("closure violated: mul({a}, {b}) = {val} out of range for order {order}")]
    Closure { a: usize, b: usize, val: usize, order: usize },
    #[error("identity violated: index 0 is not a two-sided identity against element {a}")]
    Identity { a: usize },
    #[error("inverse violated: element {a} has no unique two-sided inverse")]
    Inverse { a: usize },
    #[error("associativity violated at triple ({a}, {b}, {c})")]
    Associativity { a: usize, b: usize, c: usize },
    #[error("unknown builtin group `{0}` (expected Zn, S3, D4 or Q8)")]
    UnknownBuiltin(String),
    #[error("builtin Zn requires a parameter n >= 1")]
    MissingParameter,
    #[error("element index {index} out of range for group of order {order}")]
    ElementRange { index: usize, order: usize },
    #[error("group order {0} exceeds the supported maximum {max}", max = u16::MAX)]
    OrderTooLarge(usize),
}

/// A finite group with precomputed inverse table and conjugacy classes.
#[derive(Clone, Debug)]
pub struct FiniteGroup {
    name: String,
    order: usize,
    /// Row-major table: `mul[a * order + b] = a · b`.
    mul: Vec<u16>,
    inv: Vec<u16>,
    labels: Vec<String>,
    /// Element indices grouped by conjugacy class; class 0 is `{identity}`.
    classes: Vec<Vec<GroupElement>>,
    /// Class index of each element.
    class_of: Vec<usize>,
}

impl FiniteGroup {
    /// Builds and validates a group from a multiplication table.
    ///
    /// `table[a][b]` must hold the index of `a · b` (left-to-right). Labels
    /// are optional; missing labels fall back to decimal indices.
    pub fn from_table(
        name: impl Into<String>,
        labels: Option<Vec<String>>,
        table: Vec<Vec<usize>>,
    ) -> Result<Self, GroupError> {
        let order = table.len();
        if order > u16::MAX as usize {
            return Err(GroupError::OrderTooLarge(order));
        }
        let mut mul = vec![0u16; order * order];
        for (a, row) in table.iter().enumerate() {
            for (b, &val) in row.iter().enumerate() {
                if val >= order {
                    return Err(GroupError::Closure { a, b, val, order });
                }
                mul[a * order + b] = val as u16;
            }
        }
        let labels =
            labels.unwrap_or_else(|| (0..order).map(|i| i.to_string()).collect::<Vec<_>>());
        let mut group = FiniteGroup {
            name: name.into(),
            order,
            mul,
            inv: Vec::new(),
            labels,
            classes: Vec::new(),
            class_of: Vec::new(),
        };
        group.validate()?;
        group.inv = group.compute_inverses()?;
        let (classes, class_of) = group.compute_classes();
        group.classes = classes;
        group.class_of = class_of;
        Ok(group)
    }

    /// Axiom checks: identity row/column, closure (done at ingest) and
    /// associativity (exhaustive up to order 64, sampled beyond).
    fn validate(&self) -> Result<(), GroupError> {
        let n = self.order;
        for a in 0..n {
            if self.mul[a] as usize != a || self.mul[a * n] as usize != a {
                return Err(GroupError::Identity { a });
            }
        }
        if n <= 64 {
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        self.check_triple(a, b, c)?;
                    }
                }
            }
        } else {
            // Deterministic sampling: validation must not depend on caller state.
            let mut rng = ChaCha12Rng::seed_from_u64(0x9d1b_5f04_a2c3_77e1);
            let samples = 10 * n * n;
            for _ in 0..samples {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                let c = rng.gen_range(0..n);
                self.check_triple(a, b, c)?;
            }
        }
        Ok(())
    }

    fn check_triple(&self, a: usize, b: usize, c: usize) -> Result<(), GroupError> {
        let n = self.order;
        let ab = self.mul[a * n + b] as usize;
        let bc = self.mul[b * n + c] as usize;
        if self.mul[ab * n + c] != self.mul[a * n + bc] {
            return Err(GroupError::Associativity { a, b, c });
        }
        Ok(())
    }

    fn compute_inverses(&self) -> Result<Vec<u16>, GroupError> {
        let n = self.order;
        let mut inv = vec![u16::MAX; n];
        for a in 0..n {
            let mut found = None;
            for b in 0..n {
                if self.mul[a * n + b] == 0 && self.mul[b * n + a] == 0 {
                    if found.is_some() {
                        return Err(GroupError::Inverse { a });
                    }
                    found = Some(b as u16);
                }
            }
            inv[a] = found.ok_or(GroupError::Inverse { a })?;
        }
        Ok(inv)
    }

    fn compute_classes(&self) -> (Vec<Vec<GroupElement>>, Vec<usize>) {
        let n = self.order;
        let mut class_of = vec![usize::MAX; n];
        let mut classes: Vec<Vec<GroupElement>> = Vec::new();
        for a in 0..n {
            if class_of[a] != usize::MAX {
                continue;
            }
            let id = classes.len();
            let mut members = Vec::new();
            for h in 0..n {
                let c = self.conj_idx(a, h);
                if class_of[c] == usize::MAX {
                    class_of[c] = id;
                    members.push(GroupElement(c as u16));
                }
            }
            members.sort();
            classes.push(members);
        }
        (classes, class_of)
    }

    fn conj_idx(&self, g: usize, h: usize) -> usize {
        // h g h⁻¹
        let n = self.order;
        let hg = self.mul[h * n + g] as usize;
        self.mul[hg * n + self.inv[h] as usize] as usize
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement::IDENTITY
    }

    /// Checked conversion from a raw index.
    pub fn element(&self, index: usize) -> Result<GroupElement, GroupError> {
        if index < self.order {
            Ok(GroupElement(index as u16))
        } else {
            Err(GroupError::ElementRange { index, order: self.order })
        }
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElement> + '_ {
        (0..self.order).map(|i| GroupElement(i as u16))
    }

    pub fn label(&self, g: GroupElement) -> &str {
        &self.labels[g.index()]
    }

    /// `a · b` in left-to-right convention (apply `a`, then `b`).
    #[inline]
    pub fn mul(&self, a: GroupElement, b: GroupElement) -> GroupElement {
        GroupElement(self.mul[a.index() * self.order + b.index()])
    }

    #[inline]
    pub fn inv(&self, a: GroupElement) -> GroupElement {
        GroupElement(self.inv[a.index()])
    }

    /// `h g h⁻¹`.
    pub fn conj(&self, g: GroupElement, h: GroupElement) -> GroupElement {
        GroupElement(self.conj_idx(g.index(), h.index()) as u16)
    }

    /// `g h g⁻¹ h⁻¹`.
    pub fn commutator(&self, g: GroupElement, h: GroupElement) -> GroupElement {
        let gh = self.mul(g, h);
        let gi = self.inv(g);
        let hi = self.inv(h);
        self.mul(self.mul(gh, gi), hi)
    }

    pub fn is_abelian(&self) -> bool {
        self.elements()
            .all(|a| self.elements().all(|b| self.mul(a, b) == self.mul(b, a)))
    }

    /// Conjugacy classes as sorted element lists; class 0 is the identity class.
    pub fn conjugacy_classes(&self) -> &[Vec<GroupElement>] {
        &self.classes
    }

    /// Index into [`Self::conjugacy_classes`] for the class containing `g`.
    pub fn class_of(&self, g: GroupElement) -> usize {
        self.class_of[g.index()]
    }

    /// Ordered product of `elements`, left-to-right.
    pub fn product(&self, elements: impl IntoIterator<Item = GroupElement>) -> GroupElement {
        elements
            .into_iter()
            .fold(GroupElement::IDENTITY, |acc, g| self.mul(acc, g))
    }

    /// Cyclic group of order `n`.
    pub fn zn(n: usize) -> Result<Self, GroupError> {
        if n == 0 {
            return Err(GroupError::MissingParameter);
        }
        let table = (0..n)
            .map(|a| (0..n).map(|b| (a + b) % n).collect())
            .collect();
        let labels = (0..n).map(|i| i.to_string()).collect();
        Self::from_table(format!("Z{n}"), Some(labels), table)
    }

    /// Symmetric group on three points, as permutations composed left-to-right.
    pub fn s3() -> Self {
        // One-line notation on points {0,1,2}; labels use cycle notation on {1,2,3}.
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2], // e
            [0, 2, 1], // (23)
            [1, 0, 2], // (12)
            [1, 2, 0], // (123)
            [2, 0, 1], // (132)
            [2, 1, 0], // (13)
        ];
        let labels = ["e", "(23)", "(12)", "(123)", "(132)", "(13)"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let table = permutation_table(&perms);
        Self::from_table("S3", Some(labels), table).expect("S3 table is a group")
    }

    /// Dihedral group of the square (order 8), from corner permutations.
    pub fn d4() -> Self {
        let r = [1usize, 2, 3, 0]; // rotate corners
        let s = [0usize, 3, 2, 1]; // reflect across the 0-2 diagonal
        let compose = |a: &[usize; 4], b: &[usize; 4]| {
            // left-to-right: apply a, then b
            [b[a[0]], b[a[1]], b[a[2]], b[a[3]]]
        };
        let e = [0usize, 1, 2, 3];
        let r2 = compose(&r, &r);
        let r3 = compose(&r2, &r);
        let rs = compose(&r, &s);
        let r2s = compose(&r2, &s);
        let r3s = compose(&r3, &s);
        let perms = [e, r, r2, r3, s, rs, r2s, r3s];
        let labels = ["e", "r", "r2", "r3", "s", "rs", "r2s", "r3s"]
            .iter()
            .map(|x| x.to_string())
            .collect();
        let table = permutation_table(&perms);
        Self::from_table("D4", Some(labels), table).expect("D4 table is a group")
    }

    /// Quaternion group {±1, ±i, ±j, ±k}.
    pub fn q8() -> Self {
        // Encode as (axis, sign): index = 2*axis + (sign < 0), axes 1,i,j,k.
        let idx = |axis: usize, neg: bool| 2 * axis + neg as usize;
        let mut table = vec![vec![0usize; 8]; 8];
        for a in 0..8 {
            for b in 0..8 {
                let (ax_a, neg_a) = (a / 2, a % 2 == 1);
                let (ax_b, neg_b) = (b / 2, b % 2 == 1);
                let (ax, neg_prod) = quaternion_axis_product(ax_a, ax_b);
                table[a][b] = idx(ax, neg_prod ^ neg_a ^ neg_b);
            }
        }
        let labels = ["1", "-1", "i", "-i", "j", "-j", "k", "-k"]
            .iter()
            .map(|x| x.to_string())
            .collect();
        Self::from_table("Q8", Some(labels), table).expect("Q8 table is a group")
    }

    /// Builtin lookup by name; `parameter` is only used by `Zn`.
    pub fn builtin(name: &str, parameter: Option<usize>) -> Result<Self, GroupError> {
        match name {
            "Zn" | "zn" => Self::zn(parameter.ok_or(GroupError::MissingParameter)?),
            "Z2" | "z2" => Self::zn(2),
            "S3" | "s3" => Ok(Self::s3()),
            "D4" | "d4" => Ok(Self::d4()),
            "Q8" | "q8" => Ok(Self::q8()),
            other => Err(GroupError::UnknownBuiltin(other.to_string())),
        }
    }
}

/// Multiplication over unit quaternion axes (1, i, j, k), returning the
/// product axis and whether a sign flip occurs.
fn quaternion_axis_product(a: usize, b: usize) -> (usize, bool) {
    match (a, b) {
        (0, x) => (x, false),
        (x, 0) => (x, false),
        (x, y) if x == y => (0, true),
        // i·j = k and cyclic; reversed order flips sign.
        (1, 2) => (3, false),
        (2, 3) => (1, false),
        (3, 1) => (2, false),
        (2, 1) => (3, true),
        (3, 2) => (1, true),
        (1, 3) => (2, true),
        _ => unreachable!("axes are in 0..4"),
    }
}

fn permutation_table<const N: usize>(perms: &[[usize; N]]) -> Vec<Vec<usize>> {
    let find = |p: &[usize; N]| {
        perms
            .iter()
            .position(|q| q == p)
            .expect("closed under composition")
    };
    perms
        .iter()
        .map(|a| {
            perms
                .iter()
                .map(|b| {
                    let mut c = [0usize; N];
                    for (x, slot) in c.iter_mut().enumerate() {
                        *slot = b[a[x]]; // apply a, then b
                    }
                    find(&c)
                })
                .collect()
        })
        .collect()
}

/// Parses the plain-text group format:
///
/// ```text
/// # comment
/// group <name>
/// order <n>
/// elements <n whitespace-separated labels>   (optional)
/// table
/// <n rows of n indices; row i column j holds mul(i, j)>
/// ```
pub fn parse_group(text: &str) -> Result<FiniteGroup, GroupError> {
    let mut name: Option<String> = None;
    let mut order: Option<usize> = None;
    let mut labels: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut in_table = false;
    let mut table_line = 0usize;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if in_table {
            let n = order.ok_or(GroupError::Parse {
                line: table_line,
                msg: "table before order".into(),
            })?;
            if rows.len() == n {
                return Err(GroupError::Parse {
                    line: line_no,
                    msg: format!("unexpected content after {n} table rows"),
                });
            }
            let row: Vec<usize> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| GroupError::Parse {
                        line: line_no,
                        msg: format!("bad table entry `{tok}`"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if row.len() != n {
                return Err(GroupError::Parse {
                    line: line_no,
                    msg: format!("expected {n} entries in table row, found {}", row.len()),
                });
            }
            rows.push(row);
            continue;
        }
        let (key, rest) = match line.split_once(char::is_whitespace) {
            Some((k, r)) => (k, r.trim()),
            None => (line, ""),
        };
        match key {
            "group" => {
                if rest.is_empty() {
                    return Err(GroupError::Parse { line: line_no, msg: "missing group name".into() });
                }
                name = Some(rest.to_string());
            }
            "order" => {
                let n = rest.parse::<usize>().map_err(|_| GroupError::Parse {
                    line: line_no,
                    msg: format!("bad order `{rest}`"),
                })?;
                order = Some(n);
            }
            "elements" => {
                let labs: Vec<String> = rest.split_whitespace().map(|s| s.to_string()).collect();
                if let Some(n) = order {
                    if labs.len() != n {
                        return Err(GroupError::Parse {
                            line: line_no,
                            msg: format!("expected {n} labels, found {}", labs.len()),
                        });
                    }
                }
                labels = Some(labs);
            }
            "table" => {
                if order.is_none() {
                    return Err(GroupError::Parse {
                        line: line_no,
                        msg: "`table` requires a preceding `order`".into(),
                    });
                }
                in_table = true;
                table_line = line_no;
            }
            other => {
                return Err(GroupError::Parse {
                    line: line_no,
                    msg: format!("unknown directive `{other}`"),
                });
            }
        }
    }

    let order = order.ok_or(GroupError::Parse { line: 0, msg: "missing `order`".into() })?;
    if !in_table {
        return Err(GroupError::Parse { line: 0, msg: "missing `table`".into() });
    }
    if rows.len() != order {
        return Err(GroupError::Parse {
            line: 0,
            msg: format!("expected {order} table rows, found {}", rows.len()),
        });
    }
    FiniteGroup::from_table(name.unwrap_or_else(|| "unnamed".into()), labels, rows)
}
