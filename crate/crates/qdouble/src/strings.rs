//! Comb string operators, string elongation, and the qubit CNOT recursion.
//!
//! A comb acts on one layer of a configuration: base-edge values are left
//! untouched, and each tooth value is multiplied by the comb's group element
//! conjugated by the prefix — the ordered product of signed base values
//! before the tooth's attachment point. Because the base is never modified,
//! prefixes are well defined and the maps form an exact homomorphism in the
//! group element. Elongation is a controlled unitary that rewrites a comb's
//! teeth so that a conjugated comb acts as the comb of the extended string.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::dense::{CMat, DENSE_CAP};
use crate::group::{FiniteGroup, GroupElement};
use crate::lattice::{validate_string_spec, Lattice, LatticeError, Sign, StringSpec, Tooth, ToothSide};
use crate::ops::{face_base_vertex, gauge_apply, FluxProbe, OpsError};
use crate::scalar::Scalar;
use crate::state::{Context, Layer, SparseState};

#[derive(Debug, Error)]
pub enum StringError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error("operation requires a closed string")]
    NotClosed,
    #[error("operation requires an open string")]
    NotOpen,
    #[error("loop winds ({wx},{wy}) around the torus; a contractible loop is required")]
    NonContractible { wx: i64, wy: i64 },
    #[error("string ends at vertex {got}, expected {expected}")]
    EndpointMismatch { expected: usize, got: usize },
    #[error("control edge {edge} is not a tooth of the string at its final vertex")]
    ControlNotOnString { edge: usize },
    #[error("edge {edge} is not incident to vertex {vertex}")]
    NotIncident { edge: usize, vertex: usize },
    #[error("edge {edge} is a self-loop; its incidence side is ambiguous")]
    SelfLoopAmbiguous { edge: usize },
    #[error("edge {edge} may appear in only one role (extension, control, or target)")]
    RoleOverlap { edge: usize },
    #[error("extension edge {edge} already belongs to the string")]
    ExtensionOnString { edge: usize },
    #[error("target edge {edge} already belongs to the string")]
    TargetOnString { edge: usize },
    #[error("qubit count {n} outside the dense range 1..={max}")]
    QubitCountRange { n: usize, max: usize },
    #[error("qubit index {q} outside 1..={n}")]
    QubitIndexRange { q: usize, n: usize },
}

fn signed_value(
    group: &FiniteGroup,
    ctx: &Context,
    config: u128,
    layer: Layer,
    edge: usize,
    sign: Sign,
) -> GroupElement {
    let z = ctx.packer().get(config, layer, edge);
    match sign {
        Sign::Plus => z,
        Sign::Minus => group.inv(z),
    }
}

/// A validated comb string operator A_L(g).
#[derive(Clone, Debug)]
pub struct CombOperator {
    spec: StringSpec,
    /// Teeth sorted by attachment index (stable), precomputed once.
    teeth: Vec<Tooth>,
    start_vertex: usize,
    end_vertex: usize,
    g: GroupElement,
}

impl CombOperator {
    pub fn new(lattice: &Lattice, spec: StringSpec, g: GroupElement) -> Result<Self, StringError> {
        let checked = validate_string_spec(lattice, &spec)?;
        let teeth = checked.teeth_in_order();
        let start_vertex = checked.start_vertex();
        let end_vertex = checked.end_vertex();
        Ok(CombOperator { spec, teeth, start_vertex, end_vertex, g })
    }

    pub fn spec(&self) -> &StringSpec {
        &self.spec
    }

    pub fn g(&self) -> GroupElement {
        self.g
    }

    pub fn start_vertex(&self) -> usize {
        self.start_vertex
    }

    pub fn end_vertex(&self) -> usize {
        self.end_vertex
    }

    /// The same comb for g⁻¹; composing the two gives the identity map.
    pub fn inverse(&self, group: &FiniteGroup) -> CombOperator {
        CombOperator { g: group.inv(self.g), ..self.clone() }
    }

    /// Applies A_L(g) to one layer of a packed configuration. Prefixes are
    /// read from the configuration itself; base edges are never written, so
    /// the reads are stable regardless of processing order.
    pub fn apply_to_layer(&self, ctx: &Context, config: u128, layer: Layer) -> u128 {
        let group = ctx.group();
        let packer = ctx.packer();
        let mut c = config;
        let mut prefix = GroupElement::IDENTITY;
        let mut ti = 0usize;
        for attach in 0..=self.spec.base.len() {
            while ti < self.teeth.len() && self.teeth[ti].attach == attach {
                let tooth = &self.teeth[ti];
                let conj = group.mul(group.mul(group.inv(prefix), self.g), prefix);
                let y = packer.get(c, layer, tooth.edge);
                let y2 = match tooth.side {
                    ToothSide::Out => group.mul(conj, y),
                    ToothSide::In => group.mul(y, group.inv(conj)),
                };
                c = packer.set(c, layer, tooth.edge, y2);
                ti += 1;
            }
            if attach < self.spec.base.len() {
                let (e, sign) = self.spec.base[attach];
                prefix = group.mul(prefix, signed_value(group, ctx, c, layer, e, sign));
            }
        }
        c
    }
}

/// Site to test a comb's commutation against: the gauge transformations at
/// a vertex, or the identity-flux projector of a face.
#[derive(Clone, Copy, Debug)]
pub enum CommutationProbe {
    Gauge { vertex: usize },
    Flux { face: usize },
}

/// Maximum commutation defect between the comb and the probe over sampled
/// basis configurations. For gauge probes the defect is 1 when the two
/// application orders produce different configurations for some group
/// element; for flux probes it is 1 when the identity-flux indicator
/// changes under the comb. Exactly zero away from the string's endpoints.
pub fn comb_commutation_defect<T: Scalar>(
    ctx: &Context,
    comb: &CombOperator,
    probe: CommutationProbe,
    samples: usize,
    seed: u64,
) -> Result<T, StringError> {
    let group = ctx.group();
    let packer = ctx.packer();
    let order = group.order();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let flux_probe = match probe {
        CommutationProbe::Flux { face } => {
            Some(FluxProbe::new(ctx.lattice(), face, face_base_vertex(ctx.lattice(), face)?)?)
        }
        CommutationProbe::Gauge { .. } => None,
    };
    let mut worst = T::zero();
    for _ in 0..samples {
        let mut c = 0u128;
        for e in 0..ctx.lattice().edge_count() {
            c = packer.set(c, Layer::Ket, e, GroupElement(rng.gen_range(0..order) as u16));
        }
        let defect = match probe {
            CommutationProbe::Gauge { vertex } => {
                let mut hit = false;
                for idx in 0..order {
                    let h = GroupElement(idx as u16);
                    let comb_first =
                        gauge_apply(ctx, comb.apply_to_layer(ctx, c, Layer::Ket), Layer::Ket, vertex, h);
                    let gauge_first =
                        comb.apply_to_layer(ctx, gauge_apply(ctx, c, Layer::Ket, vertex, h), Layer::Ket);
                    if comb_first != gauge_first {
                        hit = true;
                        break;
                    }
                }
                if hit {
                    T::one()
                } else {
                    T::zero()
                }
            }
            CommutationProbe::Flux { .. } => {
                let fp = flux_probe.as_ref().expect("flux probe built above");
                let before = fp.eval(ctx, c, Layer::Ket).is_identity();
                let after =
                    fp.eval(ctx, comb.apply_to_layer(ctx, c, Layer::Ket), Layer::Ket).is_identity();
                if before == after {
                    T::zero()
                } else {
                    T::one()
                }
            }
        };
        worst = worst.max(defect);
    }
    Ok(worst)
}

/// ‖(A_C ⊗ A_C)|ρ⟩ − |ρ⟩‖ / ‖ρ‖ for a closed contractible comb. Errors on
/// open combs and on loops that wind around the torus.
pub fn closed_loop_action_defect<T: Scalar>(
    state: &SparseState<T>,
    comb: &CombOperator,
) -> Result<T, StringError> {
    if !comb.spec().closed {
        return Err(StringError::NotClosed);
    }
    let lattice = state.ctx().lattice();
    let (wx, wy) = lattice.loop_class(&comb.spec().base)?;
    if (wx, wy) != (0, 0) {
        return Err(StringError::NonContractible { wx, wy });
    }
    let moved = apply_comb_doubled(state, comb);
    let diff = moved.add_scaled(Complex::new(-T::one(), T::zero()), state);
    Ok(diff.norm() / state.norm())
}

/// (A_L(g) ⊗ A_L(g))|ρ⟩: the doubled action used to conjugate densities.
pub fn apply_comb_doubled<T: Scalar>(state: &SparseState<T>, comb: &CombOperator) -> SparseState<T> {
    let ctx = state.ctx().clone();
    let comb = comb.clone();
    state.transform(move |config| {
        let c1 = comb.apply_to_layer(&ctx, config, Layer::Ket);
        let c2 = comb.apply_to_layer(&ctx, c1, Layer::Bra);
        (c2, Complex::new(T::one(), T::zero()))
    })
}

/// Which of the two algebraically allowed forms the elongation unitary
/// uses. `invert_control` flips whether an outgoing control tooth enters
/// as its inverse; `invert_sandwich` flips the direction the extension
/// edge's value conjugates the control. The correct pair is pinned by
/// [`pin_side_convention`]: exactly one choice makes the conjugation
/// identity hold for nonabelian groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SideConvention {
    pub invert_control: bool,
    pub invert_sandwich: bool,
}

impl SideConvention {
    pub fn all() -> [SideConvention; 4] {
        [
            SideConvention { invert_control: false, invert_sandwich: false },
            SideConvention { invert_control: false, invert_sandwich: true },
            SideConvention { invert_control: true, invert_sandwich: false },
            SideConvention { invert_control: true, invert_sandwich: true },
        ]
    }
}

/// The elongation unitary E for extending a string from u₁ across a new
/// base edge to u₂. Controlled on the extension edge's value and on one
/// existing tooth at u₁, it multiplies the prospective teeth at u₂ so that
/// E⁻¹ A_L(g) E = A_{L'}(g) for every g, where L' is the extended string.
#[derive(Clone, Debug)]
pub struct ElongationOperator {
    /// The new base edge e* with its traversal sign (u₁ → u₂).
    extension: (usize, Sign),
    u1: usize,
    u2: usize,
    control: Tooth,
    /// Prospective teeth of the extended string at u₂.
    targets: Vec<(usize, ToothSide)>,
    convention: SideConvention,
}

fn incidence_side(lattice: &Lattice, edge: usize, vertex: usize) -> Result<ToothSide, StringError> {
    let e = lattice.edge(edge)?;
    if e.tail == e.head {
        return Err(StringError::SelfLoopAmbiguous { edge });
    }
    if e.tail == vertex {
        Ok(ToothSide::Out)
    } else if e.head == vertex {
        Ok(ToothSide::In)
    } else {
        Err(StringError::NotIncident { edge, vertex })
    }
}

impl ElongationOperator {
    /// Builds the unitary from the extension edge (with traversal sign),
    /// the control tooth's edge at u₁, and the target edges at u₂. Tooth
    /// sides are derived from incidence.
    pub fn new(
        lattice: &Lattice,
        extension: (usize, Sign),
        control_edge: usize,
        target_edges: &[usize],
    ) -> Result<Self, StringError> {
        let e = lattice.edge(extension.0)?;
        let (u1, u2) = match extension.1 {
            Sign::Plus => (e.tail, e.head),
            Sign::Minus => (e.head, e.tail),
        };
        if control_edge == extension.0 {
            return Err(StringError::RoleOverlap { edge: control_edge });
        }
        let control_side = incidence_side(lattice, control_edge, u1)?;
        let mut targets = Vec::with_capacity(target_edges.len());
        for &t in target_edges {
            if t == extension.0 || t == control_edge || targets.iter().any(|&(e2, _)| e2 == t) {
                return Err(StringError::RoleOverlap { edge: t });
            }
            targets.push((t, incidence_side(lattice, t, u2)?));
        }
        Ok(ElongationOperator {
            extension,
            u1,
            u2,
            control: Tooth { edge: control_edge, attach: 0, side: control_side },
            targets,
            convention: SideConvention::default(),
        })
    }

    pub fn with_convention(mut self, convention: SideConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn convention(&self) -> SideConvention {
        self.convention
    }

    pub fn u1(&self) -> usize {
        self.u1
    }

    pub fn u2(&self) -> usize {
        self.u2
    }

    /// Applies E (or E⁻¹) to one layer: with x the signed extension value
    /// and t̂ the side-adjusted control value, each outgoing target is
    /// left-multiplied by f = x⁻¹·t̂·x and each incoming target is
    /// right-multiplied by f⁻¹.
    pub fn apply_to_layer(&self, ctx: &Context, config: u128, layer: Layer, inverse: bool) -> u128 {
        let group = ctx.group();
        let packer = ctx.packer();
        let x = signed_value(group, ctx, config, layer, self.extension.0, self.extension.1);
        let t = packer.get(config, layer, self.control.edge);
        let mut t_hat = match self.control.side {
            ToothSide::Out => group.inv(t),
            ToothSide::In => t,
        };
        if self.convention.invert_control {
            t_hat = group.inv(t_hat);
        }
        let mut f = if self.convention.invert_sandwich {
            group.mul(group.mul(x, t_hat), group.inv(x))
        } else {
            group.mul(group.mul(group.inv(x), t_hat), x)
        };
        if inverse {
            f = group.inv(f);
        }
        let f_inv = group.inv(f);
        let mut c = config;
        for &(edge, side) in &self.targets {
            let y = packer.get(c, layer, edge);
            let y2 = match side {
                ToothSide::Out => group.mul(f, y),
                ToothSide::In => group.mul(y, f_inv),
            };
            c = packer.set(c, layer, edge, y2);
        }
        c
    }

    /// The extended string L': the extension edge is appended to the base
    /// and the targets become teeth at the new final vertex. The input
    /// string must be open, end at u₁, and already carry the control tooth
    /// there; the extension and target edges must be new.
    pub fn elongate(&self, lattice: &Lattice, spec: &StringSpec) -> Result<StringSpec, StringError> {
        if spec.closed {
            return Err(StringError::NotOpen);
        }
        let checked = validate_string_spec(lattice, spec)?;
        if checked.end_vertex() != self.u1 {
            return Err(StringError::EndpointMismatch {
                expected: self.u1,
                got: checked.end_vertex(),
            });
        }
        let k = spec.base.len();
        let has_control = spec
            .teeth
            .iter()
            .any(|t| t.edge == self.control.edge && t.attach == k && t.side == self.control.side);
        if !has_control {
            return Err(StringError::ControlNotOnString { edge: self.control.edge });
        }
        if spec.base.iter().any(|&(e, _)| e == self.extension.0)
            || spec.teeth.iter().any(|t| t.edge == self.extension.0)
        {
            return Err(StringError::ExtensionOnString { edge: self.extension.0 });
        }
        for &(t, _) in &self.targets {
            if spec.base.iter().any(|&(e, _)| e == t) || spec.teeth.iter().any(|th| th.edge == t) {
                return Err(StringError::TargetOnString { edge: t });
            }
        }
        let mut base = spec.base.clone();
        base.push(self.extension);
        let mut teeth = spec.teeth.clone();
        for &(edge, side) in &self.targets {
            teeth.push(Tooth { edge, attach: k + 1, side });
        }
        let extended = StringSpec { base, teeth, closed: false };
        validate_string_spec(lattice, &extended)?;
        Ok(extended)
    }
}

/// Fraction of sampled configurations where E⁻¹·A_L(g)·E differs from
/// A_{L'}(g); zero when the conjugation identity holds exactly.
pub fn elongation_identity_defect<T: Scalar>(
    ctx: &Context,
    spec: &StringSpec,
    elong: &ElongationOperator,
    g: GroupElement,
    samples: usize,
    seed: u64,
) -> Result<T, StringError> {
    let lattice = ctx.lattice();
    let comb_l = CombOperator::new(lattice, spec.clone(), g)?;
    let extended = elong.elongate(lattice, spec)?;
    let comb_lp = CombOperator::new(lattice, extended, g)?;
    let packer = ctx.packer();
    let order = ctx.group().order();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..samples {
        let mut c = 0u128;
        for e in 0..lattice.edge_count() {
            c = packer.set(c, Layer::Ket, e, GroupElement(rng.gen_range(0..order) as u16));
        }
        let direct = comb_lp.apply_to_layer(ctx, c, Layer::Ket);
        let through = elong.apply_to_layer(ctx, c, Layer::Ket, false);
        let through = comb_l.apply_to_layer(ctx, through, Layer::Ket);
        let through = elong.apply_to_layer(ctx, through, Layer::Ket, true);
        if direct != through {
            mismatches += 1;
        }
    }
    Ok(T::from_usize(mismatches).unwrap() / T::from_usize(samples.max(1)).unwrap())
}

/// Tries all four side conventions against the conjugation identity over
/// every group element and returns the first one minimizing the defect,
/// together with that defect.
pub fn pin_side_convention<T: Scalar>(
    ctx: &Context,
    spec: &StringSpec,
    elong: &ElongationOperator,
    samples: usize,
    seed: u64,
) -> Result<(SideConvention, T), StringError> {
    let mut best: Option<(SideConvention, T)> = None;
    for convention in SideConvention::all() {
        let candidate = elong.clone().with_convention(convention);
        let mut worst = T::zero();
        for idx in 0..ctx.group().order() {
            let g = GroupElement(idx as u16);
            let d = elongation_identity_defect::<T>(ctx, spec, &candidate, g, samples, seed)?;
            worst = worst.max(d);
        }
        match &best {
            Some((_, b)) if *b <= worst => {}
            _ => best = Some((convention, worst)),
        }
    }
    Ok(best.expect("four conventions tried"))
}

/// Pauli matrices and the dense n-qubit recursion
/// U_n = CNOT_{n,n−1} · (U_{n−1} ⊗ I) · CNOT_{n,n−1}, U₁ = Hadamard,
/// which equals (X₁ + Z₁Z₂⋯Z_n)/√2. Qubit 1 is the most significant bit.
pub fn pauli_x<T: Scalar>() -> CMat<T> {
    let mut m = CMat::zeros(2);
    m[(0, 1)] = Complex::new(T::one(), T::zero());
    m[(1, 0)] = Complex::new(T::one(), T::zero());
    m
}

pub fn pauli_z<T: Scalar>() -> CMat<T> {
    let mut m = CMat::zeros(2);
    m[(0, 0)] = Complex::new(T::one(), T::zero());
    m[(1, 1)] = Complex::new(-T::one(), T::zero());
    m
}

pub fn hadamard<T: Scalar>() -> CMat<T> {
    let h = T::frac_1_sqrt_2();
    let mut m = CMat::zeros(2);
    m[(0, 0)] = Complex::new(h, T::zero());
    m[(0, 1)] = Complex::new(h, T::zero());
    m[(1, 0)] = Complex::new(h, T::zero());
    m[(1, 1)] = Complex::new(-h, T::zero());
    m
}

const MAX_QUBITS: usize = 12;

fn check_qubits(n: usize) -> Result<(), StringError> {
    if n == 0 || n > MAX_QUBITS || (1usize << n) > DENSE_CAP {
        return Err(StringError::QubitCountRange { n, max: MAX_QUBITS });
    }
    Ok(())
}

/// A single-qubit operator embedded into n qubits at position `qubit`.
pub fn embed_single<T: Scalar>(n: usize, qubit: usize, op: &CMat<T>) -> Result<CMat<T>, StringError> {
    check_qubits(n)?;
    if qubit == 0 || qubit > n {
        return Err(StringError::QubitIndexRange { q: qubit, n });
    }
    let mut m = CMat::identity(1);
    for q in 1..=n {
        let factor = if q == qubit { op.clone() } else { CMat::identity(2) };
        m = m.kron(&factor);
    }
    Ok(m)
}

/// Dense CNOT with the given 1-based control and target qubits.
pub fn cnot<T: Scalar>(n: usize, control: usize, target: usize) -> Result<CMat<T>, StringError> {
    check_qubits(n)?;
    for q in [control, target] {
        if q == 0 || q > n {
            return Err(StringError::QubitIndexRange { q, n });
        }
    }
    let dim = 1usize << n;
    let cbit = n - control;
    let tbit = n - target;
    let mut m = CMat::zeros(dim);
    for col in 0..dim {
        let row = if (col >> cbit) & 1 == 1 { col ^ (1 << tbit) } else { col };
        m[(row, col)] = Complex::new(T::one(), T::zero());
    }
    Ok(m)
}

/// U_n by the CNOT recursion.
pub fn un_recursive<T: Scalar>(n: usize) -> Result<CMat<T>, StringError> {
    check_qubits(n)?;
    let mut u = hadamard::<T>();
    for k in 2..=n {
        let grown = u.kron(&CMat::identity(2));
        let c = cnot::<T>(k, k, k - 1)?;
        u = c.mul(&grown).mul(&c);
    }
    Ok(u)
}

/// (X₁ + Z₁Z₂⋯Z_n)/√2 assembled directly.
pub fn un_closed_form<T: Scalar>(n: usize) -> Result<CMat<T>, StringError> {
    check_qubits(n)?;
    let x1 = embed_single(n, 1, &pauli_x::<T>())?;
    let mut zz = CMat::identity(1);
    for _ in 0..n {
        zz = zz.kron(&pauli_z::<T>());
    }
    let half = Complex::new(T::frac_1_sqrt_2(), T::zero());
    Ok(x1.scale(half).add_scaled(half, &zz))
}

/// Max-entry difference between the recursion and the closed form.
pub fn un_recursion_defect<T: Scalar>(n: usize) -> Result<T, StringError> {
    Ok(un_recursive::<T>(n)?.max_abs_diff(&un_closed_form::<T>(n)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::lattice::full_teeth_loop;
    use crate::ops::prepare_ground_state;
    use crate::state::Context;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn ctx(group: FiniteGroup, lx: usize, ly: usize) -> Arc<Context> {
        Context::new(group, Lattice::torus(lx, ly).unwrap()).unwrap()
    }

    fn random_layer_config(ctx: &Context, rng: &mut impl Rng) -> u128 {
        let packer = ctx.packer();
        let order = ctx.group().order();
        let mut c = 0u128;
        for e in 0..ctx.lattice().edge_count() {
            c = packer.set(c, Layer::Ket, e, GroupElement(rng.gen_range(0..order) as u16));
        }
        c
    }

    /// Open two-edge string (0,0)→(1,0)→(1,1) with teeth at the start and
    /// at the end, used throughout the comb tests.
    fn sample_spec(lat: &Lattice) -> StringSpec {
        let h00 = lat.h_edge(0, 0).unwrap();
        let v10 = lat.v_edge(1, 0).unwrap();
        let h11 = lat.h_edge(1, 1).unwrap(); // out at (1,1)
        let h01 = lat.h_edge(0, 1).unwrap(); // in at (1,1)
        let v00 = lat.v_edge(0, 0).unwrap(); // out at (0,0)
        StringSpec {
            base: vec![(h00, Sign::Plus), (v10, Sign::Plus)],
            teeth: vec![
                Tooth { edge: v00, attach: 0, side: ToothSide::Out },
                Tooth { edge: h11, attach: 2, side: ToothSide::Out },
                Tooth { edge: h01, attach: 2, side: ToothSide::In },
            ],
            closed: false,
        }
    }

    #[test]
    fn identity_element_comb_is_noop() {
        let ctx = ctx(FiniteGroup::s3(), 3, 3);
        let comb =
            CombOperator::new(ctx.lattice(), sample_spec(ctx.lattice()), GroupElement::IDENTITY)
                .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..30 {
            let c = random_layer_config(&ctx, &mut rng);
            assert_eq!(comb.apply_to_layer(&ctx, c, Layer::Ket), c);
        }
    }

    #[test]
    fn first_tooth_left_multiplies_by_g() {
        // A tooth at the start of the string has an empty prefix: outgoing
        // values map to g·y.
        let ctx = ctx(FiniteGroup::s3(), 3, 3);
        let lat = ctx.lattice();
        let group = ctx.group().clone();
        let spec = sample_spec(lat);
        let v00 = lat.v_edge(0, 0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for gi in 0..6 {
            let g = GroupElement(gi as u16);
            let comb = CombOperator::new(lat, spec.clone(), g).unwrap();
            let c = random_layer_config(&ctx, &mut rng);
            let y = ctx.packer().get(c, Layer::Ket, v00);
            let c2 = comb.apply_to_layer(&ctx, c, Layer::Ket);
            assert_eq!(ctx.packer().get(c2, Layer::Ket, v00), group.mul(g, y));
        }
    }

    #[test]
    fn end_teeth_use_the_full_prefix() {
        // With base values x₁, x₂ (as traversed) and prefix P = x₁x₂, the
        // outgoing end tooth maps y ↦ (P⁻¹gP)·y and the incoming end tooth
        // maps y ↦ y·(P⁻¹g⁻¹P).
        let ctx = ctx(FiniteGroup::s3(), 3, 3);
        let lat = ctx.lattice();
        let group = ctx.group().clone();
        let spec = sample_spec(lat);
        let h00 = lat.h_edge(0, 0).unwrap();
        let v10 = lat.v_edge(1, 0).unwrap();
        let h11 = lat.h_edge(1, 1).unwrap();
        let h01 = lat.h_edge(0, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for gi in 0..6 {
            let g = GroupElement(gi as u16);
            let comb = CombOperator::new(lat, spec.clone(), g).unwrap();
            let c = random_layer_config(&ctx, &mut rng);
            let packer = ctx.packer();
            let p = group.mul(packer.get(c, Layer::Ket, h00), packer.get(c, Layer::Ket, v10));
            let conj = group.mul(group.mul(group.inv(p), g), p);
            let out_before = packer.get(c, Layer::Ket, h11);
            let in_before = packer.get(c, Layer::Ket, h01);
            let c2 = comb.apply_to_layer(&ctx, c, Layer::Ket);
            assert_eq!(packer.get(c2, Layer::Ket, h11), group.mul(conj, out_before));
            assert_eq!(packer.get(c2, Layer::Ket, h01), group.mul(in_before, group.inv(conj)));
        }
    }

    #[test]
    fn base_edges_are_untouched() {
        let ctx = ctx(FiniteGroup::d4(), 3, 3);
        let lat = ctx.lattice();
        let spec = sample_spec(lat);
        let comb = CombOperator::new(lat, spec.clone(), GroupElement(5)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..30 {
            let c = random_layer_config(&ctx, &mut rng);
            let c2 = comb.apply_to_layer(&ctx, c, Layer::Ket);
            for &(e, _) in &spec.base {
                assert_eq!(
                    ctx.packer().get(c, Layer::Ket, e),
                    ctx.packer().get(c2, Layer::Ket, e)
                );
            }
        }
    }

    #[test]
    fn comb_inverse_round_trips() {
        let ctx = ctx(FiniteGroup::d4(), 3, 3);
        let group = ctx.group().clone();
        let comb = CombOperator::new(ctx.lattice(), sample_spec(ctx.lattice()), GroupElement(3))
            .unwrap();
        let inv = comb.inverse(&group);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = random_layer_config(&ctx, &mut rng);
            let there = comb.apply_to_layer(&ctx, c, Layer::Ket);
            assert_eq!(inv.apply_to_layer(&ctx, there, Layer::Ket), c);
        }
    }

    proptest! {
        /// O(g₁)∘O(g₂) = O(g₁g₂) exactly, on random configurations.
        #[test]
        fn comb_homomorphism(gi in 0usize..6, hi in 0usize..6, seed in 0u64..500) {
            let ctx = Context::new(FiniteGroup::s3(), Lattice::torus(3, 3).unwrap()).unwrap();
            let group = ctx.group().clone();
            let lat = ctx.lattice();
            let spec = sample_spec(lat);
            let g = GroupElement(gi as u16);
            let h = GroupElement(hi as u16);
            let comb_g = CombOperator::new(lat, spec.clone(), g).unwrap();
            let comb_h = CombOperator::new(lat, spec.clone(), h).unwrap();
            let comb_gh = CombOperator::new(lat, spec, group.mul(g, h)).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let c = random_layer_config(&ctx, &mut rng);
            let sequential = comb_g.apply_to_layer(&ctx, comb_h.apply_to_layer(&ctx, c, Layer::Ket), Layer::Ket);
            let direct = comb_gh.apply_to_layer(&ctx, c, Layer::Ket);
            prop_assert_eq!(sequential, direct);
        }
    }

    #[test]
    fn commutation_vanishes_away_from_endpoints() {
        // Straight two-edge comb (0,0)→(1,0)→(2,0) with one tooth at the
        // interior vertex (1,0).
        let ctx = ctx(FiniteGroup::s3(), 3, 3);
        let lat = ctx.lattice();
        let spec = StringSpec {
            base: vec![(lat.h_edge(0, 0).unwrap(), Sign::Plus), (lat.h_edge(1, 0).unwrap(), Sign::Plus)],
            teeth: vec![Tooth { edge: lat.v_edge(1, 0).unwrap(), attach: 1, side: ToothSide::Out }],
            closed: false,
        };
        let comb = CombOperator::new(lat, spec, GroupElement(1)).unwrap();

        // Interior vertex: exact commutation with every gauge transformation.
        let d: f64 = comb_commutation_defect(
            &ctx,
            &comb,
            CommutationProbe::Gauge { vertex: lat.vertex_at(1, 0).unwrap() },
            40,
            10,
        )
        .unwrap();
        assert_eq!(d, 0.0);

        // Faces touching only base edges: flux indicator unchanged.
        for face in [lat.face_at(0, 2).unwrap(), lat.face_at(1, 2).unwrap(), lat.face_at(2, 1).unwrap()] {
            let d: f64 =
                comb_commutation_defect(&ctx, &comb, CommutationProbe::Flux { face }, 40, 11).unwrap();
            assert_eq!(d, 0.0, "face {face}");
        }

        // The string's start vertex anchors the conjugation frame: gauge
        // transformations there do not commute.
        let d: f64 = comb_commutation_defect(
            &ctx,
            &comb,
            CommutationProbe::Gauge { vertex: lat.vertex_at(0, 0).unwrap() },
            40,
            12,
        )
        .unwrap();
        assert!(d > 0.0);

        // The faces beside the tooth carry the created flux pair.
        for face in [lat.face_at(1, 0).unwrap(), lat.face_at(0, 0).unwrap()] {
            let d: f64 =
                comb_commutation_defect(&ctx, &comb, CommutationProbe::Flux { face }, 40, 13).unwrap();
            assert!(d > 0.0, "face {face}");
        }
    }

    #[test]
    fn closed_contractible_full_teeth_loop_is_trivial() {
        for group in [FiniteGroup::zn(2).unwrap(), FiniteGroup::s3()] {
            let ctx = Context::new(group, Lattice::torus(2, 2).unwrap()).unwrap();
            let state = prepare_ground_state::<f64>(ctx.clone());
            let lat = ctx.lattice();
            let base = lat.face_boundary(lat.face_at(0, 0).unwrap(), lat.vertex_at(0, 0).unwrap()).unwrap();
            let spec = full_teeth_loop(lat, base).unwrap();
            for gi in 0..ctx.group().order() {
                let comb = CombOperator::new(lat, spec.clone(), GroupElement(gi as u16)).unwrap();
                let d = closed_loop_action_defect(&state, &comb).unwrap();
                assert!(d < 1e-12, "g index {gi}: {d}");
            }
        }
    }

    #[test]
    fn winding_loop_is_rejected_and_sided_teeth_act_logically() {
        let ctx = ctx(FiniteGroup::zn(2).unwrap(), 2, 2);
        let lat = ctx.lattice();
        let base = vec![
            (lat.h_edge(0, 0).unwrap(), Sign::Plus),
            (lat.h_edge(1, 0).unwrap(), Sign::Plus),
        ];
        let spec = full_teeth_loop(lat, base.clone()).unwrap();
        let comb = CombOperator::new(lat, spec, GroupElement(1)).unwrap();
        let state = prepare_ground_state::<f64>(ctx.clone());
        let err = closed_loop_action_defect(&state, &comb);
        assert!(matches!(err, Err(StringError::NonContractible { wx: 1, wy: 0 })));

        // Full teeth flip the dual rows on both sides of the base, which is
        // a product of gauge transformations: trivial even though the loop
        // winds.
        let moved = apply_comb_doubled(&state, &comb);
        let overlap = moved.inner(&state).norm() / (moved.norm() * state.norm());
        assert!((overlap - 1.0).abs() < 1e-13);

        // Teeth on a single side form one winding dual loop: a logical
        // operator mapping the prepared state onto an orthogonal sector.
        let sided = StringSpec {
            base,
            teeth: vec![
                Tooth { edge: lat.v_edge(0, 0).unwrap(), attach: 0, side: ToothSide::Out },
                Tooth { edge: lat.v_edge(1, 0).unwrap(), attach: 1, side: ToothSide::Out },
            ],
            closed: true,
        };
        let sided = CombOperator::new(lat, sided, GroupElement(1)).unwrap();
        let moved = apply_comb_doubled(&state, &sided);
        assert!((moved.norm() - state.norm()).abs() < 1e-13);
        assert!(moved.inner(&state).norm() < 1e-13);
    }

    #[test]
    fn elongation_round_trips_and_identity_controls_are_inert() {
        let ctx = ctx(FiniteGroup::s3(), 3, 3);
        let lat = ctx.lattice();
        // Extend from (1,1) across v(1,1) up to (1,2); control tooth h(1,1),
        // targets the remaining edges at (1,2).
        let ext = (lat.v_edge(1, 1).unwrap(), Sign::Plus);
        let control = lat.h_edge(1, 1).unwrap();
        let targets = [lat.h_edge(1, 2).unwrap(), lat.h_edge(0, 2).unwrap(), lat.v_edge(1, 2).unwrap()];
        let elong = ElongationOperator::new(lat, ext, control, &targets).unwrap();
        assert_eq!(elong.u1(), lat.vertex_at(1, 1).unwrap());
        assert_eq!(elong.u2(), lat.vertex_at(1, 2).unwrap());

        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..50 {
            let c = random_layer_config(&ctx, &mut rng);
            let there = elong.apply_to_layer(&ctx, c, Layer::Ket, false);
            let back = elong.apply_to_layer(&ctx, there, Layer::Ket, true);
            assert_eq!(back, c);
        }

        // Identity-valued controls make E the identity map.
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        for _ in 0..20 {
            let mut c = random_layer_config(&ctx, &mut rng);
            c = ctx.packer().set(c, Layer::Ket, ext.0, GroupElement::IDENTITY);
            c = ctx.packer().set(c, Layer::Ket, control, GroupElement::IDENTITY);
            assert_eq!(elong.apply_to_layer(&ctx, c, Layer::Ket, false), c);
        }
    }

    #[test]
    fn elongation_conjugation_identity_pins_one_convention() {
        let ctx = ctx(FiniteGroup::s3(), 3, 3);
        let lat = ctx.lattice();
        // L: base (1,0)→(1,1), control tooth h(1,1) (outgoing at (1,1)).
        let spec = StringSpec {
            base: vec![(lat.v_edge(1, 0).unwrap(), Sign::Plus)],
            teeth: vec![Tooth { edge: lat.h_edge(1, 1).unwrap(), attach: 1, side: ToothSide::Out }],
            closed: false,
        };
        let ext = (lat.v_edge(1, 1).unwrap(), Sign::Plus);
        let elong = ElongationOperator::new(
            lat,
            ext,
            lat.h_edge(1, 1).unwrap(),
            &[lat.h_edge(1, 2).unwrap(), lat.h_edge(0, 2).unwrap(), lat.v_edge(1, 2).unwrap()],
        )
        .unwrap();

        let (pinned, defect) = pin_side_convention::<f64>(&ctx, &spec, &elong, 60, 23).unwrap();
        assert_eq!(defect, 0.0);
        assert_eq!(pinned, SideConvention { invert_control: false, invert_sandwich: false });

        // The pinned form holds for every group element; a flipped control
        // convention visibly fails for some.
        for gi in 0..6 {
            let g = GroupElement(gi as u16);
            let d: f64 = elongation_identity_defect(&ctx, &spec, &elong, g, 60, 24).unwrap();
            assert_eq!(d, 0.0, "g index {gi}");
        }
        let flipped = elong
            .clone()
            .with_convention(SideConvention { invert_control: true, invert_sandwich: false });
        let mut any = 0.0f64;
        for gi in 0..6 {
            let g = GroupElement(gi as u16);
            let d: f64 = elongation_identity_defect(&ctx, &spec, &flipped, g, 60, 25).unwrap();
            any = any.max(d);
        }
        assert!(any > 0.0);
    }

    #[test]
    fn elongation_validates_string_compatibility() {
        let ctx = ctx(FiniteGroup::s3(), 3, 3);
        let lat = ctx.lattice();
        let ext = (lat.v_edge(1, 1).unwrap(), Sign::Plus);
        let elong =
            ElongationOperator::new(lat, ext, lat.h_edge(1, 1).unwrap(), &[lat.v_edge(1, 2).unwrap()])
                .unwrap();
        // String ending at the wrong vertex.
        let wrong_end = StringSpec {
            base: vec![(lat.h_edge(0, 0).unwrap(), Sign::Plus)],
            teeth: vec![],
            closed: false,
        };
        assert!(matches!(
            elong.elongate(lat, &wrong_end),
            Err(StringError::EndpointMismatch { .. })
        ));
        // Right endpoint but no control tooth.
        let no_control = StringSpec {
            base: vec![(lat.v_edge(1, 0).unwrap(), Sign::Plus)],
            teeth: vec![],
            closed: false,
        };
        assert!(matches!(
            elong.elongate(lat, &no_control),
            Err(StringError::ControlNotOnString { .. })
        ));
        // A valid elongation produces a validated longer string.
        let good = StringSpec {
            base: vec![(lat.v_edge(1, 0).unwrap(), Sign::Plus)],
            teeth: vec![Tooth { edge: lat.h_edge(1, 1).unwrap(), attach: 1, side: ToothSide::Out }],
            closed: false,
        };
        let extended = elong.elongate(lat, &good).unwrap();
        assert_eq!(extended.base.len(), 2);
        assert_eq!(extended.teeth.len(), 2);
        assert!(extended.teeth.iter().any(|t| t.attach == 2));
    }

    #[test]
    fn cnot_conjugation_moves_z_and_fixes_x() {
        // CNOT_{2,1}: control qubit 2, target qubit 1.
        let c = cnot::<f64>(2, 2, 1).unwrap();
        let z1 = embed_single(2, 1, &pauli_z::<f64>()).unwrap();
        let x1 = embed_single(2, 1, &pauli_x::<f64>()).unwrap();
        let z2 = embed_single(2, 2, &pauli_z::<f64>()).unwrap();
        let zz = z1.mul(&z2);
        let conj_z = c.mul(&z1).mul(&c);
        assert!(conj_z.max_abs_diff(&zz) < 1e-15);
        let conj_x = c.mul(&x1).mul(&c);
        assert!(conj_x.max_abs_diff(&x1) < 1e-15);
    }

    #[test]
    fn un_recursion_matches_closed_form_small() {
        for n in 1..=4 {
            let d = un_recursion_defect::<f64>(n).unwrap();
            assert!(d < 1e-14, "n={n}: {d}");
        }
    }

    #[test]
    fn un_is_unitary_and_hermitian() {
        let u = un_recursive::<f64>(3).unwrap();
        assert!(u.unitarity_defect() < 1e-14);
        assert!(u.hermitian_defect() < 1e-14);
    }

    #[test]
    fn qubit_range_is_enforced() {
        assert!(matches!(un_recursive::<f64>(0), Err(StringError::QubitCountRange { .. })));
        assert!(matches!(un_recursive::<f64>(13), Err(StringError::QubitCountRange { .. })));
        assert!(matches!(cnot::<f64>(3, 0, 1), Err(StringError::QubitIndexRange { .. })));
    }
}
