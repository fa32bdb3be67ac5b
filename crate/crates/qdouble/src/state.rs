//! Sparse states in the doubled Hilbert space.
//!
//! A density operator ρ = Σ ρ_ij |i⟩⟨j| on the edge spins is stored as the
//! vector |ρ⟩ = Σ ρ_ij |i⟩|j⟩ with a *ket* layer and a *bra* layer, one
//! group-element slot per edge in each layer. Configurations are packed into
//! a single `u128` key; a state is a sorted vector of `(key, amplitude)`
//! pairs.
//!
//! The module tracks the un-normalized |ρ⟩ through channel applications —
//! trace preservation is then directly checkable — and normalizes only at
//! measurement boundaries.
//!
//! All reductions (inner products, traces, norms) and all map applications
//! are deterministic: entries are processed in key order with fixed-size
//! chunking, so results do not depend on the rayon thread count.

use std::io::Write;
use std::ops::Add;
use std::sync::Arc;

use num_traits::Zero;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::group::{FiniteGroup, GroupElement};
use crate::lattice::Lattice;
use crate::scalar::{Amplitude, Scalar};

#[derive(Debug, Error)]
pub enum StateError {
    #[error("configuration needs {needed} bits but at most 128 are available")]
    ConfigTooWide { needed: usize },
    #[error("group element index {0} does not fit the packed slot width")]
    ValueTooWide(usize),
    #[error("edge-value vector has length {got}, lattice has {expected} edges")]
    WrongEdgeCount { got: usize, expected: usize },
    #[error("cannot normalize a state with zero norm")]
    ZeroNorm,
    #[error("dense representation of dimension {dim} exceeds the cap of {cap}")]
    DenseTooLarge { dim: usize, cap: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which layer of the doubled space an operator acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Ket,
    Bra,
}

/// Packs `2E` group-element slots (ket layer then bra layer) into a `u128`.
#[derive(Clone, Copy, Debug)]
pub struct ConfigPacker {
    bits: u32,
    edge_count: usize,
    slot_mask: u128,
}

impl ConfigPacker {
    pub fn new(group_order: usize, edge_count: usize) -> Result<Self, StateError> {
        let bits = (usize::BITS - (group_order - 1).leading_zeros()).max(1);
        let needed = bits as usize * 2 * edge_count;
        if needed > 128 {
            return Err(StateError::ConfigTooWide { needed });
        }
        Ok(ConfigPacker { bits, edge_count, slot_mask: (1u128 << bits) - 1 })
    }

    pub fn bits_per_slot(&self) -> u32 {
        self.bits
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    fn slot(&self, layer: Layer, edge: usize) -> usize {
        match layer {
            Layer::Ket => edge,
            Layer::Bra => self.edge_count + edge,
        }
    }

    pub fn get(&self, config: u128, layer: Layer, edge: usize) -> GroupElement {
        let s = self.slot(layer, edge);
        GroupElement(((config >> (s as u32 * self.bits)) & self.slot_mask) as u16)
    }

    pub fn set(&self, config: u128, layer: Layer, edge: usize, value: GroupElement) -> u128 {
        let s = self.slot(layer, edge);
        let shift = s as u32 * self.bits;
        (config & !(self.slot_mask << shift)) | ((value.index() as u128) << shift)
    }

    pub fn pack(
        &self,
        ket: &[GroupElement],
        bra: &[GroupElement],
    ) -> Result<u128, StateError> {
        if ket.len() != self.edge_count || bra.len() != self.edge_count {
            return Err(StateError::WrongEdgeCount {
                got: ket.len().max(bra.len()),
                expected: self.edge_count,
            });
        }
        let mut c = 0u128;
        for (e, &g) in ket.iter().enumerate() {
            if (g.index() as u128) > self.slot_mask {
                return Err(StateError::ValueTooWide(g.index()));
            }
            c = self.set(c, Layer::Ket, e, g);
        }
        for (e, &g) in bra.iter().enumerate() {
            if (g.index() as u128) > self.slot_mask {
                return Err(StateError::ValueTooWide(g.index()));
            }
            c = self.set(c, Layer::Bra, e, g);
        }
        Ok(c)
    }

    pub fn unpack(&self, config: u128, layer: Layer) -> Vec<GroupElement> {
        (0..self.edge_count).map(|e| self.get(config, layer, e)).collect()
    }

    /// True when the ket and bra layers carry the same edge values.
    pub fn is_diagonal(&self, config: u128) -> bool {
        let half = self.bits * self.edge_count as u32;
        let low = config & ((1u128 << half) - 1);
        low == config >> half
    }

    /// Swaps the ket and bra layers.
    pub fn mirror(&self, config: u128) -> u128 {
        let half = self.bits * self.edge_count as u32;
        let low = config & ((1u128 << half) - 1);
        (low << half) | (config >> half)
    }
}

/// Shared immutable context: the gauge group, the lattice, and the packing
/// layout derived from them.
#[derive(Debug)]
pub struct Context {
    group: FiniteGroup,
    lattice: Lattice,
    packer: ConfigPacker,
}

impl Context {
    pub fn new(group: FiniteGroup, lattice: Lattice) -> Result<Arc<Self>, StateError> {
        let packer = ConfigPacker::new(group.order(), lattice.edge_count())?;
        Ok(Arc::new(Context { group, lattice, packer }))
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn packer(&self) -> &ConfigPacker {
        &self.packer
    }

    /// Single-layer Hilbert space dimension |G|^E, if it fits in a `usize`.
    pub fn dense_dim(&self) -> Option<usize> {
        let mut dim = 1usize;
        for _ in 0..self.lattice.edge_count() {
            dim = dim.checked_mul(self.group.order())?;
        }
        Some(dim)
    }
}

const SUM_CHUNK: usize = 1 << 12;

/// Chunked sum: sequential within fixed-size chunks, chunk partials combined
/// in order. The result is independent of the number of worker threads.
pub(crate) fn det_sum<S>(items: &[S]) -> S
where
    S: Copy + Zero + Add<Output = S> + Send + Sync,
{
    if items.len() <= SUM_CHUNK {
        return items.iter().fold(S::zero(), |acc, &x| acc + x);
    }
    let partials: Vec<S> = items
        .par_chunks(SUM_CHUNK)
        .map(|chunk| chunk.iter().fold(S::zero(), |acc, &x| acc + x))
        .collect();
    partials.into_iter().fold(S::zero(), |acc, x| acc + x)
}

#[derive(Serialize)]
struct DumpLine {
    ket: Vec<u16>,
    bra: Vec<u16>,
    re: f64,
    im: f64,
}

/// Sparse vector in the doubled space: sorted, key-unique `(config, amp)`
/// entries. Values are immutable; every operation returns a new state.
#[derive(Clone, Debug)]
pub struct SparseState<T: Scalar> {
    ctx: Arc<Context>,
    amps: Vec<(u128, Amplitude<T>)>,
}

impl<T: Scalar> SparseState<T> {
    /// The all-identity product configuration on both layers, amplitude 1:
    /// the vectorized pure state the preparation protocol starts from.
    pub fn initial_state(ctx: Arc<Context>) -> Self {
        SparseState { ctx, amps: vec![(0u128, Amplitude::new(T::one(), T::zero()))] }
    }

    /// Basis state |ket⟩|bra⟩ with amplitude 1.
    pub fn pure_basis(
        ctx: Arc<Context>,
        ket: &[GroupElement],
        bra: &[GroupElement],
    ) -> Result<Self, StateError> {
        let key = ctx.packer().pack(ket, bra)?;
        Ok(SparseState { ctx, amps: vec![(key, Amplitude::new(T::one(), T::zero()))] })
    }

    pub fn zero(ctx: Arc<Context>) -> Self {
        SparseState { ctx, amps: Vec::new() }
    }

    /// Builds a state from raw contributions: entries are stably sorted by
    /// key and equal keys merged additively, in input order.
    pub fn from_contributions(
        ctx: Arc<Context>,
        mut entries: Vec<(u128, Amplitude<T>)>,
    ) -> Self {
        entries.par_sort_by_key(|&(k, _)| k);
        let mut merged: Vec<(u128, Amplitude<T>)> = Vec::with_capacity(entries.len());
        for (k, a) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == k => last.1 = last.1 + a,
                _ => merged.push((k, a)),
            }
        }
        SparseState { ctx, amps: merged }
    }

    pub fn ctx(&self) -> &Arc<Context> {
        &self.ctx
    }

    pub fn support_size(&self) -> usize {
        self.amps.len()
    }

    pub fn entries(&self) -> &[(u128, Amplitude<T>)] {
        &self.amps
    }

    pub fn amplitude(&self, config: u128) -> Amplitude<T> {
        match self.amps.binary_search_by_key(&config, |&(k, _)| k) {
            Ok(i) => self.amps[i].1,
            Err(_) => Amplitude::zero(),
        }
    }

    fn assert_same_ctx(&self, other: &Self) {
        assert!(
            Arc::ptr_eq(&self.ctx, &other.ctx),
            "states belong to different contexts"
        );
    }

    /// Applies a one-to-one configuration map with a per-config amplitude
    /// factor (a permutation with phases).
    pub fn transform<F>(&self, f: F) -> Self
    where
        F: Fn(u128) -> (u128, Amplitude<T>) + Sync,
    {
        let entries: Vec<(u128, Amplitude<T>)> = self
            .amps
            .par_iter()
            .map(|&(k, a)| {
                let (k2, phase) = f(k);
                (k2, a * phase)
            })
            .collect();
        Self::from_contributions(self.ctx.clone(), entries)
    }

    /// Applies a map that sends one configuration to several weighted
    /// configurations (e.g. one step of an averaging channel). `f` pushes
    /// `(new_config, weight)` pairs for the given entry.
    pub fn transform_multi<F>(&self, fan_out: usize, f: F) -> Self
    where
        F: Fn(u128, Amplitude<T>, &mut Vec<(u128, Amplitude<T>)>) + Sync,
    {
        let entries: Vec<(u128, Amplitude<T>)> = self
            .amps
            .par_iter()
            .flat_map_iter(|&(k, a)| {
                let mut out = Vec::with_capacity(fan_out);
                f(k, a, &mut out);
                out
            })
            .collect();
        Self::from_contributions(self.ctx.clone(), entries)
    }

    /// `self + coeff · other` by a sorted merge walk.
    pub fn add_scaled(&self, coeff: Amplitude<T>, other: &Self) -> Self {
        self.assert_same_ctx(other);
        let (a, b) = (&self.amps, &other.amps);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            if j >= b.len() || (i < a.len() && a[i].0 < b[j].0) {
                out.push(a[i]);
                i += 1;
            } else if i >= a.len() || b[j].0 < a[i].0 {
                out.push((b[j].0, coeff * b[j].1));
                j += 1;
            } else {
                out.push((a[i].0, a[i].1 + coeff * b[j].1));
                i += 1;
                j += 1;
            }
        }
        SparseState { ctx: self.ctx.clone(), amps: out }
    }

    pub fn scale(&self, coeff: Amplitude<T>) -> Self {
        let amps = self.amps.par_iter().map(|&(k, a)| (k, a * coeff)).collect();
        SparseState { ctx: self.ctx.clone(), amps }
    }

    /// Drops entries with |amplitude| < eps. `prune(0)` keeps everything.
    pub fn prune(&self, eps: T) -> Self {
        let amps =
            self.amps.iter().copied().filter(|&(_, a)| a.norm() >= eps).collect();
        SparseState { ctx: self.ctx.clone(), amps }
    }

    /// Sesquilinear inner product ⟨self|other⟩ (conjugate-linear in `self`).
    pub fn inner(&self, other: &Self) -> Amplitude<T> {
        self.assert_same_ctx(other);
        let (a, b) = (&self.amps, &other.amps);
        let mut products = Vec::with_capacity(a.len().min(b.len()));
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            if a[i].0 < b[j].0 {
                i += 1;
            } else if b[j].0 < a[i].0 {
                j += 1;
            } else {
                products.push(a[i].1.conj() * b[j].1);
                i += 1;
                j += 1;
            }
        }
        det_sum(&products)
    }

    pub fn norm_sqr(&self) -> T {
        let squares: Vec<T> =
            self.amps.par_iter().map(|&(_, a)| crate::scalar::norm_sqr(a)).collect();
        det_sum(&squares)
    }

    pub fn norm(&self) -> T {
        self.norm_sqr().sqrt()
    }

    pub fn normalize(&self) -> Result<Self, StateError> {
        let n = self.norm();
        if !n.is_normal() {
            return Err(StateError::ZeroNorm);
        }
        Ok(self.scale(Amplitude::new(T::one() / n, T::zero())))
    }

    /// Tr ρ of the stored (un-normalized) density operator: the sum of
    /// amplitudes over configurations whose ket and bra layers agree.
    pub fn trace_of_rho(&self) -> Amplitude<T> {
        let packer = *self.ctx.packer();
        let diag: Vec<Amplitude<T>> = self
            .amps
            .par_iter()
            .filter(|&&(k, _)| packer.is_diagonal(k))
            .map(|&(_, a)| a)
            .collect();
        det_sum(&diag)
    }

    /// Overlap ⟨I|ρ⟩/‖ρ‖ with the maximally mixed vector
    /// |I⟩ = D^{−1/2} Σ_i |i⟩|i⟩, computed as D^{−1/2}·Tr ρ/‖ρ‖ without
    /// materializing |I⟩.
    pub fn overlap_with_identity(&self) -> Amplitude<T> {
        let d = T::from_usize(self.ctx.group().order())
            .unwrap()
            .powi(self.ctx.lattice().edge_count() as i32);
        let scale = T::one() / (d.sqrt() * self.norm());
        self.trace_of_rho() * Amplitude::new(scale, T::zero())
    }

    /// Max over stored configurations of |amp(k,b) − conj(amp(b,k))|,
    /// treating missing mirror entries as zero. Zero iff ρ is hermitian.
    pub fn hermiticity_defect(&self) -> T {
        let packer = *self.ctx.packer();
        self.amps
            .par_iter()
            .map(|&(k, a)| {
                let mirror = self.amplitude(packer.mirror(k));
                (a - mirror.conj()).norm()
            })
            .reduce(T::zero, T::max)
    }

    /// Writes one JSON object per stored entry, in configuration order:
    /// `{"ket":[...],"bra":[...],"re":x,"im":y}` with group-element indices.
    pub fn dump_jsonl<W: Write>(&self, mut w: W) -> Result<(), StateError> {
        let packer = self.ctx.packer();
        for &(k, a) in &self.amps {
            let line = DumpLine {
                ket: packer.unpack(k, Layer::Ket).iter().map(|g| g.index() as u16).collect(),
                bra: packer.unpack(k, Layer::Bra).iter().map(|g| g.index() as u16).collect(),
                re: a.re.to_f64().unwrap_or(f64::NAN),
                im: a.im.to_f64().unwrap_or(f64::NAN),
            };
            let text = serde_json::to_string(&line).map_err(std::io::Error::other)?;
            writeln!(w, "{text}")?;
        }
        Ok(())
    }
}

/// Single-layer basis index of one layer of a packed configuration, with
/// edge 0 as the most significant base-|G| digit. This is the row/column
/// index used by the dense fallback.
pub fn basis_index(ctx: &Context, config: u128, layer: Layer) -> usize {
    let order = ctx.group().order();
    let packer = ctx.packer();
    let mut idx = 0usize;
    for e in 0..packer.edge_count() {
        idx = idx * order + packer.get(config, layer, e).index();
    }
    idx
}
