//! Oriented 2D cell complexes carrying the model's spins on edges.
//!
//! The main constructor is [`Lattice::torus`], an `Lx × Ly` square lattice
//! with periodic boundaries: horizontal edges point in `+x`, vertical edges
//! in `+y`, and every face is a counterclockwise square. Explicit complexes
//! (used for degree-limited test stars) can be built with
//! [`Lattice::explicit`].
//!
//! String geometry ([`StringSpec`]) describes comb-shaped operator supports:
//! a connected base walk plus transverse teeth, each tooth attached at a base
//! vertex and flagged with its direction relative to that vertex.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Traversal sign of an edge inside a walk: `Plus` follows the edge's own
/// direction, `Minus` goes against it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    pub fn from_i8(s: i8) -> Option<Sign> {
        match s {
            1 => Some(Sign::Plus),
            -1 => Some(Sign::Minus),
            _ => None,
        }
    }

    pub fn to_i8(self) -> i8 {
        match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }
}

/// Direction of an edge relative to a vertex it touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToothSide {
    /// The edge's tail sits at the vertex (points away from it).
    Out,
    /// The edge's head sits at the vertex (points into it).
    In,
}

/// Directed edge between two vertices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
}

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("torus dimensions must be at least 2x2, got {lx}x{ly}")]
    BadDimensions { lx: usize, ly: usize },
    #[error("vertex {0} out of range")]
    VertexRange(usize),
    #[error("edge {0} out of range")]
    EdgeRange(usize),
    #[error("face {0} out of range")]
    FaceRange(usize),
    #[error("face {face} boundary breaks at step {step}: walk is not connected")]
    FaceWalkBroken { face: usize, step: usize },
    #[error("face {face} boundary does not close")]
    FaceWalkOpen { face: usize },
    #[error("edge {edge} does not border exactly two faces with opposite traversal")]
    SurfaceViolation { edge: usize },
    #[error("vertex {vertex} is not on face {face}")]
    VertexNotOnFace { vertex: usize, face: usize },
    #[error("string base is empty")]
    EmptyBase,
    #[error("string base breaks at step {0}: walk is not connected")]
    BaseDisconnected(usize),
    #[error("string is flagged closed but the walk does not return to its start")]
    NotClosed,
    #[error("tooth {0}: attach index out of range")]
    ToothAttachRange(usize),
    #[error("tooth {0} duplicates a base edge")]
    ToothOnBase(usize),
    #[error("tooth {0} is not incident to its attach vertex")]
    ToothNotIncident(usize),
    #[error("tooth {0}: side flag contradicts the edge direction at the attach vertex")]
    ToothSideMismatch(usize),
    #[error("tooth {0} repeats an earlier (edge, attach) pair")]
    DuplicateTooth(usize),
    #[error("winding numbers are only defined on torus lattices")]
    NotTorus,
    #[error("loop walk does not close")]
    LoopNotClosed,
    #[error("consecutive faces {0} and {1} do not share exactly one edge")]
    AmbiguousDualStep(usize, usize),
}

/// A finite oriented 2-complex: vertices, directed edges, face boundary walks.
#[derive(Clone, Debug)]
pub struct Lattice {
    vertex_count: usize,
    edges: Vec<Edge>,
    faces: Vec<Vec<(usize, Sign)>>,
    /// Per-vertex incident edges, ordered by edge id.
    star: Vec<Vec<(usize, ToothSide)>>,
    torus_dims: Option<(usize, usize)>,
}

impl Lattice {
    /// Periodic `lx × ly` square lattice. Faces are counterclockwise squares;
    /// the minimum size is 2x2 so that no face touches itself along an edge.
    pub fn torus(lx: usize, ly: usize) -> Result<Self, LatticeError> {
        if lx < 2 || ly < 2 {
            return Err(LatticeError::BadDimensions { lx, ly });
        }
        let v_id = |x: usize, y: usize| y * lx + x;
        let h_id = |x: usize, y: usize| y * lx + x;
        let vv_id = |x: usize, y: usize| lx * ly + y * lx + x;
        let mut edges = Vec::with_capacity(2 * lx * ly);
        for y in 0..ly {
            for x in 0..lx {
                edges.push(Edge { tail: v_id(x, y), head: v_id((x + 1) % lx, y) });
            }
        }
        for y in 0..ly {
            for x in 0..lx {
                edges.push(Edge { tail: v_id(x, y), head: v_id(x, (y + 1) % ly) });
            }
        }
        let mut faces = Vec::with_capacity(lx * ly);
        for y in 0..ly {
            for x in 0..lx {
                faces.push(vec![
                    (h_id(x, y), Sign::Plus),
                    (vv_id((x + 1) % lx, y), Sign::Plus),
                    (h_id(x, (y + 1) % ly), Sign::Minus),
                    (vv_id(x, y), Sign::Minus),
                ]);
            }
        }
        let lattice = Self::assemble(lx * ly, edges, faces, Some((lx, ly)))?;
        lattice.validate_closed_surface()?;
        Ok(lattice)
    }

    /// Arbitrary complex from explicit data. Face walks are validated for
    /// connectivity and closure; the closed-surface condition is not imposed
    /// (test fixtures may have no faces at all).
    pub fn explicit(
        vertex_count: usize,
        edge_list: Vec<(usize, usize)>,
        faces: Vec<Vec<(usize, Sign)>>,
    ) -> Result<Self, LatticeError> {
        let edges = edge_list
            .into_iter()
            .map(|(tail, head)| {
                if tail >= vertex_count {
                    return Err(LatticeError::VertexRange(tail));
                }
                if head >= vertex_count {
                    return Err(LatticeError::VertexRange(head));
                }
                Ok(Edge { tail, head })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::assemble(vertex_count, edges, faces, None)
    }

    fn assemble(
        vertex_count: usize,
        edges: Vec<Edge>,
        faces: Vec<Vec<(usize, Sign)>>,
        torus_dims: Option<(usize, usize)>,
    ) -> Result<Self, LatticeError> {
        let mut star = vec![Vec::new(); vertex_count];
        for (e, edge) in edges.iter().enumerate() {
            star[edge.tail].push((e, ToothSide::Out));
            star[edge.head].push((e, ToothSide::In));
        }
        for list in &mut star {
            list.sort();
        }
        let lattice = Lattice { vertex_count, edges, faces, star, torus_dims };
        for (f, boundary) in lattice.faces.iter().enumerate() {
            let walk = lattice.walk_vertices(boundary, f)?;
            if walk.first() != walk.last() {
                return Err(LatticeError::FaceWalkOpen { face: f });
            }
        }
        Ok(lattice)
    }

    /// Vertices visited by a walk, with `walk[0]` the start vertex; errors if
    /// consecutive steps do not share a vertex.
    fn walk_vertices(
        &self,
        steps: &[(usize, Sign)],
        face_for_error: usize,
    ) -> Result<Vec<usize>, LatticeError> {
        let mut out = Vec::with_capacity(steps.len() + 1);
        for (i, &(e, sign)) in steps.iter().enumerate() {
            let edge = self.edge(e)?;
            let (from, to) = match sign {
                Sign::Plus => (edge.tail, edge.head),
                Sign::Minus => (edge.head, edge.tail),
            };
            if i == 0 {
                out.push(from);
            } else if *out.last().unwrap() != from {
                return Err(LatticeError::FaceWalkBroken { face: face_for_error, step: i });
            }
            out.push(to);
        }
        Ok(out)
    }

    /// Checks that every edge borders exactly two faces with opposite net
    /// traversal, and (for torus lattices) that `V - E + F = 0`.
    pub fn validate_closed_surface(&self) -> Result<(), LatticeError> {
        let mut traversals: Vec<Vec<Sign>> = vec![Vec::new(); self.edges.len()];
        for boundary in &self.faces {
            for &(e, sign) in boundary {
                traversals[e].push(sign);
            }
        }
        for (e, t) in traversals.iter().enumerate() {
            if t.len() != 2 || t[0] == t[1] {
                return Err(LatticeError::SurfaceViolation { edge: e });
            }
        }
        if self.torus_dims.is_some() {
            let euler = self.vertex_count as i64 - self.edges.len() as i64 + self.faces.len() as i64;
            debug_assert_eq!(euler, 0, "torus Euler characteristic");
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn torus_dims(&self) -> Option<(usize, usize)> {
        self.torus_dims
    }

    pub fn edge(&self, e: usize) -> Result<Edge, LatticeError> {
        self.edges.get(e).copied().ok_or(LatticeError::EdgeRange(e))
    }

    /// Incident edges at `v` with their direction flags, ordered by edge id.
    pub fn star(&self, v: usize) -> Result<&[(usize, ToothSide)], LatticeError> {
        self.star.get(v).map(|s| s.as_slice()).ok_or(LatticeError::VertexRange(v))
    }

    /// Raw boundary walk of face `f` as stored.
    pub fn face(&self, f: usize) -> Result<&[(usize, Sign)], LatticeError> {
        self.faces.get(f).map(|b| b.as_slice()).ok_or(LatticeError::FaceRange(f))
    }

    /// Boundary walk of `f` rotated to start at `base_vertex`, preserving the
    /// cyclic order. The flux of a face is always read from a base vertex.
    pub fn face_boundary(
        &self,
        f: usize,
        base_vertex: usize,
    ) -> Result<Vec<(usize, Sign)>, LatticeError> {
        let boundary = self.face(f)?;
        let verts = self.walk_vertices(boundary, f)?;
        let offset = verts[..verts.len() - 1]
            .iter()
            .position(|&v| v == base_vertex)
            .ok_or(LatticeError::VertexNotOnFace { vertex: base_vertex, face: f })?;
        let mut rotated = boundary.to_vec();
        rotated.rotate_left(offset);
        Ok(rotated)
    }

    /// Faces whose boundary contains edge `e`.
    pub fn faces_of_edge(&self, e: usize) -> Vec<usize> {
        self.faces
            .iter()
            .enumerate()
            .filter(|(_, b)| b.iter().any(|&(be, _)| be == e))
            .map(|(f, _)| f)
            .collect()
    }

    /// Torus vertex id for coordinates `(x, y)`.
    pub fn vertex_at(&self, x: usize, y: usize) -> Result<usize, LatticeError> {
        let (lx, ly) = self.torus_dims.ok_or(LatticeError::NotTorus)?;
        Ok((y % ly) * lx + (x % lx))
    }

    /// Torus horizontal edge `(x,y) → (x+1,y)`.
    pub fn h_edge(&self, x: usize, y: usize) -> Result<usize, LatticeError> {
        let (lx, ly) = self.torus_dims.ok_or(LatticeError::NotTorus)?;
        Ok((y % ly) * lx + (x % lx))
    }

    /// Torus vertical edge `(x,y) → (x,y+1)`.
    pub fn v_edge(&self, x: usize, y: usize) -> Result<usize, LatticeError> {
        let (lx, ly) = self.torus_dims.ok_or(LatticeError::NotTorus)?;
        Ok(lx * ly + (y % ly) * lx + (x % lx))
    }

    /// Torus face with lower-left corner `(x, y)`.
    pub fn face_at(&self, x: usize, y: usize) -> Result<usize, LatticeError> {
        let (lx, ly) = self.torus_dims.ok_or(LatticeError::NotTorus)?;
        Ok((y % ly) * lx + (x % lx))
    }

    /// Edges crossed by a dual-lattice path, given as a face sequence. Each
    /// consecutive pair must share exactly one edge.
    pub fn dual_path_crossings(&self, path: &[usize]) -> Result<Vec<usize>, LatticeError> {
        let mut crossings = Vec::new();
        for pair in path.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let ba = self.face(a)?;
            let bb = self.face(b)?;
            let shared: Vec<usize> = ba
                .iter()
                .map(|&(e, _)| e)
                .filter(|e| bb.iter().any(|&(be, _)| be == *e))
                .collect();
            if shared.len() != 1 {
                return Err(LatticeError::AmbiguousDualStep(a, b));
            }
            crossings.push(shared[0]);
        }
        Ok(crossings)
    }

    /// Winding numbers `(wx, wy)` of a closed walk on a torus: the net
    /// displacement divided by the lattice periods.
    pub fn loop_class(&self, steps: &[(usize, Sign)]) -> Result<(i64, i64), LatticeError> {
        let (lx, ly) = self.torus_dims.ok_or(LatticeError::NotTorus)?;
        let verts = self.walk_vertices(steps, usize::MAX).map_err(|e| match e {
            LatticeError::FaceWalkBroken { step, .. } => LatticeError::BaseDisconnected(step),
            other => other,
        })?;
        if verts.first() != verts.last() {
            return Err(LatticeError::LoopNotClosed);
        }
        let horizontal = lx * ly; // ids below this are horizontal edges
        let (mut dx, mut dy) = (0i64, 0i64);
        for &(e, sign) in steps {
            let unit = sign.to_i8() as i64;
            if e < horizontal {
                dx += unit;
            } else {
                dy += unit;
            }
        }
        debug_assert_eq!(dx.rem_euclid(lx as i64), 0);
        debug_assert_eq!(dy.rem_euclid(ly as i64), 0);
        Ok((dx / lx as i64, dy / ly as i64))
    }
}

/// One tooth of a comb: an edge hanging off the base walk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tooth {
    pub edge: usize,
    /// Number of base edges preceding the attachment vertex.
    pub attach: usize,
    pub side: ToothSide,
}

/// Comb-shaped operator support: base walk plus teeth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StringSpec {
    pub base: Vec<(usize, Sign)>,
    pub teeth: Vec<Tooth>,
    pub closed: bool,
}

/// A [`StringSpec`] that passed validation, with the base walk's vertex
/// sequence cached (`vertices[i]` is the vertex after `i` base edges).
#[derive(Clone, Debug)]
pub struct CheckedString {
    pub spec: StringSpec,
    pub vertices: Vec<usize>,
}

impl CheckedString {
    pub fn start_vertex(&self) -> usize {
        self.vertices[0]
    }

    pub fn end_vertex(&self) -> usize {
        *self.vertices.last().unwrap()
    }

    pub fn base_len(&self) -> usize {
        self.spec.base.len()
    }

    /// Teeth sorted by attach index (stable), the order in which prefix
    /// products are accumulated.
    pub fn teeth_in_order(&self) -> Vec<Tooth> {
        let mut teeth = self.spec.teeth.clone();
        teeth.sort_by_key(|t| t.attach);
        teeth
    }
}

/// Validates a string spec against a lattice: the base must be a connected
/// walk (returning to its start when `closed`), and every tooth must attach
/// at a base vertex, off the base, with a side flag matching the edge's
/// actual direction there. The same tooth edge may attach at two different
/// walk positions (this happens for loops on small tori), but exact
/// duplicates are rejected.
pub fn validate_string_spec(
    lattice: &Lattice,
    spec: &StringSpec,
) -> Result<CheckedString, LatticeError> {
    if spec.base.is_empty() {
        return Err(LatticeError::EmptyBase);
    }
    let mut vertices = Vec::with_capacity(spec.base.len() + 1);
    for (i, &(e, sign)) in spec.base.iter().enumerate() {
        let edge = lattice.edge(e)?;
        let (from, to) = match sign {
            Sign::Plus => (edge.tail, edge.head),
            Sign::Minus => (edge.head, edge.tail),
        };
        if i == 0 {
            vertices.push(from);
        } else if *vertices.last().unwrap() != from {
            return Err(LatticeError::BaseDisconnected(i));
        }
        vertices.push(to);
    }
    if spec.closed && vertices.first() != vertices.last() {
        return Err(LatticeError::NotClosed);
    }
    let max_attach = if spec.closed { spec.base.len() - 1 } else { spec.base.len() };
    let mut seen = std::collections::HashSet::new();
    for (i, tooth) in spec.teeth.iter().enumerate() {
        if tooth.attach > max_attach {
            return Err(LatticeError::ToothAttachRange(i));
        }
        if spec.base.iter().any(|&(e, _)| e == tooth.edge) {
            return Err(LatticeError::ToothOnBase(i));
        }
        let edge = lattice.edge(tooth.edge)?;
        let at = vertices[tooth.attach];
        let incident_out = edge.tail == at;
        let incident_in = edge.head == at;
        if !incident_out && !incident_in {
            return Err(LatticeError::ToothNotIncident(i));
        }
        let ok = match tooth.side {
            ToothSide::Out => incident_out,
            ToothSide::In => incident_in,
        };
        if !ok {
            return Err(LatticeError::ToothSideMismatch(i));
        }
        if !seen.insert((tooth.edge, tooth.attach)) {
            return Err(LatticeError::DuplicateTooth(i));
        }
    }
    Ok(CheckedString { spec: spec.clone(), vertices })
}

/// Builds the closed comb around a set of base-walk steps with teeth on every
/// non-base edge at every base vertex (the full-star loop used for closed
/// string operators).
pub fn full_teeth_loop(
    lattice: &Lattice,
    base: Vec<(usize, Sign)>,
) -> Result<StringSpec, LatticeError> {
    let probe = StringSpec { base: base.clone(), teeth: Vec::new(), closed: true };
    let checked = validate_string_spec(lattice, &probe)?;
    let mut teeth = Vec::new();
    for attach in 0..base.len() {
        let v = checked.vertices[attach];
        for &(e, side) in lattice.star(v)? {
            if base.iter().any(|&(be, _)| be == e) {
                continue;
            }
            teeth.push(Tooth { edge: e, attach, side });
        }
    }
    Ok(StringSpec { base, teeth, closed: true })
}
