"""Broad-phase AABB BVH over tissue surface elements and SDF narrow phase.

Surface triangles and surface vertices are the collision elements (tools only
touch the boundary). The BVH topology is rebuilt on topology changes and
refitted bottom-up every substep; queries never miss (boxes are conservative).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .sdf import CompiledSdf, compile_shape

ELEM_VERTEX = 0
ELEM_TRIANGLE = 1

NARROWPHASE_ITERATIONS = 16


@dataclass
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if np.any(self.min > self.max):
            raise ValueError("Aabb min must be <= max componentwise")

    def overlaps(self, other: "Aabb") -> bool:
        return bool(np.all(self.min <= other.max) and np.all(self.max >= other.min))


@dataclass
class Bvh:
    """Array-based binary tree in preorder (children follow their parent)."""

    elem_kind: np.ndarray   # (E,)
    elem_nv: np.ndarray     # (E,) vertex count per element (1 or 3)
    elem_vids: np.ndarray   # (E, 3), -1 padded
    node_left: np.ndarray
    node_right: np.ndarray
    node_elem: np.ndarray   # element index at leaves, -1 for internal nodes
    node_min: np.ndarray
    node_max: np.ndarray
    margin: float = 0.0
    _query_buf: np.ndarray = field(default=None, repr=False)

    @property
    def num_elements(self) -> int:
        return len(self.elem_kind)

    def refit(self, positions: np.ndarray) -> None:
        _kernels.refit_bvh(
            self.node_left, self.node_right, self.node_elem,
            self.node_min, self.node_max,
            self.elem_nv, self.elem_vids, positions, self.margin,
        )

    def query(self, box: Aabb) -> np.ndarray:
        """Element indices whose fat boxes overlap `box`; superset of the
        exact overlap set, in deterministic traversal order."""
        if self._query_buf is None:
            self._query_buf = np.empty(max(64, self.num_elements), dtype=np.int64)
        while True:
            n = _kernels.query_bvh(
                self.node_left, self.node_right, self.node_elem,
                self.node_min, self.node_max, box.min, box.max, self._query_buf,
            )
            if n <= len(self._query_buf):
                return self._query_buf[:n].copy()
            self._query_buf = np.empty(2 * n, dtype=np.int64)


def surface_elements(mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collision element arrays for a mesh: its surface triangles followed by
    the distinct surface vertices."""
    tris = mesh.surface if mesh.surface is not None else np.zeros((0, 3), dtype=np.int64)
    verts = np.unique(tris)
    kind = np.concatenate([
        np.full(len(tris), ELEM_TRIANGLE, dtype=np.int64),
        np.full(len(verts), ELEM_VERTEX, dtype=np.int64),
    ])
    nv = np.concatenate([
        np.full(len(tris), 3, dtype=np.int64),
        np.ones(len(verts), dtype=np.int64),
    ])
    vids = np.full((len(kind), 3), -1, dtype=np.int64)
    vids[: len(tris)] = tris
    vids[len(tris) :, 0] = verts
    return kind, nv, vids


def build_bvh(elem_kind, elem_nv, elem_vids, positions, margin: float = 0.0) -> Bvh:
    """Median-split build over element centroids; leaves hold one element."""
    n_elems = len(elem_kind)
    if n_elems == 0:
        raise ValueError("cannot build a BVH over an empty element set")
    elem_nv = np.ascontiguousarray(elem_nv, dtype=np.int64)
    elem_vids = np.ascontiguousarray(elem_vids, dtype=np.int64)
    centroids = np.zeros((n_elems, 3))
    for i in range(3):
        col = elem_vids[:, i]
        valid = col >= 0
        centroids[valid] += positions[col[valid]]
    centroids /= elem_nv[:, None]

    n_nodes = 2 * n_elems - 1
    node_left = np.full(n_nodes, -1, dtype=np.int64)
    node_right = np.full(n_nodes, -1, dtype=np.int64)
    node_elem = np.full(n_nodes, -1, dtype=np.int64)
    next_node = [0]

    def build(idx: np.ndarray) -> int:
        node = next_node[0]
        next_node[0] += 1
        if len(idx) == 1:
            node_elem[node] = idx[0]
            return node
        spread = centroids[idx].max(axis=0) - centroids[idx].min(axis=0)
        axis = int(np.argmax(spread))
        order = idx[np.argsort(centroids[idx, axis], kind="stable")]
        half = len(order) // 2
        node_left[node] = build(order[:half])
        node_right[node] = build(order[half:])
        return node

    import sys

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10000))
    try:
        build(np.arange(n_elems, dtype=np.int64))
    finally:
        sys.setrecursionlimit(limit)

    bvh = Bvh(
        elem_kind=np.ascontiguousarray(elem_kind, dtype=np.int64),
        elem_nv=elem_nv,
        elem_vids=elem_vids,
        node_left=node_left,
        node_right=node_right,
        node_elem=node_elem,
        node_min=np.zeros((n_nodes, 3)),
        node_max=np.zeros((n_nodes, 3)),
        margin=margin,
    )
    bvh.refit(positions)
    return bvh


def refit_bvh(bvh: Bvh, positions: np.ndarray) -> Bvh:
    bvh.refit(positions)
    return bvh


@dataclass
class Contact:
    """One element-vs-tool contact; lambdas accumulate over a substep."""

    elem_kind: int
    elem_index: int
    vertex_ids: np.ndarray      # (nv,)
    barycentric: np.ndarray     # (nv,), sums to 1, each in [0, 1]
    phi: float                  # signed distance at generation (negative inside)
    normal: np.ndarray          # unit outward SDF gradient
    lambda_n: float = 0.0
    normal_push: float = 0.0    # accumulated contact-point displacement along n
    tangent_corr: float = 0.0   # accumulated friction correction magnitude
    converged: bool = True


def _as_compiled(shape) -> CompiledSdf:
    return shape if isinstance(shape, CompiledSdf) else compile_shape(shape)


def closest_point_element_sdf(element_vertices, shape):
    """Closest point between a point/edge/triangle and an SDF iso-surface.

    Returns (barycentric, phi, normal). Projected gradient with fixed
    iterations and step halving; non-convergence still returns the best
    iterate (flagged in telemetry by the engine path).
    """
    ev = np.asarray(element_vertices, dtype=np.float64).reshape(-1, 3)
    nv = len(ev)
    if nv not in (1, 2, 3):
        raise ValueError(f"element must have 1..3 vertices, got {nv}")
    ex = np.zeros((3, 3))
    ex[:nv] = ev
    c = _as_compiled(shape)
    b0, b1, b2, phi, gx, gy, gz, _conv = _kernels.closest_point_on_element(
        ex, nv, c.ops, c.op_smooth, c.leaf_kind, c.leaf_params, c.leaf_rot, c.leaf_trans,
        NARROWPHASE_ITERATIONS,
    )
    return np.array([b0, b1, b2])[:nv], float(phi), np.array([gx, gy, gz])


def broadphase_candidates(bvh: Bvh, compiled: CompiledSdf, margin: float) -> np.ndarray:
    """Union of per-leaf box queries (much tighter than the whole-shape box
    for long thin tools); sorted and deduplicated for determinism."""
    grow = margin + compiled.slack
    hits = []
    for i in range(len(compiled.leaf_bmin)):
        box = Aabb(compiled.leaf_bmin[i] - grow, compiled.leaf_bmax[i] + grow)
        got = bvh.query(box)
        if len(got):
            hits.append(got)
    if not hits:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(hits))


def generate_contacts(bvh: Bvh, positions: np.ndarray, shape, margin: float) -> list[Contact]:
    """Broad phase via conservative per-leaf AABBs (+margin), narrow phase via
    per-element projected gradient; emits contacts where phi < margin."""
    compiled = _as_compiled(shape)
    candidates = broadphase_candidates(bvh, compiled, margin)
    if len(candidates) == 0:
        return []
    n = len(candidates)
    out_bary = np.zeros((n, 3))
    out_phi = np.zeros(n)
    out_normal = np.zeros((n, 3))
    out_conv = np.zeros(n, dtype=np.bool_)
    _kernels.narrowphase(
        candidates, n, bvh.elem_nv, bvh.elem_vids, positions,
        compiled.ops, compiled.op_smooth, compiled.leaf_kind, compiled.leaf_params,
        compiled.leaf_rot, compiled.leaf_trans,
        NARROWPHASE_ITERATIONS, margin, out_bary, out_phi, out_normal, out_conv,
    )
    contacts = []
    for i in range(n):
        if out_phi[i] < margin:
            e = candidates[i]
            nv = int(bvh.elem_nv[e])
            contacts.append(Contact(
                elem_kind=int(bvh.elem_kind[e]),
                elem_index=int(e),
                vertex_ids=bvh.elem_vids[e, :nv].copy(),
                barycentric=out_bary[i, :nv].copy(),
                phi=float(out_phi[i]),
                normal=out_normal[i].copy(),
                converged=bool(out_conv[i]),
            ))
    return contacts


def contacts_to_arrays(contacts: list[Contact]):
    """Pack a contact list into the flat arrays the solve kernel consumes."""
    n = len(contacts)
    nv = np.zeros(n, dtype=np.int64)
    vids = np.full((n, 3), -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    lam = np.zeros(n)
    acc_n = np.zeros(n)
    acc_t = np.zeros(n)
    for i, con in enumerate(contacts):
        k = len(con.vertex_ids)
        nv[i] = k
        vids[i, :k] = con.vertex_ids
        bary[i, :k] = con.barycentric
        lam[i] = con.lambda_n
        acc_n[i] = con.normal_push
        acc_t[i] = con.tangent_corr
    return nv, vids, bary, lam, acc_n, acc_t


def solve_contact(contact: Contact, positions, inv_masses, prev_positions, shape,
                  dt_s: float, friction_coeff: float = 0.0,
                  compliance: float = 0.0) -> np.ndarray:
    """Project one contact in place; returns the applied position corrections.

    Same kernel as the engine's batched path, run on a single contact.
    """
    compiled = _as_compiled(shape)
    nv, vids, bary, lam, acc_n, acc_t = contacts_to_arrays([contact])
    before = positions[contact.vertex_ids].copy()
    force = np.zeros(3)
    _kernels.solve_contacts(
        positions, prev_positions, inv_masses, nv, vids, bary,
        compiled.ops, compiled.op_smooth, compiled.leaf_kind, compiled.leaf_params,
        compiled.leaf_rot, compiled.leaf_trans,
        friction_coeff, compliance / (dt_s * dt_s), lam, acc_n, acc_t,
        force, 1.0 / (dt_s * dt_s),
    )
    contact.lambda_n = float(lam[0])
    contact.normal_push = float(acc_n[0])
    contact.tangent_corr = float(acc_t[0])
    return positions[contact.vertex_ids] - before
