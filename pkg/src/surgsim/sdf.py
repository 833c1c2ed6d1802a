"""Analytic signed-distance shapes used as instrument geometry.

Shapes form a small tree (primitives, unions, smooth unions, rigid poses).
`sdf_eval` is the reference evaluation; `compile_shape` flattens a tree into
the array program consumed by the numba narrow-phase kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

# Leaf kind codes shared with the compiled kernels.
KIND_SPHERE = 0
KIND_CAPSULE = 1
KIND_ROUNDED_BOX = 2

# Program opcodes: push leaf distance, hard min, polynomial smooth min.
OP_LEAF = 0
OP_MIN = 1
OP_SMIN = 2

# Documented tie-break gradient at interior singularities (e.g. sphere center).
TIE_BREAK_GRADIENT = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class Sphere:
    radius: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Capsule:
    """Segment from `a` to `b` inflated by `radius`."""

    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float


@dataclass(frozen=True)
class RoundedBox:
    """Axis-aligned box at the origin with the given half extents, edges
    rounded by `round_radius` (the half extents are outer bounds)."""

    half_extents: tuple[float, float, float]
    round_radius: float = 0.0


@dataclass(frozen=True)
class Union:
    children: tuple = ()


@dataclass(frozen=True)
class SmoothUnion:
    """Polynomial smooth min; result is within [min - smoothing/4, min]."""

    smoothing: float
    children: tuple = ()


@dataclass(frozen=True)
class Posed:
    """Rigid transform applied to a child shape. Quaternion is (x, y, z, w)."""

    position: tuple[float, float, float]
    quaternion: tuple[float, float, float, float]
    child: object = None


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-12:
        return TIE_BREAK_GRADIENT.copy()
    return v / n


def _sphere_eval(shape: Sphere, p: np.ndarray):
    d = p - np.asarray(shape.center)
    return float(np.linalg.norm(d)) - shape.radius, _normalize(d)


def _capsule_eval(shape: Capsule, p: np.ndarray):
    a = np.asarray(shape.a, dtype=np.float64)
    ab = np.asarray(shape.b, dtype=np.float64) - a
    denom = float(ab @ ab)
    t = 0.0 if denom < 1e-30 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    d = p - (a + t * ab)
    return float(np.linalg.norm(d)) - shape.radius, _normalize(d)


def _rounded_box_eval(shape: RoundedBox, p: np.ndarray):
    he = np.asarray(shape.half_extents, dtype=np.float64) - shape.round_radius
    q = np.abs(p) - he
    sign = np.where(p >= 0.0, 1.0, -1.0)
    outside = np.maximum(q, 0.0)
    out_len = float(np.linalg.norm(outside))
    if out_len > 0.0:
        return out_len + min(float(q.max()), 0.0) - shape.round_radius, _normalize(sign * outside)
    # Fully inside: gradient along the least-deep axis; ties resolved x, y, z.
    axis = int(np.argmax(q))
    g = np.zeros(3)
    g[axis] = sign[axis]
    return float(q.max()) - shape.round_radius, g


def _smooth_min(d1: float, g1: np.ndarray, d2: float, g2: np.ndarray, k: float):
    if k <= 0.0:
        return (d1, g1) if d1 <= d2 else (d2, g2)
    h = np.clip(0.5 + 0.5 * (d2 - d1) / k, 0.0, 1.0)
    d = d2 * (1.0 - h) + d1 * h - k * h * (1.0 - h)
    return float(d), _normalize(g2 * (1.0 - h) + g1 * h)


def sdf_eval(shape, p) -> tuple[float, np.ndarray]:
    """Signed distance (negative inside) and outward unit gradient at `p`."""
    p = np.asarray(p, dtype=np.float64)
    if isinstance(shape, Sphere):
        return _sphere_eval(shape, p)
    if isinstance(shape, Capsule):
        return _capsule_eval(shape, p)
    if isinstance(shape, RoundedBox):
        return _rounded_box_eval(shape, p)
    if isinstance(shape, Union):
        best, gbest = np.inf, TIE_BREAK_GRADIENT
        for child in shape.children:
            d, g = sdf_eval(child, p)
            if d < best:
                best, gbest = d, g
        return float(best), gbest
    if isinstance(shape, SmoothUnion):
        d, g = sdf_eval(shape.children[0], p)
        for child in shape.children[1:]:
            d2, g2 = sdf_eval(child, p)
            d, g = _smooth_min(d, g, d2, g2, shape.smoothing)
        return d, g
    if isinstance(shape, Posed):
        rot = Rotation.from_quat(shape.quaternion)
        local = rot.inv().apply(p - np.asarray(shape.position))
        d, g = sdf_eval(shape.child, local)
        return d, rot.apply(g)
    raise TypeError(f"not an SDF shape: {type(shape).__name__}")


@dataclass
class CompiledSdf:
    """Flat postorder program over world-space leaves for the numba kernels."""

    ops: np.ndarray          # (k, 2) int64: (opcode, leaf index or 0)
    op_smooth: np.ndarray    # (k,) float64 smoothing per SMIN op
    leaf_kind: np.ndarray    # (L,) int64
    leaf_params: np.ndarray  # (L, 4) float64
    leaf_rot: np.ndarray     # (L, 3, 3) world->local rotation
    leaf_trans: np.ndarray   # (L, 3) world leaf origin
    bounds_min: np.ndarray = field(default=None)
    bounds_max: np.ndarray = field(default=None)
    leaf_bmin: np.ndarray = field(default=None)   # (L, 3) per-leaf boxes for
    leaf_bmax: np.ndarray = field(default=None)   # tight broad-phase queries
    slack: float = 0.0                            # smooth-union bound growth


def _leaf_bounds(kind: int, params: np.ndarray, rot: np.ndarray, trans: np.ndarray):
    if kind == KIND_SPHERE:
        ext = np.full(3, params[0])
    elif kind == KIND_CAPSULE:
        tip = rot.T @ np.array([0.0, 0.0, params[1]])
        return trans + np.minimum(0.0, tip) - params[0], trans + np.maximum(0.0, tip) + params[0]
    else:
        corners = np.array(
            [[sx * params[0], sy * params[1], sz * params[2]]
             for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        ) @ rot  # rot.T applied to each corner
        return trans + corners.min(axis=0), trans + corners.max(axis=0)
    return trans - ext, trans + ext


def compile_shape(shape) -> CompiledSdf:
    """Flatten a shape tree, baking accumulated rigid poses into each leaf."""
    leaves: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = []
    ops: list[tuple[int, int]] = []
    smooth: list[float] = []
    slack = [0.0]  # smooth-union bound growth for conservative AABBs

    def emit_leaf(kind, params, rot, trans):
        ops.append((OP_LEAF, len(leaves)))
        smooth.append(0.0)
        leaves.append((kind, params, rot, trans))

    def walk(node, rot: np.ndarray, trans: np.ndarray):
        # rot maps world -> local for the frame accumulated so far.
        if isinstance(node, Sphere):
            center = trans + rot.T @ np.asarray(node.center, dtype=np.float64)
            emit_leaf(KIND_SPHERE, np.array([node.radius, 0.0, 0.0, 0.0]), np.eye(3), center)
        elif isinstance(node, Capsule):
            a = np.asarray(node.a, dtype=np.float64)
            b = np.asarray(node.b, dtype=np.float64)
            wa, wb = trans + rot.T @ a, trans + rot.T @ b
            axis = wb - wa
            h = float(np.linalg.norm(axis))
            if h < 1e-12:
                emit_leaf(KIND_SPHERE, np.array([node.radius, 0.0, 0.0, 0.0]), np.eye(3), wa)
                return
            # Local frame with +z along the segment.
            za = axis / h
            helper = np.array([1.0, 0.0, 0.0]) if abs(za[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            xa = np.cross(helper, za)
            xa /= np.linalg.norm(xa)
            ya = np.cross(za, xa)
            world_to_local = np.stack([xa, ya, za], axis=0)
            emit_leaf(KIND_CAPSULE, np.array([node.radius, h, 0.0, 0.0]), world_to_local, wa)
        elif isinstance(node, RoundedBox):
            he = np.asarray(node.half_extents, dtype=np.float64)
            emit_leaf(
                KIND_ROUNDED_BOX,
                np.array([he[0], he[1], he[2], node.round_radius]),
                rot.copy(),
                trans.copy(),
            )
        elif isinstance(node, Union):
            if not node.children:
                raise ValueError("empty union")
            for i, child in enumerate(node.children):
                walk(child, rot, trans)
                if i > 0:
                    ops.append((OP_MIN, 0))
                    smooth.append(0.0)
        elif isinstance(node, SmoothUnion):
            if not node.children:
                raise ValueError("empty smooth union")
            slack[0] = max(slack[0], node.smoothing / 4.0)
            for i, child in enumerate(node.children):
                walk(child, rot, trans)
                if i > 0:
                    ops.append((OP_SMIN, 0))
                    smooth.append(node.smoothing)
        elif isinstance(node, Posed):
            child_rot = Rotation.from_quat(node.quaternion).as_matrix()
            # world -> new local = (accumulated local -> child local) composed
            walk(node.child, child_rot.T @ rot, trans + rot.T @ np.asarray(node.position))
        else:
            raise TypeError(f"not an SDF shape: {type(node).__name__}")

    walk(shape, np.eye(3), np.zeros(3))

    kind = np.array([l[0] for l in leaves], dtype=np.int64)
    params = np.stack([l[1] for l in leaves])
    rots = np.stack([l[2] for l in leaves])
    trans = np.stack([l[3] for l in leaves])
    leaf_bmin = np.zeros((len(leaves), 3))
    leaf_bmax = np.zeros((len(leaves), 3))
    for i in range(len(leaves)):
        leaf_bmin[i], leaf_bmax[i] = _leaf_bounds(kind[i], params[i], rots[i], trans[i])
    return CompiledSdf(
        ops=np.array(ops, dtype=np.int64),
        op_smooth=np.array(smooth),
        leaf_kind=kind,
        leaf_params=np.ascontiguousarray(params),
        leaf_rot=np.ascontiguousarray(rots),
        leaf_trans=np.ascontiguousarray(trans),
        bounds_min=leaf_bmin.min(axis=0) - slack[0],
        bounds_max=leaf_bmax.max(axis=0) + slack[0],
        leaf_bmin=leaf_bmin,
        leaf_bmax=leaf_bmax,
        slack=slack[0],
    )


def transform_compiled(local: CompiledSdf, rotation: np.ndarray, translation) -> CompiledSdf:
    """Apply a rigid transform (local -> world) to a compiled shape without
    recompiling; `rotation` is a 3x3 matrix. Cheap enough for per-substep use."""
    t = np.asarray(translation, dtype=np.float64)
    rot = local.leaf_rot @ rotation.T
    trans = t + local.leaf_trans @ rotation.T
    center = (0.5 * (local.leaf_bmin + local.leaf_bmax)) @ rotation.T + t
    half = (0.5 * (local.leaf_bmax - local.leaf_bmin)) @ np.abs(rotation).T
    leaf_bmin = center - half
    leaf_bmax = center + half
    return CompiledSdf(
        ops=local.ops,
        op_smooth=local.op_smooth,
        leaf_kind=local.leaf_kind,
        leaf_params=local.leaf_params,
        leaf_rot=np.ascontiguousarray(rot),
        leaf_trans=np.ascontiguousarray(trans),
        bounds_min=leaf_bmin.min(axis=0) - local.slack,
        bounds_max=leaf_bmax.max(axis=0) + local.slack,
        leaf_bmin=leaf_bmin,
        leaf_bmax=leaf_bmax,
        slack=local.slack,
    )
