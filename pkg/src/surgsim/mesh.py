"""Tetrahedral mesh: rest-state precomputation, surface extraction, mass lumping."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

# Elements with rest volume at or below this are numerically unusable.
MIN_TET_VOLUME = 1e-12

# Local vertex index patterns of the four outward faces of a positively
# oriented tet (i, j, k, l): opposite l, opposite k, opposite j, opposite i.
_FACE_PATTERNS = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], dtype=np.int64)


class MeshFormatError(ValueError):
    """Malformed mesh stream; carries the 1-based line number."""

    def __init__(self, line: int, detail: str):
        self.line = line
        super().__init__(f"line {line}: {detail}")


class DegenerateTetError(ValueError):
    """Tet with non-positive or vanishing volume; carries the tet index."""

    def __init__(self, tet: int, detail: str = "degenerate tetrahedron"):
        self.tet = tet
        super().__init__(f"tet {tet}: {detail}")


def lame_from_young_poisson(young_modulus: float, poisson_ratio: float) -> tuple[float, float]:
    """Standard isotropic elasticity conversion (E, nu) -> (lambda, mu) in Pa."""
    if young_modulus <= 0.0:
        raise ValueError(f"Young's modulus must be positive, got {young_modulus}")
    if not 0.0 <= poisson_ratio < 0.5:
        raise ValueError(
            f"Poisson ratio must lie in [0, 0.5), got {poisson_ratio} "
            "(incompressible limit is not representable)"
        )
    lam = young_modulus * poisson_ratio / ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio))
    mu = young_modulus / (2.0 * (1.0 + poisson_ratio))
    return lam, mu


@dataclass
class MaterialParams:
    """Elastic and contact material constants. All values synthetic defaults,
    not taken from measured tissue."""

    young_modulus: float = 1.0e4      # Pa
    poisson_ratio: float = 0.45
    density: float = 1050.0           # kg/m^3
    friction_coeff: float = 0.5
    lame_lambda: float = field(default=0.0)
    lame_mu: float = field(default=0.0)

    def __post_init__(self):
        if self.density <= 0.0:
            raise ValueError(f"density must be positive, got {self.density}")
        if self.friction_coeff < 0.0:
            raise ValueError(f"friction coefficient must be >= 0, got {self.friction_coeff}")
        if self.lame_lambda == 0.0 and self.lame_mu == 0.0:
            self.lame_lambda, self.lame_mu = lame_from_young_poisson(
                self.young_modulus, self.poisson_ratio
            )


@dataclass
class TetMesh:
    """Tetrahedral discretization with per-element rest state.

    vertices are in meters; inv_mass of 0 denotes a pinned (or orphaned)
    vertex. `alive` tracks resection: dead tets contribute neither surface
    nor mass nor constraints.
    """

    vertices: np.ndarray                       # (n, 3) float64
    tets: np.ndarray                           # (m, 4) int64
    rest_inv: np.ndarray | None = None         # (m, 3, 3) inverse rest-shape matrices
    rest_volume: np.ndarray | None = None      # (m,)
    inv_mass: np.ndarray | None = None         # (n,)
    pinned: np.ndarray | None = None           # (n,) bool
    alive: np.ndarray | None = None            # (m,) bool
    surface: np.ndarray | None = None          # (k, 3) oriented boundary triangles

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        n, m = len(self.vertices), len(self.tets)
        if self.inv_mass is None:
            self.inv_mass = np.zeros(n)
        if self.pinned is None:
            self.pinned = np.zeros(n, dtype=bool)
        if self.alive is None:
            self.alive = np.ones(m, dtype=bool)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    def shape_matrices(self, positions: np.ndarray | None = None) -> np.ndarray:
        """(m, 3, 3) matrices whose columns are the edge vectors of each tet."""
        x = self.vertices if positions is None else positions
        p = x[self.tets]  # (m, 4, 3)
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)

    def tet_volumes(self, positions: np.ndarray | None = None) -> np.ndarray:
        """Signed volumes det(D)/6 of every tet at the given (or rest) positions."""
        return np.linalg.det(self.shape_matrices(positions)) / 6.0

    def total_volume(self, positions: np.ndarray | None = None) -> float:
        """Sum of signed volumes over alive tets."""
        return float(self.tet_volumes(positions)[self.alive].sum())

    def refresh_surface(self) -> None:
        self.surface = extract_surface(self)


def compute_rest_state(mesh: TetMesh) -> TetMesh:
    """Fill rest-shape inverses and rest volumes in place.

    Negatively oriented tets are repaired by swapping their last two indices
    (a common exporter artifact); an irreparably degenerate tet raises
    DegenerateTetError naming it.
    """
    vols = mesh.tet_volumes()
    flipped = np.nonzero(vols < 0.0)[0]
    if len(flipped):
        mesh.tets[np.ix_(flipped, [2, 3])] = mesh.tets[np.ix_(flipped, [3, 2])]
        vols = mesh.tet_volumes()
    bad = np.nonzero(vols <= MIN_TET_VOLUME)[0]
    if len(bad):
        raise DegenerateTetError(int(bad[0]), f"volume {vols[bad[0]]:.3e} m^3 <= {MIN_TET_VOLUME}")
    mesh.rest_volume = vols
    mesh.rest_inv = np.linalg.inv(mesh.shape_matrices())
    return mesh


def vertex_masses_from_density(mesh: TetMesh, density: float) -> TetMesh:
    """Lumped masses: each alive tet spreads rho*V/4 onto its four vertices.

    Pinned vertices keep inv_mass = 0; so do vertices owned by no alive tet.
    """
    if mesh.rest_volume is None:
        raise ValueError("rest state not computed; call compute_rest_state first")
    mass = np.zeros(mesh.num_vertices)
    quarter = density * mesh.rest_volume[mesh.alive] / 4.0
    np.add.at(mass, mesh.tets[mesh.alive].ravel(), np.repeat(quarter, 4))
    inv = np.zeros_like(mass)
    has_mass = mass > 0.0
    inv[has_mass] = 1.0 / mass[has_mass]
    inv[mesh.pinned] = 0.0
    mesh.inv_mass = inv
    return mesh


def extract_surface(mesh: TetMesh) -> np.ndarray:
    """Oriented boundary triangles: faces incident to exactly one alive tet,
    wound outward (right-hand normals point away from the owning tet)."""
    alive_tets = mesh.tets[mesh.alive]
    if len(alive_tets) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    faces = alive_tets[:, _FACE_PATTERNS].reshape(-1, 3)  # (4m, 3) oriented
    keys = np.sort(faces, axis=1)
    _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
    boundary = first[counts == 1]
    return faces[np.sort(boundary)]


def load_mesh(source) -> TetMesh:
    """Parse the plain-text mesh format and return a mesh with rest state,
    masses unset, and surface extracted.

    `source` is a path (str or PathLike), raw bytes, or a readable stream.
    Format: header ``verts N tets M``; N lines ``x y z`` in meters; M lines
    ``i j k l`` with 0-based vertex indices. ``#`` starts a comment.
    """
    if isinstance(source, bytes):
        raw = source
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            raw = fh.read()
    else:
        raw = source.read()
        if isinstance(raw, str):
            raw = raw.encode()

    lines = io.TextIOWrapper(io.BytesIO(raw), encoding="utf-8").readlines()
    content: list[tuple[int, str]] = []
    for ln, text in enumerate(lines, start=1):
        stripped = text.split("#", 1)[0].strip()
        if stripped:
            content.append((ln, stripped))

    if not content:
        raise MeshFormatError(1, "empty mesh stream")
    ln, header = content[0]
    parts = header.split()
    if len(parts) != 4 or parts[0] != "verts" or parts[2] != "tets":
        raise MeshFormatError(ln, f"expected header 'verts N tets M', got {header!r}")
    try:
        n_verts, n_tets = int(parts[1]), int(parts[3])
    except ValueError:
        raise MeshFormatError(ln, f"non-integer counts in header {header!r}") from None
    if len(content) - 1 != n_verts + n_tets:
        raise MeshFormatError(
            content[-1][0],
            f"expected {n_verts} vertex + {n_tets} tet lines, found {len(content) - 1}",
        )

    vertices = np.zeros((n_verts, 3))
    for row, (ln, text) in enumerate(content[1 : 1 + n_verts]):
        fields = text.split()
        if len(fields) != 3:
            raise MeshFormatError(ln, f"expected 3 coordinates, got {len(fields)}")
        try:
            vertices[row] = [float(f) for f in fields]
        except ValueError:
            raise MeshFormatError(ln, f"non-numeric coordinate in {text!r}") from None

    tets = np.zeros((n_tets, 4), dtype=np.int64)
    for row, (ln, text) in enumerate(content[1 + n_verts :]):
        fields = text.split()
        if len(fields) != 4:
            raise MeshFormatError(ln, f"expected 4 vertex indices, got {len(fields)}")
        try:
            idx = [int(f) for f in fields]
        except ValueError:
            raise MeshFormatError(ln, f"non-integer index in {text!r}") from None
        if any(i < 0 or i >= n_verts for i in idx):
            raise MeshFormatError(ln, f"vertex index out of range in {text!r}")
        tets[row] = idx

    mesh = TetMesh(vertices=vertices, tets=tets)
    compute_rest_state(mesh)
    mesh.refresh_surface()
    return mesh


def dump_mesh(mesh: TetMesh) -> str:
    """Serialize to the plain-text mesh format (diff-friendly)."""
    out = [f"verts {mesh.num_vertices} tets {mesh.num_tets}"]
    out += [" ".join(repr(c) for c in v) for v in mesh.vertices]
    out += [" ".join(str(i) for i in t) for t in mesh.tets]
    return "\n".join(out) + "\n"
