"""P1 finite elements on structured simplicial meshes, with Krylov solvers.

Each grid cell of the box [-L/2, L/2]^d is split into d! simplices by the
Freudenthal/Kuhn rule (2 triangles in 2D, 6 tetrahedra in 3D), which is
face-consistent across cells.  Coefficients are piecewise constant per
*field* cell; the mesh may refine each field cell by an integer factor so
every element lies in exactly one coefficient cell.

Linear systems are solved by diagonally preconditioned conjugate gradients
when the coefficient field is symmetric and by a transpose-free stabilized
iteration (BiCGStab) otherwise, to a relative discrete residual of 1e-10.
Corrector solves on the torus project iterate and residual onto mean zero
after every step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field
from itertools import permutations
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from . import _grid
from .exponents import ParameterError
from .fields import MatrixField, _atomic_write

SOLUTION_MAGIC = b"DHS1"
_SOLUTION_HEADER = struct.Struct("<IIBd")  # d, n, topology byte, residual
_TOPOLOGY_BYTE = {"box": 0, "torus": 1}
_BYTE_TOPOLOGY = {v: k for k, v in _TOPOLOGY_BYTE.items()}


class ConvergenceError(RuntimeError):
    """Krylov iteration hit its cap; carries the last relative residual."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NotCoerciveError(RuntimeError):
    """The operator produced a non-positive energy direction during CG."""


def _simplex_offsets(d: int) -> np.ndarray:
    """Vertex offsets (in {0,1}^d) of the d! Kuhn simplices of the unit cell."""
    sims = []
    for perm in sorted(permutations(range(d))):
        verts = [np.zeros(d, dtype=np.int64)]
        for axis in perm:
            verts.append(verts[-1] + np.eye(d, dtype=np.int64)[axis])
        sims.append(verts)
    return np.asarray(sims)  # (d!, d+1, d)


class Mesh:
    """Structured simplicial mesh matching (and optionally refining) a cell grid.

    mode "box": (n+1)^d nodes, Dirichlet boundary on the box faces.
    mode "torus": n^d nodes with periodic wrap-around.
    """

    def __init__(self, d: int, n: int, box: float, mode: str):
        if mode not in _TOPOLOGY_BYTE:
            raise ParameterError(f"mesh mode must be 'box' or 'torus', got {mode!r}")
        if d not in (2, 3):
            raise ParameterError(f"meshes support d in {{2, 3}}, got {d}")
        if n < 2:
            raise ParameterError("need at least 2 cells per side")
        self.d, self.n, self.box, self.mode = d, n, float(box), mode
        self.h = self.box / n

        nodes_per_side = n + 1 if mode == "box" else n
        grid_shape = (nodes_per_side,) * d
        axes = [-0.5 * self.box + self.h * np.arange(nodes_per_side)] * d
        mesh_axes = np.meshgrid(*axes, indexing="ij")
        self.nodes = np.stack([g.ravel() for g in mesh_axes], axis=1)
        self.n_nodes = self.nodes.shape[0]

        offsets = _simplex_offsets(d)                       # (d!, d+1, d)
        cell_idx = np.indices((n,) * d).reshape(d, -1).T    # (n^d, d)
        corner = cell_idx[:, None, None, :] + offsets[None, :, :, :]
        if mode == "torus":
            corner = corner % n
        flat = np.ravel_multi_index(np.moveaxis(corner, -1, 0), grid_shape)
        n_types = offsets.shape[0]
        self.elements = flat.reshape(-1, d + 1).astype(np.int64)
        self.elem_type = np.tile(np.arange(n_types, dtype=np.uint8), n ** d)
        self.elem_cell = np.repeat(np.arange(n ** d, dtype=np.int64), n_types)
        self.volume = self.h ** d / math.factorial(d)

        # P1 gradients per simplex type: solve [1, x] c = e_i on the unit cell,
        # then scale by 1/h.
        grads = np.empty((n_types, d, d + 1))
        for t in range(n_types):
            m = np.hstack([np.ones((d + 1, 1)), offsets[t].astype(float)])
            grads[t] = np.linalg.inv(m)[1:, :]
        self.grads = grads / self.h

        # element centroids, from the cell origin (no torus wrap artifacts)
        origins = -0.5 * self.box + self.h * cell_idx
        local = offsets.mean(axis=1) * self.h               # (d!, d)
        self.centroids = (origins[:, None, :] + local[None, :, :]).reshape(-1, d)

        if mode == "box":
            multi = np.unravel_index(np.arange(self.n_nodes), grid_shape)
            on_face = np.zeros(self.n_nodes, dtype=bool)
            for axis_idx in multi:
                on_face |= (axis_idx == 0) | (axis_idx == n)
            self.boundary_nodes = np.flatnonzero(on_face)
        else:
            self.boundary_nodes = np.empty(0, dtype=np.int64)

    # -- region selectors ---------------------------------------------------

    def nodes_in_ball(self, center, radius: float) -> np.ndarray:
        return _grid.points_in_ball(self.nodes, center, radius, self.box,
                                    periodic=(self.mode == "torus"))

    def elements_in_ball(self, center, radius: float) -> np.ndarray:
        """Elements assigned to the ball by centroid (additive over disjoint regions)."""
        return _grid.points_in_ball(self.centroids, center, radius, self.box,
                                    periodic=(self.mode == "torus"))

    def element_gradients(self) -> np.ndarray:
        """(n_elements, d, d+1) nodal-gradient matrices."""
        return self.grads[self.elem_type]

    def coefficient_cells(self, field: MatrixField) -> np.ndarray:
        """Field-cell index of every element; mesh must refine the field grid."""
        if (field.d, field.mode) != (self.d, self.mode) or \
                not math.isclose(field.box, self.box):
            raise ParameterError("field and mesh geometry disagree")
        if self.n % field.n != 0:
            raise ParameterError(
                f"mesh n={self.n} must be a multiple of field n={field.n}")
        r = self.n // field.n
        mesh_cell = np.unravel_index(self.elem_cell, (self.n,) * self.d)
        coarse = tuple(idx // r for idx in mesh_cell)
        return np.ravel_multi_index(coarse, (field.n,) * self.d)


@dataclass(eq=False)
class ScalarField:
    """Nodal P1 function with solver provenance."""

    mesh: Mesh
    values: np.ndarray
    residual: float = 0.0
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != (self.mesh.n_nodes,):
            raise ParameterError("nodal value count does not match the mesh")


@dataclass(eq=False)
class LinearSystem:
    """Reduced sparse system: op on free nodes, rhs, and the constraint bookkeeping."""

    op: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray              # node ids of the unknowns
    boundary_values: np.ndarray   # full-length nodal array, 0 on free nodes
    symmetric: bool
    mean_zero: bool
    mesh: Mesh
    degenerate_rows: np.ndarray   # free-node ids whose operator row was all zero


# ---------------------------------------------------------------------------
# assembly


def element_stiffness(mesh: Mesh, a_elems: np.ndarray) -> sp.csr_matrix:
    """Stiffness operator for per-element coefficients.

    a_elems is (n_elements, d, d), or (n_elements,) for scalar weights w*Id.
    """
    g = mesh.element_gradients()                 # (n_el, d, d+1)
    if a_elems.ndim == 1:
        ag = a_elems[:, None, None] * g
    else:
        ag = np.einsum("eij,ejk->eik", a_elems, g)
    k_loc = mesh.volume * np.einsum("eji,ejk->eik", g, ag)
    nv = mesh.elements.shape[1]
    rows = np.repeat(mesh.elements, nv, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, nv)).ravel()
    k = sp.coo_matrix((k_loc.ravel(), (rows, cols)),
                      shape=(mesh.n_nodes, mesh.n_nodes))
    return k.tocsr()


def _stiffness(field: MatrixField, mesh: Mesh) -> sp.csr_matrix:
    cells = mesh.coefficient_cells(field)
    return element_stiffness(mesh, field.values[cells])


def assemble(field: MatrixField, mesh: Mesh,
             dirichlet: Optional[Callable] = None) -> LinearSystem:
    """Assemble the stiffness operator, reduce Dirichlet rows, flag zero rows.

    `dirichlet` is a callable(nodes) -> values for box meshes; on the torus it
    must be None and the system carries the mean-zero constraint instead.
    """
    k = _stiffness(field, mesh)
    symmetric = field.is_symmetric()
    if mesh.mode == "box":
        if dirichlet is None:
            raise ParameterError("box meshes need Dirichlet boundary data")
        g_vals = np.asarray(dirichlet(mesh.nodes[mesh.boundary_nodes]), dtype=float)
        if g_vals.shape != (mesh.boundary_nodes.size,):
            raise ParameterError("boundary data must give one value per boundary node")
        full_g = np.zeros(mesh.n_nodes)
        full_g[mesh.boundary_nodes] = g_vals
        free = np.setdiff1d(np.arange(mesh.n_nodes), mesh.boundary_nodes)
        op = k[free][:, free].tocsr()
        rhs = -k[free][:, mesh.boundary_nodes] @ g_vals
        mean_zero = False
    else:
        if dirichlet is not None:
            raise ParameterError("torus meshes have no Dirichlet boundary")
        free = np.arange(mesh.n_nodes)
        op = k
        rhs = np.zeros(mesh.n_nodes)
        full_g = np.zeros(mesh.n_nodes)
        mean_zero = True

    diag = op.diagonal()
    degenerate = free[diag == 0.0]
    return LinearSystem(op=op, rhs=rhs, free=free, boundary_values=full_g,
                        symmetric=symmetric, mean_zero=mean_zero, mesh=mesh,
                        degenerate_rows=degenerate)


def corrector_rhs(field: MatrixField, mesh: Mesh, direction: int) -> np.ndarray:
    """Load vector b_j = -sum_T |T| (a e_dir) . grad psi_j on the torus."""
    cells = mesh.coefficient_cells(field)
    a = field.values[cells]
    g = mesh.element_gradients()
    flux = a[:, :, direction]                       # a e_dir per element
    b_loc = -mesh.volume * np.einsum("ej,ejk->ek", flux, g)
    b = np.zeros(mesh.n_nodes)
    np.add.at(b, mesh.elements.ravel(), b_loc.ravel())
    return b


# ---------------------------------------------------------------------------
# Krylov iterations


def _iteration_cap(system: LinearSystem) -> int:
    diag = system.op.diagonal()
    positive = diag[diag > 0]
    heur = 1.0
    if positive.size:
        heur = min(max(math.sqrt(float(positive.max() / positive.min())), 1.0), 100.0)
    return max(200, int(50 * system.op.shape[0] ** (1.0 / system.mesh.d) * heur))


def _prepare(system: LinearSystem):
    """Pin exactly-zero rows (nodes decoupled from the energy) to value 0."""
    op = system.op
    if system.degenerate_rows.size >= system.free.size:
        raise NotCoerciveError(
            "every operator row is zero: the coefficient field carries no energy")
    if system.degenerate_rows.size:
        op = op.tolil(copy=True)
        local = np.flatnonzero(np.isin(system.free, system.degenerate_rows))
        for i in local:
            op.rows[i] = [int(i)]
            op.data[i] = [1.0]
        op = op.tocsr()
        rhs = system.rhs.copy()
        rhs[local] = 0.0
        return op, rhs
    return op, system.rhs


def _project_mean(x: np.ndarray) -> None:
    x -= x.mean()


def _pcg(op, rhs, precon, project: bool, rtol: float, cap: int):
    n = rhs.shape[0]
    x = np.zeros(n)
    r = rhs.copy()
    if project:
        _project_mean(r)
    bnorm = float(np.linalg.norm(r))
    if bnorm == 0.0:
        return x, 0.0, 0
    z = precon(r)
    p = z.copy()
    rho = float(r @ z)
    for it in range(1, cap + 1):
        q = op @ p
        pq = float(p @ q)
        if pq <= 0.0:
            raise NotCoerciveError(
                f"CG found a direction with energy {pq:.3e} at iteration {it}")
        alpha = rho / pq
        x += alpha * p
        r -= alpha * q
        if project:
            _project_mean(x)
            _project_mean(r)
        res = float(np.linalg.norm(r))
        if res <= rtol * bnorm:
            return x, res / bnorm, it
        z = precon(r)
        rho_new = float(r @ z)
        p = z + (rho_new / rho) * p
        rho = rho_new
    raise ConvergenceError(f"CG cap {cap} reached, residual {res / bnorm:.3e}",
                           residual=res / bnorm, iterations=cap)


def _bicgstab(op, rhs, precon, project: bool, rtol: float, cap: int):
    n = rhs.shape[0]
    x = np.zeros(n)
    r = rhs.copy()
    if project:
        _project_mean(r)
    bnorm = float(np.linalg.norm(r))
    if bnorm == 0.0:
        return x, 0.0, 0
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros(n)
    p = np.zeros(n)
    for it in range(1, cap + 1):
        rho_new = float(r_hat @ r)
        if rho_new == 0.0:
            raise ConvergenceError("BiCGStab breakdown (rho = 0)",
                                   residual=float(np.linalg.norm(r)) / bnorm,
                                   iterations=it)
        beta = (rho_new / rho) * (alpha / omega) if it > 1 else 0.0
        p = r + beta * (p - omega * v)
        phat = precon(p)
        v = op @ phat
        denom = float(r_hat @ v)
        if denom == 0.0:
            raise ConvergenceError("BiCGStab breakdown (r_hat . v = 0)",
                                   residual=float(np.linalg.norm(r)) / bnorm,
                                   iterations=it)
        alpha = rho_new / denom
        s = r - alpha * v
        x += alpha * phat
        if project:
            _project_mean(x)
        if float(np.linalg.norm(s)) <= rtol * bnorm:
            r = s
            if project:
                _project_mean(r)
            return x, float(np.linalg.norm(r)) / bnorm, it
        shat = precon(s)
        t = op @ shat
        tt = float(t @ t)
        if tt == 0.0:
            raise ConvergenceError("BiCGStab breakdown (t = 0)",
                                   residual=float(np.linalg.norm(s)) / bnorm,
                                   iterations=it)
        omega = float(t @ s) / tt
        x += omega * shat
        r = s - omega * t
        if project:
            _project_mean(x)
            _project_mean(r)
        res = float(np.linalg.norm(r))
        if res <= rtol * bnorm:
            return x, res / bnorm, it
        rho = rho_new
    raise ConvergenceError(f"BiCGStab cap {cap} reached, residual {res / bnorm:.3e}",
                           residual=res / bnorm, iterations=cap)


def solve_system(system: LinearSystem, rtol: float = 1e-10,
                 preconditioner: str = "auto") -> tuple[np.ndarray, dict]:
    """Solve the reduced system; returns (free-node values, info dict).

    preconditioner: "jacobi", "amg" (pyamg smoothed aggregation, symmetric
    systems only) or "auto", which switches to AMG for large badly
    conditioned symmetric operators.
    """
    op, rhs = _prepare(system)
    diag = op.diagonal()
    safe = np.where(diag > 0, diag, 1.0)
    cond_est = float(safe.max() / safe.min())
    choice = preconditioner
    if choice == "auto":
        choice = "amg" if (system.symmetric and op.shape[0] >= 16384
                           and cond_est >= 1e4) else "jacobi"
    if choice == "amg" and not system.symmetric:
        raise ParameterError("the AMG preconditioner requires a symmetric operator")

    if choice == "jacobi":
        inv = 1.0 / safe
        precon = lambda r: inv * r
    elif choice == "amg":
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(op.tocsr(), max_coarse=64)
        amg_op = ml.aspreconditioner(cycle="V")
        precon = lambda r: amg_op @ r
    else:
        raise ParameterError(f"unknown preconditioner {choice!r}")

    cap = _iteration_cap(system)
    if system.symmetric:
        x, res, iters = _pcg(op, rhs, precon, system.mean_zero, rtol, cap)
        method = f"pcg+{choice}"
    else:
        x, res, iters = _bicgstab(op, rhs, precon, system.mean_zero, rtol, cap)
        method = f"bicgstab+{choice}"
    return x, {"residual": res, "iterations": iters, "method": method,
               "cond_estimate": cond_est,
               "degenerate_rows": int(system.degenerate_rows.size)}


def solve_dirichlet(field: MatrixField, mesh: Mesh, g: Union[Callable, np.ndarray],
                    rtol: float = 1e-10, preconditioner: str = "auto") -> ScalarField:
    """Discrete solution of -div(a grad u) = 0 with u = g on the box boundary.

    g may be a callable(coords)->values or a full-length nodal array (whose
    boundary entries are used).
    """
    if isinstance(g, np.ndarray):
        data = g

        def g_call(coords):
            del coords
            return data[mesh.boundary_nodes]
    else:
        g_call = g
    system = assemble(field, mesh, dirichlet=g_call)
    x, info = solve_system(system, rtol=rtol, preconditioner=preconditioner)
    values = system.boundary_values.copy()
    values[system.free] = x
    return ScalarField(mesh=mesh, values=values, residual=info["residual"],
                       meta={"problem": "dirichlet", **info})


def solve_corrector(field: MatrixField, mesh: Mesh, direction: int,
                    rtol: float = 1e-10, preconditioner: str = "auto") -> ScalarField:
    """Periodic corrector phi_i: -div a(e_i + grad phi_i) = 0, nodal mean zero."""
    if mesh.mode != "torus":
        raise ParameterError("correctors live on the torus")
    if not 0 <= direction < mesh.d:
        raise ParameterError(f"direction {direction} outside 0..{mesh.d - 1}")
    system = assemble(field, mesh)
    system.rhs = corrector_rhs(field, mesh, direction)
    x, info = solve_system(system, rtol=rtol, preconditioner=preconditioner)
    x -= x.mean()  # kill the roundoff drift of the projected iteration
    return ScalarField(mesh=mesh, values=x, residual=info["residual"],
                       meta={"problem": f"corrector-e{direction}", **info})


# ---------------------------------------------------------------------------
# derived quantities


def gradient(u: ScalarField) -> np.ndarray:
    """Per-element constant gradient, shape (n_elements, d)."""
    g = u.mesh.element_gradients()
    return np.einsum("edk,ek->ed", g, u.values[u.mesh.elements])


def energy(u: ScalarField, field: MatrixField, center=None, radius: float = None,
           shift=None) -> float:
    """Dirichlet energy integral_S a (grad u + shift).(grad u + shift).

    S is the whole mesh, or the elements whose centroid lies in
    B_radius(center).  `shift` adds a constant vector to every gradient
    (used for corrector energies a(e_i + grad phi)).
    """
    mesh = u.mesh
    grads = gradient(u)
    if shift is not None:
        grads = grads + np.asarray(shift, dtype=float)
    cells = mesh.coefficient_cells(field)
    a = field.values[cells]
    dens = np.einsum("ed,edk,ek->e", grads, a, grads)
    if radius is None:
        return float(mesh.volume * dens.sum())
    idx = mesh.elements_in_ball(center, radius)
    return float(mesh.volume * dens[idx].sum())


def restrict(u: ScalarField, center, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """(node ids, values) of u on the closed ball."""
    idx = u.mesh.nodes_in_ball(center, radius)
    return idx, u.values[idx]


# ---------------------------------------------------------------------------
# element integrals used by the measurement modules


def element_mean_square(u: ScalarField, values: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact per-element average of v^2 for the P1 function v (default u).

    integral_T v^2 = |T| * sum_ij v_i v_j (1+delta_ij) / ((d+1)(d+2)).
    """
    mesh = u.mesh
    v = u.values if values is None else values
    nod = v[mesh.elements]                       # (n_el, d+1)
    d = mesh.d
    s = nod.sum(axis=1)
    return (s * s + np.einsum("ek,ek->e", nod, nod)) / ((d + 1) * (d + 2))


# ---------------------------------------------------------------------------
# binary solution files ("DHS1")


def write_solution(u: ScalarField, path: str) -> None:
    """Write magic 'DHS1', <u32 d, u32 n, u8 topology, f64 residual>, nodal f64."""
    mesh = u.mesh
    header = SOLUTION_MAGIC + _SOLUTION_HEADER.pack(
        mesh.d, mesh.n, _TOPOLOGY_BYTE[mesh.mode], float(u.residual))
    _atomic_write(path, header + u.values.astype("<f8").tobytes())


def read_solution(path: str) -> dict:
    """Read a DHS1 file; the box side is not stored, so the result is raw:
    {d, n, mode, residual, values}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SOLUTION_MAGIC:
        raise ParameterError(f"{path}: bad magic {blob[:4]!r}, want {SOLUTION_MAGIC!r}")
    d, n, topo, residual = _SOLUTION_HEADER.unpack_from(blob, 4)
    if topo not in _BYTE_TOPOLOGY:
        raise ParameterError(f"{path}: unknown topology byte {topo}")
    count = (n + 1) ** d if topo == 0 else n ** d
    body = blob[4 + _SOLUTION_HEADER.size:]
    if len(body) != 8 * count:
        raise ParameterError(f"{path}: payload {len(body)} bytes, want {8 * count}")
    return {"d": d, "n": n, "mode": _BYTE_TOPOLOGY[topo], "residual": residual,
            "values": np.frombuffer(body, dtype="<f8").astype(float)}
