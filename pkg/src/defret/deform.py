"""Rigidity-regularised deformation of a source mesh toward a target distance field.

Minimises  sum_i f_t(v_i') + lam * sum_(i,j) in E ||(v_i' - v_j') - (v_i - v_j)||^2
over the deformed positions v', starting from the source positions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import distance_field as udf
from .geometry import TriangleMesh, write_obj


class DeformationError(RuntimeError):
    pass


@dataclass
class SolverOptions:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    method: str = "lbfgs"  # "lbfgs" or "gd"
    fit_gradient: str = "analytic"  # "analytic" or "central"
    history: int = 10
    initial_step: float = 0.01
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    max_escapes: int = 25
    seed: int = 0

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("gradient_tolerance", "initial_step", "armijo"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must be in (0, 1)")
        if self.method not in ("lbfgs", "gd"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.fit_gradient not in ("analytic", "central"):
            raise ValueError(f"unknown fit_gradient {self.fit_gradient!r}")


@dataclass
class DeformationProblem:
    source: TriangleMesh
    target_udf: udf.UnsignedDistanceGrid
    lam: float = 1.0
    squared_fit: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        e = self.source.edges
        n, m = self.source.n_vertices, len(e)
        rows = np.repeat(np.arange(m), 2)
        cols = e.ravel()
        vals = np.tile([1.0, -1.0], m)
        self._incidence = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
        self._incidence_t = self._incidence.T.tocsr()
        self._rest = self._incidence @ self.source.vertices


@dataclass
class DeformationResult:
    vertices: np.ndarray
    triangles: np.ndarray
    fit_term: float
    rigidity_term: float
    iterations: int
    converged: bool
    stop_reason: str = ""
    energy_history: list = field(default_factory=list)

    @property
    def energy(self) -> float:
        return self.fit_term + self.rigidity_term

    @property
    def mesh(self) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.triangles)

    def summary(self) -> dict:
        return {
            "fit_term": self.fit_term,
            "rigidity_term": self.rigidity_term,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def export(self, obj_path) -> Path:
        """Write the deformed mesh as OBJ plus a ``.json`` sidecar with the energies."""
        obj_path = Path(obj_path)
        write_obj(obj_path, self.mesh)
        side = obj_path.with_suffix(".json")
        side.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return side


def _check(problem: DeformationProblem, vertices) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    if v.shape != problem.source.vertices.shape:
        raise ValueError("vertex count does not match the source mesh")
    return v


def energy(problem: DeformationProblem, vertices) -> tuple[float, float]:
    """(fit, rigidity) terms at the given deformed positions."""
    v = _check(problem, vertices)
    f = udf.query(problem.target_udf, v)
    fit = float(np.sum(f * f if problem.squared_fit else f))
    r = problem._incidence @ v - problem._rest
    rig = problem.lam * float(np.sum(r * r))
    return fit, rig


def energy_gradient(problem: DeformationProblem, vertices, fit_gradient: str = "analytic"):
    """Total energy and its gradient with respect to every vertex coordinate."""
    v = _check(problem, vertices)
    if fit_gradient == "analytic":
        f, gf = udf.query_with_gradient(problem.target_udf, v)
    else:
        f = udf.query(problem.target_udf, v)
        gf = udf.gradient(problem.target_udf, v)
    if problem.squared_fit:
        fit = float(np.sum(f * f))
        gf = 2.0 * f[:, None] * gf
    else:
        fit = float(np.sum(f))
    r = problem._incidence @ v - problem._rest
    rig = problem.lam * float(np.sum(r * r))
    g = gf + 2.0 * problem.lam * (problem._incidence_t @ r)
    return fit + rig, g


def rigidity_gradient(problem: DeformationProblem, vertices) -> np.ndarray:
    v = _check(problem, vertices)
    r = problem._incidence @ v - problem._rest
    return 2.0 * problem.lam * (problem._incidence_t @ r)


def _lbfgs_direction(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(np.vdot(y, s))
        a = rho * float(np.vdot(s, q))
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(np.vdot(s, y)) / float(np.vdot(y, y))
    for a, rho, s, y in reversed(alphas):
        b = rho * float(np.vdot(y, q))
        q += (a - b) * s
    return -q


def deform(problem: DeformationProblem, opts: SolverOptions | None = None) -> DeformationResult:
    """Descend the composite energy from the source positions.

    Every accepted step satisfies the Armijo condition, so the recorded
    energy sequence never increases.
    """
    opts = opts or SolverOptions()
    opts.validate()
    grid = problem.target_udf
    v = problem.source.vertices.copy()
    e, g = energy_gradient(problem, v, opts.fit_gradient)
    if not math.isfinite(e):
        raise DeformationError("non-finite energy at initialization")
    history = [e]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    step = opts.initial_step
    escapes = 0
    it = 0
    reason = "max_iterations"
    converged = False
    while it < opts.max_iterations:
        if float(np.max(np.abs(g))) < opts.gradient_tolerance:
            converged, reason = True, "gradient_tolerance"
            break
        if opts.method == "lbfgs" and s_hist:
            d = _lbfgs_direction(g, s_hist, y_hist)
            alpha = 1.0
        else:
            d = -g
            alpha = step
        slope = float(np.vdot(g, d))
        if slope >= 0:
            # not a descent direction: restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d, alpha = -g, step
            slope = float(np.vdot(g, d))
        accepted = False
        for _ in range(opts.max_backtracks):
            v_new = v + alpha * d
            e_new, g_new = energy_gradient(problem, v_new, opts.fit_gradient)
            if not math.isfinite(e_new):
                raise DeformationError(f"non-finite energy at iteration {it}")
            if e_new <= e + opts.armijo * alpha * slope:
                accepted = True
                break
            alpha *= opts.backtrack
        if not accepted:
            if s_hist:
                s_hist.clear()
                y_hist.clear()
                continue
            reason = "line_search"
            break
        it += 1
        s_vec, y_vec = v_new - v, g_new - g
        sy = float(np.vdot(s_vec, y_vec))
        if sy > 1e-12 * float(np.vdot(y_vec, y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > opts.history:
                s_hist.pop(0)
                y_hist.pop(0)
        if opts.method == "gd" or not s_hist:
            step = min(alpha * 2.0, 1.0)
        if e_new > e:
            raise DeformationError("energy increased on an accepted step")
        v, e, g = v_new, e_new, g_new
        history.append(e)
        if not np.all(grid.contains(v)):
            escapes += 1
            if escapes > opts.max_escapes:
                raise DeformationError(
                    f"vertices left the distance grid on {escapes} iterations "
                    f"(max |coord| {np.abs(v).max():.3f}, grid {grid.origin} .. {grid.upper})"
                )
        else:
            escapes = 0
    fit, rig = energy(problem, v)
    return DeformationResult(v, problem.source.triangles.copy(), fit, rig, it, converged, reason, history)
