"""Gradient-variance analysis on the window's local graph.

Quantities, all in raw (unnormalized) norms over one corrupted window of
N frames treated as graph nodes:

  per-sample loss     l_i = 0.5 * ||eps - f_i||^2, so u_i = J_i^T (f_i - eps)
  output energy       E_S = 0.5 * sum_edges w_ij ||f_i - f_j||^2
  Jacobian energy     E_G = 0.5 * sum_edges w_ij ||J_i - J_j||_F^2
  suprema             G = max_i ||J_i||_2,  F = max_i ||f_i - eps||_2
  variance            Var = (1/N) sum_i ||u_i - u_mean||^2
  bound               Var <= (4 / (N * lambda2)) * (G^2 E_S + F^2 E_G)

With the 0.5 loss scaling and shared noise the pairwise difference is the
exact identity u_i - u_j = J_i^T s_ij + D_ij^T r_j with s_ij = f_i - f_j,
D_ij = J_i - J_j and r_j = f_j - eps, which is why F is the residual
supremum: the chain pairwise bound -> Poincare then makes the variance
bound a theorem rather than an approximation, and the tests treat any
violation as an implementation bug. The same identity with r_j replaced
by f_j (its first-order stand-in) is reported as a diagnostic residual.

lambda2 is computed by a cyclic Jacobi eigensolver; graphs here have at
most a few dozen nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import DenoiserModel, per_sample_gradients
from .diffusion import FrameWindow
from .errors import AnalysisError, ConfigError
from .proximity import ProximityWeight

# relative slack tolerance for the inequality checks (pure float noise)
SLACK_RTOL = 1e-9


@dataclass
class LocalGraph:
    """Undirected weighted graph; each edge stored once as (i, j, w)."""

    n: int
    edges: list[tuple[int, int, float]]

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("graph needs at least one node")
        seen = set()
        for i, j, w in self.edges:
            if i == j:
                raise ConfigError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ConfigError(f"edge ({i},{j}) outside node range")
            if not (np.isfinite(w) and w > 0.0):
                raise ConfigError(f"edge ({i},{j}) has non-positive weight {w}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ConfigError(f"duplicate edge {key}")
            seen.add(key)


def path_graph(weights) -> LocalGraph:
    """The window graph: nodes 0..K-1, edge (i, i+1) with weight w_i."""
    vals = [w.w if isinstance(w, ProximityWeight) else float(w)
            for w in weights]
    return LocalGraph(n=len(vals) + 1,
                      edges=[(i, i + 1, v) for i, v in enumerate(vals)])


def laplacian(graph: LocalGraph) -> np.ndarray:
    L = np.zeros((graph.n, graph.n))
    for i, j, w in graph.edges:
        L[i, i] += w
        L[j, j] += w
        L[i, j] -= w
        L[j, i] -= w
    return L


def is_connected(graph: LocalGraph) -> bool:
    parent = list(range(graph.n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j, _ in graph.edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    return len({find(i) for i in range(graph.n)}) == 1


def jacobi_eigenvalues(a: np.ndarray, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius mass falls below 1e-14 of the
    matrix norm; for the n <= 64 graphs used here this takes a handful of
    sweeps and delivers eigenvalues well beyond 1e-10 accuracy.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"need a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ConfigError("matrix is not symmetric")
    a = (a + a.T) / 2.0
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy()
    norm = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(a.diagonal() ** 2), 0.0))
        if off <= 1e-14 * max(norm, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # asymptotic form; theta^2 would overflow
                else:
                    t = np.sign(theta) / (abs(theta)
                                          + np.sqrt(theta * theta + 1.0))
                    if theta == 0.0:
                        t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                kp = a[:, p].copy()
                kq = a[:, q].copy()
                a[:, p] = c * kp - s * kq
                a[:, q] = s * kp + c * kq
                a[p, :] = a[:, p]
                a[q, :] = a[:, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
    return np.sort(a.diagonal().copy())


def lambda2(graph: LocalGraph) -> float:
    """Algebraic connectivity: second-smallest Laplacian eigenvalue.

    Returns exactly 0.0 for disconnected graphs (decided combinatorially,
    not from an eigenvalue near zero)."""
    if graph.n < 2:
        raise ConfigError("lambda2 needs at least two nodes")
    if not is_connected(graph):
        return 0.0
    vals = jacobi_eigenvalues(laplacian(graph))
    return float(vals[1])


def dirichlet_energies(outputs: np.ndarray, jacobians: np.ndarray | None,
                       graph: LocalGraph) -> tuple[float, float | None]:
    """E_S over node outputs and, when Jacobians are given, E_G."""
    f = np.asarray(outputs, dtype=np.float64).reshape(graph.n, -1)
    e_s = 0.0
    e_g = 0.0 if jacobians is not None else None
    for i, j, w in graph.edges:
        df = f[i] - f[j]
        e_s += 0.5 * w * float(df @ df)
        if jacobians is not None:
            dj = jacobians[i] - jacobians[j]
            e_g += 0.5 * w * float(np.sum(dj * dj))
    return e_s, e_g


def verify_decomposition(u_i, u_j, jac_i, jac_j, f_i, f_j, eps) -> dict:
    """Residuals of the pairwise gradient decomposition.

    exact: u_i - u_j = J_i^T (f_i - f_j) + (J_i - J_j)^T (f_j - eps),
    an identity for u = J^T (f - eps). paper-form replaces the trailing
    residual f_j - eps with f_j; its residual is then ||(J_i - J_j)^T eps||,
    reported as a diagnostic.
    """
    f_i = np.asarray(f_i, dtype=np.float64).ravel()
    f_j = np.asarray(f_j, dtype=np.float64).ravel()
    eps = np.asarray(eps, dtype=np.float64).ravel()
    if f_i.shape != f_j.shape or f_i.shape != eps.shape:
        raise ConfigError("output/noise shapes differ")
    du = np.asarray(u_i, dtype=np.float64) - np.asarray(u_j, dtype=np.float64)
    s = f_i - f_j
    d = jac_i - jac_j
    exact = du - (jac_i.T @ s + d.T @ (f_j - eps))
    paper = du - (jac_i.T @ s + d.T @ f_j)
    return {"exact_residual": float(np.linalg.norm(exact)),
            "paper_residual": float(np.linalg.norm(paper)),
            "du_norm": float(np.linalg.norm(du))}


def verify_pairwise_bound(u_i, u_j, s_ij, d_ij, G: float, F: float
                          ) -> tuple[bool, float]:
    """||u_i - u_j||^2 <= 2 G^2 ||s_ij||^2 + 2 F^2 ||D_ij||_F^2."""
    du = np.asarray(u_i, dtype=np.float64) - np.asarray(u_j, dtype=np.float64)
    lhs = float(du @ du)
    s = np.asarray(s_ij, dtype=np.float64).ravel()
    rhs = 2.0 * G * G * float(s @ s) + 2.0 * F * F * float(np.sum(d_ij * d_ij))
    slack = rhs - lhs
    return slack >= -SLACK_RTOL * max(rhs, 1e-300), slack


def verify_poincare(vectors: np.ndarray, graph: LocalGraph
                    ) -> tuple[bool, float]:
    """(1/N) sum ||u_i - mean||^2 <= (1/(N lambda2)) sum_E w ||u_i - u_j||^2."""
    u = np.asarray(vectors, dtype=np.float64).reshape(graph.n, -1)
    lam2 = lambda2(graph)
    if lam2 <= 0.0:
        raise AnalysisError("Poincare inequality needs a connected graph")
    dev = u - u.mean(axis=0)
    lhs = float(np.sum(dev * dev)) / graph.n
    dirichlet = sum(w * float(np.sum((u[i] - u[j]) ** 2))
                    for i, j, w in graph.edges)
    rhs = dirichlet / (graph.n * lam2)
    slack = rhs - lhs
    return slack >= -SLACK_RTOL * max(rhs, 1e-300), slack


@dataclass
class AnalysisReport:
    """One window's analysis snapshot. Jacobian-dependent fields are None
    when the model is too large for full Jacobian extraction."""

    n: int
    e_s: float
    lambda2: float
    grad_variance: float
    grad_norm: float
    F: float
    e_g: float | None = None
    G: float | None = None
    bound_rhs: float | None = None
    bound_holds: bool | None = None
    d_ij_norms: list[float] = field(default_factory=list)
    pairwise_holds: bool | None = None
    decomposition: list[dict] = field(default_factory=list)
    param_travel: float | None = None


def analyze_window(model: DenoiserModel, window: FrameWindow, weights,
                   with_jacobians: bool = True) -> AnalysisReport:
    """Full report for one corrupted window under the given training-time
    edge weights."""
    if window.noisy is None or window.eps is None or window.tau is None:
        raise ConfigError("window must be corrupted before analysis")
    n = window.frames.shape[0]
    graph = path_graph(weights)
    if graph.n != n:
        raise ConfigError(f"need {n - 1} edge weights for a {n}-frame window")
    bundle = per_sample_gradients(model, window.noisy, window.tau, window.eps,
                                  loss_scale=0.5, with_jacobians=with_jacobians)
    f = bundle.outputs.reshape(n, -1)
    eps = np.asarray(window.eps, dtype=np.float64).ravel()
    resid = f - eps
    big_f = float(np.max(np.linalg.norm(resid, axis=1)))
    lam2 = lambda2(graph)
    e_s, e_g = dirichlet_energies(f, bundle.jacobians, graph)
    report = AnalysisReport(
        n=n, e_s=e_s, lambda2=lam2,
        grad_variance=bundle.grad_variance,
        grad_norm=float(np.linalg.norm(bundle.mean_grad)),
        F=big_f, e_g=e_g)
    if bundle.jacobians is None:
        return report
    jac = bundle.jacobians
    report.G = float(max(np.linalg.norm(jac[i], 2) for i in range(n)))
    report.d_ij_norms = [float(np.linalg.norm(jac[i] - jac[j]))
                         for i, j, _ in graph.edges]
    if lam2 > 0.0:
        report.bound_rhs = (4.0 / (n * lam2)) * (
            report.G ** 2 * e_s + big_f ** 2 * e_g)
        # the variance is a difference of O(umax^2) accumulations, so pure
        # cancellation can leave ~(eps*umax)^2 even when the true value is 0
        # (identical frames); tolerate that absolute floor alongside the
        # relative slack
        umax = float(np.max(np.linalg.norm(
            bundle.per_sample_grads.reshape(n, -1), axis=1)))
        noise = (1e-12 * umax) ** 2
        report.bound_holds = (report.bound_rhs - report.grad_variance
                              >= -(SLACK_RTOL * max(report.bound_rhs, 1e-300)
                                   + noise))
    u = bundle.per_sample_grads
    pairwise_ok = True
    for i, j, _ in graph.edges:
        ok, _ = verify_pairwise_bound(u[i], u[j], f[i] - f[j],
                                      jac[i] - jac[j], report.G, big_f)
        pairwise_ok = pairwise_ok and ok
        report.decomposition.append(verify_decomposition(
            u[i], u[j], jac[i], jac[j], f[i], f[j], eps))
    report.pairwise_holds = pairwise_ok
    return report


def verify_variance_bound(model: DenoiserModel, window: FrameWindow,
                          weights) -> AnalysisReport:
    """analyze_window plus hard checks: connected graph, variance bound,
    pairwise bounds. Raises AnalysisError on any violation."""
    report = analyze_window(model, window, weights, with_jacobians=True)
    if report.lambda2 <= 0.0:
        raise AnalysisError("variance bound needs a connected window graph")
    if not report.bound_holds:
        raise AnalysisError(
            f"variance bound violated: Var={report.grad_variance} "
            f"> RHS={report.bound_rhs}")
    if not report.pairwise_holds:
        raise AnalysisError("pairwise gradient bound violated on an edge")
    return report


def track_dynamics(checkpoints, probes, theta0: np.ndarray | None = None,
                   with_jacobians: bool | None = None) -> list[dict]:
    """Time series over checkpoints of the probe-window quantities.

    checkpoints: list of (step, DenoiserModel) in ascending step order.
    probes: list of (FrameWindow, weights) pairs, fixed across the run.
    theta0: reference parameters for travel (defaults to the first
    checkpoint's). Jacobian-level fields are included when the model is
    small enough (or as forced by with_jacobians).
    """
    if not checkpoints:
        raise ConfigError("no checkpoints to analyze")
    if theta0 is None:
        theta0 = checkpoints[0][1].params
    rows = []
    for step, model in checkpoints:
        arch = model.arch
        use_jac = (arch.d * arch.param_count <= 2_000_000
                   if with_jacobians is None else with_jacobians)
        reports = [analyze_window(model, win, wts, with_jacobians=use_jac)
                   for win, wts in probes]
        row = {
            "step": step,
            "param_travel": float(np.linalg.norm(model.params - theta0)),
            "grad_variance": float(np.mean([r.grad_variance for r in reports])),
            "grad_norm": float(np.mean([r.grad_norm for r in reports])),
            "e_s": float(np.mean([r.e_s for r in reports])),
            "lambda2": float(np.mean([r.lambda2 for r in reports])),
        }
        if use_jac:
            row["e_g"] = float(np.mean([r.e_g for r in reports]))
            row["bound_rhs"] = float(np.mean([r.bound_rhs for r in reports]))
            row["mean_d_ij"] = float(np.mean([np.mean(r.d_ij_norms)
                                              for r in reports]))
            row["bound_holds"] = all(r.bound_holds for r in reports)
            row["pairwise_holds"] = all(r.pairwise_holds for r in reports)
        rows.append(row)
    return rows
