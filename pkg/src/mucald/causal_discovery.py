"""Continuous DAG structure learning over proxy features.

The acyclicity measure is h(W) = tr(exp(W*W)) - d, which is zero exactly
on DAG adjacencies. Fitting minimises a least-squares (or per-node MLP)
reconstruction with an L1 sparsity penalty under an augmented-Lagrangian
loop that escalates the penalty weight until h falls below tolerance.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ConfigError, ShapeMismatchError

MAX_NODES = 64


def matrix_exp(m):
    """Matrix exponential by scaling-and-squaring with a 16-term Taylor series.

    The input is scaled so its 1-norm is below 0.5 before the series, then
    squared back. Guarded to 64 nodes; this is a desk-scale kernel.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatchError(f"matrix_exp: expected square matrix, got shape {m.shape}")
    d = m.shape[0]
    if d > MAX_NODES:
        raise ConfigError(f"matrix_exp: size {d} exceeds the desk-scale limit {MAX_NODES}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix_exp: non-finite entries")
    norm1 = float(np.abs(m).sum(axis=0).max(initial=0.0))
    squarings = 0
    while norm1 / (2 ** squarings) >= 0.5:
        squarings += 1
    scaled = m / (2 ** squarings)
    result = np.eye(d)
    term = np.eye(d)
    for k in range(1, 17):
        term = term @ scaled / k
        result = result + term
    for _ in range(squarings):
        result = result @ result
    return result


def notears_h(w):
    """Acyclicity value tr(exp(W*W)) - d; >= 0, and 0 iff W is a DAG adjacency."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeMismatchError(f"notears_h: expected square matrix, got shape {w.shape}")
    return float(np.trace(matrix_exp(w * w)) - w.shape[0])


def notears_h_grad(w):
    """Gradient of notears_h: exp(W*W)^T * 2W."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeMismatchError(f"notears_h_grad: expected square matrix, got shape {w.shape}")
    return matrix_exp(w * w).T * (2.0 * w)


@dataclass
class NotearsConfig:
    lambda1: float = 0.01
    lambda2: float = 0.01  # L2 over MLP-variant weights; balances the two layers
    rho_init: float = 1.0
    rho_max: float = 1e16
    h_tolerance: float = 1e-8
    max_outer_iters: int = 20
    inner_steps: int = 300
    threshold: float = 0.3
    top_k: int = 3
    mlp_hidden: int = 10

    def validate(self):
        if self.rho_init <= 0:
            raise ConfigError(f"notears.rho_init must be > 0, got {self.rho_init}")
        if self.rho_max < self.rho_init:
            raise ConfigError(f"notears.rho_max {self.rho_max} < rho_init {self.rho_init}")
        if self.h_tolerance <= 0:
            raise ConfigError(f"notears.h_tolerance must be > 0, got {self.h_tolerance}")
        if self.threshold <= 0:
            raise ConfigError(f"notears.threshold must be > 0, got {self.threshold}")
        return self


@dataclass
class CausalGraph:
    """Weighted adjacency over named features; W[i, j] is the i -> j strength."""

    names: tuple
    weights: np.ndarray
    threshold: float
    edges: list = field(default_factory=list)  # (src, dst, weight), |weight| descending
    converged: bool = True
    h_value: float = 0.0

    @property
    def d(self):
        return len(self.names)

    def parent_sets(self):
        parents = [[] for _ in range(self.d)]
        for src, dst, _ in self.edges:
            parents[dst].append(src)
        return parents

    def topological_order(self):
        """Kahn ordering over the selected edges; raises ConfigError on a cycle."""
        indeg = [0] * self.d
        children = [[] for _ in range(self.d)]
        for src, dst, _ in self.edges:
            indeg[dst] += 1
            children[src].append(dst)
        ready = [i for i in range(self.d) if indeg[i] == 0]
        order = []
        while ready:
            node = ready.pop(0)
            order.append(node)
            for child in children[node]:
                indeg[child] -= 1
                if indeg[child] == 0:
                    ready.append(child)
        if len(order) != self.d:
            raise ConfigError("causal graph: edge set contains a cycle")
        return order

    def to_json(self):
        return json.dumps({
            "names": list(self.names),
            "W": [float(x) for x in self.weights.reshape(-1)],
            "threshold": self.threshold,
            "edges": [{"src": int(s), "dst": int(t), "weight": float(w)} for s, t, w in self.edges],
            "converged": self.converged,
            "h": self.h_value,
        }, indent=2)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        names = tuple(obj["names"])
        d = len(names)
        w = np.asarray(obj["W"], dtype=np.float64).reshape(d, d)
        edges = [(e["src"], e["dst"], e["weight"]) for e in obj["edges"]]
        return cls(names=names, weights=w, threshold=float(obj["threshold"]),
                   edges=edges, converged=bool(obj.get("converged", True)),
                   h_value=float(obj.get("h", 0.0)))


def top_k_edges(graph, k=3):
    """k strongest surviving edges by |weight|; ties break on (src, dst) ascending."""
    candidates = []
    w = graph.weights
    for i in range(graph.d):
        for j in range(graph.d):
            if w[i, j] != 0.0:
                candidates.append((i, j, float(w[i, j])))
    candidates.sort(key=lambda e: (-abs(e[2]), e[0], e[1]))
    return candidates[:k]


def _overflow_guard(w, grad_size):
    """Quadratic pull-back when the line search wanders where exp(W*W)
    would overflow; keeps L-BFGS-B's objective finite."""
    if float(np.abs(w).max(initial=0.0)) <= 12.0:
        return None
    loss = 1e12 + float((w * w).sum())
    return loss, 2.0 * w


def _augmented_lagrangian(solve_inner, read_w, x0, cfg):
    """Dual-ascent outer loop: escalate rho (x10) while h stagnates, update
    the multiplier, stop at tolerance or the rho cap."""
    params = x0
    rho, alpha, h_val = cfg.rho_init, 0.0, np.inf
    for _ in range(cfg.max_outer_iters):
        new_params, h_new = None, None
        while rho < cfg.rho_max:
            new_params = solve_inner(params, rho, alpha)
            h_new = notears_h(read_w(new_params))
            if h_new > 0.25 * h_val:
                rho *= 10.0
            else:
                break
        params, h_val = new_params, h_new
        alpha += rho * h_val
        if h_val <= cfg.h_tolerance or rho >= cfg.rho_max:
            break
    return read_w(params), h_val <= cfg.h_tolerance


def _fit_linear(x, cfg, rng):
    """Least-squares fit ||X - XW||^2 / (2n) with exact L1 via a
    positive/negative split solved by bound-constrained L-BFGS."""
    from scipy.optimize import minimize

    n, d = x.shape
    bounds = []
    for part in range(2):
        for i in range(d):
            for j in range(d):
                bounds.append((0.0, 0.0) if i == j else (0.0, None))

    def unpack(vec):
        return vec[: d * d].reshape(d, d) - vec[d * d:].reshape(d, d)

    def solve_inner(vec, rho, alpha):
        def fun(v):
            w = unpack(v)
            guard = _overflow_guard(w, v.size)
            if guard is not None:
                loss_g, g_w = guard
                return loss_g, np.concatenate([g_w.ravel(), -g_w.ravel()])
            resid = x - x @ w
            h_val = notears_h(w)
            loss = (resid ** 2).sum() / (2.0 * n) + cfg.lambda1 * v.sum() \
                + 0.5 * rho * h_val * h_val + alpha * h_val
            g_w = -(x.T @ resid) / n + (rho * h_val + alpha) * notears_h_grad(w)
            grad = np.concatenate([(g_w + cfg.lambda1).ravel(), (-g_w + cfg.lambda1).ravel()])
            return loss, grad

        res = minimize(fun, vec, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.inner_steps})
        return res.x

    return _augmented_lagrangian(solve_inner, unpack, np.zeros(2 * d * d), cfg)


def _fit_mlp(x, cfg, rng):
    """Per-node one-hidden-layer sigmoid networks; W[j, i] is the L2 norm
    of the first-layer weights from input j into node i's network."""
    from scipy.optimize import minimize

    n, d = x.shape
    m = cfg.mlp_hidden
    n_a = d * m * d
    sizes = [n_a, n_a, d * m, d * m, d]  # a_pos, a_neg, b1, w2, b2

    def split(vec):
        out, off = [], 0
        for s in sizes:
            out.append(vec[off:off + s])
            off += s
        a = out[0].reshape(d, m, d) - out[1].reshape(d, m, d)
        return a, out[2].reshape(d, m), out[3].reshape(d, m), out[4]

    def derived_w(a):
        # edge j -> i from node i's first-layer column j
        return np.sqrt((a ** 2).sum(axis=1)).T

    bounds = []
    for part in range(2):
        for i in range(d):
            for _h in range(m):
                for j in range(d):
                    bounds.append((0.0, 0.0) if i == j else (0.0, None))
    bounds += [(None, None)] * (d * m + d * m + d)

    x0 = np.zeros(sum(sizes))
    init = rng.uniform(-1.0, 1.0, size=(d, m, d)) / np.sqrt(d)
    for i in range(d):
        init[i, :, i] = 0.0
    x0[:n_a] = np.maximum(init, 0.0).ravel()
    x0[n_a:2 * n_a] = np.maximum(-init, 0.0).ravel()
    x0[2 * n_a + d * m:2 * n_a + 2 * d * m] = rng.uniform(-1.0, 1.0, size=d * m) / np.sqrt(m)

    def solve_inner(vec, rho, alpha):
        def fun(v):
            a, b1, w2, b2 = split(v)
            guard = _overflow_guard(derived_w(a), v.size)
            if guard is not None:
                loss_g, g_w = guard
                g_a = 2.0 * a
                return loss_g, np.concatenate([
                    g_a.ravel(), -g_a.ravel(), np.zeros(d * m + d * m + d)])
            pre = np.einsum("nd,khd->nkh", x, a) + b1
            hid = 1.0 / (1.0 + np.exp(-pre))
            pred = np.einsum("nkh,kh->nk", hid, w2) + b2
            resid = pred - x
            w_mat = derived_w(a)
            h_val = notears_h(w_mat)
            loss = (resid ** 2).sum() / (2.0 * n) + cfg.lambda1 * v[:2 * n_a].sum() \
                + 0.5 * cfg.lambda2 * ((a ** 2).sum() + (w2 ** 2).sum()) \
                + 0.5 * rho * h_val * h_val + alpha * h_val

            d_pred = resid / n
            g_w2 = np.einsum("nk,nkh->kh", d_pred, hid) + cfg.lambda2 * w2
            g_b2 = d_pred.sum(axis=0)
            d_pre = np.einsum("nk,kh->nkh", d_pred, w2) * hid * (1.0 - hid)
            g_a = np.einsum("nkh,nd->khd", d_pre, x) + cfg.lambda2 * a
            g_b1 = d_pre.sum(axis=0)
            dh_w = (rho * h_val + alpha) * notears_h_grad(w_mat)  # indexed [src, dst]
            norms = np.maximum(w_mat, 1e-12)
            g_a = g_a + (dh_w.T / norms.T)[:, None, :] * a
            grad = np.concatenate([
                (g_a + cfg.lambda1).ravel(), (-g_a + cfg.lambda1).ravel(),
                g_b1.ravel(), g_w2.ravel(), g_b2.ravel(),
            ])
            return loss, grad

        res = minimize(fun, vec, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.inner_steps})
        return res.x

    return _augmented_lagrangian(solve_inner, lambda v: derived_w(split(v)[0]), x0, cfg)


def fit_notears(x, cfg=None, variant="linear", names=None, seed=0):
    """Learn a thresholded DAG over the columns of ``x``.

    Columns should be pre-normalised. The linear variant minimises
    ||X - XW||^2 / (2n); the MLP variant fits one small per-node network
    and reads edge strengths off the first-layer weight norms. The
    returned graph is always acyclic: after thresholding, the weakest
    surviving edges are dropped until h < 1e-8.
    """
    cfg = (cfg or NotearsConfig()).validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"fit_notears: expected 2-D data, got shape {x.shape}")
    n, d = x.shape
    if d > MAX_NODES:
        raise ConfigError(f"fit_notears: {d} columns exceed the desk-scale limit {MAX_NODES}")
    if n < 10 * d:
        warnings.warn(f"fit_notears: only {n} samples for {d} nodes (recommended >= {10 * d})")
    if names is None:
        names = tuple(f"x{i}" for i in range(d))
    if len(names) != d:
        raise ConfigError(f"fit_notears: {len(names)} names for {d} columns")
    rng = np.random.default_rng(seed)

    if variant == "linear":
        w, converged = _fit_linear(x, cfg, rng)
    elif variant == "mlp":
        w, converged = _fit_mlp(x, cfg, rng)
    else:
        raise ConfigError(f"fit_notears: unknown variant {variant!r}")

    w = np.where(np.abs(w) < cfg.threshold, 0.0, w)
    np.fill_diagonal(w, 0.0)
    # enforce the acyclic postcondition: drop weakest surviving edges if needed
    while notears_h(w) >= 1e-8:
        nz = np.argwhere(w != 0.0)
        weakest = min(nz, key=lambda ij: abs(w[ij[0], ij[1]]))
        w[weakest[0], weakest[1]] = 0.0

    graph = CausalGraph(names=tuple(names), weights=w, threshold=cfg.threshold,
                        converged=converged, h_value=notears_h(w))
    graph.edges = top_k_edges(graph, cfg.top_k)
    return graph


class NotearsDiscovery(BaseEstimator):
    """Estimator facade: fit(X) learns `graph_`, `adjacency_` and `edges_`."""

    def __init__(self, variant="linear", lambda1=0.01, lambda2=0.01, rho_init=1.0,
                 rho_max=1e16, h_tolerance=1e-8, max_outer_iters=20, inner_steps=300,
                 threshold=0.3, top_k=3, mlp_hidden=10, seed=0):
        self.variant = variant
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.rho_init = rho_init
        self.rho_max = rho_max
        self.h_tolerance = h_tolerance
        self.max_outer_iters = max_outer_iters
        self.inner_steps = inner_steps
        self.threshold = threshold
        self.top_k = top_k
        self.mlp_hidden = mlp_hidden
        self.seed = seed

    def fit(self, X, y=None, feature_names=None):
        cfg = NotearsConfig(
            lambda1=self.lambda1, lambda2=self.lambda2, rho_init=self.rho_init,
            rho_max=self.rho_max, h_tolerance=self.h_tolerance,
            max_outer_iters=self.max_outer_iters, inner_steps=self.inner_steps,
            threshold=self.threshold, top_k=self.top_k, mlp_hidden=self.mlp_hidden,
        )
        self.graph_ = fit_notears(X, cfg, variant=self.variant,
                                  names=feature_names, seed=self.seed)
        self.adjacency_ = self.graph_.weights
        self.edges_ = self.graph_.edges
        self.converged_ = self.graph_.converged
        return self
