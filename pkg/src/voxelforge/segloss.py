"""IOU (Jaccard) and Dice losses for probability fields, with gradients.

Notation used throughout: ``I = sum(p*y)``, ``U = sum(p) + sum(y) - I``.
When ``p`` and ``y`` are both all-zero the overlap fraction is taken to be 1,
so every IOU/Dice-family loss is 0 there (and its gradient is set to 0).

Besides the losses this module carries the numerical checks for their
properties: the Jaccard metric (and the Dice counterexample), the
restriction bound, false-positive/false-negative penalty curves and a
finite-difference gradient check.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "LossReport",
    "iou_loss",
    "dice_loss",
    "iou_loss_power",
    "iou_loss_general",
    "weighted_cross_entropy",
    "multiclass_loss",
    "dice_score",
    "check_jaccard_metric",
    "restriction_bound",
    "penalty_curves",
    "grad_check",
    "LOSS_KINDS",
]

CE_CLIP = 1e-7
ENDPOINT_TOL = 1e-12


@dataclass
class LossReport:
    value: float
    gradient: np.ndarray | None = None
    per_class: dict[int, float] | None = field(default=None)

    def __float__(self):
        return self.value


def _fields(p, y) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: p{p.shape} vs y{y.shape}")
    if not np.isfinite(p).all():
        raise ValueError("p contains NaN or infinite values")
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("p must lie in [0, 1]")
    if y.size and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("y must be binary")
    return p.ravel(), y.ravel()


def _iou_from_terms(inter, pmass, ymass, dinter, dpmass, shape, grad):
    """Loss ``1 - I/U`` and its gradient given the masses and their
    per-voxel derivatives."""
    union = pmass + ymass - inter
    if union <= 0:
        return LossReport(0.0, np.zeros(shape) if grad else None)
    value = 1.0 - inter / union
    g = None
    if grad:
        dunion = dpmass - dinter
        g = ((inter * dunion - union * dinter) / union**2).reshape(shape)
    return LossReport(float(value), g)


def iou_loss(p, y, *, grad: bool = False) -> LossReport:
    """Smooth IOU loss ``1 - I / (|p| + |y| - I)``.

    The gradient is ``(I*(1 - y_k) - U*y_k) / U**2``.
    """
    shape = np.shape(p)
    p, y = _fields(p, y)
    inter = float(np.sum(p * y))
    return _iou_from_terms(inter, float(np.sum(p)), float(np.sum(y)), y, 1.0, shape, grad)


def dice_loss(p, y, *, grad: bool = False) -> LossReport:
    """Dice loss ``1 - 2I / (|p| + |y|)``."""
    shape = np.shape(p)
    p, y = _fields(p, y)
    inter = float(np.sum(p * y))
    total = float(np.sum(p)) + float(np.sum(y))
    if total <= 0:
        return LossReport(0.0, np.zeros(shape) if grad else None)
    g = ((2.0 * inter - 2.0 * y * total) / total**2).reshape(shape) if grad else None
    return LossReport(float(1.0 - 2.0 * inter / total), g)


def iou_loss_power(p, y, m: float, *, grad: bool = False) -> LossReport:
    """IOU loss with every probability raised to the power ``m > 0``."""
    if not m > 0:
        raise ValueError("power m must be positive")
    shape = np.shape(p)
    p, y = _fields(p, y)
    pm = p**m
    dpm = m * p ** (m - 1.0) if grad else 0.0
    if grad and m < 1:
        dpm = np.where(p > 0, dpm, np.inf)
    inter = float(np.sum(pm * y))
    return _iou_from_terms(inter, float(np.sum(pm)), float(np.sum(y)), dpm * y, dpm, shape, grad)


def _apply_maps(f, p: np.ndarray) -> np.ndarray:
    if callable(f):
        return np.asarray(f(p), dtype=np.float64).reshape(p.shape)
    maps = list(f)
    if len(maps) != p.size:
        raise ValueError(f"need {p.size} per-voxel maps, got {len(maps)}")
    return np.array([float(fk(pk)) for fk, pk in zip(maps, p)])


def iou_loss_general(
    p,
    y,
    f: Callable[[np.ndarray], np.ndarray] | Sequence[Callable[[float], float]],
    *,
    fprime=None,
    grad: bool = False,
) -> LossReport:
    """IOU loss with ``p_k`` replaced by ``f_k(p_k)``.

    ``f`` is either a vectorized callable applied to the whole field or a
    sequence of one scalar map per voxel. Every map must be increasing with
    ``f_k(0) = 0`` and ``f_k(1) = 1``; the endpoints are checked. Gradients
    need ``fprime`` in the same form as ``f``.
    """
    shape = np.shape(p)
    p, y = _fields(p, y)
    at0 = _apply_maps(f, np.zeros_like(p))
    at1 = _apply_maps(f, np.ones_like(p))
    if np.abs(at0).max(initial=0) > ENDPOINT_TOL or np.abs(at1 - 1).max(initial=0) > ENDPOINT_TOL:
        raise ValueError("maps must satisfy f(0) = 0 and f(1) = 1")
    fp = _apply_maps(f, p)
    if grad and fprime is None:
        raise ValueError("gradient requested but fprime not given")
    dfp = _apply_maps(fprime, p) if grad else 0.0
    inter = float(np.sum(fp * y))
    return _iou_from_terms(inter, float(np.sum(fp)), float(np.sum(y)), dfp * y, dfp, shape, grad)


def weighted_cross_entropy(p, y, mode: str = "paper-literal", *, grad: bool = False) -> LossReport:
    """Class-weighted binary cross-entropy with ``w = mean(y)``.

    ``paper-literal`` weights background voxels by ``1 - w`` and foreground
    voxels by ``w``; ``inverse-frequency`` swaps the two. Probabilities are
    clipped to ``[1e-7, 1 - 1e-7]`` before the log.
    """
    if mode not in ("paper-literal", "inverse-frequency"):
        raise ValueError(f"unknown mode {mode!r}")
    shape = np.shape(p)
    p, y = _fields(p, y)
    n = p.size
    w = float(np.mean(y)) if n else 0.0
    if mode == "paper-literal":
        weight = (1 - y) * (1 - w) + y * w
    else:
        weight = (1 - y) * w + y * (1 - w)
    pc = np.clip(p, CE_CLIP, 1 - CE_CLIP)
    per_voxel = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    value = float(np.sum(weight * per_voxel) / n) if n else 0.0
    g = None
    if grad:
        g = (weight * (-y / pc + (1 - y) / (1 - pc)) / n).reshape(shape)
    return LossReport(value, g)


def _pow_loss(m):
    return lambda p, y, grad=False: iou_loss_power(p, y, m, grad=grad)


LOSS_KINDS: dict[str, Callable[..., LossReport]] = {
    "iou": iou_loss,
    "dice": dice_loss,
    "wce": weighted_cross_entropy,
}


def _resolve_kind(kind: str, power: float | None = None):
    if kind in ("iou-pow", "iou_pow", "power"):
        return _pow_loss(2.0 if power is None else power)
    try:
        return LOSS_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}") from None


def multiclass_loss(
    probs,
    labels,
    base: str = "iou",
    *,
    power: float | None = None,
    n_classes: int | None = None,
    grad: bool = False,
    atol: float = 1e-5,
) -> LossReport:
    """Unweighted mean of the per-class losses of one-vs-rest fields.

    ``probs`` has the class axis first: ``probs[c]`` is the probability map
    of class ``c``; ``labels`` holds integer class codes.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = probs.shape[0] if n_classes is None else n_classes
    if probs.shape[0] != n_classes or probs.shape[1:] != labels.shape:
        raise ValueError(f"probs {probs.shape} do not match {n_classes} classes x labels {labels.shape}")
    if np.abs(probs.sum(axis=0) - 1.0).max(initial=0) > atol:
        raise ValueError("class probabilities must sum to 1 at every voxel")
    loss = _resolve_kind(base, power)
    per_class = {}
    grads = [] if grad else None
    for c in range(n_classes):
        rep = loss(np.clip(probs[c], 0.0, 1.0), (labels == c).astype(np.float64), grad=grad)
        per_class[c] = rep.value
        if grad:
            grads.append(rep.gradient / n_classes)
    value = float(np.mean(list(per_class.values())))
    return LossReport(value, np.stack(grads) if grad else None, per_class)


def dice_score(a, b) -> float:
    """``2|A & B| / (|A| + |B|)`` for binary arrays (1.0 when both are empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# --------------------------------------------------------------------------
# Property checks


def _binary_rows(kind: str):
    """Batched binary loss over the last axis of 0/1 arrays."""

    def iou(a, b):
        inter = np.sum(a & b, axis=-1)
        union = np.sum(a | b, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, 1.0 - inter / np.maximum(union, 1), 0.0)

    def dice(a, b):
        inter = np.sum(a & b, axis=-1)
        total = np.sum(a, axis=-1) + np.sum(b, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, 1.0 - 2.0 * inter / np.maximum(total, 1), 0.0)

    return {"iou": iou, "dice": dice}[kind]


def check_jaccard_metric(n_max: int = 3, kind: str = "iou", tol: float = 1e-12) -> dict:
    """Exhaustively test the metric axioms for binary ``kind`` loss.

    Every triple of binary vectors of each length ``1..n_max`` is checked for
    symmetry, identity of indiscernibles and the triangle inequality
    ``L(p, y) <= L(p, r) + L(r, y)``. Triples are visited in lexicographic
    order of ``(p, y, r)`` with vectors enumerated as
    ``itertools.product((0, 1), repeat=n)``; the first failure is reported.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if n_max > 8:
        raise ValueError("exhaustive check limited to n_max <= 8 (2**(3n) triples)")
    loss = _binary_rows(kind)
    checked = 0
    for n in range(1, n_max + 1):
        vecs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=bool)
        m = len(vecs)
        table = loss(vecs[:, None, :], vecs[None, :, :])
        checked += m**3
        asym = np.argwhere(np.abs(table - table.T) > tol)
        if asym.size:
            i, j = asym[0]
            return _metric_fail(kind, n, checked, "symmetry", vecs[i], vecs[j], None, table[i, j], None)
        same = np.eye(m, dtype=bool)
        bad_id = np.argwhere((table <= tol) != same)
        if bad_id.size:
            i, j = bad_id[0]
            return _metric_fail(kind, n, checked, "identity", vecs[i], vecs[j], None, table[i, j], None)
        # viol[i, j, k]: L(v_i, v_j) > L(v_i, v_k) + L(v_k, v_j)
        viol = table[:, :, None] > table[:, None, :] + table.T[None, :, :] + tol
        hits = np.argwhere(viol)
        if hits.size:
            i, j, k = hits[0]
            rhs = table[i, k] + table[k, j]
            return _metric_fail(kind, n, checked, "triangle", vecs[i], vecs[j], vecs[k], table[i, j], rhs)
    return {"kind": kind, "n_max": n_max, "triples_checked": checked, "passed": True, "counterexample": None}


def _metric_fail(kind, n, checked, axiom, p, y, r, lhs, rhs):
    ce = {
        "axiom": axiom,
        "n": n,
        "p": p.astype(int).tolist(),
        "y": y.astype(int).tolist(),
        "r": None if r is None else r.astype(int).tolist(),
        "lhs": float(lhs),
        "rhs": None if rhs is None else float(rhs),
    }
    return {"kind": kind, "n_max": n, "triples_checked": checked, "passed": False, "counterexample": ce}


def restriction_bound(p, g, s, tol: float = 1e-12):
    """Check ``L(p, g) <= L(p, p&s) + L(g&s, p&s) + L(g, g&s)`` for binary
    IOU loss. Returns ``(lhs, rhs, holds)``."""
    p = np.asarray(p, dtype=bool)
    g = np.asarray(g, dtype=bool)
    s = np.asarray(s, dtype=bool)
    if not (p.shape == g.shape == s.shape):
        raise ValueError("p, g and s must have the same length")
    lhs, rhs = _restriction_terms(p, g, s)
    return float(lhs), float(rhs), bool(lhs <= rhs + tol)


def _restriction_terms(p, g, s):
    loss = _binary_rows("iou")
    ps = p & s
    gs = g & s
    lhs = loss(p, g)
    rhs = loss(p, ps) + loss(gs, ps) + loss(g, gs)
    return lhs, rhs


def restriction_trials(trials: int, n: int, rng: np.random.Generator, tol: float = 1e-12) -> dict:
    """Random binary triples with per-triple densities; counts violations."""
    dens = rng.uniform(0, 1, size=(trials, 3, 1))
    bits = rng.uniform(0, 1, size=(trials, 3, n)) < dens
    lhs, rhs = _restriction_terms(bits[:, 0], bits[:, 1], bits[:, 2])
    bad = lhs > rhs + tol
    first = None
    if bad.any():
        i = int(np.argmax(bad))
        first = {
            "p": bits[i, 0].astype(int).tolist(),
            "g": bits[i, 1].astype(int).tolist(),
            "s": bits[i, 2].astype(int).tolist(),
            "lhs": float(lhs[i]),
            "rhs": float(rhs[i]),
        }
    return {
        "trials": trials,
        "n": n,
        "violations": int(bad.sum()),
        "max_slack_used": float(np.max(lhs - rhs)),
        "passed": not bad.any(),
        "counterexample": first,
    }


def penalty_curves(N: int, eps_list: Sequence[int], tol: float = 1e-12) -> list[dict]:
    """False-negative and false-positive IOU penalties for ``N`` true voxels
    and ``eps`` wrong ones, ``eps/N`` and ``eps/(N + eps)``.

    Each row is cross-checked against ``iou_loss`` on explicit binary fields
    that realize the error; ``match`` records the agreement.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rows = []
    for eps in eps_list:
        eps = int(eps)
        if eps < 0 or eps > N:
            raise ValueError(f"eps={eps} outside [0, N={N}]")
        fn = eps / N
        fp = eps / (N + eps)
        y = np.zeros(N + eps)
        y[:N] = 1
        p_fn = y.copy()
        p_fn[N - eps:N] = 0
        p_fp = np.ones(N + eps)
        got_fn = iou_loss(p_fn, y).value
        got_fp = iou_loss(p_fp, y).value
        rows.append(
            {
                "eps": eps,
                "L_FN": fn,
                "L_FP": fp,
                "L_FN_fields": got_fn,
                "L_FP_fields": got_fp,
                "match": abs(got_fn - fn) <= tol and abs(got_fp - fp) <= tol,
            }
        )
    return rows


def _central_diff(fun, p, h):
    g = np.empty_like(p)
    for k in range(p.size):
        up = p.copy()
        dn = p.copy()
        step_up = h if p[k] + h <= 1 else 0.0
        step_dn = h if p[k] - h >= 0 else 0.0
        up[k] += step_up
        dn[k] -= step_dn
        g[k] = (fun(up) - fun(dn)) / (step_up + step_dn)
    return g


def grad_check(
    kind: str = "iou",
    trials: int = 100,
    n: int = 64,
    tol: float = 1e-4,
    *,
    power: float | None = None,
    h: float = 1e-5,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients to central finite differences.

    ``p`` is drawn from ``(0.01, 0.99)^n`` and ``y`` is Bernoulli(1/2) with
    at least one positive. The error per trial is
    ``max|g_analytic - g_fd| / max(max|g_fd|, 1e-12)``.
    """
    loss = _resolve_kind(kind, power)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = rng.uniform(0.01, 0.99, n)
        y = (rng.uniform(size=n) < 0.5).astype(np.float64)
        y[rng.integers(n)] = 1.0
        analytic = loss(p, y, grad=True).gradient
        numeric = _central_diff(lambda q: loss(q, y).value, p, h)
        scale = max(np.abs(numeric).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    label = kind if power is None else f"{kind}(m={power})"
    return {"kind": label, "trials": trials, "n": n, "h": h, "tol": tol,
            "max_rel_error": worst, "passed": worst < tol}
