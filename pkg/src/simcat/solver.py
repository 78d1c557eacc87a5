"""Limited-memory BFGS for smooth unconstrained minimization.

The line search enforces the strong Wolfe conditions (bracketing plus
zoom with cubic interpolation), which keeps every curvature pair positive
and the two-loop recursion well defined.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 1500
    tolerance: float = 1e-3
    history: int = 10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise InvalidInputError("tolerance must be > 0")
        if self.history < 1:
            raise InvalidInputError("history must be >= 1")

    def to_dict(self):
        return {"max_iterations": self.max_iterations, "tolerance": self.tolerance, "history": self.history}


@dataclass
class SolveResult:
    x: np.ndarray
    loss: float
    grad_norm: float
    iterations: int
    converged: bool
    losses: list = field(default_factory=list)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (a, fa, ga) and (b, fb, gb), or None."""
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2 * d2)
    if not np.isfinite(t):
        return None
    return t


def _zoom(phi, lo, hi, f0, g0, c1, c2, max_iter=30):
    a_lo, f_lo, g_lo = lo
    a_hi, f_hi, g_hi = hi
    best = None
    for _ in range(max_iter):
        t = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        left, right = min(a_lo, a_hi), max(a_lo, a_hi)
        width = right - left
        if t is None or t < left + 0.1 * width or t > right - 0.1 * width:
            t = 0.5 * (a_lo + a_hi)
        ft, gt, state = phi(t)
        if ft > f0 + c1 * t * g0 or ft >= f_lo:
            a_hi, f_hi, g_hi = t, ft, gt
        else:
            if abs(gt) <= -c2 * g0:
                return t, ft, state
            if gt * (a_hi - a_lo) >= 0:
                a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
            a_lo, f_lo, g_lo = t, ft, gt
            best = (t, ft, state)
        if abs(a_hi - a_lo) < 1e-16:
            break
    return best if best is not None else (None, None, None)


def wolfe_line_search(fun, x, f0, g, p, step0=1.0, c1=1e-4, c2=0.9, max_iter=30):
    """Return ``(step, f_new, g_new)`` satisfying the strong Wolfe conditions.

    ``(None, None, None)`` when no acceptable step is found.
    """
    d0 = float(g @ p)
    cache = {}

    def phi(t):
        if t not in cache:
            f, gr = fun(x + t * p)
            cache[t] = (float(f), float(gr @ p), gr)
        f, d, gr = cache[t]
        return f, d, (f, gr)

    prev_t, prev_f, prev_d = 0.0, f0, d0
    t = step0
    for i in range(max_iter):
        ft, dt, state = phi(t)
        if not np.isfinite(ft):
            t = 0.5 * (prev_t + t)
            continue
        if ft > f0 + c1 * t * d0 or (i > 0 and ft >= prev_f):
            t, _, state = _zoom(phi, (prev_t, prev_f, prev_d), (t, ft, dt), f0, d0, c1, c2)
            return (t, state[0], state[1]) if t is not None else (None, None, None)
        if abs(dt) <= -c2 * d0:
            return t, state[0], state[1]
        if dt >= 0:
            t, _, state = _zoom(phi, (t, ft, dt), (prev_t, prev_f, prev_d), f0, d0, c1, c2)
            return (t, state[0], state[1]) if t is not None else (None, None, None)
        prev_t, prev_f, prev_d = t, ft, dt
        t = 2.0 * t
    return None, None, None


def solve(objective, init, config=SolverConfig()):
    """Minimize ``objective`` (returning ``(loss, grad)``) from ``init``.

    Stops when the Euclidean norm of the gradient drops to
    ``config.tolerance`` or after ``config.max_iterations`` iterations.
    """
    x = np.array(init, dtype=np.float64, copy=True)
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise InvalidInputError("objective is not finite at the initial point")

    s_hist, y_hist, rho_hist = [], [], []
    losses = [f]
    gnorm = float(np.linalg.norm(g))
    it = 0
    while gnorm > config.tolerance and it < config.max_iterations:
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            gamma = 1.0 / max(gnorm, 1.0)
        r = gamma * q
        for s, y, rho, a in zip(s_hist, y_hist, rho_hist, reversed(alphas)):
            b = rho * (y @ r)
            r += s * (a - b)
        p = -r
        if g @ p >= 0:
            # not a descent direction: restart from steepest descent
            s_hist, y_hist, rho_hist = [], [], []
            p = -g / max(gnorm, 1.0)

        t, f_new, g_new = wolfe_line_search(objective, x, f, g, p)
        if t is None:
            if s_hist:
                s_hist, y_hist, rho_hist = [], [], []
                continue
            break
        s = t * p
        x = x + s
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(y @ y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > config.history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        f, g = f_new, g_new
        gnorm = float(np.linalg.norm(g))
        losses.append(f)
        it += 1

    return SolveResult(x=x, loss=f, grad_norm=gnorm, iterations=it,
                       converged=gnorm <= config.tolerance, losses=losses)
