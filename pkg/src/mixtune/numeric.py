"""Finite-difference oracles for verifying hand-written gradients.

All checks evaluate the loss closure at perturbed parameters; they never
touch the analytic backward path, so agreement is meaningful.  Everything
assumes float64 (central differences at h = 1e-6 drown in float32 noise).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "rel_error",
    "central_diff_grad",
    "directional_check",
    "coordinate_check",
    "gradient_check",
]


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Full central-difference gradient of scalar ``f`` w.r.t. array ``x``.

    ``x`` is perturbed in place and restored; ``f`` must read it afresh on
    every call.  O(2·size) evaluations; for small arrays only.
    """
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def directional_check(
    f,
    x: np.ndarray,
    analytic: np.ndarray,
    rng: np.random.Generator,
    h: float = 1e-6,
    n_dirs: int = 2,
) -> float:
    """Max relative error between g·v and the central difference along
    random unit directions v supported on ``x``.  Perturbs in place."""
    worst = 0.0
    flat = x.reshape(-1)
    for _ in range(n_dirs):
        v = rng.normal(size=flat.size)
        v /= np.linalg.norm(v)
        saved = flat.copy()
        flat += h * v
        fp = f()
        flat[:] = saved - h * v
        fm = f()
        flat[:] = saved
        fd = (fp - fm) / (2.0 * h)
        an = float(analytic.reshape(-1) @ v)
        worst = max(worst, rel_error(an, fd))
    return worst


def gradient_check(
    f,
    arrays: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    rng: np.random.Generator,
    h: float = 1e-6,
    n_random: int = 2,
) -> float:
    """Worst relative disagreement between analytic gradients and central
    finite differences over every array in ``arrays``.

    Two kinds of directions per array: the analytic gradient's own direction
    (derivative magnitude ``||g||``, the best-conditioned probe) and
    ``n_random`` random unit directions, whose error is measured relative to
    the gradient scale ``||g||`` so directions nearly orthogonal to the
    gradient are not judged against pure float roundoff.  Arrays with an
    exactly zero analytic gradient must show |fd| below roundoff instead.
    """
    base = abs(f())
    # central differences at step h cannot resolve derivatives below the
    # float64 roundoff of the loss itself; gradients under this bound are
    # indistinguishable from zero and checked as such
    noise = 1e-8 * max(1.0, base)
    worst = 0.0
    for name, x in arrays.items():
        g = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        gnorm = float(np.linalg.norm(g))
        flat = x.reshape(-1)
        dirs = []
        if gnorm > noise:
            dirs.append(g / gnorm)
        for _ in range(n_random):
            v = rng.normal(size=flat.size)
            dirs.append(v / np.linalg.norm(v))
        for di, v in enumerate(dirs):
            saved = flat.copy()
            flat += h * v
            fp = f()
            flat[:] = saved - h * v
            fm = f()
            flat[:] = saved
            fd = (fp - fm) / (2.0 * h)
            an = float(g @ v)
            if gnorm <= noise:
                err = 0.0 if abs(fd) <= noise else abs(fd) / noise
            elif di == 0:
                err = rel_error(an, fd)
            else:
                err = abs(an - fd) / max(gnorm, abs(an), abs(fd))
            worst = max(worst, err)
    return worst


def coordinate_check(
    f,
    x: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-6,
    rng: np.random.Generator | None = None,
    max_coords: int | None = None,
) -> float:
    """Max relative error over (sampled) coordinates of the gradient.

    The relative-error denominator is floored at a small fraction of the
    gradient's scale so coordinates with near-zero gradient, where central
    differences are pure roundoff, do not dominate.
    """
    flat = x.reshape(-1)
    af = np.asarray(analytic, dtype=np.float64).reshape(-1)
    idx = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        if rng is None:
            raise ValueError("sampling coordinates requires an rng")
        idx = rng.choice(flat.size, size=max_coords, replace=False)
    base = abs(f())
    # below the loss's own roundoff a central difference is pure noise;
    # coordinates where both sides sit under it count as matching zeros
    fd_noise = 1e-8 * max(1.0, base)
    floor = max(1e-4 * float(np.max(np.abs(af), initial=0.0)), fd_noise)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        if max(abs(af[i]), abs(fd)) <= fd_noise:
            continue
        worst = max(worst, rel_error(af[i], fd, floor=floor))
    return worst
