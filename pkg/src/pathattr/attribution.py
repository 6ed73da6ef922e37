"""Gradient attribution methods against the :class:`GradientOracle` contract.

All methods return a :class:`SaliencyMap` of the input's shape. Path methods
(IG, Guided IG, Blur IG) also fill in their completeness gap
``|sum(a) - (h(x) - h(x'))|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .model import GradientOracle

METHODS = ("vanilla", "smoothgrad", "ig", "guided_ig", "blur_ig")
BASELINES = ("zeros", "max_blur")


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    steps: int | None = None
    baseline: str | None = None
    target_class: int = 0
    completeness_gap: float | None = None
    seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"{self.method}: non-finite attribution values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class AttributionConfig:
    method: str = "ig"
    steps: int = 128
    smoothgrad_samples: int = 16
    smoothgrad_sigma: float = 0.1
    smoothgrad_inner: str = "vanilla"
    guided_fraction: float = 0.1
    blur_sigma_max: float = 8.0
    baseline: str = "zeros"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.smoothgrad_samples < 1:
            raise ValueError("smoothgrad_samples must be at least 1")
        if self.smoothgrad_sigma < 0:
            raise ValueError("smoothgrad_sigma must be non-negative")
        if not 0 < self.guided_fraction <= 1:
            raise ValueError("guided_fraction must be in (0, 1]")
        if self.blur_sigma_max <= 0:
            raise ValueError("blur_sigma_max must be positive")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")


@dataclass
class PathSpec:
    points: np.ndarray

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# helpers


def tree_sum(stack: np.ndarray) -> np.ndarray:
    """Sum along axis 0 in a fixed pairwise tree (independent of batching)."""
    parts = np.asarray(stack, dtype=np.float64)
    if len(parts) == 0:
        raise ValueError("nothing to sum")
    while len(parts) > 1:
        if len(parts) % 2:
            head = parts[:-1:2] + parts[1::2]
            parts = np.concatenate([head, parts[-1:]], axis=0)
        else:
            parts = parts[0::2] + parts[1::2]
    return parts[0]


def _check_pair(image, baseline) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(image, dtype=np.float64)
    x0 = np.asarray(baseline, dtype=np.float64)
    if x.shape != x0.shape:
        raise ShapeError(f"image {x.shape} and baseline {x0.shape} differ")
    return x, x0


def _finite(grad: np.ndarray, method: str) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"{method}: oracle returned non-finite gradients")
    return grad


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(4.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (offsets / sigma) ** 2)
    return w / w.sum()


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius, radius)
    xp = np.pad(x, pad, mode="symmetric")
    n = x.shape[axis]
    out = x.copy()
    # x + sum w (x_shift - x): a constant signal stays exactly constant
    for j, w in enumerate(kernel):
        if j == radius:
            continue
        shifted = np.take(xp, np.arange(j, j + n), axis=axis)
        out += w * (shifted - x)
    return out


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes.

    The kernel is truncated at 4 sigma and renormalised; borders are mirrored.
    ``sigma == 0`` returns a copy of the input.
    """
    x = np.asarray(image, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return x.copy()
    kernel = _gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(x, kernel, x.ndim - 2), kernel, x.ndim - 1)


# ---------------------------------------------------------------------------
# baselines and paths


def make_baseline(image, kind: str = "zeros", sigma_max: float = 8.0) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if kind == "zeros":
        return np.zeros_like(x)
    if kind == "max_blur":
        return gaussian_blur(x, sigma_max)
    raise ValueError(f"unknown baseline kind {kind!r}")


def linear_path(baseline, image, steps: int) -> PathSpec:
    """``steps + 1`` points ``x' + (k / steps) (x - x')``; both endpoints exact."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x, x0 = _check_pair(image, baseline)
    alphas = np.arange(steps + 1, dtype=np.float64) / steps
    alphas = alphas.reshape((-1,) + (1,) * x.ndim)
    points = x0 + alphas * (x - x0)
    points[0] = x0
    points[-1] = x
    return PathSpec(points)


def completeness_gap(smap: SaliencyMap, oracle: GradientOracle, image, baseline, class_index: int) -> float:
    """``|sum(a) - (h(x) - h(x'))|``; also stored on ``smap``."""
    x, x0 = _check_pair(image, baseline)
    delta = oracle.score(x, class_index) - oracle.score(x0, class_index)
    gap = abs(float(np.sum(smap.values)) - delta)
    smap.completeness_gap = gap
    return gap


def relative_gap(smap: SaliencyMap, oracle: GradientOracle, image, baseline, class_index: int) -> float:
    x, x0 = _check_pair(image, baseline)
    delta = oracle.score(x, class_index) - oracle.score(x0, class_index)
    gap = completeness_gap(smap, oracle, x, x0, class_index)
    return gap / max(abs(delta), 1e-8)


# ---------------------------------------------------------------------------
# segment refinement


def _refine(oracle, curve, vertices, heights, grads, class_index, rtol, budget):
    """Midpoint-rule path sum, with the worst segments cut in three until the
    summed residual ``sum |(b - a) . g - (h(b) - h(a))|`` drops below
    ``rtol * |h(end) - h(start)|`` or ``budget`` extra gradient calls run out.

    The middle third keeps its parent's midpoint, so a cut costs two new
    gradients (plus two scores). ``curve(k, t)`` returns the point at local
    parameter ``t`` of segment ``k`` (``t = 0`` and ``t = 1`` are its vertices).
    Leaves stay in path order.
    """
    # (segment, t0, t1, start point, end point, h(start), h(end), midpoint gradient)
    segs = [(k, 0.0, 1.0, vertices[k], vertices[k + 1], heights[k], heights[k + 1], grads[k])
            for k in range(len(vertices) - 1)]

    def estimate(seg):
        return (seg[4] - seg[3]) * seg[7]

    target = rtol * abs(heights[-1] - heights[0]) if rtol else None
    while target is not None and budget >= 2:
        resid = np.array([abs(float(estimate(seg).sum()) - (seg[6] - seg[5])) for seg in segs])
        if resid.sum() <= target:
            break
        worst = np.flatnonzero(resid > target / len(segs))
        worst = worst[np.argsort(-resid[worst], kind="stable")][: budget // 2]
        if len(worst) == 0:
            break
        budget -= 2 * len(worst)
        cuts, probes = [], []
        for i in worst:
            k, t0, t1, *_ = segs[i]
            d = (t1 - t0) / 3.0
            cuts += [curve(k, t0 + d), curve(k, t0 + 2 * d)]
            probes += [curve(k, t0 + 0.5 * d), curve(k, t1 - 0.5 * d)]
        hc = np.asarray(oracle.scores(np.stack(cuts), class_index), dtype=np.float64)
        gp = _finite(np.asarray(oracle.gradients(np.stack(probes), class_index), dtype=np.float64), "refine")
        split = {}
        for j, i in enumerate(worst):
            k, t0, t1, a, b, ha, hb, g = segs[i]
            d = (t1 - t0) / 3.0
            p1, p2 = cuts[2 * j], cuts[2 * j + 1]
            h1, h2 = float(hc[2 * j]), float(hc[2 * j + 1])
            split[i] = [
                (k, t0, t0 + d, a, p1, ha, h1, gp[2 * j]),
                (k, t0 + d, t0 + 2 * d, p1, p2, h1, h2, g),
                (k, t0 + 2 * d, t1, p2, b, h2, hb, gp[2 * j + 1]),
            ]
        segs = [piece for i, seg in enumerate(segs) for piece in split.get(i, [seg])]
    return tree_sum(np.stack([estimate(seg) for seg in segs]))


# ---------------------------------------------------------------------------
# methods


def vanilla_gradient(oracle: GradientOracle, image, class_index: int) -> SaliencyMap:
    """Raw signed gradient of the class score at the input."""
    x = np.asarray(image, dtype=np.float64)
    grad = _finite(np.asarray(oracle.gradient(x, class_index), dtype=np.float64), "vanilla")
    return SaliencyMap(grad, "vanilla", steps=None, baseline=None, target_class=class_index)


def integrated_gradients(oracle: GradientOracle, image, baseline, class_index: int, steps: int = 128) -> SaliencyMap:
    """Straight-line path integral, midpoint Riemann rule with ``steps`` gradient calls."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x, x0 = _check_pair(image, baseline)
    diff = x - x0
    alphas = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    points = x0 + alphas.reshape((-1,) + (1,) * x.ndim) * diff
    grads = _finite(np.asarray(oracle.gradients(points, class_index), dtype=np.float64), "ig")
    avg = tree_sum(grads) / steps
    smap = SaliencyMap(diff * avg, "ig", steps=steps, baseline=_describe(x0), target_class=class_index)
    completeness_gap(smap, oracle, x, x0, class_index)
    return smap


def guided_ig(oracle: GradientOracle, image, baseline, class_index: int, steps: int = 128,
              fraction: float = 0.1, rtol: float | None = 0.005, budget: int | None = None) -> SaliencyMap:
    """Adaptive path that advances low-|gradient| features first.

    Each of the ``steps`` steps cuts the remaining L1 distance to the input by
    ``1 / steps`` of the total. Within a step, the ``fraction`` of not-yet-arrived
    features with the smallest |gradient| is moved toward the input (fully, or
    by the share needed to hit the step's target), repeating until the target
    is met. The last step lands on the input exactly.

    Increments are weighted by the gradient at each segment's midpoint. A step
    can move features across their whole range at once, so segments whose
    midpoint sum misses their score change are subdivided (see ``rtol`` and
    ``budget``, default ``32 * steps`` extra gradient calls; ``rtol=None`` keeps
    the plain one-gradient-per-step sum).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    x_in, x0 = _check_pair(image, baseline)
    meta = dict(steps=steps, baseline=_describe(x0), target_class=class_index)
    l1_total = float(np.abs(x_in - x0).sum())
    if l1_total == 0.0:
        return SaliencyMap(np.zeros_like(x_in), "guided_ig", completeness_gap=0.0, **meta)

    vertices = [x0.copy()]
    flat_in = x_in.reshape(-1)
    for step in range(steps - 1):
        x = vertices[-1]
        grad = np.abs(_finite(np.asarray(oracle.gradient(x, class_index), dtype=np.float64), "guided_ig")).reshape(-1)
        target = l1_total * (1.0 - (step + 1) / steps)
        nxt = x.reshape(-1).copy()
        while True:
            remaining = np.abs(flat_in - nxt)
            current = float(remaining.sum())
            if current <= target:
                break
            active = np.flatnonzero(remaining > 0)
            count = max(1, math.ceil(fraction * len(active)))
            chosen = active[np.argsort(grad[active], kind="stable")[:count]]
            gamma = (current - target) / float(remaining[chosen].sum())
            if gamma >= 1.0:
                nxt[chosen] = flat_in[chosen]
            else:
                nxt[chosen] = nxt[chosen] + gamma * (flat_in[chosen] - nxt[chosen])
                break
        vertices.append(nxt.reshape(x_in.shape))
    vertices.append(x_in.copy())
    vertices = np.stack(vertices)

    def curve(k, t):
        return vertices[k] + t * (vertices[k + 1] - vertices[k])

    mids = vertices[:-1] + 0.5 * (vertices[1:] - vertices[:-1])
    grads = _finite(np.asarray(oracle.gradients(mids, class_index), dtype=np.float64), "guided_ig")
    heights = np.asarray(oracle.scores(vertices, class_index), dtype=np.float64)
    attr = _refine(oracle, curve, vertices, heights, grads, class_index, rtol,
                   32 * steps if budget is None else budget)
    smap = SaliencyMap(attr, "guided_ig", **meta)
    completeness_gap(smap, oracle, x_in, x0, class_index)
    return smap


def blur_path_sigmas(sigma_max: float, steps: int) -> np.ndarray:
    """``steps + 1`` blur widths from ``sigma_max`` down to exactly 0."""
    sig = sigma_max * (1.0 - np.arange(steps + 1, dtype=np.float64) / steps)
    sig[-1] = 0.0
    return sig


def blur_ig(oracle: GradientOracle, image, class_index: int, steps: int = 128, sigma_max: float = 8.0,
            rtol: float | None = 0.005, budget: int | None = None) -> SaliencyMap:
    """Path from the maximally blurred image to the input through decreasing blur.

    ``a = sum_k (x_k - x_{k-1}) * grad h(blur(x, mid-sigma_k))``. Steps whose
    sum misses their score change are split in sigma, so every extra vertex
    still lies on the blur path (``rtol``/``budget`` as in :func:`guided_ig`).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if sigma_max <= 0:
        raise ValueError("sigma_max must be positive")
    x = np.asarray(image, dtype=np.float64)
    sigmas = blur_path_sigmas(sigma_max, steps)
    points = np.stack([gaussian_blur(x, s) for s in sigmas])
    points[-1] = x

    def curve(k, t):
        return gaussian_blur(x, sigmas[k] + t * (sigmas[k + 1] - sigmas[k]))

    mids = np.stack([curve(k, 0.5) for k in range(steps)])
    grads = _finite(np.asarray(oracle.gradients(mids, class_index), dtype=np.float64), "blur_ig")
    heights = np.asarray(oracle.scores(points, class_index), dtype=np.float64)
    attr = _refine(oracle, curve, points, heights, grads, class_index, rtol,
                   32 * steps if budget is None else budget)
    smap = SaliencyMap(attr, "blur_ig", steps=steps, baseline=f"max_blur(sigma={sigma_max:g})",
                       target_class=class_index)
    completeness_gap(smap, oracle, x, points[0], class_index)
    return smap


def smoothgrad(oracle: GradientOracle, image, class_index: int, samples: int = 16, sigma: float = 0.1,
               inner: str = "vanilla", seed: int = 0, **inner_kwargs) -> SaliencyMap:
    """Mean of ``inner`` maps over ``x + N(0, s^2)`` inputs.

    ``sigma`` is a fraction of the image's value range: ``s = sigma * (max - min)``.
    ``inner_kwargs`` go to the inner method (``steps``, ``baseline``, ``fraction``,
    ``sigma_max``). Noise comes from ``numpy.random.default_rng(seed)``.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(image, dtype=np.float64)
    scale = sigma * float(x.max() - x.min())
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=(samples,) + x.shape) * scale
    noisy = x + noise

    if inner == "vanilla":
        grads = oracle.gradients(noisy, class_index) if samples > 1 else oracle.gradient(noisy[0], class_index)[None]
        maps = _finite(np.asarray(grads, dtype=np.float64), "smoothgrad")
        steps = None
    else:
        steps = inner_kwargs.get("steps", 128)
        maps = np.stack([_inner_map(oracle, xn, class_index, inner, **inner_kwargs).values for xn in noisy])
    values = maps[0] if samples == 1 else tree_sum(maps) / samples
    return SaliencyMap(values, "smoothgrad" if inner == "vanilla" else f"smoothgrad+{inner}", steps=steps,
                       baseline=None, target_class=class_index, seed=seed)


def _inner_map(oracle, x, class_index, inner, steps=128, baseline="zeros", fraction=0.1, sigma_max=8.0):
    if inner == "ig":
        return integrated_gradients(oracle, x, make_baseline(x, baseline, sigma_max), class_index, steps)
    if inner == "guided_ig":
        return guided_ig(oracle, x, make_baseline(x, baseline, sigma_max), class_index, steps, fraction)
    if inner == "blur_ig":
        return blur_ig(oracle, x, class_index, steps, sigma_max)
    raise ValueError(f"unknown inner method {inner!r}")


def _describe(baseline: np.ndarray) -> str:
    if not np.any(baseline):
        return "zeros"
    return "custom"


def attribute(oracle: GradientOracle, image, class_index: int, config: AttributionConfig) -> SaliencyMap:
    """Dispatch on ``config.method``."""
    x = np.asarray(image, dtype=np.float64)
    m = config.method
    if m == "vanilla":
        return vanilla_gradient(oracle, x, class_index)
    if m == "smoothgrad":
        extra = {}
        if config.smoothgrad_inner != "vanilla":
            extra = dict(steps=config.steps, baseline=config.baseline, fraction=config.guided_fraction,
                         sigma_max=config.blur_sigma_max)
        return smoothgrad(oracle, x, class_index, config.smoothgrad_samples, config.smoothgrad_sigma,
                          config.smoothgrad_inner, seed=config.seed, **extra)
    if m == "blur_ig":
        return blur_ig(oracle, x, class_index, config.steps, config.blur_sigma_max)
    base = make_baseline(x, config.baseline, config.blur_sigma_max)
    if m == "ig":
        return integrated_gradients(oracle, x, base, class_index, config.steps)
    return guided_ig(oracle, x, base, class_index, config.steps, config.guided_fraction)
