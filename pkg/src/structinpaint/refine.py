"""Optimization-based refinement of a context-encoder prediction.

The energy of an image ``x`` (equal to the known image outside the hole) given a
correspondence field ``psi`` is::

    alpha   * sum_p sum_l |phi_l(x, p) - phi_l(x, psi(p))|^2 / n_patch
  + alpha'  * sum_l |phi_l(x_center) - phi_l(y)|^2 / n_guide
  + beta    * TV(x) / x.size

where ``phi_l(x, p)`` is the feature patch of radius ``patch_radius`` around
``p // stride_l`` and each ``n_*`` is the element count of its term. It is
minimized coarse-to-fine by alternating an exact correspondence search with
backtracking gradient descent on the hole pixels.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import binary_dilation

from .data import MaskSpec
from .nets import FeatureNetParams, featnet_forward, tap_stride
from .tensor_core import Tensor, as_tensor, avgpool2, backward, getitem, mul, square, sub, tsum

log = logging.getLogger(__name__)


class RefineError(RuntimeError):
    pass


@dataclass
class RefineConfig:
    alpha: float = 1.0
    alpha_prime: float = 1.0
    beta: float = 0.01
    patch_radius: int = 1
    layers: tuple[str, ...] = ("conv1_1", "conv2_1")
    scales: int = 3
    iterations: int = 5
    image_steps: int = 5
    step_size: float = 1.0
    max_halvings: int = 20
    search: str = "exhaustive"
    patchmatch_iters: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.alpha_prime, self.beta) < 0:
            raise ValueError("energy weights must be non-negative")
        if max(self.alpha, self.alpha_prime, self.beta) <= 0:
            raise ValueError("at least one energy weight must be positive")
        if self.scales < 1:
            raise ValueError("need at least one scale")
        if min(self.iterations, self.image_steps, self.patch_radius, self.max_halvings) < 0:
            raise ValueError("iteration counts and patch radius must be non-negative")
        if self.search not in ("exhaustive", "patchmatch"):
            raise ValueError(f"unknown search {self.search!r}")

    @classmethod
    def paper(cls, **kw) -> "RefineConfig":
        return cls(layers=("conv3_1", "conv4_1"), **kw)


# feature extractors -------------------------------------------------------------

class NetFeatures:
    """Feature-network taps used as patch descriptors."""

    def __init__(self, featnet: FeatureNetParams, layers: Sequence[str]):
        self.featnet = featnet
        self.layers = tuple(layers)

    def __call__(self, img) -> dict[str, Tensor]:
        return featnet_forward(self.featnet, img, self.layers)

    def stride(self, name: str) -> int:
        return tap_stride(name)

    def subset(self, layers: Sequence[str]) -> "NetFeatures":
        return NetFeatures(self.featnet, layers)


class PixelFeatures:
    """Raw pixels as a single stride-1 layer."""

    layers = ("pixels",)

    def __call__(self, img) -> dict[str, Tensor]:
        return {"pixels": as_tensor(img)}

    def stride(self, name: str) -> int:
        return 1

    def subset(self, layers: Sequence[str]) -> "PixelFeatures":
        return self


def as_features(featnet, config: RefineConfig):
    return NetFeatures(featnet, config.layers) if isinstance(featnet, FeatureNetParams) else featnet


# patches ------------------------------------------------------------------------

def total_variation(img) -> Tensor:
    """Sum over channels of squared horizontal and vertical neighbour differences."""
    img = as_tensor(img)
    h, w = img.shape[:2]
    dv = sub(getitem(img, (slice(1, h),)), getitem(img, (slice(0, h - 1),)))
    dh = sub(getitem(img, (slice(None), slice(1, w))), getitem(img, (slice(None), slice(0, w - 1))))
    return tsum(square(dv)) + tsum(square(dh))


def _offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


def _patch_index(cells: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    off = _offsets(radius)
    return cells[:, None, 0] + off[None, :, 0], cells[:, None, 1] + off[None, :, 1]


def patch_feature(featmap, p, radius: int) -> np.ndarray:
    """Row-major flattening of the ``(2r+1) x (2r+1) x K`` block centered at ``p``."""
    fm = featmap.data if isinstance(featmap, Tensor) else np.asarray(featmap)
    i, j = int(p[0]), int(p[1])
    h, w = fm.shape[:2]
    if i - radius < 0 or j - radius < 0 or i + radius >= h or j + radius >= w:
        raise IndexError(f"patch of radius {radius} at {(i, j)} leaves the {h}x{w} feature map")
    return fm[i - radius : i + radius + 1, j - radius : j + radius + 1].reshape(-1).copy()


# geometry -----------------------------------------------------------------------

@dataclass
class Geometry:
    """Hole mask and guidance region of one pyramid level."""

    hole: np.ndarray
    center: tuple[slice, slice]

    @property
    def points(self) -> np.ndarray:
        return np.argwhere(self.hole)

    def coarser(self) -> "Geometry":
        h, w = self.hole.shape
        hole = self.hole.reshape(h // 2, 2, w // 2, 2).any(axis=(1, 3))
        cy, cx = self.center
        center = (slice(cy.start // 2, cy.stop // 2), slice(cx.start // 2, cx.stop // 2))
        return Geometry(hole, center)

    @classmethod
    def from_spec(cls, spec: MaskSpec) -> "Geometry":
        return cls(spec.hole_mask(), spec.center)


def admissible_sources(geom: Geometry, features, radius: int, layers: Sequence[str] | None = None) -> np.ndarray:
    """Pixels (row-major order) usable as match sources for every layer.

    A source must lie outside the hole and its feature patch must stay inside
    the map and clear of every feature cell touched by a hole pixel.
    """
    h, w = geom.hole.shape
    ok = ~geom.hole
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for name in layers or features.layers:
        s = features.stride(name)
        hf, wf = h // s, w // s
        foot = np.zeros((hf, wf), dtype=bool)
        pts = geom.points // s
        foot[pts[:, 0], pts[:, 1]] = True
        bad = binary_dilation(foot, structure=np.ones((2 * radius + 1,) * 2, dtype=bool)) if radius else foot
        ci, cj = ii // s, jj // s
        inside = (ci >= radius) & (cj >= radius) & (ci < hf - radius) & (cj < wf - radius)
        inside &= (ci < hf) & (cj < wf)
        layer_ok = np.zeros((h, w), dtype=bool)
        layer_ok[inside] = ~bad[ci[inside], cj[inside]]
        ok &= layer_ok
    return np.argwhere(ok)


def _check_hole_patches(geom: Geometry, features, radius: int, layers) -> None:
    h, w = geom.hole.shape
    for name in layers:
        s = features.stride(name)
        cells = geom.points // s
        if cells.min() < radius or cells[:, 0].max() >= h // s - radius or cells[:, 1].max() >= w // s - radius:
            raise RefineError(f"hole patches leave the {name} feature map")


def usable_layers(geom: Geometry, features, radius: int) -> list[str]:
    """Layers that leave at least one admissible source at this level."""
    out = []
    for name in features.layers:
        try:
            _check_hole_patches(geom, features, radius, [name])
        except RefineError:
            continue
        if len(admissible_sources(geom, features, radius, [name])):
            out.append(name)
    return out


# correspondence -----------------------------------------------------------------

@dataclass
class CorrespondenceField:
    points: np.ndarray
    sources: np.ndarray
    costs: np.ndarray

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())


def _layer_maps(x, features, layers) -> dict[str, np.ndarray]:
    maps = features.subset(layers)(Tensor(np.asarray(x.data if isinstance(x, Tensor) else x)))
    return {k: v.data for k, v in maps.items()}


def _pair_costs(fm: np.ndarray, cells_a: np.ndarray, cells_b: np.ndarray, radius: int, chunk: int = 64) -> np.ndarray:
    """Exact squared patch distances between every cell of ``cells_a`` and ``cells_b``."""
    ia, ja = _patch_index(cells_a, radius)
    ib, jb = _patch_index(cells_b, radius)
    pa = fm[ia, ja].reshape(len(cells_a), -1)
    pb = fm[ib, jb].reshape(len(cells_b), -1)
    out = np.empty((len(cells_a), len(cells_b)))
    for start in range(0, len(cells_a), chunk):
        d = pa[start : start + chunk, None, :] - pb[None, :, :]
        out[start : start + chunk] = np.einsum("pqk,pqk->pq", d, d)
    return out


def match_costs(x, features, geom: Geometry, radius: int, layers, sources: np.ndarray) -> np.ndarray:
    """``(n_hole, n_sources)`` matrix of summed per-layer patch distances."""
    maps = _layer_maps(x, features, layers)
    pts = geom.points
    total = np.zeros((len(pts), len(sources)))
    for name in layers:
        s = features.stride(name)
        pc, pinv = np.unique(pts // s, axis=0, return_inverse=True)
        qc, qinv = np.unique(sources // s, axis=0, return_inverse=True)
        d = _pair_costs(maps[name], pc, qc, radius)
        total += d[pinv.reshape(-1)][:, qinv.reshape(-1)]
    return total


def update_correspondence(x, features, geom: Geometry, config: RefineConfig, layers=None,
                          previous: CorrespondenceField | None = None) -> CorrespondenceField:
    """Best admissible source for each hole pixel; ties go to the first source in scan order.

    With ``previous``, a pixel keeps its old source unless the new one is strictly cheaper.
    """
    features = as_features(features, config)
    layers = list(layers or features.layers)
    r = config.patch_radius
    _check_hole_patches(geom, features, r, layers)
    sources = admissible_sources(geom, features, r, layers)
    if not len(sources):
        raise RefineError("no admissible source location outside the hole")
    if config.search == "patchmatch":
        field_ = patchmatch(x, features, geom, r, layers, sources, config.patchmatch_iters,
                            np.random.default_rng(config.seed))
    else:
        costs = match_costs(x, features, geom, r, layers, sources)
        best = np.argmin(costs, axis=1)
        field_ = CorrespondenceField(geom.points, sources[best], costs[np.arange(len(best)), best])
    if previous is not None:
        old = _field_costs(x, features, geom, r, layers, previous.sources)
        keep = ~(field_.costs < old)
        field_.sources[keep] = previous.sources[keep]
        field_.costs[keep] = old[keep]
    return field_


def _field_costs(x, features, geom: Geometry, radius: int, layers, srcs: np.ndarray) -> np.ndarray:
    maps = _layer_maps(x, features, layers)
    pts = geom.points
    total = np.zeros(len(pts))
    for name in layers:
        s = features.stride(name)
        fm = maps[name]
        ia, ja = _patch_index(pts // s, radius)
        ib, jb = _patch_index(srcs // s, radius)
        d = (fm[ia, ja] - fm[ib, jb]).reshape(len(pts), -1)
        total += np.einsum("pk,pk->p", d, d)
    return total


def patchmatch(x, features, geom: Geometry, radius: int, layers, sources: np.ndarray, iters: int,
               rng: np.random.Generator) -> CorrespondenceField:
    """Randomized propagation and search over admissible sources (approximate)."""
    pts = geom.points
    h, w = geom.hole.shape
    allowed = np.zeros((h, w), dtype=bool)
    allowed[sources[:, 0], sources[:, 1]] = True
    index = {tuple(p): k for k, p in enumerate(pts)}
    cur = sources[rng.integers(0, len(sources), size=len(pts))]
    cost = _field_costs(x, features, geom, radius, layers, cur)

    def try_update(k: int, cand: np.ndarray) -> None:
        i, j = cand
        if not (0 <= i < h and 0 <= j < w and allowed[i, j]):
            return
        c = _field_costs(x, features, Geometry(_single(geom.hole.shape, pts[k]), geom.center), radius, layers,
                         cand[None, :])[0]
        if c < cost[k]:
            cur[k] = cand
            cost[k] = c

    for it in range(iters):
        order = range(len(pts)) if it % 2 == 0 else range(len(pts) - 1, -1, -1)
        step = 1 if it % 2 == 0 else -1
        for k in order:
            p = pts[k]
            for d in ((-step, 0), (0, -step)):
                nb = index.get((p[0] + d[0], p[1] + d[1]))
                if nb is not None:
                    try_update(k, cur[nb] - np.array(d))
            span = max(h, w)
            while span >= 1:
                cand = cur[k] + rng.integers(-span, span + 1, size=2)
                try_update(k, cand)
                span //= 2
    return CorrespondenceField(pts, cur, cost)


def _single(shape, p) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[p[0], p[1]] = True
    return m


# energy -------------------------------------------------------------------------

@dataclass
class EnergyTerms:
    patch: float
    guide: float
    tv: float
    total: float


def _energy_tensors(x: Tensor, psi: CorrespondenceField, y, features, geom: Geometry,
                    config: RefineConfig, layers) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    r = config.patch_radius
    zero = Tensor(0.0)
    patch = guide = zero
    if config.alpha > 0:
        maps = features.subset(layers)(x)
        count = 0
        for name in layers:
            s = features.stride(name)
            ia, ja = _patch_index(psi.points // s, r)
            ib, jb = _patch_index(psi.sources // s, r)
            fm = maps[name]
            diff = sub(getitem(fm, (ia, ja)), getitem(fm, (ib, jb)))
            patch = patch + tsum(square(diff))
            count += diff.size
        patch = mul(patch, 1.0 / count)
    if config.alpha_prime > 0:
        xc = getitem(x, geom.center)
        fx = features.subset(layers)(xc)
        fy = features.subset(layers)(as_tensor(y).detach())
        count = 0
        for name in layers:
            guide = guide + tsum(square(sub(fx[name], fy[name].detach())))
            count += fy[name].size
        guide = mul(guide, 1.0 / count)
    tv = mul(total_variation(x), 1.0 / x.size) if config.beta > 0 else zero
    total = mul(patch, config.alpha) + mul(guide, config.alpha_prime) + mul(tv, config.beta)
    return patch, guide, tv, total


def energy(x, psi: CorrespondenceField, y_guidance, features, geom: Geometry, config: RefineConfig,
           layers=None) -> EnergyTerms:
    features = as_features(features, config)
    layers = list(layers or features.layers)
    terms = _energy_tensors(Tensor(np.asarray(x.data if isinstance(x, Tensor) else x)), psi, y_guidance,
                            features, geom, config, layers)
    return EnergyTerms(*(t.item() for t in terms))


def energy_and_grad(x: np.ndarray, psi, y_guidance, features, geom, config, layers):
    xt = Tensor(x, requires_grad=True)
    terms = _energy_tensors(xt, psi, y_guidance, features, geom, config, layers)
    total = terms[3]
    if total.requires_grad:
        backward(total)
        g = xt.grad
    else:
        g = np.zeros_like(x)
    return EnergyTerms(*(t.item() for t in terms)), g


def update_image(x: np.ndarray, psi: CorrespondenceField, y_guidance, features, geom: Geometry,
                 config: RefineConfig, layers=None, steps: int | None = None) -> tuple[np.ndarray, list[EnergyTerms]]:
    """Backtracking projected gradient descent on the hole pixels.

    Each accepted step strictly lowers the energy; pixels outside the hole are
    returned bit-identical. Returns the new image and the accepted energies,
    starting with the initial one.
    """
    features = as_features(features, config)
    layers = list(layers or features.layers)
    x = np.array(x, dtype=np.float64, copy=True)
    hole3 = np.broadcast_to(geom.hole[:, :, None], x.shape)
    e, g = energy_and_grad(x, psi, y_guidance, features, geom, config, layers)
    if not np.isfinite(e.total):
        raise RefineError("non-finite energy")
    history = [e]
    t = config.step_size
    for _ in range(config.image_steps if steps is None else steps):
        g = np.where(hole3, g, 0.0)
        if not np.any(g):
            break
        for _ in range(config.max_halvings + 1):
            cand = np.where(hole3, np.clip(x - t * g, 0.0, 1.0), x)
            e_new = energy(cand, psi, y_guidance, features, geom, config, layers)
            if not np.isfinite(e_new.total):
                raise RefineError("non-finite energy")
            if e_new.total < e.total:
                break
            t *= 0.5
        else:
            break
        x = cand
        e, g = energy_and_grad(x, psi, y_guidance, features, geom, config, layers)
        history.append(e)
        t *= 2.0
    return x, history


# multiscale driver --------------------------------------------------------------

@dataclass
class RefineResult:
    image: np.ndarray
    trace: list[tuple[int, int, float, float, float, float]] = field(default_factory=list)
    scales_used: list[int] = field(default_factory=list)
    layers_by_scale: dict[int, list[str]] = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scale", "iteration", "e_patch", "e_guide", "e_tv", "e_total"])
            for row in self.trace:
                w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])

    def scale_trace(self, scale: int) -> list[float]:
        return [r[5] for r in self.trace if r[0] == scale]


def _downsample(img: np.ndarray, times: int) -> np.ndarray:
    for _ in range(times):
        img = avgpool2(Tensor(img)).data
    return img


def _level_ok(geom: Geometry, features, config: RefineConfig) -> list[str]:
    h, w = geom.hole.shape
    cy, cx = geom.center
    layers = [n for n in usable_layers(geom, features, config.patch_radius)
              if (cy.stop - cy.start) % features.stride(n) == 0 and (cx.stop - cx.start) % features.stride(n) == 0
              and h % features.stride(n) == 0 and w % features.stride(n) == 0]
    return layers


def refine_multiscale(x_hat_masked, y_guidance, featnet, config: RefineConfig, spec: MaskSpec | None = None,
                      geometry: Geometry | None = None) -> RefineResult:
    """Coarse-to-fine alternating minimization of the refinement energy.

    The hole is initialized from the downsampled guidance at the coarsest level.
    Levels whose hole leaves no admissible source for any layer are skipped,
    and at each level only layers with admissible sources are used.
    """
    features = as_features(featnet, config)
    known = np.asarray(x_hat_masked, dtype=np.float64)
    y = np.asarray(y_guidance, dtype=np.float64)
    geom0 = geometry or (Geometry.from_spec(spec) if spec else None)
    if geom0 is None:
        raise ValueError("need a MaskSpec or Geometry describing the hole")
    cy, cx = geom0.center
    if y.shape[:2] != (cy.stop - cy.start, cx.stop - cx.start):
        raise ValueError(f"guidance {y.shape} does not match the {cy.stop - cy.start}-pixel center region")

    levels: list[tuple[int, Geometry, list[str]]] = []
    geom = geom0
    for level in range(config.scales):
        if level:
            if geom.hole.shape[0] % 2 or geom.hole.shape[1] % 2 or geom.center[0].start % 2:
                break
            geom = geom.coarser()
        layers = _level_ok(geom, features, config)
        if layers:
            levels.append((level, geom, layers))
        elif level == 0:
            raise RefineError("no feature layer has admissible sources at full resolution")
        else:
            log.info("skipping pyramid level %d: no admissible sources", level)
    if config.iterations == 0:
        # nothing is optimized, so the output is the guidance pasted at full resolution
        levels = levels[:1]
    result = RefineResult(known.copy())

    x = None
    for level, geom, layers in reversed(levels):
        known_l = _downsample(known, level)
        y_l = _downsample(y, level)
        hole3 = geom.hole[:, :, None]
        if x is None:
            init = known_l.copy()
            init[geom.center] = np.where(hole3[geom.center], y_l, init[geom.center])
        else:
            up = x
            for _ in range(prev_level - level):
                up = np.repeat(np.repeat(up, 2, axis=0), 2, axis=1)
            init = np.where(hole3, up, known_l)
        x = np.where(hole3, init, known_l)
        prev_level = level
        result.scales_used.append(level)
        result.layers_by_scale[level] = layers
        if config.iterations == 0:
            continue
        psi = update_correspondence(x, features, geom, config, layers)
        e = energy(x, psi, y_l, features, geom, config, layers)
        it = 0
        result.trace.append((level, it, e.patch, e.guide, e.tv, e.total))
        for _ in range(config.iterations):
            x, hist = update_image(x, psi, y_l, features, geom, config, layers)
            e = hist[-1]
            it += 1
            result.trace.append((level, it, e.patch, e.guide, e.tv, e.total))
            new_psi = update_correspondence(x, features, geom, config, layers, previous=psi)
            e_new = energy(x, new_psi, y_l, features, geom, config, layers)
            if e_new.total <= e.total:
                psi, e = new_psi, e_new
            it += 1
            result.trace.append((level, it, e.patch, e.guide, e.tv, e.total))
    hole3 = geom0.hole[:, :, None]
    result.image = np.where(hole3, x, known)
    return result
