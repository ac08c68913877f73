"""IoU-family box regression losses with analytic gradients.

Boxes are corner-form ``(x1, y1, x2, y2)``. Every loss is a function of one
anchor box and one fixed ground-truth box; gradients are taken with respect to
the four anchor coordinates.

Loss ids accepted by :func:`loss_value`, :func:`loss_gradient` and
:func:`finite_diff_gradient`:

``iou``        1 - IoU
``ciou``       (1 - IoU) + d^2/c^2 + v
``eiou``       (1 - IoU) + d^2/c^2 + (w - w_gt)^2/w_c^2 + (h - h_gt)^2/h_c^2
``wiou_v1``    exp(d^2 / (w_gt^2 + h_gt^2)) * (1 - IoU)
``wiou_v3``    r * wiou_v1, r = beta / (delta * alpha^(beta - delta))
``piou_penalty`` 1 - exp(-P^2)                (corner penalty alone)
``piou_base``  1 - IoU - exp(-P^2)
``piou``       u(lambda * q) * piou_base, q = exp(-P), u(x) = 3x exp(-x^2)

Quantities marked as detached (the CIoU trade-off weight when enabled and the
WIoU v3 ``beta``) are evaluated once at the anchor and held constant both in
the analytic gradient and in the finite-difference oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

EPS = 1e-9
LOSS_IDS = ("iou", "ciou", "eiou", "wiou_v1", "wiou_v3", "piou_penalty", "piou_base", "piou")

_E = np.eye(4)
_ZERO = np.zeros(4)
_DW = np.array([-1.0, 0.0, 1.0, 0.0])
_DH = np.array([0.0, -1.0, 0.0, 1.0])
_DCX = np.array([0.5, 0.0, 0.5, 0.0])
_DCY = np.array([0.0, 0.5, 0.0, 0.5])


class DegenerateBoxError(ValueError):
    """A loss denominator fell below the division guard."""


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


def as_box(b: Sequence[float]) -> Box:
    box = Box(*(float(v) for v in b))
    if box.x2 < box.x1 or box.y2 < box.y1:
        raise ValueError(f"box {tuple(box)} has x2 < x1 or y2 < y1")
    return box


@dataclass(frozen=True)
class LossParams:
    lam: float = 1.2
    delta: float = 3.0
    alpha: float = 1.9
    ciou_alpha_weighting: bool = False
    piou_nonneg_variant: bool = False
    wiou_momentum: float = 0.01

    def __post_init__(self):
        if self.lam <= 0 or self.alpha <= 0:
            raise ValueError("lam and alpha must be positive")
        if not 0 < self.wiou_momentum <= 1:
            raise ValueError("wiou_momentum must lie in (0, 1]")


@dataclass
class WiouState:
    """Running mean of 1 - IoU used to normalise WIoU v3's outlier degree.

    ``mode="ema"`` keeps an exponential running mean (the first value seeds
    it); ``mode="batch"`` keeps the plain arithmetic mean of everything seen.
    """

    mean: float = 0.0
    count: int = 0
    mode: str = "ema"

    def update(self, l_iou: float, momentum: float = 0.01) -> None:
        if self.count == 0:
            self.mean = l_iou
        elif self.mode == "batch":
            self.mean += (l_iou - self.mean) / (self.count + 1)
        else:
            self.mean = (1 - momentum) * self.mean + momentum * l_iou
        self.count += 1

    def update_batch(self, values: Sequence[float], momentum: float = 0.01) -> None:
        """Fold one batch in at once: its mean enters as a single update."""
        if len(values):
            self.update(float(np.mean(values)), momentum)


@dataclass(frozen=True)
class PairGeometry:
    iou: float
    d: float
    c: float
    w_c: float
    h_c: float
    dx: float
    dy: float


@dataclass(frozen=True)
class PiouTerms:
    dw1: float
    dw2: float
    dh1: float
    dh2: float
    P: float
    q: float
    u: float


# ---------------------------------------------------------------------------
# geometry with gradients


class _Geo:
    """Values (and anchor gradients) of every geometric quantity a loss needs."""

    def __init__(self, a: Box, g: Box):
        self.a, self.g = a, g
        self.w, self.h = a.w, a.h
        self.wg, self.hg = g.w, g.h

        ix, dix = _overlap(a.x1, a.x2, g.x1, g.x2, 0, 2)
        iy, diy = _overlap(a.y1, a.y2, g.y1, g.y2, 1, 3)
        inter = ix * iy
        dinter = ix * diy + iy * dix
        union = self.w * self.h + self.wg * self.hg - inter
        dunion = self.w * _DH + self.h * _DW - dinter
        if union > 0:
            self.iou = inter / union
            self.diou = (dinter * union - inter * dunion) / union**2
        else:
            self.iou, self.diou = 0.0, _ZERO

        cx, cy = a.center
        gcx, gcy = g.center
        self.dx, self.dy = cx - gcx, cy - gcy
        self.d2 = self.dx**2 + self.dy**2
        self.dd2 = 2 * self.dx * _DCX + 2 * self.dy * _DCY

        self.wc, self.dwc = _enclose(a.x1, a.x2, g.x1, g.x2, 0, 2)
        self.hc, self.dhc = _enclose(a.y1, a.y2, g.y1, g.y2, 1, 3)
        self.c2 = self.wc**2 + self.hc**2
        self.dc2 = 2 * self.wc * self.dwc + 2 * self.hc * self.dhc

    def distance_ratio(self):
        """d^2 / c^2 and its gradient."""
        c2 = _guard(self.c2, "enclosing diagonal")
        return self.d2 / c2, self.dd2 / c2 - self.d2 * self.dc2 / c2**2


def _overlap(a1, a2, g1, g2, i1, i2):
    left = max(a1, g1)
    right = min(a2, g2)
    if right - left <= 0:
        return 0.0, _ZERO
    dleft = _E[i1] * _side(a1, g1)
    dright = _E[i2] * _side(g2, a2)
    return right - left, dright - dleft


def _enclose(a1, a2, g1, g2, i1, i2):
    lo = min(a1, g1)
    hi = max(a2, g2)
    dlo = _E[i1] * _side(g1, a1)
    dhi = _E[i2] * _side(a2, g2)
    return hi - lo, dhi - dlo


def _side(x: float, y: float) -> float:
    """d max(x, y)/dx: 1 if x wins, 0 if y wins, the one-sided mean on a tie."""
    return 1.0 if x > y else 0.0 if x < y else 0.5


def _guard(den: float, what: str) -> float:
    if den < EPS:
        raise DegenerateBoxError(f"{what} below {EPS:g}: {den!r}")
    return den


def _aspect(w: float, h: float):
    """arctan(w/h) via atan2 (defined for h = 0) and its gradient."""
    r2 = w * w + h * h
    if r2 < EPS**2:
        raise DegenerateBoxError("aspect ratio of a zero-size box")
    return math.atan2(w, h), (h * _DW - w * _DH) / r2


def _u(x: float) -> float:
    return 3.0 * x * math.exp(-x * x)


def _du(x: float) -> float:
    return 3.0 * math.exp(-x * x) * (1.0 - 2.0 * x * x)


# ---------------------------------------------------------------------------
# per-loss value + gradient


def _eval(loss_id: str, a: Box, g: Box, p: LossParams, frozen: dict):
    geo = _Geo(a, g)
    l_iou, dl_iou = 1.0 - geo.iou, -geo.diou

    if loss_id == "iou":
        return l_iou, dl_iou

    if loss_id == "ciou":
        rd, drd = geo.distance_ratio()
        theta_g, _ = _aspect(geo.wg, geo.hg)
        theta, dtheta = _aspect(geo.w, geo.h)
        k = 4.0 / math.pi**2
        v = k * (theta_g - theta) ** 2
        dv = -2.0 * k * (theta_g - theta) * dtheta
        weight = frozen.get("ciou_alpha", 1.0)
        return l_iou + rd + weight * v, dl_iou + drd + weight * dv

    if loss_id == "eiou":
        rd, drd = geo.distance_ratio()
        wc = _guard(geo.wc, "enclosing width")
        hc = _guard(geo.hc, "enclosing height")
        ew, eh = geo.w - geo.wg, geo.h - geo.hg
        tw = ew**2 / wc**2
        th = eh**2 / hc**2
        dtw = 2 * ew * _DW / wc**2 - 2 * ew**2 * geo.dwc / wc**3
        dth = 2 * eh * _DH / hc**2 - 2 * eh**2 * geo.dhc / hc**3
        return l_iou + rd + tw + th, dl_iou + drd + dtw + dth

    if loss_id in ("wiou_v1", "wiou_v3"):
        s = _guard(geo.wg**2 + geo.hg**2, "ground-truth diagonal")
        r_dist = math.exp(geo.d2 / s)
        val = r_dist * l_iou
        grad = r_dist * (geo.dd2 / s) * l_iou + r_dist * dl_iou
        if loss_id == "wiou_v3":
            r = _focus(frozen["beta"], p)
            val, grad = r * val, r * grad
        return val, grad

    if loss_id in ("piou_penalty", "piou_base", "piou"):
        P, dP = _penalty(a, g)
        e = math.exp(-P * P)
        if loss_id == "piou_penalty":
            return 1.0 - e, 2.0 * P * e * dP
        base = 1.0 - geo.iou - e + (1.0 if p.piou_nonneg_variant else 0.0)
        dbase = -geo.diou + 2.0 * P * e * dP
        if loss_id == "piou_base":
            return base, dbase
        q = math.exp(-P)
        x = p.lam * q
        u = _u(x)
        du = _du(x) * p.lam * (-q) * dP
        return u * base, du * base + u * dbase

    raise ValueError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")


def _penalty(a: Box, g: Box):
    wg = _guard(g.w, "ground-truth width")
    hg = _guard(g.h, "ground-truth height")
    ex1, ex2 = a.x1 - g.x1, a.x2 - g.x2
    ey1, ey2 = a.y1 - g.y1, a.y2 - g.y2
    P = 0.25 * ((abs(ex1) + abs(ex2)) / wg + (abs(ey1) + abs(ey2)) / hg)
    dP = 0.25 * np.array([np.sign(ex1) / wg, np.sign(ey1) / hg, np.sign(ex2) / wg, np.sign(ey2) / hg])
    return P, dP


def _focus(beta: float, p: LossParams) -> float:
    # beta / (delta * alpha^(beta - delta)) written to avoid overflow in alpha^beta
    return (beta / p.delta) * math.exp(-(beta - p.delta) * math.log(p.alpha))


def detached_terms(
    loss_id: str, a: Sequence[float], gt: Sequence[float], p: LossParams = LossParams(), state: WiouState | None = None
) -> dict:
    """Values held constant under differentiation, evaluated at ``a``."""
    a, g = as_box(a), as_box(gt)
    if loss_id == "ciou" and p.ciou_alpha_weighting:
        geo = _Geo(a, g)
        theta_g, _ = _aspect(geo.wg, geo.hg)
        theta, _ = _aspect(geo.w, geo.h)
        v = 4.0 / math.pi**2 * (theta_g - theta) ** 2
        den = (1.0 - geo.iou) + v
        return {"ciou_alpha": v / den if den > EPS else 0.0}
    if loss_id == "wiou_v3":
        if state is None:
            raise ValueError("wiou_v3 requires a WiouState")
        return {"beta": _beta(1.0 - iou(a, g), state)}
    return {}


def _beta(l_iou: float, state: WiouState) -> float:
    if state.count == 0:
        return 1.0
    return l_iou / max(state.mean, EPS)


# ---------------------------------------------------------------------------
# public API


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union; 0 for disjoint boxes or a zero-area union."""
    a, b = as_box(a), as_box(b)
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def pair_geometry(a: Sequence[float], gt: Sequence[float]) -> PairGeometry:
    geo = _Geo(as_box(a), as_box(gt))
    return PairGeometry(geo.iou, math.sqrt(geo.d2), math.sqrt(geo.c2), geo.wc, geo.hc, geo.dx, geo.dy)


def loss_value(
    loss_id: str,
    a: Sequence[float],
    gt: Sequence[float],
    p: LossParams = LossParams(),
    state: WiouState | None = None,
    frozen: dict | None = None,
) -> float:
    """Loss value without touching any running state."""
    if frozen is None:
        frozen = detached_terms(loss_id, a, gt, p, state)
    return _eval(loss_id, as_box(a), as_box(gt), p, frozen)[0]


def loss_gradient(
    loss_id: str,
    a: Sequence[float],
    gt: Sequence[float],
    p: LossParams = LossParams(),
    state: WiouState | None = None,
) -> np.ndarray:
    """Analytic gradient with respect to the anchor's (x1, y1, x2, y2)."""
    frozen = detached_terms(loss_id, a, gt, p, state)
    return _eval(loss_id, as_box(a), as_box(gt), p, frozen)[1].copy()


def finite_diff_gradient(
    loss_id: str,
    a: Sequence[float],
    gt: Sequence[float],
    p: LossParams = LossParams(),
    step: float = 1e-6,
    state: WiouState | None = None,
) -> np.ndarray:
    """Central differences per anchor coordinate, detached terms frozen at ``a``."""
    if step <= 0:
        raise ValueError("step must be positive")
    frozen = detached_terms(loss_id, a, gt, p, state)
    a = np.asarray(a, dtype=np.float64)
    grad = np.empty(4)
    for i in range(4):
        hi, lo = a.copy(), a.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (loss_value(loss_id, hi, gt, p, frozen=frozen) - loss_value(loss_id, lo, gt, p, frozen=frozen)) / (
            2 * step
        )
    return grad


def ciou_loss(a, gt, p: LossParams = LossParams()) -> float:
    return loss_value("ciou", a, gt, p)


def eiou_loss(a, gt) -> float:
    return loss_value("eiou", a, gt)


def wiou_loss(
    a,
    gt,
    version: str = "v3",
    p: LossParams = LossParams(),
    state: WiouState | None = None,
    beta: float | None = None,
    update: bool = True,
) -> float:
    """WIoU v1 or v3.

    For v3 ``beta`` defaults to (1 - IoU) / running mean taken *before* this
    call (1 while the state is empty), after which the state absorbs this
    pair's 1 - IoU. Passing ``beta`` pins it and leaves the state untouched.
    """
    if version == "v1":
        return loss_value("wiou_v1", a, gt, p)
    if version != "v3":
        raise ValueError(f"unknown WIoU version {version!r}")
    if beta is not None:
        return loss_value("wiou_v3", a, gt, p, frozen={"beta": beta})
    if state is None:
        raise ValueError("wiou v3 requires a WiouState")
    value = loss_value("wiou_v3", a, gt, p, state)
    if update:
        state.update(1.0 - iou(a, gt), p.wiou_momentum)
    return value


def piou_penalty(a, gt, p: LossParams = LossParams()) -> PiouTerms:
    """Corner penalty P = ((dw1 + dw2)/w_gt + (dh1 + dh2)/h_gt) / 4 with corresponding-edge distances."""
    a, g = as_box(a), as_box(gt)
    P, _ = _penalty(a, g)
    q = math.exp(-P)
    return PiouTerms(
        dw1=abs(a.x1 - g.x1),
        dw2=abs(a.x2 - g.x2),
        dh1=abs(a.y1 - g.y1),
        dh2=abs(a.y2 - g.y2),
        P=P,
        q=q,
        u=_u(p.lam * q),
    )


def piou_loss(a, gt, p: LossParams = LossParams(), attention: bool = True) -> float:
    return loss_value("piou" if attention else "piou_base", a, gt, p)


def attention_u(x: float) -> float:
    """Non-monotonic focusing function u(x) = 3x exp(-x^2)."""
    return _u(x)


# ---------------------------------------------------------------------------
# sampling helpers for gradient checks


def near_kink(a: Sequence[float], gt: Sequence[float], margin: float = 1e-5) -> bool:
    """True if any anchor edge lies within ``margin`` of a same-axis ground-truth edge.

    Those are the only places where max/min/abs inside the losses switch
    branches, so gradients are undefined there.
    """
    a, g = as_box(a), as_box(gt)
    for ea in (a.x1, a.x2):
        if min(abs(ea - g.x1), abs(ea - g.x2)) < margin:
            return True
    for ea in (a.y1, a.y2):
        if min(abs(ea - g.y1), abs(ea - g.y2)) < margin:
            return True
    return False


def sample_box_pairs(n: int, seed: int = 0, margin: float = 1e-5) -> list[tuple[Box, Box]]:
    """Seeded (anchor, ground truth) pairs in a unit frame, away from kinks."""
    rng = np.random.default_rng(seed)
    pairs: list[tuple[Box, Box]] = []
    while len(pairs) < n:
        gw, gh = rng.uniform(0.05, 0.5, size=2)
        gcx, gcy = rng.uniform(0.2, 0.8, size=2)
        w = gw * math.exp(rng.normal(0.0, 0.5))
        h = gh * math.exp(rng.normal(0.0, 0.5))
        cx = gcx + rng.normal(0.0, 0.6) * gw
        cy = gcy + rng.normal(0.0, 0.6) * gh
        g = Box(gcx - gw / 2, gcy - gh / 2, gcx + gw / 2, gcy + gh / 2)
        a = Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        if not near_kink(a, g, margin):
            pairs.append((a, g))
    return pairs


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| scaled by the larger gradient's max magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass(frozen=True)
class GradCheckReport:
    loss_id: str
    pairs: int
    max_rel_error: float
    worst_index: int
    worst_pair: tuple[Box, Box]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def gradient_check(
    loss_id: str, pairs: int = 1000, seed: int = 0, tol: float = 1e-4, p: LossParams = LossParams()
) -> GradCheckReport:
    """Analytic vs central-difference gradients over seeded pairs.

    WIoU v3 uses a batch-mode state seeded with the mean 1 - IoU of the pairs,
    so the outlier degree is non-trivial.
    """
    if loss_id not in LOSS_IDS:
        raise ValueError(f"unknown loss id {loss_id!r}")
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    sample = sample_box_pairs(pairs, seed)
    state = None
    if loss_id == "wiou_v3":
        state = WiouState(mode="batch")
        state.update_batch([1.0 - iou(a, g) for a, g in sample])
    worst, worst_i = -1.0, 0
    for i, (a, g) in enumerate(sample):
        err = relative_error(loss_gradient(loss_id, a, g, p, state), finite_diff_gradient(loss_id, a, g, p, state=state))
        if err > worst:
            worst, worst_i = err, i
    return GradCheckReport(loss_id, pairs, worst, worst_i, sample[worst_i], tol)
