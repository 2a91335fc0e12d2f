"""Robust kernel family: cost, influence and IRLS weight.

All kernels take a non-negative residual magnitude ``x`` and a scale ``c``.
Named kinds are closed forms of Barron's general loss at fixed shape values
(L2: alpha=2, Charbonnier: alpha=1, Cauchy: alpha=0, Geman-McClure:
alpha=-2). L1 is the non-smooth absolute value and is kept separate from
Charbonnier.

The IRLS weight ``w(x) = psi(x) / x`` has a finite limit at zero for every
smooth kind, so it is evaluated in closed form there. Only L1 needs the
division floor.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_FLOOR = 1e-8


class KernelKind(str, enum.Enum):
    L2 = "l2"
    L1 = "l1"
    CHARBONNIER = "charbonnier"
    CAUCHY = "cauchy"
    GEMAN_MCCLURE = "geman_mcclure"
    BARRON = "barron"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"gemanmcclure": "geman_mcclure", "gm": "geman_mcclure",
                   "barrongeneral": "barron", "barron_general": "barron",
                   "general": "barron", "lorentzian": "cauchy"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown kernel kind {value!r}") from None


# shape value of Barron's family that each named smooth kind corresponds to
NAMED_ALPHA = {
    KernelKind.L2: 2.0,
    KernelKind.CHARBONNIER: 1.0,
    KernelKind.CAUCHY: 0.0,
    KernelKind.GEMAN_MCCLURE: -2.0,
}


@dataclass(frozen=True)
class KernelSpec:
    """Selects one member of the robust kernel family.

    ``alpha`` is only read for ``KernelKind.BARRON``; ``alpha=-inf`` gives
    the Welsch limit. ``alpha`` equal to 0 or 2 is rejected for the general
    kind because those are removable singularities of the general formula;
    use ``CAUCHY`` or ``L2`` instead.
    """

    kind: KernelKind = KernelKind.L2
    alpha: float = 2.0
    scale_c: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind.parse(self.kind))
        c = float(self.scale_c)
        if not math.isfinite(c) or c <= 0:
            raise ValueError(f"kernel scale must be finite and > 0, got {self.scale_c!r}")
        object.__setattr__(self, "scale_c", c)
        a = float(self.alpha)
        if self.kind is KernelKind.BARRON:
            if math.isnan(a) or a == math.inf:
                raise ValueError(f"unsupported Barron shape alpha={self.alpha!r}")
            if a == 0.0 or a == 2.0:
                raise ValueError(
                    f"alpha={a:g} is a singular value of the general kernel; "
                    f"use kind={'cauchy' if a == 0 else 'l2'!r}")
        elif self.kind in NAMED_ALPHA:
            a = NAMED_ALPHA[self.kind]
        object.__setattr__(self, "alpha", a)

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d.get("kind", "l2"), alpha=d.get("alpha", 2.0),
                   scale_c=d.get("scale", d.get("scale_c", 1.0)))

    def to_dict(self):
        return {"kind": self.kind.value, "alpha": self.alpha, "scale": self.scale_c}


def _check_x(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("residual magnitudes must be finite")
    if np.any(x < 0):
        raise ValueError("residual magnitudes must be >= 0")
    return x


def _out(x, y):
    return float(y) if np.ndim(x) == 0 else y


def _expm1_ratio(u):
    u = np.asarray(u, dtype=np.float64)
    safe = np.where(u == 0.0, 1.0, u)
    return np.where(u == 0.0, 1.0, np.expm1(safe) / safe)


def kernel_value(x, spec: KernelSpec):
    """Kernel cost kappa(x) >= 0 with kappa(0) = 0, elementwise."""
    x = _check_x(x)
    z2 = (x / spec.scale_c) ** 2
    kind = spec.kind
    if kind is KernelKind.L2:
        y = 0.5 * z2
    elif kind is KernelKind.L1:
        y = x / spec.scale_c
    elif kind is KernelKind.CHARBONNIER:
        # sqrt(z2 + 1) - 1 without cancellation for small z
        y = z2 / (np.sqrt(z2 + 1.0) + 1.0)
    elif kind is KernelKind.CAUCHY:
        y = np.log1p(0.5 * z2)
    elif kind is KernelKind.GEMAN_MCCLURE:
        y = 2.0 * z2 / (z2 + 4.0)
    else:
        a = spec.alpha
        if a == -math.inf:
            y = -np.expm1(-0.5 * z2)
        else:
            # (b / a) expm1(a L / 2) written as b L / 2 * expm1(u) / u, stable as a -> 0
            b = abs(a - 2.0)
            half_log = 0.5 * np.log1p(z2 / b)
            y = b * half_log * _expm1_ratio(a * half_log)
    return _out(x, y)


def _weight_smooth(x, spec):
    # psi(x) / x in closed form; finite at x = 0
    c2 = spec.scale_c ** 2
    z2 = x * x / c2
    kind = spec.kind
    if kind is KernelKind.L2:
        return np.full_like(x, 1.0 / c2)
    if kind is KernelKind.CHARBONNIER:
        return 1.0 / (c2 * np.sqrt(z2 + 1.0))
    if kind is KernelKind.CAUCHY:
        return 2.0 / (c2 * (z2 + 2.0))
    if kind is KernelKind.GEMAN_MCCLURE:
        return 16.0 / (c2 * (z2 + 4.0) ** 2)
    a = spec.alpha
    if a == -math.inf:
        return np.exp(-0.5 * z2) / c2
    b = abs(a - 2.0)
    return np.exp((0.5 * a - 1.0) * np.log1p(z2 / b)) / c2


def kernel_influence(x, spec: KernelSpec):
    """Influence psi(x) = d kappa / dx. For L1 the right derivative at 0."""
    x = _check_x(x)
    if spec.kind is KernelKind.L1:
        y = np.full_like(x, 1.0 / spec.scale_c)
    else:
        y = x * _weight_smooth(x, spec)
    return _out(x, y)


def irls_weight(x, spec: KernelSpec, floor: float = DEFAULT_FLOOR):
    """IRLS weight psi(x) / x.

    ``floor`` bounds the division for L1, whose weight 1/(c x) is unbounded
    at zero; the smooth kinds use their analytic limit.
    """
    if not floor > 0:
        raise ValueError("floor must be > 0")
    x = _check_x(x)
    if spec.kind is KernelKind.L1:
        y = (1.0 / spec.scale_c) / np.maximum(x, floor)
    else:
        y = _weight_smooth(x, spec)
    return _out(x, y)
