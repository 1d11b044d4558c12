"""Convex generators and pointwise Bregman quantities.

Every function accepts scalars or arrays and evaluates elementwise. Inputs
outside a generator's domain raise :class:`DomainError`; nothing is clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray


class DomainError(ValueError):
    """Argument outside the domain of a convex generator."""


KINDS = ("ls", "kl", "entropy", "power")


@dataclass(frozen=True)
class ConvexGenerator:
    """A strictly convex generator ``g``.

    Parameters
    ----------
    kind : {"ls", "kl", "entropy", "power"}
        ``ls``: ``(u - 1)^2`` on the real line.
        ``kl``: ``|u| log|u| - |u|`` on ``u != 0``.
        ``entropy``: ``(|u| - 1) log(|u| - 1) - |u|`` on ``u < -1`` or ``u > 1``.
        ``power``: ``(u^(1+b) - u) / b`` on ``u > 0`` with ``0 < b <= 1``.
    b : float, optional
        Exponent of the power divergence.
    """

    kind: str
    b: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator {self.kind!r}; expected one of {KINDS}")
        if self.kind == "power":
            if not (0.0 < self.b <= 1.0):
                raise ValueError(f"power divergence needs 0 < b <= 1, got b={self.b}")
        elif self.b != 0.0:
            raise ValueError(f"generator {self.kind!r} takes no exponent")

    @property
    def name(self) -> str:
        return f"power:{self.b:g}" if self.kind == "power" else self.kind

    @property
    def domain(self) -> str:
        return {
            "ls": "(-inf, inf)",
            "kl": "(-inf, 0) U (0, inf)",
            "entropy": "(-inf, -1) U (1, inf)",
            "power": "(0, inf)",
        }[self.kind]

    def in_domain(self, u: ArrayLike) -> NDArray:
        u = np.asarray(u, dtype=float)
        if self.kind == "ls":
            ok = np.isfinite(u)
        elif self.kind == "kl":
            ok = np.isfinite(u) & (u != 0.0)
        elif self.kind == "entropy":
            ok = np.isfinite(u) & (np.abs(u) > 1.0)
        else:
            ok = np.isfinite(u) & (u > 0.0)
        return ok

    def check(self, u: ArrayLike) -> NDArray:
        u = np.asarray(u, dtype=float)
        ok = self.in_domain(u)
        if not np.all(ok):
            bad = u[~ok].ravel()[0]
            raise DomainError(f"generator {self.name} is undefined at u={bad!r} (domain {self.domain})")
        return u

    def __str__(self) -> str:
        return self.name


LS = ConvexGenerator("ls")
KL = ConvexGenerator("kl")
ENTROPY = ConvexGenerator("entropy")


def power_divergence(b: float) -> ConvexGenerator:
    return ConvexGenerator("power", float(b))


def parse_generator(token: str) -> ConvexGenerator:
    """Parse ``ls``, ``kl``, ``entropy`` or ``power:<b>``."""
    tok = token.strip().lower()
    if tok.startswith("power:"):
        try:
            b = float(tok.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad power exponent in {token!r}") from None
        return power_divergence(b)
    if tok in ("ls", "kl", "entropy"):
        return ConvexGenerator(tok)
    raise ValueError(f"unknown loss {token!r}; expected ls, kl, entropy or power:<b>")


def _out(u: NDArray, v: NDArray):
    return float(v) if np.ndim(u) == 0 else v


def g_eval(gen: ConvexGenerator, u: ArrayLike):
    u = gen.check(u)
    if gen.kind == "ls":
        v = (u - 1.0) ** 2
    elif gen.kind == "kl":
        a = np.abs(u)
        v = a * np.log(a) - a
    elif gen.kind == "entropy":
        a = np.abs(u) - 1.0
        v = a * np.log(a) - np.abs(u)
    else:
        b = gen.b
        v = (u ** (1.0 + b) - u) / b
    return _out(u, v)


def g_deriv(gen: ConvexGenerator, u: ArrayLike):
    u = gen.check(u)
    if gen.kind == "ls":
        v = 2.0 * (u - 1.0)
    elif gen.kind == "kl":
        v = np.sign(u) * np.log(np.abs(u))
    elif gen.kind == "entropy":
        v = np.sign(u) * np.log(np.abs(u) - 1.0)
    else:
        b = gen.b
        v = ((1.0 + b) * u**b - 1.0) / b
    return _out(u, v)


def g_second(gen: ConvexGenerator, u: ArrayLike):
    u = gen.check(u)
    if gen.kind == "ls":
        v = np.full_like(u, 2.0)
    elif gen.kind == "kl":
        v = 1.0 / np.abs(u)
    elif gen.kind == "entropy":
        v = 1.0 / (np.abs(u) - 1.0)
    else:
        b = gen.b
        v = (1.0 + b) * u ** (b - 1.0)
    return _out(u, v)


def g_third(gen: ConvexGenerator, u: ArrayLike):
    u = gen.check(u)
    if gen.kind == "ls":
        v = np.zeros_like(u)
    elif gen.kind == "kl":
        v = -np.sign(u) / u**2
    elif gen.kind == "entropy":
        v = -np.sign(u) / (np.abs(u) - 1.0) ** 2
    else:
        b = gen.b
        v = (1.0 + b) * (b - 1.0) * u ** (b - 2.0)
    return _out(u, v)


def bregman_pointwise(gen: ConvexGenerator, a0: ArrayLike, a: ArrayLike):
    """``g(a0) - g(a) - g'(a) (a0 - a)``; squared error for LS."""
    a0 = gen.check(a0)
    a = gen.check(a)
    if gen.kind == "ls":
        v = (a0 - a) ** 2
    else:
        v = np.asarray(g_eval(gen, a0)) - np.asarray(g_eval(gen, a)) - np.asarray(g_deriv(gen, a)) * (a0 - a)
        v = np.where(a0 == a, 0.0, v)
    shape = np.broadcast(a0, a).shape
    return float(v) if shape == () else np.broadcast_to(v, shape).copy()


def selfterm(gen: ConvexGenerator, a: ArrayLike):
    """``-g(a) + g'(a) a`` in a form that avoids cancellation."""
    a = gen.check(a)
    if gen.kind == "ls":
        v = a**2 - 1.0
    elif gen.kind == "kl":
        v = np.abs(a)
    elif gen.kind == "entropy":
        v = np.log(np.abs(a) - 1.0) + np.abs(a)
    else:
        v = a ** (1.0 + gen.b)
    return _out(a, v)


def selfterm_deriv(gen: ConvexGenerator, a: ArrayLike):
    """First derivative of :func:`selfterm`, equal to ``g''(a) a``."""
    a = np.asarray(a, dtype=float)
    return g_second(gen, a) * a


def selfterm_second(gen: ConvexGenerator, a: ArrayLike):
    a = np.asarray(a, dtype=float)
    return g_third(gen, a) * a + g_second(gen, a)


def feasible_integrand(gen: ConvexGenerator, a: ArrayLike):
    """Return ``(selfterm, linkterm) = (-g(a) + g'(a) a, g'(a))``."""
    return selfterm(gen, a), g_deriv(gen, a)
