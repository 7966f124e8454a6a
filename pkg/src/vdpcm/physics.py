"""Constitutive laws of the two-species oxide-layer corrosion model.

Cations (species 1) follow Blakemore statistics, electrons (species 2)
Boltzmann statistics.  Interface exchange is written in dissipative form
``J . nu = r(v) g(xi - xi_ext)``.  The legacy DPCM pieces (linear cation
mobility, logarithmic electron/metal law) are kept for comparison runs.

Species are numbered 1 (cations) and 2 (electrons); interfaces are
numbered 0 (oxide/solution) and 1 (oxide/metal).
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

SPECIES = (1, 2)
BOUNDARIES = (0, 1)


class Variant(str, enum.Enum):
    VDPCM = "vdpcm"
    LEGACY = "legacy"


class ModelError(ValueError):
    """Invalid model data or misuse of a variant-specific law."""


def _check_species(i):
    if i not in SPECIES:
        raise ModelError(f"species must be 1 or 2, got {i!r}")


def _check_boundary(gamma):
    if gamma not in BOUNDARIES:
        raise ModelError(f"boundary must be 0 or 1, got {gamma!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawKinetics:
    """Butler-Volmer rate constants ``k[i][gamma]``, ``m[i][gamma]``.

    Indexing is ``[species - 1][boundary]``.
    """

    k: tuple[tuple[float, float], tuple[float, float]]
    m: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        for name in ("k", "m"):
            table = getattr(self, name)
            for i in SPECIES:
                for g in BOUNDARIES:
                    val = table[i - 1][g]
                    if not (math.isfinite(val) and val > 0):
                        raise ModelError(
                            f"rate constant {name}_{i}^{g} must be finite and > 0, got {val!r}")


def derive_scaled_kinetics(raw: RawKinetics, V: float, z1: int, z2: int):
    """Map raw rate constants to the dissipative ``(kappa, xi_ext)`` tables.

    For the electron/metal interface ``r_2^1 = m_2^1 u_2`` so the returned
    ``kappa[1][1]`` is ``m_2^1`` itself rather than a geometric mean.
    """
    k, m = raw.k, raw.m
    kappa = (
        (2.0 * math.sqrt(k[0][0] * m[0][0]), 2.0 * math.sqrt(k[0][1] * m[0][1])),
        (2.0 * math.sqrt(k[1][0] * m[1][0]), m[1][1]),
    )
    xi_ext = (
        (math.log(m[0][0] / k[0][0]), math.log(k[0][1] / m[0][1]) + z1 * V),
        (math.log(m[1][0] / k[1][0]), math.log(k[1][1] / m[1][1]) + z2 * V),
    )
    return kappa, xi_ext


@dataclass(frozen=True)
class ModelSpec:
    """Scaled parameter set of the model.

    Tables ``kappa`` and ``xi_ext`` are indexed ``[species - 1][boundary]``.
    ``f0``/``f1`` are the Robin data of the potential; use
    :meth:`from_interface` to derive them from capacitances and voltages of
    zero charge.
    """

    lambda2: float
    beta0: float
    beta1: float
    f0: float
    f1: float
    kappa: tuple[tuple[float, float], tuple[float, float]]
    xi_ext: tuple[tuple[float, float], tuple[float, float]]
    V: float = 0.0
    rho_hl: float = -5.0
    z1: int = 3
    z2: int = -1
    d1: float = 1.0
    d2: float = 10.0
    ubar1: float = 3.0
    ubar2: float = 1.0
    ubar2_met: float = 1.0
    dpsi_pzc0: float = 0.0
    dpsi_pzc1: float = 0.0
    variant: Variant = Variant.VDPCM

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "kappa", tuple(tuple(float(x) for x in row) for row in self.kappa))
        object.__setattr__(self, "xi_ext", tuple(tuple(float(x) for x in row) for row in self.xi_ext))
        for name in ("lambda2", "beta0", "beta1", "d1", "d2", "ubar1", "ubar2", "ubar2_met"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ModelError(f"{name} must be finite and > 0, got {val!r}")
        for i in SPECIES:
            for g in BOUNDARIES:
                kap = self.kappa[i - 1][g]
                if not (math.isfinite(kap) and kap > 0):
                    raise ModelError(f"kappa_{i}^{g} must be finite and > 0, got {kap!r}")
                if not math.isfinite(self.xi_ext[i - 1][g]):
                    raise ModelError(f"xi_{i}^{g} must be finite")
        for name in ("f0", "f1", "V", "rho_hl", "dpsi_pzc0", "dpsi_pzc1"):
            if not math.isfinite(getattr(self, name)):
                raise ModelError(f"{name} must be finite")
        if int(self.z1) != self.z1 or int(self.z2) != self.z2 or self.z1 == 0 or self.z2 == 0:
            raise ModelError("species charges must be nonzero integers")

    @classmethod
    def from_interface(cls, raw: RawKinetics, *, lambda2, alpha0, alpha1, V=0.0,
                       dpsi_pzc0=0.0, dpsi_pzc1=0.0, z1=3, z2=-1, **kwargs):
        """Build a spec from raw kinetics and interface capacitance data."""
        if not (alpha0 > 0 and alpha1 > 0):
            raise ModelError("alpha0 and alpha1 must be > 0")
        kappa, xi_ext = derive_scaled_kinetics(raw, V, z1, z2)
        beta0 = lambda2 / alpha0
        beta1 = lambda2 / alpha1
        return cls(lambda2=lambda2, beta0=beta0, beta1=beta1,
                   f0=beta0 * dpsi_pzc0, f1=beta1 * (V - dpsi_pzc1),
                   kappa=kappa, xi_ext=xi_ext, V=V, z1=z1, z2=z2,
                   dpsi_pzc0=dpsi_pzc0, dpsi_pzc1=dpsi_pzc1, **kwargs)

    def z(self, i):
        return self.z1 if i == 1 else self.z2

    def ubar(self, i):
        return self.ubar1 if i == 1 else self.ubar2

    def d(self, i):
        return self.d1 if i == 1 else self.d2

    def beta(self, gamma):
        return self.beta0 if gamma == 0 else self.beta1

    def f(self, gamma):
        return self.f0 if gamma == 0 else self.f1

    def with_applied_potential(self, V):
        """Return a copy at applied potential ``V``.

        The metal-side outer potentials ``xi_i^1`` and the Robin datum
        ``f^1`` both move with ``V``.
        """
        dV = V - self.V
        xi = self.xi_ext
        xi_new = (
            (xi[0][0], xi[0][1] + self.z1 * dV),
            (xi[1][0], xi[1][1] + self.z2 * dV),
        )
        return dataclasses.replace(self, V=V, xi_ext=xi_new, f1=self.f1 + self.beta1 * dV)

    def with_variant(self, variant):
        return dataclasses.replace(self, variant=Variant(variant))

    def metal_rates(self):
        """Recover ``(m_2^1, k_2^1)`` of the electron/metal interface."""
        m = self.kappa[1][1]
        k = m * math.exp(self.xi_ext[1][1] - self.z2 * self.V)
        return m, k


# ---------------------------------------------------------------------------
# statistics and mobilities
# ---------------------------------------------------------------------------

def _e1(v):
    return expit(np.asarray(v, dtype=float))


def statistics_e(i, v):
    """Occupancy fraction ``e_i(v)``; densities are ``ubar_i * e_i(v_i)``."""
    _check_species(i)
    out = _e1(v) if i == 1 else np.exp(np.asarray(v, dtype=float))
    return out if np.ndim(out) else float(out)


def statistics_e_inv(i, w):
    """Chemical potential from occupancy fraction, inverse of :func:`statistics_e`."""
    _check_species(i)
    w = np.asarray(w, dtype=float)
    if i == 1:
        if np.any(~(w > 0)) or np.any(~(w < 1)):
            raise ModelError("species 1 occupancy fraction must lie in (0, 1)")
        out = np.log(w) - np.log1p(-w)
    else:
        if np.any(~(w > 0)):
            raise ModelError("species 2 occupancy fraction must be > 0")
        out = np.log(w)
    return out if np.ndim(out) else float(out)


def density(i, v, spec: ModelSpec):
    return spec.ubar(i) * statistics_e(i, v)


def mobility_sigma(i, v, spec: ModelSpec):
    """Mobility as a function of the chemical potential.

    vDPCM cations use the vacancy law ``d1 u1 (ubar1 - u1) / ubar1``; the
    legacy variant uses the linear law ``d1 u1``.  Electrons are linear in
    both variants.
    """
    _check_species(i)
    v = np.asarray(v, dtype=float)
    if i == 2:
        out = spec.d2 * spec.ubar2 * np.exp(v)
    elif spec.variant is Variant.LEGACY:
        out = spec.d1 * spec.ubar1 * _e1(v)
    else:
        ex = np.exp(-np.abs(v))
        out = spec.d1 * spec.ubar1 * ex / (1.0 + ex) ** 2
    return out if np.ndim(out) else float(out)


def mobility_log_derivative(i, v, spec: ModelSpec):
    """``sigma_i'(v) / sigma_i(v)``."""
    v = np.asarray(v, dtype=float)
    if i == 2:
        return np.ones_like(v)
    if spec.variant is Variant.LEGACY:
        return 1.0 - _e1(v)
    return -np.tanh(0.5 * v)


# ---------------------------------------------------------------------------
# interface kinetics
# ---------------------------------------------------------------------------

def kinetic_prefactor_r(i, gamma, v, spec: ModelSpec):
    """Positive rate prefactor ``r_i^gamma(v)``."""
    _check_species(i)
    _check_boundary(gamma)
    v = np.asarray(v, dtype=float)
    kap = spec.kappa[i - 1][gamma]
    if i == 1:
        # e^{v/2}/(1+e^v) = e^{-|v|/2}/(1+e^{-|v|})
        ex = np.exp(-np.abs(v))
        out = kap * spec.ubar1 * np.sqrt(ex) / (1.0 + ex)
    elif gamma == 0:
        out = kap * math.sqrt(spec.ubar2) * np.exp(0.5 * v)
    else:
        out = kap * spec.ubar2 * np.exp(v)
    return out if np.ndim(out) else float(out)


def kinetic_prefactor_log_derivative(i, gamma, v):
    """``r'(v) / r(v)``."""
    v = np.asarray(v, dtype=float)
    if i == 1:
        return -0.5 * np.tanh(0.5 * v)
    return np.full_like(v, 0.5 if gamma == 0 else 1.0)


def kinetic_g(i, gamma, y):
    """Monotone interface rate ``g_i^gamma``, with ``y g(y) >= 0``."""
    _check_species(i)
    _check_boundary(gamma)
    if isinstance(y, float) and abs(y) < 700.0:
        return -math.expm1(-y) if (i == 2 and gamma == 1) else math.sinh(0.5 * y)
    y = np.asarray(y, dtype=float)
    out = -np.expm1(-y) if (i == 2 and gamma == 1) else np.sinh(0.5 * y)
    return out if np.ndim(out) else float(out)


def kinetic_g_prime(i, gamma, y):
    if isinstance(y, float) and abs(y) < 700.0:
        return math.exp(-y) if (i == 2 and gamma == 1) else 0.5 * math.cosh(0.5 * y)
    y = np.asarray(y, dtype=float)
    out = np.exp(-y) if (i == 2 and gamma == 1) else 0.5 * np.cosh(0.5 * y)
    return out if np.ndim(out) else float(out)


def kinetic_g_regularized(i, gamma, y, mu):
    """``g`` on ``[-mu, mu]``, affine with slope ``g'(mu)`` outside.

    ``mu=None`` returns the unregularized ``g``.
    """
    if mu is None:
        return kinetic_g(i, gamma, y)
    if not mu > 0:
        raise ModelError(f"regularization threshold must be > 0, got {mu!r}")
    y = np.asarray(y, dtype=float)
    slope = kinetic_g_prime(i, gamma, mu)
    yc = np.clip(y, -mu, mu)
    out = kinetic_g(i, gamma, yc) + (y - yc) * slope
    return out if np.ndim(out) else float(out)


def kinetic_g_regularized_prime(i, gamma, y, mu):
    if mu is None:
        return kinetic_g_prime(i, gamma, y)
    y = np.asarray(y, dtype=float)
    inside = np.abs(y) <= mu
    out = np.where(inside, kinetic_g_prime(i, gamma, np.clip(y, -mu, mu)),
                   kinetic_g_prime(i, gamma, mu))
    return out if np.ndim(out) else float(out)


def legacy_electron_metal_flux(u2_at_1, v0_at_1, spec: ModelSpec):
    """Original DPCM electron exchange with the metal, ``J_2(1)``."""
    if spec.variant is not Variant.LEGACY:
        raise ModelError("legacy electron/metal law requested under the vDPCM variant")
    m, k = spec.metal_rates()
    arg = spec.z2 * (spec.V - np.asarray(v0_at_1, dtype=float))
    out = m * np.asarray(u2_at_1, dtype=float) - k * spec.ubar2_met * np.logaddexp(0.0, arg)
    return out if np.ndim(out) else float(out)


def new_electron_metal_flux(u2_at_1, v0_at_1, spec: ModelSpec):
    """Modified electron exchange with the metal, ``m u2 - k exp(z2 (V - v0))``."""
    if spec.variant is not Variant.VDPCM:
        raise ModelError("modified electron/metal law requested under the legacy variant")
    m, k = spec.metal_rates()
    out = (m * np.asarray(u2_at_1, dtype=float)
           - k * np.exp(spec.z2 * (spec.V - np.asarray(v0_at_1, dtype=float))))
    return out if np.ndim(out) else float(out)


def charge_density(u1, u2, spec: ModelSpec):
    out = spec.z1 * np.asarray(u1, dtype=float) + spec.z2 * np.asarray(u2, dtype=float) + spec.rho_hl
    return out if np.ndim(out) else float(out)


def truncate(v, M):
    """Truncation ``T_M``; ``M=None`` disables it."""
    if M is None:
        return v
    if not M > 0:
        raise ModelError(f"truncation level must be > 0, got {M!r}")
    out = np.clip(np.asarray(v, dtype=float), -M, M)
    return out if np.ndim(out) else float(out)


def default_raw_kinetics():
    """Order-one rate constants shipped as defaults (not calibrated values)."""
    return RawKinetics(k=((1.0, 1.0), (1.0, 1.0)), m=((1.0, 1.0), (1.0, 1.0)))
