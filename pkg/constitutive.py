"""
Constitutive Module - material parameters and the two stress branches
Fixed corotated elasticity on F_E, Hencky (log principal strain) elasticity
on F_N with a viscous trial-and-correction return map.

Stresses are Kirchhoff stresses (tau = J * sigma). Every tensor function
accepts single matrices or batches; material moduli may be scalars or
per-particle arrays broadcastable against the batch shape.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from tensor3 import (
    DomainError, InvertedElementError, Mat3, det3, diag3, polar_rotation,
    svd3, transpose,
)

logger = logging.getLogger(__name__)

# Singular values of F_N are clamped into this range before taking logs.
SIGMA_CLAMP = (0.05, 20.0)

POISSON_LIMIT = 0.5 - 1e-6


def lame_from_young_poisson(e: float, nu: float) -> Tuple[float, float]:
    """
    Convert Young's modulus and Poisson's ratio to the Lame pair.

    Args:
        e: Young's modulus in Pa (positive)
        nu: Poisson's ratio, -1 < nu < 0.5

    Returns:
        tuple: (lame_lambda, lame_mu) in Pa
    """
    if not (e > 0.0) or not math.isfinite(e):
        raise DomainError(f"Young's modulus must be positive and finite, got {e}.")
    if not (-1.0 < nu < POISSON_LIMIT):
        raise DomainError(
            f"Poisson's ratio must lie in (-1, 0.5) away from the incompressible limit, got {nu}."
        )
    lame_lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    lame_mu = e / (2.0 * (1.0 + nu))
    return lame_lambda, lame_mu


@dataclass(frozen=True)
class ElasticParams:
    youngs_e: float
    poisson_nu: float
    lame_lambda: float = field(init=False)
    lame_mu: float = field(init=False)

    def __post_init__(self):
        lame_lambda, lame_mu = lame_from_young_poisson(self.youngs_e, self.poisson_nu)
        object.__setattr__(self, "lame_lambda", lame_lambda)
        object.__setattr__(self, "lame_mu", lame_mu)


@dataclass(frozen=True)
class ViscoParams:
    """
    Viscoelastic branch parameters.

    nu_d / nu_v are the deviatoric and dilational viscosities in Pa*s;
    math.inf means no dissipation. When coeff_a and coeff_b are both set they
    are used directly as the return-map correction coefficients instead of
    being derived from the viscosities each substep.
    """

    lame_lambda_n: float
    lame_mu_n: float
    nu_d: float = math.inf
    nu_v: float = math.inf
    coeff_a: Optional[float] = None
    coeff_b: Optional[float] = None

    def __post_init__(self):
        if not (self.nu_d > 0.0) or not (self.nu_v > 0.0):
            raise DomainError(f"Viscosities must be positive, got nu_d={self.nu_d}, nu_v={self.nu_v}.")
        if (self.coeff_a is None) != (self.coeff_b is None):
            raise DomainError("coeff_a and coeff_b must be given together.")
        if self.coeff_a is not None:
            check_ab(self.coeff_a, self.coeff_b)

    @classmethod
    def from_elastic(cls, elastic: ElasticParams, nu_d: float = math.inf,
                     nu_v: Optional[float] = None,
                     lame_lambda_n: Optional[float] = None,
                     lame_mu_n: Optional[float] = None,
                     coeff_a: Optional[float] = None,
                     coeff_b: Optional[float] = None) -> "ViscoParams":
        """Viscoelastic moduli default to the elastic pair; nu_v defaults to nu_d."""
        return cls(
            lame_lambda_n=elastic.lame_lambda if lame_lambda_n is None else lame_lambda_n,
            lame_mu_n=elastic.lame_mu if lame_mu_n is None else lame_mu_n,
            nu_d=nu_d,
            nu_v=nu_d if nu_v is None else nu_v,
            coeff_a=coeff_a,
            coeff_b=coeff_b,
        )

    @property
    def dissipative(self) -> bool:
        if self.coeff_a is not None:
            return not (self.coeff_a == 1.0 and self.coeff_b == 0.0)
        return math.isfinite(self.nu_d) or math.isfinite(self.nu_v)


def check_ab(a: float, b: float) -> None:
    """Raise DomainError unless 0 < a <= 1 and 0 < a(1 - 3b) <= 1."""
    if not (0.0 < a <= 1.0):
        raise DomainError(f"Correction coefficient A must lie in (0, 1], got {a}.")
    trace_factor = a * (1.0 - 3.0 * b)
    if not (0.0 < trace_factor <= 1.0):
        raise DomainError(f"A(1 - 3B) must lie in (0, 1], got {trace_factor} (A={a}, B={b}).")


@dataclass(frozen=True)
class Material:
    elastic: ElasticParams
    visco: ViscoParams
    elastic_enabled: bool = True
    visco_enabled: bool = True


class StressPair(NamedTuple):
    tau_e: Mat3
    tau_n: Mat3

    @property
    def total(self) -> Mat3:
        return self.tau_e + self.tau_n


@dataclass
class ClampCounter:
    """Running counts of numerical safeguards triggered during a run."""
    singular_values: int = 0
    interior: int = 0

    def reset(self) -> None:
        self.singular_values = 0
        self.interior = 0


@dataclass
class MaterialField:
    """
    Per-particle material arrays, shape (N,).

    Exposes the same attribute names as ElasticParams / ViscoParams so the
    stress functions accept either. coeff_a / coeff_b hold NaN where the
    coefficients are derived from the viscosities.
    """
    lame_lambda: NDArray[np.float64]
    lame_mu: NDArray[np.float64]
    lame_lambda_n: NDArray[np.float64]
    lame_mu_n: NDArray[np.float64]
    nu_d: NDArray[np.float64]
    nu_v: NDArray[np.float64]
    coeff_a: NDArray[np.float64]
    coeff_b: NDArray[np.float64]

    @classmethod
    def from_materials(cls, materials: Sequence[Material],
                       index: NDArray[np.int64]) -> "MaterialField":
        def gather(values: List[float]) -> NDArray[np.float64]:
            return np.asarray(values, dtype=np.float64)[index]

        return cls(
            lame_lambda=gather([m.elastic.lame_lambda if m.elastic_enabled else 0.0 for m in materials]),
            lame_mu=gather([m.elastic.lame_mu if m.elastic_enabled else 0.0 for m in materials]),
            lame_lambda_n=gather([m.visco.lame_lambda_n if m.visco_enabled else 0.0 for m in materials]),
            lame_mu_n=gather([m.visco.lame_mu_n if m.visco_enabled else 0.0 for m in materials]),
            nu_d=gather([m.visco.nu_d for m in materials]),
            nu_v=gather([m.visco.nu_v for m in materials]),
            coeff_a=gather([math.nan if m.visco.coeff_a is None else m.visco.coeff_a for m in materials]),
            coeff_b=gather([math.nan if m.visco.coeff_b is None else m.visco.coeff_b for m in materials]),
        )


def _column(values) -> NDArray[np.float64]:
    return np.asarray(values, dtype=np.float64)[..., None]


def _require_positive_det(f: Mat3, what: str) -> NDArray[np.float64]:
    det = det3(f)
    bad = np.count_nonzero(~(det > 0.0))
    if bad:
        raise InvertedElementError(f"{what}: {bad} inverted element(s) with det(F) <= 0.", bad)
    return det


def corotated_energy(f_e: Mat3, lame_lambda, lame_mu) -> NDArray[np.float64]:
    """Fixed corotated energy density mu * sum (sigma_i - 1)^2 + lambda/2 (J - 1)^2, in J/m^3."""
    f_e = np.asarray(f_e, dtype=np.float64)
    det = _require_positive_det(f_e, "corotated_energy")
    _, sigma, _ = svd3(f_e)
    mu = np.asarray(lame_mu, dtype=np.float64)
    lam = np.asarray(lame_lambda, dtype=np.float64)
    return mu * np.sum((sigma - 1.0) ** 2, axis=-1) + 0.5 * lam * (det - 1.0) ** 2


def corotated_kirchhoff(f_e: Mat3, lame_lambda, lame_mu) -> Mat3:
    """
    Fixed corotated Kirchhoff stress tau = 2 mu (F - R) F^T + lambda J (J - 1) I.

    This is (d psi / d F) F^T for the corotated energy above.
    """
    f_e = np.asarray(f_e, dtype=np.float64)
    det = _require_positive_det(f_e, "corotated_kirchhoff")
    r = polar_rotation(f_e)
    mu = np.asarray(lame_mu, dtype=np.float64)[..., None, None]
    lam = np.asarray(lame_lambda, dtype=np.float64)[..., None, None]
    j = det[..., None, None]
    return 2.0 * mu * (f_e - r) @ transpose(f_e) + lam * j * (j - 1.0) * np.eye(3)


def clamped_log_strain(sigma, counter: Optional[ClampCounter] = None) -> NDArray[np.float64]:
    """Elementwise log of singular values after clamping into SIGMA_CLAMP."""
    lo, hi = SIGMA_CLAMP
    sigma = np.asarray(sigma, dtype=np.float64)
    clamped = np.clip(sigma, lo, hi)
    hits = int(np.count_nonzero(clamped != sigma))
    if hits:
        logger.debug("Clamped %d singular value(s) of F_N into [%g, %g].", hits, lo, hi)
        if counter is not None:
            counter.singular_values += hits
    return np.log(clamped)


def hencky_principal_stress(eps, lame_lambda_n, lame_mu_n) -> NDArray[np.float64]:
    eps = np.asarray(eps, dtype=np.float64)
    return 2.0 * _column(lame_mu_n) * eps + _column(lame_lambda_n) * np.sum(eps, axis=-1, keepdims=True)


def hencky_kirchhoff(f_n: Mat3, lame_lambda_n, lame_mu_n,
                     counter: Optional[ClampCounter] = None) -> Mat3:
    """
    Kirchhoff stress of the viscoelastic branch, U diag(2 mu eps + lambda tr(eps) 1) U^T,
    with eps the log of the (clamped) singular values of F_N.
    """
    u, sigma, _ = svd3(f_n)
    eps = clamped_log_strain(sigma, counter)
    tau = hencky_principal_stress(eps, lame_lambda_n, lame_mu_n)
    return u @ diag3(tau) @ transpose(u)


def hencky_energy(f_n: Mat3, lame_lambda_n, lame_mu_n,
                  counter: Optional[ClampCounter] = None) -> NDArray[np.float64]:
    """Energy density mu |eps|^2 + lambda/2 tr(eps)^2 whose derivative is the Hencky stress."""
    _, sigma, _ = svd3(f_n)
    eps = clamped_log_strain(sigma, counter)
    mu = np.asarray(lame_mu_n, dtype=np.float64)
    lam = np.asarray(lame_lambda_n, dtype=np.float64)
    return mu * np.sum(eps * eps, axis=-1) + 0.5 * lam * np.sum(eps, axis=-1) ** 2


def derive_ab_arrays(lame_lambda_n, lame_mu_n, nu_d, nu_v,
                     dt: float) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Closed-form solution of eps = eps_tr - dt * d(psi_V)/d(tau) for
    psi_V = |dev tau|^2 / (2 nu_d) + (tr tau)^2 / (9 nu_v).

    The deviatoric part scales by a, the trace by a(1 - 3b).
    Infinite viscosities give a = 1, b = 0.
    """
    if dt < 0.0:
        raise DomainError(f"Substep length must be non-negative, got {dt}.")
    lam = np.asarray(lame_lambda_n, dtype=np.float64)
    mu = np.asarray(lame_mu_n, dtype=np.float64)
    nu_d = np.asarray(nu_d, dtype=np.float64)
    nu_v = np.asarray(nu_v, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev_rate = np.where(np.isinf(nu_d), 0.0, 2.0 * dt * mu / nu_d)
        vol_rate = np.where(np.isinf(nu_v), 0.0, (2.0 * dt / (9.0 * nu_v)) * 3.0 * (2.0 * mu + 3.0 * lam))
    a = 1.0 / (1.0 + dev_rate)
    trace_factor = 1.0 / (1.0 + vol_rate)
    b = (1.0 - trace_factor / a) / 3.0
    return a, b


def derive_ab(visco: ViscoParams, dt: float) -> Tuple[float, float]:
    """
    Return-map correction coefficients (A, B) for one substep.

    Fixed coefficients on the parameters take precedence over the viscosities.
    """
    if visco.coeff_a is not None:
        return visco.coeff_a, visco.coeff_b
    a, b = derive_ab_arrays(visco.lame_lambda_n, visco.lame_mu_n, visco.nu_d, visco.nu_v, dt)
    return float(a), float(b)


def field_ab(material: MaterialField, dt: float) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-particle (A, B), honouring fixed coefficients where present."""
    a, b = derive_ab_arrays(material.lame_lambda_n, material.lame_mu_n,
                            material.nu_d, material.nu_v, dt)
    fixed = ~np.isnan(material.coeff_a)
    return np.where(fixed, material.coeff_a, a), np.where(fixed, material.coeff_b, b)


def viscous_return_map(f_n_trial: Mat3, a, b,
                       counter: Optional[ClampCounter] = None) -> Mat3:
    """
    Viscous correction of the trial viscoelastic deformation gradient.

    eps' = a (eps_tr - b tr(eps_tr) 1), returned as U diag(exp(eps')) V^T.
    Entries with a == 1 and b == 0 are returned bitwise unchanged.
    """
    f = np.asarray(f_n_trial, dtype=np.float64)
    batch = f.shape[:-2]
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), batch)
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), batch)
    out = f.copy()
    active = ~((a == 1.0) & (b == 0.0))
    if not np.any(active):
        return out

    u, sigma, v = svd3(f[active])
    eps = clamped_log_strain(sigma, counter)
    a_act = a[active][..., None]
    b_act = b[active][..., None]
    eps_new = a_act * (eps - b_act * np.sum(eps, axis=-1, keepdims=True))
    out[active] = u @ diag3(np.exp(eps_new)) @ transpose(v)
    return out


def total_stress(f_e: Mat3, f_n: Mat3, elastic, visco,
                 counter: Optional[ClampCounter] = None) -> StressPair:
    """
    Kirchhoff stresses of both branches.

    `elastic` needs lame_lambda / lame_mu and `visco` lame_lambda_n /
    lame_mu_n; ElasticParams, ViscoParams and MaterialField all qualify.
    The grid force uses their sum.
    """
    tau_e = corotated_kirchhoff(f_e, elastic.lame_lambda, elastic.lame_mu)
    tau_n = hencky_kirchhoff(f_n, visco.lame_lambda_n, visco.lame_mu_n, counter)
    return StressPair(tau_e, tau_n)


def cauchy_from_kirchhoff(tau: Mat3, f: Mat3) -> Mat3:
    det = _require_positive_det(np.asarray(f, dtype=np.float64), "cauchy_from_kirchhoff")
    return np.asarray(tau, dtype=np.float64) / det[..., None, None]
