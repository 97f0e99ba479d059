"""
Tensor3 Module - 3-vector and 3x3-matrix algebra
Holds the decompositions the constitutive laws need (SVD, polar rotation,
determinant, trace, deviator) and the package-wide exception hierarchy.

All functions accept a single tensor or a batch stacked along leading axes
(shape (..., 3) for vectors, (..., 3, 3) for matrices).
"""

import logging
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

logger = logging.getLogger(__name__)

Vec3 = NDArray[np.float64]
Mat3 = NDArray[np.float64]

IDENTITY = np.eye(3)


class ViscompmError(Exception):
    """Base class for every error raised by the simulation and calibration code."""


class DomainError(ViscompmError, ValueError):
    """Input outside the domain of a physical or numerical operation."""


class InvertedElementError(DomainError):
    """A deformation gradient with non-positive determinant was encountered."""

    def __init__(self, message: str, count: int = 1):
        super().__init__(message)
        self.count = count


class Svd3(NamedTuple):
    u: Mat3
    sigma: Vec3
    v: Mat3


def svd3(m: Mat3) -> Svd3:
    """
    Rotation-variant singular value decomposition.

    u and v are proper rotations (det = +1); a reflection in the input is
    absorbed into the sign of the smallest singular value, so
    sigma[0] >= sigma[1] >= |sigma[2]|.

    Args:
        m: matrix or batch of matrices, shape (..., 3, 3)

    Returns:
        Svd3: (u, sigma, v) with m = u @ diag(sigma) @ v.T
    """
    m = np.asarray(m, dtype=np.float64)
    u, sigma, vh = np.linalg.svd(m)
    v = np.swapaxes(vh, -1, -2).copy()
    sigma = sigma.copy()

    flip_u = np.linalg.det(u) < 0.0
    flip_v = np.linalg.det(v) < 0.0
    # negating the last column of u or v is compensated by negating sigma[2]
    u[..., :, 2] = np.where(flip_u[..., None], -u[..., :, 2], u[..., :, 2])
    v[..., :, 2] = np.where(flip_v[..., None], -v[..., :, 2], v[..., :, 2])
    sigma[..., 2] = np.where(flip_u ^ flip_v, -sigma[..., 2], sigma[..., 2])
    return Svd3(u, sigma, v)


def det3(m: Mat3) -> NDArray[np.float64]:
    return np.linalg.det(np.asarray(m, dtype=np.float64))


def trace3(m: Mat3) -> NDArray[np.float64]:
    return np.trace(np.asarray(m, dtype=np.float64), axis1=-2, axis2=-1)


def deviator(m: Mat3) -> Mat3:
    """Traceless part m - (tr(m)/3) I."""
    m = np.asarray(m, dtype=np.float64)
    return m - (trace3(m) / 3.0)[..., None, None] * IDENTITY


def transpose(m: Mat3) -> Mat3:
    return np.swapaxes(m, -1, -2)


def diag3(values: Vec3) -> Mat3:
    """Diagonal matrix (or batch) from a vector (or batch) of diagonal entries."""
    values = np.asarray(values, dtype=np.float64)
    return values[..., :, None] * IDENTITY


def polar_rotation(f: Mat3) -> Mat3:
    """
    Rotation factor R = U V^T of the polar decomposition F = R S.

    Raises:
        InvertedElementError: if any det(f) <= 0
    """
    f = np.asarray(f, dtype=np.float64)
    det = det3(f)
    bad = np.count_nonzero(~(det > 0.0))
    if bad:
        raise InvertedElementError(
            f"Polar rotation undefined for {bad} inverted element(s) (det <= 0).", bad
        )
    u, _, v = svd3(f)
    return u @ transpose(v)


def rotation_about_axis(axis: Vec3, angle: float) -> Mat3:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return IDENTITY + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
