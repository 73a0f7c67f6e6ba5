"""Polarization frames, basis changes and diffraction angle features.

Frame conventions
-----------------
A :class:`PolFrame` stores two transverse unit vectors and the travel
direction. The reflection and diffraction constructors follow the usual
TE/TM and edge-fixed definitions literally; with those definitions
``e_s x e_p = -d``. The spherical frame (``theta_hat``, ``phi_hat``) used for
antennas and scattering satisfies ``e_s x e_p = +d``. :func:`convert_basis`
works with either, since it only uses inner products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import normalize

DEGENERATE_TOL = 1e-9
DIR_MATCH_TOL = 1e-9


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class PolFrame:
    e_s: np.ndarray
    e_p: np.ndarray
    d: np.ndarray

    @property
    def handedness(self) -> float:
        """+1 if (e_s, e_p, d) is right-handed, -1 if left-handed."""
        return float(np.sign(np.cross(self.e_s, self.e_p) @ self.d))

    def matrix(self) -> np.ndarray:
        return np.stack([self.e_s, self.e_p])


@dataclass(frozen=True)
class PolarizedField:
    amp_s: complex
    amp_p: complex
    frame: PolFrame

    @property
    def amps(self) -> np.ndarray:
        return np.array([self.amp_s, self.amp_p], dtype=complex)

    def vector(self) -> np.ndarray:
        """Cartesian complex field vector."""
        return self.amp_s * self.frame.e_s + self.amp_p * self.frame.e_p

    def power(self) -> float:
        return float(abs(self.amp_s) ** 2 + abs(self.amp_p) ** 2)


@dataclass(frozen=True)
class DiffractionAngles:
    beta0p: float
    beta0: float
    phip: float
    phi: float
    betan: float
    sbar_prev: float
    sbar_next: float

    def features(self) -> np.ndarray:
        """[f(phi'), f(phi), f(beta0'), f(beta0), f(betan), s', s]."""
        return np.array([f_theta(self.phip), f_theta(self.phi), f_theta(self.beta0p),
                         f_theta(self.beta0), f_theta(self.betan), self.sbar_prev, self.sbar_next])


def f_theta(x):
    """Map an angle in [0, 2 pi] linearly onto [-1, 1]."""
    return np.asarray(x) / np.pi - 1.0 if np.ndim(x) else float(x) / np.pi - 1.0


def basis_matrix(src: PolFrame, dst: PolFrame) -> np.ndarray:
    """2x2 real matrix M with amps_dst = M @ amps_src."""
    return dst.matrix() @ src.matrix().T


def convert_basis(E: PolarizedField, target: PolFrame) -> PolarizedField:
    if np.abs(E.frame.d - target.d).max() > DIR_MATCH_TOL:
        raise FrameError("convert_basis: travel directions differ")
    a = basis_matrix(E.frame, target) @ E.amps
    return PolarizedField(complex(a[0]), complex(a[1]), target)


def _least_aligned_axis(d) -> np.ndarray:
    ax = np.zeros(3)
    ax[int(np.argmin(np.abs(d)))] = 1.0
    return ax


def _perp_fallback(d) -> np.ndarray:
    a = _least_aligned_axis(d)
    return normalize(a - (a @ d) * d)


def reflection_frames(d_aoa, d_aod, n):
    """TE/TM frames: e_perp = d_in x n / |.|, e_par_in = e_perp x d_in,
    e_perp_out = e_perp, e_par_out = e_perp x d_out / |.|."""
    d_aoa = np.asarray(d_aoa, float)
    d_aod = np.asarray(d_aod, float)
    c = np.cross(d_aoa, n)
    nc = np.linalg.norm(c)
    e_perp = c / nc if nc > DEGENERATE_TOL else _perp_fallback(d_aoa)
    e_par_in = np.cross(e_perp, d_aoa)
    e_par_out = normalize(np.cross(e_perp, d_aod))
    return PolFrame(e_perp, e_par_in, d_aoa), PolFrame(e_perp, e_par_out, d_aod)


def diffraction_frames(d_aoa, d_aod, e_hat):
    """Edge-fixed frames: e_s_in = d_in x e / |.|, e_p_in = e_s_in x d_in,
    e_s_out = -(d_out x e) / |.|, e_p_out = e_s_out x d_out."""
    d_aoa = np.asarray(d_aoa, float)
    d_aod = np.asarray(d_aod, float)
    e_hat = np.asarray(e_hat, float)
    c_in = np.cross(d_aoa, e_hat)
    c_out = np.cross(d_aod, e_hat)
    if np.linalg.norm(c_in) < DEGENERATE_TOL or np.linalg.norm(c_out) < DEGENERATE_TOL:
        raise FrameError("diffraction_frames: ray parallel to edge")
    es_in = normalize(c_in)
    ep_in = np.cross(es_in, d_aoa)
    es_out = -normalize(c_out)
    ep_out = np.cross(es_out, d_aod)
    return PolFrame(es_in, ep_in, d_aoa), PolFrame(es_out, ep_out, d_aod)


def spherical_frame(d) -> PolFrame:
    """(theta_hat, phi_hat, d) for direction d; right-handed."""
    d = np.asarray(d, float)
    rho = np.hypot(d[0], d[1])
    if rho < DEGENERATE_TOL:
        e_s = _perp_fallback(d)
        return PolFrame(e_s, np.cross(d, e_s), d)
    theta = np.arccos(np.clip(d[2], -1.0, 1.0))
    phi = np.arctan2(d[1], d[0])
    e_s = np.array([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)])
    e_p = np.array([-np.sin(phi), np.cos(phi), 0.0])
    return PolFrame(e_s, e_p, d)


def scattering_out_frame(d_aod) -> PolFrame:
    return spherical_frame(d_aod)


def arrival_frame(d_final) -> PolFrame:
    """Receive-antenna frame: spherical unit vectors of the arrival direction
    (-d_final) seen from rx, tagged with the travel direction d_final."""
    d_final = np.asarray(d_final, float)
    f = spherical_frame(-d_final)
    return PolFrame(f.e_s, f.e_p, d_final)


def wedge_basis(n0, nn):
    """Edge vector e = n0 x nn, in-face tangent t0 = n0 x e and exterior angle."""
    n0 = np.asarray(n0, float)
    nn = np.asarray(nn, float)
    e = normalize(np.cross(n0, nn))
    t0 = np.cross(n0, e)
    betan = np.pi + np.arccos(np.clip(n0 @ nn, -1.0, 1.0))
    return e, t0, betan


def _face_angle(v, e, t0, n0):
    """Angle from face 0 of the direction v projected onto the edge-normal plane."""
    vt = v - (v @ e) * e
    nv = np.linalg.norm(vt)
    if nv < DEGENERATE_TOL:
        raise FrameError("diffraction_angles: ray parallel to edge")
    vt = vt / nv
    a = np.arccos(np.clip(t0 @ vt, -1.0, 1.0))
    s = np.sign(n0 @ vt)
    s = 1.0 if s == 0 else s
    return float(np.pi - (np.pi - a) * s)


def diffraction_angles(n0, nn, d_aoa, d_aod, d_prev, d_next, scene_max_dim) -> DiffractionAngles:
    d_aoa = np.asarray(d_aoa, float)
    d_aod = np.asarray(d_aod, float)
    e, t0, betan = wedge_basis(n0, nn)
    n0 = np.asarray(n0, float)
    beta0p = float(np.arccos(np.clip(e @ d_aoa, -1.0, 1.0)))
    beta0 = float(np.arccos(np.clip(e @ d_aod, -1.0, 1.0)))
    # phi' is the angle of the source as seen from the edge
    phip = _face_angle(-d_aoa, e, t0, n0)
    phi = _face_angle(d_aod, e, t0, n0)
    return DiffractionAngles(beta0p, beta0, phip, phi, float(betan),
                             float(d_prev) / scene_max_dim, float(d_next) / scene_max_dim)
