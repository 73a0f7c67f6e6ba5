"""Analytic ground-truth channel: Fresnel reflection, lossy-wedge UTD and a
directive diffuse-scattering lobe, cascaded through polarization frames.

All interaction coefficients are evaluated at the carrier frequency only;
just the delay phase varies across subcarriers.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.special import modfresnelm

from .polarization import (
    DiffractionAngles, PolarizedField, arrival_frame, convert_basis, diffraction_angles,
    diffraction_frames, reflection_frames, scattering_out_frame, spherical_frame,
)
from .raytrace import C0, PathGeometry
from .scene import normalize

EPS0 = 8.8541878128e-12
DEFAULT_FC = 3.5e9


@dataclass(frozen=True)
class Material:
    id: int
    name: str
    eps_r: float
    sigma: float
    scat_coeff: float
    lobe_exp: float

    def __post_init__(self):
        if self.eps_r < 1 or self.sigma < 0 or not 0 <= self.scat_coeff <= 1 or self.lobe_exp < 1:
            raise ValueError(f"material {self.id}: parameters out of range")

    def permittivity(self, f: float) -> complex:
        """Complex relative permittivity eta = eps_r - j sigma / (2 pi f eps0)."""
        return complex(self.eps_r, -self.sigma / (2 * np.pi * f * EPS0))


def parse_materials(text: str) -> dict:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    out = {}
    for row in csv.DictReader(io.StringIO("\n".join(lines))):
        m = Material(int(row["id"]), row["name"], float(row["eps_r"]), float(row["sigma"]),
                     float(row["scat_coeff"]), float(row["lobe_exp"]))
        if m.id in out:
            raise ValueError(f"duplicate material id {m.id}")
        out[m.id] = m
    return out


def load_materials(path=None) -> dict:
    """Material table keyed by id; defaults to the packaged fixture."""
    if path is None:
        text = resources.files("emtwin").joinpath("data/materials.csv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_materials(text)


# --- reflection --------------------------------------------------------------

def fresnel_coeffs(mat: Material, theta, f: float = DEFAULT_FC):
    """(Gamma_TE, Gamma_TM) for incidence angle theta from the normal.

    Signs follow the TE/TM frames of the reflection model: a perfect
    conductor gives Gamma_TE = -1 and Gamma_TM = +1.
    """
    eta = mat.permittivity(f)
    c = np.cos(theta)
    root = np.sqrt(eta - np.sin(theta) ** 2 + 0j)
    g_te = (c - root) / (c + root)
    g_tm = (eta * c - root) / (eta * c + root)
    return g_te, g_tm


def reflection_matrix(mat: Material, theta, f: float = DEFAULT_FC) -> np.ndarray:
    """Specular transfer in (TE, TM) frames, reduced by the scattered share."""
    g_te, g_tm = fresnel_coeffs(mat, theta, f)
    r = np.sqrt(1.0 - mat.scat_coeff ** 2)
    return np.diag([g_te * r, g_tm * r]).astype(complex)


# --- diffraction -------------------------------------------------------------

def transition_function(x):
    """Kouyoumjian-Pathak F(x) = 2j sqrt(x) e^{jx} int_{sqrt x}^inf e^{-j t^2} dt."""
    x = np.asarray(x, dtype=float)
    sx = np.sqrt(x)
    return 2j * sx * np.exp(1j * x) * modfresnelm(sx)[0]


def _cot_f(beta, s, n, kL):
    """cot((pi + s beta) / 2n) * F(kL a^s(beta)) with the grazing limit handled."""
    N = np.round((beta + s * np.pi) / (2 * np.pi * n))
    eps = np.pi + s * (beta - 2 * np.pi * n * N)
    a = 2.0 * np.cos((2 * np.pi * n * N - beta) / 2) ** 2
    if abs(eps) < 1e-9:
        sg = 1.0 if eps > 0 else -1.0
        return n * (np.sqrt(2 * np.pi * kL) * sg - 2 * kL * eps * np.exp(1j * np.pi / 4)) * np.exp(1j * np.pi / 4)
    return transition_function(kL * a) / np.tan((np.pi + s * beta) / (2 * n))


def utd_terms(ang: DiffractionAngles, s_prev: float, s_next: float, f: float = DEFAULT_FC):
    """The four UTD terms (D1, D2, D3, D4) for a spherical-wave incidence."""
    k = 2 * np.pi * f / C0
    n = ang.betan / np.pi
    sb = np.sin(ang.beta0p)
    L = s_prev * s_next * sb ** 2 / (s_prev + s_next)
    kL = k * L
    pre = -np.exp(-1j * np.pi / 4) / (2 * n * np.sqrt(2 * np.pi * k) * sb)
    bm = ang.phi - ang.phip
    bp = ang.phi + ang.phip
    return (pre * _cot_f(bm, +1, n, kL), pre * _cot_f(bm, -1, n, kL),
            pre * _cot_f(bp, +1, n, kL), pre * _cot_f(bp, -1, n, kL))


def wedge_reflection_coeffs(mat: Material, ang: DiffractionAngles, f: float = DEFAULT_FC):
    """Face reflection coefficients for the lossy-wedge weighting.

    Incidence cosines use the geometric mean of the source and observer
    grazing sines so that swapping tx and rx leaves the coefficient unchanged.
    """
    n = ang.betan / np.pi
    c0 = np.sqrt(abs(np.sin(ang.phip)) * abs(np.sin(ang.phi)))
    cn = np.sqrt(abs(np.sin(n * np.pi - ang.phi)) * abs(np.sin(n * np.pi - ang.phip)))
    r0 = fresnel_coeffs(mat, np.arccos(np.clip(c0, 0.0, 1.0)), f)
    rn = fresnel_coeffs(mat, np.arccos(np.clip(cn, 0.0, 1.0)), f)
    return r0, rn


def utd_coeffs(mat: Material, ang: DiffractionAngles, s_prev: float, s_next: float,
               f: float = DEFAULT_FC) -> np.ndarray:
    """diag(D_s, D_h); spreading is not included."""
    d1, d2, d3, d4 = utd_terms(ang, s_prev, s_next, f)
    (r0_te, r0_tm), (rn_te, rn_tm) = wedge_reflection_coeffs(mat, ang, f)
    d_s = d1 + d2 + r0_te * d4 + rn_te * d3
    d_h = d1 + d2 + r0_tm * d4 + rn_tm * d3
    return np.diag([d_s, d_h]).astype(complex)


def diffraction_matrix(mat, ang, s_prev, s_next, f=DEFAULT_FC) -> np.ndarray:
    """Transfer in the edge-fixed (s, p) frames.

    e_s is the incident phi-hat direction and e_p is minus beta-hat, so the
    textbook -diag(D_s, D_h) acting on (beta, phi) becomes -diag(D_h, D_s).
    """
    d = utd_coeffs(mat, ang, s_prev, s_next, f)
    return -np.diag([d[1, 1], d[0, 0]])


# --- diffuse scattering ------------------------------------------------------

def scatter_field(mat: Material, n, d_aoa, d_aod, E_in: PolarizedField) -> PolarizedField:
    """Directive-lobe scattering; output in the spherical frame of d_aod.

    |E_out| = S cos(psi/2)^(alpha/2) |E_in| with psi the angle between d_aod
    and the specular direction. Polarization is carried over TE->TE and
    TM->TM with TE/TM defined from each direction and the surface normal.
    """
    n = np.asarray(n, float)
    d_aoa = np.asarray(d_aoa, float)
    d_aod = np.asarray(d_aod, float)
    if n @ d_aoa > 0:
        n = -n
    spec = d_aoa - 2 * (n @ d_aoa) * n
    cos_psi = np.clip(spec @ d_aod, -1.0, 1.0)
    lobe = np.sqrt(np.clip((1 + cos_psi) / 2, 0.0, 1.0)) ** (mat.lobe_exp / 2)
    fin, _ = reflection_frames(d_aoa, spec, n)
    # outgoing TE/TM pair built from d_aod; equals the specular pair on the lobe axis
    c = np.cross(d_aod, n)
    nc = np.linalg.norm(c)
    eo_perp = c / nc if nc > 1e-9 else fin.e_s
    eo_par = np.cross(eo_perp, d_aod)
    e_in = convert_basis(E_in, fin)
    vec = mat.scat_coeff * lobe * (e_in.amp_s * eo_perp + e_in.amp_p * eo_par)
    out = scattering_out_frame(d_aod)
    return PolarizedField(complex(vec @ out.e_s), complex(vec @ out.e_p), out)


# --- channel synthesis -------------------------------------------------------

def subcarrier_frequencies(fc: float, K: int, df: float) -> np.ndarray:
    """f_k = fc + (k - K/2) df for k = 0..K-1."""
    return fc + (np.arange(K) - K / 2) * df


def interaction_output(rec, E: PolarizedField, materials: dict, seg_prev: float, seg_next: float,
                       scene_max_dim: float, f: float) -> PolarizedField:
    mat = materials[rec.material_id]
    if rec.kind == "reflection":
        fin, fout = reflection_frames(rec.d_aoa, rec.d_aod, rec.normal)
        theta = np.arccos(np.clip(abs(rec.normal @ rec.d_aoa), 0.0, 1.0))
        a = reflection_matrix(mat, theta, f) @ convert_basis(E, fin).amps
        return PolarizedField(complex(a[0]), complex(a[1]), fout)
    if rec.kind == "diffraction":
        fin, fout = diffraction_frames(rec.d_aoa, rec.d_aod, rec.edge)
        ang = diffraction_angles(rec.n0, rec.nn, rec.d_aoa, rec.d_aod, seg_prev, seg_next, scene_max_dim)
        a = diffraction_matrix(mat, ang, seg_prev, seg_next, f) @ convert_basis(E, fin).amps
        return PolarizedField(complex(a[0]), complex(a[1]), fout)
    if rec.kind == "scattering":
        return scatter_field(mat, rec.normal, rec.d_aoa, rec.d_aod, E)
    raise ValueError(f"unknown interaction kind {rec.kind!r}")


def path_gain(path: PathGeometry, materials: dict, scene_max_dim: float, fc: float = DEFAULT_FC) -> complex:
    """Complex amplitude alpha_l of one path (antennas c = [1, 0], theta-polarized)."""
    seg = path.segment_lengths
    d0 = path.first_direction
    E = PolarizedField(1.0 / seg[0], 0.0, spherical_frame(d0))
    for i, rec in enumerate(path.interactions):
        E = interaction_output(rec, E, materials, seg[i], seg[i + 1], scene_max_dim, fc)
    E = convert_basis(E, arrival_frame(path.last_direction))
    lam = C0 / fc
    return lam / (4 * np.pi) * path.spread_factor * E.amp_s


def oracle_channel(scene, paths, freqs, materials=None, fc: float = DEFAULT_FC) -> np.ndarray:
    """h[k] = sum_l alpha_l exp(-j 2 pi f_k tau_l); paths summed in list order."""
    materials = load_materials() if materials is None else materials
    freqs = np.asarray(freqs, float)
    h = np.zeros(len(freqs), dtype=complex)
    for p in paths:
        h += path_gain(p, materials, scene.scene_max_dim, fc) * np.exp(-2j * np.pi * freqs * p.tau)
    return h
