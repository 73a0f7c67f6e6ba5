"""Learnable digital twin: neural objects, neural interactions and channel
prediction.

Channel prediction for a batch of samples is split in two stages:

* :func:`compile_sample` turns (scene, paths) into plain arrays. Everything
  that depends only on geometry lives here: normalized local positions,
  interaction features, frame-change matrices between consecutive
  polarization frames, delays and spread factors. It never reads material
  labels.
* :func:`forward_batch` records the learnable part on a gradient tape:
  embeddings, transfer matrices, the field cascade and the OFDM sum.

Fields are carried as (re, im) pairs for the ``s`` and ``p`` components of
each path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, cabs2, cmul, polar
from .nn import MlpSpec, init_params, mlp_tape, pos_enc
from .polarization import (
    PolarizedField, PolFrame, arrival_frame, basis_matrix, convert_basis, diffraction_angles,
    diffraction_frames, f_theta, reflection_frames, scattering_out_frame, spherical_frame,
)
from .raytrace import C0
from .scene import Scene, to_local_normalized

KINDS = ("reflection", "diffraction", "scattering")
KIND_ID = {k: i for i, k in enumerate(KINDS)}
TINY = 1e-300
NMSE_FLOOR = 1e-30


@dataclass(frozen=True)
class TwinConfig:
    hidden: int = 128
    embed_dim: int = 48
    obj_layers: int = 3
    refl_layers: int = 4
    diffr_layers: int = 5
    scat_layers: int = 4
    m_obj: int = 10
    m_int: int = 4
    fc: float = 3.5e9

    def to_dict(self):
        return dict(self.__dict__)


def _amp_phase(n_pairs):
    return ("amp", "phase") * n_pairs


def network_specs(cfg: TwinConfig, object_ids) -> dict:
    h, e, mi = cfg.hidden, cfg.embed_dim, cfg.m_int
    specs = {
        "refl": MlpSpec((e + 1 + 2 * mi,) + (h,) * cfg.refl_layers + (4,), _amp_phase(2)),
        "diffr": MlpSpec((e + 7 + 14 * mi,) + (h,) * cfg.diffr_layers + (8,), _amp_phase(4)),
        "scat": MlpSpec((e + 9 + 18 * mi + 4,) + (h,) * cfg.scat_layers + (4,), _amp_phase(2)),
    }
    for oid in object_ids:
        specs[f"obj/{oid}"] = MlpSpec((6 * cfg.m_obj,) + (h,) * cfg.obj_layers + (e,), ("linear",) * e)
    return specs


class TwinModel:
    """Neural objects keyed by object id plus the three interaction networks."""

    def __init__(self, config: TwinConfig, specs: dict, params: dict):
        self.config = config
        self.specs = dict(specs)
        self.params = {k: [(np.asarray(w, float), np.asarray(b, float)) for w, b in v] for k, v in params.items()}

    @property
    def object_ids(self):
        return sorted(int(k.split("/")[1]) for k in self.specs if k.startswith("obj/"))

    def flat(self) -> dict:
        out = {}
        for name in sorted(self.params):
            for i, (w, b) in enumerate(self.params[name]):
                out[f"{name}/W{i}"] = w
                out[f"{name}/b{i}"] = b
        return out

    def set_flat(self, flat: dict):
        for name in self.params:
            self.params[name] = [(flat[f"{name}/W{i}"], flat[f"{name}/b{i}"]) for i in range(len(self.params[name]))]

    def n_params(self) -> int:
        return int(sum(v.size for v in self.flat().values()))

    def copy(self) -> "TwinModel":
        return TwinModel(self.config, self.specs, {k: [(w.copy(), b.copy()) for w, b in v] for k, v in self.params.items()})


def build_twin(object_ids, config: TwinConfig | None = None, seed: int = 0) -> TwinModel:
    config = config or TwinConfig()
    specs = network_specs(config, sorted(int(o) for o in object_ids))
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    params = {name: init_params(specs[name], s) for name, s in zip(sorted(specs), seeds)}
    return TwinModel(config, specs, params)


# --- geometry compilation -----------------------------------------------------

@dataclass
class CompiledSample:
    """Geometry-only arrays for one sample; concatenated along axis 0 for batches."""
    tau: np.ndarray        # (P,)
    gain: np.ndarray       # (P,) lambda/(4 pi) * a_l
    e0: np.ndarray         # (P,) 1/d_1, s-amplitude of the departing field
    m_final: np.ndarray    # (P, 2) projection of the last frame onto the rx element
    i_path: np.ndarray     # (I,) owning path
    i_step: np.ndarray     # (I,)
    i_kind: np.ndarray     # (I,)
    i_obj: np.ndarray      # (I,)
    i_pbar: np.ndarray     # (I, 3) normalized local position
    i_min: np.ndarray      # (I, 2, 2) previous frame -> incoming frame
    i_feat: np.ndarray     # (I, 9) kind features, zero padded
    n_samples: int = 1
    p_sample: np.ndarray | None = None  # (P,)

    def __post_init__(self):
        if self.p_sample is None:
            self.p_sample = np.zeros(len(self.tau), dtype=int)

    @property
    def n_paths(self):
        return len(self.tau)


FEAT_WIDTH = {"reflection": 1, "diffraction": 7, "scattering": 9}


def interaction_frames(rec):
    """(incoming frame, outgoing frame) predefined for the interaction kind."""
    if rec.kind == "reflection":
        return reflection_frames(rec.d_aoa, rec.d_aod, rec.normal)
    if rec.kind == "diffraction":
        return diffraction_frames(rec.d_aoa, rec.d_aod, rec.edge)
    if rec.kind == "scattering":
        fin, _ = reflection_frames(rec.d_aoa, rec.d_aoa - 2 * (rec.normal @ rec.d_aoa) * rec.normal, rec.normal)
        return fin, scattering_out_frame(rec.d_aod)
    raise ValueError(f"unknown interaction kind {rec.kind!r}")


def interaction_features(scene: Scene, rec, seg_prev: float, seg_next: float) -> np.ndarray:
    """Un-encoded geometric feature vector of one interaction."""
    if rec.kind == "reflection":
        return np.array([np.arccos(np.clip(abs(rec.normal @ rec.d_aoa), 0.0, 1.0))])
    if rec.kind == "diffraction":
        ang = diffraction_angles(rec.n0, rec.nn, rec.d_aoa, rec.d_aod, seg_prev, seg_next, scene.scene_max_dim)
        return ang.features()
    obj = scene.object(rec.object_id)
    loc = obj.pose.dir_to_local
    return np.concatenate([loc(rec.d_aoa), loc(rec.d_aod), loc(rec.normal)])


def compile_sample(scene: Scene, paths, fc: float) -> CompiledSample:
    lam = C0 / fc
    tau, gain, e0, m_final = [], [], [], []
    rows = {k: [] for k in ("path", "step", "kind", "obj", "pbar", "min", "feat")}
    for pi, path in enumerate(paths):
        seg = path.segment_lengths
        tau.append(path.tau)
        gain.append(lam / (4 * np.pi) * path.spread_factor)
        e0.append(1.0 / seg[0])
        prev = spherical_frame(path.first_direction)
        for i, rec in enumerate(path.interactions):
            fin, fout = interaction_frames(rec)
            feat = np.zeros(9)
            f = interaction_features(scene, rec, seg[i], seg[i + 1])
            feat[:len(f)] = f
            rows["path"].append(pi)
            rows["step"].append(i)
            rows["kind"].append(KIND_ID[rec.kind])
            rows["obj"].append(rec.object_id)
            rows["pbar"].append(to_local_normalized(scene.object(rec.object_id), rec.p))
            rows["min"].append(basis_matrix(prev, fin))
            rows["feat"].append(feat)
            prev = fout
        m_final.append(basis_matrix(prev, arrival_frame(path.last_direction))[0])
    return CompiledSample(
        tau=np.array(tau, float), gain=np.array(gain, float), e0=np.array(e0, float),
        m_final=np.array(m_final, float).reshape(-1, 2),
        i_path=np.array(rows["path"], int), i_step=np.array(rows["step"], int),
        i_kind=np.array(rows["kind"], int), i_obj=np.array(rows["obj"], int),
        i_pbar=np.array(rows["pbar"], float).reshape(-1, 3),
        i_min=np.array(rows["min"], float).reshape(-1, 2, 2),
        i_feat=np.array(rows["feat"], float).reshape(-1, 9))


def concat_samples(samples) -> CompiledSample:
    """Stack compiled samples into one batch, re-indexing paths and samples."""
    offs = np.cumsum([0] + [s.n_paths for s in samples])
    cat = lambda name: np.concatenate([getattr(s, name) for s in samples])  # noqa: E731
    return CompiledSample(
        tau=cat("tau"), gain=cat("gain"), e0=cat("e0"), m_final=cat("m_final").reshape(-1, 2),
        i_path=np.concatenate([s.i_path + o for s, o in zip(samples, offs)]).astype(int),
        i_step=cat("i_step").astype(int), i_kind=cat("i_kind").astype(int), i_obj=cat("i_obj").astype(int),
        i_pbar=cat("i_pbar").reshape(-1, 3), i_min=cat("i_min").reshape(-1, 2, 2),
        i_feat=cat("i_feat").reshape(-1, 9), n_samples=len(samples),
        p_sample=np.concatenate([np.full(s.n_paths, b) for b, s in enumerate(samples)]).astype(int))


# --- recorded network pieces ----------------------------------------------------

def param_vars(tape: Tape, twin: TwinModel, names=None) -> dict:
    names = sorted(twin.params) if names is None else names
    return {n: [(tape.param(w), tape.param(b)) for w, b in twin.params[n]] for n in names}


def embeddings(tape: Tape, twin: TwinModel, pv: dict, obj_ids, pbar):
    """Embedding rows for (object id, normalized local position) pairs."""
    obj_ids = np.asarray(obj_ids, int)
    enc = pos_enc(np.asarray(pbar, float).reshape(-1, 3), twin.config.m_obj)
    parts, order = [], []
    for oid in np.unique(obj_ids):
        name = f"obj/{oid}"
        if name not in pv:
            raise KeyError(f"unknown object id {oid}")
        idx = np.flatnonzero(obj_ids == oid)
        parts.append(mlp_tape(tape, twin.specs[name], pv[name], enc[idx]))
        order.append(idx)
    if not parts:
        return tape.const(np.zeros((0, twin.config.embed_dim)))
    e = tape.concat(parts, axis=0)
    return tape.take(e, np.argsort(np.concatenate(order)), axis=0)


def _with_enc(tape, e, vbar, m):
    return tape.concat([e, vbar, pos_enc(vbar, m)], axis=1)


def reflection_T(tape, twin, pv, e, theta):
    """Diagonal transfer: returns ((re, im) of T11, (re, im) of T22)."""
    theta = np.asarray(theta, float).reshape(-1, 1)
    v = tape.concat([e, theta, pos_enc(f_theta(theta), twin.config.m_int)], axis=1)
    t = mlp_tape(tape, twin.specs["refl"], pv["refl"], v)
    col = lambda j: tape.take(t, [j], axis=1)  # noqa: E731
    return polar(tape, col(0), col(1)), polar(tape, col(2), col(3))


def diffraction_T(tape, twin, pv, e, vbar):
    """Full transfer: returns T11, T12, T21, T22 as (re, im) pairs."""
    v = _with_enc(tape, e, np.asarray(vbar, float).reshape(-1, 7), twin.config.m_int)
    t = mlp_tape(tape, twin.specs["diffr"], pv["diffr"], v)
    col = lambda j: tape.take(t, [j], axis=1)  # noqa: E731
    return tuple(polar(tape, col(2 * k), col(2 * k + 1)) for k in range(4))


def scattering_out(tape, twin, pv, e, vbar, es, ep):
    """Outgoing (s, p) field from normalized incoming field; scales with |E_in|."""
    norm = tape.sqrt(tape.add(cabs2(tape, es), cabs2(tape, ep)))
    den = tape.maximum(norm, TINY)
    nb = [tape.div(x, den) for x in (es[0], es[1], ep[0], ep[1])]
    vbar = np.asarray(vbar, float).reshape(-1, 9)
    v = tape.concat([e, vbar, pos_enc(vbar, twin.config.m_int)] + nb, axis=1)
    t = mlp_tape(tape, twin.specs["scat"], pv["scat"], v)
    col = lambda j: tape.take(t, [j], axis=1)  # noqa: E731
    a = polar(tape, col(0), col(1))
    b = polar(tape, col(2), col(3))
    return (tape.mul(a[0], norm), tape.mul(a[1], norm)), (tape.mul(b[0], norm), tape.mul(b[1], norm))


def _rows(tape, pair, idx):
    return (tape.take(pair[0], idx, axis=0), tape.take(pair[1], idx, axis=0))


def _rmul(tape, coef, pair):
    """Real column coefficient times complex pair."""
    return (tape.mul(pair[0], coef), tape.mul(pair[1], coef))


def forward_batch(tape: Tape, twin: TwinModel, pv: dict, batch: CompiledSample, freqs):
    """Record the channel of every sample in ``batch``; returns (h_re, h_im) of shape (B, K)."""
    P = batch.n_paths
    freqs = np.asarray(freqs, float)
    B, K = batch.n_samples, len(freqs)
    if P == 0:
        z = tape.const(np.zeros((B, K)))
        return z, z
    kind = batch.i_kind
    e_all = embeddings(tape, twin, pv, batch.i_obj, batch.i_pbar)

    # linear interactions do not depend on the field: evaluate them up front
    pos = np.full(len(kind), -1)
    r_idx = np.flatnonzero(kind == 0)
    d_idx = np.flatnonzero(kind == 1)
    pos[r_idx] = np.arange(len(r_idx))
    pos[d_idx] = np.arange(len(d_idx))
    if len(r_idx):
        t_r = reflection_T(tape, twin, pv, tape.take(e_all, r_idx, axis=0), batch.i_feat[r_idx, :1])
    if len(d_idx):
        t_d = diffraction_T(tape, twin, pv, tape.take(e_all, d_idx, axis=0), batch.i_feat[d_idx, :7])

    zeros = np.zeros((P, 1))
    es = (tape.const(batch.e0.reshape(-1, 1)), tape.const(zeros))
    ep = (tape.const(zeros), tape.const(zeros))
    for step in range(int(batch.i_step.max(initial=-1)) + 1):
        at = np.flatnonzero(batch.i_step == step)
        outs_s, outs_p, paths_out = [], [], []
        for k in (0, 1, 2):
            idx = at[kind[at] == k]
            if idx.size == 0:
                continue
            pp = batch.i_path[idx]
            m = batch.i_min[idx]
            s0, p0 = _rows(tape, es, pp), _rows(tape, ep, pp)
            si = tuple(tape.add(tape.mul(s0[c], m[:, 0, :1]), tape.mul(p0[c], m[:, 0, 1:])) for c in (0, 1))
            pi = tuple(tape.add(tape.mul(s0[c], m[:, 1, :1]), tape.mul(p0[c], m[:, 1, 1:])) for c in (0, 1))
            if k == 0:
                t11, t22 = (_rows(tape, t, pos[idx]) for t in t_r)
                so, po = cmul(tape, t11, si), cmul(tape, t22, pi)
            elif k == 1:
                t11, t12, t21, t22 = (_rows(tape, t, pos[idx]) for t in t_d)
                so = tuple(tape.add(a, b) for a, b in zip(cmul(tape, t11, si), cmul(tape, t12, pi)))
                po = tuple(tape.add(a, b) for a, b in zip(cmul(tape, t21, si), cmul(tape, t22, pi)))
            else:
                so, po = scattering_out(tape, twin, pv, tape.take(e_all, idx, axis=0), batch.i_feat[idx], si, pi)
            outs_s.append(so)
            outs_p.append(po)
            paths_out.append(pp)
        pp_all = np.concatenate(paths_out)
        keep = np.ones((P, 1))
        keep[pp_all] = 0.0

        def merge(old, new):
            return tuple(
                tape.add(tape.mul(old[c], keep),
                         tape.segment_sum(tape.concat([n[c] for n in new], axis=0), pp_all, P))
                for c in (0, 1))
        es, ep = merge(es, outs_s), merge(ep, outs_p)

    mf = batch.m_final
    g = batch.gain.reshape(-1, 1)
    a_re = tape.mul(tape.add(tape.mul(es[0], mf[:, :1]), tape.mul(ep[0], mf[:, 1:])), g)
    a_im = tape.mul(tape.add(tape.mul(es[1], mf[:, :1]), tape.mul(ep[1], mf[:, 1:])), g)
    ph = 2 * np.pi * batch.tau[:, None] * freqs[None, :]
    c, s = np.cos(ph), np.sin(ph)
    # alpha * exp(-j ph) = (a_re c + a_im s) + j (a_im c - a_re s)
    pr = tape.add(tape.mul(a_re, c), tape.mul(a_im, s))
    pim = tape.sub(tape.mul(a_im, c), tape.mul(a_re, s))
    return tape.segment_sum(pr, batch.p_sample, B), tape.segment_sum(pim, batch.p_sample, B)


def log_nmse_tape(tape: Tape, h_re, h_im, h_true) -> tuple:
    """Mean over samples of log10(max(err / |h_true|^2, 1e-30)); also returns per-sample values."""
    h_true = np.atleast_2d(h_true)
    dr = tape.sub(h_re, h_true.real)
    di = tape.sub(h_im, h_true.imag)
    err = tape.sum(tape.add(tape.square(dr), tape.square(di)), axis=1)
    norm = (np.abs(h_true) ** 2).sum(axis=1)
    if np.any(norm == 0):
        raise ValueError("log-NMSE undefined for an all-zero ground-truth channel")
    per = tape.log10(tape.maximum(tape.div(err, norm), NMSE_FLOOR))
    return tape.mul(tape.sum(per), 1.0 / len(norm)), per


# --- single-query API -------------------------------------------------------------

def object_embedding(twin: TwinModel, object_id: int, p_world, obj) -> np.ndarray:
    """48-vector for a world point on ``obj`` (an ObjectModel with the current pose)."""
    if f"obj/{object_id}" not in twin.specs:
        raise KeyError(f"unknown object id {object_id}")
    tape = Tape()
    pv = param_vars(tape, twin, [f"obj/{object_id}"])
    pbar = to_local_normalized(obj, np.asarray(p_world, float).reshape(-1, 3))
    e = embeddings(tape, twin, pv, np.full(len(pbar), object_id), pbar).value
    return e[0] if np.ndim(p_world) == 1 else e


def _pair_to_complex(pair):
    return pair[0].value[:, 0] + 1j * pair[1].value[:, 0]


def predict_reflection_T(twin: TwinModel, e, theta) -> np.ndarray:
    tape = Tape()
    pv = param_vars(tape, twin, ["refl"])
    t11, t22 = reflection_T(tape, twin, pv, np.atleast_2d(e), [theta])
    return np.diag([_pair_to_complex(t11)[0], _pair_to_complex(t22)[0]])


def predict_diffraction_T(twin: TwinModel, e, ang) -> np.ndarray:
    tape = Tape()
    pv = param_vars(tape, twin, ["diffr"])
    ts = diffraction_T(tape, twin, pv, np.atleast_2d(e), ang.features()[None])
    return np.array([_pair_to_complex(t)[0] for t in ts]).reshape(2, 2)


def predict_scattering_field(twin: TwinModel, e, d_aoa, d_aod, n, E_in: PolarizedField,
                             out_dir=None) -> PolarizedField:
    """Scattered field; inputs are object-local, ``E_in`` is in the TE/TM
    incoming frame. Output frame: spherical frame of ``out_dir`` (defaults to
    ``d_aod``)."""
    out = scattering_out_frame(d_aod if out_dir is None else out_dir)
    if E_in.power() == 0.0:
        return PolarizedField(0j, 0j, out)
    tape = Tape()
    pv = param_vars(tape, twin, ["scat"])
    vbar = np.concatenate([d_aoa, d_aod, n])[None]
    es = (np.array([[E_in.amp_s.real]]), np.array([[E_in.amp_s.imag]]))
    ep = (np.array([[E_in.amp_p.real]]), np.array([[E_in.amp_p.imag]]))
    so, po = scattering_out(tape, twin, pv, np.atleast_2d(e), vbar, (tape.const(es[0]), tape.const(es[1])),
                            (tape.const(ep[0]), tape.const(ep[1])))
    return PolarizedField(complex(_pair_to_complex(so)[0]), complex(_pair_to_complex(po)[0]), out)


def predict_outgoing(twin: TwinModel, scene: Scene, rec, E_in: PolarizedField,
                     seg_prev: float = 1.0, seg_next: float = 1.0) -> PolarizedField:
    """One interaction: normalize the field to the kind's incoming frame, query
    the object and interaction networks, return the field in the outgoing frame."""
    if np.abs(E_in.frame.d - rec.d_aoa).max() > 1e-9:
        raise ValueError("predict_outgoing: field direction differs from d_aoa")
    obj = scene.object(rec.object_id)
    fin, fout = interaction_frames(rec)
    E = convert_basis(E_in, fin)
    e = object_embedding(twin, rec.object_id, rec.p, obj)
    feat = interaction_features(scene, rec, seg_prev, seg_next)
    if rec.kind == "reflection":
        a = predict_reflection_T(twin, e, feat[0]) @ E.amps
    elif rec.kind == "diffraction":
        ang = diffraction_angles(rec.n0, rec.nn, rec.d_aoa, rec.d_aod, seg_prev, seg_next, scene.scene_max_dim)
        a = predict_diffraction_T(twin, e, ang) @ E.amps
    else:
        return predict_scattering_field(twin, e, feat[:3], feat[3:6], feat[6:9], E, out_dir=rec.d_aod)
    return PolarizedField(complex(a[0]), complex(a[1]), fout)


def predict_channel(twin: TwinModel, scene: Scene, paths, freqs) -> np.ndarray:
    """Predicted channel vector (K,) for one scene instance."""
    batch = compile_sample(scene, paths, twin.config.fc)
    tape = Tape()
    pv = param_vars(tape, twin)
    h_re, h_im = forward_batch(tape, twin, pv, batch, freqs)
    return h_re.value[0] + 1j * h_im.value[0]


def frame_of(kind: str, rec) -> PolFrame:
    """Outgoing frame of a record (used by tests and demos)."""
    return interaction_frames(rec)[1]
