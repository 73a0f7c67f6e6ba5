"""Dense networks, positional encoding, Adam and deterministic checkpoints."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var

HEAD_TAGS = ("amp", "phase", "linear")
CHECKPOINT_FORMAT = "emtwin-checkpoint/1"


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., output) and one head tag per output.

    Hidden layers use a rectifier; head tags are ``amp`` (exp),
    ``phase`` (2 pi logistic) or ``linear``.
    """
    widths: tuple
    heads: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "heads", tuple(self.heads))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("MlpSpec: need >= 2 widths, all >= 1")
        if len(self.heads) != self.widths[-1] or any(h not in HEAD_TAGS for h in self.heads):
            raise ValueError("MlpSpec: one valid head tag per output required")

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def to_dict(self):
        return {"widths": list(self.widths), "heads": list(self.heads)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["widths"]), tuple(d["heads"]))


def pos_enc(x, M: int) -> np.ndarray:
    """[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{M-1} pi x), cos(2^{M-1} pi x)]
    per component, components concatenated. Works on (..., D) arrays."""
    if M < 1:
        raise ValueError("M must be >= 1")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    ang = x[..., :, None] * (np.pi * 2.0 ** np.arange(M))
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)   # (..., D, M, 2)
    enc = enc.reshape(x.shape[:-1] + (x.shape[-1] * 2 * M,))
    return enc if not scalar else enc.reshape(2 * M)


def init_params(spec: MlpSpec, seed) -> list:
    """Fan-in uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    out = []
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        lim = np.sqrt(6.0 / n_in)
        out.append((rng.uniform(-lim, lim, size=(n_in, n_out)), np.zeros(n_out)))
    return out


def head_groups(heads):
    tags = np.array(heads)
    return {t: np.flatnonzero(tags == t) for t in HEAD_TAGS if (tags == t).any()}


def mlp_tape(tape: Tape, spec: MlpSpec, pvars, x) -> Var:
    """Record an MLP evaluation on ``tape``; ``pvars`` are (W, b) Var pairs."""
    h = x
    last = len(pvars) - 1
    for i, (w, b) in enumerate(pvars):
        h = tape.dense(h, w, b)
        if i < last:
            h = tape.relu(h)
    groups = head_groups(spec.heads)
    if list(groups) == ["linear"]:
        return h
    parts, order = [], []
    for tag, idx in groups.items():
        z = tape.take(h, idx, axis=1)
        if tag == "amp":
            z = tape.exp(z)
        elif tag == "phase":
            z = tape.mul(tape.sigmoid(z), 2.0 * np.pi)
        parts.append(z)
        order.append(idx)
    y = tape.concat(parts, axis=1)
    inv = np.argsort(np.concatenate(order))
    return tape.take(y, inv, axis=1)


def forward(spec: MlpSpec, params, x):
    """Evaluate the network on x of shape (N, n_in) or (n_in,); returns (y, tape).

    Parameters are recorded as leaves on the returned tape in layer order, so
    ``backward(tape, dy)`` can return gradients aligned with ``params``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"forward: input width {x.shape[-1]} != {spec.n_in}")
    tape = Tape()
    pvars = [(tape.param(w), tape.param(b)) for w, b in params]
    tape.pvars = pvars
    out = mlp_tape(tape, spec, pvars, np.atleast_2d(x))
    tape.out = out
    y = out.value[0] if single else out.value
    return y, tape


def backward(tape: Tape, dy) -> list:
    """Gradients of <dy, y> with respect to every (W, b) of the forward call."""
    dy = np.asarray(dy, dtype=float).reshape(tape.out.value.shape)
    for v in tape.nodes:
        v.grad = None
    tape.backward(tape.out, dy)
    return [(_g(w), _g(b)) for w, b in tape.pvars]


def _g(v: Var):
    return np.zeros_like(v.value) if v.grad is None else v.grad


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update over a flat dict of arrays.

    Keys iterate in sorted order so the floating point sequence is fixed.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for k in sorted(params):
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(params[k])
        if g.shape != params[k].shape:
            raise ValueError(f"adam_step: shape mismatch for {k}")
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[k] = m
        state.v[k] = v
        out[k] = params[k] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# --- checkpoint I/O ----------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_add(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_arrays(path, arrays: dict, manifest: dict):
    """Write arrays (.npy members) and a JSON manifest to a zip with fixed
    timestamps and member order, so equal inputs give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_add(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for k in sorted(arrays):
            b = io.BytesIO()
            np.lib.format.write_array(b, np.ascontiguousarray(arrays[k]), allow_pickle=False)
            _zip_add(zf, f"{k}.npy", b.getvalue())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_arrays(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, manifest


def save_checkpoint(path, specs: dict, params: dict, extra: dict | None = None):
    """``specs`` maps network name -> MlpSpec, ``params`` name -> [(W, b), ...]."""
    arrays = {}
    for name, layers in params.items():
        for i, (w, b) in enumerate(layers):
            arrays[f"{name}/W{i}"] = w
            arrays[f"{name}/b{i}"] = b
    manifest = {"format": CHECKPOINT_FORMAT,
                "networks": {k: specs[k].to_dict() for k in sorted(specs)},
                "extra": extra or {}}
    save_arrays(path, arrays, manifest)


def load_checkpoint(path):
    arrays, manifest = load_arrays(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an emtwin checkpoint")
    specs = {k: MlpSpec.from_dict(v) for k, v in manifest["networks"].items()}
    params = {}
    for name, spec in specs.items():
        n = len(spec.widths) - 1
        params[name] = [(arrays[f"{name}/W{i}"], arrays[f"{name}/b{i}"]) for i in range(n)]
    return specs, params, manifest.get("extra", {})
