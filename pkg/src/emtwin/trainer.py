"""Dataset generation, the log-NMSE objective, minibatch Adam training and
checkpointing.

Experiment config
-----------------
One YAML document drives dataset generation and training::

    format: emtwin-config/1
    fc: 3.5e9            # carrier (Hz)
    K: 64                # subcarriers
    df: 480.0e3          # subcarrier spacing (Hz)
    n_samples: 2500
    n_train: 2000
    n_test: 500
    batch_size: 16
    epochs: 200
    lr: 1.0e-3
    beta1: 0.9
    beta2: 0.999
    eps: 1.0e-8
    seed: 0
    region: {lo: [x, y, z], hi: [x, y, z], margin: 0.1}
    edits: [{object: 3, position: [x, y, z], quaternion: [w, x, y, z]}]
    trace: {max_depth: 2, n_rays: 4000, ...}     # TraceConfig fields
    twin: {hidden: 128, embed_dim: 48, ...}      # TwinConfig fields

Every key is optional; unknown keys are rejected.

Dataset file
------------
JSON lines. The first line is a header holding the base scene, the channel
grid and the trace settings. Each following line is one sample::

    {"id": 0, "split": "train", "rx": [...], "edits": [...],
     "paths": [...], "h": [[re, im], ...]}

Paths are cached so training never re-traces.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .autodiff import Tape
from .nn import AdamState, adam_step, load_checkpoint, save_checkpoint
from .oracle import DEFAULT_FC, load_materials, oracle_channel, subcarrier_frequencies
from .raytrace import TraceConfig, path_from_dict, path_to_dict, trace_paths
from .scene import Pose, Scene, scene_from_dict, scene_to_dict, transform_scene
from .twin import (
    NMSE_FLOOR, TwinConfig, TwinModel, build_twin, compile_sample, concat_samples, forward_batch,
    log_nmse_tape, param_vars,
)

log = logging.getLogger(__name__)

CONFIG_FORMAT = "emtwin-config/1"
DATASET_FORMAT = "emtwin-dataset/1"
DB_FLOOR = 10 * np.log10(NMSE_FLOOR)
EVAL_CHUNK = 64


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# --- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    fc: float = DEFAULT_FC
    K: int = 64
    df: float = 30e3
    n_samples: int = 2500
    n_train: int = 2000
    n_test: int = 500
    batch_size: int = 16
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    region_lo: tuple = (0.0, 0.0, 0.0)
    region_hi: tuple = (1.0, 1.0, 1.0)
    margin: float = 0.1
    edits: tuple = ()
    trace: TraceConfig = field(default_factory=TraceConfig)
    twin: TwinConfig = field(default_factory=TwinConfig)

    def __post_init__(self):
        if self.K < 1 or self.df <= 0 or self.fc <= 0:
            raise ConfigError("K, df and fc must be positive")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test > self.n_samples:
            raise ConfigError(f"split sizes {self.n_train}+{self.n_test} exceed n_samples={self.n_samples}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.twin.fc != self.fc:
            object.__setattr__(self, "twin", dataclasses.replace(self.twin, fc=self.fc))

    @property
    def freqs(self) -> np.ndarray:
        return subcarrier_frequencies(self.fc, self.K, self.df)

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


_SCALARS = {f.name for f in dataclasses.fields(TrainConfig)} - {"region_lo", "region_hi", "margin", "edits",
                                                                  "trace", "twin"}


_INT_FIELDS = {k: int for k in ("K", "n_samples", "n_train", "n_test", "batch_size", "epochs", "seed")}


def _coerce(cls, d):
    """YAML 1.1 reads 3.5e9 as a string; cast by the dataclass defaults."""
    out = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v, ref = d[f.name], f.default
        if isinstance(ref, bool) or v is None:
            out[f.name] = v
        elif isinstance(ref, int) and ref is not None:
            out[f.name] = int(v)
        elif isinstance(ref, float):
            out[f.name] = float(v)
        else:
            out[f.name] = v
    return out


def _sub(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**_coerce(cls, d))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _edits_from(items):
    out = []
    for i, e in enumerate(items or []):
        if not isinstance(e, dict) or set(e) - {"object", "position", "quaternion"} or "object" not in e:
            raise ConfigError(f"edits[{i}]: expected {{object, position, quaternion}}")
        out.append((int(e["object"]), tuple(float(x) for x in e["position"]),
                    tuple(float(x) for x in e.get("quaternion", (1.0, 0.0, 0.0, 0.0)))))
    return tuple(out)


def config_from_dict(doc) -> TrainConfig:
    doc = dict(doc or {})
    if doc.pop("format", CONFIG_FORMAT) != CONFIG_FORMAT:
        raise ConfigError("unsupported config format")
    allowed = _SCALARS | {"region", "edits", "trace", "twin"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"config: unknown field(s) {sorted(unknown)}")
    kw = {}
    for k in _SCALARS & set(doc):
        try:
            kw[k] = _INT_FIELDS[k](doc[k]) if k in _INT_FIELDS else float(doc[k])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {k} is not numeric") from exc
    if "region" in doc:
        r = doc["region"]
        if not isinstance(r, dict) or set(r) - {"lo", "hi", "margin"}:
            raise ConfigError("region: expected {lo, hi, margin}")
        if "lo" in r:
            kw["region_lo"] = tuple(float(x) for x in r["lo"])
        if "hi" in r:
            kw["region_hi"] = tuple(float(x) for x in r["hi"])
        if "margin" in r:
            kw["margin"] = float(r["margin"])
    kw["edits"] = _edits_from(doc.get("edits"))
    kw["trace"] = _sub(TraceConfig, doc.get("trace", {}), "trace")
    kw["twin"] = _sub(TwinConfig, doc.get("twin", {}), "twin")
    try:
        return TrainConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: TrainConfig) -> dict:
    d = {k: getattr(cfg, k) for k in sorted(_SCALARS)}
    d["format"] = CONFIG_FORMAT
    d["region"] = {"lo": list(cfg.region_lo), "hi": list(cfg.region_hi), "margin": cfg.margin}
    d["edits"] = [{"object": o, "position": list(p), "quaternion": list(q)} for o, p, q in cfg.edits]
    d["trace"] = dataclasses.asdict(cfg.trace)
    d["twin"] = cfg.twin.to_dict()
    return d


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


# --- samples and dataset files ---------------------------------------------------

@dataclass
class Sample:
    id: int
    split: str
    rx: np.ndarray
    edits: tuple
    paths: list
    h: np.ndarray

    def scene(self, base: Scene) -> Scene:
        return apply_edits(base, self.edits).with_rx(self.rx)


@dataclass
class Dataset:
    scene: Scene
    fc: float
    K: int
    df: float
    trace: dict
    samples: list

    @property
    def freqs(self) -> np.ndarray:
        return subcarrier_frequencies(self.fc, self.K, self.df)

    def split(self, name: str | None) -> list:
        if name is None:
            return list(self.samples)
        return [s for s in self.samples if s.split == name]

    @property
    def object_ids(self) -> list:
        return sorted(self.scene.object_ids)


def apply_edits(scene: Scene, edits) -> Scene:
    if not edits:
        return scene
    return transform_scene(scene, [(int(o), Pose(np.asarray(p, float), np.asarray(q, float))) for o, p, q in edits])


def _sample_to_dict(s: Sample) -> dict:
    return {"id": s.id, "split": s.split, "rx": [float(x) for x in s.rx],
            "edits": [[o, list(p), list(q)] for o, p, q in s.edits],
            "paths": [path_to_dict(p) for p in s.paths],
            "h": [[float(z.real), float(z.imag)] for z in s.h]}


def _sample_from_dict(d: dict) -> Sample:
    edits = tuple((int(o), tuple(p), tuple(q)) for o, p, q in d.get("edits", []))
    h = np.array([complex(re, im) for re, im in d["h"]])
    return Sample(int(d["id"]), str(d["split"]), np.array(d["rx"], float), edits,
                  [path_from_dict(p) for p in d["paths"]], h)


def save_dataset(ds: Dataset, path):
    header = {"format": DATASET_FORMAT, "fc": ds.fc, "K": ds.K, "df": ds.df, "trace": ds.trace,
              "scene": scene_to_dict(ds.scene), "n_samples": len(ds.samples)}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in ds.samples:
            fh.write(json.dumps(_sample_to_dict(s), sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: header is not JSON") from exc
        if header.get("format") != DATASET_FORMAT:
            raise DatasetError(f"{path}: not an emtwin dataset")
        samples = [_sample_from_dict(json.loads(line)) for line in fh if line.strip()]
    ds = Dataset(scene_from_dict(header["scene"]), float(header["fc"]), int(header["K"]), float(header["df"]),
                 header.get("trace", {}), samples)
    for s in samples:
        if len(s.h) != ds.K:
            raise DatasetError(f"{path}: sample {s.id} has {len(s.h)} subcarriers, expected {ds.K}")
    return ds


# --- dataset generation ----------------------------------------------------------

def rx_is_free(scene: Scene, p, margin: float) -> bool:
    """False if ``p`` lies inside (or within ``margin`` of) a solid object, or
    outside an enclosing room shrunk by ``margin``."""
    p = np.asarray(p, float)
    for o in scene.objects:
        lo, hi = o.local_bounds()
        q = o.pose.to_local(p)
        if o.enclosure:
            if np.any(q < lo + margin) or np.any(q > hi - margin):
                return False
        elif np.all(q > lo - margin) and np.all(q < hi + margin):
            return False
    return True


_WORKER = {}


def _worker_init(scene, trace_cfg, freqs, fc):
    _WORKER.update(scene=scene, trace=trace_cfg, freqs=freqs, fc=fc, materials=load_materials())


def _simulate(rx):
    w = _WORKER
    sc = w["scene"].with_rx(rx)
    paths = trace_paths(sc, w["trace"])
    return paths, oracle_channel(sc, paths, w["freqs"], w["materials"], w["fc"])


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _split_name(i: int, cfg: TrainConfig) -> str:
    if i < cfg.n_train:
        return "train"
    if i < cfg.n_train + cfg.n_test:
        return "test"
    return "extra"


def gen_dataset(scene: Scene, cfg: TrainConfig, seed: int | None = None, workers: int = 1) -> Dataset:
    """Sample rx positions, trace them and record oracle channels.

    Candidates are drawn from one seeded stream and accepted in order, so the
    result does not depend on ``workers``. Positions inside solids are
    rejected before tracing; positions with no propagation path after it.
    """
    seed = cfg.seed if seed is None else seed
    lo, hi = np.asarray(cfg.region_lo, float), np.asarray(cfg.region_hi, float)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise ConfigError(f"empty sampling region lo={lo.tolist()} hi={hi.tolist()}")
    base = apply_edits(scene, cfg.edits)
    rng = np.random.default_rng(seed)
    freqs = cfg.freqs
    max_draws = 1000 * max(cfg.n_samples, 1)
    draws = 0

    def candidates(n):
        nonlocal draws
        out = []
        while len(out) < n:
            if draws >= max_draws:
                raise ConfigError("sampling region has no free space")
            draws += 1
            p = rng.uniform(lo, hi)
            if rx_is_free(base, p, cfg.margin):
                out.append(p)
        return out

    samples = []
    chunk = max(16, 4 * workers)
    init = (base, cfg.trace, freqs, cfg.fc)
    pool = ProcessPoolExecutor(workers, initializer=_worker_init, initargs=init) if workers > 1 else None
    if pool is None:
        _worker_init(*init)
    try:
        while len(samples) < cfg.n_samples:
            rxs = candidates(min(chunk, cfg.n_samples - len(samples)))
            results = list(pool.map(_simulate, rxs)) if pool else [_simulate(r) for r in rxs]
            for rx, (paths, h) in zip(rxs, results):
                if not np.any(h):
                    continue
                i = len(samples)
                samples.append(Sample(i, _split_name(i, cfg), rx, cfg.edits, paths, h))
            log.info("generated %d/%d samples", len(samples), cfg.n_samples)
    finally:
        if pool is not None:
            pool.shutdown()
    return Dataset(scene, cfg.fc, cfg.K, cfg.df, dataclasses.asdict(cfg.trace), samples)


# --- objective and metrics -------------------------------------------------------

def _nmse(h_true, h_pred) -> float:
    h_true = np.asarray(h_true, complex)
    h_pred = np.asarray(h_pred, complex)
    if h_true.shape != h_pred.shape:
        raise ValueError(f"channel shapes differ: {h_true.shape} vs {h_pred.shape}")
    norm = float(np.sum(np.abs(h_true) ** 2))
    if norm == 0:
        raise ValueError("NMSE undefined for an all-zero ground-truth channel")
    return max(float(np.sum(np.abs(h_true - h_pred) ** 2)) / norm, NMSE_FLOOR)


def loss(h_true, h_pred) -> float:
    """log10 of the normalized error energy, floored at -30."""
    return float(np.log10(_nmse(h_true, h_pred)))


def nmse_db(h_true, h_pred) -> float:
    return 10.0 * loss(h_true, h_pred)


# --- training --------------------------------------------------------------------

def _grads(pv: dict) -> dict:
    g = {}
    for name, layers in pv.items():
        for i, (w, b) in enumerate(layers):
            g[f"{name}/W{i}"] = np.zeros_like(w.value) if w.grad is None else w.grad
            g[f"{name}/b{i}"] = np.zeros_like(b.value) if b.grad is None else b.grad
    return g


def check_registered(twin: TwinModel, samples):
    known = set(twin.object_ids)
    for s in samples:
        for p in s.paths:
            for r in p.interactions:
                if r.object_id not in known:
                    raise KeyError(f"sample {s.id}: object id {r.object_id} is not registered in the twin")


def compile_samples(ds: Dataset, samples, fc: float) -> list:
    scenes = {}
    out = []
    for s in samples:
        key = tuple(s.edits)
        if key not in scenes:
            scenes[key] = apply_edits(ds.scene, s.edits)
        out.append(compile_sample(scenes[key].with_rx(s.rx), s.paths, fc))
    return out


def train_step(twin: TwinModel, batch, h_true, freqs, state: AdamState):
    """One Adam step on the mean log-NMSE of ``batch``; returns per-sample losses."""
    tape = Tape()
    pv = param_vars(tape, twin)
    h_re, h_im = forward_batch(tape, twin, pv, batch, freqs)
    mean, per = log_nmse_tape(tape, h_re, h_im, h_true)
    tape.backward(mean)
    twin.set_flat(adam_step(twin.flat(), _grads(pv), state))
    return per.value.copy()


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(float(v))])


def train(twin: TwinModel, dataset: Dataset, cfg: TrainConfig, out_dir=None, split: str | None = "train",
          compiled=None):
    """Minibatch Adam on the mean log-NMSE.

    Returns ``(twin, history)`` where ``history[e]`` is the mean training loss
    seen during epoch ``e`` (each sample's loss taken at the moment its batch
    was evaluated). With ``out_dir`` a checkpoint and the history CSV are
    rewritten after every epoch.
    """
    samples = dataset.split(split)
    if not samples:
        raise DatasetError(f"no samples in split {split!r}")
    check_registered(twin, samples)
    comp = compiled if compiled is not None else compile_samples(dataset, samples, cfg.fc)
    H = np.stack([s.h for s in samples])
    freqs = dataset.freqs
    rng = np.random.default_rng(cfg.seed)
    state = cfg.adam()
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        per_sample = np.zeros(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            per_sample[idx] = train_step(twin, concat_samples([comp[i] for i in idx]), H[idx], freqs, state)
        # summing in sample order keeps the value independent of the shuffle
        history.append(float(per_sample.mean()))
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history[-1])
        if out is not None:
            save_twin(out / "checkpoint.npz", twin, {"epoch": epoch + 1, "adam_step": state.step})
            write_history(out / "history.csv", history)
    return twin, history


def predict_batch(twin: TwinModel, compiled: list, freqs) -> np.ndarray:
    out = []
    for start in range(0, len(compiled), EVAL_CHUNK):
        batch = concat_samples(compiled[start:start + EVAL_CHUNK])
        tape = Tape()
        h_re, h_im = forward_batch(tape, twin, param_vars(tape, twin), batch, freqs)
        out.append(h_re.value + 1j * h_im.value)
    return np.concatenate(out) if out else np.zeros((0, len(freqs)), complex)


def evaluate(twin: TwinModel, dataset: Dataset, split: str | None = "test", compiled=None) -> list:
    """Per-sample NMSE in dB, ordered as the samples of ``split``."""
    samples = dataset.split(split)
    check_registered(twin, samples)
    comp = compiled if compiled is not None else compile_samples(dataset, samples, twin.config.fc)
    H = predict_batch(twin, comp, dataset.freqs)
    return [nmse_db(s.h, h) for s, h in zip(samples, H)]


def write_report(path, samples, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "nmse_db"])
        for s, v in zip(samples, values):
            w.writerow([s.id, repr(float(v))])


# --- twin checkpoints ------------------------------------------------------------

def save_twin(path, twin: TwinModel, extra: dict | None = None):
    meta = {"twin_config": twin.config.to_dict(),
            "objects": {str(o): f"obj/{o}" for o in twin.object_ids}}
    meta.update(extra or {})
    save_checkpoint(path, twin.specs, twin.params, meta)


def load_twin(path) -> TwinModel:
    specs, params, extra = load_checkpoint(path)
    if "twin_config" not in extra:
        raise ValueError(f"{path}: checkpoint has no twin manifest")
    return TwinModel(TwinConfig(**extra["twin_config"]), specs, params)


def init_twin(dataset: Dataset, cfg: TrainConfig) -> TwinModel:
    return build_twin(dataset.object_ids, cfg.twin, seed=cfg.seed)
