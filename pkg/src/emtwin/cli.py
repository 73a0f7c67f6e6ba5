"""Command-line entry points.

    emtwin scene validate FILE
    emtwin dataset gen --scene S --config C --out D.jsonl [--seed N]
    emtwin train --dataset D.jsonl --config C --out DIR [--seed N]
    emtwin eval --twin T.npz --dataset D.jsonl --report R.csv [--split test] [--cdf F.csv]
    emtwin grid --twin T.npz --scene S --spec G.yaml --out M.csv
    emtwin cluster --twin T.npz --scene S --object ID --k 2 --out P.csv [--n 2000] [--seed 0]
    emtwin predict --twin T.npz --scene S --rx x,y,z --out H.csv [--config C]

Every command exits 0 on success and 1 with a one-line diagnostic on error.
``--workers`` sets the process count for tracing-heavy steps; results do not
depend on it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluator import (
    cluster_embeddings, gain_error_grid, load_grid_spec, nmse_cdf, write_cdf, write_cluster_report, write_grid,
)
from .raytrace import trace_paths
from .scene import load_scene
from .trainer import (
    TrainConfig, default_workers, evaluate, gen_dataset, init_twin, load_config, load_dataset, load_twin,
    save_dataset, save_twin, train, write_history, write_report,
)
from .twin import predict_channel

log = logging.getLogger("emtwin")


def _config(path, seed=None) -> TrainConfig:
    cfg = load_config(path) if path else TrainConfig()
    return dataclasses.replace(cfg, seed=seed) if seed is not None else cfg


def cmd_scene_validate(a):
    sc = load_scene(a.file)
    print(f"ok: {len(sc.objects)} objects, {sum(len(o.surfaces) for o in sc.objects)} surfaces, "
          f"{sum(len(o.wedges) for o in sc.objects)} wedges")


def cmd_dataset_gen(a):
    cfg = _config(a.config, a.seed)
    ds = gen_dataset(load_scene(a.scene), cfg, workers=a.workers)
    save_dataset(ds, a.out)
    print(f"wrote {len(ds.samples)} samples to {a.out}")


def cmd_train(a):
    cfg = _config(a.config, a.seed)
    ds = load_dataset(a.dataset)
    if ds.K != cfg.K or ds.df != cfg.df or ds.fc != cfg.fc:
        raise ValueError("dataset channel grid (fc, K, df) differs from the config")
    out = Path(a.out)
    twin, history = train(init_twin(ds, cfg), ds, cfg, out_dir=out)
    save_twin(out / "twin.npz", twin, {"epochs": cfg.epochs})
    write_history(out / "history.csv", history)
    print(f"trained {cfg.epochs} epochs; final loss {history[-1] if history else float('nan'):.4f}")


def cmd_eval(a):
    ds = load_dataset(a.dataset)
    twin = load_twin(a.twin)
    split = None if a.split == "all" else a.split
    values = evaluate(twin, ds, split=split)
    if not values:
        raise ValueError(f"no samples in split {a.split!r}")
    write_report(a.report, ds.split(split), values)
    if a.cdf:
        write_cdf(a.cdf, nmse_cdf(values))
    print(f"{len(values)} samples: median {np.median(values):.2f} dB, "
          f"90th percentile {np.percentile(values, 90):.2f} dB")


def cmd_grid(a):
    m, xs, ys = gain_error_grid(load_twin(a.twin), load_scene(a.scene), load_grid_spec(a.spec))
    write_grid(a.out, m, xs, ys)
    ok = m[~np.isnan(m)]
    print(f"{ok.size}/{m.size} reachable points; median error {np.median(ok) if ok.size else float('nan'):.3f} dB")


def cmd_cluster(a):
    twin = load_twin(a.twin)
    obj = load_scene(a.scene).object(a.object)
    res = cluster_embeddings(twin, obj, a.n, a.k, a.seed)
    write_cluster_report(a.out, res, {"object": a.object, "k": a.k, "seed": a.seed})
    print(f"purity {res.purity:.4f} (majority baseline {res.baseline:.4f})")


def cmd_predict(a):
    cfg = _config(a.config)
    twin = load_twin(a.twin)
    try:
        rx = [float(v) for v in a.rx.split(",")]
    except ValueError:
        rx = []
    if len(rx) != 3:
        raise ValueError(f"--rx expects x,y,z, got {a.rx!r}")
    sc = load_scene(a.scene).with_rx(rx)
    paths = trace_paths(sc, cfg.trace)
    h = predict_channel(twin, sc, paths, cfg.freqs)
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "freq_hz", "re", "im"])
        for k, (f, z) in enumerate(zip(cfg.freqs, h)):
            w.writerow([k, repr(float(f)), repr(float(z.real)), repr(float(z.imag))])
    print(f"{len(paths)} paths; wrote {len(h)} subcarriers to {a.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emtwin", description="Learnable EM digital twin of an indoor scene.")
    p.add_argument("--version", action="version", version=f"emtwin {__version__}")
    p.add_argument("--workers", type=int, default=default_workers(),
                   help="worker processes for tracing (default: available CPUs)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scene", help="scene file utilities").add_subparsers(dest="action", required=True)
    v = sc.add_parser("validate", help="parse and validate a scene file")
    v.add_argument("file")
    v.set_defaults(func=cmd_scene_validate)

    ds = sub.add_parser("dataset", help="dataset utilities").add_subparsers(dest="action", required=True)
    g = ds.add_parser("gen", help="sample receivers, trace and record oracle channels")
    g.add_argument("--scene", required=True)
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="override the config seed")
    g.set_defaults(func=cmd_dataset_gen)

    t = sub.add_parser("train", help="train a twin on the training split")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-sample NMSE report")
    e.add_argument("--twin", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", default="test", help="train, test, extra or all (default: test)")
    e.add_argument("--cdf", default=None, help="also write the empirical CDF here")
    e.set_defaults(func=cmd_eval)

    gr = sub.add_parser("grid", help="channel-gain error over a receiver grid")
    gr.add_argument("--twin", required=True)
    gr.add_argument("--scene", required=True)
    gr.add_argument("--spec", required=True)
    gr.add_argument("--out", required=True)
    gr.set_defaults(func=cmd_grid)

    c = sub.add_parser("cluster", help="k-means on embeddings sampled over one object")
    c.add_argument("--twin", required=True)
    c.add_argument("--scene", required=True)
    c.add_argument("--object", type=int, required=True)
    c.add_argument("--k", type=int, default=2)
    c.add_argument("--n", type=int, default=2000, help="surface samples")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    pr = sub.add_parser("predict", help="predicted channel at one receiver position")
    pr.add_argument("--twin", required=True)
    pr.add_argument("--scene", required=True)
    pr.add_argument("--rx", required=True, help="x,y,z in metres")
    pr.add_argument("--out", required=True)
    pr.add_argument("--config", default=None, help="channel grid and trace settings")
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if a.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        a.func(a)
    except Exception as exc:  # report any failure as a diagnostic, never a silent exit
        print(f"emtwin: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
