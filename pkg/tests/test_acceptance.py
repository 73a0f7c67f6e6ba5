"""Acceptance criteria 1-9.

Each test records one ``criterion N: PASS|FAIL`` line with the measured
values; the lines are printed in the terminal summary. Criteria 6-8 share one
desk-scale training run (24-28 minutes on a single core). Set
``EMTWIN_ACCEPTANCE_DIR`` to keep its artifacts and reuse them on later runs.
"""
import itertools
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import yaml

from emtwin.autodiff import Tape
from emtwin.cli import main
from emtwin.evaluator import cluster_embeddings
from emtwin.fixtures import config_path, fixture_path, load_fixture
from emtwin.oracle import Material, fresnel_coeffs, oracle_channel, subcarrier_frequencies
from emtwin.polarization import PolarizedField, PolFrame, convert_basis
from emtwin.raytrace import TraceConfig, trace_paths
from emtwin.scene import Scene
from emtwin.trainer import (
    TrainConfig, compile_samples, default_workers, evaluate, gen_dataset, init_twin, load_config, load_dataset,
    load_twin, loss, predict_batch, save_dataset, save_twin, train,
)
from emtwin.twin import TwinConfig, build_twin, compile_sample, forward_batch, log_nmse_tape, param_vars

from conftest import ACCEPTANCE, random_unit

# pinned tolerances
ROUND_TRIP_TOL = 1e-12
ROUND_TRIP_CASES = 10_000
BREWSTER_TOL = 1e-10
PEC_MIN = 0.999
IMAGE_TOL = 1e-6
FD_STEP = 1e-4
FD_REL_TOL = 1e-4
FD_FRACTION = 0.99
OVERFIT_DROP = 10.0
OVERFIT_STEPS = 500
DESK_MEDIAN_DB = -15.0
DESK_P90_DB = -10.0
MOVED_DEGRADE_DB = 6.0
MOVED_MEDIAN_DB = -9.0
PURITY_MIN = 0.9
# "approximately the baseline" for the untrained twin
BASELINE_SLACK = 0.05


@contextmanager
def criterion(n, title):
    """Record a PASS/FAIL line for criterion ``n``; ``rec['detail']`` carries the measurements."""
    rec = {"detail": ""}
    try:
        yield rec
    except BaseException as exc:
        why = "" if isinstance(exc, AssertionError) else f" [{type(exc).__name__}: {exc}]"
        ACCEPTANCE[n] = f"criterion {n} ({title}): FAIL  {rec['detail']}{why}"
        raise
    ACCEPTANCE[n] = f"criterion {n} ({title}): PASS  {rec['detail']}"


# --- 1 -------------------------------------------------------------------------

def _random_frame(rng, d):
    a = random_unit(rng)
    e_s = np.cross(d, a)
    e_s /= np.linalg.norm(e_s)
    return PolFrame(e_s, np.cross(d, e_s), d)


def test_c1_polarization_round_trip():
    with criterion(1, "polarization round trip") as rec:
        rng = np.random.default_rng(0)
        cases = []
        for _ in range(ROUND_TRIP_CASES):
            d = random_unit(rng)
            a, b = _random_frame(rng, d), _random_frame(rng, d)
            amps = rng.normal(size=2) + 1j * rng.normal(size=2)
            cases.append((PolarizedField(amps[0], amps[1], a), b))
        t0 = time.perf_counter()
        worst = 0.0
        for E, b in cases:
            back = convert_basis(convert_basis(E, b), E.frame)
            worst = max(worst, float(np.max(np.abs(back.amps - E.amps))))
        dt = time.perf_counter() - t0
        rec["detail"] = f"max error {worst:.2e} (tol {ROUND_TRIP_TOL:g}), {ROUND_TRIP_CASES} cases in {dt:.2f} s"
        assert worst < ROUND_TRIP_TOL and dt < 1.0


# --- 2 -------------------------------------------------------------------------

def test_c2_fresnel():
    with criterion(2, "Fresnel checks") as rec:
        t0 = time.perf_counter()
        brewster = []
        for eps in (2.0, 3.0, 4.0, 6.5, 10.0):
            _, g_tm = fresnel_coeffs(Material(0, "lossless", eps, 0.0, 0.0, 1.0), np.arctan(np.sqrt(eps)))
            brewster.append(abs(g_tm))
        # near-PEC conductor on a 0.1 degree grid including grazing; any finite sigma has a
        # pseudo-Brewster dip in |G_TM| just below 90 degrees, so this half is expected to fail
        theta = np.radians(np.linspace(0.0, 90.0, 901))
        g_te, g_tm = fresnel_coeffs(Material(1, "near-pec", 1.0, 1e9, 0.0, 1.0), theta)
        mag = np.minimum(np.abs(g_te), np.abs(g_tm))
        pec = mag.min()
        dt = time.perf_counter() - t0
        bad = np.degrees(theta[mag <= PEC_MIN])
        where = f", below {PEC_MIN} only at {bad.min():.1f}-{bad.max():.1f} deg" if bad.size else ""
        rec["detail"] = (f"max Brewster |G_TM| {max(brewster):.1e} (tol {BREWSTER_TOL:g}), "
                         f"min near-PEC |G| {pec:.6f} at {np.degrees(theta[mag.argmin()]):.1f} deg "
                         f"(min {PEC_MIN}){where}, {dt:.3f} s")
        assert max(brewster) < BREWSTER_TOL and pec > PEC_MIN and dt < 1.0


# --- 3 -------------------------------------------------------------------------

def _planes(scene):
    """(unit normal, offset) of every distinct plane carrying a triangle."""
    out = []
    for tri in np.concatenate([obj.world_triangles() for obj in scene.objects]):
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        n /= np.linalg.norm(n)
        n = n if n[np.argmax(np.abs(n))] > 0 else -n
        c = float(n @ tri[0])
        if not any(np.allclose(n, m) and abs(c - k) < 1e-9 for m, k in out):
            out.append((n, c))
    return out


def _image_points(scene, order):
    """Specular point sequences from mirrored sources, bounded by the scene's box."""
    verts = np.concatenate([obj.world_triangles() for obj in scene.objects]).reshape(-1, 3)
    lo, hi = verts.min(axis=0) - 1e-9, verts.max(axis=0) + 1e-9
    planes = _planes(scene)
    found = []
    for seq in itertools.product(range(len(planes)), repeat=order):
        if any(a == b for a, b in zip(seq, seq[1:])):
            continue
        imgs = [scene.tx.position]
        for i in seq:
            n, c = planes[i]
            imgs.append(imgs[-1] - 2 * (imgs[-1] @ n - c) * n)
        target, pts = scene.rx.position, []
        for k in range(order - 1, -1, -1):
            n, c = planes[seq[k]]
            src = imgs[k + 1]
            den = (target - src) @ n
            u = (c - src @ n) / den if den else -1.0
            p = src + u * (target - src)
            if not 0 < u < 1 or np.any(p < lo) or np.any(p > hi):
                break
            pts.append(p)
            target = p
        else:
            found.append(np.array(pts[::-1]))
    return found


def _max_mismatch(traced, expected):
    if len(traced) != len(expected):
        return np.inf
    worst, left = 0.0, list(traced)
    for pts in expected:
        errs = [np.abs(t - pts).max() for t in left]
        j = int(np.argmin(errs))
        worst = max(worst, errs[j])
        left.pop(j)
    return worst


def test_c3_image_method():
    with criterion(3, "image-method equivalence") as rec:
        t0 = time.perf_counter()
        specular = dict(scattering=False, diffraction=False, n_rays=20000)
        results = []
        for name, depth in (("floor", 1), ("shoebox", 1), ("shoebox", 2)):
            scene = load_fixture(name)
            paths = trace_paths(scene, TraceConfig(max_depth=depth, **specular))
            census = sorted(p.kinds for p in paths)
            expected = {"": 1}
            err = 0.0
            for order in range(1, depth + 1):
                pts = _image_points(scene, order)
                expected["R" * order] = len(pts)
                err = max(err, _max_mismatch([p.vertices[1:-1] for p in paths if p.kinds == "R" * order], pts))
            results.append((name, depth, census == sorted(k for k, v in expected.items() for _ in range(v)), err,
                            len(paths)))
        dt = time.perf_counter() - t0
        shoebox1 = next(r for r in results if r[:2] == ("shoebox", 1))
        rec["detail"] = ", ".join(f"{n} depth {d}: {c} paths census {'ok' if ok else 'WRONG'} max point error {e:.1e} m"
                                  for n, d, ok, e, c in results) + f"; {dt:.1f} s"
        assert all(ok and e < IMAGE_TOL for _, _, ok, e, _ in results)
        assert shoebox1[4] == 7
        assert dt < 5.0


# --- 4 -------------------------------------------------------------------------

def _toy():
    desk = load_fixture("desk")
    scene = Scene(desk.tx, desk.rx, [desk.object(0), desk.object(3)]).with_rx((4.96, 1.85, 0.35))
    paths = trace_paths(scene, TraceConfig(max_depth=1, n_rays=4000, seed=0))
    pick = [next(p for p in paths if p.kinds == k and p.interactions[0].object_id == o)
            for k, o in (("R", 0), ("D", 3), ("S", 3))]
    return scene, pick


def test_c4_gradient_integrity():
    with criterion(4, "gradient integrity") as rec:
        t0 = time.perf_counter()
        scene, paths = _toy()
        freqs = subcarrier_frequencies(3.5e9, 16, 480e3)
        h_true = oracle_channel(scene, paths, freqs)
        twin = build_twin([0, 3], TwinConfig(hidden=8), seed=0)
        batch = compile_sample(scene, paths, 3.5e9)

        def objective(tw, grads=False):
            tape = Tape()
            pv = param_vars(tape, tw)
            mean, _ = log_nmse_tape(tape, *forward_batch(tape, tw, pv, batch, freqs), h_true[None])
            if not grads:
                return float(mean.value)
            tape.backward(mean)
            return {f"{n}/{t}{i}": (v.grad if v.grad is not None else np.zeros_like(v.value))
                    for n, layers in pv.items() for i, wb in enumerate(layers) for t, v in zip("Wb", wb)}

        grads = objective(twin, grads=True)
        flat = twin.flat()
        probe = twin.copy()
        ok = total = 0
        for name, arr in flat.items():
            for idx in np.ndindex(arr.shape):
                vals = []
                for step in (FD_STEP, -FD_STEP):
                    pert = dict(flat)
                    pert[name] = arr.copy()
                    pert[name][idx] += step
                    probe.set_flat(pert)
                    vals.append(objective(probe))
                fd = (vals[0] - vals[1]) / (2 * FD_STEP)
                a = grads[name][idx]
                scale = max(abs(a), abs(fd))
                # parameters behind inactive ReLUs have exactly zero gradient both ways
                ok += abs(a - fd) <= FD_REL_TOL * scale or scale < 1e-10
                total += 1
        dt = time.perf_counter() - t0
        frac = ok / total
        rec["detail"] = (f"{ok}/{total} parameters within {FD_REL_TOL:g} relative ({frac:.2%}, need "
                         f"{FD_FRACTION:.0%}), paths {[p.kinds for p in paths]}, {dt:.1f} s")
        assert frac >= FD_FRACTION and dt < 60.0


# --- 5 -------------------------------------------------------------------------

def test_c5_one_sample_overfit():
    # expected to fail: phase heads near the 0/2pi seam saturate and the fit stalls near -4
    with criterion(5, "one-sample overfit") as rec:
        t0 = time.perf_counter()
        cfg = TrainConfig(K=64, df=480e3, n_samples=1, n_train=1, n_test=0, batch_size=1, epochs=OVERFIT_STEPS,
                          lr=1e-3, seed=0, region_lo=(0.5, 0.5, 0.5), region_hi=(5.5, 3.5, 2.5),
                          trace=TraceConfig(max_depth=2, n_rays=2000, seed=0, max_scatter_prefix=0))
        ds = gen_dataset(load_fixture("shoebox"), cfg)
        twin, history = train(init_twin(ds, cfg), ds, cfg)
        s = ds.samples[0]
        final = loss(s.h, predict_batch(twin, compile_samples(ds, ds.samples, cfg.fc), ds.freqs)[0])
        drop = history[0] - final
        dt = time.perf_counter() - t0
        rec["detail"] = (f"loss {history[0]:.3f} -> {final:.3f} after {OVERFIT_STEPS} steps "
                         f"(best seen {min(history):.3f}), drop {drop:.2f} (need {OVERFIT_DROP:g}), "
                         f"{len(s.paths)} paths, {dt:.1f} s")
        assert drop >= OVERFIT_DROP and dt < 120.0


# --- 6, 7, 8 -------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Desk-scale dataset, moved-object dataset and trained twin (reused from EMTWIN_ACCEPTANCE_DIR)."""
    keep = os.environ.get("EMTWIN_ACCEPTANCE_DIR")
    d = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    d.mkdir(parents=True, exist_ok=True)
    scene = load_fixture("desk")
    cfg = load_config(config_path("desk"))
    workers = default_workers()
    timing = {}
    t0 = time.perf_counter()
    if not (d / "desk.jsonl").is_file():
        save_dataset(gen_dataset(scene, cfg, workers=workers), d / "desk.jsonl")
    if not (d / "moved.jsonl").is_file():
        save_dataset(gen_dataset(scene, load_config(config_path("desk_moved")), workers=workers),
                     d / "moved.jsonl")
    ds = load_dataset(d / "desk.jsonl")
    if not (d / "twin.npz").is_file():
        twin, _ = train(init_twin(ds, cfg), ds, cfg, out_dir=d / "train")
        save_twin(d / "twin.npz", twin, {"epochs": cfg.epochs})
        timing["pipeline"] = time.perf_counter() - t0
    return {"dir": d, "scene": scene, "cfg": cfg, "ds": ds, "moved": load_dataset(d / "moved.jsonl"),
            "twin": load_twin(d / "twin.npz"), "timing": timing, "workers": workers}


@pytest.fixture(scope="session")
def desk_scores(desk_run):
    return np.array(evaluate(desk_run["twin"], desk_run["ds"]))


def test_c6_desk_learning(desk_run, desk_scores):
    with criterion(6, "desk-scale learning") as rec:
        med, p90 = np.median(desk_scores), np.percentile(desk_scores, 90)
        t = desk_run["timing"].get("pipeline")
        took = f"pipeline {t / 60:.1f} min on {desk_run['workers']} worker(s)" if t else "reused artifacts"
        rec["detail"] = (f"held-out NMSE median {med:.2f} dB (max {DESK_MEDIAN_DB:g}), p90 {p90:.2f} dB "
                         f"(max {DESK_P90_DB:g}), n={len(desk_scores)}, {took}")
        assert len(desk_scores) == 500
        assert med <= DESK_MEDIAN_DB and p90 <= DESK_P90_DB
        if t is not None:
            assert t < 30 * 60


def test_c7_moved_object(desk_run, desk_scores):
    with criterion(7, "moved-object generalization") as rec:
        moved = desk_run["moved"]
        moved_scene = moved.samples[0].scene(desk_run["scene"])
        shift = max(np.linalg.norm(moved_scene.object(o).pose.position - desk_run["scene"].object(o).pose.position)
                    for o in moved_scene.object_ids)
        vals = np.array(evaluate(desk_run["twin"], moved))
        med, base = np.median(vals), np.median(desk_scores)
        rec["detail"] = (f"moved median {med:.2f} dB (max {MOVED_MEDIAN_DB:g}), degradation {med - base:.2f} dB "
                         f"(max {MOVED_DEGRADE_DB:g}), shift {shift:.2f} m, n={len(vals)}")
        assert shift >= 1.0 and len(vals) == 500
        assert med - base <= MOVED_DEGRADE_DB and med <= MOVED_MEDIAN_DB


def test_c8_embedding_clustering(desk_run):
    # currently fails: the dominant spread of the trained table embedding is spatial, not material
    with criterion(8, "embedding clustering") as rec:
        t0 = time.perf_counter()
        table = desk_run["scene"].object(1)
        trained = cluster_embeddings(desk_run["twin"], table, n_samples=2000, k=2, seed=0)
        fresh = cluster_embeddings(init_twin(desk_run["ds"], desk_run["cfg"]), table, n_samples=2000, k=2, seed=0)
        dt = time.perf_counter() - t0
        rec["detail"] = (f"trained purity {trained.purity:.3f} (min {PURITY_MIN}), untrained {fresh.purity:.3f} vs "
                         f"baseline {fresh.baseline:.3f} (slack {BASELINE_SLACK}), {dt:.1f} s")
        assert trained.purity >= PURITY_MIN
        assert abs(fresh.purity - fresh.baseline) <= BASELINE_SLACK
        assert dt < 60.0


# --- 9 -------------------------------------------------------------------------

def _pipeline(out: Path, cfg_file: Path):
    scene = str(fixture_path("desk"))
    common = ["--workers", "2"]
    assert main(common + ["dataset", "gen", "--scene", scene, "--config", str(cfg_file),
                          "--out", str(out / "ds.jsonl")]) == 0
    assert main(common + ["train", "--dataset", str(out / "ds.jsonl"), "--config", str(cfg_file),
                          "--out", str(out / "train")]) == 0
    assert main(["eval", "--twin", str(out / "train" / "twin.npz"), "--dataset", str(out / "ds.jsonl"),
                 "--report", str(out / "report.csv"), "--cdf", str(out / "cdf.csv")]) == 0


def test_c9_determinism(tmp_path):
    with criterion(9, "determinism") as rec:
        doc = yaml.safe_load(config_path("smoke").read_text())
        doc["epochs"] = 5
        cfg_file = tmp_path / "five.yaml"
        cfg_file.write_text(yaml.safe_dump(doc))
        runs = [tmp_path / "a", tmp_path / "b"]
        for r in runs:
            _pipeline(r, cfg_file)
        files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
        other = sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file())
        differ = [str(f) for f in files if (runs[0] / f).read_bytes() != (runs[1] / f).read_bytes()]
        rec["detail"] = f"{len(files)} artifacts compared, {len(differ)} differ {differ}"
        assert files == other and not differ
        assert len((runs[0] / "train" / "history.csv").read_text().splitlines()) == 6
