"""Small end-to-end run: dataset, training, held-out NMSE and embedding purity.

Uses the ``smoke`` configuration with more epochs so the loss visibly moves;
takes a few seconds on one core. The desk-scale run behind the acceptance
suite uses the ``desk`` configuration instead (``emtwin train`` with
``--config`` pointing at it).
"""
import dataclasses
import logging

import numpy as np

from emtwin.evaluator import cluster_embeddings, nmse_cdf
from emtwin.fixtures import config_path, load_fixture
from emtwin.trainer import evaluate, gen_dataset, init_twin, load_config, train


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    scene = load_fixture("desk")
    cfg = dataclasses.replace(load_config(config_path("smoke")), epochs=20)
    ds = gen_dataset(scene, cfg)
    twin = init_twin(ds, cfg)
    before = np.median(evaluate(twin, ds))
    twin, history = train(twin, ds, cfg)
    after = evaluate(twin, ds)
    print(f"training loss {history[0]:.3f} -> {history[-1]:.3f}")
    print(f"held-out median NMSE {before:.1f} dB -> {np.median(after):.1f} dB")
    for v, c in nmse_cdf(after):
        print(f"  {v:7.2f} dB  {c:.3f}")
    res = cluster_embeddings(twin, scene.object(1), n_samples=500, k=2, seed=0)
    print(f"table embedding purity {res.purity:.3f} (majority baseline {res.baseline:.3f})")


if __name__ == "__main__":
    main()
