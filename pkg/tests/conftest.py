import sys

import numpy as np
import pytest

from encore_bench.dataset import generate_synthetic_corpus, random_scripts
from encore_bench.geometry import Corpus, ImageGeometry, TrajectorySample


def make_sample(obs, fut, walking=None, fut_walking=None, ego=None, fut_ego=None,
                geometry=(1920, 1080), sample_id="s0"):
    obs = np.asarray(obs, dtype=np.float64)
    fut = np.asarray(fut, dtype=np.float64)
    o, tau = len(obs), len(fut)
    walking = np.ones(o, bool) if walking is None else np.asarray(walking, bool)
    fut_walking = np.ones(tau, bool) if fut_walking is None else np.asarray(fut_walking, bool)
    ego = np.zeros((o, 6)) if ego is None else np.asarray(ego, dtype=np.float64)
    fut_ego = np.zeros((tau, 6)) if fut_ego is None else np.asarray(fut_ego, dtype=np.float64)
    return TrajectorySample(
        sample_id=sample_id, video_id="v", ped_id=sample_id, obs_boxes=obs, fut_boxes=fut,
        obs_walking=walking, fut_walking=fut_walking, obs_ego=ego, fut_ego=fut_ego,
        geometry=ImageGeometry(*geometry),
    )


def random_visible_samples(n, o=15, tau=45, seed=0, geometry=(1920, 1080), margin=10.0):
    """Fully visible random tracks well inside the image."""
    rng = np.random.default_rng(seed)
    out = []
    t = np.arange(o + tau)[:, None]
    for i in range(n):
        while True:
            # keep every box clear of the border by ``margin`` so no edge rule applies
            h = rng.uniform(30, 300)
            w = h * rng.uniform(0.25, 0.45)
            x = rng.uniform(100, geometry[0] - 400)
            y = rng.uniform(50, geometry[1] - 400)
            drift = rng.normal(0, 2, size=2)
            boxes = np.concatenate([[x, y] + t * drift, [x + w, y + h] + t * drift], axis=1)
            if boxes[:, :2].min() > margin and np.all(boxes[:, 2:] < np.array(geometry) - margin):
                break
        out.append(make_sample(boxes[:o], boxes[o:], geometry=geometry, sample_id=f"r{i}"))
    return out


def corpus_of(samples, ratio=0.34, fps=30.0):
    return Corpus(samples=tuple(samples), fps=fps, visible_aspect_ratio=ratio)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(random_scripts(40, seed=7))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
