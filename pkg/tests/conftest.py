import numpy as np
import pytest

from agssl import graphs


def path_graph(n, n_classes=2, d=2):
    """Path 0-1-...-(n-1) with arbitrary features/labels/splits."""
    edges = [(i, i + 1) for i in range(n - 1)]
    feats = np.arange(n * d, dtype=np.float64).reshape(n, d)
    labels = np.arange(n) % n_classes
    splits = {"train": [0], "val": [1] if n > 1 else [], "test": list(range(2, n))}
    return graphs.build_graph(n, edges, feats, labels, n_classes, splits)


def small_sbm(seed=0, sizes=(4, 4), p_in=0.9, p_out=0.2, d=3, sigma=0.5):
    means = np.zeros((len(sizes), d))
    for c in range(len(sizes)):
        means[c, c % d] = 1.0
    spec = graphs.SbmSpec(
        blocks=tuple((s, c) for c, s in enumerate(sizes)),
        p_in=p_in, p_out=p_out, means=means, sigma=sigma, seed=seed,
        rates=(0.25, 0.25, 0.5),
    )
    return graphs.gen_sbm(spec)


@pytest.fixture
def sbm8():
    return small_sbm()
