import numpy as np
import pytest

from milgraph.bags import Bag, Instance


def make_bag(rng, size=None, dim=4, gridded=False, label=None, bag_id="b"):
    """Random bag; gridded bags get unique grid coordinates."""
    size = size if size is not None else int(rng.integers(2, 9))
    feats = rng.normal(size=(size, dim))
    positions = None
    if gridded:
        cells = [(r, c) for r in range(4) for c in range(4)]
        picks = rng.choice(len(cells), size=size, replace=False)
        positions = [cells[i] for i in picks]
    instances = tuple(
        Instance(features=feats[k],
                 grid_pos=positions[k] if gridded else None)
        for k in range(size)
    )
    return Bag(id=bag_id, label=int(label if label is not None else rng.integers(2)),
               instances=instances)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
