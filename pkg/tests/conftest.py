import numpy as np
import pytest

from matprobe.taxonomy import Taxonomy, load_taxonomy


def make_taxonomy(branching: list[int], level_names: list[str] | None = None) -> Taxonomy:
    """Uniform tree: branching=[3, 3] gives root + 3 mid nodes + 9 leaves."""
    depth = len(branching) + 1
    levels = level_names or [f"l{i}" for i in range(depth)]
    nodes = [{"id": "root", "name": "root", "level": levels[0], "parent": None}]
    frontier = ["root"]
    for li, fan in enumerate(branching, start=1):
        nxt = []
        for parent in frontier:
            for j in range(fan):
                nid = f"{parent}_{j}" if parent != "root" else f"n{j}"
                nodes.append({"id": nid, "name": nid, "level": levels[li], "parent": parent})
                nxt.append(nid)
        frontier = nxt
    return load_taxonomy({"level_names": levels, "nodes": nodes})


@pytest.fixture
def toy_tree():
    return make_taxonomy([3])


@pytest.fixture
def two_level_tree():
    return make_taxonomy([2, 2])


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
