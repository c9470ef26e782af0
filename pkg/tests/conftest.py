import numpy as np
import pytest

from gnnlab.arch import NetworkSpec, assemble_network, precompute_inputs
from gnnlab.molgraph import GeneratorConfig, generate_synthetic_mix, make_molgraph
from gnnlab.pse import PSEConfig
from gnnlab.train import heads_for_mix

ORDERS = ("single", "double", "triple", "aromatic")
SYMBOLS = ("C", "N", "O", "S")


@pytest.fixture(scope="session")
def small_mix():
    return generate_synthetic_mix(GeneratorConfig(n_molecules=24, seed=11))


@pytest.fixture(scope="session")
def small_inputs(small_mix):
    return precompute_inputs(small_mix, PSEConfig())


def build_model(mix, arch_kind, width=8, depth=2, seed=0, **kwargs):
    kwargs.setdefault("n_heads", 2)
    spec = NetworkSpec(arch_kind=arch_kind, width=width, depth=depth,
                       task_heads=heads_for_mix(mix), **kwargs)
    return assemble_network(spec, seed)


def random_molgraph(rng: np.random.Generator, min_nodes=2, max_nodes=8,
                    edge_prob=0.35, connected=False, smiles_safe=False):
    """Arbitrary labeled graph; not restricted to chemically plausible ones.

    smiles_safe keeps ring-forming edges single-bonded, the only cycles the
    SMILES subset can express.
    """
    n = int(rng.integers(min_nodes, max_nodes + 1))
    symbols = [SYMBOLS[i] for i in rng.integers(0, len(SYMBOLS), size=n)]
    edges, orders = [], []
    if connected:
        # spanning chain guarantees one component
        for u in range(n - 1):
            edges.append((u, u + 1))
            orders.append(ORDERS[int(rng.integers(0, len(ORDERS)))])
    for u in range(n):
        for v in range(u + 1, n):
            if (u, v) not in edges and rng.random() < edge_prob:
                edges.append((u, v))
                orders.append("single" if smiles_safe
                              else ORDERS[int(rng.integers(0, len(ORDERS)))])
    return make_molgraph(symbols, edges, orders)
