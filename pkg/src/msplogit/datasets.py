"""Bundled example data.

The sea-star predation experiment: a randomized complete block design
with four symbiont treatments (none, crabs, shrimp, both), ten temporal
blocks, and two replicates per block and treatment, for 80 binary
predation outcomes.  One observation is atypical: zero predation in
block 10 under no symbionts.  Analyses conventionally drop it.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .cli import RunConfig, load_csv
from .model import Cluster, ClusteredDataset

__all__ = ["culcita_path", "culcita", "culcita_config", "CULCITA_ATYPICAL_ROW"]

# (block, treatment, replicate) of the atypical observation.
CULCITA_ATYPICAL_ROW = ("10", "none", 2)


def culcita_path() -> str:
    """Filesystem path of the bundled predation CSV."""
    return str(resources.files("msplogit").joinpath("data/culcita.csv"))


def culcita_config(command: str = "fit", **overrides) -> RunConfig:
    """A run configuration for the bundled predation data."""
    settings = dict(
        command=command,
        data=culcita_path(),
        response="predation",
        fixed=["crabs", "shrimp", "both"],
        random=[],
        cluster="block",
        intercept=True,
    )
    settings.update(overrides)
    return RunConfig(**settings)


def culcita(drop_atypical: bool = False) -> ClusteredDataset:
    """The predation data as a clustered dataset (p = 4 with intercept, q = 1).

    With ``drop_atypical`` the block-10 no-symbiont zero response is
    removed, leaving 79 rows.
    """
    config = culcita_config()
    data = load_csv(config.data, config)
    if not drop_atypical:
        return data
    keep = []
    with open(culcita_path(), encoding="utf-8") as handle:
        header = handle.readline().strip().split(",")
        i_block = header.index("block")
        i_treat = header.index("treatment")
        i_rep = header.index("replicate")
        for line in handle:
            cells = line.strip().split(",")
            keep.append(
                (cells[i_block], cells[i_treat], int(cells[i_rep])) != CULCITA_ATYPICAL_ROW
            )
    keep = np.array(keep)
    offs = data.row_offsets
    clusters = []
    for i, c in enumerate(data.clusters):
        mask = keep[offs[i]:offs[i + 1]]
        if mask.any():
            clusters.append(Cluster(c.y[mask], c.X[mask], c.Z[mask]))
    return ClusteredDataset(tuple(clusters))
