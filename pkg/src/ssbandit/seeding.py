"""Master-seed splitting.

One integer seed fans out into independent generators so that, e.g., the
image order is the same for every solver run under that seed.
"""

import numpy as np

STREAMS = ("env", "net_init", "tie_break", "minibatch")


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}
