"""Named random substreams derived from one root seed.

Every random draw in the toolkit flows from the root experiment seed through
a (stream, index...) key, so any single component can be reproduced in
isolation.
"""

import numpy as np

STREAM_ENV = 0
STREAM_POLICY = 1
STREAM_INIT = 2
STREAM_TRUTH = 3
STREAM_ORACLE = 4
STREAM_WINDOW = 5


def substream_seed(root: int, *key: int) -> int:
    """Stable derived seed for the (root, key) substream."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
