"""Counter-based random streams.

Every stream is a Philox generator whose key is the global seed and whose
counter is ``[0, a, b, stream_id]``. Draws advance only the lowest counter
word, so streams for distinct ``(a, b, stream_id)`` never overlap and the
values a pixel sees do not depend on the order pixels are processed in.
"""

import numpy as np

SIMULATION = 0
TIE_BREAK = 1
MONTE_CARLO = 2

_MASK = (1 << 64) - 1


def stream(seed: int, a: int = 0, b: int = 0, stream_id: int = 0) -> np.random.Generator:
    counter = np.array([0, a & _MASK, b & _MASK, stream_id & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK, counter=counter))
