"""Named RNG streams derived from one root seed.

Every source of randomness in a run (dataset split, augmentation sampling,
parameter init, data ordering, ...) draws from its own named stream, so
toggling one concern never perturbs the draws of another. Stream seeds are
derived from ``sha256(f"{root_seed}:{name}")``, which is stable across
processes and Python versions (unlike ``hash``).
"""

import hashlib

import numpy as np
import torch


def stream_seed(root_seed: int, name: str) -> int:
    """Derive a 63-bit seed for the stream ``name`` from ``root_seed``."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


class SeedStreams:
    """Factory for per-concern generators, all derived from one root seed.

    Generators are cached per name, so repeated lookups within a run keep
    consuming the same stream.
    """

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)
        self._torch: dict[str, torch.Generator] = {}
        self._numpy: dict[str, np.random.Generator] = {}

    def torch_gen(self, name: str) -> torch.Generator:
        if name not in self._torch:
            gen = torch.Generator()
            gen.manual_seed(stream_seed(self.root_seed, name))
            self._torch[name] = gen
        return self._torch[name]

    def numpy_gen(self, name: str) -> np.random.Generator:
        if name not in self._numpy:
            self._numpy[name] = np.random.default_rng(
                stream_seed(self.root_seed, name)
            )
        return self._numpy[name]
