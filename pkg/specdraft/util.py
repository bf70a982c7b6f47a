import hashlib
from typing import Iterable, Tuple

import numpy as np


def derive_seed(root_seed: int, component: str) -> int:
    """
    Derives an independent 63-bit seed for a named component from the root seed.
    Adding a new component never changes the stream of an existing one.
    """
    digest = hashlib.sha256(f"{root_seed}:{component}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def component_rng(root_seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, component))


def arrays_digest(named_arrays: Iterable[Tuple[str, np.ndarray]]) -> str:
    """
    SHA-256 over names, shapes, dtypes and raw bytes, in the order given.
    """
    sha = hashlib.sha256()
    for name, array in named_arrays:
        array = np.ascontiguousarray(array)
        sha.update(name.encode("utf-8"))
        sha.update(str(array.shape).encode("utf-8"))
        sha.update(array.dtype.str.encode("utf-8"))
        sha.update(array.tobytes())
    return sha.hexdigest()
