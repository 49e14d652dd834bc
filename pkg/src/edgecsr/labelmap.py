"""Label -> owner box mappings, referenced by name so every box agrees."""

import numpy as np


def mod_map(labels, nb):
    return (np.asarray(labels, dtype=np.uint64) % np.uint64(nb)).astype(np.int64)


def parity_map(labels, nb):
    """Odd labels on box 0, even labels on box 1."""
    if nb != 2:
        raise ValueError("the parity map needs exactly 2 boxes")
    return (np.uint64(1) - np.asarray(labels, dtype=np.uint64) % np.uint64(2)).astype(np.int64)


LABEL_MAPS = {"mod": mod_map, "parity": parity_map}


def get_label_map(name):
    try:
        return LABEL_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown label map {name!r}; choose from {sorted(LABEL_MAPS)}") from None
