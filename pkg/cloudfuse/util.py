import hashlib
import logging

import numpy as np


def _getLogger(name):
    """
    Retrieve a logger instance under the package namespace. Handlers are left to the
    application; the CLI configures them.
    """
    return logging.getLogger("cloudfuse.%s" % name)


def derive_rng(*keys):
    """
    Build a numpy Generator from a tuple of non-negative integer keys, e.g.
    (seed, epoch, location_index). Independent of call order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def sha256_file(path, chunk_size=1 << 16):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()
