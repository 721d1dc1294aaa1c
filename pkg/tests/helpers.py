import functools
import os
import shutil
import tempfile
from collections import namedtuple

import numpy as np

from cloudfuse.data import ImageStack, load_manifest
from cloudfuse.fusion import TrainConfig, train_fusion
from cloudfuse.synth import MANIFEST_NAME, SceneRecipe, generate_dataset


GOLDEN_DIR = os.path.join(os.path.dirname(os.path.realpath(__file__)), "golden")
RECORD_GOLDEN_ENV = "CLOUDFUSE_RECORD_GOLDEN"


def check_golden(testcase, name, blob, golden_dir=None):
    """
    Compare `blob` with tests/golden/<name>. A missing golden file fails the test unless
    $CLOUDFUSE_RECORD_GOLDEN is set (`tox -e golden`), in which case `blob` is recorded.
    """
    path = os.path.join(golden_dir or GOLDEN_DIR, name)
    if not os.path.exists(path):
        if not os.environ.get(RECORD_GOLDEN_ENV):
            testcase.fail("Golden file %s is missing; record it with `tox -e golden`" % name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as f:
            f.write(blob)
    with open(path, "rb") as f:
        testcase.assertEqual(f.read(), blob, "%s differs from its golden file" % name)


def random_stack(seed, k=3, size=8, n_classes=3, location_id=None):
    rng = np.random.default_rng(seed)
    return ImageStack(
        location_id or "loc%04d" % seed,
        rng.random((k, 3, size, size)).astype(np.float32),
        rng.integers(0, n_classes, (size, size)).astype(np.int64),
        (rng.random((k, size, size)) < 0.3).astype(np.uint8),
        tuple(0.3 for _ in range(k)),
    )


DeskRun = namedtuple("DeskRun", ["quality_net", "losses", "train", "held_out", "labelled"])


@functools.lru_cache(maxsize=None)
def desk_run():
    """
    The desk-scale experiment shared by the slow tests: 96 synthetic locations, fusion
    trained on the first 64, 16 held out for evaluation and 16 kept as the labelled pool
    for calibration and fine-tuning.
    """
    tmp = tempfile.mkdtemp()
    try:
        generate_dataset(SceneRecipe(), 96, tmp)
        stacks = load_manifest(os.path.join(tmp, MANIFEST_NAME)).stacks()
    finally:
        shutil.rmtree(tmp)
    result = train_fusion(stacks[:64], TrainConfig.desk())
    return DeskRun(result.quality_net, [loss for _, loss in result.losses], stacks[:64],
                   stacks[64:80], stacks[80:96])
