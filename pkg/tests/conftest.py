import os

# keep every compute library on one thread: determinism first, and the perf
# test requires single-threaded numbers anyway
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from mmdrfuse import vgg as vggmod


@pytest.fixture(scope="session")
def synthetic_vgg():
    """Random-weight backbone, round-tripped through the blob format once so
    every test sees exactly what a loaded file would contain."""
    v = vggmod.make_random_vgg(0)
    return vggmod.load_vgg(vggmod.save_vgg(v))


@pytest.fixture(scope="session")
def vgg_blob_path(tmp_path_factory):
    """The same synthetic backbone as a file, for CLI-level tests."""
    path = tmp_path_factory.mktemp("vgg") / "backbone.vggb"
    vggmod.save_vgg(vggmod.make_random_vgg(0), str(path))
    return str(path)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(1234))
