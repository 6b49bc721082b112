import os
from types import SimpleNamespace

os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest
from PIL import Image

from vgg_export import export


@pytest.fixture(scope="session")
def test_image(tmp_path_factory):
    rng = np.random.default_rng(7)
    arr = (rng.random((128, 128)) * 255).astype(np.uint8)
    path = tmp_path_factory.mktemp("img") / "test.png"
    Image.fromarray(arr, "L").save(path)
    return str(path)


@pytest.fixture(scope="session")
def exported(tmp_path_factory, test_image):
    """One export of a seeded random checkpoint, shared across tests."""
    out = tmp_path_factory.mktemp("exp")
    blob_path = str(out / "backbone.vggb")
    report = export("random:0", blob_path, test_image)
    return SimpleNamespace(
        report=report, blob=blob_path, dump=report.dump_path,
        report_path=str(out / "backbone.report.json"), image=test_image)
