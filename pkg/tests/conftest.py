import os

# one BLAS thread keeps timings honest and float results reproducible
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from vgsg.encoders import EncoderConfig
from vgsg.sgtl import SGTLConfig
from vgsg.synthdata import GenerationConfig, generate


@pytest.fixture(scope="session")
def tiny_ds():
    """12 train / 4 test identities, 16x8 images, K=2."""
    cfg = GenerationConfig(seed=3, n_train=12, n_test=4, samples_per_identity=4, noise_level=0.1,
                           K=2, image_height=16, image_width=8, palette_size=4)
    return generate(cfg)


@pytest.fixture
def tiny_encoder(tiny_ds):
    return EncoderConfig(C=8, C_T=8, H=4, W=2, L_max=16, vocab_size=tiny_ds.vocab_size, text_layers=1,
                         drop_path_rate=0.1, K=2, heads=2, mlp_ratio=2)


@pytest.fixture
def tiny_sgtl():
    return SGTLConfig(heads=2, mlp_ratio=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report: one PASS/FAIL line per test marked @pytest.mark.criterion("name")

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = {"passed": "PASS", "failed": "FAIL"}.get(rep.outcome, rep.outcome.upper())
        _CRITERIA.append(f"{status}  {marker.args[0]}" + (f"  ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
