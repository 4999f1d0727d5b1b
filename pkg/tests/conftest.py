import numpy as np
import pytest

from ticfm.config import ModelConfig, init_params


def tiny_config(**overrides):
    base = dict(series_length=32, n_patches=4, embed_dim=16, stat_dim=4, loc_dim=6, conv_kernel=5,
                vit_layers=1, vit_heads=2, adapter_hidden=24, model_dim=16, n_latents=4,
                icl_blocks=2, icl_heads=2, decoder_hidden=24, c_max=10)
    base.update(overrides)
    return ModelConfig.small(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line; a test that dies before recording counts as FAIL."""
    recorded = []

    def record(number, title, ok, detail=""):
        VERDICTS[number] = (title, bool(ok), detail)
        recorded.append(number)
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})", flush=True)
        assert ok, f"criterion {number}: {title}: {detail}"

    yield record
    number = request.node.get_closest_marker("criterion")
    if number is not None and number.args[0] not in recorded:
        VERDICTS[number.args[0]] = (number.args[1], False, "did not complete")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        title, ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
