import numpy as np
import pytest

from sprompts import cli
from sprompts.domains import StreamSpec, generate_stream
from sprompts.encoder import EncoderConfig, FrozenBackbone
from sprompts.store import load_backbone

TINY_ENCODER = EncoderConfig(image_size=16, patch_size=8, embed_dim=8, num_layers=1, num_heads=2,
                             text_embed_dim=8, text_layers=1, text_heads=2,
                             vocab=("hbar", "vbar", "disk", "triangle"))


@pytest.fixture(scope="session")
def tiny_backbone():
    return FrozenBackbone.initialise(TINY_ENCODER, seed=0).freeze()


@pytest.fixture(scope="session")
def tiny_stream():
    return generate_stream(StreamSpec(train_per_class=4, test_per_class=3, image_size=16))


@pytest.fixture(scope="session")
def default_stream():
    return generate_stream(StreamSpec())


@pytest.fixture(scope="session")
def pretrained_dir(tmp_path_factory):
    """Backbone built by the `pretrain` command under the default configuration."""
    out = tmp_path_factory.mktemp("pretrained")
    cfg = out / "config.yaml"
    cfg.write_text(f"output_dir: {out}\n")
    assert cli.main(["pretrain", "--config", str(cfg)]) == 0
    return out


@pytest.fixture(scope="session")
def pretrained_backbone(pretrained_dir):
    return load_backbone(pretrained_dir / "backbone.ckpt")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
