import pytest
import torch

from performsinger.config import RunConfig
from performsinger.frontend.corpus import gen_synthetic_corpus

torch.set_num_threads(1)

# acceptance verdict lines, echoed in the terminal summary even when output is captured
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def tiny_config(**train) -> RunConfig:
    """A narrow model that keeps unit tests fast; structure matches the defaults."""
    cfg = RunConfig()
    cfg.model.hidden = 16
    cfg.model.encoder_layers = 2
    cfg.model.encoder_filter = 16
    cfg.model.encoder_kernel = 3
    cfg.model.speaker_hidden = 8
    cfg.model.speaker_layers = 1
    cfg.video.channels = 2
    cfg.vcfm.blocks = 1
    cfg.pitch.channels = 8
    cfg.pitch.layers = 2
    cfg.pitch.steps = 8
    cfg.decoder.layers = 2
    cfg.decoder.channels = 8
    cfg.decoder.steps = 8
    cfg.rvq.entries = 8
    cfg.train.batch_size = 2
    cfg.train.warmup = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def corpus2():
    return gen_synthetic_corpus(7, 2)
