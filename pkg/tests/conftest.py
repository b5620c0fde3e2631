import pytest

from imrseg.data import SyntheticSpec, generate_synthetic_dataset
from imrseg.pipeline import ArchConfig, PipelineConfig


def tiny_arch(image_size=32):
    return ArchConfig(image_size=image_size, level_channels=(8, 8, 8), branch_channels=(4, 4, 8),
                      mix_channels=8, corr_channels=8, gn_groups=2, feat_proj_channels=4,
                      cell_groups=4, head_mid_channels=8, fuse_channels=8)


def tiny_config(**kw):
    kw.setdefault("arch", tiny_arch())
    kw.setdefault("steps", 2)
    kw.setdefault("episodes", 16)
    kw.setdefault("lr", 1e-3)
    return PipelineConfig(**kw)


@pytest.fixture(scope="session")
def tiny_index():
    return generate_synthetic_dataset(SyntheticSpec(images_per_class=6, resolution=32,
                                                    min_radius=5, max_radius=10))


ACCEPTANCE_LINES = {}


@pytest.fixture
def verdict():
    """Record a one-line pass/fail verdict for an acceptance criterion, then assert it."""
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
