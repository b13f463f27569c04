import numpy as np
import pytest

from fastadd.attention import AttentionLayerParams, HeadParams, InteractionMode, VanillaHeadParams


def random_layer(h, d, mode="product", share_qv=True, seed=0, full_projection=False, shared_heads=False, std=0.5, dtype=np.float64):
    """Attention layer with O(1) weights so every term of the output matters."""
    rng = np.random.default_rng(seed)
    d_in = h * d if full_projection else d
    concat = InteractionMode.parse(mode) is InteractionMode.CONCAT_PROJECT

    def draw(shape, scale=std):
        return rng.normal(0, scale, shape).astype(dtype)

    def head():
        W_q = draw((d_in, d))
        return HeadParams(
            W_q=W_q,
            W_k=draw((d_in, d)),
            W_v=W_q if share_qv else draw((d_in, d)),
            W_r=draw((d, d)),
            w_q=draw(d, 1.0),
            w_k=draw(d, 1.0),
            W_pk=draw((2 * d, d)) if concat else None,
            W_pv=draw((2 * d, d)) if concat else None,
        )

    heads = [head()] * h if shared_heads else [head() for _ in range(h)]
    return AttentionLayerParams(heads=heads, full_projection=full_projection)


def random_vanilla_layer(h, d, seed=0, std=0.5):
    rng = np.random.default_rng(seed)
    heads = [VanillaHeadParams(*(rng.normal(0, std, (d, d)) for _ in range(3))) for _ in range(h)]
    return AttentionLayerParams(heads=heads, W_o=rng.normal(0, std, (h * d, h * d)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
