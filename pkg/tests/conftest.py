import numpy as np
import pytest

from metaforge.core import BBox, Token


def make_token(text, x0, y0, width=None, height=None, font_size=10.0, **kw):
    """Token with a box sized from its text unless given explicitly."""
    if width is None:
        width = 0.6 * font_size * len(text)
    if height is None:
        height = 1.2 * font_size
    return Token(text=text, bbox=BBox(x0, y0, x0 + width, y0 + height), font_size=font_size, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
