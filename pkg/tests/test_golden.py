import numpy as np
import pytest

from golden_cases import CASES, GOLDEN
from imrseg.tensorio import read_tensor


@pytest.mark.parametrize("name", sorted(CASES))
def test_matches_frozen_output(name):
    expected = read_tensor(GOLDEN / f"{name}.imrt")
    got = CASES[name]().numpy()
    assert got.shape == expected.shape
    np.testing.assert_allclose(got, expected, atol=1e-6, rtol=1e-6)
