import numpy as np
import pytest

from stitchnet.gradcheck import relative_error
from stitchnet.layers import conv2d, dense, maxpool2d, relu, softmax_ce_head
from stitchnet.specs import NetworkSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def grads_agree(analytic, numeric, tol=1e-6, floor=1e-8) -> bool:
    """Relative agreement below tol, forgiving coordinates whose absolute
    disagreement sits under the finite-difference resolution floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    rel = relative_error(analytic, numeric)
    bad = (rel >= tol) & (np.abs(analytic - numeric) >= floor)
    return not bad.any()


def tiny_dense_spec(classes=3, in_features=6, hidden=5):
    """Smallest useful net: one dense layer plus the head."""
    return NetworkSpec(
        (dense("fc1", hidden), softmax_ce_head("head", classes)),
        (in_features,),
    )


def tiny_conv_spec(classes=3):
    """One conv block on an 8x8 canvas; stitch site at the pool."""
    return NetworkSpec(
        (
            conv2d("conv1", filters=3, kernel=3),
            relu("relu1"),
            maxpool2d("pool1", 2),
            dense("fc1", 6),
            softmax_ce_head("head", classes),
        ),
        (1, 8, 8),
    )
