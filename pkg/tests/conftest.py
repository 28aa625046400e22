import numpy as np
import pytest

from lipcert.autodiff import Tape, Tensor

MNIST_DIR = "data/mnist"


def gradcheck(forward, x0: np.ndarray, analytic: np.ndarray, step: float = 1e-5):
    """Relative error between analytic grad and central finite differences.

    ``forward`` maps the (mutated in place) array to a scalar.
    """
    x = x0.copy()
    num = np.zeros_like(x)
    flat, numf = x.ravel(), num.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = forward(x)
        flat[i] = orig - step
        fm = forward(x)
        flat[i] = orig
        numf[i] = (fp - fm) / (2.0 * step)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(num), 1e-12)
    return np.linalg.norm(analytic - num) / denom


def projection_weights(shape) -> np.ndarray:
    """Fixed non-uniform weights; keeps test losses free of degeneracies
    (e.g. the plain sum of a batch-normalized output is constant in x)."""
    size = int(np.prod(shape)) if shape else 1
    return np.linspace(0.5, 1.5, size).reshape(shape)


def tape_grad(op, args, wrt: int):
    """Value and gradient of a weighted sum of op(*args) w.r.t. args[wrt]."""
    import lipcert.autodiff as ad

    tensors = [Tensor(a, requires_grad=(i == wrt)) for i, a in enumerate(args)]
    with Tape() as tape:
        out = op(*tensors)
        s = ad.total_sum(ad.mul(out, projection_weights(out.shape)))
    (g,) = tape.gradient(s, [tensors[wrt]])
    return s.item(), g


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def mnist_paths():
    from pathlib import Path

    root = Path(__file__).resolve().parent.parent / MNIST_DIR
    paths = {
        "train_images": root / "train-images-idx3-ubyte.gz",
        "train_labels": root / "train-labels-idx1-ubyte.gz",
        "test_images": root / "t10k-images-idx3-ubyte.gz",
        "test_labels": root / "t10k-labels-idx1-ubyte.gz",
    }
    if not all(p.exists() for p in paths.values()):
        pytest.skip("MNIST IDX files not present under data/mnist")
    return paths


TABLE_SMALL = """\
input 1x28x28
conv out=16 k=4x4 pad=1 stride=2
relu
conv out=32 k=4x4 pad=1 stride=2
relu
fc out=100
relu
fc out=10
"""


@pytest.fixture(scope="session")
def small_conv_net_text():
    return TABLE_SMALL
