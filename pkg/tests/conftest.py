import numpy as np
import pytest

from saatlab import synth


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Small synthetic digit dataset in MNIST IDX layout, loaded like the real thing."""
    d = tmp_path_factory.mktemp("mnist-small")
    synth.write_mnist_like(d, n_train=2048, n_test=512, seed=7)
    return d


def central_difference(loss_fn, arrays, index, h=1e-5):
    """Numerical gradient of loss_fn(*arrays) w.r.t. arrays[index].

    Independent oracle: perturbs one element at a time in double precision
    and evaluates the forward path twice per element.
    """
    arr = arrays[index]
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn(*arrays)
        flat[i] = orig - h
        fm = loss_fn(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(analytic, numeric):
    """Max elementwise |a - n| / max(1, |n|)."""
    return float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))).max())
