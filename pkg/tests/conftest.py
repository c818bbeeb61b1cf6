import numpy as np
import pytest


def naive_conv2d(x, k, stride, pad):
    """Six-nested-loop cross-correlation, the reference for numerics.conv2d."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def central_difference(f, x, index, h=1e-3):
    xp = x.copy()
    xm = x.copy()
    xp[index] += h
    xm[index] -= h
    return (f(xp) - f(xm)) / (2 * h)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- small models on synthetic feature maps -------------------------------------

TINY_HW = (8, 12)


def tiny_spec(variant, **kw):
    from lcanetpp.lca import LcaConfig
    from lcanetpp.models import ModelSpec
    kw.setdefault("lca", LcaConfig(lam=0.5, gamma=5.0, n_iter=10))
    return ModelSpec(variant, input_hw=TINY_HW, channels=(3, 4), kernel=3, pad=1, **kw)


def toy_maps(n, seed):
    """Class k carries a raised band of rows 2k..2k+2 under unit Gaussian noise."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 3
    x = rng.standard_normal((n, 1) + TINY_HW)
    for k in range(3):
        x[y == k, :, 2 * k:2 * k + 3, :] += 1.5
    return x.astype(np.float32), y


@pytest.fixture(scope="session")
def toy_data():
    xtr, ytr = toy_maps(96, 0)
    xte, yte = toy_maps(48, 1)
    return xtr, ytr, xte, yte


@pytest.fixture(scope="session")
def trained(toy_data):
    """One briefly trained model per variant, keyed by variant name."""
    from lcanetpp import models
    xtr, ytr, _, _ = toy_data
    out = {}
    for v in ("cnn", "lcanet", "lcanet_pp"):
        spec = tiny_spec(v)
        params, history = models.fit(spec, xtr, ytr, models.TrainConfig(epochs=4, lr=0.02,
                                                                         batch_size=16))
        out[v] = (models.Classifier(params, spec), history)
    return out


# --- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
