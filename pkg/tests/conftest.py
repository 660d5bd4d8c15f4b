import numpy as np
import pytest

from sparsecl.network import LayerSpec, NetworkState


def random_mlp(widths, density=0.6, seed=0, task=0, n_classes=None):
    """Sparse MLP with every output unit assigned; ``widths`` includes input and output."""
    rng = np.random.default_rng(seed)
    layers = [LayerSpec.dense(w) for w in widths[1:-1]] + [LayerSpec.dense(widths[-1], activation="identity")]
    net = NetworkState((widths[0],), layers)
    for l in range(1, len(widths)):
        m = rng.random((widths[l], widths[l - 1])) < density
        tgt, src = np.nonzero(m)
        net.add_edges(l, src, tgt, task, rng.normal(0, 0.7, size=len(src)))
    net.assign_output_units(range(n_classes or widths[-1]))
    return net


def small_convnet(seed=0, density=0.7):
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec.conv(3, 3),
        LayerSpec.maxpool(2),
        LayerSpec.conv(4, 2),
        LayerSpec.flatten(),
        LayerSpec.dense(5),
        LayerSpec.dense(3, activation="identity"),
    ]
    net = NetworkState((2, 8, 8), layers)
    for l in range(1, net.n_layers):
        n_out, n_in = net.owner[l - 1].shape
        m = rng.random((n_out, n_in)) < density
        tgt, src = np.nonzero(m)
        blk = net.block_shape(l)
        net.add_edges(l, src, tgt, 0, rng.normal(0, 0.5, size=(len(src),) + blk))
    net.assign_output_units(range(3))
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    reports = [
        r
        for key in ("passed", "failed", "error")
        for r in terminalreporter.stats.get(key, [])
        if "test_acceptance.py::test_c" in getattr(r, "nodeid", "") and (r.when == "call" or r.failed)
    ]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    for r in sorted(reports, key=lambda r: r.nodeid):
        n = int(r.nodeid.split("::test_c")[1][:2])
        detail = dict(r.user_properties).get("detail", "")
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if r.passed else 'FAIL'}  {detail}")
