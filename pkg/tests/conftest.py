import numpy as np
import pytest

from protoprobe.engine import LayerSpec, ModelState, NetworkSpec, init_model

L = LayerSpec


def tiny_conv_spec(classes=3, channels=1, size=6):
    return NetworkSpec(
        [L.conv2d(channels, 3, 3, 1, 1), L("relu"), L.conv2d(3, 4, 3, 2, 0), L("relu"),
         L("global_avg_pool"), L.dense(4, classes)],
        (channels, size, size), classes, 5,
    )


def random_small_spec(rng):
    """A random mix of conv2d/dense/relu/GAP/flatten layers."""
    c = int(rng.integers(1, 3))
    size = int(rng.integers(5, 8))
    k = int(rng.integers(2, 5))
    layers = []
    ch = c
    spatial = (c, size, size)
    for _ in range(int(rng.integers(1, 3))):
        out = int(rng.integers(2, 5))
        kernel, stride, pad = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        # never let the kernel outgrow the padded input
        kernel = min(kernel, spatial[1] + 2 * pad)
        layers += [L.conv2d(ch, out, kernel, stride, pad), L("relu")]
        for layer in layers[-2:]:
            spatial = layer.output_shape(spatial)
        ch = out
    if rng.random() < 0.5:
        layers.append(L("global_avg_pool"))
        width = ch
    else:
        layers.append(L("flatten"))
        width = int(np.prod(spatial))
    if rng.random() < 0.5:
        hidden = int(rng.integers(3, 7))
        layers += [L.dense(width, hidden), L("relu")]
        width = hidden
    feature_index = len(layers)
    layers.append(L.dense(width, k))
    return NetworkSpec(layers, (c, size, size), k, feature_index)


def random_model(spec, rng):
    """He-initialised weights with small random biases."""
    m = init_model(spec, int(rng.integers(1 << 30)))
    params = [p + rng.normal(0, 0.1, p.shape) if p.ndim == 1 else p for p in m.params]
    return ModelState(spec, tuple(params))


def linear_model(weights, bias, input_shape):
    weights = np.asarray(weights, dtype=np.float32)
    k, n = weights.shape
    spec = NetworkSpec([L("flatten"), L.dense(n, k)], input_shape, k, 1)
    return ModelState(spec, (weights, np.asarray(bias, dtype=np.float32)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_model():
    return init_model(tiny_conv_spec(), seed=3)


# --------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion in the terminal summary

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if not item.name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        if report.outcome != "passed" and not detail and call.excinfo is not None:
            detail = call.excinfo.exconly().splitlines()[0][:300]
        _ACCEPTANCE[item.name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _ACCEPTANCE[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        number = name.split("_")[2]
        title = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"[{status}] criterion {number} ({title}): {detail}")
