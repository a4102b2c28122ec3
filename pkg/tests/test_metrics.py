import numpy as np
import pytest

from tipatch.evalkit import synth_dataset
from tipatch.imagery import rng_stream
from tipatch.metrics import (
    BOX3,
    LAPLACE4,
    PROXY_OFFSET,
    PROXY_SLOPE,
    MetricDescriptor,
    ProxyMetric,
    TinyCnnMetric,
    TinyCnnWeights,
    canonical_weights_path,
    fd_check,
    get_metric,
    grad_check,
    proxy_features,
    stencil,
    stencil_adjoint,
)


@pytest.fixture(scope="module")
def proxy():
    return ProxyMetric()


@pytest.fixture(scope="module")
def cnn():
    return TinyCnnMetric()


def test_descriptor_range():
    d = MetricDescriptor("m")
    assert d.m_range == 100.0
    with pytest.raises(ValueError):
        MetricDescriptor("m", 5.0, 5.0)


@pytest.mark.parametrize("kernel", [BOX3, LAPLACE4])
def test_stencil_adjoint_is_transpose(kernel, rng):
    # <Ax, y> == <x, A^T y> for the replicate-padded stencil
    x = rng.normal(size=(3, 9, 11))
    y = rng.normal(size=(3, 9, 11))
    assert np.isclose(np.sum(stencil(x, kernel) * y), np.sum(x * stencil_adjoint(y, kernel)),
                      rtol=1e-12)


def test_stencil_adjoint_matches_dense_matrix(rng):
    h, w = 4, 5
    n = h * w
    dense = np.zeros((n, n))
    for j in range(n):
        e = np.zeros((1, h, w))
        e.flat[j] = 1.0
        dense[:, j] = stencil(e, LAPLACE4).ravel()
    y = rng.normal(size=(1, h, w))
    assert np.allclose(stencil_adjoint(y, LAPLACE4).ravel(), dense.T @ y.ravel(), atol=1e-12)


# ------------------------------------------------------------------ proxy

def test_proxy_constant_image(proxy):
    img = np.full((3, 16, 16), 0.3)
    assert proxy_features(img) == (0.0, 0.0, 0.0)
    ev = proxy.score_and_grad(img)
    assert ev.score == pytest.approx(100.0 / (1.0 + np.exp(PROXY_SLOPE * PROXY_OFFSET)), rel=1e-14)
    assert np.all(ev.gradient == 0.0)


def test_proxy_mid_gray_near_fifty(proxy):
    assert abs(proxy.score(np.full((3, 16, 16), 0.5)) - 50.0) < 2.0


def test_proxy_constant_fd_agrees_with_zero_gradient(proxy):
    img = np.full((3, 16, 16), 0.5)
    f = lambda z: proxy._evaluate(z, False)[0]  # noqa: E731
    x = img.copy()
    x[0, 5, 5] += 1e-4
    fp = f(x)
    x[0, 5, 5] -= 2e-4
    fm = f(x)
    assert abs((fp - fm) / 2e-4) < 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_proxy_fd_random_16(proxy, seed):
    img = rng_stream(seed, "test-proxy").uniform(0, 1, (3, 16, 16))
    assert grad_check(proxy, img, probes=25, step=1e-4, seed=seed) <= 1e-4


def test_proxy_fd_larger_random(proxy):
    img = rng_stream(9, "test-proxy").uniform(0.2, 0.8, (3, 24, 40))
    assert grad_check(proxy, img, probes=25, step=1e-4) <= 1e-4


def test_proxy_minimum_size(proxy):
    with pytest.raises(ValueError, match="at least 8x8"):
        proxy.score(np.zeros((3, 7, 16)))


def test_proxy_deterministic(proxy, rng):
    img = rng.uniform(0, 1, (3, 16, 16))
    assert proxy.score(img) == proxy.score(img.copy())


# scores of synth_dataset(10, 32, 32, seed=11) with clip(x + a * noise),
# noise = rng_stream(11, "noise").uniform(-1, 1, (3, 32, 32))
NOISE_AMPS = [0, 0.02, 0.05, 0.1, 0.2, 0.4]
GOLDEN_NOISE_SCORES = np.array([
    [52.6534367128, 52.9374678408, 54.3968734531, 59.4690111102, 76.6604719239, 98.3363815934],
    [52.3669956892, 52.6587713684, 54.1536173081, 59.3916174131, 77.0707283159, 98.2639926118],
    [52.6084306564, 52.8739617906, 54.3025210548, 59.2401849108, 75.7866697106, 97.3461119872],
    [52.2549797909, 52.5138136188, 53.9745248553, 59.1615362192, 76.7911270243, 98.3570501232],
    [50.90370721, 51.201439319, 52.7407915275, 58.0744236964, 75.9360823214, 98.2211965647],
    [52.2692491836, 52.598848126, 54.1946847358, 59.6995280271, 78.0683912763, 98.8589732486],
    [51.7277436014, 52.0317264106, 53.5916800683, 59.0568260884, 77.4871208738, 98.7190791885],
    [53.8129249506, 54.0771822667, 55.5506158261, 60.7433731893, 78.2896268947, 98.8512481878],
    [50.104993123, 50.4381692773, 52.0195840924, 57.4657510016, 76.1353487176, 98.6477808794],
    [53.8189791433, 54.1000583969, 55.5882476769, 60.73989116, 77.7430043611, 98.3089681203],
])


def test_proxy_monotone_in_noise_golden(proxy):
    images = synth_dataset(10, 32, 32, seed=11)
    noise = rng_stream(11, "noise").uniform(-1, 1, (3, 32, 32))
    scores = np.array([[proxy.score(np.clip(x + a * noise, 0, 1)) for a in NOISE_AMPS]
                       for x in images])
    assert np.allclose(scores, GOLDEN_NOISE_SCORES, rtol=0, atol=1e-9)
    assert np.all(np.diff(scores, axis=1) > 0)


# ---------------------------------------------------------------- tinycnn

def test_tinycnn_zero_weights(rng):
    m = TinyCnnMetric(TinyCnnWeights.zeros())
    ev = m.score_and_grad(rng.uniform(0, 1, (3, 32, 32)))
    assert ev.score == 50.0
    assert np.all(ev.gradient == 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_tinycnn_fd_random_32(cnn, seed):
    img = rng_stream(seed, "test-cnn").uniform(0, 1, (3, 32, 32))
    assert grad_check(cnn, img, probes=25, step=1e-4, seed=seed) <= 1e-4


def test_tinycnn_fd_odd_size(cnn):
    # odd sizes drop the last row/column in pooling; gradient there must be exact too
    img = rng_stream(5, "test-cnn").uniform(0, 1, (3, 33, 35))
    assert grad_check(cnn, img, probes=25) <= 1e-4


def test_tinycnn_canonical_golden(cnn):
    # frozen at first build from the shipped weight file
    assert cnn.score(np.full((3, 32, 32), 0.5)) == pytest.approx(55.52947199314756, abs=1e-10)


def test_canonical_file_matches_generator():
    shipped = TinyCnnWeights.load(canonical_weights_path())
    fresh = TinyCnnWeights.generate()
    assert np.array_equal(shipped.flat(), fresh.flat())


def test_weight_file_round_trip(tmp_path):
    w = TinyCnnWeights.generate(seed=5)
    w.save(tmp_path / "w.tipf")
    assert np.array_equal(TinyCnnWeights.load(tmp_path / "w.tipf").flat(), w.flat())


def test_weight_file_shape_mismatch(tmp_path):
    from tipatch.imagery import write_tipf
    write_tipf(tmp_path / "w.tipf", np.zeros((1, 1, 10)),
               {"kind": "tinycnn-weights",
                "sections": [{"name": "conv1", "weight": [8, 3, 3, 3], "bias": [8]}]})
    with pytest.raises(ValueError):
        TinyCnnWeights.load(tmp_path / "w.tipf")


def test_weight_init_bounds():
    w = TinyCnnWeights.generate()
    assert np.abs(w.conv1_w).max() <= 1 / np.sqrt(27)
    assert np.abs(w.conv2_w).max() <= 1 / np.sqrt(72)
    assert np.abs(w.head_w).max() <= 1 / np.sqrt(16)


def test_tinycnn_minimum_size(cnn):
    with pytest.raises(ValueError, match="32x32"):
        cnn.score(np.zeros((3, 31, 40)))


def test_scores_within_range(proxy, cnn, rng):
    for _ in range(5):
        img = rng.uniform(0, 1, (3, 32, 32))
        for m in (proxy, cnn):
            ev = m.score_and_grad(img)
            assert 0.0 <= ev.score <= 100.0
            assert np.all(np.isfinite(ev.gradient))


def test_get_metric():
    assert get_metric("proxy").id == "proxy"
    assert get_metric("tinycnn").id == "tinycnn"
    with pytest.raises(ValueError):
        get_metric("paq2piq")


def test_fd_check_validates_arguments():
    with pytest.raises(ValueError):
        fd_check(lambda x: 0.0, np.zeros(3), np.zeros(3), probes=0)
    with pytest.raises(ValueError):
        fd_check(lambda x: 0.0, np.zeros(3), np.zeros(3), step=0.0)


def test_fd_check_detects_wrong_gradient():
    x = np.linspace(0.1, 0.9, 12)
    f = lambda z: float(np.sum(z ** 3))  # noqa: E731
    assert fd_check(f, x, 3 * x ** 2) < 1e-6
    assert fd_check(f, x, 2 * x ** 2) > 0.1
