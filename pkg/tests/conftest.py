import numpy as np
import pytest

from elbd.mathcore import Rng
from elbd.models import VaeModel
from elbd.nn import DenseNet, Layer

# acceptance results, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def dense(weight, bias, act):
    return Layer(np.array(weight, dtype=np.float64), np.array(bias, dtype=np.float64), act)


def tiny_mf_model():
    """dim_x=2, dim_z=3 mean-field VAE with hand-set weights."""
    enc = DenseNet([dense(
        [[0.5, -0.2], [0.1, 0.3], [-0.4, 0.6], [0.2, 0.1], [-0.3, 0.2], [0.05, -0.1]],
        [0.1, -0.2, 0.05, -0.5, 0.3, -0.1], "identity")])
    dec = DenseNet([dense([[0.7, -0.5, 0.2], [-0.3, 0.8, 0.6]], [0.1, -0.1], "sigmoid")],
                   bounded=True)
    return VaeModel("vae", "mean_field", 2, 3, enc, dec)


def fc_twin(mf: VaeModel) -> VaeModel:
    """Full-covariance model whose posterior equals the mean-field one
    (log_diag = log_var / 2, l_strict = 0)."""
    d = mf.dim_z
    last = mf.encoder.layers[-1]
    w = last.weight.copy()
    b = last.bias.copy()
    w[d:2 * d] *= 0.5
    b[d:2 * d] *= 0.5
    extra = d * (d - 1) // 2
    w = np.vstack([w, np.zeros((extra, w.shape[1]))])
    b = np.concatenate([b, np.zeros(extra)])
    layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in mf.encoder.layers[:-1]]
    layers.append(Layer(w, b, last.activation))
    dec = DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in mf.decoder.layers],
                   bounded=True)
    return VaeModel(mf.kind, "full_cov", mf.dim_x, d, DenseNet(layers), dec)


def fixed_posterior_model(posterior_kind, mu, second, l_entries=None, dim_x=1, decoder=None):
    """Model whose encoder ignores x and always returns the given posterior.

    ``second`` is log_var (mean field) or log_diag (full covariance);
    ``l_entries`` fills the strictly lower part row by row.
    """
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.size
    bias = [mu, np.asarray(second, dtype=np.float64)]
    if posterior_kind == "full_cov":
        bias.append(np.zeros(d * (d - 1) // 2) if l_entries is None else np.asarray(l_entries, float))
    bias = np.concatenate(bias)
    enc = DenseNet([Layer(np.zeros((bias.size, dim_x)), bias, "identity")])
    if decoder is None:
        decoder = DenseNet([Layer(np.zeros((dim_x, d)), np.zeros(dim_x), "sigmoid")], bounded=True)
    return VaeModel("vae", posterior_kind, dim_x, d, enc, decoder)


@pytest.fixture
def rng():
    return Rng(1234)
