"""VAE, CVAE, NF-VAE and IAF-VAE with mean-field or full-covariance posteriors.

The flows act on the encoder sample ``z0`` before the dense decoder and are
treated as part of the decoder: the KL term, the ELBD scores and the masks all
refer to ``z0``, whose posterior stays Gaussian.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mathcore import Rng, ShapeError, sample_rows, sample_standard_normal
from .nn import Adam, DenseNet, _sigmoid
from .posterior import (
    FullCovPosterior,
    MeanFieldPosterior,
    kl_fc_estimate,
    kl_mf_closed,
    reparam_fc,
    reparam_mf,
)

KINDS = ("vae", "cvae", "nf", "iaf")
POSTERIORS = ("mean_field", "full_cov")
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class PlanarFlow:
    """z' = z + p tanh(c . z + b)."""

    def __init__(self, p, c, b=0.0):
        self.p = np.asarray(p, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        self.b = np.array([b], dtype=np.float64).reshape(1)

    def forward(self, z):
        a = z @ self.c + self.b[0]
        h = np.tanh(a)
        dh = 1.0 - h * h
        out = z + h[:, None] * self.p
        logdet = np.log(np.abs(1.0 + dh * (self.c @ self.p)))
        return out, logdet, (z, h, dh)

    def backward(self, cache, g):
        z, h, dh = cache
        gp = g @ self.p
        da = gp * dh
        dz = g + da[:, None] * self.c
        grads = {"p": g.T @ h, "c": z.T @ da, "b": np.array([da.sum()])}
        return dz, grads

    def parameters(self):
        return {"p": self.p, "c": self.c, "b": self.b}

    def to_dict(self):
        return {"type": "planar", "p": self.p.tolist(), "c": self.c.tolist(), "b": float(self.b[0])}


class IafStep:
    """One masked autoregressive layer producing (m, s):

    z' = sigmoid(s) * z + (1 - sigmoid(s)) * m, with m_j, s_j depending on z_{<j}.
    """

    def __init__(self, wm, bm, ws, bs):
        self.wm = np.asarray(wm, dtype=np.float64)
        self.bm = np.asarray(bm, dtype=np.float64)
        self.ws = np.asarray(ws, dtype=np.float64)
        self.bs = np.asarray(bs, dtype=np.float64)
        self.mask = np.tril(np.ones_like(self.wm), k=-1)

    def forward(self, z):
        m = z @ (self.wm * self.mask).T + self.bm
        s = z @ (self.ws * self.mask).T + self.bs
        c = _sigmoid(s)
        out = c * z + (1.0 - c) * m
        logdet = np.sum(np.log(c), axis=1)
        return out, logdet, (z, m, c)

    def backward(self, cache, g):
        z, m, c = cache
        gm = g * (1.0 - c)
        gs = g * (z - m) * c * (1.0 - c)
        dz = g * c + gm @ (self.wm * self.mask) + gs @ (self.ws * self.mask)
        grads = {
            "wm": (gm.T @ z) * self.mask,
            "bm": gm.sum(axis=0),
            "ws": (gs.T @ z) * self.mask,
            "bs": gs.sum(axis=0),
        }
        return dz, grads

    def parameters(self):
        return {"wm": self.wm, "bm": self.bm, "ws": self.ws, "bs": self.bs}

    def to_dict(self):
        return {"type": "iaf", **{k: v.tolist() for k, v in self.parameters().items()}}


def _flow_from_dict(d):
    if d["type"] == "planar":
        return PlanarFlow(d["p"], d["c"], d["b"])
    return IafStep(d["wm"], d["bm"], d["ws"], d["bs"])


@dataclass
class VaeModel:
    kind: str
    posterior_kind: str
    dim_x: int
    dim_z: int
    encoder: DenseNet
    decoder: DenseNet
    flows: list = field(default_factory=list)
    label_count: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.posterior_kind not in POSTERIORS:
            raise ValueError(f"unknown posterior kind {self.posterior_kind!r}")
        if self.kind == "cvae" and self.label_count < 1:
            raise ValueError("cvae needs label_count >= 1")
        if self.kind != "cvae":
            self.label_count = 0
        if self.encoder.n_in != self.dim_x + self.label_count:
            raise ShapeError("encoder input width does not match dim_x (+labels)")
        if self.encoder.n_out != encoder_width(self.posterior_kind, self.dim_z):
            raise ShapeError("encoder output width does not match the posterior kind")
        if self.decoder.n_in != self.dim_z + self.label_count or self.decoder.n_out != self.dim_x:
            raise ShapeError("decoder widths do not match dim_z (+labels) -> dim_x")
        if not self.decoder.bounded:
            raise ValueError("decoder must be a bounded network")

    # -- helpers -----------------------------------------------------------
    def _with_labels(self, a, y):
        if self.kind != "cvae":
            return a
        if y is None:
            raise ValueError("cvae needs labels")
        y = np.asarray(y, dtype=np.int64)
        return np.hstack([a, np.eye(self.label_count)[y]])

    def parameters(self) -> dict:
        out = {**self.encoder.parameters("enc."), **self.decoder.parameters("dec.")}
        for t, fl in enumerate(self.flows):
            for k, v in fl.parameters().items():
                out[f"flow.{t}.{k}"] = v
        return out

    # -- encoder -----------------------------------------------------------
    def split_encoder_output(self, out):
        d = self.dim_z
        mu = out[:, :d]
        if self.posterior_kind == "mean_field":
            return MeanFieldPosterior(mu, out[:, d:2 * d])
        rows, cols = np.tril_indices(d, -1)
        l_strict = np.zeros((out.shape[0], d, d))
        l_strict[:, rows, cols] = out[:, 2 * d:]
        return FullCovPosterior(mu, out[:, d:2 * d], l_strict)

    def encode(self, x, y=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.split_encoder_output(self.encoder(self._with_labels(x, y)))

    # -- decoder -----------------------------------------------------------
    def flow_forward(self, z):
        caches = []
        logdet = np.zeros(z.shape[0])
        for fl in self.flows:
            z, ld, cache = fl.forward(z)
            logdet = logdet + ld
            caches.append(cache)
        return z, logdet, caches

    def _decode_forward(self, z, y):
        zt, logdet, caches = self.flow_forward(z)
        x_hat, tape = self.decoder.forward(self._with_labels(zt, y))
        return x_hat, logdet, (caches, tape)

    def _decode_backward(self, cache, g):
        caches, tape = cache
        dec_grads, g_in = self.decoder.backward(tape, g)
        grads = DenseNet.named_grads(dec_grads, "dec.")
        dz = g_in[:, : self.dim_z]
        for t in range(len(self.flows) - 1, -1, -1):
            dz, fg = self.flows[t].backward(caches[t], dz)
            for k, v in fg.items():
                grads[f"flow.{t}.{k}"] = v
        return grads, dz

    def decode(self, z, y=None, return_logdet=False):
        """Decoder mean f(z); with flows, z is pushed through them first.

        ``return_logdet`` also returns sum_t log|det dz_t/dz_{t-1}| per row.
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        x_hat, logdet, _ = self._decode_forward(z, y)
        return (x_hat, logdet) if return_logdet else x_hat

    # -- loss ----------------------------------------------------------------
    def loss_and_grads(self, x, y, eps):
        """Batch-mean negative ELBO with the reparameterization noise ``eps``.

        Mean-field: recon + closed-form KL. Full-covariance: recon + the
        single-sample estimate log Q(z|x) - log P(z).
        """
        n = x.shape[0]
        enc_out, enc_tape = self.encoder.forward(self._with_labels(x, y))
        post = self.split_encoder_output(enc_out)
        d = self.dim_z
        if self.posterior_kind == "mean_field":
            z = reparam_mf(post, eps=eps)
            kl, _ = kl_mf_closed(post)
        else:
            z, _, L = reparam_fc(post, eps=eps)
            kl = kl_fc_estimate(z, eps, post)
        x_hat, _, dcache = self._decode_forward(z, y)
        diff = x_hat - x
        recon = 0.5 * np.sum(diff * diff, axis=1)
        loss = float(np.mean(recon + kl))

        grads, dz = self._decode_backward(dcache, diff / n)
        g_out = np.zeros_like(enc_out)
        if self.posterior_kind == "mean_field":
            std = np.exp(0.5 * post.log_var)
            g_out[:, :d] = dz + post.mu / n
            g_out[:, d:] = dz * eps * 0.5 * std + 0.5 * (np.exp(post.log_var) - 1.0) / n
        else:
            # d(-log P(z))/dz = z; -sum(log_diag) enters log Q directly
            gz = dz + z / n
            g_out[:, :d] = gz
            diag = np.exp(post.log_diag)
            g_out[:, d:2 * d] = gz * eps * diag - 1.0 / n
            rows, cols = np.tril_indices(d, -1)
            g_out[:, 2 * d:] = gz[:, rows] * eps[:, cols]
        enc_grads, _ = self.encoder.backward(enc_tape, g_out)
        grads.update(DenseNet.named_grads(enc_grads, "enc."))
        stats = {"loss": loss, "recon": float(recon.mean()), "kl": float(np.mean(kl))}
        return stats, grads

    def touch(self):
        self.encoder.touch()
        self.decoder.touch()

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "posterior_kind": self.posterior_kind,
            "dim_x": self.dim_x,
            "dim_z": self.dim_z,
            "label_count": self.label_count,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "flows": [fl.to_dict() for fl in self.flows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VaeModel":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('format_version')!r}")
        return cls(
            kind=d["kind"],
            posterior_kind=d["posterior_kind"],
            dim_x=d["dim_x"],
            dim_z=d["dim_z"],
            encoder=DenseNet.from_dict(d["encoder"]),
            decoder=DenseNet.from_dict(d["decoder"]),
            flows=[_flow_from_dict(f) for f in d["flows"]],
            label_count=d["label_count"],
        )


def encoder_width(posterior_kind: str, dim_z: int) -> int:
    if posterior_kind == "mean_field":
        return 2 * dim_z
    return 2 * dim_z + dim_z * (dim_z - 1) // 2


def build_model(kind, posterior_kind, dim_x, dim_z, rng: Rng, hidden=(256, 256),
                label_count=0, flow_steps=None, activation="relu",
                output_activation="sigmoid") -> VaeModel:
    """Randomly initialised model. ``flow_steps`` defaults to 2 (nf) / 1 (iaf)."""
    extra = label_count if kind == "cvae" else 0
    hidden = list(hidden)
    enc_sizes = [dim_x + extra, *hidden, encoder_width(posterior_kind, dim_z)]
    dec_sizes = [dim_z + extra, *hidden[::-1], dim_x]
    encoder = DenseNet.init(enc_sizes, [activation] * len(hidden) + ["identity"], rng.split("enc"))
    decoder = DenseNet.init(dec_sizes, [activation] * len(hidden) + [output_activation],
                            rng.split("dec"), bounded=True)
    flows = []
    if kind in ("nf", "iaf"):
        steps = flow_steps if flow_steps is not None else (2 if kind == "nf" else 1)
        for t in range(steps):
            r = rng.split("flow", t)
            if kind == "nf":
                u = 0.2 * r.uniform(2 * dim_z) - 0.1
                flows.append(PlanarFlow(u[:dim_z], u[dim_z:], 0.0))
            else:
                u = 0.2 * r.uniform((2, dim_z, dim_z)) - 0.1
                flows.append(IafStep(u[0], np.zeros(dim_z), u[1], np.ones(dim_z)))
    return VaeModel(kind, posterior_kind, dim_x, dim_z, encoder, decoder, flows,
                    label_count if kind == "cvae" else 0)


@dataclass
class TrainResult:
    model: VaeModel
    loss_curve: list
    recon_curve: list
    kl_curve: list


def train(model: VaeModel, dataset, epochs: int, lr: float, batch: int, rng: Rng) -> TrainResult:
    """Minimise the batch-mean negative ELBO with Adam; updates ``model`` in place.

    Curves hold the per-epoch mean of the batch statistics; entry 0 is the
    loss of the untrained model on the whole set (same noise convention).
    """
    x = np.asarray(dataset.images, dtype=np.float64)
    y = dataset.labels if model.kind == "cvae" else None
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    opt = Adam(lr=lr)
    params = model.parameters()

    def epoch_stats_initial():
        eps = sample_standard_normal(rng.split("init"), (n, model.dim_z))
        stats, _ = model.loss_and_grads(x, None if y is None else y, eps)
        return stats

    s0 = epoch_stats_initial()
    loss_curve, recon_curve, kl_curve = [s0["loss"]], [s0["recon"]], [s0["kl"]]
    for epoch in range(epochs):
        order = rng.split("perm", epoch).permutation(n)
        tot = {"loss": 0.0, "recon": 0.0, "kl": 0.0}
        n_batches = 0
        for b, start in enumerate(range(0, n, batch)):
            idx = order[start:start + batch]
            eps = sample_standard_normal(rng.split("eps", epoch, b), (len(idx), model.dim_z))
            stats, grads = model.loss_and_grads(x[idx], None if y is None else y[idx], eps)
            if not np.isfinite(stats["loss"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                opt.step(params, grads)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            model.touch()
            for k in tot:
                tot[k] += stats[k]
            n_batches += 1
        loss_curve.append(tot["loss"] / n_batches)
        recon_curve.append(tot["recon"] / n_batches)
        kl_curve.append(tot["kl"] / n_batches)
    return TrainResult(model, loss_curve, recon_curve, kl_curve)


def posterior_sample(model: VaeModel, post, eps):
    if model.posterior_kind == "mean_field":
        return reparam_mf(post, eps=eps)
    return reparam_fc(post, eps=eps)[0]


def kl_term(model: VaeModel, post, z, eps):
    if model.posterior_kind == "mean_field":
        return kl_mf_closed(post)[0]
    return kl_fc_estimate(z, eps, post)


def eval_losses(model: VaeModel, x, y=None, rng: Rng = None, chunk: int = 500) -> dict:
    """Test-set means of -ELBO (recon + KL) and L2 (recon), one z per item.

    Item ``k`` draws its noise from ``rng.split(k)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    recon_all, kl_all = np.empty(n), np.empty(n)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        yb = None if y is None else np.asarray(y)[sl]
        post = model.encode(x[sl], yb)
        eps = sample_rows(rng, range(sl.start, sl.stop), model.dim_z)
        z = posterior_sample(model, post, eps)
        x_hat = model.decode(z, yb)
        recon_all[sl] = 0.5 * np.sum((x_hat - x[sl]) ** 2, axis=1)
        kl_all[sl] = kl_term(model, post, z, eps)
    return {"neg_elbo": float(np.mean(recon_all + kl_all)), "l2": float(np.mean(recon_all))}


def save_model(model: VaeModel, path, meta: dict | None = None) -> None:
    """JSON checkpoint; ``meta`` is stored alongside and ignored on load."""
    d = model.to_dict()
    if meta:
        d["meta"] = meta
    Path(path).write_text(json.dumps(d))


def load_model(path) -> VaeModel:
    return VaeModel.from_dict(json.loads(Path(path).read_text()))
