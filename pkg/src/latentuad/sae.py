"""Patch-based siamese auto-encoder.

Two weight-sharing replicas encode a pair of patches taken at the same
location in two subjects. The objective sums both reconstruction errors
and subtracts ``alpha`` times the cosine similarity of the two codes.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .nn import AdamState, BatchNorm, LayerSpec, adam_step, build_layer

log = logging.getLogger(__name__)

COS_EPS = 1e-12


@dataclass
class SaeConfig:
    patch_size: int = 15
    channels: int = 3
    kernels: tuple = ((5, 5), (3, 3), (3, 3), (3, 3))
    strides: tuple = ((1, 1), (1, 1), (3, 3), (1, 1))
    filters: tuple = (3, 4, 12, 16)
    alpha: float = 1e-3
    epochs: int = 20
    batch_size: int = 1000
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (len(self.kernels) == len(self.strides) == len(self.filters)) or not self.kernels:
            raise ValueError("kernels, strides and filters must be non-empty and of equal length")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be a positive odd integer")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def encoder_specs(kernels, strides, filters):
    specs = []
    for k, s, f in zip(kernels, strides, filters):
        specs += [LayerSpec("conv", tuple(k), tuple(s), int(f)), LayerSpec("gelu", filters=int(f)), LayerSpec("batch_norm", filters=int(f))]
    return specs


def mirror_specs(enc_specs, in_channels):
    """Decoder blocks: transposed convs replaying the encoder schedule backwards.

    The last block is a bare transposed conv so reconstructions are unbounded.
    """
    convs = [s for s in enc_specs if s.kind == "conv"]
    outs = [in_channels] + [s.filters for s in convs[:-1]]
    specs = []
    for i in reversed(range(len(convs))):
        specs.append(LayerSpec("tconv", convs[i].kernel, convs[i].stride, outs[i]))
        if i > 0:
            specs += [LayerSpec("gelu", filters=outs[i]), LayerSpec("batch_norm", filters=outs[i])]
    return specs


class SaeModel:
    """Encoder/decoder stacks with shared parameters in ``self.params``."""

    def __init__(self, enc_specs, input_shape, alpha=1e-3, seed=0):
        rng = np.random.default_rng(seed)
        self.input_shape = tuple(int(v) for v in input_shape)  # (C, p, p)
        self.alpha = float(alpha)
        self.enc_specs = list(enc_specs)
        self.dec_specs = mirror_specs(self.enc_specs, self.input_shape[0])
        shape = self.input_shape
        self.encoder = []
        for spec in self.enc_specs:
            layer = build_layer(spec, shape, rng)
            shape = layer.output_shape(shape)
            self.encoder.append(layer)
        if shape[1:] != (1, 1):
            raise ValueError(f"encoder must reduce the patch to 1x1, got spatial size {shape[1:]}")
        self.latent_dim = shape[0]
        self.decoder = []
        for spec in self.dec_specs:
            layer = build_layer(spec, shape, rng)
            shape = layer.output_shape(shape)
            self.decoder.append(layer)
        if shape != self.input_shape:
            raise ValueError(f"decoder output {shape} does not mirror input {self.input_shape}")

    @classmethod
    def from_config(cls, cfg: SaeConfig):
        specs = encoder_specs(cfg.kernels, cfg.strides, cfg.filters)
        return cls(specs, (cfg.channels, cfg.patch_size, cfg.patch_size), cfg.alpha, cfg.seed)

    def layers(self):
        for prefix, stack in (("enc", self.encoder), ("dec", self.decoder)):
            for i, layer in enumerate(stack):
                yield f"{prefix}{i}", layer

    @property
    def params(self):
        """Flat view ``{"enc0.W": array, ...}``; arrays are shared with the layers."""
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.params.items()}

    @property
    def buffers(self):
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.buffers.items()}

    def set_state(self, params, buffers):
        for name, layer in self.layers():
            for k in layer.params:
                layer.params[k][...] = params[f"{name}.{k}"]
            for k in layer.buffers:
                layer.buffers[k] = np.array(buffers[f"{name}.{k}"], dtype=np.float64)

    def grads(self):
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.grads.items()}

    # forward / backward; public batches are NCHW, layers run batch-last (C, H, W, N)

    def _run(self, stack, x, training):
        for layer in stack:
            x = layer.forward(x, training)
        return x

    def _back(self, stack, d):
        for layer in reversed(stack):
            d = layer.backward(d)
        return d

    def encode_batch(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected patches of shape (N, {self.input_shape}), got {x.shape}")
        return self._run(self.encoder, x.transpose(1, 2, 3, 0), training)[:, 0, 0, :].T

    def decode_batch(self, z, training=False):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of shape (N, {self.latent_dim}), got {z.shape}")
        return self._run(self.decoder, z.T[:, None, None, :], training).transpose(3, 0, 1, 2)

    def update_running_stats(self):
        for _, layer in self.layers():
            if isinstance(layer, BatchNorm):
                layer.update_running()


def build_reference_model(channels=3, patch_size=15, alpha=1e-3, seed=0):
    return SaeModel.from_config(SaeConfig(patch_size=patch_size, channels=channels, alpha=alpha, seed=seed))


def _as_window_batch(m, x):
    x = np.asarray(getattr(x, "window", x), dtype=np.float64)
    c, p, _ = m.input_shape
    if x.shape != (p, p, c):
        raise ValueError(f"expected a {p}x{p}x{c} patch, got shape {x.shape}")
    return x.transpose(2, 0, 1)[None]


def encode(m: SaeModel, x) -> np.ndarray:
    """Latent vector of one patch (a ``Patch`` or its ``(p, p, C)`` window), inference mode."""
    return m.encode_batch(_as_window_batch(m, x))[0]


def decode(m: SaeModel, z) -> np.ndarray:
    """Reconstruction ``(p, p, C)`` of one latent vector, inference mode."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (m.latent_dim,):
        raise ValueError(f"expected a latent of length {m.latent_dim}, got shape {z.shape}")
    return m.decode_batch(z[None])[0].transpose(1, 2, 0)


def siamese_objective(x1, xh1, x2, xh2, z1, z2, alpha):
    """Batch-mean siamese loss and its gradients w.r.t. reconstructions and codes.

    Returns ``(loss, d_xh1, d_xh2, d_z1, d_z2)``.
    """
    b = x1.shape[0]
    r1 = xh1 - x1
    r2 = xh2 - x2
    n1 = np.sqrt(np.sum(z1 * z1, axis=1) + COS_EPS ** 2)
    n2 = np.sqrt(np.sum(z2 * z2, axis=1) + COS_EPS ** 2)
    dot = np.sum(z1 * z2, axis=1)
    cos = dot / (n1 * n2)
    loss = (np.sum(r1 * r1) + np.sum(r2 * r2) - alpha * np.sum(cos)) / b
    dz1 = -alpha / b * (z2 / (n1 * n2)[:, None] - (cos / n1 ** 2)[:, None] * z1)
    dz2 = -alpha / b * (z1 / (n1 * n2)[:, None] - (cos / n2 ** 2)[:, None] * z2)
    return loss, 2.0 * r1 / b, 2.0 * r2 / b, dz1, dz2


def cosine(z1, z2):
    n1 = np.sqrt(np.sum(z1 * z1, axis=-1) + COS_EPS ** 2)
    n2 = np.sqrt(np.sum(z2 * z2, axis=-1) + COS_EPS ** 2)
    return np.sum(z1 * z2, axis=-1) / (n1 * n2)


def sae_loss(m: SaeModel, x1, x2=None, training=True):
    """Loss on a batch of pairs (NCHW arrays, or a single ``PatchPair``) and exact gradients.

    Both replicas run as one stacked batch so batch-norm sees shared statistics.
    Returns ``(loss, grads)`` with ``grads`` keyed like ``m.params``.
    """
    if hasattr(x1, "a"):  # PatchPair
        x1, x2 = _as_window_batch(m, x1.a), _as_window_batch(m, x1.b)
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    b = x1.shape[0]
    x = np.concatenate([x1, x2])
    z = m.encode_batch(x, training)
    xh = m.decode_batch(z, training)
    loss, dxh1, dxh2, dz1, dz2 = siamese_objective(x1, xh[:b], x2, xh[b:], z[:b], z[b:], m.alpha)
    dz = m._back(m.decoder, np.concatenate([dxh1, dxh2]).transpose(1, 2, 3, 0))[:, 0, 0, :].T
    dz += np.concatenate([dz1, dz2])
    m._back(m.encoder, dz.T[:, None, None, :])
    return loss, {k: v.copy() for k, v in m.grads().items()}


def evaluate_loss(m: SaeModel, x1, x2, chunk=2000):
    """Inference-mode mean loss over a pair set."""
    total = 0.0
    for s in range(0, len(x1), chunk):
        a, b = x1[s:s + chunk], x2[s:s + chunk]
        za, zb = m.encode_batch(a), m.encode_batch(b)
        ra = m.decode_batch(za) - a
        rb = m.decode_batch(zb) - b
        total += np.sum(ra * ra) + np.sum(rb * rb) - m.alpha * np.sum(cosine(za, zb))
    return total / len(x1)


@dataclass
class TrainResult:
    model: SaeModel
    trace: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0


def train_sae(train_pairs, val_pairs, cfg: SaeConfig) -> TrainResult:
    """Mini-batch Adam on the siamese loss; returns the best-validation snapshot."""
    a, b = (np.asarray(v, dtype=np.float64) for v in train_pairs)
    va, vb = (np.asarray(v, dtype=np.float64) for v in val_pairs)
    if len(a) == 0 or len(va) == 0:
        raise ValueError("train and validation pair sets must be non-empty")
    m = SaeModel.from_config(cfg)
    # start reconstructions at the per-channel training mean instead of zero
    m.decoder[-1].params["b"][...] = a.mean(axis=(0, 2, 3))
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    best = (np.inf, None, None, 0)
    res = TrainResult(m)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(a))
        batch_losses = []
        for s in range(0, len(a), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = sae_loss(m, a[idx], b[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"training diverged at epoch {epoch}: loss={loss}")
            m.update_running_stats()
            adam_step(state, m.params, grads)
            batch_losses.append(loss * len(idx))
        train_loss = float(np.sum(batch_losses) / len(a))
        val_loss = float(evaluate_loss(m, va, vb))
        if not np.isfinite(val_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}: val_loss={val_loss}")
        res.trace.append((epoch, train_loss, val_loss))
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if val_loss < best[0]:
            best = (val_loss, copy.deepcopy(m.params), copy.deepcopy(m.buffers), epoch)
    m.set_state(best[1], best[2])
    res.best_epoch = best[3]
    return res


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tl, vl in trace:
            w.writerow([e, repr(tl), repr(vl)])


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------


def model_to_bytes(m: SaeModel) -> bytes:
    meta = {
        "input_shape": list(m.input_shape),
        "alpha": m.alpha,
        "encoder": [s.to_dict() for s in m.enc_specs],
        "decoder": [s.to_dict() for s in m.dec_specs],
    }
    arrays = {f"param/{k}": v.astype(np.float32) for k, v in m.params.items()}
    arrays.update({f"buffer/{k}": np.asarray(v, dtype=np.float32) for k, v in m.buffers.items()})
    return container.dumps("sae", meta, arrays)


def model_from_bytes(buf: bytes) -> SaeModel:
    _, meta, arrays = container.loads(buf, "sae")
    specs = [LayerSpec.from_dict(d) for d in meta["encoder"]]
    m = SaeModel(specs, meta["input_shape"], meta["alpha"])
    if [s.to_dict() for s in m.dec_specs] != meta["decoder"]:
        raise container.ContainerError("decoder layout in checkpoint is not the mirror of its encoder")
    params = {k[len("param/"):]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("param/")}
    buffers = {k[len("buffer/"):]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("buffer/")}
    m.set_state(params, buffers)
    return m


def save_model(path, m):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(m))


def load_model(path) -> SaeModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
