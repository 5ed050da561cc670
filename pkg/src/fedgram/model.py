"""Small rectifier MLP with an explicit representation / decision split.

The representation stack maps features to an embedding (every layer followed
by ReLU, including the embedding layer). The decision layer is one linear map
from the embedding to class logits. All parameters live in one flat float64
vector so aggregation rules can treat a model as a point in R^p.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

REPRESENTATION = "representation"
DECISION = "decision"
_ROLE_CODES = {REPRESENTATION: 0, DECISION: 1}
_MAGIC = b"FGPV"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpArch:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    embedding_dim: int = 16
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embedding_dim, self.num_classes)
        if any(int(x) < 1 for x in dims):
            raise ValueError("all layer sizes must be >= 1")

    @property
    def layer_dims(self) -> list[tuple[int, int, str]]:
        """(fan_in, fan_out, role) for every linear layer, input to output."""
        rep = [self.input_dim, *self.hidden_dims, self.embedding_dim]
        layers = [(rep[i], rep[i + 1], REPRESENTATION) for i in range(len(rep) - 1)]
        layers.append((self.embedding_dim, self.num_classes, DECISION))
        return layers

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o, _ in self.layer_dims)

    def segments(self) -> list["Segment"]:
        segs = []
        pos = 0
        for idx, (fan_in, fan_out, role) in enumerate(self.layer_dims):
            segs.append(Segment(f"W{idx}", pos, fan_in * fan_out, role))
            pos += fan_in * fan_out
            segs.append(Segment(f"b{idx}", pos, fan_out, role))
            pos += fan_out
        return segs


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    length: int
    role: str

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class ParamVector:
    """Flat parameters plus the layer map that says what each slice means."""

    values: np.ndarray
    segments: tuple[Segment, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "segments", tuple(self.segments))
        pos = 0
        seen_decision = False
        for seg in self.segments:
            if seg.start != pos or seg.length < 0:
                raise ValueError("segments must partition the vector contiguously")
            if seg.role not in _ROLE_CODES:
                raise ValueError(f"unknown layer role {seg.role!r}")
            if seg.role == DECISION:
                seen_decision = True
            elif seen_decision:
                raise ValueError("representation segments must precede decision segments")
            pos = seg.stop
        if vals.ndim != 1 or pos != vals.shape[0]:
            raise ValueError("segments do not cover the parameter vector")

    def __len__(self) -> int:
        return self.values.shape[0]

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.segments)

    def role_mask(self, role: str) -> np.ndarray:
        mask = np.zeros(len(self), dtype=bool)
        for seg in self.segments:
            if seg.role == role:
                mask[seg.start:seg.stop] = True
        return mask

    def decision_slice(self) -> slice:
        starts = [s.start for s in self.segments if s.role == DECISION]
        return slice(min(starts) if starts else len(self), len(self))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<II", _FORMAT_VERSION, len(self.segments)))
        for seg in self.segments:
            name = seg.name.encode("utf-8")
            buf.write(struct.pack("<QQBH", seg.start, seg.length, _ROLE_CODES[seg.role], len(name)))
            buf.write(name)
        buf.write(struct.pack("<Q", len(self)))
        buf.write(self.values.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        view = memoryview(blob)
        if bytes(view[:4]) != _MAGIC:
            raise ValueError("not a parameter vector blob")
        version, nseg = struct.unpack_from("<II", view, 4)
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported format version {version}")
        pos = 12
        roles = {v: k for k, v in _ROLE_CODES.items()}
        segs = []
        for _ in range(nseg):
            start, length, role, name_len = struct.unpack_from("<QQBH", view, pos)
            pos += struct.calcsize("<QQBH")
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            segs.append(Segment(name, start, length, roles[role]))
        (count,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        values = np.frombuffer(bytes(view[pos:pos + 8 * count]), dtype="<f8").astype(np.float64)
        if values.shape[0] != count:
            raise ValueError("truncated parameter blob")
        return cls(values, tuple(segs))


@dataclass(frozen=True)
class MlpModel:
    arch: MlpArch
    params: ParamVector

    def __post_init__(self):
        if len(self.params) != self.arch.num_params:
            raise ValueError("parameter count does not match architecture")

    @classmethod
    def from_values(cls, arch: MlpArch, values) -> "MlpModel":
        return cls(arch, ParamVector(np.array(values, dtype=np.float64), tuple(arch.segments())))

    @classmethod
    def zeros(cls, arch: MlpArch) -> "MlpModel":
        return cls.from_values(arch, np.zeros(arch.num_params))

    @property
    def values(self) -> np.ndarray:
        return self.params.values

    def with_values(self, values) -> "MlpModel":
        return MlpModel(self.arch, self.params.with_values(values))

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray, str]]:
        """Yield (W, b, role) views; W has shape (fan_in, fan_out)."""
        v = self.params.values
        pos = 0
        for fan_in, fan_out, role in self.arch.layer_dims:
            W = v[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = v[pos:pos + fan_out]
            pos += fan_out
            yield W, b, role


def init_model(arch: MlpArch, rng: np.random.Generator) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    parts = []
    for fan_in, fan_out, _ in arch.layer_dims:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return MlpModel.from_values(arch, np.concatenate(parts))


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.arch.input_dim:
        raise ValueError(
            f"feature dimension mismatch: expected {model.arch.input_dim}, got {X.shape[-1]}"
        )
    return X, single


def _forward_cache(model: MlpModel, X: np.ndarray):
    """Run the representation stack keeping the inputs and pre-activations."""
    acts = [X]
    pres = []
    h = X
    layers = list(model.layers())
    for W, b, role in layers[:-1]:
        z = h @ W + b
        h = np.maximum(z, 0.0)
        pres.append(z)
        acts.append(h)
    return layers, acts, pres


def forward_embed(model: MlpModel, x) -> np.ndarray:
    """Embedding for one sample (1-D input) or a batch (2-D input)."""
    X, single = _as_batch(model, x)
    _, acts, _ = _forward_cache(model, X)
    return acts[-1][0] if single else acts[-1]


def forward_logits(model: MlpModel, x) -> np.ndarray:
    X, single = _as_batch(model, x)
    layers, acts, _ = _forward_cache(model, X)
    W, b, _ = layers[-1]
    logits = acts[-1] @ W + b
    return logits[0] if single else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: MlpModel, X) -> np.ndarray:
    """Arg-max class; ties resolve to the lowest class index."""
    return np.argmax(forward_logits(model, np.atleast_2d(X)), axis=1)


def _backprop_representation(layers, acts, pres, d_embed: np.ndarray, grad: np.ndarray) -> None:
    """Accumulate representation-layer gradients into ``grad`` given dL/d(embedding)."""
    offsets = []
    pos = 0
    for W, b, _ in layers:
        offsets.append(pos)
        pos += W.size + b.size
    delta = d_embed
    for li in range(len(layers) - 2, -1, -1):
        W, b, _ = layers[li]
        dz = delta * (pres[li] > 0.0)
        off = offsets[li]
        grad[off:off + W.size] = (acts[li].T @ dz).ravel()
        grad[off + W.size:off + W.size + b.size] = dz.sum(axis=0)
        if li > 0:
            delta = dz @ W.T


def ce_loss_grad(model: MlpModel, X, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. every parameter."""
    X, _ = _as_batch(model, X)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape[0] != X.shape[0]:
        raise ValueError("labels and features differ in length")
    K = model.arch.num_classes
    if np.any(y < 0) or np.any(y >= K):
        raise ValueError("label out of range")
    B = X.shape[0]
    layers, acts, pres = _forward_cache(model, X)
    Wd, bd, _ = layers[-1]
    emb = acts[-1]
    logits = emb @ Wd + bd
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - shifted[np.arange(B), y]))

    probs = np.exp(shifted - logsum[:, None])
    dlogits = probs
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B

    grad = np.zeros(model.arch.num_params)
    dec_off = model.arch.num_params - Wd.size - bd.size
    grad[dec_off:dec_off + Wd.size] = (emb.T @ dlogits).ravel()
    grad[dec_off + Wd.size:] = dlogits.sum(axis=0)
    _backprop_representation(layers, acts, pres, dlogits @ Wd.T, grad)
    return loss, grad


def uniformity_loss_grad(model: MlpModel, X) -> tuple[float, np.ndarray]:
    """log of the mean, over unordered sample pairs, of exp(-||f(x1) - f(x2)||^2).

    Only the representation layers receive gradient; the decision-layer block
    of the returned gradient is exactly zero.
    """
    X, _ = _as_batch(model, X)
    B = X.shape[0]
    if B < 2:
        raise ValueError("uniformity loss needs at least 2 samples")
    layers, acts, pres = _forward_cache(model, X)
    E = acts[-1]
    sq = np.sum(E * E, axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (E @ E.T), 0.0)
    iu = np.triu_indices(B, k=1)
    neg = -D[iu]
    m = neg.max()
    w_pairs = np.exp(neg - m)
    total = w_pairs.sum()
    loss = float(m + math.log(total) - math.log(neg.shape[0]))

    # softmax weight of each pair; dL/dD_ab = -w_ab
    Wm = np.zeros((B, B))
    Wm[iu] = w_pairs / total
    Wm = Wm + Wm.T
    # d||e_a - e_b||^2 / d e_a = 2 (e_a - e_b)
    d_embed = -2.0 * (Wm.sum(axis=1)[:, None] * E - Wm @ E)

    grad = np.zeros(model.arch.num_params)
    _backprop_representation(layers, acts, pres, d_embed, grad)
    return loss, grad


LOSSES = ("cross_entropy", "uniformity")


def sgd_local_train(
    model: MlpModel,
    X,
    y,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    loss: str = "cross_entropy",
) -> MlpModel:
    """Plain minibatch SGD for ``steps`` updates; returns a new model.

    Samples are reshuffled at every epoch boundary. Only full batches are used
    unless the dataset is smaller than one batch, in which case the whole set
    forms the batch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("client has no data")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    values = model.values.copy()
    if steps == 0:
        return model.with_values(values)
    bs = min(batch_size, n)
    per_epoch = n // bs
    work = model.with_values(values)
    perm = None
    for step in range(steps):
        slot = step % per_epoch
        if slot == 0:
            perm = rng.permutation(n)
        idx = perm[slot * bs:(slot + 1) * bs]
        if loss == "cross_entropy":
            _, g = ce_loss_grad(work, X[idx], y[idx])
        else:
            _, g = uniformity_loss_grad(work, X[idx])
        values = values - lr * g
        work = work.with_values(values)
    return work
