"""MLP feature extractor, per-task linear heads, and cross-entropy loss.

Functions accept either plain arrays (evaluation, embeddings) or tape
nodes (training). Weights are stored as ``(fan_in, fan_out)`` so a layer is
``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fewdomain import autodiff as ad

Layer = tuple  # (weight, bias), arrays or nodes


@dataclass
class ParameterSet:
    theta: list[Layer]
    heads: dict[str, Layer] = field(default_factory=dict)

    @property
    def embed_dim(self) -> int:
        return self.theta[-1][0].shape[1]

    @property
    def input_dim(self) -> int:
        return self.theta[0][0].shape[0]

    def copy(self) -> ParameterSet:
        return ParameterSet(
            theta=[(w.copy(), b.copy()) for w, b in self.theta],
            heads={k: (w.copy(), b.copy()) for k, (w, b) in self.heads.items()},
        )

    def validate(self) -> None:
        for i in range(1, len(self.theta)):
            prev, cur = self.theta[i - 1][0], self.theta[i][0]
            if prev.shape[1] != cur.shape[0]:
                raise ValueError(f"layer {i} expects width {cur.shape[0]}, previous layer gives {prev.shape[1]}")
        for tid, (w, b) in self.heads.items():
            if w.shape[0] != self.embed_dim:
                raise ValueError(f"head {tid!r} input width {w.shape[0]} != embedding dim {self.embed_dim}")
            if b.shape != (w.shape[1],):
                raise ValueError(f"head {tid!r} bias shape {b.shape} != ({w.shape[1]},)")

    def save(self, path) -> None:
        arrays = {}
        for i, (w, b) in enumerate(self.theta):
            arrays[f"theta/{i}/W"] = w
            arrays[f"theta/{i}/b"] = b
        for tid, (w, b) in self.heads.items():
            arrays[f"head/{tid}/W"] = w
            arrays[f"head/{tid}/b"] = b
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> ParameterSet:
        with np.load(path) as data:
            keys = list(data.keys())
            n = len({k.split("/")[1] for k in keys if k.startswith("theta/")})
            theta = [(data[f"theta/{i}/W"], data[f"theta/{i}/b"]) for i in range(n)]
            heads = {}
            for k in keys:
                if k.startswith("head/") and k.endswith("/W"):
                    tid = k[len("head/"):-len("/W")]
                    heads[tid] = (data[k], data[f"head/{tid}/b"])
        return cls(theta, heads)


def init_layer(fan_in: int, fan_out: int, rng: np.random.Generator) -> Layer:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def init_params(layer_widths, head_specs: dict[str, int], rng: np.random.Generator) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``layer_widths`` lists the extractor widths from input to embedding, so
    ``[10, 64, 32]`` is two layers. Heads are drawn in sorted task-id order.
    """
    widths = [int(w) for w in layer_widths]
    if len(widths) < 2:
        raise ValueError("layer_widths needs at least an input and an output width")
    if min(widths) < 1:
        raise ValueError(f"layer widths must be >= 1, got {widths}")
    theta = [init_layer(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
    heads = {}
    for tid in sorted(head_specs):
        c = int(head_specs[tid])
        if c < 2:
            raise ValueError(f"head {tid!r} needs at least 2 classes, got {c}")
        heads[tid] = init_layer(widths[-1], c, rng)
    return ParameterSet(theta, heads)


def _is_node(x) -> bool:
    return isinstance(x, ad.Node)


def _affine(x, w, b):
    if _is_node(w):
        if not _is_node(x):
            x = w.tape.constant(x)
        return ad.add(ad.matmul(x, w), b)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"input dimension {x.shape[-1]} does not match layer input {w.shape[0]}")
    return x @ w + b


def features(theta, x):
    """Extractor output: affine+relu per layer, no relu after the last.

    ``x`` is one vector of shape (d,) or a batch (n, d). With node weights
    the batch must be 2-D and the result is a tape node.
    """
    if _is_node(theta[0][0]):
        if not _is_node(x):
            x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = x
        for i, (w, b) in enumerate(theta):
            h = _affine(h, w, b)
            if i < len(theta) - 1:
                h = ad.relu(h)
        return h

    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != theta[0][0].shape[0]:
        raise ValueError(f"input dimension {x.shape[-1]} does not match extractor input {theta[0][0].shape[0]}")
    h = x
    for i, (w, b) in enumerate(theta):
        h = h @ w + b
        if i < len(theta) - 1:
            h = np.maximum(h, 0.0)
    return h


def predict(theta, head, x):
    """Logits of the head applied to the extractor output."""
    z = features(theta, x)
    w, b = head
    width = z.shape[-1]
    if w.shape[0] != width:
        raise ValueError(f"head input width {w.shape[0]} does not match embedding width {width}")
    return _affine(z, w, b)


def xent_loss(logits, label):
    """Softmax cross-entropy as a scalar node.

    ``logits`` may be one row of logits or a batch; for a batch ``label`` is
    an array and the mean loss is returned.
    """
    if not _is_node(logits):
        logits = ad.Tape().constant(np.atleast_2d(np.asarray(logits, dtype=np.float64)))
    labels = np.atleast_1d(np.asarray(label))
    n_cls = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError(f"label out of range for {n_cls} classes: {labels.tolist()}")
    return ad.mean(ad.softmax_xent(logits, labels))


def mean_domain_embedding(theta, domain) -> np.ndarray:
    """Average extractor output over a domain's samples, computed off-tape."""
    x = domain.X if hasattr(domain, "X") else np.asarray(domain, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot embed an empty domain")
    theta = [(np.asarray(w.value if _is_node(w) else w), np.asarray(b.value if _is_node(b) else b))
             for w, b in theta]
    return features(theta, x).mean(axis=0)
