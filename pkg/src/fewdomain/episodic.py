"""Episodic meta-learning objective on a single task.

One episode draws a batch from each source domain (meta-train) and each
target domain (meta-test) of a base task. The objective is

    J(theta) = F(theta) + beta * G(theta - alpha * grad F(theta))

where F and G average cross-entropy per domain first, then across domains.
The extractor and the task's head are adapted together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fewdomain import autodiff as ad
from fewdomain.model import features
from fewdomain.taskbench import Task, sample_batch

Batches = list  # list of (X, y) per domain


@dataclass
class EpisodicConfig:
    alpha: float = 0.05
    beta: float = 1.0
    eta: float = 0.01
    first_order: bool = False
    batch_per_domain: int = 16

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.batch_per_domain < 1:
            raise ValueError(f"batch_per_domain must be >= 1, got {self.batch_per_domain}")


@dataclass
class Episode:
    task_id: str
    meta_train: Batches
    meta_test: Batches

    def __post_init__(self):
        if not self.meta_train or not self.meta_test:
            raise ValueError(f"episode for {self.task_id!r} needs both meta-train and meta-test batches")
        dims = {x.shape[1] for x, _ in self.meta_train + self.meta_test}
        if len(dims) != 1:
            raise ValueError(f"episode for {self.task_id!r} mixes feature dims {sorted(dims)}")


def make_episode(task: Task, batch_per_domain: int, rng: np.random.Generator) -> Episode:
    if not task.tar_domains:
        raise ValueError(f"task {task.task_id!r} has no target domains to meta-test on")
    return Episode(
        task.task_id,
        sample_batch(task.src_domains, batch_per_domain, rng),
        sample_batch(task.tar_domains, batch_per_domain, rng),
    )


def _two_level_loss(theta, head, batches: Batches):
    """Mean over domains of the mean per-domain cross-entropy."""
    if not batches or any(len(y) == 0 for _, y in batches):
        raise ValueError("empty batch")
    tape = head[0].tape
    x = np.concatenate([b[0] for b in batches])
    y = np.concatenate([b[1] for b in batches])
    # every domain gets total weight 1/D regardless of its batch size
    weights = np.concatenate([np.full(len(b[1]), 1.0 / (len(batches) * len(b[1]))) for b in batches])
    w, b = head
    logits = ad.add(ad.matmul(features(theta, tape.constant(x)), w), b)
    losses = ad.softmax_xent(logits, y)
    return ad.sum(ad.mul(losses, tape.constant(weights)))


def meta_train_loss(theta, head, meta_train_batches: Batches):
    return _two_level_loss(theta, head, meta_train_batches)


def meta_test_loss(adapted, meta_test_batches: Batches):
    theta, head = adapted
    return _two_level_loss(theta, head, meta_test_batches)


def _flat(theta, head) -> list:
    return [p for layer in theta for p in layer] + list(head)


def _unflat(flat, n_layers):
    theta = [(flat[2 * i], flat[2 * i + 1]) for i in range(n_layers)]
    return theta, (flat[-2], flat[-1])


def adapt(variables, F, alpha: float, first_order: bool = False) -> list:
    """``v - alpha * dF/dv`` for each variable, kept on the tape.

    With ``first_order`` the gradient is detached, so later differentiation
    treats it as a constant.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    grads = ad.grad(F, variables, create_graph=not first_order)
    return [ad.sub(v, ad.scale(g, alpha)) for v, g in zip(variables, grads)]


def inner_step(params, F, alpha: float, first_order: bool = False):
    """Adapt extractor and head jointly by one gradient step on ``F``."""
    theta, head = params
    adapted = adapt(_flat(theta, head), F, alpha, first_order)
    return _unflat(adapted, len(theta))


def bilevel_objective(variables, train_loss, test_loss, alpha: float, beta: float,
                      first_order: bool = False):
    """Scalar node ``F(v) + beta * G(v - alpha * grad F(v))``.

    ``train_loss`` and ``test_loss`` map a list of variable nodes to a
    scalar node.
    """
    F = train_loss(variables)
    if beta == 0:
        return F
    G = test_loss(adapt(variables, F, alpha, first_order))
    return ad.add(F, ad.scale(G, beta))


def mldg_objective(params, episode: Episode, cfg: EpisodicConfig, tape: ad.Tape | None = None):
    """Evaluate J and its gradients.

    ``params`` is ``(theta, head)`` with plain arrays. Returns ``(J, grads)``
    where ``grads`` mirrors ``params``.
    """
    theta, head = params
    n = len(theta)
    tape = tape or ad.Tape()
    flat = [tape.variable(p) for p in _flat(theta, head)]
    J = bilevel_objective(
        flat,
        lambda v: meta_train_loss(*_unflat(v, n), episode.meta_train),
        lambda v: meta_test_loss(_unflat(v, n), episode.meta_test),
        cfg.alpha, cfg.beta, cfg.first_order,
    )
    grads = [g.value for g in ad.grad(J, flat)]
    return J.item(), _unflat(grads, n)


def erm_loss(theta, head, merged_batch):
    """Plain mean cross-entropy over a pooled batch ``(X, y)``."""
    x, y = merged_batch
    if len(y) == 0:
        raise ValueError("empty batch")
    tape = head[0].tape
    w, b = head
    logits = ad.add(ad.matmul(features(theta, tape.constant(x)), w), b)
    return ad.mean(ad.softmax_xent(logits, y))


def erm_step(params, merged_batch, tape: ad.Tape | None = None):
    """Loss value and gradients of :func:`erm_loss` for array params."""
    theta, head = params
    tape = tape or ad.Tape()
    flat = [tape.variable(p) for p in _flat(theta, head)]
    theta_n, head_n = _unflat(flat, len(theta))
    loss = erm_loss(theta_n, head_n, merged_batch)
    grads = [g.value for g in ad.grad(loss, flat)]
    return loss.item(), _unflat(grads, len(theta))


def sgd_update(params, grads, eta: float, names=None) -> None:
    """In-place ``p -= eta * g`` over matching (theta, head) structures."""
    if not eta > 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    p_flat = _flat(*params)
    g_flat = _flat(*grads)
    if len(p_flat) != len(g_flat):
        raise ValueError("parameter and gradient structures differ")
    for i, (p, g) in enumerate(zip(p_flat, g_flat)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i} shape {p.shape} != gradient shape {g.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else _param_name(i, len(p_flat))
            raise FloatingPointError(f"non-finite gradient for {label}")
    for p, g in zip(p_flat, g_flat):
        p -= eta * g


def _param_name(i: int, n: int) -> str:
    if i >= n - 2:
        return "head." + ("W" if i == n - 2 else "b")
    return f"theta[{i // 2}]." + ("W" if i % 2 == 0 else "b")
