"""Analysis probes: gradient alignment, Taylor importance, filter redundancy and recovery.

Probes work on copies of the network and never modify the model they are
given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import evaluation
from .model import clone, drop_filters
from .stream import iterate_task


def _classification_loss(classes: Optional[Sequence[int]]) -> Callable:
    def loss_fn(net, images, labels):
        logits = net(images)
        if classes is not None:
            mask = torch.zeros(logits.shape[1], dtype=torch.bool)
            mask[list(classes)] = True
            logits = logits.masked_fill(~mask, float("-inf"))
        return F.cross_entropy(logits, labels)
    return loss_fn


def _mean_gradient(net, batches, loss_fn, train_mode: bool) -> torch.Tensor:
    params = [p for p in net.parameters() if p.requires_grad]
    total = [torch.zeros_like(p) for p in params]
    n = 0
    net.train(train_mode)
    for images, labels in batches:
        net.zero_grad(set_to_none=True)
        loss_fn(net, images, labels).backward()
        for acc, p in zip(total, params):
            if p.grad is not None:
                acc += p.grad
        n += 1
    if n == 0:
        raise ValueError("no batches given")
    return torch.cat([(acc / n).flatten() for acc in total])


def cosine_similarity(u, v) -> float:
    u = torch.as_tensor(u, dtype=torch.float64).flatten()
    v = torch.as_tensor(v, dtype=torch.float64).flatten()
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm gradient")
    return float(torch.clamp(torch.dot(u, v) / (nu * nv), -1.0, 1.0))


def gradient_alignment(net, batches_i, batches_next, loss_fn: Optional[Callable] = None,
                       classes: Optional[Sequence[int]] = None) -> float:
    """Cosine between the mean classification gradients on two batch sets.

    Gradients cover every trainable parameter, averaged over the batches of
    each side; the probe runs on a copy of ``net`` in training mode.
    """
    loss_fn = loss_fn or _classification_loss(classes)
    probe = clone(net)
    g_i = _mean_gradient(probe, list(batches_i), loss_fn, train_mode=True)
    probe = clone(net)
    g_next = _mean_gradient(probe, list(batches_next), loss_fn, train_mode=True)
    return cosine_similarity(g_i, g_next)


@dataclass
class TaylorImportance:
    """First-order Taylor scores for one loss evaluation.

    ``parameter`` maps every parameter name to ``(grad * weight) ** 2``.
    ``filter`` maps conv layer names to per-output-filter sums of those
    scores and ``delta`` to the signed first-order loss change
    ``-sum(grad * weight)`` predicted for zeroing each filter.
    """

    parameter: dict
    filter: dict
    delta: dict
    loss: float


def _conv_filter_params(module: nn.Conv2d):
    yield module.weight
    if module.bias is not None:
        yield module.bias


def taylor_importance(net, batches, loss_fn: Optional[Callable] = None,
                      classes: Optional[Sequence[int]] = None, include_pretext: bool = False) -> TaylorImportance:
    """Score parameters and conv filters by the product of gradient and weight.

    The gradient is that of the mean loss over ``batches``, evaluated on a
    copy of ``net`` in eval mode so that the loss is a deterministic function
    of the weights.
    """
    loss_fn = loss_fn or _classification_loss(classes)
    probe = clone(net)
    probe.eval()
    probe.zero_grad(set_to_none=True)
    batches = list(batches)
    if not batches:
        raise ValueError("no batches given")
    total = 0.0
    for images, labels in batches:
        loss = loss_fn(probe, images, labels) / len(batches)
        loss.backward()
        total += loss.item()

    parameter = {}
    for name, p in probe.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        parameter[name] = (g.detach() * p.detach()).pow(2)

    filters, delta = {}, {}
    for name, module in probe.named_modules():
        if not isinstance(module, nn.Conv2d):
            continue
        if name.startswith("pretext_head") and not include_pretext:
            continue
        score = torch.zeros(module.out_channels, dtype=torch.float64)
        first_order = torch.zeros(module.out_channels, dtype=torch.float64)
        for p in _conv_filter_params(module):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            gw = (g.detach() * p.detach()).double().reshape(module.out_channels, -1)
            score += gw.pow(2).sum(1)
            first_order -= gw.sum(1)
        filters[name] = score.numpy()
        delta[name] = first_order.numpy()
    return TaylorImportance(parameter, filters, delta, total)


def above_mean_fraction(scores):
    """Fraction of entries strictly above their layer's mean.

    Accepts one score array or a mapping of layer name to scores.
    """
    if isinstance(scores, dict):
        return {name: above_mean_fraction(s) for name, s in scores.items()}
    s = np.asarray(scores.detach().cpu() if isinstance(scores, torch.Tensor) else scores,
                   dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("empty layer")
    return float(np.count_nonzero(s > s.mean()) / s.size)


def parameter_above_mean_fraction(importance: TaylorImportance) -> dict:
    """Per conv layer, the fraction of individual weights scoring above the layer mean."""
    out = {}
    for name in importance.filter:
        out[name] = above_mean_fraction(importance.parameter[name + ".weight"])
    return out


def filter_distance_matrix(filters) -> np.ndarray:
    """Pairwise L2 distances between flattened filters (correctly rounded sums)."""
    f = np.asarray(filters.detach().cpu() if isinstance(filters, torch.Tensor) else filters, dtype=np.float64)
    f = f.reshape(f.shape[0], -1)
    n = f.shape[0]
    dist = np.zeros((n, n))
    for d in range(n):
        diff = f[d + 1:] - f[d]
        sq = diff * diff
        for off, row in enumerate(sq, start=d + 1):
            dist[d, off] = dist[off, d] = math.sqrt(math.fsum(row))
    return dist


def geometric_median_similarity(filters) -> tuple:
    """Pick the filter with the smallest mean L2 distance to all filters in its layer.

    ``filters`` has shape ``(F, ...)``; returns ``(index, g)`` where ``g`` is
    that mean distance (the zero self-distance included).
    """
    f = np.asarray(filters.detach().cpu() if isinstance(filters, torch.Tensor) else filters, dtype=np.float64)
    if f.ndim < 1 or f.shape[0] < 2:
        raise ValueError("need at least two filters")
    dist = filter_distance_matrix(f)
    n = f.shape[0]
    g = np.array([math.fsum(dist[d]) / n for d in range(n)])
    best = int(np.argmin(g))
    return best, float(g[best])


def layer_similarity_report(net, include_pretext: bool = False) -> dict:
    """``{conv layer: (selected filter, g)}`` for every conv layer with at least two filters."""
    report = {}
    for name, module in net.named_modules():
        if isinstance(module, nn.Conv2d) and module.out_channels >= 2:
            if name.startswith("pretext_head") and not include_pretext:
                continue
            report[name] = geometric_median_similarity(module.weight)
    return report


def recovery_experiment(net, stream, task_index: int, drop_fraction: float = 0.3, retrain_batches: int = 10,
                        lr: float = 0.01, batch_size: int = 10, seed: int = 0,
                        layers: Optional[Iterable[str]] = None) -> dict:
    """Drop conv filters from a copy of ``net`` and retrain it with plain cross-entropy.

    Accuracy is class-IL on ``task_index``'s test set; retraining uses
    cross-entropy over the classes seen up to that task. The trace holds the
    post-drop accuracy followed by the accuracy after each retraining batch.
    """
    model = clone(net)
    seen = stream.classes_up_to(task_index)
    x_test, y_test = stream.task_test(task_index)
    pre = evaluation.accuracy(model, x_test, y_test)

    layers = list(layers) if layers is not None else model.conv_layers()
    dropped = {}
    for i, layer in enumerate(layers):
        _, idx = drop_filters(model, layer, drop_fraction, rng_seed=[seed, i])
        dropped[layer] = idx

    optimizer = torch.optim.SGD(model.parameters(), lr=lr)
    loss_fn = _classification_loss(seen)
    trace = [evaluation.accuracy(model, x_test, y_test)]
    done, epoch = 0, 0
    while done < retrain_batches:
        for images, labels in iterate_task(stream, task_index, batch_size, shuffle_seed=seed + 7919 * epoch):
            model.train()
            optimizer.zero_grad(set_to_none=True)
            loss_fn(model, images, labels).backward()
            optimizer.step()
            trace.append(evaluation.accuracy(model, x_test, y_test))
            done += 1
            if done >= retrain_batches:
                break
        epoch += 1
    return {"task": task_index, "drop_fraction": drop_fraction, "pre_drop": pre, "trace": trace,
            "dropped": dropped}
