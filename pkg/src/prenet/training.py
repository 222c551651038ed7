"""Training and evaluation loops over labeled sequence datasets."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data_io import DatasetItem
from .errors import NumericFailureError
from .neural import AdamState, SequenceInputs, train_step
from .pipeline import ModelParams, PipelineConfig, _map, predict, prepare_sequence

log = logging.getLogger(__name__)


def prepare_items(items: Sequence[DatasetItem], cfg: PipelineConfig, threads: int = 1) -> list[SequenceInputs]:
    """Geometric analysis of every sequence; parameters are not involved."""
    return _map(lambda it: prepare_sequence(it.load(), cfg)[0], list(items), threads)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in self.__dict__.items() if v is not None}, sort_keys=True)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochLog] = field(default_factory=list)
    failed: bool = False
    error: str | None = None


def accuracy(params: ModelParams, inputs: Sequence[SequenceInputs], labels) -> float:
    if len(inputs) == 0:
        return float("nan")
    probs = predict(params, inputs)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def per_class_accuracy(params: ModelParams, inputs, labels, num_classes: int) -> dict[int, float]:
    labels = np.asarray(labels)
    pred = predict(params, inputs).argmax(axis=1)
    out = {}
    for c in range(num_classes):
        sel = labels == c
        out[c] = float(np.mean(pred[sel] == c)) if sel.any() else float("nan")
    return out


def train(
    params: ModelParams,
    train_inputs: Sequence[SequenceInputs],
    train_labels,
    epochs: int,
    lr: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
    test_inputs: Sequence[SequenceInputs] = (),
    test_labels=(),
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam training with a seeded shuffle per epoch.

    On a non-finite loss training stops and the result carries the params
    of the last completed epoch.
    """
    labels = np.asarray(train_labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    result = TrainResult(params)
    good = copy.deepcopy(params.tensors)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_inputs))
        losses = []
        try:
            for i in range(0, len(order), batch_size):
                idx = order[i : i + batch_size]
                _, loss = train_step(params.model, params.tensors, [train_inputs[j] for j in idx], labels[idx], state)
                losses.append(loss * len(idx))
        except NumericFailureError as exc:
            params.tensors = good
            result.failed, result.error = True, f"epoch {epoch}: {exc}"
            log.error("numeric failure in %s", result.error)
            break
        entry = EpochLog(epoch, float(np.sum(losses) / len(order)), accuracy(params, train_inputs, labels))
        if len(test_inputs):
            entry.test_accuracy = accuracy(params, test_inputs, test_labels)
        result.history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        good = copy.deepcopy(params.tensors)
    return result
