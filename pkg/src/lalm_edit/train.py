"""Fitting the toy model to a fact corpus."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import FactCorpus, FactTriple, SpokenPrompt
from .model import ToyLALM, batch_probabilities, prompt_tensors

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainReport:
    epochs_run: int
    final_accuracy: float
    loss_curve: list[tuple[int, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "final_accuracy": self.final_accuracy,
            "loss_curve": [[e, l] for e, l in self.loss_curve],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


def training_prompts(corpus: FactCorpus, config) -> list[tuple[SpokenPrompt, int]]:
    """Every (subject, relation, template) rendering paired with its true object."""
    out = []
    for f in corpus.facts:
        for t in range(len(corpus.templates[f.relation])):
            out.append((corpus.render(f.subject, f.relation, t, config), f.object_true))
    return out


def accuracy(model: ToyLALM, corpus: FactCorpus, prompts: list[SpokenPrompt] | None = None) -> float:
    """Fraction of facts whose true object is the vocabulary argmax on the edit prompt."""
    if prompts is None:
        prompts = [corpus.render_fact(f, model.config) for f in corpus.facts]
    probs = batch_probabilities(model, prompts)
    truth = np.array([f.object_true for f in corpus.facts])
    return float(np.mean(probs.argmax(1) == truth))


def train(
    model: ToyLALM,
    corpus: FactCorpus,
    lr: float = 1e-3,
    max_epochs: int = 300,
    target_accuracy: float = 0.95,
    seed: int = 7,
    batch_size: int = 32,
) -> TrainReport:
    """Adam on mean NLL of the true object at the answer position.

    Minibatches are drawn within groups of equal sequence length.  Stops once
    the edit-prompt accuracy reaches ``target_accuracy`` or after
    ``max_epochs``.  Parameters are snapped to float32 precision at the end so
    that a saved checkpoint reloads bit-identically.
    """
    if not 0 < target_accuracy <= 1:
        raise ValueError("target_accuracy must be in (0, 1]")
    config = model.config
    groups: dict[tuple, list[tuple[SpokenPrompt, int]]] = {}
    for p, o in training_prompts(corpus, config):
        groups.setdefault((p.n_frames, len(p.instruction)), []).append((p, o))
    tensors = []
    for key in sorted(groups):
        items = groups[key]
        frames, instr = prompt_tensors(p for p, _ in items)
        tensors.append((frames, instr, torch.tensor([o for _, o in items])))
    eval_prompts = [corpus.render_fact(f, config) for f in corpus.facts]
    n_total = sum(len(t[2]) for t in tensors)

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    curve: list[tuple[int, float]] = []
    acc = accuracy(model, corpus, eval_prompts)
    epoch = 0
    while epoch < max_epochs and acc < target_accuracy:
        epoch += 1
        batches = []
        for gi, (_, _, targets) in enumerate(tensors):
            order = rng.permutation(len(targets))
            batches += [(gi, order[i : i + batch_size]) for i in range(0, len(order), batch_size)]
        total = 0.0
        for bi in rng.permutation(len(batches)):
            gi, idx = batches[bi]
            frames, instr, targets = tensors[gi]
            idx = torch.as_tensor(idx)
            logits = model.run(frames[idx], instr[idx])
            loss = torch.nn.functional.cross_entropy(logits, targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}; last finite epoch {epoch - 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append((epoch, total / n_total))
        acc = accuracy(model, corpus, eval_prompts)
        log.info("epoch %d loss %.4f acc %.3f", epoch, curve[-1][1], acc)
    model.round_to_float32()
    acc = accuracy(model, corpus, eval_prompts)
    if not curve:
        curve.append((0, _mean_nll(model, tensors)))
    return TrainReport(epochs_run=epoch, final_accuracy=acc, loss_curve=curve)


def _mean_nll(model: ToyLALM, tensors) -> float:
    total, n = 0.0, 0
    with torch.no_grad():
        for frames, instr, targets in tensors:
            logits = model.run(frames, instr)
            total += float(torch.nn.functional.cross_entropy(logits, targets, reduction="sum"))
            n += len(targets)
    return total / n


def filter_known(model: ToyLALM, corpus: FactCorpus, facts: list[FactTriple] | None = None) -> list[FactTriple]:
    """Facts whose true object wins the argmax over the object lexicon
    (ties go to the lowest token id)."""
    facts = corpus.facts if facts is None else facts
    if not facts:
        return []
    objects = np.array(corpus.objects)
    probs = batch_probabilities(model, [corpus.render_fact(f, model.config) for f in facts])
    winners = objects[probs[:, objects].argmax(1)]
    return [f for f, w in zip(facts, winners) if w == f.object_true]
