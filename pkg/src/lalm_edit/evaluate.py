"""Efficacy, paraphrase and neighbor scores, and their harmonic aggregate."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .data import EvalSuite
from .model import ToyLALM, batch_probabilities

TABLE_HEADER = ("modality", "method", "score", "es", "ps", "ns")


@dataclass
class SuiteScores:
    es: float
    ps: float
    ns: float
    p_target: float
    p_true: float


@dataclass
class Metrics:
    es: float
    ps: float
    ns: float
    s: float
    n_edits: int

    def to_json(self) -> dict:
        return asdict(self)


def _prefers(probs: np.ndarray, winner: int, loser: int) -> np.ndarray:
    return probs[:, winner] > probs[:, loser]


def efficacy(model: ToyLALM, suite: EvalSuite) -> int:
    p = batch_probabilities(model, [suite.edit_prompt])
    return int(_prefers(p, suite.fact.object_target, suite.fact.object_true)[0])


def paraphrase(model: ToyLALM, suite: EvalSuite) -> float:
    if not suite.paraphrases:
        raise ValueError("empty paraphrase set")
    p = batch_probabilities(model, suite.paraphrases)
    return float(_prefers(p, suite.fact.object_target, suite.fact.object_true).mean())


def neighbor(model: ToyLALM, suite: EvalSuite) -> float:
    # neighbors share the edited fact's original object by construction
    if not suite.neighbors:
        raise ValueError("empty neighbor set")
    p = batch_probabilities(model, suite.neighbors)
    return float(_prefers(p, suite.fact.object_true, suite.fact.object_target).mean())


def score_suite(model: ToyLALM, suite: EvalSuite) -> SuiteScores:
    """All three scores from one batched pass over the suite's prompts."""
    prompts = [suite.edit_prompt, *suite.paraphrases, *suite.neighbors]
    p = batch_probabilities(model, prompts)
    t, o = suite.fact.object_target, suite.fact.object_true
    n_par = len(suite.paraphrases)
    return SuiteScores(
        es=float(p[0, t] > p[0, o]),
        ps=float(np.mean(p[1 : 1 + n_par, t] > p[1 : 1 + n_par, o])),
        ns=float(np.mean(p[1 + n_par :, o] > p[1 + n_par :, t])),
        p_target=float(p[0, t]),
        p_true=float(p[0, o]),
    )


def harmonic_score(es: float, ps: float, ns: float) -> float:
    if min(es, ps, ns) <= 0:
        return 0.0
    return 3.0 / (1.0 / es + 1.0 / ps + 1.0 / ns)


def aggregate(per_edit) -> Metrics:
    """Mean ES/PS/NS in percent and their harmonic mean S.

    Items are SuiteScores or ``(es, ps, ns)`` fractions.
    """
    rows = [(r.es, r.ps, r.ns) if isinstance(r, SuiteScores) else tuple(r) for r in per_edit]
    if not rows:
        raise ValueError("nothing to aggregate")
    es, ps, ns = (100.0 * float(np.mean(c)) for c in zip(*rows))
    return Metrics(es=es, ps=ps, ns=ns, s=harmonic_score(es, ps, ns), n_edits=len(rows))


def table_csv(rows: list[tuple[str, str, Metrics]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for modality, method, m in rows:
        w.writerow([modality, method, f"{m.s:.2f}", f"{m.es:.2f}", f"{m.ps:.2f}", f"{m.ns:.2f}"])
    return buf.getvalue()
