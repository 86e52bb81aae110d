"""Synthetic spoken-fact corpus.

Facts are (subject, relation, object) triples over pseudo-words.  They are
rendered as pseudo-speech: every word contributes ``frames_per_word`` frames
equal to a fixed per-word base embedding plus a little seeded jitter, so
the word-to-frame alignment is known exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

VOICE_SEED = 20240917
SPECIALS = ("<pad>", "<listen>", "complete", "fact", "<answer>")
INSTRUCTION = ("<listen>", "complete", "fact", "<answer>")


@dataclass(frozen=True)
class FactTriple:
    subject: int
    relation: int
    object_true: int
    object_target: int
    template_id: int

    def __post_init__(self):
        if self.object_true == self.object_target:
            raise ValueError("object_target must differ from object_true")

    def to_json(self) -> dict:
        return {
            "s": self.subject,
            "r": self.relation,
            "o_true": self.object_true,
            "o_target": self.object_target,
            "template_id": self.template_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FactTriple":
        return cls(d["s"], d["r"], d["o_true"], d["o_target"], d["template_id"])


@dataclass
class SpokenPrompt:
    frames: np.ndarray
    alignment: list[tuple[int, int, int]]
    words: list[int]
    instruction: list[int]
    subject_span: tuple[int, int]

    def __post_init__(self):
        expect = 0
        for i, (w, first, last) in enumerate(self.alignment):
            if w != i or first != expect or last < first:
                raise ValueError("alignment spans must be contiguous and in word order")
            expect = last + 1
        if expect != self.frames.shape[0]:
            raise ValueError("alignment must cover every frame")
        s0, s1 = self.subject_span
        if not 0 <= s0 <= s1 < len(self.words):
            raise ValueError("subject_span outside words")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def subject_frames(self) -> tuple[int, int]:
        s0, s1 = self.subject_span
        return self.alignment[s0][1], self.alignment[s1][2]

    def tokens(self) -> tuple[int, ...]:
        return tuple(self.words) + tuple(self.instruction)


@dataclass
class EvalSuite:
    fact: FactTriple
    edit_prompt: SpokenPrompt
    paraphrases: list[SpokenPrompt]
    neighbors: list[SpokenPrompt]
    neighbor_facts: list[FactTriple] = field(default_factory=list)


# --------------------------------------------------------------------- rendering


def base_embedding(token: int, d: int, voice_seed: int = VOICE_SEED) -> np.ndarray:
    return np.random.default_rng([voice_seed, token]).standard_normal(d)


def render_speech(
    words,
    instruction,
    subject_span,
    config: ModelConfig,
    seed: int,
    jitter: float = 0.05,
    voice_seed: int = VOICE_SEED,
) -> SpokenPrompt:
    """Render words into ``frames_per_word`` jittered frames each.

    Jitter is Gaussian with std ``jitter`` times the RMS of the word's base
    embedding, drawn from a generator seeded by ``(seed, words)``.
    """
    words = [int(w) for w in words]
    if not words:
        raise ValueError("words must be nonempty")
    fpw = config.frames_per_word
    rng = np.random.default_rng([seed, *words])
    frames, alignment = [], []
    for i, w in enumerate(words):
        base = base_embedding(w, config.d_audio, voice_seed)
        rms = np.sqrt(np.mean(base**2))
        frames.append(base + jitter * rms * rng.standard_normal((fpw, config.d_audio)))
        alignment.append((i, i * fpw, (i + 1) * fpw - 1))
    return SpokenPrompt(
        frames=np.concatenate(frames),
        alignment=alignment,
        words=words,
        instruction=[int(t) for t in instruction],
        subject_span=(int(subject_span[0]), int(subject_span[1])),
    )


def recover_alignment(frames: np.ndarray, vocabulary, d: int, voice_seed: int = VOICE_SEED):
    """Nearest-base-embedding decoding of frames back to (word, first, last) runs."""
    vocabulary = list(vocabulary)
    bases = np.stack([base_embedding(t, d, voice_seed) for t in vocabulary])
    dist = ((frames[:, None, :] - bases[None]) ** 2).sum(-1)
    labels = [vocabulary[i] for i in dist.argmin(1)]
    spans, words = [], []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            spans.append((len(spans), start, i - 1))
            words.append(labels[start])
            start = i
    return words, spans


PROMPT_MAGIC = b"LALMFRM1"


def write_prompt(path, prompt: SpokenPrompt) -> None:
    """Binary frame file: header, float32 frames, int32 alignment/word/instruction tables."""
    T, d = prompt.frames.shape
    with open(path, "wb") as f:
        f.write(PROMPT_MAGIC)
        f.write(struct.pack("<6I", T, d, len(prompt.words), len(prompt.instruction), *prompt.subject_span))
        f.write(prompt.frames.astype("<f4").tobytes())
        f.write(np.asarray(prompt.alignment, dtype="<i4").tobytes())
        f.write(np.asarray(prompt.words, dtype="<i4").tobytes())
        f.write(np.asarray(prompt.instruction, dtype="<i4").tobytes())


def read_prompt(path) -> SpokenPrompt:
    with open(path, "rb") as f:
        if f.read(8) != PROMPT_MAGIC:
            raise ValueError("not a prompt frame file")
        T, d, nw, ni, s0, s1 = struct.unpack("<6I", f.read(24))
        frames = np.frombuffer(f.read(4 * T * d), dtype="<f4").reshape(T, d).astype(np.float64)
        alignment = np.frombuffer(f.read(12 * nw), dtype="<i4").reshape(nw, 3)
        words = np.frombuffer(f.read(4 * nw), dtype="<i4")
        instr = np.frombuffer(f.read(4 * ni), dtype="<i4")
    return SpokenPrompt(
        frames=frames,
        alignment=[tuple(int(v) for v in row) for row in alignment],
        words=words.tolist(),
        instruction=instr.tolist(),
        subject_span=(s0, s1),
    )


# --------------------------------------------------------------------- corpus

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        syl = rng.integers(2, 4)
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class FactCorpus:
    tokens: list[str]
    subjects: list[list[int]]
    templates: list[list[list[int]]]
    relation_objects: list[list[int]]
    instruction: list[int]
    neutral: list[int]
    facts: list[FactTriple]
    seed: int

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def objects(self) -> list[int]:
        return sorted({o for objs in self.relation_objects for o in objs})

    def words(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def prompt_words(self, subject: int, relation: int, template: int) -> tuple[list[int], tuple[int, int]]:
        subj = self.subjects[subject]
        return list(subj) + list(self.templates[relation][template]), (0, len(subj) - 1)

    def prompt_seed(self, subject: int, relation: int, template: int) -> int:
        return int(np.random.SeedSequence([self.seed, subject, relation, template]).generate_state(1)[0])

    def render(self, subject: int, relation: int, template: int, config: ModelConfig, **kw) -> SpokenPrompt:
        words, span = self.prompt_words(subject, relation, template)
        return render_speech(words, self.instruction, span, config, self.prompt_seed(subject, relation, template), **kw)

    def render_fact(self, fact: FactTriple, config: ModelConfig, template: int | None = None, **kw) -> SpokenPrompt:
        t = fact.template_id if template is None else template
        return self.render(fact.subject, fact.relation, t, config, **kw)

    def neighbors(self, fact: FactTriple) -> list[FactTriple]:
        return [
            f
            for f in self.facts
            if f.relation == fact.relation and f.object_true == fact.object_true and f.subject != fact.subject
        ]

    def neutral_prompts(self, n: int, config: ModelConfig, seed: int = 0, length: int = 3) -> list[SpokenPrompt]:
        """Prompts made only of neutral words, which never appear in any fact."""
        rng = np.random.default_rng([self.seed, seed, 77])
        out = []
        for i in range(n):
            words = rng.choice(self.neutral, size=length, replace=False)
            out.append(render_speech(words, self.instruction, (0, 0), config, seed=int(rng.integers(2**31))))
        return out

    def to_json(self) -> dict:
        return {
            "lexicons": {
                "tokens": self.tokens,
                "subjects": self.subjects,
                "templates": self.templates,
                "relation_objects": self.relation_objects,
                "instruction": self.instruction,
                "neutral": self.neutral,
            },
            "facts": [f.to_json() for f in self.facts],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FactCorpus":
        lx = d["lexicons"]
        return cls(
            tokens=lx["tokens"],
            subjects=lx["subjects"],
            templates=lx["templates"],
            relation_objects=lx["relation_objects"],
            instruction=lx["instruction"],
            neutral=lx["neutral"],
            facts=[FactTriple.from_json(f) for f in d["facts"]],
            seed=d["seed"],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "FactCorpus":
        return cls.from_json(json.loads(Path(path).read_text()))


def generate_fact_corpus(
    n_subjects: int = 96,
    n_relations: int = 3,
    n_objects: int = 24,
    templates_per_relation: int = 3,
    seed: int = 7,
    n_neutral: int = 32,
    min_neighbors: int = 5,
) -> FactCorpus:
    """Build a balanced synthetic corpus.

    Objects are split evenly between relations and assigned round-robin over
    shuffled subjects, so every object of a relation is shared by at least
    ``min_neighbors + 1`` subjects.
    """
    if n_objects < 2:
        raise ValueError("n_objects must be >= 2 so a counterfactual target exists")
    if templates_per_relation < 3:
        raise ValueError("templates_per_relation must be >= 3 (edit prompt + 2 paraphrases)")
    per_rel = n_objects // n_relations
    if per_rel < 2:
        raise ValueError(f"{n_objects} objects cannot give each of {n_relations} relations two objects")
    if n_subjects // per_rel < min_neighbors + 1:
        raise ValueError(
            f"{n_subjects} subjects over {per_rel} objects per relation leaves fewer than "
            f"{min_neighbors} neighbors per fact"
        )
    rng = np.random.default_rng(seed)
    taken: set[str] = set(SPECIALS)
    tokens = list(SPECIALS)

    def add(words):
        start = len(tokens)
        tokens.extend(words)
        return list(range(start, len(tokens)))

    subjects = []
    for _ in range(n_subjects):
        n_words = int(rng.choice([1, 2, 3], p=[0.3, 0.4, 0.3]))
        subjects.append(add(_pseudo_words(rng, n_words, taken)))
    templates = [
        [add(_pseudo_words(rng, int(rng.integers(2, 4)), taken)) for _ in range(templates_per_relation)]
        for _ in range(n_relations)
    ]
    objects = add([w.upper() for w in _pseudo_words(rng, per_rel * n_relations, taken)])
    relation_objects = [objects[r * per_rel : (r + 1) * per_rel] for r in range(n_relations)]
    neutral = add(_pseudo_words(rng, n_neutral, taken))
    instruction = [tokens.index(t) for t in INSTRUCTION]

    facts = []
    assignment = []
    for r in range(n_relations):
        pool = np.resize(np.arange(per_rel), n_subjects)
        assignment.append(rng.permutation(pool))
    for s in range(n_subjects):
        for r in range(n_relations):
            objs = relation_objects[r]
            o_true = objs[assignment[r][s]]
            others = [o for o in objs if o != o_true]
            o_target = others[int(rng.integers(len(others)))]
            t = int(rng.integers(templates_per_relation))
            facts.append(FactTriple(s, r, o_true, o_target, t))
    return FactCorpus(tokens, subjects, templates, relation_objects, instruction, neutral, facts, seed)


def make_eval_suite(
    fact: FactTriple,
    corpus: FactCorpus,
    config: ModelConfig,
    seed: int = 0,
    n_paraphrases: int = 2,
    n_neighbors: int = 5,
    pool: list[FactTriple] | None = None,
) -> EvalSuite:
    """Edit prompt, paraphrases (other templates of the same relation) and
    neighbors (other subjects with the same relation and true object).

    ``pool`` restricts neighbor candidates, e.g. to facts the model knows.
    """
    if fact not in corpus.facts:
        raise ValueError("fact is not part of the corpus")
    n_templates = len(corpus.templates[fact.relation])
    others = [t for t in range(n_templates) if t != fact.template_id]
    if len(others) < n_paraphrases:
        raise ValueError(f"relation {fact.relation} has too few templates for {n_paraphrases} paraphrases")
    candidates = corpus.neighbors(fact)
    if pool is not None:
        allowed = set(pool)
        candidates = [f for f in candidates if f in allowed]
    if len(candidates) < n_neighbors:
        raise ValueError(f"relation {fact.relation} has only {len(candidates)} neighbors for this fact")
    rng = np.random.default_rng([corpus.seed, seed, fact.subject, fact.relation])
    chosen = sorted(rng.choice(len(candidates), size=n_neighbors, replace=False))
    neighbor_facts = [candidates[i] for i in chosen]
    subj = set(corpus.subjects[fact.subject])
    neighbors = [corpus.render_fact(f, config, template=fact.template_id) for f in neighbor_facts]
    for p in neighbors:
        assert not subj.intersection(p.words), "neighbor prompt shares a subject token"
    return EvalSuite(
        fact=fact,
        edit_prompt=corpus.render_fact(fact, config),
        paraphrases=[corpus.render_fact(fact, config, template=t) for t in others[:n_paraphrases]],
        neighbors=neighbors,
        neighbor_facts=neighbor_facts,
    )


def config_for(corpus: FactCorpus, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=corpus.vocab_size, **overrides)
