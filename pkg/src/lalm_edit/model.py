"""A small audio-language transformer with capture/patch hook points.

Layout::

    frames (T x d_audio)
      -> conv1 -> conv2            (audio, layer 1 / 2, kind "conv")
      -> + audio positions
      -> audio blocks 0..L_a-1     (bidirectional, pre-LN)
      -> LayerNorm -> projector    (d_audio -> d_text)
      -> [projected frames ; instruction token embeddings] + text positions
      -> text blocks 0..L_t-1      (causal, pre-LN)
      -> LayerNorm -> output head  (logits read at the last position)

Every block exposes four hook points per layer: ``attn`` (attention output),
``key`` (input to the MLP down-projection), ``mlp`` (MLP output) and
``hidden`` (residual stream after the block).  The MLP down-projection has no
bias, so ``mlp = W_down @ key`` holds exactly at every position.

The decoder sequence starts with the projected audio frames, so decoder
position ``i < T_audio`` is the text-side view of audio frame ``i``.
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

if TYPE_CHECKING:
    from .data import SpokenPrompt

MODALITIES = ("audio", "text")
BLOCK_KINDS = ("hidden", "mlp", "attn", "key")
TRACE_KINDS = ("hidden", "mlp", "attn")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 0
    d_audio: int = 32
    d_text: int = 48
    conv_layers: int = 2
    conv_kernel: int = 3
    audio_layers: int = 6
    text_layers: int = 8
    heads: int = 4
    frames_per_word: int = 4
    mlp_ratio: int = 4
    max_positions: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_audio % self.heads or self.d_text % self.heads:
            raise ValueError("d_audio and d_text must be divisible by heads")
        if self.conv_layers != 2:
            raise ValueError("conv_layers is fixed at 2 (corruption happens after conv layer 2)")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd to keep stride-1 alignment")

    def n_layers(self, modality: str) -> int:
        return self.audio_layers if modality == "audio" else self.text_layers

    def width(self, modality: str, kind: str = "hidden") -> int:
        d = self.d_audio if modality == "audio" else self.d_text
        return d * self.mlp_ratio if kind == "key" else d


class SiteError(KeyError):
    pass


@dataclass(frozen=True, order=True)
class SiteId:
    """One hook point, optionally narrowed to positions of a prompt.

    ``position`` is an int (audio frame index, or decoder index for text), or
    a selector string: ``"subj_first"``, ``"subj_last"``, ``"last"``,
    ``"word:<i>"``, ``"subject"`` or ``"all"``.  ``None`` means all positions.
    """

    modality: str
    layer: int
    kind: str
    position: int | str | None = None

    @property
    def point(self) -> tuple[str, int, str]:
        return (self.modality, self.layer, self.kind)

    def at(self, position) -> "SiteId":
        return SiteId(self.modality, self.layer, self.kind, position)

    def __str__(self):
        s = f"{self.modality}:{self.layer}:{self.kind}"
        return s if self.position is None else f"{s}@{self.position}"

    @classmethod
    def parse(cls, text: str) -> "SiteId":
        body, _, pos = text.partition("@")
        modality, layer, kind = body.split(":")
        position: int | str | None = None
        if pos:
            position = int(pos) if pos.lstrip("-").isdigit() else pos
        return cls(modality, int(layer), kind, position)


def check_site(config: ModelConfig, site: SiteId) -> None:
    if site.modality not in MODALITIES:
        raise SiteError(f"unknown modality in {site}")
    if site.kind == "conv":
        if site.modality != "audio" or site.layer not in (1, 2):
            raise SiteError(f"conv sites are audio layers 1 and 2, got {site}")
        return
    if site.kind not in BLOCK_KINDS:
        raise SiteError(f"unknown site kind in {site}")
    if not 0 <= site.layer < config.n_layers(site.modality):
        raise SiteError(f"layer out of range in {site}")


def word_frames(prompt: "SpokenPrompt", word: int) -> list[int]:
    w, first, last = prompt.alignment[word]
    assert w == word
    return list(range(first, last + 1))


def word_index(prompt: "SpokenPrompt", selector: str) -> int:
    if selector == "subj_first":
        return prompt.subject_span[0]
    if selector == "subj_last":
        return prompt.subject_span[1]
    if selector == "last":
        return len(prompt.words) - 1
    if selector == "rel_first":
        if prompt.subject_span[1] + 1 >= len(prompt.words):
            raise SiteError("no word follows the subject")
        return prompt.subject_span[1] + 1
    if selector.startswith("word:"):
        return int(selector[5:])
    raise SiteError(f"not a word selector: {selector!r}")


def site_positions(prompt: "SpokenPrompt", site: SiteId) -> list[int]:
    """Sequence positions touched when patching or restoring ``site``.

    Word selectors cover every frame of the word in both modalities, except
    ``"last"`` on the text side, which is the answer (final decoder) position.
    """
    t_audio = prompt.n_frames
    length = t_audio if site.modality == "audio" else t_audio + len(prompt.instruction)
    pos = site.position
    if pos is None or pos == "all":
        return list(range(length))
    if isinstance(pos, (int, np.integer)):
        if not 0 <= pos < length:
            raise SiteError(f"position {pos} outside sequence of length {length}")
        return [int(pos)]
    if pos == "subject":
        s0, s1 = prompt.subject_span
        return [f for w in range(s0, s1 + 1) for f in word_frames(prompt, w)]
    if pos == "last" and site.modality == "text":
        return [length - 1]
    return word_frames(prompt, word_index(prompt, pos))


def key_positions(prompt: "SpokenPrompt", site: SiteId) -> list[int]:
    """Positions pooled into an editing key: all word frames on the audio
    side, the word's final frame on the (causal) text side."""
    if site.modality == "audio" or not isinstance(site.position, str) or site.position in ("all", "subject"):
        return site_positions(prompt, site)
    return site_positions(prompt, site)[-1:]


# --------------------------------------------------------------------- hooks


@dataclass
class Patch:
    """Replace (or add to) the activation at masked positions.

    ``mask`` is ``[B, T]`` or ``[T]`` bool; ``value`` broadcasts to ``[B, T, d]``.
    """

    mask: torch.Tensor
    value: torch.Tensor
    add: bool = False

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        m = self.mask.unsqueeze(-1)
        if self.add:
            return x + m * self.value
        return torch.where(m, self.value, x)


@dataclass
class Hooks:
    capture: set = field(default_factory=set)
    patches: dict = field(default_factory=dict)
    noise: torch.Tensor | None = None
    cache: dict = field(default_factory=dict)

    def __call__(self, point, x):
        if self.noise is not None and point == ("audio", 2, "conv"):
            x = x + self.noise
        for p in self.patches.get(point, ()):
            x = p.apply(x)
        if point in self.capture:
            self.cache[point] = x
        return x


def _no_hook(point, x):
    return x


# --------------------------------------------------------------------- layers


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, causal: bool):
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x):
        B, T, d = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / np.sqrt(d // self.heads)
        if self.causal:
            mask = torch.ones(T, T, dtype=torch.bool).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        z = (scores.softmax(-1) @ v).transpose(1, 2).reshape(B, T, d)
        return self.out(z)


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int, causal: bool):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads, causal)
        self.ln2 = nn.LayerNorm(d)
        self.up = nn.Linear(d, mlp_ratio * d)
        self.down = nn.Linear(mlp_ratio * d, d, bias=False)

    def forward(self, x, hook, modality: str, layer: int):
        x = x + hook((modality, layer, "attn"), self.attn(self.ln1(x)))
        key = hook((modality, layer, "key"), F.gelu(self.up(self.ln2(x))))
        x = x + hook((modality, layer, "mlp"), self.down(key))
        return hook((modality, layer, "hidden"), x)


class ToyLALM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size < 2:
            raise ValueError("vocab_size must be set (>= 2)")
        c = self.config = config
        pad = c.conv_kernel // 2
        self.conv1 = nn.Conv1d(c.d_audio, c.d_audio, c.conv_kernel, padding=pad)
        self.conv2 = nn.Conv1d(c.d_audio, c.d_audio, c.conv_kernel, padding=pad)
        self.audio_pos = nn.Parameter(torch.zeros(c.max_positions, c.d_audio))
        self.audio_blocks = nn.ModuleList(
            Block(c.d_audio, c.heads, c.mlp_ratio, causal=False) for _ in range(c.audio_layers)
        )
        self.audio_ln = nn.LayerNorm(c.d_audio)
        self.projector = nn.Linear(c.d_audio, c.d_text)
        self.tok_emb = nn.Embedding(c.vocab_size, c.d_text)
        self.text_pos = nn.Parameter(torch.zeros(c.max_positions, c.d_text))
        self.text_blocks = nn.ModuleList(
            Block(c.d_text, c.heads, c.mlp_ratio, causal=True) for _ in range(c.text_layers)
        )
        self.text_ln = nn.LayerNorm(c.d_text)
        self.head = nn.Linear(c.d_text, c.vocab_size)
        self.to(torch.float64)
        self._init_parameters()
        self._snapshots: list[dict] = []

    def _init_parameters(self):
        g = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(".bias"):
                    p.zero_()
                elif ".ln" in name or name.endswith("_ln.weight"):
                    p.fill_(1.0)
                elif name.startswith("conv"):
                    fan_in = p.shape[1] * p.shape[2]
                    p.normal_(0.0, 1.0 / np.sqrt(fan_in), generator=g)
                elif name == "projector.weight":
                    p.normal_(0.0, 1.0 / np.sqrt(p.shape[1]), generator=g)
                else:
                    p.normal_(0.0, 0.02, generator=g)

    def blocks(self, modality: str) -> nn.ModuleList:
        return self.audio_blocks if modality == "audio" else self.text_blocks

    def edit_matrix_name(self, site: SiteId) -> str:
        """Parameter name of the matrix an edit at ``site`` rewrites."""
        if site.kind == "conv":
            return f"conv{site.layer}.weight"
        if site.kind == "proj":
            return "projector.weight"
        return f"{site.modality}_blocks.{site.layer}.down.weight"

    def run(self, frames: torch.Tensor, instruction: torch.Tensor, hooks=None) -> torch.Tensor:
        """Batched forward.  ``frames`` is ``[B, T, d_audio]``, ``instruction``
        is ``[B, n]`` token ids.  Returns logits ``[B, vocab]`` at the last position."""
        hook = hooks if hooks is not None else _no_hook
        c = self.config
        B, T, d = frames.shape
        if d != c.d_audio:
            raise ValueError(f"frame width {d} != d_audio {c.d_audio}")
        if T + instruction.shape[1] > c.max_positions:
            raise ValueError("sequence longer than max_positions")
        x = hook(("audio", 1, "conv"), F.gelu(self.conv1(frames.transpose(1, 2))).transpose(1, 2))
        x = hook(("audio", 2, "conv"), F.gelu(self.conv2(x.transpose(1, 2))).transpose(1, 2))
        x = x + self.audio_pos[:T]
        for i, block in enumerate(self.audio_blocks):
            x = block(x, hook, "audio", i)
        assert x.shape[-1] == c.d_audio
        a = self.projector(self.audio_ln(x))
        assert a.shape[-1] == c.d_text
        h = torch.cat([a, self.tok_emb(instruction)], dim=1)
        h = h + self.text_pos[: h.shape[1]]
        for i, block in enumerate(self.text_blocks):
            h = block(h, hook, "text", i)
        return self.head(self.text_ln(h[:, -1]))

    # ------------------------------------------------------------ state

    def snapshot(self) -> int:
        """Save a byte-exact copy of all parameters; returns a handle."""
        self._snapshots.append({k: v.detach().clone() for k, v in self.state_dict().items()})
        return len(self._snapshots) - 1

    def restore(self, handle: int | None = None) -> None:
        if not self._snapshots:
            raise RuntimeError("restore called without a saved snapshot")
        state = self._snapshots[-1 if handle is None else handle]
        with torch.no_grad():
            for k, v in self.state_dict().items():
                v.copy_(state[k])

    def clone(self) -> "ToyLALM":
        other = copy.deepcopy(self)
        other._snapshots = []
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.state_dict().items():
            h.update(name.encode())
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()

    def round_to_float32(self) -> None:
        """Snap parameters to float32-representable values so checkpoints round-trip exactly."""
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(p.float().double())

    def get_matrix(self, name: str) -> np.ndarray:
        return dict(self.named_parameters())[name].detach().numpy().copy()

    def add_to_matrix(self, name: str, delta: np.ndarray) -> None:
        p = dict(self.named_parameters())[name]
        with torch.no_grad():
            p.add_(torch.as_tensor(delta, dtype=p.dtype).reshape(p.shape))


# --------------------------------------------------------------------- prompt-level API


@dataclass
class ForwardTrace:
    logits: np.ndarray
    captured: dict

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    # same kernel as the batched paths, so probabilities agree bit for bit
    return torch.as_tensor(np.asarray(logits, dtype=np.float64)).softmax(-1).numpy()


def prompt_tensors(prompts: Iterable["SpokenPrompt"]) -> tuple[torch.Tensor, torch.Tensor]:
    prompts = list(prompts)
    frames = torch.as_tensor(np.stack([p.frames for p in prompts]))
    instr = torch.as_tensor(np.array([p.instruction for p in prompts], dtype=np.int64))
    return frames, instr


def _noise_tensor(model: ToyLALM, prompt: "SpokenPrompt", noise) -> torch.Tensor | None:
    if noise is None:
        return None
    (f0, f1), eps = noise.sample(model.config.d_audio)
    full = np.zeros((prompt.n_frames, model.config.d_audio))
    full[f0 : f1 + 1] = eps
    return torch.as_tensor(full)[None]


def forward(model: ToyLALM, prompt: "SpokenPrompt", capture: Iterable[SiteId] = (), noise=None) -> ForwardTrace:
    """Clean forward pass recording the requested sites.

    A site with a single int position captures that vector; a selector or
    ``None`` position captures the mean over :func:`site_positions`.
    """
    return patched_forward(model, prompt, {}, noise=noise, capture=capture)


def patched_forward(
    model: ToyLALM,
    prompt: "SpokenPrompt",
    patches: Mapping[SiteId, np.ndarray],
    noise=None,
    capture: Iterable[SiteId] = (),
) -> ForwardTrace:
    """Forward with site values overwritten before downstream use.

    ``noise`` is anything with ``sample(d) -> ((first, last), eps)``; it is
    added at conv layer 2 before any patch at that point is applied.
    """
    capture = list(capture)
    for site in list(patches) + capture:
        check_site(model.config, site)
    T = prompt.n_frames
    length = {"audio": T, "text": T + len(prompt.instruction)}
    hooks = Hooks(capture={s.point for s in capture}, noise=_noise_tensor(model, prompt, noise))
    seen: dict[tuple, set[int]] = {}
    for site, value in patches.items():
        positions = site_positions(prompt, site)
        taken = seen.setdefault(site.point, set())
        if taken.intersection(positions):
            raise ValueError(f"conflicting patches at {site}")
        taken.update(positions)
        value = torch.as_tensor(np.asarray(value, dtype=np.float64))
        width = model.config.width(site.modality, site.kind)
        if value.shape != (width,):
            raise ValueError(f"patch at {site} has shape {tuple(value.shape)}, expected ({width},)")
        mask = torch.zeros(length[site.modality], dtype=torch.bool)
        mask[positions] = True
        hooks.patches.setdefault(site.point, []).append(Patch(mask, value))
    frames, instr = prompt_tensors([prompt])
    with torch.no_grad():
        logits = model.run(frames, instr, hooks)[0].numpy()
    captured = {}
    for site in capture:
        act = hooks.cache[site.point][0]
        captured[site] = act[site_positions(prompt, site)].mean(0).numpy()
    return ForwardTrace(logits=logits, captured=captured)


def all_sites(config: ModelConfig, prompt: "SpokenPrompt", kind: str = "hidden") -> list[SiteId]:
    """Every per-position site of ``kind`` (conv layers included for hidden)."""
    T = prompt.n_frames
    t_text = T + len(prompt.instruction)
    sites = []
    if kind == "hidden":
        sites += [SiteId("audio", l, "conv", i) for l in (1, 2) for i in range(T)]
    sites += [SiteId("audio", l, kind, i) for l in range(config.audio_layers) for i in range(T)]
    sites += [SiteId("text", l, kind, i) for l in range(config.text_layers) for i in range(t_text)]
    return sites


def object_probability(model: ToyLALM, prompt: "SpokenPrompt", object_token: int, noise=None) -> float:
    if not 0 <= object_token < model.config.vocab_size:
        raise ValueError(f"token {object_token} outside vocabulary")
    return float(forward(model, prompt, noise=noise).probs[object_token])


def batch_probabilities(model: ToyLALM, prompts: list["SpokenPrompt"]) -> np.ndarray:
    """Softmax over the vocabulary for many prompts, batched by sequence length."""
    out = np.zeros((len(prompts), model.config.vocab_size))
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault((p.n_frames, len(p.instruction)), []).append(i)
    with torch.no_grad():
        for idx in groups.values():
            frames, instr = prompt_tensors(prompts[i] for i in idx)
            out[idx] = model.run(frames, instr).softmax(-1).numpy()
    return out


def collect_key(model: ToyLALM, prompt: "SpokenPrompt", site: SiteId) -> np.ndarray:
    """Editing key at ``site``: the down-projection input, mean-pooled over
    the aligned frames of the chosen word (audio) or taken at the word's
    final frame (text)."""
    check_site(model.config, site)
    positions = key_positions(prompt, site)
    if not positions:
        raise ValueError("empty alignment span")
    point = (site.modality, site.layer, "key")
    hooks = Hooks(capture={point})
    frames, instr = prompt_tensors([prompt])
    with torch.no_grad():
        model.run(frames, instr, hooks)
    return hooks.cache[point][0, positions].mean(0).numpy()


def point_activations(model: ToyLALM, prompt: "SpokenPrompt", points) -> dict:
    """Clean ``[T, d]`` activations at the given hook points."""
    hooks = Hooks(capture=set(points))
    with torch.no_grad():
        model.run(*prompt_tensors([prompt]), hooks)
    return {pt: hooks.cache[pt][0].numpy() for pt in points}


def site_values(model: ToyLALM, prompt: "SpokenPrompt", site: SiteId, noise=None) -> np.ndarray:
    """Per-position activations ``[len(key_positions), width]`` at ``site``'s point."""
    hooks = Hooks(capture={site.point}, noise=_noise_tensor(model, prompt, noise))
    frames, instr = prompt_tensors([prompt])
    with torch.no_grad():
        model.run(frames, instr, hooks)
    return hooks.cache[site.point][0, key_positions(prompt, site)].numpy()


# --------------------------------------------------------------------- gradients


@dataclass
class LossSpec:
    """Negative log-likelihood of ``token`` plus an optional L2 pull.

    The pull acts on the pooled value of ``pull_site`` (which must also be in
    ``wrt``): ``pull_weight * ||v - pull_ref||^2``.
    """

    token: int
    pull_site: SiteId | None = None
    pull_ref: np.ndarray | None = None
    pull_weight: float = 0.0


def shift_loss(
    model: ToyLALM, prompt: "SpokenPrompt", spec: LossSpec, shifts: dict, noise=None, spread: dict | None = None
) -> torch.Tensor:
    """Loss as a differentiable function of additive shifts at sites.

    ``shifts`` maps SiteId -> tensor ``[width]``; each shift is added at every
    position in :func:`key_positions` of its site, or, when ``spread`` has an
    entry for the site, at every position ``j`` scaled by ``spread[site][j]``.
    """
    T = prompt.n_frames
    length = {"audio": T, "text": T + len(prompt.instruction)}
    hooks = Hooks(noise=_noise_tensor(model, prompt, noise))
    base_point = None
    if spec.pull_site is not None:
        base_point = spec.pull_site.point
        hooks.capture.add(base_point)
    for site, delta in shifts.items():
        if spread and site in spread:
            weights = torch.as_tensor(spread[site])
            patch = Patch(torch.ones(length[site.modality], dtype=torch.bool), weights[:, None] * delta, add=True)
        else:
            mask = torch.zeros(length[site.modality], dtype=torch.bool)
            mask[key_positions(prompt, site)] = True
            patch = Patch(mask, delta, add=True)
        hooks.patches.setdefault(site.point, []).append(patch)
    frames, instr = prompt_tensors([prompt])
    logits = model.run(frames, instr, hooks)[0]
    loss = -logits.log_softmax(-1)[spec.token]
    if spec.pull_site is not None and spec.pull_weight:
        v = hooks.cache[base_point][0, key_positions(prompt, spec.pull_site)].mean(0)
        ref = torch.as_tensor(np.asarray(spec.pull_ref, dtype=np.float64))
        loss = loss + spec.pull_weight * ((v - ref) ** 2).sum()
    return loss


def gradient(model: ToyLALM, prompt: "SpokenPrompt", loss_spec: LossSpec, wrt: Iterable) -> dict:
    """Reverse-mode gradients of the loss.

    ``wrt`` mixes parameter names (str) and SiteIds.  For a site the gradient
    is taken w.r.t. an additive shift of its pooled value.
    """
    wrt = list(wrt)
    params = dict(model.named_parameters())
    shifts = {}
    for w in wrt:
        if isinstance(w, SiteId):
            check_site(model.config, w)
            shifts[w] = torch.zeros(model.config.width(w.modality, w.kind), dtype=torch.float64, requires_grad=True)
        elif w not in params:
            raise KeyError(f"unknown parameter {w!r}")
    model.zero_grad(set_to_none=True)
    loss = shift_loss(model, prompt, loss_spec, shifts)
    targets = [shifts[w] if isinstance(w, SiteId) else params[w] for w in wrt]
    grads = torch.autograd.grad(loss, targets, allow_unused=True)
    out = {}
    for w, t, g in zip(wrt, targets, grads):
        out[w] = np.zeros(tuple(t.shape)) if g is None else g.detach().numpy().copy()
    return out


def loss_value(model: ToyLALM, prompt: "SpokenPrompt", loss_spec: LossSpec) -> float:
    with torch.no_grad():
        return float(shift_loss(model, prompt, loss_spec, {}))


# --------------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"LALMCKPT"
CHECKPOINT_VERSION = 1


def write_params(f, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> None:
    """Header (magic, version, config JSON) then named little-endian float32 blobs."""
    cfg = json.dumps(asdict(config), sort_keys=True).encode()
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    f.write(cfg)
    f.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        raw = name.encode()
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.astype("<f4").tobytes())


def read_params(f) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if f.read(8) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, n = struct.unpack("<II", f.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config = ModelConfig(**json.loads(f.read(n)))
    (count,) = struct.unpack("<I", f.read(4))
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", f.read(2))
        name = f.read(ln).decode()
        (ndim,) = struct.unpack("<B", f.read(1))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(shape)
    return config, arrays


def save_checkpoint(model: ToyLALM, path) -> None:
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as f:
        write_params(f, model.config, arrays)


def load_checkpoint(path) -> ToyLALM:
    with open(path, "rb") as f:
        config, arrays = read_params(f)
    model = ToyLALM(config)
    with torch.no_grad():
        for k, v in model.state_dict().items():
            v.copy_(torch.as_tensor(arrays[k].astype(np.float64)))
    return model


def checkpoint_bytes(model: ToyLALM) -> bytes:
    buf = io.BytesIO()
    write_params(buf, model.config, {k: v.detach().numpy() for k, v in model.state_dict().items()})
    return buf.getvalue()
