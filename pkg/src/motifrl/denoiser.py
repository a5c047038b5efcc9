"""Endpoint predictor f(z_t, t, c) -> (X0, E0, P0 logits, value).

A slot-token transformer with adaptive LayerNorm modulation. Each active
motif slot becomes one token built from its motif embedding and linear
projections of its one-hot bond and attachment rows; there is no separate
attention edge bias. All arithmetic is float64 so that finite-difference
gradient checks are meaningful.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import MaskPrior, NoiseSchedule, TransitionModel
from .errors import BadStep, CorruptFile, NotConvex, UnknownTask, VersionMismatch, VocabMismatch
from .npe import D_E
from .oracle import REGRESSION, TaskSpec

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    n_max: int
    d_X: int
    d_P: int
    T: int
    e_x: int = 32
    e_e: int = 16
    e_p: int = 16
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    time_freqs: int = 16
    target_hidden: int = 32
    value_hidden: int = 64

    @property
    def hidden(self) -> int:
        return self.e_x + self.e_e + self.e_p


class ForwardOutput(NamedTuple):
    X: torch.Tensor  # (B, N, d_X)
    E: torch.Tensor  # (B, N, N, d_E), symmetric in the slot axes
    P: torch.Tensor  # (B, N, N, d_P)
    value: torch.Tensor  # (B,)


def modulate(x, shift, scale):
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :]


class Block(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.fc1 = nn.Linear(hidden, mlp_ratio * hidden)
        self.fc2 = nn.Linear(mlp_ratio * hidden, hidden)
        self.ada = nn.Linear(hidden, 6 * hidden)

    def forward(self, x, cvec, key_mask):
        B, N, H = x.shape
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(cvec)).chunk(6, dim=-1)
        h = modulate(F.layer_norm(x, (H,)), sh1, sc1)
        q, k, v = self.qkv(h).view(B, N, 3, self.heads, H // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(H // self.heads)
        att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(att, dim=-1)
        h = (att @ v).transpose(1, 2).reshape(B, N, H)
        x = x + g1[:, None, :] * self.proj(h)
        h = modulate(F.layer_norm(x, (H,)), sh2, sc2)
        x = x + g2[:, None, :] * self.fc2(F.gelu(self.fc1(h), approximate="tanh"))
        return x


class Denoiser(nn.Module):
    def __init__(self, cfg: ModelConfig, tasks: Sequence[TaskSpec] = ()):
        super().__init__()
        self.cfg = cfg
        self.tasks: list[TaskSpec] = list(tasks)
        H = cfg.hidden
        if H % cfg.heads:
            raise ValueError("hidden width must be divisible by the head count")
        self.embed_X = nn.Embedding(cfg.d_X, cfg.e_x)
        self.proj_E = nn.Linear(cfg.n_max * D_E, cfg.e_e)
        self.proj_P = nn.Linear(cfg.n_max * cfg.d_P, cfg.e_p)
        self.time1 = nn.Linear(2 * cfg.time_freqs, H)
        self.time2 = nn.Linear(H, H)
        self.task_emb = nn.Parameter(torch.zeros(len(self.tasks), H))
        self.target1 = nn.Linear(1, cfg.target_hidden)
        self.target2 = nn.Linear(cfg.target_hidden, H)
        self.blocks = nn.ModuleList(Block(H, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_ada = nn.Linear(H, 2 * H)
        self.head_X = nn.Linear(cfg.e_x, cfg.d_X)
        self.head_E = nn.Linear(cfg.e_e, cfg.n_max * D_E)
        self.head_P = nn.Linear(cfg.e_p, cfg.n_max * cfg.d_P)
        self.value1 = nn.Linear(2 * H, cfg.value_hidden)
        self.value2 = nn.Linear(cfg.value_hidden, 1)
        self.to(DTYPE)

    # -- conditioning -------------------------------------------------------

    def task(self, k: int) -> TaskSpec:
        if not 0 <= k < len(self.tasks):
            raise UnknownTask(f"task id {k} not registered ({len(self.tasks)} tasks)")
        return self.tasks[k]

    def encode_conditions(self, conditions) -> tuple[torch.Tensor, torch.Tensor]:
        """Task ids and normalized targets for a sequence of ``(task_id, target)`` pairs."""
        ids, ys = [], []
        for k, y in conditions:
            ids.append(int(k))
            ys.append(self.task(int(k)).normalize(float(y)))
        return torch.tensor(ids, dtype=torch.long), torch.tensor(ys, dtype=DTYPE)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        F_ = self.cfg.time_freqs
        freqs = torch.exp(-math.log(1000.0) * torch.arange(F_, dtype=DTYPE) / F_)
        arg = t.to(DTYPE)[:, None] * freqs[None, :]
        feats = torch.cat([torch.cos(arg), torch.sin(arg)], dim=-1)
        return self.time2(F.silu(self.time1(feats)))

    def condition_vector(self, t, task_ids=None, targets=None) -> torch.Tensor:
        cvec = self.time_embedding(t)
        if task_ids is not None:
            cvec = cvec + self.task_emb[task_ids] + self.target2(F.silu(self.target1(targets[:, None])))
        return cvec

    # -- forward ------------------------------------------------------------

    def build_tokens(self, X, E, P, m) -> torch.Tensor:
        cfg = self.cfg
        B, N = X.shape
        mf = m.to(DTYPE)
        pair = (mf[:, :, None] * mf[:, None, :]) * (1.0 - torch.eye(N, dtype=DTYPE))
        oh_E = F.one_hot(E, D_E).to(DTYPE) * pair[..., None]
        oh_P = F.one_hot(P, cfg.d_P).to(DTYPE) * pair[..., None]
        u = torch.cat(
            [
                self.embed_X(X),
                self.proj_E(oh_E.reshape(B, N, N * D_E)),
                self.proj_P(oh_P.reshape(B, N, N * cfg.d_P)),
            ],
            dim=-1,
        )
        return u * mf[..., None]

    def forward(self, X, E, P, m, t, task_ids=None, targets=None) -> ForwardOutput:
        cfg = self.cfg
        if torch.any(t < 0) or torch.any(t > cfg.T):
            raise BadStep(f"timestep outside [0, {cfg.T}]")
        B, N = X.shape
        H = cfg.hidden
        mb = m.bool()
        mf = m.to(DTYPE)
        cvec = self.condition_vector(t, task_ids, targets)
        x = self.build_tokens(X, E, P, m)
        for block in self.blocks:
            x = block(x, cvec, mb) * mf[..., None]
        shift, scale = self.final_ada(F.silu(cvec)).chunk(2, dim=-1)
        h = modulate(F.layer_norm(x, (H,)), shift, scale) * mf[..., None]
        hX, hE, hP = h.split([cfg.e_x, cfg.e_e, cfg.e_p], dim=-1)
        lX = self.head_X(hX) + F.one_hot(X, cfg.d_X).to(DTYPE)
        LE = self.head_E(hE).view(B, N, N, D_E) + F.one_hot(E, D_E).to(DTYPE)
        lE = 0.5 * (LE + LE.transpose(1, 2))
        lP = self.head_P(hP).view(B, N, N, cfg.d_P) + F.one_hot(P, cfg.d_P).to(DTYPE)
        pooled = h.sum(1) / mf.sum(1, keepdim=True).clamp_min(1.0)
        value = self.value2(F.silu(self.value1(torch.cat([pooled, cvec], dim=-1))))[:, 0]
        return ForwardOutput(lX, lE, lP, value)

    # -- task embeddings ----------------------------------------------------

    def add_task(self, spec: TaskSpec, embedding: torch.Tensor) -> int:
        k = len(self.tasks)
        self.tasks.append(TaskSpec(**{**asdict(spec), "task_id": k}))
        with torch.no_grad():
            self.task_emb = nn.Parameter(torch.cat([self.task_emb.detach(), embedding[None].to(DTYPE)], 0))
        return k

    def compose_task_embedding(self, weights: Sequence[tuple[int, float]], spec: TaskSpec) -> int:
        """Register a new task whose embedding is a convex combination of existing rows."""
        coefs = [float(c) for _, c in weights]
        if any(c < 0 for c in coefs) or abs(sum(coefs) - 1.0) > 1e-9:
            raise NotConvex(f"coefficients {coefs} are not a convex combination")
        rows = [self.task_emb[self.task(int(k)).task_id].detach() for k, _ in weights]
        emb = sum(c * r for c, r in zip(coefs, rows))
        return self.add_task(spec, emb)


def zero_init_(model: Denoiser) -> Denoiser:
    """adaLN-zero style: modulation and output heads start at zero."""
    with torch.no_grad():
        for layer in [b.ada for b in model.blocks] + [model.final_ada, model.head_X, model.head_E, model.head_P]:
            layer.weight.zero_()
            layer.bias.zero_()
    return model


def build_model(cfg: ModelConfig, tasks: Sequence[TaskSpec] = (), seed: int = 0) -> Denoiser:
    torch.manual_seed(seed)
    model = Denoiser(cfg, tasks)
    with torch.no_grad():
        model.task_emb.normal_(0.0, 0.02)
    return zero_init_(model)


def flat_parameters(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


# --------------------------------------------------------------------------
# checkpoints: magic, u32 version, u64 header length, JSON header, raw float64 blobs

CKPT_MAGIC = b"MOTIFRL\x00"
CKPT_VERSION = 1


def save_checkpoint(
    path,
    model: Denoiser,
    schedule: NoiseSchedule,
    transitions: TransitionModel,
    mask_prior: MaskPrior,
    vocab_hash: str,
    metadata: dict | None = None,
) -> None:
    arrays = flat_parameters(model)
    names = sorted(arrays)
    entries, offset = [], 0
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header = {
        "format_version": CKPT_VERSION,
        "vocab_hash": vocab_hash,
        "model_config": asdict(model.cfg),
        "tasks": [asdict(t) for t in model.tasks],
        "schedule": {"T": schedule.T, "s": schedule.s},
        "transitions": transitions.to_dict(),
        "mask_prior": mask_prior.to_dict(),
        "metadata": metadata or {},
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    model: Denoiser
    schedule: NoiseSchedule
    transitions: TransitionModel
    mask_prior: MaskPrior
    vocab_hash: str
    metadata: dict


def load_checkpoint(path, vocab_hash: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC or len(raw) < 20:
        raise CorruptFile(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {CKPT_VERSION}")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    if header.get("format_version") != version:
        raise CorruptFile(f"{path}: header version disagrees with preamble")
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise VocabMismatch("checkpoint was trained against a different vocabulary")
    body = raw[20 + hlen :]
    state = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start, stop = e["offset"], e["offset"] + 8 * n
        if stop > len(body):
            raise CorruptFile(f"{path}: truncated array {e['name']}")
        arr = np.frombuffer(body[start:stop], dtype="<f8").reshape(e["shape"])
        state[e["name"]] = torch.tensor(arr.copy(), dtype=DTYPE)
    cfg = ModelConfig(**header["model_config"])
    tasks = [TaskSpec(**t) for t in header["tasks"]]
    model = Denoiser(cfg, tasks)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    return Checkpoint(
        model,
        NoiseSchedule(**header["schedule"]),
        TransitionModel.from_dict(header["transitions"]),
        MaskPrior.from_dict(header["mask_prior"]),
        header["vocab_hash"],
        header["metadata"],
    )
