"""Toy diffusion transformer shared by teacher and student.

Frames are patch-tokenized per frame, conditioned on per-frame timesteps and a
condition id through adaptive layer-scale modulation, and processed by a stack
of attention/MLP blocks under either full bidirectional attention or a
block-causal mask over frame chunks. Incremental forward passes attend over an
append-only KV cache of committed chunks.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass

import torch
import torch.nn as nn

from .schedule import NoiseSchedule, forward_diffuse  # noqa: F401  (re-exported for callers)

WEIGHT_MAGIC = b"CVWT"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    frame_h: int = 16
    frame_w: int = 16
    channels: int = 1
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    cond_vocab: int = 5  # data classes + 1 reserved null id
    T: int = 1000
    predicts: str = "eps"  # "eps" (score networks) or "x0" (student)

    def __post_init__(self):
        if self.frame_h % self.patch or self.frame_w % self.patch:
            raise ValueError("frame dims must be divisible by patch size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.predicts not in ("eps", "x0"):
            raise ValueError(f"unknown prediction target {self.predicts!r}")

    @property
    def tokens_per_frame(self) -> int:
        return (self.frame_h // self.patch) * (self.frame_w // self.patch)

    @property
    def null_cond(self) -> int:
        return self.cond_vocab - 1


@dataclass(frozen=True)
class ChunkLayout:
    """Chunking arithmetic: N frames split into L = ceil(N/k) chunks of k frames."""

    n_frames: int
    chunk_frames: int

    def __post_init__(self):
        if self.chunk_frames < 1 or self.n_frames < 1:
            raise ValueError("need n_frames >= 1 and chunk_frames >= 1")

    @property
    def n_chunks(self) -> int:
        return -(-self.n_frames // self.chunk_frames)

    def chunk_of(self, frame: int) -> int:
        return frame // self.chunk_frames

    def frame_timesteps(self, t_chunks: torch.Tensor) -> torch.Tensor:
        """Expand per-chunk timesteps (..., L) to per-frame timesteps (..., N)."""
        if t_chunks.shape[-1] != self.n_chunks:
            raise ValueError(f"expected {self.n_chunks} chunk timesteps, got {t_chunks.shape[-1]}")
        return t_chunks.repeat_interleave(self.chunk_frames, dim=-1)[..., : self.n_frames]


@dataclass(frozen=True)
class BlockCausalMask:
    """Frame-level visibility table: frames[i, j] is True iff query frame i may
    attend to key frame j, i.e. floor(j/k) <= floor(i/k)."""

    layout: ChunkLayout
    frames: torch.Tensor  # (N, N) bool

    def tokens(self, tokens_per_frame: int) -> torch.Tensor:
        """Expand to a token-level (N*tpf, N*tpf) boolean mask."""
        return self.frames.repeat_interleave(tokens_per_frame, 0).repeat_interleave(tokens_per_frame, 1)


def build_mask(layout: ChunkLayout) -> BlockCausalMask:
    chunk = torch.arange(layout.n_frames) // layout.chunk_frames
    visible = chunk[None, :] <= chunk[:, None]
    return BlockCausalMask(layout=layout, frames=visible)


class KVCache:
    """Per-layer append-only key/value store for committed chunks.

    Belongs to exactly one generation session; never share across concurrent
    users. Token count per layer is committed_chunks * k * tokens_per_frame.
    """

    def __init__(self, n_layers: int, chunk_frames: int, tokens_per_frame: int):
        self.n_layers = n_layers
        self.chunk_frames = chunk_frames
        self.tokens_per_frame = tokens_per_frame
        self.keys: list[torch.Tensor | None] = [None] * n_layers
        self.values: list[torch.Tensor | None] = [None] * n_layers
        self.committed_chunks = 0

    @property
    def committed_frames(self) -> int:
        return self.committed_chunks * self.chunk_frames

    @property
    def tokens(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[2]

    def append(self, new_kv: list[tuple[torch.Tensor, torch.Tensor]]):
        if len(new_kv) != self.n_layers:
            raise ValueError("KV rows for every layer required")
        for i, (k, v) in enumerate(new_kv):
            if self.keys[i] is None:
                self.keys[i], self.values[i] = k, v
            else:
                self.keys[i] = torch.cat([self.keys[i], k], dim=2)
                self.values[i] = torch.cat([self.values[i], v], dim=2)
        self.committed_chunks += 1

    def reset(self):
        self.keys = [None] * self.n_layers
        self.values = [None] * self.n_layers
        self.committed_chunks = 0


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timestep indices."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(t.device)


def _sincos_positions(indices: torch.Tensor, dim: int) -> torch.Tensor:
    return timestep_embedding(indices, dim, max_period=1000.0)


class DiTBlock(nn.Module):
    """Pre-norm attention + MLP with per-token adaptive modulation (zero-init gates)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)
        self.modulation = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def attention(self, x: torch.Tensor, token_mask: torch.Tensor | None,
                  past_kv: tuple[torch.Tensor, torch.Tensor] | None = None,
                  ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._split_heads(q), self._split_heads(k), self._split_heads(v)
        new_kv = (k, v)
        if past_kv is not None:
            k = torch.cat([past_kv[0], k], dim=2)
            v = torch.cat([past_kv[1], v], dim=2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if token_mask is not None:
            scores = scores.masked_fill(~token_mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(x.shape)
        return self.proj(out), new_kv

    def forward(self, x: torch.Tensor, c: torch.Tensor, token_mask: torch.Tensor | None = None,
                past_kv: tuple[torch.Tensor, torch.Tensor] | None = None,
                ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(torch.nn.functional.silu(c)).chunk(6, dim=-1)
        attn_out, new_kv = self.attention(self.norm1(x) * (1 + sc1) + sh1, token_mask, past_kv)
        x = x + g1 * attn_out
        h = self.fc2(torch.nn.functional.gelu(self.fc1(self.norm2(x) * (1 + sc2) + sh2)))
        return x + g2 * h, new_kv


class CausalDiT(nn.Module):
    """Diffusion transformer over frame tokens; bidirectional or block-causal."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        p, c, d = config.patch, config.channels, config.dim
        self.patch_embed = nn.Linear(p * p * c, d)
        self.t_mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))
        self.cond_embed = nn.Embedding(config.cond_vocab, d)
        self.blocks = nn.ModuleList(DiTBlock(d, config.heads) for _ in range(config.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_mod = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, p * p * c)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        grid_h, grid_w = config.frame_h // p, config.frame_w // p
        sy = _sincos_positions(torch.arange(grid_h).repeat_interleave(grid_w), d // 2)
        sx = _sincos_positions(torch.arange(grid_w).repeat(grid_h), d // 2)
        self.register_buffer("spatial_pos", torch.cat([sy, sx], dim=-1), persistent=False)

    def _patchify(self, frames: torch.Tensor) -> torch.Tensor:
        # (B, N, H, W, C) -> (B, N*tpf, p*p*C)
        b, n, h, w, c = frames.shape
        p = self.config.patch
        x = frames.view(b, n, h // p, p, w // p, p, c)
        x = x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, n * self.config.tokens_per_frame, p * p * c)
        return x

    def _unpatchify(self, tokens: torch.Tensor, n_frames: int) -> torch.Tensor:
        b = tokens.shape[0]
        p, c = self.config.patch, self.config.channels
        gh, gw = self.config.frame_h // p, self.config.frame_w // p
        x = tokens.view(b, n_frames, gh, gw, p, p, c)
        x = x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, n_frames, self.config.frame_h, self.config.frame_w, c)
        return x

    def _embed(self, frames: torch.Tensor, t_frames: torch.Tensor, cond: torch.Tensor,
               frame_offset: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Token embeddings plus the per-token conditioning vector."""
        b, n = frames.shape[0], frames.shape[1]
        tpf = self.config.tokens_per_frame
        dtype = self.patch_embed.weight.dtype
        x = self.patch_embed(self._patchify(frames))
        temporal = _sincos_positions(torch.arange(frame_offset, frame_offset + n),
                                     self.config.dim).to(dtype)
        x = x + self.spatial_pos.repeat(n, 1) + temporal.repeat_interleave(tpf, dim=0)
        t_emb = self.t_mlp(timestep_embedding(t_frames, self.config.dim).to(dtype))  # (B, N, dim)
        c = t_emb + self.cond_embed(cond)[:, None, :]
        return x, c.repeat_interleave(tpf, dim=1)

    def forward(self, frames: torch.Tensor, t_frames: torch.Tensor, cond: torch.Tensor,
                mask: BlockCausalMask | None = None) -> torch.Tensor:
        """Full-sequence prediction; `mask=None` means full bidirectional attention.

        frames: (B, N, H, W, C); t_frames: (B, N) per-frame timesteps (use
        ChunkLayout.frame_timesteps to expand per-chunk draws); cond: (B,).
        """
        b, n = frames.shape[0], frames.shape[1]
        self._check_inputs(frames, t_frames, cond)
        token_mask = None
        if mask is not None:
            if mask.frames.shape[0] != n:
                raise ValueError("mask size does not match frame count")
            token_mask = mask.tokens(self.config.tokens_per_frame)
        x, c = self._embed(frames, t_frames, cond, frame_offset=0)
        for block in self.blocks:
            x, _ = block(x, c, token_mask)
        sh, sc = self.final_mod(torch.nn.functional.silu(c)).chunk(2, dim=-1)
        out = self.head(self.final_norm(x) * (1 + sc) + sh)
        return self._unpatchify(out, n)

    def forward_incremental(self, cache: KVCache, chunk_frames: torch.Tensor, t,
                            cond: torch.Tensor,
                            ) -> tuple[torch.Tensor, list[tuple[torch.Tensor, torch.Tensor]]]:
        """Predict the current chunk attending over (cache || chunk), unmasked.

        Returns the prediction and the chunk's per-layer KV rows; the cache is
        not modified (commit_chunk appends).
        """
        if cache.n_layers != len(self.blocks) or cache.tokens_per_frame != self.config.tokens_per_frame:
            raise ValueError("cache does not match model configuration")
        b, k = chunk_frames.shape[0], chunk_frames.shape[1]
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t_frames = t.expand(b, k)
        elif t.dim() == 1:
            t_frames = t[:, None].expand(b, k)
        else:
            t_frames = t
        self._check_inputs(chunk_frames, t_frames, cond)
        x, c = self._embed(chunk_frames, t_frames, cond, frame_offset=cache.committed_frames)
        new_kv = []
        for i, block in enumerate(self.blocks):
            past = None if cache.keys[i] is None else (cache.keys[i], cache.values[i])
            x, kv = block(x, c, token_mask=None, past_kv=past)
            new_kv.append(kv)
        sh, sc = self.final_mod(torch.nn.functional.silu(c)).chunk(2, dim=-1)
        out = self.head(self.final_norm(x) * (1 + sc) + sh)
        return self._unpatchify(out, k), new_kv

    def commit_chunk(self, cache: KVCache, clean_chunk: torch.Tensor, cond: torch.Tensor,
                     expect_index: int | None = None) -> KVCache:
        """Run a t=0 pass on the finalized chunk and append its KV rows."""
        if expect_index is not None and expect_index != cache.committed_chunks:
            raise ValueError(
                f"chunk {expect_index} cannot be committed: cache holds {cache.committed_chunks} chunks")
        _, new_kv = self.forward_incremental(cache, clean_chunk, 0, cond)
        cache.append([(k.detach(), v.detach()) for k, v in new_kv])
        return cache

    def make_cache(self, chunk_frames: int) -> KVCache:
        return KVCache(len(self.blocks), chunk_frames, self.config.tokens_per_frame)

    def _check_inputs(self, frames: torch.Tensor, t_frames: torch.Tensor, cond: torch.Tensor):
        cfg = self.config
        if frames.shape[2:] != (cfg.frame_h, cfg.frame_w, cfg.channels):
            raise ValueError(f"frame shape {tuple(frames.shape[2:])} does not match config")
        if t_frames.shape != frames.shape[:2]:
            raise ValueError("per-frame timesteps must be shaped (batch, frames)")
        if torch.any(t_frames < 0) or torch.any(t_frames > cfg.T):
            raise ValueError(f"timesteps out of range [0, {cfg.T}]")
        if torch.any(cond < 0) or torch.any(cond >= cfg.cond_vocab):
            raise ValueError(f"condition id out of range [0, {cfg.cond_vocab})")


def save_weights(model: CausalDiT, path) -> None:
    """Write the CVWT container: magic, version, config block, named f32 tensors."""
    state = model.state_dict()
    names = sorted(state.keys())
    cfg_bytes = json.dumps(dataclasses.asdict(model.config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<I", WEIGHT_VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = state[name].detach().to(torch.float32).contiguous()
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", tensor.dim()))
            f.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
            f.write(tensor.numpy().astype("<f4").tobytes())


def load_weights(path) -> CausalDiT:
    """Read a CVWT container back into a fresh CausalDiT."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise ValueError(f"truncated weight file {path}")
        out = data[off:off + n]
        off += n
        return out

    if take(4) != WEIGHT_MAGIC:
        raise ValueError(f"{path} is not a CVWT weight file")
    (version,) = struct.unpack("<I", take(4))
    if version != WEIGHT_VERSION:
        raise ValueError(f"unsupported weight version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig(**json.loads(take(cfg_len)))
    model = CausalDiT(config)
    (n_tensors,) = struct.unpack("<I", take(4))
    state = {}
    import numpy as np
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(math.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
        state[name] = torch.from_numpy(arr)
    if off != len(data):
        raise ValueError(f"trailing bytes in weight file {path}")
    model.load_state_dict(state, strict=True)
    return model


def weights_checksum(model: CausalDiT) -> str:
    """SHA-256 over the sorted state dict; stable identity for frozen-weight checks."""
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state.keys()):
        h.update(name.encode())
        h.update(state[name].detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()
