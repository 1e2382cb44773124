"""Dual-stream joint-attention diffusion transformer predicting a velocity field.

Channel mode (the default) patchifies the conditioned latent
``[z_t | Enc(V) | Resize(M)]`` into one fixed-length token block. Sequence mode
is the comparison baseline: the noisy latent and the visual condition become
separate token blocks, so conditioned tasks double the latent sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from unidiff._runtime import NumericalError
from unidiff.text import L_MAX, VOCABULARY, IdentityEncoder, PromptEmbedder, PromptEmbeddings

SIZE_LADDER = {
    "micro-B": (6, 192, 6),
    "micro-L": (9, 288, 9),
    "micro-XL": (12, 384, 12),
}
MODES = ("channel", "sequence")
# kinds whose input image carries content; t2i and id feed a black V
VISUAL_CONDITION_KINDS = ("inpaint", "outpaint", "edit", "depth", "pose", "seg", "layout")


@dataclass(frozen=True)
class ModelConfig:
    size_tag: str = "micro-XL"
    n_layers: int = 12
    d_model: int = 384
    n_heads: int = 12
    patch: int = 2
    l_max: int = L_MAX
    image_size: int = 64
    codec_factor: int = 2
    mlp_ratio: int = 4
    n_features: int = 4
    id_hidden: int = 256
    time_dim: int = 256
    vocab_size: int = len(VOCABULARY)

    def __post_init__(self):
        if self.size_tag in SIZE_LADDER and SIZE_LADDER[self.size_tag] != (self.n_layers, self.d_model, self.n_heads):
            raise ValueError(f"{self.size_tag} is fixed at layers/dim/heads {SIZE_LADDER[self.size_tag]}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.image_size % self.codec_factor or self.latent_size % self.patch:
            raise ValueError("image size must divide into codec cells and patches")

    @classmethod
    def from_size(cls, size_tag: str, **overrides) -> "ModelConfig":
        if size_tag not in SIZE_LADDER:
            raise ValueError(f"unknown size {size_tag!r}; choose from {sorted(SIZE_LADDER)}")
        n_layers, d_model, n_heads = SIZE_LADDER[size_tag]
        return cls(size_tag=size_tag, n_layers=n_layers, d_model=d_model, n_heads=n_heads, **overrides)

    @property
    def latent_size(self) -> int:
        return self.image_size // self.codec_factor

    @property
    def c_lat(self) -> int:
        return 3 * self.codec_factor**2

    @property
    def c_in(self) -> int:
        return 2 * self.c_lat + 1

    @property
    def n_latent_tokens(self) -> int:
        return (self.latent_size // self.patch) ** 2

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in data:
                kwargs[f.name] = data[f.name] if f.name == "size_tag" else int(data[f.name])
        return cls(**kwargs)


def count_tokens(kind: str, config: ModelConfig, mode: str = "channel") -> int:
    """Length of the joint sequence attention runs over, prompt tokens included."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    n = config.n_latent_tokens
    if mode == "sequence" and kind in VISUAL_CONDITION_KINDS:
        n += config.n_latent_tokens
    return config.l_max + n


def attention_flops(n_tokens: int, config: ModelConfig) -> int:
    """Multiply-adds x2 of the quadratic attention terms (QK^T and AV) over all layers."""
    return config.n_layers * 2 * 2 * n_tokens * n_tokens * config.d_model


def forward_flops(n_tokens: int, config: ModelConfig) -> int:
    d = config.d_model
    linear = 2 * n_tokens * d * (3 * d + d + 2 * config.mlp_ratio * d)
    return attention_flops(n_tokens, config) + config.n_layers * linear


# -- building blocks -------------------------------------------------------------------

def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale[:, None]) + shift[:, None]


def patchify(x: Tensor, p: int) -> Tensor:
    b, h, w, c = x.shape
    x = x.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    b, _, pc = tokens.shape
    c = pc // (p * p)
    x = tokens.reshape(b, h // p, w // p, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def _zero(layer: nn.Linear) -> nn.Linear:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class Stream(nn.Module):
    """One modality's projections inside a joint block."""

    def __init__(self, d: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(approximate="tanh"), nn.Linear(mlp_ratio * d, d))
        self.modulation = _zero(nn.Linear(d, 6 * d))


class JointBlock(nn.Module):
    def __init__(self, d: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.n_heads = n_heads
        self.txt = Stream(d, mlp_ratio)
        self.img = Stream(d, mlp_ratio)

    def _attention(self, q: Tensor, k: Tensor, v: Tensor, key_valid: Tensor) -> Tensor:
        b, n, d = q.shape
        hd = d // self.n_heads
        q, k, v = (x.reshape(b, n, self.n_heads, hd).transpose(1, 2) for x in (q, k, v))
        scores = (q @ k.transpose(-1, -2)) * (hd ** -0.5)
        scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return out.transpose(1, 2).reshape(b, n, d)

    def forward(self, txt: Tensor, img: Tensor, c: Tensor, key_valid: Tensor) -> tuple[Tensor, Tensor]:
        c = F.silu(c)
        mods = []
        qkvs = []
        for stream, x in ((self.txt, txt), (self.img, img)):
            shift1, scale1, gate1, shift2, scale2, gate2 = stream.modulation(c).chunk(6, dim=-1)
            mods.append((gate1, shift2, scale2, gate2))
            qkvs.append(stream.qkv(modulate(stream.norm1(x), shift1, scale1)))
        n_txt = txt.shape[1]
        q, k, v = torch.cat(qkvs, dim=1).chunk(3, dim=-1)
        attn = self._attention(q, k, v, key_valid)
        outs = []
        for (stream, x, (gate1, shift2, scale2, gate2), a) in zip(
            (self.txt, self.img), (txt, img), mods, (attn[:, :n_txt], attn[:, n_txt:])
        ):
            x = x + gate1[:, None] * stream.proj(a)
            x = x + gate2[:, None] * stream.mlp(modulate(stream.norm2(x), shift2, scale2))
            outs.append(x)
        return outs[0], outs[1]


class FinalLayer(nn.Module):
    def __init__(self, d: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.modulation = _zero(nn.Linear(d, 2 * d))
        self.linear = _zero(nn.Linear(d, out_dim))

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self.modulation(F.silu(c)).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class MMDiT(nn.Module):
    """Prompt embedder, identity encoder and joint-attention transformer in one parameter set."""

    def __init__(self, config: ModelConfig, mode: str = "channel"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.config = config
        self.mode = mode
        d, p = config.d_model, config.patch
        self.text = PromptEmbedder(config.vocab_size, config.l_max, d)
        self.identity = IdentityEncoder(d, config.n_features, hidden=config.id_hidden)
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, d), nn.SiLU(), nn.Linear(d, d))
        if mode == "channel":
            self.latent_in = nn.Linear(p * p * config.c_in, d)
        else:
            self.latent_in = nn.Linear(p * p * config.c_lat, d)
            self.cond_in = nn.Linear(p * p * (config.c_lat + 1), d)
            self.segment = nn.Parameter(torch.randn(2, d) * 0.02)
        self.latent_pos = nn.Parameter(torch.randn(config.n_latent_tokens, d) * 0.02)
        self.blocks = nn.ModuleList(JointBlock(d, config.n_heads, config.mlp_ratio) for _ in range(config.n_layers))
        self.final = FinalLayer(d, p * p * config.c_lat)
        self.activation_limit: float | None = None
        self.max_activation = 0.0

    def _check(self, x: Tensor, layer: int) -> None:
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite activation after layer {layer}", layer=layer)
        if self.activation_limit is not None:
            peak = float(x.detach().abs().max())
            self.max_activation = max(self.max_activation, peak)
            if peak > self.activation_limit:
                raise NumericalError(f"activation {peak:.3g} exceeds {self.activation_limit} at layer {layer}",
                                     layer=layer)

    def _time(self, t: Tensor | float, batch: int, dtype) -> Tensor:
        t = torch.as_tensor(t, dtype=dtype)
        if t.ndim == 0:
            t = t.expand(batch)
        if bool(((t < 0) | (t > 1)).any()):
            raise ValueError("t must lie in [0, 1]")
        return self.time_mlp(timestep_embedding(t, self.config.time_dim))

    def _run(self, prompt: PromptEmbeddings, t, latent_tokens: Tensor) -> Tensor:
        rows, valid = prompt.rows, prompt.valid
        if rows.ndim == 2:
            rows, valid = rows.unsqueeze(0), valid.unsqueeze(0)
        b = latent_tokens.shape[0]
        if rows.shape[0] != b:
            rows, valid = rows.expand(b, -1, -1), valid.expand(b, -1)
        if not torch.isfinite(rows).all():
            raise ValueError("non-finite prompt embeddings")
        c = self._time(t, b, latent_tokens.dtype)
        key_valid = torch.cat([valid, torch.ones(latent_tokens.shape[:2], dtype=torch.bool)], dim=1)
        txt, img = rows, latent_tokens
        for i, block in enumerate(self.blocks):
            txt, img = block(txt, img, c, key_valid)
            self._check(img, i)
            self._check(txt, i)
        return self.final(img[:, : self.config.n_latent_tokens], c)

    def forward(self, prompt: PromptEmbeddings, t, d: Tensor) -> Tensor:
        """Velocity for a conditioned latent ``d`` of shape ``(B, h, w, c_in)`` (batch dim optional)."""
        if self.mode != "channel":
            raise RuntimeError("sequence-mode model: call forward_seq_concat")
        squeeze = d.ndim == 3
        if squeeze:
            d = d.unsqueeze(0)
        cfg = self.config
        if tuple(d.shape[1:]) != (cfg.latent_size, cfg.latent_size, cfg.c_in):
            raise ValueError(f"conditioned latent shape {tuple(d.shape)} does not match config")
        if not torch.isfinite(d).all():
            raise ValueError("non-finite conditioned latent")
        tokens = self.latent_in(patchify(d, cfg.patch)) + self.latent_pos
        out = unpatchify(self._run(prompt, t, tokens), cfg.patch, cfg.latent_size, cfg.latent_size)
        return out[0] if squeeze else out

    def forward_sequence(self, prompt: PromptEmbeddings, t, z_t: Tensor, cond: Tensor | None) -> Tensor:
        if self.mode != "sequence":
            raise RuntimeError("channel-mode model: call forward")
        cfg = self.config
        squeeze = z_t.ndim == 3
        if squeeze:
            z_t = z_t.unsqueeze(0)
            cond = None if cond is None else cond.unsqueeze(0)
        if not torch.isfinite(z_t).all() or (cond is not None and not torch.isfinite(cond).all()):
            raise ValueError("non-finite latent input")
        tokens = self.latent_in(patchify(z_t, cfg.patch)) + self.latent_pos + self.segment[0]
        if cond is not None:
            cond_tokens = self.cond_in(patchify(cond, cfg.patch)) + self.latent_pos + self.segment[1]
            tokens = torch.cat([tokens, cond_tokens], dim=1)
        out = unpatchify(self._run(prompt, t, tokens), cfg.patch, cfg.latent_size, cfg.latent_size)
        return out[0] if squeeze else out

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def assemble_input(z_t: Tensor | np.ndarray, v: Tensor | np.ndarray, m: Tensor | np.ndarray) -> Tensor:
    """Channel concatenation ``z_t | v | m`` with the mask as one trailing channel."""
    z_t, v, m = (torch.as_tensor(x) for x in (z_t, v, m))
    if m.ndim == z_t.ndim - 1:
        m = m.unsqueeze(-1)
    if z_t.shape[:-1] != v.shape[:-1] or z_t.shape[:-1] != m.shape[:-1]:
        raise ValueError(f"spatial mismatch: {tuple(z_t.shape)}, {tuple(v.shape)}, {tuple(m.shape)}")
    if z_t.shape[-1] != v.shape[-1] or m.shape[-1] != 1:
        raise ValueError("v must match z_t channels and m must be a single channel")
    dtype = z_t.dtype
    return torch.cat([z_t, v.to(dtype), m.to(dtype)], dim=-1)


def forward_seq_concat(model: MMDiT, prompt: PromptEmbeddings, t, z_t, v=None, m=None) -> Tensor:
    """Baseline: the visual condition is appended as its own token block (none when ``v`` is None)."""
    z_t = torch.as_tensor(z_t)
    cond = None
    if v is not None:
        v, m = torch.as_tensor(v), torch.as_tensor(m)
        if m.ndim == v.ndim - 1:
            m = m.unsqueeze(-1)
        cond = torch.cat([v.to(z_t.dtype), m.to(z_t.dtype)], dim=-1)
    return model.forward_sequence(prompt, t, z_t, cond)


PARAMETER_GROUPS = ("embeddings", "patch", "attention", "mlp", "modulation", "output", "external")


def parameter_group(name: str) -> str:
    if name.startswith("identity."):
        return "external"
    if name.startswith("final.linear"):
        return "output"
    if name.startswith(("text.", "latent_pos", "segment")):
        return "embeddings"
    if name.startswith(("latent_in", "cond_in")):
        return "patch"
    if ".qkv." in name or ".proj." in name:
        return "attention"
    if ".mlp." in name:
        return "mlp"
    if "modulation" in name or name.startswith("time_mlp"):
        return "modulation"
    raise KeyError(name)


@torch.no_grad()
def perturb_parameters(model: nn.Module, std: float = 0.05, seed: int = 0) -> None:
    """Add seeded Gaussian noise to every weight (moves zero-initialised heads off zero)."""
    gen = torch.Generator().manual_seed(seed)
    for p in model.parameters():
        p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
