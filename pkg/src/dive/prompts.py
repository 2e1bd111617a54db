"""Placeholder tokens, prompt construction and the trainable embedding table.

Identity tokens get seeded random 8-character surfaces and trainable
embedding rows.  Modality-view tokens get surfaces derived from
``(dataset_id, modality, camera_id)`` and frozen rows: what a view looks like
is learned by the low-rank adapters, triggered by the token.
"""

from __future__ import annotations

import enum
import hashlib
import math
import random
import string
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .data import Modality

__all__ = [
    "TokenKind",
    "PlaceholderToken",
    "PromptSpec",
    "EmbeddingTable",
    "PromptEncoder",
    "TokenRegistry",
    "RegistryError",
    "UnregisteredTokenError",
    "build_prompt",
    "prompt_text",
    "encode_prompt",
]

PAD = "<pad>"
ALPHABET = string.ascii_letters + string.digits
SURFACE_LEN = 8
MAX_SURFACE_ATTEMPTS = 100


class RegistryError(ValueError):
    pass


class UnregisteredTokenError(KeyError):
    pass


class TokenKind(str, enum.Enum):
    IDENTITY = "identity"
    MODALITY_VIEW = "modality_view"


@dataclass(frozen=True)
class PlaceholderToken:
    surface: str
    kind: TokenKind
    # identity: (namespace, label); view: (dataset_id, modality, camera_id or None)
    ref: tuple

    def __post_init__(self):
        if len(self.surface) != SURFACE_LEN or not all(c in ALPHABET for c in self.surface):
            raise ValueError(f"surface must be 8 alphanumeric characters, got {self.surface!r}")


@dataclass(frozen=True)
class PromptSpec:
    identity_token: PlaceholderToken | None
    modality_token: PlaceholderToken | None

    def __post_init__(self):
        if self.identity_token is not None and self.identity_token.kind is not TokenKind.IDENTITY:
            raise ValueError("identity_token must be an identity placeholder")
        if (self.modality_token is not None
                and self.modality_token.kind is not TokenKind.MODALITY_VIEW):
            raise ValueError("modality_token must be a modality-view placeholder")


def prompt_text(spec: PromptSpec) -> str:
    """The literal prompt for ``spec``.

    Both tokens give ``a {view} photo of {identity} person``; dropping one of
    them gives the single-token variants used for attention inspection.
    """
    ident, view = spec.identity_token, spec.modality_token
    if ident is not None and view is not None:
        return f"a {view.surface} photo of {ident.surface} person"
    if ident is not None:
        return f"a photo of {ident.surface} person"
    if view is not None:
        return f"a {view.surface} photo of person"
    raise ValueError("prompt needs at least one placeholder token")


def build_prompt(spec: PromptSpec) -> tuple[str, ...]:
    return tuple(prompt_text(spec).split(" "))


def _surface_for(*parts) -> str:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    n = int.from_bytes(digest, "big")
    chars = []
    for _ in range(SURFACE_LEN):
        n, r = divmod(n, len(ALPHABET))
        chars.append(ALPHABET[r])
    return "".join(chars)


def _seed_for(*parts) -> int:
    return int.from_bytes(hashlib.sha256("|".join(map(str, parts)).encode()).digest()[:8], "big")


class EmbeddingTable(nn.Module):
    """Token embedding rows with a per-row trainable mask.

    Gradients of frozen rows are zeroed by a hook, so any first-order optimizer
    without weight decay leaves them bit-identical.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.zeros(0, dim))
        self.register_buffer("trainable_mask", torch.zeros(0, dtype=torch.bool))
        self._hook = None
        self._install_hook()

    def _install_hook(self):
        if self._hook is not None:
            self._hook.remove()
        self._hook = self.weight.register_hook(
            lambda g: g * self.trainable_mask.to(g.dtype).unsqueeze(1))

    def __len__(self) -> int:
        return self.weight.shape[0]

    def add_row(self, vector: torch.Tensor, trainable: bool) -> int:
        vector = torch.as_tensor(vector, dtype=self.weight.dtype).reshape(1, self.dim)
        with torch.no_grad():
            data = torch.cat([self.weight.detach(), vector], dim=0)
        self.weight = nn.Parameter(data)
        self.trainable_mask = torch.cat(
            [self.trainable_mask, torch.tensor([trainable], dtype=torch.bool)])
        self._install_hook()
        return len(self) - 1

    def set_trainable(self, rows: Iterable[int] | None, flag: bool) -> None:
        if rows is None:
            self.trainable_mask[:] = flag
        else:
            self.trainable_mask[list(rows)] = flag

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.weight[ids]

    def _apply(self, fn, *args, **kwargs):
        # dtype/device moves replace the parameter; keep the gradient mask attached
        out = super()._apply(fn, *args, **kwargs)
        self._install_hook()
        return out


def _sinusoid(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe.float()


class PromptEncoder(nn.Module):
    """Embedding lookup followed by fixed positional mixing.

    Output = h + Wo·softmax(hWq (hWk)^T / sqrt(d))·hWv with h = e + pos.
    ``positional=False, mixing=False`` reduces it to a plain lookup.
    """

    def __init__(self, dim: int, max_len: int = 16, positional: bool = True,
                 mixing: bool = True, seed: int = 0):
        super().__init__()
        self.dim, self.max_len = dim, max_len
        self.positional, self.mixing = positional, mixing
        self.register_buffer("pos", _sinusoid(max_len, dim) * 0.5)
        gen = torch.Generator().manual_seed(seed)
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)
        with torch.no_grad():
            for lin in (self.q, self.k, self.v, self.o):
                lin.weight.copy_(torch.randn(dim, dim, generator=gen) / math.sqrt(dim))

    def forward(self, emb: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        L = emb.shape[-2]
        if L > self.max_len:
            raise ValueError(f"prompt of {L} tokens exceeds max_len {self.max_len}")
        h = emb + self.pos[:L].to(emb.dtype) if self.positional else emb
        if not self.mixing:
            return h
        n = self.norm(h)
        scores = self.q(n) @ self.k(n).transpose(-1, -2) / math.sqrt(self.dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[..., None, :], float("-inf"))
        return h + self.o(torch.softmax(scores, dim=-1) @ self.v(n))


class TokenRegistry:
    """Vocabulary, placeholder tokens and their embedding rows.

    Parameters
    ----------
    base_words : sequence of str
        Ordinary vocabulary.  Every word is one token; placeholders must not
        collide with it.
    dim : int
        Embedding width.
    seed : int
        Seed for the base-vocabulary rows.
    """

    def __init__(self, base_words: Sequence[str], dim: int = 64, seed: int = 0):
        self.dim = dim
        self.table = EmbeddingTable(dim)
        self.vocab: dict[str, int] = {}
        self.tokens: dict[str, PlaceholderToken] = {}
        self._by_ref: dict[tuple, PlaceholderToken] = {}
        gen = torch.Generator().manual_seed(seed)
        for word in [PAD, *base_words]:
            if word in self.vocab:
                raise RegistryError(f"duplicate base word {word!r}")
            self.vocab[word] = self.table.add_row(torch.randn(dim, generator=gen), trainable=False)
        self.base_size = len(self.vocab)

    # -- registration -------------------------------------------------------

    def _base_stats(self) -> tuple[torch.Tensor, float]:
        rows = self.table.weight.detach()[1:self.base_size]
        return rows.mean(0), rows.norm(dim=1).mean().item()

    def _add(self, token: PlaceholderToken, row: torch.Tensor, trainable: bool):
        self.vocab[token.surface] = self.table.add_row(row, trainable)
        self.tokens[token.surface] = token
        self._by_ref[(token.kind, token.ref)] = token
        return token

    def register_identity(self, p: int, rng_seed: int, namespace: str = "default") -> PlaceholderToken:
        """Add a trainable identity token ``[p]``.

        The row starts at the base-vocabulary mean plus Gaussian noise with
        standard deviation ``0.02 * mean row norm``.
        """
        ref = (namespace, int(p))
        if (TokenKind.IDENTITY, ref) in self._by_ref:
            raise RegistryError(f"identity {ref} already registered")
        rng = random.Random(rng_seed)
        for _ in range(MAX_SURFACE_ATTEMPTS):
            surface = "".join(rng.choice(ALPHABET) for _ in range(SURFACE_LEN))
            if surface not in self.vocab:
                break
        else:
            raise RegistryError(f"no free surface after {MAX_SURFACE_ATTEMPTS} attempts")
        mean, norm = self._base_stats()
        gen = torch.Generator().manual_seed(rng_seed)
        row = mean + torch.randn(self.dim, generator=gen).to(mean.dtype) * 0.02 * norm
        return self._add(PlaceholderToken(surface, TokenKind.IDENTITY, ref), row, trainable=True)

    def register_view(self, k: Modality | str, camera_id: int | None,
                      dataset_id: str = "default") -> PlaceholderToken:
        """Add a frozen modality-view token; ``camera_id=None`` is the coarse
        per-modality token."""
        k = Modality(k)
        ref = (dataset_id, k.value, camera_id)
        if (TokenKind.MODALITY_VIEW, ref) in self._by_ref:
            raise RegistryError(f"view {ref} already registered")
        surface = _surface_for("view", *ref)
        attempt = 0
        while surface in self.vocab:
            attempt += 1
            if attempt >= MAX_SURFACE_ATTEMPTS:
                raise RegistryError(f"no free surface for view {ref}")
            surface = _surface_for("view", *ref, attempt)
        _, norm = self._base_stats()
        gen = torch.Generator().manual_seed(_seed_for("view-row", *ref) % (2 ** 63))
        row = torch.randn(self.dim, generator=gen)
        row = row / row.norm() * norm
        return self._add(PlaceholderToken(surface, TokenKind.MODALITY_VIEW, ref), row,
                         trainable=False)

    # -- lookup -------------------------------------------------------------

    def identity(self, p: int, namespace: str = "default") -> PlaceholderToken:
        try:
            return self._by_ref[(TokenKind.IDENTITY, (namespace, int(p)))]
        except KeyError:
            raise UnregisteredTokenError(f"identity {(namespace, p)} is not registered") from None

    def view(self, k: Modality | str, camera_id: int | None,
             dataset_id: str = "default") -> PlaceholderToken:
        ref = (dataset_id, Modality(k).value, camera_id)
        try:
            return self._by_ref[(TokenKind.MODALITY_VIEW, ref)]
        except KeyError:
            raise UnregisteredTokenError(f"view {ref} is not registered") from None

    def has(self, surface: str) -> bool:
        return surface in self.tokens

    def token(self, surface: str) -> PlaceholderToken:
        try:
            return self.tokens[surface]
        except KeyError:
            raise UnregisteredTokenError(f"token {surface!r} is not registered") from None

    def identity_tokens(self) -> list[PlaceholderToken]:
        return [t for t in self.tokens.values() if t.kind is TokenKind.IDENTITY]

    def view_tokens(self) -> list[PlaceholderToken]:
        return [t for t in self.tokens.values() if t.kind is TokenKind.MODALITY_VIEW]

    def row(self, surface: str) -> int:
        try:
            return self.vocab[surface]
        except KeyError:
            raise UnregisteredTokenError(f"token {surface!r} has no embedding row") from None

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.row(t) for t in tokens]

    def tokenize(self, text: str) -> list[int]:
        return self.ids(text.split())

    def batch_ids(self, prompts: Sequence[Sequence[str] | str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad tokenized prompts; returns ``(ids, key_mask)`` with
        ``key_mask`` True at real tokens."""
        rows = [self.tokenize(p) if isinstance(p, str) else self.ids(p) for p in prompts]
        L = max(len(r) for r in rows)
        ids = torch.zeros(len(rows), L, dtype=torch.long)
        mask = torch.zeros(len(rows), L, dtype=torch.bool)
        for i, r in enumerate(rows):
            ids[i, :len(r)] = torch.tensor(r, dtype=torch.long)
            mask[i, :len(r)] = True
        return ids, mask

    # -- serialization ------------------------------------------------------

    def state_dict(self) -> dict:
        words = [w for w, i in sorted(self.vocab.items(), key=lambda kv: kv[1])
                 if i < self.base_size]
        return {
            "dim": self.dim,
            "base_words": words[1:],
            "tokens": [(t.surface, t.kind.value, list(t.ref)) for t in self.tokens.values()],
            "weight": self.table.weight.detach().float().clone(),
            "trainable_mask": self.table.trainable_mask.clone(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "TokenRegistry":
        reg = cls(state["base_words"], dim=state["dim"])
        for surface, kind, ref in state["tokens"]:
            token = PlaceholderToken(surface, TokenKind(kind), tuple(ref))
            reg._add(token, torch.zeros(reg.dim), trainable=False)
        with torch.no_grad():
            reg.table.weight.copy_(state["weight"])
        reg.table.trainable_mask.copy_(state["trainable_mask"])
        return reg

    def save(self, path) -> None:
        torch.save({"format": "dive-registry", "version": 1, **self.state_dict()}, path)

    @classmethod
    def load(cls, path) -> "TokenRegistry":
        state = torch.load(path, weights_only=True)
        if state.get("format") != "dive-registry":
            raise RegistryError(f"{path} is not a registry checkpoint")
        return cls.from_state_dict(state)


def encode_prompt(tokens: Sequence[str], registry: TokenRegistry,
                  encoder: PromptEncoder) -> torch.Tensor:
    """Conditioning matrix ``(len(tokens), dim)`` for one prompt."""
    ids = torch.tensor(registry.ids(tokens), dtype=torch.long)
    return encoder(registry.table(ids)[None])[0]

